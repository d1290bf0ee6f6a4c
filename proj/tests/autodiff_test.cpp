#include <dpl/gradcheck.hpp>
#include <dpl/ops.hpp>
#include <dpl/optim.hpp>
#include <dpl/random.hpp>

#include <gtest/gtest.h>

#include <cmath>
#include <random>
#include <string>
#include <vector>

using namespace dpl;

namespace {

Tensor random_tensor(Shape shape, std::uint64_t seed, double lo = -1.0, double hi = 1.0)
{
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> u(lo, hi);
    Tensor t(std::move(shape));
    for (std::size_t i = 0; i < t.size(); ++i)
        t[i] = u(rng);
    return t;
}

// Weighted sum turns any tensor into a scalar with a non-uniform upstream gradient.
Var probe(Tape& tape, const Var& x)
{
    Tensor w(x.shape());
    for (std::size_t i = 0; i < w.size(); ++i)
        w[i] = 0.3 + 0.17 * static_cast<double>(i % 7);
    return sum(mul(x, tape.constant(std::move(w))));
}

void expect_gradcheck(const TapeFunction& f, std::vector<Tensor> inputs, bool skip_kinks = false)
{
    GradCheckOptions opt;
    opt.skip_kinks = skip_kinks;
    const GradCheckResult r = gradcheck(f, std::move(inputs), opt);
    EXPECT_TRUE(r.passed(opt.tolerance)) << r.max_relative_error << " at " << r.worst;
}

} // namespace

TEST(Tape, ChainRuleOnScalarExpression)
{
    Tape tape;
    Var x = tape.input(Tensor::scalar(2.0));
    Var y = mul(x, x);          // x^2
    Var z = add(y, scale(x, 3)); // x^2 + 3x
    tape.backward(z);
    EXPECT_DOUBLE_EQ(z.value().item(), 10.0);
    EXPECT_DOUBLE_EQ(tape.grad(x.id()).item(), 7.0);
}

TEST(Tape, DiamondAccumulatesBothPaths)
{
    Tape tape;
    Var x = tape.input(Tensor::scalar(1.5));
    Var a = exp(x);
    Var b = log(x);
    tape.backward(add(mul(a, b), a));
    const double expect = std::exp(1.5) * std::log(1.5) + std::exp(1.5) / 1.5 + std::exp(1.5);
    EXPECT_NEAR(tape.grad(x.id()).item(), expect, 1e-12);
}

TEST(Tape, ConstantsAndDetachReceiveNoGradient)
{
    Tape tape;
    Var x = tape.input(Tensor::vector({1.0, -2.0}));
    Var c = tape.constant(Tensor::vector({3.0, 4.0}));
    Var d = detach(x);
    tape.backward(sum(add(mul(x, c), mul(d, d))));
    EXPECT_EQ(tape.grad(x.id()), Tensor::vector({3.0, 4.0}));
    EXPECT_FALSE(tape.requires_grad(c.id()));
    EXPECT_FALSE(tape.requires_grad(d.id()));
}

TEST(Tape, ParameterGradientsAccumulateAcrossTapes)
{
    Parameter p("w", Tensor::vector({1.0, 2.0}));
    for (int k = 0; k < 2; ++k) {
        Tape tape;
        tape.backward(sum(square(tape.param(p))));
    }
    EXPECT_EQ(p.grad, Tensor::vector({4.0, 8.0}));
    p.zero_grad();
    EXPECT_EQ(p.grad, Tensor::vector({0.0, 0.0}));
}

TEST(Tape, BackwardContracts)
{
    Tape tape;
    Var x = tape.input(Tensor::vector({1.0, 2.0}));
    EXPECT_THROW(tape.backward(x), ContractError);
    Var s = sum(x);
    tape.backward(s);
    EXPECT_THROW(tape.backward(s), ContractError);

    Tape other;
    Var y = other.input(Tensor::vector({1.0, 2.0}));
    EXPECT_THROW(add(x, y), ContractError);
    EXPECT_THROW(add(x, tape.constant(Tensor::vector({1, 2, 3}))), DimensionError);
}

TEST(GradCheck, Elementwise)
{
    expect_gradcheck(
        [](Tape& t, const std::vector<Var>& v) {
            Var a = v[0], b = v[1];
            Var e = add(sub(mul(a, b), div(a, add_scalar(square(b), 1.0))), scale(exp(a), 0.5));
            return probe(t, add(e, log(add_scalar(square(a), 0.5))));
        },
        {random_tensor({3, 4}, 1), random_tensor({3, 4}, 2)});
    expect_gradcheck([](Tape& t, const std::vector<Var>& v) { return probe(t, sqrt(v[0])); },
                     {random_tensor({5}, 3, 0.5, 2.0)});
}

TEST(GradCheck, ScalarBroadcast)
{
    expect_gradcheck(
        [](Tape& t, const std::vector<Var>& v) { return probe(t, mul(div(v[0], v[1]), add(v[1], v[0]))); },
        {random_tensor({2, 3}, 4), Tensor::scalar(1.7)});
}

TEST(GradCheck, ReluAwayFromKinks)
{
    Tensor x = random_tensor({10}, 5);
    for (std::size_t i = 0; i < x.size(); ++i)
        if (std::abs(x[i]) < 0.05)
            x[i] = 0.3;
    expect_gradcheck([](Tape& t, const std::vector<Var>& v) { return probe(t, relu(v[0])); }, {x});
}

TEST(GradCheck, Reductions)
{
    expect_gradcheck(
        [](Tape& t, const std::vector<Var>& v) {
            Var m = mean_axis(v[0], 0);
            Var s = sum_axis(v[0], 1);
            return add(probe(t, m), add(probe(t, s), mean(square(v[0]))));
        },
        {random_tensor({4, 3}, 6)});
}

TEST(GradCheck, MatmulAndTranspose)
{
    expect_gradcheck(
        [](Tape& t, const std::vector<Var>& v) { return probe(t, matmul(v[0], transpose(v[1]))); },
        {random_tensor({3, 4}, 7), random_tensor({5, 4}, 8)});
}

TEST(GradCheck, SoftmaxFamily)
{
    expect_gradcheck([](Tape& t, const std::vector<Var>& v) { return probe(t, softmax(v[0])); },
                     {random_tensor({3, 5}, 9, -3, 3)});
    expect_gradcheck([](Tape& t, const std::vector<Var>& v) { return probe(t, log_softmax(v[0])); },
                     {random_tensor({3, 5}, 10, -3, 3)});
    Mask mask{1, 0, 1, 1, 0, 1, 1, 1, 0, 0, 0, 1};
    expect_gradcheck(
        [mask](Tape& t, const std::vector<Var>& v) { return probe(t, logsumexp_masked(v[0], mask)); },
        {random_tensor({3, 4}, 11, -3, 3)});
}

TEST(GradCheck, CosineGeometry)
{
    expect_gradcheck(
        [](Tape& t, const std::vector<Var>& v) { return probe(t, cosine_matrix(v[0], v[1])); },
        {random_tensor({3, 4}, 12), random_tensor({2, 4}, 13)});
    expect_gradcheck([](Tape&, const std::vector<Var>& v) { return cosine_similarity(v[0], v[1]); },
                     {random_tensor({6}, 14), random_tensor({6}, 15)});
}

TEST(GradCheck, RowSelection)
{
    expect_gradcheck(
        [](Tape& t, const std::vector<Var>& v) {
            Var g = gather_rows(v[0], {2, 0, 2});
            return probe(t, concat_rows({g, v[1]}));
        },
        {random_tensor({3, 2}, 16), random_tensor({1, 2}, 17)});
}

TEST(GradCheck, ConvolutionAndPooling)
{
    expect_gradcheck(
        [](Tape& t, const std::vector<Var>& v) { return probe(t, global_avg_pool(conv2d(v[0], v[1], v[2], 1))); },
        {random_tensor({2, 2, 4, 4}, 18), random_tensor({3, 2, 3, 3}, 19), random_tensor({3}, 20)});
    expect_gradcheck(
        [](Tape& t, const std::vector<Var>& v) { return probe(t, conv2d(v[0], v[1], v[2], 0)); },
        {random_tensor({1, 1, 4, 4}, 21), random_tensor({2, 1, 3, 3}, 22), random_tensor({2}, 23)});
}

TEST(GradCheck, NormalizationPrimitives)
{
    expect_gradcheck(
        [](Tape& t, const std::vector<Var>& v) { return probe(t, batch_standardize(v[0], 1e-5)); },
        {random_tensor({3, 2, 3, 3}, 24)});
    expect_gradcheck(
        [](Tape& t, const std::vector<Var>& v) { return probe(t, channel_affine(v[0], v[1], v[2])); },
        {random_tensor({2, 3, 2, 2}, 25), random_tensor({3}, 26), random_tensor({3}, 27)});
    expect_gradcheck(
        [](Tape& t, const std::vector<Var>& v) {
            return add(probe(t, spatial_std(v[0])), probe(t, broadcast_spatial(spatial_mean(v[0]), 3, 3)));
        },
        {random_tensor({2, 2, 3, 3}, 28)});
}

TEST(Ops, SoftmaxMatchesExtendedPrecisionOracle)
{
    Tape tape;
    Var p = softmax(tape.constant(Tensor::matrix({{1, 2, 3}})));
    EXPECT_NEAR(p.value()[0], 0.090030573170380458, 1e-15);
    EXPECT_NEAR(p.value()[1], 0.24472847105479765, 1e-15);
    EXPECT_NEAR(p.value()[2], 0.66524095577482189, 1e-15);
}

TEST(Ops, SoftmaxIsShiftStable)
{
    Tape tape;
    Var p = softmax(tape.constant(Tensor::matrix({{1000, 1001, 1002}})));
    EXPECT_NEAR(p.value()[2], 0.66524095577482189, 1e-15);
    Var lp = log_softmax(tape.constant(Tensor::matrix({{-1000, 0}})));
    EXPECT_NEAR(lp.value()[0], -1000.0, 1e-12);
}

TEST(Ops, CosineOfZeroVectorIsRejected)
{
    Tape tape;
    EXPECT_THROW(cosine_similarity(tape.constant(Tensor::vector({0, 0})), tape.constant(Tensor::vector({1, 0}))),
                 DegenerateInputError);
}

TEST(Ops, ConvolutionMatchesDirectSum)
{
    Tensor x = random_tensor({1, 2, 3, 3}, 30);
    Tensor w = random_tensor({1, 2, 3, 3}, 31);
    Tape tape;
    Var y = conv2d(tape.constant(x), tape.constant(w), tape.constant(Tensor::vector({0.25})), 1);
    // Center output sees the whole kernel.
    long double s = 0.25L;
    for (std::size_t c = 0; c < 2; ++c)
        for (std::size_t i = 0; i < 3; ++i)
            for (std::size_t j = 0; j < 3; ++j)
                s += static_cast<long double>(x(0, c, i, j)) * w(0, c, i, j);
    EXPECT_NEAR(y.value()(0, 0, 1, 1), static_cast<double>(s), 1e-14);
    // Corner output sees only the lower-right 2x2 of the kernel.
    long double corner = 0.25L;
    for (std::size_t c = 0; c < 2; ++c)
        for (std::size_t i = 0; i < 2; ++i)
            for (std::size_t j = 0; j < 2; ++j)
                corner += static_cast<long double>(x(0, c, i, j)) * w(0, c, i + 1, j + 1);
    EXPECT_NEAR(y.value()(0, 0, 0, 0), static_cast<double>(corner), 1e-14);
}

TEST(GradCheck, DetectsWrongBackward)
{
    // x^2 with a backward of x instead of 2x.
    const TapeFunction broken = [](Tape& t, const std::vector<Var>& v) {
        const Var& x = v[0];
        Tensor out(x.shape());
        for (std::size_t i = 0; i < out.size(); ++i)
            out[i] = x.value()[i] * x.value()[i];
        const std::size_t ix = x.id();
        Var y = t.record(std::move(out), {x}, [ix](Tape& tp, std::size_t self) {
            for (std::size_t i = 0; i < tp.grad(self).size(); ++i)
                tp.grad(ix)[i] += tp.grad(self)[i] * tp.value(ix)[i];
        });
        return sum(y);
    };
    const GradCheckResult r = gradcheck(broken, {random_tensor({4}, 40, 0.5, 1.0)});
    EXPECT_FALSE(r.passed(1e-4));
    EXPECT_GT(r.max_relative_error, 0.3);
}

TEST(Optimizer, SgdMomentumFirstStep)
{
    Parameter p("p", Tensor::scalar(0.0));
    OptimizerSpec spec;
    spec.kind = OptimizerKind::sgd_momentum;
    spec.lr = 0.1;
    spec.momentum = 0.9;
    Optimizer opt({&p}, spec);
    p.grad = Tensor::scalar(1.0);
    opt.step();
    EXPECT_DOUBLE_EQ(p.value.item(), -0.1);
    opt.step();
    EXPECT_NEAR(p.value.item(), -0.1 - 0.1 * 1.9, 1e-15);
}

TEST(Optimizer, AdamFirstStepMovesByLearningRate)
{
    for (double g : {1e-3, 0.5, 40.0}) {
        Parameter p("p", Tensor::vector({1.0, -1.0}));
        OptimizerSpec spec;
        spec.lr = 1e-3;
        Optimizer opt({&p}, spec);
        p.grad = Tensor::vector({g, -g});
        opt.step();
        EXPECT_NEAR(p.value[0], 1.0 - 1e-3, 1e-8) << g;
        EXPECT_NEAR(p.value[1], -1.0 + 1e-3, 1e-8) << g;
    }
}

TEST(Optimizer, ZeroGradientLeavesParametersUnchanged)
{
    for (OptimizerKind kind : {OptimizerKind::sgd_momentum, OptimizerKind::adam}) {
        Parameter p("p", Tensor::vector({0.3, -0.7, 2.0}));
        OptimizerSpec spec;
        spec.kind = kind;
        spec.lr = 0.5;
        Optimizer opt({&p}, spec);
        p.zero_grad();
        for (int k = 0; k < 3; ++k)
            opt.step();
        EXPECT_EQ(p.value, Tensor::vector({0.3, -0.7, 2.0})) << to_string(kind);
    }
}

TEST(Optimizer, MissingGradientIsAContractError)
{
    Parameter p;
    p.name = "p";
    p.value = Tensor::vector({1.0});
    Optimizer opt({&p}, {});
    EXPECT_THROW(opt.step(), ContractError);
}

TEST(Optimizer, StateRoundTrip)
{
    Parameter a("a", Tensor::vector({1.0, 2.0}));
    Optimizer opt({&a}, {});
    a.grad = Tensor::vector({0.1, -0.2});
    opt.step();
    Parameter b("a", a.value);
    Optimizer other({&b}, {});
    other.load_state(opt.state(), opt.steps());
    a.grad = b.grad = Tensor::vector({0.3, 0.4});
    opt.step();
    other.step();
    EXPECT_EQ(a.value, b.value);
}

TEST(GradCheck, CrossEntropyRows)
{
    expect_gradcheck(
        [](Tape& t, const std::vector<Var>& v) { return probe(t, cross_entropy_rows(v[0], {2, 0, 1, 1})); },
        {random_tensor({4, 3}, 50, -3, 3)});
}

TEST(GradCheck, FixedStatisticStandardization)
{
    const Tensor mean = Tensor::vector({0.2, -0.1}), var = Tensor::vector({0.7, 1.3});
    expect_gradcheck(
        [&](Tape& t, const std::vector<Var>& v) { return probe(t, standardize_with(v[0], mean, var, 1e-5)); },
        {random_tensor({2, 2, 3, 3}, 51)});
}
