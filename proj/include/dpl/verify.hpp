#pragma once

#include <dpl/gradcheck.hpp>
#include <dpl/losses.hpp>
#include <dpl/memory_bank.hpp>
#include <dpl/model.hpp>
#include <dpl/ops.hpp>
#include <dpl/random.hpp>
#include <dpl/style_transfer.hpp>

#include <algorithm>
#include <cmath>
#include <functional>
#include <sstream>
#include <string>
#include <vector>

namespace dpl::verify {

struct PropertyResult {
    std::string name;
    bool passed = false;
    std::string detail;
};

struct Options {
    std::uint64_t seed = 2024;
    /// Random instances per gradient property.
    std::size_t instances = 20;
    double tolerance = 1e-4;
    /// Adds a property whose backward pass is deliberately wrong (must fail).
    bool inject_fault = false;
};

inline const std::vector<std::string>& suite_names()
{
    static const std::vector<std::string> names{"grad", "losses", "styletx", "memory"};
    return names;
}

// ---------------------------------------------------------------------------------------------
// Random instances

struct LossInstance {
    Tensor features;   // N x d
    Tensor prototypes; // C x d
    Tensor memory;     // C x d
    Tensor logits;     // N x C
    PseudoLabelBatch plb;
    double tau = 0.1;
};

inline Tensor random_normal(Shape shape, Rng& rng, double sd = 1.0)
{
    Tensor t(std::move(shape));
    for (double& v : t.data())
        v = sd * standard_normal(rng);
    return t;
}

/// N in [4, 9], d in [3, 6], C in [2, 4]; about 70% confident, at least one confident sample.
/// With `one_per_class`, confident samples carry pairwise distinct labels.
inline LossInstance random_loss_instance(Rng& rng, bool one_per_class = false)
{
    LossInstance li;
    const std::size_t n = 4 + uniform_index(rng, 6), d = 3 + uniform_index(rng, 4), c = 2 + uniform_index(rng, 3);
    li.features = random_normal(Shape{n, d}, rng);
    li.prototypes = random_normal(Shape{c, d}, rng);
    li.memory = random_normal(Shape{c, d}, rng);
    li.logits = random_normal(Shape{n, c}, rng, 2.0);
    li.tau = uniform(rng, 0.2, 1.0);
    std::vector<std::size_t> labels(n);
    for (auto& l : labels)
        l = uniform_index(rng, c);
    li.plb = labeled_batch(labels);
    for (std::size_t i = 0; i < n; ++i)
        li.plb.confident[i] = uniform01(rng) < 0.7 ? 1 : 0;
    li.plb.confident[uniform_index(rng, n)] = 1;
    if (one_per_class) {
        std::vector<std::uint8_t> taken(c, 0);
        for (std::size_t i = 0; i < n; ++i) {
            if (!li.plb.confident[i])
                continue;
            if (taken[labels[i]])
                li.plb.confident[i] = 0;
            taken[labels[i]] = 1;
        }
    }
    return li;
}

/// A small network for end-to-end checks (6x6 inputs, 2 blocks of 3 and 4 channels, 3 classes).
inline NetConfig tiny_net(NormMode norm = NormMode::batch_norm)
{
    NetConfig c;
    c.in_channels = 2;
    c.image_size = 6;
    c.classes = 3;
    c.block_channels = {3, 4};
    c.norm = norm;
    return c;
}

/// Element i of a 1-D Var as a scalar.
inline Var element(const Var& v, std::size_t i)
{
    return sum(gather_rows(reshape(v, Shape{v.shape()[0], 1}), {i}));
}

// ---------------------------------------------------------------------------------------------
// Parameter-level finite differences for model composites

using ParamLoss = std::function<Var(Tape&)>;

/// Central differences over model parameters; `loss` must rebuild the loss from the current
/// parameter values on a fresh tape.
inline GradCheckResult gradcheck_parameters(const ParamLoss& loss, const std::vector<Parameter*>& params,
                                            const GradCheckOptions& opt = {})
{
    for (Parameter* p : params)
        p->zero_grad();
    {
        Tape tape;
        tape.backward(loss(tape));
    }
    std::vector<Tensor> analytic;
    for (Parameter* p : params)
        analytic.push_back(p->grad);
    auto eval = [&] {
        Tape tape;
        return loss(tape).value().item();
    };
    const double f0 = opt.skip_kinks ? eval() : 0.0;
    GradCheckResult res;
    for (std::size_t i = 0; i < params.size(); ++i) {
        Tensor& w = params[i]->value;
        for (std::size_t j = 0; j < w.size(); ++j) {
            const double orig = w[j];
            w[j] = orig + opt.step;
            const double fp = eval();
            w[j] = orig - opt.step;
            const double fm = eval();
            w[j] = orig;
            const double numeric = (fp - fm) / (2.0 * opt.step);
            if (opt.skip_kinks) {
                const double fwd = (fp - f0) / opt.step, bwd = (f0 - fm) / opt.step;
                if (std::abs(fwd - bwd) > opt.kink_threshold * std::max(1.0, std::abs(numeric))) {
                    ++res.skipped;
                    continue;
                }
            }
            const double a = analytic[i].size() == w.size() ? analytic[i][j] : 0.0;
            const double err = std::abs(a - numeric) / std::max({std::abs(a), std::abs(numeric), opt.relative_floor});
            ++res.checked;
            if (err >= res.max_relative_error) {
                res.max_relative_error = err;
                std::ostringstream os;
                os << params[i]->name << "[" << j << "]: analytic " << a << " vs numeric " << numeric;
                res.worst = os.str();
            }
        }
    }
    return res;
}

/// Full model composite: forward, AdaIN augmentation at the style tap, forward from the
/// transferred maps, DPL (DPL* + REG) over original and augmented features. Pseudo-labels and
/// pairs are fixed from an unperturbed pass. Stop-gradient paths (detached style source, reused
/// normalization statistics) are turned off so the function seen by finite differences is the
/// one being differentiated.
inline Var model_composite_loss(Tape& tape, PrototypeClassifier& model, const Tensor& images,
                                const PseudoLabelBatch& plb, const std::vector<std::pair<std::size_t, std::size_t>>& pairs,
                                const Tensor& memory, double tau, double beta)
{
    ModelOutput out = model.forward(tape, images, {NormStats::batch, false});
    StyleOptions so;
    so.block_source_grad = false;
    StyleAugmentation aug = transfer_pairs(out.style_maps, plb, pairs, so);
    Var features = out.features;
    PseudoLabelBatch labels = plb;
    if (!aug.empty()) {
        ModelOutput tail = model.forward_from_style_maps(tape, *aug.maps, {NormStats::batch, false}, nullptr);
        features = concat_rows({features, tail.features});
        labels = concat(plb, aug.labels);
    }
    return dpl_loss(features, labels, tape.param(model.prototypes()), tape.constant(memory), tau, beta).value;
}

// ---------------------------------------------------------------------------------------------
// Suites

namespace detail {

inline std::string fmt(double v)
{
    std::ostringstream os;
    os.precision(3);
    os << v;
    return os.str();
}

using InstanceLoss = std::function<Var(Tape&, const std::vector<Var>&, const LossInstance&)>;

inline PropertyResult grad_property(const std::string& name, const Options& o, std::uint64_t salt,
                                    const std::function<std::vector<Tensor>(const LossInstance&)>& inputs,
                                    const InstanceLoss& f)
{
    Rng rng = derived_rng(o.seed, salt);
    double worst = 0.0;
    std::string where;
    std::size_t checked = 0;
    for (std::size_t t = 0; t < o.instances; ++t) {
        const LossInstance li = random_loss_instance(rng);
        TapeFunction fn = [&](Tape& tape, const std::vector<Var>& in) { return f(tape, in, li); };
        GradCheckResult r = gradcheck(fn, inputs(li));
        checked += r.checked;
        if (r.max_relative_error >= worst) {
            worst = r.max_relative_error;
            where = "instance " + std::to_string(t) + ", " + r.worst;
        }
    }
    const bool ok = worst <= o.tolerance && checked > 0;
    return {name, ok,
            "max rel err " + fmt(worst) + " over " + std::to_string(o.instances) + " instances ("
                + std::to_string(checked) + " coords)" + (ok ? "" : "; worst " + where)};
}

inline std::vector<PropertyResult> grad_suite(const Options& o)
{
    std::vector<PropertyResult> out;
    auto fw = [](const LossInstance& li) { return std::vector<Tensor>{li.features, li.prototypes}; };
    out.push_back(grad_property("grad/ce", o, 1, fw, [](Tape&, const std::vector<Var>& in, const LossInstance& li) {
        return ce_loss(in[0], li.plb, in[1]).value;
    }));
    out.push_back(grad_property(
        "grad/entropy", o, 2, [](const LossInstance& li) { return std::vector<Tensor>{li.logits}; },
        [](Tape&, const std::vector<Var>& in, const LossInstance&) { return entropy_loss(in[0]).value; }));
    out.push_back(grad_property("grad/dpl-o", o, 3, fw, [](Tape&, const std::vector<Var>& in, const LossInstance& li) {
        return dpl_o_loss(in[0], li.plb, in[1], li.tau).value;
    }));
    out.push_back(
        grad_property("grad/dpl-star", o, 4, fw, [](Tape&, const std::vector<Var>& in, const LossInstance& li) {
            return dpl_star_loss(in[0], li.plb, in[1], li.tau).value;
        }));
    out.push_back(grad_property(
        "grad/reg", o, 5, [](const LossInstance& li) { return std::vector<Tensor>{li.prototypes, li.memory}; },
        [](Tape&, const std::vector<Var>& in, const LossInstance& li) { return reg_loss(in[0], in[1], li.tau).value; }));
    out.push_back(grad_property(
        "grad/dpl", o, 6,
        [](const LossInstance& li) { return std::vector<Tensor>{li.features, li.prototypes, li.memory}; },
        [](Tape&, const std::vector<Var>& in, const LossInstance& li) {
            return dpl_loss(in[0], li.plb, in[1], in[2], li.tau, 0.7).value;
        }));

    // AdaIN on its own: content and style maps both free.
    {
        Rng rng = derived_rng(o.seed, 7);
        double worst = 0.0;
        for (std::size_t t = 0; t < o.instances; ++t) {
            const std::size_t n = 1 + uniform_index(rng, 3), c = 1 + uniform_index(rng, 3);
            Tensor content = random_normal(Shape{n, c, 3, 4}, rng);
            Tensor style = random_normal(Shape{n, c, 4, 3}, rng);
            Tensor probe = random_normal(Shape{n, c, 3, 4}, rng);
            TapeFunction fn = [&](Tape& tape, const std::vector<Var>& in) {
                return sum(mul(adain(in[0], in[1]), tape.constant(probe)));
            };
            worst = std::max(worst, gradcheck(fn, {content, style}).max_relative_error);
        }
        out.push_back({"grad/adain", worst <= o.tolerance, "max rel err " + fmt(worst)});
    }

    // Full model composite with style-transfer augmentation.
    {
        Rng rng = derived_rng(o.seed, 8);
        double worst = 0.0;
        std::size_t checked = 0, skipped = 0;
        std::string where;
        GradCheckOptions gopt;
        gopt.skip_kinks = true;
        for (std::size_t t = 0; t < o.instances; ++t) {
            PrototypeClassifier model(tiny_net(), o.seed + t);
            const std::size_t n = 4 + uniform_index(rng, 3);
            Tensor images(Shape{n, 2, 6, 6});
            for (double& v : images.data())
                v = uniform01(rng);
            std::vector<std::size_t> labels(n);
            for (auto& l : labels)
                l = uniform_index(rng, 3);
            PseudoLabelBatch plb = labeled_batch(labels);
            for (std::size_t i = 0; i < n; ++i)
                plb.confident[i] = i % 2 == 0 ? 1 : 0;
            const auto pairs = draw_pairs(plb, plb.unconfident_indices(), rng);
            const Tensor memory = random_normal(Shape{3, 4}, rng);
            GradCheckResult r = gradcheck_parameters(
                [&](Tape& tape) { return model_composite_loss(tape, model, images, plb, pairs, memory, 0.5, 0.7); },
                model.parameters(), gopt);
            checked += r.checked;
            skipped += r.skipped;
            if (r.max_relative_error >= worst) {
                worst = r.max_relative_error;
                where = r.worst;
            }
        }
        const bool ok = worst <= o.tolerance && checked > 0;
        out.push_back({"grad/model-composite", ok,
                       "max rel err " + fmt(worst) + " (" + std::to_string(checked) + " coords, "
                           + std::to_string(skipped) + " at ReLU kinks skipped)" + (ok ? "" : "; worst " + where)});
    }

    if (o.inject_fault) {
        // square() with a backward that forgets the factor 2
        TapeFunction broken = [](Tape&, const std::vector<Var>& in) {
            const Var& x = in[0];
            Tensor v = x.value();
            for (double& e : v.data())
                e *= e;
            const std::size_t ix = x.id();
            Var y = x.tape().record(std::move(v), {x}, [ix](Tape& t, std::size_t self) {
                if (!t.requires_grad(ix))
                    return;
                const Tensor& g = t.grad(self);
                const Tensor& xv = t.value(ix);
                Tensor& gx = t.grad(ix);
                for (std::size_t i = 0; i < gx.size(); ++i)
                    gx[i] += g[i] * xv[i];
            });
            return sum(y);
        };
        Rng rng = derived_rng(o.seed, 9);
        GradCheckResult r = gradcheck(broken, {random_normal(Shape{5}, rng)});
        out.push_back({"grad/injected-fault", r.passed(o.tolerance), "max rel err " + fmt(r.max_relative_error)});
    }
    return out;
}

inline std::vector<PropertyResult> losses_suite(const Options& o)
{
    std::vector<PropertyResult> out;
    // Decoupling: summand k of DPL* / REG has zero derivative w.r.t. every other prototype.
    {
        Rng rng = derived_rng(o.seed, 21);
        double star_cross = 0.0, reg_cross = 0.0, ce_cross = 0.0;
        for (std::size_t t = 0; t < o.instances; ++t) {
            const LossInstance li = random_loss_instance(rng);
            const std::size_t c = li.prototypes.dim(0);
            auto cross = [&](auto build, std::size_t own_class, std::size_t term) {
                Tape tape;
                Var w = tape.input(li.prototypes);
                Var f = tape.input(li.features);
                Var m = tape.input(li.memory);
                tape.backward(element(build(tape, f, w, m), term));
                const Tensor g = tape.has_grad(w.id()) ? tape.grad(w.id()) : Tensor(w.shape());
                double mx = 0.0;
                for (std::size_t j = 0; j < c; ++j)
                    if (j != own_class)
                        for (std::size_t e = 0; e < g.dim(1); ++e)
                            mx = std::max(mx, std::abs(g(j, e)));
                return mx;
            };
            std::vector<std::size_t> present;
            {
                Tape tp;
                present = dpl_star_terms(tp.constant(li.features), li.plb, tp.constant(li.prototypes), li.tau).classes;
            }
            for (std::size_t k = 0; k < present.size(); ++k)
                star_cross = std::max(star_cross, cross([&](Tape&, Var f, Var w, Var) {
                    return dpl_star_terms(f, li.plb, w, li.tau).terms;
                }, present[k], k));
            for (std::size_t k = 0; k < c; ++k)
                reg_cross = std::max(reg_cross, cross([&](Tape&, Var, Var w, Var m) {
                    return reg_terms(w, m, li.tau);
                }, k, k));
            const auto conf = li.plb.confident_indices();
            for (std::size_t i = 0; i < conf.size(); ++i)
                ce_cross = std::max(ce_cross, cross([&](Tape&, Var f, Var w, Var) {
                    return ce_terms(f, li.plb, w);
                }, li.plb.labels[conf[i]], i));
        }
        out.push_back({"losses/decoupling-dpl-star", star_cross < 1e-12, "max cross-prototype |grad| " + fmt(star_cross)});
        out.push_back({"losses/decoupling-reg", reg_cross < 1e-12, "max cross-prototype |grad| " + fmt(reg_cross)});
        out.push_back({"losses/ce-couples-prototypes", ce_cross > 1e-3, "max cross-prototype |grad| " + fmt(ce_cross)});
    }
    // DPL-o and DPL* agree when every present class has exactly one confident sample.
    {
        Rng rng = derived_rng(o.seed, 22);
        double worst = 0.0;
        for (int t = 0; t < 100; ++t) {
            const LossInstance li = random_loss_instance(rng, true);
            Tape tape;
            Var f = tape.constant(li.features), w = tape.constant(li.prototypes);
            worst = std::max(worst, std::abs(dpl_o_loss(f, li.plb, w, li.tau).item()
                                             - dpl_star_loss(f, li.plb, w, li.tau).item()));
        }
        out.push_back({"losses/dpl-o-equals-dpl-star-singletons", worst <= 1e-9, "max |diff| " + fmt(worst)});
    }
    // Pseudo-labels: ties go to the lowest index, the threshold is strict.
    {
        const PseudoLabelBatch a = pseudo_label(Tensor::matrix({{1.0, 1.0, 0.0}, {0.0, 2.0, 2.0}}), 0.3);
        const PseudoLabelBatch b = pseudo_label(Tensor::matrix({{0.0, 0.0}}), 0.5);
        const bool ok = a.labels == std::vector<std::size_t>{0, 1} && a.confident_count() == 2 && b.labels[0] == 0
                        && b.confident[0] == 0;
        out.push_back({"losses/pseudo-label-ties-and-strict-threshold", ok, ok ? "" : "unexpected labels or mask"});
    }
    // beta = 0 gives DPL* exactly; no confident samples leaves beta * REG.
    {
        Rng rng = derived_rng(o.seed, 23);
        bool ok = true;
        double worst = 0.0;
        for (std::size_t t = 0; t < o.instances; ++t) {
            LossInstance li = random_loss_instance(rng);
            Tape tape;
            Var f = tape.constant(li.features), w = tape.constant(li.prototypes), m = tape.constant(li.memory);
            ok = ok && dpl_loss(f, li.plb, w, m, li.tau, 0.0).item() == dpl_star_loss(f, li.plb, w, li.tau).item();
            PseudoLabelBatch none = li.plb;
            std::fill(none.confident.begin(), none.confident.end(), 0);
            worst = std::max(worst, std::abs(dpl_loss(f, none, w, m, li.tau, 0.5).item()
                                             - 0.5 * reg_loss(w, m, li.tau).item()));
        }
        out.push_back({"losses/dpl-beta-zero-is-dpl-star", ok, ok ? "bit-identical" : "mismatch"});
        out.push_back({"losses/dpl-empty-confident-is-reg", worst <= 1e-12, "max |diff| " + fmt(worst)});
    }
    // Prototype identity: logits[i][k] == features[i] . W[k].
    {
        PrototypeClassifier model(tiny_net(), o.seed);
        Rng rng = derived_rng(o.seed, 24);
        Tensor images(Shape{5, 2, 6, 6});
        for (double& v : images.data())
            v = uniform01(rng);
        Tape tape;
        ModelOutput out_m = model.forward(tape, images);
        const Tensor& z = out_m.features.value();
        const Tensor& w = model.prototypes().value;
        double worst = 0.0;
        for (std::size_t i = 0; i < z.dim(0); ++i)
            for (std::size_t k = 0; k < w.dim(0); ++k) {
                long double dot = 0.0L;
                for (std::size_t e = 0; e < z.dim(1); ++e)
                    dot += static_cast<long double>(z(i, e)) * w(k, e);
                worst = std::max(worst, static_cast<double>(std::abs(dot - out_m.logits.value()(i, k))));
            }
        out.push_back({"losses/prototype-logits", worst <= 1e-12, "max |diff| " + fmt(worst)});
    }
    return out;
}

inline std::vector<PropertyResult> styletx_suite(const Options& o)
{
    std::vector<PropertyResult> out;
    Rng rng = derived_rng(o.seed, 31);
    double stat_err = 0.0, self_err = 0.0;
    for (int t = 0; t < 50; ++t) {
        const std::size_t c = 1 + uniform_index(rng, 4);
        Tensor content = random_normal(Shape{c, 5, 4}, rng);
        Tensor style = random_normal(Shape{c, 3, 6}, rng, uniform(rng, 0.2, 3.0));
        for (double& v : style.data())
            v += 1.5;
        const ChannelStats target = channel_stats(style);
        const ChannelStats got = channel_stats(adain(content, style));
        for (std::size_t ch = 0; ch < c; ++ch)
            stat_err = std::max({stat_err, std::abs(got.mean[ch] - target.mean[ch]),
                                 std::abs(got.stddev[ch] - target.stddev[ch])});
        const Tensor self = adain(content, content);
        for (std::size_t i = 0; i < self.size(); ++i)
            self_err = std::max(self_err, std::abs(self[i] - content[i]));
    }
    out.push_back({"styletx/adain-reproduces-style-stats", stat_err <= 1e-6, "max |stat diff| " + fmt(stat_err)});
    out.push_back({"styletx/adain-self-transfer-identity", self_err <= 1e-9, "max |diff| " + fmt(self_err)});

    PrototypeClassifier model(tiny_net(), o.seed);
    Tensor images(Shape{4, 2, 6, 6});
    for (double& v : images.data())
        v = uniform01(rng);
    {
        Tape tape;
        ModelOutput a = model.forward(tape, images);
        ModelOutput b = model.forward_from_style_maps(tape, a.style_maps);
        const bool same = a.features.value() == b.features.value() && a.logits.value() == b.logits.value();
        out.push_back({"styletx/tap-reinjection-identity", same, same ? "bit-identical" : "features differ"});
        ModelOutput s = model.forward_from_style_maps(tape, adain(a.style_maps, a.style_maps), {}, &a.norms);
        double worst = 0.0;
        for (std::size_t i = 0; i < s.logits.value().size(); ++i)
            worst = std::max(worst, std::abs(s.logits.value()[i] - a.logits.value()[i]));
        out.push_back({"styletx/self-style-logits-identity", worst <= 1e-9, "max |diff| " + fmt(worst)});
    }
    {
        Tape tape;
        Var content = tape.input(random_normal(Shape{2, 3, 4, 4}, rng));
        Var style = tape.input(random_normal(Shape{2, 3, 4, 4}, rng));
        tape.backward(sum(square(adain(content, detach(style)))));
        const bool blocked = !tape.has_grad(style.id())
                             || std::all_of(tape.grad(style.id()).data().begin(), tape.grad(style.id()).data().end(),
                                            [](double g) { return g == 0.0; });
        out.push_back({"styletx/detached-style-source-gets-no-gradient", blocked, blocked ? "" : "gradient leaked"});
    }
    return out;
}

inline std::vector<PropertyResult> memory_suite(const Options& o)
{
    std::vector<PropertyResult> out;
    Rng rng = derived_rng(o.seed, 41);
    double worst = 0.0;
    bool boundaries = true, untouched = true;
    for (std::size_t t = 0; t < o.instances; ++t) {
        LossInstance li = random_loss_instance(rng);
        const double eta = uniform01(rng);
        MemoryBank bank(li.memory, eta);
        bank.update(li.features, li.plb);
        const std::size_t c = li.memory.dim(0), d = li.memory.dim(1);
        for (std::size_t k = 0; k < c; ++k) {
            long double cnt = 0.0L;
            std::vector<long double> s(d, 0.0L);
            for (std::size_t i = 0; i < li.plb.size(); ++i)
                if (li.plb.confident[i] && li.plb.labels[i] == k) {
                    cnt += 1.0L;
                    for (std::size_t e = 0; e < d; ++e)
                        s[e] += li.features(i, e);
                }
            for (std::size_t e = 0; e < d; ++e) {
                if (cnt == 0.0L) {
                    untouched = untouched && bank.pseudo_features()(k, e) == li.memory(k, e);
                    continue;
                }
                const long double oracle = eta * static_cast<long double>(li.memory(k, e)) + (1.0L - eta) * (s[e] / cnt);
                worst = std::max(worst, static_cast<double>(std::abs(oracle - bank.pseudo_features()(k, e))));
            }
        }
        MemoryBank keep(li.memory, 1.0), replace(li.memory, 0.0);
        keep.update(li.features, li.plb);
        replace.update(li.features, li.plb);
        boundaries = boundaries && keep.pseudo_features() == li.memory;
        for (std::size_t k = 0; k < c; ++k) {
            std::vector<double> s(d, 0.0);
            std::size_t cnt = 0;
            for (std::size_t i = 0; i < li.plb.size(); ++i)
                if (li.plb.confident[i] && li.plb.labels[i] == k) {
                    ++cnt;
                    for (std::size_t e = 0; e < d; ++e)
                        s[e] += li.features(i, e);
                }
            for (std::size_t e = 0; e < d; ++e) {
                const double expect = cnt ? s[e] / static_cast<double>(cnt) : li.memory(k, e);
                boundaries = boundaries && replace.pseudo_features()(k, e) == expect;
            }
        }
    }
    out.push_back({"memory/convex-combination-oracle", worst <= 1e-12, "max |diff| " + fmt(worst)});
    out.push_back({"memory/eta-boundaries-exact", boundaries, boundaries ? "eta=1 keeps, eta=0 replaces" : "mismatch"});
    out.push_back({"memory/unobserved-classes-untouched", untouched, untouched ? "bit-identical" : "modified"});
    return out;
}

} // namespace detail

/// Run one suite by name ("grad", "losses", "styletx", "memory" or "all").
inline std::vector<PropertyResult> run_suite(const std::string& suite, const Options& o = {})
{
    if (suite == "all") {
        std::vector<PropertyResult> out;
        for (const auto& s : suite_names()) {
            auto r = run_suite(s, o);
            out.insert(out.end(), r.begin(), r.end());
        }
        return out;
    }
    if (suite == "grad")
        return detail::grad_suite(o);
    if (suite == "losses")
        return detail::losses_suite(o);
    if (suite == "styletx")
        return detail::styletx_suite(o);
    if (suite == "memory")
        return detail::memory_suite(o);
    throw ContractError("unknown verification suite '" + suite + "'");
}

} // namespace dpl::verify
