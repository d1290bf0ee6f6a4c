#include <dpl/memory_bank.hpp>

#include <gtest/gtest.h>

#include <random>

using namespace dpl;

namespace {

Tensor random_matrix(std::size_t rows, std::size_t cols, std::uint64_t seed)
{
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> d(0.0, 1.0);
    Tensor t(Shape{rows, cols});
    for (double& v : t.data())
        v = d(rng);
    return t;
}

} // namespace

TEST(MemoryBank, InitializesFromPrototypes)
{
    const Tensor w = random_matrix(3, 4, 1);
    MemoryBank bank(w, 0.9);
    EXPECT_EQ(bank.pseudo_features(), w);
    EXPECT_EQ(bank.update_counts(), (std::vector<std::size_t>{0, 0, 0}));
}

TEST(MemoryBank, MomentumOneFreezes)
{
    const Tensor w = random_matrix(2, 3, 2);
    MemoryBank bank(w, 1.0);
    bank.update(random_matrix(4, 3, 3), labeled_batch({0, 1, 1, 0}));
    EXPECT_EQ(bank.pseudo_features(), w);
}

TEST(MemoryBank, MomentumZeroIsBatchMean)
{
    MemoryBank bank(Tensor::matrix({{5, 5}, {-1, 3}}), 0.0);
    bank.update(Tensor::matrix({{0, 2}, {2, 0}}), labeled_batch({0, 0}));
    EXPECT_EQ(bank.pseudo_features(), Tensor::matrix({{1, 1}, {-1, 3}}));
    EXPECT_EQ(bank.updates(0), 1u);
    EXPECT_EQ(bank.updates(1), 0u);
}

TEST(MemoryBank, HalfMomentumIsMidpoint)
{
    MemoryBank bank(Tensor::matrix({{1, 0}}), 0.5);
    bank.update(Tensor::matrix({{0, 1}}), labeled_batch({0}));
    EXPECT_EQ(bank.pseudo_features(), Tensor::matrix({{0.5, 0.5}}));
}

TEST(MemoryBank, ResetRestoresPrototypesAndIsIdempotent)
{
    const Tensor w = random_matrix(3, 2, 4);
    MemoryBank bank(w, 0.3);
    bank.update(random_matrix(5, 2, 5), labeled_batch({0, 1, 2, 2, 1}));
    bank.reset(w);
    EXPECT_EQ(bank.pseudo_features(), w);
    EXPECT_EQ(bank.update_counts(), (std::vector<std::size_t>{0, 0, 0}));
    bank.reset(w);
    EXPECT_EQ(bank.pseudo_features(), w);
    EXPECT_THROW(bank.reset(random_matrix(2, 2, 6)), ContractError);
}

TEST(MemoryBank, ConvexCombinationOracle)
{
    for (std::uint64_t seed = 0; seed < 20; ++seed) {
        const Tensor w = random_matrix(4, 3, 100 + seed);
        const double eta = 0.05 * static_cast<double>(seed);
        MemoryBank bank(w, eta);
        const Tensor z = random_matrix(9, 3, 200 + seed);
        PseudoLabelBatch plb = pseudo_label(random_matrix(9, 4, 300 + seed), 0.35);
        bank.update(z, plb);
        for (std::size_t k = 0; k < 4; ++k) {
            long double n = 0;
            std::vector<long double> s(3, 0);
            for (std::size_t i = 0; i < 9; ++i)
                if (plb.confident[i] && plb.labels[i] == k) {
                    ++n;
                    for (std::size_t j = 0; j < 3; ++j)
                        s[j] += z(i, j);
                }
            for (std::size_t j = 0; j < 3; ++j) {
                const double expect =
                    n == 0 ? w(k, j) : static_cast<double>(eta * w(k, j) + (1 - eta) * (s[j] / n));
                if (n == 0) {
                    EXPECT_EQ(bank.pseudo_features()(k, j), expect);
                } else {
                    EXPECT_NEAR(bank.pseudo_features()(k, j), expect, 1e-12);
                }
            }
        }
    }
}

TEST(MemoryBank, UnobservedClassesKeepInitialization)
{
    const Tensor w = random_matrix(5, 3, 7);
    MemoryBank bank(w, 0.6);
    for (std::uint64_t b = 0; b < 10; ++b)
        bank.update(random_matrix(4, 3, 10 + b), labeled_batch({0, 2, 2, 0}));
    for (std::size_t k : {1u, 3u, 4u})
        for (std::size_t j = 0; j < 3; ++j)
            EXPECT_EQ(bank.pseudo_features()(k, j), w(k, j));
    EXPECT_EQ(bank.updates(0), 10u);
}

TEST(MemoryBank, UnconfidentSamplesAreIgnored)
{
    MemoryBank bank(Tensor::matrix({{0, 0}}), 0.0);
    PseudoLabelBatch plb = labeled_batch({0, 0});
    plb.confident = {1, 0};
    bank.update(Tensor::matrix({{2, 4}, {100, 100}}), plb);
    EXPECT_EQ(bank.pseudo_features(), Tensor::matrix({{2, 4}}));
}

TEST(MemoryBank, Contracts)
{
    EXPECT_THROW(MemoryBank(Tensor::matrix({{1}}), 1.5), ContractError);
    EXPECT_THROW(MemoryBank(Tensor::matrix({{1}}), -0.1), ContractError);
    EXPECT_THROW(MemoryBank(Tensor::vector({1, 2}), 0.5), ContractError);
    MemoryBank bank(Tensor::matrix({{1, 0}, {0, 1}}), 0.5);
    EXPECT_THROW(bank.update(Tensor::matrix({{1, 0, 0}}), labeled_batch({0})), DimensionError);
    EXPECT_THROW(bank.update(Tensor::matrix({{1, 0}}), labeled_batch({2})), ContractError);
}

TEST(MemoryBank, RegAgainstResetBankMatchesSelfMemoryOracle)
{
    const Tensor w = Tensor::matrix({{1, 0}, {0, 1}});
    MemoryBank bank(w, 0.9);
    bank.update(Tensor::matrix({{0.3, 0.8}}), labeled_batch({0}));
    bank.reset(w);
    Tape t;
    EXPECT_NEAR(reg_loss(t.constant(w), t.constant(bank.pseudo_features()), 1.0).item(), 0.31326168751822283, 1e-15);
}
