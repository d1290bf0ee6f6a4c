#include <dpl/model.hpp>
#include <dpl/style_transfer.hpp>

#include <gtest/gtest.h>

#include <cmath>
#include <set>

using namespace dpl;

namespace {

Tensor random_maps(Shape shape, std::uint64_t seed, double scale = 1.0, double offset = 0.0)
{
    Rng rng(seed);
    Tensor t(std::move(shape));
    for (double& v : t.data())
        v = offset + scale * standard_normal(rng);
    return t;
}

Tensor sample(const Tensor& maps, std::size_t i)
{
    return maps.row(i);
}

PseudoLabelBatch mixed_batch()
{
    // 3 confident (rows 0, 2, 3), 2 unconfident (rows 1, 4).
    PseudoLabelBatch plb = labeled_batch({1, 0, 2, 1, 0});
    plb.confident = {1, 0, 1, 1, 0};
    plb.confidences = {0.95, 0.4, 0.99, 0.91, 0.3};
    plb.threshold = 0.9;
    return plb;
}

} // namespace

TEST(ChannelStats, ConstantMap)
{
    const ChannelStats s = channel_stats(Tensor(Shape{2, 3, 3}, 3.0));
    EXPECT_EQ(s.mean, (std::vector<double>{3.0, 3.0}));
    EXPECT_EQ(s.stddev, (std::vector<double>{0.0, 0.0}));
}

TEST(ChannelStats, HandArithmetic)
{
    const ChannelStats s = channel_stats(Tensor(Shape{1, 2, 2}, std::vector<double>{0, 0, 2, 2}));
    EXPECT_DOUBLE_EQ(s.mean[0], 1.0);
    EXPECT_DOUBLE_EQ(s.stddev[0], 1.0);
}

TEST(ChannelStats, MatchesExtendedPrecisionTwoPass)
{
    const Tensor m = random_maps({4, 5, 7}, 1, 2.5, 10.0);
    const ChannelStats s = channel_stats(m);
    for (std::size_t c = 0; c < 4; ++c) {
        long double mu = 0, var = 0;
        for (std::size_t j = 0; j < 35; ++j)
            mu += m[c * 35 + j];
        mu /= 35;
        for (std::size_t j = 0; j < 35; ++j)
            var += (m[c * 35 + j] - mu) * (m[c * 35 + j] - mu);
        EXPECT_NEAR(s.mean[c], static_cast<double>(mu), 1e-12);
        EXPECT_NEAR(s.stddev[c], static_cast<double>(std::sqrt(var / 35)), 1e-12);
        EXPECT_GE(s.stddev[c], 0.0);
    }
    EXPECT_THROW(channel_stats(Tensor(Shape{4, 5})), DimensionError);
}

TEST(Adain, SelfTransferIsIdentity)
{
    const Tensor f = random_maps({3, 4, 4}, 2);
    const Tensor out = adain(f, f);
    for (std::size_t i = 0; i < f.size(); ++i)
        EXPECT_NEAR(out[i], f[i], 1e-9);
}

TEST(Adain, OutputCarriesStyleStatistics)
{
    for (std::uint64_t seed = 0; seed < 20; ++seed) {
        const Tensor a = random_maps({3, 5, 5}, 10 + seed, 0.5 + 0.1 * static_cast<double>(seed), 1.0);
        const Tensor b = random_maps({3, 4, 6}, 100 + seed, 3.0, -2.0);
        const ChannelStats sb = channel_stats(b);
        const ChannelStats so = channel_stats(adain(a, b));
        for (std::size_t c = 0; c < 3; ++c) {
            EXPECT_NEAR(so.mean[c], sb.mean[c], 1e-6);
            EXPECT_NEAR(so.stddev[c], sb.stddev[c], 1e-6);
        }
    }
}

TEST(Adain, ConstantContentBecomesStyleMean)
{
    const Tensor a(Shape{2, 3, 3}, 4.0);
    const Tensor b = random_maps({2, 3, 3}, 3);
    const Tensor out = adain(a, b);
    const ChannelStats sb = channel_stats(b);
    for (std::size_t c = 0; c < 2; ++c)
        for (std::size_t j = 0; j < 9; ++j) {
            ASSERT_TRUE(std::isfinite(out[c * 9 + j]));
            EXPECT_DOUBLE_EQ(out[c * 9 + j], sb.mean[c]);
        }
}

TEST(Adain, PreservesSpatialArgmax)
{
    for (std::uint64_t seed = 0; seed < 20; ++seed) {
        const Tensor a = random_maps({3, 4, 4}, 200 + seed);
        const Tensor b = random_maps({3, 4, 4}, 300 + seed, 0.2);
        const Tensor out = adain(a, b);
        for (std::size_t c = 0; c < 3; ++c) {
            std::size_t ia = 0, io = 0;
            for (std::size_t j = 1; j < 16; ++j) {
                if (a[c * 16 + j] > a[c * 16 + ia])
                    ia = j;
                if (out[c * 16 + j] > out[c * 16 + io])
                    io = j;
            }
            EXPECT_EQ(ia, io);
        }
    }
}

TEST(Adain, ChannelMismatchIsRejected)
{
    EXPECT_THROW(adain(random_maps({2, 3, 3}, 1), random_maps({3, 3, 3}, 2)), DimensionError);
}

TEST(Adain, DetachedStyleSourceGetsNoGradient)
{
    Tape tape;
    Var content = tape.input(random_maps({1, 2, 3, 3}, 4));
    Var style = tape.input(random_maps({1, 2, 3, 3}, 5));
    tape.backward(sum(square(adain(content, detach(style)))));
    EXPECT_FALSE(tape.has_grad(style.id()));
    EXPECT_TRUE(tape.has_grad(content.id()));
}

TEST(Pairing, TwoPassSourcesAreUnconfidentRows)
{
    const PseudoLabelBatch plb = mixed_batch();
    StylePairing pairing({PairingMode::two_pass});
    EXPECT_EQ(pairing.sources(plb), (std::vector<std::size_t>{1, 4}));
    Rng rng(7);
    const auto pairs = draw_pairs(plb, pairing.sources(plb), rng);
    ASSERT_EQ(pairs.size(), 3u);
    for (auto [a, b] : pairs) {
        EXPECT_TRUE(plb.confident[a]);
        EXPECT_FALSE(plb.confident[b]);
    }
}

TEST(Pairing, TransferCopiesConfidentLabels)
{
    const PseudoLabelBatch plb = mixed_batch();
    Tape tape;
    Var maps = tape.constant(random_maps({5, 2, 4, 4}, 8));
    Rng rng(9);
    const StyleAugmentation aug = pair_and_transfer(maps, plb, StylePairing({PairingMode::two_pass}), rng);
    ASSERT_EQ(aug.pairs.size(), 3u);
    EXPECT_EQ(aug.maps->shape(), (Shape{3, 2, 4, 4}));
    EXPECT_EQ(aug.labels.confident_count(), 3u);
    for (std::size_t i = 0; i < 3; ++i) {
        EXPECT_EQ(aug.labels.labels[i], plb.labels[aug.pairs[i].first]);
        const ChannelStats so = channel_stats(sample(aug.maps->value(), i));
        const ChannelStats sb = channel_stats(sample(maps.value(), aug.pairs[i].second));
        for (std::size_t c = 0; c < 2; ++c)
            EXPECT_NEAR(so.stddev[c], sb.stddev[c], 1e-6);
    }
    // Original confident samples plus their transferred copies.
    EXPECT_EQ(plb.confident_count() + aug.labels.confident_count(), 2 * plb.confident_count());
}

TEST(Pairing, NoUnconfidentSamplesMeansNoAugmentation)
{
    const PseudoLabelBatch plb = labeled_batch({0, 1, 1});
    Tape tape;
    Var maps = tape.constant(random_maps({3, 2, 4, 4}, 10));
    Rng rng(11);
    EXPECT_TRUE(pair_and_transfer(maps, plb, StylePairing({PairingMode::two_pass}), rng).empty());
    EXPECT_TRUE(pair_and_transfer(maps, mixed_batch(), StylePairing({PairingMode::off}), rng).empty());
}

TEST(Pairing, FixedSeedReproducesPairs)
{
    const PseudoLabelBatch plb = mixed_batch();
    const std::vector<std::size_t> src{1, 4};
    Rng a(12), b(12);
    EXPECT_EQ(draw_pairs(plb, src, a), draw_pairs(plb, src, b));
}

TEST(Pairing, SamplingWithReplacementCoversSources)
{
    PseudoLabelBatch plb = labeled_batch(std::vector<std::size_t>(40, 0));
    plb.confident.assign(40, 1);
    plb.confident[5] = 0;
    plb.confident[17] = 0;
    Rng rng(13);
    std::set<std::size_t> used;
    for (auto [a, b] : draw_pairs(plb, plb.unconfident_indices(), rng))
        used.insert(b);
    EXPECT_EQ(used, (std::set<std::size_t>{5, 17}));
}

TEST(Pairing, CrossBatchCarriesOneBatchOfUnconfidentImages)
{
    StylePairing pairing({PairingMode::cross_batch});
    const PseudoLabelBatch plb = mixed_batch();
    const Tensor images = random_maps({5, 1, 2, 2}, 14);
    EXPECT_TRUE(pairing.sources(plb).empty());
    pairing.stash(images, plb);
    ASSERT_EQ(pairing.carried_rows(), 2u);
    EXPECT_EQ(pairing.carryover()->row(0), images.row(1));
    EXPECT_EQ(pairing.carryover()->row(1), images.row(4));
    EXPECT_EQ(pairing.sources(plb), (std::vector<std::size_t>{5, 6}));

    // The next batch replaces the buffer rather than growing it.
    PseudoLabelBatch next = labeled_batch({0, 1, 2});
    next.confident = {0, 1, 1};
    pairing.stash(random_maps({3, 1, 2, 2}, 15), next);
    EXPECT_EQ(pairing.carried_rows(), 1u);
    pairing.stash(random_maps({3, 1, 2, 2}, 16), labeled_batch({0, 1, 2}));
    EXPECT_EQ(pairing.carried_rows(), 0u);
}

TEST(Pairing, ModeStrings)
{
    for (PairingMode m : {PairingMode::off, PairingMode::two_pass, PairingMode::cross_batch})
        EXPECT_EQ(pairing_mode_from_string(to_string(m)), m);
    EXPECT_THROW(pairing_mode_from_string("single"), ContractError);
}

TEST(StyleTap, InjectionThroughModel)
{
    NetConfig cfg;
    cfg.in_channels = 2;
    cfg.image_size = 6;
    cfg.classes = 3;
    cfg.block_channels = {4, 5};
    PrototypeClassifier model(cfg, 21);
    const Tensor batch = random_maps({2, 2, 6, 6}, 22);
    Tape tape;
    ModelOutput out = model.forward(tape, batch);

    ModelOutput same = model.forward_from_style_maps(tape, out.style_maps, {}, &out.norms);
    EXPECT_EQ(same.features.value(), out.features.value());

    ModelOutput self = model.forward_from_style_maps(tape, adain(out.style_maps, out.style_maps), {}, &out.norms);
    for (std::size_t i = 0; i < out.logits.value().size(); ++i)
        EXPECT_NEAR(self.logits.value()[i], out.logits.value()[i], 1e-9);

    Var a = gather_rows(out.style_maps, {0, 0});
    Var b = gather_rows(out.style_maps, {1, 1});
    ModelOutput crossed = model.forward_from_style_maps(tape, adain(a, b), {}, &out.norms);
    double diff = 0;
    for (std::size_t k = 0; k < 3; ++k)
        diff += std::abs(crossed.logits.value()(0, k) - out.logits.value()(0, k));
    EXPECT_GT(diff, 1e-6);
}
