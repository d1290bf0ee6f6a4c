#pragma once

#include <dpl/losses.hpp>
#include <dpl/ops.hpp>
#include <dpl/random.hpp>
#include <dpl/tape.hpp>
#include <dpl/tensor.hpp>

#include <cmath>
#include <optional>
#include <string>
#include <utility>
#include <vector>

namespace dpl {

/// Per-channel spatial mean and population standard deviation of one C x H x W map.
struct ChannelStats {
    std::vector<double> mean;
    std::vector<double> stddev;
};

inline ChannelStats channel_stats(const Tensor& map)
{
    if (map.rank() != 3 || map.dim(1) * map.dim(2) == 0)
        throw DimensionError("channel_stats expects a non-empty C x H x W map, got " + shape_str(map.shape()));
    const std::size_t c = map.dim(0), hw = map.dim(1) * map.dim(2);
    ChannelStats s{std::vector<double>(c), std::vector<double>(c)};
    for (std::size_t ch = 0; ch < c; ++ch) {
        double sum = 0.0;
        for (std::size_t j = 0; j < hw; ++j)
            sum += map[ch * hw + j];
        const double mu = sum / static_cast<double>(hw);
        double var = 0.0;
        for (std::size_t j = 0; j < hw; ++j) {
            const double d = map[ch * hw + j] - mu;
            var += d * d;
        }
        s.mean[ch] = mu;
        s.stddev[ch] = std::sqrt(var / static_cast<double>(hw));
    }
    return s;
}

inline constexpr double kAdainEps = 1e-5;

/// Re-style each content map with the matching style map's channel statistics:
///   out = sigma(style) * (content - mu(content)) / max(sigma(content), eps) + mu(style)
/// Both inputs are N x C x H x W (spatial sizes may differ). Gradients flow into whatever is
/// not detached; callers detach the style source to block it.
inline Var adain(const Var& content, const Var& style, double eps = kAdainEps)
{
    const Shape& cs = content.shape();
    const Shape& ss = style.shape();
    if (cs.size() != 4 || ss.size() != 4 || cs[0] != ss[0] || cs[1] != ss[1])
        throw DimensionError("adain expects N x C x H x W maps with equal N and C, got " + shape_str(cs) + " and "
                             + shape_str(ss));
    const std::size_t h = cs[2], w = cs[3];
    Var mu_c = broadcast_spatial(spatial_mean(content), h, w);
    Var sd_c = broadcast_spatial(clamp_min(spatial_std(content), eps), h, w);
    Var mu_s = broadcast_spatial(spatial_mean(style), h, w);
    Var sd_s = broadcast_spatial(spatial_std(style), h, w);
    return add(mul(sd_s, div(sub(content, mu_c), sd_c)), mu_s);
}

/// Value-level AdaIN for single C x H x W maps.
inline Tensor adain(const Tensor& content, const Tensor& style, double eps = kAdainEps)
{
    if (content.rank() != 3 || style.rank() != 3)
        throw DimensionError("adain expects C x H x W maps");
    Tape tape;
    Shape c4{1, content.dim(0), content.dim(1), content.dim(2)};
    Shape s4{1, style.dim(0), style.dim(1), style.dim(2)};
    Var out = adain(tape.constant(content.reshaped(c4)), tape.constant(style.reshaped(s4)), eps);
    return out.value().reshaped(content.shape());
}

enum class PairingMode { off, two_pass, cross_batch };

inline std::string to_string(PairingMode m)
{
    switch (m) {
    case PairingMode::off: return "off";
    case PairingMode::two_pass: return "two-pass";
    case PairingMode::cross_batch: return "cross-batch";
    }
    return "?";
}

inline PairingMode pairing_mode_from_string(const std::string& s)
{
    if (s == "off")
        return PairingMode::off;
    if (s == "two-pass")
        return PairingMode::two_pass;
    if (s == "cross-batch")
        return PairingMode::cross_batch;
    throw ContractError("unknown style pairing mode '" + s + "'");
}

struct StyleOptions {
    PairingMode mode = PairingMode::off;
    double eps = kAdainEps;
    /// Detach the style source so it contributes statistics only.
    bool block_source_grad = true;
};

/// Transferred maps for confident samples, labeled with the confident sample's pseudo-label.
struct StyleAugmentation {
    std::vector<std::pair<std::size_t, std::size_t>> pairs; // (content row, style row)
    std::optional<Var> maps;
    PseudoLabelBatch labels;

    bool empty() const noexcept { return pairs.empty(); }
};

/// Pairing state. In cross-batch mode it carries the previous batch's unconfident images
/// (at most one batch worth) so they can be forwarded with the next batch as style sources.
class StylePairing {
public:
    explicit StylePairing(StyleOptions options = {}) : options_(options) {}

    const StyleOptions& options() const noexcept { return options_; }
    PairingMode mode() const noexcept { return options_.mode; }

    const std::optional<Tensor>& carryover() const noexcept { return carry_; }
    std::size_t carried_rows() const noexcept { return carry_ ? carry_->dim(0) : 0; }

    /// Replace the buffer with the unconfident rows of `images` (cross-batch mode only).
    void stash(const Tensor& images, const PseudoLabelBatch& plb)
    {
        if (options_.mode != PairingMode::cross_batch)
            return;
        std::vector<std::size_t> idx = plb.unconfident_indices();
        if (idx.empty())
            carry_.reset();
        else
            carry_ = gather_rows(images, idx);
    }

    void set_carryover(std::optional<Tensor> images) { carry_ = std::move(images); }
    void clear() { carry_.reset(); }

    /// Candidate style-source rows of the forwarded maps. The first `plb.size()` rows are the
    /// current batch; cross-batch sources follow them.
    std::vector<std::size_t> sources(const PseudoLabelBatch& plb) const
    {
        switch (options_.mode) {
        case PairingMode::off: return {};
        case PairingMode::two_pass: return plb.unconfident_indices();
        case PairingMode::cross_batch: {
            std::vector<std::size_t> out;
            for (std::size_t i = 0; i < carried_rows(); ++i)
                out.push_back(plb.size() + i);
            return out;
        }
        }
        return {};
    }

private:
    StyleOptions options_;
    std::optional<Tensor> carry_;
};

/// Draw a style source uniformly (with replacement) for every confident sample.
inline std::vector<std::pair<std::size_t, std::size_t>> draw_pairs(const PseudoLabelBatch& plb,
                                                                   const std::vector<std::size_t>& sources, Rng& rng)
{
    std::vector<std::pair<std::size_t, std::size_t>> pairs;
    if (sources.empty())
        return pairs;
    for (std::size_t a : plb.confident_indices())
        pairs.emplace_back(a, sources[uniform_index(rng, sources.size())]);
    return pairs;
}

/// AdaIN-transfer each pair's style source onto its confident content map.
inline StyleAugmentation transfer_pairs(const Var& style_maps, const PseudoLabelBatch& plb,
                                        std::vector<std::pair<std::size_t, std::size_t>> pairs,
                                        const StyleOptions& options)
{
    StyleAugmentation out;
    out.pairs = std::move(pairs);
    if (out.pairs.empty())
        return out;
    std::vector<std::size_t> a_idx, b_idx, labels;
    for (auto [a, b] : out.pairs) {
        a_idx.push_back(a);
        b_idx.push_back(b);
        labels.push_back(plb.labels.at(a));
    }
    Var content = gather_rows(style_maps, a_idx);
    Var style = gather_rows(style_maps, b_idx);
    if (options.block_source_grad)
        style = detach(style);
    out.maps = adain(content, style, options.eps);
    out.labels = labeled_batch(std::move(labels));
    for (std::size_t i = 0; i < out.pairs.size(); ++i)
        out.labels.confidences[i] = plb.confidences[out.pairs[i].first];
    out.labels.threshold = plb.threshold;
    return out;
}

/// Pair every confident sample with a random style source and transfer its style.
/// Returns an empty augmentation when pairing is off or no source exists.
inline StyleAugmentation pair_and_transfer(const Var& style_maps, const PseudoLabelBatch& plb,
                                           const StylePairing& pairing, Rng& rng)
{
    if (pairing.mode() == PairingMode::off)
        return {};
    return transfer_pairs(style_maps, plb, draw_pairs(plb, pairing.sources(plb), rng), pairing.options());
}

} // namespace dpl
