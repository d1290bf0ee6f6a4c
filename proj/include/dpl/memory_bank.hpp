#pragma once

#include <dpl/losses.hpp>
#include <dpl/tensor.hpp>

#include <vector>

namespace dpl {

/// Per-class pseudo-features, initialized from the classifier prototypes and moved toward the
/// mean of each class's confident features by momentum. Values only; never taped.
class MemoryBank {
public:
    MemoryBank(const Tensor& prototypes, double momentum) : momentum_(momentum)
    {
        if (!(momentum >= 0.0 && momentum <= 1.0))
            throw ContractError("memory momentum must lie in [0, 1]");
        reset(prototypes);
    }

    void reset(const Tensor& prototypes)
    {
        if (prototypes.rank() != 2 || prototypes.dim(0) == 0 || prototypes.dim(1) == 0)
            throw ContractError("memory bank reset expects a non-empty C x d prototype matrix, got "
                                + shape_str(prototypes.shape()));
        if (!features_.empty() && prototypes.shape() != features_.shape())
            throw ContractError("memory bank reset with prototypes of shape " + shape_str(prototypes.shape())
                                + ", bank holds " + shape_str(features_.shape()));
        features_ = prototypes;
        updates_.assign(prototypes.dim(0), 0);
    }

    /// z*_k <- eta z*_k + (1 - eta) mean{z_i : confident, label k}; classes absent from the batch
    /// keep their value.
    void update(const Tensor& features, const PseudoLabelBatch& plb)
    {
        const std::size_t c = features_.dim(0), d = features_.dim(1);
        if (features.rank() != 2 || features.dim(0) != plb.size() || features.dim(1) != d)
            throw DimensionError("memory update features " + shape_str(features.shape()) + " incompatible with bank "
                                 + shape_str(features_.shape()));
        std::vector<double> sums(c * d, 0.0);
        std::vector<std::size_t> counts(c, 0);
        for (std::size_t i = 0; i < plb.size(); ++i) {
            if (!plb.confident[i])
                continue;
            const std::size_t k = plb.labels[i];
            if (k >= c)
                throw ContractError("pseudo-label out of range for memory bank");
            ++counts[k];
            for (std::size_t j = 0; j < d; ++j)
                sums[k * d + j] += features(i, j);
        }
        for (std::size_t k = 0; k < c; ++k) {
            if (counts[k] == 0)
                continue;
            const auto n = static_cast<double>(counts[k]);
            for (std::size_t j = 0; j < d; ++j)
                features_(k, j) = momentum_ * features_(k, j) + (1.0 - momentum_) * (sums[k * d + j] / n);
            ++updates_[k];
        }
    }

    const Tensor& pseudo_features() const noexcept { return features_; }
    double momentum() const noexcept { return momentum_; }
    std::size_t updates(std::size_t k) const { return updates_.at(k); }
    const std::vector<std::size_t>& update_counts() const noexcept { return updates_; }

    /// Replace the state wholesale (run-state restore).
    void load(Tensor features, std::vector<std::size_t> updates)
    {
        if (features.shape() != features_.shape() || updates.size() != features_.dim(0))
            throw ContractError("memory bank state shape mismatch");
        features_ = std::move(features);
        updates_ = std::move(updates);
    }

private:
    Tensor features_;
    std::vector<std::size_t> updates_;
    double momentum_;
};

} // namespace dpl
