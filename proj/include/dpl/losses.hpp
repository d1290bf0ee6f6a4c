#pragma once

#include <dpl/ops.hpp>
#include <dpl/tape.hpp>
#include <dpl/tensor.hpp>

#include <cstdint>
#include <map>
#include <set>
#include <stdexcept>
#include <string>
#include <vector>

namespace dpl {

/// A loss that needs confident samples was given none. Callers skip the update.
class EmptyBatchError : public std::runtime_error {
public:
    EmptyBatchError() : std::runtime_error("no confident samples in batch") {}
};

/// Argmax labels and confidence mask derived from a logits matrix.
struct PseudoLabelBatch {
    std::vector<std::size_t> labels;
    std::vector<double> confidences;
    std::vector<std::uint8_t> confident;
    double threshold = 0.0;

    std::size_t size() const noexcept { return labels.size(); }

    std::size_t confident_count() const
    {
        std::size_t n = 0;
        for (auto c : confident)
            n += c ? 1 : 0;
        return n;
    }

    std::vector<std::size_t> confident_indices() const
    {
        std::vector<std::size_t> out;
        for (std::size_t i = 0; i < confident.size(); ++i)
            if (confident[i])
                out.push_back(i);
        return out;
    }

    std::vector<std::size_t> unconfident_indices() const
    {
        std::vector<std::size_t> out;
        for (std::size_t i = 0; i < confident.size(); ++i)
            if (!confident[i])
                out.push_back(i);
        return out;
    }

    /// Distinct labels among confident samples.
    std::set<std::size_t> present_classes() const
    {
        std::set<std::size_t> out;
        for (std::size_t i = 0; i < labels.size(); ++i)
            if (confident[i])
                out.insert(labels[i]);
        return out;
    }
};

/// Pseudo-labels by argmax of the softmax (ties to the lowest index); confident iff max prob > alpha.
inline PseudoLabelBatch pseudo_label(const Tensor& logits, double alpha)
{
    if (!(alpha > 0.0 && alpha < 1.0))
        throw ContractError("confidence threshold must lie in (0, 1)");
    if (logits.rank() != 2)
        throw DimensionError("pseudo_label expects N x C logits, got " + shape_str(logits.shape()));
    const Tensor probs = softmax_values(logits);
    const std::size_t n = logits.dim(0), c = logits.dim(1);
    PseudoLabelBatch out;
    out.threshold = alpha;
    out.labels.resize(n);
    out.confidences.resize(n);
    out.confident.resize(n);
    for (std::size_t i = 0; i < n; ++i) {
        std::size_t best = 0;
        for (std::size_t k = 1; k < c; ++k)
            if (probs(i, k) > probs(i, best))
                best = k;
        out.labels[i] = best;
        out.confidences[i] = probs(i, best);
        out.confident[i] = probs(i, best) > alpha ? 1 : 0;
    }
    return out;
}

/// All samples confident with the given labels (ground-truth training, augmented views).
inline PseudoLabelBatch labeled_batch(std::vector<std::size_t> labels)
{
    PseudoLabelBatch out;
    out.confidences.assign(labels.size(), 1.0);
    out.confident.assign(labels.size(), 1);
    out.labels = std::move(labels);
    return out;
}

inline PseudoLabelBatch concat(const PseudoLabelBatch& a, const PseudoLabelBatch& b)
{
    PseudoLabelBatch out = a;
    out.labels.insert(out.labels.end(), b.labels.begin(), b.labels.end());
    out.confidences.insert(out.confidences.end(), b.confidences.begin(), b.confidences.end());
    out.confident.insert(out.confident.end(), b.confident.begin(), b.confident.end());
    return out;
}

struct LossValue {
    Var value;
    std::map<std::string, double> terms;
    std::size_t n_confident = 0;
    std::size_t classes_present = 0;

    double item() const { return value.value().item(); }
};

namespace detail {

struct ConfidentRows {
    Var features;
    std::vector<std::size_t> labels;
};

inline ConfidentRows confident_rows(const Var& features, const PseudoLabelBatch& plb)
{
    if (features.shape().size() != 2 || features.shape()[0] != plb.size())
        throw DimensionError("features " + shape_str(features.shape()) + " do not match "
                             + std::to_string(plb.size()) + " pseudo-labels");
    std::vector<std::size_t> idx = plb.confident_indices();
    if (idx.empty())
        throw EmptyBatchError();
    ConfidentRows out;
    for (std::size_t i : idx)
        out.labels.push_back(plb.labels[i]);
    out.features = idx.size() == plb.size() ? features : gather_rows(features, std::move(idx));
    return out;
}

inline void check_labels(const std::vector<std::size_t>& labels, std::size_t classes)
{
    for (std::size_t l : labels)
        if (l >= classes)
            throw ContractError("label " + std::to_string(l) + " out of range for " + std::to_string(classes)
                                + " classes");
}

inline void check_tau(double tau)
{
    if (!(tau > 0.0))
        throw ContractError("temperature must be positive");
}

} // namespace detail

/// Per-sample cross-entropy summands over confident samples, logits = z . W^T (no bias).
inline Var ce_terms(const Var& features, const PseudoLabelBatch& plb, const Var& prototypes)
{
    auto rows = detail::confident_rows(features, plb);
    detail::check_labels(rows.labels, prototypes.shape()[0]);
    return cross_entropy_rows(matmul(rows.features, transpose(prototypes)), std::move(rows.labels));
}

/// Cross-entropy over confident samples, logits = z . W^T (no bias, no temperature).
inline LossValue ce_loss(const Var& features, const PseudoLabelBatch& plb, const Var& prototypes)
{
    Var value = mean(ce_terms(features, plb, prototypes));
    LossValue out{value, {}, plb.confident_count(), plb.present_classes().size()};
    out.terms["ce"] = value.value().item();
    return out;
}

/// Mean Shannon entropy of softmax(logits) over all samples.
inline LossValue entropy_loss(const Var& logits)
{
    if (logits.shape().size() != 2 || logits.shape()[0] == 0)
        throw DimensionError("entropy_loss expects non-empty N x C logits");
    const std::size_t n = logits.shape()[0];
    Var ls = log_softmax(logits);
    Var value = scale(sum(mul(exp(ls), ls)), -1.0 / static_cast<double>(n));
    LossValue out{value, {}, n, 0};
    out.terms["entropy"] = value.value().item();
    return out;
}

/// Per-sample prototype-centric contrast: each confident z_i against its own prototype, with
/// negatives drawn from confident features of other pseudo-classes.
inline LossValue dpl_o_loss(const Var& features, const PseudoLabelBatch& plb, const Var& prototypes, double tau)
{
    detail::check_tau(tau);
    auto rows = detail::confident_rows(features, plb);
    const std::size_t m = rows.labels.size();
    detail::check_labels(rows.labels, prototypes.shape()[0]);
    Var sims = scale(cosine_matrix(prototypes, rows.features), 1.0 / tau); // C x M
    Var own = gather_rows(sims, rows.labels);                                // M x M: row i = w_{y_i}
    Mask den(m * m, 0), num(m * m, 0);
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < m; ++j) {
            den[i * m + j] = (i == j || rows.labels[j] != rows.labels[i]) ? 1 : 0;
            num[i * m + j] = i == j ? 1 : 0;
        }
    Var value = mean(sub(logsumexp_masked(own, den), logsumexp_masked(own, num)));
    LossValue out{value, {}, m, std::set<std::size_t>(rows.labels.begin(), rows.labels.end()).size()};
    out.terms["dpl_o"] = value.value().item();
    return out;
}

/// Per-class DPL* summands, one per pseudo-class present among confident samples (ascending
/// class order). Summand k touches only prototype k.
struct ClassTerms {
    Var terms;
    std::vector<std::size_t> classes;
};

inline ClassTerms dpl_star_terms(const Var& features, const PseudoLabelBatch& plb, const Var& prototypes, double tau)
{
    detail::check_tau(tau);
    auto rows = detail::confident_rows(features, plb);
    const std::size_t m = rows.labels.size();
    detail::check_labels(rows.labels, prototypes.shape()[0]);
    const std::set<std::size_t> present_set(rows.labels.begin(), rows.labels.end());
    std::vector<std::size_t> present(present_set.begin(), present_set.end());
    const std::size_t cp = present.size();
    Var sims = gather_rows(scale(cosine_matrix(prototypes, rows.features), 1.0 / tau), present); // C' x M
    Mask all(cp * m, 1), pos(cp * m, 0);
    for (std::size_t k = 0; k < cp; ++k)
        for (std::size_t j = 0; j < m; ++j)
            pos[k * m + j] = rows.labels[j] == present[k] ? 1 : 0;
    return {sub(logsumexp_masked(sims, all), logsumexp_masked(sims, pos)), std::move(present)};
}

/// Class-level prototype-centric contrast averaged over present pseudo-classes.
inline LossValue dpl_star_loss(const Var& features, const PseudoLabelBatch& plb, const Var& prototypes, double tau)
{
    ClassTerms t = dpl_star_terms(features, plb, prototypes, tau);
    Var value = mean(t.terms);
    LossValue out{value, {}, plb.confident_count(), t.classes.size()};
    out.terms["dpl_star"] = value.value().item();
    return out;
}

/// Memory-bank regularizer summands: prototype w_k against pseudo-feature z*_k, with the other
/// classes' pseudo-features as negatives. One entry per class.
inline Var reg_terms(const Var& prototypes, const Var& pseudo_features, double tau)
{
    detail::check_tau(tau);
    if (prototypes.shape() != pseudo_features.shape())
        throw DimensionError("reg_loss: prototypes " + shape_str(prototypes.shape()) + " vs memory "
                             + shape_str(pseudo_features.shape()));
    const std::size_t c = prototypes.shape()[0];
    Var sims = scale(cosine_matrix(prototypes, pseudo_features), 1.0 / tau); // C x C
    Mask all(c * c, 1), diag(c * c, 0);
    for (std::size_t k = 0; k < c; ++k)
        diag[k * c + k] = 1;
    return sub(logsumexp_masked(sims, all), logsumexp_masked(sims, diag));
}

inline LossValue reg_loss(const Var& prototypes, const Var& pseudo_features, double tau)
{
    Var value = mean(reg_terms(prototypes, pseudo_features, tau));
    LossValue out{value, {}, 0, prototypes.shape()[0]};
    out.terms["reg"] = value.value().item();
    return out;
}

/// DPL* + beta * REG. With no confident samples the DPL* term is dropped and REG still applies.
inline LossValue dpl_loss(const Var& features, const PseudoLabelBatch& plb, const Var& prototypes,
                          const Var& pseudo_features, double tau, double beta)
{
    if (!(beta >= 0.0))
        throw ContractError("beta must be non-negative");
    const bool has_confident = plb.confident_count() > 0;
    if (!has_confident && beta == 0.0)
        throw EmptyBatchError();
    LossValue out;
    if (has_confident) {
        out = dpl_star_loss(features, plb, prototypes, tau);
    }
    if (beta == 0.0)
        return out;
    LossValue reg = reg_loss(prototypes, pseudo_features, tau);
    out.terms["reg"] = reg.item();
    if (has_confident) {
        out.value = add(out.value, scale(reg.value, beta));
    } else {
        out.value = scale(reg.value, beta);
        out.terms["dpl_star"] = 0.0;
    }
    out.terms["dpl"] = out.item();
    return out;
}

} // namespace dpl
