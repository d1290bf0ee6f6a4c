#pragma once

#include <dpl/binio.hpp>
#include <dpl/losses.hpp>
#include <dpl/memory_bank.hpp>
#include <dpl/model.hpp>
#include <dpl/optim.hpp>
#include <dpl/random.hpp>
#include <dpl/style_transfer.hpp>
#include <dpl/synthdata.hpp>

#include "json.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <map>
#include <memory>
#include <numeric>
#include <optional>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

namespace dpl {

enum class Method { source_frozen, pl_ce, entropy, dpl_o, dpl_star, dpl_full };

inline std::string to_string(Method m)
{
    switch (m) {
    case Method::source_frozen: return "source-frozen";
    case Method::pl_ce: return "pl-ce";
    case Method::entropy: return "entropy";
    case Method::dpl_o: return "dpl-o";
    case Method::dpl_star: return "dpl-star";
    case Method::dpl_full: return "dpl-full";
    }
    return "?";
}

inline Method method_from_string(const std::string& s)
{
    for (Method m : {Method::source_frozen, Method::pl_ce, Method::entropy, Method::dpl_o, Method::dpl_star,
                     Method::dpl_full})
        if (to_string(m) == s)
            return m;
    throw ContractError("unknown method '" + s + "'");
}

enum class ResetPolicy { never, on_domain_change };

inline std::string to_string(ResetPolicy r) { return r == ResetPolicy::never ? "never" : "on-domain-change"; }

inline ResetPolicy reset_policy_from_string(const std::string& s)
{
    if (s == "never")
        return ResetPolicy::never;
    if (s == "on-domain-change")
        return ResetPolicy::on_domain_change;
    throw ContractError("unknown reset policy '" + s + "'");
}

struct AdaptConfig {
    Method method = Method::dpl_full;
    double alpha = 0.9;
    double tau = 0.1;
    double eta = 0.9;
    double beta = 1.0;
    std::size_t batch_size = 32;
    int steps_per_batch = 1;
    ParamScope scope = ParamScope::full;
    OptimizerSpec optimizer{};
    StyleOptions style{};
    ResetPolicy reset = ResetPolicy::on_domain_change;
    NormStats norm_stats = NormStats::batch;
    /// With two steps per batch, re-derive pseudo-labels from the refreshed forward pass.
    bool refresh_pseudo_labels = false;
    /// dpl-full only: skip the whole update (not just the DPL* term) when nothing is confident.
    bool skip_empty_batches = false;
    /// dpl-full only: let the REG gradient flow through the batch's contribution to the memory.
    bool memory_grad = false;
    /// Recompute normalization statistics on the style-transferred pass instead of reusing the first pass.
    bool second_pass_batch_stats = false;
    std::uint64_t seed = 0;

    /// Throws ContractError naming the offending key.
    void validate() const
    {
        if (!(alpha > 0.0 && alpha < 1.0))
            throw ContractError("alpha must lie in (0, 1)");
        if (!(tau > 0.0))
            throw ContractError("tau must be positive");
        if (!(eta >= 0.0 && eta <= 1.0))
            throw ContractError("eta must lie in [0, 1]");
        if (!(beta >= 0.0))
            throw ContractError("beta must be non-negative");
        if (batch_size < 1)
            throw ContractError("batch_size must be at least 1");
        if (steps_per_batch != 1 && steps_per_batch != 2)
            throw ContractError("steps_per_batch must be 1 or 2");
        if (!(optimizer.lr >= 0.0))
            throw ContractError("lr must be non-negative");
    }
};

struct IterationRecord {
    std::size_t batch_index = 0;
    int domain = 0;
    std::size_t samples = 0;
    std::size_t n_confident = 0;
    std::size_t n_augmented = 0;
    /// Loss of the first optimizer step; NaN when no update was made.
    double loss = std::numeric_limits<double>::quiet_NaN();
    std::map<std::string, double> terms;
    bool updated = false;
    bool reset = false;
    double cum_acc = 0.0;
    std::vector<std::size_t> predicted_counts;
};

struct AdaptationTrace {
    std::string method;
    std::uint64_t seed = 0;
    std::vector<IterationRecord> records;
    std::vector<int> predictions;       // stream order
    std::vector<std::size_t> sample_ids; // stream order
    std::vector<std::size_t> predicted_histogram;
    std::vector<std::size_t> truth_histogram;
    std::size_t correct = 0;
    std::size_t seen = 0;
    bool diverged = false;
    std::string diagnostic;

    double accuracy() const { return seen ? static_cast<double>(correct) / static_cast<double>(seen) : 0.0; }
    double error_rate() const { return 1.0 - accuracy(); }
};

/// Observer for engine events ("predict", "update", "reset") with the batch index.
using EngineObserver = std::function<void(std::string_view event, std::size_t batch)>;

/// Resumable snapshot of an adaptation run.
struct RunState {
    AdaptConfig config;
    Checkpoint source;
    Checkpoint model;
    Tensor memory;
    std::vector<std::size_t> memory_updates;
    std::vector<NamedTensor> optimizer_state;
    std::size_t optimizer_steps = 0;
    std::optional<Tensor> carryover;
    std::optional<int> current_domain;
    std::size_t cursor = 0;
    std::string rng_state;
    AdaptationTrace trace;
};

inline std::vector<std::size_t> argmax_rows(const Tensor& logits)
{
    std::vector<std::size_t> out(logits.dim(0));
    for (std::size_t i = 0; i < logits.dim(0); ++i) {
        std::size_t best = 0;
        for (std::size_t k = 1; k < logits.dim(1); ++k)
            if (logits(i, k) > logits(i, best))
                best = k;
        out[i] = best;
    }
    return out;
}

/// One online adaptation run: predict each batch, then adapt on it.
class AdaptSession {
public:
    AdaptSession(const Checkpoint& source, AdaptConfig config, EngineObserver observer = {})
        : source_(source), config_(std::move(config)), model_(std::make_unique<PrototypeClassifier>(source)),
          bank_(model_->prototypes().value, config_.eta),
          optimizer_(model_->select_params(config_.scope), config_.optimizer), pairing_(config_.style),
          rng_(derived_rng(config_.seed, 0x57e)), observer_(std::move(observer))
    {
        config_.validate();
        trace_.method = to_string(config_.method);
        trace_.seed = config_.seed;
        trace_.predicted_histogram.assign(model_->classes(), 0);
        trace_.truth_histogram.assign(model_->classes(), 0);
    }

    const AdaptConfig& config() const noexcept { return config_; }
    const AdaptationTrace& trace() const noexcept { return trace_; }
    PrototypeClassifier& model() noexcept { return *model_; }
    const MemoryBank& memory() const noexcept { return bank_; }
    std::size_t cursor() const noexcept { return cursor_; }
    bool aborted() const noexcept { return trace_.diverged; }

    void process(const StreamBatch& batch)
    {
        if (trace_.diverged)
            return;
        IterationRecord rec;
        rec.batch_index = batch.index();
        rec.domain = batch.domain();
        rec.samples = batch.size();
        if (config_.reset == ResetPolicy::on_domain_change && current_domain_ && *current_domain_ != batch.domain()) {
            reset_to_source();
            rec.reset = true;
            notify("reset", batch.index());
        }
        current_domain_ = batch.domain();

        const BatchView view = batch.view();
        const std::size_t n = view.images.dim(0);
        const std::optional<Tensor> carried = pairing_.carryover();

        model_->zero_grad();
        auto tape = std::make_unique<Tape>();
        ModelOutput out = forward_with_carry(*tape, view.images, carried);
        const Tensor logits = current_rows(out.logits.value(), n);
        notify("predict", batch.index());
        record_predictions(batch, logits, rec);
        if (!std::all_of(logits.data().begin(), logits.data().end(), [](double v) { return std::isfinite(v); }))
            abort_run(batch.index(), "non-finite logits");

        if (config_.method != Method::source_frozen && !trace_.diverged) {
            PseudoLabelBatch plb = pseudo_label(logits, config_.alpha);
            rec.n_confident = plb.confident_count();
            const Tensor features = current_rows(out.features.value(), n);
            auto pairs = uses_style() ? draw_pairs(plb, pairing_.sources(plb), rng_)
                                      : std::vector<std::pair<std::size_t, std::size_t>>{};
            rec.n_augmented = pairs.size();
            for (int step = 0; step < config_.steps_per_batch && !trace_.diverged; ++step) {
                if (step > 0) {
                    model_->zero_grad();
                    tape = std::make_unique<Tape>();
                    out = forward_with_carry(*tape, view.images, carried);
                    if (config_.refresh_pseudo_labels) {
                        plb = pseudo_label(current_rows(out.logits.value(), n), config_.alpha);
                        pairs = uses_style() ? draw_pairs(plb, pairing_.sources(plb), rng_) : decltype(pairs){};
                    }
                }
                std::optional<LossValue> loss = build_loss(*tape, out, n, plb, pairs, features);
                if (!loss)
                    break;
                const double value = loss->item();
                if (step == 0) {
                    rec.loss = value;
                    rec.terms = loss->terms;
                }
                if (!std::isfinite(value)) {
                    abort_run(batch.index(), "non-finite loss " + std::to_string(value));
                    break;
                }
                tape->backward(loss->value);
                optimizer_.step();
                rec.updated = true;
                notify("update", batch.index());
                if (!parameters_finite()) {
                    abort_run(batch.index(), "non-finite parameter after update");
                    break;
                }
            }
            if (config_.method == Method::dpl_full && !trace_.diverged)
                bank_.update(features, plb);
            pairing_.stash(view.images, plb);
        }
        rec.cum_acc = trace_.accuracy();
        trace_.records.push_back(std::move(rec));
        ++cursor_;
    }

    RunState save_state() const
    {
        RunState s;
        s.config = config_;
        s.source = source_;
        s.model = model_->snapshot();
        s.memory = bank_.pseudo_features();
        s.memory_updates = bank_.update_counts();
        s.optimizer_state = optimizer_.state();
        s.optimizer_steps = optimizer_.steps();
        s.carryover = pairing_.carryover();
        s.current_domain = current_domain_;
        s.cursor = cursor_;
        std::ostringstream os;
        os << rng_;
        s.rng_state = os.str();
        s.trace = trace_;
        return s;
    }

    static AdaptSession resume(const RunState& s, EngineObserver observer = {})
    {
        AdaptSession session(s.source, s.config, std::move(observer));
        session.model_->restore(s.model);
        session.bank_.load(s.memory, s.memory_updates);
        session.optimizer_.load_state(s.optimizer_state, s.optimizer_steps);
        session.pairing_.set_carryover(s.carryover);
        session.current_domain_ = s.current_domain;
        session.cursor_ = s.cursor;
        std::istringstream is(s.rng_state);
        is >> session.rng_;
        session.trace_ = s.trace;
        return session;
    }

private:
    bool uses_style() const
    {
        return config_.style.mode != PairingMode::off && config_.method != Method::entropy
               && config_.method != Method::source_frozen;
    }

    ModelOutput forward_with_carry(Tape& tape, const Tensor& images, const std::optional<Tensor>& carried)
    {
        const ForwardOptions opt{config_.norm_stats, false};
        if (carried && config_.style.mode == PairingMode::cross_batch && uses_style()) {
            const Tensor parts[2] = {images, *carried};
            return model_->forward(tape, concat_rows(std::span<const Tensor>(parts)), opt);
        }
        return model_->forward(tape, images, opt);
    }

    static Tensor current_rows(const Tensor& t, std::size_t n) { return t.dim(0) == n ? t : t.slice_rows(0, n); }

    static Var current_rows(const Var& v, std::size_t n)
    {
        if (v.shape()[0] == n)
            return v;
        std::vector<std::size_t> idx(n);
        std::iota(idx.begin(), idx.end(), std::size_t{0});
        return gather_rows(v, std::move(idx));
    }

    std::optional<LossValue> build_loss(Tape& tape, const ModelOutput& out, std::size_t n, const PseudoLabelBatch& plb,
                                        const std::vector<std::pair<std::size_t, std::size_t>>& pairs,
                                        const Tensor& detached_features)
    {
        if (config_.method == Method::entropy)
            return entropy_loss(current_rows(out.logits, n));

        Var features = current_rows(out.features, n);
        PseudoLabelBatch labels = plb;
        if (!pairs.empty()) {
            StyleAugmentation aug = transfer_pairs(out.style_maps, plb, pairs, config_.style);
            const ForwardOptions opt{config_.norm_stats, false};
            ModelOutput tail = model_->forward_from_style_maps(tape, *aug.maps, opt,
                                                              config_.second_pass_batch_stats ? nullptr : &out.norms);
            features = concat_rows({features, tail.features});
            labels = concat(plb, aug.labels);
        }
        Var prototypes = tape.param(model_->prototypes());
        const bool any_confident = labels.confident_count() > 0;
        switch (config_.method) {
        case Method::pl_ce:
            if (!any_confident)
                return std::nullopt;
            return ce_loss(features, labels, prototypes);
        case Method::dpl_o:
            if (!any_confident)
                return std::nullopt;
            return dpl_o_loss(features, labels, prototypes, config_.tau);
        case Method::dpl_star:
            if (!any_confident)
                return std::nullopt;
            return dpl_star_loss(features, labels, prototypes, config_.tau);
        case Method::dpl_full: {
            if (!any_confident && (config_.skip_empty_batches || config_.beta == 0.0))
                return std::nullopt;
            Var memory = config_.memory_grad ? taped_memory(tape, features, labels, detached_features.dim(1))
                                             : tape.constant(bank_.pseudo_features());
            return dpl_loss(features, labels, prototypes, memory, config_.tau, config_.beta);
        }
        default: return std::nullopt;
        }
    }

    // eta z*_k + (1 - eta) mean(confident features of class k), kept on the tape.
    Var taped_memory(Tape& tape, const Var& features, const PseudoLabelBatch& labels, std::size_t d)
    {
        const Tensor& bank = bank_.pseudo_features();
        const std::size_t c = bank.dim(0), m = labels.size();
        Tensor weights(Shape{c, m});
        Tensor keep(bank.shape());
        for (std::size_t k = 0; k < c; ++k) {
            std::size_t count = 0;
            for (std::size_t i = 0; i < m; ++i)
                count += labels.confident[i] && labels.labels[i] == k ? 1 : 0;
            for (std::size_t j = 0; j < d; ++j)
                keep(k, j) = count ? config_.eta * bank(k, j) : bank(k, j);
            for (std::size_t i = 0; i < m; ++i)
                if (count && labels.confident[i] && labels.labels[i] == k)
                    weights(k, i) = (1.0 - config_.eta) / static_cast<double>(count);
        }
        return add(tape.constant(std::move(keep)), matmul(tape.constant(std::move(weights)), features));
    }

    void record_predictions(const StreamBatch& batch, const Tensor& logits, IterationRecord& rec)
    {
        const auto pred = argmax_rows(logits);
        const auto truth = batch.metric_labels();
        rec.predicted_counts.assign(model_->classes(), 0);
        for (std::size_t i = 0; i < pred.size(); ++i) {
            ++rec.predicted_counts[pred[i]];
            ++trace_.predicted_histogram[pred[i]];
            const auto t = static_cast<std::size_t>(truth[i]);
            if (t < trace_.truth_histogram.size())
                ++trace_.truth_histogram[t];
            trace_.correct += static_cast<int>(pred[i]) == truth[i] ? 1 : 0;
            ++trace_.seen;
            trace_.predictions.push_back(static_cast<int>(pred[i]));
            trace_.sample_ids.push_back(batch.sample_ids()[i]);
        }
    }

    void reset_to_source()
    {
        model_->restore(source_);
        bank_.reset(model_->prototypes().value);
        optimizer_.reset();
        pairing_.clear();
    }

    bool parameters_finite()
    {
        for (Parameter* p : optimizer_.params())
            for (double v : p->value.data())
                if (!std::isfinite(v))
                    return false;
        return true;
    }

    void abort_run(std::size_t batch, const std::string& why)
    {
        trace_.diverged = true;
        trace_.diagnostic = "diverged at batch " + std::to_string(batch) + ": " + why;
    }

    void notify(std::string_view event, std::size_t batch)
    {
        if (observer_)
            observer_(event, batch);
    }

    Checkpoint source_;
    AdaptConfig config_;
    std::unique_ptr<PrototypeClassifier> model_;
    MemoryBank bank_;
    Optimizer optimizer_;
    StylePairing pairing_;
    Rng rng_;
    EngineObserver observer_;
    AdaptationTrace trace_;
    std::optional<int> current_domain_;
    std::size_t cursor_ = 0;
};

/// Run the whole stream through a fresh session started from `source`.
inline AdaptationTrace adapt(const Checkpoint& source, std::span<const StreamBatch> stream, const AdaptConfig& config,
                             EngineObserver observer = {})
{
    if (stream.empty())
        throw ContractError("adapt needs a non-empty stream");
    AdaptSession session(source, config, std::move(observer));
    for (const StreamBatch& b : stream)
        session.process(b);
    return session.trace();
}

/// Adapt `model` in place over the stream.
inline AdaptationTrace adapt(PrototypeClassifier& model, std::span<const StreamBatch> stream, const AdaptConfig& config,
                             EngineObserver observer = {})
{
    if (stream.empty())
        throw ContractError("adapt needs a non-empty stream");
    AdaptSession session(model.snapshot(), config, std::move(observer));
    for (const StreamBatch& b : stream)
        session.process(b);
    model.restore(session.model().snapshot());
    return session.trace();
}

// ---------------------------------------------------------------------------------------------
// Source training

enum class SupervisedLoss { ce, dpl };

struct PretrainConfig {
    std::size_t epochs = 12;
    std::size_t batch_size = 32;
    OptimizerSpec optimizer{OptimizerKind::adam, 1e-2};
    double validation_fraction = 0.2;
    SupervisedLoss loss = SupervisedLoss::ce;
    double tau = 0.1;
    double eta = 0.9;
    double beta = 1.0;
    /// Re-estimate batch-norm running statistics over the training split before each validation.
    bool recalibrate_norm = true;
    std::uint64_t seed = 0;
};

struct PretrainResult {
    Checkpoint best;
    double best_validation_accuracy = 0.0;
    std::size_t best_epoch = 0; // 0 = initialization
    std::vector<double> validation_history;
};

/// Accuracy of a model on a labeled dataset, evaluated in chunks.
inline double evaluate(PrototypeClassifier& model, const ShapeDataset& ds, NormStats stats = NormStats::running,
                       std::size_t chunk = 128)
{
    std::size_t correct = 0;
    for (std::size_t b = 0; b < ds.size(); b += chunk) {
        const std::size_t e = std::min(ds.size(), b + chunk);
        const auto pred = argmax_rows(model.predict_logits(ds.images.slice_rows(b, e), {stats, false}));
        for (std::size_t i = 0; i < pred.size(); ++i)
            correct += static_cast<int>(pred[i]) == ds.labels[b + i] ? 1 : 0;
    }
    return ds.size() ? static_cast<double>(correct) / static_cast<double>(ds.size()) : 0.0;
}

/// Supervised training on ground-truth labels with a held-out validation split; returns the
/// checkpoint with the best validation accuracy (the initialization counts as epoch 0).
inline PretrainResult pretrain(PrototypeClassifier& model, const ShapeDataset& source, const PretrainConfig& cfg)
{
    if (source.size() < 2)
        throw ContractError("pretraining needs at least two source samples");
    if (!(cfg.validation_fraction > 0.0 && cfg.validation_fraction < 1.0))
        throw ContractError("validation_fraction must lie in (0, 1)");
    Rng rng = derived_rng(cfg.seed, 0x9e7);
    std::vector<std::size_t> idx(source.size());
    std::iota(idx.begin(), idx.end(), std::size_t{0});
    shuffle(std::span<std::size_t>(idx), rng);
    const auto n_val = std::max<std::size_t>(1, static_cast<std::size_t>(std::round(cfg.validation_fraction
                                                                                     * static_cast<double>(idx.size()))));
    const std::vector<std::size_t> val_idx(idx.end() - static_cast<std::ptrdiff_t>(n_val), idx.end());
    std::vector<std::size_t> train_idx(idx.begin(), idx.end() - static_cast<std::ptrdiff_t>(n_val));
    const ShapeDataset val = subset(source, val_idx);

    PretrainResult res;
    res.best = model.snapshot();
    res.best_validation_accuracy = evaluate(model, val);
    res.validation_history.push_back(res.best_validation_accuracy);

    Optimizer opt(model.parameters(), cfg.optimizer);
    MemoryBank bank(model.prototypes().value, cfg.eta);
    for (std::size_t epoch = 1; epoch <= cfg.epochs; ++epoch) {
        shuffle(std::span<std::size_t>(train_idx), rng);
        for (std::size_t b = 0; b < train_idx.size(); b += cfg.batch_size) {
            const std::size_t e = std::min(train_idx.size(), b + cfg.batch_size);
            if (e - b < 2)
                continue; // batch statistics need two samples
            std::vector<std::size_t> chunk(train_idx.begin() + static_cast<std::ptrdiff_t>(b),
                                           train_idx.begin() + static_cast<std::ptrdiff_t>(e));
            std::vector<std::size_t> labels;
            for (std::size_t i : chunk)
                labels.push_back(static_cast<std::size_t>(source.labels[i]));
            const PseudoLabelBatch truth = labeled_batch(labels);
            model.zero_grad();
            Tape tape;
            ModelOutput out = model.forward(tape, gather_rows(source.images, chunk), {NormStats::batch, true});
            Var w = tape.param(model.prototypes());
            LossValue loss = cfg.loss == SupervisedLoss::ce
                                 ? ce_loss(out.features, truth, w)
                                 : dpl_loss(out.features, truth, w, tape.constant(bank.pseudo_features()), cfg.tau,
                                            cfg.beta);
            tape.backward(loss.value);
            opt.step();
            if (cfg.loss == SupervisedLoss::dpl)
                bank.update(out.features.value(), truth);
        }
        if (cfg.recalibrate_norm)
            model.recalibrate_norm_stats(gather_rows(source.images, train_idx));
        const double acc = evaluate(model, val);
        res.validation_history.push_back(acc);
        if (acc > res.best_validation_accuracy) {
            res.best_validation_accuracy = acc;
            res.best = model.snapshot();
            res.best_epoch = epoch;
        }
    }
    model.restore(res.best);
    return res;
}

// ---------------------------------------------------------------------------------------------
// Run-state file: magic "DPLRUNS1", JSON header (config, cursor, rng, trace, tensor manifests),
// float64 payloads in manifest order.

inline nlohmann::json adapt_config_json(const AdaptConfig& c)
{
    return nlohmann::json{{"method", to_string(c.method)},
                          {"alpha", c.alpha},
                          {"tau", c.tau},
                          {"eta", c.eta},
                          {"beta", c.beta},
                          {"batch_size", c.batch_size},
                          {"steps_per_batch", c.steps_per_batch},
                          {"scope", to_string(c.scope)},
                          {"optimizer",
                           {{"kind", to_string(c.optimizer.kind)},
                            {"lr", c.optimizer.lr},
                            {"momentum", c.optimizer.momentum},
                            {"beta1", c.optimizer.beta1},
                            {"beta2", c.optimizer.beta2},
                            {"eps", c.optimizer.eps}}},
                          {"style_pairing", to_string(c.style.mode)},
                          {"style_eps", c.style.eps},
                          {"block_style_source_grad", c.style.block_source_grad},
                          {"reset", to_string(c.reset)},
                          {"norm_stats", to_string(c.norm_stats)},
                          {"refresh_pseudo_labels", c.refresh_pseudo_labels},
                          {"skip_empty_batches", c.skip_empty_batches},
                          {"memory_grad", c.memory_grad},
                          {"second_pass_batch_stats", c.second_pass_batch_stats},
                          {"seed", c.seed}};
}

inline AdaptConfig adapt_config_from_json(const nlohmann::json& j)
{
    AdaptConfig c;
    c.method = method_from_string(j.at("method").get<std::string>());
    j.at("alpha").get_to(c.alpha);
    j.at("tau").get_to(c.tau);
    j.at("eta").get_to(c.eta);
    j.at("beta").get_to(c.beta);
    j.at("batch_size").get_to(c.batch_size);
    j.at("steps_per_batch").get_to(c.steps_per_batch);
    c.scope = param_scope_from_string(j.at("scope").get<std::string>());
    const auto& o = j.at("optimizer");
    c.optimizer.kind = optimizer_kind_from_string(o.at("kind").get<std::string>());
    o.at("lr").get_to(c.optimizer.lr);
    o.at("momentum").get_to(c.optimizer.momentum);
    o.at("beta1").get_to(c.optimizer.beta1);
    o.at("beta2").get_to(c.optimizer.beta2);
    o.at("eps").get_to(c.optimizer.eps);
    c.style.mode = pairing_mode_from_string(j.at("style_pairing").get<std::string>());
    j.at("style_eps").get_to(c.style.eps);
    j.at("block_style_source_grad").get_to(c.style.block_source_grad);
    c.reset = reset_policy_from_string(j.at("reset").get<std::string>());
    c.norm_stats = norm_stats_from_string(j.at("norm_stats").get<std::string>());
    j.at("refresh_pseudo_labels").get_to(c.refresh_pseudo_labels);
    j.at("skip_empty_batches").get_to(c.skip_empty_batches);
    j.at("memory_grad").get_to(c.memory_grad);
    j.at("second_pass_batch_stats").get_to(c.second_pass_batch_stats);
    j.at("seed").get_to(c.seed);
    return c;
}

namespace detail {

inline nlohmann::json trace_json(const AdaptationTrace& t)
{
    nlohmann::json recs = nlohmann::json::array();
    for (const auto& r : t.records)
        recs.push_back({{"batch_index", r.batch_index},
                        {"domain", r.domain},
                        {"samples", r.samples},
                        {"n_confident", r.n_confident},
                        {"n_augmented", r.n_augmented},
                        {"loss", std::isfinite(r.loss) ? nlohmann::json(r.loss) : nlohmann::json(nullptr)},
                        {"terms", r.terms},
                        {"updated", r.updated},
                        {"reset", r.reset},
                        {"cum_acc", r.cum_acc},
                        {"predicted_counts", r.predicted_counts}});
    return {{"method", t.method},
            {"seed", t.seed},
            {"records", recs},
            {"predictions", t.predictions},
            {"sample_ids", t.sample_ids},
            {"predicted_histogram", t.predicted_histogram},
            {"truth_histogram", t.truth_histogram},
            {"correct", t.correct},
            {"seen", t.seen},
            {"diverged", t.diverged},
            {"diagnostic", t.diagnostic}};
}

inline AdaptationTrace trace_from_json(const nlohmann::json& j)
{
    AdaptationTrace t;
    j.at("method").get_to(t.method);
    j.at("seed").get_to(t.seed);
    for (const auto& r : j.at("records")) {
        IterationRecord rec;
        r.at("batch_index").get_to(rec.batch_index);
        r.at("domain").get_to(rec.domain);
        r.at("samples").get_to(rec.samples);
        r.at("n_confident").get_to(rec.n_confident);
        r.at("n_augmented").get_to(rec.n_augmented);
        rec.loss = r.at("loss").is_null() ? std::numeric_limits<double>::quiet_NaN() : r.at("loss").get<double>();
        r.at("terms").get_to(rec.terms);
        r.at("updated").get_to(rec.updated);
        r.at("reset").get_to(rec.reset);
        r.at("cum_acc").get_to(rec.cum_acc);
        r.at("predicted_counts").get_to(rec.predicted_counts);
        t.records.push_back(std::move(rec));
    }
    j.at("predictions").get_to(t.predictions);
    j.at("sample_ids").get_to(t.sample_ids);
    j.at("predicted_histogram").get_to(t.predicted_histogram);
    j.at("truth_histogram").get_to(t.truth_histogram);
    j.at("correct").get_to(t.correct);
    j.at("seen").get_to(t.seen);
    j.at("diverged").get_to(t.diverged);
    j.at("diagnostic").get_to(t.diagnostic);
    return t;
}

} // namespace detail

inline void save_run_state(const RunState& s, const std::filesystem::path& path)
{
    std::vector<NamedTensor> tensors;
    tensors.insert(tensors.end(), s.source.tensors.begin(), s.source.tensors.end());
    tensors.insert(tensors.end(), s.model.tensors.begin(), s.model.tensors.end());
    tensors.push_back({"memory.pseudo_features", s.memory});
    tensors.insert(tensors.end(), s.optimizer_state.begin(), s.optimizer_state.end());
    if (s.carryover)
        tensors.push_back({"style.carryover", *s.carryover});
    nlohmann::json header{{"architecture", s.model.config},
                          {"config", adapt_config_json(s.config)},
                          {"cursor", s.cursor},
                          {"current_domain", s.current_domain ? nlohmann::json(*s.current_domain) : nlohmann::json(nullptr)},
                          {"rng", s.rng_state},
                          {"memory_updates", s.memory_updates},
                          {"optimizer_steps", s.optimizer_steps},
                          {"counts",
                           {{"source", s.source.tensors.size()},
                            {"model", s.model.tensors.size()},
                            {"optimizer", s.optimizer_state.size()},
                            {"carryover", s.carryover ? 1 : 0}}},
                          {"trace", detail::trace_json(s.trace)},
                          {"tensors", tensor_manifest(tensors)}};
    io::write_container(path, "DPLRUNS1", header, tensor_payload(tensors));
}

inline RunState load_run_state(const std::filesystem::path& path)
{
    io::Container c = io::read_container(path, "DPLRUNS1");
    io::PayloadReader reader(c.payload, path.string());
    try {
        const auto& h = c.header;
        std::vector<NamedTensor> tensors = read_tensors(h.at("tensors"), reader);
        const auto& counts = h.at("counts");
        const auto n_src = counts.at("source").get<std::size_t>();
        const auto n_model = counts.at("model").get<std::size_t>();
        const auto n_opt = counts.at("optimizer").get<std::size_t>();
        const bool has_carry = counts.at("carryover").get<int>() != 0;
        if (tensors.size() != n_src + n_model + 1 + n_opt + (has_carry ? 1 : 0))
            throw io::IoError(path.string() + ": tensor manifest does not match counts");
        RunState s;
        const NetConfig arch = h.at("architecture").get<NetConfig>();
        auto it = tensors.begin();
        s.source = Checkpoint{arch, {it, it + static_cast<std::ptrdiff_t>(n_src)}};
        it += static_cast<std::ptrdiff_t>(n_src);
        s.model = Checkpoint{arch, {it, it + static_cast<std::ptrdiff_t>(n_model)}};
        it += static_cast<std::ptrdiff_t>(n_model);
        s.memory = (it++)->value;
        s.optimizer_state.assign(it, it + static_cast<std::ptrdiff_t>(n_opt));
        it += static_cast<std::ptrdiff_t>(n_opt);
        if (has_carry)
            s.carryover = it->value;
        s.config = adapt_config_from_json(h.at("config"));
        h.at("cursor").get_to(s.cursor);
        if (!h.at("current_domain").is_null())
            s.current_domain = h.at("current_domain").get<int>();
        h.at("rng").get_to(s.rng_state);
        h.at("memory_updates").get_to(s.memory_updates);
        h.at("optimizer_steps").get_to(s.optimizer_steps);
        s.trace = detail::trace_from_json(h.at("trace"));
        return s;
    } catch (const nlohmann::json::exception& e) {
        throw io::IoError(path.string() + ": malformed run-state header: " + e.what());
    } catch (const ContractError& e) {
        throw io::IoError(path.string() + ": invalid run-state: " + e.what());
    }
}

} // namespace dpl
