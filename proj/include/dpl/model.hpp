#pragma once

#include <dpl/binio.hpp>
#include <dpl/ops.hpp>
#include <dpl/random.hpp>
#include <dpl/tape.hpp>
#include <dpl/tensor.hpp>

#include "json.hpp"

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <random>
#include <string>
#include <vector>

namespace dpl {

enum class NormMode { batch_norm, identity };

/// Which statistics batch-norm layers standardize with.
enum class NormStats { batch, running };

/// Parameter subsets an optimizer may be allowed to touch.
enum class ParamScope { full, norm_affine, classifier, extractor };

inline std::string to_string(NormMode m) { return m == NormMode::batch_norm ? "batch-norm" : "identity"; }

inline NormMode norm_mode_from_string(const std::string& s)
{
    if (s == "batch-norm")
        return NormMode::batch_norm;
    if (s == "identity")
        return NormMode::identity;
    throw ContractError("unknown norm mode '" + s + "'");
}

inline std::string to_string(NormStats s) { return s == NormStats::batch ? "batch" : "running"; }

inline NormStats norm_stats_from_string(const std::string& s)
{
    if (s == "batch")
        return NormStats::batch;
    if (s == "running")
        return NormStats::running;
    throw ContractError("unknown norm statistics '" + s + "'");
}

inline std::string to_string(ParamScope s)
{
    switch (s) {
    case ParamScope::full: return "full";
    case ParamScope::norm_affine: return "norm-affine";
    case ParamScope::classifier: return "classifier";
    case ParamScope::extractor: return "extractor";
    }
    return "?";
}

inline ParamScope param_scope_from_string(const std::string& s)
{
    if (s == "full")
        return ParamScope::full;
    if (s == "norm-affine")
        return ParamScope::norm_affine;
    if (s == "classifier")
        return ParamScope::classifier;
    if (s == "extractor")
        return ParamScope::extractor;
    throw ContractError("unknown parameter scope '" + s + "'");
}

struct NetConfig {
    std::size_t in_channels = 3;
    std::size_t image_size = 24;
    std::size_t classes = 5;
    std::size_t kernel = 3;
    std::vector<std::size_t> block_channels{8, 16};
    /// Style maps are the activations after this many blocks.
    std::size_t style_tap = 1;
    NormMode norm = NormMode::batch_norm;
    double norm_eps = 1e-5;
    double running_momentum = 0.1;

    std::size_t feature_dim() const { return block_channels.back(); }

    void validate() const
    {
        if (in_channels == 0 || image_size == 0 || classes == 0 || block_channels.empty())
            throw ContractError("network config: sizes must be positive and at least one block is required");
        if (kernel % 2 == 0)
            throw ContractError("network config: kernel must be odd");
        if (style_tap < 1 || style_tap > block_channels.size())
            throw ContractError("network config: style_tap must lie in [1, block count]");
        for (std::size_t c : block_channels)
            if (c == 0)
                throw ContractError("network config: zero-width block");
    }

    friend bool operator==(const NetConfig&, const NetConfig&) = default;
};

inline void to_json(nlohmann::json& j, const NetConfig& c)
{
    j = nlohmann::json{{"in_channels", c.in_channels}, {"image_size", c.image_size},
                       {"classes", c.classes},         {"kernel", c.kernel},
                       {"block_channels", c.block_channels}, {"style_tap", c.style_tap},
                       {"norm", to_string(c.norm)},     {"norm_eps", c.norm_eps},
                       {"running_momentum", c.running_momentum}};
}

inline void from_json(const nlohmann::json& j, NetConfig& c)
{
    j.at("in_channels").get_to(c.in_channels);
    j.at("image_size").get_to(c.image_size);
    j.at("classes").get_to(c.classes);
    j.at("kernel").get_to(c.kernel);
    j.at("block_channels").get_to(c.block_channels);
    j.at("style_tap").get_to(c.style_tap);
    c.norm = norm_mode_from_string(j.at("norm").get<std::string>());
    j.at("norm_eps").get_to(c.norm_eps);
    j.at("running_momentum").get_to(c.running_momentum);
}

struct NamedTensor {
    std::string name;
    Tensor value;

    friend bool operator==(const NamedTensor&, const NamedTensor&) = default;
};

/// Every parameter and running buffer of a model, in a fixed order.
struct Checkpoint {
    NetConfig config;
    std::vector<NamedTensor> tensors;

    const Tensor& at(const std::string& name) const
    {
        for (const auto& t : tensors)
            if (t.name == name)
                return t.value;
        throw ContractError("checkpoint has no tensor '" + name + "'");
    }

    friend bool operator==(const Checkpoint&, const Checkpoint&) = default;
};

struct ForwardOptions {
    ForwardOptions() = default;
    ForwardOptions(NormStats s, bool update = false, std::optional<double> momentum = std::nullopt)
        : stats(s), update_running(update), running_momentum(momentum)
    {
    }

    NormStats stats = NormStats::batch;
    /// Fold batch statistics into the running buffers (training only).
    bool update_running = false;
    /// Overrides NetConfig::running_momentum for this pass.
    std::optional<double> running_momentum;
};

/// Batch statistics used by each norm layer during one forward pass (empty when not batch-derived).
struct NormCache {
    std::vector<std::optional<BatchMoments>> layers;
};

struct ModelOutput {
    Var style_maps;
    Var features;
    Var logits;
    NormCache norms;
};

/// Convolutional feature extractor (conv -> norm -> ReLU blocks, global average pooling)
/// followed by a bias-free linear head whose rows are the class prototypes.
class PrototypeClassifier {
public:
    PrototypeClassifier(NetConfig config, std::uint64_t seed) : config_(std::move(config))
    {
        config_.validate();
        Rng rng(seed);
        std::size_t cin = config_.in_channels;
        const std::size_t k = config_.kernel;
        for (std::size_t b = 0; b < config_.block_channels.size(); ++b) {
            const std::size_t cout = config_.block_channels[b];
            const std::string p = "block" + std::to_string(b);
            Block blk;
            blk.conv_weight = Parameter(p + ".conv.weight", normal(Shape{cout, cin, k, k},
                                                                   std::sqrt(2.0 / static_cast<double>(cin * k * k)), rng));
            blk.conv_bias = Parameter(p + ".conv.bias", Tensor(Shape{cout}));
            blk.norm_weight = Parameter(p + ".norm.weight", Tensor(Shape{cout}, 1.0));
            blk.norm_bias = Parameter(p + ".norm.bias", Tensor(Shape{cout}));
            blk.running_mean = Tensor(Shape{cout});
            blk.running_var = Tensor(Shape{cout}, 1.0);
            blocks_.push_back(std::move(blk));
            cin = cout;
        }
        classifier_ = Parameter("classifier.weight",
                                normal(Shape{config_.classes, config_.feature_dim()},
                                       1.0 / std::sqrt(static_cast<double>(config_.feature_dim())), rng));
    }

    explicit PrototypeClassifier(const Checkpoint& ckpt) : PrototypeClassifier(ckpt.config, 0) { restore(ckpt); }

    const NetConfig& config() const noexcept { return config_; }
    std::size_t classes() const noexcept { return config_.classes; }

    Parameter& prototypes() noexcept { return classifier_; }
    const Parameter& prototypes() const noexcept { return classifier_; }

    ModelOutput forward(Tape& tape, const Tensor& batch, const ForwardOptions& opt = {})
    {
        if (batch.rank() != 4 || batch.dim(1) != config_.in_channels || batch.dim(2) != config_.image_size
            || batch.dim(3) != config_.image_size)
            throw DimensionError("model expects N x " + std::to_string(config_.in_channels) + " x "
                                 + std::to_string(config_.image_size) + " x " + std::to_string(config_.image_size)
                                 + " input, got " + shape_str(batch.shape()));
        NormCache cache;
        cache.layers.resize(blocks_.size());
        Var h = tape.constant(batch);
        for (std::size_t b = 0; b < config_.style_tap; ++b)
            h = run_block(tape, b, h, opt, nullptr, cache);
        ModelOutput out = run_tail(tape, h, opt, nullptr, cache);
        return out;
    }

    /// Resume the forward pass from activations shaped like the style tap output.
    /// With `reuse`, norm layers after the tap standardize with those cached statistics.
    ModelOutput forward_from_style_maps(Tape& tape, const Var& maps, const ForwardOptions& opt = {},
                                        const NormCache* reuse = nullptr)
    {
        const Shape& s = maps.shape();
        if (s.size() != 4 || s[1] != config_.block_channels[config_.style_tap - 1] || s[2] != config_.image_size
            || s[3] != config_.image_size)
            throw DimensionError("style maps shape " + shape_str(s) + " does not match the tap output");
        NormCache cache;
        cache.layers.resize(blocks_.size());
        return run_tail(tape, maps, opt, reuse, cache);
    }

    /// Logits without gradient tracking.
    Tensor predict_logits(const Tensor& batch, const ForwardOptions& opt = {})
    {
        Tape tape;
        return forward(tape, batch, opt).logits.value();
    }

    /// Replace the running buffers with the average batch statistics over `images`, taken in
    /// chunks of `chunk` samples.
    void recalibrate_norm_stats(const Tensor& images, std::size_t chunk = 128)
    {
        if (config_.norm != NormMode::batch_norm || images.dim(0) == 0)
            return;
        std::size_t seen = 0;
        for (std::size_t b = 0; b < images.dim(0); b += chunk, ++seen) {
            ForwardOptions opt{NormStats::batch, true, 1.0 / static_cast<double>(seen + 1)};
            predict_logits(images.slice_rows(b, std::min(images.dim(0), b + chunk)), opt);
        }
    }

    std::vector<Parameter*> parameters()
    {
        std::vector<Parameter*> out;
        for (auto& b : blocks_) {
            out.push_back(&b.conv_weight);
            out.push_back(&b.conv_bias);
            out.push_back(&b.norm_weight);
            out.push_back(&b.norm_bias);
        }
        out.push_back(&classifier_);
        return out;
    }

    /// The parameters an optimizer may mutate under `scope`.
    std::vector<Parameter*> select_params(ParamScope scope)
    {
        std::vector<Parameter*> out;
        for (auto& b : blocks_) {
            if (scope == ParamScope::full || scope == ParamScope::extractor) {
                out.push_back(&b.conv_weight);
                out.push_back(&b.conv_bias);
            }
            if (scope != ParamScope::classifier) {
                out.push_back(&b.norm_weight);
                out.push_back(&b.norm_bias);
            }
        }
        if (scope == ParamScope::full || scope == ParamScope::classifier)
            out.push_back(&classifier_);
        return out;
    }

    void zero_grad()
    {
        for (Parameter* p : parameters())
            p->zero_grad();
    }

    Checkpoint snapshot() const
    {
        Checkpoint c{config_, {}};
        for (const auto& b : blocks_) {
            const std::string p = b.conv_weight.name.substr(0, b.conv_weight.name.find('.'));
            c.tensors.push_back({b.conv_weight.name, b.conv_weight.value});
            c.tensors.push_back({b.conv_bias.name, b.conv_bias.value});
            c.tensors.push_back({b.norm_weight.name, b.norm_weight.value});
            c.tensors.push_back({b.norm_bias.name, b.norm_bias.value});
            c.tensors.push_back({p + ".norm.running_mean", b.running_mean});
            c.tensors.push_back({p + ".norm.running_var", b.running_var});
        }
        c.tensors.push_back({classifier_.name, classifier_.value});
        return c;
    }

    void restore(const Checkpoint& c)
    {
        if (!(c.config == config_))
            throw ContractError("checkpoint architecture does not match the model");
        Checkpoint mine = snapshot();
        if (c.tensors.size() != mine.tensors.size())
            throw ContractError("checkpoint tensor count mismatch");
        for (std::size_t i = 0; i < mine.tensors.size(); ++i)
            if (c.tensors[i].name != mine.tensors[i].name || c.tensors[i].value.shape() != mine.tensors[i].value.shape())
                throw ContractError("checkpoint tensor '" + c.tensors[i].name + "' incompatible with model");
        std::size_t i = 0;
        for (auto& b : blocks_) {
            b.conv_weight.value = c.tensors[i++].value;
            b.conv_bias.value = c.tensors[i++].value;
            b.norm_weight.value = c.tensors[i++].value;
            b.norm_bias.value = c.tensors[i++].value;
            b.running_mean = c.tensors[i++].value;
            b.running_var = c.tensors[i++].value;
        }
        classifier_.value = c.tensors[i].value;
        zero_grad();
    }

private:
    struct Block {
        Parameter conv_weight, conv_bias, norm_weight, norm_bias;
        Tensor running_mean, running_var;
    };

    static Tensor normal(Shape shape, double stddev, Rng& rng)
    {
        Tensor t(std::move(shape));
        for (double& v : t.data())
            v = stddev * standard_normal(rng);
        return t;
    }

    Var run_block(Tape& tape, std::size_t b, const Var& in, const ForwardOptions& opt, const NormCache* reuse,
                  NormCache& cache)
    {
        Block& blk = blocks_[b];
        Var h = conv2d(in, tape.param(blk.conv_weight), tape.param(blk.conv_bias), config_.kernel / 2);
        if (config_.norm == NormMode::batch_norm) {
            if (reuse && reuse->layers.size() > b && reuse->layers[b]) {
                h = standardize_with(h, reuse->layers[b]->mean, reuse->layers[b]->var, config_.norm_eps);
            } else if (opt.stats == NormStats::running) {
                h = standardize_with(h, blk.running_mean, blk.running_var, config_.norm_eps);
            } else {
                BatchMoments mom;
                h = batch_standardize(h, config_.norm_eps, &mom);
                if (opt.update_running) {
                    const double m = opt.running_momentum.value_or(config_.running_momentum);
                    const double n = static_cast<double>(h.shape()[0] * h.shape()[2] * h.shape()[3]);
                    const double unbias = n > 1 ? n / (n - 1) : 1.0;
                    for (std::size_t c = 0; c < mom.mean.size(); ++c) {
                        blk.running_mean[c] = (1 - m) * blk.running_mean[c] + m * mom.mean[c];
                        blk.running_var[c] = (1 - m) * blk.running_var[c] + m * mom.var[c] * unbias;
                    }
                }
                cache.layers[b] = std::move(mom);
            }
        }
        h = channel_affine(h, tape.param(blk.norm_weight), tape.param(blk.norm_bias));
        return relu(h);
    }

    ModelOutput run_tail(Tape& tape, const Var& maps, const ForwardOptions& opt, const NormCache* reuse,
                         NormCache& cache)
    {
        Var h = maps;
        for (std::size_t b = config_.style_tap; b < blocks_.size(); ++b)
            h = run_block(tape, b, h, opt, reuse, cache);
        Var features = global_avg_pool(h);
        Var logits = matmul(features, transpose(tape.param(classifier_)));
        return ModelOutput{maps, features, logits, std::move(cache)};
    }

    NetConfig config_;
    std::vector<Block> blocks_;
    Parameter classifier_;
};

// Checkpoint file: magic "DPLCKPT1", JSON header {"architecture", "tensors": [{name, shape}]},
// then float64 payloads in manifest order.

inline nlohmann::json tensor_manifest(const std::vector<NamedTensor>& tensors)
{
    nlohmann::json m = nlohmann::json::array();
    for (const auto& t : tensors)
        m.push_back({{"name", t.name}, {"shape", t.value.shape()}});
    return m;
}

inline std::string tensor_payload(const std::vector<NamedTensor>& tensors)
{
    std::string payload;
    for (const auto& t : tensors)
        io::append_f64(payload, t.value.data());
    return payload;
}

inline std::vector<NamedTensor> read_tensors(const nlohmann::json& manifest, io::PayloadReader& reader)
{
    std::vector<NamedTensor> out;
    for (const auto& entry : manifest) {
        Shape shape = entry.at("shape").get<Shape>();
        out.push_back({entry.at("name").get<std::string>(), Tensor(shape, reader.f64(shape_numel(shape)))});
    }
    return out;
}

inline void save_checkpoint(const Checkpoint& c, const std::filesystem::path& path)
{
    nlohmann::json header{{"architecture", c.config}, {"tensors", tensor_manifest(c.tensors)}};
    io::write_container(path, "DPLCKPT1", header, tensor_payload(c.tensors));
}

inline Checkpoint load_checkpoint(const std::filesystem::path& path)
{
    io::Container c = io::read_container(path, "DPLCKPT1");
    io::PayloadReader reader(c.payload, path.string());
    try {
        Checkpoint ck{c.header.at("architecture").get<NetConfig>(), read_tensors(c.header.at("tensors"), reader)};
        if (!reader.exhausted())
            throw io::IoError(path.string() + ": trailing bytes after payload");
        return ck;
    } catch (const nlohmann::json::exception& e) {
        throw io::IoError(path.string() + ": malformed checkpoint header: " + e.what());
    }
}

} // namespace dpl
