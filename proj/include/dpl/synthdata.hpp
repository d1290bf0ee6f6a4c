#pragma once

#include <dpl/binio.hpp>
#include <dpl/random.hpp>
#include <dpl/tensor.hpp>

#include "json.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <filesystem>
#include <map>
#include <numbers>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace dpl {

/// Appearance of one synthetic domain. Geometry (the label) never depends on it.
struct DomainSpec {
    int id = 0;
    std::string name = "domain";
    double brightness = 0.0;
    double contrast = 1.0;
    std::array<double, 9> color_mix{1, 0, 0, 0, 1, 0, 0, 0, 1}; // row-major 3x3
    double texture_freq = 2.0;
    double texture_amp = 0.05;
    double noise = 0.0;
    std::uint64_t seed = 0;

    friend bool operator==(const DomainSpec&, const DomainSpec&) = default;
};

inline void to_json(nlohmann::json& j, const DomainSpec& d)
{
    j = nlohmann::json{{"id", d.id},
                       {"name", d.name},
                       {"brightness", d.brightness},
                       {"contrast", d.contrast},
                       {"color_mix", d.color_mix},
                       {"texture_freq", d.texture_freq},
                       {"texture_amp", d.texture_amp},
                       {"noise", d.noise},
                       {"seed", d.seed}};
}

inline void from_json(const nlohmann::json& j, DomainSpec& d)
{
    j.at("id").get_to(d.id);
    j.at("name").get_to(d.name);
    j.at("brightness").get_to(d.brightness);
    j.at("contrast").get_to(d.contrast);
    j.at("color_mix").get_to(d.color_mix);
    j.at("texture_freq").get_to(d.texture_freq);
    j.at("texture_amp").get_to(d.texture_amp);
    j.at("noise").get_to(d.noise);
    j.at("seed").get_to(d.seed);
}

/// Labeled images N x C x H x W in [0, 1] with per-sample domain tags.
struct ShapeDataset {
    Tensor images;
    std::vector<int> labels;
    std::vector<int> domains;
    std::size_t classes = 0;
    std::vector<DomainSpec> specs;

    std::size_t size() const noexcept { return labels.size(); }
    std::size_t channels() const { return images.dim(1); }
    std::size_t image_size() const { return images.dim(2); }
};

inline constexpr std::size_t kMaxShapeClasses = 7;

inline std::string shape_class_name(std::size_t k)
{
    static const std::array<const char*, kMaxShapeClasses> names{"disk", "cross", "bar", "ring",
                                                                 "triangle", "square", "frame"};
    return k < names.size() ? names[k] : "class" + std::to_string(k);
}

namespace detail {

inline double smooth_inside(double signed_dist) // > 0 inside; ~1 px antialiasing
{
    return std::clamp(0.5 + signed_dist, 0.0, 1.0);
}

// Soft coverage of shape `cls` at offset (dx, dy) from its center, rotated by theta, radius r.
inline double shape_mask(std::size_t cls, double dx, double dy, double r, double theta)
{
    const double c = std::cos(theta), s = std::sin(theta);
    const double u = c * dx + s * dy, v = -s * dx + c * dy;
    const double dist = std::hypot(dx, dy);
    auto bar = [](double a, double b, double half_len, double half_w) {
        return std::min(half_len - std::abs(a), half_w - std::abs(b));
    };
    switch (cls) {
    case 0: return smooth_inside(r - dist);
    case 1: return smooth_inside(std::max(bar(u, v, r, 0.28 * r), bar(v, u, r, 0.28 * r)));
    case 2: return smooth_inside(bar(u, v, r, 0.32 * r));
    case 3: return smooth_inside(std::min(r - dist, dist - 0.55 * r));
    case 4: {
        // equilateral triangle with circumradius r: inside all three edge half-planes
        double m = 1e9;
        for (int e = 0; e < 3; ++e) {
            const double a = theta + std::numbers::pi / 2 + e * 2 * std::numbers::pi / 3;
            m = std::min(m, 0.5 * r - (std::cos(a) * dx + std::sin(a) * dy));
        }
        return smooth_inside(m);
    }
    case 5: return smooth_inside(std::min(0.8 * r - std::abs(u), 0.8 * r - std::abs(v)));
    case 6: {
        const double outer = std::min(0.85 * r - std::abs(u), 0.85 * r - std::abs(v));
        const double inner = std::max(std::abs(u), std::abs(v)) - 0.5 * r;
        return smooth_inside(std::min(outer, inner));
    }
    default: return 0.0;
    }
}

inline double quantize_f32(double v) { return static_cast<double>(static_cast<float>(v)); }

} // namespace detail

/// Render sample `index` of a domain. Pure function of (spec, index, classes, size, channels).
inline Tensor render_sample(const DomainSpec& spec, std::size_t index, std::size_t label, std::size_t image_size,
                            std::size_t channels)
{
    Rng rng = derived_rng(spec.seed, index);
    const double half = static_cast<double>(image_size) / 2.0;
    const double scale = static_cast<double>(image_size) / 24.0;
    const double cx = half - 0.5 + uniform(rng, -3.0, 3.0) * scale;
    const double cy = half - 0.5 + uniform(rng, -3.0, 3.0) * scale;
    const double r = uniform(rng, 5.5, 8.0) * scale;
    const double theta = uniform(rng, -0.6, 0.6);
    const double tex_dir = uniform(rng, 0.0, std::numbers::pi);
    const double tex_phase = uniform(rng, 0.0, 2 * std::numbers::pi);
    const std::array<double, 3> fg{0.9, 0.75, 0.5};
    const std::array<double, 3> bg{0.2, 0.3, 0.35};

    Tensor img(Shape{channels, image_size, image_size});
    const std::size_t plane = image_size * image_size;
    for (std::size_t y = 0; y < image_size; ++y)
        for (std::size_t x = 0; x < image_size; ++x) {
            const double dx = static_cast<double>(x) - cx, dy = static_cast<double>(y) - cy;
            const double m = detail::shape_mask(label, dx, dy, r, theta);
            const double phase = 2 * std::numbers::pi * spec.texture_freq
                                     * (std::cos(tex_dir) * static_cast<double>(x) + std::sin(tex_dir) * static_cast<double>(y))
                                     / static_cast<double>(image_size)
                                 + tex_phase;
            const double tex = spec.texture_amp * std::sin(phase);
            std::array<double, 3> rgb;
            for (std::size_t c = 0; c < 3; ++c)
                rgb[c] = (1 - m) * (bg[c] + tex) + m * fg[c];
            for (std::size_t c = 0; c < channels; ++c) {
                const std::size_t row = c % 3;
                double v = spec.color_mix[row * 3 + 0] * rgb[0] + spec.color_mix[row * 3 + 1] * rgb[1]
                           + spec.color_mix[row * 3 + 2] * rgb[2];
                v = spec.contrast * (v - 0.5) + 0.5 + spec.brightness;
                img[c * plane + y * image_size + x] = v;
            }
        }
    if (spec.noise > 0.0)
        for (double& v : img.data())
            v += spec.noise * standard_normal(rng);
    for (double& v : img.data())
        v = detail::quantize_f32(std::clamp(v, 0.0, 1.0));
    return img;
}

/// n labeled samples of one domain; labels cycle through the classes (balanced within one).
inline ShapeDataset generate(const DomainSpec& spec, std::size_t n, std::size_t classes, std::size_t image_size = 24,
                             std::size_t channels = 3)
{
    if (classes == 0 || classes > kMaxShapeClasses)
        throw ContractError("class count must lie in [1, " + std::to_string(kMaxShapeClasses) + "]");
    if (n < classes)
        throw ContractError("need at least one sample per class");
    if (image_size < 8 || channels == 0)
        throw ContractError("image size must be >= 8 and channels > 0");
    ShapeDataset ds;
    ds.classes = classes;
    ds.specs = {spec};
    std::vector<Tensor> imgs;
    imgs.reserve(n);
    for (std::size_t i = 0; i < n; ++i) {
        const std::size_t label = i % classes;
        imgs.push_back(render_sample(spec, i, label, image_size, channels));
        ds.labels.push_back(static_cast<int>(label));
        ds.domains.push_back(spec.id);
    }
    ds.images = stack_rows(std::span<const Tensor>(imgs));
    return ds;
}

/// Concatenate datasets with identical geometry.
inline ShapeDataset merge(std::span<const ShapeDataset> parts)
{
    if (parts.empty())
        throw ContractError("merge needs at least one dataset");
    ShapeDataset out;
    out.classes = parts.front().classes;
    std::vector<Tensor> imgs;
    for (const auto& p : parts) {
        if (p.classes != out.classes)
            throw ContractError("merging datasets with different class counts");
        imgs.push_back(p.images);
        out.labels.insert(out.labels.end(), p.labels.begin(), p.labels.end());
        out.domains.insert(out.domains.end(), p.domains.begin(), p.domains.end());
        for (const auto& s : p.specs)
            if (std::find(out.specs.begin(), out.specs.end(), s) == out.specs.end())
                out.specs.push_back(s);
    }
    out.images = concat_rows(std::span<const Tensor>(imgs));
    return out;
}

/// Rows of a dataset at `idx`.
inline ShapeDataset subset(const ShapeDataset& ds, std::span<const std::size_t> idx)
{
    ShapeDataset out;
    out.classes = ds.classes;
    out.specs = ds.specs;
    out.images = gather_rows(ds.images, idx);
    for (std::size_t i : idx) {
        out.labels.push_back(ds.labels.at(i));
        out.domains.push_back(ds.domains.at(i));
    }
    return out;
}

// ---------------------------------------------------------------------------------------------
// Benchmark domains

/// Three mild source styles and one target whose distance from them grows with `shift` in [0, 1].
inline std::vector<DomainSpec> benchmark_domains(double shift, std::uint64_t seed)
{
    if (!(shift >= 0.0 && shift <= 1.0))
        throw ContractError("shift level must lie in [0, 1]");
    std::vector<DomainSpec> d(4);
    d[0] = DomainSpec{0, "source-a", 0.0, 1.0, {1, 0, 0, 0, 1, 0, 0, 0, 1}, 2.0, 0.05, 0.02, seed * 4 + 1};
    d[1] = DomainSpec{1, "source-b", 0.05, 0.9, {0.9, 0.1, 0, 0.05, 0.9, 0.05, 0, 0.1, 0.9}, 3.0, 0.08, 0.04,
                      seed * 4 + 2};
    d[2] = DomainSpec{2, "source-c", -0.05, 1.1, {0.95, 0, 0.05, 0, 1.0, 0, 0.05, 0.05, 0.9}, 1.5, 0.06, 0.03,
                      seed * 4 + 3};
    const std::array<double, 9> far_mix{0.15, 0.25, 0.6, 0.7, 0.15, 0.15, 0.2, 0.6, 0.2};
    DomainSpec t{3, "target", 0.0, 1.0, {}, 2.0, 0.05, 0.02, seed * 4 + 4};
    const std::array<double, 9> eye{1, 0, 0, 0, 1, 0, 0, 0, 1};
    for (std::size_t i = 0; i < 9; ++i)
        t.color_mix[i] = (1 - shift) * eye[i] + shift * far_mix[i];
    t.contrast = 1.0 - 0.7 * shift;
    t.brightness = 0.2 * shift;
    t.texture_freq = 2.0 + 6.0 * shift;
    t.texture_amp = 0.05 + 0.25 * shift;
    t.noise = 0.02 + 0.12 * shift;
    d[3] = t;
    return d;
}

// ---------------------------------------------------------------------------------------------
// Corruptions

enum class CorruptionType { gaussian_noise, contrast, blur, pixelate };

inline std::string to_string(CorruptionType t)
{
    switch (t) {
    case CorruptionType::gaussian_noise: return "gaussian-noise";
    case CorruptionType::contrast: return "contrast";
    case CorruptionType::blur: return "blur";
    case CorruptionType::pixelate: return "pixelate";
    }
    return "?";
}

inline CorruptionType corruption_from_string(const std::string& s)
{
    if (s == "gaussian-noise")
        return CorruptionType::gaussian_noise;
    if (s == "contrast")
        return CorruptionType::contrast;
    if (s == "blur")
        return CorruptionType::blur;
    if (s == "pixelate")
        return CorruptionType::pixelate;
    throw ContractError("unknown corruption type '" + s + "'");
}

struct CorruptionSpec {
    CorruptionType type = CorruptionType::gaussian_noise;
    int severity = 1;
    /// Overrides the severity table: noise sigma, contrast gain, blur kernel size, or pixel block size.
    std::optional<double> parameter;
    std::uint64_t seed = 0;

    /// Severity table, monotone in the corruption's strength.
    double resolved_parameter() const
    {
        if (parameter)
            return *parameter;
        if (severity < 1 || severity > 5)
            throw ContractError("corruption severity must lie in 1..5");
        static constexpr std::array<double, 5> noise{0.04, 0.08, 0.12, 0.18, 0.26};
        static constexpr std::array<double, 5> gain{0.75, 0.6, 0.45, 0.3, 0.15};
        static constexpr std::array<double, 5> blur{3, 5, 7, 9, 11};
        static constexpr std::array<double, 5> block{2, 3, 4, 6, 8};
        const auto i = static_cast<std::size_t>(severity - 1);
        switch (type) {
        case CorruptionType::gaussian_noise: return noise[i];
        case CorruptionType::contrast: return gain[i];
        case CorruptionType::blur: return blur[i];
        case CorruptionType::pixelate: return block[i];
        }
        return 0.0;
    }
};

namespace detail {

inline void box_blur(Tensor& img, std::size_t k)
{
    const std::size_t c = img.dim(0), h = img.dim(1), w = img.dim(2);
    const auto r = static_cast<std::ptrdiff_t>(k / 2);
    Tensor out(img.shape());
    for (std::size_t ch = 0; ch < c; ++ch)
        for (std::size_t y = 0; y < h; ++y)
            for (std::size_t x = 0; x < w; ++x) {
                double s = 0.0;
                int cnt = 0;
                for (std::ptrdiff_t dy = -r; dy <= r; ++dy)
                    for (std::ptrdiff_t dx = -r; dx <= r; ++dx) {
                        const std::ptrdiff_t yy = static_cast<std::ptrdiff_t>(y) + dy;
                        const std::ptrdiff_t xx = static_cast<std::ptrdiff_t>(x) + dx;
                        if (yy < 0 || xx < 0 || yy >= static_cast<std::ptrdiff_t>(h) || xx >= static_cast<std::ptrdiff_t>(w))
                            continue;
                        s += img[(ch * h + static_cast<std::size_t>(yy)) * w + static_cast<std::size_t>(xx)];
                        ++cnt;
                    }
                out[(ch * h + y) * w + x] = s / cnt;
            }
    img = std::move(out);
}

inline void pixelate(Tensor& img, std::size_t block)
{
    const std::size_t c = img.dim(0), h = img.dim(1), w = img.dim(2);
    for (std::size_t ch = 0; ch < c; ++ch)
        for (std::size_t by = 0; by < h; by += block)
            for (std::size_t bx = 0; bx < w; bx += block) {
                const std::size_t ye = std::min(h, by + block), xe = std::min(w, bx + block);
                double s = 0.0;
                for (std::size_t y = by; y < ye; ++y)
                    for (std::size_t x = bx; x < xe; ++x)
                        s += img[(ch * h + y) * w + x];
                s /= static_cast<double>((ye - by) * (xe - bx));
                for (std::size_t y = by; y < ye; ++y)
                    for (std::size_t x = bx; x < xe; ++x)
                        img[(ch * h + y) * w + x] = s;
            }
}

} // namespace detail

/// Apply a corruption to every image; labels and domain tags are carried through unchanged.
inline ShapeDataset corrupt(const ShapeDataset& ds, const CorruptionSpec& spec)
{
    const double p = spec.resolved_parameter();
    ShapeDataset out = ds;
    const std::size_t n = ds.size();
    for (std::size_t i = 0; i < n; ++i) {
        Tensor img = ds.images.row(i);
        switch (spec.type) {
        case CorruptionType::gaussian_noise: {
            Rng rng = derived_rng(spec.seed, i);
            for (double& v : img.data())
                v += p * standard_normal(rng);
            break;
        }
        case CorruptionType::contrast: {
            double m = 0.0;
            for (double v : img.data())
                m += v;
            m /= static_cast<double>(img.size());
            for (double& v : img.data())
                v = (v - m) * p + m;
            break;
        }
        case CorruptionType::blur: detail::box_blur(img, static_cast<std::size_t>(std::max(1.0, p))); break;
        case CorruptionType::pixelate: detail::pixelate(img, static_cast<std::size_t>(std::max(1.0, p))); break;
        }
        const std::size_t stride = img.size();
        for (std::size_t j = 0; j < stride; ++j)
            out.images[i * stride + j] = detail::quantize_f32(std::clamp(img[j], 0.0, 1.0));
    }
    return out;
}

// ---------------------------------------------------------------------------------------------
// Online stream

/// The loss-facing part of a batch: images and domain tags only.
struct BatchView {
    const Tensor& images;
    std::span<const int> domains;
};

/// One online batch. Ground truth travels alongside for metrics and is not part of BatchView.
class StreamBatch {
public:
    StreamBatch(std::size_t index, Tensor images, std::vector<int> domains, std::vector<std::size_t> sample_ids,
                std::vector<int> labels)
        : index_(index), images_(std::move(images)), domains_(std::move(domains)), sample_ids_(std::move(sample_ids)),
          labels_(std::move(labels))
    {
    }

    std::size_t index() const noexcept { return index_; }
    std::size_t size() const noexcept { return sample_ids_.size(); }
    int domain() const { return domains_.front(); }
    const std::vector<std::size_t>& sample_ids() const noexcept { return sample_ids_; }

    BatchView view() const { return BatchView{images_, domains_}; }

    /// Ground-truth labels for metric computation only.
    std::span<const int> metric_labels() const noexcept { return labels_; }

    /// Copy with every ground-truth label replaced (label-hygiene checks).
    StreamBatch with_metric_labels(std::vector<int> labels) const
    {
        return StreamBatch(index_, images_, domains_, sample_ids_, std::move(labels));
    }

private:
    std::size_t index_;
    Tensor images_;
    std::vector<int> domains_;
    std::vector<std::size_t> sample_ids_;
    std::vector<int> labels_;
};

/// Seeded permutation of the dataset cut into batches. Domains are visited in order of first
/// appearance and a batch never straddles two domains.
inline std::vector<StreamBatch> stream(const ShapeDataset& ds, std::size_t batch_size, std::uint64_t seed)
{
    if (batch_size == 0)
        throw ContractError("batch size must be at least 1");
    std::vector<int> order;
    std::map<int, std::vector<std::size_t>> by_domain;
    for (std::size_t i = 0; i < ds.size(); ++i) {
        if (!by_domain.contains(ds.domains[i]))
            order.push_back(ds.domains[i]);
        by_domain[ds.domains[i]].push_back(i);
    }
    Rng rng(seed);
    std::vector<StreamBatch> out;
    for (int d : order) {
        auto& ids = by_domain[d];
        shuffle(std::span<std::size_t>(ids), rng);
        for (std::size_t b = 0; b < ids.size(); b += batch_size) {
            std::vector<std::size_t> chunk(ids.begin() + static_cast<std::ptrdiff_t>(b),
                                           ids.begin() + static_cast<std::ptrdiff_t>(std::min(ids.size(), b + batch_size)));
            std::vector<int> labels, domains;
            for (std::size_t i : chunk) {
                labels.push_back(ds.labels[i]);
                domains.push_back(ds.domains[i]);
            }
            out.emplace_back(out.size(), gather_rows(ds.images, chunk), std::move(domains), std::move(chunk),
                             std::move(labels));
        }
    }
    return out;
}

// ---------------------------------------------------------------------------------------------
// Dataset file: magic "DPLDATA1", JSON header, float32 images, int32 labels, int32 domain tags.

inline void save_dataset(const ShapeDataset& ds, const std::filesystem::path& path)
{
    nlohmann::json header{{"count", ds.size()},
                          {"channels", ds.images.dim(1)},
                          {"size", ds.images.dim(2)},
                          {"classes", ds.classes},
                          {"domains", ds.specs},
                          {"seeds", nlohmann::json::array()}};
    for (const auto& s : ds.specs)
        header["seeds"].push_back(s.seed);
    std::string payload;
    io::append_f32(payload, ds.images.data());
    io::append_i32(payload, ds.labels);
    io::append_i32(payload, ds.domains);
    io::write_container(path, "DPLDATA1", header, payload);
}

inline ShapeDataset load_dataset(const std::filesystem::path& path)
{
    io::Container c = io::read_container(path, "DPLDATA1");
    try {
        const auto n = c.header.at("count").get<std::size_t>();
        const auto ch = c.header.at("channels").get<std::size_t>();
        const auto sz = c.header.at("size").get<std::size_t>();
        ShapeDataset ds;
        ds.classes = c.header.at("classes").get<std::size_t>();
        ds.specs = c.header.at("domains").get<std::vector<DomainSpec>>();
        io::PayloadReader reader(c.payload, path.string());
        ds.images = Tensor(Shape{n, ch, sz, sz}, reader.f32(n * ch * sz * sz));
        ds.labels = reader.i32(n);
        ds.domains = reader.i32(n);
        if (!reader.exhausted())
            throw io::IoError(path.string() + ": trailing bytes after payload");
        return ds;
    } catch (const nlohmann::json::exception& e) {
        throw io::IoError(path.string() + ": malformed dataset header: " + e.what());
    }
}

} // namespace dpl
