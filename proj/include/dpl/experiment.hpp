#pragma once

#include <dpl/binio.hpp>
#include <dpl/engine.hpp>
#include <dpl/model.hpp>
#include <dpl/synthdata.hpp>

#include "json.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <numeric>
#include <set>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace dpl {

/// Invalid experiment configuration. `keys` lists every offending key (dotted paths).
class ConfigError : public std::runtime_error {
public:
    ConfigError(std::vector<std::string> keys, const std::string& detail)
        : std::runtime_error(detail), keys_(std::move(keys))
    {
    }
    const std::vector<std::string>& keys() const noexcept { return keys_; }

private:
    std::vector<std::string> keys_;
};

/// One entry of the method list: a label (used in file names and the trace `method` column)
/// and the adaptation settings it runs with.
struct MethodRun {
    std::string label;
    AdaptConfig config;
};

struct PretrainStage {
    std::vector<std::filesystem::path> sources;
    PretrainConfig config;
    NormMode norm = NormMode::batch_norm;
};

struct RunStateOptions {
    bool save = false;
    std::optional<std::size_t> stop_after;
    bool resume = false;
};

struct ExperimentConfig {
    std::filesystem::path checkpoint;
    std::vector<std::filesystem::path> target;
    std::filesystem::path output_dir;
    std::vector<MethodRun> methods;
    std::vector<std::uint64_t> seeds;
    std::optional<PretrainStage> pretrain;
    RunStateOptions run_state;
};

namespace detail {

class ConfigReader {
public:
    void unknown_keys(const nlohmann::json& obj, const std::string& prefix, std::initializer_list<const char*> allowed)
    {
        if (!obj.is_object()) {
            fail(prefix.empty() ? "<root>" : prefix, "must be a JSON object");
            return;
        }
        for (const auto& [k, v] : obj.items()) {
            const bool ok = std::any_of(allowed.begin(), allowed.end(), [&](const char* a) { return k == a; });
            if (!ok)
                fail(join(prefix, k), "unknown key");
        }
    }

    template <class T>
    void get(const nlohmann::json& obj, const std::string& prefix, const char* key, T& out)
    {
        if (!obj.is_object() || !obj.contains(key))
            return;
        try {
            obj.at(key).get_to(out);
        } catch (const nlohmann::json::exception&) {
            fail(join(prefix, key), "has the wrong type");
        }
    }

    template <class E, class Parse>
    void get_enum(const nlohmann::json& obj, const std::string& prefix, const char* key, E& out, Parse parse)
    {
        std::string s;
        if (!obj.is_object() || !obj.contains(key))
            return;
        get(obj, prefix, key, s);
        try {
            out = parse(s);
        } catch (const ContractError&) {
            fail(join(prefix, key), "has unknown value '" + s + "'");
        }
    }

    void require(const nlohmann::json& obj, const std::string& prefix, const char* key)
    {
        if (!obj.is_object() || !obj.contains(key))
            fail(join(prefix, key), "is required");
    }

    void check(bool ok, const std::string& key, const std::string& what)
    {
        if (!ok)
            fail(key, what);
    }

    void fail(const std::string& key, const std::string& what)
    {
        keys_.push_back(key);
        messages_.push_back(key + " " + what);
    }

    void throw_if_failed() const
    {
        if (keys_.empty())
            return;
        std::string msg = "invalid configuration:";
        for (const auto& m : messages_)
            msg += "\n  " + m;
        throw ConfigError(keys_, msg);
    }

    static std::string join(const std::string& prefix, const std::string& key)
    {
        return prefix.empty() ? key : prefix + "." + key;
    }

private:
    std::vector<std::string> keys_;
    std::vector<std::string> messages_;
};

inline constexpr std::initializer_list<const char*> kAdaptKeys = {
    "alpha", "tau", "eta", "beta", "batch_size", "steps_per_batch", "scope", "optimizer", "style_pairing", "reset",
    "norm_stats", "refresh_pseudo_labels", "skip_empty_batches", "memory_grad", "second_pass_batch_stats"};

inline void read_adapt_settings(ConfigReader& r, const nlohmann::json& j, const std::string& prefix, AdaptConfig& c)
{
    r.get(j, prefix, "alpha", c.alpha);
    r.get(j, prefix, "tau", c.tau);
    r.get(j, prefix, "eta", c.eta);
    r.get(j, prefix, "beta", c.beta);
    r.get(j, prefix, "batch_size", c.batch_size);
    r.get(j, prefix, "steps_per_batch", c.steps_per_batch);
    r.get_enum(j, prefix, "scope", c.scope, param_scope_from_string);
    r.get_enum(j, prefix, "style_pairing", c.style.mode, pairing_mode_from_string);
    r.get_enum(j, prefix, "reset", c.reset, reset_policy_from_string);
    r.get_enum(j, prefix, "norm_stats", c.norm_stats, norm_stats_from_string);
    r.get(j, prefix, "refresh_pseudo_labels", c.refresh_pseudo_labels);
    r.get(j, prefix, "skip_empty_batches", c.skip_empty_batches);
    r.get(j, prefix, "memory_grad", c.memory_grad);
    r.get(j, prefix, "second_pass_batch_stats", c.second_pass_batch_stats);
    if (j.is_object() && j.contains("optimizer")) {
        const auto& o = j.at("optimizer");
        const std::string op = ConfigReader::join(prefix, "optimizer");
        r.unknown_keys(o, op, {"kind", "lr", "momentum", "beta1", "beta2", "eps"});
        r.get_enum(o, op, "kind", c.optimizer.kind, optimizer_kind_from_string);
        r.get(o, op, "lr", c.optimizer.lr);
        r.get(o, op, "momentum", c.optimizer.momentum);
        r.get(o, op, "beta1", c.optimizer.beta1);
        r.get(o, op, "beta2", c.optimizer.beta2);
        r.get(o, op, "eps", c.optimizer.eps);
    }
}

inline void check_adapt_ranges(ConfigReader& r, const AdaptConfig& c, const std::string& prefix)
{
    auto key = [&](const char* k) { return ConfigReader::join(prefix, k); };
    r.check(c.alpha > 0.0 && c.alpha < 1.0, key("alpha"), "must lie in (0, 1), got " + std::to_string(c.alpha));
    r.check(c.tau > 0.0, key("tau"), "must be positive");
    r.check(c.eta >= 0.0 && c.eta <= 1.0, key("eta"), "must lie in [0, 1]");
    r.check(c.beta >= 0.0, key("beta"), "must be non-negative");
    r.check(c.batch_size >= 1, key("batch_size"), "must be at least 1");
    r.check(c.steps_per_batch == 1 || c.steps_per_batch == 2, key("steps_per_batch"), "must be 1 or 2");
    r.check(c.optimizer.lr >= 0.0, key("optimizer.lr"), "must be non-negative");
    r.check(c.optimizer.momentum >= 0.0 && c.optimizer.momentum < 1.0, key("optimizer.momentum"),
            "must lie in [0, 1)");
    r.check(c.optimizer.beta1 >= 0.0 && c.optimizer.beta1 < 1.0, key("optimizer.beta1"), "must lie in [0, 1)");
    r.check(c.optimizer.beta2 >= 0.0 && c.optimizer.beta2 < 1.0, key("optimizer.beta2"), "must lie in [0, 1)");
    r.check(c.optimizer.eps > 0.0, key("optimizer.eps"), "must be positive");
}

inline bool valid_label(const std::string& s)
{
    return !s.empty() && std::all_of(s.begin(), s.end(), [](char ch) {
        return std::isalnum(static_cast<unsigned char>(ch)) || ch == '-' || ch == '_' || ch == '+' || ch == '.';
    });
}

} // namespace detail

/// Parse and validate an experiment document. Every problem is collected before throwing.
inline ExperimentConfig parse_experiment_config(const nlohmann::json& j)
{
    detail::ConfigReader r;
    r.unknown_keys(j, "", {"checkpoint", "target", "output_dir", "methods", "seeds", "adapt", "pretrain", "run_state"});
    r.require(j, "", "checkpoint");
    r.require(j, "", "target");
    r.require(j, "", "output_dir");
    r.require(j, "", "methods");
    ExperimentConfig cfg;
    std::string s;
    r.get(j, "", "checkpoint", s);
    cfg.checkpoint = s;
    s.clear();
    r.get(j, "", "output_dir", s);
    cfg.output_dir = s;
    std::vector<std::string> targets;
    if (j.is_object() && j.contains("target") && j.at("target").is_string())
        targets.push_back(j.at("target").get<std::string>());
    else
        r.get(j, "", "target", targets);
    for (const auto& t : targets)
        cfg.target.emplace_back(t);
    r.check(!j.is_object() || !j.contains("target") || !cfg.target.empty(), "target", "must name at least one dataset");
    cfg.seeds = {0};
    r.get(j, "", "seeds", cfg.seeds);
    r.check(!cfg.seeds.empty(), "seeds", "must not be empty");

    AdaptConfig base;
    if (j.is_object() && j.contains("adapt")) {
        r.unknown_keys(j.at("adapt"), "adapt", detail::kAdaptKeys);
        detail::read_adapt_settings(r, j.at("adapt"), "adapt", base);
    }
    detail::check_adapt_ranges(r, base, "adapt");

    if (j.is_object() && j.contains("methods")) {
        const auto& ms = j.at("methods");
        if (!ms.is_array() || ms.empty())
            r.fail("methods", "must be a non-empty array");
        else
            for (std::size_t i = 0; i < ms.size(); ++i) {
                const std::string p = "methods[" + std::to_string(i) + "]";
                MethodRun run{"", base};
                if (ms[i].is_string()) {
                    run.label = ms[i].get<std::string>();
                    try {
                        run.config.method = method_from_string(run.label);
                    } catch (const ContractError&) {
                        r.fail(p, "names unknown method '" + run.label + "'");
                    }
                } else if (ms[i].is_object()) {
                    r.unknown_keys(ms[i], p,
                                   {"label", "method", "alpha", "tau", "eta", "beta", "batch_size", "steps_per_batch",
                                    "scope", "optimizer", "style_pairing", "reset", "norm_stats",
                                    "refresh_pseudo_labels", "skip_empty_batches", "memory_grad",
                                    "second_pass_batch_stats"});
                    r.require(ms[i], p, "method");
                    r.get_enum(ms[i], p, "method", run.config.method, method_from_string);
                    run.label = ms[i].value("method", std::string{});
                    r.get(ms[i], p, "label", run.label);
                    detail::read_adapt_settings(r, ms[i], p, run.config);
                    detail::check_adapt_ranges(r, run.config, p);
                } else {
                    r.fail(p, "must be a method name or an object");
                    continue;
                }
                r.check(detail::valid_label(run.label), p + ".label",
                        "must be non-empty and use only letters, digits, '-', '_', '+', '.'");
                cfg.methods.push_back(std::move(run));
            }
        std::set<std::string> seen;
        for (const auto& m : cfg.methods)
            r.check(seen.insert(m.label).second, "methods", "repeats label '" + m.label + "'");
    }

    if (j.is_object() && j.contains("pretrain")) {
        const auto& p = j.at("pretrain");
        r.unknown_keys(p, "pretrain",
                       {"sources", "epochs", "batch_size", "lr", "validation_fraction", "seed", "loss", "norm"});
        r.require(p, "pretrain", "sources");
        PretrainStage st;
        std::vector<std::string> src;
        r.get(p, "pretrain", "sources", src);
        for (const auto& x : src)
            st.sources.emplace_back(x);
        r.get(p, "pretrain", "epochs", st.config.epochs);
        r.get(p, "pretrain", "batch_size", st.config.batch_size);
        r.get(p, "pretrain", "lr", st.config.optimizer.lr);
        r.get(p, "pretrain", "validation_fraction", st.config.validation_fraction);
        r.get(p, "pretrain", "seed", st.config.seed);
        r.get_enum(p, "pretrain", "loss", st.config.loss, [](const std::string& v) {
            if (v == "ce")
                return SupervisedLoss::ce;
            if (v == "dpl")
                return SupervisedLoss::dpl;
            throw ContractError("unknown loss");
        });
        r.get_enum(p, "pretrain", "norm", st.norm, norm_mode_from_string);
        r.check(p.is_object() && !(p.contains("sources") && st.sources.empty()), "pretrain.sources",
                "must name at least one dataset");
        r.check(st.config.validation_fraction > 0.0 && st.config.validation_fraction < 1.0,
                "pretrain.validation_fraction", "must lie in (0, 1)");
        r.check(st.config.batch_size >= 2, "pretrain.batch_size", "must be at least 2");
        r.check(st.config.optimizer.lr >= 0.0, "pretrain.lr", "must be non-negative");
        cfg.pretrain = std::move(st);
    }

    if (j.is_object() && j.contains("run_state")) {
        const auto& rs = j.at("run_state");
        r.unknown_keys(rs, "run_state", {"save", "stop_after", "resume"});
        r.get(rs, "run_state", "save", cfg.run_state.save);
        r.get(rs, "run_state", "resume", cfg.run_state.resume);
        if (rs.is_object() && rs.contains("stop_after")) {
            std::size_t n = 0;
            r.get(rs, "run_state", "stop_after", n);
            cfg.run_state.stop_after = n;
        }
    }
    r.throw_if_failed();
    return cfg;
}

inline ExperimentConfig load_experiment_config(const std::filesystem::path& path)
{
    std::ifstream in(path);
    if (!in)
        throw io::IoError(path.string() + ": cannot open experiment config");
    nlohmann::json j;
    try {
        in >> j;
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError({"<document>"}, path.string() + ": not valid JSON: " + e.what());
    }
    return parse_experiment_config(j);
}

// ---------------------------------------------------------------------------------------------
// Artifacts

inline std::string format_double(double v)
{
    if (std::isnan(v))
        return "nan";
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

inline std::string trace_file_name(const std::string& label, std::uint64_t seed)
{
    return "trace_" + label + "_seed" + std::to_string(seed) + ".csv";
}

inline std::string histogram_file_name(const std::string& label, std::uint64_t seed)
{
    return "hist_" + label + "_seed" + std::to_string(seed) + ".csv";
}

inline std::string run_state_file_name(const std::string& label, std::uint64_t seed)
{
    return "state_" + label + "_seed" + std::to_string(seed) + ".dplrun";
}

namespace detail {

inline void write_text(const std::filesystem::path& path, const std::string& text)
{
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out)
        throw io::IoError(path.string() + ": cannot open for writing");
    out << text;
    if (!out)
        throw io::IoError(path.string() + ": write failed");
}

inline std::string read_text(const std::filesystem::path& path)
{
    std::ifstream in(path, std::ios::binary);
    if (!in)
        throw io::IoError(path.string() + ": cannot open for reading");
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

} // namespace detail

/// Trace CSV: iter,method,seed,loss,n_confident,cum_acc (one row per batch).
inline std::string trace_csv(const AdaptationTrace& t, const std::string& label)
{
    std::string out = "iter,method,seed,loss,n_confident,cum_acc\n";
    for (std::size_t i = 0; i < t.records.size(); ++i) {
        const auto& r = t.records[i];
        out += std::to_string(i) + "," + label + "," + std::to_string(t.seed) + "," + format_double(r.loss) + ","
               + std::to_string(r.n_confident) + "," + format_double(r.cum_acc) + "\n";
    }
    return out;
}

/// Per-class prediction histogram against ground truth: class,predicted,truth.
inline std::string histogram_csv(const AdaptationTrace& t)
{
    std::string out = "class,predicted,truth\n";
    for (std::size_t k = 0; k < t.predicted_histogram.size(); ++k)
        out += std::to_string(k) + "," + std::to_string(t.predicted_histogram[k]) + ","
               + std::to_string(t.truth_histogram[k]) + "\n";
    return out;
}

struct MeanStd {
    double mean = 0.0;
    double std = 0.0;
};

/// Mean and sample standard deviation (n - 1 denominator; 0 for a single value).
inline MeanStd mean_std(const std::vector<double>& v)
{
    MeanStd m;
    if (v.empty())
        return m;
    m.mean = std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
    if (v.size() > 1) {
        double ss = 0.0;
        for (double x : v)
            ss += (x - m.mean) * (x - m.mean);
        m.std = std::sqrt(ss / static_cast<double>(v.size() - 1));
    }
    return m;
}

struct MethodSummary {
    std::string label;
    std::string method;
    std::vector<std::uint64_t> seeds;
    std::vector<double> accuracies;
    std::size_t diverged = 0;
};

inline nlohmann::json summary_json(const std::vector<MethodSummary>& methods)
{
    nlohmann::json out{{"methods", nlohmann::json::object()}};
    for (const auto& m : methods) {
        std::vector<double> err;
        for (double a : m.accuracies)
            err.push_back(1.0 - a);
        const MeanStd acc = mean_std(m.accuracies), e = mean_std(err);
        out["methods"][m.label] = {{"method", m.method},
                                   {"seeds", m.seeds},
                                   {"final_cum_acc", m.accuracies},
                                   {"accuracy_mean", acc.mean},
                                   {"accuracy_std", acc.std},
                                   {"error_rate_mean", e.mean},
                                   {"error_rate_std", e.std},
                                   {"diverged_runs", m.diverged}};
    }
    return out;
}

struct ExperimentResult {
    std::vector<MethodSummary> summaries;
    std::map<std::string, std::vector<AdaptationTrace>> traces;
    std::vector<std::filesystem::path> files;
};

inline ShapeDataset load_datasets(const std::vector<std::filesystem::path>& paths)
{
    std::vector<ShapeDataset> parts;
    for (const auto& p : paths)
        parts.push_back(load_dataset(p));
    return parts.size() == 1 ? parts.front() : merge(std::span<const ShapeDataset>(parts));
}

/// Train a source model on labeled datasets; the architecture follows the data geometry.
inline PretrainResult pretrain_source(const ShapeDataset& source, const PretrainConfig& cfg,
                                      NormMode norm = NormMode::batch_norm)
{
    NetConfig net;
    net.in_channels = source.channels();
    net.image_size = source.image_size();
    net.classes = source.classes;
    net.norm = norm;
    PrototypeClassifier model(net, cfg.seed);
    return pretrain(model, source, cfg);
}

/// Run every (method, seed) cell and write traces, histograms and summary.json.
inline ExperimentResult run_experiment(const ExperimentConfig& cfg)
{
    ExperimentResult res;
    std::error_code ec;
    std::filesystem::create_directories(cfg.output_dir, ec);
    if (ec)
        throw io::IoError(cfg.output_dir.string() + ": cannot create output directory: " + ec.message());

    if (cfg.pretrain) {
        const ShapeDataset src = load_datasets(cfg.pretrain->sources);
        const PretrainResult pr = pretrain_source(src, cfg.pretrain->config, cfg.pretrain->norm);
        save_checkpoint(pr.best, cfg.checkpoint);
    }
    const Checkpoint source = load_checkpoint(cfg.checkpoint);
    const ShapeDataset target = load_datasets(cfg.target);
    if (target.classes != source.config.classes || target.channels() != source.config.in_channels
        || target.image_size() != source.config.image_size)
        throw ConfigError({"target"}, "target dataset geometry does not match the checkpoint architecture");

    for (const MethodRun& run : cfg.methods) {
        MethodSummary sum{run.label, to_string(run.config.method), {}, {}, 0};
        for (std::uint64_t seed : cfg.seeds) {
            AdaptConfig ac = run.config;
            ac.seed = seed;
            const auto batches = stream(target, ac.batch_size, seed);
            const auto state_path = cfg.output_dir / run_state_file_name(run.label, seed);
            std::optional<AdaptSession> session;
            if (cfg.run_state.resume && std::filesystem::exists(state_path))
                session.emplace(AdaptSession::resume(load_run_state(state_path)));
            else
                session.emplace(source, ac);
            std::size_t stop = batches.size();
            if (cfg.run_state.stop_after)
                stop = std::min(stop, *cfg.run_state.stop_after);
            while (session->cursor() < stop)
                session->process(batches[session->cursor()]);
            if (cfg.run_state.save || cfg.run_state.stop_after)
                save_run_state(session->save_state(), state_path);
            const AdaptationTrace& t = session->trace();
            const auto tpath = cfg.output_dir / trace_file_name(run.label, seed);
            const auto hpath = cfg.output_dir / histogram_file_name(run.label, seed);
            detail::write_text(tpath, trace_csv(t, run.label));
            detail::write_text(hpath, histogram_csv(t));
            res.files.push_back(tpath);
            res.files.push_back(hpath);
            sum.seeds.push_back(seed);
            sum.accuracies.push_back(t.accuracy());
            sum.diverged += t.diverged ? 1 : 0;
            res.traces[run.label].push_back(t);
        }
        res.summaries.push_back(std::move(sum));
    }
    const auto spath = cfg.output_dir / "summary.json";
    detail::write_text(spath, summary_json(res.summaries).dump(2) + "\n");
    res.files.push_back(spath);
    return res;
}

// ---------------------------------------------------------------------------------------------
// Report

struct TraceRow {
    std::size_t iter = 0;
    std::string method;
    std::uint64_t seed = 0;
    double loss = 0.0;
    std::size_t n_confident = 0;
    double cum_acc = 0.0;
};

inline std::vector<TraceRow> parse_trace_csv(const std::string& text, const std::string& origin)
{
    std::istringstream in(text);
    std::string line;
    if (!std::getline(in, line) || line != "iter,method,seed,loss,n_confident,cum_acc")
        throw io::IoError(origin + ": not a trace file (bad header)");
    std::vector<TraceRow> rows;
    while (std::getline(in, line)) {
        if (line.empty())
            continue;
        std::vector<std::string> f;
        std::stringstream ls(line);
        std::string cell;
        while (std::getline(ls, cell, ','))
            f.push_back(cell);
        if (f.size() != 6)
            throw io::IoError(origin + ": malformed row '" + line + "'");
        try {
            TraceRow r;
            r.iter = std::stoul(f[0]);
            r.method = f[1];
            r.seed = std::stoull(f[2]);
            r.loss = f[3] == "nan" ? std::nan("") : std::stod(f[3]);
            r.n_confident = std::stoul(f[4]);
            r.cum_acc = std::stod(f[5]);
            rows.push_back(std::move(r));
        } catch (const std::exception&) {
            throw io::IoError(origin + ": malformed row '" + line + "'");
        }
    }
    return rows;
}

struct ReportSeries {
    std::string method;
    std::vector<MeanStd> cum_acc; // per iteration, across seeds
    std::size_t seeds = 0;
};

struct ReportData {
    std::vector<ReportSeries> series;
    /// method -> mean predicted count per class across seeds; "ground-truth" row included.
    std::map<std::string, std::vector<double>> histogram;
    std::map<std::string, MeanStd> final_accuracy;
};

/// Aggregate every trace_*.csv / hist_*.csv in `dir`.
inline ReportData build_report(const std::filesystem::path& dir)
{
    if (!std::filesystem::is_directory(dir))
        throw io::IoError(dir.string() + ": not a directory");
    std::vector<std::filesystem::path> traces, hists;
    for (const auto& e : std::filesystem::directory_iterator(dir)) {
        const std::string name = e.path().filename().string();
        if (name.rfind("trace_", 0) == 0 && e.path().extension() == ".csv")
            traces.push_back(e.path());
        if (name.rfind("hist_", 0) == 0 && e.path().extension() == ".csv")
            hists.push_back(e.path());
    }
    std::sort(traces.begin(), traces.end());
    std::sort(hists.begin(), hists.end());
    if (traces.empty())
        throw io::IoError(dir.string() + ": no trace files found");

    std::map<std::string, std::vector<std::vector<TraceRow>>> by_method;
    for (const auto& p : traces) {
        auto rows = parse_trace_csv(detail::read_text(p), p.string());
        if (!rows.empty())
            by_method[rows.front().method].push_back(std::move(rows));
    }
    ReportData rep;
    for (auto& [method, runs] : by_method) {
        ReportSeries s{method, {}, runs.size()};
        std::size_t len = runs.front().size();
        for (const auto& r : runs)
            len = std::min(len, r.size());
        std::vector<double> finals;
        for (std::size_t i = 0; i < len; ++i) {
            std::vector<double> v;
            for (const auto& r : runs)
                v.push_back(r[i].cum_acc);
            s.cum_acc.push_back(mean_std(v));
        }
        for (const auto& r : runs)
            finals.push_back(r.back().cum_acc);
        rep.final_accuracy[method] = mean_std(finals);
        rep.series.push_back(std::move(s));
    }

    std::map<std::string, std::size_t> hist_runs;
    std::vector<double> truth;
    std::size_t truth_runs = 0;
    for (const auto& p : hists) {
        // hist_<label>_seed<k>.csv
        const std::string stem = p.stem().string();
        const auto pos = stem.rfind("_seed");
        if (pos == std::string::npos || pos <= 5)
            continue;
        const std::string method = stem.substr(5, pos - 5);
        std::istringstream in(detail::read_text(p));
        std::string line;
        std::getline(in, line);
        if (line != "class,predicted,truth")
            throw io::IoError(p.string() + ": not a histogram file (bad header)");
        auto& row = rep.histogram[method];
        std::vector<double> t;
        while (std::getline(in, line)) {
            if (line.empty())
                continue;
            std::size_t k = 0, pred = 0, tr = 0;
            if (std::sscanf(line.c_str(), "%zu,%zu,%zu", &k, &pred, &tr) != 3)
                throw io::IoError(p.string() + ": malformed row '" + line + "'");
            if (row.size() <= k)
                row.resize(k + 1, 0.0);
            row[k] += static_cast<double>(pred);
            if (t.size() <= k)
                t.resize(k + 1, 0.0);
            t[k] = static_cast<double>(tr);
        }
        ++hist_runs[method];
        if (truth.size() < t.size())
            truth.resize(t.size(), 0.0);
        for (std::size_t k = 0; k < t.size(); ++k)
            truth[k] += t[k];
        ++truth_runs;
    }
    for (auto& [method, row] : rep.histogram)
        for (double& v : row)
            v /= static_cast<double>(hist_runs[method]);
    if (truth_runs) {
        for (double& v : truth)
            v /= static_cast<double>(truth_runs);
        rep.histogram["ground-truth"] = truth;
    }
    return rep;
}

/// Long-format series: method,iter,cum_acc_mean,cum_acc_std,seeds.
inline std::string report_series_csv(const ReportData& rep)
{
    std::string out = "method,iter,cum_acc_mean,cum_acc_std,seeds\n";
    for (const auto& s : rep.series)
        for (std::size_t i = 0; i < s.cum_acc.size(); ++i)
            out += s.method + "," + std::to_string(i) + "," + format_double(s.cum_acc[i].mean) + ","
                   + format_double(s.cum_acc[i].std) + "," + std::to_string(s.seeds) + "\n";
    return out;
}

/// Prediction histogram table: one row per method plus ground truth, one column per class.
inline std::string report_histogram_csv(const ReportData& rep)
{
    std::size_t classes = 0;
    for (const auto& [m, row] : rep.histogram)
        classes = std::max(classes, row.size());
    std::string out = "method";
    for (std::size_t k = 0; k < classes; ++k)
        out += ",class_" + std::to_string(k);
    out += "\n";
    for (const auto& [m, row] : rep.histogram) {
        out += m;
        for (std::size_t k = 0; k < classes; ++k)
            out += "," + format_double(k < row.size() ? row[k] : 0.0);
        out += "\n";
    }
    return out;
}

/// Writes the series to `out` and the histogram table next to it (<stem>_histogram.csv).
inline std::filesystem::path write_report(const ReportData& rep, const std::filesystem::path& out)
{
    if (out.has_parent_path()) {
        std::error_code ec;
        std::filesystem::create_directories(out.parent_path(), ec);
    }
    detail::write_text(out, report_series_csv(rep));
    auto hist = out;
    hist.replace_filename(out.stem().string() + "_histogram.csv");
    detail::write_text(hist, report_histogram_csv(rep));
    return hist;
}

} // namespace dpl
