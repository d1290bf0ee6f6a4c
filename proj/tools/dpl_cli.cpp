#include <dpl/dpl.hpp>

#include "CLI11.hpp"
#include "json.hpp"

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

namespace {

enum ExitCode { kOk = 0, kVerifyFailed = 1, kIoError = 2, kConfigError = 3 };

struct GenDataArgs {
    std::string spec;
    std::string out;
    std::size_t samples = 600;
    std::size_t classes = 5;
    std::size_t size = 24;
    std::size_t channels = 3;
    double shift = 0.4;
    std::uint64_t seed = 0;
    std::string corruption;
    int severity = 3;
};

struct PretrainArgs {
    std::vector<std::string> data;
    std::string out;
    std::size_t epochs = 12;
    double lr = 1e-2;
    std::size_t batch_size = 32;
    double val_fraction = 0.2;
    std::uint64_t seed = 0;
    std::string norm = "batch-norm";
    std::string loss = "ce";
};

struct AdaptArgs {
    std::string config;
    std::vector<std::string> methods;
};

struct VerifyArgs {
    std::string suite = "all";
    std::uint64_t seed = 2024;
    bool inject_fault = false;
};

struct ReportArgs {
    std::string runs;
    std::string out;
};

int gen_data(const GenDataArgs& a)
{
    std::vector<dpl::DomainSpec> domains;
    std::size_t samples = a.samples, classes = a.classes, size = a.size, channels = a.channels;
    if (!a.spec.empty()) {
        std::ifstream in(a.spec);
        if (!in)
            throw dpl::io::IoError(a.spec + ": cannot open data spec");
        nlohmann::json j;
        try {
            in >> j;
            domains = j.at("domains").get<std::vector<dpl::DomainSpec>>();
            samples = j.value("samples", samples);
            classes = j.value("classes", classes);
            size = j.value("size", size);
            channels = j.value("channels", channels);
        } catch (const nlohmann::json::exception& e) {
            throw dpl::ConfigError({"spec"}, a.spec + ": invalid data spec: " + e.what());
        }
    } else {
        domains = dpl::benchmark_domains(a.shift, a.seed);
    }
    std::optional<dpl::CorruptionSpec> corruption;
    if (!a.corruption.empty()) {
        dpl::CorruptionSpec c;
        c.type = dpl::corruption_from_string(a.corruption);
        c.severity = a.severity;
        c.seed = a.seed;
        corruption = c;
    }
    std::error_code ec;
    std::filesystem::create_directories(a.out, ec);
    if (ec)
        throw dpl::io::IoError(a.out + ": cannot create output directory: " + ec.message());
    for (const auto& d : domains) {
        dpl::ShapeDataset ds = dpl::generate(d, samples, classes, size, channels);
        // Corruptions apply to the target-like domains only: the last one in the list.
        if (corruption && &d == &domains.back())
            ds = dpl::corrupt(ds, *corruption);
        const auto path = std::filesystem::path(a.out) / (d.name + ".dpld");
        dpl::save_dataset(ds, path);
        std::printf("%-12s %zu samples -> %s\n", d.name.c_str(), ds.size(), path.string().c_str());
    }
    return kOk;
}

int pretrain(const PretrainArgs& a)
{
    std::vector<std::filesystem::path> paths(a.data.begin(), a.data.end());
    const dpl::ShapeDataset source = dpl::load_datasets(paths);
    dpl::PretrainConfig cfg;
    cfg.epochs = a.epochs;
    cfg.optimizer.lr = a.lr;
    cfg.batch_size = a.batch_size;
    cfg.validation_fraction = a.val_fraction;
    cfg.seed = a.seed;
    cfg.loss = a.loss == "dpl" ? dpl::SupervisedLoss::dpl : dpl::SupervisedLoss::ce;
    const dpl::PretrainResult r = dpl::pretrain_source(source, cfg, dpl::norm_mode_from_string(a.norm));
    dpl::save_checkpoint(r.best, a.out);
    std::printf("epochs %zu, best epoch %zu, validation accuracy %.4f\n", a.epochs, r.best_epoch,
                r.best_validation_accuracy);
    std::printf("checkpoint -> %s\n", a.out.c_str());
    return kOk;
}

int adapt(const AdaptArgs& a)
{
    dpl::ExperimentConfig cfg = dpl::load_experiment_config(a.config);
    if (!a.methods.empty()) {
        const dpl::AdaptConfig base = cfg.methods.front().config;
        cfg.methods.clear();
        for (const auto& m : a.methods) {
            dpl::MethodRun run{m, base};
            try {
                run.config.method = dpl::method_from_string(m);
            } catch (const dpl::ContractError&) {
                throw dpl::ConfigError({"--method"}, "unknown method '" + m + "'");
            }
            cfg.methods.push_back(std::move(run));
        }
    }
    const dpl::ExperimentResult r = dpl::run_experiment(cfg);
    std::printf("%-20s %10s %10s %6s\n", "method", "acc_mean", "acc_std", "runs");
    for (const auto& s : r.summaries) {
        const auto ms = dpl::mean_std(s.accuracies);
        std::printf("%-20s %10.4f %10.4f %6zu%s\n", s.label.c_str(), ms.mean, ms.std, s.accuracies.size(),
                    s.diverged ? "  (diverged runs present)" : "");
    }
    std::printf("wrote %zu files to %s\n", r.files.size(), cfg.output_dir.string().c_str());
    return kOk;
}

int verify(const VerifyArgs& a)
{
    dpl::verify::Options o;
    o.seed = a.seed;
    o.inject_fault = a.inject_fault;
    const auto results = dpl::verify::run_suite(a.suite, o);
    std::size_t failed = 0;
    for (const auto& r : results) {
        std::printf("%s %s  %s\n", r.passed ? "PASS" : "FAIL", r.name.c_str(), r.detail.c_str());
        failed += r.passed ? 0 : 1;
    }
    std::printf("%zu/%zu properties passed\n", results.size() - failed, results.size());
    return failed ? kVerifyFailed : kOk;
}

int report(const ReportArgs& a)
{
    const dpl::ReportData rep = dpl::build_report(a.runs);
    const auto hist = dpl::write_report(rep, a.out);
    std::printf("%-20s %10s %10s %6s\n", "method", "final_acc", "std", "iters");
    for (const auto& s : rep.series) {
        const auto& f = rep.final_accuracy.at(s.method);
        std::printf("%-20s %10.4f %10.4f %6zu\n", s.method.c_str(), f.mean, f.std, s.cum_acc.size());
    }
    std::printf("series -> %s\nhistogram -> %s\n", a.out.c_str(), hist.string().c_str());
    return kOk;
}

} // namespace

int main(int argc, char** argv)
{
    CLI::App app{"Prototype-centric test-time adaptation toolkit"};
    app.require_subcommand(1);

    GenDataArgs g;
    auto* cmd_gen = app.add_subcommand("gen-data", "Generate synthetic shape datasets (three sources and a target)");
    cmd_gen->add_option("--spec", g.spec, "JSON file with a \"domains\" list (overrides the built-in benchmark)")
        ->check(CLI::ExistingFile);
    cmd_gen->add_option("--out", g.out, "Output directory")->required();
    cmd_gen->add_option("--samples", g.samples, "Samples per domain")->capture_default_str();
    cmd_gen->add_option("--classes", g.classes, "Shape classes (1-7)")->capture_default_str();
    cmd_gen->add_option("--size", g.size, "Image side length")->capture_default_str();
    cmd_gen->add_option("--channels", g.channels, "Image channels")->capture_default_str();
    cmd_gen->add_option("--shift", g.shift, "Target shift level in [0, 1]")->capture_default_str();
    cmd_gen->add_option("--seed", g.seed, "Generator seed")->capture_default_str();
    cmd_gen->add_option("--corruption", g.corruption, "Corrupt the target: gaussian-noise, contrast, blur, pixelate");
    cmd_gen->add_option("--severity", g.severity, "Corruption severity 1-5")->capture_default_str();

    PretrainArgs p;
    auto* cmd_pre = app.add_subcommand("pretrain", "Train a source model on labeled datasets");
    cmd_pre->add_option("--data", p.data, "Source dataset files")->required();
    cmd_pre->add_option("--out", p.out, "Checkpoint path")->required();
    cmd_pre->add_option("--epochs", p.epochs, "Training epochs (0 keeps the initialization)")->capture_default_str();
    cmd_pre->add_option("--lr", p.lr, "Adam learning rate")->capture_default_str();
    cmd_pre->add_option("--batch-size", p.batch_size, "Batch size")->capture_default_str();
    cmd_pre->add_option("--val-fraction", p.val_fraction, "Held-out validation fraction")->capture_default_str();
    cmd_pre->add_option("--seed", p.seed, "Initialization and shuffling seed")->capture_default_str();
    cmd_pre->add_option("--norm", p.norm, "Normalization: batch-norm or identity")
        ->check(CLI::IsMember({"batch-norm", "identity"}))
        ->capture_default_str();
    cmd_pre->add_option("--loss", p.loss, "Supervised loss: ce or dpl")
        ->check(CLI::IsMember({"ce", "dpl"}))
        ->capture_default_str();

    AdaptArgs ad;
    auto* cmd_adapt = app.add_subcommand("adapt", "Run an adaptation experiment described by a JSON config");
    cmd_adapt->add_option("--config", ad.config, "Experiment config file")->required();
    cmd_adapt->add_option("--method", ad.methods, "Run only these methods (replaces the config's method list)");

    VerifyArgs v;
    auto* cmd_verify = app.add_subcommand("verify", "Run property suites");
    cmd_verify->add_option("--suite", v.suite, "grad, losses, styletx, memory or all")
        ->check(CLI::IsMember({"grad", "losses", "styletx", "memory", "all"}))
        ->capture_default_str();
    cmd_verify->add_option("--seed", v.seed, "Instance seed")->capture_default_str();
    cmd_verify->add_flag("--inject-fault", v.inject_fault, "Add a property with a deliberately wrong gradient");

    ReportArgs r;
    auto* cmd_report = app.add_subcommand("report", "Aggregate traces into plot-ready CSV");
    cmd_report->add_option("--runs", r.runs, "Directory with trace files")->required();
    cmd_report->add_option("--out", r.out, "Series CSV path (histogram table is written alongside)")->required();

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::CallForAllHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return kConfigError;
    }

    try {
        if (*cmd_gen)
            return gen_data(g);
        if (*cmd_pre)
            return pretrain(p);
        if (*cmd_adapt)
            return adapt(ad);
        if (*cmd_verify)
            return verify(v);
        if (*cmd_report)
            return report(r);
    } catch (const dpl::io::IoError& e) {
        std::fprintf(stderr, "I/O error: %s\n", e.what());
        return kIoError;
    } catch (const std::filesystem::filesystem_error& e) {
        std::fprintf(stderr, "I/O error: %s\n", e.what());
        return kIoError;
    } catch (const dpl::ConfigError& e) {
        std::fprintf(stderr, "%s\n", e.what());
        return kConfigError;
    } catch (const dpl::ContractError& e) {
        std::fprintf(stderr, "invalid argument: %s\n", e.what());
        return kConfigError;
    }
    return kConfigError;
}
