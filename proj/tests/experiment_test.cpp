#include <dpl/experiment.hpp>

#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>

using namespace dpl;
namespace fs = std::filesystem;

namespace {

struct Workspace {
    fs::path dir;
    fs::path checkpoint;
    fs::path target;
    fs::path source;

    static const Workspace& get()
    {
        static const Workspace w = [] {
            Workspace x;
            x.dir = fs::temp_directory_path() / "dpl_experiment_test";
            fs::remove_all(x.dir);
            fs::create_directories(x.dir);
            const auto domains = benchmark_domains(0.6, 2);
            std::vector<ShapeDataset> parts;
            for (std::size_t d = 0; d < 3; ++d)
                parts.push_back(generate(domains[d], 60, 3, 10));
            x.source = x.dir / "source.dpld";
            save_dataset(merge(std::span<const ShapeDataset>(parts)), x.source);
            x.target = x.dir / "target.dpld";
            save_dataset(generate(domains[3], 48, 3, 10), x.target);
            PretrainConfig cfg;
            cfg.epochs = 3;
            const PretrainResult r = pretrain_source(load_dataset(x.source), cfg);
            x.checkpoint = x.dir / "source.ckpt";
            save_checkpoint(r.best, x.checkpoint);
            return x;
        }();
        return w;
    }
};

nlohmann::json base_json(const std::string& out)
{
    const Workspace& w = Workspace::get();
    return {{"checkpoint", w.checkpoint.string()},
            {"target", {w.target.string()}},
            {"output_dir", (w.dir / out).string()},
            {"methods", {"pl-ce", "dpl-full"}},
            {"seeds", {0, 1, 2}},
            {"adapt", {{"alpha", 0.5}, {"batch_size", 8}, {"optimizer", {{"kind", "adam"}, {"lr", 1e-3}}}}}};
}

std::vector<std::string> config_error_keys(const nlohmann::json& j)
{
    try {
        parse_experiment_config(j);
    } catch (const ConfigError& e) {
        return e.keys();
    }
    return {};
}

std::string slurp(const fs::path& p)
{
    std::ifstream in(p, std::ios::binary);
    std::ostringstream s;
    s << in.rdbuf();
    return s.str();
}

} // namespace

TEST(ExperimentConfig, ParsesMethodsSeedsAndOverrides)
{
    nlohmann::json j = base_json("parse");
    j["methods"] = {"source-frozen", {{"method", "dpl-full"}, {"label", "dpl-style"}, {"style_pairing", "two-pass"}}};
    const ExperimentConfig c = parse_experiment_config(j);
    ASSERT_EQ(c.methods.size(), 2u);
    EXPECT_EQ(c.methods[0].label, "source-frozen");
    EXPECT_EQ(c.methods[0].config.method, Method::source_frozen);
    EXPECT_EQ(c.methods[1].label, "dpl-style");
    EXPECT_EQ(c.methods[1].config.style.mode, PairingMode::two_pass);
    EXPECT_DOUBLE_EQ(c.methods[1].config.alpha, 0.5);
    EXPECT_EQ(c.methods[1].config.batch_size, 8u);
    EXPECT_EQ(c.seeds, (std::vector<std::uint64_t>{0, 1, 2}));
}

TEST(ExperimentConfig, UnknownKeysAreRejected)
{
    nlohmann::json j = base_json("x");
    j["learning_rate"] = 0.1;
    j["adapt"]["optimiser"] = "adam";
    j["adapt"]["optimizer"]["nesterov"] = true;
    const auto keys = config_error_keys(j);
    EXPECT_EQ(std::set<std::string>(keys.begin(), keys.end()),
              (std::set<std::string>{"learning_rate", "adapt.optimiser", "adapt.optimizer.nesterov"}));
}

TEST(ExperimentConfig, RangesAreValidatedWithKeyNames)
{
    nlohmann::json j = base_json("x");
    j["adapt"]["alpha"] = 1.5;
    j["adapt"]["tau"] = 0.0;
    j["adapt"]["eta"] = -0.1;
    j["adapt"]["beta"] = -1.0;
    j["adapt"]["steps_per_batch"] = 3;
    const auto keys = config_error_keys(j);
    EXPECT_EQ(std::set<std::string>(keys.begin(), keys.end()),
              (std::set<std::string>{"adapt.alpha", "adapt.tau", "adapt.eta", "adapt.beta", "adapt.steps_per_batch"}));

    for (double ok_alpha : {0.01, 0.9, 0.99}) {
        nlohmann::json k = base_json("x");
        k["adapt"]["alpha"] = ok_alpha;
        EXPECT_TRUE(config_error_keys(k).empty());
    }
    for (double bad_alpha : {0.0, 1.0}) {
        nlohmann::json k = base_json("x");
        k["methods"] = {{{"method", "pl-ce"}, {"alpha", bad_alpha}}};
        EXPECT_EQ(config_error_keys(k), (std::vector<std::string>{"methods[0].alpha"}));
    }
}

TEST(ExperimentConfig, StructuralErrors)
{
    nlohmann::json j = base_json("x");
    j.erase("checkpoint");
    j["methods"] = {"pl-ce", "pl-ce", "sgd"};
    j["seeds"] = nlohmann::json::array();
    const auto keys = config_error_keys(j);
    const std::set<std::string> got(keys.begin(), keys.end());
    EXPECT_TRUE(got.contains("checkpoint"));
    EXPECT_TRUE(got.contains("methods[2]"));
    EXPECT_TRUE(got.contains("methods"));
    EXPECT_TRUE(got.contains("seeds"));
    EXPECT_EQ(config_error_keys(nlohmann::json::array()), (std::vector<std::string>{"<root>", "checkpoint", "target",
                                                                                       "output_dir", "methods"}));
}

TEST(ExperimentConfig, MissingFileIsIoErrorAndBadJsonIsConfigError)
{
    EXPECT_THROW(load_experiment_config("/nonexistent/dir/cfg.json"), io::IoError);
    const fs::path bad = fs::temp_directory_path() / "dpl_bad_config.json";
    {
        std::ofstream out(bad);
        out << "{ \"checkpoint\": ";
    }
    EXPECT_THROW(load_experiment_config(bad), ConfigError);
    fs::remove(bad);
}

TEST(Experiment, WritesOneTracePerCellAndASummary)
{
    const ExperimentConfig cfg = parse_experiment_config(base_json("cells"));
    fs::remove_all(cfg.output_dir);
    const ExperimentResult r = run_experiment(cfg);
    std::size_t traces = 0, hists = 0, summaries = 0;
    for (const auto& e : fs::directory_iterator(cfg.output_dir)) {
        const std::string n = e.path().filename().string();
        traces += n.rfind("trace_", 0) == 0 ? 1 : 0;
        hists += n.rfind("hist_", 0) == 0 ? 1 : 0;
        summaries += n == "summary.json" ? 1 : 0;
    }
    EXPECT_EQ(traces, 6u);
    EXPECT_EQ(hists, 6u);
    EXPECT_EQ(summaries, 1u);
    EXPECT_EQ(r.summaries.size(), 2u);
    for (const auto& [label, ts] : r.traces)
        EXPECT_EQ(ts.size(), 3u) << label;
}

TEST(Experiment, TraceCsvSchema)
{
    const ExperimentConfig cfg = parse_experiment_config(base_json("schema"));
    run_experiment(cfg);
    std::istringstream in(slurp(cfg.output_dir / trace_file_name("dpl-full", 1)));
    std::string line;
    std::getline(in, line);
    EXPECT_EQ(line, "iter,method,seed,loss,n_confident,cum_acc");
    std::size_t rows = 0;
    while (std::getline(in, line)) {
        std::vector<std::string> cells;
        std::stringstream ls(line);
        std::string c;
        while (std::getline(ls, c, ','))
            cells.push_back(c);
        ASSERT_EQ(cells.size(), 6u) << line;
        EXPECT_EQ(cells[0], std::to_string(rows));
        EXPECT_EQ(cells[1], "dpl-full");
        EXPECT_EQ(cells[2], "1");
        const double acc = std::stod(cells[5]);
        EXPECT_GE(acc, 0.0);
        EXPECT_LE(acc, 1.0);
        ++rows;
    }
    EXPECT_EQ(rows, 6u); // 48 samples in batches of 8
}

TEST(Experiment, RerunIsBitIdentical)
{
    const ExperimentConfig a = parse_experiment_config(base_json("rerun_a"));
    const ExperimentConfig b = parse_experiment_config(base_json("rerun_b"));
    const ExperimentResult ra = run_experiment(a);
    run_experiment(b);
    for (const auto& p : ra.files)
        EXPECT_EQ(slurp(p), slurp(b.output_dir / p.filename())) << p.filename();
}

TEST(Experiment, SummaryMatchesRecomputationFromTraces)
{
    const ExperimentConfig cfg = parse_experiment_config(base_json("recompute"));
    run_experiment(cfg);
    const nlohmann::json summary = nlohmann::json::parse(slurp(cfg.output_dir / "summary.json"));
    for (const auto& m : cfg.methods) {
        std::vector<double> finals;
        for (std::uint64_t seed : cfg.seeds) {
            const auto rows = parse_trace_csv(slurp(cfg.output_dir / trace_file_name(m.label, seed)), "trace");
            finals.push_back(rows.back().cum_acc);
        }
        long double mean = 0, ss = 0;
        for (double v : finals)
            mean += v;
        mean /= finals.size();
        for (double v : finals)
            ss += (v - mean) * (v - mean);
        const double sd = static_cast<double>(std::sqrt(ss / (finals.size() - 1)));
        const auto& s = summary.at("methods").at(m.label);
        EXPECT_NEAR(s.at("accuracy_mean").get<double>(), static_cast<double>(mean), 1e-15);
        EXPECT_NEAR(s.at("accuracy_std").get<double>(), sd, 1e-15);
        EXPECT_NEAR(s.at("error_rate_mean").get<double>(), 1.0 - static_cast<double>(mean), 1e-15);
        EXPECT_EQ(s.at("seeds").get<std::vector<std::uint64_t>>(), cfg.seeds);
    }
}

TEST(Experiment, StopAndResumeReproducesFullRun)
{
    nlohmann::json full = base_json("resume_full");
    full["methods"] = {{{"method", "dpl-full"}, {"style_pairing", "cross-batch"}}};
    run_experiment(parse_experiment_config(full));

    nlohmann::json part = full;
    part["output_dir"] = (Workspace::get().dir / "resume_part").string();
    fs::remove_all(part["output_dir"].get<std::string>());
    part["run_state"] = {{"stop_after", 2}};
    run_experiment(parse_experiment_config(part));
    const fs::path state = fs::path(part["output_dir"].get<std::string>()) / run_state_file_name("dpl-full", 0);
    ASSERT_TRUE(fs::exists(state));
    EXPECT_EQ(load_run_state(state).cursor, 2u);

    part["run_state"] = {{"resume", true}};
    run_experiment(parse_experiment_config(part));
    for (std::uint64_t seed : {0, 1, 2}) {
        const std::string name = trace_file_name("dpl-full", seed);
        EXPECT_EQ(slurp(fs::path(part["output_dir"].get<std::string>()) / name),
                  slurp(fs::path(full["output_dir"].get<std::string>()) / name))
            << name;
    }
}

TEST(Experiment, MissingInputsAreIoErrorsNamingThePath)
{
    nlohmann::json j = base_json("missing");
    j["target"] = {"/nonexistent/target.dpld"};
    try {
        run_experiment(parse_experiment_config(j));
        FAIL() << "expected an I/O error";
    } catch (const io::IoError& e) {
        EXPECT_NE(std::string(e.what()).find("/nonexistent/target.dpld"), std::string::npos);
    }
    j = base_json("missing");
    j["checkpoint"] = "/nonexistent/model.ckpt";
    EXPECT_THROW(run_experiment(parse_experiment_config(j)), io::IoError);
}

TEST(Experiment, GeometryMismatchIsConfigError)
{
    const fs::path other = Workspace::get().dir / "wrong_size.dpld";
    save_dataset(generate(benchmark_domains(0.2, 0)[3], 10, 3, 12), other);
    nlohmann::json j = base_json("geometry");
    j["target"] = {other.string()};
    EXPECT_THROW(run_experiment(parse_experiment_config(j)), ConfigError);
}

TEST(Experiment, PretrainStageWritesTheCheckpoint)
{
    nlohmann::json j = base_json("with_pretrain");
    const fs::path ckpt = Workspace::get().dir / "stage.ckpt";
    j["checkpoint"] = ckpt.string();
    j["pretrain"] = {{"sources", {Workspace::get().source.string()}}, {"epochs", 1}, {"seed", 4}};
    j["methods"] = {"source-frozen"};
    j["seeds"] = {0};
    fs::remove(ckpt);
    run_experiment(parse_experiment_config(j));
    ASSERT_TRUE(fs::exists(ckpt));
    EXPECT_EQ(load_checkpoint(ckpt).config.image_size, 10u);
}

TEST(Report, SeriesHaveEqualLengthAndHistogramsSumToStream)
{
    const ExperimentConfig cfg = parse_experiment_config(base_json("report"));
    run_experiment(cfg);
    const ReportData rep = build_report(cfg.output_dir);
    ASSERT_EQ(rep.series.size(), 2u);
    EXPECT_EQ(rep.series[0].cum_acc.size(), rep.series[1].cum_acc.size());
    EXPECT_EQ(rep.series[0].cum_acc.size(), 6u);
    for (const auto& [method, row] : rep.histogram) {
        double total = 0;
        for (double v : row)
            total += v;
        EXPECT_NEAR(total, 48.0, 1e-12) << method;
    }
    EXPECT_TRUE(rep.histogram.contains("ground-truth"));

    const nlohmann::json summary = nlohmann::json::parse(slurp(cfg.output_dir / "summary.json"));
    for (const auto& s : rep.series) {
        const auto& m = summary.at("methods").at(s.method);
        EXPECT_NEAR(rep.final_accuracy.at(s.method).mean, m.at("accuracy_mean").get<double>(), 1e-15);
        EXPECT_NEAR(rep.final_accuracy.at(s.method).std, m.at("accuracy_std").get<double>(), 1e-15);
        EXPECT_NEAR(s.cum_acc.back().mean, m.at("accuracy_mean").get<double>(), 1e-15);
    }

    const fs::path out = cfg.output_dir / "plots" / "series.csv";
    const fs::path hist = write_report(rep, out);
    EXPECT_EQ(hist.filename(), "series_histogram.csv");
    std::istringstream in(slurp(out));
    std::string header;
    std::getline(in, header);
    EXPECT_EQ(header, "method,iter,cum_acc_mean,cum_acc_std,seeds");
}

TEST(Report, RejectsEmptyOrForeignDirectories)
{
    const fs::path empty = Workspace::get().dir / "empty_runs";
    fs::create_directories(empty);
    EXPECT_THROW(build_report(empty), io::IoError);
    EXPECT_THROW(build_report(Workspace::get().dir / "no_such_dir"), io::IoError);
    {
        std::ofstream out(empty / "trace_fake_seed0.csv");
        out << "a,b,c\n";
    }
    EXPECT_THROW(build_report(empty), io::IoError);
}

TEST(MeanStd, SampleStandardDeviation)
{
    const MeanStd m = mean_std({0.5, 0.7, 0.9});
    EXPECT_DOUBLE_EQ(m.mean, 0.7);
    EXPECT_NEAR(m.std, 0.2, 1e-15);
    EXPECT_EQ(mean_std({0.4}).std, 0.0);
}
