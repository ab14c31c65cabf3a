#include "cli.hpp"

#include <CLI11.hpp>

#include <fstream>
#include <iomanip>
#include <iostream>
#include <optional>
#include <sstream>

#include "seqcl/bench.hpp"
#include "seqcl/checkpoint.hpp"
#include "seqcl/config.hpp"
#include "seqcl/errors.hpp"

namespace seqcl::cli {

namespace fs = std::filesystem;
using nlohmann::json;
using Real = float;

namespace {

struct Common {
    std::string config;
    std::optional<std::uint64_t> seed;
    std::optional<int> threads;
    std::string out;
    std::string checkpoint;
    std::string backend;
    std::optional<Index> episodes;
};

void apply_overrides(RunConfig& cfg, const Common& c) {
    if (c.seed) cfg.seed = *c.seed;
    if (c.threads) cfg.threads = *c.threads;
    if (!c.out.empty()) cfg.out = c.out;
    if (!c.backend.empty()) cfg.transformer.backend = parse_backend(c.backend);
    if (c.episodes) cfg.eval.episodes = *c.episodes;
    cfg.train.seed = cfg.seed;
    cfg.train.threads = cfg.threads;
    cfg.validate();
}

std::string checkpoint_metadata(const RunConfig& cfg, const std::string& method) {
    return json{{"method", method}, {"config", to_json(cfg)}}.dump();
}

struct Loaded {
    RunConfig cfg;
    std::string method;
    RunSetup setup;
    Model<Real> model;
};

// Rebuilds the run from the config frozen inside a checkpoint, then applies overrides.
Loaded load_run(const Common& c) {
    if (c.checkpoint.empty()) throw ConfigError("--checkpoint is required");
    const CheckpointInfo info = read_checkpoint_info(c.checkpoint);
    json meta;
    try {
        meta = json::parse(info.metadata);
    } catch (const json::exception&) {
        throw FormatError("checkpoint " + c.checkpoint + " carries no run config");
    }
    RunConfig cfg = c.config.empty() ? run_config_from_json(meta.at("config")) : load_run_config(c.config);
    const std::string method = meta.value("method", "transformer");
    Common frozen = c;
    frozen.backend.clear();  // the architecture is fixed by the checkpoint
    apply_overrides(cfg, frozen);
    RunSetup setup = make_setup(cfg);
    Model<Real> model(setup.model, cfg.seed);
    load_checkpoint(c.checkpoint, model.params());
    return {cfg, method, std::move(setup), std::move(model)};
}

fs::path output_dir(const Common& c, const std::string& fallback_leaf) {
    if (!c.out.empty()) return c.out;
    return fs::path(c.checkpoint).parent_path() / fallback_leaf;
}

void print_summary(std::ostream& out, const std::vector<MetricsRecord>& runs) {
    out << std::left << std::setw(14) << "method" << std::setw(14) << "benchmark" << std::setw(16) << "metric"
        << "mean +- std\n";
    for (const auto& r : runs) {
        const Summary s = r.aggregate();
        out << std::setw(14) << r.method << std::setw(14) << r.benchmark << std::setw(16) << metric_name(r.metric)
            << std::setprecision(6) << s.mean << " +- " << s.std << '\n';
    }
}

int cmd_meta_train(const Common& c, const std::string& method, std::ostream& out) {
    if (c.config.empty()) throw ConfigError("--config is required");
    RunConfig cfg = load_run_config(c.config);
    apply_overrides(cfg, c);
    if (method != "transformer" && method != "pn") throw ConfigError("--method must be transformer or pn");
    RunSetup setup = make_setup(cfg);
    if (method == "pn" && !setup.family->classification())
        throw ConfigError("the prototype baseline needs a classification benchmark");
    const fs::path dir = cfg.out;
    fs::create_directories(dir);
    save_run_config(dir / "config.json", cfg);

    Model<Real> model(setup.model, cfg.seed);
    TrainOutput to;
    to.dir = dir;
    to.metadata = checkpoint_metadata(cfg, method);
    const long every = std::max<long>(1, cfg.train.steps / 20);
    to.on_step = [&](const StepMetrics& m) {
        if (m.step % every == 0 || m.step + 1 == cfg.train.steps)
            out << "step " << m.step << " loss " << m.total_loss << " meta " << m.meta_loss << " attn " << m.attn_loss
                << " eps/s " << m.episodes_per_sec << '\n';
    };
    const EpisodeSource source = setup.train_source(cfg);
    const TrainResult res =
        method == "pn" ? pn_meta_train(model, source, cfg.train, to) : meta_train(model, source, cfg.train, to);
    if (res.best_step >= 0) out << "best validation loss " << res.best_loss << " at step " << res.best_step << '\n';
    out << "run directory " << dir.string() << '\n';
    return ok;
}

int cmd_meta_test(const Common& c, const std::string& method, Index repeats, std::ostream& out) {
    std::vector<MetricsRecord> runs;
    fs::path dir;
    if (method == "offline") {
        RunConfig cfg;
        if (!c.config.empty())
            cfg = load_run_config(c.config);
        else if (!c.checkpoint.empty())
            cfg = run_config_from_json(json::parse(read_checkpoint_info(c.checkpoint).metadata).at("config"));
        else
            throw ConfigError("offline evaluation needs --config or --checkpoint");
        apply_overrides(cfg, c);
        if (repeats > 0) cfg.eval.offline.repeats = repeats;
        RunSetup setup = make_setup(cfg);
        const EvalSpec spec = setup.test_spec(cfg);
        OfflineConfig oc = cfg.eval.offline;
        oc.seed = cfg.seed;
        for (Index r = 0; r < oc.repeats; ++r) runs.push_back(offline_baseline(setup.model, spec, oc, r));
        dir = c.out.empty() ? fs::path(cfg.out) / "meta_test_offline" : fs::path(c.out);
    } else {
        Loaded run = load_run(c);
        const EvalSpec spec = run.setup.test_spec(run.cfg);
        if (run.method == "pn")
            runs.push_back(pn_meta_test(run.model, spec));
        else
            runs.push_back(meta_test(run.model, spec, run.method));
        dir = output_dir(c, "meta_test");
    }
    fs::create_directories(dir);
    write_episode_csv(dir / "episodes.csv", runs);
    write_summary_csv(dir / "summary.csv", runs);
    if (runs.size() > 1) {
        const Summary s = across_runs(runs);
        out << runs.front().method << " over " << runs.size() << " repeats: " << s.mean << " +- " << s.std
            << " (sem " << s.sem << ")\n";
    } else {
        print_summary(out, runs);
    }
    out << "wrote " << (dir / "summary.csv").string() << '\n';
    return ok;
}

int cmd_forgetting(const Common& c, bool with_offline, std::ostream& out) {
    Loaded run = load_run(c);
    const EvalSpec spec = run.setup.test_spec(run.cfg);
    const ForgettingMatrix fm =
        forgetting_analysis(run.model, spec, run.cfg.train.placement != Placement::after_stream);
    const fs::path dir = output_dir(c, "forgetting");
    fs::create_directories(dir);
    write_forgetting_csv(dir / "forgetting.csv", fm);
    for (const auto& w : fm.warnings) out << "warning: " << w << '\n';
    out << "average forgetting " << fm.average() << '\n';
    if (with_offline) {
        OfflineConfig oc = run.cfg.eval.offline;
        oc.seed = run.cfg.seed;
        const ForgettingMatrix off = offline_forgetting(run.setup.model, spec, oc);
        write_forgetting_csv(dir / "forgetting_offline.csv", off);
        out << "offline average forgetting " << off.average() << '\n';
    }
    out << "wrote " << (dir / "forgetting.csv").string() << '\n';
    return ok;
}

std::vector<std::string> split_list(const std::string& s) {
    std::vector<std::string> out;
    std::stringstream ss(s);
    for (std::string item; std::getline(ss, item, ',');)
        if (!item.empty()) out.push_back(item);
    return out;
}

int cmd_bench(const std::string& backends, const std::vector<Index>& lengths, const BenchOptions& opt,
              const std::string& out_path, std::ostream& out) {
    std::vector<BenchPoint> points;
    for (const auto& name : split_list(backends)) {
        const auto p = bench_attention(parse_backend(name), lengths, opt);
        points.insert(points.end(), p.begin(), p.end());
    }
    if (out_path.empty()) {
        write_bench_csv(out, points);
    } else {
        if (fs::path(out_path).has_parent_path()) fs::create_directories(fs::path(out_path).parent_path());
        std::ofstream f(out_path, std::ios::trunc);
        if (!f) throw IoError("cannot write " + out_path);
        write_bench_csv(f, points);
        out << "wrote " << out_path << '\n';
    }
    return ok;
}

int cmd_dump(const Common& c, const std::string& split, Index index, std::ostream& out) {
    if (c.config.empty()) throw ConfigError("--config is required");
    RunConfig cfg = load_run_config(c.config);
    apply_overrides(cfg, c);
    RunSetup setup = make_setup(cfg);
    Episode ep;
    if (split == "test")
        ep = setup.test_spec(cfg).episode(index);
    else if (split == "train")
        ep = setup.train_source(cfg).sample(derive_seed(cfg.seed, static_cast<std::uint64_t>(index)));
    else
        throw ConfigError("--split must be train or test");
    const fs::path dir = c.out.empty() ? fs::path(cfg.out) / "episode" : fs::path(c.out);
    dump_episode(ep, dir);
    out << "wrote " << dir.string() << '\n';
    return ok;
}

}  // namespace

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
    CLI::App app{"Continual learning as sequence modeling: meta-training, evaluation and benchmarks", "seqcl"};
    app.require_subcommand(1);
    Common c;
    std::string method = "transformer";
    Index repeats = 0;
    bool with_offline = false;

    auto add_common = [&](CLI::App* sub, bool needs_config) {
        auto* opt = sub->add_option("--config", c.config, "run configuration (JSON)");
        if (needs_config) opt->required();
        sub->add_option("--seed", c.seed, "run seed");
        sub->add_option("--threads", c.threads, "worker threads (default: SEQCL_THREADS, then all cores)");
        sub->add_option("--out", c.out, "output directory");
    };

    auto* train = app.add_subcommand("meta-train", "meta-train a model; writes checkpoints and metrics CSVs");
    add_common(train, true);
    train->add_option("--backend", c.backend, "attention backend: softmax, linear or performer");
    train->add_option("--method", method, "transformer or pn (prototype encoder)");

    auto* test = app.add_subcommand("meta-test", "evaluate on meta-test episodes; writes per-episode and summary CSVs");
    add_common(test, false);
    test->add_option("--checkpoint", c.checkpoint, "checkpoint written by meta-train");
    test->add_option("--episodes", c.episodes, "number of meta-test episodes");
    test->add_option("--method", method, "offline to run the offline baseline instead of the checkpoint");
    test->add_option("--repeats", repeats, "offline baseline repeats (default from config)");

    auto* forget = app.add_subcommand("forgetting", "forgetting matrix of a checkpoint; writes forgetting CSV");
    add_common(forget, false);
    forget->add_option("--checkpoint", c.checkpoint, "checkpoint written by meta-train")->required();
    forget->add_option("--episodes", c.episodes, "number of meta-test episodes");
    forget->add_flag("--offline", with_offline, "also compute the offline baseline's matrix");

    std::string backends = "softmax,linear,performer", bench_out;
    std::vector<Index> lengths{64, 128, 256, 512, 1024};
    BenchOptions bopt;
    auto* bench = app.add_subcommand("bench-attention", "per-token recurrent decode cost vs context length (CSV)");
    bench->add_option("--backend", backends, "comma-separated backends");
    bench->add_option("--T", lengths, "context lengths")->delimiter(',');
    bench->add_option("--d", bopt.dim, "per-head width");
    bench->add_option("--heads", bopt.heads, "heads");
    bench->add_option("--features", bopt.feature_dim, "performer features (0: 2d)");
    bench->add_option("--window", bopt.window, "timed tokens per trial");
    bench->add_option("--trials", bopt.trials, "timed trials (median reported)")->check(CLI::Range(5, 1000000));
    bench->add_option("--seed", bopt.seed, "seed for random inputs");
    bench->add_option("--out", bench_out, "CSV path (default: stdout)");

    std::string split = "test";
    Index index = 0;
    auto* dump = app.add_subcommand("dump-episode", "write one episode as an archive for inspection");
    add_common(dump, true);
    dump->add_option("--split", split, "train or test");
    dump->add_option("--index", index, "episode index");

    std::vector<std::string> reversed(args.rbegin(), args.rend());
    try {
        app.parse(reversed);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e, out, err);
        return code == 0 ? ok : config_error;
    }

    try {
        if (*train) return cmd_meta_train(c, method, out);
        if (*test) return cmd_meta_test(c, method, repeats, out);
        if (*forget) return cmd_forgetting(c, with_offline, out);
        if (*bench) return cmd_bench(backends, lengths, bopt, bench_out, out);
        if (*dump) return cmd_dump(c, split, index, out);
    } catch (const ConfigError& e) {
        err << "configuration error: " << e.what() << '\n';
        return config_error;
    } catch (const json::exception& e) {
        err << "configuration error: " << e.what() << '\n';
        return config_error;
    } catch (const std::exception& e) {
        err << "error: " << e.what() << '\n';
        return runtime_error;
    }
    return ok;
}

}  // namespace seqcl::cli
