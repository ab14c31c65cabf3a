#include <doctest.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <sstream>

#include "cli.hpp"
#include "seqcl/config.hpp"
#include "seqcl/errors.hpp"
#include "seqcl/parallel.hpp"

using namespace seqcl;
namespace fs = std::filesystem;

namespace {

struct Outcome {
    int code;
    std::string out, err;
};

Outcome call(const std::vector<std::string>& args) {
    std::ostringstream out, err;
    const int code = cli::run(args, out, err);
    return {code, out.str(), err.str()};
}

std::string slurp(const fs::path& p) {
    std::ifstream f(p, std::ios::binary);
    return {std::istreambuf_iterator<char>(f), std::istreambuf_iterator<char>()};
}

fs::path scratch(const std::string& name) {
    const fs::path dir = fs::temp_directory_path() / ("seqcl_cli_" + name);
    fs::remove_all(dir);
    fs::create_directories(dir);
    return dir;
}

fs::path write_config(const fs::path& dir, const std::string& text) {
    const fs::path p = dir / "config.in.json";
    std::ofstream(p) << text;
    return p;
}

const char* kToyConfig = R"({
  "benchmark": {"family": "prototypes", "universe": 40, "prototype_dim": 6},
  "episode": {"tasks": 3, "shots_train": 2, "shots_test": 2},
  "model": {"n_layers": 1, "d_model": 16, "n_heads": 2, "d_head": 8, "d_mlp": 16, "dropout": 0.0, "max_len": 64},
  "train": {"steps": 3, "batch_episodes": 2, "eval_every": 2, "eval_episodes": 2},
  "eval": {"episodes": 3, "offline": {"max_epochs": 2, "repeats": 2}}
})";

}  // namespace

TEST_CASE("config round trip materializes every default") {
    RunConfig c = run_config_from_json(nlohmann::json::parse(kToyConfig));
    CHECK(c.benchmark.family == "prototypes");
    CHECK(c.train.attn_horizon == 0.2);
    const nlohmann::json j = to_json(c);
    CHECK(j["train"]["placement"] == "after_stream");
    CHECK(j["model"]["encoder"]["kind"] == "auto");
    CHECK(j["model"]["encoder"]["normalize"] == "auto");
    const RunConfig back = run_config_from_json(j);
    CHECK(to_json(back) == j);

    nlohmann::json bad = j;
    bad["train"]["stpes"] = 4;
    CHECK_THROWS_AS(run_config_from_json(bad), ConfigError);
    bad = j;
    bad["model"]["backend"] = "cosine";
    CHECK_THROWS_AS(run_config_from_json(bad), ConfigError);
    bad = j;
    bad["train"]["attn_horizon"] = -0.1;
    CHECK_THROWS_AS(run_config_from_json(bad), ConfigError);
    bad = j;
    bad["model"]["encoder"]["normalize"] = "sometimes";
    CHECK_THROWS_AS(run_config_from_json(bad), ConfigError);
    bad = j;
    bad["episode"]["tasks"] = "five";
    CHECK_THROWS_AS(run_config_from_json(bad), ConfigError);

    nlohmann::json preset = nlohmann::json::parse(R"({"model": {"preset": "small", "backend": "linear"}})");
    const RunConfig p = run_config_from_json(preset);
    CHECK(p.transformer.n_heads * p.transformer.d_head == p.transformer.d_model);
    CHECK(p.transformer.backend == Backend::linear);
}

TEST_CASE("setup picks encoder and heads from the benchmark") {
    RunConfig c;
    c.benchmark.family = "glyph";
    c.benchmark.universe = 50;
    c.episode.tasks = 5;
    c.transformer = TransformerConfig::preset("small");
    RunSetup s = make_setup(c);
    CHECK(s.model.encoder.kind == EncoderKind::cnn);
    CHECK(s.model.encoder.normalize);
    CHECK(s.model.vocab == 5);
    CHECK(s.model.y_dim == 0);
    for (Index t : s.split.test) CHECK(std::find(s.split.train.begin(), s.split.train.end(), t) == s.split.train.end());

    c.benchmark.family = "sine";
    RunSetup r = make_setup(c);
    CHECK(r.model.encoder.kind == EncoderKind::mlp);
    CHECK_FALSE(r.model.encoder.normalize);
    c.encoder_norm = "on";
    CHECK(make_setup(c).model.encoder.normalize);
    CHECK(r.model.vocab == 0);
    CHECK(r.model.y_dim == 50);
}

TEST_CASE("thread count: flag, then environment, then hardware") {
    CHECK(resolve_threads(3) == 3);
    ::setenv("SEQCL_THREADS", "2", 1);
    CHECK(resolve_threads(0) == 2);
    ::unsetenv("SEQCL_THREADS");
    CHECK(resolve_threads(0) >= 1);
}

TEST_CASE("meta-train, meta-test, forgetting through the command line") {
    const fs::path dir = scratch("run");
    const fs::path cfg = write_config(dir, kToyConfig);
    const std::string run = (dir / "run").string();

    Outcome t = call({"meta-train", "--config", cfg.string(), "--out", run, "--seed", "4", "--threads", "1"});
    INFO(t.err);
    REQUIRE(t.code == cli::ok);
    for (const char* f : {"config.json", "metrics.csv", "validation.csv", "best.ckpt", "last.ckpt"})
        CHECK(fs::exists(fs::path(run) / f));
    const RunConfig frozen = load_run_config(fs::path(run) / "config.json");
    CHECK(frozen.seed == 4);
    CHECK(frozen.out == run);
    std::ifstream metrics(fs::path(run) / "metrics.csv");
    std::string header;
    std::getline(metrics, header);
    CHECK(header == "step,total_loss,meta_loss,attn_loss,episodes_per_sec");

    const std::string ckpt = (fs::path(run) / "best.ckpt").string();
    Outcome m = call({"meta-test", "--checkpoint", ckpt, "--episodes", "2", "--threads", "1"});
    INFO(m.err);
    CHECK(m.code == cli::ok);
    CHECK(fs::exists(fs::path(run) / "meta_test" / "summary.csv"));
    const std::string first = slurp(fs::path(run) / "meta_test" / "episodes.csv");
    CHECK(call({"meta-test", "--checkpoint", ckpt, "--episodes", "2", "--threads", "2"}).code == cli::ok);
    CHECK(slurp(fs::path(run) / "meta_test" / "episodes.csv") == first);

    Outcome o = call({"meta-test", "--method", "offline", "--checkpoint", ckpt, "--episodes", "2", "--threads", "1",
                      "--out", (dir / "offline").string()});
    CHECK(o.code == cli::ok);
    CHECK(o.out.find("over 2 repeats") != std::string::npos);

    Outcome f = call({"forgetting", "--checkpoint", ckpt, "--episodes", "2", "--threads", "1", "--offline"});
    CHECK(f.code == cli::ok);
    CHECK(f.out.find("warning") != std::string::npos);  // trained after the stream only
    CHECK(fs::exists(fs::path(run) / "forgetting" / "forgetting.csv"));
    CHECK(fs::exists(fs::path(run) / "forgetting" / "forgetting_offline.csv"));

    Outcome pn = call({"meta-train", "--config", cfg.string(), "--out", (dir / "pn").string(), "--method", "pn",
                       "--threads", "1"});
    CHECK(pn.code == cli::ok);
    Outcome pt = call({"meta-test", "--checkpoint", (dir / "pn" / "best.ckpt").string(), "--threads", "1"});
    CHECK(pt.code == cli::ok);
    CHECK(pt.out.find("pn") != std::string::npos);
    fs::remove_all(dir);
}

TEST_CASE("exit codes") {
    const fs::path dir = scratch("codes");
    CHECK(call({}).code == cli::config_error);
    CHECK(call({"meta-train"}).code == cli::config_error);
    CHECK(call({"meta-train", "--config", (dir / "missing.json").string()}).code == cli::config_error);
    CHECK(call({"bench-attention", "--backend", "cosine", "--T", "4"}).code == cli::config_error);
    CHECK(call({"meta-test", "--checkpoint", (dir / "missing.ckpt").string()}).code == cli::runtime_error);
    const fs::path cfg = write_config(dir, R"({"train": {"steps": 1, "bogus": 1}})");
    Outcome r = call({"meta-train", "--config", cfg.string()});
    CHECK(r.code == cli::config_error);
    CHECK(r.err.find("train.bogus") != std::string::npos);
    CHECK(call({"--help"}).code == cli::ok);
    fs::remove_all(dir);
}

TEST_CASE("bench-attention csv") {
    Outcome b = call({"bench-attention", "--T", "4,16", "--d", "8", "--window", "4", "--trials", "5"});
    REQUIRE(b.code == cli::ok);
    std::istringstream lines(b.out);
    std::string line;
    std::getline(lines, line);
    CHECK(line == "backend,T,ns_per_token,state_bytes");
    int rows = 0;
    while (std::getline(lines, line)) ++rows;
    CHECK(rows == 6);
    CHECK(call({"bench-attention", "--trials", "3"}).code == cli::config_error);
}

TEST_CASE("dump-episode archives are byte-identical for the same seed") {
    const fs::path dir = scratch("dump");
    const fs::path cfg = write_config(dir, kToyConfig);
    for (const char* leaf : {"a", "b"})
        REQUIRE(call({"dump-episode", "--config", cfg.string(), "--seed", "9", "--out", (dir / leaf).string()}).code ==
                cli::ok);
    for (const auto& entry : fs::directory_iterator(dir / "a"))
        CHECK(slurp(entry.path()) == slurp(dir / "b" / entry.path().filename()));
    REQUIRE(call({"dump-episode", "--config", cfg.string(), "--seed", "10", "--out", (dir / "c").string()}).code ==
            cli::ok);
    CHECK(slurp(dir / "a" / "test_x.bin") != slurp(dir / "c" / "test_x.bin"));
    fs::remove_all(dir);
}
