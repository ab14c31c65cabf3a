#pragma once

// Run configuration: one JSON tree holding benchmark, episode, model,
// training and evaluation settings. Every default is materialized when the
// config is written back out.

#include <filesystem>
#include <memory>
#include <string>

#include <json.hpp>

#include "seqcl/eval.hpp"

namespace seqcl {

struct BenchmarkConfig {
    std::string family = "sine";
    Index universe = 1000;
    double meta_train_fraction = 0.7;
    std::uint64_t seed = 1;  // family and split seed
    SineConfig sine{};
    Index prototype_dim = 16;
    double prototype_noise = 0.3;
    std::string manifest;  // image-folder family only
};

struct EvalConfig {
    Index episodes = 1024;
    OfflineConfig offline{};
};

struct RunConfig {
    BenchmarkConfig benchmark;
    EpisodeSpec episode;
    TransformerConfig transformer;
    EncoderConfig encoder;
    std::string encoder_kind = "auto";  // auto: cnn for images, mlp for vectors
    std::string encoder_norm = "auto";  // on, off; auto: on for cnn only
    TrainConfig train;
    EvalConfig eval;
    std::string out = "runs/default";
    std::uint64_t seed = 0;
    int threads = 0;

    /// Throws ConfigError.
    void validate() const;
};

std::string to_string(Placement p);
Placement parse_placement(const std::string& name);
std::string to_string(EncoderKind k);
EncoderKind parse_encoder(const std::string& name);

nlohmann::json to_json(const RunConfig& cfg);
/// Missing keys keep their defaults; unknown keys and bad values throw ConfigError.
RunConfig run_config_from_json(const nlohmann::json& j);
RunConfig load_run_config(const std::filesystem::path& path);
void save_run_config(const std::filesystem::path& path, const RunConfig& cfg);

/// The pieces a run is built from.
struct RunSetup {
    std::unique_ptr<TaskFamily> family;
    MetaSplit split;
    ModelConfig model;

    /// Meta-train side (episode seeds are derived by the trainer).
    EpisodeSource train_source(const RunConfig& cfg) const;
    /// Meta-test side, seeded by the run seed.
    EvalSpec test_spec(const RunConfig& cfg) const;
};

RunSetup make_setup(const RunConfig& cfg);

}  // namespace seqcl
