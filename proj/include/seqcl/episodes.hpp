#pragma once

// Meta-continual-learning datasets: task families, disjoint meta-splits,
// K-task episodes, per-episode class codes and token-sequence assembly.

#include <Eigen/Dense>

#include <cstdint>
#include <filesystem>
#include <memory>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "seqcl/glyph.hpp"
#include "seqcl/tensor.hpp"

namespace seqcl {

/// splitmix64-based combination; used for every derived seed.
std::uint64_t derive_seed(std::uint64_t a, std::uint64_t b);

enum class InputKind { vector, image };

struct InputSchema {
    InputKind kind = InputKind::vector;
    Index dim = 0;  // flattened length
    Index height = 0;
    Index width = 0;

    static InputSchema vector_of(Index d) { return {InputKind::vector, d, 0, 0}; }
    static InputSchema image_of(Index h, Index w) { return {InputKind::image, h * w, h, w}; }
};

struct Example {
    Eigen::VectorXd x;
    Eigen::VectorXd y;  // regression target; empty for classification
    Index task = 0;     // task identifier from the family's universe
    Index label = -1;   // episode-local class (position of the task in the episode)
};

/// Per-episode randomness shared by all tasks of one episode.
struct EpisodeContext {
    double angle_shift = 0;  // rotation family
};

class TaskFamily {
public:
    virtual ~TaskFamily() = default;
    virtual std::string name() const = 0;
    virtual bool classification() const = 0;
    virtual InputSchema input() const = 0;
    /// Regression output width; 0 for classification.
    virtual Index y_dim() const = 0;
    virtual Index universe_size() const = 0;
    virtual EpisodeContext sample_context(std::mt19937_64&) const { return {}; }
    virtual std::vector<Example> sample(Index task, Index n, const EpisodeContext& ctx,
                                        std::mt19937_64& rng) const = 0;
};

// ---------------------------------------------------------------- sine

struct SineConfig {
    Index grid_points = 50;
    double freq_min = 0.5, freq_max = 5.0;  // cycles over the unit grid
    double amp_min = 0.5, amp_max = 2.0;
    double noise = 0.05;
};

struct SineTaskParams {
    double frequency = 1;
    double phase = 0;
    double phase_shift = 0;  // corruption applied to x
    double noise = 0.05;
    Index grid_points = 50;
};

/// y = A sin(2π ν τ + ψ) on τ_i = i / grid; x = A sin(2π ν τ + ψ + shift) + N(0, noise²).
/// Amplitude A is drawn per example from [amp_min, amp_max].
std::vector<Example> sine_generate(const SineTaskParams& task, Index n, double amp_min, double amp_max,
                                   std::mt19937_64& rng);

class SineFamily final : public TaskFamily {
public:
    SineFamily(SineConfig cfg, Index universe, std::uint64_t seed);
    std::string name() const override { return "sine"; }
    bool classification() const override { return false; }
    InputSchema input() const override { return InputSchema::vector_of(cfg_.grid_points); }
    Index y_dim() const override { return cfg_.grid_points; }
    Index universe_size() const override { return universe_; }
    std::vector<Example> sample(Index task, Index n, const EpisodeContext& ctx, std::mt19937_64& rng) const override;
    SineTaskParams task_params(Index task) const;
    const SineConfig& config() const { return cfg_; }

private:
    SineConfig cfg_;
    Index universe_;
    std::uint64_t seed_;
};

// ---------------------------------------------------------------- glyph families

/// Classification over procedural glyph classes.
class GlyphFamily final : public TaskFamily {
public:
    GlyphFamily(Index universe, std::uint64_t seed) : universe_(universe), seed_(seed) {}
    std::string name() const override { return "glyph"; }
    bool classification() const override { return true; }
    InputSchema input() const override { return InputSchema::image_of(kGlyphSize, kGlyphSize); }
    Index y_dim() const override { return 0; }
    Index universe_size() const override { return universe_; }
    std::vector<Example> sample(Index task, Index n, const EpisodeContext& ctx, std::mt19937_64& rng) const override;
    std::uint64_t class_seed(Index task) const { return derive_seed(seed_, static_cast<std::uint64_t>(task)); }

private:
    Index universe_;
    std::uint64_t seed_;
};

/// Angle regression: target (cos ψ, sin ψ) with ψ shifted by a per-episode offset.
class RotationFamily final : public TaskFamily {
public:
    RotationFamily(Index universe, std::uint64_t seed) : glyphs_(universe, seed) {}
    std::string name() const override { return "rotation"; }
    bool classification() const override { return false; }
    InputSchema input() const override { return InputSchema::image_of(kGlyphSize, kGlyphSize); }
    Index y_dim() const override { return 2; }
    Index universe_size() const override { return glyphs_.universe_size(); }
    EpisodeContext sample_context(std::mt19937_64& rng) const override;
    std::vector<Example> sample(Index task, Index n, const EpisodeContext& ctx, std::mt19937_64& rng) const override;

private:
    GlyphFamily glyphs_;
};

/// Image completion: x is the top half, y the flattened bottom half.
class CompletionFamily final : public TaskFamily {
public:
    CompletionFamily(Index universe, std::uint64_t seed) : glyphs_(universe, seed) {}
    std::string name() const override { return "completion"; }
    bool classification() const override { return false; }
    InputSchema input() const override { return InputSchema::image_of(kGlyphSize / 2, kGlyphSize); }
    Index y_dim() const override { return kGlyphSize / 2 * kGlyphSize; }
    Index universe_size() const override { return glyphs_.universe_size(); }
    std::vector<Example> sample(Index task, Index n, const EpisodeContext& ctx, std::mt19937_64& rng) const override;

private:
    GlyphFamily glyphs_;
};

/// Toy classification: each class is a Gaussian prototype vector, examples
/// add isotropic noise.
class PrototypeFamily final : public TaskFamily {
public:
    PrototypeFamily(Index dim, double noise, Index universe, std::uint64_t seed)
        : dim_(dim), noise_(noise), universe_(universe), seed_(seed) {}
    std::string name() const override { return "prototypes"; }
    bool classification() const override { return true; }
    InputSchema input() const override { return InputSchema::vector_of(dim_); }
    Index y_dim() const override { return 0; }
    Index universe_size() const override { return universe_; }
    std::vector<Example> sample(Index task, Index n, const EpisodeContext& ctx, std::mt19937_64& rng) const override;

private:
    Index dim_;
    double noise_;
    Index universe_;
    std::uint64_t seed_;
};

/// Classification over ingested images: a class manifest pointing at one
/// record container per class (uint8 or float32, height×width elements).
class ImageFolderFamily final : public TaskFamily {
public:
    ImageFolderFamily(const std::filesystem::path& manifest, Index height = kGlyphSize, Index width = kGlyphSize);
    std::string name() const override { return "image_folder"; }
    bool classification() const override { return true; }
    InputSchema input() const override { return InputSchema::image_of(height_, width_); }
    Index y_dim() const override { return 0; }
    Index universe_size() const override { return static_cast<Index>(classes_.size()); }
    std::vector<Example> sample(Index task, Index n, const EpisodeContext& ctx, std::mt19937_64& rng) const override;
    const std::string& class_name(Index task) const { return names_.at(static_cast<std::size_t>(task)); }

private:
    Index height_, width_;
    std::vector<std::string> names_;
    std::vector<std::vector<Eigen::VectorXd>> classes_;
};

// ---------------------------------------------------------------- splits, codes, episodes

struct MetaSplit {
    std::vector<Index> train;
    std::vector<Index> test;
};

/// Deterministic disjoint partition of [0, universe). Throws ConfigError when
/// the universe has fewer than 2K tasks or either side ends up with fewer than K.
MetaSplit build_meta_split(Index universe, double train_fraction, std::uint64_t seed, Index tasks_per_episode);

struct ClassCodebook {
    Index vocab = 0;
    Index code_length = 1;
    std::vector<std::vector<Index>> codes;  // per episode-local class

    /// vocab^code_length, saturating at INT64_MAX.
    Index available() const;
    /// Episode-local class owning `code`, if any.
    std::optional<Index> decode(std::span<const Index> code) const;

    /// Uniform sample of `classes` distinct codes. Throws ConfigError when
    /// classes > vocab^code_length.
    static ClassCodebook sample(Index classes, Index vocab, Index code_length, std::mt19937_64& rng);
};

struct EpisodeSpec {
    Index tasks = 20;  // K
    Index shots_train = 5;
    Index shots_test = 5;
    std::uint64_t seed = 0;
    Index vocab = 0;  // 0: equal to `tasks`
    Index code_length = 1;

    Index vocab_size() const { return vocab > 0 ? vocab : tasks; }
};

struct Episode {
    std::string family;
    bool classification = true;
    InputSchema input;
    Index y_dim = 0;
    std::vector<Index> tasks;  // sampled task order; label k <-> tasks[k]
    std::vector<Example> train;  // K contiguous segments of shots_train
    std::vector<Example> test;   // shuffled
    ClassCodebook codebook;
    EpisodeContext context;
    Index shots_train = 0;
};

/// Throws ConfigError if the pool has fewer than K tasks.
Episode sample_episode(const EpisodeSpec& spec, const TaskFamily& family, std::span<const Index> pool);

// ---------------------------------------------------------------- tokens

enum class TokenKind : std::uint8_t { input, label, target };

enum class Placement {
    after_stream,  // every test query follows the whole stream
    mid_stream,    // each query sees the stream up to a random moment in [k, K]
    all_moments,   // each query is repeated once per moment in [k, K]
};

struct AssemblyOptions {
    Placement placement = Placement::after_stream;
    std::uint64_t seed = 0;  // for mid_stream moments
};

/// One test example evaluated at one moment.
struct TestQuery {
    Index item = 0;    // index into Episode::test
    Index task = 0;    // episode-local task slot k (0-based)
    Index moment = 0;  // number of tasks learned when evaluated (k+1 .. K)
    Index context_end = 0;  // stream tokens visible to this query
    std::vector<Index> positions;  // sequence indices of the query's tokens
};

struct LossTarget {
    Index position = 0;  // sequence index whose output predicts the target
    Index token = -1;    // classification target token
    Index y_row = -1;    // regression target row in y_targets
    Index query = 0;
};

struct TokenSequence {
    std::vector<TokenKind> kinds;
    std::vector<Index> refs;       // x row / vocabulary token / y row
    std::vector<Index> positions;  // positional-embedding index
    Mask mask;                     // allowed attention (query row, key column)
    Mat<double> x_rows;
    Mat<double> y_rows;
    Mat<double> y_targets;
    Index stream_length = 0;
    Index code_length = 1;
    std::vector<std::pair<Index, Index>> task_spans;  // [begin, end) stream tokens of task k
    std::vector<TestQuery> queries;
    std::vector<LossTarget> targets;

    Index length() const { return static_cast<Index>(kinds.size()); }
    Index max_position() const;
};

/// Interleaves x tokens with their C label tokens (or one target token) and
/// appends the test queries under a block mask. Throws ConfigError if the
/// codebook cannot name every class.
TokenSequence assemble_tokens(const Episode& episode, const AssemblyOptions& options = {});

/// Deterministic archive: four record containers plus a text manifest.
void dump_episode(const Episode& episode, const std::filesystem::path& dir);

std::unique_ptr<TaskFamily> make_family(const std::string& name, std::uint64_t seed, Index universe,
                                        const SineConfig& sine = {}, Index prototype_dim = 16,
                                        double prototype_noise = 0.3,
                                        const std::filesystem::path& manifest = {});

}  // namespace seqcl
