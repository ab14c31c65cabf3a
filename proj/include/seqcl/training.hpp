#pragma once

// Outer loop: meta-batches of episodes through the parallel forward pass,
// next-token meta-loss plus the early attention loss, Adam on the
// meta-parameters.

#include <filesystem>
#include <functional>
#include <string>
#include <vector>

#include "seqcl/episodes.hpp"
#include "seqcl/model.hpp"

namespace seqcl {

struct TrainConfig {
    long steps = 50000;
    Index batch_episodes = 16;
    double attn_horizon = 0.2;        // fraction of steps with the attention loss on
    double attn_head_fraction = 0.5;  // heads per layer that receive it
    double attn_weight = 1.0;
    AdamConfig adam{};
    double clip_norm = 1.0;
    long eval_every = 500;
    Index eval_episodes = 64;
    long checkpoint_every = 0;  // 0: only best/last
    long log_every = 1;
    Placement placement = Placement::after_stream;
    std::uint64_t seed = 0;
    int threads = 0;

    /// Throws ConfigError.
    void validate() const;
    long attn_horizon_steps() const;
};

/// Where training draws its episodes from.
struct EpisodeSource {
    const TaskFamily* family = nullptr;
    std::vector<Index> pool;  // task ids (meta-train side of the split)
    EpisodeSpec spec;         // seed field ignored; per-episode seeds are derived

    Episode sample(std::uint64_t seed) const;
};

/// Meta-loss summed over all test targets: token cross-entropy per code
/// token, or per-target mean squared error for regression. `logits_or_out`
/// holds one row per entry of seq.targets. Throws ContractError when empty.
template <class S>
Var<S> meta_loss(const Var<S>& logits_or_out, const TokenSequence& seq, bool classification);

/// -log of the attention mass each query's x token puts on its own task's
/// training span, averaged over queries and the given (layer, head) pairs.
template <class S>
Var<S> attention_loss(const std::vector<std::vector<Var<S>>>& weights, const TokenSequence& seq,
                      const std::vector<std::pair<Index, Index>>& heads);

/// Mean attention mass on the own-task span over all queries and the given heads.
double span_attention_mass(const std::vector<std::vector<Mat<double>>>& weights, const TokenSequence& seq,
                           const std::vector<std::pair<Index, Index>>& heads);

/// Deterministic head subset: round(fraction * n_heads) heads in every layer.
std::vector<std::pair<Index, Index>> select_attention_heads(Index n_layers, Index n_heads, double fraction,
                                                            std::uint64_t seed);

template <class S>
struct EpisodeLoss {
    Var<S> total;
    Var<S> meta;    // summed over targets
    Var<S> attn;    // invalid when inactive
    Index targets = 0;
};

/// Builds the full training objective of one episode on `tape`. The
/// optimized quantity is meta / targets + attn_weight * attn.
template <class S>
EpisodeLoss<S> episode_objective(const Model<S>& model, Tape<S>& tape, const TokenSequence& seq,
                                 const ForwardOptions& opt, const std::vector<std::pair<Index, Index>>* attn_heads,
                                 double attn_weight);

struct StepMetrics {
    long step = 0;
    double total_loss = 0;
    double meta_loss = 0;  // per target
    double attn_loss = 0;
    double episodes_per_sec = 0;
};

struct ValidationPoint {
    long step = 0;
    double loss = 0;  // mean per-target meta-loss
};

struct TrainResult {
    std::vector<StepMetrics> history;
    std::vector<ValidationPoint> validation;
    long best_step = -1;
    double best_loss = 0;
};

struct TrainOutput {
    std::filesystem::path dir;  // empty: nothing written
    std::string metadata;       // stored inside checkpoints
    std::function<void(const StepMetrics&)> on_step;
};

/// Mean per-target meta-loss on fixed validation episodes (no dropout).
template <class S>
double validation_loss(const Model<S>& model, const std::vector<TokenSequence>& episodes, int threads);

/// What a generic episodic objective sees for one episode.
struct ObjectiveContext {
    const Episode& episode;
    std::uint64_t seed;  // per-episode; placement and dropout streams derive from it
    bool train;
    bool attn_on;
};

template <class S>
using EpisodeObjective = std::function<EpisodeLoss<S>(const Model<S>&, Tape<S>&, const ObjectiveContext&)>;

/// Outer loop shared by the sequence model and the prototype baseline:
/// meta-batches, ordered gradient reduction, clipping, Adam, validation on
/// fixed episodes (meta / targets with train = false), logs and checkpoints.
template <class S>
TrainResult train_episodic(Model<S>& model, const EpisodeSource& source, const TrainConfig& cfg,
                           const TrainOutput& out, const EpisodeObjective<S>& objective);

/// Runs the outer loop in place. When validation is enabled the model ends
/// with the parameters of the best validation point. Throws NumericalError
/// on a non-finite loss; checkpoints already written are kept.
template <class S>
TrainResult meta_train(Model<S>& model, const EpisodeSource& source, const TrainConfig& cfg,
                       const TrainOutput& out = {});

}  // namespace seqcl
