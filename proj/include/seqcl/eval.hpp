#pragma once

// Meta-test evaluation, forgetting analysis and the two in-scope baselines
// (online prototypical network, offline i.i.d. learner).

#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "seqcl/training.hpp"

namespace seqcl {

enum class Metric { error, mse, rotation };

std::string metric_name(Metric m);
/// error for classification, rotation for the rotation family, mse otherwise.
Metric metric_for(const Episode& ep);

/// Per-item score: 1/0 for a wrong/right code, mean squared error over
/// target dimensions, or 1 - cos of the angle between prediction and target.
double score_item(Metric m, std::span<const Index> predicted_code, const Eigen::VectorXd& predicted_y,
                  const Example& truth, const ClassCodebook& codebook);

struct Summary {
    double mean = 0;
    double std = 0;  // sample standard deviation
    double sem = 0;  // standard error of the mean
    Index n = 0;
};

Summary summarize(std::span<const double> values);

struct EpisodeScore {
    Index episode = 0;
    double score = 0;              // error in %, or mean per-item mse / rotation score
    std::vector<double> per_task;  // same metric per episode-local task
    Index items = 0;
};

struct MetricsRecord {
    std::string method;
    std::string benchmark;
    Metric metric = Metric::error;
    std::vector<EpisodeScore> episodes;

    /// Recomputed from the per-episode records.
    Summary aggregate() const;
};

/// Mean and spread of the run-level means of several runs.
Summary across_runs(std::span<const MetricsRecord> runs);

/// Long format: method,benchmark,metric,episode,task,score (task "all" for the episode score).
void write_episode_csv(const std::filesystem::path& path, std::span<const MetricsRecord> runs);
/// method,benchmark,metric,runs,mean,std,sem; one row per (method, benchmark).
void write_summary_csv(const std::filesystem::path& path, std::span<const MetricsRecord> runs);

/// Which episodes an evaluation sees: episode i uses seed derive_seed(seed, i).
struct EvalSpec {
    EpisodeSource source;
    Index episodes = 1024;
    std::uint64_t seed = 0;
    int threads = 0;

    Episode episode(Index i) const;
};

/// Recurrent meta-test: each episode's stream goes through learn_example one
/// example at a time, then every test item is predicted from the final state.
/// Throws ContractError if the parameter checksum changes.
template <class S>
MetricsRecord meta_test(const Model<S>& model, const EvalSpec& spec, const std::string& method = "transformer");

// ---------------------------------------------------------------- forgetting

struct ForgettingMatrix {
    Metric metric = Metric::error;
    Mat<double> score;  // K×K; (k, k') for k' >= k, NaN below the diagonal
    Index episodes = 0;
    std::vector<std::string> warnings;

    Index tasks() const { return score.rows(); }
    /// score(k, k') - score(k, k); exactly 0 on the diagonal.
    double forgetting(Index k, Index k_after) const;
    /// Mean forgetting over all k' > k for each task k (NaN for the last task).
    std::vector<double> per_task() const;
    /// Mean forgetting over all pairs k' > k.
    double average() const;
};

/// Scores task k after learning tasks 0..k' for every k' >= k, from the
/// recurrent state at each task boundary. `trained_mid_stream` false adds a warning.
template <class S>
ForgettingMatrix forgetting_analysis(const Model<S>& model, const EvalSpec& spec, bool trained_mid_stream);

/// k,k_prime,score,forgetting rows followed by per-task and overall averages.
void write_forgetting_csv(const std::filesystem::path& path, const ForgettingMatrix& m);

// ---------------------------------------------------------------- prototypes

/// Running per-class means of embeddings, updated one example at a time.
class OnlinePrototypes {
public:
    explicit OnlinePrototypes(Index classes, Index dim);
    void observe(const Eigen::RowVectorXd& embedding, Index cls);
    /// Nearest prototype by squared distance among observed classes.
    /// Throws ContractError before any observation.
    Index predict(const Eigen::RowVectorXd& embedding) const;
    const Mat<double>& means() const { return means_; }
    const std::vector<Index>& counts() const { return counts_; }

private:
    Mat<double> means_;
    std::vector<Index> counts_;
};

/// Episodic prototypical loss (classification only): class means of the
/// encoded training examples, logits = -squared distance of each encoded test
/// example, cross-entropy summed over test items.
template <class S>
EpisodeLoss<S> prototypical_objective(const Model<S>& model, Tape<S>& tape, const Episode& ep);

/// Meta-trains only the encoder of `model` with the prototypical loss.
template <class S>
TrainResult pn_meta_train(Model<S>& model, const EpisodeSource& source, const TrainConfig& cfg,
                          const TrainOutput& out = {});

/// Online prototypes over the encoder's embeddings, stream order.
template <class S>
MetricsRecord pn_meta_test(const Model<S>& model, const EvalSpec& spec);

// ---------------------------------------------------------------- offline

struct OfflineConfig {
    long max_epochs = 200;
    Index batch = 5;
    double lr = 1e-3;
    Index repeats = 10;
    std::uint64_t seed = 0;
};

struct OfflineRun {
    std::vector<double> best_curve;  // best-so-far score after 0..epochs epochs
    double best = 0;
    std::vector<double> per_task;    // per-task scores at the best epoch
};

/// Network for the offline learner: the encoder of `base` plus a fresh head
/// over the episode's classes (or targets).
ModelConfig offline_model_config(const ModelConfig& base, const Episode& ep);

/// Trains a fresh model on the episode's training examples of tasks
/// [0, upto) (all tasks when upto <= 0), i.i.d. shuffled minibatches with
/// Adam, scoring the test items of those tasks after every epoch.
OfflineRun offline_episode(const ModelConfig& base, const Episode& ep, const OfflineConfig& cfg,
                           std::uint64_t seed, Index upto = 0);

/// One repeat of the offline baseline over the evaluation episodes.
MetricsRecord offline_baseline(const ModelConfig& base, const EvalSpec& spec, const OfflineConfig& cfg,
                               Index repeat);

/// Offline counterpart of forgetting_analysis: a fresh learner per prefix of tasks.
ForgettingMatrix offline_forgetting(const ModelConfig& base, const EvalSpec& spec, const OfflineConfig& cfg);

}  // namespace seqcl
