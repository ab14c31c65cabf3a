#pragma once

// Sequence learner: input encoder, token and position embeddings, pre-norm
// decoder blocks over a selectable attention backend, and output heads.
// Two execution forms share one parameter set:
//   forward()     whole token sequence on a Tape (meta-training),
//   step_token()  one token against a LearnerState (continual inference).

#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include "seqcl/attention.hpp"
#include "seqcl/episodes.hpp"
#include "seqcl/tensor.hpp"

namespace seqcl {

struct TransformerConfig {
    Index n_layers = 4;
    Index d_model = 512;
    Index n_heads = 8;
    Index d_head = 64;
    Index d_mlp = 1024;
    Backend backend = Backend::softmax;
    double dropout = 0.1;
    Index max_len = 1024;     // rows of the positional table
    Index feature_dim = 0;    // performer features per head; 0 means 2 * d_head

    /// Throws ConfigError.
    void validate() const;
    Index kernel_features() const { return feature_dim > 0 ? feature_dim : 2 * d_head; }

    /// "transformer" (4/512/8/64/1024), "small" (2/256/4/64/512),
    /// "small_wide" (2/512/8/64/1024), "xl" (4/1024/16/64/2048).
    static TransformerConfig preset(const std::string& name);
};

enum class EncoderKind { mlp, cnn };

struct EncoderConfig {
    EncoderKind kind = EncoderKind::mlp;
    Index hidden = 0;  // MLP width; 0 means d_model
    std::vector<Index> channels{32, 64, 128, 256, 256};
    bool normalize = true;  // per-example norm after every layer
};

struct ModelConfig {
    TransformerConfig transformer;
    EncoderConfig encoder;
    InputSchema input;
    Index vocab = 0;  // label tokens; 0 for pure regression
    Index y_dim = 0;  // regression width; 0 for classification

    bool classification() const { return y_dim == 0; }
    void validate() const;
};

struct ForwardOptions {
    bool train = false;                // enables dropout
    std::mt19937_64* rng = nullptr;    // required when train and dropout > 0
    bool keep_weights = false;         // collect per-layer, per-head attention rows
};

template <class S>
struct ForwardResult {
    Var<S> hidden;                              // T×d_model after the final norm
    std::vector<std::vector<Var<S>>> weights;   // [layer][head] T×T when kept
};

template <class S>
class Model {
public:
    Model(const ModelConfig& config, std::uint64_t seed);
    /// Adopts an existing parameter set (names and shapes are checked).
    static Model from_params(const ModelConfig& config, ParamStore<S> params);
    Model(const Model& other);
    Model& operator=(const Model& other);
    Model(Model&&) noexcept = default;
    Model& operator=(Model&&) noexcept = default;

    const ModelConfig& config() const { return config_; }
    ParamStore<S>& params() { return params_; }
    const ParamStore<S>& params() const { return params_; }

    template <class T>
    Model<T> cast() const {
        return Model<T>::from_params(config_, params_.template cast<T>());
    }

    // ---- tape form
    /// Rows of raw inputs (one example per row) to d_model encodings.
    Var<S> encode(Tape<S>& tape, const Mat<S>& x_rows) const;
    /// Token embeddings plus positional embeddings, T×d_model.
    Var<S> embed(Tape<S>& tape, const TokenSequence& seq) const;
    ForwardResult<S> forward(Tape<S>& tape, const TokenSequence& seq, const ForwardOptions& opt = {}) const;
    Var<S> logits(const Var<S>& hidden_rows) const;
    Var<S> regress(const Var<S>& hidden_rows) const;

    // ---- plain form (no tape kept)
    Mat<S> encode_rows(const Mat<S>& x_rows) const;
    RowVec<S> embed_input(const Eigen::VectorXd& x) const;
    RowVec<S> embed_label(Index token) const;
    RowVec<S> embed_target(const Eigen::VectorXd& y) const;
    RowVec<S> logits(const RowVec<S>& hidden) const;
    RowVec<S> regress(const RowVec<S>& hidden) const;

    KernelFeatureMap<S> feature_map(Index layer) const;
    /// Row of the positional table used for absolute position `pos`. Softmax
    /// models throw CapacityError past max_len; kernel models wrap.
    Index position_row(Index pos) const;

    struct LayerRefs {
        const Parameter<S>*ln1_g, *ln1_b, *wq, *wk, *wv, *wo, *bo, *ln2_g, *ln2_b, *w1, *b1, *w2, *b2, *features;
    };
    const LayerRefs& layer(Index l) const { return layers_[static_cast<std::size_t>(l)]; }
    const Parameter<S>& position_table() const { return *position_table_; }
    const Parameter<S>& final_gain() const { return *final_g_; }
    const Parameter<S>& final_bias() const { return *final_b_; }

private:
    Model(const ModelConfig& config, ParamStore<S> params, bool);
    void build(std::mt19937_64& rng);
    void bind();
    Var<S> linear(Tape<S>& tape, const Var<S>& x, const std::string& prefix) const;

    ModelConfig config_;
    ParamStore<S> params_;
    // cached parameter addresses for the per-token path
    std::vector<LayerRefs> layers_;
    const Parameter<S>* label_table_ = nullptr;
    const Parameter<S>* position_table_ = nullptr;
    const Parameter<S>*final_g_ = nullptr, *final_b_ = nullptr;

    template <class T>
    friend class Model;
};

/// Per-layer, per-head attention memory plus the token counter.
template <class S>
class LearnerState {
public:
    LearnerState() = default;
    explicit LearnerState(const Model<S>& model);

    Index position() const { return position_; }
    Backend backend() const { return backend_; }
    std::size_t bytes() const;
    std::uint64_t checksum() const;

    const SoftmaxAttnState<S>& softmax_head(Index layer, Index head) const;
    const KetAttnState<S>& kernel_head(Index layer, Index head) const;

private:
    Backend backend_ = Backend::softmax;
    Index position_ = 0;
    std::vector<std::vector<SoftmaxAttnState<S>>> softmax_;
    std::vector<std::vector<KetAttnState<S>>> kernel_;

    template <class T>
    friend RowVec<T> step_token(const Model<T>&, LearnerState<T>&, const RowVec<T>&);
};

/// Consumes one token embedding (without position) and returns the final
/// hidden state at that position. Softmax models throw CapacityError once
/// the state holds max_len tokens.
template <class S>
RowVec<S> step_token(const Model<S>& model, LearnerState<S>& state, const RowVec<S>& embedding);

/// Feeds one training example: the x token, then its code tokens or target token.
template <class S>
void learn_example(const Model<S>& model, LearnerState<S>& state, const Example& ex, const ClassCodebook* codebook);

template <class S>
struct Prediction {
    RowVec<S> distribution;   // softmax over the vocabulary for the first code token
    std::vector<Index> code;  // greedy decoding of code_length tokens
    RowVec<S> regression;     // regression output
};

/// Evaluates x against a copy of `state`; the state itself is never touched.
template <class S>
Prediction<S> predict_test(const Model<S>& model, const LearnerState<S>& state, const Eigen::VectorXd& x,
                           Index code_length = 1);

}  // namespace seqcl
