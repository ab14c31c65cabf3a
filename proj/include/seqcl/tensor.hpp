#pragma once

// Reverse-mode automatic differentiation over dense row-major matrices.
//
// Every value on a Tape is a rank-2 matrix; batches of images are stored one
// image per row and reinterpreted by the convolution op. Operations are free
// functions taking Var handles; each records its value and an adjoint closure
// on the tape of its operands. Tape::backward walks the record in reverse
// insertion order, which is a topological order because an op can only refer
// to nodes that already exist.

#include <Eigen/Dense>

#include <array>
#include <cstdint>
#include <functional>
#include <memory>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "seqcl/errors.hpp"

namespace seqcl {

using Index = Eigen::Index;

template <class S>
using Mat = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <class S>
using Vec = Eigen::Matrix<S, Eigen::Dynamic, 1>;
template <class S>
using RowVec = Eigen::Matrix<S, 1, Eigen::Dynamic>;

/// Attention/visibility mask: true marks an allowed entry.
using Mask = Eigen::Array<bool, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

using Shape = std::array<Index, 2>;

std::string shape_str(Shape s);

template <class S>
Shape shape_of(const Mat<S>& m) {
    return {m.rows(), m.cols()};
}

/// Lower-triangular (including diagonal) mask of size n.
Mask causal_mask(Index n);

/// A named trainable (or frozen) array owned by a ParamStore.
template <class S>
struct Parameter {
    std::string name;
    Mat<S> value;
    bool trainable = true;
    std::size_t id = 0;
};

/// Per-parameter gradient accumulators, indexed by Parameter::id.
template <class S>
using GradBuffer = std::vector<Mat<S>>;

/// Owns the meta-parameters. Addresses are stable for the store's lifetime.
template <class S>
class ParamStore {
public:
    ParamStore() = default;
    ParamStore(const ParamStore& other);
    ParamStore& operator=(const ParamStore& other);
    ParamStore(ParamStore&&) noexcept = default;
    ParamStore& operator=(ParamStore&&) noexcept = default;

    Parameter<S>& add(std::string name, Mat<S> value, bool trainable = true);

    Parameter<S>& operator[](std::size_t i) { return *params_[i]; }
    const Parameter<S>& operator[](std::size_t i) const { return *params_[i]; }
    std::size_t size() const { return params_.size(); }

    Parameter<S>* find(const std::string& name);
    const Parameter<S>* find(const std::string& name) const;
    Parameter<S>& at(const std::string& name);
    const Parameter<S>& at(const std::string& name) const;

    GradBuffer<S> zero_grads() const;
    std::size_t scalar_count() const;
    /// Order-sensitive FNV-1a hash over names and raw value bytes.
    std::uint64_t checksum() const;

    template <class T>
    ParamStore<T> cast() const {
        ParamStore<T> out;
        for (const auto& p : params_) out.add(p->name, p->value.template cast<T>(), p->trainable);
        return out;
    }

private:
    std::vector<std::unique_ptr<Parameter<S>>> params_;
};

template <class S>
class Tape;

/// Handle to a node on a Tape. Cheap to copy; valid while the tape lives.
template <class S>
class Var {
public:
    Var() = default;
    Var(Tape<S>* tape, Index id) : tape_(tape), id_(id) {}

    const Mat<S>& value() const;
    const Mat<S>& grad() const;
    Index rows() const { return value().rows(); }
    Index cols() const { return value().cols(); }
    Shape shape() const { return {rows(), cols()}; }
    bool requires_grad() const;
    S item() const;

    Tape<S>* tape() const { return tape_; }
    Index id() const { return id_; }
    bool valid() const { return tape_ != nullptr; }

private:
    Tape<S>* tape_ = nullptr;
    Index id_ = -1;
};

/// The computation record for one forward/backward pass.
template <class S>
class Tape {
public:
    using Backward = std::function<void(Tape&)>;

    /// With grad disabled no adjoint closures are stored (inference).
    explicit Tape(bool grad_enabled = true) : grad_enabled_(grad_enabled) {}
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    Var<S> constant(Mat<S> value);
    Var<S> leaf(Mat<S> value);
    Var<S> param(const Parameter<S>& p);

    /// Appends a node. `bw` runs during backward with this node's grad available.
    Var<S> push(Mat<S> value, std::initializer_list<Var<S>> parents, Backward bw);
    Var<S> push(Mat<S> value, std::span<const Var<S>> parents, Backward bw);

    const Mat<S>& value(Index id) const { return nodes_[id].value; }
    bool requires_grad(Index id) const { return nodes_[id].requires_grad; }
    /// Gradient accumulator for a node, zero-allocated on first use.
    Mat<S>& grad(Index id);
    const Mat<S>& grad(Index id) const;
    bool has_grad(Index id) const { return nodes_[id].grad.size() != 0; }

    void backward(const Var<S>& root);
    void backward(const Var<S>& root, const Mat<S>& seed);

    /// Adds every parameter leaf's gradient into `out` (sized to the store).
    void accumulate_param_grads(GradBuffer<S>& out) const;

    bool grad_enabled() const { return grad_enabled_; }
    std::size_t size() const { return nodes_.size(); }
    /// Number of nodes whose adjoint ran in the last backward call.
    std::size_t visited() const { return visited_; }

private:
    struct Node {
        Mat<S> value;
        Mat<S> grad;
        bool requires_grad = false;
        Backward backward;
        const Parameter<S>* param = nullptr;
    };
    std::vector<Node> nodes_;
    std::vector<Index> param_nodes_;  // param id -> node id, -1 when absent
    bool grad_enabled_;
    std::size_t visited_ = 0;
    Mat<S> empty_;
};

// ---------------------------------------------------------------- primitives

template <class S> Var<S> matmul(const Var<S>& a, const Var<S>& b);
/// a * b^T
template <class S> Var<S> matmul_nt(const Var<S>& a, const Var<S>& b);
template <class S> Var<S> transpose(const Var<S>& a);

template <class S> Var<S> add(const Var<S>& a, const Var<S>& b);
template <class S> Var<S> sub(const Var<S>& a, const Var<S>& b);
template <class S> Var<S> mul(const Var<S>& a, const Var<S>& b);
template <class S> Var<S> scale(const Var<S>& a, S factor);
template <class S> Var<S> add_scalar(const Var<S>& a, S offset);
/// Adds a 1×n row to every row of an m×n matrix.
template <class S> Var<S> add_bias(const Var<S>& a, const Var<S>& row);
/// Elementwise product with a constant (non-differentiated) matrix.
template <class S> Var<S> mul_const(const Var<S>& a, const Mat<S>& c);

template <class S> Var<S> exp(const Var<S>& a);
template <class S> Var<S> log(const Var<S>& a);
/// ELU with alpha = 1.
template <class S> Var<S> elu(const Var<S>& a);
template <class S> Var<S> relu(const Var<S>& a);

/// Row-wise normalization to zero mean / unit variance, eps = 1e-5, no affine.
template <class S> Var<S> layer_norm(const Var<S>& x);
/// Row-wise normalization followed by per-column gain and bias (1×n rows).
template <class S> Var<S> layer_norm(const Var<S>& x, const Var<S>& gain, const Var<S>& bias);

/// Row-wise softmax with max subtraction. Disallowed entries are exactly 0.
/// Throws ContractError when a row has no allowed entry.
template <class S> Var<S> softmax_rows(const Var<S>& x, const Mask* mask = nullptr);

/// out_ij = m_ij x_ij / sum_j m_ij x_ij for nonnegative scores.
/// Throws NumericalError when a row's normalizer falls below `floor`.
template <class S> Var<S> normalize_rows(const Var<S>& x, const Mask* mask, S floor);

/// exp(x W^T - |x|^2/2) per row. With `stabilize` each row additionally
/// subtracts its own max of x W^T inside the exponent (a per-row constant
/// factor, treated as non-differentiable).
template <class S> Var<S> performer_features(const Var<S>& x, const Var<S>& w, bool stabilize);

/// Rows of `table` selected by `indices`; throws LookupError when out of range.
template <class S> Var<S> embedding_lookup(const Var<S>& table, std::span<const Index> indices);
template <class S> Var<S> gather_rows(const Var<S>& x, std::span<const Index> indices);

template <class S> Var<S> concat_rows(std::span<const Var<S>> parts);
template <class S> Var<S> concat_cols(std::span<const Var<S>> parts);
template <class S> Var<S> slice_cols(const Var<S>& x, Index begin, Index count);

template <class S> Var<S> sum(const Var<S>& x);
template <class S> Var<S> mean(const Var<S>& x);
/// m×1 vector of row sums.
template <class S> Var<S> row_sum(const Var<S>& x);

/// Per-row negative log-likelihood (m×1) of integer targets under softmax(logits).
template <class S> Var<S> cross_entropy(const Var<S>& logits, std::span<const Index> targets);
/// Mean of squared differences (1×1).
template <class S> Var<S> mse(const Var<S>& a, const Var<S>& b);

/// Inverted dropout. rate == 0 returns `x` unchanged.
template <class S> Var<S> dropout(const Var<S>& x, S rate, std::mt19937_64& rng);

struct ConvGeometry {
    Index channels = 1;
    Index height = 0;
    Index width = 0;
    Index stride = 1;

    Index out_height() const { return (height + 2 - 3) / stride + 1; }
    Index out_width() const { return (width + 2 - 3) / stride + 1; }
};

/// 3×3 convolution with zero padding 1. `x` holds one image per row laid out
/// channel-major (C×H×W); `weight` is C_out × (C_in·9); `bias` is 1×C_out.
template <class S>
Var<S> conv3x3(const Var<S>& x, const Var<S>& weight, const Var<S>& bias, ConvGeometry geom);

// ---------------------------------------------------------------- optimizers

struct SgdConfig {
    double lr = 0.1;
};

template <class S>
void sgd_step(ParamStore<S>& params, const GradBuffer<S>& grads, const SgdConfig& cfg);

struct AdamConfig {
    double lr = 3e-4;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
};

/// Adam with per-parameter first/second moments and bias correction.
template <class S>
class Adam {
public:
    explicit Adam(AdamConfig cfg = {}) : cfg_(cfg) {}
    void step(ParamStore<S>& params, const GradBuffer<S>& grads);
    long steps() const { return t_; }
    const AdamConfig& config() const { return cfg_; }

private:
    AdamConfig cfg_;
    long t_ = 0;
    GradBuffer<S> m_, v_;
};

/// Throws NumericalError naming the first parameter with a non-finite gradient.
template <class S>
void check_finite(const ParamStore<S>& params, const GradBuffer<S>& grads);

/// Scales all gradients so their global L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
template <class S>
double clip_global_norm(GradBuffer<S>& grads, double max_norm);

}  // namespace seqcl
