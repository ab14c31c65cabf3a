#pragma once

// Causal attention backends in two execution forms:
//   * parallel: whole-sequence on a Tape, used for meta-training;
//   * recurrent: one token at a time against an explicit state, used for
//     continual-learning-compliant inference.
//
// Exact softmax attention scales scores by 1/sqrt(d). The kernel backends
// feed q and k to the feature map unscaled.

#include <random>
#include <string>
#include <vector>

#include "seqcl/tensor.hpp"

namespace seqcl {

enum class Backend { softmax, linear, performer };

std::string to_string(Backend b);
/// Throws ConfigError for unknown names.
Backend parse_backend(const std::string& name);

inline bool is_kernel_backend(Backend b) { return b != Backend::softmax; }

/// Denominators of kernel attention below this are treated as degenerate.
inline constexpr double kKernelDenominatorFloor = 1e-9;

/// Gaussian r×d matrix whose rows are orthogonal within each block of d rows;
/// each row is rescaled to the norm of an independent Gaussian d-vector.
template <class S>
Mat<S> orthogonal_gaussian_projection(Index r, Index d, std::mt19937_64& rng);

/// phi: R^d -> R^r.
template <class S>
struct KernelFeatureMap {
    Backend kind = Backend::linear;
    Mat<S> projection;  // r×d, performer only

    Index feature_dim(Index d) const { return kind == Backend::performer ? projection.rows() : d; }

    /// elu(x) + 1, or exp(Wx - |x|^2/2). Queries may be stabilized by their
    /// own max(Wx); the factor cancels in the attention ratio.
    RowVec<S> apply(const Eigen::Ref<const RowVec<S>>& x, bool stabilize = false) const;
    Var<S> apply(const Var<S>& x, bool stabilize = false) const;
};

template <class S>
struct AttentionResult {
    Var<S> output;   // T×d
    Var<S> weights;  // T×T normalized attention rows
};

/// softmax(Q K^T / sqrt(d)) V restricted to allowed mask entries.
template <class S>
AttentionResult<S> softmax_attention(const Var<S>& q, const Var<S>& k, const Var<S>& v, const Mask& mask);

/// D^-1 (phi(Q) phi(K)^T ⊙ M) V with D the masked row sums.
template <class S>
AttentionResult<S> kernel_attention(const Var<S>& q, const Var<S>& k, const Var<S>& v,
                                    const KernelFeatureMap<S>& phi, const Mask& mask);

template <class S>
AttentionResult<S> softmax_attention(const Var<S>& q, const Var<S>& k, const Var<S>& v, bool causal) {
    const Index t = q.rows();
    const Mask m = causal ? causal_mask(t) : Mask::Constant(t, t, true);
    return softmax_attention(q, k, v, m);
}

template <class S>
AttentionResult<S> kernel_attention(const Var<S>& q, const Var<S>& k, const Var<S>& v,
                                    const KernelFeatureMap<S>& phi, bool causal) {
    const Index t = q.rows();
    const Mask m = causal ? causal_mask(t) : Mask::Constant(t, t, true);
    return kernel_attention(q, k, v, phi, m);
}

/// Growing key/value cache of one head.
template <class S>
class SoftmaxAttnState {
public:
    SoftmaxAttnState() = default;
    explicit SoftmaxAttnState(Index dim) : dim_(dim) {}

    /// Appends (k, v) and returns the attention output for q.
    RowVec<S> step(const Eigen::Ref<const RowVec<S>>& q, const Eigen::Ref<const RowVec<S>>& k,
                   const Eigen::Ref<const RowVec<S>>& v);

    Index pairs() const { return size_; }
    Index dim() const { return dim_; }
    /// Bytes held by live keys and values.
    std::size_t bytes() const { return static_cast<std::size_t>(2 * size_ * dim_) * sizeof(S); }
    auto keys() const { return keys_.topRows(size_); }
    auto values() const { return values_.topRows(size_); }

private:
    Index dim_ = 0;
    Index size_ = 0;
    Mat<S> keys_, values_;
};

/// Constant-size accumulator S = sum phi(k) [v^T, 1] of one head.
template <class S>
class KetAttnState {
public:
    KetAttnState() = default;
    KetAttnState(Index feature_dim, Index dim) : acc_(Mat<S>::Zero(feature_dim, dim + 1)) {}

    RowVec<S> step(const Eigen::Ref<const RowVec<S>>& q, const Eigen::Ref<const RowVec<S>>& k,
                   const Eigen::Ref<const RowVec<S>>& v, const KernelFeatureMap<S>& phi);

    const Mat<S>& accumulator() const { return acc_; }
    /// Last column: running sum of key features.
    auto key_feature_sum() const { return acc_.col(acc_.cols() - 1); }
    Index steps() const { return steps_; }
    std::size_t bytes() const { return static_cast<std::size_t>(acc_.size()) * sizeof(S); }

private:
    Mat<S> acc_;
    Index steps_ = 0;
};

}  // namespace seqcl
