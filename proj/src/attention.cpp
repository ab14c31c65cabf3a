#include "seqcl/attention.hpp"

#include <cmath>

namespace seqcl {

std::string to_string(Backend b) {
    switch (b) {
        case Backend::softmax: return "softmax";
        case Backend::linear: return "linear";
        case Backend::performer: return "performer";
    }
    return "?";
}

Backend parse_backend(const std::string& name) {
    if (name == "softmax") return Backend::softmax;
    if (name == "linear") return Backend::linear;
    if (name == "performer") return Backend::performer;
    throw ConfigError("unknown attention backend '" + name + "' (expected softmax, linear or performer)");
}

template <class S>
Mat<S> orthogonal_gaussian_projection(Index r, Index d, std::mt19937_64& rng) {
    std::normal_distribution<double> n01(0.0, 1.0);
    Eigen::MatrixXd w(r, d);
    for (Index start = 0; start < r; start += d) {
        const Index rows = std::min(d, r - start);
        Eigen::MatrixXd g(d, d);
        for (Index i = 0; i < g.size(); ++i) g.data()[i] = n01(rng);
        Eigen::HouseholderQR<Eigen::MatrixXd> qr(g);
        Eigen::MatrixXd q = qr.householderQ() * Eigen::MatrixXd::Identity(d, d);
        for (Index i = 0; i < rows; ++i) {
            double norm2 = 0;
            for (Index j = 0; j < d; ++j) {
                const double z = n01(rng);
                norm2 += z * z;
            }
            w.row(start + i) = q.col(i).transpose() * std::sqrt(norm2);
        }
    }
    return w.cast<S>();
}

template <class S>
RowVec<S> KernelFeatureMap<S>::apply(const Eigen::Ref<const RowVec<S>>& x, bool stabilize) const {
    if (kind == Backend::linear)
        return x.unaryExpr([](S v) { return v > S(0) ? v + S(1) : std::exp(v); });
    if (kind != Backend::performer) throw ContractError("feature map requested for softmax backend");
    if (projection.cols() != x.cols())
        throw DimensionError("performer features: projection " + shape_str(shape_of(projection)) +
                             " vs input of width " + std::to_string(x.cols()));
    RowVec<S> proj = x * projection.transpose();
    S shift = x.squaredNorm() * S(0.5);
    if (stabilize) shift += proj.maxCoeff();
    return (proj.array() - shift).exp();
}

template <class S>
Var<S> KernelFeatureMap<S>::apply(const Var<S>& x, bool stabilize) const {
    if (kind == Backend::linear) return add_scalar(elu(x), S(1));
    if (kind != Backend::performer) throw ContractError("feature map requested for softmax backend");
    return performer_features(x, x.tape()->constant(projection), stabilize);
}

namespace {

template <class S>
void check_qkv(const Var<S>& q, const Var<S>& k, const Var<S>& v, const Mask& mask) {
    if (q.shape() != k.shape() || k.rows() != v.rows())
        throw DimensionError("attention: Q " + shape_str(q.shape()) + ", K " + shape_str(k.shape()) + ", V " +
                             shape_str(v.shape()));
    if (mask.rows() != q.rows() || mask.cols() != k.rows())
        throw DimensionError("attention: mask [" + std::to_string(mask.rows()) + "x" + std::to_string(mask.cols()) +
                             "] for Q " + shape_str(q.shape()));
}

}  // namespace

template <class S>
AttentionResult<S> softmax_attention(const Var<S>& q, const Var<S>& k, const Var<S>& v, const Mask& mask) {
    check_qkv(q, k, v, mask);
    const S inv_sqrt_d = S(1) / std::sqrt(static_cast<S>(q.cols()));
    Var<S> weights = softmax_rows(scale(matmul_nt(q, k), inv_sqrt_d), &mask);
    return {matmul(weights, v), weights};
}

template <class S>
AttentionResult<S> kernel_attention(const Var<S>& q, const Var<S>& k, const Var<S>& v,
                                    const KernelFeatureMap<S>& phi, const Mask& mask) {
    check_qkv(q, k, v, mask);
    Var<S> qf = phi.apply(q, /*stabilize=*/true);
    Var<S> kf = phi.apply(k, /*stabilize=*/false);
    Var<S> weights = normalize_rows(matmul_nt(qf, kf), &mask, static_cast<S>(kKernelDenominatorFloor));
    return {matmul(weights, v), weights};
}

template <class S>
RowVec<S> SoftmaxAttnState<S>::step(const Eigen::Ref<const RowVec<S>>& q, const Eigen::Ref<const RowVec<S>>& k,
                                    const Eigen::Ref<const RowVec<S>>& v) {
    if (dim_ == 0) dim_ = k.cols();
    if (q.cols() != dim_ || k.cols() != dim_ || v.cols() != dim_)
        throw DimensionError("softmax_attn_step: head width " + std::to_string(dim_));
    if (size_ == keys_.rows()) {
        const Index cap = std::max<Index>(16, 2 * size_);
        keys_.conservativeResize(cap, dim_);
        values_.conservativeResize(cap, dim_);
    }
    keys_.row(size_) = k;
    values_.row(size_) = v;
    ++size_;
    Vec<S> scores = keys_.topRows(size_) * q.transpose() / std::sqrt(static_cast<S>(dim_));
    scores = (scores.array() - scores.maxCoeff()).exp();
    scores /= scores.sum();
    return scores.transpose() * values_.topRows(size_);
}

template <class S>
RowVec<S> KetAttnState<S>::step(const Eigen::Ref<const RowVec<S>>& q, const Eigen::Ref<const RowVec<S>>& k,
                                const Eigen::Ref<const RowVec<S>>& v, const KernelFeatureMap<S>& phi) {
    const Index d = acc_.cols() - 1;
    if (v.cols() != d) throw DimensionError("ket_attn_step: value width " + std::to_string(v.cols()));
    RowVec<S> kf = phi.apply(k, false);
    if (kf.cols() != acc_.rows()) throw DimensionError("ket_attn_step: feature width mismatch");
    acc_.leftCols(d).noalias() += kf.transpose() * v;
    acc_.col(d) += kf.transpose();
    ++steps_;
    RowVec<S> qf = phi.apply(q, true);
    RowVec<S> num = qf * acc_;
    const S denom = num(d);
    if (!(denom >= static_cast<S>(kKernelDenominatorFloor)))
        throw NumericalError("ket_attn_step: degenerate denominator " + std::to_string(double(denom)));
    return num.head(d) / denom;
}

template Mat<float> orthogonal_gaussian_projection<float>(Index, Index, std::mt19937_64&);
template Mat<double> orthogonal_gaussian_projection<double>(Index, Index, std::mt19937_64&);
template struct KernelFeatureMap<float>;
template struct KernelFeatureMap<double>;
template AttentionResult<float> softmax_attention(const Var<float>&, const Var<float>&, const Var<float>&, const Mask&);
template AttentionResult<double> softmax_attention(const Var<double>&, const Var<double>&, const Var<double>&,
                                                   const Mask&);
template AttentionResult<float> kernel_attention(const Var<float>&, const Var<float>&, const Var<float>&,
                                                 const KernelFeatureMap<float>&, const Mask&);
template AttentionResult<double> kernel_attention(const Var<double>&, const Var<double>&, const Var<double>&,
                                                  const KernelFeatureMap<double>&, const Mask&);
template class SoftmaxAttnState<float>;
template class SoftmaxAttnState<double>;
template class KetAttnState<float>;
template class KetAttnState<double>;

}  // namespace seqcl
