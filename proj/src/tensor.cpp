#include "seqcl/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <sstream>

namespace seqcl {

std::string shape_str(Shape s) {
    std::ostringstream os;
    os << '[' << s[0] << 'x' << s[1] << ']';
    return os.str();
}

Mask causal_mask(Index n) {
    Mask m(n, n);
    for (Index i = 0; i < n; ++i)
        for (Index j = 0; j < n; ++j) m(i, j) = j <= i;
    return m;
}

namespace {

[[noreturn]] void dim_error(const char* op, Shape a, Shape b) {
    throw DimensionError(std::string(op) + ": incompatible shapes " + shape_str(a) + " and " +
                         shape_str(b));
}

template <class S>
void same_tape(const Var<S>& a, const Var<S>& b, const char* op) {
    if (a.tape() != b.tape()) throw ContractError(std::string(op) + ": operands on different tapes");
}

template <class S>
void require_same_shape(const Var<S>& a, const Var<S>& b, const char* op) {
    same_tape(a, b, op);
    if (a.shape() != b.shape()) dim_error(op, a.shape(), b.shape());
}

}  // namespace

// ------------------------------------------------------------------ ParamStore

template <class S>
ParamStore<S>::ParamStore(const ParamStore& other) {
    *this = other;
}

template <class S>
ParamStore<S>& ParamStore<S>::operator=(const ParamStore& other) {
    if (this == &other) return *this;
    params_.clear();
    for (const auto& p : other.params_) add(p->name, p->value, p->trainable);
    return *this;
}

template <class S>
Parameter<S>& ParamStore<S>::add(std::string name, Mat<S> value, bool trainable) {
    if (find(name)) throw ConfigError("duplicate parameter name: " + name);
    auto p = std::make_unique<Parameter<S>>();
    p->name = std::move(name);
    p->value = std::move(value);
    p->trainable = trainable;
    p->id = params_.size();
    params_.push_back(std::move(p));
    return *params_.back();
}

template <class S>
Parameter<S>* ParamStore<S>::find(const std::string& name) {
    for (auto& p : params_)
        if (p->name == name) return p.get();
    return nullptr;
}

template <class S>
const Parameter<S>* ParamStore<S>::find(const std::string& name) const {
    for (const auto& p : params_)
        if (p->name == name) return p.get();
    return nullptr;
}

template <class S>
Parameter<S>& ParamStore<S>::at(const std::string& name) {
    auto* p = find(name);
    if (!p) throw LookupError("no parameter named " + name);
    return *p;
}

template <class S>
const Parameter<S>& ParamStore<S>::at(const std::string& name) const {
    const auto* p = find(name);
    if (!p) throw LookupError("no parameter named " + name);
    return *p;
}

template <class S>
GradBuffer<S> ParamStore<S>::zero_grads() const {
    GradBuffer<S> g;
    g.reserve(params_.size());
    for (const auto& p : params_) g.push_back(Mat<S>::Zero(p->value.rows(), p->value.cols()));
    return g;
}

template <class S>
std::size_t ParamStore<S>::scalar_count() const {
    std::size_t n = 0;
    for (const auto& p : params_) n += static_cast<std::size_t>(p->value.size());
    return n;
}

template <class S>
std::uint64_t ParamStore<S>::checksum() const {
    std::uint64_t h = 1469598103934665603ULL;
    auto mix = [&h](const unsigned char* data, std::size_t n) {
        for (std::size_t i = 0; i < n; ++i) {
            h ^= data[i];
            h *= 1099511628211ULL;
        }
    };
    for (const auto& p : params_) {
        mix(reinterpret_cast<const unsigned char*>(p->name.data()), p->name.size());
        mix(reinterpret_cast<const unsigned char*>(p->value.data()),
            static_cast<std::size_t>(p->value.size()) * sizeof(S));
    }
    return h;
}

// ------------------------------------------------------------------ Var / Tape

template <class S>
const Mat<S>& Var<S>::value() const {
    return tape_->value(id_);
}

template <class S>
const Mat<S>& Var<S>::grad() const {
    return static_cast<const Tape<S>*>(tape_)->grad(id_);
}

template <class S>
bool Var<S>::requires_grad() const {
    return tape_->requires_grad(id_);
}

template <class S>
S Var<S>::item() const {
    const auto& v = value();
    if (v.size() != 1) throw DimensionError("item() on non-scalar " + shape_str(shape_of(v)));
    return v(0, 0);
}

template <class S>
Var<S> Tape<S>::constant(Mat<S> value) {
    Node n;
    n.value = std::move(value);
    nodes_.push_back(std::move(n));
    return Var<S>(this, static_cast<Index>(nodes_.size() - 1));
}

template <class S>
Var<S> Tape<S>::leaf(Mat<S> value) {
    Node n;
    n.value = std::move(value);
    n.requires_grad = grad_enabled_;
    nodes_.push_back(std::move(n));
    return Var<S>(this, static_cast<Index>(nodes_.size() - 1));
}

template <class S>
Var<S> Tape<S>::param(const Parameter<S>& p) {
    if (param_nodes_.size() <= p.id) param_nodes_.resize(p.id + 1, -1);
    Index& slot = param_nodes_[p.id];
    if (slot >= 0 && nodes_[slot].param == &p) return Var<S>(this, slot);
    Node n;
    n.value = p.value;
    n.requires_grad = grad_enabled_ && p.trainable;
    n.param = &p;
    nodes_.push_back(std::move(n));
    slot = static_cast<Index>(nodes_.size() - 1);
    return Var<S>(this, slot);
}

template <class S>
Var<S> Tape<S>::push(Mat<S> value, std::initializer_list<Var<S>> parents, Backward bw) {
    return push(std::move(value), std::span<const Var<S>>(parents.begin(), parents.size()),
                std::move(bw));
}

template <class S>
Var<S> Tape<S>::push(Mat<S> value, std::span<const Var<S>> parents, Backward bw) {
    Node n;
    n.value = std::move(value);
    if (grad_enabled_) {
        for (const auto& p : parents) {
            if (p.tape() != this) throw ContractError("operand belongs to a different tape");
            n.requires_grad = n.requires_grad || nodes_[p.id()].requires_grad;
        }
        if (n.requires_grad) n.backward = std::move(bw);
    }
    nodes_.push_back(std::move(n));
    return Var<S>(this, static_cast<Index>(nodes_.size() - 1));
}

template <class S>
Mat<S>& Tape<S>::grad(Index id) {
    Node& n = nodes_[id];
    if (n.grad.size() == 0) n.grad = Mat<S>::Zero(n.value.rows(), n.value.cols());
    return n.grad;
}

template <class S>
const Mat<S>& Tape<S>::grad(Index id) const {
    const Node& n = nodes_[id];
    return n.grad.size() == 0 ? empty_ : n.grad;
}

template <class S>
void Tape<S>::backward(const Var<S>& root) {
    const auto& v = value(root.id());
    backward(root, Mat<S>::Ones(v.rows(), v.cols()));
}

template <class S>
void Tape<S>::backward(const Var<S>& root, const Mat<S>& seed) {
    if (root.tape() != this) throw ContractError("backward: root from another tape");
    if (!grad_enabled_) throw ContractError("backward on a tape with gradients disabled");
    if (seed.rows() != value(root.id()).rows() || seed.cols() != value(root.id()).cols())
        dim_error("backward seed", shape_of(seed), shape_of(value(root.id())));
    grad(root.id()) += seed;
    visited_ = 0;
    for (Index i = root.id(); i >= 0; --i) {
        Node& n = nodes_[i];
        if (!n.requires_grad || n.grad.size() == 0 || !n.backward) continue;
        // Grads are only appended to nodes with smaller ids, so `n` stays valid.
        n.backward(*this);
        ++visited_;
    }
}

template <class S>
void Tape<S>::accumulate_param_grads(GradBuffer<S>& out) const {
    for (const Node& n : nodes_) {
        if (!n.param || n.grad.size() == 0) continue;
        auto& dst = out.at(n.param->id);
        if (dst.size() == 0) dst = Mat<S>::Zero(n.grad.rows(), n.grad.cols());
        dst += n.grad;
    }
}

// ------------------------------------------------------------------ linear algebra

template <class S>
Var<S> matmul(const Var<S>& a, const Var<S>& b) {
    same_tape(a, b, "matmul");
    if (a.cols() != b.rows()) dim_error("matmul", a.shape(), b.shape());
    Mat<S> out = a.value() * b.value();
    const Index ia = a.id(), ib = b.id();
    Index self = static_cast<Index>(a.tape()->size());
    return a.tape()->push(std::move(out), {a, b}, [ia, ib, self](Tape<S>& t) {
        const Mat<S>& g = t.grad(self);
        if (t.requires_grad(ia)) t.grad(ia).noalias() += g * t.value(ib).transpose();
        if (t.requires_grad(ib)) t.grad(ib).noalias() += t.value(ia).transpose() * g;
    });
}

template <class S>
Var<S> matmul_nt(const Var<S>& a, const Var<S>& b) {
    same_tape(a, b, "matmul_nt");
    if (a.cols() != b.cols()) dim_error("matmul_nt", a.shape(), b.shape());
    Mat<S> out = a.value() * b.value().transpose();
    const Index ia = a.id(), ib = b.id();
    Index self = static_cast<Index>(a.tape()->size());
    return a.tape()->push(std::move(out), {a, b}, [ia, ib, self](Tape<S>& t) {
        const Mat<S>& g = t.grad(self);
        if (t.requires_grad(ia)) t.grad(ia).noalias() += g * t.value(ib);
        if (t.requires_grad(ib)) t.grad(ib).noalias() += g.transpose() * t.value(ia);
    });
}

template <class S>
Var<S> transpose(const Var<S>& a) {
    Mat<S> out = a.value().transpose();
    const Index ia = a.id();
    Index self = static_cast<Index>(a.tape()->size());
    return a.tape()->push(std::move(out), {a}, [ia, self](Tape<S>& t) {
        t.grad(ia) += t.grad(self).transpose();
    });
}

// ------------------------------------------------------------------ elementwise

template <class S>
Var<S> add(const Var<S>& a, const Var<S>& b) {
    require_same_shape(a, b, "add");
    Mat<S> out = a.value() + b.value();
    const Index ia = a.id(), ib = b.id();
    Index self = static_cast<Index>(a.tape()->size());
    return a.tape()->push(std::move(out), {a, b}, [ia, ib, self](Tape<S>& t) {
        const Mat<S>& g = t.grad(self);
        if (t.requires_grad(ia)) t.grad(ia) += g;
        if (t.requires_grad(ib)) t.grad(ib) += g;
    });
}

template <class S>
Var<S> sub(const Var<S>& a, const Var<S>& b) {
    require_same_shape(a, b, "sub");
    Mat<S> out = a.value() - b.value();
    const Index ia = a.id(), ib = b.id();
    Index self = static_cast<Index>(a.tape()->size());
    return a.tape()->push(std::move(out), {a, b}, [ia, ib, self](Tape<S>& t) {
        const Mat<S>& g = t.grad(self);
        if (t.requires_grad(ia)) t.grad(ia) += g;
        if (t.requires_grad(ib)) t.grad(ib) -= g;
    });
}

template <class S>
Var<S> mul(const Var<S>& a, const Var<S>& b) {
    require_same_shape(a, b, "mul");
    Mat<S> out = a.value().cwiseProduct(b.value());
    const Index ia = a.id(), ib = b.id();
    Index self = static_cast<Index>(a.tape()->size());
    return a.tape()->push(std::move(out), {a, b}, [ia, ib, self](Tape<S>& t) {
        const Mat<S>& g = t.grad(self);
        if (t.requires_grad(ia)) t.grad(ia) += g.cwiseProduct(t.value(ib));
        if (t.requires_grad(ib)) t.grad(ib) += g.cwiseProduct(t.value(ia));
    });
}

template <class S>
Var<S> scale(const Var<S>& a, S factor) {
    Mat<S> out = a.value() * factor;
    const Index ia = a.id();
    Index self = static_cast<Index>(a.tape()->size());
    return a.tape()->push(std::move(out), {a}, [ia, self, factor](Tape<S>& t) {
        t.grad(ia) += t.grad(self) * factor;
    });
}

template <class S>
Var<S> add_scalar(const Var<S>& a, S offset) {
    Mat<S> out = a.value().array() + offset;
    const Index ia = a.id();
    Index self = static_cast<Index>(a.tape()->size());
    return a.tape()->push(std::move(out), {a}, [ia, self](Tape<S>& t) { t.grad(ia) += t.grad(self); });
}

template <class S>
Var<S> add_bias(const Var<S>& a, const Var<S>& row) {
    same_tape(a, row, "add_bias");
    if (row.rows() != 1 || row.cols() != a.cols()) dim_error("add_bias", a.shape(), row.shape());
    Mat<S> out = a.value();
    out.rowwise() += row.value().row(0);
    const Index ia = a.id(), ir = row.id();
    Index self = static_cast<Index>(a.tape()->size());
    return a.tape()->push(std::move(out), {a, row}, [ia, ir, self](Tape<S>& t) {
        const Mat<S>& g = t.grad(self);
        if (t.requires_grad(ia)) t.grad(ia) += g;
        if (t.requires_grad(ir)) t.grad(ir) += g.colwise().sum();
    });
}

template <class S>
Var<S> mul_const(const Var<S>& a, const Mat<S>& c) {
    if (shape_of(c) != a.shape()) dim_error("mul_const", a.shape(), shape_of(c));
    Mat<S> out = a.value().cwiseProduct(c);
    const Index ia = a.id();
    Index self = static_cast<Index>(a.tape()->size());
    return a.tape()->push(std::move(out), {a}, [ia, self, c](Tape<S>& t) {
        t.grad(ia) += t.grad(self).cwiseProduct(c);
    });
}

template <class S>
Var<S> exp(const Var<S>& a) {
    Mat<S> out = a.value().array().exp();
    const Index ia = a.id();
    Index self = static_cast<Index>(a.tape()->size());
    return a.tape()->push(std::move(out), {a}, [ia, self](Tape<S>& t) {
        t.grad(ia) += t.grad(self).cwiseProduct(t.value(self));
    });
}

template <class S>
Var<S> log(const Var<S>& a) {
    Mat<S> out = a.value().array().log();
    const Index ia = a.id();
    Index self = static_cast<Index>(a.tape()->size());
    return a.tape()->push(std::move(out), {a}, [ia, self](Tape<S>& t) {
        t.grad(ia).array() += t.grad(self).array() / t.value(ia).array();
    });
}

template <class S>
Var<S> elu(const Var<S>& a) {
    Mat<S> out = a.value().unaryExpr([](S x) { return x > S(0) ? x : std::expm1(x); });
    const Index ia = a.id();
    Index self = static_cast<Index>(a.tape()->size());
    return a.tape()->push(std::move(out), {a}, [ia, self](Tape<S>& t) {
        const auto& x = t.value(ia).array();
        const auto& y = t.value(self).array();
        t.grad(ia).array() += t.grad(self).array() * (x > S(0)).select(S(1), y + S(1));
    });
}

template <class S>
Var<S> relu(const Var<S>& a) {
    Mat<S> out = a.value().cwiseMax(S(0));
    const Index ia = a.id();
    Index self = static_cast<Index>(a.tape()->size());
    return a.tape()->push(std::move(out), {a}, [ia, self](Tape<S>& t) {
        t.grad(ia).array() += (t.value(ia).array() > S(0)).select(t.grad(self).array(), S(0));
    });
}

// ------------------------------------------------------------------ normalization

template <class S>
Var<S> layer_norm(const Var<S>& x) {
    constexpr S eps = S(1e-5);
    const Index n = x.cols();
    const Mat<S>& xv = x.value();
    Vec<S> inv_std(xv.rows());
    Mat<S> out(xv.rows(), n);
    for (Index i = 0; i < xv.rows(); ++i) {
        const S mu = xv.row(i).mean();
        const S var = (xv.row(i).array() - mu).square().mean();
        inv_std(i) = S(1) / std::sqrt(var + eps);
        out.row(i) = (xv.row(i).array() - mu) * inv_std(i);
    }
    const Index ix = x.id();
    Index self = static_cast<Index>(x.tape()->size());
    return x.tape()->push(std::move(out), {x}, [ix, self, inv_std, n](Tape<S>& t) {
        const Mat<S>& g = t.grad(self);
        const Mat<S>& y = t.value(self);
        Mat<S>& gx = t.grad(ix);
        for (Index i = 0; i < y.rows(); ++i) {
            const S gmean = g.row(i).mean();
            const S gy = g.row(i).dot(y.row(i)) / S(n);
            gx.row(i).array() +=
                inv_std(i) * (g.row(i).array() - gmean - y.row(i).array() * gy);
        }
    });
}

template <class S>
Var<S> layer_norm(const Var<S>& x, const Var<S>& gain, const Var<S>& bias) {
    if (gain.rows() != 1 || gain.cols() != x.cols()) dim_error("layer_norm gain", x.shape(), gain.shape());
    Var<S> y = layer_norm(x);
    const Mat<S>& yv = y.value();
    Mat<S> out = yv.array().rowwise() * gain.value().row(0).array();
    out.rowwise() += bias.value().row(0);
    const Index iy = y.id(), ig = gain.id(), ib = bias.id();
    Index self = static_cast<Index>(x.tape()->size());
    return x.tape()->push(std::move(out), {y, gain, bias}, [iy, ig, ib, self](Tape<S>& t) {
        const Mat<S>& g = t.grad(self);
        if (t.requires_grad(iy))
            t.grad(iy).array() += g.array().rowwise() * t.value(ig).row(0).array();
        if (t.requires_grad(ig)) t.grad(ig) += g.cwiseProduct(t.value(iy)).colwise().sum();
        if (t.requires_grad(ib)) t.grad(ib) += g.colwise().sum();
    });
}

template <class S>
Var<S> softmax_rows(const Var<S>& x, const Mask* mask) {
    const Mat<S>& xv = x.value();
    if (xv.cols() < 1) throw DimensionError("softmax_rows: empty last dimension");
    if (mask && (mask->rows() != xv.rows() || mask->cols() != xv.cols()))
        dim_error("softmax_rows mask", x.shape(), {mask->rows(), mask->cols()});
    Mat<S> out = Mat<S>::Zero(xv.rows(), xv.cols());
    for (Index i = 0; i < xv.rows(); ++i) {
        S mx = -std::numeric_limits<S>::infinity();
        bool any = false;
        for (Index j = 0; j < xv.cols(); ++j) {
            if (mask && !(*mask)(i, j)) continue;
            mx = std::max(mx, xv(i, j));
            any = true;
        }
        if (!any) throw ContractError("softmax_rows: row " + std::to_string(i) + " is fully masked");
        S z = 0;
        for (Index j = 0; j < xv.cols(); ++j) {
            if (mask && !(*mask)(i, j)) continue;
            out(i, j) = std::exp(xv(i, j) - mx);
            z += out(i, j);
        }
        out.row(i) /= z;
    }
    const Index ix = x.id();
    Index self = static_cast<Index>(x.tape()->size());
    return x.tape()->push(std::move(out), {x}, [ix, self](Tape<S>& t) {
        const Mat<S>& g = t.grad(self);
        const Mat<S>& y = t.value(self);
        Vec<S> dots = (g.cwiseProduct(y)).rowwise().sum();
        t.grad(ix).array() += y.array() * (g.colwise() - dots).array();
    });
}

template <class S>
Var<S> normalize_rows(const Var<S>& x, const Mask* mask, S floor) {
    const Mat<S>& xv = x.value();
    if (mask && (mask->rows() != xv.rows() || mask->cols() != xv.cols()))
        dim_error("normalize_rows mask", x.shape(), {mask->rows(), mask->cols()});
    Mat<S> keep = mask ? Mat<S>(mask->template cast<S>().matrix()) : Mat<S>();
    Mat<S> masked = mask ? Mat<S>(xv.cwiseProduct(keep)) : xv;
    Vec<S> denom = masked.rowwise().sum();
    for (Index i = 0; i < denom.size(); ++i)
        if (!(denom(i) >= floor))
            throw NumericalError("normalize_rows: degenerate normalizer " + std::to_string(double(denom(i))) +
                                 " in row " + std::to_string(i));
    Mat<S> out = masked.array().colwise() / denom.array();
    const Index ix = x.id();
    Index self = static_cast<Index>(x.tape()->size());
    return x.tape()->push(std::move(out), {x}, [ix, self, denom, keep](Tape<S>& t) {
        const Mat<S>& g = t.grad(self);
        const Mat<S>& y = t.value(self);
        Vec<S> dots = (g.cwiseProduct(y)).rowwise().sum();
        Mat<S> gx = (g.colwise() - dots).array().colwise() / denom.array();
        if (keep.size() != 0) gx = gx.cwiseProduct(keep);
        t.grad(ix) += gx;
    });
}

template <class S>
Var<S> performer_features(const Var<S>& x, const Var<S>& w, bool stabilize) {
    same_tape(x, w, "performer_features");
    if (x.cols() != w.cols()) dim_error("performer_features", x.shape(), w.shape());
    const Mat<S>& xv = x.value();
    Mat<S> proj = xv * w.value().transpose();
    Vec<S> shift = xv.rowwise().squaredNorm() * S(0.5);
    if (stabilize) shift += proj.rowwise().maxCoeff();
    Mat<S> out = (proj.colwise() - shift).array().exp();
    const Index ix = x.id(), iw = w.id();
    Index self = static_cast<Index>(x.tape()->size());
    return x.tape()->push(std::move(out), {x, w}, [ix, iw, self](Tape<S>& t) {
        // d/dproj = y * g ; d/dx gets W^T term minus x * sum(y*g)
        Mat<S> gp = t.grad(self).cwiseProduct(t.value(self));
        if (t.requires_grad(ix)) {
            Vec<S> s = gp.rowwise().sum();
            t.grad(ix).noalias() += gp * t.value(iw);
            t.grad(ix) -= (t.value(ix).array().colwise() * s.array()).matrix();
        }
        if (t.requires_grad(iw)) t.grad(iw).noalias() += gp.transpose() * t.value(ix);
    });
}

// ------------------------------------------------------------------ indexing

template <class S>
Var<S> gather_rows(const Var<S>& x, std::span<const Index> indices) {
    const Mat<S>& xv = x.value();
    Mat<S> out(static_cast<Index>(indices.size()), xv.cols());
    for (std::size_t r = 0; r < indices.size(); ++r) {
        const Index src = indices[r];
        if (src < 0 || src >= xv.rows())
            throw LookupError("row index " + std::to_string(src) + " outside [0," +
                              std::to_string(xv.rows()) + ")");
        out.row(static_cast<Index>(r)) = xv.row(src);
    }
    std::vector<Index> idx(indices.begin(), indices.end());
    const Index ix = x.id();
    Index self = static_cast<Index>(x.tape()->size());
    return x.tape()->push(std::move(out), {x}, [ix, self, idx = std::move(idx)](Tape<S>& t) {
        const Mat<S>& g = t.grad(self);
        Mat<S>& gx = t.grad(ix);
        for (std::size_t r = 0; r < idx.size(); ++r) gx.row(idx[r]) += g.row(static_cast<Index>(r));
    });
}

template <class S>
Var<S> embedding_lookup(const Var<S>& table, std::span<const Index> indices) {
    return gather_rows(table, indices);
}

template <class S>
Var<S> concat_rows(std::span<const Var<S>> parts) {
    if (parts.empty()) throw DimensionError("concat_rows: no operands");
    Index rows = 0;
    const Index cols = parts[0].cols();
    for (const auto& p : parts) {
        if (p.cols() != cols) dim_error("concat_rows", parts[0].shape(), p.shape());
        rows += p.rows();
    }
    Mat<S> out(rows, cols);
    std::vector<Index> ids, offsets;
    Index r = 0;
    for (const auto& p : parts) {
        out.middleRows(r, p.rows()) = p.value();
        ids.push_back(p.id());
        offsets.push_back(r);
        r += p.rows();
    }
    Tape<S>* tape = parts[0].tape();
    Index self = static_cast<Index>(tape->size());
    return tape->push(std::move(out), parts, [ids, offsets, self](Tape<S>& t) {
        const Mat<S>& g = t.grad(self);
        for (std::size_t k = 0; k < ids.size(); ++k) {
            if (!t.requires_grad(ids[k])) continue;
            Mat<S>& gk = t.grad(ids[k]);
            gk += g.middleRows(offsets[k], gk.rows());
        }
    });
}

template <class S>
Var<S> concat_cols(std::span<const Var<S>> parts) {
    if (parts.empty()) throw DimensionError("concat_cols: no operands");
    Index cols = 0;
    const Index rows = parts[0].rows();
    for (const auto& p : parts) {
        if (p.rows() != rows) dim_error("concat_cols", parts[0].shape(), p.shape());
        cols += p.cols();
    }
    Mat<S> out(rows, cols);
    std::vector<Index> ids, offsets;
    Index c = 0;
    for (const auto& p : parts) {
        out.middleCols(c, p.cols()) = p.value();
        ids.push_back(p.id());
        offsets.push_back(c);
        c += p.cols();
    }
    Tape<S>* tape = parts[0].tape();
    Index self = static_cast<Index>(tape->size());
    return tape->push(std::move(out), parts, [ids, offsets, self](Tape<S>& t) {
        const Mat<S>& g = t.grad(self);
        for (std::size_t k = 0; k < ids.size(); ++k) {
            if (!t.requires_grad(ids[k])) continue;
            Mat<S>& gk = t.grad(ids[k]);
            gk += g.middleCols(offsets[k], gk.cols());
        }
    });
}

template <class S>
Var<S> slice_cols(const Var<S>& x, Index begin, Index count) {
    if (begin < 0 || count < 0 || begin + count > x.cols())
        throw DimensionError("slice_cols: [" + std::to_string(begin) + "," + std::to_string(begin + count) +
                             ") outside " + shape_str(x.shape()));
    Mat<S> out = x.value().middleCols(begin, count);
    const Index ix = x.id();
    Index self = static_cast<Index>(x.tape()->size());
    return x.tape()->push(std::move(out), {x}, [ix, self, begin, count](Tape<S>& t) {
        t.grad(ix).middleCols(begin, count) += t.grad(self);
    });
}

// ------------------------------------------------------------------ reductions and losses

template <class S>
Var<S> sum(const Var<S>& x) {
    Mat<S> out(1, 1);
    out(0, 0) = x.value().sum();
    const Index ix = x.id();
    Index self = static_cast<Index>(x.tape()->size());
    return x.tape()->push(std::move(out), {x}, [ix, self](Tape<S>& t) {
        t.grad(ix).array() += t.grad(self)(0, 0);
    });
}

template <class S>
Var<S> mean(const Var<S>& x) {
    return scale(sum(x), S(1) / static_cast<S>(x.value().size()));
}

template <class S>
Var<S> row_sum(const Var<S>& x) {
    Mat<S> out = x.value().rowwise().sum();
    const Index ix = x.id();
    Index self = static_cast<Index>(x.tape()->size());
    return x.tape()->push(std::move(out), {x}, [ix, self](Tape<S>& t) {
        t.grad(ix).colwise() += t.grad(self).col(0);
    });
}

template <class S>
Var<S> cross_entropy(const Var<S>& logits, std::span<const Index> targets) {
    const Mat<S>& lv = logits.value();
    if (static_cast<Index>(targets.size()) != lv.rows())
        throw DimensionError("cross_entropy: " + std::to_string(targets.size()) + " targets for " +
                             shape_str(logits.shape()) + " logits");
    Mat<S> probs(lv.rows(), lv.cols());
    Mat<S> out(lv.rows(), 1);
    for (Index i = 0; i < lv.rows(); ++i) {
        const Index y = targets[static_cast<std::size_t>(i)];
        if (y < 0 || y >= lv.cols())
            throw LookupError("cross_entropy: target " + std::to_string(y) + " outside vocabulary of " +
                              std::to_string(lv.cols()));
        const S mx = lv.row(i).maxCoeff();
        probs.row(i) = (lv.row(i).array() - mx).exp();
        const S z = probs.row(i).sum();
        probs.row(i) /= z;
        out(i, 0) = -(lv(i, y) - mx - std::log(z));
    }
    std::vector<Index> tg(targets.begin(), targets.end());
    const Index il = logits.id();
    Index self = static_cast<Index>(logits.tape()->size());
    return logits.tape()->push(std::move(out), {logits}, [il, self, probs, tg](Tape<S>& t) {
        const Mat<S>& g = t.grad(self);
        Mat<S> d = probs;
        for (std::size_t i = 0; i < tg.size(); ++i) d(static_cast<Index>(i), tg[i]) -= S(1);
        t.grad(il) += (d.array().colwise() * g.col(0).array()).matrix();
    });
}

template <class S>
Var<S> mse(const Var<S>& a, const Var<S>& b) {
    Var<S> d = sub(a, b);
    return mean(mul(d, d));
}

template <class S>
Var<S> dropout(const Var<S>& x, S rate, std::mt19937_64& rng) {
    if (rate <= S(0)) return x;
    if (rate >= S(1)) throw ConfigError("dropout rate must be < 1");
    std::bernoulli_distribution keep(1.0 - static_cast<double>(rate));
    Mat<S> m(x.rows(), x.cols());
    const S inv = S(1) / (S(1) - rate);
    for (Index i = 0; i < m.size(); ++i) m.data()[i] = keep(rng) ? inv : S(0);
    return mul_const(x, m);
}

// ------------------------------------------------------------------ convolution

namespace {

// Column matrix (C_in*9) x (H_out*W_out) for one channel-major image.
template <class S>
void im2col(const S* img, const ConvGeometry& g, Mat<S>& cols) {
    const Index oh = g.out_height(), ow = g.out_width();
    cols.setZero(g.channels * 9, oh * ow);
    for (Index c = 0; c < g.channels; ++c)
        for (Index ky = 0; ky < 3; ++ky)
            for (Index kx = 0; kx < 3; ++kx) {
                const Index row = c * 9 + ky * 3 + kx;
                for (Index oy = 0; oy < oh; ++oy) {
                    const Index iy = oy * g.stride + ky - 1;
                    if (iy < 0 || iy >= g.height) continue;
                    for (Index ox = 0; ox < ow; ++ox) {
                        const Index ix = ox * g.stride + kx - 1;
                        if (ix < 0 || ix >= g.width) continue;
                        cols(row, oy * ow + ox) = img[(c * g.height + iy) * g.width + ix];
                    }
                }
            }
}

template <class S>
void col2im_add(const Mat<S>& cols, const ConvGeometry& g, S* img) {
    const Index oh = g.out_height(), ow = g.out_width();
    for (Index c = 0; c < g.channels; ++c)
        for (Index ky = 0; ky < 3; ++ky)
            for (Index kx = 0; kx < 3; ++kx) {
                const Index row = c * 9 + ky * 3 + kx;
                for (Index oy = 0; oy < oh; ++oy) {
                    const Index iy = oy * g.stride + ky - 1;
                    if (iy < 0 || iy >= g.height) continue;
                    for (Index ox = 0; ox < ow; ++ox) {
                        const Index ix = ox * g.stride + kx - 1;
                        if (ix < 0 || ix >= g.width) continue;
                        img[(c * g.height + iy) * g.width + ix] += cols(row, oy * ow + ox);
                    }
                }
            }
}

}  // namespace

template <class S>
Var<S> conv3x3(const Var<S>& x, const Var<S>& weight, const Var<S>& bias, ConvGeometry geom) {
    if (x.cols() != geom.channels * geom.height * geom.width)
        throw DimensionError("conv3x3: input " + shape_str(x.shape()) + " does not hold " +
                             std::to_string(geom.channels) + "x" + std::to_string(geom.height) + "x" +
                             std::to_string(geom.width) + " images");
    if (weight.cols() != geom.channels * 9) dim_error("conv3x3 weight", x.shape(), weight.shape());
    const Index cout = weight.rows();
    if (bias.rows() != 1 || bias.cols() != cout) dim_error("conv3x3 bias", weight.shape(), bias.shape());
    const Index opix = geom.out_height() * geom.out_width();
    const Index n = x.rows();
    // one GEMM over the whole batch: columns of image i occupy [i*opix, (i+1)*opix)
    auto cols = std::make_shared<Mat<S>>(geom.channels * 9, n * opix);
    Mat<S> one;
    for (Index i = 0; i < n; ++i) {
        im2col(x.value().row(i).data(), geom, one);
        cols->middleCols(i * opix, opix) = one;
    }
    Mat<S> res = weight.value() * *cols;
    res.colwise() += bias.value().row(0).transpose();
    Mat<S> out(n, cout * opix);
    for (Index i = 0; i < n; ++i) Eigen::Map<Mat<S>>(out.row(i).data(), cout, opix) = res.middleCols(i * opix, opix);
    const Index ix = x.id(), iw = weight.id(), ib = bias.id();
    Index self = static_cast<Index>(x.tape()->size());
    return x.tape()->push(std::move(out), {x, weight, bias}, [=](Tape<S>& t) {
        const Mat<S>& g = t.grad(self);
        Mat<S> go(cout, n * opix);
        for (Index i = 0; i < n; ++i) go.middleCols(i * opix, opix) = Eigen::Map<const Mat<S>>(g.row(i).data(), cout, opix);
        if (t.requires_grad(ib)) t.grad(ib) += go.rowwise().sum().transpose();
        if (t.requires_grad(iw)) t.grad(iw).noalias() += go * cols->transpose();
        if (t.requires_grad(ix)) {
            const Mat<S> gc = t.value(iw).transpose() * go;
            Mat<S> block;
            for (Index i = 0; i < n; ++i) {
                block = gc.middleCols(i * opix, opix);
                col2im_add(block, geom, t.grad(ix).row(i).data());
            }
        }
    });
}

// ------------------------------------------------------------------ optimizers

template <class S>
void check_finite(const ParamStore<S>& params, const GradBuffer<S>& grads) {
    for (std::size_t i = 0; i < params.size(); ++i) {
        if (i >= grads.size() || grads[i].size() == 0) continue;
        if (!grads[i].allFinite())
            throw NumericalError("non-finite gradient for parameter " + params[i].name);
    }
}

template <class S>
void sgd_step(ParamStore<S>& params, const GradBuffer<S>& grads, const SgdConfig& cfg) {
    check_finite(params, grads);
    for (std::size_t i = 0; i < params.size(); ++i) {
        auto& p = params[i];
        if (!p.trainable || grads[i].size() == 0) continue;
        if (shape_of(grads[i]) != shape_of(p.value)) dim_error("sgd_step", shape_of(p.value), shape_of(grads[i]));
        p.value -= static_cast<S>(cfg.lr) * grads[i];
    }
}

template <class S>
void Adam<S>::step(ParamStore<S>& params, const GradBuffer<S>& grads) {
    check_finite(params, grads);
    if (m_.size() != params.size()) {
        m_ = params.zero_grads();
        v_ = params.zero_grads();
    }
    ++t_;
    const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
    const S b1 = static_cast<S>(cfg_.beta1), b2 = static_cast<S>(cfg_.beta2);
    const S step = static_cast<S>(cfg_.lr / bc1);
    const S eps = static_cast<S>(cfg_.eps);
    const S inv_sqrt_bc2 = static_cast<S>(1.0 / std::sqrt(bc2));
    for (std::size_t i = 0; i < params.size(); ++i) {
        auto& p = params[i];
        if (!p.trainable || grads[i].size() == 0) continue;
        if (shape_of(grads[i]) != shape_of(p.value)) dim_error("adam_step", shape_of(p.value), shape_of(grads[i]));
        m_[i] = b1 * m_[i] + (S(1) - b1) * grads[i];
        v_[i] = b2 * v_[i] + (S(1) - b2) * grads[i].cwiseAbs2();
        p.value.array() -= step * m_[i].array() / ((v_[i].array().sqrt() * inv_sqrt_bc2) + eps);
    }
}

template <class S>
double clip_global_norm(GradBuffer<S>& grads, double max_norm) {
    double sq = 0;
    for (const auto& g : grads)
        if (g.size()) sq += static_cast<double>(g.squaredNorm());
    const double norm = std::sqrt(sq);
    if (norm > max_norm && norm > 0) {
        const S f = static_cast<S>(max_norm / norm);
        for (auto& g : grads) g *= f;
    }
    return norm;
}

// ------------------------------------------------------------------ instantiation

#define SEQCL_INSTANTIATE(S)                                                                    \
    template class ParamStore<S>;                                                               \
    template class Var<S>;                                                                      \
    template class Tape<S>;                                                                     \
    template class Adam<S>;                                                                     \
    template Var<S> matmul(const Var<S>&, const Var<S>&);                                      \
    template Var<S> matmul_nt(const Var<S>&, const Var<S>&);                                   \
    template Var<S> transpose(const Var<S>&);                                                  \
    template Var<S> add(const Var<S>&, const Var<S>&);                                         \
    template Var<S> sub(const Var<S>&, const Var<S>&);                                         \
    template Var<S> mul(const Var<S>&, const Var<S>&);                                         \
    template Var<S> scale(const Var<S>&, S);                                                   \
    template Var<S> add_scalar(const Var<S>&, S);                                              \
    template Var<S> add_bias(const Var<S>&, const Var<S>&);                                    \
    template Var<S> mul_const(const Var<S>&, const Mat<S>&);                                   \
    template Var<S> exp(const Var<S>&);                                                        \
    template Var<S> log(const Var<S>&);                                                        \
    template Var<S> elu(const Var<S>&);                                                        \
    template Var<S> relu(const Var<S>&);                                                       \
    template Var<S> layer_norm(const Var<S>&);                                                 \
    template Var<S> layer_norm(const Var<S>&, const Var<S>&, const Var<S>&);                   \
    template Var<S> softmax_rows(const Var<S>&, const Mask*);                                  \
    template Var<S> normalize_rows(const Var<S>&, const Mask*, S);                             \
    template Var<S> performer_features(const Var<S>&, const Var<S>&, bool);                    \
    template Var<S> embedding_lookup(const Var<S>&, std::span<const Index>);                   \
    template Var<S> gather_rows(const Var<S>&, std::span<const Index>);                        \
    template Var<S> concat_rows(std::span<const Var<S>>);                                      \
    template Var<S> concat_cols(std::span<const Var<S>>);                                      \
    template Var<S> slice_cols(const Var<S>&, Index, Index);                                   \
    template Var<S> sum(const Var<S>&);                                                        \
    template Var<S> mean(const Var<S>&);                                                       \
    template Var<S> row_sum(const Var<S>&);                                                    \
    template Var<S> cross_entropy(const Var<S>&, std::span<const Index>);                      \
    template Var<S> mse(const Var<S>&, const Var<S>&);                                         \
    template Var<S> dropout(const Var<S>&, S, std::mt19937_64&);                               \
    template Var<S> conv3x3(const Var<S>&, const Var<S>&, const Var<S>&, ConvGeometry);        \
    template void sgd_step(ParamStore<S>&, const GradBuffer<S>&, const SgdConfig&);            \
    template void check_finite(const ParamStore<S>&, const GradBuffer<S>&);                    \
    template double clip_global_norm(GradBuffer<S>&, double);

SEQCL_INSTANTIATE(float)
SEQCL_INSTANTIATE(double)

#undef SEQCL_INSTANTIATE

}  // namespace seqcl
