#include "seqcl/model.hpp"

#include <cmath>

#include "seqcl/errors.hpp"

namespace seqcl {

void TransformerConfig::validate() const {
    if (n_layers < 1 || d_model < 1 || n_heads < 1 || d_head < 1 || d_mlp < 1)
        throw ConfigError("transformer sizes must be positive");
    if (n_heads * d_head != d_model)
        throw ConfigError("n_heads * d_head = " + std::to_string(n_heads * d_head) + " but d_model = " +
                          std::to_string(d_model));
    if (!(dropout >= 0 && dropout < 1)) throw ConfigError("dropout must be in [0, 1)");
    if (max_len < 1) throw ConfigError("max_len must be positive");
    if (feature_dim < 0) throw ConfigError("feature_dim must be >= 0");
}

TransformerConfig TransformerConfig::preset(const std::string& name) {
    TransformerConfig c;
    auto set = [&](Index l, Index d, Index h, Index dh, Index m) {
        c.n_layers = l;
        c.d_model = d;
        c.n_heads = h;
        c.d_head = dh;
        c.d_mlp = m;
    };
    if (name == "transformer")
        set(4, 512, 8, 64, 1024);
    else if (name == "small")
        set(2, 256, 4, 64, 512);
    else if (name == "small_wide")
        set(2, 512, 8, 64, 1024);
    else if (name == "xl")
        set(4, 1024, 16, 64, 2048);
    else
        throw ConfigError("unknown transformer preset '" + name + "'");
    return c;
}

void ModelConfig::validate() const {
    transformer.validate();
    if (input.dim < 1) throw ConfigError("model input dimension must be positive");
    if (y_dim == 0 && vocab < 1) throw ConfigError("classification model needs a vocabulary");
    if (encoder.kind == EncoderKind::cnn) {
        if (input.kind != InputKind::image || input.height < 1 || input.width < 1)
            throw ConfigError("cnn encoder needs image inputs");
        if (encoder.channels.empty()) throw ConfigError("cnn encoder needs at least one layer");
    }
}

namespace {

template <class S>
Mat<S> normal(Index rows, Index cols, double stddev, std::mt19937_64& rng) {
    std::normal_distribution<double> n01(0.0, stddev);
    Mat<S> m(rows, cols);
    for (Index i = 0; i < m.size(); ++i) m.data()[i] = static_cast<S>(n01(rng));
    return m;
}

template <class S>
Mat<S> row_of(Index n, S value) {
    return Mat<S>::Constant(1, n, value);
}

std::string layer_name(Index l, const char* leaf) { return "layer" + std::to_string(l) + "." + leaf; }

std::vector<ConvGeometry> cnn_geometry(const ModelConfig& c) {
    std::vector<ConvGeometry> g;
    Index ch = 1, h = c.input.height, w = c.input.width;
    for (std::size_t i = 0; i < c.encoder.channels.size(); ++i) {
        ConvGeometry geo{ch, h, w, i == 0 ? 1 : 2};
        g.push_back(geo);
        ch = c.encoder.channels[i];
        h = geo.out_height();
        w = geo.out_width();
    }
    return g;
}

template <class S>
RowVec<S> plain_layer_norm(const RowVec<S>& x, const Parameter<S>& g, const Parameter<S>& b) {
    const S mu = x.mean();
    const S var = (x.array() - mu).square().mean();
    RowVec<S> y = (x.array() - mu) / std::sqrt(var + S(1e-5));
    return y.cwiseProduct(g.value.row(0)) + b.value.row(0);
}

}  // namespace

template <class S>
Model<S>::Model(const ModelConfig& config, std::uint64_t seed) : config_(config) {
    config_.validate();
    std::mt19937_64 rng(seed);
    build(rng);
    bind();
}

template <class S>
Model<S>::Model(const ModelConfig& config, ParamStore<S> params, bool) : config_(config), params_(std::move(params)) {
    config_.validate();
    // reference layout: build a throwaway model and compare names and shapes
    Model<S> ref(config_, 0);
    if (ref.params_.size() != params_.size())
        throw FormatError("parameter set has " + std::to_string(params_.size()) + " arrays, model expects " +
                          std::to_string(ref.params_.size()));
    for (std::size_t i = 0; i < params_.size(); ++i) {
        const auto* p = params_.find(ref.params_[i].name);
        if (!p) throw FormatError("parameter set lacks " + ref.params_[i].name);
        if (shape_of(p->value) != shape_of(ref.params_[i].value))
            throw FormatError("parameter " + p->name + " has shape " + shape_str(shape_of(p->value)) + ", expected " +
                              shape_str(shape_of(ref.params_[i].value)));
    }
    bind();
}

template <class S>
Model<S> Model<S>::from_params(const ModelConfig& config, ParamStore<S> params) {
    return Model<S>(config, std::move(params), true);
}

template <class S>
Model<S>::Model(const Model& other) : config_(other.config_), params_(other.params_) {
    bind();
}

template <class S>
Model<S>& Model<S>::operator=(const Model& other) {
    if (this != &other) {
        config_ = other.config_;
        params_ = other.params_;
        bind();
    }
    return *this;
}

template <class S>
void Model<S>::build(std::mt19937_64& rng) {
    const auto& t = config_.transformer;
    const Index d = t.d_model;
    auto lin = [&](const std::string& name, Index in, Index out, double gain) {
        params_.add(name + ".weight", normal<S>(in, out, gain / std::sqrt(static_cast<double>(in)), rng));
        params_.add(name + ".bias", Mat<S>::Zero(1, out));
    };

    // input encoder
    if (config_.encoder.kind == EncoderKind::mlp) {
        const Index h = config_.encoder.hidden > 0 ? config_.encoder.hidden : d;
        const Index widths[4] = {config_.input.dim, h, h, d};
        for (int i = 0; i < 3; ++i) {
            const std::string p = "encoder.mlp" + std::to_string(i);
            lin(p, widths[i], widths[i + 1], std::sqrt(2.0));
            if (!config_.encoder.normalize) continue;
            params_.add(p + ".norm.gain", row_of<S>(widths[i + 1], S(1)));
            params_.add(p + ".norm.bias", Mat<S>::Zero(1, widths[i + 1]));
        }
    } else {
        auto geo = cnn_geometry(config_);
        for (std::size_t i = 0; i < geo.size(); ++i) {
            const Index cin = geo[i].channels, cout = config_.encoder.channels[i];
            const std::string p = "encoder.conv" + std::to_string(i);
            params_.add(p + ".weight", normal<S>(cout, cin * 9, std::sqrt(2.0 / static_cast<double>(cin * 9)), rng));
            params_.add(p + ".bias", Mat<S>::Zero(1, cout));
        }
        const auto& last = geo.back();
        const Index flat = config_.encoder.channels.back() * last.out_height() * last.out_width();
        lin("encoder.project", flat, d, 1.0);
    }

    // token and position embeddings
    if (config_.vocab > 0) params_.add("embed.label", normal<S>(config_.vocab, d, 1.0, rng));
    if (config_.y_dim > 0) lin("embed.target", config_.y_dim, d, 1.0);
    params_.add("embed.position", normal<S>(t.max_len, d, 0.1, rng));

    // decoder blocks
    const double out_gain = 1.0 / std::sqrt(2.0 * static_cast<double>(t.n_layers));
    for (Index l = 0; l < t.n_layers; ++l) {
        params_.add(layer_name(l, "ln1.gain"), row_of<S>(d, S(1)));
        params_.add(layer_name(l, "ln1.bias"), Mat<S>::Zero(1, d));
        params_.add(layer_name(l, "attn.q"), normal<S>(d, d, 1.0 / std::sqrt(static_cast<double>(d)), rng));
        params_.add(layer_name(l, "attn.k"), normal<S>(d, d, 1.0 / std::sqrt(static_cast<double>(d)), rng));
        params_.add(layer_name(l, "attn.v"), normal<S>(d, d, 1.0 / std::sqrt(static_cast<double>(d)), rng));
        lin(layer_name(l, "attn.out"), d, d, out_gain);
        params_.add(layer_name(l, "ln2.gain"), row_of<S>(d, S(1)));
        params_.add(layer_name(l, "ln2.bias"), Mat<S>::Zero(1, d));
        lin(layer_name(l, "mlp.in"), d, t.d_mlp, std::sqrt(2.0));
        lin(layer_name(l, "mlp.out"), t.d_mlp, d, out_gain);
        if (t.backend == Backend::performer)
            params_.add(layer_name(l, "attn.features"),
                        orthogonal_gaussian_projection<S>(t.kernel_features(), t.d_head, rng), false);
    }
    params_.add("final_norm.gain", row_of<S>(d, S(1)));
    params_.add("final_norm.bias", Mat<S>::Zero(1, d));

    // small heads: near-uniform initial predictions
    if (config_.vocab > 0) lin("head.logits", d, config_.vocab, 0.1);
    if (config_.y_dim > 0) lin("head.regress", d, config_.y_dim, 0.1);
}

template <class S>
void Model<S>::bind() {
    const auto& t = config_.transformer;
    layers_.clear();
    for (Index l = 0; l < t.n_layers; ++l) {
        auto at = [&](const char* leaf) -> const Parameter<S>* { return &params_.at(layer_name(l, leaf)); };
        LayerRefs r{at("ln1.gain"),       at("ln1.bias"),       at("attn.q"),       at("attn.k"),
                    at("attn.v"),         at("attn.out.weight"), at("attn.out.bias"), at("ln2.gain"),
                    at("ln2.bias"),       at("mlp.in.weight"),  at("mlp.in.bias"),  at("mlp.out.weight"),
                    at("mlp.out.bias"),   nullptr};
        if (t.backend == Backend::performer) r.features = at("attn.features");
        layers_.push_back(r);
    }
    label_table_ = params_.find("embed.label");
    position_table_ = &params_.at("embed.position");
    final_g_ = &params_.at("final_norm.gain");
    final_b_ = &params_.at("final_norm.bias");
}

template <class S>
Var<S> Model<S>::linear(Tape<S>& tape, const Var<S>& x, const std::string& prefix) const {
    return add_bias(matmul(x, tape.param(params_.at(prefix + ".weight"))), tape.param(params_.at(prefix + ".bias")));
}

template <class S>
KernelFeatureMap<S> Model<S>::feature_map(Index layer) const {
    KernelFeatureMap<S> phi;
    phi.kind = config_.transformer.backend;
    if (phi.kind == Backend::performer) phi.projection = layers_[static_cast<std::size_t>(layer)].features->value;
    return phi;
}

template <class S>
Index Model<S>::position_row(Index pos) const {
    const Index max_len = config_.transformer.max_len;
    if (pos < max_len) return pos;
    if (config_.transformer.backend == Backend::softmax)
        throw CapacityError("position " + std::to_string(pos) + " exceeds max_len " + std::to_string(max_len) +
                            " of the softmax model");
    return pos % max_len;
}

template <class S>
Var<S> Model<S>::encode(Tape<S>& tape, const Mat<S>& x_rows) const {
    if (x_rows.cols() != config_.input.dim)
        throw DimensionError("encoder expects inputs of width " + std::to_string(config_.input.dim) + ", got " +
                             std::to_string(x_rows.cols()));
    Var<S> h = tape.constant(x_rows);
    if (config_.encoder.kind == EncoderKind::mlp) {
        for (int i = 0; i < 3; ++i) {
            const std::string p = "encoder.mlp" + std::to_string(i);
            h = linear(tape, h, p);
            if (config_.encoder.normalize)
                h = layer_norm(h, tape.param(params_.at(p + ".norm.gain")), tape.param(params_.at(p + ".norm.bias")));
            h = relu(h);
        }
        return h;
    }
    auto geo = cnn_geometry(config_);
    for (std::size_t i = 0; i < geo.size(); ++i) {
        const std::string p = "encoder.conv" + std::to_string(i);
        h = conv3x3(h, tape.param(params_.at(p + ".weight")), tape.param(params_.at(p + ".bias")), geo[i]);
        if (config_.encoder.normalize) h = layer_norm(h);  // per image, over the whole feature map
        h = relu(h);
    }
    return linear(tape, h, "encoder.project");
}

template <class S>
Mat<S> Model<S>::encode_rows(const Mat<S>& x_rows) const {
    Tape<S> tape(false);
    return encode(tape, x_rows).value();
}

template <class S>
Var<S> Model<S>::embed(Tape<S>& tape, const TokenSequence& seq) const {
    const Index n_x = seq.x_rows.rows();
    const Index n_label = label_table_ ? label_table_->value.rows() : 0;
    std::vector<Var<S>> sources;
    if (n_x > 0) sources.push_back(encode(tape, seq.x_rows.template cast<S>()));
    if (label_table_) sources.push_back(tape.param(*label_table_));
    if (config_.y_dim > 0 && seq.y_rows.rows() > 0)
        sources.push_back(linear(tape, tape.constant(seq.y_rows.template cast<S>()), "embed.target"));
    Var<S> table = concat_rows<S>(sources);

    std::vector<Index> rows(seq.kinds.size()), pos(seq.kinds.size());
    for (std::size_t i = 0; i < seq.kinds.size(); ++i) {
        switch (seq.kinds[i]) {
            case TokenKind::input: rows[i] = seq.refs[i]; break;
            case TokenKind::label:
                if (!label_table_) throw ContractError("label token fed to a model without a vocabulary");
                if (seq.refs[i] < 0 || seq.refs[i] >= n_label)
                    throw LookupError("label token " + std::to_string(seq.refs[i]) + " outside vocabulary");
                rows[i] = n_x + seq.refs[i];
                break;
            case TokenKind::target:
                if (config_.y_dim == 0) throw ContractError("target token fed to a classification model");
                rows[i] = n_x + n_label + seq.refs[i];
                break;
        }
        pos[i] = position_row(seq.positions[i]);
    }
    return add(gather_rows(table, rows), embedding_lookup(tape.param(*position_table_), pos));
}

template <class S>
ForwardResult<S> Model<S>::forward(Tape<S>& tape, const TokenSequence& seq, const ForwardOptions& opt) const {
    const auto& t = config_.transformer;
    const S drop = opt.train ? static_cast<S>(t.dropout) : S(0);
    if (drop > S(0) && !opt.rng) throw ContractError("dropout needs an rng");
    auto dropped = [&](const Var<S>& x) { return drop > S(0) ? dropout(x, drop, *opt.rng) : x; };
    const bool performer = t.backend == Backend::performer;
    const S qk_scale = performer ? static_cast<S>(std::pow(static_cast<double>(t.d_head), -0.25)) : S(1);

    ForwardResult<S> out;
    Var<S> h = dropped(embed(tape, seq));
    for (Index l = 0; l < t.n_layers; ++l) {
        const LayerRefs& r = layers_[static_cast<std::size_t>(l)];
        Var<S> a = layer_norm(h, tape.param(*r.ln1_g), tape.param(*r.ln1_b));
        Var<S> q = matmul(a, tape.param(*r.wq));
        Var<S> k = matmul(a, tape.param(*r.wk));
        Var<S> v = matmul(a, tape.param(*r.wv));
        if (performer) {
            q = scale(q, qk_scale);
            k = scale(k, qk_scale);
        }
        const KernelFeatureMap<S> phi = feature_map(l);
        std::vector<Var<S>> heads;
        std::vector<Var<S>> kept;
        for (Index hd = 0; hd < t.n_heads; ++hd) {
            Var<S> qh = slice_cols(q, hd * t.d_head, t.d_head);
            Var<S> kh = slice_cols(k, hd * t.d_head, t.d_head);
            Var<S> vh = slice_cols(v, hd * t.d_head, t.d_head);
            AttentionResult<S> res = t.backend == Backend::softmax ? softmax_attention(qh, kh, vh, seq.mask)
                                                                   : kernel_attention(qh, kh, vh, phi, seq.mask);
            heads.push_back(res.output);
            if (opt.keep_weights) kept.push_back(res.weights);
        }
        Var<S> att = add_bias(matmul(concat_cols<S>(heads), tape.param(*r.wo)), tape.param(*r.bo));
        h = add(h, dropped(att));
        Var<S> m = layer_norm(h, tape.param(*r.ln2_g), tape.param(*r.ln2_b));
        m = relu(add_bias(matmul(m, tape.param(*r.w1)), tape.param(*r.b1)));
        m = add_bias(matmul(m, tape.param(*r.w2)), tape.param(*r.b2));
        h = add(h, dropped(m));
        if (opt.keep_weights) out.weights.push_back(std::move(kept));
    }
    out.hidden = layer_norm(h, tape.param(*final_g_), tape.param(*final_b_));
    return out;
}

template <class S>
Var<S> Model<S>::logits(const Var<S>& hidden_rows) const {
    if (config_.vocab == 0) throw ContractError("model has no token head");
    return linear(*hidden_rows.tape(), hidden_rows, "head.logits");
}

template <class S>
Var<S> Model<S>::regress(const Var<S>& hidden_rows) const {
    if (config_.y_dim == 0) throw ContractError("model has no regression head");
    return linear(*hidden_rows.tape(), hidden_rows, "head.regress");
}

template <class S>
RowVec<S> Model<S>::embed_input(const Eigen::VectorXd& x) const {
    Mat<S> row = x.transpose().template cast<S>();
    return encode_rows(row).row(0);
}

template <class S>
RowVec<S> Model<S>::embed_label(Index token) const {
    if (!label_table_) throw ContractError("model has no vocabulary");
    if (token < 0 || token >= label_table_->value.rows())
        throw LookupError("label token " + std::to_string(token) + " outside vocabulary");
    return label_table_->value.row(token);
}

template <class S>
RowVec<S> Model<S>::embed_target(const Eigen::VectorXd& y) const {
    if (config_.y_dim == 0) throw ContractError("model has no target projection");
    if (y.size() != config_.y_dim) throw DimensionError("target of width " + std::to_string(y.size()));
    const auto& w = params_.at("embed.target.weight").value;
    const auto& b = params_.at("embed.target.bias").value;
    return y.transpose().template cast<S>() * w + b.row(0);
}

template <class S>
RowVec<S> Model<S>::logits(const RowVec<S>& hidden) const {
    return hidden * params_.at("head.logits.weight").value + params_.at("head.logits.bias").value.row(0);
}

template <class S>
RowVec<S> Model<S>::regress(const RowVec<S>& hidden) const {
    return hidden * params_.at("head.regress.weight").value + params_.at("head.regress.bias").value.row(0);
}

// ---------------------------------------------------------------- recurrent form

template <class S>
LearnerState<S>::LearnerState(const Model<S>& model) : backend_(model.config().transformer.backend) {
    const auto& t = model.config().transformer;
    for (Index l = 0; l < t.n_layers; ++l) {
        if (backend_ == Backend::softmax) {
            softmax_.emplace_back(static_cast<std::size_t>(t.n_heads), SoftmaxAttnState<S>(t.d_head));
        } else {
            const Index r = model.feature_map(l).feature_dim(t.d_head);
            kernel_.emplace_back(static_cast<std::size_t>(t.n_heads), KetAttnState<S>(r, t.d_head));
        }
    }
}

template <class S>
std::size_t LearnerState<S>::bytes() const {
    std::size_t n = 0;
    for (const auto& layer : softmax_)
        for (const auto& h : layer) n += h.bytes();
    for (const auto& layer : kernel_)
        for (const auto& h : layer) n += h.bytes();
    return n;
}

template <class S>
std::uint64_t LearnerState<S>::checksum() const {
    std::uint64_t hash = 1469598103934665603ULL;
    auto mix = [&](const void* data, std::size_t len) {
        const auto* p = static_cast<const unsigned char*>(data);
        for (std::size_t i = 0; i < len; ++i) {
            hash ^= p[i];
            hash *= 1099511628211ULL;
        }
    };
    mix(&position_, sizeof(position_));
    for (const auto& layer : softmax_)
        for (const auto& h : layer) {
            const Mat<S> k = h.keys(), v = h.values();
            mix(k.data(), static_cast<std::size_t>(k.size()) * sizeof(S));
            mix(v.data(), static_cast<std::size_t>(v.size()) * sizeof(S));
        }
    for (const auto& layer : kernel_)
        for (const auto& h : layer)
            mix(h.accumulator().data(), static_cast<std::size_t>(h.accumulator().size()) * sizeof(S));
    return hash;
}

template <class S>
const SoftmaxAttnState<S>& LearnerState<S>::softmax_head(Index layer, Index head) const {
    return softmax_.at(static_cast<std::size_t>(layer)).at(static_cast<std::size_t>(head));
}

template <class S>
const KetAttnState<S>& LearnerState<S>::kernel_head(Index layer, Index head) const {
    return kernel_.at(static_cast<std::size_t>(layer)).at(static_cast<std::size_t>(head));
}

template <class S>
RowVec<S> step_token(const Model<S>& model, LearnerState<S>& state, const RowVec<S>& embedding) {
    const auto& t = model.config().transformer;
    if (embedding.cols() != t.d_model) throw DimensionError("token embedding of width " + std::to_string(embedding.cols()));
    const Index row = model.position_row(state.position_);
    const bool performer = t.backend == Backend::performer;
    const S qk_scale = performer ? static_cast<S>(std::pow(static_cast<double>(t.d_head), -0.25)) : S(1);

    RowVec<S> h = embedding + model.position_table().value.row(row);
    for (Index l = 0; l < t.n_layers; ++l) {
        const auto& r = model.layer(l);
        const RowVec<S> a = plain_layer_norm<S>(h, *r.ln1_g, *r.ln1_b);
        RowVec<S> q = a * r.wq->value, k = a * r.wk->value;
        const RowVec<S> v = a * r.wv->value;
        if (performer) {
            q *= qk_scale;
            k *= qk_scale;
        }
        RowVec<S> heads(t.d_model);
        const KernelFeatureMap<S> phi = model.feature_map(l);
        for (Index hd = 0; hd < t.n_heads; ++hd) {
            const auto seg = Eigen::seqN(hd * t.d_head, t.d_head);
            const std::size_t li = static_cast<std::size_t>(l), hi = static_cast<std::size_t>(hd);
            if (t.backend == Backend::softmax)
                heads(seg) = state.softmax_[li][hi].step(q(seg), k(seg), v(seg));
            else
                heads(seg) = state.kernel_[li][hi].step(q(seg), k(seg), v(seg), phi);
        }
        h += heads * r.wo->value + r.bo->value.row(0);
        const RowVec<S> m = plain_layer_norm<S>(h, *r.ln2_g, *r.ln2_b);
        const RowVec<S> hidden = (m * r.w1->value + r.b1->value.row(0)).cwiseMax(S(0));
        h += hidden * r.w2->value + r.b2->value.row(0);
    }
    ++state.position_;
    return plain_layer_norm<S>(h, model.final_gain(), model.final_bias());
}

template <class S>
void learn_example(const Model<S>& model, LearnerState<S>& state, const Example& ex, const ClassCodebook* codebook) {
    step_token(model, state, model.embed_input(ex.x));
    if (model.config().classification()) {
        if (!codebook) throw ContractError("classification example needs a codebook");
        for (Index v : codebook->codes.at(static_cast<std::size_t>(ex.label))) step_token(model, state, model.embed_label(v));
    } else {
        step_token(model, state, model.embed_target(ex.y));
    }
}

template <class S>
Prediction<S> predict_test(const Model<S>& model, const LearnerState<S>& state, const Eigen::VectorXd& x,
                           Index code_length) {
    LearnerState<S> scratch = state;
    Prediction<S> out;
    RowVec<S> h = step_token(model, scratch, model.embed_input(x));
    if (!model.config().classification()) {
        out.regression = model.regress(h);
        return out;
    }
    for (Index c = 0; c < code_length; ++c) {
        RowVec<S> z = model.logits(h);
        if (c == 0) {
            RowVec<S> p = (z.array() - z.maxCoeff()).exp();
            out.distribution = p / p.sum();
        }
        Index best = 0;
        z.maxCoeff(&best);
        out.code.push_back(best);
        if (c + 1 < code_length) h = step_token(model, scratch, model.embed_label(best));
    }
    return out;
}

#define SEQCL_INSTANTIATE(S)                                                                                   \
    template class Model<S>;                                                                                   \
    template class LearnerState<S>;                                                                            \
    template RowVec<S> step_token(const Model<S>&, LearnerState<S>&, const RowVec<S>&);                        \
    template void learn_example(const Model<S>&, LearnerState<S>&, const Example&, const ClassCodebook*);      \
    template Prediction<S> predict_test(const Model<S>&, const LearnerState<S>&, const Eigen::VectorXd&, Index);

SEQCL_INSTANTIATE(float)
SEQCL_INSTANTIATE(double)

#undef SEQCL_INSTANTIATE

}  // namespace seqcl
