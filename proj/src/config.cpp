#include "seqcl/config.hpp"

#include <fstream>
#include <set>

#include "seqcl/errors.hpp"

namespace seqcl {

using nlohmann::json;

std::string to_string(Placement p) {
    switch (p) {
        case Placement::after_stream: return "after_stream";
        case Placement::mid_stream: return "mid_stream";
        case Placement::all_moments: return "all_moments";
    }
    return "?";
}

Placement parse_placement(const std::string& name) {
    if (name == "after_stream") return Placement::after_stream;
    if (name == "mid_stream") return Placement::mid_stream;
    if (name == "all_moments") return Placement::all_moments;
    throw ConfigError("unknown test placement '" + name + "' (expected after_stream, mid_stream or all_moments)");
}

std::string to_string(EncoderKind k) { return k == EncoderKind::cnn ? "cnn" : "mlp"; }

EncoderKind parse_encoder(const std::string& name) {
    if (name == "mlp") return EncoderKind::mlp;
    if (name == "cnn") return EncoderKind::cnn;
    throw ConfigError("unknown encoder '" + name + "' (expected mlp or cnn)");
}

void RunConfig::validate() const {
    if (benchmark.universe < 1) throw ConfigError("benchmark.universe must be positive");
    if (!(benchmark.meta_train_fraction > 0 && benchmark.meta_train_fraction < 1))
        throw ConfigError("benchmark.meta_train_fraction must be in (0, 1)");
    if (episode.tasks < 1 || episode.shots_train < 1 || episode.shots_test < 1)
        throw ConfigError("episode tasks and shots must be positive");
    if (episode.code_length < 1 || episode.vocab < 0) throw ConfigError("episode vocab/code_length out of range");
    transformer.validate();
    train.validate();
    if (encoder_kind != "auto") parse_encoder(encoder_kind);
    if (eval.episodes < 0) throw ConfigError("eval.episodes must be >= 0");
    if (eval.offline.max_epochs < 0 || eval.offline.batch < 1 || eval.offline.repeats < 1 || !(eval.offline.lr > 0))
        throw ConfigError("eval.offline settings out of range");
}

json to_json(const RunConfig& c) {
    const auto& b = c.benchmark;
    const auto& t = c.transformer;
    const auto& tr = c.train;
    const auto& o = c.eval.offline;
    return json{
        {"seed", c.seed},
        {"threads", c.threads},
        {"out", c.out},
        {"benchmark",
         {{"family", b.family},
          {"universe", b.universe},
          {"meta_train_fraction", b.meta_train_fraction},
          {"seed", b.seed},
          {"sine",
           {{"grid_points", b.sine.grid_points},
            {"freq_min", b.sine.freq_min},
            {"freq_max", b.sine.freq_max},
            {"amp_min", b.sine.amp_min},
            {"amp_max", b.sine.amp_max},
            {"noise", b.sine.noise}}},
          {"prototype_dim", b.prototype_dim},
          {"prototype_noise", b.prototype_noise},
          {"manifest", b.manifest}}},
        {"episode",
         {{"tasks", c.episode.tasks},
          {"shots_train", c.episode.shots_train},
          {"shots_test", c.episode.shots_test},
          {"vocab", c.episode.vocab},
          {"code_length", c.episode.code_length}}},
        {"model",
         {{"n_layers", t.n_layers},
          {"d_model", t.d_model},
          {"n_heads", t.n_heads},
          {"d_head", t.d_head},
          {"d_mlp", t.d_mlp},
          {"backend", to_string(t.backend)},
          {"dropout", t.dropout},
          {"max_len", t.max_len},
          {"feature_dim", t.feature_dim},
          {"encoder",
           {{"kind", c.encoder_kind},
            {"hidden", c.encoder.hidden},
            {"channels", c.encoder.channels},
            {"normalize", c.encoder_norm == "auto" ? json("auto") : json(c.encoder_norm == "on")}}}}},
        {"train",
         {{"steps", tr.steps},
          {"batch_episodes", tr.batch_episodes},
          {"attn_horizon", tr.attn_horizon},
          {"attn_head_fraction", tr.attn_head_fraction},
          {"attn_weight", tr.attn_weight},
          {"lr", tr.adam.lr},
          {"beta1", tr.adam.beta1},
          {"beta2", tr.adam.beta2},
          {"eps", tr.adam.eps},
          {"clip_norm", tr.clip_norm},
          {"eval_every", tr.eval_every},
          {"eval_episodes", tr.eval_episodes},
          {"checkpoint_every", tr.checkpoint_every},
          {"log_every", tr.log_every},
          {"placement", to_string(tr.placement)}}},
        {"eval",
         {{"episodes", c.eval.episodes},
          {"offline", {{"max_epochs", o.max_epochs}, {"batch", o.batch}, {"lr", o.lr}, {"repeats", o.repeats}}}}}};
}

namespace {

// Reads known keys of one object and rejects the rest.
class Section {
public:
    Section(const json& j, std::string path) : j_(j), path_(std::move(path)) {
        if (!j_.is_object()) throw ConfigError(path_ + " must be an object");
    }
    void finish() const {
        for (const auto& [key, value] : j_.items())
            if (!seen_.count(key)) throw ConfigError("unknown config key " + where(key));
    }

    template <class T>
    void get(const std::string& key, T& out) {
        seen_.insert(key);
        if (!j_.contains(key)) return;
        try {
            out = j_.at(key).get<T>();
        } catch (const json::exception& e) {
            throw ConfigError("bad value for " + where(key) + ": " + e.what());
        }
    }

    Section sub(const std::string& key) {
        seen_.insert(key);
        static const json empty = json::object();
        return Section(j_.contains(key) ? j_.at(key) : empty, where(key));
    }

private:
    std::string where(const std::string& key) const { return path_.empty() ? key : path_ + "." + key; }

    const json& j_;
    std::string path_;
    std::set<std::string> seen_;
};

}  // namespace

RunConfig run_config_from_json(const json& j) {
    RunConfig c;
    {
        Section root(j, "");
        root.get("seed", c.seed);
        root.get("threads", c.threads);
        root.get("out", c.out);
        {
            Section b = root.sub("benchmark");
            b.get("family", c.benchmark.family);
            b.get("universe", c.benchmark.universe);
            b.get("meta_train_fraction", c.benchmark.meta_train_fraction);
            b.get("seed", c.benchmark.seed);
            b.get("prototype_dim", c.benchmark.prototype_dim);
            b.get("prototype_noise", c.benchmark.prototype_noise);
            b.get("manifest", c.benchmark.manifest);
            Section s = b.sub("sine");
            s.get("grid_points", c.benchmark.sine.grid_points);
            s.get("freq_min", c.benchmark.sine.freq_min);
            s.get("freq_max", c.benchmark.sine.freq_max);
            s.get("amp_min", c.benchmark.sine.amp_min);
            s.get("amp_max", c.benchmark.sine.amp_max);
            s.get("noise", c.benchmark.sine.noise);
            s.finish();
            b.finish();
        }
        {
            Section e = root.sub("episode");
            e.get("tasks", c.episode.tasks);
            e.get("shots_train", c.episode.shots_train);
            e.get("shots_test", c.episode.shots_test);
            e.get("vocab", c.episode.vocab);
            e.get("code_length", c.episode.code_length);
            e.finish();
        }
        {
            Section m = root.sub("model");
            std::string preset, backend = to_string(c.transformer.backend);
            m.get("preset", preset);
            if (!preset.empty()) c.transformer = TransformerConfig::preset(preset);
            m.get("n_layers", c.transformer.n_layers);
            m.get("d_model", c.transformer.d_model);
            m.get("n_heads", c.transformer.n_heads);
            m.get("d_head", c.transformer.d_head);
            m.get("d_mlp", c.transformer.d_mlp);
            m.get("backend", backend);
            c.transformer.backend = parse_backend(backend);
            m.get("dropout", c.transformer.dropout);
            m.get("max_len", c.transformer.max_len);
            m.get("feature_dim", c.transformer.feature_dim);
            Section enc = m.sub("encoder");
            enc.get("kind", c.encoder_kind);
            enc.get("hidden", c.encoder.hidden);
            enc.get("channels", c.encoder.channels);
            json norm = c.encoder_norm;
            enc.get("normalize", norm);
            if (norm.is_boolean())
                c.encoder_norm = norm.get<bool>() ? "on" : "off";
            else if (norm == "auto")
                c.encoder_norm = "auto";
            else
                throw ConfigError("model.encoder.normalize must be true, false or \"auto\"");
            enc.finish();
            m.finish();
        }
        {
            Section t = root.sub("train");
            std::string placement = to_string(c.train.placement);
            t.get("steps", c.train.steps);
            t.get("batch_episodes", c.train.batch_episodes);
            t.get("attn_horizon", c.train.attn_horizon);
            t.get("attn_head_fraction", c.train.attn_head_fraction);
            t.get("attn_weight", c.train.attn_weight);
            t.get("lr", c.train.adam.lr);
            t.get("beta1", c.train.adam.beta1);
            t.get("beta2", c.train.adam.beta2);
            t.get("eps", c.train.adam.eps);
            t.get("clip_norm", c.train.clip_norm);
            t.get("eval_every", c.train.eval_every);
            t.get("eval_episodes", c.train.eval_episodes);
            t.get("checkpoint_every", c.train.checkpoint_every);
            t.get("log_every", c.train.log_every);
            t.get("placement", placement);
            c.train.placement = parse_placement(placement);
            t.finish();
        }
        {
            Section e = root.sub("eval");
            e.get("episodes", c.eval.episodes);
            Section o = e.sub("offline");
            o.get("max_epochs", c.eval.offline.max_epochs);
            o.get("batch", c.eval.offline.batch);
            o.get("lr", c.eval.offline.lr);
            o.get("repeats", c.eval.offline.repeats);
            o.finish();
            e.finish();
        }
        root.finish();
    }
    c.validate();
    return c;
}

RunConfig load_run_config(const std::filesystem::path& path) {
    std::ifstream f(path);
    if (!f) throw ConfigError("cannot read config " + path.string());
    json j;
    try {
        j = json::parse(f);
    } catch (const json::exception& e) {
        throw ConfigError("config " + path.string() + " is not valid JSON: " + e.what());
    }
    return run_config_from_json(j);
}

void save_run_config(const std::filesystem::path& path, const RunConfig& cfg) {
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    std::ofstream f(path, std::ios::trunc);
    if (!f) throw IoError("cannot write " + path.string());
    f << to_json(cfg).dump(2) << '\n';
}

RunSetup make_setup(const RunConfig& cfg) {
    cfg.validate();
    const auto& b = cfg.benchmark;
    RunSetup s;
    s.family = make_family(b.family, b.seed, b.universe, b.sine, b.prototype_dim, b.prototype_noise, b.manifest);
    s.split = build_meta_split(s.family->universe_size(), b.meta_train_fraction, b.seed, cfg.episode.tasks);
    ModelConfig& m = s.model;
    m.transformer = cfg.transformer;
    m.encoder = cfg.encoder;
    m.input = s.family->input();
    if (cfg.encoder_kind == "auto")
        m.encoder.kind = m.input.kind == InputKind::image ? EncoderKind::cnn : EncoderKind::mlp;
    else
        m.encoder.kind = parse_encoder(cfg.encoder_kind);
    // per-example norm erases input scale, which vector regression needs
    m.encoder.normalize = cfg.encoder_norm == "auto" ? m.encoder.kind == EncoderKind::cnn : cfg.encoder_norm == "on";
    if (s.family->classification())
        m.vocab = cfg.episode.vocab > 0 ? cfg.episode.vocab : cfg.episode.tasks;
    else
        m.y_dim = s.family->y_dim();
    m.validate();
    return s;
}

EpisodeSource RunSetup::train_source(const RunConfig& cfg) const { return {family.get(), split.train, cfg.episode}; }

EvalSpec RunSetup::test_spec(const RunConfig& cfg) const {
    EvalSpec e;
    e.source = {family.get(), split.test, cfg.episode};
    e.episodes = cfg.eval.episodes;
    e.seed = derive_seed(cfg.seed, 0x7e57);
    e.threads = cfg.threads;
    return e;
}

}  // namespace seqcl
