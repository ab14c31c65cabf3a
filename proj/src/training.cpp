#include "seqcl/training.hpp"

#include <chrono>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <numeric>

#include "seqcl/checkpoint.hpp"
#include "seqcl/errors.hpp"
#include "seqcl/parallel.hpp"

namespace seqcl {

void TrainConfig::validate() const {
    if (steps < 0) throw ConfigError("steps must be >= 0");
    if (batch_episodes < 1) throw ConfigError("batch_episodes must be >= 1");
    if (!(attn_horizon >= 0 && attn_horizon <= 1)) throw ConfigError("attention-loss horizon must be in [0, 1]");
    if (!(attn_head_fraction >= 0 && attn_head_fraction <= 1)) throw ConfigError("attention head fraction must be in [0, 1]");
    if (attn_weight < 0) throw ConfigError("attention-loss weight must be >= 0");
    if (!(adam.lr > 0)) throw ConfigError("learning rate must be positive");
    if (clip_norm < 0) throw ConfigError("clip norm must be >= 0");
    if (eval_every < 0 || eval_episodes < 0 || checkpoint_every < 0 || log_every < 1)
        throw ConfigError("eval/checkpoint/log cadence must be non-negative");
}

long TrainConfig::attn_horizon_steps() const {
    return static_cast<long>(std::llround(attn_horizon * static_cast<double>(steps)));
}

Episode EpisodeSource::sample(std::uint64_t seed) const {
    if (!family) throw ContractError("episode source has no family");
    EpisodeSpec s = spec;
    s.seed = seed;
    return sample_episode(s, *family, pool);
}

template <class S>
Var<S> meta_loss(const Var<S>& out, const TokenSequence& seq, bool classification) {
    if (seq.targets.empty()) throw ContractError("meta_loss: episode has no test targets");
    if (out.rows() != static_cast<Index>(seq.targets.size()))
        throw DimensionError("meta_loss: " + std::to_string(out.rows()) + " output rows for " +
                             std::to_string(seq.targets.size()) + " targets");
    if (classification) {
        std::vector<Index> tokens;
        for (const auto& t : seq.targets) tokens.push_back(t.token);
        return sum(cross_entropy(out, tokens));
    }
    Mat<S> y(out.rows(), out.cols());
    for (std::size_t i = 0; i < seq.targets.size(); ++i)
        y.row(static_cast<Index>(i)) = seq.y_targets.row(seq.targets[i].y_row).template cast<S>();
    Var<S> diff = sub(out, out.tape()->constant(std::move(y)));
    return scale(sum(mul(diff, diff)), S(1) / static_cast<S>(out.cols()));
}

namespace {

struct SpanQuery {
    std::vector<Index> rows;
    Mat<double> span;  // Q×T indicator of the own-task span
};

SpanQuery span_queries(const TokenSequence& seq) {
    SpanQuery sq;
    sq.span = Mat<double>::Zero(static_cast<Index>(seq.queries.size()), seq.length());
    for (std::size_t i = 0; i < seq.queries.size(); ++i) {
        const auto& q = seq.queries[i];
        const auto [begin, end] = seq.task_spans.at(static_cast<std::size_t>(q.task));
        if (begin < 0 || end <= begin) throw ContractError("attention loss: empty span for task " + std::to_string(q.task));
        sq.rows.push_back(q.positions.front());
        sq.span.row(static_cast<Index>(i)).segment(begin, end - begin).setOnes();
    }
    return sq;
}

}  // namespace

template <class S>
Var<S> attention_loss(const std::vector<std::vector<Var<S>>>& weights, const TokenSequence& seq,
                      const std::vector<std::pair<Index, Index>>& heads) {
    if (heads.empty()) throw ContractError("attention loss needs at least one head");
    if (seq.queries.empty()) throw ContractError("attention loss needs test queries");
    const SpanQuery sq = span_queries(seq);
    const Mat<S> span = sq.span.template cast<S>();
    std::vector<Var<S>> parts;
    for (const auto& [l, h] : heads) {
        const Var<S>& w = weights.at(static_cast<std::size_t>(l)).at(static_cast<std::size_t>(h));
        parts.push_back(sum(log(row_sum(mul_const(gather_rows(w, sq.rows), span)))));
    }
    Var<S> total = parts.size() == 1 ? parts[0] : sum(concat_rows<S>(parts));
    return scale(total, S(-1) / static_cast<S>(heads.size() * sq.rows.size()));
}

double span_attention_mass(const std::vector<std::vector<Mat<double>>>& weights, const TokenSequence& seq,
                           const std::vector<std::pair<Index, Index>>& heads) {
    const SpanQuery sq = span_queries(seq);
    double total = 0;
    for (const auto& [l, h] : heads) {
        const Mat<double>& w = weights.at(static_cast<std::size_t>(l)).at(static_cast<std::size_t>(h));
        for (std::size_t i = 0; i < sq.rows.size(); ++i)
            total += w.row(sq.rows[i]).dot(sq.span.row(static_cast<Index>(i)));
    }
    return total / static_cast<double>(heads.size() * sq.rows.size());
}

std::vector<std::pair<Index, Index>> select_attention_heads(Index n_layers, Index n_heads, double fraction,
                                                            std::uint64_t seed) {
    const auto per_layer = static_cast<Index>(std::llround(fraction * static_cast<double>(n_heads)));
    std::mt19937_64 rng(derive_seed(seed, 0xa77e));
    std::vector<std::pair<Index, Index>> out;
    for (Index l = 0; l < n_layers; ++l) {
        std::vector<Index> ids(static_cast<std::size_t>(n_heads));
        std::iota(ids.begin(), ids.end(), 0);
        std::shuffle(ids.begin(), ids.end(), rng);
        ids.resize(static_cast<std::size_t>(per_layer));
        std::sort(ids.begin(), ids.end());
        for (Index h : ids) out.emplace_back(l, h);
    }
    return out;
}

template <class S>
EpisodeLoss<S> episode_objective(const Model<S>& model, Tape<S>& tape, const TokenSequence& seq,
                                 const ForwardOptions& opt, const std::vector<std::pair<Index, Index>>* attn_heads,
                                 double attn_weight) {
    ForwardOptions fo = opt;
    const bool with_attn = attn_heads && !attn_heads->empty() && attn_weight > 0;
    fo.keep_weights = fo.keep_weights || with_attn;
    ForwardResult<S> fwd = model.forward(tape, seq, fo);
    std::vector<Index> rows;
    for (const auto& t : seq.targets) rows.push_back(t.position);
    Var<S> h = gather_rows(fwd.hidden, rows);
    const bool cls = model.config().classification();
    EpisodeLoss<S> out;
    out.targets = static_cast<Index>(rows.size());
    out.meta = meta_loss(cls ? model.logits(h) : model.regress(h), seq, cls);
    out.total = scale(out.meta, S(1) / static_cast<S>(out.targets));
    if (with_attn) {
        out.attn = attention_loss(fwd.weights, seq, *attn_heads);
        out.total = add(out.total, scale(out.attn, static_cast<S>(attn_weight)));
    }
    return out;
}

template <class S>
double validation_loss(const Model<S>& model, const std::vector<TokenSequence>& episodes, int threads) {
    std::vector<double> loss(episodes.size()), count(episodes.size());
    parallel_for(episodes.size(), threads, [&](std::size_t i) {
        Tape<S> tape(false);
        auto obj = episode_objective(model, tape, episodes[i], {}, nullptr, 0.0);
        loss[i] = static_cast<double>(obj.meta.item());
        count[i] = static_cast<double>(obj.targets);
    });
    return std::accumulate(loss.begin(), loss.end(), 0.0) / std::accumulate(count.begin(), count.end(), 0.0);
}

template <class S>
TrainResult train_episodic(Model<S>& model, const EpisodeSource& source, const TrainConfig& cfg,
                           const TrainOutput& out, const EpisodeObjective<S>& objective) {
    cfg.validate();
    const int threads = resolve_threads(cfg.threads);
    const long horizon = cfg.attn_horizon_steps();
    const auto batch = static_cast<std::size_t>(cfg.batch_episodes);

    std::vector<Episode> val_set;
    std::vector<std::uint64_t> val_seeds;
    if (cfg.eval_every > 0 && cfg.eval_episodes > 0)
        for (Index i = 0; i < cfg.eval_episodes; ++i) {
            val_seeds.push_back(derive_seed(cfg.seed ^ 0x7a11da7eULL, static_cast<std::uint64_t>(i)));
            val_set.push_back(source.sample(val_seeds.back()));
        }
    auto validate_now = [&] {
        std::vector<double> loss(val_set.size()), count(val_set.size());
        parallel_for(val_set.size(), threads, [&](std::size_t i) {
            Tape<S> tape(false);
            auto obj = objective(model, tape, {val_set[i], val_seeds[i], false, false});
            loss[i] = static_cast<double>(obj.meta.item());
            count[i] = static_cast<double>(obj.targets);
        });
        return std::accumulate(loss.begin(), loss.end(), 0.0) / std::accumulate(count.begin(), count.end(), 0.0);
    };

    std::ofstream metrics, val_log;
    if (!out.dir.empty()) {
        std::filesystem::create_directories(out.dir);
        metrics.open(out.dir / "metrics.csv", std::ios::trunc);
        metrics << "step,total_loss,meta_loss,attn_loss,episodes_per_sec\n";
        val_log.open(out.dir / "validation.csv", std::ios::trunc);
        val_log << "step,val_loss\n";
    }

    TrainResult result;
    Adam<S> opt(cfg.adam);
    ParamStore<S> best;
    if (!val_set.empty() && cfg.steps > 0) {
        const double v0 = validate_now();
        result.validation.push_back({0, v0});
        if (val_log.is_open()) val_log << 0 << ',' << std::setprecision(9) << v0 << '\n' << std::flush;
    }
    for (long step = 0; step < cfg.steps; ++step) {
        const auto t0 = std::chrono::steady_clock::now();
        const bool attn_on = step < horizon && cfg.attn_weight > 0;
        std::vector<GradBuffer<S>> grads(batch);
        std::vector<double> total(batch), meta(batch), attn(batch);
        parallel_for(batch, threads, [&](std::size_t i) {
            const std::uint64_t s =
                derive_seed(cfg.seed, static_cast<std::uint64_t>(step) * batch + static_cast<std::uint64_t>(i));
            const Episode ep = source.sample(s);
            Tape<S> tape;
            auto obj = objective(model, tape, {ep, s, true, attn_on});
            tape.backward(obj.total);
            grads[i] = model.params().zero_grads();
            tape.accumulate_param_grads(grads[i]);
            total[i] = static_cast<double>(obj.total.item());
            meta[i] = static_cast<double>(obj.meta.item()) / static_cast<double>(obj.targets);
            attn[i] = obj.attn.valid() ? static_cast<double>(obj.attn.item()) : 0.0;
        });
        // ordered reduction
        GradBuffer<S> g = std::move(grads[0]);
        for (std::size_t i = 1; i < batch; ++i)
            for (std::size_t p = 0; p < g.size(); ++p) g[p] += grads[i][p];
        const S inv = S(1) / static_cast<S>(batch);
        for (auto& m : g) m *= inv;

        StepMetrics sm;
        sm.step = step;
        for (std::size_t i = 0; i < batch; ++i) {
            sm.total_loss += total[i] / static_cast<double>(batch);
            sm.meta_loss += meta[i] / static_cast<double>(batch);
            sm.attn_loss += attn[i] / static_cast<double>(batch);
        }
        // checkpoints already on disk are left alone
        if (!std::isfinite(sm.total_loss))
            throw NumericalError("non-finite meta-loss at step " + std::to_string(step));
        check_finite(model.params(), g);
        if (cfg.clip_norm > 0) clip_global_norm(g, cfg.clip_norm);
        opt.step(model.params(), g);

        const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
        sm.episodes_per_sec = secs > 0 ? static_cast<double>(batch) / secs : 0.0;
        result.history.push_back(sm);
        if (metrics.is_open() && (step % cfg.log_every == 0 || step + 1 == cfg.steps))
            metrics << step << ',' << std::setprecision(9) << sm.total_loss << ',' << sm.meta_loss << ','
                    << sm.attn_loss << ',' << std::setprecision(5) << sm.episodes_per_sec << '\n'
                    << std::flush;

        const bool eval_due = !val_set.empty() && ((step + 1) % cfg.eval_every == 0 || step + 1 == cfg.steps);
        if (eval_due) {
            const double v = validate_now();
            result.validation.push_back({step + 1, v});
            if (val_log.is_open()) val_log << step + 1 << ',' << std::setprecision(9) << v << '\n' << std::flush;
            if (result.best_step < 0 || v < result.best_loss) {
                result.best_step = step + 1;
                result.best_loss = v;
                best = model.params();
                if (!out.dir.empty()) save_checkpoint(out.dir / "best.ckpt", best, out.metadata);
            }
        }
        if (!out.dir.empty() && cfg.checkpoint_every > 0 && (step + 1) % cfg.checkpoint_every == 0)
            save_checkpoint(out.dir / "last.ckpt", model.params(), out.metadata);
        if (out.on_step) out.on_step(sm);
    }
    if (!out.dir.empty()) save_checkpoint(out.dir / "last.ckpt", model.params(), out.metadata);
    if (result.best_step >= 0)
        for (std::size_t i = 0; i < best.size(); ++i) model.params()[i].value = best[i].value;
    return result;
}

template <class S>
TrainResult meta_train(Model<S>& model, const EpisodeSource& source, const TrainConfig& cfg, const TrainOutput& out) {
    const auto& tc = model.config().transformer;
    const auto heads = select_attention_heads(tc.n_layers, tc.n_heads, cfg.attn_head_fraction, cfg.seed);
    const Placement placement = cfg.placement;
    const double weight = cfg.attn_weight;
    EpisodeObjective<S> objective = [&heads, placement, weight](const Model<S>& m, Tape<S>& tape,
                                                                const ObjectiveContext& ctx) {
        const TokenSequence seq = assemble_tokens(ctx.episode, {placement, derive_seed(ctx.seed, 1)});
        std::mt19937_64 rng(derive_seed(ctx.seed, 2));
        const bool attn = ctx.attn_on && !heads.empty();
        return episode_objective(m, tape, seq, {ctx.train, &rng, false}, attn ? &heads : nullptr, weight);
    };
    return train_episodic(model, source, cfg, out, objective);
}

#define SEQCL_INSTANTIATE(S)                                                                                    \
    template Var<S> meta_loss(const Var<S>&, const TokenSequence&, bool);                                       \
    template Var<S> attention_loss(const std::vector<std::vector<Var<S>>>&, const TokenSequence&,               \
                                   const std::vector<std::pair<Index, Index>>&);                                \
    template EpisodeLoss<S> episode_objective(const Model<S>&, Tape<S>&, const TokenSequence&,                  \
                                              const ForwardOptions&, const std::vector<std::pair<Index, Index>>*, \
                                              double);                                                          \
    template double validation_loss(const Model<S>&, const std::vector<TokenSequence>&, int);                   \
    template TrainResult train_episodic(Model<S>&, const EpisodeSource&, const TrainConfig&, const TrainOutput&, \
                                        const EpisodeObjective<S>&);                                          \
    template TrainResult meta_train(Model<S>&, const EpisodeSource&, const TrainConfig&, const TrainOutput&);

SEQCL_INSTANTIATE(float)
SEQCL_INSTANTIATE(double)

#undef SEQCL_INSTANTIATE

}  // namespace seqcl
