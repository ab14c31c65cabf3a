#include "seqcl/eval.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <limits>
#include <map>
#include <numeric>

#include "seqcl/errors.hpp"
#include "seqcl/parallel.hpp"

namespace seqcl {

std::string metric_name(Metric m) {
    switch (m) {
        case Metric::error: return "error_pct";
        case Metric::mse: return "mse";
        case Metric::rotation: return "rotation_score";
    }
    return "?";
}

Metric metric_for(const Episode& ep) {
    if (ep.classification) return Metric::error;
    if (ep.family == "rotation") return Metric::rotation;
    return Metric::mse;
}

double score_item(Metric m, std::span<const Index> predicted_code, const Eigen::VectorXd& predicted_y,
                  const Example& truth, const ClassCodebook& codebook) {
    switch (m) {
        case Metric::error: {
            const auto& code = codebook.codes.at(static_cast<std::size_t>(truth.label));
            return std::equal(code.begin(), code.end(), predicted_code.begin(), predicted_code.end()) ? 0.0 : 1.0;
        }
        case Metric::mse:
            if (predicted_y.size() != truth.y.size()) throw DimensionError("score_item: prediction/target width");
            return (predicted_y - truth.y).squaredNorm() / static_cast<double>(truth.y.size());
        case Metric::rotation: {
            const double norms = predicted_y.norm() * truth.y.norm();
            if (norms == 0) return 1.0;
            return 1.0 - std::clamp(predicted_y.dot(truth.y) / norms, -1.0, 1.0);
        }
    }
    return 0;
}

Summary summarize(std::span<const double> values) {
    Summary s;
    s.n = static_cast<Index>(values.size());
    if (values.empty()) return s;
    s.mean = std::accumulate(values.begin(), values.end(), 0.0) / static_cast<double>(s.n);
    if (s.n > 1) {
        double ss = 0;
        for (double v : values) ss += (v - s.mean) * (v - s.mean);
        s.std = std::sqrt(ss / static_cast<double>(s.n - 1));
        s.sem = s.std / std::sqrt(static_cast<double>(s.n));
    }
    return s;
}

Summary MetricsRecord::aggregate() const {
    std::vector<double> v;
    for (const auto& e : episodes) v.push_back(e.score);
    return summarize(v);
}

Summary across_runs(std::span<const MetricsRecord> runs) {
    std::vector<double> v;
    for (const auto& r : runs) v.push_back(r.aggregate().mean);
    return summarize(v);
}

void write_episode_csv(const std::filesystem::path& path, std::span<const MetricsRecord> runs) {
    std::ofstream f(path, std::ios::trunc);
    if (!f) throw IoError("cannot write " + path.string());
    f << "method,benchmark,metric,episode,task,score\n" << std::setprecision(9);
    for (const auto& r : runs)
        for (const auto& e : r.episodes) {
            f << r.method << ',' << r.benchmark << ',' << metric_name(r.metric) << ',' << e.episode << ",all,"
              << e.score << '\n';
            for (std::size_t k = 0; k < e.per_task.size(); ++k)
                f << r.method << ',' << r.benchmark << ',' << metric_name(r.metric) << ',' << e.episode << ',' << k
                  << ',' << e.per_task[k] << '\n';
        }
}

void write_summary_csv(const std::filesystem::path& path, std::span<const MetricsRecord> runs) {
    std::map<std::pair<std::string, std::string>, std::vector<MetricsRecord>> groups;
    std::vector<std::pair<std::string, std::string>> order;
    for (const auto& r : runs) {
        auto key = std::make_pair(r.method, r.benchmark);
        if (!groups.count(key)) order.push_back(key);
        groups[key].push_back(r);
    }
    std::ofstream f(path, std::ios::trunc);
    if (!f) throw IoError("cannot write " + path.string());
    f << "method,benchmark,metric,runs,mean,std,sem\n" << std::setprecision(9);
    for (const auto& key : order) {
        const auto& g = groups[key];
        // a single run reports the spread over its episodes
        const Summary s = g.size() > 1 ? across_runs(g) : g.front().aggregate();
        f << key.first << ',' << key.second << ',' << metric_name(g.front().metric) << ',' << g.size() << ','
          << s.mean << ',' << s.std << ',' << s.sem << '\n';
    }
}

Episode EvalSpec::episode(Index i) const { return source.sample(derive_seed(seed, static_cast<std::uint64_t>(i))); }

namespace {

// per-task means of item scores; the episode score is the item mean (×100 for error)
EpisodeScore finish_episode(Index index, Metric m, Index tasks, const std::vector<double>& item_scores,
                            const std::vector<Index>& item_tasks) {
    EpisodeScore e;
    e.episode = index;
    e.items = static_cast<Index>(item_scores.size());
    const double unit = m == Metric::error ? 100.0 : 1.0;
    std::vector<double> sum(static_cast<std::size_t>(tasks), 0.0), cnt(static_cast<std::size_t>(tasks), 0.0);
    double total = 0;
    for (std::size_t i = 0; i < item_scores.size(); ++i) {
        sum[static_cast<std::size_t>(item_tasks[i])] += item_scores[i];
        cnt[static_cast<std::size_t>(item_tasks[i])] += 1;
        total += item_scores[i];
    }
    e.score = item_scores.empty() ? 0.0 : unit * total / static_cast<double>(item_scores.size());
    for (std::size_t k = 0; k < sum.size(); ++k)
        e.per_task.push_back(cnt[k] > 0 ? unit * sum[k] / cnt[k] : std::numeric_limits<double>::quiet_NaN());
    return e;
}

template <class S>
Eigen::VectorXd as_vector(const RowVec<S>& r) {
    return r.size() ? Eigen::VectorXd(r.transpose().template cast<double>()) : Eigen::VectorXd();
}

template <class S>
double score_prediction(Metric m, const Prediction<S>& p, const Example& ex, const ClassCodebook& cb) {
    return score_item(m, p.code, as_vector<S>(p.regression), ex, cb);
}

// episode-local slot of each task boundary: train examples [k*shots, (k+1)*shots)
Index episode_tasks(const Episode& ep) { return static_cast<Index>(ep.tasks.size()); }

}  // namespace

template <class S>
MetricsRecord meta_test(const Model<S>& model, const EvalSpec& spec, const std::string& method) {
    const std::uint64_t checksum = model.params().checksum();
    const auto n = static_cast<std::size_t>(spec.episodes);
    std::vector<EpisodeScore> scores(n);
    std::vector<Metric> metrics(n);
    std::vector<std::string> names(n);
    parallel_for(n, resolve_threads(spec.threads), [&](std::size_t i) {
        const Episode ep = spec.episode(static_cast<Index>(i));
        const Metric m = metric_for(ep);
        LearnerState<S> state(model);
        const ClassCodebook* cb = ep.classification ? &ep.codebook : nullptr;
        for (const auto& ex : ep.train) learn_example(model, state, ex, cb);
        std::vector<double> item;
        std::vector<Index> task;
        for (const auto& ex : ep.test) {
            const auto pred = predict_test(model, state, ex.x, ep.codebook.code_length);
            item.push_back(score_prediction(m, pred, ex, ep.codebook));
            task.push_back(ex.label);
        }
        scores[i] = finish_episode(static_cast<Index>(i), m, episode_tasks(ep), item, task);
        metrics[i] = m;
        names[i] = ep.family;
    });
    if (model.params().checksum() != checksum) throw ContractError("meta_test modified the parameters");
    MetricsRecord rec;
    rec.method = method;
    rec.benchmark = n ? names[0] : spec.source.family->name();
    rec.metric = n ? metrics[0] : Metric::error;
    rec.episodes = std::move(scores);
    return rec;
}

// ---------------------------------------------------------------- forgetting

double ForgettingMatrix::forgetting(Index k, Index k_after) const {
    if (k_after < k) throw ContractError("forgetting is defined for k' >= k");
    if (k_after == k) return 0.0;
    return score(k, k_after) - score(k, k);
}

std::vector<double> ForgettingMatrix::per_task() const {
    std::vector<double> out;
    for (Index k = 0; k < tasks(); ++k) {
        double s = 0;
        Index c = 0;
        for (Index j = k + 1; j < tasks(); ++j, ++c) s += forgetting(k, j);
        out.push_back(c ? s / static_cast<double>(c) : std::numeric_limits<double>::quiet_NaN());
    }
    return out;
}

double ForgettingMatrix::average() const {
    double s = 0;
    Index c = 0;
    for (Index k = 0; k < tasks(); ++k)
        for (Index j = k + 1; j < tasks(); ++j, ++c) s += forgetting(k, j);
    return c ? s / static_cast<double>(c) : 0.0;
}

namespace {

// pooled (k, k') sums from per-episode accumulators, in episode order
ForgettingMatrix reduce_forgetting(Metric m, Index K, const std::vector<Mat<double>>& sums,
                                   const std::vector<Mat<double>>& counts) {
    ForgettingMatrix fm;
    fm.metric = m;
    fm.episodes = static_cast<Index>(sums.size());
    Mat<double> s = Mat<double>::Zero(K, K), c = Mat<double>::Zero(K, K);
    for (std::size_t i = 0; i < sums.size(); ++i) {
        s += sums[i];
        c += counts[i];
    }
    const double unit = m == Metric::error ? 100.0 : 1.0;
    fm.score = Mat<double>::Constant(K, K, std::numeric_limits<double>::quiet_NaN());
    for (Index k = 0; k < K; ++k)
        for (Index j = k; j < K; ++j)
            if (c(k, j) > 0) fm.score(k, j) = unit * s(k, j) / c(k, j);
    return fm;
}

}  // namespace

template <class S>
ForgettingMatrix forgetting_analysis(const Model<S>& model, const EvalSpec& spec, bool trained_mid_stream) {
    const std::uint64_t checksum = model.params().checksum();
    const Index K = spec.source.spec.tasks;
    const auto n = static_cast<std::size_t>(spec.episodes);
    std::vector<Mat<double>> sums(n), counts(n);
    std::vector<Metric> metrics(n, Metric::error);
    parallel_for(n, resolve_threads(spec.threads), [&](std::size_t i) {
        const Episode ep = spec.episode(static_cast<Index>(i));
        const Metric m = metric_for(ep);
        metrics[i] = m;
        sums[i] = Mat<double>::Zero(K, K);
        counts[i] = Mat<double>::Zero(K, K);
        LearnerState<S> state(model);
        const ClassCodebook* cb = ep.classification ? &ep.codebook : nullptr;
        for (Index kp = 0; kp < K; ++kp) {
            for (Index j = 0; j < ep.shots_train; ++j)
                learn_example(model, state, ep.train[static_cast<std::size_t>(kp * ep.shots_train + j)], cb);
            for (const auto& ex : ep.test) {
                if (ex.label > kp) continue;
                const auto pred = predict_test(model, state, ex.x, ep.codebook.code_length);
                sums[i](ex.label, kp) += score_prediction(m, pred, ex, ep.codebook);
                counts[i](ex.label, kp) += 1;
            }
        }
    });
    if (model.params().checksum() != checksum) throw ContractError("forgetting_analysis modified the parameters");
    ForgettingMatrix fm = reduce_forgetting(n ? metrics[0] : Metric::error, K, sums, counts);
    if (!trained_mid_stream)
        fm.warnings.push_back("model was not meta-trained with mid-stream evaluation; early moments are off-distribution");
    return fm;
}

void write_forgetting_csv(const std::filesystem::path& path, const ForgettingMatrix& m) {
    std::ofstream f(path, std::ios::trunc);
    if (!f) throw IoError("cannot write " + path.string());
    f << std::setprecision(9);
    for (const auto& w : m.warnings) f << "# warning: " << w << '\n';
    f << "k,k_prime,score,forgetting\n";
    for (Index k = 0; k < m.tasks(); ++k)
        for (Index j = k; j < m.tasks(); ++j) f << k << ',' << j << ',' << m.score(k, j) << ',' << m.forgetting(k, j) << '\n';
    const auto per = m.per_task();
    for (std::size_t k = 0; k < per.size(); ++k) f << k << ",mean,," << per[k] << '\n';
    f << "all,mean,," << m.average() << '\n';
}

// ---------------------------------------------------------------- prototypes

OnlinePrototypes::OnlinePrototypes(Index classes, Index dim)
    : means_(Mat<double>::Zero(classes, dim)), counts_(static_cast<std::size_t>(classes), 0) {}

void OnlinePrototypes::observe(const Eigen::RowVectorXd& embedding, Index cls) {
    if (cls < 0 || cls >= means_.rows()) throw ContractError("prototype class out of range");
    if (embedding.size() != means_.cols()) throw DimensionError("prototype embedding width");
    auto& c = counts_[static_cast<std::size_t>(cls)];
    ++c;
    means_.row(cls) += (embedding - means_.row(cls)) / static_cast<double>(c);
}

Index OnlinePrototypes::predict(const Eigen::RowVectorXd& embedding) const {
    Index best = -1;
    double best_d = 0;
    for (Index k = 0; k < means_.rows(); ++k) {
        if (counts_[static_cast<std::size_t>(k)] == 0) continue;
        const double d = (means_.row(k) - embedding).squaredNorm();
        if (best < 0 || d < best_d) {
            best = k;
            best_d = d;
        }
    }
    if (best < 0) throw ContractError("no prototypes observed");
    return best;
}

namespace {

template <class S>
Mat<S> stack_x(const std::vector<Example>& items) {
    Mat<S> x(static_cast<Index>(items.size()), items.empty() ? 0 : items.front().x.size());
    for (std::size_t i = 0; i < items.size(); ++i) x.row(static_cast<Index>(i)) = items[i].x.transpose().template cast<S>();
    return x;
}

}  // namespace

template <class S>
EpisodeLoss<S> prototypical_objective(const Model<S>& model, Tape<S>& tape, const Episode& ep) {
    if (!ep.classification) throw ContractError("prototypical loss needs a classification episode");
    if (ep.test.empty()) throw ContractError("prototypical loss: episode has no test items");
    const Index K = episode_tasks(ep);
    const auto n_train = static_cast<Index>(ep.train.size());
    const auto n_test = static_cast<Index>(ep.test.size());
    Var<S> support = model.encode(tape, stack_x<S>(ep.train));
    Var<S> query = model.encode(tape, stack_x<S>(ep.test));

    Mat<S> avg = Mat<S>::Zero(K, n_train);
    std::vector<Index> per_class(static_cast<std::size_t>(K), 0);
    for (const auto& ex : ep.train) ++per_class[static_cast<std::size_t>(ex.label)];
    for (Index i = 0; i < n_train; ++i) {
        const Index k = ep.train[static_cast<std::size_t>(i)].label;
        avg(k, i) = S(1) / static_cast<S>(per_class[static_cast<std::size_t>(k)]);
    }
    Var<S> protos = matmul(tape.constant(std::move(avg)), support);  // K×d

    // -|q - p|^2 = 2 q.p - |q|^2 - |p|^2
    Var<S> qp = matmul_nt(query, protos);
    Var<S> qq = matmul(row_sum(mul(query, query)), tape.constant(Mat<S>::Ones(1, K)));
    Var<S> pp = matmul(tape.constant(Mat<S>::Ones(n_test, 1)), transpose(row_sum(mul(protos, protos))));
    Var<S> logits = sub(scale(qp, S(2)), add(qq, pp));

    std::vector<Index> labels;
    for (const auto& ex : ep.test) labels.push_back(ex.label);
    EpisodeLoss<S> out;
    out.targets = n_test;
    out.meta = sum(cross_entropy(logits, labels));
    out.total = scale(out.meta, S(1) / static_cast<S>(n_test));
    return out;
}

template <class S>
TrainResult pn_meta_train(Model<S>& model, const EpisodeSource& source, const TrainConfig& cfg, const TrainOutput& out) {
    EpisodeObjective<S> objective = [](const Model<S>& m, Tape<S>& tape, const ObjectiveContext& ctx) {
        return prototypical_objective(m, tape, ctx.episode);
    };
    TrainConfig c = cfg;
    c.attn_weight = 0;
    return train_episodic(model, source, c, out, objective);
}

template <class S>
MetricsRecord pn_meta_test(const Model<S>& model, const EvalSpec& spec) {
    const std::uint64_t checksum = model.params().checksum();
    const auto n = static_cast<std::size_t>(spec.episodes);
    std::vector<EpisodeScore> scores(n);
    std::string bench = spec.source.family ? spec.source.family->name() : "";
    parallel_for(n, resolve_threads(spec.threads), [&](std::size_t i) {
        const Episode ep = spec.episode(static_cast<Index>(i));
        if (!ep.classification) throw ContractError("prototype baseline needs a classification benchmark");
        const Index K = episode_tasks(ep);
        const Mat<double> train_emb = model.encode_rows(stack_x<S>(ep.train)).template cast<double>();
        const Mat<double> test_emb = model.encode_rows(stack_x<S>(ep.test)).template cast<double>();
        OnlinePrototypes protos(K, train_emb.cols());
        for (std::size_t j = 0; j < ep.train.size(); ++j) protos.observe(train_emb.row(static_cast<Index>(j)), ep.train[j].label);
        std::vector<double> item;
        std::vector<Index> task;
        for (std::size_t j = 0; j < ep.test.size(); ++j) {
            const Index k = protos.predict(test_emb.row(static_cast<Index>(j)));
            item.push_back(score_item(Metric::error, ep.codebook.codes[static_cast<std::size_t>(k)], {}, ep.test[j],
                                      ep.codebook));
            task.push_back(ep.test[j].label);
        }
        scores[i] = finish_episode(static_cast<Index>(i), Metric::error, K, item, task);
    });
    if (model.params().checksum() != checksum) throw ContractError("pn_meta_test modified the parameters");
    return {"pn", bench, Metric::error, std::move(scores)};
}

// ---------------------------------------------------------------- offline

ModelConfig offline_model_config(const ModelConfig& base, const Episode& ep) {
    ModelConfig c = base;
    // the sequence part is unused; keep it minimal
    c.transformer.n_layers = 1;
    c.transformer.n_heads = 1;
    c.transformer.d_head = c.transformer.d_model;
    c.transformer.d_mlp = 1;
    c.transformer.max_len = 1;
    c.transformer.backend = Backend::softmax;
    c.transformer.dropout = 0;
    c.input = ep.input;
    c.vocab = ep.classification ? episode_tasks(ep) : 0;
    c.y_dim = ep.classification ? 0 : ep.y_dim;
    return c;
}

namespace {

using OffS = float;

// per-item scores of `items` under the offline network
std::vector<double> offline_scores(const Model<OffS>& net, const Episode& ep, Metric m,
                                   const std::vector<const Example*>& items) {
    std::vector<double> out;
    if (items.empty()) return out;
    Mat<OffS> x(static_cast<Index>(items.size()), items.front()->x.size());
    for (std::size_t i = 0; i < items.size(); ++i) x.row(static_cast<Index>(i)) = items[i]->x.transpose().cast<OffS>();
    Tape<OffS> tape(false);
    Var<OffS> h = net.encode(tape, x);
    if (ep.classification) {
        const Mat<OffS>& lg = net.logits(h).value();
        for (std::size_t i = 0; i < items.size(); ++i) {
            Index k;
            lg.row(static_cast<Index>(i)).maxCoeff(&k);
            out.push_back(score_item(m, ep.codebook.codes[static_cast<std::size_t>(k)], {}, *items[i], ep.codebook));
        }
    } else {
        const Mat<OffS>& y = net.regress(h).value();
        for (std::size_t i = 0; i < items.size(); ++i)
            out.push_back(score_item(m, {}, y.row(static_cast<Index>(i)).transpose().cast<double>(), *items[i],
                                     ep.codebook));
    }
    return out;
}

}  // namespace

OfflineRun offline_episode(const ModelConfig& base, const Episode& ep, const OfflineConfig& cfg, std::uint64_t seed,
                           Index upto) {
    const Index K = episode_tasks(ep);
    if (upto <= 0 || upto > K) upto = K;
    const Metric m = metric_for(ep);
    const double unit = m == Metric::error ? 100.0 : 1.0;
    Model<OffS> net(offline_model_config(base, ep), seed);

    std::vector<const Example*> train, test;
    for (const auto& ex : ep.train)
        if (ex.label < upto) train.push_back(&ex);
    for (const auto& ex : ep.test)
        if (ex.label < upto) test.push_back(&ex);

    OfflineRun run;
    auto evaluate = [&] {
        const auto s = offline_scores(net, ep, m, test);
        std::vector<double> sum(static_cast<std::size_t>(upto), 0.0), cnt(static_cast<std::size_t>(upto), 0.0);
        double total = 0;
        for (std::size_t i = 0; i < s.size(); ++i) {
            sum[static_cast<std::size_t>(test[i]->label)] += s[i];
            cnt[static_cast<std::size_t>(test[i]->label)] += 1;
            total += s[i];
        }
        const double score = s.empty() ? 0.0 : unit * total / static_cast<double>(s.size());
        if (run.best_curve.empty() || score < run.best) {
            run.best = score;
            run.per_task.clear();
            for (std::size_t k = 0; k < sum.size(); ++k) run.per_task.push_back(cnt[k] > 0 ? unit * sum[k] / cnt[k] : 0.0);
        }
        run.best_curve.push_back(run.best);
    };

    Adam<OffS> opt({cfg.lr});
    std::mt19937_64 rng(derive_seed(seed, 0x0ff1));
    std::vector<std::size_t> order(train.size());
    std::iota(order.begin(), order.end(), 0);
    const auto bs = static_cast<std::size_t>(std::max<Index>(1, cfg.batch));
    evaluate();
    for (long epoch = 0; epoch < cfg.max_epochs; ++epoch) {
        std::shuffle(order.begin(), order.end(), rng);
        for (std::size_t b = 0; b < order.size(); b += bs) {
            const std::size_t e = std::min(order.size(), b + bs);
            Mat<OffS> x(static_cast<Index>(e - b), ep.input.dim);
            std::vector<Index> labels;
            Mat<OffS> y(static_cast<Index>(e - b), std::max<Index>(ep.y_dim, 1));
            for (std::size_t i = b; i < e; ++i) {
                const Example& ex = *train[order[i]];
                x.row(static_cast<Index>(i - b)) = ex.x.transpose().cast<OffS>();
                if (ep.classification)
                    labels.push_back(ex.label);
                else
                    y.row(static_cast<Index>(i - b)) = ex.y.transpose().cast<OffS>();
            }
            Tape<OffS> tape;
            Var<OffS> h = net.encode(tape, x);
            Var<OffS> loss = ep.classification ? mean(cross_entropy(net.logits(h), labels))
                                               : mse(net.regress(h), tape.constant(std::move(y)));
            tape.backward(loss);
            GradBuffer<OffS> g = net.params().zero_grads();
            tape.accumulate_param_grads(g);
            opt.step(net.params(), g);
        }
        evaluate();
    }
    return run;
}

MetricsRecord offline_baseline(const ModelConfig& base, const EvalSpec& spec, const OfflineConfig& cfg, Index repeat) {
    const auto n = static_cast<std::size_t>(spec.episodes);
    std::vector<EpisodeScore> scores(n);
    std::vector<Metric> metrics(n, Metric::error);
    std::string bench = spec.source.family ? spec.source.family->name() : "";
    parallel_for(n, resolve_threads(spec.threads), [&](std::size_t i) {
        const Episode ep = spec.episode(static_cast<Index>(i));
        const OfflineRun run =
            offline_episode(base, ep, cfg, derive_seed(cfg.seed, static_cast<std::uint64_t>(repeat) * n + i));
        EpisodeScore e;
        e.episode = static_cast<Index>(i);
        e.score = run.best;
        e.per_task = run.per_task;
        e.items = static_cast<Index>(ep.test.size());
        scores[i] = std::move(e);
        metrics[i] = metric_for(ep);
    });
    return {"offline", bench, n ? metrics[0] : Metric::error, std::move(scores)};
}

ForgettingMatrix offline_forgetting(const ModelConfig& base, const EvalSpec& spec, const OfflineConfig& cfg) {
    const Index K = spec.source.spec.tasks;
    const auto n = static_cast<std::size_t>(spec.episodes);
    std::vector<Mat<double>> sums(n), counts(n);
    std::vector<Metric> metrics(n, Metric::error);
    parallel_for(n, resolve_threads(spec.threads), [&](std::size_t i) {
        const Episode ep = spec.episode(static_cast<Index>(i));
        metrics[i] = metric_for(ep);
        const double unit = metrics[i] == Metric::error ? 100.0 : 1.0;
        sums[i] = Mat<double>::Zero(K, K);
        counts[i] = Mat<double>::Zero(K, K);
        for (Index kp = 0; kp < K; ++kp) {
            const OfflineRun run = offline_episode(base, ep, cfg, derive_seed(cfg.seed, i * 1000 + kp), kp + 1);
            for (Index k = 0; k <= kp; ++k) {
                sums[i](k, kp) = run.per_task[static_cast<std::size_t>(k)] / unit;
                counts[i](k, kp) = 1;
            }
        }
    });
    return reduce_forgetting(n ? metrics[0] : Metric::error, K, sums, counts);
}

#define SEQCL_INSTANTIATE(S)                                                                                  \
    template MetricsRecord meta_test(const Model<S>&, const EvalSpec&, const std::string&);                   \
    template ForgettingMatrix forgetting_analysis(const Model<S>&, const EvalSpec&, bool);                    \
    template EpisodeLoss<S> prototypical_objective(const Model<S>&, Tape<S>&, const Episode&);                \
    template TrainResult pn_meta_train(Model<S>&, const EpisodeSource&, const TrainConfig&, const TrainOutput&); \
    template MetricsRecord pn_meta_test(const Model<S>&, const EvalSpec&);

SEQCL_INSTANTIATE(float)
SEQCL_INSTANTIATE(double)

#undef SEQCL_INSTANTIATE

}  // namespace seqcl
