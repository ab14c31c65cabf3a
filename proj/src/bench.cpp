#include "seqcl/bench.hpp"

#include <algorithm>
#include <chrono>
#include <ostream>
#include <random>

#include "seqcl/errors.hpp"

namespace seqcl {

namespace {

using B = float;

Mat<B> random_rows(Index n, Index d, std::mt19937_64& rng) {
    std::normal_distribution<double> n01;
    Mat<B> m(n, d);
    for (Index i = 0; i < n; ++i)
        for (Index j = 0; j < d; ++j) m(i, j) = static_cast<B>(n01(rng) / std::sqrt(static_cast<double>(d)));
    return m;
}

double median(std::vector<double> v) {
    std::sort(v.begin(), v.end());
    const std::size_t n = v.size();
    return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

// Times `window` steps of a copy of `prefilled`; returns ns per token.
template <class State, class StepFn>
double timed_window(const std::vector<State>& prefilled, const Mat<B>& q, const Mat<B>& k, const Mat<B>& v,
                    StepFn&& step, B& sink) {
    std::vector<State> state = prefilled;
    const Index w = q.rows();
    const auto t0 = std::chrono::steady_clock::now();
    for (Index t = 0; t < w; ++t)
        for (auto& s : state) sink += step(s, q.row(t), k.row(t), v.row(t))(0);
    const auto t1 = std::chrono::steady_clock::now();
    return std::chrono::duration<double, std::nano>(t1 - t0).count() / static_cast<double>(w);
}

}  // namespace

std::vector<BenchPoint> bench_attention(Backend backend, std::span<const Index> lengths, const BenchOptions& opt) {
    if (opt.dim < 1 || opt.heads < 1 || opt.window < 1 || opt.trials < 1 || opt.warmup < 0)
        throw ConfigError("bench: dim, heads, window and trials must be positive");
    std::mt19937_64 rng(opt.seed);
    KernelFeatureMap<B> phi;
    phi.kind = backend;
    if (backend == Backend::performer)
        phi.projection = orthogonal_gaussian_projection<B>(opt.feature_dim > 0 ? opt.feature_dim : 2 * opt.dim, opt.dim, rng);
    const Index r = phi.feature_dim(opt.dim);

    std::vector<BenchPoint> out;
    volatile B keep = 0;
    for (Index T : lengths) {
        if (T < 0) throw ConfigError("bench: negative length");
        const Mat<B> pq = random_rows(T, opt.dim, rng), pk = random_rows(T, opt.dim, rng), pv = random_rows(T, opt.dim, rng);
        const Mat<B> q = random_rows(opt.window, opt.dim, rng), k = random_rows(opt.window, opt.dim, rng),
                     v = random_rows(opt.window, opt.dim, rng);
        BenchPoint p;
        p.backend = backend;
        p.length = T;
        std::vector<double> times;
        B sink = 0;
        if (backend == Backend::softmax) {
            std::vector<SoftmaxAttnState<B>> state(static_cast<std::size_t>(opt.heads), SoftmaxAttnState<B>(opt.dim));
            for (auto& s : state)
                for (Index t = 0; t < T; ++t) s.step(pq.row(t), pk.row(t), pv.row(t));
            for (const auto& s : state) p.state_bytes += s.bytes();
            p.stored_pairs = state.front().pairs();
            auto step = [](SoftmaxAttnState<B>& s, const auto& a, const auto& b, const auto& c) { return s.step(a, b, c); };
            for (Index i = 0; i < opt.warmup + opt.trials; ++i) {
                const double ns = timed_window(state, q, k, v, step, sink);
                if (i >= opt.warmup) times.push_back(ns);
            }
        } else {
            std::vector<KetAttnState<B>> state(static_cast<std::size_t>(opt.heads), KetAttnState<B>(r, opt.dim));
            for (auto& s : state)
                for (Index t = 0; t < T; ++t) s.step(pq.row(t), pk.row(t), pv.row(t), phi);
            for (const auto& s : state) p.state_bytes += s.bytes();
            auto step = [&phi](KetAttnState<B>& s, const auto& a, const auto& b, const auto& c) {
                return s.step(a, b, c, phi);
            };
            for (Index i = 0; i < opt.warmup + opt.trials; ++i) {
                const double ns = timed_window(state, q, k, v, step, sink);
                if (i >= opt.warmup) times.push_back(ns);
            }
        }
        keep = keep + sink;
        p.ns_per_token = median(times);
        out.push_back(p);
    }
    return out;
}

void write_bench_csv(std::ostream& os, std::span<const BenchPoint> points, bool header) {
    if (header) os << "backend,T,ns_per_token,state_bytes\n";
    for (const auto& p : points)
        os << to_string(p.backend) << ',' << p.length << ',' << p.ns_per_token << ',' << p.state_bytes << '\n';
}

}  // namespace seqcl
