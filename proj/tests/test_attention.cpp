#include <doctest.h>

#include <random>

#include "attention_oracle.hpp"
#include "gradcheck.hpp"
#include "seqcl/attention.hpp"

using namespace seqcl;
using seqcl::testing::random_mat;
using M = Mat<double>;

namespace {

KernelFeatureMap<double> make_phi(Backend b, Index d, std::mt19937_64& rng, Index r = 0) {
    KernelFeatureMap<double> phi;
    phi.kind = b;
    if (b == Backend::performer) phi.projection = orthogonal_gaussian_projection<double>(r ? r : 2 * d, d, rng);
    return phi;
}

M run_parallel(Backend b, const M& q, const M& k, const M& v, const KernelFeatureMap<double>& phi,
               M* weights = nullptr) {
    Tape<double> t(false);
    auto Q = t.constant(q), K = t.constant(k), V = t.constant(v);
    auto res = b == Backend::softmax ? softmax_attention(Q, K, V, true) : kernel_attention(Q, K, V, phi, true);
    if (weights) *weights = res.weights.value();
    return res.output.value();
}

M run_recurrent(Backend b, const M& q, const M& k, const M& v, const KernelFeatureMap<double>& phi) {
    M out(q.rows(), v.cols());
    SoftmaxAttnState<double> soft(q.cols());
    KetAttnState<double> ket(phi.feature_dim(q.cols()), v.cols());
    for (Index t = 0; t < q.rows(); ++t) {
        if (b == Backend::softmax)
            out.row(t) = soft.step(q.row(t), k.row(t), v.row(t));
        else
            out.row(t) = ket.step(q.row(t), k.row(t), v.row(t), phi);
    }
    return out;
}

}  // namespace

TEST_CASE("backend names") {
    CHECK(parse_backend("softmax") == Backend::softmax);
    CHECK(to_string(parse_backend("performer")) == "performer");
    CHECK_THROWS_AS(parse_backend("flash"), ConfigError);
}

TEST_CASE("single token attends only to itself") {
    std::mt19937_64 rng(1);
    for (Backend b : {Backend::softmax, Backend::linear, Backend::performer}) {
        auto phi = make_phi(b, 4, rng);
        M q = random_mat(1, 4, rng), k = random_mat(1, 4, rng), v = random_mat(1, 4, rng);
        CHECK((run_parallel(b, q, k, v, phi) - v).cwiseAbs().maxCoeff() < 1e-14);
        CHECK((run_recurrent(b, q, k, v, phi) - v).cwiseAbs().maxCoeff() < 1e-14);
    }
}

TEST_CASE("identical keys give the running mean of values") {
    std::mt19937_64 rng(2);
    for (Backend b : {Backend::softmax, Backend::linear, Backend::performer}) {
        auto phi = make_phi(b, 4, rng);
        M q = random_mat(6, 4, rng), v = random_mat(6, 4, rng);
        M k = random_mat(1, 4, rng).replicate(6, 1);
        M out = run_parallel(b, q, k, v, phi);
        for (Index t = 0; t < 6; ++t) {
            RowVec<double> avg = v.topRows(t + 1).colwise().mean();
            CHECK((out.row(t) - avg).cwiseAbs().maxCoeff() < 1e-12);
        }
    }
}

TEST_CASE("parallel forms match literal formula oracles") {
    std::mt19937_64 rng(3);
    M q = random_mat(8, 4, rng), k = random_mat(8, 4, rng), v = random_mat(8, 4, rng);
    KernelFeatureMap<double> none;
    CHECK((run_parallel(Backend::softmax, q, k, v, none) - seqcl::testing::literal_softmax_attention(q, k, v, true))
              .cwiseAbs()
              .maxCoeff() < 1e-12);
    auto lin = make_phi(Backend::linear, 4, rng);
    CHECK((run_parallel(Backend::linear, q, k, v, lin) - seqcl::testing::literal_kernel_attention(q, k, v, M(), true))
              .cwiseAbs()
              .maxCoeff() < 1e-12);
    auto perf = make_phi(Backend::performer, 4, rng, 16);
    CHECK((run_parallel(Backend::performer, q, k, v, perf) -
           seqcl::testing::literal_kernel_attention(q, k, v, perf.projection, true))
              .cwiseAbs()
              .maxCoeff() < 1e-12);
}

TEST_CASE("recurrent stepping equals the causal parallel form") {
    for (Index t : {1, 2, 17, 64, 128}) {
        for (Backend b : {Backend::softmax, Backend::linear, Backend::performer}) {
            std::mt19937_64 rng(100 + t);
            auto phi = make_phi(b, 8, rng);
            M q = random_mat(t, 8, rng), k = random_mat(t, 8, rng), v = random_mat(t, 8, rng);
            const double err = (run_parallel(b, q, k, v, phi) - run_recurrent(b, q, k, v, phi)).cwiseAbs().maxCoeff();
            INFO("backend " << to_string(b) << " T=" << t);
            CHECK(err < 1e-8);
        }
    }
}

TEST_CASE("attention rows are normalized over allowed positions") {
    std::mt19937_64 rng(4);
    for (Backend b : {Backend::softmax, Backend::linear, Backend::performer}) {
        auto phi = make_phi(b, 6, rng);
        M w;
        run_parallel(b, random_mat(20, 6, rng), random_mat(20, 6, rng), random_mat(20, 6, rng), phi, &w);
        for (Index i = 0; i < 20; ++i) {
            CHECK(std::abs(w.row(i).sum() - 1.0) < 1e-10);
            for (Index j = i + 1; j < 20; ++j) CHECK(w(i, j) == 0.0);
        }
    }
}

TEST_CASE("causality: future tokens never change past outputs") {
    std::mt19937_64 rng(5);
    for (Backend b : {Backend::softmax, Backend::linear, Backend::performer}) {
        auto phi = make_phi(b, 4, rng);
        M q = random_mat(12, 4, rng), k = random_mat(12, 4, rng), v = random_mat(12, 4, rng);
        M base = run_parallel(b, q, k, v, phi);
        for (Index zeroed = 1; zeroed < 12; ++zeroed) {
            M q2 = q, k2 = k, v2 = v;
            q2.row(zeroed).setZero();
            k2.row(zeroed).setZero();
            v2.row(zeroed).setZero();
            M other = run_parallel(b, q2, k2, v2, phi);
            CHECK(other.topRows(zeroed) == base.topRows(zeroed));
        }
    }
}

TEST_CASE("state sizes: constant for kernel attention, linear for softmax") {
    std::mt19937_64 rng(6);
    auto phi = make_phi(Backend::performer, 8, rng);
    KetAttnState<double> ket(phi.feature_dim(8), 8);
    SoftmaxAttnState<double> soft(8);
    CHECK(ket.accumulator().isZero(0));
    const std::size_t ket_bytes = ket.bytes();
    CHECK(ket_bytes == static_cast<std::size_t>(16 * 9) * sizeof(double));
    for (Index t = 1; t <= 200; ++t) {
        RowVec<double> x = random_mat(1, 8, rng);
        ket.step(x, x, x, phi);
        soft.step(x, x, x);
        CHECK(ket.bytes() == ket_bytes);
        CHECK(soft.pairs() == t);
        CHECK(soft.bytes() == static_cast<std::size_t>(2 * t * 8) * sizeof(double));
    }
}

TEST_CASE("kernel state's last column accumulates key features") {
    std::mt19937_64 rng(7);
    auto phi = make_phi(Backend::linear, 5, rng);
    KetAttnState<double> ket(5, 5);
    RowVec<double> dsum = RowVec<double>::Zero(5);
    for (int t = 0; t < 10; ++t) {
        RowVec<double> k = random_mat(1, 5, rng);
        for (Index c = 0; c < 5; ++c) dsum(c) += seqcl::testing::literal_elu_plus_one(k(c));
        ket.step(random_mat(1, 5, rng), k, random_mat(1, 5, rng), phi);
    }
    CHECK((ket.key_feature_sum().transpose() - dsum).cwiseAbs().maxCoeff() < 1e-12);
}

TEST_CASE("feature maps") {
    std::mt19937_64 rng(8);
    KernelFeatureMap<double> lin{Backend::linear, {}};
    RowVec<double> x = random_mat(1, 50, rng, -20, 20);
    CHECK((lin.apply(x).array() > 0).all());

    auto perf = make_phi(Backend::performer, 8, rng, 32);
    CHECK((perf.apply(RowVec<double>::Zero(8)).array() == 1.0).all());

    KernelFeatureMap<double> zero_w{Backend::performer, M::Zero(16, 4)};
    RowVec<double> y = random_mat(1, 4, rng);
    const double expected = std::exp(-y.squaredNorm() / 2);
    CHECK((zero_w.apply(y).array() - expected).abs().maxCoeff() < 1e-15);
    CHECK((perf.apply(random_mat(1, 8, rng, -3, 3)).array() > 0).all());
}

TEST_CASE("orthogonal projection rows are orthogonal within each block") {
    std::mt19937_64 rng(9);
    const Index d = 16, r = 40;
    M w = orthogonal_gaussian_projection<double>(r, d, rng);
    CHECK(w.rows() == r);
    for (Index block = 0; block < r; block += d)
        for (Index i = block; i < std::min(r, block + d); ++i)
            for (Index j = i + 1; j < std::min(r, block + d); ++j) CHECK(std::abs(w.row(i).dot(w.row(j))) < 1e-6);
}

TEST_CASE("performer approximates exact softmax attention") {
    const double e256 = seqcl::testing::mean_perf_error(256, 50);
    const double e64 = seqcl::testing::mean_perf_error(64, 50);
    const double e16 = seqcl::testing::mean_perf_error(16, 50);
    CHECK(e256 == doctest::Approx(seqcl::testing::kPerformerR256Measured).epsilon(0.01));
    CHECK(e256 < seqcl::testing::kPerformerR256Threshold);
    CHECK(e256 < e64);
    CHECK(e64 < e16);
}

TEST_CASE("attention gradients through both backends") {
    using seqcl::testing::gradient_error;
    std::mt19937_64 rng(10);
    auto perf = make_phi(Backend::performer, 3, rng);
    std::vector<M> in{random_mat(5, 3, rng), random_mat(5, 3, rng), random_mat(5, 3, rng)};
    auto soft_fn = [](Tape<double>&, const std::vector<Var<double>>& x) {
        return softmax_attention(x[0], x[1], x[2], true).output;
    };
    auto lin_fn = [](Tape<double>&, const std::vector<Var<double>>& x) {
        KernelFeatureMap<double> lin{Backend::linear, {}};
        return kernel_attention(x[0], x[1], x[2], lin, true).output;
    };
    auto perf_fn = [perf](Tape<double>&, const std::vector<Var<double>>& x) {
        return kernel_attention(x[0], x[1], x[2], perf, true).output;
    };
    CHECK(gradient_error(soft_fn, in, 1) < 1e-5);
    CHECK(gradient_error(lin_fn, in, 2) < 1e-5);
    // query stabilization is treated as a constant; the ratio is invariant to it
    CHECK(gradient_error(perf_fn, in, 3) < 1e-5);
}

TEST_CASE("shape errors") {
    Tape<double> t;
    auto a = t.constant(M::Zero(3, 4));
    auto b = t.constant(M::Zero(2, 4));
    CHECK_THROWS_AS(softmax_attention(a, b, b, true), DimensionError);
}
