#include <doctest.h>

#include <cmath>
#include <random>

#include "gradcheck.hpp"
#include "primitive_cases.hpp"
#include "seqcl/tensor.hpp"

using namespace seqcl;
using seqcl::testing::gradient_error;
using seqcl::testing::random_mat;
using Fn = seqcl::testing::Fn;
using V = Var<double>;
using M = Mat<double>;

namespace {

M mat(std::initializer_list<std::initializer_list<double>> rows) {
    M m(static_cast<Index>(rows.size()), static_cast<Index>(rows.begin()->size()));
    Index i = 0;
    for (const auto& r : rows) {
        Index j = 0;
        for (double v : r) m(i, j++) = v;
        ++i;
    }
    return m;
}

constexpr int kSeeds = 10;
constexpr double kGradTol = 1e-5;

}  // namespace

TEST_CASE("matmul examples") {
    Tape<double> t;
    auto id = t.constant(mat({{1, 0}, {0, 1}}));
    auto b = t.constant(mat({{1.5, -2}, {3, 4.25}}));
    CHECK(matmul(id, b).value() == b.value());
    auto row = t.constant(mat({{1, 2}}));
    auto col = t.constant(mat({{3}, {4}}));
    CHECK(matmul(row, col).item() == doctest::Approx(11.0));
}

TEST_CASE("matmul shape mismatch names both shapes") {
    Tape<double> t;
    auto a = t.constant(M::Zero(2, 3));
    auto b = t.constant(M::Zero(2, 3));
    try {
        matmul(a, b);
        FAIL("expected DimensionError");
    } catch (const DimensionError& e) {
        std::string msg = e.what();
        CHECK(msg.find("[2x3]") != std::string::npos);
        CHECK(msg.find("and [2x3]") != std::string::npos);
    }
}

TEST_CASE("matmul gradient of sum matches finite differences on 4x3 * 3x5") {
    double worst = 0;
    for (int seed = 0; seed < kSeeds; ++seed) {
        std::mt19937_64 rng(seed);
        std::vector<M> in{random_mat(4, 3, rng), random_mat(3, 5, rng)};
        Fn fn = [](Tape<double>&, const std::vector<V>& x) { return matmul(x[0], x[1]); };
        worst = std::max(worst, gradient_error(fn, in, seed, 1e-4, /*project_output=*/false));
    }
    CHECK(worst < 1e-5);
}

TEST_CASE("softmax_rows examples") {
    Tape<double> t;
    auto x = t.constant(mat({{0, 0, 0}}));
    auto y = softmax_rows(x);
    for (Index j = 0; j < 3; ++j) CHECK(y.value()(0, j) == doctest::Approx(1.0 / 3.0));

    Mask m(1, 2);
    m << true, false;
    auto z = softmax_rows(t.constant(mat({{0.7, -1e300}})), &m);
    CHECK(z.value()(0, 0) == 1.0);
    CHECK(z.value()(0, 1) == 0.0);

    Mask none(1, 2);
    none << false, false;
    CHECK_THROWS_AS(softmax_rows(t.constant(mat({{1, 2}})), &none), ContractError);
}

TEST_CASE("softmax rows sum to one") {
    std::mt19937_64 rng(3);
    for (int rep = 0; rep < 50; ++rep) {
        Tape<double> t;
        Mask mask = causal_mask(9);
        auto y = softmax_rows(t.constant(random_mat(9, 9, rng, -30, 30)), rep % 2 ? &mask : nullptr);
        for (Index i = 0; i < 9; ++i) CHECK(std::abs(y.value().row(i).sum() - 1.0) < 1e-12);
        if (rep % 2)
            for (Index i = 0; i < 9; ++i)
                for (Index j = i + 1; j < 9; ++j) CHECK(y.value()(i, j) == 0.0);
    }
}

TEST_CASE("elementwise examples") {
    Tape<double> t;
    auto e = elu(t.constant(mat({{0, 1, -1}})));
    CHECK(e.value()(0, 0) == 0.0);
    CHECK(e.value()(0, 1) == 1.0);
    CHECK(e.value()(0, 2) == doctest::Approx(std::exp(-1.0) - 1.0));
    CHECK(e.value()(0, 2) == doctest::Approx(-0.6321).epsilon(1e-4));

    auto ln = layer_norm(t.constant(mat({{2.5, 2.5, 2.5, 2.5}})));
    CHECK(ln.value().cwiseAbs().maxCoeff() == 0.0);

    Index target = 0;
    auto ce = cross_entropy(t.constant(mat({{0, 0}})), std::span<const Index>(&target, 1));
    CHECK(ce.item() == doctest::Approx(std::log(2.0)));

    Index bad = 2;
    CHECK_THROWS_AS(cross_entropy(t.constant(mat({{0, 0}})), std::span<const Index>(&bad, 1)), LookupError);
    std::vector<Index> idx{0, 3};
    CHECK_THROWS_AS(embedding_lookup(t.constant(M::Zero(3, 2)), std::span<const Index>(idx)), LookupError);
}

TEST_CASE("shared subexpressions accumulate adjoints") {
    Tape<double> t;
    auto x = t.leaf(mat({{1.5}}));
    auto y = add(x, x);
    t.backward(y);
    CHECK(x.grad()(0, 0) == 2.0);

    Tape<double> t2;
    auto a = t2.leaf(mat({{3.0}}));
    auto b = mul(a, a);
    auto c = add(b, a);
    t2.backward(c);
    CHECK(a.grad()(0, 0) == doctest::Approx(7.0));
    // both interior nodes run their adjoint exactly once
    CHECK(t2.visited() == 2);
}

TEST_CASE("finite-difference checks for every differentiable primitive") {
    for (const auto& pc : seqcl::testing::primitive_cases()) {
        CAPTURE(pc.name);
        CHECK(seqcl::testing::primitive_error(pc, kSeeds) < kGradTol);
    }
}

TEST_CASE("conv3x3 output geometry follows stride") {
    ConvGeometry g{1, 32, 32, 1};
    CHECK(g.out_height() == 32);
    g.stride = 2;
    CHECK(g.out_height() == 16);
    CHECK(ConvGeometry{1, 16, 32, 2}.out_width() == 16);
    CHECK(ConvGeometry{1, 2, 2, 2}.out_height() == 1);
}

TEST_CASE("optimizer steps") {
    ParamStore<double> ps;
    ps.add("w", mat({{1.0}}));
    GradBuffer<double> g{mat({{2.0}})};
    sgd_step(ps, g, SgdConfig{0.1});
    CHECK(ps[0].value(0, 0) == doctest::Approx(0.8));

    GradBuffer<double> zero{mat({{0.0}})};
    sgd_step(ps, zero, SgdConfig{0.1});
    CHECK(ps[0].value(0, 0) == doctest::Approx(0.8));

    for (double grad : {3.0, -0.02}) {
        ParamStore<double> a;
        a.add("w", mat({{1.0}}));
        Adam<double> opt(AdamConfig{});
        opt.step(a, GradBuffer<double>{mat({{grad}})});
        const double moved = a[0].value(0, 0) - 1.0;
        CHECK(moved == doctest::Approx(-3e-4 * (grad > 0 ? 1 : -1)).epsilon(1e-3));
    }
}

TEST_CASE("non-finite gradients abort with the parameter name") {
    ParamStore<float> ps;
    ps.add("encoder.w0", Mat<float>::Zero(2, 2));
    GradBuffer<float> g{Mat<float>::Constant(2, 2, std::nanf(""))};
    Adam<float> opt;
    try {
        opt.step(ps, g);
        FAIL("expected NumericalError");
    } catch (const NumericalError& e) {
        CHECK(std::string(e.what()).find("encoder.w0") != std::string::npos);
    }
}

TEST_CASE("parameter gradients flow through tape into a GradBuffer") {
    ParamStore<double> ps;
    auto& w = ps.add("w", mat({{2.0, -1.0}}));
    ps.add("frozen", mat({{5.0}}), false);
    Tape<double> t;
    auto x = t.constant(mat({{1.0, 3.0}}));
    auto y = sum(mul(t.param(w), x));
    auto y2 = add(y, mul(t.param(ps.at("frozen")), y));
    t.backward(y2);
    GradBuffer<double> g(ps.size());
    t.accumulate_param_grads(g);
    CHECK(g[0](0, 0) == doctest::Approx(1.0 + 5.0));
    CHECK(g[0](0, 1) == doctest::Approx(3.0 + 15.0));
    CHECK(g[1].size() == 0);
}
