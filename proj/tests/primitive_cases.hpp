#pragma once

// Every differentiable primitive with input shapes for the finite-difference
// oracle. Shared by the unit tests and the acceptance run.

#include <random>
#include <string>
#include <vector>

#include "gradcheck.hpp"
#include "seqcl/attention.hpp"
#include "seqcl/tensor.hpp"

namespace seqcl::testing {

struct PrimitiveCase {
    std::string name;
    Fn fn;
    std::vector<std::pair<Index, Index>> shapes;
    double lo = -1, hi = 1;
};

inline std::vector<PrimitiveCase> primitive_cases() {
    using V = Var<double>;
    using X = const std::vector<V>&;
    static const Mask causal5 = causal_mask(5);
    static const Mask causal4 = causal_mask(4);
    static const KernelFeatureMap<double> performer = [] {
        std::mt19937_64 rng(10);
        return KernelFeatureMap<double>{Backend::performer, orthogonal_gaussian_projection<double>(6, 3, rng)};
    }();
    std::vector<PrimitiveCase> c;
    c.push_back({"matmul", [](Tape<double>&, X x) { return matmul(x[0], x[1]); }, {{4, 3}, {3, 5}}});
    c.push_back({"matmul_nt", [](Tape<double>&, X x) { return matmul_nt(x[0], x[1]); }, {{3, 4}, {5, 4}}});
    c.push_back({"transpose", [](Tape<double>&, X x) { return transpose(x[0]); }, {{3, 4}}});
    c.push_back({"add sub mul", [](Tape<double>&, X x) { return mul(add(x[0], x[1]), sub(x[0], x[1])); },
                 {{3, 4}, {3, 4}}});
    c.push_back({"scale add_scalar", [](Tape<double>&, X x) { return add_scalar(scale(x[0], 2.5), 1.0); }, {{2, 3}}});
    c.push_back({"add_bias", [](Tape<double>&, X x) { return add_bias(x[0], x[1]); }, {{4, 3}, {1, 3}}});
    c.push_back({"exp", [](Tape<double>&, X x) { return exp(x[0]); }, {{3, 3}}});
    c.push_back({"log", [](Tape<double>&, X x) { return log(x[0]); }, {{3, 3}}, 0.5, 2.0});
    c.push_back({"elu", [](Tape<double>&, X x) { return elu(x[0]); }, {{4, 5}}});
    c.push_back({"relu", [](Tape<double>&, X x) { return relu(x[0]); }, {{4, 5}}});
    c.push_back({"layer_norm", [](Tape<double>&, X x) { return layer_norm(x[0]); }, {{3, 6}}});
    c.push_back({"layer_norm affine", [](Tape<double>&, X x) { return layer_norm(x[0], x[1], x[2]); },
                 {{3, 6}, {1, 6}, {1, 6}}});
    c.push_back({"softmax_rows", [](Tape<double>&, X x) { return softmax_rows(x[0]); }, {{4, 5}}, -3, 3});
    c.push_back({"softmax_rows causal", [](Tape<double>&, X x) { return softmax_rows(x[0], &causal5); }, {{5, 5}},
                 -3, 3});
    c.push_back({"normalize_rows", [](Tape<double>&, X x) { return normalize_rows(x[0], &causal4, 1e-9); },
                 {{4, 4}}, 0.1, 2.0});
    c.push_back({"performer_features", [](Tape<double>&, X x) { return performer_features(x[0], x[1], false); },
                 {{3, 4}, {6, 4}}});
    c.push_back({"gather_rows",
                 [](Tape<double>&, X x) {
                     std::vector<Index> idx{2, 0, 2, 1};
                     return gather_rows(x[0], std::span<const Index>(idx));
                 },
                 {{3, 4}}});
    c.push_back({"concat slice",
                 [](Tape<double>&, X x) {
                     std::vector<V> rows{x[0], x[1]};
                     std::vector<V> cols{x[0], slice_cols(x[1], 1, 2)};
                     auto r = concat_rows<double>(rows);
                     auto cc = concat_cols<double>(cols);
                     return add(slice_cols(r, 0, 3), slice_cols(concat_rows<double>(std::vector<V>{cc, cc}), 1, 3));
                 },
                 {{2, 3}, {2, 3}}});
    c.push_back({"row_sum", [](Tape<double>&, X x) { return row_sum(x[0]); }, {{3, 4}}});
    c.push_back({"mean", [](Tape<double>&, X x) { return mean(x[0]); }, {{3, 4}}});
    c.push_back({"mse", [](Tape<double>&, X x) { return mse(x[0], x[1]); }, {{3, 4}, {3, 4}}});
    c.push_back({"cross_entropy",
                 [](Tape<double>&, X x) {
                     std::vector<Index> tg{1, 0, 3};
                     return cross_entropy(x[0], std::span<const Index>(tg));
                 },
                 {{3, 4}}, -2, 2});
    c.push_back({"conv3x3 stride 1",
                 [](Tape<double>&, X x) { return conv3x3(x[0], x[1], x[2], ConvGeometry{2, 5, 4, 1}); },
                 {{2, 2 * 5 * 4}, {3, 2 * 9}, {1, 3}}});
    c.push_back({"conv3x3 stride 2",
                 [](Tape<double>&, X x) { return conv3x3(x[0], x[1], x[2], ConvGeometry{1, 6, 6, 2}); },
                 {{2, 36}, {2, 9}, {1, 2}}});
    c.push_back({"softmax attention",
                 [](Tape<double>&, X x) { return softmax_attention(x[0], x[1], x[2], true).output; },
                 {{5, 3}, {5, 3}, {5, 3}}});
    c.push_back({"linear attention",
                 [](Tape<double>&, X x) {
                     KernelFeatureMap<double> lin{Backend::linear, {}};
                     return kernel_attention(x[0], x[1], x[2], lin, true).output;
                 },
                 {{5, 3}, {5, 3}, {5, 3}}});
    // query stabilization is treated as a constant; the ratio is invariant to it
    c.push_back({"performer attention",
                 [](Tape<double>&, X x) { return kernel_attention(x[0], x[1], x[2], performer, true).output; },
                 {{5, 3}, {5, 3}, {5, 3}}});
    return c;
}

/// Worst relative error of one case over `seeds` random draws.
inline double primitive_error(const PrimitiveCase& pc, int seeds) {
    double worst = 0;
    for (int seed = 0; seed < seeds; ++seed) {
        std::mt19937_64 rng(1000 + seed);
        std::vector<Mat<double>> inputs;
        for (auto [r, c] : pc.shapes) inputs.push_back(random_mat(r, c, rng, pc.lo, pc.hi));
        worst = std::max(worst, gradient_error(pc.fn, inputs, 7 * seed + 1));
    }
    return worst;
}

}  // namespace seqcl::testing
