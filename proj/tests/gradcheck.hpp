#pragma once

// Central finite-difference oracle shared by the unit and acceptance tests.

#include <algorithm>
#include <cmath>
#include <functional>
#include <random>
#include <vector>

#include "seqcl/tensor.hpp"

namespace seqcl::testing {

using Fn = std::function<Var<double>(Tape<double>&, const std::vector<Var<double>>&)>;

inline Mat<double> random_mat(Index r, Index c, std::mt19937_64& rng, double lo = -1.0, double hi = 1.0) {
    std::uniform_real_distribution<double> u(lo, hi);
    Mat<double> m(r, c);
    for (Index i = 0; i < m.size(); ++i) m.data()[i] = u(rng);
    return m;
}

/// ‖a − b‖ / max(‖a‖, ‖b‖), with a small floor on the denominator.
inline double relative_error(const Mat<double>& a, const Mat<double>& b) {
    const double denom = std::max({a.norm(), b.norm(), 1e-12});
    return (a - b).norm() / denom;
}

/// Scalar objective: sum(fn(inputs) ⊙ projection), a fixed random projection
/// so every output element contributes.
inline double project(Tape<double>& tape, const Fn& fn, const std::vector<Mat<double>>& values,
                      const Mat<double>* projection, std::vector<Var<double>>* leaves_out = nullptr,
                      Var<double>* loss_out = nullptr) {
    std::vector<Var<double>> leaves;
    for (const auto& v : values) leaves.push_back(tape.leaf(v));
    Var<double> out = fn(tape, leaves);
    Var<double> loss = projection ? sum(mul_const(out, *projection)) : sum(out);
    if (leaves_out) *leaves_out = leaves;
    if (loss_out) *loss_out = loss;
    return loss.item();
}

/// Largest relative error between analytic and central-difference gradients
/// over all inputs.
inline double gradient_error(const Fn& fn, std::vector<Mat<double>> values, std::uint64_t seed,
                             double step = 1e-4, bool project_output = true) {
    std::mt19937_64 rng(seed);
    Mat<double> projection;
    {
        Tape<double> probe(false);
        std::vector<Var<double>> leaves;
        for (const auto& v : values) leaves.push_back(probe.constant(v));
        auto out = fn(probe, leaves);
        projection = random_mat(out.rows(), out.cols(), rng);
    }
    const Mat<double>* proj = project_output ? &projection : nullptr;

    Tape<double> tape;
    std::vector<Var<double>> leaves;
    Var<double> loss;
    project(tape, fn, values, proj, &leaves, &loss);
    tape.backward(loss);

    double worst = 0;
    for (std::size_t k = 0; k < values.size(); ++k) {
        Mat<double> analytic = tape.has_grad(leaves[k].id()) ? leaves[k].grad()
                                                              : Mat<double>::Zero(values[k].rows(), values[k].cols());
        Mat<double> numeric(values[k].rows(), values[k].cols());
        for (Index i = 0; i < values[k].size(); ++i) {
            const double orig = values[k].data()[i];
            values[k].data()[i] = orig + step;
            Tape<double> tp(false);
            const double fp = project(tp, fn, values, proj);
            values[k].data()[i] = orig - step;
            Tape<double> tm(false);
            const double fm = project(tm, fn, values, proj);
            values[k].data()[i] = orig;
            numeric.data()[i] = (fp - fm) / (2 * step);
        }
        worst = std::max(worst, relative_error(analytic, numeric));
    }
    return worst;
}

}  // namespace seqcl::testing
