#pragma once

// Per-token cost of recurrent attention stepping as the stored context grows.

#include <iosfwd>
#include <span>
#include <vector>

#include "seqcl/attention.hpp"

namespace seqcl {

struct BenchOptions {
    Index dim = 64;        // per-head width
    Index heads = 1;
    Index feature_dim = 0;  // performer features; 0 means 2 * dim
    Index window = 64;      // timed steps after the prefill
    Index trials = 5;
    Index warmup = 1;       // untimed trials run first
    std::uint64_t seed = 0;
};

struct BenchPoint {
    Backend backend = Backend::softmax;
    Index length = 0;            // tokens already in the state
    double ns_per_token = 0;     // median over trials
    std::size_t state_bytes = 0;  // all heads, at `length`
    Index stored_pairs = 0;      // softmax: keys/values held per head
};

/// For each length T: prefill T random tokens, then time `window` further
/// steps on a fresh copy of the prefilled state in every trial.
std::vector<BenchPoint> bench_attention(Backend backend, std::span<const Index> lengths, const BenchOptions& opt);

/// backend,T,ns_per_token,state_bytes
void write_bench_csv(std::ostream& os, std::span<const BenchPoint> points, bool header = true);

}  // namespace seqcl
