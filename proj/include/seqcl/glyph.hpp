#pragma once

// Procedural 32×32 grayscale glyphs: each class is a fixed set of 3-6 smooth
// strokes; each instance re-rasterizes them with small translation and scale
// jitter.

#include <Eigen/Dense>

#include <cstdint>
#include <random>
#include <utility>

namespace seqcl {

/// Row-major grayscale image with values in [0, 1].
using Image = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

inline constexpr int kGlyphSize = 32;

struct GlyphJitter {
    double dx = 0;     // pixels
    double dy = 0;     // pixels
    double scale = 1;  // about the image center
};

/// Uniform jitter: ±1px translation, ±5% scale.
GlyphJitter sample_jitter(std::mt19937_64& rng);

/// Deterministic glyph for `class_seed` rendered with `jitter`.
Image glyph_generate(std::uint64_t class_seed, const GlyphJitter& jitter = {});

/// Bilinear rotation by `angle` radians (counter-clockwise) about the image
/// center; samples outside the source are 0.
Image rotate(const Image& img, double angle);

/// Top and bottom halves (rows [0, h/2) and [h/2, h)).
std::pair<Image, Image> split_halves(const Image& img);

/// 1 - cos(predicted - target), in [0, 2].
double rotation_score(double predicted, double target);

}  // namespace seqcl
