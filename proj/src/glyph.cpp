#include "seqcl/glyph.hpp"

#include <algorithm>
#include <cmath>
#include <vector>

namespace seqcl {

namespace {

struct Point {
    double x, y;
};

struct Stroke {
    Point a, ctrl, b;  // quadratic Bezier
};

std::vector<Stroke> class_strokes(std::uint64_t class_seed) {
    std::mt19937_64 rng(class_seed * 0x9E3779B97F4A7C15ULL + 0x632BE59BD9B4E019ULL);
    std::uniform_int_distribution<int> count(3, 6);
    std::uniform_real_distribution<double> coord(0.18, 0.82);
    const int n = count(rng);
    std::vector<Stroke> strokes;
    for (int i = 0; i < n; ++i)
        strokes.push_back({{coord(rng), coord(rng)}, {coord(rng), coord(rng)}, {coord(rng), coord(rng)}});
    return strokes;
}

double segment_distance(Point p, Point a, Point b) {
    const double vx = b.x - a.x, vy = b.y - a.y;
    const double len2 = vx * vx + vy * vy;
    double t = len2 > 0 ? ((p.x - a.x) * vx + (p.y - a.y) * vy) / len2 : 0.0;
    t = std::clamp(t, 0.0, 1.0);
    const double dx = p.x - (a.x + t * vx), dy = p.y - (a.y + t * vy);
    return std::sqrt(dx * dx + dy * dy);
}

}  // namespace

GlyphJitter sample_jitter(std::mt19937_64& rng) {
    std::uniform_real_distribution<double> shift(-1.0, 1.0);
    std::uniform_real_distribution<double> scale(0.95, 1.05);
    GlyphJitter j;
    j.dx = shift(rng);
    j.dy = shift(rng);
    j.scale = scale(rng);
    return j;
}

Image glyph_generate(std::uint64_t class_seed, const GlyphJitter& jitter) {
    constexpr int kPieces = 10;
    constexpr double kHalfWidth = 1.1;  // pixels
    const double size = kGlyphSize;
    const double c = size / 2.0;

    std::vector<std::pair<Point, Point>> segments;
    for (const Stroke& s : class_strokes(class_seed)) {
        auto at = [&](double t) {
            const double u = 1 - t;
            Point p{u * u * s.a.x + 2 * u * t * s.ctrl.x + t * t * s.b.x,
                    u * u * s.a.y + 2 * u * t * s.ctrl.y + t * t * s.b.y};
            return Point{(p.x * size - c) * jitter.scale + c + jitter.dx, (p.y * size - c) * jitter.scale + c + jitter.dy};
        };
        Point prev = at(0);
        for (int i = 1; i <= kPieces; ++i) {
            Point next = at(static_cast<double>(i) / kPieces);
            segments.emplace_back(prev, next);
            prev = next;
        }
    }

    // coverage falls off with distance, so the max over segments equals the
    // coverage of the nearest one; each segment only touches its bounding box
    Image img = Image::Zero(kGlyphSize, kGlyphSize);
    const double reach = kHalfWidth + 0.5;
    for (const auto& [a, b] : segments) {
        const int x0 = std::max(0, static_cast<int>(std::floor(std::min(a.x, b.x) - reach - 0.5)));
        const int x1 = std::min(kGlyphSize - 1, static_cast<int>(std::ceil(std::max(a.x, b.x) + reach - 0.5)));
        const int y0 = std::max(0, static_cast<int>(std::floor(std::min(a.y, b.y) - reach - 0.5)));
        const int y1 = std::min(kGlyphSize - 1, static_cast<int>(std::ceil(std::max(a.y, b.y) + reach - 0.5)));
        for (int y = y0; y <= y1; ++y)
            for (int x = x0; x <= x1; ++x) {
                const double cover = std::clamp(reach - segment_distance({x + 0.5, y + 0.5}, a, b), 0.0, 1.0);
                img(y, x) = std::max(img(y, x), cover);
            }
    }
    return img;
}

Image rotate(const Image& img, double angle) {
    const double cy = (img.rows() - 1) / 2.0, cx = (img.cols() - 1) / 2.0;
    const double cs = std::cos(angle), sn = std::sin(angle);
    Image out = Image::Zero(img.rows(), img.cols());
    auto pixel = [&](Eigen::Index y, Eigen::Index x) {
        return (y >= 0 && y < img.rows() && x >= 0 && x < img.cols()) ? img(y, x) : 0.0;
    };
    for (Eigen::Index y = 0; y < img.rows(); ++y)
        for (Eigen::Index x = 0; x < img.cols(); ++x) {
            // inverse map: rotate the destination coordinate by -angle
            const double rx = x - cx, ry = y - cy;
            const double sx = cs * rx + sn * ry + cx;
            const double sy = -sn * rx + cs * ry + cy;
            const double fx = std::floor(sx), fy = std::floor(sy);
            const double ax = sx - fx, ay = sy - fy;
            const auto ix = static_cast<Eigen::Index>(fx), iy = static_cast<Eigen::Index>(fy);
            out(y, x) = (1 - ay) * ((1 - ax) * pixel(iy, ix) + ax * pixel(iy, ix + 1)) +
                        ay * ((1 - ax) * pixel(iy + 1, ix) + ax * pixel(iy + 1, ix + 1));
        }
    return out;
}

std::pair<Image, Image> split_halves(const Image& img) {
    const auto h = img.rows() / 2;
    return {img.topRows(h), img.bottomRows(img.rows() - h)};
}

double rotation_score(double predicted, double target) { return 1.0 - std::cos(predicted - target); }

}  // namespace seqcl
