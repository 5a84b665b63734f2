#include "dnet/synth.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <numbers>
#include <random>

namespace dnet {

namespace {

struct Point {
  double x;
  double y;
};

struct Stroke {
  Point a;
  Point b;
  double radius;
};

class TreeGrower {
 public:
  TreeGrower(std::mt19937_64& rng, int max_depth) : rng_(rng), max_depth_(max_depth) {}

  void grow(Point start, double angle, double length, int width, int depth,
            std::vector<Stroke>& out) {
    std::vector<Point> path{start};
    Point p = start;
    const int pieces = 2;
    for (int k = 0; k < pieces; ++k) {
      angle += uniform(-0.45, 0.45);
      const double seg = length / pieces;
      const Point end{p.x + seg * std::cos(angle), p.y + seg * std::sin(angle)};
      const double bend = uniform(-0.35, 0.35) * seg;
      const Point ctrl{(p.x + end.x) / 2 - bend * std::sin(angle),
                       (p.y + end.y) / 2 + bend * std::cos(angle)};
      const int samples = std::max(4, static_cast<int>(seg));
      for (int s = 1; s <= samples; ++s) {
        const double t = static_cast<double>(s) / samples;
        const double u = 1 - t;
        path.push_back({u * u * p.x + 2 * u * t * ctrl.x + t * t * end.x,
                        u * u * p.y + 2 * u * t * ctrl.y + t * t * end.y});
      }
      p = end;
    }
    for (std::size_t i = 1; i < path.size(); ++i) {
      out.push_back({path[i - 1], path[i], 0.5 * width});
    }
    if (depth >= max_depth_ || path.size() < 4) return;
    const int branches = 1 + static_cast<int>(rng_() % 2);
    for (int b = 0; b < branches; ++b) {
      const std::size_t at = 1 + rng_() % (path.size() - 2);
      const Point from = path[at];
      const Point next = path[at + 1];
      const double heading = std::atan2(next.y - from.y, next.x - from.x);
      const double side = (rng_() % 2) ? 1.0 : -1.0;
      const int child_width = std::max(1, width - 1 - static_cast<int>(rng_() % 2));
      grow(from, heading + side * uniform(0.5, 1.2), length * uniform(0.45, 0.7),
           child_width, depth + 1, out);
    }
  }

 private:
  double uniform(double lo, double hi) {
    return std::uniform_real_distribution<double>(lo, hi)(rng_);
  }

  std::mt19937_64& rng_;
  int max_depth_;
};

double segment_distance(Point p, const Stroke& s) {
  const double dx = s.b.x - s.a.x;
  const double dy = s.b.y - s.a.y;
  const double len2 = dx * dx + dy * dy;
  double t = len2 > 0 ? ((p.x - s.a.x) * dx + (p.y - s.a.y) * dy) / len2 : 0.0;
  t = std::clamp(t, 0.0, 1.0);
  const double ex = s.a.x + t * dx - p.x;
  const double ey = s.a.y + t * dy - p.y;
  return std::sqrt(ex * ex + ey * ey);
}

void rasterize(const std::vector<Stroke>& strokes, int h, int w, std::vector<float>& mask) {
  for (const Stroke& s : strokes) {
    const int x0 = std::max(0, static_cast<int>(std::floor(std::min(s.a.x, s.b.x) - s.radius)));
    const int x1 = std::min(w - 1, static_cast<int>(std::ceil(std::max(s.a.x, s.b.x) + s.radius)));
    const int y0 = std::max(0, static_cast<int>(std::floor(std::min(s.a.y, s.b.y) - s.radius)));
    const int y1 = std::min(h - 1, static_cast<int>(std::ceil(std::max(s.a.y, s.b.y) + s.radius)));
    for (int y = y0; y <= y1; ++y)
      for (int x = x0; x <= x1; ++x)
        if (segment_distance({static_cast<double>(x), static_cast<double>(y)}, s) <= s.radius)
          mask[static_cast<std::size_t>(y) * w + x] = 1.0f;
  }
}

}  // namespace

Dataset synth_vessels(std::uint64_t seed, int n, int h, int w, const SynthOptions& opts) {
  if (n < 0 || h < 16 || w < 16 || h % 16 != 0 || w % 16 != 0) {
    throw Error(ErrorCode::invalid_argument,
                "synth_vessels: h and w must be positive multiples of 16");
  }
  if (opts.min_trees < 1 || opts.max_trees < opts.min_trees) {
    throw Error(ErrorCode::invalid_argument, "synth_vessels: bad tree count range");
  }
  std::mt19937_64 rng(seed);
  auto uniform = [&rng](double lo, double hi) {
    return std::uniform_real_distribution<double>(lo, hi)(rng);
  };
  constexpr std::array<double, 3> tint{1.0, 0.85, 0.7};
  Dataset out;
  out.reserve(n);
  for (int s = 0; s < n; ++s) {
    std::vector<Stroke> strokes;
    std::vector<std::size_t> tree_start;
    TreeGrower grower(rng, opts.max_depth);
    const int trees =
        opts.min_trees + static_cast<int>(rng() % (opts.max_trees - opts.min_trees + 1));
    for (int t = 0; t < trees; ++t) {
      tree_start.push_back(strokes.size());
      // Enter from a random border point, heading roughly inwards.
      Point start;
      switch (rng() % 4) {
        case 0: start = {uniform(0, w - 1), 0}; break;
        case 1: start = {uniform(0, w - 1), static_cast<double>(h - 1)}; break;
        case 2: start = {0, uniform(0, h - 1)}; break;
        default: start = {static_cast<double>(w - 1), uniform(0, h - 1)}; break;
      }
      const double inward = std::atan2(h / 2.0 - start.y, w / 2.0 - start.x);
      const int width = 2 + static_cast<int>(rng() % 3);
      grower.grow(start, inward + uniform(-0.6, 0.6), uniform(0.6, 1.0) * std::max(h, w),
                  width, 0, strokes);
    }
    std::vector<float> mask(static_cast<std::size_t>(h) * w, 0.0f);
    rasterize(strokes, h, w, mask);
    // Keep the vessel fraction bounded: drop whole trees from the end.
    while (tree_start.size() > 1 &&
           std::count(mask.begin(), mask.end(), 1.0f) > opts.max_fraction * mask.size()) {
      strokes.resize(tree_start.back());
      tree_start.pop_back();
      std::fill(mask.begin(), mask.end(), 0.0f);
      rasterize(strokes, h, w, mask);
    }

    const double base = uniform(0.05, 0.2);
    const double contrast = uniform(opts.min_contrast, opts.max_contrast);
    std::normal_distribution<double> noise(0.0, opts.noise_sigma);
    std::vector<float> image(static_cast<std::size_t>(h) * w * 3);
    for (std::size_t p = 0; p < mask.size(); ++p) {
      const double level = base + (mask[p] > 0 ? contrast : 0.0);
      for (int c = 0; c < 3; ++c) {
        image[p * 3 + c] = static_cast<float>(std::clamp(level * tint[c] + noise(rng), 0.0, 1.0));
      }
    }
    out.push_back({Tensor<float>({1, h, w, 3}, std::move(image)),
                   Tensor<float>({1, h, w, 1}, std::move(mask)), Tensor<float>()});
  }
  return out;
}

Batch stack_batch(const Dataset& data, std::span<const std::size_t> indices) {
  if (indices.empty()) throw Error(ErrorCode::invalid_argument, "stack_batch: empty batch");
  const Shape is = data.at(indices[0]).image.shape();
  const Shape ms = data.at(indices[0]).mask.shape();
  const int n = static_cast<int>(indices.size());
  std::vector<float> images;
  std::vector<float> masks;
  images.reserve(is.size() * n);
  masks.reserve(ms.size() * n);
  for (std::size_t idx : indices) {
    const Sample& s = data.at(idx);
    if (!(s.image.shape() == is) || !(s.mask.shape() == ms)) {
      throw Error(ErrorCode::shape_mismatch, "stack_batch: samples differ in shape");
    }
    images.insert(images.end(), s.image.data().begin(), s.image.data().end());
    masks.insert(masks.end(), s.mask.data().begin(), s.mask.data().end());
  }
  return {Tensor<float>({n * is.n, is.h, is.w, is.c}, std::move(images)),
          Tensor<float>({n * ms.n, ms.h, ms.w, ms.c}, std::move(masks))};
}

}  // namespace dnet
