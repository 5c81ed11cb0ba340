#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <stdexcept>
#include <string>
#include <vector>

#include "modprompt/image.hpp"
#include "modprompt/rng.hpp"
#include "modprompt/tensor.hpp"

namespace modprompt {

enum class Shape { disk, rectangle, triangle };

struct SceneObject {
  std::string category;
  Shape shape = Shape::disk;
  double cy = 0, cx = 0;  // center, pixels
  double h = 0, w = 0;    // extent, pixels
  double intensity = 0;   // [0,1]
};

struct SceneSpec {
  std::uint64_t seed = 0;
  int canvas_h = 0, canvas_w = 0;
  std::vector<SceneObject> objects;
};

struct GroundTruth {
  std::vector<std::array<double, 4>> boxes;  // x1,y1,x2,y2
  std::vector<std::string> categories;
};

struct SceneLimits {
  int canvas_h = 96;
  int canvas_w = 96;
  int min_objects = 1;
  int max_objects = 4;
  int min_extent = 16;
  int max_extent = 44;
};

inline std::array<double, 4> object_box(const SceneObject& o) {
  return {o.cx - o.w / 2.0, o.cy - o.h / 2.0, o.cx + o.w / 2.0, o.cy + o.h / 2.0};
}

inline GroundTruth ground_truth_for(const SceneSpec& spec) {
  GroundTruth gt;
  for (const auto& o : spec.objects) {
    gt.boxes.push_back(object_box(o));
    gt.categories.push_back(o.category);
  }
  return gt;
}

// The default vocabulary names the three shapes; other names map onto shapes
// by index so category and geometry stay coupled.
inline Shape shape_for_category_index(std::size_t idx) {
  switch (idx % 3) {
    case 0: return Shape::disk;
    case 1: return Shape::rectangle;
    default: return Shape::triangle;
  }
}

inline const std::vector<std::string>& default_vocab() {
  static const std::vector<std::string> v = {"disk", "rectangle", "triangle"};
  return v;
}

namespace detail {

inline double box_pair_iou(const std::array<double, 4>& a, const std::array<double, 4>& b) {
  double iw = std::min(a[2], b[2]) - std::max(a[0], b[0]);
  double ih = std::min(a[3], b[3]) - std::max(a[1], b[1]);
  if (iw <= 0 || ih <= 0) return 0.0;
  double inter = iw * ih;
  double ua = (a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter;
  return inter / ua;
}

}  // namespace detail

// Deterministic function of (seed, vocab, limits). Objects are placed so each
// box lies fully inside the canvas; heavy mutual overlap is resampled away.
inline SceneSpec generate_scene(std::uint64_t seed, const std::vector<std::string>& vocab,
                                const SceneLimits& limits) {
  if (vocab.empty()) throw std::invalid_argument("generate_scene: empty vocabulary");
  if (limits.min_objects < 1 || limits.max_objects < limits.min_objects)
    throw std::invalid_argument("generate_scene: bad object-count limits");
  if (limits.min_extent < 2 || limits.max_extent < limits.min_extent)
    throw std::invalid_argument("generate_scene: bad extent limits");
  if (limits.max_extent > limits.canvas_h || limits.max_extent > limits.canvas_w)
    throw std::invalid_argument("generate_scene: extent exceeds canvas");

  SceneSpec spec;
  spec.seed = seed;
  spec.canvas_h = limits.canvas_h;
  spec.canvas_w = limits.canvas_w;

  Rng rng(hash_combine(seed, hash_str("scene")));
  int n = static_cast<int>(rng.uniform_int(limits.min_objects, limits.max_objects));
  for (int i = 0; i < n; ++i) {
    SceneObject obj;
    std::size_t ci = static_cast<std::size_t>(rng.uniform_int(0, static_cast<int>(vocab.size()) - 1));
    obj.category = vocab[ci];
    obj.shape = shape_for_category_index(ci);
    for (int attempt = 0; attempt < 50; ++attempt) {
      int h = static_cast<int>(rng.uniform_int(limits.min_extent, limits.max_extent));
      int w = static_cast<int>(rng.uniform_int(limits.min_extent, limits.max_extent));
      int y1 = static_cast<int>(rng.uniform_int(0, limits.canvas_h - h));
      int x1 = static_cast<int>(rng.uniform_int(0, limits.canvas_w - w));
      obj.h = h;
      obj.w = w;
      obj.cy = y1 + h / 2.0;
      obj.cx = x1 + w / 2.0;
      bool crowded = false;
      for (const auto& prev : spec.objects)
        if (detail::box_pair_iou(object_box(obj), object_box(prev)) > 0.25) crowded = true;
      if (!crowded) break;
    }
    obj.intensity = rng.uniform(0.35, 1.0);
    spec.objects.push_back(obj);
  }
  return spec;
}

namespace detail {

inline bool point_in_object(const SceneObject& o, double y, double x) {
  double hy = o.h / 2.0, hx = o.w / 2.0;
  double dy = y - o.cy, dx = x - o.cx;
  switch (o.shape) {
    case Shape::disk: {
      double a = dx / hx, b = dy / hy;
      return a * a + b * b <= 1.0;
    }
    case Shape::rectangle:
      return std::abs(dx) <= hx && std::abs(dy) <= hy;
    case Shape::triangle: {
      // Apex at top-center, base along the bottom edge.
      double t = (y - (o.cy - hy)) / o.h;
      if (t < 0.0 || t > 1.0) return false;
      return std::abs(dx) <= hx * t;
    }
  }
  return false;
}

// 2x2 supersampled coverage of each object over the canvas.
inline std::vector<Tensor> object_coverage(const SceneSpec& spec) {
  std::vector<Tensor> masks;
  masks.reserve(spec.objects.size());
  for (const auto& o : spec.objects) {
    Tensor m({spec.canvas_h, spec.canvas_w, 1});
    auto box = object_box(o);
    int y0 = std::max(0, static_cast<int>(std::floor(box[1])) - 1);
    int y1 = std::min(spec.canvas_h, static_cast<int>(std::ceil(box[3])) + 1);
    int x0 = std::max(0, static_cast<int>(std::floor(box[0])) - 1);
    int x1 = std::min(spec.canvas_w, static_cast<int>(std::ceil(box[2])) + 1);
    for (int y = y0; y < y1; ++y)
      for (int x = x0; x < x1; ++x) {
        int hits = 0;
        for (int sy = 0; sy < 2; ++sy)
          for (int sx = 0; sx < 2; ++sx)
            if (point_in_object(o, y + 0.25 + 0.5 * sy, x + 0.25 + 0.5 * sx)) ++hits;
        m.at3(y, x, 0) = hits / 4.0;
      }
    masks.push_back(std::move(m));
  }
  return masks;
}

// Bilinear value noise on an 8px lattice, in [0,1].
inline Tensor value_noise(int h, int w, std::uint64_t seed, int cell = 8) {
  int gh = h / cell + 2, gw = w / cell + 2;
  std::vector<double> lattice(static_cast<std::size_t>(gh) * gw);
  Rng rng(seed);
  for (auto& v : lattice) v = rng.uniform();
  Tensor out({h, w, 1});
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      double fy = static_cast<double>(y) / cell, fx = static_cast<double>(x) / cell;
      int iy = static_cast<int>(fy), ix = static_cast<int>(fx);
      double ty = fy - iy, tx = fx - ix;
      auto at = [&](int yy, int xx) { return lattice[static_cast<std::size_t>(yy) * gw + xx]; };
      double v = at(iy, ix) * (1 - ty) * (1 - tx) + at(iy, ix + 1) * (1 - ty) * tx +
                 at(iy + 1, ix) * ty * (1 - tx) + at(iy + 1, ix + 1) * ty * tx;
      out.at3(y, x, 0) = v;
    }
  return out;
}

inline std::array<double, 3> category_hue(std::size_t idx) {
  switch (idx % 3) {
    case 0: return {1.00, 0.25, 0.20};  // disk: red
    case 1: return {0.20, 0.95, 0.30};  // rectangle: green
    default: return {0.25, 0.35, 1.00};  // triangle: blue
  }
}

inline std::size_t category_index_of(const SceneObject& o) {
  switch (o.shape) {
    case Shape::disk: return 0;
    case Shape::rectangle: return 1;
    default: return 2;
  }
}

// Separable 3x3 box blur applied `passes` times.
inline void box_blur(Tensor& t, int passes) {
  int h = t.dim(0), w = t.dim(1);
  Tensor tmp({h, w, 1});
  for (int p = 0; p < passes; ++p) {
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x) {
        double s = 0;
        int n = 0;
        for (int dx = -1; dx <= 1; ++dx) {
          int xx = x + dx;
          if (xx < 0 || xx >= w) continue;
          s += t.at3(y, xx, 0);
          ++n;
        }
        tmp.at3(y, x, 0) = s / n;
      }
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x) {
        double s = 0;
        int n = 0;
        for (int dy = -1; dy <= 1; ++dy) {
          int yy = y + dy;
          if (yy < 0 || yy >= h) continue;
          s += tmp.at3(yy, x, 0);
          ++n;
        }
        t.at3(y, x, 0) = s / n;
      }
  }
}

}  // namespace detail

// Renders the spec in the requested modality. The boxes are shared across
// modalities; only appearance changes.
//
//   rgb          — category-colored shapes on a textured mid-gray background
//   pseudo_ir    — grayscale: bright blurred blobs, dark noisy background,
//                  object brightness inversely tied to the rgb intensity
//   pseudo_depth — grayscale: smooth gradient background, near-constant
//                  silhouettes
inline Image render_modality(const SceneSpec& spec, Modality modality) {
  int H = spec.canvas_h, W = spec.canvas_w;
  Image img = make_image(H, W, modality);
  auto masks = detail::object_coverage(spec);

  if (modality == Modality::rgb) {
    Tensor noise = detail::value_noise(H, W, hash_combine(spec.seed, hash_str("bg-rgb")));
    Rng fine(hash_combine(spec.seed, hash_str("bg-rgb-fine")));
    for (int y = 0; y < H; ++y)
      for (int x = 0; x < W; ++x) {
        double base = 0.45 + 0.18 * noise.at3(y, x, 0);
        for (int c = 0; c < 3; ++c)
          img.pixels.at3(y, x, c) = base + 0.03 * (fine.uniform() - 0.5);
      }
    for (std::size_t i = 0; i < spec.objects.size(); ++i) {
      const auto& o = spec.objects[i];
      auto hue = detail::category_hue(detail::category_index_of(o));
      double level = 0.25 + 0.75 * o.intensity;
      for (int y = 0; y < H; ++y)
        for (int x = 0; x < W; ++x) {
          double cov = masks[i].at3(y, x, 0);
          if (cov <= 0) continue;
          for (int c = 0; c < 3; ++c) {
            double obj = hue[c] * level;
            img.pixels.at3(y, x, c) = (1 - cov) * img.pixels.at3(y, x, c) + cov * obj;
          }
        }
    }
  } else if (modality == Modality::pseudo_ir) {
    Tensor noise = detail::value_noise(H, W, hash_combine(spec.seed, hash_str("bg-ir")));
    Tensor lum({H, W, 1});
    for (int y = 0; y < H; ++y)
      for (int x = 0; x < W; ++x) lum.at3(y, x, 0) = 0.05 + 0.10 * noise.at3(y, x, 0);
    // Thermal-style: low rgb intensity reads hot.
    Tensor blobs({H, W, 1});
    for (std::size_t i = 0; i < spec.objects.size(); ++i) {
      const auto& o = spec.objects[i];
      double heat = 0.55 + 0.40 * (1.0 - o.intensity);
      for (int y = 0; y < H; ++y)
        for (int x = 0; x < W; ++x) {
          double cov = masks[i].at3(y, x, 0);
          if (cov > 0) blobs.at3(y, x, 0) = std::max(blobs.at3(y, x, 0), cov * heat);
        }
    }
    detail::box_blur(blobs, 2);
    Rng grain(hash_combine(spec.seed, hash_str("ir-grain")));
    for (int y = 0; y < H; ++y)
      for (int x = 0; x < W; ++x) {
        double v = std::max(lum.at3(y, x, 0), blobs.at3(y, x, 0));
        v += grain.normal(0.0, 0.03);
        v = std::min(1.0, std::max(0.0, v));
        for (int c = 0; c < 3; ++c) img.pixels.at3(y, x, c) = v;
      }
  } else {  // pseudo_depth
    Rng dir(hash_combine(spec.seed, hash_str("depth-dir")));
    double a = dir.uniform(0.25, 0.75);
    Tensor noise = detail::value_noise(H, W, hash_combine(spec.seed, hash_str("bg-depth")), 16);
    for (int y = 0; y < H; ++y)
      for (int x = 0; x < W; ++x) {
        double g = a * (static_cast<double>(y) / H) + (1 - a) * (static_cast<double>(x) / W);
        double v = 0.15 + 0.42 * g + 0.06 * noise.at3(y, x, 0);
        for (int c = 0; c < 3; ++c) img.pixels.at3(y, x, c) = v;
      }
    for (std::size_t i = 0; i < spec.objects.size(); ++i) {
      const auto& o = spec.objects[i];
      double depth = 0.76 + 0.19 * o.intensity;
      for (int y = 0; y < H; ++y)
        for (int x = 0; x < W; ++x) {
          double cov = masks[i].at3(y, x, 0);
          if (cov <= 0) continue;
          for (int c = 0; c < 3; ++c)
            img.pixels.at3(y, x, c) = (1 - cov) * img.pixels.at3(y, x, c) + cov * depth;
        }
    }
  }

  for (auto& v : img.pixels.v) v = std::min(1.0, std::max(0.0, v));
  return img;
}

}  // namespace modprompt
