#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <numeric>
#include <stdexcept>
#include <string>
#include <vector>

namespace modprompt {

// Dense row-major tensor of doubles. Rank is small (<= 3 in practice);
// images and feature maps are stored [H, W, C] so the innermost loop of
// every kernel runs over contiguous channel values.
struct Tensor {
  std::vector<int> shape;
  std::vector<double> v;

  Tensor() = default;
  explicit Tensor(std::vector<int> s, double fill = 0.0) : shape(std::move(s)) {
    v.assign(static_cast<std::size_t>(count(shape)), fill);
  }

  static std::int64_t count(const std::vector<int>& s) {
    std::int64_t n = 1;
    for (int d : s) {
      if (d < 0) throw std::invalid_argument("tensor: negative dimension");
      n *= d;
    }
    return n;
  }

  std::int64_t size() const { return static_cast<std::int64_t>(v.size()); }
  bool empty() const { return v.empty(); }

  int dim(int i) const { return shape.at(static_cast<std::size_t>(i)); }

  double& at(std::int64_t i) { return v[static_cast<std::size_t>(i)]; }
  const double& at(std::int64_t i) const { return v[static_cast<std::size_t>(i)]; }

  // [H,W,C] accessors.
  double& at3(int y, int x, int c) {
    return v[(static_cast<std::size_t>(y) * shape[1] + x) * shape[2] + c];
  }
  const double& at3(int y, int x, int c) const {
    return v[(static_cast<std::size_t>(y) * shape[1] + x) * shape[2] + c];
  }
  // [N,M] accessors.
  double& at2(int r, int c) { return v[static_cast<std::size_t>(r) * shape[1] + c]; }
  const double& at2(int r, int c) const { return v[static_cast<std::size_t>(r) * shape[1] + c]; }

  void fill(double x) { std::fill(v.begin(), v.end(), x); }

  bool same_shape(const Tensor& o) const { return shape == o.shape; }

  bool all_finite() const {
    for (double x : v)
      if (!std::isfinite(x)) return false;
    return true;
  }

  double min() const { return v.empty() ? 0.0 : *std::min_element(v.begin(), v.end()); }
  double max() const { return v.empty() ? 0.0 : *std::max_element(v.begin(), v.end()); }

  double abs_max() const {
    double m = 0.0;
    for (double x : v) m = std::max(m, std::abs(x));
    return m;
  }

  static std::string shape_str(const std::vector<int>& s) {
    std::string out = "[";
    for (std::size_t i = 0; i < s.size(); ++i) {
      if (i) out += ",";
      out += std::to_string(s[i]);
    }
    return out + "]";
  }
};

inline bool bitwise_equal(const Tensor& a, const Tensor& b) {
  if (a.shape != b.shape) return false;
  if (a.v.size() != b.v.size()) return false;
  return a.v.empty() ||
         std::memcmp(a.v.data(), b.v.data(), a.v.size() * sizeof(double)) == 0;
}

// FNV-1a over the raw bytes; used for frozen-weight checks.
inline std::uint64_t content_hash(const Tensor& t) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  auto mix = [&h](const unsigned char* p, std::size_t n) {
    for (std::size_t i = 0; i < n; ++i) {
      h ^= p[i];
      h *= 0x100000001b3ULL;
    }
  };
  for (int d : t.shape) {
    auto u = static_cast<std::uint32_t>(d);
    mix(reinterpret_cast<const unsigned char*>(&u), sizeof(u));
  }
  if (!t.v.empty())
    mix(reinterpret_cast<const unsigned char*>(t.v.data()), t.v.size() * sizeof(double));
  return h;
}

}  // namespace modprompt
