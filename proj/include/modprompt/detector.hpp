#pragma once

#include <stdexcept>
#include <string>
#include <vector>

#include "modprompt/autograd.hpp"
#include "modprompt/params.hpp"
#include "modprompt/rng.hpp"

namespace modprompt {

// Small anchor-free open-vocabulary detector. A strided conv backbone maps
// the image to a G x G feature grid; the head scores each cell against the
// category embeddings by scaled cosine similarity and regresses distances to
// the four box sides. Parameters split cleanly into backbone.* and head.*.
struct DetectorConfig {
  int image_h = 96;
  int image_w = 96;
  std::vector<int> widths = {16, 32, 64, 64};
  std::vector<int> strides = {2, 2, 2, 1};
  int norm_groups = 8;
  int embed_dim = 32;

  int total_stride() const {
    int s = 1;
    for (int v : strides) s *= v;
    return s;
  }
  int grid_h() const { return image_h / total_stride(); }
  int grid_w() const { return image_w / total_stride(); }
};

struct RawPredictions {
  Var logits;   // [G*G, K] scaled cosine similarities
  Var offsets;  // [G, G, 4] distances (l,t,r,b) in pixels, positive
  int grid_h = 0, grid_w = 0;
  double stride = 0;
};

namespace detail {

inline Tensor kaiming_conv(Rng& rng, int co, int kh, int kw, int ci) {
  Tensor w({co, kh, kw, ci});
  double bound = std::sqrt(6.0 / (kh * kw * ci));
  for (auto& v : w.v) v = rng.uniform(-bound, bound);
  return w;
}

inline void add_conv(ParamDict& p, Rng& rng, const std::string& prefix, int co, int k, int ci) {
  p.add(prefix + ".weight", kaiming_conv(rng, co, k, k, ci));
  p.add(prefix + ".bias", Tensor({co}));
}

inline void add_norm(ParamDict& p, const std::string& prefix, int c) {
  p.add(prefix + ".gamma", Tensor({c}, 1.0));
  p.add(prefix + ".beta", Tensor({c}));
}

}  // namespace detail

inline void init_detector_params(ParamDict& p, const DetectorConfig& cfg, std::uint64_t seed) {
  Rng rng(hash_combine(seed, hash_str("detector-init")));
  int ci = 3;
  for (std::size_t i = 0; i < cfg.widths.size(); ++i) {
    std::string blk = "backbone.block" + std::to_string(i);
    detail::add_conv(p, rng, blk + ".conv", cfg.widths[i], 3, ci);
    detail::add_norm(p, blk + ".norm", cfg.widths[i]);
    ci = cfg.widths[i];
  }
  detail::add_conv(p, rng, "head.cls.conv", ci, 3, ci);
  detail::add_norm(p, "head.cls.norm", ci);
  detail::add_conv(p, rng, "head.cls.proj", cfg.embed_dim, 1, ci);
  detail::add_conv(p, rng, "head.box.conv", ci, 3, ci);
  detail::add_norm(p, "head.box.norm", ci);
  // Zero-init box projection: raw 0 -> offsets equal one stride on each side.
  p.add("head.box.proj.weight", Tensor({4, 1, 1, ci}));
  p.add("head.box.proj.bias", Tensor({4}));
  p.add("head.temperature", Tensor({1}, 10.0));
  p.add("head.logit_bias", Tensor({1}, -2.0));
}

// Forward pass; differentiable w.r.t. the image leaf, the embedding matrix
// and every parameter. `embeddings` must be [K, D] with unit-norm rows.
inline RawPredictions detector_forward(const Var& image, const Var& embeddings, ParamDict& p,
                                       const DetectorConfig& cfg) {
  if (image->val.shape.size() != 3 || image->val.dim(2) != 3)
    throw std::invalid_argument("detector_forward: image must be [H,W,3]");
  if (image->val.dim(0) != cfg.image_h || image->val.dim(1) != cfg.image_w)
    throw std::invalid_argument("detector_forward: image size mismatch");
  if (embeddings->val.shape.size() != 2 || embeddings->val.dim(1) != cfg.embed_dim)
    throw std::invalid_argument("detector_forward: embedding dim mismatch with D");

  Var h = image;
  for (std::size_t i = 0; i < cfg.widths.size(); ++i) {
    std::string blk = "backbone.block" + std::to_string(i);
    h = conv2d(h, p.at(blk + ".conv.weight"), p.at(blk + ".conv.bias"), cfg.strides[i], 1);
    h = group_norm(h, p.at(blk + ".norm.gamma"), p.at(blk + ".norm.beta"), cfg.norm_groups);
    h = silu(h);
  }

  Var c = conv2d(h, p.at("head.cls.conv.weight"), p.at("head.cls.conv.bias"), 1, 1);
  c = group_norm(c, p.at("head.cls.norm.gamma"), p.at("head.cls.norm.beta"), cfg.norm_groups);
  c = silu(c);
  c = conv2d(c, p.at("head.cls.proj.weight"), p.at("head.cls.proj.bias"), 1, 0);
  int gh = cfg.grid_h(), gw = cfg.grid_w();
  Var feat = l2norm_rows(reshape(c, {gh * gw, cfg.embed_dim}));
  Var logits = affine_scalar(matmul_nt(feat, embeddings), p.at("head.temperature"),
                             p.at("head.logit_bias"));

  Var b = conv2d(h, p.at("head.box.conv.weight"), p.at("head.box.conv.bias"), 1, 1);
  b = group_norm(b, p.at("head.box.norm.gamma"), p.at("head.box.norm.beta"), cfg.norm_groups);
  b = silu(b);
  b = conv2d(b, p.at("head.box.proj.weight"), p.at("head.box.proj.bias"), 1, 0);
  Var offsets = scale(exp_capped(b), static_cast<double>(cfg.total_stride()));

  if (!logits->val.all_finite())
    throw std::runtime_error("detector_forward: non-finite logits");

  RawPredictions raw;
  raw.logits = logits;
  raw.offsets = offsets;
  raw.grid_h = gh;
  raw.grid_w = gw;
  raw.stride = static_cast<double>(cfg.total_stride());
  return raw;
}

// Decoded box corners from the per-cell side distances; linear in the offsets.
inline Var decode_boxes(const Var& offsets, double stride) {
  int gh = offsets->val.dim(0), gw = offsets->val.dim(1);
  Var out = make_node({gh * gw, 4}, {offsets});
  for (int i = 0; i < gh; ++i)
    for (int j = 0; j < gw; ++j) {
      double cy = (i + 0.5) * stride, cx = (j + 0.5) * stride;
      int r = i * gw + j;
      out->val.at2(r, 0) = cx - offsets->val.at3(i, j, 0);
      out->val.at2(r, 1) = cy - offsets->val.at3(i, j, 1);
      out->val.at2(r, 2) = cx + offsets->val.at3(i, j, 2);
      out->val.at2(r, 3) = cy + offsets->val.at3(i, j, 3);
    }
  out->backward = [gh, gw](Node& n) {
    Node* off = n.parents[0].get();
    if (!off->requires_grad) return;
    Tensor& g = off->grad_buf();
    for (int i = 0; i < gh; ++i)
      for (int j = 0; j < gw; ++j) {
        int r = i * gw + j;
        g.at3(i, j, 0) += -n.grad.at2(r, 0);
        g.at3(i, j, 1) += -n.grad.at2(r, 1);
        g.at3(i, j, 2) += n.grad.at2(r, 2);
        g.at3(i, j, 3) += n.grad.at2(r, 3);
      }
  };
  return out;
}

}  // namespace modprompt
