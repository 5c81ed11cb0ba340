#pragma once

#include <array>
#include <cmath>
#include <stdexcept>
#include <string>

#include "modprompt/autograd.hpp"
#include "modprompt/detector.hpp"
#include "modprompt/params.hpp"

namespace modprompt {

// U-Net-shaped input translator h(x): three stride-2 encoder stages, three
// upsampling decoder stages with additive skip connections, and a 1x1 output
// head. The head is zero-initialized so the residual is exactly zero for any
// input at init.
//
// RES uses residual 3x3 conv blocks (widths 16/32/64), MB depthwise-separable
// blocks (widths 8/16/32); MB has far fewer parameters.
enum class TranslatorVariant { MB, RES };

inline const char* translator_variant_name(TranslatorVariant v) {
  return v == TranslatorVariant::MB ? "mb" : "res";
}

struct TranslatorSpec {
  TranslatorVariant variant = TranslatorVariant::RES;
  int image_h = 96, image_w = 96;
  std::array<int, 3> widths{16, 32, 64};
  int norm_groups = 8;
};

inline TranslatorSpec make_translator_spec(TranslatorVariant v, int image_h = 96,
                                           int image_w = 96) {
  TranslatorSpec s;
  s.variant = v;
  s.image_h = image_h;
  s.image_w = image_w;
  s.widths = v == TranslatorVariant::MB ? std::array<int, 3>{8, 16, 32}
                                        : std::array<int, 3>{16, 32, 64};
  return s;
}

namespace detail {

inline void add_ds_block(ParamDict& p, Rng& rng, const std::string& prefix, int ci, int co) {
  Tensor dw({ci, 3, 3});
  double bound = std::sqrt(6.0 / 9.0);
  for (auto& v : dw.v) v = rng.uniform(-bound, bound);
  p.add(prefix + ".dw.weight", std::move(dw));
  p.add(prefix + ".dw.bias", Tensor({ci}));
  p.add(prefix + ".pw.weight", kaiming_conv(rng, co, 1, 1, ci));
  p.add(prefix + ".pw.bias", Tensor({co}));
  add_norm(p, prefix + ".norm", co);
}

inline void add_res_block(ParamDict& p, Rng& rng, const std::string& prefix, int ci, int co,
                          bool with_skip_proj) {
  add_conv(p, rng, prefix + ".conv", co, 3, ci);
  add_norm(p, prefix + ".norm", co);
  if (with_skip_proj) add_conv(p, rng, prefix + ".skip", co, 1, ci);
}

}  // namespace detail

inline void init_translator_params(ParamDict& p, const TranslatorSpec& spec,
                                   std::uint64_t seed) {
  Rng rng(hash_combine(seed, hash_str("translator-init")));
  const auto& w = spec.widths;
  bool mb = spec.variant == TranslatorVariant::MB;
  int ci = 3;
  for (int i = 0; i < 3; ++i) {
    std::string blk = "translator.enc" + std::to_string(i + 1);
    if (mb)
      detail::add_ds_block(p, rng, blk, ci, w[static_cast<std::size_t>(i)]);
    else
      detail::add_res_block(p, rng, blk, ci, w[static_cast<std::size_t>(i)], true);
    ci = w[static_cast<std::size_t>(i)];
  }
  // Decoder stage i reduces to the width of encoder stage i-1 before
  // upsampling, adds that stage's features, then refines at equal width.
  int dec_in = w[2];
  std::array<int, 3> dec_out{w[1], w[0], mb ? w[0] : 8};
  for (int i = 0; i < 3; ++i) {
    std::string blk = "translator.dec" + std::to_string(3 - i);
    detail::add_conv(p, rng, blk + ".reduce", dec_out[static_cast<std::size_t>(i)], 1, dec_in);
    if (i == 2)  // innermost skip comes from the raw image
      detail::add_conv(p, rng, blk + ".inproj", dec_out[static_cast<std::size_t>(i)], 1, 3);
    if (mb)
      detail::add_ds_block(p, rng, blk + ".refine", dec_out[static_cast<std::size_t>(i)],
                           dec_out[static_cast<std::size_t>(i)]);
    else
      detail::add_res_block(p, rng, blk + ".refine", dec_out[static_cast<std::size_t>(i)],
                            dec_out[static_cast<std::size_t>(i)], false);
    dec_in = dec_out[static_cast<std::size_t>(i)];
  }
  // Zero-initialized output head: h(x) == 0 at init for every x.
  p.add("translator.final.weight", Tensor({3, 1, 1, dec_in}));
  p.add("translator.final.bias", Tensor({3}));
}

namespace detail {

inline Var ds_block(const Var& x, ParamDict& p, const std::string& prefix, int stride,
                    int groups) {
  Var h = depthwise_conv2d(x, p.at(prefix + ".dw.weight"), p.at(prefix + ".dw.bias"), stride, 1);
  h = conv2d(h, p.at(prefix + ".pw.weight"), p.at(prefix + ".pw.bias"), 1, 0);
  int c = h->val.dim(2);
  h = group_norm(h, p.at(prefix + ".norm.gamma"), p.at(prefix + ".norm.beta"),
                 std::min(groups, c));
  return silu(h);
}

inline Var res_block(const Var& x, ParamDict& p, const std::string& prefix, int stride,
                     int groups) {
  Var main = conv2d(x, p.at(prefix + ".conv.weight"), p.at(prefix + ".conv.bias"), stride, 1);
  int c = main->val.dim(2);
  main = group_norm(main, p.at(prefix + ".norm.gamma"), p.at(prefix + ".norm.beta"),
                    std::min(groups, c));
  Var skip = p.contains(prefix + ".skip.weight")
                 ? conv2d(x, p.at(prefix + ".skip.weight"), p.at(prefix + ".skip.bias"), stride, 0)
                 : x;
  return silu(add(main, skip));
}

}  // namespace detail

// h(x): the input-conditioned visual prompt. Deterministic and
// differentiable w.r.t. both the image and every translator parameter.
inline Var translate(const Var& image, const TranslatorSpec& spec, ParamDict& p) {
  if (image->val.dim(0) != spec.image_h || image->val.dim(1) != spec.image_w)
    throw std::invalid_argument("translate: image shape mismatch");
  bool mb = spec.variant == TranslatorVariant::MB;
  int g = spec.norm_groups;
  auto block = [&](const Var& x, const std::string& prefix, int stride) {
    return mb ? detail::ds_block(x, p, prefix, stride, g)
              : detail::res_block(x, p, prefix, stride, g);
  };

  Var e1 = block(image, "translator.enc1", 2);
  Var e2 = block(e1, "translator.enc2", 2);
  Var e3 = block(e2, "translator.enc3", 2);

  Var d = conv2d(e3, p.at("translator.dec3.reduce.weight"), p.at("translator.dec3.reduce.bias"), 1, 0);
  d = add(upsample2x(d), e2);
  d = block(d, "translator.dec3.refine", 1);

  d = conv2d(d, p.at("translator.dec2.reduce.weight"), p.at("translator.dec2.reduce.bias"), 1, 0);
  d = add(upsample2x(d), e1);
  d = block(d, "translator.dec2.refine", 1);

  d = conv2d(d, p.at("translator.dec1.reduce.weight"), p.at("translator.dec1.reduce.bias"), 1, 0);
  Var in_skip = conv2d(image, p.at("translator.dec1.inproj.weight"),
                       p.at("translator.dec1.inproj.bias"), 1, 0);
  d = add(upsample2x(d), in_skip);
  d = block(d, "translator.dec1.refine", 1);

  return conv2d(d, p.at("translator.final.weight"), p.at("translator.final.bias"), 1, 0);
}

// f(x + h(x)) composition input: clamped sum with pass-through gradients
// inside the valid range.
inline Var compose(const Var& image, const Var& residual) {
  if (image->val.shape != residual->val.shape)
    throw std::invalid_argument("compose: shape mismatch");
  return clamp01_st(add(image, residual));
}

}  // namespace modprompt
