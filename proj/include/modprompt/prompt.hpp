#pragma once

#include <stdexcept>
#include <string>

#include "modprompt/autograd.hpp"
#include "modprompt/params.hpp"
#include "modprompt/rng.hpp"

namespace modprompt {

// Input-space prompt variants. All parameters start at the identity (zeros;
// ones for the scale map), so the adapted detector reproduces zero-shot
// outputs exactly at step 0.
enum class PromptKind { fixed, random, padding, weight_map, weight_map_v2 };

inline const char* prompt_kind_name(PromptKind k) {
  switch (k) {
    case PromptKind::fixed: return "fixed";
    case PromptKind::random: return "random";
    case PromptKind::padding: return "padding";
    case PromptKind::weight_map: return "weight_map";
    case PromptKind::weight_map_v2: return "weight_map_v2";
  }
  throw std::invalid_argument("prompt_kind_name: bad kind");
}

struct StaticPrompt {
  PromptKind kind = PromptKind::fixed;
  int patch_size = 0;  // fixed / random / padding
  int image_h = 0, image_w = 0;
  std::uint64_t placement_seed = 0;  // random kind only
};

// Registers the learnable arrays under "prompt." in the store.
inline StaticPrompt init_prompt(PromptKind kind, int patch_size, int image_h, int image_w,
                                std::uint64_t seed, ParamDict& params) {
  StaticPrompt sp;
  sp.kind = kind;
  sp.patch_size = patch_size;
  sp.image_h = image_h;
  sp.image_w = image_w;
  sp.placement_seed = seed;
  switch (kind) {
    case PromptKind::fixed:
    case PromptKind::random:
      if (patch_size < 1 || patch_size > std::min(image_h, image_w))
        throw std::invalid_argument("init_prompt: patch size exceeds image");
      params.add("prompt.patch", Tensor({patch_size, patch_size, 3}));
      break;
    case PromptKind::padding:
      if (patch_size < 1 || 2 * patch_size > std::min(image_h, image_w))
        throw std::invalid_argument("init_prompt: padding width exceeds image");
      params.add("prompt.border", Tensor({image_h, image_w, 3}));
      break;
    case PromptKind::weight_map:
      params.add("prompt.map", Tensor({image_h, image_w, 3}));
      break;
    case PromptKind::weight_map_v2:
      params.add("prompt.scale", Tensor({image_h, image_w, 3}, 1.0));
      params.add("prompt.shift", Tensor({image_h, image_w, 3}));
      break;
  }
  return sp;
}

inline Tensor border_mask(int h, int w, int width) {
  Tensor m({h, w, 3});
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      bool edge = y < width || y >= h - width || x < width || x >= w - width;
      if (edge)
        for (int c = 0; c < 3; ++c) m.at3(y, x, c) = 1.0;
    }
  return m;
}

// Combines the prompt with the image and clamps to [0,1]. `train` only
// matters for the random kind, whose placement is sampled per image from
// `rng`; evaluation pins the patch to the top-left corner so metrics are
// reproducible.
inline Var apply_static(const Var& image, const StaticPrompt& sp, ParamDict& params,
                        bool train, Rng* rng = nullptr) {
  int H = image->val.dim(0), W = image->val.dim(1);
  if (H != sp.image_h || W != sp.image_w)
    throw std::invalid_argument("apply_static: image shape mismatch");
  switch (sp.kind) {
    case PromptKind::fixed:
      return clamp01_st(add_patch(image, params.at("prompt.patch"), 0, 0));
    case PromptKind::random: {
      int y0 = 0, x0 = 0;
      if (train) {
        if (!rng) throw std::invalid_argument("apply_static: random kind needs an rng in train mode");
        y0 = static_cast<int>(rng->uniform_int(0, H - sp.patch_size));
        x0 = static_cast<int>(rng->uniform_int(0, W - sp.patch_size));
      }
      return clamp01_st(add_patch(image, params.at("prompt.patch"), y0, x0));
    }
    case PromptKind::padding:
      return clamp01_st(
          add_masked(image, params.at("prompt.border"), border_mask(H, W, sp.patch_size)));
    case PromptKind::weight_map:
      return clamp01_st(add(image, params.at("prompt.map")));
    case PromptKind::weight_map_v2:
      return clamp01_st(add(mul(image, params.at("prompt.scale")), params.at("prompt.shift")));
  }
  throw std::invalid_argument("apply_static: bad kind");
}

}  // namespace modprompt
