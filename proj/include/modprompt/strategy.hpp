#pragma once

#include <algorithm>
#include <stdexcept>
#include <string>
#include <vector>

#include "modprompt/params.hpp"
#include "modprompt/prompt.hpp"
#include "modprompt/translator.hpp"

namespace modprompt {

// The adaptation taxonomy: zero-shot, head/full fine-tuning, the five static
// visual prompts, and the two translator variants. Task residuals can ride
// on any strategy that trains something other than the full detector.
enum class StrategyKind {
  zs,
  hft,
  ft,
  vp_fixed,
  vp_random,
  vp_padding,
  vp_wm,
  vp_wm2,
  modprompt_mb,
  modprompt_res,
};

inline const std::vector<std::pair<StrategyKind, std::string>>& strategy_names() {
  static const std::vector<std::pair<StrategyKind, std::string>> names = {
      {StrategyKind::zs, "zs"},
      {StrategyKind::hft, "hft"},
      {StrategyKind::ft, "ft"},
      {StrategyKind::vp_fixed, "vp-fixed"},
      {StrategyKind::vp_random, "vp-random"},
      {StrategyKind::vp_padding, "vp-padding"},
      {StrategyKind::vp_wm, "vp-wm"},
      {StrategyKind::vp_wm2, "vp-wm2"},
      {StrategyKind::modprompt_mb, "modprompt-mb"},
      {StrategyKind::modprompt_res, "modprompt-res"},
  };
  return names;
}

inline std::string strategy_name(StrategyKind k) {
  for (const auto& [kind, name] : strategy_names())
    if (kind == k) return name;
  throw std::invalid_argument("strategy_name: bad kind");
}

inline StrategyKind strategy_from_name(const std::string& s) {
  for (const auto& [kind, name] : strategy_names())
    if (name == s) return kind;
  throw std::invalid_argument("unknown strategy kind: '" + s + "'");
}

inline bool is_static_prompt(StrategyKind k) {
  return k == StrategyKind::vp_fixed || k == StrategyKind::vp_random ||
         k == StrategyKind::vp_padding || k == StrategyKind::vp_wm ||
         k == StrategyKind::vp_wm2;
}

inline bool is_translator(StrategyKind k) {
  return k == StrategyKind::modprompt_mb || k == StrategyKind::modprompt_res;
}

inline bool is_prompt_strategy(StrategyKind k) { return is_static_prompt(k) || is_translator(k); }

inline PromptKind prompt_kind_for(StrategyKind k) {
  switch (k) {
    case StrategyKind::vp_fixed: return PromptKind::fixed;
    case StrategyKind::vp_random: return PromptKind::random;
    case StrategyKind::vp_padding: return PromptKind::padding;
    case StrategyKind::vp_wm: return PromptKind::weight_map;
    case StrategyKind::vp_wm2: return PromptKind::weight_map_v2;
    default: throw std::invalid_argument("prompt_kind_for: not a static prompt strategy");
  }
}

struct StrategySpec {
  StrategyKind kind = StrategyKind::zs;
  bool with_task_residuals = false;
  double lr = 1e-3;
  double weight_decay = 0.01;
  int epochs = 20;
  int batch_size = 8;
  int patch_size = 24;  // fixed / random / padding

  void validate() const {
    if (with_task_residuals && kind == StrategyKind::ft)
      throw std::invalid_argument("StrategySpec: task residuals are redundant under full FT");
    if (with_task_residuals && kind == StrategyKind::zs)
      throw std::invalid_argument("StrategySpec: zero-shot admits no trainable parameters");
  }
};

inline double default_lr(StrategyKind k) {
  return (k == StrategyKind::ft || k == StrategyKind::hft) ? 3e-4 : 1e-3;
}

// Maps a strategy onto the named parameter subset it may update. Everything
// else stays bitwise frozen; "embed.base" is never selected.
inline std::vector<std::string> trainable_parameters(const StrategySpec& strategy,
                                                     const ParamDict& model) {
  strategy.validate();
  std::vector<std::string> keys;
  auto extend = [&](const std::string& prefix) {
    for (const auto& k : model.keys_with_prefix(prefix)) keys.push_back(k);
  };
  switch (strategy.kind) {
    case StrategyKind::zs: break;
    case StrategyKind::hft: extend("head."); break;
    case StrategyKind::ft:
      extend("backbone.");
      extend("head.");
      break;
    default:
      if (is_static_prompt(strategy.kind)) extend("prompt.");
      if (is_translator(strategy.kind)) extend("translator.");
      break;
  }
  if (strategy.with_task_residuals) extend("embed.residual");
  std::sort(keys.begin(), keys.end());
  return keys;
}

}  // namespace modprompt
