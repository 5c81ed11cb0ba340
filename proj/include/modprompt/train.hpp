#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <map>
#include <set>
#include <stdexcept>
#include <string>
#include <vector>

#include "modprompt/dataset.hpp"
#include "modprompt/decode.hpp"
#include "modprompt/detection_loss.hpp"
#include "modprompt/detector.hpp"
#include "modprompt/embeddings.hpp"
#include "modprompt/optimizer.hpp"
#include "modprompt/params.hpp"
#include "modprompt/prompt.hpp"
#include "modprompt/strategy.hpp"
#include "modprompt/translator.hpp"

namespace modprompt {

// A detector plus its embedding bank and (optionally) prompt or translator
// parameters, all in one named store. Parameter groups are distinguished by
// key prefix: backbone., head., prompt., translator., embed.base,
// embed.residual.
struct Model {
  DetectorConfig det_cfg;
  std::vector<std::string> vocab;
  ParamDict params;
  StrategySpec strategy;
  StaticPrompt static_prompt;      // meaningful when the strategy is a static prompt
  TranslatorSpec translator_spec;  // meaningful when the strategy is a translator
};

inline ParamDict clone_params(const ParamDict& src) {
  ParamDict out;
  for (const auto& [k, v] : src) out.add(k, v->val, v->requires_grad);
  return out;
}

inline void set_requires_grad(ParamDict& params, const std::vector<std::string>& on) {
  std::set<std::string> onset(on.begin(), on.end());
  for (auto& [k, v] : params) v->requires_grad = onset.count(k) > 0;
}

// Scoped "no grad": disables every parameter leaf so forward passes skip
// closure construction, restoring the previous flags on exit.
class NoGradGuard {
 public:
  explicit NoGradGuard(ParamDict& params) : params_(params) {
    for (auto& [k, v] : params_) {
      saved_.emplace_back(k, v->requires_grad);
      v->requires_grad = false;
    }
  }
  ~NoGradGuard() {
    for (auto& [k, rg] : saved_) params_.at(k)->requires_grad = rg;
  }

 private:
  ParamDict& params_;
  std::vector<std::pair<std::string, bool>> saved_;
};

inline std::vector<std::string> complement_keys(const ParamDict& params,
                                                const std::vector<std::string>& trainable) {
  std::set<std::string> t(trainable.begin(), trainable.end());
  std::vector<std::string> out;
  for (const auto& k : params.keys())
    if (!t.count(k)) out.push_back(k);
  return out;
}

inline Var effective_embedding_var(Model& m) {
  return l2norm_rows(add(m.params.at("embed.base"), m.params.at("embed.residual")));
}

// Applies the strategy's input-space adaptation. Identity for zs/hft/ft.
inline Var adapted_image(Model& m, const Var& image, bool train, Rng* rng) {
  if (is_static_prompt(m.strategy.kind))
    return apply_static(image, m.static_prompt, m.params, train, rng);
  if (is_translator(m.strategy.kind))
    return compose(image, translate(image, m.translator_spec, m.params));
  return image;
}

inline RawPredictions model_forward(Model& m, const Var& image, bool train, Rng* rng) {
  Var adapted = adapted_image(m, image, train, rng);
  Var emb = effective_embedding_var(m);
  return detector_forward(adapted, emb, m.params, m.det_cfg);
}

inline std::vector<Detection> run_detect(Model& m, const Image& img, const DecodeConfig& dc,
                                         bool use_prompt = true) {
  NoGradGuard guard(m.params);
  Var image = make_leaf(img.pixels, false);
  RawPredictions raw;
  if (use_prompt) {
    raw = model_forward(m, image, false, nullptr);
  } else {
    Var emb = l2norm_rows(add(m.params.at("embed.base"), m.params.at("embed.residual")));
    raw = detector_forward(image, emb, m.params, m.det_cfg);
  }
  return decode(raw, dc);
}

// Zero-shot view of a model: raw detector, base embeddings only.
inline std::vector<Detection> run_detect_zero_shot(Model& m, const Image& img,
                                                   const DecodeConfig& dc) {
  NoGradGuard guard(m.params);
  Var image = make_leaf(img.pixels, false);
  Var zero_res = make_leaf(Tensor(m.params.at("embed.residual")->val.shape), false);
  Var emb = effective_embeddings(m.params.at("embed.base")->val, zero_res);
  RawPredictions raw = detector_forward(image, emb, m.params, m.det_cfg);
  return decode(raw, dc);
}

inline APReport evaluate_model(Model& m, const std::vector<Sample>& samples,
                               const DecodeConfig& dc, bool use_prompt = true) {
  return evaluate([&](const Image& img) { return run_detect(m, img, dc, use_prompt); }, samples,
                  m.vocab);
}

// ---------------------------------------------------------------------------
// Training loop
// ---------------------------------------------------------------------------

struct TrainLoopConfig {
  int epochs = 20;
  int batch_size = 8;
  double lr = 1e-3;
  double weight_decay = 0.01;
  std::uint64_t seed = 0;
  int start_epoch = 0;
};

// Batch order and random-prompt placement are derived statelessly from
// (seed, epoch) and (seed, step), so a resumed run retraces the original
// trajectory bit for bit.
inline std::vector<int> epoch_permutation(std::uint64_t seed, int epoch, int n) {
  std::vector<int> idx(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) idx[static_cast<std::size_t>(i)] = i;
  Rng rng(hash_combine(hash_combine(seed, hash_str("epoch")), static_cast<std::uint64_t>(epoch)));
  for (int i = n - 1; i > 0; --i)
    std::swap(idx[static_cast<std::size_t>(i)],
              idx[static_cast<std::size_t>(rng.uniform_int(0, i))]);
  return idx;
}

inline std::vector<double> train_epochs(Model& model, const std::vector<Sample>& data,
                                        const std::vector<std::string>& trainable,
                                        const TrainLoopConfig& cfg, AdamW& opt) {
  if (data.empty()) throw std::invalid_argument("train_epochs: empty dataset");
  if (trainable.empty()) return {};
  set_requires_grad(model.params, trainable);

  std::vector<double> step_losses;
  int n = static_cast<int>(data.size());
  std::int64_t step = static_cast<std::int64_t>(cfg.start_epoch) *
                      ((n + cfg.batch_size - 1) / cfg.batch_size);
  for (int epoch = cfg.start_epoch; epoch < cfg.epochs; ++epoch) {
    std::vector<int> order = epoch_permutation(cfg.seed, epoch, n);
    for (int b = 0; b < n; b += cfg.batch_size, ++step) {
      int bn = std::min(cfg.batch_size, n - b);
      model.params.zero_grads();
      Rng placement(hash_combine(hash_combine(cfg.seed, hash_str("placement")),
                                 static_cast<std::uint64_t>(step)));
      double batch_loss = 0;
      for (int i = 0; i < bn; ++i) {
        const Sample& s = data[static_cast<std::size_t>(order[static_cast<std::size_t>(b + i)])];
        Var image = make_leaf(s.image.pixels, false);
        RawPredictions raw = model_forward(model, image, true, &placement);
        DetectionLoss loss = detection_loss(raw, s.gt, model.vocab, model.det_cfg.image_h,
                                            model.det_cfg.image_w);
        if (!std::isfinite(loss.values.total))
          throw std::runtime_error("train_epochs: non-finite loss at step " +
                                   std::to_string(step));
        backward(loss.total, 1.0 / bn);
        batch_loss += loss.values.total / bn;
      }
      opt.step(model.params, trainable);
      step_losses.push_back(batch_loss);
    }
  }
  return step_losses;
}

// ---------------------------------------------------------------------------
// Pretraining (produces the frozen zero-shot checkpoint)
// ---------------------------------------------------------------------------

struct PretrainConfig {
  DetectorConfig det_cfg;
  int epochs = 30;
  int batch_size = 8;
  double lr = 1e-3;
  double weight_decay = 1e-4;
  std::uint64_t seed = 7;
};

struct TrainRunResult {
  Model model;
  std::vector<double> step_losses;
};

inline TrainRunResult pretrain(const std::vector<Sample>& rgb_train,
                               const std::vector<std::string>& vocab,
                               const PretrainConfig& cfg) {
  Model m;
  m.det_cfg = cfg.det_cfg;
  m.vocab = vocab;
  m.strategy.kind = StrategyKind::zs;
  init_detector_params(m.params, cfg.det_cfg, cfg.seed);
  m.params.add("embed.base", embed_offline(vocab, cfg.det_cfg.embed_dim, cfg.seed));
  m.params.add("embed.residual",
               Tensor({static_cast<int>(vocab.size()), cfg.det_cfg.embed_dim}));

  std::vector<std::string> trainable;
  for (const auto& k : m.params.keys_with_prefix("backbone.")) trainable.push_back(k);
  for (const auto& k : m.params.keys_with_prefix("head.")) trainable.push_back(k);

  TrainLoopConfig loop;
  loop.epochs = cfg.epochs;
  loop.batch_size = cfg.batch_size;
  loop.lr = cfg.lr;
  loop.weight_decay = cfg.weight_decay;
  loop.seed = cfg.seed;
  AdamW opt(cfg.lr, cfg.weight_decay);

  TrainRunResult out;
  out.step_losses = train_epochs(m, rgb_train, trainable, loop, opt);
  out.model = std::move(m);
  return out;
}

// ---------------------------------------------------------------------------
// Adaptation (Eqs. of the strategy family; detector and base embeddings stay
// bitwise frozen unless the strategy selects them)
// ---------------------------------------------------------------------------

struct AdaptResult {
  Model model;
  std::vector<double> step_losses;
  std::map<std::string, std::uint64_t> frozen_before;
  std::map<std::string, std::uint64_t> frozen_after;
};

inline Model materialize_strategy(const Model& zero_shot, const StrategySpec& strategy,
                                  std::uint64_t seed) {
  strategy.validate();
  Model m;
  m.det_cfg = zero_shot.det_cfg;
  m.vocab = zero_shot.vocab;
  m.params = clone_params(zero_shot.params);
  m.strategy = strategy;
  if (is_static_prompt(strategy.kind))
    m.static_prompt = init_prompt(prompt_kind_for(strategy.kind), strategy.patch_size,
                                  m.det_cfg.image_h, m.det_cfg.image_w, seed, m.params);
  if (is_translator(strategy.kind)) {
    m.translator_spec = make_translator_spec(strategy.kind == StrategyKind::modprompt_mb
                                                 ? TranslatorVariant::MB
                                                 : TranslatorVariant::RES,
                                             m.det_cfg.image_h, m.det_cfg.image_w);
    init_translator_params(m.params, m.translator_spec, seed);
  }
  return m;
}

inline AdaptResult adapt(const Model& zero_shot, const std::vector<Sample>& target_train,
                         const StrategySpec& strategy, std::uint64_t seed) {
  AdaptResult out;
  out.model = materialize_strategy(zero_shot, strategy, seed);
  Model& m = out.model;

  std::vector<std::string> trainable = trainable_parameters(strategy, m.params);
  std::vector<std::string> frozen = complement_keys(m.params, trainable);
  out.frozen_before = hash_params(m.params, frozen);

  if (!trainable.empty()) {
    TrainLoopConfig loop;
    loop.epochs = strategy.epochs;
    loop.batch_size = strategy.batch_size;
    loop.lr = strategy.lr;
    loop.weight_decay = strategy.weight_decay;
    loop.seed = seed;
    AdamW opt(strategy.lr, strategy.weight_decay);
    out.step_losses = train_epochs(m, target_train, trainable, loop, opt);
  }

  out.frozen_after = hash_params(m.params, frozen);
  if (out.frozen_before != out.frozen_after)
    throw std::logic_error("adapt: frozen parameters mutated during training");
  return out;
}

// ---------------------------------------------------------------------------
// Train state (optimizer moments + progress); batch order and placement
// derive statelessly from (seed, epoch | step), so this is all a resume needs.
// ---------------------------------------------------------------------------

struct TrainState {
  int epochs_done = 0;
  int step_count = 0;
  std::uint64_t seed = 0;
  std::map<std::string, Tensor> moment1, moment2;
};

inline void save_train_state(const std::string& path, const TrainState& st) {
  ParamDict flat;
  for (const auto& [k, t] : st.moment1) flat.add("m1." + k, t);
  for (const auto& [k, t] : st.moment2) flat.add("m2." + k, t);
  CheckpointMeta meta;
  meta.extra["epochs_done"] = st.epochs_done;
  meta.extra["step_count"] = st.step_count;
  meta.extra["seed"] = st.seed;
  meta.extra["kind"] = "train-state";
  save_checkpoint(path, flat, meta);
}

inline TrainState load_train_state(const std::string& path) {
  auto [flat, meta] = load_checkpoint(path);
  TrainState st;
  st.epochs_done = meta.extra.at("epochs_done").get<int>();
  st.step_count = meta.extra.at("step_count").get<int>();
  st.seed = meta.extra.at("seed").get<std::uint64_t>();
  for (const auto& [k, v] : flat) {
    if (k.rfind("m1.", 0) == 0) st.moment1[k.substr(3)] = v->val;
    if (k.rfind("m2.", 0) == 0) st.moment2[k.substr(3)] = v->val;
  }
  return st;
}

inline TrainState capture_train_state(const AdamW& opt, int epochs_done, std::uint64_t seed) {
  TrainState st;
  st.epochs_done = epochs_done;
  st.step_count = opt.step_count();
  st.seed = seed;
  st.moment1 = opt.moment1();
  st.moment2 = opt.moment2();
  return st;
}

inline AdamW restore_optimizer(const TrainState& st, double lr, double weight_decay) {
  AdamW opt(lr, weight_decay);
  opt.restore(st.step_count, st.moment1, st.moment2);
  return opt;
}

// ---------------------------------------------------------------------------
// Checkpoint round trip
// ---------------------------------------------------------------------------

inline void save_model(const std::string& path, const Model& m) {
  CheckpointMeta meta;
  meta.grid_h = m.det_cfg.grid_h();
  meta.grid_w = m.det_cfg.grid_w();
  meta.embed_dim = m.det_cfg.embed_dim;
  meta.vocab = m.vocab;
  meta.extra["image_h"] = m.det_cfg.image_h;
  meta.extra["image_w"] = m.det_cfg.image_w;
  meta.extra["strategy"] = strategy_name(m.strategy.kind);
  meta.extra["with_task_residuals"] = m.strategy.with_task_residuals;
  meta.extra["patch_size"] = m.strategy.patch_size;
  meta.extra["placement_seed"] = m.static_prompt.placement_seed;
  save_checkpoint(path, m.params, meta);
}

inline Model load_model(const std::string& path) {
  auto [params, meta] = load_checkpoint(path);
  Model m;
  m.det_cfg.image_h = meta.extra.value("image_h", 96);
  m.det_cfg.image_w = meta.extra.value("image_w", 96);
  m.det_cfg.embed_dim = meta.embed_dim;
  m.vocab = meta.vocab;
  m.params = std::move(params);
  if (m.det_cfg.grid_h() != meta.grid_h || m.det_cfg.grid_w() != meta.grid_w)
    throw std::runtime_error("load_model: grid metadata mismatch in " + path);
  m.strategy.kind = strategy_from_name(meta.extra.value("strategy", "zs"));
  m.strategy.with_task_residuals = meta.extra.value("with_task_residuals", false);
  m.strategy.patch_size = meta.extra.value("patch_size", 24);
  if (is_static_prompt(m.strategy.kind)) {
    m.static_prompt.kind = prompt_kind_for(m.strategy.kind);
    m.static_prompt.patch_size = m.strategy.patch_size;
    m.static_prompt.image_h = m.det_cfg.image_h;
    m.static_prompt.image_w = m.det_cfg.image_w;
    m.static_prompt.placement_seed = meta.extra.value("placement_seed", std::uint64_t{0});
  }
  if (is_translator(m.strategy.kind))
    m.translator_spec = make_translator_spec(m.strategy.kind == StrategyKind::modprompt_mb
                                                 ? TranslatorVariant::MB
                                                 : TranslatorVariant::RES,
                                             m.det_cfg.image_h, m.det_cfg.image_w);
  return m;
}

// ---------------------------------------------------------------------------
// Finite-difference gradient checking
// ---------------------------------------------------------------------------

struct GradProbe {
  Var leaf;
  std::int64_t index = 0;
};

// Central differences against the reverse-mode gradient at `eps`. Returns the
// max relative error over the probes, with a 1e-6 floor on the denominator.
inline double gradient_check(const std::function<Var()>& build_loss,
                             const std::vector<GradProbe>& probes, double eps) {
  for (const auto& p : probes) {
    p.leaf->requires_grad = true;
    p.leaf->grad = Tensor();
  }
  Var loss = build_loss();
  backward(loss);
  std::vector<double> analytic;
  analytic.reserve(probes.size());
  for (const auto& p : probes)
    analytic.push_back(p.leaf->grad.v.empty() ? 0.0 : p.leaf->grad.at(p.index));

  double max_rel = 0.0;
  for (std::size_t i = 0; i < probes.size(); ++i) {
    const auto& p = probes[i];
    double saved = p.leaf->val.at(p.index);
    p.leaf->val.at(p.index) = saved + eps;
    double up = build_loss()->val.at(0);
    p.leaf->val.at(p.index) = saved - eps;
    double dn = build_loss()->val.at(0);
    p.leaf->val.at(p.index) = saved;
    double fd = (up - dn) / (2.0 * eps);
    double rel = std::abs(fd - analytic[i]) / std::max({1e-6, std::abs(fd), std::abs(analytic[i])});
    max_rel = std::max(max_rel, rel);
  }
  return max_rel;
}

}  // namespace modprompt
