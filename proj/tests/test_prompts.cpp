#include <catch2/catch_amalgamated.hpp>

#include <cmath>

#include "modprompt/detection_loss.hpp"
#include "modprompt/optimizer.hpp"
#include "modprompt/prompt.hpp"
#include "modprompt/train.hpp"
#include "modprompt/translator.hpp"

using namespace modprompt;

namespace {

Image test_image(std::uint64_t seed) {
  SceneLimits lim;
  return render_modality(generate_scene(seed, default_vocab(), lim), Modality::pseudo_ir);
}

}  // namespace

TEST_CASE("every static prompt is the identity at initialization") {
  Image img = test_image(1);
  for (auto kind : {PromptKind::fixed, PromptKind::random, PromptKind::padding,
                    PromptKind::weight_map, PromptKind::weight_map_v2}) {
    ParamDict params;
    StaticPrompt sp = init_prompt(kind, 24, 96, 96, 5, params);
    Var image = make_leaf(img.pixels, false);
    Var out = apply_static(image, sp, params, /*train=*/false);
    INFO(prompt_kind_name(kind));
    REQUIRE(bitwise_equal(out->val, img.pixels));
  }
}

TEST_CASE("weight map with m = 0 and affine map with (w,b) = (1,0) are exact identities") {
  Image img = test_image(2);
  {
    ParamDict params;
    StaticPrompt sp = init_prompt(PromptKind::weight_map, 0, 96, 96, 0, params);
    Var out = apply_static(make_leaf(img.pixels, false), sp, params, false);
    REQUIRE(bitwise_equal(out->val, img.pixels));
  }
  {
    ParamDict params;
    StaticPrompt sp = init_prompt(PromptKind::weight_map_v2, 0, 96, 96, 0, params);
    Var out = apply_static(make_leaf(img.pixels, false), sp, params, false);
    REQUIRE(bitwise_equal(out->val, img.pixels));
  }
}

TEST_CASE("fixed prompt: saturated 30px patch on a black image covers exactly 30x30x3") {
  ParamDict params;
  StaticPrompt sp = init_prompt(PromptKind::fixed, 30, 96, 96, 0, params);
  params.at("prompt.patch")->val.fill(1.0);
  Image black = make_image(96, 96);
  Var out = apply_static(make_leaf(black.pixels, false), sp, params, false);
  std::int64_t ones = 0, zeros = 0;
  for (int y = 0; y < 96; ++y)
    for (int x = 0; x < 96; ++x)
      for (int c = 0; c < 3; ++c) {
        double v = out->val.at3(y, x, c);
        if (v == 1.0) {
          ++ones;
          REQUIRE(y < 30);
          REQUIRE(x < 30);
        } else {
          REQUIRE(v == 0.0);
          ++zeros;
        }
      }
  REQUIRE(ones == 30 * 30 * 3);
  REQUIRE(zeros == 96 * 96 * 3 - ones);
}

TEST_CASE("padding prompt touches only the border frame") {
  ParamDict params;
  StaticPrompt sp = init_prompt(PromptKind::padding, 10, 96, 96, 0, params);
  params.at("prompt.border")->val.fill(0.25);
  Image gray = make_image(96, 96, Modality::rgb, 0.5);
  Var out = apply_static(make_leaf(gray.pixels, false), sp, params, false);
  for (int y = 0; y < 96; ++y)
    for (int x = 0; x < 96; ++x) {
      bool frame = y < 10 || y >= 86 || x < 10 || x >= 86;
      REQUIRE(out->val.at3(y, x, 0) == (frame ? 0.75 : 0.5));
    }
}

TEST_CASE("random prompt placement: sampled in train mode, top-left at eval") {
  ParamDict params;
  StaticPrompt sp = init_prompt(PromptKind::random, 20, 96, 96, 3, params);
  params.at("prompt.patch")->val.fill(1.0);
  Image black = make_image(96, 96);

  Var eval_out = apply_static(make_leaf(black.pixels, false), sp, params, false);
  REQUIRE(eval_out->val.at3(0, 0, 0) == 1.0);

  Rng rng(sp.placement_seed);
  bool moved = false;
  for (int i = 0; i < 8; ++i) {
    Var out = apply_static(make_leaf(black.pixels, false), sp, params, true, &rng);
    if (out->val.at3(0, 0, 0) == 0.0) moved = true;
    double total = 0;
    for (double v : out->val.v) total += v;
    REQUIRE(total == Catch::Approx(20.0 * 20.0 * 3.0));  // patch fully in bounds
  }
  REQUIRE(moved);
  REQUIRE_THROWS_AS(apply_static(make_leaf(black.pixels, false), sp, params, true, nullptr),
                    std::invalid_argument);
}

TEST_CASE("oversized patches are rejected") {
  ParamDict p1, p2;
  REQUIRE_THROWS_AS(init_prompt(PromptKind::fixed, 97, 96, 96, 0, p1), std::invalid_argument);
  REQUIRE_THROWS_AS(init_prompt(PromptKind::padding, 50, 96, 96, 0, p2), std::invalid_argument);
}

TEST_CASE("translator: zero residual at init for both variants and any input") {
  for (auto variant : {TranslatorVariant::MB, TranslatorVariant::RES}) {
    ParamDict params;
    TranslatorSpec spec = make_translator_spec(variant);
    init_translator_params(params, spec, 11);
    for (std::uint64_t s : {1ULL, 2ULL}) {
      Image img = test_image(s);
      Var res = translate(make_leaf(img.pixels, false), spec, params);
      INFO(translator_variant_name(variant));
      REQUIRE(res->val.abs_max() == 0.0);
      Var out = compose(make_leaf(img.pixels, false), res);
      REQUIRE(bitwise_equal(out->val, img.pixels));
    }
  }
}

TEST_CASE("translator inits are seed-deterministic; MB has fewer parameters than RES") {
  ParamDict a, b, mb, res;
  init_translator_params(a, make_translator_spec(TranslatorVariant::RES), 4);
  init_translator_params(b, make_translator_spec(TranslatorVariant::RES), 4);
  for (const auto& k : a.keys()) REQUIRE(bitwise_equal(a.at(k)->val, b.at(k)->val));

  init_translator_params(mb, make_translator_spec(TranslatorVariant::MB), 4);
  init_translator_params(res, make_translator_spec(TranslatorVariant::RES), 4);
  auto count = [](const ParamDict& p) {
    std::int64_t n = 0;
    for (const auto& [k, v] : p) n += v->val.size();
    return n;
  };
  REQUIRE(count(mb) < count(res));
}

TEST_CASE("one training step makes the translator residual input-dependent and nonzero") {
  DetectorConfig cfg;
  Model zs;
  zs.det_cfg = cfg;
  zs.vocab = default_vocab();
  init_detector_params(zs.params, cfg, 21);
  zs.params.add("embed.base", embed_offline(zs.vocab, cfg.embed_dim, 21));
  zs.params.add("embed.residual", Tensor({3, cfg.embed_dim}));

  StrategySpec strat;
  strat.kind = StrategyKind::modprompt_mb;
  Model m = materialize_strategy(zs, strat, 8);
  auto trainable = trainable_parameters(strat, m.params);
  set_requires_grad(m.params, trainable);

  SceneLimits lim;
  SceneSpec spec = generate_scene(31, m.vocab, lim);
  Image img = render_modality(spec, Modality::pseudo_ir);
  GroundTruth gt = ground_truth_for(spec);

  m.params.zero_grads();
  Var image = make_leaf(img.pixels, false);
  RawPredictions raw = model_forward(m, image, true, nullptr);
  auto loss = detection_loss(raw, gt, m.vocab, 96, 96);
  REQUIRE(loss.values.total > 0.0);
  backward(loss.total);
  AdamW opt(1e-3, 0.0);
  opt.step(m.params, trainable);

  Var res1 = translate(make_leaf(img.pixels, false), m.translator_spec, m.params);
  REQUIRE(res1->val.abs_max() > 0.0);
  Image other = test_image(77);
  Var res2 = translate(make_leaf(other.pixels, false), m.translator_spec, m.params);
  Tensor diff = res1->val;
  for (std::int64_t i = 0; i < diff.size(); ++i) diff.at(i) -= res2->val.at(i);
  REQUIRE(diff.abs_max() > 0.0);
}

TEST_CASE("compose follows the clamp contract") {
  Image img = make_image(4, 4, Modality::rgb, 0.5);
  SECTION("zero residual is identity") {
    Var out = compose(make_leaf(img.pixels, false), make_leaf(Tensor({4, 4, 3}), false));
    REQUIRE(bitwise_equal(out->val, img.pixels));
  }
  SECTION("residual +10 saturates to 1") {
    Var out = compose(make_leaf(img.pixels, false), make_leaf(Tensor({4, 4, 3}, 10.0), false));
    REQUIRE(out->val.min() == 1.0);
    REQUIRE(out->val.max() == 1.0);
  }
  SECTION("alternating +-0.25 checkerboard gives exact 0.25/0.75") {
    Tensor res({4, 4, 3});
    for (int y = 0; y < 4; ++y)
      for (int x = 0; x < 4; ++x)
        for (int c = 0; c < 3; ++c) res.at3(y, x, c) = ((y + x) % 2 == 0) ? 0.25 : -0.25;
    Var out = compose(make_leaf(img.pixels, false), make_leaf(res, false));
    for (int y = 0; y < 4; ++y)
      for (int x = 0; x < 4; ++x)
        REQUIRE(out->val.at3(y, x, 0) == (((y + x) % 2 == 0) ? 0.75 : 0.25));
  }
  SECTION("shape mismatch is an error") {
    REQUIRE_THROWS_AS(compose(make_leaf(img.pixels, false), make_leaf(Tensor({3, 3, 3}), false)),
                      std::invalid_argument);
  }
}

TEST_CASE("gradient flow: detection loss vs finite differences on prompt scalars") {
  DetectorConfig cfg;
  Model zs;
  zs.det_cfg = cfg;
  zs.vocab = default_vocab();
  init_detector_params(zs.params, cfg, 6);
  zs.params.add("embed.base", embed_offline(zs.vocab, cfg.embed_dim, 6));
  zs.params.add("embed.residual", Tensor({3, cfg.embed_dim}));

  SceneLimits lim;
  SceneSpec scene = generate_scene(13, zs.vocab, lim);
  Image img = render_modality(scene, Modality::pseudo_ir);
  GroundTruth gt = ground_truth_for(scene);
  Rng rng(8);

  // Pull the image off the [0,1] boundary so the clamp stays inactive and the
  // straight-through gradient agrees with finite differences everywhere.
  for (auto& v : img.pixels.v) v = 0.1 + 0.8 * v;

  auto check = [&](StrategyKind kind, const std::string& key, double init_scale) {
    StrategySpec strat;
    strat.kind = kind;
    Model m = materialize_strategy(zs, strat, 9);
    Var leaf = m.params.at(key);
    for (auto& v : leaf->val.v) v += rng.normal(0.0, init_scale);
    set_requires_grad(m.params, trainable_parameters(strat, m.params));
    auto build = [&]() {
      Var image = make_leaf(img.pixels, false);
      RawPredictions raw = model_forward(m, image, false, nullptr);
      return detection_loss(raw, gt, m.vocab, 96, 96).total;
    };
    // No saturation: pre-clamp values must sit strictly inside (0,1).
    {
      Var composed = adapted_image(m, make_leaf(img.pixels, false), false, nullptr);
      REQUIRE(composed->val.min() > 0.0);
      REQUIRE(composed->val.max() < 1.0);
    }
    std::vector<GradProbe> probes;
    for (int i = 0; i < 20; ++i)
      probes.push_back({leaf, rng.uniform_int(0, leaf->val.size() - 1)});
    INFO(strategy_name(kind) << " / " << key);
    REQUIRE(gradient_check(build, probes, 1e-4) < 1e-3);
  };

  check(StrategyKind::vp_wm, "prompt.map", 0.02);
  check(StrategyKind::vp_fixed, "prompt.patch", 0.02);
  check(StrategyKind::modprompt_mb, "translator.final.weight", 0.002);
}
