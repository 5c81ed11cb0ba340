#include <catch2/catch_amalgamated.hpp>

#include <algorithm>

#include "modprompt/metrics.hpp"
#include "modprompt/rng.hpp"
#include "oracle_eval.hpp"

using namespace modprompt;

namespace {

// Random small scene: <= 4 gt boxes, <= 8 detections built as jittered gt
// copies plus outright false positives.
struct SmallScene {
  std::vector<Detection> dets;
  GroundTruth gt;
};

SmallScene random_scene(Rng& rng, int max_gt = 4, int max_det = 8) {
  SmallScene s;
  int n_gt = static_cast<int>(rng.uniform_int(0, max_gt));
  for (int g = 0; g < n_gt; ++g) {
    double x1 = rng.uniform(0, 60), y1 = rng.uniform(0, 60);
    double w = rng.uniform(8, 30), h = rng.uniform(8, 30);
    s.gt.boxes.push_back({x1, y1, x1 + w, y1 + h});
    s.gt.categories.push_back(
        default_vocab()[static_cast<std::size_t>(rng.uniform_int(0, 2))]);
  }
  int n_det = static_cast<int>(rng.uniform_int(0, max_det));
  for (int d = 0; d < n_det; ++d) {
    Detection det;
    if (!s.gt.boxes.empty() && rng.uniform() < 0.7) {
      std::size_t g = static_cast<std::size_t>(rng.uniform_int(0, n_gt - 1));
      det.box = s.gt.boxes[g];
      for (auto& v : det.box) v += rng.uniform(-6, 6);
      if (det.box[0] >= det.box[2]) det.box[2] = det.box[0] + 1;
      if (det.box[1] >= det.box[3]) det.box[3] = det.box[1] + 1;
      det.category = rng.uniform() < 0.85
                         ? static_cast<int>(std::find(default_vocab().begin(),
                                                      default_vocab().end(),
                                                      s.gt.categories[g]) -
                                            default_vocab().begin())
                         : static_cast<int>(rng.uniform_int(0, 2));
    } else {
      double x1 = rng.uniform(0, 70), y1 = rng.uniform(0, 70);
      det.box = {x1, y1, x1 + rng.uniform(5, 25), y1 + rng.uniform(5, 25)};
      det.category = static_cast<int>(rng.uniform_int(0, 2));
    }
    det.score = rng.uniform();
    s.dets.push_back(det);
  }
  return s;
}

std::vector<oracle::Det> to_oracle(const std::vector<Detection>& dets) {
  std::vector<oracle::Det> out;
  for (const auto& d : dets) out.push_back({d.box, d.category, d.score});
  return out;
}

}  // namespace

TEST_CASE("iou basics") {
  REQUIRE(iou({0, 0, 10, 10}, {0, 0, 10, 10}) == 1.0);
  REQUIRE(iou({0, 0, 10, 10}, {20, 20, 30, 30}) == 0.0);
  REQUIRE(iou({0, 0, 10, 10}, {5, 5, 15, 15}) == Catch::Approx(25.0 / 175.0).epsilon(1e-12));
  // Degenerate boxes count as zero area.
  REQUIRE(iou({5, 5, 5, 9}, {0, 0, 10, 10}) == 0.0);
}

TEST_CASE("match_detections: basics and the single-match rule") {
  std::vector<std::array<double, 4>> gts = {{0, 0, 10, 10}};
  std::vector<int> cats = {0};
  SECTION("one detection exactly on one gt is a TP") {
    std::vector<Detection> dets = {{{0, 0, 10, 10}, 0, 0.9}};
    auto r = match_detections(dets, gts, cats, 0.5);
    REQUIRE(r.tp == std::vector<char>{1});
    REQUIRE(r.matched_gt[0] == 0);
  }
  SECTION("two detections on the same gt: higher score wins") {
    std::vector<Detection> dets = {{{0, 0, 10, 10}, 0, 0.5}, {{1, 1, 11, 11}, 0, 0.8}};
    auto r = match_detections(dets, gts, cats, 0.5);
    REQUIRE(r.det_order == std::vector<int>{1, 0});
    REQUIRE(r.tp == std::vector<char>{1, 0});
  }
  SECTION("category mismatch never matches") {
    std::vector<Detection> dets = {{{0, 0, 10, 10}, 1, 0.9}};
    auto r = match_detections(dets, gts, cats, 0.5);
    REQUIRE(r.tp == std::vector<char>{0});
  }
  SECTION("a detection overlapping two gts takes the higher-IoU one") {
    std::vector<std::array<double, 4>> two = {{0, 0, 100, 10}, {40, 0, 140, 10}};
    std::vector<int> cc = {0, 0};
    double d = 100.0 * 0.45 / 1.55;  // IoU with gt0 exactly 0.55
    std::vector<Detection> dets = {{{d, 0, d + 100, 10}, 0, 0.9}};
    REQUIRE(iou(dets[0].box, two[0]) == Catch::Approx(0.55).epsilon(1e-9));
    REQUIRE(iou(dets[0].box, two[1]) > 0.55);
    auto r = match_detections(dets, two, cc, 0.5);
    REQUIRE(r.matched_gt[0] == 1);
  }
}

TEST_CASE("match_detections reproduces the 3x2 IoU-matrix example") {
  // IoU matrix [[0.6,0.2],[0.55,0.7],[0.1,0.65]] with scores .9/.8/.7 at thr .5
  // must flag [TP, TP, FP]. Boxes constructed to hit those IoUs exactly:
  // iou(a,b) = inter/union with unit-height strips.
  // gt0 = [0,0,100,10], gt1 = [200,0,300,10].
  // det0: overlap 75 with gt0 -> iou 0.6  (len 100, inter 75: 75/125)
  std::vector<std::array<double, 4>> gts = {{0, 0, 100, 10}, {200, 0, 300, 10}};
  std::vector<int> cats = {0, 0};
  auto strip_with_iou = [](double gx1, double gx2, double target) {
    // Slide a same-length strip: inter = L - d, union = L + d, iou = (L-d)/(L+d).
    double L = gx2 - gx1;
    double d = L * (1 - target) / (1 + target);
    return std::array<double, 4>{gx1 + d, 0, gx2 + d, 10};
  };
  std::vector<Detection> dets(3);
  dets[0] = {strip_with_iou(0, 100, 0.6), 0, 0.9};
  dets[1] = {strip_with_iou(200, 300, 0.7), 0, 0.8};
  dets[2] = {strip_with_iou(200, 300, 0.65), 0, 0.7};
  REQUIRE(iou(dets[0].box, gts[0]) == Catch::Approx(0.6).epsilon(1e-9));
  REQUIRE(iou(dets[1].box, gts[1]) == Catch::Approx(0.7).epsilon(1e-9));
  REQUIRE(iou(dets[2].box, gts[1]) == Catch::Approx(0.65).epsilon(1e-9));
  auto r = match_detections(dets, gts, cats, 0.5);
  REQUIRE(r.tp == std::vector<char>{1, 1, 0});
}

TEST_CASE("average precision closed-form cases") {
  REQUIRE(average_precision({1}, 1) == 1.0);
  REQUIRE(average_precision({0, 0}, 1) == 0.0);
  // [TP,FP,TP] over 2 gt: p(r)=1 for r<=0.5, 2/3 beyond.
  double expect = (51.0 * 1.0 + 50.0 * (2.0 / 3.0)) / 101.0;
  REQUIRE(average_precision({1, 0, 1}, 2) == Catch::Approx(expect).epsilon(1e-12));
  REQUIRE(average_precision({1, 0, 1}, 2) == Catch::Approx(0.834983).margin(5e-7));
  REQUIRE_THROWS_AS(average_precision({1}, 0), std::invalid_argument);
}

TEST_CASE("evaluate: perfect detections give AP 1.0, silence gives 0.0") {
  Rng rng(5);
  std::vector<std::vector<Detection>> perfect, silent;
  std::vector<GroundTruth> gts;
  for (int i = 0; i < 20; ++i) {
    SmallScene s = random_scene(rng);
    if (s.gt.boxes.empty()) continue;
    gts.push_back(s.gt);
    std::vector<Detection> d;
    for (std::size_t g = 0; g < s.gt.boxes.size(); ++g) {
      int cat = static_cast<int>(std::find(default_vocab().begin(), default_vocab().end(),
                                           s.gt.categories[g]) -
                                 default_vocab().begin());
      d.push_back({s.gt.boxes[g], cat, 1.0});
    }
    perfect.push_back(d);
    silent.push_back({});
  }
  APReport p = evaluate_detections(perfect, gts, default_vocab());
  REQUIRE(p.ap50 == 1.0);
  REQUIRE(p.ap75 == 1.0);
  REQUIRE(p.ap == 1.0);
  APReport s = evaluate_detections(silent, gts, default_vocab());
  REQUIRE(s.ap50 == 0.0);
  REQUIRE(s.ap == 0.0);
  REQUIRE_THROWS_AS(evaluate_detections({}, {}, default_vocab()), std::invalid_argument);
}

TEST_CASE("evaluate equals the brute-force oracle on 100 random small scenes") {
  Rng rng(2024);
  std::vector<std::vector<Detection>> dets;
  std::vector<std::vector<oracle::Det>> odets;
  std::vector<GroundTruth> gts;
  for (int i = 0; i < 100; ++i) {
    SmallScene s = random_scene(rng);
    dets.push_back(s.dets);
    odets.push_back(to_oracle(s.dets));
    gts.push_back(s.gt);
  }
  APReport got = evaluate_detections(dets, gts, default_vocab());
  oracle::Report want = oracle::evaluate_ref(odets, gts, default_vocab());
  REQUIRE(got.ap50 == Catch::Approx(want.ap50).margin(1e-9));
  REQUIRE(got.ap75 == Catch::Approx(want.ap75).margin(1e-9));
  REQUIRE(got.ap == Catch::Approx(want.ap).margin(1e-9));
  for (const auto& [name, cat] : want.per_category) {
    REQUIRE(got.per_category.at(name).ap50 == Catch::Approx(cat[0]).margin(1e-9));
    REQUIRE(got.per_category.at(name).ap75 == Catch::Approx(cat[1]).margin(1e-9));
    REQUIRE(got.per_category.at(name).ap == Catch::Approx(cat[2]).margin(1e-9));
  }
}

TEST_CASE("shuffling detection input order never changes the report") {
  Rng rng(31);
  for (int trial = 0; trial < 20; ++trial) {
    std::vector<std::vector<Detection>> dets, shuffled;
    std::vector<GroundTruth> gts;
    for (int i = 0; i < 8; ++i) {
      SmallScene s = random_scene(rng);
      dets.push_back(s.dets);
      auto copy = s.dets;
      for (std::size_t k = copy.size(); k > 1; --k)
        std::swap(copy[k - 1], copy[static_cast<std::size_t>(rng.uniform_int(0, static_cast<int>(k) - 1))]);
      shuffled.push_back(copy);
      gts.push_back(s.gt);
    }
    APReport a = evaluate_detections(dets, gts, default_vocab());
    APReport b = evaluate_detections(shuffled, gts, default_vocab());
    REQUIRE(a.ap50 == b.ap50);
    REQUIRE(a.ap75 == b.ap75);
    REQUIRE(a.ap == b.ap);
  }
}

TEST_CASE("false-positive monotonicity at the score extremes") {
  Rng rng(57);
  for (int trial = 0; trial < 20; ++trial) {
    SmallScene s = random_scene(rng);
    if (s.gt.boxes.empty() || s.dets.empty()) continue;
    std::vector<GroundTruth> gts = {s.gt};
    APReport base = evaluate_detections({s.dets}, gts, default_vocab());

    // Far-away box: guaranteed FP for any category.
    Detection fp;
    fp.box = {500, 500, 510, 510};
    fp.category = static_cast<int>(rng.uniform_int(0, 2));

    auto with_low = s.dets;
    fp.score = 0.0;  // strictly below every existing score
    with_low.push_back(fp);
    APReport low = evaluate_detections({with_low}, gts, default_vocab());
    REQUIRE(low.ap50 == Catch::Approx(base.ap50).margin(1e-12));
    REQUIRE(low.ap == Catch::Approx(base.ap).margin(1e-12));

    auto with_high = s.dets;
    fp.score = 1.0;  // strictly above every existing score
    with_high.push_back(fp);
    APReport high = evaluate_detections({with_high}, gts, default_vocab());
    REQUIRE(high.ap50 <= base.ap50 + 1e-12);
    REQUIRE(high.ap <= base.ap + 1e-12);
  }
}

TEST_CASE("AP is monotone in the IoU threshold and bounded in [0,1]") {
  Rng rng(91);
  for (int trial = 0; trial < 30; ++trial) {
    std::vector<std::vector<Detection>> dets;
    std::vector<GroundTruth> gts;
    for (int i = 0; i < 5; ++i) {
      SmallScene s = random_scene(rng);
      dets.push_back(s.dets);
      gts.push_back(s.gt);
    }
    bool any_gt = false;
    for (const auto& g : gts) any_gt = any_gt || !g.boxes.empty();
    if (!any_gt) continue;
    APReport r = evaluate_detections(dets, gts, default_vocab());
    REQUIRE(r.ap50 >= r.ap75 - 1e-12);
    for (double v : {r.ap50, r.ap75, r.ap}) {
      REQUIRE(v >= 0.0);
      REQUIRE(v <= 1.0);
    }
  }
}

TEST_CASE("report json round trip is lossless") {
  Rng rng(3);
  std::vector<std::vector<Detection>> dets;
  std::vector<GroundTruth> gts;
  for (int i = 0; i < 10; ++i) {
    SmallScene s = random_scene(rng);
    dets.push_back(s.dets);
    gts.push_back(s.gt);
  }
  APReport r = evaluate_detections(dets, gts, default_vocab());
  APReport back = report_from_json(report_to_json(r));
  REQUIRE(reports_identical(r, back));
}
