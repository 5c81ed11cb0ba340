#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <functional>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "modprompt/dataset.hpp"
#include "modprompt/scene.hpp"

namespace modprompt {

struct Detection {
  std::array<double, 4> box{};  // x1,y1,x2,y2
  int category = 0;
  double score = 0;
};

// Intersection over union; degenerate boxes contribute zero area.
inline double iou(const std::array<double, 4>& a, const std::array<double, 4>& b) {
  double aw = std::max(0.0, a[2] - a[0]), ah = std::max(0.0, a[3] - a[1]);
  double bw = std::max(0.0, b[2] - b[0]), bh = std::max(0.0, b[3] - b[1]);
  double iw = std::min(a[2], b[2]) - std::max(a[0], b[0]);
  double ih = std::min(a[3], b[3]) - std::max(a[1], b[1]);
  double inter = (iw > 0 && ih > 0) ? iw * ih : 0.0;
  double uni = aw * ah + bw * bh - inter;
  return uni > 0 ? inter / uni : 0.0;
}

// Greedy per-image matching at one IoU threshold. Detections are (re)sorted
// by descending score; each one takes the unmatched same-category gt with the
// highest IoU >= thr, IoU ties going to the lower gt index.
struct MatchResult {
  std::vector<int> det_order;    // original detection indices, score-descending
  std::vector<char> tp;          // aligned with det_order
  std::vector<int> matched_gt;   // aligned with det_order; -1 = unmatched
  std::vector<double> scores;    // aligned with det_order
  std::vector<int> categories;   // aligned with det_order
  int num_gt = 0;
};

inline MatchResult match_detections(const std::vector<Detection>& dets,
                                    const std::vector<std::array<double, 4>>& gt_boxes,
                                    const std::vector<int>& gt_categories, double iou_thr) {
  if (gt_boxes.size() != gt_categories.size())
    throw std::invalid_argument("match_detections: gt size mismatch");

  MatchResult r;
  r.num_gt = static_cast<int>(gt_boxes.size());
  r.det_order.resize(dets.size());
  for (std::size_t i = 0; i < dets.size(); ++i) r.det_order[static_cast<int>(i)] = static_cast<int>(i);
  std::stable_sort(r.det_order.begin(), r.det_order.end(),
                   [&](int a, int b) { return dets[a].score > dets[b].score; });

  std::vector<char> gt_used(gt_boxes.size(), 0);
  for (int oi : r.det_order) {
    const Detection& d = dets[static_cast<std::size_t>(oi)];
    int best = -1;
    double best_iou = iou_thr;
    for (std::size_t g = 0; g < gt_boxes.size(); ++g) {
      if (gt_used[g] || gt_categories[g] != d.category) continue;
      double v = iou(d.box, gt_boxes[g]);
      if (v > best_iou || (best < 0 && v >= iou_thr)) {
        best = static_cast<int>(g);
        best_iou = v;
      }
    }
    if (best >= 0) gt_used[static_cast<std::size_t>(best)] = 1;
    r.tp.push_back(best >= 0 ? 1 : 0);
    r.matched_gt.push_back(best);
    r.scores.push_back(d.score);
    r.categories.push_back(d.category);
  }
  return r;
}

// 101-point interpolated AP over a score-descending TP/FP sequence.
inline double average_precision(const std::vector<char>& tp_flags, int num_gt) {
  if (num_gt <= 0) throw std::invalid_argument("average_precision: num_gt must be positive");
  std::size_t n = tp_flags.size();
  std::vector<double> precision(n), recall(n);
  int tp = 0;
  for (std::size_t i = 0; i < n; ++i) {
    tp += tp_flags[i] ? 1 : 0;
    precision[i] = static_cast<double>(tp) / static_cast<double>(i + 1);
    recall[i] = static_cast<double>(tp) / num_gt;
  }
  // Envelope: p(r) = max precision at recall >= r.
  double sum = 0;
  for (int k = 0; k <= 100; ++k) {
    double r = k / 100.0;
    double best = 0;
    for (std::size_t i = 0; i < n; ++i)
      if (recall[i] >= r - 1e-12) best = std::max(best, precision[i]);
    sum += best;
  }
  return sum / 101.0;
}

struct CategoryAP {
  double ap50 = 0, ap75 = 0, ap = 0;
  int num_gt = 0;
  int num_det = 0;
};

struct APReport {
  double ap50 = 0, ap75 = 0, ap = 0;
  std::map<std::string, CategoryAP> per_category;
  int images = 0;
  int detections = 0;
};

inline bool reports_identical(const APReport& a, const APReport& b) {
  if (a.ap50 != b.ap50 || a.ap75 != b.ap75 || a.ap != b.ap) return false;
  if (a.images != b.images || a.detections != b.detections) return false;
  if (a.per_category.size() != b.per_category.size()) return false;
  for (const auto& [k, ca] : a.per_category) {
    auto it = b.per_category.find(k);
    if (it == b.per_category.end()) return false;
    const auto& cb = it->second;
    if (ca.ap50 != cb.ap50 || ca.ap75 != cb.ap75 || ca.ap != cb.ap) return false;
    if (ca.num_gt != cb.num_gt || ca.num_det != cb.num_det) return false;
  }
  return true;
}

// Flat serialization consumed by the report tooling.
inline nlohmann::json report_to_json(const APReport& r) {
  nlohmann::json j;
  j["ap50"] = r.ap50;
  j["ap75"] = r.ap75;
  j["ap"] = r.ap;
  j["images"] = r.images;
  j["detections"] = r.detections;
  for (const auto& [name, c] : r.per_category) {
    j["per_category"][name] = {{"ap50", c.ap50}, {"ap75", c.ap75}, {"ap", c.ap},
                               {"num_gt", c.num_gt}, {"num_det", c.num_det}};
  }
  return j;
}

inline APReport report_from_json(const nlohmann::json& j) {
  APReport r;
  r.ap50 = j.at("ap50").get<double>();
  r.ap75 = j.at("ap75").get<double>();
  r.ap = j.at("ap").get<double>();
  r.images = j.at("images").get<int>();
  r.detections = j.at("detections").get<int>();
  if (j.contains("per_category"))
    for (const auto& [name, c] : j.at("per_category").items()) {
      CategoryAP ca;
      ca.ap50 = c.at("ap50").get<double>();
      ca.ap75 = c.at("ap75").get<double>();
      ca.ap = c.at("ap").get<double>();
      ca.num_gt = c.at("num_gt").get<int>();
      ca.num_det = c.at("num_det").get<int>();
      r.per_category[name] = ca;
    }
  return r;
}

inline const std::vector<double>& coco_iou_thresholds() {
  static const std::vector<double> t = {0.50, 0.55, 0.60, 0.65, 0.70,
                                        0.75, 0.80, 0.85, 0.90, 0.95};
  return t;
}

// COCO-style evaluation over per-image detection/gt pairs. Detections are
// pooled per category across the dataset, sorted by (score desc, image asc,
// within-image rank asc), matched per image, and AP is averaged over the
// categories that appear in the ground truth.
inline APReport evaluate_detections(
    const std::vector<std::vector<Detection>>& dets_per_image,
    const std::vector<GroundTruth>& gts_per_image, const std::vector<std::string>& vocab) {
  if (dets_per_image.size() != gts_per_image.size())
    throw std::invalid_argument("evaluate_detections: image count mismatch");
  if (dets_per_image.empty()) throw std::invalid_argument("evaluate_detections: empty dataset");

  int K = static_cast<int>(vocab.size());
  int n_images = static_cast<int>(dets_per_image.size());

  // Ground truth indices per image.
  std::vector<std::vector<int>> gt_cat(n_images);
  for (int im = 0; im < n_images; ++im) {
    const auto& gt = gts_per_image[static_cast<std::size_t>(im)];
    gt_cat[im].reserve(gt.categories.size());
    for (const auto& name : gt.categories) {
      auto it = std::find(vocab.begin(), vocab.end(), name);
      if (it == vocab.end())
        throw std::invalid_argument("evaluate_detections: unknown gt category '" + name + "'");
      gt_cat[im].push_back(static_cast<int>(it - vocab.begin()));
    }
  }

  APReport report;
  report.images = n_images;
  for (const auto& d : dets_per_image) report.detections += static_cast<int>(d.size());

  const auto& thresholds = coco_iou_thresholds();
  int categories_present = 0;
  double sum50 = 0, sum75 = 0, sum_all = 0;

  for (int k = 0; k < K; ++k) {
    int total_gt = 0;
    for (int im = 0; im < n_images; ++im)
      for (int c : gt_cat[im])
        if (c == k) ++total_gt;
    CategoryAP cap;
    cap.num_gt = total_gt;
    for (int im = 0; im < n_images; ++im)
      for (const auto& d : dets_per_image[static_cast<std::size_t>(im)])
        if (d.category == k) ++cap.num_det;
    if (total_gt == 0) {
      // Absent from gt: excluded from the mean entirely.
      report.per_category[vocab[static_cast<std::size_t>(k)]] = cap;
      continue;
    }
    ++categories_present;

    double ap_sum = 0;
    for (std::size_t ti = 0; ti < thresholds.size(); ++ti) {
      double thr = thresholds[ti];
      // (score, image, rank, tp) pooled across images.
      struct Entry {
        double score;
        int image;
        int rank;
        char tp;
      };
      std::vector<Entry> pool;
      for (int im = 0; im < n_images; ++im) {
        const auto& dets = dets_per_image[static_cast<std::size_t>(im)];
        std::vector<Detection> cat_dets;
        for (const auto& d : dets)
          if (d.category == k) cat_dets.push_back(d);
        std::vector<std::array<double, 4>> cat_gt;
        for (std::size_t g = 0; g < gt_cat[im].size(); ++g)
          if (gt_cat[im][g] == k) cat_gt.push_back(gts_per_image[static_cast<std::size_t>(im)].boxes[g]);
        std::vector<int> cat_ids(cat_gt.size(), k);
        MatchResult mr = match_detections(cat_dets, cat_gt, cat_ids, thr);
        for (std::size_t r = 0; r < mr.tp.size(); ++r)
          pool.push_back({mr.scores[r], im, static_cast<int>(r), mr.tp[r]});
      }
      std::stable_sort(pool.begin(), pool.end(), [](const Entry& a, const Entry& b) {
        if (a.score != b.score) return a.score > b.score;
        if (a.image != b.image) return a.image < b.image;
        return a.rank < b.rank;
      });
      std::vector<char> flags;
      flags.reserve(pool.size());
      for (const auto& e : pool) flags.push_back(e.tp);
      double ap_t = average_precision(flags, total_gt);
      ap_sum += ap_t;
      if (thr == 0.50) cap.ap50 = ap_t;
      if (thr == 0.75) cap.ap75 = ap_t;
    }
    cap.ap = ap_sum / static_cast<double>(thresholds.size());
    report.per_category[vocab[static_cast<std::size_t>(k)]] = cap;
    sum50 += cap.ap50;
    sum75 += cap.ap75;
    sum_all += cap.ap;
  }

  if (categories_present > 0) {
    report.ap50 = sum50 / categories_present;
    report.ap75 = sum75 / categories_present;
    report.ap = sum_all / categories_present;
  }
  return report;
}

using DetectFn = std::function<std::vector<Detection>(const Image&)>;

inline APReport evaluate(const DetectFn& detect, const std::vector<Sample>& samples,
                         const std::vector<std::string>& vocab) {
  if (samples.empty()) throw std::invalid_argument("evaluate: empty dataset");
  std::vector<std::vector<Detection>> dets;
  std::vector<GroundTruth> gts;
  dets.reserve(samples.size());
  gts.reserve(samples.size());
  for (const auto& s : samples) {
    dets.push_back(detect(s.image));
    gts.push_back(s.gt);
  }
  return evaluate_detections(dets, gts, vocab);
}

}  // namespace modprompt
