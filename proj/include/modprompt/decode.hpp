#pragma once

#include <algorithm>
#include <cmath>
#include <vector>

#include "modprompt/detector.hpp"
#include "modprompt/metrics.hpp"

namespace modprompt {

struct DecodeConfig {
  double score_threshold = 0.05;
  double nms_iou = 0.5;
  int max_detections = 100;
};

// Greedy class-wise NMS: keep by descending score, drop anything overlapping
// a kept detection of the same category with IoU strictly above the threshold.
inline std::vector<Detection> nms(std::vector<Detection> dets, double iou_thr) {
  std::stable_sort(dets.begin(), dets.end(),
                   [](const Detection& a, const Detection& b) { return a.score > b.score; });
  std::vector<Detection> kept;
  for (const auto& d : dets) {
    bool suppressed = false;
    for (const auto& k : kept)
      if (k.category == d.category && iou(k.box, d.box) > iou_thr) {
        suppressed = true;
        break;
      }
    if (!suppressed) kept.push_back(d);
  }
  return kept;
}

// Dense-head decoding: per-cell score is the max category sigmoid; cells
// below the threshold are dropped, boxes are rebuilt from the side offsets,
// then class-wise NMS and the max-detections cap apply.
inline std::vector<Detection> decode(const RawPredictions& raw, const DecodeConfig& cfg) {
  const Tensor& logits = raw.logits->val;
  const Tensor& offsets = raw.offsets->val;
  int K = logits.dim(1);

  std::vector<Detection> cands;
  for (int i = 0; i < raw.grid_h; ++i)
    for (int j = 0; j < raw.grid_w; ++j) {
      int cell = i * raw.grid_w + j;
      int best_k = 0;
      double best = logits.at2(cell, 0);
      for (int k = 1; k < K; ++k)
        if (logits.at2(cell, k) > best) {
          best = logits.at2(cell, k);
          best_k = k;
        }
      double score = 1.0 / (1.0 + std::exp(-best));
      if (score < cfg.score_threshold) continue;
      double cy = (i + 0.5) * raw.stride, cx = (j + 0.5) * raw.stride;
      Detection d;
      d.box = {cx - offsets.at3(i, j, 0), cy - offsets.at3(i, j, 1),
               cx + offsets.at3(i, j, 2), cy + offsets.at3(i, j, 3)};
      d.category = best_k;
      d.score = score;
      cands.push_back(d);
    }

  std::vector<Detection> kept = nms(std::move(cands), cfg.nms_iou);
  if (static_cast<int>(kept.size()) > cfg.max_detections)
    kept.resize(static_cast<std::size_t>(cfg.max_detections));
  return kept;
}

}  // namespace modprompt
