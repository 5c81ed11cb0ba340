#pragma once

#include <stdexcept>
#include <string>
#include <vector>

#include "modprompt/assign.hpp"
#include "modprompt/autograd.hpp"
#include "modprompt/detector.hpp"

namespace modprompt {

constexpr double kLambdaBox = 2.0;

struct LossBreakdown {
  double classification = 0;
  double box = 0;
  double total = 0;
};

struct DetectionLoss {
  Var total;  // scalar node; backward() distributes into the whole graph
  LossBreakdown values;
};

// Eq-1-style per-image loss: mean sigmoid BCE of the category logits against
// the one-hot cell assignment, plus lambda * mean(1 - IoU) of the decoded
// boxes at positive cells. The box term is skipped when nothing is assigned.
inline DetectionLoss detection_loss(const RawPredictions& raw, const GroundTruth& gt,
                                    const std::vector<std::string>& vocab, int image_h,
                                    int image_w, double lambda_box = kLambdaBox) {
  if (!raw.logits->val.all_finite())
    throw std::runtime_error("detection_loss: non-finite logits");

  int cells = raw.grid_h * raw.grid_w;
  int K = raw.logits->val.dim(1);
  CellAssignment assign =
      assign_targets(gt, vocab, raw.grid_h, raw.grid_w, image_h, image_w);

  Tensor targets({cells, K});
  std::vector<int> pos_cells;
  for (int c = 0; c < cells; ++c) {
    int cat = assign.category[static_cast<std::size_t>(c)];
    if (cat >= 0) {
      targets.at2(c, cat) = 1.0;
      pos_cells.push_back(c);
    }
  }

  Var cls = bce_logits_mean(raw.logits, std::move(targets));

  DetectionLoss out;
  out.values.classification = cls->val.at(0);
  if (!pos_cells.empty()) {
    Var boxes = gather_rows(decode_boxes(raw.offsets, raw.stride), pos_cells);
    Tensor tgt({static_cast<int>(pos_cells.size()), 4});
    for (std::size_t k = 0; k < pos_cells.size(); ++k)
      for (int d = 0; d < 4; ++d) tgt.at2(static_cast<int>(k), d) = assign.box_targets.at2(pos_cells[k], d);
    Var box = iou_loss_mean(boxes, std::move(tgt));
    out.values.box = box->val.at(0);
    out.total = add(cls, scale(box, lambda_box));
  } else {
    out.total = cls;
  }
  out.values.total = out.total->val.at(0);
  return out;
}

}  // namespace modprompt
