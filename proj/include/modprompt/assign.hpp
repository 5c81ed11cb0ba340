#pragma once

#include <algorithm>
#include <stdexcept>
#include <string>
#include <vector>

#include "modprompt/scene.hpp"
#include "modprompt/tensor.hpp"

namespace modprompt {

// Per-cell training targets from center sampling: a cell is positive iff its
// center lies inside a box AND within `radius_cells` strides of that box's
// center. Overlap ties go to the smaller-area box (lower index on equal area).
struct CellAssignment {
  int grid_h = 0, grid_w = 0;
  std::vector<int> category;   // per cell; -1 = background
  std::vector<int> gt_index;   // per cell; -1 = none
  Tensor box_targets;          // [G*G, 4]; rows valid only at positive cells

  int positives() const {
    int n = 0;
    for (int c : category)
      if (c >= 0) ++n;
    return n;
  }
};

inline CellAssignment assign_targets(const GroundTruth& gt,
                                     const std::vector<std::string>& vocab, int grid_h,
                                     int grid_w, int image_h, int image_w,
                                     double radius_cells = 1.5) {
  CellAssignment a;
  a.grid_h = grid_h;
  a.grid_w = grid_w;
  a.category.assign(static_cast<std::size_t>(grid_h) * grid_w, -1);
  a.gt_index.assign(static_cast<std::size_t>(grid_h) * grid_w, -1);
  a.box_targets = Tensor({grid_h * grid_w, 4});

  double sy = static_cast<double>(image_h) / grid_h;
  double sx = static_cast<double>(image_w) / grid_w;

  std::vector<int> cat_idx(gt.boxes.size());
  for (std::size_t g = 0; g < gt.boxes.size(); ++g) {
    auto it = std::find(vocab.begin(), vocab.end(), gt.categories[g]);
    if (it == vocab.end())
      throw std::invalid_argument("assign_targets: category '" + gt.categories[g] +
                                  "' not in vocabulary");
    cat_idx[g] = static_cast<int>(it - vocab.begin());
  }

  for (int i = 0; i < grid_h; ++i) {
    for (int j = 0; j < grid_w; ++j) {
      double cy = (i + 0.5) * sy, cx = (j + 0.5) * sx;
      int best = -1;
      double best_area = 0;
      for (std::size_t g = 0; g < gt.boxes.size(); ++g) {
        const auto& b = gt.boxes[g];
        if (cx < b[0] || cx > b[2] || cy < b[1] || cy > b[3]) continue;
        double bcx = (b[0] + b[2]) / 2.0, bcy = (b[1] + b[3]) / 2.0;
        if (std::abs(cx - bcx) > radius_cells * sx || std::abs(cy - bcy) > radius_cells * sy)
          continue;
        double area = (b[2] - b[0]) * (b[3] - b[1]);
        if (best < 0 || area < best_area) {
          best = static_cast<int>(g);
          best_area = area;
        }
      }
      if (best >= 0) {
        int cell = i * grid_w + j;
        const auto& b = gt.boxes[static_cast<std::size_t>(best)];
        a.category[static_cast<std::size_t>(cell)] = cat_idx[static_cast<std::size_t>(best)];
        a.gt_index[static_cast<std::size_t>(cell)] = best;
        a.box_targets.at2(cell, 0) = b[0];
        a.box_targets.at2(cell, 1) = b[1];
        a.box_targets.at2(cell, 2) = b[2];
        a.box_targets.at2(cell, 3) = b[3];
      }
    }
  }
  return a;
}

}  // namespace modprompt
