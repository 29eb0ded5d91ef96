#pragma once

// Dice and BestDice over instance label images.

#include <algorithm>
#include <cstdint>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "leafmask/errors.hpp"

namespace leafmask {

// Per-pixel instance ids, row-major; 0 is background.
struct LabelImage {
  std::size_t width = 0;
  std::size_t height = 0;
  std::vector<std::uint32_t> ids;

  LabelImage() = default;
  LabelImage(std::size_t w, std::size_t h) : width(w), height(h), ids(w * h, 0) {}
  LabelImage(std::size_t w, std::size_t h, std::vector<std::uint32_t> data)
      : width(w), height(h), ids(std::move(data)) {
    if (ids.size() != w * h) throw ShapeError("LabelImage: data length does not match size");
  }

  std::uint32_t& at(std::size_t x, std::size_t y) { return ids[y * width + x]; }
  std::uint32_t at(std::size_t x, std::size_t y) const { return ids[y * width + x]; }

  // Sorted distinct non-zero ids.
  std::vector<std::uint32_t> instances() const {
    std::vector<std::uint32_t> out;
    for (auto v : ids)
      if (v) out.push_back(v);
    std::sort(out.begin(), out.end());
    out.erase(std::unique(out.begin(), out.end()), out.end());
    return out;
  }

  bool operator==(const LabelImage&) const = default;
};

// 2|a & b| / (|a| + |b|) from counts; two empty masks score 1.
inline double dice_from_counts(std::size_t intersection, std::size_t size_a, std::size_t size_b) {
  if (size_a + size_b == 0) return 1.0;
  return 2.0 * static_cast<double>(intersection) / static_cast<double>(size_a + size_b);
}

inline double dice(const std::vector<std::uint8_t>& a, const std::vector<std::uint8_t>& b) {
  if (a.size() != b.size())
    throw ShapeError("dice: mask sizes differ (" + std::to_string(a.size()) + " vs " +
                     std::to_string(b.size()) + ")");
  std::size_t inter = 0, na = 0, nb = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const bool x = a[i] != 0, y = b[i] != 0;
    na += x;
    nb += y;
    inter += x && y;
  }
  return dice_from_counts(inter, na, nb);
}

struct InstanceMatch {
  std::uint32_t gt_id = 0;
  std::uint32_t best_pred_id = 0;  // 0 when no predicted instance overlaps
  double dice = 0.0;
};

struct BestDiceReport {
  double score = 0.0;  // percent
  std::size_t gt_instances = 0;
  std::size_t pred_instances = 0;
  std::vector<InstanceMatch> matches;  // one per gt instance, ascending id
};

// For every non-zero id in `gt`, the best dice against any non-zero id in
// `pred`; averaged over gt instances, in percent. Ties in the max keep the
// lowest predicted id.
inline BestDiceReport best_dice_report(const LabelImage& pred, const LabelImage& gt) {
  if (pred.width != gt.width || pred.height != gt.height)
    throw ShapeError("best_dice: image sizes differ (" + std::to_string(pred.width) + "x" +
                     std::to_string(pred.height) + " vs " + std::to_string(gt.width) + "x" +
                     std::to_string(gt.height) + ")");
  std::map<std::uint32_t, std::size_t> gt_size, pred_size;
  std::map<std::pair<std::uint32_t, std::uint32_t>, std::size_t> overlap;
  for (std::size_t i = 0; i < gt.ids.size(); ++i) {
    const auto g = gt.ids[i], p = pred.ids[i];
    if (g) ++gt_size[g];
    if (p) ++pred_size[p];
    if (g && p) ++overlap[{g, p}];
  }
  if (gt_size.empty()) throw UndefinedMetricError("best_dice: ground truth has no instances");

  BestDiceReport r;
  r.gt_instances = gt_size.size();
  r.pred_instances = pred_size.size();
  double acc = 0.0;
  for (const auto& [g, ng] : gt_size) {
    InstanceMatch m{g, 0, 0.0};
    for (const auto& [p, np] : pred_size) {
      const auto it = overlap.find({g, p});
      const double d = dice_from_counts(it == overlap.end() ? 0 : it->second, ng, np);
      if (d > m.dice) {
        m.dice = d;
        m.best_pred_id = p;
      }
    }
    acc += m.dice;
    r.matches.push_back(m);
  }
  r.score = 100.0 * acc / static_cast<double>(gt_size.size());
  return r;
}

inline double best_dice(const LabelImage& pred, const LabelImage& gt) {
  return best_dice_report(pred, gt).score;
}

// min of both directions; both images need at least one instance.
inline double symmetric_best_dice(const LabelImage& pred, const LabelImage& gt) {
  return std::min(best_dice(pred, gt), best_dice(gt, pred));
}

}  // namespace leafmask
