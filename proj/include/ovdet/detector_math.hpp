#pragma once

// Pure detector math, templated on the scalar so tests can run it in double:
// anchor grids, Faster-R-CNN box-delta coding, NMS, the cosine-softmax
// prototype classifier, and the three-term detection loss with analytic
// gradients (finite-difference checkable).

#include <array>
#include <string>
#include <vector>

#include "ovdet/align.hpp"
#include "ovdet/common.hpp"
#include "ovdet/datakit.hpp"

namespace ovdet::detector {

/// Square anchors centered on feature-map cells, cell-major (y, x) then size.
/// Anchors may overhang the image; decoded proposals are clipped instead.
inline std::vector<datakit::BBox> make_anchors(int map_h, int map_w, double stride,
                                               const std::vector<double>& sizes) {
  std::vector<datakit::BBox> anchors;
  anchors.reserve(static_cast<std::size_t>(map_h) * map_w * sizes.size());
  for (int y = 0; y < map_h; ++y) {
    for (int x = 0; x < map_w; ++x) {
      const double cx = (x + 0.5) * stride;
      const double cy = (y + 0.5) * stride;
      for (double s : sizes) {
        anchors.push_back({cx - s / 2, cy - s / 2, cx + s / 2, cy + s / 2});
      }
    }
  }
  return anchors;
}

/// (tx, ty, tw, th) encoding of `target` relative to `anchor`.
template <class S>
std::array<S, 4> encode_box_delta(const datakit::BBox& anchor, const datakit::BBox& target) {
  const double aw = anchor.width(), ah = anchor.height();
  const double ax = anchor.x_min + aw / 2, ay = anchor.y_min + ah / 2;
  const double tw = target.width(), th = target.height();
  const double tx = target.x_min + tw / 2, ty = target.y_min + th / 2;
  return {static_cast<S>((tx - ax) / aw), static_cast<S>((ty - ay) / ah),
          static_cast<S>(std::log(tw / aw)), static_cast<S>(std::log(th / ah))};
}

/// Inverse of encode_box_delta, clipped to the image and to a minimum side of
/// one pixel. Log-scale deltas are clamped to ±4 before exponentiation.
template <class S>
datakit::BBox decode_box_delta(const datakit::BBox& anchor, S tx, S ty, S tw, S th, double img_w,
                               double img_h) {
  const double aw = anchor.width(), ah = anchor.height();
  const double ax = anchor.x_min + aw / 2, ay = anchor.y_min + ah / 2;
  const double cx = ax + static_cast<double>(tx) * aw;
  const double cy = ay + static_cast<double>(ty) * ah;
  const double w = aw * std::exp(std::clamp(static_cast<double>(tw), -4.0, 4.0));
  const double h = ah * std::exp(std::clamp(static_cast<double>(th), -4.0, 4.0));
  datakit::BBox box{cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2};
  box.x_min = std::clamp(box.x_min, 0.0, img_w - 1.0);
  box.y_min = std::clamp(box.y_min, 0.0, img_h - 1.0);
  box.x_max = std::clamp(box.x_max, box.x_min + 1.0, img_w);
  box.y_max = std::clamp(box.y_max, box.y_min + 1.0, img_h);
  return box;
}

inline double box_iou(const datakit::BBox& a, const datakit::BBox& b) {
  const double ix = std::max(0.0, std::min(a.x_max, b.x_max) - std::max(a.x_min, b.x_min));
  const double iy = std::max(0.0, std::min(a.y_max, b.y_max) - std::max(a.y_min, b.y_min));
  const double inter = ix * iy;
  const double uni = a.area() + b.area() - inter;
  return uni > 0 ? inter / uni : 0.0;
}

/// Greedy NMS: keep indices in descending score order (ties keep input
/// order), dropping boxes with IoU above the threshold against a keeper.
inline std::vector<std::size_t> nms(const std::vector<datakit::BBox>& boxes,
                                    const std::vector<double>& scores, double iou_threshold) {
  std::vector<std::size_t> order(boxes.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });
  std::vector<std::size_t> keep;
  std::vector<bool> removed(boxes.size(), false);
  for (std::size_t i : order) {
    if (removed[i]) continue;
    keep.push_back(i);
    for (std::size_t j : order) {
      if (removed[j] || j == i) continue;
      if (box_iou(boxes[i], boxes[j]) > iou_threshold) removed[j] = true;
    }
  }
  return keep;
}

/// Cosine-softmax matching probabilities: row i is the softmax over the
/// cosine similarities of feature i against every bank row (no temperature).
template <class S>
MatX<S> classify_regions(const MatX<S>& features, const MatX<S>& bank) {
  const MatX<S> sim = align::cosine_similarity(features, bank);
  MatX<S> probs(sim.rows(), sim.cols());
  for (Eigen::Index i = 0; i < sim.rows(); ++i) {
    const S zmax = sim.row(i).maxCoeff();
    VecX<S> e = (sim.row(i).array() - zmax).exp().matrix().transpose();
    probs.row(i) = (e / e.sum()).transpose();
  }
  return probs;
}

struct Assignment {
  int index = 0;        // bank row of the argmax
  double score = 0.0;   // its probability
  bool background = false;
};

/// Argmax category per region; exact ties resolve to the first bank row.
/// With `has_background` the last column is the background prototype and an
/// argmax there marks the region suppressed.
template <class S>
std::vector<Assignment> assign_labels(const MatX<S>& probs, bool has_background) {
  std::vector<Assignment> out;
  out.reserve(static_cast<std::size_t>(probs.rows()));
  for (Eigen::Index i = 0; i < probs.rows(); ++i) {
    int best = 0;
    for (Eigen::Index j = 1; j < probs.cols(); ++j) {
      if (probs(i, j) > probs(i, best)) best = static_cast<int>(j);
    }
    Assignment a;
    a.index = best;
    a.score = static_cast<double>(probs(i, best));
    a.background = has_background && best == static_cast<int>(probs.cols()) - 1;
    out.push_back(a);
  }
  return out;
}

struct DetectionLossWeights {
  double objectness = 1.0;
  double box_reg = 1.0;
  double classification = 1.0;
};

/// Everything the three-term loss consumes, already matched and sampled.
template <class S>
struct DetectionLossInput {
  VecX<S> objectness_logits;           // sampled anchors
  std::vector<int> objectness_labels;  // 1 = object, 0 = background
  MatX<S> box_deltas;                  // (n_pos, 4) predicted, positives only
  MatX<S> box_targets;                 // (n_pos, 4) encoded ground truth
  MatX<S> region_features;             // (n_roi, d) raw region features
  MatX<S> bank;                        // (L, d) prototype rows (background last if present)
  std::vector<int> class_targets;      // (n_roi) bank row per region
};

template <class S>
struct DetectionLossResult {
  S objectness = S(0);
  S box_reg = S(0);
  S classification = S(0);
  S total = S(0);
  bool box_warning = false;  // no positive anchors: box term skipped
  VecX<S> d_objectness_logits;
  MatX<S> d_box_deltas;
  MatX<S> d_region_features;
  MatX<S> d_bank;
};

namespace detail {

template <class S>
S softplus(S x) {
  // log(1 + e^x), stable on both tails
  if (x > S(0)) return x + std::log1p(std::exp(-x));
  return std::log1p(std::exp(x));
}

template <class S>
S sigmoid(S x) {
  if (x >= S(0)) return S(1) / (S(1) + std::exp(-x));
  const S e = std::exp(x);
  return e / (S(1) + e);
}

}  // namespace detail

/// Detection loss: balanced binary cross-entropy objectness (each present
/// side contributes half its per-anchor mean), smooth-L1 box regression
/// averaged over positives, and cross-entropy through the cosine-softmax
/// prototype classifier. Gradients are analytic, weight-scaled, and cover
/// logits, deltas, region features, and bank rows.
template <class S>
DetectionLossResult<S> detection_loss(const DetectionLossInput<S>& in,
                                      const DetectionLossWeights& w) {
  DetectionLossResult<S> out;
  const Eigen::Index n_obj = in.objectness_logits.size();
  if (static_cast<Eigen::Index>(in.objectness_labels.size()) != n_obj) {
    throw std::invalid_argument("objectness label count mismatch");
  }

  // -- objectness --
  out.d_objectness_logits = VecX<S>::Zero(n_obj);
  Eigen::Index n_pos_obj = 0;
  for (int lbl : in.objectness_labels) n_pos_obj += (lbl == 1);
  const Eigen::Index n_neg_obj = n_obj - n_pos_obj;
  for (Eigen::Index i = 0; i < n_obj; ++i) {
    const S logit = in.objectness_logits[i];
    const S p = detail::sigmoid(logit);
    if (in.objectness_labels[static_cast<std::size_t>(i)] == 1) {
      const S side = S(0.5) / static_cast<S>(n_pos_obj);
      out.objectness += side * detail::softplus(-logit);
      out.d_objectness_logits[i] = side * (p - S(1));
    } else {
      const S side = S(0.5) / static_cast<S>(n_neg_obj);
      out.objectness += side * detail::softplus(logit);
      out.d_objectness_logits[i] = side * p;
    }
  }

  // -- box regression (smooth L1, mean over positive anchors) --
  const Eigen::Index n_pos = in.box_deltas.rows();
  if (in.box_targets.rows() != n_pos) throw std::invalid_argument("box target count mismatch");
  out.d_box_deltas = MatX<S>::Zero(n_pos, 4);
  if (n_pos == 0) {
    out.box_warning = true;
  } else {
    for (Eigen::Index i = 0; i < n_pos; ++i) {
      for (Eigen::Index k = 0; k < 4; ++k) {
        const S x = in.box_deltas(i, k) - in.box_targets(i, k);
        if (std::abs(static_cast<double>(x)) < 1.0) {
          out.box_reg += S(0.5) * x * x;
          out.d_box_deltas(i, k) = x;
        } else {
          out.box_reg += std::abs(static_cast<double>(x)) - S(0.5);
          out.d_box_deltas(i, k) = x > S(0) ? S(1) : S(-1);
        }
      }
    }
    out.box_reg /= static_cast<S>(n_pos);
    out.d_box_deltas /= static_cast<S>(n_pos);
  }

  // -- classification through the prototype classifier (cosine softmax, tau = 1) --
  if (in.region_features.rows() > 0) {
    out.classification =
        align::cosine_softmax_ce<S>(in.region_features, in.bank, in.class_targets, S(1),
                                    &out.d_region_features, &out.d_bank);
  } else {
    out.d_region_features = MatX<S>::Zero(0, in.bank.cols());
    out.d_bank = MatX<S>::Zero(in.bank.rows(), in.bank.cols());
  }

  out.total = static_cast<S>(w.objectness) * out.objectness +
              static_cast<S>(w.box_reg) * out.box_reg +
              static_cast<S>(w.classification) * out.classification;
  out.d_objectness_logits *= static_cast<S>(w.objectness);
  out.d_box_deltas *= static_cast<S>(w.box_reg);
  out.d_region_features *= static_cast<S>(w.classification);
  out.d_bank *= static_cast<S>(w.classification);
  return out;
}

}  // namespace ovdet::detector
