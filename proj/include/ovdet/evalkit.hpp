#pragma once

#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "ovdet/datakit.hpp"
#include "ovdet/taxonomy.hpp"

namespace ovdet::evalkit {

struct Detection {
  std::string image_id;
  std::string category;
  datakit::BBox box;
  double score = 0.0;
};

struct GroundTruthBox {
  std::string image_id;
  std::string category;
  datakit::BBox box;
};

double iou(const datakit::BBox& a, const datakit::BBox& b);

/// Greedy matching of one category's detections against one image's ground
/// truth. Returns TP flags aligned with the input detection order; matching
/// itself walks detections by descending score (ties keep input order), each
/// claiming the highest-IoU still-unmatched GT at or above the threshold.
std::vector<bool> match_detections(const std::vector<Detection>& dets,
                                   const std::vector<GroundTruthBox>& gts,
                                   double iou_threshold);

/// Average precision from TP flags and scores. All-point interpolation by
/// default; `coco101` switches to the 101-point recall grid. n_gt == 0 yields
/// an unset result (excluded from means).
std::optional<double> average_precision(const std::vector<bool>& tp_flags,
                                        const std::vector<double>& scores, int n_gt,
                                        bool coco101 = false);

struct EvalOptions {
  double iou_threshold = 0.5;
  bool coco101 = false;
  bool strict = false;  // stray categories become an error
};

struct GroupResult {
  double map50 = 0.0;
  int evaluated = 0;  // members with >= 1 GT instance
};

struct EvalResult {
  std::map<std::string, double> per_category_ap;      // categories with >= 1 GT
  std::map<std::string, double> per_class_ap;         // class-level protocols only
  double map50_seen = 0.0;
  double map50_unseen = 0.0;
  double map50_all = 0.0;
  int seen_evaluated = 0;
  int unseen_evaluated = 0;
  std::map<std::string, std::pair<int, int>> counts;  // category -> (n_gt, n_det)
  std::vector<std::string> zero_gt_categories;        // excluded from the means
  std::vector<std::string> stray_categories;          // detections outside the split
  std::string protocol;
};

/// Scores a detection results set against annotations under a seen/unseen
/// split. For class-level splits the registry supplies class membership and
/// class AP is the unweighted mean of member-category APs.
EvalResult evaluate(const std::vector<Detection>& detections,
                    const datakit::DatasetIndex& annotations,
                    const taxonomy::SplitSpec& split,
                    const taxonomy::TaxonomyRegistry* registry = nullptr,
                    const EvalOptions& options = {});

std::vector<Detection> load_detections(const std::filesystem::path& path);
void save_detections(const std::vector<Detection>& dets, const std::filesystem::path& path);

std::string eval_result_to_json_text(const EvalResult& result);
void save_eval_result(const EvalResult& result, const std::filesystem::path& path);

/// Plain-text table: one block per group with mAP50 and per-entry AP columns,
/// percentages with one decimal.
std::string render_table(const EvalResult& result);

/// Staircase precision/recall plot for one category, written as a PPM image.
void render_pr_curve(const std::vector<bool>& tp_flags, const std::vector<double>& scores,
                     int n_gt, const std::filesystem::path& path);

/// Recomputes the per-detection flags for one category (all images), used by
/// the PR plot command.
std::vector<bool> category_flags(const std::vector<Detection>& dets,
                                 const std::vector<GroundTruthBox>& gts,
                                 double iou_threshold);

}  // namespace ovdet::evalkit
