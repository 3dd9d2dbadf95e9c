#pragma once

// Two-stage detector at desk scale: a small conv backbone, an RPN over a
// square-anchor grid, bilinear ROI pooling into a projection head, and a
// frozen text-prototype bank as the classifier (cosine-softmax scoring).

#include <cstdint>
#include <filesystem>
#include <memory>
#include <string>
#include <vector>

#include "ovdet/align.hpp"
#include "ovdet/datakit.hpp"
#include "ovdet/detector_math.hpp"
#include "ovdet/nn.hpp"
#include "ovdet/textspace.hpp"

namespace ovdet::detector {

struct Proposal {
  datakit::BBox box;
  double objectness = 0.0;
};

struct RegionFeature {
  Vec vector;  // raw head output; unit-normalized inside similarity scoring
  datakit::BBox source_box;
  bool degenerate = false;  // box smaller than one feature cell
};

struct Detection {
  datakit::BBox box;
  std::string category;
  double score = 0.0;  // max matching probability x proposal objectness
};

struct DetectorConfig {
  std::vector<int> backbone_channels = {16, 32, 64, 64};  // 2x pool after all but the last
  int image_size = 64;
  int feature_dim = 64;
  int head_hidden = 256;
  int roi_size = 4;
  std::vector<double> anchor_sizes = {14.0, 22.0, 34.0};
  int pre_nms_top_n = 96;
  int proposal_count = 32;
  double rpn_nms_iou = 0.7;
  double nms_iou = 0.5;
  double score_threshold = 0.05;
  double pos_iou = 0.5;
  double neg_iou = 0.3;
  int rpn_batch = 32;             // anchors sampled per image for the objectness/box terms
  int roi_batch = 32;             // proposals sampled per image for the classification term
  double roi_pos_fraction = 0.25; // 1:3 positive:negative sampling
  DetectionLossWeights loss_weights;

  int stride() const { return 1 << (static_cast<int>(backbone_channels.size()) - 1); }
  int map_size() const { return image_size / stride(); }
  void validate() const;
};

std::string detector_config_to_json(const DetectorConfig& cfg);
DetectorConfig detector_config_from_json(const std::string& text);

struct BackboneCache {
  std::vector<nn::Tensor3<Scalar>> inputs;     // pre-conv input per stage
  std::vector<MatX<Scalar>> cols;              // im2col per stage
  std::vector<nn::Tensor3<Scalar>> post_relu;  // post-activation per stage
  std::vector<Eigen::MatrixXi> argmax;         // pool winners (pooled stages)
};

struct RpnOut {
  nn::Tensor3<Scalar> objectness;  // (A, map_h*map_w) logits
  nn::Tensor3<Scalar> deltas;      // (4A, map_h*map_w)
};

struct RpnCache {
  nn::Tensor3<Scalar> input;
  MatX<Scalar> hidden_cols;
  nn::Tensor3<Scalar> hidden;  // post-relu
};

struct RoiHeadCache {
  nn::RoiCache roi;
  Vec flat;     // flattened pooled map (head input)
  Vec hidden;   // post-relu fc1 output
};

/// One pre-training batch: images with ground-truth boxes whose captions are
/// already encoded. `positives[i][j]` is the candidate row for box j of image
/// i; `image_texts` row i is the caption embedding of image i.
struct PretrainBatch {
  std::vector<datakit::Image> images;
  std::vector<std::vector<datakit::BBox>> boxes;
  std::vector<std::vector<int>> positives;
  Mat candidates;   // (L, d), frozen
  Mat image_texts;  // (B, d), frozen
};

struct PretrainStats {
  double region_loss = 0.0;
  double image_loss = 0.0;
  double total = 0.0;
  int regions = 0;
};

struct FinetuneExample {
  datakit::Image image;
  std::vector<datakit::BBox> gt_boxes;
  std::vector<int> gt_labels;  // bank row per box (background excluded)
};

struct FinetuneStats {
  double objectness = 0.0;
  double box_reg = 0.0;
  double classification = 0.0;
  double total = 0.0;
  int pos_anchors = 0;
  int pos_rois = 0;
  bool box_warning = false;
};

class DetectorModel {
 public:
  DetectorModel(const DetectorConfig& cfg, std::uint64_t init_seed);

  const DetectorConfig& config() const { return cfg_; }
  nn::ParamStore<Scalar>& params() { return params_; }
  const nn::ParamStore<Scalar>& params() const { return params_; }
  const std::vector<datakit::BBox>& anchors() const { return anchors_; }

  nn::Tensor3<Scalar> preprocess(const datakit::Image& img) const;
  nn::Tensor3<Scalar> backbone_forward(const nn::Tensor3<Scalar>& x, BackboneCache* cache) const;
  /// Accumulates parameter gradients; returns nothing (input grad unused).
  void backbone_backward(const nn::Tensor3<Scalar>& d_featmap, const BackboneCache& cache);
  RpnOut rpn_forward(const nn::Tensor3<Scalar>& featmap, RpnCache* cache) const;
  /// Returns the feature-map gradient contribution.
  nn::Tensor3<Scalar> rpn_backward(const nn::Tensor3<Scalar>& d_objectness,
                                   const nn::Tensor3<Scalar>& d_deltas, const RpnCache& cache);
  Vec roi_head_forward(const nn::Tensor3<Scalar>& featmap, const datakit::BBox& box,
                       RoiHeadCache* cache, bool* degenerate = nullptr) const;
  void roi_head_backward(const Vec& d_vector, const RoiHeadCache& cache,
                         nn::Tensor3<Scalar>* d_featmap);

  /// Top-k proposals (exactly config.proposal_count) from the anchor grid:
  /// objectness-sorted, NMS-filtered, refilled from suppressed boxes.
  std::vector<Proposal> propose(const datakit::Image& img) const;
  std::vector<Proposal> propose_from(const RpnOut& rpn) const;

  std::vector<RegionFeature> extract_region_features(const nn::Tensor3<Scalar>& featmap,
                                                     const std::vector<datakit::BBox>& boxes) const;

  /// Full inference: propose, pool, classify against the bank, threshold,
  /// per-category NMS. Pure in (weights, bank, image, config).
  std::vector<Detection> infer(const datakit::Image& img,
                               const textspace::PrototypeBank& bank) const;

  /// Contrastive pre-training step: accumulates gradients for the alignment
  /// loss over ground-truth regions plus the whole-image feature. The caller
  /// applies the SGD update.
  PretrainStats pretrain_step(const PretrainBatch& batch, const align::AlignConfig& align_cfg);

  /// Detection fine-tuning step against a frozen prototype matrix; the
  /// learnable background row lives in params() under "cls.background".
  FinetuneStats finetune_step(const std::vector<FinetuneExample>& batch, const Mat& bank_matrix,
                              Rng& rng);

  /// Background prototype row as a d-vector (raw, not normalized).
  Vec background_row() const;

 private:
  DetectorConfig cfg_;
  nn::ParamStore<Scalar> params_;
  std::vector<datakit::BBox> anchors_;
};

struct CheckpointMeta {
  std::string phase;  // pretrain | finetune | scratch
  long step = 0;
  std::uint64_t seed = 0;
  std::string bank_digest;
  std::string rng_state;        // training-loop RNG serialization
  std::string run_config_json;  // opaque echo of the run configuration
};

void save_checkpoint(const DetectorModel& model, const CheckpointMeta& meta,
                     const std::filesystem::path& path);

struct LoadedCheckpoint {
  std::unique_ptr<DetectorModel> model;
  CheckpointMeta meta;
};

LoadedCheckpoint load_checkpoint(const std::filesystem::path& path);

}  // namespace ovdet::detector
