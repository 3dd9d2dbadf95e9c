#include "ovdet/detector.hpp"

#include <algorithm>
#include <cstring>
#include <nlohmann/json.hpp>
#include <numeric>

#include "ovdet/common.hpp"

namespace ovdet::detector {

using nlohmann::json;

void DetectorConfig::validate() const {
  if (backbone_channels.empty()) throw std::invalid_argument("backbone needs at least one stage");
  for (int c : backbone_channels) {
    if (c < 1) throw std::invalid_argument("backbone channel widths must be positive");
  }
  if (image_size < 16 || image_size % stride() != 0) {
    throw std::invalid_argument("image size must be a positive multiple of the backbone stride");
  }
  if (feature_dim < 8) throw std::invalid_argument("feature_dim must be >= 8");
  if (head_hidden < 1) throw std::invalid_argument("head_hidden must be positive");
  if (roi_size < 1) throw std::invalid_argument("roi_size must be positive");
  if (anchor_sizes.empty()) throw std::invalid_argument("need at least one anchor size");
  const int total_anchors =
      map_size() * map_size() * static_cast<int>(anchor_sizes.size());
  if (proposal_count < 1 || proposal_count > total_anchors) {
    throw std::invalid_argument("proposal_count must lie in [1, total anchors]");
  }
  if (pre_nms_top_n < proposal_count) {
    throw std::invalid_argument("pre_nms_top_n must be >= proposal_count");
  }
  for (double t : {rpn_nms_iou, nms_iou, pos_iou, neg_iou}) {
    if (!(t > 0.0 && t < 1.0)) throw std::invalid_argument("IoU thresholds must lie in (0, 1)");
  }
  if (!(score_threshold >= 0.0 && score_threshold <= 1.0)) {
    throw std::invalid_argument("score_threshold must lie in [0, 1]");
  }
  if (neg_iou > pos_iou) throw std::invalid_argument("neg_iou must not exceed pos_iou");
  if (rpn_batch < 2 || roi_batch < 2) throw std::invalid_argument("sampling batches too small");
  if (!(roi_pos_fraction > 0.0 && roi_pos_fraction <= 0.5)) {
    throw std::invalid_argument("roi_pos_fraction must lie in (0, 0.5]");
  }
}

std::string detector_config_to_json(const DetectorConfig& cfg) {
  json j;
  j["backbone_channels"] = cfg.backbone_channels;
  j["image_size"] = cfg.image_size;
  j["feature_dim"] = cfg.feature_dim;
  j["head_hidden"] = cfg.head_hidden;
  j["roi_size"] = cfg.roi_size;
  j["anchor_sizes"] = cfg.anchor_sizes;
  j["pre_nms_top_n"] = cfg.pre_nms_top_n;
  j["proposal_count"] = cfg.proposal_count;
  j["rpn_nms_iou"] = cfg.rpn_nms_iou;
  j["nms_iou"] = cfg.nms_iou;
  j["score_threshold"] = cfg.score_threshold;
  j["pos_iou"] = cfg.pos_iou;
  j["neg_iou"] = cfg.neg_iou;
  j["rpn_batch"] = cfg.rpn_batch;
  j["roi_batch"] = cfg.roi_batch;
  j["roi_pos_fraction"] = cfg.roi_pos_fraction;
  j["loss_weights"] = {{"objectness", cfg.loss_weights.objectness},
                       {"box_reg", cfg.loss_weights.box_reg},
                       {"classification", cfg.loss_weights.classification}};
  return j.dump(2);
}

DetectorConfig detector_config_from_json(const std::string& text) {
  const json j = json::parse(text);
  DetectorConfig cfg;
  cfg.backbone_channels = j.value("backbone_channels", cfg.backbone_channels);
  cfg.image_size = j.value("image_size", cfg.image_size);
  cfg.feature_dim = j.value("feature_dim", cfg.feature_dim);
  cfg.head_hidden = j.value("head_hidden", cfg.head_hidden);
  cfg.roi_size = j.value("roi_size", cfg.roi_size);
  cfg.anchor_sizes = j.value("anchor_sizes", cfg.anchor_sizes);
  cfg.pre_nms_top_n = j.value("pre_nms_top_n", cfg.pre_nms_top_n);
  cfg.proposal_count = j.value("proposal_count", cfg.proposal_count);
  cfg.rpn_nms_iou = j.value("rpn_nms_iou", cfg.rpn_nms_iou);
  cfg.nms_iou = j.value("nms_iou", cfg.nms_iou);
  cfg.score_threshold = j.value("score_threshold", cfg.score_threshold);
  cfg.pos_iou = j.value("pos_iou", cfg.pos_iou);
  cfg.neg_iou = j.value("neg_iou", cfg.neg_iou);
  cfg.rpn_batch = j.value("rpn_batch", cfg.rpn_batch);
  cfg.roi_batch = j.value("roi_batch", cfg.roi_batch);
  cfg.roi_pos_fraction = j.value("roi_pos_fraction", cfg.roi_pos_fraction);
  if (j.contains("loss_weights")) {
    const auto& w = j.at("loss_weights");
    cfg.loss_weights.objectness = w.value("objectness", cfg.loss_weights.objectness);
    cfg.loss_weights.box_reg = w.value("box_reg", cfg.loss_weights.box_reg);
    cfg.loss_weights.classification = w.value("classification", cfg.loss_weights.classification);
  }
  cfg.validate();
  return cfg;
}

namespace {

void normal_init(MatX<Scalar>& w, double std, Rng& rng) {
  for (Eigen::Index i = 0; i < w.rows(); ++i) {
    for (Eigen::Index j = 0; j < w.cols(); ++j) {
      w(i, j) = static_cast<Scalar>(std * rng.normal());
    }
  }
}

}  // namespace

DetectorModel::DetectorModel(const DetectorConfig& cfg, std::uint64_t init_seed) : cfg_(cfg) {
  cfg_.validate();
  Rng rng(init_seed);

  int in_c = 3;
  for (std::size_t i = 0; i < cfg_.backbone_channels.size(); ++i) {
    const int out_c = cfg_.backbone_channels[i];
    auto& w = params_.create("backbone." + std::to_string(i) + ".w", out_c,
                             static_cast<Eigen::Index>(in_c) * 9);
    nn::he_init(w.v, static_cast<Eigen::Index>(in_c) * 9, rng);
    params_.create("backbone." + std::to_string(i) + ".b", out_c, 1);
    in_c = out_c;
  }

  const int c = cfg_.backbone_channels.back();
  const int a = static_cast<int>(cfg_.anchor_sizes.size());
  auto& rw = params_.create("rpn.conv.w", c, static_cast<Eigen::Index>(c) * 9);
  nn::he_init(rw.v, static_cast<Eigen::Index>(c) * 9, rng);
  params_.create("rpn.conv.b", c, 1);
  auto& ow = params_.create("rpn.obj.w", a, c);
  normal_init(ow.v, 0.01, rng);
  params_.create("rpn.obj.b", a, 1);
  auto& bw = params_.create("rpn.box.w", static_cast<Eigen::Index>(4) * a, c);
  normal_init(bw.v, 0.01, rng);
  params_.create("rpn.box.b", static_cast<Eigen::Index>(4) * a, 1);

  const int flat = c * cfg_.roi_size * cfg_.roi_size;
  auto& f1 = params_.create("head.fc1.w", cfg_.head_hidden, flat);
  nn::he_init(f1.v, flat, rng);
  params_.create("head.fc1.b", cfg_.head_hidden, 1);
  auto& f2 = params_.create("head.fc2.w", cfg_.feature_dim, cfg_.head_hidden);
  normal_init(f2.v, std::sqrt(1.0 / cfg_.head_hidden), rng);
  params_.create("head.fc2.b", cfg_.feature_dim, 1);

  auto& bg = params_.create("cls.background", 1, cfg_.feature_dim);
  bg.v.row(0) = rng.unit_vector(cfg_.feature_dim).cast<Scalar>().transpose();

  anchors_ = make_anchors(cfg_.map_size(), cfg_.map_size(), cfg_.stride(), cfg_.anchor_sizes);
}

nn::Tensor3<Scalar> DetectorModel::preprocess(const datakit::Image& img) const {
  if (img.width != cfg_.image_size || img.height != cfg_.image_size) {
    throw std::invalid_argument("image size mismatch: expected " +
                                std::to_string(cfg_.image_size) + ", got " +
                                std::to_string(img.width) + "x" + std::to_string(img.height));
  }
  nn::Tensor3<Scalar> x = nn::Tensor3<Scalar>::zeros(3, img.height, img.width);
  for (int y = 0; y < img.height; ++y) {
    for (int xx = 0; xx < img.width; ++xx) {
      const std::uint8_t* px = img.px(xx, y);
      for (int ch = 0; ch < 3; ++ch) {
        x.at(ch, y, xx) = static_cast<Scalar>(px[ch] / 255.0 * 2.0 - 1.0);
      }
    }
  }
  return x;
}

nn::Tensor3<Scalar> DetectorModel::backbone_forward(const nn::Tensor3<Scalar>& x,
                                                    BackboneCache* cache) const {
  BackboneCache local;
  BackboneCache& c = cache != nullptr ? *cache : local;
  c.inputs.clear();
  c.cols.clear();
  c.post_relu.clear();
  c.argmax.clear();

  nn::Tensor3<Scalar> cur = x;
  const int n = static_cast<int>(cfg_.backbone_channels.size());
  for (int i = 0; i < n; ++i) {
    c.inputs.push_back(cur);
    MatX<Scalar> cols;
    nn::Tensor3<Scalar> y =
        nn::conv3x3_forward(cur, params_.at("backbone." + std::to_string(i) + ".w"),
                            params_.at("backbone." + std::to_string(i) + ".b"), &cols);
    c.cols.push_back(std::move(cols));
    nn::relu_inplace(y);
    c.post_relu.push_back(y);
    if (i + 1 < n) {
      Eigen::MatrixXi am;
      cur = nn::maxpool2_forward(y, &am);
      c.argmax.push_back(std::move(am));
    } else {
      cur = std::move(y);
    }
  }
  return cur;
}

void DetectorModel::backbone_backward(const nn::Tensor3<Scalar>& d_featmap,
                                      const BackboneCache& cache) {
  nn::Tensor3<Scalar> d = d_featmap;
  const int n = static_cast<int>(cfg_.backbone_channels.size());
  for (int i = n - 1; i >= 0; --i) {
    if (i + 1 < n) {
      d = nn::maxpool2_backward(d, cache.argmax[i], cache.post_relu[i].h, cache.post_relu[i].w);
    }
    d = nn::relu_backward(d, cache.post_relu[i]);
    d = nn::conv3x3_backward(d, cache.cols[i],
                             params_.at("backbone." + std::to_string(i) + ".w"),
                             params_.at("backbone." + std::to_string(i) + ".b"),
                             cache.inputs[i].c, cache.inputs[i].h, cache.inputs[i].w);
  }
}

RpnOut DetectorModel::rpn_forward(const nn::Tensor3<Scalar>& featmap, RpnCache* cache) const {
  RpnCache local;
  RpnCache& c = cache != nullptr ? *cache : local;
  c.input = featmap;
  nn::Tensor3<Scalar> h =
      nn::conv3x3_forward(featmap, params_.at("rpn.conv.w"), params_.at("rpn.conv.b"),
                          &c.hidden_cols);
  nn::relu_inplace(h);
  c.hidden = std::move(h);
  RpnOut out;
  out.objectness = nn::conv1x1_forward(c.hidden, params_.at("rpn.obj.w"), params_.at("rpn.obj.b"));
  out.deltas = nn::conv1x1_forward(c.hidden, params_.at("rpn.box.w"), params_.at("rpn.box.b"));
  return out;
}

nn::Tensor3<Scalar> DetectorModel::rpn_backward(const nn::Tensor3<Scalar>& d_objectness,
                                                const nn::Tensor3<Scalar>& d_deltas,
                                                const RpnCache& cache) {
  nn::Tensor3<Scalar> dh = nn::conv1x1_backward(d_objectness, cache.hidden,
                                                params_.at("rpn.obj.w"), params_.at("rpn.obj.b"));
  const nn::Tensor3<Scalar> dh2 = nn::conv1x1_backward(d_deltas, cache.hidden,
                                                       params_.at("rpn.box.w"),
                                                       params_.at("rpn.box.b"));
  dh.m += dh2.m;
  dh = nn::relu_backward(dh, cache.hidden);
  return nn::conv3x3_backward(dh, cache.hidden_cols, params_.at("rpn.conv.w"),
                              params_.at("rpn.conv.b"), cache.input.c, cache.input.h,
                              cache.input.w);
}

Vec DetectorModel::roi_head_forward(const nn::Tensor3<Scalar>& featmap, const datakit::BBox& box,
                                    RoiHeadCache* cache, bool* degenerate) const {
  RoiHeadCache local;
  RoiHeadCache& c = cache != nullptr ? *cache : local;
  const int p = cfg_.roi_size;
  const MatX<Scalar> pooled =
      nn::roi_align_forward(featmap, box, cfg_.stride(), p, &c.roi);
  Vec flat(static_cast<Eigen::Index>(featmap.c) * p * p);
  for (int ci = 0; ci < featmap.c; ++ci) {
    for (int k = 0; k < p * p; ++k) {
      flat[static_cast<Eigen::Index>(ci) * p * p + k] = pooled(ci, k);
    }
  }
  c.flat = flat;
  Vec hidden = nn::linear_forward(flat, params_.at("head.fc1.w"), params_.at("head.fc1.b"));
  hidden = hidden.cwiseMax(Scalar(0));
  c.hidden = hidden;
  if (degenerate != nullptr) *degenerate = c.roi.degenerate;
  return nn::linear_forward(hidden, params_.at("head.fc2.w"), params_.at("head.fc2.b"));
}

void DetectorModel::roi_head_backward(const Vec& d_vector, const RoiHeadCache& cache,
                                      nn::Tensor3<Scalar>* d_featmap) {
  Vec dh = nn::linear_backward(d_vector, cache.hidden, params_.at("head.fc2.w"),
                               params_.at("head.fc2.b"));
  dh = (cache.hidden.array() > Scalar(0)).cast<Scalar>() * dh.array();
  const Vec dflat =
      nn::linear_backward(dh, cache.flat, params_.at("head.fc1.w"), params_.at("head.fc1.b"));
  const int p = cfg_.roi_size;
  MatX<Scalar> dpooled(d_featmap->c, static_cast<Eigen::Index>(p) * p);
  for (int ci = 0; ci < d_featmap->c; ++ci) {
    for (int k = 0; k < p * p; ++k) {
      dpooled(ci, k) = dflat[static_cast<Eigen::Index>(ci) * p * p + k];
    }
  }
  nn::roi_align_backward(dpooled, cache.roi, d_featmap);
}

std::vector<Proposal> DetectorModel::propose_from(const RpnOut& rpn) const {
  const int a = static_cast<int>(cfg_.anchor_sizes.size());
  const double img = cfg_.image_size;
  std::vector<datakit::BBox> boxes(anchors_.size());
  std::vector<double> scores(anchors_.size());
  for (std::size_t k = 0; k < anchors_.size(); ++k) {
    const Eigen::Index cell = static_cast<Eigen::Index>(k) / a;
    const int s = static_cast<int>(k % a);
    const Scalar tx = rpn.deltas.m(4 * s + 0, cell);
    const Scalar ty = rpn.deltas.m(4 * s + 1, cell);
    const Scalar tw = rpn.deltas.m(4 * s + 2, cell);
    const Scalar th = rpn.deltas.m(4 * s + 3, cell);
    boxes[k] = decode_box_delta(anchors_[k], tx, ty, tw, th, img, img);
    scores[k] = detail::sigmoid(static_cast<double>(rpn.objectness.m(s, cell)));
  }

  std::vector<std::size_t> order(boxes.size());
  std::iota(order.begin(), order.end(), std::size_t(0));
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t x, std::size_t y) { return scores[x] > scores[y]; });
  const std::size_t top_n = std::min<std::size_t>(cfg_.pre_nms_top_n, order.size());

  std::vector<datakit::BBox> sub_boxes(top_n);
  std::vector<double> sub_scores(top_n);
  for (std::size_t i = 0; i < top_n; ++i) {
    sub_boxes[i] = boxes[order[i]];
    sub_scores[i] = scores[order[i]];
  }
  const std::vector<std::size_t> keep = nms(sub_boxes, sub_scores, cfg_.rpn_nms_iou);

  std::vector<Proposal> out;
  out.reserve(cfg_.proposal_count);
  std::vector<bool> kept(top_n, false);
  for (std::size_t i : keep) {
    if (out.size() == static_cast<std::size_t>(cfg_.proposal_count)) break;
    kept[i] = true;
    out.push_back({sub_boxes[i], sub_scores[i]});
  }
  // Exactly-k contract: refill from suppressed boxes in score order, then
  // from the remaining anchors beyond the pre-NMS window.
  for (std::size_t i = 0; i < top_n && out.size() < static_cast<std::size_t>(cfg_.proposal_count);
       ++i) {
    if (!kept[i]) out.push_back({sub_boxes[i], sub_scores[i]});
  }
  for (std::size_t i = top_n;
       i < order.size() && out.size() < static_cast<std::size_t>(cfg_.proposal_count); ++i) {
    out.push_back({boxes[order[i]], scores[order[i]]});
  }
  return out;
}

std::vector<Proposal> DetectorModel::propose(const datakit::Image& img) const {
  const nn::Tensor3<Scalar> x = preprocess(img);
  const nn::Tensor3<Scalar> fm = backbone_forward(x, nullptr);
  const RpnOut rpn = rpn_forward(fm, nullptr);
  return propose_from(rpn);
}

std::vector<RegionFeature> DetectorModel::extract_region_features(
    const nn::Tensor3<Scalar>& featmap, const std::vector<datakit::BBox>& boxes) const {
  std::vector<RegionFeature> out;
  out.reserve(boxes.size());
  for (const auto& box : boxes) {
    RegionFeature rf;
    rf.source_box = box;
    rf.vector = roi_head_forward(featmap, box, nullptr, &rf.degenerate);
    out.push_back(std::move(rf));
  }
  return out;
}

std::vector<Detection> DetectorModel::infer(const datakit::Image& img,
                                            const textspace::PrototypeBank& bank) const {
  if (bank.dim() != cfg_.feature_dim) {
    throw std::invalid_argument("bank dimension does not match the detector feature dim");
  }
  const nn::Tensor3<Scalar> x = preprocess(img);
  const nn::Tensor3<Scalar> fm = backbone_forward(x, nullptr);
  const RpnOut rpn = rpn_forward(fm, nullptr);
  const std::vector<Proposal> proposals = propose_from(rpn);

  std::vector<datakit::BBox> boxes;
  boxes.reserve(proposals.size());
  for (const auto& p : proposals) boxes.push_back(p.box);
  const std::vector<RegionFeature> feats = extract_region_features(fm, boxes);

  Mat f(static_cast<Eigen::Index>(feats.size()), cfg_.feature_dim);
  for (std::size_t i = 0; i < feats.size(); ++i) {
    f.row(static_cast<Eigen::Index>(i)) = feats[i].vector.transpose();
    if (!(f.row(static_cast<Eigen::Index>(i)).norm() > Scalar(0))) {
      f(static_cast<Eigen::Index>(i), 0) = Scalar(1);  // dead head: fall back to uniform scoring
    }
  }
  const Mat bank_matrix = bank.full_matrix().cast<Scalar>();
  const Mat probs = classify_regions(f, bank_matrix);
  const std::vector<Assignment> labels =
      assign_labels(probs, bank.background().has_value());

  // Bucket score-thresholded, non-background regions per category.
  std::map<int, std::vector<std::size_t>> per_category;
  std::vector<double> det_scores(proposals.size(), 0.0);
  for (std::size_t i = 0; i < proposals.size(); ++i) {
    if (labels[i].background) continue;
    det_scores[i] = labels[i].score * proposals[i].objectness;
    if (det_scores[i] < cfg_.score_threshold) continue;
    per_category[labels[i].index].push_back(i);
  }

  std::vector<Detection> out;
  for (const auto& [cat_index, indices] : per_category) {
    std::vector<datakit::BBox> cat_boxes;
    std::vector<double> cat_scores;
    for (std::size_t i : indices) {
      cat_boxes.push_back(proposals[i].box);
      cat_scores.push_back(det_scores[i]);
    }
    for (std::size_t k : nms(cat_boxes, cat_scores, cfg_.nms_iou)) {
      Detection d;
      d.box = cat_boxes[k];
      d.category = bank.categories()[static_cast<std::size_t>(cat_index)];
      d.score = cat_scores[k];
      out.push_back(std::move(d));
    }
  }
  std::stable_sort(out.begin(), out.end(),
                   [](const Detection& a, const Detection& b) { return a.score > b.score; });
  return out;
}

PretrainStats DetectorModel::pretrain_step(const PretrainBatch& batch,
                                           const align::AlignConfig& align_cfg) {
  const std::size_t b = batch.images.size();
  if (b == 0) throw std::invalid_argument("empty pretrain batch");
  if (batch.boxes.size() != b || batch.positives.size() != b) {
    throw std::invalid_argument("pretrain batch shape mismatch");
  }
  if (batch.image_texts.rows() != static_cast<Eigen::Index>(b)) {
    throw std::invalid_argument("image_texts row count mismatch");
  }
  params_.zero_grad();

  Eigen::Index n = 0;
  for (const auto& bx : batch.boxes) n += static_cast<Eigen::Index>(bx.size());
  if (n == 0) throw std::invalid_argument("pretrain batch has no regions");

  std::vector<BackboneCache> bb(b);
  std::vector<std::vector<RoiHeadCache>> roi_caches(b);
  std::vector<RoiHeadCache> image_caches(b);

  Mat regions(n, cfg_.feature_dim);
  Mat image_feats(static_cast<Eigen::Index>(b), cfg_.feature_dim);
  std::vector<int> positives;
  positives.reserve(static_cast<std::size_t>(n));

  const datakit::BBox whole{0.0, 0.0, static_cast<double>(cfg_.image_size),
                            static_cast<double>(cfg_.image_size)};
  Eigen::Index row = 0;
  for (std::size_t i = 0; i < b; ++i) {
    const nn::Tensor3<Scalar> x = preprocess(batch.images[i]);
    const nn::Tensor3<Scalar> fm = backbone_forward(x, &bb[i]);
    roi_caches[i].resize(batch.boxes[i].size());
    for (std::size_t j = 0; j < batch.boxes[i].size(); ++j) {
      regions.row(row) =
          roi_head_forward(fm, batch.boxes[i][j], &roi_caches[i][j]).transpose();
      positives.push_back(batch.positives[i][j]);
      ++row;
    }
    image_feats.row(static_cast<Eigen::Index>(i)) =
        roi_head_forward(fm, whole, &image_caches[i]).transpose();
  }

  align::AlignBatch<Scalar> ab;
  ab.region_features = regions;
  ab.positives = positives;
  ab.candidates = batch.candidates;
  ab.image_features = image_feats;
  ab.text_features = batch.image_texts;

  Mat d_regions, d_images;
  const double region_loss =
      align::region_contrastive_loss<Scalar>(ab, align_cfg, &d_regions);
  const double image_loss =
      align::image_contrastive_loss<Scalar>(image_feats, batch.image_texts, align_cfg, &d_images);
  d_images *= static_cast<Scalar>(align_cfg.image_loss_weight);

  row = 0;
  const int ms = cfg_.map_size();
  for (std::size_t i = 0; i < b; ++i) {
    nn::Tensor3<Scalar> dfm =
        nn::Tensor3<Scalar>::zeros(cfg_.backbone_channels.back(), ms, ms);
    for (std::size_t j = 0; j < batch.boxes[i].size(); ++j) {
      roi_head_backward(d_regions.row(row).transpose(), roi_caches[i][j], &dfm);
      ++row;
    }
    roi_head_backward(d_images.row(static_cast<Eigen::Index>(i)).transpose(), image_caches[i],
                      &dfm);
    backbone_backward(dfm, bb[i]);
  }

  PretrainStats stats;
  stats.region_loss = region_loss;
  stats.image_loss = image_loss;
  stats.total = region_loss + align_cfg.image_loss_weight * image_loss;
  stats.regions = static_cast<int>(n);
  return stats;
}

namespace {

struct SampledAnchor {
  std::size_t image;
  std::size_t anchor;
  int label;          // 1 object / 0 background
  int matched_gt;     // valid for positives
};

struct SampledRoi {
  std::size_t image;
  datakit::BBox box;
  int target;  // bank row; L = background
};

}  // namespace

FinetuneStats DetectorModel::finetune_step(const std::vector<FinetuneExample>& batch,
                                           const Mat& bank_matrix, Rng& rng) {
  if (batch.empty()) throw std::invalid_argument("empty finetune batch");
  if (bank_matrix.cols() != cfg_.feature_dim) {
    throw std::invalid_argument("bank dimension does not match the detector feature dim");
  }
  params_.zero_grad();

  const std::size_t b = batch.size();
  const Eigen::Index l = bank_matrix.rows();
  std::vector<BackboneCache> bb(b);
  std::vector<RpnCache> rc(b);
  std::vector<RpnOut> rpn_outs(b);

  std::vector<SampledAnchor> anchors_sampled;
  std::vector<SampledRoi> rois;
  std::vector<std::vector<RoiHeadCache>> roi_caches(b);

  const int n_sizes = static_cast<int>(cfg_.anchor_sizes.size());

  for (std::size_t i = 0; i < b; ++i) {
    const FinetuneExample& ex = batch[i];
    if (ex.gt_boxes.empty()) throw std::invalid_argument("finetune image without ground truth");
    if (ex.gt_labels.size() != ex.gt_boxes.size()) {
      throw std::invalid_argument("gt label count mismatch");
    }
    for (int lbl : ex.gt_labels) {
      if (lbl < 0 || lbl >= l) throw std::invalid_argument("gt label outside the bank");
    }

    const nn::Tensor3<Scalar> x = preprocess(ex.image);
    const nn::Tensor3<Scalar> fm = backbone_forward(x, &bb[i]);
    rpn_outs[i] = rpn_forward(fm, &rc[i]);

    // --- anchor assignment ---
    const std::size_t na = anchors_.size();
    std::vector<double> best_iou(na, 0.0);
    std::vector<int> best_gt(na, -1);
    std::vector<double> gt_best_iou(ex.gt_boxes.size(), 0.0);
    std::vector<std::size_t> gt_best_anchor(ex.gt_boxes.size(), 0);
    for (std::size_t k = 0; k < na; ++k) {
      for (std::size_t g = 0; g < ex.gt_boxes.size(); ++g) {
        const double v = box_iou(anchors_[k], ex.gt_boxes[g]);
        if (v > best_iou[k]) {
          best_iou[k] = v;
          best_gt[k] = static_cast<int>(g);
        }
        if (v > gt_best_iou[g]) {
          gt_best_iou[g] = v;
          gt_best_anchor[g] = k;
        }
      }
    }
    std::vector<int> labels(na, -1);  // -1 ignore
    for (std::size_t k = 0; k < na; ++k) {
      if (best_iou[k] >= cfg_.pos_iou) {
        labels[k] = 1;
      } else if (best_iou[k] < cfg_.neg_iou) {
        labels[k] = 0;
      }
    }
    // every ground-truth box keeps its best-overlap anchor positive
    for (std::size_t g = 0; g < ex.gt_boxes.size(); ++g) {
      if (gt_best_iou[g] > 0.0) {
        labels[gt_best_anchor[g]] = 1;
        if (best_gt[gt_best_anchor[g]] < 0) best_gt[gt_best_anchor[g]] = static_cast<int>(g);
      }
    }

    std::vector<std::size_t> pos_idx, neg_idx;
    for (std::size_t k = 0; k < na; ++k) {
      if (labels[k] == 1) pos_idx.push_back(k);
      if (labels[k] == 0) neg_idx.push_back(k);
    }
    rng.shuffle(pos_idx);
    rng.shuffle(neg_idx);
    const std::size_t want_pos = static_cast<std::size_t>(cfg_.rpn_batch) / 2;
    if (pos_idx.size() > want_pos) pos_idx.resize(want_pos);
    const std::size_t want_neg =
        std::min(neg_idx.size(), static_cast<std::size_t>(cfg_.rpn_batch) - pos_idx.size());
    neg_idx.resize(want_neg);
    for (std::size_t k : pos_idx) anchors_sampled.push_back({i, k, 1, best_gt[k]});
    for (std::size_t k : neg_idx) anchors_sampled.push_back({i, k, 0, -1});

    // --- proposal sampling for the classification term ---
    std::vector<datakit::BBox> prop_boxes;
    for (const auto& p : propose_from(rpn_outs[i])) prop_boxes.push_back(p.box);
    for (const auto& g : ex.gt_boxes) prop_boxes.push_back(g);  // training-time guarantee

    std::vector<std::size_t> roi_pos, roi_neg;
    std::vector<int> roi_target(prop_boxes.size(), -1);
    for (std::size_t k = 0; k < prop_boxes.size(); ++k) {
      double best = 0.0;
      int arg = -1;
      for (std::size_t g = 0; g < ex.gt_boxes.size(); ++g) {
        const double v = box_iou(prop_boxes[k], ex.gt_boxes[g]);
        if (v > best) {
          best = v;
          arg = static_cast<int>(g);
        }
      }
      if (best >= cfg_.pos_iou && arg >= 0) {
        roi_target[k] = ex.gt_labels[static_cast<std::size_t>(arg)];
        roi_pos.push_back(k);
      } else if (best < cfg_.neg_iou) {
        roi_target[k] = static_cast<int>(l);  // background row
        roi_neg.push_back(k);
      }
    }
    rng.shuffle(roi_pos);
    rng.shuffle(roi_neg);
    const std::size_t want_roi_pos = std::min(
        roi_pos.size(),
        static_cast<std::size_t>(std::lround(cfg_.roi_batch * cfg_.roi_pos_fraction)));
    roi_pos.resize(want_roi_pos);
    const std::size_t want_roi_neg =
        std::min(roi_neg.size(), static_cast<std::size_t>(cfg_.roi_batch) - roi_pos.size());
    roi_neg.resize(want_roi_neg);
    for (std::size_t k : roi_pos) rois.push_back({i, prop_boxes[k], roi_target[k]});
    for (std::size_t k : roi_neg) rois.push_back({i, prop_boxes[k], roi_target[k]});
  }

  // --- assemble the loss input ---
  DetectionLossInput<Scalar> in;
  in.objectness_logits.resize(static_cast<Eigen::Index>(anchors_sampled.size()));
  in.objectness_labels.resize(anchors_sampled.size());
  std::vector<std::size_t> pos_rows;  // index into anchors_sampled per box row
  for (std::size_t t = 0; t < anchors_sampled.size(); ++t) {
    const SampledAnchor& sa = anchors_sampled[t];
    const Eigen::Index cell = static_cast<Eigen::Index>(sa.anchor) / n_sizes;
    const int s = static_cast<int>(sa.anchor % n_sizes);
    in.objectness_logits[static_cast<Eigen::Index>(t)] = rpn_outs[sa.image].objectness.m(s, cell);
    in.objectness_labels[t] = sa.label;
    if (sa.label == 1) pos_rows.push_back(t);
  }
  in.box_deltas.resize(static_cast<Eigen::Index>(pos_rows.size()), 4);
  in.box_targets.resize(static_cast<Eigen::Index>(pos_rows.size()), 4);
  for (std::size_t r = 0; r < pos_rows.size(); ++r) {
    const SampledAnchor& sa = anchors_sampled[pos_rows[r]];
    const Eigen::Index cell = static_cast<Eigen::Index>(sa.anchor) / n_sizes;
    const int s = static_cast<int>(sa.anchor % n_sizes);
    for (int c = 0; c < 4; ++c) {
      in.box_deltas(static_cast<Eigen::Index>(r), c) = rpn_outs[sa.image].deltas.m(4 * s + c, cell);
    }
    const auto target = encode_box_delta<Scalar>(
        anchors_[sa.anchor], batch[sa.image].gt_boxes[static_cast<std::size_t>(sa.matched_gt)]);
    for (int c = 0; c < 4; ++c) in.box_targets(static_cast<Eigen::Index>(r), c) = target[c];
  }

  in.region_features.resize(static_cast<Eigen::Index>(rois.size()), cfg_.feature_dim);
  in.class_targets.resize(rois.size());
  for (std::size_t i = 0; i < b; ++i) roi_caches[i].reserve(rois.size());
  std::vector<std::pair<std::size_t, std::size_t>> roi_cache_of(rois.size());
  {
    // forward the sampled ROIs (needs the per-image feature maps again)
    std::vector<nn::Tensor3<Scalar>> fms(b);
    for (std::size_t i = 0; i < b; ++i) fms[i] = rc[i].input;
    for (std::size_t t = 0; t < rois.size(); ++t) {
      const SampledRoi& sr = rois[t];
      roi_caches[sr.image].emplace_back();
      in.region_features.row(static_cast<Eigen::Index>(t)) =
          roi_head_forward(fms[sr.image], sr.box, &roi_caches[sr.image].back()).transpose();
      in.class_targets[t] = sr.target;
      roi_cache_of[t] = {sr.image, roi_caches[sr.image].size() - 1};
    }
  }

  const auto& bg = params_.at("cls.background");
  in.bank.resize(l + 1, cfg_.feature_dim);
  in.bank.topRows(l) = bank_matrix;
  in.bank.row(l) = bg.v.row(0);

  const DetectionLossResult<Scalar> res = detection_loss(in, cfg_.loss_weights);

  // --- scatter gradients back through the network ---
  const int ms = cfg_.map_size();
  for (std::size_t i = 0; i < b; ++i) {
    nn::Tensor3<Scalar> dobj =
        nn::Tensor3<Scalar>::zeros(n_sizes, ms, ms);
    nn::Tensor3<Scalar> ddel = nn::Tensor3<Scalar>::zeros(4 * n_sizes, ms, ms);
    for (std::size_t t = 0; t < anchors_sampled.size(); ++t) {
      if (anchors_sampled[t].image != i) continue;
      const std::size_t k = anchors_sampled[t].anchor;
      const Eigen::Index cell = static_cast<Eigen::Index>(k) / n_sizes;
      const int s = static_cast<int>(k % n_sizes);
      dobj.m(s, cell) += res.d_objectness_logits[static_cast<Eigen::Index>(t)];
    }
    for (std::size_t r = 0; r < pos_rows.size(); ++r) {
      const SampledAnchor& sa = anchors_sampled[pos_rows[r]];
      if (sa.image != i) continue;
      const Eigen::Index cell = static_cast<Eigen::Index>(sa.anchor) / n_sizes;
      const int s = static_cast<int>(sa.anchor % n_sizes);
      for (int c = 0; c < 4; ++c) {
        ddel.m(4 * s + c, cell) += res.d_box_deltas(static_cast<Eigen::Index>(r), c);
      }
    }
    nn::Tensor3<Scalar> dfm = rpn_backward(dobj, ddel, rc[i]);
    for (std::size_t t = 0; t < rois.size(); ++t) {
      if (rois[t].image != i) continue;
      const auto [img_idx, cache_idx] = roi_cache_of[t];
      roi_head_backward(res.d_region_features.row(static_cast<Eigen::Index>(t)).transpose(),
                        roi_caches[img_idx][cache_idx], &dfm);
    }
    backbone_backward(dfm, bb[i]);
  }
  params_.at("cls.background").g.row(0) += res.d_bank.row(l);

  FinetuneStats stats;
  stats.objectness = res.objectness;
  stats.box_reg = res.box_reg;
  stats.classification = res.classification;
  stats.total = res.total;
  stats.pos_anchors = static_cast<int>(pos_rows.size());
  for (const auto& r : rois) stats.pos_rois += (r.target != static_cast<int>(l));
  stats.box_warning = res.box_warning;
  return stats;
}

Vec DetectorModel::background_row() const {
  return params_.at("cls.background").v.row(0).transpose();
}

// ---------------------------------------------------------------------------
// checkpoints

namespace {

constexpr char kCheckpointMagic[] = "OVCKPT01";

void append_u64le(std::string& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

std::uint64_t read_u64le(const std::string& s, std::size_t off) {
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) {
    v |= static_cast<std::uint64_t>(static_cast<unsigned char>(s[off + i])) << (8 * i);
  }
  return v;
}

void append_matrix(std::string& out, const MatX<Scalar>& m) {
  for (Eigen::Index i = 0; i < m.rows(); ++i) {
    for (Eigen::Index j = 0; j < m.cols(); ++j) {
      const float v = static_cast<float>(m(i, j));
      char buf[4];
      std::memcpy(buf, &v, 4);
      out.append(buf, 4);
    }
  }
}

void read_matrix(const std::string& s, std::size_t& off, MatX<Scalar>& m) {
  for (Eigen::Index i = 0; i < m.rows(); ++i) {
    for (Eigen::Index j = 0; j < m.cols(); ++j) {
      float v;
      std::memcpy(&v, s.data() + off, 4);
      off += 4;
      m(i, j) = static_cast<Scalar>(v);
    }
  }
}

}  // namespace

void save_checkpoint(const DetectorModel& model, const CheckpointMeta& meta,
                     const std::filesystem::path& path) {
  json header;
  header["format"] = kCheckpointMagic;
  header["detector_config"] = json::parse(detector_config_to_json(model.config()));
  header["phase"] = meta.phase;
  header["step"] = meta.step;
  header["seed"] = meta.seed;
  header["bank_digest"] = meta.bank_digest;
  header["rng_state"] = meta.rng_state;
  header["run_config"] = meta.run_config_json;

  json tensors = json::array();
  std::string payload;
  for (const std::string& name : model.params().names()) {
    const auto& p = model.params().at(name);
    for (const char* kind : {"value", "momentum"}) {
      tensors.push_back({{"name", name},
                         {"kind", kind},
                         {"rows", p.v.rows()},
                         {"cols", p.v.cols()}});
      append_matrix(payload, std::string(kind) == "value" ? p.v : p.mom);
    }
  }
  header["tensors"] = std::move(tensors);

  const std::string header_text = header.dump();
  std::string bytes(kCheckpointMagic);
  append_u64le(bytes, header_text.size());
  bytes += header_text;
  bytes += payload;
  atomic_write_file(path, bytes);
}

LoadedCheckpoint load_checkpoint(const std::filesystem::path& path) {
  const std::string bytes = read_file(path);
  const std::size_t magic_len = std::strlen(kCheckpointMagic);
  if (bytes.size() < magic_len + 8 || bytes.compare(0, magic_len, kCheckpointMagic) != 0) {
    throw std::runtime_error("not a checkpoint file: " + path.string());
  }
  const std::uint64_t header_len = read_u64le(bytes, magic_len);
  if (bytes.size() < magic_len + 8 + header_len) {
    throw std::runtime_error("truncated checkpoint header: " + path.string());
  }
  const json header = json::parse(bytes.substr(magic_len + 8, header_len));

  LoadedCheckpoint out;
  const DetectorConfig cfg = detector_config_from_json(header.at("detector_config").dump());
  out.model = std::make_unique<DetectorModel>(cfg, 0);
  out.meta.phase = header.at("phase").get<std::string>();
  out.meta.step = header.at("step").get<long>();
  out.meta.seed = header.at("seed").get<std::uint64_t>();
  out.meta.bank_digest = header.at("bank_digest").get<std::string>();
  out.meta.rng_state = header.at("rng_state").get<std::string>();
  out.meta.run_config_json = header.at("run_config").get<std::string>();

  std::size_t off = magic_len + 8 + header_len;
  for (const auto& t : header.at("tensors")) {
    const std::string name = t.at("name").get<std::string>();
    const std::string kind = t.at("kind").get<std::string>();
    const Eigen::Index rows = t.at("rows").get<Eigen::Index>();
    const Eigen::Index cols = t.at("cols").get<Eigen::Index>();
    auto& p = out.model->params().at(name);
    if (p.v.rows() != rows || p.v.cols() != cols) {
      throw std::runtime_error("checkpoint tensor shape mismatch for " + name);
    }
    const std::size_t need = static_cast<std::size_t>(rows) * cols * 4;
    if (bytes.size() < off + need) {
      throw std::runtime_error("truncated checkpoint payload: " + path.string());
    }
    read_matrix(bytes, off, kind == "value" ? p.v : p.mom);
  }
  return out;
}

}  // namespace ovdet::detector
