#include "ovdet/evalkit.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <nlohmann/json.hpp>
#include <numeric>
#include <set>
#include <sstream>

#include "ovdet/common.hpp"

namespace ovdet::evalkit {

using nlohmann::json;

double iou(const datakit::BBox& a, const datakit::BBox& b) {
  const double ix = std::max(0.0, std::min(a.x_max, b.x_max) - std::max(a.x_min, b.x_min));
  const double iy = std::max(0.0, std::min(a.y_max, b.y_max) - std::max(a.y_min, b.y_min));
  const double inter = ix * iy;
  const double uni = a.area() + b.area() - inter;
  return uni > 0 ? inter / uni : 0.0;
}

namespace {

/// Indices of `scores` in descending order; ties keep input order.
std::vector<std::size_t> score_order(const std::vector<double>& scores) {
  std::vector<std::size_t> order(scores.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });
  return order;
}

}  // namespace

std::vector<bool> match_detections(const std::vector<Detection>& dets,
                                   const std::vector<GroundTruthBox>& gts,
                                   double iou_threshold) {
  std::vector<double> scores;
  scores.reserve(dets.size());
  for (const auto& d : dets) scores.push_back(d.score);

  std::vector<bool> flags(dets.size(), false);
  std::vector<bool> gt_taken(gts.size(), false);
  for (std::size_t di : score_order(scores)) {
    double best_iou = 0.0;
    std::ptrdiff_t best_gt = -1;
    for (std::size_t gi = 0; gi < gts.size(); ++gi) {
      if (gt_taken[gi]) continue;
      const double v = iou(dets[di].box, gts[gi].box);
      if (v >= iou_threshold && v > best_iou) {
        best_iou = v;
        best_gt = static_cast<std::ptrdiff_t>(gi);
      }
    }
    if (best_gt >= 0) {
      gt_taken[static_cast<std::size_t>(best_gt)] = true;
      flags[di] = true;
    }
  }
  return flags;
}

std::optional<double> average_precision(const std::vector<bool>& tp_flags,
                                        const std::vector<double>& scores, int n_gt,
                                        bool coco101) {
  if (tp_flags.size() != scores.size()) {
    throw std::invalid_argument("average_precision: flag/score length mismatch");
  }
  if (n_gt == 0) return std::nullopt;
  if (n_gt < 0) throw std::invalid_argument("average_precision: negative GT count");

  std::vector<double> precision, recall;
  int tp = 0, fp = 0;
  for (std::size_t i : score_order(scores)) {
    (tp_flags[i] ? tp : fp)++;
    precision.push_back(static_cast<double>(tp) / (tp + fp));
    recall.push_back(static_cast<double>(tp) / n_gt);
  }

  // Monotone precision envelope, built right to left.
  std::vector<double> envelope = precision;
  for (std::size_t i = envelope.size(); i >= 2; --i) {
    envelope[i - 2] = std::max(envelope[i - 2], envelope[i - 1]);
  }

  if (coco101) {
    double sum = 0.0;
    for (int k = 0; k <= 100; ++k) {
      const double r = k / 100.0;
      // first point with recall >= r; envelope precision there bounds the rest
      double p = 0.0;
      for (std::size_t i = 0; i < recall.size(); ++i) {
        if (recall[i] >= r - 1e-12) {
          p = envelope[i];
          break;
        }
      }
      sum += p;
    }
    return sum / 101.0;
  }

  double ap = 0.0;
  double prev_recall = 0.0;
  for (std::size_t i = 0; i < recall.size(); ++i) {
    ap += (recall[i] - prev_recall) * envelope[i];
    prev_recall = recall[i];
  }
  return ap;
}

std::vector<bool> category_flags(const std::vector<Detection>& dets,
                                 const std::vector<GroundTruthBox>& gts,
                                 double iou_threshold) {
  // Matching is independent per image, so flags can be computed image by
  // image and scattered back to the input order.
  std::map<std::string, std::vector<std::size_t>> det_by_image;
  for (std::size_t i = 0; i < dets.size(); ++i) det_by_image[dets[i].image_id].push_back(i);
  std::map<std::string, std::vector<GroundTruthBox>> gt_by_image;
  for (const auto& g : gts) gt_by_image[g.image_id].push_back(g);

  std::vector<bool> flags(dets.size(), false);
  for (const auto& [image_id, indices] : det_by_image) {
    std::vector<Detection> local;
    local.reserve(indices.size());
    for (std::size_t i : indices) local.push_back(dets[i]);
    const auto git = gt_by_image.find(image_id);
    static const std::vector<GroundTruthBox> kNone;
    const auto local_flags =
        match_detections(local, git == gt_by_image.end() ? kNone : git->second, iou_threshold);
    for (std::size_t k = 0; k < indices.size(); ++k) flags[indices[k]] = local_flags[k];
  }
  return flags;
}

namespace {

struct GroupSpec {
  // Entry name (category, or Class for class-level splits) -> member categories.
  std::vector<std::pair<std::string, std::vector<std::string>>> entries;
};

double mean(const std::vector<double>& v) {
  if (v.empty()) return 0.0;
  return std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
}

}  // namespace

EvalResult evaluate(const std::vector<Detection>& detections,
                    const datakit::DatasetIndex& annotations,
                    const taxonomy::SplitSpec& split,
                    const taxonomy::TaxonomyRegistry* registry, const EvalOptions& options) {
  const bool class_level = split.protocol == taxonomy::SplitProtocol::ClassLevel;
  if (class_level && registry == nullptr) {
    throw std::invalid_argument("class-level evaluation needs the taxonomy registry");
  }

  EvalResult result;
  result.protocol = taxonomy::protocol_name(split.protocol);

  auto expand = [&](const std::set<std::string>& names) {
    GroupSpec spec;
    for (const auto& n : names) {
      if (class_level) {
        spec.entries.emplace_back(n, registry->members_of({n}));
      } else {
        spec.entries.emplace_back(n, std::vector<std::string>{n});
      }
    }
    return spec;
  };
  const GroupSpec seen_spec = expand(split.seen);
  const GroupSpec unseen_spec = expand(split.unseen);

  std::set<std::string> known_categories;
  for (const auto* spec : {&seen_spec, &unseen_spec}) {
    for (const auto& [entry, members] : spec->entries) {
      known_categories.insert(members.begin(), members.end());
    }
  }

  std::map<std::string, std::vector<Detection>> det_by_cat;
  std::set<std::string> strays;
  for (const auto& d : detections) {
    if (!known_categories.count(d.category)) {
      strays.insert(d.category);
      continue;  // FP against nothing: never scored
    }
    det_by_cat[d.category].push_back(d);
  }
  result.stray_categories.assign(strays.begin(), strays.end());
  if (options.strict && !result.stray_categories.empty()) {
    std::string msg = "detections name categories outside the split:";
    for (const auto& s : result.stray_categories) msg += " " + s;
    throw std::runtime_error(msg);
  }

  std::map<std::string, std::vector<GroundTruthBox>> gt_by_cat;
  for (const auto& img : annotations.images) {
    for (const auto& box : img.boxes) {
      gt_by_cat[img.dominant_category].push_back({img.image_id, img.dominant_category, box});
    }
  }

  // Per-category AP for every known category that has GT instances.
  std::map<std::string, std::optional<double>> ap;
  for (const auto& cat : known_categories) {
    const auto git = gt_by_cat.find(cat);
    const int n_gt = git == gt_by_cat.end() ? 0 : static_cast<int>(git->second.size());
    const auto dit = det_by_cat.find(cat);
    const int n_det = dit == det_by_cat.end() ? 0 : static_cast<int>(dit->second.size());
    if (n_gt > 0 || n_det > 0) result.counts[cat] = {n_gt, n_det};
    if (n_gt == 0) {
      result.zero_gt_categories.push_back(cat);
      ap[cat] = std::nullopt;
      continue;
    }
    static const std::vector<Detection> kNoDet;
    const auto& cat_dets = dit == det_by_cat.end() ? kNoDet : dit->second;
    const auto flags = category_flags(cat_dets, git->second, options.iou_threshold);
    std::vector<double> scores;
    scores.reserve(cat_dets.size());
    for (const auto& d : cat_dets) scores.push_back(d.score);
    ap[cat] = average_precision(flags, scores, n_gt, options.coco101);
    result.per_category_ap[cat] = *ap[cat];
  }

  // Group means. For class-level splits an entry's AP is the unweighted mean
  // of its member categories' APs (members without GT are skipped), and the
  // group mean averages entry APs.
  auto group_mean = [&](const GroupSpec& spec, int* evaluated) {
    std::vector<double> entry_aps;
    for (const auto& [entry, members] : spec.entries) {
      std::vector<double> member_aps;
      for (const auto& m : members) {
        if (ap.count(m) && ap[m].has_value()) member_aps.push_back(*ap[m]);
      }
      if (member_aps.empty()) continue;
      const double entry_ap = mean(member_aps);
      if (class_level) result.per_class_ap[entry] = entry_ap;
      entry_aps.push_back(entry_ap);
    }
    *evaluated = static_cast<int>(entry_aps.size());
    return entry_aps;
  };

  const auto seen_aps = group_mean(seen_spec, &result.seen_evaluated);
  const auto unseen_aps = group_mean(unseen_spec, &result.unseen_evaluated);
  result.map50_seen = mean(seen_aps);
  result.map50_unseen = mean(unseen_aps);
  std::vector<double> all_aps = seen_aps;
  all_aps.insert(all_aps.end(), unseen_aps.begin(), unseen_aps.end());
  result.map50_all = mean(all_aps);
  return result;
}

std::vector<Detection> load_detections(const std::filesystem::path& path) {
  json doc;
  try {
    doc = json::parse(read_file(path));
  } catch (const json::parse_error& e) {
    throw std::runtime_error(std::string("detection results parse failure: ") + e.what());
  }
  std::vector<Detection> out;
  for (const auto& item : doc) {
    Detection d;
    d.image_id = item.at("image_id").is_string()
                     ? item.at("image_id").get<std::string>()
                     : std::to_string(item.at("image_id").get<long>());
    d.category = item.at("category").get<std::string>();
    const auto& bb = item.at("bbox");
    d.box = datakit::BBox::from_xywh(bb.at(0).get<double>(), bb.at(1).get<double>(),
                                     bb.at(2).get<double>(), bb.at(3).get<double>());
    d.score = item.at("score").get<double>();
    out.push_back(std::move(d));
  }
  return out;
}

void save_detections(const std::vector<Detection>& dets, const std::filesystem::path& path) {
  json doc = json::array();
  for (const auto& d : dets) {
    const auto xywh = d.box.to_xywh();
    doc.push_back({{"image_id", d.image_id},
                   {"category", d.category},
                   {"bbox", {xywh[0], xywh[1], xywh[2], xywh[3]}},
                   {"score", d.score}});
  }
  write_file(path, doc.dump(2) + "\n");
}

std::string eval_result_to_json_text(const EvalResult& result) {
  json j;
  j["protocol"] = result.protocol;
  j["map50_seen"] = result.map50_seen;
  j["map50_unseen"] = result.map50_unseen;
  j["map50_all"] = result.map50_all;
  j["seen_evaluated"] = result.seen_evaluated;
  j["unseen_evaluated"] = result.unseen_evaluated;
  j["per_category_ap"] = result.per_category_ap;
  if (!result.per_class_ap.empty()) j["per_class_ap"] = result.per_class_ap;
  json counts = json::object();
  for (const auto& [cat, c] : result.counts) {
    counts[cat] = {{"gt", c.first}, {"detections", c.second}};
  }
  j["counts"] = std::move(counts);
  j["zero_gt_categories"] = result.zero_gt_categories;
  j["stray_categories"] = result.stray_categories;
  return j.dump(2) + "\n";
}

void save_eval_result(const EvalResult& result, const std::filesystem::path& path) {
  write_file(path, eval_result_to_json_text(result));
}

namespace {

std::string pct(double v) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.1f", 100.0 * v);
  return buf;
}

}  // namespace

std::string render_table(const EvalResult& result) {
  std::ostringstream os;
  os << "protocol: " << result.protocol << "\n";

  std::size_t name_width = std::string("group").size();
  const auto& entries = result.per_class_ap.empty() ? result.per_category_ap : result.per_class_ap;
  for (const auto& [name, unused] : entries) name_width = std::max(name_width, name.size());
  name_width = std::max(name_width, std::size_t(6));

  auto row = [&](const std::string& name, const std::string& n, const std::string& v) {
    os << name << std::string(name_width - name.size() + 2, ' ');
    os << std::string(n.size() > 7 ? 0 : 7 - n.size(), ' ') << n;
    os << std::string(v.size() > 7 ? 0 : 7 - v.size(), ' ') << v << "\n";
  };

  row("group", "n", "mAP50");
  row("seen", std::to_string(result.seen_evaluated), pct(result.map50_seen));
  row("unseen", std::to_string(result.unseen_evaluated), pct(result.map50_unseen));
  row("all", std::to_string(result.seen_evaluated + result.unseen_evaluated),
      pct(result.map50_all));

  if (!entries.empty()) {
    os << "\n";
    row(result.per_class_ap.empty() ? "category" : "class", "", "AP50");
    for (const auto& [name, value] : entries) row(name, "", pct(value));
  }
  if (!result.zero_gt_categories.empty()) {
    os << "\nno ground truth (excluded): ";
    for (std::size_t i = 0; i < result.zero_gt_categories.size(); ++i) {
      os << (i ? ", " : "") << result.zero_gt_categories[i];
    }
    os << "\n";
  }
  if (!result.stray_categories.empty()) {
    os << "\nstray detection categories: ";
    for (std::size_t i = 0; i < result.stray_categories.size(); ++i) {
      os << (i ? ", " : "") << result.stray_categories[i];
    }
    os << "\n";
  }
  return os.str();
}

void render_pr_curve(const std::vector<bool>& tp_flags, const std::vector<double>& scores,
                     int n_gt, const std::filesystem::path& path) {
  constexpr int kSize = 256;
  constexpr int kMargin = 24;
  datakit::Image img;
  img.width = kSize;
  img.height = kSize;
  img.rgb.assign(static_cast<std::size_t>(kSize) * kSize * 3, 255);

  auto put = [&](int x, int y, std::uint8_t r, std::uint8_t g, std::uint8_t b) {
    if (x < 0 || y < 0 || x >= kSize || y >= kSize) return;
    std::uint8_t* px = img.px(x, y);
    px[0] = r;
    px[1] = g;
    px[2] = b;
  };
  // axes: recall along x, precision along y (origin bottom-left)
  for (int x = kMargin; x < kSize - kMargin / 2; ++x) put(x, kSize - kMargin, 0, 0, 0);
  for (int y = kMargin / 2; y <= kSize - kMargin; ++y) put(kMargin, y, 0, 0, 0);

  auto to_px = [&](double recall, double precision) {
    const int x = kMargin + static_cast<int>(recall * (kSize - 1.5 * kMargin));
    const int y = (kSize - kMargin) - static_cast<int>(precision * (kSize - 1.5 * kMargin));
    return std::pair<int, int>{x, y};
  };

  if (n_gt > 0 && !tp_flags.empty()) {
    int tp = 0, fp = 0;
    double prev_r = 0.0, prev_p = 1.0;
    for (std::size_t i : score_order(scores)) {
      (tp_flags[i] ? tp : fp)++;
      const double r = static_cast<double>(tp) / n_gt;
      const double p = static_cast<double>(tp) / (tp + fp);
      // staircase: horizontal run at prev_p, then vertical drop/rise
      auto [x0, y0] = to_px(prev_r, prev_p);
      auto [x1, y1] = to_px(r, prev_p);
      for (int x = std::min(x0, x1); x <= std::max(x0, x1); ++x) put(x, y0, 180, 30, 30);
      auto [x2, y2] = to_px(r, p);
      for (int y = std::min(y1, y2); y <= std::max(y1, y2); ++y) put(x2, y, 180, 30, 30);
      prev_r = r;
      prev_p = p;
    }
  }
  datakit::save_ppm(img, path);
}

}  // namespace ovdet::evalkit
