#include "ovdet/datakit.hpp"

#include <algorithm>
#include <cmath>
#include <nlohmann/json.hpp>
#include <set>
#include <sstream>

#include "ovdet/common.hpp"

namespace ovdet::datakit {

using nlohmann::json;

bool BBox::valid() const {
  return std::isfinite(x_min) && std::isfinite(y_min) && std::isfinite(x_max) &&
         std::isfinite(y_max) && x_max > x_min && y_max > y_min && x_min >= 0 && y_min >= 0;
}

const ImageRecord* DatasetIndex::find(const std::string& image_id) const {
  for (const auto& img : images) {
    if (img.image_id == image_id) return &img;
  }
  return nullptr;
}

std::size_t DatasetIndex::box_count() const {
  std::size_t n = 0;
  for (const auto& img : images) n += img.boxes.size();
  return n;
}

std::vector<std::string> DatasetIndex::categories() const {
  std::vector<std::string> out;
  out.reserve(per_category.size());
  for (const auto& [k, v] : per_category) out.push_back(k);
  return out;
}

void DatasetIndex::mark_curated() {
  for (const auto& [cat, ids] : per_category) {
    if (ids.size() < 10) {
      throw std::runtime_error("curated index requires >= 10 images per category; '" + cat +
                               "' has " + std::to_string(ids.size()));
    }
  }
  curated = true;
}

DatasetIndex load_annotations(const std::filesystem::path& path, const LoadOptions& opt) {
  json doc;
  try {
    doc = json::parse(read_file(path));
  } catch (const json::parse_error& e) {
    throw std::runtime_error(std::string("annotation parse failure: ") + e.what());
  }

  std::map<long, std::string> category_names;
  for (const auto& c : doc.at("categories")) {
    category_names[c.at("id").get<long>()] = c.at("name").get<std::string>();
  }

  struct PendingImage {
    ImageRecord rec;
    long category_id = -1;
  };
  std::map<long, PendingImage> by_id;
  std::vector<long> order;
  for (const auto& im : doc.at("images")) {
    const long id = im.at("id").get<long>();
    if (by_id.count(id)) throw std::runtime_error("duplicate image id " + std::to_string(id));
    PendingImage p;
    p.rec.image_id = std::to_string(id);
    p.rec.file_name = im.at("file_name").get<std::string>();
    p.rec.width = im.at("width").get<int>();
    p.rec.height = im.at("height").get<int>();
    if (p.rec.width <= 0 || p.rec.height <= 0) {
      throw std::runtime_error("image " + p.rec.image_id + " has non-positive size");
    }
    by_id[id] = std::move(p);
    order.push_back(id);
  }

  for (const auto& an : doc.at("annotations")) {
    const long image_id = an.at("image_id").get<long>();
    auto it = by_id.find(image_id);
    if (it == by_id.end()) {
      throw std::runtime_error("annotation references unknown image " + std::to_string(image_id));
    }
    const long cat_id = an.at("category_id").get<long>();
    auto cit = category_names.find(cat_id);
    if (cit == category_names.end()) {
      throw std::runtime_error("annotation references unknown category " + std::to_string(cat_id));
    }
    PendingImage& p = it->second;
    if (p.category_id == -1) {
      p.category_id = cat_id;
      p.rec.dominant_category = cit->second;
    } else if (p.category_id != cat_id) {
      throw std::runtime_error("image " + p.rec.image_id +
                               " carries annotations of more than one category");
    }
    const auto& bb = an.at("bbox");
    BBox box = BBox::from_xywh(bb.at(0).get<double>(), bb.at(1).get<double>(),
                               bb.at(2).get<double>(), bb.at(3).get<double>());
    if (!box.valid()) {
      throw std::runtime_error("image " + p.rec.image_id + ": degenerate box");
    }
    const bool outside = box.x_min < 0 || box.y_min < 0 || box.x_max > p.rec.width ||
                         box.y_max > p.rec.height;
    if (outside) {
      if (opt.strict) {
        throw std::runtime_error("image " + p.rec.image_id + ": box outside image bounds");
      }
      box.x_min = std::max(0.0, box.x_min);
      box.y_min = std::max(0.0, box.y_min);
      box.x_max = std::min<double>(p.rec.width, box.x_max);
      box.y_max = std::min<double>(p.rec.height, box.y_max);
      if (!box.valid()) continue;  // clipped away entirely
    }
    p.rec.boxes.push_back(box);
  }

  DatasetIndex index;
  index.root = path.parent_path();
  for (long id : order) {
    PendingImage& p = by_id.at(id);
    if (p.rec.boxes.empty()) {
      throw std::runtime_error("image " + p.rec.image_id + " has zero boxes");
    }
    index.per_category[p.rec.dominant_category].push_back(p.rec.image_id);
    index.images.push_back(std::move(p.rec));
  }
  return index;
}

void save_annotations(const DatasetIndex& index, const std::filesystem::path& path) {
  std::map<std::string, long> category_ids;
  for (const auto& [cat, ids] : index.per_category) {
    category_ids[cat] = static_cast<long>(category_ids.size()) + 1;
  }
  json categories = json::array();
  for (const auto& [cat, id] : category_ids) {
    categories.push_back({{"id", id}, {"name", cat}});
  }

  json images = json::array();
  json annotations = json::array();
  long ann_id = 1;
  for (const auto& img : index.images) {
    const long id = std::stol(img.image_id);
    images.push_back({{"id", id},
                      {"file_name", img.file_name},
                      {"width", img.width},
                      {"height", img.height}});
    for (const auto& box : img.boxes) {
      const auto xywh = box.to_xywh();
      annotations.push_back({{"id", ann_id++},
                             {"image_id", id},
                             {"category_id", category_ids.at(img.dominant_category)},
                             {"bbox", {xywh[0], xywh[1], xywh[2], xywh[3]}}});
    }
  }
  json doc;
  doc["images"] = std::move(images);
  doc["annotations"] = std::move(annotations);
  doc["categories"] = std::move(categories);
  write_file(path, doc.dump(2) + "\n");
}

std::pair<DatasetIndex, DatasetIndex> train_val_split(const DatasetIndex& index,
                                                      double fraction, std::uint64_t seed,
                                                      bool require_both_nonempty) {
  if (!(fraction > 0.0 && fraction < 1.0)) {
    throw std::invalid_argument("split fraction must be in (0, 1)");
  }
  std::set<std::string> train_ids, val_ids;
  for (const auto& [cat, ids] : index.per_category) {
    if (require_both_nonempty && ids.size() < 2) {
      throw std::runtime_error("category '" + cat + "' has fewer than 2 images; cannot split");
    }
    std::vector<std::string> sorted = ids;
    std::sort(sorted.begin(), sorted.end());
    Rng rng(mix_seed(seed, hash64(cat)));
    rng.shuffle(sorted);
    const std::size_t n_train =
        static_cast<std::size_t>(std::floor(fraction * static_cast<double>(sorted.size())));
    for (std::size_t i = 0; i < sorted.size(); ++i) {
      (i < n_train ? train_ids : val_ids).insert(sorted[i]);
    }
  }

  auto build = [&](const std::set<std::string>& keep) {
    DatasetIndex out;
    out.root = index.root;
    for (const auto& img : index.images) {
      if (!keep.count(img.image_id)) continue;
      out.per_category[img.dominant_category].push_back(img.image_id);
      out.images.push_back(img);
    }
    return out;
  };
  return {build(train_ids), build(val_ids)};
}

Stats dataset_stats(const DatasetIndex& index) {
  Stats s;
  s.categories = index.per_category.size();
  s.images = index.images.size();
  s.boxes = index.box_count();
  if (!index.per_category.empty()) {
    std::vector<std::size_t> sizes;
    sizes.reserve(index.per_category.size());
    for (const auto& [cat, ids] : index.per_category) sizes.push_back(ids.size());
    std::sort(sizes.begin(), sizes.end());
    s.min_per_category = sizes.front();
    s.max_per_category = sizes.back();
    const std::size_t n = sizes.size();
    s.median_per_category = (n % 2 == 1)
                                ? static_cast<double>(sizes[n / 2])
                                : (static_cast<double>(sizes[n / 2 - 1] + sizes[n / 2]) / 2.0);
  }
  return s;
}

std::string stats_to_json_text(const Stats& s) {
  json j;
  j["categories"] = s.categories;
  j["images"] = s.images;
  j["boxes"] = s.boxes;
  j["min_images_per_category"] = s.min_per_category;
  j["median_images_per_category"] = s.median_per_category;
  j["max_images_per_category"] = s.max_per_category;
  return j.dump(2) + "\n";
}

Image load_ppm(const std::filesystem::path& path) {
  const std::string blob = read_file(path);
  std::istringstream is(blob);
  std::string magic;
  int w = 0, h = 0, maxval = 0;
  is >> magic >> w >> h >> maxval;
  if (magic != "P6" || w <= 0 || h <= 0 || maxval != 255) {
    throw std::runtime_error("unsupported PPM file: " + path.string());
  }
  is.get();  // single whitespace after header
  Image img;
  img.width = w;
  img.height = h;
  img.rgb.resize(static_cast<std::size_t>(w) * h * 3);
  const std::size_t offset = static_cast<std::size_t>(is.tellg());
  if (blob.size() < offset + img.rgb.size()) {
    throw std::runtime_error("truncated PPM file: " + path.string());
  }
  std::memcpy(img.rgb.data(), blob.data() + offset, img.rgb.size());
  return img;
}

void save_ppm(const Image& img, const std::filesystem::path& path) {
  std::string out = "P6\n" + std::to_string(img.width) + " " + std::to_string(img.height) +
                    "\n255\n";
  out.append(reinterpret_cast<const char*>(img.rgb.data()), img.rgb.size());
  write_file(path, out);
}

SynthConfig default_synth_config() {
  SynthConfig c;
  c.colors = {{"red", {200, 40, 40}}, {"blue", {40, 80, 210}}, {"green", {40, 170, 60}}};
  c.shapes = {"circle", "square", "triangle"};
  return c;
}

}  // namespace ovdet::datakit
