// Compositional synthetic-shapes dataset generator. Each image carries one
// dominant "<color> <shape>" composition on a textured background; optional
// distractor objects of other compositions are rendered but never annotated.
#include <algorithm>
#include <cmath>
#include <nlohmann/json.hpp>
#include <set>
#include <stdexcept>

#include "ovdet/common.hpp"
#include "ovdet/datakit.hpp"

namespace ovdet::datakit {

using nlohmann::json;

namespace {

constexpr std::uint64_t kImageSalt = 0x73796e7468696d67ULL;  // "synthimg"

struct Placement {
  std::string shape;
  std::array<std::uint8_t, 3> rgb;
  double cx = 0, cy = 0, a = 0;  // center and half-extent, pixels

  BBox box() const { return BBox{cx - a, cy - a, cx + a, cy + a}; }
};

void validate_config(const SynthConfig& c) {
  if (c.colors.size() * c.shapes.size() < 2) {
    throw std::invalid_argument("synthetic config needs at least 2 color x shape compositions");
  }
  if (c.images_per_category < 10) {
    throw std::invalid_argument("synthetic config needs >= 10 images per category");
  }
  if (c.image_size < 32) throw std::invalid_argument("synthetic image size must be >= 32");
  if (c.objects_min < 1 || c.objects_max < c.objects_min) {
    throw std::invalid_argument("invalid objects-per-image range");
  }
  if (c.distractor_rate < 0 || c.distractor_rate > 1) {
    throw std::invalid_argument("distractor_rate must lie in [0, 1]");
  }
  static const std::set<std::string> known = {"circle", "square", "triangle", "cross", "diamond"};
  for (const auto& s : c.shapes) {
    if (!known.count(s)) throw std::invalid_argument("unknown shape: " + s);
  }
  std::set<std::string> color_names;
  for (const auto& col : c.colors) {
    if (!color_names.insert(col.name).second) {
      throw std::invalid_argument("duplicate color name: " + col.name);
    }
  }
}

/// Pixel (x, y) is covered when its center lies inside the shape.
bool covers(const Placement& p, int x, int y) {
  const double dx = x + 0.5 - p.cx;
  const double dy = y + 0.5 - p.cy;
  if (p.shape == "circle") return dx * dx + dy * dy <= p.a * p.a;
  if (p.shape == "square") return std::abs(dx) <= p.a && std::abs(dy) <= p.a;
  if (p.shape == "diamond") return std::abs(dx) + std::abs(dy) <= p.a;
  if (p.shape == "triangle") {
    // upward triangle: apex (cx, cy-a), base corners (cx +- a, cy+a)
    if (dy < -p.a || dy > p.a) return false;
    const double half_width = (dy + p.a) / 2.0;
    return std::abs(dx) <= half_width;
  }
  if (p.shape == "cross") {
    const double t = 0.35 * p.a;  // bar half-thickness
    const bool horizontal = std::abs(dy) <= t && std::abs(dx) <= p.a;
    const bool vertical = std::abs(dx) <= t && std::abs(dy) <= p.a;
    return horizontal || vertical;
  }
  return false;
}

void draw(Image& img, const Placement& p) {
  const int x0 = std::max(0, static_cast<int>(std::floor(p.cx - p.a)) - 1);
  const int x1 = std::min(img.width - 1, static_cast<int>(std::ceil(p.cx + p.a)) + 1);
  const int y0 = std::max(0, static_cast<int>(std::floor(p.cy - p.a)) - 1);
  const int y1 = std::min(img.height - 1, static_cast<int>(std::ceil(p.cy + p.a)) + 1);
  for (int y = y0; y <= y1; ++y) {
    for (int x = x0; x <= x1; ++x) {
      if (!covers(p, x, y)) continue;
      std::uint8_t* px = img.px(x, y);
      px[0] = p.rgb[0];
      px[1] = p.rgb[1];
      px[2] = p.rgb[2];
    }
  }
}

double box_iou(const BBox& a, const BBox& b) {
  const double ix = std::max(0.0, std::min(a.x_max, b.x_max) - std::max(a.x_min, b.x_min));
  const double iy = std::max(0.0, std::min(a.y_max, b.y_max) - std::max(a.y_min, b.y_min));
  const double inter = ix * iy;
  const double uni = a.area() + b.area() - inter;
  return uni > 0 ? inter / uni : 0.0;
}

/// Sample a placement whose box stays inside the image and barely overlaps
/// the ones already placed. Returns false when no slot is found.
bool sample_placement(Rng& rng, int size, const std::vector<Placement>& existing, Placement* out) {
  for (int attempt = 0; attempt < 24; ++attempt) {
    const double a = rng.uniform(0.12 * size, 0.22 * size);
    const double cx = rng.uniform(a + 1.0, size - a - 1.0);
    const double cy = rng.uniform(a + 1.0, size - a - 1.0);
    Placement p;
    p.cx = cx;
    p.cy = cy;
    p.a = a;
    bool clear = true;
    for (const auto& other : existing) {
      if (box_iou(p.box(), other.box()) > 0.05) {
        clear = false;
        break;
      }
    }
    if (clear) {
      *out = p;
      return true;
    }
  }
  return false;
}

Image render_image(const SynthConfig& cfg, Rng& rng, const ColorDef& color,
                   const std::string& shape, std::vector<BBox>* boxes) {
  const int size = cfg.image_size;
  Image img;
  img.width = size;
  img.height = size;
  img.rgb.assign(static_cast<std::size_t>(size) * size * 3, 0);

  // Low-saturation sinusoidal background so the saturated shapes stand out.
  const double base = rng.uniform(70.0, 110.0);
  const double amp = rng.uniform(8.0, 18.0);
  const double fx = rng.uniform(1.0, 3.0) / size;
  const double fy = rng.uniform(1.0, 3.0) / size;
  const double phase_x = rng.uniform(0.0, 6.283185307179586);
  const double phase_y = rng.uniform(0.0, 6.283185307179586);
  const double tint = rng.uniform(-10.0, 10.0);  // pushed onto the blue channel
  constexpr double kTwoPi = 6.283185307179586;
  for (int y = 0; y < size; ++y) {
    for (int x = 0; x < size; ++x) {
      const double wave =
          std::sin(kTwoPi * fx * x + phase_x) * std::sin(kTwoPi * fy * y + phase_y);
      const double v = base + amp * wave;
      std::uint8_t* px = img.px(x, y);
      px[0] = static_cast<std::uint8_t>(std::clamp(v, 0.0, 255.0));
      px[1] = static_cast<std::uint8_t>(std::clamp(v, 0.0, 255.0));
      px[2] = static_cast<std::uint8_t>(std::clamp(v + tint, 0.0, 255.0));
    }
  }

  const int n_objects = rng.range(cfg.objects_min, cfg.objects_max);
  std::vector<Placement> placed;
  for (int i = 0; i < n_objects; ++i) {
    Placement p;
    if (!sample_placement(rng, size, placed, &p)) {
      if (placed.empty()) throw std::runtime_error("could not place any object");
      break;  // image is crowded; keep what fits
    }
    p.shape = shape;
    p.rgb = color.rgb;
    placed.push_back(p);
  }

  // Distractor: a different composition, rendered underneath and unannotated.
  std::vector<Placement> distractors;
  if (cfg.colors.size() * cfg.shapes.size() >= 2 && rng.uniform() < cfg.distractor_rate) {
    std::vector<std::pair<std::size_t, std::size_t>> others;
    for (std::size_t ci = 0; ci < cfg.colors.size(); ++ci) {
      for (std::size_t si = 0; si < cfg.shapes.size(); ++si) {
        if (cfg.colors[ci].name == color.name && cfg.shapes[si] == shape) continue;
        others.emplace_back(ci, si);
      }
    }
    const auto [ci, si] = others[rng.below(others.size())];
    Placement p;
    if (sample_placement(rng, size, placed, &p)) {
      p.shape = cfg.shapes[si];
      p.rgb = cfg.colors[ci].rgb;
      distractors.push_back(p);
    }
  }

  for (const auto& p : distractors) draw(img, p);
  for (const auto& p : placed) draw(img, p);

  if (cfg.noise_std > 0) {
    for (std::size_t i = 0; i < img.rgb.size(); ++i) {
      const double v = img.rgb[i] + cfg.noise_std * rng.normal();
      img.rgb[i] = static_cast<std::uint8_t>(std::clamp(v, 0.0, 255.0));
    }
  }

  boxes->clear();
  for (const auto& p : placed) boxes->push_back(p.box());
  return img;
}

taxonomy::TaxonomyRegistry build_taxonomy(const SynthConfig& cfg,
                                          const std::filesystem::path& path) {
  taxonomy::TaxonomyRegistry reg;
  for (const auto& color : cfg.colors) {
    for (const auto& shape : cfg.shapes) {
      taxonomy::CategoryRecord rec;
      rec.name = color.name + " " + shape;
      rec.ranks["kingdom"] = "geometry";
      rec.ranks["class"] = shape;
      rec.ranks["genus"] = color.name;
      reg.records.push_back(std::move(rec));
    }
  }
  taxonomy::save_taxonomy(reg, path);
  return taxonomy::load_taxonomy(path);  // rebuilds index + digest from disk
}

}  // namespace

SynthOutput gen_synthetic(const SynthConfig& config, const std::filesystem::path& out_dir) {
  validate_config(config);
  std::filesystem::create_directories(out_dir / "images");

  SynthOutput out;
  out.dir = out_dir;
  out.index.root = out_dir;

  json per_category = json::object();
  long next_image_id = 1;
  for (const auto& color : config.colors) {
    for (const auto& shape : config.shapes) {
      const std::string category = color.name + " " + shape;
      const std::uint64_t cat_seed = mix_seed(config.seed, hash64(category));
      std::size_t cat_boxes = 0;
      for (int i = 0; i < config.images_per_category; ++i) {
        Rng rng(mix_seed(mix_seed(cat_seed, kImageSalt), static_cast<std::uint64_t>(i)));
        std::vector<BBox> boxes;
        const Image img = render_image(config, rng, color, shape, &boxes);

        ImageRecord rec;
        rec.image_id = std::to_string(next_image_id++);
        std::string stem = category;
        std::replace(stem.begin(), stem.end(), ' ', '_');
        rec.file_name = "images/" + stem + "_" + std::to_string(i) + ".ppm";
        rec.width = img.width;
        rec.height = img.height;
        rec.dominant_category = category;
        rec.boxes = boxes;
        save_ppm(img, out_dir / rec.file_name);

        cat_boxes += boxes.size();
        out.index.per_category[category].push_back(rec.image_id);
        out.index.images.push_back(std::move(rec));
      }
      per_category[category] = {{"images", config.images_per_category}, {"boxes", cat_boxes}};
    }
  }

  out.annotations_file = out_dir / "annotations.json";
  save_annotations(out.index, out.annotations_file);

  out.taxonomy_file = out_dir / "taxonomy.json";
  out.taxonomy = build_taxonomy(config, out.taxonomy_file);

  json colors = json::array();
  for (const auto& c : config.colors) {
    colors.push_back({{"name", c.name}, {"rgb", {c.rgb[0], c.rgb[1], c.rgb[2]}}});
  }
  json manifest;
  manifest["config"] = {{"colors", colors},
                        {"shapes", config.shapes},
                        {"images_per_category", config.images_per_category},
                        {"image_size", config.image_size},
                        {"objects_min", config.objects_min},
                        {"objects_max", config.objects_max},
                        {"distractor_rate", config.distractor_rate},
                        {"noise_std", config.noise_std},
                        {"seed", config.seed}};
  manifest["per_category"] = std::move(per_category);
  manifest["totals"] = {{"categories", out.index.per_category.size()},
                        {"images", out.index.images.size()},
                        {"boxes", out.index.box_count()}};
  out.manifest_file = out_dir / "manifest.json";
  write_file(out.manifest_file, manifest.dump(2) + "\n");
  return out;
}

}  // namespace ovdet::datakit
