#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "ovdet/taxonomy.hpp"

namespace ovdet::datakit {

/// Axis-aligned box in image pixel coordinates, corner form.
struct BBox {
  double x_min = 0, y_min = 0, x_max = 0, y_max = 0;

  double width() const { return x_max - x_min; }
  double height() const { return y_max - y_min; }
  double area() const { return width() * height(); }
  bool valid() const;

  static BBox from_xywh(double x, double y, double w, double h) {
    return BBox{x, y, x + w, y + h};
  }
  std::array<double, 4> to_xywh() const { return {x_min, y_min, width(), height()}; }
};

struct ImageRecord {
  std::string image_id;
  std::string file_name;  // relative to the dataset directory
  int width = 0, height = 0;
  std::string dominant_category;
  std::vector<BBox> boxes;  // all carry dominant_category
};

struct DatasetIndex {
  std::vector<ImageRecord> images;
  std::map<std::string, std::vector<std::string>> per_category;  // category -> image ids
  std::filesystem::path root;  // directory that file_name entries are relative to
  bool curated = false;

  const ImageRecord* find(const std::string& image_id) const;
  std::size_t box_count() const;
  std::vector<std::string> categories() const;
  /// Asserts the curated floor (>= 10 images per category) and sets the flag.
  void mark_curated();
};

struct LoadOptions {
  bool strict = true;  // out-of-image boxes are an error; otherwise clipped
};

DatasetIndex load_annotations(const std::filesystem::path& path, const LoadOptions& opt = {});
void save_annotations(const DatasetIndex& index, const std::filesystem::path& path);

std::pair<DatasetIndex, DatasetIndex> train_val_split(const DatasetIndex& index,
                                                      double fraction, std::uint64_t seed,
                                                      bool require_both_nonempty = true);

struct Stats {
  std::size_t categories = 0;
  std::size_t images = 0;
  std::size_t boxes = 0;
  std::size_t min_per_category = 0;
  std::size_t max_per_category = 0;
  double median_per_category = 0.0;
};

Stats dataset_stats(const DatasetIndex& index);
std::string stats_to_json_text(const Stats& stats);

/// 8-bit RGB image, row-major.
struct Image {
  int width = 0, height = 0;
  std::vector<std::uint8_t> rgb;

  std::uint8_t* px(int x, int y) { return rgb.data() + 3 * (static_cast<std::size_t>(y) * width + x); }
  const std::uint8_t* px(int x, int y) const {
    return rgb.data() + 3 * (static_cast<std::size_t>(y) * width + x);
  }
};

Image load_ppm(const std::filesystem::path& path);
void save_ppm(const Image& img, const std::filesystem::path& path);

struct ColorDef {
  std::string name;
  std::array<std::uint8_t, 3> rgb;
};

struct SynthConfig {
  std::vector<ColorDef> colors;
  std::vector<std::string> shapes;
  int images_per_category = 12;
  int image_size = 64;
  int objects_min = 1, objects_max = 2;
  double distractor_rate = 0.25;
  double noise_std = 8.0;
  std::uint64_t seed = 0;
};

SynthConfig default_synth_config();

struct SynthOutput {
  std::filesystem::path dir;
  DatasetIndex index;
  taxonomy::TaxonomyRegistry taxonomy;
  std::filesystem::path annotations_file;
  std::filesystem::path taxonomy_file;
  std::filesystem::path manifest_file;
};

/// Renders the compositional shapes dataset: category = "<color> <shape>",
/// taxonomic Class = shape name. Deterministic in the seed, including the
/// emitted bytes.
SynthOutput gen_synthetic(const SynthConfig& config, const std::filesystem::path& out_dir);

}  // namespace ovdet::datakit
