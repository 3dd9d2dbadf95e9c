#pragma once

// Shared test fixtures: a large registry shaped like the real curated
// vocabulary (26 classes, 821 categories of which 31 are undefined), plus
// small helpers for building in-memory datasets and temp directories.
//
// The class-size table is frozen here and every derived count in the tests
// was computed from it by hand:
//   seen-designated 20 classes ............ 613 categories
//   unseen-designated 6 classes ........... 177 categories
//   defined total ......................... 790
//   undefined ............................. 31   (3 of them carry a species
//                                                 but no class: warning path)
//   inter-class eligible (size >= 4) ...... 15 classes, 765 categories
//   inter-class unseen = sum floor(n/4) ... 185  -> seen 580
//   inter-class omitted (size < 4) ........ 25 categories

#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "ovdet/datakit.hpp"
#include "ovdet/evalkit.hpp"
#include "ovdet/taxonomy.hpp"

namespace fixtures {

struct ClassSize {
  const char* class_name;
  int size;
  bool seen_designated;
};

inline const std::vector<ClassSize>& class_table() {
  static const std::vector<ClassSize> table = {
      {"Actinopterygii", 119, true}, {"Chondrichthyes", 99, true},
      {"Malacostraca", 79, true},    {"Gastropoda", 67, true},
      {"Bivalvia", 59, true},        {"Anthozoa", 46, true},
      {"Polychaeta", 40, true},      {"Echinoidea", 36, true},
      {"Crinoidea", 36, true},       {"Hydrozoa", 10, true},
      {"Ascidiacea", 3, true},       {"Phaeophyceae", 3, true},
      {"Maxillopoda", 2, true},      {"Ophiuroidea", 2, true},
      {"Polyplacophora", 2, true},   {"Merostomata", 2, true},
      {"Pycnogonida", 2, true},      {"Sipuncula", 2, true},
      {"Appendicularia", 2, true},   {"Priapulida", 2, true},
      {"Cephalopoda", 60, false},    {"Holothuroidea", 50, false},
      {"Asteroidea", 30, false},     {"Demospongiae", 20, false},
      {"Mammalia", 14, false},       {"Scyphozoa", 3, false},
  };
  return table;
}

inline std::vector<std::string> seen_class_list() {
  std::vector<std::string> out;
  for (const auto& c : class_table()) {
    if (c.seen_designated) out.push_back(c.class_name);
  }
  return out;
}

inline std::vector<std::string> unseen_class_list() {
  std::vector<std::string> out;
  for (const auto& c : class_table()) {
    if (!c.seen_designated) out.push_back(c.class_name);
  }
  return out;
}

/// Member name: "<Class> cat NNN", zero-padded so lexicographic order equals
/// numeric order. Inter-class expectations below rely on this.
inline std::string member_name(const std::string& class_name, int i) {
  char buf[16];
  std::snprintf(buf, sizeof buf, "%03d", i);
  return class_name + " cat " + buf;
}

/// The registry fixture as taxonomy record JSON text. Deterministic.
inline std::string paper_shaped_json() {
  nlohmann::json arr = nlohmann::json::array();
  for (const auto& c : class_table()) {
    for (int i = 1; i <= c.size; ++i) {
      nlohmann::json rec;
      rec["name"] = member_name(c.class_name, i);
      // Phaeophyceae are algae; everything else in the fixture is an animal.
      rec["kingdom"] =
          std::string(c.class_name) == "Phaeophyceae" ? "Chromista" : "Animalia";
      rec["phylum"] = std::string("phylum of ") + c.class_name;
      rec["class"] = c.class_name;
      rec["order"] = std::string("order ") + c.class_name;
      rec["family"] = std::string("family ") + c.class_name;
      rec["genus"] = std::string(c.class_name) + " genus";
      rec["species"] = member_name(c.class_name, i) + " sp.";
      if (i % 3 == 0) rec["common_name"] = std::string("common ") + member_name(c.class_name, i);
      arr.push_back(rec);
    }
  }
  for (int i = 1; i <= 31; ++i) {
    nlohmann::json rec;
    char buf[8];
    std::snprintf(buf, sizeof buf, "%02d", i);
    rec["name"] = std::string("undefined item ") + buf;
    if (i <= 3) {
      // Inconsistent hierarchy: species present, class absent. Ingest keeps
      // the record, marks it undefined, and reports a warning.
      rec["species"] = std::string("mystery sp. ") + buf;
    }
    arr.push_back(rec);
  }
  return arr.dump(2) + "\n";
}

inline ovdet::taxonomy::TaxonomyRegistry paper_shaped_registry() {
  return ovdet::taxonomy::parse_taxonomy(paper_shaped_json());
}

// Derived counts, frozen from the table above.
inline constexpr int kDefinedCount = 790;
inline constexpr int kUndefinedCount = 31;
inline constexpr int kTotalCount = 821;
inline constexpr int kClassCount = 26;
inline constexpr int kIntraSeen = 613;
inline constexpr int kIntraUnseen = 177;
inline constexpr int kInterSeen = 580;
inline constexpr int kInterUnseen = 185;
inline constexpr int kInterOmitted = 25;

// ---------------------------------------------------------------------------
// Dataset helpers.
// ---------------------------------------------------------------------------

/// Builds an in-memory index from records, deriving per_category the way the
/// annotation loader would.
inline ovdet::datakit::DatasetIndex make_index(std::vector<ovdet::datakit::ImageRecord> records) {
  ovdet::datakit::DatasetIndex index;
  for (auto& rec : records) {
    index.per_category[rec.dominant_category].push_back(rec.image_id);
    index.images.push_back(std::move(rec));
  }
  return index;
}

/// Flattens an index's boxes to the ground-truth list the oracles consume.
inline std::vector<ovdet::evalkit::GroundTruthBox> gt_list(
    const ovdet::datakit::DatasetIndex& index) {
  std::vector<ovdet::evalkit::GroundTruthBox> out;
  for (const auto& img : index.images) {
    for (const auto& box : img.boxes) {
      out.push_back({img.image_id, img.dominant_category, box});
    }
  }
  return out;
}

/// Fresh (emptied) scratch directory under the system temp root.
inline std::filesystem::path tmp_dir(const std::string& name) {
  const auto dir = std::filesystem::temp_directory_path() / "ovdet_tests" / name;
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  return dir;
}

}  // namespace fixtures
