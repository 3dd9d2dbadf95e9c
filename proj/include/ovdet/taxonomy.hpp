#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

namespace ovdet::taxonomy {

/// Rank keys, outermost first. These are also the JSON keys of the taxonomy
/// record file.
inline constexpr std::array<const char*, 7> kRankKeys = {
    "kingdom", "phylum", "class", "order", "family", "genus", "species"};

struct CategoryRecord {
  std::string name;
  std::optional<std::string> common_name;
  std::map<std::string, std::string> ranks;  // rank key -> value, absent = unknown
  bool undefined = false;                    // true iff ranks lacks "class"
  bool review = false;                       // flagged for human review on ingest

  std::optional<std::string> rank(const std::string& key) const {
    auto it = ranks.find(key);
    if (it == ranks.end()) return std::nullopt;
    return it->second;
  }
};

struct TaxonomyRegistry {
  std::vector<CategoryRecord> records;  // source-file order
  /// Class name -> category names, in record order within each bucket.
  std::map<std::string, std::vector<std::string>> class_index;
  std::string source_digest;  // sha256 of the canonicalized record file
  std::vector<std::string> warnings;

  const CategoryRecord* find(const std::string& name) const;
  std::size_t defined_count() const;
  std::size_t undefined_count() const;
  std::vector<std::string> class_names() const;
  /// Member categories of the given classes, sorted lexicographically.
  std::vector<std::string> members_of(const std::vector<std::string>& classes) const;
};

enum class SplitProtocol { IntraClass, InterClass, ClassLevel, FullySupervised };

std::string protocol_name(SplitProtocol p);
SplitProtocol protocol_from_name(const std::string& name);

struct SplitParams {
  /// Seen Class names; required by IntraClass and ClassLevel.
  std::vector<std::string> seen_classes;
};

struct SplitSpec {
  SplitProtocol protocol = SplitProtocol::FullySupervised;
  std::set<std::string> seen;    // category names (Class names for ClassLevel)
  std::set<std::string> unseen;
  std::uint64_t seed = 0;
  std::string source_digest;
};

struct ValidationCheck {
  std::string name;
  bool pass = false;
  std::string detail;
};

struct ValidationReport {
  std::vector<ValidationCheck> checks;
  bool all_pass() const;
};

TaxonomyRegistry parse_taxonomy(const std::string& text);
TaxonomyRegistry load_taxonomy(const std::filesystem::path& path);
void save_taxonomy(const TaxonomyRegistry& reg, const std::filesystem::path& path);

/// Canonical serialization: compact JSON array, fixed key order, absent ranks
/// omitted. The source digest is the sha256 of this text, so semantically
/// equal files always agree.
std::string canonical_taxonomy_text(const TaxonomyRegistry& reg);

SplitSpec gen_split(const TaxonomyRegistry& reg, SplitProtocol protocol,
                    const SplitParams& params, std::uint64_t seed);

ValidationReport validate_split(const SplitSpec& split, const TaxonomyRegistry& reg);

void save_split(const SplitSpec& split, const std::filesystem::path& path);
SplitSpec load_split(const std::filesystem::path& path);

}  // namespace ovdet::taxonomy
