#pragma once

// Instruction-following attribute generation: asks a chat-completion LLM
// endpoint for the seven biological ranks plus a common name per category,
// with a content-addressed response cache so whole runs replay offline and
// bit-reproducibly.

#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "ovdet/taxonomy.hpp"

namespace ovdet::attribgen {

enum class Mode { Live, Replay };

enum class ParseStatus { OK, Undefined, ParseError };

std::string parse_status_name(ParseStatus s);

inline constexpr const char* kDefaultTemplate =
    "You are a biology assistant. For the object category \"{name}\", answer with ONLY a JSON "
    "object holding the keys kingdom, phylum, class, order, family, genus, species and "
    "common_name. If the category is not an organism or you cannot classify it, answer with "
    "{\"undefined\": true} instead.";

struct AttributeRequest {
  std::vector<std::string> category_names;
  std::string instruction_template = kDefaultTemplate;  // must contain a {name} slot
  std::string model_id = "gpt-4";
  std::filesystem::path cache_dir;
  Mode mode = Mode::Replay;
  int max_retries = 4;            // Live: attempts after the first failure
  double backoff_initial_ms = 250.0;  // Live: doubled per retry

  void validate() const;
};

struct AttributeResponse {
  std::string name;
  std::map<std::string, std::string> ranks;  // rank key -> value (taxonomy key set)
  std::string common_name;
  std::string raw_text;
  ParseStatus status = ParseStatus::ParseError;
};

/// Content address of one cached response: changing the name, the
/// instruction template, or the model id changes the key.
std::string cache_key(const std::string& name, const std::string& instruction_template,
                      const std::string& model_id);
std::filesystem::path cache_path(const std::filesystem::path& cache_dir, const std::string& key);

/// Total parser: every input maps to exactly one status, never throws.
/// Accepts a JSON answer (preferred), labeled "Rank: value" lines as a
/// fallback, and recognizes declinations as Undefined. OK requires all seven
/// ranks; anything between is a ParseError with the raw text preserved.
AttributeResponse parse_model_output(const std::string& name, const std::string& raw);

/// One response per input name, in input order. Live mode queries the
/// endpoint named by OVDET_LLM_BASE_URL (key in OVDET_LLM_API_KEY) for cache
/// misses and fills the cache atomically; Replay mode requires every name to
/// hit the cache.
std::vector<AttributeResponse> generate_attributes(const AttributeRequest& request);

/// Registry from parsed responses: OK entries become defined records with
/// their ranks and common name; Undefined entries become undefined records;
/// ParseError entries become undefined records flagged for review.
taxonomy::TaxonomyRegistry to_taxonomy(const std::vector<AttributeResponse>& responses);

struct DedupResult {
  std::vector<std::string> kept;     // first spelling wins, input order
  std::vector<std::string> dropped;  // case-folded duplicates, for review
};

/// Exact-string dedup after case folding.
DedupResult dedup_names(const std::vector<std::string>& names);

/// Populates a cache directory from a fixture file mapping name -> raw model
/// output, keyed exactly as generate_attributes would key live responses.
/// Returns the number of entries written.
std::size_t seed_cache_from_fixture(const std::filesystem::path& fixture_file,
                                    const std::filesystem::path& cache_dir,
                                    const std::string& instruction_template,
                                    const std::string& model_id);

}  // namespace ovdet::attribgen
