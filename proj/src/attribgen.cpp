#include "ovdet/attribgen.hpp"

#include <algorithm>
#include <cctype>
#include <chrono>
#include <cstdlib>
#include <nlohmann/json.hpp>
#include <set>
#include <thread>

#include "ovdet/common.hpp"

// httplib drags in <resolv.h>, whose `res` macro would mangle identifiers in
// any header parsed after it (Eigen uses `res` as a parameter name) — keep
// this include last and scrub the macro.
#include "httplib.h"
#ifdef res
#undef res
#endif

namespace ovdet::attribgen {

using nlohmann::json;

std::string parse_status_name(ParseStatus s) {
  switch (s) {
    case ParseStatus::OK: return "ok";
    case ParseStatus::Undefined: return "undefined";
    case ParseStatus::ParseError: return "parse_error";
  }
  throw std::logic_error("unreachable parse status");
}

void AttributeRequest::validate() const {
  if (instruction_template.find("{name}") == std::string::npos) {
    throw std::invalid_argument("instruction template lacks the {name} slot");
  }
  if (cache_dir.empty()) throw std::invalid_argument("cache_dir is required");
  if (model_id.empty()) throw std::invalid_argument("model_id is required");
  if (max_retries < 0) throw std::invalid_argument("max_retries must be >= 0");
}

std::string cache_key(const std::string& name, const std::string& instruction_template,
                      const std::string& model_id) {
  // unit separator keeps (a,bc) and (ab,c) from colliding
  return sha256_hex(name + '\x1f' + instruction_template + '\x1f' + model_id);
}

std::filesystem::path cache_path(const std::filesystem::path& cache_dir, const std::string& key) {
  return cache_dir / (key + ".json");
}

namespace {

std::string fold(const std::string& s) {
  std::string out;
  out.reserve(s.size());
  for (char c : s) out.push_back(static_cast<char>(std::tolower(static_cast<unsigned char>(c))));
  return out;
}

std::string trim(const std::string& s) {
  std::size_t a = 0, b = s.size();
  while (a < b && std::isspace(static_cast<unsigned char>(s[a]))) ++a;
  while (b > a && std::isspace(static_cast<unsigned char>(s[b - 1]))) --b;
  return s.substr(a, b - a);
}

bool is_rank_key(const std::string& folded, std::string* canon) {
  for (const char* key : taxonomy::kRankKeys) {
    if (folded == key) {
      *canon = key;
      return true;
    }
  }
  return false;
}

bool is_common_name_key(const std::string& folded) {
  return folded == "common_name" || folded == "common name" || folded == "commonname";
}

/// Placeholder values the model uses for "no answer" do not count as ranks.
bool usable_value(const std::string& v) {
  static const std::set<std::string> kPlaceholders = {"", "unknown", "n/a", "na",
                                                      "none", "null", "-"};
  return kPlaceholders.count(fold(v)) == 0;
}

void take_pair(const std::string& key, const std::string& value, AttributeResponse* resp) {
  const std::string folded = fold(trim(key));
  const std::string v = trim(value);
  std::string canon;
  if (is_rank_key(folded, &canon)) {
    if (usable_value(v)) resp->ranks[canon] = v;
  } else if (is_common_name_key(folded)) {
    if (usable_value(v)) resp->common_name = v;
  }
}

/// JSON answer route: widest {...} span that parses as an object.
bool try_json_route(const std::string& raw, AttributeResponse* resp, bool* undefined_signal) {
  const std::size_t open = raw.find('{');
  const std::size_t close = raw.rfind('}');
  if (open == std::string::npos || close == std::string::npos || close <= open) return false;
  const json j = json::parse(raw.substr(open, close - open + 1), nullptr, /*allow_exceptions=*/false);
  if (j.is_discarded() || !j.is_object()) return false;
  for (const auto& [key, value] : j.items()) {
    const std::string folded = fold(trim(key));
    if (folded == "undefined" && value.is_boolean() && value.get<bool>()) {
      *undefined_signal = true;
      continue;
    }
    if (value.is_string()) take_pair(key, value.get<std::string>(), resp);
  }
  return true;
}

/// Labeled-lines fallback: "Kingdom: Animalia" style rows, optionally with
/// list bullets in front.
void labeled_lines_route(const std::string& raw, AttributeResponse* resp) {
  std::size_t start = 0;
  while (start <= raw.size()) {
    std::size_t end = raw.find('\n', start);
    if (end == std::string::npos) end = raw.size();
    std::string line = trim(raw.substr(start, end - start));
    start = end + 1;
    while (!line.empty() && (line.front() == '-' || line.front() == '*')) {
      line = trim(line.substr(1));
    }
    const std::size_t colon = line.find(':');
    if (colon == std::string::npos) continue;
    take_pair(line.substr(0, colon), line.substr(colon + 1), resp);
    if (start > raw.size()) break;
  }
}

bool declination(const std::string& raw) {
  static const std::vector<std::string> kPhrases = {
      "cannot be defined",   "cannot be classified", "cannot classify",
      "unable to classify",  "not a biological",     "not an organism",
      "not a living",        "no biological classification",
      "i cannot",            "i can't",              "i'm sorry",
      "i am sorry"};
  const std::string folded = fold(raw);
  for (const auto& phrase : kPhrases) {
    if (folded.find(phrase) != std::string::npos) return true;
  }
  return false;
}

}  // namespace

AttributeResponse parse_model_output(const std::string& name, const std::string& raw) {
  AttributeResponse resp;
  resp.name = name;
  resp.raw_text = raw;

  bool undefined_signal = false;
  const bool json_parsed = try_json_route(raw, &resp, &undefined_signal);
  if (resp.ranks.empty() && !json_parsed) {
    labeled_lines_route(raw, &resp);
  }

  if (resp.ranks.size() == taxonomy::kRankKeys.size()) {
    resp.status = ParseStatus::OK;
  } else if (resp.ranks.empty() && (undefined_signal || declination(raw))) {
    resp.status = ParseStatus::Undefined;
    resp.common_name.clear();
  } else {
    resp.status = ParseStatus::ParseError;
  }
  return resp;
}

namespace {

std::string apply_template(const std::string& tmpl, const std::string& name) {
  std::string out = tmpl;
  const std::string slot = "{name}";
  std::size_t pos = 0;
  while ((pos = out.find(slot, pos)) != std::string::npos) {
    out.replace(pos, slot.size(), name);
    pos += name.size();
  }
  return out;
}

std::string query_live(const std::string& prompt, const AttributeRequest& req) {
  const char* base = std::getenv("OVDET_LLM_BASE_URL");
  const char* key = std::getenv("OVDET_LLM_API_KEY");
  if (base == nullptr || *base == '\0') {
    throw std::runtime_error(
        "Live mode needs OVDET_LLM_BASE_URL (e.g. http://localhost:8080); "
        "use Replay mode with a populated cache to run offline");
  }
  if (key == nullptr || *key == '\0') {
    throw std::runtime_error("Live mode needs OVDET_LLM_API_KEY set in the environment");
  }

  httplib::Client client{std::string(base)};
  client.set_connection_timeout(10, 0);
  client.set_read_timeout(120, 0);

  const json body = {{"model", req.model_id},
                     {"temperature", 0},
                     {"messages", json::array({{{"role", "user"}, {"content", prompt}}})}};
  const httplib::Headers headers = {{"Authorization", std::string("Bearer ") + key}};

  std::string last_error;
  for (int attempt = 0; attempt <= req.max_retries; ++attempt) {
    if (attempt > 0) {
      const double ms = req.backoff_initial_ms * std::pow(2.0, attempt - 1);
      std::this_thread::sleep_for(std::chrono::duration<double, std::milli>(ms));
    }
    httplib::Result res = client.Post("/chat/completions", headers, body.dump(),
                                      "application/json");
    if (!res) {
      last_error = "connection failed: " + httplib::to_string(res.error());
      continue;
    }
    if (res->status == 401 || res->status == 403) {
      throw std::runtime_error("LLM service rejected the credentials (HTTP " +
                               std::to_string(res->status) + "); check OVDET_LLM_API_KEY");
    }
    if (res->status == 429 || res->status >= 500) {
      last_error = "HTTP " + std::to_string(res->status);
      continue;  // rate limit / transient server error
    }
    if (res->status != 200) {
      throw std::runtime_error("LLM service error HTTP " + std::to_string(res->status) + ": " +
                               res->body);
    }
    const json reply = json::parse(res->body, nullptr, /*allow_exceptions=*/false);
    if (reply.is_discarded() || !reply.contains("choices") || reply["choices"].empty()) {
      throw std::runtime_error("malformed completion payload: " + res->body);
    }
    return reply["choices"][0].at("message").at("content").get<std::string>();
  }
  throw std::runtime_error("LLM request failed after " + std::to_string(req.max_retries + 1) +
                           " attempts (" + last_error + ")");
}

}  // namespace

std::vector<AttributeResponse> generate_attributes(const AttributeRequest& request) {
  request.validate();
  if (request.mode == Mode::Replay && !std::filesystem::is_directory(request.cache_dir)) {
    throw std::runtime_error("Replay mode needs a populated cache at " +
                             request.cache_dir.string());
  }
  if (request.mode == Mode::Live) std::filesystem::create_directories(request.cache_dir);

  std::vector<AttributeResponse> out;
  out.reserve(request.category_names.size());
  for (const std::string& name : request.category_names) {
    const std::string key = cache_key(name, request.instruction_template, request.model_id);
    const std::filesystem::path path = cache_path(request.cache_dir, key);

    std::string raw;
    if (std::filesystem::exists(path)) {
      const json entry = json::parse(read_file(path));
      raw = entry.at("raw_text").get<std::string>();
    } else if (request.mode == Mode::Replay) {
      throw std::runtime_error("cache miss in Replay mode for \"" + name + "\" (key " + key + ")");
    } else {
      raw = query_live(apply_template(request.instruction_template, name), request);
      const json entry = {{"name", name},
                          {"model_id", request.model_id},
                          {"raw_text", raw}};
      atomic_write_file(path, entry.dump(2));
    }
    out.push_back(parse_model_output(name, raw));
  }
  return out;
}

taxonomy::TaxonomyRegistry to_taxonomy(const std::vector<AttributeResponse>& responses) {
  json records = json::array();
  for (const auto& resp : responses) {
    json rec;
    rec["name"] = resp.name;
    if (resp.status == ParseStatus::OK) {
      for (const char* key : taxonomy::kRankKeys) rec[key] = resp.ranks.at(key);
      if (!resp.common_name.empty()) rec["common_name"] = resp.common_name;
    } else if (resp.status == ParseStatus::ParseError) {
      rec["review"] = true;
    }
    records.push_back(std::move(rec));
  }
  return taxonomy::parse_taxonomy(records.dump());
}

DedupResult dedup_names(const std::vector<std::string>& names) {
  DedupResult result;
  std::set<std::string> seen;
  for (const auto& name : names) {
    if (seen.insert(fold(name)).second) {
      result.kept.push_back(name);
    } else {
      result.dropped.push_back(name);
    }
  }
  return result;
}

std::size_t seed_cache_from_fixture(const std::filesystem::path& fixture_file,
                                    const std::filesystem::path& cache_dir,
                                    const std::string& instruction_template,
                                    const std::string& model_id) {
  const json fixture = json::parse(read_file(fixture_file));
  if (!fixture.is_object()) throw std::runtime_error("fixture must map name -> raw text");
  std::filesystem::create_directories(cache_dir);
  std::size_t written = 0;
  for (const auto& [name, raw] : fixture.items()) {
    const std::string key = cache_key(name, instruction_template, model_id);
    const json entry = {{"name", name},
                        {"model_id", model_id},
                        {"raw_text", raw.get<std::string>()}};
    atomic_write_file(cache_path(cache_dir, key), entry.dump(2));
    ++written;
  }
  return written;
}

}  // namespace ovdet::attribgen
