#include "ovdet/taxonomy.hpp"

#include <algorithm>
#include <nlohmann/json.hpp>

#include "ovdet/common.hpp"

namespace ovdet::taxonomy {

using nlohmann::json;

const CategoryRecord* TaxonomyRegistry::find(const std::string& name) const {
  for (const auto& r : records) {
    if (r.name == name) return &r;
  }
  return nullptr;
}

std::size_t TaxonomyRegistry::defined_count() const {
  std::size_t n = 0;
  for (const auto& r : records) n += r.undefined ? 0 : 1;
  return n;
}

std::size_t TaxonomyRegistry::undefined_count() const {
  return records.size() - defined_count();
}

std::vector<std::string> TaxonomyRegistry::class_names() const {
  std::vector<std::string> out;
  out.reserve(class_index.size());
  for (const auto& [k, v] : class_index) out.push_back(k);
  return out;
}

std::vector<std::string> TaxonomyRegistry::members_of(
    const std::vector<std::string>& classes) const {
  std::vector<std::string> out;
  for (const auto& c : classes) {
    auto it = class_index.find(c);
    if (it == class_index.end()) throw std::runtime_error("unknown Class name: " + c);
    out.insert(out.end(), it->second.begin(), it->second.end());
  }
  std::sort(out.begin(), out.end());
  return out;
}

bool ValidationReport::all_pass() const {
  return std::all_of(checks.begin(), checks.end(),
                     [](const ValidationCheck& c) { return c.pass; });
}

std::string protocol_name(SplitProtocol p) {
  switch (p) {
    case SplitProtocol::IntraClass: return "intra_class";
    case SplitProtocol::InterClass: return "inter_class";
    case SplitProtocol::ClassLevel: return "class_level";
    case SplitProtocol::FullySupervised: return "fully_supervised";
  }
  throw std::logic_error("unreachable protocol value");
}

SplitProtocol protocol_from_name(const std::string& name) {
  if (name == "intra_class" || name == "intra") return SplitProtocol::IntraClass;
  if (name == "inter_class" || name == "inter") return SplitProtocol::InterClass;
  if (name == "class_level" || name == "class") return SplitProtocol::ClassLevel;
  if (name == "fully_supervised" || name == "full") return SplitProtocol::FullySupervised;
  throw std::runtime_error("unknown split protocol: " + name);
}

namespace {

CategoryRecord record_from_json(const json& j) {
  if (!j.is_object()) throw std::runtime_error("taxonomy record is not an object");
  CategoryRecord rec;
  if (!j.contains("name") || !j.at("name").is_string()) {
    throw std::runtime_error("taxonomy record missing string 'name'");
  }
  rec.name = j.at("name").get<std::string>();
  if (rec.name.empty()) throw std::runtime_error("taxonomy record with empty name");
  if (j.contains("common_name") && !j.at("common_name").is_null()) {
    rec.common_name = j.at("common_name").get<std::string>();
  }
  for (const char* key : kRankKeys) {
    if (j.contains(key) && !j.at(key).is_null()) {
      rec.ranks[key] = j.at(key).get<std::string>();
    }
  }
  if (j.contains("review") && j.at("review").is_boolean()) {
    rec.review = j.at("review").get<bool>();
  }
  rec.undefined = rec.ranks.find("class") == rec.ranks.end();
  return rec;
}

json record_to_json(const CategoryRecord& rec) {
  json j = json::object();
  j["name"] = rec.name;
  if (rec.common_name) j["common_name"] = *rec.common_name;
  for (const char* key : kRankKeys) {
    auto it = rec.ranks.find(key);
    if (it != rec.ranks.end()) j[key] = it->second;
  }
  if (rec.review) j["review"] = true;
  return j;
}

void build_index(TaxonomyRegistry& reg) {
  reg.class_index.clear();
  std::set<std::string> names;
  for (auto& rec : reg.records) {
    if (!names.insert(rec.name).second) {
      throw std::runtime_error("duplicate category name: " + rec.name);
    }
    if (rec.undefined) {
      if (rec.ranks.find("species") != rec.ranks.end()) {
        reg.warnings.push_back("inconsistent hierarchy for '" + rec.name +
                               "': species present but class absent; record marked undefined");
      }
      continue;
    }
    reg.class_index[rec.ranks.at("class")].push_back(rec.name);
  }
}

}  // namespace

TaxonomyRegistry parse_taxonomy(const std::string& text) {
  json doc;
  try {
    doc = text.empty() ? json::array() : json::parse(text);
  } catch (const json::parse_error& e) {
    throw std::runtime_error(std::string("taxonomy parse failure: ") + e.what());
  }
  if (!doc.is_array()) throw std::runtime_error("taxonomy file must be a JSON array");
  TaxonomyRegistry reg;
  reg.records.reserve(doc.size());
  for (const auto& item : doc) reg.records.push_back(record_from_json(item));
  build_index(reg);
  reg.source_digest = sha256_hex(canonical_taxonomy_text(reg));
  return reg;
}

TaxonomyRegistry load_taxonomy(const std::filesystem::path& path) {
  return parse_taxonomy(read_file(path));
}

std::string canonical_taxonomy_text(const TaxonomyRegistry& reg) {
  // Keys are emitted in a fixed order via ordered_json.
  nlohmann::ordered_json arr = nlohmann::ordered_json::array();
  for (const auto& rec : reg.records) {
    nlohmann::ordered_json j;
    j["name"] = rec.name;
    if (rec.common_name) j["common_name"] = *rec.common_name;
    for (const char* key : kRankKeys) {
      auto it = rec.ranks.find(key);
      if (it != rec.ranks.end()) j[key] = it->second;
    }
    if (rec.review) j["review"] = true;
    arr.push_back(std::move(j));
  }
  return arr.dump();
}

void save_taxonomy(const TaxonomyRegistry& reg, const std::filesystem::path& path) {
  json arr = json::array();
  for (const auto& rec : reg.records) arr.push_back(record_to_json(rec));
  write_file(path, arr.dump(2) + "\n");
}

SplitSpec gen_split(const TaxonomyRegistry& reg, SplitProtocol protocol,
                    const SplitParams& params, std::uint64_t seed) {
  SplitSpec spec;
  spec.protocol = protocol;
  spec.seed = seed;
  spec.source_digest = reg.source_digest;

  auto check_classes_known = [&] {
    for (const auto& c : params.seen_classes) {
      if (reg.class_index.find(c) == reg.class_index.end()) {
        throw std::runtime_error("unknown Class name in split params: " + c);
      }
    }
  };

  switch (protocol) {
    case SplitProtocol::IntraClass: {
      check_classes_known();
      std::set<std::string> seen_classes(params.seen_classes.begin(),
                                         params.seen_classes.end());
      for (const auto& [cls, members] : reg.class_index) {
        auto& dst = seen_classes.count(cls) ? spec.seen : spec.unseen;
        dst.insert(members.begin(), members.end());
      }
      break;
    }
    case SplitProtocol::InterClass: {
      bool any_eligible = false;
      for (const auto& [cls, members] : reg.class_index) {
        if (members.size() < 4) continue;  // class omitted entirely
        any_eligible = true;
        std::vector<std::string> sorted = members;
        std::sort(sorted.begin(), sorted.end());
        for (std::size_t i = 0; i < sorted.size(); ++i) {
          // 1-indexed positions divisible by 4 go to unseen
          auto& dst = ((i + 1) % 4 == 0) ? spec.unseen : spec.seen;
          dst.insert(sorted[i]);
        }
      }
      if (!any_eligible) {
        throw std::runtime_error("inter_class split: no class has >= 4 categories");
      }
      break;
    }
    case SplitProtocol::ClassLevel: {
      check_classes_known();
      std::set<std::string> seen_classes(params.seen_classes.begin(),
                                         params.seen_classes.end());
      for (const auto& [cls, members] : reg.class_index) {
        (seen_classes.count(cls) ? spec.seen : spec.unseen).insert(cls);
      }
      break;
    }
    case SplitProtocol::FullySupervised: {
      for (const auto& rec : reg.records) spec.seen.insert(rec.name);
      break;
    }
  }
  return spec;
}

ValidationReport validate_split(const SplitSpec& split, const TaxonomyRegistry& reg) {
  ValidationReport report;

  {
    std::vector<std::string> both;
    std::set_intersection(split.seen.begin(), split.seen.end(), split.unseen.begin(),
                          split.unseen.end(), std::back_inserter(both));
    report.checks.push_back({"disjointness", both.empty(),
                             both.empty() ? "seen and unseen are disjoint"
                                          : "overlap: " + both.front() + " ..."});
  }

  {
    std::set<std::string> expected;
    switch (split.protocol) {
      case SplitProtocol::IntraClass:
        for (const auto& [cls, members] : reg.class_index) {
          expected.insert(members.begin(), members.end());
        }
        break;
      case SplitProtocol::InterClass:
        for (const auto& [cls, members] : reg.class_index) {
          if (members.size() >= 4) expected.insert(members.begin(), members.end());
        }
        break;
      case SplitProtocol::ClassLevel:
        for (const auto& [cls, members] : reg.class_index) expected.insert(cls);
        break;
      case SplitProtocol::FullySupervised:
        for (const auto& rec : reg.records) expected.insert(rec.name);
        break;
    }
    std::set<std::string> got;
    got.insert(split.seen.begin(), split.seen.end());
    got.insert(split.unseen.begin(), split.unseen.end());
    const bool pass = got == expected;
    report.checks.push_back(
        {"coverage", pass,
         pass ? "seen + unseen covers all eligible entries"
              : "covered " + std::to_string(got.size()) + " of " +
                    std::to_string(expected.size()) + " eligible entries"});
  }

  {
    const bool pass = split.source_digest == reg.source_digest;
    report.checks.push_back({"digest_match", pass,
                             pass ? "split was generated from this registry"
                                  : "split digest " + split.source_digest +
                                        " != registry digest " + reg.source_digest});
  }

  if (split.protocol == SplitProtocol::FullySupervised) {
    report.checks.push_back({"no_unseen", split.unseen.empty(),
                             split.unseen.empty() ? "unseen set is empty"
                                                  : "fully supervised split has unseen entries"});
  }
  return report;
}

void save_split(const SplitSpec& split, const std::filesystem::path& path) {
  json j;
  j["protocol"] = protocol_name(split.protocol);
  j["seen"] = std::vector<std::string>(split.seen.begin(), split.seen.end());
  j["unseen"] = std::vector<std::string>(split.unseen.begin(), split.unseen.end());
  j["seed"] = split.seed;
  j["source_digest"] = split.source_digest;
  write_file(path, j.dump(2) + "\n");
}

SplitSpec load_split(const std::filesystem::path& path) {
  json j = json::parse(read_file(path));
  SplitSpec spec;
  spec.protocol = protocol_from_name(j.at("protocol").get<std::string>());
  for (const auto& s : j.at("seen")) spec.seen.insert(s.get<std::string>());
  for (const auto& s : j.at("unseen")) spec.unseen.insert(s.get<std::string>());
  spec.seed = j.value("seed", std::uint64_t{0});
  spec.source_digest = j.value("source_digest", std::string{});
  return spec;
}

}  // namespace ovdet::taxonomy
