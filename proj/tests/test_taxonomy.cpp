#include <algorithm>
#include <set>
#include <string>
#include <vector>

#include "doctest.h"
#include "fixtures.hpp"
#include "ovdet/common.hpp"
#include "ovdet/taxonomy.hpp"

using namespace ovdet;
using namespace ovdet::taxonomy;

namespace {

const char* kFiveRecordJson = R"([
  {"name": "clownfish", "kingdom": "Animalia", "class": "Actinopterygii",
   "order": "Ovalentaria", "family": "Pomacentridae", "genus": "Amphiprion",
   "species": "A. ocellaris", "phylum": "Chordata", "common_name": "clownfish"},
  {"name": "lionfish", "kingdom": "Animalia", "phylum": "Chordata",
   "class": "Actinopterygii", "order": "Scorpaeniformes", "family": "Scorpaenidae",
   "genus": "Pterois", "species": "P. volitans"},
  {"name": "moon jelly", "kingdom": "Animalia", "phylum": "Cnidaria",
   "class": "Scyphozoa", "order": "Semaeostomeae", "family": "Ulmaridae",
   "genus": "Aurelia", "species": "A. aurita"},
  {"name": "sea nettle", "kingdom": "Animalia", "phylum": "Cnidaria",
   "class": "Scyphozoa", "order": "Semaeostomeae", "family": "Pelagiidae",
   "genus": "Chrysaora", "species": "C. fuscescens"},
  {"name": "trash", "common_name": "trash"}
])";

}  // namespace

TEST_SUITE_BEGIN("taxonomy");

TEST_CASE("small file parses into class buckets") {
  const auto reg = parse_taxonomy(kFiveRecordJson);
  CHECK(reg.records.size() == 5);
  CHECK(reg.class_index.size() == 2);
  std::size_t bucket_total = 0;
  for (const auto& [cls, members] : reg.class_index) bucket_total += members.size();
  CHECK(bucket_total == reg.defined_count());
  CHECK(reg.defined_count() == 4);
  CHECK(reg.undefined_count() == 1);
  CHECK(reg.find("trash") != nullptr);
  CHECK(reg.find("trash")->undefined);
  CHECK(reg.find("clownfish")->rank("class") == std::string("Actinopterygii"));
  CHECK(reg.find("nope") == nullptr);
}

TEST_CASE("empty file yields an empty registry") {
  const auto reg = parse_taxonomy("[]");
  CHECK(reg.records.empty());
  CHECK(reg.class_index.empty());
  CHECK(reg.defined_count() == 0);
}

TEST_CASE("duplicate names are rejected") {
  CHECK_THROWS(parse_taxonomy(R"([{"name":"a","class":"X"},{"name":"a","class":"Y"}])"));
}

TEST_CASE("species without class is kept, marked undefined, and warned about") {
  const auto reg = parse_taxonomy(R"([{"name":"odd one", "species":"O. mystica"}])");
  REQUIRE(reg.records.size() == 1);
  CHECK(reg.records[0].undefined);
  CHECK_FALSE(reg.warnings.empty());
}

TEST_CASE("registry iteration preserves file order") {
  const auto reg = parse_taxonomy(kFiveRecordJson);
  CHECK(reg.records[0].name == "clownfish");
  CHECK(reg.records[4].name == "trash");
  // Bucket members keep record order too.
  CHECK(reg.class_index.at("Scyphozoa") ==
        std::vector<std::string>{"moon jelly", "sea nettle"});
}

TEST_CASE("digest depends on content, not formatting") {
  const auto reg = parse_taxonomy(kFiveRecordJson);
  // Same records, different whitespace and key order.
  const auto reg2 = parse_taxonomy(nlohmann::json::parse(kFiveRecordJson).dump());
  CHECK(reg.source_digest == reg2.source_digest);
  CHECK(reg.source_digest.size() == 64);
  const auto other = parse_taxonomy("[]");
  CHECK(other.source_digest != reg.source_digest);
}

TEST_CASE("large fixture has the advertised shape") {
  const auto reg = fixtures::paper_shaped_registry();
  CHECK(reg.records.size() == fixtures::kTotalCount);
  CHECK(reg.class_index.size() == fixtures::kClassCount);
  CHECK(reg.defined_count() == fixtures::kDefinedCount);
  CHECK(reg.undefined_count() == fixtures::kUndefinedCount);
  CHECK(reg.warnings.size() == 3);  // species-without-class records
}

TEST_CASE("class-level split lists 20 seen and 6 unseen classes") {
  const auto reg = fixtures::paper_shaped_registry();
  SplitParams params;
  params.seen_classes = fixtures::seen_class_list();
  const auto split = gen_split(reg, SplitProtocol::ClassLevel, params, 0);
  CHECK(split.seen.size() == 20);
  CHECK(split.unseen.size() == 6);
  for (const auto& cls : fixtures::unseen_class_list()) CHECK(split.unseen.count(cls) == 1);
  CHECK(split.source_digest == reg.source_digest);
  CHECK(validate_split(split, reg).all_pass());
}

TEST_CASE("intra-class split partitions all defined categories 613/177") {
  const auto reg = fixtures::paper_shaped_registry();
  SplitParams params;
  params.seen_classes = fixtures::seen_class_list();
  const auto split = gen_split(reg, SplitProtocol::IntraClass, params, 0);
  CHECK(split.seen.size() == fixtures::kIntraSeen);
  CHECK(split.unseen.size() == fixtures::kIntraUnseen);
  CHECK(split.seen.size() + split.unseen.size() == fixtures::kDefinedCount);
  // No undefined name leaks into either side.
  CHECK(split.seen.count("undefined item 01") == 0);
  CHECK(split.unseen.count("undefined item 01") == 0);
  CHECK(validate_split(split, reg).all_pass());
}

TEST_CASE("inter-class split takes every fourth sorted member") {
  const auto reg = fixtures::paper_shaped_registry();
  const auto split = gen_split(reg, SplitProtocol::InterClass, SplitParams{}, 0);
  CHECK(split.seen.size() == fixtures::kInterSeen);
  CHECK(split.unseen.size() == fixtures::kInterUnseen);

  // Rule-level conformance: per class, |unseen ∩ class| = floor(n/4) for
  // n >= 4, and smaller classes appear on neither side.
  for (const auto& c : fixtures::class_table()) {
    const auto members = reg.members_of({c.class_name});
    int unseen_members = 0, seen_members = 0;
    for (const auto& m : members) {
      unseen_members += static_cast<int>(split.unseen.count(m));
      seen_members += static_cast<int>(split.seen.count(m));
    }
    if (c.size >= 4) {
      CHECK(unseen_members == c.size / 4);
      CHECK(seen_members == c.size - c.size / 4);
    } else {
      CHECK(unseen_members == 0);
      CHECK(seen_members == 0);
    }
  }

  // Exact membership for one class: 1-indexed positions divisible by 4.
  for (int i = 1; i <= 119; ++i) {
    const auto name = fixtures::member_name("Actinopterygii", i);
    if (i % 4 == 0) {
      CHECK(split.unseen.count(name) == 1);
    } else {
      CHECK(split.seen.count(name) == 1);
    }
  }
  CHECK(validate_split(split, reg).all_pass());
}

TEST_CASE("inter-class smallest eligible class holds out its fourth member") {
  const auto reg = parse_taxonomy(R"([
    {"name":"a","class":"Shellfish"},{"name":"b","class":"Shellfish"},
    {"name":"c","class":"Shellfish"},{"name":"d","class":"Shellfish"}])");
  const auto split = gen_split(reg, SplitProtocol::InterClass, SplitParams{}, 0);
  CHECK(split.unseen == std::set<std::string>{"d"});
  CHECK(split.seen == std::set<std::string>{"a", "b", "c"});
}

TEST_CASE("inter-class omits classes smaller than four") {
  const auto reg = parse_taxonomy(R"([
    {"name":"x1","class":"X"},{"name":"x2","class":"X"},{"name":"x3","class":"X"},
    {"name":"x4","class":"X"},{"name":"x5","class":"X"},
    {"name":"y1","class":"Y"},{"name":"y2","class":"Y"},{"name":"y3","class":"Y"},
    {"name":"y4","class":"Y"},
    {"name":"z1","class":"Z"},{"name":"z2","class":"Z"},{"name":"z3","class":"Z"}])");
  const auto split = gen_split(reg, SplitProtocol::InterClass, SplitParams{}, 0);
  CHECK(split.seen.size() == 7);
  CHECK(split.unseen.size() == 2);
  CHECK(split.unseen == std::set<std::string>{"x4", "y4"});
  for (const char* name : {"z1", "z2", "z3"}) {
    CHECK(split.seen.count(name) == 0);
    CHECK(split.unseen.count(name) == 0);
  }
}

TEST_CASE("inter-class with no eligible class is an error") {
  const auto reg = parse_taxonomy(R"([{"name":"a","class":"X"},{"name":"b","class":"X"}])");
  CHECK_THROWS(gen_split(reg, SplitProtocol::InterClass, SplitParams{}, 0));
}

TEST_CASE("unknown class names in params are rejected") {
  const auto reg = parse_taxonomy(kFiveRecordJson);
  SplitParams params;
  params.seen_classes = {"Actinopterygii", "NoSuchClass"};
  CHECK_THROWS(gen_split(reg, SplitProtocol::ClassLevel, params, 0));
  CHECK_THROWS(gen_split(reg, SplitProtocol::IntraClass, params, 0));
}

TEST_CASE("fully supervised split includes every record and no unseen") {
  const auto reg = fixtures::paper_shaped_registry();
  const auto split = gen_split(reg, SplitProtocol::FullySupervised, SplitParams{}, 0);
  CHECK(split.seen.size() == fixtures::kTotalCount);
  CHECK(split.unseen.empty());
  CHECK(split.seen.count("undefined item 07") == 1);
  CHECK(validate_split(split, reg).all_pass());
}

TEST_CASE("intra-class equals the union of class-level buckets") {
  const auto reg = fixtures::paper_shaped_registry();
  SplitParams params;
  params.seen_classes = fixtures::seen_class_list();
  const auto intra = gen_split(reg, SplitProtocol::IntraClass, params, 0);
  const auto class_level = gen_split(reg, SplitProtocol::ClassLevel, params, 0);

  const auto expand = [&](const std::set<std::string>& classes) {
    std::set<std::string> out;
    for (const auto& cls : classes) {
      const auto members = reg.members_of({cls});
      out.insert(members.begin(), members.end());
    }
    return out;
  };
  CHECK(intra.seen == expand(class_level.seen));
  CHECK(intra.unseen == expand(class_level.unseen));
}

TEST_CASE("splits are deterministic") {
  const auto reg = fixtures::paper_shaped_registry();
  const auto a = gen_split(reg, SplitProtocol::InterClass, SplitParams{}, 3);
  const auto b = gen_split(reg, SplitProtocol::InterClass, SplitParams{}, 3);
  CHECK(a.seen == b.seen);
  CHECK(a.unseen == b.unseen);
  CHECK(a.seed == b.seed);
  CHECK(a.source_digest == b.source_digest);
}

TEST_CASE("validation flags constructed violations") {
  const auto reg = parse_taxonomy(kFiveRecordJson);
  SplitParams params;
  params.seen_classes = {"Actinopterygii"};
  auto split = gen_split(reg, SplitProtocol::IntraClass, params, 0);
  REQUIRE(validate_split(split, reg).all_pass());

  SUBCASE("category on both sides breaks disjointness") {
    split.unseen.insert(*split.seen.begin());
    const auto report = validate_split(split, reg);
    CHECK_FALSE(report.all_pass());
    bool found = false;
    for (const auto& check : report.checks) {
      if (check.name == "disjointness") {
        found = true;
        CHECK_FALSE(check.pass);
      }
    }
    CHECK(found);
  }

  SUBCASE("missing category breaks coverage") {
    split.unseen.erase(*split.unseen.begin());
    const auto report = validate_split(split, reg);
    CHECK_FALSE(report.all_pass());
  }

  SUBCASE("validating against a different registry breaks the digest check") {
    const auto other = fixtures::paper_shaped_registry();
    const auto report = validate_split(split, other);
    bool digest_failed = false;
    for (const auto& check : report.checks) {
      if (check.name == "digest_match" && !check.pass) digest_failed = true;
    }
    CHECK(digest_failed);
  }
}

TEST_CASE("split files round-trip and serialize sets in lexicographic order") {
  const auto dir = fixtures::tmp_dir("taxonomy_split");
  const auto reg = parse_taxonomy(kFiveRecordJson);
  SplitParams params;
  params.seen_classes = {"Scyphozoa"};
  const auto split = gen_split(reg, SplitProtocol::IntraClass, params, 5);
  const auto path = dir / "split.json";
  save_split(split, path);
  const auto loaded = load_split(path);
  CHECK(loaded.protocol == split.protocol);
  CHECK(loaded.seen == split.seen);
  CHECK(loaded.unseen == split.unseen);
  CHECK(loaded.seed == split.seed);
  CHECK(loaded.source_digest == split.source_digest);

  const auto text = read_file(path);
  // "clownfish" precedes "lionfish" in the serialized unseen array.
  CHECK(text.find("clownfish") < text.find("lionfish"));
}

TEST_CASE("taxonomy files round-trip through save and load") {
  const auto dir = fixtures::tmp_dir("taxonomy_roundtrip");
  const auto reg = fixtures::paper_shaped_registry();
  const auto path = dir / "taxonomy.json";
  save_taxonomy(reg, path);
  const auto loaded = load_taxonomy(path);
  CHECK(loaded.records.size() == reg.records.size());
  CHECK(loaded.class_index == reg.class_index);
  CHECK(loaded.source_digest == reg.source_digest);
  for (std::size_t i = 0; i < reg.records.size(); ++i) {
    CHECK(loaded.records[i].name == reg.records[i].name);
    CHECK(loaded.records[i].ranks == reg.records[i].ranks);
    CHECK(loaded.records[i].undefined == reg.records[i].undefined);
  }
}

TEST_CASE("protocol names round-trip") {
  for (auto p : {SplitProtocol::IntraClass, SplitProtocol::InterClass, SplitProtocol::ClassLevel,
                 SplitProtocol::FullySupervised}) {
    CHECK(protocol_from_name(protocol_name(p)) == p);
  }
  CHECK_THROWS(protocol_from_name("sideways"));
}

TEST_CASE("members_of returns sorted members of the named classes") {
  const auto reg = parse_taxonomy(kFiveRecordJson);
  const auto members = reg.members_of({"Scyphozoa", "Actinopterygii"});
  CHECK(members == std::vector<std::string>{"clownfish", "lionfish", "moon jelly", "sea nettle"});
}

TEST_SUITE_END();
