// Dataset schema, annotation ingestion, train/val splitting, and statistics.
#include <cmath>
#include <filesystem>
#include <nlohmann/json.hpp>
#include <set>
#include <string>
#include <vector>

#include "doctest.h"
#include "fixtures.hpp"
#include "ovdet/common.hpp"
#include "ovdet/datakit.hpp"

using namespace ovdet;
using namespace ovdet::datakit;
using nlohmann::json;

namespace {

// Builds a COCO-style annotation document for hand-crafted loader cases.
// `boxes` entries are (image_index, bbox xywh).
json coco_doc(const std::vector<json>& images, const std::vector<json>& annotations,
              const std::vector<json>& categories) {
  json doc;
  doc["images"] = images;
  doc["annotations"] = annotations;
  doc["categories"] = categories;
  return doc;
}

std::filesystem::path write_doc(const std::filesystem::path& dir, const json& doc) {
  const auto path = dir / "annotations.json";
  write_file(path, doc.dump(2) + "\n");
  return path;
}

json image_entry(long id, int w, int h) {
  return {{"id", id}, {"file_name", "images/" + std::to_string(id) + ".ppm"}, {"width", w},
          {"height", h}};
}

json ann_entry(long id, long image_id, long cat_id, std::array<double, 4> xywh) {
  return {{"id", id},
          {"image_id", image_id},
          {"category_id", cat_id},
          {"bbox", {xywh[0], xywh[1], xywh[2], xywh[3]}}};
}

}  // namespace

TEST_SUITE_BEGIN("datakit");

TEST_CASE("bbox corner/xywh conversions round-trip") {
  const BBox b = BBox::from_xywh(3.5, 2.0, 10.0, 4.5);
  CHECK(b.x_min == 3.5);
  CHECK(b.y_min == 2.0);
  CHECK(b.x_max == 13.5);
  CHECK(b.y_max == 6.5);
  CHECK(b.width() == 10.0);
  CHECK(b.height() == 4.5);
  CHECK(b.area() == doctest::Approx(45.0));
  const auto xywh = b.to_xywh();
  CHECK(xywh[0] == 3.5);
  CHECK(xywh[1] == 2.0);
  CHECK(xywh[2] == 10.0);
  CHECK(xywh[3] == 4.5);
}

TEST_CASE("bbox validity rejects degenerate and negative-origin geometry") {
  CHECK(BBox{0, 0, 1, 1}.valid());
  CHECK(BBox{2.5, 3.5, 2.6, 3.6}.valid());
  CHECK_FALSE(BBox{5, 5, 5, 9}.valid());   // zero width
  CHECK_FALSE(BBox{5, 5, 9, 5}.valid());   // zero height
  CHECK_FALSE(BBox{9, 5, 5, 9}.valid());   // inverted x
  CHECK_FALSE(BBox{-1, 0, 4, 4}.valid());  // negative origin
  CHECK_FALSE(BBox{0, -0.5, 4, 4}.valid());
  BBox nan_box{0, 0, 4, 4};
  nan_box.x_max = std::nan("");
  CHECK_FALSE(nan_box.valid());
}

TEST_CASE("index lookups, box counts, and curated floor") {
  std::vector<ImageRecord> recs;
  for (int i = 1; i <= 10; ++i) {
    ImageRecord r;
    r.image_id = std::to_string(i);
    r.file_name = "images/" + std::to_string(i) + ".ppm";
    r.width = 64;
    r.height = 64;
    r.dominant_category = "red circle";
    r.boxes = {BBox{1, 1, 9, 9}, BBox{20, 20, 30, 30}};
    recs.push_back(r);
  }
  DatasetIndex index = fixtures::make_index(recs);

  CHECK(index.find("3") != nullptr);
  CHECK(index.find("3")->file_name == "images/3.ppm");
  CHECK(index.find("99") == nullptr);
  CHECK(index.box_count() == 20);
  CHECK(index.categories() == std::vector<std::string>{"red circle"});

  SUBCASE("curated floor of 10 accepted") {
    index.mark_curated();
    CHECK(index.curated);
  }
  SUBCASE("a 9-image category fails curation with the category named") {
    index.per_category["red circle"].pop_back();
    index.images.pop_back();
    CHECK_THROWS_WITH_AS(index.mark_curated(),
                         doctest::Contains("red circle"), std::runtime_error);
    CHECK_FALSE(index.curated);
  }
}

TEST_CASE("loader ingests a single image with a full-frame box") {
  const auto dir = fixtures::tmp_dir("datakit_single");
  const json doc = coco_doc({image_entry(1, 64, 48)},
                            {ann_entry(1, 1, 1, {0, 0, 64, 48})},
                            {{{"id", 1}, {"name", "red circle"}}});
  const DatasetIndex index = load_annotations(write_doc(dir, doc));

  CHECK(index.images.size() == 1);
  CHECK(index.per_category.size() == 1);
  CHECK(index.images[0].image_id == "1");
  CHECK(index.images[0].width == 64);
  CHECK(index.images[0].height == 48);
  CHECK(index.images[0].dominant_category == "red circle");
  REQUIRE(index.images[0].boxes.size() == 1);
  CHECK(index.images[0].boxes[0].x_min == 0);
  CHECK(index.images[0].boxes[0].y_max == 48);
  CHECK(index.root == dir);
}

TEST_CASE("loader rejects malformed records") {
  const auto dir = fixtures::tmp_dir("datakit_errors");

  SUBCASE("unparseable file") {
    const auto path = dir / "bad.json";
    write_file(path, "{not json");
    CHECK_THROWS_WITH_AS(load_annotations(path), doctest::Contains("parse failure"),
                         std::runtime_error);
  }
  SUBCASE("degenerate box (zero width)") {
    const json doc = coco_doc({image_entry(1, 64, 64)},
                              {ann_entry(1, 1, 1, {10, 10, 0, 5})},
                              {{{"id", 1}, {"name", "a"}}});
    CHECK_THROWS_WITH_AS(load_annotations(write_doc(dir, doc)),
                         doctest::Contains("degenerate"), std::runtime_error);
  }
  SUBCASE("negative-origin box is degenerate in both modes") {
    const json doc = coco_doc({image_entry(1, 64, 64)},
                              {ann_entry(1, 1, 1, {-4, 10, 8, 8})},
                              {{{"id", 1}, {"name", "a"}}});
    const auto path = write_doc(dir, doc);
    CHECK_THROWS_WITH_AS(load_annotations(path), doctest::Contains("degenerate"),
                         std::runtime_error);
    LoadOptions lenient;
    lenient.strict = false;
    CHECK_THROWS_WITH_AS(load_annotations(path, lenient), doctest::Contains("degenerate"),
                         std::runtime_error);
  }
  SUBCASE("duplicate image id") {
    const json doc = coco_doc({image_entry(1, 64, 64), image_entry(1, 32, 32)},
                              {ann_entry(1, 1, 1, {1, 1, 4, 4})},
                              {{{"id", 1}, {"name", "a"}}});
    CHECK_THROWS_WITH_AS(load_annotations(write_doc(dir, doc)),
                         doctest::Contains("duplicate image id"), std::runtime_error);
  }
  SUBCASE("annotation referencing an unknown image") {
    const json doc = coco_doc({image_entry(1, 64, 64)},
                              {ann_entry(1, 7, 1, {1, 1, 4, 4})},
                              {{{"id", 1}, {"name", "a"}}});
    CHECK_THROWS_WITH_AS(load_annotations(write_doc(dir, doc)),
                         doctest::Contains("unknown image"), std::runtime_error);
  }
  SUBCASE("annotation referencing an unknown category") {
    const json doc = coco_doc({image_entry(1, 64, 64)},
                              {ann_entry(1, 1, 9, {1, 1, 4, 4})},
                              {{{"id", 1}, {"name", "a"}}});
    CHECK_THROWS_WITH_AS(load_annotations(write_doc(dir, doc)),
                         doctest::Contains("unknown category"), std::runtime_error);
  }
  SUBCASE("one image carrying two categories") {
    const json doc = coco_doc(
        {image_entry(1, 64, 64)},
        {ann_entry(1, 1, 1, {1, 1, 4, 4}), ann_entry(2, 1, 2, {10, 10, 4, 4})},
        {{{"id", 1}, {"name", "a"}}, {{"id", 2}, {"name", "b"}}});
    CHECK_THROWS_WITH_AS(load_annotations(write_doc(dir, doc)),
                         doctest::Contains("more than one category"), std::runtime_error);
  }
  SUBCASE("image with zero boxes") {
    const json doc = coco_doc({image_entry(1, 64, 64), image_entry(2, 64, 64)},
                              {ann_entry(1, 1, 1, {1, 1, 4, 4})},
                              {{{"id", 1}, {"name", "a"}}});
    CHECK_THROWS_WITH_AS(load_annotations(write_doc(dir, doc)),
                         doctest::Contains("zero boxes"), std::runtime_error);
  }
  SUBCASE("non-positive image dimensions") {
    const json doc = coco_doc({image_entry(1, 0, 64)},
                              {ann_entry(1, 1, 1, {1, 1, 4, 4})},
                              {{{"id", 1}, {"name", "a"}}});
    CHECK_THROWS_WITH_AS(load_annotations(write_doc(dir, doc)),
                         doctest::Contains("non-positive"), std::runtime_error);
  }
}

TEST_CASE("strict mode rejects out-of-bounds boxes; lenient mode clips them") {
  const auto dir = fixtures::tmp_dir("datakit_clip");
  // Box 1 overhangs the right/bottom corner; box 2 lies fully past the edge.
  const json doc = coco_doc(
      {image_entry(1, 64, 64)},
      {ann_entry(1, 1, 1, {50, 50, 20, 20}), ann_entry(2, 1, 1, {70, 10, 20, 20})},
      {{{"id", 1}, {"name", "a"}}});
  const auto path = write_doc(dir, doc);

  SUBCASE("strict throws") {
    CHECK_THROWS_WITH_AS(load_annotations(path), doctest::Contains("outside image bounds"),
                         std::runtime_error);
  }
  SUBCASE("lenient clips the overhang and drops the fully-outside box") {
    LoadOptions lenient;
    lenient.strict = false;
    const DatasetIndex index = load_annotations(path, lenient);
    REQUIRE(index.images.size() == 1);
    REQUIRE(index.images[0].boxes.size() == 1);
    const BBox& b = index.images[0].boxes[0];
    CHECK(b.x_min == 50);
    CHECK(b.y_min == 50);
    CHECK(b.x_max == 64);
    CHECK(b.y_max == 64);
  }
  SUBCASE("lenient still rejects an image whose only box clips away entirely") {
    const json solo = coco_doc({image_entry(1, 64, 64)},
                               {ann_entry(1, 1, 1, {70, 10, 20, 20})},
                               {{{"id", 1}, {"name", "a"}}});
    LoadOptions lenient;
    lenient.strict = false;
    CHECK_THROWS_WITH_AS(load_annotations(write_doc(dir, solo), lenient),
                         doctest::Contains("zero boxes"), std::runtime_error);
  }
}

TEST_CASE("annotation round-trip preserves the index and re-saves byte-identically") {
  const auto dir = fixtures::tmp_dir("datakit_roundtrip");
  std::vector<ImageRecord> recs;
  int id = 1;
  for (const std::string cat : {"blue square", "red circle"}) {
    for (int i = 0; i < 2; ++i) {
      ImageRecord r;
      r.image_id = std::to_string(id++);
      r.file_name = "images/" + r.image_id + ".ppm";
      r.width = 64;
      r.height = 48;
      r.dominant_category = cat;
      r.boxes = {BBox{1.5, 2.25, 10.5, 12.0}};
      if (i == 1) r.boxes.push_back(BBox{20, 20, 40, 40});
      recs.push_back(r);
    }
  }
  const DatasetIndex original = fixtures::make_index(recs);

  const auto path = dir / "annotations.json";
  save_annotations(original, path);
  const DatasetIndex loaded = load_annotations(path);

  REQUIRE(loaded.images.size() == original.images.size());
  for (std::size_t i = 0; i < loaded.images.size(); ++i) {
    const auto& a = original.images[i];
    const auto& b = loaded.images[i];
    CHECK(b.image_id == a.image_id);
    CHECK(b.file_name == a.file_name);
    CHECK(b.width == a.width);
    CHECK(b.height == a.height);
    CHECK(b.dominant_category == a.dominant_category);
    REQUIRE(b.boxes.size() == a.boxes.size());
    for (std::size_t k = 0; k < b.boxes.size(); ++k) {
      CHECK(b.boxes[k].x_min == a.boxes[k].x_min);
      CHECK(b.boxes[k].y_min == a.boxes[k].y_min);
      CHECK(b.boxes[k].x_max == a.boxes[k].x_max);
      CHECK(b.boxes[k].y_max == a.boxes[k].y_max);
    }
  }
  CHECK(loaded.per_category == original.per_category);

  const auto path2 = dir / "annotations2.json";
  save_annotations(loaded, path2);
  CHECK(read_file(path) == read_file(path2));
}

TEST_CASE("train/val split applies the per-category floor rule") {
  auto make_cat = [](const std::string& cat, int count, int first_id) {
    std::vector<ImageRecord> recs;
    for (int i = 0; i < count; ++i) {
      ImageRecord r;
      r.image_id = std::to_string(first_id + i);
      r.file_name = "images/" + r.image_id + ".ppm";
      r.width = 64;
      r.height = 64;
      r.dominant_category = cat;
      r.boxes = {BBox{1, 1, 9, 9}};
      recs.push_back(r);
    }
    return recs;
  };

  SUBCASE("10 images at four-fifths -> 8 train / 2 val") {
    const DatasetIndex index = fixtures::make_index(make_cat("a", 10, 1));
    const auto [train, val] = train_val_split(index, 0.8, 7);
    CHECK(train.images.size() == 8);
    CHECK(val.images.size() == 2);
  }
  SUBCASE("5 images at four-fifths -> 4 / 1") {
    const DatasetIndex index = fixtures::make_index(make_cat("a", 5, 1));
    const auto [train, val] = train_val_split(index, 0.8, 7);
    CHECK(train.images.size() == 4);
    CHECK(val.images.size() == 1);
  }
  SUBCASE("categories of 10 and 15 -> train 20 / val 5, per-category floors") {
    auto recs = make_cat("a", 10, 1);
    const auto more = make_cat("b", 15, 100);
    recs.insert(recs.end(), more.begin(), more.end());
    const DatasetIndex index = fixtures::make_index(recs);
    const auto [train, val] = train_val_split(index, 0.8, 7);
    CHECK(train.images.size() == 20);
    CHECK(val.images.size() == 5);
    CHECK(train.per_category.at("a").size() == 8);
    CHECK(train.per_category.at("b").size() == 12);
    CHECK(val.per_category.at("a").size() == 2);
    CHECK(val.per_category.at("b").size() == 3);
  }
  SUBCASE("split partitions the index exactly") {
    auto recs = make_cat("a", 11, 1);
    const auto more = make_cat("b", 7, 100);
    recs.insert(recs.end(), more.begin(), more.end());
    const DatasetIndex index = fixtures::make_index(recs);
    const auto [train, val] = train_val_split(index, 0.6, 3);

    std::set<std::string> train_ids, val_ids, all_ids;
    for (const auto& img : train.images) train_ids.insert(img.image_id);
    for (const auto& img : val.images) val_ids.insert(img.image_id);
    for (const auto& img : index.images) all_ids.insert(img.image_id);
    CHECK(train_ids.size() + val_ids.size() == all_ids.size());
    std::set<std::string> unioned = train_ids;
    unioned.insert(val_ids.begin(), val_ids.end());
    CHECK(unioned == all_ids);
    for (const auto& id : train_ids) CHECK(val_ids.count(id) == 0);
    // Record order inside each side follows the original index order.
    CHECK(train.root == index.root);
  }
  SUBCASE("deterministic in the seed") {
    const DatasetIndex index = fixtures::make_index(make_cat("a", 12, 1));
    const auto [t1, v1] = train_val_split(index, 0.75, 42);
    const auto [t2, v2] = train_val_split(index, 0.75, 42);
    REQUIRE(t1.images.size() == t2.images.size());
    for (std::size_t i = 0; i < t1.images.size(); ++i) {
      CHECK(t1.images[i].image_id == t2.images[i].image_id);
    }
    REQUIRE(v1.images.size() == v2.images.size());
    for (std::size_t i = 0; i < v1.images.size(); ++i) {
      CHECK(v1.images[i].image_id == v2.images[i].image_id);
    }
  }
  SUBCASE("fraction outside (0,1) is rejected") {
    const DatasetIndex index = fixtures::make_index(make_cat("a", 10, 1));
    CHECK_THROWS_AS(train_val_split(index, 0.0, 1), std::invalid_argument);
    CHECK_THROWS_AS(train_val_split(index, 1.0, 1), std::invalid_argument);
    CHECK_THROWS_AS(train_val_split(index, -0.3, 1), std::invalid_argument);
  }
  SUBCASE("category below 2 images rejected when both sides must be non-empty") {
    auto recs = make_cat("a", 10, 1);
    const auto tiny = make_cat("lonely", 1, 100);
    recs.insert(recs.end(), tiny.begin(), tiny.end());
    const DatasetIndex index = fixtures::make_index(recs);
    CHECK_THROWS_WITH_AS(train_val_split(index, 0.8, 1), doctest::Contains("lonely"),
                         std::runtime_error);
    // Relaxed mode places the single image on the val side (floor(0.8*1) = 0).
    const auto [train, val] = train_val_split(index, 0.8, 1, false);
    CHECK(train.per_category.count("lonely") == 0);
    CHECK(val.per_category.at("lonely").size() == 1);
  }
}

TEST_CASE("dataset statistics") {
  SUBCASE("empty index -> all zeros") {
    const Stats s = dataset_stats(DatasetIndex{});
    CHECK(s.categories == 0);
    CHECK(s.images == 0);
    CHECK(s.boxes == 0);
    CHECK(s.min_per_category == 0);
    CHECK(s.max_per_category == 0);
    CHECK(s.median_per_category == 0.0);
  }
  SUBCASE("3 images of 1 category, 2 boxes each -> (1, 3, 6)") {
    std::vector<ImageRecord> recs;
    for (int i = 1; i <= 3; ++i) {
      ImageRecord r;
      r.image_id = std::to_string(i);
      r.width = r.height = 32;
      r.dominant_category = "a";
      r.boxes = {BBox{1, 1, 4, 4}, BBox{10, 10, 14, 14}};
      recs.push_back(r);
    }
    const Stats s = dataset_stats(fixtures::make_index(recs));
    CHECK(s.categories == 1);
    CHECK(s.images == 3);
    CHECK(s.boxes == 6);
    CHECK(s.min_per_category == 3);
    CHECK(s.max_per_category == 3);
    CHECK(s.median_per_category == 3.0);
  }
  SUBCASE("even category count averages the middle pair") {
    std::vector<ImageRecord> recs;
    int id = 1;
    auto add = [&](const std::string& cat, int n) {
      for (int i = 0; i < n; ++i) {
        ImageRecord r;
        r.image_id = std::to_string(id++);
        r.width = r.height = 32;
        r.dominant_category = cat;
        r.boxes = {BBox{1, 1, 4, 4}};
        recs.push_back(r);
      }
    };
    add("a", 2);
    add("b", 4);
    const Stats s = dataset_stats(fixtures::make_index(recs));
    CHECK(s.min_per_category == 2);
    CHECK(s.max_per_category == 4);
    CHECK(s.median_per_category == 3.0);
  }
  SUBCASE("corpus-scale header totals: 821 categories, 22679 images") {
    // 512 categories x 28 images + 309 x 27 = 22,679; no pixel data involved.
    std::vector<ImageRecord> recs;
    recs.reserve(22679);
    long id = 1;
    for (int c = 0; c < 821; ++c) {
      const int n = c < 512 ? 28 : 27;
      const std::string cat = "cat " + std::to_string(c);
      for (int i = 0; i < n; ++i) {
        ImageRecord r;
        r.image_id = std::to_string(id++);
        r.width = r.height = 32;
        r.dominant_category = cat;
        r.boxes = {BBox{1, 1, 4, 4}};
        recs.push_back(std::move(r));
      }
    }
    const Stats s = dataset_stats(fixtures::make_index(recs));
    CHECK(s.categories == 821);
    CHECK(s.images == 22679);
    CHECK(s.boxes == 22679);
    CHECK(s.min_per_category == 27);
    CHECK(s.max_per_category == 28);
    CHECK(s.median_per_category == 28.0);
  }
  SUBCASE("stats serialize with the documented keys") {
    Stats s;
    s.categories = 4;
    s.images = 48;
    s.boxes = 61;
    s.min_per_category = 12;
    s.max_per_category = 12;
    s.median_per_category = 12.0;
    const std::string text = stats_to_json_text(s);
    const json j = json::parse(text);
    CHECK(j.at("categories") == 4);
    CHECK(j.at("images") == 48);
    CHECK(j.at("boxes") == 61);
    CHECK(j.at("min_images_per_category") == 12);
    CHECK(j.at("median_images_per_category") == 12.0);
    CHECK(j.at("max_images_per_category") == 12);
  }
}

TEST_CASE("ppm image round-trip") {
  const auto dir = fixtures::tmp_dir("datakit_ppm");
  Image img;
  img.width = 3;
  img.height = 2;
  img.rgb.resize(18);
  for (std::size_t i = 0; i < img.rgb.size(); ++i) {
    img.rgb[i] = static_cast<std::uint8_t>(13 * i + 5);
  }
  const auto path = dir / "img.ppm";
  save_ppm(img, path);
  const Image back = load_ppm(path);
  CHECK(back.width == img.width);
  CHECK(back.height == img.height);
  CHECK(back.rgb == img.rgb);

  SUBCASE("corrupt header rejected") {
    write_file(dir / "bad.ppm", "P3\n2 2\n255\nnot binary");
    CHECK_THROWS_WITH_AS(load_ppm(dir / "bad.ppm"), doctest::Contains("unsupported"),
                         std::runtime_error);
  }
  SUBCASE("truncated payload rejected") {
    write_file(dir / "short.ppm", "P6\n4 4\n255\nxyz");
    CHECK_THROWS_WITH_AS(load_ppm(dir / "short.ppm"), doctest::Contains("truncated"),
                         std::runtime_error);
  }
}

TEST_SUITE_END();
