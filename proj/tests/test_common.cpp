#include <algorithm>
#include <cmath>
#include <filesystem>
#include <set>
#include <vector>

#include "doctest.h"
#include "fixtures.hpp"
#include "ovdet/common.hpp"

using namespace ovdet;

TEST_SUITE_BEGIN("common");

TEST_CASE("rng streams are reproducible and state round-trips") {
  Rng a(42), b(42);
  for (int i = 0; i < 100; ++i) CHECK(a.raw() == b.raw());

  // Serialize mid-stream (including the Box-Muller spare) and resume.
  Rng c(7);
  (void)c.normal();  // leaves a spare cached
  const std::string snap = c.state();
  std::vector<double> direct;
  for (int i = 0; i < 10; ++i) direct.push_back(c.normal());
  Rng d(999);
  d.set_state(snap);
  for (int i = 0; i < 10; ++i) CHECK(d.normal() == direct[static_cast<std::size_t>(i)]);
}

TEST_CASE("uniform and below stay in range") {
  Rng rng(1);
  for (int i = 0; i < 1000; ++i) {
    const double u = rng.uniform();
    CHECK(u >= 0.0);
    CHECK(u < 1.0);
  }
  std::set<std::uint64_t> hits;
  for (int i = 0; i < 1000; ++i) {
    const std::uint64_t v = rng.below(7);
    CHECK(v < 7);
    hits.insert(v);
  }
  CHECK(hits.size() == 7);  // all residues reached over 1000 draws
  CHECK_THROWS_AS((void)rng.below(0), std::invalid_argument);
}

TEST_CASE("range is inclusive on both ends") {
  Rng rng(3);
  bool lo_hit = false, hi_hit = false;
  for (int i = 0; i < 2000; ++i) {
    const int v = rng.range(-2, 2);
    CHECK(v >= -2);
    CHECK(v <= 2);
    lo_hit |= (v == -2);
    hi_hit |= (v == 2);
  }
  CHECK(lo_hit);
  CHECK(hi_hit);
  CHECK(rng.range(5, 5) == 5);
  CHECK_THROWS_AS((void)rng.range(2, 1), std::invalid_argument);
}

TEST_CASE("normal draws have roughly standard moments") {
  Rng rng(11);
  const int n = 20000;
  double sum = 0, sq = 0;
  for (int i = 0; i < n; ++i) {
    const double x = rng.normal();
    sum += x;
    sq += x * x;
  }
  const double mean = sum / n;
  const double var = sq / n - mean * mean;
  CHECK(std::abs(mean) < 0.05);
  CHECK(std::abs(var - 1.0) < 0.05);
}

TEST_CASE("shuffle is a seeded permutation") {
  std::vector<int> v{0, 1, 2, 3, 4, 5, 6, 7, 8, 9};
  std::vector<int> w = v;
  Rng a(5), b(5);
  a.shuffle(v);
  b.shuffle(w);
  CHECK(v == w);
  std::vector<int> sorted = v;
  std::sort(sorted.begin(), sorted.end());
  CHECK(sorted == std::vector<int>{0, 1, 2, 3, 4, 5, 6, 7, 8, 9});
}

TEST_CASE("unit vectors have unit norm") {
  Rng rng(9);
  for (int d : {8, 16, 64}) {
    const Eigen::VectorXd v = rng.unit_vector(d);
    CHECK(v.size() == d);
    CHECK(std::abs(v.norm() - 1.0) < 1e-6);
  }
}

TEST_CASE("hash64 and mix_seed are stable and discriminating") {
  CHECK(hash64("abc") == hash64("abc"));
  CHECK(hash64("abc") != hash64("abd"));
  CHECK(hash64("") != hash64("a"));
  CHECK(mix_seed(1, 2) == mix_seed(1, 2));
  CHECK(mix_seed(1, 2) != mix_seed(2, 1));
  CHECK(mix_seed(0, 0) != 0);  // splitmix-style finalizer avalanches zero
}

TEST_CASE("sha256_hex matches published test vectors") {
  // FIPS 180-2 appendix values.
  CHECK(sha256_hex("") ==
        "e3b0c44298fc1c149afbf4c8996fb92427ae41e4649b934ca495991b7852b855");
  CHECK(sha256_hex("abc") ==
        "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad");
}

TEST_CASE("file helpers round-trip and atomic writes replace in place") {
  const auto dir = fixtures::tmp_dir("common_files");
  const auto p = dir / "a.txt";
  write_file(p, "hello\n");
  CHECK(read_file(p) == "hello\n");
  atomic_write_file(p, "replaced");
  CHECK(read_file(p) == "replaced");
  // The temp file used for the swap does not linger.
  std::size_t entries = 0;
  for (const auto& e : std::filesystem::directory_iterator(dir)) {
    (void)e;
    ++entries;
  }
  CHECK(entries == 1);
  CHECK_THROWS(read_file(dir / "missing.txt"));
}

TEST_CASE("lowercase folds ASCII") {
  CHECK(lowercase("AbC dEf") == "abc def");
  CHECK(lowercase("already") == "already");
}

TEST_SUITE_END();
