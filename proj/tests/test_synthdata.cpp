#include <algorithm>
#include <filesystem>
#include <fstream>
#include <nlohmann/json.hpp>
#include <set>

#include "doctest.h"
#include "patronus/errors.hpp"
#include "patronus/synthdata.hpp"

using namespace patronus;
namespace fs = std::filesystem;

namespace {

DataConfig small_config() {
  DataConfig c;
  c.image_size = 16;
  c.n_per_class = 40;
  c.seed = 11;
  return c;
}

}  // namespace

TEST_CASE("benign generation: shapes, range, labels") {
  DataConfig c = small_config();
  ImageBatch b = gen_benign(c);
  CHECK(b.size() == c.n_benign_classes * c.n_per_class);
  REQUIRE(b.pixels.shape == std::vector<int>{b.size(), 3, 16, 16});
  CHECK(b.unsafe_id == c.unsafe_id());
  CHECK(b.all_benign());
  std::set<int> seen;
  for (int l : b.labels) {
    CHECK(l >= 0);
    CHECK(l < c.n_benign_classes);
    seen.insert(l);
  }
  CHECK(static_cast<int>(seen.size()) == c.n_benign_classes);
  for (double x : b.pixels.v) {
    CHECK(x >= 0.0);
    CHECK(x <= 1.0);
  }
}

TEST_CASE("unsafe generation: labels and per-family distinctness") {
  DataConfig c = small_config();
  ImageBatch u = gen_unsafe(c);
  CHECK(u.size() == c.n_per_class);
  CHECK(u.all_unsafe());
  CHECK_FALSE(u.all_benign());
  for (double x : u.pixels.v) {
    CHECK(x >= 0.0);
    CHECK(x <= 1.0);
  }
  // the three texture families must all be valid and mutually different
  c.unsafe_family = UnsafeFamily::stripes;
  ImageBatch s = gen_unsafe(c);
  c.unsafe_family = UnsafeFamily::glyph;
  ImageBatch g = gen_unsafe(c);
  CHECK(u.pixels.v != s.pixels.v);
  CHECK(s.pixels.v != g.pixels.v);
}

TEST_CASE("generation is a pure function of the config") {
  DataConfig c = small_config();
  ImageBatch a = gen_benign(c);
  ImageBatch b = gen_benign(c);
  CHECK(a.pixels.v == b.pixels.v);
  CHECK(a.labels == b.labels);
  c.seed = 12;
  ImageBatch d = gen_benign(c);
  CHECK(a.pixels.v != d.pixels.v);
}

TEST_CASE("config validation rejects bad fields") {
  DataConfig c = small_config();
  c.image_size = 24;  // not a power of two
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c = small_config();
  c.image_size = 4;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c = small_config();
  c.n_per_class = 8;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c = small_config();
  c.noise_std = -0.1;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c = small_config();
  c.n_benign_classes = 0;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  CHECK_NOTHROW(small_config().validate());
}

TEST_CASE("split: floor sizes, disjoint cover, determinism") {
  DataConfig c = small_config();
  ImageBatch b = gen_benign(c);
  SplitSpec spec;
  spec.seed = 3;
  auto parts = split(b, spec);
  REQUIRE(parts.size() == 3);
  const int n = b.size();
  CHECK(parts[0].size() == static_cast<int>(n * spec.tune));
  CHECK(parts[1].size() == static_cast<int>(n * spec.eval));
  CHECK(parts[0].size() + parts[1].size() + parts[2].size() == n);

  // every source row lands in exactly one part
  auto row_key = [&](const ImageBatch& p, int i) {
    Tensor t = p.item(i);
    double s = 0.0;
    for (size_t j = 0; j < t.v.size(); ++j) s += t.v[j] * static_cast<double>(j + 1);
    return s;
  };
  std::multiset<double> src, dst;
  for (int i = 0; i < n; ++i) src.insert(row_key(b, i));
  for (const auto& p : parts)
    for (int i = 0; i < p.size(); ++i) dst.insert(row_key(p, i));
  CHECK(src == dst);

  auto parts2 = split(b, spec);
  CHECK(parts[0].pixels.v == parts2[0].pixels.v);
  spec.seed = 4;
  auto parts3 = split(b, spec);
  CHECK(parts[0].pixels.v != parts3[0].pixels.v);
}

TEST_CASE("split spec validation") {
  SplitSpec bad;
  bad.tune = 0.999;
  bad.eval = 0.0005;
  bad.test = 0.0005;
  ImageBatch b = gen_benign(small_config());
  CHECK_THROWS_AS(split(b, bad), ConfigError);  // empty eval/test split
  SplitSpec sum;
  sum.tune = 0.5;
  sum.eval = 0.5;
  sum.test = 0.5;
  CHECK_THROWS_AS(sum.validate(), ConfigError);
}

TEST_CASE("concat and select preserve rows and labels") {
  DataConfig c = small_config();
  ImageBatch b = gen_benign(c);
  ImageBatch u = gen_unsafe(c);
  ImageBatch all = concat(b, u);
  CHECK(all.size() == b.size() + u.size());
  CHECK(all.labels[0] == b.labels[0]);
  CHECK(all.is_unsafe(all.size() - 1));

  ImageBatch sel = all.select({0, all.size() - 1});
  REQUIRE(sel.size() == 2);
  CHECK(sel.labels[0] == all.labels[0]);
  CHECK(sel.labels[1] == all.unsafe_id);
  CHECK(sel.item(0).v == all.item(0).v);
  CHECK(sel.item(1).v == all.item(all.size() - 1).v);
}

TEST_CASE("dump_dataset writes one BMP per image plus a manifest") {
  DataConfig c = small_config();
  c.n_per_class = 32;
  ImageBatch u = gen_unsafe(c);
  const fs::path dir = fs::temp_directory_path() / "synthdump";
  fs::remove_all(dir);
  dump_dataset(u, c.seed, dir.string());

  std::ifstream mf(dir / "manifest.json");
  REQUIRE(mf.good());
  nlohmann::json m = nlohmann::json::parse(mf);
  REQUIRE(m.is_array());
  REQUIRE(m.size() == static_cast<size_t>(u.size()));
  for (const auto& e : m) {
    CHECK(fs::exists(dir / e.at("filename").get<std::string>()));
    CHECK(e.at("label").get<int>() == u.unsafe_id);
    CHECK(e.at("unsafe").get<bool>());
    CHECK(e.at("seed").get<uint64_t>() == c.seed);
  }
  fs::remove_all(dir);
}
