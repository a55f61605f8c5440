#include <cstdio>
#include <filesystem>
#include <fstream>
#include <limits>

#include "doctest.h"
#include "patronus/checkpoint.hpp"
#include "patronus/errors.hpp"
#include "patronus/rng.hpp"

using namespace patronus;
namespace fs = std::filesystem;

namespace {

std::string tmp_path(const char* name) {
  return (fs::temp_directory_path() / name).string();
}

Checkpoint sample_checkpoint() {
  Checkpoint c;
  c.meta = {NetworkKind::decoder, "moderated", 42, 1200};
  Rng rng(9);
  Tensor w = Tensor::randn({2, 3, 3, 3}, rng);
  // float32-representable values so the roundtrip is bit-exact
  for (auto& x : w.v) x = static_cast<double>(static_cast<float>(x));
  c.params.add("conv.w", w, true);
  Tensor b({2});
  b[0] = 0.5;
  b[1] = -1.25;
  c.params.add("conv.b", b, false);
  return c;
}

}  // namespace

TEST_CASE("checkpoint roundtrip preserves meta, values and trainable flags") {
  const std::string path = tmp_path("ptrn_roundtrip.ptrn");
  Checkpoint c = sample_checkpoint();
  save_checkpoint(c, path);
  Checkpoint r = load_checkpoint(path);

  CHECK(r.meta.kind == NetworkKind::decoder);
  CHECK(r.meta.stage == "moderated");
  CHECK(r.meta.seed == 42);
  CHECK(r.meta.iteration == 1200);
  REQUIRE(r.params.entries.size() == 2);
  CHECK(r.params.entries[0].name == "conv.w");
  CHECK(r.params.entries[0].trainable);
  CHECK_FALSE(r.params.entries[1].trainable);
  CHECK(same_values(c.params, r.params));
  CHECK(c.params.content_hash() == r.params.content_hash());
  fs::remove(path);
}

TEST_CASE("save narrows to float32; reload of a reload is bit-stable") {
  const std::string path = tmp_path("ptrn_narrow.ptrn");
  Checkpoint c;
  c.meta.kind = NetworkKind::probe;
  Tensor t({1});
  t[0] = 0.1;  // not float32-representable
  c.params.add("x", t, true);
  save_checkpoint(c, path);
  Checkpoint r1 = load_checkpoint(path);
  CHECK(r1.params[0][0] == doctest::Approx(0.1).epsilon(1e-7));
  CHECK(r1.params[0][0] != 0.1);
  save_checkpoint(r1, path);
  Checkpoint r2 = load_checkpoint(path);
  CHECK(r1.params[0][0] == r2.params[0][0]);
  fs::remove(path);
}

TEST_CASE("malformed files raise format errors") {
  const std::string path = tmp_path("ptrn_bad.ptrn");
  Checkpoint c = sample_checkpoint();
  save_checkpoint(c, path);

  SUBCASE("bad magic") {
    std::fstream f(path, std::ios::in | std::ios::out | std::ios::binary);
    f.write("XXXX", 4);
    f.close();
    CHECK_THROWS_AS(load_checkpoint(path), FormatError);
  }
  SUBCASE("bad version") {
    std::fstream f(path, std::ios::in | std::ios::out | std::ios::binary);
    f.seekp(4);
    const char v = 99;
    f.write(&v, 1);
    f.close();
    CHECK_THROWS_AS(load_checkpoint(path), FormatError);
  }
  SUBCASE("truncated") {
    const auto n = fs::file_size(path);
    fs::resize_file(path, n - 7);
    CHECK_THROWS_AS(load_checkpoint(path), FormatError);
  }
  SUBCASE("missing file") { CHECK_THROWS(load_checkpoint(tmp_path("nope.ptrn"))); }
  fs::remove(path);
}

TEST_CASE("non-finite values are rejected on load") {
  const std::string path = tmp_path("ptrn_inf.ptrn");
  Checkpoint c;
  Tensor t({1});
  t[0] = std::numeric_limits<double>::infinity();
  c.params.add("x", t, true);
  save_checkpoint(c, path);
  CHECK_THROWS_AS(load_checkpoint(path), FormatError);
  fs::remove(path);
}

TEST_CASE("network kind string roundtrip; unknown kind rejected") {
  for (auto k : {NetworkKind::encoder, NetworkKind::decoder, NetworkKind::denoiser,
                 NetworkKind::perceptual, NetworkKind::probe})
    CHECK(network_kind_from_string(to_string(k)) == k);
  CHECK_THROWS_AS(network_kind_from_string("resnet"), FormatError);
}
