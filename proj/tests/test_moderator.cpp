#include <filesystem>
#include <fstream>
#include <sstream>

#include "doctest.h"
#include "patronus/errors.hpp"
#include "patronus/moderator.hpp"
#include "patronus/rng.hpp"

using namespace patronus;
namespace fs = std::filesystem;

namespace {

constexpr int kS = 8, kC = 3, kClasses = 3;  // 2 benign + unsafe

ImageBatch make_batch(int n, bool unsafe, uint64_t seed) {
  ImageBatch b;
  Rng rng(seed);
  b.pixels = Tensor({n, kC, kS, kS});
  for (auto& v : b.pixels.v) v = rng.uniform();
  b.unsafe_id = kClasses - 1;
  b.labels.assign(static_cast<size_t>(n), unsafe ? b.unsafe_id : 0);
  return b;
}

struct Fixture {
  ParamTree dec0, enc_t, den_t, per_t;
  DiffusionSchedule sched = DiffusionSchedule::linear();
  ImageBatch benign = make_batch(12, false, 1);
  ImageBatch unsafe_data = make_batch(12, true, 2);
  Fixture()
      : dec0(Decoder::init(kS, kC, 41)),
        enc_t(Encoder::init(kS, kC, 42)),
        den_t(Denoiser::init(kS / 4, kClasses, 43)),
        per_t(Perceptual::init(kS, kC)) {}
};

ModeratorConfig tiny_config() {
  ModeratorConfig c;
  c.n1 = 25;
  c.batch = 4;
  c.feature_refresh = 10;
  c.feature_set_size = 6;
  c.seed = 5;
  return c;
}

}  // namespace

TEST_CASE("config validation") {
  ModeratorConfig c = tiny_config();
  CHECK_NOTHROW(c.validate());
  c.n1 = -1;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c = tiny_config();
  c.lr_alpha1 = 0.0;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c = tiny_config();
  c.batch = 0;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c = tiny_config();
  c.feature_refresh = 0;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c = tiny_config();
  c.weights.alpha = -1.0;
  CHECK_THROWS_AS(c.validate(), ContractError);
}

TEST_CASE("feature sets: shapes, conditioning, determinism") {
  Fixture fx;
  Denoiser den(fx.den_t, kS / 4, kClasses);
  Tensor fu, fn, fu2, fn2;
  build_feature_sets(den, fx.den_t, fx.sched, kClasses - 1, 5, 9, &fu, &fn);
  build_feature_sets(den, fx.den_t, fx.sched, kClasses - 1, 5, 9, &fu2, &fn2);
  CHECK(fu.shape == std::vector<int>{5, 4, kS / 4, kS / 4});
  CHECK(fn.shape == fu.shape);
  CHECK(fu.v == fu2.v);
  CHECK(fn.v == fn2.v);
  CHECK(fu.v != fn.v);  // different conditioning and seed stream
  build_feature_sets(den, fx.den_t, fx.sched, kClasses - 1, 5, 10, &fu2, &fn2);
  CHECK(fu.v != fu2.v);
}

TEST_CASE("zero iterations returns the decoder unchanged") {
  Fixture fx;
  ModeratorConfig c = tiny_config();
  c.n1 = 0;
  ParamTree out = train_moderator(fx.dec0, fx.enc_t, fx.den_t, fx.per_t, fx.benign,
                                  fx.unsafe_data, fx.sched, kS, kC, c);
  CHECK(out.content_hash() == fx.dec0.content_hash());
}

TEST_CASE("training mutates the decoder deterministically and leaves inputs frozen") {
  Fixture fx;
  const uint64_t h_dec0 = fx.dec0.content_hash();
  const uint64_t h_enc = fx.enc_t.content_hash();
  const uint64_t h_den = fx.den_t.content_hash();
  ModeratorConfig c = tiny_config();
  ParamTree a = train_moderator(fx.dec0, fx.enc_t, fx.den_t, fx.per_t, fx.benign, fx.unsafe_data,
                                fx.sched, kS, kC, c);
  ParamTree b = train_moderator(fx.dec0, fx.enc_t, fx.den_t, fx.per_t, fx.benign, fx.unsafe_data,
                                fx.sched, kS, kC, c);
  CHECK(a.content_hash() == b.content_hash());
  CHECK(a.content_hash() != h_dec0);
  CHECK(fx.dec0.content_hash() == h_dec0);
  CHECK(fx.enc_t.content_hash() == h_enc);
  CHECK(fx.den_t.content_hash() == h_den);
  c.seed = 6;
  ParamTree d = train_moderator(fx.dec0, fx.enc_t, fx.den_t, fx.per_t, fx.benign, fx.unsafe_data,
                                fx.sched, kS, kC, c);
  CHECK(a.content_hash() != d.content_hash());
}

TEST_CASE("log cadence: every 20 iterations plus the final one") {
  Fixture fx;
  ModeratorConfig c = tiny_config();
  c.n1 = 45;
  std::vector<ModeratorLogRow> log;
  train_moderator(fx.dec0, fx.enc_t, fx.den_t, fx.per_t, fx.benign, fx.unsafe_data, fx.sched, kS,
                  kC, c, &log);
  REQUIRE(log.size() == 4);  // 0, 20, 40, 44
  CHECK(log[0].iteration == 0);
  CHECK(log[1].iteration == 20);
  CHECK(log[2].iteration == 40);
  CHECK(log[3].iteration == 44);
  for (const auto& r : log) {
    CHECK(std::isfinite(r.l_cd));
    CHECK(std::isfinite(r.l_fc));
    CHECK(r.benign_mse >= 0.0);
  }
}

TEST_CASE("log CSV has the documented header and one row per entry") {
  std::vector<ModeratorLogRow> log = {{0, 1.0, 2.0, 0.5, 0.25}, {20, 0.5, 1.0, 0.75, 0.125}};
  const fs::path path = fs::temp_directory_path() / "moderator_log.csv";
  write_moderator_log(log, path.string());
  std::ifstream is(path);
  std::string line;
  std::getline(is, line);
  CHECK(line == "iteration,L_cd,L_fc,unsafe_rate,benign_mse");
  int rows = 0;
  while (std::getline(is, line))
    if (!line.empty()) ++rows;
  CHECK(rows == 2);
  fs::remove(path);
}
