#include "patronus/pipeline.hpp"

#include <chrono>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

#include <nlohmann/json.hpp>

#include "patronus/errors.hpp"
#include "patronus/evalkit.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace patronus {

const char* to_string(Stage s) {
  switch (s) {
    case Stage::gen_data: return "gen-data";
    case Stage::pretrain: return "pretrain";
    case Stage::moderate: return "moderate";
    case Stage::align: return "align";
    case Stage::harden: return "harden";
    case Stage::attack: return "attack";
    case Stage::evaluate: return "evaluate";
    case Stage::report: return "report";
  }
  return "?";
}

Stage stage_from_string(const std::string& s) {
  for (Stage st : {Stage::gen_data, Stage::pretrain, Stage::moderate, Stage::align, Stage::harden,
                   Stage::attack, Stage::evaluate, Stage::report})
    if (s == to_string(st)) return st;
  throw ConfigError("unknown stage: " + s);
}

void RunConfig::validate() const {
  if (run_id.empty()) throw ConfigError("run_id must be nonempty");
  if (out_dir.empty()) throw ConfigError("out_dir must be nonempty");
  data.validate();
  split_spec.validate();
  moderator.validate();
  if (align_iters < 0) throw ConfigError("align_iters must be >= 0");
  if (!(align_lr > 0.0)) throw ConfigError("align_lr must be > 0");
  nft_decoder.validate();
  nft_diffusion.validate();
  attack_base.validate();
  if (attack_pool_size < attack_base.finetune_size)
    throw ConfigError("attack_pool_size smaller than attack finetune_size");
  if (eval_seeds < 1 || eval_samples < 1) throw ConfigError("eval settings must be >= 1");
}

void RunConfig::resolve_seeds() {
  data.seed = derive_seed(seed, "data");
  split_spec.seed = derive_seed(seed, "split");
  pretrain.seed = derive_seed(seed, "pretrain");
  moderator.seed = derive_seed(seed, "moderate");
  nft_decoder.seed = derive_seed(seed, "harden_decoder");
  nft_diffusion.seed = derive_seed(seed, "harden_diffusion");
  attack_base.seed = derive_seed(seed, "attack");
}

namespace {

json config_to_json(const RunConfig& c) {
  json j;
  j["run_id"] = c.run_id;
  j["out_dir"] = c.out_dir;
  j["seed"] = c.seed;
  j["data"] = {{"image_size", c.data.image_size},
               {"channels", c.data.channels},
               {"n_benign_classes", c.data.n_benign_classes},
               {"n_per_class", c.data.n_per_class},
               {"unsafe_family", to_string(c.data.unsafe_family)},
               {"noise_std", c.data.noise_std}};
  j["split"] = {{"tune", c.split_spec.tune}, {"eval", c.split_spec.eval},
                {"test", c.split_spec.test}};
  j["pretrain"] = {{"ae_iters", c.pretrain.ae_iters},     {"ae_lr", c.pretrain.ae_lr},
                   {"diff_iters", c.pretrain.diff_iters}, {"diff_lr", c.pretrain.diff_lr},
                   {"probe_iters", c.pretrain.probe_iters}, {"probe_lr", c.pretrain.probe_lr},
                   {"batch", c.pretrain.batch},           {"latent_l2", c.pretrain.latent_l2}};
  j["moderator"] = {{"n1", c.moderator.n1},
                    {"lr_alpha1", c.moderator.lr_alpha1},
                    {"batch", c.moderator.batch},
                    {"alpha", c.moderator.weights.alpha},
                    {"beta", c.moderator.weights.beta},
                    {"feature_refresh", c.moderator.feature_refresh},
                    {"feature_set_size", c.moderator.feature_set_size}};
  j["align"] = {{"iters", c.align_iters}, {"lr", c.align_lr}};
  auto nft = [](const NftConfig& n) {
    return json{{"n2", n.n2},
                {"lr_alpha2", n.lr_alpha2},
                {"eval_batch", n.eval_batch},
                {"bpp_batch", n.bpp_batch},
                {"feature_set_size", n.feature_set_size},
                {"bag",
                 {{"lrs", n.bag.lrs}, {"batches", n.bag.batches}, {"K", n.bag.K}}}};
  };
  j["nft_decoder"] = nft(c.nft_decoder);
  j["nft_diffusion"] = nft(c.nft_diffusion);
  j["attack"] = {{"optimizer", to_string(c.attack_base.optimizer)},
                 {"lr", c.attack_base.lr},
                 {"batch", c.attack_base.batch},
                 {"finetune_size", c.attack_base.finetune_size},
                 {"max_iters", c.attack_base.max_iters},
                 {"eval_every", c.attack_base.eval_every},
                 {"eval_samples", c.attack_base.eval_samples},
                 {"compromise_threshold", c.attack_base.compromise_threshold},
                 {"pool_size", c.attack_pool_size}};
  j["eval"] = {{"seeds", c.eval_seeds}, {"samples", c.eval_samples}};
  return j;
}

template <class T>
void read_field(const json& j, const char* section, const char* key, T* out) {
  if (!j.contains(key)) return;
  try {
    *out = j.at(key).get<T>();
  } catch (const json::exception&) {
    throw ConfigError(std::string("config field ") + section + "." + key + ": wrong type");
  }
}

void config_from_json(const json& j, RunConfig* c) {
  read_field(j, "", "run_id", &c->run_id);
  read_field(j, "", "out_dir", &c->out_dir);
  read_field(j, "", "seed", &c->seed);
  if (j.contains("data")) {
    const json& d = j.at("data");
    read_field(d, "data", "image_size", &c->data.image_size);
    read_field(d, "data", "channels", &c->data.channels);
    read_field(d, "data", "n_benign_classes", &c->data.n_benign_classes);
    read_field(d, "data", "n_per_class", &c->data.n_per_class);
    read_field(d, "data", "noise_std", &c->data.noise_std);
    if (d.contains("unsafe_family"))
      c->data.unsafe_family = unsafe_family_from_string(d.at("unsafe_family").get<std::string>());
  }
  if (j.contains("split")) {
    const json& s = j.at("split");
    read_field(s, "split", "tune", &c->split_spec.tune);
    read_field(s, "split", "eval", &c->split_spec.eval);
    read_field(s, "split", "test", &c->split_spec.test);
  }
  if (j.contains("pretrain")) {
    const json& p = j.at("pretrain");
    read_field(p, "pretrain", "ae_iters", &c->pretrain.ae_iters);
    read_field(p, "pretrain", "ae_lr", &c->pretrain.ae_lr);
    read_field(p, "pretrain", "diff_iters", &c->pretrain.diff_iters);
    read_field(p, "pretrain", "diff_lr", &c->pretrain.diff_lr);
    read_field(p, "pretrain", "probe_iters", &c->pretrain.probe_iters);
    read_field(p, "pretrain", "probe_lr", &c->pretrain.probe_lr);
    read_field(p, "pretrain", "batch", &c->pretrain.batch);
    read_field(p, "pretrain", "latent_l2", &c->pretrain.latent_l2);
  }
  if (j.contains("moderator")) {
    const json& m = j.at("moderator");
    read_field(m, "moderator", "n1", &c->moderator.n1);
    read_field(m, "moderator", "lr_alpha1", &c->moderator.lr_alpha1);
    read_field(m, "moderator", "batch", &c->moderator.batch);
    read_field(m, "moderator", "alpha", &c->moderator.weights.alpha);
    read_field(m, "moderator", "beta", &c->moderator.weights.beta);
    read_field(m, "moderator", "feature_refresh", &c->moderator.feature_refresh);
    read_field(m, "moderator", "feature_set_size", &c->moderator.feature_set_size);
  }
  if (j.contains("align")) {
    read_field(j.at("align"), "align", "iters", &c->align_iters);
    read_field(j.at("align"), "align", "lr", &c->align_lr);
  }
  auto read_nft = [&](const char* key, NftConfig* n) {
    if (!j.contains(key)) return;
    const json& v = j.at(key);
    read_field(v, key, "n2", &n->n2);
    read_field(v, key, "lr_alpha2", &n->lr_alpha2);
    read_field(v, key, "eval_batch", &n->eval_batch);
    read_field(v, key, "bpp_batch", &n->bpp_batch);
    read_field(v, key, "feature_set_size", &n->feature_set_size);
    if (v.contains("bag")) {
      const json& b = v.at("bag");
      read_field(b, key, "lrs", &n->bag.lrs);
      read_field(b, key, "batches", &n->bag.batches);
      read_field(b, key, "K", &n->bag.K);
    }
  };
  read_nft("nft_decoder", &c->nft_decoder);
  read_nft("nft_diffusion", &c->nft_diffusion);
  if (j.contains("attack")) {
    const json& a = j.at("attack");
    if (a.contains("optimizer"))
      c->attack_base.optimizer = opt_kind_from_string(a.at("optimizer").get<std::string>());
    read_field(a, "attack", "lr", &c->attack_base.lr);
    read_field(a, "attack", "batch", &c->attack_base.batch);
    read_field(a, "attack", "finetune_size", &c->attack_base.finetune_size);
    read_field(a, "attack", "max_iters", &c->attack_base.max_iters);
    read_field(a, "attack", "eval_every", &c->attack_base.eval_every);
    read_field(a, "attack", "eval_samples", &c->attack_base.eval_samples);
    read_field(a, "attack", "compromise_threshold", &c->attack_base.compromise_threshold);
    read_field(a, "attack", "pool_size", &c->attack_pool_size);
  }
  if (j.contains("eval")) {
    read_field(j.at("eval"), "eval", "seeds", &c->eval_seeds);
    read_field(j.at("eval"), "eval", "samples", &c->eval_samples);
  }
}

}  // namespace

uint64_t RunConfig::config_hash() const {
  const std::string s = config_to_json(*this).dump();
  uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

RunConfig default_run_config() {
  RunConfig c;
  c.nft_decoder.target = NftTarget::decoder;
  c.nft_diffusion.target = NftTarget::diffusion;
  c.resolve_seeds();
  return c;
}

RunConfig load_run_config(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw IoError("cannot read config " + path);
  json j;
  try {
    is >> j;
  } catch (const json::parse_error& e) {
    throw ConfigError(path + ": " + e.what());
  }
  RunConfig c = default_run_config();
  config_from_json(j, &c);
  if (const char* env = std::getenv("PATRONUS_OUT"); env && *env) c.out_dir = env;
  c.validate();
  c.resolve_seeds();
  return c;
}

uint64_t file_hash(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot hash " + path);
  uint64_t h = 0xcbf29ce484222325ULL;
  char buf[1 << 16];
  while (is.read(buf, sizeof(buf)) || is.gcount() > 0)
    for (std::streamsize i = 0; i < is.gcount(); ++i) {
      h ^= static_cast<unsigned char>(buf[i]);
      h *= 0x100000001b3ULL;
    }
  return h;
}

namespace {

std::string manifest_path(const RunConfig& cfg) { return cfg.run_dir() + "/manifest.json"; }

json load_manifest(const RunConfig& cfg) {
  std::ifstream is(manifest_path(cfg));
  if (!is) return json{{"run_id", cfg.run_id}, {"stages", json::object()}};
  json j;
  try {
    is >> j;
  } catch (const json::parse_error& e) {
    throw FormatError(manifest_path(cfg) + ": " + e.what());
  }
  return j;
}

void save_manifest(const RunConfig& cfg, const json& m) {
  fs::create_directories(cfg.run_dir());
  std::ofstream os(manifest_path(cfg));
  if (!os) throw IoError("cannot write " + manifest_path(cfg));
  os << m.dump(2) << "\n";
}

bool stage_done(const json& manifest, Stage s, uint64_t config_hash) {
  const std::string key = to_string(s);
  if (!manifest.at("stages").contains(key)) return false;
  const json& e = manifest.at("stages").at(key);
  if (e.at("config_hash").get<uint64_t>() != config_hash) return false;
  for (const auto& [path, _] : e.at("outputs").items())
    if (!fs::exists(path)) return false;
  return true;
}

// stage dependencies (DAG edges)
std::vector<Stage> deps_of(Stage s) {
  switch (s) {
    case Stage::gen_data: return {};
    case Stage::pretrain: return {Stage::gen_data};
    case Stage::moderate: return {Stage::pretrain};
    case Stage::align: return {Stage::pretrain};
    case Stage::harden: return {Stage::moderate, Stage::align};
    case Stage::attack: return {Stage::harden};
    case Stage::evaluate: return {Stage::harden};
    case Stage::report: return {Stage::evaluate, Stage::attack};
  }
  return {};
}

struct Dataset {
  ImageBatch benign_tune, benign_eval, benign_test;
  ImageBatch unsafe_tune, unsafe_eval, unsafe_test;
};

Dataset make_dataset(const RunConfig& cfg) {
  ImageBatch benign = gen_benign(cfg.data);
  ImageBatch unsafe_data = gen_unsafe(cfg.data);
  SplitSpec sb = cfg.split_spec;
  sb.seed = derive_seed(cfg.split_spec.seed, "benign");
  SplitSpec su = cfg.split_spec;
  su.seed = derive_seed(cfg.split_spec.seed, "unsafe");
  auto b = split(benign, sb);
  auto u = split(unsafe_data, su);
  return {b[0], b[1], b[2], u[0], u[1], u[2]};
}

std::string ckpt(const RunConfig& cfg, const std::string& name) {
  return cfg.run_dir() + "/checkpoints/" + name + ".ptrn";
}

void save_net(const RunConfig& cfg, const std::string& name, NetworkKind kind,
              const std::string& stage, uint64_t iteration, const ParamTree& tree,
              json* outputs) {
  fs::create_directories(cfg.run_dir() + "/checkpoints");
  Checkpoint c{{kind, stage, cfg.seed, iteration}, tree};
  const std::string path = ckpt(cfg, name);
  save_checkpoint(c, path);
  (*outputs)[path] = file_hash(path);
}

ParamTree load_net(const RunConfig& cfg, const std::string& name, Stage produced_by) {
  const std::string path = ckpt(cfg, name);
  if (!fs::exists(path))
    throw DependencyError("missing checkpoint " + path + "; run stage '" +
                          to_string(produced_by) + "' first");
  return load_checkpoint(path).params;
}

// ---- stage bodies; each fills `outputs` (path -> content hash) ----

void stage_gen_data(const RunConfig& cfg, json* outputs) {
  Dataset d = make_dataset(cfg);
  const std::string dir = cfg.run_dir() + "/data";
  fs::create_directories(dir);
  ImageBatch all = concat(concat(d.benign_tune, d.benign_eval),
                          concat(d.benign_test, concat(concat(d.unsafe_tune, d.unsafe_eval),
                                                       d.unsafe_test)));
  dump_dataset(all, cfg.data.seed, dir);
  (*outputs)[dir + "/manifest.json"] = file_hash(dir + "/manifest.json");
}

void stage_pretrain(const RunConfig& cfg, json* outputs) {
  Dataset d = make_dataset(cfg);
  ImageBatch train = concat(d.benign_tune, d.unsafe_tune);
  ImageBatch held = concat(d.benign_eval, d.unsafe_eval);
  const int S = cfg.data.image_size, C = cfg.data.channels;
  const int n_classes = cfg.data.n_benign_classes + 1;
  DiffusionSchedule sched = DiffusionSchedule::linear();
  PretrainMetrics metrics;

  ParamTree enc_tree, dec_tree;
  pretrain_autoencoder(train, held, cfg.pretrain, S, C, &enc_tree, &dec_tree, &metrics);
  ParamTree den_tree;
  pretrain_diffusion(enc_tree, train, cfg.pretrain, S, C, n_classes, sched, &den_tree, &metrics);
  ParamTree probe_tree;
  train_probe(train, held, cfg.pretrain, S, C, n_classes, &probe_tree, &metrics, &enc_tree,
              &dec_tree);
  ParamTree perc_tree = Perceptual::init(S, C);

  // probe-side generation metrics for the undefended pipeline
  {
    Denoiser den(den_tree, S / 4, n_classes);
    Decoder dec(dec_tree, S, C);
    Probe probe(probe_tree, S, C, n_classes);
    const int n = cfg.eval_samples;
    std::vector<int> ids(static_cast<size_t>(n), cfg.data.unsafe_id());
    Tensor lat = sample_latents(den, den_tree, sched, ids, derive_seed(cfg.pretrain.seed, "mu"));
    metrics.unsafe_sample_rate = evalkit::unsafe_detection_rate(
        probe, probe_tree, dec.forward(dec_tree, lat), cfg.data.unsafe_id());
    std::vector<int> bids(static_cast<size_t>(n));
    for (int i = 0; i < n; ++i) bids[static_cast<size_t>(i)] = i % cfg.data.n_benign_classes;
    Tensor blat = sample_latents(den, den_tree, sched, bids, derive_seed(cfg.pretrain.seed, "mb"));
    const auto pred = probe.predict(probe_tree, dec.forward(dec_tree, blat));
    int ok = 0;
    for (int i = 0; i < n; ++i) ok += pred[static_cast<size_t>(i)] == bids[static_cast<size_t>(i)];
    metrics.benign_sample_acc = static_cast<double>(ok) / n;
  }

  save_net(cfg, "encoder", NetworkKind::encoder, "pretrain", cfg.pretrain.ae_iters, enc_tree,
           outputs);
  save_net(cfg, "decoder0", NetworkKind::decoder, "pretrain", cfg.pretrain.ae_iters, dec_tree,
           outputs);
  save_net(cfg, "denoiser0", NetworkKind::denoiser, "pretrain", cfg.pretrain.diff_iters, den_tree,
           outputs);
  save_net(cfg, "probe", NetworkKind::probe, "pretrain", cfg.pretrain.probe_iters, probe_tree,
           outputs);
  save_net(cfg, "perceptual", NetworkKind::perceptual, "pretrain", 0, perc_tree, outputs);

  fs::create_directories(cfg.run_dir() + "/logs");
  const std::string mpath = cfg.run_dir() + "/logs/pretrain_metrics.json";
  json m = {{"recon_mse", metrics.recon_mse},
            {"denoise_mse", metrics.denoise_mse},
            {"probe_accuracy", metrics.probe_accuracy},
            {"unsafe_sample_rate", metrics.unsafe_sample_rate},
            {"benign_sample_acc", metrics.benign_sample_acc},
            {"latent_mean", metrics.latent_mean},
            {"latent_std", metrics.latent_std}};
  std::ofstream os(mpath);
  os << m.dump(2) << "\n";
  (*outputs)[mpath] = file_hash(mpath);
}

void stage_moderate(const RunConfig& cfg, json* outputs) {
  Dataset d = make_dataset(cfg);
  ParamTree enc_tree = load_net(cfg, "encoder", Stage::pretrain);
  ParamTree dec0_tree = load_net(cfg, "decoder0", Stage::pretrain);
  ParamTree den_tree = load_net(cfg, "denoiser0", Stage::pretrain);
  ParamTree perc_tree = load_net(cfg, "perceptual", Stage::pretrain);
  ParamTree probe_tree = load_net(cfg, "probe", Stage::pretrain);

  std::vector<ModeratorLogRow> log;
  ParamTree dec_mod = train_moderator(dec0_tree, enc_tree, den_tree, perc_tree, d.benign_tune,
                                      d.unsafe_tune, DiffusionSchedule::linear(),
                                      cfg.data.image_size, cfg.data.channels, cfg.moderator, &log,
                                      &probe_tree);
  save_net(cfg, "decoder_moderated", NetworkKind::decoder, "moderated",
           static_cast<uint64_t>(cfg.moderator.n1), dec_mod, outputs);
  fs::create_directories(cfg.run_dir() + "/logs");
  const std::string lpath = cfg.run_dir() + "/logs/moderator.csv";
  write_moderator_log(log, lpath);
  (*outputs)[lpath] = file_hash(lpath);
}

void stage_align(const RunConfig& cfg, json* outputs) {
  Dataset d = make_dataset(cfg);
  ParamTree enc_tree = load_net(cfg, "encoder", Stage::pretrain);
  ParamTree den0_tree = load_net(cfg, "denoiser0", Stage::pretrain);
  ParamTree aligned = align_diffusion(den0_tree, d.unsafe_tune, d.benign_tune, enc_tree,
                                      DiffusionSchedule::linear(), cfg.data.image_size,
                                      cfg.data.channels, cfg.align_iters, cfg.align_lr,
                                      derive_seed(cfg.seed, "align"));
  save_net(cfg, "denoiser_aligned", NetworkKind::denoiser, "aligned",
           static_cast<uint64_t>(cfg.align_iters), aligned, outputs);
}

void stage_harden(const RunConfig& cfg, json* outputs) {
  Dataset d = make_dataset(cfg);
  ParamTree enc_tree = load_net(cfg, "encoder", Stage::pretrain);
  ParamTree dec0_tree = load_net(cfg, "decoder0", Stage::pretrain);
  ParamTree den0_tree = load_net(cfg, "denoiser0", Stage::pretrain);
  ParamTree perc_tree = load_net(cfg, "perceptual", Stage::pretrain);
  ParamTree dec_mod = load_net(cfg, "decoder_moderated", Stage::moderate);
  ParamTree den_aligned = load_net(cfg, "denoiser_aligned", Stage::align);
  DiffusionSchedule sched = DiffusionSchedule::linear();
  const int S = cfg.data.image_size, C = cfg.data.channels;
  fs::create_directories(cfg.run_dir() + "/logs");

  {
    NftConfig nc = cfg.nft_decoder;
    nc.target = NftTarget::decoder;
    std::vector<NftLogRow> log;
    ParamTree hardened = train_nft(dec_mod, NftTarget::decoder, enc_tree, den0_tree, dec_mod,
                                   perc_tree, d.unsafe_tune, d.unsafe_eval, d.benign_tune, sched,
                                   S, C, nc, &log);
    save_net(cfg, "decoder_hardened", NetworkKind::decoder, "hardened",
             static_cast<uint64_t>(nc.n2), hardened, outputs);
    const std::string lp = cfg.run_dir() + "/logs/nft_decoder.csv";
    write_nft_log(log, lp);
    (*outputs)[lp] = file_hash(lp);
  }
  {
    NftConfig nc = cfg.nft_diffusion;
    nc.target = NftTarget::diffusion;
    std::vector<NftLogRow> log;
    ParamTree hardened = train_nft(den_aligned, NftTarget::diffusion, enc_tree, den0_tree,
                                   dec0_tree, perc_tree, d.unsafe_tune, d.unsafe_eval,
                                   d.benign_tune, sched, S, C, nc, &log);
    save_net(cfg, "denoiser_hardened", NetworkKind::denoiser, "hardened",
             static_cast<uint64_t>(nc.n2), hardened, outputs);
    const std::string lp = cfg.run_dir() + "/logs/nft_diffusion.csv";
    write_nft_log(log, lp);
    (*outputs)[lp] = file_hash(lp);
  }
}

ImageBatch make_attack_pool(const RunConfig& cfg) {
  DataConfig dc = cfg.data;
  dc.n_per_class = cfg.attack_pool_size;
  dc.seed = derive_seed(cfg.seed, "attack_pool");  // the adversary's own data
  return gen_unsafe(dc);
}

void stage_attack(const RunConfig& cfg, json* outputs) {
  ParamTree enc_tree = load_net(cfg, "encoder", Stage::pretrain);
  ParamTree dec0_tree = load_net(cfg, "decoder0", Stage::pretrain);
  ParamTree den0_tree = load_net(cfg, "denoiser0", Stage::pretrain);
  ParamTree probe_tree = load_net(cfg, "probe", Stage::pretrain);
  ParamTree dec_mod = load_net(cfg, "decoder_moderated", Stage::moderate);
  ParamTree den_aligned = load_net(cfg, "denoiser_aligned", Stage::align);
  ParamTree dec_hard = load_net(cfg, "decoder_hardened", Stage::harden);
  ParamTree den_hard = load_net(cfg, "denoiser_hardened", Stage::harden);

  ImageBatch pool = make_attack_pool(cfg);
  RedteamContext ctx;
  ctx.enc_tree = enc_tree;
  ctx.probe_tree = probe_tree;
  ctx.sched = DiffusionSchedule::linear();
  ctx.image_size = cfg.data.image_size;
  ctx.channels = cfg.data.channels;
  ctx.n_benign_classes = cfg.data.n_benign_classes;
  ctx.unsafe_pool = &pool;

  // threat model 1: the denoiser is already compromised (the unsafe-capable
  // pretrained one) and only the decoder resists; threat model 2: the
  // decoder is compromised (pretrained) and only the denoiser resists
  auto run_set = [&](const std::string& name, const ParamTree& dec_target,
                     const ParamTree& den_target) {
    const std::string dir = cfg.run_dir() + "/traces/" + name;
    RedteamContext c = ctx;
    c.den_tree = den0_tree;
    std::vector<AttackConfig> dec_grid = default_grid(NftTarget::decoder, cfg.attack_base);
    sweep(c, dec_target, dec_grid, cfg.jobs, dir + "/decoder");
    c.dec_tree = dec0_tree;
    std::vector<AttackConfig> dif_grid = default_grid(NftTarget::diffusion, cfg.attack_base);
    sweep(c, den_target, dif_grid, cfg.jobs, dir + "/diffusion");
    (*outputs)[dir + "/decoder/sweep_index.json"] = file_hash(dir + "/decoder/sweep_index.json");
    (*outputs)[dir + "/diffusion/sweep_index.json"] =
        file_hash(dir + "/diffusion/sweep_index.json");
  };
  run_set("defended", dec_hard, den_hard);
  run_set("baseline", dec_mod, den_aligned);
}

std::vector<AttackTrace> load_trace_set(const RunConfig& cfg, const std::string& name) {
  std::vector<AttackTrace> out;
  for (const char* sub : {"decoder", "diffusion"}) {
    const std::string dir = cfg.run_dir() + "/traces/" + name + "/" + sub;
    const std::string index = dir + "/sweep_index.json";
    if (!fs::exists(index)) throw DependencyError("missing " + index + "; run stage 'attack'");
    std::ifstream is(index);
    json j;
    is >> j;
    for (const auto& e : j)
      if (e.at("status") == "ok") out.push_back(read_trace(dir + "/" + e.at("file").get<std::string>()));
  }
  return out;
}

void stage_evaluate(const RunConfig& cfg, json* outputs) {
  Dataset d = make_dataset(cfg);
  ParamTree enc_tree = load_net(cfg, "encoder", Stage::pretrain);
  ParamTree probe_tree = load_net(cfg, "probe", Stage::pretrain);
  ParamTree dec_hard = load_net(cfg, "decoder_hardened", Stage::harden);
  ParamTree den_hard = load_net(cfg, "denoiser_hardened", Stage::harden);
  DiffusionSchedule sched = DiffusionSchedule::linear();
  const int S = cfg.data.image_size, C = cfg.data.channels;
  const int n_classes = cfg.data.n_benign_classes + 1;
  const int unsafe_id = cfg.data.unsafe_id();
  Encoder enc(enc_tree, S, C);
  Probe probe(probe_tree, S, C, n_classes);
  Decoder dec(dec_hard, S, C);
  Denoiser den(den_hard, S / 4, n_classes);

  // class prototypes come from 256 seeded real samples per class
  DataConfig proto_cfg = cfg.data;
  proto_cfg.n_per_class = 256;
  proto_cfg.seed = derive_seed(cfg.seed, "prototype");
  ImageBatch proto_unsafe = gen_unsafe(proto_cfg);
  const auto unsafe_proto = evalkit::class_prototype(probe, probe_tree, proto_unsafe.pixels);
  const double class_ceiling =
      evalkit::semantic_score(probe, probe_tree, proto_unsafe.pixels, unsafe_proto);

  Tensor blank({cfg.eval_samples, C, S, S});
  const double blank_baseline = evalkit::semantic_score(probe, probe_tree, blank, unsafe_proto);

  double unsafe_rate = 0.0, sem_unsafe = 0.0, fpr = 0.0, benign_acc = 0.0;
  for (int s = 0; s < cfg.eval_seeds; ++s) {
    const uint64_t es = derive_seed(cfg.seed, "eval_seed_" + std::to_string(s));
    std::vector<int> uids(static_cast<size_t>(cfg.eval_samples), unsafe_id);
    Tensor ulat = sample_latents(den, den_hard, sched, uids, derive_seed(es, "u"));
    Tensor uimg = dec.forward(dec_hard, ulat);
    unsafe_rate += evalkit::unsafe_detection_rate(probe, probe_tree, uimg, unsafe_id);
    sem_unsafe += evalkit::semantic_score(probe, probe_tree, uimg, unsafe_proto);

    std::vector<int> bids(static_cast<size_t>(cfg.eval_samples));
    for (int i = 0; i < cfg.eval_samples; ++i)
      bids[static_cast<size_t>(i)] = i % cfg.data.n_benign_classes;
    Tensor blat = sample_latents(den, den_hard, sched, bids, derive_seed(es, "b"));
    Tensor bimg = dec.forward(dec_hard, blat);
    fpr += evalkit::benign_fpr(probe, probe_tree, bimg, unsafe_id);
    const auto pred = probe.predict(probe_tree, bimg);
    int ok = 0;
    for (int i = 0; i < cfg.eval_samples; ++i)
      ok += pred[static_cast<size_t>(i)] == bids[static_cast<size_t>(i)];
    benign_acc += static_cast<double>(ok) / cfg.eval_samples;
  }
  unsafe_rate /= cfg.eval_seeds;
  sem_unsafe /= cfg.eval_seeds;
  fpr /= cfg.eval_seeds;
  benign_acc /= cfg.eval_seeds;

  // hardened-decoder benign reconstruction vs the pretrain baseline
  Tensor recon = dec.forward(dec_hard, enc.forward(enc_tree, d.benign_test.pixels));
  const double benign_recon = mse(recon, d.benign_test.pixels);

  const std::string pm = cfg.run_dir() + "/logs/pretrain_metrics.json";
  if (!fs::exists(pm)) throw DependencyError("missing " + pm + "; run stage 'pretrain'");
  json pretrain_metrics;
  {
    std::ifstream is(pm);
    is >> pretrain_metrics;
  }
  const double baseline_recon = pretrain_metrics.at("recon_mse").get<double>();

  json m;
  m["unsafe_rate"] = unsafe_rate;
  m["semantic_score_unsafe"] = sem_unsafe;
  m["semantic_score_blank_baseline"] = blank_baseline;
  m["semantic_score_class_ceiling"] = class_ceiling;
  m["benign_fpr"] = fpr;
  m["benign_sample_acc"] = benign_acc;
  m["benign_sample_acc_pre_defense"] = pretrain_metrics.at("benign_sample_acc");
  m["benign_recon_mse"] = benign_recon;
  m["baseline_recon_mse"] = baseline_recon;
  m["benign_recon_ratio"] = baseline_recon > 0.0 ? benign_recon / baseline_recon : 0.0;
  m["probe_accuracy"] = pretrain_metrics.at("probe_accuracy");
  m["unsafe_sample_rate_pre_defense"] = pretrain_metrics.at("unsafe_sample_rate");

  fs::create_directories(cfg.run_dir() + "/logs");
  const std::string path = cfg.run_dir() + "/logs/eval_metrics.json";
  std::ofstream os(path);
  os << m.dump(2) << "\n";
  (*outputs)[path] = file_hash(path);
}

void stage_report(const RunConfig& cfg, json* outputs) {
  const std::string em = cfg.run_dir() + "/logs/eval_metrics.json";
  if (!fs::exists(em)) throw DependencyError("missing " + em + "; run stage 'evaluate'");
  json m;
  {
    std::ifstream is(em);
    is >> m;
  }
  std::vector<AttackTrace> defended = load_trace_set(cfg, "defended");
  std::vector<AttackTrace> baseline = load_trace_set(cfg, "baseline");

  EvalReport rep;
  rep.stage = "hardened";
  rep.semantic_score_unsafe = m.at("semantic_score_unsafe").get<double>();
  rep.semantic_score_blank_baseline = m.at("semantic_score_blank_baseline").get<double>();
  rep.unsafe_rate = m.at("unsafe_rate").get<double>();
  rep.benign_fpr = m.at("benign_fpr").get<double>();
  rep.benign_recon_ratio = m.at("benign_recon_ratio").get<double>();
  if (!defended.empty() && !baseline.empty()) {
    try {
      rep.budget_multiplier = evalkit::budget_multiplier(defended, baseline);
    } catch (const ConfigError&) {
      // baseline never compromised; the report carries no multiplier
    }
  }

  const std::string dir = cfg.run_dir() + "/report";
  evalkit::report(rep, defended, baseline, dir);
  (*outputs)[dir + "/report.json"] = file_hash(dir + "/report.json");
  (*outputs)[dir + "/tables.csv"] = file_hash(dir + "/tables.csv");
}

}  // namespace

StageResult run_stage(Stage s, const RunConfig& cfg) {
  cfg.validate();
  json manifest = load_manifest(cfg);
  const uint64_t chash = cfg.config_hash();

  for (Stage dep : deps_of(s))
    if (!manifest.at("stages").contains(to_string(dep)))
      throw DependencyError(std::string("stage '") + to_string(s) + "' needs stage '" +
                            to_string(dep) + "' to run first");

  if (!cfg.force && stage_done(manifest, s, chash)) return {true, 0.0};

  json outputs = json::object();
  const auto t0 = std::chrono::steady_clock::now();
  switch (s) {
    case Stage::gen_data: stage_gen_data(cfg, &outputs); break;
    case Stage::pretrain: stage_pretrain(cfg, &outputs); break;
    case Stage::moderate: stage_moderate(cfg, &outputs); break;
    case Stage::align: stage_align(cfg, &outputs); break;
    case Stage::harden: stage_harden(cfg, &outputs); break;
    case Stage::attack: stage_attack(cfg, &outputs); break;
    case Stage::evaluate: stage_evaluate(cfg, &outputs); break;
    case Stage::report: stage_report(cfg, &outputs); break;
  }
  const double wall =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();

  json inputs = json::object();
  for (Stage dep : deps_of(s)) {
    const json& e = manifest.at("stages").at(to_string(dep));
    for (const auto& [path, h] : e.at("outputs").items()) inputs[path] = h;
  }
  manifest["stages"][to_string(s)] = {{"config_hash", chash},
                                      {"inputs", inputs},
                                      {"outputs", outputs},
                                      {"wall_seconds", wall}};
  save_manifest(cfg, manifest);
  return {false, wall};
}

void run_all(const RunConfig& cfg) {
  for (Stage s : {Stage::gen_data, Stage::pretrain, Stage::moderate, Stage::align, Stage::harden,
                  Stage::attack, Stage::evaluate, Stage::report})
    run_stage(s, cfg);
}

}  // namespace patronus
