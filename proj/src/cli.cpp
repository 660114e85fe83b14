// Copyright 2026 The meddiff Authors
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#include "meddiff/cli.hpp"

#include <fcntl.h>
#include <signal.h>
#include <unistd.h>

#include <algorithm>
#include <cerrno>
#include <chrono>
#include <cmath>
#include <cstdlib>
#include <ctime>
#include <fstream>
#include <map>
#include <optional>
#include <set>
#include <sstream>

#include <CLI11.hpp>

#include "meddiff/checkpoint.hpp"
#include "meddiff/diffusion.hpp"
#include "meddiff/error.hpp"
#include "meddiff/hash.hpp"
#include "meddiff/metrics.hpp"
#include "meddiff/torch_util.hpp"

namespace meddiff::cli {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

void reject_unknown(const json& j, std::initializer_list<const char*> known, const std::string& where) {
  require(j.is_object(), ErrorKind::kConfig, "'" + where + "' must be an object");
  for (const auto& item : j.items()) {
    bool ok = false;
    for (const char* k : known) ok = ok || item.key() == k;
    require(ok, ErrorKind::kConfig, "unknown key '" + item.key() + "' in " + where);
  }
}

json extent_json(const Extent3& e) { return {e.h, e.w, e.d}; }

Extent3 extent_from(const json& a, const std::string& what) {
  require(a.is_array() && a.size() == 3, ErrorKind::kConfig, "'" + what + "' must be a 3-element array");
  return {a[0].get<std::int64_t>(), a[1].get<std::int64_t>(), a[2].get<std::int64_t>()};
}

// Output paths inside training configs belong to the driver, not the config file.
json strip_paths(json j) {
  j.erase("loss_log");
  j.erase("checkpoint_path");
  return j;
}

// Overlays user keys on the current defaults and re-parses with the module's
// own (unknown-key rejecting) parser.
template <typename T>
T overlay(const T& defaults, const json& user, const std::string& where, bool has_paths) {
  require(user.is_object(), ErrorKind::kConfig, "'" + where + "' must be an object");
  if (has_paths) {
    require(!user.contains("loss_log") && !user.contains("checkpoint_path"), ErrorKind::kConfig,
            "'" + where + "' may not set output paths; they are chosen by the command");
  }
  json merged = defaults.to_json();
  for (const auto& item : user.items()) merged[item.key()] = item.value();
  return T::from_json(merged);
}

}  // namespace

PvaeSection::PvaeSection() {
  // Desk-scale sizes; the paper's K, C, loss weights and learning rates are kept.
  model.patch_shape = {16, 16, 16};
  model.widths = {16, 32, 64};
  model.disc_warmup = 200;
  stage1.steps = 2000;
  stage1.batch_size = 4;
  stage1.lr = 3e-4;
  stage1.disc_lr = 3e-4;
  stage2.steps = 500;
  stage2.batch_size = 1;
  stage2.lr = 3e-5;
  stage2.disc_lr = 3e-5;
}

BiflownetSection::BiflownetSection() {
  model.embed_dim = 64;
  model.cond_dim = 64;
  model.unet_widths = {32, 64, 64};
  train.steps = 2000;
}

void ExperimentConfig::validate() const {
  require(!data.families.empty(), ErrorKind::kConfig, "data.families is empty");
  for (const auto& f : data.families) {
    synthdata::PhantomSpec probe;
    probe.family = f;
    probe.validate();
  }
  require(data.count >= 1, ErrorKind::kConfig, "data.count must be >= 1");
  require(data.extent.h >= 4 && data.extent.w >= 4 && data.extent.d >= 4, ErrorKind::kConfig,
          "data.extent must be >= 4 per axis");
  synthdata::parse_mask_kind(data.mask_kind);
  require(data.acceleration >= 1.0, ErrorKind::kConfig, "data.acceleration must be >= 1");
  pvae.model.validate();
  require(diffusion.T >= 1, ErrorKind::kConfig, "diffusion.T must be >= 1");
  require(diffusion.cosine_offset > 0, ErrorKind::kConfig, "diffusion.cosine_offset must be positive");
  require(diffusion.clip_denoised >= 0 && std::isfinite(diffusion.clip_denoised), ErrorKind::kConfig,
          "diffusion.clip_denoised must be finite and >= 0");
  require(biflownet.model.num_classes >= 1, ErrorKind::kConfig, "biflownet.model.num_classes must be >= 1");
  require(metrics.max_pairs >= 1, ErrorKind::kConfig, "metrics.max_pairs must be >= 1");
  require(metrics.feature_dim >= 8 && metrics.feature_dim % 8 == 0, ErrorKind::kConfig,
          "metrics.feature_dim must be a positive multiple of 8");
  require(metrics.frechet_eps >= 0, ErrorKind::kConfig, "metrics.frechet_eps must be >= 0");
  require(metrics.data_range > 0, ErrorKind::kConfig, "metrics.data_range must be positive");
  require(runtime.device == "cpu", ErrorKind::kConfig,
          "runtime.device '" + runtime.device + "' is unavailable; this build supports: cpu");
  require(runtime.threads >= 1, ErrorKind::kConfig, "runtime.threads must be >= 1");
  require(runtime.log_interval >= 0, ErrorKind::kConfig, "runtime.log_interval must be >= 0");
}

json ExperimentConfig::to_json() const {
  return {
      {"data",
       {{"families", data.families},
        {"count", data.count},
        {"extent", extent_json(data.extent)},
        {"seed", data.seed},
        {"write_labels", data.write_labels},
        {"mask_kind", data.mask_kind},
        {"acceleration", data.acceleration},
        {"pair_seed", data.pair_seed}}},
      {"pvae",
       {{"model", pvae.model.to_json()},
        {"stage1", strip_paths(pvae.stage1.to_json())},
        {"stage2", strip_paths(pvae.stage2.to_json())}}},
      {"diffusion",
       {{"T", diffusion.T}, {"cosine_offset", diffusion.cosine_offset}, {"clip_denoised", diffusion.clip_denoised}}},
      {"biflownet",
       {{"model", biflownet.model.to_json()}, {"train", strip_paths(biflownet.train.to_json())}}},
      {"controlnet", {{"finetune", strip_paths(controlnet.finetune.to_json())}}},
      {"metrics",
       {{"max_pairs", metrics.max_pairs},
        {"extractor_seed", metrics.extractor_seed},
        {"feature_dim", metrics.feature_dim},
        {"frechet_eps", metrics.frechet_eps},
        {"data_range", metrics.data_range},
        {"pair_seed", metrics.pair_seed}}},
      {"runtime",
       {{"seed", runtime.seed},
        {"device", runtime.device},
        {"run_dir", runtime.run_dir},
        {"log_interval", runtime.log_interval},
        {"threads", runtime.threads}}},
  };
}

ExperimentConfig ExperimentConfig::from_json(const json& j) {
  ExperimentConfig c;
  try {
    reject_unknown(j, {"data", "pvae", "diffusion", "biflownet", "controlnet", "metrics", "runtime"}, "config");
    if (j.contains("data")) {
      const auto& d = j["data"];
      reject_unknown(d, {"families", "count", "extent", "seed", "write_labels", "mask_kind", "acceleration",
                         "pair_seed"},
                     "data");
      c.data.families = d.value("families", c.data.families);
      c.data.count = d.value("count", c.data.count);
      if (d.contains("extent")) c.data.extent = extent_from(d["extent"], "data.extent");
      c.data.seed = d.value("seed", c.data.seed);
      c.data.write_labels = d.value("write_labels", c.data.write_labels);
      c.data.mask_kind = d.value("mask_kind", c.data.mask_kind);
      c.data.acceleration = d.value("acceleration", c.data.acceleration);
      c.data.pair_seed = d.value("pair_seed", c.data.pair_seed);
    }
    if (j.contains("pvae")) {
      const auto& p = j["pvae"];
      reject_unknown(p, {"model", "stage1", "stage2"}, "pvae");
      if (p.contains("model")) c.pvae.model = overlay(c.pvae.model, p["model"], "pvae.model", false);
      if (p.contains("stage1")) c.pvae.stage1 = overlay(c.pvae.stage1, p["stage1"], "pvae.stage1", true);
      if (p.contains("stage2")) c.pvae.stage2 = overlay(c.pvae.stage2, p["stage2"], "pvae.stage2", true);
    }
    if (j.contains("diffusion")) {
      const auto& d = j["diffusion"];
      reject_unknown(d, {"T", "cosine_offset", "clip_denoised"}, "diffusion");
      c.diffusion.T = d.value("T", c.diffusion.T);
      c.diffusion.cosine_offset = d.value("cosine_offset", c.diffusion.cosine_offset);
      c.diffusion.clip_denoised = d.value("clip_denoised", c.diffusion.clip_denoised);
    }
    if (j.contains("biflownet")) {
      const auto& b = j["biflownet"];
      reject_unknown(b, {"model", "train"}, "biflownet");
      if (b.contains("model")) c.biflownet.model = overlay(c.biflownet.model, b["model"], "biflownet.model", false);
      if (b.contains("train")) c.biflownet.train = overlay(c.biflownet.train, b["train"], "biflownet.train", true);
    }
    if (j.contains("controlnet")) {
      const auto& b = j["controlnet"];
      reject_unknown(b, {"finetune"}, "controlnet");
      if (b.contains("finetune")) {
        c.controlnet.finetune = overlay(c.controlnet.finetune, b["finetune"], "controlnet.finetune", true);
      }
    }
    if (j.contains("metrics")) {
      const auto& m = j["metrics"];
      reject_unknown(m, {"max_pairs", "extractor_seed", "feature_dim", "frechet_eps", "data_range", "pair_seed"},
                     "metrics");
      c.metrics.max_pairs = m.value("max_pairs", c.metrics.max_pairs);
      c.metrics.extractor_seed = m.value("extractor_seed", c.metrics.extractor_seed);
      c.metrics.feature_dim = m.value("feature_dim", c.metrics.feature_dim);
      c.metrics.frechet_eps = m.value("frechet_eps", c.metrics.frechet_eps);
      c.metrics.data_range = m.value("data_range", c.metrics.data_range);
      c.metrics.pair_seed = m.value("pair_seed", c.metrics.pair_seed);
    }
    if (j.contains("runtime")) {
      const auto& r = j["runtime"];
      reject_unknown(r, {"seed", "device", "run_dir", "log_interval", "threads"}, "runtime");
      c.runtime.seed = r.value("seed", c.runtime.seed);
      c.runtime.device = r.value("device", c.runtime.device);
      c.runtime.run_dir = r.value("run_dir", c.runtime.run_dir);
      c.runtime.log_interval = r.value("log_interval", c.runtime.log_interval);
      c.runtime.threads = r.value("threads", c.runtime.threads);
    }
  } catch (const json::exception& e) {
    fail(ErrorKind::kConfig, std::string("invalid configuration value: ") + e.what());
  }
  c.validate();
  return c;
}

ExperimentConfig ExperimentConfig::load(const fs::path& path) {
  std::ifstream is(path);
  require(static_cast<bool>(is), ErrorKind::kMissingFile, "config file not found: " + path.string());
  json j;
  try {
    j = json::parse(is, nullptr, true, /*ignore_comments=*/true);
  } catch (const json::exception& e) {
    fail(ErrorKind::kConfig, "cannot parse " + path.string() + ": " + e.what());
  }
  return from_json(j);
}

std::string ExperimentConfig::hash() const { return hash_text(to_json().dump()); }

fs::path run_root(const ExperimentConfig& cfg) {
  if (const char* env = std::getenv("MEDDIFF_RUN_DIR"); env != nullptr && *env != '\0') return env;
  return cfg.runtime.run_dir;
}

namespace {

std::string utc_now() {
  const auto now = std::chrono::system_clock::now();
  const std::time_t t = std::chrono::system_clock::to_time_t(now);
  std::tm tm{};
  gmtime_r(&t, &tm);
  char buf[32];
  std::strftime(buf, sizeof(buf), "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

// Exclusive ownership of an output directory for the lifetime of a command.
class RunLock {
 public:
  explicit RunLock(const fs::path& dir) : path_(dir / ".meddiff.lock") {
    for (int attempt = 0; attempt < 2; ++attempt) {
      const int fd = ::open(path_.c_str(), O_CREAT | O_EXCL | O_WRONLY, 0644);
      if (fd >= 0) {
        const auto pid = std::to_string(::getpid());
        const auto written = ::write(fd, pid.data(), pid.size());
        ::close(fd);
        require(written == static_cast<ssize_t>(pid.size()), ErrorKind::kIo, "cannot write " + path_.string());
        return;
      }
      require(errno == EEXIST, ErrorKind::kIo, "cannot create lock " + path_.string());
      long owner = 0;
      std::ifstream(path_) >> owner;
      const bool alive = owner > 0 && (::kill(static_cast<pid_t>(owner), 0) == 0 || errno == EPERM);
      require(!alive, ErrorKind::kIo,
              "run directory " + dir.string() + " is in use by process " + std::to_string(owner) +
                  "; concurrent runs need distinct run directories");
      fs::remove(path_);  // stale lock from a dead process
    }
    fail(ErrorKind::kIo, "cannot acquire " + path_.string());
  }
  ~RunLock() {
    std::error_code ec;
    fs::remove(path_, ec);
  }
  RunLock(const RunLock&) = delete;
  RunLock& operator=(const RunLock&) = delete;

 private:
  fs::path path_;
};

// Records config, inputs and outputs of one command invocation.
class RunManifest {
 public:
  RunManifest(std::string label, const ExperimentConfig& cfg, fs::path dir)
      : label_(std::move(label)), dir_(std::move(dir)), config_hash_(cfg.hash()), started_(utc_now()) {
    run_id_ = hash_text(label_ + "|" + config_hash_ + "|" + started_ + "|" + std::to_string(::getpid()));
  }
  void input(const fs::path& p) { inputs_.push_back(entry(p)); }
  void output(const fs::path& p) { outputs_.push_back(entry(p)); }
  void note(const std::string& key, json value) { notes_[key] = std::move(value); }

  fs::path write() {
    const auto path = dir_ / ("run_" + label_ + ".json");
    json j{{"run_id", run_id_},
           {"command", label_},
           {"config_hash", config_hash_},
           {"started", started_},
           {"finished", utc_now()},
           {"inputs", inputs_},
           {"outputs", outputs_},
           {"notes", notes_}};
    std::ofstream os(path);
    require(static_cast<bool>(os), ErrorKind::kIo, "cannot write " + path.string());
    os << j.dump(2) << '\n';
    return path;
  }

 private:
  static json entry(const fs::path& p) {
    return {{"path", fs::absolute(p).lexically_normal().string()}, {"hash", hash_file(p)}};
  }

  std::string label_;
  fs::path dir_;
  std::string config_hash_;
  std::string started_;
  std::string run_id_;
  json inputs_ = json::array();
  json outputs_ = json::array();
  json notes_ = json::object();
};

struct Context {
  ExperimentConfig cfg;
  fs::path root;
  std::ostream& out;
  std::ostream& err;
};

// Relative input paths are tried under the run root first, then as given.
fs::path resolve_input(const Context& ctx, const fs::path& p) {
  if (p.is_absolute()) return p;
  const auto under = ctx.root / p;
  if (fs::exists(under)) return under;
  return p;
}

fs::path resolve_output(const Context& ctx, const fs::path& p) {
  return p.is_absolute() ? p : ctx.root / p;
}

fs::path require_file(const Context& ctx, const std::string& what, const std::string& value) {
  require(!value.empty(), ErrorKind::kConfig, what + " is required");
  const auto p = resolve_input(ctx, value);
  require(fs::is_regular_file(p), ErrorKind::kMissingFile, what + " not found: " + value);
  return p;
}

fs::path dataset_manifest(const Context& ctx, const std::string& value) {
  require(!value.empty(), ErrorKind::kConfig, "--data is required");
  auto p = resolve_input(ctx, value);
  if (fs::is_directory(p)) p /= "manifest.jsonl";
  require(fs::is_regular_file(p), ErrorKind::kMissingFile, "dataset manifest not found: " + p.string());
  return p;
}

std::vector<Volume> load_dataset(const fs::path& manifest, std::vector<std::string>* tags = nullptr) {
  std::vector<Volume> vols;
  for (const auto& item : synthdata::read_dataset(manifest)) {
    auto v = load_volume(item.volume);
    v.class_tag = item.class_tag;
    if (tags) tags->push_back(item.class_tag);
    vols.push_back(std::move(v));
  }
  require(!vols.empty(), ErrorKind::kConfig, "dataset " + manifest.string() + " is empty");
  return vols;
}

void write_resolved_config(const Context& ctx, const fs::path& dir, const std::string& label) {
  const auto path = dir / ("config_" + label + ".json");
  std::ofstream os(path);
  require(static_cast<bool>(os), ErrorKind::kIo, "cannot write " + path.string());
  os << ctx.cfg.to_json().dump(2) << '\n';
  ctx.out << "config_hash: " << ctx.cfg.hash() << '\n';
}

std::string fmt(double v, int precision = 6) {
  std::ostringstream os;
  os.precision(precision);
  os << v;
  return os.str();
}

std::string pvae_identity(const pvae::PvaeModel& model) { return hash_parameters(*model); }

// Drops rows logged after `step_count` so a resumed run appends cleanly.
void truncate_loss_log(const fs::path& log, std::int64_t step_count) {
  if (!fs::exists(log)) return;
  std::ifstream is(log);
  std::vector<std::string> keep;
  std::string line;
  while (std::getline(is, line)) {
    if (keep.empty()) {
      keep.push_back(line);
      continue;
    }
    const auto comma = line.find(',');
    if (comma == std::string::npos) continue;
    if (std::stoll(line.substr(0, comma)) < step_count) keep.push_back(line);
  }
  is.close();
  std::ofstream os(log, std::ios::trunc);
  for (const auto& l : keep) os << l << '\n';
}

// ---------------------------------------------------------------------------

struct GenDataArgs {
  std::string out = "data";
  std::optional<std::int64_t> count;
  std::vector<std::string> families;
  std::optional<std::uint64_t> seed;
  std::optional<std::int64_t> extent;
  bool pairs = false;
};

int cmd_gen_data(Context& ctx, const GenDataArgs& a) {
  auto& d = ctx.cfg.data;
  if (a.count) d.count = *a.count;
  if (!a.families.empty()) d.families = a.families;
  if (a.seed) d.seed = *a.seed;
  if (a.extent) d.extent = {*a.extent, *a.extent, *a.extent};
  ctx.cfg.validate();

  const auto dir = resolve_output(ctx, a.out);
  fs::create_directories(dir);
  RunLock lock(dir);
  write_resolved_config(ctx, dir, "gen-data");
  RunManifest manifest("gen-data", ctx.cfg, dir);

  synthdata::DatasetOptions opts;
  opts.families = d.families;
  opts.count = d.count;
  opts.extent = d.extent;
  opts.seed = d.seed;
  opts.write_labels = d.write_labels;
  std::vector<std::string> failures;
  const auto items = synthdata::write_dataset(opts, dir, &failures);
  for (const auto& f : failures) ctx.err << "item failed: " << f << '\n';
  for (const auto& it : items) {
    manifest.output(dir / it.volume);
    if (!it.labels.empty()) manifest.output(dir / it.labels);
  }
  manifest.output(dir / "manifest.jsonl");
  ctx.out << "volumes: " << items.size() << " written to " << dir.string() << '\n';

  if (a.pairs && !items.empty()) {
    std::vector<fs::path> targets;
    for (const auto& it : items) targets.push_back(dir / it.volume);
    synthdata::PairOptions po;
    po.kind = synthdata::parse_mask_kind(d.mask_kind);
    po.acceleration = d.acceleration;
    po.master_seed = d.pair_seed;
    const auto rows = synthdata::build_pairs(targets, po, dir / "pairs");
    for (const auto& r : rows) manifest.output(r.condition);
    manifest.output(dir / "pairs" / "pairs.jsonl");
    ctx.out << "pairs: " << rows.size() << " (" << d.mask_kind << ", " << fmt(d.acceleration) << "x)\n";
  }
  manifest.note("failed_items", failures);
  manifest.write();
  if (!failures.empty()) {
    ctx.err << failures.size() << " of " << d.count << " items failed\n";
    return kExitRuntime;
  }
  return kExitOk;
}

struct TrainPvaeArgs {
  int stage = 0;
  std::string data = "data";
  std::string out = "pvae";
  std::string init;
  std::optional<std::int64_t> steps;
  bool resume = false;
};

int cmd_train_pvae(Context& ctx, const TrainPvaeArgs& a) {
  require(a.stage == 1 || a.stage == 2, ErrorKind::kConfig, "--stage must be 1 or 2");
  auto tc = a.stage == 1 ? ctx.cfg.pvae.stage1 : ctx.cfg.pvae.stage2;
  if (a.steps) tc.steps = *a.steps;
  require(tc.steps >= 0, ErrorKind::kConfig, "--steps must be >= 0");
  fs::path init;
  if (a.stage == 2) {
    require(!a.init.empty(), ErrorKind::kConfig, "stage 2 requires --init pointing at a stage-1 checkpoint");
    init = require_file(ctx, "--init", a.init);
  }
  const auto manifest_path = dataset_manifest(ctx, a.data);
  if (a.stage == 1) {
    ctx.cfg.pvae.stage1 = tc;
  } else {
    ctx.cfg.pvae.stage2 = tc;
  }
  ctx.cfg.validate();

  const auto dir = resolve_output(ctx, a.out);
  fs::create_directories(dir);
  RunLock lock(dir);
  const std::string label = "train-pvae-stage" + std::to_string(a.stage);
  write_resolved_config(ctx, dir, label);
  RunManifest manifest(label, ctx.cfg, dir);
  manifest.input(manifest_path);

  const auto dataset = load_dataset(manifest_path);
  tc.loss_log = dir / ("loss_stage" + std::to_string(a.stage) + ".csv");
  tc.checkpoint_path = dir / ("trainer_stage" + std::to_string(a.stage) + ".ckpt");

  pvae::PvaeModel model{nullptr};
  if (a.stage == 1) {
    torch::manual_seed(tc.seed);
    model = pvae::PvaeModel(ctx.cfg.pvae.model);
  } else {
    manifest.input(init);
    model = pvae::load_model(init);
    require(model->stage() != pvae::Stage::kUntrained, ErrorKind::kConfig,
            "--init " + a.init + " holds no stage-1 weights");
  }
  const auto hash_before = model->encoder_hash();
  pvae::Trainer trainer(model, a.stage == 1 ? pvae::Stage::kPatch : pvae::Stage::kVolume, tc, dataset);
  if (a.resume && fs::exists(tc.checkpoint_path)) {
    trainer.load_checkpoint(tc.checkpoint_path);
    truncate_loss_log(tc.loss_log, trainer.step_count());
    ctx.out << "resumed at step " << trainer.step_count() << '\n';
  } else {
    fs::remove(tc.loss_log);
  }
  const auto remaining = std::max<std::int64_t>(0, tc.steps - trainer.step_count());
  const auto every = ctx.cfg.runtime.log_interval;
  pvae::StepLosses last;
  trainer.run(remaining, [&](const pvae::StepLosses& s) {
    last = s;
    if (every > 0 && (s.step % every == 0 || s.step + 1 == tc.steps)) {
      ctx.out << "step " << s.step << " loss_total " << fmt(s.total) << " loss_vq " << fmt(s.vq) << " loss_adv "
              << fmt(s.adv) << " loss_tp " << fmt(s.tp) << '\n';
    }
  });
  trainer.save_checkpoint(tc.checkpoint_path);
  const auto model_path = dir / ("pvae_stage" + std::to_string(a.stage) + ".ckpt");
  pvae::save_model(trainer.model(), model_path);
  manifest.output(model_path);
  manifest.output(tc.checkpoint_path);
  if (fs::exists(tc.loss_log)) manifest.output(tc.loss_log);

  int code = kExitOk;
  if (a.stage == 2) {
    const bool unchanged = trainer.model()->encoder_hash() == hash_before;
    ctx.out << "encoder_hash: " << hash_before << '\n';
    ctx.out << "encoder_hash_unchanged: " << (unchanged ? "true" : "false") << '\n';
    manifest.note("encoder_hash", hash_before);
    manifest.note("encoder_hash_unchanged", unchanged);
    if (!unchanged) {
      ctx.err << "encoder or codebook changed during stage 2\n";
      code = kExitRuntime;
    }
  }
  ctx.out << "checkpoint: " << model_path.string() << '\n';
  manifest.write();
  return code;
}

struct TrainDiffusionArgs {
  std::string pvae;
  std::string data = "data";
  std::string out = "diffusion";
  std::optional<std::int64_t> steps;
};

// Dataset latents [N, C, h, w, d] from the frozen encoder.
torch::Tensor encode_all(pvae::PvaeModel& model, const std::vector<Volume>& vols) {
  std::vector<torch::Tensor> zs;
  for (const auto& v : vols) {
    require(v.shape == vols.front().shape, ErrorKind::kShapeMismatch,
            "dataset volumes differ in extent: " + to_string(v.shape) + " vs " + to_string(vols.front().shape));
    zs.push_back(model->encode_volume_patchwise(v).features);
  }
  return torch::cat(zs, 0);
}

int cmd_train_diffusion(Context& ctx, const TrainDiffusionArgs& a) {
  const auto pvae_path = require_file(ctx, "--pvae", a.pvae);
  const auto manifest_path = dataset_manifest(ctx, a.data);
  if (a.steps) ctx.cfg.biflownet.train.steps = *a.steps;
  ctx.cfg.validate();

  auto model = pvae::load_model(pvae_path);
  model->eval();
  std::vector<std::string> tags;
  const auto dataset = load_dataset(manifest_path, &tags);
  const std::set<std::string> uniq(tags.begin(), tags.end());
  const std::vector<std::string> classes(uniq.begin(), uniq.end());
  auto net_cfg = ctx.cfg.biflownet.model;
  require(net_cfg.num_classes == static_cast<std::int64_t>(classes.size()), ErrorKind::kConfig,
          "biflownet.model.num_classes is " + std::to_string(net_cfg.num_classes) + " but the dataset has " +
              std::to_string(classes.size()) + " classes");
  // Latent geometry comes from the autoencoder.
  net_cfg.channels = model->config().code_dim;
  net_cfg.latent_patch = model->config().latent_patch_shape();
  net_cfg.validate();

  const auto dir = resolve_output(ctx, a.out);
  fs::create_directories(dir);
  RunLock lock(dir);
  write_resolved_config(ctx, dir, "train-diffusion");
  RunManifest manifest("train-diffusion", ctx.cfg, dir);
  manifest.input(pvae_path);
  manifest.input(manifest_path);

  biflownet::EstimatorBundle bundle;
  bundle.schedule = diffusion::NoiseSchedule::cosine(ctx.cfg.diffusion.T, ctx.cfg.diffusion.cosine_offset);
  bundle.cosine_offset = ctx.cfg.diffusion.cosine_offset;
  const auto summary = bundle.schedule.summary();
  ctx.out << "schedule: " << summary.dump() << '\n';

  torch::Tensor latents;
  {
    torch::NoGradGuard no_grad;
    latents = encode_all(model, dataset);
  }
  bundle.stats = diffusion::LatentStats::compute(latents);
  auto z = bundle.stats.standardize(latents);
  std::vector<std::int64_t> ids;
  for (const auto& t : tags) {
    ids.push_back(std::find(classes.begin(), classes.end(), t) - classes.begin());
  }
  auto cls = torch::tensor(ids, torch::kLong);

  auto tc = ctx.cfg.biflownet.train;
  tc.loss_log = dir / "loss_diffusion.csv";
  torch::manual_seed(tc.seed);
  bundle.net = biflownet::BiFlowNet(net_cfg);
  ctx.out << "parameters: " << count_parameters(*bundle.net) << '\n';
  const auto every = ctx.cfg.runtime.log_interval;
  const auto losses = biflownet::train(bundle.net, z, cls, bundle.schedule, tc, [&](std::int64_t s, double v) {
    if (every > 0 && (s % every == 0 || s + 1 == tc.steps)) ctx.out << "step " << s << " loss " << fmt(v) << '\n';
  });
  bundle.class_names = classes;
  bundle.latent_extent = spatial_extent(latents);
  bundle.volume_extent = dataset.front().shape;
  bundle.pvae_hash = pvae_identity(model);
  const auto ckpt = dir / "estimator.ckpt";
  biflownet::save_bundle(bundle, ckpt);
  manifest.output(ckpt);
  if (fs::exists(tc.loss_log)) manifest.output(tc.loss_log);
  if (!losses.empty()) ctx.out << "final_loss: " << fmt(losses.back()) << '\n';
  ctx.out << "checkpoint: " << ckpt.string() << '\n';
  manifest.write();
  return kExitOk;
}

struct EstimatorInputs {
  biflownet::EstimatorBundle bundle;
  pvae::PvaeModel model{nullptr};
  fs::path estimator_path;
  fs::path pvae_path;

  void record(RunManifest& m) const {
    m.input(estimator_path);
    m.input(pvae_path);
  }
};

EstimatorInputs load_estimator(const Context& ctx, const std::string& estimator, const std::string& pvae_ckpt) {
  EstimatorInputs in;
  in.estimator_path = require_file(ctx, "--estimator", estimator);
  in.pvae_path = require_file(ctx, "--pvae", pvae_ckpt);
  in.bundle = biflownet::load_bundle(in.estimator_path);
  in.model = pvae::load_model(in.pvae_path);
  in.model->eval();
  require(pvae_identity(in.model) == in.bundle.pvae_hash, ErrorKind::kHashMismatch,
          "estimator was trained on a different autoencoder than " + in.pvae_path.string());
  return in;
}

std::uint64_t item_seed(std::uint64_t seed, std::size_t index) { return splitmix64(seed ^ splitmix64(index + 1)); }

struct SampleArgs {
  std::string estimator;
  std::string pvae;
  std::string out = "samples";
  std::int64_t count = 1;
  std::string class_name;
  std::optional<std::uint64_t> seed;
};

int cmd_sample(Context& ctx, const SampleArgs& a) {
  require(a.count >= 1, ErrorKind::kConfig, "--count must be >= 1");
  auto in = load_estimator(ctx, a.estimator, a.pvae);
  const std::string cls_name = a.class_name.empty() ? in.bundle.class_names.front() : a.class_name;
  const auto cls = in.bundle.class_index(cls_name);
  const auto seed = a.seed.value_or(ctx.cfg.runtime.seed);

  const auto dir = resolve_output(ctx, a.out);
  fs::create_directories(dir);
  RunLock lock(dir);
  write_resolved_config(ctx, dir, "sample");
  RunManifest manifest("sample", ctx.cfg, dir);
  in.record(manifest);

  const auto& le = in.bundle.latent_extent;
  const auto channels = in.bundle.net->config().channels;
  Volume like(in.bundle.volume_extent, {}, cls_name);
  const auto sched_hash = in.bundle.schedule.hash();
  std::ofstream jsonl(dir / "samples.jsonl");
  require(static_cast<bool>(jsonl), ErrorKind::kIo, "cannot write sample manifest in " + dir.string());
  auto estimator = diffusion::clip_denoised(biflownet::as_estimator(in.bundle.net), in.bundle.schedule,
                                            ctx.cfg.diffusion.clip_denoised);
  for (std::int64_t n = 0; n < a.count; ++n) {
    Rng rng(item_seed(seed, static_cast<std::size_t>(n)));
    auto c = torch::full({1}, cls, torch::kLong);
    auto z = diffusion::sample(estimator, {1, channels, le.h, le.w, le.d}, c, in.bundle.schedule, rng);
    auto vol = controlnet::decode_sample(z, in.model, in.bundle.stats, like);
    char name[64];
    std::snprintf(name, sizeof(name), "sample_%04lld.raw", static_cast<long long>(n));
    save_volume(vol, dir / name);
    manifest.output(dir / name);
    jsonl << json{{"seed", seed},
                  {"index", n},
                  {"class_tag", cls_name},
                  {"schedule_hash", sched_hash},
                  {"steps", in.bundle.schedule.T},
                  {"output", fs::absolute(dir / name).lexically_normal().string()}}
                 .dump()
          << '\n';
    ctx.out << "wrote " << (dir / name).string() << '\n';
  }
  jsonl.close();
  manifest.output(dir / "samples.jsonl");
  manifest.write();
  return kExitOk;
}

struct TrainControlnetArgs {
  std::string base;
  std::string pvae;
  std::string pairs;
  std::string out = "controlnet";
  std::optional<std::int64_t> steps;
};

fs::path pairs_manifest(const Context& ctx, const std::string& value) {
  require(!value.empty(), ErrorKind::kConfig, "--pairs is required");
  auto p = resolve_input(ctx, value);
  if (fs::is_directory(p)) p /= "pairs.jsonl";
  require(fs::is_regular_file(p), ErrorKind::kMissingFile, "pairs manifest not found: " + value);
  return p;
}

int cmd_train_controlnet(Context& ctx, const TrainControlnetArgs& a) {
  const auto pairs_path = pairs_manifest(ctx, a.pairs);
  if (a.steps) ctx.cfg.controlnet.finetune.steps = *a.steps;
  ctx.cfg.validate();
  auto in = load_estimator(ctx, a.base, a.pvae);
  const auto rows = synthdata::read_pairs(pairs_path);
  require(!rows.empty(), ErrorKind::kConfig, "pairs manifest " + pairs_path.string() + " is empty");

  const auto dir = resolve_output(ctx, a.out);
  fs::create_directories(dir);
  RunLock lock(dir);
  write_resolved_config(ctx, dir, "train-controlnet");
  RunManifest manifest("train-controlnet", ctx.cfg, dir);
  in.record(manifest);
  manifest.input(pairs_path);

  std::vector<torch::Tensor> targets, conds;
  std::vector<std::int64_t> ids;
  {
    torch::NoGradGuard no_grad;
    for (const auto& r : rows) {
      const auto target = load_volume(r.target);
      const auto cond = load_volume(r.condition);
      require(target.shape == in.bundle.volume_extent, ErrorKind::kShapeMismatch,
              "target " + r.target + " has extent " + to_string(target.shape) + ", estimator expects " +
                  to_string(in.bundle.volume_extent));
      targets.push_back(in.bundle.stats.standardize(in.model->encode_volume_patchwise(target).features));
      conds.push_back(controlnet::encode_condition(cond, in.model, in.bundle.stats, &target.shape));
      ids.push_back(in.bundle.class_index(r.class_tag));
    }
  }
  auto tc = ctx.cfg.controlnet.finetune;
  tc.loss_log = dir / "loss_controlnet.csv";
  torch::manual_seed(tc.seed);
  auto adapter = controlnet::init_adapter(in.bundle.net);
  const auto every = ctx.cfg.runtime.log_interval;
  const auto losses = controlnet::finetune(adapter, torch::cat(targets, 0), torch::cat(conds, 0),
                                           torch::tensor(ids, torch::kLong), in.bundle.schedule, tc,
                                           [&](std::int64_t s, double v) {
                                             if (every > 0 && (s % every == 0 || s + 1 == tc.steps)) {
                                               ctx.out << "step " << s << " loss " << fmt(v) << '\n';
                                             }
                                           });
  const auto base_hash = hash_parameters(*in.bundle.net);
  const auto ckpt = dir / "adapter.ckpt";
  controlnet::save_adapter(adapter, base_hash, ckpt);
  manifest.output(ckpt);
  if (fs::exists(tc.loss_log)) manifest.output(tc.loss_log);
  manifest.note("base_hash", base_hash);
  ctx.out << "base_hash: " << base_hash << '\n';
  if (!losses.empty()) ctx.out << "final_loss: " << fmt(losses.back()) << '\n';
  ctx.out << "checkpoint: " << ckpt.string() << '\n';
  manifest.write();
  return kExitOk;
}

struct CondSampleArgs {
  std::string base;
  std::string pvae;
  std::string adapter;
  std::string pairs;
  std::string condition;
  std::string class_name;
  std::string out = "cond_samples";
  std::optional<std::uint64_t> seed;
};

int cmd_cond_sample(Context& ctx, const CondSampleArgs& a) {
  require(a.pairs.empty() != a.condition.empty(), ErrorKind::kConfig,
          "give exactly one of --pairs or --condition");
  auto in = load_estimator(ctx, a.base, a.pvae);
  const auto adapter_path = require_file(ctx, "--adapter", a.adapter);
  std::vector<std::pair<fs::path, std::string>> conditions;  // path, class tag
  fs::path pairs_path;
  if (!a.pairs.empty()) {
    pairs_path = pairs_manifest(ctx, a.pairs);
    for (const auto& r : synthdata::read_pairs(pairs_path)) conditions.emplace_back(r.condition, r.class_tag);
  } else {
    conditions.emplace_back(require_file(ctx, "--condition", a.condition), "");
  }
  const auto seed = a.seed.value_or(ctx.cfg.runtime.seed);

  const auto dir = resolve_output(ctx, a.out);
  fs::create_directories(dir);
  RunLock lock(dir);
  write_resolved_config(ctx, dir, "cond-sample");
  RunManifest manifest("cond-sample", ctx.cfg, dir);
  in.record(manifest);
  manifest.input(adapter_path);
  if (!pairs_path.empty()) manifest.input(pairs_path);
  const auto base_hash = hash_parameters(*in.bundle.net);
  auto adapter = controlnet::load_adapter(in.bundle.net, base_hash, adapter_path);
  ctx.out << "base_hash_verified: " << base_hash << '\n';

  std::ofstream jsonl(dir / "samples.jsonl");
  require(static_cast<bool>(jsonl), ErrorKind::kIo, "cannot write sample manifest in " + dir.string());
  for (std::size_t n = 0; n < conditions.size(); ++n) {
    auto cond = load_volume(conditions[n].first);
    require(cond.shape == in.bundle.volume_extent, ErrorKind::kShapeMismatch,
            "condition " + conditions[n].first.string() + " has extent " + to_string(cond.shape) +
                ", estimator expects " + to_string(in.bundle.volume_extent));
    std::string tag = !a.class_name.empty() ? a.class_name : conditions[n].second;
    if (tag.empty()) tag = cond.class_tag.empty() ? in.bundle.class_names.front() : cond.class_tag;
    const auto cls = in.bundle.class_index(tag);
    Rng rng(item_seed(seed, n));
    auto vol = controlnet::conditional_sample(adapter, cond, cls, in.model, in.bundle.stats, in.bundle.schedule, rng,
                                               ctx.cfg.diffusion.clip_denoised);
    vol.class_tag = tag;
    char name[64];
    std::snprintf(name, sizeof(name), "cond_%04zu.raw", n);
    save_volume(vol, dir / name);
    manifest.output(dir / name);
    jsonl << json{{"seed", seed},
                  {"index", n},
                  {"class_tag", tag},
                  {"condition", fs::absolute(conditions[n].first).lexically_normal().string()},
                  {"schedule_hash", in.bundle.schedule.hash()},
                  {"steps", in.bundle.schedule.T},
                  {"base_hash", base_hash},
                  {"output", fs::absolute(dir / name).lexically_normal().string()}}
                 .dump()
          << '\n';
    ctx.out << "wrote " << (dir / name).string() << '\n';
  }
  jsonl.close();
  manifest.output(dir / "samples.jsonl");
  manifest.write();
  return kExitOk;
}

struct EvaluateArgs {
  std::string real;
  std::string gen;
  std::string metrics = "psnr,ssim,ms_ssim,mmd,frechet,diversity";
  std::string out = "evaluation.csv";
};

std::vector<fs::path> volume_files(const fs::path& dir) {
  std::vector<fs::path> files;
  if (fs::is_regular_file(dir / "manifest.jsonl")) {
    for (const auto& it : synthdata::read_dataset(dir / "manifest.jsonl")) files.emplace_back(it.volume);
    return files;
  }
  for (const auto& e : fs::directory_iterator(dir)) {
    const auto name = e.path().filename().string();
    if (e.is_regular_file() && e.path().extension() == ".raw" && name.rfind("labels_", 0) != 0) {
      files.push_back(e.path());
    }
  }
  std::sort(files.begin(), files.end());
  return files;
}

int cmd_evaluate(Context& ctx, const EvaluateArgs& a) {
  static const std::set<std::string> kKnown{"psnr", "ssim", "ms_ssim", "mmd", "frechet", "diversity"};
  std::vector<std::string> wanted;
  {
    std::stringstream ss(a.metrics);
    std::string m;
    while (std::getline(ss, m, ',')) {
      if (m.empty()) continue;
      require(kKnown.count(m) == 1, ErrorKind::kConfig,
              "unknown metric '" + m + "'; valid: psnr, ssim, ms_ssim, mmd, frechet, diversity");
      wanted.push_back(m);
    }
  }
  require(!wanted.empty(), ErrorKind::kConfig, "--metrics is empty");
  require(!a.real.empty() && !a.gen.empty(), ErrorKind::kConfig, "--real and --gen are required");
  const auto real_dir = resolve_input(ctx, a.real);
  const auto gen_dir = resolve_input(ctx, a.gen);
  require(fs::is_directory(real_dir), ErrorKind::kMissingFile, "--real directory not found: " + a.real);
  require(fs::is_directory(gen_dir), ErrorKind::kMissingFile, "--gen directory not found: " + a.gen);

  const auto out_path = resolve_output(ctx, a.out);
  if (out_path.has_parent_path()) fs::create_directories(out_path.parent_path());
  const auto dir = out_path.parent_path().empty() ? fs::path(".") : out_path.parent_path();
  RunLock lock(dir);
  write_resolved_config(ctx, dir, "evaluate");
  RunManifest manifest("evaluate", ctx.cfg, dir);

  // Every set is compared at the extent of the first real volume.
  std::vector<Volume> real, gen;
  std::optional<Extent3> extent;
  std::int64_t skipped = 0;
  auto load_set = [&](const fs::path& d, std::vector<Volume>& into) {
    for (const auto& f : volume_files(d)) {
      Volume v;
      try {
        v = load_volume(f);
      } catch (const Error& e) {
        ctx.err << "skipping " << f.string() << ": " << e.what() << '\n';
        ++skipped;
        continue;
      }
      if (!extent) extent = v.shape;
      if (!(v.shape == *extent)) {
        ctx.err << "skipping " << f.string() << ": extent " << to_string(v.shape) << " differs from "
                << to_string(*extent) << '\n';
        ++skipped;
        continue;
      }
      manifest.input(f);
      into.push_back(std::move(v));
    }
  };
  load_set(real_dir, real);
  load_set(gen_dir, gen);
  ctx.out << "real: " << real.size() << " gen: " << gen.size() << " skipped: " << skipped << '\n';

  const auto& mc = ctx.cfg.metrics;
  metrics::VolumeFeatureExtractor extractor(mc.extractor_seed, mc.feature_dim);
  const auto extractor_hash = extractor->identity();
  std::ostringstream rows;
  auto row = [&](const std::string& metric, const std::string& pair, double value, std::size_t n) {
    rows << metric << ',' << pair << ',' << fmt(value, 10) << ',' << n << '\n';
    ctx.out << metric << " (" << pair << "): " << fmt(value, 10) << '\n';
  };
  const auto paired = std::min(real.size(), gen.size());
  auto paired_mean = [&](auto&& fn) {
    double acc = 0;
    for (std::size_t i = 0; i < paired; ++i) acc += fn(real[i], gen[i]);
    return acc / static_cast<double>(paired);
  };
  std::optional<metrics::FeatureSet> fr, fg;
  auto features = [&]() {
    if (!fr) {
      fr = metrics::embed(extractor, real);
      fg = metrics::embed(extractor, gen);
    }
  };
  std::vector<std::string> notes;
  for (const auto& m : wanted) {
    try {
      if (m == "psnr" || m == "ssim" || m == "ms_ssim") {
        require(paired >= 1, ErrorKind::kInvalidArgument, "no paired volumes");
        if (m == "psnr") {
          // Identical pairs give +inf; report the mean over finite pairs and count the rest.
          double acc = 0;
          std::size_t finite = 0;
          for (std::size_t i = 0; i < paired; ++i) {
            const double v = metrics::psnr(real[i], gen[i], mc.data_range);
            if (std::isfinite(v)) {
              acc += v;
              ++finite;
            }
          }
          row(m, "real:gen", finite ? acc / static_cast<double>(finite) : metrics::kPsnrIdentical, paired);
        } else if (m == "ssim") {
          metrics::SsimOptions o;
          o.data_range = mc.data_range;
          row(m, "real:gen", paired_mean([&](const Volume& x, const Volume& y) { return metrics::ssim(x, y, o); }),
              paired);
        } else {
          metrics::SsimOptions o;
          o.data_range = mc.data_range;
          row(m, "real:gen",
              paired_mean([&](const Volume& x, const Volume& y) { return metrics::ms_ssim(x, y, o); }), paired);
        }
      } else if (m == "mmd") {
        features();
        row(m, "real:gen", metrics::mmd(*fr, *fg).value, real.size() + gen.size());
      } else if (m == "frechet") {
        features();
        row(m, "real:gen", metrics::frechet_distance(*fr, *fg, mc.frechet_eps), real.size() + gen.size());
      } else if (m == "diversity") {
        metrics::SsimOptions o;
        o.data_range = mc.data_range;
        row(m, "gen:gen", metrics::diversity_msssim(gen, mc.max_pairs, mc.pair_seed, o), gen.size());
      }
    } catch (const Error& e) {
      ctx.err << m << " skipped: " << e.what() << '\n';
      notes.push_back(m + ": " + e.what());
    }
  }

  std::ofstream os(out_path);
  require(static_cast<bool>(os), ErrorKind::kIo, "cannot write " + out_path.string());
  os << "# config_hash," << ctx.cfg.hash() << '\n';
  os << "# metrics_config_hash," << hash_text(ctx.cfg.to_json()["metrics"].dump()) << '\n';
  os << "# extractor_hash," << extractor_hash << '\n';
  os << "# skipped_items," << skipped << '\n';
  os << "metric,set_pair,value,n\n" << rows.str();
  os.close();
  ctx.out << "extractor_hash: " << extractor_hash << '\n';
  manifest.output(out_path);
  manifest.note("skipped_items", skipped);
  manifest.note("metric_errors", notes);
  manifest.write();
  return notes.empty() ? kExitOk : kExitRuntime;
}

struct ReconstructArgs {
  std::string pvae;
  std::string input;
  std::string out = "reconstruction.raw";
  std::string decoder = "joint";
};

int cmd_reconstruct(Context& ctx, const ReconstructArgs& a) {
  require(a.decoder == "joint" || a.decoder == "patch", ErrorKind::kConfig, "--decoder must be joint or patch");
  const auto pvae_path = require_file(ctx, "--pvae", a.pvae);
  const auto in_path = require_file(ctx, "--input", a.input);
  const auto out_path = resolve_output(ctx, a.out);
  const auto dir = out_path.parent_path().empty() ? fs::path(".") : out_path.parent_path();
  fs::create_directories(dir);
  RunLock lock(dir);
  write_resolved_config(ctx, dir, "reconstruct");
  RunManifest manifest("reconstruct", ctx.cfg, dir);
  manifest.input(pvae_path);
  manifest.input(in_path);

  auto model = pvae::load_model(pvae_path);
  model->eval();
  const auto vol = load_volume(in_path);
  torch::NoGradGuard no_grad;
  const auto lat = model->encode_volume_patchwise(vol);
  const auto rec = a.decoder == "joint" ? model->decode_volume_joint(lat) : model->decode_volume_patchwise(lat);
  save_volume(rec, out_path);
  manifest.output(out_path);
  const auto layout = make_layout(vol.shape, model->config().patch_shape);
  ctx.out << "psnr: " << fmt(metrics::psnr(vol, rec, ctx.cfg.metrics.data_range)) << '\n';
  ctx.out << "seam: " << fmt(metrics::seam_discontinuity(rec, layout)) << '\n';
  manifest.write();
  return kExitOk;
}

int exit_code_for(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::kInvalidArgument:
    case ErrorKind::kConfig:
    case ErrorKind::kMissingFile:
    case ErrorKind::kSchema:
    case ErrorKind::kHashMismatch:
    case ErrorKind::kShapeMismatch:
      return kExitUsage;
    default:
      return kExitRuntime;
  }
}

}  // namespace

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"meddiff: patch-volume autoencoder + latent diffusion toolkit", "meddiff"};
  app.require_subcommand(1);
  std::string config_path;
  app.add_option("--config", config_path, "experiment configuration (JSON)");

  GenDataArgs gd;
  auto* gen_data = app.add_subcommand("gen-data", "generate synthetic phantoms (and undersampled pairs)");
  gen_data->add_option("--out", gd.out, "output directory");
  gen_data->add_option("--count", gd.count, "number of phantoms");
  gen_data->add_option("--family", gd.families, "phantom family (repeatable)");
  gen_data->add_option("--seed", gd.seed, "master seed");
  gen_data->add_option("--extent", gd.extent, "cubic extent");
  gen_data->add_flag("--pairs", gd.pairs, "also build k-space undersampling pairs");

  TrainPvaeArgs tp;
  auto* train_pvae = app.add_subcommand("train-pvae", "train the patch-volume autoencoder");
  train_pvae->add_option("--stage", tp.stage, "1 (patch-wise) or 2 (volume-wise)")->required();
  train_pvae->add_option("--data", tp.data, "dataset directory or manifest");
  train_pvae->add_option("--out", tp.out, "output directory");
  train_pvae->add_option("--init", tp.init, "stage-1 checkpoint (stage 2)");
  train_pvae->add_option("--steps", tp.steps, "override step count");
  train_pvae->add_flag("--resume", tp.resume, "continue from the trainer checkpoint in --out");

  TrainDiffusionArgs td;
  auto* train_diff = app.add_subcommand("train-diffusion", "train the latent noise estimator");
  train_diff->add_option("--pvae", td.pvae, "autoencoder checkpoint")->required();
  train_diff->add_option("--data", td.data, "dataset directory or manifest");
  train_diff->add_option("--out", td.out, "output directory");
  train_diff->add_option("--steps", td.steps, "override step count");

  SampleArgs sa;
  auto* sample = app.add_subcommand("sample", "sample volumes from a trained estimator");
  sample->add_option("--estimator", sa.estimator, "estimator checkpoint")->required();
  sample->add_option("--pvae", sa.pvae, "autoencoder checkpoint")->required();
  sample->add_option("--out", sa.out, "output directory");
  sample->add_option("--count", sa.count, "number of samples");
  sample->add_option("--class", sa.class_name, "class tag");
  sample->add_option("--seed", sa.seed, "sampling seed");

  TrainControlnetArgs tc;
  auto* train_ctrl = app.add_subcommand("train-controlnet", "fine-tune a conditional adapter");
  train_ctrl->add_option("--base", tc.base, "estimator checkpoint")->required();
  train_ctrl->add_option("--pvae", tc.pvae, "autoencoder checkpoint")->required();
  train_ctrl->add_option("--pairs", tc.pairs, "pairs manifest or directory")->required();
  train_ctrl->add_option("--out", tc.out, "output directory");
  train_ctrl->add_option("--steps", tc.steps, "override step count");

  CondSampleArgs cs;
  auto* cond_sample = app.add_subcommand("cond-sample", "conditional sampling with an adapter");
  cond_sample->add_option("--base", cs.base, "estimator checkpoint")->required();
  cond_sample->add_option("--pvae", cs.pvae, "autoencoder checkpoint")->required();
  cond_sample->add_option("--adapter", cs.adapter, "adapter checkpoint")->required();
  cond_sample->add_option("--pairs", cs.pairs, "pairs manifest (conditions)");
  cond_sample->add_option("--condition", cs.condition, "single condition volume");
  cond_sample->add_option("--class", cs.class_name, "class tag override");
  cond_sample->add_option("--out", cs.out, "output directory");
  cond_sample->add_option("--seed", cs.seed, "sampling seed");

  EvaluateArgs ev;
  auto* evaluate = app.add_subcommand("evaluate", "compare a generated set against a real set");
  evaluate->add_option("--real", ev.real, "directory of reference volumes")->required();
  evaluate->add_option("--gen", ev.gen, "directory of generated volumes")->required();
  evaluate->add_option("--metrics", ev.metrics, "comma-separated metric list");
  evaluate->add_option("--out", ev.out, "report CSV path");

  ReconstructArgs rc;
  auto* reconstruct = app.add_subcommand("reconstruct", "autoencoder round trip of one volume");
  reconstruct->add_option("--pvae", rc.pvae, "autoencoder checkpoint")->required();
  reconstruct->add_option("--input", rc.input, "input volume")->required();
  reconstruct->add_option("--out", rc.out, "output volume");
  reconstruct->add_option("--decoder", rc.decoder, "joint or patch");

  std::vector<std::string> argv_store{"meddiff"};
  argv_store.insert(argv_store.end(), args.begin(), args.end());
  std::vector<char*> argv;
  for (auto& s : argv_store) argv.push_back(s.data());
  try {
    app.parse(static_cast<int>(argv.size()), argv.data());
  } catch (const CLI::ParseError& e) {
    if (e.get_exit_code() == 0) {
      out << app.help();
      if (!app.get_subcommands().empty()) out << app.get_subcommands().front()->help();
      return kExitOk;
    }
    err << "error: " << e.what() << '\n' << "run 'meddiff --help' for usage\n";
    return kExitUsage;
  }

  try {
    Context ctx{config_path.empty() ? ExperimentConfig::from_json(json::object())
                                    : ExperimentConfig::load(config_path),
                {}, out, err};
    ctx.root = run_root(ctx.cfg);
    torch::set_num_threads(static_cast<int>(ctx.cfg.runtime.threads));
    if (gen_data->parsed()) return cmd_gen_data(ctx, gd);
    if (train_pvae->parsed()) return cmd_train_pvae(ctx, tp);
    if (train_diff->parsed()) return cmd_train_diffusion(ctx, td);
    if (sample->parsed()) return cmd_sample(ctx, sa);
    if (train_ctrl->parsed()) return cmd_train_controlnet(ctx, tc);
    if (cond_sample->parsed()) return cmd_cond_sample(ctx, cs);
    if (evaluate->parsed()) return cmd_evaluate(ctx, ev);
    if (reconstruct->parsed()) return cmd_reconstruct(ctx, rc);
    err << "error: no command given\n";
    return kExitUsage;
  } catch (const Error& e) {
    err << "error [" << to_string(e.kind()) << "]: " << e.what() << '\n';
    return exit_code_for(e.kind());
  } catch (const json::exception& e) {
    err << "error [config]: " << e.what() << '\n';
    return kExitUsage;
  } catch (const std::exception& e) {
    err << "error [runtime]: " << e.what() << '\n';
    return kExitRuntime;
  }
}

}  // namespace meddiff::cli
