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


#include <doctest.h>

#include <fstream>
#include <sstream>

#include <nlohmann/json.hpp>

#include "meddiff/biflownet.hpp"
#include "meddiff/cli.hpp"
#include "meddiff/diffusion.hpp"
#include "meddiff/error.hpp"
#include "meddiff/hash.hpp"
#include "meddiff/synthdata.hpp"
#include "support.hpp"

using namespace meddiff;
using meddiff::testing::read_text;
using meddiff::testing::run_cli;
namespace fs = std::filesystem;

namespace {

nlohmann::json tiny_config(const fs::path& root) {
  auto j = nlohmann::json::parse(R"({
    "data": {"count": 4, "extent": [16, 16, 16]},
    "pvae": {"model": {"patch_shape": [8, 8, 8], "widths": [4, 8, 8], "codebook_size": 32,
                       "code_dim": 4, "disc_warmup": 2, "disc_channels": 4, "feature_channels": 4},
             "stage1": {"steps": 6, "batch_size": 2}, "stage2": {"steps": 2}},
    "diffusion": {"T": 20},
    "biflownet": {"model": {"embed_dim": 16, "cond_dim": 16, "heads": 2, "unet_widths": [8, 16, 16]},
                  "train": {"steps": 4}},
    "controlnet": {"finetune": {"steps": 3}},
    "runtime": {"log_interval": 1}
  })");
  j["runtime"]["run_dir"] = root.string();
  return j;
}

fs::path write_config(const fs::path& dir, const nlohmann::json& j, const std::string& name = "cfg.json") {
  std::ofstream(dir / name) << j.dump(2);
  return dir / name;
}

std::vector<std::string> csv_lines(const fs::path& p) {
  std::istringstream in(read_text(p));
  std::vector<std::string> out;
  for (std::string line; std::getline(in, line);) out.push_back(line);
  return out;
}

// One full pipeline shared by the tests below.
struct Pipeline {
  fs::path root;
  std::string config;
  meddiff::testing::CliResult gen, stage1, stage2, diffusion, sample, control, cond;
};

const Pipeline& pipeline() {
  static const Pipeline p = [] {
    Pipeline p;
    p.root = meddiff::testing::scratch_dir("cli_pipeline");
    p.config = write_config(p.root, tiny_config(p.root)).string();
    const auto& c = p.config;
    p.gen = run_cli({"--config", c, "gen-data", "--out", "data", "--pairs"});
    p.stage1 = run_cli({"--config", c, "train-pvae", "--stage", "1", "--data", "data", "--out", "s1"});
    p.stage2 = run_cli({"--config", c, "train-pvae", "--stage", "2", "--data", "data", "--out", "s2",
                        "--init", "s1/pvae_stage1.ckpt"});
    p.diffusion = run_cli({"--config", c, "train-diffusion", "--pvae", "s2/pvae_stage2.ckpt", "--data",
                           "data", "--out", "diff"});
    p.sample = run_cli({"--config", c, "sample", "--estimator", "diff/estimator.ckpt", "--pvae",
                        "s2/pvae_stage2.ckpt", "--count", "3", "--seed", "5", "--out", "samples"});
    p.control = run_cli({"--config", c, "train-controlnet", "--base", "diff/estimator.ckpt", "--pvae",
                         "s2/pvae_stage2.ckpt", "--pairs", "data/pairs", "--out", "cn"});
    p.cond = run_cli({"--config", c, "cond-sample", "--base", "diff/estimator.ckpt", "--pvae",
                      "s2/pvae_stage2.ckpt", "--adapter", "cn/adapter.ckpt", "--pairs", "data/pairs",
                      "--out", "cs"});
    return p;
  }();
  return p;
}

}  // namespace

TEST_SUITE("cli") {

TEST_CASE("configuration parsing") {
  cli::ExperimentConfig c;
  auto back = cli::ExperimentConfig::from_json(c.to_json());
  CHECK(back.hash() == c.hash());
  auto j = c.to_json();
  j["pvae"]["model"]["bogus"] = 1;
  CHECK_THROWS_AS(cli::ExperimentConfig::from_json(j), Error);
  CHECK_THROWS_AS(cli::ExperimentConfig::from_json({{"unknown_section", 1}}), Error);
  auto partial = cli::ExperimentConfig::from_json({{"diffusion", {{"T", 50}}}});
  CHECK(partial.diffusion.T == 50);
  CHECK(partial.pvae.model.to_json() == c.pvae.model.to_json());
  CHECK(c.pvae.model.codebook_size == 8192);
  CHECK(c.pvae.model.lambda_adv == 2.0);
  CHECK(c.pvae.model.lambda_tp == 4.0);
  CHECK(c.pvae.stage1.lr == 3e-4);
  CHECK(c.pvae.stage2.lr == 3e-5);
  CHECK(c.diffusion.T == 1000);
}

TEST_CASE("gen-data writes the requested phantoms reproducibly") {
  auto root = meddiff::testing::scratch_dir("cli_gen");
  auto cfg = write_config(root, tiny_config(root)).string();
  auto a = run_cli({"--config", cfg, "gen-data", "--count", "20", "--extent", "8", "--out", "a", "--seed", "3"});
  REQUIRE(a.code == 0);
  auto b = run_cli({"--config", cfg, "gen-data", "--count", "20", "--extent", "8", "--out", "b", "--seed", "3"});
  REQUIRE(b.code == 0);
  std::int64_t files = 0;
  for (int n = 0; n < 20; ++n) {
    char name[32];
    std::snprintf(name, sizeof(name), "volume_%04d.raw", n);
    REQUIRE(fs::exists(root / "a" / name));
    CHECK(hash_file(root / "a" / name) == hash_file(root / "b" / name));
    ++files;
  }
  CHECK(files == 20);
  CHECK(synthdata::read_dataset(root / "a" / "manifest.jsonl").size() == 20);
  CHECK(read_text(root / "a" / "manifest.jsonl") == read_text(root / "b" / "manifest.jsonl"));
  CHECK(fs::exists(root / "a" / "run_gen-data.json"));
  CHECK(a.out.find("config_hash: ") != std::string::npos);
}

TEST_CASE("usage errors exit with 2") {
  auto root = meddiff::testing::scratch_dir("cli_usage");
  auto cfg = write_config(root, tiny_config(root)).string();
  auto bad = run_cli({"--config", cfg, "gen-data", "--family", "banana", "--out", "x"});
  CHECK(bad.code == 2);
  CHECK(bad.err.find("ellipsoid-organ") != std::string::npos);
  CHECK(run_cli({"--config", cfg, "train-pvae", "--stage", "2", "--out", "s2"}).code == 2);
  CHECK(run_cli({"--config", cfg, "no-such-command"}).code == 2);
  CHECK(run_cli({}).code == 2);
  CHECK(run_cli({"--help"}).code == 0);
  CHECK(run_cli({"--config", (root / "missing.json").string(), "gen-data"}).code == 2);
  auto broken = tiny_config(root);
  broken["pvae"]["stage1"]["loss_log"] = "x.csv";
  CHECK(run_cli({"--config", write_config(root, broken, "b.json").string(), "gen-data"}).code == 2);
}

TEST_CASE("pipeline: autoencoder stages") {
  const auto& p = pipeline();
  REQUIRE(p.gen.code == 0);
  CHECK(fs::exists(p.root / "data" / "pairs" / "pairs.jsonl"));
  INFO(p.stage1.err);
  REQUIRE(p.stage1.code == 0);
  auto lines = csv_lines(p.root / "s1" / "loss_stage1.csv");
  REQUIRE(lines.size() == 7);
  CHECK(lines[0] == "step,loss_total,loss_vq,loss_adv,loss_tp");
  CHECK(lines[1].rfind("0,", 0) == 0);
  INFO(p.stage2.err);
  REQUIRE(p.stage2.code == 0);
  CHECK(p.stage2.out.find("encoder_hash_unchanged: true") != std::string::npos);
  auto run = nlohmann::json::parse(read_text(p.root / "s2" / "run_train-pvae-stage2.json"));
  CHECK(run.at("notes").at("encoder_hash_unchanged") == true);
  CHECK(run.at("inputs").size() >= 2);
}

TEST_CASE("pipeline: resume gives the same next-step loss") {
  const auto& p = pipeline();
  REQUIRE(p.gen.code == 0);
  const auto& c = p.config;
  REQUIRE(run_cli({"--config", c, "train-pvae", "--stage", "1", "--data", "data", "--out", "r",
                   "--steps", "3"}).code == 0);
  auto resumed = run_cli({"--config", c, "train-pvae", "--stage", "1", "--data", "data", "--out", "r", "--resume"});
  REQUIRE(resumed.code == 0);
  CHECK(resumed.out.find("resumed at step 3") != std::string::npos);
  CHECK(read_text(p.root / "r" / "loss_stage1.csv") == read_text(p.root / "s1" / "loss_stage1.csv"));
}

TEST_CASE("pipeline: diffusion training and sampling") {
  const auto& p = pipeline();
  INFO(p.diffusion.err);
  REQUIRE(p.diffusion.code == 0);
  CHECK(p.diffusion.out.find("schedule: {") != std::string::npos);
  CHECK(p.diffusion.out.find("\"T\":20") != std::string::npos);
  CHECK(p.diffusion.out.find("alpha_bar_T") != std::string::npos);
  CHECK(csv_lines(p.root / "diff" / "loss_diffusion.csv").front() == "step,loss,lr");

  INFO(p.sample.err);
  REQUIRE(p.sample.code == 0);
  for (int n = 0; n < 3; ++n) CHECK(fs::exists(p.root / "samples" / ("sample_000" + std::to_string(n) + ".raw")));
  CHECK(!fs::exists(p.root / "samples" / "sample_0003.raw"));
  auto again = run_cli({"--config", p.config, "sample", "--estimator", "diff/estimator.ckpt", "--pvae",
                        "s2/pvae_stage2.ckpt", "--count", "3", "--seed", "5", "--out", "samples_again"});
  REQUIRE(again.code == 0);
  for (int n = 0; n < 3; ++n) {
    const auto name = "sample_000" + std::to_string(n) + ".raw";
    CHECK(hash_file(p.root / "samples" / name) == hash_file(p.root / "samples_again" / name));
  }
  auto unknown = run_cli({"--config", p.config, "sample", "--estimator", "diff/estimator.ckpt", "--pvae",
                          "s2/pvae_stage2.ckpt", "--class", "no-such-class", "--out", "x"});
  CHECK(unknown.code == 2);
  CHECK(unknown.err.find("ellipsoid-organ") != std::string::npos);
}

TEST_CASE("pipeline: class-count mismatch") {
  const auto& p = pipeline();
  REQUIRE(p.stage2.code == 0);
  auto j = tiny_config(p.root);
  j["biflownet"]["model"]["num_classes"] = 3;
  auto cfg = write_config(p.root, j, "three_classes.json").string();
  CHECK(run_cli({"--config", cfg, "train-diffusion", "--pvae", "s2/pvae_stage2.ckpt", "--data", "data",
                 "--out", "bad"}).code == 2);
}

TEST_CASE("pipeline: conditional adapter") {
  const auto& p = pipeline();
  INFO(p.control.err);
  REQUIRE(p.control.code == 0);
  INFO(p.cond.err);
  REQUIRE(p.cond.code == 0);
  CHECK(p.cond.out.find("base_hash_verified: ") != std::string::npos);
  CHECK(fs::exists(p.root / "cs" / "cond_0000.raw"));

  // Step-0 fine-tuning loss equals the frozen base on the same batch.
  auto bundle = biflownet::load_bundle(p.root / "diff" / "estimator.ckpt");
  auto model = pvae::load_model(p.root / "s2" / "pvae_stage2.ckpt");
  model->eval();
  auto rows = synthdata::read_pairs(p.root / "data" / "pairs" / "pairs.jsonl");
  std::vector<torch::Tensor> targets;
  std::vector<std::int64_t> ids;
  {
    torch::NoGradGuard g;
    for (const auto& r : rows) {
      targets.push_back(bundle.stats.standardize(model->encode_volume_patchwise(load_volume(r.target)).features));
      ids.push_back(bundle.class_index(r.class_tag));
    }
  }
  auto z0 = torch::cat(targets, 0);
  auto cls = torch::tensor(ids, torch::kLong);
  cli::ExperimentConfig cfg = cli::ExperimentConfig::load(p.config);
  Rng rng(cfg.controlnet.finetune.seed);
  auto idx = rng.randint(z0.size(0), {cfg.controlnet.finetune.batch_size});
  auto batch = diffusion::draw_batch(z0.index_select(0, idx), cls.index_select(0, idx), bundle.schedule, rng);
  double base_loss = 0;
  {
    torch::NoGradGuard g;
    base_loss = diffusion::batch_loss(biflownet::as_estimator(bundle.net), batch).item<double>();
  }
  auto lines = csv_lines(p.root / "cn" / "loss_controlnet.csv");
  REQUIRE(lines.size() >= 2);
  const double logged = std::stod(lines[1].substr(lines[1].find(',') + 1));
  CHECK(std::abs(logged - base_loss) <= 1e-6 * std::max(1.0, std::abs(base_loss)));

  auto missing = run_cli({"--config", p.config, "train-controlnet", "--base", "diff/estimator.ckpt", "--pvae",
                          "s2/pvae_stage2.ckpt", "--pairs", "nowhere", "--out", "cn2"});
  CHECK(missing.code == 2);

  // A different base estimator is rejected by hash.
  auto other = run_cli({"--config", p.config, "train-diffusion", "--pvae", "s2/pvae_stage2.ckpt", "--data",
                        "data", "--out", "diff_other", "--steps", "1"});
  INFO(other.err);
  REQUIRE(other.code == 0);
  auto mismatch = run_cli({"--config", p.config, "cond-sample", "--base", "diff_other/estimator.ckpt", "--pvae",
                           "s2/pvae_stage2.ckpt", "--adapter", "cn/adapter.ckpt", "--pairs", "data/pairs",
                           "--out", "cs2"});
  CHECK(mismatch.code == 2);
}

TEST_CASE("pipeline: evaluation report") {
  const auto& p = pipeline();
  REQUIRE(p.gen.code == 0);
  auto same = run_cli({"--config", p.config, "evaluate", "--real", "data", "--gen", "data", "--out",
                       "eval/same.csv"});
  INFO(same.err);
  REQUIRE(same.code == 0);
  auto lines = csv_lines(p.root / "eval" / "same.csv");
  bool saw_hash = false, saw_header = false;
  for (const auto& l : lines) {
    if (l.rfind("# extractor_hash,phi3d-", 0) == 0) saw_hash = true;
    if (l == "metric,set_pair,value,n") saw_header = true;
    if (l.rfind("mmd,", 0) == 0) CHECK(std::stod(l.substr(l.find(',', 4) + 1)) == doctest::Approx(0.0));
    if (l.rfind("frechet,", 0) == 0) CHECK(std::abs(std::stod(l.substr(l.find(',', 8) + 1))) < 1e-3);
  }
  CHECK(saw_hash);
  CHECK(saw_header);
  CHECK(same.out.find("skipped: 0") != std::string::npos);

  // Generated set with one odd-sized volume.
  fs::create_directories(p.root / "mixed");
  for (int n = 0; n < 3; ++n) {
    auto v = meddiff::testing::random_volume({16, 16, 16}, n);
    save_volume(v, p.root / "mixed" / ("v" + std::to_string(n) + ".raw"));
  }
  save_volume(meddiff::testing::random_volume({8, 8, 8}, 9), p.root / "mixed" / "odd.raw");
  auto mixed = run_cli({"--config", p.config, "evaluate", "--real", "data", "--gen", "mixed", "--out",
                        "eval/mixed.csv", "--metrics", "psnr,mmd"});
  INFO(mixed.err);
  REQUIRE(mixed.code == 0);
  CHECK(mixed.out.find("skipped: 1") != std::string::npos);
  CHECK(read_text(p.root / "eval" / "mixed.csv").find("# skipped_items,1") != std::string::npos);
  CHECK(run_cli({"--config", p.config, "evaluate", "--real", "data", "--gen", "data", "--metrics", "fid"}).code == 2);
}

TEST_CASE("pipeline: reconstruct") {
  const auto& p = pipeline();
  REQUIRE(p.stage2.code == 0);
  auto r = run_cli({"--config", p.config, "reconstruct", "--pvae", "s2/pvae_stage2.ckpt", "--input",
                    "data/volume_0000.raw", "--out", "rec/out.raw"});
  INFO(r.err);
  REQUIRE(r.code == 0);
  CHECK(r.out.find("psnr: ") != std::string::npos);
  CHECK(r.out.find("seam: ") != std::string::npos);
  CHECK(load_volume(p.root / "rec" / "out.raw").shape == Extent3{16, 16, 16});
}

TEST_CASE("run directory lock") {
  auto root = meddiff::testing::scratch_dir("cli_lock");
  auto cfg = write_config(root, tiny_config(root)).string();
  fs::create_directories(root / "locked");
  // A lock held by this (live) process blocks the run.
  std::ofstream(root / "locked" / ".meddiff.lock") << ::getpid();
  CHECK(run_cli({"--config", cfg, "gen-data", "--out", "locked", "--count", "1"}).code == 3);
  // A lock left by a dead process is reclaimed.
  std::ofstream(root / "locked" / ".meddiff.lock", std::ios::trunc) << 999999999;
  CHECK(run_cli({"--config", cfg, "gen-data", "--out", "locked", "--count", "1"}).code == 0);
  CHECK(!fs::exists(root / "locked" / ".meddiff.lock"));
}

TEST_CASE("environment override of the run root") {
  auto root = meddiff::testing::scratch_dir("cli_env");
  auto j = tiny_config(root / "ignored");
  auto cfg = write_config(root, j).string();
  ::setenv("MEDDIFF_RUN_DIR", (root / "env").c_str(), 1);
  auto r = run_cli({"--config", cfg, "gen-data", "--out", "d", "--count", "1", "--extent", "8"});
  ::unsetenv("MEDDIFF_RUN_DIR");
  REQUIRE(r.code == 0);
  CHECK(fs::exists(root / "env" / "d" / "volume_0000.raw"));
}

}  // TEST_SUITE
