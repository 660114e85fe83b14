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

// Experiment configuration and the `meddiff` command-line driver.

#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "meddiff/biflownet.hpp"
#include "meddiff/controlnet.hpp"
#include "meddiff/pvae.hpp"
#include "meddiff/synthdata.hpp"

namespace meddiff::cli {

inline constexpr int kExitOk = 0;
inline constexpr int kExitUsage = 2;
inline constexpr int kExitRuntime = 3;

struct DataSection {
  std::vector<std::string> families{"ellipsoid-organ"};
  std::int64_t count = 8;
  Extent3 extent{32, 32, 32};
  std::uint64_t seed = 0;
  bool write_labels = true;
  std::string mask_kind = "gaussian-1d";
  double acceleration = 8.0;
  std::uint64_t pair_seed = 1;
};

struct PvaeSection {
  pvae::PvaeConfig model;
  pvae::TrainConfig stage1;
  pvae::TrainConfig stage2;

  PvaeSection();
};

struct DiffusionSection {
  std::int64_t T = 1000;
  double cosine_offset = 0.008;
  // Bound on the implied clean latent during sampling, in standardized units; 0 disables.
  double clip_denoised = 5.0;
};

struct BiflownetSection {
  biflownet::BiFlowNetConfig model;
  biflownet::TrainConfig train;

  BiflownetSection();
};

struct ControlnetSection {
  controlnet::FinetuneConfig finetune;
};

struct MetricsSection {
  std::int64_t max_pairs = 500;
  std::uint64_t extractor_seed = 1234;
  std::int64_t feature_dim = 128;
  double frechet_eps = 1e-6;
  double data_range = 2.0;
  std::uint64_t pair_seed = 0;
};

struct RuntimeSection {
  std::uint64_t seed = 0;
  std::string device = "cpu";
  std::string run_dir = "runs";
  std::int64_t log_interval = 50;
  std::int64_t threads = 1;
};

struct ExperimentConfig {
  DataSection data;
  PvaeSection pvae;
  DiffusionSection diffusion;
  BiflownetSection biflownet;
  ControlnetSection controlnet;
  MetricsSection metrics;
  RuntimeSection runtime;

  void validate() const;
  nlohmann::json to_json() const;
  // Missing keys take defaults; unknown keys throw kConfig.
  static ExperimentConfig from_json(const nlohmann::json& j);
  static ExperimentConfig load(const std::filesystem::path& path);
  std::string hash() const;
};

// Output root: MEDDIFF_RUN_DIR when set, else the configured run_dir.
std::filesystem::path run_root(const ExperimentConfig& cfg);

// Runs one command; returns the process exit code. `args` excludes argv[0].
int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace meddiff::cli
