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

// Shared fixtures for the unit and acceptance tests.

#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iterator>
#include <random>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include <unistd.h>

#include <torch/torch.h>

#include "meddiff/biflownet.hpp"
#include "meddiff/cli.hpp"
#include "meddiff/pvae.hpp"
#include "meddiff/volume.hpp"

namespace meddiff::testing {

// Fresh, empty scratch directory unique to this process.
inline std::filesystem::path scratch_dir(const std::string& name) {
  auto dir = std::filesystem::temp_directory_path() / "meddiff_tests" /
             (name + "-" + std::to_string(::getpid()));
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  return dir;
}

inline Volume random_volume(const Extent3& extent, std::uint64_t seed, const std::string& tag = "") {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<float> u(-1.0f, 1.0f);
  Volume v(extent, Spacing3{}, tag);
  for (auto& x : v.data) x = u(rng);
  return v;
}

// Smooth random field: sum of a few low-frequency cosines, scaled into [-1, 1].
inline Volume smooth_volume(const Extent3& extent, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  Volume v(extent);
  struct Wave { double fi, fj, fk, phase, amp; };
  std::vector<Wave> waves;
  for (int n = 0; n < 4; ++n)
    waves.push_back({u(rng) * 2, u(rng) * 2, u(rng) * 2, u(rng) * 6.28, 0.2 + 0.2 * u(rng)});
  for (std::int64_t i = 0; i < extent.h; ++i)
    for (std::int64_t j = 0; j < extent.w; ++j)
      for (std::int64_t k = 0; k < extent.d; ++k) {
        double s = 0;
        for (const auto& w : waves)
          s += w.amp * std::cos(6.2832 * (w.fi * i / extent.h + w.fj * j / extent.w +
                                          w.fk * k / extent.d) + w.phase);
        v.at(i, j, k) = static_cast<float>(std::clamp(s, -1.0, 1.0));
      }
  return v;
}

struct GradCheck {
  std::int64_t checked = 0;
  double max_rel = 0.0;
  std::string worst;
};

// Central finite differences against autograd on a random subset of scalar
// parameters. Entries whose analytic gradient is below `min_grad` are skipped
// because their relative error is dominated by rounding.
inline GradCheck check_gradients(const std::function<torch::Tensor()>& loss_fn,
                                 const std::vector<std::pair<std::string, torch::Tensor>>& params,
                                 std::int64_t samples, std::uint64_t seed, double h = 1e-6,
                                 double min_grad = 1e-6) {
  for (const auto& [name, p] : params)
    if (p.grad().defined()) p.mutable_grad().zero_();
  loss_fn().backward();

  std::vector<std::pair<std::size_t, std::int64_t>> entries;
  for (std::size_t n = 0; n < params.size(); ++n)
    for (std::int64_t i = 0; i < params[n].second.numel(); ++i) entries.emplace_back(n, i);
  std::mt19937_64 rng(seed);
  std::shuffle(entries.begin(), entries.end(), rng);

  GradCheck out;
  torch::NoGradGuard no_grad;
  for (const auto& [n, i] : entries) {
    if (out.checked >= samples) break;
    const auto& p = params[n].second;
    if (!p.grad().defined()) continue;
    const double analytic = p.grad().reshape({-1})[i].item<double>();
    if (std::abs(analytic) < min_grad) continue;
    auto flat = p.data().view({-1});
    const double orig = flat[i].item<double>();
    flat[i] = orig + h;
    const double up = loss_fn().item<double>();
    flat[i] = orig - h;
    const double down = loss_fn().item<double>();
    flat[i] = orig;
    const double numeric = (up - down) / (2 * h);
    const double rel = std::abs(analytic - numeric) / std::max(std::abs(analytic), std::abs(numeric));
    if (rel > out.max_rel) {
      out.max_rel = rel;
      std::ostringstream s;
      s << params[n].first << "[" << i << "] analytic=" << analytic << " numeric=" << numeric;
      out.worst = s.str();
    }
    ++out.checked;
  }
  return out;
}

inline std::vector<std::pair<std::string, torch::Tensor>> named_params(
    const torch::nn::Module& m, const std::string& prefix = "") {
  std::vector<std::pair<std::string, torch::Tensor>> out;
  for (const auto& item : m.named_parameters(true))
    if (item.value().requires_grad()) out.emplace_back(prefix + item.key(), item.value());
  return out;
}

inline pvae::PvaeConfig tiny_pvae_config() {
  pvae::PvaeConfig c;
  c.patch_shape = {8, 8, 8};
  c.widths = {4, 4, 4};
  c.codebook_size = 16;
  c.code_dim = 2;
  c.norm_groups = 2;
  c.disc_warmup = 0;
  c.disc_channels = 4;
  c.feature_channels = 4;
  return c;
}

inline biflownet::BiFlowNetConfig tiny_biflownet_config() {
  biflownet::BiFlowNetConfig c;
  c.channels = 2;
  c.latent_patch = {4, 4, 4};
  c.token = 2;
  c.embed_dim = 8;
  c.depth = 4;
  c.heads = 2;
  c.mlp_ratio = 1;
  c.unet_widths = {2, 4, 4};
  c.norm_groups = 2;
  c.cond_dim = 8;
  c.num_classes = 2;
  return c;
}

struct CliResult {
  int code = 0;
  std::string out;
  std::string err;
};

inline CliResult run_cli(const std::vector<std::string>& args) {
  std::ostringstream out, err;
  CliResult r;
  r.code = cli::run(args, out, err);
  r.out = out.str();
  r.err = err.str();
  return r;
}

inline std::string read_text(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

}  // namespace meddiff::testing
