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

// Latent denoising diffusion: noise schedule, forward noising, ancestral
// sampling and the noise-prediction objective.

#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>
#include <torch/torch.h>

#include "meddiff/torch_util.hpp"

namespace meddiff::diffusion {

// Arrays are indexed by timestep t = 0..T; entry 0 is the clean state
// (alpha_bar[0] = 1, beta[0] = 0) and is never used for noising.
struct NoiseSchedule {
  std::int64_t T = 0;
  std::vector<double> beta;
  std::vector<double> alpha;
  std::vector<double> alpha_bar;
  std::vector<double> sigma;

  // Squared-cosine retention curve with offset s; betas clipped to <= 0.999.
  static NoiseSchedule cosine(std::int64_t T, double s = 0.008);
  // Arbitrary betas for t = 1..T. Only finiteness and [0, 1) are checked, so
  // degenerate synthetic schedules (beta = 0) are allowed for testing.
  static NoiseSchedule from_betas(const std::vector<double>& betas);

  // Strict invariants: 0 < beta < 1, alpha_bar strictly decreasing, sigma > 0 for t > 1.
  void validate() const;
  std::string hash() const;
  nlohmann::json summary() const;
};

// Estimator signature: (z_t [B,...], t [B] int64, class [B] int64) -> eps_hat.
using Estimator =
    std::function<torch::Tensor(const torch::Tensor&, const torch::Tensor&, const torch::Tensor&)>;

torch::Tensor q_sample(const torch::Tensor& z0, std::int64_t t, const torch::Tensor& eps,
                       const NoiseSchedule& sched);
// Per-example timesteps, t [B].
torch::Tensor q_sample(const torch::Tensor& z0, const torch::Tensor& t, const torch::Tensor& eps,
                       const NoiseSchedule& sched);

torch::Tensor posterior_mean(const torch::Tensor& zt, std::int64_t t, const torch::Tensor& eps_hat,
                             const NoiseSchedule& sched);

torch::Tensor p_sample_step(const torch::Tensor& zt, std::int64_t t, const Estimator& estimator,
                            const torch::Tensor& c, const NoiseSchedule& sched, Rng& rng);

// Wraps an estimator so the clean latent it implies, (z_t - sqrt(1 - abar) eps_hat) / sqrt(abar),
// is clamped to [-bound, bound]; returns the noise estimate consistent with the clamped latent.
// Near t = T the implied latent is divided by sqrt(abar) ~ 0, so without a bound small estimator
// errors are amplified by the first reverse steps. bound <= 0 leaves the estimator unchanged.
Estimator clip_denoised(Estimator estimator, const NoiseSchedule& sched, double bound);

// Ancestral sampling from standard-normal z_T.
torch::Tensor sample(const Estimator& estimator, at::IntArrayRef shape, const torch::Tensor& c,
                     const NoiseSchedule& sched, Rng& rng);
// Same, starting from a given z_T.
torch::Tensor sample_from(const torch::Tensor& z_T, const Estimator& estimator,
                          const torch::Tensor& c, const NoiseSchedule& sched, Rng& rng);

struct DiffusionBatch {
  torch::Tensor z0;
  torch::Tensor t;  // [B] int64 in [1, T]
  torch::Tensor eps;
  torch::Tensor zt;
  torch::Tensor c;
};

DiffusionBatch draw_batch(const torch::Tensor& z0, const torch::Tensor& c,
                          const NoiseSchedule& sched, Rng& rng);
// Mean squared error between the drawn noise and the estimate.
torch::Tensor batch_loss(const Estimator& estimator, const DiffusionBatch& batch);
torch::Tensor diffusion_loss(const Estimator& estimator, const torch::Tensor& z0,
                             const torch::Tensor& c, const NoiseSchedule& sched, Rng& rng);

// Per-channel standardization of latents, stored with every estimator.
struct LatentStats {
  std::vector<double> mean;
  std::vector<double> std;

  // latents: [N, C, ...]
  static LatentStats compute(const torch::Tensor& latents);
  static LatentStats identity(std::int64_t channels);
  torch::Tensor standardize(const torch::Tensor& z) const;
  torch::Tensor destandardize(const torch::Tensor& z) const;

  nlohmann::json to_json() const;
  static LatentStats from_json(const nlohmann::json& j);
};

// Linear (power 1) polynomial decay from base_lr towards zero over total steps.
double polynomial_lr(double base_lr, std::int64_t step, std::int64_t total, double power = 1.0);

}  // namespace meddiff::diffusion
