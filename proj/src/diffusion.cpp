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

#include "meddiff/diffusion.hpp"

#include <cmath>
#include <numbers>

#include "meddiff/error.hpp"
#include "meddiff/hash.hpp"

namespace meddiff::diffusion {

namespace {

constexpr double kMaxBeta = 0.999;

NoiseSchedule build(const std::vector<double>& betas) {
  NoiseSchedule s;
  s.T = static_cast<std::int64_t>(betas.size());
  s.beta.assign(betas.size() + 1, 0.0);
  s.alpha.assign(betas.size() + 1, 1.0);
  s.alpha_bar.assign(betas.size() + 1, 1.0);
  s.sigma.assign(betas.size() + 1, 0.0);
  for (std::size_t t = 1; t <= betas.size(); ++t) {
    s.beta[t] = betas[t - 1];
    s.alpha[t] = 1.0 - s.beta[t];
    s.alpha_bar[t] = s.alpha_bar[t - 1] * s.alpha[t];
    s.sigma[t] = std::sqrt(s.beta[t]);
  }
  return s;
}

void check_t(const NoiseSchedule& s, std::int64_t t) {
  require(t >= 1 && t <= s.T, ErrorKind::kOutOfBounds,
          "timestep " + std::to_string(t) + " outside [1, " + std::to_string(s.T) + "]");
}

// Broadcastable [B, 1, ..., 1] view of per-example coefficients.
torch::Tensor per_example(const std::vector<double>& table, const torch::Tensor& t,
                          const torch::Tensor& like) {
  auto idx = t.to(torch::kLong).reshape({-1});
  auto values = torch::from_blob(const_cast<double*>(table.data()),
                                 {static_cast<std::int64_t>(table.size())}, torch::kDouble)
                    .index_select(0, idx);
  std::vector<std::int64_t> shape(static_cast<std::size_t>(like.dim()), 1);
  shape[0] = idx.size(0);
  return values.to(like.scalar_type()).reshape(shape);
}

}  // namespace

NoiseSchedule NoiseSchedule::cosine(std::int64_t T, double s) {
  require(T >= 2, ErrorKind::kInvalidArgument, "schedule needs T >= 2");
  require(std::isfinite(s) && s > 0 && s < 1, ErrorKind::kInvalidArgument,
          "cosine offset s must lie in (0, 1)");
  auto f = [&](double t) {
    const double c = std::cos((t / static_cast<double>(T) + s) / (1.0 + s) * std::numbers::pi / 2);
    return c * c;
  };
  const double f0 = f(0.0);
  std::vector<double> betas(static_cast<std::size_t>(T));
  for (std::int64_t t = 1; t <= T; ++t) {
    const double prev = f(static_cast<double>(t - 1)) / f0;
    const double cur = f(static_cast<double>(t)) / f0;
    betas[static_cast<std::size_t>(t - 1)] = std::min(1.0 - cur / prev, kMaxBeta);
  }
  // alpha_bar is re-accumulated from the clipped betas so every table agrees.
  NoiseSchedule sched = build(betas);
  sched.validate();
  return sched;
}

NoiseSchedule NoiseSchedule::from_betas(const std::vector<double>& betas) {
  require(!betas.empty(), ErrorKind::kInvalidArgument, "schedule needs at least one step");
  for (double b : betas) {
    require(std::isfinite(b) && b >= 0 && b < 1, ErrorKind::kInvalidArgument,
            "betas must lie in [0, 1)");
  }
  return build(betas);
}

void NoiseSchedule::validate() const {
  require(T >= 2, ErrorKind::kInvalidArgument, "schedule needs T >= 2");
  require(static_cast<std::int64_t>(beta.size()) == T + 1, ErrorKind::kShapeMismatch,
          "schedule tables have the wrong length");
  for (std::int64_t t = 1; t <= T; ++t) {
    require(beta[t] > 0 && beta[t] < 1, ErrorKind::kInvalidArgument,
            "beta[" + std::to_string(t) + "] outside (0, 1)");
    require(alpha_bar[t] < alpha_bar[t - 1], ErrorKind::kInvalidArgument,
            "alpha_bar not strictly decreasing at t = " + std::to_string(t));
    if (t > 1) {
      require(sigma[t] > 0, ErrorKind::kInvalidArgument,
              "sigma[" + std::to_string(t) + "] must be positive");
    }
  }
}

std::string NoiseSchedule::hash() const {
  Fnv1a h;
  h.update_value(T);
  for (double b : beta) h.update_value(b);
  return h.hex();
}

nlohmann::json NoiseSchedule::summary() const {
  return {{"T", T},
          {"alpha_bar_1", alpha_bar.at(1)},
          {"alpha_bar_T", alpha_bar.at(static_cast<std::size_t>(T))},
          {"beta_1", beta.at(1)},
          {"beta_T", beta.at(static_cast<std::size_t>(T))},
          {"hash", hash()}};
}

torch::Tensor q_sample(const torch::Tensor& z0, std::int64_t t, const torch::Tensor& eps,
                       const NoiseSchedule& sched) {
  check_t(sched, t);
  require(z0.sizes() == eps.sizes(), ErrorKind::kShapeMismatch, "noise shape differs from z0");
  const double ab = sched.alpha_bar[t];
  return std::sqrt(ab) * z0 + std::sqrt(1.0 - ab) * eps;
}

torch::Tensor q_sample(const torch::Tensor& z0, const torch::Tensor& t, const torch::Tensor& eps,
                       const NoiseSchedule& sched) {
  require(z0.sizes() == eps.sizes(), ErrorKind::kShapeMismatch, "noise shape differs from z0");
  require(t.numel() == z0.size(0), ErrorKind::kShapeMismatch, "one timestep per example needed");
  require(t.min().item<std::int64_t>() >= 1 && t.max().item<std::int64_t>() <= sched.T,
          ErrorKind::kOutOfBounds, "timestep outside [1, T]");
  std::vector<double> root_ab(sched.alpha_bar.size()), root_1m(sched.alpha_bar.size());
  for (std::size_t i = 0; i < root_ab.size(); ++i) {
    root_ab[i] = std::sqrt(sched.alpha_bar[i]);
    root_1m[i] = std::sqrt(1.0 - sched.alpha_bar[i]);
  }
  return per_example(root_ab, t, z0) * z0 + per_example(root_1m, t, z0) * eps;
}

Estimator clip_denoised(Estimator estimator, const NoiseSchedule& sched, double bound) {
  require(std::isfinite(bound), ErrorKind::kInvalidArgument, "clip bound must be finite");
  if (bound <= 0) return estimator;
  std::vector<double> root_ab(sched.alpha_bar.size()), root_1m(sched.alpha_bar.size());
  for (std::size_t i = 0; i < root_ab.size(); ++i) {
    root_ab[i] = std::sqrt(sched.alpha_bar[i]);
    root_1m[i] = std::sqrt(1.0 - sched.alpha_bar[i]);
  }
  return [estimator = std::move(estimator), root_ab, root_1m, bound](
             const torch::Tensor& zt, const torch::Tensor& t, const torch::Tensor& c) {
    auto eps = estimator(zt, t, c);
    const auto a = per_example(root_ab, t, zt);
    const auto b = per_example(root_1m, t, zt);
    auto z0 = ((zt - b * eps) / a).clamp(-bound, bound);
    return (zt - a * z0) / b;
  };
}

torch::Tensor posterior_mean(const torch::Tensor& zt, std::int64_t t, const torch::Tensor& eps_hat,
                             const NoiseSchedule& sched) {
  check_t(sched, t);
  require(zt.sizes() == eps_hat.sizes(), ErrorKind::kShapeMismatch,
          "estimator output shape differs from z_t");
  const double coef = sched.beta[t] / std::sqrt(1.0 - sched.alpha_bar[t]);
  return (zt - coef * eps_hat) / std::sqrt(sched.alpha[t]);
}

torch::Tensor p_sample_step(const torch::Tensor& zt, std::int64_t t, const Estimator& estimator,
                            const torch::Tensor& c, const NoiseSchedule& sched, Rng& rng) {
  check_t(sched, t);
  auto tt = torch::full({zt.size(0)}, t, torch::kLong);
  auto eps_hat = estimator(zt, tt, c);
  require(eps_hat.sizes() == zt.sizes(), ErrorKind::kShapeMismatch,
          "estimator returned shape " + c10::str(eps_hat.sizes()) + " for input " +
              c10::str(zt.sizes()));
  auto mu = posterior_mean(zt, t, eps_hat, sched);
  // The final step is noiseless.
  if (t == 1) return mu;
  return mu + sched.sigma[t] * rng.normal_like(zt);
}

torch::Tensor sample_from(const torch::Tensor& z_T, const Estimator& estimator,
                          const torch::Tensor& c, const NoiseSchedule& sched, Rng& rng) {
  torch::NoGradGuard no_grad;
  auto z = z_T;
  for (std::int64_t t = sched.T; t >= 1; --t) {
    z = p_sample_step(z, t, estimator, c, sched, rng);
    if (!all_finite(z)) {
      fail(ErrorKind::kNonFinite, "sampling produced non-finite values at step t = " +
                                      std::to_string(t));
    }
  }
  return z;
}

torch::Tensor sample(const Estimator& estimator, at::IntArrayRef shape, const torch::Tensor& c,
                     const NoiseSchedule& sched, Rng& rng) {
  return sample_from(rng.normal(shape), estimator, c, sched, rng);
}

DiffusionBatch draw_batch(const torch::Tensor& z0, const torch::Tensor& c,
                          const NoiseSchedule& sched, Rng& rng) {
  require(all_finite(z0), ErrorKind::kNonFinite, "z0 contains non-finite values");
  DiffusionBatch b;
  b.z0 = z0;
  b.c = c;
  b.t = rng.randint(sched.T, {z0.size(0)}) + 1;
  b.eps = rng.normal_like(z0);
  b.zt = q_sample(z0, b.t, b.eps, sched);
  return b;
}

torch::Tensor batch_loss(const Estimator& estimator, const DiffusionBatch& batch) {
  auto eps_hat = estimator(batch.zt, batch.t, batch.c);
  require(eps_hat.sizes() == batch.eps.sizes(), ErrorKind::kShapeMismatch,
          "estimator output shape differs from the noise");
  return torch::mse_loss(eps_hat, batch.eps);
}

torch::Tensor diffusion_loss(const Estimator& estimator, const torch::Tensor& z0,
                             const torch::Tensor& c, const NoiseSchedule& sched, Rng& rng) {
  return batch_loss(estimator, draw_batch(z0, c, sched, rng));
}

LatentStats LatentStats::compute(const torch::Tensor& latents) {
  require(latents.dim() >= 2 && latents.numel() > 0, ErrorKind::kShapeMismatch,
          "latent statistics need [N, C, ...]");
  auto x = latents.detach().to(torch::kDouble).transpose(0, 1).reshape({latents.size(1), -1});
  auto m = x.mean(1);
  auto s = x.std(1, /*unbiased=*/false);
  LatentStats st;
  for (std::int64_t c = 0; c < latents.size(1); ++c) {
    st.mean.push_back(m[c].item<double>());
    // Floor keeps constant channels (e.g. an unused code coordinate) finite.
    st.std.push_back(std::max(s[c].item<double>(), 1e-6));
  }
  return st;
}

LatentStats LatentStats::identity(std::int64_t channels) {
  LatentStats st;
  st.mean.assign(static_cast<std::size_t>(channels), 0.0);
  st.std.assign(static_cast<std::size_t>(channels), 1.0);
  return st;
}

namespace {

torch::Tensor channel_view(const std::vector<double>& v, const torch::Tensor& like) {
  std::vector<std::int64_t> shape(static_cast<std::size_t>(like.dim()), 1);
  shape[1] = static_cast<std::int64_t>(v.size());
  return torch::tensor(v, torch::kDouble).to(like.scalar_type()).reshape(shape);
}

}  // namespace

torch::Tensor LatentStats::standardize(const torch::Tensor& z) const {
  require(z.dim() >= 2 && z.size(1) == static_cast<std::int64_t>(mean.size()),
          ErrorKind::kShapeMismatch, "latent channels do not match the statistics");
  return (z - channel_view(mean, z)) / channel_view(std, z);
}

torch::Tensor LatentStats::destandardize(const torch::Tensor& z) const {
  require(z.dim() >= 2 && z.size(1) == static_cast<std::int64_t>(mean.size()),
          ErrorKind::kShapeMismatch, "latent channels do not match the statistics");
  return z * channel_view(std, z) + channel_view(mean, z);
}

nlohmann::json LatentStats::to_json() const { return {{"mean", mean}, {"std", std}}; }

LatentStats LatentStats::from_json(const nlohmann::json& j) {
  LatentStats st;
  st.mean = j.at("mean").get<std::vector<double>>();
  st.std = j.at("std").get<std::vector<double>>();
  require(st.mean.size() == st.std.size(), ErrorKind::kSchema, "latent statistics disagree in size");
  return st;
}

double polynomial_lr(double base_lr, std::int64_t step, std::int64_t total, double power) {
  if (total <= 0) return base_lr;
  const double frac = std::clamp(static_cast<double>(step) / static_cast<double>(total), 0.0, 1.0);
  return base_lr * std::pow(1.0 - frac, power);
}

}  // namespace meddiff::diffusion
