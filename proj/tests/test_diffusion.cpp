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

#include <cmath>

#include "meddiff/diffusion.hpp"
#include "meddiff/error.hpp"

using namespace meddiff;
using namespace meddiff::diffusion;

namespace {

double max_abs(const torch::Tensor& t) { return t.abs().max().item<double>(); }

torch::Tensor randn4(std::uint64_t seed) {
  Rng rng(seed);
  return rng.normal({2, 3, 4, 4, 4}, torch::kDouble);
}

}  // namespace

TEST_SUITE("diffusion") {

TEST_CASE("cosine schedule invariants at T = 1000") {
  auto s = NoiseSchedule::cosine(1000);
  CHECK(s.T == 1000);
  CHECK(s.alpha_bar[0] == 1.0);
  for (std::int64_t t = 1; t <= s.T; ++t) {
    REQUIRE(s.alpha_bar[t] < s.alpha_bar[t - 1]);
    REQUIRE(s.beta[t] > 0.0);
    REQUIRE(s.beta[t] <= 0.999);
    REQUIRE(s.alpha_bar[t] == doctest::Approx(s.alpha_bar[t - 1] * (1 - s.beta[t])).epsilon(1e-14));
  }
  CHECK(s.alpha_bar[1000] / s.alpha_bar[0] < 0.01);
  CHECK_NOTHROW(s.validate());
  CHECK(s.summary().at("T") == 1000);
}

TEST_CASE("schedule parameter errors") {
  CHECK_THROWS_AS(NoiseSchedule::cosine(1), Error);
  CHECK_THROWS_AS(NoiseSchedule::cosine(100, 0.0), Error);
  CHECK_THROWS_AS(NoiseSchedule::cosine(100, -0.1), Error);
  CHECK_THROWS_AS(NoiseSchedule::from_betas({0.1, 1.0}), Error);
  CHECK_THROWS_AS(NoiseSchedule::from_betas({0.0, 0.0}).validate(), Error);
  CHECK(NoiseSchedule::cosine(100).hash() != NoiseSchedule::cosine(101).hash());
}

TEST_CASE("q_sample closed forms") {
  auto z0 = randn4(1), eps = randn4(2);
  auto flat = NoiseSchedule::from_betas({0.0, 0.0, 0.0});
  CHECK(torch::equal(q_sample(z0, 2, eps, flat), z0));

  auto s = NoiseSchedule::cosine(50);
  auto zero = torch::zeros_like(z0);
  CHECK(max_abs(q_sample(zero, 20, eps, s) - std::sqrt(1 - s.alpha_bar[20]) * eps) < 1e-12);
  CHECK_THROWS_AS(q_sample(z0, 0, eps, s), Error);
  CHECK_THROWS_AS(q_sample(z0, 51, eps, s), Error);

  // Per-example timesteps agree with the scalar form.
  auto t = torch::tensor({5, 30}, torch::kLong);
  auto batch = q_sample(z0, t, eps, s);
  CHECK(max_abs(batch[1] - q_sample(z0, 30, eps, s)[1]) < 1e-12);
}

TEST_CASE("posterior mean identities") {
  auto s = NoiseSchedule::cosine(100);
  auto z0 = randn4(3), eps = randn4(4);
  for (std::int64_t t : {1, 2, 50, 100}) {
    auto zt = q_sample(z0, t, eps, s);
    CHECK(max_abs(posterior_mean(zt, t, torch::zeros_like(zt), s) - zt / std::sqrt(s.alpha[t])) < 1e-12);

    // With the true noise the mean equals the closed-form q(z_{t-1} | z_t, z0) mean.
    auto z0_rec = (zt - std::sqrt(1 - s.alpha_bar[t]) * eps) / std::sqrt(s.alpha_bar[t]);
    CHECK(max_abs(z0_rec - z0) < 1e-5);
    const double abp = s.alpha_bar[t - 1], ab = s.alpha_bar[t];
    auto direct = std::sqrt(abp) * s.beta[t] / (1 - ab) * z0_rec +
                  std::sqrt(s.alpha[t]) * (1 - abp) / (1 - ab) * zt;
    CHECK(max_abs(posterior_mean(zt, t, eps, s) - direct) <= 1e-5);

    // Affine in eps_hat.
    auto e1 = randn4(5), e2 = randn4(6);
    const double a = 0.3, b = -1.7;
    auto lhs = posterior_mean(zt, t, a * e1 + b * e2, s);
    auto rhs = a * posterior_mean(zt, t, e1, s) + b * posterior_mean(zt, t, e2, s) -
               (a + b - 1) * zt / std::sqrt(s.alpha[t]);
    CHECK(max_abs(lhs - rhs) < 1e-9);
  }
  CHECK_THROWS_AS(posterior_mean(z0, 0, eps, s), Error);
}

TEST_CASE("sampling determinism and stochasticity") {
  auto s = NoiseSchedule::cosine(20);
  Estimator half = [](const torch::Tensor& z, const torch::Tensor&, const torch::Tensor&) {
    return 0.5 * z;
  };
  auto c = torch::zeros({1}, torch::kLong);
  Rng r1(7), r2(7), r3(8);
  auto a = sample(half, {1, 2, 4, 4, 4}, c, s, r1);
  auto b = sample(half, {1, 2, 4, 4, 4}, c, s, r2);
  auto d = sample(half, {1, 2, 4, 4, 4}, c, s, r3);
  CHECK(a.sizes() == torch::IntArrayRef({1, 2, 4, 4, 4}));
  CHECK(torch::equal(a, b));
  CHECK((a - d).norm().item<double>() > 0);

  // With sigma = 0 the trajectory depends only on z_T.
  auto quiet = s;
  std::fill(quiet.sigma.begin(), quiet.sigma.end(), 0.0);
  Rng q0(1);
  auto zT = q0.normal({1, 2, 4, 4, 4});
  Rng q1(100), q2(200);
  CHECK(torch::equal(sample_from(zT, half, c, quiet, q1), sample_from(zT, half, c, quiet, q2)));
}

TEST_CASE("sampler errors") {
  auto s = NoiseSchedule::cosine(10);
  auto c = torch::zeros({1}, torch::kLong);
  Rng rng(0);
  Estimator wrong = [](const torch::Tensor& z, const torch::Tensor&, const torch::Tensor&) {
    return z.narrow(1, 0, 1);
  };
  CHECK_THROWS_AS(p_sample_step(torch::zeros({1, 2, 4, 4, 4}), 5, wrong, c, s, rng), Error);
  Estimator blowup = [](const torch::Tensor& z, const torch::Tensor& t, const torch::Tensor&) {
    return t.item<std::int64_t>() == 6 ? z * std::numeric_limits<float>::infinity() : z * 0;
  };
  try {
    sample(blowup, {1, 1, 2, 2, 2}, c, s, rng);
    FAIL("expected non-finite abort");
  } catch (const Error& e) {
    CHECK(e.kind() == ErrorKind::kNonFinite);
    CHECK(std::string(e.what()).find("t = 6") != std::string::npos);
  }
}

TEST_CASE("training objective") {
  auto s = NoiseSchedule::cosine(100);
  Rng rng(3);
  auto z0 = rng.normal({64, 2, 4, 4, 4});
  auto c = torch::zeros({64}, torch::kLong);

  Estimator zero = [](const torch::Tensor& z, const torch::Tensor&, const torch::Tensor&) {
    return torch::zeros_like(z);
  };
  const double l = diffusion_loss(zero, z0, c, s, rng).item<double>();
  CHECK(std::abs(l - 1.0) < 0.05);  // 8192 standard-normal squares

  Rng r2(4);
  auto batch = draw_batch(z0, c, s, r2);
  CHECK(batch.t.min().item<std::int64_t>() >= 1);
  CHECK(batch.t.max().item<std::int64_t>() <= 100);
  Estimator oracle = [&](const torch::Tensor&, const torch::Tensor&, const torch::Tensor&) {
    return batch.eps;
  };
  CHECK(batch_loss(oracle, batch).item<double>() == 0.0);
}

TEST_CASE("clean-latent clipping") {
  auto sched = NoiseSchedule::cosine(100);
  Rng rng(21);
  auto z0 = rng.normal({3, 2, 4, 4, 4}).clamp(-2, 2);
  auto eps = rng.normal({3, 2, 4, 4, 4});
  auto t = torch::tensor(std::vector<std::int64_t>{1, 50, 100}, torch::kLong);
  auto zt = q_sample(z0, t, eps, sched);
  Estimator oracle = [&](const torch::Tensor&, const torch::Tensor&, const torch::Tensor&) { return eps; };
  auto none = torch::zeros({3}, torch::kLong);
  // Inside the bound the wrapped oracle is unchanged (up to rounding).
  CHECK(torch::allclose(clip_denoised(oracle, sched, 3.0)(zt, t, none), eps, 1e-3, 1e-3));
  CHECK(torch::equal(clip_denoised(oracle, sched, 0.0)(zt, t, none), eps));
  // A wild estimate is pulled back so the implied clean latent respects the bound.
  Estimator wild = [&](const torch::Tensor&, const torch::Tensor&, const torch::Tensor&) { return eps + 10.0; };
  auto fixed = clip_denoised(wild, sched, 1.5)(zt, t, none);
  for (std::int64_t b = 0; b < 3; ++b) {
    const auto tb = t[b].item<std::int64_t>();
    auto implied = (zt[b] - std::sqrt(1 - sched.alpha_bar[tb]) * fixed[b]) / std::sqrt(sched.alpha_bar[tb]);
    CHECK(implied.abs().max().item<double>() <= 1.5 + 1e-3);
  }
  CHECK_THROWS_AS(clip_denoised(oracle, sched, std::nan("")), Error);
}

TEST_CASE("latent statistics round-trip") {
  Rng rng(9);
  auto z = rng.normal({5, 3, 4, 4, 4}) * 2.0 + 1.5;
  auto st = LatentStats::compute(z);
  auto zs = st.standardize(z);
  CHECK(std::abs(zs.mean().item<double>()) < 1e-5);
  CHECK(max_abs(st.destandardize(zs) - z) < 1e-5);
  auto back = LatentStats::from_json(st.to_json());
  CHECK(back.mean == st.mean);
  CHECK(back.std == st.std);
}

TEST_CASE("polynomial decay") {
  CHECK(polynomial_lr(1e-4, 0, 100) == 1e-4);
  CHECK(polynomial_lr(1e-4, 50, 100) == doctest::Approx(5e-5));
  CHECK(polynomial_lr(1e-4, 100, 100) == 0.0);
}

}  // TEST_SUITE
