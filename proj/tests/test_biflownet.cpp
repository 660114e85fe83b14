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

#include <random>

#include "meddiff/biflownet.hpp"
#include "meddiff/error.hpp"
#include "support.hpp"

using namespace meddiff;
using namespace meddiff::biflownet;
using meddiff::testing::tiny_biflownet_config;
using torch::indexing::Slice;

namespace {

BiFlowNet make_net(const BiFlowNetConfig& cfg, std::uint64_t seed = 0) {
  torch::manual_seed(seed);
  BiFlowNet net(cfg);
  net->eval();
  return net;
}

torch::Tensor longs(std::initializer_list<std::int64_t> v) {
  return torch::tensor(std::vector<std::int64_t>(v), torch::kLong);
}

}  // namespace

TEST_SUITE("biflownet") {

TEST_CASE("latent patchify round-trip") {
  Rng rng(1);
  auto z = rng.normal({2, 3, 8, 12, 4});
  auto p = patchify_latent(z, {4, 4, 4});
  CHECK(p.sizes() == torch::IntArrayRef({12, 3, 4, 4, 4}));
  CHECK(torch::equal(depatchify_latent(p, 2, {2, 3, 1}), z));
  // Patch (1,0,0) of the first volume is a direct slice.
  CHECK(torch::equal(p[3], z[0].index({Slice(), Slice(4, 8), Slice(0, 4), Slice(0, 4)})));
  auto one = rng.normal({1, 3, 4, 4, 4});
  CHECK(torch::equal(patchify_latent(one, {4, 4, 4}), one));
  CHECK_THROWS_AS(patchify_latent(z, {3, 4, 4}), Error);
}

TEST_CASE("intra-patch flow treats patches independently") {
  auto net = make_net(tiny_biflownet_config());
  torch::NoGradGuard g;
  Rng rng(2);
  auto patches = rng.normal({4, 2, 4, 4, 4});
  patches[2] = patches[1];
  auto cond = net->condition(longs({7, 7, 7, 7}), longs({1, 1, 1, 1}));
  auto base = net->intra_forward(patches, cond).output;
  CHECK(torch::equal(base[1], base[2]));

  auto bumped = patches.clone();
  bumped[0] += 0.5;
  auto out = net->intra_forward(bumped, cond).output;
  CHECK(!torch::equal(out[0], base[0]));
  for (int j = 1; j < 4; ++j) CHECK(torch::equal(out[j], base[j]));

  auto perm = longs({3, 0, 2, 1});
  auto permuted = net->intra_forward(patches.index_select(0, perm), cond).output;
  CHECK(torch::allclose(permuted, base.index_select(0, perm), 0, 1e-6));
  CHECK(net->intra_forward(patches, cond).taps.size() == 4);
}

TEST_CASE("output shape holds across configurations") {
  std::mt19937_64 rng(3);
  for (int trial = 0; trial < 5; ++trial) {
    auto cfg = tiny_biflownet_config();
    cfg.channels = 1 + static_cast<std::int64_t>(rng() % 3);
    cfg.token = (rng() % 2) ? 2 : 1;
    cfg.depth = 4 + static_cast<std::int64_t>(rng() % 2);
    cfg.num_classes = 1 + static_cast<std::int64_t>(rng() % 3);
    const std::int64_t gh = 1 + rng() % 2, gw = 1 + rng() % 2, gd = 1 + rng() % 2;
    auto net = make_net(cfg, trial);
    torch::NoGradGuard g;
    Rng r(trial);
    auto z = r.normal({2, cfg.channels, 4 * gh, 4 * gw, 4 * gd});
    auto out = net->forward(z, longs({1, 500}), longs({0, cfg.num_classes - 1}));
    INFO("trial " << trial);
    CHECK(out.sizes() == z.sizes());
    CHECK(torch::equal(out, net->forward(z, longs({1, 500}), longs({0, cfg.num_classes - 1}))));
  }
}

TEST_CASE("zero injection and fusion identities") {
  auto net = make_net(tiny_biflownet_config());
  torch::NoGradGuard g;
  Rng rng(4);
  auto z = rng.normal({1, 2, 8, 8, 8});
  auto cond = net->condition(longs({10}), longs({0}));
  auto plain = net->inter_forward(z, cond, {});
  const auto& w = tiny_biflownet_config().unet_widths;
  std::array<torch::Tensor, 4> zeros{torch::zeros({1, w[0], 8, 8, 8}), torch::zeros({1, w[1], 4, 4, 4}),
                                     torch::zeros({1, w[1], 4, 4, 4}), torch::zeros({1, w[0], 8, 8, 8})};
  CHECK(torch::equal(net->inter_forward(z, cond, zeros), plain));
  CHECK(plain.sizes() == z.sizes());

  auto a = rng.normal({1, 4, 8, 8, 8}), b = rng.normal({1, 4, 8, 8, 8});
  CHECK(torch::equal(fuse(torch::zeros_like(b), b), b));
  CHECK(torch::equal(fuse(a, b), fuse(b, a)));
  CHECK_THROWS_AS(fuse(a, b.slice(2, 0, 4)), Error);
  CHECK_THROWS_AS(net->inter_forward(z.slice(2, 0, 6), cond, {}), Error);
}

TEST_CASE("inter-patch flow couples distant corners") {
  auto net = make_net(tiny_biflownet_config());
  torch::NoGradGuard g;
  Rng rng(5);
  auto z = rng.normal({1, 2, 8, 8, 8});
  auto cond = net->condition(longs({10}), longs({0}));
  auto bumped = z.clone();
  bumped.index_put_({0, Slice(), 0, 0, 0}, bumped.index({0, Slice(), 0, 0, 0}) + 1.0);
  auto far = [](const torch::Tensor& t) { return t.index({0, Slice(), 7, 7, 7}); };
  CHECK((far(net->inter_forward(bumped, cond, {})) - far(net->inter_forward(z, cond, {})))
            .abs().max().item<double>() > 0);

  // The intra-patch flow alone never carries the perturbation across patches.
  auto p0 = patchify_latent(z, {4, 4, 4}), p1 = patchify_latent(bumped, {4, 4, 4});
  auto pc = cond.repeat_interleave(8, 0);
  auto o0 = net->intra_forward(p0, pc).output, o1 = net->intra_forward(p1, pc).output;
  CHECK(torch::equal(o0.slice(0, 1), o1.slice(0, 1)));
}

TEST_CASE("both flows receive gradients") {
  auto net = make_net(tiny_biflownet_config());
  net->train();
  Rng rng(6);
  auto z = rng.normal({1, 2, 8, 8, 8});
  auto eps = rng.normal({1, 2, 8, 8, 8});
  (net->forward(z, longs({3}), longs({1})) - eps).pow(2).mean().backward();
  auto grad_norm = [](torch::nn::Module& m) {
    double s = 0;
    for (auto& p : m.parameters())
      if (p.grad().defined()) s += p.grad().abs().sum().item<double>();
    return s;
  };
  CHECK(grad_norm(*net->blocks) > 0);
  CHECK(grad_norm(*net->dit_embed) > 0);
  CHECK(grad_norm(*net->unet_enc) > 0);
  CHECK(grad_norm(*net->unet_dec) > 0);
  CHECK(grad_norm(*net->tap_proj) > 0);
}

TEST_CASE("unet-only ablation skips the transformer") {
  auto cfg = tiny_biflownet_config();
  cfg.use_intra_flow = false;
  auto net = make_net(cfg);
  torch::NoGradGuard g;
  Rng rng(7);
  auto z = rng.normal({1, 2, 8, 8, 8});
  auto cond = net->condition(longs({4}), longs({0}));
  CHECK(torch::equal(net->forward(z, longs({4}), longs({0})), net->inter_forward(z, cond, {})));
}

TEST_CASE("condition and input validation") {
  auto net = make_net(tiny_biflownet_config());
  torch::NoGradGuard g;
  Rng rng(8);
  auto z = rng.normal({1, 2, 4, 4, 4});
  CHECK_THROWS_AS(net->forward(z, longs({1}), longs({2})), Error);
  CHECK_THROWS_AS(net->forward(z, longs({1}), longs({-1})), Error);
  CHECK_THROWS_AS(net->forward(rng.normal({1, 3, 4, 4, 4}), longs({1}), longs({0})), Error);
  CHECK_THROWS_AS(net->forward(z, longs({1, 2}), longs({0, 0})), Error);
  CHECK(!torch::equal(net->forward(z, longs({1}), longs({0})), net->forward(z, longs({1}), longs({1}))));

  auto bad = tiny_biflownet_config();
  bad.depth = 3;
  CHECK_THROWS_AS(bad.validate(), Error);
  bad = tiny_biflownet_config();
  bad.token = 3;
  CHECK_THROWS_AS(bad.validate(), Error);
  CHECK(count_parameters(*net) <= 10000);
}

TEST_CASE("timestep embedding") {
  auto e = timestep_embedding(longs({0, 10}), 8);
  CHECK(e.sizes() == torch::IntArrayRef({2, 8}));
  CHECK(e[0].slice(0, 0, 4).eq(1).all().item<bool>());
  CHECK(e[0].slice(0, 4, 8).eq(0).all().item<bool>());
}

TEST_CASE("bundle round-trip and training log") {
  auto dir = meddiff::testing::scratch_dir("bundle");
  auto cfg = tiny_biflownet_config();
  auto net = make_net(cfg);
  Rng rng(9);
  auto latents = rng.normal({2, 2, 4, 4, 4});
  TrainConfig tc;
  tc.steps = 5;
  tc.loss_log = dir / "loss.csv";
  auto sched = diffusion::NoiseSchedule::cosine(50);
  auto losses = train(net, latents, longs({0, 1}), sched, tc);
  CHECK(losses.size() == 5);
  CHECK(meddiff::testing::read_text(dir / "loss.csv").rfind("step,loss,lr\n", 0) == 0);

  EstimatorBundle b;
  b.net = net;
  b.schedule = sched;
  b.stats = diffusion::LatentStats::identity(2);
  b.class_names = {"a", "b"};
  b.latent_extent = {4, 4, 4};
  b.volume_extent = {16, 16, 16};
  b.pvae_hash = "abc";
  save_bundle(b, dir / "est.ckpt");
  auto back = load_bundle(dir / "est.ckpt");
  CHECK(hash_parameters(*back.net) == hash_parameters(*net));
  CHECK(back.schedule.hash() == sched.hash());
  CHECK(back.class_names == b.class_names);
  CHECK(back.volume_extent == b.volume_extent);
  CHECK(back.class_index("b") == 1);
  CHECK_THROWS_AS(back.class_index("c"), Error);
}

}  // TEST_SUITE
