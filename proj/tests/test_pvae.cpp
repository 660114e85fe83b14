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
#include <fstream>

#include "meddiff/error.hpp"
#include "meddiff/pvae.hpp"
#include "support.hpp"

using namespace meddiff;
using namespace meddiff::pvae;
using meddiff::testing::random_volume;
using torch::indexing::Slice;

namespace {

double max_abs(const torch::Tensor& t) { return t.abs().max().item<double>(); }

Codebook make_codebook(const torch::Tensor& codes) {
  Codebook cb(codes.size(0), codes.size(1));
  torch::NoGradGuard g;
  cb->codes.copy_(codes);
  return cb;
}

PvaeConfig patch32_config() {
  auto c = meddiff::testing::tiny_pvae_config();
  c.patch_shape = {32, 32, 32};
  return c;
}

torch::Tensor block(const torch::Tensor& lat, std::int64_t i, std::int64_t j, std::int64_t k,
                    std::int64_t e) {
  return lat.index({Slice(), Slice(), Slice(i * e, (i + 1) * e), Slice(j * e, (j + 1) * e),
                    Slice(k * e, (k + 1) * e)});
}

}  // namespace

TEST_SUITE("pvae") {

TEST_CASE("nearest code examples") {
  auto codes = torch::tensor({0.0, 0.0, 1.0, 1.0}).reshape({2, 2});
  CHECK(nearest_code_indices(torch::tensor({0.2, 0.1}).reshape({1, 2}), codes).item<std::int64_t>() == 0);

  Rng rng(1);
  auto many = rng.normal({16, 3});
  auto hit = nearest_code_indices(many.slice(0, 3, 4), many);
  CHECK(hit.item<std::int64_t>() == 3);

  auto vectors = rng.normal({100, 3});
  auto idx = nearest_code_indices(vectors, many);
  for (std::int64_t n = 0; n < 100; ++n) {
    std::int64_t best = 0;
    double best_d = 1e300;
    for (std::int64_t k = 0; k < 16; ++k) {
      double d = 0;
      for (std::int64_t c = 0; c < 3; ++c) {
        const double diff = vectors[n][c].item<double>() - many[k][c].item<double>();
        d += diff * diff;
      }
      if (d < best_d) best_d = d, best = k;
    }
    REQUIRE(idx[n].item<std::int64_t>() == best);
  }
  CHECK_THROWS_AS(nearest_code_indices(vectors, torch::empty({0, 3})), Error);
  CHECK_THROWS_AS(Codebook(0, 3), Error);
}

TEST_CASE("quantize selects codes and routes gradients") {
  auto cb = make_codebook(torch::tensor({0.0, 0.0, 1.0, 1.0}).reshape({2, 2}));
  auto z = torch::tensor({0.2, 0.9, 0.1, 0.8}).reshape({1, 2, 2, 1, 1}).requires_grad_(true);
  auto q = quantize(z, cb);
  CHECK(q.indices.flatten().equal(torch::tensor({0, 1}, torch::kLong)));
  CHECK(torch::equal(q.quantized, q.straight_through));
  q.straight_through.sum().backward();
  CHECK(torch::equal(z.grad(), torch::ones_like(z)));
  CHECK(!cb->codes.grad().defined());
}

TEST_CASE("vq loss values") {
  Rng rng(2);
  auto x = rng.normal({2, 1, 4, 4, 4}), xr = rng.normal({2, 1, 4, 4, 4});
  auto z = rng.normal({2, 3, 4, 4, 4}), zq = rng.normal({2, 3, 4, 4, 4});
  auto t = vq_loss(x, xr, z, zq);
  double expected = 0;
  for (int b = 0; b < 2; ++b) {
    expected += std::sqrt((x[b] - xr[b]).pow(2).sum().item<double>()) / 2;
    expected += 2 * std::sqrt((z[b] - zq[b]).pow(2).sum().item<double>()) / 2;
  }
  CHECK(t.total.item<double>() == doctest::Approx(expected).epsilon(1e-5));
  CHECK(vq_loss(x, x, z, z).total.item<double>() == 0.0);
  auto bad = x.clone();
  bad[0][0][0][0][0] = std::numeric_limits<float>::quiet_NaN();
  CHECK_THROWS_AS(vq_loss(bad, xr, z, zq), Error);
}

TEST_CASE("vq stop-gradient contracts") {
  torch::manual_seed(0);
  PvaeModel m(meddiff::testing::tiny_pvae_config());
  auto x = to_tensor(random_volume({8, 8, 8}, 3));
  auto z = m->encode_patch(x);
  auto q = m->quantize(z);
  auto xr = m->decode_patch(q.straight_through);
  auto terms = vq_loss(x, xr, z, q.quantized);

  terms.codebook.backward({}, /*retain_graph=*/true);
  for (auto& p : m->encoder->parameters())
    CHECK((!p.grad().defined() || p.grad().abs().sum().item<double>() == 0.0));
  CHECK(m->codebook->codes.grad().abs().sum().item<double>() > 0);

  m->zero_grad();
  terms.commitment.backward({}, true);
  CHECK((!m->codebook->codes.grad().defined() ||
         m->codebook->codes.grad().abs().sum().item<double>() == 0.0));
  double enc = 0;
  for (auto& p : m->encoder->parameters())
    if (p.grad().defined()) enc += p.grad().abs().sum().item<double>();
  CHECK(enc > 0);
}

TEST_CASE("adversarial terms") {
  auto half = torch::full({4, 1, 3, 3}, 0.5);
  auto t = adversarial_terms(half, half);
  CHECK(t.discriminator.item<double>() == doctest::Approx(2 * std::log(0.5)).epsilon(1e-6));
  CHECK(t.generator.item<double>() == doctest::Approx(-std::log(0.5)).epsilon(1e-6));

  auto perfect = adversarial_terms(torch::ones({4}), torch::zeros({4}));
  CHECK(perfect.discriminator.item<double>() < 0.0);
  CHECK(perfect.discriminator.item<double>() > -1e-5);

  Rng rng(4);
  auto x = rng.normal({1, 1, 8, 8, 8}), xr = rng.normal({1, 1, 8, 8, 8});
  SliceCritic constant = [](const torch::Tensor& s) { return torch::full({s.size(0), 1, 2, 2}, 0.5); };
  CHECK(adv_loss(constant, x, xr, {1, 2, 3}).discriminator.item<double>() ==
        doctest::Approx(2 * std::log(0.5)).epsilon(1e-6));
}

TEST_CASE("discriminator term gradient on a two-parameter critic") {
  auto a = torch::tensor(0.7, torch::kDouble).requires_grad_(true);
  auto b = torch::tensor(-0.2, torch::kDouble).requires_grad_(true);
  Rng rng(5);
  auto x = rng.normal({2, 1, 6, 6, 6}, torch::kDouble), xr = rng.normal({2, 1, 6, 6, 6}, torch::kDouble) * 0.5;
  SliceCritic critic = [&](const torch::Tensor& s) { return torch::sigmoid(a * s + b); };
  auto loss = [&] { return adv_loss(critic, x, xr, {2, 3, 4}).discriminator; };
  auto r = meddiff::testing::check_gradients(loss, {{"a", a}, {"b", b}}, 2, 1, 1e-6, 0.0);
  CHECK(r.checked == 2);
  CHECK(r.max_rel <= 1e-4);
}

TEST_CASE("tri-plane loss") {
  FeatureExtractor phi(7, 4);
  Rng rng(6);
  auto x = rng.normal({2, 1, 8, 8, 8}), xr = rng.normal({2, 1, 8, 8, 8});
  const Index3 idx{1, 4, 6};
  CHECK(triplane_loss(x, x, phi, idx).item<double>() == 0.0);
  CHECK(triplane_loss(x, xr, phi, idx).item<double>() ==
        doctest::Approx(triplane_loss(xr, x, phi, idx).item<double>()).epsilon(1e-6));

  // Manual recomputation plane by plane.
  std::vector<torch::Tensor> pa{x.select(4, idx.k), x.select(3, idx.j), x.select(2, idx.i)};
  std::vector<torch::Tensor> pb{xr.select(4, idx.k), xr.select(3, idx.j), xr.select(2, idx.i)};
  double manual = 0;
  for (int b = 0; b < 2; ++b)
    for (int p = 0; p < 3; ++p) {
      auto fa = phi->forward(pa[p].slice(0, b, b + 1));
      auto fb = phi->forward(pb[p].slice(0, b, b + 1));
      double sq = 0;
      for (std::size_t l = 0; l < fa.size(); ++l) sq += (fa[l] - fb[l]).pow(2).sum().item<double>();
      manual += std::sqrt(sq) / 2;
    }
  CHECK(triplane_loss(x, xr, phi, idx).item<double>() == doctest::Approx(manual).epsilon(1e-5));
  CHECK_THROWS_AS(triplane_loss(x, xr.slice(2, 0, 4), phi, idx), Error);
  CHECK(FeatureExtractor(7, 4)->identity() == phi->identity());
}

TEST_CASE("total loss weighting") {
  auto vq = torch::tensor(1.5), adv = torch::tensor(0.25), tp = torch::tensor(0.125);
  CHECK(total_ae_loss(vq, adv, tp, {0.0, 0.0}).item<double>() == 1.5);
  CHECK(total_ae_loss(vq, adv, tp, {}).item<double>() == doctest::Approx(1.5 + 2 * 0.25 + 4 * 0.125));
  CHECK(total_ae_loss(vq, adv, tp, {4.0, 8.0}).item<double>() -
            total_ae_loss(vq, adv, tp, {2.0, 4.0}).item<double>() ==
        doctest::Approx(2 * 0.25 + 4 * 0.125));
}

TEST_CASE("encode and decode shapes") {
  torch::manual_seed(1);
  PvaeModel m(patch32_config());
  auto x = to_tensor(random_volume({32, 32, 32}, 8));
  torch::NoGradGuard g;
  auto z = m->encode_patch(x);
  CHECK(z.sizes() == torch::IntArrayRef({1, 2, 8, 8, 8}));
  auto twice = m->encode_patch(torch::cat({x, x}));
  CHECK(torch::equal(twice[0], twice[1]));
  CHECK_THROWS_AS(m->encode_patch(to_tensor(random_volume({16, 32, 32}, 8))), Error);

  auto out = m->decode_patch(torch::zeros({1, 2, 8, 8, 8}));
  CHECK(out.sizes() == torch::IntArrayRef({1, 1, 32, 32, 32}));
  CHECK(all_finite(out));
  auto lat = m->quantize(z).quantized;
  CHECK(torch::equal(m->decode_patch(lat), m->decode_patch(lat)));
  CHECK_THROWS_AS(m->decode_patch(torch::zeros({1, 2, 4, 8, 8})), Error);
}

TEST_CASE("patch-wise volume encoding") {
  torch::manual_seed(2);
  PvaeModel m(meddiff::testing::tiny_pvae_config());
  torch::NoGradGuard g;

  auto single = random_volume({8, 8, 8}, 9);
  auto lat1 = m->encode_volume_patchwise(single);
  auto direct = m->quantize(m->encode_patch(to_tensor(single)));
  CHECK(torch::equal(lat1.indices, direct.indices));
  CHECK(torch::equal(lat1.features, direct.quantized));
  CHECK(m->decode_volume_joint(lat1).shape == Extent3{8, 8, 8});

  auto vol = random_volume({16, 16, 16}, 10);
  auto lat = m->encode_volume_patchwise(vol);
  CHECK(lat.features.sizes() == torch::IntArrayRef({1, 2, 4, 4, 4}));
  auto ps = partition(vol, {8, 8, 8});
  for (std::int64_t n = 0; n < 8; ++n) {
    const auto o = ps.layout.patch_origin(n);
    auto per = m->quantize(m->encode_patch(to_tensor(ps.patches[n])));
    auto blk = block(lat.indices.unsqueeze(1), o.i / 8, o.j / 8, o.k / 8, 2);
    CHECK(torch::equal(blk.squeeze(1), per.indices));
  }

  // Swap patches 0 and 7; exactly those two latent blocks swap.
  std::swap(ps.patches[0], ps.patches[7]);
  auto swapped = m->encode_volume_patchwise(reassemble(ps.patches, ps.layout));
  for (std::int64_t n = 0; n < 8; ++n) {
    const auto src = n == 0 ? 7 : n == 7 ? 0 : n;
    const auto a = ps.layout.patch_origin(n), b = ps.layout.patch_origin(src);
    CHECK(max_abs(block(swapped.features, a.i / 8, a.j / 8, a.k / 8, 2) -
                  block(lat.features, b.i / 8, b.j / 8, b.k / 8, 2)) < 1e-6);
  }

  auto dec = m->decode_volume_joint(lat);
  CHECK(dec.shape == vol.shape);
  CHECK(dec.data == m->decode_volume_joint(lat).data);
  auto broken = lat;
  broken.features = lat.features.slice(2, 0, 2);
  CHECK_THROWS_AS(m->decode_volume_joint(broken), Error);

  // Non-multiple extents are padded and cropped back.
  auto odd = random_volume({12, 8, 10}, 11);
  CHECK(m->decode_volume_patchwise(m->encode_volume_patchwise(odd)).shape == odd.shape);
}

TEST_CASE("config json") {
  auto c = meddiff::testing::tiny_pvae_config();
  auto back = PvaeConfig::from_json(c.to_json());
  CHECK(back.to_json() == c.to_json());
  auto j = c.to_json();
  j["bogus"] = 1;
  CHECK_THROWS_AS(PvaeConfig::from_json(j), Error);
  auto bad = c;
  bad.patch_shape = {6, 8, 8};
  CHECK_THROWS_AS(bad.validate(), Error);
}

TEST_CASE("training: resume, freeze and logging") {
  auto dir = meddiff::testing::scratch_dir("pvae_train");
  std::vector<Volume> data{meddiff::testing::smooth_volume({16, 16, 16}, 1),
                           meddiff::testing::smooth_volume({16, 16, 16}, 2)};
  const auto mc = meddiff::testing::tiny_pvae_config();
  TrainConfig tc;
  tc.batch_size = 2;
  tc.seed = 5;
  tc.revive_interval = 2;
  tc.loss_log = dir / "loss.csv";

  torch::manual_seed(3);
  PvaeModel m(mc);
  Trainer t(m, Stage::kPatch, tc, data);
  t.run(3);
  t.save_checkpoint(dir / "t.ckpt");
  const auto next = t.step();

  torch::manual_seed(99);
  PvaeModel fresh(mc);
  auto tc2 = tc;
  tc2.loss_log.clear();
  Trainer resumed(fresh, Stage::kPatch, tc2, data);
  resumed.load_checkpoint(dir / "t.ckpt");
  CHECK(resumed.step_count() == 3);
  const auto again = resumed.step();
  CHECK(again.step == next.step);
  CHECK(again.total == next.total);
  CHECK(again.vq == next.vq);
  CHECK(again.tp == next.tp);

  std::ifstream log(dir / "loss.csv");
  std::string header;
  std::getline(log, header);
  CHECK(header == "step,loss_total,loss_vq,loss_adv,loss_tp");

  CHECK(m->stage() == Stage::kPatch);
  const auto enc_hash = m->encoder_hash();
  const auto dec_before = hash_parameters(*m->joint_decoder);
  Trainer s2(m, Stage::kVolume, tc2, data);
  s2.run(2);
  CHECK(m->encoder_hash() == enc_hash);
  CHECK(hash_parameters(*m->joint_decoder) != dec_before);

  save_model(m, dir / "m.ckpt");
  auto loaded = load_model(dir / "m.ckpt");
  CHECK(loaded->stage() == Stage::kVolume);
  CHECK(loaded->encoder_hash() == enc_hash);

  PvaeModel untrained(mc);
  CHECK_THROWS_AS(Trainer(untrained, Stage::kVolume, tc2, data), Error);
}

TEST_CASE("stage-1 overfit uses several codes") {
  std::vector<Volume> data{meddiff::testing::smooth_volume({16, 16, 16}, 7)};
  TrainConfig tc;
  tc.steps = 60;
  tc.batch_size = 4;
  tc.lr = 2e-3;
  tc.revive_interval = 20;
  auto m = train_stage1(data, meddiff::testing::tiny_pvae_config(), tc);
  torch::NoGradGuard g;
  auto lat = m->encode_volume_patchwise(data[0]);
  CHECK(std::get<0>(at::_unique(lat.indices)).numel() > 1);
}

}  // TEST_SUITE
