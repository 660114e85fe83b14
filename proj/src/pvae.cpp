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

#include "meddiff/pvae.hpp"

#include <cmath>
#include <cstdio>
#include <fstream>
#include <numeric>

#include <ATen/CPUGeneratorImpl.h>

#include "meddiff/checkpoint.hpp"
#include "meddiff/error.hpp"
#include "meddiff/hash.hpp"

namespace meddiff::pvae {

namespace F = torch::nn::functional;
using torch::indexing::Slice;

namespace {

std::int64_t group_count(std::int64_t requested, std::int64_t channels) {
  return std::gcd(std::max<std::int64_t>(requested, 1), channels);
}

torch::Tensor upsample2(const torch::Tensor& x) {
  return F::interpolate(x, F::InterpolateFuncOptions()
                               .scale_factor(std::vector<double>{2.0, 2.0, 2.0})
                               .mode(torch::kNearest));
}

Extent3 extent_from_json(const nlohmann::json& j, const char* key) {
  const auto& a = j.at(key);
  require(a.is_array() && a.size() == 3, ErrorKind::kConfig,
          std::string("'") + key + "' must be a 3-element array");
  return {a[0].get<std::int64_t>(), a[1].get<std::int64_t>(), a[2].get<std::int64_t>()};
}

void reject_unknown(const nlohmann::json& j, std::initializer_list<const char*> known,
                    const std::string& where) {
  for (const auto& item : j.items()) {
    bool ok = false;
    for (const char* k : known) ok = ok || item.key() == k;
    require(ok, ErrorKind::kConfig, "unknown key '" + item.key() + "' in " + where);
  }
}

struct StraightThroughFn : public torch::autograd::Function<StraightThroughFn> {
  static torch::Tensor forward(torch::autograd::AutogradContext*, torch::Tensor source,
                               torch::Tensor value) {
    (void)source;
    return value.detach().clone();
  }
  static torch::autograd::variable_list backward(torch::autograd::AutogradContext*,
                                                 torch::autograd::variable_list grads) {
    return {grads[0], torch::Tensor()};
  }
};

}  // namespace

void PvaeConfig::validate() const {
  auto check_axis = [](std::int64_t v, const char* axis) {
    require(v >= kReduction && v % kReduction == 0, ErrorKind::kConfig,
            std::string("patch extent along ") + axis + " must be a positive multiple of 4");
  };
  check_axis(patch_shape.h, "H");
  check_axis(patch_shape.w, "W");
  check_axis(patch_shape.d, "D");
  for (auto w : widths) require(w >= 1, ErrorKind::kConfig, "channel widths must be positive");
  require(codebook_size >= 2, ErrorKind::kConfig, "codebook needs at least 2 codes");
  require(code_dim >= 1, ErrorKind::kConfig, "code_dim must be positive");
  require(lambda_adv >= 0 && lambda_tp >= 0, ErrorKind::kConfig, "loss weights must be >= 0");
  require(disc_warmup >= 0, ErrorKind::kConfig, "disc_warmup must be >= 0");
  require(disc_channels >= 1 && feature_channels >= 1, ErrorKind::kConfig,
          "discriminator/feature widths must be positive");
}

nlohmann::json PvaeConfig::to_json() const {
  return {{"patch_shape", {patch_shape.h, patch_shape.w, patch_shape.d}},
          {"widths", widths},
          {"codebook_size", codebook_size},
          {"code_dim", code_dim},
          {"norm_groups", norm_groups},
          {"lambda_adv", lambda_adv},
          {"lambda_tp", lambda_tp},
          {"disc_warmup", disc_warmup},
          {"disc_channels", disc_channels},
          {"feature_channels", feature_channels},
          {"feature_seed", feature_seed}};
}

PvaeConfig PvaeConfig::from_json(const nlohmann::json& j) {
  reject_unknown(j,
                 {"patch_shape", "widths", "codebook_size", "code_dim", "norm_groups",
                  "lambda_adv", "lambda_tp", "disc_warmup", "disc_channels", "feature_channels",
                  "feature_seed"},
                 "pvae config");
  PvaeConfig c;
  if (j.contains("patch_shape")) c.patch_shape = extent_from_json(j, "patch_shape");
  if (j.contains("widths")) {
    const auto& w = j.at("widths");
    require(w.is_array() && w.size() == 3, ErrorKind::kConfig, "'widths' needs 3 entries");
    for (int i = 0; i < 3; ++i) c.widths[i] = w[i].get<std::int64_t>();
  }
  c.codebook_size = j.value("codebook_size", c.codebook_size);
  c.code_dim = j.value("code_dim", c.code_dim);
  c.norm_groups = j.value("norm_groups", c.norm_groups);
  c.lambda_adv = j.value("lambda_adv", c.lambda_adv);
  c.lambda_tp = j.value("lambda_tp", c.lambda_tp);
  c.disc_warmup = j.value("disc_warmup", c.disc_warmup);
  c.disc_channels = j.value("disc_channels", c.disc_channels);
  c.feature_channels = j.value("feature_channels", c.feature_channels);
  c.feature_seed = j.value("feature_seed", c.feature_seed);
  c.validate();
  return c;
}

ResBlock3dImpl::ResBlock3dImpl(std::int64_t in, std::int64_t out, std::int64_t groups) {
  norm1_ = register_module("norm1", torch::nn::GroupNorm(group_count(groups, in), in));
  conv1_ = register_module("conv1",
                           torch::nn::Conv3d(torch::nn::Conv3dOptions(in, out, 3).padding(1)));
  norm2_ = register_module("norm2", torch::nn::GroupNorm(group_count(groups, out), out));
  conv2_ = register_module("conv2",
                           torch::nn::Conv3d(torch::nn::Conv3dOptions(out, out, 3).padding(1)));
  if (in != out) skip_ = register_module("skip", torch::nn::Conv3d(in, out, 1));
}

torch::Tensor ResBlock3dImpl::forward(const torch::Tensor& x) {
  auto h = conv1_(torch::silu(norm1_(x)));
  h = conv2_(torch::silu(norm2_(h)));
  return (skip_ ? skip_(x) : x) + h;
}

PatchEncoderImpl::PatchEncoderImpl(const PvaeConfig& cfg) {
  const auto [c0, c1, c2] = cfg.widths;
  const auto g = cfg.norm_groups;
  conv_in_ = register_module("conv_in",
                             torch::nn::Conv3d(torch::nn::Conv3dOptions(1, c0, 3).padding(1)));
  res0_ = register_module("res0", ResBlock3d(c0, c0, g));
  down0_ = register_module(
      "down0", torch::nn::Conv3d(torch::nn::Conv3dOptions(c0, c1, 3).stride(2).padding(1)));
  res1_ = register_module("res1", ResBlock3d(c1, c1, g));
  down1_ = register_module(
      "down1", torch::nn::Conv3d(torch::nn::Conv3dOptions(c1, c2, 3).stride(2).padding(1)));
  res2_ = register_module("res2", ResBlock3d(c2, c2, g));
  norm_out_ = register_module("norm_out", torch::nn::GroupNorm(group_count(g, c2), c2));
  conv_out_ = register_module("conv_out", torch::nn::Conv3d(c2, cfg.code_dim, 1));
}

torch::Tensor PatchEncoderImpl::forward(const torch::Tensor& x) {
  auto h = res0_(conv_in_(x));
  h = res1_(down0_(h));
  h = res2_(down1_(h));
  return conv_out_(torch::silu(norm_out_(h)));
}

DecoderImpl::DecoderImpl(const PvaeConfig& cfg) {
  const auto [c0, c1, c2] = cfg.widths;
  const auto g = cfg.norm_groups;
  conv_in_ = register_module(
      "conv_in", torch::nn::Conv3d(torch::nn::Conv3dOptions(cfg.code_dim, c2, 3).padding(1)));
  res2_ = register_module("res2", ResBlock3d(c2, c2, g));
  up1_ = register_module("up1",
                         torch::nn::Conv3d(torch::nn::Conv3dOptions(c2, c1, 3).padding(1)));
  res1_ = register_module("res1", ResBlock3d(c1, c1, g));
  up0_ = register_module("up0",
                         torch::nn::Conv3d(torch::nn::Conv3dOptions(c1, c0, 3).padding(1)));
  res0_ = register_module("res0", ResBlock3d(c0, c0, g));
  norm_out_ = register_module("norm_out", torch::nn::GroupNorm(group_count(g, c0), c0));
  conv_out_ = register_module("conv_out",
                              torch::nn::Conv3d(torch::nn::Conv3dOptions(c0, 1, 3).padding(1)));
}

torch::Tensor DecoderImpl::forward(const torch::Tensor& z) {
  auto h = res2_(conv_in_(z));
  h = res1_(up1_(upsample2(h)));
  h = res0_(up0_(upsample2(h)));
  return conv_out_(torch::silu(norm_out_(h)));
}

CodebookImpl::CodebookImpl(std::int64_t size, std::int64_t dim) {
  require(size >= 1, ErrorKind::kInvalidArgument, "codebook is empty");
  const double bound = 1.0 / static_cast<double>(size);
  codes = register_parameter("codes", torch::empty({size, dim}).uniform_(-bound, bound));
  usage_counts = register_buffer("usage_counts", torch::zeros({size}, torch::kLong));
  window_usage = register_buffer("window_usage", torch::zeros({size}, torch::kLong));
}

void CodebookImpl::record_usage(const torch::Tensor& indices) {
  auto counts = torch::bincount(indices.reshape({-1}).to(torch::kLong), {}, size());
  usage_counts.add_(counts);
  window_usage.add_(counts);
}

std::int64_t CodebookImpl::revive_dead_codes(const torch::Tensor& candidates, Rng& rng) {
  torch::NoGradGuard no_grad;
  auto dead = (window_usage == 0).nonzero().reshape({-1});
  const auto n = dead.size(0);
  if (n > 0 && candidates.size(0) > 0) {
    auto pick = rng.randint(candidates.size(0), {n});
    codes.index_copy_(0, dead, candidates.index_select(0, pick).to(codes.dtype()));
  }
  window_usage.zero_();
  return n;
}

torch::Tensor nearest_code_indices(const torch::Tensor& vectors, const torch::Tensor& codes) {
  require(codes.dim() == 2 && codes.size(0) >= 1, ErrorKind::kInvalidArgument,
          "codebook is empty");
  require(vectors.dim() == 2 && vectors.size(1) == codes.size(1), ErrorKind::kShapeMismatch,
          "vector dimension does not match code dimension");
  torch::NoGradGuard no_grad;
  auto c = codes.detach().to(torch::kDouble);
  auto v = vectors.detach().to(torch::kDouble);
  const auto n = v.size(0);
  // Chunked to bound the [chunk, K, C] difference tensor.
  const std::int64_t budget = 1 << 22;
  const std::int64_t chunk =
      std::max<std::int64_t>(1, budget / std::max<std::int64_t>(1, c.numel()));
  std::vector<torch::Tensor> parts;
  for (std::int64_t s = 0; s < n; s += chunk) {
    auto vs = v.slice(0, s, std::min(n, s + chunk));
    auto d = (vs.unsqueeze(1) - c.unsqueeze(0)).pow(2).sum(-1);
    // argmin returns the first minimum, so ties pick the lowest index.
    parts.push_back(d.argmin(1));
  }
  if (parts.empty()) return torch::empty({0}, torch::kLong);
  return torch::cat(parts);
}

torch::Tensor straight_through(const torch::Tensor& source, const torch::Tensor& value) {
  return StraightThroughFn::apply(source, value);
}

QuantizeResult quantize(const torch::Tensor& z, const Codebook& codebook) {
  require(z.dim() == 5, ErrorKind::kShapeMismatch, "quantize expects [B,C,h,w,d]");
  require(z.size(1) == codebook->dim(), ErrorKind::kShapeMismatch,
          "feature channels " + std::to_string(z.size(1)) + " != code dim " +
              std::to_string(codebook->dim()));
  const auto B = z.size(0), C = z.size(1);
  auto flat = z.permute({0, 2, 3, 4, 1}).reshape({-1, C});
  auto idx = nearest_code_indices(flat, codebook->codes);
  QuantizeResult r;
  r.indices = idx.reshape({B, z.size(2), z.size(3), z.size(4)});
  r.quantized = codebook->codes.index_select(0, idx)
                    .reshape({B, z.size(2), z.size(3), z.size(4), C})
                    .permute({0, 4, 1, 2, 3})
                    .contiguous();
  r.straight_through = straight_through(z, r.quantized);
  return r;
}

namespace {

torch::Tensor per_sample_norm(const torch::Tensor& diff) {
  return torch::linalg_vector_norm(diff.flatten(1), 2, {1}, false, c10::nullopt);
}

}  // namespace

VqTerms vq_loss(const torch::Tensor& x, const torch::Tensor& x_rec, const torch::Tensor& z,
                const torch::Tensor& z_q) {
  require(x.sizes() == x_rec.sizes(), ErrorKind::kShapeMismatch,
          "reconstruction shape differs from input");
  require(z.sizes() == z_q.sizes(), ErrorKind::kShapeMismatch,
          "quantized feature shape differs from encoder output");
  {
    torch::NoGradGuard no_grad;
    require(all_finite(x) && all_finite(x_rec) && all_finite(z) && all_finite(z_q),
            ErrorKind::kNonFinite, "vq_loss received non-finite values");
  }
  VqTerms t;
  t.reconstruction = per_sample_norm(x - x_rec).mean();
  t.codebook = per_sample_norm(z.detach() - z_q).mean();
  t.commitment = per_sample_norm(z_q.detach() - z).mean();
  t.total = t.reconstruction + t.codebook + t.commitment;
  return t;
}

FeatureExtractorImpl::FeatureExtractorImpl(std::uint64_t seed, std::int64_t width) {
  require(width >= 1, ErrorKind::kInvalidArgument, "feature width must be positive");
  const std::int64_t chans[5] = {1, width, 2 * width, 2 * width, 4 * width};
  const std::int64_t strides[4] = {1, 2, 1, 2};
  layers_ = register_module("layers", torch::nn::ModuleList());
  auto gen = at::make_generator<at::CPUGeneratorImpl>(seed);
  torch::NoGradGuard no_grad;
  for (int l = 0; l < 4; ++l) {
    torch::nn::Conv2d conv(
        torch::nn::Conv2dOptions(chans[l], chans[l + 1], 3).stride(strides[l]).padding(1));
    const double fan_in = static_cast<double>(chans[l] * 9);
    conv->weight.copy_(torch::randn(conv->weight.sizes(), gen) * std::sqrt(2.0 / fan_in));
    conv->bias.zero_();
    layers_->push_back(conv);
  }
  for (auto& p : parameters()) p.set_requires_grad(false);
}

std::vector<torch::Tensor> FeatureExtractorImpl::forward(const torch::Tensor& planes) {
  require(planes.dim() == 4 && planes.size(1) == 1, ErrorKind::kShapeMismatch,
          "feature extractor expects [B,1,rows,cols]");
  std::vector<torch::Tensor> feats;
  auto h = planes;
  for (const auto& layer : *layers_) {
    h = torch::silu(layer->as<torch::nn::Conv2d>()->forward(h));
    feats.push_back(h);
  }
  return feats;
}

std::string FeatureExtractorImpl::identity() const { return "phi2d-" + hash_parameters(*this); }

torch::Tensor feature_distance(FeatureExtractor& phi, const torch::Tensor& a,
                               const torch::Tensor& b) {
  require(a.sizes() == b.sizes(), ErrorKind::kShapeMismatch, "plane shapes differ");
  auto fa = phi->forward(a);
  auto fb = phi->forward(b);
  std::vector<torch::Tensor> diffs;
  for (std::size_t l = 0; l < fa.size(); ++l) diffs.push_back((fa[l] - fb[l]).flatten(1));
  return per_sample_norm(torch::cat(diffs, 1));
}

std::array<torch::Tensor, 3> triplanes(const torch::Tensor& x, const Index3& idx) {
  require(x.dim() == 5, ErrorKind::kShapeMismatch, "triplanes expects [B,C,H,W,D]");
  require(idx.i >= 0 && idx.i < x.size(2) && idx.j >= 0 && idx.j < x.size(3) && idx.k >= 0 &&
              idx.k < x.size(4),
          ErrorKind::kOutOfBounds, "plane index out of bounds");
  return {x.select(4, idx.k), x.select(3, idx.j), x.select(2, idx.i)};
}

torch::Tensor triplane_loss(const torch::Tensor& x, const torch::Tensor& x_rec,
                            FeatureExtractor& phi, const Index3& index) {
  require(x.sizes() == x_rec.sizes(), ErrorKind::kShapeMismatch,
          "tri-plane loss needs matching shapes");
  auto p = triplanes(x, index);
  auto q = triplanes(x_rec, index);
  torch::Tensor sum = feature_distance(phi, p[0], q[0]);
  for (int n = 1; n < 3; ++n) sum = sum + feature_distance(phi, p[n], q[n]);
  return sum.mean();
}

SliceDiscriminatorImpl::SliceDiscriminatorImpl(std::int64_t c) {
  conv0_ = register_module(
      "conv0", torch::nn::Conv2d(torch::nn::Conv2dOptions(1, c, 4).stride(2).padding(1)));
  conv1_ = register_module(
      "conv1", torch::nn::Conv2d(torch::nn::Conv2dOptions(c, 2 * c, 4).stride(2).padding(1)));
  conv2_ = register_module("conv2",
                           torch::nn::Conv2d(torch::nn::Conv2dOptions(2 * c, 1, 3).padding(1)));
}

torch::Tensor SliceDiscriminatorImpl::forward(const torch::Tensor& slices) {
  auto h = torch::leaky_relu(conv0_(slices), 0.2);
  h = torch::leaky_relu(conv1_(h), 0.2);
  return torch::sigmoid(conv2_(h));
}

AdversarialTerms adversarial_terms(const torch::Tensor& p_real, const torch::Tensor& p_fake) {
  auto pr = p_real.clamp(kProbEpsilon, 1.0 - kProbEpsilon);
  auto pf = p_fake.clamp(kProbEpsilon, 1.0 - kProbEpsilon);
  AdversarialTerms t;
  t.generator = -torch::log(pf).mean();
  t.discriminator = torch::log(pr).mean() + torch::log(1.0 - pf).mean();
  return t;
}

AdversarialTerms adv_loss(const SliceCritic& critic, const torch::Tensor& x,
                          const torch::Tensor& x_rec, const Index3& index) {
  require(x.sizes() == x_rec.sizes(), ErrorKind::kShapeMismatch,
          "adversarial loss needs matching shapes");
  auto p = triplanes(x, index);
  auto q = triplanes(x_rec, index);
  AdversarialTerms sum;
  for (int n = 0; n < 3; ++n) {
    auto t = adversarial_terms(critic(p[n]), critic(q[n]));
    sum.generator = n == 0 ? t.generator : sum.generator + t.generator;
    sum.discriminator = n == 0 ? t.discriminator : sum.discriminator + t.discriminator;
  }
  sum.generator = sum.generator / 3.0;
  sum.discriminator = sum.discriminator / 3.0;
  return sum;
}

torch::Tensor total_ae_loss(const torch::Tensor& vq, const torch::Tensor& adv,
                            const torch::Tensor& tp, const LossWeights& w) {
  return vq + w.adv * adv + w.tp * tp;
}

PvaeModelImpl::PvaeModelImpl(PvaeConfig cfg) : cfg_(std::move(cfg)) {
  cfg_.validate();
  encoder = register_module("encoder", PatchEncoder(cfg_));
  codebook = register_module("codebook", Codebook(cfg_.codebook_size, cfg_.code_dim));
  patch_decoder = register_module("patch_decoder", Decoder(cfg_));
  joint_decoder = register_module("joint_decoder", Decoder(cfg_));
  discriminator = register_module("discriminator", SliceDiscriminator(cfg_.disc_channels));
}

void PvaeModelImpl::check_latent(const torch::Tensor& latent, const Extent3& expected) const {
  require(latent.dim() == 5 && latent.size(1) == cfg_.code_dim, ErrorKind::kShapeMismatch,
          "latent must be [B," + std::to_string(cfg_.code_dim) + ",h,w,d]");
  require(spatial_extent(latent) == expected, ErrorKind::kShapeMismatch,
          "latent extent " + to_string(spatial_extent(latent)) + " != expected " +
              to_string(expected));
}

torch::Tensor PvaeModelImpl::encode_patch(const torch::Tensor& patches) {
  require(patches.dim() == 5 && patches.size(1) == 1, ErrorKind::kShapeMismatch,
          "patches must be [B,1,h,w,d]");
  require(spatial_extent(patches) == cfg_.patch_shape, ErrorKind::kShapeMismatch,
          "patch shape " + to_string(spatial_extent(patches)) + " != configured " +
              to_string(cfg_.patch_shape));
  return encoder->forward(patches);
}

QuantizeResult PvaeModelImpl::quantize(const torch::Tensor& z) const {
  return pvae::quantize(z, codebook);
}

torch::Tensor PvaeModelImpl::decode_patch(const torch::Tensor& latent) {
  check_latent(latent, cfg_.latent_patch_shape());
  return patch_decoder->forward(latent);
}

torch::Tensor PvaeModelImpl::decode_joint(const torch::Tensor& latent) {
  require(latent.dim() == 5 && latent.size(1) == cfg_.code_dim, ErrorKind::kShapeMismatch,
          "latent must be [B," + std::to_string(cfg_.code_dim) + ",h,w,d]");
  const auto lp = cfg_.latent_patch_shape();
  const auto e = spatial_extent(latent);
  require(e.h % lp.h == 0 && e.w % lp.w == 0 && e.d % lp.d == 0, ErrorKind::kShapeMismatch,
          "latent extent " + to_string(e) + " is not a whole number of latent patches " +
              to_string(lp));
  return joint_decoder->forward(latent);
}

PvaeModelImpl::VolumeEncoding PvaeModelImpl::encode_padded(const torch::Tensor& padded) {
  require(padded.dim() == 5 && padded.size(1) == 1, ErrorKind::kShapeMismatch,
          "padded volume must be [B,1,H,W,D]");
  const auto e = spatial_extent(padded);
  const auto& p = cfg_.patch_shape;
  require(e.h % p.h == 0 && e.w % p.w == 0 && e.d % p.d == 0, ErrorKind::kShapeMismatch,
          "padded extent " + to_string(e) + " not divisible by patch " + to_string(p));
  const Extent3 grid{e.h / p.h, e.w / p.w, e.d / p.d};
  const auto B = padded.size(0);
  auto z = encoder->forward(patchify(padded, p));
  auto q = quantize(z);
  VolumeEncoding out;
  out.z = depatchify(z, B, grid);
  out.q.quantized = depatchify(q.quantized, B, grid);
  out.q.straight_through = depatchify(q.straight_through, B, grid);
  out.q.indices = depatchify(q.indices.unsqueeze(1), B, grid).squeeze(1);
  return out;
}

LatentVolume PvaeModelImpl::encode_volume_patchwise(const Volume& vol) {
  vol.validate();
  auto layout = make_layout(vol.shape, cfg_.patch_shape);
  auto padded = to_tensor(pad_reflect(vol, layout.padded_extent()));
  torch::NoGradGuard no_grad;
  auto enc = encode_padded(padded);
  LatentVolume lat;
  lat.features = enc.q.quantized.detach();
  lat.indices = enc.q.indices;
  lat.layout = layout;
  lat.spacing = vol.spacing;
  lat.class_tag = vol.class_tag;
  lat.value_range = vol.value_range;
  return lat;
}

namespace {

Extent3 latent_extent(const PatchLayout& layout) {
  const auto e = layout.padded_extent();
  return {e.h / kReduction, e.w / kReduction, e.d / kReduction};
}

Volume finish_decode(const torch::Tensor& x, const LatentVolume& lat) {
  Volume out = to_volume(x, lat.spacing, lat.class_tag);
  out.value_range = lat.value_range;
  return crop(out, lat.layout.original_extent);
}

}  // namespace

Volume PvaeModelImpl::decode_volume_joint(const LatentVolume& lat) {
  check_latent(lat.features, latent_extent(lat.layout));
  require(lat.features.size(0) == 1, ErrorKind::kShapeMismatch, "expected a single latent volume");
  torch::NoGradGuard no_grad;
  return finish_decode(decode_joint(lat.features), lat);
}

Volume PvaeModelImpl::decode_volume_patchwise(const LatentVolume& lat) {
  check_latent(lat.features, latent_extent(lat.layout));
  require(lat.features.size(0) == 1, ErrorKind::kShapeMismatch, "expected a single latent volume");
  torch::NoGradGuard no_grad;
  auto patches = patch_decoder->forward(patchify(lat.features, cfg_.latent_patch_shape()));
  return finish_decode(depatchify(patches, 1, lat.layout.grid_counts), lat);
}

std::string PvaeModelImpl::encoder_hash() const {
  std::vector<std::pair<std::string, torch::Tensor>> named;
  for (const auto& item : encoder->named_parameters()) named.emplace_back("encoder." + item.key(), item.value());
  named.emplace_back("codebook.codes", codebook->codes);
  return hash_tensors(named);
}

nlohmann::json TrainConfig::to_json() const {
  return {{"steps", steps},
          {"batch_size", batch_size},
          {"lr", lr},
          {"disc_lr", disc_lr},
          {"seed", seed},
          {"revive_interval", revive_interval},
          {"checkpoint_every", checkpoint_every},
          {"checkpoint_path", checkpoint_path.string()},
          {"loss_log", loss_log.string()},
          {"naive_full_graph", naive_full_graph}};
}

TrainConfig TrainConfig::from_json(const nlohmann::json& j) {
  reject_unknown(j,
                 {"steps", "batch_size", "lr", "disc_lr", "seed", "revive_interval",
                  "checkpoint_every", "checkpoint_path", "loss_log", "naive_full_graph"},
                 "pvae training config");
  TrainConfig c;
  c.steps = j.value("steps", c.steps);
  c.batch_size = j.value("batch_size", c.batch_size);
  c.lr = j.value("lr", c.lr);
  c.disc_lr = j.value("disc_lr", c.disc_lr);
  c.seed = j.value("seed", c.seed);
  c.revive_interval = j.value("revive_interval", c.revive_interval);
  c.checkpoint_every = j.value("checkpoint_every", c.checkpoint_every);
  c.checkpoint_path = j.value("checkpoint_path", std::string());
  c.loss_log = j.value("loss_log", std::string());
  c.naive_full_graph = j.value("naive_full_graph", c.naive_full_graph);
  require(c.steps >= 0 && c.batch_size >= 1 && c.lr > 0 && c.disc_lr > 0, ErrorKind::kConfig,
          "invalid pvae training config");
  return c;
}

void prepare_stage2(PvaeModel& model) {
  require(model->stage() != Stage::kUntrained, ErrorKind::kConfig,
          "stage 2 requires stage-1 weights");
  if (model->stage() == Stage::kPatch) copy_parameters(*model->patch_decoder, *model->joint_decoder);
  set_requires_grad(*model->encoder, false);
  set_requires_grad(*model->codebook, false);
}

Trainer::Trainer(PvaeModel model, Stage stage, TrainConfig cfg, std::vector<Volume> dataset)
    : model_(std::move(model)), stage_(stage), cfg_(std::move(cfg)), rng_(cfg_.seed) {
  require(stage_ == Stage::kPatch || stage_ == Stage::kVolume, ErrorKind::kInvalidArgument,
          "trainer stage must be 1 or 2");
  require(!dataset.empty(), ErrorKind::kInvalidArgument, "training dataset is empty");
  const auto& mc = model_->config();
  for (const auto& v : dataset) {
    auto layout = make_layout(v.shape, mc.patch_shape);
    padded_.push_back(to_tensor(pad_reflect(v, layout.padded_extent())));
    layouts_.push_back(layout);
  }
  phi_ = FeatureExtractor(mc.feature_seed, mc.feature_channels);

  std::vector<torch::Tensor> gen_params;
  if (stage_ == Stage::kPatch) {
    for (auto* m : std::initializer_list<torch::nn::Module*>{
             model_->encoder.get(), model_->codebook.get(), model_->patch_decoder.get()}) {
      for (auto& p : m->parameters()) gen_params.push_back(p);
    }
  } else {
    prepare_stage2(model_);
    gen_params = model_->joint_decoder->parameters();
  }
  gen_opt_ = std::make_unique<torch::optim::Adam>(gen_params, torch::optim::AdamOptions(cfg_.lr));
  disc_opt_ = std::make_unique<torch::optim::Adam>(model_->discriminator->parameters(),
                                                   torch::optim::AdamOptions(cfg_.disc_lr));
}

torch::Tensor Trainer::sample_patches() {
  const auto& p = model_->config().patch_shape;
  std::vector<torch::Tensor> batch;
  for (std::int64_t b = 0; b < cfg_.batch_size; ++b) {
    const auto v = rng_.uniform_int(static_cast<std::int64_t>(padded_.size()));
    const auto n = rng_.uniform_int(layouts_[v].patch_count());
    const auto o = layouts_[v].patch_origin(n);
    batch.push_back(padded_[v].index({Slice(), Slice(), Slice(o.i, o.i + p.h),
                                      Slice(o.j, o.j + p.w), Slice(o.k, o.k + p.d)}));
  }
  return torch::cat(batch, 0);
}

namespace {

Index3 draw_index(Rng& rng, const Extent3& e) {
  Index3 idx;
  idx.i = rng.uniform_int(e.h);
  idx.j = rng.uniform_int(e.w);
  idx.k = rng.uniform_int(e.d);
  return idx;
}

void check_finite_loss(const torch::Tensor& loss, std::int64_t step, const char* what) {
  const double v = loss.item<double>();
  if (!std::isfinite(v)) {
    fail(ErrorKind::kDivergence, std::string("non-finite ") + what + " loss at step " +
                                     std::to_string(step) + "; lower the learning rate or check inputs");
  }
}

}  // namespace

void Trainer::discriminator_step(const torch::Tensor& x, const torch::Tensor& x_rec,
                                 const Index3& idx, StepLosses& out) {
  SliceCritic critic = [this](const torch::Tensor& s) { return model_->discriminator->forward(s); };
  auto terms = adv_loss(critic, x, x_rec.detach(), idx);
  // The discriminator maximizes its term.
  auto loss = -terms.discriminator;
  check_finite_loss(loss, step_, "discriminator");
  disc_opt_->zero_grad();
  loss.backward();
  disc_opt_->step();
  out.disc = terms.discriminator.item<double>();
}

StepLosses Trainer::step_patch() {
  auto& m = *model_;
  const auto& mc = m.config();
  auto x = sample_patches();
  auto z = m.encoder->forward(x);
  auto q = m.quantize(z);
  auto x_rec = m.patch_decoder->forward(q.straight_through);
  auto vq = vq_loss(x, x_rec, z, q.quantized);
  const auto idx = draw_index(rng_, mc.patch_shape);
  auto tp = triplane_loss(x, x_rec, phi_, idx);
  const bool adv_on = step_ >= mc.disc_warmup;
  SliceCritic critic = [&m](const torch::Tensor& s) { return m.discriminator->forward(s); };
  auto adv = adv_on ? adv_loss(critic, x, x_rec, idx).generator : torch::zeros({});
  auto total = total_ae_loss(vq.total, adv, tp, {mc.lambda_adv, mc.lambda_tp});
  check_finite_loss(total, step_, "autoencoder");

  gen_opt_->zero_grad();
  total.backward();
  gen_opt_->step();

  StepLosses out{step_, total.item<double>(), vq.total.item<double>(), adv.item<double>(),
                 tp.item<double>(), 0.0};
  if (adv_on) discriminator_step(x, x_rec, idx, out);

  m.codebook->record_usage(q.indices);
  if (cfg_.revive_interval > 0 && (step_ + 1) % cfg_.revive_interval == 0) {
    auto candidates = z.detach().permute({0, 2, 3, 4, 1}).reshape({-1, mc.code_dim});
    m.codebook->revive_dead_codes(candidates, rng_);
  }
  return out;
}

StepLosses Trainer::step_volume() {
  auto& m = *model_;
  const auto& mc = m.config();
  std::vector<torch::Tensor> batch;
  for (std::int64_t b = 0; b < cfg_.batch_size; ++b) {
    const auto v = rng_.uniform_int(static_cast<std::int64_t>(padded_.size()));
    if (!batch.empty()) {
      require(padded_[v].sizes() == batch.front().sizes(), ErrorKind::kShapeMismatch,
              "stage-2 batches need volumes of equal padded extent");
    }
    batch.push_back(padded_[v]);
  }
  auto x = torch::cat(batch, 0);

  PvaeModelImpl::VolumeEncoding enc;
  if (cfg_.naive_full_graph) {
    // Keep the encoder in the graph; its gradients are computed and discarded.
    set_requires_grad(*m.encoder, true);
    set_requires_grad(*m.codebook, true);
    enc = m.encode_padded(x);
  } else {
    torch::NoGradGuard no_grad;
    enc = m.encode_padded(x);
  }
  auto x_rec = m.decode_joint(enc.q.straight_through);
  auto vq = vq_loss(x, x_rec, enc.z, enc.q.quantized);
  const auto idx = draw_index(rng_, spatial_extent(x));
  auto tp = triplane_loss(x, x_rec, phi_, idx);
  const bool adv_on = step_ >= mc.disc_warmup;
  SliceCritic critic = [&m](const torch::Tensor& s) { return m.discriminator->forward(s); };
  auto adv = adv_on ? adv_loss(critic, x, x_rec, idx).generator : torch::zeros({});
  auto total = total_ae_loss(vq.total, adv, tp, {mc.lambda_adv, mc.lambda_tp});
  check_finite_loss(total, step_, "autoencoder");

  gen_opt_->zero_grad();
  total.backward();
  gen_opt_->step();
  if (cfg_.naive_full_graph) {
    for (auto& p : m.encoder->parameters()) p.mutable_grad().reset();
    for (auto& p : m.codebook->parameters()) p.mutable_grad().reset();
    set_requires_grad(*m.encoder, false);
    set_requires_grad(*m.codebook, false);
  }

  StepLosses out{step_, total.item<double>(), vq.total.item<double>(), adv.item<double>(),
                 tp.item<double>(), 0.0};
  if (adv_on) discriminator_step(x, x_rec, idx, out);
  return out;
}

StepLosses Trainer::step() {
  model_->train();
  StepLosses s = stage_ == Stage::kPatch ? step_patch() : step_volume();
  ++step_;
  model_->set_stage(stage_);
  append_log(s);
  if (cfg_.checkpoint_every > 0 && !cfg_.checkpoint_path.empty() &&
      step_ % cfg_.checkpoint_every == 0) {
    save_checkpoint(cfg_.checkpoint_path);
  }
  return s;
}

std::vector<StepLosses> Trainer::run(std::int64_t steps,
                                     const std::function<void(const StepLosses&)>& on_step) {
  std::vector<StepLosses> out;
  out.reserve(static_cast<std::size_t>(std::max<std::int64_t>(steps, 0)));
  for (std::int64_t i = 0; i < steps; ++i) {
    out.push_back(step());
    if (on_step) on_step(out.back());
  }
  return out;
}

void Trainer::append_log(const StepLosses& s) const {
  if (cfg_.loss_log.empty()) return;
  const bool fresh =
      !std::filesystem::exists(cfg_.loss_log) || std::filesystem::file_size(cfg_.loss_log) == 0;
  if (cfg_.loss_log.has_parent_path()) std::filesystem::create_directories(cfg_.loss_log.parent_path());
  std::ofstream os(cfg_.loss_log, std::ios::app);
  require(static_cast<bool>(os), ErrorKind::kIo, "cannot append to " + cfg_.loss_log.string());
  if (fresh) os << kLossLogHeader << '\n';
  char line[256];
  std::snprintf(line, sizeof(line), "%lld,%.9g,%.9g,%.9g,%.9g", static_cast<long long>(s.step),
                s.total, s.vq, s.adv, s.tp);
  os << line << '\n';
}

namespace {

void write_model(CheckpointWriter& w, const PvaeModel& model) {
  w.module("model", *model);
  w.json("config", model->config().to_json());
  w.integer("stage", static_cast<std::int64_t>(model->stage()));
}

}  // namespace

void Trainer::save_checkpoint(const std::filesystem::path& path) const {
  CheckpointWriter w("pvae");
  write_model(w, model_);
  w.json("train_config", cfg_.to_json());
  w.integer("trainer_stage", static_cast<std::int64_t>(stage_));
  w.integer("step", step_);
  w.optimizer("gen_opt", *gen_opt_);
  w.optimizer("disc_opt", *disc_opt_);
  w.tensor("rng_state", rng_.state());
  w.save(path);
}

void Trainer::load_checkpoint(const std::filesystem::path& path) {
  CheckpointReader r(path);
  r.expect_kind("pvae");
  require(r.has("step"), ErrorKind::kSchema, "checkpoint " + path.string() + " has no trainer state");
  require(PvaeConfig::from_json(r.json("config")).to_json() == model_->config().to_json(),
          ErrorKind::kConfig, "checkpoint model config differs from the trainer's model");
  require(r.integer("trainer_stage") == static_cast<std::int64_t>(stage_), ErrorKind::kConfig,
          "checkpoint was written by a different training stage");
  r.module("model", *model_);
  model_->set_stage(static_cast<Stage>(r.integer("stage")));
  r.optimizer("gen_opt", *gen_opt_);
  r.optimizer("disc_opt", *disc_opt_);
  step_ = r.integer("step");
  rng_.set_state(r.tensor("rng_state"));
}

PvaeModel train_stage1(const std::vector<Volume>& dataset, const PvaeConfig& model_cfg,
                       const TrainConfig& cfg) {
  torch::manual_seed(cfg.seed);
  PvaeModel model(model_cfg);
  Trainer t(model, Stage::kPatch, cfg, dataset);
  t.run(cfg.steps);
  if (!cfg.checkpoint_path.empty()) t.save_checkpoint(cfg.checkpoint_path);
  return model;
}

PvaeModel train_stage2(PvaeModel stage1, const std::vector<Volume>& dataset,
                       const TrainConfig& cfg) {
  Trainer t(stage1, Stage::kVolume, cfg, dataset);
  t.run(cfg.steps);
  if (!cfg.checkpoint_path.empty()) t.save_checkpoint(cfg.checkpoint_path);
  return stage1;
}

void save_model(const PvaeModel& model, const std::filesystem::path& path) {
  CheckpointWriter w("pvae");
  write_model(w, model);
  w.save(path);
}

PvaeModel load_model(const std::filesystem::path& path) {
  CheckpointReader r(path);
  r.expect_kind("pvae");
  PvaeModel model(PvaeConfig::from_json(r.json("config")));
  r.module("model", *model);
  model->set_stage(static_cast<Stage>(r.integer("stage")));
  if (model->stage() == Stage::kVolume) {
    set_requires_grad(*model->encoder, false);
    set_requires_grad(*model->codebook, false);
  }
  return model;
}

}  // namespace meddiff::pvae
