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

#include "meddiff/biflownet.hpp"

#include <cmath>
#include <cstdio>
#include <fstream>
#include <numeric>

#include "meddiff/checkpoint.hpp"
#include "meddiff/error.hpp"
#include "meddiff/torch_util.hpp"

namespace meddiff::biflownet {

namespace F = torch::nn::functional;

namespace {

std::int64_t group_count(std::int64_t requested, std::int64_t channels) {
  return std::gcd(std::max<std::int64_t>(requested, 1), channels);
}

torch::Tensor upsample2(const torch::Tensor& x) {
  return F::interpolate(x, F::InterpolateFuncOptions()
                               .scale_factor(std::vector<double>{2.0, 2.0, 2.0})
                               .mode(torch::kNearest));
}

torch::nn::Conv3d make_conv(std::int64_t in, std::int64_t out, std::int64_t k, std::int64_t stride = 1) {
  return torch::nn::Conv3d(
      torch::nn::Conv3dOptions(in, out, k).stride(stride).padding(k / 2));
}

bool is_tap(const BiFlowNetConfig& cfg, std::int64_t block) {
  for (auto b : cfg.fusion_blocks()) {
    if (b == block) return true;
  }
  return false;
}

}  // namespace

void BiFlowNetConfig::validate() const {
  require(channels >= 1, ErrorKind::kConfig, "latent channels must be positive");
  require(depth >= 4, ErrorKind::kConfig, "DiT depth must be >= 4 to fuse the first and last two blocks");
  require(token >= 1, ErrorKind::kConfig, "token size must be positive");
  require(latent_patch.h % token == 0 && latent_patch.w % token == 0 && latent_patch.d % token == 0,
          ErrorKind::kConfig,
          "token size " + std::to_string(token) + " does not divide latent patch " +
              to_string(latent_patch));
  require(embed_dim >= 1 && heads >= 1 && embed_dim % heads == 0, ErrorKind::kConfig,
          "embed_dim must be a positive multiple of heads");
  require(mlp_ratio >= 1, ErrorKind::kConfig, "mlp_ratio must be >= 1");
  for (auto w : unet_widths) require(w >= 1, ErrorKind::kConfig, "U-Net widths must be positive");
  require(cond_dim >= 2, ErrorKind::kConfig, "cond_dim must be >= 2");
  require(num_classes >= 1, ErrorKind::kConfig, "num_classes must be >= 1");
}

nlohmann::json BiFlowNetConfig::to_json() const {
  return {{"channels", channels},
          {"latent_patch", {latent_patch.h, latent_patch.w, latent_patch.d}},
          {"token", token},
          {"embed_dim", embed_dim},
          {"depth", depth},
          {"heads", heads},
          {"mlp_ratio", mlp_ratio},
          {"unet_widths", unet_widths},
          {"norm_groups", norm_groups},
          {"cond_dim", cond_dim},
          {"num_classes", num_classes},
          {"use_intra_flow", use_intra_flow}};
}

BiFlowNetConfig BiFlowNetConfig::from_json(const nlohmann::json& j) {
  static const char* known[] = {"channels", "latent_patch", "token", "embed_dim",
                                "depth", "heads", "mlp_ratio", "unet_widths",
                                "norm_groups", "cond_dim", "num_classes", "use_intra_flow"};
  for (const auto& item : j.items()) {
    bool ok = false;
    for (const char* k : known) ok = ok || item.key() == k;
    require(ok, ErrorKind::kConfig, "unknown key '" + item.key() + "' in biflownet config");
  }
  BiFlowNetConfig c;
  c.channels = j.value("channels", c.channels);
  if (j.contains("latent_patch")) {
    const auto& a = j.at("latent_patch");
    require(a.is_array() && a.size() == 3, ErrorKind::kConfig, "'latent_patch' needs 3 entries");
    c.latent_patch = {a[0].get<std::int64_t>(), a[1].get<std::int64_t>(), a[2].get<std::int64_t>()};
  }
  c.token = j.value("token", c.token);
  c.embed_dim = j.value("embed_dim", c.embed_dim);
  c.depth = j.value("depth", c.depth);
  c.heads = j.value("heads", c.heads);
  c.mlp_ratio = j.value("mlp_ratio", c.mlp_ratio);
  if (j.contains("unet_widths")) {
    const auto& a = j.at("unet_widths");
    require(a.is_array() && a.size() == 3, ErrorKind::kConfig, "'unet_widths' needs 3 entries");
    for (int i = 0; i < 3; ++i) c.unet_widths[i] = a[i].get<std::int64_t>();
  }
  c.norm_groups = j.value("norm_groups", c.norm_groups);
  c.cond_dim = j.value("cond_dim", c.cond_dim);
  c.num_classes = j.value("num_classes", c.num_classes);
  c.use_intra_flow = j.value("use_intra_flow", c.use_intra_flow);
  c.validate();
  return c;
}

torch::Tensor timestep_embedding(const torch::Tensor& t, std::int64_t dim) {
  const auto half = dim / 2;
  auto freqs = torch::exp(-std::log(10000.0) *
                          torch::arange(half, torch::TensorOptions().dtype(torch::kDouble)) /
                          static_cast<double>(half));
  auto args = t.to(torch::kDouble).reshape({-1, 1}) * freqs.reshape({1, -1});
  auto emb = torch::cat({torch::cos(args), torch::sin(args)}, 1);
  if (dim % 2 == 1) emb = torch::cat({emb, torch::zeros({emb.size(0), 1}, emb.options())}, 1);
  return emb;
}

ConditionEmbeddingImpl::ConditionEmbeddingImpl(std::int64_t dim, std::int64_t num_classes)
    : dim_(dim), num_classes_(num_classes) {
  fc1_ = register_module("fc1", torch::nn::Linear(dim, dim));
  fc2_ = register_module("fc2", torch::nn::Linear(dim, dim));
  classes_ = register_module("classes", torch::nn::Embedding(num_classes, dim));
}

torch::Tensor ConditionEmbeddingImpl::forward(const torch::Tensor& t, const torch::Tensor& c) {
  require(t.dim() == 1 && c.dim() == 1 && t.size(0) == c.size(0), ErrorKind::kShapeMismatch,
          "timesteps and classes must be [B] vectors of equal length");
  if (c.numel() > 0) {
    const auto lo = c.min().item<std::int64_t>(), hi = c.max().item<std::int64_t>();
    require(lo >= 0 && hi < num_classes_, ErrorKind::kInvalidArgument,
            "unknown class id " + std::to_string(lo < 0 ? lo : hi) + " (model knows " +
                std::to_string(num_classes_) + " classes)");
  }
  auto temb = timestep_embedding(t, dim_).to(fc1_->weight.scalar_type());
  return fc2_(torch::silu(fc1_(temb))) + classes_(c.to(torch::kLong));
}

DitEmbedImpl::DitEmbedImpl(const BiFlowNetConfig& cfg) : cfg_(cfg) {
  proj_ = register_module(
      "proj", torch::nn::Conv3d(torch::nn::Conv3dOptions(cfg.channels, cfg.embed_dim, cfg.token)
                                    .stride(cfg.token)));
  pos_ = register_parameter("pos", torch::randn({1, cfg.token_grid().count(), cfg.embed_dim}) * 0.02);
}

torch::Tensor DitEmbedImpl::forward(const torch::Tensor& patches) {
  require(patches.dim() == 5 && patches.size(1) == cfg_.channels &&
              spatial_extent(patches) == cfg_.latent_patch,
          ErrorKind::kShapeMismatch,
          "DiT expects [N," + std::to_string(cfg_.channels) + "," + to_string(cfg_.latent_patch) +
              "] patches");
  return proj_(patches).flatten(2).transpose(1, 2) + pos_;
}

DitBlockImpl::DitBlockImpl(std::int64_t dim, std::int64_t heads, std::int64_t mlp_ratio,
                           std::int64_t cond_dim)
    : heads_(heads) {
  norm1_ = register_module(
      "norm1", torch::nn::LayerNorm(torch::nn::LayerNormOptions({dim}).elementwise_affine(false).eps(1e-6)));
  norm2_ = register_module(
      "norm2", torch::nn::LayerNorm(torch::nn::LayerNormOptions({dim}).elementwise_affine(false).eps(1e-6)));
  qkv_ = register_module("qkv", torch::nn::Linear(dim, 3 * dim));
  attn_out_ = register_module("attn_out", torch::nn::Linear(dim, dim));
  mlp_in_ = register_module("mlp_in", torch::nn::Linear(dim, mlp_ratio * dim));
  mlp_out_ = register_module("mlp_out", torch::nn::Linear(mlp_ratio * dim, dim));
  ada_ = register_module("ada", torch::nn::Linear(cond_dim, 6 * dim));
}

torch::Tensor DitBlockImpl::forward(const torch::Tensor& x, const torch::Tensor& cond) {
  const auto N = x.size(0), L = x.size(1), E = x.size(2);
  const auto dh = E / heads_;
  auto mod = ada_(torch::silu(cond)).unsqueeze(1).chunk(6, -1);
  auto h = norm1_(x) * (1 + mod[1]) + mod[0];
  auto qkv = qkv_(h).reshape({N, L, 3, heads_, dh}).permute({2, 0, 3, 1, 4});
  auto att = torch::softmax(torch::matmul(qkv[0], qkv[1].transpose(-2, -1)) /
                                std::sqrt(static_cast<double>(dh)),
                            -1);
  auto o = torch::matmul(att, qkv[2]).transpose(1, 2).reshape({N, L, E});
  auto y = x + mod[2] * attn_out_(o);
  h = norm2_(y) * (1 + mod[4]) + mod[3];
  return y + mod[5] * mlp_out_(torch::gelu(mlp_in_(h)));
}

FinalLayerImpl::FinalLayerImpl(const BiFlowNetConfig& cfg) : cfg_(cfg) {
  norm_ = register_module("norm", torch::nn::LayerNorm(torch::nn::LayerNormOptions({cfg.embed_dim})
                                                           .elementwise_affine(false)
                                                           .eps(1e-6)));
  ada_ = register_module("ada", torch::nn::Linear(cfg.cond_dim, 2 * cfg.embed_dim));
  const auto t = cfg.token;
  proj_ = register_module("proj", torch::nn::Linear(cfg.embed_dim, t * t * t * cfg.channels));
}

torch::Tensor FinalLayerImpl::forward(const torch::Tensor& x, const torch::Tensor& cond) {
  auto mod = ada_(torch::silu(cond)).unsqueeze(1).chunk(2, -1);
  auto y = proj_(norm_(x) * (1 + mod[1]) + mod[0]);
  const auto g = cfg_.token_grid();
  const auto t = cfg_.token, C = cfg_.channels;
  return y.reshape({x.size(0), g.h, g.w, g.d, C, t, t, t})
      .permute({0, 4, 1, 5, 2, 6, 3, 7})
      .reshape({x.size(0), C, g.h * t, g.w * t, g.d * t});
}

CondResBlockImpl::CondResBlockImpl(std::int64_t in, std::int64_t out, std::int64_t cond_dim,
                                   std::int64_t groups) {
  norm1_ = register_module("norm1", torch::nn::GroupNorm(group_count(groups, in), in));
  conv1_ = register_module("conv1", make_conv(in, out, 3));
  cond_proj_ = register_module("cond_proj", torch::nn::Linear(cond_dim, out));
  norm2_ = register_module("norm2", torch::nn::GroupNorm(group_count(groups, out), out));
  conv2_ = register_module("conv2", make_conv(out, out, 3));
  if (in != out) skip_ = register_module("skip", make_conv(in, out, 1));
}

torch::Tensor CondResBlockImpl::forward(const torch::Tensor& x, const torch::Tensor& cond) {
  auto h = conv1_(torch::silu(norm1_(x)));
  h = h + cond_proj_(torch::silu(cond)).reshape({h.size(0), h.size(1), 1, 1, 1});
  h = conv2_(torch::silu(norm2_(h)));
  return (skip_ ? skip_(x) : x) + h;
}

UNetEncoderImpl::UNetEncoderImpl(const BiFlowNetConfig& cfg) {
  const auto [c0, c1, c2] = cfg.unet_widths;
  const auto g = cfg.norm_groups;
  conv_in_ = register_module("conv_in", make_conv(cfg.channels, c0, 3));
  res0_ = register_module("res0", CondResBlock(c0, c0, cfg.cond_dim, g));
  down0_ = register_module("down0", make_conv(c0, c1, 3, 2));
  res1_ = register_module("res1", CondResBlock(c1, c1, cfg.cond_dim, g));
  down1_ = register_module("down1", make_conv(c1, c2, 3, 2));
  mid_ = register_module("mid", CondResBlock(c2, c2, cfg.cond_dim, g));
}

EncoderFeatures UNetEncoderImpl::forward(const torch::Tensor& z, const torch::Tensor& cond,
                                         const torch::Tensor& inject0,
                                         const torch::Tensor& inject1) {
  EncoderFeatures f;
  auto h = res0_(conv_in_(z), cond);
  if (inject0.defined()) h = fuse(inject0, h);
  f.skip0 = h;
  h = res1_(down0_(h), cond);
  if (inject1.defined()) h = fuse(inject1, h);
  f.skip1 = h;
  f.mid = mid_(down1_(h), cond);
  return f;
}

UNetDecoderImpl::UNetDecoderImpl(const BiFlowNetConfig& cfg) {
  const auto [c0, c1, c2] = cfg.unet_widths;
  const auto g = cfg.norm_groups;
  up1_ = register_module("up1", make_conv(c2, c1, 3));
  res1_ = register_module("res1", CondResBlock(2 * c1, c1, cfg.cond_dim, g));
  up0_ = register_module("up0", make_conv(c1, c0, 3));
  res0_ = register_module("res0", CondResBlock(2 * c0, c0, cfg.cond_dim, g));
  norm_out_ = register_module("norm_out", torch::nn::GroupNorm(group_count(g, c0), c0));
  conv_out_ = register_module("conv_out", make_conv(c0, cfg.channels, 3));
}

torch::Tensor UNetDecoderImpl::forward(const EncoderFeatures& enc, const torch::Tensor& cond,
                                       const torch::Tensor& inject2,
                                       const torch::Tensor& inject3) {
  auto h = up1_(upsample2(enc.mid));
  h = res1_(torch::cat({h, enc.skip1}, 1), cond);
  if (inject2.defined()) h = fuse(inject2, h);
  h = up0_(upsample2(h));
  h = res0_(torch::cat({h, enc.skip0}, 1), cond);
  if (inject3.defined()) h = fuse(inject3, h);
  return conv_out_(torch::silu(norm_out_(h)));
}

torch::Tensor fuse(const torch::Tensor& dit, const torch::Tensor& unet) {
  require(dit.sizes() == unet.sizes(), ErrorKind::kShapeMismatch,
          "fusion operands differ: " + c10::str(dit.sizes()) + " vs " + c10::str(unet.sizes()));
  return dit + unet;
}

torch::Tensor patchify_latent(const torch::Tensor& z, const Extent3& latent_patch) {
  return patchify(z, latent_patch);
}

torch::Tensor depatchify_latent(const torch::Tensor& patches, std::int64_t batch,
                                const Extent3& grid) {
  return depatchify(patches, batch, grid);
}

BiFlowNetImpl::BiFlowNetImpl(BiFlowNetConfig cfg) : cfg_(std::move(cfg)) {
  cfg_.validate();
  const auto [c0, c1, c2] = cfg_.unet_widths;
  (void)c2;
  cond_embed = register_module("cond_embed", ConditionEmbedding(cfg_.cond_dim, cfg_.num_classes));
  dit_embed = register_module("dit_embed", DitEmbed(cfg_));
  blocks = register_module("blocks", torch::nn::ModuleList());
  for (std::int64_t i = 0; i < cfg_.depth; ++i) {
    blocks->push_back(DitBlock(cfg_.embed_dim, cfg_.heads, cfg_.mlp_ratio, cfg_.cond_dim));
  }
  final_layer = register_module("final_layer", FinalLayer(cfg_));
  tap_proj = register_module("tap_proj", torch::nn::ModuleList());
  for (auto width : {c0, c1, c1, c0}) tap_proj->push_back(make_conv(cfg_.embed_dim, width, 1));
  unet_enc = register_module("unet_enc", UNetEncoder(cfg_));
  unet_dec = register_module("unet_dec", UNetDecoder(cfg_));
}

torch::Tensor BiFlowNetImpl::condition(const torch::Tensor& t, const torch::Tensor& c) {
  return cond_embed->forward(t, c);
}

Extent3 BiFlowNetImpl::patch_grid(const torch::Tensor& z) const {
  require(z.dim() == 5 && z.size(1) == cfg_.channels, ErrorKind::kShapeMismatch,
          "latent must be [B," + std::to_string(cfg_.channels) + ",H,W,D]");
  const auto e = spatial_extent(z);
  const auto& p = cfg_.latent_patch;
  require(e.h % p.h == 0 && e.w % p.w == 0 && e.d % p.d == 0, ErrorKind::kShapeMismatch,
          "latent extent " + to_string(e) + " is not divisible into latent patches " + to_string(p));
  return {e.h / p.h, e.w / p.w, e.d / p.d};
}

IntraOutput BiFlowNetImpl::intra_forward(const torch::Tensor& patches, const torch::Tensor& cond,
                                         const torch::Tensor& last_tap_residual) {
  require(cond.dim() == 2 && cond.size(0) == patches.size(0), ErrorKind::kShapeMismatch,
          "intra-patch flow needs one conditioning row per patch");
  IntraOutput out;
  auto h = dit_embed->forward(patches);
  for (std::int64_t i = 0; i < cfg_.depth; ++i) {
    h = blocks[i]->as<DitBlock>()->forward(h, cond);
    if (i == cfg_.depth - 1 && last_tap_residual.defined()) {
      require(last_tap_residual.sizes() == h.sizes(), ErrorKind::kShapeMismatch,
              "control residual does not match the DiT tokens");
      h = h + last_tap_residual;
    }
    if (is_tap(cfg_, i)) out.taps.push_back(h);
  }
  out.output = final_layer->forward(h, cond);
  return out;
}

torch::Tensor tokens_to_volume(const torch::Tensor& tokens, const BiFlowNetConfig& cfg,
                               std::int64_t batch, const Extent3& patch_grid) {
  const auto g = cfg.token_grid();
  require(tokens.dim() == 3 && tokens.size(1) == g.count() && tokens.size(2) == cfg.embed_dim,
          ErrorKind::kShapeMismatch, "token tensor does not match the DiT configuration");
  auto x = tokens.transpose(1, 2).reshape({tokens.size(0), cfg.embed_dim, g.h, g.w, g.d});
  return depatchify(x, batch, patch_grid);
}

torch::Tensor resample_to(const torch::Tensor& x, const Extent3& target) {
  const auto src = spatial_extent(x);
  if (src == target) return x;
  if (target.h % src.h == 0 && target.w % src.w == 0 && target.d % src.d == 0) {
    return F::interpolate(x, F::InterpolateFuncOptions()
                                 .size(std::vector<std::int64_t>{target.h, target.w, target.d})
                                 .mode(torch::kNearest));
  }
  require(src.h % target.h == 0 && src.w % target.w == 0 && src.d % target.d == 0,
          ErrorKind::kShapeMismatch,
          "cannot align DiT tap grid " + to_string(src) + " with U-Net stage " + to_string(target));
  return F::adaptive_avg_pool3d(x, F::AdaptiveAvgPool3dFuncOptions({target.h, target.w, target.d}));
}

torch::Tensor BiFlowNetImpl::project_tap(std::size_t site, const torch::Tensor& tokens,
                                         std::int64_t batch, const Extent3& grid,
                                         const Extent3& target) {
  auto x = tokens_to_volume(tokens, cfg_, batch, grid);
  return resample_to(tap_proj[site]->as<torch::nn::Conv3d>()->forward(x), target);
}

torch::Tensor BiFlowNetImpl::inter_forward(const torch::Tensor& z, const torch::Tensor& cond,
                                           const std::array<torch::Tensor, 4>& injected,
                                           const ControlResiduals* ctrl) {
  require(z.dim() == 5 && z.size(1) == cfg_.channels, ErrorKind::kShapeMismatch,
          "latent must be [B," + std::to_string(cfg_.channels) + ",H,W,D]");
  const auto e = spatial_extent(z);
  require(e.h % 4 == 0 && e.w % 4 == 0 && e.d % 4 == 0, ErrorKind::kShapeMismatch,
          "latent extent " + to_string(e) + " must be divisible by 4 for the U-Net stages");
  auto enc = unet_enc->forward(z, cond, injected[0], injected[1]);
  if (ctrl != nullptr) {
    if (ctrl->skip0.defined()) enc.skip0 = enc.skip0 + ctrl->skip0;
    if (ctrl->skip1.defined()) enc.skip1 = enc.skip1 + ctrl->skip1;
    if (ctrl->mid.defined()) enc.mid = enc.mid + ctrl->mid;
  }
  return unet_dec->forward(enc, cond, injected[2], injected[3]);
}

torch::Tensor BiFlowNetImpl::forward(const torch::Tensor& zt, const torch::Tensor& t,
                                     const torch::Tensor& c, const ControlResiduals* ctrl) {
  const auto grid = patch_grid(zt);
  const auto B = zt.size(0);
  require(t.numel() == B && c.numel() == B, ErrorKind::kShapeMismatch,
          "need one timestep and one class per latent");
  auto cond = condition(t.reshape({-1}), c.reshape({-1}));
  if (!cfg_.use_intra_flow) return inter_forward(zt, cond, {}, ctrl);

  auto patches = patchify_latent(zt, cfg_.latent_patch);
  auto pcond = cond.repeat_interleave(grid.count(), 0);
  auto intra = intra_forward(patches, pcond,
                             ctrl != nullptr ? ctrl->dit_tap : torch::Tensor());
  const auto e = spatial_extent(zt);
  const Extent3 half{e.h / 2, e.w / 2, e.d / 2};
  const std::array<Extent3, 4> targets{e, half, half, e};
  std::array<torch::Tensor, 4> injected;
  for (std::size_t s = 0; s < 4; ++s) {
    injected[s] = project_tap(s, intra.taps[s], B, grid, targets[s]);
  }
  auto unet_out = inter_forward(zt, cond, injected, ctrl);
  return fuse(depatchify_latent(intra.output, B, grid), unet_out);
}

diffusion::Estimator as_estimator(BiFlowNet& net) {
  return [net](const torch::Tensor& zt, const torch::Tensor& t, const torch::Tensor& c) mutable {
    return net->forward(zt, t, c);
  };
}

nlohmann::json TrainConfig::to_json() const {
  return {{"steps", steps},       {"batch_size", batch_size}, {"lr", lr},
          {"lr_power", lr_power}, {"seed", seed},             {"log_every", log_every},
          {"loss_log", loss_log.string()}};
}

TrainConfig TrainConfig::from_json(const nlohmann::json& j) {
  static const char* known[] = {"steps", "batch_size", "lr", "lr_power", "seed", "log_every", "loss_log"};
  for (const auto& item : j.items()) {
    bool ok = false;
    for (const char* k : known) ok = ok || item.key() == k;
    require(ok, ErrorKind::kConfig, "unknown key '" + item.key() + "' in diffusion training config");
  }
  TrainConfig c;
  c.steps = j.value("steps", c.steps);
  c.batch_size = j.value("batch_size", c.batch_size);
  c.lr = j.value("lr", c.lr);
  c.lr_power = j.value("lr_power", c.lr_power);
  c.seed = j.value("seed", c.seed);
  c.log_every = j.value("log_every", c.log_every);
  c.loss_log = j.value("loss_log", std::string());
  require(c.steps >= 0 && c.batch_size >= 1 && c.lr > 0 && c.lr_power >= 0, ErrorKind::kConfig,
          "invalid diffusion training config");
  return c;
}

std::vector<double> train(BiFlowNet& net, const torch::Tensor& latents, const torch::Tensor& classes,
                          const diffusion::NoiseSchedule& sched, const TrainConfig& cfg,
                          const std::function<void(std::int64_t, double)>& on_step) {
  require(latents.dim() == 5 && latents.size(0) >= 1, ErrorKind::kInvalidArgument,
          "training needs at least one latent [N,C,H,W,D]");
  require(classes.numel() == latents.size(0), ErrorKind::kShapeMismatch,
          "one class id per latent required");
  Rng rng(cfg.seed);
  torch::optim::Adam opt(net->parameters(), torch::optim::AdamOptions(cfg.lr));
  auto estimator = as_estimator(net);
  std::ofstream log;
  if (!cfg.loss_log.empty()) {
    if (cfg.loss_log.has_parent_path()) std::filesystem::create_directories(cfg.loss_log.parent_path());
    log.open(cfg.loss_log);
    require(static_cast<bool>(log), ErrorKind::kIo, "cannot write " + cfg.loss_log.string());
    log << "step,loss,lr\n";
  }
  net->train();
  std::vector<double> losses;
  losses.reserve(static_cast<std::size_t>(cfg.steps));
  const auto n = latents.size(0);
  for (std::int64_t step = 0; step < cfg.steps; ++step) {
    const double lr = diffusion::polynomial_lr(cfg.lr, step, cfg.steps, cfg.lr_power);
    for (auto& group : opt.param_groups()) {
      static_cast<torch::optim::AdamOptions&>(group.options()).lr(lr);
    }
    auto idx = n == 1 ? torch::zeros({cfg.batch_size}, torch::kLong) : rng.randint(n, {cfg.batch_size});
    auto z0 = latents.index_select(0, idx);
    auto c = classes.reshape({-1}).to(torch::kLong).index_select(0, idx);
    auto loss = diffusion::diffusion_loss(estimator, z0, c, sched, rng);
    const double v = loss.item<double>();
    if (!std::isfinite(v)) {
      fail(ErrorKind::kDivergence, "non-finite diffusion loss at step " + std::to_string(step));
    }
    opt.zero_grad();
    loss.backward();
    opt.step();
    losses.push_back(v);
    if (log.is_open()) {
      char line[128];
      std::snprintf(line, sizeof(line), "%lld,%.9g,%.6g", static_cast<long long>(step), v, lr);
      log << line << '\n';
    }
    if (on_step) on_step(step, v);
  }
  net->eval();
  return losses;
}

std::int64_t EstimatorBundle::class_index(const std::string& name) const {
  for (std::size_t i = 0; i < class_names.size(); ++i) {
    if (class_names[i] == name) return static_cast<std::int64_t>(i);
  }
  std::string known;
  for (const auto& c : class_names) known += (known.empty() ? "" : ", ") + c;
  fail(ErrorKind::kInvalidArgument, "unknown class '" + name + "'; known classes: " + known);
}

void save_bundle(const EstimatorBundle& b, const std::filesystem::path& path) {
  CheckpointWriter w("biflownet");
  w.module("model", *b.net);
  w.json("architecture", b.net->config().to_json());
  w.json("schedule", {{"T", b.schedule.T}, {"s", b.cosine_offset}, {"hash", b.schedule.hash()}});
  w.json("latent_stats", b.stats.to_json());
  w.json("meta", {{"class_names", b.class_names},
                  {"latent_extent", {b.latent_extent.h, b.latent_extent.w, b.latent_extent.d}},
                  {"volume_extent", {b.volume_extent.h, b.volume_extent.w, b.volume_extent.d}},
                  {"pvae_hash", b.pvae_hash}});
  w.save(path);
}

EstimatorBundle load_bundle(const std::filesystem::path& path) {
  CheckpointReader r(path);
  r.expect_kind("biflownet");
  EstimatorBundle b;
  b.net = BiFlowNet(BiFlowNetConfig::from_json(r.json("architecture")));
  r.module("model", *b.net);
  b.net->eval();
  const auto s = r.json("schedule");
  b.cosine_offset = s.at("s").get<double>();
  b.schedule = diffusion::NoiseSchedule::cosine(s.at("T").get<std::int64_t>(), b.cosine_offset);
  require(b.schedule.hash() == s.at("hash").get<std::string>(), ErrorKind::kHashMismatch,
          "schedule hash mismatch in " + path.string());
  b.stats = diffusion::LatentStats::from_json(r.json("latent_stats"));
  const auto meta = r.json("meta");
  b.class_names = meta.at("class_names").get<std::vector<std::string>>();
  const auto e = meta.at("latent_extent");
  b.latent_extent = {e[0].get<std::int64_t>(), e[1].get<std::int64_t>(), e[2].get<std::int64_t>()};
  const auto v = meta.at("volume_extent");
  b.volume_extent = {v[0].get<std::int64_t>(), v[1].get<std::int64_t>(), v[2].get<std::int64_t>()};
  b.pvae_hash = meta.at("pvae_hash").get<std::string>();
  return b;
}

}  // namespace meddiff::biflownet
