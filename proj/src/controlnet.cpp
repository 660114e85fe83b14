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

#include "meddiff/controlnet.hpp"

#include <cmath>
#include <cstdio>
#include <fstream>

#include "meddiff/checkpoint.hpp"
#include "meddiff/error.hpp"

namespace meddiff::controlnet {

using biflownet::BiFlowNetConfig;

namespace {

torch::nn::Conv3d zero_conv(std::int64_t channels) {
  torch::nn::Conv3d conv(torch::nn::Conv3dOptions(channels, channels, 1));
  torch::NoGradGuard no_grad;
  conv->weight.zero_();
  conv->bias.zero_();
  return conv;
}

torch::Tensor broadcast_batch(const torch::Tensor& c_task, std::int64_t batch) {
  if (c_task.size(0) == batch) return c_task;
  require(c_task.size(0) == 1, ErrorKind::kShapeMismatch,
          "task condition batch does not match the latent batch");
  return c_task.expand({batch, c_task.size(1), c_task.size(2), c_task.size(3), c_task.size(4)});
}

}  // namespace

torch::Tensor encode_condition(const Volume& cond, pvae::PvaeModel& model,
                               const diffusion::LatentStats& stats, const Extent3* expected_shape) {
  if (expected_shape != nullptr) {
    require(cond.shape == *expected_shape, ErrorKind::kShapeMismatch,
            "condition extent " + to_string(cond.shape) + " differs from target extent " +
                to_string(*expected_shape));
  }
  auto lat = model->encode_volume_patchwise(cond);
  return stats.standardize(lat.features);
}

ControlAdapterImpl::ControlAdapterImpl(biflownet::BiFlowNet base) : base_(std::move(base)) {
  require(!base_.is_empty(), ErrorKind::kInvalidArgument, "adapter needs a base estimator");
  set_requires_grad(*base_, false);
  const BiFlowNetConfig& cfg = base_->config();
  const auto [c0, c1, c2] = cfg.unet_widths;

  hint = register_module("hint", torch::nn::Conv3d(torch::nn::Conv3dOptions(cfg.channels, cfg.channels, 1)));
  dit_embed = register_module("dit_embed", biflownet::DitEmbed(cfg));
  copy_parameters(*base_->dit_embed, *dit_embed);
  blocks = register_module("blocks", torch::nn::ModuleList());
  for (std::int64_t i = 0; i < cfg.depth / 2; ++i) {
    biflownet::DitBlock block(cfg.embed_dim, cfg.heads, cfg.mlp_ratio, cfg.cond_dim);
    copy_parameters(*base_->blocks[i], *block);
    blocks->push_back(block);
  }
  tap_proj = register_module("tap_proj", torch::nn::ModuleList());
  for (std::size_t s = 0; s < 2; ++s) {
    const auto width = s == 0 ? c0 : c1;
    torch::nn::Conv3d proj(torch::nn::Conv3dOptions(cfg.embed_dim, width, 1));
    copy_parameters(*base_->tap_proj[s], *proj);
    tap_proj->push_back(proj);
  }
  unet_enc = register_module("unet_enc", biflownet::UNetEncoder(cfg));
  copy_parameters(*base_->unet_enc, *unet_enc);

  zero_skip0 = register_module("zero_skip0", zero_conv(c0));
  zero_skip1 = register_module("zero_skip1", zero_conv(c1));
  zero_mid = register_module("zero_mid", zero_conv(c2));
  zero_tap = register_module("zero_tap", torch::nn::Linear(cfg.embed_dim, cfg.embed_dim));
  {
    torch::NoGradGuard no_grad;
    zero_tap->weight.zero_();
    zero_tap->bias.zero_();
  }
}

biflownet::ControlResiduals ControlAdapterImpl::residuals(const torch::Tensor& zt,
                                                         const torch::Tensor& cond,
                                                         const torch::Tensor& c_task) {
  const BiFlowNetConfig& cfg = base_->config();
  require(c_task.dim() == 5 && spatial_extent(c_task) == spatial_extent(zt) &&
              c_task.size(1) == zt.size(1),
          ErrorKind::kShapeMismatch, "task condition latent does not match z_t");
  const auto B = zt.size(0);
  auto h = zt + hint(broadcast_batch(c_task, B));
  const auto grid = base_->patch_grid(h);

  biflownet::ControlResiduals res;
  torch::Tensor inject0, inject1;
  if (cfg.use_intra_flow) {
    auto tokens = dit_embed->forward(biflownet::patchify_latent(h, cfg.latent_patch));
    auto pcond = cond.repeat_interleave(grid.count(), 0);
    std::vector<torch::Tensor> taps;
    for (std::size_t i = 0; i < blocks->size(); ++i) {
      tokens = blocks[i]->as<biflownet::DitBlock>()->forward(tokens, pcond);
      if (i < 2) taps.push_back(tokens);
    }
    const auto e = spatial_extent(zt);
    const Extent3 half{e.h / 2, e.w / 2, e.d / 2};
    inject0 = biflownet::resample_to(
        tap_proj[0]->as<torch::nn::Conv3d>()->forward(biflownet::tokens_to_volume(taps[0], cfg, B, grid)), e);
    inject1 = biflownet::resample_to(
        tap_proj[1]->as<torch::nn::Conv3d>()->forward(biflownet::tokens_to_volume(taps[1], cfg, B, grid)), half);
    res.dit_tap = zero_tap(tokens);
  }
  auto enc = unet_enc->forward(h, cond, inject0, inject1);
  res.skip0 = zero_skip0(enc.skip0);
  res.skip1 = zero_skip1(enc.skip1);
  res.mid = zero_mid(enc.mid);
  return res;
}

torch::Tensor ControlAdapterImpl::forward(const torch::Tensor& zt, const torch::Tensor& t,
                                          const torch::Tensor& c, const torch::Tensor& c_task) {
  auto cond = base_->condition(t.reshape({-1}), c.reshape({-1}));
  auto res = residuals(zt, cond, c_task);
  return base_->forward(zt, t, c, &res);
}

std::vector<torch::Tensor> ControlAdapterImpl::connector_parameters() const {
  std::vector<torch::Tensor> out;
  for (const auto* m : std::initializer_list<const torch::nn::Module*>{
           zero_skip0.get(), zero_skip1.get(), zero_mid.get(), zero_tap.get()}) {
    for (const auto& p : m->parameters()) out.push_back(p);
  }
  return out;
}

ControlAdapter init_adapter(biflownet::BiFlowNet base) { return ControlAdapter(std::move(base)); }

diffusion::Estimator as_estimator(ControlAdapter& adapter, const torch::Tensor& c_task) {
  return [adapter, c_task](const torch::Tensor& zt, const torch::Tensor& t,
                           const torch::Tensor& c) mutable {
    return adapter->forward(zt, t, c, c_task);
  };
}

nlohmann::json FinetuneConfig::to_json() const {
  return {{"steps", steps}, {"batch_size", batch_size}, {"lr", lr},
          {"lr_power", lr_power}, {"seed", seed}, {"loss_log", loss_log.string()}};
}

FinetuneConfig FinetuneConfig::from_json(const nlohmann::json& j) {
  static const char* known[] = {"steps", "batch_size", "lr", "lr_power", "seed", "loss_log"};
  for (const auto& item : j.items()) {
    bool ok = false;
    for (const char* k : known) ok = ok || item.key() == k;
    require(ok, ErrorKind::kConfig, "unknown key '" + item.key() + "' in controlnet config");
  }
  FinetuneConfig c;
  c.steps = j.value("steps", c.steps);
  c.batch_size = j.value("batch_size", c.batch_size);
  c.lr = j.value("lr", c.lr);
  c.lr_power = j.value("lr_power", c.lr_power);
  c.seed = j.value("seed", c.seed);
  c.loss_log = j.value("loss_log", std::string());
  require(c.steps >= 0 && c.batch_size >= 1 && c.lr > 0, ErrorKind::kConfig,
          "invalid controlnet fine-tuning config");
  return c;
}

std::vector<double> finetune(ControlAdapter& adapter, const torch::Tensor& targets,
                             const torch::Tensor& conditions, const torch::Tensor& classes,
                             const diffusion::NoiseSchedule& sched, const FinetuneConfig& cfg,
                             const std::function<void(std::int64_t, double)>& on_step) {
  require(targets.dim() == 5 && targets.size(0) >= 1, ErrorKind::kInvalidArgument,
          "fine-tuning dataset is empty");
  require(conditions.sizes() == targets.sizes(), ErrorKind::kShapeMismatch,
          "conditions and targets differ in shape");
  require(classes.numel() == targets.size(0), ErrorKind::kShapeMismatch,
          "one class id per pair required");
  Rng rng(cfg.seed);
  torch::optim::Adam opt(adapter->parameters(), torch::optim::AdamOptions(cfg.lr));
  std::ofstream log;
  if (!cfg.loss_log.empty()) {
    if (cfg.loss_log.has_parent_path()) std::filesystem::create_directories(cfg.loss_log.parent_path());
    log.open(cfg.loss_log);
    require(static_cast<bool>(log), ErrorKind::kIo, "cannot write " + cfg.loss_log.string());
    log << "step,loss,lr\n";
  }
  adapter->train();
  const auto n = targets.size(0);
  std::vector<double> losses;
  for (std::int64_t step = 0; step < cfg.steps; ++step) {
    const double lr = diffusion::polynomial_lr(cfg.lr, step, cfg.steps, cfg.lr_power);
    for (auto& group : opt.param_groups()) {
      static_cast<torch::optim::AdamOptions&>(group.options()).lr(lr);
    }
    auto idx = n == 1 ? torch::zeros({cfg.batch_size}, torch::kLong) : rng.randint(n, {cfg.batch_size});
    auto c_task = conditions.index_select(0, idx);
    auto batch = diffusion::draw_batch(targets.index_select(0, idx),
                                       classes.reshape({-1}).to(torch::kLong).index_select(0, idx),
                                       sched, rng);
    auto loss = diffusion::batch_loss(as_estimator(adapter, c_task), batch);
    const double v = loss.item<double>();
    if (!std::isfinite(v)) {
      fail(ErrorKind::kDivergence, "non-finite fine-tuning loss at step " + std::to_string(step));
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
  adapter->eval();
  return losses;
}

Volume decode_sample(const torch::Tensor& z_std, pvae::PvaeModel& model,
                     const diffusion::LatentStats& stats, const Volume& like) {
  torch::NoGradGuard no_grad;
  auto z = stats.destandardize(z_std).to(torch::kFloat);
  // The decoders only ever saw codebook vectors; snap the sample onto them.
  auto q = model->quantize(z);
  pvae::LatentVolume lat;
  lat.features = q.quantized.detach();
  lat.indices = q.indices;
  lat.layout = make_layout(like.shape, model->config().patch_shape);
  lat.spacing = like.spacing;
  lat.class_tag = like.class_tag;
  lat.value_range = like.value_range;
  return model->decode_volume_joint(lat);
}

Volume conditional_sample(ControlAdapter& adapter, const Volume& cond_vol, std::int64_t class_id,
                          pvae::PvaeModel& model, const diffusion::LatentStats& stats,
                          const diffusion::NoiseSchedule& sched, Rng& rng, double clip_denoised) {
  auto c_task = encode_condition(cond_vol, model, stats);
  auto c = torch::full({1}, class_id, torch::kLong);
  adapter->eval();
  auto est = diffusion::clip_denoised(as_estimator(adapter, c_task), sched, clip_denoised);
  auto z = diffusion::sample(est, c_task.sizes(), c, sched, rng);
  return decode_sample(z, model, stats, cond_vol);
}

void save_adapter(const ControlAdapter& adapter, const std::string& base_hash,
                  const std::filesystem::path& path) {
  CheckpointWriter w("controlnet");
  w.module("adapter", *adapter);
  w.json("meta", {{"base_hash", base_hash},
                  {"architecture", adapter->base()->config().to_json()}});
  w.save(path);
}

ControlAdapter load_adapter(biflownet::BiFlowNet base, const std::string& base_hash,
                            const std::filesystem::path& path) {
  CheckpointReader r(path);
  r.expect_kind("controlnet");
  const auto meta = r.json("meta");
  const auto recorded = meta.at("base_hash").get<std::string>();
  require(recorded == base_hash, ErrorKind::kHashMismatch,
          "adapter " + path.string() + " was trained on base " + recorded + ", got " + base_hash);
  require(meta.at("architecture") == base->config().to_json(), ErrorKind::kConfig,
          "adapter architecture differs from the base estimator");
  ControlAdapter adapter(std::move(base));
  r.module("adapter", *adapter);
  adapter->eval();
  return adapter;
}

}  // namespace meddiff::controlnet
