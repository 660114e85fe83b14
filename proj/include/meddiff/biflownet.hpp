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

// Dual-flow noise estimator. An intra-patch transformer processes every
// latent patch independently with shared weights; an inter-patch 3D U-Net
// processes the whole latent volume. Transformer features from the first two
// and last two blocks are projected onto the U-Net stages and added, and the
// two flows' outputs are summed.

#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>
#include <torch/torch.h>

#include "meddiff/diffusion.hpp"
#include "meddiff/volume.hpp"

namespace meddiff::biflownet {

struct BiFlowNetConfig {
  std::int64_t channels = 8;           // latent channels
  Extent3 latent_patch{16, 16, 16};    // latent extent of one autoencoder patch
  std::int64_t token = 2;              // token edge, latent voxels
  std::int64_t embed_dim = 128;
  std::int64_t depth = 4;
  std::int64_t heads = 4;
  std::int64_t mlp_ratio = 4;
  std::array<std::int64_t, 3> unet_widths{64, 128, 256};
  std::int64_t norm_groups = 8;
  std::int64_t cond_dim = 128;
  std::int64_t num_classes = 1;
  bool use_intra_flow = true;  // false: U-Net-only ablation

  // Indices of the DiT blocks whose outputs are fused: first two, last two.
  std::array<std::int64_t, 4> fusion_blocks() const {
    return {0, 1, depth - 2, depth - 1};
  }
  Extent3 token_grid() const {
    return {latent_patch.h / token, latent_patch.w / token, latent_patch.d / token};
  }
  void validate() const;
  nlohmann::json to_json() const;
  static BiFlowNetConfig from_json(const nlohmann::json& j);
};

torch::Tensor timestep_embedding(const torch::Tensor& t, std::int64_t dim);

class ConditionEmbeddingImpl : public torch::nn::Module {
 public:
  ConditionEmbeddingImpl(std::int64_t dim, std::int64_t num_classes);
  // t [B] int64, c [B] int64 -> [B, dim]
  torch::Tensor forward(const torch::Tensor& t, const torch::Tensor& c);

 private:
  std::int64_t dim_;
  std::int64_t num_classes_;
  torch::nn::Linear fc1_{nullptr}, fc2_{nullptr};
  torch::nn::Embedding classes_{nullptr};
};
TORCH_MODULE(ConditionEmbedding);

// Patch latents [N, C, p, p, p] -> token sequences [N, L, E] with learned
// within-patch positional embeddings.
class DitEmbedImpl : public torch::nn::Module {
 public:
  explicit DitEmbedImpl(const BiFlowNetConfig& cfg);
  torch::Tensor forward(const torch::Tensor& patches);

 private:
  BiFlowNetConfig cfg_;
  torch::nn::Conv3d proj_{nullptr};
  torch::Tensor pos_;
};
TORCH_MODULE(DitEmbed);

class DitBlockImpl : public torch::nn::Module {
 public:
  DitBlockImpl(std::int64_t dim, std::int64_t heads, std::int64_t mlp_ratio, std::int64_t cond_dim);
  // x [N, L, E], cond [N, cond_dim]
  torch::Tensor forward(const torch::Tensor& x, const torch::Tensor& cond);

 private:
  std::int64_t heads_;
  torch::nn::LayerNorm norm1_{nullptr}, norm2_{nullptr};
  torch::nn::Linear qkv_{nullptr}, attn_out_{nullptr};
  torch::nn::Linear mlp_in_{nullptr}, mlp_out_{nullptr};
  torch::nn::Linear ada_{nullptr};
};
TORCH_MODULE(DitBlock);

// adaLN modulation and linear unprojection from tokens back to patch latents.
class FinalLayerImpl : public torch::nn::Module {
 public:
  explicit FinalLayerImpl(const BiFlowNetConfig& cfg);
  torch::Tensor forward(const torch::Tensor& x, const torch::Tensor& cond);

 private:
  BiFlowNetConfig cfg_;
  torch::nn::LayerNorm norm_{nullptr};
  torch::nn::Linear ada_{nullptr}, proj_{nullptr};
};
TORCH_MODULE(FinalLayer);

// Residual block with additive conditioning.
class CondResBlockImpl : public torch::nn::Module {
 public:
  CondResBlockImpl(std::int64_t in, std::int64_t out, std::int64_t cond_dim, std::int64_t groups);
  torch::Tensor forward(const torch::Tensor& x, const torch::Tensor& cond);

 private:
  torch::nn::GroupNorm norm1_{nullptr}, norm2_{nullptr};
  torch::nn::Conv3d conv1_{nullptr}, conv2_{nullptr}, skip_{nullptr};
  torch::nn::Linear cond_proj_{nullptr};
};
TORCH_MODULE(CondResBlock);

struct EncoderFeatures {
  torch::Tensor skip0;  // full latent resolution, width 0
  torch::Tensor skip1;  // half resolution, width 1
  torch::Tensor mid;    // quarter resolution, width 2
};

class UNetEncoderImpl : public torch::nn::Module {
 public:
  explicit UNetEncoderImpl(const BiFlowNetConfig& cfg);
  // inject0/inject1 may be undefined (no fusion).
  EncoderFeatures forward(const torch::Tensor& z, const torch::Tensor& cond,
                          const torch::Tensor& inject0, const torch::Tensor& inject1);

 private:
  torch::nn::Conv3d conv_in_{nullptr}, down0_{nullptr}, down1_{nullptr};
  CondResBlock res0_{nullptr}, res1_{nullptr}, mid_{nullptr};
};
TORCH_MODULE(UNetEncoder);

class UNetDecoderImpl : public torch::nn::Module {
 public:
  explicit UNetDecoderImpl(const BiFlowNetConfig& cfg);
  torch::Tensor forward(const EncoderFeatures& enc, const torch::Tensor& cond,
                        const torch::Tensor& inject2, const torch::Tensor& inject3);

 private:
  torch::nn::Conv3d up1_{nullptr}, up0_{nullptr}, conv_out_{nullptr};
  CondResBlock res1_{nullptr}, res0_{nullptr};
  torch::nn::GroupNorm norm_out_{nullptr};
};
TORCH_MODULE(UNetDecoder);

// Additive residuals from a control adapter; any member may be undefined.
struct ControlResiduals {
  torch::Tensor skip0;
  torch::Tensor skip1;
  torch::Tensor mid;
  torch::Tensor dit_tap;  // [N, L, E], added to the last fused DiT tap
};

struct IntraOutput {
  std::vector<torch::Tensor> taps;  // [N, L, E] after each fusion block
  torch::Tensor output;             // [N, C, p, p, p]
};

class BiFlowNetImpl : public torch::nn::Module {
 public:
  explicit BiFlowNetImpl(BiFlowNetConfig cfg);

  const BiFlowNetConfig& config() const { return cfg_; }

  torch::Tensor condition(const torch::Tensor& t, const torch::Tensor& c);

  // Patch latents [N, C, p, p, p] with per-patch conditioning [N, cond_dim].
  IntraOutput intra_forward(const torch::Tensor& patches, const torch::Tensor& cond,
                            const torch::Tensor& last_tap_residual = {});
  // Whole latent volume; `injected` holds projected DiT features per fusion
  // site (undefined entries are skipped).
  torch::Tensor inter_forward(const torch::Tensor& z, const torch::Tensor& cond,
                              const std::array<torch::Tensor, 4>& injected,
                              const ControlResiduals* ctrl = nullptr);
  // Maps DiT tap `site` onto the U-Net stage it fuses with.
  torch::Tensor project_tap(std::size_t site, const torch::Tensor& tokens, std::int64_t batch,
                            const Extent3& patch_grid, const Extent3& target);

  torch::Tensor forward(const torch::Tensor& zt, const torch::Tensor& t, const torch::Tensor& c,
                        const ControlResiduals* ctrl = nullptr);

  Extent3 patch_grid(const torch::Tensor& z) const;

  ConditionEmbedding cond_embed{nullptr};
  DitEmbed dit_embed{nullptr};
  torch::nn::ModuleList blocks{nullptr};
  FinalLayer final_layer{nullptr};
  torch::nn::ModuleList tap_proj{nullptr};
  UNetEncoder unet_enc{nullptr};
  UNetDecoder unet_dec{nullptr};

 private:
  BiFlowNetConfig cfg_;
};
TORCH_MODULE(BiFlowNet);

torch::Tensor fuse(const torch::Tensor& dit, const torch::Tensor& unet);

// [B, C, H, W, D] latent -> [B*N, C, ph, pw, pd] row-major patches and back.
torch::Tensor patchify_latent(const torch::Tensor& z, const Extent3& latent_patch);
torch::Tensor depatchify_latent(const torch::Tensor& patches, std::int64_t batch,
                                const Extent3& grid);

// DiT tokens [B*N, L, E] -> [B, E, H/t, W/t, D/t] on the latent token grid.
torch::Tensor tokens_to_volume(const torch::Tensor& tokens, const BiFlowNetConfig& cfg,
                               std::int64_t batch, const Extent3& patch_grid);
// Nearest upsampling or average pooling onto an integer-ratio target extent.
torch::Tensor resample_to(const torch::Tensor& x, const Extent3& target);

diffusion::Estimator as_estimator(BiFlowNet& net);

struct TrainConfig {
  std::int64_t steps = 1000;
  std::int64_t batch_size = 1;
  double lr = 1e-4;
  double lr_power = 1.0;
  std::uint64_t seed = 0;
  std::int64_t log_every = 0;
  std::filesystem::path loss_log;

  nlohmann::json to_json() const;
  static TrainConfig from_json(const nlohmann::json& j);
};

// Trains on standardized latents [N, C, ...] with class ids [N]; returns the
// per-step losses.
std::vector<double> train(BiFlowNet& net, const torch::Tensor& latents, const torch::Tensor& classes,
                          const diffusion::NoiseSchedule& sched, const TrainConfig& cfg,
                          const std::function<void(std::int64_t, double)>& on_step = {});

// Everything needed to sample from a trained estimator.
struct EstimatorBundle {
  BiFlowNet net{nullptr};
  diffusion::NoiseSchedule schedule;
  double cosine_offset = 0.008;
  diffusion::LatentStats stats;
  std::vector<std::string> class_names;
  Extent3 latent_extent;
  Extent3 volume_extent;  // image-space extent samples are decoded to
  std::string pvae_hash;

  std::int64_t class_index(const std::string& name) const;
};

void save_bundle(const EstimatorBundle& bundle, const std::filesystem::path& path);
EstimatorBundle load_bundle(const std::filesystem::path& path);

}  // namespace meddiff::biflownet
