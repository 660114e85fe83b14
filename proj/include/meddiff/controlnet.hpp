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

// Conditional fine-tuning adapter: a trainable copy of the estimator's
// encoder half (both flows) feeding the frozen base through zero-initialized
// connectors.

#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <string>
#include <vector>

#include <torch/torch.h>

#include "meddiff/biflownet.hpp"
#include "meddiff/diffusion.hpp"
#include "meddiff/pvae.hpp"
#include "meddiff/volume.hpp"

namespace meddiff::controlnet {

// Encodes a condition volume with the frozen autoencoder and standardizes it
// with the diffusion statistics. Returns [1, C, h, w, d].
torch::Tensor encode_condition(const Volume& cond, pvae::PvaeModel& model,
                               const diffusion::LatentStats& stats,
                               const Extent3* expected_shape = nullptr);

class ControlAdapterImpl : public torch::nn::Module {
 public:
  // Clones the encoder half of `base` and freezes `base`.
  explicit ControlAdapterImpl(biflownet::BiFlowNet base);

  biflownet::BiFlowNet base() const { return base_; }

  biflownet::ControlResiduals residuals(const torch::Tensor& zt, const torch::Tensor& cond,
                                        const torch::Tensor& c_task);
  // eps_hat of the base with adapter residuals injected.
  torch::Tensor forward(const torch::Tensor& zt, const torch::Tensor& t, const torch::Tensor& c,
                        const torch::Tensor& c_task);

  // Trainable parameters: clone + connectors (the base is not registered).
  std::vector<torch::Tensor> connector_parameters() const;

  torch::nn::Conv3d hint{nullptr};
  biflownet::DitEmbed dit_embed{nullptr};
  torch::nn::ModuleList blocks{nullptr};
  torch::nn::ModuleList tap_proj{nullptr};
  biflownet::UNetEncoder unet_enc{nullptr};
  torch::nn::Conv3d zero_skip0{nullptr}, zero_skip1{nullptr}, zero_mid{nullptr};
  torch::nn::Linear zero_tap{nullptr};

 private:
  biflownet::BiFlowNet base_;
};
TORCH_MODULE(ControlAdapter);

ControlAdapter init_adapter(biflownet::BiFlowNet base);

// Estimator closure with a fixed task condition (broadcast over the batch).
diffusion::Estimator as_estimator(ControlAdapter& adapter, const torch::Tensor& c_task);

struct FinetuneConfig {
  std::int64_t steps = 500;
  std::int64_t batch_size = 1;
  double lr = 1e-4;
  double lr_power = 1.0;
  std::uint64_t seed = 0;
  std::filesystem::path loss_log;

  nlohmann::json to_json() const;
  static FinetuneConfig from_json(const nlohmann::json& j);
};

// targets/conditions: standardized latents [N, C, ...]; classes [N].
std::vector<double> finetune(ControlAdapter& adapter, const torch::Tensor& targets,
                             const torch::Tensor& conditions, const torch::Tensor& classes,
                             const diffusion::NoiseSchedule& sched, const FinetuneConfig& cfg,
                             const std::function<void(std::int64_t, double)>& on_step = {});

// Ancestral sampling with the adapter, then joint decode to image space.
Volume conditional_sample(ControlAdapter& adapter, const Volume& cond_vol, std::int64_t class_id,
                          pvae::PvaeModel& model, const diffusion::LatentStats& stats,
                          const diffusion::NoiseSchedule& sched, Rng& rng, double clip_denoised = 0.0);

// Decodes a standardized latent sample back to a volume shaped like `like`.
Volume decode_sample(const torch::Tensor& z_std, pvae::PvaeModel& model,
                     const diffusion::LatentStats& stats, const Volume& like);

// Adapter-only checkpoint; the base estimator is referenced by content hash.
void save_adapter(const ControlAdapter& adapter, const std::string& base_hash,
                  const std::filesystem::path& path);
// Rebuilds the adapter on `base`; throws kHashMismatch when `base_hash`
// differs from the recorded one.
ControlAdapter load_adapter(biflownet::BiFlowNet base, const std::string& base_hash,
                            const std::filesystem::path& path);

}  // namespace meddiff::controlnet
