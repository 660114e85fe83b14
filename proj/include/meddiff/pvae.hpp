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

// Patch-Volume autoencoder: a patch encoder and vector quantizer trained on
// small patches, and a joint decoder fine-tuned on whole latent volumes with
// the encoder and codebook frozen.

#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <vector>

#include <nlohmann/json.hpp>
#include <torch/torch.h>

#include "meddiff/torch_util.hpp"
#include "meddiff/volume.hpp"

namespace meddiff::pvae {

// Spatial reduction per axis between a patch and its latent grid.
inline constexpr std::int64_t kReduction = 4;

struct PvaeConfig {
  Extent3 patch_shape{64, 64, 64};
  std::array<std::int64_t, 3> widths{32, 64, 128};
  std::int64_t codebook_size = 8192;
  std::int64_t code_dim = 8;
  std::int64_t norm_groups = 8;
  double lambda_adv = 2.0;
  double lambda_tp = 4.0;
  std::int64_t disc_warmup = 500;
  std::int64_t disc_channels = 16;
  std::int64_t feature_channels = 8;
  std::uint64_t feature_seed = 0x5eed;

  Extent3 latent_patch_shape() const {
    return {patch_shape.h / kReduction, patch_shape.w / kReduction, patch_shape.d / kReduction};
  }
  void validate() const;
  nlohmann::json to_json() const;
  static PvaeConfig from_json(const nlohmann::json& j);
};

class ResBlock3dImpl : public torch::nn::Module {
 public:
  ResBlock3dImpl(std::int64_t in, std::int64_t out, std::int64_t groups);
  torch::Tensor forward(const torch::Tensor& x);

 private:
  torch::nn::GroupNorm norm1_{nullptr}, norm2_{nullptr};
  torch::nn::Conv3d conv1_{nullptr}, conv2_{nullptr};
  torch::nn::Conv3d skip_{nullptr};
};
TORCH_MODULE(ResBlock3d);

// Three resolution levels, two stride-2 downsamplings, 1x1x1 projection to
// the code dimension.
class PatchEncoderImpl : public torch::nn::Module {
 public:
  explicit PatchEncoderImpl(const PvaeConfig& cfg);
  torch::Tensor forward(const torch::Tensor& x);

 private:
  torch::nn::Conv3d conv_in_{nullptr};
  ResBlock3d res0_{nullptr}, res1_{nullptr}, res2_{nullptr};
  torch::nn::Conv3d down0_{nullptr}, down1_{nullptr};
  torch::nn::GroupNorm norm_out_{nullptr};
  torch::nn::Conv3d conv_out_{nullptr};
};
TORCH_MODULE(PatchEncoder);

// Mirror of the encoder. Fully convolutional, so the same weights decode a
// single patch latent or a whole latent volume.
class DecoderImpl : public torch::nn::Module {
 public:
  explicit DecoderImpl(const PvaeConfig& cfg);
  torch::Tensor forward(const torch::Tensor& z);

 private:
  torch::nn::Conv3d conv_in_{nullptr};
  ResBlock3d res2_{nullptr}, res1_{nullptr}, res0_{nullptr};
  torch::nn::Conv3d up1_{nullptr}, up0_{nullptr};
  torch::nn::GroupNorm norm_out_{nullptr};
  torch::nn::Conv3d conv_out_{nullptr};
};
TORCH_MODULE(Decoder);

class CodebookImpl : public torch::nn::Module {
 public:
  CodebookImpl(std::int64_t size, std::int64_t dim);

  std::int64_t size() const { return codes.size(0); }
  std::int64_t dim() const { return codes.size(1); }

  void record_usage(const torch::Tensor& indices);
  // Re-seeds codes unused since the last call from rows of `candidates` [P, C].
  // Returns the number of codes re-seeded.
  std::int64_t revive_dead_codes(const torch::Tensor& candidates, Rng& rng);

  torch::Tensor codes;         // [K, C] parameter
  torch::Tensor usage_counts;  // [K] int64, cumulative
  torch::Tensor window_usage;  // [K] int64, since last revival
};
TORCH_MODULE(Codebook);

struct QuantizeResult {
  torch::Tensor indices;         // [B, h, w, d] int64
  torch::Tensor quantized;       // [B, C, h, w, d], gradient flows to the codebook only
  torch::Tensor straight_through;  // same values; gradient passes to the encoder output
};

/// Nearest-code lookup. Distances are evaluated directly as squared
/// differences in double precision; ties resolve to the lowest index.
torch::Tensor nearest_code_indices(const torch::Tensor& vectors, const torch::Tensor& codes);
QuantizeResult quantize(const torch::Tensor& z, const Codebook& codebook);
// Identity in the forward pass; copies the incoming gradient to `source`.
torch::Tensor straight_through(const torch::Tensor& source, const torch::Tensor& value);

struct VqTerms {
  torch::Tensor reconstruction;
  torch::Tensor codebook;
  torch::Tensor commitment;
  torch::Tensor total;
};

// Sum of the three Euclidean norms, averaged over the batch; the codebook term
// sees a detached encoder output and the commitment term a detached code.
VqTerms vq_loss(const torch::Tensor& x, const torch::Tensor& x_rec, const torch::Tensor& z,
                const torch::Tensor& z_q);

// Fixed, untrained 2D conv stack standing in for a pretrained perceptual
// network. Weights are a pure function of (seed, width).
class FeatureExtractorImpl : public torch::nn::Module {
 public:
  FeatureExtractorImpl(std::uint64_t seed, std::int64_t width);
  std::vector<torch::Tensor> forward(const torch::Tensor& planes);
  std::string identity() const;

 private:
  torch::nn::ModuleList layers_;
};
TORCH_MODULE(FeatureExtractor);

// Per-sample Euclidean distance between stacked feature maps, [B].
torch::Tensor feature_distance(FeatureExtractor& phi, const torch::Tensor& a,
                               const torch::Tensor& b);

// Orthogonal planes of a [B, 1, H, W, D] batch at a shared index: [axial, coronal, sagittal].
std::array<torch::Tensor, 3> triplanes(const torch::Tensor& x, const Index3& index);

torch::Tensor triplane_loss(const torch::Tensor& x, const torch::Tensor& x_rec,
                            FeatureExtractor& phi, const Index3& index);

class SliceDiscriminatorImpl : public torch::nn::Module {
 public:
  SliceDiscriminatorImpl(std::int64_t channels);
  // Per-location real probabilities for a batch of 2D slices.
  torch::Tensor forward(const torch::Tensor& slices);

 private:
  torch::nn::Conv2d conv0_{nullptr}, conv1_{nullptr}, conv2_{nullptr};
};
TORCH_MODULE(SliceDiscriminator);

inline constexpr double kProbEpsilon = 1e-6;

struct AdversarialTerms {
  torch::Tensor generator;      // -log D(x_rec)
  torch::Tensor discriminator;  // log D(x) + log(1 - D(x_rec)), maximized by D
};

AdversarialTerms adversarial_terms(const torch::Tensor& p_real, const torch::Tensor& p_fake);

using SliceCritic = std::function<torch::Tensor(const torch::Tensor&)>;
AdversarialTerms adv_loss(const SliceCritic& critic, const torch::Tensor& x,
                          const torch::Tensor& x_rec, const Index3& index);

struct LossWeights {
  double adv = 2.0;
  double tp = 4.0;
};

torch::Tensor total_ae_loss(const torch::Tensor& vq, const torch::Tensor& adv,
                            const torch::Tensor& tp, const LossWeights& weights);

struct LatentVolume {
  torch::Tensor features;  // [1, C, Hl, Wl, Dl]
  torch::Tensor indices;   // [1, Hl, Wl, Dl]
  PatchLayout layout;
  Spacing3 spacing;
  std::string class_tag;
  ValueRange value_range;
};

enum class Stage : std::int64_t { kUntrained = 0, kPatch = 1, kVolume = 2 };

class PvaeModelImpl : public torch::nn::Module {
 public:
  explicit PvaeModelImpl(PvaeConfig cfg);

  const PvaeConfig& config() const { return cfg_; }
  Stage stage() const { return stage_; }
  void set_stage(Stage s) { stage_ = s; }

  torch::Tensor encode_patch(const torch::Tensor& patches);
  QuantizeResult quantize(const torch::Tensor& z) const;
  torch::Tensor decode_patch(const torch::Tensor& latent);
  torch::Tensor decode_joint(const torch::Tensor& latent);

  LatentVolume encode_volume_patchwise(const Volume& vol);
  // Patch-wise encoding of already padded [B,1,H,W,D] volumes, returned in
  // volume layout.
  struct VolumeEncoding {
    torch::Tensor z;
    QuantizeResult q;
  };
  VolumeEncoding encode_padded(const torch::Tensor& padded);
  Volume decode_volume_joint(const LatentVolume& latent);
  Volume decode_volume_patchwise(const LatentVolume& latent);

  std::string encoder_hash() const;  // encoder + codebook

  PatchEncoder encoder{nullptr};
  Codebook codebook{nullptr};
  Decoder patch_decoder{nullptr};
  Decoder joint_decoder{nullptr};
  SliceDiscriminator discriminator{nullptr};

 private:
  void check_latent(const torch::Tensor& latent, const Extent3& expected) const;

  PvaeConfig cfg_;
  Stage stage_ = Stage::kUntrained;
};
TORCH_MODULE(PvaeModel);

struct TrainConfig {
  std::int64_t steps = 1000;
  std::int64_t batch_size = 4;
  double lr = 3e-4;
  double disc_lr = 3e-4;
  std::uint64_t seed = 0;
  std::int64_t revive_interval = 100;
  std::int64_t checkpoint_every = 0;
  std::filesystem::path checkpoint_path;
  std::filesystem::path loss_log;
  // Stage 2 only: keep the encoder in the autograd graph (for memory comparison).
  bool naive_full_graph = false;

  nlohmann::json to_json() const;
  static TrainConfig from_json(const nlohmann::json& j);
};

struct StepLosses {
  std::int64_t step = 0;
  double total = 0;
  double vq = 0;
  double adv = 0;
  double tp = 0;
  double disc = 0;
};

// One trainer per stage. Holds optimizers and the random stream so that a
// checkpoint captures everything the next step depends on.
class Trainer {
 public:
  Trainer(PvaeModel model, Stage stage, TrainConfig cfg, std::vector<Volume> dataset);

  StepLosses step();
  std::vector<StepLosses> run(std::int64_t steps,
                              const std::function<void(const StepLosses&)>& on_step = {});

  void save_checkpoint(const std::filesystem::path& path) const;
  // Restores model, optimizers, step counter and random stream.
  void load_checkpoint(const std::filesystem::path& path);

  PvaeModel model() const { return model_; }
  std::int64_t step_count() const { return step_; }

 private:
  StepLosses step_patch();
  StepLosses step_volume();
  torch::Tensor sample_patches();
  void discriminator_step(const torch::Tensor& x, const torch::Tensor& x_rec, const Index3& idx,
                          StepLosses& out);
  void append_log(const StepLosses& s) const;

  PvaeModel model_;
  Stage stage_;
  TrainConfig cfg_;
  std::vector<torch::Tensor> padded_;  // [1,1,H',W',D'] per volume
  std::vector<PatchLayout> layouts_;
  FeatureExtractor phi_{nullptr};
  std::unique_ptr<torch::optim::Adam> gen_opt_;
  std::unique_ptr<torch::optim::Adam> disc_opt_;
  Rng rng_;
  std::int64_t step_ = 0;
};

PvaeModel train_stage1(const std::vector<Volume>& dataset, const PvaeConfig& model_cfg,
                       const TrainConfig& cfg);
PvaeModel train_stage2(PvaeModel stage1, const std::vector<Volume>& dataset,
                       const TrainConfig& cfg);

// Clones the patch decoder into the joint decoder and freezes encoder and codebook.
void prepare_stage2(PvaeModel& model);

void save_model(const PvaeModel& model, const std::filesystem::path& path);
PvaeModel load_model(const std::filesystem::path& path);

inline constexpr const char* kLossLogHeader = "step,loss_total,loss_vq,loss_adv,loss_tp";

}  // namespace meddiff::pvae
