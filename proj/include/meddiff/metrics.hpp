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

// Reconstruction, distribution and artifact metrics for volumes.

#pragma once

#include <cstdint>
#include <limits>
#include <optional>
#include <string>
#include <vector>

#include <torch/torch.h>

#include "meddiff/volume.hpp"

namespace meddiff::metrics {

inline constexpr double kPsnrIdentical = std::numeric_limits<double>::infinity();

double mse(const Volume& a, const Volume& b);
// 10 log10(range^2 / mse); +inf when the volumes are identical.
double psnr(const Volume& a, const Volume& b, double data_range = 2.0);

struct SsimOptions {
  std::int64_t window = 11;
  double sigma = 1.5;
  double k1 = 0.01;
  double k2 = 0.03;
  double data_range = 2.0;
};

// Mean SSIM over all valid window positions (no padding).
double ssim(const Volume& a, const Volume& b, const SsimOptions& opts = {});

// Number of dyadic scales usable for an extent (window must fit), capped at 5.
std::int64_t ms_ssim_scales(const Extent3& extent, std::int64_t window = 11);
double ms_ssim(const Volume& a, const Volume& b, const SsimOptions& opts = {});

// Mean pairwise MS-SSIM; exhaustive when the pair count is at most
// `max_pairs`, otherwise a seeded subsample without replacement.
double diversity_msssim(const std::vector<Volume>& samples, std::int64_t max_pairs = 500,
                        std::uint64_t seed = 0, const SsimOptions& opts = {});

struct FeatureSet {
  std::string extractor_hash;
  std::vector<std::vector<double>> rows;

  std::int64_t size() const { return static_cast<std::int64_t>(rows.size()); }
  std::int64_t dim() const { return rows.empty() ? 0 : static_cast<std::int64_t>(rows.front().size()); }
};

struct MmdResult {
  double value = 0.0;  // biased MMD^2
  double gamma = 0.0;  // kernel exp(-|x-y|^2 / (2 gamma))
};

// Biased MMD^2 with an RBF kernel. Without an explicit gamma the bandwidth is
// the median pairwise distance over the pooled set (gamma = median^2).
MmdResult mmd(const FeatureSet& a, const FeatureSet& b, std::optional<double> gamma = std::nullopt);

// |mu_a - mu_b|^2 + Tr(Sa + Sb - 2 (Sa Sb)^1/2) with eps*I added to both
// covariances. eps = 0 with a singular covariance throws.
double frechet_distance(const FeatureSet& a, const FeatureSet& b, double eps = 1e-6);

// Mean |finite difference| across patch-boundary voxel pairs minus the same
// statistic over interior pairs, along all three axes.
double seam_discontinuity(const Volume& vol, const PatchLayout& layout);

struct CodebookStats {
  std::int64_t codebook_size = 0;
  std::int64_t used = 0;
  double dead_fraction = 0.0;
  double perplexity = 0.0;
};

CodebookStats codebook_stats(const torch::Tensor& indices, std::int64_t codebook_size);

// Fixed-seed untrained 3D conv net with global average pooling.
class VolumeFeatureExtractorImpl : public torch::nn::Module {
 public:
  explicit VolumeFeatureExtractorImpl(std::uint64_t seed = 1234, std::int64_t out_dim = 128);
  // [B, 1, H, W, D] -> [B, out_dim]
  torch::Tensor forward(const torch::Tensor& x);
  std::string identity() const;

 private:
  torch::nn::ModuleList layers_;
  std::int64_t out_dim_;
};
TORCH_MODULE(VolumeFeatureExtractor);

FeatureSet embed(VolumeFeatureExtractor& extractor, const std::vector<Volume>& volumes);

}  // namespace meddiff::metrics
