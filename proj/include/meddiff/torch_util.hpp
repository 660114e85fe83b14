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

#pragma once

#include <atomic>
#include <cstdint>
#include <string>

#include <torch/torch.h>

#include "meddiff/volume.hpp"

namespace meddiff {

// [1, 1, H, W, D] float tensor sharing no storage with the volume.
torch::Tensor to_tensor(const Volume& vol);
// Accepts [H,W,D], [1,H,W,D] or [1,1,H,W,D]; metadata copied from `like`.
Volume to_volume(const torch::Tensor& t, const Volume& like);
Volume to_volume(const torch::Tensor& t, Spacing3 spacing = {}, std::string class_tag = {});

// [B, C, H, W, D] -> [B*N, C, ph, pw, pd], patches row-major over the grid
// inside each batch element.
torch::Tensor patchify(const torch::Tensor& x, const Extent3& patch);
// Inverse of patchify for a batch of `batch` volumes with the given grid.
torch::Tensor depatchify(const torch::Tensor& patches, std::int64_t batch, const Extent3& grid);

Extent3 spatial_extent(const torch::Tensor& x);

// Seeded random stream with serializable state. All training randomness goes
// through one of these so a checkpoint can restore it exactly.
class Rng {
 public:
  explicit Rng(std::uint64_t seed);

  std::int64_t uniform_int(std::int64_t n);
  double uniform();
  torch::Tensor randint(std::int64_t high, at::IntArrayRef shape);
  torch::Tensor normal(at::IntArrayRef shape, torch::Dtype dtype = torch::kFloat);
  torch::Tensor normal_like(const torch::Tensor& t);

  torch::Tensor state() const;
  void set_state(const torch::Tensor& state);
  at::Generator& generator() { return gen_; }

 private:
  at::Generator gen_;
};

std::string hash_parameters(const torch::nn::Module& module);
std::string hash_tensors(const std::vector<std::pair<std::string, torch::Tensor>>& named);

bool all_finite(const torch::Tensor& t);
void set_requires_grad(torch::nn::Module& module, bool flag);
void copy_parameters(const torch::nn::Module& from, torch::nn::Module& to);
std::int64_t count_parameters(const torch::nn::Module& module, bool trainable_only = false);

// CPU allocator that counts live bytes and the high-water mark. Installed
// process-wide on first use; tensors allocated earlier are not counted.
class MemoryTracker {
 public:
  static MemoryTracker& install();

  void reset_peak();
  std::int64_t current_bytes() const { return current_.load(); }
  std::int64_t peak_bytes() const { return peak_.load(); }

  void on_alloc(std::int64_t bytes);
  void on_free(std::int64_t bytes);

 private:
  MemoryTracker() = default;
  std::atomic<std::int64_t> current_{0};
  std::atomic<std::int64_t> peak_{0};
};

}  // namespace meddiff
