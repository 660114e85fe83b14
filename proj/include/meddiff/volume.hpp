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

#include <cstdint>
#include <filesystem>
#include <random>
#include <span>
#include <string>
#include <vector>

namespace meddiff {

struct Extent3 {
  std::int64_t h = 1;
  std::int64_t w = 1;
  std::int64_t d = 1;

  std::int64_t count() const { return h * w * d; }
  bool operator==(const Extent3&) const = default;
};

std::string to_string(const Extent3& e);

struct Spacing3 {
  double x = 1.0;
  double y = 1.0;
  double z = 1.0;

  bool operator==(const Spacing3&) const = default;
};

struct Index3 {
  std::int64_t i = 0;
  std::int64_t j = 0;
  std::int64_t k = 0;

  bool operator==(const Index3&) const = default;
};

// Source intensity interval that normalization mapped onto [-1, 1].
struct ValueRange {
  double min = -1.0;
  double max = 1.0;

  bool operator==(const ValueRange&) const = default;
};

// Dense scalar grid. In memory the last axis (D) is fastest, so the element
// at (i, j, k) lives at (i * W + j) * D + k; the on-disk payload is H-fastest.
struct Volume {
  Extent3 shape;
  Spacing3 spacing;
  std::string class_tag;
  ValueRange value_range;
  std::vector<float> data;

  Volume() = default;
  explicit Volume(Extent3 extent, Spacing3 spacing_mm = {}, std::string tag = {});
  Volume(Extent3 extent, std::vector<float> values, Spacing3 spacing_mm = {},
         std::string tag = {});

  std::int64_t offset(std::int64_t i, std::int64_t j, std::int64_t k) const {
    return (i * shape.w + j) * shape.d + k;
  }
  float& at(std::int64_t i, std::int64_t j, std::int64_t k) { return data[offset(i, j, k)]; }
  float at(std::int64_t i, std::int64_t j, std::int64_t k) const {
    return data[offset(i, j, k)];
  }

  // Throws on non-positive extents/spacing or a data size that disagrees with shape.
  void validate() const;
};

/// Affine map of [min, max] onto [-1, 1]; records the source range for inversion.
/// Rejects constant and non-finite volumes.
Volume normalize_minmax(const Volume& vol);
Volume denormalize(const Volume& vol);

struct PatchLayout {
  Extent3 patch_shape;
  Extent3 grid_counts;
  Extent3 original_extent;

  std::int64_t patch_count() const { return grid_counts.count(); }
  Extent3 padded_extent() const {
    return {patch_shape.h * grid_counts.h, patch_shape.w * grid_counts.w,
            patch_shape.d * grid_counts.d};
  }
  // Row-major over (nH, nW, nD).
  std::int64_t patch_index(std::int64_t ph, std::int64_t pw, std::int64_t pd) const {
    return (ph * grid_counts.w + pw) * grid_counts.d + pd;
  }
  Index3 patch_origin(std::int64_t index) const;

  bool operator==(const PatchLayout&) const = default;
};

PatchLayout make_layout(const Extent3& volume_extent, const Extent3& patch_shape);

// Mirror padding without edge repetition, extended periodically for wide pads.
Volume pad_reflect(const Volume& vol, const Extent3& target);
Volume crop(const Volume& vol, const Extent3& extent);

struct PatchSet {
  std::vector<Volume> patches;
  PatchLayout layout;
};

PatchSet partition(const Volume& vol, const Extent3& patch_shape);
// Reassembles onto the padded grid and crops back to layout.original_extent.
Volume reassemble(std::span<const Volume> patches, const PatchLayout& layout);
Volume reassemble_padded(std::span<const Volume> patches, const PatchLayout& layout);

struct Plane {
  std::int64_t rows = 0;
  std::int64_t cols = 0;
  std::vector<float> values;

  float at(std::int64_t r, std::int64_t c) const { return values[r * cols + c]; }
};

// axial: k fixed (H x W); coronal: j fixed (H x D); sagittal: i fixed (W x D).
struct TriPlaneSlices {
  Plane axial;
  Plane coronal;
  Plane sagittal;
};

TriPlaneSlices extract_triplanes(const Volume& vol, const Index3& index);
Index3 random_index(const Extent3& extent, std::mt19937_64& rng);

// Raw little-endian float32 payload (H fastest) plus a `.json` sidecar with
// shape, spacing, class_tag and value_range.
void save_volume(const Volume& vol, const std::filesystem::path& raw_path);
Volume load_volume(const std::filesystem::path& raw_path);
std::filesystem::path sidecar_path(const std::filesystem::path& raw_path);

}  // namespace meddiff
