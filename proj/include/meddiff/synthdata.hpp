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

// Procedural phantoms and k-space undersampling conditions.

#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "meddiff/volume.hpp"

namespace meddiff::synthdata {

const std::vector<std::string>& families();
bool is_family(const std::string& name);

struct PhantomSpec {
  std::string family = "ellipsoid-organ";
  Extent3 extent{32, 32, 32};
  std::int64_t min_primitives = 2;
  std::int64_t max_primitives = 5;
  double min_intensity = 0.3;  // fraction of the [-1, 1] span above background
  double max_intensity = 1.0;
  std::uint64_t seed = 0;

  void validate() const;
};

struct Phantom {
  Volume image;   // values in [-1, 1], background -1
  Volume labels;  // 0 background, k for the k-th primitive
};

Phantom gen_phantom(const PhantomSpec& spec);

// Axis-aligned ellipsoid in voxel coordinates (row i, column j, slice k).
struct Ellipsoid {
  double ci = 0, cj = 0, ck = 0;
  double ri = 1, rj = 1, rk = 1;
  double intensity = 1.0;
};

// Renders explicit ellipsoids with soft edges; labels mark voxels whose
// centre lies inside the ellipsoid.
Phantom render_ellipsoids(const Extent3& extent, const std::vector<Ellipsoid>& shapes,
                          const std::string& class_tag);

enum class MaskKind { kGaussian1d, kPoisson };

std::string to_string(MaskKind kind);
MaskKind parse_mask_kind(const std::string& name);

// Binary sampling pattern over the centred (fft-shifted) frequency grid.
struct UndersamplingMask {
  MaskKind kind = MaskKind::kGaussian1d;
  double acceleration = 8.0;
  std::uint64_t seed = 0;
  Extent3 extent;
  std::int64_t axis = 1;  // gaussian-1d: phase-encode axis
  std::vector<std::uint8_t> keep;  // C-order over extent, centre at n/2

  double retained_fraction() const;
  nlohmann::json descriptor() const;
};

UndersamplingMask make_mask(MaskKind kind, const Extent3& extent, double acceleration,
                            std::uint64_t seed, std::int64_t axis = 1);
UndersamplingMask all_ones_mask(const Extent3& extent);
UndersamplingMask all_zeros_mask(const Extent3& extent);

// Zero-filled reconstruction: real part of ifft(mask * fft(vol)).
Volume kspace_undersample(const Volume& vol, const UndersamplingMask& mask);

struct PairRecord {
  std::string target;
  std::string condition;
  std::string mask_kind;
  std::uint64_t mask_seed = 0;
  double acceleration = 8.0;
  std::string class_tag;

  nlohmann::json to_json() const;
  static PairRecord from_json(const nlohmann::json& j);
};

struct PairOptions {
  MaskKind kind = MaskKind::kGaussian1d;
  double acceleration = 8.0;
  std::uint64_t master_seed = 0;
};

// Writes one condition volume per readable target into `out_dir` and a
// `pairs.jsonl` manifest. Unreadable targets are skipped with a warning;
// throws if every target was skipped.
std::vector<PairRecord> build_pairs(const std::vector<std::filesystem::path>& targets,
                                    const PairOptions& opts, const std::filesystem::path& out_dir);

std::vector<PairRecord> read_pairs(const std::filesystem::path& manifest);

struct DatasetOptions {
  std::vector<std::string> families{"ellipsoid-organ"};
  std::int64_t count = 8;
  Extent3 extent{32, 32, 32};
  std::uint64_t seed = 0;
  bool write_labels = true;
};

struct DatasetItem {
  std::string volume;
  std::string labels;
  std::string class_tag;
  std::uint64_t seed = 0;
};

// Generates `count` phantoms cycling through the families, writing
// volume_XXXX.raw (+ labels) and `manifest.jsonl` under `out_dir`. With
// `failures` set, an item that fails is recorded there and skipped instead of
// aborting the whole run.
std::vector<DatasetItem> write_dataset(const DatasetOptions& opts, const std::filesystem::path& out_dir,
                                       std::vector<std::string>* failures = nullptr);
std::vector<DatasetItem> read_dataset(const std::filesystem::path& manifest);

}  // namespace meddiff::synthdata
