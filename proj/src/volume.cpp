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

#include "meddiff/volume.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <limits>

#include <nlohmann/json.hpp>

#include "meddiff/error.hpp"

namespace meddiff {

namespace {

using nlohmann::json;

std::int64_t reflect_index(std::int64_t i, std::int64_t n) {
  if (n == 1) return 0;
  const std::int64_t period = 2 * (n - 1);
  std::int64_t m = i % period;
  if (m < 0) m += period;
  return m < n ? m : period - m;
}

std::uint32_t byteswap32(std::uint32_t v) {
  return ((v & 0xFF) << 24) | ((v & 0xFF00) << 8) | ((v >> 8) & 0xFF00) | (v >> 24);
}

const json& require_key(const json& doc, const char* key, const std::filesystem::path& path) {
  if (!doc.contains(key)) {
    fail(ErrorKind::kSchema,
         "sidecar " + path.string() + " is missing required field '" + key + "'");
  }
  return doc.at(key);
}

}  // namespace

std::string to_string(const Extent3& e) {
  return std::to_string(e.h) + "x" + std::to_string(e.w) + "x" + std::to_string(e.d);
}

Volume::Volume(Extent3 extent, Spacing3 spacing_mm, std::string tag)
    : shape(extent), spacing(spacing_mm), class_tag(std::move(tag)) {
  require(extent.h >= 1 && extent.w >= 1 && extent.d >= 1, ErrorKind::kInvalidArgument,
          "volume extent must be positive, got " + to_string(extent));
  data.assign(static_cast<std::size_t>(extent.count()), 0.0f);
}

Volume::Volume(Extent3 extent, std::vector<float> values, Spacing3 spacing_mm, std::string tag)
    : shape(extent), spacing(spacing_mm), class_tag(std::move(tag)), data(std::move(values)) {
  validate();
}

void Volume::validate() const {
  require(shape.h >= 1 && shape.w >= 1 && shape.d >= 1, ErrorKind::kInvalidArgument,
          "volume extent must be positive, got " + to_string(shape));
  require(spacing.x > 0 && spacing.y > 0 && spacing.z > 0, ErrorKind::kInvalidArgument,
          "voxel spacing must be positive");
  require(static_cast<std::int64_t>(data.size()) == shape.count(), ErrorKind::kShapeMismatch,
          "volume holds " + std::to_string(data.size()) + " values but shape " +
              to_string(shape) + " needs " + std::to_string(shape.count()));
}

Volume normalize_minmax(const Volume& vol) {
  vol.validate();
  double lo = std::numeric_limits<double>::infinity();
  double hi = -lo;
  for (float v : vol.data) {
    require(std::isfinite(v), ErrorKind::kNonFinite, "cannot normalize a non-finite volume");
    lo = std::min(lo, static_cast<double>(v));
    hi = std::max(hi, static_cast<double>(v));
  }
  require(hi > lo, ErrorKind::kDegenerateInput,
          "cannot normalize a constant volume (all voxels equal " + std::to_string(lo) + ")");
  Volume out = vol;
  const double scale = 2.0 / (hi - lo);
  for (float& v : out.data) {
    const double mapped = (static_cast<double>(v) - lo) * scale - 1.0;
    v = static_cast<float>(std::clamp(mapped, -1.0, 1.0));
  }
  out.value_range = {lo, hi};
  return out;
}

Volume denormalize(const Volume& vol) {
  Volume out = vol;
  const double half = 0.5 * (vol.value_range.max - vol.value_range.min);
  for (float& v : out.data) {
    v = static_cast<float>((static_cast<double>(v) + 1.0) * half + vol.value_range.min);
  }
  out.value_range = {-1.0, 1.0};
  return out;
}

Index3 PatchLayout::patch_origin(std::int64_t index) const {
  const std::int64_t pd = index % grid_counts.d;
  const std::int64_t pw = (index / grid_counts.d) % grid_counts.w;
  const std::int64_t ph = index / (grid_counts.d * grid_counts.w);
  return {ph * patch_shape.h, pw * patch_shape.w, pd * patch_shape.d};
}

PatchLayout make_layout(const Extent3& volume_extent, const Extent3& patch_shape) {
  require(patch_shape.h >= 1 && patch_shape.w >= 1 && patch_shape.d >= 1,
          ErrorKind::kInvalidArgument, "patch shape must be positive");
  require(patch_shape.h <= volume_extent.h && patch_shape.w <= volume_extent.w &&
              patch_shape.d <= volume_extent.d,
          ErrorKind::kShapeMismatch,
          "patch " + to_string(patch_shape) + " is larger than volume " + to_string(volume_extent));
  auto ceil_div = [](std::int64_t a, std::int64_t b) { return (a + b - 1) / b; };
  PatchLayout layout;
  layout.patch_shape = patch_shape;
  layout.grid_counts = {ceil_div(volume_extent.h, patch_shape.h),
                        ceil_div(volume_extent.w, patch_shape.w),
                        ceil_div(volume_extent.d, patch_shape.d)};
  layout.original_extent = volume_extent;
  return layout;
}

Volume pad_reflect(const Volume& vol, const Extent3& target) {
  vol.validate();
  require(target.h >= vol.shape.h && target.w >= vol.shape.w && target.d >= vol.shape.d,
          ErrorKind::kInvalidArgument, "pad target smaller than volume");
  if (target == vol.shape) return vol;
  Volume out(target, vol.spacing, vol.class_tag);
  out.value_range = vol.value_range;
  for (std::int64_t i = 0; i < target.h; ++i) {
    const std::int64_t si = reflect_index(i, vol.shape.h);
    for (std::int64_t j = 0; j < target.w; ++j) {
      const std::int64_t sj = reflect_index(j, vol.shape.w);
      for (std::int64_t k = 0; k < target.d; ++k) {
        out.at(i, j, k) = vol.at(si, sj, reflect_index(k, vol.shape.d));
      }
    }
  }
  return out;
}

Volume crop(const Volume& vol, const Extent3& extent) {
  require(extent.h <= vol.shape.h && extent.w <= vol.shape.w && extent.d <= vol.shape.d,
          ErrorKind::kInvalidArgument, "crop extent exceeds volume");
  if (extent == vol.shape) return vol;
  Volume out(extent, vol.spacing, vol.class_tag);
  out.value_range = vol.value_range;
  for (std::int64_t i = 0; i < extent.h; ++i) {
    for (std::int64_t j = 0; j < extent.w; ++j) {
      std::memcpy(&out.at(i, j, 0), vol.data.data() + vol.offset(i, j, 0), sizeof(float) * extent.d);
    }
  }
  return out;
}

PatchSet partition(const Volume& vol, const Extent3& patch_shape) {
  PatchSet set;
  set.layout = make_layout(vol.shape, patch_shape);
  const Volume padded = pad_reflect(vol, set.layout.padded_extent());
  const auto& p = patch_shape;
  set.patches.reserve(static_cast<std::size_t>(set.layout.patch_count()));
  for (std::int64_t n = 0; n < set.layout.patch_count(); ++n) {
    const Index3 o = set.layout.patch_origin(n);
    Volume patch(p, vol.spacing, vol.class_tag);
    patch.value_range = vol.value_range;
    for (std::int64_t i = 0; i < p.h; ++i) {
      for (std::int64_t j = 0; j < p.w; ++j) {
        std::memcpy(&patch.at(i, j, 0), padded.data.data() + padded.offset(o.i + i, o.j + j, o.k), sizeof(float) * p.d);
      }
    }
    set.patches.push_back(std::move(patch));
  }
  return set;
}

Volume reassemble_padded(std::span<const Volume> patches, const PatchLayout& layout) {
  require(static_cast<std::int64_t>(patches.size()) == layout.patch_count(),
          ErrorKind::kShapeMismatch,
          "layout expects " + std::to_string(layout.patch_count()) + " patches, got " +
              std::to_string(patches.size()));
  const auto& p = layout.patch_shape;
  Volume out(layout.padded_extent());
  if (!patches.empty()) {
    out.spacing = patches.front().spacing;
    out.class_tag = patches.front().class_tag;
    out.value_range = patches.front().value_range;
  }
  for (std::int64_t n = 0; n < layout.patch_count(); ++n) {
    const Volume& patch = patches[static_cast<std::size_t>(n)];
    require(patch.shape == p, ErrorKind::kShapeMismatch,
            "patch " + std::to_string(n) + " has shape " + to_string(patch.shape) +
                ", layout expects " + to_string(p));
    const Index3 o = layout.patch_origin(n);
    for (std::int64_t i = 0; i < p.h; ++i) {
      for (std::int64_t j = 0; j < p.w; ++j) {
        std::memcpy(&out.at(o.i + i, o.j + j, o.k), patch.data.data() + patch.offset(i, j, 0), sizeof(float) * p.d);
      }
    }
  }
  return out;
}

Volume reassemble(std::span<const Volume> patches, const PatchLayout& layout) {
  return crop(reassemble_padded(patches, layout), layout.original_extent);
}

TriPlaneSlices extract_triplanes(const Volume& vol, const Index3& idx) {
  const auto& s = vol.shape;
  require(idx.i >= 0 && idx.i < s.h && idx.j >= 0 && idx.j < s.w && idx.k >= 0 && idx.k < s.d,
          ErrorKind::kOutOfBounds,
          "plane index (" + std::to_string(idx.i) + "," + std::to_string(idx.j) + "," +
              std::to_string(idx.k) + ") outside volume " + to_string(s));
  TriPlaneSlices out;
  out.axial = {s.h, s.w, std::vector<float>(static_cast<std::size_t>(s.h * s.w))};
  out.coronal = {s.h, s.d, std::vector<float>(static_cast<std::size_t>(s.h * s.d))};
  out.sagittal = {s.w, s.d, std::vector<float>(static_cast<std::size_t>(s.w * s.d))};
  for (std::int64_t i = 0; i < s.h; ++i) {
    for (std::int64_t j = 0; j < s.w; ++j) out.axial.values[i * s.w + j] = vol.at(i, j, idx.k);
    for (std::int64_t k = 0; k < s.d; ++k) out.coronal.values[i * s.d + k] = vol.at(i, idx.j, k);
  }
  for (std::int64_t j = 0; j < s.w; ++j) {
    for (std::int64_t k = 0; k < s.d; ++k) out.sagittal.values[j * s.d + k] = vol.at(idx.i, j, k);
  }
  return out;
}

Index3 random_index(const Extent3& extent, std::mt19937_64& rng) {
  auto draw = [&](std::int64_t n) {
    return std::uniform_int_distribution<std::int64_t>(0, n - 1)(rng);
  };
  Index3 idx;
  idx.i = draw(extent.h);
  idx.j = draw(extent.w);
  idx.k = draw(extent.d);
  return idx;
}

std::filesystem::path sidecar_path(const std::filesystem::path& raw_path) {
  auto p = raw_path;
  p.replace_extension(".json");
  return p;
}

void save_volume(const Volume& vol, const std::filesystem::path& raw_path) {
  vol.validate();
  for (float v : vol.data) {
    require(std::isfinite(v), ErrorKind::kNonFinite, "refusing to save non-finite volume");
  }
  if (raw_path.has_parent_path()) std::filesystem::create_directories(raw_path.parent_path());

  const auto& s = vol.shape;
  std::vector<std::uint32_t> payload(static_cast<std::size_t>(s.count()));
  std::size_t n = 0;
  for (std::int64_t k = 0; k < s.d; ++k) {
    for (std::int64_t j = 0; j < s.w; ++j) {
      for (std::int64_t i = 0; i < s.h; ++i) {
        std::uint32_t bits = std::bit_cast<std::uint32_t>(vol.at(i, j, k));
        if constexpr (std::endian::native == std::endian::big) bits = byteswap32(bits);
        payload[n++] = bits;
      }
    }
  }
  std::ofstream raw(raw_path, std::ios::binary | std::ios::trunc);
  require(static_cast<bool>(raw), ErrorKind::kIo, "cannot write " + raw_path.string());
  raw.write(reinterpret_cast<const char*>(payload.data()),
            static_cast<std::streamsize>(payload.size() * sizeof(std::uint32_t)));
  require(static_cast<bool>(raw), ErrorKind::kIo, "short write to " + raw_path.string());

  json side;
  side["shape"] = {s.h, s.w, s.d};
  side["spacing"] = {vol.spacing.x, vol.spacing.y, vol.spacing.z};
  side["class_tag"] = vol.class_tag;
  side["value_range"] = {vol.value_range.min, vol.value_range.max};
  std::ofstream meta(sidecar_path(raw_path), std::ios::trunc);
  require(static_cast<bool>(meta), ErrorKind::kIo,
          "cannot write " + sidecar_path(raw_path).string());
  meta << side.dump(2) << '\n';
}

Volume load_volume(const std::filesystem::path& raw_path) {
  const auto side_path = sidecar_path(raw_path);
  require(std::filesystem::exists(side_path), ErrorKind::kMissingFile,
          "missing sidecar " + side_path.string());
  require(std::filesystem::exists(raw_path), ErrorKind::kMissingFile,
          "missing payload " + raw_path.string());

  json side;
  try {
    std::ifstream meta(side_path);
    side = json::parse(meta);
  } catch (const json::exception& e) {
    fail(ErrorKind::kSchema, "sidecar " + side_path.string() + " is not valid JSON: " + e.what());
  }

  Volume vol;
  try {
    const auto& shape = require_key(side, "shape", side_path);
    const auto& spacing = require_key(side, "spacing", side_path);
    const auto& tag = require_key(side, "class_tag", side_path);
    const auto& range = require_key(side, "value_range", side_path);
    require(shape.is_array() && shape.size() == 3, ErrorKind::kSchema,
            "sidecar field 'shape' must be [H,W,D]");
    require(spacing.is_array() && spacing.size() == 3, ErrorKind::kSchema,
            "sidecar field 'spacing' must be [sx,sy,sz]");
    require(range.is_array() && range.size() == 2, ErrorKind::kSchema,
            "sidecar field 'value_range' must be [min,max]");
    vol.shape = {shape[0].get<std::int64_t>(), shape[1].get<std::int64_t>(),
                 shape[2].get<std::int64_t>()};
    vol.spacing = {spacing[0].get<double>(), spacing[1].get<double>(), spacing[2].get<double>()};
    vol.class_tag = tag.get<std::string>();
    vol.value_range = {range[0].get<double>(), range[1].get<double>()};
  } catch (const json::exception& e) {
    fail(ErrorKind::kSchema, "sidecar " + side_path.string() + " has a malformed field: " + e.what());
  }
  require(vol.shape.h >= 1 && vol.shape.w >= 1 && vol.shape.d >= 1, ErrorKind::kSchema,
          "sidecar shape must be positive");

  const auto bytes = std::filesystem::file_size(raw_path);
  const auto expected = static_cast<std::uintmax_t>(vol.shape.count()) * sizeof(float);
  require(bytes == expected, ErrorKind::kShapeMismatch,
          "payload " + raw_path.string() + " has " + std::to_string(bytes) +
              " bytes; shape " + to_string(vol.shape) + " needs " + std::to_string(expected));

  std::vector<std::uint32_t> payload(static_cast<std::size_t>(vol.shape.count()));
  std::ifstream raw(raw_path, std::ios::binary);
  raw.read(reinterpret_cast<char*>(payload.data()), static_cast<std::streamsize>(expected));
  require(static_cast<bool>(raw), ErrorKind::kIo, "short read from " + raw_path.string());

  vol.data.assign(payload.size(), 0.0f);
  const auto& s = vol.shape;
  std::size_t n = 0;
  for (std::int64_t k = 0; k < s.d; ++k) {
    for (std::int64_t j = 0; j < s.w; ++j) {
      for (std::int64_t i = 0; i < s.h; ++i) {
        std::uint32_t bits = payload[n++];
        if constexpr (std::endian::native == std::endian::big) bits = byteswap32(bits);
        const float v = std::bit_cast<float>(bits);
        require(std::isfinite(v), ErrorKind::kNonFinite,
                "payload " + raw_path.string() + " contains non-finite values");
        vol.at(i, j, k) = v;
      }
    }
  }
  vol.validate();
  return vol;
}

}  // namespace meddiff
