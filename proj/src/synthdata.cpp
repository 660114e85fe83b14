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

#include "meddiff/synthdata.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <iostream>
#include <numbers>
#include <random>

#include <torch/torch.h>

#include "meddiff/error.hpp"
#include "meddiff/hash.hpp"

namespace meddiff::synthdata {

namespace {

// Draws built directly from raw engine bits so sequences do not depend on
// the standard library's distribution implementations.
class Stream {
 public:
  explicit Stream(std::uint64_t seed) : gen_(splitmix64(seed)) {}

  double uniform() { return static_cast<double>(gen_() >> 11) * 0x1.0p-53; }
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }
  std::int64_t integer(std::int64_t lo, std::int64_t hi) {  // inclusive
    return lo + static_cast<std::int64_t>(uniform() * static_cast<double>(hi - lo + 1));
  }
  double normal() {
    const double u1 = std::max(uniform(), 0x1.0p-60);
    const double u2 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
  }

 private:
  std::mt19937_64 gen_;
};

// Smooth 0..1 occupancy from a signed distance (positive inside), ~1 voxel ramp.
double soft_edge(double inside_distance) { return 1.0 / (1.0 + std::exp(-4.0 * inside_distance)); }

struct Primitive {
  enum Kind { kEllipsoid, kShell, kTube, kLattice } kind = kEllipsoid;
  double c[3] = {0, 0, 0};
  double r[3] = {1, 1, 1};
  double thickness = 1;     // shell
  double a[3] = {0, 0, 0};  // tube start
  double b[3] = {0, 0, 0};  // tube end
  double radius = 1;        // tube / lattice rod
  double period = 8;        // lattice
  double phase[3] = {0, 0, 0};
  double intensity = 1;

  // Approximate signed distance in voxels, positive inside.
  double inside(double i, double j, double k) const {
    switch (kind) {
      case kEllipsoid: {
        const double q = std::sqrt(sq((i - c[0]) / r[0]) + sq((j - c[1]) / r[1]) + sq((k - c[2]) / r[2]));
        return (1.0 - q) * std::min({r[0], r[1], r[2]});
      }
      case kShell: {
        const double q = std::sqrt(sq((i - c[0]) / r[0]) + sq((j - c[1]) / r[1]) + sq((k - c[2]) / r[2]));
        const double dist = (1.0 - q) * std::min({r[0], r[1], r[2]});  // depth below the outer surface
        return std::min(dist, thickness - dist);
      }
      case kTube: {
        double ab[3], ap[3];
        const double p[3] = {i, j, k};
        double len2 = 0, t = 0;
        for (int d = 0; d < 3; ++d) {
          ab[d] = b[d] - a[d];
          ap[d] = p[d] - a[d];
          len2 += ab[d] * ab[d];
          t += ab[d] * ap[d];
        }
        t = len2 > 0 ? std::clamp(t / len2, 0.0, 1.0) : 0.0;
        double d2 = 0;
        for (int d = 0; d < 3; ++d) d2 += sq(p[d] - (a[d] + t * ab[d]));
        return radius - std::sqrt(d2);
      }
      case kLattice: {
        // Rods parallel to each axis; distance in the plane orthogonal to the rod.
        const double p[3] = {i, j, k};
        double off[3];
        for (int d = 0; d < 3; ++d) {
          const double u = std::fmod(p[d] - phase[d], period);
          const double w = u < 0 ? u + period : u;
          off[d] = std::min(w, period - w);
        }
        const double rod = std::min({std::hypot(off[1], off[2]), std::hypot(off[0], off[2]),
                                     std::hypot(off[0], off[1])});
        return radius - rod;
      }
    }
    return -1;
  }

  static double sq(double x) { return x * x; }
};

Phantom render(const Extent3& e, const std::vector<Primitive>& prims, const std::string& tag) {
  Phantom ph{Volume(e, {}, tag), Volume(e, {}, tag)};
  for (std::int64_t i = 0; i < e.h; ++i) {
    for (std::int64_t j = 0; j < e.w; ++j) {
      for (std::int64_t k = 0; k < e.d; ++k) {
        double best = 0;
        int label = 0;
        for (std::size_t p = 0; p < prims.size(); ++p) {
          const double s = prims[p].inside(static_cast<double>(i), static_cast<double>(j),
                                           static_cast<double>(k));
          best = std::max(best, prims[p].intensity * soft_edge(s));
          if (s >= 0) label = static_cast<int>(p) + 1;  // later primitives overwrite earlier ones
        }
        ph.image.at(i, j, k) = static_cast<float>(std::clamp(-1.0 + 2.0 * best, -1.0, 1.0));
        ph.labels.at(i, j, k) = static_cast<float>(label);
      }
    }
  }
  ph.image.value_range = {-1.0, 1.0};
  ph.labels.value_range = {0.0, static_cast<double>(prims.size())};
  return ph;
}

std::vector<Primitive> ellipsoid_organ(const PhantomSpec& s, Stream& rng, std::int64_t n) {
  const double E[3] = {static_cast<double>(s.extent.h), static_cast<double>(s.extent.w),
                       static_cast<double>(s.extent.d)};
  std::vector<Primitive> out;
  Primitive body;
  for (int d = 0; d < 3; ++d) {
    body.c[d] = (E[d] - 1) / 2 + rng.uniform(-0.05, 0.05) * E[d];
    body.r[d] = rng.uniform(0.36, 0.45) * E[d];
  }
  body.intensity = s.min_intensity;
  out.push_back(body);
  for (std::int64_t p = 1; p < n; ++p) {
    Primitive o;
    for (int d = 0; d < 3; ++d) {
      o.r[d] = rng.uniform(0.08, 0.18) * E[d];
      o.c[d] = body.c[d] + rng.uniform(-0.5, 0.5) * (body.r[d] - o.r[d]);
    }
    o.intensity = rng.uniform(s.min_intensity, s.max_intensity);
    out.push_back(o);
  }
  return out;
}

std::vector<Primitive> tube_vessel(const PhantomSpec& s, Stream& rng, std::int64_t n) {
  const double E[3] = {static_cast<double>(s.extent.h), static_cast<double>(s.extent.w),
                       static_cast<double>(s.extent.d)};
  std::vector<Primitive> out;
  for (std::int64_t p = 0; p < n; ++p) {
    Primitive t;
    t.kind = Primitive::kTube;
    for (int d = 0; d < 3; ++d) {
      t.a[d] = rng.uniform(0.1, 0.9) * (E[d] - 1);
      t.b[d] = rng.uniform(0.1, 0.9) * (E[d] - 1);
    }
    // Stretch one axis end to end so each vessel crosses the field of view.
    const auto axis = rng.integer(0, 2);
    t.a[axis] = 0;
    t.b[axis] = E[axis] - 1;
    t.radius = rng.uniform(1.2, 2.8) * std::min({E[0], E[1], E[2]}) / 32.0;
    t.intensity = rng.uniform(s.min_intensity, s.max_intensity);
    out.push_back(t);
  }
  return out;
}

std::vector<Primitive> shell_skull(const PhantomSpec& s, Stream& rng, std::int64_t n) {
  const double E[3] = {static_cast<double>(s.extent.h), static_cast<double>(s.extent.w),
                       static_cast<double>(s.extent.d)};
  std::vector<Primitive> out;
  Primitive brain;
  Primitive shell;
  shell.kind = Primitive::kShell;
  for (int d = 0; d < 3; ++d) {
    shell.c[d] = (E[d] - 1) / 2 + rng.uniform(-0.03, 0.03) * E[d];
    shell.r[d] = rng.uniform(0.38, 0.46) * E[d];
  }
  shell.thickness = rng.uniform(1.5, 3.0) * std::min({E[0], E[1], E[2]}) / 32.0;
  shell.intensity = rng.uniform(std::max(s.min_intensity, 0.8 * s.max_intensity), s.max_intensity);
  for (int d = 0; d < 3; ++d) {
    brain.c[d] = shell.c[d];
    brain.r[d] = shell.r[d] - shell.thickness - 0.5;
  }
  brain.intensity = s.min_intensity + 0.2 * (s.max_intensity - s.min_intensity);
  out.push_back(brain);
  out.push_back(shell);
  for (std::int64_t p = 2; p < n; ++p) {
    Primitive v;  // ventricle-like inclusions
    for (int d = 0; d < 3; ++d) {
      v.r[d] = rng.uniform(0.05, 0.1) * E[d];
      v.c[d] = brain.c[d] + rng.uniform(-0.4, 0.4) * brain.r[d];
    }
    v.intensity = rng.uniform(s.min_intensity, 0.6 * s.max_intensity);
    out.push_back(v);
  }
  return out;
}

std::vector<Primitive> lattice_bone(const PhantomSpec& s, Stream& rng, std::int64_t n) {
  const double E[3] = {static_cast<double>(s.extent.h), static_cast<double>(s.extent.w),
                       static_cast<double>(s.extent.d)};
  const double scale = std::min({E[0], E[1], E[2]}) / 32.0;
  std::vector<Primitive> out;
  Primitive lattice;
  lattice.kind = Primitive::kLattice;
  lattice.period = rng.uniform(6.0, 10.0) * scale;
  lattice.radius = rng.uniform(0.9, 1.6) * scale;
  for (int d = 0; d < 3; ++d) lattice.phase[d] = rng.uniform(0.0, lattice.period);
  lattice.intensity = rng.uniform(std::max(s.min_intensity, 0.6), s.max_intensity);
  out.push_back(lattice);
  for (std::int64_t p = 1; p < n; ++p) {
    Primitive marrow;  // low-intensity cavities
    for (int d = 0; d < 3; ++d) {
      marrow.r[d] = rng.uniform(0.1, 0.2) * E[d];
      marrow.c[d] = rng.uniform(0.25, 0.75) * (E[d] - 1);
    }
    marrow.intensity = s.min_intensity * 0.5;
    out.push_back(marrow);
  }
  return out;
}

}  // namespace

const std::vector<std::string>& families() {
  static const std::vector<std::string> names{"ellipsoid-organ", "tube-vessel", "shell-skull",
                                              "lattice-bone"};
  return names;
}

bool is_family(const std::string& name) {
  const auto& f = families();
  return std::find(f.begin(), f.end(), name) != f.end();
}

void PhantomSpec::validate() const {
  if (!is_family(family)) {
    std::string valid;
    for (const auto& f : families()) valid += (valid.empty() ? "" : ", ") + f;
    fail(ErrorKind::kInvalidArgument, "unknown phantom family '" + family + "'; valid families: " + valid);
  }
  require(extent.h >= 4 && extent.w >= 4 && extent.d >= 4, ErrorKind::kInvalidArgument,
          "phantom extent must be at least 4 per axis");
  require(max_primitives >= 1 && min_primitives >= 1, ErrorKind::kInvalidArgument,
          "phantom needs at least one primitive");
  require(min_primitives <= max_primitives, ErrorKind::kInvalidArgument,
          "min_primitives exceeds max_primitives");
  require(min_intensity >= 0 && max_intensity <= 1 && min_intensity <= max_intensity,
          ErrorKind::kInvalidArgument, "intensities must satisfy 0 <= min <= max <= 1");
}

Phantom gen_phantom(const PhantomSpec& spec) {
  spec.validate();
  Stream rng(spec.seed);
  const auto n = rng.integer(spec.min_primitives, spec.max_primitives);
  std::vector<Primitive> prims;
  if (spec.family == "ellipsoid-organ") prims = ellipsoid_organ(spec, rng, n);
  else if (spec.family == "tube-vessel") prims = tube_vessel(spec, rng, n);
  else if (spec.family == "shell-skull") prims = shell_skull(spec, rng, n);
  else prims = lattice_bone(spec, rng, n);
  return render(spec.extent, prims, spec.family);
}

Phantom render_ellipsoids(const Extent3& extent, const std::vector<Ellipsoid>& shapes,
                          const std::string& class_tag) {
  require(!shapes.empty(), ErrorKind::kInvalidArgument, "phantom needs at least one primitive");
  std::vector<Primitive> prims;
  for (const auto& s : shapes) {
    require(s.ri > 0 && s.rj > 0 && s.rk > 0, ErrorKind::kInvalidArgument,
            "ellipsoid semi-axes must be positive");
    Primitive p;
    p.c[0] = s.ci;
    p.c[1] = s.cj;
    p.c[2] = s.ck;
    p.r[0] = s.ri;
    p.r[1] = s.rj;
    p.r[2] = s.rk;
    p.intensity = s.intensity;
    prims.push_back(p);
  }
  return render(extent, prims, class_tag);
}

std::string to_string(MaskKind kind) {
  return kind == MaskKind::kGaussian1d ? "gaussian-1d" : "poisson";
}

MaskKind parse_mask_kind(const std::string& name) {
  if (name == "gaussian-1d") return MaskKind::kGaussian1d;
  if (name == "poisson") return MaskKind::kPoisson;
  fail(ErrorKind::kInvalidArgument, "unknown mask kind '" + name + "'; valid: gaussian-1d, poisson");
}

double UndersamplingMask::retained_fraction() const {
  if (keep.empty()) return 0.0;
  std::int64_t n = 0;
  for (auto v : keep) n += v;
  return static_cast<double>(n) / static_cast<double>(keep.size());
}

nlohmann::json UndersamplingMask::descriptor() const {
  return {{"kind", to_string(kind)},
          {"acceleration", acceleration},
          {"seed", seed},
          {"axis", axis},
          {"extent", {extent.h, extent.w, extent.d}},
          {"retained_fraction", retained_fraction()}};
}

namespace {

UndersamplingMask gaussian_1d(const Extent3& e, double accel, std::uint64_t seed, std::int64_t axis) {
  require(axis >= 0 && axis <= 2, ErrorKind::kInvalidArgument, "mask axis must be 0, 1 or 2");
  const std::int64_t dims[3] = {e.h, e.w, e.d};
  const std::int64_t n = dims[axis];
  const auto lines = std::clamp<std::int64_t>(
      static_cast<std::int64_t>(std::llround(static_cast<double>(n) / accel)), 1, n);
  Stream rng(seed);
  std::vector<std::uint8_t> chosen(static_cast<std::size_t>(n), 0);
  const double center = static_cast<double>(n / 2);
  const double sigma = static_cast<double>(n) / 6.0;
  std::int64_t picked = 0;
  while (picked < lines) {
    const auto off = static_cast<std::int64_t>(std::llround(center + sigma * rng.normal()));
    if (off < 0 || off >= n || chosen[static_cast<std::size_t>(off)]) continue;
    chosen[static_cast<std::size_t>(off)] = 1;
    ++picked;
  }
  UndersamplingMask m;
  m.kind = MaskKind::kGaussian1d;
  m.acceleration = accel;
  m.seed = seed;
  m.extent = e;
  m.axis = axis;
  m.keep.assign(static_cast<std::size_t>(e.count()), 0);
  for (std::int64_t i = 0; i < e.h; ++i) {
    for (std::int64_t j = 0; j < e.w; ++j) {
      for (std::int64_t k = 0; k < e.d; ++k) {
        const std::int64_t idx[3] = {i, j, k};
        m.keep[static_cast<std::size_t>((i * e.w + j) * e.d + k)] =
            chosen[static_cast<std::size_t>(idx[axis])];
      }
    }
  }
  return m;
}

UndersamplingMask poisson(const Extent3& e, double accel, std::uint64_t seed) {
  UndersamplingMask m;
  m.kind = MaskKind::kPoisson;
  m.acceleration = accel;
  m.seed = seed;
  m.extent = e;
  m.axis = -1;
  const auto total = e.count();
  const auto target = std::clamp<std::int64_t>(
      static_cast<std::int64_t>(std::llround(static_cast<double>(total) / accel)), 1, total);
  m.keep.assign(static_cast<std::size_t>(total), 0);
  auto flat = [&](std::int64_t i, std::int64_t j, std::int64_t k) {
    return static_cast<std::size_t>((i * e.w + j) * e.d + k);
  };

  // Fully sampled calibration cube of 1/16 extent around the centre.
  const std::int64_t dims[3] = {e.h, e.w, e.d};
  std::int64_t lo[3], hi[3];
  for (int a = 0; a < 3; ++a) {
    const auto w = std::max<std::int64_t>(1, dims[a] / 16);
    lo[a] = dims[a] / 2 - w / 2;
    hi[a] = lo[a] + w;
  }
  std::int64_t kept = 0;
  for (std::int64_t i = lo[0]; i < hi[0]; ++i)
    for (std::int64_t j = lo[1]; j < hi[1]; ++j)
      for (std::int64_t k = lo[2]; k < hi[2]; ++k) {
        if (kept < target) {
          m.keep[flat(i, j, k)] = 1;
          ++kept;
        }
      }

  // Variable-density dart throwing: candidates ordered by a density-weighted
  // random key, accepted when no face neighbour is already sampled.
  Stream rng(seed);
  std::vector<std::pair<double, std::int64_t>> order;
  order.reserve(static_cast<std::size_t>(total));
  const double half_diag = 0.5 * std::sqrt(static_cast<double>(e.h * e.h + e.w * e.w + e.d * e.d));
  for (std::int64_t i = 0; i < e.h; ++i)
    for (std::int64_t j = 0; j < e.w; ++j)
      for (std::int64_t k = 0; k < e.d; ++k) {
        const double r = std::sqrt(std::pow(i - e.h / 2, 2) + std::pow(j - e.w / 2, 2) +
                                   std::pow(k - e.d / 2, 2)) / half_diag;
        const double density = std::pow(1.0 - std::min(r, 1.0), 2.0) + 0.05;
        const double u = std::max(rng.uniform(), 0x1.0p-60);
        order.emplace_back(std::log(u) / density, static_cast<std::int64_t>(flat(i, j, k)));
      }
  std::sort(order.begin(), order.end(),
            [](const auto& a, const auto& b) { return a.first > b.first || (a.first == b.first && a.second < b.second); });
  auto free_of_neighbours = [&](std::int64_t idx) {
    const std::int64_t k = idx % e.d, j = (idx / e.d) % e.w, i = idx / (e.d * e.w);
    const std::int64_t nb[6][3] = {{i - 1, j, k}, {i + 1, j, k}, {i, j - 1, k},
                                   {i, j + 1, k}, {i, j, k - 1}, {i, j, k + 1}};
    for (const auto& p : nb) {
      if (p[0] < 0 || p[1] < 0 || p[2] < 0 || p[0] >= e.h || p[1] >= e.w || p[2] >= e.d) continue;
      if (m.keep[flat(p[0], p[1], p[2])]) return false;
    }
    return true;
  };
  for (const auto& [key, idx] : order) {
    if (kept >= target) break;
    if (m.keep[static_cast<std::size_t>(idx)] || !free_of_neighbours(idx)) continue;
    m.keep[static_cast<std::size_t>(idx)] = 1;
    ++kept;
  }
  // Dense fallback so the retained count is exact even when the spacing rule saturates.
  for (const auto& [key, idx] : order) {
    if (kept >= target) break;
    if (m.keep[static_cast<std::size_t>(idx)]) continue;
    m.keep[static_cast<std::size_t>(idx)] = 1;
    ++kept;
  }
  return m;
}

}  // namespace

UndersamplingMask make_mask(MaskKind kind, const Extent3& extent, double acceleration,
                            std::uint64_t seed, std::int64_t axis) {
  require(std::isfinite(acceleration) && acceleration >= 1.0, ErrorKind::kInvalidArgument,
          "acceleration must be >= 1");
  require(extent.count() > 0, ErrorKind::kInvalidArgument, "mask extent must be positive");
  return kind == MaskKind::kGaussian1d ? gaussian_1d(extent, acceleration, seed, axis)
                                       : poisson(extent, acceleration, seed);
}

UndersamplingMask all_ones_mask(const Extent3& extent) {
  UndersamplingMask m;
  m.acceleration = 1.0;
  m.extent = extent;
  m.keep.assign(static_cast<std::size_t>(extent.count()), 1);
  return m;
}

UndersamplingMask all_zeros_mask(const Extent3& extent) {
  UndersamplingMask m;
  m.acceleration = INFINITY;
  m.extent = extent;
  m.keep.assign(static_cast<std::size_t>(extent.count()), 0);
  return m;
}

Volume kspace_undersample(const Volume& vol, const UndersamplingMask& mask) {
  vol.validate();
  require(mask.extent == vol.shape && static_cast<std::int64_t>(mask.keep.size()) == vol.shape.count(),
          ErrorKind::kShapeMismatch,
          "mask extent " + meddiff::to_string(mask.extent) + " differs from volume " +
              meddiff::to_string(vol.shape));
  const auto& e = vol.shape;
  auto x = torch::from_blob(const_cast<float*>(vol.data.data()), {e.h, e.w, e.d}, torch::kFloat)
               .to(torch::kDouble);
  auto keep = torch::from_blob(const_cast<std::uint8_t*>(mask.keep.data()), {e.h, e.w, e.d}, torch::kUInt8)
                  .to(torch::kDouble);
  // Masks live on the centred grid; move them back to FFT order.
  keep = torch::fft::ifftshift(keep);
  auto k = torch::fft::fftn(x);
  auto rec = torch::real(torch::fft::ifftn(k * keep)).to(torch::kFloat).contiguous();
  Volume out(e, std::vector<float>(rec.data_ptr<float>(), rec.data_ptr<float>() + e.count()),
             vol.spacing, vol.class_tag);
  out.value_range = vol.value_range;
  return out;
}

nlohmann::json PairRecord::to_json() const {
  return {{"target", target},         {"condition", condition}, {"mask_kind", mask_kind},
          {"mask_seed", mask_seed},   {"acceleration", acceleration}, {"class_tag", class_tag}};
}

PairRecord PairRecord::from_json(const nlohmann::json& j) {
  PairRecord r;
  try {
    r.target = j.at("target").get<std::string>();
    r.condition = j.at("condition").get<std::string>();
    r.mask_kind = j.at("mask_kind").get<std::string>();
    r.mask_seed = j.at("mask_seed").get<std::uint64_t>();
    r.acceleration = j.value("acceleration", 8.0);
    r.class_tag = j.at("class_tag").get<std::string>();
  } catch (const nlohmann::json::exception& ex) {
    fail(ErrorKind::kSchema, std::string("malformed pair record: ") + ex.what());
  }
  return r;
}

std::vector<PairRecord> build_pairs(const std::vector<std::filesystem::path>& targets,
                                    const PairOptions& opts, const std::filesystem::path& out_dir) {
  std::filesystem::create_directories(out_dir);
  std::vector<PairRecord> rows;
  std::size_t skipped = 0;
  for (std::size_t n = 0; n < targets.size(); ++n) {
    Volume target;
    try {
      target = load_volume(targets[n]);
    } catch (const Error& e) {
      std::cerr << "warning: skipping " << targets[n].string() << ": " << e.what() << '\n';
      ++skipped;
      continue;
    }
    const std::uint64_t mask_seed = splitmix64(opts.master_seed ^ splitmix64(n + 1));
    const auto mask = make_mask(opts.kind, target.shape, opts.acceleration, mask_seed);
    const auto cond = kspace_undersample(target, mask);
    char name[64];
    std::snprintf(name, sizeof(name), "condition_%04zu.raw", n);
    const auto cond_path = out_dir / name;
    save_volume(cond, cond_path);
    PairRecord r;
    r.target = std::filesystem::absolute(targets[n]).lexically_normal().string();
    r.condition = std::filesystem::absolute(cond_path).lexically_normal().string();
    r.mask_kind = to_string(opts.kind);
    r.mask_seed = mask_seed;
    r.acceleration = opts.acceleration;
    r.class_tag = target.class_tag;
    rows.push_back(r);
  }
  require(!rows.empty(), ErrorKind::kIo,
          "no readable target volumes (" + std::to_string(skipped) + " skipped)");
  std::ofstream os(out_dir / "pairs.jsonl");
  require(static_cast<bool>(os), ErrorKind::kIo, "cannot write pairs manifest in " + out_dir.string());
  for (const auto& r : rows) os << r.to_json().dump() << '\n';
  return rows;
}

std::vector<PairRecord> read_pairs(const std::filesystem::path& manifest) {
  std::ifstream is(manifest);
  require(static_cast<bool>(is), ErrorKind::kMissingFile, "pairs manifest not found: " + manifest.string());
  std::vector<PairRecord> rows;
  std::string line;
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    rows.push_back(PairRecord::from_json(nlohmann::json::parse(line)));
  }
  return rows;
}

std::vector<DatasetItem> write_dataset(const DatasetOptions& opts, const std::filesystem::path& out_dir,
                                       std::vector<std::string>* failures) {
  require(opts.count >= 1, ErrorKind::kInvalidArgument, "dataset count must be >= 1");
  require(!opts.families.empty(), ErrorKind::kInvalidArgument, "no phantom families given");
  for (const auto& f : opts.families) {
    PhantomSpec probe;
    probe.family = f;
    probe.validate();
  }
  std::filesystem::create_directories(out_dir);
  std::vector<DatasetItem> items;
  for (std::int64_t n = 0; n < opts.count; ++n) {
    PhantomSpec spec;
    spec.family = opts.families[static_cast<std::size_t>(n) % opts.families.size()];
    spec.extent = opts.extent;
    spec.seed = splitmix64(opts.seed ^ splitmix64(static_cast<std::uint64_t>(n) + 1));
    char name[64];
    std::snprintf(name, sizeof(name), "volume_%04lld.raw", static_cast<long long>(n));
    DatasetItem item;
    item.volume = name;
    try {
      const auto ph = gen_phantom(spec);
      save_volume(ph.image, out_dir / name);
      if (opts.write_labels) {
        std::snprintf(name, sizeof(name), "labels_%04lld.raw", static_cast<long long>(n));
        item.labels = name;
        save_volume(ph.labels, out_dir / name);
      }
    } catch (const std::exception& e) {
      if (!failures) throw;
      failures->push_back(item.volume + ": " + e.what());
      continue;
    }
    item.class_tag = spec.family;
    item.seed = spec.seed;
    items.push_back(item);
  }
  std::ofstream os(out_dir / "manifest.jsonl");
  require(static_cast<bool>(os), ErrorKind::kIo, "cannot write dataset manifest in " + out_dir.string());
  for (const auto& it : items) {
    os << nlohmann::json{{"volume", it.volume}, {"labels", it.labels},
                         {"class_tag", it.class_tag}, {"seed", it.seed}}
              .dump()
       << '\n';
  }
  return items;
}

std::vector<DatasetItem> read_dataset(const std::filesystem::path& manifest) {
  std::ifstream is(manifest);
  require(static_cast<bool>(is), ErrorKind::kMissingFile, "dataset manifest not found: " + manifest.string());
  std::vector<DatasetItem> items;
  std::string line;
  const auto dir = manifest.parent_path();
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    const auto j = nlohmann::json::parse(line);
    DatasetItem it;
    try {
      it.volume = (dir / j.at("volume").get<std::string>()).string();
      const auto labels = j.value("labels", std::string());
      it.labels = labels.empty() ? std::string() : (dir / labels).string();
      it.class_tag = j.at("class_tag").get<std::string>();
      it.seed = j.value("seed", std::uint64_t{0});
    } catch (const nlohmann::json::exception& ex) {
      fail(ErrorKind::kSchema, std::string("malformed dataset record: ") + ex.what());
    }
    items.push_back(it);
  }
  return items;
}

}  // namespace meddiff::synthdata
