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

#include "meddiff/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

#include <Eigen/Dense>

#include "meddiff/error.hpp"
#include "meddiff/hash.hpp"
#include "meddiff/torch_util.hpp"

namespace meddiff::metrics {

namespace {

void require_same_shape(const Volume& a, const Volume& b) {
  a.validate();
  b.validate();
  require(a.shape == b.shape, ErrorKind::kShapeMismatch,
          "volume shapes differ: " + to_string(a.shape) + " vs " + to_string(b.shape));
}

torch::Tensor as_double(const Volume& v) { return to_tensor(v).to(torch::kDouble); }

torch::Tensor gaussian_window(std::int64_t size, double sigma) {
  auto r = torch::arange(size, torch::kDouble) - static_cast<double>(size - 1) / 2.0;
  auto g = torch::exp(-(r * r) / (2.0 * sigma * sigma));
  g = g / g.sum();
  return (g.view({-1, 1, 1}) * g.view({1, -1, 1}) * g.view({1, 1, -1})).view({1, 1, size, size, size});
}

struct SsimParts {
  double ssim;
  double cs;
};

SsimParts ssim_parts(const torch::Tensor& x, const torch::Tensor& y, const SsimOptions& o) {
  const auto e = spatial_extent(x);
  require(e.h >= o.window && e.w >= o.window && e.d >= o.window, ErrorKind::kInvalidArgument,
          "extent " + to_string(e) + " smaller than the SSIM window " + std::to_string(o.window));
  const auto w = gaussian_window(o.window, o.sigma);
  auto filt = [&](const torch::Tensor& t) { return torch::conv3d(t, w); };
  const double c1 = std::pow(o.k1 * o.data_range, 2);
  const double c2 = std::pow(o.k2 * o.data_range, 2);
  auto mx = filt(x), my = filt(y);
  auto sxx = filt(x * x) - mx * mx;
  auto syy = filt(y * y) - my * my;
  auto sxy = filt(x * y) - mx * my;
  auto cs = (2 * sxy + c2) / (sxx + syy + c2);
  auto lum = (2 * mx * my + c1) / (mx * mx + my * my + c1);
  return {(lum * cs).mean().item<double>(), cs.mean().item<double>()};
}

constexpr double kMsWeights[5] = {0.0448, 0.2856, 0.3001, 0.2363, 0.1333};

double ms_ssim_tensors(torch::Tensor x, torch::Tensor y, const SsimOptions& opts) {
  const auto scales = ms_ssim_scales(spatial_extent(x), opts.window);
  require(scales >= 1, ErrorKind::kInvalidArgument,
          "extent " + to_string(spatial_extent(x)) + " too small for MS-SSIM");
  double wsum = 0;
  for (std::int64_t s = 0; s < scales; ++s) wsum += kMsWeights[s];
  double log_score = 0;
  for (std::int64_t s = 0; s < scales; ++s) {
    const auto parts = ssim_parts(x, y, opts);
    const double w = kMsWeights[s] / wsum;
    // Negative contrast-structure terms are clamped; the product is undefined otherwise.
    const double term = s + 1 == scales ? parts.ssim : parts.cs;
    if (term <= 0) return 0.0;
    log_score += w * std::log(term);
    if (s + 1 < scales) {
      x = torch::avg_pool3d(x, 2);
      y = torch::avg_pool3d(y, 2);
    }
  }
  return std::exp(log_score);
}

Eigen::MatrixXd to_matrix(const FeatureSet& s) {
  Eigen::MatrixXd m(s.size(), s.dim());
  for (std::int64_t r = 0; r < s.size(); ++r) {
    require(static_cast<std::int64_t>(s.rows[r].size()) == s.dim(), ErrorKind::kShapeMismatch,
            "ragged feature rows");
    for (std::int64_t c = 0; c < s.dim(); ++c) m(r, c) = s.rows[r][c];
  }
  return m;
}

void require_compatible(const FeatureSet& a, const FeatureSet& b) {
  require(a.extractor_hash == b.extractor_hash, ErrorKind::kHashMismatch,
          "feature sets come from different extractors: " + a.extractor_hash + " vs " + b.extractor_hash);
  require(a.dim() == b.dim() && a.dim() > 0, ErrorKind::kShapeMismatch, "feature dimensions differ");
}

}  // namespace

double mse(const Volume& a, const Volume& b) {
  require_same_shape(a, b);
  double acc = 0;
  for (std::size_t n = 0; n < a.data.size(); ++n) {
    const double d = static_cast<double>(a.data[n]) - static_cast<double>(b.data[n]);
    acc += d * d;
  }
  return acc / static_cast<double>(a.data.size());
}

double psnr(const Volume& a, const Volume& b, double data_range) {
  require(data_range > 0, ErrorKind::kInvalidArgument, "data range must be positive");
  const double m = mse(a, b);
  if (m == 0.0) return kPsnrIdentical;
  return 10.0 * std::log10(data_range * data_range / m);
}

double ssim(const Volume& a, const Volume& b, const SsimOptions& opts) {
  require_same_shape(a, b);
  return ssim_parts(as_double(a), as_double(b), opts).ssim;
}

std::int64_t ms_ssim_scales(const Extent3& extent, std::int64_t window) {
  std::int64_t scales = 0;
  Extent3 e = extent;
  while (scales < 5 && e.h >= window && e.w >= window && e.d >= window) {
    ++scales;
    e = {e.h / 2, e.w / 2, e.d / 2};
  }
  return scales;
}

double ms_ssim(const Volume& a, const Volume& b, const SsimOptions& opts) {
  require_same_shape(a, b);
  return ms_ssim_tensors(as_double(a), as_double(b), opts);
}

double diversity_msssim(const std::vector<Volume>& samples, std::int64_t max_pairs, std::uint64_t seed,
                        const SsimOptions& opts) {
  require(samples.size() >= 2, ErrorKind::kInvalidArgument, "diversity needs at least 2 samples");
  require(max_pairs >= 1, ErrorKind::kInvalidArgument, "max_pairs must be positive");
  std::vector<std::pair<std::size_t, std::size_t>> pairs;
  for (std::size_t i = 0; i < samples.size(); ++i)
    for (std::size_t j = i + 1; j < samples.size(); ++j) pairs.emplace_back(i, j);
  if (static_cast<std::int64_t>(pairs.size()) > max_pairs) {
    std::mt19937_64 rng(splitmix64(seed));
    // Partial Fisher-Yates with raw engine draws.
    for (std::int64_t n = 0; n < max_pairs; ++n) {
      const auto remaining = pairs.size() - static_cast<std::size_t>(n);
      const auto pick = static_cast<std::size_t>(n) + static_cast<std::size_t>(rng() % remaining);
      std::swap(pairs[static_cast<std::size_t>(n)], pairs[pick]);
    }
    pairs.resize(static_cast<std::size_t>(max_pairs));
  }
  double acc = 0;
  for (const auto& [i, j] : pairs) acc += ms_ssim(samples[i], samples[j], opts);
  return acc / static_cast<double>(pairs.size());
}

MmdResult mmd(const FeatureSet& a, const FeatureSet& b, std::optional<double> gamma) {
  require_compatible(a, b);
  require(a.size() >= 2 && b.size() >= 2, ErrorKind::kInvalidArgument, "mmd needs at least 2 samples per set");
  const auto A = to_matrix(a);
  const auto B = to_matrix(b);
  Eigen::MatrixXd Z(A.rows() + B.rows(), A.cols());
  Z << A, B;
  const auto n = Z.rows();
  Eigen::MatrixXd d2(n, n);
  for (Eigen::Index i = 0; i < n; ++i)
    for (Eigen::Index j = 0; j < n; ++j) d2(i, j) = (Z.row(i) - Z.row(j)).squaredNorm();

  MmdResult out;
  if (gamma) {
    require(*gamma > 0, ErrorKind::kInvalidArgument, "mmd bandwidth must be positive");
    out.gamma = *gamma;
  } else {
    std::vector<double> dist;
    for (Eigen::Index i = 0; i < n; ++i)
      for (Eigen::Index j = i + 1; j < n; ++j) dist.push_back(std::sqrt(d2(i, j)));
    auto mid = dist.begin() + static_cast<std::ptrdiff_t>(dist.size() / 2);
    std::nth_element(dist.begin(), mid, dist.end());
    double median = *mid;
    if (dist.size() % 2 == 0) {
      const double lower = *std::max_element(dist.begin(), mid);
      median = 0.5 * (median + lower);
    }
    if (median <= 0) {
      const double mean = std::accumulate(dist.begin(), dist.end(), 0.0) / static_cast<double>(dist.size());
      median = mean > 0 ? mean : 1.0;  // all points coincide: any bandwidth gives 0
    }
    out.gamma = median * median;
  }
  auto kmean = [&](Eigen::Index r0, Eigen::Index nr, Eigen::Index c0, Eigen::Index nc) {
    double acc = 0;
    for (Eigen::Index i = 0; i < nr; ++i)
      for (Eigen::Index j = 0; j < nc; ++j) acc += std::exp(-d2(r0 + i, c0 + j) / (2.0 * out.gamma));
    return acc / static_cast<double>(nr * nc);
  };
  const auto na = A.rows(), nb = B.rows();
  out.value = std::max(0.0, kmean(0, na, 0, na) + kmean(na, nb, na, nb) - 2.0 * kmean(0, na, na, nb));
  return out;
}

double frechet_distance(const FeatureSet& a, const FeatureSet& b, double eps) {
  require_compatible(a, b);
  require(a.size() >= 2 && b.size() >= 2, ErrorKind::kInvalidArgument,
          "frechet distance needs at least 2 samples per set");
  require(eps >= 0, ErrorKind::kInvalidArgument, "covariance regularizer must be >= 0");
  const auto A = to_matrix(a);
  const auto B = to_matrix(b);
  const Eigen::VectorXd mu_a = A.colwise().mean();
  const Eigen::VectorXd mu_b = B.colwise().mean();
  auto cov = [](const Eigen::MatrixXd& X, const Eigen::VectorXd& mu) {
    const Eigen::MatrixXd c = X.rowwise() - mu.transpose();
    return Eigen::MatrixXd((c.transpose() * c) / static_cast<double>(X.rows() - 1));
  };
  const auto dim = A.cols();
  Eigen::MatrixXd sa = cov(A, mu_a) + eps * Eigen::MatrixXd::Identity(dim, dim);
  Eigen::MatrixXd sb = cov(B, mu_b) + eps * Eigen::MatrixXd::Identity(dim, dim);

  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> ea(sa);
  if (eps == 0) {
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eb(sb);
    const double tol = 1e-12 * std::max(1.0, ea.eigenvalues().cwiseAbs().maxCoeff());
    require(ea.eigenvalues().minCoeff() > tol && eb.eigenvalues().minCoeff() > tol,
            ErrorKind::kDegenerateInput, "singular feature covariance; use a positive regularizer");
  }
  // Tr((Sa Sb)^1/2) = Tr((Sa^1/2 Sb Sa^1/2)^1/2), the latter symmetric.
  const Eigen::VectorXd la = ea.eigenvalues().cwiseMax(0.0).cwiseSqrt();
  const Eigen::MatrixXd sa_half = ea.eigenvectors() * la.asDiagonal() * ea.eigenvectors().transpose();
  Eigen::MatrixXd m = sa_half * sb * sa_half;
  m = 0.5 * (m + m.transpose());
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> em(m, Eigen::EigenvaluesOnly);
  const double tr_sqrt = em.eigenvalues().cwiseMax(0.0).cwiseSqrt().sum();
  const double value = (mu_a - mu_b).squaredNorm() + sa.trace() + sb.trace() - 2.0 * tr_sqrt;
  return std::max(0.0, value);
}

double seam_discontinuity(const Volume& vol, const PatchLayout& layout) {
  vol.validate();
  require(layout.original_extent == vol.shape, ErrorKind::kShapeMismatch,
          "layout is for " + to_string(layout.original_extent) + " but volume is " + to_string(vol.shape));
  const auto& e = vol.shape;
  const std::int64_t dims[3] = {e.h, e.w, e.d};
  const std::int64_t patch[3] = {layout.patch_shape.h, layout.patch_shape.w, layout.patch_shape.d};
  double boundary = 0, interior = 0;
  std::int64_t nb = 0, ni = 0;
  for (int axis = 0; axis < 3; ++axis) {
    for (std::int64_t i = 0; i < e.h; ++i) {
      for (std::int64_t j = 0; j < e.w; ++j) {
        for (std::int64_t k = 0; k < e.d; ++k) {
          const std::int64_t pos[3] = {i, j, k};
          if (pos[axis] + 1 >= dims[axis]) continue;
          const std::int64_t step[3] = {axis == 0, axis == 1, axis == 2};
          const double diff = std::abs(static_cast<double>(vol.at(i + step[0], j + step[1], k + step[2])) -
                                       static_cast<double>(vol.at(i, j, k)));
          if ((pos[axis] + 1) % patch[axis] == 0) {
            boundary += diff;
            ++nb;
          } else {
            interior += diff;
            ++ni;
          }
        }
      }
    }
  }
  if (nb == 0) return 0.0;
  return boundary / static_cast<double>(nb) - (ni ? interior / static_cast<double>(ni) : 0.0);
}

CodebookStats codebook_stats(const torch::Tensor& indices, std::int64_t codebook_size) {
  require(codebook_size >= 1, ErrorKind::kInvalidArgument, "codebook size must be positive");
  require(indices.numel() > 0, ErrorKind::kInvalidArgument, "no code indices");
  auto flat = indices.flatten().to(torch::kLong);
  require(flat.min().item<std::int64_t>() >= 0 && flat.max().item<std::int64_t>() < codebook_size,
          ErrorKind::kOutOfBounds, "code index outside the codebook");
  auto counts = torch::bincount(flat, {}, codebook_size).to(torch::kDouble);
  auto p = counts / counts.sum();
  auto nz = p.masked_select(p > 0);
  CodebookStats s;
  s.codebook_size = codebook_size;
  s.used = (counts > 0).sum().item<std::int64_t>();
  s.dead_fraction = 1.0 - static_cast<double>(s.used) / static_cast<double>(codebook_size);
  s.perplexity = std::exp(-(nz * nz.log()).sum().item<double>());
  return s;
}

VolumeFeatureExtractorImpl::VolumeFeatureExtractorImpl(std::uint64_t seed, std::int64_t out_dim)
    : out_dim_(out_dim) {
  require(out_dim >= 8, ErrorKind::kInvalidArgument, "feature dimension must be >= 8");
  const std::int64_t chans[5] = {1, out_dim / 8, out_dim / 4, out_dim / 2, out_dim};
  const std::int64_t strides[4] = {2, 2, 2, 1};
  layers_ = register_module("layers", torch::nn::ModuleList());
  auto gen = at::make_generator<at::CPUGeneratorImpl>(seed);
  torch::NoGradGuard no_grad;
  for (int l = 0; l < 4; ++l) {
    torch::nn::Conv3d conv(torch::nn::Conv3dOptions(chans[l], chans[l + 1], 3).stride(strides[l]).padding(1));
    const double fan_in = static_cast<double>(chans[l] * 27);
    conv->weight.copy_(torch::randn(conv->weight.sizes(), gen) * std::sqrt(2.0 / fan_in));
    conv->bias.copy_(torch::randn(conv->bias.sizes(), gen) * 0.1);
    layers_->push_back(conv);
  }
  for (auto& p : parameters()) p.set_requires_grad(false);
}

torch::Tensor VolumeFeatureExtractorImpl::forward(const torch::Tensor& x) {
  require(x.dim() == 5 && x.size(1) == 1, ErrorKind::kShapeMismatch, "extractor expects [B,1,H,W,D]");
  torch::NoGradGuard no_grad;
  auto h = x.to(torch::kFloat);
  for (const auto& layer : *layers_) h = torch::silu(layer->as<torch::nn::Conv3d>()->forward(h));
  return h.mean({2, 3, 4});
}

std::string VolumeFeatureExtractorImpl::identity() const {
  return "phi3d-" + std::to_string(out_dim_) + "-" + hash_parameters(*this);
}

FeatureSet embed(VolumeFeatureExtractor& extractor, const std::vector<Volume>& volumes) {
  FeatureSet set;
  set.extractor_hash = extractor->identity();
  for (const auto& v : volumes) {
    auto f = extractor->forward(to_tensor(v)).to(torch::kDouble).contiguous();
    set.rows.emplace_back(f.data_ptr<double>(), f.data_ptr<double>() + f.numel());
  }
  return set;
}

}  // namespace meddiff::metrics
