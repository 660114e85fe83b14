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

#include "meddiff/torch_util.hpp"

#include <mutex>
#include <unordered_map>

#include <ATen/CPUGeneratorImpl.h>
#include <c10/core/CPUAllocator.h>
#include <c10/core/impl/alloc_cpu.h>

#include "meddiff/error.hpp"
#include "meddiff/hash.hpp"

namespace meddiff {

torch::Tensor to_tensor(const Volume& vol) {
  vol.validate();
  auto t = torch::from_blob(const_cast<float*>(vol.data.data()),
                            {1, 1, vol.shape.h, vol.shape.w, vol.shape.d}, torch::kFloat);
  return t.clone();
}

Volume to_volume(const torch::Tensor& t, Spacing3 spacing, std::string class_tag) {
  torch::Tensor x = t.detach().to(torch::kCPU, torch::kFloat).contiguous();
  while (x.dim() > 3) {
    require(x.size(0) == 1, ErrorKind::kShapeMismatch,
            "to_volume expects a single-channel single-volume tensor");
    x = x.squeeze(0);
  }
  require(x.dim() == 3, ErrorKind::kShapeMismatch, "to_volume expects a 3D tensor");
  Extent3 e{x.size(0), x.size(1), x.size(2)};
  std::vector<float> values(x.data_ptr<float>(), x.data_ptr<float>() + e.count());
  return Volume(e, std::move(values), spacing, std::move(class_tag));
}

Volume to_volume(const torch::Tensor& t, const Volume& like) {
  Volume out = to_volume(t, like.spacing, like.class_tag);
  out.value_range = like.value_range;
  return out;
}

Extent3 spatial_extent(const torch::Tensor& x) {
  const auto n = x.dim();
  require(n >= 3, ErrorKind::kShapeMismatch, "tensor has fewer than 3 spatial dims");
  return {x.size(n - 3), x.size(n - 2), x.size(n - 1)};
}

torch::Tensor patchify(const torch::Tensor& x, const Extent3& p) {
  require(x.dim() == 5, ErrorKind::kShapeMismatch, "patchify expects [B,C,H,W,D]");
  const auto B = x.size(0), C = x.size(1), H = x.size(2), W = x.size(3), D = x.size(4);
  require(H % p.h == 0 && W % p.w == 0 && D % p.d == 0, ErrorKind::kShapeMismatch,
          "extent " + to_string({H, W, D}) + " not divisible by patch " + to_string(p));
  const auto nh = H / p.h, nw = W / p.w, nd = D / p.d;
  return x.reshape({B, C, nh, p.h, nw, p.w, nd, p.d})
      .permute({0, 2, 4, 6, 1, 3, 5, 7})
      .reshape({B * nh * nw * nd, C, p.h, p.w, p.d});
}

torch::Tensor depatchify(const torch::Tensor& patches, std::int64_t batch, const Extent3& g) {
  require(patches.dim() == 5, ErrorKind::kShapeMismatch, "depatchify expects [B*N,C,h,w,d]");
  require(patches.size(0) == batch * g.count(), ErrorKind::kShapeMismatch,
          "depatchify: " + std::to_string(patches.size(0)) + " patches do not fill " +
              std::to_string(batch) + " x " + to_string(g));
  const auto C = patches.size(1), ph = patches.size(2), pw = patches.size(3),
             pd = patches.size(4);
  return patches.reshape({batch, g.h, g.w, g.d, C, ph, pw, pd})
      .permute({0, 4, 1, 5, 2, 6, 3, 7})
      .reshape({batch, C, g.h * ph, g.w * pw, g.d * pd});
}

Rng::Rng(std::uint64_t seed) : gen_(at::make_generator<at::CPUGeneratorImpl>(seed)) {}

std::int64_t Rng::uniform_int(std::int64_t n) {
  require(n >= 1, ErrorKind::kInvalidArgument, "uniform_int needs n >= 1");
  return torch::randint(n, {1}, gen_, torch::kLong).item<std::int64_t>();
}

double Rng::uniform() {
  return torch::rand({1}, gen_, torch::TensorOptions().dtype(torch::kDouble)).item<double>();
}

torch::Tensor Rng::randint(std::int64_t high, at::IntArrayRef shape) {
  return torch::randint(high, shape, gen_, torch::kLong);
}

torch::Tensor Rng::normal(at::IntArrayRef shape, torch::Dtype dtype) {
  return torch::randn(shape, gen_, torch::TensorOptions().dtype(dtype));
}

torch::Tensor Rng::normal_like(const torch::Tensor& t) {
  return torch::randn(t.sizes(), gen_, t.options());
}

torch::Tensor Rng::state() const { return gen_.get_state(); }

void Rng::set_state(const torch::Tensor& state) { gen_.set_state(state); }

std::string hash_tensors(const std::vector<std::pair<std::string, torch::Tensor>>& named) {
  Fnv1a h;
  for (const auto& [name, tensor] : named) {
    h.update(name);
    auto t = tensor.detach().contiguous().cpu();
    for (auto s : t.sizes()) h.update_value(s);
    h.update(t.data_ptr(), t.numel() * t.element_size());
  }
  return h.hex();
}

std::string hash_parameters(const torch::nn::Module& module) {
  std::vector<std::pair<std::string, torch::Tensor>> named;
  for (const auto& item : module.named_parameters()) named.emplace_back(item.key(), item.value());
  for (const auto& item : module.named_buffers()) named.emplace_back(item.key(), item.value());
  return hash_tensors(named);
}

bool all_finite(const torch::Tensor& t) { return torch::isfinite(t).all().item<bool>(); }

void set_requires_grad(torch::nn::Module& module, bool flag) {
  for (auto& p : module.parameters()) p.set_requires_grad(flag);
}

void copy_parameters(const torch::nn::Module& from, torch::nn::Module& to) {
  torch::NoGradGuard no_grad;
  auto src = from.named_parameters();
  auto dst = to.named_parameters();
  require(src.size() == dst.size(), ErrorKind::kShapeMismatch,
          "parameter count mismatch while copying modules");
  for (auto& item : dst) {
    const auto* s = src.find(item.key());
    require(s != nullptr, ErrorKind::kShapeMismatch, "missing parameter " + item.key());
    require(s->sizes() == item.value().sizes(), ErrorKind::kShapeMismatch,
            "shape mismatch for parameter " + item.key());
    item.value().copy_(*s);
  }
  auto sbuf = from.named_buffers();
  for (auto& item : to.named_buffers()) {
    if (const auto* s = sbuf.find(item.key())) item.value().copy_(*s);
  }
}

std::int64_t count_parameters(const torch::nn::Module& module, bool trainable_only) {
  std::int64_t n = 0;
  for (const auto& p : module.parameters()) {
    if (!trainable_only || p.requires_grad()) n += p.numel();
  }
  return n;
}

namespace {

class TrackingAllocator final : public c10::Allocator {
 public:
  explicit TrackingAllocator(MemoryTracker* tracker) : tracker_(tracker) {}

  c10::DataPtr allocate(std::size_t n) override {
    void* ptr = c10::alloc_cpu(n);
    {
      std::lock_guard<std::mutex> lock(mutex());
      sizes()[ptr] = n;
    }
    tracker_->on_alloc(static_cast<std::int64_t>(n));
    return {ptr, ptr, &TrackingAllocator::release, c10::Device(c10::DeviceType::CPU)};
  }

  c10::DeleterFnPtr raw_deleter() const override { return &TrackingAllocator::release; }

  void copy_data(void* dest, const void* src, std::size_t count) const override {
    default_copy_data(dest, src, count);
  }

  static void release(void* ptr) {
    if (ptr == nullptr) return;
    std::size_t n = 0;
    {
      std::lock_guard<std::mutex> lock(mutex());
      auto it = sizes().find(ptr);
      if (it != sizes().end()) {
        n = it->second;
        sizes().erase(it);
      }
    }
    if (instance_ != nullptr) instance_->on_free(static_cast<std::int64_t>(n));
    c10::free_cpu(ptr);
  }

  static MemoryTracker* instance_;

 private:
  static std::mutex& mutex() {
    static std::mutex m;
    return m;
  }
  static std::unordered_map<void*, std::size_t>& sizes() {
    static std::unordered_map<void*, std::size_t> s;
    return s;
  }

  MemoryTracker* tracker_;
};

MemoryTracker* TrackingAllocator::instance_ = nullptr;

}  // namespace

MemoryTracker& MemoryTracker::install() {
  static MemoryTracker tracker;
  static TrackingAllocator* allocator = [] {
    auto* a = new TrackingAllocator(&tracker);
    TrackingAllocator::instance_ = &tracker;
    c10::SetCPUAllocator(a, /*priority=*/100);
    return a;
  }();
  (void)allocator;
  return tracker;
}

void MemoryTracker::reset_peak() { peak_.store(current_.load()); }

void MemoryTracker::on_alloc(std::int64_t bytes) {
  const auto now = current_.fetch_add(bytes) + bytes;
  auto peak = peak_.load();
  while (now > peak && !peak_.compare_exchange_weak(peak, now)) {
  }
}

void MemoryTracker::on_free(std::int64_t bytes) { current_.fetch_sub(bytes); }

}  // namespace meddiff
