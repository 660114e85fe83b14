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


#include <doctest.h>

#include <algorithm>
#include <filesystem>
#include <fstream>

#include <nlohmann/json.hpp>

#include "meddiff/error.hpp"
#include "meddiff/volume.hpp"
#include "support.hpp"

using namespace meddiff;
using meddiff::testing::random_volume;

namespace {

ErrorKind kind_of(const std::function<void()>& fn) {
  try {
    fn();
  } catch (const Error& e) {
    return e.kind();
  }
  FAIL("expected an error");
  return ErrorKind::kInvalidArgument;
}

}  // namespace

TEST_SUITE("volume") {

TEST_CASE("normalize maps endpoints and midpoint") {
  Volume v(Extent3{3, 1, 1}, std::vector<float>{0.0f, 500.0f, 1000.0f});
  auto n = normalize_minmax(v);
  CHECK(n.data == std::vector<float>{-1.0f, 0.0f, 1.0f});
  CHECK(n.value_range == ValueRange{0.0, 1000.0});
  auto back = denormalize(n);
  CHECK(back.data == v.data);
}

TEST_CASE("normalize is identity on [-1, 1] data and hits exact extremes") {
  Volume v({4, 1, 1}, {-1.0f, -0.25f, 0.5f, 1.0f});
  CHECK(normalize_minmax(v).data == v.data);

  auto r = random_volume({8, 8, 8}, 3);
  for (auto& x : r.data) x = x * 37.0f + 5.0f;
  auto n = normalize_minmax(r);
  auto [lo, hi] = std::minmax_element(n.data.begin(), n.data.end());
  CHECK(*lo == -1.0f);
  CHECK(*hi == 1.0f);
}

TEST_CASE("normalize rejects constant and non-finite volumes") {
  Volume c({4, 4, 4});
  std::fill(c.data.begin(), c.data.end(), 2.5f);
  CHECK(kind_of([&] { normalize_minmax(c); }) == ErrorKind::kDegenerateInput);
  c.data[5] = std::numeric_limits<float>::quiet_NaN();
  CHECK(kind_of([&] { normalize_minmax(c); }) == ErrorKind::kNonFinite);
}

TEST_CASE("partition counts patches") {
  auto one = partition(random_volume({64, 64, 64}, 1), {64, 64, 64});
  CHECK(one.patches.size() == 1);
  CHECK(one.layout.grid_counts == Extent3{1, 1, 1});

  Volume big({256, 256, 256});
  auto many = partition(big, {64, 64, 64});
  CHECK(many.patches.size() == 64);
  CHECK(many.layout.grid_counts == Extent3{4, 4, 4});
}

TEST_CASE("padded partition round-trips exactly") {
  auto v = random_volume({60, 60, 60}, 2);
  auto ps = partition(v, {32, 32, 32});
  CHECK(ps.patches.size() == 8);
  CHECK(ps.layout.padded_extent() == Extent3{64, 64, 64});
  auto back = reassemble(ps.patches, ps.layout);
  CHECK(back.shape == v.shape);
  CHECK(back.data == v.data);
}

TEST_CASE("single patch and 2x2x2 layouts round-trip") {
  auto v = random_volume({16, 16, 16}, 4);
  auto single = partition(v, {16, 16, 16});
  CHECK(reassemble(single.patches, single.layout).data == v.data);

  auto w = random_volume({64, 64, 64}, 5);
  auto ps = partition(w, {32, 32, 32});
  CHECK(ps.layout.grid_counts == Extent3{2, 2, 2});
  CHECK(reassemble(ps.patches, ps.layout).data == w.data);
}

TEST_CASE("shuffled patch order is detectable") {
  auto v = random_volume({32, 32, 32}, 6);
  auto ps = partition(v, {16, 16, 16});
  std::swap(ps.patches[0], ps.patches[5]);
  CHECK(reassemble(ps.patches, ps.layout).data != v.data);
}

TEST_CASE("patch layout is row-major over the grid") {
  auto layout = make_layout({40, 24, 16}, {16, 8, 8});
  CHECK(layout.grid_counts == Extent3{3, 3, 2});
  CHECK(layout.patch_index(1, 2, 1) == (1 * 3 + 2) * 2 + 1);
  CHECK(layout.patch_origin(layout.patch_index(2, 1, 1)) == Index3{32, 8, 8});
}

TEST_CASE("partition and reassemble errors") {
  auto v = random_volume({8, 8, 8}, 7);
  CHECK_THROWS_AS(partition(v, {16, 8, 8}), Error);
  auto ps = partition(v, {4, 4, 4});
  ps.patches.pop_back();
  CHECK(kind_of([&] { reassemble(ps.patches, ps.layout); }) == ErrorKind::kShapeMismatch);
  auto ps2 = partition(v, {4, 4, 4});
  ps2.patches[1] = Volume({4, 4, 2});
  CHECK(kind_of([&] { reassemble(ps2.patches, ps2.layout); }) == ErrorKind::kShapeMismatch);
}

TEST_CASE("reflect padding mirrors without repeating the edge") {
  Volume v(Extent3{3, 1, 1}, std::vector<float>{1.0f, 2.0f, 3.0f});
  auto p = pad_reflect(v, {6, 1, 1});
  CHECK(p.data == std::vector<float>{1.0f, 2.0f, 3.0f, 2.0f, 1.0f, 2.0f});
  CHECK(crop(p, {3, 1, 1}).data == v.data);
}

TEST_CASE("triplanes of a constant volume") {
  Volume v({4, 4, 4});
  std::fill(v.data.begin(), v.data.end(), 0.75f);
  auto t = extract_triplanes(v, {1, 2, 3});
  for (const Plane* p : {&t.axial, &t.coronal, &t.sagittal}) {
    CHECK(p->rows == 4);
    CHECK(p->cols == 4);
    CHECK(std::all_of(p->values.begin(), p->values.end(), [](float x) { return x == 0.75f; }));
  }
}

TEST_CASE("triplanes of a one-hot volume contain exactly one 1") {
  Volume v({5, 6, 7});
  v.at(2, 3, 4) = 1.0f;
  auto t = extract_triplanes(v, {2, 3, 4});
  for (const Plane* p : {&t.axial, &t.coronal, &t.sagittal})
    CHECK(std::count(p->values.begin(), p->values.end(), 1.0f) == 1);
}

TEST_CASE("triplanes equal direct slicing") {
  auto v = random_volume({8, 8, 8}, 8);
  const Index3 idx{3, 5, 2};
  auto t = extract_triplanes(v, idx);
  for (std::int64_t a = 0; a < 8; ++a)
    for (std::int64_t b = 0; b < 8; ++b) {
      CHECK(t.axial.at(a, b) == v.at(a, b, idx.k));
      CHECK(t.coronal.at(a, b) == v.at(a, idx.j, b));
      CHECK(t.sagittal.at(a, b) == v.at(idx.i, a, b));
    }
  CHECK(kind_of([&] { extract_triplanes(v, {8, 0, 0}); }) == ErrorKind::kOutOfBounds);
}

TEST_CASE("save/load round-trip is bit-exact") {
  auto dir = meddiff::testing::scratch_dir("volume_io");
  auto v = random_volume({16, 16, 16}, 9, "ellipsoid-organ");
  v.spacing = {0.5, 1.25, 2.0};
  v.value_range = {-1000.0, 3000.0};
  save_volume(v, dir / "v.raw");
  auto back = load_volume(dir / "v.raw");
  CHECK(back.shape == v.shape);
  CHECK(back.spacing == v.spacing);
  CHECK(back.class_tag == v.class_tag);
  CHECK(back.value_range == v.value_range);
  CHECK(back.data == v.data);
  CHECK(std::filesystem::file_size(dir / "v.raw") == 16 * 16 * 16 * 4);
}

TEST_CASE("payload is H-fastest on disk") {
  auto dir = meddiff::testing::scratch_dir("volume_order");
  Volume v({2, 3, 1});
  for (std::int64_t i = 0; i < 2; ++i)
    for (std::int64_t j = 0; j < 3; ++j) v.at(i, j, 0) = static_cast<float>(10 * i + j);
  save_volume(v, dir / "o.raw");
  std::ifstream in(dir / "o.raw", std::ios::binary);
  std::vector<float> raw(6);
  in.read(reinterpret_cast<char*>(raw.data()), 24);
  CHECK(raw == std::vector<float>{0, 10, 1, 11, 2, 12});
}

TEST_CASE("load errors are distinct") {
  auto dir = meddiff::testing::scratch_dir("volume_errors");
  auto v = random_volume({16, 16, 16}, 10);
  save_volume(v, dir / "v.raw");

  // Payload truncated to 15^3 elements.
  std::filesystem::copy_file(dir / "v.raw", dir / "short.raw");
  std::filesystem::copy_file(dir / "v.json", dir / "short.json");
  std::filesystem::resize_file(dir / "short.raw", 15 * 15 * 15 * 4);
  CHECK(kind_of([&] { load_volume(dir / "short.raw"); }) == ErrorKind::kShapeMismatch);

  // Sidecar without spacing.
  std::filesystem::copy_file(dir / "v.raw", dir / "nospacing.raw");
  auto side = nlohmann::json::parse(meddiff::testing::read_text(dir / "v.json"));
  side.erase("spacing");
  std::ofstream(dir / "nospacing.json") << side.dump();
  try {
    load_volume(dir / "nospacing.raw");
    FAIL("expected schema error");
  } catch (const Error& e) {
    CHECK(e.kind() == ErrorKind::kSchema);
    CHECK(std::string(e.what()).find("spacing") != std::string::npos);
  }

  // No sidecar at all.
  std::filesystem::copy_file(dir / "v.raw", dir / "orphan.raw");
  CHECK(kind_of([&] { load_volume(dir / "orphan.raw"); }) == ErrorKind::kMissingFile);

  // Non-finite payload.
  auto bad = v;
  std::filesystem::copy_file(dir / "v.json", dir / "nan.json");
  {
    std::ofstream out(dir / "nan.raw", std::ios::binary);
    bad.data[0] = std::numeric_limits<float>::infinity();
    out.write(reinterpret_cast<const char*>(bad.data.data()), bad.data.size() * 4);
  }
  CHECK(kind_of([&] { load_volume(dir / "nan.raw"); }) == ErrorKind::kNonFinite);
  CHECK(kind_of([&] { save_volume(bad, dir / "x.raw"); }) == ErrorKind::kNonFinite);
}

}  // TEST_SUITE
