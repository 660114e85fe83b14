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

#include "meddiff/checkpoint.hpp"

#include "meddiff/error.hpp"

namespace meddiff {

CheckpointWriter::CheckpointWriter(const std::string& kind) {
  archive_.write("kind", c10::IValue(kind));
}

void CheckpointWriter::module(const std::string& name, const torch::nn::Module& m) {
  torch::serialize::OutputArchive sub;
  m.save(sub);
  archive_.write(name, sub);
}

void CheckpointWriter::optimizer(const std::string& name, const torch::optim::Optimizer& opt) {
  torch::serialize::OutputArchive sub;
  opt.save(sub);
  archive_.write(name, sub);
}

void CheckpointWriter::tensor(const std::string& name, const torch::Tensor& t) {
  archive_.write(name, t.detach().cpu().contiguous(), /*is_buffer=*/true);
}

void CheckpointWriter::json(const std::string& name, const nlohmann::json& j) {
  archive_.write(name, c10::IValue(j.dump()));
}

void CheckpointWriter::integer(const std::string& name, std::int64_t v) {
  archive_.write(name, c10::IValue(v));
}

void CheckpointWriter::save(const std::filesystem::path& path) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  // Write-then-rename so an interrupted save never leaves a truncated checkpoint.
  auto tmp = path;
  tmp += ".tmp";
  try {
    archive_.save_to(tmp.string());
  } catch (const c10::Error& e) {
    fail(ErrorKind::kIo, "cannot write checkpoint " + path.string() + ": " + e.what_without_backtrace());
  }
  std::filesystem::rename(tmp, path);
}

CheckpointReader::CheckpointReader(const std::filesystem::path& path) : path_(path) {
  require(std::filesystem::exists(path), ErrorKind::kMissingFile,
          "checkpoint not found: " + path.string());
  try {
    archive_.load_from(path.string());
    c10::IValue v;
    archive_.read("kind", v);
    kind_ = v.toStringRef();
  } catch (const c10::Error& e) {
    fail(ErrorKind::kIo, "cannot read checkpoint " + path.string() + ": " + e.what_without_backtrace());
  }
}

bool CheckpointReader::has(const std::string& name) {
  std::vector<std::string> keys = archive_.keys();
  return std::find(keys.begin(), keys.end(), name) != keys.end();
}

void CheckpointReader::module(const std::string& name, torch::nn::Module& m) {
  torch::serialize::InputArchive sub;
  require(archive_.try_read(name, sub), ErrorKind::kSchema,
          "checkpoint " + path_.string() + " has no module '" + name + "'");
  try {
    m.load(sub);
  } catch (const c10::Error& e) {
    fail(ErrorKind::kSchema, "module '" + name + "' does not match checkpoint " +
                                 path_.string() + ": " + e.what_without_backtrace());
  }
}

void CheckpointReader::optimizer(const std::string& name, torch::optim::Optimizer& opt) {
  torch::serialize::InputArchive sub;
  require(archive_.try_read(name, sub), ErrorKind::kSchema,
          "checkpoint " + path_.string() + " has no optimizer '" + name + "'");
  opt.load(sub);
}

torch::Tensor CheckpointReader::tensor(const std::string& name) {
  torch::Tensor t;
  require(archive_.try_read(name, t, /*is_buffer=*/true), ErrorKind::kSchema,
          "checkpoint " + path_.string() + " has no tensor '" + name + "'");
  return t;
}

nlohmann::json CheckpointReader::json(const std::string& name) {
  c10::IValue v;
  require(archive_.try_read(name, v), ErrorKind::kSchema,
          "checkpoint " + path_.string() + " has no block '" + name + "'");
  return nlohmann::json::parse(v.toStringRef());
}

std::int64_t CheckpointReader::integer(const std::string& name) {
  c10::IValue v;
  require(archive_.try_read(name, v), ErrorKind::kSchema,
          "checkpoint " + path_.string() + " has no field '" + name + "'");
  return v.toInt();
}

void CheckpointReader::expect_kind(const std::string& expected) const {
  require(kind_ == expected, ErrorKind::kConfig,
          "checkpoint " + path_.string() + " holds a '" + kind_ + "', expected '" + expected + "'");
}

}  // namespace meddiff
