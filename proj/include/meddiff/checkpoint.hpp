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

#include <filesystem>
#include <string>

#include <nlohmann/json.hpp>
#include <torch/torch.h>

namespace meddiff {

// Single-file archive of named modules, tensors, optimizer states and JSON
// metadata blocks. Every model family (autoencoder, estimator, adapter)
// shares this container; `kind` tells them apart.
class CheckpointWriter {
 public:
  explicit CheckpointWriter(const std::string& kind);

  void module(const std::string& name, const torch::nn::Module& m);
  void optimizer(const std::string& name, const torch::optim::Optimizer& opt);
  void tensor(const std::string& name, const torch::Tensor& t);
  void json(const std::string& name, const nlohmann::json& j);
  void integer(const std::string& name, std::int64_t v);

  void save(const std::filesystem::path& path);

 private:
  torch::serialize::OutputArchive archive_;
};

class CheckpointReader {
 public:
  explicit CheckpointReader(const std::filesystem::path& path);

  const std::string& kind() const { return kind_; }
  bool has(const std::string& name);

  void module(const std::string& name, torch::nn::Module& m);
  void optimizer(const std::string& name, torch::optim::Optimizer& opt);
  torch::Tensor tensor(const std::string& name);
  nlohmann::json json(const std::string& name);
  std::int64_t integer(const std::string& name);

  // Throws kConfig unless kind() == expected.
  void expect_kind(const std::string& expected) const;

 private:
  std::filesystem::path path_;
  torch::serialize::InputArchive archive_;
  std::string kind_;
};

}  // namespace meddiff
