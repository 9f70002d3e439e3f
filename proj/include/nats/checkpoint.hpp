/* Copyright 2026 The natsearch Authors. All Rights Reserved.

Licensed under the Apache License, Version 2.0 (the "License");
you may not use this file except in compliance with the License.
You may obtain a copy of the License at

    http://www.apache.org/licenses/LICENSE-2.0

Unless required by applicable law or agreed to in writing, software
distributed under the License is distributed on an "AS IS" BASIS,
WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
See the License for the specific language governing permissions and
limitations under the License.
==============================================================================*/
#ifndef NATS_CHECKPOINT_HPP_
#define NATS_CHECKPOINT_HPP_

#include <filesystem>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "nats/tensor.hpp"

namespace nats {

// Checkpoints are a directory: raw little-endian array data in data.bin plus
// manifest.json describing name, dtype, shape and byte offset of every array,
// so files can be validated without deserializing them.

template <typename T>
const char* dtype_name() {
  if constexpr (sizeof(T) == 4)
    return "f32";
  else
    return "f64";
}

inline nlohmann::json read_json_file(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open " + path.string());
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError("invalid JSON in " + path.string() + ": " + e.what());
  }
  return j;
}

inline void write_text_file(const std::filesystem::path& path,
                            const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write " + path.string());
  out << text;
  if (!out) throw IoError("write failed for " + path.string());
}

template <typename T>
void save_checkpoint(const std::filesystem::path& dir,
                     const std::vector<std::pair<std::string, const Tensor<T>*>>&
                         arrays,
                     const nlohmann::json& extras = nlohmann::json::object()) {
  std::filesystem::create_directories(dir);
  std::ofstream bin(dir / "data.bin", std::ios::binary);
  if (!bin) throw IoError("cannot write " + (dir / "data.bin").string());

  nlohmann::json manifest;
  manifest["format"] = "natsearch-checkpoint-v1";
  manifest["dtype"] = dtype_name<T>();
  nlohmann::json list = nlohmann::json::array();
  std::uint64_t offset = 0;
  for (const auto& [name, tensor] : arrays) {
    nlohmann::json entry;
    entry["name"] = name;
    entry["shape"] = tensor->shape();
    entry["offset"] = offset;
    list.push_back(entry);
    const std::uint64_t bytes = tensor->size() * sizeof(T);
    bin.write(reinterpret_cast<const char*>(tensor->data()),
              static_cast<std::streamsize>(bytes));
    offset += bytes;
  }
  if (!bin) throw IoError("write failed for " + (dir / "data.bin").string());
  bin.close();
  manifest["arrays"] = list;
  manifest["total_bytes"] = offset;
  for (const auto& [k, v] : extras.items()) manifest[k] = v;
  write_text_file(dir / "manifest.json", manifest.dump(2) + "\n");
}

template <typename T>
std::map<std::string, Tensor<T>> load_checkpoint(
    const std::filesystem::path& dir, nlohmann::json* manifest_out = nullptr) {
  const nlohmann::json manifest = read_json_file(dir / "manifest.json");
  if (manifest.value("format", "") != "natsearch-checkpoint-v1")
    throw ConfigError("unrecognized checkpoint format in " + dir.string());
  const std::string dtype = manifest.value("dtype", "");
  std::ifstream bin(dir / "data.bin", std::ios::binary);
  if (!bin) throw IoError("cannot open " + (dir / "data.bin").string());

  std::map<std::string, Tensor<T>> out;
  for (const auto& entry : manifest.at("arrays")) {
    const std::string name = entry.at("name").get<std::string>();
    const Shape shape = entry.at("shape").get<Shape>();
    const std::uint64_t offset = entry.at("offset").get<std::uint64_t>();
    Tensor<T> t(shape);
    bin.seekg(static_cast<std::streamoff>(offset));
    if (dtype == dtype_name<T>()) {
      bin.read(reinterpret_cast<char*>(t.data()),
               static_cast<std::streamsize>(t.size() * sizeof(T)));
    } else if (dtype == "f32") {
      std::vector<float> tmp(t.size());
      bin.read(reinterpret_cast<char*>(tmp.data()),
               static_cast<std::streamsize>(tmp.size() * sizeof(float)));
      for (std::size_t i = 0; i < t.size(); ++i) t[i] = static_cast<T>(tmp[i]);
    } else if (dtype == "f64") {
      std::vector<double> tmp(t.size());
      bin.read(reinterpret_cast<char*>(tmp.data()),
               static_cast<std::streamsize>(tmp.size() * sizeof(double)));
      for (std::size_t i = 0; i < t.size(); ++i) t[i] = static_cast<T>(tmp[i]);
    } else {
      throw ConfigError("unknown checkpoint dtype \"" + dtype + "\"");
    }
    if (!bin) throw IoError("truncated checkpoint data for array " + name);
    out.emplace(name, std::move(t));
  }
  if (manifest_out) *manifest_out = manifest;
  return out;
}

}  // namespace nats

#endif  // NATS_CHECKPOINT_HPP_
