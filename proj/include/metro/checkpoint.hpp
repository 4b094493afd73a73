#pragma once

// Checkpoint layout: one JSON header line, then little-endian float32 data
// for every tensor's values, Adam first moments and second moments, in
// manifest order.

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "json.hpp"
#include "metro/encoder.hpp"
#include "metro/errors.hpp"
#include "metro/optim.hpp"

namespace metro {

static_assert(std::endian::native == std::endian::little, "checkpoints assume a little-endian host");

struct CheckpointHeader {
  nlohmann::json config;
  std::int64_t step = 0;
  std::int64_t adam_t = 0;
  struct Entry {
    std::string name;
    Shape shape;
    std::size_t offset = 0;  // in floats, within each of the three sections
  };
  std::vector<Entry> tensors;
  std::size_t floats_per_section = 0;
};

inline void save_checkpoint(const std::string& path, const nlohmann::json& config, std::int64_t step,
                            const std::vector<NamedTensor<float>>& params, const AdamState<float>& adam) {
  if (adam.m.size() != params.size()) throw DimensionError("save_checkpoint: optimizer state does not match parameters");
  nlohmann::json manifest = nlohmann::json::array();
  std::size_t offset = 0;
  for (const auto& p : params) {
    manifest.push_back({{"name", p.name}, {"shape", p.tensor.shape()}, {"offset", offset}});
    offset += p.tensor.numel();
  }
  const nlohmann::json header{{"format", "metro-checkpoint"}, {"version", 1}, {"config", config},
                              {"step", step},                 {"adam_t", adam.t}, {"floats_per_section", offset},
                              {"tensors", manifest}};
  const std::filesystem::path target(path);
  if (target.has_parent_path()) std::filesystem::create_directories(target.parent_path());
  const std::string tmp = path + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary);
    if (!out) throw IoError("cannot write checkpoint " + tmp);
    out << header.dump() << '\n';
    auto write = [&](const float* data, std::size_t n) {
      out.write(reinterpret_cast<const char*>(data), static_cast<std::streamsize>(n * sizeof(float)));
    };
    for (const auto& p : params) write(p.tensor.data().data(), p.tensor.numel());
    for (const auto& m : adam.m) write(m.data(), m.size());
    for (const auto& v : adam.v) write(v.data(), v.size());
    if (!out) throw IoError("write failed for checkpoint " + tmp);
  }
  std::filesystem::rename(tmp, path);
}

inline CheckpointHeader read_checkpoint_header(std::ifstream& in, const std::string& path) {
  std::string line;
  if (!std::getline(in, line)) throw IoError("checkpoint " + path + " is empty");
  nlohmann::json h;
  try {
    h = nlohmann::json::parse(line);
  } catch (const nlohmann::json::exception& e) {
    throw DataError("checkpoint " + path + ": bad header: " + e.what());
  }
  if (h.value("format", "") != "metro-checkpoint") throw DataError("checkpoint " + path + ": not a checkpoint file");
  CheckpointHeader out;
  out.config = h.at("config");
  out.step = h.at("step").get<std::int64_t>();
  out.adam_t = h.at("adam_t").get<std::int64_t>();
  out.floats_per_section = h.at("floats_per_section").get<std::size_t>();
  for (const auto& e : h.at("tensors"))
    out.tensors.push_back({e.at("name").get<std::string>(), e.at("shape").get<Shape>(), e.at("offset").get<std::size_t>()});
  return out;
}

inline CheckpointHeader peek_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open checkpoint " + path);
  return read_checkpoint_header(in, path);
}

// Loads values and optimizer moments into existing tensors; names and shapes
// must match the manifest exactly.
inline CheckpointHeader load_checkpoint(const std::string& path, const std::vector<NamedTensor<float>>& params,
                                        AdamState<float>& adam) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open checkpoint " + path);
  CheckpointHeader h = read_checkpoint_header(in, path);
  if (h.tensors.size() != params.size())
    throw DataError("checkpoint " + path + " has " + std::to_string(h.tensors.size()) + " tensors, model has " +
                    std::to_string(params.size()));
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (h.tensors[i].name != params[i].name || h.tensors[i].shape != params[i].tensor.shape())
      throw DataError("checkpoint " + path + ": tensor " + h.tensors[i].name + " " + to_string(h.tensors[i].shape) +
                      " does not match model tensor " + params[i].name + " " + to_string(params[i].tensor.shape()));
  }
  std::vector<float> blob(3 * h.floats_per_section);
  in.read(reinterpret_cast<char*>(blob.data()), static_cast<std::streamsize>(blob.size() * sizeof(float)));
  if (in.gcount() != static_cast<std::streamsize>(blob.size() * sizeof(float)))
    throw DataError("checkpoint " + path + " is truncated");
  adam.t = h.adam_t;
  adam.m.resize(params.size());
  adam.v.resize(params.size());
  for (std::size_t i = 0; i < params.size(); ++i) {
    const std::size_t n = params[i].tensor.numel(), off = h.tensors[i].offset;
    Tensor<float> t = params[i].tensor;
    std::memcpy(t.data().data(), blob.data() + off, n * sizeof(float));
    adam.m[i].assign(blob.begin() + static_cast<std::ptrdiff_t>(h.floats_per_section + off),
                     blob.begin() + static_cast<std::ptrdiff_t>(h.floats_per_section + off + n));
    adam.v[i].assign(blob.begin() + static_cast<std::ptrdiff_t>(2 * h.floats_per_section + off),
                     blob.begin() + static_cast<std::ptrdiff_t>(2 * h.floats_per_section + off + n));
  }
  return h;
}

}  // namespace metro
