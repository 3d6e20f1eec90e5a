// SPDX-License-Identifier: Apache-2.0
//
// Binary model checkpoint. Byte layout (all integers little-endian):
//
//   offset 0   8 bytes   magic "DSACKPT\0"
//          8   u32       format version (1)
//         12   u32       scalar width in bytes (4 = float32, 8 = float64)
//         16   u32       number of table entries
//   then per entry:
//              u16       name length L
//              L bytes   name (UTF-8, e.g. "node/conv1/weight", "mask/0")
//              u8        rank R
//              R x u32   dimensions
//              N x scalar raw little-endian IEEE-754 values, N = prod(dims)
//
// Parameter entries are named node/<node id>/<weight|bias|gamma|beta|
// running_mean|running_var>. Any other entry is carried as an extra tensor.

#pragma once

#include <algorithm>
#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include "dsa/error.hpp"
#include "dsa/graph.hpp"
#include "dsa/nn.hpp"
#include "dsa/tensor.hpp"

namespace dsa {

inline constexpr char kCheckpointMagic[8] = {'D', 'S', 'A', 'C', 'K', 'P', 'T', '\0'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

struct CheckpointError : Error {
  explicit CheckpointError(const std::string& m) : Error("checkpoint_error", m) {}
};

namespace detail {

template <typename U>
void put_le(std::ostream& out, U value) {
  unsigned char bytes[sizeof(U)];
  std::memcpy(bytes, &value, sizeof(U));
  if constexpr (std::endian::native == std::endian::big) std::reverse(bytes, bytes + sizeof(U));
  out.write(reinterpret_cast<const char*>(bytes), sizeof(U));
}

template <typename U>
U get_le(std::istream& in) {
  unsigned char bytes[sizeof(U)];
  if (!in.read(reinterpret_cast<char*>(bytes), sizeof(U))) throw CheckpointError("truncated checkpoint");
  if constexpr (std::endian::native == std::endian::big) std::reverse(bytes, bytes + sizeof(U));
  U value;
  std::memcpy(&value, bytes, sizeof(U));
  return value;
}

}  // namespace detail

template <typename T>
struct Checkpoint {
  nn::ModelState<T> model;
  std::map<std::string, Tensor<T>> extras;
};

template <typename T>
void save_checkpoint(const std::string& path, const NetGraph& graph, const nn::ModelState<T>& model,
                     const std::map<std::string, Tensor<T>>& extras = {}) {
  static_assert(sizeof(T) == 4 || sizeof(T) == 8);
  std::vector<std::pair<std::string, const Tensor<T>*>> table;
  for (std::size_t i = 0; i < model.layers.size(); ++i) {
    const auto& l = model.layers[i];
    const std::string prefix = "node/" + graph.node(i).id + "/";
    for (int s = 0; s < nn::kNumSlots; ++s) {
      if (!l.param[s].empty()) table.emplace_back(prefix + nn::slot_name(s), &l.param[s]);
    }
    if (!l.running_mean.empty()) table.emplace_back(prefix + "running_mean", &l.running_mean);
    if (!l.running_var.empty()) table.emplace_back(prefix + "running_var", &l.running_var);
  }
  for (const auto& [name, t] : extras) table.emplace_back(name, &t);

  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw CheckpointError("cannot write checkpoint '" + path + "'");
  out.write(kCheckpointMagic, sizeof(kCheckpointMagic));
  detail::put_le<std::uint32_t>(out, kCheckpointVersion);
  detail::put_le<std::uint32_t>(out, sizeof(T));
  detail::put_le<std::uint32_t>(out, static_cast<std::uint32_t>(table.size()));
  for (const auto& [name, t] : table) {
    detail::put_le<std::uint16_t>(out, static_cast<std::uint16_t>(name.size()));
    out.write(name.data(), static_cast<std::streamsize>(name.size()));
    detail::put_le<std::uint8_t>(out, static_cast<std::uint8_t>(t->shape.size()));
    for (int d : t->shape) detail::put_le<std::uint32_t>(out, static_cast<std::uint32_t>(d));
    for (T v : t->data) detail::put_le<T>(out, v);
  }
  if (!out) throw CheckpointError("failed writing checkpoint '" + path + "'");
}

/// Loads a checkpoint written for `graph`. Values stored at a different
/// scalar width are converted.
template <typename T>
Checkpoint<T> load_checkpoint(const std::string& path, const NetGraph& graph) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw CheckpointError("cannot open checkpoint '" + path + "'");
  char magic[8];
  if (!in.read(magic, sizeof(magic)) || std::memcmp(magic, kCheckpointMagic, sizeof(magic)) != 0) {
    throw CheckpointError("'" + path + "' is not a dsa checkpoint");
  }
  const auto version = detail::get_le<std::uint32_t>(in);
  if (version != kCheckpointVersion) throw CheckpointError("unsupported checkpoint version " + std::to_string(version));
  const auto width = detail::get_le<std::uint32_t>(in);
  if (width != 4 && width != 8) throw CheckpointError("bad scalar width in checkpoint");
  const auto entries = detail::get_le<std::uint32_t>(in);

  Checkpoint<T> ck;
  ck.model.layers.resize(graph.size());
  for (std::uint32_t e = 0; e < entries; ++e) {
    const auto len = detail::get_le<std::uint16_t>(in);
    std::string name(len, '\0');
    if (!in.read(name.data(), len)) throw CheckpointError("truncated checkpoint");
    const auto rank = detail::get_le<std::uint8_t>(in);
    std::vector<int> shape(rank);
    for (auto& d : shape) d = static_cast<int>(detail::get_le<std::uint32_t>(in));
    Tensor<T> t(shape);
    for (auto& v : t.data) {
      v = width == 4 ? static_cast<T>(detail::get_le<float>(in)) : static_cast<T>(detail::get_le<double>(in));
    }
    if (name.rfind("node/", 0) == 0) {
      const auto slash = name.rfind('/');
      const std::string id = name.substr(5, slash - 5);
      const std::string field = name.substr(slash + 1);
      auto& l = ck.model.layers.at(graph.index_of(id));
      bool matched = false;
      for (int s = 0; s < nn::kNumSlots; ++s) {
        if (field == nn::slot_name(s)) {
          l.param[s] = std::move(t);
          l.velocity[s] = Tensor<T>(l.param[s].shape, T(0));
          matched = true;
        }
      }
      if (!matched && field == "running_mean") {
        l.running_mean = std::move(t);
      } else if (!matched && field == "running_var") {
        l.running_var = std::move(t);
      } else if (!matched) {
        throw CheckpointError("unknown checkpoint field '" + name + "'");
      }
    } else {
      ck.extras.emplace(name, std::move(t));
    }
  }
  // Shapes must agree with a freshly initialized model for this graph.
  const auto reference = nn::init_model<T>(graph, 0);
  for (std::size_t i = 0; i < graph.size(); ++i) {
    for (int s = 0; s < nn::kNumSlots; ++s) {
      if (reference.layers[i].param[s].shape != ck.model.layers[i].param[s].shape) {
        throw CheckpointError("checkpoint tensor node/" + graph.node(i).id + "/" + nn::slot_name(s) +
                              " does not match the graph");
      }
    }
  }
  return ck;
}

}  // namespace dsa
