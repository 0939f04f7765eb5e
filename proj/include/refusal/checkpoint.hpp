#pragma once

#include <cstdint>
#include <cstring>
#include <fstream>
#include <string>
#include <vector>

#include "refusal/model.hpp"

namespace refusal::mllm {

// Checkpoint layout: magic "TMLM", format version u32, then one record per
// tensor: name length u32, name bytes, rank u32, dims u64[], f64 payload.
// All integers and floats little-endian; round-trips are bit-exact.
namespace ckpt_detail {

constexpr char kMagic[4] = {'T', 'M', 'L', 'M'};
constexpr std::uint32_t kVersion = 1;

template <typename T>
void write_raw(std::ostream& os, const T& v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
bool read_raw(std::istream& is, T& v) {
  is.read(reinterpret_cast<char*>(&v), sizeof(T));
  return static_cast<bool>(is);
}

}  // namespace ckpt_detail

inline void save_checkpoint(const ToyMllm& model, const std::string& path) {
  namespace d = ckpt_detail;
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  require<IoError>(static_cast<bool>(os), "cannot open checkpoint for writing: ", path);
  os.write(d::kMagic, 4);
  d::write_raw(os, d::kVersion);
  for (const auto& [name, tensor] : model.named_parameters()) {
    d::write_raw(os, static_cast<std::uint32_t>(name.size()));
    os.write(name.data(), static_cast<std::streamsize>(name.size()));
    d::write_raw(os, static_cast<std::uint32_t>(tensor->rank()));
    for (std::size_t dim : tensor->shape) d::write_raw(os, static_cast<std::uint64_t>(dim));
    os.write(reinterpret_cast<const char*>(tensor->data.data()),
             static_cast<std::streamsize>(tensor->data.size() * sizeof(double)));
  }
  require<IoError>(static_cast<bool>(os), "write failed for checkpoint: ", path);
}

// Loads parameters into an already-constructed model; the model's identity
// (seed, projector variant, dims) comes from configuration, the checkpoint
// carries weights only. Every parameter must be present with its exact shape.
inline void load_checkpoint(ToyMllm& model, const std::string& path) {
  namespace d = ckpt_detail;
  std::ifstream is(path, std::ios::binary);
  require<IoError>(static_cast<bool>(is), "cannot open checkpoint: ", path);
  char magic[4];
  is.read(magic, 4);
  require<IoError>(static_cast<bool>(is) && std::memcmp(magic, d::kMagic, 4) == 0,
                   "bad checkpoint magic in ", path);
  std::uint32_t version = 0;
  require<IoError>(d::read_raw(is, version) && version == d::kVersion,
                   "unsupported checkpoint version in ", path);
  auto params = model.named_parameters();
  std::size_t loaded = 0;
  while (true) {
    std::uint32_t name_len = 0;
    if (!d::read_raw(is, name_len)) break;  // clean EOF
    std::string name(name_len, '\0');
    is.read(name.data(), name_len);
    std::uint32_t rank = 0;
    require<IoError>(d::read_raw(is, rank), "truncated checkpoint: ", path);
    Shape shape(rank);
    for (auto& dim : shape) {
      std::uint64_t v = 0;
      require<IoError>(d::read_raw(is, v), "truncated checkpoint: ", path);
      dim = static_cast<std::size_t>(v);
    }
    Tensor* dst = nullptr;
    for (auto& [n, t] : params)
      if (n == name) { dst = t; break; }
    require<IoError>(dst != nullptr, "checkpoint tensor '", name, "' does not exist in model '",
                     model.model_id(), "' (", path, ")");
    require<IoError>(dst->shape == shape, "checkpoint tensor '", name, "' has shape ",
                     shape_str(shape), ", model expects ", shape_str(dst->shape), " (", path, ")");
    is.read(reinterpret_cast<char*>(dst->data.data()),
            static_cast<std::streamsize>(dst->data.size() * sizeof(double)));
    require<IoError>(static_cast<bool>(is), "truncated checkpoint payload for '", name, "': ", path);
    ++loaded;
  }
  require<IoError>(loaded == params.size(), "checkpoint ", path, " holds ", loaded,
                   " tensors, model has ", params.size());
}

inline bool parameters_equal(const ToyMllm& a, const ToyMllm& b) {
  auto pa = a.named_parameters();
  auto pb = b.named_parameters();
  if (pa.size() != pb.size()) return false;
  for (std::size_t i = 0; i < pa.size(); ++i)
    if (pa[i].first != pb[i].first || !(*pa[i].second == *pb[i].second)) return false;
  return true;
}

}  // namespace refusal::mllm
