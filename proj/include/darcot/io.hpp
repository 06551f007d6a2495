#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <variant>
#include <vector>

#include "darcot/tensor.hpp"

namespace darcot::io {

// --- tensor files -----------------------------------------------------------
//
// Binary layout (little-endian):
//   magic "FRTN" | version u32 (=1) | dtype u8 (0=f32, 1=f64) | rank u32 |
//   dims rank*u64 | payload row-major scalars
// Readers reject wrong magic/version/dtype and any size mismatch.

enum class Dtype : uint8_t { F32 = 0, F64 = 1 };

template <class S>
constexpr Dtype dtype_of() {
  if constexpr (std::is_same_v<S, float>) return Dtype::F32;
  else return Dtype::F64;
}

// All file writes in this project are atomic: data goes to a temp file in
// the same directory which is then renamed over the target.
void atomic_write_bytes(const std::string& path, const std::string& bytes);

void write_tensor(const std::string& path, const Tensor<float>& t);
void write_tensor(const std::string& path, const Tensor<double>& t);

std::string tensor_file_bytes(const Tensor<float>& t);
std::string tensor_file_bytes(const Tensor<double>& t);

using AnyTensor = std::variant<Tensor<float>, Tensor<double>>;

AnyTensor read_tensor_any(const std::string& path);
// Parses one TensorFile record starting at `offset` inside `bytes`;
// advances `offset` past it.
AnyTensor parse_tensor_record(const std::string& bytes, size_t& offset,
                              const std::string& what);

// Strict read: stored dtype must match S.
template <class S>
Tensor<S> read_tensor(const std::string& path) {
  AnyTensor t = read_tensor_any(path);
  if (!std::holds_alternative<Tensor<S>>(t))
    throw FormatError("tensor file " + path + ": dtype does not match the requested scalar type");
  return std::get<Tensor<S>>(t);
}

template <class To, class From>
Tensor<To> cast_tensor(const Tensor<From>& t) {
  Tensor<To> out = Tensor<To>::zeros(t.shape());
  auto src = t.data();
  auto dst = out.mut_data();
  for (size_t i = 0; i < src.size(); ++i) dst[i] = To(src[i]);
  return out;
}

// Converting read: loads whichever dtype is stored and casts to S.
template <class S>
Tensor<S> read_tensor_cast(const std::string& path) {
  AnyTensor t = read_tensor_any(path);
  if (std::holds_alternative<Tensor<S>>(t)) return std::get<Tensor<S>>(t);
  if constexpr (std::is_same_v<S, float>)
    return cast_tensor<float>(std::get<Tensor<double>>(t));
  else
    return cast_tensor<double>(std::get<Tensor<float>>(t));
}

// --- checkpoints -------------------------------------------------------------
//
// Layout: magic "FRCK" | version u32 (=1) | header_len u64 | header JSON |
// blob. The header carries {format_version, step, config_hash, meta,
// tensors:[{name, offset, size}]} where offsets index TensorFile records
// inside the blob. Every named tensor round-trips bitwise.

struct Checkpoint {
  int64_t step = 0;
  std::string config_hash;                      // hex string
  std::map<std::string, std::string> meta;      // small auxiliary entries
  std::vector<std::pair<std::string, AnyTensor>> tensors;

  const AnyTensor* find(const std::string& name) const {
    for (const auto& [n, t] : tensors)
      if (n == name) return &t;
    return nullptr;
  }
};

void write_checkpoint(const std::string& path, const Checkpoint& ckpt);
Checkpoint read_checkpoint(const std::string& path);

std::string read_file_bytes(const std::string& path);

}  // namespace darcot::io
