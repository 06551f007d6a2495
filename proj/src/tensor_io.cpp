#include "darcot/io.hpp"

#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>

#include <json.hpp>

namespace darcot::io {

namespace {

namespace fs = std::filesystem;
using nlohmann::json;

void put_u32(std::string& out, uint32_t v) {
  char b[4];
  for (int i = 0; i < 4; ++i) b[i] = char((v >> (8 * i)) & 0xff);
  out.append(b, 4);
}

void put_u64(std::string& out, uint64_t v) {
  char b[8];
  for (int i = 0; i < 8; ++i) b[i] = char((v >> (8 * i)) & 0xff);
  out.append(b, 8);
}

uint32_t get_u32(const std::string& s, size_t& off, const std::string& what,
                 const char* field) {
  if (off + 4 > s.size()) throw FormatError(what + ": truncated at field " + field);
  uint32_t v = 0;
  for (int i = 0; i < 4; ++i) v |= uint32_t(uint8_t(s[off + i])) << (8 * i);
  off += 4;
  return v;
}

uint64_t get_u64(const std::string& s, size_t& off, const std::string& what,
                 const char* field) {
  if (off + 8 > s.size()) throw FormatError(what + ": truncated at field " + field);
  uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= uint64_t(uint8_t(s[off + i])) << (8 * i);
  off += 8;
  return v;
}

template <class S>
std::string tensor_bytes_impl(const Tensor<S>& t) {
  std::string out;
  out.reserve(17 + t.shape().size() * 8 + size_t(t.numel()) * sizeof(S));
  out += "FRTN";
  put_u32(out, 1);
  out.push_back(char(uint8_t(dtype_of<S>())));
  put_u32(out, uint32_t(t.rank()));
  for (int64_t d : t.shape()) put_u64(out, uint64_t(d));
  static_assert(sizeof(S) == 4 || sizeof(S) == 8);
  const char* raw = reinterpret_cast<const char*>(t.data().data());
  out.append(raw, size_t(t.numel()) * sizeof(S));  // little-endian host assumed
  return out;
}

template <class S>
Tensor<S> payload_to_tensor(const std::string& s, size_t& off, const Shape& shape,
                            const std::string& what) {
  int64_t n = shape_numel(shape);
  size_t bytes = size_t(n) * sizeof(S);
  if (off + bytes > s.size()) throw FormatError(what + ": truncated at field payload");
  std::vector<S> values(static_cast<size_t>(n));
  std::memcpy(values.data(), s.data() + off, bytes);
  off += bytes;
  return Tensor<S>::from(shape, std::move(values));
}

}  // namespace

std::string tensor_file_bytes(const Tensor<float>& t) { return tensor_bytes_impl(t); }
std::string tensor_file_bytes(const Tensor<double>& t) { return tensor_bytes_impl(t); }

void atomic_write_bytes(const std::string& path, const std::string& bytes) {
  fs::path target(path);
  if (target.has_parent_path()) fs::create_directories(target.parent_path());
  fs::path tmp = target;
  tmp += ".tmp";
  {
    std::ofstream f(tmp, std::ios::binary | std::ios::trunc);
    if (!f) fail_contract("cannot open for writing: ", tmp.string());
    f.write(bytes.data(), std::streamsize(bytes.size()));
    f.flush();
    if (!f) fail_contract("short write: ", tmp.string());
  }
  fs::rename(tmp, target);
}

void write_tensor(const std::string& path, const Tensor<float>& t) {
  atomic_write_bytes(path, tensor_file_bytes(t));
}
void write_tensor(const std::string& path, const Tensor<double>& t) {
  atomic_write_bytes(path, tensor_file_bytes(t));
}

std::string read_file_bytes(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw FormatError("cannot open file: " + path);
  std::string bytes((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  return bytes;
}

AnyTensor parse_tensor_record(const std::string& s, size_t& off, const std::string& what) {
  if (off + 4 > s.size()) throw FormatError(what + ": truncated at field magic");
  if (s.compare(off, 4, "FRTN") != 0)
    throw FormatError(what + ": bad magic (expected FRTN)");
  off += 4;
  uint32_t version = get_u32(s, off, what, "version");
  if (version != 1)
    throw FormatError(what + ": unsupported version " + std::to_string(version));
  if (off + 1 > s.size()) throw FormatError(what + ": truncated at field dtype");
  uint8_t dtype = uint8_t(s[off]);
  off += 1;
  if (dtype > 1) throw FormatError(what + ": unknown dtype " + std::to_string(dtype));
  uint32_t rank = get_u32(s, off, what, "rank");
  if (rank > 8) throw FormatError(what + ": implausible rank " + std::to_string(rank));
  Shape shape(rank);
  for (uint32_t i = 0; i < rank; ++i)
    shape[i] = int64_t(get_u64(s, off, what, "dims"));
  if (dtype == uint8_t(Dtype::F32)) return payload_to_tensor<float>(s, off, shape, what);
  return payload_to_tensor<double>(s, off, shape, what);
}

AnyTensor read_tensor_any(const std::string& path) {
  std::string bytes = read_file_bytes(path);
  size_t off = 0;
  AnyTensor t = parse_tensor_record(bytes, off, "tensor file " + path);
  if (off != bytes.size())
    throw FormatError("tensor file " + path + ": trailing bytes after payload");
  return t;
}

void write_checkpoint(const std::string& path, const Checkpoint& ckpt) {
  std::string blob;
  json index = json::array();
  for (const auto& [name, t] : ckpt.tensors) {
    std::string rec = std::visit([](const auto& x) { return tensor_file_bytes(x); }, t);
    index.push_back({{"name", name}, {"offset", blob.size()}, {"size", rec.size()}});
    blob += rec;
  }
  json header = {{"format_version", 1},
                 {"step", ckpt.step},
                 {"config_hash", ckpt.config_hash},
                 {"meta", ckpt.meta},
                 {"tensors", index}};
  std::string hdr = header.dump();
  std::string out;
  out += "FRCK";
  {
    char b[4] = {1, 0, 0, 0};
    out.append(b, 4);
  }
  {
    uint64_t hl = hdr.size();
    char b[8];
    for (int i = 0; i < 8; ++i) b[i] = char((hl >> (8 * i)) & 0xff);
    out.append(b, 8);
  }
  out += hdr;
  out += blob;
  atomic_write_bytes(path, out);
}

Checkpoint read_checkpoint(const std::string& path) {
  const std::string what = "checkpoint " + path;
  std::string s = read_file_bytes(path);
  size_t off = 0;
  if (s.size() < 4 || s.compare(0, 4, "FRCK") != 0)
    throw FormatError(what + ": bad magic (expected FRCK)");
  off = 4;
  uint32_t version = get_u32(s, off, what, "version");
  if (version != 1)
    throw FormatError(what + ": unsupported version " + std::to_string(version));
  uint64_t hl = get_u64(s, off, what, "header_len");
  if (off + hl > s.size()) throw FormatError(what + ": truncated at field header");
  json header;
  try {
    header = json::parse(s.substr(off, hl));
  } catch (const json::exception& e) {
    throw FormatError(what + ": bad header JSON: " + e.what());
  }
  off += hl;
  const size_t blob_start = off;

  Checkpoint out;
  try {
    out.step = header.at("step").get<int64_t>();
    out.config_hash = header.at("config_hash").get<std::string>();
    out.meta = header.at("meta").get<std::map<std::string, std::string>>();
    for (const auto& e : header.at("tensors")) {
      std::string name = e.at("name").get<std::string>();
      size_t rec_off = blob_start + e.at("offset").get<size_t>();
      AnyTensor t = parse_tensor_record(s, rec_off, what + " tensor " + name);
      out.tensors.emplace_back(std::move(name), std::move(t));
    }
  } catch (const json::exception& e) {
    throw FormatError(what + ": malformed header: " + e.what());
  }
  return out;
}

}  // namespace darcot::io
