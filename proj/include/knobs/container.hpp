#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

#include "knobs/error.hpp"
#include "knobs/json_util.hpp"
#include "knobs/types.hpp"

namespace knobs {

// Binary model file: "KNOB", u32 version, u32 tensor count, tensors
// (u32 name length, name, u8 dtype, u32 ndim, u64 dims, f64 payload),
// u64 metadata length, metadata JSON. All integers and floats little-endian.
inline constexpr char kContainerMagic[4] = {'K', 'N', 'O', 'B'};
inline constexpr std::uint32_t kContainerVersion = 1;
inline constexpr std::uint8_t kDtypeF64 = 0;

struct Tensor {
  std::string name;
  std::vector<std::uint64_t> shape;
  std::vector<double> data;

  std::uint64_t elements() const {
    std::uint64_t n = 1;
    for (auto d : shape) n *= d;
    return n;
  }
};

struct Container {
  std::vector<Tensor> tensors;
  Json metadata = Json::object();

  const Tensor& get(std::string_view name) const {
    for (const auto& t : tensors)
      if (t.name == name) return t;
    throw Error(ErrorCode::format, "model file has no tensor '" + std::string(name) + "'");
  }
};

inline Tensor tensor_from(std::string name, const RowMatrix& m) {
  Tensor t{std::move(name), {static_cast<std::uint64_t>(m.rows()), static_cast<std::uint64_t>(m.cols())}, {}};
  t.data.assign(m.data(), m.data() + m.size());
  return t;
}

inline Tensor tensor_from(std::string name, const RowVector& v) {
  Tensor t{std::move(name), {static_cast<std::uint64_t>(v.size())}, {}};
  t.data.assign(v.data(), v.data() + v.size());
  return t;
}

inline RowMatrix to_matrix(const Tensor& t) {
  if (t.shape.size() != 2) throw Error(ErrorCode::format, "tensor '" + t.name + "' is not a matrix");
  RowMatrix m(static_cast<Eigen::Index>(t.shape[0]), static_cast<Eigen::Index>(t.shape[1]));
  std::memcpy(m.data(), t.data.data(), t.data.size() * sizeof(double));
  return m;
}

inline RowVector to_row_vector(const Tensor& t) {
  if (t.shape.size() != 1) throw Error(ErrorCode::format, "tensor '" + t.name + "' is not a vector");
  RowVector v(static_cast<Eigen::Index>(t.shape[0]));
  std::memcpy(v.data(), t.data.data(), t.data.size() * sizeof(double));
  return v;
}

namespace detail {

template <class T>
void put_le(std::string& out, T value) {
  for (std::size_t b = 0; b < sizeof(T); ++b) out.push_back(static_cast<char>((value >> (8 * b)) & 0xff));
}

class Reader {
 public:
  explicit Reader(std::string_view bytes) : bytes_(bytes) {}

  template <class T>
  T le() {
    need(sizeof(T));
    T value = 0;
    for (std::size_t b = 0; b < sizeof(T); ++b)
      value |= static_cast<T>(static_cast<unsigned char>(bytes_[pos_ + b])) << (8 * b);
    pos_ += sizeof(T);
    return value;
  }

  std::string_view take(std::uint64_t n) {
    need(n);
    const auto out = bytes_.substr(pos_, n);
    pos_ += n;
    return out;
  }

  bool done() const { return pos_ == bytes_.size(); }

 private:
  void need(std::uint64_t n) const {
    if (n > bytes_.size() - pos_) throw Error(ErrorCode::format, "model file is truncated");
  }

  std::string_view bytes_;
  std::size_t pos_ = 0;
};

}  // namespace detail

inline std::string serialize(const Container& c) {
  std::string out(kContainerMagic, 4);
  detail::put_le<std::uint32_t>(out, kContainerVersion);
  detail::put_le<std::uint32_t>(out, static_cast<std::uint32_t>(c.tensors.size()));
  for (const auto& t : c.tensors) {
    if (t.elements() != t.data.size())
      throw Error(ErrorCode::format, "tensor '" + t.name + "' shape does not match its data");
    detail::put_le<std::uint32_t>(out, static_cast<std::uint32_t>(t.name.size()));
    out += t.name;
    out.push_back(static_cast<char>(kDtypeF64));
    detail::put_le<std::uint32_t>(out, static_cast<std::uint32_t>(t.shape.size()));
    for (auto d : t.shape) detail::put_le<std::uint64_t>(out, d);
    for (double v : t.data) detail::put_le<std::uint64_t>(out, std::bit_cast<std::uint64_t>(v));
  }
  const std::string meta = c.metadata.dump();
  detail::put_le<std::uint64_t>(out, meta.size());
  out += meta;
  return out;
}

inline Container deserialize(std::string_view bytes) {
  detail::Reader in(bytes);
  if (in.take(4) != std::string_view(kContainerMagic, 4))
    throw Error(ErrorCode::format, "not a model file (bad magic)");
  const auto version = in.le<std::uint32_t>();
  if (version != kContainerVersion)
    throw Error(ErrorCode::format, "unsupported model file version " + std::to_string(version));
  Container c;
  const auto count = in.le<std::uint32_t>();
  for (std::uint32_t k = 0; k < count; ++k) {
    Tensor t;
    t.name = std::string(in.take(in.le<std::uint32_t>()));
    const auto dtype = static_cast<std::uint8_t>(in.take(1)[0]);
    if (dtype != kDtypeF64) throw Error(ErrorCode::format, "tensor '" + t.name + "' has unknown dtype");
    const auto ndim = in.le<std::uint32_t>();
    for (std::uint32_t d = 0; d < ndim; ++d) t.shape.push_back(in.le<std::uint64_t>());
    const auto n = t.elements();
    if (n > bytes.size() / 8) throw Error(ErrorCode::format, "tensor '" + t.name + "' overruns the file");
    t.data.resize(n);
    for (auto& v : t.data) v = std::bit_cast<double>(in.le<std::uint64_t>());
    c.tensors.push_back(std::move(t));
  }
  const std::string_view meta = in.take(in.le<std::uint64_t>());
  if (!in.done()) throw Error(ErrorCode::format, "trailing bytes after metadata");
  try {
    c.metadata = Json::parse(meta);
  } catch (const Json::exception& e) {
    throw Error(ErrorCode::format, std::string("model metadata: ") + e.what());
  }
  return c;
}

inline void save_container(const std::filesystem::path& path, const Container& c) {
  write_text(path, serialize(c));
}

inline Container load_container(const std::filesystem::path& path) {
  if (!std::filesystem::exists(path))
    throw Error(ErrorCode::missing_input, "missing model file " + path.string());
  return deserialize(read_file(path));
}

}  // namespace knobs
