#pragma once

// LMT tensor container. A file is a concatenation of records:
//
//   "LMT1"                       4 bytes
//   element type                 u8  (0 = f32, 1 = f64)
//   rank                         u8  (1..4)
//   dims                         rank x u32
//   payload                      product(dims) elements, row-major
//   name length                  u32
//   name                         UTF-8 bytes
//
// All multi-byte values are little-endian. Names are unique per file. A
// zero-byte file holds zero records.

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <iterator>
#include <set>
#include <string>
#include <string_view>
#include <variant>
#include <vector>

#include "leafmask/errors.hpp"
#include "leafmask/tensor.hpp"

namespace leafmask::io {

inline constexpr char kLmtMagic[4] = {'L', 'M', 'T', '1'};

enum class ElementType : std::uint8_t { f32 = 0, f64 = 1 };

struct LmtRecord {
  std::string name;
  std::variant<Tensor<float>, Tensor<double>> tensor;

  ElementType type() const { return tensor.index() == 0 ? ElementType::f32 : ElementType::f64; }
  const Shape& shape() const {
    return std::visit([](const auto& t) -> const Shape& { return t.shape(); }, tensor);
  }
  // Converts to the requested precision.
  template <class T>
  Tensor<T> as() const {
    return std::visit([](const auto& t) { return t.template cast<T>(); }, tensor);
  }
  bool operator==(const LmtRecord&) const = default;
};

namespace detail {

template <class U>
void put_le(std::vector<std::uint8_t>& out, U v) {
  for (std::size_t i = 0; i < sizeof(U); ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

template <class U>
U get_le(const std::uint8_t* p) {
  U v = 0;
  for (std::size_t i = 0; i < sizeof(U); ++i) v |= static_cast<U>(p[i]) << (8 * i);
  return v;
}

template <class T>
void put_elements(std::vector<std::uint8_t>& out, const Tensor<T>& t) {
  using Bits = std::conditional_t<sizeof(T) == 4, std::uint32_t, std::uint64_t>;
  for (T v : t.data()) put_le(out, std::bit_cast<Bits>(v));
}

class Reader {
 public:
  explicit Reader(std::span<const std::uint8_t> bytes) : bytes_(bytes) {}

  bool done() const { return pos_ == bytes_.size(); }
  std::size_t offset() const { return pos_; }

  const std::uint8_t* take(std::size_t n, const std::string& what) {
    if (bytes_.size() - pos_ < n)
      throw FormatError("lmt: truncated " + what + " at byte " + std::to_string(pos_) + " (need " +
                        std::to_string(n) + " bytes, " + std::to_string(bytes_.size() - pos_) + " left)");
    const auto* p = bytes_.data() + pos_;
    pos_ += n;
    return p;
  }

 private:
  std::span<const std::uint8_t> bytes_;
  std::size_t pos_ = 0;
};

template <class T>
Tensor<T> read_elements(Reader& r, const Shape& shape, const std::string& what) {
  using Bits = std::conditional_t<sizeof(T) == 4, std::uint32_t, std::uint64_t>;
  const std::size_t n = element_count(shape);
  if (n > (std::size_t{1} << 40) / sizeof(T)) throw FormatError("lmt: " + what + " is implausibly large");
  const std::uint8_t* p = r.take(n * sizeof(T), what);
  std::vector<T> data(n);
  for (std::size_t i = 0; i < n; ++i) data[i] = std::bit_cast<T>(get_le<Bits>(p + i * sizeof(T)));
  return Tensor<T>(shape, std::move(data));
}

}  // namespace detail

inline std::vector<std::uint8_t> encode_lmt(const std::vector<LmtRecord>& records) {
  std::vector<std::uint8_t> out;
  std::set<std::string> names;
  for (const auto& rec : records) {
    if (!names.insert(rec.name).second) throw FormatError("lmt: duplicate tensor name '" + rec.name + "'");
    const Shape& shape = rec.shape();
    check_shape(shape);
    out.insert(out.end(), std::begin(kLmtMagic), std::end(kLmtMagic));
    out.push_back(static_cast<std::uint8_t>(rec.type()));
    out.push_back(static_cast<std::uint8_t>(shape.size()));
    for (auto d : shape) {
      if (d > 0xffffffffu) throw FormatError("lmt: extent does not fit u32");
      detail::put_le(out, static_cast<std::uint32_t>(d));
    }
    std::visit([&](const auto& t) { detail::put_elements(out, t); }, rec.tensor);
    detail::put_le(out, static_cast<std::uint32_t>(rec.name.size()));
    out.insert(out.end(), rec.name.begin(), rec.name.end());
  }
  return out;
}

inline std::vector<LmtRecord> decode_lmt(std::span<const std::uint8_t> bytes) {
  detail::Reader r(bytes);
  std::vector<LmtRecord> out;
  std::set<std::string> names;
  for (std::size_t index = 0; !r.done(); ++index) {
    const std::size_t start = r.offset();
    const std::string rec = "record #" + std::to_string(index) + " (starting at byte " + std::to_string(start) + ")";
    const std::uint8_t* magic = r.take(4, rec + " magic");
    if (std::memcmp(magic, kLmtMagic, 4) != 0)
      throw FormatError("lmt: bad magic in " + rec);
    const std::uint8_t type = *r.take(1, rec + " element type");
    const std::uint8_t rank = *r.take(1, rec + " rank");
    if (type > 1)
      throw FormatError("lmt: unknown element type " + std::to_string(type) + " in " + rec + " at byte " +
                        std::to_string(start + 4));
    if (rank < 1 || rank > 4)
      throw FormatError("lmt: rank " + std::to_string(rank) + " out of range in " + rec + " at byte " +
                        std::to_string(start + 5));
    Shape shape(rank);
    const std::uint8_t* dims = r.take(4u * rank, rec + " dims");
    for (std::size_t i = 0; i < rank; ++i) {
      shape[i] = detail::get_le<std::uint32_t>(dims + 4 * i);
      if (shape[i] == 0)
        throw FormatError("lmt: zero extent in " + rec + " at byte " + std::to_string(start + 6 + 4 * i));
    }
    LmtRecord record;
    if (type == 0)
      record.tensor = detail::read_elements<float>(r, shape, rec + " payload");
    else
      record.tensor = detail::read_elements<double>(r, shape, rec + " payload");
    const auto name_len = detail::get_le<std::uint32_t>(r.take(4, rec + " name length"));
    const std::uint8_t* name = r.take(name_len, rec + " name");
    record.name.assign(reinterpret_cast<const char*>(name), name_len);
    if (!names.insert(record.name).second)
      throw FormatError("lmt: duplicate tensor name '" + record.name + "' in " + rec);
    out.push_back(std::move(record));
  }
  return out;
}

inline void write_lmt(const std::string& path, const std::vector<LmtRecord>& records) {
  const auto bytes = encode_lmt(records);
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw std::runtime_error("cannot open '" + path + "' for writing");
  f.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!f) throw std::runtime_error("failed writing '" + path + "'");
}

inline std::vector<std::uint8_t> read_file_bytes(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot open '" + path + "'");
  return {std::istreambuf_iterator<char>(f), std::istreambuf_iterator<char>()};
}

inline std::vector<LmtRecord> read_lmt(const std::string& path) {
  const auto bytes = read_file_bytes(path);
  try {
    return decode_lmt(bytes);
  } catch (const FormatError& e) {
    throw FormatError(path + ": " + e.what());
  }
}

inline const LmtRecord* find_record(const std::vector<LmtRecord>& records, std::string_view name) {
  for (const auto& r : records)
    if (r.name == name) return &r;
  return nullptr;
}

}  // namespace leafmask::io
