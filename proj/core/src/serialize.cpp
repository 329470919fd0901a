#include "grl/serialize.hpp"

#include <array>
#include <bit>
#include <cstring>
#include <fstream>
#include <istream>
#include <ostream>
#include <sstream>

namespace grl::io {

namespace {

template <typename U>
void put_le(std::ostream& os, U v) {
  std::array<char, sizeof(U)> b;
  for (std::size_t i = 0; i < sizeof(U); ++i) b[i] = static_cast<char>((v >> (8 * i)) & 0xFF);
  os.write(b.data(), b.size());
}

template <typename U>
U get_le(std::istream& is) {
  std::array<unsigned char, sizeof(U)> b;
  is.read(reinterpret_cast<char*>(b.data()), b.size());
  if (!is) throw IoError("unexpected end of stream");
  U v = 0;
  for (std::size_t i = 0; i < sizeof(U); ++i) v |= static_cast<U>(b[i]) << (8 * i);
  return v;
}

void expect_magic(std::istream& is, const char* magic) {
  char m[4];
  is.read(m, 4);
  if (!is || std::memcmp(m, magic, 4) != 0) {
    throw IoError(std::string("bad magic, expected ") + magic);
  }
}

template <typename T>
Tensor<T> read_payload(std::istream& is, Shape shape) {
  Tensor<T> t(std::move(shape));
  using Bits = std::conditional_t<sizeof(T) == 4, std::uint32_t, std::uint64_t>;
  for (auto& v : t.data()) v = std::bit_cast<T>(get_le<Bits>(is));
  return t;
}

}  // namespace

template <typename T>
void write_tensor(std::ostream& os, const Tensor<T>& t) {
  os.write("GRLT", 4);
  put_le<std::uint8_t>(os, kTensorVersion);
  put_le<std::uint8_t>(os, static_cast<std::uint8_t>(dtype_of<T>()));
  put_le<std::uint8_t>(os, static_cast<std::uint8_t>(t.rank()));
  for (std::size_t e : t.shape()) put_le<std::uint64_t>(os, e);
  using Bits = std::conditional_t<sizeof(T) == 4, std::uint32_t, std::uint64_t>;
  for (T v : t.data()) put_le<Bits>(os, std::bit_cast<Bits>(v));
}

AnyTensor read_tensor(std::istream& is) {
  expect_magic(is, "GRLT");
  const auto version = get_le<std::uint8_t>(is);
  if (version != kTensorVersion) throw IoError("unsupported tensor version " + std::to_string(version));
  const auto dtype = get_le<std::uint8_t>(is);
  const auto rank = get_le<std::uint8_t>(is);
  Shape shape(rank);
  for (auto& e : shape) {
    e = static_cast<std::size_t>(get_le<std::uint64_t>(is));
    if (e == 0) throw IoError("tensor record with zero extent");
  }
  switch (static_cast<DType>(dtype)) {
    case DType::f32:
      return read_payload<float>(is, std::move(shape));
    case DType::f64:
      return read_payload<double>(is, std::move(shape));
  }
  throw IoError("unknown dtype code " + std::to_string(dtype));
}

template <typename T>
Tensor<T> read_tensor_as(std::istream& is) {
  AnyTensor any = read_tensor(is);
  return std::visit([](auto&& t) { return t.template cast<T>(); }, any);
}

template <typename T>
void write_checkpoint(std::ostream& os, const NamedTensors<T>& entries) {
  os.write("GRLW", 4);
  put_le<std::uint8_t>(os, kCheckpointVersion);
  put_le<std::uint32_t>(os, static_cast<std::uint32_t>(entries.size()));
  for (const auto& [name, t] : entries) {
    if (name.size() > 0xFFFF) throw IoError("parameter name too long: " + name);
    put_le<std::uint16_t>(os, static_cast<std::uint16_t>(name.size()));
    os.write(name.data(), static_cast<std::streamsize>(name.size()));
    write_tensor(os, t);
  }
}

template <typename T>
NamedTensors<T> read_checkpoint(std::istream& is) {
  expect_magic(is, "GRLW");
  const auto version = get_le<std::uint8_t>(is);
  if (version != kCheckpointVersion) {
    throw IoError("unsupported checkpoint version " + std::to_string(version));
  }
  const auto count = get_le<std::uint32_t>(is);
  NamedTensors<T> out;
  out.reserve(count);
  for (std::uint32_t i = 0; i < count; ++i) {
    const auto len = get_le<std::uint16_t>(is);
    std::string name(len, '\0');
    is.read(name.data(), len);
    if (!is) throw IoError("truncated parameter name");
    out.emplace_back(std::move(name), read_tensor_as<T>(is));
  }
  return out;
}

void atomic_write(const std::filesystem::path& path, std::string_view bytes) {
  std::filesystem::path tmp = path;
  tmp += ".tmp";
  {
    std::ofstream f(tmp, std::ios::binary | std::ios::trunc);
    if (!f) throw IoError("cannot open " + tmp.string() + " for writing");
    f.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    f.flush();
    if (!f) throw IoError("write failed for " + tmp.string());
  }
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec) {
    std::filesystem::remove(tmp);
    throw IoError("cannot rename " + tmp.string() + " to " + path.string() + ": " + ec.message());
  }
}

std::string read_file(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open " + path.string());
  std::ostringstream ss;
  ss << f.rdbuf();
  return ss.str();
}

template void write_tensor(std::ostream&, const Tensor<float>&);
template void write_tensor(std::ostream&, const Tensor<double>&);
template Tensor<float> read_tensor_as(std::istream&);
template Tensor<double> read_tensor_as(std::istream&);
template void write_checkpoint(std::ostream&, const NamedTensors<float>&);
template void write_checkpoint(std::ostream&, const NamedTensors<double>&);
template NamedTensors<float> read_checkpoint(std::istream&);
template NamedTensors<double> read_checkpoint(std::istream&);

}  // namespace grl::io
