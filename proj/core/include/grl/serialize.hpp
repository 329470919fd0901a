#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <string>
#include <string_view>
#include <utility>
#include <variant>
#include <vector>

#include "grl/tensor.hpp"

// Binary containers, all little-endian:
//
//   tensor record     "GRLT" u8 version=1, u8 dtype (0=f32, 1=f64), u8 rank,
//                     u64 extents[rank], raw values
//   checkpoint        "GRLW" u8 version=1, u32 count, then per entry
//                     u16 name length, UTF-8 name, tensor record
namespace grl::io {

inline constexpr std::uint8_t kTensorVersion = 1;
inline constexpr std::uint8_t kCheckpointVersion = 1;

using AnyTensor = std::variant<Tensor<float>, Tensor<double>>;

template <typename T>
void write_tensor(std::ostream& os, const Tensor<T>& t);

AnyTensor read_tensor(std::istream& is);

// Reads a record and converts it to T if the stored dtype differs.
template <typename T>
Tensor<T> read_tensor_as(std::istream& is);

template <typename T>
using NamedTensors = std::vector<std::pair<std::string, Tensor<T>>>;

template <typename T>
void write_checkpoint(std::ostream& os, const NamedTensors<T>& entries);

template <typename T>
NamedTensors<T> read_checkpoint(std::istream& is);

// Writes bytes to a sibling temporary file, then renames it over path.
void atomic_write(const std::filesystem::path& path, std::string_view bytes);

std::string read_file(const std::filesystem::path& path);

}  // namespace grl::io
