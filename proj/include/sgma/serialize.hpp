#pragma once

#include <filesystem>
#include <iosfwd>
#include <stdexcept>

#include "sgma/tensor.hpp"

namespace sgma {

class FormatError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

inline constexpr std::uint32_t kTensorFormatVersion = 1;

// Blob layout: "SGMT" | u32 version | u32 rank | u64 extents[rank] | f64 data[],
// all little-endian.
void write_tensor(std::ostream& out, const Tensor& t);
Tensor read_tensor(std::istream& in);

void save_tensor(const std::filesystem::path& path, const Tensor& t);
Tensor load_tensor(const std::filesystem::path& path);

/// Writes `contents` to a sibling temp file and renames it over `path`.
void write_file_atomic(const std::filesystem::path& path, const std::string& contents);

}  // namespace sgma
