#include "sgma/serialize.hpp"

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <sstream>

namespace sgma {

namespace {

static_assert(std::endian::native == std::endian::little, "blob I/O assumes a little-endian host");

template <typename T>
void put(std::ostream& out, T value) {
  out.write(reinterpret_cast<const char*>(&value), sizeof(T));
}

template <typename T>
T get(std::istream& in, const char* what) {
  T value{};
  if (!in.read(reinterpret_cast<char*>(&value), sizeof(T))) {
    throw FormatError(std::string("tensor blob truncated while reading ") + what);
  }
  return value;
}

}  // namespace

void write_tensor(std::ostream& out, const Tensor& t) {
  out.write("SGMT", 4);
  put<std::uint32_t>(out, kTensorFormatVersion);
  put<std::uint32_t>(out, static_cast<std::uint32_t>(t.rank()));
  for (auto e : t.shape()) put<std::uint64_t>(out, e);
  out.write(reinterpret_cast<const char*>(t.data().data()), static_cast<std::streamsize>(t.numel() * sizeof(double)));
  if (!out) throw FormatError("failed writing tensor blob");
}

Tensor read_tensor(std::istream& in) {
  char magic[4];
  if (!in.read(magic, 4)) throw FormatError("tensor blob truncated while reading magic");
  if (std::memcmp(magic, "SGMT", 4) != 0) throw FormatError("bad tensor blob magic");
  const auto version = get<std::uint32_t>(in, "version");
  if (version != kTensorFormatVersion) {
    throw FormatError("unsupported tensor blob version " + std::to_string(version));
  }
  const auto rank = get<std::uint32_t>(in, "rank");
  if (rank > 8) throw FormatError("implausible tensor rank " + std::to_string(rank));
  Shape shape(rank);
  for (auto& e : shape) {
    e = get<std::uint64_t>(in, "extent");
    if (e == 0 || e > (1ull << 32)) throw FormatError("corrupt tensor extent");
  }
  std::vector<double> values(shape_numel(shape));
  if (!in.read(reinterpret_cast<char*>(values.data()), static_cast<std::streamsize>(values.size() * sizeof(double)))) {
    throw FormatError("tensor blob truncated while reading data");
  }
  try {
    return Tensor::from(std::move(shape), std::move(values));
  } catch (const NonFiniteError&) {
    throw FormatError("tensor blob contains non-finite values");
  }
}

void save_tensor(const std::filesystem::path& path, const Tensor& t) {
  std::ostringstream os(std::ios::binary);
  write_tensor(os, t);
  write_file_atomic(path, os.str());
}

Tensor load_tensor(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open tensor blob " + path.string());
  Tensor t = read_tensor(in);
  if (in.peek() != std::char_traits<char>::eof()) throw FormatError("trailing bytes after tensor blob " + path.string());
  return t;
}

void write_file_atomic(const std::filesystem::path& path, const std::string& contents) {
  auto tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("cannot write " + tmp.string());
    out.write(contents.data(), static_cast<std::streamsize>(contents.size()));
    if (!out) throw std::runtime_error("failed writing " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

}  // namespace sgma
