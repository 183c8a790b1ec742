#include "sgma/image_io.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <string>

#include "sgma/serialize.hpp"

namespace sgma {

unsigned char to_byte(double v) {
  const double scaled = std::floor(std::clamp(v, 0.0, 1.0) * 255.0 + 0.5);
  return static_cast<unsigned char>(scaled);
}

void write_pgm(const std::filesystem::path& path, std::span<const double> values, std::size_t height, std::size_t width) {
  if (values.size() != height * width) throw std::invalid_argument("write_pgm: buffer size does not match image size");
  std::string out = "P5\n" + std::to_string(width) + " " + std::to_string(height) + "\n255\n";
  for (double v : values) out.push_back(static_cast<char>(to_byte(v)));
  write_file_atomic(path, out);
}

void write_ppm(const std::filesystem::path& path, std::span<const double> planes, std::size_t height, std::size_t width) {
  const std::size_t plane = height * width;
  if (planes.size() != 3 * plane) throw std::invalid_argument("write_ppm: buffer must hold three planes");
  std::string out = "P6\n" + std::to_string(width) + " " + std::to_string(height) + "\n255\n";
  for (std::size_t p = 0; p < plane; ++p) {
    for (std::size_t c = 0; c < 3; ++c) out.push_back(static_cast<char>(to_byte(planes[c * plane + p])));
  }
  write_file_atomic(path, out);
}

}  // namespace sgma
