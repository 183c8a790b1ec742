#pragma once

#include <filesystem>
#include <span>

namespace sgma {

/// Maps [0,1] to 0..255 by round-half-up of v * 255, clamping out-of-range input.
unsigned char to_byte(double v);

/// Binary (P5) 8-bit grayscale image from a row-major [height, width] buffer.
void write_pgm(const std::filesystem::path& path, std::span<const double> values, std::size_t height, std::size_t width);

/// Binary (P6) RGB image from a planar [3, height, width] buffer.
void write_ppm(const std::filesystem::path& path, std::span<const double> planes, std::size_t height, std::size_t width);

}  // namespace sgma
