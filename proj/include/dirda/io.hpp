#pragma once

// File plumbing shared by the dataset cache, checkpoints and figure output.

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "dirda/types.hpp"

namespace dirda::io {

namespace fs = std::filesystem;
using nlohmann::json;

/// Write-to-temp-then-rename; readers never observe a partial file.
void write_atomic(const fs::path& path, std::string_view bytes);
std::string read_file(const fs::path& path);

std::string sha256_hex(std::string_view bytes);
std::string sha256_file(const fs::path& path);

void write_json(const fs::path& path, const json& j);
json read_json(const fs::path& path);

/// NumPy .npy (format 1.0, little endian, C order). float32/float64/uint8/int64.
std::string encode_npy(const torch::Tensor& t);
void write_npy(const fs::path& path, const torch::Tensor& t);
torch::Tensor read_npy(const fs::path& path);

/// 8-bit RGB raster, row-major, used for figure panels.
struct Rgb {
  std::uint8_t r = 0, g = 0, b = 0;
};

struct Raster {
  std::int64_t height = 0;
  std::int64_t width = 0;
  std::vector<Rgb> pixels;

  Raster() = default;
  Raster(std::int64_t h, std::int64_t w, Rgb fill = {});
  Rgb& at(std::int64_t y, std::int64_t x) { return pixels[static_cast<std::size_t>(y * width + x)]; }
  [[nodiscard]] const Rgb& at(std::int64_t y, std::int64_t x) const {
    return pixels[static_cast<std::size_t>(y * width + x)];
  }
};

/// Grayscale rendering of a 2D tensor, linearly mapped from [lo, hi].
Raster render_gray(const torch::Tensor& img, double lo, double hi, int scale = 1);
/// Heat map of a nonnegative 2D tensor over [0, hi]; zero maps to black.
Raster render_heat(const torch::Tensor& values, double hi, int scale = 1);
/// Binary mask in a flat colour.
Raster render_mask(const torch::Tensor& mask, Rgb colour, int scale = 1);

/// Horizontal concatenation with a `gap`-pixel separator.
Raster hstack(std::span<const Raster> panels, int gap = 2);
Raster vstack(std::span<const Raster> rows, int gap = 2);

/// Tiny 3x5 bitmap font for digits, '.', '=', and a few letters.
void draw_text(Raster& r, std::int64_t y, std::int64_t x, std::string_view text, Rgb colour,
               int scale = 1);

void write_ppm(const fs::path& path, const Raster& r);
Raster read_ppm(const fs::path& path);

}  // namespace dirda::io
