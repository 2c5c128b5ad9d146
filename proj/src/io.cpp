#include "dirda/io.hpp"

#include <array>
#include <cstring>
#include <fstream>
#include <map>
#include <sstream>

#include <openssl/evp.h>

namespace dirda::io {

void write_atomic(const fs::path& path, std::string_view bytes) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  auto tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw MissingInputError("cannot open for writing: " + tmp.string());
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw std::runtime_error("write failed: " + tmp.string());
  }
  fs::rename(tmp, path);
}

std::string read_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw MissingInputError("cannot open: " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return std::move(ss).str();
}

std::string sha256_hex(std::string_view bytes) {
  std::array<unsigned char, EVP_MAX_MD_SIZE> digest{};
  unsigned int len = 0;
  EVP_Digest(bytes.data(), bytes.size(), digest.data(), &len, EVP_sha256(), nullptr);
  static constexpr char hex[] = "0123456789abcdef";
  std::string out;
  out.reserve(2 * len);
  for (unsigned int i = 0; i < len; ++i) {
    out.push_back(hex[digest[i] >> 4]);
    out.push_back(hex[digest[i] & 0xf]);
  }
  return out;
}

std::string sha256_file(const fs::path& path) { return sha256_hex(read_file(path)); }

void write_json(const fs::path& path, const json& j) { write_atomic(path, j.dump(2) + "\n"); }

json read_json(const fs::path& path) {
  try {
    return json::parse(read_file(path));
  } catch (const json::parse_error& e) {
    throw ConfigError(path.string() + ": " + e.what());
  }
}

namespace {

struct NpyType {
  torch::ScalarType scalar;
  const char* descr;
};

constexpr std::array<NpyType, 5> kNpyTypes{{
    {torch::kFloat32, "<f4"},
    {torch::kFloat64, "<f8"},
    {torch::kUInt8, "|u1"},
    {torch::kInt64, "<i8"},
    {torch::kInt32, "<i4"},
}};

}  // namespace

std::string encode_npy(const torch::Tensor& tensor) {
  auto t = tensor.detach().cpu().contiguous();
  const char* descr = nullptr;
  for (const auto& nt : kNpyTypes) {
    if (nt.scalar == t.scalar_type()) descr = nt.descr;
  }
  require(descr != nullptr, "unsupported dtype for .npy export");

  std::string shape = "(";
  for (auto s : t.sizes()) shape += std::to_string(s) + ", ";
  if (t.dim() > 1) shape.resize(shape.size() - 2);
  if (t.dim() == 1) shape.resize(shape.size() - 1);
  shape += ")";

  std::string header = "{'descr': '" + std::string(descr) + "', 'fortran_order': False, 'shape': " +
                       shape + ", }";
  const std::size_t preamble = 10;
  const std::size_t pad = 64 - (preamble + header.size() + 1) % 64;
  header.append(pad % 64, ' ');
  header.push_back('\n');

  std::string out("\x93NUMPY\x01\x00", 8);
  const auto hlen = static_cast<std::uint16_t>(header.size());
  out.push_back(static_cast<char>(hlen & 0xff));
  out.push_back(static_cast<char>(hlen >> 8));
  out += header;
  out.append(static_cast<const char*>(t.data_ptr()), t.numel() * t.element_size());
  return out;
}

void write_npy(const fs::path& path, const torch::Tensor& t) { write_atomic(path, encode_npy(t)); }

torch::Tensor read_npy(const fs::path& path) {
  const auto bytes = read_file(path);
  if (bytes.size() < 10 || bytes.compare(0, 6, "\x93NUMPY") != 0) {
    throw ConfigError("not a .npy file: " + path.string());
  }
  const std::size_t hlen = static_cast<unsigned char>(bytes[8]) |
                           (static_cast<std::size_t>(static_cast<unsigned char>(bytes[9])) << 8);
  const auto header = bytes.substr(10, hlen);
  const NpyType* type = nullptr;
  for (const auto& nt : kNpyTypes) {
    if (header.find(nt.descr) != std::string::npos) type = &nt;
  }
  if (type == nullptr || header.find("'fortran_order': False") == std::string::npos) {
    throw ConfigError("unsupported .npy layout: " + path.string());
  }
  const auto open = header.find('(', header.find("'shape'"));
  const auto close = header.find(')', open);
  std::vector<std::int64_t> shape;
  std::stringstream ss(header.substr(open + 1, close - open - 1));
  std::string tok;
  while (std::getline(ss, tok, ',')) {
    if (tok.find_first_not_of(' ') != std::string::npos) shape.push_back(std::stoll(tok));
  }
  auto t = torch::empty(shape, torch::TensorOptions().dtype(type->scalar));
  const std::size_t nbytes = t.numel() * t.element_size();
  if (bytes.size() < 10 + hlen + nbytes) throw ConfigError("truncated .npy: " + path.string());
  std::memcpy(t.data_ptr(), bytes.data() + 10 + hlen, nbytes);
  return t;
}

Raster::Raster(std::int64_t h, std::int64_t w, Rgb fill)
    : height(h), width(w), pixels(static_cast<std::size_t>(h * w), fill) {}

namespace {

std::uint8_t to_byte(double v) {
  return static_cast<std::uint8_t>(std::clamp(v, 0.0, 1.0) * 255.0 + 0.5);
}

template <typename F>
Raster render(const torch::Tensor& t, int scale, F&& colour) {
  auto img = t.detach().to(torch::kFloat64).contiguous();
  require(img.dim() == 2, "figure panels are 2D");
  const auto h = img.size(0), w = img.size(1);
  auto acc = img.accessor<double, 2>();
  Raster r(h * scale, w * scale);
  for (std::int64_t y = 0; y < r.height; ++y) {
    for (std::int64_t x = 0; x < r.width; ++x) r.at(y, x) = colour(acc[y / scale][x / scale]);
  }
  return r;
}

}  // namespace

Raster render_gray(const torch::Tensor& img, double lo, double hi, int scale) {
  const double span = hi > lo ? hi - lo : 1.0;
  return render(img, scale, [&](double v) {
    auto b = to_byte((v - lo) / span);
    return Rgb{b, b, b};
  });
}

Raster render_heat(const torch::Tensor& values, double hi, int scale) {
  // black -> red -> yellow -> white
  return render(values, scale, [&](double v) {
    const double s = hi > 0 ? std::clamp(v / hi, 0.0, 1.0) : 0.0;
    return Rgb{to_byte(3 * s), to_byte(3 * s - 1), to_byte(3 * s - 2)};
  });
}

Raster render_mask(const torch::Tensor& mask, Rgb colour, int scale) {
  return render(mask, scale, [&](double v) { return v > 0.5 ? colour : Rgb{}; });
}

Raster hstack(std::span<const Raster> panels, int gap) {
  std::int64_t h = 0, w = 0;
  for (const auto& p : panels) {
    h = std::max(h, p.height);
    w += p.width;
  }
  if (!panels.empty()) w += gap * static_cast<std::int64_t>(panels.size() - 1);
  Raster out(h, w, Rgb{255, 255, 255});
  std::int64_t x0 = 0;
  for (const auto& p : panels) {
    for (std::int64_t y = 0; y < p.height; ++y)
      for (std::int64_t x = 0; x < p.width; ++x) out.at(y, x0 + x) = p.at(y, x);
    x0 += p.width + gap;
  }
  return out;
}

Raster vstack(std::span<const Raster> rows, int gap) {
  std::int64_t h = 0, w = 0;
  for (const auto& p : rows) {
    w = std::max(w, p.width);
    h += p.height;
  }
  if (!rows.empty()) h += gap * static_cast<std::int64_t>(rows.size() - 1);
  Raster out(h, w, Rgb{255, 255, 255});
  std::int64_t y0 = 0;
  for (const auto& p : rows) {
    for (std::int64_t y = 0; y < p.height; ++y)
      for (std::int64_t x = 0; x < p.width; ++x) out.at(y0 + y, x) = p.at(y, x);
    y0 += p.height + gap;
  }
  return out;
}

void draw_text(Raster& r, std::int64_t y, std::int64_t x, std::string_view text, Rgb colour,
               int scale) {
  // 3x5 glyphs, one row per 3-bit nibble, top row first
  static const std::map<char, std::array<std::uint8_t, 5>> glyphs{
      {'0', {7, 5, 5, 5, 7}}, {'1', {2, 6, 2, 2, 7}}, {'2', {7, 1, 7, 4, 7}},
      {'3', {7, 1, 7, 1, 7}}, {'4', {5, 5, 7, 1, 1}}, {'5', {7, 4, 7, 1, 7}},
      {'6', {7, 4, 7, 5, 7}}, {'7', {7, 1, 1, 1, 1}}, {'8', {7, 5, 7, 5, 7}},
      {'9', {7, 5, 7, 1, 7}}, {'.', {0, 0, 0, 0, 2}}, {'=', {0, 7, 0, 7, 0}},
      {'-', {0, 0, 7, 0, 0}}, {'D', {6, 5, 5, 5, 6}}, {'S', {7, 4, 7, 1, 7}},
      {'C', {7, 4, 4, 4, 7}},
  };
  for (char c : text) {
    if (auto it = glyphs.find(c); it != glyphs.end()) {
      for (int gy = 0; gy < 5; ++gy) {
        for (int gx = 0; gx < 3; ++gx) {
          if (!((it->second[gy] >> (2 - gx)) & 1)) continue;
          for (int sy = 0; sy < scale; ++sy)
            for (int sx = 0; sx < scale; ++sx) {
              const auto py = y + gy * scale + sy, px = x + gx * scale + sx;
              if (py >= 0 && py < r.height && px >= 0 && px < r.width) r.at(py, px) = colour;
            }
        }
      }
    }
    x += 4 * scale;
  }
}

void write_ppm(const fs::path& path, const Raster& r) {
  std::string bytes = "P6\n" + std::to_string(r.width) + " " + std::to_string(r.height) + "\n255\n";
  bytes.reserve(bytes.size() + r.pixels.size() * 3);
  for (const auto& p : r.pixels) {
    bytes.push_back(static_cast<char>(p.r));
    bytes.push_back(static_cast<char>(p.g));
    bytes.push_back(static_cast<char>(p.b));
  }
  write_atomic(path, bytes);
}

Raster read_ppm(const fs::path& path) {
  const auto bytes = read_file(path);
  std::istringstream ss(bytes);
  std::string magic;
  std::int64_t w = 0, h = 0, maxval = 0;
  ss >> magic >> w >> h >> maxval;
  if (magic != "P6" || maxval != 255) throw ConfigError("unsupported PPM: " + path.string());
  ss.get();
  Raster r(h, w);
  for (auto& p : r.pixels) {
    p.r = static_cast<std::uint8_t>(ss.get());
    p.g = static_cast<std::uint8_t>(ss.get());
    p.b = static_cast<std::uint8_t>(ss.get());
  }
  return r;
}

}  // namespace dirda::io
