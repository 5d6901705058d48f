#include "phanes/io.hpp"

#include <png.h>
#include <zlib.h>

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <memory>
#include <sstream>
#include <stdexcept>

#include "phanes/errors.hpp"

namespace phanes::io {
namespace {

struct FileCloser {
  void operator()(std::FILE* f) const {
    if (f) std::fclose(f);
  }
};
using FilePtr = std::unique_ptr<std::FILE, FileCloser>;

FilePtr open_file(const fs::path& path, const char* mode) {
  FilePtr f(std::fopen(path.c_str(), mode));
  if (!f) throw Error("cannot open " + path.string());
  return f;
}

}  // namespace

Image read_png(const fs::path& path) {
  auto file = open_file(path, "rb");
  png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png ? png_create_info_struct(png) : nullptr;
  if (!png || !info) throw Error("libpng initialisation failed");
  std::vector<png_bytep> rows;
  std::vector<std::uint8_t> buffer;
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw Error("corrupt PNG: " + path.string());
  }
  png_init_io(png, file.get());
  png_read_info(png, info);
  const int width = static_cast<int>(png_get_image_width(png, info));
  const int height = static_cast<int>(png_get_image_height(png, info));
  const int depth = png_get_bit_depth(png, info);
  const int color = png_get_color_type(png, info);
  if (color == PNG_COLOR_TYPE_PALETTE) png_set_palette_to_rgb(png);
  if (color == PNG_COLOR_TYPE_GRAY && depth < 8) png_set_expand_gray_1_2_4_to_8(png);
  if (color == PNG_COLOR_TYPE_RGB || color == PNG_COLOR_TYPE_RGB_ALPHA || color == PNG_COLOR_TYPE_PALETTE)
    png_set_rgb_to_gray_fixed(png, 1, -1, -1);
  if (color & PNG_COLOR_MASK_ALPHA) png_set_strip_alpha(png);
  if (depth == 16 && std::endian::native == std::endian::little) png_set_swap(png);
  png_read_update_info(png, info);
  const int out_depth = png_get_bit_depth(png, info);
  const std::size_t stride = png_get_rowbytes(png, info);
  buffer.resize(stride * static_cast<std::size_t>(height));
  rows.resize(static_cast<std::size_t>(height));
  for (int r = 0; r < height; ++r) rows[r] = buffer.data() + stride * r;
  png_read_image(png, rows.data());
  png_read_end(png, nullptr);
  png_destroy_read_struct(&png, &info, nullptr);

  Image img(height, width);
  img.id = path.stem().string();
  for (int r = 0; r < height; ++r) {
    for (int c = 0; c < width; ++c) {
      if (out_depth == 16) {
        std::uint16_t v;
        std::memcpy(&v, rows[r] + 2 * c, 2);
        img(r, c) = v / 65535.0;
      } else {
        img(r, c) = rows[r][c] / 255.0;
      }
    }
  }
  return img;
}

void write_png(const fs::path& path, const Grid<double>& image, int bit_depth) {
  if (bit_depth != 8 && bit_depth != 16) throw std::invalid_argument("PNG bit depth must be 8 or 16");
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  auto file = open_file(path, "wb");
  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png ? png_create_info_struct(png) : nullptr;
  if (!png || !info) throw Error("libpng initialisation failed");
  const int w = image.width(), h = image.height();
  const std::size_t bpp = bit_depth / 8;
  std::vector<std::uint8_t> buffer(static_cast<std::size_t>(w) * h * bpp);
  const double max_v = bit_depth == 16 ? 65535.0 : 255.0;
  for (std::size_t i = 0; i < image.size(); ++i) {
    const auto q = static_cast<std::uint32_t>(std::lround(std::clamp(image[i], 0.0, 1.0) * max_v));
    if (bit_depth == 16) {
      buffer[2 * i] = static_cast<std::uint8_t>(q >> 8);  // PNG is big-endian
      buffer[2 * i + 1] = static_cast<std::uint8_t>(q & 0xff);
    } else {
      buffer[i] = static_cast<std::uint8_t>(q);
    }
  }
  std::vector<png_bytep> rows(static_cast<std::size_t>(h));
  for (int r = 0; r < h; ++r) rows[r] = buffer.data() + static_cast<std::size_t>(r) * w * bpp;
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_write_struct(&png, &info);
    throw Error("failed writing PNG: " + path.string());
  }
  png_init_io(png, file.get());
  png_set_IHDR(png, info, w, h, bit_depth, PNG_COLOR_TYPE_GRAY, PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT,
               PNG_FILTER_TYPE_DEFAULT);
  png_write_info(png, info);
  png_write_image(png, rows.data());
  png_write_end(png, nullptr);
  png_destroy_write_struct(&png, &info);
}

void write_mask_png(const fs::path& path, const BinaryMask& mask) {
  Grid<double> g(mask.height(), mask.width());
  for (std::size_t i = 0; i < mask.size(); ++i) g[i] = mask[i] ? 1.0 : 0.0;
  write_png(path, g, 8);
}

BinaryMask read_mask_png(const fs::path& path) {
  const Image img = read_png(path);
  BinaryMask m(img.height(), img.width(), 0);
  for (std::size_t i = 0; i < img.size(); ++i) m[i] = img[i] >= 0.5 ? 1 : 0;
  return m;
}

Grid<double> read_nifti_center_slice(const fs::path& path) {
  gzFile gz = gzopen(path.c_str(), "rb");  // transparently reads uncompressed files too
  if (!gz) throw Error("cannot open " + path.string());
  std::unique_ptr<gzFile_s, int (*)(gzFile)> guard(gz, gzclose);

  unsigned char hdr[348];
  if (gzread(gz, hdr, sizeof(hdr)) != static_cast<int>(sizeof(hdr))) throw Error("truncated NIfTI header");
  std::int32_t sizeof_hdr;
  std::memcpy(&sizeof_hdr, hdr, 4);
  bool swap = false;
  if (sizeof_hdr != 348) {
    sizeof_hdr = static_cast<std::int32_t>(__builtin_bswap32(static_cast<std::uint32_t>(sizeof_hdr)));
    if (sizeof_hdr != 348) throw Error("not a NIfTI-1 file: " + path.string());
    swap = true;
  }
  auto rd16 = [&](int off) {
    std::uint16_t v;
    std::memcpy(&v, hdr + off, 2);
    return static_cast<std::int16_t>(swap ? __builtin_bswap16(v) : v);
  };
  auto rdf = [&](int off) {
    std::uint32_t v;
    std::memcpy(&v, hdr + off, 4);
    if (swap) v = __builtin_bswap32(v);
    return std::bit_cast<float>(v);
  };
  const int ndim = rd16(40);
  const int nx = rd16(42), ny = ndim >= 2 ? rd16(44) : 1, nz = ndim >= 3 ? rd16(46) : 1;
  const int datatype = rd16(70);
  const float vox_offset = rdf(108);
  float slope = rdf(112);
  const float inter = rdf(116);
  if (slope == 0.0f || !std::isfinite(slope)) slope = 1.0f;
  if (nx <= 0 || ny <= 0 || nz <= 0) throw Error("invalid NIfTI dimensions");

  int bytes = 0;
  switch (datatype) {
    case 2: bytes = 1; break;    // uint8
    case 4: bytes = 2; break;    // int16
    case 8: bytes = 4; break;    // int32
    case 16: bytes = 4; break;   // float32
    case 64: bytes = 8; break;   // float64
    case 256: bytes = 1; break;  // int8
    case 512: bytes = 2; break;  // uint16
    default: throw Error("unsupported NIfTI datatype " + std::to_string(datatype));
  }
  const std::size_t slice_bytes = static_cast<std::size_t>(nx) * ny * bytes;
  const std::size_t offset = static_cast<std::size_t>(vox_offset) + slice_bytes * static_cast<std::size_t>(nz / 2);
  if (gzseek(gz, static_cast<z_off_t>(offset), SEEK_SET) < 0) throw Error("NIfTI seek failed");
  std::vector<unsigned char> raw(slice_bytes);
  if (gzread(gz, raw.data(), static_cast<unsigned>(slice_bytes)) != static_cast<int>(slice_bytes))
    throw Error("truncated NIfTI volume");

  Grid<double> out(ny, nx);
  for (std::size_t i = 0; i < out.size(); ++i) {
    const unsigned char* p = raw.data() + i * bytes;
    double v = 0;
    auto load = [&](auto tag) {
      using U = decltype(tag);
      U x;
      std::memcpy(&x, p, sizeof(U));
      if (swap) {
        if constexpr (sizeof(U) == 2) {
          auto b = __builtin_bswap16(std::bit_cast<std::uint16_t>(x));
          x = std::bit_cast<U>(b);
        } else if constexpr (sizeof(U) == 4) {
          auto b = __builtin_bswap32(std::bit_cast<std::uint32_t>(x));
          x = std::bit_cast<U>(b);
        } else if constexpr (sizeof(U) == 8) {
          auto b = __builtin_bswap64(std::bit_cast<std::uint64_t>(x));
          x = std::bit_cast<U>(b);
        }
      }
      return static_cast<double>(x);
    };
    switch (datatype) {
      case 2: v = load(std::uint8_t{}); break;
      case 4: v = load(std::int16_t{}); break;
      case 8: v = load(std::int32_t{}); break;
      case 16: v = load(float{}); break;
      case 64: v = load(double{}); break;
      case 256: v = load(std::int8_t{}); break;
      case 512: v = load(std::uint16_t{}); break;
    }
    // NIfTI stores x fastest; rows of the output run along y.
    out[i] = v * slope + inter;
  }
  return out;
}

std::vector<ManifestRecord> read_manifest(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw Error("cannot open manifest " + path.string());
  std::vector<ManifestRecord> out;
  std::string line;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty() || line[0] == '#') continue;
    std::vector<std::string> fields;
    std::size_t start = 0;
    while (true) {
      const auto tab = line.find('\t', start);
      fields.push_back(line.substr(start, tab - start));
      if (tab == std::string::npos) break;
      start = tab + 1;
    }
    ManifestRecord rec{fields[0], std::nullopt, std::nullopt};
    if (fields.size() > 1 && !fields[1].empty()) rec.mask = fields[1];
    if (fields.size() > 2 && !fields[2].empty()) rec.reference = fields[2];
    out.push_back(std::move(rec));
  }
  return out;
}

void write_manifest(const fs::path& path, const std::vector<ManifestRecord>& records) {
  std::ostringstream os;
  for (const auto& r : records) {
    os << r.image;
    if (r.mask || r.reference) os << '\t' << r.mask.value_or("");
    if (r.reference) os << '\t' << *r.reference;
    os << '\n';
  }
  write_text(path, os.str());
}

void write_raw_grid(const fs::path& path, const Grid<double>& grid) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot write " + path.string());
  out << "phanes-grid-f64 " << grid.height() << ' ' << grid.width() << '\n';
  for (double v : grid.values()) {
    auto bits = std::bit_cast<std::uint64_t>(v);
    if constexpr (std::endian::native == std::endian::big) bits = __builtin_bswap64(bits);
    out.write(reinterpret_cast<const char*>(&bits), 8);
  }
}

Grid<double> read_raw_grid(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot open " + path.string());
  std::string magic;
  int h = 0, w = 0;
  in >> magic >> h >> w;
  in.get();
  if (magic != "phanes-grid-f64" || h < 0 || w < 0) throw Error("not a raw grid file: " + path.string());
  Grid<double> g(h, w);
  for (auto& v : g) {
    std::uint64_t bits;
    if (!in.read(reinterpret_cast<char*>(&bits), 8)) throw Error("truncated raw grid " + path.string());
    if constexpr (std::endian::native == std::endian::big) bits = __builtin_bswap64(bits);
    v = std::bit_cast<double>(bits);
  }
  return g;
}

std::string read_text(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot open " + path.string());
  std::ostringstream os;
  os << in.rdbuf();
  return os.str();
}

void write_text(const fs::path& path, const std::string& text) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot write " + path.string());
  out << text;
}

}  // namespace phanes::io
