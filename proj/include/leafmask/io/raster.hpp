#pragma once

// 16-bit single-channel label rasters. Binary PGM (P5, maxval 65535) is
// always available; PNG needs libpng and LEAFMASK_HAVE_PNG. The format is
// chosen from the file extension.

#include <cctype>
#include <cstdint>
#include <fstream>
#include <string>
#include <vector>

#include "leafmask/errors.hpp"
#include "leafmask/io/lmt.hpp"
#include "leafmask/metrics.hpp"

#ifdef LEAFMASK_HAVE_PNG
#include <png.h>
#endif

namespace leafmask::io {

inline std::vector<std::uint8_t> encode_pgm(const LabelImage& img) {
  std::string header = "P5\n" + std::to_string(img.width) + " " + std::to_string(img.height) + "\n65535\n";
  std::vector<std::uint8_t> out(header.begin(), header.end());
  out.reserve(out.size() + 2 * img.ids.size());
  for (auto v : img.ids) {
    if (v > 0xffff) throw FormatError("pgm: instance id " + std::to_string(v) + " exceeds 16 bits");
    // Netpbm stores 16-bit samples most significant byte first.
    out.push_back(static_cast<std::uint8_t>(v >> 8));
    out.push_back(static_cast<std::uint8_t>(v & 0xff));
  }
  return out;
}

inline LabelImage decode_pgm(std::span<const std::uint8_t> bytes) {
  std::size_t pos = 0;
  auto skip_space = [&] {
    while (pos < bytes.size()) {
      if (bytes[pos] == '#') {
        while (pos < bytes.size() && bytes[pos] != '\n') ++pos;
      } else if (std::isspace(bytes[pos])) {
        ++pos;
      } else {
        break;
      }
    }
  };
  auto read_uint = [&](const char* what) {
    skip_space();
    const std::size_t start = pos;
    std::size_t v = 0;
    while (pos < bytes.size() && std::isdigit(bytes[pos])) {
      v = v * 10 + (bytes[pos] - '0');
      if (v > 0xffffffu) throw FormatError(std::string("pgm: ") + what + " too large at byte " + std::to_string(start));
      ++pos;
    }
    if (pos == start) throw FormatError(std::string("pgm: expected ") + what + " at byte " + std::to_string(start));
    return v;
  };
  if (bytes.size() < 2 || bytes[0] != 'P' || bytes[1] != '5') throw FormatError("pgm: missing P5 magic at byte 0");
  pos = 2;
  const std::size_t w = read_uint("width"), h = read_uint("height"), maxval = read_uint("maxval");
  if (w == 0 || h == 0) throw FormatError("pgm: zero image size");
  if (maxval == 0 || maxval > 65535) throw FormatError("pgm: maxval out of range");
  if (pos >= bytes.size() || !std::isspace(bytes[pos])) throw FormatError("pgm: malformed header at byte " + std::to_string(pos));
  ++pos;
  const std::size_t bpp = maxval > 255 ? 2 : 1;
  if (bytes.size() - pos < w * h * bpp)
    throw FormatError("pgm: truncated pixel data at byte " + std::to_string(pos));
  LabelImage img(w, h);
  for (std::size_t i = 0; i < w * h; ++i)
    img.ids[i] = bpp == 2 ? (static_cast<std::uint32_t>(bytes[pos + 2 * i]) << 8) | bytes[pos + 2 * i + 1]
                          : bytes[pos + i];
  return img;
}

#ifdef LEAFMASK_HAVE_PNG

inline void write_png(const std::string& path, const LabelImage& img) {
  FILE* fp = std::fopen(path.c_str(), "wb");
  if (!fp) throw std::runtime_error("cannot open '" + path + "' for writing");
  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png ? png_create_info_struct(png) : nullptr;
  if (!png || !info || setjmp(png_jmpbuf(png))) {
    png_destroy_write_struct(&png, &info);
    std::fclose(fp);
    throw std::runtime_error("png: failed writing '" + path + "'");
  }
  png_init_io(png, fp);
  png_set_IHDR(png, info, static_cast<png_uint_32>(img.width), static_cast<png_uint_32>(img.height), 16,
               PNG_COLOR_TYPE_GRAY, PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
  png_write_info(png, info);
  std::vector<png_byte> row(2 * img.width);
  for (std::size_t y = 0; y < img.height; ++y) {
    for (std::size_t x = 0; x < img.width; ++x) {
      const auto v = img.at(x, y);
      if (v > 0xffff) {
        png_destroy_write_struct(&png, &info);
        std::fclose(fp);
        throw FormatError("png: instance id exceeds 16 bits");
      }
      row[2 * x] = static_cast<png_byte>(v >> 8);
      row[2 * x + 1] = static_cast<png_byte>(v & 0xff);
    }
    png_write_row(png, row.data());
  }
  png_write_end(png, nullptr);
  png_destroy_write_struct(&png, &info);
  std::fclose(fp);
}

inline LabelImage read_png(const std::string& path) {
  FILE* fp = std::fopen(path.c_str(), "rb");
  if (!fp) throw std::runtime_error("cannot open '" + path + "'");
  png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png ? png_create_info_struct(png) : nullptr;
  if (!png || !info || setjmp(png_jmpbuf(png))) {
    png_destroy_read_struct(&png, &info, nullptr);
    std::fclose(fp);
    throw FormatError("png: failed reading '" + path + "'");
  }
  png_init_io(png, fp);
  png_read_info(png, info);
  const auto w = png_get_image_width(png, info), h = png_get_image_height(png, info);
  const int depth = png_get_bit_depth(png, info), color = png_get_color_type(png, info);
  if (color != PNG_COLOR_TYPE_GRAY || (depth != 8 && depth != 16)) {
    png_destroy_read_struct(&png, &info, nullptr);
    std::fclose(fp);
    throw FormatError("png: '" + path + "' is not an 8/16-bit single-channel image");
  }
  LabelImage img(w, h);
  std::vector<png_byte> row(png_get_rowbytes(png, info));
  for (std::size_t y = 0; y < h; ++y) {
    png_read_row(png, row.data(), nullptr);
    for (std::size_t x = 0; x < w; ++x)
      img.at(x, y) = depth == 16 ? (static_cast<std::uint32_t>(row[2 * x]) << 8) | row[2 * x + 1] : row[x];
  }
  png_destroy_read_struct(&png, &info, nullptr);
  std::fclose(fp);
  return img;
}

#endif

inline bool has_png_extension(const std::string& path) {
  if (path.size() < 4) return false;
  std::string ext = path.substr(path.size() - 4);
  for (auto& c : ext) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
  return ext == ".png";
}

inline LabelImage read_label_raster(const std::string& path) {
  if (has_png_extension(path)) {
#ifdef LEAFMASK_HAVE_PNG
    return read_png(path);
#else
    throw FormatError("PNG support not compiled in; use .pgm");
#endif
  }
  try {
    return decode_pgm(read_file_bytes(path));
  } catch (const FormatError& e) {
    throw FormatError(path + ": " + e.what());
  }
}

inline void write_label_raster(const std::string& path, const LabelImage& img) {
  if (has_png_extension(path)) {
#ifdef LEAFMASK_HAVE_PNG
    write_png(path, img);
    return;
#else
    throw FormatError("PNG support not compiled in; use .pgm");
#endif
  }
  const auto bytes = encode_pgm(img);
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw std::runtime_error("cannot open '" + path + "' for writing");
  f.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
}

}  // namespace leafmask::io
