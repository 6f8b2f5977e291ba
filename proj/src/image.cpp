#include "thermalign/image.hpp"

#include <png.h>

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <vector>

namespace thermalign {
namespace {

// RAII wrapper so libpng cleanup happens on every exit path, including the
// setjmp error path.
struct PngWriter {
  FILE* fp = nullptr;
  png_structp png = nullptr;
  png_infop info = nullptr;
  ~PngWriter() {
    if (png) png_destroy_write_struct(&png, info ? &info : nullptr);
    if (fp) std::fclose(fp);
  }
};

struct PngReader {
  FILE* fp = nullptr;
  png_structp png = nullptr;
  png_infop info = nullptr;
  ~PngReader() {
    if (png) png_destroy_read_struct(&png, info ? &info : nullptr, nullptr);
    if (fp) std::fclose(fp);
  }
};

std::uint8_t to_byte(double x) {
  if (x < 0.0) x = 0.0;
  if (x > 1.0) x = 1.0;
  return static_cast<std::uint8_t>(std::lround(x * 255.0));
}

void write_png_rows(const std::string& path, int width, int height, int channels,
                    const std::vector<std::uint8_t>& data) {
  const std::string tmp = path + ".tmp";
  PngWriter w;
  w.fp = std::fopen(tmp.c_str(), "wb");
  if (!w.fp) throw IoError("cannot open for write: " + tmp);
  w.png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  if (!w.png) throw IoError("png_create_write_struct failed");
  w.info = png_create_info_struct(w.png);
  if (!w.info) throw IoError("png_create_info_struct failed");
  if (setjmp(png_jmpbuf(w.png))) throw IoError("png write failed: " + path);
  png_init_io(w.png, w.fp);
  png_set_IHDR(w.png, w.info, static_cast<png_uint_32>(width),
               static_cast<png_uint_32>(height), 8,
               channels == 1 ? PNG_COLOR_TYPE_GRAY : PNG_COLOR_TYPE_RGB,
               PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT,
               PNG_FILTER_TYPE_DEFAULT);
  png_write_info(w.png, w.info);
  std::vector<png_bytep> rows(static_cast<std::size_t>(height));
  for (int y = 0; y < height; ++y) {
    rows[static_cast<std::size_t>(y)] =
        const_cast<png_bytep>(&data[static_cast<std::size_t>(y) * width * channels]);
  }
  png_write_image(w.png, rows.data());
  png_write_end(w.png, nullptr);
  std::fflush(w.fp);
  std::fclose(w.fp);
  w.fp = nullptr;
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec) throw IoError("rename failed: " + path + " (" + ec.message() + ")");
}

}  // namespace

double quantize8(double x) { return to_byte(x) / 255.0; }

Eigen::MatrixXd rot90(const Eigen::MatrixXd& m, int k) {
  k = ((k % 4) + 4) % 4;
  switch (k) {
    case 0:
      return m;
    case 1:
      return m.transpose().colwise().reverse();
    case 2:
      return m.reverse();
    default:
      return m.transpose().rowwise().reverse();
  }
}

GrayImage rot90(const GrayImage& img, int k) { return {rot90(img.v, k)}; }

RgbImage rot90(const RgbImage& img, int k) {
  return {rot90(img.r, k), rot90(img.g, k), rot90(img.b, k)};
}

int count_components(const Eigen::MatrixXd& v, double threshold) {
  const int h = static_cast<int>(v.rows());
  const int w = static_cast<int>(v.cols());
  std::vector<char> seen(static_cast<std::size_t>(h) * w, 0);
  auto at = [&](int i, int j) -> char& { return seen[static_cast<std::size_t>(i) * w + j]; };
  int components = 0;
  std::vector<std::pair<int, int>> stack;
  for (int i = 0; i < h; ++i) {
    for (int j = 0; j < w; ++j) {
      if (v(i, j) <= threshold || at(i, j)) continue;
      ++components;
      stack.push_back({i, j});
      at(i, j) = 1;
      while (!stack.empty()) {
        auto [y, x] = stack.back();
        stack.pop_back();
        for (int dy = -1; dy <= 1; ++dy) {
          for (int dx = -1; dx <= 1; ++dx) {
            const int ny = y + dy, nx = x + dx;
            if (ny < 0 || ny >= h || nx < 0 || nx >= w) continue;
            if (v(ny, nx) <= threshold || at(ny, nx)) continue;
            at(ny, nx) = 1;
            stack.push_back({ny, nx});
          }
        }
      }
    }
  }
  return components;
}

void write_png(const std::string& path, const GrayImage& img) {
  const int h = img.height(), w = img.width();
  std::vector<std::uint8_t> data(static_cast<std::size_t>(h) * w);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x)
      data[static_cast<std::size_t>(y) * w + x] = to_byte(img.v(y, x));
  write_png_rows(path, w, h, 1, data);
}

void write_png(const std::string& path, const RgbImage& img) {
  const int h = img.height(), w = img.width();
  std::vector<std::uint8_t> data(static_cast<std::size_t>(h) * w * 3);
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      const std::size_t o = (static_cast<std::size_t>(y) * w + x) * 3;
      data[o] = to_byte(img.r(y, x));
      data[o + 1] = to_byte(img.g(y, x));
      data[o + 2] = to_byte(img.b(y, x));
    }
  }
  write_png_rows(path, w, h, 3, data);
}

AnyImage read_png(const std::string& path) {
  PngReader r;
  r.fp = std::fopen(path.c_str(), "rb");
  if (!r.fp) throw IoError("cannot open: " + path);
  png_byte sig[8];
  if (std::fread(sig, 1, 8, r.fp) != 8 || png_sig_cmp(sig, 0, 8) != 0)
    throw IoError("not a PNG file: " + path);
  r.png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  if (!r.png) throw IoError("png_create_read_struct failed");
  r.info = png_create_info_struct(r.png);
  if (!r.info) throw IoError("png_create_info_struct failed");
  if (setjmp(png_jmpbuf(r.png))) throw IoError("png read failed: " + path);
  png_init_io(r.png, r.fp);
  png_set_sig_bytes(r.png, 8);
  png_read_info(r.png, r.info);

  const int w = static_cast<int>(png_get_image_width(r.png, r.info));
  const int h = static_cast<int>(png_get_image_height(r.png, r.info));
  const png_byte color = png_get_color_type(r.png, r.info);
  const png_byte depth = png_get_bit_depth(r.png, r.info);

  // Normalize everything to 8-bit gray or 8-bit RGB.
  if (depth == 16) png_set_strip_16(r.png);
  if (color == PNG_COLOR_TYPE_PALETTE) png_set_palette_to_rgb(r.png);
  if (color == PNG_COLOR_TYPE_GRAY && depth < 8) png_set_expand_gray_1_2_4_to_8(r.png);
  if (png_get_valid(r.png, r.info, PNG_INFO_tRNS)) png_set_tRNS_to_alpha(r.png);
  if (color & PNG_COLOR_MASK_ALPHA) png_set_strip_alpha(r.png);
  png_read_update_info(r.png, r.info);

  const png_size_t rowbytes = png_get_rowbytes(r.png, r.info);
  const int channels = static_cast<int>(png_get_channels(r.png, r.info));
  if (channels != 1 && channels != 3) throw IoError("unsupported channel count in " + path);
  std::vector<std::uint8_t> data(static_cast<std::size_t>(h) * rowbytes);
  std::vector<png_bytep> rows(static_cast<std::size_t>(h));
  for (int y = 0; y < h; ++y) rows[static_cast<std::size_t>(y)] = &data[static_cast<std::size_t>(y) * rowbytes];
  png_read_image(r.png, rows.data());

  AnyImage out;
  if (channels == 1) {
    out.is_rgb = false;
    out.gray.v.resize(h, w);
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x)
        out.gray.v(y, x) = data[static_cast<std::size_t>(y) * rowbytes + x] / 255.0;
  } else {
    out.is_rgb = true;
    out.rgb.r.resize(h, w);
    out.rgb.g.resize(h, w);
    out.rgb.b.resize(h, w);
    for (int y = 0; y < h; ++y) {
      for (int x = 0; x < w; ++x) {
        const std::size_t o = static_cast<std::size_t>(y) * rowbytes + 3 * static_cast<std::size_t>(x);
        out.rgb.r(y, x) = data[o] / 255.0;
        out.rgb.g(y, x) = data[o + 1] / 255.0;
        out.rgb.b(y, x) = data[o + 2] / 255.0;
      }
    }
  }
  return out;
}

}  // namespace thermalign
