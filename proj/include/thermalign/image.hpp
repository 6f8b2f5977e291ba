#pragma once

#include <Eigen/Dense>
#include <cstdint>
#include <string>

#include "thermalign/common.hpp"

namespace thermalign {

struct IoError : Error {
  using Error::Error;
};

// Images are stored as double matrices in [0,1], row = scanline. Values are
// quantized to 8 bits on write, so a save/load round trip is exact for any
// value of the form k/255.
struct GrayImage {
  Eigen::MatrixXd v;
  int height() const { return static_cast<int>(v.rows()); }
  int width() const { return static_cast<int>(v.cols()); }
};

struct RgbImage {
  Eigen::MatrixXd r, g, b;
  int height() const { return static_cast<int>(r.rows()); }
  int width() const { return static_cast<int>(r.cols()); }
};

struct AnyImage {
  bool is_rgb = false;
  GrayImage gray;
  RgbImage rgb;
  int height() const { return is_rgb ? rgb.height() : gray.height(); }
  int width() const { return is_rgb ? rgb.width() : gray.width(); }
};

// Quarter turns, counterclockwise: out(i,j) = in(j, W-1-i). k is taken mod 4.
Eigen::MatrixXd rot90(const Eigen::MatrixXd& m, int k);
GrayImage rot90(const GrayImage& img, int k);
RgbImage rot90(const RgbImage& img, int k);

// Connected components of {v > threshold} under 8-connectivity.
int count_components(const Eigen::MatrixXd& v, double threshold);

// 8-bit PNG. Writes go through a temp file + rename so readers never observe
// a partial file. Parent directories must exist.
void write_png(const std::string& path, const GrayImage& img);
void write_png(const std::string& path, const RgbImage& img);
AnyImage read_png(const std::string& path);

// Quantize to the 8-bit grid the PNG writer uses; handy when a test needs an
// image that round-trips bit-exactly.
double quantize8(double x);

}  // namespace thermalign
