#pragma once

#include <cmath>
#include <cstdint>
#include <fstream>
#include <iterator>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "hcnaf/errors.hpp"
#include "hcnaf/logspace.hpp"
#include "hcnaf/matrix.hpp"
#include "hcnaf/training.hpp"

namespace hcnaf {

// IDX files: big-endian magic 0x00000803 (u8 images, 3 dims) or 0x00000801
// (u8 labels, 1 dim), the dims as big-endian u32, then raw bytes.
struct IdxImages {
  std::size_t count = 0;
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<std::uint8_t> pixels;  // count * rows * cols, row-major per image

  std::span<const std::uint8_t> image(std::size_t i) const {
    return {pixels.data() + i * rows * cols, rows * cols};
  }
};

namespace detail {

inline std::vector<std::uint8_t> read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open " + path);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

inline std::uint32_t be32(const std::vector<std::uint8_t>& b, std::size_t off) {
  return (std::uint32_t(b[off]) << 24) | (std::uint32_t(b[off + 1]) << 16) | (std::uint32_t(b[off + 2]) << 8) |
         std::uint32_t(b[off + 3]);
}

inline void put_be32(std::vector<std::uint8_t>& b, std::uint32_t v) {
  for (int s = 24; s >= 0; s -= 8) b.push_back(static_cast<std::uint8_t>(v >> s));
}

inline void write_file(const std::string& path, const std::vector<std::uint8_t>& bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw FormatError("cannot write " + path);
  out.write(reinterpret_cast<const char*>(bytes.data()), std::streamsize(bytes.size()));
  if (!out) throw FormatError("write failed: " + path);
}

}  // namespace detail

inline IdxImages parse_idx_images(const std::vector<std::uint8_t>& b, const std::string& what = "idx") {
  if (b.size() < 16) throw FormatError(what + ": truncated header");
  if (detail::be32(b, 0) != 0x00000803u) throw FormatError(what + ": bad magic for u8 image file");
  IdxImages im;
  im.count = detail::be32(b, 4);
  im.rows = detail::be32(b, 8);
  im.cols = detail::be32(b, 12);
  if (im.rows == 0 || im.cols == 0) throw FormatError(what + ": zero image dimension");
  const std::size_t need = im.count * im.rows * im.cols;
  if (b.size() != 16 + need) {
    throw FormatError(what + ": payload is " + std::to_string(b.size() - 16) + " bytes, header implies " +
                      std::to_string(need));
  }
  im.pixels.assign(b.begin() + 16, b.end());
  return im;
}

inline std::vector<std::uint8_t> parse_idx_labels(const std::vector<std::uint8_t>& b,
                                                  const std::string& what = "idx") {
  if (b.size() < 8) throw FormatError(what + ": truncated header");
  if (detail::be32(b, 0) != 0x00000801u) throw FormatError(what + ": bad magic for u8 label file");
  const std::size_t n = detail::be32(b, 4);
  if (b.size() != 8 + n) throw FormatError(what + ": label count does not match payload");
  return {b.begin() + 8, b.end()};
}

inline IdxImages load_idx_images(const std::string& path) {
  return parse_idx_images(detail::read_file(path), path);
}

inline std::vector<std::uint8_t> load_idx_labels(const std::string& path) {
  return parse_idx_labels(detail::read_file(path), path);
}

inline void save_idx_images(const std::string& path, const IdxImages& im) {
  std::vector<std::uint8_t> b;
  detail::put_be32(b, 0x00000803u);
  detail::put_be32(b, std::uint32_t(im.count));
  detail::put_be32(b, std::uint32_t(im.rows));
  detail::put_be32(b, std::uint32_t(im.cols));
  b.insert(b.end(), im.pixels.begin(), im.pixels.end());
  detail::write_file(path, b);
}

inline void save_idx_labels(const std::string& path, std::span<const std::uint8_t> labels) {
  std::vector<std::uint8_t> b;
  detail::put_be32(b, 0x00000801u);
  detail::put_be32(b, std::uint32_t(labels.size()));
  b.insert(b.end(), labels.begin(), labels.end());
  detail::write_file(path, b);
}

// Centre-crops to the largest multiple of `side`, then averages blocks
// (rounded to nearest). side == rows returns the images unchanged.
inline IdxImages downsample(const IdxImages& im, std::size_t side) {
  if (side == 0 || side > im.rows || side > im.cols) throw ArgumentError("downsample: bad target side");
  const std::size_t fr = im.rows / side, fc = im.cols / side;
  const std::size_t r0 = (im.rows - fr * side) / 2, c0 = (im.cols - fc * side) / 2;
  IdxImages out{im.count, side, side, std::vector<std::uint8_t>(im.count * side * side)};
  for (std::size_t i = 0; i < im.count; ++i) {
    const auto src = im.image(i);
    for (std::size_t r = 0; r < side; ++r)
      for (std::size_t c = 0; c < side; ++c) {
        unsigned sum = 0;
        for (std::size_t a = 0; a < fr; ++a)
          for (std::size_t b = 0; b < fc; ++b) sum += src[(r0 + r * fr + a) * im.cols + c0 + c * fc + b];
        const unsigned n = unsigned(fr * fc);
        out.pixels[i * side * side + r * side + c] = static_cast<std::uint8_t>((sum + n / 2) / n);
      }
  }
  return out;
}

// pixel -> u = (pixel + noise) / 256 -> s = lambda + (1 - 2 lambda) u -> logit(s).
inline std::vector<double> dequantize_logit(std::span<const std::uint8_t> pixels, std::span<const double> noise,
                                            double lambda = 1e-6) {
  if (noise.size() != pixels.size()) throw ArgumentError("dequantize_logit: noise length mismatch");
  if (!(lambda > 0 && lambda < 0.5)) throw ArgumentError("dequantize_logit: lambda must be in (0, 0.5)");
  std::vector<double> y(pixels.size());
  for (std::size_t i = 0; i < pixels.size(); ++i) {
    if (!(noise[i] >= 0 && noise[i] < 1)) throw ArgumentError("dequantize_logit: noise must be in [0, 1)");
    const double u = (double(pixels[i]) + noise[i]) / 256.0;
    const double s = lambda + (1 - 2 * lambda) * u;
    y[i] = std::log(s) - std::log1p(-s);
  }
  return y;
}

inline std::vector<double> dequantize_logit(std::span<const std::uint8_t> pixels, std::mt19937_64& rng,
                                            double lambda = 1e-6) {
  std::uniform_real_distribution<double> u(0.0, 1.0);
  std::vector<double> noise(pixels.size());
  for (auto& v : noise) v = u(rng);
  return dequantize_logit(pixels, noise, lambda);
}

// Inverse of dequantize_logit: returns u = (pixel + noise) / 256.
inline std::vector<double> logit_to_unit(std::span<const double> y, double lambda = 1e-6) {
  std::vector<double> u(y.size());
  for (std::size_t i = 0; i < y.size(); ++i) {
    const double s = y[i] >= 0 ? 1.0 / (1.0 + std::exp(-y[i])) : std::exp(y[i]) / (1.0 + std::exp(y[i]));
    u[i] = (s - lambda) / (1 - 2 * lambda);
  }
  return u;
}

// sum_i log |dy_i / du_i| for the logit map at y.
inline double logit_log_jacobian(std::span<const double> y, double lambda = 1e-6) {
  double acc = 0;
  for (double v : y) {
    // log s + log(1 - s) = -softplus(-y) - softplus(y)
    acc += std::log1p(-2 * lambda) + softplus(-v) + softplus(v);
  }
  return acc;
}

// Bits per pixel in the 0..255 intensity space from a log-density in logit
// space: log p(x) = log p(y) + sum log|dy/du| - D ln 256.
inline double bits_per_pixel(double log_p_y, double log_jacobian, std::size_t dim) {
  const double log_px = log_p_y + log_jacobian - double(dim) * std::log(256.0);
  return -log_px / (double(dim) * std::log(2.0));
}

// Digits as a conditional dataset: x = dequantized logits (D x n), c = one-hot
// labels (classes x n). log_jacobian[j] holds sum log|dy/du| of sample j.
struct DigitData {
  Dataset<double> data;
  std::vector<double> log_jacobian;
};

inline DigitData digits_dataset(const IdxImages& im, std::span<const std::uint8_t> labels, std::size_t classes,
                                double lambda, std::uint64_t seed) {
  if (labels.size() != im.count) throw FormatError("digits: image and label counts differ");
  const std::size_t D = im.rows * im.cols;
  DigitData out{{Matrix<double>(D, im.count), Matrix<double>(classes, im.count)}, std::vector<double>(im.count)};
  std::mt19937_64 rng(seed);
  for (std::size_t j = 0; j < im.count; ++j) {
    if (labels[j] >= classes) throw FormatError("digits: label " + std::to_string(labels[j]) + " out of range");
    const auto y = dequantize_logit(im.image(j), rng, lambda);
    for (std::size_t r = 0; r < D; ++r) out.data.x(r, j) = y[r];
    out.data.c(labels[j], j) = 1.0;
    out.log_jacobian[j] = logit_log_jacobian(y, lambda);
  }
  return out;
}

// log p(x) = logsumexp_i log p(x | C_i) + ln(1 / classes) with one-hot C_i.
template <typename Model>
std::vector<double> mixture_log_prob(const Model& model, const Matrix<double>& x, std::size_t classes) {
  using T = typename Model::Real;
  if (model.cond_dim() != classes) throw ArgumentError("mixture_log_prob: model condition is not one-hot over classes");
  const Matrix<T> xt = x.template cast<T>();
  std::vector<std::vector<double>> per_class(classes);
  for (std::size_t i = 0; i < classes; ++i) {
    std::vector<T> onehot(classes, T(0));
    onehot[i] = T(1);
    const auto lp = model.log_prob_shared(xt, onehot);
    per_class[i].assign(lp.flat().begin(), lp.flat().end());
  }
  std::vector<double> out(x.cols());
  std::vector<double> terms(classes);
  for (std::size_t j = 0; j < x.cols(); ++j) {
    for (std::size_t i = 0; i < classes; ++i) terms[i] = per_class[i][j];
    out[j] = logsumexp(terms) - std::log(double(classes));
  }
  return out;
}

}  // namespace hcnaf
