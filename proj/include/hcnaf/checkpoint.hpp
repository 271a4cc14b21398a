#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "hcnaf/errors.hpp"
#include "hcnaf/matrix.hpp"
#include "hcnaf/training.hpp"

namespace hcnaf {

// File layout:
//   HCNAF-CHECKPOINT 1
//   kind <hcnaf|affine|dataset>
//   dtype <f32|f64>
//   config <n>            followed by n lines of config text
//   tensors <m>
//   tensor <name> <rows> <cols> <offset> <bytes>    (m lines)
//   end
// then the raw little-endian payload, tensors in manifest order.

inline constexpr const char* kCheckpointMagic = "HCNAF-CHECKPOINT 1";

static_assert(std::endian::native == std::endian::little, "payload is written in native order");

struct TensorFile {
  std::string kind;
  std::string dtype;
  std::string config;
  std::vector<std::string> names;
  std::vector<Matrix<double>> tensors;  // f32 payloads widen on load
};

template <typename T>
constexpr const char* dtype_name() {
  static_assert(std::is_same_v<T, float> || std::is_same_v<T, double>);
  return std::is_same_v<T, float> ? "f32" : "f64";
}

template <typename T>
std::string encode_tensors(const std::string& kind, const std::string& config, const std::vector<std::string>& names,
                           const std::vector<Matrix<T>>& tensors) {
  if (names.size() != tensors.size()) throw ArgumentError("checkpoint: name and tensor counts differ");
  std::ostringstream head;
  head << kCheckpointMagic << "\n";
  head << "kind " << kind << "\n";
  head << "dtype " << dtype_name<T>() << "\n";
  std::size_t lines = 0;
  for (char ch : config) lines += ch == '\n';
  if (!config.empty() && config.back() != '\n') throw ArgumentError("checkpoint: config text must end in newline");
  head << "config " << lines << "\n" << config;
  head << "tensors " << tensors.size() << "\n";
  std::size_t off = 0;
  for (std::size_t i = 0; i < tensors.size(); ++i) {
    if (names[i].empty() || names[i].find_first_of(" \n") != std::string::npos) {
      throw ArgumentError("checkpoint: bad tensor name '" + names[i] + "'");
    }
    const std::size_t bytes = tensors[i].size() * sizeof(T);
    head << "tensor " << names[i] << " " << tensors[i].rows() << " " << tensors[i].cols() << " " << off << " "
         << bytes << "\n";
    off += bytes;
  }
  head << "end\n";
  std::string out = head.str();
  const std::size_t base = out.size();
  out.resize(base + off);
  std::size_t at = base;
  for (const auto& t : tensors) {
    if (t.size()) std::memcpy(out.data() + at, t.data(), t.size() * sizeof(T));
    at += t.size() * sizeof(T);
  }
  return out;
}

namespace detail {

inline std::string expect_line(std::istringstream& in, const std::string& what) {
  std::string line;
  if (!std::getline(in, line)) throw FormatError("checkpoint: truncated manifest, expected " + what);
  return line;
}

inline std::size_t expect_count(const std::string& line, const std::string& key) {
  if (line.rfind(key + " ", 0) != 0) throw FormatError("checkpoint: expected '" + key + "', got '" + line + "'");
  try {
    std::size_t pos = 0;
    const std::string v = line.substr(key.size() + 1);
    const auto n = std::stoull(v, &pos);
    if (pos != v.size()) throw FormatError("checkpoint: bad count in '" + line + "'");
    return n;
  } catch (const std::logic_error&) {
    throw FormatError("checkpoint: bad count in '" + line + "'");
  }
}

}  // namespace detail

inline TensorFile decode_tensors(const std::string& bytes) {
  // The manifest is text up to and including the "end" line.
  const auto end_pos = bytes.find("\nend\n");
  if (bytes.rfind(kCheckpointMagic, 0) != 0) throw FormatError("checkpoint: bad magic");
  if (end_pos == std::string::npos) throw FormatError("checkpoint: missing end of manifest");
  std::istringstream in(bytes.substr(0, end_pos + 1));
  TensorFile f;
  detail::expect_line(in, "magic");
  std::string line = detail::expect_line(in, "kind");
  if (line.rfind("kind ", 0) != 0) throw FormatError("checkpoint: expected kind");
  f.kind = line.substr(5);
  line = detail::expect_line(in, "dtype");
  if (line != "dtype f32" && line != "dtype f64") throw FormatError("checkpoint: bad dtype line '" + line + "'");
  f.dtype = line.substr(6);
  const std::size_t cfg_lines = detail::expect_count(detail::expect_line(in, "config"), "config");
  for (std::size_t i = 0; i < cfg_lines; ++i) f.config += detail::expect_line(in, "config text") + "\n";
  const std::size_t n = detail::expect_count(detail::expect_line(in, "tensors"), "tensors");
  const std::size_t elem = f.dtype == "f32" ? 4 : 8;
  const std::size_t base = end_pos + 5;
  std::size_t expect_off = 0;
  for (std::size_t i = 0; i < n; ++i) {
    std::istringstream ls(detail::expect_line(in, "tensor"));
    std::string tag, name;
    std::size_t rows = 0, cols = 0, off = 0, nbytes = 0;
    if (!(ls >> tag >> name >> rows >> cols >> off >> nbytes) || tag != "tensor") {
      throw FormatError("checkpoint: malformed tensor line " + std::to_string(i));
    }
    if (off != expect_off || nbytes != rows * cols * elem) {
      throw FormatError("checkpoint: tensor " + name + " has inconsistent offset or size");
    }
    if (base + off + nbytes > bytes.size()) throw FormatError("checkpoint: payload truncated at " + name);
    Matrix<double> m(rows, cols);
    const char* src = bytes.data() + base + off;
    for (std::size_t k = 0; k < rows * cols; ++k) {
      if (elem == 4) {
        float v;
        std::memcpy(&v, src + 4 * k, 4);
        m[k] = v;
      } else {
        double v;
        std::memcpy(&v, src + 8 * k, 8);
        m[k] = v;
      }
    }
    f.names.push_back(name);
    f.tensors.push_back(std::move(m));
    expect_off += nbytes;
  }
  if (base + expect_off != bytes.size()) throw FormatError("checkpoint: trailing bytes after payload");
  return f;
}

inline void write_bytes(const std::string& path, const std::string& bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw FormatError("cannot write " + path);
  out.write(bytes.data(), std::streamsize(bytes.size()));
  if (!out) throw FormatError("write failed: " + path);
}

inline std::string read_bytes(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open " + path);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

template <typename Model>
void save_checkpoint(const std::string& path, const Model& model, const std::string& config) {
  write_bytes(path, encode_tensors(Model::kind(), config, model.param_names(), model.params()));
}

inline TensorFile read_checkpoint(const std::string& path) { return decode_tensors(read_bytes(path)); }

// Copies parameters into an already-built model; names, shapes, kind and
// dtype must all match.
template <typename Model>
void load_params(Model& model, const TensorFile& f) {
  using T = typename Model::Real;
  if (f.kind != Model::kind()) throw FormatError("checkpoint: holds a " + f.kind + " model");
  if (f.dtype != dtype_name<T>()) throw FormatError("checkpoint: dtype " + f.dtype + " does not match the model");
  auto& p = model.params();
  const auto& names = model.param_names();
  if (f.tensors.size() != p.size()) throw FormatError("checkpoint: tensor count does not match the model");
  for (std::size_t i = 0; i < p.size(); ++i) {
    if (f.names[i] != names[i]) throw FormatError("checkpoint: expected tensor " + names[i] + ", got " + f.names[i]);
    if (f.tensors[i].rows() != p[i].rows() || f.tensors[i].cols() != p[i].cols()) {
      throw FormatError("checkpoint: shape mismatch for " + names[i]);
    }
    for (std::size_t k = 0; k < p[i].size(); ++k) p[i][k] = static_cast<T>(f.tensors[i][k]);
  }
}

// Dataset cache: tensors "x" and "c" (f64) plus a free-form description.
inline void save_dataset(const std::string& path, const Dataset<double>& d, const std::string& description) {
  write_bytes(path, encode_tensors<double>("dataset", description, {"x", "c"}, {d.x, d.c}));
}

inline Dataset<double> load_dataset(const std::string& path, std::string* description = nullptr) {
  auto f = read_checkpoint(path);
  if (f.kind != "dataset" || f.names != std::vector<std::string>{"x", "c"} || f.dtype != "f64") {
    throw FormatError(path + ": not a dataset cache");
  }
  if (f.tensors[0].cols() != f.tensors[1].cols()) throw FormatError(path + ": x and c column counts differ");
  if (description) *description = f.config;
  return {std::move(f.tensors[0]), std::move(f.tensors[1])};
}

}  // namespace hcnaf
