#pragma once

#include <charconv>
#include <cstdint>
#include <fstream>
#include <functional>
#include <map>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "hcnaf/errors.hpp"
#include "hcnaf/flow.hpp"
#include "hcnaf/hypernet.hpp"
#include "hcnaf/model.hpp"
#include "hcnaf/pom.hpp"
#include "hcnaf/training.hpp"

namespace hcnaf {

inline constexpr const char* kConfigHeader = "hcnaf-config 1";

// Everything needed to rebuild a run: experiment, model shape, training
// schedule and data source.
struct RunConfig {
  std::string experiment = "toy1";  // toy1 | toy2 | toypom | mnist
  std::string model = "hcnaf";      // hcnaf | affine
  CondAFConfig flow;
  HyperNetConfig hyper;
  std::size_t affine_hidden_layers = 2;
  std::size_t affine_width = 64;
  TrainConfig train;
  std::size_t data_n = 10000;  // samples per condition (toy1/toy2), scenes (toypom), images (mnist; 0 = all)
  std::uint64_t data_seed = 1;
  std::string data_path;       // mnist: path prefix of the IDX pair
  std::size_t data_side = 8;   // mnist: image side after downsampling
  double data_lambda = 1e-6;   // mnist: logit squashing
  std::string output_dir = "run";

  AffineConfig affine() const { return {flow.dim, hyper.cond_dim, affine_hidden_layers, affine_width}; }

  void validate() const {
    if (experiment != "toy1" && experiment != "toy2" && experiment != "toypom" && experiment != "mnist") {
      throw ArgumentError("config: experiment must be toy1, toy2, toypom or mnist");
    }
    if (model != "hcnaf" && model != "affine") throw ArgumentError("config: model must be hcnaf or affine");
    flow.validate();
    hyper.validate();
    affine().validate();
    train.validate();
    const std::size_t want_dim = experiment == "mnist" ? data_side * data_side : 2;
    if (flow.dim != want_dim) {
      throw ArgumentError("config: flow.dim must be " + std::to_string(want_dim) + " for " + experiment);
    }
    const std::size_t want_c = experiment == "toy1"     ? 1
                               : experiment == "toy2"   ? 2
                               : experiment == "toypom" ? kPomCondDim
                                                        : 10;
    if (hyper.cond_dim != want_c) {
      throw ArgumentError("config: hyper.cond_dim must be " + std::to_string(want_c) + " for " + experiment);
    }
    if (experiment == "mnist" && data_path.empty()) throw ArgumentError("config: mnist needs data.path");
  }

  friend bool operator==(const RunConfig&, const RunConfig&) = default;
};

namespace detail {

inline std::string fmt_double(double v) {
  char buf[64];
  auto r = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, r.ptr);
}

inline std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return std::string(s.substr(b, e - b + 1));
}

template <typename I>
I parse_uint(const std::string& key, const std::string& v) {
  I out{};
  auto r = std::from_chars(v.data(), v.data() + v.size(), out);
  if (r.ec != std::errc() || r.ptr != v.data() + v.size()) {
    throw FormatError("config: " + key + " expects a non-negative integer, got '" + v + "'");
  }
  return out;
}

inline double parse_double(const std::string& key, const std::string& v) {
  double out{};
  auto r = std::from_chars(v.data(), v.data() + v.size(), out);
  if (r.ec != std::errc() || r.ptr != v.data() + v.size() || !std::isfinite(out)) {
    throw FormatError("config: " + key + " expects a finite number, got '" + v + "'");
  }
  return out;
}

inline std::vector<std::size_t> parse_list(const std::string& key, const std::string& v) {
  std::vector<std::size_t> out;
  if (v.empty()) return out;
  std::stringstream ss(v);
  std::string item;
  while (std::getline(ss, item, ',')) out.push_back(parse_uint<std::size_t>(key, trim(item)));
  return out;
}

inline std::string join_list(const std::vector<std::size_t>& v) {
  std::string s;
  for (std::size_t i = 0; i < v.size(); ++i) s += (i ? "," : "") + std::to_string(v[i]);
  return s;
}

// One entry per config key: how to print it and how to set it.
struct Field {
  std::function<std::string(const RunConfig&)> get;
  std::function<void(RunConfig&, const std::string&, const std::string&)> set;
};

template <typename I>
Field uint_field(I RunConfig::*m) {
  return {[m](const RunConfig& c) { return std::to_string(c.*m); },
          [m](RunConfig& c, const std::string& k, const std::string& v) { c.*m = parse_uint<I>(k, v); }};
}

template <typename S, typename I>
Field sub_uint(S RunConfig::*s, I S::*m) {
  return {[s, m](const RunConfig& c) { return std::to_string(c.*s.*m); },
          [s, m](RunConfig& c, const std::string& k, const std::string& v) { c.*s.*m = parse_uint<I>(k, v); }};
}

template <typename S>
Field sub_double(S RunConfig::*s, double S::*m) {
  return {[s, m](const RunConfig& c) { return fmt_double(c.*s.*m); },
          [s, m](RunConfig& c, const std::string& k, const std::string& v) { c.*s.*m = parse_double(k, v); }};
}

inline const std::vector<std::pair<std::string, Field>>& config_fields() {
  static const std::vector<std::pair<std::string, Field>> fields = [] {
    std::vector<std::pair<std::string, Field>> f;
    f.push_back({"experiment", {[](const RunConfig& c) { return c.experiment; },
                                [](RunConfig& c, const std::string&, const std::string& v) { c.experiment = v; }}});
    f.push_back({"model", {[](const RunConfig& c) { return c.model; },
                           [](RunConfig& c, const std::string&, const std::string& v) { c.model = v; }}});
    f.push_back({"flow.dim", sub_uint(&RunConfig::flow, &CondAFConfig::dim)});
    f.push_back({"flow.hidden_layers", sub_uint(&RunConfig::flow, &CondAFConfig::hidden_layers)});
    f.push_back({"flow.width_per_dim", sub_uint(&RunConfig::flow, &CondAFConfig::width_per_dim)});
    f.push_back({"flow.activation", {[](const RunConfig&) { return std::string("tanh"); },
                                     [](RunConfig&, const std::string& k, const std::string& v) {
                                       if (v != "tanh") throw FormatError("config: " + k + " supports only tanh");
                                     }}});
    f.push_back({"hyper.cond_dim", sub_uint(&RunConfig::hyper, &HyperNetConfig::cond_dim)});
    f.push_back({"hyper.trunk_widths",
                 {[](const RunConfig& c) { return join_list(c.hyper.trunk_widths); },
                  [](RunConfig& c, const std::string& k, const std::string& v) { c.hyper.trunk_widths = parse_list(k, v); }}});
    f.push_back({"hyper.head_width_w", sub_uint(&RunConfig::hyper, &HyperNetConfig::head_width_w)});
    f.push_back({"hyper.head_width_b", sub_uint(&RunConfig::hyper, &HyperNetConfig::head_width_b)});
    f.push_back({"hyper.head_bias_spread", sub_double(&RunConfig::hyper, &HyperNetConfig::head_bias_spread)});
    f.push_back({"affine.hidden_layers", uint_field(&RunConfig::affine_hidden_layers)});
    f.push_back({"affine.width", uint_field(&RunConfig::affine_width)});
    f.push_back({"train.learning_rate", sub_double(&RunConfig::train, &TrainConfig::learning_rate)});
    f.push_back({"train.decay_factor", sub_double(&RunConfig::train, &TrainConfig::decay_factor)});
    f.push_back({"train.patience_iters", sub_uint(&RunConfig::train, &TrainConfig::patience_iters)});
    f.push_back({"train.batch_size", sub_uint(&RunConfig::train, &TrainConfig::batch_size)});
    f.push_back({"train.max_iters", sub_uint(&RunConfig::train, &TrainConfig::max_iters)});
    f.push_back({"train.seed", sub_uint(&RunConfig::train, &TrainConfig::seed)});
    f.push_back({"train.precision", {[](const RunConfig& c) { return std::to_string(c.train.precision); },
                                     [](RunConfig& c, const std::string& k, const std::string& v) {
                                       c.train.precision = parse_uint<int>(k, v);
                                     }}});
    f.push_back({"train.val_fraction", sub_double(&RunConfig::train, &TrainConfig::val_fraction)});
    f.push_back({"train.val_every", sub_uint(&RunConfig::train, &TrainConfig::val_every)});
    f.push_back({"train.val_max", sub_uint(&RunConfig::train, &TrainConfig::val_max)});
    f.push_back({"train.improvement_threshold", sub_double(&RunConfig::train, &TrainConfig::improvement_threshold)});
    f.push_back({"train.grad_clip", sub_double(&RunConfig::train, &TrainConfig::grad_clip)});
    f.push_back({"train.divergence_limit", sub_double(&RunConfig::train, &TrainConfig::divergence_limit)});
    f.push_back({"data.n", uint_field(&RunConfig::data_n)});
    f.push_back({"data.seed", uint_field(&RunConfig::data_seed)});
    f.push_back({"data.path", {[](const RunConfig& c) { return c.data_path; },
                               [](RunConfig& c, const std::string&, const std::string& v) { c.data_path = v; }}});
    f.push_back({"data.side", uint_field(&RunConfig::data_side)});
    f.push_back({"data.lambda", {[](const RunConfig& c) { return fmt_double(c.data_lambda); },
                                 [](RunConfig& c, const std::string& k, const std::string& v) {
                                   c.data_lambda = parse_double(k, v);
                                 }}});
    f.push_back({"output_dir", {[](const RunConfig& c) { return c.output_dir; },
                                [](RunConfig& c, const std::string&, const std::string& v) { c.output_dir = v; }}});
    return f;
  }();
  return fields;
}

}  // namespace detail

// Every key, in a fixed order.
inline std::string write_config(const RunConfig& c) {
  std::string out = std::string(kConfigHeader) + "\n";
  for (const auto& [key, field] : detail::config_fields()) out += key + " = " + field.get(c) + "\n";
  return out;
}

// Keys not present keep the defaults of `base`. Blank lines and lines
// starting with '#' are skipped.
inline RunConfig parse_config(const std::string& text, RunConfig base = {}) {
  std::istringstream in(text);
  std::string line;
  std::size_t lineno = 0;
  bool header = false;
  std::map<std::string, std::size_t> seen;
  while (std::getline(in, line)) {
    ++lineno;
    const std::string t = detail::trim(line);
    if (t.empty() || t[0] == '#') continue;
    if (!header) {
      if (t != kConfigHeader) throw FormatError("config: first line must be '" + std::string(kConfigHeader) + "'");
      header = true;
      continue;
    }
    const auto eq = t.find('=');
    if (eq == std::string::npos) throw FormatError("config line " + std::to_string(lineno) + ": expected key = value");
    const std::string key = detail::trim(t.substr(0, eq));
    const std::string value = detail::trim(t.substr(eq + 1));
    if (seen.count(key)) throw FormatError("config line " + std::to_string(lineno) + ": duplicate key " + key);
    seen[key] = lineno;
    bool found = false;
    for (const auto& [k, field] : detail::config_fields()) {
      if (k == key) {
        field.set(base, key, value);
        found = true;
        break;
      }
    }
    if (!found) throw FormatError("config line " + std::to_string(lineno) + ": unknown key '" + key + "'");
  }
  if (!header) throw FormatError("config: missing '" + std::string(kConfigHeader) + "' line");
  return base;
}

inline RunConfig load_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ArgumentError("cannot open config " + path);
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_config(ss.str());
}

// Defaults per experiment.
inline RunConfig preset_config(const std::string& experiment) {
  RunConfig c;
  c.experiment = experiment;
  c.hyper.head_bias_spread = 1.0;
  if (experiment == "toy1") {
    c.flow = {2, 2, 64, Activation::kTanh};
    c.hyper.cond_dim = 1;
    c.train.batch_size = 64;
    c.train.max_iters = 40000;
    c.train.val_every = 500;
    c.data_n = 20000;
  } else if (experiment == "toy2") {
    c.flow = {2, 3, 32, Activation::kTanh};
    c.hyper.cond_dim = 2;
    c.train.batch_size = 64;
    c.data_n = 10000;
  } else if (experiment == "toypom") {
    c.flow = {2, 2, 16, Activation::kTanh};
    c.hyper.cond_dim = kPomCondDim;
    c.hyper.trunk_widths = {64};
    c.train.batch_size = 64;
    c.train.max_iters = 20000;
    c.train.val_every = 500;
    c.data_n = 40000;
  } else if (experiment == "mnist") {
    c.flow = {64, 1, 4, Activation::kTanh};
    c.hyper.cond_dim = 10;
    c.hyper.head_width_w = 16;
    c.hyper.head_width_b = 16;
    c.hyper.head_bias_spread = 0.5;
    c.train.batch_size = 64;
    c.train.learning_rate = 1e-3;
    c.train.max_iters = 3000;
    c.train.val_every = 250;
    c.data_n = 0;
    c.data_side = 8;
  } else {
    throw ArgumentError("unknown experiment '" + experiment + "'");
  }
  return c;
}

}  // namespace hcnaf
