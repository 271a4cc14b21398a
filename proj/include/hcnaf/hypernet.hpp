#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "hcnaf/errors.hpp"
#include "hcnaf/flow.hpp"
#include "hcnaf/matrix.hpp"
#include "hcnaf/ops.hpp"

namespace hcnaf {

// Hyper-network shape: an optional shared ReLU trunk, then two heads (one
// emitting flow weights, one emitting flow biases), each with one ReLU
// hidden layer of the given width (0 = no hidden layer) and a linear output.
struct HyperNetConfig {
  std::size_t cond_dim = 1;
  std::vector<std::size_t> trunk_widths;
  std::size_t head_width_w = 64;
  std::size_t head_width_b = 64;
  // Half-range of the deterministic spread given to hidden-unit biases at
  // init. 0 keeps the emitted flow exactly identity-like; a nonzero spread
  // breaks the symmetry between units of the same flow dimension.
  double head_bias_spread = 0.0;

  void validate() const {
    if (cond_dim < 1) throw ArgumentError("HyperNetConfig: cond_dim must be >= 1");
    for (auto w : trunk_widths)
      if (w < 1) throw ArgumentError("HyperNetConfig: trunk widths must be >= 1");
  }

  // Width of the layer feeding the trunk's output side.
  std::size_t trunk_out() const { return trunk_widths.empty() ? cond_dim : trunk_widths.back(); }

  // Number of hidden layers on the path to an output head.
  std::size_t hidden_layers() const {
    return trunk_widths.size() + ((head_width_w > 0 || head_width_b > 0) ? 1 : 0);
  }

  friend bool operator==(const HyperNetConfig&, const HyperNetConfig&) = default;
};

struct ParamCounts {
  std::size_t n_w = 0;             // full masked flow weight matrices, zeros included
  std::size_t n_b = 0;             // flow biases
  std::size_t n_h = 0;             // hyper-network, counted against the full n_w
  std::size_t total = 0;           // n_w + n_b + n_h
  std::size_t stored_w = 0;        // flow weights actually emitted (mask-compressed)
  std::size_t hypernet_allocated = 0;  // trainable scalars in the implemented hyper-network
};

// N_W = D^2 H_F (2 + (L_F - 1) H_F), N_B = D (H_F L_F + 1),
// N_H = N_{1:L_H-1} + H_{H,W} N_W + H_{H,B} N_B where N_{1:L_H-1} is every
// hyper-network parameter before the two output layers.
inline ParamCounts param_counts(const CondAFConfig& af, const HyperNetConfig& hn) {
  af.validate();
  hn.validate();
  const std::size_t D = af.dim, H = af.width_per_dim, L = af.hidden_layers;
  ParamCounts c;
  c.n_w = D * D * H * (2 + (L - 1) * H);
  c.n_b = D * (H * L + 1);

  std::size_t body = 0;
  std::size_t prev = hn.cond_dim;
  for (auto w : hn.trunk_widths) {
    body += w * prev + w;
    prev = w;
  }
  const std::size_t last_w = hn.head_width_w > 0 ? hn.head_width_w : prev;
  const std::size_t last_b = hn.head_width_b > 0 ? hn.head_width_b : prev;
  if (hn.head_width_w > 0) body += hn.head_width_w * prev + hn.head_width_w;
  if (hn.head_width_b > 0) body += hn.head_width_b * prev + hn.head_width_b;
  c.n_h = body + last_w * c.n_w + last_b * c.n_b;
  c.total = c.n_w + c.n_b + c.n_h;

  const FlowLayout layout(af);
  c.stored_w = layout.stored_weights();
  c.hypernet_allocated = body + (last_w + 1) * c.stored_w + (last_b + 1) * c.n_b;
  return c;
}

// Trainable MLP mapping a condition vector C to the flow parameters.
template <typename T>
class HyperNet {
 public:
  HyperNet() = default;
  HyperNet(HyperNetConfig hc, CondAFConfig fc) : hc_(std::move(hc)), layout_(fc) {
    hc_.validate();
    std::size_t prev = hc_.cond_dim;
    for (std::size_t i = 0; i < hc_.trunk_widths.size(); ++i) {
      add_layer("trunk." + std::to_string(i), hc_.trunk_widths[i], prev);
      prev = hc_.trunk_widths[i];
    }
    const std::size_t trunk_out = prev;
    std::size_t in_w = trunk_out;
    if (hc_.head_width_w > 0) {
      add_layer("head_w.hidden", hc_.head_width_w, trunk_out);
      in_w = hc_.head_width_w;
    }
    add_layer("head_w.out", layout_.stored_weights(), in_w);
    std::size_t in_b = trunk_out;
    if (hc_.head_width_b > 0) {
      add_layer("head_b.hidden", hc_.head_width_b, trunk_out);
      in_b = hc_.head_width_b;
    }
    add_layer("head_b.out", layout_.biases(), in_b);
  }

  const HyperNetConfig& config() const noexcept { return hc_; }
  const CondAFConfig& flow_config() const noexcept { return layout_.config(); }
  const FlowLayout& layout() const noexcept { return layout_; }
  std::size_t cond_dim() const noexcept { return hc_.cond_dim; }
  std::size_t dim() const noexcept { return layout_.dim(); }

  std::vector<Matrix<T>>& params() noexcept { return params_; }
  const std::vector<Matrix<T>>& params() const noexcept { return params_; }
  const std::vector<std::string>& param_names() const noexcept { return names_; }

  std::size_t num_scalars() const {
    std::size_t n = 0;
    for (const auto& p : params_) n += p.size();
    return n;
  }

  // Trunk and head hidden layers: uniform in +-1/sqrt(fan_in), seeded.
  // Output layers: zero weights; biases emit the identity-like flow, with
  // the optional deterministic spread on hidden-unit flow biases.
  void init(std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    const auto identity = FlowParams<T>::identity_like(layout_);
    for (std::size_t i = 0; i < params_.size(); i += 2) {
      auto& w = params_[i];
      auto& b = params_[i + 1];
      const bool is_out = names_[i].ends_with(".out.weight");
      if (is_out) {
        w.fill(T(0));
        if (names_[i].starts_with("head_w")) {
          b = identity.weights;
        } else {
          b = identity.biases;
          apply_bias_spread(b);
        }
        continue;
      }
      const double bound = 1.0 / std::sqrt(static_cast<double>(w.cols()));
      std::uniform_real_distribution<double> u(-bound, bound);
      for (auto& x : w.flat()) x = static_cast<T>(u(rng));
      for (auto& x : b.flat()) x = static_cast<T>(u(rng));
    }
  }

  // Records the hyper-network on `ops` for one condition column c
  // (cond_dim x 1). `p` holds one handle per entry of params().
  template <typename Ops>
  std::pair<typename Ops::Val, typename Ops::Val> forward_ops(
      const Ops& ops, const std::vector<typename Ops::Val>& p, const typename Ops::Val& c) const {
    const auto& cv = ops.value(c);
    if (cv.rows() != hc_.cond_dim || cv.cols() != 1) {
      throw ArgumentError("hyper_forward: condition has length " + std::to_string(cv.rows()) +
                          ", expected " + std::to_string(hc_.cond_dim));
    }
    std::size_t i = 0;
    auto dense = [&](const typename Ops::Val& h) {
      auto out = ops.add_bias(ops.matmul(p[i], h), p[i + 1]);
      i += 2;
      return out;
    };
    typename Ops::Val h = c;
    for (std::size_t t = 0; t < hc_.trunk_widths.size(); ++t) h = ops.relu(dense(h));
    typename Ops::Val hw = h;
    if (hc_.head_width_w > 0) hw = ops.relu(dense(h));
    auto weights = dense(hw);
    typename Ops::Val hb = h;
    if (hc_.head_width_b > 0) hb = ops.relu(dense(h));
    auto biases = dense(hb);
    return {weights, biases};
  }

  FlowParams<T> forward(std::span<const T> c) const {
    if (c.size() != hc_.cond_dim) {
      throw ArgumentError("hyper_forward: condition has length " + std::to_string(c.size()) +
                          ", expected " + std::to_string(hc_.cond_dim));
    }
    for (T v : c)
      if (!std::isfinite(v)) throw ArgumentError("hyper_forward: non-finite condition");
    PlainOps<T> ops;
    auto [w, b] = forward_ops(ops, params_, Matrix<T>::column(c));
    FlowParams<T> fp;
    fp.weights = std::move(w);
    fp.biases = std::move(b);
    return fp;
  }

 private:
  void add_layer(const std::string& name, std::size_t out, std::size_t in) {
    names_.push_back(name + ".weight");
    params_.emplace_back(out, in);
    names_.push_back(name + ".bias");
    params_.emplace_back(out, 1);
  }

  void apply_bias_spread(Matrix<T>& b) const {
    if (hc_.head_bias_spread == 0.0) return;
    const std::size_t D = layout_.dim();
    for (std::size_t k = 0; k + 1 < layout_.num_layers(); ++k) {
      const auto& l = layout_.layer(k);
      const std::size_t H = l.out_width;
      for (std::size_t d = 0; d < D; ++d) {
        for (std::size_t u = 0; u < H; ++u) {
          const double frac = H == 1 ? 0.0 : 2.0 * double(u) / double(H - 1) - 1.0;
          b[l.bias_offset + d * H + u] = static_cast<T>(hc_.head_bias_spread * frac);
        }
      }
    }
  }

  HyperNetConfig hc_;
  FlowLayout layout_;
  std::vector<Matrix<T>> params_;
  std::vector<std::string> names_;
};

template <typename T>
FlowParams<T> hyper_forward(const HyperNet<T>& net, std::span<const T> c) {
  return net.forward(c);
}

}  // namespace hcnaf
