#pragma once

#include <atomic>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "hcnaf/errors.hpp"
#include "hcnaf/logspace.hpp"
#include "hcnaf/matrix.hpp"

namespace hcnaf {

// Reverse-mode gradient tape over matrix-valued primitives.
//
// Nodes are appended in evaluation order, so creation order is a
// topological order and backward() walks it once in reverse. A tape is
// built for one evaluation and thrown away; it is not thread-safe.
template <typename T>
class Tape {
 public:
  struct Var {
    std::uint32_t id = 0;
    std::uint64_t tape = 0;
  };

  Tape() : tape_id_(next_tape_id()) {}
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  std::size_t node_count() const noexcept { return nodes_.size(); }

  Var constant(Matrix<T> value) { return push(std::move(value), false, {}); }
  Var parameter(Matrix<T> value) { return push(std::move(value), true, {}); }

  const Matrix<T>& value(Var v) const { return node(v).value; }

  // Gradient of the last backward() root w.r.t. v; zeros if v was unreached.
  Matrix<T> grad(Var v) const {
    const Node& n = node(v);
    if (n.grad.empty()) return Matrix<T>(n.value.rows(), n.value.cols());
    return n.grad;
  }

  void backward(Var root) {
    const Node& r = node(root);
    if (r.value.rows() != 1 || r.value.cols() != 1) {
      throw ContractError("Tape::backward: root must be 1x1, got " + shape_str(r.value));
    }
    if (backward_done_) throw ContractError("Tape::backward: already called on this tape");
    backward_done_ = true;
    nodes_[root.id].grad = Matrix<T>(1, 1, T(1));
    for (std::size_t i = root.id + 1; i-- > 0;) {
      Node& n = nodes_[i];
      if (!n.needs_grad || n.grad.empty() || !n.backprop) continue;
      n.backprop(*this, n);
    }
  }

  // ---- primitives -------------------------------------------------------

  Var matmul(Var a, Var b) {
    const auto& av = value(a);
    const auto& bv = value(b);
    return push(hcnaf::matmul(av, bv), any_grad({a, b}), [a, b](Tape& t, Node& self) {
      if (t.wants(a)) matmul_nt_acc(self.grad, t.value(b), t.grad_ref(a));
      if (t.wants(b)) matmul_tn_acc(t.value(a), self.grad, t.grad_ref(b));
    });
  }

  Var add(Var a, Var b) {
    require_same(a, b, "add");
    Matrix<T> out = value(a);
    const auto& bv = value(b);
    for (std::size_t i = 0; i < out.size(); ++i) out[i] += bv[i];
    return push(std::move(out), any_grad({a, b}), [a, b](Tape& t, Node& self) {
      if (t.wants(a)) accumulate(t.grad_ref(a), self.grad, T(1));
      if (t.wants(b)) accumulate(t.grad_ref(b), self.grad, T(1));
    });
  }

  Var sub(Var a, Var b) {
    require_same(a, b, "sub");
    Matrix<T> out = value(a);
    const auto& bv = value(b);
    for (std::size_t i = 0; i < out.size(); ++i) out[i] -= bv[i];
    return push(std::move(out), any_grad({a, b}), [a, b](Tape& t, Node& self) {
      if (t.wants(a)) accumulate(t.grad_ref(a), self.grad, T(1));
      if (t.wants(b)) accumulate(t.grad_ref(b), self.grad, T(-1));
    });
  }

  // Elementwise product.
  Var mul(Var a, Var b) {
    require_same(a, b, "mul");
    Matrix<T> out = value(a);
    const auto& bv = value(b);
    for (std::size_t i = 0; i < out.size(); ++i) out[i] *= bv[i];
    return push(std::move(out), any_grad({a, b}), [a, b](Tape& t, Node& self) {
      if (t.wants(a)) {
        auto& g = t.grad_ref(a);
        const auto& bv = t.value(b);
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * bv[i];
      }
      if (t.wants(b)) {
        auto& g = t.grad_ref(b);
        const auto& av = t.value(a);
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * av[i];
      }
    });
  }

  Var scale(Var a, T s) {
    Matrix<T> out = value(a);
    for (auto& x : out.flat()) x *= s;
    return push(std::move(out), any_grad({a}), [a, s](Tape& t, Node& self) {
      accumulate(t.grad_ref(a), self.grad, s);
    });
  }

  // a (m x n) + bias (m x 1) broadcast across columns.
  Var add_bias(Var a, Var bias) {
    const auto& av = value(a);
    const auto& bv = value(bias);
    if (bv.cols() != 1 || bv.rows() != av.rows()) {
      throw ArgumentError("add_bias: bias " + shape_str(bv) + " for " + shape_str(av));
    }
    Matrix<T> out = av;
    for (std::size_t r = 0; r < out.rows(); ++r)
      for (auto& x : out.row(r)) x += bv[r];
    return push(std::move(out), any_grad({a, bias}), [a, bias](Tape& t, Node& self) {
      if (t.wants(a)) accumulate(t.grad_ref(a), self.grad, T(1));
      if (t.wants(bias)) {
        auto& g = t.grad_ref(bias);
        for (std::size_t r = 0; r < self.grad.rows(); ++r)
          for (T x : self.grad.row(r)) g[r] += x;
      }
    });
  }

  Var tanh(Var a) {
    Matrix<T> out = value(a);
    for (auto& x : out.flat()) x = std::tanh(x);
    return push(std::move(out), any_grad({a}), [a](Tape& t, Node& self) {
      auto& g = t.grad_ref(a);
      for (std::size_t i = 0; i < g.size(); ++i) {
        const T y = self.value[i];
        g[i] += self.grad[i] * (T(1) - y * y);
      }
    });
  }

  Var relu(Var a) {
    Matrix<T> out = value(a);
    for (auto& x : out.flat()) x = x > T(0) ? x : T(0);
    return push(std::move(out), any_grad({a}), [a](Tape& t, Node& self) {
      auto& g = t.grad_ref(a);
      for (std::size_t i = 0; i < g.size(); ++i)
        if (self.value[i] > T(0)) g[i] += self.grad[i];
    });
  }

  Var exp(Var a) {
    Matrix<T> out = value(a);
    for (auto& x : out.flat()) x = std::exp(x);
    return push(std::move(out), any_grad({a}), [a](Tape& t, Node& self) {
      auto& g = t.grad_ref(a);
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * self.value[i];
    });
  }

  // log(1 - tanh^2(a)); derivative is -2 tanh(a).
  Var log_dtanh(Var a) {
    Matrix<T> out = value(a);
    for (auto& x : out.flat()) x = hcnaf::log_dtanh(x);
    return push(std::move(out), any_grad({a}), [a](Tape& t, Node& self) {
      auto& g = t.grad_ref(a);
      const auto& av = t.value(a);
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * T(-2) * std::tanh(av[i]);
    });
  }

  Var log_matmul_exp(Var a, Var b) {
    auto lme = std::make_shared<LogMatmulExp<T>>(hcnaf::log_matmul_exp_scaled(value(a), value(b)));
    Matrix<T> out = lme->out;
    return push(std::move(out), any_grad({a, b}), [a, b, lme](Tape& t, Node& self) {
      // d out_ij / d a_ik = exp(a_ik + b_kj - out_ij) = ea_ik eb_kj / sum_ij.
      const std::size_t m = self.value.rows(), n = self.value.cols();
      Matrix<T> s(m, n);
      for (std::size_t i = 0; i < m * n; ++i) {
        if (!lme->exact[i] && self.grad[i] != T(0) && lme->sum[i] > T(0)) s[i] = self.grad[i] / lme->sum[i];
      }
      const bool ga = t.wants(a), gb = t.wants(b);
      if (ga) {
        Matrix<T> tmp(m, lme->ea.cols());
        matmul_nt_acc(s, lme->eb, tmp);
        auto& da = t.grad_ref(a);
        for (std::size_t i = 0; i < tmp.size(); ++i) da[i] += lme->ea[i] * tmp[i];
      }
      if (gb) {
        Matrix<T> tmp(lme->eb.rows(), n);
        matmul_tn_acc(lme->ea, s, tmp);
        auto& db = t.grad_ref(b);
        for (std::size_t i = 0; i < tmp.size(); ++i) db[i] += lme->eb[i] * tmp[i];
      }
      // Entries evaluated exactly take the direct route.
      const auto& av = t.value(a);
      const auto& bv = t.value(b);
      for (std::size_t i = 0; i < m; ++i) {
        for (std::size_t j = 0; j < n; ++j) {
          if (!lme->exact[i * n + j]) continue;
          const T o = self.value(i, j);
          const T gij = self.grad(i, j);
          if (gij == T(0) || o == -std::numeric_limits<T>::infinity()) continue;
          for (std::size_t k = 0; k < av.cols(); ++k) {
            const T w = gij * std::exp(av(i, k) + bv(k, j) - o);
            if (ga) t.grad_ref(a)(i, k) += w;
            if (gb) t.grad_ref(b)(k, j) += w;
          }
        }
      }
    });
  }

  Var slice_rows(Var a, std::size_t r0, std::size_t count) {
    const auto& av = value(a);
    if (r0 + count > av.rows()) throw ArgumentError("slice_rows: out of range");
    Matrix<T> out(count, av.cols());
    std::copy(av.data() + r0 * av.cols(), av.data() + (r0 + count) * av.cols(), out.data());
    return push(std::move(out), any_grad({a}), [a, r0](Tape& t, Node& self) {
      auto& g = t.grad_ref(a);
      T* dst = g.data() + r0 * g.cols();
      for (std::size_t i = 0; i < self.grad.size(); ++i) dst[i] += self.grad[i];
    });
  }

  Var concat_rows(const std::vector<Var>& parts) {
    if (parts.empty()) throw ArgumentError("concat_rows: no inputs");
    const std::size_t cols = value(parts[0]).cols();
    std::size_t rows = 0;
    for (Var p : parts) {
      if (value(p).cols() != cols) throw ArgumentError("concat_rows: column mismatch");
      rows += value(p).rows();
    }
    Matrix<T> out(rows, cols);
    std::size_t off = 0;
    for (Var p : parts) {
      const auto& pv = value(p);
      std::copy(pv.data(), pv.data() + pv.size(), out.data() + off);
      off += pv.size();
    }
    return push(std::move(out), any_grad(parts), [parts](Tape& t, Node& self) {
      std::size_t off = 0;
      for (Var p : parts) {
        const std::size_t n = t.value(p).size();
        if (t.wants(p)) {
          auto& g = t.grad_ref(p);
          for (std::size_t i = 0; i < n; ++i) g[i] += self.grad[off + i];
        }
        off += n;
      }
    });
  }

  // Reads `rows * cols` consecutive flat entries of `a` starting at `offset`
  // as a row-major rows x cols matrix.
  Var segment(Var a, std::size_t offset, std::size_t rows, std::size_t cols) {
    const auto& av = value(a);
    if (offset + rows * cols > av.size()) throw ArgumentError("segment: out of range");
    Matrix<T> out(rows, cols);
    std::copy(av.data() + offset, av.data() + offset + rows * cols, out.data());
    return push(std::move(out), any_grad({a}), [a, offset](Tape& t, Node& self) {
      auto& g = t.grad_ref(a);
      for (std::size_t i = 0; i < self.grad.size(); ++i) g[offset + i] += self.grad[i];
    });
  }

  // out.flat[i] = map[i] < 0 ? 0 : a.flat[map[i]]
  Var scatter(Var a, std::span<const std::int32_t> map, std::size_t rows, std::size_t cols) {
    const auto& av = value(a);
    if (map.size() != rows * cols) throw ArgumentError("scatter: map size mismatch");
    Matrix<T> out(rows, cols);
    for (std::size_t i = 0; i < map.size(); ++i) {
      if (map[i] >= 0) {
        if (static_cast<std::size_t>(map[i]) >= av.size()) throw ArgumentError("scatter: index");
        out[i] = av[static_cast<std::size_t>(map[i])];
      }
    }
    return push(std::move(out), any_grad({a}), [a, map](Tape& t, Node& self) {
      auto& g = t.grad_ref(a);
      for (std::size_t i = 0; i < map.size(); ++i)
        if (map[i] >= 0) g[static_cast<std::size_t>(map[i])] += self.grad[i];
    });
  }

  // Column sums: (m x n) -> (1 x n).
  Var sum_rows(Var a) {
    const auto& av = value(a);
    Matrix<T> out(1, av.cols());
    for (std::size_t r = 0; r < av.rows(); ++r)
      for (std::size_t c = 0; c < av.cols(); ++c) out[c] += av(r, c);
    return push(std::move(out), any_grad({a}), [a](Tape& t, Node& self) {
      auto& g = t.grad_ref(a);
      for (std::size_t r = 0; r < g.rows(); ++r)
        for (std::size_t c = 0; c < g.cols(); ++c) g(r, c) += self.grad[c];
    });
  }

  // Per-column standard normal log density summed over rows: (D x n) -> (1 x n).
  Var normal_logpdf(Var z) {
    const auto& zv = value(z);
    Matrix<T> out(1, zv.cols());
    for (std::size_t r = 0; r < zv.rows(); ++r)
      for (std::size_t c = 0; c < zv.cols(); ++c) out[c] += standard_normal_logpdf(zv(r, c));
    return push(std::move(out), any_grad({z}), [z](Tape& t, Node& self) {
      auto& g = t.grad_ref(z);
      const auto& zv = t.value(z);
      for (std::size_t r = 0; r < g.rows(); ++r)
        for (std::size_t c = 0; c < g.cols(); ++c) g(r, c) -= self.grad[c] * zv(r, c);
    });
  }

  Var sum(Var a) {
    T s = T(0);
    for (T x : value(a).flat()) s += x;
    return push(Matrix<T>(1, 1, s), any_grad({a}), [a](Tape& t, Node& self) {
      auto& g = t.grad_ref(a);
      for (auto& x : g.flat()) x += self.grad[0];
    });
  }

  Var mean(Var a) {
    const std::size_t n = value(a).size();
    if (n == 0) throw ArgumentError("mean: empty input");
    return scale(sum(a), T(1) / static_cast<T>(n));
  }

 private:
  struct Node {
    Matrix<T> value;
    Matrix<T> grad;
    bool needs_grad = false;
    std::function<void(Tape&, Node&)> backprop;
  };

  static std::uint64_t next_tape_id() {
    static std::atomic<std::uint64_t> counter{1};
    return counter++;
  }

  const Node& node(Var v) const {
    if (v.tape != tape_id_ || v.id >= nodes_.size()) {
      throw ContractError("Tape: handle was not recorded on this tape");
    }
    return nodes_[v.id];
  }

  bool wants(Var v) const { return nodes_[v.id].needs_grad; }

  Matrix<T>& grad_ref(Var v) {
    Node& n = nodes_[v.id];
    if (n.grad.empty()) n.grad = Matrix<T>(n.value.rows(), n.value.cols());
    return n.grad;
  }

  bool any_grad(std::initializer_list<Var> vs) const {
    for (Var v : vs)
      if (node(v).needs_grad) return true;
    return false;
  }
  bool any_grad(const std::vector<Var>& vs) const {
    for (Var v : vs)
      if (node(v).needs_grad) return true;
    return false;
  }

  void require_same(Var a, Var b, const char* op) const {
    if (!value(a).same_shape(value(b))) {
      throw ArgumentError(std::string(op) + ": shape mismatch " + shape_str(value(a)) + " vs " +
                          shape_str(value(b)));
    }
  }

  static void accumulate(Matrix<T>& dst, const Matrix<T>& src, T s) {
    for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += s * src[i];
  }

  Var push(Matrix<T> value, bool needs_grad, std::function<void(Tape&, Node&)> backprop) {
    if (backward_done_) throw ContractError("Tape: cannot record after backward()");
    nodes_.push_back(Node{std::move(value), {}, needs_grad, needs_grad ? std::move(backprop) : nullptr});
    return Var{static_cast<std::uint32_t>(nodes_.size() - 1), tape_id_};
  }

  std::uint64_t tape_id_;
  std::vector<Node> nodes_;
  bool backward_done_ = false;
};

// Evaluates f on a fresh tape with `at` registered as parameters and returns
// d f / d at. `f` receives the tape and the parameter handles and must
// return a 1x1 result built from tape primitives.
template <typename T, typename F>
std::vector<Matrix<T>> gradient(F&& f, const std::vector<Matrix<T>>& at) {
  Tape<T> tape;
  std::vector<typename Tape<T>::Var> params;
  params.reserve(at.size());
  for (const auto& p : at) params.push_back(tape.parameter(p));
  auto root = f(tape, std::span<const typename Tape<T>::Var>(params));
  tape.backward(root);
  std::vector<Matrix<T>> grads;
  grads.reserve(params.size());
  for (auto p : params) grads.push_back(tape.grad(p));
  return grads;
}

}  // namespace hcnaf
