#pragma once

// Dense row-major matrices and a small reverse-mode autodiff tape.
//
// Everything is templated on the scalar type: models train in float, while the
// gradient checks instantiate the same code paths in double.

#include <algorithm>
#include <cassert>
#include <cmath>
#include <functional>
#include <limits>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "geocap/error.hpp"
#include "geocap/util.hpp"

namespace geocap::nn {

template <typename T>
class Tensor {
 public:
  Tensor() = default;
  Tensor(int rows, int cols, T fill = T{0})
      : rows_(rows), cols_(cols), data_(static_cast<std::size_t>(rows) * cols, fill) {}

  static Tensor row_vector(std::span<const T> values) {
    Tensor t(1, static_cast<int>(values.size()));
    std::copy(values.begin(), values.end(), t.data_.begin());
    return t;
  }

  int rows() const { return rows_; }
  int cols() const { return cols_; }
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  T& operator()(int r, int c) { return data_[static_cast<std::size_t>(r) * cols_ + c]; }
  T operator()(int r, int c) const { return data_[static_cast<std::size_t>(r) * cols_ + c]; }

  T* row(int r) { return data_.data() + static_cast<std::size_t>(r) * cols_; }
  const T* row(int r) const { return data_.data() + static_cast<std::size_t>(r) * cols_; }

  std::span<T> values() { return data_; }
  std::span<const T> values() const { return data_; }

  void fill(T v) { std::fill(data_.begin(), data_.end(), v); }

  template <typename U>
  Tensor<U> cast() const {
    Tensor<U> out(rows_, cols_);
    std::transform(data_.begin(), data_.end(), out.values().begin(),
                   [](T v) { return static_cast<U>(v); });
    return out;
  }

  bool same_shape(const Tensor& o) const { return rows_ == o.rows_ && cols_ == o.cols_; }

 private:
  int rows_ = 0;
  int cols_ = 0;
  std::vector<T> data_;
};

/// C += op(A) * op(B), where op transposes when the flag is set.
template <typename T>
void gemm_accumulate(const Tensor<T>& a, bool ta, const Tensor<T>& b, bool tb, Tensor<T>& c) {
  const int n = ta ? a.cols() : a.rows();
  const int k = ta ? a.rows() : a.cols();
  const int m = tb ? b.rows() : b.cols();
  assert((tb ? b.cols() : b.rows()) == k);
  assert(c.rows() == n && c.cols() == m);
  if (!ta && !tb) {
    for (int i = 0; i < n; ++i) {
      T* __restrict crow = c.row(i);
      const T* arow = a.row(i);
      for (int p = 0; p < k; ++p) {
        const T av = arow[p];
        const T* __restrict brow = b.row(p);
        for (int j = 0; j < m; ++j) crow[j] += av * brow[j];
      }
    }
  } else if (!ta && tb) {
    for (int i = 0; i < n; ++i) {
      const T* arow = a.row(i);
      T* crow = c.row(i);
      for (int j = 0; j < m; ++j) {
        const T* brow = b.row(j);
        T acc{0};
        for (int p = 0; p < k; ++p) acc += arow[p] * brow[p];
        crow[j] += acc;
      }
    }
  } else if (ta && !tb) {
    for (int p = 0; p < k; ++p) {
      const T* arow = a.row(p);
      const T* __restrict brow = b.row(p);
      for (int i = 0; i < n; ++i) {
        const T av = arow[i];
        T* __restrict crow = c.row(i);
        for (int j = 0; j < m; ++j) crow[j] += av * brow[j];
      }
    }
  } else {
    for (int i = 0; i < n; ++i)
      for (int j = 0; j < m; ++j) {
        T acc{0};
        for (int p = 0; p < k; ++p) acc += a(p, i) * b(j, p);
        c(i, j) += acc;
      }
  }
}

/// A named trainable tensor with its accumulated gradient.
template <typename T>
struct Parameter {
  std::string name;
  Tensor<T> value;
  Tensor<T> grad;

  Parameter() = default;
  Parameter(std::string n, Tensor<T> v)
      : name(std::move(n)), value(std::move(v)), grad(value.rows(), value.cols()) {}

  void zero_grad() { grad.fill(T{0}); }
};

struct Var {
  int id = -1;
};

template <typename T>
class Graph {
 public:
  /// In training mode dropout is active and draws its masks from `rng`.
  explicit Graph(bool training = false, Rng* rng = nullptr) : training_(training), rng_(rng) {}

  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;

  bool training() const { return training_; }

  Var constant(Tensor<T> value) { return push(std::move(value), false); }

  Var param(Parameter<T>& p) {
    Var v = push(p.value, true);
    Parameter<T>* target = &p;
    nodes_[v.id].back = [this, v, target] {
      const auto& g = nodes_[v.id].grad;
      auto dst = target->grad.values();
      auto src = g.values();
      for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += src[i];
    };
    return v;
  }

  const Tensor<T>& value(Var v) const { return nodes_[v.id].value; }
  const Tensor<T>& grad(Var v) { return grad_of(v.id); }
  int rows(Var v) const { return nodes_[v.id].value.rows(); }
  int cols(Var v) const { return nodes_[v.id].value.cols(); }

  Var matmul(Var a, Var b, bool ta = false, bool tb = false) {
    const auto& av = value(a);
    const auto& bv = value(b);
    const int n = ta ? av.cols() : av.rows();
    const int k = ta ? av.rows() : av.cols();
    const int kb = tb ? bv.cols() : bv.rows();
    const int m = tb ? bv.rows() : bv.cols();
    if (k != kb) throw ConfigError("matmul shape mismatch");
    Tensor<T> out(n, m);
    gemm_accumulate(av, ta, bv, tb, out);
    Var c = push(std::move(out), needs(a) || needs(b));
    set_back(c, [this, a, b, c, ta, tb] {
      const auto& gc = grad_of(c.id);
      if (needs(a)) {
        auto& ga = grad_of(a.id);
        if (!ta) gemm_accumulate(gc, false, value(b), !tb, ga);
        else gemm_accumulate(value(b), tb, gc, true, ga);
      }
      if (needs(b)) {
        auto& gb = grad_of(b.id);
        if (!tb) gemm_accumulate(value(a), !ta, gc, false, gb);
        else gemm_accumulate(gc, true, value(a), ta, gb);
      }
    });
    return c;
  }

  Var add(Var a, Var b) {
    require_same(a, b, "add");
    Tensor<T> out = value(a);
    auto o = out.values();
    auto bv = value(b).values();
    for (std::size_t i = 0; i < o.size(); ++i) o[i] += bv[i];
    Var c = push(std::move(out), needs(a) || needs(b));
    set_back(c, [this, a, b, c] {
      for (Var x : {a, b}) {
        if (!needs(x)) continue;
        auto gx = grad_of(x.id).values();
        auto gc = grad_of(c.id).values();
        for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += gc[i];
      }
    });
    return c;
  }

  /// Adds a 1 x cols row vector to every row.
  Var add_row(Var a, Var row) {
    const auto& av = value(a);
    const auto& rv = value(row);
    if (rv.rows() != 1 || rv.cols() != av.cols()) throw ConfigError("add_row shape mismatch");
    Tensor<T> out = av;
    for (int i = 0; i < out.rows(); ++i) {
      T* o = out.row(i);
      for (int j = 0; j < out.cols(); ++j) o[j] += rv(0, j);
    }
    Var c = push(std::move(out), needs(a) || needs(row));
    set_back(c, [this, a, row, c] {
      const auto& gc = grad_of(c.id);
      if (needs(a)) {
        auto ga = grad_of(a.id).values();
        auto g = gc.values();
        for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += g[i];
      }
      if (needs(row)) {
        auto& gr = grad_of(row.id);
        for (int i = 0; i < gc.rows(); ++i)
          for (int j = 0; j < gc.cols(); ++j) gr(0, j) += gc(i, j);
      }
    });
    return c;
  }

  /// Elementwise (Hadamard) product.
  Var mul(Var a, Var b) {
    require_same(a, b, "mul");
    Tensor<T> out = value(a);
    auto o = out.values();
    auto bv = value(b).values();
    for (std::size_t i = 0; i < o.size(); ++i) o[i] *= bv[i];
    Var c = push(std::move(out), needs(a) || needs(b));
    set_back(c, [this, a, b, c] {
      auto gc = grad_of(c.id).values();
      if (needs(a)) {
        auto ga = grad_of(a.id).values();
        auto bv = value(b).values();
        for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += gc[i] * bv[i];
      }
      if (needs(b)) {
        auto gb = grad_of(b.id).values();
        auto av = value(a).values();
        for (std::size_t i = 0; i < gb.size(); ++i) gb[i] += gc[i] * av[i];
      }
    });
    return c;
  }

  /// Multiplies every row elementwise by a 1 x cols row vector.
  Var mul_row(Var a, Var row) {
    const auto& av = value(a);
    const auto& rv = value(row);
    if (rv.rows() != 1 || rv.cols() != av.cols()) throw ConfigError("mul_row shape mismatch");
    Tensor<T> out = av;
    for (int i = 0; i < out.rows(); ++i) {
      T* o = out.row(i);
      for (int j = 0; j < out.cols(); ++j) o[j] *= rv(0, j);
    }
    Var c = push(std::move(out), needs(a) || needs(row));
    set_back(c, [this, a, row, c] {
      const auto& gc = grad_of(c.id);
      if (needs(a)) {
        auto& ga = grad_of(a.id);
        const auto& rv = value(row);
        for (int i = 0; i < gc.rows(); ++i)
          for (int j = 0; j < gc.cols(); ++j) ga(i, j) += gc(i, j) * rv(0, j);
      }
      if (needs(row)) {
        auto& gr = grad_of(row.id);
        const auto& av = value(a);
        for (int i = 0; i < gc.rows(); ++i)
          for (int j = 0; j < gc.cols(); ++j) gr(0, j) += gc(i, j) * av(i, j);
      }
    });
    return c;
  }

  Var scale(Var a, T s) {
    Tensor<T> out = value(a);
    for (auto& x : out.values()) x *= s;
    Var c = push(std::move(out), needs(a));
    set_back(c, [this, a, c, s] {
      auto ga = grad_of(a.id).values();
      auto gc = grad_of(c.id).values();
      for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += gc[i] * s;
    });
    return c;
  }

  Var relu(Var a) {
    Tensor<T> out = value(a);
    for (auto& x : out.values()) x = x > T{0} ? x : T{0};
    Var c = push(std::move(out), needs(a));
    set_back(c, [this, a, c] {
      auto ga = grad_of(a.id).values();
      auto gc = grad_of(c.id).values();
      auto av = value(a).values();
      for (std::size_t i = 0; i < ga.size(); ++i)
        if (av[i] > T{0}) ga[i] += gc[i];
    });
    return c;
  }

  /// Row-wise softmax. With `causal`, entry (i, j) is masked out for j > i.
  Var softmax_rows(Var a, bool causal = false) {
    const auto& av = value(a);
    Tensor<T> out(av.rows(), av.cols());
    for (int i = 0; i < av.rows(); ++i) {
      const int limit = causal ? std::min(av.cols(), i + 1) : av.cols();
      if (limit <= 0) continue;
      T mx = av(i, 0);
      for (int j = 1; j < limit; ++j) mx = std::max(mx, av(i, j));
      T sum{0};
      for (int j = 0; j < limit; ++j) {
        out(i, j) = std::exp(av(i, j) - mx);
        sum += out(i, j);
      }
      for (int j = 0; j < limit; ++j) out(i, j) /= sum;
    }
    Var c = push(std::move(out), needs(a));
    set_back(c, [this, a, c] {
      const auto& p = value(c);
      const auto& gc = grad_of(c.id);
      auto& ga = grad_of(a.id);
      for (int i = 0; i < p.rows(); ++i) {
        T dot{0};
        for (int j = 0; j < p.cols(); ++j) dot += gc(i, j) * p(i, j);
        for (int j = 0; j < p.cols(); ++j) ga(i, j) += p(i, j) * (gc(i, j) - dot);
      }
    });
    return c;
  }

  /// Per-row layer normalization with 1 x cols gain and bias.
  Var layer_norm(Var a, Var gain, Var bias, T eps = T(1e-5)) {
    const auto& av = value(a);
    const int n = av.rows(), m = av.cols();
    Tensor<T> xhat(n, m);
    std::vector<T> inv_std(static_cast<std::size_t>(n));
    Tensor<T> out(n, m);
    const auto& g = value(gain);
    const auto& b = value(bias);
    for (int i = 0; i < n; ++i) {
      T mean{0};
      for (int j = 0; j < m; ++j) mean += av(i, j);
      mean /= static_cast<T>(m);
      T var{0};
      for (int j = 0; j < m; ++j) var += (av(i, j) - mean) * (av(i, j) - mean);
      var /= static_cast<T>(m);
      inv_std[i] = T{1} / std::sqrt(var + eps);
      for (int j = 0; j < m; ++j) {
        xhat(i, j) = (av(i, j) - mean) * inv_std[i];
        out(i, j) = xhat(i, j) * g(0, j) + b(0, j);
      }
    }
    Var c = push(std::move(out), needs(a) || needs(gain) || needs(bias));
    set_back(c, [this, a, gain, bias, c, xhat = std::move(xhat), inv_std = std::move(inv_std)] {
      const auto& gc = grad_of(c.id);
      const int n = gc.rows(), m = gc.cols();
      if (needs(gain) || needs(bias)) {
        auto& gg = grad_of(gain.id);
        auto& gb = grad_of(bias.id);
        for (int i = 0; i < n; ++i)
          for (int j = 0; j < m; ++j) {
            gg(0, j) += gc(i, j) * xhat(i, j);
            gb(0, j) += gc(i, j);
          }
      }
      if (needs(a)) {
        auto& ga = grad_of(a.id);
        const auto& g = value(gain);
        std::vector<T> dx(static_cast<std::size_t>(m));
        for (int i = 0; i < n; ++i) {
          T mean_d{0}, mean_dx{0};
          for (int j = 0; j < m; ++j) {
            dx[j] = gc(i, j) * g(0, j);
            mean_d += dx[j];
            mean_dx += dx[j] * xhat(i, j);
          }
          mean_d /= static_cast<T>(m);
          mean_dx /= static_cast<T>(m);
          for (int j = 0; j < m; ++j)
            ga(i, j) += inv_std[i] * (dx[j] - mean_d - xhat(i, j) * mean_dx);
        }
      }
    });
    return c;
  }

  /// Inverted dropout; identity outside training mode or when p == 0.
  Var dropout(Var a, double p) {
    if (!training_ || p <= 0.0) return a;
    if (rng_ == nullptr) throw ConfigError("dropout in training mode needs an rng");
    const auto& av = value(a);
    Tensor<T> mask(av.rows(), av.cols());
    const T keep_scale = static_cast<T>(1.0 / (1.0 - p));
    for (auto& x : mask.values()) x = uniform01(*rng_) < p ? T{0} : keep_scale;
    return mul(a, constant(std::move(mask)));
  }

  Var concat_rows(std::span<const Var> parts) {
    if (parts.empty()) throw ConfigError("concat_rows of nothing");
    const int m = cols(parts[0]);
    int n = 0;
    bool any = false;
    for (Var p : parts) {
      if (cols(p) != m) throw ConfigError("concat_rows width mismatch");
      n += rows(p);
      any = any || needs(p);
    }
    Tensor<T> out(n, m);
    int r = 0;
    for (Var p : parts) {
      const auto& pv = value(p);
      std::copy(pv.values().begin(), pv.values().end(), out.row(r));
      r += pv.rows();
    }
    Var c = push(std::move(out), any);
    std::vector<Var> ps(parts.begin(), parts.end());
    set_back(c, [this, c, ps = std::move(ps)] {
      const auto& gc = grad_of(c.id);
      int r = 0;
      for (Var p : ps) {
        const int pr = rows(p);
        if (needs(p)) {
          auto& gp = grad_of(p.id);
          for (int i = 0; i < pr; ++i)
            for (int j = 0; j < gc.cols(); ++j) gp(i, j) += gc(r + i, j);
        }
        r += pr;
      }
    });
    return c;
  }

  Var concat_cols(std::span<const Var> parts) {
    if (parts.empty()) throw ConfigError("concat_cols of nothing");
    const int n = rows(parts[0]);
    int m = 0;
    bool any = false;
    for (Var p : parts) {
      if (rows(p) != n) throw ConfigError("concat_cols height mismatch");
      m += cols(p);
      any = any || needs(p);
    }
    Tensor<T> out(n, m);
    int c0 = 0;
    for (Var p : parts) {
      const auto& pv = value(p);
      for (int i = 0; i < n; ++i)
        std::copy(pv.row(i), pv.row(i) + pv.cols(), out.row(i) + c0);
      c0 += pv.cols();
    }
    Var c = push(std::move(out), any);
    std::vector<Var> ps(parts.begin(), parts.end());
    set_back(c, [this, c, ps = std::move(ps)] {
      const auto& gc = grad_of(c.id);
      int c0 = 0;
      for (Var p : ps) {
        const int pc = cols(p);
        if (needs(p)) {
          auto& gp = grad_of(p.id);
          for (int i = 0; i < gc.rows(); ++i)
            for (int j = 0; j < pc; ++j) gp(i, j) += gc(i, c0 + j);
        }
        c0 += pc;
      }
    });
    return c;
  }

  Var slice_rows(Var a, int start, int count) {
    const auto& av = value(a);
    if (start < 0 || count < 0 || start + count > av.rows()) throw ConfigError("slice_rows out of range");
    Tensor<T> out(count, av.cols());
    for (int i = 0; i < count; ++i) std::copy(av.row(start + i), av.row(start + i) + av.cols(), out.row(i));
    Var c = push(std::move(out), needs(a));
    set_back(c, [this, a, c, start] {
      const auto& gc = grad_of(c.id);
      auto& ga = grad_of(a.id);
      for (int i = 0; i < gc.rows(); ++i)
        for (int j = 0; j < gc.cols(); ++j) ga(start + i, j) += gc(i, j);
    });
    return c;
  }

  Var slice_cols(Var a, int start, int count) {
    const auto& av = value(a);
    if (start < 0 || count < 0 || start + count > av.cols()) throw ConfigError("slice_cols out of range");
    Tensor<T> out(av.rows(), count);
    for (int i = 0; i < av.rows(); ++i) std::copy(av.row(i) + start, av.row(i) + start + count, out.row(i));
    Var c = push(std::move(out), needs(a));
    set_back(c, [this, a, c, start] {
      const auto& gc = grad_of(c.id);
      auto& ga = grad_of(a.id);
      for (int i = 0; i < gc.rows(); ++i)
        for (int j = 0; j < gc.cols(); ++j) ga(i, start + j) += gc(i, j);
    });
    return c;
  }

  /// Embedding lookup: out row i = table row idx[i].
  Var gather_rows(Var table, std::vector<int> idx) {
    const auto& tv = value(table);
    Tensor<T> out(static_cast<int>(idx.size()), tv.cols());
    for (std::size_t i = 0; i < idx.size(); ++i) {
      if (idx[i] < 0 || idx[i] >= tv.rows()) throw DataError("embedding index out of range");
      std::copy(tv.row(idx[i]), tv.row(idx[i]) + tv.cols(), out.row(static_cast<int>(i)));
    }
    Var c = push(std::move(out), needs(table));
    set_back(c, [this, table, c, idx = std::move(idx)] {
      const auto& gc = grad_of(c.id);
      auto& gt = grad_of(table.id);
      for (std::size_t i = 0; i < idx.size(); ++i)
        for (int j = 0; j < gc.cols(); ++j) gt(idx[i], j) += gc(static_cast<int>(i), j);
    });
    return c;
  }

  /// out row i = row picks[i].second of sources[picks[i].first].
  Var pick_rows(std::span<const Var> sources, std::vector<std::pair<int, int>> picks) {
    if (sources.empty()) throw ConfigError("pick_rows of nothing");
    const int m = cols(sources[0]);
    bool any = false;
    for (Var s : sources) {
      if (cols(s) != m) throw ConfigError("pick_rows width mismatch");
      any = any || needs(s);
    }
    Tensor<T> out(static_cast<int>(picks.size()), m);
    for (std::size_t i = 0; i < picks.size(); ++i) {
      const auto [src, r] = picks[i];
      if (src < 0 || src >= static_cast<int>(sources.size()) || r < 0 || r >= rows(sources[src]))
        throw DataError("pick_rows index out of range");
      const auto& sv = value(sources[src]);
      std::copy(sv.row(r), sv.row(r) + m, out.row(static_cast<int>(i)));
    }
    Var c = push(std::move(out), any);
    std::vector<Var> ss(sources.begin(), sources.end());
    set_back(c, [this, c, ss = std::move(ss), picks = std::move(picks)] {
      const auto& gc = grad_of(c.id);
      for (std::size_t i = 0; i < picks.size(); ++i) {
        const auto [src, r] = picks[i];
        if (!needs(ss[src])) continue;
        auto& gs = grad_of(ss[src].id);
        for (int j = 0; j < gc.cols(); ++j) gs(r, j) += gc(static_cast<int>(i), j);
      }
    });
    return c;
  }

  /// Mean over rows of -log softmax(row)[target]. Returns a 1 x 1 node.
  Var cross_entropy(Var logits, std::vector<int> targets) {
    const auto& lv = value(logits);
    if (static_cast<int>(targets.size()) != lv.rows() || lv.rows() == 0)
      throw ConfigError("cross_entropy target count mismatch");
    Tensor<T> probs(lv.rows(), lv.cols());
    T loss{0};
    for (int i = 0; i < lv.rows(); ++i) {
      if (targets[i] < 0 || targets[i] >= lv.cols()) throw DataError("cross_entropy target out of range");
      T mx = lv(i, 0);
      for (int j = 1; j < lv.cols(); ++j) mx = std::max(mx, lv(i, j));
      T sum{0};
      for (int j = 0; j < lv.cols(); ++j) {
        probs(i, j) = std::exp(lv(i, j) - mx);
        sum += probs(i, j);
      }
      for (int j = 0; j < lv.cols(); ++j) probs(i, j) /= sum;
      loss += (mx + std::log(sum)) - lv(i, targets[i]);
    }
    loss /= static_cast<T>(lv.rows());
    Var c = push(Tensor<T>(1, 1, loss), needs(logits));
    set_back(c, [this, logits, c, probs = std::move(probs), targets = std::move(targets)] {
      const T g = grad_of(c.id)(0, 0) / static_cast<T>(probs.rows());
      auto& gl = grad_of(logits.id);
      for (int i = 0; i < probs.rows(); ++i) {
        for (int j = 0; j < probs.cols(); ++j) gl(i, j) += g * probs(i, j);
        gl(i, targets[i]) -= g;
      }
    });
    return c;
  }

  Var sum(Var a) {
    T s{0};
    for (T x : value(a).values()) s += x;
    Var c = push(Tensor<T>(1, 1, s), needs(a));
    set_back(c, [this, a, c] {
      const T g = grad_of(c.id)(0, 0);
      for (auto& x : grad_of(a.id).values()) x += g;
    });
    return c;
  }

  /// Seeds d(loss)/d(loss) = 1 and propagates to every parameter leaf.
  void backward(Var loss) {
    if (value(loss).size() != 1) throw ConfigError("backward needs a scalar node");
    grad_of(loss.id).fill(T{1});
    for (int i = loss.id; i >= 0; --i) {
      Node& n = nodes_[i];
      if (!n.needs_grad || !n.has_grad || !n.back) continue;
      n.back();
    }
  }

  std::size_t node_count() const { return nodes_.size(); }

 private:
  struct Node {
    Tensor<T> value;
    Tensor<T> grad;
    bool needs_grad = false;
    bool has_grad = false;
    std::function<void()> back;
  };

  Var push(Tensor<T> value, bool needs_grad) {
    Node n;
    n.value = std::move(value);
    n.needs_grad = needs_grad;
    nodes_.push_back(std::move(n));
    return Var{static_cast<int>(nodes_.size()) - 1};
  }

  template <typename F>
  void set_back(Var v, F&& f) {
    if (nodes_[v.id].needs_grad) nodes_[v.id].back = std::forward<F>(f);
  }

  bool needs(Var v) const { return nodes_[v.id].needs_grad; }

  Tensor<T>& grad_of(int id) {
    Node& n = nodes_[id];
    if (!n.has_grad) {
      n.grad = Tensor<T>(n.value.rows(), n.value.cols());
      n.has_grad = true;
    }
    return n.grad;
  }

  void require_same(Var a, Var b, const char* op) const {
    if (!value(a).same_shape(value(b))) throw ConfigError(std::string(op) + " shape mismatch");
  }

  bool training_;
  Rng* rng_;
  std::vector<Node> nodes_;
};

}  // namespace geocap::nn
