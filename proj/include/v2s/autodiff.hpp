#pragma once

// Reverse-mode autodiff over a define-by-run tape. Nodes own their value and
// gradient; backward() walks the graph once in reverse topological order.

#include <algorithm>
#include <cstdint>
#include <functional>
#include <memory>
#include <unordered_set>
#include <utility>
#include <vector>

#include "v2s/tensor.hpp"

namespace v2s {

enum class Mode { train, infer };
enum class Padding { same, valid };
enum class Act { relu, leaky_relu, tanh_, sigmoid };

template <typename T>
struct Node;

template <typename T>
using NodePtr = std::shared_ptr<Node<T>>;

template <typename T>
struct Node {
  Tensor<T> value;
  Tensor<T> grad;  // sized lazily on first backward touch
  std::vector<NodePtr<T>> parents;
  std::function<void(Node<T>&)> backprop;
  const char* op = "leaf";
  bool requires_grad = false;

  void ensure_grad() {
    if (grad.data.empty()) grad = Tensor<T>::zeros(value.shape);
  }
  void zero_grad() {
    std::fill(grad.data.begin(), grad.data.end(), T(0));
  }
};

template <typename T>
NodePtr<T> make_leaf(Tensor<T> v, bool requires_grad = false, const char* op = "leaf") {
  auto n = std::make_shared<Node<T>>();
  n->value = std::move(v);
  n->requires_grad = requires_grad;
  n->op = op;
  return n;
}

template <typename T>
NodePtr<T> constant(Tensor<T> v) {
  return make_leaf(std::move(v), false, "const");
}

template <typename T, typename F>
NodePtr<T> make_op(const char* op, Tensor<T> value, std::vector<NodePtr<T>> parents, F&& back) {
  auto n = std::make_shared<Node<T>>();
  n->value = std::move(value);
  n->op = op;
  for (auto& p : parents) n->requires_grad = n->requires_grad || p->requires_grad;
  n->parents = std::move(parents);
  if (n->requires_grad) n->backprop = std::forward<F>(back);
  return n;
}

// ---- raw GEMM kernels (row-major, accumulate into C) ----

template <typename T>
void gemm_nn_acc(const T* A, const T* B, T* C, std::size_t m, std::size_t k, std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    const T* Ai = A + i * k;
    T* Ci = C + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      T a = Ai[p];
      if (a == T(0)) continue;
      const T* Bp = B + p * n;
      for (std::size_t j = 0; j < n; ++j) Ci[j] += a * Bp[j];
    }
  }
}

// C[m×k] += A[m×n] · B[k×n]^T
template <typename T>
void gemm_nt_acc(const T* A, const T* B, T* C, std::size_t m, std::size_t n, std::size_t k) {
  for (std::size_t i = 0; i < m; ++i) {
    const T* Ai = A + i * n;
    T* Ci = C + i * k;
    for (std::size_t p = 0; p < k; ++p) {
      const T* Bp = B + p * n;
      T acc = T(0);
      for (std::size_t j = 0; j < n; ++j) acc += Ai[j] * Bp[j];
      Ci[p] += acc;
    }
  }
}

// C[k×n] += A[m×k]^T · B[m×n]
template <typename T>
void gemm_tn_acc(const T* A, const T* B, T* C, std::size_t m, std::size_t k, std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    const T* Ai = A + i * k;
    const T* Bi = B + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      T a = Ai[p];
      if (a == T(0)) continue;
      T* Cp = C + p * n;
      for (std::size_t j = 0; j < n; ++j) Cp[j] += a * Bi[j];
    }
  }
}

// ---- elementwise ----

template <typename T>
NodePtr<T> add(NodePtr<T> a, NodePtr<T> b) {
  require_same_shape(a->value.shape, b->value.shape, "add");
  Tensor<T> out(a->value.shape);
  for (std::size_t i = 0; i < out.size(); ++i) out.data[i] = a->value.data[i] + b->value.data[i];
  return make_op<T>("add", std::move(out), {a, b}, [](Node<T>& self) {
    for (int p = 0; p < 2; ++p) {
      auto& par = self.parents[p];
      if (!par->requires_grad) continue;
      par->ensure_grad();
      for (std::size_t i = 0; i < self.grad.size(); ++i) par->grad.data[i] += self.grad.data[i];
    }
  });
}

template <typename T>
NodePtr<T> sub(NodePtr<T> a, NodePtr<T> b) {
  require_same_shape(a->value.shape, b->value.shape, "sub");
  Tensor<T> out(a->value.shape);
  for (std::size_t i = 0; i < out.size(); ++i) out.data[i] = a->value.data[i] - b->value.data[i];
  return make_op<T>("sub", std::move(out), {a, b}, [](Node<T>& self) {
    auto& a = self.parents[0];
    auto& b = self.parents[1];
    if (a->requires_grad) {
      a->ensure_grad();
      for (std::size_t i = 0; i < self.grad.size(); ++i) a->grad.data[i] += self.grad.data[i];
    }
    if (b->requires_grad) {
      b->ensure_grad();
      for (std::size_t i = 0; i < self.grad.size(); ++i) b->grad.data[i] -= self.grad.data[i];
    }
  });
}

template <typename T>
NodePtr<T> mul(NodePtr<T> a, NodePtr<T> b) {
  require_same_shape(a->value.shape, b->value.shape, "mul");
  Tensor<T> out(a->value.shape);
  for (std::size_t i = 0; i < out.size(); ++i) out.data[i] = a->value.data[i] * b->value.data[i];
  return make_op<T>("mul", std::move(out), {a, b}, [](Node<T>& self) {
    auto& a = self.parents[0];
    auto& b = self.parents[1];
    if (a->requires_grad) {
      a->ensure_grad();
      for (std::size_t i = 0; i < self.grad.size(); ++i)
        a->grad.data[i] += self.grad.data[i] * b->value.data[i];
    }
    if (b->requires_grad) {
      b->ensure_grad();
      for (std::size_t i = 0; i < self.grad.size(); ++i)
        b->grad.data[i] += self.grad.data[i] * a->value.data[i];
    }
  });
}

// out = scale*x + shift, elementwise
template <typename T>
NodePtr<T> affine(NodePtr<T> x, T scale, T shift) {
  Tensor<T> out(x->value.shape);
  for (std::size_t i = 0; i < out.size(); ++i) out.data[i] = scale * x->value.data[i] + shift;
  return make_op<T>("affine", std::move(out), {x}, [scale](Node<T>& self) {
    auto& x = self.parents[0];
    x->ensure_grad();
    for (std::size_t i = 0; i < self.grad.size(); ++i) x->grad.data[i] += scale * self.grad.data[i];
  });
}

template <typename T>
NodePtr<T> neg(NodePtr<T> x) {
  return affine(x, T(-1), T(0));
}
template <typename T>
NodePtr<T> one_minus(NodePtr<T> x) {
  return affine(x, T(-1), T(1));
}

// ---- activations ----

template <typename T>
NodePtr<T> activation(NodePtr<T> x, Act kind, T alpha = T(0.3)) {
  Tensor<T> out(x->value.shape);
  switch (kind) {
    case Act::relu:
      for (std::size_t i = 0; i < out.size(); ++i)
        out.data[i] = x->value.data[i] > T(0) ? x->value.data[i] : T(0);
      break;
    case Act::leaky_relu:
      for (std::size_t i = 0; i < out.size(); ++i)
        out.data[i] = x->value.data[i] > T(0) ? x->value.data[i] : alpha * x->value.data[i];
      break;
    case Act::tanh_:
      for (std::size_t i = 0; i < out.size(); ++i) out.data[i] = std::tanh(x->value.data[i]);
      break;
    case Act::sigmoid:
      for (std::size_t i = 0; i < out.size(); ++i)
        out.data[i] = T(1) / (T(1) + std::exp(-x->value.data[i]));
      break;
  }
  return make_op<T>("activation", std::move(out), {x}, [kind, alpha](Node<T>& self) {
    auto& x = self.parents[0];
    x->ensure_grad();
    switch (kind) {
      case Act::relu:
        for (std::size_t i = 0; i < self.grad.size(); ++i)
          if (x->value.data[i] > T(0)) x->grad.data[i] += self.grad.data[i];
        break;
      case Act::leaky_relu:
        for (std::size_t i = 0; i < self.grad.size(); ++i)
          x->grad.data[i] += self.grad.data[i] * (x->value.data[i] > T(0) ? T(1) : alpha);
        break;
      case Act::tanh_:
        for (std::size_t i = 0; i < self.grad.size(); ++i) {
          T y = self.value.data[i];
          x->grad.data[i] += self.grad.data[i] * (T(1) - y * y);
        }
        break;
      case Act::sigmoid:
        for (std::size_t i = 0; i < self.grad.size(); ++i) {
          T y = self.value.data[i];
          x->grad.data[i] += self.grad.data[i] * y * (T(1) - y);
        }
        break;
    }
  });
}

// ---- dropout (inverted scaling) ----

template <typename T>
NodePtr<T> dropout(NodePtr<T> x, double rate, Mode mode, Rng& rng) {
  if (rate < 0.0 || rate >= 1.0)
    throw ConfigError("dropout rate must be in [0,1), got " + std::to_string(rate));
  if (mode == Mode::infer || rate == 0.0) return x;
  T inv = T(1.0 / (1.0 - rate));
  std::vector<T> mask(x->value.size());
  for (auto& m : mask) m = rng.uniform() < rate ? T(0) : inv;
  Tensor<T> out(x->value.shape);
  for (std::size_t i = 0; i < out.size(); ++i) out.data[i] = x->value.data[i] * mask[i];
  return make_op<T>("dropout", std::move(out), {x}, [mask = std::move(mask)](Node<T>& self) {
    auto& x = self.parents[0];
    x->ensure_grad();
    for (std::size_t i = 0; i < self.grad.size(); ++i)
      x->grad.data[i] += self.grad.data[i] * mask[i];
  });
}

// ---- matmul / dense ----

template <typename T>
NodePtr<T> matmul(NodePtr<T> a, NodePtr<T> b) {
  if (a->value.rank() != 2 || b->value.rank() != 2 || a->value.shape[1] != b->value.shape[0])
    throw ShapeError("matmul: " + shape_str(a->value.shape) + " x " + shape_str(b->value.shape));
  std::size_t m = a->value.shape[0], k = a->value.shape[1], n = b->value.shape[1];
  Tensor<T> out(Shape{m, n});
  gemm_nn_acc(a->value.data.data(), b->value.data.data(), out.data.data(), m, k, n);
  return make_op<T>("matmul", std::move(out), {a, b}, [m, k, n](Node<T>& self) {
    auto& a = self.parents[0];
    auto& b = self.parents[1];
    if (a->requires_grad) {
      a->ensure_grad();
      gemm_nt_acc(self.grad.data.data(), b->value.data.data(), a->grad.data.data(), m, n, k);
    }
    if (b->requires_grad) {
      b->ensure_grad();
      gemm_tn_acc(a->value.data.data(), self.grad.data.data(), b->grad.data.data(), m, k, n);
    }
  });
}

// out[i][j] = x[i][j] + bias[j]
template <typename T>
NodePtr<T> add_rowvec(NodePtr<T> x, NodePtr<T> bias) {
  if (x->value.rank() != 2 || bias->value.rank() != 1 || bias->value.shape[0] != x->value.shape[1])
    throw ShapeError("add_rowvec: " + shape_str(x->value.shape) + " + " +
                     shape_str(bias->value.shape));
  std::size_t m = x->value.shape[0], n = x->value.shape[1];
  Tensor<T> out(Shape{m, n});
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out.at(i, j) = x->value.at(i, j) + bias->value.data[j];
  return make_op<T>("add_rowvec", std::move(out), {x, bias}, [m, n](Node<T>& self) {
    auto& x = self.parents[0];
    auto& b = self.parents[1];
    if (x->requires_grad) {
      x->ensure_grad();
      for (std::size_t i = 0; i < m * n; ++i) x->grad.data[i] += self.grad.data[i];
    }
    if (b->requires_grad) {
      b->ensure_grad();
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) b->grad.data[j] += self.grad.at(i, j);
    }
  });
}

template <typename T>
NodePtr<T> dense(NodePtr<T> x, NodePtr<T> w, NodePtr<T> b) {
  if (x->value.rank() != 2 || w->value.rank() != 2 || x->value.shape[1] != w->value.shape[0])
    throw ShapeError("dense: input " + shape_str(x->value.shape) + " incompatible with weights " +
                     shape_str(w->value.shape));
  return add_rowvec(matmul(x, w), b);
}

// ---- shape ops ----

template <typename T>
NodePtr<T> reshape(NodePtr<T> x, Shape s) {
  if (shape_numel(s) != x->value.size())
    throw ShapeError("reshape: " + shape_str(x->value.shape) + " -> " + shape_str(s));
  Tensor<T> out;
  out.shape = s;
  out.data = x->value.data;
  return make_op<T>("reshape", std::move(out), {x}, [](Node<T>& self) {
    auto& x = self.parents[0];
    x->ensure_grad();
    for (std::size_t i = 0; i < self.grad.size(); ++i) x->grad.data[i] += self.grad.data[i];
  });
}

template <typename T>
NodePtr<T> transpose2d(NodePtr<T> x) {
  if (x->value.rank() != 2) throw ShapeError("transpose2d: " + shape_str(x->value.shape));
  std::size_t m = x->value.shape[0], n = x->value.shape[1];
  Tensor<T> out(Shape{n, m});
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out.at(j, i) = x->value.at(i, j);
  return make_op<T>("transpose2d", std::move(out), {x}, [m, n](Node<T>& self) {
    auto& x = self.parents[0];
    x->ensure_grad();
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < n; ++j) x->grad.at(i, j) += self.grad.at(j, i);
  });
}

template <typename T>
NodePtr<T> concat_cols(std::vector<NodePtr<T>> parts) {
  if (parts.empty()) throw ShapeError("concat_cols: empty list");
  std::size_t m = parts[0]->value.shape[0], total = 0;
  for (auto& p : parts) {
    if (p->value.rank() != 2 || p->value.shape[0] != m)
      throw ShapeError("concat_cols: row mismatch " + shape_str(p->value.shape));
    total += p->value.shape[1];
  }
  Tensor<T> out(Shape{m, total});
  std::size_t off = 0;
  for (auto& p : parts) {
    std::size_t n = p->value.shape[1];
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < n; ++j) out.at(i, off + j) = p->value.at(i, j);
    off += n;
  }
  return make_op<T>("concat_cols", std::move(out), parts, [m](Node<T>& self) {
    std::size_t off = 0;
    for (auto& p : self.parents) {
      std::size_t n = p->value.shape[1];
      if (p->requires_grad) {
        p->ensure_grad();
        for (std::size_t i = 0; i < m; ++i)
          for (std::size_t j = 0; j < n; ++j) p->grad.at(i, j) += self.grad.at(i, off + j);
      }
      off += n;
    }
  });
}

template <typename T>
NodePtr<T> concat_rows(std::vector<NodePtr<T>> parts) {
  if (parts.empty()) throw ShapeError("concat_rows: empty list");
  std::size_t n = parts[0]->value.shape[1], total = 0;
  for (auto& p : parts) {
    if (p->value.rank() != 2 || p->value.shape[1] != n)
      throw ShapeError("concat_rows: column mismatch " + shape_str(p->value.shape));
    total += p->value.shape[0];
  }
  Tensor<T> out(Shape{total, n});
  std::size_t off = 0;
  for (auto& p : parts) {
    std::copy(p->value.data.begin(), p->value.data.end(), out.data.begin() + off);
    off += p->value.size();
  }
  return make_op<T>("concat_rows", std::move(out), parts, [](Node<T>& self) {
    std::size_t off = 0;
    for (auto& p : self.parents) {
      if (p->requires_grad) {
        p->ensure_grad();
        for (std::size_t i = 0; i < p->grad.size(); ++i)
          p->grad.data[i] += self.grad.data[off + i];
      }
      off += p->value.size();
    }
  });
}

template <typename T>
NodePtr<T> slice_rows(NodePtr<T> x, std::size_t r0, std::size_t r1) {
  if (x->value.rank() != 2 || r1 > x->value.shape[0] || r0 >= r1)
    throw ShapeError("slice_rows [" + std::to_string(r0) + "," + std::to_string(r1) + ") of " +
                     shape_str(x->value.shape));
  std::size_t n = x->value.shape[1];
  Tensor<T> out(Shape{r1 - r0, n});
  std::copy(x->value.data.begin() + r0 * n, x->value.data.begin() + r1 * n, out.data.begin());
  return make_op<T>("slice_rows", std::move(out), {x}, [r0, n](Node<T>& self) {
    auto& x = self.parents[0];
    x->ensure_grad();
    for (std::size_t i = 0; i < self.grad.size(); ++i)
      x->grad.data[r0 * n + i] += self.grad.data[i];
  });
}

// ---- reductions ----

template <typename T>
NodePtr<T> sum(NodePtr<T> x) {
  T acc = T(0);
  for (auto v : x->value.data) acc += v;
  return make_op<T>("sum", Tensor<T>::scalar(acc), {x}, [](Node<T>& self) {
    auto& x = self.parents[0];
    x->ensure_grad();
    T g = self.grad.data[0];
    for (auto& v : x->grad.data) v += g;
  });
}

template <typename T>
NodePtr<T> mean(NodePtr<T> x) {
  T acc = T(0);
  for (auto v : x->value.data) acc += v;
  std::size_t n = x->value.size();
  acc /= T(n);
  return make_op<T>("mean", Tensor<T>::scalar(acc), {x}, [n](Node<T>& self) {
    auto& x = self.parents[0];
    x->ensure_grad();
    T g = self.grad.data[0] / T(n);
    for (auto& v : x->grad.data) v += g;
  });
}

template <typename T>
NodePtr<T> mse(NodePtr<T> pred, NodePtr<T> target) {
  auto d = sub(pred, target);
  return mean(mul(d, d));
}

// ---- conv2d ----

namespace detail {

struct ConvGeom {
  std::size_t ho, wo;
  std::ptrdiff_t pt, pl;  // top/left padding
};

inline ConvGeom conv_geometry(std::size_t h, std::size_t w, std::size_t kh, std::size_t kw,
                              std::size_t sy, std::size_t sx, Padding pad) {
  ConvGeom g{};
  if (pad == Padding::same) {
    g.ho = (h + sy - 1) / sy;
    g.wo = (w + sx - 1) / sx;
    std::size_t need_h = (g.ho - 1) * sy + kh;
    std::size_t need_w = (g.wo - 1) * sx + kw;
    g.pt = need_h > h ? static_cast<std::ptrdiff_t>((need_h - h) / 2) : 0;
    g.pl = need_w > w ? static_cast<std::ptrdiff_t>((need_w - w) / 2) : 0;
  } else {
    if (kh > h || kw > w)
      throw ShapeError("conv2d: kernel " + std::to_string(kh) + "x" + std::to_string(kw) +
                       " larger than input " + std::to_string(h) + "x" + std::to_string(w));
    g.ho = (h - kh) / sy + 1;
    g.wo = (w - kw) / sx + 1;
    g.pt = g.pl = 0;
  }
  return g;
}

template <typename T>
void im2col(const T* x, std::size_t C, std::size_t H, std::size_t W, std::size_t kh,
            std::size_t kw, std::size_t sy, std::size_t sx, std::ptrdiff_t pt, std::ptrdiff_t pl,
            std::size_t ho, std::size_t wo, T* col) {
  // col is [C*kh*kw] x [ho*wo]
  std::size_t cols = ho * wo;
  for (std::size_t c = 0; c < C; ++c) {
    const T* xc = x + c * H * W;
    for (std::size_t dy = 0; dy < kh; ++dy) {
      for (std::size_t dx = 0; dx < kw; ++dx) {
        T* row = col + ((c * kh + dy) * kw + dx) * cols;
        for (std::size_t oy = 0; oy < ho; ++oy) {
          std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(oy * sy + dy) - pt;
          if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(H)) {
            for (std::size_t ox = 0; ox < wo; ++ox) row[oy * wo + ox] = T(0);
            continue;
          }
          const T* xr = xc + static_cast<std::size_t>(iy) * W;
          for (std::size_t ox = 0; ox < wo; ++ox) {
            std::ptrdiff_t ix = static_cast<std::ptrdiff_t>(ox * sx + dx) - pl;
            row[oy * wo + ox] =
                (ix < 0 || ix >= static_cast<std::ptrdiff_t>(W)) ? T(0) : xr[ix];
          }
        }
      }
    }
  }
}

template <typename T>
void col2im_acc(const T* col, std::size_t C, std::size_t H, std::size_t W, std::size_t kh,
                std::size_t kw, std::size_t sy, std::size_t sx, std::ptrdiff_t pt,
                std::ptrdiff_t pl, std::size_t ho, std::size_t wo, T* x) {
  std::size_t cols = ho * wo;
  for (std::size_t c = 0; c < C; ++c) {
    T* xc = x + c * H * W;
    for (std::size_t dy = 0; dy < kh; ++dy) {
      for (std::size_t dx = 0; dx < kw; ++dx) {
        const T* row = col + ((c * kh + dy) * kw + dx) * cols;
        for (std::size_t oy = 0; oy < ho; ++oy) {
          std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(oy * sy + dy) - pt;
          if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(H)) continue;
          T* xr = xc + static_cast<std::size_t>(iy) * W;
          for (std::size_t ox = 0; ox < wo; ++ox) {
            std::ptrdiff_t ix = static_cast<std::ptrdiff_t>(ox * sx + dx) - pl;
            if (ix >= 0 && ix < static_cast<std::ptrdiff_t>(W)) xr[ix] += row[oy * wo + ox];
          }
        }
      }
    }
  }
}

}  // namespace detail

template <typename T>
NodePtr<T> conv2d(NodePtr<T> x, NodePtr<T> k, std::pair<std::size_t, std::size_t> stride,
                  Padding pad) {
  if (x->value.rank() != 4 || k->value.rank() != 4)
    throw ShapeError("conv2d: need rank-4 input and kernels, got " + shape_str(x->value.shape) +
                     " and " + shape_str(k->value.shape));
  std::size_t N = x->value.shape[0], C = x->value.shape[1], H = x->value.shape[2],
              W = x->value.shape[3];
  std::size_t F = k->value.shape[0], kh = k->value.shape[2], kw = k->value.shape[3];
  if (k->value.shape[1] != C)
    throw ShapeError("conv2d: input channels " + std::to_string(C) + " vs kernel channels " +
                     std::to_string(k->value.shape[1]));
  std::size_t sy = stride.first, sx = stride.second;
  if (sy == 0 || sx == 0) throw ShapeError("conv2d: zero stride");
  auto g = detail::conv_geometry(H, W, kh, kw, sy, sx, pad);
  std::size_t ckk = C * kh * kw, cols = g.ho * g.wo;

  Tensor<T> out(Shape{N, F, g.ho, g.wo});
  std::vector<T> col(ckk * cols);
  for (std::size_t n = 0; n < N; ++n) {
    detail::im2col(x->value.data.data() + n * C * H * W, C, H, W, kh, kw, sy, sx, g.pt, g.pl,
                   g.ho, g.wo, col.data());
    gemm_nn_acc(k->value.data.data(), col.data(), out.data.data() + n * F * cols, F, ckk, cols);
  }
  auto geom = g;
  return make_op<T>(
      "conv2d", std::move(out), {x, k},
      [N, C, H, W, F, kh, kw, sy, sx, geom, ckk, cols](Node<T>& self) {
        auto& x = self.parents[0];
        auto& k = self.parents[1];
        std::vector<T> col(ckk * cols), dcol(ckk * cols);
        for (std::size_t n = 0; n < N; ++n) {
          const T* gn = self.grad.data.data() + n * F * cols;
          detail::im2col(x->value.data.data() + n * C * H * W, C, H, W, kh, kw, sy, sx, geom.pt,
                         geom.pl, geom.ho, geom.wo, col.data());
          if (k->requires_grad) {
            k->ensure_grad();
            gemm_nt_acc(gn, col.data(), k->grad.data.data(), F, cols, ckk);
          }
          if (x->requires_grad) {
            x->ensure_grad();
            std::fill(dcol.begin(), dcol.end(), T(0));
            gemm_tn_acc(k->value.data.data(), gn, dcol.data(), F, ckk, cols);
            detail::col2im_acc(dcol.data(), C, H, W, kh, kw, sy, sx, geom.pt, geom.pl, geom.ho,
                               geom.wo, x->grad.data.data() + n * C * H * W);
          }
        }
      });
}

// ---- batch norm (rank-4, per-channel over batch x spatial) ----

template <typename T>
NodePtr<T> batch_norm(NodePtr<T> x, NodePtr<T> gamma, NodePtr<T> beta, Mode mode,
                      NodePtr<T> running_mean, NodePtr<T> running_var, T momentum = T(0.99),
                      T eps = T(1e-5)) {
  if (x->value.rank() != 4) throw ShapeError("batch_norm: need rank-4 input, got " +
                                             shape_str(x->value.shape));
  std::size_t N = x->value.shape[0], C = x->value.shape[1], H = x->value.shape[2],
              W = x->value.shape[3];
  if (gamma->value.size() != C || beta->value.size() != C || running_mean->value.size() != C ||
      running_var->value.size() != C)
    throw ShapeError("batch_norm: gamma/beta/running must have length " + std::to_string(C));

  std::size_t spatial = H * W;
  std::size_t M = N * spatial;
  Tensor<T> out(x->value.shape);
  std::vector<T> mu(C), inv_std(C);

  auto idx = [&](std::size_t n, std::size_t c) { return (n * C + c) * spatial; };

  if (mode == Mode::train) {
    for (std::size_t c = 0; c < C; ++c) {
      T m = T(0);
      for (std::size_t n = 0; n < N; ++n) {
        const T* p = x->value.data.data() + idx(n, c);
        for (std::size_t s = 0; s < spatial; ++s) m += p[s];
      }
      m /= T(M);
      T v = T(0);
      for (std::size_t n = 0; n < N; ++n) {
        const T* p = x->value.data.data() + idx(n, c);
        for (std::size_t s = 0; s < spatial; ++s) {
          T d = p[s] - m;
          v += d * d;
        }
      }
      v /= T(M);
      mu[c] = m;
      inv_std[c] = T(1) / std::sqrt(v + eps);
      running_mean->value.data[c] = momentum * running_mean->value.data[c] + (T(1) - momentum) * m;
      running_var->value.data[c] = momentum * running_var->value.data[c] + (T(1) - momentum) * v;
    }
  } else {
    for (std::size_t c = 0; c < C; ++c) {
      mu[c] = running_mean->value.data[c];
      inv_std[c] = T(1) / std::sqrt(running_var->value.data[c] + eps);
    }
  }

  for (std::size_t n = 0; n < N; ++n)
    for (std::size_t c = 0; c < C; ++c) {
      const T* p = x->value.data.data() + idx(n, c);
      T* o = out.data.data() + idx(n, c);
      T g = gamma->value.data[c], b = beta->value.data[c], m = mu[c], is = inv_std[c];
      for (std::size_t s = 0; s < spatial; ++s) o[s] = g * (p[s] - m) * is + b;
    }

  return make_op<T>(
      "batch_norm", std::move(out), {x, gamma, beta},
      [N, C, spatial, M, mode, mu = std::move(mu), inv_std = std::move(inv_std)](Node<T>& self) {
        auto& x = self.parents[0];
        auto& gamma = self.parents[1];
        auto& beta = self.parents[2];
        auto idx = [&](std::size_t n, std::size_t c) { return (n * C + c) * spatial; };
        for (std::size_t c = 0; c < C; ++c) {
          T m = mu[c], is = inv_std[c], gm = gamma->value.data[c];
          // per-channel reductions over the incoming gradient
          T sum_g = T(0), sum_gx = T(0);
          for (std::size_t n = 0; n < N; ++n) {
            const T* gp = self.grad.data.data() + idx(n, c);
            const T* xp = x->value.data.data() + idx(n, c);
            for (std::size_t s = 0; s < spatial; ++s) {
              sum_g += gp[s];
              sum_gx += gp[s] * (xp[s] - m) * is;
            }
          }
          if (gamma->requires_grad) {
            gamma->ensure_grad();
            gamma->grad.data[c] += sum_gx;
          }
          if (beta->requires_grad) {
            beta->ensure_grad();
            beta->grad.data[c] += sum_g;
          }
          if (!x->requires_grad) continue;
          x->ensure_grad();
          if (mode == Mode::train) {
            for (std::size_t n = 0; n < N; ++n) {
              const T* gp = self.grad.data.data() + idx(n, c);
              const T* xp = x->value.data.data() + idx(n, c);
              T* dxp = x->grad.data.data() + idx(n, c);
              for (std::size_t s = 0; s < spatial; ++s) {
                T xhat = (xp[s] - m) * is;
                dxp[s] += gm * is / T(M) * (T(M) * gp[s] - sum_g - xhat * sum_gx);
              }
            }
          } else {
            for (std::size_t n = 0; n < N; ++n) {
              const T* gp = self.grad.data.data() + idx(n, c);
              T* dxp = x->grad.data.data() + idx(n, c);
              for (std::size_t s = 0; s < spatial; ++s) dxp[s] += gp[s] * gm * is;
            }
          }
        }
      });
}

// ---- pooling ----

// max pool along W with stride 1 and same padding (pads to the right).
template <typename T>
NodePtr<T> maxpool_w(NodePtr<T> x, std::size_t width) {
  if (x->value.rank() != 4) throw ShapeError("maxpool_w: need rank-4, got " +
                                             shape_str(x->value.shape));
  if (width == 0) throw ShapeError("maxpool_w: zero width");
  std::size_t N = x->value.shape[0], C = x->value.shape[1], H = x->value.shape[2],
              W = x->value.shape[3];
  Tensor<T> out(x->value.shape);
  std::vector<std::uint32_t> arg(out.size());
  std::size_t planes = N * C * H;
  for (std::size_t p = 0; p < planes; ++p) {
    const T* xr = x->value.data.data() + p * W;
    T* o = out.data.data() + p * W;
    std::uint32_t* a = arg.data() + p * W;
    for (std::size_t j = 0; j < W; ++j) {
      std::size_t hi = std::min(W, j + width);
      T best = xr[j];
      std::size_t bi = j;
      for (std::size_t t = j + 1; t < hi; ++t)
        if (xr[t] > best) {
          best = xr[t];
          bi = t;
        }
      o[j] = best;
      a[j] = static_cast<std::uint32_t>(bi);
    }
  }
  return make_op<T>("maxpool_w", std::move(out), {x},
                    [W, planes, arg = std::move(arg)](Node<T>& self) {
                      auto& x = self.parents[0];
                      x->ensure_grad();
                      for (std::size_t p = 0; p < planes; ++p) {
                        const T* g = self.grad.data.data() + p * W;
                        T* dx = x->grad.data.data() + p * W;
                        const std::uint32_t* a = arg.data() + p * W;
                        for (std::size_t j = 0; j < W; ++j) dx[a[j]] += g[j];
                      }
                    });
}

// [N,C,H,W] -> [N,C] spatial mean
template <typename T>
NodePtr<T> global_avg_pool(NodePtr<T> x) {
  if (x->value.rank() != 4) throw ShapeError("global_avg_pool: need rank-4, got " +
                                             shape_str(x->value.shape));
  std::size_t N = x->value.shape[0], C = x->value.shape[1],
              spatial = x->value.shape[2] * x->value.shape[3];
  Tensor<T> out(Shape{N, C});
  for (std::size_t n = 0; n < N; ++n)
    for (std::size_t c = 0; c < C; ++c) {
      const T* p = x->value.data.data() + (n * C + c) * spatial;
      T acc = T(0);
      for (std::size_t s = 0; s < spatial; ++s) acc += p[s];
      out.at(n, c) = acc / T(spatial);
    }
  return make_op<T>("global_avg_pool", std::move(out), {x}, [N, C, spatial](Node<T>& self) {
    auto& x = self.parents[0];
    x->ensure_grad();
    for (std::size_t n = 0; n < N; ++n)
      for (std::size_t c = 0; c < C; ++c) {
        T g = self.grad.at(n, c) / T(spatial);
        T* dx = x->grad.data.data() + (n * C + c) * spatial;
        for (std::size_t s = 0; s < spatial; ++s) dx[s] += g;
      }
  });
}

// ---- recurrent / gated units ----

template <typename T>
struct GruCell {
  NodePtr<T> wz, uz, bz;
  NodePtr<T> wr, ur, br;
  NodePtr<T> wh, uh, bh;
};

// h' = z*h_prev + (1-z)*hcand
template <typename T>
NodePtr<T> gru_step(NodePtr<T> x, NodePtr<T> h_prev, const GruCell<T>& p) {
  if (h_prev->value.shape[1] != p.uz->value.shape[0])
    throw ShapeError("gru_step: hidden " + shape_str(h_prev->value.shape) + " vs U " +
                     shape_str(p.uz->value.shape));
  auto z = activation(add(dense(x, p.wz, p.bz), matmul(h_prev, p.uz)), Act::sigmoid);
  auto r = activation(add(dense(x, p.wr, p.br), matmul(h_prev, p.ur)), Act::sigmoid);
  auto hc = activation(add(dense(x, p.wh, p.bh), matmul(mul(r, h_prev), p.uh)), Act::tanh_);
  return add(mul(z, h_prev), mul(one_minus(z), hc));
}

template <typename T>
struct HighwayParams {
  NodePtr<T> wh, bh;
  NodePtr<T> wt, bt;
};

// out = T(x)*H(x) + (1-T(x))*x, H relu-activated, T sigmoid gate
template <typename T>
NodePtr<T> highway(NodePtr<T> x, const HighwayParams<T>& p) {
  if (p.wh->value.shape[0] != p.wh->value.shape[1] ||
      p.wh->value.shape[0] != x->value.shape[1])
    throw ShapeError("highway: transform must be square in the input dim, got " +
                     shape_str(p.wh->value.shape) + " for input " + shape_str(x->value.shape));
  auto h = activation(dense(x, p.wh, p.bh), Act::relu);
  auto t = activation(dense(x, p.wt, p.bt), Act::sigmoid);
  return add(mul(t, h), mul(one_minus(t), x));
}

// ---- backward ----

template <typename T>
void backward(NodePtr<T> loss) {
  if (loss->value.size() != 1)
    throw ShapeError("backward: loss must be scalar, got " + shape_str(loss->value.shape));
  if (!loss->requires_grad) return;

  std::vector<Node<T>*> order;
  std::unordered_set<Node<T>*> seen;
  std::vector<std::pair<Node<T>*, std::size_t>> stack;
  stack.emplace_back(loss.get(), 0);
  seen.insert(loss.get());
  while (!stack.empty()) {
    auto& [n, i] = stack.back();
    if (i < n->parents.size()) {
      Node<T>* p = n->parents[i++].get();
      if (p->requires_grad && !seen.count(p)) {
        seen.insert(p);
        stack.emplace_back(p, 0);
      }
    } else {
      order.push_back(n);
      stack.pop_back();
    }
  }

  loss->ensure_grad();
  loss->grad.data[0] = T(1);
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node<T>* n = *it;
    if (n->backprop) {
      n->ensure_grad();
      n->backprop(*n);
    }
  }
}

}  // namespace v2s
