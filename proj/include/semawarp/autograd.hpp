// Minimal reverse-mode automatic differentiation over NCHW tensors.
//
// A Var is a shared node holding a value, an optional gradient and a closure
// that pushes the node's gradient into its parents. Nodes whose parents carry
// no gradient are recorded without a closure, so evaluating with constant
// inputs and frozen parameters builds no tape.
#pragma once

#include <cmath>
#include <functional>
#include <memory>
#include <optional>
#include <unordered_set>
#include <vector>

#include <Eigen/Core>

#include "semawarp/losses.hpp"
#include "semawarp/parsemap.hpp"
#include "semawarp/tensor.hpp"

namespace semawarp::ag {

template <typename T>
struct Node {
  Tensor<T> value;
  Tensor<T> grad;
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backward_fn;

  Tensor<T>& ensure_grad() {
    if (grad.size() != value.size()) grad = Tensor<T>(value.shape());
    return grad;
  }
};

template <typename T>
using Var = std::shared_ptr<Node<T>>;

template <typename T>
Var<T> constant(Tensor<T> v) {
  auto n = std::make_shared<Node<T>>();
  n->value = std::move(v);
  return n;
}

template <typename T>
Var<T> parameter(Tensor<T> v) {
  auto n = constant(std::move(v));
  n->requires_grad = true;
  return n;
}

inline bool& grad_mode() {
  thread_local bool enabled = true;
  return enabled;
}

/// Disables tape recording on the current thread for its lifetime.
class NoGradGuard {
 public:
  NoGradGuard() : prev_(grad_mode()) { grad_mode() = false; }
  ~NoGradGuard() { grad_mode() = prev_; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool prev_;
};

template <typename T>
Var<T> make_op(Tensor<T> value, std::vector<Var<T>> parents, std::function<void(Node<T>&)> fn) {
  auto n = std::make_shared<Node<T>>();
  n->value = std::move(value);
  if (!grad_mode()) return n;
  for (const auto& p : parents) n->requires_grad = n->requires_grad || p->requires_grad;
  if (n->requires_grad) {
    n->parents = std::move(parents);
    n->backward_fn = std::move(fn);
  }
  return n;
}

/// Runs reverse accumulation from a scalar root (seed gradient 1).
template <typename T>
void backward(const Var<T>& root) {
  require(root->value.size() == 1, "not_scalar", "backward() needs a scalar root");
  if (!root->requires_grad) return;
  std::vector<Node<T>*> order;
  std::unordered_set<Node<T>*> seen;
  std::vector<std::pair<Node<T>*, std::size_t>> stack{{root.get(), 0}};
  seen.insert(root.get());
  while (!stack.empty()) {
    auto& [node, idx] = stack.back();
    if (idx < node->parents.size()) {
      Node<T>* p = node->parents[idx++].get();
      if (p->requires_grad && !seen.count(p)) {
        seen.insert(p);
        stack.emplace_back(p, 0);
      }
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }
  root->ensure_grad()[0] += T(1);
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node<T>* n = *it;
    if (n->backward_fn && n->grad.size() == n->value.size()) n->backward_fn(*n);
  }
}

template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MatMap = Eigen::Map<RowMat<T>>;
template <typename T>
using ConstMatMap = Eigen::Map<const RowMat<T>>;

// ---------------------------------------------------------------------------
// Elementwise and structural ops

template <typename T>
Var<T> add(const Var<T>& a, const Var<T>& b) {
  require(a->value.shape() == b->value.shape(), "shape_mismatch", "add: shapes differ");
  Tensor<T> out = a->value;
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += b->value[i];
  return make_op<T>(std::move(out), {a, b}, [a = a.get(), b = b.get()](Node<T>& self) {
    for (Node<T>* p : {a, b})
      if (p->requires_grad) {
        auto& g = p->ensure_grad();
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
      }
  });
}

template <typename T>
Var<T> scale(const Var<T>& a, T s) {
  Tensor<T> out = a->value;
  for (auto& v : out.storage()) v *= s;
  return make_op<T>(std::move(out), {a}, [a = a.get(), s](Node<T>& self) {
    auto& g = a->ensure_grad();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += s * self.grad[i];
  });
}

/// a + c for a constant tensor c.
template <typename T>
Var<T> add_constant(const Var<T>& a, const Tensor<T>& c) {
  require(a->value.shape() == c.shape(), "shape_mismatch", "add_constant: shapes differ");
  Tensor<T> out = a->value;
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += c[i];
  return make_op<T>(std::move(out), {a}, [a = a.get()](Node<T>& self) {
    auto& g = a->ensure_grad();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
  });
}

template <typename T>
Var<T> reshape(const Var<T>& a, Shape s) {
  return make_op<T>(a->value.reshaped(std::move(s)), {a}, [a = a.get()](Node<T>& self) {
    auto& g = a->ensure_grad();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
  });
}

template <typename T>
Var<T> leaky_relu(const Var<T>& a, T slope = T(0.2)) {
  Tensor<T> out = a->value;
  for (auto& v : out.storage()) v = v > T(0) ? v : slope * v;
  return make_op<T>(std::move(out), {a}, [a = a.get(), slope](Node<T>& self) {
    auto& g = a->ensure_grad();
    for (std::size_t i = 0; i < g.size(); ++i)
      g[i] += self.grad[i] * (a->value[i] > T(0) ? T(1) : slope);
  });
}

/// bound * tanh(a)
template <typename T>
Var<T> scaled_tanh(const Var<T>& a, T bound) {
  Tensor<T> out = a->value;
  for (auto& v : out.storage()) v = bound * std::tanh(v);
  return make_op<T>(std::move(out), {a}, [a = a.get(), bound](Node<T>& self) {
    auto& g = a->ensure_grad();
    for (std::size_t i = 0; i < g.size(); ++i) {
      const T t = std::tanh(a->value[i]);
      g[i] += self.grad[i] * bound * (T(1) - t * t);
    }
  });
}

/// Softmax across dimension 1 of an N x C x H x W tensor.
template <typename T>
Var<T> softmax_channels(const Var<T>& a) {
  const auto& s = a->value.shape();
  require(s.size() == 4, "shape_mismatch", "softmax_channels expects NCHW");
  const std::size_t N = s[0], C = s[1], HW = s[2] * s[3];
  Tensor<T> out(s);
  for (std::size_t n = 0; n < N; ++n)
    for (std::size_t q = 0; q < HW; ++q) {
      const T* x = a->value.data() + n * C * HW + q;
      T* y = out.data() + n * C * HW + q;
      T mx = x[0];
      for (std::size_t c = 1; c < C; ++c) mx = std::max(mx, x[c * HW]);
      T z = 0;
      for (std::size_t c = 0; c < C; ++c) z += (y[c * HW] = std::exp(x[c * HW] - mx));
      for (std::size_t c = 0; c < C; ++c) y[c * HW] /= z;
    }
  return make_op<T>(std::move(out), {a}, [a = a.get(), N, C, HW](Node<T>& self) {
    auto& g = a->ensure_grad();
    for (std::size_t n = 0; n < N; ++n)
      for (std::size_t q = 0; q < HW; ++q) {
        const std::size_t base = n * C * HW + q;
        T dot = 0;
        for (std::size_t c = 0; c < C; ++c)
          dot += self.grad[base + c * HW] * self.value[base + c * HW];
        for (std::size_t c = 0; c < C; ++c)
          g[base + c * HW] += self.value[base + c * HW] * (self.grad[base + c * HW] - dot);
      }
  });
}

/// Concatenation along dimension 1 (channels or features).
template <typename T>
Var<T> concat(const std::vector<Var<T>>& xs) {
  require(!xs.empty(), "empty_input", "concat of nothing");
  Shape s = xs[0]->value.shape();
  const std::size_t N = s[0];
  const std::size_t inner = xs[0]->value.size() / (N * s[1]);
  std::size_t total = 0;
  for (const auto& x : xs) {
    require(x->value.shape()[0] == N && x->value.size() / (N * x->value.shape()[1]) == inner,
            "shape_mismatch", "concat: incompatible shapes");
    total += x->value.shape()[1];
  }
  s[1] = total;
  Tensor<T> out(s);
  std::size_t off = 0;
  for (const auto& x : xs) {
    const std::size_t ci = x->value.shape()[1];
    for (std::size_t n = 0; n < N; ++n)
      std::copy_n(x->value.data() + n * ci * inner, ci * inner,
                  out.data() + (n * total + off) * inner);
    off += ci;
  }
  std::vector<Node<T>*> raw;
  for (const auto& x : xs) raw.push_back(x.get());
  return make_op<T>(std::move(out), xs, [raw, N, total, inner](Node<T>& self) {
    std::size_t off = 0;
    for (Node<T>* x : raw) {
      const std::size_t ci = x->value.shape()[1];
      if (x->requires_grad) {
        auto& g = x->ensure_grad();
        for (std::size_t n = 0; n < N; ++n) {
          const T* src = self.grad.data() + (n * total + off) * inner;
          T* dst = g.data() + n * ci * inner;
          for (std::size_t i = 0; i < ci * inner; ++i) dst[i] += src[i];
        }
      }
      off += ci;
    }
  });
}

/// 2x2 average pooling with stride 2 (odd trailing rows/cols dropped).
template <typename T>
Var<T> avg_pool2(const Var<T>& a) {
  const auto& s = a->value.shape();
  const std::size_t N = s[0], C = s[1], H = s[2], W = s[3], Ho = H / 2, Wo = W / 2;
  Tensor<T> out({N, C, Ho, Wo});
  for (std::size_t nc = 0; nc < N * C; ++nc)
    for (std::size_t i = 0; i < Ho; ++i)
      for (std::size_t j = 0; j < Wo; ++j) {
        const T* x = a->value.data() + nc * H * W;
        out[(nc * Ho + i) * Wo + j] = T(0.25) * (x[2 * i * W + 2 * j] + x[2 * i * W + 2 * j + 1] +
                                                 x[(2 * i + 1) * W + 2 * j] +
                                                 x[(2 * i + 1) * W + 2 * j + 1]);
      }
  return make_op<T>(std::move(out), {a}, [a = a.get(), N, C, H, W, Ho, Wo](Node<T>& self) {
    auto& g = a->ensure_grad();
    for (std::size_t nc = 0; nc < N * C; ++nc)
      for (std::size_t i = 0; i < Ho; ++i)
        for (std::size_t j = 0; j < Wo; ++j) {
          const T v = T(0.25) * self.grad[(nc * Ho + i) * Wo + j];
          T* x = g.data() + nc * H * W;
          x[2 * i * W + 2 * j] += v;
          x[2 * i * W + 2 * j + 1] += v;
          x[(2 * i + 1) * W + 2 * j] += v;
          x[(2 * i + 1) * W + 2 * j + 1] += v;
        }
  });
}

template <typename T>
Var<T> mean_all(const Var<T>& a) {
  T s = 0;
  for (T v : a->value.storage()) s += v;
  const T inv = T(1) / T(a->value.size());
  return make_op<T>(Tensor<T>({1}, s * inv), {a}, [a = a.get(), inv](Node<T>& self) {
    auto& g = a->ensure_grad();
    for (auto& v : g.storage()) v += self.grad[0] * inv;
  });
}

// ---------------------------------------------------------------------------
// Convolutions (im2col + GEMM)

namespace detail {

inline std::size_t conv_out(std::size_t in, std::size_t k, std::size_t s, std::size_t p) {
  return (in + 2 * p - k) / s + 1;
}

template <typename T>
void im2col(const T* x, std::size_t C, std::size_t H, std::size_t W, std::size_t k,
            std::size_t s, std::size_t p, std::size_t Ho, std::size_t Wo, T* col) {
  const std::size_t L = Ho * Wo;
  for (std::size_t c = 0; c < C; ++c)
    for (std::size_t ki = 0; ki < k; ++ki)
      for (std::size_t kj = 0; kj < k; ++kj) {
        T* row = col + ((c * k + ki) * k + kj) * L;
        for (std::size_t oh = 0; oh < Ho; ++oh) {
          const long ih = long(oh * s + ki) - long(p);
          T* r = row + oh * Wo;
          if (ih < 0 || ih >= long(H)) {
            std::fill_n(r, Wo, T(0));
            continue;
          }
          const T* xr = x + (c * H + std::size_t(ih)) * W;
          for (std::size_t ow = 0; ow < Wo; ++ow) {
            const long iw = long(ow * s + kj) - long(p);
            r[ow] = (iw < 0 || iw >= long(W)) ? T(0) : xr[iw];
          }
        }
      }
}

template <typename T>
void col2im(const T* col, std::size_t C, std::size_t H, std::size_t W, std::size_t k,
            std::size_t s, std::size_t p, std::size_t Ho, std::size_t Wo, T* x) {
  const std::size_t L = Ho * Wo;
  for (std::size_t c = 0; c < C; ++c)
    for (std::size_t ki = 0; ki < k; ++ki)
      for (std::size_t kj = 0; kj < k; ++kj) {
        const T* row = col + ((c * k + ki) * k + kj) * L;
        for (std::size_t oh = 0; oh < Ho; ++oh) {
          const long ih = long(oh * s + ki) - long(p);
          if (ih < 0 || ih >= long(H)) continue;
          T* xr = x + (c * H + std::size_t(ih)) * W;
          const T* r = row + oh * Wo;
          for (std::size_t ow = 0; ow < Wo; ++ow) {
            const long iw = long(ow * s + kj) - long(p);
            if (iw >= 0 && iw < long(W)) xr[iw] += r[ow];
          }
        }
      }
}

}  // namespace detail

/// x: N x Ci x H x W, w: Co x Ci x k x k, b: Co.
template <typename T>
Var<T> conv2d(const Var<T>& x, const Var<T>& w, const Var<T>& b, std::size_t stride,
              std::size_t pad) {
  const auto& xs = x->value.shape();
  const auto& ws = w->value.shape();
  require(xs.size() == 4 && ws.size() == 4 && xs[1] == ws[1], "shape_mismatch",
          "conv2d: input " + shape_str(xs) + " vs weight " + shape_str(ws));
  const std::size_t N = xs[0], Ci = xs[1], H = xs[2], W = xs[3], Co = ws[0], k = ws[2];
  const std::size_t Ho = detail::conv_out(H, k, stride, pad), Wo = detail::conv_out(W, k, stride, pad);
  const std::size_t K = Ci * k * k, L = Ho * Wo;
  auto cols = std::make_shared<AlignedVector<T>>(N * K * L);
  Tensor<T> out({N, Co, Ho, Wo});
  ConstMatMap<T> wm(w->value.data(), Co, K);
  for (std::size_t n = 0; n < N; ++n) {
    T* col = cols->data() + n * K * L;
    detail::im2col(x->value.data() + n * Ci * H * W, Ci, H, W, k, stride, pad, Ho, Wo, col);
    MatMap<T> om(out.data() + n * Co * L, Co, L);
    om.noalias() = wm * ConstMatMap<T>(col, K, L);
    for (std::size_t c = 0; c < Co; ++c) om.row(c).array() += b->value[c];
  }
  return make_op<T>(
      std::move(out), {x, w, b},
      [x = x.get(), w = w.get(), b = b.get(), cols, N, Ci, H, W, Co, k, stride, pad, Ho, Wo, K,
       L](Node<T>& self) {
        ConstMatMap<T> wm(w->value.data(), Co, K);
        RowMat<T> dcol;
        for (std::size_t n = 0; n < N; ++n) {
          ConstMatMap<T> g(self.grad.data() + n * Co * L, Co, L);
          ConstMatMap<T> col(cols->data() + n * K * L, K, L);
          if (w->requires_grad) MatMap<T>(w->ensure_grad().data(), Co, K).noalias() += g * col.transpose();
          if (b->requires_grad) {
            auto& gb = b->ensure_grad();
            for (std::size_t c = 0; c < Co; ++c) gb[c] += g.row(c).sum();
          }
          if (x->requires_grad) {
            dcol.noalias() = wm.transpose() * g;
            detail::col2im(dcol.data(), Ci, H, W, k, stride, pad, Ho, Wo,
                           x->ensure_grad().data() + n * Ci * H * W);
          }
        }
      });
}

/// Transposed convolution. x: N x Ci x H x W, w: Ci x Co x k x k, b: Co.
/// Output size (H - 1) * stride - 2 * pad + k.
template <typename T>
Var<T> conv_transpose2d(const Var<T>& x, const Var<T>& w, const Var<T>& b, std::size_t stride,
                        std::size_t pad) {
  const auto& xs = x->value.shape();
  const auto& ws = w->value.shape();
  require(xs.size() == 4 && ws.size() == 4 && xs[1] == ws[0], "shape_mismatch",
          "conv_transpose2d: input " + shape_str(xs) + " vs weight " + shape_str(ws));
  const std::size_t N = xs[0], Ci = xs[1], H = xs[2], W = xs[3], Co = ws[1], k = ws[2];
  const std::size_t Ho = (H - 1) * stride + k - 2 * pad, Wo = (W - 1) * stride + k - 2 * pad;
  const std::size_t K = Co * k * k, L = H * W;
  Tensor<T> out({N, Co, Ho, Wo});
  ConstMatMap<T> wm(w->value.data(), Ci, K);
  RowMat<T> col;
  for (std::size_t n = 0; n < N; ++n) {
    col.noalias() = wm.transpose() * ConstMatMap<T>(x->value.data() + n * Ci * L, Ci, L);
    T* o = out.data() + n * Co * Ho * Wo;
    detail::col2im(col.data(), Co, Ho, Wo, k, stride, pad, H, W, o);
    for (std::size_t c = 0; c < Co; ++c)
      for (std::size_t q = 0; q < Ho * Wo; ++q) o[c * Ho * Wo + q] += b->value[c];
  }
  return make_op<T>(
      std::move(out), {x, w, b},
      [x = x.get(), w = w.get(), b = b.get(), N, Ci, H, W, Co, k, stride, pad, Ho, Wo, K,
       L](Node<T>& self) {
        ConstMatMap<T> wm(w->value.data(), Ci, K);
        std::vector<T> gcol(K * L);
        for (std::size_t n = 0; n < N; ++n) {
          const T* g = self.grad.data() + n * Co * Ho * Wo;
          detail::im2col(g, Co, Ho, Wo, k, stride, pad, H, W, gcol.data());
          ConstMatMap<T> gc(gcol.data(), K, L);
          if (x->requires_grad)
            MatMap<T>(x->ensure_grad().data() + n * Ci * L, Ci, L).noalias() += wm * gc;
          if (w->requires_grad)
            MatMap<T>(w->ensure_grad().data(), Ci, K).noalias() +=
                ConstMatMap<T>(x->value.data() + n * Ci * L, Ci, L) * gc.transpose();
          if (b->requires_grad) {
            auto& gb = b->ensure_grad();
            for (std::size_t c = 0; c < Co; ++c)
              for (std::size_t q = 0; q < Ho * Wo; ++q) gb[c] += g[c * Ho * Wo + q];
          }
        }
      });
}

/// x: N x D, w: O x D, b: O.
template <typename T>
Var<T> linear(const Var<T>& x, const Var<T>& w, const Var<T>& b) {
  const std::size_t N = x->value.dim(0), D = x->value.size() / N, O = w->value.dim(0);
  require(w->value.dim(1) == D, "shape_mismatch", "linear: feature size mismatch");
  Tensor<T> out({N, O});
  MatMap<T> om(out.data(), N, O);
  om.noalias() = ConstMatMap<T>(x->value.data(), N, D) *
                 ConstMatMap<T>(w->value.data(), O, D).transpose();
  for (std::size_t n = 0; n < N; ++n)
    for (std::size_t o = 0; o < O; ++o) out[n * O + o] += b->value[o];
  return make_op<T>(std::move(out), {x, w, b},
                    [x = x.get(), w = w.get(), b = b.get(), N, D, O](Node<T>& self) {
                      ConstMatMap<T> g(self.grad.data(), N, O);
                      if (x->requires_grad)
                        MatMap<T>(x->ensure_grad().data(), N, D).noalias() +=
                            g * ConstMatMap<T>(w->value.data(), O, D);
                      if (w->requires_grad)
                        MatMap<T>(w->ensure_grad().data(), O, D).noalias() +=
                            g.transpose() * ConstMatMap<T>(x->value.data(), N, D);
                      if (b->requires_grad) {
                        auto& gb = b->ensure_grad();
                        for (std::size_t n = 0; n < N; ++n)
                          for (std::size_t o = 0; o < O; ++o) gb[o] += g(n, o);
                      }
                    });
}

// ---------------------------------------------------------------------------
// Domain ops: batched sampler and losses

/// src: N x C x H x W, field: N x 2 x H x W of absolute source coordinates.
template <typename T>
Var<T> warp(const Var<T>& src, const Var<T>& field) {
  const auto& ss = src->value.shape();
  const auto& fs = field->value.shape();
  require(ss.size() == 4 && fs.size() == 4 && fs[0] == ss[0] && fs[1] == 2 && fs[2] == ss[2] &&
              fs[3] == ss[3],
          "shape_mismatch", "warp: source " + shape_str(ss) + " vs field " + shape_str(fs));
  const std::size_t N = ss[0], C = ss[1], H = ss[2], W = ss[3], HW = H * W;
  Tensor<T> out(ss);
  for (std::size_t n = 0; n < N; ++n)
    sample_planes(src->value.data() + n * C * HW, C, H, W, field->value.data() + n * 2 * HW,
                  out.data() + n * C * HW);
  return make_op<T>(std::move(out), {src, field},
                    [s = src.get(), f = field.get(), N, C, H, W, HW](Node<T>& self) {
                      T* gs = s->requires_grad ? s->ensure_grad().data() : nullptr;
                      T* gf = f->requires_grad ? f->ensure_grad().data() : nullptr;
                      for (std::size_t n = 0; n < N; ++n)
                        sample_planes_backward(s->value.data() + n * C * HW, C, H, W,
                                               f->value.data() + n * 2 * HW,
                                               self.grad.data() + n * C * HW,
                                               gs ? gs + n * C * HW : nullptr,
                                               gf ? gf + n * 2 * HW : nullptr);
                    });
}

/// Batch mean of the reconstruction family (see rec_family) with `target`
/// held constant.
template <typename T>
Var<T> rec_loss(const Tensor<T>& target, const Var<T>& pred, T wp, T wl, T wn,
                const LossConfig* adaptive) {
  const auto& s = pred->value.shape();
  require(target.shape() == s && s.size() == 4, "shape_mismatch", "rec_loss: shapes differ");
  const std::size_t N = s[0], C = s[1], H = s[2], W = s[3], stride = C * H * W;
  T total = 0;
  for (std::size_t n = 0; n < N; ++n)
    total += rec_family(target.data() + n * stride, pred->value.data() + n * stride, C, H, W, wp,
                        wl, wn, adaptive, static_cast<T*>(nullptr), static_cast<T*>(nullptr));
  std::optional<LossConfig> cfg;
  if (adaptive) cfg = *adaptive;
  return make_op<T>(Tensor<T>({1}, total / T(N)), {pred},
                    [target, p = pred.get(), N, C, H, W, stride, wp, wl, wn, cfg](Node<T>& self) {
                      auto& g = p->ensure_grad();
                      std::vector<T> tmp(stride);
                      const T up = self.grad[0] / T(N);
                      for (std::size_t n = 0; n < N; ++n) {
                        std::fill(tmp.begin(), tmp.end(), T(0));
                        rec_family(target.data() + n * stride, p->value.data() + n * stride, C,
                                   H, W, wp, wl, wn, cfg ? &*cfg : nullptr,
                                   static_cast<T*>(nullptr), tmp.data());
                        for (std::size_t i = 0; i < stride; ++i) g[n * stride + i] += up * tmp[i];
                      }
                    });
}

/// Batch mean of the coordinate loss against a constant reference.
template <typename T>
Var<T> coordinate_loss(const Tensor<T>& reference, const Var<T>& coords) {
  const auto& s = coords->value.shape();
  require(reference.shape() == s && s.size() == 4 && s[1] == 2, "shape_mismatch",
          "coordinate_loss: shapes differ");
  const std::size_t N = s[0], H = s[2], W = s[3], stride = 2 * H * W;
  T total = 0;
  for (std::size_t n = 0; n < N; ++n)
    total += semawarp::coordinate_loss(reference.data() + n * stride,
                                       coords->value.data() + n * stride, H, W,
                                       static_cast<T*>(nullptr), static_cast<T*>(nullptr));
  return make_op<T>(Tensor<T>({1}, total / T(N)), {coords},
                    [reference, c = coords.get(), N, H, W, stride](Node<T>& self) {
                      auto& g = c->ensure_grad();
                      std::vector<T> tmp(stride);
                      const T up = self.grad[0] / T(N);
                      for (std::size_t n = 0; n < N; ++n) {
                        std::fill(tmp.begin(), tmp.end(), T(0));
                        semawarp::coordinate_loss(reference.data() + n * stride,
                                                  c->value.data() + n * stride, H, W,
                                                  static_cast<T*>(nullptr), tmp.data());
                        for (std::size_t i = 0; i < stride; ++i) g[n * stride + i] += up * tmp[i];
                      }
                    });
}

/// Batch mean of the contrastive loss over rows of za, zb (N x D).
template <typename T>
Var<T> contrastive_loss(const Var<T>& za, const Var<T>& zb, const std::vector<bool>& positive,
                        const LossConfig& cfg) {
  const std::size_t N = za->value.dim(0), D = za->value.size() / N;
  require(zb->value.size() == N * D && positive.size() == N, "dimension_mismatch",
          "contrastive_loss: batch shapes differ");
  T total = 0;
  for (std::size_t n = 0; n < N; ++n)
    total += contrastive<T>(std::span<const T>(za->value.data() + n * D, D),
                            std::span<const T>(zb->value.data() + n * D, D), positive[n], cfg);
  return make_op<T>(Tensor<T>({1}, total / T(N)), {za, zb},
                    [a = za.get(), b = zb.get(), positive, cfg, N, D](Node<T>& self) {
                      std::vector<T> ga(N * D, T(0)), gb(N * D, T(0));
                      for (std::size_t n = 0; n < N; ++n)
                        contrastive<T>(std::span<const T>(a->value.data() + n * D, D),
                                       std::span<const T>(b->value.data() + n * D, D),
                                       positive[n], cfg, ga.data() + n * D, gb.data() + n * D);
                      const T up = self.grad[0] / T(N);
                      if (a->requires_grad) {
                        auto& g = a->ensure_grad();
                        for (std::size_t i = 0; i < N * D; ++i) g[i] += up * ga[i];
                      }
                      if (b->requires_grad) {
                        auto& g = b->ensure_grad();
                        for (std::size_t i = 0; i < N * D; ++i) g[i] += up * gb[i];
                      }
                    });
}

}  // namespace semawarp::ag
