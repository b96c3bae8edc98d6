// Training objectives for the shape transformer and the retrieval embedding.
//
// Each loss has a value function and a gradient function returning the
// derivative with respect to every real-valued argument. |x| and max(x, 0)
// use a zero subgradient at their kinks.
#pragma once

#include <cmath>
#include <span>
#include <vector>

#include "semawarp/parsemap.hpp"

namespace semawarp {

enum class ComponentWeightMode { reciprocal_ratio, uniform };

struct LossConfig {
  double lambda_l = 2.0;    // centroid term weight
  double lambda_n = 2.0;    // pixel-count term weight
  double lambda_r = 500.0;  // reconstruction weight in the shape objective
  double margin_m = 2.0;    // contrastive margin
  ComponentWeightMode component_weight_mode = ComponentWeightMode::reciprocal_ratio;
  double epsilon_ratio = 1e-4;

  void validate() const {
    require(std::isfinite(lambda_l) && lambda_l >= 0 && std::isfinite(lambda_n) && lambda_n >= 0,
            "invalid_config", "lambda_l and lambda_n must be finite and non-negative");
    require(std::isfinite(lambda_r) && lambda_r > 0, "invalid_config", "lambda_r must be positive");
    require(std::isfinite(margin_m) && margin_m > 0, "invalid_config", "margin_m must be positive");
    require(epsilon_ratio > 0 && epsilon_ratio < 1, "invalid_config",
            "epsilon_ratio must lie in (0,1)");
  }
};

template <typename T>
struct LossGrad {
  Tensor<T> first;   // d/d(first argument)
  Tensor<T> second;  // d/d(second argument)
};

namespace detail {

template <typename T>
inline T sgn(T v) {
  return v > T(0) ? T(1) : (v < T(0) ? T(-1) : T(0));
}

/// Per-channel statistics of one map: mass and raw moment sums.
template <typename T>
struct ChannelStats {
  std::vector<T> count, sum_row, sum_col;
};

template <typename T>
ChannelStats<T> channel_stats(const T* p, std::size_t C, std::size_t H, std::size_t W) {
  ChannelStats<T> s{std::vector<T>(C, T(0)), std::vector<T>(C, T(0)), std::vector<T>(C, T(0))};
  for (std::size_t c = 0; c < C; ++c) {
    const T* pc = p + c * H * W;
    for (std::size_t j = 0; j < H; ++j)
      for (std::size_t k = 0; k < W; ++k) {
        const T v = pc[j * W + k];
        s.count[c] += v;
        s.sum_row[c] += v * T(j);
        s.sum_col[c] += v * T(k);
      }
  }
  return s;
}

}  // namespace detail

/// Per-component reconstruction weights from the target map: the reciprocal of
/// the component's pixel ratio, floored at `epsilon_ratio`. All ones in
/// uniform mode.
template <typename T>
std::vector<T> component_weights(const T* target, std::size_t C, std::size_t H, std::size_t W,
                                 const LossConfig& cfg) {
  std::vector<T> w(C, T(1));
  if (cfg.component_weight_mode == ComponentWeightMode::uniform) return w;
  const auto st = detail::channel_stats(target, C, H, W);
  for (std::size_t c = 0; c < C; ++c)
    w[c] = T(1) / std::max(st.count[c] / T(H * W), T(cfg.epsilon_ratio));
  return w;
}

template <typename T>
std::vector<T> component_weights(const ParsingMap<T>& target, const LossConfig& cfg) {
  return component_weights(target.data().data(), target.channels(), target.height(),
                           target.width(), cfg);
}

/// Weighted reconstruction family on raw C x H x W buffers:
///   sum_c w_c (wp * P_c + wl * L_c + wn * N_c)
/// with P_c, L_c, N_c the channel-restricted pixel, centroid and count terms.
/// When `adaptive` is set, w_c is recomputed from `cari` (and differentiated).
/// Gradients are accumulated into the optional output buffers.
template <typename T>
T rec_family(const T* cari, const T* fake, std::size_t C, std::size_t H, std::size_t W, T wp,
             T wl, T wn, const LossConfig* adaptive, T* grad_cari, T* grad_fake) {
  const std::size_t HW = H * W;
  const T inv_chw = T(1) / T(C * HW), inv_c = T(1) / T(C), inv_hw = T(1) / T(HW);
  const auto sc = detail::channel_stats(cari, C, H, W);
  const auto sf = detail::channel_stats(fake, C, H, W);

  std::vector<T> weight(C, T(1)), dweight(C, T(0));
  if (adaptive && adaptive->component_weight_mode == ComponentWeightMode::reciprocal_ratio) {
    for (std::size_t c = 0; c < C; ++c) {
      const T ratio = sc.count[c] * inv_hw;
      if (ratio > T(adaptive->epsilon_ratio)) {
        weight[c] = T(1) / ratio;
        dweight[c] = -inv_hw / (ratio * ratio);
      } else {
        weight[c] = T(1) / T(adaptive->epsilon_ratio);
      }
    }
  }

  T total = 0;
  for (std::size_t c = 0; c < C; ++c) {
    const T* pc = cari + c * HW;
    const T* pf = fake + c * HW;
    T pix = 0;
    if (wp != T(0))
      for (std::size_t q = 0; q < HW; ++q) pix += std::abs(pc[q] - pf[q]);
    pix *= inv_chw;
    const T dx = (sf.sum_row[c] - sc.sum_row[c]) * inv_hw;
    const T dy = (sf.sum_col[c] - sc.sum_col[c]) * inv_hw;
    const T loc = inv_c * (std::abs(dx) + std::abs(dy));
    const T dn = sf.count[c] - sc.count[c];
    const T cnt = inv_c * std::abs(dn);
    const T term = wp * pix + wl * loc + wn * cnt;
    total += weight[c] * term;

    if (!grad_cari && !grad_fake) continue;
    const T gx = weight[c] * wl * inv_c * detail::sgn(dx) * inv_hw;
    const T gy = weight[c] * wl * inv_c * detail::sgn(dy) * inv_hw;
    const T gn = weight[c] * wn * inv_c * detail::sgn(dn);
    const T gp = weight[c] * wp * inv_chw;
    const T gw = dweight[c] * term;  // through the adaptive weight
    for (std::size_t j = 0; j < H; ++j)
      for (std::size_t k = 0; k < W; ++k) {
        const std::size_t q = j * W + k;
        const T g = gp * detail::sgn(pf[q] - pc[q]) + gx * T(j) + gy * T(k) + gn;
        if (grad_fake) grad_fake[c * HW + q] += g;
        if (grad_cari) grad_cari[c * HW + q] += gw - g;
      }
  }
  return total;
}

namespace detail {

template <typename T>
void check_pair(const ParsingMap<T>& a, const ParsingMap<T>& b) {
  require(a.data().shape() == b.data().shape(), "shape_mismatch",
          "parsing maps differ in shape: " + shape_str(a.data().shape()) + " vs " +
              shape_str(b.data().shape()));
}

template <typename T>
T rec_value(const ParsingMap<T>& cari, const ParsingMap<T>& fake, T wp, T wl, T wn,
            const LossConfig* adaptive) {
  check_pair(cari, fake);
  return rec_family(cari.data().data(), fake.data().data(), cari.channels(), cari.height(),
                    cari.width(), wp, wl, wn, adaptive, static_cast<T*>(nullptr),
                    static_cast<T*>(nullptr));
}

template <typename T>
LossGrad<T> rec_grad(const ParsingMap<T>& cari, const ParsingMap<T>& fake, T wp, T wl, T wn,
                     const LossConfig* adaptive) {
  check_pair(cari, fake);
  LossGrad<T> g{Tensor<T>(cari.data().shape()), Tensor<T>(cari.data().shape())};
  rec_family(cari.data().data(), fake.data().data(), cari.channels(), cari.height(), cari.width(),
             wp, wl, wn, adaptive, g.first.data(), g.second.data());
  return g;
}

}  // namespace detail

/// Mean absolute per-element difference.
template <typename T>
T rec_pixel(const ParsingMap<T>& cari, const ParsingMap<T>& fake) {
  return detail::rec_value(cari, fake, T(1), T(0), T(0), nullptr);
}
template <typename T>
LossGrad<T> rec_pixel_grad(const ParsingMap<T>& cari, const ParsingMap<T>& fake) {
  return detail::rec_grad(cari, fake, T(1), T(0), T(0), nullptr);
}

/// Mean over components of the L1 gap between H*W-normalised centroids.
template <typename T>
T rec_location(const ParsingMap<T>& cari, const ParsingMap<T>& fake) {
  return detail::rec_value(cari, fake, T(0), T(1), T(0), nullptr);
}
template <typename T>
LossGrad<T> rec_location_grad(const ParsingMap<T>& cari, const ParsingMap<T>& fake) {
  return detail::rec_grad(cari, fake, T(0), T(1), T(0), nullptr);
}

/// Mean over components of the absolute pixel-count gap.
template <typename T>
T rec_count(const ParsingMap<T>& cari, const ParsingMap<T>& fake) {
  return detail::rec_value(cari, fake, T(0), T(0), T(1), nullptr);
}
template <typename T>
LossGrad<T> rec_count_grad(const ParsingMap<T>& cari, const ParsingMap<T>& fake) {
  return detail::rec_grad(cari, fake, T(0), T(0), T(1), nullptr);
}

/// Component-weighted sum of the three reconstruction terms.
template <typename T>
T rec_total(const ParsingMap<T>& cari, const ParsingMap<T>& fake, const LossConfig& cfg) {
  cfg.validate();
  return detail::rec_value(cari, fake, T(1), T(cfg.lambda_l), T(cfg.lambda_n), &cfg);
}
template <typename T>
LossGrad<T> rec_total_grad(const ParsingMap<T>& cari, const ParsingMap<T>& fake,
                           const LossConfig& cfg) {
  cfg.validate();
  return detail::rec_grad(cari, fake, T(1), T(cfg.lambda_l), T(cfg.lambda_n), &cfg);
}

// ---------------------------------------------------------------------------

template <typename T>
T coordinate_loss(const T* a, const T* b, std::size_t H, std::size_t W, T* grad_a, T* grad_b) {
  const std::size_t n = 2 * H * W;
  const T inv = T(1) / T(H * W);
  T s = 0;
  for (std::size_t q = 0; q < n; ++q) {
    const T d = a[q] - b[q];
    s += std::abs(d);
    const T g = inv * detail::sgn(d);
    if (grad_a) grad_a[q] += g;
    if (grad_b) grad_b[q] -= g;
  }
  return s * inv;
}

/// Mean per-pixel L1 distance between two coordinate maps.
template <typename T>
T coordinate_loss(const CoordinateMap<T>& pho, const CoordinateMap<T>& cyc) {
  require(pho.data.shape() == cyc.data.shape() && pho.data.rank() == 3 && pho.data.dim(0) == 2,
          "shape_mismatch", "coordinate maps differ in shape");
  return coordinate_loss(pho.data.data(), cyc.data.data(), pho.height(), pho.width(),
                         static_cast<T*>(nullptr), static_cast<T*>(nullptr));
}
template <typename T>
LossGrad<T> coordinate_loss_grad(const CoordinateMap<T>& pho, const CoordinateMap<T>& cyc) {
  require(pho.data.shape() == cyc.data.shape(), "shape_mismatch", "coordinate maps differ in shape");
  LossGrad<T> g{Tensor<T>(pho.data.shape()), Tensor<T>(pho.data.shape())};
  coordinate_loss(pho.data.data(), cyc.data.data(), pho.height(), pho.width(), g.first.data(),
                  g.second.data());
  return g;
}

// ---------------------------------------------------------------------------

template <typename T>
T contrastive(std::span<const T> za, std::span<const T> zb, bool positive, const LossConfig& cfg,
              T* grad_a = nullptr, T* grad_b = nullptr) {
  require(za.size() == zb.size() && !za.empty(), "dimension_mismatch",
          "shape codes differ in length");
  T d2 = 0;
  for (std::size_t i = 0; i < za.size(); ++i) d2 += (za[i] - zb[i]) * (za[i] - zb[i]);
  const T d = std::sqrt(d2);
  T value, scale;
  if (positive) {
    value = d;
    scale = d > T(0) ? T(1) / d : T(0);
  } else {
    const T gap = T(cfg.margin_m) - d;
    value = std::max(gap, T(0));
    scale = (gap > T(0) && d > T(0)) ? T(-1) / d : T(0);
  }
  if (grad_a || grad_b)
    for (std::size_t i = 0; i < za.size(); ++i) {
      const T g = scale * (za[i] - zb[i]);
      if (grad_a) grad_a[i] += g;
      if (grad_b) grad_b[i] -= g;
    }
  return value;
}

template <typename T>
LossGrad<T> contrastive_grad(std::span<const T> za, std::span<const T> zb, bool positive,
                             const LossConfig& cfg) {
  LossGrad<T> g{Tensor<T>({za.size()}), Tensor<T>({zb.size()})};
  contrastive(za, zb, positive, cfg, g.first.data(), g.second.data());
  return g;
}

// ---------------------------------------------------------------------------

/// Critic objective (minimised): mean(fake) - mean(real).
inline double wgan_critic_objective(std::span<const double> real_scores,
                                    std::span<const double> fake_scores) {
  require(!real_scores.empty() && !fake_scores.empty(), "empty_batch", "score batch is empty");
  double r = 0, f = 0;
  for (double v : real_scores) r += v;
  for (double v : fake_scores) f += v;
  return f / double(fake_scores.size()) - r / double(real_scores.size());
}

/// Generator objective paired with the critic: -mean(fake).
inline double wgan_generator_objective(std::span<const double> fake_scores) {
  require(!fake_scores.empty(), "empty_batch", "score batch is empty");
  double f = 0;
  for (double v : fake_scores) f += v;
  return -f / double(fake_scores.size());
}

struct ShapeTerms {
  double rec = 0;
  double adv = 0;
  double cyc = 0;
  double coo = 0;
};

/// lambda_r * rec + adv + cyc + coo. A non-finite term signals divergence.
inline double shape_objective(const ShapeTerms& t, const LossConfig& cfg) {
  require(std::isfinite(t.rec) && std::isfinite(t.adv) && std::isfinite(t.cyc) &&
              std::isfinite(t.coo),
          "non_finite_loss", "shape objective received a non-finite term");
  return cfg.lambda_r * t.rec + t.adv + t.cyc + t.coo;
}

}  // namespace semawarp
