// Parsing maps, warp fields, coordinate maps and the clamped bilinear sampler.
//
// All geometry is in pixel units with the origin at the top-left pixel centre.
// A warp field stores, for every output pixel (i, j), the absolute (row, col)
// position in the source that is sampled to produce it (backward warping).
// Sampling positions are clamped to [0, H-1] x [0, W-1].
#pragma once

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "semawarp/tensor.hpp"

namespace semawarp {

inline const std::vector<std::string>& default_categories() {
  static const std::vector<std::string> names = {
      "background", "skin",        "left_brow",   "right_brow", "left_eye", "right_eye",
      "nose",       "upper_lip",   "inner_mouth", "lower_lip",  "hair"};
  return names;
}

enum class Hardness { hard, soft };

/// Integer label grid; the on-disk form of a parsing map.
struct LabelImage {
  std::size_t height = 0;
  std::size_t width = 0;
  std::vector<std::uint8_t> labels;  // row-major
  std::vector<std::string> palette;  // label -> component name

  LabelImage() = default;
  LabelImage(std::size_t h, std::size_t w, std::vector<std::string> names = default_categories())
      : height(h), width(w), labels(h * w, 0), palette(std::move(names)) {}

  std::uint8_t& at(std::size_t i, std::size_t j) { return labels[i * width + j]; }
  std::uint8_t at(std::size_t i, std::size_t j) const { return labels[i * width + j]; }
  std::size_t classes() const { return palette.size(); }

  /// Throws unless every label indexes the palette.
  void validate() const {
    require(labels.size() == height * width, "shape_mismatch", "label buffer size mismatch");
    for (std::size_t i = 0; i < height; ++i)
      for (std::size_t j = 0; j < width; ++j)
        if (at(i, j) >= palette.size())
          throw Error("label_out_of_range", "label " + std::to_string(at(i, j)) + " at (" +
                                                std::to_string(i) + "," + std::to_string(j) +
                                                ") is not covered by the palette");
  }

  friend bool operator==(const LabelImage& a, const LabelImage& b) {
    return a.height == b.height && a.width == b.width && a.labels == b.labels &&
           a.palette == b.palette;
  }
};

/// C x H x W per-pixel component distribution.
template <typename T>
class ParsingMap {
 public:
  ParsingMap() = default;
  ParsingMap(Tensor<T> data, std::vector<std::string> categories, Hardness tag)
      : data_(std::move(data)), categories_(std::move(categories)), tag_(tag) {
    require(data_.rank() == 3, "shape_mismatch", "parsing map must be C x H x W");
    require(categories_.size() == data_.dim(0), "shape_mismatch",
            "category list does not match channel count");
  }

  std::size_t channels() const { return data_.dim(0); }
  std::size_t height() const { return data_.dim(1); }
  std::size_t width() const { return data_.dim(2); }
  Hardness tag() const noexcept { return tag_; }
  const std::vector<std::string>& categories() const noexcept { return categories_; }
  const Tensor<T>& data() const noexcept { return data_; }
  Tensor<T>& data() noexcept { return data_; }

  T operator()(std::size_t c, std::size_t i, std::size_t j) const { return data_(c, i, j); }

  /// True when every value lies in [0,1] and, for hard maps, every pixel is
  /// one-hot; soft maps only need per-pixel mass in [0,1].
  bool satisfies_invariants(T tol = T(0)) const {
    const std::size_t C = channels(), H = height(), W = width();
    for (std::size_t i = 0; i < H; ++i)
      for (std::size_t j = 0; j < W; ++j) {
        T sum = 0;
        int ones = 0;
        for (std::size_t c = 0; c < C; ++c) {
          const T v = data_(c, i, j);
          if (v < -tol || v > T(1) + tol) return false;
          sum += v;
          if (v == T(1)) ++ones;
          else if (tag_ == Hardness::hard && v != T(0)) return false;
        }
        if (tag_ == Hardness::hard && (ones != 1)) return false;
        if (sum < -tol || sum > T(1) + tol) return false;
      }
    return true;
  }

 private:
  Tensor<T> data_;
  std::vector<std::string> categories_;
  Hardness tag_ = Hardness::hard;
};

/// 2 x H x W absolute source coordinates (row plane, then column plane).
template <typename T>
struct WarpField {
  Tensor<T> data;
  std::size_t height() const { return data.dim(1); }
  std::size_t width() const { return data.dim(2); }
};

/// 2 x H x W pixel locations.
template <typename T>
struct CoordinateMap {
  Tensor<T> data;
  std::size_t height() const { return data.dim(1); }
  std::size_t width() const { return data.dim(2); }
};

// ---------------------------------------------------------------------------
// Sampler kernels on raw planar buffers. `src` holds `planes` planes of H x W,
// `field` holds the row plane followed by the column plane.

namespace detail {

template <typename T>
struct Tap {
  std::size_t r0, r1, c0, c1;
  T a, b;              // fractional offsets along row / column
  bool row_free, col_free;  // false where the coordinate is clamped
};

template <typename T>
inline Tap<T> make_tap(T r, T c, std::size_t H, std::size_t W) {
  Tap<T> t{};
  const T rmax = T(H - 1), cmax = T(W - 1);
  t.row_free = r > T(0) && r < rmax;
  t.col_free = c > T(0) && c < cmax;
  r = std::clamp(r, T(0), rmax);
  c = std::clamp(c, T(0), cmax);
  const T rf = std::floor(r), cf = std::floor(c);
  t.r0 = static_cast<std::size_t>(rf);
  t.c0 = static_cast<std::size_t>(cf);
  t.r1 = std::min(t.r0 + 1, H - 1);
  t.c1 = std::min(t.c0 + 1, W - 1);
  t.a = r - rf;
  t.b = c - cf;
  return t;
}

}  // namespace detail

template <typename T>
void sample_planes(const T* src, std::size_t planes, std::size_t H, std::size_t W,
                   const T* field, T* out) {
  const std::size_t HW = H * W;
  for (std::size_t p = 0; p < HW; ++p) {
    const auto t = detail::make_tap(field[p], field[HW + p], H, W);
    const T w00 = (T(1) - t.a) * (T(1) - t.b), w01 = (T(1) - t.a) * t.b;
    const T w10 = t.a * (T(1) - t.b), w11 = t.a * t.b;
    const std::size_t i00 = t.r0 * W + t.c0, i01 = t.r0 * W + t.c1;
    const std::size_t i10 = t.r1 * W + t.c0, i11 = t.r1 * W + t.c1;
    for (std::size_t c = 0; c < planes; ++c) {
      const T* s = src + c * HW;
      out[c * HW + p] = w00 * s[i00] + w01 * s[i01] + w10 * s[i10] + w11 * s[i11];
    }
  }
}

/// Accumulates d(out)/d(src) and d(out)/d(field) contracted with `grad_out`.
/// Either gradient pointer may be null.
template <typename T>
void sample_planes_backward(const T* src, std::size_t planes, std::size_t H, std::size_t W,
                            const T* field, const T* grad_out, T* grad_src, T* grad_field) {
  const std::size_t HW = H * W;
  for (std::size_t p = 0; p < HW; ++p) {
    const auto t = detail::make_tap(field[p], field[HW + p], H, W);
    const T w00 = (T(1) - t.a) * (T(1) - t.b), w01 = (T(1) - t.a) * t.b;
    const T w10 = t.a * (T(1) - t.b), w11 = t.a * t.b;
    const std::size_t i00 = t.r0 * W + t.c0, i01 = t.r0 * W + t.c1;
    const std::size_t i10 = t.r1 * W + t.c0, i11 = t.r1 * W + t.c1;
    T dr = 0, dc = 0;
    for (std::size_t c = 0; c < planes; ++c) {
      const T g = grad_out[c * HW + p];
      if (g == T(0)) continue;
      const T* s = src + c * HW;
      if (grad_src) {
        T* gs = grad_src + c * HW;
        gs[i00] += g * w00;
        gs[i01] += g * w01;
        gs[i10] += g * w10;
        gs[i11] += g * w11;
      }
      if (grad_field) {
        dr += g * ((T(1) - t.b) * (s[i10] - s[i00]) + t.b * (s[i11] - s[i01]));
        dc += g * ((T(1) - t.a) * (s[i01] - s[i00]) + t.a * (s[i11] - s[i10]));
      }
    }
    if (grad_field) {
      if (t.row_free) grad_field[p] += dr;
      if (t.col_free) grad_field[HW + p] += dc;
    }
  }
}

// ---------------------------------------------------------------------------

template <typename T>
ParsingMap<T> encode_one_hot(const LabelImage& labels, std::size_t C) {
  require(labels.labels.size() == labels.height * labels.width, "shape_mismatch",
          "label buffer size mismatch");
  Tensor<T> data({C, labels.height, labels.width});
  for (std::size_t i = 0; i < labels.height; ++i)
    for (std::size_t j = 0; j < labels.width; ++j) {
      const std::size_t l = labels.at(i, j);
      if (l >= C)
        throw Error("label_out_of_range", "label " + std::to_string(l) + " at (" +
                                              std::to_string(i) + "," + std::to_string(j) +
                                              ") exceeds channel count " + std::to_string(C));
      data(l, i, j) = T(1);
    }
  std::vector<std::string> names = labels.palette;
  names.resize(C);
  for (std::size_t c = labels.palette.size(); c < C; ++c) names[c] = "class_" + std::to_string(c);
  return ParsingMap<T>(std::move(data), std::move(names), Hardness::hard);
}

template <typename T>
ParsingMap<T> encode_one_hot(const LabelImage& labels) {
  return encode_one_hot<T>(labels, labels.classes());
}

/// Per-pixel argmax; ties go to the lowest channel.
template <typename T>
LabelImage decode_argmax(const ParsingMap<T>& map) {
  const std::size_t C = map.channels(), H = map.height(), W = map.width();
  require(C <= 256, "too_many_classes", "label images hold at most 256 classes");
  LabelImage out(H, W, map.categories());
  for (std::size_t i = 0; i < H; ++i)
    for (std::size_t j = 0; j < W; ++j) {
      std::size_t best = 0;
      for (std::size_t c = 1; c < C; ++c)
        if (map(c, i, j) > map(best, i, j)) best = c;
      out.at(i, j) = static_cast<std::uint8_t>(best);
    }
  return out;
}

template <typename T>
WarpField<T> identity_warp(std::size_t H, std::size_t W) {
  require(H >= 1 && W >= 1, "invalid_size", "warp field needs H, W >= 1");
  Tensor<T> d({2, H, W});
  for (std::size_t i = 0; i < H; ++i)
    for (std::size_t j = 0; j < W; ++j) {
      d(0, i, j) = T(i);
      d(1, i, j) = T(j);
    }
  return {std::move(d)};
}

template <typename T>
CoordinateMap<T> fresh_coordinates(std::size_t H, std::size_t W) {
  return {identity_warp<T>(H, W).data};
}

/// Channel-wise clamped bilinear resampling of any C x H x W tensor.
template <typename T>
Tensor<T> warp_planes(const Tensor<T>& src, const WarpField<T>& field) {
  require(src.rank() == 3 && field.data.rank() == 3 && field.data.dim(0) == 2 &&
              src.dim(1) == field.height() && src.dim(2) == field.width(),
          "shape_mismatch",
          "warp source " + shape_str(src.shape()) + " vs field " + shape_str(field.data.shape()));
  Tensor<T> out(src.shape());
  sample_planes(src.data(), src.dim(0), src.dim(1), src.dim(2), field.data.data(), out.data());
  return out;
}

template <typename T>
ParsingMap<T> warp(const ParsingMap<T>& src, const WarpField<T>& field) {
  return ParsingMap<T>(warp_planes(src.data(), field), src.categories(), Hardness::soft);
}

template <typename T>
struct WarpGrad {
  Tensor<T> source;
  Tensor<T> field;
};

/// Vector-Jacobian product of `warp_planes` for an upstream gradient.
template <typename T>
WarpGrad<T> warp_planes_backward(const Tensor<T>& src, const WarpField<T>& field,
                                 const Tensor<T>& grad_out) {
  require(grad_out.shape() == src.shape(), "shape_mismatch", "upstream gradient shape");
  WarpGrad<T> g{Tensor<T>(src.shape()), Tensor<T>(field.data.shape())};
  sample_planes_backward(src.data(), src.dim(0), src.dim(1), src.dim(2), field.data.data(),
                         grad_out.data(), g.source.data(), g.field.data());
  return g;
}

template <typename T>
CoordinateMap<T> warp_coordinates(const CoordinateMap<T>& m, const WarpField<T>& field) {
  require(m.data.rank() == 3 && m.data.dim(0) == 2, "shape_mismatch", "coordinate map must be 2 x H x W");
  return {warp_planes(m.data, field)};
}

/// Composition of two backward fields: sampling with `first` then `second`
/// equals sampling once with compose(first, second) away from the borders.
template <typename T>
WarpField<T> compose_fields(const WarpField<T>& first, const WarpField<T>& second) {
  return {warp_planes(first.data, second)};
}

/// Mean location of component `c`, normalised by H*W rather than by the
/// component size. x runs along rows, y along columns.
template <typename T>
struct Centroid {
  T x = 0;
  T y = 0;
};

template <typename T>
Centroid<T> component_centroid(const ParsingMap<T>& map, std::size_t c) {
  require(c < map.channels(), "channel_out_of_range", "channel index out of range");
  const std::size_t H = map.height(), W = map.width();
  Centroid<T> out;
  for (std::size_t j = 0; j < H; ++j)
    for (std::size_t k = 0; k < W; ++k) {
      const T v = map(c, j, k);
      out.x += v * T(j);
      out.y += v * T(k);
    }
  out.x /= T(H * W);
  out.y /= T(H * W);
  return out;
}

/// Centroid normalised by the component's own mass; (0,0) for empty components.
/// Not used by any loss.
template <typename T>
Centroid<T> component_mass_centroid(const ParsingMap<T>& map, std::size_t c) {
  const auto raw = component_centroid(map, c);
  T mass = 0;
  for (std::size_t j = 0; j < map.height(); ++j)
    for (std::size_t k = 0; k < map.width(); ++k) mass += map(c, j, k);
  if (mass == T(0)) return {};
  const T s = T(map.height() * map.width()) / mass;
  return {raw.x * s, raw.y * s};
}

template <typename T>
T component_pixel_count(const ParsingMap<T>& map, std::size_t c) {
  require(c < map.channels(), "channel_out_of_range", "channel index out of range");
  T n = 0;
  for (std::size_t j = 0; j < map.height(); ++j)
    for (std::size_t k = 0; k < map.width(); ++k) n += map(c, j, k);
  return n;
}

}  // namespace semawarp
