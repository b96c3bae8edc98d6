// User grid control: thin-plate-spline deformation of a hard parsing map.
#pragma once

#include <cmath>
#include <vector>

#include <Eigen/Dense>

#include "semawarp/parsemap.hpp"

namespace semawarp {

/// An anchor point (pixel units) and the displacement the user dragged it by.
struct ControlPoint {
  double row = 0;
  double col = 0;
  double drow = 0;
  double dcol = 0;
};

/// Thin-plate spline through scattered 2-D correspondences.
class ThinPlateSpline {
 public:
  /// Fits f(from_k) = to_k. Throws when fewer than three points are given or
  /// the points are collinear.
  ThinPlateSpline(const std::vector<Eigen::Vector2d>& from, const std::vector<Eigen::Vector2d>& to)
      : centers_(from) {
    const auto n = static_cast<Eigen::Index>(from.size());
    require(n >= 3 && to.size() == from.size(), "too_few_anchors",
            "thin-plate spline needs at least 3 control points");
    Eigen::MatrixXd P(n, 3);
    for (Eigen::Index i = 0; i < n; ++i) P.row(i) << 1.0, from[i].x(), from[i].y();
    Eigen::FullPivLU<Eigen::MatrixXd> lu(P);
    lu.setThreshold(1e-9);
    require(lu.rank() == 3, "collinear_anchors", "control points are collinear");

    Eigen::MatrixXd A = Eigen::MatrixXd::Zero(n + 3, n + 3);
    for (Eigen::Index i = 0; i < n; ++i)
      for (Eigen::Index j = 0; j < n; ++j) A(i, j) = kernel((from[i] - from[j]).norm());
    A.block(0, n, n, 3) = P;
    A.block(n, 0, 3, n) = P.transpose();
    Eigen::MatrixXd rhs = Eigen::MatrixXd::Zero(n + 3, 2);
    for (Eigen::Index i = 0; i < n; ++i) rhs.row(i) = to[i].transpose();
    Eigen::FullPivLU<Eigen::MatrixXd> solver(A);
    require(solver.isInvertible(), "degenerate_anchors", "duplicate control points");
    coef_ = solver.solve(rhs);
  }

  Eigen::Vector2d operator()(const Eigen::Vector2d& p) const {
    const auto n = static_cast<Eigen::Index>(centers_.size());
    Eigen::Vector2d out = coef_.row(n).transpose() + p.x() * coef_.row(n + 1).transpose() +
                          p.y() * coef_.row(n + 2).transpose();
    for (Eigen::Index i = 0; i < n; ++i)
      out += kernel((p - centers_[i]).norm()) * coef_.row(i).transpose();
    return out;
  }

 private:
  static double kernel(double r) { return r > 0 ? r * r * std::log(r) : 0.0; }

  std::vector<Eigen::Vector2d> centers_;
  Eigen::MatrixXd coef_;
};

/// Dense backward field for a set of dragged control points: each output pixel
/// near a moved anchor's destination samples from the anchor's origin.
inline WarpField<double> grid_field(std::size_t H, std::size_t W,
                                    const std::vector<ControlPoint>& controls) {
  std::vector<Eigen::Vector2d> dst, src;
  dst.reserve(controls.size());
  src.reserve(controls.size());
  for (const auto& cp : controls) {
    require(std::isfinite(cp.row) && std::isfinite(cp.col) && std::isfinite(cp.drow) &&
                std::isfinite(cp.dcol),
            "non_finite", "control point coordinates must be finite");
    src.emplace_back(cp.row, cp.col);
    dst.emplace_back(cp.row + cp.drow, cp.col + cp.dcol);
  }
  const ThinPlateSpline tps(dst, src);
  WarpField<double> f{Tensor<double>({2, H, W})};
  for (std::size_t i = 0; i < H; ++i)
    for (std::size_t j = 0; j < W; ++j) {
      const auto s = tps(Eigen::Vector2d(double(i), double(j)));
      f.data(0, i, j) = s.x();
      f.data(1, i, j) = s.y();
    }
  return f;
}

/// Nearest-neighbour resampling of labels through a backward field.
inline LabelImage resample_nearest(const LabelImage& labels, const WarpField<double>& field) {
  const std::size_t H = labels.height, W = labels.width;
  require(field.height() == H && field.width() == W, "shape_mismatch", "field/label size mismatch");
  LabelImage out = labels;
  for (std::size_t i = 0; i < H; ++i)
    for (std::size_t j = 0; j < W; ++j) {
      const double r = std::clamp(std::round(field.data(0, i, j)), 0.0, double(H - 1));
      const double c = std::clamp(std::round(field.data(1, i, j)), 0.0, double(W - 1));
      out.at(i, j) = labels.at(static_cast<std::size_t>(r), static_cast<std::size_t>(c));
    }
  return out;
}

inline LabelImage grid_deform(const LabelImage& labels, const std::vector<ControlPoint>& controls) {
  labels.validate();
  return resample_nearest(labels, grid_field(labels.height, labels.width, controls));
}

template <typename T>
ParsingMap<T> grid_deform(const ParsingMap<T>& map, const std::vector<ControlPoint>& controls) {
  require(map.tag() == Hardness::hard, "not_hard", "grid deformation expects a hard map");
  return encode_one_hot<T>(grid_deform(decode_argmax(map), controls), map.channels());
}

/// Uniform lattice of rows x cols anchors spanning the image, zero displacement.
inline std::vector<ControlPoint> uniform_lattice(std::size_t H, std::size_t W, std::size_t rows,
                                                 std::size_t cols) {
  require(rows >= 2 && cols >= 2, "too_few_anchors", "lattice needs at least 2 x 2 points");
  std::vector<ControlPoint> out;
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t c = 0; c < cols; ++c)
      out.push_back({double(H - 1) * double(r) / double(rows - 1),
                     double(W - 1) * double(c) / double(cols - 1), 0.0, 0.0});
  return out;
}

}  // namespace semawarp
