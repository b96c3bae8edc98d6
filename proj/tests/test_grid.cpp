#include <gtest/gtest.h>

#include "semawarp/grid.hpp"
#include "test_util.hpp"

using namespace semawarp;

namespace {

LabelImage ellipse_map(std::size_t H, std::size_t W) {
  LabelImage img(H, W, semawarp::testing::names(3));
  for (std::size_t i = 0; i < H; ++i)
    for (std::size_t j = 0; j < W; ++j) {
      const double dr = (double(i) - 16.0) / 10.0, dc = (double(j) - 16.0) / 7.0;
      if (dr * dr + dc * dc <= 1.0) img.at(i, j) = 1;
      if ((double(i) - 13) * (double(i) - 13) + (double(j) - 16) * (double(j) - 16) <= 4) img.at(i, j) = 2;
    }
  return img;
}

std::size_t count(const LabelImage& img, std::uint8_t c) {
  return std::size_t(std::count(img.labels.begin(), img.labels.end(), c));
}

}  // namespace

TEST(GridDeform, ZeroDisplacementIsIdentity) {
  const auto img = ellipse_map(32, 32);
  EXPECT_EQ(grid_deform(img, uniform_lattice(32, 32, 4, 4)), img);
  const auto map = encode_one_hot<double>(img);
  EXPECT_EQ(grid_deform(map, uniform_lattice(32, 32, 3, 3)).data(), map.data());
}

TEST(GridDeform, UniformDisplacementTranslates) {
  const auto img = ellipse_map(32, 32);
  auto lattice = uniform_lattice(32, 32, 3, 3);
  for (auto& cp : lattice) cp.drow = cp.dcol = 3.0;
  const auto out = grid_deform(img, lattice);
  for (std::size_t i = 0; i < 32; ++i)
    for (std::size_t j = 0; j < 32; ++j) {
      const std::size_t si = i >= 3 ? i - 3 : 0, sj = j >= 3 ? j - 3 : 0;
      EXPECT_EQ(out.at(i, j), img.at(si, sj)) << i << "," << j;
    }
}

TEST(GridDeform, DraggingContourOutwardWidensComponent) {
  const auto img = ellipse_map(32, 32);
  std::vector<ControlPoint> cps = uniform_lattice(32, 32, 2, 2);
  cps.push_back({16.0, 23.0, 0.0, 4.0});  // right contour of the face, dragged outward
  cps.push_back({16.0, 9.0, 0.0, 0.0});
  const auto out = grid_deform(img, cps);
  EXPECT_GT(count(out, 1) + count(out, 2), count(img, 1) + count(img, 2));
}

TEST(GridDeform, OutputStaysHard) {
  auto cps = uniform_lattice(32, 32, 3, 3);
  cps[4].drow = 2.5;
  cps[4].dcol = -1.5;
  const auto out = grid_deform(encode_one_hot<double>(ellipse_map(32, 32)), cps);
  EXPECT_EQ(out.tag(), Hardness::hard);
  EXPECT_TRUE(out.satisfies_invariants());
}

TEST(GridDeform, RejectsTooFewOrCollinearAnchors) {
  const auto img = ellipse_map(32, 32);
  try {
    grid_deform(img, {{0, 0, 1, 1}, {5, 5, 0, 0}});
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), "too_few_anchors");
  }
  try {
    grid_deform(img, {{0, 0, 1, 1}, {5, 5, 0, 0}, {10, 10, 0, 0}, {20, 20, 0, 0}});
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), "collinear_anchors");
  }
}

TEST(GridDeform, RejectsSoftMaps) {
  const auto hard = encode_one_hot<double>(ellipse_map(32, 32));
  const ParsingMap<double> soft(hard.data(), hard.categories(), Hardness::soft);
  EXPECT_THROW(grid_deform(soft, uniform_lattice(32, 32, 3, 3)), Error);
}

TEST(ThinPlateSpline, InterpolatesControlPoints) {
  std::vector<Eigen::Vector2d> from = {{0, 0}, {10, 0}, {0, 10}, {7, 7}, {3, 8}};
  std::vector<Eigen::Vector2d> to = {{1, 0}, {10, 2}, {0, 11}, {9, 6}, {3, 8}};
  const ThinPlateSpline tps(from, to);
  for (std::size_t i = 0; i < from.size(); ++i) EXPECT_LT((tps(from[i]) - to[i]).norm(), 1e-9);
}
