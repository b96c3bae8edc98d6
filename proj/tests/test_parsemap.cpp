#include <gtest/gtest.h>

#include <random>

#include "semawarp/parsemap.hpp"
#include "test_util.hpp"

using namespace semawarp;
using semawarp::testing::names;

namespace {

LabelImage grid2(std::initializer_list<std::initializer_list<int>> rows, std::size_t C) {
  const std::size_t H = rows.size(), W = rows.begin()->size();
  LabelImage img(H, W, names(C));
  std::size_t i = 0;
  for (const auto& r : rows) {
    std::size_t j = 0;
    for (int v : r) img.at(i, j++) = std::uint8_t(v);
    ++i;
  }
  return img;
}

}  // namespace

TEST(EncodeOneHot, SinglePixel) {
  const auto m = encode_one_hot<double>(grid2({{0}}, 2), 2);
  EXPECT_EQ(m(0, 0, 0), 1.0);
  EXPECT_EQ(m(1, 0, 0), 0.0);
  EXPECT_EQ(m.tag(), Hardness::hard);
}

TEST(EncodeOneHot, TwoByTwo) {
  const auto m = encode_one_hot<double>(grid2({{0, 1}, {1, 1}}, 2), 2);
  EXPECT_EQ(m(0, 0, 0), 1.0);
  EXPECT_EQ(m(0, 0, 1), 0.0);
  EXPECT_EQ(m(0, 1, 0), 0.0);
  EXPECT_EQ(m(0, 1, 1), 0.0);
  EXPECT_TRUE(m.satisfies_invariants());
}

TEST(EncodeOneHot, RejectsOutOfRangeLabelWithCoordinate) {
  auto img = grid2({{0, 1}, {3, 1}}, 4);
  try {
    encode_one_hot<double>(img, 2);
    FAIL() << "expected rejection";
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), "label_out_of_range");
    EXPECT_NE(std::string(e.what()).find("(1,0)"), std::string::npos);
  }
}

TEST(EncodeOneHot, RoundTripRandomGrids) {
  std::mt19937_64 rng(7);
  for (int t = 0; t < 100; ++t) {
    const auto img = semawarp::testing::random_labels(8, 8, 5, rng);
    const auto back = decode_argmax(encode_one_hot<double>(img, 5));
    EXPECT_EQ(back.labels, img.labels);
  }
}

TEST(DecodeArgmax, TieGoesToLowestChannel) {
  Tensor<double> t({2, 1, 1});
  t(0, 0, 0) = 0.5;
  t(1, 0, 0) = 0.5;
  const ParsingMap<double> m(t, names(2), Hardness::soft);
  EXPECT_EQ(decode_argmax(m).at(0, 0), 0);
}

TEST(DecodeArgmax, HalfPixelWarpMatchesBruteForceArgmax) {
  const auto img = grid2({{0, 0, 1, 1}, {0, 1, 1, 1}, {0, 0, 0, 1}, {1, 1, 0, 0}}, 2);
  const auto src = encode_one_hot<double>(img, 2);
  auto field = identity_warp<double>(4, 4);
  for (std::size_t i = 0; i < 4; ++i)
    for (std::size_t j = 0; j < 4; ++j) {
      field.data(0, i, j) += 0.5;
      field.data(1, i, j) += 0.5;
    }
  const auto soft = warp(src, field);
  const auto labels = decode_argmax(soft);
  for (std::size_t i = 0; i < 4; ++i)
    for (std::size_t j = 0; j < 4; ++j) {
      // brute force: average of the (clamped) 2x2 neighbourhood of class 1
      double p1 = 0;
      for (int di = 0; di < 2; ++di)
        for (int dj = 0; dj < 2; ++dj) {
          const std::size_t r = std::min<std::size_t>(i + di, 3), c = std::min<std::size_t>(j + dj, 3);
          const double wr = (i == 3) ? (di == 0 ? 1.0 : 0.0) : 0.5;
          const double wc = (j == 3) ? (dj == 0 ? 1.0 : 0.0) : 0.5;
          p1 += wr * wc * (img.at(r, c) == 1 ? 1.0 : 0.0);
        }
      const int expect = p1 > 1.0 - p1 ? 1 : 0;
      EXPECT_EQ(labels.at(i, j), expect) << i << "," << j;
    }
}

TEST(IdentityWarp, Definition) {
  const auto one = identity_warp<double>(1, 1);
  EXPECT_EQ(one.data(0, 0, 0), 0.0);
  EXPECT_EQ(one.data(1, 0, 0), 0.0);
  const auto f = identity_warp<double>(2, 3);
  for (std::size_t j = 0; j < 3; ++j) {
    EXPECT_EQ(f.data(0, 0, j), 0.0);
    EXPECT_EQ(f.data(0, 1, j), 1.0);
    EXPECT_EQ(f.data(1, 0, j), double(j));
    EXPECT_EQ(f.data(1, 1, j), double(j));
  }
  EXPECT_THROW(identity_warp<double>(0, 3), Error);
}

TEST(Warp, IdentityIsBitExact) {
  std::mt19937_64 rng(3);
  for (int t = 0; t < 20; ++t) {
    const auto m = semawarp::testing::random_soft(3, 7, 5, rng);
    const auto out = warp(m, identity_warp<double>(7, 5));
    EXPECT_EQ(out.data(), m.data());
    EXPECT_EQ(out.tag(), Hardness::soft);
  }
}

TEST(Warp, ClampedColumnShift) {
  const auto src = encode_one_hot<double>(grid2({{0, 1}, {1, 1}}, 2), 2);
  auto field = identity_warp<double>(2, 2);
  for (std::size_t i = 0; i < 2; ++i)
    for (std::size_t j = 0; j < 2; ++j) field.data(1, i, j) -= 1.0;
  const auto out = warp(src, field);
  EXPECT_EQ(out(0, 0, 0), 1.0);
  EXPECT_EQ(out(0, 0, 1), 1.0);
  EXPECT_EQ(out(0, 1, 0), 0.0);
  EXPECT_EQ(out(0, 1, 1), 0.0);
}

TEST(Warp, ShapeMismatchRejected) {
  std::mt19937_64 rng(1);
  const auto m = semawarp::testing::random_soft(2, 4, 4, rng);
  EXPECT_THROW(warp(m, identity_warp<double>(4, 5)), Error);
}

TEST(Warp, ValuesStayInUnitInterval) {
  std::mt19937_64 rng(11);
  for (int t = 0; t < 50; ++t) {
    const auto m = semawarp::testing::random_soft(3, 6, 6, rng);
    const auto out = warp(m, semawarp::testing::random_field(6, 6, rng, -3.0, 3.0));
    for (double v : out.data().storage()) {
      EXPECT_GE(v, 0.0);
      EXPECT_LE(v, 1.0);
    }
  }
}

// Gradient of a weighted sum of the output against central differences, for
// both the source values and the field.
TEST(Warp, GradientsMatchFiniteDifferences) {
  using semawarp::testing::finite_difference;
  using semawarp::testing::integer_gap;
  using semawarp::testing::relative_error;
  std::mt19937_64 rng(2024);
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  int checked = 0;
  while (checked < 100) {
    auto src = semawarp::testing::random_soft(3, 6, 6, rng);
    auto field = semawarp::testing::random_field(6, 6, rng);
    bool near_kink = false;
    for (double v : field.data.storage()) near_kink |= integer_gap(v) < 1e-4;
    if (near_kink) continue;  // resample: sampler is not differentiable there
    Tensor<double> weights(src.data().shape());
    for (auto& w : weights.storage()) w = checked % 2 ? 1.0 : u(rng);  // odd seeds: plain sum

    auto objective = [&] {
      const auto out = warp_planes(src.data(), field);
      double s = 0;
      for (std::size_t i = 0; i < out.size(); ++i) s += weights[i] * out[i];
      return s;
    };
    const auto g = warp_planes_backward(src.data(), field, weights);
    auto fd_field = finite_difference(objective, field.data.storage());
    auto fd_src = finite_difference(objective, src.data().storage());
    EXPECT_LT(relative_error(g.field.storage(), fd_field), 1e-4);
    EXPECT_LT(relative_error(g.source.storage(), fd_src), 1e-4);
    ++checked;
  }
}

TEST(ComponentCentroid, Examples) {
  const auto empty = encode_one_hot<double>(grid2({{0, 0}, {0, 0}}, 2), 2);
  EXPECT_EQ(component_centroid(empty, 1).x, 0.0);
  EXPECT_EQ(component_centroid(empty, 1).y, 0.0);

  LabelImage img(4, 4, names(2));
  img.at(2, 3) = 1;
  const auto c = component_centroid(encode_one_hot<double>(img, 2), 1);
  EXPECT_DOUBLE_EQ(c.x, 0.125);
  EXPECT_DOUBLE_EQ(c.y, 0.1875);

  const auto full = component_centroid(empty, 0);
  EXPECT_DOUBLE_EQ(full.x, 0.5);
  EXPECT_DOUBLE_EQ(full.y, 0.5);
  EXPECT_THROW(component_centroid(empty, 2), Error);
}

TEST(ComponentCentroid, MassNormalisedVariant) {
  LabelImage img(4, 4, names(2));
  img.at(2, 3) = 1;
  const auto c = component_mass_centroid(encode_one_hot<double>(img, 2), 1);
  EXPECT_DOUBLE_EQ(c.x, 2.0);
  EXPECT_DOUBLE_EQ(c.y, 3.0);
}

TEST(ComponentPixelCount, Examples) {
  const auto m = encode_one_hot<double>(grid2({{1, 1}, {0, 1}}, 2), 2);
  EXPECT_EQ(component_pixel_count(m, 1), 3.0);
  const auto empty = encode_one_hot<double>(grid2({{0, 0}, {0, 0}}, 2), 2);
  EXPECT_EQ(component_pixel_count(empty, 1), 0.0);
}

TEST(ComponentPixelCount, SoftMapsNeverExceedImageArea) {
  std::mt19937_64 rng(5);
  for (int t = 0; t < 50; ++t) {
    const auto hard = encode_one_hot<double>(semawarp::testing::random_labels(6, 6, 4, rng), 4);
    const auto soft = warp(hard, semawarp::testing::random_field(6, 6, rng, -2.0, 2.0));
    EXPECT_TRUE(soft.satisfies_invariants(1e-12));
    double total = 0;
    for (std::size_t c = 0; c < 4; ++c) total += component_pixel_count(soft, c);
    EXPECT_LE(total, 36.0 + 1e-9);
  }
}

TEST(ComponentPixelCount, IsLinear) {
  std::mt19937_64 rng(9);
  for (int t = 0; t < 20; ++t) {
    const auto a = semawarp::testing::random_soft(3, 5, 5, rng);
    const auto b = semawarp::testing::random_soft(3, 5, 5, rng);
    const double alpha = 0.3, beta = 0.6;
    Tensor<double> mix(a.data().shape());
    for (std::size_t i = 0; i < mix.size(); ++i) mix[i] = alpha * a.data()[i] + beta * b.data()[i];
    const ParsingMap<double> m(mix, names(3), Hardness::soft);
    for (std::size_t c = 0; c < 3; ++c)
      EXPECT_NEAR(component_pixel_count(m, c),
                  alpha * component_pixel_count(a, c) + beta * component_pixel_count(b, c), 1e-12);
  }
}

TEST(WarpCoordinates, IdentityLeavesMapUnchanged) {
  const auto m = fresh_coordinates<double>(5, 4);
  EXPECT_EQ(warp_coordinates(m, identity_warp<double>(5, 4)).data, m.data);
}

TEST(WarpCoordinates, CompositionOfAffineFields) {
  // Affine fields inside the image: bilinear sampling reproduces affine
  // functions exactly, so both routes must equal f1(f2(x)).
  const std::size_t H = 4, W = 4;
  auto affine = [&](double a, double b, double c, double d) {
    WarpField<double> f{Tensor<double>({2, H, W})};
    for (std::size_t i = 0; i < H; ++i)
      for (std::size_t j = 0; j < W; ++j) {
        f.data(0, i, j) = a + b * double(i) + 0.05 * double(j);
        f.data(1, i, j) = c + d * double(j) + 0.05 * double(i);
      }
    return f;
  };
  const auto f1 = affine(0.3, 0.8, 0.2, 0.75);
  const auto f2 = affine(0.1, 0.9, 0.4, 0.7);
  const auto m = fresh_coordinates<double>(H, W);
  const auto twice = warp_coordinates(warp_coordinates(m, f1), f2);
  const auto once = warp_coordinates(m, compose_fields(f1, f2));
  for (std::size_t i = 0; i < H; ++i)
    for (std::size_t j = 0; j < W; ++j) {
      const double r2 = f2.data(0, i, j), c2 = f2.data(1, i, j);
      const double r = 0.3 + 0.8 * r2 + 0.05 * c2, c = 0.2 + 0.75 * c2 + 0.05 * r2;
      EXPECT_NEAR(twice.data(0, i, j), r, 1e-6);
      EXPECT_NEAR(twice.data(1, i, j), c, 1e-6);
      EXPECT_NEAR(once.data(0, i, j), twice.data(0, i, j), 1e-6);
      EXPECT_NEAR(once.data(1, i, j), twice.data(1, i, j), 1e-6);
    }
}

TEST(WarpCoordinates, UniformRowShift) {
  const std::size_t H = 5, W = 4;
  auto field = identity_warp<double>(H, W);
  for (std::size_t i = 0; i < H; ++i)
    for (std::size_t j = 0; j < W; ++j) field.data(0, i, j) += 1.0;
  const auto out = warp_coordinates(fresh_coordinates<double>(H, W), field);
  for (std::size_t i = 0; i + 1 < H; ++i)
    for (std::size_t j = 0; j < W; ++j) {
      EXPECT_EQ(out.data(0, i, j), double(i) + 1.0);
      EXPECT_EQ(out.data(1, i, j), double(j));
    }
}

TEST(WarpCoordinates, GradientsMatchFiniteDifferences) {
  using semawarp::testing::finite_difference;
  using semawarp::testing::integer_gap;
  using semawarp::testing::relative_error;
  std::mt19937_64 rng(77);
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  int checked = 0;
  while (checked < 100) {
    auto coords = fresh_coordinates<double>(6, 6);
    for (auto& v : coords.data.storage()) v += u(rng);
    auto field = semawarp::testing::random_field(6, 6, rng);
    bool near_kink = false;
    for (double v : field.data.storage()) near_kink |= integer_gap(v) < 1e-4;
    if (near_kink) continue;
    Tensor<double> weights(coords.data.shape());
    for (auto& w : weights.storage()) w = u(rng);
    auto objective = [&] {
      const auto out = warp_coordinates(coords, field);
      double s = 0;
      for (std::size_t i = 0; i < out.data.size(); ++i) s += weights[i] * out.data[i];
      return s;
    };
    const auto g = warp_planes_backward(coords.data, field, weights);
    EXPECT_LT(relative_error(g.field.storage(), finite_difference(objective, field.data.storage())), 1e-4);
    EXPECT_LT(relative_error(g.source.storage(), finite_difference(objective, coords.data.storage())), 1e-4);
    ++checked;
  }
}
