// Synthetic face parsing maps: each identity is a set of ellipse geometry
// parameters; photos render them with small jitter and caricatures render an
// exaggerated copy (deviations from the mean face scaled up).
#pragma once

#include <array>
#include <cmath>
#include <random>
#include <string>
#include <vector>

#include "semawarp/parsemap.hpp"

namespace semawarp {

struct Range {
  double lo = 0;
  double hi = 0;
  double mid() const { return 0.5 * (lo + hi); }
  double span() const { return hi - lo; }
};

/// Geometry parameters, as fractions of the image size.
enum ToyParam : std::size_t {
  kFaceRow, kFaceCol, kFaceHalfH, kFaceHalfW,
  kEyeRise, kEyeSpacing, kEyeHalfW, kEyeHalfH,
  kNoseHalfLen, kNoseHalfW,
  kMouthDrop, kMouthHalfW, kLipThick,
  kHairThick, kBrowGap,
  kToyParamCount
};

struct ToySpec {
  std::size_t height = 64;
  std::size_t width = 64;
  std::size_t identities = 200;
  std::size_t samples_per_identity = 1;
  std::array<Range, kToyParamCount> geometry = {{
      {0.52, 0.56}, {0.47, 0.53}, {0.26, 0.32}, {0.19, 0.26},
      {0.05, 0.09}, {0.09, 0.12}, {0.045, 0.070}, {0.035, 0.055},
      {0.055, 0.090}, {0.030, 0.050},
      {0.14, 0.18}, {0.08, 0.12}, {0.025, 0.040},
      {0.03, 0.07}, {0.025, 0.045},
  }};
  Range exaggeration = {1.6, 2.2};  // scale applied to deviations from the mean face
  double jitter = 0.04;             // per-sample noise, as a fraction of each range
  std::vector<std::string> categories = default_categories();

  /// Admissible parameter interval after exaggeration and jitter.
  Range extended(std::size_t p) const {
    const auto& r = geometry[p];
    const double half = 0.5 * r.span() * (exaggeration.hi + 3 * jitter);
    return {std::max(r.mid() - half, 1e-3), r.mid() + half};
  }

  void validate() const {
    require(height >= 8 && width >= 8, "infeasible_geometry", "toy images must be at least 8x8");
    require(identities >= 1 && samples_per_identity >= 1, "infeasible_geometry",
            "need at least one identity and one sample");
    require(categories.size() == 11, "infeasible_geometry",
            "toy renderer draws the 11 default components");
    for (const auto& r : geometry)
      require(r.lo > 0 && r.lo <= r.hi, "infeasible_geometry", "geometry range is empty");
    require(exaggeration.lo >= 1 && exaggeration.lo <= exaggeration.hi, "infeasible_geometry",
            "exaggeration range must be >= 1 and ordered");
    require(jitter >= 0 && jitter < 0.5, "infeasible_geometry", "jitter out of range");
    const Range row = extended(kFaceRow), hh = extended(kFaceHalfH), ht = extended(kHairThick);
    const Range col = extended(kFaceCol), hw = extended(kFaceHalfW);
    require(row.lo - hh.hi - ht.hi > 0 && row.hi + hh.hi < 1, "infeasible_geometry",
            "exaggerated face leaves the image vertically");
    require(col.lo - hw.hi - ht.hi > 0 && col.hi + hw.hi + ht.hi < 1, "infeasible_geometry",
            "exaggerated face leaves the image horizontally");
  }
};

struct ToySample {
  LabelImage photo;
  LabelImage caricature;
  std::size_t identity = 0;
};

using ToyGeometry = std::array<double, kToyParamCount>;

namespace detail {

// Half axes are floored at one pixel (`fr`, `fc`) so that every component
// covers at least the pixel nearest its centre.
inline bool in_ellipse(double r, double c, double cr, double cc, double hr, double hc,
                       double fr, double fc) {
  const double a = (r - cr) / std::max(hr, fr), b = (c - cc) / std::max(hc, fc);
  return a * a + b * b <= 1.0;
}

}  // namespace detail

/// Rasterises one geometry; later components overwrite earlier ones.
inline LabelImage render_toy(const ToyGeometry& g, std::size_t H, std::size_t W,
                             const std::vector<std::string>& categories) {
  enum : std::uint8_t {
    bg, skin, lbrow, rbrow, leye, reye, nose, ulip, mouth, llip, hair
  };
  LabelImage img(H, W, categories);
  const double fr = g[kFaceRow], fc = g[kFaceCol], fh = g[kFaceHalfH], fw = g[kFaceHalfW];
  const double er = fr - g[kEyeRise], es = g[kEyeSpacing];
  const double br = er - g[kEyeHalfH] - g[kBrowGap];
  const double mr = fr + g[kMouthDrop], lt = g[kLipThick], mw = g[kMouthHalfW];
  const double px_r = 1.0 / double(H), px_c = 1.0 / double(W);
  for (std::size_t i = 0; i < H; ++i)
    for (std::size_t j = 0; j < W; ++j) {
      const double r = (double(i) + 0.5) / double(H), c = (double(j) + 0.5) / double(W);
      auto ellipse = [&](double cr, double cc, double hr, double hc) {
        return detail::in_ellipse(r, c, cr, cc, hr, hc, px_r, px_c);
      };
      std::uint8_t l = bg;
      if (r < fr - 0.25 * fh && ellipse(fr, fc, fh + g[kHairThick], fw + g[kHairThick]))
        l = hair;
      if (ellipse(fr, fc, fh, fw)) l = skin;
      if (ellipse(br, fc - es, 0.02, 1.2 * g[kEyeHalfW])) l = lbrow;
      if (ellipse(br, fc + es, 0.02, 1.2 * g[kEyeHalfW])) l = rbrow;
      if (ellipse(er, fc - es, g[kEyeHalfH], g[kEyeHalfW])) l = leye;
      if (ellipse(er, fc + es, g[kEyeHalfH], g[kEyeHalfW])) l = reye;
      if (ellipse(fr + 0.02, fc, g[kNoseHalfLen], g[kNoseHalfW])) l = nose;
      if (ellipse(mr - 0.75 * lt, fc, 0.75 * lt, mw)) l = ulip;
      if (ellipse(mr + 0.75 * lt, fc, 0.9 * lt, 0.9 * mw)) l = llip;
      if (ellipse(mr, fc, 0.4 * lt, 0.85 * mw)) l = mouth;
      img.at(i, j) = l;
    }
  return img;
}

/// Deterministic in `seed`. Identity k owns samples [k * spi, (k + 1) * spi).
inline std::vector<ToySample> generate_toy_dataset(const ToySpec& spec, std::uint64_t seed) {
  spec.validate();
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  std::normal_distribution<double> noise(0.0, 1.0);

  auto perturb = [&](ToyGeometry g) {
    for (std::size_t p = 0; p < kToyParamCount; ++p) {
      const Range ext = spec.extended(p);
      g[p] = std::clamp(g[p] + spec.jitter * spec.geometry[p].span() * noise(rng), ext.lo, ext.hi);
    }
    return g;
  };

  std::vector<ToySample> out;
  out.reserve(spec.identities * spec.samples_per_identity);
  for (std::size_t id = 0; id < spec.identities; ++id) {
    ToyGeometry base;
    for (std::size_t p = 0; p < kToyParamCount; ++p)
      base[p] = spec.geometry[p].lo + spec.geometry[p].span() * unit(rng);
    for (std::size_t s = 0; s < spec.samples_per_identity; ++s) {
      const double k = spec.exaggeration.lo + spec.exaggeration.span() * unit(rng);
      ToyGeometry cari;
      for (std::size_t p = 0; p < kToyParamCount; ++p) {
        const double m = spec.geometry[p].mid();
        cari[p] = m + k * (base[p] - m);
      }
      ToySample sample;
      sample.identity = id;
      sample.photo = render_toy(perturb(base), spec.height, spec.width, spec.categories);
      sample.caricature = render_toy(perturb(cari), spec.height, spec.width, spec.categories);
      out.push_back(std::move(sample));
    }
  }
  return out;
}

}  // namespace semawarp
