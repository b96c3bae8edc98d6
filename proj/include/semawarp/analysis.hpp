// Segmentation metrics, the loss-ablation harness, embedding clustering and
// code interpolation.
#pragma once

#include <algorithm>
#include <cmath>
#include <cstring>
#include <cstdio>
#include <iomanip>
#include <numeric>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "semawarp/train.hpp"

namespace semawarp {

namespace detail {

inline void require_same_grid(const LabelImage& a, const LabelImage& b) {
  require(a.height == b.height && a.width == b.width, "shape_mismatch",
          "label images differ in size: " + std::to_string(a.height) + "x" +
              std::to_string(a.width) + " vs " + std::to_string(b.height) + "x" +
              std::to_string(b.width));
}

}  // namespace detail

/// Mean IoU over the classes that occur in either image. Two empty images
/// cannot happen (every pixel has a class), so the mean is always defined.
inline double miou(const LabelImage& pred, const LabelImage& ref, std::size_t C) {
  detail::require_same_grid(pred, ref);
  std::vector<std::size_t> inter(C, 0), uni(C, 0);
  for (std::size_t i = 0; i < pred.labels.size(); ++i) {
    const std::size_t p = pred.labels[i], r = ref.labels[i];
    require(p < C && r < C, "label_out_of_range", "label exceeds class count");
    if (p == r) {
      ++inter[p];
      ++uni[p];
    } else {
      ++uni[p];
      ++uni[r];
    }
  }
  double sum = 0;
  std::size_t present = 0;
  for (std::size_t c = 0; c < C; ++c) {
    if (uni[c] == 0) continue;
    sum += double(inter[c]) / double(uni[c]);
    ++present;
  }
  return present ? sum / double(present) : 1.0;
}

inline double pixacc(const LabelImage& pred, const LabelImage& ref) {
  detail::require_same_grid(pred, ref);
  if (pred.labels.empty()) return 1.0;
  std::size_t hit = 0;
  for (std::size_t i = 0; i < pred.labels.size(); ++i) hit += pred.labels[i] == ref.labels[i];
  return double(hit) / double(pred.labels.size());
}

// ---------------------------------------------------------------------------
// Transformation evaluation

/// (photo index, caricature index) into the evaluation sets.
using EvalPair = std::pair<std::size_t, std::size_t>;

struct SegScore {
  double miou = 0, pixacc = 0;
};

/// decode_argmax(P_fake) vs the reference caricature labels, averaged over pairs.
template <typename T>
SegScore evaluate_transform(const ShapeTransformer<T>& model,
                            const std::vector<LabelImage>& photos,
                            const std::vector<LabelImage>& caricatures,
                            const std::vector<EvalPair>& pairs) {
  require(!pairs.empty(), "empty_dataset", "no evaluation pairs");
  const std::size_t C = model.spec().channels;
  SegScore s;
  for (const auto& [p, c] : pairs) {
    const auto P = encode_one_hot<T>(photos.at(p), C);
    const auto Q = encode_one_hot<T>(caricatures.at(c), C);
    const auto field = model.decode_warp(model.encode(Domain::photo, P),
                                         model.encode(Domain::caricature, Q));
    const auto fake = decode_argmax(warp(P, field));
    s.miou += miou(fake, caricatures[c], C);
    s.pixacc += pixacc(fake, caricatures[c]);
  }
  s.miou /= double(pairs.size());
  s.pixacc /= double(pairs.size());
  return s;
}

/// Same metrics with the identity warp (the untransformed photo).
inline SegScore evaluate_identity(const std::vector<LabelImage>& photos,
                                  const std::vector<LabelImage>& caricatures,
                                  const std::vector<EvalPair>& pairs, std::size_t C) {
  require(!pairs.empty(), "empty_dataset", "no evaluation pairs");
  SegScore s;
  for (const auto& [p, c] : pairs) {
    s.miou += miou(photos.at(p), caricatures.at(c), C);
    s.pixacc += pixacc(photos[p], caricatures[c]);
  }
  s.miou /= double(pairs.size());
  s.pixacc /= double(pairs.size());
  return s;
}

/// Mean rec_pixel(P_cari, P_fake) over pairs.
template <typename T>
double evaluate_rec_pixel(const ShapeTransformer<T>& model, const std::vector<LabelImage>& photos,
                          const std::vector<LabelImage>& caricatures,
                          const std::vector<EvalPair>& pairs) {
  require(!pairs.empty(), "empty_dataset", "no evaluation pairs");
  const std::size_t C = model.spec().channels;
  double sum = 0;
  for (const auto& [p, c] : pairs) {
    const auto P = encode_one_hot<T>(photos.at(p), C);
    const auto Q = encode_one_hot<T>(caricatures.at(c), C);
    const auto field = model.decode_warp(model.encode(Domain::photo, P),
                                         model.encode(Domain::caricature, Q));
    sum += double(rec_pixel(Q, warp(P, field)));
  }
  return sum / double(pairs.size());
}

// ---------------------------------------------------------------------------
// Ablation

struct AblationRow {
  std::string variant;
  double miou = 0, pixacc = 0;
  std::uint64_t seed = 0;
  std::size_t steps = 0;
  std::string error;  // empty on success
};

struct AblationData {
  std::vector<LabelImage> train_photos, train_caricatures;
  std::vector<LabelImage> eval_photos, eval_caricatures;
  std::vector<EvalPair> eval_pairs;
};

/// A photo/caricature label pair tagged with its identity.
struct LabeledPair {
  std::string identity;
  LabelImage photo, caricature;
};

inline std::vector<LabeledPair> toy_pairs(const std::vector<ToySample>& samples) {
  std::vector<LabeledPair> out;
  for (const auto& s : samples) {
    char id[16];
    std::snprintf(id, sizeof id, "id%04zu", s.identity);
    out.push_back({id, s.photo, s.caricature});
  }
  return out;
}

/// The first `n_train` identities (in order of appearance) train; the rest are
/// held out. Every held-out photo is paired with one held-out caricature via a
/// seeded permutation, so the evaluation is unpaired like training.
inline AblationData split_pairs(const std::vector<LabeledPair>& pairs, std::size_t n_train,
                                std::uint64_t seed) {
  std::vector<std::string> order;
  for (const auto& p : pairs)
    if (std::find(order.begin(), order.end(), p.identity) == order.end()) order.push_back(p.identity);
  require(n_train >= 1 && n_train < order.size(), "invalid_split",
          "need at least one training and one held-out identity");
  const std::set<std::string> train(order.begin(), order.begin() + std::ptrdiff_t(n_train));
  AblationData d;
  for (const auto& p : pairs) {
    if (train.count(p.identity)) {
      d.train_photos.push_back(p.photo);
      d.train_caricatures.push_back(p.caricature);
    } else {
      d.eval_photos.push_back(p.photo);
      d.eval_caricatures.push_back(p.caricature);
    }
  }
  std::vector<std::size_t> perm(d.eval_caricatures.size());
  std::iota(perm.begin(), perm.end(), 0);
  std::mt19937_64 rng(seed);
  std::shuffle(perm.begin(), perm.end(), rng);
  for (std::size_t i = 0; i < d.eval_photos.size(); ++i) d.eval_pairs.push_back({i, perm[i]});
  return d;
}

/// Trains one model per variant from the same initial seed and schedule and
/// scores it on the evaluation pairs. The first row is the untrained
/// identity-warp baseline. A failing variant is reported in its row.
template <typename T>
std::vector<AblationRow> ablation_run(
    const AblationData& data, const ModelSpec& spec, const TrainSchedule& sched,
    const LossConfig& cfg, const std::vector<std::string>& variants,
    const std::function<void(const AblationRow&)>& on_row = {}) {
  const std::size_t C = spec.channels;
  std::vector<ParsingMap<T>> photos, caris;
  for (const auto& l : data.train_photos) photos.push_back(encode_one_hot<T>(l, C));
  for (const auto& l : data.train_caricatures) caris.push_back(encode_one_hot<T>(l, C));

  std::vector<AblationRow> rows;
  const auto base = evaluate_identity(data.eval_photos, data.eval_caricatures, data.eval_pairs, C);
  rows.push_back({"identity", base.miou, base.pixacc, sched.seed, 0, ""});
  if (on_row) on_row(rows.back());
  for (const auto& v : variants) {
    AblationRow row;
    row.variant = v;
    row.seed = sched.seed;
    try {
      const auto mask = ShapeTermMask::from_variant(v);
      ShapeTransformer<T> model(spec, sched.seed);
      const auto report = train_shape_transformer(model, photos, caris, sched, cfg, mask);
      row.steps = report.steps;
      if (report.aborted) throw Error(report.abort_code, report.abort_message);
      const auto s =
          evaluate_transform(model, data.eval_photos, data.eval_caricatures, data.eval_pairs);
      row.miou = s.miou;
      row.pixacc = s.pixacc;
    } catch (const std::exception& e) {
      row.error = e.what();
    }
    rows.push_back(row);
    if (on_row) on_row(rows.back());
  }
  return rows;
}

/// Tab-separated table; mIoU and pixAcc in percent.
inline std::string ablation_table(const std::vector<AblationRow>& rows) {
  std::ostringstream os;
  os << "# miou averages over classes present in prediction or reference\n";
  os << "variant\tmiou\tpixacc\tseed\tsteps\terror\n";
  os << std::fixed << std::setprecision(2);
  for (const auto& r : rows)
    os << r.variant << '\t' << 100 * r.miou << '\t' << 100 * r.pixacc << '\t' << r.seed << '\t'
       << r.steps << '\t' << (r.error.empty() ? "-" : r.error) << '\n';
  return os.str();
}

// ---------------------------------------------------------------------------
// Embedding analysis

template <typename T>
ShapeCode<T> interpolate_codes(const ShapeCode<T>& a, const ShapeCode<T>& b, double t) {
  require(a.size() == b.size(), "dimension_mismatch", "codes differ in length");
  require(t >= 0.0 && t <= 1.0, "t_out_of_range", "interpolation t must lie in [0, 1]");
  ShapeCode<T> out;
  out.values.resize(a.size());
  for (std::size_t i = 0; i < a.size(); ++i)
    out.values[i] = a.values[i] == b.values[i] ? a.values[i]
                                               : T((1.0 - t) * a.values[i] + t * b.values[i]);
  return out;
}

namespace detail {

template <typename T>
double distance(const std::vector<T>& a, const std::vector<T>& b) {
  double s = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double d = double(a[i]) - double(b[i]);
    s += d * d;
  }
  return std::sqrt(s);
}

}  // namespace detail

/// Median of all pairwise Euclidean distances; the default bandwidth.
template <typename T>
double median_pairwise_distance(const std::vector<ShapeCode<T>>& codes) {
  std::vector<double> d;
  for (std::size_t i = 0; i < codes.size(); ++i)
    for (std::size_t j = i + 1; j < codes.size(); ++j)
      d.push_back(detail::distance(codes[i].values, codes[j].values));
  if (d.empty()) return 1.0;
  std::nth_element(d.begin(), d.begin() + d.size() / 2, d.end());
  const double m = d[d.size() / 2];
  return m > 0 ? m : 1.0;
}

struct Clustering {
  std::vector<std::size_t> labels;
  std::vector<std::vector<double>> modes;
};

enum class MeanShiftKernel { gaussian, flat };

/// Mean shift: every point climbs to a density mode; converged points within
/// bandwidth / 2 of each other (single linkage) share a cluster. Labels follow
/// first appearance, each mode is the converged position of the cluster's
/// first point.
///
/// `gaussian` uses bandwidth as the kernel sigma and never yields more
/// clusters when the bandwidth grows. `flat` averages the points within
/// `bandwidth`; it can split a cluster as the bandwidth grows.
template <typename T>
Clustering mean_shift_cluster(const std::vector<ShapeCode<T>>& codes, double bandwidth,
                              MeanShiftKernel kernel = MeanShiftKernel::gaussian) {
  require(bandwidth > 0 && std::isfinite(bandwidth), "invalid_bandwidth",
          "bandwidth must be positive");
  require(!codes.empty(), "empty_input", "mean shift needs at least one code");
  const std::size_t N = codes.size(), D = codes[0].size();
  std::vector<std::vector<double>> pts(N);
  for (std::size_t i = 0; i < N; ++i) {
    require(codes[i].size() == D, "dimension_mismatch", "codes differ in length");
    pts[i].assign(codes[i].values.begin(), codes[i].values.end());
  }

  const double inv2s2 = 0.5 / (bandwidth * bandwidth);
  std::vector<std::vector<double>> conv(N);
  for (std::size_t i = 0; i < N; ++i) {
    std::vector<double> x = pts[i], next(D);
    for (int it = 0; it < 1000; ++it) {
      std::fill(next.begin(), next.end(), 0.0);
      double wsum = 0;
      for (const auto& p : pts) {
        const double d = detail::distance(p, x);
        const double w = kernel == MeanShiftKernel::gaussian ? std::exp(-d * d * inv2s2)
                                                             : (d <= bandwidth ? 1.0 : 0.0);
        for (std::size_t k = 0; k < D; ++k) next[k] += w * p[k];
        wsum += w;
      }
      if (wsum <= 0) break;  // underflow far from all data; stay put
      for (auto& v : next) v /= wsum;
      const double shift = detail::distance(next, x);
      x.swap(next);
      if (shift <= 1e-10 * bandwidth) break;
    }
    conv[i] = std::move(x);
  }

  std::vector<std::size_t> parent(N);
  std::iota(parent.begin(), parent.end(), 0);
  auto root = [&](std::size_t a) {
    while (parent[a] != a) a = parent[a] = parent[parent[a]];
    return a;
  };
  for (std::size_t i = 0; i < N; ++i)
    for (std::size_t j = i + 1; j < N; ++j)
      if (detail::distance(conv[i], conv[j]) <= bandwidth / 2) {
        const std::size_t a = root(i), b = root(j);
        parent[std::max(a, b)] = std::min(a, b);
      }

  Clustering out;
  out.labels.resize(N);
  std::vector<std::size_t> label_of(N, N);
  for (std::size_t i = 0; i < N; ++i) {
    const std::size_t r = root(i);
    if (label_of[r] == N) {
      label_of[r] = out.modes.size();
      out.modes.push_back(conv[i]);
    }
    out.labels[i] = label_of[r];
  }
  return out;
}

/// Portable table for external plotting: header line
/// "SEMAWARP-EMBED v1 N D" then N rows of D code values followed by the
/// cluster label, all little-endian float32.
template <typename T>
std::string export_embeddings(const std::vector<ShapeCode<T>>& codes,
                              const std::vector<std::size_t>& labels) {
  require(codes.size() == labels.size(), "dimension_mismatch", "one label per code required");
  const std::size_t D = codes.empty() ? 0 : codes[0].size();
  std::string out = "SEMAWARP-EMBED v1 " + std::to_string(codes.size()) + " " + std::to_string(D) + "\n";
  for (std::size_t i = 0; i < codes.size(); ++i) {
    require(codes[i].size() == D, "dimension_mismatch", "codes differ in length");
    for (T v : codes[i].values) put_f32_le(out, float(v));
    put_f32_le(out, float(labels[i]));
  }
  return out;
}

}  // namespace semawarp
