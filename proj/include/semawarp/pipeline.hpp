// End-to-end assembly: configuration, landmark alignment, photo
// transformation and the statistic-matching style stage.
#pragma once

#include <cctype>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "semawarp/analysis.hpp"
#include "semawarp/io.hpp"
#include "semawarp/retrieval.hpp"

namespace semawarp {

enum class StyleMode { off, statistic_match };

/// Everything the CLI and the service read from the configuration document.
struct PipelineConfig {
  std::string transformer_checkpoint;
  std::string retrieval_checkpoint;
  std::string index_path;
  std::vector<std::string> categories = default_categories();
  std::size_t image_height = 256;
  std::size_t image_width = 256;
  StyleMode style = StyleMode::off;
  std::size_t top_k = 5;
  std::string canonical_landmarks;  // optional template file; built-in when empty

  ModelSpec model;
  LossConfig loss;
  TrainSchedule shape_schedule;
  TrainSchedule retrieval_schedule = TrainSchedule::retrieval_defaults();
  double retrieval_rec_weight = 1.0;

  void validate() const {
    require(image_height > 0 && image_width > 0, "invalid_config", "image size must be positive");
    require(top_k >= 1, "invalid_config", "top_k must be >= 1");
    require(!categories.empty(), "invalid_config", "category list is empty");
    loss.validate();
    shape_schedule.validate();
    retrieval_schedule.validate();
  }

  /// Checks that referenced files exist (only the non-empty ones).
  void validate_files() const {
    for (const auto* p : {&transformer_checkpoint, &retrieval_checkpoint, &index_path,
                          &canonical_landmarks})
      if (!p->empty())
        require(std::filesystem::exists(*p), "missing_file", "configured file not found: " + *p);
  }
};

namespace detail {

inline std::size_t to_count(const std::string& key, const std::string& v) {
  try {
    std::size_t used = 0;
    // stoull accepts and wraps a leading minus sign.
    if (!v.empty() && std::isdigit(static_cast<unsigned char>(v[0]))) {
      const unsigned long long n = std::stoull(v, &used);
      if (used == v.size()) return std::size_t(n);
    }
  } catch (const std::exception&) {
  }
  throw Error("invalid_config", "'" + key + "' expects a non-negative integer, got '" + v + "'");
}

inline double to_real(const std::string& key, const std::string& v) {
  try {
    std::size_t used = 0;
    const double d = std::stod(v, &used);
    if (used == v.size()) return d;
  } catch (const std::exception&) {
  }
  throw Error("invalid_config", "'" + key + "' expects a number, got '" + v + "'");
}

inline void apply_schedule_key(TrainSchedule& s, const std::string& k, const std::string& key,
                               const std::string& v) {
  if (k == "lr_initial") s.lr_initial = to_real(key, v);
  else if (k == "batch_size") s.batch_size = to_count(key, v);
  else if (k == "epochs_flat") s.epochs_flat = to_count(key, v);
  else if (k == "epochs_decay") s.epochs_decay = to_count(key, v);
  else if (k == "critic_steps_per_gen") s.critic_steps_per_gen = to_count(key, v);
  else if (k == "critic_clip") s.critic_clip = to_real(key, v);
  else if (k == "beta1") s.beta1 = to_real(key, v);
  else if (k == "beta2") s.beta2 = to_real(key, v);
  else if (k == "seed") s.seed = to_count(key, v);
  else if (k == "max_steps") s.max_steps = to_count(key, v);
  else throw Error("invalid_config", "unknown configuration key '" + key + "'");
}

}  // namespace detail

/// Parses the key/value configuration document. Unknown keys are errors.
inline PipelineConfig parse_config(const std::string& text) {
  PipelineConfig c;
  for (const auto& [key, v] : parse_key_values(text)) {
    const auto dot = key.find('.');
    const std::string group = dot == std::string::npos ? "" : key.substr(0, dot);
    const std::string k = dot == std::string::npos ? key : key.substr(dot + 1);
    if (key == "transformer_checkpoint") c.transformer_checkpoint = v;
    else if (key == "retrieval_checkpoint") c.retrieval_checkpoint = v;
    else if (key == "index") c.index_path = v;
    else if (key == "canonical_landmarks") c.canonical_landmarks = v;
    else if (key == "categories") c.categories = split(v, ',');
    else if (key == "image_height") c.image_height = detail::to_count(key, v);
    else if (key == "image_width") c.image_width = detail::to_count(key, v);
    else if (key == "top_k") c.top_k = detail::to_count(key, v);
    else if (key == "style_mode") {
      if (v == "off") c.style = StyleMode::off;
      else if (v == "statistic-match") c.style = StyleMode::statistic_match;
      else throw Error("invalid_config", "style_mode must be 'off' or 'statistic-match'");
    } else if (group == "loss") {
      if (k == "lambda_l") c.loss.lambda_l = detail::to_real(key, v);
      else if (k == "lambda_n") c.loss.lambda_n = detail::to_real(key, v);
      else if (k == "lambda_r") c.loss.lambda_r = detail::to_real(key, v);
      else if (k == "margin_m") c.loss.margin_m = detail::to_real(key, v);
      else if (k == "epsilon_ratio") c.loss.epsilon_ratio = detail::to_real(key, v);
      else if (k == "component_weight_mode") {
        if (v == "reciprocal-ratio") c.loss.component_weight_mode = ComponentWeightMode::reciprocal_ratio;
        else if (v == "uniform") c.loss.component_weight_mode = ComponentWeightMode::uniform;
        else throw Error("invalid_config", "component_weight_mode must be 'reciprocal-ratio' or 'uniform'");
      } else throw Error("invalid_config", "unknown configuration key '" + key + "'");
    } else if (group == "shape") {
      detail::apply_schedule_key(c.shape_schedule, k, key, v);
    } else if (group == "retrieval") {
      if (k == "rec_weight") c.retrieval_rec_weight = detail::to_real(key, v);
      else detail::apply_schedule_key(c.retrieval_schedule, k, key, v);
    } else if (group == "model") {
      if (k == "code_dim") c.model.code_dim = detail::to_count(key, v);
      else if (k == "n_blocks") c.model.n_blocks = detail::to_count(key, v);
      else if (k == "widths") {
        c.model.widths.clear();
        for (const auto& w : split(v, ',')) c.model.widths.push_back(detail::to_count(key, w));
      } else if (k == "growth") c.model.growth = detail::to_count(key, v);
      else if (k == "layers_per_block") c.model.layers_per_block = detail::to_count(key, v);
      else if (k == "height") c.model.height = detail::to_count(key, v);
      else if (k == "width") c.model.width = detail::to_count(key, v);
      else if (k == "flow_bound_fraction") c.model.flow_bound_fraction = detail::to_real(key, v);
      else if (k == "shared_cycle_decoder") c.model.shared_cycle_decoder = v == "1" || v == "true";
      else throw Error("invalid_config", "unknown configuration key '" + key + "'");
    } else {
      throw Error("invalid_config", "unknown configuration key '" + key + "'");
    }
  }
  c.model.categories = c.categories;
  c.model.channels = c.categories.size();
  c.validate();
  return c;
}

/// SEMAWARP_CONFIG wins over `fallback`; empty result means "use defaults".
inline std::string config_path(const std::string& fallback) {
  if (const char* env = std::getenv("SEMAWARP_CONFIG"); env && *env) return env;
  return fallback;
}

inline PipelineConfig load_config(const std::string& fallback_path) {
  const std::string path = config_path(fallback_path);
  if (path.empty()) {
    PipelineConfig c;
    c.validate();
    return c;
  }
  require(std::filesystem::exists(path), "missing_file", "config file not found: " + path);
  return parse_config(read_file(path));
}

// ---------------------------------------------------------------------------
// Dataset directories: manifest.tsv with "identity<TAB>photo<TAB>caricature"
// rows (paths relative to the directory), label PNGs with sidecars.

inline constexpr const char* kManifestName = "manifest.tsv";

inline void write_dataset(const std::string& dir, const std::vector<LabeledPair>& pairs) {
  std::filesystem::create_directories(dir);
  std::string manifest = "identity\tphoto\tcaricature\n";
  for (std::size_t i = 0; i < pairs.size(); ++i) {
    char name[64];
    std::snprintf(name, sizeof name, "%05zu", i);
    const std::string pho = std::string("photo_") + name + ".png";
    const std::string car = std::string("cari_") + name + ".png";
    save_labels(dir + "/" + pho, pairs[i].photo);
    save_labels(dir + "/" + car, pairs[i].caricature);
    manifest += pairs[i].identity + "\t" + pho + "\t" + car + "\n";
  }
  write_file(dir + "/" + kManifestName, manifest);
}

struct ManifestRow {
  std::string identity, photo, caricature;  // absolute or dir-relative paths resolved
};

inline std::vector<ManifestRow> read_manifest(const std::string& dir) {
  const std::string text = read_file(dir + "/" + kManifestName);
  std::vector<ManifestRow> rows;
  std::istringstream is(text);
  std::string line;
  bool header = true;
  while (std::getline(is, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    if (header) {
      header = false;
      continue;
    }
    const auto cols = split(line, '\t');
    require(cols.size() == 3, "bad_manifest", "manifest rows need identity, photo and caricature");
    auto resolve = [&](const std::string& p) {
      return std::filesystem::path(p).is_absolute() ? p : dir + "/" + p;
    };
    rows.push_back({cols[0], resolve(cols[1]), resolve(cols[2])});
  }
  return rows;
}

inline std::vector<LabeledPair> load_dataset(const std::string& dir) {
  std::vector<LabeledPair> out;
  for (const auto& r : read_manifest(dir))
    out.push_back({r.identity, load_labels(r.photo), load_labels(r.caricature)});
  return out;
}

// ---------------------------------------------------------------------------
// Alignment

struct Point2 {
  double row = 0, col = 0;
};

inline constexpr std::size_t kLandmarkCount = 17;

/// Canonical frontal template in a 256 x 256 frame (row, col): four contour
/// points (left cheek, chin, right cheek, forehead), brow ends left to right,
/// eye corners left to right, nose tip, mouth (left, top, right, bottom).
inline const std::vector<Point2>& default_canonical_landmarks() {
  static const std::vector<Point2> pts = {
      {140, 58},  {226, 128}, {140, 198}, {40, 128},
      {86, 72},   {80, 112},  {80, 144},  {86, 184},
      {104, 78},  {104, 112}, {104, 144}, {104, 178},
      {150, 128},
      {184, 96},  {176, 128}, {184, 160}, {194, 128},
  };
  return pts;
}

/// Template file: one "row col" pair per line, 17 lines, '#' comments allowed.
inline std::vector<Point2> parse_landmarks(const std::string& text) {
  std::vector<Point2> pts;
  std::istringstream is(text);
  std::string line;
  while (std::getline(is, line)) {
    const auto first = line.find_first_not_of(" \t\r");
    if (first == std::string::npos || line[first] == '#') continue;
    std::istringstream ls(line);
    Point2 p;
    require(bool(ls >> p.row >> p.col), "bad_landmarks", "landmark line must be 'row col'");
    pts.push_back(p);
  }
  return pts;
}

struct AlignmentSpec {
  std::vector<Point2> landmarks;  // in the input image
  std::vector<Point2> canonical;  // in the output frame

  void validate() const {
    require(landmarks.size() == kLandmarkCount && canonical.size() == kLandmarkCount,
            "bad_landmarks", "exactly 17 landmarks are required");
    for (const auto* set : {&landmarks, &canonical})
      for (const auto& p : *set)
        require(std::isfinite(p.row) && std::isfinite(p.col), "bad_landmarks",
                "landmark coordinates must be finite");
  }
};

/// Canonical template scaled from the 256 x 256 reference frame to H x W.
inline std::vector<Point2> canonical_for(std::size_t H, std::size_t W,
                                         const std::vector<Point2>& base = default_canonical_landmarks()) {
  std::vector<Point2> out;
  for (const auto& p : base) out.push_back({p.row * double(H) / 256.0, p.col * double(W) / 256.0});
  return out;
}

/// out = s R in + t, stored as (a, b, tr, tc) with
/// row' = a row - b col + tr, col' = b row + a col + tc.
struct Similarity {
  double a = 1, b = 0, tr = 0, tc = 0;

  Point2 apply(const Point2& p) const { return {a * p.row - b * p.col + tr, b * p.row + a * p.col + tc}; }
  Similarity inverse() const {
    const double d = a * a + b * b;
    const double ia = a / d, ib = -b / d;
    return {ia, ib, -(ia * tr - ib * tc), -(ib * tr + ia * tc)};
  }
};

/// Least-squares similarity mapping `from` onto `to`.
inline Similarity fit_similarity(const std::vector<Point2>& from, const std::vector<Point2>& to) {
  require(from.size() == to.size() && !from.empty(), "bad_landmarks", "landmark sets differ in size");
  // Centre both sets so that the 2x2 normal equations decouple.
  Point2 mf, mt;
  for (std::size_t i = 0; i < from.size(); ++i) {
    mf.row += from[i].row; mf.col += from[i].col;
    mt.row += to[i].row; mt.col += to[i].col;
  }
  const double n = double(from.size());
  mf = {mf.row / n, mf.col / n};
  mt = {mt.row / n, mt.col / n};
  double sxx = 0, num_a = 0, num_b = 0, spread_to = 0;
  for (std::size_t i = 0; i < from.size(); ++i) {
    const double x = from[i].row - mf.row, y = from[i].col - mf.col;
    const double u = to[i].row - mt.row, v = to[i].col - mt.col;
    sxx += x * x + y * y;
    num_a += x * u + y * v;
    num_b += x * v - y * u;
    spread_to += u * u + v * v;
  }
  const double scale = std::max(1.0, std::sqrt(spread_to / n));
  require(sxx / n > 1e-12 * scale * scale, "degenerate_landmarks",
          "landmarks are coincident; the similarity transform is undetermined");
  Similarity s;
  s.a = num_a / sxx;
  s.b = num_b / sxx;
  require(s.a * s.a + s.b * s.b > 1e-18, "degenerate_landmarks",
          "landmark configuration collapses the similarity transform");
  s.tr = mt.row - (s.a * mf.row - s.b * mf.col);
  s.tc = mt.col - (s.b * mf.row + s.a * mf.col);
  return s;
}

/// Backward field over an out_h x out_w grid sampling the input at sim^-1.
inline WarpField<double> similarity_field(const Similarity& sim, std::size_t out_h, std::size_t out_w) {
  const Similarity inv = sim.inverse();
  WarpField<double> f{Tensor<double>({2, out_h, out_w})};
  const std::size_t HW = out_h * out_w;
  for (std::size_t i = 0; i < out_h; ++i)
    for (std::size_t j = 0; j < out_w; ++j) {
      const Point2 src = inv.apply({double(i), double(j)});
      f.data[i * out_w + j] = src.row;
      f.data[HW + i * out_w + j] = src.col;
    }
  return f;
}

namespace detail {

inline std::size_t nearest_index(double v, std::size_t n) {
  const double r = std::clamp(std::nearbyint(v), 0.0, double(n - 1));
  return std::size_t(r);
}

/// Bilinear, clamp-to-edge resampling of an RGB image into the field's grid.
inline RgbImage warp_rgb_any(const RgbImage& img, const Tensor<double>& field) {
  const std::size_t oh = field.dim(1), ow = field.dim(2), OHW = oh * ow;
  const std::size_t H = img.height, W = img.width;
  RgbImage out(oh, ow);
  for (std::size_t p = 0; p < OHW; ++p) {
    const auto t = make_tap(field[p], field[OHW + p], H, W);
    for (std::size_t ch = 0; ch < 3; ++ch) {
      const double v = (1 - t.a) * (1 - t.b) * img.at(t.r0, t.c0, ch) +
                       (1 - t.a) * t.b * img.at(t.r0, t.c1, ch) +
                       t.a * (1 - t.b) * img.at(t.r1, t.c0, ch) + t.a * t.b * img.at(t.r1, t.c1, ch);
      out.pixels[p * 3 + ch] = std::uint8_t(std::clamp(std::nearbyint(v), 0.0, 255.0));
    }
  }
  return out;
}

}  // namespace detail

struct IngestResult {
  RgbImage image;
  LabelImage labels;
  Similarity transform;  // input -> output frame
};

/// Aligns image and labels to the canonical landmarks; bilinear for the
/// image, nearest neighbour for the labels.
inline IngestResult ingest(const RgbImage& image, const LabelImage& labels, const AlignmentSpec& spec,
                           std::size_t out_h = 256, std::size_t out_w = 256) {
  spec.validate();
  require(out_h > 0 && out_w > 0, "invalid_config", "output size must be positive");
  require(image.height == labels.height && image.width == labels.width, "shape_mismatch",
          "image and labels differ in size");
  labels.validate();
  for (const auto& p : spec.landmarks)
    require(p.row >= 0 && p.col >= 0 && p.row <= double(image.height - 1) &&
                p.col <= double(image.width - 1),
            "landmark_out_of_bounds", "landmark lies outside the image");
  IngestResult r;
  r.transform = fit_similarity(spec.landmarks, spec.canonical);
  const auto field = similarity_field(r.transform, out_h, out_w);
  r.image = detail::warp_rgb_any(image, field.data);
  r.labels = LabelImage(out_h, out_w, labels.palette);
  const std::size_t HW = out_h * out_w;
  for (std::size_t p = 0; p < HW; ++p)
    r.labels.labels[p] = labels.at(detail::nearest_index(field.data[p], labels.height),
                                   detail::nearest_index(field.data[HW + p], labels.width));
  return r;
}

// ---------------------------------------------------------------------------
// Transformation

namespace detail {

/// Nearest-neighbour resize of labels (pixel centres aligned).
inline LabelImage resize_labels(const LabelImage& in, std::size_t H, std::size_t W) {
  if (in.height == H && in.width == W) return in;
  LabelImage out(H, W, in.palette);
  for (std::size_t i = 0; i < H; ++i)
    for (std::size_t j = 0; j < W; ++j) {
      const double si = (double(i) + 0.5) * double(in.height) / double(H) - 0.5;
      const double sj = (double(j) + 0.5) * double(in.width) / double(W) - 0.5;
      out.at(i, j) = in.at(nearest_index(si, in.height), nearest_index(sj, in.width));
    }
  return out;
}

/// Model-resolution field -> image-resolution field. The residual (field
/// minus identity) is resampled and rescaled, so an identity field stays an
/// exact identity at any resolution.
inline Tensor<double> upsample_field(const WarpField<float>& f, std::size_t H, std::size_t W) {
  const std::size_t h = f.height(), w = f.width(), hw = h * w, HW = H * W;
  Tensor<double> out({2, H, W});
  if (h == H && w == W) {
    for (std::size_t k = 0; k < 2 * HW; ++k) out[k] = double(f.data[k]);
    return out;
  }
  std::vector<double> res(2 * hw);
  for (std::size_t i = 0; i < h; ++i)
    for (std::size_t j = 0; j < w; ++j) {
      res[i * w + j] = double(f.data[i * w + j]) - double(i);
      res[hw + i * w + j] = double(f.data[hw + i * w + j]) - double(j);
    }
  const double sr = double(H) / double(h), sc = double(W) / double(w);
  for (std::size_t i = 0; i < H; ++i)
    for (std::size_t j = 0; j < W; ++j) {
      const auto t = make_tap((double(i) + 0.5) / sr - 0.5, (double(j) + 0.5) / sc - 0.5, h, w);
      auto interp = [&](const double* p) {
        return (1 - t.a) * (1 - t.b) * p[t.r0 * w + t.c0] + (1 - t.a) * t.b * p[t.r0 * w + t.c1] +
               t.a * (1 - t.b) * p[t.r1 * w + t.c0] + t.a * t.b * p[t.r1 * w + t.c1];
      };
      const double dr = interp(res.data()), dc = interp(res.data() + hw);
      out[i * W + j] = double(i) + (dr == 0 ? 0.0 : dr * sr);
      out[HW + i * W + j] = double(j) + (dc == 0 ? 0.0 : dc * sc);
    }
  return out;
}

}  // namespace detail

struct TransformResult {
  RgbImage image;           // deformed photo
  LabelImage labels;        // decode_argmax(P_fake)
  ParsingMap<double> fake;  // P_fake at image resolution
  Tensor<double> field;     // 2 x H x W backward field at image resolution
};

/// Warps the photo and its map toward the shape encoded by `z_target`.
/// Labels may be at any resolution; they are resized to the model grid for
/// encoding and the predicted field is brought back to image resolution.
inline TransformResult transform_with_code(const RgbImage& photo, const LabelImage& photo_labels,
                                           const ShapeCode<float>& z_target,
                                           const ShapeTransformer<float>& model) {
  const ModelSpec& spec = model.spec();
  require(photo.height == photo_labels.height && photo.width == photo_labels.width,
          "shape_mismatch", "photo and photo labels differ in size");
  require(photo_labels.palette == spec.categories, "category_mismatch",
          "photo labels use a different category list than the checkpoint");
  photo_labels.validate();
  const auto small = detail::resize_labels(photo_labels, spec.height, spec.width);
  const auto z_pho = model.encode(Domain::photo, encode_one_hot<float>(small, spec.channels));
  const auto field = detail::upsample_field(model.decode_warp(z_pho, z_target), photo.height, photo.width);

  TransformResult r;
  r.field = field;
  r.image = detail::warp_rgb_any(photo, field);
  const auto P = encode_one_hot<double>(photo_labels, spec.channels);
  r.fake = warp(P, WarpField<double>{field});
  r.labels = decode_argmax(r.fake);
  return r;
}

inline ShapeCode<float> caricature_code(const LabelImage& cari_labels,
                                        const ShapeTransformer<float>& model) {
  const ModelSpec& spec = model.spec();
  require(cari_labels.palette == spec.categories, "category_mismatch",
          "caricature labels use a different category list than the checkpoint");
  cari_labels.validate();
  const auto small = detail::resize_labels(cari_labels, spec.height, spec.width);
  return model.encode(Domain::caricature, encode_one_hot<float>(small, spec.channels));
}

inline TransformResult transform_photo(const RgbImage& photo, const LabelImage& photo_labels,
                                       const LabelImage& cari_labels,
                                       const ShapeTransformer<float>& model) {
  return transform_with_code(photo, photo_labels, caricature_code(cari_labels, model), model);
}

// ---------------------------------------------------------------------------
// Style stub

/// Per-channel mean/std transfer, clipped to [0, 255] and rounded.
inline RgbImage style_stub(const RgbImage& content, const RgbImage& style, double eps = 1e-3) {
  require(content.height == style.height && content.width == style.width, "shape_mismatch",
          "content and style images differ in size");
  const std::size_t n = content.height * content.width;
  RgbImage out = content;
  if (n == 0) return out;
  for (std::size_t ch = 0; ch < 3; ++ch) {
    auto stats = [&](const RgbImage& img) {
      double m = 0, v = 0;
      for (std::size_t p = 0; p < n; ++p) m += img.pixels[p * 3 + ch];
      m /= double(n);
      for (std::size_t p = 0; p < n; ++p) {
        const double d = img.pixels[p * 3 + ch] - m;
        v += d * d;
      }
      return std::pair{m, std::sqrt(v / double(n))};
    };
    const auto [mc, sc] = stats(content);
    const auto [ms, ss] = stats(style);
    for (std::size_t p = 0; p < n; ++p) {
      const double v = (content.pixels[p * 3 + ch] - mc) / std::max(sc, eps) * ss + ms;
      out.pixels[p * 3 + ch] = std::uint8_t(std::clamp(std::nearbyint(v), 0.0, 255.0));
    }
  }
  return out;
}

}  // namespace semawarp
