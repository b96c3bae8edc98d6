// JSON request handlers shared by the CLI and the HTTP server, plus the
// server wiring. Images and label maps travel as base64 PNG.
#pragma once

#include <atomic>
#include <memory>
#include <mutex>
#include <optional>
#include <string>

// Eigen must be parsed before httplib: <resolv.h> defines a `_res` macro.
#include "semawarp/grid.hpp"
#include "semawarp/pipeline.hpp"
#include "httplib.h"
#include "json.hpp"

namespace semawarp {

using Json = nlohmann::ordered_json;

struct ApiResponse {
  int status = 200;
  std::string body;  // JSON document
};

/// Read-only models and index loaded from a PipelineConfig.
struct ServiceState {
  PipelineConfig config;
  std::optional<ShapeTransformer<float>> transformer;
  std::optional<RetrievalModel<float>> retrieval;
  std::optional<GalleryIndex> index;

  static std::shared_ptr<const ServiceState> load(const PipelineConfig& cfg) {
    cfg.validate_files();
    auto s = std::make_shared<ServiceState>();
    s->config = cfg;
    if (!cfg.transformer_checkpoint.empty()) {
      s->transformer.emplace(ShapeTransformer<float>::deserialize(read_file(cfg.transformer_checkpoint)));
      require(s->transformer->spec().categories == cfg.categories, "category_mismatch",
              "transformer checkpoint categories differ from the configuration");
    }
    if (!cfg.retrieval_checkpoint.empty()) {
      s->retrieval.emplace(RetrievalModel<float>::deserialize(read_file(cfg.retrieval_checkpoint)));
      require(s->retrieval->spec().categories == cfg.categories, "category_mismatch",
              "retrieval checkpoint categories differ from the configuration");
    }
    if (!cfg.index_path.empty()) {
      s->index.emplace(parse_index(read_file(cfg.index_path)));
      if (s->retrieval)
        require(s->retrieval->fingerprint() == s->index->fingerprint, "fingerprint_mismatch",
                "index was not built with the configured retrieval checkpoint");
    }
    return s;
  }
};

/// Stateless request handlers over an atomically swappable state snapshot.
class Api {
 public:
  explicit Api(std::shared_ptr<const ServiceState> state) : state_(std::move(state)) {}

  void reload(std::shared_ptr<const ServiceState> next) { std::atomic_store(&state_, std::move(next)); }
  std::shared_ptr<const ServiceState> state() const { return std::atomic_load(&state_); }

  ApiResponse health() const {
    const auto s = state();
    Json j;
    j["status"] = "ok";
    j["transformer"] = s->transformer.has_value();
    j["retrieval"] = s->retrieval.has_value();
    j["index_entries"] = s->index ? s->index->size() : 0;
    j["categories"] = s->config.categories;
    return ok(j);
  }

  /// {photo_labels, k?} -> {results: [{id, distance, path}]}
  ApiResponse retrieve(const std::string& body) const {
    return guard([&] {
      const auto s = state();
      const Json req = parse(body);
      require(s->retrieval && s->index, "not_configured", "retrieval checkpoint or index not loaded");
      const auto photo = labels_field(req, "photo_labels", *s);
      const std::size_t k = req.contains("k") ? count_field(req, "k") : s->config.top_k;
      Json results = Json::array();
      for (const auto& hit : query_top_k(*s->index, *s->retrieval, photo, k)) {
        Json h;
        h["id"] = hit.id;
        h["distance"] = hit.distance;
        h["path"] = s->index->find(hit.id)->path;
        results.push_back(h);
      }
      Json j;
      j["results"] = results;
      return ok(j);
    });
  }

  /// {photo, photo_labels, cari_labels | gallery_id, style_image?} ->
  /// {image, labels, mean_displacement}
  ApiResponse transform(const std::string& body) const {
    return guard([&] {
      const auto s = state();
      const Json req = parse(body);
      const auto z = reference_code(req, "cari_labels", "gallery_id", *s);
      return ok(transform_reply(req, z, *s));
    });
  }

  /// {photo, photo_labels, t, code_a/code_b | cari_a/cari_b | gallery_a/gallery_b}
  ApiResponse interpolate(const std::string& body) const {
    return guard([&] {
      const auto s = state();
      const Json req = parse(body);
      const auto& model = transformer(*s);
      require(req.contains("t") && req["t"].is_number(), "bad_request", "'t' must be a number");
      const double t = req["t"].get<double>();
      ShapeCode<float> za, zb;
      if (req.contains("code_a") || req.contains("code_b")) {
        za = code_field(req, "code_a", model.spec().code_dim);
        zb = code_field(req, "code_b", model.spec().code_dim);
      } else {
        za = reference_code(req, "cari_a", "gallery_a", *s);
        zb = reference_code(req, "cari_b", "gallery_b", *s);
      }
      return ok(transform_reply(req, interpolate_codes(za, zb, t), *s));
    });
  }

  /// {labels, controls: [{row, col, drow, dcol}]} -> {labels, counts}
  ApiResponse edit(const std::string& body) const {
    return guard([&] {
      const auto s = state();
      const Json req = parse(body);
      const auto labels = labels_field(req, "labels", *s);
      require(req.contains("controls") && req["controls"].is_array(), "bad_request",
              "'controls' must be an array of {row, col, drow, dcol}");
      std::vector<ControlPoint> cps;
      for (const auto& c : req["controls"]) {
        require(c.is_object() && c.contains("row") && c.contains("col") && c.contains("drow") &&
                    c.contains("dcol"),
                "bad_request", "each control needs row, col, drow and dcol");
        ControlPoint cp{number(c, "row"), number(c, "col"), number(c, "drow"), number(c, "dcol")};
        cps.push_back(cp);
      }
      const auto out = grid_deform(labels, cps);
      Json j;
      j["labels"] = base64_encode(encode_label_png(out));
      j["counts"] = counts(out);
      return ok(j);
    });
  }

  /// -> {id, path, labels}
  ApiResponse gallery(const std::string& id) const {
    return guard([&] {
      const auto s = state();
      require(s->index.has_value(), "not_configured", "no gallery index loaded");
      const auto* e = s->index->find(id);
      if (!e) throw Error("unknown_record", "no gallery record '" + id + "'");
      Json j;
      j["id"] = e->id;
      j["path"] = e->path;
      j["labels"] = base64_encode(encode_label_png(load_labels(e->path)));
      return ok(j);
    });
  }

  static int status_for(const std::string& code) {
    if (code == "unknown_record" || code == "not_found") return 404;
    if (code == "not_configured") return 503;
    if (code == "internal") return 500;
    return 400;
  }

  static ApiResponse error(const std::string& code, const std::string& message) {
    Json j;
    j["error"]["code"] = code;
    j["error"]["message"] = message;
    return {status_for(code), j.dump()};
  }

 private:
  static ApiResponse ok(const Json& j) { return {200, j.dump()}; }

  template <typename F>
  static ApiResponse guard(F&& f) {
    try {
      return f();
    } catch (const Error& e) {
      return error(e.code(), e.what());
    } catch (const nlohmann::json::exception& e) {
      return error("bad_request", e.what());
    } catch (const std::exception& e) {
      return error("internal", e.what());
    }
  }

  static Json parse(const std::string& body) {
    try {
      Json j = Json::parse(body);
      require(j.is_object(), "bad_request", "request body must be a JSON object");
      return j;
    } catch (const nlohmann::json::parse_error& e) {
      throw Error("bad_request", std::string("malformed JSON: ") + e.what());
    }
  }

  static const std::string& string_field(const Json& req, const char* key) {
    require(req.contains(key) && req[key].is_string(), "bad_request",
            std::string("'") + key + "' must be a base64 string");
    return req[key].get_ref<const std::string&>();
  }

  static double number(const Json& obj, const char* key) {
    require(obj[key].is_number(), "bad_request", std::string("'") + key + "' must be a number");
    return obj[key].get<double>();
  }

  static std::size_t count_field(const Json& req, const char* key) {
    require(req[key].is_number_integer() && req[key].get<long long>() >= 1, "bad_request",
            std::string("'") + key + "' must be a positive integer");
    return req[key].get<std::size_t>();
  }

  static LabelImage labels_field(const Json& req, const char* key, const ServiceState& s) {
    return decode_label_png(base64_decode(string_field(req, key)), s.config.categories);
  }

  static RgbImage image_field(const Json& req, const char* key) {
    return decode_rgb_png(base64_decode(string_field(req, key)));
  }

  static ShapeCode<float> code_field(const Json& req, const char* key, std::size_t dim) {
    require(req.contains(key) && req[key].is_array(), "bad_request",
            std::string("'") + key + "' must be an array of numbers");
    ShapeCode<float> z;
    for (const auto& v : req[key]) {
      require(v.is_number(), "bad_request", std::string("'") + key + "' must contain numbers");
      z.values.push_back(v.get<float>());
    }
    require(z.size() == dim, "dimension_mismatch",
            std::string("'") + key + "' must have " + std::to_string(dim) + " entries");
    return z;
  }

  static const ShapeTransformer<float>& transformer(const ServiceState& s) {
    require(s.transformer.has_value(), "not_configured", "no transformer checkpoint loaded");
    return *s.transformer;
  }

  /// Caricature labels inline, or a gallery record's stored map.
  static ShapeCode<float> reference_code(const Json& req, const char* labels_key,
                                         const char* gallery_key, const ServiceState& s) {
    const auto& model = transformer(s);
    if (req.contains(labels_key)) return caricature_code(labels_field(req, labels_key, s), model);
    require(req.contains(gallery_key), "bad_request",
            std::string("provide '") + labels_key + "' or '" + gallery_key + "'");
    require(s.index.has_value(), "not_configured", "no gallery index loaded");
    require(req[gallery_key].is_string(), "bad_request", std::string("'") + gallery_key + "' must be a string");
    const auto id = req[gallery_key].get<std::string>();
    const auto* e = s.index->find(id);
    if (!e) throw Error("unknown_record", "no gallery record '" + id + "'");
    return caricature_code(load_labels(e->path), model);
  }

  static Json counts(const LabelImage& img) {
    std::vector<std::size_t> n(img.classes(), 0);
    for (auto l : img.labels) ++n[l];
    Json j = Json::object();
    for (std::size_t c = 0; c < n.size(); ++c) j[img.palette[c]] = n[c];
    return j;
  }

  static Json transform_reply(const Json& req, const ShapeCode<float>& z, const ServiceState& s) {
    const auto photo = image_field(req, "photo");
    const auto labels = labels_field(req, "photo_labels", s);
    auto r = transform_with_code(photo, labels, z, transformer(s));
    if (req.contains("style_image")) {
      require(s.config.style == StyleMode::statistic_match, "style_disabled",
              "style_image given but style_mode is off");
      r.image = style_stub(r.image, image_field(req, "style_image"));
    }
    const std::size_t H = photo.height, W = photo.width, HW = H * W;
    double disp = 0;
    for (std::size_t i = 0; i < H; ++i)
      for (std::size_t j = 0; j < W; ++j)
        disp += std::hypot(r.field[i * W + j] - double(i), r.field[HW + i * W + j] - double(j));
    Json j;
    j["image"] = base64_encode(encode_rgb_png(r.image));
    j["labels"] = base64_encode(encode_label_png(r.labels));
    j["mean_displacement"] = HW ? disp / double(HW) : 0.0;
    j["counts"] = counts(r.labels);
    return j;
  }

  std::shared_ptr<const ServiceState> state_;
};

/// Registers every endpoint on `server`.
inline void mount(httplib::Server& server, Api& api) {
  auto send = [](httplib::Response& res, const ApiResponse& r) {
    res.status = r.status;
    res.set_content(r.body, "application/json");
  };
  server.Get("/health", [&, send](const httplib::Request&, httplib::Response& res) { send(res, api.health()); });
  server.Post("/retrieve", [&, send](const httplib::Request& q, httplib::Response& res) { send(res, api.retrieve(q.body)); });
  server.Post("/transform", [&, send](const httplib::Request& q, httplib::Response& res) { send(res, api.transform(q.body)); });
  server.Post("/interpolate", [&, send](const httplib::Request& q, httplib::Response& res) { send(res, api.interpolate(q.body)); });
  server.Post("/edit", [&, send](const httplib::Request& q, httplib::Response& res) { send(res, api.edit(q.body)); });
  server.Get(R"(/gallery/([^/]+))", [&, send](const httplib::Request& q, httplib::Response& res) {
    send(res, api.gallery(q.matches[1]));
  });
  server.set_error_handler([send](const httplib::Request&, httplib::Response& res) {
    if (!res.body.empty()) return;
    const auto r = res.status == 404 ? Api::error("not_found", "no such endpoint")
                                     : Api::error("bad_request", "request rejected");
    res.set_content(r.body, "application/json");
  });
}

}  // namespace semawarp
