// semawarp command-line front end. `transform`, `retrieve`, `interpolate`
// and `edit` go through the same handlers as the HTTP service, so their
// stdout is the response body the server would send.
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <set>

#include "CLI11.hpp"
#include "semawarp/service.hpp"

using namespace semawarp;
namespace fs = std::filesystem;

namespace {

std::string slurp_request(const std::string& path) {
  if (path == "-") {
    std::ostringstream os;
    os << std::cin.rdbuf();
    return os.str();
  }
  return read_file(path);
}

std::string b64_file(const std::string& path) { return base64_encode(read_file(path)); }
std::string b64_labels(const std::string& path) { return base64_encode(encode_label_png(load_labels(path))); }

int emit(const ApiResponse& r) {
  std::cout << r.body << "\n";
  return r.status == 200 ? 0 : 1;
}

/// Pulls the model grid size from the data so toy and full-size sets both work.
ModelSpec spec_for(const PipelineConfig& cfg, const std::vector<LabeledPair>& pairs) {
  require(!pairs.empty(), "empty_dataset", "dataset has no pairs");
  ModelSpec s = cfg.model;
  s.height = pairs.front().photo.height;
  s.width = pairs.front().photo.width;
  s.validate();
  return s;
}

std::vector<LabeledPair> first_identities(const std::vector<LabeledPair>& pairs, std::size_t n) {
  if (n == 0) return pairs;
  std::set<std::string> keep;
  std::vector<LabeledPair> out;
  for (const auto& p : pairs) {
    if (!keep.count(p.identity)) {
      if (keep.size() == n) continue;
      keep.insert(p.identity);
    }
    out.push_back(p);
  }
  return out;
}

void write_out(const std::string& path, const std::string& bytes) {
  if (path.empty()) return;
  write_file(path, bytes);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"semantic shape warping for caricature generation"};
  app.require_subcommand(1);
  std::string config_file;
  app.add_option("--config", config_file, "configuration file (SEMAWARP_CONFIG overrides)");

  // toy-gen
  auto* toy = app.add_subcommand("toy-gen", "write a synthetic photo/caricature dataset");
  std::string toy_out;
  std::uint64_t toy_seed = 1;
  ToySpec toy_spec;
  toy->add_option("--out", toy_out, "output directory")->required();
  toy->add_option("--seed", toy_seed, "generator seed");
  toy->add_option("--identities", toy_spec.identities, "number of identities");
  toy->add_option("--samples", toy_spec.samples_per_identity, "pairs per identity");
  toy->add_option("--height", toy_spec.height);
  toy->add_option("--width", toy_spec.width);

  // ingest
  auto* ing = app.add_subcommand("ingest", "align an image and its labels to the canonical landmarks");
  std::string ing_image, ing_labels, ing_landmarks, ing_out_image, ing_out_labels;
  ing->add_option("--image", ing_image, "RGB PNG")->required();
  ing->add_option("--labels", ing_labels, "label PNG with sidecar")->required();
  ing->add_option("--landmarks", ing_landmarks, "17 'row col' lines")->required();
  ing->add_option("--out-image", ing_out_image)->required();
  ing->add_option("--out-labels", ing_out_labels)->required();

  // train-shape
  auto* ts = app.add_subcommand("train-shape", "train the shape transformer");
  std::string ts_data, ts_out, ts_log, ts_variant = "full";
  std::size_t ts_ids = 0;
  ts->add_option("--data", ts_data, "dataset directory")->required();
  ts->add_option("--out", ts_out, "checkpoint path")->required();
  ts->add_option("--log", ts_log, "JSON-lines metrics log");
  ts->add_option("--variant", ts_variant, "full|no_rec|no_adv|no_cyc|no_coo");
  ts->add_option("--train-identities", ts_ids, "use only the first N identities (0 = all)");

  // train-retrieval
  auto* tr = app.add_subcommand("train-retrieval", "train the retrieval encoders");
  std::string tr_data, tr_out, tr_log;
  std::size_t tr_ids = 0;
  tr->add_option("--data", tr_data, "dataset directory")->required();
  tr->add_option("--out", tr_out, "checkpoint path")->required();
  tr->add_option("--log", tr_log, "JSON-lines metrics log");
  tr->add_option("--train-identities", tr_ids, "use only the first N identities (0 = all)");

  // build-index
  auto* bi = app.add_subcommand("build-index", "encode a caricature gallery");
  std::string bi_data, bi_ckpt, bi_out;
  bi->add_option("--data", bi_data, "dataset directory whose caricatures form the gallery")->required();
  bi->add_option("--checkpoint", bi_ckpt, "retrieval checkpoint (default: from config)");
  bi->add_option("--out", bi_out, "index path")->required();

  // transform
  auto* tf = app.add_subcommand("transform", "warp a photo toward a caricature shape");
  std::string tf_req, tf_photo, tf_pl, tf_cl, tf_gid, tf_style, tf_out_image, tf_out_labels;
  tf->add_option("--request", tf_req, "JSON request file ('-' for stdin)");
  tf->add_option("--photo", tf_photo, "RGB PNG");
  tf->add_option("--photo-labels", tf_pl);
  tf->add_option("--cari-labels", tf_cl);
  tf->add_option("--gallery-id", tf_gid);
  tf->add_option("--style-image", tf_style);
  tf->add_option("--out-image", tf_out_image, "also write the warped image");
  tf->add_option("--out-labels", tf_out_labels, "also write the warped labels");

  // retrieve
  auto* rt = app.add_subcommand("retrieve", "top-k caricatures for a photo parsing map");
  std::string rt_req, rt_pl;
  std::size_t rt_k = 0;
  rt->add_option("--request", rt_req, "JSON request file ('-' for stdin)");
  rt->add_option("--photo-labels", rt_pl);
  rt->add_option("-k", rt_k, "number of results (default: top_k)");

  // interpolate / edit take raw requests
  auto* ip = app.add_subcommand("interpolate", "transform toward an interpolated shape code");
  std::string ip_req;
  ip->add_option("--request", ip_req, "JSON request file ('-' for stdin)")->required();
  auto* ed = app.add_subcommand("edit", "deform a label map with control points");
  std::string ed_req;
  ed->add_option("--request", ed_req, "JSON request file ('-' for stdin)")->required();

  // ablate
  auto* ab = app.add_subcommand("ablate", "loss ablation table on held-out pairs");
  std::string ab_data, ab_out;
  std::size_t ab_train = 0;
  std::uint64_t ab_split_seed = 5;
  std::vector<std::string> ab_variants = {"full", "no_rec", "no_adv", "no_cyc", "no_coo"};
  ab->add_option("--data", ab_data, "dataset directory")->required();
  ab->add_option("--train-identities", ab_train, "identities used for training; the rest are held out")
      ->required();
  ab->add_option("--split-seed", ab_split_seed, "seed for held-out photo/caricature pairing");
  ab->add_option("--variants", ab_variants);
  ab->add_option("--out", ab_out, "write the table here as well as stdout");

  // serve
  auto* sv = app.add_subcommand("serve", "HTTP service");
  std::string sv_host = "127.0.0.1";
  int sv_port = 8080;
  sv->add_option("--host", sv_host);
  sv->add_option("--port", sv_port);

  CLI11_PARSE(app, argc, argv);

  try {
    const PipelineConfig cfg = load_config(config_file);

    if (*toy) {
      toy_spec.validate();
      const auto pairs = toy_pairs(generate_toy_dataset(toy_spec, toy_seed));
      write_dataset(toy_out, pairs);
      std::cout << pairs.size() << " pairs written to " << toy_out << "\n";
      return 0;
    }

    if (*ing) {
      AlignmentSpec spec;
      spec.landmarks = parse_landmarks(read_file(ing_landmarks));
      const auto base = cfg.canonical_landmarks.empty() ? default_canonical_landmarks()
                                                        : parse_landmarks(read_file(cfg.canonical_landmarks));
      spec.canonical = canonical_for(cfg.image_height, cfg.image_width, base);
      const auto r = ingest(decode_rgb_png(read_file(ing_image)), load_labels(ing_labels), spec,
                            cfg.image_height, cfg.image_width);
      write_file(ing_out_image, encode_rgb_png(r.image));
      save_labels(ing_out_labels, r.labels);
      return 0;
    }

    if (*ts) {
      const auto pairs = first_identities(load_dataset(ts_data), ts_ids);
      const auto spec = spec_for(cfg, pairs);
      std::vector<ParsingMap<float>> photos, caris;
      for (const auto& p : pairs) {
        photos.push_back(encode_one_hot<float>(p.photo, spec.channels));
        caris.push_back(encode_one_hot<float>(p.caricature, spec.channels));
      }
      ShapeTransformer<float> model(spec, cfg.shape_schedule.seed);
      std::ofstream log;
      if (!ts_log.empty()) log.open(ts_log);
      const auto rep = train_shape_transformer(model, photos, caris, cfg.shape_schedule, cfg.loss,
                                               ShapeTermMask::from_variant(ts_variant),
                                               ts_log.empty() ? nullptr : &log);
      write_file(ts_out, rep.checkpoint);
      if (rep.aborted) {
        std::cerr << "error " << rep.abort_code << ": " << rep.abort_message
                  << " (last good checkpoint written)\n";
        return 1;
      }
      std::cout << rep.steps << " steps, final " << rep.log.back().json_line() << "\n";
      return 0;
    }

    if (*tr) {
      const auto pairs = first_identities(load_dataset(tr_data), tr_ids);
      const auto spec = spec_for(cfg, pairs);
      std::vector<ParsingMap<float>> photos, caris;
      for (const auto& p : pairs) {
        photos.push_back(encode_one_hot<float>(p.photo, spec.channels));
        caris.push_back(encode_one_hot<float>(p.caricature, spec.channels));
      }
      std::map<std::string, std::size_t> ids;
      std::vector<IdentityPair<float>> data;
      for (std::size_t i = 0; i < pairs.size(); ++i) {
        const auto id = ids.emplace(pairs[i].identity, ids.size()).first->second;
        data.push_back({&photos[i], &caris[i], id});
      }
      RetrievalModel<float> model(spec, cfg.retrieval_schedule.seed);
      std::ofstream log;
      if (!tr_log.empty()) log.open(tr_log);
      const auto rep = train_retrieval(model, data, cfg.retrieval_schedule, cfg.loss,
                                       cfg.retrieval_rec_weight, tr_log.empty() ? nullptr : &log);
      write_file(tr_out, rep.checkpoint);
      std::cout << rep.steps << " steps, final " << rep.log.back().json_line() << "\n";
      return 0;
    }

    if (*bi) {
      const std::string ckpt = bi_ckpt.empty() ? cfg.retrieval_checkpoint : bi_ckpt;
      require(!ckpt.empty(), "not_configured", "no retrieval checkpoint given");
      const auto model = RetrievalModel<float>::deserialize(read_file(ckpt));
      std::vector<GalleryRecord> records;
      std::map<std::string, std::size_t> seen;
      for (const auto& row : read_manifest(bi_data)) {
        const std::size_t n = seen[row.identity]++;
        const std::string id = n == 0 ? row.identity : row.identity + "_" + std::to_string(n);
        records.push_back({id, load_labels(row.caricature), fs::absolute(row.caricature).string()});
      }
      const auto index = build_index(records, model);
      write_file(bi_out, serialize_index(index));
      std::cout << index.size() << " entries indexed\n";
      return 0;
    }

    Api api(ServiceState::load(cfg));

    if (*tf) {
      std::string body;
      if (!tf_req.empty()) {
        body = slurp_request(tf_req);
      } else {
        require(!tf_photo.empty() && !tf_pl.empty() && (!tf_cl.empty() || !tf_gid.empty()), "bad_request",
                "need --photo, --photo-labels and --cari-labels or --gallery-id");
        Json req;
        req["photo"] = b64_file(tf_photo);
        req["photo_labels"] = b64_labels(tf_pl);
        if (!tf_cl.empty()) req["cari_labels"] = b64_labels(tf_cl);
        else req["gallery_id"] = tf_gid;
        if (!tf_style.empty()) req["style_image"] = b64_file(tf_style);
        body = req.dump();
      }
      const auto r = api.transform(body);
      if (r.status == 200) {
        const auto j = Json::parse(r.body);
        if (!tf_out_image.empty()) write_out(tf_out_image, base64_decode(j["image"].get<std::string>()));
        if (!tf_out_labels.empty()) {
          const auto labels = decode_label_png(base64_decode(j["labels"].get<std::string>()),
                                               api.state()->config.categories);
          save_labels(tf_out_labels, labels);
        }
      }
      return emit(r);
    }

    if (*rt) {
      std::string body;
      if (!rt_req.empty()) {
        body = slurp_request(rt_req);
      } else {
        require(!rt_pl.empty(), "bad_request", "need --photo-labels or --request");
        Json req;
        req["photo_labels"] = b64_labels(rt_pl);
        if (rt_k) req["k"] = rt_k;
        body = req.dump();
      }
      return emit(api.retrieve(body));
    }

    if (*ip) return emit(api.interpolate(slurp_request(ip_req)));
    if (*ed) return emit(api.edit(slurp_request(ed_req)));

    if (*ab) {
      const auto data = split_pairs(load_dataset(ab_data), ab_train, ab_split_seed);
      ModelSpec spec = cfg.model;
      spec.height = data.train_photos.front().height;
      spec.width = data.train_photos.front().width;
      spec.validate();
      const auto rows = ablation_run<float>(data, spec, cfg.shape_schedule, cfg.loss, ab_variants,
                                            [](const AblationRow& r) {
                                              std::cerr << r.variant << " done" << std::endl;
                                            });
      const auto table = ablation_table(rows);
      std::cout << table;
      write_out(ab_out, table);
      return 0;
    }

    if (*sv) {
      httplib::Server server;
      mount(server, api);
      std::cerr << "listening on " << sv_host << ":" << sv_port << std::endl;
      if (!server.listen(sv_host, sv_port)) {
        std::cerr << "error bind_failed: cannot listen on " << sv_host << ":" << sv_port << "\n";
        return 1;
      }
      return 0;
    }
  } catch (const Error& e) {
    std::cerr << "error " << e.code() << ": " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error internal: " << e.what() << "\n";
    return 2;
  }
  return 0;
}
