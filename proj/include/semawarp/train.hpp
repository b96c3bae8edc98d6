// Training loops for the shape transformer and the retrieval model.
#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <numeric>
#include <ostream>
#include <random>
#include <string>
#include <vector>

#include "json.hpp"
#include "semawarp/losses.hpp"
#include "semawarp/nets.hpp"
#include "semawarp/optim.hpp"
#include "semawarp/toy.hpp"

namespace semawarp {

struct TrainSchedule {
  double lr_initial = 1e-4;
  std::size_t batch_size = 32;
  std::size_t epochs_flat = 300;
  std::size_t epochs_decay = 300;
  std::size_t critic_steps_per_gen = 5;
  double critic_clip = 0.01;
  double beta1 = 0.5;
  double beta2 = 0.999;
  std::uint64_t seed = 0;
  /// Stop after this many generator steps even if epochs remain (0 = no cap).
  std::size_t max_steps = 0;

  static TrainSchedule retrieval_defaults() {
    TrainSchedule s;
    s.lr_initial = 1e-3;
    s.epochs_flat = 100;
    s.epochs_decay = 100;
    return s;
  }

  void validate() const {
    require(batch_size >= 1, "invalid_schedule", "batch_size must be >= 1");
    require(lr_initial > 0 && std::isfinite(lr_initial), "invalid_schedule",
            "lr_initial must be positive");
    require(critic_clip > 0, "invalid_schedule", "critic_clip must be positive");
    require(beta1 >= 0 && beta1 < 1 && beta2 >= 0 && beta2 < 1, "invalid_schedule",
            "Adam betas must lie in [0, 1)");
  }

  std::size_t steps_per_epoch(std::size_t n_photos) const {
    return std::max<std::size_t>(1, (n_photos + batch_size - 1) / batch_size);
  }

  std::size_t total_steps(std::size_t n_photos) const {
    const std::size_t full = (epochs_flat + epochs_decay) * steps_per_epoch(n_photos);
    return max_steps ? std::min(full, max_steps) : full;
  }

  /// Learning rate at generator step `step` (epochs are passes over the photo set).
  double lr_at(std::size_t step, std::size_t n_photos) const {
    const double epoch = double(step) / double(steps_per_epoch(n_photos));
    return scheduled_lr(lr_initial, epochs_flat, epochs_decay, epoch);
  }
};

/// Which terms of the shape objective are active; the ablation drops one.
struct ShapeTermMask {
  bool rec = true, adv = true, cyc = true, coo = true;

  static ShapeTermMask from_variant(const std::string& v) {
    ShapeTermMask m;
    if (v == "full") return m;
    if (v == "no_rec") m.rec = false;
    else if (v == "no_adv") m.adv = false;
    else if (v == "no_cyc") m.cyc = false;
    else if (v == "no_coo") m.coo = false;
    else throw Error("unknown_variant", "unknown ablation variant '" + v + "'");
    return m;
  }
};

/// One generator step. Dropped terms are logged as 0 so that `total`
/// always equals lambda_r * rec + adv + cyc + coo.
struct StepMetrics {
  std::size_t step = 0;
  double rec = 0, adv = 0, cyc = 0, coo = 0, total = 0;
  double critic = 0;  // last critic objective of the step
  double lr = 0;

  std::string json_line() const {
    nlohmann::ordered_json j;
    j["step"] = step;
    j["rec"] = rec;
    j["adv"] = adv;
    j["cyc"] = cyc;
    j["coo"] = coo;
    j["total"] = total;
    j["critic"] = critic;
    j["lr"] = lr;
    return j.dump();
  }

  static StepMetrics parse(const std::string& line) {
    const auto j = nlohmann::json::parse(line);
    StepMetrics m;
    m.step = j.at("step");
    m.rec = j.at("rec");
    m.adv = j.at("adv");
    m.cyc = j.at("cyc");
    m.coo = j.at("coo");
    m.total = j.at("total");
    m.critic = j.at("critic");
    m.lr = j.at("lr");
    return m;
  }
};

struct TrainReport {
  std::vector<StepMetrics> log;
  std::string checkpoint;  // serialized model after the last completed step
  std::size_t steps = 0;
  bool aborted = false;
  std::string abort_code, abort_message;
  /// Largest critic parameter magnitude seen right after any clip.
  double max_critic_abs = 0;
};

namespace detail {

template <typename T>
Tensor<T> gather(const std::vector<ParsingMap<T>>& maps, const std::vector<std::size_t>& idx) {
  std::vector<const ParsingMap<T>*> ptrs;
  for (std::size_t i : idx) ptrs.push_back(&maps.at(i));
  return stack_maps(ptrs);
}

inline std::vector<std::size_t> draw(std::size_t n, std::size_t k, std::mt19937_64& rng) {
  std::uniform_int_distribution<std::size_t> pick(0, n - 1);
  std::vector<std::size_t> out(k);
  for (auto& v : out) v = pick(rng);
  return out;
}

template <typename T>
Tensor<T> tile(const Tensor<T>& one, std::size_t N) {
  Shape s{N};
  s.insert(s.end(), one.shape().begin(), one.shape().end());
  Tensor<T> out(s);
  for (std::size_t n = 0; n < N; ++n) std::copy_n(one.data(), one.size(), out.data() + n * one.size());
  return out;
}

template <typename T>
double mean_of(const Tensor<T>& t) {
  double s = 0;
  for (T v : t.storage()) s += double(v);
  return s / double(t.size());
}

template <typename T>
bool params_finite(const nn::ParamSet<T>& ps) {
  for (const auto& [_, v] : ps.items())
    for (T x : v->value.storage())
      if (!std::isfinite(double(x))) return false;
  return true;
}

}  // namespace detail

/// Unpaired shape-transformer training. Photos and caricatures are sampled
/// independently; an epoch is one pass over the photo set.
///
/// Per generator step: forward warp and cycle pass, `critic_steps_per_gen`
/// clipped critic updates on the detached P_fake against fresh caricature
/// batches, then one Adam step on the generator objective.
template <typename T>
TrainReport train_shape_transformer(ShapeTransformer<T>& model,
                                    const std::vector<ParsingMap<T>>& photos,
                                    const std::vector<ParsingMap<T>>& caricatures,
                                    const TrainSchedule& sched, const LossConfig& cfg,
                                    const ShapeTermMask& mask = {}, std::ostream* log = nullptr,
                                    const std::function<void(const StepMetrics&)>& on_step = {}) {
  sched.validate();
  cfg.validate();
  require(!photos.empty() && !caricatures.empty(), "empty_dataset",
          "training needs at least one photo and one caricature map");
  for (const auto& m : photos) model.check_map(m);
  for (const auto& m : caricatures) model.check_map(m);

  const ModelSpec& spec = model.spec();
  const std::size_t B = sched.batch_size, H = spec.height, W = spec.width;
  const std::size_t steps = sched.total_steps(photos.size());
  const std::size_t per_epoch = sched.steps_per_epoch(photos.size());
  const LossConfig* adaptive =
      cfg.component_weight_mode == ComponentWeightMode::reciprocal_ratio ? &cfg : nullptr;
  const T wp = 1, wl = T(cfg.lambda_l), wn = T(cfg.lambda_n);

  std::mt19937_64 rng(sched.seed);
  Adam<T> gen_opt(model.generator_params(), sched.beta1, sched.beta2);
  Adam<T> critic_opt(model.critic_params(), sched.beta1, sched.beta2);
  const Tensor<T> coords = detail::tile(fresh_coordinates<T>(H, W).data, B);

  TrainReport report;
  report.checkpoint = model.serialize(0, sched.seed);
  std::vector<std::size_t> order(photos.size());
  std::iota(order.begin(), order.end(), 0);

  for (std::size_t step = 0; step < steps; ++step) {
    const std::size_t pos = step % per_epoch;
    if (pos == 0) std::shuffle(order.begin(), order.end(), rng);
    std::vector<std::size_t> pidx;
    for (std::size_t k = 0; k < B; ++k) pidx.push_back(order[(pos * B + k) % order.size()]);
    const auto cidx = detail::draw(caricatures.size(), B, rng);
    const Tensor<T> P_pho = detail::gather(photos, pidx);
    const Tensor<T> P_cari = detail::gather(caricatures, cidx);
    const double lr = sched.lr_at(step, photos.size());

    StepMetrics m;
    m.step = step;
    m.lr = lr;

    // Generator graph.
    auto x_pho = ag::constant(P_pho), x_cari = ag::constant(P_cari);
    auto z_pho = model.encode_photo(x_pho);
    auto z_cari = model.encode_caricature(x_cari);
    auto D = model.forward_field(z_pho, z_cari);
    auto P_fake = ag::warp(x_pho, D);

    // Critic updates on the detached fake batch.
    if (mask.adv) {
      auto fake_const = ag::constant(P_fake->value);
      for (std::size_t c = 0; c < sched.critic_steps_per_gen; ++c) {
        const auto ridx = detail::draw(caricatures.size(), B, rng);
        auto real = ag::constant(detail::gather(caricatures, ridx));
        model.critic_params().zero_grad();
        auto obj = ag::add(ag::mean_all(model.score(fake_const)),
                           ag::scale(ag::mean_all(model.score(real)), T(-1)));
        m.critic = double(obj->value[0]);
        if (!std::isfinite(m.critic)) {
          report.aborted = true;
          report.abort_code = "non_finite_loss";
          report.abort_message = "critic objective is not finite at step " + std::to_string(step);
          break;
        }
        ag::backward(obj);
        critic_opt.step(lr);
        model.clip_critic(T(sched.critic_clip));
        for (const auto& [_, v] : model.critic_params().items())
          for (T x : v->value.storage())
            report.max_critic_abs = std::max(report.max_critic_abs, std::abs(double(x)));
      }
      if (report.aborted) break;
    }

    std::vector<ag::Var<T>> parts;
    if (mask.rec) {
      auto rec = ag::rec_loss(P_cari, P_fake, wp, wl, wn, adaptive);
      m.rec = double(rec->value[0]);
      parts.push_back(ag::scale(rec, T(cfg.lambda_r)));
    }
    if (mask.adv) {
      auto adv = ag::scale(ag::mean_all(model.score(P_fake)), T(-1));
      m.adv = double(adv->value[0]);
      parts.push_back(adv);
    }
    if (mask.cyc || mask.coo) {
      auto z_fake = model.encode_caricature(P_fake);
      auto D_cyc = model.cycle_field(z_fake, z_pho);
      if (mask.cyc) {
        auto cyc = ag::rec_loss(P_pho, ag::warp(P_fake, D_cyc), wp, wl, wn, adaptive);
        m.cyc = double(cyc->value[0]);
        parts.push_back(cyc);
      }
      if (mask.coo) {
        auto M = ag::warp(ag::warp(ag::constant(coords), D), D_cyc);
        auto coo = ag::coordinate_loss(coords, M);
        m.coo = double(coo->value[0]);
        parts.push_back(coo);
      }
    }

    try {
      m.total = shape_objective({m.rec, m.adv, m.cyc, m.coo}, cfg);
    } catch (const Error& e) {
      report.aborted = true;
      report.abort_code = e.code();
      report.abort_message = std::string(e.what()) + " at step " + std::to_string(step);
      break;
    }

    if (!parts.empty()) {
      auto objective = parts[0];
      for (std::size_t i = 1; i < parts.size(); ++i) objective = ag::add(objective, parts[i]);
      model.generator_params().zero_grad();
      ag::backward(objective);
      gen_opt.step(lr);
    }
    if (!detail::params_finite(model.generator_params())) {
      report.aborted = true;
      report.abort_code = "non_finite_loss";
      report.abort_message = "generator parameters diverged at step " + std::to_string(step);
      break;
    }

    report.log.push_back(m);
    report.steps = step + 1;
    if (log) *log << m.json_line() << '\n';
    if (on_step) on_step(m);
    if ((step + 1) % 100 == 0 || step + 1 == steps)
      report.checkpoint = model.serialize(step + 1, sched.seed);
  }
  if (report.aborted) model = ShapeTransformer<T>::deserialize(report.checkpoint);
  return report;
}

/// A photo/caricature pair with its identity label.
template <typename T>
struct IdentityPair {
  const ParsingMap<T>* photo;
  const ParsingMap<T>* caricature;
  std::size_t identity;
};

struct RetrievalMetrics {
  std::size_t step = 0;
  double contrastive = 0, rec = 0, total = 0, lr = 0;

  std::string json_line() const {
    nlohmann::ordered_json j;
    j["step"] = step;
    j["contrastive"] = contrastive;
    j["rec"] = rec;
    j["total"] = total;
    j["lr"] = lr;
    return j.dump();
  }
};

struct RetrievalReport {
  std::vector<RetrievalMetrics> log;
  std::string checkpoint;
  std::size_t steps = 0;
};

/// Contrastive + reconstruction training. Each batch is half positive
/// (same identity) and half negative (different identities) pairs; the
/// reconstruction term is rec_pixel of the shared decoder on both inputs.
template <typename T>
RetrievalReport train_retrieval(RetrievalModel<T>& model, const std::vector<IdentityPair<T>>& data,
                                const TrainSchedule& sched, const LossConfig& cfg,
                                double rec_weight = 1.0, std::ostream* log = nullptr,
                                const std::function<void(const RetrievalMetrics&)>& on_step = {}) {
  sched.validate();
  cfg.validate();
  std::map<std::size_t, std::vector<std::size_t>> by_id;
  for (std::size_t i = 0; i < data.size(); ++i) by_id[data[i].identity].push_back(i);
  require(by_id.size() >= 2, "too_few_identities",
          "retrieval training needs at least two identities for negative pairs");
  std::vector<std::size_t> ids;
  for (const auto& [id, _] : by_id) ids.push_back(id);

  const std::size_t B = sched.batch_size;
  const std::size_t steps = sched.total_steps(data.size());
  std::mt19937_64 rng(sched.seed);
  std::uniform_int_distribution<std::size_t> pick_id(0, ids.size() - 1);
  auto pick_in = [&](std::size_t id) {
    const auto& v = by_id.at(id);
    return v[std::uniform_int_distribution<std::size_t>(0, v.size() - 1)(rng)];
  };
  Adam<T> opt(model.params(), sched.beta1, sched.beta2);
  RetrievalReport report;

  for (std::size_t step = 0; step < steps; ++step) {
    std::vector<const ParsingMap<T>*> pho, cari;
    std::vector<bool> positive;
    for (std::size_t k = 0; k < B; ++k) {
      const std::size_t a = ids[pick_id(rng)];
      std::size_t b = a;
      const bool pos = k % 2 == 0;
      if (!pos)
        while (b == a) b = ids[pick_id(rng)];
      pho.push_back(data[pick_in(a)].photo);
      cari.push_back(data[pick_in(b)].caricature);
      positive.push_back(pos);
    }
    const Tensor<T> xp = stack_maps(pho), xc = stack_maps(cari);
    auto zp = model.encode_photo(ag::constant(xp));
    auto zc = model.encode_caricature(ag::constant(xc));
    auto con = ag::contrastive_loss(zp, zc, positive, cfg);
    auto rec = ag::add(ag::rec_loss(xp, model.reconstruct(zp), T(1), T(0), T(0), nullptr),
                       ag::rec_loss(xc, model.reconstruct(zc), T(1), T(0), T(0), nullptr));
    auto total = ag::add(con, ag::scale(rec, T(rec_weight)));
    RetrievalMetrics m;
    m.step = step;
    m.lr = sched.lr_at(step, data.size());
    m.contrastive = double(con->value[0]);
    m.rec = double(rec->value[0]);
    m.total = double(total->value[0]);
    require(std::isfinite(m.total), "non_finite_loss",
            "retrieval loss is not finite at step " + std::to_string(step));
    model.params().zero_grad();
    ag::backward(total);
    opt.step(m.lr);
    report.log.push_back(m);
    if (log) *log << m.json_line() << '\n';
    report.steps = step + 1;
    if (on_step) on_step(m);
  }
  report.checkpoint = model.serialize(report.steps, sched.seed);
  return report;
}

}  // namespace semawarp
