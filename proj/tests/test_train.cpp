#include <gtest/gtest.h>

#include <set>
#include <sstream>

#include "semawarp/train.hpp"
#include "semawarp/toy.hpp"

using namespace semawarp;

namespace {

ModelSpec small_spec() {
  ModelSpec s;
  s.height = s.width = 16;
  s.n_blocks = 2;
  s.widths = {8, 8};
  s.growth = 4;
  s.code_dim = 16;
  return s;
}

struct SmallData {
  std::vector<ParsingMap<float>> photos, caris;
  std::vector<std::size_t> ids;
};

SmallData small_data(std::size_t identities, std::uint64_t seed = 1) {
  ToySpec ts;
  ts.height = ts.width = 16;
  ts.identities = identities;
  SmallData d;
  for (const auto& s : generate_toy_dataset(ts, seed)) {
    d.photos.push_back(encode_one_hot<float>(s.photo));
    d.caris.push_back(encode_one_hot<float>(s.caricature));
    d.ids.push_back(s.identity);
  }
  return d;
}

TrainSchedule short_schedule(std::size_t steps) {
  TrainSchedule s;
  s.batch_size = 4;
  s.lr_initial = 1e-3;
  s.max_steps = steps;
  s.seed = 3;
  return s;
}

}  // namespace

// ---------------------------------------------------------------------------
// Toy data

TEST(Toy, SameSeedSameDataset) {
  ToySpec ts;
  ts.identities = 10;
  const auto a = generate_toy_dataset(ts, 42), b = generate_toy_dataset(ts, 42);
  ASSERT_EQ(a.size(), b.size());
  for (std::size_t i = 0; i < a.size(); ++i) {
    EXPECT_EQ(a[i].photo.labels, b[i].photo.labels);
    EXPECT_EQ(a[i].caricature.labels, b[i].caricature.labels);
    EXPECT_EQ(a[i].identity, b[i].identity);
  }
  const auto c = generate_toy_dataset(ts, 43);
  EXPECT_NE(a[0].photo.labels, c[0].photo.labels);
}

TEST(Toy, MapsAreValidHardMaps) {
  ToySpec ts;
  ts.identities = 30;
  ts.samples_per_identity = 2;
  const auto d = generate_toy_dataset(ts, 7);
  EXPECT_EQ(d.size(), 60u);
  std::set<std::size_t> ids;
  for (const auto& s : d) {
    ids.insert(s.identity);
    for (const auto* l : {&s.photo, &s.caricature}) {
      EXPECT_NO_THROW(l->validate());
      EXPECT_EQ(l->height, 64u);
      const auto m = encode_one_hot<double>(*l);
      EXPECT_EQ(m.tag(), Hardness::hard);
      EXPECT_TRUE(m.satisfies_invariants());
    }
  }
  EXPECT_EQ(ids.size(), 30u);
}

TEST(Toy, CaricatureChangesSomeComponentCount) {
  ToySpec ts;
  ts.identities = 50;
  for (const auto& s : generate_toy_dataset(ts, 9)) {
    const auto p = encode_one_hot<double>(s.photo), c = encode_one_hot<double>(s.caricature);
    bool differs = false;
    for (std::size_t ch = 1; ch < p.channels(); ++ch)
      differs |= component_pixel_count(p, ch) != component_pixel_count(c, ch);
    EXPECT_TRUE(differs) << "identity " << s.identity;
  }
}

TEST(Toy, EveryComponentSurvivesAtDefaultSize) {
  ToySpec ts;
  for (const auto& s : generate_toy_dataset(ts, 1))
    for (const auto* l : {&s.photo, &s.caricature}) {
      std::vector<std::size_t> n(11, 0);
      for (auto v : l->labels) ++n[v];
      for (std::size_t c = 0; c < 11; ++c) ASSERT_GT(n[c], 0u) << "component " << c;
    }
}

TEST(Toy, InfeasibleGeometryRejected) {
  ToySpec ts;
  ts.geometry[kFaceHalfH] = {0.45, 0.49};
  EXPECT_THROW(ts.validate(), Error);
  ToySpec empty;
  empty.geometry[kEyeRise] = {0.1, 0.05};
  EXPECT_THROW(generate_toy_dataset(empty, 1), Error);
}

// ---------------------------------------------------------------------------
// Schedules

TEST(Schedule, PublishedDefaults) {
  TrainSchedule s;
  EXPECT_DOUBLE_EQ(s.lr_initial, 1e-4);
  EXPECT_EQ(s.batch_size, 32u);
  EXPECT_EQ(s.epochs_flat, 300u);
  EXPECT_EQ(s.epochs_decay, 300u);
  EXPECT_EQ(s.critic_steps_per_gen, 5u);
  EXPECT_DOUBLE_EQ(s.critic_clip, 0.01);
  const auto r = TrainSchedule::retrieval_defaults();
  EXPECT_DOUBLE_EQ(r.lr_initial, 1e-3);
  EXPECT_EQ(r.batch_size, 32u);
  EXPECT_EQ(r.epochs_flat, 100u);
  EXPECT_EQ(r.epochs_decay, 100u);
  EXPECT_DOUBLE_EQ(LossConfig{}.margin_m, 2.0);
}

TEST(Schedule, FlatThenExactlyLinearToZero) {
  TrainSchedule s;
  s.epochs_flat = 3;
  s.epochs_decay = 4;
  s.batch_size = 10;
  const std::size_t n = 25;  // 3 steps per epoch
  ASSERT_EQ(s.steps_per_epoch(n), 3u);
  EXPECT_EQ(s.total_steps(n), 21u);
  for (std::size_t e = 0; e < 3; ++e) EXPECT_DOUBLE_EQ(s.lr_at(3 * e, n), 1e-4);
  for (std::size_t e = 3; e <= 7; ++e)
    EXPECT_NEAR(s.lr_at(3 * e, n), 1e-4 * (1.0 - double(e - 3) / 4.0), 1e-18) << "epoch " << e;
  EXPECT_EQ(s.lr_at(21, n), 0.0);
  s.max_steps = 5;
  EXPECT_EQ(s.total_steps(n), 5u);
}

TEST(Schedule, InvalidValuesRejected) {
  TrainSchedule s;
  s.batch_size = 0;
  EXPECT_THROW(s.validate(), Error);
  s = TrainSchedule{};
  s.lr_initial = 0;
  EXPECT_THROW(s.validate(), Error);
}

TEST(Variants, MaskParsing) {
  EXPECT_FALSE(ShapeTermMask::from_variant("no_rec").rec);
  EXPECT_FALSE(ShapeTermMask::from_variant("no_adv").adv);
  EXPECT_FALSE(ShapeTermMask::from_variant("no_cyc").cyc);
  EXPECT_FALSE(ShapeTermMask::from_variant("no_coo").coo);
  const auto f = ShapeTermMask::from_variant("full");
  EXPECT_TRUE(f.rec && f.adv && f.cyc && f.coo);
  EXPECT_THROW(ShapeTermMask::from_variant("bogus"), Error);
}

// ---------------------------------------------------------------------------
// Shape training

TEST(ShapeTraining, StepZeroLossesEqualPhotoVersusCaricature) {
  auto d = small_data(6);
  ShapeTransformer<float> model(small_spec(), 2);
  auto sched = short_schedule(1);
  sched.batch_size = 1;
  d.photos.resize(1);
  d.caris.resize(1);
  LossConfig cfg;
  const auto rep = train_shape_transformer(model, d.photos, d.caris, sched, cfg);
  ASSERT_EQ(rep.log.size(), 1u);
  const auto expect = rec_total(ParsingMap<double>(d.caris[0].data().cast<double>(), d.caris[0].categories(),
                                                   Hardness::hard),
                                ParsingMap<double>(d.photos[0].data().cast<double>(), d.photos[0].categories(),
                                                   Hardness::hard),
                                cfg);
  EXPECT_NEAR(rep.log[0].rec, expect, 1e-4 * expect);
}

TEST(ShapeTraining, LogReconstructsObjectiveAndCriticStaysClipped) {
  auto d = small_data(8);
  ShapeTransformer<float> model(small_spec(), 2);
  auto sched = short_schedule(6);
  LossConfig cfg;
  std::ostringstream log;
  const auto rep = train_shape_transformer(model, d.photos, d.caris, sched, cfg, {}, &log);
  ASSERT_FALSE(rep.aborted) << rep.abort_message;
  EXPECT_EQ(rep.steps, 6u);
  EXPECT_LE(rep.max_critic_abs, sched.critic_clip);
  EXPECT_GT(rep.max_critic_abs, 0.0);
  std::istringstream is(log.str());
  std::string line;
  std::size_t n = 0;
  while (std::getline(is, line)) {
    const auto m = StepMetrics::parse(line);
    EXPECT_EQ(m.step, n);
    EXPECT_NEAR(m.total, cfg.lambda_r * m.rec + m.adv + m.cyc + m.coo, 1e-6);
    EXPECT_DOUBLE_EQ(m.lr, 1e-3);
    ++n;
  }
  EXPECT_EQ(n, 6u);
  for (const auto& [_, v] : model.critic_params().items())
    for (float x : v->value.storage()) ASSERT_LE(std::abs(x), 0.01f);
}

TEST(ShapeTraining, SameSeedSameLog) {
  auto d = small_data(8);
  auto run = [&] {
    ShapeTransformer<float> model(small_spec(), 2);
    std::ostringstream log;
    train_shape_transformer(model, d.photos, d.caris, short_schedule(4), LossConfig{}, {}, &log);
    return std::make_pair(log.str(), model.serialize(4, 3));
  };
  const auto a = run(), b = run();
  EXPECT_EQ(a.first, b.first);
  EXPECT_EQ(a.second, b.second);
}

TEST(ShapeTraining, DroppedTermsLogZero) {
  auto d = small_data(8);
  ShapeTransformer<float> model(small_spec(), 2);
  const auto rep = train_shape_transformer(model, d.photos, d.caris, short_schedule(2), LossConfig{},
                                           ShapeTermMask::from_variant("no_adv"));
  for (const auto& m : rep.log) {
    EXPECT_EQ(m.adv, 0.0);
    EXPECT_EQ(m.critic, 0.0);
  }
  EXPECT_EQ(rep.max_critic_abs, 0.0);
}

TEST(ShapeTraining, NonFiniteLossAbortsAndRestoresCheckpoint) {
  auto d = small_data(8);
  ShapeTransformer<float> model(small_spec(), 2);
  const std::string initial = model.serialize(0, 3);
  auto& gen = model.generator_params();
  const auto rep = train_shape_transformer(
      model, d.photos, d.caris, short_schedule(10), LossConfig{}, {}, nullptr,
      [&](const StepMetrics& m) {
        if (m.step == 2)
          for (auto& [_, v] : gen.items()) v->value[0] = std::numeric_limits<float>::quiet_NaN();
      });
  EXPECT_TRUE(rep.aborted);
  EXPECT_EQ(rep.abort_code, "non_finite_loss");
  EXPECT_EQ(rep.steps, 3u);
  EXPECT_EQ(rep.checkpoint, initial);  // last checkpoint was the step-0 one
  EXPECT_EQ(model.serialize(0, 3), initial);
}

TEST(ShapeTraining, RejectsEmptyOrMismatchedData) {
  ShapeTransformer<float> model(small_spec(), 2);
  std::vector<ParsingMap<float>> none;
  auto d = small_data(2);
  EXPECT_THROW(train_shape_transformer(model, none, d.caris, short_schedule(1), LossConfig{}), Error);
  ToySpec big;
  big.identities = 1;
  std::vector<ParsingMap<float>> wrong{encode_one_hot<float>(generate_toy_dataset(big, 1)[0].photo)};
  EXPECT_THROW(train_shape_transformer(model, wrong, d.caris, short_schedule(1), LossConfig{}), Error);
}

// ---------------------------------------------------------------------------
// Retrieval training

TEST(RetrievalTraining, RejectsSingleIdentity) {
  auto d = small_data(1);
  RetrievalModel<float> model(small_spec(), 1);
  std::vector<IdentityPair<float>> data{{&d.photos[0], &d.caris[0], 0}};
  EXPECT_THROW(train_retrieval(model, data, short_schedule(1), LossConfig{}), Error);
}

TEST(RetrievalTraining, ReducesLossOnSmallSet) {
  auto d = small_data(8);
  RetrievalModel<float> model(small_spec(), 1);
  std::vector<IdentityPair<float>> data;
  for (std::size_t i = 0; i < d.photos.size(); ++i) data.push_back({&d.photos[i], &d.caris[i], d.ids[i]});
  auto sched = short_schedule(60);
  sched.batch_size = 8;
  std::ostringstream log;
  const auto rep = train_retrieval(model, data, sched, LossConfig{}, 1.0, &log);
  ASSERT_EQ(rep.log.size(), 60u);
  auto avg = [&](std::size_t from, std::size_t to) {
    double s = 0;
    for (std::size_t i = from; i < to; ++i) s += rep.log[i].total;
    return s / double(to - from);
  };
  EXPECT_LT(avg(50, 60), avg(0, 10));
  EXPECT_NE(log.str().find("\"contrastive\""), std::string::npos);
  const auto back = RetrievalModel<float>::deserialize(rep.checkpoint);
  EXPECT_EQ(back.fingerprint(), model.fingerprint());
}
