#include <gtest/gtest.h>

#include <random>

#include "semawarp/nets.hpp"
#include "semawarp/toy.hpp"
#include "test_util.hpp"

using namespace semawarp;

namespace {

ModelSpec small_spec(std::size_t code_dim = 16) {
  ModelSpec s;
  s.height = s.width = 16;
  s.n_blocks = 2;
  s.widths = {8, 8};
  s.growth = 4;
  s.code_dim = code_dim;
  return s;
}

ParsingMap<double> toy_map(const ModelSpec& s, std::uint64_t seed, bool cari = false) {
  ToySpec ts;
  ts.height = s.height;
  ts.width = s.width;
  ts.identities = 1;
  const auto d = generate_toy_dataset(ts, seed);
  return encode_one_hot<double>(cari ? d[0].caricature : d[0].photo, s.channels);
}

void randomize(nn::ParamSet<double>& ps, std::mt19937_64& rng, double sd) {
  std::normal_distribution<double> n(0, sd);
  for (auto& [_, v] : ps.items())
    for (auto& x : v->value.storage()) x = n(rng);
}

double max_abs_diff(const Tensor<double>& a, const Tensor<double>& b) {
  double m = 0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

}  // namespace

TEST(Encoder, DefaultCodeLengthIs128) {
  ModelSpec spec;
  ShapeTransformer<float> model(spec, 1);
  ToySpec ts;
  ts.identities = 1;
  const auto map = encode_one_hot<float>(generate_toy_dataset(ts, 2)[0].photo);
  EXPECT_EQ(model.encode(Domain::photo, map).size(), 128u);
  EXPECT_EQ(model.encode(Domain::caricature, map).size(), 128u);
}

TEST(Encoder, DeterministicInEvaluation) {
  const auto spec = small_spec();
  ShapeTransformer<double> model(spec, 4);
  const auto map = toy_map(spec, 1);
  EXPECT_EQ(model.encode(Domain::photo, map), model.encode(Domain::photo, map));
}

TEST(Encoder, DomainsHaveIndependentParameters) {
  const auto spec = small_spec();
  ShapeTransformer<double> model(spec, 4);
  const auto map = toy_map(spec, 1);
  const auto a = model.encode(Domain::photo, map), b = model.encode(Domain::caricature, map);
  double d = 0;
  for (std::size_t i = 0; i < a.size(); ++i) d += std::abs(a.values[i] - b.values[i]);
  EXPECT_GT(d, 1e-6);
}

TEST(Encoder, RejectsShapeMismatchAndWrongDomain) {
  const auto spec = small_spec();
  ShapeTransformer<double> model(spec, 4);
  ParsingMap<double> wrong(Tensor<double>({spec.channels, 8, 8}), spec.categories, Hardness::soft);
  EXPECT_THROW(model.encode(Domain::photo, wrong), Error);
  EXPECT_THROW(model.encode(Domain::retrieval_photo, toy_map(spec, 1)), Error);
  RetrievalModel<double> r(spec, 1);
  EXPECT_THROW(r.encode(Domain::photo, toy_map(spec, 1)), Error);
}

TEST(Decoder, IdentityFieldAtInitialization) {
  const auto spec = small_spec();
  ShapeTransformer<double> model(spec, 9);
  const auto pho = toy_map(spec, 1), cari = toy_map(spec, 2, true);
  const auto f = model.decode_warp(model.encode(Domain::photo, pho), model.encode(Domain::caricature, cari));
  EXPECT_EQ(f.data.shape(), (Shape{2, spec.height, spec.width}));
  EXPECT_EQ(f.data, identity_warp<double>(spec.height, spec.width).data);
  EXPECT_EQ(warp(pho, f).data(), pho.data());
}

TEST(Decoder, FlowBoundHoldsOnRandomCodes) {
  auto spec = small_spec(8);
  spec.flow_bound_fraction = 0.25;
  ShapeTransformer<double> model(spec, 3);
  std::mt19937_64 rng(11);
  randomize(model.generator_params(), rng, 1.0);
  const auto id = identity_warp<double>(spec.height, spec.width);
  std::normal_distribution<double> n(0, 5);
  double worst = 0;
  for (int k = 0; k < 1000; ++k) {
    ShapeCode<double> a, b;
    a.values.resize(spec.code_dim);
    b.values.resize(spec.code_dim);
    for (auto& v : a.values) v = n(rng);
    for (auto& v : b.values) v = n(rng);
    worst = std::max(worst, max_abs_diff(model.decode_warp(a, b).data, id.data));
  }
  EXPECT_LE(worst, spec.flow_bound());
  EXPECT_GT(worst, 0.5 * spec.flow_bound());  // the bound is actually exercised
}

TEST(Decoder, DimensionMismatch) {
  const auto spec = small_spec();
  ShapeTransformer<double> model(spec, 3);
  ShapeCode<double> a, b;
  a.values.assign(spec.code_dim, 0);
  b.values.assign(spec.code_dim + 1, 0);
  EXPECT_THROW(model.decode_warp(a, b), Error);
}

TEST(Critic, ClipBoundsEveryParameter) {
  const auto spec = small_spec();
  ShapeTransformer<double> model(spec, 3);
  std::mt19937_64 rng(2);
  randomize(model.critic_params(), rng, 1.0);
  model.clip_critic(0.01);
  for (const auto& [name, v] : model.critic_params().items())
    for (double x : v->value.storage()) ASSERT_LE(std::abs(x), 0.01) << name;
}

TEST(Critic, ScoreRespondsToInput) {
  const auto spec = small_spec();
  ShapeTransformer<double> model(spec, 3);
  auto a = toy_map(spec, 1);
  const double s0 = model.critic(a);
  EXPECT_TRUE(std::isfinite(s0));
  auto t = a.data();
  for (std::size_t i = 0; i < t.size(); i += 7) t[i] = 1.0 - t[i];
  EXPECT_NE(s0, model.critic(ParsingMap<double>(t, spec.categories, Hardness::soft)));
}

// The warp head starts at zero, so encoder gradients are exactly zero at step
// 0; any nonzero head (here: a random perturbation) opens the path.
TEST(Gradient, FlowsFromWarpedLossToEncoders) {
  const auto spec = small_spec();
  ShapeTransformer<double> model(spec, 5);
  std::mt19937_64 rng(7);
  std::normal_distribution<double> n(0, 0.05);
  for (auto& [name, v] : model.generator_params().items())
    if (name.find(".flow.") != std::string::npos)
      for (auto& x : v->value.storage()) x = n(rng);
  const auto pho = toy_map(spec, 1), cari = toy_map(spec, 2, true);
  auto xp = ag::constant(stack_maps<double>({&pho}));
  auto xc = ag::constant(stack_maps<double>({&cari}));
  auto field = model.forward_field(model.encode_photo(xp), model.encode_caricature(xc));
  auto loss = ag::rec_loss(stack_maps<double>({&cari}), ag::warp(xp, field), 1.0, 0.0, 0.0, nullptr);
  model.generator_params().zero_grad();
  ag::backward(loss);
  double gp = 0, gc = 0;
  for (const auto& [name, v] : model.generator_params().items()) {
    if (v->grad.size() == 0) continue;
    double s = 0;
    for (double g : v->grad.storage()) s += std::abs(g);
    if (name.rfind("enc_photo", 0) == 0) gp += s;
    if (name.rfind("enc_cari", 0) == 0) gc += s;
  }
  EXPECT_GT(gp, 0);
  EXPECT_GT(gc, 0);
}

TEST(Retrieval, DecoderOutputIsNormalized) {
  const auto spec = small_spec();
  RetrievalModel<double> model(spec, 3);
  const auto z = model.encode(Domain::retrieval_caricature, toy_map(spec, 1, true));
  const auto m = model.retrieval_decode(z);
  EXPECT_EQ(m.data().shape(), (Shape{spec.channels, spec.height, spec.width}));
  for (std::size_t i = 0; i < spec.height; ++i)
    for (std::size_t j = 0; j < spec.width; ++j) {
      double s = 0;
      for (std::size_t c = 0; c < spec.channels; ++c) {
        const double v = m.data()(c, i, j);
        ASSERT_GE(v, 0.0);
        ASSERT_LE(v, 1.0);
        s += v;
      }
      ASSERT_NEAR(s, 1.0, 1e-9);
    }
}

TEST(Checkpoint, RoundTripPreservesOutputs) {
  const auto spec = small_spec();
  ShapeTransformer<float> model(spec, 5);
  std::mt19937_64 rng(1);
  std::normal_distribution<float> n(0, 0.05f);
  for (auto& [_, v] : model.generator_params().items())
    for (auto& x : v->value.storage()) x += n(rng);
  const auto bytes = model.serialize(12, 5);
  EXPECT_EQ(bytes.rfind("SEMAWARP-CKPT v1\n", 0), 0u);
  const auto back = ShapeTransformer<float>::deserialize(bytes);
  EXPECT_EQ(back.spec(), spec);
  EXPECT_EQ(back.serialize(12, 5), bytes);
  ToySpec ts;
  ts.height = ts.width = 16;
  ts.identities = 1;
  const auto map = encode_one_hot<float>(generate_toy_dataset(ts, 3)[0].photo);
  const auto z = model.encode(Domain::photo, map);
  EXPECT_EQ(back.encode(Domain::photo, map), z);
  EXPECT_EQ(back.decode_warp(z, z).data, model.decode_warp(z, z).data);
  EXPECT_EQ(back.critic(map), model.critic(map));

  RetrievalModel<float> r(spec, 6);
  const auto rb = RetrievalModel<float>::deserialize(r.serialize(0, 6));
  EXPECT_EQ(rb.fingerprint(), r.fingerprint());
  EXPECT_THROW(ShapeTransformer<float>::deserialize(r.serialize(0, 6)), Error);
  EXPECT_THROW(ShapeTransformer<float>::deserialize("garbage"), Error);
}

TEST(Checkpoint, FingerprintTracksCaricatureEncoderOnly) {
  const auto spec = small_spec();
  RetrievalModel<float> r(spec, 6);
  const auto f0 = r.fingerprint();
  for (auto& [name, v] : r.params().items())
    if (name.rfind("ret_photo", 0) == 0) v->value[0] += 1.0f;
  EXPECT_EQ(r.fingerprint(), f0);
  for (auto& [name, v] : r.params().items())
    if (name.rfind("ret_cari", 0) == 0) v->value[0] += 1.0f;
  EXPECT_NE(r.fingerprint(), f0);
}
