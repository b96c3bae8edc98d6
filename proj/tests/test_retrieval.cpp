#include <gtest/gtest.h>

#include <algorithm>
#include <random>

#include "semawarp/retrieval.hpp"
#include "semawarp/toy.hpp"

using namespace semawarp;

namespace {

ModelSpec small_spec() {
  ModelSpec s;
  s.height = s.width = 16;
  s.n_blocks = 2;
  s.widths = {8, 8};
  s.growth = 4;
  s.code_dim = 12;
  return s;
}

std::vector<GalleryRecord> toy_records(std::size_t n, std::uint64_t seed = 2) {
  ToySpec ts;
  ts.height = ts.width = 16;
  ts.identities = n;
  std::vector<GalleryRecord> out;
  for (const auto& s : generate_toy_dataset(ts, seed))
    out.push_back({"rec" + std::to_string(s.identity), s.caricature, "/data/c" + std::to_string(s.identity)});
  return out;
}

GalleryIndex synthetic_index(const std::vector<std::vector<float>>& codes) {
  GalleryIndex idx;
  idx.code_dim = codes.empty() ? 0 : codes[0].size();
  idx.fingerprint = "0";
  for (std::size_t i = 0; i < codes.size(); ++i)
    idx.entries.push_back({"e" + std::to_string(1000 + i), ShapeCode<float>{codes[i]}, ""});
  return idx;
}

}  // namespace

TEST(Index, BuildIsDeterministicAndDistinct) {
  RetrievalModel<float> model(small_spec(), 4);
  const auto recs = toy_records(6);
  const auto a = build_index(recs, model), b = build_index(recs, model);
  ASSERT_EQ(a.size(), 6u);
  EXPECT_EQ(serialize_index(a), serialize_index(b));
  EXPECT_EQ(a.fingerprint, model.fingerprint());
  EXPECT_TRUE(build_index({}, model).empty());
}

TEST(Index, ErrorsNameTheRecord) {
  RetrievalModel<float> model(small_spec(), 4);
  auto recs = toy_records(3);
  recs[1].labels = LabelImage(8, 8);
  try {
    build_index(recs, model);
    FAIL() << "expected shape_mismatch";
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), "shape_mismatch");
    EXPECT_NE(std::string(e.what()).find("rec1"), std::string::npos);
  }
  recs = toy_records(3);
  recs[2].id = recs[0].id;
  EXPECT_THROW(build_index(recs, model), Error);
}

TEST(Query, OwnCodeRanksFirst) {
  RetrievalModel<float> model(small_spec(), 4);
  const auto recs = toy_records(8);
  const auto idx = build_index(recs, model);
  const auto& target = idx.entries[5];
  const auto hits = query_codes(idx, target.code);
  ASSERT_EQ(hits.size(), 5u);  // default k
  EXPECT_EQ(hits[0].id, target.id);
  EXPECT_EQ(hits[0].distance, 0.0);
}

TEST(Query, CodesOnALineMatchBruteForce) {
  std::vector<std::vector<float>> codes;
  const std::vector<float> pos = {3.5f, -1.0f, 7.0f, 0.25f, -4.0f, 2.0f, -2.5f, 5.0f, 1.5f, -0.5f};
  for (float p : pos) codes.push_back({p, 0.0f});
  const auto idx = synthetic_index(codes);
  const auto hits = query_codes(idx, ShapeCode<float>{{0.0f, 0.0f}}, 10);
  std::vector<std::pair<double, std::string>> brute;
  for (std::size_t i = 0; i < pos.size(); ++i) brute.push_back({std::abs(double(pos[i])), idx.entries[i].id});
  std::sort(brute.begin(), brute.end());
  ASSERT_EQ(hits.size(), 10u);
  for (std::size_t i = 0; i < 10; ++i) {
    EXPECT_EQ(hits[i].id, brute[i].second);
    EXPECT_EQ(hits[i].distance, brute[i].first);
  }
}

TEST(Query, RandomGalleriesMatchBruteForceSort) {
  std::mt19937_64 rng(99);
  std::uniform_int_distribution<int> size(1, 40), dim(1, 8), kk(1, 12);
  std::uniform_int_distribution<int> coarse(-3, 3);  // coarse grid forces ties
  for (int g = 0; g < 1000; ++g) {
    const std::size_t n = size(rng), D = dim(rng), k = kk(rng);
    std::vector<std::vector<float>> codes(n, std::vector<float>(D));
    for (auto& c : codes)
      for (auto& v : c) v = float(coarse(rng));
    auto idx = synthetic_index(codes);
    std::shuffle(idx.entries.begin(), idx.entries.end(), rng);
    std::vector<float> q(D);
    for (auto& v : q) v = float(coarse(rng)) * 0.5f;
    std::vector<std::pair<double, std::string>> brute;
    for (const auto& e : idx.entries) {
      double s = 0;
      for (std::size_t i = 0; i < D; ++i) s += (double(q[i]) - e.code.values[i]) * (double(q[i]) - e.code.values[i]);
      brute.push_back({std::sqrt(s), e.id});
    }
    std::sort(brute.begin(), brute.end());
    const auto hits = query_codes(idx, ShapeCode<float>{q}, k);
    ASSERT_EQ(hits.size(), std::min(k, n));
    for (std::size_t i = 0; i < hits.size(); ++i) {
      ASSERT_EQ(hits[i].id, brute[i].second) << "gallery " << g;
      ASSERT_NEAR(hits[i].distance, brute[i].first, 1e-6);
      if (i) ASSERT_LE(hits[i - 1].distance, hits[i].distance);
    }
  }
}

TEST(Query, Preconditions) {
  RetrievalModel<float> model(small_spec(), 4);
  const auto idx = build_index(toy_records(3), model);
  EXPECT_THROW(query_codes(GalleryIndex{}, ShapeCode<float>{{1.0f}}), Error);
  EXPECT_THROW(query_codes(idx, idx.entries[0].code, 0), Error);
  EXPECT_THROW(query_codes(idx, ShapeCode<float>{{1.0f}}), Error);
  RetrievalModel<float> other(small_spec(), 5);
  try {
    query_top_k(idx, other, toy_records(1)[0].labels);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), "fingerprint_mismatch");
  }
  const auto hits = query_top_k(idx, model, toy_records(1)[0].labels, 50);
  EXPECT_EQ(hits.size(), 3u);
}

TEST(IndexFile, RoundTripAndCorruption) {
  RetrievalModel<float> model(small_spec(), 4);
  auto recs = toy_records(4);
  recs[2].path = "/gallery/ünïcode path.png";
  const auto idx = build_index(recs, model);
  const auto bytes = serialize_index(idx);
  EXPECT_EQ(bytes.rfind("SEMAWARP-INDEX v1\n", 0), 0u);
  const auto back = parse_index(bytes);
  EXPECT_EQ(back.code_dim, idx.code_dim);
  EXPECT_EQ(back.fingerprint, idx.fingerprint);
  ASSERT_EQ(back.size(), idx.size());
  for (std::size_t i = 0; i < idx.size(); ++i) {
    EXPECT_EQ(back.entries[i].id, idx.entries[i].id);
    EXPECT_EQ(back.entries[i].path, idx.entries[i].path);
    EXPECT_EQ(back.entries[i].code, idx.entries[i].code);
  }
  EXPECT_EQ(serialize_index(back), bytes);
  EXPECT_THROW(parse_index("SEMAWARP-INDEX v2\n"), Error);
  EXPECT_THROW(parse_index(bytes.substr(0, bytes.size() - 3)), Error);
  EXPECT_THROW(parse_index(bytes + "x"), Error);
}

TEST(Evaluation, RecallCountsEachPhotoOnce) {
  RetrievalModel<float> model(small_spec(), 4);
  ToySpec ts;
  ts.height = ts.width = 16;
  ts.identities = 6;
  std::vector<LabelImage> ph, ca;
  std::vector<std::string> ids;
  for (const auto& s : generate_toy_dataset(ts, 8)) {
    ph.push_back(s.photo);
    ca.push_back(s.caricature);
    ids.push_back(std::to_string(s.identity));
  }
  const auto all = evaluate_retrieval(model, ph, ids, ca, ids, 6);
  EXPECT_DOUBLE_EQ(all.recall_at_k, 1.0);  // k = gallery size finds everyone
  EXPECT_DOUBLE_EQ(all.chance, 1.0);
  const auto top1 = evaluate_retrieval(model, ph, ids, ca, ids, 1);
  EXPECT_NEAR(top1.chance, 1.0 / 6.0, 1e-12);
  EXPECT_GT(top1.mean_negative, 0.0);
}
