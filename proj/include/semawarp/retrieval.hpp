// Gallery index over caricature codes and exact top-k Euclidean query.
#pragma once

#include <algorithm>
#include <cmath>
#include <set>
#include <string>
#include <vector>

#include "semawarp/nets.hpp"

namespace semawarp {

struct GalleryEntry {
  std::string id;
  ShapeCode<float> code;
  std::string path;
};

struct GalleryIndex {
  std::size_t code_dim = 0;
  std::string fingerprint;
  std::vector<GalleryEntry> entries;

  bool empty() const { return entries.empty(); }
  std::size_t size() const { return entries.size(); }

  const GalleryEntry* find(const std::string& id) const {
    for (const auto& e : entries)
      if (e.id == id) return &e;
    return nullptr;
  }
};

struct GalleryRecord {
  std::string id;
  LabelImage labels;
  std::string path;
};

struct RetrievalHit {
  std::string id;
  double distance = 0;
  friend bool operator==(const RetrievalHit&, const RetrievalHit&) = default;
};

/// Encodes every record with the retrieval caricature encoder.
template <typename T>
GalleryIndex build_index(const std::vector<GalleryRecord>& records, const RetrievalModel<T>& model) {
  const ModelSpec& spec = model.spec();
  GalleryIndex index;
  index.code_dim = spec.code_dim;
  index.fingerprint = model.fingerprint();
  std::set<std::string> seen;
  for (const auto& r : records) {
    require(seen.insert(r.id).second, "duplicate_id", "record id '" + r.id + "' appears twice");
    if (r.labels.height != spec.height || r.labels.width != spec.width ||
        r.labels.classes() != spec.channels)
      throw Error("shape_mismatch", "record '" + r.id + "' is " + std::to_string(r.labels.height) +
                                        "x" + std::to_string(r.labels.width) + " with " +
                                        std::to_string(r.labels.classes()) +
                                        " classes; the model expects " +
                                        std::to_string(spec.height) + "x" +
                                        std::to_string(spec.width) + " with " +
                                        std::to_string(spec.channels));
    const auto map = encode_one_hot<T>(r.labels, spec.channels);
    const auto z = model.encode(Domain::retrieval_caricature, map);
    ShapeCode<float> code;
    for (T v : z.values) code.values.push_back(float(v));
    index.entries.push_back({r.id, std::move(code), r.path});
  }
  return index;
}

/// Exact scan; ascending distance, ties broken by record id.
template <typename T>
std::vector<RetrievalHit> query_codes(const GalleryIndex& index, const ShapeCode<T>& query,
                                      std::size_t k = 5) {
  require(!index.empty(), "empty_index", "gallery index is empty");
  require(k >= 1, "invalid_k", "k must be at least 1");
  require(query.size() == index.code_dim, "dimension_mismatch",
          "query code length does not match the index");
  std::vector<RetrievalHit> hits;
  hits.reserve(index.size());
  for (const auto& e : index.entries) {
    double s = 0;
    for (std::size_t i = 0; i < index.code_dim; ++i) {
      const double d = double(query.values[i]) - double(e.code.values[i]);
      s += d * d;
    }
    hits.push_back({e.id, std::sqrt(s)});
  }
  const std::size_t n = std::min(k, hits.size());
  std::partial_sort(hits.begin(), hits.begin() + std::ptrdiff_t(n), hits.end(),
                    [](const RetrievalHit& a, const RetrievalHit& b) {
                      return a.distance != b.distance ? a.distance < b.distance : a.id < b.id;
                    });
  hits.resize(n);
  return hits;
}

/// Encodes the photo map with the retrieval photo encoder and queries. The
/// model must be the one the index was built with.
template <typename T>
std::vector<RetrievalHit> query_top_k(const GalleryIndex& index, const RetrievalModel<T>& model,
                                      const LabelImage& photo, std::size_t k = 5) {
  require(!index.empty(), "empty_index", "gallery index is empty");
  require(model.fingerprint() == index.fingerprint, "fingerprint_mismatch",
          "index was built by encoder " + index.fingerprint + ", query encoder is " +
              model.fingerprint());
  const ModelSpec& spec = model.spec();
  require(photo.height == spec.height && photo.width == spec.width, "shape_mismatch",
          "photo labels do not match the model size");
  const auto z = model.encode(Domain::retrieval_photo, encode_one_hot<T>(photo, spec.channels));
  return query_codes(index, z, k);
}

// ---------------------------------------------------------------------------
// Index file: text header, float32 codes, then the id/path table as
// length-prefixed UTF-8 strings (u32 little-endian lengths).

inline constexpr const char* kIndexMagic = "SEMAWARP-INDEX v1";

namespace detail {

inline void put_u32_le(std::string& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out += char((v >> (8 * i)) & 0xff);
}

inline std::uint32_t get_u32_le(const unsigned char* p) {
  return std::uint32_t(p[0]) | std::uint32_t(p[1]) << 8 | std::uint32_t(p[2]) << 16 |
         std::uint32_t(p[3]) << 24;
}

}  // namespace detail

inline std::string serialize_index(const GalleryIndex& index) {
  std::string out = std::string(kIndexMagic) + "\n";
  out += "code_dim " + std::to_string(index.code_dim) + "\n";
  out += "fingerprint " + index.fingerprint + "\n";
  out += "entries " + std::to_string(index.size()) + "\n";
  for (const auto& e : index.entries)
    for (float v : e.code.values) put_f32_le(out, v);
  for (const auto& e : index.entries) {
    detail::put_u32_le(out, std::uint32_t(e.id.size()));
    out += e.id;
    detail::put_u32_le(out, std::uint32_t(e.path.size()));
    out += e.path;
  }
  return out;
}

inline GalleryIndex parse_index(const std::string& bytes) {
  std::size_t pos = 0;
  auto line = [&]() {
    const auto nl = bytes.find('\n', pos);
    require(nl != std::string::npos, "bad_index", "truncated index header");
    std::string s = bytes.substr(pos, nl - pos);
    pos = nl + 1;
    return s;
  };
  auto field = [&](const std::string& key) {
    const std::string l = line();
    require(l.rfind(key + " ", 0) == 0, "bad_index", "index header lacks '" + key + "'");
    return l.substr(key.size() + 1);
  };
  require(line() == kIndexMagic, "bad_index", "not a SEMAWARP-INDEX v1 file");
  GalleryIndex index;
  std::size_t n = 0;
  try {
    index.code_dim = std::stoul(field("code_dim"));
    index.fingerprint = field("fingerprint");
    n = std::stoul(field("entries"));
  } catch (const std::invalid_argument&) {
    throw Error("bad_index", "malformed index header");
  }
  const auto* p = reinterpret_cast<const unsigned char*>(bytes.data());
  require(bytes.size() - pos >= n * index.code_dim * 4, "bad_index", "truncated index codes");
  index.entries.resize(n);
  for (auto& e : index.entries) {
    e.code.values.resize(index.code_dim);
    for (auto& v : e.code.values) {
      v = get_f32_le(p + pos);
      pos += 4;
    }
  }
  auto str = [&]() {
    require(bytes.size() - pos >= 4, "bad_index", "truncated id table");
    const std::uint32_t len = detail::get_u32_le(p + pos);
    pos += 4;
    require(bytes.size() - pos >= len, "bad_index", "truncated id table");
    std::string s = bytes.substr(pos, len);
    pos += len;
    return s;
  };
  for (auto& e : index.entries) {
    e.id = str();
    e.path = str();
  }
  require(pos == bytes.size(), "bad_index", "trailing bytes after id table");
  return index;
}

// ---------------------------------------------------------------------------
// Held-out evaluation

struct RetrievalEval {
  double recall_at_k = 0;     // fraction of photos whose identity is in the top k
  double chance = 0;          // k / gallery size
  double mean_positive = 0;   // photo to same-identity caricature
  double mean_negative = 0;   // photo to other-identity caricatures
  std::size_t queries = 0;
};

/// Queries every photo against a gallery made of the given caricatures.
/// Identities are compared by id string; gallery ids are made unique.
template <typename T>
RetrievalEval evaluate_retrieval(const RetrievalModel<T>& model, const std::vector<LabelImage>& photos,
                                 const std::vector<std::string>& photo_ids,
                                 const std::vector<LabelImage>& caricatures,
                                 const std::vector<std::string>& cari_ids, std::size_t k = 5) {
  require(photos.size() == photo_ids.size() && caricatures.size() == cari_ids.size(), "shape_mismatch",
          "one identity per map required");
  std::vector<GalleryRecord> records;
  for (std::size_t i = 0; i < caricatures.size(); ++i)
    records.push_back({std::to_string(i), caricatures[i], ""});
  const auto index = build_index(records, model);
  RetrievalEval ev;
  ev.chance = double(std::min(k, index.size())) / double(index.size());
  std::size_t found = 0, npos = 0, nneg = 0;
  for (std::size_t q = 0; q < photos.size(); ++q) {
    const auto ranked = query_top_k(index, model, photos[q], index.size());
    bool hit = false;  // a photo counts once even with several matching caricatures
    for (std::size_t r = 0; r < ranked.size(); ++r) {
      const bool same = cari_ids[std::stoul(ranked[r].id)] == photo_ids[q];
      hit |= same && r < k;
      if (same) {
        ev.mean_positive += ranked[r].distance;
        ++npos;
      } else {
        ev.mean_negative += ranked[r].distance;
        ++nneg;
      }
    }
    found += hit;
  }
  ev.queries = photos.size();
  ev.recall_at_k = photos.empty() ? 0.0 : double(found) / double(photos.size());
  if (npos) ev.mean_positive /= double(npos);
  if (nneg) ev.mean_negative /= double(nneg);
  return ev;
}

}  // namespace semawarp
