#pragma once

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <string>
#include <vector>

#include "groundling/dataset_io.hpp"
#include "groundling/errors.hpp"

namespace groundling {

// Precomputed image query vectors, one row per scene id.
struct SearchIndex {
  std::vector<uint64_t> ids;
  Eigen::MatrixXf vectors;  // ids.size() x d
};

namespace detail {

inline void put_u64(std::string& out, uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(char((v >> (8 * i)) & 0xff));
}

inline uint64_t get_u64(const std::string& in, size_t at) {
  uint64_t v = 0;
  for (int i = 0; i < 8; ++i)
    v |= uint64_t(uint8_t(in[at + size_t(i)])) << (8 * i);
  return v;
}

}  // namespace detail

inline constexpr char kIndexMagic[] = "GNDIDX1";

// Header "GNDIDX1", record count, then per record the scene id (u64 LE) and
// the f32 LE vector entries. The vector width is not stored; it is implied
// by the record size.
inline void write_index(const std::string& path, const SearchIndex& index) {
  if (index.vectors.rows() != int64_t(index.ids.size()))
    throw InvalidCount("index has " + std::to_string(index.ids.size()) +
                       " ids but " + std::to_string(index.vectors.rows()) +
                       " vectors");
  std::string out(kIndexMagic, 7);
  detail::put_u64(out, index.ids.size());
  for (size_t r = 0; r < index.ids.size(); ++r) {
    detail::put_u64(out, index.ids[r]);
    for (int c = 0; c < index.vectors.cols(); ++c) {
      float f = index.vectors(int(r), c);
      char b[4];
      std::memcpy(b, &f, 4);
      out.append(b, 4);
    }
  }
  write_file_atomic(path, out);
}

inline SearchIndex read_index(const std::string& path) {
  std::string bytes = read_file(path);
  if (bytes.size() < 15 || bytes.compare(0, 7, kIndexMagic, 7) != 0)
    throw BadMagic("'" + path + "' is not an index file");
  uint64_t count = detail::get_u64(bytes, 7);
  SearchIndex index;
  size_t payload = bytes.size() - 15;
  if (count == 0) {
    if (payload != 0)
      throw FormatError("index '" + path + "' declares 0 records but has " +
                        std::to_string(payload) + " trailing bytes");
    index.vectors.resize(0, 0);
    return index;
  }
  if (payload % count != 0)
    throw FormatError("index '" + path + "': " + std::to_string(payload) +
                      " payload bytes do not divide into " +
                      std::to_string(count) + " records");
  size_t record = payload / count;
  if (record < 8 || (record - 8) % 4 != 0)
    throw FormatError("index '" + path + "': record size " +
                      std::to_string(record) + " is not id + f32 vector");
  int d = int((record - 8) / 4);
  index.vectors.resize(int64_t(count), d);
  size_t at = 15;
  for (uint64_t r = 0; r < count; ++r) {
    index.ids.push_back(detail::get_u64(bytes, at));
    at += 8;
    for (int c = 0; c < d; ++c) {
      float f;
      std::memcpy(&f, bytes.data() + at, 4);
      index.vectors(int64_t(r), c) = f;
      at += 4;
    }
  }
  return index;
}

// Q = (1-alpha) q_i + alpha q_w. Not re-normalized; cosine ranking absorbs
// the scale.
inline Eigen::VectorXd combine_query(const Eigen::VectorXd& qi,
                                     const Eigen::VectorXd& qw, double alpha) {
  if (!(alpha >= 0.0 && alpha <= 1.0))
    throw AlphaOutOfRange("alpha " + std::to_string(alpha) +
                          " outside the valid range [0, 1]");
  if (qi.size() != qw.size())
    throw ShapeMismatch("query dims " + std::to_string(qi.size()) + " vs " +
                        std::to_string(qw.size()));
  return (1.0 - alpha) * qi + alpha * qw;
}

struct SearchHit {
  uint64_t id = 0;
  double score = 0;
};

// Every database row scored by cosine similarity to q, descending, ties by
// ascending id. A zero database row scores 0.
inline std::vector<SearchHit> search_rank(const Eigen::VectorXd& q,
                                          const SearchIndex& db) {
  if (db.ids.empty()) throw InvalidCount("search over an empty database");
  if (q.size() != db.vectors.cols())
    throw ShapeMismatch("query dim " + std::to_string(q.size()) +
                        " vs index dim " + std::to_string(db.vectors.cols()));
  double qn = q.norm();
  if (qn == 0.0) throw ZeroQuery("query vector is zero");
  std::vector<SearchHit> hits(db.ids.size());
  for (size_t r = 0; r < db.ids.size(); ++r) {
    double dot = 0, vn = 0;
    for (int c = 0; c < db.vectors.cols(); ++c) {
      double v = double(db.vectors(int64_t(r), c));
      dot += v * q[c];
      vn += v * v;
    }
    vn = std::sqrt(vn);
    hits[r].id = db.ids[r];
    hits[r].score = vn == 0.0 ? 0.0 : dot / (qn * vn);
  }
  std::sort(hits.begin(), hits.end(), [](const SearchHit& a, const SearchHit& b) {
    if (a.score != b.score) return a.score > b.score;
    return a.id < b.id;
  });
  return hits;
}

}  // namespace groundling
