#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <random>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "capo/errors.hpp"

namespace capo {

using DenseVec = std::vector<double>;

inline bool all_finite(const DenseVec& v) {
  for (double x : v) {
    if (!std::isfinite(x)) return false;
  }
  return true;
}

// Sparse real vector over a logical dimension. Entries are kept sorted by
// index with exact zeros pruned, so merge-based operations visit entries in
// a fixed order and runs stay bitwise reproducible.
class SparseVec {
 public:
  struct Entry {
    std::int64_t index;
    double value;
  };

  SparseVec() : dim_(1) {}

  explicit SparseVec(std::int64_t dim) : dim_(dim) {
    if (dim < 1) throw InvalidInputError("SparseVec: dim must be >= 1");
  }

  // Entries may arrive in any order; duplicates are rejected.
  SparseVec(std::int64_t dim, std::vector<Entry> entries) : SparseVec(dim) {
    std::sort(entries.begin(), entries.end(),
              [](const Entry& a, const Entry& b) { return a.index < b.index; });
    entries_.reserve(entries.size());
    for (const Entry& e : entries) {
      if (e.index < 0 || e.index >= dim_)
        throw InvalidInputError("SparseVec: index out of range");
      if (!std::isfinite(e.value))
        throw InvalidInputError("SparseVec: non-finite value");
      if (!entries_.empty() && entries_.back().index == e.index)
        throw InvalidInputError("SparseVec: duplicate index");
      if (e.value != 0.0) entries_.push_back(e);
    }
  }

  static SparseVec from_dense(const DenseVec& v) {
    SparseVec out(static_cast<std::int64_t>(v.empty() ? 1 : v.size()));
    for (std::size_t i = 0; i < v.size(); ++i) {
      if (!std::isfinite(v[i]))
        throw InvalidInputError("SparseVec: non-finite value");
      if (v[i] != 0.0)
        out.entries_.push_back({static_cast<std::int64_t>(i), v[i]});
    }
    return out;
  }

  std::int64_t dim() const { return dim_; }
  std::size_t nnz() const { return entries_.size(); }
  bool empty() const { return entries_.empty(); }
  const std::vector<Entry>& entries() const { return entries_; }

  double at(std::int64_t index) const {
    auto it = std::lower_bound(
        entries_.begin(), entries_.end(), index,
        [](const Entry& e, std::int64_t i) { return e.index < i; });
    if (it != entries_.end() && it->index == index) return it->value;
    return 0.0;
  }

  SparseVec scaled(double alpha) const {
    SparseVec out(dim_);
    out.entries_.reserve(entries_.size());
    for (const Entry& e : entries_) {
      double v = alpha * e.value;
      if (v != 0.0) out.entries_.push_back({e.index, v});
    }
    return out;
  }

 private:
  std::int64_t dim_;
  std::vector<Entry> entries_;
};

// Exact merge over sorted indices; summation order is fixed by index order.
inline double sparse_dot(const SparseVec& a, const SparseVec& b) {
  if (a.dim() != b.dim())
    throw InvalidInputError("sparse_dot: dimension mismatch");
  double acc = 0.0;
  const auto& ea = a.entries();
  const auto& eb = b.entries();
  std::size_t i = 0, j = 0;
  while (i < ea.size() && j < eb.size()) {
    if (ea[i].index < eb[j].index) {
      ++i;
    } else if (ea[i].index > eb[j].index) {
      ++j;
    } else {
      acc += ea[i].value * eb[j].value;
      ++i;
      ++j;
    }
  }
  return acc;
}

inline constexpr std::int64_t kDefaultDensifyCap = 65536;

inline DenseVec sparse_densify(const SparseVec& a,
                               std::int64_t max_dim = kDefaultDensifyCap) {
  if (a.dim() > max_dim)
    throw ResourceError("sparse_densify: dim exceeds configured maximum");
  DenseVec out(static_cast<std::size_t>(a.dim()), 0.0);
  for (const auto& e : a.entries())
    out[static_cast<std::size_t>(e.index)] = e.value;
  return out;
}

// Rows of a K x d matrix stored only for touched row indices. Backs gradient
// accumulators, candidate steps and Adam moment state; std::map keeps row
// iteration order fixed so accumulation is reproducible.
class RowSparseMatrix {
 public:
  RowSparseMatrix() : n_rows_(0), n_cols_(0) {}

  RowSparseMatrix(std::int64_t n_rows, std::int64_t n_cols)
      : n_rows_(n_rows), n_cols_(n_cols) {
    if (n_rows < 1 || n_cols < 1)
      throw InvalidInputError("RowSparseMatrix: dimensions must be >= 1");
  }

  std::int64_t n_rows() const { return n_rows_; }
  std::int64_t n_cols() const { return n_cols_; }
  std::size_t stored_rows() const { return rows_.size(); }
  bool empty() const { return rows_.empty(); }

  const std::vector<std::pair<std::int64_t, DenseVec>>& rows() const {
    return rows_;
  }

  bool has_row(std::int64_t r) const { return find_row(r) != nullptr; }

  // Zero vector for untouched rows.
  const DenseVec* find_row(std::int64_t r) const {
    auto it = std::lower_bound(
        rows_.begin(), rows_.end(), r,
        [](const auto& row, std::int64_t key) { return row.first < key; });
    if (it != rows_.end() && it->first == r) return &it->second;
    return nullptr;
  }

  DenseVec& row(std::int64_t r) {
    if (r < 0 || r >= n_rows_)
      throw InvalidInputError("RowSparseMatrix: row index out of range");
    auto it = std::lower_bound(
        rows_.begin(), rows_.end(), r,
        [](const auto& row, std::int64_t key) { return row.first < key; });
    if (it == rows_.end() || it->first != r) {
      it = rows_.insert(
          it, {r, DenseVec(static_cast<std::size_t>(n_cols_), 0.0)});
    }
    return it->second;
  }

  void add_to_row(std::int64_t r, double coeff, const DenseVec& v) {
    if (static_cast<std::int64_t>(v.size()) != n_cols_)
      throw InvalidInputError("RowSparseMatrix: column dimension mismatch");
    DenseVec& dst = row(r);
    for (std::size_t j = 0; j < v.size(); ++j) dst[j] += coeff * v[j];
  }

  void scale(double alpha) {
    for (auto& [r, v] : rows_)
      for (double& x : v) x *= alpha;
  }

  double squared_norm() const {
    double acc = 0.0;
    for (const auto& [r, v] : rows_)
      for (double x : v) acc += x * x;
    return acc;
  }

  double norm() const { return std::sqrt(squared_norm()); }

  // Frobenius inner product over the shared support.
  double dot(const RowSparseMatrix& other) const {
    if (n_rows_ != other.n_rows_ || n_cols_ != other.n_cols_)
      throw InvalidInputError("RowSparseMatrix: dimension mismatch");
    double acc = 0.0;
    for (const auto& [r, v] : rows_) {
      const DenseVec* w = other.find_row(r);
      if (!w) continue;
      for (std::size_t j = 0; j < v.size(); ++j) acc += v[j] * (*w)[j];
    }
    return acc;
  }

 private:
  std::int64_t n_rows_;
  std::int64_t n_cols_;
  std::vector<std::pair<std::int64_t, DenseVec>> rows_;  // sorted by row index
};

// Deterministic random stream. (seed, stream_id) fully determines the draw
// sequence; distinct stream_ids give statistically independent streams. The
// distribution transforms are hand-rolled because the std:: distributions
// are implementation-defined and would break bitwise reproducibility.
class RngStream {
 public:
  RngStream() : RngStream(0, 0) {}

  RngStream(std::uint64_t seed, std::uint64_t stream_id)
      : seed_(seed), stream_id_(stream_id) {
    std::seed_seq seq{static_cast<std::uint32_t>(seed),
                      static_cast<std::uint32_t>(seed >> 32),
                      static_cast<std::uint32_t>(stream_id),
                      static_cast<std::uint32_t>(stream_id >> 32)};
    engine_.seed(seq);
  }

  std::uint64_t seed() const { return seed_; }
  std::uint64_t stream_id() const { return stream_id_; }

  // Derive an independent stream; used to give each sampled group its own
  // stream so parallel collection stays deterministic.
  RngStream substream(std::uint64_t id) const {
    return RngStream(seed_, stream_id_ * 0x9E3779B97F4A7C15ULL + id + 1);
  }

  std::uint64_t next_u64() { return engine_(); }

  // Uniform in [0, 1) with 53 bits of precision.
  double uniform01() {
    return static_cast<double>(engine_() >> 11) * 0x1.0p-53;
  }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform01(); }

  // Box-Muller without cached state, so streams serialize as engine bits.
  double normal() {
    double u1 = 0.0;
    do {
      u1 = uniform01();
    } while (u1 <= 0.0);
    double u2 = uniform01();
    return std::sqrt(-2.0 * std::log(u1)) *
           std::cos(2.0 * 3.14159265358979323846 * u2);
  }

  std::string serialize() const {
    std::ostringstream os;
    os << seed_ << ' ' << stream_id_ << ' ' << engine_;
    return os.str();
  }

  static RngStream deserialize(const std::string& text) {
    std::istringstream is(text);
    RngStream r;
    is >> r.seed_ >> r.stream_id_ >> r.engine_;
    if (!is) throw DataError("RngStream: bad serialized state");
    return r;
  }

 private:
  std::uint64_t seed_;
  std::uint64_t stream_id_;
  std::mt19937_64 engine_;
};

// Index draw by CDF scan. probs must be entrywise nonnegative and sum to 1
// within 1e-9.
inline std::int64_t rng_draw_categorical(RngStream& rng,
                                         const DenseVec& probs) {
  if (probs.empty())
    throw InvalidInputError("rng_draw_categorical: empty distribution");
  double sum = 0.0;
  for (double p : probs) {
    if (!(p >= 0.0))
      throw InvalidInputError("rng_draw_categorical: negative probability");
    sum += p;
  }
  if (std::abs(sum - 1.0) > 1e-9)
    throw InvalidInputError("rng_draw_categorical: probabilities must sum to 1");
  double u = rng.uniform01() * sum;
  double acc = 0.0;
  for (std::size_t i = 0; i < probs.size(); ++i) {
    acc += probs[i];
    if (u < acc) return static_cast<std::int64_t>(i);
  }
  // Roundoff fell past the last bucket; return the last index with mass.
  for (std::size_t i = probs.size(); i-- > 0;) {
    if (probs[i] > 0.0) return static_cast<std::int64_t>(i);
  }
  return static_cast<std::int64_t>(probs.size()) - 1;
}

}  // namespace capo
