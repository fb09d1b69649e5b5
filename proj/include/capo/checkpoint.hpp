#pragma once

#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <optional>
#include <string>

#include "capo/errors.hpp"
#include "capo/numerics.hpp"
#include "capo/policy.hpp"
#include "capo/stepmodel.hpp"

namespace capo {

// Everything a run needs to resume bitwise: weights, optimizer moments,
// iteration counters and the exact RNG state. The encoder is rebuilt from
// the resolved config, so only its identity lives in the config snapshot.
struct Checkpoint {
  std::int64_t iteration = 0;
  std::int64_t completions = 0;
  LastLayer layer;
  std::optional<LastLayer> ref_layer;
  StepModelState stepmodel;
  std::string rng_state;
};

namespace ckpt_detail {

inline constexpr char kMagic[8] = {'C', 'A', 'P', 'O', 'C', 'K', 'P', 'T'};
inline constexpr std::uint32_t kVersion = 1;

template <typename T>
void put(std::ofstream& out, const T& v) {
  out.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T take(std::ifstream& in) {
  T v{};
  in.read(reinterpret_cast<char*>(&v), sizeof(T));
  if (!in) throw DataError("checkpoint: truncated file");
  return v;
}

inline void put_doubles(std::ofstream& out, const DenseVec& v) {
  out.write(reinterpret_cast<const char*>(v.data()),
            static_cast<std::streamsize>(v.size() * sizeof(double)));
}

inline void take_doubles(std::ifstream& in, DenseVec& v) {
  in.read(reinterpret_cast<char*>(v.data()),
          static_cast<std::streamsize>(v.size() * sizeof(double)));
  if (!in) throw DataError("checkpoint: truncated file");
}

inline void put_rows(std::ofstream& out, const RowSparseMatrix& m) {
  put<std::int64_t>(out, static_cast<std::int64_t>(m.stored_rows()));
  for (const auto& [r, v] : m.rows()) {
    put<std::int64_t>(out, r);
    put_doubles(out, v);
  }
}

inline RowSparseMatrix take_rows(std::ifstream& in, std::int64_t n_rows,
                                 std::int64_t n_cols) {
  RowSparseMatrix m(n_rows, n_cols);
  const auto stored = take<std::int64_t>(in);
  for (std::int64_t i = 0; i < stored; ++i) {
    const auto r = take<std::int64_t>(in);
    take_doubles(in, m.row(r));
  }
  return m;
}

inline void put_layer(std::ofstream& out, const LastLayer& layer) {
  put<std::int64_t>(out, layer.vocab_size());
  put<std::int64_t>(out, layer.feature_dim());
  put_doubles(out, layer.weights());
}

inline LastLayer take_layer(std::ifstream& in) {
  const auto K = take<std::int64_t>(in);
  const auto d = take<std::int64_t>(in);
  if (K < 2 || d < 1 || K * d > (std::int64_t{1} << 32))
    throw DataError("checkpoint: implausible layer dimensions");
  LastLayer layer(K, d);
  take_doubles(in, layer.mutable_weights());
  return layer;
}

}  // namespace ckpt_detail

// Atomic write: the previous checkpoint stays valid if this one dies midway.
inline void save_checkpoint(const Checkpoint& c, const std::string& path) {
  namespace fs = std::filesystem;
  const std::string tmp = path + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot open checkpoint '" + tmp + "'");
    out.write(ckpt_detail::kMagic, sizeof(ckpt_detail::kMagic));
    ckpt_detail::put<std::uint32_t>(out, ckpt_detail::kVersion);
    ckpt_detail::put<std::int64_t>(out, c.iteration);
    ckpt_detail::put<std::int64_t>(out, c.completions);
    ckpt_detail::put_layer(out, c.layer);
    ckpt_detail::put<std::uint8_t>(out, c.ref_layer ? 1 : 0);
    if (c.ref_layer) ckpt_detail::put_layer(out, *c.ref_layer);
    ckpt_detail::put<std::uint8_t>(
        out, c.stepmodel.kind == StepKind::kAdam ? 1 : 0);
    ckpt_detail::put<double>(out, c.stepmodel.lr);
    ckpt_detail::put<double>(out, c.stepmodel.beta1);
    ckpt_detail::put<double>(out, c.stepmodel.beta2);
    ckpt_detail::put<double>(out, c.stepmodel.eps);
    ckpt_detail::put<std::int64_t>(out, c.stepmodel.t);
    ckpt_detail::put_rows(out, c.stepmodel.p);
    ckpt_detail::put_rows(out, c.stepmodel.q);
    ckpt_detail::put<std::uint32_t>(
        out, static_cast<std::uint32_t>(c.rng_state.size()));
    out.write(c.rng_state.data(),
              static_cast<std::streamsize>(c.rng_state.size()));
    if (!out) throw IoError("checkpoint write failed");
  }
  std::error_code ec;
  fs::rename(tmp, path, ec);
  if (ec) throw IoError("checkpoint rename failed: " + ec.message());
}

inline Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open checkpoint '" + path + "'");
  char magic[8];
  in.read(magic, sizeof(magic));
  if (!in || std::memcmp(magic, ckpt_detail::kMagic, sizeof(magic)) != 0)
    throw DataError("checkpoint: bad magic");
  const auto version = ckpt_detail::take<std::uint32_t>(in);
  if (version != ckpt_detail::kVersion)
    throw DataError("checkpoint: unsupported version");
  Checkpoint c;
  c.iteration = ckpt_detail::take<std::int64_t>(in);
  c.completions = ckpt_detail::take<std::int64_t>(in);
  c.layer = ckpt_detail::take_layer(in);
  if (ckpt_detail::take<std::uint8_t>(in) != 0)
    c.ref_layer = ckpt_detail::take_layer(in);
  const auto kind = ckpt_detail::take<std::uint8_t>(in);
  const double lr = ckpt_detail::take<double>(in);
  const double b1 = ckpt_detail::take<double>(in);
  const double b2 = ckpt_detail::take<double>(in);
  const double eps = ckpt_detail::take<double>(in);
  c.stepmodel = StepModelState::make(kind == 1 ? StepKind::kAdam : StepKind::kSgd,
                                     lr, c.layer.vocab_size(),
                                     c.layer.feature_dim(), b1, b2, eps);
  c.stepmodel.t = ckpt_detail::take<std::int64_t>(in);
  c.stepmodel.p = ckpt_detail::take_rows(in, c.layer.vocab_size(),
                                         c.layer.feature_dim());
  c.stepmodel.q = ckpt_detail::take_rows(in, c.layer.vocab_size(),
                                         c.layer.feature_dim());
  const auto len = ckpt_detail::take<std::uint32_t>(in);
  c.rng_state.resize(len);
  in.read(c.rng_state.data(), len);
  if (!in) throw DataError("checkpoint: truncated rng state");
  return c;
}

}  // namespace capo
