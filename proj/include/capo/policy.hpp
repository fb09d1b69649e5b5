#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <numeric>
#include <vector>

#include "capo/errors.hpp"
#include "capo/numerics.hpp"

namespace capo {

using TokenSeq = std::vector<std::int64_t>;

enum class Nonlinearity { kTanh, kIdentity };

// Fixed random featurizer: the last `window` tokens of a state, one-hot
// concatenated, through a seeded random matrix and an optional tanh. Only
// the last layer above it ever trains, so features of a state never change
// over a run and can be cached inside trajectories.
class FeatureEncoder {
 public:
  FeatureEncoder() = default;

  FeatureEncoder(std::int64_t vocab_size, std::int64_t feature_dim,
                 std::int64_t window, Nonlinearity nonlinearity,
                 std::uint64_t seed)
      : vocab_size_(vocab_size),
        feature_dim_(feature_dim),
        window_(window),
        nonlinearity_(nonlinearity),
        seed_(seed) {
    if (vocab_size < 2) throw InvalidInputError("FeatureEncoder: K must be >= 2");
    if (feature_dim < 1) throw InvalidInputError("FeatureEncoder: d_i must be >= 1");
    if (window < 1) throw InvalidInputError("FeatureEncoder: window must be >= 1");
    // Column scale 1/sqrt(window) keeps pre-activations O(1) regardless of
    // window length (each window slot contributes exactly one column).
    RngStream rng(seed, 0xFEA7);
    const double scale = 1.0 / std::sqrt(static_cast<double>(window));
    embed_.assign(static_cast<std::size_t>(feature_dim * window * vocab_size),
                  0.0);
    for (double& w : embed_) w = scale * rng.normal();
  }

  std::int64_t vocab_size() const { return vocab_size_; }
  std::int64_t feature_dim() const { return feature_dim_; }
  std::int64_t window() const { return window_; }
  Nonlinearity nonlinearity() const { return nonlinearity_; }
  std::uint64_t seed() const { return seed_; }

  // Pad token for window slots before the start of the state. It lives at
  // vocab index K-1; prompt sampling never emits that token.
  std::int64_t pad_token() const { return vocab_size_ - 1; }

  DenseVec encode(const TokenSeq& state) const {
    if (state.empty()) throw InvalidInputError("encode: empty state");
    DenseVec h(static_cast<std::size_t>(feature_dim_), 0.0);
    for (std::int64_t w = 0; w < window_; ++w) {
      // Slot w holds the token `window - w` positions from the end.
      std::int64_t pos = static_cast<std::int64_t>(state.size()) - window_ + w;
      std::int64_t tok = pos >= 0 ? state[static_cast<std::size_t>(pos)]
                                  : pad_token();
      if (tok < 0 || tok >= vocab_size_)
        throw InvalidInputError("encode: token out of range");
      const std::size_t col = static_cast<std::size_t>(w * vocab_size_ + tok);
      for (std::int64_t j = 0; j < feature_dim_; ++j) {
        h[static_cast<std::size_t>(j)] +=
            embed_[static_cast<std::size_t>(j) *
                       static_cast<std::size_t>(window_ * vocab_size_) +
                   col];
      }
    }
    if (nonlinearity_ == Nonlinearity::kTanh) {
      for (double& x : h) x = std::tanh(x);
    }
    return h;
  }

 private:
  std::int64_t vocab_size_ = 2;
  std::int64_t feature_dim_ = 1;
  std::int64_t window_ = 1;
  Nonlinearity nonlinearity_ = Nonlinearity::kTanh;
  std::uint64_t seed_ = 0;
  DenseVec embed_;  // row-major d_i x (window * K)
};

// Trainable last-layer weight matrix W (K x d_i), row-major. Updates are
// copy-on-write: readers can keep an old snapshot while the optimizer
// produces the next one.
class LastLayer {
 public:
  LastLayer() = default;

  LastLayer(std::int64_t vocab_size, std::int64_t feature_dim)
      : vocab_size_(vocab_size),
        feature_dim_(feature_dim),
        w_(static_cast<std::size_t>(vocab_size * feature_dim), 0.0) {
    if (vocab_size < 2 || feature_dim < 1)
      throw InvalidInputError("LastLayer: bad dimensions");
  }

  std::int64_t vocab_size() const { return vocab_size_; }
  std::int64_t feature_dim() const { return feature_dim_; }
  std::int64_t param_dim() const { return vocab_size_ * feature_dim_; }

  const DenseVec& weights() const { return w_; }
  DenseVec& mutable_weights() { return w_; }

  double weight(std::int64_t row, std::int64_t col) const {
    return w_[static_cast<std::size_t>(row * feature_dim_ + col)];
  }

  void set_weight(std::int64_t row, std::int64_t col, double v) {
    w_[static_cast<std::size_t>(row * feature_dim_ + col)] = v;
  }

  DenseVec logits(const DenseVec& h) const {
    if (static_cast<std::int64_t>(h.size()) != feature_dim_)
      throw InvalidInputError("logits: feature dimension mismatch");
    DenseVec out(static_cast<std::size_t>(vocab_size_), 0.0);
    for (std::int64_t a = 0; a < vocab_size_; ++a) {
      const double* row = w_.data() + a * feature_dim_;
      double acc = 0.0;
      for (std::int64_t j = 0; j < feature_dim_; ++j) acc += row[j] * h[j];
      out[static_cast<std::size_t>(a)] = acc;
    }
    return out;
  }

 private:
  std::int64_t vocab_size_ = 2;
  std::int64_t feature_dim_ = 1;
  DenseVec w_;
};

// W += scale * delta, leaving untouched rows bitwise unchanged.
inline LastLayer apply_update(const LastLayer& layer,
                              const RowSparseMatrix& delta, double scale) {
  if (delta.n_cols() != layer.feature_dim())
    throw InvalidInputError("apply_update: column dimension mismatch");
  LastLayer out = layer;
  for (const auto& [r, v] : delta.rows()) {
    if (r < 0 || r >= layer.vocab_size())
      throw InvalidInputError("apply_update: row index out of range");
    if (scale == 0.0) continue;
    double* row = out.mutable_weights().data() + r * layer.feature_dim();
    for (std::int64_t j = 0; j < layer.feature_dim(); ++j)
      row[j] += scale * v[static_cast<std::size_t>(j)];
  }
  return out;
}

// Softmax over W h with max-logit stabilization, plus the top-k slice kept
// for sparse gradient math. topk values are the temperature-1 probabilities
// themselves (not renormalized); sampling_probs() renormalizes on the same
// support at the sampling temperature.
struct ActionDistribution {
  DenseVec full_probs;         // temperature-1 softmax over all K tokens
  SparseVec topk;              // unrenormalized temperature-1 values on support
  DenseVec logits;             // raw logits, kept for temperature sampling
  bool full_support = false;   // top_k == K

  // Renormalized distribution over the top-k support at `temperature`,
  // as a dense vector aligned with topk.entries() order.
  DenseVec sampling_probs(double temperature) const {
    if (temperature <= 0.0)
      throw InvalidInputError("sampling_probs: temperature must be > 0");
    const auto& es = topk.entries();
    DenseVec out(es.size(), 0.0);
    double max_logit = -std::numeric_limits<double>::infinity();
    for (const auto& e : es)
      max_logit = std::max(max_logit,
                           logits[static_cast<std::size_t>(e.index)]);
    double z = 0.0;
    for (std::size_t i = 0; i < es.size(); ++i) {
      double v = std::exp((logits[static_cast<std::size_t>(es[i].index)] -
                           max_logit) /
                          temperature);
      out[i] = v;
      z += v;
    }
    for (double& p : out) p /= z;
    return out;
  }
};

inline ActionDistribution action_distribution(const LastLayer& layer,
                                              const DenseVec& h,
                                              std::int64_t top_k) {
  const std::int64_t K = layer.vocab_size();
  if (top_k < 1 || top_k > K)
    throw InvalidInputError("action_distribution: top_k out of range");
  ActionDistribution out;
  out.logits = layer.logits(h);
  double max_logit = -std::numeric_limits<double>::infinity();
  for (double l : out.logits) {
    if (!std::isfinite(l))
      throw NumericalError("action_distribution: non-finite logit");
    max_logit = std::max(max_logit, l);
  }
  out.full_probs.assign(static_cast<std::size_t>(K), 0.0);
  double z = 0.0;
  for (std::int64_t a = 0; a < K; ++a) {
    double v = std::exp(out.logits[static_cast<std::size_t>(a)] - max_logit);
    out.full_probs[static_cast<std::size_t>(a)] = v;
    z += v;
  }
  for (double& p : out.full_probs) p /= z;

  // k largest probabilities; ties broken toward the lower index so the
  // support is unique and reproducible.
  std::vector<std::int64_t> order(static_cast<std::size_t>(K));
  std::iota(order.begin(), order.end(), 0);
  std::partial_sort(order.begin(), order.begin() + top_k, order.end(),
                    [&](std::int64_t a, std::int64_t b) {
                      double pa = out.full_probs[static_cast<std::size_t>(a)];
                      double pb = out.full_probs[static_cast<std::size_t>(b)];
                      if (pa != pb) return pa > pb;
                      return a < b;
                    });
  std::vector<SparseVec::Entry> entries;
  entries.reserve(static_cast<std::size_t>(top_k));
  for (std::int64_t i = 0; i < top_k; ++i) {
    std::int64_t a = order[static_cast<std::size_t>(i)];
    entries.push_back({a, out.full_probs[static_cast<std::size_t>(a)]});
  }
  out.topk = SparseVec(K, std::move(entries));
  out.full_support = (top_k == K);
  return out;
}

// log pi(a|s) from stabilized logits; exp(log_prob) matches full_probs[a].
inline double log_prob(const LastLayer& layer, const DenseVec& h,
                       std::int64_t action) {
  const std::int64_t K = layer.vocab_size();
  if (action < 0 || action >= K)
    throw InvalidInputError("log_prob: action out of range");
  DenseVec logits = layer.logits(h);
  double max_logit = *std::max_element(logits.begin(), logits.end());
  double z = 0.0;
  for (double l : logits) z += std::exp(l - max_logit);
  return logits[static_cast<std::size_t>(action)] - max_logit - std::log(z);
}

// How the behavior log-prob of a sampled token is recorded.
enum class BehaviorLogprobMode {
  kSampling,  // log of the renormalized top-k probability actually sampled
  kFull,      // temperature-1 full-softmax log-prob
};

// Encoder + last layer + sampling knobs, bundled for the environment loop.
struct Policy {
  FeatureEncoder encoder;
  LastLayer layer;
  std::int64_t top_k = 1;
  double temperature = 0.9;
  BehaviorLogprobMode behavior_mode = BehaviorLogprobMode::kSampling;

  static std::int64_t default_top_k(std::int64_t vocab_size) {
    return std::min<std::int64_t>(50, vocab_size);
  }
};

// One generation step: distribution snapshot plus the sampled token.
struct SampledToken {
  std::int64_t action = 0;
  DenseVec features;
  SparseVec topk_probs;       // temperature-1, unrenormalized
  double behavior_logprob = 0.0;
  bool full_support = false;
};

inline SampledToken sample_token(const Policy& policy, const TokenSeq& state,
                                 RngStream& rng) {
  SampledToken out;
  out.features = policy.encoder.encode(state);
  ActionDistribution dist =
      action_distribution(policy.layer, out.features, policy.top_k);
  DenseVec sampling = dist.sampling_probs(policy.temperature);
  std::int64_t pick = rng_draw_categorical(rng, sampling);
  out.action = dist.topk.entries()[static_cast<std::size_t>(pick)].index;
  out.topk_probs = dist.topk;
  out.full_support = dist.full_support;
  if (policy.behavior_mode == BehaviorLogprobMode::kSampling) {
    out.behavior_logprob = std::log(sampling[static_cast<std::size_t>(pick)]);
  } else {
    // Same code path as the ratio-side evaluation so that on-policy ratios
    // come out exactly 1.
    out.behavior_logprob = log_prob(policy.layer, out.features, out.action);
  }
  return out;
}

// Current-policy log-prob in the same space the behavior log-prob was
// recorded in, evaluated on the stored support. With an unchanged layer this
// reproduces the sampling-time value bitwise, so on-policy ratios are
// exactly 1.
inline double current_logprob_for_ratio(const Policy& policy,
                                        const DenseVec& features,
                                        const SparseVec& stored_support,
                                        std::int64_t action) {
  if (policy.behavior_mode == BehaviorLogprobMode::kFull)
    return log_prob(policy.layer, features, action);
  // Renormalize at sampling temperature over the *stored* support, exactly
  // as sample_token did at collection time.
  DenseVec logits = policy.layer.logits(features);
  const auto& es = stored_support.entries();
  if (es.empty())
    throw DataError("current_logprob_for_ratio: empty stored support");
  double max_logit = -std::numeric_limits<double>::infinity();
  for (const auto& e : es)
    max_logit =
        std::max(max_logit, logits[static_cast<std::size_t>(e.index)]);
  double z = 0.0;
  double val = 0.0;
  bool found = false;
  for (const auto& e : es) {
    double v = std::exp(
        (logits[static_cast<std::size_t>(e.index)] - max_logit) /
        policy.temperature);
    z += v;
    if (e.index == action) {
      val = v;
      found = true;
    }
  }
  if (!found)
    throw DataError("current_logprob_for_ratio: action not in stored support");
  return std::log(val / z);
}

}  // namespace capo
