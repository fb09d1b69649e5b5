#include "capo/policy.hpp"

#include <catch2/catch_amalgamated.hpp>
#include <cmath>

#include "capo/errors.hpp"
#include "capo/numerics.hpp"

using namespace capo;

namespace {

LastLayer random_layer(std::int64_t K, std::int64_t d, RngStream& rng,
                       double scale = 1.0) {
  LastLayer layer(K, d);
  for (std::int64_t r = 0; r < K; ++r)
    for (std::int64_t j = 0; j < d; ++j)
      layer.set_weight(r, j, scale * rng.normal());
  return layer;
}

DenseVec random_features(std::int64_t d, RngStream& rng) {
  DenseVec h(static_cast<std::size_t>(d));
  for (double& x : h) x = rng.uniform(-1.0, 1.0);
  return h;
}

}  // namespace

TEST_CASE("encoder is deterministic and pads short states") {
  FeatureEncoder enc(8, 16, 4, Nonlinearity::kTanh, 123);
  TokenSeq state{1, 2, 3};
  CHECK(enc.encode(state) == enc.encode(state));

  FeatureEncoder enc2(8, 16, 4, Nonlinearity::kTanh, 123);
  CHECK(enc.encode(state) == enc2.encode(state));  // same seed, same encoder

  // tanh output strictly inside (-1, 1)
  for (double x : enc.encode(state)) {
    CHECK(x > -1.0);
    CHECK(x < 1.0);
  }

  // short state uses the pad token; must differ from an explicit token there
  TokenSeq longer{0, 1, 2, 3};
  CHECK(enc.encode(state) != enc.encode(longer));
  CHECK_THROWS_AS(enc.encode(TokenSeq{}), InvalidInputError);
  CHECK_THROWS_AS(enc.encode(TokenSeq{8}), InvalidInputError);
}

TEST_CASE("identity encoder with zero-ish layer gives uniform policy") {
  FeatureEncoder enc(4, 8, 2, Nonlinearity::kIdentity, 5);
  LastLayer layer(4, 8);  // W = 0
  DenseVec h = enc.encode(TokenSeq{1, 2});
  ActionDistribution dist = action_distribution(layer, h, 4);
  for (double p : dist.full_probs) CHECK(p == Catch::Approx(0.25).margin(1e-15));
  CHECK(dist.full_support);
  CHECK(log_prob(layer, h, 2) == Catch::Approx(std::log(0.25)).margin(1e-12));
}

TEST_CASE("softmax matches the direct two-logit evaluation") {
  // K=2, d_i=1, h=[1], rows (1, -1): probs (e, 1/e)/(e + 1/e)
  LastLayer layer(2, 1);
  layer.set_weight(0, 0, 1.0);
  layer.set_weight(1, 0, -1.0);
  DenseVec h{1.0};
  ActionDistribution dist = action_distribution(layer, h, 2);
  const double e1 = std::exp(1.0), em1 = std::exp(-1.0);
  CHECK(dist.full_probs[0] == Catch::Approx(e1 / (e1 + em1)).margin(1e-15));
  CHECK(dist.full_probs[1] == Catch::Approx(em1 / (e1 + em1)).margin(1e-15));
  CHECK(dist.full_probs[0] == Catch::Approx(0.8808).margin(5e-5));
  CHECK(log_prob(layer, h, 0) == Catch::Approx(-0.1269).margin(5e-5));
}

TEST_CASE("softmax normalizes, stays shift invariant and matches log_prob") {
  RngStream rng(17, 0);
  for (int trial = 0; trial < 100; ++trial) {
    const std::int64_t K = 2 + static_cast<std::int64_t>(rng.uniform01() * 6);
    const std::int64_t d = 1 + static_cast<std::int64_t>(rng.uniform01() * 3);
    LastLayer layer = random_layer(K, d, rng, 2.0);
    DenseVec h = random_features(d, rng);
    ActionDistribution dist = action_distribution(layer, h, K);

    double sum = 0.0;
    for (double p : dist.full_probs) sum += p;
    CHECK(sum == Catch::Approx(1.0).margin(1e-12));

    for (std::int64_t a = 0; a < K; ++a)
      CHECK(std::exp(log_prob(layer, h, a)) ==
            Catch::Approx(dist.full_probs[static_cast<std::size_t>(a)])
                .margin(1e-12));

    // Adding a constant to every logit leaves probabilities unchanged.
    LastLayer shifted = layer;
    DenseVec grow(static_cast<std::size_t>(d), 0.0);
    // Shift all logits by c via an extra rank-one bump c * (h / ||h||^2).
    double h2 = 0.0;
    for (double x : h) h2 += x * x;
    if (h2 < 1e-9) continue;
    for (std::int64_t j = 0; j < d; ++j)
      grow[static_cast<std::size_t>(j)] = 1.7 * h[static_cast<std::size_t>(j)] / h2;
    for (std::int64_t r = 0; r < K; ++r)
      for (std::int64_t j = 0; j < d; ++j)
        shifted.set_weight(r, j, layer.weight(r, j) +
                                     grow[static_cast<std::size_t>(j)]);
    ActionDistribution dist2 = action_distribution(shifted, h, K);
    for (std::int64_t a = 0; a < K; ++a)
      CHECK(dist2.full_probs[static_cast<std::size_t>(a)] ==
            Catch::Approx(dist.full_probs[static_cast<std::size_t>(a)])
                .margin(1e-12));
  }
}

TEST_CASE("grad-log-prob identity: E_a[e_a - pi] = 0") {
  RngStream rng(23, 0);
  for (int trial = 0; trial < 100; ++trial) {
    const std::int64_t K = 2 + static_cast<std::int64_t>(rng.uniform01() * 6);
    LastLayer layer = random_layer(K, 2, rng, 1.5);
    DenseVec h = random_features(2, rng);
    DenseVec pi = action_distribution(layer, h, K).full_probs;
    for (std::int64_t comp = 0; comp < K; ++comp) {
      double acc = 0.0;
      for (std::int64_t a = 0; a < K; ++a)
        acc += pi[static_cast<std::size_t>(a)] *
               ((a == comp ? 1.0 : 0.0) - pi[static_cast<std::size_t>(comp)]);
      CHECK(std::abs(acc) < 1e-12);
    }
  }
}

TEST_CASE("top-k slice keeps unrenormalized values and renormalizes for sampling") {
  RngStream rng(29, 0);
  LastLayer layer = random_layer(6, 3, rng, 1.0);
  DenseVec h = random_features(3, rng);
  ActionDistribution dist = action_distribution(layer, h, 3);
  REQUIRE(dist.topk.nnz() == 3);
  CHECK_FALSE(dist.full_support);

  // Values are the temperature-1 probabilities themselves.
  for (const auto& e : dist.topk.entries())
    CHECK(e.value == dist.full_probs[static_cast<std::size_t>(e.index)]);

  // Support holds the 3 largest probabilities.
  double min_kept = 1.0;
  for (const auto& e : dist.topk.entries()) min_kept = std::min(min_kept, e.value);
  for (std::int64_t a = 0; a < 6; ++a) {
    if (dist.topk.at(a) == 0.0)
      CHECK(dist.full_probs[static_cast<std::size_t>(a)] <= min_kept);
  }

  DenseVec sampling = dist.sampling_probs(0.9);
  double sum = 0.0;
  for (double p : sampling) sum += p;
  CHECK(sum == Catch::Approx(1.0).margin(1e-12));

  // top_k = K covers the full support.
  ActionDistribution full = action_distribution(layer, h, 6);
  CHECK(full.topk.nnz() == 6);
  CHECK(full.full_support);

  CHECK_THROWS_AS(action_distribution(layer, h, 0), InvalidInputError);
  CHECK_THROWS_AS(action_distribution(layer, h, 7), InvalidInputError);
}

TEST_CASE("apply_update touches only the listed rows") {
  RngStream rng(31, 0);
  LastLayer layer = random_layer(5, 3, rng);
  RowSparseMatrix delta(5, 3);
  delta.add_to_row(2, 1.0, DenseVec{0.5, -0.25, 1.0});

  LastLayer unchanged = apply_update(layer, delta, 0.0);
  CHECK(unchanged.weights() == layer.weights());

  LastLayer bumped = apply_update(layer, delta, 2.0);
  for (std::int64_t r = 0; r < 5; ++r)
    for (std::int64_t j = 0; j < 3; ++j) {
      if (r == 2) continue;
      CHECK(bumped.weight(r, j) == layer.weight(r, j));  // bitwise
    }
  CHECK(bumped.weight(2, 0) == layer.weight(2, 0) + 1.0);

  // apply then un-apply returns within 1e-15 per entry
  LastLayer restored = apply_update(bumped, delta, -2.0);
  for (std::int64_t r = 0; r < 5; ++r)
    for (std::int64_t j = 0; j < 3; ++j)
      CHECK(restored.weight(r, j) ==
            Catch::Approx(layer.weight(r, j)).margin(1e-15));

  RowSparseMatrix bad_rows(7, 3);
  bad_rows.add_to_row(6, 1.0, DenseVec{1, 1, 1});
  CHECK_THROWS_AS(apply_update(layer, bad_rows, 1.0), InvalidInputError);
  RowSparseMatrix bad_cols(5, 2);
  bad_cols.add_to_row(0, 1.0, DenseVec{1, 1});
  CHECK_THROWS_AS(apply_update(layer, bad_cols, 1.0), InvalidInputError);
}

TEST_CASE("sampled tokens come from the top-k support with matching logprob") {
  Policy policy;
  policy.encoder = FeatureEncoder(6, 4, 2, Nonlinearity::kTanh, 77);
  RngStream wrng(78, 0);
  policy.layer = random_layer(6, 4, wrng, 0.5);
  policy.top_k = 3;
  policy.temperature = 0.9;

  RngStream rng(55, 0);
  TokenSeq state{0, 1};
  for (int i = 0; i < 200; ++i) {
    SampledToken tok = sample_token(policy, state, rng);
    CHECK(tok.topk_probs.at(tok.action) > 0.0);
    // current_logprob_for_ratio reproduces the behavior logprob bitwise
    // while the layer is unchanged.
    const double lp = current_logprob_for_ratio(policy, tok.features,
                                                tok.topk_probs, tok.action);
    CHECK(lp == tok.behavior_logprob);
  }

  policy.behavior_mode = BehaviorLogprobMode::kFull;
  SampledToken tok = sample_token(policy, state, rng);
  const double lp_full = current_logprob_for_ratio(policy, tok.features,
                                                   tok.topk_probs, tok.action);
  CHECK(lp_full == tok.behavior_logprob);
  CHECK(std::exp(tok.behavior_logprob) ==
        Catch::Approx(action_distribution(policy.layer, tok.features, 6)
                          .full_probs[static_cast<std::size_t>(tok.action)])
            .margin(1e-12));
}
