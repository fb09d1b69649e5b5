#include "capo/env.hpp"

#include <catch2/catch_amalgamated.hpp>
#include <cmath>

#include "capo/errors.hpp"
#include "capo/policy.hpp"

using namespace capo;

namespace {

Policy uniform_policy(const EnvSpec& spec, std::int64_t d = 4,
                      std::uint64_t seed = 9) {
  Policy p;
  p.encoder = FeatureEncoder(spec.vocab_size, d, 2, Nonlinearity::kTanh, seed);
  p.layer = LastLayer(spec.vocab_size, d);  // zero weights -> uniform
  p.top_k = spec.vocab_size;
  p.temperature = 1.0;
  return p;
}

// Layer whose softmax puts (numerically) all mass on `target` at feature h.
LastLayer saturated_layer(std::int64_t K, const DenseVec& h,
                          std::int64_t target) {
  LastLayer layer(K, static_cast<std::int64_t>(h.size()));
  double h2 = 0.0;
  for (double x : h) h2 += x * x;
  for (std::int64_t r = 0; r < K; ++r) {
    if (r == target) continue;
    for (std::size_t j = 0; j < h.size(); ++j)
      layer.set_weight(r, static_cast<std::int64_t>(j), -400.0 * h[j] / h2);
  }
  return layer;
}

}  // namespace

TEST_CASE("reset draws prompts from the family alphabet, pad excluded") {
  EnvSpec spec;
  spec.family = PromptFamily::kCopy;
  spec.vocab_size = 4;
  spec.prompt_length = 3;
  RngStream rng(5, 1);
  TokenSeq prompt = reset(spec, rng);
  REQUIRE(prompt.size() == 3);
  for (auto t : prompt) {
    CHECK(t >= 0);
    CHECK(t < 3);  // pad token K-1 never appears in prompts
  }

  RngStream again(5, 1);
  CHECK(reset(spec, again) == prompt);

  EnvSpec mod;
  mod.family = PromptFamily::kModularSum;
  mod.vocab_size = 10;
  mod.prompt_length = 2;
  RngStream r2(6, 0);
  TokenSeq ab = reset(mod, r2);
  REQUIRE(ab.size() == 2);
  CHECK(ab[0] < 10);
  CHECK(ab[1] < 10);
}

TEST_CASE("step applies the verification reward at answer completion") {
  EnvSpec spec;
  spec.family = PromptFamily::kCopy;
  spec.vocab_size = 4;
  spec.prompt_length = 2;
  spec.horizon = 4;

  TokenSeq state{2, 1, 2};  // prompt [2,1], generated [2]
  StepResult good = step(spec, state, 1);
  CHECK(good.done);
  CHECK(good.reward == 1.0);
  StepResult bad = step(spec, state, 0);
  CHECK(bad.done);
  CHECK(bad.reward == 0.0);
  CHECK_THROWS_AS(step(spec, state, 4), InvalidInputError);

  EnvSpec parity;
  parity.family = PromptFamily::kParity;
  parity.vocab_size = 4;
  parity.prompt_length = 2;
  StepResult even = step(parity, TokenSeq{1, 1}, 0);
  CHECK(even.done);
  CHECK(even.reward == 1.0);  // 1+1 is even
  StepResult wrong = step(parity, TokenSeq{1, 1}, 1);
  CHECK(wrong.reward == 0.0);

  EnvSpec mod;
  mod.family = PromptFamily::kModularSum;
  mod.vocab_size = 5;
  mod.prompt_length = 2;
  CHECK(step(mod, TokenSeq{3, 4}, 2).reward == 1.0);  // (3+4) mod 5
  CHECK(step(mod, TokenSeq{3, 4}, 3).reward == 0.0);
}

TEST_CASE("exact objective on the one-token copy task") {
  EnvSpec spec;
  spec.family = PromptFamily::kCopy;
  spec.vocab_size = 2;
  spec.prompt_length = 1;
  spec.horizon = 1;

  Policy p = uniform_policy(spec);
  CHECK(exact_objective(spec, p.encoder, p.layer) ==
        Catch::Approx(0.5).margin(1e-12));

  // Prompts are always [0] here; saturate on the right and the wrong token.
  DenseVec h = p.encoder.encode(TokenSeq{0});
  CHECK(exact_objective(spec, p.encoder, saturated_layer(2, h, 0)) ==
        Catch::Approx(1.0).margin(1e-12));
  CHECK(exact_objective(spec, p.encoder, saturated_layer(2, h, 1)) ==
        Catch::Approx(0.0).margin(1e-12));
}

TEST_CASE("exact objective rejects oversized enumerations") {
  EnvSpec spec;
  spec.family = PromptFamily::kCopy;
  spec.vocab_size = 8;
  spec.prompt_length = 8;
  spec.horizon = 8;
  Policy p = uniform_policy(spec);
  CHECK_THROWS_AS(exact_objective(spec, p.encoder, p.layer), ResourceError);
}

TEST_CASE("group batches have the requested shape") {
  EnvSpec spec;
  spec.family = PromptFamily::kCopy;
  spec.vocab_size = 8;
  spec.prompt_length = 2;
  spec.horizon = 4;
  Policy p = uniform_policy(spec, 4);
  p.top_k = 4;
  p.temperature = 0.9;

  RngStream rng(1, 0);
  GroupBatch batch = sample_group_batch(spec, p, 8, 12, rng);
  CHECK(batch.n_trajectories() == 96);
  REQUIRE(batch.groups.size() == 12);
  for (const auto& g : batch.groups) {
    REQUIRE(g.trajectories.size() == 8);
    for (const auto& t : g.trajectories) {
      CHECK(t.prompt == g.prompt);
      CHECK(t.length() <= static_cast<std::size_t>(spec.prompt_length +
                                                   spec.horizon));
      t.check_snapshots();
      for (double r : t.rewards) {
        CHECK(r >= -spec.reward_bound);
        CHECK(r <= spec.reward_bound);
      }
    }
  }

  RngStream rng2(2, 0);
  GroupBatch tiny = sample_group_batch(spec, p, 2, 1, rng2);
  CHECK(tiny.n_trajectories() == 2);
  CHECK(tiny.groups[0].trajectories[0].prompt ==
        tiny.groups[0].trajectories[1].prompt);

  RngStream rng3(3, 0);
  CHECK_THROWS_AS(sample_group_batch(spec, p, 1, 4, rng3), InvalidInputError);
}

TEST_CASE("a deterministic policy yields identical group members") {
  EnvSpec spec;
  spec.family = PromptFamily::kCopy;
  spec.vocab_size = 2;
  spec.prompt_length = 1;
  spec.horizon = 1;
  Policy p = uniform_policy(spec);
  DenseVec h = p.encoder.encode(TokenSeq{0});
  p.layer = saturated_layer(2, h, 0);
  p.top_k = 2;

  RngStream rng(4, 0);
  GroupBatch batch = sample_group_batch(spec, p, 8, 1, rng);
  for (const auto& t : batch.groups[0].trajectories) {
    CHECK(t.actions == batch.groups[0].trajectories[0].actions);
    CHECK(t.rewards[0] == 1.0);
  }
}

TEST_CASE("sampling determinism: same stream, same batch") {
  EnvSpec spec;
  spec.family = PromptFamily::kParity;
  spec.vocab_size = 4;
  spec.prompt_length = 2;
  spec.horizon = 2;
  Policy p = uniform_policy(spec);
  p.top_k = 3;

  RngStream a(77, 3), b(77, 3);
  GroupBatch ba = sample_group_batch(spec, p, 4, 5, a);
  GroupBatch bb = sample_group_batch(spec, p, 4, 5, b);
  REQUIRE(ba.groups.size() == bb.groups.size());
  for (std::size_t g = 0; g < ba.groups.size(); ++g) {
    CHECK(ba.groups[g].prompt == bb.groups[g].prompt);
    for (std::size_t i = 0; i < ba.groups[g].trajectories.size(); ++i) {
      CHECK(ba.groups[g].trajectories[i].actions ==
            bb.groups[g].trajectories[i].actions);
      CHECK(ba.groups[g].trajectories[i].logprob_behavior ==
            bb.groups[g].trajectories[i].logprob_behavior);
    }
  }
}

TEST_CASE("Monte Carlo returns converge to the exact objective") {
  const PromptFamily families[] = {PromptFamily::kCopy, PromptFamily::kParity,
                                   PromptFamily::kModularSum};
  for (PromptFamily family : families) {
    EnvSpec spec;
    spec.family = family;
    spec.vocab_size = family == PromptFamily::kModularSum ? 4 : 3;
    spec.prompt_length = family == PromptFamily::kCopy ? 1 : 2;
    spec.horizon = 2;
    spec.discount = 1.0;

    Policy p = uniform_policy(spec, 4, 31);
    RngStream wrng(13, static_cast<std::uint64_t>(family));
    for (std::int64_t r = 0; r < spec.vocab_size; ++r)
      for (std::int64_t j = 0; j < 4; ++j)
        p.layer.set_weight(r, j, 0.4 * wrng.normal());
    p.top_k = spec.vocab_size;  // sampling distribution == true policy
    p.temperature = 1.0;

    const double exact = exact_objective(spec, p.encoder, p.layer);
    RngStream rng(101, static_cast<std::uint64_t>(family));
    const int n = 10000;
    GroupBatch batch = sample_group_batch(spec, p, 10, n / 10, rng);
    double mean = 0.0, sq = 0.0;
    for (const auto& g : batch.groups)
      for (const auto& t : g.trajectories) {
        const double ret = t.total_return();
        mean += ret;
        sq += ret * ret;
      }
    mean /= n;
    const double var = sq / n - mean * mean;
    const double bound = 3.0 * std::sqrt(var / n) + 1e-9;
    INFO("family " << to_string(family) << " exact " << exact << " mc "
                   << mean);
    CHECK(std::abs(mean - exact) <= bound);
  }
}
