#include "capo/oracle.hpp"

#include <catch2/catch_amalgamated.hpp>
#include <cmath>

#include "capo/env.hpp"
#include "capo/errors.hpp"
#include "capo/estimators.hpp"
#include "capo/policy.hpp"

using namespace capo;

namespace {

TokenGradFactor make_factor(const DenseVec& pi, std::int64_t action,
                            DenseVec h, double advantage, double weight) {
  TokenGradFactor f;
  f.pi = SparseVec::from_dense(pi);
  f.action = action;
  f.u = policy_error_vector(f.pi, action);
  f.h = std::move(h);
  f.advantage = advantage;
  f.discount_weight = weight;
  return f;
}

std::vector<TokenGradFactor> random_factors(RngStream& rng, std::int64_t K,
                                            std::int64_t d, int n) {
  std::vector<TokenGradFactor> out;
  for (int i = 0; i < n; ++i) {
    DenseVec logits(static_cast<std::size_t>(K));
    for (double& l : logits) l = rng.uniform(-2.0, 2.0);
    DenseVec pi = oracle::softmax(logits);
    DenseVec h(static_cast<std::size_t>(d));
    for (double& x : h) x = rng.uniform(-1.5, 1.5);
    out.push_back(make_factor(pi, static_cast<std::int64_t>(rng.uniform01() * K),
                              std::move(h), rng.uniform(-2.0, 2.0),
                              rng.uniform01()));
  }
  return out;
}

RowSparseMatrix random_step_rows(RngStream& rng, std::int64_t K,
                                 std::int64_t d) {
  RowSparseMatrix rows(K, d);
  for (std::int64_t r = 0; r < K; ++r) {
    if (rng.uniform01() < 0.25) continue;
    DenseVec& row = rows.row(r);
    for (double& x : row) x = rng.uniform(-1.0, 1.0);
  }
  return rows;
}

LastLayer random_layer(std::int64_t K, std::int64_t d, RngStream& rng,
                       double scale = 1.0) {
  LastLayer layer(K, d);
  for (std::int64_t r = 0; r < K; ++r)
    for (std::int64_t j = 0; j < d; ++j)
      layer.set_weight(r, j, scale * rng.normal());
  return layer;
}

}  // namespace

TEST_CASE("dense fisher on the worked case") {
  std::vector<TokenGradFactor> factors{
      make_factor({0.5, 0.5}, 0, {1.0}, 1.0, 1.0)};
  oracle::DenseCurvature f = oracle::dense_fisher(factors, 2, 1);
  CHECK(f.matrix.at(0, 0) == Catch::Approx(0.25).margin(1e-15));
  CHECK(f.matrix.at(0, 1) == Catch::Approx(-0.25).margin(1e-15));
  CHECK(f.matrix.at(1, 0) == Catch::Approx(-0.25).margin(1e-15));
  CHECK(f.matrix.at(1, 1) == Catch::Approx(0.25).margin(1e-15));

  RowSparseMatrix u(2, 1);
  u.row(0) = DenseVec{1.0};
  u.row(1) = DenseVec{-1.0};
  CHECK(oracle::quadratic_form(f, u) == Catch::Approx(1.0).margin(1e-12));

  // zero features -> zero matrix
  std::vector<TokenGradFactor> zero{make_factor({0.5, 0.5}, 0, {0.0}, 1.0, 1.0)};
  oracle::DenseCurvature fz = oracle::dense_fisher(zero, 2, 1);
  CHECK(fz.matrix.at(0, 0) == 0.0);
  CHECK(fz.matrix.at(1, 1) == 0.0);
}

TEST_CASE("dense hessian vanishes on the worked case") {
  std::vector<TokenGradFactor> factors{
      make_factor({0.5, 0.5}, 0, {1.0}, 1.0, 1.0)};
  oracle::DenseCurvature h = oracle::dense_hessian(factors, 2, 1);
  for (std::int64_t i = 0; i < 2; ++i)
    for (std::int64_t j = 0; j < 2; ++j)
      CHECK(h.matrix.at(i, j) == Catch::Approx(0.0).margin(1e-15));

  std::vector<TokenGradFactor> no_adv{
      make_factor({0.3, 0.7}, 1, {1.0}, 0.0, 1.0)};
  oracle::DenseCurvature hz = oracle::dense_hessian(no_adv, 2, 1);
  CHECK(hz.matrix.at(0, 0) == 0.0);
  CHECK(hz.matrix.at(1, 1) == 0.0);
}

TEST_CASE("dense guard rejects oversized instances") {
  std::vector<TokenGradFactor> factors{
      make_factor({0.5, 0.5}, 0, DenseVec(33, 0.1), 1.0, 1.0)};
  CHECK_THROWS_AS(oracle::dense_fisher(factors, 2, 33), ResourceError);
}

TEST_CASE("directional estimates match dense quadratic forms") {
  RngStream rng(61, 0);
  for (int trial = 0; trial < 30; ++trial) {
    const std::int64_t K = 2 + static_cast<std::int64_t>(rng.uniform01() * 7);
    const std::int64_t d = 1 + static_cast<std::int64_t>(rng.uniform01() * 4);
    auto factors = random_factors(rng, K, d, 1 + trial % 8);
    CandidateStep step = make_candidate_step(random_step_rows(rng, K, d));

    oracle::DenseCurvature fisher = oracle::dense_fisher(factors, K, d);
    oracle::DenseCurvature hessian = oracle::dense_hessian(factors, K, d);
    CHECK(directional_fisher(factors, step) ==
          Catch::Approx(oracle::quadratic_form(fisher, step.rows))
              .margin(1e-10));
    CHECK(directional_hessian(factors, step) ==
          Catch::Approx(oracle::quadratic_form(hessian, step.rows))
              .margin(1e-10));
  }
}

TEST_CASE("kronecker vector identity") {
  RngStream rng(67, 0);
  for (int trial = 0; trial < 50; ++trial) {
    const std::int64_t K = 2 + static_cast<std::int64_t>(rng.uniform01() * 5);
    const std::int64_t d = 1 + static_cast<std::int64_t>(rng.uniform01() * 3);
    DenseVec u(static_cast<std::size_t>(K));
    for (double& x : u) x = rng.uniform(-1.0, 1.0);
    DenseVec h(static_cast<std::size_t>(d));
    for (double& x : h) x = rng.uniform(-1.0, 1.0);
    RowSparseMatrix U = random_step_rows(rng, K, d);
    CHECK(oracle::kronecker_identity_error(u, h, U) < 1e-10);
  }
}

TEST_CASE("finite differences confirm the analytic log-prob gradient") {
  RngStream rng(71, 0);
  for (int trial = 0; trial < 20; ++trial) {
    const std::int64_t K = 2 + static_cast<std::int64_t>(rng.uniform01() * 5);
    const std::int64_t d = 1 + static_cast<std::int64_t>(rng.uniform01() * 3);
    LastLayer layer = random_layer(K, d, rng);
    DenseVec h(static_cast<std::size_t>(d));
    for (double& x : h) x = rng.uniform(-1.0, 1.0);
    const auto action = static_cast<std::int64_t>(rng.uniform01() * K);
    CHECK(oracle::fd_gradient_check(layer, h, action, 1e-5) < 1e-6);
  }
  LastLayer layer(2, 1);
  DenseVec h{1.0};
  CHECK_THROWS_AS(oracle::fd_gradient_check(layer, h, 0, 1e-2),
                  InvalidInputError);
}

TEST_CASE("finite difference error shrinks quadratically in h_fd") {
  RngStream rng(73, 0);
  LastLayer layer = random_layer(4, 2, rng, 1.2);
  DenseVec h{0.7, -0.4};
  const double e1 = oracle::fd_gradient_check(layer, h, 1, 1e-3);
  const double e2 = oracle::fd_gradient_check(layer, h, 1, 5e-4);
  REQUIRE(e1 > 1e-11);  // above the roundoff floor
  const double ratio = e1 / e2;
  CHECK(ratio > 2.5);
  CHECK(ratio < 6.0);
}

TEST_CASE("exact kl values and positivity") {
  LastLayer uniform(2, 1);
  DenseVec h{1.0};
  std::vector<DenseVec> states{h};
  CHECK(oracle::exact_kl(uniform, uniform, states) == 0.0);

  // pi = (0.5, 0.5) against pi' = (0.6, 0.4)
  LastLayer tilted(2, 1);
  tilted.set_weight(0, 0, std::log(1.5));
  CHECK(oracle::exact_kl(uniform, tilted, states) ==
        Catch::Approx(0.020410997260127572).margin(1e-9));

  RngStream rng(79, 0);
  for (int trial = 0; trial < 50; ++trial) {
    LastLayer a = random_layer(3, 2, rng);
    LastLayer b = random_layer(3, 2, rng);
    std::vector<DenseVec> ss{{rng.uniform(-1, 1), rng.uniform(-1, 1)}};
    CHECK(oracle::exact_kl(a, b, ss) >= 0.0);
  }
}

TEST_CASE("operator norm via power iteration") {
  oracle::DenseMatrix zero(3);
  CHECK(oracle::operator_norm(zero) == 0.0);

  std::vector<TokenGradFactor> factors{
      make_factor({0.5, 0.5}, 0, {1.0}, 1.0, 1.0)};
  oracle::DenseCurvature fisher = oracle::dense_fisher(factors, 2, 1);
  CHECK(oracle::operator_norm(fisher) == Catch::Approx(0.5).epsilon(1e-7));

  oracle::DenseMatrix scaled(4);
  for (std::int64_t i = 0; i < 4; ++i) scaled.at(i, i) = -2.5;
  CHECK(oracle::operator_norm(scaled) == Catch::Approx(2.5).epsilon(1e-7));
}

TEST_CASE("dense fisher is positive semidefinite") {
  RngStream rng(83, 0);
  for (int trial = 0; trial < 25; ++trial) {
    const std::int64_t K = 2 + static_cast<std::int64_t>(rng.uniform01() * 6);
    const std::int64_t d = 1 + static_cast<std::int64_t>(rng.uniform01() * 3);
    auto factors = random_factors(rng, K, d, 3);
    oracle::DenseCurvature fisher = oracle::dense_fisher(factors, K, d);
    // x' F x >= -1e-10 for random probes
    for (int probe = 0; probe < 10; ++probe) {
      RowSparseMatrix x = random_step_rows(rng, K, d);
      CHECK(oracle::quadratic_form(fisher, x) >= -1e-10);
    }
  }
}

TEST_CASE("identity errors stay at solver precision") {
  RngStream rng(89, 0);
  for (int trial = 0; trial < 40; ++trial) {
    const std::int64_t K = 2 + static_cast<std::int64_t>(rng.uniform01() * 6);
    const std::int64_t d = 1 + static_cast<std::int64_t>(rng.uniform01() * 3);
    LastLayer layer = random_layer(K, d, rng, 1.5);
    DenseVec h(static_cast<std::size_t>(d));
    for (double& x : h) x = rng.uniform(-1.0, 1.0);
    CHECK(oracle::grad_log_prob_identity_error(layer, h) < 1e-12);
    CHECK(oracle::fisher_identity_error(layer, h) < 1e-10);
  }
}

TEST_CASE("kl remainder scales cubically") {
  RngStream rng(97, 0);
  const std::int64_t K = 4, d = 3;
  LastLayer layer = random_layer(K, d, rng, 0.8);
  std::vector<DenseVec> states;
  for (int s = 0; s < 5; ++s) {
    DenseVec h(static_cast<std::size_t>(d));
    for (double& x : h) x = rng.uniform(-1.0, 1.0);
    states.push_back(std::move(h));
  }
  RowSparseMatrix rows = random_step_rows(rng, K, d);
  const double norm = rows.norm();
  rows.scale(0.25 / norm);
  CandidateStep step = make_candidate_step(std::move(rows));
  auto fit = oracle::kl_remainder_check(layer, states, step,
                                        {1.0, 0.5, 0.25, 0.125});
  INFO("kl slope " << fit.slope);
  CHECK_FALSE(fit.exact);
  CHECK(fit.slope > 2.7);
  CHECK(fit.slope < 3.3);

  // zero step reports exact
  CandidateStep zero = make_candidate_step(RowSparseMatrix(K, d));
  auto exact_fit =
      oracle::kl_remainder_check(layer, states, zero, {1.0, 0.5, 0.25});
  CHECK(exact_fit.exact);
}

TEST_CASE("objective remainder scales cubically on a one-step task") {
  EnvSpec spec;
  spec.family = PromptFamily::kParity;
  spec.vocab_size = 4;
  spec.prompt_length = 2;
  spec.horizon = 1;
  FeatureEncoder encoder(4, 3, 2, Nonlinearity::kTanh, 111);
  RngStream rng(103, 0);
  LastLayer layer = random_layer(4, 3, rng, 0.7);
  RowSparseMatrix rows = random_step_rows(rng, 4, 3);
  rows.scale(0.3 / rows.norm());
  CandidateStep step = make_candidate_step(std::move(rows));
  auto fit = oracle::objective_remainder_check(spec, encoder, layer, step,
                                               {1.0, 0.5, 0.25, 0.125});
  INFO("objective slope " << fit.slope);
  CHECK_FALSE(fit.exact);
  CHECK(fit.slope > 2.7);
  CHECK(fit.slope < 3.3);
}

TEST_CASE("truncation bias is measured and bounded") {
  RngStream rng(107, 0);
  for (int trial = 0; trial < 20; ++trial) {
    const std::int64_t K = 6, d = 2;
    auto factors = random_factors(rng, K, d, 4);
    CandidateStep step = make_candidate_step(random_step_rows(rng, K, d));
    auto report = oracle::truncation_bias_check(factors, step, 3);
    CHECK(report.fisher_bias <= report.fisher_bound + 1e-12);
    CHECK(report.hessian_bias <= report.hessian_bound + 1e-12);
  }
}

TEST_CASE("exact state factors carry unit total weight") {
  RngStream rng(109, 0);
  LastLayer layer = random_layer(3, 2, rng);
  std::vector<DenseVec> states{{0.2, -0.4}, {0.9, 0.1}};
  auto factors = oracle::exact_state_factors(layer, states);
  double sw = 0.0;
  for (const auto& f : factors) sw += f.sample_weight;
  CHECK(sw == Catch::Approx(1.0).margin(1e-12));
}
