#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <ostream>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "capo/env.hpp"
#include "capo/errors.hpp"
#include "capo/estimators.hpp"
#include "capo/optimizer.hpp"
#include "capo/oracle.hpp"
#include "capo/policy.hpp"
#include "capo/stepmodel.hpp"

namespace capo {

struct CheckResult {
  std::string name;
  double measured = 0.0;
  double tolerance = 0.0;
  bool pass = false;
  std::string detail;
};

struct CheckReport {
  std::vector<CheckResult> checks;

  bool all_pass() const {
    for (const auto& c : checks)
      if (!c.pass) return false;
    return true;
  }

  void append(const CheckReport& other) {
    checks.insert(checks.end(), other.checks.begin(), other.checks.end());
  }

  nlohmann::json to_json() const {
    nlohmann::json arr = nlohmann::json::array();
    for (const auto& c : checks) {
      nlohmann::json j;
      j["name"] = c.name;
      j["measured"] = c.measured;
      j["tolerance"] = c.tolerance;
      j["pass"] = c.pass;
      if (!c.detail.empty()) j["detail"] = c.detail;
      arr.push_back(j);
    }
    return arr;
  }

  void print(std::ostream& os) const {
    for (const auto& c : checks) {
      os << (c.pass ? "[PASS] " : "[FAIL] ") << c.name
         << "  measured=" << c.measured << " tol=" << c.tolerance;
      if (!c.detail.empty()) os << "  (" << c.detail << ")";
      os << '\n';
    }
  }
};

namespace verify_detail {

inline CheckResult bounded(std::string name, double measured, double tol,
                           std::string detail = "") {
  CheckResult r;
  r.name = std::move(name);
  r.measured = measured;
  r.tolerance = tol;
  r.pass = measured <= tol;
  r.detail = std::move(detail);
  return r;
}

inline CheckResult in_range(std::string name, double measured, double lo,
                            double hi, std::string detail = "") {
  CheckResult r;
  r.name = std::move(name);
  r.measured = measured;
  r.tolerance = hi;
  r.pass = measured >= lo && measured <= hi;
  if (detail.empty())
    detail = "expected in [" + std::to_string(lo) + ", " + std::to_string(hi) + "]";
  r.detail = std::move(detail);
  return r;
}

inline LastLayer random_layer(std::int64_t K, std::int64_t d, RngStream& rng,
                              double scale = 1.0) {
  LastLayer layer(K, d);
  for (std::int64_t r = 0; r < K; ++r)
    for (std::int64_t j = 0; j < d; ++j)
      layer.set_weight(r, j, scale * rng.normal());
  return layer;
}

inline DenseVec random_features(std::int64_t d, RngStream& rng) {
  DenseVec h(static_cast<std::size_t>(d));
  for (double& x : h) x = rng.uniform(-1.0, 1.0);
  return h;
}

inline RowSparseMatrix random_step_rows(RngStream& rng, std::int64_t K,
                                        std::int64_t d) {
  RowSparseMatrix rows(K, d);
  for (std::int64_t r = 0; r < K; ++r) {
    if (rng.uniform01() < 0.25) continue;
    DenseVec& row = rows.row(r);
    for (double& x : row) x = rng.uniform(-1.0, 1.0);
  }
  return rows;
}

inline std::vector<TokenGradFactor> random_factors(RngStream& rng,
                                                   std::int64_t K,
                                                   std::int64_t d, int n) {
  std::vector<TokenGradFactor> out;
  for (int i = 0; i < n; ++i) {
    LastLayer layer = random_layer(K, d, rng, 1.2);
    DenseVec h = random_features(d, rng);
    TokenGradFactor f;
    f.h = h;
    f.pi = SparseVec::from_dense(action_distribution(layer, h, 1).full_probs);
    f.action = static_cast<std::int64_t>(rng.uniform01() * K);
    f.u = policy_error_vector(f.pi, f.action);
    f.advantage = rng.uniform(-2.0, 2.0);
    f.discount_weight = rng.uniform01();
    out.push_back(std::move(f));
  }
  return out;
}

}  // namespace verify_detail

// ---------------------------------------------------------------------------
// grad suite: finite-difference exactness and the score-mean-zero identity
// ---------------------------------------------------------------------------

inline CheckReport verify_grad(int n_policies = 100, std::uint64_t seed = 2024) {
  using namespace verify_detail;
  CheckReport report;
  RngStream rng(seed, 0);
  double worst_fd = 0.0;
  for (int i = 0; i < n_policies; ++i) {
    const std::int64_t K = 2 + static_cast<std::int64_t>(rng.uniform01() * 7);
    const std::int64_t d = 1 + static_cast<std::int64_t>(rng.uniform01() * 4);
    LastLayer layer = random_layer(K, d, rng);
    DenseVec h = random_features(d, rng);
    const auto action = static_cast<std::int64_t>(rng.uniform01() * K);
    worst_fd = std::max(worst_fd,
                        oracle::fd_gradient_check(layer, h, action, 1e-5));
  }
  report.checks.push_back(bounded("fd_gradient_max_rel_error", worst_fd, 1e-6,
                                  std::to_string(n_policies) + " random policies"));

  // central-difference error order: halving h_fd shrinks error ~4x
  {
    RngStream orng(seed, 1);
    LastLayer layer = random_layer(5, 3, orng, 1.3);
    DenseVec h = random_features(3, orng);
    double e1 = oracle::fd_gradient_check(layer, h, 2, 1e-3);
    double e2 = oracle::fd_gradient_check(layer, h, 2, 5e-4);
    report.checks.push_back(
        in_range("fd_error_order_ratio", e2 > 0 ? e1 / e2 : 4.0, 2.5, 6.0));
  }

  double worst_id = 0.0;
  for (int i = 0; i < n_policies; ++i) {
    const std::int64_t K = 2 + static_cast<std::int64_t>(rng.uniform01() * 7);
    LastLayer layer = random_layer(K, 3, rng, 1.5);
    DenseVec h = random_features(3, rng);
    worst_id = std::max(worst_id, oracle::grad_log_prob_identity_error(layer, h));
  }
  report.checks.push_back(
      bounded("grad_log_prob_identity_error", worst_id, 1e-10));
  return report;
}

// ---------------------------------------------------------------------------
// curvature suite: dense equivalence, identities, positivity, truncation
// ---------------------------------------------------------------------------

// Injection points so a deliberately corrupted estimator makes the suite
// fail (mutation check).
struct CurvatureHooks {
  std::function<double(std::span<const TokenGradFactor>, const CandidateStep&)>
      dir_fisher =
          [](std::span<const TokenGradFactor> f, const CandidateStep& s) {
            return directional_fisher(f, s);
          };
  std::function<double(std::span<const TokenGradFactor>, const CandidateStep&)>
      dir_hessian =
          [](std::span<const TokenGradFactor> f, const CandidateStep& s) {
            return directional_hessian(f, s);
          };
};

inline CheckReport verify_curvature(int n_instances = 100,
                                    std::uint64_t seed = 4096,
                                    const CurvatureHooks& hooks = {}) {
  using namespace verify_detail;
  CheckReport report;
  RngStream rng(seed, 0);
  double worst_fisher = 0.0, worst_hessian = 0.0, min_eig = 0.0;
  for (int i = 0; i < n_instances; ++i) {
    const std::int64_t K = 2 + static_cast<std::int64_t>(rng.uniform01() * 7);
    const std::int64_t d = 1 + static_cast<std::int64_t>(rng.uniform01() * 4);
    const int n = 1 + static_cast<int>(rng.uniform01() * 32);
    auto factors = random_factors(rng, K, d, n);
    CandidateStep step = make_candidate_step(random_step_rows(rng, K, d));
    auto fisher = oracle::dense_fisher(factors, K, d);
    auto hessian = oracle::dense_hessian(factors, K, d);
    worst_fisher =
        std::max(worst_fisher, std::abs(hooks.dir_fisher(factors, step) -
                                        oracle::quadratic_form(fisher, step.rows)));
    worst_hessian =
        std::max(worst_hessian, std::abs(hooks.dir_hessian(factors, step) -
                                         oracle::quadratic_form(hessian, step.rows)));
    min_eig = std::min(min_eig, oracle::min_eigenvalue(fisher.matrix));
  }
  report.checks.push_back(
      bounded("directional_fisher_vs_dense", worst_fisher, 1e-10,
              std::to_string(n_instances) + " instances"));
  report.checks.push_back(
      bounded("directional_hessian_vs_dense", worst_hessian, 1e-10,
              std::to_string(n_instances) + " instances"));
  report.checks.push_back(
      bounded("dense_fisher_min_eigenvalue", -min_eig, 1e-10, "PSD check"));

  double worst_kron = 0.0;
  for (int i = 0; i < n_instances; ++i) {
    const std::int64_t K = 2 + static_cast<std::int64_t>(rng.uniform01() * 5);
    const std::int64_t d = 1 + static_cast<std::int64_t>(rng.uniform01() * 3);
    DenseVec u(static_cast<std::size_t>(K));
    for (double& x : u) x = rng.uniform(-1.0, 1.0);
    DenseVec h = random_features(d, rng);
    worst_kron = std::max(worst_kron, oracle::kronecker_identity_error(
                                           u, h, random_step_rows(rng, K, d)));
  }
  report.checks.push_back(bounded("kronecker_vector_identity", worst_kron, 1e-10));

  double worst_fisher_id = 0.0;
  for (int i = 0; i < 50; ++i) {
    const std::int64_t K = 2 + static_cast<std::int64_t>(rng.uniform01() * 6);
    const std::int64_t d = 1 + static_cast<std::int64_t>(rng.uniform01() * 3);
    LastLayer layer = random_layer(K, d, rng, 1.4);
    worst_fisher_id = std::max(
        worst_fisher_id,
        oracle::fisher_identity_error(layer, random_features(d, rng)));
  }
  report.checks.push_back(bounded("fisher_identity_error", worst_fisher_id, 1e-10));

  // m_F and the per-state Fisher quadratic never go negative.
  double min_mf = 0.0, min_vfv = 0.0;
  for (int i = 0; i < 2000; ++i) {
    const std::int64_t K = 2 + static_cast<std::int64_t>(rng.uniform01() * 6);
    const std::int64_t d = 1 + static_cast<std::int64_t>(rng.uniform01() * 3);
    auto factors = random_factors(rng, K, d, 1 + static_cast<int>(rng.uniform01() * 4));
    CandidateStep step = make_candidate_step(random_step_rows(rng, K, d));
    min_mf = std::min(min_mf, shift_estimate(factors, step).m_f);
    // (u'v)^2 - dirH on a single unit-advantage factor isolates v'F(s)v.
    TokenGradFactor probe = factors[0];
    probe.advantage = 1.0;
    probe.discount_weight = 1.0;
    std::vector<TokenGradFactor> single{probe};
    const double fisher_part = directional_fisher(single, step);
    const double hess_part = directional_hessian(single, step);
    min_vfv = std::min(min_vfv, fisher_part - hess_part);
  }
  report.checks.push_back(bounded("min_m_f_over_fuzz", -min_mf, 0.0));
  report.checks.push_back(bounded("min_state_fisher_quadratic", -min_vfv, 1e-12));

  double worst_trunc = 0.0;
  for (int i = 0; i < 25; ++i) {
    auto factors = random_factors(rng, 8, 2, 4);
    CandidateStep step = make_candidate_step(random_step_rows(rng, 8, 2));
    auto rep = oracle::truncation_bias_check(factors, step, 3);
    worst_trunc = std::max(worst_trunc,
                           rep.fisher_bias - rep.fisher_bound);
    worst_trunc = std::max(worst_trunc,
                           rep.hessian_bias - rep.hessian_bound);
  }
  report.checks.push_back(bounded("truncation_bias_within_bound", worst_trunc, 1e-12));
  return report;
}

// ---------------------------------------------------------------------------
// kl suite: exact KL values and cubic remainder orders
// ---------------------------------------------------------------------------

inline CheckReport verify_kl(std::uint64_t seed = 31337) {
  using namespace verify_detail;
  CheckReport report;
  {
    LastLayer uniform(2, 1);
    LastLayer tilted(2, 1);
    tilted.set_weight(0, 0, std::log(1.5));
    std::vector<DenseVec> states{DenseVec{1.0}};
    const double kl = oracle::exact_kl(uniform, tilted, states);
    report.checks.push_back(bounded("exact_kl_reference_value",
                                    std::abs(kl - 0.020410997260127572), 1e-9));
    report.checks.push_back(
        bounded("exact_kl_identical_policies",
                oracle::exact_kl(uniform, uniform, states), 0.0));
  }
  RngStream rng(seed, 0);
  double min_kl = 0.0;
  for (int i = 0; i < 200; ++i) {
    LastLayer a = random_layer(4, 2, rng);
    LastLayer b = random_layer(4, 2, rng);
    std::vector<DenseVec> states{random_features(2, rng)};
    min_kl = std::min(min_kl, oracle::exact_kl(a, b, states));
  }
  report.checks.push_back(bounded("exact_kl_nonnegative", -min_kl, 0.0));

  for (int inst = 0; inst < 3; ++inst) {
    RngStream irng(seed, 10 + static_cast<std::uint64_t>(inst));
    const std::int64_t K = 4, d = 3;
    LastLayer layer = random_layer(K, d, irng, 0.8);
    std::vector<DenseVec> states;
    for (int s = 0; s < 5; ++s) states.push_back(random_features(d, irng));
    RowSparseMatrix rows = random_step_rows(irng, K, d);
    rows.scale(0.25 / rows.norm());
    auto fit = oracle::kl_remainder_check(layer, states,
                                          make_candidate_step(std::move(rows)),
                                          {1.0, 0.5, 0.25, 0.125});
    report.checks.push_back(in_range(
        "kl_remainder_slope_" + std::to_string(inst), fit.slope, 2.7, 3.3));
  }

  for (int inst = 0; inst < 2; ++inst) {
    RngStream irng(seed, 20 + static_cast<std::uint64_t>(inst));
    EnvSpec spec;
    spec.family = PromptFamily::kParity;
    spec.vocab_size = 4;
    spec.prompt_length = 2;
    spec.horizon = 1;
    FeatureEncoder encoder(4, 3, 2, Nonlinearity::kTanh, 500 + inst);
    LastLayer layer = random_layer(4, 3, irng, 0.7);
    RowSparseMatrix rows = random_step_rows(irng, 4, 3);
    rows.scale(0.3 / rows.norm());
    auto fit = oracle::objective_remainder_check(
        spec, encoder, layer, make_candidate_step(std::move(rows)),
        {1.0, 0.5, 0.25, 0.125});
    report.checks.push_back(in_range(
        "objective_remainder_slope_" + std::to_string(inst), fit.slope, 2.7, 3.3));
  }
  return report;
}

// ---------------------------------------------------------------------------
// theorem suite: constants, aggregation inequality, empirical monotonicity
// ---------------------------------------------------------------------------

struct TheoremRunParams {
  EnvSpec spec;
  std::int64_t feature_dim = 8;
  std::uint64_t encoder_seed = 99;
  double delta_f = 1e-6;
  double lr = 1e-3;
  std::int64_t iterations = 200;
  std::int64_t group_size = 8;
  std::int64_t n_prompts = 6;
  std::uint64_t seed = 1;
  double hess_coeff = 0.5;  // theorem-statement variant of delta_h
  double slack = 1e-9;
};

struct TheoremRunResult {
  std::int64_t iterations = 0;
  std::int64_t commits = 0;
  std::int64_t violations = 0;
  double min_margin = std::numeric_limits<double>::infinity();
  double max_eps_adv = 0.0;
  double max_curvature_bound = 0.0;
};

// Trust-region run with thresholds derived per batch from measured
// quantities: eps_adv from the advantages, M from the dense model Hessian's
// operator norm, r from the proposed steps, omega = C sqrt(delta_F). Every
// committed update is checked against the enumerated objective.
inline TheoremRunResult run_theorem_check(const TheoremRunParams& params) {
  params.spec.validate();
  if (params.spec.vocab_size * params.feature_dim > oracle::kDenseGuard)
    throw InvalidInputError("run_theorem_check: K * d_i over the dense guard");
  Policy policy;
  policy.encoder = FeatureEncoder(params.spec.vocab_size, params.feature_dim,
                                  2, Nonlinearity::kTanh, params.encoder_seed);
  policy.layer = LastLayer(params.spec.vocab_size, params.feature_dim);
  policy.top_k = params.spec.vocab_size;  // sampling == the true policy
  policy.temperature = 1.0;

  StepModelState opt = StepModelState::make(
      StepKind::kSgd, params.lr, params.spec.vocab_size, params.feature_dim);

  ObjectiveParams obj;
  obj.kind = Objective::kReinforce;
  obj.baseline = ReinforceBaseline::kNone;  // keeps |A| <= r_bound
  obj.gamma = params.spec.discount;

  TheoremRunResult result;
  RngStream run_rng(params.seed, 0);
  for (std::int64_t it = 0; it < params.iterations; ++it) {
    RngStream iter_rng(params.seed, run_rng.next_u64());
    GroupBatch batch =
        sample_group_batch(params.spec, policy, params.group_size,
                           params.n_prompts, iter_rng);
    auto factors = objective_factors(batch, obj, policy);
    double eps_adv = 0.0;
    for (const auto& f : factors)
      eps_adv = std::max(eps_adv, std::abs(f.advantage));
    ++result.iterations;
    if (eps_adv == 0.0) continue;  // no reward signal anywhere in the batch
    result.max_eps_adv = std::max(result.max_eps_adv, eps_adv);

    auto subsets = partition(batch, factors, Granularity::kToken);
    FilterResult probe =
        capo_filter(subsets, factors, opt, ThresholdConfig::vacuous());

    const double curvature_bound = oracle::operator_norm(oracle::dense_hessian(
        factors, params.spec.vocab_size, params.feature_dim));
    result.max_curvature_bound =
        std::max(result.max_curvature_bound, curvature_bound);
    TheoremThreshold thr = theorem_threshold(
        params.spec.discount, eps_adv, params.delta_f, curvature_bound,
        probe.max_step_norm, params.hess_coeff);
    ThresholdConfig accept;
    accept.mode = ThresholdMode::kTheorem;
    accept.delta_h = thr.delta_h_required;
    accept.delta_h_high = std::numeric_limits<double>::infinity();
    accept.delta_f = params.delta_f;

    std::vector<bool> mask(factors.size(), false);
    bool any = false;
    for (std::size_t i = 0; i < probe.records.size(); ++i) {
      if (acceptance_reason(probe.records[i].shift, accept) == RejectReason::kOk) {
        const Subset& s = subsets[i];
        for (std::int64_t k = 0; k < s.count; ++k)
          mask[static_cast<std::size_t>(s.first + k)] = true;
        any = true;
      }
    }
    if (!any) continue;

    const double j_before =
        exact_objective(params.spec, policy.encoder, policy.layer);
    UpdateResult upd = aggregate_and_update(factors, mask, policy.layer, opt);
    if (!upd.applied) continue;
    const double j_after =
        exact_objective(params.spec, policy.encoder, policy.layer);
    const double margin = j_after - j_before;
    ++result.commits;
    result.min_margin = std::min(result.min_margin, margin);
    if (margin < -params.slack) ++result.violations;
  }
  return result;
}

inline CheckReport verify_theorem(std::uint64_t seed = 777) {
  using namespace verify_detail;
  CheckReport report;
  {
    auto t = theorem_threshold(0.9, 1.0, 1e-4, 0.0, 0.0);
    report.checks.push_back(bounded("theorem_constant_c",
                                    std::abs(t.c - 254.55844122716438), 1e-10));
    report.checks.push_back(bounded("theorem_omega_min",
                                    std::abs(t.omega_min - 2.5455844122716439),
                                    1e-10));
    auto z = theorem_threshold(0.0, 1.0, 1e-4, 2.0, 0.5);
    report.checks.push_back(bounded("theorem_gamma_zero_c", z.c, 0.0));
    report.checks.push_back(
        bounded("theorem_delta_h_limit",
                std::abs(z.delta_h_required - 0.5 * 2.0 * 0.25), 1e-15));
  }

  // Averaged-step Fisher quadratic never exceeds the mean of per-subset
  // quadratics.
  RngStream rng(seed, 0);
  double worst_gap = 0.0;
  for (int i = 0; i < 100; ++i) {
    const std::int64_t K = 2 + static_cast<std::int64_t>(rng.uniform01() * 6);
    const std::int64_t d = 1 + static_cast<std::int64_t>(rng.uniform01() * 4);
    auto factors = random_factors(rng, K, d, 4);
    auto fisher = oracle::dense_fisher(factors, K, d);
    const int b = 2 + static_cast<int>(rng.uniform01() * 5);
    RowSparseMatrix avg(K, d);
    double mean_quad = 0.0;
    for (int s = 0; s < b; ++s) {
      RowSparseMatrix part = random_step_rows(rng, K, d);
      mean_quad += oracle::quadratic_form(fisher, part);
      for (const auto& [r, v] : part.rows())
        avg.add_to_row(r, 1.0 / static_cast<double>(b), v);
    }
    mean_quad /= static_cast<double>(b);
    worst_gap = std::max(worst_gap,
                         oracle::quadratic_form(fisher, avg) - mean_quad);
  }
  report.checks.push_back(
      bounded("fisher_aggregation_inequality", worst_gap, 1e-10));

  // Short empirical run at gamma = 0.9: no committed update may decrease J.
  {
    TheoremRunParams params;
    params.spec.family = PromptFamily::kCopy;
    params.spec.vocab_size = 4;
    params.spec.prompt_length = 2;
    params.spec.horizon = 2;
    params.spec.discount = 0.9;
    params.feature_dim = 8;
    params.iterations = 50;
    params.seed = seed;
    auto run = run_theorem_check(params);
    report.checks.push_back(bounded(
        "theorem_monotonicity_violations_gamma09",
        static_cast<double>(run.violations), 0.0,
        std::to_string(run.commits) + " commits over " +
            std::to_string(run.iterations) + " iterations"));
  }
  // Low-discount variant where the constant C is small enough for commits
  // to actually happen, making the monotonicity check non-vacuous.
  {
    TheoremRunParams params;
    params.spec.family = PromptFamily::kParity;
    params.spec.vocab_size = 4;
    params.spec.prompt_length = 2;
    params.spec.horizon = 1;
    params.spec.discount = 0.2;
    params.feature_dim = 8;
    params.iterations = 60;
    params.delta_f = 1e-6;
    params.lr = 2e-3;
    params.seed = seed + 1;
    auto run = run_theorem_check(params);
    report.checks.push_back(bounded(
        "theorem_monotonicity_violations_gamma02",
        static_cast<double>(run.violations), 0.0,
        std::to_string(run.commits) + " commits"));
    CheckResult commits;
    commits.name = "theorem_commits_nonvacuous_gamma02";
    commits.measured = static_cast<double>(run.commits);
    commits.tolerance = 1.0;
    commits.pass = run.commits >= 1;
    commits.detail = "min margin " + std::to_string(run.min_margin);
    report.checks.push_back(commits);
  }
  return report;
}

inline CheckReport verify_all() {
  CheckReport report;
  report.append(verify_grad());
  report.append(verify_curvature());
  report.append(verify_kl());
  report.append(verify_theorem());
  return report;
}

inline CheckReport run_verify_suite(const std::string& suite) {
  if (suite == "grad") return verify_grad();
  if (suite == "curvature") return verify_curvature();
  if (suite == "kl") return verify_kl();
  if (suite == "theorem") return verify_theorem();
  if (suite == "all") return verify_all();
  throw ConfigError("unknown verify suite '" + suite + "'");
}

}  // namespace capo
