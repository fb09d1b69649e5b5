#pragma once

#include <cmath>
#include <cstdint>
#include <limits>
#include <optional>
#include <string>
#include <vector>

#include "capo/env.hpp"
#include "capo/errors.hpp"
#include "capo/estimators.hpp"
#include "capo/policy.hpp"
#include "capo/stepmodel.hpp"

namespace capo {

enum class Objective { kReinforce, kGrpo, kDrGrpo };
enum class Granularity { kToken, kTrajectory, kGroup, kBatch };
enum class ReinforceBaseline { kNone, kMean };

inline std::string to_string(Objective o) {
  switch (o) {
    case Objective::kReinforce: return "reinforce";
    case Objective::kGrpo: return "grpo";
    case Objective::kDrGrpo: return "dr_grpo";
  }
  return "?";
}

inline std::string to_string(Granularity g) {
  switch (g) {
    case Granularity::kToken: return "token";
    case Granularity::kTrajectory: return "trajectory";
    case Granularity::kGroup: return "group";
    case Granularity::kBatch: return "batch";
  }
  return "?";
}

// Trust-region acceptance thresholds. The symmetric mode rejects samples
// outside -delta_h < m_H < delta_h; the theorem mode applies the lower bound
// delta_h <= m_H <= delta_h_high from the improvement guarantee.
enum class ThresholdMode { kSymmetric, kTheorem };

struct ThresholdConfig {
  ThresholdMode mode = ThresholdMode::kSymmetric;
  double delta_h = 1e-2;
  double delta_h_high = std::numeric_limits<double>::infinity();
  double delta_f = 1e-4;
  Granularity granularity = Granularity::kToken;

  void validate() const {
    if (!(delta_f > 0.0))
      throw InvalidInputError("ThresholdConfig: delta_f must be > 0");
    if (mode == ThresholdMode::kTheorem && !(delta_h <= delta_h_high))
      throw InvalidInputError("ThresholdConfig: delta_h must be <= delta_h_high");
    if (mode == ThresholdMode::kSymmetric && !(delta_h >= 0.0))
      throw InvalidInputError("ThresholdConfig: symmetric delta_h must be >= 0");
  }

  static ThresholdConfig vacuous() {
    ThresholdConfig t;
    t.mode = ThresholdMode::kTheorem;
    t.delta_h = -std::numeric_limits<double>::infinity();
    t.delta_h_high = std::numeric_limits<double>::infinity();
    t.delta_f = std::numeric_limits<double>::infinity();
    return t;
  }
};

enum class RejectReason { kOk, kFisherExceeded, kObjectiveLow, kObjectiveHigh };

inline std::string to_string(RejectReason r) {
  switch (r) {
    case RejectReason::kOk: return "ok";
    case RejectReason::kFisherExceeded: return "m_F_exceeded";
    case RejectReason::kObjectiveLow: return "m_H_low";
    case RejectReason::kObjectiveHigh: return "m_H_high";
  }
  return "?";
}

struct AcceptanceRecord {
  std::int64_t subset_id = 0;
  ShiftEstimate shift;
  double step_norm = 0.0;
  bool accepted = false;
  RejectReason reason = RejectReason::kOk;
};

// C = 2 gamma eps sqrt(2) / (1-gamma)^2, the surrogate-gap constant.
struct TheoremConstants {
  double gamma = 0.0;
  double eps_adv = 0.0;
  double c = 0.0;
};

inline TheoremConstants theorem_constants(double gamma, double eps_adv) {
  if (gamma < 0.0 || gamma >= 1.0)
    throw InvalidInputError("theorem_constants: gamma must be in [0,1)");
  if (!(eps_adv > 0.0))
    throw InvalidInputError("theorem_constants: eps_adv must be > 0");
  TheoremConstants out;
  out.gamma = gamma;
  out.eps_adv = eps_adv;
  out.c = 2.0 * gamma * eps_adv * std::sqrt(2.0) / ((1.0 - gamma) * (1.0 - gamma));
  return out;
}

struct TheoremThreshold {
  double c = 0.0;
  double omega_min = 0.0;
  double delta_h_required = 0.0;
};

// omega_min = C sqrt(delta_f); delta_h = omega + hess_coeff * M r^2. The
// theorem statement uses hess_coeff = 1/2 while its proof step uses 1; the
// coefficient is exposed so both variants can be exercised.
inline TheoremThreshold theorem_threshold(double gamma, double eps_adv,
                                          double delta_f, double curvature_bound,
                                          double step_bound,
                                          double hess_coeff = 0.5) {
  if (!(delta_f > 0.0))
    throw InvalidInputError("theorem_threshold: delta_f must be > 0");
  if (!(curvature_bound >= 0.0) || !(step_bound >= 0.0))
    throw InvalidInputError("theorem_threshold: M and r must be >= 0");
  TheoremThreshold out;
  out.c = theorem_constants(gamma, eps_adv).c;
  out.omega_min = out.c * std::sqrt(delta_f);
  out.delta_h_required =
      out.omega_min + hess_coeff * curvature_bound * step_bound * step_bound;
  return out;
}

// ---------------------------------------------------------------------------
// Objective gradients
// ---------------------------------------------------------------------------

struct ObjectiveParams {
  Objective kind = Objective::kGrpo;
  double grpo_eps = 1e-4;           // sigma guard in the group advantage
  double clip_eps = 0.2;            // PPO-style ratio clip
  double kl_beta = 0.0;             // KL-to-reference coefficient
  ReinforceBaseline baseline = ReinforceBaseline::kMean;
  double gamma = 1.0;               // discount for REINFORCE weighting
};

namespace detail {

inline std::vector<const Trajectory*> flatten(const GroupBatch& batch) {
  std::vector<const Trajectory*> out;
  out.reserve(batch.n_trajectories());
  for (const auto& g : batch.groups)
    for (const auto& t : g.trajectories) out.push_back(&t);
  return out;
}

// Discounted reward-to-go per token, plus an optional per-timestep mean
// baseline across trajectories.
inline std::vector<std::vector<double>> reinforce_advantages(
    const GroupBatch& batch, ReinforceBaseline baseline, double gamma) {
  auto trajs = flatten(batch);
  std::vector<std::vector<double>> adv(trajs.size());
  std::size_t max_len = 0;
  for (std::size_t i = 0; i < trajs.size(); ++i) {
    const auto& r = trajs[i]->rewards;
    adv[i].assign(r.size(), 0.0);
    double acc = 0.0;
    for (std::size_t t = r.size(); t-- > 0;) {
      acc = r[t] + gamma * acc;
      adv[i][t] = acc;
    }
    max_len = std::max(max_len, r.size());
  }
  if (baseline == ReinforceBaseline::kMean) {
    for (std::size_t t = 0; t < max_len; ++t) {
      double sum = 0.0;
      std::int64_t n = 0;
      for (const auto& a : adv)
        if (t < a.size()) {
          sum += a[t];
          ++n;
        }
      const double mean = n > 0 ? sum / static_cast<double>(n) : 0.0;
      for (auto& a : adv)
        if (t < a.size()) a[t] -= mean;
    }
  }
  return adv;
}

// Group-relative advantages for the whole batch, one value per trajectory.
inline std::vector<double> group_advantages(const GroupBatch& batch,
                                            Objective kind, double eps) {
  std::vector<double> out;
  out.reserve(batch.n_trajectories());
  for (const auto& g : batch.groups) {
    std::vector<double> returns;
    returns.reserve(g.trajectories.size());
    for (const auto& t : g.trajectories) returns.push_back(t.total_return());
    std::vector<double> adv = kind == Objective::kDrGrpo
                                  ? dr_grpo_advantages(returns)
                                  : grpo_advantages(returns, eps);
    out.insert(out.end(), adv.begin(), adv.end());
  }
  return out;
}

}  // namespace detail

// Factors for the configured objective, with clip/KL handling folded into the
// per-token effective advantage so gradient, Hessian and Fisher statistics
// all describe the objective actually being optimized. On the first pass over
// freshly sampled data the ratio is exactly 1 and clipping is inactive.
inline std::vector<TokenGradFactor> objective_factors(
    const GroupBatch& batch, const ObjectiveParams& params,
    const Policy& policy, const LastLayer* ref_layer = nullptr) {
  if (batch.groups.empty())
    throw InvalidInputError("objective_factors: empty batch");
  if (params.kl_beta > 0.0 && ref_layer == nullptr)
    throw ConfigError("objective_factors: kl_beta > 0 requires a reference policy");

  std::vector<TokenGradFactor> factors;
  if (params.kind == Objective::kReinforce) {
    auto adv =
        detail::reinforce_advantages(batch, params.baseline, params.gamma);
    factors = token_grad_factors(batch, adv, TokenWeighting::kDiscounted,
                                 params.gamma, policy.layer);
    return factors;
  }

  auto adv = detail::group_advantages(batch, params.kind, params.grpo_eps);
  const TokenWeighting weighting = params.kind == Objective::kGrpo
                                       ? TokenWeighting::kLengthNormalized
                                       : TokenWeighting::kDiscounted;
  factors = token_grad_factors(batch, adv, weighting, 1.0, policy.layer);

  // Clipped-min rule on the importance ratio, evaluated in the same space
  // the behavior log-prob was recorded in; tokens on the clipped branch
  // contribute exactly zero gradient.
  auto trajs = detail::flatten(batch);
  for (auto& f : factors) {
    const Trajectory& traj = *trajs[static_cast<std::size_t>(f.traj_id)];
    const std::size_t t = static_cast<std::size_t>(f.step_index);
    const double lp_now = current_logprob_for_ratio(
        policy, traj.features[t], traj.topk_probs[t], f.action);
    const double ratio = std::exp(lp_now - traj.logprob_behavior[t]);
    const double a = f.advantage;
    double coeff;
    if (a >= 0.0) {
      coeff = ratio <= 1.0 + params.clip_eps ? a * ratio : 0.0;
    } else {
      coeff = ratio >= 1.0 - params.clip_eps ? a * ratio : 0.0;
    }
    if (params.kl_beta > 0.0) {
      const double lp_cur = log_prob(policy.layer, traj.features[t], f.action);
      const double lp_ref = log_prob(*ref_layer, traj.features[t], f.action);
      coeff -= params.kl_beta * (lp_cur - lp_ref + 1.0);
    }
    f.advantage = coeff;
  }
  return factors;
}

// Monte Carlo policy-gradient estimate with reward-to-go advantages.
inline RowSparseMatrix reinforce_loss_grad(const GroupBatch& batch,
                                           ReinforceBaseline baseline,
                                           double gamma, const Policy& policy) {
  ObjectiveParams params;
  params.kind = Objective::kReinforce;
  params.baseline = baseline;
  params.gamma = gamma;
  auto factors = objective_factors(batch, params, policy);
  return model_gradient(factors, policy.layer.vocab_size(),
                        policy.layer.feature_dim());
}

// Token gradient of the clipped group-relative surrogate, minus kl_beta
// times the KL-term gradient when a reference policy is supplied.
inline RowSparseMatrix grpo_loss_grad(const GroupBatch& batch, double clip_eps,
                                      double kl_beta, const Policy& policy,
                                      const LastLayer* ref_layer = nullptr,
                                      double grpo_eps = 1e-4) {
  ObjectiveParams params;
  params.kind = Objective::kGrpo;
  params.clip_eps = clip_eps;
  params.kl_beta = kl_beta;
  params.grpo_eps = grpo_eps;
  auto factors = objective_factors(batch, params, policy, ref_layer);
  return model_gradient(factors, policy.layer.vocab_size(),
                        policy.layer.feature_dim());
}

// ---------------------------------------------------------------------------
// Partitioning and the acceptance loop
// ---------------------------------------------------------------------------

// Contiguous slice of the (trajectory-ordered) factor list.
struct Subset {
  std::int64_t id = 0;
  std::int64_t first = 0;
  std::int64_t count = 0;
};

// Disjoint cover of the batch's token factors at the requested granularity.
// Factors arrive trajectory-major, so every subset is a contiguous run.
inline std::vector<Subset> partition(const GroupBatch& batch,
                                     std::span<const TokenGradFactor> factors,
                                     Granularity granularity) {
  if (factors.empty()) throw InvalidInputError("partition: empty batch");
  std::vector<Subset> subsets;
  auto key_of = [&](const TokenGradFactor& f) -> std::int64_t {
    switch (granularity) {
      case Granularity::kToken: return -1;  // unique per factor
      case Granularity::kTrajectory: return f.traj_id;
      case Granularity::kGroup: return f.traj_id / batch.group_size;
      case Granularity::kBatch: return 0;
    }
    return 0;
  };
  std::int64_t current_key = std::numeric_limits<std::int64_t>::min();
  for (std::size_t i = 0; i < factors.size(); ++i) {
    const std::int64_t key = key_of(factors[i]);
    const bool fresh = granularity == Granularity::kToken ||
                       subsets.empty() || key != current_key;
    if (fresh) {
      subsets.push_back(
          {static_cast<std::int64_t>(subsets.size()),
           static_cast<std::int64_t>(i), 0});
      current_key = key;
    }
    subsets.back().count += 1;
  }
  return subsets;
}

struct FilterResult {
  std::vector<bool> token_mask;  // aligned with the factor list
  std::vector<AcceptanceRecord> records;
  std::int64_t n_accepted_subsets = 0;
  double max_step_norm = 0.0;  // over all proposals, accepted or not
};

// First violated constraint in the order m_F, m_H low, m_H high.
inline RejectReason acceptance_reason(const ShiftEstimate& shift,
                                      const ThresholdConfig& thresholds) {
  const double low = thresholds.mode == ThresholdMode::kSymmetric
                         ? -thresholds.delta_h
                         : thresholds.delta_h;
  const double high = thresholds.mode == ThresholdMode::kSymmetric
                          ? thresholds.delta_h
                          : thresholds.delta_h_high;
  if (shift.m_f > thresholds.delta_f) return RejectReason::kFisherExceeded;
  if (shift.m_h < low) return RejectReason::kObjectiveLow;
  if (shift.m_h > high) return RejectReason::kObjectiveHigh;
  return RejectReason::kOk;
}

// Per-subset propose-and-test loop: local gradient, hypothetical step,
// shift estimate, trust-region decision. Rejection reasons are checked in
// the order m_F, m_H low, m_H high.
inline FilterResult capo_filter(const std::vector<Subset>& subsets,
                                std::span<const TokenGradFactor> factors,
                                const StepModelState& stepmodel,
                                const ThresholdConfig& thresholds) {
  thresholds.validate();
  FilterResult out;
  out.token_mask.assign(factors.size(), false);
  out.records.reserve(subsets.size());
  for (const Subset& subset : subsets) {
    auto slice = factors.subspan(static_cast<std::size_t>(subset.first),
                                 static_cast<std::size_t>(subset.count));
    RowSparseMatrix local_grad =
        model_gradient(slice, stepmodel.p.n_rows(), stepmodel.p.n_cols());
    CandidateStep step = propose_step(stepmodel, local_grad);
    ShiftEstimate shift = shift_estimate(slice, step);
    out.max_step_norm = std::max(out.max_step_norm, step.norm);

    AcceptanceRecord rec;
    rec.subset_id = subset.id;
    rec.shift = shift;
    rec.step_norm = step.norm;
    rec.reason = acceptance_reason(shift, thresholds);
    if (rec.reason == RejectReason::kOk) {
      rec.accepted = true;
      ++out.n_accepted_subsets;
      for (std::int64_t i = 0; i < subset.count; ++i)
        out.token_mask[static_cast<std::size_t>(subset.first + i)] = true;
    }
    out.records.push_back(rec);
  }
  return out;
}

struct UpdateResult {
  bool applied = false;
  CandidateStep step;          // the committed step (empty when skipped)
  RowSparseMatrix gradient;    // aggregate gradient over accepted tokens
  double grad_norm = 0.0;
};

// Recompute the objective gradient on the union of accepted tokens, take the
// real optimizer step, and commit the moments. With nothing accepted the
// iteration is skipped: parameters and moment state stay untouched.
inline UpdateResult aggregate_and_update(
    const std::vector<TokenGradFactor>& factors,
    const std::vector<bool>& token_mask, LastLayer& layer,
    StepModelState& stepmodel) {
  UpdateResult out;
  std::vector<TokenGradFactor> accepted;
  accepted.reserve(factors.size());
  for (std::size_t i = 0; i < factors.size(); ++i)
    if (token_mask[i]) accepted.push_back(factors[i]);
  if (accepted.empty()) return out;
  out.gradient =
      model_gradient(accepted, layer.vocab_size(), layer.feature_dim());
  out.grad_norm = out.gradient.norm();
  out.step = propose_step(stepmodel, out.gradient);
  layer = apply_update(layer, out.step.rows, 1.0);
  stepmodel = commit(stepmodel, out.gradient);
  out.applied = true;
  return out;
}

}  // namespace capo
