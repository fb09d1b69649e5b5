#pragma once

#include <cmath>
#include <cstdint>
#include <span>
#include <vector>

#include "capo/env.hpp"
#include "capo/errors.hpp"
#include "capo/numerics.hpp"
#include "capo/policy.hpp"

namespace capo {

// How a token's contribution is weighted inside a trajectory sum.
enum class TokenWeighting {
  kDiscounted,        // gamma^t
  kLengthNormalized,  // 1/|tau|
};

// One generated token's factored gradient contribution. The rank-one term
// advantage * weight * (u (x) h) is never materialized; u and h stay separate
// so curvature math reduces to small dot products.
struct TokenGradFactor {
  SparseVec u;    // e_a - pi on the stored support, temperature-1
  SparseVec pi;   // probability snapshot on the same support
  DenseVec h;
  double advantage = 0.0;
  double discount_weight = 1.0;  // gamma^t or 1/|tau|
  double sample_weight = 1.0;    // 1 for Monte Carlo; P(tau) in exact sums
  std::int64_t action = 0;
  std::int64_t traj_id = 0;
  std::int64_t step_index = 0;
};

// Proposed last-layer update restricted to its touched rows.
struct CandidateStep {
  RowSparseMatrix rows;
  double norm = 0.0;
};

inline CandidateStep make_candidate_step(RowSparseMatrix rows) {
  CandidateStep out;
  out.norm = rows.norm();
  out.rows = std::move(rows);
  return out;
}

// Predicted objective and policy shifts for a candidate step.
struct ShiftEstimate {
  double m_h = 0.0;   // gdot + hquad
  double m_f = 0.0;   // half the directional Fisher curvature
  double gdot = 0.0;  // gradient term of m_h
  double hquad = 0.0; // half the directional Hessian curvature
  std::int64_t n_tokens = 0;
};

// u = e_a - pi restricted to pi's support plus the sampled action; an
// off-support action reads as exact probability zero.
inline SparseVec policy_error_vector(const SparseVec& pi, std::int64_t action) {
  std::vector<SparseVec::Entry> entries;
  entries.reserve(pi.nnz() + 1);
  bool saw_action = false;
  for (const auto& e : pi.entries()) {
    if (e.index == action) {
      entries.push_back({e.index, 1.0 - e.value});
      saw_action = true;
    } else {
      entries.push_back({e.index, -e.value});
    }
  }
  if (!saw_action) entries.push_back({action, 1.0});
  return SparseVec(pi.dim(), std::move(entries));
}

// Group-relative advantages (divide-by-G sigma, eps-guarded), one value per
// trajectory in group order.
inline std::vector<double> grpo_advantages(const std::vector<double>& returns,
                                           double eps) {
  if (returns.size() < 2)
    throw InvalidInputError("grpo_advantages: group size must be >= 2");
  if (!(eps > 0.0)) throw InvalidInputError("grpo_advantages: eps must be > 0");
  const double n = static_cast<double>(returns.size());
  double mean = 0.0;
  for (double r : returns) mean += r;
  mean /= n;
  double var = 0.0;
  for (double r : returns) var += (r - mean) * (r - mean);
  var /= n;
  const double sigma = std::sqrt(var);
  std::vector<double> out(returns.size());
  for (std::size_t i = 0; i < returns.size(); ++i)
    out[i] = (returns[i] - mean) / (sigma + eps);
  return out;
}

// Group-mean baseline without sigma division.
inline std::vector<double> dr_grpo_advantages(
    const std::vector<double>& returns) {
  if (returns.size() < 2)
    throw InvalidInputError("dr_grpo_advantages: group size must be >= 2");
  double mean = 0.0;
  for (double r : returns) mean += r;
  mean /= static_cast<double>(returns.size());
  std::vector<double> out(returns.size());
  for (std::size_t i = 0; i < returns.size(); ++i) out[i] = returns[i] - mean;
  return out;
}

// One factor per generated token. Probabilities are recomputed from the
// current layer on each token's stored support, so reuse passes see the
// up-to-date policy; with an unchanged layer this reproduces the sampling
// snapshot bitwise. Advantages are per-token (outer index follows batch
// trajectory order).
inline std::vector<TokenGradFactor> token_grad_factors(
    const GroupBatch& batch,
    const std::vector<std::vector<double>>& advantages,
    TokenWeighting weighting, double gamma, const LastLayer& layer) {
  std::vector<TokenGradFactor> factors;
  factors.reserve(batch.n_tokens());
  std::size_t traj_index = 0;
  for (const auto& group : batch.groups) {
    for (const auto& traj : group.trajectories) {
      traj.check_snapshots();
      if (traj_index >= advantages.size() ||
          advantages[traj_index].size() != traj.length())
        throw InvalidInputError("token_grad_factors: advantage shape mismatch");
      const double inv_len =
          traj.length() > 0 ? 1.0 / static_cast<double>(traj.length()) : 1.0;
      double gamma_t = 1.0;
      for (std::size_t t = 0; t < traj.length(); ++t) {
        TokenGradFactor f;
        f.h = traj.features[t];
        DenseVec full =
            action_distribution(layer, f.h, 1).full_probs;
        std::vector<SparseVec::Entry> pi_entries;
        pi_entries.reserve(traj.topk_probs[t].nnz());
        for (const auto& e : traj.topk_probs[t].entries())
          pi_entries.push_back(
              {e.index, full[static_cast<std::size_t>(e.index)]});
        f.pi = SparseVec(layer.vocab_size(), std::move(pi_entries));
        f.action = traj.actions[t];
        f.u = policy_error_vector(f.pi, f.action);
        f.advantage = advantages[traj_index][t];
        f.discount_weight =
            weighting == TokenWeighting::kDiscounted ? gamma_t : inv_len;
        f.traj_id = static_cast<std::int64_t>(traj_index);
        f.step_index = static_cast<std::int64_t>(t);
        factors.push_back(std::move(f));
        gamma_t *= gamma;
      }
      ++traj_index;
    }
  }
  return factors;
}

// Broadcast form: one advantage per trajectory, applied to all its tokens.
inline std::vector<TokenGradFactor> token_grad_factors(
    const GroupBatch& batch, const std::vector<double>& traj_advantages,
    TokenWeighting weighting, double gamma, const LastLayer& layer) {
  std::vector<std::vector<double>> per_token;
  per_token.reserve(traj_advantages.size());
  std::size_t traj_index = 0;
  for (const auto& group : batch.groups) {
    for (const auto& traj : group.trajectories) {
      if (traj_index >= traj_advantages.size())
        throw InvalidInputError("token_grad_factors: advantage count mismatch");
      per_token.emplace_back(traj.length(), traj_advantages[traj_index]);
      ++traj_index;
    }
  }
  return token_grad_factors(batch, per_token, weighting, gamma, layer);
}

namespace detail {

inline double factor_weight_sum(std::span<const TokenGradFactor> factors) {
  double sw = 0.0;
  for (const auto& f : factors) sw += f.sample_weight;
  if (!(sw > 0.0))
    throw InvalidInputError("estimators: total sample weight must be > 0");
  return sw;
}

struct ShiftAccumulators {
  double grad = 0.0;    // sum sw * w * A * (u'v)
  double fisher = 0.0;  // sum sw * (u'v)^2
  double hessian = 0.0; // sum sw * w * A * ((u'v)^2 - v'F(s)v)
  double sw = 0.0;
  std::int64_t n = 0;
};

inline ShiftAccumulators accumulate_shift_terms(
    std::span<const TokenGradFactor> factors, const RowSparseMatrix& step) {
  ShiftAccumulators acc;
  for (const auto& f : factors) {
    // One pass over the stored support (plus the sampled action if the
    // snapshot assigns it exact zero). Truncated tails count as zeros, per
    // the sparsity contract.
    double udotv = 0.0;
    double pv = 0.0;
    double pvv = 0.0;
    bool saw_action = false;
    auto visit = [&](std::int64_t index, double pi_i) {
      const DenseVec* row = step.find_row(index);
      double v_i = 0.0;
      if (row) {
        for (std::size_t j = 0; j < f.h.size(); ++j) v_i += (*row)[j] * f.h[j];
      }
      const double u_i = index == f.action ? 1.0 - pi_i : -pi_i;
      udotv += u_i * v_i;
      pv += pi_i * v_i;
      pvv += pi_i * v_i * v_i;
    };
    for (const auto& e : f.pi.entries()) {
      if (e.index == f.action) saw_action = true;
      visit(e.index, e.value);
    }
    if (!saw_action) visit(f.action, 0.0);
    // Per-state Fisher quadratic in variance form: sum pi v^2 - (sum pi v)^2.
    const double vfv = pvv - pv * pv;
    acc.grad += f.sample_weight * f.discount_weight * f.advantage * udotv;
    acc.fisher += f.sample_weight * udotv * udotv;
    acc.hessian += f.sample_weight * f.discount_weight * f.advantage *
                   (udotv * udotv - vfv);
    acc.sw += f.sample_weight;
    acc.n += 1;
  }
  return acc;
}

}  // namespace detail

// Row-sparse mean of the factored gradient contributions.
inline RowSparseMatrix model_gradient(std::span<const TokenGradFactor> factors,
                                      std::int64_t vocab_size,
                                      std::int64_t feature_dim) {
  if (factors.empty())
    throw InvalidInputError("model_gradient: empty factor list");
  RowSparseMatrix grad(vocab_size, feature_dim);
  const double sw = detail::factor_weight_sum(factors);
  for (const auto& f : factors) {
    const double coeff =
        f.sample_weight * f.discount_weight * f.advantage;
    if (coeff == 0.0) continue;
    for (const auto& e : f.u.entries())
      grad.add_to_row(e.index, coeff * e.value, f.h);
  }
  grad.scale(1.0 / sw);
  return grad;
}

// Directional Fisher curvature (un-halved): weighted mean of (u'v)^2.
inline double directional_fisher(std::span<const TokenGradFactor> factors,
                                 const CandidateStep& step) {
  if (factors.empty()) return 0.0;
  auto acc = detail::accumulate_shift_terms(factors, step.rows);
  return acc.fisher / acc.sw;
}

// Directional Hessian curvature (un-halved): weighted mean of
// gamma^t A ((u'v)^2 - v'F(s)v).
inline double directional_hessian(std::span<const TokenGradFactor> factors,
                                  const CandidateStep& step) {
  if (factors.empty()) return 0.0;
  auto acc = detail::accumulate_shift_terms(factors, step.rows);
  return acc.hessian / acc.sw;
}

// m_H = g'step + half step'H step, m_F = half step'F step, all on this
// factor subset's own statistics.
inline ShiftEstimate shift_estimate(std::span<const TokenGradFactor> factors,
                                    const CandidateStep& step) {
  ShiftEstimate out;
  if (factors.empty()) return out;
  auto acc = detail::accumulate_shift_terms(factors, step.rows);
  out.gdot = acc.grad / acc.sw;
  out.hquad = 0.5 * acc.hessian / acc.sw;
  out.m_f = 0.5 * acc.fisher / acc.sw;
  out.m_h = out.gdot + out.hquad;
  out.n_tokens = acc.n;
  return out;
}

}  // namespace capo
