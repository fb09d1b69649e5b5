#pragma once

#include <cmath>
#include <cstdint>
#include <span>
#include <vector>

#include "capo/env.hpp"
#include "capo/errors.hpp"
#include "capo/estimators.hpp"
#include "capo/numerics.hpp"
#include "capo/policy.hpp"

// Brute-force reference implementations kept deliberately separate from the
// estimator code paths: their own softmax, their own Kronecker assembly,
// their own accumulation order. Agreement between the two routes is the
// evidence the fast path is right.
namespace capo::oracle {

inline constexpr std::int64_t kDenseGuard = 64;  // max K * d_i materialized

class DenseMatrix {
 public:
  DenseMatrix() = default;
  explicit DenseMatrix(std::int64_t n)
      : n_(n), a_(static_cast<std::size_t>(n * n), 0.0) {
    if (n < 1) throw InvalidInputError("DenseMatrix: n must be >= 1");
  }

  std::int64_t size() const { return n_; }
  double& at(std::int64_t i, std::int64_t j) {
    return a_[static_cast<std::size_t>(i * n_ + j)];
  }
  double at(std::int64_t i, std::int64_t j) const {
    return a_[static_cast<std::size_t>(i * n_ + j)];
  }

 private:
  std::int64_t n_ = 0;
  std::vector<double> a_;
};

enum class CurvatureKind { kHessian, kFisher };

struct DenseCurvature {
  DenseMatrix matrix;
  CurvatureKind kind = CurvatureKind::kFisher;
};

// Independent softmax route (two-pass, long double accumulator).
inline DenseVec softmax(const DenseVec& logits) {
  double max_logit = logits[0];
  for (double l : logits) max_logit = std::max(max_logit, l);
  long double z = 0.0L;
  DenseVec out(logits.size(), 0.0);
  for (std::size_t i = 0; i < logits.size(); ++i) {
    out[i] = std::exp(logits[i] - max_logit);
    z += static_cast<long double>(out[i]);
  }
  for (double& p : out) p = static_cast<double>(p / z);
  return out;
}

inline DenseVec layer_logits(const LastLayer& layer, const DenseVec& h) {
  DenseVec logits(static_cast<std::size_t>(layer.vocab_size()), 0.0);
  for (std::int64_t a = 0; a < layer.vocab_size(); ++a) {
    long double acc = 0.0L;
    for (std::int64_t j = 0; j < layer.feature_dim(); ++j)
      acc += static_cast<long double>(layer.weight(a, j)) *
             static_cast<long double>(h[static_cast<std::size_t>(j)]);
    logits[static_cast<std::size_t>(a)] = static_cast<double>(acc);
  }
  return logits;
}

namespace detail {

// Dense u = e_a - pi with the snapshot's truncated tail read as exact zero.
inline DenseVec dense_policy_error(const TokenGradFactor& f, std::int64_t K) {
  DenseVec u(static_cast<std::size_t>(K), 0.0);
  for (const auto& e : f.pi.entries())
    u[static_cast<std::size_t>(e.index)] = -e.value;
  u[static_cast<std::size_t>(f.action)] += 1.0;
  return u;
}

inline DenseVec dense_probs(const TokenGradFactor& f, std::int64_t K) {
  DenseVec pi(static_cast<std::size_t>(K), 0.0);
  for (const auto& e : f.pi.entries())
    pi[static_cast<std::size_t>(e.index)] = e.value;
  return pi;
}

inline void check_guard(std::int64_t K, std::int64_t d) {
  if (K * d > kDenseGuard)
    throw ResourceError("oracle: K * d_i exceeds the dense materialization guard");
}

}  // namespace detail

// Explicit Kronecker assembly of the sample Fisher: weighted mean of
// (u u') (x) (h h').
inline DenseCurvature dense_fisher(std::span<const TokenGradFactor> factors,
                                   std::int64_t K, std::int64_t d) {
  detail::check_guard(K, d);
  if (factors.empty()) throw InvalidInputError("dense_fisher: empty factors");
  DenseCurvature out;
  out.kind = CurvatureKind::kFisher;
  out.matrix = DenseMatrix(K * d);
  double sw = 0.0;
  for (const auto& f : factors) {
    DenseVec u = detail::dense_policy_error(f, K);
    for (std::int64_t r = 0; r < K; ++r)
      for (std::int64_t c = 0; c < K; ++c)
        for (std::int64_t i = 0; i < d; ++i)
          for (std::int64_t j = 0; j < d; ++j)
            out.matrix.at(r * d + i, c * d + j) +=
                f.sample_weight * u[static_cast<std::size_t>(r)] *
                u[static_cast<std::size_t>(c)] *
                f.h[static_cast<std::size_t>(i)] *
                f.h[static_cast<std::size_t>(j)];
    sw += f.sample_weight;
  }
  for (std::int64_t i = 0; i < K * d; ++i)
    for (std::int64_t j = 0; j < K * d; ++j) out.matrix.at(i, j) /= sw;
  return out;
}

// Weighted mean of gamma^t A ((u u' - F(s)) (x) (h h')) with
// F(s) = diag(pi) - pi pi'.
inline DenseCurvature dense_hessian(std::span<const TokenGradFactor> factors,
                                    std::int64_t K, std::int64_t d) {
  detail::check_guard(K, d);
  if (factors.empty()) throw InvalidInputError("dense_hessian: empty factors");
  DenseCurvature out;
  out.kind = CurvatureKind::kHessian;
  out.matrix = DenseMatrix(K * d);
  double sw = 0.0;
  for (const auto& f : factors) {
    DenseVec u = detail::dense_policy_error(f, K);
    DenseVec pi = detail::dense_probs(f, K);
    const double coeff = f.discount_weight * f.advantage * f.sample_weight;
    for (std::int64_t r = 0; r < K; ++r) {
      for (std::int64_t c = 0; c < K; ++c) {
        const double diag = r == c ? pi[static_cast<std::size_t>(r)] : 0.0;
        const double fisher_rc = diag - pi[static_cast<std::size_t>(r)] *
                                            pi[static_cast<std::size_t>(c)];
        const double block = u[static_cast<std::size_t>(r)] *
                                 u[static_cast<std::size_t>(c)] -
                             fisher_rc;
        for (std::int64_t i = 0; i < d; ++i)
          for (std::int64_t j = 0; j < d; ++j)
            out.matrix.at(r * d + i, c * d + j) +=
                coeff * block * f.h[static_cast<std::size_t>(i)] *
                f.h[static_cast<std::size_t>(j)];
      }
    }
    sw += f.sample_weight;
  }
  for (std::int64_t i = 0; i < K * d; ++i)
    for (std::int64_t j = 0; j < K * d; ++j) out.matrix.at(i, j) /= sw;
  return out;
}

// x' M x with x = vec(U), psi index = row * d + col.
inline double quadratic_form(const DenseCurvature& m, const RowSparseMatrix& u) {
  const std::int64_t n = m.matrix.size();
  const std::int64_t d = u.n_cols();
  DenseVec x(static_cast<std::size_t>(n), 0.0);
  for (const auto& [r, v] : u.rows())
    for (std::int64_t j = 0; j < d; ++j)
      x[static_cast<std::size_t>(r * d + j)] = v[static_cast<std::size_t>(j)];
  long double acc = 0.0L;
  for (std::int64_t i = 0; i < n; ++i) {
    long double row = 0.0L;
    for (std::int64_t j = 0; j < n; ++j)
      row += static_cast<long double>(m.matrix.at(i, j)) *
             static_cast<long double>(x[static_cast<std::size_t>(j)]);
    acc += static_cast<long double>(x[static_cast<std::size_t>(i)]) * row;
  }
  return static_cast<double>(acc);
}

// vec(U)' (uu' (x) hh') vec(U) vs (u' U h)^2; returns |difference|.
inline double kronecker_identity_error(const DenseVec& u, const DenseVec& h,
                                       const RowSparseMatrix& U) {
  const std::int64_t K = static_cast<std::int64_t>(u.size());
  const std::int64_t d = static_cast<std::int64_t>(h.size());
  DenseCurvature kron;
  kron.kind = CurvatureKind::kFisher;
  kron.matrix = DenseMatrix(K * d);
  for (std::int64_t r = 0; r < K; ++r)
    for (std::int64_t c = 0; c < K; ++c)
      for (std::int64_t i = 0; i < d; ++i)
        for (std::int64_t j = 0; j < d; ++j)
          kron.matrix.at(r * d + i, c * d + j) =
              u[static_cast<std::size_t>(r)] * u[static_cast<std::size_t>(c)] *
              h[static_cast<std::size_t>(i)] * h[static_cast<std::size_t>(j)];
  const double lhs = quadratic_form(kron, U);
  double uuh = 0.0;
  for (std::int64_t r = 0; r < K; ++r) {
    const DenseVec* row = U.find_row(r);
    if (!row) continue;
    double vh = 0.0;
    for (std::int64_t j = 0; j < d; ++j)
      vh += (*row)[static_cast<std::size_t>(j)] *
            h[static_cast<std::size_t>(j)];
    uuh += u[static_cast<std::size_t>(r)] * vh;
  }
  return std::abs(lhs - uuh * uuh);
}

// Central differences of log_prob against the analytic factored gradient.
// Returns the max relative error over all W entries.
inline double fd_gradient_check(const LastLayer& layer, const DenseVec& h,
                                std::int64_t action, double h_fd) {
  if (h_fd < 1e-7 || h_fd > 1e-3)
    throw InvalidInputError("fd_gradient_check: h_fd must be in [1e-7, 1e-3]");
  DenseVec pi = softmax(layer_logits(layer, h));
  double max_rel = 0.0;
  for (std::int64_t r = 0; r < layer.vocab_size(); ++r) {
    const double u_r =
        (r == action ? 1.0 : 0.0) - pi[static_cast<std::size_t>(r)];
    for (std::int64_t j = 0; j < layer.feature_dim(); ++j) {
      const double analytic = u_r * h[static_cast<std::size_t>(j)];
      LastLayer plus = layer;
      plus.set_weight(r, j, layer.weight(r, j) + h_fd);
      LastLayer minus = layer;
      minus.set_weight(r, j, layer.weight(r, j) - h_fd);
      const double fd =
          (log_prob(plus, h, action) - log_prob(minus, h, action)) /
          (2.0 * h_fd);
      const double denom = std::max({1.0, std::abs(fd), std::abs(analytic)});
      max_rel = std::max(max_rel, std::abs(fd - analytic) / denom);
    }
  }
  return max_rel;
}

// Average forward KL over a state set, full distributions.
inline double exact_kl(const LastLayer& before, const LastLayer& after,
                       std::span<const DenseVec> state_features) {
  if (state_features.empty())
    throw InvalidInputError("exact_kl: empty state set");
  long double total = 0.0L;
  for (const DenseVec& h : state_features) {
    DenseVec p = softmax(layer_logits(before, h));
    DenseVec q = softmax(layer_logits(after, h));
    long double kl = 0.0L;
    for (std::size_t a = 0; a < p.size(); ++a) {
      if (p[a] == 0.0) continue;
      if (q[a] == 0.0)
        throw NumericalError("exact_kl: zero probability under the new policy");
      kl += static_cast<long double>(p[a]) *
            std::log(static_cast<long double>(p[a]) /
                     static_cast<long double>(q[a]));
    }
    total += kl;
  }
  return static_cast<double>(total / state_features.size());
}

// Largest singular value by power iteration on M'M (= M^2 for symmetric M).
inline double operator_norm(const DenseMatrix& m, double rel_tol = 1e-8,
                            std::int64_t max_iters = 10000) {
  const std::int64_t n = m.size();
  DenseVec x(static_cast<std::size_t>(n));
  for (std::int64_t i = 0; i < n; ++i)
    x[static_cast<std::size_t>(i)] =
        1.0 + 0.01 * static_cast<double>(i % 7);  // fixed non-degenerate start
  double nx = 0.0;
  for (double v : x) nx += v * v;
  nx = std::sqrt(nx);
  for (double& v : x) v /= nx;
  auto matvec = [&](const DenseVec& in, DenseVec& out) {
    out.assign(static_cast<std::size_t>(n), 0.0);
    for (std::int64_t i = 0; i < n; ++i) {
      double acc = 0.0;
      for (std::int64_t j = 0; j < n; ++j)
        acc += m.at(i, j) * in[static_cast<std::size_t>(j)];
      out[static_cast<std::size_t>(i)] = acc;
    }
  };
  double sigma_prev = 0.0;
  DenseVec y, z;
  for (std::int64_t it = 0; it < max_iters; ++it) {
    matvec(x, y);
    double ny = 0.0;
    for (double v : y) ny += v * v;
    const double sigma = std::sqrt(ny);  // ||Mx|| with ||x|| = 1
    if (sigma == 0.0) return 0.0;
    matvec(y, z);  // z = M'(Mx) for symmetric M
    double nz = 0.0;
    for (double v : z) nz += v * v;
    nz = std::sqrt(nz);
    if (nz == 0.0) return sigma;
    for (std::size_t i = 0; i < z.size(); ++i) x[i] = z[i] / nz;
    if (std::abs(sigma - sigma_prev) <= rel_tol * std::max(sigma, 1e-300))
      return sigma;
    sigma_prev = sigma;
  }
  throw NumericalError("operator_norm: power iteration did not converge");
}

inline double operator_norm(const DenseCurvature& m, double rel_tol = 1e-8,
                            std::int64_t max_iters = 10000) {
  return operator_norm(m.matrix, rel_tol, max_iters);
}

// Smallest eigenvalue of a symmetric matrix via the shift c I - M with
// c = ||M||: the shifted matrix is PSD, so its norm is c - lambda_min.
inline double min_eigenvalue(const DenseMatrix& m) {
  const double c = operator_norm(m);
  if (c == 0.0) return 0.0;
  DenseMatrix shifted(m.size());
  for (std::int64_t i = 0; i < m.size(); ++i)
    for (std::int64_t j = 0; j < m.size(); ++j)
      shifted.at(i, j) = (i == j ? c : 0.0) - m.at(i, j);
  return c - operator_norm(shifted);
}

// max_a |sum_a' pi(a') (e_{a'} - pi)_a|, the score-mean-zero identity.
inline double grad_log_prob_identity_error(const LastLayer& layer,
                                           const DenseVec& h) {
  DenseVec pi = softmax(layer_logits(layer, h));
  const std::int64_t K = layer.vocab_size();
  double worst = 0.0;
  for (std::int64_t comp = 0; comp < K; ++comp) {
    long double acc = 0.0L;
    for (std::int64_t a = 0; a < K; ++a) {
      const double u =
          (a == comp ? 1.0 : 0.0) - pi[static_cast<std::size_t>(comp)];
      acc += static_cast<long double>(pi[static_cast<std::size_t>(a)]) * u;
    }
    worst = std::max(worst, std::abs(static_cast<double>(acc)));
  }
  return worst;
}

// ---------------------------------------------------------------------------
// Remainder-order checks
// ---------------------------------------------------------------------------

// Exact expectation factor set over a list of states: one factor per
// (state, action) with sample weight d(s) pi(a|s), full support. Feeding
// these into the sample estimators turns them into exact expectations.
inline std::vector<TokenGradFactor> exact_state_factors(
    const LastLayer& layer, std::span<const DenseVec> state_features) {
  std::vector<TokenGradFactor> factors;
  const std::int64_t K = layer.vocab_size();
  const double ds = 1.0 / static_cast<double>(state_features.size());
  for (const DenseVec& h : state_features) {
    SparseVec pi_full =
        SparseVec::from_dense(action_distribution(layer, h, 1).full_probs);
    for (std::int64_t a = 0; a < K; ++a) {
      TokenGradFactor f;
      f.h = h;
      f.pi = pi_full;
      f.action = a;
      f.u = policy_error_vector(f.pi, a);
      f.sample_weight = ds * f.pi.at(a);
      f.advantage = 0.0;  // Fisher-only use
      factors.push_back(std::move(f));
    }
  }
  return factors;
}

// Exact factor set for a single-token-answer MDP: one factor per
// (prompt, action) with weight rho(s) pi(a|s) and advantage equal to the
// reward. For one-step episodes the factored curvature model is the exact
// Hessian of J, so the Taylor remainder against exact_objective is cubic.
inline std::vector<TokenGradFactor> exact_objective_factors(
    const EnvSpec& spec, const FeatureEncoder& encoder,
    const LastLayer& layer) {
  spec.validate();
  if (spec.episode_length() != 1)
    throw InvalidInputError(
        "exact_objective_factors: episode length must be 1");
  std::vector<TokenGradFactor> factors;
  std::vector<TokenSeq> prompts = enumerate_prompts(spec);
  const double rho = 1.0 / static_cast<double>(prompts.size());
  for (const TokenSeq& prompt : prompts) {
    DenseVec h = encoder.encode(prompt);
    SparseVec pi_full =
        SparseVec::from_dense(action_distribution(layer, h, 1).full_probs);
    for (std::int64_t a = 0; a < spec.vocab_size; ++a) {
      StepResult sr = step(spec, prompt, a);
      TokenGradFactor f;
      f.h = h;
      f.pi = pi_full;
      f.action = a;
      f.u = policy_error_vector(f.pi, a);
      f.sample_weight = rho * f.pi.at(a);
      f.advantage = sr.reward;
      factors.push_back(std::move(f));
    }
  }
  return factors;
}

struct RemainderFit {
  double slope = 0.0;
  bool exact = false;  // all residuals identically zero
  std::vector<double> scales;
  std::vector<double> errors;
};

// Least-squares slope of log(error) against log(scale). Zero errors are
// dropped; all-zero input reports exact.
inline RemainderFit fit_log_slope(const std::vector<double>& scales,
                                  const std::vector<double>& errors) {
  RemainderFit out;
  out.scales = scales;
  out.errors = errors;
  std::vector<double> xs, ys;
  for (std::size_t i = 0; i < scales.size(); ++i) {
    if (errors[i] > 0.0) {
      xs.push_back(std::log(scales[i]));
      ys.push_back(std::log(errors[i]));
    }
  }
  if (xs.size() < 2) {
    out.exact = true;
    return out;
  }
  double mx = 0.0, my = 0.0;
  for (std::size_t i = 0; i < xs.size(); ++i) {
    mx += xs[i];
    my += ys[i];
  }
  mx /= static_cast<double>(xs.size());
  my /= static_cast<double>(xs.size());
  double sxx = 0.0, sxy = 0.0;
  for (std::size_t i = 0; i < xs.size(); ++i) {
    sxx += (xs[i] - mx) * (xs[i] - mx);
    sxy += (xs[i] - mx) * (ys[i] - my);
  }
  out.slope = sxy / sxx;
  return out;
}

inline void check_scales(const std::vector<double>& scales) {
  if (scales.size() < 3)
    throw InvalidInputError("remainder check: need at least 3 scales");
  double lo = scales[0], hi = scales[0];
  for (double s : scales) {
    if (!(s > 0.0)) throw InvalidInputError("remainder check: scales must be > 0");
    lo = std::min(lo, s);
    hi = std::max(hi, s);
  }
  if (hi / lo < 4.0)
    throw InvalidInputError("remainder check: scales must span >= 2 octaves");
}

// |exact KL - m_F| at each scale of the step; the residual of the quadratic
// policy-shift model should shrink cubically.
inline RemainderFit kl_remainder_check(const LastLayer& layer,
                                       std::span<const DenseVec> state_features,
                                       const CandidateStep& step,
                                       const std::vector<double>& scales) {
  check_scales(scales);
  auto factors = exact_state_factors(layer, state_features);
  std::vector<double> errors;
  errors.reserve(scales.size());
  for (double s : scales) {
    RowSparseMatrix scaled = step.rows;
    scaled.scale(s);
    CandidateStep cand = make_candidate_step(std::move(scaled));
    const double m_f = 0.5 * directional_fisher(factors, cand);
    LastLayer moved = apply_update(layer, cand.rows, 1.0);
    const double kl = exact_kl(layer, moved, state_features);
    if (kl > 0.1)
      throw InvalidInputError("kl_remainder_check: step too large, KL > 0.1");
    errors.push_back(std::abs(kl - m_f));
  }
  return fit_log_slope(scales, errors);
}

// |exact delta-J - m_H| at each scale, on an enumerable one-step MDP.
inline RemainderFit objective_remainder_check(const EnvSpec& spec,
                                              const FeatureEncoder& encoder,
                                              const LastLayer& layer,
                                              const CandidateStep& step,
                                              const std::vector<double>& scales) {
  check_scales(scales);
  auto factors = exact_objective_factors(spec, encoder, layer);
  const double j0 = exact_objective(spec, encoder, layer);
  std::vector<double> errors;
  errors.reserve(scales.size());
  for (double s : scales) {
    RowSparseMatrix scaled = step.rows;
    scaled.scale(s);
    CandidateStep cand = make_candidate_step(std::move(scaled));
    const ShiftEstimate shift = shift_estimate(factors, cand);
    const double j1 =
        exact_objective(spec, encoder, apply_update(layer, cand.rows, 1.0));
    errors.push_back(std::abs((j1 - j0) - shift.m_h));
  }
  return fit_log_slope(scales, errors);
}

// ---------------------------------------------------------------------------
// Top-k truncation bias
// ---------------------------------------------------------------------------

struct TruncationBiasReport {
  double fisher_bias = 0.0;    // |truncated - full| directional Fisher
  double hessian_bias = 0.0;   // same for the Hessian estimate
  double fisher_bound = 0.0;   // tail-mass bound on the Fisher gap
  double hessian_bound = 0.0;  // tail-mass bound on the Hessian gap
};

// Drop every factor's support to its top_k most likely tokens (keeping the
// sampled action) and measure how far the directional curvatures move. The
// per-token bounds follow from |a^2-b^2| <= |a-b| (|a|+|b|) with
// |a-b| <= tail * max|v| and |a|,|b| <= 2 max|v|.
inline TruncationBiasReport truncation_bias_check(
    std::span<const TokenGradFactor> factors, const CandidateStep& step,
    std::int64_t top_k) {
  if (top_k < 1) throw InvalidInputError("truncation_bias_check: top_k >= 1");
  std::vector<TokenGradFactor> truncated(factors.begin(), factors.end());
  TruncationBiasReport report;
  double sw = 0.0;
  for (auto& f : truncated) {
    std::vector<SparseVec::Entry> es = f.pi.entries();
    std::sort(es.begin(), es.end(),
              [&](const SparseVec::Entry& a, const SparseVec::Entry& b) {
                if (a.value != b.value) return a.value > b.value;
                return a.index < b.index;
              });
    std::vector<SparseVec::Entry> kept;
    double tail = 0.0;
    bool have_action = false;
    for (std::size_t i = 0; i < es.size(); ++i) {
      const bool keep = static_cast<std::int64_t>(i) < top_k ||
                        es[i].index == f.action;
      if (keep) {
        kept.push_back(es[i]);
        if (es[i].index == f.action) have_action = true;
      } else {
        tail += es[i].value;
      }
    }
    (void)have_action;
    f.pi = SparseVec(f.pi.dim(), std::move(kept));
    f.u = policy_error_vector(f.pi, f.action);

    // Tail-mass bound terms need max |v| over the step's touched rows.
    double max_v = 0.0;
    for (const auto& [r, row] : step.rows.rows()) {
      double v = 0.0;
      for (std::size_t j = 0; j < f.h.size(); ++j) v += row[j] * f.h[j];
      max_v = std::max(max_v, std::abs(v));
    }
    report.fisher_bound += f.sample_weight * 4.0 * tail * max_v * max_v;
    report.hessian_bound += f.sample_weight *
                            std::abs(f.discount_weight * f.advantage) * 7.0 *
                            tail * max_v * max_v;
    sw += f.sample_weight;
  }
  report.fisher_bound /= sw;
  report.hessian_bound /= sw;
  report.fisher_bias = std::abs(directional_fisher(factors, step) -
                                directional_fisher(truncated, step));
  report.hessian_bias = std::abs(directional_hessian(factors, step) -
                                 directional_hessian(truncated, step));
  return report;
}

// Entrywise gap between E_a[grad grad'] and -E_a[hess] of log pi, both
// materialized densely over vec(W).
inline double fisher_identity_error(const LastLayer& layer, const DenseVec& h) {
  const std::int64_t K = layer.vocab_size();
  const std::int64_t d = layer.feature_dim();
  detail::check_guard(K, d);
  DenseVec pi = softmax(layer_logits(layer, h));
  DenseMatrix outer(K * d);  // E_a[grad grad']
  for (std::int64_t a = 0; a < K; ++a) {
    DenseVec u(static_cast<std::size_t>(K), 0.0);
    for (std::int64_t r = 0; r < K; ++r)
      u[static_cast<std::size_t>(r)] =
          (r == a ? 1.0 : 0.0) - pi[static_cast<std::size_t>(r)];
    const double pa = pi[static_cast<std::size_t>(a)];
    for (std::int64_t r = 0; r < K; ++r)
      for (std::int64_t c = 0; c < K; ++c)
        for (std::int64_t i = 0; i < d; ++i)
          for (std::int64_t j = 0; j < d; ++j)
            outer.at(r * d + i, c * d + j) +=
                pa * u[static_cast<std::size_t>(r)] *
                u[static_cast<std::size_t>(c)] *
                h[static_cast<std::size_t>(i)] * h[static_cast<std::size_t>(j)];
  }
  // -E_a[hess log pi] = (diag(pi) - pi pi') (x) h h', action-independent.
  double worst = 0.0;
  for (std::int64_t r = 0; r < K; ++r)
    for (std::int64_t c = 0; c < K; ++c) {
      const double diag = r == c ? pi[static_cast<std::size_t>(r)] : 0.0;
      const double f_rc = diag - pi[static_cast<std::size_t>(r)] *
                                     pi[static_cast<std::size_t>(c)];
      for (std::int64_t i = 0; i < d; ++i)
        for (std::int64_t j = 0; j < d; ++j) {
          const double neg_hess = f_rc * h[static_cast<std::size_t>(i)] *
                                  h[static_cast<std::size_t>(j)];
          worst = std::max(worst, std::abs(outer.at(r * d + i, c * d + j) -
                                           neg_hess));
        }
    }
  return worst;
}

}  // namespace capo::oracle
