#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "capo/errors.hpp"
#include "capo/estimators.hpp"
#include "capo/numerics.hpp"

namespace capo {

enum class StepKind { kSgd, kAdam };

inline std::string to_string(StepKind k) {
  return k == StepKind::kSgd ? "sgd" : "adam";
}

// Analytic stand-in for the optimizer's update rule on the last layer.
// Proposals use hypothetical moments so a rejected candidate leaves no trace;
// commit advances the real moments once per learning iteration.
struct StepModelState {
  StepKind kind = StepKind::kAdam;
  double lr = 1e-2;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  RowSparseMatrix p;  // first moment, row-sparse over W
  RowSparseMatrix q;  // second moment, entries >= 0
  std::int64_t t = 0;

  static StepModelState make(StepKind kind, double lr, std::int64_t vocab_size,
                             std::int64_t feature_dim, double beta1 = 0.9,
                             double beta2 = 0.999, double eps = 1e-8) {
    if (!(lr > 0.0)) throw InvalidInputError("StepModelState: lr must be > 0");
    if (beta1 < 0.0 || beta1 >= 1.0 || beta2 < 0.0 || beta2 >= 1.0)
      throw InvalidInputError("StepModelState: betas must be in [0,1)");
    if (!(eps > 0.0)) throw InvalidInputError("StepModelState: eps must be > 0");
    StepModelState s;
    s.kind = kind;
    s.lr = lr;
    s.beta1 = beta1;
    s.beta2 = beta2;
    s.eps = eps;
    s.p = RowSparseMatrix(vocab_size, feature_dim);
    s.q = RowSparseMatrix(vocab_size, feature_dim);
    return s;
  }
};

namespace detail {

// Union of row indices of grad and the moment matrices, ascending.
inline std::vector<std::int64_t> touched_rows(const StepModelState& state,
                                              const RowSparseMatrix& grad) {
  std::vector<std::int64_t> rows;
  rows.reserve(grad.stored_rows() + state.p.stored_rows());
  auto push_all = [&rows](const RowSparseMatrix& m) {
    for (const auto& [r, v] : m.rows()) rows.push_back(r);
  };
  push_all(grad);
  push_all(state.p);
  push_all(state.q);
  std::sort(rows.begin(), rows.end());
  rows.erase(std::unique(rows.begin(), rows.end()), rows.end());
  return rows;
}

}  // namespace detail

// Ascent direction for the hypothetical next update. SGD: lr * grad. Adam:
// lr * p_hat / (sqrt(q_hat) + eps) with moments advanced by one step and
// bias-corrected at t+1, without mutating the state.
inline CandidateStep propose_step(const StepModelState& state,
                                  const RowSparseMatrix& grad) {
  if (grad.n_rows() != state.p.n_rows() || grad.n_cols() != state.p.n_cols())
    throw InvalidInputError("propose_step: gradient shape mismatch");
  RowSparseMatrix step(grad.n_rows(), grad.n_cols());
  if (state.kind == StepKind::kSgd) {
    for (const auto& [r, v] : grad.rows()) {
      DenseVec& dst = step.row(r);
      for (std::size_t j = 0; j < v.size(); ++j) dst[j] = state.lr * v[j];
    }
    return make_candidate_step(std::move(step));
  }
  const double bc1 = 1.0 - std::pow(state.beta1, static_cast<double>(state.t + 1));
  const double bc2 = 1.0 - std::pow(state.beta2, static_cast<double>(state.t + 1));
  for (std::int64_t r : detail::touched_rows(state, grad)) {
    const DenseVec* g = grad.find_row(r);
    const DenseVec* pr = state.p.find_row(r);
    const DenseVec* qr = state.q.find_row(r);
    DenseVec& dst = step.row(r);
    for (std::size_t j = 0; j < dst.size(); ++j) {
      const double gj = g ? (*g)[j] : 0.0;
      const double pj = (pr ? (*pr)[j] : 0.0) * state.beta1 +
                        (1.0 - state.beta1) * gj;
      const double qj = (qr ? (*qr)[j] : 0.0) * state.beta2 +
                        (1.0 - state.beta2) * gj * gj;
      dst[j] = state.lr * (pj / bc1) / (std::sqrt(qj / bc2) + state.eps);
    }
  }
  return make_candidate_step(std::move(step));
}

// Advance the moments exactly as propose_step hypothesized, on the gradient
// that was actually applied. SGD keeps only the update counter.
inline StepModelState commit(const StepModelState& state,
                             const RowSparseMatrix& grad) {
  if (grad.n_rows() != state.p.n_rows() || grad.n_cols() != state.p.n_cols())
    throw InvalidInputError("commit: gradient shape mismatch");
  StepModelState next = state;
  next.t = state.t + 1;
  if (state.kind == StepKind::kSgd) return next;
  for (std::int64_t r : detail::touched_rows(state, grad)) {
    const DenseVec* g = grad.find_row(r);
    DenseVec& pj = next.p.row(r);
    DenseVec& qj = next.q.row(r);
    for (std::size_t j = 0; j < pj.size(); ++j) {
      const double gj = g ? (*g)[j] : 0.0;
      pj[j] = state.beta1 * pj[j] + (1.0 - state.beta1) * gj;
      qj[j] = state.beta2 * qj[j] + (1.0 - state.beta2) * gj * gj;
    }
  }
  return next;
}

}  // namespace capo
