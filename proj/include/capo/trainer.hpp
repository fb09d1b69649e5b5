#pragma once

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <optional>
#include <string>
#include <vector>

#include "capo/checkpoint.hpp"
#include "capo/config.hpp"
#include "capo/env.hpp"
#include "capo/errors.hpp"
#include "capo/estimators.hpp"
#include "capo/metrics.hpp"
#include "capo/optimizer.hpp"
#include "capo/oracle.hpp"
#include "capo/policy.hpp"
#include "capo/stepmodel.hpp"

namespace capo {

// One training run over a single seed: sample groups, build token factors,
// optionally filter them through the trust-region test, update the last
// layer, repeat. All randomness flows from one stream per run, so a
// (config, seed) pair fully determines every emitted metric.
class Trainer {
 public:
  Trainer(const RunConfig& cfg, std::uint64_t seed)
      : cfg_(cfg),
        spec_(cfg.env.to_spec()),
        policy_(cfg.policy.build(cfg.env.vocab_size)),
        objective_(cfg.objective.to_params(cfg.env.discount)),
        stepmodel_(cfg.stepmodel.build(cfg.env.vocab_size, cfg.policy.feature_dim)),
        base_lr_(cfg.stepmodel.lr),
        run_rng_(seed, 0) {
    cfg_.validate();
    if (objective_.kl_beta > 0.0) ref_layer_ = policy_.layer;
    if (cfg_.capo.enabled) thresholds_ = cfg_.capo.to_thresholds();
    if (cfg_.run.eval_exact_every > 0) {
      // Fail at startup, not mid-run, if exact evaluation is not enumerable.
      exact_objective(spec_, policy_.encoder, policy_.layer,
                      cfg_.run.enumeration_budget);
    }
  }

  const Policy& policy() const { return policy_; }
  const StepModelState& stepmodel() const { return stepmodel_; }
  std::int64_t iteration() const { return iteration_; }
  std::int64_t completions() const { return completions_; }
  const PhaseTimings& last_timings() const { return timings_; }

  // Pre-training evaluation record (iteration 0).
  MetricsRecord initial_record() {
    MetricsRecord rec;
    rec.iteration = 0;
    rec.completions = 0;
    rec.lr = scheduled_lr(cfg_.schedule, base_lr_, 0, cfg_.run.iterations);
    maybe_eval_exact(rec, /*force=*/cfg_.run.eval_exact_every > 0);
    return rec;
  }

  MetricsRecord step() {
    timings_ = PhaseTimings{};
    stepmodel_.lr =
        scheduled_lr(cfg_.schedule, base_lr_, iteration_, cfg_.run.iterations);

    GroupBatch batch = [&] {
      PhaseTimer t(timings_, "generation");
      RngStream iter_rng(run_rng_.seed(), run_rng_.next_u64());
      return sample_group_batch(spec_, policy_, cfg_.sampling.group_size,
                                cfg_.sampling.n_prompts, iter_rng);
    }();
    completions_ += cfg_.sampling.group_size * cfg_.sampling.n_prompts;

    MetricsRecord rec;
    rec.iteration = iteration_ + 1;
    rec.completions = completions_;
    rec.lr = stepmodel_.lr;
    double reward_sum = 0.0;
    for (const auto& g : batch.groups)
      for (const auto& t : g.trajectories) reward_sum += t.total_return();
    rec.reward_mean = reward_sum / static_cast<double>(batch.n_trajectories());

    std::int64_t rejected_tokens = 0;
    std::int64_t total_tokens = 0;
    bool any_applied = false;
    for (std::int64_t pass = 0; pass < cfg_.sampling.t_reuse; ++pass) {
      std::vector<TokenGradFactor> factors = [&] {
        PhaseTimer t(timings_, "token_gradients");
        return objective_factors(batch, objective_, policy_,
                                 ref_layer_ ? &*ref_layer_ : nullptr);
      }();

      FilterResult filter;
      if (cfg_.capo.enabled) {
        std::vector<Subset> subsets =
            partition(batch, factors, thresholds_.granularity);
        filter = run_filter_timed(subsets, factors);
        rec.n_subsets += static_cast<std::int64_t>(filter.records.size());
        rec.accepted_subsets += filter.n_accepted_subsets;
        for (const auto& r : filter.records)
          rec.rejection_histogram[to_string(r.reason)] += 1;
      } else {
        filter.token_mask.assign(factors.size(), true);
      }
      for (bool kept : filter.token_mask) {
        ++total_tokens;
        if (!kept) ++rejected_tokens;
      }

      UpdateResult upd = run_update_timed(factors, filter.token_mask);
      any_applied |= upd.applied;
      rec.step_norm = upd.applied ? upd.step.norm : 0.0;
      rec.grad_norm = upd.grad_norm;
      if (upd.applied) {
        // Whole-batch shifts of the committed step; attributed to the m_h
        // phase (conservative for the overhead accounting).
        PhaseTimer th(timings_, "m_h");
        ShiftEstimate global = shift_estimate(factors, upd.step);
        rec.m_h_global = global.m_h;
        rec.m_f_global = global.m_f;
      } else {
        rec.m_h_global = 0.0;
        rec.m_f_global = 0.0;
      }
    }
    rec.rejection_rate = total_tokens == 0
                             ? 0.0
                             : static_cast<double>(rejected_tokens) /
                                   static_cast<double>(total_tokens);
    rec.update_skipped = !any_applied;

    ++iteration_;
    maybe_eval_exact(rec, /*force=*/false);
    return rec;
  }

  Checkpoint make_checkpoint() const {
    Checkpoint c;
    c.iteration = iteration_;
    c.completions = completions_;
    c.layer = policy_.layer;
    c.ref_layer = ref_layer_;
    c.stepmodel = stepmodel_;
    c.rng_state = run_rng_.serialize();
    return c;
  }

  void restore(const Checkpoint& c) {
    if (c.layer.vocab_size() != policy_.layer.vocab_size() ||
        c.layer.feature_dim() != policy_.layer.feature_dim())
      throw DataError("restore: checkpoint does not match the configuration");
    iteration_ = c.iteration;
    completions_ = c.completions;
    policy_.layer = c.layer;
    ref_layer_ = c.ref_layer;
    stepmodel_ = c.stepmodel;
    run_rng_ = RngStream::deserialize(c.rng_state);
  }

 private:
  void maybe_eval_exact(MetricsRecord& rec, bool force) {
    const auto every = cfg_.run.eval_exact_every;
    if (every <= 0) return;
    if (!force && rec.iteration % every != 0) return;
    PhaseTimer t(timings_, "exact_eval");
    rec.exact_j = exact_objective(spec_, policy_.encoder, policy_.layer,
                                  cfg_.run.enumeration_budget);
  }

  // capo_filter with the per-phase instrumentation of the timing breakdown:
  // local gradients + proposals, then m_F, then m_H, then the mask decision.
  FilterResult run_filter_timed(const std::vector<Subset>& subsets,
                                std::span<const TokenGradFactor> factors) {
    FilterResult out;
    out.token_mask.assign(factors.size(), false);
    out.records.reserve(subsets.size());
    std::vector<CandidateStep> steps(subsets.size());
    std::vector<RowSparseMatrix> grads(subsets.size());
    {
      PhaseTimer t(timings_, "step_proposal");
      for (std::size_t i = 0; i < subsets.size(); ++i) {
        auto slice = factors.subspan(
            static_cast<std::size_t>(subsets[i].first),
            static_cast<std::size_t>(subsets[i].count));
        grads[i] = model_gradient(slice, stepmodel_.p.n_rows(),
                                  stepmodel_.p.n_cols());
        steps[i] = propose_step(stepmodel_, grads[i]);
        out.max_step_norm = std::max(out.max_step_norm, steps[i].norm);
      }
    }
    std::vector<ShiftEstimate> shifts(subsets.size());
    {
      PhaseTimer t(timings_, "m_f");
      for (std::size_t i = 0; i < subsets.size(); ++i) {
        auto slice = factors.subspan(
            static_cast<std::size_t>(subsets[i].first),
            static_cast<std::size_t>(subsets[i].count));
        shifts[i].m_f = 0.5 * directional_fisher(slice, steps[i]);
      }
    }
    {
      PhaseTimer t(timings_, "m_h");
      for (std::size_t i = 0; i < subsets.size(); ++i) {
        auto slice = factors.subspan(
            static_cast<std::size_t>(subsets[i].first),
            static_cast<std::size_t>(subsets[i].count));
        shifts[i].gdot = grads[i].dot(steps[i].rows);
        shifts[i].hquad = 0.5 * directional_hessian(slice, steps[i]);
        shifts[i].m_h = shifts[i].gdot + shifts[i].hquad;
        shifts[i].n_tokens = subsets[i].count;
      }
    }
    {
      PhaseTimer t(timings_, "mask");
      for (std::size_t i = 0; i < subsets.size(); ++i) {
        AcceptanceRecord rec;
        rec.subset_id = subsets[i].id;
        rec.shift = shifts[i];
        rec.step_norm = steps[i].norm;
        rec.reason = acceptance_reason(shifts[i], thresholds_);
        if (rec.reason == RejectReason::kOk) {
          rec.accepted = true;
          ++out.n_accepted_subsets;
          for (std::int64_t k = 0; k < subsets[i].count; ++k)
            out.token_mask[static_cast<std::size_t>(subsets[i].first + k)] =
                true;
        }
        out.records.push_back(rec);
      }
    }
    return out;
  }

  UpdateResult run_update_timed(const std::vector<TokenGradFactor>& factors,
                                const std::vector<bool>& mask) {
    UpdateResult out;
    std::vector<TokenGradFactor> accepted;
    {
      PhaseTimer t(timings_, "aggregate_gradient");
      accepted.reserve(factors.size());
      for (std::size_t i = 0; i < factors.size(); ++i)
        if (mask[i]) accepted.push_back(factors[i]);
      if (accepted.empty()) return out;
      out.gradient = model_gradient(accepted, policy_.layer.vocab_size(),
                                    policy_.layer.feature_dim());
      out.grad_norm = out.gradient.norm();
    }
    {
      PhaseTimer t(timings_, "apply_update");
      out.step = propose_step(stepmodel_, out.gradient);
      policy_.layer = apply_update(policy_.layer, out.step.rows, 1.0);
    }
    {
      PhaseTimer t(timings_, "moment_update");
      stepmodel_ = commit(stepmodel_, out.gradient);
    }
    out.applied = true;
    return out;
  }

  RunConfig cfg_;
  EnvSpec spec_;
  Policy policy_;
  std::optional<LastLayer> ref_layer_;
  ObjectiveParams objective_;
  StepModelState stepmodel_;
  ThresholdConfig thresholds_;
  double base_lr_;
  RngStream run_rng_;
  std::int64_t iteration_ = 0;
  std::int64_t completions_ = 0;
  PhaseTimings timings_;
};

struct SeedRunSummary {
  std::uint64_t seed = 0;
  std::string run_dir;
  double final_reward = 0.0;      // last iteration's batch reward mean
  double peak_reward = 0.0;       // max over iterations
  double mean_rejection = 0.0;    // mean token rejection rate
  std::optional<double> final_exact_j;
  std::int64_t iterations = 0;
};

// Full file-backed run for one seed: resolved config snapshot, metrics and
// timing streams, periodic checkpoints.
inline SeedRunSummary run_seed(const RunConfig& cfg, std::uint64_t seed,
                               const std::string& run_dir) {
  namespace fs = std::filesystem;
  std::error_code ec;
  fs::create_directories(run_dir, ec);
  if (ec) throw IoError("cannot create run dir '" + run_dir + "'");

  {
    std::ofstream out(run_dir + "/resolved.config.json", std::ios::trunc);
    if (!out) throw IoError("cannot write resolved config");
    nlohmann::json j = cfg.to_json();
    j["run"]["active_seed"] = seed;
    out << j.dump(2) << '\n';
  }

  JsonlWriter metrics(run_dir + "/metrics.jsonl");
  JsonlWriter timing(run_dir + "/timing.jsonl");

  Trainer trainer(cfg, seed);
  SeedRunSummary summary;
  summary.seed = seed;
  summary.run_dir = run_dir;

  MetricsRecord first = trainer.initial_record();
  metrics.write(first.to_json());

  double rejection_sum = 0.0;
  for (std::int64_t i = 0; i < cfg.run.iterations; ++i) {
    MetricsRecord rec = trainer.step();
    metrics.write(rec.to_json());
    nlohmann::json t;
    t["iteration"] = rec.iteration;
    t["phases"] = trainer.last_timings().to_json();
    timing.write(t);

    summary.final_reward = rec.reward_mean.value_or(0.0);
    summary.peak_reward = std::max(summary.peak_reward, rec.reward_mean.value_or(0.0));
    rejection_sum += rec.rejection_rate;
    if (rec.exact_j) summary.final_exact_j = rec.exact_j;
    summary.iterations = rec.iteration;

    if (cfg.run.checkpoint_interval > 0 &&
        rec.iteration % cfg.run.checkpoint_interval == 0) {
      save_checkpoint(trainer.make_checkpoint(),
                      run_dir + "/checkpoint_" +
                          std::to_string(rec.iteration) + ".ckpt");
    }
  }
  save_checkpoint(trainer.make_checkpoint(), run_dir + "/checkpoint_final.ckpt");
  if (cfg.run.iterations > 0)
    summary.mean_rejection =
        rejection_sum / static_cast<double>(cfg.run.iterations);

  export_csv(run_dir + "/metrics.jsonl", run_dir + "/metrics.csv");
  return summary;
}

// Train every configured seed under out_dir/seed_<seed>/.
inline std::vector<SeedRunSummary> run_training(const RunConfig& cfg) {
  std::vector<SeedRunSummary> out;
  for (std::uint64_t seed : cfg.run.seeds) {
    const std::string dir =
        cfg.run.out_dir + "/seed_" + std::to_string(seed);
    out.push_back(run_seed(cfg, seed, dir));
  }
  return out;
}

}  // namespace capo
