#pragma once

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "capo/errors.hpp"
#include "capo/numerics.hpp"
#include "capo/policy.hpp"

namespace capo {

enum class PromptFamily { kCopy, kParity, kModularSum };

inline std::string to_string(PromptFamily f) {
  switch (f) {
    case PromptFamily::kCopy: return "copy";
    case PromptFamily::kParity: return "parity";
    case PromptFamily::kModularSum: return "modular_sum";
  }
  return "?";
}

// Token-generation MDP: states are prompt-plus-generated sequences, the
// transition appends the chosen token, and a binary verification reward is
// paid when the answer completes. Prompts never contain the pad token K-1.
struct EnvSpec {
  std::int64_t vocab_size = 8;   // K
  std::int64_t horizon = 4;      // T, cap on generated tokens
  PromptFamily family = PromptFamily::kCopy;
  std::int64_t prompt_length = 2;
  double reward_bound = 1.0;
  double discount = 1.0;  // gamma

  void validate() const {
    if (vocab_size < 2) throw InvalidInputError("EnvSpec: K must be >= 2");
    if (horizon < 1) throw InvalidInputError("EnvSpec: T must be >= 1");
    if (prompt_length < 1)
      throw InvalidInputError("EnvSpec: prompt_length must be >= 1");
    if (!(reward_bound > 0.0))
      throw InvalidInputError("EnvSpec: r_bound must be > 0");
    if (discount < 0.0 || discount > 1.0)
      throw InvalidInputError("EnvSpec: gamma must be in [0,1]");
    if (family == PromptFamily::kModularSum && prompt_length != 2)
      throw InvalidInputError("EnvSpec: modular_sum uses prompt_length 2");
  }

  // Tokens the answer needs; episodes end early once it is complete.
  std::int64_t answer_length() const {
    switch (family) {
      case PromptFamily::kCopy: return prompt_length;
      case PromptFamily::kParity: return 1;
      case PromptFamily::kModularSum: return 1;
    }
    return 1;
  }

  std::int64_t episode_length() const {
    return std::min(answer_length(), horizon);
  }
};

// Sampled token sequence with the per-step policy snapshots needed to
// rebuild gradients later without re-generation.
struct Trajectory {
  TokenSeq prompt;
  TokenSeq actions;
  std::vector<double> rewards;            // terminal-sparse
  std::vector<DenseVec> features;         // h per generated token
  std::vector<SparseVec> topk_probs;      // temperature-1 snapshot per token
  std::vector<double> logprob_behavior;   // per token, at sampling time
  std::int64_t group_id = 0;

  std::size_t length() const { return actions.size(); }

  double total_return() const {
    double acc = 0.0;
    for (double r : rewards) acc += r;
    return acc;
  }

  double discounted_return(double gamma) const {
    double acc = 0.0;
    double w = 1.0;
    for (double r : rewards) {
      acc += w * r;
      w *= gamma;
    }
    return acc;
  }

  void check_snapshots() const {
    if (rewards.size() != actions.size() ||
        features.size() != actions.size() ||
        topk_probs.size() != actions.size() ||
        logprob_behavior.size() != actions.size())
      throw DataError("Trajectory: missing per-step snapshot");
  }
};

struct Group {
  TokenSeq prompt;
  std::vector<Trajectory> trajectories;
};

struct GroupBatch {
  std::vector<Group> groups;
  std::int64_t group_size = 0;  // G

  std::size_t n_trajectories() const {
    std::size_t n = 0;
    for (const auto& g : groups) n += g.trajectories.size();
    return n;
  }

  std::size_t n_tokens() const {
    std::size_t n = 0;
    for (const auto& g : groups)
      for (const auto& t : g.trajectories) n += t.length();
    return n;
  }
};

// Number of distinct tokens a prompt position can take (pad excluded).
inline std::int64_t prompt_alphabet_size(const EnvSpec& spec) {
  return spec.vocab_size - 1;
}

inline bool verify_answer(const EnvSpec& spec, const TokenSeq& prompt,
                          const TokenSeq& actions) {
  if (static_cast<std::int64_t>(actions.size()) < spec.answer_length())
    return false;
  switch (spec.family) {
    case PromptFamily::kCopy:
      return actions == prompt;
    case PromptFamily::kParity: {
      std::int64_t sum = 0;
      for (std::int64_t t : prompt) sum += t;
      return actions.back() == (sum % 2);
    }
    case PromptFamily::kModularSum:
      return actions[0] == (prompt[0] + prompt[1]) % spec.vocab_size;
  }
  return false;
}

// rho_0: uniform over the family's valid prompts.
inline TokenSeq reset(const EnvSpec& spec, RngStream& rng) {
  spec.validate();
  TokenSeq prompt(static_cast<std::size_t>(spec.prompt_length));
  const std::int64_t alphabet = prompt_alphabet_size(spec);
  for (auto& t : prompt)
    t = static_cast<std::int64_t>(rng.uniform01() * alphabet);
  return prompt;
}

struct StepResult {
  TokenSeq next_state;
  double reward = 0.0;
  bool done = false;
};

// state = prompt followed by the tokens generated so far.
inline StepResult step(const EnvSpec& spec, const TokenSeq& state,
                       std::int64_t action) {
  if (action < 0 || action >= spec.vocab_size)
    throw InvalidInputError("step: action out of vocabulary");
  const std::int64_t generated =
      static_cast<std::int64_t>(state.size()) - spec.prompt_length;
  if (generated < 0 || generated >= spec.horizon)
    throw InvalidInputError("step: state length out of range");
  StepResult out;
  out.next_state = state;
  out.next_state.push_back(action);
  const std::int64_t n_gen = generated + 1;
  out.done = (n_gen >= spec.answer_length()) || (n_gen >= spec.horizon);
  if (out.done) {
    TokenSeq prompt(state.begin(), state.begin() + spec.prompt_length);
    TokenSeq actions(out.next_state.begin() + spec.prompt_length,
                     out.next_state.end());
    out.reward = verify_answer(spec, prompt, actions) ? 1.0 : 0.0;
  }
  return out;
}

inline Trajectory rollout(const EnvSpec& spec, const Policy& policy,
                          const TokenSeq& prompt, RngStream& rng,
                          std::int64_t group_id) {
  Trajectory traj;
  traj.prompt = prompt;
  traj.group_id = group_id;
  TokenSeq state = prompt;
  bool done = false;
  while (!done) {
    SampledToken tok = sample_token(policy, state, rng);
    StepResult sr = step(spec, state, tok.action);
    traj.actions.push_back(tok.action);
    traj.rewards.push_back(sr.reward);
    traj.features.push_back(std::move(tok.features));
    traj.topk_probs.push_back(std::move(tok.topk_probs));
    traj.logprob_behavior.push_back(tok.behavior_logprob);
    state = std::move(sr.next_state);
    done = sr.done;
  }
  return traj;
}

inline GroupBatch sample_group_batch(const EnvSpec& spec, const Policy& policy,
                                     std::int64_t group_size,
                                     std::int64_t n_prompts, RngStream& rng) {
  spec.validate();
  if (group_size < 2)
    throw InvalidInputError("sample_group_batch: G must be >= 2");
  if (n_prompts < 1)
    throw InvalidInputError("sample_group_batch: n_prompts must be >= 1");
  GroupBatch batch;
  batch.group_size = group_size;
  batch.groups.reserve(static_cast<std::size_t>(n_prompts));
  for (std::int64_t g = 0; g < n_prompts; ++g) {
    // One stream per group so collection can fan out without changing
    // results.
    RngStream group_rng(rng.seed(), rng.next_u64());
    Group group;
    group.prompt = reset(spec, group_rng);
    group.trajectories.reserve(static_cast<std::size_t>(group_size));
    for (std::int64_t i = 0; i < group_size; ++i)
      group.trajectories.push_back(
          rollout(spec, policy, group.prompt, group_rng, g));
    batch.groups.push_back(std::move(group));
  }
  return batch;
}

inline constexpr double kDefaultEnumerationBudget = 1e6;

inline std::vector<TokenSeq> enumerate_prompts(const EnvSpec& spec) {
  const std::int64_t alphabet = prompt_alphabet_size(spec);
  std::vector<TokenSeq> prompts;
  TokenSeq cur(static_cast<std::size_t>(spec.prompt_length), 0);
  while (true) {
    prompts.push_back(cur);
    std::int64_t pos = spec.prompt_length - 1;
    while (pos >= 0) {
      if (++cur[static_cast<std::size_t>(pos)] < alphabet) break;
      cur[static_cast<std::size_t>(pos)] = 0;
      --pos;
    }
    if (pos < 0) break;
  }
  return prompts;
}

// J(theta) by full enumeration over prompts and generated sequences, using
// the temperature-1 full softmax (the distribution being optimized, not the
// truncated sampling one). Exact up to summation roundoff; guarded by the
// enumeration budget.
inline double exact_objective(const EnvSpec& spec, const FeatureEncoder& encoder,
                              const LastLayer& layer,
                              double budget = kDefaultEnumerationBudget) {
  spec.validate();
  if (encoder.vocab_size() != spec.vocab_size ||
      layer.vocab_size() != spec.vocab_size)
    throw InvalidInputError("exact_objective: vocab size mismatch");
  const double n_prompts =
      std::pow(static_cast<double>(prompt_alphabet_size(spec)),
               static_cast<double>(spec.prompt_length));
  const double n_seqs = std::pow(static_cast<double>(spec.vocab_size),
                                 static_cast<double>(spec.episode_length()));
  if (n_prompts * n_seqs > budget)
    throw ResourceError("exact_objective: enumeration budget exceeded");

  std::vector<TokenSeq> prompts = enumerate_prompts(spec);
  double total = 0.0;
  // DFS over generated tokens, carrying the path probability and discount.
  struct Frame {
    TokenSeq state;
    double prob;
    double discount_weight;  // gamma^t for the reward paid at this depth
  };
  for (const TokenSeq& prompt : prompts) {
    std::vector<Frame> stack;
    stack.push_back({prompt, 1.0, 1.0});
    double j_prompt = 0.0;
    while (!stack.empty()) {
      Frame f = std::move(stack.back());
      stack.pop_back();
      DenseVec h = encoder.encode(f.state);
      ActionDistribution dist = action_distribution(layer, h, 1);
      for (std::int64_t a = spec.vocab_size - 1; a >= 0; --a) {
        StepResult sr = step(spec, f.state, a);
        const double p = f.prob * dist.full_probs[static_cast<std::size_t>(a)];
        if (sr.done) {
          j_prompt += p * f.discount_weight * sr.reward;
        } else {
          stack.push_back({std::move(sr.next_state), p,
                           f.discount_weight * spec.discount});
        }
      }
    }
    total += j_prompt;
  }
  return total / static_cast<double>(prompts.size());
}

}  // namespace capo
