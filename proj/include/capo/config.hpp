#pragma once

#include <cmath>
#include <cstdint>
#include <fstream>
#include <limits>
#include <string>
#include <vector>

#include <json.hpp>

#include "capo/env.hpp"
#include "capo/errors.hpp"
#include "capo/optimizer.hpp"
#include "capo/policy.hpp"
#include "capo/stepmodel.hpp"

namespace capo {

using json = nlohmann::json;

namespace cfg_detail {

// Strict field reader: every key must exist with the right type, and unknown
// keys are rejected so override typos fail loudly with the field path.
class Section {
 public:
  Section(json j, std::string path) : j_(std::move(j)), path_(std::move(path)) {
    if (!j_.is_object())
      throw ConfigError(path_ + ": expected an object");
  }

  ~Section() = default;

  template <typename T>
  T get(const std::string& key, T fallback) {
    seen_.push_back(key);
    if (!j_.contains(key)) return fallback;
    try {
      return j_.at(key).get<T>();
    } catch (const json::exception&) {
      throw ConfigError(path_ + "." + key + ": wrong type");
    }
  }

  // "inf" is accepted for unbounded thresholds; JSON itself has no infinity.
  double get_extended(const std::string& key, double fallback) {
    seen_.push_back(key);
    if (!j_.contains(key)) return fallback;
    const json& v = j_.at(key);
    if (v.is_string()) {
      const std::string s = v.get<std::string>();
      if (s == "inf") return std::numeric_limits<double>::infinity();
      if (s == "-inf") return -std::numeric_limits<double>::infinity();
      throw ConfigError(path_ + "." + key + ": expected number, \"inf\" or \"-inf\"");
    }
    if (!v.is_number())
      throw ConfigError(path_ + "." + key + ": wrong type");
    return v.get<double>();
  }

  json subobject(const std::string& key) {
    seen_.push_back(key);
    if (!j_.contains(key)) return json::object();
    if (!j_.at(key).is_object())
      throw ConfigError(path_ + "." + key + ": expected an object");
    return j_.at(key);
  }

  void finish() const {
    for (auto it = j_.begin(); it != j_.end(); ++it) {
      bool known = false;
      for (const auto& k : seen_) known |= (k == it.key());
      if (!known) throw ConfigError(path_ + "." + it.key() + ": unknown field");
    }
  }

 private:
  json j_;
  std::string path_;
  std::vector<std::string> seen_;
};

inline json number_or_inf(double v) {
  if (std::isinf(v)) return v > 0 ? json("inf") : json("-inf");
  return json(v);
}

}  // namespace cfg_detail

struct EnvConfig {
  std::string family = "copy";
  std::int64_t vocab_size = 8;
  std::int64_t horizon = 4;
  std::int64_t prompt_length = 2;
  double reward_bound = 1.0;
  double discount = 1.0;

  EnvSpec to_spec() const {
    EnvSpec s;
    if (family == "copy") s.family = PromptFamily::kCopy;
    else if (family == "parity") s.family = PromptFamily::kParity;
    else if (family == "modular_sum") s.family = PromptFamily::kModularSum;
    else throw ConfigError("env.family: unknown family '" + family + "'");
    s.vocab_size = vocab_size;
    s.horizon = horizon;
    s.prompt_length = prompt_length;
    s.reward_bound = reward_bound;
    s.discount = discount;
    try {
      s.validate();
    } catch (const InvalidInputError& e) {
      throw ConfigError(std::string("env: ") + e.what());
    }
    return s;
  }
};

struct PolicyConfig {
  std::int64_t feature_dim = 32;
  std::int64_t window = 4;
  std::string nonlinearity = "tanh";
  std::uint64_t encoder_seed = 1234;
  std::int64_t top_k = 0;  // 0 -> min(50, K)
  double temperature = 0.9;
  std::string behavior_logprob = "sampling";  // or "full"
  double init_scale = 0.0;  // 0 -> zero weights, else N(0, scale^2)

  Policy build(std::int64_t vocab_size) const {
    Policy p;
    Nonlinearity nl;
    if (nonlinearity == "tanh") nl = Nonlinearity::kTanh;
    else if (nonlinearity == "identity") nl = Nonlinearity::kIdentity;
    else throw ConfigError("policy.nonlinearity: unknown '" + nonlinearity + "'");
    p.encoder = FeatureEncoder(vocab_size, feature_dim, window, nl, encoder_seed);
    p.layer = LastLayer(vocab_size, feature_dim);
    if (init_scale != 0.0) {
      RngStream rng(encoder_seed, 0x11A57);
      for (std::int64_t r = 0; r < vocab_size; ++r)
        for (std::int64_t j = 0; j < feature_dim; ++j)
          p.layer.set_weight(r, j, init_scale * rng.normal());
    }
    p.top_k = top_k == 0 ? Policy::default_top_k(vocab_size) : top_k;
    if (p.top_k < 1 || p.top_k > vocab_size)
      throw ConfigError("policy.top_k: out of [1, K]");
    if (!(temperature > 0.0))
      throw ConfigError("policy.temperature: must be > 0");
    p.temperature = temperature;
    if (behavior_logprob == "sampling")
      p.behavior_mode = BehaviorLogprobMode::kSampling;
    else if (behavior_logprob == "full")
      p.behavior_mode = BehaviorLogprobMode::kFull;
    else
      throw ConfigError("policy.behavior_logprob: unknown '" + behavior_logprob + "'");
    return p;
  }
};

struct ObjectiveSection {
  std::string kind = "grpo";
  double grpo_eps = 1e-4;
  double clip_eps = 0.2;
  double kl_beta = 0.0;
  std::string baseline = "mean";

  ObjectiveParams to_params(double env_discount) const {
    ObjectiveParams p;
    if (kind == "grpo") p.kind = Objective::kGrpo;
    else if (kind == "dr_grpo") p.kind = Objective::kDrGrpo;
    else if (kind == "reinforce") p.kind = Objective::kReinforce;
    else throw ConfigError("objective.kind: unknown '" + kind + "'");
    if (!(grpo_eps > 0.0)) throw ConfigError("objective.grpo_eps: must be > 0");
    if (clip_eps < 0.0) throw ConfigError("objective.clip_eps: must be >= 0");
    if (kl_beta < 0.0) throw ConfigError("objective.kl_beta: must be >= 0");
    p.grpo_eps = grpo_eps;
    p.clip_eps = clip_eps;
    p.kl_beta = kl_beta;
    if (baseline == "mean") p.baseline = ReinforceBaseline::kMean;
    else if (baseline == "none") p.baseline = ReinforceBaseline::kNone;
    else throw ConfigError("objective.baseline: unknown '" + baseline + "'");
    p.gamma = env_discount;
    return p;
  }
};

struct CapoSection {
  bool enabled = false;
  std::string mode = "symmetric";
  double delta_h = 1e-2;
  double delta_h_high = std::numeric_limits<double>::infinity();
  double delta_f = 1e-4;
  std::string granularity = "token";

  ThresholdConfig to_thresholds() const {
    ThresholdConfig t;
    if (mode == "symmetric") t.mode = ThresholdMode::kSymmetric;
    else if (mode == "theorem") t.mode = ThresholdMode::kTheorem;
    else throw ConfigError("capo.mode: unknown '" + mode + "'");
    t.delta_h = delta_h;
    t.delta_h_high = delta_h_high;
    t.delta_f = delta_f;
    if (granularity == "token") t.granularity = Granularity::kToken;
    else if (granularity == "trajectory") t.granularity = Granularity::kTrajectory;
    else if (granularity == "group") t.granularity = Granularity::kGroup;
    else if (granularity == "batch") t.granularity = Granularity::kBatch;
    else throw ConfigError("capo.granularity: unknown '" + granularity + "'");
    try {
      t.validate();
    } catch (const InvalidInputError& e) {
      throw ConfigError(std::string("capo: ") + e.what());
    }
    return t;
  }
};

struct StepModelSection {
  std::string kind = "adam";
  double lr = 1e-2;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;

  StepModelState build(std::int64_t vocab_size, std::int64_t feature_dim) const {
    StepKind k;
    if (kind == "adam") k = StepKind::kAdam;
    else if (kind == "sgd") k = StepKind::kSgd;
    else throw ConfigError("stepmodel.kind: unknown '" + kind + "'");
    try {
      return StepModelState::make(k, lr, vocab_size, feature_dim, beta1, beta2,
                                  eps);
    } catch (const InvalidInputError& e) {
      throw ConfigError(std::string("stepmodel: ") + e.what());
    }
  }
};

struct ScheduleSection {
  std::string kind = "cosine";  // cosine | constant
  double warmup_ratio = 0.1;

  void validate() const {
    if (kind != "cosine" && kind != "constant")
      throw ConfigError("schedule.kind: unknown '" + kind + "'");
    if (warmup_ratio < 0.0 || warmup_ratio > 1.0)
      throw ConfigError("schedule.warmup_ratio: must be in [0,1]");
  }
};

// Learning rate at a 0-based iteration index: linear warmup, then constant
// or cosine decay to zero over the remaining iterations.
inline double scheduled_lr(const ScheduleSection& s, double base_lr,
                           std::int64_t iteration, std::int64_t total) {
  const auto warmup = static_cast<std::int64_t>(
      std::llround(s.warmup_ratio * static_cast<double>(total)));
  if (iteration < warmup)
    return base_lr * static_cast<double>(iteration + 1) /
           static_cast<double>(warmup);
  if (s.kind == "constant") return base_lr;
  const double span = static_cast<double>(std::max<std::int64_t>(1, total - warmup));
  const double progress = static_cast<double>(iteration - warmup) / span;
  return base_lr * 0.5 * (1.0 + std::cos(3.14159265358979323846 * progress));
}

struct SamplingSection {
  std::int64_t group_size = 8;
  std::int64_t n_prompts = 12;
  std::int64_t t_reuse = 1;

  void validate() const {
    if (group_size < 2) throw ConfigError("sampling.group_size: must be >= 2");
    if (n_prompts < 1) throw ConfigError("sampling.n_prompts: must be >= 1");
    if (t_reuse < 1) throw ConfigError("sampling.t_reuse: must be >= 1");
  }
};

struct RunSection {
  std::int64_t iterations = 100;
  std::vector<std::uint64_t> seeds = {1};
  std::string out_dir = "runs/default";
  std::int64_t checkpoint_interval = 50;
  std::int64_t eval_exact_every = 0;  // 0 = off
  double enumeration_budget = kDefaultEnumerationBudget;

  void validate() const {
    if (iterations < 0) throw ConfigError("run.iterations: must be >= 0");
    if (seeds.empty()) throw ConfigError("run.seeds: must be non-empty");
    if (checkpoint_interval < 0)
      throw ConfigError("run.checkpoint_interval: must be >= 0");
    if (eval_exact_every < 0)
      throw ConfigError("run.eval_exact_every: must be >= 0");
  }
};

struct RunConfig {
  EnvConfig env;
  PolicyConfig policy;
  ObjectiveSection objective;
  CapoSection capo;
  StepModelSection stepmodel;
  ScheduleSection schedule;
  SamplingSection sampling;
  RunSection run;

  void validate() const {
    env.to_spec();
    policy.build(env.vocab_size);
    objective.to_params(env.discount);
    capo.to_thresholds();
    stepmodel.build(env.vocab_size, policy.feature_dim);
    schedule.validate();
    sampling.validate();
    run.validate();
  }

  json to_json() const {
    json j;
    j["env"] = {{"family", env.family},
                {"vocab_size", env.vocab_size},
                {"horizon", env.horizon},
                {"prompt_length", env.prompt_length},
                {"reward_bound", env.reward_bound},
                {"discount", env.discount}};
    j["policy"] = {{"feature_dim", policy.feature_dim},
                   {"window", policy.window},
                   {"nonlinearity", policy.nonlinearity},
                   {"encoder_seed", policy.encoder_seed},
                   {"top_k", policy.top_k},
                   {"temperature", policy.temperature},
                   {"behavior_logprob", policy.behavior_logprob},
                   {"init_scale", policy.init_scale}};
    j["objective"] = {{"kind", objective.kind},
                      {"grpo_eps", objective.grpo_eps},
                      {"clip_eps", objective.clip_eps},
                      {"kl_beta", objective.kl_beta},
                      {"baseline", objective.baseline}};
    j["capo"] = {{"enabled", capo.enabled},
                 {"mode", capo.mode},
                 {"delta_h", cfg_detail::number_or_inf(capo.delta_h)},
                 {"delta_h_high", cfg_detail::number_or_inf(capo.delta_h_high)},
                 {"delta_f", cfg_detail::number_or_inf(capo.delta_f)},
                 {"granularity", capo.granularity}};
    j["stepmodel"] = {{"kind", stepmodel.kind},
                      {"lr", stepmodel.lr},
                      {"beta1", stepmodel.beta1},
                      {"beta2", stepmodel.beta2},
                      {"eps", stepmodel.eps}};
    j["schedule"] = {{"kind", schedule.kind},
                     {"warmup_ratio", schedule.warmup_ratio}};
    j["sampling"] = {{"group_size", sampling.group_size},
                     {"n_prompts", sampling.n_prompts},
                     {"t_reuse", sampling.t_reuse}};
    j["run"] = {{"iterations", run.iterations},
                {"seeds", run.seeds},
                {"out_dir", run.out_dir},
                {"checkpoint_interval", run.checkpoint_interval},
                {"eval_exact_every", run.eval_exact_every},
                {"enumeration_budget", run.enumeration_budget}};
    return j;
  }

  static RunConfig from_json(const json& j) {
    RunConfig c;
    cfg_detail::Section root(j, "config");
    {
      cfg_detail::Section s(root.subobject("env"), "env");
      c.env.family = s.get<std::string>("family", c.env.family);
      c.env.vocab_size = s.get<std::int64_t>("vocab_size", c.env.vocab_size);
      c.env.horizon = s.get<std::int64_t>("horizon", c.env.horizon);
      c.env.prompt_length =
          s.get<std::int64_t>("prompt_length", c.env.prompt_length);
      c.env.reward_bound = s.get<double>("reward_bound", c.env.reward_bound);
      c.env.discount = s.get<double>("discount", c.env.discount);
      s.finish();
    }
    {
      cfg_detail::Section s(root.subobject("policy"), "policy");
      c.policy.feature_dim =
          s.get<std::int64_t>("feature_dim", c.policy.feature_dim);
      c.policy.window = s.get<std::int64_t>("window", c.policy.window);
      c.policy.nonlinearity =
          s.get<std::string>("nonlinearity", c.policy.nonlinearity);
      c.policy.encoder_seed =
          s.get<std::uint64_t>("encoder_seed", c.policy.encoder_seed);
      c.policy.top_k = s.get<std::int64_t>("top_k", c.policy.top_k);
      c.policy.temperature = s.get<double>("temperature", c.policy.temperature);
      c.policy.behavior_logprob =
          s.get<std::string>("behavior_logprob", c.policy.behavior_logprob);
      c.policy.init_scale = s.get<double>("init_scale", c.policy.init_scale);
      s.finish();
    }
    {
      cfg_detail::Section s(root.subobject("objective"), "objective");
      c.objective.kind = s.get<std::string>("kind", c.objective.kind);
      c.objective.grpo_eps = s.get<double>("grpo_eps", c.objective.grpo_eps);
      c.objective.clip_eps = s.get<double>("clip_eps", c.objective.clip_eps);
      c.objective.kl_beta = s.get<double>("kl_beta", c.objective.kl_beta);
      c.objective.baseline = s.get<std::string>("baseline", c.objective.baseline);
      s.finish();
    }
    {
      cfg_detail::Section s(root.subobject("capo"), "capo");
      c.capo.enabled = s.get<bool>("enabled", c.capo.enabled);
      c.capo.mode = s.get<std::string>("mode", c.capo.mode);
      c.capo.delta_h = s.get_extended("delta_h", c.capo.delta_h);
      c.capo.delta_h_high = s.get_extended("delta_h_high", c.capo.delta_h_high);
      c.capo.delta_f = s.get_extended("delta_f", c.capo.delta_f);
      c.capo.granularity = s.get<std::string>("granularity", c.capo.granularity);
      s.finish();
    }
    {
      cfg_detail::Section s(root.subobject("stepmodel"), "stepmodel");
      c.stepmodel.kind = s.get<std::string>("kind", c.stepmodel.kind);
      c.stepmodel.lr = s.get<double>("lr", c.stepmodel.lr);
      c.stepmodel.beta1 = s.get<double>("beta1", c.stepmodel.beta1);
      c.stepmodel.beta2 = s.get<double>("beta2", c.stepmodel.beta2);
      c.stepmodel.eps = s.get<double>("eps", c.stepmodel.eps);
      s.finish();
    }
    {
      cfg_detail::Section s(root.subobject("schedule"), "schedule");
      c.schedule.kind = s.get<std::string>("kind", c.schedule.kind);
      c.schedule.warmup_ratio =
          s.get<double>("warmup_ratio", c.schedule.warmup_ratio);
      s.finish();
    }
    {
      cfg_detail::Section s(root.subobject("sampling"), "sampling");
      c.sampling.group_size =
          s.get<std::int64_t>("group_size", c.sampling.group_size);
      c.sampling.n_prompts =
          s.get<std::int64_t>("n_prompts", c.sampling.n_prompts);
      c.sampling.t_reuse = s.get<std::int64_t>("t_reuse", c.sampling.t_reuse);
      s.finish();
    }
    {
      cfg_detail::Section s(root.subobject("run"), "run");
      c.run.iterations = s.get<std::int64_t>("iterations", c.run.iterations);
      c.run.seeds = s.get<std::vector<std::uint64_t>>("seeds", c.run.seeds);
      c.run.out_dir = s.get<std::string>("out_dir", c.run.out_dir);
      c.run.checkpoint_interval =
          s.get<std::int64_t>("checkpoint_interval", c.run.checkpoint_interval);
      c.run.eval_exact_every =
          s.get<std::int64_t>("eval_exact_every", c.run.eval_exact_every);
      c.run.enumeration_budget =
          s.get<double>("enumeration_budget", c.run.enumeration_budget);
      s.finish();
    }
    root.finish();
    c.validate();
    return c;
  }
};

// key.path=value overrides; values parse as JSON scalars, falling back to
// strings so `--set objective.kind=grpo` works without quoting.
inline void apply_override(json& j, const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos || eq == 0)
    throw ConfigError("override '" + assignment + "': expected key.path=value");
  const std::string path = assignment.substr(0, eq);
  const std::string raw = assignment.substr(eq + 1);
  json value;
  try {
    value = json::parse(raw);
  } catch (const json::exception&) {
    value = raw;  // bare string
  }
  json* node = &j;
  std::size_t start = 0;
  while (true) {
    const auto dot = path.find('.', start);
    const std::string key = path.substr(start, dot - start);
    if (key.empty())
      throw ConfigError("override '" + assignment + "': empty path segment");
    if (dot == std::string::npos) {
      (*node)[key] = value;
      break;
    }
    node = &((*node)[key]);
    if (!node->is_object() && !node->is_null())
      throw ConfigError("override '" + assignment + "': path is not an object");
    start = dot + 1;
  }
}

inline json load_json_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open '" + path + "'");
  try {
    return json::parse(in, nullptr, true, true);  // allow comments
  } catch (const json::exception& e) {
    throw ConfigError("failed to parse '" + path + "': " + e.what());
  }
}

inline RunConfig load_config(const std::string& path,
                             const std::vector<std::string>& overrides = {}) {
  json j = load_json_file(path);
  for (const auto& o : overrides) apply_override(j, o);
  return RunConfig::from_json(j);
}

}  // namespace capo
