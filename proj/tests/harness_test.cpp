#include <catch2/catch_amalgamated.hpp>
#include <cstdio>
#include <filesystem>
#include <fstream>

#include "capo/capo.hpp"

using namespace capo;
namespace fs = std::filesystem;

namespace {

RunConfig tiny_config() {
  RunConfig cfg;
  cfg.env.family = "copy";
  cfg.env.vocab_size = 4;
  cfg.env.prompt_length = 1;
  cfg.env.horizon = 2;
  cfg.policy.feature_dim = 4;
  cfg.policy.window = 2;
  cfg.policy.top_k = 3;
  cfg.objective.kind = "grpo";
  cfg.stepmodel.kind = "adam";
  cfg.stepmodel.lr = 0.05;
  cfg.schedule.kind = "constant";
  cfg.schedule.warmup_ratio = 0.0;
  cfg.sampling.group_size = 4;
  cfg.sampling.n_prompts = 3;
  cfg.run.iterations = 5;
  cfg.run.seeds = {7};
  cfg.run.checkpoint_interval = 0;
  return cfg;
}

struct TempDir {
  fs::path path;
  TempDir() {
    path = fs::temp_directory_path() /
           ("capo_test_" + std::to_string(::getpid()) + "_" +
            std::to_string(counter()++));
    fs::create_directories(path);
  }
  ~TempDir() {
    std::error_code ec;
    fs::remove_all(path, ec);
  }
  static int& counter() {
    static int c = 0;
    return c;
  }
};

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  REQUIRE(in);
  return std::string(std::istreambuf_iterator<char>(in), {});
}

}  // namespace

TEST_CASE("config json round trip and validation paths") {
  RunConfig cfg = tiny_config();
  json j = cfg.to_json();
  RunConfig back = RunConfig::from_json(j);
  CHECK(back.to_json() == j);

  json bad = j;
  bad["env"]["vocab_size"] = 1;
  CHECK_THROWS_WITH(RunConfig::from_json(bad),
                    Catch::Matchers::ContainsSubstring("env"));

  json typo = j;
  typo["objective"]["clip_epsilon"] = 0.1;
  CHECK_THROWS_WITH(RunConfig::from_json(typo),
                    Catch::Matchers::ContainsSubstring("clip_epsilon"));

  json wrong_type = j;
  wrong_type["sampling"]["group_size"] = "eight";
  CHECK_THROWS_WITH(RunConfig::from_json(wrong_type),
                    Catch::Matchers::ContainsSubstring("sampling.group_size"));

  json empty_seeds = j;
  empty_seeds["run"]["seeds"] = json::array();
  CHECK_THROWS_AS(RunConfig::from_json(empty_seeds), ConfigError);
}

TEST_CASE("config overrides and infinity handling") {
  json j = tiny_config().to_json();
  apply_override(j, "stepmodel.lr=0.5");
  apply_override(j, "objective.kind=reinforce");
  apply_override(j, "capo.enabled=true");
  apply_override(j, "capo.delta_f=\"inf\"");
  RunConfig cfg = RunConfig::from_json(j);
  CHECK(cfg.stepmodel.lr == 0.5);
  CHECK(cfg.objective.kind == "reinforce");
  CHECK(std::isinf(cfg.capo.delta_f));
  // infinity survives the round trip through the resolved snapshot
  RunConfig again = RunConfig::from_json(cfg.to_json());
  CHECK(std::isinf(again.capo.delta_f));

  CHECK_THROWS_AS(apply_override(j, "no_equals_sign"), ConfigError);
}

TEST_CASE("learning rate schedule: warmup then cosine") {
  ScheduleSection cosine;
  cosine.kind = "cosine";
  cosine.warmup_ratio = 0.1;
  const double base = 1.0;
  // warmup covers iterations 0..9 of 100
  CHECK(scheduled_lr(cosine, base, 0, 100) == Catch::Approx(0.1));
  CHECK(scheduled_lr(cosine, base, 9, 100) == Catch::Approx(1.0));
  CHECK(scheduled_lr(cosine, base, 10, 100) == Catch::Approx(1.0));
  CHECK(scheduled_lr(cosine, base, 55, 100) ==
        Catch::Approx(0.5 * (1 + std::cos(3.14159265358979323846 * 0.5)))
            .margin(1e-12));
  CHECK(scheduled_lr(cosine, base, 99, 100) < 0.01);

  ScheduleSection constant;
  constant.kind = "constant";
  constant.warmup_ratio = 0.0;
  CHECK(scheduled_lr(constant, base, 0, 100) == base);
  CHECK(scheduled_lr(constant, base, 99, 100) == base);
}

TEST_CASE("trainer metrics: completions formula and histogram totals") {
  RunConfig cfg = tiny_config();
  cfg.capo.enabled = true;
  cfg.capo.mode = "symmetric";
  cfg.capo.delta_h = 1e9;
  cfg.capo.delta_f = 1e9;
  Trainer trainer(cfg, 3);
  std::int64_t prev_completions = -1;
  for (int i = 1; i <= 4; ++i) {
    MetricsRecord rec = trainer.step();
    CHECK(rec.iteration == i);
    CHECK(rec.completions ==
          i * cfg.sampling.group_size * cfg.sampling.n_prompts);
    CHECK(rec.completions > prev_completions);
    prev_completions = rec.completions;
    CHECK(rec.rejection_rate >= 0.0);
    CHECK(rec.rejection_rate <= 1.0);
    std::int64_t histogram_total = 0;
    for (const auto& [k, v] : rec.rejection_histogram) histogram_total += v;
    CHECK(histogram_total == rec.n_subsets);
    CHECK(rec.m_f_global.value_or(0.0) >= 0.0);
  }
}

TEST_CASE("trainer determinism: same config and seed, same records") {
  RunConfig cfg = tiny_config();
  Trainer a(cfg, 11), b(cfg, 11);
  for (int i = 0; i < 5; ++i) {
    json ja = a.step().to_json();
    json jb = b.step().to_json();
    REQUIRE(ja.dump() == jb.dump());
  }
  CHECK(a.policy().layer.weights() == b.policy().layer.weights());

  Trainer c(cfg, 12);
  c.step();
  CHECK(c.policy().layer.weights() != a.policy().layer.weights());
}

TEST_CASE("vacuous capo reproduces the base run bitwise") {
  RunConfig base = tiny_config();
  base.run.iterations = 20;
  RunConfig vac = base;
  vac.capo.enabled = true;
  vac.capo.mode = "theorem";
  vac.capo.delta_h = -std::numeric_limits<double>::infinity();
  vac.capo.delta_h_high = std::numeric_limits<double>::infinity();
  vac.capo.delta_f = std::numeric_limits<double>::infinity();

  Trainer a(base, 5), b(vac, 5);
  for (int i = 0; i < 20; ++i) {
    MetricsRecord ra = a.step();
    MetricsRecord rb = b.step();
    REQUIRE(ra.step_norm == rb.step_norm);
    REQUIRE(ra.grad_norm == rb.grad_norm);
    REQUIRE(ra.reward_mean == rb.reward_mean);
    REQUIRE(a.policy().layer.weights() == b.policy().layer.weights());
  }
}

TEST_CASE("checkpoint round trip resumes bitwise") {
  RunConfig cfg = tiny_config();
  cfg.run.iterations = 12;
  Trainer a(cfg, 9);
  for (int i = 0; i < 7; ++i) a.step();

  TempDir tmp;
  const std::string path = (tmp.path / "state.ckpt").string();
  save_checkpoint(a.make_checkpoint(), path);

  Trainer b(cfg, 9);
  b.restore(load_checkpoint(path));
  CHECK(b.iteration() == 7);
  CHECK(b.policy().layer.weights() == a.policy().layer.weights());
  for (int i = 0; i < 5; ++i) {
    json ja = a.step().to_json();
    json jb = b.step().to_json();
    REQUIRE(ja.dump() == jb.dump());
  }
  CHECK(a.policy().layer.weights() == b.policy().layer.weights());

  CHECK_THROWS_AS(load_checkpoint((tmp.path / "missing.ckpt").string()),
                  IoError);
}

TEST_CASE("run_seed writes a complete, deterministic run directory") {
  RunConfig cfg = tiny_config();
  cfg.run.iterations = 4;
  cfg.run.checkpoint_interval = 2;
  cfg.run.eval_exact_every = 2;
  TempDir tmp;

  auto s1 = run_seed(cfg, 42, (tmp.path / "a").string());
  auto s2 = run_seed(cfg, 42, (tmp.path / "b").string());
  CHECK(slurp(tmp.path / "a/metrics.jsonl") ==
        slurp(tmp.path / "b/metrics.jsonl"));  // byte-identical
  CHECK(fs::exists(tmp.path / "a/resolved.config.json"));
  CHECK(fs::exists(tmp.path / "a/checkpoint_2.ckpt"));
  CHECK(fs::exists(tmp.path / "a/checkpoint_final.ckpt"));
  CHECK(fs::exists(tmp.path / "a/metrics.csv"));
  CHECK(fs::exists(tmp.path / "a/timing.jsonl"));
  CHECK(s1.iterations == 4);
  CHECK(s1.final_reward == s2.final_reward);

  auto records = read_metrics((tmp.path / "a/metrics.jsonl").string());
  REQUIRE(records.size() == 5);  // initial record + 4 iterations
  CHECK(records[0].iteration == 0);
  CHECK(records[0].completions == 0);
  CHECK(records[0].exact_j.has_value());
  CHECK(records[2].exact_j.has_value());
  CHECK_FALSE(records[1].exact_j.has_value());

  // zero-iteration run emits only the initial evaluation record
  RunConfig zero = cfg;
  zero.run.iterations = 0;
  run_seed(zero, 42, (tmp.path / "z").string());
  auto zrecords = read_metrics((tmp.path / "z/metrics.jsonl").string());
  REQUIRE(zrecords.size() == 1);
  CHECK(zrecords[0].iteration == 0);
}

TEST_CASE("csv export mirrors the metrics stream") {
  RunConfig cfg = tiny_config();
  cfg.run.iterations = 3;
  TempDir tmp;
  run_seed(cfg, 1, (tmp.path / "r").string());
  const std::string csv = slurp(tmp.path / "r/metrics.csv");
  CHECK(csv.find("iteration,completions,reward_mean") == 0);
  int lines = 0;
  for (char c : csv)
    if (c == '\n') ++lines;
  CHECK(lines == 1 + 4);  // header + initial + 3 iterations
}

TEST_CASE("sweep grid expansion and caps") {
  SweepSpec spec;
  spec.base = tiny_config().to_json();
  spec.grid["stepmodel.lr"] = {json(0.1), json(0.2), json(0.3)};
  spec.grid["objective.kind"] = {json("grpo"), json("reinforce")};
  spec.cap = 6;
  auto cells = expand_grid(spec);
  REQUIRE(cells.size() == 6);
  CHECK(cells[0].label.find("objective.kind=grpo") != std::string::npos);
  CHECK(cells[0].label.find("stepmodel.lr=0.1") != std::string::npos);

  spec.cap = 5;
  CHECK_THROWS_AS(expand_grid(spec), ResourceError);
}

TEST_CASE("single-cell sweep matches a direct train run") {
  TempDir tmp;
  RunConfig cfg = tiny_config();
  cfg.run.iterations = 3;

  SweepSpec spec;
  spec.base = cfg.to_json();
  spec.grid["stepmodel.lr"] = {json(0.05)};
  spec.seeds = {3};
  spec.out_dir = (tmp.path / "sweep").string();
  auto rows = run_sweep(spec);
  REQUIRE(rows.size() == 1);

  cfg.stepmodel.lr = 0.05;
  auto direct = run_seed(cfg, 3, (tmp.path / "direct").string());
  CHECK(rows[0].summary.final_reward == direct.final_reward);
  CHECK(slurp(tmp.path / "sweep/cell_0/seed_3/metrics.jsonl") ==
        slurp(tmp.path / "direct/metrics.jsonl"));
  CHECK(fs::exists(tmp.path / "sweep/results.csv"));
  CHECK(fs::exists(tmp.path / "sweep/summary.csv"));
}

TEST_CASE("empty acceptance skips the update and flags the iteration") {
  RunConfig cfg = tiny_config();
  cfg.capo.enabled = true;
  cfg.capo.mode = "theorem";
  cfg.capo.delta_h = 1e9;  // nothing can reach this
  cfg.capo.delta_h_high = 2e9;
  cfg.capo.delta_f = 1e-30;
  Trainer trainer(cfg, 2);
  LastLayer before = trainer.policy().layer;
  MetricsRecord rec = trainer.step();
  CHECK(rec.update_skipped);
  CHECK(rec.rejection_rate == 1.0);
  CHECK(rec.step_norm == 0.0);
  CHECK(trainer.policy().layer.weights() == before.weights());
  CHECK(trainer.stepmodel().t == 0);
}

TEST_CASE("verify suites pass and the mutation check fails loudly") {
  CheckReport grad = verify_grad(15, 555);
  CHECK(grad.all_pass());

  CheckReport curv = verify_curvature(10, 556);
  CHECK(curv.all_pass());

  // deliberately corrupted hessian sign: the curvature suite must fail
  CurvatureHooks broken;
  broken.dir_hessian = [](std::span<const TokenGradFactor> f,
                          const CandidateStep& s) {
    return -directional_hessian(f, s);
  };
  CheckReport mutated = verify_curvature(10, 556, broken);
  CHECK_FALSE(mutated.all_pass());

  CHECK_THROWS_AS(run_verify_suite("bogus"), ConfigError);
}

TEST_CASE("metrics records survive the json round trip") {
  MetricsRecord r;
  r.iteration = 3;
  r.completions = 96;
  r.reward_mean = 0.25;
  r.m_h_global = -1e-4;
  r.m_f_global = 2e-6;
  r.rejection_rate = 0.03125;
  r.rejection_histogram = {{"ok", 30}, {"m_F_exceeded", 2}};
  r.n_subsets = 32;
  r.accepted_subsets = 30;
  r.step_norm = 0.01;
  r.grad_norm = 0.2;
  r.lr = 5e-3;
  MetricsRecord back = MetricsRecord::from_json(r.to_json());
  CHECK(back.to_json() == r.to_json());
  CHECK_FALSE(back.exact_j.has_value());
}
