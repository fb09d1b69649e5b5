// capo: train, verify, sweep and export for the curvature-aware policy
// optimization testbed. Exit codes: 0 success, 1 check failure,
// 2 configuration error, 3 resource or I/O error.

#include <cstdlib>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "capo/capo.hpp"

namespace {

// Relative output paths land under $CAPO_OUT_ROOT when it is set.
std::string resolve_out_dir(const std::string& dir) {
  if (dir.empty() || dir[0] == '/') return dir;
  const char* root = std::getenv("CAPO_OUT_ROOT");
  if (!root || !*root) return dir;
  return std::string(root) + "/" + dir;
}

int cmd_train(const std::string& config_path,
              const std::vector<std::string>& overrides,
              const std::vector<std::uint64_t>& seeds,
              const std::string& out_dir) {
  capo::RunConfig cfg = capo::load_config(config_path, overrides);
  if (!seeds.empty()) cfg.run.seeds = seeds;
  if (!out_dir.empty()) cfg.run.out_dir = out_dir;
  cfg.run.out_dir = resolve_out_dir(cfg.run.out_dir);
  cfg.validate();
  auto summaries = capo::run_training(cfg);
  for (const auto& s : summaries) {
    std::cout << "seed " << s.seed << ": iterations=" << s.iterations
              << " final_reward=" << s.final_reward
              << " peak_reward=" << s.peak_reward
              << " mean_rejection=" << s.mean_rejection;
    if (s.final_exact_j) std::cout << " exact_j=" << *s.final_exact_j;
    std::cout << "  -> " << s.run_dir << '\n';
  }
  return 0;
}

int cmd_verify(const std::string& suite, const std::string& report_path) {
  capo::CheckReport report = capo::run_verify_suite(suite);
  report.print(std::cout);
  std::size_t failures = 0;
  for (const auto& c : report.checks)
    if (!c.pass) ++failures;
  std::cout << report.checks.size() - failures << "/" << report.checks.size()
            << " checks passed\n";
  if (!report_path.empty()) {
    std::ofstream out(report_path, std::ios::trunc);
    if (!out) throw capo::IoError("cannot write report '" + report_path + "'");
    out << report.to_json().dump(2) << '\n';
  }
  return report.all_pass() ? 0 : 1;
}

int cmd_sweep(const std::string& spec_path, const std::string& out_dir) {
  capo::json j = capo::load_json_file(spec_path);
  std::string spec_dir = ".";
  const auto slash = spec_path.find_last_of('/');
  if (slash != std::string::npos) spec_dir = spec_path.substr(0, slash);
  capo::SweepSpec spec = capo::SweepSpec::from_json(j, spec_dir);
  if (!out_dir.empty()) spec.out_dir = out_dir;
  spec.out_dir = resolve_out_dir(spec.out_dir);
  auto rows = capo::run_sweep(spec);
  std::cout << rows.size() << " runs -> " << spec.out_dir << "/results.csv\n";
  return 0;
}

int cmd_export(const std::string& metrics_path, const std::string& out_path) {
  capo::export_csv(metrics_path, out_path);
  std::cout << "wrote " << out_path << '\n';
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"curvature-aware policy optimization testbed"};
  app.require_subcommand(1);

  std::string config_path, out_dir, suite = "all", report_path, spec_path;
  std::string metrics_path, export_path = "metrics.csv";
  std::vector<std::string> overrides;
  std::vector<std::uint64_t> seeds;

  auto* train = app.add_subcommand("train", "run training for each seed");
  train->add_option("-c,--config", config_path, "config file (JSON)")
      ->required();
  train->add_option("--set", overrides, "override, key.path=value")
      ->take_all();
  train->add_option("--seed", seeds, "seed list override")->take_all();
  train->add_option("-o,--out", out_dir, "output directory override");

  auto* verify = app.add_subcommand("verify", "run oracle check suites");
  verify->add_option("-s,--suite", suite,
                     "grad | curvature | kl | theorem | all");
  verify->add_option("-r,--report", report_path, "write JSON report here");

  auto* sweep = app.add_subcommand("sweep", "run a config grid");
  sweep->add_option("-s,--spec", spec_path, "sweep spec file (JSON)")
      ->required();
  sweep->add_option("-o,--out", out_dir, "output directory override");

  auto* exp = app.add_subcommand("export", "metrics JSONL -> CSV");
  exp->add_option("-m,--metrics", metrics_path, "metrics.jsonl path")
      ->required();
  exp->add_option("-o,--out", export_path, "CSV output path");

  CLI11_PARSE(app, argc, argv);

  try {
    if (train->parsed()) return cmd_train(config_path, overrides, seeds, out_dir);
    if (verify->parsed()) return cmd_verify(suite, report_path);
    if (sweep->parsed()) return cmd_sweep(spec_path, out_dir);
    if (exp->parsed()) return cmd_export(metrics_path, export_path);
  } catch (const capo::ConfigError& e) {
    std::cerr << "configuration error: " << e.what() << '\n';
    return 2;
  } catch (const capo::InvalidInputError& e) {
    std::cerr << "invalid input: " << e.what() << '\n';
    return 2;
  } catch (const capo::ResourceError& e) {
    std::cerr << "resource error: " << e.what() << '\n';
    return 3;
  } catch (const capo::IoError& e) {
    std::cerr << "io error: " << e.what() << '\n';
    return 3;
  } catch (const capo::Error& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 0;
}
