#pragma once

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include <json.hpp>

#include "capo/config.hpp"
#include "capo/errors.hpp"
#include "capo/trainer.hpp"

namespace capo {

// Cross-product experiment grid: a base config, per-key value lists, and an
// optional seed list applied to every cell.
struct SweepSpec {
  json base;
  std::map<std::string, std::vector<json>> grid;  // key.path -> values
  std::vector<std::uint64_t> seeds;               // empty -> base seeds
  std::int64_t cap = 64;
  std::string out_dir = "runs/sweep";

  static SweepSpec from_json(const json& j, const std::string& spec_dir) {
    SweepSpec s;
    if (j.contains("base_file")) {
      std::string path = j.at("base_file").get<std::string>();
      if (!path.empty() && path[0] != '/' && !spec_dir.empty())
        path = spec_dir + "/" + path;
      s.base = load_json_file(path);
    } else if (j.contains("base")) {
      s.base = j.at("base");
    } else {
      throw ConfigError("sweep: need 'base' or 'base_file'");
    }
    if (!j.contains("grid") || !j.at("grid").is_object())
      throw ConfigError("sweep.grid: expected an object of key -> value list");
    for (auto it = j.at("grid").begin(); it != j.at("grid").end(); ++it) {
      if (!it.value().is_array() || it.value().empty())
        throw ConfigError("sweep.grid." + it.key() + ": expected a non-empty array");
      s.grid[it.key()] = std::vector<json>(it.value().begin(), it.value().end());
    }
    if (j.contains("seeds"))
      s.seeds = j.at("seeds").get<std::vector<std::uint64_t>>();
    if (j.contains("cap")) s.cap = j.at("cap").get<std::int64_t>();
    if (j.contains("out_dir")) s.out_dir = j.at("out_dir").get<std::string>();
    return s;
  }
};

struct SweepCell {
  std::int64_t id = 0;
  std::string label;  // "k1=v1,k2=v2"
  std::vector<std::string> overrides;
};

inline std::vector<SweepCell> expand_grid(const SweepSpec& spec) {
  std::vector<SweepCell> cells{{0, "", {}}};
  for (const auto& [key, values] : spec.grid) {
    std::vector<SweepCell> next;
    for (const auto& cell : cells) {
      for (const auto& v : values) {
        SweepCell c = cell;
        const std::string vs = v.is_string() ? v.get<std::string>() : v.dump();
        c.label += (c.label.empty() ? "" : ",") + key + "=" + vs;
        c.overrides.push_back(key + "=" + v.dump());
        next.push_back(std::move(c));
      }
    }
    cells = std::move(next);
  }
  if (static_cast<std::int64_t>(cells.size()) > spec.cap)
    throw ResourceError("sweep: grid has " + std::to_string(cells.size()) +
                        " cells, cap is " + std::to_string(spec.cap));
  for (std::size_t i = 0; i < cells.size(); ++i)
    cells[i].id = static_cast<std::int64_t>(i);
  return cells;
}

struct SweepRow {
  std::int64_t cell = 0;
  std::string label;
  std::uint64_t seed = 0;
  SeedRunSummary summary;
};

// Run the whole grid; one row per (cell, seed) in results.csv, a mean/std
// aggregate per cell in summary.csv.
inline std::vector<SweepRow> run_sweep(const SweepSpec& spec) {
  namespace fs = std::filesystem;
  std::error_code ec;
  fs::create_directories(spec.out_dir, ec);
  if (ec) throw IoError("cannot create sweep dir '" + spec.out_dir + "'");

  auto cells = expand_grid(spec);
  std::vector<SweepRow> rows;
  for (const auto& cell : cells) {
    json cfg_json = spec.base;
    for (const auto& o : cell.overrides) apply_override(cfg_json, o);
    if (!spec.seeds.empty()) cfg_json["run"]["seeds"] = spec.seeds;
    cfg_json["run"]["out_dir"] =
        spec.out_dir + "/cell_" + std::to_string(cell.id);
    RunConfig cfg = RunConfig::from_json(cfg_json);
    for (std::uint64_t seed : cfg.run.seeds) {
      SweepRow row;
      row.cell = cell.id;
      row.label = cell.label;
      row.seed = seed;
      row.summary = run_seed(cfg, seed,
                             cfg.run.out_dir + "/seed_" + std::to_string(seed));
      rows.push_back(std::move(row));
    }
  }

  {
    std::ofstream out(spec.out_dir + "/results.csv", std::ios::trunc);
    if (!out) throw IoError("cannot write sweep results");
    out << "cell,overrides,seed,iterations,final_reward,peak_reward,"
           "mean_rejection,final_exact_j\n";
    for (const auto& r : rows) {
      out << r.cell << ",\"" << r.label << "\"," << r.seed << ','
          << r.summary.iterations << ',' << r.summary.final_reward << ','
          << r.summary.peak_reward << ',' << r.summary.mean_rejection << ',';
      if (r.summary.final_exact_j) out << *r.summary.final_exact_j;
      out << '\n';
    }
  }
  {
    std::ofstream out(spec.out_dir + "/summary.csv", std::ios::trunc);
    if (!out) throw IoError("cannot write sweep summary");
    out << "cell,overrides,n_seeds,final_reward_mean,final_reward_std,"
           "peak_reward_mean,mean_rejection\n";
    for (const auto& cell : cells) {
      double sum = 0.0, sq = 0.0, peak = 0.0, rej = 0.0;
      int n = 0;
      for (const auto& r : rows) {
        if (r.cell != cell.id) continue;
        sum += r.summary.final_reward;
        sq += r.summary.final_reward * r.summary.final_reward;
        peak += r.summary.peak_reward;
        rej += r.summary.mean_rejection;
        ++n;
      }
      if (n == 0) continue;
      const double mean = sum / n;
      const double var = std::max(0.0, sq / n - mean * mean);
      out << cell.id << ",\"" << cell.label << "\"," << n << ',' << mean << ','
          << std::sqrt(var) << ',' << peak / n << ',' << rej / n << '\n';
    }
  }
  return rows;
}

}  // namespace capo
