#pragma once

#include <chrono>
#include <cstdint>
#include <fstream>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "capo/errors.hpp"

namespace capo {

// Accumulated wall time per named phase. Times live in a separate sidecar
// stream: the main metrics file must stay byte-identical across reruns of
// the same (config, seed).
struct PhaseTimings {
  std::map<std::string, double> seconds;

  void add(const std::string& phase, double s) { seconds[phase] += s; }

  double total() const {
    double t = 0.0;
    for (const auto& [k, v] : seconds) t += v;
    return t;
  }

  nlohmann::json to_json() const {
    nlohmann::json j = nlohmann::json::object();
    for (const auto& [k, v] : seconds) j[k] = v;
    return j;
  }
};

class PhaseTimer {
 public:
  PhaseTimer(PhaseTimings& sink, std::string phase)
      : sink_(sink), phase_(std::move(phase)),
        start_(std::chrono::steady_clock::now()) {}

  ~PhaseTimer() {
    const auto end = std::chrono::steady_clock::now();
    sink_.add(phase_, std::chrono::duration<double>(end - start_).count());
  }

  PhaseTimer(const PhaseTimer&) = delete;
  PhaseTimer& operator=(const PhaseTimer&) = delete;

 private:
  PhaseTimings& sink_;
  std::string phase_;
  std::chrono::steady_clock::time_point start_;
};

// One self-describing line per training iteration.
struct MetricsRecord {
  std::int64_t iteration = 0;
  std::int64_t completions = 0;
  std::optional<double> reward_mean;
  std::optional<double> exact_j;
  std::optional<double> m_h_global;
  std::optional<double> m_f_global;
  double rejection_rate = 0.0;
  std::map<std::string, std::int64_t> rejection_histogram;
  std::int64_t n_subsets = 0;
  std::int64_t accepted_subsets = 0;
  double step_norm = 0.0;
  double grad_norm = 0.0;
  double lr = 0.0;
  bool update_skipped = false;

  nlohmann::json to_json() const {
    nlohmann::json j;
    j["iteration"] = iteration;
    j["completions"] = completions;
    if (reward_mean) j["reward_mean"] = *reward_mean;
    if (exact_j) j["exact_j"] = *exact_j;
    if (m_h_global) j["m_h_global"] = *m_h_global;
    if (m_f_global) j["m_f_global"] = *m_f_global;
    j["rejection_rate"] = rejection_rate;
    nlohmann::json hist = nlohmann::json::object();
    for (const auto& [k, v] : rejection_histogram) hist[k] = v;
    j["rejection_histogram"] = hist;
    j["n_subsets"] = n_subsets;
    j["accepted_subsets"] = accepted_subsets;
    j["step_norm"] = step_norm;
    j["grad_norm"] = grad_norm;
    j["lr"] = lr;
    j["update_skipped"] = update_skipped;
    return j;
  }

  static MetricsRecord from_json(const nlohmann::json& j) {
    MetricsRecord r;
    r.iteration = j.at("iteration").get<std::int64_t>();
    r.completions = j.at("completions").get<std::int64_t>();
    if (j.contains("reward_mean")) r.reward_mean = j.at("reward_mean").get<double>();
    if (j.contains("exact_j")) r.exact_j = j.at("exact_j").get<double>();
    if (j.contains("m_h_global")) r.m_h_global = j.at("m_h_global").get<double>();
    if (j.contains("m_f_global")) r.m_f_global = j.at("m_f_global").get<double>();
    r.rejection_rate = j.at("rejection_rate").get<double>();
    if (j.contains("rejection_histogram"))
      for (auto it = j.at("rejection_histogram").begin();
           it != j.at("rejection_histogram").end(); ++it)
        r.rejection_histogram[it.key()] = it.value().get<std::int64_t>();
    r.n_subsets = j.at("n_subsets").get<std::int64_t>();
    r.accepted_subsets = j.at("accepted_subsets").get<std::int64_t>();
    r.step_norm = j.at("step_norm").get<double>();
    r.grad_norm = j.at("grad_norm").get<double>();
    r.lr = j.at("lr").get<double>();
    r.update_skipped = j.at("update_skipped").get<bool>();
    return r;
  }
};

// Append-only JSON-lines sink, flushed per record so an interrupted run
// keeps every completed iteration.
class JsonlWriter {
 public:
  explicit JsonlWriter(const std::string& path) : out_(path, std::ios::trunc) {
    if (!out_) throw IoError("cannot open metrics sink '" + path + "'");
  }

  void write(const nlohmann::json& j) {
    out_ << j.dump() << '\n';
    out_.flush();
    if (!out_) throw IoError("metrics sink write failed");
  }

 private:
  std::ofstream out_;
};

inline std::vector<MetricsRecord> read_metrics(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open metrics file '" + path + "'");
  std::vector<MetricsRecord> out;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    out.push_back(MetricsRecord::from_json(nlohmann::json::parse(line)));
  }
  return out;
}

// Derived plotting export; the JSONL stream stays the source of truth.
inline void export_csv(const std::string& metrics_path,
                       const std::string& csv_path) {
  auto records = read_metrics(metrics_path);
  std::ofstream out(csv_path, std::ios::trunc);
  if (!out) throw IoError("cannot open csv sink '" + csv_path + "'");
  out << "iteration,completions,reward_mean,exact_j,m_h_global,m_f_global,"
         "rejection_rate\n";
  auto cell = [](const std::optional<double>& v) {
    return v ? nlohmann::json(*v).dump() : std::string();
  };
  for (const auto& r : records) {
    out << r.iteration << ',' << r.completions << ',' << cell(r.reward_mean)
        << ',' << cell(r.exact_j) << ',' << cell(r.m_h_global) << ','
        << cell(r.m_f_global) << ',' << nlohmann::json(r.rejection_rate).dump()
        << '\n';
  }
  if (!out) throw IoError("csv write failed");
}

}  // namespace capo
