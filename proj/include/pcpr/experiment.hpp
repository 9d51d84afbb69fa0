#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "pcpr/eval.hpp"
#include "pcpr/trainer.hpp"
#include "pcpr/types.hpp"

namespace pcpr {

/// Where one protocol domain comes from: an on-disk dataset manifest, or a
/// generator spec (materialized under the output directory at run start).
struct DomainSource {
  std::string name;
  std::filesystem::path manifest;                 // non-empty: load this
  std::optional<SyntheticDomainSpec> synthetic;   // else: generate this
  ThresholdSpec thresholds;                       // synthetic domains only
};

/// One full run: domains, protocol, method, and every training knob.
/// Built either from defaults or from a strict JSON document (unknown keys
/// rejected at every level).
struct ExperimentConfig {
  std::uint64_t seed = 0;
  std::string protocol = "four-step";  // four-step | two-step | zero-shot
  Method method = Method::InCloudAngular;
  std::string out;  // output directory; CLI flag overrides
  TrainConfig train;
  std::vector<DomainSource> domains;
  std::optional<DomainSource> holdout;  // required by the zero-shot protocol
  std::vector<int> recall_ns{1, 5, 10, 25};

  void validate() const;
};

/// Desk-scale default run: four synthetic domains with distinct landmark
/// statistics plus a held-out fifth, all seeded from `seed`.
ExperimentConfig default_experiment(std::uint64_t seed);

/// Strict parse: unknown keys anywhere are an error; absent keys take the
/// defaults of default_experiment(seed-with-defaults-resolved).
ExperimentConfig parse_experiment(const nlohmann::json& doc);
ExperimentConfig load_experiment(const std::filesystem::path& path);

/// Canonical, defaults-resolved JSON echo. parse_experiment(echo(c)) == c,
/// and echo(parse(echo(c))) is byte-identical to echo(c).
nlohmann::json echo_experiment(const ExperimentConfig& config);

struct ExperimentResult {
  RecallMatrix matrix;
  EvalReport report;
  EncoderParams params;
  RunLog log;
};

/// Runs the configured protocol end to end: materializes synthetic domains
/// under out/data/, echoes the config, trains with per-step checkpoints
/// under out/checkpoints/, evaluates, and writes recall_matrix.csv and
/// report.json. resume_completed_steps > 0 continues from the matching
/// checkpoint, reusing the recall rows already on disk.
ExperimentResult run_experiment(const ExperimentConfig& config,
                                const std::filesystem::path& out,
                                int resume_completed_steps = 0);

}  // namespace pcpr
