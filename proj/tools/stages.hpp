#pragma once

#include "config.hpp"

#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

namespace mfam::cli {

// Failure inside a stage. Exit code 1.
class StageError : public std::runtime_error {
 public:
  StageError(std::string stage, int replicate, const std::string& message);
  const std::string& stage() const { return stage_; }

 private:
  std::string stage_;
};

// Seed of a stage in a replicate, derived from the run seed only.
std::uint64_t stage_seed(std::uint64_t seed, int replicate, int stage_tag);

// Runs one stage for every replicate. Each replicate writes into a hidden
// partial directory that replaces <replicate>/<stage> only on success.
void run_stage(const RunConfig& config, const std::string& stage);

// Collects the per-replicate metrics into <out>/metrics.csv,
// <out>/metrics_summary.csv and <out>/coverage.csv.
void aggregate_metrics(const RunConfig& config);

// Human-readable description of what a run would do.
std::vector<std::string> plan(const RunConfig& config, const std::vector<std::string>& stages);

// <out>/manifest.json: resolved config, seeds, input and output hashes and
// library versions.
void write_manifest(const RunConfig& config, const std::string& command, const std::vector<std::string>& stages);

std::string sha256_file(const fs::path& path);

}  // namespace mfam::cli
