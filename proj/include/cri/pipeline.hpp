#pragma once

#include <string>
#include <vector>

#include <json.hpp>

#include "cri/checkpoint.hpp"
#include "cri/config.hpp"
#include "cri/metrics.hpp"

namespace cri {

// Library implementations of the CLI subcommands; the binary is a thin
// argument parser over these. Every run writes a manifest JSON capturing the
// config, seed and FNV-1a hashes of the produced artifacts.

struct RunArtifacts {
    std::vector<std::string> files;
    nlohmann::json summary;
};

RunArtifacts run_simulate(const ExperimentConfig& config);
RunArtifacts run_train(const ExperimentConfig& config);
RunArtifacts run_evaluate(const ExperimentConfig& config);
RunArtifacts run_export_forces(const std::string& checkpoint_path, double lo, double hi,
                               int points_per_axis, const std::string& out_csv);
RunArtifacts run_inject_noise(const std::string& dataset_path, double beta, std::uint64_t seed,
                              const std::string& out_path);
RunArtifacts run_export_data(const std::string& dataset_path, const std::string& block, int sim,
                             const std::string& out_csv);

void write_manifest(const std::string& path, const std::string& command,
                    const nlohmann::json& config, const std::vector<std::string>& artifacts);

nlohmann::json report_to_json(const EvaluationReport& report);

void write_history_csv(const std::string& path, const std::vector<HistoryRow>& history,
                       bool append = false);

// Splits simulations by explicit counts or a ratio (exact, largest remainder).
std::vector<int> split_counts(int total, const std::vector<double>& ratio);

// Inference with a trained checkpoint on an arbitrary dataset, dispatching
// on the checkpoint's method.
std::vector<std::vector<std::int8_t>> infer_types_with_checkpoint(const Checkpoint& checkpoint,
                                                                  const TrajectoryDataset& data);

}  // namespace cri
