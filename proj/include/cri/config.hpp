#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "cri/cri_em.hpp"
#include "cri/decoder.hpp"
#include "cri/sim.hpp"

namespace cri {

struct SimulateConfig {
    ParticleSystemSpec spec;
    int train_sims = 10;
    int valid_sims = 2;
    int test_sims = 2;
    std::optional<std::vector<double>> split_ratio;  // alternative to explicit counts
    std::string split_mode = "interpolation";        // crystallization step splits
    double noise_beta = 0.0;
    std::string out_dir = "data";
    std::optional<VarSpec> var;  // kind = var
};

struct TrainConfig {
    std::string method = "cri";  // cri | var-cri | evolving-cri
    DecoderKind decoder = DecoderKind::PhysicsInduced;
    FeatureLayout layout = FeatureLayout::ParticleWithMass;
    double sigma_sq = 0.1;
    MlpSpec edge_spec;
    MlpSpec node_spec;  // MessagePassing only
    int message_width = 16;
    TrainControl control;
    std::string train_data;
    std::string valid_data;
    std::string checkpoint_out = "model.ckpt";
    std::string history_out = "history.csv";
    std::string resume;  // optional checkpoint to continue from
};

struct EvaluateConfig {
    std::string checkpoint;
    std::string data;
    std::string report_out = "report.json";
    std::string edges_csv;  // optional per-edge dump
};

struct ExperimentConfig {
    std::uint64_t seed = 0;
    SystemKind kind = SystemKind::Spring;
    SimulateConfig simulate;
    TrainConfig train;
    EvaluateConfig evaluate;
    nlohmann::json raw;  // the parsed file, echoed into manifests

    static ExperimentConfig from_file(const std::string& path);
    static ExperimentConfig from_json(const nlohmann::json& j);
};

// SI hyperparameter rows: edge widths and Gaussian variance per system kind.
MlpSpec default_edge_spec(SystemKind kind, int dims);
double default_sigma_sq(SystemKind kind);
MlpSpec default_node_spec(int message_width, FeatureLayout layout, int dims);

// VAR topology presets approximating the benchmark causal graphs; the exact
// matrices are not published, so these are labeled approximations.
VarSpec var_preset(const std::string& name, int steps, double noise_std);

}  // namespace cri
