#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "cri/graph.hpp"
#include "cri/mlp.hpp"
#include "cri/sim.hpp"

namespace cri {

enum class DecoderKind : std::uint8_t { MessagePassing = 0, PhysicsInduced = 1 };

std::string to_string(DecoderKind kind);
DecoderKind decoder_kind_from_string(const std::string& name);

// What an edge network sees for edge (i <- j): receiver features followed by
// sender features. Particles expose position and velocity, optionally the
// mass; time-series nodes expose the scalar value.
enum class FeatureLayout : std::uint8_t {
    ParticleWithMass = 0,
    ParticleNoMass = 1,
    Scalar = 2,
};

std::string to_string(FeatureLayout layout);
FeatureLayout feature_layout_from_string(const std::string& name);

int node_feature_width(FeatureLayout layout, int dims);
inline int edge_feature_width(FeatureLayout layout, int dims) {
    return 2 * node_feature_width(layout, dims);
}

FeatureLayout default_feature_layout(SystemKind kind);

void write_node_features(FeatureLayout layout, const SimulationRecord& rec, int t, int node,
                         double* out);
void write_edge_features(FeatureLayout layout, const SimulationRecord& rec, int t, int receiver,
                         int sender, double* out);

// The K typed edge networks plus, for the message-passing form, the node
// update network. sigma_sq is the fixed variance of the Gaussian that scores
// ground-truth increments around the prediction.
struct EdgeModelBank {
    DecoderKind kind = DecoderKind::PhysicsInduced;
    FeatureLayout layout = FeatureLayout::ParticleWithMass;
    MlpSpec edge_spec;
    std::vector<ParamVector> edge_params;
    MlpSpec node_spec;        // MessagePassing only
    ParamVector node_params;  // MessagePassing only
    double sigma_sq = 0.1;

    int type_count() const { return static_cast<int>(edge_params.size()); }
    void validate(int dims) const;
};

EdgeModelBank make_bank(DecoderKind kind, FeatureLayout layout, const MlpSpec& edge_spec,
                        int type_count, double sigma_sq, Rng& rng, int dims,
                        const MlpSpec* node_spec = nullptr);

// NN^type applied to edge (receiver <- sender) at stored step t.
std::vector<double> edge_message(const EdgeModelBank& bank, const SimulationRecord& rec, int t,
                                 int receiver, int sender, int type);

// Predicted state increment of `center` under one subgraph realization:
// message-passing NN_node(sum of typed messages, x_i), physics-induced
// sum of typed messages / m_i.
std::vector<double> predict_increment(const EdgeModelBank& bank, const SimulationRecord& rec,
                                      int t, int center, const std::vector<int>& neighbors,
                                      const RealizationTable& table, std::int64_t realization);

// Same decoder forms with an explicit type per active edge (evolving form).
std::vector<double> predict_increment_with_types(const EdgeModelBank& bank,
                                                 const SimulationRecord& rec, int t, int center,
                                                 const std::vector<int>& active_neighbors,
                                                 const std::vector<int>& types);

// log N(truth | predicted, sigma_sq I).
double gaussian_log_density(int dims, double sigma_sq, const double* truth,
                            const double* predicted);

double conditional_log_likelihood(const EdgeModelBank& bank, const std::vector<double>& truth,
                                  const std::vector<double>& predicted);

// Trajectories generated by a frozen bank over a random symmetric type
// assignment; exactly realizable by the model family.
TrajectoryDataset simulate_teacher(const EdgeModelBank& bank, const ParticleSystemSpec& base,
                                   int simulations, std::uint64_t seed, const std::string& split);

// Force-field samples on a square grid: the receiver sits at the origin at
// rest, the sender sweeps the grid. Rows are (type, x, y, fx, fy).
struct ForceGridRow {
    int type;
    double x, y, fx, fy;
};
std::vector<ForceGridRow> force_grid(const EdgeModelBank& bank, double lo, double hi,
                                     int points_per_axis, std::int64_t cap = 1000000);

}  // namespace cri
