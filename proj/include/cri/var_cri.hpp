#pragma once

#include <cstdint>
#include <map>
#include <vector>

#include "cri/cri_em.hpp"

namespace cri {

// Partition of one node's incoming-edge slots into M contiguous groups of
// near-equal size (ascending neighbor order). group g covers slots
// [offsets[g], offsets[g+1]).
struct GroupPartition {
    std::vector<int> offsets;
    int group_count() const { return static_cast<int>(offsets.size()) - 1; }
    int group_size(int g) const { return offsets[static_cast<std::size_t>(g) + 1] - offsets[static_cast<std::size_t>(g)]; }
};

GroupPartition make_partition(int slot_count, int groups);

// Mean-field state: one categorical factor per (node, group) over the
// group's K^size realizations, plus per-size group priors omega.
struct VarCriState {
    EdgeModelBank bank;
    std::map<int, std::vector<double>> omega;  // group size -> prior table
    InteractionGraph graph;
    std::vector<GroupPartition> partitions;          // per node
    std::vector<std::vector<RealizationTable>> group_tables;  // per node, per group
    std::vector<std::vector<std::vector<double>>> factors;    // [sim*nodes+node][group][z]
    double elbo = std::numeric_limits<double>::quiet_NaN();
    int epoch = 0;
    std::vector<AdamState> edge_adam;
    std::int64_t realization_cap = default_realization_cap;

    int type_count() const { return bank.type_count(); }
};

VarCriState make_var_state(EdgeModelBank bank, const InteractionGraph& graph, int simulations,
                           int groups, double learning_rate,
                           std::int64_t realization_cap = default_realization_cap);

// Coordinate-ascent sweeps over one node's factors: each factor is refreshed
// from the expectation over the others, in log space, until `sweeps` passes
// or the largest factor change drops below `tolerance`.
void mean_field_update(VarCriState& state, const TrajectoryDataset& dataset, int sim, int node,
                       int sweeps, double tolerance = 1e-6);

// Sweeps over every (sim, node); refreshes the tracked ELBO.
void var_e_step(VarCriState& state, const TrajectoryDataset& dataset, int sweeps,
                double tolerance = 1e-6);

// Multinomial update of the per-size group priors.
void var_m_step_priors(VarCriState& state);

// One Adam ascent step on the Theta term of Q_var.
void var_m_step_theta(VarCriState& state, const TrajectoryDataset& dataset,
                      const std::vector<int>& step_batch = {});

double q_var(const VarCriState& state, const TrajectoryDataset& dataset);

std::vector<std::vector<std::int8_t>> var_infer_edge_types(const VarCriState& state);

TrainResult train_var(const EdgeModelBank& initial_bank, const TrainControl& control,
                      const TrajectoryDataset& train,
                      const TrajectoryDataset* validation = nullptr);

}  // namespace cri
