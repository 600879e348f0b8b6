#pragma once

#include <cstdint>
#include <vector>

#include "cri/cri_em.hpp"

namespace cri {

// Per-edge marginal posteriors over the K types for every directed edge that
// is ever active, plus the shared type priors tau. Each E-pass resets the
// marginals to tau and walks the stored steps in chronological order.
struct EvolvingState {
    EdgeModelBank bank;
    std::vector<double> tau;
    std::vector<InteractionGraph> graphs;        // union graph per simulation
    std::vector<std::vector<double>> marginals;  // [sim][edge_id * K + k]
    double filter_log_likelihood = std::numeric_limits<double>::quiet_NaN();
    int epoch = 0;
    std::vector<AdamState> edge_adam;
    AdamState node_adam;
    std::int64_t realization_cap = default_realization_cap;

    int type_count() const { return static_cast<int>(tau.size()); }
};

EvolvingState make_evolving_state(EdgeModelBank bank, const TrajectoryDataset& dataset,
                                  double learning_rate,
                                  std::int64_t realization_cap = default_realization_cap);

void reset_marginals(EvolvingState& state);

// One induction update: every edge active at stored step t has its marginal
// refreshed by marginalizing the co-active edges under the product of their
// step t-1 marginals (synchronous within the step). Returns the log of the
// step's predictive normalizer summed over receivers.
double posterior_induction_step(EvolvingState& state, const TrajectoryDataset& dataset, int sim,
                                int t);

// Full chronological E-pass over every simulation, starting from tau.
void evolving_e_pass(EvolvingState& state, const TrajectoryDataset& dataset);

// Q function: expected log prior over all edges plus the expected
// log-likelihood over the per-step products of final marginals.
double q_evolving(const EvolvingState& state, const TrajectoryDataset& dataset);

// Analytic multinomial update of tau from the expected type counts.
void evolving_m_step_priors(EvolvingState& state);

// One Adam ascent step on the Theta term of the evolving Q.
void evolving_m_step_theta(EvolvingState& state, const TrajectoryDataset& dataset,
                           const std::vector<int>& step_batch = {});

// Full N x N type matrix per simulation: argmax marginal on edges active at
// least once, argmax tau elsewhere (ties to the lowest type id).
std::vector<std::vector<std::int8_t>> evolving_infer_types(const EvolvingState& state);

TrainResult train_evolving(const EdgeModelBank& initial_bank, const TrainControl& control,
                           const TrajectoryDataset& train,
                           const TrajectoryDataset* validation = nullptr);

}  // namespace cri
