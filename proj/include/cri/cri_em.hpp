#pragma once

#include <cstdint>
#include <limits>
#include <map>
#include <optional>
#include <vector>

#include "cri/decoder.hpp"
#include "cri/graph.hpp"
#include "cri/message_cache.hpp"
#include "cri/sim.hpp"

namespace cri {

// Knobs shared by the CRI, Var-CRI and Evolving-CRI training loops.
struct TrainControl {
    int epochs = 500;
    double learning_rate = 0.001;
    int theta_batch_steps = 0;  // 0 = every stored step each epoch
    bool ascent_guard = true;   // halve the Theta step until Q does not decrease
    int ascent_max_halvings = 10;
    int validate_every = 1;
    int early_stop_patience = 0;  // 0 = off
    std::uint64_t seed = 0;
    std::int64_t realization_cap = default_realization_cap;
    int chunk_rows = 4096;
    int mean_field_groups = 2;   // Var-CRI
    int mean_field_sweeps = 3;   // Var-CRI
    double sweep_tolerance = 1e-6;
};

struct HistoryRow {
    int epoch = 0;
    double marginal_log_likelihood = std::numeric_limits<double>::quiet_NaN();
    double q_value = std::numeric_limits<double>::quiet_NaN();
    double validation_mae_state = std::numeric_limits<double>::quiet_NaN();
    double accuracy = std::numeric_limits<double>::quiet_NaN();
};

struct TrainResult {
    EdgeModelBank bank;
    std::vector<double> tau;
    std::map<int, std::vector<double>> omega;  // Var-CRI group priors by size
    std::vector<std::vector<std::int8_t>> edge_types;  // train-set inference, N*N per sim
    double disagreement_rate = 0.0;
    std::vector<HistoryRow> history;
    int best_epoch = -1;
};

// Mutable trainer state: the joint posterior over each subgraph's
// realizations, the edge-type priors and the model bank.
struct CriState {
    EdgeModelBank bank;
    std::vector<double> tau;
    InteractionGraph graph;
    std::vector<RealizationTable> tables;          // per node
    std::vector<std::vector<double>> posterior;    // row = sim * nodes + node
    std::vector<std::vector<double>> log_likelihood;  // per row, per z: sum_t log l
    double marginal_log_likelihood = std::numeric_limits<double>::quiet_NaN();
    int epoch = 0;
    std::vector<AdamState> edge_adam;
    AdamState node_adam;
    std::int64_t realization_cap = default_realization_cap;

    int type_count() const { return static_cast<int>(tau.size()); }
};

CriState make_cri_state(EdgeModelBank bank, const InteractionGraph& graph, int simulations,
                        double learning_rate,
                        std::int64_t realization_cap = default_realization_cap);

// Bayes update of every subgraph posterior from the current parameters;
// refreshes the per-row likelihood sums and the marginal log-likelihood.
void e_step(CriState& state, const TrajectoryDataset& dataset);

// Q(Theta | Theta_now) at the freshly computed posterior, Gaussian constants
// included.
double q_function(const CriState& state);

// Closed-form multinomial update of the type priors tau.
void m_step_priors(CriState& state);

// One Adam ascent step on the Theta-dependent term of Q. `step_batch` limits
// the gradient to the listed stored steps (empty = all).
void m_step_theta(CriState& state, const TrajectoryDataset& dataset,
                  const std::vector<int>& step_batch = {});

struct ThetaGradients {
    std::vector<ParamVector> edge;  // one per typed network
    ParamVector node;               // message-passing only
};

// dQ/dTheta at the current posterior (the ascent direction m_step_theta
// feeds, negated, into Adam).
ThetaGradients q_theta_gradients(const CriState& state, const TrajectoryDataset& dataset,
                                 const std::vector<int>& step_batch = {});

// argmax realization per subgraph mapped through phi; ties resolve to the
// lowest realization id. Every directed edge takes the type assigned by its
// receiver's subgraph.
std::vector<std::vector<std::int8_t>> infer_edge_types(const CriState& state);

// Posterior-argmax inference on an arbitrary dataset (validation / test).
std::vector<std::vector<std::int8_t>> cri_infer_types(
    const EdgeModelBank& bank, const std::vector<double>& tau, const TrajectoryDataset& dataset,
    std::int64_t realization_cap = default_realization_cap);

// Full generalized-EM loop of Algorithm "CRI Training": E-step, analytic
// prior update, one guarded gradient-ascent step per epoch, validation-based
// model selection.
TrainResult train_cri(const EdgeModelBank& initial_bank, const TrainControl& control,
                      const TrajectoryDataset& train,
                      const TrajectoryDataset* validation = nullptr);

// Validation score used for model selection: one-step state MAE when the
// dataset is contiguous, increment MAE otherwise.
double validation_mae_state(const EdgeModelBank& bank, const std::vector<double>& tau,
                            const TrajectoryDataset& dataset, std::int64_t realization_cap);

}  // namespace cri
