#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "cri/decoder.hpp"
#include "cri/sim.hpp"

namespace cri {

struct PermutationResult {
    double accuracy = 0.0;
    std::vector<int> permutation;  // permutation[model_label] = truth label
};

// Match rate maximized over all K! relabelings of the predicted types. Ties
// resolve to the lexicographically smallest permutation.
PermutationResult permutation_accuracy(const std::vector<int>& predicted,
                                       const std::vector<int>& truth, int type_count,
                                       int factorial_cap = 6);

// Aligned (predicted, truth) directed edge types over the evaluable edges:
// for static datasets every off-diagonal pair, for evolving datasets the
// edges active at least once.
std::pair<std::vector<int>, std::vector<int>> aligned_edge_types(
    const TrajectoryDataset& dataset, const std::vector<std::vector<std::int8_t>>& inferred);

// Fraction of unordered pairs whose two directed edges received different
// inferred types.
double type_disagreement_rate(const TrajectoryDataset& dataset,
                              const std::vector<std::vector<std::int8_t>>& inferred);

// Mean absolute componentwise error between the typed edge networks and the
// analytic pairwise forces, pairing each edge with its ground-truth type
// through the accuracy permutation. Physics-induced banks only.
double mae_pairwise_force(const EdgeModelBank& bank, const TrajectoryDataset& dataset,
                          const std::vector<int>& permutation);

// Newton's-third-law violation |f_ij + f_ji| averaged componentwise, each
// direction evaluated with its ground-truth-type network under the
// permutation.
double mae_force_symmetry(const EdgeModelBank& bank, const TrajectoryDataset& dataset,
                          const std::vector<int>& permutation);

// Mean absolute error of predicted vs ground-truth state increments under
// the inferred edge types.
double mae_acceleration(const EdgeModelBank& bank, const TrajectoryDataset& dataset,
                        const std::vector<std::vector<std::int8_t>>& inferred);

struct RolloutResult {
    double value = 0.0;
    bool diverged = false;
};

// Positions and velocities rolled `horizon` steps forward from every valid
// start state with decoder increments under the inferred types, compared
// against the stored trajectory. Divergence reports +inf, not an exception.
RolloutResult rollout_mae_state(const EdgeModelBank& bank, const TrajectoryDataset& dataset,
                                const std::vector<std::vector<std::int8_t>>& inferred,
                                int horizon);

struct EvaluationReport {
    double accuracy = 0.0;
    std::vector<int> permutation;
    double mae_ef = 0.0;
    double mae_symm = 0.0;
    double mae_acceleration = 0.0;
    double mae_state_1 = 0.0;
    double mae_state_10 = 0.0;
    bool rollout_diverged = false;
    double disagreement_rate = 0.0;
    std::int64_t edges_evaluated = 0;
    std::int64_t steps_evaluated = 0;
    // metric name -> reason it was not computed
    std::map<std::string, std::string> skipped;
};

EvaluationReport evaluate(const EdgeModelBank& bank, const TrajectoryDataset& dataset,
                          const std::vector<std::vector<std::int8_t>>& inferred);

}  // namespace cri
