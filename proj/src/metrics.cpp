#include "cri/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <string>

namespace cri {

PermutationResult permutation_accuracy(const std::vector<int>& predicted,
                                       const std::vector<int>& truth, int type_count,
                                       int factorial_cap) {
    if (predicted.size() != truth.size()) {
        throw shape_error("permutation_accuracy: prediction and truth sizes differ");
    }
    if (predicted.empty()) throw data_error("permutation_accuracy: no edges to evaluate");
    if (type_count < 1) throw config_error("permutation_accuracy: K must be >= 1");
    if (type_count > factorial_cap) {
        throw capacity_error("permutation_accuracy: K = " + std::to_string(type_count) +
                             " exceeds the K! enumeration cap of " +
                             std::to_string(factorial_cap));
    }

    // confusion[p][t]: edges predicted p with ground truth t
    std::vector<std::int64_t> confusion(static_cast<std::size_t>(type_count) * type_count, 0);
    for (std::size_t e = 0; e < predicted.size(); ++e) {
        const int p = predicted[e];
        const int t = truth[e];
        if (p < 0 || p >= type_count || t < 0 || t >= type_count) {
            throw data_error("permutation_accuracy: type label out of range");
        }
        confusion[static_cast<std::size_t>(p) * type_count + t] += 1;
    }

    std::vector<int> labels(static_cast<std::size_t>(type_count));
    std::iota(labels.begin(), labels.end(), 0);
    PermutationResult best;
    best.accuracy = -1.0;
    do {
        std::int64_t matches = 0;
        for (int p = 0; p < type_count; ++p) {
            matches += confusion[static_cast<std::size_t>(p) * type_count +
                                 labels[static_cast<std::size_t>(p)]];
        }
        const double accuracy = static_cast<double>(matches) / static_cast<double>(predicted.size());
        if (accuracy > best.accuracy) {  // strict: first (lexicographic) maximizer wins
            best.accuracy = accuracy;
            best.permutation = labels;
        }
    } while (std::next_permutation(labels.begin(), labels.end()));
    return best;
}

namespace {

// Directed edges with a ground-truth type; for evolving datasets only those
// active at least once.
std::vector<std::pair<int, int>> evaluable_edges(const TrajectoryDataset& dataset,
                                                 const SimulationRecord& rec) {
    std::vector<std::pair<int, int>> edges;
    if (dataset.neighbor_count > 0) {
        std::vector<std::uint8_t> seen(static_cast<std::size_t>(rec.particles) * rec.particles, 0);
        for (int t = 0; t < rec.steps; ++t) {
            for (int i = 0; i < rec.particles; ++i) {
                for (int j : rec.step_neighbors(t, i)) {
                    seen[static_cast<std::size_t>(i) * rec.particles + j] = 1;
                }
            }
        }
        for (int i = 0; i < rec.particles; ++i) {
            for (int j = 0; j < rec.particles; ++j) {
                if (seen[static_cast<std::size_t>(i) * rec.particles + j] &&
                    rec.edge_type(i, j) >= 0) {
                    edges.emplace_back(i, j);
                }
            }
        }
    } else {
        for (int i = 0; i < rec.particles; ++i) {
            for (int j = 0; j < rec.particles; ++j) {
                if (i != j && rec.edge_type(i, j) >= 0) edges.emplace_back(i, j);
            }
        }
    }
    return edges;
}

std::vector<int> invert_permutation(const std::vector<int>& permutation) {
    std::vector<int> inverse(permutation.size());
    for (std::size_t m = 0; m < permutation.size(); ++m) {
        inverse[static_cast<std::size_t>(permutation[m])] = static_cast<int>(m);
    }
    return inverse;
}

bool has_analytic_force(SystemKind kind) {
    return kind == SystemKind::Spring || kind == SystemKind::Charge ||
           kind == SystemKind::Crystallization;
}

}  // namespace

std::pair<std::vector<int>, std::vector<int>> aligned_edge_types(
    const TrajectoryDataset& dataset, const std::vector<std::vector<std::int8_t>>& inferred) {
    if (inferred.size() != dataset.sims.size()) {
        throw shape_error("aligned_edge_types: one inferred map per simulation required");
    }
    std::vector<int> predicted;
    std::vector<int> truth;
    for (std::size_t s = 0; s < dataset.sims.size(); ++s) {
        const SimulationRecord& rec = dataset.sims[s];
        for (const auto& [i, j] : evaluable_edges(dataset, rec)) {
            const int hat = inferred[s][static_cast<std::size_t>(i) * rec.particles + j];
            if (hat < 0) continue;
            predicted.push_back(hat);
            truth.push_back(rec.edge_type(i, j));
        }
    }
    return {std::move(predicted), std::move(truth)};
}

double type_disagreement_rate(const TrajectoryDataset& dataset,
                              const std::vector<std::vector<std::int8_t>>& inferred) {
    std::int64_t pairs = 0;
    std::int64_t disagreements = 0;
    for (std::size_t s = 0; s < dataset.sims.size(); ++s) {
        const int n = dataset.sims[s].particles;
        for (int i = 0; i < n; ++i) {
            for (int j = i + 1; j < n; ++j) {
                const int forward = inferred[s][static_cast<std::size_t>(i) * n + j];
                const int backward = inferred[s][static_cast<std::size_t>(j) * n + i];
                if (forward < 0 || backward < 0) continue;
                pairs += 1;
                if (forward != backward) disagreements += 1;
            }
        }
    }
    return pairs > 0 ? static_cast<double>(disagreements) / static_cast<double>(pairs) : 0.0;
}

double mae_pairwise_force(const EdgeModelBank& bank, const TrajectoryDataset& dataset,
                          const std::vector<int>& permutation) {
    if (bank.kind != DecoderKind::PhysicsInduced) {
        throw config_error("mae_pairwise_force: pairwise forces need the physics-induced decoder");
    }
    if (!has_analytic_force(dataset.kind)) {
        throw config_error("mae_pairwise_force: dataset kind has no analytic pairwise force");
    }
    const std::vector<int> net_for_truth = invert_permutation(permutation);
    const int d = dataset.dims;
    double total = 0.0;
    std::int64_t count = 0;
    for (const SimulationRecord& rec : dataset.sims) {
        for (int t = 0; t < rec.steps; ++t) {
            const bool evolving = dataset.neighbor_count > 0;
            for (int i = 0; i < rec.particles; ++i) {
                const std::vector<int> senders =
                    evolving ? rec.step_neighbors(t, i) : [&] {
                        std::vector<int> all;
                        for (int j = 0; j < rec.particles; ++j) {
                            if (j != i && rec.edge_type(i, j) >= 0) all.push_back(j);
                        }
                        return all;
                    }();
                for (int j : senders) {
                    const int z = rec.edge_type(i, j);
                    if (z < 0) continue;
                    const auto predicted =
                        edge_message(bank, rec, t, i, j, net_for_truth[static_cast<std::size_t>(z)]);
                    const std::array<double, 2> receiver_pos{rec.pos(t, i, 0), rec.pos(t, i, 1)};
                    const std::array<double, 2> sender_pos{rec.pos(t, j, 0), rec.pos(t, j, 1)};
                    const auto actual = pairwise_force(dataset.particle_spec, z, receiver_pos, sender_pos);
                    for (int c = 0; c < d; ++c) {
                        total += std::abs(predicted[static_cast<std::size_t>(c)] -
                                          actual[static_cast<std::size_t>(c)]);
                    }
                    count += d;
                }
            }
        }
    }
    if (count == 0) throw data_error("mae_pairwise_force: no evaluable edges");
    return total / static_cast<double>(count);
}

double mae_force_symmetry(const EdgeModelBank& bank, const TrajectoryDataset& dataset,
                          const std::vector<int>& permutation) {
    if (bank.kind != DecoderKind::PhysicsInduced) {
        throw config_error("mae_force_symmetry: pairwise forces need the physics-induced decoder");
    }
    const std::vector<int> net_for_truth = invert_permutation(permutation);
    const int d = dataset.dims;
    double total = 0.0;
    std::int64_t count = 0;
    for (const SimulationRecord& rec : dataset.sims) {
        for (int t = 0; t < rec.steps; ++t) {
            const bool evolving = dataset.neighbor_count > 0;
            for (int i = 0; i < rec.particles; ++i) {
                const std::vector<int> senders =
                    evolving ? rec.step_neighbors(t, i) : [&] {
                        std::vector<int> all;
                        for (int j = 0; j < rec.particles; ++j) {
                            if (j != i && rec.edge_type(i, j) >= 0) all.push_back(j);
                        }
                        return all;
                    }();
                for (int j : senders) {
                    const int z_forward = rec.edge_type(i, j);
                    const int z_backward = rec.edge_type(j, i);
                    if (z_forward < 0 || z_backward < 0) continue;
                    const auto f_ij = edge_message(bank, rec, t, i, j,
                                                   net_for_truth[static_cast<std::size_t>(z_forward)]);
                    const auto f_ji = edge_message(bank, rec, t, j, i,
                                                   net_for_truth[static_cast<std::size_t>(z_backward)]);
                    for (int c = 0; c < d; ++c) {
                        total += std::abs(f_ij[static_cast<std::size_t>(c)] +
                                          f_ji[static_cast<std::size_t>(c)]);
                    }
                    count += d;
                }
            }
        }
    }
    if (count == 0) throw data_error("mae_force_symmetry: no evaluable edges");
    return total / static_cast<double>(count);
}

namespace {

std::vector<int> active_senders(const TrajectoryDataset& dataset, const SimulationRecord& rec,
                                const std::vector<std::int8_t>& inferred, int t, int node) {
    std::vector<int> senders;
    if (dataset.neighbor_count > 0) {
        for (int j : rec.step_neighbors(t, node)) {
            if (inferred[static_cast<std::size_t>(node) * rec.particles + j] >= 0) senders.push_back(j);
        }
    } else {
        for (int j = 0; j < rec.particles; ++j) {
            if (j != node && inferred[static_cast<std::size_t>(node) * rec.particles + j] >= 0) {
                senders.push_back(j);
            }
        }
    }
    return senders;
}

std::vector<int> types_of(const std::vector<std::int8_t>& inferred, int particles, int node,
                          const std::vector<int>& senders) {
    std::vector<int> types;
    types.reserve(senders.size());
    for (int j : senders) {
        types.push_back(inferred[static_cast<std::size_t>(node) * particles + j]);
    }
    return types;
}

}  // namespace

double mae_acceleration(const EdgeModelBank& bank, const TrajectoryDataset& dataset,
                        const std::vector<std::vector<std::int8_t>>& inferred) {
    const int d = dataset.dims;
    double total = 0.0;
    std::int64_t count = 0;
    for (std::size_t s = 0; s < dataset.sims.size(); ++s) {
        const SimulationRecord& rec = dataset.sims[s];
        for (int t = 0; t < rec.steps; ++t) {
            for (int i = 0; i < rec.particles; ++i) {
                const auto senders = active_senders(dataset, rec, inferred[s], t, i);
                const auto predicted = predict_increment_with_types(
                    bank, rec, t, i, senders, types_of(inferred[s], rec.particles, i, senders));
                for (int c = 0; c < d; ++c) {
                    total += std::abs(predicted[static_cast<std::size_t>(c)] - rec.increment(t, i, c));
                }
                count += d;
            }
        }
    }
    return count > 0 ? total / static_cast<double>(count) : 0.0;
}

RolloutResult rollout_mae_state(const EdgeModelBank& bank, const TrajectoryDataset& dataset,
                                const std::vector<std::vector<std::int8_t>>& inferred,
                                int horizon) {
    if (!dataset.contiguous_steps) {
        throw config_error("rollout_mae_state: dataset steps are not contiguous in time");
    }
    if (horizon < 1) throw config_error("rollout_mae_state: horizon must be >= 1");
    const int d = dataset.dims;
    const double dt = dataset.dt;
    double total = 0.0;
    std::int64_t count = 0;

    for (std::size_t s = 0; s < dataset.sims.size(); ++s) {
        const SimulationRecord& rec = dataset.sims[s];
        SimulationRecord frame;
        frame.particles = rec.particles;
        frame.dims = d;
        frame.steps = 1;
        frame.masses = rec.masses;
        frame.positions.resize(static_cast<std::size_t>(rec.particles) * d);
        frame.velocities.resize(static_cast<std::size_t>(rec.particles) * d);
        frame.increments.assign(static_cast<std::size_t>(rec.particles) * d, 0.0);

        for (int start = 0; start + horizon < rec.steps; ++start) {
            const std::size_t state_size = static_cast<std::size_t>(rec.particles) * d;
            std::copy_n(rec.positions.begin() + static_cast<std::size_t>(start) * state_size,
                        state_size, frame.positions.begin());
            std::copy_n(rec.velocities.begin() + static_cast<std::size_t>(start) * state_size,
                        state_size, frame.velocities.begin());
            for (int h = 0; h < horizon; ++h) {
                // neighbor sets follow the recorded trajectory for evolving graphs
                const int t_ref = start + h;
                std::vector<double> increments(state_size);
                for (int i = 0; i < rec.particles; ++i) {
                    const auto senders =
                        active_senders(dataset, rec, inferred[s], t_ref, i);
                    const auto predicted = predict_increment_with_types(
                        bank, frame, 0, i, senders,
                        types_of(inferred[s], rec.particles, i, senders));
                    for (int c = 0; c < d; ++c) {
                        increments[static_cast<std::size_t>(i) * d + c] =
                            predicted[static_cast<std::size_t>(c)];
                    }
                }
                for (std::size_t idx = 0; idx < state_size; ++idx) {
                    frame.velocities[idx] += increments[idx] * dt;
                    frame.positions[idx] += frame.velocities[idx] * dt;
                }
                for (double x : frame.positions) {
                    if (!std::isfinite(x) || std::abs(x) > 1e6) {
                        return {std::numeric_limits<double>::infinity(), true};
                    }
                }
            }
            const int target = start + horizon;
            for (int i = 0; i < rec.particles; ++i) {
                for (int c = 0; c < d; ++c) {
                    total += std::abs(frame.positions[static_cast<std::size_t>(i) * d + c] -
                                      rec.pos(target, i, c));
                    total += std::abs(frame.velocities[static_cast<std::size_t>(i) * d + c] -
                                      rec.vel(target, i, c));
                }
            }
            count += 2 * d * rec.particles;
        }
    }
    if (count == 0) throw data_error("rollout_mae_state: no evaluable windows");
    return {total / static_cast<double>(count), false};
}

EvaluationReport evaluate(const EdgeModelBank& bank, const TrajectoryDataset& dataset,
                          const std::vector<std::vector<std::int8_t>>& inferred) {
    EvaluationReport report;
    report.steps_evaluated = static_cast<std::int64_t>(dataset.sims.size()) * dataset.steps();

    const auto [predicted, truth] = aligned_edge_types(dataset, inferred);
    report.edges_evaluated = static_cast<std::int64_t>(predicted.size());
    const bool have_truth = !truth.empty();

    if (have_truth) {
        const PermutationResult result = permutation_accuracy(predicted, truth, dataset.type_count);
        report.accuracy = result.accuracy;
        report.permutation = result.permutation;
    } else {
        report.skipped["accuracy"] = "no ground-truth edge types in dataset";
    }

    if (bank.kind != DecoderKind::PhysicsInduced) {
        report.skipped["mae_ef"] = "message-passing decoder has no explicit pairwise force";
        report.skipped["mae_symm"] = "message-passing decoder has no explicit pairwise force";
    } else if (!have_truth) {
        report.skipped["mae_ef"] = "no ground-truth edge types in dataset";
        report.skipped["mae_symm"] = "no ground-truth edge types in dataset";
    } else {
        if (has_analytic_force(dataset.kind)) {
            report.mae_ef = mae_pairwise_force(bank, dataset, report.permutation);
        } else {
            report.skipped["mae_ef"] = "dataset kind has no analytic pairwise force";
        }
        report.mae_symm = mae_force_symmetry(bank, dataset, report.permutation);
    }

    report.mae_acceleration = mae_acceleration(bank, dataset, inferred);
    report.disagreement_rate = type_disagreement_rate(dataset, inferred);

    if (dataset.contiguous_steps && dataset.steps() > 1) {
        const RolloutResult one = rollout_mae_state(bank, dataset, inferred, 1);
        report.mae_state_1 = one.value;
        report.rollout_diverged = one.diverged;
        if (dataset.steps() > 10) {
            const RolloutResult ten = rollout_mae_state(bank, dataset, inferred, 10);
            report.mae_state_10 = ten.value;
            report.rollout_diverged = report.rollout_diverged || ten.diverged;
        } else {
            report.skipped["mae_state_10"] = "fewer than 11 stored steps";
        }
    } else {
        report.skipped["mae_state_1"] = "steps not contiguous in time";
        report.skipped["mae_state_10"] = "steps not contiguous in time";
    }
    return report;
}

}  // namespace cri
