#include "cri/var_cri.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <numeric>
#include <string>

#include "cri/metrics.hpp"

namespace cri {

namespace {

double gaussian_constant(int dims, double sigma_sq) {
    return -0.5 * dims * std::log(2.0 * std::numbers::pi) - 0.5 * dims * std::log(sigma_sq);
}

struct Workspace {
    EdgeTable table;
    std::vector<double> messages;
};

Workspace make_workspace(const VarCriState& state, const TrajectoryDataset& dataset,
                         int chunk_rows = 4096) {
    Workspace ws;
    ws.table = build_edge_table(dataset, state.graph, state.bank.layout);
    ws.messages = compute_messages(state.bank, dataset, ws.table, chunk_rows);
    return ws;
}

// Group sums S_g^t(z_g) in increment units (mass-divided), for one
// (sim, node): sums[(t * realization_total + group_offset[g] + z) * d + c].
struct NodeBuffers {
    std::vector<double> sums;
    std::vector<int> group_offset;
    int realization_total = 0;
};

NodeBuffers build_node_buffers(const VarCriState& state, const TrajectoryDataset& dataset,
                               const Workspace& ws, int sim, int node) {
    const int d = dataset.dims;
    const int k_count = state.type_count();
    const SimulationRecord& rec = dataset.sims[static_cast<std::size_t>(sim)];
    const double mass = rec.masses[static_cast<std::size_t>(node)];
    const GroupPartition& partition = state.partitions[static_cast<std::size_t>(node)];
    const auto& tables = state.group_tables[static_cast<std::size_t>(node)];

    NodeBuffers buffers;
    buffers.group_offset.resize(tables.size() + 1, 0);
    for (std::size_t g = 0; g < tables.size(); ++g) {
        buffers.group_offset[g + 1] = buffers.group_offset[g] + static_cast<int>(tables[g].size());
    }
    buffers.realization_total = buffers.group_offset.back();
    const int T = rec.steps;
    buffers.sums.assign(static_cast<std::size_t>(T) * buffers.realization_total * d, 0.0);

    for (int t = 0; t < T; ++t) {
        const std::size_t base = ws.table.node_row_start(sim, t, node);
        for (int g = 0; g < partition.group_count(); ++g) {
            const RealizationTable& table = tables[static_cast<std::size_t>(g)];
            const int first_slot = partition.offsets[static_cast<std::size_t>(g)];
            for (std::int64_t z = 0; z < table.size(); ++z) {
                double* acc = buffers.sums.data() +
                              (static_cast<std::size_t>(t) * buffers.realization_total +
                               buffers.group_offset[static_cast<std::size_t>(g)] + z) * d;
                for (int slot = 0; slot < table.slot_count; ++slot) {
                    const double* msg = ws.messages.data() +
                                        ((base + static_cast<std::size_t>(first_slot + slot)) *
                                             k_count + table.phi(z, slot)) * d;
                    for (int c = 0; c < d; ++c) acc[c] += msg[c] / mass;
                }
            }
        }
    }
    return buffers;
}

// Per-step expected group sums under the current factors.
void group_means(const VarCriState& state, const NodeBuffers& buffers, int row, int t, int d,
                 std::vector<double>& means, std::vector<double>& total) {
    const auto& factors = state.factors[static_cast<std::size_t>(row)];
    std::fill(total.begin(), total.end(), 0.0);
    for (std::size_t g = 0; g < factors.size(); ++g) {
        double* mean = means.data() + g * static_cast<std::size_t>(d);
        std::fill(mean, mean + d, 0.0);
        for (std::size_t z = 0; z < factors[g].size(); ++z) {
            const double* sum = buffers.sums.data() +
                                (static_cast<std::size_t>(t) * buffers.realization_total +
                                 buffers.group_offset[g] + static_cast<std::int64_t>(z)) * d;
            for (int c = 0; c < d; ++c) mean[c] += factors[g][z] * sum[c];
        }
        for (int c = 0; c < d; ++c) total[static_cast<std::size_t>(c)] += mean[c];
    }
}

void check_factor(const std::vector<double>& factor, int sim, int node, int group) {
    for (double q : factor) {
        if (!std::isfinite(q)) {
            throw numeric_error("mean_field_update: factor collapsed for node " +
                                std::to_string(node) + ", group " + std::to_string(group) +
                                " in simulation " + std::to_string(sim));
        }
    }
}

}  // namespace

GroupPartition make_partition(int slot_count, int groups) {
    GroupPartition partition;
    partition.offsets.push_back(0);
    if (slot_count == 0) return partition;
    const int m = std::max(1, std::min(groups, slot_count));
    const int small = slot_count / m;
    const int large_groups = slot_count % m;
    for (int g = 0; g < m; ++g) {
        const int size = small + (g < large_groups ? 1 : 0);
        partition.offsets.push_back(partition.offsets.back() + size);
    }
    return partition;
}

VarCriState make_var_state(EdgeModelBank bank, const InteractionGraph& graph, int simulations,
                           int groups, double learning_rate, std::int64_t realization_cap) {
    if (bank.kind != DecoderKind::PhysicsInduced) {
        throw config_error(
            "var-cri: the mean-field expectations use the quadratic (physics-induced) form");
    }
    VarCriState state;
    state.bank = std::move(bank);
    state.graph = graph;
    state.realization_cap = realization_cap;
    const int k_count = state.bank.type_count();

    state.partitions.reserve(static_cast<std::size_t>(graph.node_count));
    state.group_tables.resize(static_cast<std::size_t>(graph.node_count));
    for (int i = 0; i < graph.node_count; ++i) {
        const int degree = static_cast<int>(graph.neighbors[static_cast<std::size_t>(i)].size());
        GroupPartition partition = make_partition(degree, groups);
        for (int g = 0; g < partition.group_count(); ++g) {
            state.group_tables[static_cast<std::size_t>(i)].push_back(
                enumerate_realizations(k_count, partition.group_size(g), realization_cap));
            const int size = partition.group_size(g);
            if (!state.omega.count(size)) {
                const std::int64_t zc = state.group_tables[static_cast<std::size_t>(i)].back().size();
                state.omega[size] =
                    std::vector<double>(static_cast<std::size_t>(zc), 1.0 / static_cast<double>(zc));
            }
        }
        state.partitions.push_back(std::move(partition));
    }

    state.factors.resize(static_cast<std::size_t>(simulations) * graph.node_count);
    for (int s = 0; s < simulations; ++s) {
        for (int i = 0; i < graph.node_count; ++i) {
            auto& node_factors = state.factors[static_cast<std::size_t>(s) * graph.node_count + i];
            for (const auto& table : state.group_tables[static_cast<std::size_t>(i)]) {
                node_factors.emplace_back(static_cast<std::size_t>(table.size()),
                                          1.0 / static_cast<double>(table.size()));
            }
        }
    }

    for (int k = 0; k < k_count; ++k) {
        state.edge_adam.emplace_back(state.bank.edge_spec.param_count(), learning_rate);
    }
    return state;
}

namespace {

void mean_field_update_with(VarCriState& state, const TrajectoryDataset& dataset,
                            const Workspace& ws, int sim, int node, int sweeps,
                            double tolerance) {
    const int d = dataset.dims;
    const int nodes = state.graph.node_count;
    const int row = sim * nodes + node;
    auto& factors = state.factors[static_cast<std::size_t>(row)];
    if (factors.empty()) return;
    const SimulationRecord& rec = dataset.sims[static_cast<std::size_t>(sim)];
    const double sigma_sq = state.bank.sigma_sq;
    const auto& tables = state.group_tables[static_cast<std::size_t>(node)];
    const GroupPartition& partition = state.partitions[static_cast<std::size_t>(node)];

    const NodeBuffers buffers = build_node_buffers(state, dataset, ws, sim, node);
    const int T = rec.steps;

    // running per-step expected sums; refreshed after every factor update
    std::vector<double> means(factors.size() * static_cast<std::size_t>(d) * T);
    std::vector<double> totals(static_cast<std::size_t>(d) * T);
    {
        std::vector<double> mean_t(factors.size() * static_cast<std::size_t>(d));
        std::vector<double> total_t(static_cast<std::size_t>(d));
        for (int t = 0; t < T; ++t) {
            group_means(state, buffers, row, t, d, mean_t, total_t);
            std::copy(mean_t.begin(), mean_t.end(),
                      means.begin() + static_cast<std::size_t>(t) * mean_t.size());
            std::copy(total_t.begin(), total_t.end(),
                      totals.begin() + static_cast<std::size_t>(t) * d);
        }
    }

    std::vector<double> scores;
    for (int sweep = 0; sweep < sweeps; ++sweep) {
        double max_change = 0.0;
        for (std::size_t g = 0; g < factors.size(); ++g) {
            const RealizationTable& table = tables[g];
            const auto& omega = state.omega.at(partition.group_size(static_cast<int>(g)));
            scores.assign(factors[g].size(), 0.0);
            for (std::size_t z = 0; z < scores.size(); ++z) {
                scores[z] = omega[z] > 0.0 ? std::log(omega[z])
                                           : -std::numeric_limits<double>::infinity();
            }
            for (int t = 0; t < T; ++t) {
                const double* truth =
                    rec.increments.data() + (static_cast<std::size_t>(t) * nodes + node) * d;
                const double* total = totals.data() + static_cast<std::size_t>(t) * d;
                const double* mean_g =
                    means.data() + (static_cast<std::size_t>(t) * factors.size() + g) * d;
                for (std::size_t z = 0; z < scores.size(); ++z) {
                    const double* sum = buffers.sums.data() +
                                        (static_cast<std::size_t>(t) * buffers.realization_total +
                                         buffers.group_offset[g] + static_cast<std::int64_t>(z)) * d;
                    double squared = 0.0;
                    for (int c = 0; c < d; ++c) {
                        const double diff = truth[c] - (sum[c] + total[c] - mean_g[c]);
                        squared += diff * diff;
                    }
                    scores[z] += -squared / (2.0 * sigma_sq);
                }
            }
            double max_score = -std::numeric_limits<double>::infinity();
            for (double sc : scores) max_score = std::max(max_score, sc);
            if (!std::isfinite(max_score)) {
                throw numeric_error("mean_field_update: all-zero factor for node " +
                                    std::to_string(node) + " in simulation " + std::to_string(sim));
            }
            double total_mass = 0.0;
            for (double& sc : scores) {
                sc = std::exp(sc - max_score);
                total_mass += sc;
            }
            for (std::size_t z = 0; z < scores.size(); ++z) {
                const double updated = scores[z] / total_mass;
                max_change = std::max(max_change, std::abs(updated - factors[g][z]));
                factors[g][z] = updated;
            }
            check_factor(factors[g], sim, node, static_cast<int>(g));
            // refresh this group's expected sums
            for (int t = 0; t < T; ++t) {
                double* mean_g =
                    means.data() + (static_cast<std::size_t>(t) * factors.size() + g) * d;
                double* total = totals.data() + static_cast<std::size_t>(t) * d;
                for (int c = 0; c < d; ++c) total[static_cast<std::size_t>(c)] -= mean_g[c];
                std::fill(mean_g, mean_g + d, 0.0);
                for (std::size_t z = 0; z < factors[g].size(); ++z) {
                    const double* sum = buffers.sums.data() +
                                        (static_cast<std::size_t>(t) * buffers.realization_total +
                                         buffers.group_offset[g] + static_cast<std::int64_t>(z)) * d;
                    for (int c = 0; c < d; ++c) mean_g[c] += factors[g][z] * sum[c];
                }
                for (int c = 0; c < d; ++c) total[static_cast<std::size_t>(c)] += mean_g[c];
            }
        }
        if (max_change < tolerance) break;
    }
}

// E_q[sum_t log l] for one (sim, node) under the current factors, plus the
// entropy and prior terms needed for the ELBO.
struct NodeObjective {
    double expected_loglik = 0.0;  // includes Gaussian constants
    double prior_term = 0.0;       // E_q[log omega]
    double entropy = 0.0;
};

NodeObjective node_objective(const VarCriState& state, const TrajectoryDataset& dataset,
                             const Workspace& ws, int sim, int node) {
    NodeObjective objective;
    const int d = dataset.dims;
    const int nodes = state.graph.node_count;
    const int row = sim * nodes + node;
    const auto& factors = state.factors[static_cast<std::size_t>(row)];
    if (factors.empty()) return objective;
    const SimulationRecord& rec = dataset.sims[static_cast<std::size_t>(sim)];
    const double sigma_sq = state.bank.sigma_sq;
    const double constant = gaussian_constant(d, sigma_sq);
    const GroupPartition& partition = state.partitions[static_cast<std::size_t>(node)];

    const NodeBuffers buffers = build_node_buffers(state, dataset, ws, sim, node);
    std::vector<double> mean_t(factors.size() * static_cast<std::size_t>(d));
    std::vector<double> total_t(static_cast<std::size_t>(d));
    for (int t = 0; t < rec.steps; ++t) {
        group_means(state, buffers, row, t, d, mean_t, total_t);
        const double* truth =
            rec.increments.data() + (static_cast<std::size_t>(t) * nodes + node) * d;
        double squared = 0.0;
        for (int c = 0; c < d; ++c) {
            const double diff = truth[c] - total_t[static_cast<std::size_t>(c)];
            squared += diff * diff;
        }
        double variance = 0.0;
        for (std::size_t g = 0; g < factors.size(); ++g) {
            double second_moment = 0.0;
            for (std::size_t z = 0; z < factors[g].size(); ++z) {
                const double* sum = buffers.sums.data() +
                                    (static_cast<std::size_t>(t) * buffers.realization_total +
                                     buffers.group_offset[g] + static_cast<std::int64_t>(z)) * d;
                double norm_sq = 0.0;
                for (int c = 0; c < d; ++c) norm_sq += sum[c] * sum[c];
                second_moment += factors[g][z] * norm_sq;
            }
            double mean_norm_sq = 0.0;
            const double* mean_g = mean_t.data() + g * static_cast<std::size_t>(d);
            for (int c = 0; c < d; ++c) mean_norm_sq += mean_g[c] * mean_g[c];
            variance += second_moment - mean_norm_sq;
        }
        objective.expected_loglik += -(squared + variance) / (2.0 * sigma_sq) + constant;
    }

    for (std::size_t g = 0; g < factors.size(); ++g) {
        const auto& omega = state.omega.at(partition.group_size(static_cast<int>(g)));
        for (std::size_t z = 0; z < factors[g].size(); ++z) {
            const double q = factors[g][z];
            if (q > 0.0) {
                objective.prior_term +=
                    q * (omega[z] > 0.0 ? std::log(omega[z])
                                        : -std::numeric_limits<double>::infinity());
                objective.entropy -= q * std::log(q);
            }
        }
    }
    return objective;
}

double var_theta_q_term(const VarCriState& state, const TrajectoryDataset& dataset,
                        const Workspace& ws) {
    double q = 0.0;
    const int sims = static_cast<int>(dataset.sims.size());
    for (int s = 0; s < sims; ++s) {
        for (int i = 0; i < state.graph.node_count; ++i) {
            q += node_objective(state, dataset, ws, s, i).expected_loglik;
        }
    }
    return q;
}

}  // namespace

void mean_field_update(VarCriState& state, const TrajectoryDataset& dataset, int sim, int node,
                       int sweeps, double tolerance) {
    const Workspace ws = make_workspace(state, dataset);
    mean_field_update_with(state, dataset, ws, sim, node, sweeps, tolerance);
}

void var_e_step(VarCriState& state, const TrajectoryDataset& dataset, int sweeps,
                double tolerance) {
    const Workspace ws = make_workspace(state, dataset);
    const int sims = static_cast<int>(dataset.sims.size());
    // factors restart uniform each E-step and re-form by cycling
    for (auto& node_factors : state.factors) {
        for (auto& factor : node_factors) {
            std::fill(factor.begin(), factor.end(), 1.0 / static_cast<double>(factor.size()));
        }
    }
    for (int s = 0; s < sims; ++s) {
        for (int i = 0; i < state.graph.node_count; ++i) {
            mean_field_update_with(state, dataset, ws, s, i, sweeps, tolerance);
        }
    }
    double elbo = 0.0;
    for (int s = 0; s < sims; ++s) {
        for (int i = 0; i < state.graph.node_count; ++i) {
            const NodeObjective objective = node_objective(state, dataset, ws, s, i);
            elbo += objective.expected_loglik + objective.prior_term + objective.entropy;
        }
    }
    state.elbo = elbo;
}

void var_m_step_priors(VarCriState& state) {
    std::map<int, std::vector<double>> sums;
    std::map<int, double> counts;
    const int nodes = state.graph.node_count;
    for (std::size_t row = 0; row < state.factors.size(); ++row) {
        const int node = static_cast<int>(row) % nodes;
        const GroupPartition& partition = state.partitions[static_cast<std::size_t>(node)];
        const auto& factors = state.factors[row];
        for (std::size_t g = 0; g < factors.size(); ++g) {
            const int size = partition.group_size(static_cast<int>(g));
            auto& sum = sums[size];
            if (sum.empty()) sum.assign(factors[g].size(), 0.0);
            for (std::size_t z = 0; z < factors[g].size(); ++z) sum[z] += factors[g][z];
            counts[size] += 1.0;
        }
    }
    if (sums.empty()) throw data_error("var_m_step_priors: no groups; dataset has no edges");
    for (auto& [size, sum] : sums) {
        const double count = counts[size];
        for (double& v : sum) v /= count;
        state.omega[size] = sum;
    }
}

void var_m_step_theta(VarCriState& state, const TrajectoryDataset& dataset,
                      const std::vector<int>& step_batch) {
    const Workspace ws = make_workspace(state, dataset);
    const int d = dataset.dims;
    const int k_count = state.type_count();
    const int nodes = state.graph.node_count;
    const double sigma_sq = state.bank.sigma_sq;

    std::vector<std::uint8_t> in_batch;
    if (!step_batch.empty()) {
        in_batch.assign(static_cast<std::size_t>(dataset.steps()), 0);
        for (int t : step_batch) in_batch[static_cast<std::size_t>(t)] = 1;
    }
    const auto step_selected = [&](int t) {
        return in_batch.empty() || in_batch[static_cast<std::size_t>(t)] != 0;
    };

    std::vector<double> upstreams(ws.messages.size(), 0.0);
    const int sims = static_cast<int>(dataset.sims.size());
    for (int s = 0; s < sims; ++s) {
        const SimulationRecord& rec = dataset.sims[static_cast<std::size_t>(s)];
        for (int i = 0; i < nodes; ++i) {
            const int row = s * nodes + i;
            const auto& factors = state.factors[static_cast<std::size_t>(row)];
            if (factors.empty()) continue;
            const auto& tables = state.group_tables[static_cast<std::size_t>(i)];
            const GroupPartition& partition = state.partitions[static_cast<std::size_t>(i)];
            const double mass = rec.masses[static_cast<std::size_t>(i)];
            const NodeBuffers buffers = build_node_buffers(state, dataset, ws, s, i);
            std::vector<double> mean_t(factors.size() * static_cast<std::size_t>(d));
            std::vector<double> total_t(static_cast<std::size_t>(d));
            for (int t = 0; t < rec.steps; ++t) {
                if (!step_selected(t)) continue;
                group_means(state, buffers, row, t, d, mean_t, total_t);
                const std::size_t base = ws.table.node_row_start(s, t, i);
                const double* truth =
                    rec.increments.data() + (static_cast<std::size_t>(t) * nodes + i) * d;
                for (std::size_t g = 0; g < factors.size(); ++g) {
                    const RealizationTable& table = tables[g];
                    const int first_slot = partition.offsets[g];
                    const double* mean_g = mean_t.data() + g * static_cast<std::size_t>(d);
                    for (std::int64_t z = 0; z < table.size(); ++z) {
                        const double weight = factors[g][static_cast<std::size_t>(z)];
                        if (weight == 0.0) continue;
                        const double* sum =
                            buffers.sums.data() +
                            (static_cast<std::size_t>(t) * buffers.realization_total +
                             buffers.group_offset[g] + z) * d;
                        double residual[4];
                        for (int c = 0; c < d; ++c) {
                            residual[c] = truth[c] -
                                          (sum[c] + total_t[static_cast<std::size_t>(c)] - mean_g[c]);
                            if (!std::isfinite(residual[c])) {
                                throw numeric_error("var_m_step_theta: non-finite residual at sim " +
                                                    std::to_string(s) + ", node " + std::to_string(i) +
                                                    ", group " + std::to_string(g) + ", step " +
                                                    std::to_string(t));
                            }
                        }
                        const double scale_factor = -weight / (sigma_sq * mass);
                        for (int slot = 0; slot < table.slot_count; ++slot) {
                            const int type = table.phi(z, slot);
                            double* dst = upstreams.data() +
                                          ((base + static_cast<std::size_t>(first_slot + slot)) *
                                               k_count + type) * d;
                            for (int c = 0; c < d; ++c) dst[c] += scale_factor * residual[c];
                        }
                    }
                }
            }
        }
    }

    std::vector<std::size_t> selected;
    selected.reserve(ws.table.row_count());
    for (std::size_t r = 0; r < ws.table.row_count(); ++r) {
        if (step_selected(ws.table.rows[r].t)) selected.push_back(r);
    }
    std::vector<ParamVector> gradients;
    for (int k = 0; k < k_count; ++k) gradients.push_back(zero_params(state.bank.edge_spec));
    accumulate_edge_gradients(state.bank, dataset, ws.table, upstreams, selected, gradients);
    for (int k = 0; k < k_count; ++k) {
        adam_step(state.bank.edge_params[static_cast<std::size_t>(k)],
                  gradients[static_cast<std::size_t>(k)],
                  state.edge_adam[static_cast<std::size_t>(k)]);
    }
}

double q_var(const VarCriState& state, const TrajectoryDataset& dataset) {
    const Workspace ws = make_workspace(state, dataset);
    double q = 0.0;
    const int sims = static_cast<int>(dataset.sims.size());
    for (int s = 0; s < sims; ++s) {
        for (int i = 0; i < state.graph.node_count; ++i) {
            const NodeObjective objective = node_objective(state, dataset, ws, s, i);
            q += objective.expected_loglik + objective.prior_term;
        }
    }
    return q;
}

std::vector<std::vector<std::int8_t>> var_infer_edge_types(const VarCriState& state) {
    const int nodes = state.graph.node_count;
    const int sims = static_cast<int>(state.factors.size()) / nodes;
    std::vector<std::vector<std::int8_t>> result(
        static_cast<std::size_t>(sims),
        std::vector<std::int8_t>(static_cast<std::size_t>(nodes) * nodes, -1));
    for (int s = 0; s < sims; ++s) {
        for (int i = 0; i < nodes; ++i) {
            const auto& factors = state.factors[static_cast<std::size_t>(s) * nodes + i];
            const auto& tables = state.group_tables[static_cast<std::size_t>(i)];
            const GroupPartition& partition = state.partitions[static_cast<std::size_t>(i)];
            const auto& senders = state.graph.neighbors[static_cast<std::size_t>(i)];
            for (std::size_t g = 0; g < factors.size(); ++g) {
                std::size_t best = 0;
                for (std::size_t z = 1; z < factors[g].size(); ++z) {
                    if (factors[g][z] > factors[g][best]) best = z;
                }
                const int first_slot = partition.offsets[g];
                for (int slot = 0; slot < tables[g].slot_count; ++slot) {
                    const int sender = senders[static_cast<std::size_t>(first_slot + slot)];
                    result[static_cast<std::size_t>(s)][static_cast<std::size_t>(i) * nodes + sender] =
                        static_cast<std::int8_t>(
                            tables[g].phi(static_cast<std::int64_t>(best), slot));
                }
            }
        }
    }
    return result;
}

namespace {

std::vector<std::vector<std::int8_t>> var_infer_for_dataset(const VarCriState& trained,
                                                            const TrajectoryDataset& dataset,
                                                            const TrainControl& control) {
    VarCriState probe = make_var_state(trained.bank, trained.graph,
                                       static_cast<int>(dataset.sims.size()),
                                       control.mean_field_groups, control.learning_rate,
                                       control.realization_cap);
    probe.omega = trained.omega;
    var_e_step(probe, dataset, control.mean_field_sweeps, control.sweep_tolerance);
    return var_infer_edge_types(probe);
}

}  // namespace

TrainResult train_var(const EdgeModelBank& initial_bank, const TrainControl& control,
                      const TrajectoryDataset& train, const TrajectoryDataset* validation) {
    if (train.neighbor_count > 0) {
        throw config_error("train_var: dataset has an evolving topology; use train_evolving");
    }
    initial_bank.validate(train.dims);

    VarCriState state = make_var_state(
        initial_bank, InteractionGraph::all_pairs(train.particles, train.type_count),
        static_cast<int>(train.sims.size()), control.mean_field_groups, control.learning_rate,
        control.realization_cap);

    TrainResult result;
    EdgeModelBank best_bank = state.bank;
    auto best_omega = state.omega;
    double best_score = std::numeric_limits<double>::infinity();
    int epochs_since_best = 0;

    for (int epoch = 1; epoch <= control.epochs; ++epoch) {
        state.epoch = epoch;
        var_e_step(state, train, control.mean_field_sweeps, control.sweep_tolerance);

        HistoryRow row;
        row.epoch = epoch;
        row.marginal_log_likelihood = state.elbo;  // tractable bound for Var-CRI
        row.q_value = q_var(state, train);

        var_m_step_priors(state);

        std::vector<int> batch;
        if (control.theta_batch_steps > 0 && control.theta_batch_steps < train.steps()) {
            Rng rng(derive_seed(control.seed, 0x7661 ^ static_cast<std::uint64_t>(epoch)));
            std::vector<int> all(static_cast<std::size_t>(train.steps()));
            std::iota(all.begin(), all.end(), 0);
            for (int pick = 0; pick < control.theta_batch_steps; ++pick) {
                const int swap_with = pick + rng.uniform_int(train.steps() - pick);
                std::swap(all[static_cast<std::size_t>(pick)],
                          all[static_cast<std::size_t>(swap_with)]);
            }
            batch.assign(all.begin(), all.begin() + control.theta_batch_steps);
            std::sort(batch.begin(), batch.end());
        }

        const std::vector<ParamVector> params_before = state.bank.edge_params;
        double q_theta_before = 0.0;
        if (control.ascent_guard) {
            const Workspace ws_before = make_workspace(state, train, control.chunk_rows);
            q_theta_before = var_theta_q_term(state, train, ws_before);
        }

        var_m_step_theta(state, train, batch);

        if (control.ascent_guard) {
            Workspace ws_after = make_workspace(state, train, control.chunk_rows);
            double q_theta_after = var_theta_q_term(state, train, ws_after);
            int halvings = 0;
            while (q_theta_after < q_theta_before && halvings < control.ascent_max_halvings) {
                for (std::size_t k = 0; k < state.bank.edge_params.size(); ++k) {
                    auto& now = state.bank.edge_params[k];
                    const auto& old = params_before[k];
                    for (std::size_t p = 0; p < now.size(); ++p) {
                        now[p] = old[p] + 0.5 * (now[p] - old[p]);
                    }
                }
                halvings += 1;
                ws_after = make_workspace(state, train, control.chunk_rows);
                q_theta_after = var_theta_q_term(state, train, ws_after);
            }
            if (q_theta_after < q_theta_before) state.bank.edge_params = params_before;
        }

        const bool validate_now =
            validation != nullptr &&
            (epoch % control.validate_every == 0 || epoch == control.epochs);
        if (validate_now) {
            const auto valid_types = var_infer_for_dataset(state, *validation, control);
            row.validation_mae_state =
                validation->contiguous_steps && validation->steps() > 1
                    ? rollout_mae_state(state.bank, *validation, valid_types, 1).value
                    : mae_acceleration(state.bank, *validation, valid_types);
            if (row.validation_mae_state < best_score) {
                best_score = row.validation_mae_state;
                best_bank = state.bank;
                best_omega = state.omega;
                result.best_epoch = epoch;
                epochs_since_best = 0;
            } else {
                epochs_since_best += control.validate_every;
            }
        }

        const auto train_types = var_infer_edge_types(state);
        const auto [predicted, truth] = aligned_edge_types(train, train_types);
        if (!truth.empty()) {
            row.accuracy = permutation_accuracy(predicted, truth, train.type_count).accuracy;
        }
        result.history.push_back(row);

        if (validation != nullptr && control.early_stop_patience > 0 &&
            epochs_since_best >= control.early_stop_patience) {
            break;
        }
    }

    if (validation != nullptr && std::isfinite(best_score)) {
        state.bank = best_bank;
        state.omega = best_omega;
    } else {
        result.best_epoch = state.epoch;
    }
    var_e_step(state, train, control.mean_field_sweeps, control.sweep_tolerance);
    result.bank = state.bank;
    result.tau.assign(static_cast<std::size_t>(state.type_count()),
                      1.0 / state.type_count());  // var-cri keeps group priors instead
    result.omega = state.omega;
    result.edge_types = var_infer_edge_types(state);
    result.disagreement_rate = type_disagreement_rate(train, result.edge_types);
    result.history.shrink_to_fit();
    return result;
}

}  // namespace cri
