#include "cri/cri_em.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <numbers>
#include <numeric>
#include <string>

#include "cri/metrics.hpp"

namespace cri {

namespace {

struct Workspace {
    EdgeTable table;
    std::vector<double> messages;
};

Workspace make_workspace(const CriState& state, const TrajectoryDataset& dataset,
                         int chunk_rows = 4096) {
    Workspace ws;
    ws.table = build_edge_table(dataset, state.graph, state.bank.layout);
    ws.messages = compute_messages(state.bank, dataset, ws.table, chunk_rows);
    return ws;
}

// log pi_z per realization for every node, computed from tau and cached by
// subgraph degree.
std::vector<const std::vector<double>*> cached_log_priors(
    const CriState& state, std::map<int, std::vector<double>>& cache) {
    std::vector<const std::vector<double>*> per_node(state.tables.size());
    for (std::size_t i = 0; i < state.tables.size(); ++i) {
        const int degree = state.tables[i].slot_count;
        auto it = cache.find(degree);
        if (it == cache.end()) {
            it = cache.emplace(degree, realization_log_priors(state.tau, state.tables[i])).first;
        }
        per_node[i] = &it->second;
    }
    return per_node;
}

double gaussian_constant(int dims, double sigma_sq) {
    return -0.5 * dims * std::log(2.0 * std::numbers::pi) - 0.5 * dims * std::log(sigma_sq);
}

// Predicted increment for one (sim, node, step, realization) of a
// message-passing bank, from cached edge messages.
std::vector<double> mp_prediction(const CriState& state, const TrajectoryDataset& dataset,
                                  const Workspace& ws, int sim, int node, int t,
                                  const RealizationTable& table, std::int64_t z) {
    const int d = dataset.dims;
    const int k_count = state.bank.type_count();
    const int msg_width = state.bank.edge_spec.output_width();
    const std::size_t base = ws.table.node_row_start(sim, t, node);
    std::vector<double> input(static_cast<std::size_t>(state.bank.node_spec.input_width()), 0.0);
    for (int slot = 0; slot < table.slot_count; ++slot) {
        const double* msg = ws.messages.data() +
                            ((base + static_cast<std::size_t>(slot)) * k_count +
                             table.phi(z, slot)) * msg_width;
        for (int w = 0; w < msg_width; ++w) input[static_cast<std::size_t>(w)] += msg[w];
    }
    write_node_features(state.bank.layout, dataset.sims[static_cast<std::size_t>(sim)], t, node,
                        input.data() + msg_width);
    return mlp_forward(state.bank.node_spec, state.bank.node_params, input);
}

// Sum over stored steps of the conditional log-likelihood, per realization,
// for every (sim, node) row.
std::vector<std::vector<double>> likelihood_tables(const CriState& state,
                                                   const TrajectoryDataset& dataset,
                                                   const Workspace& ws) {
    const int nodes = state.graph.node_count;
    const int sims = static_cast<int>(dataset.sims.size());
    const int d = dataset.dims;
    const int k_count = state.bank.type_count();
    const double sigma_sq = state.bank.sigma_sq;
    const double constant = gaussian_constant(d, sigma_sq);
    const bool physics = state.bank.kind == DecoderKind::PhysicsInduced;

    std::vector<std::vector<double>> tables(static_cast<std::size_t>(sims) * nodes);
    std::vector<double> sums;
    for (int s = 0; s < sims; ++s) {
        const SimulationRecord& rec = dataset.sims[static_cast<std::size_t>(s)];
        for (int i = 0; i < nodes; ++i) {
            const RealizationTable& table = state.tables[static_cast<std::size_t>(i)];
            const std::int64_t zc = table.size();
            auto& loglik = tables[static_cast<std::size_t>(s) * nodes + i];
            loglik.assign(static_cast<std::size_t>(zc), 0.0);
            const double mass = rec.masses[static_cast<std::size_t>(i)];
            for (int t = 0; t < rec.steps; ++t) {
                const std::size_t base = ws.table.node_row_start(s, t, i);
                const double* truth =
                    rec.increments.data() + (static_cast<std::size_t>(t) * nodes + i) * d;
                if (physics) {
                    sums.assign(static_cast<std::size_t>(zc) * d, 0.0);
                    for (int slot = 0; slot < table.slot_count; ++slot) {
                        const double* slot_messages =
                            ws.messages.data() +
                            (base + static_cast<std::size_t>(slot)) * k_count * d;
                        const std::int64_t scale = table.slot_scale[static_cast<std::size_t>(slot)];
                        for (std::int64_t z = 0; z < zc; ++z) {
                            const double* msg =
                                slot_messages + static_cast<std::size_t>((z / scale) % k_count) * d;
                            double* acc = sums.data() + static_cast<std::size_t>(z) * d;
                            for (int c = 0; c < d; ++c) acc[c] += msg[c];
                        }
                    }
                    for (std::int64_t z = 0; z < zc; ++z) {
                        const double* acc = sums.data() + static_cast<std::size_t>(z) * d;
                        double squared = 0.0;
                        for (int c = 0; c < d; ++c) {
                            const double diff = truth[c] - acc[c] / mass;
                            squared += diff * diff;
                        }
                        loglik[static_cast<std::size_t>(z)] +=
                            -squared / (2.0 * sigma_sq) + constant;
                    }
                } else {
                    for (std::int64_t z = 0; z < zc; ++z) {
                        const auto predicted = mp_prediction(state, dataset, ws, s, i, t, table, z);
                        double squared = 0.0;
                        for (int c = 0; c < d; ++c) {
                            const double diff = truth[c] - predicted[static_cast<std::size_t>(c)];
                            squared += diff * diff;
                        }
                        loglik[static_cast<std::size_t>(z)] +=
                            -squared / (2.0 * sigma_sq) + constant;
                    }
                }
            }
        }
    }
    return tables;
}

void e_step_with(CriState& state, const TrajectoryDataset& dataset, const Workspace& ws) {
    state.log_likelihood = likelihood_tables(state, dataset, ws);
    const int nodes = state.graph.node_count;
    std::map<int, std::vector<double>> prior_cache;
    const auto log_priors = cached_log_priors(state, prior_cache);

    state.posterior.resize(state.log_likelihood.size());
    double marginal = 0.0;
    for (std::size_t row = 0; row < state.log_likelihood.size(); ++row) {
        const int node = static_cast<int>(row) % nodes;
        const auto& priors = *log_priors[static_cast<std::size_t>(node)];
        const auto& loglik = state.log_likelihood[row];
        auto& post = state.posterior[row];
        post.resize(loglik.size());
        double max_lp = -std::numeric_limits<double>::infinity();
        for (std::size_t z = 0; z < loglik.size(); ++z) {
            post[z] = priors[z] + loglik[z];
            max_lp = std::max(max_lp, post[z]);
        }
        if (!std::isfinite(max_lp)) {
            throw numeric_error("e_step: posterior collapsed for node " +
                                std::to_string(node) + " in simulation " +
                                std::to_string(row / static_cast<std::size_t>(nodes)));
        }
        double total = 0.0;
        for (double& lp : post) {
            lp = std::exp(lp - max_lp);
            total += lp;
        }
        for (double& p : post) p /= total;
        marginal += max_lp + std::log(total);
    }
    state.marginal_log_likelihood = marginal;
}

double theta_q_term(const CriState& state, const std::vector<std::vector<double>>& loglik) {
    double q = 0.0;
    for (std::size_t row = 0; row < state.posterior.size(); ++row) {
        const auto& post = state.posterior[row];
        const auto& ll = loglik[row];
        for (std::size_t z = 0; z < post.size(); ++z) {
            if (post[z] > 0.0) q += post[z] * ll[z];
        }
    }
    return q;
}

// Gradients of the loss -Q_theta, accumulated over the selected steps.
ThetaGradients theta_loss_gradients(const CriState& state, const TrajectoryDataset& dataset,
                                    const Workspace& ws, const std::vector<int>& step_batch,
                                    int chunk_rows) {
    const int nodes = state.graph.node_count;
    const int sims = static_cast<int>(dataset.sims.size());
    const int d = dataset.dims;
    const int k_count = state.bank.type_count();
    const int msg_width = state.bank.edge_spec.output_width();
    const double sigma_sq = state.bank.sigma_sq;
    const bool physics = state.bank.kind == DecoderKind::PhysicsInduced;

    std::vector<std::uint8_t> in_batch;
    if (!step_batch.empty()) {
        in_batch.assign(static_cast<std::size_t>(dataset.steps()), 0);
        for (int t : step_batch) in_batch[static_cast<std::size_t>(t)] = 1;
    }
    const auto step_selected = [&](int t) {
        return in_batch.empty() || in_batch[static_cast<std::size_t>(t)] != 0;
    };

    std::vector<double> upstreams(ws.messages.size(), 0.0);
    ThetaGradients gradients;
    if (!physics) gradients.node = zero_params(state.bank.node_spec);
    ParamVector& node_grad = gradients.node;

    std::vector<double> sums;
    for (int s = 0; s < sims; ++s) {
        const SimulationRecord& rec = dataset.sims[static_cast<std::size_t>(s)];
        for (int i = 0; i < nodes; ++i) {
            const RealizationTable& table = state.tables[static_cast<std::size_t>(i)];
            const std::int64_t zc = table.size();
            const auto& post = state.posterior[static_cast<std::size_t>(s) * nodes + i];
            const double mass = rec.masses[static_cast<std::size_t>(i)];
            for (int t = 0; t < rec.steps; ++t) {
                if (!step_selected(t)) continue;
                const std::size_t base = ws.table.node_row_start(s, t, i);
                const double* truth =
                    rec.increments.data() + (static_cast<std::size_t>(t) * nodes + i) * d;
                if (physics) {
                    sums.assign(static_cast<std::size_t>(zc) * d, 0.0);
                    for (int slot = 0; slot < table.slot_count; ++slot) {
                        const double* slot_messages =
                            ws.messages.data() +
                            (base + static_cast<std::size_t>(slot)) * k_count * d;
                        const std::int64_t scale = table.slot_scale[static_cast<std::size_t>(slot)];
                        for (std::int64_t z = 0; z < zc; ++z) {
                            const double* msg =
                                slot_messages + static_cast<std::size_t>((z / scale) % k_count) * d;
                            double* acc = sums.data() + static_cast<std::size_t>(z) * d;
                            for (int c = 0; c < d; ++c) acc[c] += msg[c];
                        }
                    }
                    for (std::int64_t z = 0; z < zc; ++z) {
                        const double weight = post[static_cast<std::size_t>(z)];
                        if (weight == 0.0) continue;
                        const double* acc = sums.data() + static_cast<std::size_t>(z) * d;
                        double residual[4];
                        for (int c = 0; c < d; ++c) {
                            residual[c] = truth[c] - acc[c] / mass;
                            if (!std::isfinite(residual[c])) {
                                throw numeric_error(
                                    "m_step_theta: non-finite residual at sim " + std::to_string(s) +
                                    ", node " + std::to_string(i) + ", realization " +
                                    std::to_string(z) + ", step " + std::to_string(t));
                            }
                        }
                        // d(-Q)/d message = -w (truth - pred) / (sigma^2 m)
                        const double scale_factor = -weight / (sigma_sq * mass);
                        for (int slot = 0; slot < table.slot_count; ++slot) {
                            const int type = table.phi(z, slot);
                            double* dst = upstreams.data() +
                                          ((base + static_cast<std::size_t>(slot)) * k_count +
                                           type) * d;
                            for (int c = 0; c < d; ++c) dst[c] += scale_factor * residual[c];
                        }
                    }
                } else {
                    for (std::int64_t z = 0; z < zc; ++z) {
                        const double weight = post[static_cast<std::size_t>(z)];
                        if (weight == 0.0) continue;
                        const auto predicted = mp_prediction(state, dataset, ws, s, i, t, table, z);
                        std::vector<double> up(static_cast<std::size_t>(d));
                        std::vector<double> input(
                            static_cast<std::size_t>(state.bank.node_spec.input_width()), 0.0);
                        for (int slot = 0; slot < table.slot_count; ++slot) {
                            const double* msg = ws.messages.data() +
                                                ((base + static_cast<std::size_t>(slot)) * k_count +
                                                 table.phi(z, slot)) * msg_width;
                            for (int w = 0; w < msg_width; ++w) {
                                input[static_cast<std::size_t>(w)] += msg[w];
                            }
                        }
                        write_node_features(state.bank.layout, rec, t, i, input.data() + msg_width);
                        for (int c = 0; c < d; ++c) {
                            const double residual = truth[c] - predicted[static_cast<std::size_t>(c)];
                            if (!std::isfinite(residual)) {
                                throw numeric_error(
                                    "m_step_theta: non-finite residual at sim " + std::to_string(s) +
                                    ", node " + std::to_string(i) + ", realization " +
                                    std::to_string(z) + ", step " + std::to_string(t));
                            }
                            up[static_cast<std::size_t>(c)] = -weight * residual / sigma_sq;
                        }
                        const Eigen::Map<const Eigen::MatrixXd> in_col(
                            input.data(), static_cast<Eigen::Index>(input.size()), 1);
                        const Eigen::Map<const Eigen::MatrixXd> up_col(
                            up.data(), static_cast<Eigen::Index>(up.size()), 1);
                        Eigen::MatrixXd input_grad;
                        mlp_vjp_columns(state.bank.node_spec, state.bank.node_params, in_col,
                                        up_col, &node_grad, &input_grad);
                        for (int slot = 0; slot < table.slot_count; ++slot) {
                            const int type = table.phi(z, slot);
                            double* dst = upstreams.data() +
                                          ((base + static_cast<std::size_t>(slot)) * k_count +
                                           type) * msg_width;
                            for (int w = 0; w < msg_width; ++w) dst[w] += input_grad(w, 0);
                        }
                    }
                }
            }
        }
    }

    // rows that carry any selected step
    std::vector<std::size_t> selected;
    selected.reserve(ws.table.row_count());
    for (std::size_t r = 0; r < ws.table.row_count(); ++r) {
        if (step_selected(ws.table.rows[r].t)) selected.push_back(r);
    }

    gradients.edge.reserve(static_cast<std::size_t>(k_count));
    for (int k = 0; k < k_count; ++k) gradients.edge.push_back(zero_params(state.bank.edge_spec));
    accumulate_edge_gradients(state.bank, dataset, ws.table, upstreams, selected, gradients.edge,
                              chunk_rows);
    return gradients;
}

void m_step_theta_with(CriState& state, const TrajectoryDataset& dataset, const Workspace& ws,
                       const std::vector<int>& step_batch, int chunk_rows) {
    const ThetaGradients gradients =
        theta_loss_gradients(state, dataset, ws, step_batch, chunk_rows);
    for (int k = 0; k < state.bank.type_count(); ++k) {
        adam_step(state.bank.edge_params[static_cast<std::size_t>(k)],
                  gradients.edge[static_cast<std::size_t>(k)],
                  state.edge_adam[static_cast<std::size_t>(k)]);
    }
    if (state.bank.kind == DecoderKind::MessagePassing) {
        adam_step(state.bank.node_params, gradients.node, state.node_adam);
    }
}

std::vector<std::vector<std::int8_t>> types_from_posterior(
    const std::vector<std::vector<double>>& posterior, const InteractionGraph& graph,
    const std::vector<RealizationTable>& tables) {
    const int nodes = graph.node_count;
    const int sims = static_cast<int>(posterior.size()) / nodes;
    std::vector<std::vector<std::int8_t>> result(
        static_cast<std::size_t>(sims),
        std::vector<std::int8_t>(static_cast<std::size_t>(nodes) * nodes, -1));
    for (int s = 0; s < sims; ++s) {
        for (int i = 0; i < nodes; ++i) {
            const auto& post = posterior[static_cast<std::size_t>(s) * nodes + i];
            std::size_t best = 0;
            for (std::size_t z = 1; z < post.size(); ++z) {
                if (post[z] > post[best]) best = z;  // ties keep the lowest id
            }
            const auto& table = tables[static_cast<std::size_t>(i)];
            const auto& senders = graph.neighbors[static_cast<std::size_t>(i)];
            for (int slot = 0; slot < table.slot_count; ++slot) {
                result[static_cast<std::size_t>(s)]
                      [static_cast<std::size_t>(i) * nodes + senders[static_cast<std::size_t>(slot)]] =
                    static_cast<std::int8_t>(table.phi(static_cast<std::int64_t>(best), slot));
            }
        }
    }
    return result;
}

}  // namespace

CriState make_cri_state(EdgeModelBank bank, const InteractionGraph& graph, int simulations,
                        double learning_rate, std::int64_t realization_cap) {
    CriState state;
    state.bank = std::move(bank);
    state.graph = graph;
    state.realization_cap = realization_cap;
    const int k_count = state.bank.type_count();
    state.tau.assign(static_cast<std::size_t>(k_count), 1.0 / k_count);
    state.tables.reserve(static_cast<std::size_t>(graph.node_count));
    for (int i = 0; i < graph.node_count; ++i) {
        state.tables.push_back(enumerate_realizations(
            k_count, graph.neighbors[static_cast<std::size_t>(i)], realization_cap));
    }
    state.posterior.assign(static_cast<std::size_t>(simulations) * graph.node_count, {});
    state.log_likelihood.assign(state.posterior.size(), {});
    for (int k = 0; k < k_count; ++k) {
        state.edge_adam.emplace_back(state.bank.edge_spec.param_count(), learning_rate);
    }
    if (state.bank.kind == DecoderKind::MessagePassing) {
        state.node_adam = AdamState(state.bank.node_spec.param_count(), learning_rate);
    }
    return state;
}

void e_step(CriState& state, const TrajectoryDataset& dataset) {
    const Workspace ws = make_workspace(state, dataset);
    e_step_with(state, dataset, ws);
}

double q_function(const CriState& state) {
    std::map<int, std::vector<double>> prior_cache;
    const auto log_priors = cached_log_priors(state, prior_cache);
    const int nodes = state.graph.node_count;
    double q = 0.0;
    for (std::size_t row = 0; row < state.posterior.size(); ++row) {
        const auto& priors = *log_priors[row % static_cast<std::size_t>(nodes)];
        const auto& post = state.posterior[row];
        const auto& ll = state.log_likelihood[row];
        for (std::size_t z = 0; z < post.size(); ++z) {
            if (post[z] > 0.0) q += post[z] * (priors[z] + ll[z]);
        }
    }
    return q;
}

void m_step_priors(CriState& state) {
    const int k_count = state.type_count();
    const int nodes = state.graph.node_count;
    // expected per-type edge counts chi_{ik}, accumulated over all subgraphs
    std::map<int, std::vector<double>> counts_cache;  // degree -> z*K counts
    std::vector<double> chi(static_cast<std::size_t>(k_count), 0.0);
    for (std::size_t row = 0; row < state.posterior.size(); ++row) {
        const auto& table = state.tables[row % static_cast<std::size_t>(nodes)];
        auto it = counts_cache.find(table.slot_count);
        if (it == counts_cache.end()) {
            std::vector<double> counts(static_cast<std::size_t>(table.size()) * k_count, 0.0);
            for (std::int64_t z = 0; z < table.size(); ++z) {
                for (int slot = 0; slot < table.slot_count; ++slot) {
                    counts[static_cast<std::size_t>(z) * k_count + table.phi(z, slot)] += 1.0;
                }
            }
            it = counts_cache.emplace(table.slot_count, std::move(counts)).first;
        }
        const auto& counts = it->second;
        const auto& post = state.posterior[row];
        if (post.empty()) throw config_error("m_step_priors: run e_step first");
        for (std::size_t z = 0; z < post.size(); ++z) {
            if (post[z] == 0.0) continue;
            for (int k = 0; k < k_count; ++k) {
                chi[static_cast<std::size_t>(k)] += post[z] * counts[z * k_count + k];
            }
        }
    }
    double total = 0.0;
    for (double c : chi) total += c;
    if (total <= 0.0) {
        throw data_error("m_step_priors: no expected edge counts; dataset has no edges");
    }
    for (int k = 0; k < k_count; ++k) state.tau[static_cast<std::size_t>(k)] = chi[static_cast<std::size_t>(k)] / total;
}

void m_step_theta(CriState& state, const TrajectoryDataset& dataset,
                  const std::vector<int>& step_batch) {
    const Workspace ws = make_workspace(state, dataset);
    m_step_theta_with(state, dataset, ws, step_batch, 4096);
}

ThetaGradients q_theta_gradients(const CriState& state, const TrajectoryDataset& dataset,
                                 const std::vector<int>& step_batch) {
    const Workspace ws = make_workspace(state, dataset);
    ThetaGradients gradients = theta_loss_gradients(state, dataset, ws, step_batch, 4096);
    for (auto& grad : gradients.edge) {
        for (double& g : grad) g = -g;
    }
    for (double& g : gradients.node) g = -g;
    return gradients;
}

std::vector<std::vector<std::int8_t>> infer_edge_types(const CriState& state) {
    return types_from_posterior(state.posterior, state.graph, state.tables);
}

std::vector<std::vector<std::int8_t>> cri_infer_types(const EdgeModelBank& bank,
                                                      const std::vector<double>& tau,
                                                      const TrajectoryDataset& dataset,
                                                      std::int64_t realization_cap) {
    CriState state = make_cri_state(bank, InteractionGraph::all_pairs(dataset.particles,
                                                                      dataset.type_count),
                                    static_cast<int>(dataset.sims.size()), 0.0, realization_cap);
    state.tau = tau;
    e_step(state, dataset);
    return infer_edge_types(state);
}

double validation_mae_state(const EdgeModelBank& bank, const std::vector<double>& tau,
                            const TrajectoryDataset& dataset, std::int64_t realization_cap) {
    const auto types = cri_infer_types(bank, tau, dataset, realization_cap);
    if (dataset.contiguous_steps && dataset.steps() > 1) {
        return rollout_mae_state(bank, dataset, types, 1).value;
    }
    return mae_acceleration(bank, dataset, types);
}

TrainResult train_cri(const EdgeModelBank& initial_bank, const TrainControl& control,
                      const TrajectoryDataset& train, const TrajectoryDataset* validation) {
    if (train.neighbor_count > 0) {
        throw config_error("train_cri: dataset has an evolving topology; use train_evolving");
    }
    initial_bank.validate(train.dims);

    CriState state = make_cri_state(initial_bank,
                                    InteractionGraph::all_pairs(train.particles, train.type_count),
                                    static_cast<int>(train.sims.size()), control.learning_rate,
                                    control.realization_cap);

    TrainResult result;
    EdgeModelBank best_bank = state.bank;
    std::vector<double> best_tau = state.tau;
    double best_score = std::numeric_limits<double>::infinity();
    int epochs_since_best = 0;

    Workspace ws = make_workspace(state, train, control.chunk_rows);
    for (int epoch = 1; epoch <= control.epochs; ++epoch) {
        state.epoch = epoch;
        e_step_with(state, train, ws);

        HistoryRow row;
        row.epoch = epoch;
        row.marginal_log_likelihood = state.marginal_log_likelihood;
        row.q_value = q_function(state);

        m_step_priors(state);

        std::vector<int> batch;
        if (control.theta_batch_steps > 0 && control.theta_batch_steps < train.steps()) {
            Rng rng(derive_seed(control.seed, 0x4d53 ^ static_cast<std::uint64_t>(epoch)));
            std::vector<int> all(static_cast<std::size_t>(train.steps()));
            std::iota(all.begin(), all.end(), 0);
            for (int pick = 0; pick < control.theta_batch_steps; ++pick) {
                const int swap_with = pick + rng.uniform_int(train.steps() - pick);
                std::swap(all[static_cast<std::size_t>(pick)], all[static_cast<std::size_t>(swap_with)]);
            }
            batch.assign(all.begin(), all.begin() + control.theta_batch_steps);
            std::sort(batch.begin(), batch.end());
        }

        const double q_theta_before = theta_q_term(state, state.log_likelihood);
        const std::vector<ParamVector> params_before = state.bank.edge_params;
        const ParamVector node_before = state.bank.node_params;

        m_step_theta_with(state, train, ws, batch, control.chunk_rows);

        // generalized EM: shrink the step until the Theta term of Q does not
        // decrease, reverting after too many halvings
        Workspace ws_after = make_workspace(state, train, control.chunk_rows);
        if (control.ascent_guard) {
            double q_theta_after =
                theta_q_term(state, likelihood_tables(state, train, ws_after));
            int halvings = 0;
            while (q_theta_after < q_theta_before && halvings < control.ascent_max_halvings) {
                for (std::size_t k = 0; k < state.bank.edge_params.size(); ++k) {
                    auto& now = state.bank.edge_params[k];
                    const auto& old = params_before[k];
                    for (std::size_t p = 0; p < now.size(); ++p) {
                        now[p] = old[p] + 0.5 * (now[p] - old[p]);
                    }
                }
                for (std::size_t p = 0; p < state.bank.node_params.size(); ++p) {
                    state.bank.node_params[p] =
                        node_before[p] + 0.5 * (state.bank.node_params[p] - node_before[p]);
                }
                halvings += 1;
                ws_after = make_workspace(state, train, control.chunk_rows);
                q_theta_after = theta_q_term(state, likelihood_tables(state, train, ws_after));
            }
            if (q_theta_after < q_theta_before) {
                state.bank.edge_params = params_before;
                state.bank.node_params = node_before;
                ws_after = make_workspace(state, train, control.chunk_rows);
            }
        }
        ws = std::move(ws_after);

        const bool validate_now =
            validation != nullptr &&
            (epoch % control.validate_every == 0 || epoch == control.epochs);
        if (validate_now) {
            row.validation_mae_state = validation_mae_state(state.bank, state.tau, *validation,
                                                            control.realization_cap);
            if (row.validation_mae_state < best_score) {
                best_score = row.validation_mae_state;
                best_bank = state.bank;
                best_tau = state.tau;
                result.best_epoch = epoch;
                epochs_since_best = 0;
            } else {
                epochs_since_best += control.validate_every;
            }
        }

        const auto train_types = types_from_posterior(state.posterior, state.graph, state.tables);
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
        state.tau = best_tau;
        ws = make_workspace(state, train, control.chunk_rows);
    } else {
        result.best_epoch = state.epoch;
    }
    e_step_with(state, train, ws);
    result.bank = state.bank;
    result.tau = state.tau;
    result.edge_types = infer_edge_types(state);
    result.disagreement_rate = type_disagreement_rate(train, result.edge_types);
    return result;
}

}  // namespace cri
