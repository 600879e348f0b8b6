#include "cri/evolving_cri.hpp"

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

Workspace make_workspace(const EvolvingState& state, const TrajectoryDataset& dataset,
                         int chunk_rows = 4096) {
    Workspace ws;
    ws.table = build_edge_table_evolving(dataset, state.bank.layout);
    ws.messages = compute_messages(state.bank, dataset, ws.table, chunk_rows);
    return ws;
}

InteractionGraph union_graph(const SimulationRecord& rec, int type_count) {
    std::vector<std::vector<std::vector<int>>> step_lists(
        static_cast<std::size_t>(rec.steps),
        std::vector<std::vector<int>>(static_cast<std::size_t>(rec.particles)));
    for (int t = 0; t < rec.steps; ++t) {
        for (int i = 0; i < rec.particles; ++i) {
            step_lists[static_cast<std::size_t>(t)][static_cast<std::size_t>(i)] =
                rec.step_neighbors(t, i);
        }
    }
    return InteractionGraph::from_step_neighbors(type_count, std::move(step_lists));
}

// Per-realization conditional log-likelihood of one (sim, node, step) from
// cached messages.
void step_log_likelihoods(const EvolvingState& state, const TrajectoryDataset& dataset,
                          const Workspace& ws, int sim, int node, int t,
                          const RealizationTable& table, std::vector<double>& loglik,
                          std::vector<double>* sums_out = nullptr) {
    const int d = dataset.dims;
    const int k_count = state.type_count();
    const SimulationRecord& rec = dataset.sims[static_cast<std::size_t>(sim)];
    const double sigma_sq = state.bank.sigma_sq;
    const double constant = gaussian_constant(d, sigma_sq);
    const std::int64_t zc = table.size();
    const std::size_t base = ws.table.node_row_start(sim, t, node);
    const double* truth =
        rec.increments.data() + (static_cast<std::size_t>(t) * rec.particles + node) * d;
    loglik.assign(static_cast<std::size_t>(zc), 0.0);

    if (state.bank.kind == DecoderKind::PhysicsInduced) {
        const double mass = rec.masses[static_cast<std::size_t>(node)];
        static thread_local std::vector<double> sums;
        std::vector<double>& acc = sums_out != nullptr ? *sums_out : sums;
        acc.assign(static_cast<std::size_t>(zc) * d, 0.0);
        for (int slot = 0; slot < table.slot_count; ++slot) {
            const double* slot_messages =
                ws.messages.data() + (base + static_cast<std::size_t>(slot)) * k_count * d;
            const std::int64_t scale = table.slot_scale[static_cast<std::size_t>(slot)];
            for (std::int64_t z = 0; z < zc; ++z) {
                const double* msg =
                    slot_messages + static_cast<std::size_t>((z / scale) % k_count) * d;
                double* dst = acc.data() + static_cast<std::size_t>(z) * d;
                for (int c = 0; c < d; ++c) dst[c] += msg[c];
            }
        }
        for (std::int64_t z = 0; z < zc; ++z) {
            const double* dst = acc.data() + static_cast<std::size_t>(z) * d;
            double squared = 0.0;
            for (int c = 0; c < d; ++c) {
                const double diff = truth[c] - dst[c] / mass;
                squared += diff * diff;
            }
            loglik[static_cast<std::size_t>(z)] = -squared / (2.0 * sigma_sq) + constant;
        }
    } else {
        const int msg_width = state.bank.edge_spec.output_width();
        for (std::int64_t z = 0; z < zc; ++z) {
            std::vector<double> input(
                static_cast<std::size_t>(state.bank.node_spec.input_width()), 0.0);
            for (int slot = 0; slot < table.slot_count; ++slot) {
                const double* msg = ws.messages.data() +
                                    ((base + static_cast<std::size_t>(slot)) * k_count +
                                     table.phi(z, slot)) * msg_width;
                for (int w = 0; w < msg_width; ++w) input[static_cast<std::size_t>(w)] += msg[w];
            }
            write_node_features(state.bank.layout, rec, t, node, input.data() + msg_width);
            const auto predicted = mlp_forward(state.bank.node_spec, state.bank.node_params, input);
            double squared = 0.0;
            for (int c = 0; c < d; ++c) {
                const double diff = truth[c] - predicted[static_cast<std::size_t>(c)];
                squared += diff * diff;
            }
            loglik[static_cast<std::size_t>(z)] = -squared / (2.0 * sigma_sq) + constant;
        }
    }
}

double induction_step_with(EvolvingState& state, const TrajectoryDataset& dataset,
                           const Workspace& ws, int sim, int t) {
    const int k_count = state.type_count();
    const SimulationRecord& rec = dataset.sims[static_cast<std::size_t>(sim)];
    const InteractionGraph& graph = state.graphs[static_cast<std::size_t>(sim)];
    auto& marginals = state.marginals[static_cast<std::size_t>(sim)];
    double log_normalizer_sum = 0.0;

    std::vector<double> loglik;
    std::vector<double> weights;
    std::vector<double> accum;
    for (int i = 0; i < rec.particles; ++i) {
        const std::vector<int> active = rec.step_neighbors(t, i);
        if (active.empty()) continue;
        const RealizationTable table = enumerate_realizations(
            k_count, static_cast<int>(active.size()), state.realization_cap);
        const std::int64_t zc = table.size();
        step_log_likelihoods(state, dataset, ws, sim, i, t, table, loglik);

        double max_ll = -std::numeric_limits<double>::infinity();
        for (double ll : loglik) max_ll = std::max(max_ll, ll);
        if (!std::isfinite(max_ll)) {
            throw numeric_error("posterior_induction_step: likelihood collapsed for node " +
                                std::to_string(i) + " at step " + std::to_string(t));
        }

        // w(z) = prod_slot p_prev(slot, z_slot) * exp(l(z) - max); the prior
        // product stays in linear space so an uninformative likelihood leaves
        // the marginals bit-for-bit unchanged
        weights.assign(static_cast<std::size_t>(zc), 0.0);
        std::vector<const double*> prev(active.size());
        for (std::size_t s = 0; s < active.size(); ++s) {
            prev[s] = marginals.data() +
                      static_cast<std::size_t>(graph.edge_id(i, active[s])) * k_count;
        }
        for (std::int64_t z = 0; z < zc; ++z) {
            double w = std::exp(loglik[static_cast<std::size_t>(z)] - max_ll);
            for (int slot = 0; slot < table.slot_count; ++slot) {
                w *= prev[static_cast<std::size_t>(slot)][table.phi(z, slot)];
            }
            weights[static_cast<std::size_t>(z)] = w;
        }

        double total_weight = 0.0;
        for (double w : weights) total_weight += w;
        if (!(total_weight > 0.0)) {
            // saturated marginals can push every linear-space weight below
            // the double range; redo the step with jointly shifted logs
            double max_lw = -std::numeric_limits<double>::infinity();
            std::vector<double> log_weights(static_cast<std::size_t>(zc));
            for (std::int64_t z = 0; z < zc; ++z) {
                double lw = loglik[static_cast<std::size_t>(z)];
                for (int slot = 0; slot < table.slot_count; ++slot) {
                    const double p = prev[static_cast<std::size_t>(slot)][table.phi(z, slot)];
                    lw += p > 0.0 ? std::log(p) : -std::numeric_limits<double>::infinity();
                }
                log_weights[static_cast<std::size_t>(z)] = lw;
                max_lw = std::max(max_lw, lw);
            }
            if (!std::isfinite(max_lw)) {
                throw numeric_error("posterior_induction_step: zero posterior mass for node " +
                                    std::to_string(i) + " at step " + std::to_string(t));
            }
            for (std::int64_t z = 0; z < zc; ++z) {
                weights[static_cast<std::size_t>(z)] =
                    std::exp(log_weights[static_cast<std::size_t>(z)] - max_lw);
                total_weight += weights[static_cast<std::size_t>(z)];
            }
            log_normalizer_sum += std::log(total_weight) + max_lw;
        } else {
            log_normalizer_sum += std::log(total_weight) + max_ll;
        }

        accum.assign(active.size() * static_cast<std::size_t>(k_count), 0.0);
        for (std::int64_t z = 0; z < zc; ++z) {
            const double w = weights[static_cast<std::size_t>(z)];
            if (w == 0.0) continue;
            for (int slot = 0; slot < table.slot_count; ++slot) {
                accum[static_cast<std::size_t>(slot) * k_count + table.phi(z, slot)] += w;
            }
        }
        for (std::size_t s = 0; s < active.size(); ++s) {
            double slot_total = 0.0;
            for (int k = 0; k < k_count; ++k) slot_total += accum[s * k_count + k];
            double* dst = marginals.data() +
                          static_cast<std::size_t>(graph.edge_id(i, active[s])) * k_count;
            for (int k = 0; k < k_count; ++k) dst[k] = accum[s * k_count + k] / slot_total;
        }
    }
    return log_normalizer_sum;
}

void e_pass_with(EvolvingState& state, const TrajectoryDataset& dataset, const Workspace& ws) {
    reset_marginals(state);
    double filter_ll = 0.0;
    for (std::size_t s = 0; s < dataset.sims.size(); ++s) {
        for (int t = 0; t < dataset.sims[s].steps; ++t) {
            filter_ll += induction_step_with(state, dataset, ws, static_cast<int>(s), t);
        }
    }
    state.filter_log_likelihood = filter_ll;
}

double q_theta_term(const EvolvingState& state, const TrajectoryDataset& dataset,
                    const Workspace& ws) {
    const int k_count = state.type_count();
    double q = 0.0;
    std::vector<double> loglik;
    for (std::size_t s = 0; s < dataset.sims.size(); ++s) {
        const SimulationRecord& rec = dataset.sims[s];
        const InteractionGraph& graph = state.graphs[s];
        const auto& marginals = state.marginals[s];
        for (int t = 0; t < rec.steps; ++t) {
            for (int i = 0; i < rec.particles; ++i) {
                const std::vector<int> active = rec.step_neighbors(t, i);
                if (active.empty()) continue;
                const RealizationTable table = enumerate_realizations(
                    k_count, static_cast<int>(active.size()), state.realization_cap);
                step_log_likelihoods(state, dataset, ws, static_cast<int>(s), i, t, table, loglik);
                std::vector<const double*> stars(active.size());
                for (std::size_t slot = 0; slot < active.size(); ++slot) {
                    stars[slot] = marginals.data() +
                                  static_cast<std::size_t>(graph.edge_id(i, active[slot])) * k_count;
                }
                for (std::int64_t z = 0; z < table.size(); ++z) {
                    double w = 1.0;
                    for (int slot = 0; slot < table.slot_count; ++slot) {
                        w *= stars[static_cast<std::size_t>(slot)][table.phi(z, slot)];
                    }
                    if (w > 0.0) q += w * loglik[static_cast<std::size_t>(z)];
                }
            }
        }
    }
    return q;
}

}  // namespace

EvolvingState make_evolving_state(EdgeModelBank bank, const TrajectoryDataset& dataset,
                                  double learning_rate, std::int64_t realization_cap) {
    if (dataset.neighbor_count <= 0) {
        throw config_error("evolving-cri: dataset carries no per-step neighbor lists");
    }
    EvolvingState state;
    state.bank = std::move(bank);
    state.realization_cap = realization_cap;
    const int k_count = state.bank.type_count();
    state.tau.assign(static_cast<std::size_t>(k_count), 1.0 / k_count);
    for (const SimulationRecord& rec : dataset.sims) {
        state.graphs.push_back(union_graph(rec, k_count));
        state.marginals.emplace_back(
            static_cast<std::size_t>(state.graphs.back().edge_count()) * k_count, 1.0 / k_count);
    }
    for (int k = 0; k < k_count; ++k) {
        state.edge_adam.emplace_back(state.bank.edge_spec.param_count(), learning_rate);
    }
    if (state.bank.kind == DecoderKind::MessagePassing) {
        state.node_adam = AdamState(state.bank.node_spec.param_count(), learning_rate);
    }
    return state;
}

void reset_marginals(EvolvingState& state) {
    const int k_count = state.type_count();
    for (std::size_t s = 0; s < state.marginals.size(); ++s) {
        auto& marginals = state.marginals[s];
        for (std::size_t e = 0; e < marginals.size() / k_count; ++e) {
            for (int k = 0; k < k_count; ++k) {
                marginals[e * k_count + k] = state.tau[static_cast<std::size_t>(k)];
            }
        }
    }
}

double posterior_induction_step(EvolvingState& state, const TrajectoryDataset& dataset, int sim,
                                int t) {
    const Workspace ws = make_workspace(state, dataset);
    return induction_step_with(state, dataset, ws, sim, t);
}

void evolving_e_pass(EvolvingState& state, const TrajectoryDataset& dataset) {
    const Workspace ws = make_workspace(state, dataset);
    e_pass_with(state, dataset, ws);
}

double q_evolving(const EvolvingState& state, const TrajectoryDataset& dataset) {
    const int k_count = state.type_count();
    double prior_term = 0.0;
    for (std::size_t s = 0; s < state.marginals.size(); ++s) {
        const auto& marginals = state.marginals[s];
        for (std::size_t e = 0; e < marginals.size() / k_count; ++e) {
            for (int k = 0; k < k_count; ++k) {
                const double p = marginals[e * k_count + k];
                if (p > 0.0) {
                    const double tau_k = state.tau[static_cast<std::size_t>(k)];
                    prior_term += p * (tau_k > 0.0 ? std::log(tau_k)
                                                   : -std::numeric_limits<double>::infinity());
                }
            }
        }
    }
    const Workspace ws = make_workspace(state, dataset);
    return prior_term + q_theta_term(state, dataset, ws);
}

void evolving_m_step_priors(EvolvingState& state) {
    const int k_count = state.type_count();
    std::vector<double> expected(static_cast<std::size_t>(k_count), 0.0);
    double total = 0.0;
    for (const auto& marginals : state.marginals) {
        for (std::size_t e = 0; e < marginals.size() / k_count; ++e) {
            for (int k = 0; k < k_count; ++k) {
                expected[static_cast<std::size_t>(k)] += marginals[e * k_count + k];
                total += marginals[e * k_count + k];
            }
        }
    }
    if (total <= 0.0) throw data_error("evolving_m_step_priors: no edges ever active");
    for (int k = 0; k < k_count; ++k) {
        state.tau[static_cast<std::size_t>(k)] = expected[static_cast<std::size_t>(k)] / total;
    }
}

void evolving_m_step_theta(EvolvingState& state, const TrajectoryDataset& dataset,
                           const std::vector<int>& step_batch) {
    const Workspace ws = make_workspace(state, dataset);
    const int d = dataset.dims;
    const int k_count = state.type_count();
    const double sigma_sq = state.bank.sigma_sq;
    const bool physics = state.bank.kind == DecoderKind::PhysicsInduced;
    const int msg_width = state.bank.edge_spec.output_width();

    std::vector<std::uint8_t> in_batch;
    if (!step_batch.empty()) {
        in_batch.assign(static_cast<std::size_t>(dataset.steps()), 0);
        for (int t : step_batch) in_batch[static_cast<std::size_t>(t)] = 1;
    }
    const auto step_selected = [&](int t) {
        return in_batch.empty() || in_batch[static_cast<std::size_t>(t)] != 0;
    };

    std::vector<double> upstreams(ws.messages.size(), 0.0);
    ParamVector node_grad;
    if (!physics) node_grad = zero_params(state.bank.node_spec);

    std::vector<double> loglik;
    std::vector<double> sums;
    for (std::size_t s = 0; s < dataset.sims.size(); ++s) {
        const SimulationRecord& rec = dataset.sims[s];
        const InteractionGraph& graph = state.graphs[s];
        const auto& marginals = state.marginals[s];
        for (int t = 0; t < rec.steps; ++t) {
            if (!step_selected(t)) continue;
            for (int i = 0; i < rec.particles; ++i) {
                const std::vector<int> active = rec.step_neighbors(t, i);
                if (active.empty()) continue;
                const RealizationTable table = enumerate_realizations(
                    k_count, static_cast<int>(active.size()), state.realization_cap);
                const std::int64_t zc = table.size();
                const std::size_t base = ws.table.node_row_start(static_cast<int>(s), t, i);
                const double* truth =
                    rec.increments.data() + (static_cast<std::size_t>(t) * rec.particles + i) * d;
                const double mass = rec.masses[static_cast<std::size_t>(i)];
                std::vector<const double*> stars(active.size());
                for (std::size_t slot = 0; slot < active.size(); ++slot) {
                    stars[slot] = marginals.data() +
                                  static_cast<std::size_t>(graph.edge_id(i, active[slot])) * k_count;
                }
                if (physics) {
                    step_log_likelihoods(state, dataset, ws, static_cast<int>(s), i, t, table,
                                         loglik, &sums);
                    for (std::int64_t z = 0; z < zc; ++z) {
                        double weight = 1.0;
                        for (int slot = 0; slot < table.slot_count; ++slot) {
                            weight *= stars[static_cast<std::size_t>(slot)][table.phi(z, slot)];
                        }
                        if (weight == 0.0) continue;
                        const double* acc = sums.data() + static_cast<std::size_t>(z) * d;
                        double residual[4];
                        for (int c = 0; c < d; ++c) {
                            residual[c] = truth[c] - acc[c] / mass;
                            if (!std::isfinite(residual[c])) {
                                throw numeric_error(
                                    "evolving_m_step_theta: non-finite residual at sim " +
                                    std::to_string(s) + ", node " + std::to_string(i) +
                                    ", realization " + std::to_string(z) + ", step " +
                                    std::to_string(t));
                            }
                        }
                        const double scale_factor = -weight / (sigma_sq * mass);
                        for (int slot = 0; slot < table.slot_count; ++slot) {
                            double* dst = upstreams.data() +
                                          ((base + static_cast<std::size_t>(slot)) * k_count +
                                           table.phi(z, slot)) * d;
                            for (int c = 0; c < d; ++c) dst[c] += scale_factor * residual[c];
                        }
                    }
                } else {
                    for (std::int64_t z = 0; z < zc; ++z) {
                        double weight = 1.0;
                        for (int slot = 0; slot < table.slot_count; ++slot) {
                            weight *= stars[static_cast<std::size_t>(slot)][table.phi(z, slot)];
                        }
                        if (weight == 0.0) continue;
                        std::vector<double> input(
                            static_cast<std::size_t>(state.bank.node_spec.input_width()), 0.0);
                        for (int slot = 0; slot < table.slot_count; ++slot) {
                            const double* msg =
                                ws.messages.data() +
                                ((base + static_cast<std::size_t>(slot)) * k_count +
                                 table.phi(z, slot)) * msg_width;
                            for (int w = 0; w < msg_width; ++w) {
                                input[static_cast<std::size_t>(w)] += msg[w];
                            }
                        }
                        write_node_features(state.bank.layout, rec, t, i, input.data() + msg_width);
                        const auto predicted =
                            mlp_forward(state.bank.node_spec, state.bank.node_params, input);
                        std::vector<double> up(static_cast<std::size_t>(d));
                        for (int c = 0; c < d; ++c) {
                            const double residual = truth[c] - predicted[static_cast<std::size_t>(c)];
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
                            double* dst = upstreams.data() +
                                          ((base + static_cast<std::size_t>(slot)) * k_count +
                                           table.phi(z, slot)) * msg_width;
                            for (int w = 0; w < msg_width; ++w) dst[w] += input_grad(w, 0);
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
    if (!physics) adam_step(state.bank.node_params, node_grad, state.node_adam);
}

std::vector<std::vector<std::int8_t>> evolving_infer_types(const EvolvingState& state) {
    const int k_count = state.type_count();
    int prior_type = 0;
    for (int k = 1; k < k_count; ++k) {
        if (state.tau[static_cast<std::size_t>(k)] > state.tau[static_cast<std::size_t>(prior_type)]) {
            prior_type = k;
        }
    }
    std::vector<std::vector<std::int8_t>> result;
    for (std::size_t s = 0; s < state.marginals.size(); ++s) {
        const InteractionGraph& graph = state.graphs[s];
        const int n = graph.node_count;
        std::vector<std::int8_t> types(static_cast<std::size_t>(n) * n,
                                       static_cast<std::int8_t>(prior_type));
        for (int i = 0; i < n; ++i) types[static_cast<std::size_t>(i) * n + i] = -1;
        for (const auto& [i, j] : graph.edge_list()) {
            const double* p = state.marginals[s].data() +
                              static_cast<std::size_t>(graph.edge_id(i, j)) * k_count;
            int best = 0;
            for (int k = 1; k < k_count; ++k) {
                if (p[k] > p[best]) best = k;
            }
            types[static_cast<std::size_t>(i) * n + j] = static_cast<std::int8_t>(best);
        }
        result.push_back(std::move(types));
    }
    return result;
}

TrainResult train_evolving(const EdgeModelBank& initial_bank, const TrainControl& control,
                           const TrajectoryDataset& train, const TrajectoryDataset* validation) {
    initial_bank.validate(train.dims);
    EvolvingState state =
        make_evolving_state(initial_bank, train, control.learning_rate, control.realization_cap);

    TrainResult result;
    EdgeModelBank best_bank = state.bank;
    std::vector<double> best_tau = state.tau;
    double best_score = std::numeric_limits<double>::infinity();
    int epochs_since_best = 0;

    for (int epoch = 1; epoch <= control.epochs; ++epoch) {
        state.epoch = epoch;
        Workspace ws = make_workspace(state, train, control.chunk_rows);
        e_pass_with(state, train, ws);

        HistoryRow row;
        row.epoch = epoch;
        row.marginal_log_likelihood = state.filter_log_likelihood;
        const double prior_q = [&] {
            double q = 0.0;
            const int k_count = state.type_count();
            for (const auto& marginals : state.marginals) {
                for (std::size_t e = 0; e < marginals.size() / k_count; ++e) {
                    for (int k = 0; k < k_count; ++k) {
                        const double p = marginals[e * static_cast<std::size_t>(k_count) + k];
                        const double tau_k = state.tau[static_cast<std::size_t>(k)];
                        if (p > 0.0 && tau_k > 0.0) q += p * std::log(tau_k);
                    }
                }
            }
            return q;
        }();
        const double q_theta_before = q_theta_term(state, train, ws);
        row.q_value = prior_q + q_theta_before;

        evolving_m_step_priors(state);

        std::vector<int> batch;
        if (control.theta_batch_steps > 0 && control.theta_batch_steps < train.steps()) {
            Rng rng(derive_seed(control.seed, 0x6576 ^ static_cast<std::uint64_t>(epoch)));
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
        const ParamVector node_before = state.bank.node_params;

        evolving_m_step_theta(state, train, batch);

        if (control.ascent_guard) {
            Workspace ws_after = make_workspace(state, train, control.chunk_rows);
            double q_theta_after = q_theta_term(state, train, ws_after);
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
                q_theta_after = q_theta_term(state, train, ws_after);
            }
            if (q_theta_after < q_theta_before) {
                state.bank.edge_params = params_before;
                state.bank.node_params = node_before;
            }
        }

        const bool validate_now =
            validation != nullptr &&
            (epoch % control.validate_every == 0 || epoch == control.epochs);
        if (validate_now) {
            const auto types = evolving_infer_types(state);
            row.validation_mae_state =
                validation->contiguous_steps && validation->steps() > 1
                    ? rollout_mae_state(state.bank, *validation, types, 1).value
                    : mae_acceleration(state.bank, *validation, types);
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

        const auto train_types = evolving_infer_types(state);
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
    } else {
        result.best_epoch = state.epoch;
    }
    evolving_e_pass(state, train);
    result.bank = state.bank;
    result.tau = state.tau;
    result.edge_types = evolving_infer_types(state);
    result.disagreement_rate = type_disagreement_rate(train, result.edge_types);
    return result;
}

}  // namespace cri
