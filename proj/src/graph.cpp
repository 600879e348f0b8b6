#include "cri/graph.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <set>
#include <string>

namespace cri {

void InteractionGraph::build_edge_index() {
    edges.clear();
    edge_index.assign(static_cast<std::size_t>(node_count) * node_count, -1);
    for (int i = 0; i < node_count; ++i) {
        for (int j : neighbors[i]) {
            if (j == i) throw config_error("InteractionGraph: self loop at node " + std::to_string(i));
            if (j < 0 || j >= node_count) {
                throw config_error("InteractionGraph: neighbor index out of range");
            }
            edge_index[static_cast<std::size_t>(i) * node_count + j] =
                static_cast<int>(edges.size());
            edges.emplace_back(i, j);
        }
    }
}

int InteractionGraph::edge_id(int receiver, int sender) const {
    return edge_index[static_cast<std::size_t>(receiver) * node_count + sender];
}

InteractionGraph InteractionGraph::all_pairs(int node_count, int type_count) {
    InteractionGraph g;
    g.node_count = node_count;
    g.type_count = type_count;
    g.neighbors.resize(node_count);
    for (int i = 0; i < node_count; ++i) {
        for (int j = 0; j < node_count; ++j) {
            if (j != i) g.neighbors[i].push_back(j);
        }
    }
    g.build_edge_index();
    return g;
}

InteractionGraph InteractionGraph::from_neighbors(int type_count,
                                                  std::vector<std::vector<int>> lists) {
    InteractionGraph g;
    g.node_count = static_cast<int>(lists.size());
    g.type_count = type_count;
    g.neighbors = std::move(lists);
    for (auto& list : g.neighbors) std::sort(list.begin(), list.end());
    g.build_edge_index();
    return g;
}

InteractionGraph InteractionGraph::from_step_neighbors(
    int type_count, std::vector<std::vector<std::vector<int>>> step_lists) {
    InteractionGraph g;
    g.type_count = type_count;
    if (step_lists.empty()) throw config_error("from_step_neighbors: no time steps");
    g.node_count = static_cast<int>(step_lists.front().size());
    std::vector<std::set<int>> merged(static_cast<std::size_t>(g.node_count));
    for (auto& step : step_lists) {
        if (static_cast<int>(step.size()) != g.node_count) {
            throw config_error("from_step_neighbors: inconsistent node count across steps");
        }
        for (int i = 0; i < g.node_count; ++i) {
            std::sort(step[i].begin(), step[i].end());
            merged[i].insert(step[i].begin(), step[i].end());
        }
    }
    g.neighbors.resize(g.node_count);
    for (int i = 0; i < g.node_count; ++i) {
        g.neighbors[i].assign(merged[i].begin(), merged[i].end());
    }
    g.step_neighbors = std::move(step_lists);
    g.build_edge_index();
    return g;
}

RealizationTable enumerate_realizations(int type_count, int neighbor_count, std::int64_t cap) {
    if (type_count < 1) throw config_error("enumerate_realizations: K must be >= 1");
    if (neighbor_count < 0) throw config_error("enumerate_realizations: negative neighbor count");

    RealizationTable table;
    table.type_count = type_count;
    table.slot_count = neighbor_count;
    table.total = 1;
    for (int s = 0; s < neighbor_count; ++s) {
        if (table.total > cap / type_count) {
            throw capacity_error(
                "enumerate_realizations: K^n = " + std::to_string(type_count) + "^" +
                std::to_string(neighbor_count) + " exceeds the cap of " + std::to_string(cap) +
                " realizations; consider the mean-field (Var-CRI) trainer");
        }
        table.total *= type_count;
    }
    table.slot_scale.resize(static_cast<std::size_t>(neighbor_count));
    std::int64_t scale = 1;
    for (int s = neighbor_count - 1; s >= 0; --s) {
        table.slot_scale[static_cast<std::size_t>(s)] = scale;
        scale *= type_count;
    }
    return table;
}

std::vector<int> RealizationTable::type_counts(std::int64_t realization) const {
    std::vector<int> counts(static_cast<std::size_t>(type_count), 0);
    for (int s = 0; s < slot_count; ++s) {
        counts[static_cast<std::size_t>(phi(realization, s))] += 1;
    }
    return counts;
}

void check_probability_vector(const std::vector<double>& p, const char* context) {
    double sum = 0.0;
    for (double v : p) {
        if (!(v >= 0.0)) {
            throw config_error(std::string(context) + ": negative or NaN probability entry");
        }
        sum += v;
    }
    if (std::abs(sum - 1.0) > 1e-9) {
        throw config_error(std::string(context) + ": probabilities sum to " +
                           std::to_string(sum) + ", expected 1");
    }
}

double prior_of_realization(const std::vector<double>& tau, const RealizationTable& table,
                            std::int64_t realization) {
    if (static_cast<int>(tau.size()) != table.type_count) {
        throw shape_error("prior_of_realization: tau length does not match K");
    }
    check_probability_vector(tau, "prior_of_realization");
    double prior = 1.0;
    for (int s = 0; s < table.slot_count; ++s) {
        prior *= tau[static_cast<std::size_t>(table.phi(realization, s))];
    }
    return prior;
}

std::vector<double> realization_log_priors(const std::vector<double>& tau,
                                           const RealizationTable& table) {
    if (static_cast<int>(tau.size()) != table.type_count) {
        throw shape_error("realization_log_priors: tau length does not match K");
    }
    std::vector<double> log_tau(tau.size());
    for (std::size_t k = 0; k < tau.size(); ++k) {
        log_tau[k] = tau[k] > 0.0 ? std::log(tau[k]) : -std::numeric_limits<double>::infinity();
    }
    std::vector<double> log_priors(static_cast<std::size_t>(table.size()), 0.0);
    for (std::int64_t z = 0; z < table.size(); ++z) {
        double acc = 0.0;
        for (int s = 0; s < table.slot_count; ++s) {
            acc += log_tau[static_cast<std::size_t>(table.phi(z, s))];
        }
        log_priors[static_cast<std::size_t>(z)] = acc;
    }
    return log_priors;
}

}  // namespace cri
