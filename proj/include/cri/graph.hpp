#pragma once

#include <cstdint>
#include <utility>
#include <vector>

#include "cri/errors.hpp"

namespace cri {

// Directed interaction graph. Edge e(i,j) means "j acts on i"; neighbor
// lists hold, for each receiver i, the senders j in ascending index order.
// For evolving topologies the per-step lists are the active edges and
// `neighbors` is their union across time.
struct InteractionGraph {
    int node_count = 0;
    int type_count = 1;
    std::vector<std::vector<int>> neighbors;
    std::vector<std::vector<std::vector<int>>> step_neighbors;  // [t][i], optional

    bool evolving() const { return !step_neighbors.empty(); }
    int edge_count() const { return static_cast<int>(edges.size()); }

    // Dense ids follow receiver-major order: all edges of node 0 first, each
    // receiver's senders ascending. -1 when the edge does not exist.
    int edge_id(int receiver, int sender) const;
    const std::vector<std::pair<int, int>>& edge_list() const { return edges; }

    static InteractionGraph all_pairs(int node_count, int type_count);
    static InteractionGraph from_neighbors(int type_count,
                                           std::vector<std::vector<int>> lists);
    static InteractionGraph from_step_neighbors(
        int type_count, std::vector<std::vector<std::vector<int>>> step_lists);

private:
    std::vector<std::pair<int, int>> edges;  // id -> (receiver, sender)
    std::vector<int> edge_index;             // node_count * node_count, -1 absent
    void build_edge_index();
};

inline constexpr std::int64_t default_realization_cap = std::int64_t{1} << 20;

// All joint type assignments of one subgraph's incoming edges. A realization
// id z in [0, K^n) is read as an n-digit base-K number whose most significant
// digit is slot 0, the lowest-index neighbor.
struct RealizationTable {
    int type_count = 1;
    int slot_count = 0;

    std::int64_t size() const { return total; }

    int phi(std::int64_t realization, int slot) const {
        return static_cast<int>((realization / slot_scale[slot]) % type_count);
    }

    // C_z(k): how many slots carry each type under realization z.
    std::vector<int> type_counts(std::int64_t realization) const;

    std::vector<std::int64_t> slot_scale;  // K^(n-1-slot)
    std::int64_t total = 1;
};

RealizationTable enumerate_realizations(int type_count, int neighbor_count,
                                        std::int64_t cap = default_realization_cap);

inline RealizationTable enumerate_realizations(int type_count,
                                               const std::vector<int>& neighbor_list,
                                               std::int64_t cap = default_realization_cap) {
    return enumerate_realizations(type_count, static_cast<int>(neighbor_list.size()), cap);
}

// pi_z = prod_k tau_k^{C_z(k)}. `tau` must be a probability vector.
double prior_of_realization(const std::vector<double>& tau, const RealizationTable& table,
                            std::int64_t realization);

// log pi_z for every realization, tolerating tau entries equal to zero.
std::vector<double> realization_log_priors(const std::vector<double>& tau,
                                           const RealizationTable& table);

void check_probability_vector(const std::vector<double>& p, const char* context);

}  // namespace cri
