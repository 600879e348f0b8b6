#pragma once

#include <cstdint>
#include <vector>

#include "cri/decoder.hpp"
#include "cri/graph.hpp"
#include "cri/sim.hpp"

namespace cri {

// Flattened enumeration of every (simulation, stored step, incoming edge)
// triple of a dataset, in (sim, t, receiver, ascending sender) order so that
// the rows of one subgraph at one step are contiguous. The trainers batch
// all edge-network evaluations through this table.
struct EdgeRowRef {
    int sim;
    int t;
    int receiver;
    int sender;
};

struct EdgeTable {
    int sims = 0;
    int steps = 0;
    int nodes = 0;
    int dims = 2;
    int type_count = 1;
    int feature_width = 0;
    std::vector<EdgeRowRef> rows;
    std::vector<std::size_t> node_start;  // (sim*steps + t)*nodes + node -> first row

    std::size_t row_count() const { return rows.size(); }
    std::size_t node_row_start(int sim, int t, int node) const {
        return node_start[(static_cast<std::size_t>(sim) * steps + t) * nodes + node];
    }
    int node_degree(int sim, int t, int node) const {
        const std::size_t idx = (static_cast<std::size_t>(sim) * steps + t) * nodes + node;
        const std::size_t next = idx + 1 < node_start.size() ? node_start[idx + 1] : rows.size();
        return static_cast<int>(next - node_start[idx]);
    }
};

// Static topology: every simulation shares the graph's neighbor lists at
// every step.
EdgeTable build_edge_table(const TrajectoryDataset& dataset, const InteractionGraph& graph,
                           FeatureLayout layout);

// Evolving topology: per-step lists from the recorded nearest neighbors.
EdgeTable build_edge_table_evolving(const TrajectoryDataset& dataset, FeatureLayout layout);

// All K typed messages for every edge row, laid out row-major as
// messages[(row * K + type) * out_width + component].
std::vector<double> compute_messages(const EdgeModelBank& bank, const TrajectoryDataset& dataset,
                                     const EdgeTable& table, int chunk_rows = 4096);

// Accumulates the edge-network parameter gradients for the given rows.
// `upstreams` shares the message layout; rows outside `selected` are ignored.
void accumulate_edge_gradients(const EdgeModelBank& bank, const TrajectoryDataset& dataset,
                               const EdgeTable& table, const std::vector<double>& upstreams,
                               const std::vector<std::size_t>& selected,
                               std::vector<ParamVector>& gradients, int chunk_rows = 4096);

}  // namespace cri
