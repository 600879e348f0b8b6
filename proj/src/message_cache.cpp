#include "cri/message_cache.hpp"

#include <algorithm>

namespace cri {

namespace {

EdgeTable make_table_shell(const TrajectoryDataset& dataset, FeatureLayout layout) {
    EdgeTable table;
    table.sims = static_cast<int>(dataset.sims.size());
    table.steps = dataset.steps();
    table.nodes = dataset.particles;
    table.dims = dataset.dims;
    table.type_count = dataset.type_count;
    table.feature_width = edge_feature_width(layout, dataset.dims);
    return table;
}

}  // namespace

EdgeTable build_edge_table(const TrajectoryDataset& dataset, const InteractionGraph& graph,
                           FeatureLayout layout) {
    if (graph.node_count != dataset.particles) {
        throw data_error("build_edge_table: graph and dataset disagree on node count");
    }
    EdgeTable table = make_table_shell(dataset, layout);
    table.rows.reserve(static_cast<std::size_t>(table.sims) * table.steps * graph.edge_count());
    table.node_start.resize(static_cast<std::size_t>(table.sims) * table.steps * table.nodes);
    std::size_t cursor = 0;
    for (int s = 0; s < table.sims; ++s) {
        for (int t = 0; t < table.steps; ++t) {
            for (int i = 0; i < table.nodes; ++i) {
                table.node_start[(static_cast<std::size_t>(s) * table.steps + t) * table.nodes + i] =
                    cursor;
                for (int j : graph.neighbors[static_cast<std::size_t>(i)]) {
                    table.rows.push_back({s, t, i, j});
                    ++cursor;
                }
            }
        }
    }
    return table;
}

EdgeTable build_edge_table_evolving(const TrajectoryDataset& dataset, FeatureLayout layout) {
    if (dataset.neighbor_count <= 0) {
        throw data_error("build_edge_table_evolving: dataset has no per-step neighbor lists");
    }
    EdgeTable table = make_table_shell(dataset, layout);
    table.node_start.resize(static_cast<std::size_t>(table.sims) * table.steps * table.nodes);
    std::size_t cursor = 0;
    for (int s = 0; s < table.sims; ++s) {
        const SimulationRecord& rec = dataset.sims[static_cast<std::size_t>(s)];
        for (int t = 0; t < table.steps; ++t) {
            for (int i = 0; i < table.nodes; ++i) {
                table.node_start[(static_cast<std::size_t>(s) * table.steps + t) * table.nodes + i] =
                    cursor;
                for (int j : rec.step_neighbors(t, i)) {
                    table.rows.push_back({s, t, i, j});
                    ++cursor;
                }
            }
        }
    }
    return table;
}

std::vector<double> compute_messages(const EdgeModelBank& bank, const TrajectoryDataset& dataset,
                                     const EdgeTable& table, int chunk_rows) {
    const int out_width = bank.edge_spec.output_width();
    const int k_count = bank.type_count();
    std::vector<double> messages(table.row_count() * static_cast<std::size_t>(k_count) * out_width);

    Eigen::MatrixXd features(table.feature_width, chunk_rows);
    for (std::size_t begin = 0; begin < table.row_count(); begin += static_cast<std::size_t>(chunk_rows)) {
        const std::size_t end = std::min(table.row_count(), begin + static_cast<std::size_t>(chunk_rows));
        const Eigen::Index count = static_cast<Eigen::Index>(end - begin);
        for (std::size_t r = begin; r < end; ++r) {
            const EdgeRowRef& ref = table.rows[r];
            write_edge_features(bank.layout, dataset.sims[static_cast<std::size_t>(ref.sim)], ref.t,
                                ref.receiver, ref.sender,
                                features.col(static_cast<Eigen::Index>(r - begin)).data());
        }
        for (int k = 0; k < k_count; ++k) {
            const Eigen::MatrixXd out = mlp_forward_columns(
                bank.edge_spec, bank.edge_params[static_cast<std::size_t>(k)],
                features.leftCols(count));
            for (Eigen::Index c = 0; c < count; ++c) {
                double* dst = messages.data() +
                              ((begin + static_cast<std::size_t>(c)) * k_count + k) * out_width;
                for (int w = 0; w < out_width; ++w) dst[w] = out(w, c);
            }
        }
    }
    return messages;
}

void accumulate_edge_gradients(const EdgeModelBank& bank, const TrajectoryDataset& dataset,
                               const EdgeTable& table, const std::vector<double>& upstreams,
                               const std::vector<std::size_t>& selected,
                               std::vector<ParamVector>& gradients, int chunk_rows) {
    const int out_width = bank.edge_spec.output_width();
    const int k_count = bank.type_count();
    if (static_cast<int>(gradients.size()) != k_count) {
        throw shape_error("accumulate_edge_gradients: one gradient accumulator per network");
    }

    Eigen::MatrixXd features(table.feature_width, chunk_rows);
    Eigen::MatrixXd upstream(out_width, chunk_rows);
    for (std::size_t begin = 0; begin < selected.size(); begin += static_cast<std::size_t>(chunk_rows)) {
        const std::size_t end = std::min(selected.size(), begin + static_cast<std::size_t>(chunk_rows));
        const Eigen::Index count = static_cast<Eigen::Index>(end - begin);
        for (std::size_t r = begin; r < end; ++r) {
            const EdgeRowRef& ref = table.rows[selected[r]];
            write_edge_features(bank.layout, dataset.sims[static_cast<std::size_t>(ref.sim)], ref.t,
                                ref.receiver, ref.sender,
                                features.col(static_cast<Eigen::Index>(r - begin)).data());
        }
        for (int k = 0; k < k_count; ++k) {
            for (std::size_t r = begin; r < end; ++r) {
                const double* src =
                    upstreams.data() + (selected[r] * static_cast<std::size_t>(k_count) + k) * out_width;
                for (int w = 0; w < out_width; ++w) {
                    upstream(w, static_cast<Eigen::Index>(r - begin)) = src[w];
                }
            }
            mlp_vjp_columns(bank.edge_spec, bank.edge_params[static_cast<std::size_t>(k)],
                            features.leftCols(count), upstream.leftCols(count),
                            &gradients[static_cast<std::size_t>(k)], nullptr);
        }
    }
}

}  // namespace cri
