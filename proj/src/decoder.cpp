#include "cri/decoder.hpp"

#include <cmath>
#include <numbers>
#include <string>

namespace cri {

std::string to_string(DecoderKind kind) {
    return kind == DecoderKind::MessagePassing ? "message-passing" : "physics-induced";
}

DecoderKind decoder_kind_from_string(const std::string& name) {
    if (name == "message-passing" || name == "gnn") return DecoderKind::MessagePassing;
    if (name == "physics-induced" || name == "pignpi") return DecoderKind::PhysicsInduced;
    throw config_error("unknown decoder kind '" + name + "'");
}

std::string to_string(FeatureLayout layout) {
    switch (layout) {
        case FeatureLayout::ParticleWithMass: return "particle-with-mass";
        case FeatureLayout::ParticleNoMass: return "particle-no-mass";
        case FeatureLayout::Scalar: return "scalar";
    }
    return "unknown";
}

FeatureLayout feature_layout_from_string(const std::string& name) {
    if (name == "particle-with-mass") return FeatureLayout::ParticleWithMass;
    if (name == "particle-no-mass") return FeatureLayout::ParticleNoMass;
    if (name == "scalar") return FeatureLayout::Scalar;
    throw config_error("unknown feature layout '" + name + "'");
}

int node_feature_width(FeatureLayout layout, int dims) {
    switch (layout) {
        case FeatureLayout::ParticleWithMass: return 2 * dims + 1;
        case FeatureLayout::ParticleNoMass: return 2 * dims;
        case FeatureLayout::Scalar: return 1;
    }
    throw config_error("unknown feature layout");
}

FeatureLayout default_feature_layout(SystemKind kind) {
    switch (kind) {
        case SystemKind::Crystallization: return FeatureLayout::ParticleNoMass;
        case SystemKind::Var: return FeatureLayout::Scalar;
        default: return FeatureLayout::ParticleWithMass;
    }
}

void write_node_features(FeatureLayout layout, const SimulationRecord& rec, int t, int node,
                         double* out) {
    const int d = rec.dims;
    switch (layout) {
        case FeatureLayout::ParticleWithMass:
            for (int c = 0; c < d; ++c) out[c] = rec.pos(t, node, c);
            for (int c = 0; c < d; ++c) out[d + c] = rec.vel(t, node, c);
            out[2 * d] = rec.masses[static_cast<std::size_t>(node)];
            break;
        case FeatureLayout::ParticleNoMass:
            for (int c = 0; c < d; ++c) out[c] = rec.pos(t, node, c);
            for (int c = 0; c < d; ++c) out[d + c] = rec.vel(t, node, c);
            break;
        case FeatureLayout::Scalar:
            out[0] = rec.pos(t, node, 0);
            break;
    }
}

void write_edge_features(FeatureLayout layout, const SimulationRecord& rec, int t, int receiver,
                         int sender, double* out) {
    const int node_width = node_feature_width(layout, rec.dims);
    write_node_features(layout, rec, t, receiver, out);
    write_node_features(layout, rec, t, sender, out + node_width);
}

void EdgeModelBank::validate(int dims) const {
    edge_spec.validate();
    if (edge_params.empty()) throw config_error("bank: no edge networks");
    for (const auto& p : edge_params) {
        if (p.size() != edge_spec.param_count()) {
            throw config_error("bank: edge parameter vector does not match the shared spec");
        }
    }
    if (edge_spec.input_width() != edge_feature_width(layout, dims)) {
        throw config_error("bank: edge input width " + std::to_string(edge_spec.input_width()) +
                           " does not match the feature layout width " +
                           std::to_string(edge_feature_width(layout, dims)));
    }
    if (sigma_sq <= 0) throw config_error("bank: sigma^2 must be positive");
    if (kind == DecoderKind::PhysicsInduced) {
        if (edge_spec.output_width() != dims) {
            throw config_error("bank: physics-induced edge networks must output d values");
        }
        if (!node_params.empty()) {
            throw config_error("bank: physics-induced decoder carries no node network");
        }
    } else {
        if (node_params.empty()) {
            throw config_error("bank: message-passing decoder needs a node network");
        }
        node_spec.validate();
        if (node_params.size() != node_spec.param_count()) {
            throw config_error("bank: node parameter vector does not match its spec");
        }
        const int expected = edge_spec.output_width() + node_feature_width(layout, dims);
        if (node_spec.input_width() != expected) {
            throw config_error("bank: node network input width must be " + std::to_string(expected));
        }
        if (node_spec.output_width() != dims) {
            throw config_error("bank: node network must output d values");
        }
    }
}

EdgeModelBank make_bank(DecoderKind kind, FeatureLayout layout, const MlpSpec& edge_spec,
                        int type_count, double sigma_sq, Rng& rng, int dims,
                        const MlpSpec* node_spec) {
    EdgeModelBank bank;
    bank.kind = kind;
    bank.layout = layout;
    bank.edge_spec = edge_spec;
    bank.sigma_sq = sigma_sq;
    bank.edge_params.reserve(static_cast<std::size_t>(type_count));
    for (int k = 0; k < type_count; ++k) {
        bank.edge_params.push_back(init_params(edge_spec, rng));
    }
    if (kind == DecoderKind::MessagePassing) {
        if (node_spec == nullptr) {
            throw config_error("make_bank: message-passing decoder needs a node spec");
        }
        bank.node_spec = *node_spec;
        bank.node_params = init_params(bank.node_spec, rng);
    }
    bank.validate(dims);
    return bank;
}

std::vector<double> edge_message(const EdgeModelBank& bank, const SimulationRecord& rec, int t,
                                 int receiver, int sender, int type) {
    std::vector<double> features(static_cast<std::size_t>(edge_feature_width(bank.layout, rec.dims)));
    write_edge_features(bank.layout, rec, t, receiver, sender, features.data());
    return mlp_forward(bank.edge_spec, bank.edge_params.at(static_cast<std::size_t>(type)),
                       features);
}

namespace {

std::vector<double> finish_increment(const EdgeModelBank& bank, const SimulationRecord& rec,
                                     int t, int center, std::vector<double> aggregate) {
    if (bank.kind == DecoderKind::PhysicsInduced) {
        const double mass = rec.masses[static_cast<std::size_t>(center)];
        for (auto& v : aggregate) v /= mass;
        return aggregate;
    }
    const int node_width = node_feature_width(bank.layout, rec.dims);
    std::vector<double> input(aggregate.size() + static_cast<std::size_t>(node_width));
    std::copy(aggregate.begin(), aggregate.end(), input.begin());
    write_node_features(bank.layout, rec, t, center, input.data() + aggregate.size());
    return mlp_forward(bank.node_spec, bank.node_params, input);
}

}  // namespace

std::vector<double> predict_increment(const EdgeModelBank& bank, const SimulationRecord& rec,
                                      int t, int center, const std::vector<int>& neighbors,
                                      const RealizationTable& table, std::int64_t realization) {
    if (realization < 0 || realization >= table.size()) {
        throw config_error("predict_increment: realization id out of range");
    }
    if (static_cast<int>(neighbors.size()) != table.slot_count) {
        throw shape_error("predict_increment: neighbor count does not match the table");
    }
    std::vector<double> aggregate(static_cast<std::size_t>(bank.edge_spec.output_width()), 0.0);
    for (int slot = 0; slot < table.slot_count; ++slot) {
        const int type = table.phi(realization, slot);
        const auto message =
            edge_message(bank, rec, t, center, neighbors[static_cast<std::size_t>(slot)], type);
        for (std::size_t c = 0; c < aggregate.size(); ++c) aggregate[c] += message[c];
    }
    return finish_increment(bank, rec, t, center, std::move(aggregate));
}

std::vector<double> predict_increment_with_types(const EdgeModelBank& bank,
                                                 const SimulationRecord& rec, int t, int center,
                                                 const std::vector<int>& active_neighbors,
                                                 const std::vector<int>& types) {
    if (active_neighbors.size() != types.size()) {
        throw shape_error("predict_increment_with_types: one type per active edge required");
    }
    std::vector<double> aggregate(static_cast<std::size_t>(bank.edge_spec.output_width()), 0.0);
    for (std::size_t s = 0; s < active_neighbors.size(); ++s) {
        const auto message = edge_message(bank, rec, t, center, active_neighbors[s], types[s]);
        for (std::size_t c = 0; c < aggregate.size(); ++c) aggregate[c] += message[c];
    }
    return finish_increment(bank, rec, t, center, std::move(aggregate));
}

double gaussian_log_density(int dims, double sigma_sq, const double* truth,
                            const double* predicted) {
    if (sigma_sq <= 0) throw config_error("gaussian_log_density: sigma^2 must be positive");
    double squared = 0.0;
    for (int c = 0; c < dims; ++c) {
        const double diff = truth[c] - predicted[c];
        squared += diff * diff;
    }
    return -squared / (2.0 * sigma_sq) -
           0.5 * dims * std::log(2.0 * std::numbers::pi) - 0.5 * dims * std::log(sigma_sq);
}

double conditional_log_likelihood(const EdgeModelBank& bank, const std::vector<double>& truth,
                                  const std::vector<double>& predicted) {
    if (truth.size() != predicted.size()) {
        throw shape_error("conditional_log_likelihood: vector lengths differ");
    }
    return gaussian_log_density(static_cast<int>(truth.size()), bank.sigma_sq, truth.data(),
                                predicted.data());
}

TrajectoryDataset simulate_teacher(const EdgeModelBank& bank, const ParticleSystemSpec& base,
                                   int simulations, std::uint64_t seed, const std::string& split) {
    bank.validate(base.dims);
    if (bank.kind != DecoderKind::PhysicsInduced) {
        throw config_error("simulate_teacher: teacher trajectories need the physics-induced form");
    }
    TrajectoryDataset dataset;
    dataset.kind = SystemKind::Teacher;
    dataset.dims = base.dims;
    dataset.type_count = bank.type_count();
    dataset.particles = base.particles;
    dataset.dt = base.dt * base.downsample;
    dataset.seed = seed;
    dataset.split = split;
    dataset.particle_spec = base;
    dataset.particle_spec.kind = SystemKind::Teacher;
    dataset.particle_spec.type_count = bank.type_count();

    const int n = base.particles;
    const int d = base.dims;
    for (int s = 0; s < simulations; ++s) {
        Rng rng(derive_seed(seed, static_cast<std::uint64_t>(s)));

        std::vector<double> masses = random_masses(n, rng);
        std::vector<double> positions = standard_normal_vector(static_cast<std::size_t>(n) * d, rng);
        std::vector<double> velocities = standard_normal_vector(static_cast<std::size_t>(n) * d, rng);
        std::vector<std::int8_t> edge_types = random_symmetric_types(n, bank.type_count(), rng);

        // scratch record so the bank sees the same feature layout as training
        SimulationRecord frame;
        frame.particles = n;
        frame.dims = d;
        frame.steps = 1;
        frame.masses = masses;
        frame.positions.resize(static_cast<std::size_t>(n) * d);
        frame.velocities.resize(static_cast<std::size_t>(n) * d);
        frame.increments.assign(static_cast<std::size_t>(n) * d, 0.0);

        const ForceFn force_fn = [&](const std::vector<double>& r, const std::vector<double>& v,
                                     std::vector<double>& forces) {
            frame.positions = r;
            frame.velocities = v;
            for (int p = 0; p < n; ++p) {
                for (int q = 0; q < n; ++q) {
                    if (q == p) continue;
                    const int type = edge_types[static_cast<std::size_t>(p) * n + q];
                    const auto f = edge_message(bank, frame, 0, p, q, type);
                    for (int c = 0; c < d; ++c) {
                        forces[static_cast<std::size_t>(p) * d + c] += f[static_cast<std::size_t>(c)];
                    }
                }
            }
        };

        SimulationRecord record =
            integrate_custom(n, d, base.dt, base.steps, base.downsample, std::move(masses),
                             std::move(positions), std::move(velocities), force_fn);
        record.edge_types = std::move(edge_types);
        dataset.sims.push_back(std::move(record));
    }
    return dataset;
}

std::vector<ForceGridRow> force_grid(const EdgeModelBank& bank, double lo, double hi,
                                     int points_per_axis, std::int64_t cap) {
    if (points_per_axis < 1) throw config_error("force_grid: need at least one grid point");
    const std::int64_t total = static_cast<std::int64_t>(points_per_axis) * points_per_axis *
                               bank.type_count();
    if (total > cap) {
        throw capacity_error("force_grid: " + std::to_string(total) +
                             " rows exceed the cap of " + std::to_string(cap));
    }

    SimulationRecord frame;
    frame.particles = 2;
    frame.dims = 2;
    frame.steps = 1;
    frame.masses = {1.0, 1.0};
    frame.positions.assign(4, 0.0);
    frame.velocities.assign(4, 0.0);
    frame.increments.assign(4, 0.0);

    std::vector<ForceGridRow> rows;
    rows.reserve(static_cast<std::size_t>(total));
    for (int k = 0; k < bank.type_count(); ++k) {
        for (int iy = 0; iy < points_per_axis; ++iy) {
            for (int ix = 0; ix < points_per_axis; ++ix) {
                const double x = points_per_axis == 1
                                     ? lo
                                     : lo + (hi - lo) * ix / (points_per_axis - 1);
                const double y = points_per_axis == 1
                                     ? lo
                                     : lo + (hi - lo) * iy / (points_per_axis - 1);
                frame.positions[2] = x;
                frame.positions[3] = y;
                const auto f = edge_message(bank, frame, 0, 0, 1, k);
                rows.push_back({k, x, y, f[0], f[1]});
            }
        }
    }
    return rows;
}

}  // namespace cri
