#include "cri/sim.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <string>

#include <Eigen/Eigenvalues>

namespace cri {

namespace {
constexpr double divergence_guard = 1e6;
}  // namespace

std::string to_string(SystemKind kind) {
    switch (kind) {
        case SystemKind::Spring: return "spring";
        case SystemKind::Charge: return "charge";
        case SystemKind::Crystallization: return "crystallization";
        case SystemKind::Var: return "var";
        case SystemKind::Teacher: return "teacher";
    }
    return "unknown";
}

SystemKind system_kind_from_string(const std::string& name) {
    if (name == "spring") return SystemKind::Spring;
    if (name == "charge") return SystemKind::Charge;
    if (name == "crystallization") return SystemKind::Crystallization;
    if (name == "var") return SystemKind::Var;
    if (name == "teacher") return SystemKind::Teacher;
    throw config_error("unknown system kind '" + name + "'");
}

void ParticleSystemSpec::validate() const {
    if (particles < 1) throw config_error("spec: need at least one particle");
    if (type_count < 1) throw config_error("spec: need at least one interaction type");
    if (dims != 2) throw config_error("spec: only two spatial dimensions are supported");
    if (dt <= 0) throw config_error("spec: dt must be positive");
    if (steps < 1) throw config_error("spec: need at least one stored step");
    if (downsample < 1) throw config_error("spec: downsample factor must be >= 1");
    if (kind == SystemKind::Spring &&
        static_cast<int>(spring_types.size()) != type_count) {
        throw config_error("spec: spring needs one (k, L) pair per interaction type");
    }
    if (kind == SystemKind::Charge && type_count != 2) {
        throw config_error("spec: charge systems have exactly two interaction types");
    }
    if (kind == SystemKind::Crystallization && type_count != 2) {
        throw config_error("spec: crystallization has exactly two interaction types");
    }
    if (neighbor_rule == NeighborRule::KNearest &&
        (neighbor_count < 1 || neighbor_count >= particles)) {
        throw config_error("spec: neighbor count must be in [1, particles)");
    }
}

ParticleSystemSpec ParticleSystemSpec::spring(int particles, int type_count) {
    ParticleSystemSpec spec;
    spec.kind = SystemKind::Spring;
    spec.particles = particles;
    spec.type_count = type_count;
    spec.spring_types = {{0.5, 2.0}, {2.0, 1.0}};
    if (type_count == 4) {
        spec.spring_types.push_back({2.5, 1.0});
        spec.spring_types.push_back({2.5, 2.0});
    } else if (type_count != 2) {
        throw config_error("spring presets cover K = 2 and K = 4");
    }
    return spec;
}

ParticleSystemSpec ParticleSystemSpec::charge(int particles) {
    ParticleSystemSpec spec;
    spec.kind = SystemKind::Charge;
    spec.particles = particles;
    spec.type_count = 2;
    return spec;
}

ParticleSystemSpec ParticleSystemSpec::crystallization(int particles, int stored_steps) {
    ParticleSystemSpec spec;
    spec.kind = SystemKind::Crystallization;
    spec.particles = particles;
    spec.type_count = 2;
    spec.dt = 1e-5;
    spec.downsample = 50;
    spec.steps = stored_steps;
    spec.neighbor_rule = NeighborRule::KNearest;
    spec.neighbor_count = 5;
    return spec;
}

std::vector<int> SimulationRecord::step_neighbors(int t, int i) const {
    std::vector<int> out;
    if (neighbor_count == 0) return out;
    const std::size_t base =
        (static_cast<std::size_t>(t) * particles + i) * neighbor_count;
    out.reserve(static_cast<std::size_t>(neighbor_count));
    for (int s = 0; s < neighbor_count; ++s) {
        out.push_back(static_cast<int>(neighbor_lists[base + s]));
    }
    std::sort(out.begin(), out.end());
    return out;
}

void TrajectoryDataset::validate() const {
    for (const auto& sim : sims) {
        if (sim.particles != particles || sim.dims != dims) {
            throw data_error("dataset: simulation shape does not match header");
        }
        const std::size_t block =
            static_cast<std::size_t>(sim.steps) * particles * dims;
        if (sim.positions.size() != block || sim.velocities.size() != block ||
            sim.increments.size() != block ||
            sim.masses.size() != static_cast<std::size_t>(particles) ||
            sim.edge_types.size() != static_cast<std::size_t>(particles) * particles) {
            throw data_error("dataset: block sizes are inconsistent");
        }
        for (double m : sim.masses) {
            if (!(m > 0.0)) throw data_error("dataset: non-positive mass");
        }
        if (neighbor_count > 0 &&
            sim.neighbor_lists.size() !=
                static_cast<std::size_t>(sim.steps) * particles * neighbor_count) {
            throw data_error("dataset: neighbor list block size mismatch");
        }
    }
}

void VarSpec::validate() const {
    const std::size_t n = static_cast<std::size_t>(series_count);
    if (series_count < 1) throw config_error("var: need at least one series");
    if (adjacency.size() != n * n || coefficients.size() != n * n) {
        throw config_error("var: adjacency and coefficients must be N x N");
    }
    if (noise_std < 0) throw config_error("var: negative noise std");
    if (steps < 1) throw config_error("var: need at least one step");

    Eigen::MatrixXd a(series_count, series_count);
    for (int i = 0; i < series_count; ++i) {
        for (int j = 0; j < series_count; ++j) {
            a(i, j) = adjacency[n * i + j] ? coefficients[n * i + j] : 0.0;
        }
    }
    const Eigen::VectorXcd eigenvalues = Eigen::EigenSolver<Eigen::MatrixXd>(a, false).eigenvalues();
    double radius = 0.0;
    for (Eigen::Index i = 0; i < eigenvalues.size(); ++i) {
        radius = std::max(radius, std::abs(eigenvalues[i]));
    }
    // unit-root matrices (radius exactly 1, e.g. the identity) stay bounded
    // over finite horizons and are accepted; explosive ones are not
    if (radius > 1.0 + 1e-9) {
        throw config_error("var: coefficient matrix is explosive (spectral radius " +
                           std::to_string(radius) + ")");
    }
}

std::array<double, 2> pairwise_force(const ParticleSystemSpec& spec, int type_index,
                                     const std::array<double, 2>& pos_i,
                                     const std::array<double, 2>& pos_j) {
    const double dx = pos_j[0] - pos_i[0];
    const double dy = pos_j[1] - pos_i[1];
    const double r = std::sqrt(dx * dx + dy * dy);

    switch (spec.kind) {
        case SystemKind::Spring: {
            if (r == 0.0) {
                throw numeric_error("pairwise_force: coincident particles in spring system");
            }
            const auto& type = spec.spring_types.at(static_cast<std::size_t>(type_index));
            const double magnitude = type.stiffness * (r - type.balance_length);
            return {magnitude * dx / r, magnitude * dy / r};
        }
        case SystemKind::Charge: {
            if (r == 0.0) return {0.0, 0.0};  // direction undefined, softened magnitude moot
            const double sign_product = type_index == 0 ? 1.0 : -1.0;
            const double softened = r + spec.charge_softening;
            const double magnitude = -spec.charge_coupling * sign_product / (softened * softened);
            return {magnitude * dx / r, magnitude * dy / r};
        }
        case SystemKind::Crystallization: {
            if (r < 1e-12) {
                throw numeric_error("pairwise_force: coincident particles in crystallization system");
            }
            const double sr = spec.lj_sigma / r;
            const double sr6 = sr * sr * sr * sr * sr * sr;
            const double sr12 = sr6 * sr6;
            // dV/dr for V_LJ = 4 eps [(s/r)^12 - (s/r)^6]
            double dv = 4.0 * spec.lj_epsilon * (-12.0 * sr12 + 6.0 * sr6) / r;
            // dipole: type 0 (same kind) V = -C r^-4, type 1 V = +C r^-4
            const double dipole_sign = type_index == 0 ? -1.0 : 1.0;
            dv += dipole_sign * -4.0 * spec.dipole_constant / (r * r * r * r * r);
            // F_on_i = -grad_i V = dV/dr * n_ij
            return {dv * dx / r, dv * dy / r};
        }
        default:
            throw config_error("pairwise_force: kind has no analytic force");
    }
}

std::vector<double> standard_normal_vector(std::size_t size, Rng& rng) {
    std::vector<double> values(size);
    for (auto& v : values) v = rng.normal();
    return values;
}

std::vector<double> random_masses(int particles, Rng& rng) {
    std::vector<double> masses(static_cast<std::size_t>(particles));
    for (auto& m : masses) m = std::exp(rng.uniform(-1.0, 1.0));
    return masses;
}

std::vector<std::int8_t> random_symmetric_types(int particles, int type_count, Rng& rng) {
    std::vector<std::int8_t> types(static_cast<std::size_t>(particles) * particles, -1);
    for (int i = 0; i < particles; ++i) {
        for (int j = i + 1; j < particles; ++j) {
            const auto t = static_cast<std::int8_t>(rng.uniform_int(type_count));
            types[static_cast<std::size_t>(i) * particles + j] = t;
            types[static_cast<std::size_t>(j) * particles + i] = t;
        }
    }
    return types;
}

namespace {

void check_finite_positions(const std::vector<double>& positions, int fine_step) {
    for (double x : positions) {
        if (!std::isfinite(x) || std::abs(x) > divergence_guard) {
            throw numeric_error("integrate: trajectory diverged at fine step " +
                                std::to_string(fine_step));
        }
    }
}

using RetainedHook = std::function<void(int stored_step, const std::vector<double>& positions,
                                        SimulationRecord& record)>;

SimulationRecord integrate_impl(int particles, int dims, double dt, int stored_steps,
                                int downsample, std::vector<double> masses,
                                std::vector<double> positions, std::vector<double> velocities,
                                const ForceFn& force_fn, const RetainedHook& on_retained) {
    SimulationRecord record;
    record.particles = particles;
    record.dims = dims;
    record.steps = stored_steps;
    record.masses = std::move(masses);
    const std::size_t state_size = static_cast<std::size_t>(particles) * dims;
    const std::size_t block = static_cast<std::size_t>(stored_steps) * state_size;
    record.positions.resize(block);
    record.velocities.resize(block);
    record.increments.resize(block);

    std::vector<double> forces(state_size);
    // one retained state beyond the last stored step closes the increments
    std::vector<double> final_velocities;

    const int total_fine = stored_steps * downsample;
    for (int fine = 0; fine <= total_fine; ++fine) {
        if (fine % downsample == 0) {
            const int stored = fine / downsample;
            if (stored < stored_steps) {
                std::copy(positions.begin(), positions.end(),
                          record.positions.begin() + stored * state_size);
                std::copy(velocities.begin(), velocities.end(),
                          record.velocities.begin() + stored * state_size);
                if (on_retained) on_retained(stored, positions, record);
            } else {
                final_velocities = velocities;
                break;
            }
        }
        std::fill(forces.begin(), forces.end(), 0.0);
        force_fn(positions, velocities, forces);
        for (int i = 0; i < particles; ++i) {
            for (int c = 0; c < dims; ++c) {
                const std::size_t idx = static_cast<std::size_t>(i) * dims + c;
                velocities[idx] += forces[idx] / record.masses[static_cast<std::size_t>(i)] * dt;
                positions[idx] += velocities[idx] * dt;
            }
        }
        check_finite_positions(positions, fine);
    }

    const double stored_dt = dt * downsample;
    for (int t = 0; t < stored_steps; ++t) {
        const double* v_now = record.velocities.data() + t * state_size;
        const double* v_next = t + 1 < stored_steps
                                   ? record.velocities.data() + (t + 1) * state_size
                                   : final_velocities.data();
        double* out = record.increments.data() + t * state_size;
        for (std::size_t idx = 0; idx < state_size; ++idx) {
            out[idx] = (v_next[idx] - v_now[idx]) / stored_dt;
        }
    }
    return record;
}

// n nearest senders by current distance, ties broken by lower index.
std::vector<int> nearest_neighbors(const std::vector<double>& positions, int dims, int particles,
                                   int receiver, int count) {
    std::vector<std::pair<double, int>> by_distance;
    by_distance.reserve(static_cast<std::size_t>(particles) - 1);
    const double* rp = positions.data() + static_cast<std::size_t>(receiver) * dims;
    for (int j = 0; j < particles; ++j) {
        if (j == receiver) continue;
        const double* jp = positions.data() + static_cast<std::size_t>(j) * dims;
        double sq = 0.0;
        for (int c = 0; c < dims; ++c) sq += (jp[c] - rp[c]) * (jp[c] - rp[c]);
        by_distance.emplace_back(sq, j);
    }
    std::partial_sort(by_distance.begin(), by_distance.begin() + count, by_distance.end());
    std::vector<int> out(static_cast<std::size_t>(count));
    for (int s = 0; s < count; ++s) out[static_cast<std::size_t>(s)] = by_distance[s].second;
    std::sort(out.begin(), out.end());
    return out;
}

}  // namespace

SimulationRecord integrate_custom(int particles, int dims, double dt, int stored_steps,
                                  int downsample, std::vector<double> masses,
                                  std::vector<double> init_positions,
                                  std::vector<double> init_velocities, const ForceFn& force_fn) {
    return integrate_impl(particles, dims, dt, stored_steps, downsample, std::move(masses),
                          std::move(init_positions), std::move(init_velocities), force_fn, {});
}

SimulationRecord simulate(const ParticleSystemSpec& spec, std::uint64_t seed) {
    spec.validate();
    Rng rng(seed);
    const int n = spec.particles;
    const int d = spec.dims;

    std::vector<double> masses = spec.kind == SystemKind::Crystallization
                                     ? std::vector<double>(static_cast<std::size_t>(n), 1.0)
                                     : random_masses(n, rng);
    std::vector<double> positions = standard_normal_vector(static_cast<std::size_t>(n) * d, rng);
    std::vector<double> velocities = standard_normal_vector(static_cast<std::size_t>(n) * d, rng);

    std::vector<std::int8_t> edge_types;
    switch (spec.kind) {
        case SystemKind::Spring:
            edge_types = random_symmetric_types(n, spec.type_count, rng);
            break;
        case SystemKind::Charge:
        case SystemKind::Crystallization: {
            // per-particle label (charge sign / particle kind); edge type is
            // 0 for equal labels, 1 otherwise
            std::vector<int> label(static_cast<std::size_t>(n));
            for (auto& q : label) q = rng.uniform_int(2);
            edge_types.assign(static_cast<std::size_t>(n) * n, -1);
            for (int i = 0; i < n; ++i) {
                for (int j = 0; j < n; ++j) {
                    if (i == j) continue;
                    edge_types[static_cast<std::size_t>(i) * n + j] =
                        label[static_cast<std::size_t>(i)] == label[static_cast<std::size_t>(j)]
                            ? 0
                            : 1;
                }
            }
            break;
        }
        default:
            throw config_error("simulate: kind '" + to_string(spec.kind) +
                               "' has no analytic simulation");
    }

    const auto type_of = [&](int receiver, int sender) {
        return static_cast<int>(edge_types[static_cast<std::size_t>(receiver) * n + sender]);
    };

    ForceFn force_fn;
    if (spec.neighbor_rule == NeighborRule::AllPairs) {
        force_fn = [&](const std::vector<double>& r, const std::vector<double>&,
                       std::vector<double>& forces) {
            for (int p = 0; p < n; ++p) {
                const std::array<double, 2> rp{r[p * 2], r[p * 2 + 1]};
                for (int q = p + 1; q < n; ++q) {
                    const std::array<double, 2> rq{r[q * 2], r[q * 2 + 1]};
                    // force on p through its edge to q; the reverse is its
                    // exact negation
                    const auto f = pairwise_force(spec, type_of(p, q), rp, rq);
                    forces[p * 2] += f[0];
                    forces[p * 2 + 1] += f[1];
                    forces[q * 2] -= f[0];
                    forces[q * 2 + 1] -= f[1];
                }
            }
        };
    } else {
        force_fn = [&](const std::vector<double>& r, const std::vector<double>&,
                       std::vector<double>& forces) {
            for (int p = 0; p < n; ++p) {
                const std::array<double, 2> rp{r[p * 2], r[p * 2 + 1]};
                for (int q : nearest_neighbors(r, d, n, p, spec.neighbor_count)) {
                    const std::array<double, 2> rq{r[q * 2], r[q * 2 + 1]};
                    const auto f = pairwise_force(spec, type_of(p, q), rp, rq);
                    forces[p * 2] += f[0];
                    forces[p * 2 + 1] += f[1];
                }
            }
        };
    }

    RetainedHook hook;
    if (spec.neighbor_rule == NeighborRule::KNearest) {
        hook = [&](int stored, const std::vector<double>& r, SimulationRecord& record) {
            if (record.neighbor_lists.empty()) {
                record.neighbor_count = spec.neighbor_count;
                record.neighbor_lists.resize(static_cast<std::size_t>(spec.steps) * n *
                                             spec.neighbor_count);
            }
            for (int i = 0; i < n; ++i) {
                const auto nearest = nearest_neighbors(r, d, n, i, spec.neighbor_count);
                const std::size_t base =
                    (static_cast<std::size_t>(stored) * n + i) * spec.neighbor_count;
                for (int s = 0; s < spec.neighbor_count; ++s) {
                    record.neighbor_lists[base + s] = static_cast<std::uint32_t>(nearest[s]);
                }
            }
        };
    }

    SimulationRecord record =
        integrate_impl(n, d, spec.dt, spec.steps, spec.downsample, std::move(masses),
                       std::move(positions), std::move(velocities), force_fn, hook);
    record.edge_types = std::move(edge_types);
    return record;
}

TrajectoryDataset simulate_batch(const ParticleSystemSpec& spec, int simulations,
                                 std::uint64_t seed, const std::string& split) {
    spec.validate();
    TrajectoryDataset dataset;
    dataset.kind = spec.kind;
    dataset.dims = spec.dims;
    dataset.type_count = spec.type_count;
    dataset.particles = spec.particles;
    dataset.dt = spec.dt * spec.downsample;
    dataset.seed = seed;
    dataset.split = split;
    dataset.neighbor_count =
        spec.neighbor_rule == NeighborRule::KNearest ? spec.neighbor_count : 0;
    dataset.particle_spec = spec;
    dataset.sims.reserve(static_cast<std::size_t>(simulations));
    for (int s = 0; s < simulations; ++s) {
        dataset.sims.push_back(simulate(spec, derive_seed(seed, static_cast<std::uint64_t>(s))));
    }
    return dataset;
}

SimulationRecord simulate_var(const VarSpec& spec, std::uint64_t seed) {
    spec.validate();
    Rng rng(seed);
    const int n = spec.series_count;

    SimulationRecord record;
    record.particles = n;
    record.dims = 1;
    record.steps = spec.steps;
    record.masses.assign(static_cast<std::size_t>(n), 1.0);
    record.positions.resize(static_cast<std::size_t>(spec.steps) * n);
    record.velocities.assign(static_cast<std::size_t>(spec.steps) * n, 0.0);
    record.increments.resize(static_cast<std::size_t>(spec.steps) * n);

    std::vector<double> now = standard_normal_vector(static_cast<std::size_t>(n), rng);
    std::vector<double> next(static_cast<std::size_t>(n));
    for (int t = 0; t < spec.steps; ++t) {
        std::copy(now.begin(), now.end(),
                  record.positions.begin() + static_cast<std::size_t>(t) * n);
        for (int i = 0; i < n; ++i) {
            double acc = 0.0;
            for (int j = 0; j < n; ++j) {
                if (spec.adjacency[static_cast<std::size_t>(i) * n + j]) {
                    acc += spec.coefficients[static_cast<std::size_t>(i) * n + j] *
                           now[static_cast<std::size_t>(j)];
                }
            }
            next[static_cast<std::size_t>(i)] =
                acc + (spec.noise_std > 0 ? spec.noise_std * rng.normal() : 0.0);
        }
        for (int i = 0; i < n; ++i) {
            record.increments[static_cast<std::size_t>(t) * n + i] =
                next[static_cast<std::size_t>(i)] - now[static_cast<std::size_t>(i)];
        }
        now.swap(next);
    }

    record.edge_types.assign(static_cast<std::size_t>(n) * n, -1);
    for (int i = 0; i < n; ++i) {
        for (int j = 0; j < n; ++j) {
            if (i == j) continue;
            record.edge_types[static_cast<std::size_t>(i) * n + j] =
                spec.adjacency[static_cast<std::size_t>(i) * n + j] ? 1 : 0;
        }
    }
    return record;
}

TrajectoryDataset simulate_var_batch(const VarSpec& spec, int simulations, std::uint64_t seed,
                                     const std::string& split) {
    spec.validate();
    TrajectoryDataset dataset;
    dataset.kind = SystemKind::Var;
    dataset.dims = 1;
    dataset.type_count = 2;
    dataset.particles = spec.series_count;
    dataset.dt = 1.0;
    dataset.seed = seed;
    dataset.split = split;
    dataset.sims.reserve(static_cast<std::size_t>(simulations));
    for (int s = 0; s < simulations; ++s) {
        dataset.sims.push_back(
            simulate_var(spec, derive_seed(seed, static_cast<std::uint64_t>(s))));
    }
    return dataset;
}

NoisyDataset inject_noise(const TrajectoryDataset& dataset, double beta, std::uint64_t seed) {
    if (beta < 0) throw config_error("inject_noise: beta must be nonnegative");
    if (beta == 0.0) return {dataset, 0.0};
    if (dataset.kind == SystemKind::Var) {
        throw config_error("inject_noise: defined for particle trajectories only");
    }

    NoisyDataset result;
    result.data = dataset;
    const int d = dataset.dims;
    double relative_sum = 0.0;
    std::size_t relative_count = 0;

    for (std::size_t s = 0; s < dataset.sims.size(); ++s) {
        const SimulationRecord& clean = dataset.sims[s];
        SimulationRecord& noisy = result.data.sims[s];
        const int n = clean.particles;
        const int T = clean.steps;
        if (T < 3) throw data_error("inject_noise: need at least three stored steps");
        const std::size_t state_size = static_cast<std::size_t>(n) * d;

        Rng rng(derive_seed(seed, s));
        std::vector<double> jittered = clean.positions;
        for (auto& x : jittered) x += beta * rng.normal();

        // backward differences reproduce the integrator's stored velocities
        // exactly when beta = 0; the usable window drops one step per side
        const int new_steps = T - 2;
        std::vector<double> fd_velocity(static_cast<std::size_t>(T) * state_size);
        for (int t = 1; t < T; ++t) {
            for (std::size_t idx = 0; idx < state_size; ++idx) {
                fd_velocity[t * state_size + idx] =
                    (jittered[t * state_size + idx] - jittered[(t - 1) * state_size + idx]) /
                    dataset.dt;
            }
        }

        noisy.steps = new_steps;
        noisy.positions.resize(static_cast<std::size_t>(new_steps) * state_size);
        noisy.velocities.resize(static_cast<std::size_t>(new_steps) * state_size);
        noisy.increments.resize(static_cast<std::size_t>(new_steps) * state_size);
        for (int t = 0; t < new_steps; ++t) {
            const int src = t + 1;
            for (std::size_t idx = 0; idx < state_size; ++idx) {
                noisy.positions[t * state_size + idx] = jittered[src * state_size + idx];
                noisy.velocities[t * state_size + idx] = fd_velocity[src * state_size + idx];
                const double increment =
                    (fd_velocity[(src + 1) * state_size + idx] - fd_velocity[src * state_size + idx]) /
                    dataset.dt;
                noisy.increments[t * state_size + idx] = increment;
                const double reference = clean.increments[src * state_size + idx];
                if (std::abs(reference) > 0.0) {
                    relative_sum += std::abs(increment - reference) / std::abs(reference);
                    relative_count += 1;
                }
            }
        }
        if (clean.neighbor_count > 0) {
            const std::size_t row = static_cast<std::size_t>(n) * clean.neighbor_count;
            noisy.neighbor_lists.assign(clean.neighbor_lists.begin() + row,
                                        clean.neighbor_lists.begin() + row * (new_steps + 1));
        }
    }

    result.noise_level = relative_count > 0 ? relative_sum / static_cast<double>(relative_count) : 0.0;
    return result;
}

}  // namespace cri
