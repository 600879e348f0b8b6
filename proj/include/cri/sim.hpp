#pragma once

#include <array>
#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "cri/errors.hpp"
#include "cri/rng.hpp"

namespace cri {

enum class SystemKind : std::uint8_t {
    Spring = 0,
    Charge = 1,
    Crystallization = 2,
    Var = 3,
    Teacher = 4,  // trajectories generated by a frozen model bank
};

enum class NeighborRule : std::uint8_t { AllPairs = 0, KNearest = 1 };

std::string to_string(SystemKind kind);
SystemKind system_kind_from_string(const std::string& name);

struct SpringType {
    double stiffness = 1.0;
    double balance_length = 1.0;
};

struct ParticleSystemSpec {
    SystemKind kind = SystemKind::Spring;
    int particles = 5;
    int type_count = 2;
    int dims = 2;
    double dt = 0.01;
    int steps = 100;          // stored steps
    int downsample = 1;       // fine steps per stored step
    NeighborRule neighbor_rule = NeighborRule::AllPairs;
    int neighbor_count = 5;   // KNearest only

    std::vector<SpringType> spring_types;
    double charge_coupling = 1.0;
    double charge_softening = 0.01;
    double lj_sigma = 0.3;
    double lj_epsilon = 1e-5;
    double dipole_constant = 0.02;

    void validate() const;

    // Two springs (0.5, 2.0) and (2.0, 1.0); K = 4 adds (2.5, 1.0), (2.5, 2.0).
    static ParticleSystemSpec spring(int particles, int type_count);
    static ParticleSystemSpec charge(int particles);
    // dt 1e-5, downsample 50, unit masses, five nearest neighbors.
    static ParticleSystemSpec crystallization(int particles, int stored_steps);
};

// One simulated trajectory. All blocks are row-major with step-major layout:
// positions[t*N*d + i*d + c]. The increment at step t is the velocity
// difference (v[t+1] - v[t]) / dt between stored steps, which the integrator
// guarantees by construction.
struct SimulationRecord {
    int particles = 0;
    int steps = 0;
    int dims = 2;
    std::vector<double> positions;
    std::vector<double> velocities;
    std::vector<double> masses;
    std::vector<double> increments;
    std::vector<std::int8_t> edge_types;        // N*N, -1 on the diagonal / absent
    std::vector<std::uint32_t> neighbor_lists;  // steps*N*n when n > 0
    int neighbor_count = 0;

    double pos(int t, int i, int c) const {
        return positions[(static_cast<std::size_t>(t) * particles + i) * dims + c];
    }
    double vel(int t, int i, int c) const {
        return velocities[(static_cast<std::size_t>(t) * particles + i) * dims + c];
    }
    double increment(int t, int i, int c) const {
        return increments[(static_cast<std::size_t>(t) * particles + i) * dims + c];
    }
    int edge_type(int receiver, int sender) const {
        return edge_types[static_cast<std::size_t>(receiver) * particles + sender];
    }
    // Active incoming neighbors of `i` at stored step `t` (ascending index).
    std::vector<int> step_neighbors(int t, int i) const;
};

struct TrajectoryDataset {
    SystemKind kind = SystemKind::Spring;
    int dims = 2;
    int type_count = 2;
    int particles = 0;
    double dt = 0.01;  // spacing between stored steps
    std::uint64_t seed = 0;
    std::string split;
    bool contiguous_steps = true;
    int neighbor_count = 0;
    ParticleSystemSpec particle_spec;  // analytic force parameters, particle kinds
    std::vector<SimulationRecord> sims;

    int steps() const { return sims.empty() ? 0 : sims.front().steps; }
    void validate() const;
};

struct VarSpec {
    int series_count = 3;
    std::vector<std::uint8_t> adjacency;  // N*N; adjacency[i*N+j]: j drives i
    std::vector<double> coefficients;     // N*N lag-1 weights
    double noise_std = 0.0;
    int steps = 100;

    // Throws config_error when the coefficient matrix is not stationary
    // (spectral radius >= 1) or shapes are inconsistent.
    void validate() const;
};

// Analytic pairwise force acting on the receiver at `pos_i`, exerted through
// its edge to the sender at `pos_j`, with n_ij the unit vector from i to j:
// spring k(r - L) n_ij (restoring), charge -c q_i q_j n_ij / (r + delta)^2
// (like signs repel) with the sign product implied by `type_index`,
// crystallization -grad_i (V_LJ + V_dipole) with the dipole sign set by
// `type_index` (0 same kind: attractive, 1 different: repulsive).
std::array<double, 2> pairwise_force(const ParticleSystemSpec& spec, int type_index,
                                     const std::array<double, 2>& pos_i,
                                     const std::array<double, 2>& pos_j);

SimulationRecord simulate(const ParticleSystemSpec& spec, std::uint64_t seed);

TrajectoryDataset simulate_batch(const ParticleSystemSpec& spec, int simulations,
                                 std::uint64_t seed, const std::string& split);

SimulationRecord simulate_var(const VarSpec& spec, std::uint64_t seed);

TrajectoryDataset simulate_var_batch(const VarSpec& spec, int simulations, std::uint64_t seed,
                                     const std::string& split);

// Semi-implicit Euler driver shared by the analytic systems, model-generated
// (teacher) trajectories and rollout evaluation. `force_fn` fills the
// per-particle force accumulator from the current positions and velocities.
// Throws numeric_error when any coordinate exceeds the divergence guard.
using ForceFn = std::function<void(const std::vector<double>& positions,
                                   const std::vector<double>& velocities,
                                   std::vector<double>& forces)>;

SimulationRecord integrate_custom(int particles, int dims, double dt, int stored_steps,
                                  int downsample, std::vector<double> masses,
                                  std::vector<double> init_positions,
                                  std::vector<double> init_velocities, const ForceFn& force_fn);

// White noise of scale beta added to every stored position; velocities and
// increments recomputed from the noisy positions by finite differences
// (backward difference for velocity, so beta = 0 reproduces the integrator's
// stored values exactly). The returned dataset loses one step at each end.
// noise_level is the mean relative change of the increments.
struct NoisyDataset {
    TrajectoryDataset data;
    double noise_level = 0.0;
};

NoisyDataset inject_noise(const TrajectoryDataset& dataset, double beta, std::uint64_t seed);

// Uniformly random symmetric edge types over K for every unordered pair.
std::vector<std::int8_t> random_symmetric_types(int particles, int type_count, Rng& rng);

// ln(m) uniform on [-1, 1].
std::vector<double> random_masses(int particles, Rng& rng);

std::vector<double> standard_normal_vector(std::size_t size, Rng& rng);

}  // namespace cri
