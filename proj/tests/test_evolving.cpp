#include <cmath>

#include <doctest.h>

#include "cri/evolving_cri.hpp"
#include "cri/metrics.hpp"
#include "support/oracles.hpp"

using namespace cri;

namespace {

// Evolving toy dataset: hand-chosen per-step neighbor lists over a small
// trajectory generated by a frozen bank acting on the active edges only.
TrajectoryDataset evolving_teacher(const EdgeModelBank& bank, int particles, int steps,
                                   int neighbor_count, std::uint64_t seed) {
    Rng rng(seed);
    TrajectoryDataset dataset;
    dataset.kind = SystemKind::Teacher;
    dataset.dims = 2;
    dataset.type_count = bank.type_count();
    dataset.particles = particles;
    dataset.dt = 0.01;
    dataset.seed = seed;
    dataset.split = "train";
    dataset.neighbor_count = neighbor_count;
    dataset.particle_spec = ParticleSystemSpec::spring(particles, 2);
    dataset.particle_spec.kind = SystemKind::Teacher;

    SimulationRecord rec;
    rec.particles = particles;
    rec.dims = 2;
    rec.steps = steps;
    rec.neighbor_count = neighbor_count;
    rec.masses = random_masses(particles, rng);
    rec.edge_types = random_symmetric_types(particles, bank.type_count(), rng);
    rec.positions.resize(static_cast<std::size_t>(steps) * particles * 2);
    rec.velocities.resize(static_cast<std::size_t>(steps) * particles * 2);
    rec.increments.resize(static_cast<std::size_t>(steps) * particles * 2);
    rec.neighbor_lists.resize(static_cast<std::size_t>(steps) * particles * neighbor_count);

    std::vector<double> r = standard_normal_vector(static_cast<std::size_t>(particles) * 2, rng);
    std::vector<double> v = standard_normal_vector(static_cast<std::size_t>(particles) * 2, rng);

    SimulationRecord frame;
    frame.particles = particles;
    frame.dims = 2;
    frame.steps = 1;
    frame.masses = rec.masses;
    frame.increments.assign(static_cast<std::size_t>(particles) * 2, 0.0);

    for (int t = 0; t < steps; ++t) {
        // active senders: a moving window of `neighbor_count` distinct nodes
        for (int i = 0; i < particles; ++i) {
            std::vector<int> active;
            for (int s = 1; active.size() < static_cast<std::size_t>(neighbor_count); ++s) {
                const int j = (i + t + s) % particles;
                if (j != i) active.push_back(j);
            }
            std::sort(active.begin(), active.end());
            for (int s = 0; s < neighbor_count; ++s) {
                rec.neighbor_lists[(static_cast<std::size_t>(t) * particles + i) * neighbor_count + s] =
                    static_cast<std::uint32_t>(active[static_cast<std::size_t>(s)]);
            }
        }
        std::copy(r.begin(), r.end(),
                  rec.positions.begin() + static_cast<std::size_t>(t) * particles * 2);
        std::copy(v.begin(), v.end(),
                  rec.velocities.begin() + static_cast<std::size_t>(t) * particles * 2);

        frame.positions = r;
        frame.velocities = v;
        for (int i = 0; i < particles; ++i) {
            const auto active = rec.step_neighbors(t, i);
            std::vector<int> types;
            for (int j : active) types.push_back(rec.edge_type(i, j));
            const auto increment = predict_increment_with_types(bank, frame, 0, i, active, types);
            for (int c = 0; c < 2; ++c) {
                rec.increments[(static_cast<std::size_t>(t) * particles + i) * 2 + c] =
                    increment[static_cast<std::size_t>(c)];
            }
        }
        for (int i = 0; i < particles; ++i) {
            for (int c = 0; c < 2; ++c) {
                const std::size_t idx = static_cast<std::size_t>(i) * 2 + c;
                v[idx] += rec.increments[(static_cast<std::size_t>(t) * particles + i) * 2 + c] *
                          dataset.dt;
                r[idx] += v[idx] * dataset.dt;
            }
        }
    }
    dataset.sims = {std::move(rec)};
    return dataset;
}

EdgeModelBank stiffness_teacher(double sigma_sq, double c0, double c1) {
    EdgeModelBank bank;
    bank.kind = DecoderKind::PhysicsInduced;
    bank.layout = FeatureLayout::ParticleWithMass;
    bank.edge_spec.widths = {10, 2};
    bank.sigma_sq = sigma_sq;
    const double stiffness[2] = {c0, c1};
    for (int k = 0; k < 2; ++k) {
        ParamVector params = zero_params(bank.edge_spec);
        for (int c = 0; c < 2; ++c) {
            double* row = params.data() + static_cast<std::size_t>(c) * 10;
            row[c] = -stiffness[k];
            row[5 + c] = stiffness[k];
        }
        bank.edge_params.push_back(std::move(params));
    }
    return bank;
}

EdgeModelBank constant_bank(int type_count, double sigma_sq) {
    EdgeModelBank bank;
    bank.kind = DecoderKind::PhysicsInduced;
    bank.layout = FeatureLayout::ParticleWithMass;
    bank.edge_spec.widths = {10, 2};
    bank.sigma_sq = sigma_sq;
    for (int k = 0; k < type_count; ++k) bank.edge_params.push_back(zero_params(bank.edge_spec));
    return bank;
}

}  // namespace

TEST_CASE("a single active edge reduces the induction to scalar bayes") {
    const EdgeModelBank teacher = stiffness_teacher(0.05, 0.6, 1.4);
    const TrajectoryDataset data = evolving_teacher(teacher, 4, 3, 1, 11);
    EvolvingState state = make_evolving_state(teacher, data, 0.001);
    state.tau = {0.3, 0.7};
    reset_marginals(state);

    // oracle: p(k) prop tau_k * exp(l_k) for the single edge of node 0 at t=0
    const SimulationRecord& rec = data.sims[0];
    const auto active = rec.step_neighbors(0, 0);
    REQUIRE(active.size() == 1u);
    std::vector<double> likelihood(2);
    for (int k = 0; k < 2; ++k) {
        const auto predicted = predict_increment_with_types(teacher, rec, 0, 0, active, {k});
        std::vector<double> truth = {rec.increment(0, 0, 0), rec.increment(0, 0, 1)};
        likelihood[static_cast<std::size_t>(k)] =
            std::exp(oracle::normal_log_density(truth, predicted, teacher.sigma_sq) + 200.0);
    }
    const double expected0 = 0.3 * likelihood[0] / (0.3 * likelihood[0] + 0.7 * likelihood[1]);

    posterior_induction_step(state, data, 0, 0);
    const InteractionGraph& graph = state.graphs[0];
    const double* marginal =
        state.marginals[0].data() + static_cast<std::size_t>(graph.edge_id(0, active[0])) * 2;
    CHECK(marginal[0] == doctest::Approx(expected0).epsilon(1e-9));
}

TEST_CASE("an uninformative decoder leaves the marginals exactly at tau") {
    const EdgeModelBank teacher = stiffness_teacher(0.1, 0.6, 1.4);
    const TrajectoryDataset data = evolving_teacher(teacher, 5, 6, 2, 13);
    const EdgeModelBank constant = constant_bank(2, 0.1);
    EvolvingState state = make_evolving_state(constant, data, 0.001);
    state.tau = {0.25, 0.75};  // binary fractions keep the arithmetic exact
    evolving_e_pass(state, data);
    for (const auto& marginals : state.marginals) {
        for (std::size_t e = 0; e < marginals.size() / 2; ++e) {
            CHECK(marginals[e * 2] == 0.25);
            CHECK(marginals[e * 2 + 1] == 0.75);
        }
    }
}

TEST_CASE("two co-active edges marginalize over the four realizations") {
    const EdgeModelBank teacher = stiffness_teacher(0.05, 0.6, 1.4);
    const TrajectoryDataset data = evolving_teacher(teacher, 5, 2, 2, 17);
    EvolvingState state = make_evolving_state(teacher, data, 0.001);
    state.tau = {0.4, 0.6};
    reset_marginals(state);

    // hand marginalization for node 0 at t = 0 from the tau-initialized edges
    const SimulationRecord& rec = data.sims[0];
    const auto active = rec.step_neighbors(0, 0);
    REQUIRE(active.size() == 2u);
    double weights[2][2];
    for (int z0 = 0; z0 < 2; ++z0) {
        for (int z1 = 0; z1 < 2; ++z1) {
            const auto predicted =
                predict_increment_with_types(teacher, rec, 0, 0, active, {z0, z1});
            std::vector<double> truth = {rec.increment(0, 0, 0), rec.increment(0, 0, 1)};
            const double prior = state.tau[static_cast<std::size_t>(z0)] *
                                 state.tau[static_cast<std::size_t>(z1)];
            weights[z0][z1] = prior * std::exp(oracle::normal_log_density(truth, predicted,
                                                                          teacher.sigma_sq) + 300.0);
        }
    }
    const double total = weights[0][0] + weights[0][1] + weights[1][0] + weights[1][1];
    const double expected_first0 = (weights[0][0] + weights[0][1]) / total;
    const double expected_second0 = (weights[0][0] + weights[1][0]) / total;

    posterior_induction_step(state, data, 0, 0);
    const InteractionGraph& graph = state.graphs[0];
    const double* first =
        state.marginals[0].data() + static_cast<std::size_t>(graph.edge_id(0, active[0])) * 2;
    const double* second =
        state.marginals[0].data() + static_cast<std::size_t>(graph.edge_id(0, active[1])) * 2;
    CHECK(first[0] == doctest::Approx(expected_first0).epsilon(1e-9));
    CHECK(second[0] == doctest::Approx(expected_second0).epsilon(1e-9));
}

TEST_CASE("marginals stay normalized through a full pass") {
    const EdgeModelBank teacher = stiffness_teacher(0.05, 0.6, 1.4);
    const TrajectoryDataset data = evolving_teacher(teacher, 6, 8, 3, 19);
    EvolvingState state = make_evolving_state(teacher, data, 0.001);
    evolving_e_pass(state, data);
    for (const auto& marginals : state.marginals) {
        for (std::size_t e = 0; e < marginals.size() / 2; ++e) {
            CHECK(marginals[e * 2] + marginals[e * 2 + 1] == doctest::Approx(1.0).epsilon(1e-12));
        }
    }
}

TEST_CASE("time steps touching disjoint edges commute") {
    const EdgeModelBank teacher = stiffness_teacher(0.05, 0.6, 1.4);
    // single active sender per node, three apart between the two steps, so
    // the steps touch disjoint directed edges
    TrajectoryDataset data = evolving_teacher(teacher, 6, 4, 1, 23);
    SimulationRecord& rec = data.sims[0];
    for (int t = 0; t < 2; ++t) {
        for (int i = 0; i < 6; ++i) {
            rec.neighbor_lists[(static_cast<std::size_t>(t) * 6 + i) * 1] =
                static_cast<std::uint32_t>((i + 1 + 3 * t) % 6);
        }
    }
    rec.steps = 2;
    rec.positions.resize(static_cast<std::size_t>(2) * 6 * 2);
    rec.velocities.resize(static_cast<std::size_t>(2) * 6 * 2);
    rec.increments.resize(static_cast<std::size_t>(2) * 6 * 2);
    rec.neighbor_lists.resize(static_cast<std::size_t>(2) * 6 * 1);

    EvolvingState state = make_evolving_state(teacher, data, 0.001);
    reset_marginals(state);
    posterior_induction_step(state, data, 0, 0);
    posterior_induction_step(state, data, 0, 1);
    const auto forward_order = state.marginals[0];

    reset_marginals(state);
    posterior_induction_step(state, data, 0, 1);
    posterior_induction_step(state, data, 0, 0);
    for (std::size_t idx = 0; idx < forward_order.size(); ++idx) {
        CHECK(state.marginals[0][idx] ==
              doctest::Approx(forward_order[idx]).epsilon(1e-9));
    }
}

TEST_CASE("q with an uninformative decoder is maximized by the uniform prior") {
    // a constant decoder carries no information about the types: p* stays at
    // tau and the likelihood term of Q is the same for every tau, so Q(tau)
    // reduces to the negative-entropy term, maximized at 1/K per edge
    const EdgeModelBank constant = constant_bank(2, 0.1);
    const TrajectoryDataset data = evolving_teacher(stiffness_teacher(0.1, 0.6, 1.4), 4, 2, 1, 29);

    EvolvingState state = make_evolving_state(constant, data, 0.001);
    state.tau = {0.5, 0.5};
    evolving_e_pass(state, data);  // p* stays uniform

    // Q(tau' | tau_now): marginals fixed from the pass, prior term varies
    const auto q_at = [&](const std::vector<double>& tau_prime) {
        EvolvingState probe = state;
        probe.tau = tau_prime;
        return q_evolving(probe, data);
    };
    const double uniform = q_at({0.5, 0.5});
    for (double p0 : {0.1, 0.3, 0.7, 0.9}) {
        CHECK(q_at({p0, 1.0 - p0}) < uniform);
    }
    // and the analytic update keeps the uniform prior in place
    evolving_m_step_priors(state);
    CHECK(state.tau[0] == doctest::Approx(0.5).epsilon(1e-12));
    CHECK(state.tau[1] == doctest::Approx(0.5).epsilon(1e-12));
}

TEST_CASE("one-hot marginals collapse q to the supervised log-likelihood") {
    const EdgeModelBank teacher = stiffness_teacher(0.05, 0.6, 1.4);
    const TrajectoryDataset data = evolving_teacher(teacher, 4, 4, 2, 31);
    EvolvingState state = make_evolving_state(teacher, data, 0.001);
    state.tau = {0.5, 0.5};
    // force marginals one-hot at the ground truth
    const SimulationRecord& rec = data.sims[0];
    const InteractionGraph& graph = state.graphs[0];
    for (const auto& [i, j] : graph.edge_list()) {
        double* marginal = state.marginals[0].data() +
                           static_cast<std::size_t>(graph.edge_id(i, j)) * 2;
        marginal[0] = rec.edge_type(i, j) == 0 ? 1.0 : 0.0;
        marginal[1] = 1.0 - marginal[0];
    }

    double supervised = 0.0;
    for (int t = 0; t < rec.steps; ++t) {
        for (int i = 0; i < rec.particles; ++i) {
            const auto active = rec.step_neighbors(t, i);
            std::vector<int> types;
            for (int j : active) types.push_back(rec.edge_type(i, j));
            const auto predicted = predict_increment_with_types(teacher, rec, t, i, active, types);
            std::vector<double> truth = {rec.increment(t, i, 0), rec.increment(t, i, 1)};
            supervised += oracle::normal_log_density(truth, predicted, teacher.sigma_sq);
        }
    }
    const double prior_term = std::log(0.5) * static_cast<double>(graph.edge_count());
    CHECK(q_evolving(state, data) == doctest::Approx(prior_term + supervised).epsilon(1e-9));
}

TEST_CASE("q matches a full-enumeration expectation on small active sets") {
    const EdgeModelBank teacher = stiffness_teacher(0.05, 0.6, 1.4);
    const TrajectoryDataset data = evolving_teacher(teacher, 5, 3, 3, 37);
    EvolvingState state = make_evolving_state(teacher, data, 0.001);
    state.tau = {0.35, 0.65};
    evolving_e_pass(state, data);

    const SimulationRecord& rec = data.sims[0];
    const InteractionGraph& graph = state.graphs[0];
    double expected = 0.0;
    for (const auto& [i, j] : graph.edge_list()) {
        const double* marginal = state.marginals[0].data() +
                                 static_cast<std::size_t>(graph.edge_id(i, j)) * 2;
        for (int k = 0; k < 2; ++k) {
            if (marginal[k] > 0.0) {
                expected += marginal[k] * std::log(state.tau[static_cast<std::size_t>(k)]);
            }
        }
    }
    for (int t = 0; t < rec.steps; ++t) {
        for (int i = 0; i < rec.particles; ++i) {
            const auto active = rec.step_neighbors(t, i);
            const RealizationTable table = enumerate_realizations(2, static_cast<int>(active.size()));
            for (std::int64_t z = 0; z < table.size(); ++z) {
                double weight = 1.0;
                std::vector<int> types;
                for (int slot = 0; slot < table.slot_count; ++slot) {
                    const int type = table.phi(z, slot);
                    types.push_back(type);
                    weight *= state.marginals[0][static_cast<std::size_t>(
                                  graph.edge_id(i, active[static_cast<std::size_t>(slot)])) * 2 + type];
                }
                if (weight == 0.0) continue;
                const auto predicted =
                    predict_increment_with_types(teacher, rec, t, i, active, types);
                std::vector<double> truth = {rec.increment(t, i, 0), rec.increment(t, i, 1)};
                expected += weight *
                            oracle::normal_log_density(truth, predicted, teacher.sigma_sq);
            }
        }
    }
    CHECK(q_evolving(state, data) == doctest::Approx(expected).epsilon(1e-9));
}

TEST_CASE("a static one-step dataset matches the cri posterior marginalized to edges") {
    const EdgeModelBank teacher = stiffness_teacher(0.1, 0.6, 1.4);
    // all nodes see the same two neighbors at the single step
    TrajectoryDataset data = evolving_teacher(teacher, 3, 1, 2, 41);
    EvolvingState state = make_evolving_state(teacher, data, 0.001);
    state.tau = {0.5, 0.5};
    reset_marginals(state);
    posterior_induction_step(state, data, 0, 0);

    const SimulationRecord& rec = data.sims[0];
    const InteractionGraph& graph = state.graphs[0];
    for (int i = 0; i < 3; ++i) {
        const auto active = rec.step_neighbors(0, i);
        const auto naive =
            oracle::naive_subgraph_posterior(teacher, rec, i, active, {0.5, 0.5});
        const RealizationTable table = enumerate_realizations(2, static_cast<int>(active.size()));
        for (std::size_t slot = 0; slot < active.size(); ++slot) {
            double expected0 = 0.0;
            for (std::int64_t z = 0; z < table.size(); ++z) {
                if (table.phi(z, static_cast<int>(slot)) == 0) {
                    expected0 += naive.posterior[static_cast<std::size_t>(z)];
                }
            }
            const double* marginal =
                state.marginals[0].data() +
                static_cast<std::size_t>(graph.edge_id(i, active[slot])) * 2;
            CHECK(marginal[0] == doctest::Approx(expected0).epsilon(1e-9));
        }
    }
}

TEST_CASE("evolving training recovers strongly separated teacher types") {
    const EdgeModelBank teacher = stiffness_teacher(0.01, 0.5, 1.5);
    const TrajectoryDataset data = evolving_teacher(teacher, 8, 120, 3, 43);
    Rng rng(47);
    EdgeModelBank student;
    student.kind = DecoderKind::PhysicsInduced;
    student.layout = FeatureLayout::ParticleWithMass;
    student.edge_spec.widths = {10, 32, 2};
    student.sigma_sq = 0.01;
    student.edge_params.push_back(init_params(student.edge_spec, rng));
    student.edge_params.push_back(init_params(student.edge_spec, rng));

    TrainControl control;
    control.epochs = 150;
    control.learning_rate = 0.01;
    control.seed = 3;
    control.ascent_guard = false;
    control.validate_every = 1000;
    const TrainResult result = train_evolving(student, control, data, nullptr);
    const auto [predicted, truth] = aligned_edge_types(data, result.edge_types);
    CHECK(permutation_accuracy(predicted, truth, 2).accuracy >= 0.9);
}
