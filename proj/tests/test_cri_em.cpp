#include <cmath>
#include <numeric>

#include <doctest.h>

#include "cri/cri_em.hpp"
#include "cri/metrics.hpp"
#include "support/oracles.hpp"

using namespace cri;

namespace {

EdgeModelBank random_bank(int type_count, std::vector<int> widths, std::uint64_t seed,
                          double sigma_sq = 0.1) {
    Rng rng(seed);
    EdgeModelBank bank;
    bank.kind = DecoderKind::PhysicsInduced;
    bank.layout = FeatureLayout::ParticleWithMass;
    bank.edge_spec.widths = std::move(widths);
    bank.sigma_sq = sigma_sq;
    for (int k = 0; k < type_count; ++k) bank.edge_params.push_back(init_params(bank.edge_spec, rng));
    return bank;
}

TrajectoryDataset teacher_data(const EdgeModelBank& bank, int particles, int sims, int steps,
                               std::uint64_t seed) {
    ParticleSystemSpec base = ParticleSystemSpec::spring(particles, 2);
    base.steps = steps;  // the bank's own type count overrides the base spec
    return simulate_teacher(bank, base, sims, seed, "train");
}

// Q's Theta term recomputed the slow way: posterior-weighted per-step
// log-densities via the public decoder surface.
double oracle_theta_term(const CriState& state, const TrajectoryDataset& data) {
    double q = 0.0;
    const int nodes = state.graph.node_count;
    for (std::size_t s = 0; s < data.sims.size(); ++s) {
        const SimulationRecord& rec = data.sims[s];
        for (int i = 0; i < nodes; ++i) {
            const auto& table = state.tables[static_cast<std::size_t>(i)];
            const auto& post = state.posterior[s * static_cast<std::size_t>(nodes) + i];
            const auto& senders = state.graph.neighbors[static_cast<std::size_t>(i)];
            for (std::int64_t z = 0; z < table.size(); ++z) {
                if (post[static_cast<std::size_t>(z)] == 0.0) continue;
                double loglik = 0.0;
                for (int t = 0; t < rec.steps; ++t) {
                    const auto predicted =
                        predict_increment(state.bank, rec, t, i, senders, table, z);
                    std::vector<double> truth(2);
                    truth[0] = rec.increment(t, i, 0);
                    truth[1] = rec.increment(t, i, 1);
                    loglik += oracle::normal_log_density(truth, predicted, state.bank.sigma_sq);
                }
                q += post[static_cast<std::size_t>(z)] * loglik;
            }
        }
    }
    return q;
}

}  // namespace

TEST_CASE("with no observations the posterior recovers the realization prior") {
    const EdgeModelBank bank = random_bank(2, {10, 4, 2}, 1);
    TrajectoryDataset data;
    data.kind = SystemKind::Teacher;
    data.type_count = 2;
    data.particles = 3;
    data.particle_spec = ParticleSystemSpec::spring(3, 2);
    SimulationRecord rec;
    rec.particles = 3;
    rec.dims = 2;
    rec.steps = 0;
    rec.masses = {1.0, 1.0, 1.0};
    rec.edge_types.assign(9, 0);
    data.sims = {rec};

    CriState state = make_cri_state(bank, InteractionGraph::all_pairs(3, 2), 1, 0.001);
    state.tau = {0.3, 0.7};
    e_step(state, data);
    for (int i = 0; i < 3; ++i) {
        const auto& table = state.tables[static_cast<std::size_t>(i)];
        const auto& post = state.posterior[static_cast<std::size_t>(i)];
        for (std::int64_t z = 0; z < table.size(); ++z) {
            CHECK(post[static_cast<std::size_t>(z)] ==
                  doctest::Approx(prior_of_realization(state.tau, table, z)).epsilon(1e-12));
        }
    }
    CHECK(state.marginal_log_likelihood == doctest::Approx(0.0).epsilon(1e-12));
}

TEST_CASE("posteriors and marginal likelihood match full enumeration") {
    const EdgeModelBank bank = random_bank(2, {10, 5, 2}, 3, 0.05);
    const TrajectoryDataset data = teacher_data(bank, 3, 4, 3, 11);
    const EdgeModelBank probe = random_bank(2, {10, 5, 2}, 9, 0.05);

    CriState state = make_cri_state(probe, InteractionGraph::all_pairs(3, 2), 4, 0.001);
    state.tau = {0.4, 0.6};
    e_step(state, data);

    double oracle_total = 0.0;
    for (std::size_t s = 0; s < data.sims.size(); ++s) {
        for (int i = 0; i < 3; ++i) {
            const auto naive = oracle::naive_subgraph_posterior(
                probe, data.sims[s], i, state.graph.neighbors[static_cast<std::size_t>(i)],
                state.tau);
            const auto& post = state.posterior[s * 3 + static_cast<std::size_t>(i)];
            REQUIRE(post.size() == naive.posterior.size());
            for (std::size_t z = 0; z < post.size(); ++z) {
                CHECK(post[z] == doctest::Approx(naive.posterior[z]).epsilon(1e-9));
            }
            oracle_total += std::log(naive.marginal_likelihood);
        }
    }
    CHECK(state.marginal_log_likelihood == doctest::Approx(oracle_total).epsilon(1e-9));
}

TEST_CASE("posterior is invariant to a uniform likelihood rescaling") {
    // linear bank scaled by alpha with increments and sigma^2 scaled to match
    // multiplies every per-step likelihood by a constant
    EdgeModelBank bank = random_bank(2, {10, 2}, 21, 0.1);
    TrajectoryDataset data = teacher_data(bank, 3, 2, 4, 23);

    const double alpha = 3.0;
    EdgeModelBank scaled = bank;
    scaled.sigma_sq = bank.sigma_sq * alpha * alpha;
    for (auto& params : scaled.edge_params) {
        for (double& p : params) p *= alpha;
    }
    TrajectoryDataset scaled_data = data;
    for (auto& rec : scaled_data.sims) {
        for (double& a : rec.increments) a *= alpha;
    }

    CriState state = make_cri_state(bank, InteractionGraph::all_pairs(3, 2), 2, 0.001);
    e_step(state, data);
    CriState scaled_state = make_cri_state(scaled, InteractionGraph::all_pairs(3, 2), 2, 0.001);
    e_step(scaled_state, scaled_data);
    for (std::size_t row = 0; row < state.posterior.size(); ++row) {
        for (std::size_t z = 0; z < state.posterior[row].size(); ++z) {
            CHECK(state.posterior[row][z] ==
                  doctest::Approx(scaled_state.posterior[row][z]).epsilon(1e-10));
        }
    }
}

TEST_CASE("q at a flat posterior reduces to priors plus gaussian constants") {
    // stationary system: zero increments, zero-parameter bank
    EdgeModelBank bank = random_bank(2, {10, 2}, 0, 0.1);
    for (auto& params : bank.edge_params) std::fill(params.begin(), params.end(), 0.0);

    TrajectoryDataset data;
    data.kind = SystemKind::Teacher;
    data.type_count = 2;
    data.particles = 3;
    data.particle_spec = ParticleSystemSpec::spring(3, 2);
    SimulationRecord rec;
    rec.particles = 3;
    rec.dims = 2;
    rec.steps = 5;
    rec.masses = {1.0, 2.0, 0.5};
    rec.positions.assign(5 * 3 * 2, 0.3);
    rec.velocities.assign(5 * 3 * 2, -0.2);
    rec.increments.assign(5 * 3 * 2, 0.0);
    rec.edge_types.assign(9, 0);
    data.sims = {rec};

    CriState state = make_cri_state(bank, InteractionGraph::all_pairs(3, 2), 1, 0.001);
    e_step(state, data);
    const double constant =
        -std::log(2.0 * std::numbers::pi) - std::log(0.1);  // d = 2 per step
    const double expected = 3.0 * std::log(1.0 / 4.0) + 3.0 * 5.0 * constant;
    CHECK(q_function(state) == doctest::Approx(expected).epsilon(1e-10));
}

TEST_CASE("q matches its expanded posterior-weighted form") {
    const EdgeModelBank teacher = random_bank(2, {10, 4, 2}, 31);
    const TrajectoryDataset data = teacher_data(teacher, 3, 3, 3, 37);
    const EdgeModelBank probe = random_bank(2, {10, 4, 2}, 41);
    CriState state = make_cri_state(probe, InteractionGraph::all_pairs(3, 2), 3, 0.001);
    state.tau = {0.25, 0.75};
    e_step(state, data);

    // expansion: sum_i sum_z P (log pi_z + sum_t log l)
    double expanded = 0.0;
    for (std::size_t s = 0; s < data.sims.size(); ++s) {
        for (int i = 0; i < 3; ++i) {
            const auto& table = state.tables[static_cast<std::size_t>(i)];
            const auto& post = state.posterior[s * 3 + static_cast<std::size_t>(i)];
            for (std::int64_t z = 0; z < table.size(); ++z) {
                const double p = post[static_cast<std::size_t>(z)];
                if (p == 0.0) continue;
                expanded += p * std::log(prior_of_realization(state.tau, table, z));
            }
        }
    }
    expanded += oracle_theta_term(state, data);
    CHECK(q_function(state) == doctest::Approx(expanded).epsilon(1e-9));
}

TEST_CASE("the e-step posterior maximizes the free energy over the simplex") {
    // two-node systems have a single incoming edge per node: |Y| = 2
    const EdgeModelBank teacher = random_bank(2, {10, 4, 2}, 43);
    const TrajectoryDataset data = teacher_data(teacher, 2, 2, 2, 47);
    const EdgeModelBank probe = random_bank(2, {10, 4, 2}, 53);
    CriState state = make_cri_state(probe, InteractionGraph::all_pairs(2, 2), 2, 0.001);
    state.tau = {0.35, 0.65};
    e_step(state, data);

    for (std::size_t row = 0; row < state.posterior.size(); ++row) {
        const auto& loglik = state.log_likelihood[row];
        const std::vector<double> log_prior = {std::log(state.tau[0]), std::log(state.tau[1])};
        const auto free_energy = [&](double p0) {
            double value = 0.0;
            const double probabilities[2] = {p0, 1.0 - p0};
            for (int z = 0; z < 2; ++z) {
                const double p = probabilities[z];
                if (p <= 0.0) continue;
                value += p * (log_prior[static_cast<std::size_t>(z)] +
                              loglik[static_cast<std::size_t>(z)] - std::log(p));
            }
            return value;
        };
        const double at_posterior = free_energy(state.posterior[row][0]);
        for (int g = 0; g <= 100; ++g) {
            CHECK(free_energy(g / 100.0) <= at_posterior + 1e-9);
        }
    }
}

TEST_CASE("priors collapse to certainty when the posterior does") {
    const EdgeModelBank bank = random_bank(2, {10, 2}, 57);
    const TrajectoryDataset data = teacher_data(bank, 3, 2, 2, 59);
    CriState state = make_cri_state(bank, InteractionGraph::all_pairs(3, 2), 2, 0.001);
    e_step(state, data);
    for (auto& post : state.posterior) {
        std::fill(post.begin(), post.end(), 0.0);
        post[0] = 1.0;  // the all-type-0 realization
    }
    m_step_priors(state);
    CHECK(state.tau[0] == doctest::Approx(1.0));
    CHECK(state.tau[1] == doctest::Approx(0.0));
}

TEST_CASE("uniform posteriors keep the priors uniform") {
    const EdgeModelBank bank = random_bank(2, {10, 2}, 61);
    const TrajectoryDataset data = teacher_data(bank, 3, 2, 2, 67);
    CriState state = make_cri_state(bank, InteractionGraph::all_pairs(3, 2), 2, 0.001);
    e_step(state, data);
    for (auto& post : state.posterior) {
        std::fill(post.begin(), post.end(), 1.0 / static_cast<double>(post.size()));
    }
    m_step_priors(state);
    CHECK(state.tau[0] == doctest::Approx(0.5).epsilon(1e-12));
    CHECK(state.tau[1] == doctest::Approx(0.5).epsilon(1e-12));
}

TEST_CASE("the closed-form prior update matches a simplex grid search") {
    Rng rng(71);
    const EdgeModelBank bank = random_bank(2, {10, 2}, 73);
    const TrajectoryDataset data = teacher_data(bank, 3, 3, 2, 79);
    for (int trial = 0; trial < 20; ++trial) {
        CriState state = make_cri_state(bank, InteractionGraph::all_pairs(3, 2), 3, 0.001);
        e_step(state, data);
        for (auto& post : state.posterior) {
            double total = 0.0;
            for (double& p : post) {
                p = rng.uniform(0.0, 1.0);
                total += p;
            }
            for (double& p : post) p /= total;
        }
        // expected type counts under the random posterior
        std::vector<double> chi(2, 0.0);
        for (std::size_t row = 0; row < state.posterior.size(); ++row) {
            const auto& table = state.tables[row % 3];
            for (std::int64_t z = 0; z < table.size(); ++z) {
                const auto counts = table.type_counts(z);
                for (int k = 0; k < 2; ++k) {
                    chi[static_cast<std::size_t>(k)] +=
                        state.posterior[row][static_cast<std::size_t>(z)] *
                        counts[static_cast<std::size_t>(k)];
                }
            }
        }
        m_step_priors(state);
        double closed_form = 0.0;
        for (int k = 0; k < 2; ++k) {
            closed_form += chi[static_cast<std::size_t>(k)] *
                           std::log(state.tau[static_cast<std::size_t>(k)]);
        }
        const double grid_best = oracle::grid_search_tau_term(chi, 1e-3);
        CHECK(closed_form >= grid_best - 1e-12);
        CHECK(closed_form - grid_best <= 1e-4 * std::abs(grid_best) + 1e-4);
    }
}

TEST_CASE("theta gradients match finite differences through Q") {
    const EdgeModelBank teacher = random_bank(2, {10, 3, 2}, 83);
    const TrajectoryDataset data = teacher_data(teacher, 2, 2, 2, 89);
    EdgeModelBank probe = random_bank(2, {10, 3, 2}, 97);
    CriState state = make_cri_state(probe, InteractionGraph::all_pairs(2, 2), 2, 0.001);
    e_step(state, data);

    const ThetaGradients gradients = q_theta_gradients(state, data);
    for (int k = 0; k < 2; ++k) {
        const auto q_of = [&](const ParamVector& params) {
            CriState scratch = state;
            scratch.bank.edge_params[static_cast<std::size_t>(k)] = params;
            return oracle_theta_term(scratch, data);
        };
        const auto fd = oracle::fd_gradient(q_of, state.bank.edge_params[static_cast<std::size_t>(k)]);
        for (std::size_t i = 0; i < fd.size(); ++i) {
            CHECK_MESSAGE(oracle::close_rel(gradients.edge[static_cast<std::size_t>(k)][i], fd[i],
                                            1e-5, 1e-7),
                          "net ", k, " param ", i);
        }
    }
}

TEST_CASE("zero residuals yield zero gradients and an idle update") {
    const EdgeModelBank bank = random_bank(2, {10, 4, 2}, 101);
    const TrajectoryDataset data = teacher_data(bank, 3, 2, 3, 103);
    CriState state = make_cri_state(bank, InteractionGraph::all_pairs(3, 2), 2, 0.001);
    e_step(state, data);
    // concentrate the posterior on the true realizations so every weighted
    // residual is exactly the teacher's (zero)
    const auto truth = [&](int sim, int node) {
        const auto& neighbors = state.graph.neighbors[static_cast<std::size_t>(node)];
        std::int64_t z = 0;
        for (int slot = 0; slot < static_cast<int>(neighbors.size()); ++slot) {
            z = z * 2 + data.sims[static_cast<std::size_t>(sim)].edge_type(
                            node, neighbors[static_cast<std::size_t>(slot)]);
        }
        return z;
    };
    for (std::size_t row = 0; row < state.posterior.size(); ++row) {
        std::fill(state.posterior[row].begin(), state.posterior[row].end(), 0.0);
        state.posterior[row][static_cast<std::size_t>(
            truth(static_cast<int>(row) / 3, static_cast<int>(row) % 3))] = 1.0;
    }
    const ThetaGradients gradients = q_theta_gradients(state, data);
    for (const auto& grad : gradients.edge) {
        for (double g : grad) CHECK(std::abs(g) < 1e-9);
    }
    const auto params_before = state.bank.edge_params;
    m_step_theta(state, data);
    for (std::size_t k = 0; k < params_before.size(); ++k) {
        for (std::size_t i = 0; i < params_before[k].size(); ++i) {
            CHECK(std::abs(state.bank.edge_params[k][i] - params_before[k][i]) < 1e-6);
        }
    }
}

TEST_CASE("a one-hot posterior reduces the gradient to supervised least squares") {
    const EdgeModelBank teacher = random_bank(2, {10, 4, 2}, 107);
    const TrajectoryDataset data = teacher_data(teacher, 3, 1, 3, 109);
    EdgeModelBank probe = random_bank(2, {10, 4, 2}, 113);
    CriState state = make_cri_state(probe, InteractionGraph::all_pairs(3, 2), 1, 0.001);
    e_step(state, data);
    // concentrate on the ground-truth realization per node
    const SimulationRecord& rec = data.sims[0];
    for (int i = 0; i < 3; ++i) {
        auto& post = state.posterior[static_cast<std::size_t>(i)];
        std::fill(post.begin(), post.end(), 0.0);
        const auto& neighbors = state.graph.neighbors[static_cast<std::size_t>(i)];
        std::int64_t z = 0;
        for (int slot = 0; slot < 2; ++slot) {
            z = z * 2 + rec.edge_type(i, neighbors[static_cast<std::size_t>(slot)]);
        }
        post[static_cast<std::size_t>(z)] = 1.0;
    }

    const ThetaGradients gradients = q_theta_gradients(state, data);

    // supervised oracle: each edge contributes residual-weighted VJPs under
    // its ground-truth type
    std::vector<ParamVector> expected;
    for (int k = 0; k < 2; ++k) expected.push_back(zero_params(probe.edge_spec));
    for (int t = 0; t < rec.steps; ++t) {
        for (int i = 0; i < 3; ++i) {
            std::vector<int> senders;
            std::vector<int> types;
            for (int j = 0; j < 3; ++j) {
                if (j == i) continue;
                senders.push_back(j);
                types.push_back(rec.edge_type(i, j));
            }
            const auto predicted = predict_increment_with_types(probe, rec, t, i, senders, types);
            const double mass = rec.masses[static_cast<std::size_t>(i)];
            for (std::size_t e = 0; e < senders.size(); ++e) {
                std::vector<double> features(10);
                write_edge_features(probe.layout, rec, t, i, senders[e], features.data());
                std::vector<double> upstream(2);
                for (int c = 0; c < 2; ++c) {
                    upstream[static_cast<std::size_t>(c)] =
                        (rec.increment(t, i, c) - predicted[static_cast<std::size_t>(c)]) /
                        (probe.sigma_sq * mass);
                }
                const auto vjp = mlp_gradient(probe.edge_spec,
                                              probe.edge_params[static_cast<std::size_t>(types[e])],
                                              features, upstream);
                for (std::size_t p = 0; p < vjp.params.size(); ++p) {
                    expected[static_cast<std::size_t>(types[e])][p] += vjp.params[p];
                }
            }
        }
    }
    for (int k = 0; k < 2; ++k) {
        for (std::size_t p = 0; p < expected[static_cast<std::size_t>(k)].size(); ++p) {
            CHECK(gradients.edge[static_cast<std::size_t>(k)][p] ==
                  doctest::Approx(expected[static_cast<std::size_t>(k)][p]).epsilon(1e-9));
        }
    }
}

TEST_CASE("type inference reads the argmax realization through phi") {
    const EdgeModelBank bank = random_bank(2, {10, 2}, 127);
    const TrajectoryDataset data = teacher_data(bank, 3, 1, 2, 131);
    CriState state = make_cri_state(bank, InteractionGraph::all_pairs(3, 2), 1, 0.001);
    e_step(state, data);

    // one-hot rows read off phi directly
    for (int i = 0; i < 3; ++i) {
        auto& post = state.posterior[static_cast<std::size_t>(i)];
        std::fill(post.begin(), post.end(), 0.0);
        post[2] = 1.0;  // types (1, 0) over the two ascending senders
    }
    auto types = infer_edge_types(state);
    for (int i = 0; i < 3; ++i) {
        const auto& senders = state.graph.neighbors[static_cast<std::size_t>(i)];
        CHECK(types[0][static_cast<std::size_t>(i) * 3 + senders[0]] == 1);
        CHECK(types[0][static_cast<std::size_t>(i) * 3 + senders[1]] == 0);
    }

    // exact ties resolve to the lowest realization id
    for (int i = 0; i < 3; ++i) {
        auto& post = state.posterior[static_cast<std::size_t>(i)];
        std::fill(post.begin(), post.end(), 0.25);
    }
    types = infer_edge_types(state);
    for (int i = 0; i < 3; ++i) {
        const auto& senders = state.graph.neighbors[static_cast<std::size_t>(i)];
        CHECK(types[0][static_cast<std::size_t>(i) * 3 + senders[0]] == 0);
        CHECK(types[0][static_cast<std::size_t>(i) * 3 + senders[1]] == 0);
    }

    // random rows agree with a brute-force argmax
    Rng rng(137);
    for (int i = 0; i < 3; ++i) {
        auto& post = state.posterior[static_cast<std::size_t>(i)];
        double total = 0.0;
        for (double& p : post) {
            p = rng.uniform(0.0, 1.0);
            total += p;
        }
        for (double& p : post) p /= total;
    }
    types = infer_edge_types(state);
    for (int i = 0; i < 3; ++i) {
        const auto& post = state.posterior[static_cast<std::size_t>(i)];
        std::size_t best = 0;
        for (std::size_t z = 1; z < post.size(); ++z) {
            if (post[z] > post[best]) best = z;
        }
        const auto& table = state.tables[static_cast<std::size_t>(i)];
        const auto& senders = state.graph.neighbors[static_cast<std::size_t>(i)];
        for (int slot = 0; slot < 2; ++slot) {
            CHECK(types[0][static_cast<std::size_t>(i) * 3 + senders[static_cast<std::size_t>(slot)]] ==
                  table.phi(static_cast<std::int64_t>(best), slot));
        }
    }
}

TEST_CASE("numeric collapse raises a degeneracy error naming the node") {
    const EdgeModelBank bank = random_bank(2, {10, 2}, 139);
    TrajectoryDataset data = teacher_data(bank, 3, 1, 2, 149);
    data.sims[0].increments[0] = 1e308;  // squared residual overflows
    CriState state = make_cri_state(bank, InteractionGraph::all_pairs(3, 2), 1, 0.001);
    try {
        e_step(state, data);
        FAIL("expected numeric_error");
    } catch (const numeric_error& e) {
        CHECK(std::string(e.what()).find("node 0") != std::string::npos);
    }
}

TEST_CASE("a single interaction type trains as plain supervised regression") {
    const EdgeModelBank teacher = random_bank(1, {10, 4, 2}, 151);
    const TrajectoryDataset data = teacher_data(teacher, 3, 4, 10, 157);
    EdgeModelBank student = random_bank(1, {10, 4, 2}, 163);
    TrainControl control;
    control.epochs = 3;
    control.seed = 5;
    control.validate_every = 1;
    const TrainResult result = train_cri(student, control, data, &data);
    REQUIRE(!result.history.empty());
    CHECK(result.history.back().accuracy == 1.0);
    CHECK(result.tau[0] == doctest::Approx(1.0));
}

TEST_CASE("a micro teacher-student run recovers the true types") {
    EdgeModelBank teacher = random_bank(2, {10, 8, 2}, 167, 0.02);
    // pull the two force laws apart so the types are macroscopically distinct
    {
        auto& params = teacher.edge_params[1];
        params[params.size() - 2] += 0.8;
        params[params.size() - 1] -= 0.8;
    }
    const TrajectoryDataset data = teacher_data(teacher, 3, 15, 15, 173);
    EdgeModelBank student = random_bank(2, {10, 8, 2}, 179, 0.02);
    TrainControl control;
    control.epochs = 60;
    control.seed = 7;
    control.validate_every = 10;
    const TrainResult result = train_cri(student, control, data, nullptr);

    const auto [predicted, truth] = aligned_edge_types(data, result.edge_types);
    const double accuracy = permutation_accuracy(predicted, truth, 2).accuracy;
    CHECK(accuracy == 1.0);
    CHECK(result.disagreement_rate == 0.0);

    // marginal log-likelihood never decreases with the ascent guard active
    for (std::size_t e = 1; e < result.history.size(); ++e) {
        CHECK(result.history[e].marginal_log_likelihood >=
              result.history[e - 1].marginal_log_likelihood - 1e-7);
    }
}
