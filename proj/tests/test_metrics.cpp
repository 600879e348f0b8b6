#include <cmath>
#include <numeric>

#include <doctest.h>

#include "cri/metrics.hpp"
#include "support/oracles.hpp"

using namespace cri;

namespace {

// A physics-induced bank whose single linear layer reads only coordinate
// differences, making it exactly antisymmetric under edge reversal.
EdgeModelBank antisymmetric_bank(int type_count) {
    EdgeModelBank bank;
    bank.kind = DecoderKind::PhysicsInduced;
    bank.layout = FeatureLayout::ParticleWithMass;
    bank.edge_spec.widths = {10, 2};
    bank.sigma_sq = 0.1;
    Rng rng(55);
    for (int k = 0; k < type_count; ++k) {
        ParamVector params = zero_params(bank.edge_spec);
        // output c reads a * (r_j - r_i) + b * (v_j - v_i) + g * (m_j - m_i)
        for (int c = 0; c < 2; ++c) {
            const double a = rng.uniform(-1.0, 1.0);
            const double b = rng.uniform(-1.0, 1.0);
            const double g = rng.uniform(-0.3, 0.3);
            double* row = params.data() + static_cast<std::size_t>(c) * 10;
            row[c] = -a;      // receiver position
            row[5 + c] = a;   // sender position
            row[2 + c] = -b;  // receiver velocity
            row[7 + c] = b;   // sender velocity
            row[4] = -g;      // receiver mass
            row[9] = g;       // sender mass
        }
        bank.edge_params.push_back(std::move(params));
    }
    return bank;
}

EdgeModelBank constant_bank(int type_count, double fx, double fy) {
    EdgeModelBank bank;
    bank.kind = DecoderKind::PhysicsInduced;
    bank.layout = FeatureLayout::ParticleWithMass;
    bank.edge_spec.widths = {10, 2};
    bank.sigma_sq = 0.1;
    for (int k = 0; k < type_count; ++k) {
        ParamVector params = zero_params(bank.edge_spec);
        params[params.size() - 2] = fx;
        params[params.size() - 1] = fy;
        bank.edge_params.push_back(std::move(params));
    }
    return bank;
}

std::vector<std::vector<std::int8_t>> truth_types(const TrajectoryDataset& data) {
    std::vector<std::vector<std::int8_t>> types;
    for (const SimulationRecord& rec : data.sims) types.push_back(rec.edge_types);
    return types;
}

}  // namespace

TEST_CASE("exact predictions give accuracy one with the identity permutation") {
    const std::vector<int> truth = {0, 1, 1, 0, 1};
    const auto result = permutation_accuracy(truth, truth, 2);
    CHECK(result.accuracy == 1.0);
    CHECK(result.permutation == std::vector<int>{0, 1});
}

TEST_CASE("globally swapped labels still give accuracy one") {
    const std::vector<int> truth = {0, 1, 1, 0, 1};
    std::vector<int> swapped;
    for (int t : truth) swapped.push_back(1 - t);
    const auto result = permutation_accuracy(swapped, truth, 2);
    CHECK(result.accuracy == 1.0);
    CHECK(result.permutation == std::vector<int>{1, 0});
}

TEST_CASE("three of four edges match under the better relabeling") {
    // swap fixes edges 0-2, identity fixes edge 3 only
    const std::vector<int> truth = {0, 0, 1, 1};
    const std::vector<int> predicted = {1, 1, 0, 1};
    const auto result = permutation_accuracy(predicted, truth, 2);
    CHECK(result.accuracy == doctest::Approx(0.75));
    CHECK(result.permutation == std::vector<int>{1, 0});
}

TEST_CASE("accuracy is invariant under relabeling the predictions") {
    Rng rng(61);
    for (int trial = 0; trial < 100; ++trial) {
        const int k = 2 + rng.uniform_int(2);
        std::vector<int> truth, predicted;
        for (int e = 0; e < 30; ++e) {
            truth.push_back(rng.uniform_int(k));
            predicted.push_back(rng.uniform_int(k));
        }
        const double base = permutation_accuracy(predicted, truth, k).accuracy;
        // relabel predictions by a random bijection
        std::vector<int> relabel(static_cast<std::size_t>(k));
        std::iota(relabel.begin(), relabel.end(), 0);
        for (int i = k - 1; i > 0; --i) {
            std::swap(relabel[static_cast<std::size_t>(i)],
                      relabel[static_cast<std::size_t>(rng.uniform_int(i + 1))]);
        }
        std::vector<int> relabeled;
        for (int p : predicted) relabeled.push_back(relabel[static_cast<std::size_t>(p)]);
        CHECK(permutation_accuracy(relabeled, truth, k).accuracy == base);
        // and equals the brute-force enumeration
        CHECK(base == doctest::Approx(oracle::naive_permutation_accuracy(predicted, truth, k)));
    }
}

TEST_CASE("oversized K hits the factorial cap") {
    CHECK_THROWS_AS(permutation_accuracy({0}, {0}, 7), capacity_error);
}

TEST_CASE("zero-stiffness springs make the zero bank an exact force oracle") {
    ParticleSystemSpec spec = ParticleSystemSpec::spring(4, 2);
    spec.spring_types = {{0.0, 1.0}, {0.0, 2.0}};  // both analytic forces vanish
    spec.steps = 5;
    const TrajectoryDataset data = simulate_batch(spec, 2, 3, "test");
    const EdgeModelBank zero = constant_bank(2, 0.0, 0.0);
    CHECK(mae_pairwise_force(zero, data, {0, 1}) == 0.0);
    CHECK(mae_force_symmetry(zero, data, {0, 1}) == 0.0);

    // truth plus a constant offset (c, 0) costs |c| / 2 per component mean
    const EdgeModelBank offset = constant_bank(2, 0.8, 0.0);
    CHECK(mae_pairwise_force(offset, data, {0, 1}) == doctest::Approx(0.4));
    // and the symmetry error of a constant bank is 2 |c|_1 / d
    CHECK(mae_force_symmetry(offset, data, {0, 1}) == doctest::Approx(2.0 * 0.8 / 2.0));
}

TEST_CASE("the antisymmetric linear teacher has zero symmetry error") {
    ParticleSystemSpec spec = ParticleSystemSpec::spring(5, 2);
    spec.steps = 8;
    const TrajectoryDataset data = simulate_batch(spec, 2, 13, "test");
    const EdgeModelBank bank = antisymmetric_bank(2);
    // the reversed edge permutes the feature vector, so the dot products
    // accumulate in a different order; zero up to summation round-off
    CHECK(mae_force_symmetry(bank, data, {0, 1}) < 1e-12);
    CHECK(mae_force_symmetry(bank, data, {1, 0}) < 1e-12);
}

TEST_CASE("symmetry error matches an independent recomputation on a random bank") {
    ParticleSystemSpec spec = ParticleSystemSpec::spring(3, 2);
    spec.steps = 4;
    const TrajectoryDataset data = simulate_batch(spec, 1, 19, "test");
    Rng rng(71);
    EdgeModelBank bank;
    bank.kind = DecoderKind::PhysicsInduced;
    bank.layout = FeatureLayout::ParticleWithMass;
    bank.edge_spec.widths = {10, 6, 2};
    bank.sigma_sq = 0.1;
    bank.edge_params.push_back(init_params(bank.edge_spec, rng));
    bank.edge_params.push_back(init_params(bank.edge_spec, rng));

    const std::vector<int> perm = {1, 0};
    const std::vector<int> net_for_truth = {1, 0};  // inverse of perm
    const SimulationRecord& rec = data.sims[0];
    double total = 0.0;
    std::int64_t count = 0;
    for (int t = 0; t < rec.steps; ++t) {
        for (int i = 0; i < rec.particles; ++i) {
            for (int j = 0; j < rec.particles; ++j) {
                if (i == j) continue;
                const auto f_ij = edge_message(bank, rec, t, i, j,
                                               net_for_truth[static_cast<std::size_t>(rec.edge_type(i, j))]);
                const auto f_ji = edge_message(bank, rec, t, j, i,
                                               net_for_truth[static_cast<std::size_t>(rec.edge_type(j, i))]);
                total += std::abs(f_ij[0] + f_ji[0]) + std::abs(f_ij[1] + f_ji[1]);
                count += 2;
            }
        }
    }
    CHECK(mae_force_symmetry(bank, data, perm) ==
          doctest::Approx(total / static_cast<double>(count)).epsilon(1e-12));
}

TEST_CASE("message-passing banks cannot report pairwise-force metrics") {
    ParticleSystemSpec spec = ParticleSystemSpec::spring(3, 2);
    spec.steps = 3;
    const TrajectoryDataset data = simulate_batch(spec, 1, 23, "test");
    Rng rng(5);
    EdgeModelBank bank;
    bank.kind = DecoderKind::MessagePassing;
    bank.layout = FeatureLayout::ParticleWithMass;
    bank.edge_spec.widths = {10, 4};
    bank.node_spec.widths = {9, 4, 2};
    bank.sigma_sq = 0.1;
    bank.edge_params.push_back(init_params(bank.edge_spec, rng));
    bank.edge_params.push_back(init_params(bank.edge_spec, rng));
    bank.node_params = init_params(bank.node_spec, rng);
    CHECK_THROWS_AS(mae_pairwise_force(bank, data, {0, 1}), config_error);
    CHECK_THROWS_AS(mae_force_symmetry(bank, data, {0, 1}), config_error);
    const EvaluationReport report = evaluate(bank, data, truth_types(data));
    CHECK(report.skipped.count("mae_ef") == 1);
    CHECK(report.skipped.count("mae_symm") == 1);
}

TEST_CASE("rollout with the generating bank and true types is exact") {
    Rng rng(83);
    EdgeModelBank bank;
    bank.kind = DecoderKind::PhysicsInduced;
    bank.layout = FeatureLayout::ParticleWithMass;
    bank.edge_spec.widths = {10, 8, 2};
    bank.sigma_sq = 0.1;
    bank.edge_params.push_back(init_params(bank.edge_spec, rng));
    bank.edge_params.push_back(init_params(bank.edge_spec, rng));
    ParticleSystemSpec base = ParticleSystemSpec::spring(4, 2);
    base.steps = 25;
    const TrajectoryDataset data = simulate_teacher(bank, base, 2, 3, "test");

    const RolloutResult one = rollout_mae_state(bank, data, truth_types(data), 1);
    CHECK_FALSE(one.diverged);
    CHECK(one.value < 1e-9);
    const RolloutResult ten = rollout_mae_state(bank, data, truth_types(data), 10);
    CHECK_FALSE(ten.diverged);
    CHECK(ten.value < 1e-9);
}

TEST_CASE("a single wrong edge type perturbs exactly the receiver state") {
    Rng rng(89);
    EdgeModelBank bank;
    bank.kind = DecoderKind::PhysicsInduced;
    bank.layout = FeatureLayout::ParticleWithMass;
    bank.edge_spec.widths = {10, 6, 2};
    bank.sigma_sq = 0.1;
    bank.edge_params.push_back(init_params(bank.edge_spec, rng));
    bank.edge_params.push_back(init_params(bank.edge_spec, rng));
    ParticleSystemSpec base = ParticleSystemSpec::spring(3, 2);
    base.steps = 6;
    const TrajectoryDataset data = simulate_teacher(bank, base, 1, 31, "test");
    const SimulationRecord& rec = data.sims[0];

    auto wrong = truth_types(data);
    const int receiver = 0, sender = 1;
    wrong[0][static_cast<std::size_t>(receiver) * rec.particles + sender] =
        static_cast<std::int8_t>(1 - rec.edge_type(receiver, sender));

    // direct computation: per start, only the receiver's increment changes,
    // by the message difference of the flipped edge divided by the mass
    double expected_total = 0.0;
    std::int64_t terms = 0;
    const double dt = data.dt;
    for (int start = 0; start + 1 < rec.steps; ++start) {
        const auto right = edge_message(bank, rec, start, receiver, sender,
                                        rec.edge_type(receiver, sender));
        const auto flipped = edge_message(bank, rec, start, receiver, sender,
                                          1 - rec.edge_type(receiver, sender));
        for (int c = 0; c < 2; ++c) {
            const double delta = (flipped[static_cast<std::size_t>(c)] -
                                  right[static_cast<std::size_t>(c)]) /
                                 rec.masses[static_cast<std::size_t>(receiver)];
            expected_total += std::abs(delta) * dt;        // velocity error
            expected_total += std::abs(delta) * dt * dt;   // position error
        }
        terms += 2 * 2 * rec.particles;
    }
    const RolloutResult result = rollout_mae_state(bank, data, wrong, 1);
    CHECK(result.value ==
          doctest::Approx(expected_total / static_cast<double>(terms)).epsilon(1e-9));
}

TEST_CASE("divergent rollouts report infinity with a flag") {
    ParticleSystemSpec spec = ParticleSystemSpec::spring(3, 2);
    spec.steps = 15;
    const TrajectoryDataset data = simulate_batch(spec, 1, 47, "test");
    const EdgeModelBank runaway = constant_bank(2, 1e12, 0.0);
    const RolloutResult result = rollout_mae_state(runaway, data, truth_types(data), 10);
    CHECK(result.diverged);
    CHECK(std::isinf(result.value));
}

TEST_CASE("acceleration error vanishes for the generating bank") {
    Rng rng(97);
    EdgeModelBank bank;
    bank.kind = DecoderKind::PhysicsInduced;
    bank.layout = FeatureLayout::ParticleWithMass;
    bank.edge_spec.widths = {10, 4, 2};
    bank.sigma_sq = 0.1;
    bank.edge_params.push_back(init_params(bank.edge_spec, rng));
    bank.edge_params.push_back(init_params(bank.edge_spec, rng));
    ParticleSystemSpec base = ParticleSystemSpec::spring(4, 2);
    base.steps = 10;
    const TrajectoryDataset data = simulate_teacher(bank, base, 1, 53, "test");
    CHECK(mae_acceleration(bank, data, truth_types(data)) < 1e-10);
}

TEST_CASE("full reports mark non-applicable metrics instead of failing") {
    ParticleSystemSpec spec = ParticleSystemSpec::spring(3, 2);
    spec.steps = 12;
    TrajectoryDataset data = simulate_batch(spec, 1, 59, "test");
    const EdgeModelBank bank = constant_bank(2, 0.1, 0.0);
    EvaluationReport report = evaluate(bank, data, truth_types(data));
    CHECK(report.accuracy == 1.0);
    CHECK(report.edges_evaluated == 6);
    CHECK(report.mae_ef > 0.0);
    CHECK(report.skipped.empty());

    // stripping ground truth disables truth-dependent metrics only
    for (auto& t : data.sims[0].edge_types) t = -1;
    auto inferred = truth_types(data);
    for (auto& t : inferred[0]) t = 0;
    for (int i = 0; i < 3; ++i) inferred[0][static_cast<std::size_t>(i) * 3 + i] = -1;
    report = evaluate(bank, data, inferred);
    CHECK(report.skipped.count("accuracy") == 1);
    CHECK(report.skipped.count("mae_ef") == 1);
    CHECK(report.mae_acceleration >= 0.0);
}
