#include <cmath>

#include <doctest.h>

#include "cri/graph.hpp"
#include "cri/rng.hpp"

using namespace cri;

TEST_CASE("all-pairs graph has receiver-major dense edge ids and no self loops") {
    const InteractionGraph g = InteractionGraph::all_pairs(4, 2);
    CHECK(g.edge_count() == 12);
    CHECK(g.edge_id(0, 0) == -1);
    CHECK(g.edge_id(0, 1) == 0);
    CHECK(g.edge_id(1, 0) == 3);
    for (int i = 0; i < 4; ++i) {
        CHECK(g.neighbors[static_cast<std::size_t>(i)].size() == 3u);
    }
}

TEST_CASE("evolving graphs materialize the union of step lists") {
    std::vector<std::vector<std::vector<int>>> steps = {
        {{1}, {0}, {}},
        {{2}, {0}, {1}},
    };
    const InteractionGraph g = InteractionGraph::from_step_neighbors(2, steps);
    CHECK(g.neighbors[0] == std::vector<int>{1, 2});
    CHECK(g.neighbors[1] == std::vector<int>{0});
    CHECK(g.neighbors[2] == std::vector<int>{1});
    CHECK(g.edge_count() == 4);
    CHECK(g.evolving());
}

TEST_CASE("base-2 realizations enumerate as expected for two slots") {
    const RealizationTable table = enumerate_realizations(2, 2);
    REQUIRE(table.size() == 4);
    // counting order: (0,0), (0,1), (1,0), (1,1)
    CHECK(table.phi(0, 0) == 0);
    CHECK(table.phi(0, 1) == 0);
    CHECK(table.phi(1, 0) == 0);
    CHECK(table.phi(1, 1) == 1);
    CHECK(table.phi(2, 0) == 1);
    CHECK(table.phi(2, 1) == 0);
    CHECK(table.phi(3, 0) == 1);
    CHECK(table.phi(3, 1) == 1);
    const auto counts = table.type_counts(2);
    CHECK(counts[0] == 1);
    CHECK(counts[1] == 1);
}

TEST_CASE("phi digits reconstruct the realization id") {
    Rng rng(11);
    for (int trial = 0; trial < 50; ++trial) {
        const int k = 2 + rng.uniform_int(3);
        const int n = 1 + rng.uniform_int(6);
        const RealizationTable table = enumerate_realizations(k, n);
        for (std::int64_t z = 0; z < table.size(); ++z) {
            std::int64_t rebuilt = 0;
            for (int slot = 0; slot < n; ++slot) {
                rebuilt = rebuilt * k + table.phi(z, slot);
            }
            CHECK(rebuilt == z);
        }
    }
}

TEST_CASE("type counts over all base-4 strings of length 4 are symmetric") {
    const RealizationTable table = enumerate_realizations(4, 4);
    REQUIRE(table.size() == 256);
    std::vector<std::int64_t> totals(4, 0);
    for (std::int64_t z = 0; z < table.size(); ++z) {
        const auto counts = table.type_counts(z);
        int sum = 0;
        for (int k = 0; k < 4; ++k) {
            totals[static_cast<std::size_t>(k)] += counts[static_cast<std::size_t>(k)];
            sum += counts[static_cast<std::size_t>(k)];
        }
        CHECK(sum == 4);
    }
    for (int k = 0; k < 4; ++k) CHECK(totals[static_cast<std::size_t>(k)] == 256);
}

TEST_CASE("the realization cap raises an actionable capacity error") {
    CHECK_THROWS_AS(enumerate_realizations(2, 30), capacity_error);
    try {
        enumerate_realizations(4, 15);
    } catch (const capacity_error& e) {
        CHECK(std::string(e.what()).find("Var-CRI") != std::string::npos);
    }
}

TEST_CASE("impossible types have zero prior") {
    const RealizationTable table = enumerate_realizations(2, 2);
    const std::vector<double> tau = {1.0, 0.0};
    CHECK(prior_of_realization(tau, table, 0) == 1.0);
    CHECK(prior_of_realization(tau, table, 1) == 0.0);
    CHECK(prior_of_realization(tau, table, 3) == 0.0);
}

TEST_CASE("uniform priors spread evenly over realizations") {
    const RealizationTable table = enumerate_realizations(2, 2);
    const std::vector<double> tau = {0.5, 0.5};
    for (std::int64_t z = 0; z < 4; ++z) {
        CHECK(prior_of_realization(tau, table, z) == doctest::Approx(0.25));
    }
}

TEST_CASE("prior of one realization is the product over its type counts") {
    const RealizationTable table = enumerate_realizations(2, 3);
    const std::vector<double> tau = {0.3, 0.7};
    // find a realization with counts (2, 1)
    for (std::int64_t z = 0; z < table.size(); ++z) {
        const auto counts = table.type_counts(z);
        if (counts[0] == 2 && counts[1] == 1) {
            CHECK(prior_of_realization(tau, table, z) == doctest::Approx(0.3 * 0.3 * 0.7));
        }
    }
}

TEST_CASE("priors normalize over the whole realization set") {
    Rng rng(23);
    for (int trial = 0; trial < 40; ++trial) {
        const int k = 2 + rng.uniform_int(3);  // up to 4
        const int n = 1 + rng.uniform_int(8);
        std::vector<double> tau(static_cast<std::size_t>(k));
        double total = 0.0;
        for (auto& v : tau) {
            v = rng.uniform(0.05, 1.0);
            total += v;
        }
        for (auto& v : tau) v /= total;
        const RealizationTable table = enumerate_realizations(k, n);
        double sum = 0.0;
        for (std::int64_t z = 0; z < table.size(); ++z) {
            sum += prior_of_realization(tau, table, z);
        }
        CHECK(sum == doctest::Approx(1.0).epsilon(1e-10));
        // the log variant agrees
        const auto log_priors = realization_log_priors(tau, table);
        double log_sum = 0.0;
        for (double lp : log_priors) log_sum += std::exp(lp);
        CHECK(log_sum == doctest::Approx(1.0).epsilon(1e-10));
    }
}

TEST_CASE("unnormalized tau is rejected") {
    const RealizationTable table = enumerate_realizations(2, 2);
    CHECK_THROWS_AS(prior_of_realization({0.5, 0.6}, table, 0), config_error);
}
