#include <cstdint>
#include <iostream>
#include <string>

#include <CLI11.hpp>

#include "cri/pipeline.hpp"

namespace {

cri::ExperimentConfig load_config(const std::string& path, std::int64_t seed_override,
                                  int epochs_override) {
    nlohmann::json j;
    {
        std::ifstream in(path);
        if (!in) throw cri::config_error("cannot open config '" + path + "'");
        try {
            in >> j;
        } catch (const nlohmann::json::exception& e) {
            throw cri::config_error("config parse error: " + std::string(e.what()));
        }
    }
    if (j.contains("config") && j.at("config").is_object()) j = j.at("config");
    if (seed_override >= 0) j["seed"] = static_cast<std::uint64_t>(seed_override);
    if (epochs_override >= 0) j["train"]["epochs"] = epochs_override;
    return cri::ExperimentConfig::from_json(j);
}

void print_summary(const cri::RunArtifacts& artifacts) {
    std::cout << artifacts.summary.dump(2) << "\n";
    for (const std::string& file : artifacts.files) {
        std::cout << "wrote " << file << "\n";
    }
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Collective relational inference for interacting systems"};
    app.require_subcommand(1);

    std::string config_path;
    std::int64_t seed_override = -1;
    int epochs_override = -1;

    auto add_config = [&](CLI::App* sub) {
        sub->add_option("--config", config_path, "experiment config JSON (or a run manifest)")
            ->required();
        sub->add_option("--seed", seed_override, "override the config seed");
    };

    CLI::App* simulate = app.add_subcommand("simulate", "generate trajectory datasets");
    add_config(simulate);

    CLI::App* train = app.add_subcommand("train", "fit a relational inference model");
    add_config(train);
    train->add_option("--epochs", epochs_override, "override the epoch count");

    CLI::App* evaluate = app.add_subcommand("evaluate", "score a checkpoint on a dataset");
    add_config(evaluate);

    std::string checkpoint_path, out_path;
    double grid_lo = -2.0, grid_hi = 2.0;
    int grid_points = 41;
    CLI::App* forces = app.add_subcommand("export-forces",
                                          "sample the typed pairwise-force fields on a grid");
    forces->add_option("--checkpoint", checkpoint_path)->required();
    forces->add_option("--out", out_path)->required();
    forces->add_option("--lo", grid_lo, "grid lower bound");
    forces->add_option("--hi", grid_hi, "grid upper bound");
    forces->add_option("--points", grid_points, "points per axis");

    std::string dataset_path;
    double beta = 0.0;
    std::int64_t noise_seed = -1;
    CLI::App* noise = app.add_subcommand("inject-noise",
                                         "add position noise and rebuild derived states");
    noise->add_option("--dataset", dataset_path)->required();
    noise->add_option("--beta", beta)->required();
    noise->add_option("--seed", noise_seed)->required();
    noise->add_option("--out", out_path)->required();

    std::string block = "positions";
    int sim_index = 0;
    CLI::App* dump = app.add_subcommand("export-data", "dump one dataset block as CSV");
    dump->add_option("--dataset", dataset_path)->required();
    dump->add_option("--block", block, "positions|velocities|masses|increments|edge_types|neighbors");
    dump->add_option("--sim", sim_index);
    dump->add_option("--out", out_path)->required();

    CLI11_PARSE(app, argc, argv);

    try {
        if (simulate->parsed()) {
            print_summary(cri::run_simulate(load_config(config_path, seed_override, -1)));
        } else if (train->parsed()) {
            print_summary(cri::run_train(load_config(config_path, seed_override, epochs_override)));
        } else if (evaluate->parsed()) {
            print_summary(cri::run_evaluate(load_config(config_path, seed_override, -1)));
        } else if (forces->parsed()) {
            print_summary(cri::run_export_forces(checkpoint_path, grid_lo, grid_hi, grid_points,
                                                 out_path));
        } else if (noise->parsed()) {
            print_summary(cri::run_inject_noise(dataset_path, beta,
                                                static_cast<std::uint64_t>(noise_seed), out_path));
        } else if (dump->parsed()) {
            print_summary(cri::run_export_data(dataset_path, block, sim_index, out_path));
        }
    } catch (const cri::numeric_error& e) {
        std::cerr << "numeric error: " << e.what() << "\n";
        return 4;
    } catch (const cri::data_error& e) {
        std::cerr << "data error: " << e.what() << "\n";
        return 3;
    } catch (const cri::config_error& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return 2;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 0;
}
