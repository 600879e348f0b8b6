#include "cri/pipeline.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <numeric>

#include "cri/dataset_io.hpp"
#include "cri/evolving_cri.hpp"
#include "cri/var_cri.hpp"

namespace cri {

namespace fs = std::filesystem;

std::vector<int> split_counts(int total, const std::vector<double>& ratio) {
    if (ratio.size() != 3) throw config_error("split_counts: need three ratio entries");
    double ratio_sum = 0.0;
    for (double r : ratio) {
        if (r < 0) throw config_error("split_counts: negative ratio");
        ratio_sum += r;
    }
    if (ratio_sum <= 0) throw config_error("split_counts: ratios sum to zero");

    std::vector<int> counts(3);
    std::vector<std::pair<double, int>> remainders;
    int assigned = 0;
    for (int i = 0; i < 3; ++i) {
        const double exact = total * ratio[static_cast<std::size_t>(i)] / ratio_sum;
        counts[static_cast<std::size_t>(i)] = static_cast<int>(std::floor(exact));
        assigned += counts[static_cast<std::size_t>(i)];
        remainders.emplace_back(exact - std::floor(exact), i);
    }
    std::sort(remainders.begin(), remainders.end(), [](const auto& a, const auto& b) {
        return a.first > b.first || (a.first == b.first && a.second < b.second);
    });
    for (int leftover = total - assigned, i = 0; leftover > 0; --leftover, ++i) {
        counts[static_cast<std::size_t>(remainders[static_cast<std::size_t>(i)].second)] += 1;
    }
    return counts;
}

void write_manifest(const std::string& path, const std::string& command,
                    const nlohmann::json& config, const std::vector<std::string>& artifacts) {
    nlohmann::json manifest;
    manifest["command"] = command;
    manifest["config"] = config;
    nlohmann::json files = nlohmann::json::array();
    for (const std::string& artifact : artifacts) {
        char hex[32];
        std::snprintf(hex, sizeof(hex), "%016llx",
                      static_cast<unsigned long long>(fnv1a_file(artifact)));
        files.push_back({{"path", artifact},
                         {"bytes", fs::file_size(artifact)},
                         {"fnv64", std::string(hex)}});
    }
    manifest["artifacts"] = files;
    std::ofstream out(path);
    if (!out) throw data_error("write_manifest: cannot open '" + path + "'");
    out << manifest.dump(2) << "\n";
}

namespace {

// Retained-step subset of a crystallization run as its own dataset.
TrajectoryDataset slice_steps(const TrajectoryDataset& full, const std::vector<int>& steps,
                              const std::string& split, bool contiguous) {
    const SimulationRecord& src = full.sims.front();
    TrajectoryDataset out = full;
    out.split = split;
    out.contiguous_steps = contiguous;
    SimulationRecord rec;
    rec.particles = src.particles;
    rec.dims = src.dims;
    rec.steps = static_cast<int>(steps.size());
    rec.masses = src.masses;
    rec.edge_types = src.edge_types;
    rec.neighbor_count = src.neighbor_count;
    const std::size_t state_size = static_cast<std::size_t>(src.particles) * src.dims;
    rec.positions.reserve(steps.size() * state_size);
    rec.velocities.reserve(steps.size() * state_size);
    rec.increments.reserve(steps.size() * state_size);
    for (int t : steps) {
        const std::size_t offset = static_cast<std::size_t>(t) * state_size;
        rec.positions.insert(rec.positions.end(), src.positions.begin() + offset,
                             src.positions.begin() + offset + state_size);
        rec.velocities.insert(rec.velocities.end(), src.velocities.begin() + offset,
                              src.velocities.begin() + offset + state_size);
        rec.increments.insert(rec.increments.end(), src.increments.begin() + offset,
                              src.increments.begin() + offset + state_size);
        if (src.neighbor_count > 0) {
            const std::size_t row = static_cast<std::size_t>(src.particles) * src.neighbor_count;
            rec.neighbor_lists.insert(rec.neighbor_lists.end(),
                                      src.neighbor_lists.begin() + static_cast<std::size_t>(t) * row,
                                      src.neighbor_lists.begin() + (static_cast<std::size_t>(t) + 1) * row);
        }
    }
    out.sims = {std::move(rec)};
    return out;
}

std::string dataset_path(const std::string& out_dir, SystemKind kind, const std::string& split) {
    return (fs::path(out_dir) / (to_string(kind) + "_" + split + ".bin")).string();
}

}  // namespace

RunArtifacts run_simulate(const ExperimentConfig& config) {
    RunArtifacts artifacts;
    fs::create_directories(config.simulate.out_dir);
    const SystemKind kind = config.kind;
    std::vector<TrajectoryDataset> splits;
    const std::vector<std::string> names = {"train", "valid", "test"};

    if (kind == SystemKind::Crystallization) {
        ParticleSystemSpec spec = config.simulate.spec;
        TrajectoryDataset full = simulate_batch(spec, 1, derive_seed(config.seed, 100), "full");
        const int total = full.steps();
        const std::vector<double> ratio =
            config.simulate.split_ratio.value_or(std::vector<double>{7.0, 1.5, 1.5});
        const std::vector<int> counts = split_counts(total, ratio);
        std::vector<int> order(static_cast<std::size_t>(total));
        std::iota(order.begin(), order.end(), 0);
        const bool interpolation = config.simulate.split_mode == "interpolation";
        if (interpolation) {
            Rng rng(derive_seed(config.seed, 200));
            for (int i = 0; i < total - 1; ++i) {
                const int pick = i + rng.uniform_int(total - i);
                std::swap(order[static_cast<std::size_t>(i)], order[static_cast<std::size_t>(pick)]);
            }
        }
        int cursor = 0;
        for (int part = 0; part < 3; ++part) {
            std::vector<int> steps(order.begin() + cursor,
                                   order.begin() + cursor + counts[static_cast<std::size_t>(part)]);
            cursor += counts[static_cast<std::size_t>(part)];
            std::sort(steps.begin(), steps.end());
            splits.push_back(slice_steps(full, steps, names[static_cast<std::size_t>(part)],
                                         !interpolation));
        }
    } else if (kind == SystemKind::Var) {
        const VarSpec& var = *config.simulate.var;
        int counts[3] = {config.simulate.train_sims, config.simulate.valid_sims,
                         config.simulate.test_sims};
        if (config.simulate.split_ratio) {
            const int total = counts[0] + counts[1] + counts[2];
            const auto exact = split_counts(total, *config.simulate.split_ratio);
            for (int i = 0; i < 3; ++i) counts[i] = exact[static_cast<std::size_t>(i)];
        }
        for (int part = 0; part < 3; ++part) {
            splits.push_back(simulate_var_batch(var, counts[part],
                                                derive_seed(config.seed, 101 + static_cast<std::uint64_t>(part)),
                                                names[static_cast<std::size_t>(part)]));
        }
    } else {
        int counts[3] = {config.simulate.train_sims, config.simulate.valid_sims,
                         config.simulate.test_sims};
        if (config.simulate.split_ratio) {
            const int total = counts[0] + counts[1] + counts[2];
            const auto exact = split_counts(total, *config.simulate.split_ratio);
            for (int i = 0; i < 3; ++i) counts[i] = exact[static_cast<std::size_t>(i)];
        }
        for (int part = 0; part < 3; ++part) {
            const std::uint64_t split_seed =
                derive_seed(config.seed, 101 + static_cast<std::uint64_t>(part));
            if (kind == SystemKind::Teacher) {
                Rng bank_rng(derive_seed(config.seed, 7));
                MlpSpec edge_spec = config.train.edge_spec;
                EdgeModelBank teacher =
                    make_bank(DecoderKind::PhysicsInduced, config.train.layout, edge_spec,
                              config.simulate.spec.type_count, config.train.sigma_sq, bank_rng, 2);
                splits.push_back(simulate_teacher(teacher, config.simulate.spec, counts[part],
                                                  split_seed, names[static_cast<std::size_t>(part)]));
            } else {
                splits.push_back(simulate_batch(config.simulate.spec, counts[part], split_seed,
                                                names[static_cast<std::size_t>(part)]));
            }
        }
    }

    nlohmann::json noise_levels;
    if (config.simulate.noise_beta > 0.0) {
        for (std::size_t part = 0; part < splits.size(); ++part) {
            NoisyDataset noisy = inject_noise(splits[part], config.simulate.noise_beta,
                                              derive_seed(config.seed, 300 + part));
            noise_levels[splits[part].split] = noisy.noise_level;
            splits[part] = std::move(noisy.data);
        }
    }

    for (const TrajectoryDataset& split : splits) {
        const std::string path = dataset_path(config.simulate.out_dir, kind, split.split);
        save_dataset(path, split);
        artifacts.files.push_back(path);
    }
    artifacts.summary["kind"] = to_string(kind);
    artifacts.summary["files"] = artifacts.files;
    if (!noise_levels.empty()) artifacts.summary["noise_level"] = noise_levels;

    const std::string manifest_path = (fs::path(config.simulate.out_dir) / "manifest.json").string();
    write_manifest(manifest_path, "simulate", config.raw, artifacts.files);
    artifacts.files.push_back(manifest_path);
    return artifacts;
}

void write_history_csv(const std::string& path, const std::vector<HistoryRow>& history,
                       bool append) {
    std::ofstream out(path, append ? std::ios::app : std::ios::trunc);
    if (!out) throw data_error("write_history_csv: cannot open '" + path + "'");
    out.precision(17);
    if (!append) out << "epoch,marginal_log_likelihood,q,validation_mae_state,accuracy\n";
    for (const HistoryRow& row : history) {
        out << row.epoch << "," << row.marginal_log_likelihood << "," << row.q_value << ",";
        if (std::isfinite(row.validation_mae_state)) out << row.validation_mae_state;
        out << ",";
        if (std::isfinite(row.accuracy)) out << row.accuracy;
        out << "\n";
    }
}

RunArtifacts run_train(const ExperimentConfig& config) {
    const TrainConfig& tc = config.train;
    if (tc.train_data.empty()) throw config_error("train: 'train_data' is required");
    TrajectoryDataset train = load_dataset(tc.train_data);
    std::optional<TrajectoryDataset> valid;
    if (!tc.valid_data.empty()) valid = load_dataset(tc.valid_data);

    const int dims = train.dims;
    EdgeModelBank bank;
    int epoch_offset = 0;
    if (!tc.resume.empty()) {
        Checkpoint previous = load_checkpoint(tc.resume);
        bank = previous.bank;
        epoch_offset = previous.epochs_completed;
    } else {
        Rng rng(derive_seed(config.seed, 11));
        bank = make_bank(tc.decoder, tc.layout, tc.edge_spec, train.type_count, tc.sigma_sq, rng,
                         dims, tc.decoder == DecoderKind::MessagePassing ? &tc.node_spec : nullptr);
    }

    TrainResult result;
    if (tc.control.epochs > 0) {
        if (tc.method == "cri") {
            result = train_cri(bank, tc.control, train, valid ? &*valid : nullptr);
        } else if (tc.method == "var-cri") {
            result = train_var(bank, tc.control, train, valid ? &*valid : nullptr);
        } else if (tc.method == "evolving-cri") {
            result = train_evolving(bank, tc.control, train, valid ? &*valid : nullptr);
        } else {
            throw config_error("train: unknown method '" + tc.method + "'");
        }
    } else {
        result.bank = bank;
        result.tau.assign(static_cast<std::size_t>(train.type_count),
                          1.0 / train.type_count);
    }

    Checkpoint checkpoint;
    checkpoint.method = tc.method;
    checkpoint.bank = result.bank;
    checkpoint.tau = result.tau;
    checkpoint.omega = result.omega;
    checkpoint.mean_field_groups = tc.control.mean_field_groups;
    checkpoint.mean_field_sweeps = tc.control.mean_field_sweeps;
    checkpoint.dims = dims;
    checkpoint.epochs_completed = epoch_offset + static_cast<int>(result.history.size());
    checkpoint.config_echo = config.raw;
    save_checkpoint(tc.checkpoint_out, checkpoint);

    if (epoch_offset > 0) {
        for (HistoryRow& row : result.history) row.epoch += epoch_offset;
    }
    write_history_csv(tc.history_out, result.history, epoch_offset > 0);

    RunArtifacts artifacts;
    artifacts.files = {tc.checkpoint_out, tc.history_out};
    artifacts.summary["epochs_run"] = result.history.size();
    artifacts.summary["best_epoch"] = result.best_epoch;
    artifacts.summary["disagreement_rate"] = result.disagreement_rate;
    if (!result.history.empty()) {
        const HistoryRow& last = result.history.back();
        artifacts.summary["final_marginal_log_likelihood"] = last.marginal_log_likelihood;
        if (std::isfinite(last.accuracy)) artifacts.summary["final_train_accuracy"] = last.accuracy;
    }
    write_manifest(tc.checkpoint_out + ".manifest.json", "train", config.raw, artifacts.files);
    artifacts.files.push_back(tc.checkpoint_out + ".manifest.json");
    return artifacts;
}

std::vector<std::vector<std::int8_t>> infer_types_with_checkpoint(const Checkpoint& checkpoint,
                                                                  const TrajectoryDataset& data) {
    if (checkpoint.bank.type_count() != data.type_count) {
        throw data_error("evaluate: checkpoint has " + std::to_string(checkpoint.bank.type_count()) +
                         " types but the dataset has " + std::to_string(data.type_count));
    }
    if (checkpoint.dims != data.dims) {
        throw data_error("evaluate: checkpoint and dataset disagree on spatial dimension");
    }
    if (checkpoint.method == "var-cri") {
        VarCriState probe = make_var_state(
            checkpoint.bank, InteractionGraph::all_pairs(data.particles, data.type_count),
            static_cast<int>(data.sims.size()),
            checkpoint.mean_field_groups > 0 ? checkpoint.mean_field_groups : 2, 0.0);
        for (const auto& [size, table] : checkpoint.omega) {
            probe.omega[size] = table;
        }
        var_e_step(probe, data, checkpoint.mean_field_sweeps);
        return var_infer_edge_types(probe);
    }
    if (checkpoint.method == "evolving-cri") {
        EvolvingState probe = make_evolving_state(checkpoint.bank, data, 0.0);
        probe.tau = checkpoint.tau;
        evolving_e_pass(probe, data);
        return evolving_infer_types(probe);
    }
    return cri_infer_types(checkpoint.bank, checkpoint.tau, data);
}

nlohmann::json report_to_json(const EvaluationReport& report) {
    nlohmann::json j;
    const auto set = [&](const char* name, double value) {
        if (report.skipped.count(name)) {
            j[name] = nullptr;
        } else {
            j[name] = value;
        }
    };
    set("accuracy", report.accuracy);
    j["permutation"] = report.permutation;
    set("mae_ef", report.mae_ef);
    set("mae_symm", report.mae_symm);
    j["mae_acceleration"] = report.mae_acceleration;
    set("mae_state_1", report.mae_state_1);
    set("mae_state_10", report.mae_state_10);
    j["rollout_diverged"] = report.rollout_diverged;
    j["disagreement_rate"] = report.disagreement_rate;
    j["edges_evaluated"] = report.edges_evaluated;
    j["steps_evaluated"] = report.steps_evaluated;
    nlohmann::json skipped = nlohmann::json::object();
    for (const auto& [metric, reason] : report.skipped) skipped[metric] = reason;
    j["skipped"] = skipped;
    return j;
}

RunArtifacts run_evaluate(const ExperimentConfig& config) {
    const EvaluateConfig& ec = config.evaluate;
    if (ec.data.empty()) throw config_error("evaluate: 'data' is required");
    Checkpoint checkpoint = load_checkpoint(ec.checkpoint);
    TrajectoryDataset data = load_dataset(ec.data);

    const auto types = infer_types_with_checkpoint(checkpoint, data);
    const EvaluationReport report = evaluate(checkpoint.bank, data, types);

    std::ofstream out(ec.report_out);
    if (!out) throw data_error("evaluate: cannot open '" + ec.report_out + "'");
    out << report_to_json(report).dump(2) << "\n";
    out.close();

    RunArtifacts artifacts;
    artifacts.files = {ec.report_out};
    if (!ec.edges_csv.empty()) {
        std::ofstream csv(ec.edges_csv);
        if (!csv) throw data_error("evaluate: cannot open '" + ec.edges_csv + "'");
        csv << "sim,receiver,sender,predicted,truth\n";
        for (std::size_t s = 0; s < data.sims.size(); ++s) {
            const SimulationRecord& rec = data.sims[s];
            for (int i = 0; i < rec.particles; ++i) {
                for (int j = 0; j < rec.particles; ++j) {
                    const int predicted = types[s][static_cast<std::size_t>(i) * rec.particles + j];
                    if (predicted < 0) continue;
                    csv << s << "," << i << "," << j << "," << predicted << ","
                        << static_cast<int>(rec.edge_type(i, j)) << "\n";
                }
            }
        }
        artifacts.files.push_back(ec.edges_csv);
    }
    artifacts.summary = report_to_json(report);
    write_manifest(ec.report_out + ".manifest.json", "evaluate", config.raw, artifacts.files);
    artifacts.files.push_back(ec.report_out + ".manifest.json");
    return artifacts;
}

RunArtifacts run_export_forces(const std::string& checkpoint_path, double lo, double hi,
                               int points_per_axis, const std::string& out_csv) {
    Checkpoint checkpoint = load_checkpoint(checkpoint_path);
    const auto rows = force_grid(checkpoint.bank, lo, hi, points_per_axis);
    std::ofstream out(out_csv);
    if (!out) throw data_error("export-forces: cannot open '" + out_csv + "'");
    out.precision(17);
    out << "type,x,y,fx,fy\n";
    for (const ForceGridRow& row : rows) {
        out << row.type << "," << row.x << "," << row.y << "," << row.fx << "," << row.fy << "\n";
    }
    out.close();

    RunArtifacts artifacts;
    artifacts.files = {out_csv};
    artifacts.summary["rows"] = rows.size();
    nlohmann::json config;
    config["checkpoint"] = checkpoint_path;
    config["grid"] = {{"lo", lo}, {"hi", hi}, {"points_per_axis", points_per_axis}};
    write_manifest(out_csv + ".manifest.json", "export-forces", config, artifacts.files);
    artifacts.files.push_back(out_csv + ".manifest.json");
    return artifacts;
}

RunArtifacts run_inject_noise(const std::string& dataset_path, double beta, std::uint64_t seed,
                              const std::string& out_path) {
    TrajectoryDataset data = load_dataset(dataset_path);
    NoisyDataset noisy = inject_noise(data, beta, seed);
    save_dataset(out_path, noisy.data);

    RunArtifacts artifacts;
    artifacts.files = {out_path};
    artifacts.summary["noise_level"] = noisy.noise_level;
    artifacts.summary["beta"] = beta;
    nlohmann::json config;
    config["dataset"] = dataset_path;
    config["beta"] = beta;
    config["seed"] = seed;
    write_manifest(out_path + ".manifest.json", "inject-noise", config, artifacts.files);
    artifacts.files.push_back(out_path + ".manifest.json");
    return artifacts;
}

RunArtifacts run_export_data(const std::string& dataset_path, const std::string& block, int sim,
                             const std::string& out_csv) {
    TrajectoryDataset data = load_dataset(dataset_path);
    std::ofstream out(out_csv);
    if (!out) throw data_error("export-data: cannot open '" + out_csv + "'");
    export_block_csv(data, block, sim, out);
    out.close();

    RunArtifacts artifacts;
    artifacts.files = {out_csv};
    artifacts.summary["block"] = block;
    return artifacts;
}

}  // namespace cri
