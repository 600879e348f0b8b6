#include "cri/config.hpp"

#include <fstream>

#include "cri/dataset_io.hpp"

namespace cri {

MlpSpec default_edge_spec(SystemKind kind, int dims) {
    MlpSpec spec;
    spec.activation = Activation::Tanh;
    const int in = edge_feature_width(default_feature_layout(kind), dims);
    switch (kind) {
        case SystemKind::Spring:
        case SystemKind::Teacher:
            spec.widths = {in, 256, 256, dims};
            break;
        case SystemKind::Charge:
            spec.widths = {in, 256, 256, 256, 256, dims};
            break;
        case SystemKind::Crystallization:
            spec.widths = {in, 300, 300, 300, 300, dims};
            break;
        case SystemKind::Var:
            spec.widths = {in, 64, 64, 16};
            break;
    }
    return spec;
}

double default_sigma_sq(SystemKind kind) {
    switch (kind) {
        case SystemKind::Charge: return 0.05;
        case SystemKind::Crystallization: return 0.001;
        default: return 0.1;
    }
}

MlpSpec default_node_spec(int message_width, FeatureLayout layout, int dims) {
    MlpSpec spec;
    spec.activation = Activation::Tanh;
    spec.widths = {message_width + node_feature_width(layout, dims), 256, dims};
    return spec;
}

VarSpec var_preset(const std::string& name, int steps, double noise_std) {
    VarSpec spec;
    spec.steps = steps;
    spec.noise_std = noise_std;
    // Approximations of the benchmark causal graphs (the published figures
    // are not machine-readable): a) a directed chain, b) a star driven by
    // one hub, c) two disconnected cycles. All with self loops.
    auto init = [&](int n) {
        spec.series_count = n;
        spec.adjacency.assign(static_cast<std::size_t>(n) * n, 0);
        spec.coefficients.assign(static_cast<std::size_t>(n) * n, 0.0);
        for (int i = 0; i < n; ++i) {
            spec.adjacency[static_cast<std::size_t>(i) * n + i] = 1;
            spec.coefficients[static_cast<std::size_t>(i) * n + i] = 0.4;
        }
    };
    auto link = [&](int receiver, int sender, double weight) {
        spec.adjacency[static_cast<std::size_t>(receiver) * spec.series_count + sender] = 1;
        spec.coefficients[static_cast<std::size_t>(receiver) * spec.series_count + sender] = weight;
    };
    if (name == "var-a") {
        init(5);
        for (int i = 1; i < 5; ++i) link(i, i - 1, 0.45);
    } else if (name == "var-b") {
        init(5);
        for (int i = 1; i < 5; ++i) link(i, 0, 0.4);
    } else if (name == "var-c") {
        init(6);
        link(1, 0, 0.4);
        link(2, 1, 0.4);
        link(0, 2, 0.4);
        link(4, 3, 0.4);
        link(5, 4, 0.4);
        link(3, 5, 0.4);
    } else {
        throw config_error("var_preset: unknown preset '" + name + "' (var-a, var-b, var-c)");
    }
    spec.validate();
    return spec;
}

namespace {

ParticleSystemSpec spec_from_config(SystemKind kind, const nlohmann::json& sim) {
    ParticleSystemSpec spec;
    switch (kind) {
        case SystemKind::Spring:
        case SystemKind::Teacher:
            spec = ParticleSystemSpec::spring(sim.value("particles", 5), sim.value("type_count", 2));
            spec.kind = kind;
            break;
        case SystemKind::Charge:
            spec = ParticleSystemSpec::charge(sim.value("particles", 5));
            break;
        case SystemKind::Crystallization:
            spec = ParticleSystemSpec::crystallization(sim.value("particles", 100),
                                                       sim.value("steps", 2000));
            break;
        case SystemKind::Var:
            spec.kind = SystemKind::Var;
            return spec;
    }
    if (sim.contains("steps")) spec.steps = sim.at("steps").get<int>();
    if (sim.contains("dt")) spec.dt = sim.at("dt").get<double>();
    if (sim.contains("downsample")) spec.downsample = sim.at("downsample").get<int>();
    if (sim.contains("neighbor_count")) spec.neighbor_count = sim.at("neighbor_count").get<int>();
    if (sim.contains("spring_types")) {
        spec.spring_types.clear();
        for (const auto& s : sim.at("spring_types")) {
            spec.spring_types.push_back(
                {s.at("stiffness").get<double>(), s.at("balance_length").get<double>()});
        }
        spec.type_count = static_cast<int>(spec.spring_types.size());
    }
    spec.validate();
    return spec;
}

}  // namespace

ExperimentConfig ExperimentConfig::from_json(const nlohmann::json& input) {
    // run manifests embed the config under "config"; accept both shapes
    const nlohmann::json& j = input.contains("config") && input.at("config").is_object()
                                  ? input.at("config")
                                  : input;
    ExperimentConfig config;
    config.raw = j;
    if (!j.contains("seed")) {
        throw config_error("config: 'seed' is required; runs never draw entropy implicitly");
    }
    config.seed = j.at("seed").get<std::uint64_t>();
    config.kind = system_kind_from_string(j.value("kind", "spring"));

    const nlohmann::json sim = j.value("simulate", nlohmann::json::object());
    config.simulate.spec = spec_from_config(config.kind, sim);
    config.simulate.train_sims = sim.value("train_sims", 10);
    config.simulate.valid_sims = sim.value("valid_sims", 2);
    config.simulate.test_sims = sim.value("test_sims", 2);
    if (sim.contains("split_ratio") && !sim.at("split_ratio").is_null()) {
        config.simulate.split_ratio = sim.at("split_ratio").get<std::vector<double>>();
        if (config.simulate.split_ratio->size() != 3) {
            throw config_error("config: split_ratio needs exactly three entries");
        }
    }
    config.simulate.split_mode = sim.value("split_mode", "interpolation");
    config.simulate.noise_beta = sim.value("noise_beta", 0.0);
    config.simulate.out_dir = sim.value("out_dir", "data");

    if (config.kind == SystemKind::Var) {
        VarSpec var;
        const nlohmann::json vj = j.value("var", nlohmann::json::object());
        if (vj.contains("preset")) {
            var = var_preset(vj.at("preset").get<std::string>(), sim.value("steps", 100),
                             vj.value("noise_std", 0.1));
        } else {
            var.series_count = vj.at("series").get<int>();
            var.steps = sim.value("steps", 100);
            var.noise_std = vj.value("noise_std", 0.1);
            const auto rows = vj.at("adjacency");
            const auto coef = vj.at("coefficients");
            const int n = var.series_count;
            var.adjacency.assign(static_cast<std::size_t>(n) * n, 0);
            var.coefficients.assign(static_cast<std::size_t>(n) * n, 0.0);
            for (int i = 0; i < n; ++i) {
                for (int jj = 0; jj < n; ++jj) {
                    var.adjacency[static_cast<std::size_t>(i) * n + jj] =
                        rows.at(i).at(jj).get<int>() != 0 ? 1 : 0;
                    var.coefficients[static_cast<std::size_t>(i) * n + jj] =
                        coef.at(i).at(jj).get<double>();
                }
            }
            var.validate();
        }
        config.simulate.var = var;
    }

    const nlohmann::json train = j.value("train", nlohmann::json::object());
    config.train.method = train.value("method", "cri");
    config.train.decoder = decoder_kind_from_string(train.value(
        "decoder", config.kind == SystemKind::Var ? "message-passing" : "physics-induced"));
    config.train.layout = train.contains("layout")
                              ? feature_layout_from_string(train.at("layout").get<std::string>())
                              : default_feature_layout(config.kind);
    config.train.sigma_sq = train.value("sigma_sq", default_sigma_sq(config.kind));
    const int dims = config.kind == SystemKind::Var ? 1 : 2;
    if (train.contains("edge_widths")) {
        config.train.edge_spec.widths = train.at("edge_widths").get<std::vector<int>>();
    } else {
        config.train.edge_spec = default_edge_spec(config.kind, dims);
    }
    config.train.edge_spec.activation =
        train.value("activation", "tanh") == "relu" ? Activation::Relu : Activation::Tanh;
    config.train.message_width = train.value("message_width", 16);
    if (config.train.decoder == DecoderKind::MessagePassing) {
        if (train.contains("node_widths")) {
            config.train.node_spec.widths = train.at("node_widths").get<std::vector<int>>();
        } else {
            config.train.node_spec =
                default_node_spec(config.train.edge_spec.output_width(), config.train.layout, dims);
        }
        config.train.node_spec.activation = config.train.edge_spec.activation;
    } else if (config.train.edge_spec.output_width() != dims) {
        throw config_error("config: physics-induced edge networks must end in " +
                           std::to_string(dims) + " outputs");
    }

    TrainControl& control = config.train.control;
    control.epochs = train.value("epochs", 500);
    control.learning_rate = train.value("learning_rate", 0.001);
    control.theta_batch_steps = train.value("theta_batch_steps", 0);
    control.ascent_guard = train.value("ascent_guard", true);
    control.validate_every = train.value("validate_every", 1);
    control.early_stop_patience = train.value("early_stop_patience", 0);
    control.seed = config.seed;
    control.realization_cap = train.value("realization_cap", default_realization_cap);
    control.mean_field_groups = train.value("groups", 2);
    control.mean_field_sweeps = train.value("sweeps", 3);
    config.train.train_data = train.value("train_data", "");
    config.train.valid_data = train.value("valid_data", "");
    config.train.checkpoint_out = train.value("checkpoint", "model.ckpt");
    config.train.history_out = train.value("history", "history.csv");
    config.train.resume = train.value("resume", "");

    const nlohmann::json eval = j.value("evaluate", nlohmann::json::object());
    config.evaluate.checkpoint = eval.value("checkpoint", config.train.checkpoint_out);
    config.evaluate.data = eval.value("data", "");
    config.evaluate.report_out = eval.value("report", "report.json");
    config.evaluate.edges_csv = eval.value("edges_csv", "");
    return config;
}

ExperimentConfig ExperimentConfig::from_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw config_error("config: cannot open '" + path + "'");
    nlohmann::json j;
    try {
        in >> j;
    } catch (const nlohmann::json::exception& e) {
        throw config_error("config: parse error in '" + path + "': " + e.what());
    }
    return from_json(j);
}

}  // namespace cri
