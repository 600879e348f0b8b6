#include "cri/checkpoint.hpp"

#include <fstream>

namespace cri {

void save_checkpoint(const std::string& path, const Checkpoint& checkpoint) {
    checkpoint.bank.validate(checkpoint.dims);
    std::ofstream out(path, std::ios::binary);
    if (!out) throw data_error("save_checkpoint: cannot open '" + path + "' for writing");

    nlohmann::json header;
    header["format"] = "cri-checkpoint";
    header["version"] = 1;
    header["method"] = checkpoint.method;
    header["decoder"] = to_string(checkpoint.bank.kind);
    header["layout"] = to_string(checkpoint.bank.layout);
    header["sigma_sq"] = checkpoint.bank.sigma_sq;
    header["type_count"] = checkpoint.bank.type_count();
    header["dims"] = checkpoint.dims;
    header["tau"] = checkpoint.tau;
    header["epochs_completed"] = checkpoint.epochs_completed;
    if (!checkpoint.omega.empty()) {
        nlohmann::json omega;
        for (const auto& [size, table] : checkpoint.omega) {
            omega[std::to_string(size)] = table;
        }
        header["omega"] = omega;
        header["mean_field_groups"] = checkpoint.mean_field_groups;
        header["mean_field_sweeps"] = checkpoint.mean_field_sweeps;
    }
    header["config"] = checkpoint.config_echo;
    out << header.dump() << "\n";

    for (const auto& params : checkpoint.bank.edge_params) {
        save_mlp(out, checkpoint.bank.edge_spec, params);
    }
    if (checkpoint.bank.kind == DecoderKind::MessagePassing) {
        save_mlp(out, checkpoint.bank.node_spec, checkpoint.bank.node_params);
    }
    if (!out) throw data_error("save_checkpoint: write failed for '" + path + "'");
}

Checkpoint load_checkpoint(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw data_error("load_checkpoint: cannot open '" + path + "'");
    std::string header_line;
    if (!std::getline(in, header_line)) throw data_error("load_checkpoint: missing header");
    nlohmann::json header;
    try {
        header = nlohmann::json::parse(header_line);
    } catch (const nlohmann::json::exception& e) {
        throw data_error("load_checkpoint: bad header: " + std::string(e.what()));
    }
    if (header.value("format", "") != "cri-checkpoint") {
        throw data_error("load_checkpoint: '" + path + "' is not a cri checkpoint");
    }

    Checkpoint checkpoint;
    checkpoint.method = header.at("method").get<std::string>();
    checkpoint.dims = header.at("dims").get<int>();
    checkpoint.bank.kind = decoder_kind_from_string(header.at("decoder").get<std::string>());
    checkpoint.bank.layout = feature_layout_from_string(header.at("layout").get<std::string>());
    checkpoint.bank.sigma_sq = header.at("sigma_sq").get<double>();
    checkpoint.tau = header.at("tau").get<std::vector<double>>();
    checkpoint.epochs_completed = header.value("epochs_completed", 0);
    if (header.contains("omega")) {
        for (const auto& [key, table] : header.at("omega").items()) {
            checkpoint.omega[std::stoi(key)] = table.get<std::vector<double>>();
        }
        checkpoint.mean_field_groups = header.value("mean_field_groups", 0);
        checkpoint.mean_field_sweeps = header.value("mean_field_sweeps", 3);
    }
    if (header.contains("config")) checkpoint.config_echo = header.at("config");

    const int type_count = header.at("type_count").get<int>();
    for (int k = 0; k < type_count; ++k) {
        auto [spec, params] = load_mlp(in);
        if (k == 0) {
            checkpoint.bank.edge_spec = spec;
        } else if (!(spec == checkpoint.bank.edge_spec)) {
            throw data_error("load_checkpoint: edge networks disagree on architecture");
        }
        checkpoint.bank.edge_params.push_back(std::move(params));
    }
    if (checkpoint.bank.kind == DecoderKind::MessagePassing) {
        auto [spec, params] = load_mlp(in);
        checkpoint.bank.node_spec = spec;
        checkpoint.bank.node_params = std::move(params);
    }
    checkpoint.bank.validate(checkpoint.dims);
    return checkpoint;
}

}  // namespace cri
