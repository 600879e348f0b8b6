#include "cri/dataset_io.hpp"

#include <fstream>
#include <ostream>

namespace cri {

namespace {

template <typename T>
void write_block(std::ostream& out, const std::vector<T>& block) {
    out.write(reinterpret_cast<const char*>(block.data()),
              static_cast<std::streamsize>(block.size() * sizeof(T)));
}

template <typename T>
void read_block(std::istream& in, std::vector<T>& block, std::size_t count) {
    block.resize(count);
    in.read(reinterpret_cast<char*>(block.data()),
            static_cast<std::streamsize>(count * sizeof(T)));
    if (!in) throw data_error("dataset: truncated block");
}

}  // namespace

nlohmann::json spec_to_json(const ParticleSystemSpec& spec) {
    nlohmann::json j;
    j["kind"] = to_string(spec.kind);
    j["particles"] = spec.particles;
    j["type_count"] = spec.type_count;
    j["dims"] = spec.dims;
    j["dt"] = spec.dt;
    j["steps"] = spec.steps;
    j["downsample"] = spec.downsample;
    j["neighbor_rule"] = spec.neighbor_rule == NeighborRule::KNearest ? "k-nearest" : "all-pairs";
    j["neighbor_count"] = spec.neighbor_count;
    if (spec.kind == SystemKind::Spring) {
        nlohmann::json springs = nlohmann::json::array();
        for (const auto& s : spec.spring_types) {
            springs.push_back({{"stiffness", s.stiffness}, {"balance_length", s.balance_length}});
        }
        j["spring_types"] = springs;
    }
    j["charge_coupling"] = spec.charge_coupling;
    j["charge_softening"] = spec.charge_softening;
    j["lj_sigma"] = spec.lj_sigma;
    j["lj_epsilon"] = spec.lj_epsilon;
    j["dipole_constant"] = spec.dipole_constant;
    return j;
}

ParticleSystemSpec spec_from_json(const nlohmann::json& j) {
    ParticleSystemSpec spec;
    spec.kind = system_kind_from_string(j.at("kind").get<std::string>());
    spec.particles = j.at("particles").get<int>();
    spec.type_count = j.at("type_count").get<int>();
    spec.dims = j.at("dims").get<int>();
    spec.dt = j.at("dt").get<double>();
    spec.steps = j.at("steps").get<int>();
    spec.downsample = j.value("downsample", 1);
    spec.neighbor_rule = j.value("neighbor_rule", std::string("all-pairs")) == "k-nearest"
                             ? NeighborRule::KNearest
                             : NeighborRule::AllPairs;
    spec.neighbor_count = j.value("neighbor_count", 5);
    if (j.contains("spring_types")) {
        spec.spring_types.clear();
        for (const auto& s : j.at("spring_types")) {
            spec.spring_types.push_back(
                {s.at("stiffness").get<double>(), s.at("balance_length").get<double>()});
        }
    }
    spec.charge_coupling = j.value("charge_coupling", 1.0);
    spec.charge_softening = j.value("charge_softening", 0.01);
    spec.lj_sigma = j.value("lj_sigma", 0.3);
    spec.lj_epsilon = j.value("lj_epsilon", 1e-5);
    spec.dipole_constant = j.value("dipole_constant", 0.02);
    return spec;
}

void save_dataset(const std::string& path, const TrajectoryDataset& dataset) {
    dataset.validate();
    std::ofstream out(path, std::ios::binary);
    if (!out) throw data_error("save_dataset: cannot open '" + path + "' for writing");

    nlohmann::json header;
    header["format"] = "cri-dataset";
    header["version"] = 1;
    header["kind"] = to_string(dataset.kind);
    header["sims"] = dataset.sims.size();
    header["steps"] = dataset.steps();
    header["particles"] = dataset.particles;
    header["dims"] = dataset.dims;
    header["type_count"] = dataset.type_count;
    header["dt"] = dataset.dt;
    header["seed"] = dataset.seed;
    header["split"] = dataset.split;
    header["contiguous_steps"] = dataset.contiguous_steps;
    header["neighbor_count"] = dataset.neighbor_count;
    header["spec"] = spec_to_json(dataset.particle_spec);
    out << header.dump() << "\n";

    for (const SimulationRecord& rec : dataset.sims) {
        if (rec.steps != dataset.steps()) {
            throw data_error("save_dataset: simulations disagree on step count");
        }
        write_block(out, rec.positions);
        write_block(out, rec.velocities);
        write_block(out, rec.masses);
        write_block(out, rec.increments);
        write_block(out, rec.edge_types);
        if (dataset.neighbor_count > 0) write_block(out, rec.neighbor_lists);
    }
    if (!out) throw data_error("save_dataset: write failed for '" + path + "'");
}

TrajectoryDataset load_dataset(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw data_error("load_dataset: cannot open '" + path + "'");
    std::string header_line;
    if (!std::getline(in, header_line)) throw data_error("load_dataset: missing header line");
    nlohmann::json header;
    try {
        header = nlohmann::json::parse(header_line);
    } catch (const nlohmann::json::exception& e) {
        throw data_error("load_dataset: bad header: " + std::string(e.what()));
    }
    if (header.value("format", "") != "cri-dataset") {
        throw data_error("load_dataset: '" + path + "' is not a cri dataset");
    }

    TrajectoryDataset dataset;
    dataset.kind = system_kind_from_string(header.at("kind").get<std::string>());
    dataset.dims = header.at("dims").get<int>();
    dataset.type_count = header.at("type_count").get<int>();
    dataset.particles = header.at("particles").get<int>();
    dataset.dt = header.at("dt").get<double>();
    dataset.seed = header.at("seed").get<std::uint64_t>();
    dataset.split = header.value("split", "");
    dataset.contiguous_steps = header.value("contiguous_steps", true);
    dataset.neighbor_count = header.value("neighbor_count", 0);
    dataset.particle_spec = spec_from_json(header.at("spec"));

    const auto sims = header.at("sims").get<std::size_t>();
    const auto steps = header.at("steps").get<int>();
    const std::size_t n = static_cast<std::size_t>(dataset.particles);
    const std::size_t state_block = static_cast<std::size_t>(steps) * n * dataset.dims;
    dataset.sims.resize(sims);
    for (auto& rec : dataset.sims) {
        rec.particles = dataset.particles;
        rec.dims = dataset.dims;
        rec.steps = steps;
        rec.neighbor_count = dataset.neighbor_count;
        read_block(in, rec.positions, state_block);
        read_block(in, rec.velocities, state_block);
        read_block(in, rec.masses, n);
        read_block(in, rec.increments, state_block);
        read_block(in, rec.edge_types, n * n);
        if (dataset.neighbor_count > 0) {
            read_block(in, rec.neighbor_lists,
                       static_cast<std::size_t>(steps) * n * dataset.neighbor_count);
        }
    }
    dataset.validate();
    return dataset;
}

void export_block_csv(const TrajectoryDataset& dataset, const std::string& block, int sim,
                      std::ostream& out) {
    if (sim < 0 || sim >= static_cast<int>(dataset.sims.size())) {
        throw config_error("export_block_csv: simulation index out of range");
    }
    const SimulationRecord& rec = dataset.sims[static_cast<std::size_t>(sim)];
    out.precision(17);
    const int d = rec.dims;
    if (block == "positions" || block == "velocities" || block == "increments") {
        const std::vector<double>& values = block == "positions"    ? rec.positions
                                            : block == "velocities" ? rec.velocities
                                                                    : rec.increments;
        out << "step,particle";
        for (int c = 0; c < d; ++c) out << ",c" << c;
        out << "\n";
        for (int t = 0; t < rec.steps; ++t) {
            for (int i = 0; i < rec.particles; ++i) {
                out << t << "," << i;
                for (int c = 0; c < d; ++c) {
                    out << "," << values[(static_cast<std::size_t>(t) * rec.particles + i) * d + c];
                }
                out << "\n";
            }
        }
    } else if (block == "masses") {
        out << "particle,mass\n";
        for (int i = 0; i < rec.particles; ++i) {
            out << i << "," << rec.masses[static_cast<std::size_t>(i)] << "\n";
        }
    } else if (block == "edge_types") {
        out << "receiver,sender,type\n";
        for (int i = 0; i < rec.particles; ++i) {
            for (int j = 0; j < rec.particles; ++j) {
                out << i << "," << j << "," << static_cast<int>(rec.edge_type(i, j)) << "\n";
            }
        }
    } else if (block == "neighbors") {
        if (rec.neighbor_count == 0) {
            throw config_error("export_block_csv: dataset has no neighbor lists");
        }
        out << "step,particle,slot,neighbor\n";
        for (int t = 0; t < rec.steps; ++t) {
            for (int i = 0; i < rec.particles; ++i) {
                const std::size_t base =
                    (static_cast<std::size_t>(t) * rec.particles + i) * rec.neighbor_count;
                for (int s = 0; s < rec.neighbor_count; ++s) {
                    out << t << "," << i << "," << s << "," << rec.neighbor_lists[base + s] << "\n";
                }
            }
        }
    } else {
        throw config_error("export_block_csv: unknown block '" + block +
                           "' (positions, velocities, masses, increments, edge_types, neighbors)");
    }
}

std::uint64_t fnv1a_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw data_error("fnv1a_file: cannot open '" + path + "'");
    std::uint64_t hash = 0xcbf29ce484222325ULL;
    char buffer[65536];
    while (in) {
        in.read(buffer, sizeof(buffer));
        const std::streamsize got = in.gcount();
        for (std::streamsize i = 0; i < got; ++i) {
            hash ^= static_cast<unsigned char>(buffer[i]);
            hash *= 0x100000001b3ULL;
        }
    }
    return hash;
}

}  // namespace cri
