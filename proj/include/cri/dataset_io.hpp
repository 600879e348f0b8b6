#pragma once

#include <cstdint>
#include <iosfwd>
#include <string>

#include <json.hpp>

#include "cri/sim.hpp"

namespace cri {

// Dataset files carry a single JSON header line (counts, dims, kind, dt,
// seed, split tag, simulation spec) followed by raw little-endian blocks per
// simulation, in order: positions, velocities, masses, increments, edge
// types as i8, then neighbor lists as u32 when per-step lists exist.
// Loading what was saved is bit-exact.
void save_dataset(const std::string& path, const TrajectoryDataset& dataset);
TrajectoryDataset load_dataset(const std::string& path);

nlohmann::json spec_to_json(const ParticleSystemSpec& spec);
ParticleSystemSpec spec_from_json(const nlohmann::json& j);

// One CSV row per (step, particle) for state blocks, per particle for
// masses, per (receiver, sender) for edge types, per (step, particle, slot)
// for neighbors.
void export_block_csv(const TrajectoryDataset& dataset, const std::string& block, int sim,
                      std::ostream& out);

// FNV-1a over the file bytes, for run manifests.
std::uint64_t fnv1a_file(const std::string& path);

}  // namespace cri
