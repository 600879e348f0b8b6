#pragma once

#include <map>
#include <string>
#include <vector>

#include <json.hpp>

#include "cri/decoder.hpp"

namespace cri {

// Trained model container: a JSON header line (method, decoder, priors,
// provenance) followed by one CRI1 block per edge network and, for the
// message-passing form, the node network block.
struct Checkpoint {
    std::string method = "cri";  // cri | var-cri | evolving-cri | teacher
    EdgeModelBank bank;
    std::vector<double> tau;                   // cri / evolving-cri
    std::map<int, std::vector<double>> omega;  // var-cri group priors by size
    int mean_field_groups = 0;                 // var-cri
    int mean_field_sweeps = 3;                 // var-cri
    int dims = 2;
    int epochs_completed = 0;
    nlohmann::json config_echo;  // the config that produced this model
};

void save_checkpoint(const std::string& path, const Checkpoint& checkpoint);
Checkpoint load_checkpoint(const std::string& path);

}  // namespace cri
