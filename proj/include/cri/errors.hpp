#pragma once

#include <stdexcept>
#include <string>

namespace cri {

// Error families map onto CLI exit codes: config 2, data 3, numeric 4.

class config_error : public std::runtime_error {
public:
    explicit config_error(const std::string& what) : std::runtime_error(what) {}
};

// Malformed or incompatible datasets, checkpoints and other artifacts.
class data_error : public std::runtime_error {
public:
    explicit data_error(const std::string& what) : std::runtime_error(what) {}
};

// Non-finite values, diverging integrations, collapsed posteriors.
class numeric_error : public std::runtime_error {
public:
    explicit numeric_error(const std::string& what) : std::runtime_error(what) {}
};

// Wrong vector/matrix dimensions at a module boundary.
class shape_error : public config_error {
public:
    explicit shape_error(const std::string& what) : config_error(what) {}
};

// A requested enumeration or grid exceeds its configured cap.
class capacity_error : public config_error {
public:
    explicit capacity_error(const std::string& what) : config_error(what) {}
};

}  // namespace cri
