#pragma once

#include <cstdint>
#include <iosfwd>
#include <utility>
#include <vector>

#include <Eigen/Dense>

#include "cri/errors.hpp"
#include "cri/rng.hpp"

namespace cri {

enum class Activation : std::uint8_t { Tanh = 0, Relu = 1 };

// Shape of a dense network: layer widths from input to output. The
// activation is applied to every hidden layer; the output stays linear.
struct MlpSpec {
    std::vector<int> widths;
    Activation activation = Activation::Tanh;

    int input_width() const { return widths.front(); }
    int output_width() const { return widths.back(); }
    int layer_count() const { return static_cast<int>(widths.size()) - 1; }
    std::size_t param_count() const;
    void validate() const;

    bool operator==(const MlpSpec&) const = default;
};

// All weights and biases of one network as a flat array. Layout, fixed for
// checkpoints: layer by layer, weights before biases, weight matrices
// row-major with one row per output unit.
using ParamVector = std::vector<double>;

ParamVector zero_params(const MlpSpec& spec);

// Uniform weights in +-sqrt(6 / (fan_in + fan_out)), zero biases.
ParamVector init_params(const MlpSpec& spec, Rng& rng);

std::vector<double> mlp_forward(const MlpSpec& spec, const ParamVector& params,
                                const std::vector<double>& input);

// Batched forward pass, one sample per column.
Eigen::MatrixXd mlp_forward_columns(const MlpSpec& spec, const ParamVector& params,
                                    const Eigen::Ref<const Eigen::MatrixXd>& inputs);

struct MlpGradient {
    ParamVector params;
    std::vector<double> input;
};

// Vector-Jacobian product of `upstream` against both the parameters and the
// input of one forward evaluation.
MlpGradient mlp_gradient(const MlpSpec& spec, const ParamVector& params,
                         const std::vector<double>& input,
                         const std::vector<double>& upstream);

// Batched reverse sweep. When `param_grad` is set, the parameter VJP summed
// over all columns is accumulated into it (+=); when `input_grad` is set it
// receives one gradient column per sample.
void mlp_vjp_columns(const MlpSpec& spec, const ParamVector& params,
                     const Eigen::Ref<const Eigen::MatrixXd>& inputs,
                     const Eigen::Ref<const Eigen::MatrixXd>& upstreams,
                     ParamVector* param_grad, Eigen::MatrixXd* input_grad);

inline void mlp_param_gradient_columns(const MlpSpec& spec, const ParamVector& params,
                                       const Eigen::Ref<const Eigen::MatrixXd>& inputs,
                                       const Eigen::Ref<const Eigen::MatrixXd>& upstreams,
                                       ParamVector& grad) {
    mlp_vjp_columns(spec, params, inputs, upstreams, &grad, nullptr);
}

struct AdamState {
    std::vector<double> first_moment;
    std::vector<double> second_moment;
    std::int64_t step = 0;
    double learning_rate = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double epsilon = 1e-8;

    AdamState() = default;
    explicit AdamState(std::size_t size, double lr = 1e-3);
};

// Bias-corrected Adam descent step; pass the gradient of the loss being
// minimized. Throws numeric_error on non-finite gradient components.
void adam_step(ParamVector& params, const ParamVector& grad, AdamState& state);

// Checkpoint block: magic "CRI1", u32 width count, u32 widths, u8 activation
// tag, then the little-endian f64 parameter array. Bit-exact round trip.
void save_mlp(std::ostream& out, const MlpSpec& spec, const ParamVector& params);
std::pair<MlpSpec, ParamVector> load_mlp(std::istream& in);

}  // namespace cri
