#include "cri/mlp.hpp"

#include <bit>
#include <cmath>
#include <cstring>
#include <istream>
#include <ostream>
#include <string>

static_assert(std::endian::native == std::endian::little,
              "checkpoint and dataset formats assume a little-endian host");

#if defined(__AVX512F__) && defined(__GLIBC__)
#include <immintrin.h>
extern "C" __m512d _ZGVeN8v_tanh(__m512d);
#define CRI_HAVE_VECTOR_TANH 1
#endif

namespace cri {

namespace {

using RowMajorMap = Eigen::Map<
    const Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>;
using VectorMap = Eigen::Map<const Eigen::VectorXd>;

void apply_activation(Eigen::MatrixXd& values, Activation activation) {
    double* data = values.data();
    const Eigen::Index size = values.size();
    if (activation == Activation::Tanh) {
        Eigen::Index i = 0;
#ifdef CRI_HAVE_VECTOR_TANH
        for (; i + 8 <= size; i += 8) {
            _mm512_storeu_pd(data + i, _ZGVeN8v_tanh(_mm512_loadu_pd(data + i)));
        }
#endif
        for (; i < size; ++i) data[i] = std::tanh(data[i]);
    } else {
#pragma omp simd
        for (Eigen::Index i = 0; i < size; ++i) data[i] = data[i] > 0.0 ? data[i] : 0.0;
    }
}

// Large per-chunk buffers are reused across calls; fresh 8 MB allocations per
// chunk would otherwise go through mmap and fault their pages every time.
std::vector<Eigen::MatrixXd>& scratch_pool() {
    thread_local std::vector<Eigen::MatrixXd> pool;
    return pool;
}

}  // namespace

std::size_t MlpSpec::param_count() const {
    std::size_t total = 0;
    for (std::size_t l = 0; l + 1 < widths.size(); ++l) {
        total += static_cast<std::size_t>(widths[l]) * widths[l + 1] + widths[l + 1];
    }
    return total;
}

void MlpSpec::validate() const {
    if (widths.size() < 2) {
        throw config_error("MlpSpec: need at least input and output widths");
    }
    for (int w : widths) {
        if (w < 1) throw config_error("MlpSpec: all widths must be >= 1");
    }
}

ParamVector zero_params(const MlpSpec& spec) {
    spec.validate();
    return ParamVector(spec.param_count(), 0.0);
}

ParamVector init_params(const MlpSpec& spec, Rng& rng) {
    spec.validate();
    ParamVector params(spec.param_count());
    std::size_t offset = 0;
    for (int l = 0; l < spec.layer_count(); ++l) {
        const int fan_in = spec.widths[l];
        const int fan_out = spec.widths[l + 1];
        const double bound = std::sqrt(6.0 / (fan_in + fan_out));
        for (int i = 0; i < fan_in * fan_out; ++i) {
            params[offset++] = rng.uniform(-bound, bound);
        }
        offset += static_cast<std::size_t>(fan_out);  // biases stay zero
    }
    return params;
}

Eigen::MatrixXd mlp_forward_columns(const MlpSpec& spec, const ParamVector& params,
                                    const Eigen::Ref<const Eigen::MatrixXd>& inputs) {
    spec.validate();
    if (params.size() != spec.param_count()) {
        throw shape_error("mlp_forward: parameter vector has length " +
                          std::to_string(params.size()) + ", spec needs " +
                          std::to_string(spec.param_count()));
    }
    if (inputs.rows() != spec.input_width()) {
        throw shape_error("mlp_forward: input width " + std::to_string(inputs.rows()) +
                          " does not match spec input width " +
                          std::to_string(spec.input_width()));
    }
    auto& pool = scratch_pool();
    if (pool.size() < 2) pool.resize(2);
    Eigen::MatrixXd& values = pool[0];
    Eigen::MatrixXd& next = pool[1];
    values = inputs;
    std::size_t offset = 0;
    for (int l = 0; l < spec.layer_count(); ++l) {
        const int in = spec.widths[l];
        const int out = spec.widths[l + 1];
        RowMajorMap weights(params.data() + offset, out, in);
        VectorMap bias(params.data() + offset + static_cast<std::size_t>(in) * out, out);
        offset += static_cast<std::size_t>(in) * out + out;
        next.resize(out, values.cols());
        next.noalias() = weights * values;
        next.colwise() += bias;
        if (l + 1 < spec.layer_count()) apply_activation(next, spec.activation);
        values.swap(next);
    }
    return values;
}

std::vector<double> mlp_forward(const MlpSpec& spec, const ParamVector& params,
                                const std::vector<double>& input) {
    if (static_cast<int>(input.size()) != spec.input_width()) {
        throw shape_error("mlp_forward: input has length " + std::to_string(input.size()) +
                          ", spec expects " + std::to_string(spec.input_width()));
    }
    const Eigen::Map<const Eigen::MatrixXd> column(input.data(),
                                                   static_cast<Eigen::Index>(input.size()), 1);
    const Eigen::MatrixXd result = mlp_forward_columns(spec, params, column);
    return std::vector<double>(result.data(), result.data() + result.rows());
}

void mlp_vjp_columns(const MlpSpec& spec, const ParamVector& params,
                     const Eigen::Ref<const Eigen::MatrixXd>& inputs,
                     const Eigen::Ref<const Eigen::MatrixXd>& upstreams,
                     ParamVector* param_grad, Eigen::MatrixXd* input_grad) {
    spec.validate();
    if (upstreams.rows() != spec.output_width() || upstreams.cols() != inputs.cols()) {
        throw shape_error("mlp_vjp: upstream shape mismatch");
    }
    if (param_grad != nullptr && param_grad->size() != spec.param_count()) {
        throw shape_error("mlp_vjp: gradient accumulator has wrong length");
    }

    // Forward, keeping every activated layer for the backward sweep. The
    // layer buffers live in the shared scratch pool behind the forward pass
    // slots, reused across chunks.
    const int layers = spec.layer_count();
    auto& pool = scratch_pool();
    const std::size_t base = 2;
    if (pool.size() < base + static_cast<std::size_t>(layers) + 3) {
        pool.resize(base + static_cast<std::size_t>(layers) + 3);
    }
    const auto activations = [&](int l) -> Eigen::MatrixXd& {
        return pool[base + static_cast<std::size_t>(l)];
    };
    activations(0) = inputs;
    std::vector<std::size_t> offsets(static_cast<std::size_t>(layers));
    std::size_t offset = 0;
    for (int l = 0; l < layers; ++l) {
        const int in = spec.widths[l];
        const int out = spec.widths[l + 1];
        offsets[l] = offset;
        RowMajorMap weights(params.data() + offset, out, in);
        VectorMap bias(params.data() + offset + static_cast<std::size_t>(in) * out, out);
        offset += static_cast<std::size_t>(in) * out + out;
        Eigen::MatrixXd& next = activations(l + 1);
        next.resize(out, inputs.cols());
        next.noalias() = weights * activations(l);
        next.colwise() += bias;
        if (l + 1 < layers) apply_activation(next, spec.activation);
    }

    Eigen::MatrixXd& delta = pool[base + static_cast<std::size_t>(layers) + 1];
    Eigen::MatrixXd& propagated = pool[base + static_cast<std::size_t>(layers) + 2];
    delta = upstreams;
    for (int l = layers - 1; l >= 0; --l) {
        const int in = spec.widths[l];
        const int out = spec.widths[l + 1];
        if (param_grad != nullptr) {
            using RowMajorMutableMap =
                Eigen::Map<Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>;
            RowMajorMutableMap weight_grad(param_grad->data() + offsets[l], out, in);
            Eigen::Map<Eigen::VectorXd> bias_grad(
                param_grad->data() + offsets[l] + static_cast<std::size_t>(in) * out, out);
            weight_grad.noalias() += delta * activations(l).transpose();
            bias_grad.noalias() += delta.rowwise().sum();
        }
        if (l > 0) {
            RowMajorMap weights(params.data() + offsets[l], out, in);
            propagated.resize(in, delta.cols());
            propagated.noalias() = weights.transpose() * delta;
            if (spec.activation == Activation::Tanh) {
                propagated.array() *= 1.0 - activations(l).array().square();
            } else {
                propagated.array() *= (activations(l).array() > 0.0).cast<double>();
            }
            delta.swap(propagated);
        } else if (input_grad != nullptr) {
            RowMajorMap weights(params.data() + offsets[l], out, in);
            input_grad->resize(in, delta.cols());
            input_grad->noalias() = weights.transpose() * delta;
        }
    }
}

MlpGradient mlp_gradient(const MlpSpec& spec, const ParamVector& params,
                         const std::vector<double>& input,
                         const std::vector<double>& upstream) {
    if (static_cast<int>(input.size()) != spec.input_width()) {
        throw shape_error("mlp_gradient: input width mismatch");
    }
    if (static_cast<int>(upstream.size()) != spec.output_width()) {
        throw shape_error("mlp_gradient: upstream width mismatch");
    }

    MlpGradient result;
    result.params = zero_params(spec);

    const Eigen::Map<const Eigen::MatrixXd> in_col(input.data(),
                                                   static_cast<Eigen::Index>(input.size()), 1);
    const Eigen::Map<const Eigen::MatrixXd> up_col(upstream.data(),
                                                   static_cast<Eigen::Index>(upstream.size()), 1);
    Eigen::MatrixXd input_grad;
    mlp_vjp_columns(spec, params, in_col, up_col, &result.params, &input_grad);
    result.input.assign(input_grad.data(), input_grad.data() + input_grad.rows());
    return result;
}

AdamState::AdamState(std::size_t size, double lr)
    : first_moment(size, 0.0), second_moment(size, 0.0), learning_rate(lr) {}

void adam_step(ParamVector& params, const ParamVector& grad, AdamState& state) {
    if (params.size() != grad.size() || params.size() != state.first_moment.size() ||
        params.size() != state.second_moment.size()) {
        throw shape_error("adam_step: parameter, gradient and moment lengths differ");
    }
    for (std::size_t i = 0; i < grad.size(); ++i) {
        if (!std::isfinite(grad[i])) {
            throw numeric_error("adam_step: non-finite gradient at index " + std::to_string(i));
        }
    }
    state.step += 1;
    const double correction1 = 1.0 - std::pow(state.beta1, static_cast<double>(state.step));
    const double correction2 = 1.0 - std::pow(state.beta2, static_cast<double>(state.step));
    for (std::size_t i = 0; i < params.size(); ++i) {
        double& m = state.first_moment[i];
        double& v = state.second_moment[i];
        m = state.beta1 * m + (1.0 - state.beta1) * grad[i];
        v = state.beta2 * v + (1.0 - state.beta2) * grad[i] * grad[i];
        const double m_hat = m / correction1;
        const double v_hat = v / correction2;
        params[i] -= state.learning_rate * m_hat / (std::sqrt(v_hat) + state.epsilon);
    }
}

namespace {

template <typename T>
void write_raw(std::ostream& out, const T& value) {
    out.write(reinterpret_cast<const char*>(&value), sizeof(T));
}

template <typename T>
T read_raw(std::istream& in) {
    T value;
    in.read(reinterpret_cast<char*>(&value), sizeof(T));
    if (!in) throw data_error("mlp checkpoint: truncated stream");
    return value;
}

}  // namespace

void save_mlp(std::ostream& out, const MlpSpec& spec, const ParamVector& params) {
    spec.validate();
    if (params.size() != spec.param_count()) {
        throw shape_error("save_mlp: parameter count does not match spec");
    }
    out.write("CRI1", 4);
    write_raw(out, static_cast<std::uint32_t>(spec.widths.size()));
    for (int w : spec.widths) write_raw(out, static_cast<std::uint32_t>(w));
    write_raw(out, static_cast<std::uint8_t>(spec.activation));
    out.write(reinterpret_cast<const char*>(params.data()),
              static_cast<std::streamsize>(params.size() * sizeof(double)));
    if (!out) throw data_error("save_mlp: write failed");
}

std::pair<MlpSpec, ParamVector> load_mlp(std::istream& in) {
    char magic[4];
    in.read(magic, 4);
    if (!in || std::memcmp(magic, "CRI1", 4) != 0) {
        throw data_error("load_mlp: bad magic, not a CRI1 block");
    }
    const auto count = read_raw<std::uint32_t>(in);
    if (count < 2 || count > 64) throw data_error("load_mlp: implausible width count");
    MlpSpec spec;
    spec.widths.resize(count);
    for (auto& w : spec.widths) w = static_cast<int>(read_raw<std::uint32_t>(in));
    const auto tag = read_raw<std::uint8_t>(in);
    if (tag > 1) throw data_error("load_mlp: unknown activation tag");
    spec.activation = static_cast<Activation>(tag);
    spec.validate();
    ParamVector params(spec.param_count());
    in.read(reinterpret_cast<char*>(params.data()),
            static_cast<std::streamsize>(params.size() * sizeof(double)));
    if (!in) throw data_error("load_mlp: truncated parameter block");
    return {std::move(spec), std::move(params)};
}

}  // namespace cri
