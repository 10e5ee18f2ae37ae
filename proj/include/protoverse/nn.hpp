#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <variant>
#include <vector>

#include "json.hpp"
#include "protoverse/rng.hpp"

namespace protoverse::nn {

/// Dense C x H x W activation, channel-major.
struct Tensor {
    int channels = 0;
    int height = 0;
    int width = 0;
    std::vector<float> data;

    Tensor() = default;
    Tensor(int c, int h, int w, float fill = 0.0f)
        : channels(c), height(h), width(w), data(static_cast<std::size_t>(c) * h * w, fill) {}

    std::size_t plane() const { return static_cast<std::size_t>(height) * width; }
    float& at(int c, int y, int x) { return data[c * plane() + static_cast<std::size_t>(y) * width + x]; }
    float at(int c, int y, int x) const { return data[c * plane() + static_cast<std::size_t>(y) * width + x]; }
    bool same_shape(const Tensor& o) const { return channels == o.channels && height == o.height && width == o.width; }

    friend bool operator==(const Tensor&, const Tensor&) = default;
};

/// Trainable array with its gradient accumulator and momentum buffer.
struct Parameter {
    std::vector<float> value;
    std::vector<float> grad;
    std::vector<float> velocity;

    explicit Parameter(std::size_t n = 0) : value(n, 0.0f), grad(n, 0.0f), velocity(n, 0.0f) {}
    void zero_grad() { std::fill(grad.begin(), grad.end(), 0.0f); }
};

/// Square convolution, stride 1, zero padding k/2.
struct Conv2d {
    int in_channels = 0;
    int out_channels = 0;
    int kernel = 3;
    Parameter weight;  // out x (in * k * k)
    Parameter bias;    // out

    Conv2d() = default;
    Conv2d(int in, int out, int k, Rng& rng);

    Tensor forward(const Tensor& x) const;
    /// Accumulates parameter gradients; returns dL/dx when `need_input_grad`.
    Tensor backward(const Tensor& x, const Tensor& grad_out, bool need_input_grad);
};

struct ReLU {
    Tensor forward(const Tensor& x) const;
    Tensor backward(const Tensor& y, const Tensor& grad_out) const;
};

struct Sigmoid {
    Tensor forward(const Tensor& x) const;
    Tensor backward(const Tensor& y, const Tensor& grad_out) const;
};

/// 2x2 max pooling, stride 2; odd trailing rows/columns are dropped.
struct MaxPool2 {
    Tensor forward(const Tensor& x) const;
    Tensor backward(const Tensor& x, const Tensor& y, const Tensor& grad_out) const;
};

using Layer = std::variant<Conv2d, ReLU, Sigmoid, MaxPool2>;

std::string layer_kind(const Layer& layer);

/// Activations recorded by a traced forward pass: entry 0 is the input, entry i+1 the output of layer i.
struct Trace {
    std::vector<Tensor> activations;
};

class Sequential {
public:
    Sequential() = default;
    explicit Sequential(std::vector<Layer> layers) : layers_(std::move(layers)) {}

    void push_back(Layer layer) { layers_.push_back(std::move(layer)); }
    std::size_t size() const { return layers_.size(); }
    const Layer& layer(std::size_t i) const { return layers_[i]; }
    Layer& layer(std::size_t i) { return layers_[i]; }

    Tensor forward(const Tensor& x) const;
    Tensor forward(const Tensor& x, Trace& trace) const;

    /// Backpropagates from the output gradient. When `grads` is non-null it receives
    /// dL/d(activation i) for every traced activation (index-aligned with trace.activations).
    /// Parameter gradients are accumulated. Returns dL/dinput (empty when `need_input_grad` is false).
    Tensor backward(const Trace& trace, const Tensor& grad_out, bool need_input_grad,
                    std::vector<Tensor>* grads = nullptr);

    std::vector<Parameter*> parameters();
    std::vector<const Parameter*> parameters() const;
    void zero_grad();

    /// Cheap content hash of all parameter values; used to verify freezing.
    std::uint64_t parameter_hash() const;

private:
    std::vector<Layer> layers_;
};

/// SGD with classical momentum on a group of parameters sharing a learning rate.
struct SgdGroup {
    std::vector<Parameter*> params;
    double learning_rate = 0.0;
};

void sgd_step(std::span<SgdGroup> groups, double momentum, double grad_scale);

nlohmann::json sequential_to_json(const Sequential& net);
Sequential sequential_from_json(const nlohmann::json& j);

std::uint64_t hash_floats(std::span<const float> values, std::uint64_t seed = 1469598103934665603ULL);

}  // namespace protoverse::nn
