#include "protoverse/nn.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstring>

#include "protoverse/errors.hpp"

namespace protoverse::nn {

using MatrixRM = Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapRM = Eigen::Map<MatrixRM>;
using ConstMapRM = Eigen::Map<const MatrixRM>;

namespace {

// cols is (in*k*k) x (h*w)
void im2col(const Tensor& x, int k, std::vector<float>& cols) {
    const int pad = k / 2;
    const int h = x.height, w = x.width;
    const std::size_t hw = x.plane();
    cols.assign(static_cast<std::size_t>(x.channels) * k * k * hw, 0.0f);
    for (int c = 0; c < x.channels; ++c) {
        const float* src = x.data.data() + c * hw;
        for (int ky = 0; ky < k; ++ky) {
            for (int kx = 0; kx < k; ++kx) {
                float* dst = cols.data() + ((static_cast<std::size_t>(c) * k + ky) * k + kx) * hw;
                const int dy = ky - pad, dx = kx - pad;
                const int x_lo = std::max(0, -dx), x_hi = std::min(w, w - dx);
                for (int y = 0; y < h; ++y) {
                    const int sy = y + dy;
                    if (sy < 0 || sy >= h || x_lo >= x_hi) continue;
                    std::memcpy(dst + static_cast<std::size_t>(y) * w + x_lo,
                                src + static_cast<std::size_t>(sy) * w + x_lo + dx,
                                sizeof(float) * static_cast<std::size_t>(x_hi - x_lo));
                }
            }
        }
    }
}

void col2im(const std::vector<float>& cols, int k, Tensor& dx) {
    const int pad = k / 2;
    const int h = dx.height, w = dx.width;
    const std::size_t hw = dx.plane();
    for (int c = 0; c < dx.channels; ++c) {
        float* dst = dx.data.data() + c * hw;
        for (int ky = 0; ky < k; ++ky) {
            for (int kx = 0; kx < k; ++kx) {
                const float* src = cols.data() + ((static_cast<std::size_t>(c) * k + ky) * k + kx) * hw;
                const int dy = ky - pad, ddx = kx - pad;
                const int x_lo = std::max(0, -ddx), x_hi = std::min(w, w - ddx);
                for (int y = 0; y < h; ++y) {
                    const int sy = y + dy;
                    if (sy < 0 || sy >= h) continue;
                    float* row = dst + static_cast<std::size_t>(sy) * w + ddx;
                    const float* srow = src + static_cast<std::size_t>(y) * w;
                    for (int xx = x_lo; xx < x_hi; ++xx) row[xx] += srow[xx];
                }
            }
        }
    }
}

}  // namespace

Conv2d::Conv2d(int in, int out, int k, Rng& rng)
    : in_channels(in), out_channels(out), kernel(k),
      weight(static_cast<std::size_t>(out) * in * k * k), bias(static_cast<std::size_t>(out)) {
    if (k % 2 == 0) throw ShapeError("Conv2d kernel size must be odd");
    const double scale = std::sqrt(2.0 / (static_cast<double>(in) * k * k));
    for (auto& w : weight.value) w = static_cast<float>(normal(rng) * scale);
}

Tensor Conv2d::forward(const Tensor& x) const {
    if (x.channels != in_channels) {
        throw ShapeError("Conv2d expects " + std::to_string(in_channels) + " channels, got " +
                         std::to_string(x.channels));
    }
    Tensor y(out_channels, x.height, x.width);
    const auto hw = static_cast<Eigen::Index>(x.plane());
    const Eigen::Index kk = static_cast<Eigen::Index>(in_channels) * kernel * kernel;
    ConstMapRM w(weight.value.data(), out_channels, kk);
    MapRM out(y.data.data(), out_channels, hw);
    if (kernel == 1) {
        out.noalias() = w * ConstMapRM(x.data.data(), kk, hw);
    } else {
        std::vector<float> cols;
        im2col(x, kernel, cols);
        out.noalias() = w * ConstMapRM(cols.data(), kk, hw);
    }
    out.colwise() += Eigen::Map<const Eigen::VectorXf>(bias.value.data(), out_channels);
    return y;
}

Tensor Conv2d::backward(const Tensor& x, const Tensor& grad_out, bool need_input_grad) {
    const auto hw = static_cast<Eigen::Index>(x.plane());
    const Eigen::Index kk = static_cast<Eigen::Index>(in_channels) * kernel * kernel;
    ConstMapRM dy(grad_out.data.data(), out_channels, hw);
    MapRM dw(weight.grad.data(), out_channels, kk);
    Eigen::Map<Eigen::VectorXf> db(bias.grad.data(), out_channels);
    db += dy.rowwise().sum();

    std::vector<float> cols;
    const float* col_ptr = x.data.data();
    if (kernel != 1) {
        im2col(x, kernel, cols);
        col_ptr = cols.data();
    }
    dw.noalias() += dy * ConstMapRM(col_ptr, kk, hw).transpose();
    if (!need_input_grad) return {};

    ConstMapRM w(weight.value.data(), out_channels, kk);
    Tensor dx(in_channels, x.height, x.width);
    if (kernel == 1) {
        MapRM(dx.data.data(), kk, hw).noalias() = w.transpose() * dy;
    } else {
        std::vector<float> dcols(static_cast<std::size_t>(kk * hw));
        MapRM(dcols.data(), kk, hw).noalias() = w.transpose() * dy;
        col2im(dcols, kernel, dx);
    }
    return dx;
}

Tensor ReLU::forward(const Tensor& x) const {
    Tensor y = x;
    for (auto& v : y.data) v = v > 0.0f ? v : 0.0f;
    return y;
}

Tensor ReLU::backward(const Tensor& y, const Tensor& grad_out) const {
    Tensor dx = grad_out;
    for (std::size_t i = 0; i < dx.data.size(); ++i) {
        if (!(y.data[i] > 0.0f)) dx.data[i] = 0.0f;
    }
    return dx;
}

Tensor Sigmoid::forward(const Tensor& x) const {
    Tensor y = x;
    for (auto& v : y.data) v = 1.0f / (1.0f + std::exp(-v));
    return y;
}

Tensor Sigmoid::backward(const Tensor& y, const Tensor& grad_out) const {
    Tensor dx = grad_out;
    for (std::size_t i = 0; i < dx.data.size(); ++i) dx.data[i] *= y.data[i] * (1.0f - y.data[i]);
    return dx;
}

Tensor MaxPool2::forward(const Tensor& x) const {
    Tensor y(x.channels, x.height / 2, x.width / 2);
    for (int c = 0; c < x.channels; ++c) {
        for (int oy = 0; oy < y.height; ++oy) {
            for (int ox = 0; ox < y.width; ++ox) {
                const int iy = 2 * oy, ix = 2 * ox;
                y.at(c, oy, ox) = std::max(std::max(x.at(c, iy, ix), x.at(c, iy, ix + 1)),
                                           std::max(x.at(c, iy + 1, ix), x.at(c, iy + 1, ix + 1)));
            }
        }
    }
    return y;
}

Tensor MaxPool2::backward(const Tensor& x, const Tensor& y, const Tensor& grad_out) const {
    Tensor dx(x.channels, x.height, x.width);
    for (int c = 0; c < y.channels; ++c) {
        for (int oy = 0; oy < y.height; ++oy) {
            for (int ox = 0; ox < y.width; ++ox) {
                const float m = y.at(c, oy, ox);
                const float g = grad_out.at(c, oy, ox);
                // Route to the first maximal element in raster order.
                for (int k = 0; k < 4; ++k) {
                    const int iy = 2 * oy + k / 2, ix = 2 * ox + k % 2;
                    if (x.at(c, iy, ix) == m) {
                        dx.at(c, iy, ix) += g;
                        break;
                    }
                }
            }
        }
    }
    return dx;
}

std::string layer_kind(const Layer& layer) {
    struct Visitor {
        std::string operator()(const Conv2d&) const { return "conv"; }
        std::string operator()(const ReLU&) const { return "relu"; }
        std::string operator()(const Sigmoid&) const { return "sigmoid"; }
        std::string operator()(const MaxPool2&) const { return "maxpool2"; }
    };
    return std::visit(Visitor{}, layer);
}

Tensor Sequential::forward(const Tensor& x) const {
    Tensor cur = x;
    for (const auto& layer : layers_) {
        cur = std::visit([&](const auto& l) { return l.forward(cur); }, layer);
    }
    return cur;
}

Tensor Sequential::forward(const Tensor& x, Trace& trace) const {
    trace.activations.clear();
    trace.activations.reserve(layers_.size() + 1);
    trace.activations.push_back(x);
    for (const auto& layer : layers_) {
        const Tensor& in = trace.activations.back();
        trace.activations.push_back(std::visit([&](const auto& l) { return l.forward(in); }, layer));
    }
    return trace.activations.back();
}

Tensor Sequential::backward(const Trace& trace, const Tensor& grad_out, bool need_input_grad,
                            std::vector<Tensor>* grads) {
    if (trace.activations.size() != layers_.size() + 1) throw ShapeError("trace does not match network depth");
    if (grads) {
        grads->assign(layers_.size() + 1, Tensor{});
        grads->back() = grad_out;
    }
    Tensor g = grad_out;
    for (std::size_t i = layers_.size(); i-- > 0;) {
        const Tensor& in = trace.activations[i];
        const Tensor& out = trace.activations[i + 1];
        const bool need = need_input_grad || i > 0 || grads != nullptr;
        if (auto* conv = std::get_if<Conv2d>(&layers_[i])) {
            g = conv->backward(in, g, need);
        } else if (auto* relu = std::get_if<ReLU>(&layers_[i])) {
            g = relu->backward(out, g);
        } else if (auto* sig = std::get_if<Sigmoid>(&layers_[i])) {
            g = sig->backward(out, g);
        } else {
            g = std::get<MaxPool2>(layers_[i]).backward(in, out, g);
        }
        if (grads) (*grads)[i] = g;
    }
    return need_input_grad ? g : Tensor{};
}

std::vector<Parameter*> Sequential::parameters() {
    std::vector<Parameter*> out;
    for (auto& layer : layers_) {
        if (auto* conv = std::get_if<Conv2d>(&layer)) {
            out.push_back(&conv->weight);
            out.push_back(&conv->bias);
        }
    }
    return out;
}

std::vector<const Parameter*> Sequential::parameters() const {
    std::vector<const Parameter*> out;
    for (const auto& layer : layers_) {
        if (const auto* conv = std::get_if<Conv2d>(&layer)) {
            out.push_back(&conv->weight);
            out.push_back(&conv->bias);
        }
    }
    return out;
}

void Sequential::zero_grad() {
    for (auto* p : parameters()) p->zero_grad();
}

std::uint64_t hash_floats(std::span<const float> values, std::uint64_t seed) {
    std::uint64_t h = seed;
    for (float f : values) {
        std::uint32_t bits;
        std::memcpy(&bits, &f, 4);
        h = (h ^ bits) * 1099511628211ULL;
    }
    return h;
}

std::uint64_t Sequential::parameter_hash() const {
    std::uint64_t h = 1469598103934665603ULL;
    for (const auto* p : parameters()) h = hash_floats(p->value, h);
    return h;
}

void sgd_step(std::span<SgdGroup> groups, double momentum, double grad_scale) {
    for (auto& group : groups) {
        const auto lr = static_cast<float>(group.learning_rate);
        const auto mu = static_cast<float>(momentum);
        const auto scale = static_cast<float>(grad_scale);
        for (auto* p : group.params) {
            for (std::size_t i = 0; i < p->value.size(); ++i) {
                p->velocity[i] = mu * p->velocity[i] + scale * p->grad[i];
                p->value[i] -= lr * p->velocity[i];
            }
        }
    }
}

nlohmann::json sequential_to_json(const Sequential& net) {
    nlohmann::json layers = nlohmann::json::array();
    for (std::size_t i = 0; i < net.size(); ++i) {
        const Layer& layer = net.layer(i);
        nlohmann::json j{{"kind", layer_kind(layer)}};
        if (const auto* conv = std::get_if<Conv2d>(&layer)) {
            j["in"] = conv->in_channels;
            j["out"] = conv->out_channels;
            j["kernel"] = conv->kernel;
            j["weight"] = conv->weight.value;
            j["bias"] = conv->bias.value;
        }
        layers.push_back(std::move(j));
    }
    return layers;
}

Sequential sequential_from_json(const nlohmann::json& j) {
    Sequential net;
    for (const auto& lj : j) {
        const auto kind = lj.at("kind").get<std::string>();
        if (kind == "conv") {
            Conv2d conv;
            conv.in_channels = lj.at("in").get<int>();
            conv.out_channels = lj.at("out").get<int>();
            conv.kernel = lj.at("kernel").get<int>();
            conv.weight = Parameter(static_cast<std::size_t>(conv.out_channels) * conv.in_channels * conv.kernel *
                                    conv.kernel);
            conv.bias = Parameter(static_cast<std::size_t>(conv.out_channels));
            conv.weight.value = lj.at("weight").get<std::vector<float>>();
            conv.bias.value = lj.at("bias").get<std::vector<float>>();
            if (conv.weight.value.size() != conv.weight.grad.size() || conv.bias.value.size() != conv.bias.grad.size()) {
                throw ShapeError("checkpoint conv parameter size mismatch");
            }
            net.push_back(std::move(conv));
        } else if (kind == "relu") {
            net.push_back(ReLU{});
        } else if (kind == "sigmoid") {
            net.push_back(Sigmoid{});
        } else if (kind == "maxpool2") {
            net.push_back(MaxPool2{});
        } else {
            throw ShapeError("unknown layer kind in checkpoint: " + kind);
        }
    }
    return net;
}

}  // namespace protoverse::nn
