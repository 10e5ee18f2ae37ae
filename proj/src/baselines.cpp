#include "protoverse/baselines.hpp"

#include <cmath>
#include <fstream>
#include <numeric>

#include "protoverse/errors.hpp"

namespace protoverse {

BaselineNet::BaselineNet(const ModelConfig& config, std::uint64_t seed) : config_(config) {
    config_.validate();
    Rng rng(seed);
    backbone_ = build_backbone(config_, rng);
    const int channels = backbone_spec(config_.backbone, config_.input_size).output_channels;
    const double scale = std::sqrt(1.0 / channels);
    head_w_.resize(config_.num_classes, channels);
    for (Eigen::Index i = 0; i < head_w_.size(); ++i) head_w_.data()[i] = scale * normal(rng);
    head_b_ = Eigen::VectorXd::Zero(config_.num_classes);
    grad_w_ = vel_w_ = Eigen::MatrixXd::Zero(head_w_.rows(), head_w_.cols());
    grad_b_ = vel_b_ = Eigen::VectorXd::Zero(head_b_.size());
}

namespace {

// Index of the largest activation in each channel; ties keep the first.
std::vector<std::size_t> channel_argmax(const nn::Tensor& features) {
    const std::size_t plane = features.plane();
    std::vector<std::size_t> idx(features.channels, 0);
    for (int k = 0; k < features.channels; ++k) {
        const float* f = features.data.data() + k * plane;
        for (std::size_t i = 1; i < plane; ++i) {
            if (f[i] > f[idx[k]]) idx[k] = i;
        }
    }
    return idx;
}

Eigen::VectorXd max_pool(const nn::Tensor& features, const std::vector<std::size_t>& idx) {
    Eigen::VectorXd pooled(features.channels);
    for (int k = 0; k < features.channels; ++k) pooled(k) = features.data[k * features.plane() + idx[k]];
    return pooled;
}

}  // namespace

Eigen::VectorXd BaselineNet::head(const nn::Tensor& features) const {
    if (features.channels != head_w_.cols()) throw ShapeError("baseline head: channel count mismatch");
    return head_w_ * max_pool(features, channel_argmax(features)) + head_b_;
}

nn::Tensor BaselineNet::head_backward(const nn::Tensor& features, const Eigen::VectorXd& grad_logits,
                                      bool accumulate) {
    const auto idx = channel_argmax(features);
    if (accumulate) {
        grad_w_ += grad_logits * max_pool(features, idx).transpose();
        grad_b_ += grad_logits;
    }
    const Eigen::VectorXd g_pooled = head_w_.transpose() * grad_logits;
    nn::Tensor g(features.channels, features.height, features.width);
    for (int k = 0; k < features.channels; ++k) g.data[k * features.plane() + idx[k]] = static_cast<float>(g_pooled(k));
    return g;
}

Eigen::VectorXd BaselineNet::logits(const ImageSample& sample) const {
    return head(backbone_.forward(make_input_tensor(sample, config_)));
}

int BaselineNet::predict(const ImageSample& sample) const {
    Eigen::Index idx = 0;
    logits(sample).maxCoeff(&idx);
    return static_cast<int>(idx);
}

void BaselineNet::zero_grad() {
    backbone_.zero_grad();
    grad_w_.setZero();
    grad_b_.setZero();
}

void BaselineNet::head_step(double learning_rate, double momentum) {
    vel_w_ = momentum * vel_w_ + grad_w_;
    vel_b_ = momentum * vel_b_ + grad_b_;
    head_w_ -= learning_rate * vel_w_;
    head_b_ -= learning_rate * vel_b_;
}

nlohmann::json BaselineNet::to_json() const {
    std::vector<double> w(head_w_.data(), head_w_.data() + head_w_.size());
    std::vector<double> b(head_b_.data(), head_b_.data() + head_b_.size());
    return {{"format", "protoverse-baseline"},
            {"version", 1},
            {"config", model_config_to_json(config_)},
            {"backbone", nn::sequential_to_json(backbone_)},
            {"head_rows", head_w_.rows()},
            {"head_cols", head_w_.cols()},
            {"head_weights", w},
            {"head_bias", b}};
}

BaselineNet BaselineNet::from_json(const nlohmann::json& j) {
    if (j.value("format", "") != "protoverse-baseline") throw DataError("not a baseline checkpoint");
    BaselineNet m;
    m.config_ = model_config_from_json(j.at("config"));
    m.backbone_ = nn::sequential_from_json(j.at("backbone"));
    const auto rows = j.at("head_rows").get<Eigen::Index>();
    const auto cols = j.at("head_cols").get<Eigen::Index>();
    const auto w = j.at("head_weights").get<std::vector<double>>();
    const auto b = j.at("head_bias").get<std::vector<double>>();
    if (static_cast<Eigen::Index>(w.size()) != rows * cols || static_cast<Eigen::Index>(b.size()) != rows) {
        throw DataError("baseline head has inconsistent size");
    }
    m.head_w_ = Eigen::Map<const Eigen::MatrixXd>(w.data(), rows, cols);
    m.head_b_ = Eigen::Map<const Eigen::VectorXd>(b.data(), rows);
    m.grad_w_ = m.vel_w_ = Eigen::MatrixXd::Zero(rows, cols);
    m.grad_b_ = m.vel_b_ = Eigen::VectorXd::Zero(rows);
    return m;
}

void save_baseline(const std::filesystem::path& path, const BaselineNet& model) {
    std::ofstream os(path);
    if (!os) throw DataError("cannot write " + path.string());
    os << model.to_json().dump() << '\n';
}

BaselineNet load_baseline(const std::filesystem::path& path) {
    std::ifstream is(path);
    if (!is) throw DataError("cannot read baseline checkpoint " + path.string());
    nlohmann::json j;
    try {
        is >> j;
    } catch (const nlohmann::json::exception& e) {
        throw DataError("malformed baseline checkpoint " + path.string() + ": " + e.what());
    }
    return BaselineNet::from_json(j);
}

Metrics evaluate(const BaselineNet& model, std::span<const ImageSample> samples) {
    std::vector<int> preds;
    preds.reserve(samples.size());
    for (const auto& s : samples) preds.push_back(model.predict(s));
    return compute_metrics(preds, labels_of(samples), model.config().num_classes);
}

BaselineResult train_baseline(const TrainConfig& config, std::span<const ImageSample> train_set,
                              std::span<const ImageSample> val_set, const EpochCallback& on_epoch) {
    config.model.validate();
    config.schedule.validate();
    const auto counts = require_all_classes(train_set, "training set");
    require_all_classes(val_set, "validation set");
    const WeightVector class_weights = mwce_weights(counts, config.losses.weighting);
    const auto& sched = config.schedule;

    BaselineNet model(config.model, mix_seed(config.seed, 1));
    Rng order_rng(mix_seed(config.seed, 2));
    const auto labels = labels_of(train_set);
    std::vector<nn::Tensor> inputs;
    inputs.reserve(train_set.size());
    for (const auto& s : train_set) inputs.push_back(make_input_tensor(s, config.model));
    const double lr_backbone = config.model.pretrained ? sched.lr_backbone_pretrained : sched.lr_backbone;
    std::vector<std::size_t> order(train_set.size());
    std::iota(order.begin(), order.end(), 0);

    BaselineResult result;
    double best_score = -1.0;
    const int epochs = sched.warm_epochs + sched.joint_epochs;
    for (int epoch = 0; epoch < epochs; ++epoch) {
        shuffle(order, order_rng);
        std::vector<nn::SgdGroup> groups{{model.backbone().parameters(), lr_backbone}};
        double epoch_loss = 0.0;
        int batches = 0;
        for (std::size_t start = 0; start < order.size(); start += static_cast<std::size_t>(sched.batch_size)) {
            const std::size_t end = std::min(order.size(), start + static_cast<std::size_t>(sched.batch_size));
            const double scale = 1.0 / static_cast<double>(end - start);
            model.zero_grad();
            double batch_loss = 0.0;
            for (std::size_t k = start; k < end; ++k) {
                const std::size_t i = order[k];
                nn::Trace trace;
                const nn::Tensor feats = model.backbone().forward(inputs[i], trace);
                Eigen::VectorXd g;
                batch_loss += scale * mwce_loss(model.head(feats), labels[i], class_weights, &g);
                g *= scale;
                const nn::Tensor gf = model.head_backward(feats, g, true);
                model.backbone().backward(trace, gf, false);
            }
            if (!std::isfinite(batch_loss)) {
                throw DivergenceError("baseline: non-finite loss at epoch " + std::to_string(epoch) + " batch " +
                                      std::to_string(batches));
            }
            nn::sgd_step(groups, sched.momentum, 1.0);
            model.head_step(sched.lr_addon, sched.momentum);
            epoch_loss += batch_loss;
            ++batches;
        }
        EpochLog entry;
        entry.epoch = epoch;
        entry.stage = StageTag::joint;
        entry.loss.mwce = entry.loss.total = batches > 0 ? epoch_loss / batches : 0.0;
        entry.backbone_hash = model.backbone().parameter_hash();
        entry.val = evaluate(model, val_set);
        result.log.push_back(entry);
        if (on_epoch) on_epoch(entry);
        if (entry.val.class_avg_accuracy >= best_score) {
            best_score = entry.val.class_avg_accuracy;
            result.best = model;
            result.best_epoch = epoch;
            result.best_val = entry.val;
        }
    }
    if (epochs == 0) {
        result.best = model;
        result.best_val = evaluate(model, val_set);
    }
    return result;
}

std::string_view cam_name(CamVariant v) {
    switch (v) {
        case CamVariant::gradcam: return "gradcam";
        case CamVariant::gradcam_pp: return "gradcam_pp";
        case CamVariant::xgradcam: return "xgradcam";
    }
    return "?";
}

CamVariant cam_from_name(std::string_view name) {
    if (name == "gradcam") return CamVariant::gradcam;
    if (name == "gradcam_pp" || name == "gradcam++") return CamVariant::gradcam_pp;
    if (name == "xgradcam") return CamVariant::xgradcam;
    throw ConfigError("cam.method", "unknown CAM variant '" + std::string(name) + "'");
}

int default_cam_layer(const nn::Sequential& backbone) {
    int last_conv = -1;
    for (std::size_t i = 0; i < backbone.size(); ++i) {
        if (std::holds_alternative<nn::Conv2d>(backbone.layer(i))) last_conv = static_cast<int>(i);
    }
    if (last_conv < 0) throw ShapeError("backbone has no convolutional layer");
    const auto next = static_cast<std::size_t>(last_conv + 1);
    if (next < backbone.size() && std::holds_alternative<nn::ReLU>(backbone.layer(next))) return last_conv + 1;
    return last_conv;
}

Image cam_from_activations(const nn::Tensor& a, const nn::Tensor& g, CamVariant variant) {
    if (!a.same_shape(g)) throw ShapeError("activations and gradients differ in shape");
    const std::size_t plane = a.plane();
    std::vector<double> weight(a.channels, 0.0);
    for (int k = 0; k < a.channels; ++k) {
        const float* ak = a.data.data() + k * plane;
        const float* gk = g.data.data() + k * plane;
        double w = 0.0;
        switch (variant) {
            case CamVariant::gradcam:
                for (std::size_t i = 0; i < plane; ++i) w += gk[i];
                w /= static_cast<double>(plane);
                break;
            case CamVariant::gradcam_pp: {
                double sum_a = 0.0;
                for (std::size_t i = 0; i < plane; ++i) sum_a += ak[i];
                for (std::size_t i = 0; i < plane; ++i) {
                    const double g1 = gk[i], g2 = g1 * g1, g3 = g2 * g1;
                    const double denom = 2.0 * g2 + sum_a * g3;
                    const double alpha = denom != 0.0 ? g2 / denom : 0.0;
                    w += alpha * std::max(g1, 0.0);
                }
                break;
            }
            case CamVariant::xgradcam: {
                double sum_a = 0.0;
                for (std::size_t i = 0; i < plane; ++i) sum_a += ak[i];
                if (sum_a != 0.0) {
                    for (std::size_t i = 0; i < plane; ++i) w += ak[i] / sum_a * gk[i];
                }
                break;
            }
        }
        weight[k] = w;
    }
    Image map(a.height, a.width);
    for (std::size_t i = 0; i < plane; ++i) {
        double s = 0.0;
        for (int k = 0; k < a.channels; ++k) s += weight[k] * a.data[k * plane + i];
        map.pixels[i] = static_cast<float>(std::max(s, 0.0));
    }
    return map;
}

Image cam_heatmap(const BaselineNet& model, const ImageSample& sample, const CamMethod& method,
                  std::optional<int> target_class) {
    const nn::Sequential& net = model.backbone();
    const int layer = method.target_layer.value_or(default_cam_layer(net));
    if (layer < 0 || static_cast<std::size_t>(layer) >= net.size()) {
        throw ConfigError("cam.target_layer", "layer " + std::to_string(layer) + " does not exist");
    }
    if (std::holds_alternative<nn::Sigmoid>(net.layer(layer))) {
        throw ConfigError("cam.target_layer", "layer " + std::to_string(layer) + " is not a convolutional feature layer");
    }
    nn::Trace trace;
    const nn::Tensor feats = net.forward(make_input_tensor(sample, model.config()), trace);
    const Eigen::VectorXd logits = model.head(feats);
    Eigen::Index pred = 0;
    logits.maxCoeff(&pred);
    const int target = target_class.value_or(static_cast<int>(pred));
    if (target < 0 || target >= logits.size()) throw DomainError("CAM target class outside the label space");

    // Gradients only; the model copy keeps the caller's parameter gradients untouched.
    BaselineNet scratch = model;
    Eigen::VectorXd onehot = Eigen::VectorXd::Zero(logits.size());
    onehot(target) = 1.0;
    const nn::Tensor gf = scratch.head_backward(feats, onehot, false);
    std::vector<nn::Tensor> grads;
    scratch.backbone().backward(trace, gf, false, &grads);
    const auto idx = static_cast<std::size_t>(layer + 1);
    const Image cam = cam_from_activations(trace.activations[idx], grads[idx], method.variant);
    return minmax_normalize(upsample_heatmap(cam, sample.height(), sample.width()));
}

bool peak_inside(const Image& heatmap, const BBox& box) {
    const auto [y, x] = argmax(heatmap);
    return box.contains(y, x);
}

}  // namespace protoverse
