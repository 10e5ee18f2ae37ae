#pragma once

#include <Eigen/Dense>

#include <filesystem>
#include <optional>
#include <span>
#include <string_view>

#include "protoverse/explain.hpp"
#include "protoverse/training.hpp"

namespace protoverse {

/// The same backbone followed by global max pooling and a linear head, no prototype layer.
/// Max pooling mirrors the prototype layer's max over patches; average pooling stalled near chance.
class BaselineNet {
public:
    BaselineNet() = default;
    BaselineNet(const ModelConfig& config, std::uint64_t seed);

    const ModelConfig& config() const { return config_; }
    nn::Sequential& backbone() { return backbone_; }
    const nn::Sequential& backbone() const { return backbone_; }
    const Eigen::MatrixXd& head_weights() const { return head_w_; }
    const Eigen::VectorXd& head_bias() const { return head_b_; }

    Eigen::VectorXd logits(const ImageSample& sample) const;
    int predict(const ImageSample& sample) const;

    /// Logits from the final backbone activation.
    Eigen::VectorXd head(const nn::Tensor& features) const;
    /// dL/d(final activation) for dL/dlogits, accumulating head gradients when requested.
    nn::Tensor head_backward(const nn::Tensor& features, const Eigen::VectorXd& grad_logits, bool accumulate);

    void zero_grad();
    /// Momentum step on the accumulated head gradient.
    void head_step(double learning_rate, double momentum);

    nlohmann::json to_json() const;
    static BaselineNet from_json(const nlohmann::json& j);

private:
    ModelConfig config_;
    nn::Sequential backbone_;
    Eigen::MatrixXd head_w_;  // c x C
    Eigen::VectorXd head_b_;
    Eigen::MatrixXd grad_w_, vel_w_;
    Eigen::VectorXd grad_b_, vel_b_;
};

struct BaselineResult {
    BaselineNet best;
    int best_epoch = 0;
    Metrics best_val;
    std::vector<EpochLog> log;  // only mwce and total are populated
};

/// Trains all parameters with MWCE for warm + joint epochs; keeps the best model by
/// validation class-average accuracy (ties go to the later epoch).
BaselineResult train_baseline(const TrainConfig& config, std::span<const ImageSample> train_set,
                              std::span<const ImageSample> val_set, const EpochCallback& on_epoch = {});

Metrics evaluate(const BaselineNet& model, std::span<const ImageSample> samples);

void save_baseline(const std::filesystem::path& path, const BaselineNet& model);
BaselineNet load_baseline(const std::filesystem::path& path);

enum class CamVariant { gradcam, gradcam_pp, xgradcam };
std::string_view cam_name(CamVariant v);
CamVariant cam_from_name(std::string_view name);

struct CamMethod {
    CamVariant variant = CamVariant::gradcam;
    std::optional<int> target_layer;  // backbone layer index; defaults to the last convolutional block
};

/// Index of the activation that follows the last convolution of the backbone.
int default_cam_layer(const nn::Sequential& backbone);

/// Rectified class activation map at feature resolution from activations A and logit gradients G.
Image cam_from_activations(const nn::Tensor& activations, const nn::Tensor& gradients, CamVariant variant);

/// Upsampled, min-max normalised map for `target_class` (predicted class when absent).
/// A zero gradient everywhere gives an all-zero map.
Image cam_heatmap(const BaselineNet& model, const ImageSample& sample, const CamMethod& method,
                  std::optional<int> target_class = std::nullopt);

/// True when the first maximum of the heatmap lies inside the box.
bool peak_inside(const Image& heatmap, const BBox& box);

}  // namespace protoverse
