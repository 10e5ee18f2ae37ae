#pragma once

#include <Eigen/Dense>

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"
#include "protoverse/datagen.hpp"
#include "protoverse/nn.hpp"

namespace protoverse {

struct ModelConfig {
    std::string backbone = "small_cnn";  // small_cnn | vgg11
    int input_size = 112;
    int prototype_dim = 32;
    int prototypes_per_class = 3;
    int num_classes = 3;
    double epsilon = 1e-4;
    bool pretrained = false;
    std::string pretrained_weights;  // backbone layers in checkpoint JSON layout
    std::string addon_activation = "sigmoid";  // sigmoid | linear

    /// m >= 2 is required: one prototype per class cannot show within-class variation.
    void validate() const;
    int num_prototypes() const { return prototypes_per_class * num_classes; }
};

nlohmann::json model_config_to_json(const ModelConfig& c);
ModelConfig model_config_from_json(const nlohmann::json& j);

/// Add-on output z = f(x): one D-dimensional vector per spatial cell.
struct FeatureMap {
    int height = 0;
    int width = 0;
    Eigen::MatrixXd patches;  // (height*width) x D, row r*width + s

    int dim() const { return static_cast<int>(patches.cols()); }
    int num_patches() const { return height * width; }
    Eigen::RowVectorXd patch(int r, int s) const { return patches.row(r * width + s); }
};

/// Where a prototype was copied from during projection.
struct ProjectionEntry {
    std::string sample_id;
    int row = 0;
    int col = 0;
    double distance_before = 0.0;  // squared distance to the chosen patch before replacement
    int class_index = 0;

    friend bool operator==(const ProjectionEntry&, const ProjectionEntry&) = default;
};

/// n = m*c prototype vectors laid out class-major: prototype p belongs to class p / m.
struct PrototypeBank {
    Eigen::MatrixXd vectors;  // n x D
    int per_class = 0;
    int num_classes = 0;
    std::vector<std::optional<ProjectionEntry>> projection;

    PrototypeBank() = default;
    PrototypeBank(Eigen::MatrixXd v, int m, int c);

    static PrototypeBank random(int m, int c, int dim, Rng& rng);

    int size() const { return static_cast<int>(vectors.rows()); }
    int dim() const { return static_cast<int>(vectors.cols()); }
    int class_of(int p) const { return p / per_class; }
    bool fully_projected() const;
    void validate() const;
};

/// Class connections w_h, n x c.
struct ClassConnectionMatrix {
    Eigen::MatrixXd weights;
};

/// 1.0 on a prototype's own class, -0.5 elsewhere.
ClassConnectionMatrix init_class_connections(int m, int c);

/// Squared L2 distance between every prototype and every patch; n x P.
Eigen::MatrixXd prototype_distances(const FeatureMap& fmap, const PrototypeBank& bank);

/// log((d + 1) / (d + eps)); strictly decreasing in d.
double similarity_from_distance(double d, double epsilon);
/// d/dd of similarity_from_distance.
double similarity_derivative(double d, double epsilon);
Eigen::MatrixXd similarity_map(const Eigen::MatrixXd& distances, double epsilon);

/// Global max over each row of a similarity map (one row per prototype).
Eigen::VectorXd similarity_scores(const Eigen::MatrixXd& maps);

Eigen::VectorXd head_logits(const Eigen::VectorXd& scores, const ClassConnectionMatrix& connections);
Eigen::VectorXd softmax(const Eigen::VectorXd& logits);

/// Everything the prototype layer and head compute for one input.
struct PrototypeActivations {
    Eigen::MatrixXd distances;      // n x P
    Eigen::VectorXd min_distances;  // n
    std::vector<int> argmin;        // patch index of each min
    Eigen::VectorXd scores;         // n
    Eigen::VectorXd logits;         // c
};

PrototypeActivations prototype_activations(const FeatureMap& fmap, const PrototypeBank& bank,
                                           const ClassConnectionMatrix& connections, double epsilon);

enum class StageTag { warm, joint, pushed, final_ };
std::string_view stage_name(StageTag s);
StageTag stage_from_name(std::string_view name);
/// Stage order within a training cycle; final may start another joint cycle.
bool stage_transition_allowed(StageTag from, StageTag to);

/// Backbone f, two 1x1 add-on layers, prototype layer g_p and head h.
class ProtoNet {
public:
    ProtoNet() = default;
    ProtoNet(const ModelConfig& config, std::uint64_t seed);

    const ModelConfig& config() const { return config_; }

    /// Builds the backbone input: image, centroid, then replicated image channels.
    nn::Tensor input_tensor(const ImageSample& sample) const;

    FeatureMap forward_features(const ImageSample& sample) const;
    PrototypeActivations forward(const ImageSample& sample) const;
    int predict(const ImageSample& sample) const;

    struct Trace {
        nn::Trace backbone;
        nn::Trace addon;
    };
    FeatureMap forward_features(const nn::Tensor& input, Trace& trace) const;
    /// Backpropagates dL/dpatches into the add-on and, when requested, the backbone.
    void backward_features(const Trace& trace, const Eigen::MatrixXd& grad_patches, bool into_backbone);

    nn::Sequential& backbone() { return backbone_; }
    const nn::Sequential& backbone() const { return backbone_; }
    nn::Sequential& addon() { return addon_; }
    const nn::Sequential& addon() const { return addon_; }
    PrototypeBank& prototypes() { return prototypes_; }
    const PrototypeBank& prototypes() const { return prototypes_; }
    ClassConnectionMatrix& connections() { return connections_; }
    const ClassConnectionMatrix& connections() const { return connections_; }

    nlohmann::json to_json() const;
    static ProtoNet from_json(const nlohmann::json& j);

private:
    ModelConfig config_;
    nn::Sequential backbone_;
    nn::Sequential addon_;
    PrototypeBank prototypes_;
    ClassConnectionMatrix connections_;
};

struct BackboneSpec {
    int input_channels = 2;
    int output_channels = 0;
    int downsample = 1;
};

BackboneSpec backbone_spec(const std::string& name, int input_size = 112);
nn::Sequential make_backbone(const std::string& name, Rng& rng, int input_size = 112);

/// Loads pretrained weights when configured, otherwise a freshly initialised backbone.
nn::Sequential build_backbone(const ModelConfig& config, Rng& rng);
/// Channel 0 image, channel 1 centroid map, further channels replicate the image.
nn::Tensor make_input_tensor(const ImageSample& sample, const ModelConfig& config);

FeatureMap tensor_to_feature_map(const nn::Tensor& t);
nn::Tensor feature_grad_to_tensor(const Eigen::MatrixXd& grad, int height, int width);

/// A model snapshot tagged with its training stage.
struct Checkpoint {
    ProtoNet model;
    StageTag stage = StageTag::warm;
    int epoch = 0;
    nlohmann::json metrics = nlohmann::json::object();
    std::string config_hash;
};

// Checkpoint file: one JSON document
// {"format":"protoverse-checkpoint","version":1,"stage","epoch","config_hash","metrics","model":{...}}.
void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt);
Checkpoint load_checkpoint(const std::filesystem::path& path);

}  // namespace protoverse
