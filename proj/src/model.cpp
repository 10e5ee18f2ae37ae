#include "protoverse/model.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>

#include "protoverse/errors.hpp"

namespace protoverse {

using nlohmann::json;

void ModelConfig::validate() const {
    const BackboneSpec spec = backbone_spec(backbone, input_size);
    if (prototypes_per_class < 2) {
        throw ConfigError("model.prototypes_per_class",
                          "must be at least 2; a single prototype per class severely hurts interpretability");
    }
    if (num_classes < 2) throw ConfigError("model.num_classes", "at least two classes required");
    if (prototype_dim <= 0) throw ConfigError("model.prototype_dim", "must be positive");
    if (!(epsilon > 0.0)) throw ConfigError("model.epsilon", "must be positive");
    if (input_size <= 0 || input_size % spec.downsample != 0) {
        throw ConfigError("model.input_size", "must be a positive multiple of " + std::to_string(spec.downsample));
    }
    if (addon_activation != "sigmoid" && addon_activation != "linear") {
        throw ConfigError("model.addon_activation", "expected 'sigmoid' or 'linear'");
    }
    if (pretrained && pretrained_weights.empty()) {
        throw ConfigError("model.pretrained_weights", "required when pretrained is true");
    }
}

json model_config_to_json(const ModelConfig& c) {
    return json{{"backbone", c.backbone},
                {"input_size", c.input_size},
                {"prototype_dim", c.prototype_dim},
                {"prototypes_per_class", c.prototypes_per_class},
                {"num_classes", c.num_classes},
                {"epsilon", c.epsilon},
                {"pretrained", c.pretrained},
                {"pretrained_weights", c.pretrained_weights},
                {"addon_activation", c.addon_activation}};
}

ModelConfig model_config_from_json(const json& j) {
    ModelConfig c;
    c.backbone = j.at("backbone").get<std::string>();
    c.input_size = j.at("input_size").get<int>();
    c.prototype_dim = j.at("prototype_dim").get<int>();
    c.prototypes_per_class = j.at("prototypes_per_class").get<int>();
    c.num_classes = j.at("num_classes").get<int>();
    c.epsilon = j.at("epsilon").get<double>();
    c.pretrained = j.at("pretrained").get<bool>();
    c.pretrained_weights = j.at("pretrained_weights").get<std::string>();
    c.addon_activation = j.at("addon_activation").get<std::string>();
    return c;
}

PrototypeBank::PrototypeBank(Eigen::MatrixXd v, int m, int c)
    : vectors(std::move(v)), per_class(m), num_classes(c), projection(static_cast<std::size_t>(m) * c) {
    validate();
}

PrototypeBank PrototypeBank::random(int m, int c, int dim, Rng& rng) {
    Eigen::MatrixXd v(m * c, dim);
    for (Eigen::Index i = 0; i < v.rows(); ++i) {
        for (Eigen::Index d = 0; d < v.cols(); ++d) v(i, d) = uniform(rng, 0.0, 1.0);
    }
    return PrototypeBank(std::move(v), m, c);
}

bool PrototypeBank::fully_projected() const {
    return !projection.empty() && std::all_of(projection.begin(), projection.end(), [](const auto& p) { return p.has_value(); });
}

void PrototypeBank::validate() const {
    if (per_class <= 0 || num_classes <= 0) throw ShapeError("prototype bank needs positive m and c");
    if (vectors.rows() != static_cast<Eigen::Index>(per_class) * num_classes) {
        throw ShapeError("prototype bank must hold exactly m*c vectors");
    }
    if (projection.size() != static_cast<std::size_t>(vectors.rows())) {
        throw ShapeError("projection record size differs from prototype count");
    }
}

ClassConnectionMatrix init_class_connections(int m, int c) {
    ClassConnectionMatrix w;
    w.weights = Eigen::MatrixXd::Constant(m * c, c, -0.5);
    for (int p = 0; p < m * c; ++p) w.weights(p, p / m) = 1.0;
    return w;
}

Eigen::MatrixXd prototype_distances(const FeatureMap& fmap, const PrototypeBank& bank) {
    if (fmap.dim() != bank.dim()) {
        throw ShapeError("feature dimension " + std::to_string(fmap.dim()) + " differs from prototype dimension " +
                         std::to_string(bank.dim()));
    }
    Eigen::MatrixXd d(bank.size(), fmap.num_patches());
    for (int p = 0; p < bank.size(); ++p) {
        for (int r = 0; r < fmap.num_patches(); ++r) {
            d(p, r) = (fmap.patches.row(r) - bank.vectors.row(p)).squaredNorm();
        }
    }
    return d;
}

double similarity_from_distance(double d, double epsilon) {
    if (d < 0.0) throw DomainError("similarity_from_distance: negative distance");
    if (!(epsilon > 0.0)) throw DomainError("similarity_from_distance: epsilon must be positive");
    return std::log((d + 1.0) / (d + epsilon));
}

double similarity_derivative(double d, double epsilon) { return 1.0 / (d + 1.0) - 1.0 / (d + epsilon); }

Eigen::MatrixXd similarity_map(const Eigen::MatrixXd& distances, double epsilon) {
    return distances.unaryExpr([epsilon](double d) { return similarity_from_distance(d, epsilon); });
}

Eigen::VectorXd similarity_scores(const Eigen::MatrixXd& maps) {
    if (maps.rows() == 0 || maps.cols() == 0) throw ShapeError("similarity_scores: empty maps");
    return maps.rowwise().maxCoeff();
}

Eigen::VectorXd head_logits(const Eigen::VectorXd& scores, const ClassConnectionMatrix& connections) {
    if (scores.size() != connections.weights.rows()) {
        throw ShapeError("head_logits: " + std::to_string(scores.size()) + " scores for " +
                         std::to_string(connections.weights.rows()) + " connection rows");
    }
    return connections.weights.transpose() * scores;
}

Eigen::VectorXd softmax(const Eigen::VectorXd& logits) {
    const double mx = logits.maxCoeff();
    Eigen::VectorXd e = (logits.array() - mx).exp();
    return e / e.sum();
}

PrototypeActivations prototype_activations(const FeatureMap& fmap, const PrototypeBank& bank,
                                           const ClassConnectionMatrix& connections, double epsilon) {
    PrototypeActivations a;
    a.distances = prototype_distances(fmap, bank);
    a.min_distances.resize(bank.size());
    a.argmin.resize(bank.size());
    a.scores.resize(bank.size());
    for (int p = 0; p < bank.size(); ++p) {
        Eigen::Index idx = 0;
        a.min_distances(p) = a.distances.row(p).minCoeff(&idx);
        a.argmin[p] = static_cast<int>(idx);
        a.scores(p) = similarity_from_distance(a.min_distances(p), epsilon);
    }
    a.logits = head_logits(a.scores, connections);
    return a;
}

std::string_view stage_name(StageTag s) {
    switch (s) {
        case StageTag::warm: return "warm";
        case StageTag::joint: return "joint";
        case StageTag::pushed: return "pushed";
        case StageTag::final_: return "final";
    }
    return "?";
}

StageTag stage_from_name(std::string_view name) {
    if (name == "warm") return StageTag::warm;
    if (name == "joint") return StageTag::joint;
    if (name == "pushed") return StageTag::pushed;
    if (name == "final") return StageTag::final_;
    throw StageError("unknown stage tag '" + std::string(name) + "'");
}

bool stage_transition_allowed(StageTag from, StageTag to) {
    switch (from) {
        case StageTag::warm: return to == StageTag::joint || to == StageTag::pushed;
        case StageTag::joint: return to == StageTag::joint || to == StageTag::pushed;
        case StageTag::pushed: return to == StageTag::final_;
        case StageTag::final_: return to == StageTag::joint;
    }
    return false;
}

// ---------------------------------------------------------------------------------------------

namespace {

// Conv widths; 0 marks a 2x2 max pool. The small CNN pools further until the grid is at most 7x7.
std::vector<int> backbone_layout(const std::string& name, int input_size) {
    if (name == "small_cnn") {
        std::vector<int> layout{8, 0, 16, 0, 32, 0, 32, 0};
        int side = input_size / 16;
        while (side > 7 && side % 2 == 0) {
            layout.push_back(0);
            side /= 2;
        }
        return layout;
    }
    if (name == "vgg11") return {64, 0, 128, 0, 256, 256, 0, 512, 512, 0, 512, 512, 0};
    throw ConfigError("model.backbone", "unknown backbone '" + name + "' (expected small_cnn or vgg11)");
}

}  // namespace

BackboneSpec backbone_spec(const std::string& name, int input_size) {
    BackboneSpec spec;
    spec.input_channels = name == "vgg11" ? 3 : 2;
    for (int w : backbone_layout(name, input_size)) {
        if (w == 0) {
            spec.downsample *= 2;
        } else {
            spec.output_channels = w;
        }
    }
    return spec;
}

nn::Sequential make_backbone(const std::string& name, Rng& rng, int input_size) {
    const BackboneSpec spec = backbone_spec(name, input_size);
    nn::Sequential net;
    int in = spec.input_channels;
    for (int w : backbone_layout(name, input_size)) {
        if (w == 0) {
            net.push_back(nn::MaxPool2{});
        } else {
            net.push_back(nn::Conv2d(in, w, 3, rng));
            net.push_back(nn::ReLU{});
            in = w;
        }
    }
    return net;
}

FeatureMap tensor_to_feature_map(const nn::Tensor& t) {
    FeatureMap f;
    f.height = t.height;
    f.width = t.width;
    f.patches.resize(static_cast<Eigen::Index>(t.plane()), t.channels);
    for (int d = 0; d < t.channels; ++d) {
        for (int r = 0; r < t.height; ++r) {
            for (int s = 0; s < t.width; ++s) f.patches(r * t.width + s, d) = t.at(d, r, s);
        }
    }
    return f;
}

nn::Tensor feature_grad_to_tensor(const Eigen::MatrixXd& grad, int height, int width) {
    nn::Tensor t(static_cast<int>(grad.cols()), height, width);
    for (int d = 0; d < t.channels; ++d) {
        for (int r = 0; r < height; ++r) {
            for (int s = 0; s < width; ++s) t.at(d, r, s) = static_cast<float>(grad(r * width + s, d));
        }
    }
    return t;
}

nn::Sequential build_backbone(const ModelConfig& config, Rng& rng) {
    if (!config.pretrained) return make_backbone(config.backbone, rng, config.input_size);
    std::ifstream is(config.pretrained_weights);
    if (!is) throw ConfigError("model.pretrained_weights", "cannot read " + config.pretrained_weights);
    json j;
    is >> j;
    return nn::sequential_from_json(j.contains("backbone") ? j.at("backbone") : j);
}

nn::Tensor make_input_tensor(const ImageSample& sample, const ModelConfig& config) {
    if (sample.height() != config.input_size || sample.width() != config.input_size) {
        throw ShapeError("sample " + sample.sample_id + " is " + std::to_string(sample.height()) + "x" +
                         std::to_string(sample.width()) + ", model expects " + std::to_string(config.input_size) +
                         "x" + std::to_string(config.input_size));
    }
    sample.validate();
    const int channels = backbone_spec(config.backbone).input_channels;
    nn::Tensor t(channels, sample.height(), sample.width());
    const std::size_t plane = t.plane();
    for (int c = 0; c < channels; ++c) {
        const auto& src = (c == 1) ? sample.centroid_channel.pixels : sample.image.pixels;
        std::copy(src.begin(), src.end(), t.data.begin() + static_cast<std::ptrdiff_t>(c * plane));
    }
    return t;
}

ProtoNet::ProtoNet(const ModelConfig& config, std::uint64_t seed) : config_(config) {
    config_.validate();
    Rng rng(seed);
    const BackboneSpec spec = backbone_spec(config_.backbone, config_.input_size);
    backbone_ = build_backbone(config_, rng);
    addon_.push_back(nn::Conv2d(spec.output_channels, config_.prototype_dim, 1, rng));
    addon_.push_back(nn::ReLU{});
    addon_.push_back(nn::Conv2d(config_.prototype_dim, config_.prototype_dim, 1, rng));
    if (config_.addon_activation == "sigmoid") addon_.push_back(nn::Sigmoid{});
    prototypes_ = PrototypeBank::random(config_.prototypes_per_class, config_.num_classes, config_.prototype_dim, rng);
    connections_ = init_class_connections(config_.prototypes_per_class, config_.num_classes);
}

nn::Tensor ProtoNet::input_tensor(const ImageSample& sample) const { return make_input_tensor(sample, config_); }

FeatureMap ProtoNet::forward_features(const ImageSample& sample) const {
    return tensor_to_feature_map(addon_.forward(backbone_.forward(input_tensor(sample))));
}

FeatureMap ProtoNet::forward_features(const nn::Tensor& input, Trace& trace) const {
    const nn::Tensor z = backbone_.forward(input, trace.backbone);
    return tensor_to_feature_map(addon_.forward(z, trace.addon));
}

void ProtoNet::backward_features(const Trace& trace, const Eigen::MatrixXd& grad_patches, bool into_backbone) {
    const nn::Tensor& out = trace.addon.activations.back();
    const nn::Tensor g = feature_grad_to_tensor(grad_patches, out.height, out.width);
    const nn::Tensor gz = addon_.backward(trace.addon, g, into_backbone);
    if (into_backbone) backbone_.backward(trace.backbone, gz, false);
}

PrototypeActivations ProtoNet::forward(const ImageSample& sample) const {
    return prototype_activations(forward_features(sample), prototypes_, connections_, config_.epsilon);
}

int ProtoNet::predict(const ImageSample& sample) const {
    Eigen::Index idx = 0;
    forward(sample).logits.maxCoeff(&idx);
    return static_cast<int>(idx);
}

json ProtoNet::to_json() const {
    json vectors = json::array();
    for (Eigen::Index p = 0; p < prototypes_.vectors.rows(); ++p) {
        std::vector<double> row(prototypes_.vectors.cols());
        for (Eigen::Index d = 0; d < prototypes_.vectors.cols(); ++d) row[d] = prototypes_.vectors(p, d);
        vectors.push_back(row);
    }
    json projection = json::array();
    for (const auto& e : prototypes_.projection) {
        if (!e) {
            projection.push_back(nullptr);
        } else {
            projection.push_back({{"sample_id", e->sample_id},
                                  {"row", e->row},
                                  {"col", e->col},
                                  {"distance_before", e->distance_before},
                                  {"class", e->class_index}});
        }
    }
    json connections = json::array();
    for (Eigen::Index p = 0; p < connections_.weights.rows(); ++p) {
        std::vector<double> row(connections_.weights.cols());
        for (Eigen::Index c = 0; c < connections_.weights.cols(); ++c) row[c] = connections_.weights(p, c);
        connections.push_back(row);
    }
    return json{{"config", model_config_to_json(config_)},
                {"backbone", nn::sequential_to_json(backbone_)},
                {"addon", nn::sequential_to_json(addon_)},
                {"prototypes",
                 {{"per_class", prototypes_.per_class},
                  {"num_classes", prototypes_.num_classes},
                  {"vectors", vectors},
                  {"projection", projection}}},
                {"connections", connections}};
}

ProtoNet ProtoNet::from_json(const json& j) {
    ProtoNet net;
    net.config_ = model_config_from_json(j.at("config"));
    net.backbone_ = nn::sequential_from_json(j.at("backbone"));
    net.addon_ = nn::sequential_from_json(j.at("addon"));
    const auto& pj = j.at("prototypes");
    const int m = pj.at("per_class").get<int>();
    const int c = pj.at("num_classes").get<int>();
    const auto rows = pj.at("vectors").get<std::vector<std::vector<double>>>();
    Eigen::MatrixXd v(static_cast<Eigen::Index>(rows.size()), rows.empty() ? 0 : static_cast<Eigen::Index>(rows[0].size()));
    for (std::size_t p = 0; p < rows.size(); ++p) {
        for (std::size_t d = 0; d < rows[p].size(); ++d) v(static_cast<Eigen::Index>(p), static_cast<Eigen::Index>(d)) = rows[p][d];
    }
    net.prototypes_ = PrototypeBank(std::move(v), m, c);
    const auto& proj = pj.at("projection");
    for (std::size_t p = 0; p < proj.size() && p < net.prototypes_.projection.size(); ++p) {
        if (proj[p].is_null()) continue;
        net.prototypes_.projection[p] = ProjectionEntry{proj[p].at("sample_id").get<std::string>(),
                                                        proj[p].at("row").get<int>(), proj[p].at("col").get<int>(),
                                                        proj[p].at("distance_before").get<double>(),
                                                        proj[p].at("class").get<int>()};
    }
    const auto w = j.at("connections").get<std::vector<std::vector<double>>>();
    net.connections_.weights.resize(static_cast<Eigen::Index>(w.size()), c);
    for (std::size_t p = 0; p < w.size(); ++p) {
        if (w[p].size() != static_cast<std::size_t>(c)) throw ShapeError("checkpoint connection row has wrong width");
        for (int k = 0; k < c; ++k) net.connections_.weights(static_cast<Eigen::Index>(p), k) = w[p][k];
    }
    if (net.connections_.weights.rows() != net.prototypes_.size()) {
        throw ShapeError("checkpoint connection matrix does not match prototype count");
    }
    return net;
}

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt) {
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    std::ofstream os(path);
    if (!os) throw DataError("cannot write checkpoint " + path.string());
    const json j{{"format", "protoverse-checkpoint"},
                 {"version", 1},
                 {"stage", stage_name(ckpt.stage)},
                 {"epoch", ckpt.epoch},
                 {"config_hash", ckpt.config_hash},
                 {"metrics", ckpt.metrics},
                 {"model", ckpt.model.to_json()}};
    os << j.dump() << '\n';
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
    std::ifstream is(path);
    if (!is) throw DataError("cannot read checkpoint " + path.string());
    try {
        json j;
        is >> j;
        if (j.value("format", "") != "protoverse-checkpoint") throw DataError(path.string() + " is not a checkpoint");
        Checkpoint ckpt;
        ckpt.stage = stage_from_name(j.at("stage").get<std::string>());
        ckpt.epoch = j.at("epoch").get<int>();
        ckpt.config_hash = j.at("config_hash").get<std::string>();
        ckpt.metrics = j.at("metrics");
        ckpt.model = ProtoNet::from_json(j.at("model"));
        return ckpt;
    } catch (const json::exception& e) {
        throw DataError(path.string() + ": malformed checkpoint: " + e.what());
    }
}

}  // namespace protoverse
