#pragma once

#include <Eigen/Dense>

#include <cstdint>
#include <filesystem>
#include <functional>
#include <span>
#include <vector>

#include "protoverse/datagen.hpp"
#include "protoverse/losses.hpp"
#include "protoverse/metrics.hpp"
#include "protoverse/model.hpp"

namespace protoverse {

struct TrainSchedule {
    int warm_epochs = 5;      // backbone frozen
    int joint_epochs = 15;    // everything but the last layer
    int push_interval = 5;    // joint epochs between projections
    int last_layer_iters = 200;
    double lr_backbone = 0.01;            // from-scratch backbone
    double lr_backbone_pretrained = 1e-4;
    double lr_addon = 3e-3;
    double lr_prototypes = 3e-3;
    double momentum = 0.9;
    int batch_size = 8;  // larger batches leave too few steps per epoch at desk scale
    double l1_coeff = 1e-4;

    void validate() const;
};

struct TrainConfig {
    ModelConfig model;
    LossWeights losses;
    TrainSchedule schedule;
    std::uint64_t seed = 0;
};

struct EpochLog {
    int epoch = 0;
    StageTag stage = StageTag::warm;
    LossBreakdown loss;  // means over the epoch's batches
    Metrics val;
    std::uint64_t backbone_hash = 0;
};

struct TrainResult {
    std::vector<Checkpoint> checkpoints;  // warm, then (joint, pushed, final) per push cycle
    std::size_t best = 0;                 // index of the selected final checkpoint
    std::vector<EpochLog> log;

    const Checkpoint& best_checkpoint() const { return checkpoints.at(best); }
};

using EpochCallback = std::function<void(const EpochLog&)>;

/// Warm epochs, joint epochs with periodic push + last-layer optimisation, best-by-validation selection.
/// Deterministic for a fixed config, data order and seed.
TrainResult train(const TrainConfig& config, std::span<const ImageSample> train_set,
                  std::span<const ImageSample> val_set, const EpochCallback& on_epoch = {});

/// Replaces each prototype by the nearest patch feature among training samples of its class
/// and fills the bank's projection record. Ties keep the first sample/patch in order.
void project_prototypes(ProtoNet& model, std::span<const ImageSample> train_set);

/// The same search on precomputed feature maps.
void project_bank(PrototypeBank& bank, std::span<const FeatureMap> features, std::span<const int> labels,
                  std::span<const std::string> sample_ids);

struct LastLayerResult {
    ClassConnectionMatrix connections;
    std::vector<double> objective;  // composite objective after each accepted step, starting value first
    std::vector<double> mwce;
};

/// Proximal gradient descent with backtracking on
/// mean_i w_{y_i} CE(scores_i^T W, y_i) + l1 * sum of |off-class entries of W|.
LastLayerResult optimize_last_layer(const Eigen::MatrixXd& scores, std::span<const int> labels,
                                    const ClassConnectionMatrix& initial, int per_class,
                                    const WeightVector& class_weights, double l1_coeff, int iterations);

/// Computes scores on the training set and optimises the model's connections in place.
LastLayerResult optimize_last_layer(ProtoNet& model, std::span<const ImageSample> train_set,
                                    const WeightVector& class_weights, double l1_coeff, int iterations);

std::vector<int> predict_all(const ProtoNet& model, std::span<const ImageSample> samples);
Metrics evaluate(const ProtoNet& model, std::span<const ImageSample> samples);

std::vector<int> labels_of(std::span<const ImageSample> samples);
std::array<long, kNumGrades> require_all_classes(std::span<const ImageSample> samples, std::string_view what);

/// Appends rows: epoch,stage,mwce,clst,sep,div,total,val_class_avg_acc,val_class_avg_f1,val_sample_acc.
void write_epoch_csv(const std::filesystem::path& path, std::span<const EpochLog> log);

/// FNV-1a of a string, hex-encoded; used to tag checkpoints with their config.
std::string hash_string(std::string_view text);

/// Canonical JSON of everything that affects training; hashed into checkpoints.
nlohmann::json train_config_to_json(const TrainConfig& config);

}  // namespace protoverse
