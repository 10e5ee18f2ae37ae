#pragma once

#include <Eigen/Dense>

#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"
#include "protoverse/image.hpp"
#include "protoverse/model.hpp"

namespace protoverse {

/// Bilinear upsampling of an H'xW' map to the input resolution.
Image upsample_heatmap(const Image& simmap, int target_height, int target_width);

/// Tight box around pixels at or above the mass_fraction quantile of the heatmap values,
/// so the default keeps the top 2% of pixels. A constant heatmap yields the full image.
BBox extract_patch_bbox(const Image& heatmap, double mass_fraction = 0.98);

/// Similarity map of prototype p over the feature grid of one input.
Image prototype_similarity_map(const PrototypeActivations& act, int p, int grid_height, int grid_width,
                               double epsilon);

struct ExplanationEntry {
    int prototype = 0;
    int prototype_class = 0;
    double similarity = 0.0;
    double connection = 0.0;    // weight from this prototype to the predicted class
    double contribution = 0.0;  // similarity * connection
    Image heatmap;              // upsampled to the input size
    BBox bbox;
    std::optional<ProjectionEntry> source;
};

struct Explanation {
    std::string sample_id;
    int predicted = 0;
    int label = 0;
    Eigen::VectorXd logits;
    std::vector<ExplanationEntry> entries;  // by similarity, descending
};

/// Top-k prototypes over the whole bank. Requires a pushed model.
Explanation explain_sample(const ProtoNet& model, const ImageSample& sample, int k = 3);

struct PrototypeVisual {
    int prototype = 0;
    int prototype_class = 0;
    ProjectionEntry source;
    Image source_image;
    Image heatmap;
    BBox bbox;
};

/// One visual per prototype, rendered from the recorded source sample.
std::vector<PrototypeVisual> prototype_gallery(const ProtoNet& model, std::span<const ImageSample> train_set);

/// Rows: true class of the test samples. Columns: prototype class. Entry: mean over the row's
/// samples of sum_{p in column class} similarity_p * w(p, row class).
Eigen::MatrixXd contribution_matrix(const ProtoNet& model, std::span<const ImageSample> test_set);

Eigen::MatrixXd prototype_cosine_matrix(const PrototypeBank& bank);

/// Mean |cosine| over distinct same-class prototype pairs.
double mean_within_class_abs_cosine(const PrototypeBank& bank);

nlohmann::json explanation_to_json(const Explanation& e);

/// Writes <dir>/explanation.json, test.png and one overlay per entry.
void export_explanation(const std::filesystem::path& dir, const Explanation& e, const ImageSample& sample,
                        std::span<const PrototypeVisual> gallery);
/// Writes one overlay and patch crop per prototype plus gallery.json.
void export_gallery(const std::filesystem::path& dir, std::span<const PrototypeVisual> gallery);

}  // namespace protoverse
