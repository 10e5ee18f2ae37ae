#pragma once

#include <Eigen/Dense>

#include <span>
#include <string_view>
#include <vector>

#include "protoverse/model.hpp"

namespace protoverse {

enum class WeightingStrategy { uniform, ins, isns, median_frequency, literal_eq3 };

std::string_view strategy_name(WeightingStrategy s);
WeightingStrategy strategy_from_name(std::string_view name);

struct LossWeights {
    double lambda_clst = 0.8;
    double lambda_sep = 0.08;  // enters the total with a negative sign
    double lambda_div = 0.3;
    WeightingStrategy weighting = WeightingStrategy::median_frequency;
    bool normalized_diversity = false;  // cosine instead of raw dot products
};

/// Per-class cross-entropy weights and the counts they were derived from.
struct WeightVector {
    Eigen::VectorXd w;
    WeightingStrategy strategy = WeightingStrategy::uniform;
    std::vector<long> counts;
};

/// uniform: 1. ins: 1/d_j and isns: 1/sqrt(d_j), both rescaled to mean 1.
/// median_frequency: median(d)/d_j. literal_eq3: median(d) / sum_{l != j} d_l.
WeightVector mwce_weights(std::span<const long> class_counts, WeightingStrategy strategy);

/// Floor applied to the true-class probability before the logarithm.
inline constexpr double kLogFloor = 1e-12;

/// -w_label * log(softmax(logits)_label). Optionally writes dL/dlogits.
double mwce_loss(const Eigen::VectorXd& logits, int label, const WeightVector& weights,
                 Eigen::VectorXd* grad_logits = nullptr);

/// Gradients of a batch loss: one matrix for the bank, one per feature map.
struct PatchLossGrad {
    Eigen::MatrixXd prototypes;
    std::vector<Eigen::MatrixXd> features;
};

/// Mean over samples of the smallest squared distance between any own-class prototype and any patch.
double cluster_loss(std::span<const FeatureMap> features, std::span<const int> labels, const PrototypeBank& bank,
                    PatchLossGrad* grad = nullptr);

/// As cluster_loss, over prototypes of the other classes.
double separation_loss(std::span<const FeatureMap> features, std::span<const int> labels, const PrototypeBank& bank,
                       PatchLossGrad* grad = nullptr);

/// 2/(c m (m-1)) * sum over classes and ordered pairs k != l of (p_k . p_l)^2.
/// With `normalized`, the dot product is replaced by the cosine.
double diversity_loss(const PrototypeBank& bank, Eigen::MatrixXd* grad = nullptr, bool normalized = false);

struct LossBreakdown {
    double mwce = 0.0;
    double clst = 0.0;
    double sep = 0.0;
    double div = 0.0;
    double total = 0.0;
};

/// Per-sample terms with gradients scaled by `scale` and accumulated into the outputs:
/// d(mwce + lambda_clst*clst - lambda_sep*sep)/d(features, prototypes).
struct SampleLossTerms {
    double mwce = 0.0;
    double clst = 0.0;
    double sep = 0.0;
    Eigen::VectorXd logits;
};

SampleLossTerms sample_loss_terms(const FeatureMap& fmap, int label, const PrototypeBank& bank,
                                  const ClassConnectionMatrix& connections, const WeightVector& class_weights,
                                  const LossWeights& lambdas, double epsilon, double scale = 1.0,
                                  Eigen::MatrixXd* grad_features = nullptr, Eigen::MatrixXd* grad_prototypes = nullptr);

/// total = mean MWCE + lambda_clst*clst - lambda_sep*sep + lambda_div*div.
LossBreakdown total_loss(std::span<const FeatureMap> features, std::span<const int> labels, const PrototypeBank& bank,
                         const ClassConnectionMatrix& connections, const LossWeights& lambdas,
                         const WeightVector& class_weights, double epsilon, PatchLossGrad* grad = nullptr);

}  // namespace protoverse
