#pragma once

#include <span>
#include <string_view>
#include <vector>

#include "json.hpp"

namespace protoverse {

/// Classification quality, all values in percent.
struct Metrics {
    std::vector<double> per_class_accuracy;  // per-class recall
    std::vector<double> per_class_f1;
    double class_avg_accuracy = 0.0;
    double class_avg_f1 = 0.0;
    double sample_accuracy = 0.0;
    std::vector<std::vector<long>> confusion;  // [true][predicted]
};

/// Throws DataError when a class has no labelled sample (its recall is undefined).
Metrics compute_metrics(std::span<const int> predictions, std::span<const int> labels, int num_classes);

/// Unweighted mean of per-class accuracies.
double class_average(std::span<const double> per_class);

nlohmann::json metrics_to_json(const Metrics& m);
Metrics metrics_from_json(const nlohmann::json& j);

enum class Alternative { greater, less, two_sided };
std::string_view alternative_name(Alternative a);

struct WilcoxonResult {
    double statistic = 0.0;  // W+, sum of ranks of positive differences a - b
    double p_value = 1.0;
    int n_used = 0;          // pairs left after dropping zero differences
    bool no_difference = false;
    bool exact = true;
};

/// Signed-rank test on paired samples. Zero differences are dropped and tied magnitudes get
/// midranks. The null distribution is enumerated exactly up to 50 pairs, normal beyond.
WilcoxonResult wilcoxon_signed_rank(std::span<const double> a, std::span<const double> b,
                                    Alternative alternative = Alternative::greater);

}  // namespace protoverse
