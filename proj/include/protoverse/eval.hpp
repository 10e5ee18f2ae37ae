#pragma once

#include <filesystem>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"
#include "protoverse/config.hpp"
#include "protoverse/explain.hpp"
#include "protoverse/metrics.hpp"

namespace protoverse {

/// k disjoint stratified folds covering every index. Throws DataError when a fold lacks a class.
std::vector<std::vector<std::size_t>> stratified_folds(std::span<const int> labels, int num_classes, int k,
                                                       std::uint64_t seed);

/// Splits a training pool into (train, val) with every class present in the validation part.
std::array<std::vector<ImageSample>, 2> carve_validation(std::span<const ImageSample> pool, double val_fraction,
                                                         std::uint64_t seed);

struct VariantOutcome {
    Metrics test;
    std::optional<double> within_class_cosine;  // prototype variants only
};

/// Trains one named variant (protoverse, protoverse_no_div, protoverse_uniform, baseline) and tests it.
VariantOutcome run_variant(const std::string& variant, const TrainConfig& config,
                           std::span<const ImageSample> train_set, std::span<const ImageSample> val_set,
                           std::span<const ImageSample> test_set);

struct Summary {
    double mean = 0.0;
    double stddev = 0.0;  // sample standard deviation
};
Summary summarize(std::span<const double> values);

struct PairwiseTest {
    std::string a;
    std::string b;
    WilcoxonResult result;
    Alternative alternative = Alternative::greater;
};

struct CVReport {
    int folds = 0;
    std::vector<std::string> variants;
    std::vector<std::vector<Metrics>> per_fold;  // [variant][fold]
    std::vector<std::vector<std::optional<double>>> cosine;
    std::vector<PairwiseTest> tests;              // on class-average accuracy, a better than b

    std::vector<double> metric(std::size_t variant, const std::string& name) const;
};

/// Trains every variant on identical fold partitions of `pool`; pairwise one-sided Wilcoxon on
/// per-fold class-average accuracy.
CVReport cross_validate(const ExperimentConfig& config, std::span<const ImageSample> pool,
                        const std::vector<std::string>& variants);

nlohmann::json cv_report_to_json(const CVReport& r);

enum class AblationAxis { num_prototypes, lambda_div, weighting };
std::string_view axis_name(AblationAxis a);
AblationAxis axis_from_name(std::string_view name);

struct AblationRow {
    std::string value;
    std::vector<double> class_avg_accuracy;  // per fold
    std::vector<double> class_avg_f1;
    std::vector<double> sample_accuracy;
    std::optional<double> within_class_cosine;  // mean over folds, lambda_div axis
    std::string error;                          // non-empty when the cell failed
};

struct AblationReport {
    AblationAxis axis = AblationAxis::num_prototypes;
    std::vector<AblationRow> rows;
};

/// One ProtoVerse cross-validation per grid value; a failing cell is recorded and the grid continues.
AblationReport run_ablation(const ExperimentConfig& config, AblationAxis axis, std::span<const ImageSample> pool);

/// Writes ablation.csv, ablation.json and ablation.svg into `dir`.
void write_ablation(const std::filesystem::path& dir, const AblationReport& report);
std::string ablation_svg(const AblationReport& report);

/// Writes one HTML sheet per fracture-grade explanation plus ratings_template.csv and sheets.json.
/// Returns the number of sheets written.
int make_rating_sheets(const std::filesystem::path& dir, std::span<const Explanation> explanations,
                       std::span<const ImageSample> test_set, std::span<const PrototypeVisual> gallery);

struct RatingCell {
    long yes = 0;
    long total = 0;
    double fraction() const { return total > 0 ? static_cast<double>(yes) / static_cast<double>(total) : 0.0; }
};

struct IncompleteRating {
    std::string sample_id;
    std::string rater_id;
    std::string reason;
};

struct ClinicalReport {
    // rater -> grade name (or "total") -> question (1 or 2) -> cell
    std::map<std::string, std::map<std::string, std::map<int, RatingCell>>> cells;
    std::vector<IncompleteRating> incomplete;
};

/// Applies the 2-of-3 rule per (sample, rater, question). `grades` maps sample ids to grade names.
ClinicalReport ingest_ratings(std::istream& csv, const std::map<std::string, std::string>& grades);
ClinicalReport ingest_ratings(const std::filesystem::path& csv, const std::filesystem::path& sheets_index);

nlohmann::json clinical_report_to_json(const ClinicalReport& r);
std::string clinical_report_csv(const ClinicalReport& r);

}  // namespace protoverse
