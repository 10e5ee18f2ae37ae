#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "json.hpp"
#include "protoverse/image.hpp"
#include "protoverse/rng.hpp"

namespace protoverse {

/// Genant grades kept by the classifier. G1 is not modelled.
enum class Grade : int { G0 = 0, G2 = 1, G3 = 2 };
inline constexpr int kNumGrades = 3;

std::string_view grade_name(Grade g);
Grade grade_from_name(std::string_view name);
inline int grade_index(Grade g) { return static_cast<int>(g); }
Grade grade_from_index(int index);

enum class SampleSource { synthetic, reformatted };
enum class DeformityStyle { anterior_wedge, biconcave, crush };

std::string_view style_name(DeformityStyle s);
DeformityStyle style_from_name(std::string_view name);

/// Ground truth written by the renderer for the vertebra of interest.
struct VertebraGeometry {
    BBox center_bbox;              // tight box around rasterised centre body
    double template_height = 0.0;  // healthy body height in this image, pixels
    double min_height = 0.0;       // smallest rasterised column height of the centre body
    double reduction = 0.0;
    DeformityStyle style = DeformityStyle::crush;
    double centroid_y = 0.0;
    double centroid_x = 0.0;

    friend bool operator==(const VertebraGeometry&, const VertebraGeometry&) = default;
};

/// Two-channel network input: intensity image plus a Gaussian marking the vertebra of interest.
struct ImageSample {
    std::string sample_id;
    Grade grade = Grade::G0;
    SampleSource source = SampleSource::synthetic;
    Image image;
    Image centroid_channel;
    std::optional<VertebraGeometry> geometry;
    bool context_truncated = false;

    int height() const { return image.height; }
    int width() const { return image.width; }
    void validate() const;
};

struct ReductionRange {
    double lo = 0.0;
    double hi = 0.0;
    bool contains(double r) const { return r >= lo && r <= hi; }
};

struct SyntheticConfig {
    std::array<int, kNumGrades> counts{500, 60, 40};
    int image_size = 112;
    int context_vertebrae = 1;  // healthy vertebrae rendered above and below the centre one
    std::array<ReductionRange, kNumGrades> reduction_ranges{{{0.0, 0.04}, {0.25, 0.37}, {0.45, 0.70}}};
    std::array<double, 3> style_weights{1.0, 1.0, 1.0};  // anterior wedge, biconcave, crush
    double noise = 0.04;
    double centroid_sigma = 0.0;  // 0 selects image_size / 16
    std::uint64_t seed = 7;
    std::string id_prefix = "syn";

    /// Throws ConfigError when ranges leave the Genant bands or the stack cannot fit.
    void validate() const;
    double effective_sigma() const { return centroid_sigma > 0 ? centroid_sigma : image_size / 16.0; }
};

/// Per-image layout of the vertebral stack. Fixed layout plus fixed grade/reduction/style
/// gives a fixed geometry record regardless of the noise seed.
struct VertebraLayout {
    double template_height = 0.0;
    double template_width = 0.0;
    double disc_gap = 0.0;
    double offset_y = 0.0;
    double offset_x = 0.0;
    double background = 0.12;
    double body_intensity = 0.55;
    double rim_intensity = 0.9;
};

VertebraLayout default_layout(const SyntheticConfig& config);
VertebraLayout sample_layout(const SyntheticConfig& config, Rng& rng);

/// Renders one vertebral stack; the centre vertebra carries the requested deformity.
/// `seed` drives only the noise texture.
ImageSample render_vertebra_image(Grade grade, double reduction, DeformityStyle style, std::uint64_t seed,
                                  const SyntheticConfig& config = {},
                                  const std::optional<VertebraLayout>& layout = std::nullopt);

/// exp(-|p - centroid|^2 / (2 sigma^2)) evaluated at pixel centres indexed (y, x).
Image make_centroid_channel(double centroid_y, double centroid_x, double sigma, int height, int width);

enum class Split { train, val, test };
std::string_view split_name(Split s);
Split split_from_name(std::string_view name);

struct ManifestEntry {
    std::string sample_id;
    std::string path;  // relative to the manifest directory
    Grade grade = Grade::G0;
    std::optional<VertebraGeometry> geometry;
};

struct DatasetManifest {
    std::vector<ManifestEntry> samples;
    std::array<long, kNumGrades> class_counts{};
    Split split = Split::train;
    std::uint64_t seed = 0;

    void recount();
    void validate() const;
};

struct GeneratedDataset {
    DatasetManifest manifest;
    std::vector<ImageSample> samples;
};

/// Pure in-memory generation; the manifest paths name the files `generate_synthetic_dataset` would write.
GeneratedDataset generate_synthetic_samples(const SyntheticConfig& config);

/// Generates, writes `<id>.pvimg` files and `manifest.json` into `out_dir`.
DatasetManifest generate_synthetic_dataset(const SyntheticConfig& config, const std::filesystem::path& out_dir,
                                           bool also_png = false);

// Sample container: 8 magic bytes "PVIMG\0\1\0", uint32 channels, height, width (little-endian),
// then channels*height*width float32 values, channel-major, row-major.
void write_sample(const std::filesystem::path& path, const ImageSample& sample);
ImageSample read_sample(const std::filesystem::path& path);

nlohmann::json manifest_to_json(const DatasetManifest& manifest);
DatasetManifest manifest_from_json(const nlohmann::json& j);
void write_manifest(const std::filesystem::path& path, const DatasetManifest& manifest);
DatasetManifest read_manifest(const std::filesystem::path& path);

/// Loads every image named by the manifest; grade and geometry come from the manifest.
std::vector<ImageSample> load_samples(const DatasetManifest& manifest, const std::filesystem::path& base_dir);

nlohmann::json geometry_to_json(const VertebraGeometry& g);
VertebraGeometry geometry_from_json(const nlohmann::json& j);

struct Point3 {
    double x = 0.0;
    double y = 0.0;
    double z = 0.0;
};

/// Raw CT-like volume indexed [z][y][x]; z runs cranial to caudal.
struct Volume {
    int size_x = 0;
    int size_y = 0;
    int size_z = 0;
    std::vector<float> voxels;
    std::vector<Point3> centroids;  // ordered cranial to caudal

    float at(int x, int y, int z) const {
        return voxels[(static_cast<std::size_t>(z) * size_y + y) * size_x + x];
    }
    bool inside(double x, double y, double z) const;
    /// Trilinear sample; zero outside the grid.
    double sample(double x, double y, double z) const;
    void validate() const;
};

/// Natural cubic spline through (t_i, v_i) with strictly increasing knots.
class NaturalCubicSpline {
public:
    NaturalCubicSpline(std::vector<double> knots, std::vector<double> values);
    double operator()(double t) const;
    double derivative(double t) const;

private:
    std::vector<double> t_;
    std::vector<double> v_;
    std::vector<double> m_;  // second derivatives at knots
};

struct ReformatOptions {
    int roi = 112;
    int out_size = 224;
    double centroid_sigma = 0.0;  // 0 selects out_size / 16
};

/// Straightened mid-vertebral sagittal reformation around centroid `target_index`.
/// Rows follow arc length along the centroid spline, columns the anterior-posterior axis.
ImageSample reformat_midvertebral(const Volume& volume, int target_index, const ReformatOptions& options = {});

/// Largest-remainder stratified allocation. Returns, per part, indices into `labels`.
std::vector<std::vector<std::size_t>> stratified_partition(std::span<const int> labels, int num_classes,
                                                           std::span<const double> fractions,
                                                           std::uint64_t seed);

std::array<DatasetManifest, 3> split_dataset(const DatasetManifest& manifest, std::array<double, 3> fractions,
                                             std::uint64_t seed);

/// Convenience for in-memory sample lists.
std::array<std::vector<ImageSample>, 3> split_samples(const std::vector<ImageSample>& samples,
                                                      std::array<double, 3> fractions, std::uint64_t seed);

std::array<long, kNumGrades> count_grades(std::span<const ImageSample> samples);

}  // namespace protoverse
