#include "protoverse/datagen.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <iomanip>
#include <numeric>
#include <sstream>

#include "protoverse/errors.hpp"

namespace protoverse {

namespace fs = std::filesystem;
using nlohmann::json;

std::string_view grade_name(Grade g) {
    switch (g) {
        case Grade::G0: return "G0";
        case Grade::G2: return "G2";
        case Grade::G3: return "G3";
    }
    return "?";
}

Grade grade_from_name(std::string_view name) {
    if (name == "G0") return Grade::G0;
    if (name == "G2") return Grade::G2;
    if (name == "G3") return Grade::G3;
    throw DataError("unknown grade '" + std::string(name) + "' (expected G0, G2 or G3)");
}

Grade grade_from_index(int index) {
    if (index < 0 || index >= kNumGrades) throw DataError("grade index out of range: " + std::to_string(index));
    return static_cast<Grade>(index);
}

std::string_view style_name(DeformityStyle s) {
    switch (s) {
        case DeformityStyle::anterior_wedge: return "anterior_wedge";
        case DeformityStyle::biconcave: return "biconcave";
        case DeformityStyle::crush: return "crush";
    }
    return "?";
}

DeformityStyle style_from_name(std::string_view name) {
    if (name == "anterior_wedge") return DeformityStyle::anterior_wedge;
    if (name == "biconcave") return DeformityStyle::biconcave;
    if (name == "crush") return DeformityStyle::crush;
    throw DataError("unknown deformity style '" + std::string(name) + "'");
}

std::string_view split_name(Split s) {
    switch (s) {
        case Split::train: return "train";
        case Split::val: return "val";
        case Split::test: return "test";
    }
    return "?";
}

Split split_from_name(std::string_view name) {
    if (name == "train") return Split::train;
    if (name == "val") return Split::val;
    if (name == "test") return Split::test;
    throw DataError("unknown split '" + std::string(name) + "'");
}

void ImageSample::validate() const {
    if (image.empty()) throw DataError("sample " + sample_id + ": empty image");
    if (image.height != centroid_channel.height || image.width != centroid_channel.width) {
        throw ShapeError("sample " + sample_id + ": image and centroid channel differ in size");
    }
}

// ---------------------------------------------------------------------------------------------
// Synthetic renderer

namespace {

// Layout proportions relative to the image side.
constexpr double kTemplateHeight = 0.24;
constexpr double kTemplateWidth = 0.38;
constexpr double kDiscGap = 0.08;
constexpr double kHeightJitter = 0.04;
constexpr double kWidthJitter = 0.08;
constexpr double kGapJitter = 0.10;
constexpr double kOffsetJitter = 3.0 / 112.0;

// Height lost by the centre body at normalised anterior-posterior position u in [0,1].
double height_loss(DeformityStyle style, double reduction, double template_height, double u) {
    const double full = reduction * template_height;
    switch (style) {
        case DeformityStyle::crush: return full;
        case DeformityStyle::anterior_wedge: return full * (1.0 - u);
        case DeformityStyle::biconcave: {
            const double c = 2.0 * u - 1.0;
            return full * (1.0 - c * c);
        }
    }
    return full;
}

}  // namespace

void SyntheticConfig::validate() const {
    for (int g = 0; g < kNumGrades; ++g) {
        if (counts[g] < 0) throw ConfigError("counts", "negative count for grade " + std::string(grade_name(grade_from_index(g))));
        const auto& r = reduction_ranges[g];
        if (!(r.lo <= r.hi)) throw ConfigError("reduction_ranges", "lower bound exceeds upper bound");
    }
    const auto& g0 = reduction_ranges[0];
    const auto& g2 = reduction_ranges[1];
    const auto& g3 = reduction_ranges[2];
    if (g0.lo < 0.0 || g0.hi >= 0.05) throw ConfigError("reduction_ranges.G0", "must lie within [0, 0.05)");
    if (g2.lo < 0.25 || g2.hi > 0.40) throw ConfigError("reduction_ranges.G2", "must lie within [0.25, 0.40]");
    if (g3.lo <= 0.40 || g3.hi > 0.70) throw ConfigError("reduction_ranges.G3", "must lie within (0.40, 0.70]");
    if (noise < 0.0) throw ConfigError("noise", "must be non-negative");
    if (context_vertebrae < 0) throw ConfigError("context_vertebrae", "must be non-negative");
    if (std::any_of(style_weights.begin(), style_weights.end(), [](double w) { return w < 0.0; }) ||
        std::accumulate(style_weights.begin(), style_weights.end(), 0.0) <= 0.0) {
        throw ConfigError("style_weights", "must be non-negative with a positive sum");
    }
    if (image_size < 32) throw ConfigError("image_size", "at least 32 pixels required");
    const double s = image_size;
    const int stack = 2 * context_vertebrae + 1;
    const double extent = stack * kTemplateHeight * (1 + kHeightJitter) * s +
                          (stack - 1) * kDiscGap * (1 + kGapJitter) * s + 2.0 * kOffsetJitter * s;
    if (extent > s) {
        throw ConfigError("image_size", "image of " + std::to_string(image_size) + " px cannot fit a stack of " +
                                            std::to_string(stack) + " vertebrae");
    }
}

VertebraLayout default_layout(const SyntheticConfig& config) {
    const double s = config.image_size;
    VertebraLayout layout;
    layout.template_height = kTemplateHeight * s;
    layout.template_width = kTemplateWidth * s;
    layout.disc_gap = kDiscGap * s;
    return layout;
}

VertebraLayout sample_layout(const SyntheticConfig& config, Rng& rng) {
    const double s = config.image_size;
    VertebraLayout layout = default_layout(config);
    layout.template_height *= uniform(rng, 1 - kHeightJitter, 1 + kHeightJitter);
    layout.template_width *= uniform(rng, 1 - kWidthJitter, 1 + kWidthJitter);
    layout.disc_gap *= uniform(rng, 1 - kGapJitter, 1 + kGapJitter);
    layout.offset_y = uniform(rng, -kOffsetJitter, kOffsetJitter) * s;
    layout.offset_x = uniform(rng, -kOffsetJitter, kOffsetJitter) * s;
    layout.background = uniform(rng, 0.08, 0.18);
    layout.body_intensity = uniform(rng, 0.45, 0.62);
    layout.rim_intensity = uniform(rng, 0.80, 0.95);
    return layout;
}

Image make_centroid_channel(double centroid_y, double centroid_x, double sigma, int height, int width) {
    if (!(sigma > 0.0)) throw DomainError("make_centroid_channel: sigma must be positive");
    if (height <= 0 || width <= 0) throw ShapeError("make_centroid_channel: non-positive size");
    if (centroid_y < 0.0 || centroid_y > height - 1 || centroid_x < 0.0 || centroid_x > width - 1) {
        throw DomainError("make_centroid_channel: centroid outside the image");
    }
    Image out(height, width);
    const double inv = 1.0 / (2.0 * sigma * sigma);
    for (int y = 0; y < height; ++y) {
        for (int x = 0; x < width; ++x) {
            const double dy = y - centroid_y;
            const double dx = x - centroid_x;
            out.at(y, x) = static_cast<float>(std::exp(-(dy * dy + dx * dx) * inv));
        }
    }
    return out;
}

ImageSample render_vertebra_image(Grade grade, double reduction, DeformityStyle style, std::uint64_t seed,
                                  const SyntheticConfig& config, const std::optional<VertebraLayout>& layout_opt) {
    const auto& range = config.reduction_ranges[grade_index(grade)];
    if (!range.contains(reduction)) {
        std::ostringstream msg;
        msg << "reduction " << reduction << " outside the configured range [" << range.lo << ", " << range.hi
            << "] for " << grade_name(grade);
        throw DomainError(msg.str());
    }
    const VertebraLayout layout = layout_opt.value_or(default_layout(config));
    const int size = config.image_size;
    const double cy = size / 2.0 + layout.offset_y;
    const double cx = size / 2.0 + layout.offset_x;
    const double ht = layout.template_height;
    const double wt = layout.template_width;
    const double xl = cx - wt / 2.0;
    const double xr = cx + wt / 2.0;
    const double rim = std::max(1.5, size / 56.0);

    ImageSample sample;
    sample.grade = grade;
    sample.source = SampleSource::synthetic;
    sample.image = Image(size, size, static_cast<float>(layout.background));

    Rng noise_rng(seed);
    std::vector<unsigned char> centre_mask(static_cast<std::size_t>(size) * size, 0);

    for (int k = -config.context_vertebrae; k <= config.context_vertebrae; ++k) {
        const double vy = cy + k * (ht + layout.disc_gap);
        for (int x = 0; x < size; ++x) {
            const double px = x + 0.5;
            if (px < xl || px >= xr) continue;
            const double u = (px - xl) / wt;
            const double loss = (k == 0) ? height_loss(style, reduction, ht, u) : 0.0;
            const double top = vy - ht / 2.0 + loss / 2.0;
            const double bottom = vy + ht / 2.0 - loss / 2.0;
            for (int y = 0; y < size; ++y) {
                const double py = y + 0.5;
                if (py < top || py >= bottom) continue;
                const double edge = std::min({py - top, bottom - py, px - xl, xr - px});
                sample.image.at(y, x) = static_cast<float>(edge < rim ? layout.rim_intensity : layout.body_intensity);
                if (k == 0) centre_mask[static_cast<std::size_t>(y) * size + x] = 1;
            }
        }
    }

    for (auto& v : sample.image.pixels) {
        v = static_cast<float>(std::clamp(v + config.noise * normal(noise_rng), 0.0, 1.0));
    }

    VertebraGeometry geo;
    geo.template_height = ht;
    geo.reduction = reduction;
    geo.style = style;
    geo.centroid_y = cy - 0.5;  // pixel-index coordinates
    geo.centroid_x = cx - 0.5;
    BBox box{size, size, 0, 0};
    double min_height = ht;
    for (int x = 0; x < size; ++x) {
        int column = 0;
        for (int y = 0; y < size; ++y) {
            if (!centre_mask[static_cast<std::size_t>(y) * size + x]) continue;
            ++column;
            box.x0 = std::min(box.x0, x);
            box.x1 = std::max(box.x1, x + 1);
            box.y0 = std::min(box.y0, y);
            box.y1 = std::max(box.y1, y + 1);
        }
        if (column > 0) min_height = std::min(min_height, static_cast<double>(column));
    }
    geo.center_bbox = box;
    geo.min_height = min_height;
    sample.geometry = geo;
    sample.centroid_channel =
        make_centroid_channel(geo.centroid_y, geo.centroid_x, config.effective_sigma(), size, size);
    return sample;
}

// ---------------------------------------------------------------------------------------------
// Dataset generation and manifests

void DatasetManifest::recount() {
    class_counts.fill(0);
    for (const auto& e : samples) ++class_counts[grade_index(e.grade)];
}

void DatasetManifest::validate() const {
    std::array<long, kNumGrades> counts{};
    std::vector<std::string> ids;
    ids.reserve(samples.size());
    for (const auto& e : samples) {
        ++counts[grade_index(e.grade)];
        ids.push_back(e.sample_id);
    }
    if (counts != class_counts) throw DataError("manifest class_counts do not match its samples");
    std::sort(ids.begin(), ids.end());
    if (auto dup = std::adjacent_find(ids.begin(), ids.end()); dup != ids.end()) {
        throw DataError("duplicate sample_id in manifest: " + *dup);
    }
    if (split == Split::train) {
        for (int g = 0; g < kNumGrades; ++g) {
            if (counts[g] < 1) {
                throw DataError("train manifest has no samples of grade " + std::string(grade_name(grade_from_index(g))));
            }
        }
    }
}

static std::string make_id(const std::string& prefix, std::size_t index) {
    std::ostringstream os;
    os << prefix << '_' << std::setw(5) << std::setfill('0') << index;
    return os.str();
}

GeneratedDataset generate_synthetic_samples(const SyntheticConfig& config) {
    config.validate();
    const long total = std::accumulate(config.counts.begin(), config.counts.end(), 0L);
    if (total == 0) throw DataError("synthetic config requests zero samples: empty manifest");

    const double weight_sum = std::accumulate(config.style_weights.begin(), config.style_weights.end(), 0.0);
    GeneratedDataset out;
    out.manifest.seed = config.seed;
    out.manifest.split = Split::train;
    out.samples.reserve(static_cast<std::size_t>(total));
    std::size_t index = 0;
    for (int g = 0; g < kNumGrades; ++g) {
        const Grade grade = grade_from_index(g);
        const auto& range = config.reduction_ranges[g];
        for (int i = 0; i < config.counts[g]; ++i, ++index) {
            Rng rng(mix_seed(config.seed, index));
            const VertebraLayout layout = sample_layout(config, rng);
            const double reduction = uniform(rng, range.lo, range.hi);
            double pick = uniform(rng, 0.0, weight_sum);
            int style = 0;
            while (style < 2 && pick >= config.style_weights[style]) pick -= config.style_weights[style++];
            const std::uint64_t noise_seed = rng();
            ImageSample sample =
                render_vertebra_image(grade, reduction, static_cast<DeformityStyle>(style), noise_seed, config, layout);
            sample.sample_id = make_id(config.id_prefix, index);
            out.manifest.samples.push_back({sample.sample_id, sample.sample_id + ".pvimg", grade, sample.geometry});
            out.samples.push_back(std::move(sample));
        }
    }
    out.manifest.recount();
    return out;
}

DatasetManifest generate_synthetic_dataset(const SyntheticConfig& config, const fs::path& out_dir, bool also_png) {
    GeneratedDataset data = generate_synthetic_samples(config);
    fs::create_directories(out_dir);
    for (const auto& sample : data.samples) {
        write_sample(out_dir / (sample.sample_id + ".pvimg"), sample);
        if (also_png) {
            write_png16(out_dir / (sample.sample_id + "_image.png"), sample.image);
            write_png16(out_dir / (sample.sample_id + "_centroid.png"), sample.centroid_channel);
        }
    }
    write_manifest(out_dir / "manifest.json", data.manifest);
    return data.manifest;
}

namespace {

constexpr char kMagic[8] = {'P', 'V', 'I', 'M', 'G', '\0', '\1', '\0'};

void put_u32(std::ostream& os, std::uint32_t v) {
    const unsigned char b[4] = {static_cast<unsigned char>(v), static_cast<unsigned char>(v >> 8),
                                static_cast<unsigned char>(v >> 16), static_cast<unsigned char>(v >> 24)};
    os.write(reinterpret_cast<const char*>(b), 4);
}

std::uint32_t get_u32(std::istream& is) {
    unsigned char b[4] = {};
    is.read(reinterpret_cast<char*>(b), 4);
    return b[0] | (b[1] << 8) | (b[2] << 16) | (static_cast<std::uint32_t>(b[3]) << 24);
}

void put_floats(std::ostream& os, const std::vector<float>& values) {
    for (float f : values) {
        std::uint32_t bits;
        std::memcpy(&bits, &f, 4);
        put_u32(os, bits);
    }
}

void get_floats(std::istream& is, std::vector<float>& values) {
    for (auto& f : values) {
        const std::uint32_t bits = get_u32(is);
        std::memcpy(&f, &bits, 4);
    }
}

}  // namespace

void write_sample(const fs::path& path, const ImageSample& sample) {
    sample.validate();
    std::ofstream os(path, std::ios::binary);
    if (!os) throw DataError("cannot write " + path.string());
    os.write(kMagic, sizeof kMagic);
    put_u32(os, 2);
    put_u32(os, static_cast<std::uint32_t>(sample.image.height));
    put_u32(os, static_cast<std::uint32_t>(sample.image.width));
    put_floats(os, sample.image.pixels);
    put_floats(os, sample.centroid_channel.pixels);
}

ImageSample read_sample(const fs::path& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw DataError("cannot read sample file " + path.string());
    char magic[8] = {};
    is.read(magic, sizeof magic);
    if (std::memcmp(magic, kMagic, sizeof kMagic) != 0) throw DataError(path.string() + ": bad magic bytes");
    const auto channels = get_u32(is);
    const auto h = static_cast<int>(get_u32(is));
    const auto w = static_cast<int>(get_u32(is));
    if (channels != 2 || h <= 0 || w <= 0 || h > 1 << 14 || w > 1 << 14) {
        throw DataError(path.string() + ": unsupported header");
    }
    ImageSample sample;
    sample.image = Image(h, w);
    sample.centroid_channel = Image(h, w);
    get_floats(is, sample.image.pixels);
    get_floats(is, sample.centroid_channel.pixels);
    if (!is) throw DataError(path.string() + ": truncated file");
    sample.sample_id = path.stem().string();
    return sample;
}

json geometry_to_json(const VertebraGeometry& g) {
    return json{{"center_bbox", {g.center_bbox.x0, g.center_bbox.y0, g.center_bbox.x1, g.center_bbox.y1}},
                {"template_height", g.template_height},
                {"min_height", g.min_height},
                {"reduction", g.reduction},
                {"style", style_name(g.style)},
                {"centroid", {g.centroid_y, g.centroid_x}}};
}

VertebraGeometry geometry_from_json(const json& j) {
    VertebraGeometry g;
    const auto& b = j.at("center_bbox");
    g.center_bbox = {b.at(0).get<int>(), b.at(1).get<int>(), b.at(2).get<int>(), b.at(3).get<int>()};
    g.template_height = j.at("template_height").get<double>();
    g.min_height = j.at("min_height").get<double>();
    g.reduction = j.at("reduction").get<double>();
    g.style = style_from_name(j.at("style").get<std::string>());
    g.centroid_y = j.at("centroid").at(0).get<double>();
    g.centroid_x = j.at("centroid").at(1).get<double>();
    return g;
}

json manifest_to_json(const DatasetManifest& manifest) {
    json samples = json::array();
    for (const auto& e : manifest.samples) {
        json entry{{"sample_id", e.sample_id}, {"path", e.path}, {"grade", grade_name(e.grade)}};
        if (e.geometry) entry["geometry"] = geometry_to_json(*e.geometry);
        samples.push_back(std::move(entry));
    }
    json counts = json::object();
    for (int g = 0; g < kNumGrades; ++g) counts[std::string(grade_name(grade_from_index(g)))] = manifest.class_counts[g];
    return json{{"split", split_name(manifest.split)}, {"seed", manifest.seed}, {"class_counts", counts},
                {"samples", samples}};
}

DatasetManifest manifest_from_json(const json& j) {
    try {
        DatasetManifest m;
        m.split = split_from_name(j.at("split").get<std::string>());
        m.seed = j.at("seed").get<std::uint64_t>();
        for (const auto& e : j.at("samples")) {
            ManifestEntry entry;
            entry.sample_id = e.at("sample_id").get<std::string>();
            entry.path = e.at("path").get<std::string>();
            entry.grade = grade_from_name(e.at("grade").get<std::string>());
            if (e.contains("geometry")) entry.geometry = geometry_from_json(e.at("geometry"));
            m.samples.push_back(std::move(entry));
        }
        for (int g = 0; g < kNumGrades; ++g) {
            m.class_counts[g] = j.at("class_counts").at(std::string(grade_name(grade_from_index(g)))).get<long>();
        }
        m.validate();
        return m;
    } catch (const json::exception& e) {
        throw DataError(std::string("malformed manifest: ") + e.what());
    }
}

void write_manifest(const fs::path& path, const DatasetManifest& manifest) {
    if (path.has_parent_path()) fs::create_directories(path.parent_path());
    std::ofstream os(path);
    if (!os) throw DataError("cannot write " + path.string());
    os << manifest_to_json(manifest).dump(2) << '\n';
}

DatasetManifest read_manifest(const fs::path& path) {
    std::ifstream is(path);
    if (!is) throw DataError("cannot read manifest " + path.string());
    json j;
    try {
        is >> j;
    } catch (const json::exception& e) {
        throw DataError(path.string() + ": " + e.what());
    }
    return manifest_from_json(j);
}

std::vector<ImageSample> load_samples(const DatasetManifest& manifest, const fs::path& base_dir) {
    std::vector<ImageSample> out;
    out.reserve(manifest.samples.size());
    for (const auto& e : manifest.samples) {
        const fs::path p = base_dir / e.path;
        if (!fs::exists(p)) throw DataError("missing image file for sample " + e.sample_id + ": " + p.string());
        ImageSample s = read_sample(p);
        s.sample_id = e.sample_id;
        s.grade = e.grade;
        s.geometry = e.geometry;
        out.push_back(std::move(s));
    }
    return out;
}

std::array<long, kNumGrades> count_grades(std::span<const ImageSample> samples) {
    std::array<long, kNumGrades> counts{};
    for (const auto& s : samples) ++counts[grade_index(s.grade)];
    return counts;
}

// ---------------------------------------------------------------------------------------------
// Volume reformation

bool Volume::inside(double x, double y, double z) const {
    return x >= 0 && y >= 0 && z >= 0 && x <= size_x - 1 && y <= size_y - 1 && z <= size_z - 1;
}

double Volume::sample(double x, double y, double z) const {
    if (!inside(x, y, z)) return 0.0;
    const int x0 = std::min(static_cast<int>(x), size_x - 1), x1 = std::min(x0 + 1, size_x - 1);
    const int y0 = std::min(static_cast<int>(y), size_y - 1), y1 = std::min(y0 + 1, size_y - 1);
    const int z0 = std::min(static_cast<int>(z), size_z - 1), z1 = std::min(z0 + 1, size_z - 1);
    const double fx = x - x0, fy = y - y0, fz = z - z0;
    auto lerp = [](double a, double b, double t) { return a + (b - a) * t; };
    const double c00 = lerp(at(x0, y0, z0), at(x1, y0, z0), fx);
    const double c10 = lerp(at(x0, y1, z0), at(x1, y1, z0), fx);
    const double c01 = lerp(at(x0, y0, z1), at(x1, y0, z1), fx);
    const double c11 = lerp(at(x0, y1, z1), at(x1, y1, z1), fx);
    return lerp(lerp(c00, c10, fy), lerp(c01, c11, fy), fz);
}

void Volume::validate() const {
    if (size_x <= 0 || size_y <= 0 || size_z <= 0) throw ShapeError("volume has a non-positive dimension");
    if (voxels.size() != static_cast<std::size_t>(size_x) * size_y * size_z) {
        throw ShapeError("volume voxel count does not match its dimensions");
    }
    for (std::size_t i = 0; i < centroids.size(); ++i) {
        const auto& c = centroids[i];
        if (!inside(c.x, c.y, c.z)) throw DataError("centroid " + std::to_string(i) + " lies outside the volume");
        if (i > 0 && !(c.z > centroids[i - 1].z)) {
            throw DataError("centroids must be ordered cranial to caudal (strictly increasing z)");
        }
    }
}

NaturalCubicSpline::NaturalCubicSpline(std::vector<double> knots, std::vector<double> values)
    : t_(std::move(knots)), v_(std::move(values)) {
    const std::size_t n = t_.size();
    if (n < 2 || v_.size() != n) throw ShapeError("spline needs at least two knots with matching values");
    for (std::size_t i = 1; i < n; ++i) {
        if (!(t_[i] > t_[i - 1])) throw DomainError("spline knots must be strictly increasing");
    }
    m_.assign(n, 0.0);
    if (n == 2) return;
    // Thomas algorithm on the interior second derivatives; natural ends (m_0 = m_{n-1} = 0).
    std::vector<double> diag(n, 0.0), rhs(n, 0.0), upper(n, 0.0);
    for (std::size_t i = 1; i + 1 < n; ++i) {
        const double h0 = t_[i] - t_[i - 1];
        const double h1 = t_[i + 1] - t_[i];
        diag[i] = 2.0 * (h0 + h1);
        upper[i] = h1;
        rhs[i] = 6.0 * ((v_[i + 1] - v_[i]) / h1 - (v_[i] - v_[i - 1]) / h0);
        if (i > 1) {
            const double w = h0 / diag[i - 1];
            diag[i] -= w * upper[i - 1];
            rhs[i] -= w * rhs[i - 1];
        }
    }
    for (std::size_t i = n - 2; i >= 1; --i) {
        m_[i] = (rhs[i] - upper[i] * m_[i + 1]) / diag[i];
        if (i == 1) break;
    }
}

double NaturalCubicSpline::operator()(double t) const {
    const std::size_t n = t_.size();
    if (t <= t_.front()) return v_.front() + derivative(t_.front()) * (t - t_.front());
    if (t >= t_.back()) return v_.back() + derivative(t_.back()) * (t - t_.back());
    const std::size_t i = static_cast<std::size_t>(std::upper_bound(t_.begin(), t_.end(), t) - t_.begin()) - 1;
    const double h = t_[i + 1] - t_[i];
    const double a = (t_[i + 1] - t) / h;
    const double b = (t - t_[i]) / h;
    (void)n;
    return a * v_[i] + b * v_[i + 1] + ((a * a * a - a) * m_[i] + (b * b * b - b) * m_[i + 1]) * h * h / 6.0;
}

double NaturalCubicSpline::derivative(double t) const {
    const double tc = std::clamp(t, t_.front(), t_.back());
    std::size_t i = static_cast<std::size_t>(std::upper_bound(t_.begin(), t_.end(), tc) - t_.begin());
    i = std::clamp<std::size_t>(i, 1, t_.size() - 1) - 1;
    const double h = t_[i + 1] - t_[i];
    const double a = (t_[i + 1] - tc) / h;
    const double b = (tc - t_[i]) / h;
    return (v_[i + 1] - v_[i]) / h + ((1.0 - 3.0 * a * a) * m_[i] + (3.0 * b * b - 1.0) * m_[i + 1]) * h / 6.0;
}

ImageSample reformat_midvertebral(const Volume& volume, int target_index, const ReformatOptions& options) {
    volume.validate();
    const int n = static_cast<int>(volume.centroids.size());
    if (n < 3) throw DataError("reformation needs at least three centroids");
    if (target_index < 0 || target_index >= n) throw DataError("target centroid index out of range");
    if (options.roi <= 0 || options.out_size <= 0) throw ConfigError("roi", "roi and out_size must be positive");

    // Chord-length parameterisation, then a dense arc-length table.
    std::vector<double> knots(n, 0.0), xs(n), ys(n), zs(n);
    for (int i = 0; i < n; ++i) {
        const auto& c = volume.centroids[i];
        xs[i] = c.x;
        ys[i] = c.y;
        zs[i] = c.z;
        if (i > 0) {
            const auto& p = volume.centroids[i - 1];
            knots[i] = knots[i - 1] + std::sqrt((c.x - p.x) * (c.x - p.x) + (c.y - p.y) * (c.y - p.y) +
                                                (c.z - p.z) * (c.z - p.z));
        }
    }
    const NaturalCubicSpline sx(knots, xs), sy(knots, ys), sz(knots, zs);
    constexpr int kStepsPerSegment = 256;
    std::vector<double> table_t, table_s;
    table_t.push_back(0.0);
    table_s.push_back(0.0);
    for (int i = 0; i + 1 < n; ++i) {
        for (int k = 1; k <= kStepsPerSegment; ++k) {
            const double t = knots[i] + (knots[i + 1] - knots[i]) * k / kStepsPerSegment;
            const double tp = table_t.back();
            const double d = std::sqrt(std::pow(sx(t) - sx(tp), 2) + std::pow(sy(t) - sy(tp), 2) +
                                       std::pow(sz(t) - sz(tp), 2));
            table_t.push_back(t);
            table_s.push_back(table_s.back() + d);
        }
    }
    const double total_s = table_s.back();
    auto t_at_arc = [&](double s) {
        if (s <= 0.0) return s;  // unit-speed linear extension beyond the ends
        if (s >= total_s) return knots.back() + (s - total_s);
        const auto it = std::upper_bound(table_s.begin(), table_s.end(), s);
        const std::size_t j = static_cast<std::size_t>(it - table_s.begin());
        const double f = (s - table_s[j - 1]) / (table_s[j] - table_s[j - 1]);
        return table_t[j - 1] + f * (table_t[j] - table_t[j - 1]);
    };
    const double target_s = table_s[static_cast<std::size_t>(target_index) * kStepsPerSegment];

    ImageSample out;
    out.source = SampleSource::reformatted;
    out.context_truncated = target_index == 0 || target_index == n - 1;
    const int roi = options.roi;
    Image plane(roi, roi);
    for (int r = 0; r < roi; ++r) {
        const double s = target_s + (r + 0.5 - roi / 2.0);
        const double t = t_at_arc(s);
        const double px = sx(t), py = sy(t), pz = sz(t);
        for (int c = 0; c < roi; ++c) {
            const double y = py + (c + 0.5 - roi / 2.0);
            if (!volume.inside(px, y, pz)) {
                out.context_truncated = true;
                continue;  // zero padding
            }
            plane.at(r, c) = static_cast<float>(std::clamp(volume.sample(px, y, pz), 0.0, 1.0));
        }
    }
    out.image = (roi == options.out_size) ? plane : resize_bilinear(plane, options.out_size, options.out_size);
    const double sigma = options.centroid_sigma > 0 ? options.centroid_sigma : options.out_size / 16.0;
    const double centre = (options.out_size - 1) / 2.0;
    out.centroid_channel = make_centroid_channel(centre, centre, sigma, options.out_size, options.out_size);
    return out;
}

// ---------------------------------------------------------------------------------------------
// Stratified splitting

namespace {

// Largest-remainder rounding of `quotas` to integers summing to `total`; ties by index.
std::vector<long> largest_remainder(const std::vector<double>& quotas, long total) {
    std::vector<long> out(quotas.size());
    std::vector<std::size_t> order(quotas.size());
    long assigned = 0;
    for (std::size_t i = 0; i < quotas.size(); ++i) {
        out[i] = static_cast<long>(std::floor(quotas[i] + 1e-9));
        assigned += out[i];
        order[i] = i;
    }
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
        return quotas[a] - std::floor(quotas[a] + 1e-9) > quotas[b] - std::floor(quotas[b] + 1e-9) + 1e-12;
    });
    for (std::size_t k = 0; assigned < total; k = (k + 1) % order.size(), ++assigned) ++out[order[k]];
    return out;
}

}  // namespace

std::vector<std::vector<std::size_t>> stratified_partition(std::span<const int> labels, int num_classes,
                                                           std::span<const double> fractions, std::uint64_t seed) {
    const std::size_t parts = fractions.size();
    if (parts == 0) throw ConfigError("fractions", "at least one part required");
    double sum = 0.0;
    for (double f : fractions) {
        if (f < 0.0) throw ConfigError("fractions", "must be non-negative");
        sum += f;
    }
    if (std::fabs(sum - 1.0) > 1e-9) throw ConfigError("fractions", "must sum to 1");
    const long used_parts = std::count_if(fractions.begin(), fractions.end(), [](double f) { return f > 0.0; });

    std::vector<std::vector<std::size_t>> by_class(num_classes);
    for (std::size_t i = 0; i < labels.size(); ++i) {
        if (labels[i] < 0 || labels[i] >= num_classes) throw DataError("label out of range in stratified split");
        by_class[labels[i]].push_back(i);
    }
    for (int g = 0; g < num_classes; ++g) {
        if (!by_class[g].empty() && static_cast<long>(by_class[g].size()) < used_parts) {
            throw DataError("class " + std::to_string(g) + " has " + std::to_string(by_class[g].size()) +
                            " samples, fewer than the " + std::to_string(used_parts) + " requested parts");
        }
    }

    const long total = static_cast<long>(labels.size());
    std::vector<double> part_quotas(parts);
    for (std::size_t s = 0; s < parts; ++s) part_quotas[s] = total * fractions[s];
    const std::vector<long> part_totals = largest_remainder(part_quotas, total);

    // Controlled rounding of the class x part table to match both margins.
    std::vector<std::vector<long>> cell(num_classes, std::vector<long>(parts, 0));
    std::vector<long> row_need(num_classes, 0), col_need(part_totals);
    struct Candidate {
        double remainder;
        int cls;
        std::size_t part;
    };
    std::vector<Candidate> candidates;
    for (int g = 0; g < num_classes; ++g) {
        const long ng = static_cast<long>(by_class[g].size());
        row_need[g] = ng;
        for (std::size_t s = 0; s < parts; ++s) {
            const double q = ng * fractions[s];
            cell[g][s] = static_cast<long>(std::floor(q + 1e-9));
            row_need[g] -= cell[g][s];
            col_need[s] -= cell[g][s];
            candidates.push_back({q - std::floor(q + 1e-9), g, s});
        }
    }
    std::stable_sort(candidates.begin(), candidates.end(),
                     [](const Candidate& a, const Candidate& b) { return a.remainder > b.remainder + 1e-12; });
    for (const auto& c : candidates) {
        if (row_need[c.cls] > 0 && col_need[c.part] > 0 && c.remainder > 1e-12) {
            ++cell[c.cls][c.part];
            --row_need[c.cls];
            --col_need[c.part];
        }
    }
    for (int g = 0; g < num_classes; ++g) {
        for (std::size_t s = 0; s < parts && row_need[g] > 0; ++s) {
            while (row_need[g] > 0 && col_need[s] > 0) {
                ++cell[g][s];
                --row_need[g];
                --col_need[s];
            }
        }
    }

    std::vector<std::vector<std::size_t>> out(parts);
    for (int g = 0; g < num_classes; ++g) {
        auto idx = by_class[g];
        Rng rng(mix_seed(seed, static_cast<std::uint64_t>(g)));
        shuffle(idx, rng);
        std::size_t pos = 0;
        for (std::size_t s = 0; s < parts; ++s) {
            for (long k = 0; k < cell[g][s]; ++k) out[s].push_back(idx[pos++]);
        }
    }
    for (auto& part : out) std::sort(part.begin(), part.end());
    return out;
}

std::array<DatasetManifest, 3> split_dataset(const DatasetManifest& manifest, std::array<double, 3> fractions,
                                             std::uint64_t seed) {
    std::vector<int> labels;
    labels.reserve(manifest.samples.size());
    for (const auto& e : manifest.samples) labels.push_back(grade_index(e.grade));
    const auto parts = stratified_partition(labels, kNumGrades, fractions, seed);
    std::array<DatasetManifest, 3> out;
    const Split tags[3] = {Split::train, Split::val, Split::test};
    for (int s = 0; s < 3; ++s) {
        out[s].split = tags[s];
        out[s].seed = seed;
        for (std::size_t i : parts[s]) out[s].samples.push_back(manifest.samples[i]);
        out[s].recount();
    }
    return out;
}

std::array<std::vector<ImageSample>, 3> split_samples(const std::vector<ImageSample>& samples,
                                                      std::array<double, 3> fractions, std::uint64_t seed) {
    std::vector<int> labels;
    labels.reserve(samples.size());
    for (const auto& s : samples) labels.push_back(grade_index(s.grade));
    const auto parts = stratified_partition(labels, kNumGrades, fractions, seed);
    std::array<std::vector<ImageSample>, 3> out;
    for (int s = 0; s < 3; ++s) {
        for (std::size_t i : parts[s]) out[s].push_back(samples[i]);
    }
    return out;
}

}  // namespace protoverse
