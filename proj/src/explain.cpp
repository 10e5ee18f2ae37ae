#include "protoverse/explain.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <unordered_map>

#include "protoverse/errors.hpp"

namespace protoverse {

Image upsample_heatmap(const Image& simmap, int target_height, int target_width) {
    if (simmap.empty()) throw ShapeError("upsample_heatmap: empty map");
    if (target_height < simmap.height || target_width < simmap.width) {
        throw ShapeError("upsample_heatmap: target " + std::to_string(target_height) + "x" +
                         std::to_string(target_width) + " is smaller than the map");
    }
    return resize_bilinear(simmap, target_height, target_width);
}

BBox extract_patch_bbox(const Image& heatmap, double mass_fraction) {
    if (heatmap.empty()) throw ShapeError("extract_patch_bbox: empty heatmap");
    if (!(mass_fraction > 0.0 && mass_fraction <= 1.0)) throw DomainError("mass_fraction must lie in (0, 1]");
    std::vector<float> sorted(heatmap.pixels);
    const auto n = sorted.size();
    const auto k = static_cast<std::size_t>(std::floor(mass_fraction * static_cast<double>(n - 1)));
    std::nth_element(sorted.begin(), sorted.begin() + static_cast<std::ptrdiff_t>(k), sorted.end());
    const float threshold = sorted[k];
    BBox box{heatmap.width, heatmap.height, 0, 0};
    for (int y = 0; y < heatmap.height; ++y) {
        for (int x = 0; x < heatmap.width; ++x) {
            if (heatmap.at(y, x) < threshold) continue;
            box.x0 = std::min(box.x0, x);
            box.y0 = std::min(box.y0, y);
            box.x1 = std::max(box.x1, x + 1);
            box.y1 = std::max(box.y1, y + 1);
        }
    }
    return box;
}

Image prototype_similarity_map(const PrototypeActivations& act, int p, int grid_height, int grid_width,
                               double epsilon) {
    if (grid_height * grid_width != act.distances.cols()) throw ShapeError("grid does not match distance map");
    Image m(grid_height, grid_width);
    for (int r = 0; r < grid_height * grid_width; ++r) {
        m.pixels[r] = static_cast<float>(similarity_from_distance(act.distances(p, r), epsilon));
    }
    return m;
}

Explanation explain_sample(const ProtoNet& model, const ImageSample& sample, int k) {
    const PrototypeBank& bank = model.prototypes();
    if (k < 1) throw DomainError("explain_sample: k must be at least 1");
    if (!bank.fully_projected()) {
        throw StageError("explain_sample needs a pushed checkpoint: prototypes have no source patches");
    }
    k = std::min(k, bank.size());
    const FeatureMap f = model.forward_features(sample);
    const PrototypeActivations act = prototype_activations(f, bank, model.connections(), model.config().epsilon);

    Explanation e;
    e.sample_id = sample.sample_id;
    e.label = grade_index(sample.grade);
    e.logits = act.logits;
    Eigen::Index pred = 0;
    act.logits.maxCoeff(&pred);
    e.predicted = static_cast<int>(pred);

    std::vector<int> order(bank.size());
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](int a, int b) { return act.scores(a) > act.scores(b); });
    for (int i = 0; i < k; ++i) {
        const int p = order[i];
        ExplanationEntry entry;
        entry.prototype = p;
        entry.prototype_class = bank.class_of(p);
        entry.similarity = act.scores(p);
        entry.connection = model.connections().weights(p, e.predicted);
        entry.contribution = entry.similarity * entry.connection;
        const Image sim = prototype_similarity_map(act, p, f.height, f.width, model.config().epsilon);
        entry.heatmap = upsample_heatmap(sim, sample.height(), sample.width());
        entry.bbox = extract_patch_bbox(entry.heatmap);
        entry.source = bank.projection[p];
        e.entries.push_back(std::move(entry));
    }
    return e;
}

std::vector<PrototypeVisual> prototype_gallery(const ProtoNet& model, std::span<const ImageSample> train_set) {
    const PrototypeBank& bank = model.prototypes();
    if (!bank.fully_projected()) throw StageError("prototype_gallery needs a pushed checkpoint");
    std::unordered_map<std::string, const ImageSample*> by_id;
    for (const auto& s : train_set) by_id.emplace(s.sample_id, &s);

    std::vector<PrototypeVisual> out;
    for (int p = 0; p < bank.size(); ++p) {
        const ProjectionEntry& src = *bank.projection[p];
        const auto it = by_id.find(src.sample_id);
        if (it == by_id.end()) throw DataError("prototype source sample '" + src.sample_id + "' is not available");
        const ImageSample& sample = *it->second;
        const FeatureMap f = model.forward_features(sample);
        const PrototypeActivations act = prototype_activations(f, bank, model.connections(), model.config().epsilon);
        PrototypeVisual v;
        v.prototype = p;
        v.prototype_class = bank.class_of(p);
        v.source = src;
        v.source_image = sample.image;
        v.heatmap = upsample_heatmap(prototype_similarity_map(act, p, f.height, f.width, model.config().epsilon),
                                     sample.height(), sample.width());
        v.bbox = extract_patch_bbox(v.heatmap);
        out.push_back(std::move(v));
    }
    return out;
}

Eigen::MatrixXd contribution_matrix(const ProtoNet& model, std::span<const ImageSample> test_set) {
    const PrototypeBank& bank = model.prototypes();
    const int c = bank.num_classes;
    Eigen::MatrixXd sum = Eigen::MatrixXd::Zero(c, c);
    std::vector<long> count(c, 0);
    for (const auto& s : test_set) {
        const int i = grade_index(s.grade);
        if (i >= c) throw DataError("sample label outside the model's classes");
        const PrototypeActivations act = model.forward(s);
        for (int p = 0; p < bank.size(); ++p) {
            sum(i, bank.class_of(p)) += act.scores(p) * model.connections().weights(p, i);
        }
        ++count[i];
    }
    for (int i = 0; i < c; ++i) {
        if (count[i] == 0) {
            throw DataError("contribution_matrix: no test samples of class " +
                            std::string(grade_name(grade_from_index(i))));
        }
        sum.row(i) /= static_cast<double>(count[i]);
    }
    return sum;
}

Eigen::MatrixXd prototype_cosine_matrix(const PrototypeBank& bank) {
    const Eigen::VectorXd norms = bank.vectors.rowwise().norm();
    for (Eigen::Index p = 0; p < norms.size(); ++p) {
        if (norms(p) == 0.0) throw DomainError("prototype " + std::to_string(p) + " has zero norm");
    }
    Eigen::MatrixXd unit = bank.vectors;
    for (Eigen::Index p = 0; p < unit.rows(); ++p) unit.row(p) /= norms(p);
    Eigen::MatrixXd cos = unit * unit.transpose();
    cos = cos.cwiseMax(-1.0).cwiseMin(1.0);
    cos.diagonal().setOnes();
    return 0.5 * (cos + cos.transpose());
}

double mean_within_class_abs_cosine(const PrototypeBank& bank) {
    const Eigen::MatrixXd cos = prototype_cosine_matrix(bank);
    double total = 0.0;
    long pairs = 0;
    for (int a = 0; a < bank.size(); ++a) {
        for (int b = a + 1; b < bank.size(); ++b) {
            if (bank.class_of(a) != bank.class_of(b)) continue;
            total += std::fabs(cos(a, b));
            ++pairs;
        }
    }
    if (pairs == 0) throw DomainError("no same-class prototype pairs");
    return total / static_cast<double>(pairs);
}

namespace {

nlohmann::json bbox_json(const BBox& b) { return {{"x0", b.x0}, {"y0", b.y0}, {"x1", b.x1}, {"y1", b.y1}}; }

nlohmann::json source_json(const ProjectionEntry& s) {
    return {{"sample_id", s.sample_id}, {"row", s.row}, {"col", s.col}, {"class", s.class_index},
            {"distance_before", s.distance_before}};
}

}  // namespace

nlohmann::json explanation_to_json(const Explanation& e) {
    nlohmann::json entries = nlohmann::json::array();
    for (const auto& x : e.entries) {
        nlohmann::json j{{"prototype", x.prototype},
                         {"prototype_class", std::string(grade_name(grade_from_index(x.prototype_class)))},
                         {"similarity", x.similarity},
                         {"connection", x.connection},
                         {"contribution", x.contribution},
                         {"bbox", bbox_json(x.bbox)}};
        j["source"] = x.source ? source_json(*x.source) : nlohmann::json(nullptr);
        entries.push_back(std::move(j));
    }
    std::vector<double> logits(e.logits.data(), e.logits.data() + e.logits.size());
    return {{"sample_id", e.sample_id},
            {"label", std::string(grade_name(grade_from_index(e.label)))},
            {"predicted", std::string(grade_name(grade_from_index(e.predicted)))},
            {"logits", logits},
            {"entries", entries}};
}

void export_explanation(const std::filesystem::path& dir, const Explanation& e, const ImageSample& sample,
                        std::span<const PrototypeVisual> gallery) {
    std::filesystem::create_directories(dir);
    write_png(dir / "test.png", to_rgb(sample.image));
    for (std::size_t i = 0; i < e.entries.size(); ++i) {
        const auto& x = e.entries[i];
        RgbImage overlay = overlay_heatmap(sample.image, minmax_normalize(x.heatmap));
        draw_bbox(overlay, x.bbox, Rgb{255, 255, 0});
        const std::string rank = std::to_string(i + 1);
        write_png(dir / ("rank" + rank + "_heatmap.png"), overlay);
        RgbImage patch = to_rgb(sample.image);
        write_png(dir / ("rank" + rank + "_test_patch.png"), crop(patch, x.bbox));
        for (const auto& v : gallery) {
            if (v.prototype != x.prototype) continue;
            RgbImage src = to_rgb(v.source_image);
            write_png(dir / ("rank" + rank + "_prototype_patch.png"), crop(src, v.bbox));
            RgbImage src_overlay = overlay_heatmap(v.source_image, minmax_normalize(v.heatmap));
            draw_bbox(src_overlay, v.bbox, Rgb{255, 255, 0});
            write_png(dir / ("rank" + rank + "_prototype_source.png"), src_overlay);
        }
    }
    std::ofstream(dir / "explanation.json") << explanation_to_json(e).dump(2) << '\n';
}

void export_gallery(const std::filesystem::path& dir, std::span<const PrototypeVisual> gallery) {
    std::filesystem::create_directories(dir);
    nlohmann::json items = nlohmann::json::array();
    for (const auto& v : gallery) {
        const std::string stem = "prototype_" + std::to_string(v.prototype);
        RgbImage overlay = overlay_heatmap(v.source_image, minmax_normalize(v.heatmap));
        draw_bbox(overlay, v.bbox, Rgb{255, 255, 0});
        write_png(dir / (stem + "_heatmap.png"), overlay);
        RgbImage base = to_rgb(v.source_image);
        write_png(dir / (stem + "_patch.png"), crop(base, v.bbox));
        items.push_back({{"prototype", v.prototype},
                         {"class", std::string(grade_name(grade_from_index(v.prototype_class)))},
                         {"source", source_json(v.source)},
                         {"bbox", bbox_json(v.bbox)},
                         {"heatmap", stem + "_heatmap.png"},
                         {"patch", stem + "_patch.png"}});
    }
    std::ofstream(dir / "gallery.json") << nlohmann::json{{"prototypes", items}}.dump(2) << '\n';
}

}  // namespace protoverse
