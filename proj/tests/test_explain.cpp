#include "doctest.h"

#include <cmath>
#include <filesystem>

#include "protoverse/errors.hpp"
#include "protoverse/explain.hpp"
#include "protoverse/training.hpp"

using namespace protoverse;
namespace fs = std::filesystem;

namespace {

ImageSample sample(Grade g, double reduction, std::uint64_t seed, const std::string& id) {
    ImageSample s = render_vertebra_image(g, reduction, DeformityStyle::crush, seed, SyntheticConfig{});
    s.sample_id = id;
    return s;
}

ModelConfig small_model() {
    ModelConfig c;
    c.prototype_dim = 8;
    c.prototypes_per_class = 2;
    return c;
}

void mark_projected(PrototypeBank& bank) {
    for (int p = 0; p < bank.size(); ++p) {
        if (!bank.projection[p]) bank.projection[p] = ProjectionEntry{"x", 0, 0, 0.0, bank.class_of(p)};
    }
}

// Hand-computed score of prototype p on a feature map: log((d+1)/(d+eps)) at the closest patch.
double manual_score(const FeatureMap& f, const Eigen::RowVectorXd& proto, double eps) {
    double best = std::numeric_limits<double>::infinity();
    for (int r = 0; r < f.num_patches(); ++r) {
        double d = 0.0;
        for (int k = 0; k < f.dim(); ++k) d += (f.patches(r, k) - proto(k)) * (f.patches(r, k) - proto(k));
        best = std::min(best, d);
    }
    return std::log((best + 1.0) / (best + eps));
}

}  // namespace

TEST_CASE("upsampled one-hot peak stays in its block") {
    Image m(7, 7, 0.0f);
    m.at(2, 5) = 1.0f;
    const Image up = upsample_heatmap(m, 224, 224);
    const auto [y, x] = argmax(up);
    CHECK(y >= 64);
    CHECK(y < 96);
    CHECK(x >= 160);
    CHECK(x < 192);
    CHECK_THROWS_AS(upsample_heatmap(m, 5, 224), ShapeError);
}

TEST_CASE("upsampling preserves constants and monotone rows") {
    const Image flat(7, 7, 0.25f);
    for (float v : upsample_heatmap(flat, 112, 112).pixels) CHECK(v == doctest::Approx(0.25f));
    Image ramp(7, 7);
    for (int y = 0; y < 7; ++y) {
        for (int x = 0; x < 7; ++x) ramp.at(y, x) = static_cast<float>(x);
    }
    const Image up = upsample_heatmap(ramp, 112, 112);
    for (int y = 0; y < 112; y += 13) {
        for (int x = 1; x < 112; ++x) CHECK(up.at(y, x) >= up.at(y, x - 1));
    }
}

TEST_CASE("bbox of a sharp Gaussian is small and centred") {
    Image h(100, 100);
    for (int y = 0; y < 100; ++y) {
        for (int x = 0; x < 100; ++x) {
            h.at(y, x) = static_cast<float>(std::exp(-((y - 30) * (y - 30) + (x - 40) * (x - 40)) / 18.0));
        }
    }
    const BBox b = extract_patch_bbox(h);
    CHECK(b.contains(30, 40));
    CHECK(b.area() < 500);
    CHECK(std::abs((b.x0 + b.x1 - 1) / 2.0 - 40) <= 1.0);
    CHECK(std::abs((b.y0 + b.y1 - 1) / 2.0 - 30) <= 1.0);
}

TEST_CASE("bbox tie rules") {
    const Image flat(30, 40, 0.7f);
    CHECK(extract_patch_bbox(flat) == BBox{0, 0, 40, 30});
    Image two(60, 60, 0.0f);
    for (int y = 0; y < 60; ++y) {
        for (int x = 0; x < 60; ++x) {
            const double a = (y - 10) * (y - 10) + (x - 12) * (x - 12);
            const double b = (y - 50) * (y - 50) + (x - 44) * (x - 44);
            two.at(y, x) = static_cast<float>(std::exp(-a / 8.0) + std::exp(-b / 8.0));
        }
    }
    const BBox b = extract_patch_bbox(two);
    CHECK(b.contains(10, 12));
    CHECK(b.contains(50, 44));
    CHECK(b.x0 > 5);
    CHECK(b.y1 < 56);
    CHECK_THROWS_AS(extract_patch_bbox(two, 0.0), DomainError);
}

TEST_CASE("explanations need a pushed model") {
    const ProtoNet net(small_model(), 1);
    CHECK_THROWS_AS(explain_sample(net, sample(Grade::G0, 0.0, 1, "a")), StageError);
}

TEST_CASE("hand-built model explanation matches manual scores") {
    ProtoNet net(small_model(), 2);
    const ImageSample s = sample(Grade::G3, 0.5, 3, "probe");
    const FeatureMap f = net.forward_features(s);
    auto& bank = net.prototypes();
    bank.vectors.row(0) = f.patch(0, 0);
    bank.vectors.row(4) = f.patch(2, 3);
    bank.vectors.row(5) = f.patch(2, 3).array() + 0.05;
    mark_projected(bank);
    const double eps = net.config().epsilon;

    const Explanation e = explain_sample(net, s, bank.size());
    REQUIRE(e.entries.size() == static_cast<std::size_t>(bank.size()));
    CHECK(e.sample_id == "probe");
    CHECK(e.label == 2);
    for (std::size_t i = 1; i < e.entries.size(); ++i) CHECK(e.entries[i].similarity <= e.entries[i - 1].similarity);
    Eigen::VectorXd scores(bank.size());
    for (int p = 0; p < bank.size(); ++p) scores(p) = manual_score(f, bank.vectors.row(p), eps);
    for (const auto& x : e.entries) {
        CHECK(x.similarity == doctest::Approx(scores(x.prototype)).epsilon(1e-12));
        CHECK(std::fabs(x.contribution - x.similarity * x.connection) < 1e-9);
        CHECK(x.connection == net.connections().weights(x.prototype, e.predicted));
        CHECK(x.prototype_class == x.prototype / 2);
        CHECK(x.heatmap.height == 112);
        CHECK_FALSE(x.bbox.empty());
    }
    // The two exact copies share the maximum similarity; the stable order keeps the lower index first.
    CHECK(e.entries[0].prototype == 0);
    CHECK(e.entries[1].prototype == 4);
    CHECK(e.entries[0].similarity == doctest::Approx(std::log(1.0 / eps)));
    const Eigen::VectorXd logits = head_logits(scores, net.connections());
    CHECK((e.logits - logits).norm() < 1e-9);

    const Explanation top = explain_sample(net, s);
    CHECK(top.entries.size() == 3);
    // Prototype 0 belongs to G0, so it carries a foreign connection to the G3 prediction.
    CHECK(e.predicted == 2);
    CHECK(e.entries[0].connection == -0.5);
    CHECK(e.entries[0].contribution < 0.0);
}

TEST_CASE("foreign-class prototype contributes negatively at initialisation") {
    ProtoNet net(small_model(), 4);
    const ImageSample s = sample(Grade::G3, 0.6, 5, "probe");
    const FeatureMap f = net.forward_features(s);
    auto& bank = net.prototypes();
    // Class G3 prototypes sit on the input; one G2 prototype sits close to it.
    bank.vectors.row(4) = f.patch(3, 3);
    bank.vectors.row(5) = f.patch(2, 2);
    bank.vectors.row(2) = f.patch(3, 3).array() + 0.01;
    mark_projected(bank);
    const Explanation e = explain_sample(net, s, 3);
    CHECK(e.predicted == 2);
    bool saw_foreign = false;
    for (const auto& x : e.entries) {
        if (x.prototype_class != e.predicted) {
            saw_foreign = true;
            CHECK(x.connection == -0.5);
            CHECK(x.contribution < 0.0);
        }
    }
    CHECK(saw_foreign);
}

TEST_CASE("gallery follows the projection record") {
    SyntheticConfig dc;
    dc.counts = {6, 4, 4};
    auto train_set = generate_synthetic_samples(dc).samples;
    ProtoNet net(small_model(), 6);
    project_prototypes(net, train_set);
    const auto gallery = prototype_gallery(net, train_set);
    REQUIRE(gallery.size() == 6);
    for (const auto& v : gallery) {
        CHECK(v.prototype_class == net.prototypes().class_of(v.prototype));
        CHECK(v.source.class_index == v.prototype_class);
        CHECK_FALSE(v.bbox.empty());
        CHECK(v.bbox.x0 >= 0);
        CHECK(v.bbox.y1 <= v.heatmap.height);
        const auto [y, x] = argmax(v.heatmap);
        CHECK(v.bbox.contains(y, x));
        const auto it = std::find_if(train_set.begin(), train_set.end(),
                                     [&](const auto& s) { return s.sample_id == v.source.sample_id; });
        REQUIRE(it != train_set.end());
        const FeatureMap f = net.forward_features(*it);
        CHECK((f.patch(v.source.row, v.source.col) - net.prototypes().vectors.row(v.prototype)).norm() < 1e-6);
    }
    const std::string missing = net.prototypes().projection[3]->sample_id;
    std::vector<ImageSample> partial;
    for (const auto& s : train_set) {
        if (s.sample_id != missing) partial.push_back(s);
    }
    try {
        prototype_gallery(net, partial);
        FAIL("expected DataError");
    } catch (const DataError& err) {
        CHECK(std::string(err.what()).find(missing) != std::string::npos);
    }

    const auto dir = fs::temp_directory_path() / "protoverse_test_gallery";
    fs::remove_all(dir);
    export_gallery(dir, gallery);
    CHECK(fs::exists(dir / "gallery.json"));
    CHECK(fs::exists(dir / "prototype_5_heatmap.png"));
    CHECK(fs::exists(dir / "prototype_5_patch.png"));
    const Explanation e = explain_sample(net, train_set[0]);
    export_explanation(dir / "explain", e, train_set[0], gallery);
    CHECK(fs::exists(dir / "explain" / "explanation.json"));
    CHECK(fs::exists(dir / "explain" / "test.png"));
    for (int r = 1; r <= 3; ++r) {
        const std::string rank = "rank" + std::to_string(r);
        CHECK(fs::exists(dir / "explain" / (rank + "_heatmap.png")));
        CHECK(fs::exists(dir / "explain" / (rank + "_prototype_patch.png")));
    }
    const auto j = explanation_to_json(e);
    CHECK(j["entries"].size() == 3);
    CHECK(j["sample_id"] == train_set[0].sample_id);
    fs::remove_all(dir);
}

TEST_CASE("contribution matrix hand case") {
    ProtoNet net(small_model(), 8);
    std::vector<ImageSample> test_set{sample(Grade::G0, 0.0, 1, "a"), sample(Grade::G2, 0.3, 2, "b"),
                                      sample(Grade::G3, 0.5, 3, "c"), sample(Grade::G3, 0.6, 4, "d")};
    Eigen::MatrixXd w(6, 3);
    w << 1.0, -0.2, 0.1, 0.5, 0.0, -1.0, 0.3, 2.0, 0.0, -0.4, 0.7, 0.2, 0.0, 0.1, 1.5, 0.25, -0.3, 0.9;
    net.connections().weights = w;
    Eigen::MatrixXd expected = Eigen::MatrixXd::Zero(3, 3);
    const int counts[3] = {1, 1, 2};
    for (const auto& s : test_set) {
        const int i = grade_index(s.grade);
        const FeatureMap f = net.forward_features(s);
        for (int p = 0; p < 6; ++p) {
            expected(i, p / 2) += manual_score(f, net.prototypes().vectors.row(p), net.config().epsilon) * w(p, i) / counts[i];
        }
    }
    const Eigen::MatrixXd m = contribution_matrix(net, test_set);
    CHECK((m - expected).cwiseAbs().maxCoeff() < 1e-9);

    net.connections().weights.setZero();
    CHECK(contribution_matrix(net, test_set).cwiseAbs().maxCoeff() == 0.0);
    test_set.erase(test_set.begin() + 1);
    CHECK_THROWS_AS(contribution_matrix(net, test_set), DataError);
}

TEST_CASE("prototype cosine matrix") {
    Eigen::MatrixXd v(4, 2);
    v << 1, 0, 1, 1, 0, 2, 0, -3;
    const PrototypeBank bank(v, 2, 2);
    const Eigen::MatrixXd cos = prototype_cosine_matrix(bank);
    CHECK(cos(0, 1) == doctest::Approx(0.7071).epsilon(1e-4));
    CHECK(cos(0, 2) == doctest::Approx(0.0));
    CHECK(cos(2, 3) == doctest::Approx(-1.0));
    for (int a = 0; a < 4; ++a) {
        CHECK(cos(a, a) == 1.0);
        for (int b = 0; b < 4; ++b) {
            CHECK(cos(a, b) == cos(b, a));
            CHECK(std::fabs(cos(a, b)) <= 1.0);
        }
    }
    CHECK(mean_within_class_abs_cosine(bank) == doctest::Approx((std::sqrt(0.5) + 1.0) / 2.0));
    Eigen::MatrixXd z = v;
    z.row(3).setZero();
    CHECK_THROWS_AS(prototype_cosine_matrix(PrototypeBank(z, 2, 2)), DomainError);
}
