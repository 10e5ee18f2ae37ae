#include "doctest.h"

#include <cmath>
#include <filesystem>

#include "protoverse/baselines.hpp"
#include "protoverse/errors.hpp"

using namespace protoverse;
namespace fs = std::filesystem;

namespace {

struct Balanced {
    std::vector<ImageSample> train, val, test;
};

const Balanced& balanced() {
    static const Balanced data = [] {
        SyntheticConfig c;
        c.counts = {40, 40, 40};
        c.seed = 31;
        auto parts = split_samples(generate_synthetic_samples(c).samples, {0.7, 0.1, 0.2}, 2);
        return Balanced{parts[0], parts[1], parts[2]};
    }();
    return data;
}

TrainConfig baseline_config() {
    TrainConfig c;
    c.seed = 3;
    c.schedule.warm_epochs = 0;
    c.schedule.joint_epochs = 5;
    c.losses.weighting = WeightingStrategy::uniform;
    return c;
}

nn::Tensor tensor(int c, int h, int w, std::initializer_list<float> values) {
    nn::Tensor t(c, h, w);
    std::copy(values.begin(), values.end(), t.data.begin());
    return t;
}

}  // namespace

TEST_CASE("baseline trains above chance and deterministically") {
    const auto& d = balanced();
    int epochs = 0;
    const BaselineResult a = train_baseline(baseline_config(), d.train, d.val, [&](const EpochLog&) { ++epochs; });
    CHECK(epochs == 5);
    for (const auto& e : a.log) CHECK(std::isfinite(e.loss.mwce));
    const Metrics m = evaluate(a.best, d.test);
    CHECK(m.sample_accuracy > 100.0 / 3.0);
    MESSAGE("baseline balanced test accuracy " << m.sample_accuracy);

    const BaselineResult b = train_baseline(baseline_config(), d.train, d.val);
    CHECK(a.best_epoch == b.best_epoch);
    CHECK(a.best.head_weights() == b.best.head_weights());
    CHECK(a.best.backbone().parameter_hash() == b.best.backbone().parameter_hash());

    const auto path = fs::temp_directory_path() / "protoverse_test_baseline.json";
    save_baseline(path, a.best);
    const BaselineNet back = load_baseline(path);
    CHECK(back.logits(d.test[0]) == a.best.logits(d.test[0]));
    fs::remove(path);
}

TEST_CASE("baseline head gradient matches finite differences") {
    BaselineNet net(ModelConfig{}, 2);
    // Distinct values keep each channel's maximum stable under the perturbation.
    nn::Tensor f(32, 3, 3);
    for (std::size_t i = 0; i < f.data.size(); ++i) f.data[i] = static_cast<float>((i * 37 % 97) / 97.0);
    Eigen::VectorXd g(3);
    g << 0.3, -1.0, 0.5;
    const nn::Tensor gf = net.head_backward(f, g, false);
    const double h = 1e-3;
    for (std::size_t i = 0; i < f.data.size(); i += 5) {
        nn::Tensor p = f, m = f;
        p.data[i] += static_cast<float>(h);
        m.data[i] -= static_cast<float>(h);
        const double fd = (g.dot(net.head(p)) - g.dot(net.head(m))) / (2 * h);
        CHECK(gf.data[i] == doctest::Approx(fd).epsilon(1e-2));
    }
}

TEST_CASE("single channel with constant positive gradient is the rectified activation") {
    const nn::Tensor a = tensor(1, 2, 2, {0.5f, -1.0f, 2.0f, 0.0f});
    const nn::Tensor g = tensor(1, 2, 2, {0.25f, 0.25f, 0.25f, 0.25f});
    const Image m = cam_from_activations(a, g, CamVariant::gradcam);
    CHECK(m.pixels[0] == doctest::Approx(0.125));
    CHECK(m.pixels[1] == 0.0f);
    CHECK(m.pixels[2] == doctest::Approx(0.5));
    CHECK(m.pixels[3] == 0.0f);
}

TEST_CASE("negated target gives the complementary rectification") {
    Rng rng(5);
    nn::Tensor a(3, 4, 4), g(3, 4, 4);
    for (auto& v : a.data) v = static_cast<float>(uniform(rng, -1, 1));
    for (auto& v : g.data) v = static_cast<float>(uniform(rng, -1, 1));
    nn::Tensor neg = g;
    for (auto& v : neg.data) v = -v;
    const Image pos = cam_from_activations(a, g, CamVariant::gradcam);
    const Image com = cam_from_activations(a, neg, CamVariant::gradcam);
    std::vector<double> w(3, 0.0);
    for (int k = 0; k < 3; ++k) {
        for (int i = 0; i < 16; ++i) w[k] += g.data[k * 16 + i] / 16.0;
    }
    bool both_sides = false;
    for (int i = 0; i < 16; ++i) {
        double s = 0.0;
        for (int k = 0; k < 3; ++k) s += w[k] * a.data[k * 16 + i];
        CHECK(pos.pixels[i] * com.pixels[i] == 0.0f);
        CHECK(pos.pixels[i] - com.pixels[i] == doctest::Approx(s).epsilon(1e-5));
        both_sides |= pos.pixels[i] > 0 && s > 0;
    }
    CHECK(both_sides);
}

TEST_CASE("variants coincide on a linear single-channel toy") {
    // Logit = c * mean(A): the gradient is the constant c / P for every pixel.
    const nn::Tensor a = tensor(1, 3, 3, {0.1f, 0.9f, 0.3f, 0.0f, 0.5f, 0.7f, 0.2f, 0.4f, 0.6f});
    nn::Tensor g(1, 3, 3, 2.0f / 9.0f);
    const Image base = minmax_normalize(cam_from_activations(a, g, CamVariant::gradcam));
    for (auto v : {CamVariant::gradcam_pp, CamVariant::xgradcam}) {
        const Image other = minmax_normalize(cam_from_activations(a, g, v));
        for (int i = 0; i < 9; ++i) CHECK(other.pixels[i] == doctest::Approx(base.pixels[i]).epsilon(1e-5));
    }
    CHECK(base.pixels[1] == doctest::Approx(1.0));
    CHECK(base.pixels[3] == doctest::Approx(0.0));
}

TEST_CASE("scaling the logit leaves normalised maps unchanged") {
    Rng rng(8);
    nn::Tensor a(4, 5, 5), g(4, 5, 5);
    for (auto& v : a.data) v = static_cast<float>(uniform(rng, 0, 1));
    for (auto& v : g.data) v = static_cast<float>(uniform(rng, -1, 1));
    nn::Tensor g3 = g;
    for (auto& v : g3.data) v *= 3.0f;
    for (auto variant : {CamVariant::gradcam, CamVariant::xgradcam}) {
        const Image m1 = minmax_normalize(cam_from_activations(a, g, variant));
        const Image m3 = minmax_normalize(cam_from_activations(a, g3, variant));
        for (std::size_t i = 0; i < m1.size(); ++i) CHECK(m3.pixels[i] == doctest::Approx(m1.pixels[i]).epsilon(1e-4));
    }
}

TEST_CASE("zero gradients give an all-zero map") {
    const nn::Tensor a = tensor(1, 2, 2, {1, 2, 3, 4});
    const nn::Tensor g(1, 2, 2, 0.0f);
    for (auto v : {CamVariant::gradcam, CamVariant::gradcam_pp, CamVariant::xgradcam}) {
        for (float x : cam_from_activations(a, g, v).pixels) CHECK(x == 0.0f);
    }
    BaselineNet net(ModelConfig{}, 4);
    auto j = net.to_json();
    j["head_weights"] = std::vector<double>(j["head_weights"].size(), 0.0);
    const BaselineNet flat = BaselineNet::from_json(j);
    const ImageSample s = render_vertebra_image(Grade::G2, 0.3, DeformityStyle::crush, 1, SyntheticConfig{});
    for (float x : cam_heatmap(flat, s, CamMethod{}).pixels) CHECK(x == 0.0f);
}

TEST_CASE("cam heatmaps on a model are normalised to the input size") {
    const BaselineNet net(ModelConfig{}, 6);
    const ImageSample s = render_vertebra_image(Grade::G3, 0.5, DeformityStyle::crush, 2, SyntheticConfig{});
    CHECK(default_cam_layer(net.backbone()) >= 0);
    CHECK(std::holds_alternative<nn::ReLU>(net.backbone().layer(default_cam_layer(net.backbone()))));
    for (auto v : {CamVariant::gradcam, CamVariant::gradcam_pp, CamVariant::xgradcam}) {
        const Image h = cam_heatmap(net, s, CamMethod{v, std::nullopt});
        CHECK(h.height == 112);
        CHECK(h.width == 112);
        CHECK(min_value(h) >= 0.0f);
        CHECK(max_value(h) <= 1.0f);
        const Image other = cam_heatmap(net, s, CamMethod{v, std::nullopt}, 0);
        CHECK(other.height == 112);
    }
    CHECK_THROWS_AS(cam_heatmap(net, s, CamMethod{CamVariant::gradcam, 999}), ConfigError);
    CHECK_THROWS_AS(cam_heatmap(net, s, CamMethod{}, 7), DomainError);
    CHECK(cam_from_name("gradcam++") == CamVariant::gradcam_pp);
    CHECK(cam_from_name(cam_name(CamVariant::xgradcam)) == CamVariant::xgradcam);
    CHECK_THROWS_AS(cam_from_name("scorecam"), ConfigError);
}

TEST_CASE("peak_inside uses the first maximum") {
    Image h(10, 10, 0.0f);
    h.at(4, 6) = 1.0f;
    CHECK(peak_inside(h, BBox{5, 3, 8, 6}));
    CHECK_FALSE(peak_inside(h, BBox{0, 0, 5, 5}));
}
