#include "doctest.h"

#include <filesystem>
#include <fstream>

#include "protoverse/config.hpp"
#include "protoverse/errors.hpp"

using namespace protoverse;
using nlohmann::json;
namespace fs = std::filesystem;

namespace {

std::string error_path(const json& user) {
    try {
        normalize_config(user);
    } catch (const ConfigError& e) {
        return e.path();
    }
    return "<none>";
}

}  // namespace

TEST_CASE("an empty document gives the defaults") {
    const ExperimentConfig c = config_from_json(json::object());
    CHECK(c.train.model.prototypes_per_class == 3);
    CHECK(c.train.losses.lambda_div == doctest::Approx(0.3));
    CHECK(c.train.losses.lambda_clst == doctest::Approx(0.8));
    CHECK(c.train.losses.lambda_sep == doctest::Approx(0.08));
    CHECK(c.train.losses.weighting == WeightingStrategy::median_frequency);
    CHECK(c.explain.k == 3);
    CHECK(c.explain.mass_fraction == doctest::Approx(0.98));
    CHECK(c.eval.folds == 5);
    CHECK(c.cam.methods.size() == 3);
    CHECK(normalize_config(json::object()) == default_config_json());
}

TEST_CASE("type errors name the offending key") {
    const json user = {{"losses", {{"lambda_div", "0.3"}}}};
    try {
        normalize_config(user);
        FAIL("expected a ConfigError");
    } catch (const ConfigError& e) {
        CHECK(e.path() == "losses.lambda_div");
        CHECK(std::string(e.what()).find("lambda_div") != std::string::npos);
        CHECK(e.detail().find("expected number") != std::string::npos);
    }
    CHECK(error_path({{"seed", -1.5}}) == "seed");
    CHECK(error_path({{"data", {{"split", {0.5, "x", 0.5}}}}}).rfind("data.split", 0) == 0);
}

TEST_CASE("unknown keys are rejected") {
    CHECK(error_path({{"modle", json::object()}}) == "modle");
    CHECK(error_path({{"model", {{"prototypes", 3}}}}) == "model.prototypes");
}

TEST_CASE("a single prototype per class is rejected") {
    try {
        config_from_json({{"model", {{"prototypes_per_class", 1}}}});
        FAIL("expected a ConfigError");
    } catch (const ConfigError& e) {
        CHECK(e.path() == "model.prototypes_per_class");
        CHECK(e.detail().find("interpretability") != std::string::npos);
    }
    CHECK(error_path({{"eval", {{"ablation", {{"num_prototypes", {2, 1}}}}}}}) == "eval.ablation.num_prototypes");
    CHECK_THROWS_AS(config_from_json({{"losses", {{"weighting", "inverse"}}}}), ConfigError);
    CHECK_THROWS_AS(config_from_json({{"cam", {{"methods", {"scorecam"}}}}}), ConfigError);
}

TEST_CASE("normalisation is a fixed point and conversion round-trips") {
    const json user = {{"seed", 17},
                       {"model", {{"prototypes_per_class", 4}, {"prototype_dim", 16}}},
                       {"losses", {{"lambda_div", 0.5}, {"weighting", "ISNS"}}},
                       {"explain", {{"k", 5}}},
                       {"eval", {{"folds", 3}, {"variants", {"protoverse", "protoverse_uniform"}}}}};
    const json once = normalize_config(user);
    CHECK(normalize_config(once) == once);

    const ExperimentConfig c = config_from_json(user);
    CHECK(c.seed == 17);
    CHECK(c.train.model.prototypes_per_class == 4);
    CHECK(c.train.losses.weighting == WeightingStrategy::isns);
    CHECK(c.explain.k == 5);
    CHECK(config_to_json(c) == once);
    CHECK(config_to_json(config_from_json(config_to_json(c))) == once);
}

TEST_CASE("derived seeds differ per stream and follow the master seed") {
    ExperimentConfig a, b;
    a.seed = 1;
    b.seed = 2;
    CHECK(data_seed(a) != split_seed(a));
    CHECK(data_seed(a) != data_seed(b));
    CHECK(data_seed(a) == data_seed(config_from_json({{"seed", 1}})));
}

TEST_CASE("load_config reads files and reports missing ones") {
    const fs::path p = fs::temp_directory_path() / "protoverse_test_config.json";
    std::ofstream(p) << R"({"seed": 4, "explain": {"k": 2}})";
    const ExperimentConfig c = load_config(p);
    CHECK(c.seed == 4);
    CHECK(c.explain.k == 2);
    fs::remove(p);
    CHECK_THROWS_AS(load_config(p), ConfigError);

    std::ofstream(p) << "{not json";
    CHECK_THROWS_AS(load_config(p), ConfigError);
    fs::remove(p);
}
