#include "doctest.h"

#include <cmath>
#include <filesystem>
#include <fstream>

#include "protoverse/errors.hpp"
#include "protoverse/training.hpp"

using namespace protoverse;
namespace fs = std::filesystem;

namespace {

struct SmallData {
    std::vector<ImageSample> train;
    std::vector<ImageSample> val;
};

const SmallData& small_data() {
    static const SmallData data = [] {
        SyntheticConfig c;
        c.counts = {36, 12, 12};
        c.seed = 21;
        auto all = generate_synthetic_samples(c).samples;
        auto parts = split_samples(all, {0.8, 0.2, 0.0}, 3);
        return SmallData{parts[0], parts[1]};
    }();
    return data;
}

TrainConfig smoke_config() {
    TrainConfig c;
    c.seed = 5;
    c.model.prototype_dim = 16;
    c.schedule.warm_epochs = 2;
    c.schedule.joint_epochs = 2;
    c.schedule.push_interval = 2;
    c.schedule.last_layer_iters = 50;
    return c;
}

FeatureMap fmap_from(std::initializer_list<std::initializer_list<double>> rows) {
    FeatureMap f;
    f.height = 1;
    f.width = static_cast<int>(rows.size());
    f.patches.resize(f.width, static_cast<Eigen::Index>(rows.begin()->size()));
    int r = 0;
    for (const auto& row : rows) {
        int c = 0;
        for (double v : row) f.patches(r, c++) = v;
        ++r;
    }
    return f;
}

}  // namespace

TEST_CASE("smoke training produces every stage") {
    const auto& d = small_data();
    const TrainConfig config = smoke_config();
    int callbacks = 0;
    const TrainResult r = train(config, d.train, d.val, [&](const EpochLog&) { ++callbacks; });
    CHECK(callbacks == 4);
    REQUIRE(r.checkpoints.size() == 4);
    CHECK(r.checkpoints[0].stage == StageTag::warm);
    CHECK(r.checkpoints[1].stage == StageTag::joint);
    CHECK(r.checkpoints[2].stage == StageTag::pushed);
    CHECK(r.checkpoints[3].stage == StageTag::final_);
    CHECK(r.best == 3);
    for (std::size_t i = 1; i < r.checkpoints.size(); ++i) {
        CHECK(stage_transition_allowed(r.checkpoints[i - 1].stage, r.checkpoints[i].stage));
        CHECK(r.checkpoints[i].config_hash == r.checkpoints[0].config_hash);
    }
    CHECK(r.checkpoints[2].model.prototypes().fully_projected());
    for (const auto& e : r.log) {
        CHECK(std::isfinite(e.loss.total));
        CHECK(std::isfinite(e.loss.mwce));
        CHECK(std::isfinite(e.loss.div));
        CHECK(e.loss.total == doctest::Approx(e.loss.mwce + 0.8 * e.loss.clst - 0.08 * e.loss.sep + 0.3 * e.loss.div));
    }
    CHECK(r.best_checkpoint().metrics.contains("class_avg_accuracy"));
}

TEST_CASE("warm stage leaves the backbone untouched") {
    const auto& d = small_data();
    const TrainConfig config = smoke_config();
    const ProtoNet initial(config.model, mix_seed(config.seed, 1));
    const auto h0 = initial.backbone().parameter_hash();
    const auto addon0 = initial.addon().parameter_hash();
    const TrainResult r = train(config, d.train, d.val);
    REQUIRE(r.log.size() == 4);
    CHECK(r.log[0].backbone_hash == h0);
    CHECK(r.log[1].backbone_hash == h0);
    CHECK(r.checkpoints[0].model.addon().parameter_hash() != addon0);
    CHECK(r.log[2].backbone_hash != h0);
}

TEST_CASE("training is deterministic for a fixed seed") {
    const auto& d = small_data();
    const TrainResult a = train(smoke_config(), d.train, d.val);
    const TrainResult b = train(smoke_config(), d.train, d.val);
    CHECK(a.best_checkpoint().metrics == b.best_checkpoint().metrics);
    CHECK(a.best_checkpoint().model.prototypes().vectors == b.best_checkpoint().model.prototypes().vectors);
    CHECK(a.best_checkpoint().model.connections().weights == b.best_checkpoint().model.connections().weights);
    for (std::size_t i = 0; i < a.log.size(); ++i) CHECK(a.log[i].loss.total == b.log[i].loss.total);
}

TEST_CASE("final checkpoint prototypes reproduce their source patches") {
    const auto& d = small_data();
    const TrainResult r = train(smoke_config(), d.train, d.val);
    const ProtoNet& model = r.best_checkpoint().model;
    const auto& bank = model.prototypes();
    REQUIRE(bank.fully_projected());
    for (int p = 0; p < bank.size(); ++p) {
        const auto& e = *bank.projection[p];
        CHECK(e.class_index == bank.class_of(p));
        const auto it = std::find_if(d.train.begin(), d.train.end(), [&](const auto& s) { return s.sample_id == e.sample_id; });
        REQUIRE(it != d.train.end());
        CHECK(grade_index(it->grade) == bank.class_of(p));
        const FeatureMap f = model.forward_features(*it);
        CHECK((f.patch(e.row, e.col) - bank.vectors.row(p)).norm() < 1e-6);
    }
}

TEST_CASE("training rejects a split with a missing grade") {
    const auto& d = small_data();
    std::vector<ImageSample> no_g3;
    for (const auto& s : d.train) {
        if (s.grade != Grade::G3) no_g3.push_back(s);
    }
    try {
        train(smoke_config(), no_g3, d.val);
        FAIL("expected DataError");
    } catch (const DataError& e) {
        CHECK(std::string(e.what()).find("G3") != std::string::npos);
    }
    TrainConfig bad = smoke_config();
    bad.model.prototypes_per_class = 1;
    CHECK_THROWS_AS(train(bad, d.train, d.val), ConfigError);
}

TEST_CASE("projection picks the nearest own-class patch") {
    Eigen::MatrixXd v(4, 2);
    v << 1, 0, 5, 5, 9, 9, 0.5, 0.5;
    PrototypeBank bank(v, 2, 2);
    const std::vector<FeatureMap> features{fmap_from({{0, 0}, {3, 4}}), fmap_from({{8, 8}, {1, 1}})};
    const std::vector<int> labels{0, 1};
    const std::vector<std::string> ids{"a", "b"};
    project_bank(bank, features, labels, ids);
    CHECK(bank.vectors.row(0) == Eigen::RowVector2d(0, 0));
    CHECK(bank.projection[0]->sample_id == "a");
    CHECK(bank.projection[0]->col == 0);
    CHECK(bank.projection[0]->distance_before == doctest::Approx(1.0));
    CHECK(bank.vectors.row(1) == Eigen::RowVector2d(3, 4));
    CHECK(bank.projection[1]->distance_before == doctest::Approx(5.0));
    CHECK(bank.vectors.row(2) == Eigen::RowVector2d(8, 8));
    CHECK(bank.vectors.row(3) == Eigen::RowVector2d(1, 1));
    CHECK(bank.projection[3]->sample_id == "b");
    CHECK(bank.projection[3]->class_index == 1);

    // A second push is a fixed point with zero recorded distance.
    const Eigen::MatrixXd once = bank.vectors;
    project_bank(bank, features, labels, ids);
    CHECK(bank.vectors == once);
    for (const auto& e : bank.projection) CHECK(e->distance_before == 0.0);

    const std::vector<int> only_zero{0, 0};
    CHECK_THROWS_AS(project_bank(bank, features, only_zero, ids), DataError);
}

TEST_CASE("projection on a model is optimal and idempotent") {
    const auto& d = small_data();
    ModelConfig mc;
    mc.prototype_dim = 16;
    ProtoNet model(mc, 3);
    project_prototypes(model, d.train);
    const auto& bank = model.prototypes();
    std::vector<FeatureMap> features;
    for (const auto& s : d.train) features.push_back(model.forward_features(s));
    for (int p = 0; p < bank.size(); ++p) {
        const auto& e = *bank.projection[p];
        double best = std::numeric_limits<double>::infinity();
        for (std::size_t i = 0; i < d.train.size(); ++i) {
            if (grade_index(d.train[i].grade) != bank.class_of(p)) continue;
            best = std::min(best, (features[i].patches.rowwise() - bank.vectors.row(p)).rowwise().squaredNorm().minCoeff());
        }
        CHECK(best < 1e-12);
        CHECK(e.class_index == bank.class_of(p));
    }
    const Eigen::MatrixXd once = bank.vectors;
    project_prototypes(model, d.train);
    CHECK(model.prototypes().vectors == once);
}

namespace {

struct Separable {
    Eigen::MatrixXd scores;
    std::vector<int> labels;
};

Separable separable_scores(int per_class_samples) {
    Separable s;
    const int m = 2, c = 3;
    Rng rng(4);
    s.scores.resize(per_class_samples * c, m * c);
    for (int k = 0; k < c; ++k) {
        for (int i = 0; i < per_class_samples; ++i) {
            const int row = k * per_class_samples + i;
            s.labels.push_back(k);
            for (int p = 0; p < m * c; ++p) {
                s.scores(row, p) = (p / m == k ? 2.5 : 0.4) + uniform(rng, -0.3, 0.3);
            }
        }
    }
    return s;
}

}  // namespace

TEST_CASE("last layer objective never increases") {
    const auto s = separable_scores(10);
    const std::vector<long> counts{10, 10, 10};
    const auto w = mwce_weights(counts, WeightingStrategy::median_frequency);
    ClassConnectionMatrix init;
    init.weights = Eigen::MatrixXd::Zero(6, 3);
    const auto r = optimize_last_layer(s.scores, s.labels, init, 2, w, 1e-3, 200);
    REQUIRE(r.objective.size() > 2);
    for (std::size_t i = 1; i < r.objective.size(); ++i) CHECK(r.objective[i] <= r.objective[i - 1]);
    CHECK(r.objective.back() < r.objective.front());
}

TEST_CASE("separable scores reach full training accuracy") {
    const auto s = separable_scores(10);
    const std::vector<long> counts{10, 10, 10};
    const auto w = mwce_weights(counts, WeightingStrategy::uniform);
    ClassConnectionMatrix init;
    init.weights = Eigen::MatrixXd::Zero(6, 3);
    const auto r = optimize_last_layer(s.scores, s.labels, init, 2, w, 1e-4, 300);
    int correct = 0;
    for (std::size_t i = 0; i < s.labels.size(); ++i) {
        Eigen::Index best = 0;
        (r.connections.weights.transpose() * s.scores.row(static_cast<Eigen::Index>(i)).transpose()).maxCoeff(&best);
        correct += best == s.labels[i];
    }
    CHECK(correct == static_cast<int>(s.labels.size()));
}

TEST_CASE("a large l1 penalty zeroes the off-class connections") {
    const auto s = separable_scores(6);
    const std::vector<long> counts{6, 6, 6};
    const auto w = mwce_weights(counts, WeightingStrategy::uniform);
    const auto r = optimize_last_layer(s.scores, s.labels, init_class_connections(2, 3), 2, w, 10.0, 200);
    for (int p = 0; p < 6; ++p) {
        for (int k = 0; k < 3; ++k) {
            if (k != p / 2) CHECK(r.connections.weights(p, k) == 0.0);
        }
    }
}

TEST_CASE("last layer input validation") {
    const auto s = separable_scores(2);
    const std::vector<long> counts{2, 2, 2};
    const auto w = mwce_weights(counts, WeightingStrategy::uniform);
    const std::vector<int> short_labels{0, 1};
    CHECK_THROWS_AS(optimize_last_layer(s.scores, short_labels, init_class_connections(2, 3), 2, w, 0, 5), ShapeError);
    Eigen::MatrixXd bad = s.scores;
    bad(0, 0) = std::nan("");
    CHECK_THROWS_AS(optimize_last_layer(bad, s.labels, init_class_connections(2, 3), 2, w, 0, 5), DomainError);
}

TEST_CASE("epoch csv layout") {
    EpochLog e;
    e.epoch = 3;
    e.stage = StageTag::joint;
    e.loss.total = 1.5;
    e.val.class_avg_accuracy = 80;
    const auto path = fs::temp_directory_path() / "protoverse_test_epochs.csv";
    const std::vector<EpochLog> log{e};
    write_epoch_csv(path, log);
    std::ifstream is(path);
    std::string header, row;
    std::getline(is, header);
    std::getline(is, row);
    CHECK(header == "epoch,stage,mwce,clst,sep,div,total,val_class_avg_acc,val_class_avg_f1,val_sample_acc");
    CHECK(row.rfind("3,joint,", 0) == 0);
    fs::remove(path);
}

TEST_CASE("schedule validation and config hash") {
    TrainSchedule s;
    s.push_interval = 0;
    CHECK_THROWS_AS(s.validate(), ConfigError);
    s = TrainSchedule{};
    s.momentum = 1.0;
    CHECK_THROWS_AS(s.validate(), ConfigError);
    CHECK(hash_string("abc") == hash_string("abc"));
    CHECK(hash_string("abc") != hash_string("abd"));
    CHECK(hash_string("").size() == 16);
}
