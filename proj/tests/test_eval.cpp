#include "doctest.h"

#include <cmath>
#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>

#include "protoverse/errors.hpp"
#include "protoverse/eval.hpp"
#include "protoverse/rng.hpp"

using namespace protoverse;
namespace fs = std::filesystem;

namespace {

// Exact upper tail by enumerating every sign pattern of the ranked magnitudes.
double brute_upper_p(const std::vector<double>& d) {
    std::vector<double> nz;
    for (double x : d) {
        if (x != 0.0) nz.push_back(x);
    }
    const std::size_t n = nz.size();
    std::vector<double> rank(n);
    for (std::size_t i = 0; i < n; ++i) {
        double below = 0, same = 0;
        for (std::size_t j = 0; j < n; ++j) {
            if (std::fabs(nz[j]) < std::fabs(nz[i])) ++below;
            if (std::fabs(nz[j]) == std::fabs(nz[i])) ++same;
        }
        rank[i] = below + (same + 1) / 2.0;
    }
    double observed = 0;
    for (std::size_t i = 0; i < n; ++i) {
        if (nz[i] > 0) observed += rank[i];
    }
    long hits = 0;
    for (unsigned long mask = 0; mask < (1ul << n); ++mask) {
        double s = 0;
        for (std::size_t i = 0; i < n; ++i) {
            if (mask >> i & 1) s += rank[i];
        }
        if (s >= observed - 1e-9) ++hits;
    }
    return static_cast<double>(hits) / static_cast<double>(1ul << n);
}

std::vector<ImageSample> tiny_pool() {
    SyntheticConfig c;
    c.counts = {10, 10, 10};
    c.seed = 12;
    return generate_synthetic_samples(c).samples;
}

ExperimentConfig tiny_experiment() {
    ExperimentConfig c;
    c.seed = 9;
    c.eval.folds = 2;
    c.eval.val_fraction = 0.2;
    c.train.model.prototype_dim = 16;
    c.train.schedule.warm_epochs = 1;
    c.train.schedule.joint_epochs = 1;
    c.train.schedule.push_interval = 1;
    c.train.schedule.last_layer_iters = 20;
    return c;
}

ImageSample flat_sample(const std::string& id, Grade g) {
    ImageSample s;
    s.sample_id = id;
    s.grade = g;
    s.image = Image(32, 32, 0.5f);
    s.centroid_channel = Image(32, 32, 0.0f);
    return s;
}

std::string ratings(std::initializer_list<std::string> rows) {
    std::string out = "sample_id,prototype_rank,q1,q2,rater_id\n";
    for (const auto& r : rows) out += r + "\n";
    return out;
}

ClinicalReport ingest(const std::string& csv, const std::map<std::string, std::string>& grades) {
    std::istringstream is(csv);
    return ingest_ratings(is, grades);
}

}  // namespace

TEST_CASE("class average is the unweighted mean of recalls") {
    const std::vector<double> a{92.33, 72.22, 64.29};
    CHECK(std::fabs(class_average(a) - 76.28) <= 0.005);
    const std::vector<double> b{88.04, 72.22, 57.14};
    CHECK(std::fabs(class_average(b) - 72.46) <= 0.02);
}

TEST_CASE("metrics on a hand-built confusion") {
    const std::vector<int> labels{0, 0, 0, 0, 1, 1, 1, 2, 2, 2};
    const std::vector<int> preds{0, 0, 1, 2, 1, 1, 0, 2, 2, 2};
    const Metrics m = compute_metrics(preds, labels, 3);
    CHECK(m.per_class_accuracy[0] == doctest::Approx(50.0));
    CHECK(m.per_class_accuracy[1] == doctest::Approx(200.0 / 3.0));
    CHECK(m.per_class_accuracy[2] == doctest::Approx(100.0));
    CHECK(m.class_avg_accuracy == doctest::Approx(72.2222).epsilon(1e-4));
    CHECK(m.per_class_f1[0] == doctest::Approx(57.142857).epsilon(1e-5));
    CHECK(m.per_class_f1[1] == doctest::Approx(66.666667).epsilon(1e-5));
    CHECK(m.per_class_f1[2] == doctest::Approx(85.714286).epsilon(1e-5));
    CHECK(m.class_avg_f1 == doctest::Approx(69.84127).epsilon(1e-5));
    CHECK(m.sample_accuracy == doctest::Approx(70.0));
    CHECK(m.confusion[0][2] == 1);
    CHECK(m.confusion[1][0] == 1);

    const Metrics back = metrics_from_json(metrics_to_json(m));
    CHECK(back.class_avg_accuracy == m.class_avg_accuracy);
    CHECK(back.confusion == m.confusion);

    const Metrics perfect = compute_metrics(labels, labels, 3);
    CHECK(perfect.class_avg_accuracy == doctest::Approx(100.0));
    CHECK(perfect.class_avg_f1 == doctest::Approx(100.0));

    const std::vector<int> no_g3{0, 1, 0, 1};
    CHECK_THROWS_AS(compute_metrics(no_g3, no_g3, 3), DataError);
}

TEST_CASE("wilcoxon exact tails") {
    const std::vector<double> zero(5, 0.0);
    const std::vector<double> all_pos{1, 2, 3, 4, 5};
    const WilcoxonResult r = wilcoxon_signed_rank(all_pos, zero);
    CHECK(r.exact);
    CHECK(r.n_used == 5);
    CHECK(r.statistic == doctest::Approx(15.0));
    CHECK(r.p_value == doctest::Approx(1.0 / 32.0));

    const std::vector<double> mixed{1, -2, 3, 4, 5};
    const WilcoxonResult m = wilcoxon_signed_rank(mixed, zero);
    CHECK(m.statistic == doctest::Approx(13.0));
    CHECK(m.p_value == doctest::Approx(3.0 / 32.0));
    CHECK(wilcoxon_signed_rank(mixed, zero, Alternative::less).p_value == doctest::Approx(30.0 / 32.0));

    const WilcoxonResult same = wilcoxon_signed_rank(all_pos, all_pos);
    CHECK(same.no_difference);
    CHECK(same.p_value == 1.0);

    const std::vector<double> shorter{1, 2};
    CHECK_THROWS_AS(wilcoxon_signed_rank(all_pos, shorter), ShapeError);
}

TEST_CASE("wilcoxon matches brute-force enumeration, ties included") {
    Rng rng(77);
    for (int trial = 0; trial < 40; ++trial) {
        const int k = 1 + trial % 12;
        std::vector<double> d(k), zero(k, 0.0);
        // Integer magnitudes in a narrow range force ties and some zeros.
        for (auto& x : d) x = std::round(uniform(rng, -4.0, 6.0));
        bool any = false;
        for (double x : d) any |= x != 0.0;
        const WilcoxonResult r = wilcoxon_signed_rank(d, zero);
        if (!any) {
            CHECK(r.no_difference);
            continue;
        }
        CHECK(r.p_value == doctest::Approx(brute_upper_p(d)).epsilon(1e-12));
    }
}

TEST_CASE("wilcoxon switches to the normal approximation for large samples") {
    std::vector<double> a(60), b(60, 0.0);
    for (int i = 0; i < 60; ++i) a[i] = (i % 4 == 0 ? -1.0 : 1.0) * (i + 1);
    const WilcoxonResult r = wilcoxon_signed_rank(a, b);
    CHECK_FALSE(r.exact);
    CHECK(r.p_value > 0.0);
    CHECK(r.p_value < 0.01);
}

TEST_CASE("stratified folds are disjoint, exhaustive and stratified") {
    std::vector<int> labels;
    for (int i = 0; i < 37; ++i) labels.push_back(0);
    for (int i = 0; i < 11; ++i) labels.push_back(1);
    for (int i = 0; i < 7; ++i) labels.push_back(2);
    const auto folds = stratified_folds(labels, 3, 5, 4);
    REQUIRE(folds.size() == 5);
    std::set<std::size_t> seen;
    std::size_t total = 0;
    for (const auto& f : folds) {
        total += f.size();
        seen.insert(f.begin(), f.end());
        int per[3] = {0, 0, 0};
        for (auto i : f) ++per[labels[i]];
        CHECK(per[0] >= 7);
        CHECK(per[0] <= 8);
        CHECK(per[1] >= 2);
        CHECK(per[2] >= 1);
    }
    CHECK(total == labels.size());
    CHECK(seen.size() == labels.size());
    CHECK(stratified_folds(labels, 3, 5, 4) == folds);

    const std::vector<int> scarce{0, 0, 0, 0, 1, 1, 2, 2, 2, 2};
    CHECK_THROWS_AS(stratified_folds(scarce, 3, 3, 1), DataError);
}

TEST_CASE("carve_validation keeps every class in the validation part") {
    SyntheticConfig c;
    c.counts = {20, 4, 3};
    c.seed = 2;
    const auto pool = generate_synthetic_samples(c).samples;
    const auto parts = carve_validation(pool, 0.1, 6);
    CHECK(parts[0].size() + parts[1].size() == pool.size());
    std::set<int> val_labels;
    for (const auto& s : parts[1]) val_labels.insert(static_cast<int>(s.grade));
    CHECK(val_labels.size() == 3);
    std::set<std::string> ids;
    for (const auto& p : parts) {
        for (const auto& s : p) ids.insert(s.sample_id);
    }
    CHECK(ids.size() == pool.size());
}

TEST_CASE("summarize uses the sample standard deviation") {
    const std::vector<double> v{2, 4, 4, 4, 5, 5, 7, 9};
    const Summary s = summarize(v);
    CHECK(s.mean == doctest::Approx(5.0));
    CHECK(s.stddev == doctest::Approx(std::sqrt(32.0 / 7.0)));
    const std::vector<double> one{3.0};
    CHECK(summarize(one).stddev == 0.0);
}

TEST_CASE("cross validation runs every variant on the same folds") {
    const auto pool = tiny_pool();
    const ExperimentConfig c = tiny_experiment();
    const CVReport r = cross_validate(c, pool, {"protoverse", "protoverse"});
    CHECK(r.folds == 2);
    REQUIRE(r.per_fold.size() == 2);
    CHECK(r.per_fold[0].size() == 2);
    CHECK(r.cosine[0][0].has_value());
    // Same variant, same seeds: identical results and a degenerate test.
    CHECK(r.metric(0, "class_avg_accuracy") == r.metric(1, "class_avg_accuracy"));
    REQUIRE(r.tests.size() == 2);
    CHECK(r.tests[0].result.no_difference);

    const nlohmann::json j = cv_report_to_json(r);
    CHECK(j["variants"].size() == 2);
    CHECK(j["variants"][0]["folds"].size() == 2);
    CHECK(j["tests"][0]["alternative"] == "greater");
    CHECK(j["variants"][0]["summary"].contains("class_avg_f1"));

    CHECK_THROWS_AS(cross_validate(c, pool, {}), ConfigError);
}

TEST_CASE("ablation records failing cells and keeps going") {
    const auto pool = tiny_pool();
    ExperimentConfig c = tiny_experiment();
    c.eval.ablation.num_prototypes = {2, 1};
    const AblationReport r = run_ablation(c, AblationAxis::num_prototypes, pool);
    REQUIRE(r.rows.size() == 2);
    CHECK(r.rows[0].value == "2");
    CHECK(r.rows[0].error.empty());
    CHECK(r.rows[0].class_avg_accuracy.size() == 2);
    CHECK_FALSE(r.rows[1].error.empty());

    const fs::path dir = fs::temp_directory_path() / "protoverse_test_ablation";
    fs::remove_all(dir);
    write_ablation(dir, r);
    CHECK(fs::exists(dir / "ablation.csv"));
    CHECK(fs::exists(dir / "ablation.json"));
    CHECK(fs::exists(dir / "ablation.svg"));
    std::ifstream csv(dir / "ablation.csv");
    std::string header;
    std::getline(csv, header);
    CHECK(header.find("class_avg_accuracy_mean") != std::string::npos);
    CHECK(ablation_svg(r).find("failed") != std::string::npos);
    fs::remove_all(dir);

    CHECK(axis_from_name("lambda_div") == AblationAxis::lambda_div);
    CHECK(axis_name(AblationAxis::weighting) == "weighting");
    CHECK_THROWS_AS(axis_from_name("depth"), ConfigError);
}

TEST_CASE("rating sheets cover every fracture sample with three prototypes") {
    std::vector<ImageSample> test_set;
    std::vector<Explanation> explanations;
    for (int i = 0; i < 40; ++i) {
        const Grade g = i < 8 ? Grade::G0 : (i % 2 ? Grade::G2 : Grade::G3);
        const std::string id = "s" + std::to_string(i);
        test_set.push_back(flat_sample(id, g));
        Explanation e;
        e.sample_id = id;
        e.label = static_cast<int>(g);
        e.predicted = e.label;
        for (int r = 0; r < 3; ++r) {
            ExplanationEntry x;
            x.prototype = r;
            x.heatmap = Image(32, 32, static_cast<float>(r));
            x.bbox = BBox{2, 2, 10, 10};
            e.entries.push_back(x);
        }
        explanations.push_back(e);
    }
    std::vector<PrototypeVisual> gallery(3);
    for (int p = 0; p < 3; ++p) {
        gallery[p].prototype = p;
        gallery[p].source_image = Image(32, 32, 0.2f);
        gallery[p].heatmap = Image(32, 32, 0.0f);
        gallery[p].bbox = BBox{0, 0, 16, 16};
    }

    const fs::path dir = fs::temp_directory_path() / "protoverse_test_sheets";
    fs::remove_all(dir);
    CHECK(make_rating_sheets(dir, explanations, test_set, gallery) == 32);
    CHECK(fs::exists(dir / "s8.html"));
    CHECK_FALSE(fs::exists(dir / "s0.html"));
    CHECK(fs::exists(dir / "s9" / "test.png"));
    for (const char* f : {"rank1_heatmap.png", "rank2_prototype.png", "rank3_source.png"}) {
        CHECK(fs::exists(dir / "s9" / f));
    }
    std::ifstream csv(dir / "ratings_template.csv");
    std::string line;
    std::getline(csv, line);
    CHECK(line == "sample_id,prototype_rank,q1,q2,rater_id");
    int rows = 0;
    while (std::getline(csv, line)) ++rows;
    CHECK(rows == 96);

    // A filled-in template round-trips through the file-based ingestion.
    {
        std::ofstream out(dir / "filled.csv");
        out << "sample_id,prototype_rank,q1,q2,rater_id\n";
        for (int i = 8; i < 40; ++i) {
            for (int r = 1; r <= 3; ++r) out << 's' << i << ',' << r << ",yes,no,A\n";
        }
    }
    const ClinicalReport rep = ingest_ratings(dir / "filled.csv", dir / "sheets.json");
    CHECK(rep.incomplete.empty());
    CHECK(rep.cells.at("A").at("total").at(1).yes == 32);
    CHECK(rep.cells.at("A").at("total").at(2).yes == 0);
    CHECK(rep.cells.at("A").at("G2").at(1).total == 16);

    explanations[10].entries.pop_back();
    CHECK_THROWS_AS(make_rating_sheets(dir, explanations, test_set, gallery), DataError);
    fs::remove_all(dir);
}

TEST_CASE("ratings use the two-of-three rule per question") {
    const std::map<std::string, std::string> grades{{"a", "G2"}, {"b", "G3"}, {"c", "G3"}};
    const ClinicalReport r = ingest(ratings({
                                        "a,1,y,n,R1", "a,2,y,n,R1", "a,3,n,y,R1",  // q1 yes, q2 no
                                        "b,1,n,y,R1", "b,2,n,y,R1", "b,3,y,n,R1",  // q1 no, q2 yes
                                        "c,1,1,true,R1", "c,2,yes,0,R1", "c,3,0,false,R1",
                                        "a,1,n,n,R2", "a,2,n,n,R2", "a,3,n,n,R2",
                                    }),
                                    grades);
    CHECK(r.incomplete.empty());
    const auto& r1 = r.cells.at("R1");
    CHECK(r1.at("G2").at(1).yes == 1);
    CHECK(r1.at("G2").at(2).yes == 0);
    CHECK(r1.at("G3").at(1).yes == 1);
    CHECK(r1.at("G3").at(1).total == 2);
    CHECK(r1.at("G3").at(2).yes == 1);
    CHECK(r1.at("total").at(1).yes == 2);
    CHECK(r1.at("total").at(1).total == 3);
    CHECK(r1.at("total").at(1).fraction() == doctest::Approx(2.0 / 3.0));
    CHECK(r.cells.at("R2").at("total").at(2).yes == 0);

    const nlohmann::json j = clinical_report_to_json(r);
    CHECK(j.contains("raters"));
    CHECK(clinical_report_csv(r).find("R1") != std::string::npos);
}

TEST_CASE("incomplete ratings are listed, not counted") {
    const std::map<std::string, std::string> grades{{"a", "G2"}, {"b", "G3"}, {"d", "G3"}, {"e", "G2"}};
    const ClinicalReport r = ingest(ratings({
                                        "a,1,y,y,R", "a,2,y,y,R",                 // only two rows
                                        "b,1,y,,R", "b,2,y,y,R", "b,3,y,y,R",    // missing answer
                                        "d,1,y,y,R", "d,1,y,y,R", "d,3,y,y,R",   // duplicate rank
                                        "z,1,y,y,R", "z,2,y,y,R", "z,3,y,y,R",   // unknown sample
                                        "e,1,y,y,R", "e,2,y,y,R", "e,3,y,y,R",
                                    }),
                                    grades);
    CHECK(r.incomplete.size() == 4);
    CHECK(r.cells.at("R").at("total").at(1).total == 1);
    CHECK(r.cells.at("R").at("total").at(1).yes == 1);
    std::set<std::string> ids;
    for (const auto& i : r.incomplete) ids.insert(i.sample_id);
    CHECK(ids == std::set<std::string>{"a", "b", "d", "z"});

    std::istringstream bad("sample_id,q1,q2,rater_id\n");
    CHECK_THROWS_AS(ingest_ratings(bad, grades), DataError);
}

TEST_CASE("flipping every answer complements the majority") {
    Rng rng(19);
    std::map<std::string, std::string> grades;
    std::string csv = "sample_id,prototype_rank,q1,q2,rater_id\n", flipped = csv;
    for (int s = 0; s < 25; ++s) {
        const std::string id = "x" + std::to_string(s);
        grades[id] = s % 2 ? "G2" : "G3";
        for (int r = 1; r <= 3; ++r) {
            const bool q1 = uniform(rng, 0, 1) < 0.5, q2 = uniform(rng, 0, 1) < 0.7;
            const auto yn = [](bool b) { return b ? "Y" : "N"; };
            csv += id + "," + std::to_string(r) + "," + yn(q1) + "," + yn(q2) + ",R\n";
            flipped += id + "," + std::to_string(r) + "," + yn(!q1) + "," + yn(!q2) + ",R\n";
        }
    }
    const ClinicalReport a = ingest(csv, grades), b = ingest(flipped, grades);
    for (const std::string g : {"G2", "G3", "total"}) {
        for (int q : {1, 2}) {
            const RatingCell& x = a.cells.at("R").at(g).at(q);
            const RatingCell& y = b.cells.at("R").at(g).at(q);
            CHECK(x.total == y.total);
            CHECK(x.yes + y.yes == x.total);
        }
    }
}
