#include "protoverse/eval.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <set>
#include <sstream>

#include "protoverse/errors.hpp"

namespace protoverse {

using nlohmann::json;

std::vector<std::vector<std::size_t>> stratified_folds(std::span<const int> labels, int num_classes, int k,
                                                       std::uint64_t seed) {
    if (k < 2) throw ConfigError("eval.folds", "at least 2 folds required");
    const std::vector<double> fractions(static_cast<std::size_t>(k), 1.0 / k);
    auto folds = stratified_partition(labels, num_classes, fractions, seed);
    for (int f = 0; f < k; ++f) {
        std::vector<bool> seen(num_classes, false);
        for (std::size_t i : folds[f]) seen[labels[i]] = true;
        for (int g = 0; g < num_classes; ++g) {
            if (!seen[g]) {
                throw DataError("fold " + std::to_string(f) + " has no samples of class " + std::to_string(g));
            }
        }
    }
    return folds;
}

std::array<std::vector<ImageSample>, 2> carve_validation(std::span<const ImageSample> pool, double val_fraction,
                                                         std::uint64_t seed) {
    if (!(val_fraction > 0.0 && val_fraction < 1.0)) throw ConfigError("eval.val_fraction", "must lie in (0, 1)");
    std::vector<std::vector<std::size_t>> by_class(kNumGrades);
    for (std::size_t i = 0; i < pool.size(); ++i) by_class[grade_index(pool[i].grade)].push_back(i);
    std::vector<bool> to_val(pool.size(), false);
    for (int g = 0; g < kNumGrades; ++g) {
        auto& idx = by_class[g];
        if (idx.size() < 2) {
            throw DataError("cannot carve a validation set: grade " + std::string(grade_name(grade_from_index(g))) +
                            " has " + std::to_string(idx.size()) + " training samples");
        }
        Rng rng(mix_seed(seed, static_cast<std::uint64_t>(g)));
        shuffle(idx, rng);
        const auto n_val = std::clamp<std::size_t>(
            static_cast<std::size_t>(std::lround(val_fraction * static_cast<double>(idx.size()))), 1, idx.size() - 1);
        for (std::size_t j = 0; j < n_val; ++j) to_val[idx[j]] = true;
    }
    std::array<std::vector<ImageSample>, 2> out;
    for (std::size_t i = 0; i < pool.size(); ++i) out[to_val[i] ? 1 : 0].push_back(pool[i]);
    return out;
}

VariantOutcome run_variant(const std::string& variant, const TrainConfig& config,
                           std::span<const ImageSample> train_set, std::span<const ImageSample> val_set,
                           std::span<const ImageSample> test_set) {
    VariantOutcome out;
    if (variant == "baseline") {
        const BaselineResult r = train_baseline(config, train_set, val_set);
        out.test = evaluate(r.best, test_set);
        return out;
    }
    TrainConfig c = config;
    if (variant == "protoverse_no_div") {
        c.losses.lambda_div = 0.0;
    } else if (variant == "protoverse_uniform") {
        c.losses.weighting = WeightingStrategy::uniform;
    } else if (variant != "protoverse") {
        throw ConfigError("eval.variants", "unknown variant '" + variant + "'");
    }
    const TrainResult r = train(c, train_set, val_set);
    const ProtoNet& model = r.best_checkpoint().model;
    out.test = evaluate(model, test_set);
    out.within_class_cosine = mean_within_class_abs_cosine(model.prototypes());
    return out;
}

Summary summarize(std::span<const double> values) {
    Summary s;
    if (values.empty()) return s;
    for (double v : values) s.mean += v;
    s.mean /= static_cast<double>(values.size());
    if (values.size() > 1) {
        double ss = 0.0;
        for (double v : values) ss += (v - s.mean) * (v - s.mean);
        s.stddev = std::sqrt(ss / static_cast<double>(values.size() - 1));
    }
    return s;
}

namespace {

double metric_value(const Metrics& m, const std::string& name) {
    if (name == "class_avg_accuracy") return m.class_avg_accuracy;
    if (name == "class_avg_f1") return m.class_avg_f1;
    if (name == "sample_accuracy") return m.sample_accuracy;
    throw DomainError("unknown metric '" + name + "'");
}

struct FoldData {
    std::vector<ImageSample> train, val, test;
};

std::vector<FoldData> make_folds(const ExperimentConfig& config, std::span<const ImageSample> pool) {
    const auto labels = labels_of(pool);
    const auto folds = stratified_folds(labels, kNumGrades, config.eval.folds, mix_seed(config.seed, 200));
    std::vector<FoldData> out;
    for (int f = 0; f < config.eval.folds; ++f) {
        const std::set<std::size_t> held(folds[f].begin(), folds[f].end());
        FoldData d;
        std::vector<ImageSample> rest;
        for (std::size_t i = 0; i < pool.size(); ++i) (held.count(i) ? d.test : rest).push_back(pool[i]);
        auto parts = carve_validation(rest, config.eval.val_fraction, mix_seed(config.seed, 300 + f));
        d.train = std::move(parts[0]);
        d.val = std::move(parts[1]);
        out.push_back(std::move(d));
    }
    return out;
}

}  // namespace

std::vector<double> CVReport::metric(std::size_t variant, const std::string& name) const {
    std::vector<double> v;
    for (const auto& m : per_fold.at(variant)) v.push_back(metric_value(m, name));
    return v;
}

CVReport cross_validate(const ExperimentConfig& config, std::span<const ImageSample> pool,
                        const std::vector<std::string>& variants) {
    if (variants.empty()) throw ConfigError("eval.variants", "at least one variant required");
    const auto folds = make_folds(config, pool);
    CVReport r;
    r.folds = config.eval.folds;
    r.variants = variants;
    r.per_fold.assign(variants.size(), {});
    r.cosine.assign(variants.size(), {});
    for (std::size_t v = 0; v < variants.size(); ++v) {
        for (std::size_t f = 0; f < folds.size(); ++f) {
            TrainConfig tc = config.train;
            tc.seed = mix_seed(config.seed, 400 + f);
            const VariantOutcome o = run_variant(variants[v], tc, folds[f].train, folds[f].val, folds[f].test);
            r.per_fold[v].push_back(o.test);
            r.cosine[v].push_back(o.within_class_cosine);
        }
    }
    for (std::size_t a = 0; a < variants.size(); ++a) {
        for (std::size_t b = 0; b < variants.size(); ++b) {
            if (a == b) continue;
            const auto va = r.metric(a, "class_avg_accuracy");
            const auto vb = r.metric(b, "class_avg_accuracy");
            r.tests.push_back({variants[a], variants[b], wilcoxon_signed_rank(va, vb, Alternative::greater),
                               Alternative::greater});
        }
    }
    return r;
}

json cv_report_to_json(const CVReport& r) {
    json variants = json::array();
    for (std::size_t v = 0; v < r.variants.size(); ++v) {
        json folds = json::array();
        for (std::size_t f = 0; f < r.per_fold[v].size(); ++f) {
            json m = metrics_to_json(r.per_fold[v][f]);
            if (r.cosine[v][f]) m["within_class_abs_cosine"] = *r.cosine[v][f];
            folds.push_back(m);
        }
        json summary = json::object();
        for (const char* name : {"class_avg_accuracy", "class_avg_f1", "sample_accuracy"}) {
            const auto vals = r.metric(v, name);
            const Summary s = summarize(vals);
            summary[name] = {{"mean", s.mean}, {"std", s.stddev}};
        }
        variants.push_back({{"name", r.variants[v]}, {"folds", folds}, {"summary", summary}});
    }
    json tests = json::array();
    for (const auto& t : r.tests) {
        tests.push_back({{"a", t.a},
                         {"b", t.b},
                         {"metric", "class_avg_accuracy"},
                         {"alternative", std::string(alternative_name(t.alternative))},
                         {"statistic", t.result.statistic},
                         {"p_value", t.result.p_value},
                         {"n_used", t.result.n_used},
                         {"no_difference", t.result.no_difference},
                         {"exact", t.result.exact}});
    }
    return {{"folds", r.folds}, {"variants", variants}, {"tests", tests}};
}

std::string_view axis_name(AblationAxis a) {
    switch (a) {
        case AblationAxis::num_prototypes: return "num_prototypes";
        case AblationAxis::lambda_div: return "lambda_div";
        case AblationAxis::weighting: return "weighting";
    }
    return "?";
}

AblationAxis axis_from_name(std::string_view name) {
    if (name == "num_prototypes") return AblationAxis::num_prototypes;
    if (name == "lambda_div") return AblationAxis::lambda_div;
    if (name == "weighting") return AblationAxis::weighting;
    throw ConfigError("axis", "unknown ablation axis '" + std::string(name) + "'");
}

AblationReport run_ablation(const ExperimentConfig& config, AblationAxis axis, std::span<const ImageSample> pool) {
    std::vector<std::pair<std::string, ExperimentConfig>> cells;
    const AblationGrid& grid = config.eval.ablation;
    switch (axis) {
        case AblationAxis::num_prototypes:
            for (int m : grid.num_prototypes) {
                ExperimentConfig c = config;
                c.train.model.prototypes_per_class = m;
                cells.emplace_back(std::to_string(m), c);
            }
            break;
        case AblationAxis::lambda_div:
            for (double l : grid.lambda_div) {
                ExperimentConfig c = config;
                c.train.losses.lambda_div = l;
                std::ostringstream os;
                os << l;
                cells.emplace_back(os.str(), c);
            }
            break;
        case AblationAxis::weighting:
            for (auto w : grid.weighting) {
                ExperimentConfig c = config;
                c.train.losses.weighting = w;
                cells.emplace_back(std::string(strategy_name(w)), c);
            }
            break;
    }
    if (cells.empty()) throw ConfigError("eval.ablation", "grid for " + std::string(axis_name(axis)) + " is empty");

    AblationReport report;
    report.axis = axis;
    for (const auto& [value, cfg] : cells) {
        AblationRow row;
        row.value = value;
        try {
            const CVReport cv = cross_validate(cfg, pool, {"protoverse"});
            row.class_avg_accuracy = cv.metric(0, "class_avg_accuracy");
            row.class_avg_f1 = cv.metric(0, "class_avg_f1");
            row.sample_accuracy = cv.metric(0, "sample_accuracy");
            if (axis == AblationAxis::lambda_div) {
                double s = 0.0;
                for (const auto& c : cv.cosine[0]) s += c.value_or(0.0);
                row.within_class_cosine = s / static_cast<double>(cv.cosine[0].size());
            }
        } catch (const std::exception& e) {
            row.error = e.what();
        }
        report.rows.push_back(std::move(row));
    }
    return report;
}

std::string ablation_svg(const AblationReport& report) {
    const int bar = 48, gap = 24, left = 60, top = 30, height = 240;
    const int width = left + static_cast<int>(report.rows.size()) * (bar + gap) + gap;
    std::ostringstream os;
    os << std::fixed << std::setprecision(2);
    os << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << width << "\" height=\"" << height + top + 60
       << "\" font-family=\"sans-serif\" font-size=\"11\">\n";
    os << "<text x=\"" << left << "\" y=\"18\">class-average accuracy (%) by " << axis_name(report.axis)
       << "</text>\n";
    os << "<line x1=\"" << left << "\" y1=\"" << top << "\" x2=\"" << left << "\" y2=\"" << top + height
       << "\" stroke=\"black\"/>\n";
    for (int t = 0; t <= 100; t += 25) {
        const double y = top + height - height * t / 100.0;
        os << "<text x=\"" << left - 30 << "\" y=\"" << y + 4 << "\">" << t << "</text>\n";
        os << "<line x1=\"" << left - 4 << "\" y1=\"" << y << "\" x2=\"" << width << "\" y2=\"" << y
           << "\" stroke=\"#ddd\"/>\n";
    }
    for (std::size_t i = 0; i < report.rows.size(); ++i) {
        const auto& row = report.rows[i];
        const double x = left + gap + static_cast<double>(i) * (bar + gap);
        os << "<text x=\"" << x << "\" y=\"" << top + height + 16 << "\">" << row.value << "</text>\n";
        if (!row.error.empty()) {
            os << "<text x=\"" << x << "\" y=\"" << top + height - 4 << "\" fill=\"red\">failed</text>\n";
            continue;
        }
        const Summary s = summarize(row.class_avg_accuracy);
        const double h = height * s.mean / 100.0;
        os << "<rect x=\"" << x << "\" y=\"" << top + height - h << "\" width=\"" << bar << "\" height=\"" << h
           << "\" fill=\"#4a7ebb\"/>\n";
        const double y_hi = top + height - height * std::min(100.0, s.mean + s.stddev) / 100.0;
        const double y_lo = top + height - height * std::max(0.0, s.mean - s.stddev) / 100.0;
        const double cx = x + bar / 2.0;
        os << "<line x1=\"" << cx << "\" y1=\"" << y_hi << "\" x2=\"" << cx << "\" y2=\"" << y_lo
           << "\" stroke=\"black\"/>\n";
        os << "<text x=\"" << x << "\" y=\"" << top + height - h - 6 << "\">" << s.mean << "</text>\n";
    }
    os << "</svg>\n";
    return os.str();
}

void write_ablation(const std::filesystem::path& dir, const AblationReport& report) {
    std::filesystem::create_directories(dir);
    std::ofstream csv(dir / "ablation.csv");
    csv << std::fixed << std::setprecision(2);
    csv << "axis,value,class_avg_accuracy_mean,class_avg_accuracy_std,class_avg_f1_mean,class_avg_f1_std,"
           "sample_accuracy_mean,sample_accuracy_std,within_class_abs_cosine,error\n";
    json rows = json::array();
    for (const auto& row : report.rows) {
        const Summary acc = summarize(row.class_avg_accuracy);
        const Summary f1 = summarize(row.class_avg_f1);
        const Summary sa = summarize(row.sample_accuracy);
        csv << axis_name(report.axis) << ',' << row.value << ',';
        if (row.error.empty()) {
            csv << acc.mean << ',' << acc.stddev << ',' << f1.mean << ',' << f1.stddev << ',' << sa.mean << ','
                << sa.stddev << ',';
        } else {
            csv << ",,,,,,";
        }
        if (row.within_class_cosine) csv << std::setprecision(4) << *row.within_class_cosine << std::setprecision(2);
        std::string err = row.error;
        std::replace(err.begin(), err.end(), ',', ';');
        csv << ',' << err << '\n';
        json j{{"value", row.value},
               {"class_avg_accuracy", row.class_avg_accuracy},
               {"class_avg_f1", row.class_avg_f1},
               {"sample_accuracy", row.sample_accuracy},
               {"summary",
                {{"class_avg_accuracy", {{"mean", acc.mean}, {"std", acc.stddev}}},
                 {"class_avg_f1", {{"mean", f1.mean}, {"std", f1.stddev}}},
                 {"sample_accuracy", {{"mean", sa.mean}, {"std", sa.stddev}}}}}};
        if (row.within_class_cosine) j["within_class_abs_cosine"] = *row.within_class_cosine;
        if (!row.error.empty()) j["error"] = row.error;
        rows.push_back(std::move(j));
    }
    std::ofstream(dir / "ablation.json") << json{{"axis", std::string(axis_name(report.axis))}, {"rows", rows}}.dump(2)
                                         << '\n';
    std::ofstream(dir / "ablation.svg") << ablation_svg(report);
}

namespace {

std::string html_escape(const std::string& s) {
    std::string out;
    for (char ch : s) {
        switch (ch) {
            case '&': out += "&amp;"; break;
            case '<': out += "&lt;"; break;
            case '>': out += "&gt;"; break;
            case '"': out += "&quot;"; break;
            default: out += ch;
        }
    }
    return out;
}

std::string trim(const std::string& s) {
    const auto a = s.find_first_not_of(" \t\r\n");
    if (a == std::string::npos) return "";
    const auto b = s.find_last_not_of(" \t\r\n");
    return s.substr(a, b - a + 1);
}

std::vector<std::string> split_csv_line(const std::string& line) {
    std::vector<std::string> fields;
    std::string cur;
    bool quoted = false;
    for (std::size_t i = 0; i < line.size(); ++i) {
        const char ch = line[i];
        if (quoted) {
            if (ch == '"' && i + 1 < line.size() && line[i + 1] == '"') {
                cur += '"';
                ++i;
            } else if (ch == '"') {
                quoted = false;
            } else {
                cur += ch;
            }
        } else if (ch == '"') {
            quoted = true;
        } else if (ch == ',') {
            fields.push_back(trim(cur));
            cur.clear();
        } else {
            cur += ch;
        }
    }
    fields.push_back(trim(cur));
    return fields;
}

// 1 = yes, 0 = no, -1 = missing or unreadable.
int parse_answer(std::string v) {
    std::transform(v.begin(), v.end(), v.begin(), [](unsigned char ch) { return std::tolower(ch); });
    if (v == "y" || v == "yes" || v == "1" || v == "true") return 1;
    if (v == "n" || v == "no" || v == "0" || v == "false") return 0;
    return -1;
}

}  // namespace

int make_rating_sheets(const std::filesystem::path& dir, std::span<const Explanation> explanations,
                       std::span<const ImageSample> test_set, std::span<const PrototypeVisual> gallery) {
    std::filesystem::create_directories(dir);
    std::map<std::string, const ImageSample*> by_id;
    for (const auto& s : test_set) by_id[s.sample_id] = &s;
    std::map<int, const PrototypeVisual*> visuals;
    for (const auto& v : gallery) visuals[v.prototype] = &v;

    std::ofstream csv(dir / "ratings_template.csv");
    csv << "sample_id,prototype_rank,q1,q2,rater_id\n";
    json index = json::object();
    int sheets = 0;
    for (const auto& e : explanations) {
        const Grade grade = grade_from_index(e.label);
        if (grade == Grade::G0) continue;
        if (e.entries.size() != 3) {
            throw DataError("rating sheet for " + e.sample_id + " needs exactly 3 prototypes, got " +
                            std::to_string(e.entries.size()));
        }
        const auto it = by_id.find(e.sample_id);
        if (it == by_id.end()) throw DataError("test image for " + e.sample_id + " is missing");
        const std::filesystem::path sdir = dir / e.sample_id;
        std::filesystem::create_directories(sdir);
        write_png(sdir / "test.png", to_rgb(it->second->image));

        std::ostringstream html;
        html << std::fixed << std::setprecision(3);
        html << "<!DOCTYPE html>\n<html><head><meta charset=\"utf-8\"><title>" << html_escape(e.sample_id)
             << "</title>\n<style>body{font-family:sans-serif}td{padding:6px;vertical-align:top}"
                "img{width:160px;image-rendering:pixelated}</style></head><body>\n";
        html << "<h2>Sample " << html_escape(e.sample_id) << "</h2>\n";
        html << "<p>Model prediction: " << grade_name(grade_from_index(e.predicted)) << "</p>\n";
        html << "<p><img src=\"" << html_escape(e.sample_id) << "/test.png\" alt=\"test image\"></p>\n<table>\n";
        html << "<tr><th>Rank</th><th>Test heatmap</th><th>Prototype</th><th>Prototype source</th>"
                "<th>Scores</th><th>Questions</th></tr>\n";
        for (std::size_t r = 0; r < e.entries.size(); ++r) {
            const auto& x = e.entries[r];
            const auto vit = visuals.find(x.prototype);
            if (vit == visuals.end()) {
                throw DataError("prototype image for prototype " + std::to_string(x.prototype) + " is missing");
            }
            const PrototypeVisual& v = *vit->second;
            const std::string rank = std::to_string(r + 1);
            RgbImage overlay = overlay_heatmap(it->second->image, minmax_normalize(x.heatmap));
            draw_bbox(overlay, x.bbox, Rgb{255, 255, 0});
            write_png(sdir / ("rank" + rank + "_heatmap.png"), overlay);
            RgbImage src = to_rgb(v.source_image);
            write_png(sdir / ("rank" + rank + "_prototype.png"), crop(src, v.bbox));
            RgbImage src_overlay = overlay_heatmap(v.source_image, minmax_normalize(v.heatmap));
            draw_bbox(src_overlay, v.bbox, Rgb{255, 255, 0});
            write_png(sdir / ("rank" + rank + "_source.png"), src_overlay);
            const std::string prefix = html_escape(e.sample_id) + "/rank" + rank;
            html << "<tr><td>" << rank << "</td><td><img src=\"" << prefix << "_heatmap.png\"></td><td><img src=\""
                 << prefix << "_prototype.png\"></td><td><img src=\"" << prefix << "_source.png\"></td>"
                 << "<td>prototype " << x.prototype << " (" << grade_name(grade_from_index(x.prototype_class))
                 << ")<br>similarity " << x.similarity << "<br>class connection " << x.connection
                 << "<br>contribution " << x.contribution << "</td><td>"
                 << "Q1 Prototype relevance: is this prototype relevant to the grade? Yes / No<br>"
                 << "Q2 Visual similarity: does the highlighted test region resemble the prototype? Yes / No"
                 << "</td></tr>\n";
            csv << e.sample_id << ',' << rank << ",,,\n";
        }
        html << "</table>\n</body></html>\n";
        std::ofstream(dir / (e.sample_id + ".html")) << html.str();
        index[e.sample_id] = std::string(grade_name(grade));
        ++sheets;
    }
    std::ofstream(dir / "sheets.json") << json{{"grades", index}}.dump(2) << '\n';
    return sheets;
}

ClinicalReport ingest_ratings(std::istream& csv, const std::map<std::string, std::string>& grades) {
    std::string line;
    if (!std::getline(csv, line)) throw DataError("ratings file is empty");
    const auto header = split_csv_line(line);
    const std::vector<std::string> expected{"sample_id", "prototype_rank", "q1", "q2", "rater_id"};
    std::map<std::string, std::size_t> col;
    for (std::size_t i = 0; i < header.size(); ++i) col[header[i]] = i;
    for (const auto& name : expected) {
        if (!col.count(name)) throw DataError("ratings file lacks column '" + name + "'");
    }

    // (sample, rater) -> rank -> answers to q1, q2
    std::map<std::pair<std::string, std::string>, std::map<int, std::array<int, 2>>> marks;
    std::map<std::pair<std::string, std::string>, std::string> problems;
    long line_no = 1;
    while (std::getline(csv, line)) {
        ++line_no;
        if (trim(line).empty()) continue;
        const auto f = split_csv_line(line);
        if (f.size() < header.size()) throw DataError("ratings line " + std::to_string(line_no) + " has too few fields");
        const std::string sample = f[col["sample_id"]];
        const std::string rater = f[col["rater_id"]];
        const auto key = std::make_pair(sample, rater);
        int rank = 0;
        try {
            rank = std::stoi(f[col["prototype_rank"]]);
        } catch (const std::exception&) {
            problems[key] = "unreadable prototype_rank on line " + std::to_string(line_no);
            continue;
        }
        if (rank < 1 || rank > 3) {
            problems[key] = "prototype_rank outside 1..3 on line " + std::to_string(line_no);
            continue;
        }
        auto& slot = marks[key];
        if (slot.count(rank)) {
            problems[key] = "duplicate prototype_rank " + std::to_string(rank);
            continue;
        }
        slot[rank] = {parse_answer(f[col["q1"]]), parse_answer(f[col["q2"]])};
    }

    ClinicalReport report;
    std::set<std::pair<std::string, std::string>> keys;
    for (const auto& [k, v] : marks) keys.insert(k);
    for (const auto& [k, v] : problems) keys.insert(k);
    for (const auto& key : keys) {
        const auto& [sample, rater] = key;
        std::string reason;
        const auto git = grades.find(sample);
        if (problems.count(key)) {
            reason = problems.at(key);
        } else if (git == grades.end()) {
            reason = "sample has no known grade";
        } else if (marks[key].size() != 3) {
            reason = "expected 3 prototype rows, found " + std::to_string(marks[key].size());
        } else {
            for (const auto& [rank, ans] : marks[key]) {
                if (ans[0] < 0 || ans[1] < 0) reason = "missing answer for prototype " + std::to_string(rank);
            }
        }
        if (!reason.empty()) {
            report.incomplete.push_back({sample, rater, reason});
            continue;
        }
        for (int q = 0; q < 2; ++q) {
            int yes = 0;
            for (const auto& [rank, ans] : marks[key]) yes += ans[q];
            const bool sample_yes = yes >= 2;
            for (const std::string& g : {git->second, std::string("total")}) {
                RatingCell& cell = report.cells[rater][g][q + 1];
                ++cell.total;
                if (sample_yes) ++cell.yes;
            }
        }
    }
    return report;
}

ClinicalReport ingest_ratings(const std::filesystem::path& csv, const std::filesystem::path& sheets_index) {
    std::ifstream is(csv);
    if (!is) throw DataError("cannot read ratings file " + csv.string());
    std::ifstream idx(sheets_index);
    if (!idx) throw DataError("cannot read sheets index " + sheets_index.string());
    json j;
    idx >> j;
    const auto grades = j.at("grades").get<std::map<std::string, std::string>>();
    return ingest_ratings(is, grades);
}

json clinical_report_to_json(const ClinicalReport& r) {
    json raters = json::object();
    for (const auto& [rater, by_grade] : r.cells) {
        json g = json::object();
        for (const auto& [grade, by_q] : by_grade) {
            json q = json::object();
            for (const auto& [question, cell] : by_q) {
                q["q" + std::to_string(question)] = {{"yes", cell.yes}, {"total", cell.total}, {"fraction", cell.fraction()}};
            }
            g[grade] = q;
        }
        raters[rater] = g;
    }
    json incomplete = json::array();
    for (const auto& i : r.incomplete) {
        incomplete.push_back({{"sample_id", i.sample_id}, {"rater_id", i.rater_id}, {"reason", i.reason}});
    }
    return {{"raters", raters}, {"incomplete", incomplete}};
}

std::string clinical_report_csv(const ClinicalReport& r) {
    std::ostringstream os;
    os << "rater_id,grade,question,yes,total,fraction\n" << std::fixed << std::setprecision(4);
    for (const auto& [rater, by_grade] : r.cells) {
        for (const auto& [grade, by_q] : by_grade) {
            for (const auto& [question, cell] : by_q) {
                os << rater << ',' << grade << ",q" << question << ',' << cell.yes << ',' << cell.total << ','
                   << cell.fraction() << '\n';
            }
        }
    }
    return os.str();
}

}  // namespace protoverse
