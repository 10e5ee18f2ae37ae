// protoverse: command-line entry point for data generation, training, explanation and evaluation.

#include <CLI11.hpp>

#include <algorithm>
#include <cstdlib>
#include <fstream>
#include <iostream>
#include <set>
#include <string>

#include "protoverse/baselines.hpp"
#include "protoverse/config.hpp"
#include "protoverse/errors.hpp"
#include "protoverse/eval.hpp"
#include "protoverse/explain.hpp"
#include "protoverse/training.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace protoverse;

namespace {

const std::vector<std::string> kVerbs{"gen-data", "train",          "push",  "explain", "gallery", "baseline",
                                      "cam",      "evaluate",       "cross-validate", "ablate", "sheets",
                                      "clinical-report"};

constexpr int kExitFailure = 1;
constexpr int kExitUsage = 2;
constexpr int kExitConfig = 3;

void log(const std::string& msg) { std::cerr << "[protoverse] " << msg << '\n'; }

std::string usage() {
    std::string s = "usage: protoverse <verb> [--config FILE] [--out DIR] [--seed N] [options]\nverbs:";
    for (const auto& v : kVerbs) s += " " + v;
    return s + "\nrun 'protoverse <verb> --help' for verb options\n";
}

void print_error(const std::string& kind, const std::string& message, const std::string& path = {}) {
    json j{{"error", kind}, {"message", message}};
    if (!path.empty()) j["path"] = path;
    std::cerr << j.dump() << '\n';
}

struct Options {
    std::string config_path;
    std::string out_dir;
    std::optional<std::uint64_t> seed;
    std::string data_dir;
    std::string checkpoint;
    std::string baseline;
    std::string method;
    std::string axis = "num_prototypes";
    std::string ratings;
    std::string sheets_index;
    std::optional<int> k;
    int limit = 0;
    bool png = false;
    std::string split = "test";
};

struct Data {
    std::vector<ImageSample> train, val, test;
};

ExperimentConfig resolve_config(const Options& o, json& normalized) {
    json user = json::object();
    if (!o.config_path.empty()) {
        std::ifstream is(o.config_path);
        if (!is) throw ConfigError("", "cannot read config file " + o.config_path);
        try {
            is >> user;
        } catch (const json::exception& e) {
            throw ConfigError("", std::string("config is not valid JSON: ") + e.what());
        }
    }
    if (o.seed) user["seed"] = *o.seed;
    normalized = normalize_config(user);
    ExperimentConfig c = config_from_json(normalized);
    if (o.k) {
        if (*o.k < 1) throw ConfigError("explain.k", "must be at least 1");
        c.explain.k = *o.k;
        normalized["explain"]["k"] = *o.k;
    }
    if (!o.data_dir.empty()) {
        c.data.dir = o.data_dir;
        normalized["data"]["dir"] = o.data_dir;
    }
    return c;
}

fs::path output_dir(const Options& o, const ExperimentConfig& c, const std::string& verb) {
    if (!o.out_dir.empty()) return o.out_dir;
    const char* root = std::getenv("PROTOVERSE_OUTPUT_ROOT");
    return fs::path(root && *root ? root : c.output_dir) / verb;
}

// Uses split manifests when the dataset directory has them, otherwise splits deterministically.
Data load_data(const ExperimentConfig& c) {
    Data d;
    if (c.data.dir.empty()) {
        log("generating the synthetic dataset in memory");
        auto parts = split_samples(generate_synthetic_samples(c.data.synthetic).samples, c.data.split, split_seed(c));
        d.train = std::move(parts[0]);
        d.val = std::move(parts[1]);
        d.test = std::move(parts[2]);
        return d;
    }
    const fs::path dir = c.data.dir;
    if (fs::exists(dir / "train_manifest.json")) {
        d.train = load_samples(read_manifest(dir / "train_manifest.json"), dir);
        d.val = load_samples(read_manifest(dir / "val_manifest.json"), dir);
        d.test = load_samples(read_manifest(dir / "test_manifest.json"), dir);
        return d;
    }
    auto parts = split_samples(load_samples(read_manifest(dir / "manifest.json"), dir), c.data.split, split_seed(c));
    d.train = std::move(parts[0]);
    d.val = std::move(parts[1]);
    d.test = std::move(parts[2]);
    return d;
}

const std::vector<ImageSample>& pick_split(const Data& d, const std::string& split) {
    if (split == "train") return d.train;
    if (split == "val") return d.val;
    if (split == "test") return d.test;
    throw ConfigError("--split", "expected train, val or test");
}

std::string require(const std::string& value, const std::string& flag) {
    if (value.empty()) throw ConfigError(flag, "this verb requires " + flag);
    return value;
}

void write_json(const fs::path& path, const json& j) {
    std::ofstream os(path);
    if (!os) throw DataError("cannot write " + path.string());
    os << j.dump(2) << '\n';
}

json matrix_json(const Eigen::MatrixXd& m) {
    json rows = json::array();
    for (Eigen::Index r = 0; r < m.rows(); ++r) {
        std::vector<double> row(m.cols());
        for (Eigen::Index c = 0; c < m.cols(); ++c) row[c] = m(r, c);
        rows.push_back(row);
    }
    return rows;
}

std::vector<ImageSample> limited(const std::vector<ImageSample>& v, int limit) {
    if (limit <= 0 || static_cast<std::size_t>(limit) >= v.size()) return v;
    return {v.begin(), v.begin() + limit};
}

void save_stage_checkpoints(const fs::path& out, const TrainResult& r) {
    fs::create_directories(out / "checkpoints");
    for (std::size_t i = 0; i < r.checkpoints.size(); ++i) {
        const auto& ck = r.checkpoints[i];
        save_checkpoint(out / "checkpoints" /
                            ("ckpt_" + std::to_string(i) + "_" + std::string(stage_name(ck.stage)) + "_epoch" +
                             std::to_string(ck.epoch) + ".json"),
                        ck);
    }
    save_checkpoint(out / "best.json", r.best_checkpoint());
}

int run_verb(const std::string& verb, const Options& o) {
    json normalized;
    const ExperimentConfig config = resolve_config(o, normalized);
    const fs::path out = output_dir(o, config, verb);
    fs::create_directories(out);
    write_json(out / "config.json", normalized);
    const std::string config_hash = hash_string(normalized.dump());

    if (verb == "gen-data") {
        const DatasetManifest m = generate_synthetic_dataset(config.data.synthetic, out, o.png);
        auto parts = split_dataset(m, config.data.split, split_seed(config));
        write_manifest(out / "train_manifest.json", parts[0]);
        write_manifest(out / "val_manifest.json", parts[1]);
        write_manifest(out / "test_manifest.json", parts[2]);
        log("wrote " + std::to_string(m.samples.size()) + " samples to " + out.string());
    } else if (verb == "train") {
        const Data d = load_data(config);
        const TrainResult r = train(config.train, d.train, d.val, [](const EpochLog& e) {
            log("epoch " + std::to_string(e.epoch) + " " + std::string(stage_name(e.stage)) + " loss " +
                std::to_string(e.loss.total) + " val class-avg " + std::to_string(e.val.class_avg_accuracy));
        });
        write_epoch_csv(out / "epochs.csv", r.log);
        save_stage_checkpoints(out, r);
        const Metrics test = evaluate(r.best_checkpoint().model, d.test);
        write_json(out / "metrics.json", {{"validation", r.best_checkpoint().metrics},
                                          {"test", metrics_to_json(test)},
                                          {"best_epoch", r.best_checkpoint().epoch}});
        log("test class-average accuracy " + std::to_string(test.class_avg_accuracy));
    } else if (verb == "push") {
        Checkpoint ck = load_checkpoint(require(o.checkpoint, "--checkpoint"));
        const Data d = load_data(config);
        project_prototypes(ck.model, d.train);
        Checkpoint pushed{ck.model, StageTag::pushed, ck.epoch, json::object(), ck.config_hash};
        save_checkpoint(out / "pushed.json", pushed);
        const WeightVector w = mwce_weights(require_all_classes(d.train, "training set"), config.train.losses.weighting);
        const LastLayerResult ll = optimize_last_layer(ck.model, d.train, w, config.train.schedule.l1_coeff,
                                                       config.train.schedule.last_layer_iters);
        const Metrics val = evaluate(ck.model, d.val);
        save_checkpoint(out / "final.json", Checkpoint{ck.model, StageTag::final_, ck.epoch, metrics_to_json(val),
                                                       ck.config_hash});
        write_json(out / "last_layer.json", {{"objective", ll.objective}, {"mwce", ll.mwce}});
    } else if (verb == "explain") {
        const Checkpoint ck = load_checkpoint(require(o.checkpoint, "--checkpoint"));
        const Data d = load_data(config);
        const auto gallery = prototype_gallery(ck.model, d.train);
        const auto samples = limited(pick_split(d, o.split), o.limit);
        json index = json::array();
        for (const auto& s : samples) {
            const Explanation e = explain_sample(ck.model, s, config.explain.k);
            export_explanation(out / "explanations" / s.sample_id, e, s, gallery);
            index.push_back({{"sample_id", s.sample_id},
                             {"label", std::string(grade_name(s.grade))},
                             {"predicted", std::string(grade_name(grade_from_index(e.predicted)))}});
        }
        write_json(out / "explanations.json", index);
    } else if (verb == "gallery") {
        const Checkpoint ck = load_checkpoint(require(o.checkpoint, "--checkpoint"));
        const Data d = load_data(config);
        export_gallery(out / "gallery", prototype_gallery(ck.model, d.train));
        write_json(out / "cosine.json", {{"cosine", matrix_json(prototype_cosine_matrix(ck.model.prototypes()))},
                                         {"mean_within_class_abs_cosine",
                                          mean_within_class_abs_cosine(ck.model.prototypes())}});
    } else if (verb == "baseline") {
        const Data d = load_data(config);
        const BaselineResult r = train_baseline(config.train, d.train, d.val, [](const EpochLog& e) {
            log("baseline epoch " + std::to_string(e.epoch) + " loss " + std::to_string(e.loss.total) +
                " val class-avg " + std::to_string(e.val.class_avg_accuracy));
        });
        write_epoch_csv(out / "epochs.csv", r.log);
        save_baseline(out / "baseline.json", r.best);
        write_json(out / "metrics.json", {{"validation", metrics_to_json(r.best_val)},
                                          {"test", metrics_to_json(evaluate(r.best, d.test))},
                                          {"best_epoch", r.best_epoch}});
    } else if (verb == "cam") {
        const BaselineNet model = load_baseline(require(o.baseline, "--baseline"));
        const Data d = load_data(config);
        std::vector<CamVariant> methods = config.cam.methods;
        if (!o.method.empty()) methods = {cam_from_name(o.method)};
        const auto samples = limited(pick_split(d, o.split), o.limit);
        json summary = json::object();
        for (CamVariant m : methods) {
            const std::string name(cam_name(m));
            long hits = 0, considered = 0;
            json items = json::array();
            for (const auto& s : samples) {
                const Image h = cam_heatmap(model, s, CamMethod{m, config.cam.target_layer});
                const fs::path dir = out / name / s.sample_id;
                fs::create_directories(dir);
                write_png(dir / "heatmap.png", overlay_heatmap(s.image, h));
                json item{{"sample_id", s.sample_id}, {"heatmap", (fs::path(name) / s.sample_id / "heatmap.png").string()}};
                if (s.geometry) {
                    const bool hit = peak_inside(h, s.geometry->center_bbox);
                    item["peak_inside_target"] = hit;
                    ++considered;
                    hits += hit ? 1 : 0;
                }
                items.push_back(item);
            }
            summary[name] = {{"samples", items},
                             {"localization_rate",
                              considered ? static_cast<double>(hits) / static_cast<double>(considered) : 0.0}};
        }
        write_json(out / "cam.json", summary);
    } else if (verb == "evaluate") {
        const Checkpoint ck = load_checkpoint(require(o.checkpoint, "--checkpoint"));
        const Data d = load_data(config);
        const auto& samples = pick_split(d, o.split);
        const Metrics m = evaluate(ck.model, samples);
        long hits = 0, considered = 0;
        if (ck.model.prototypes().fully_projected()) {
            for (const auto& s : samples) {
                if (s.grade == Grade::G0 || !s.geometry) continue;
                const Explanation e = explain_sample(ck.model, s, 1);
                if (e.predicted != e.label) continue;
                ++considered;
                if (intersect(e.entries[0].bbox, s.geometry->center_bbox).area() > 0) ++hits;
            }
        }
        write_json(out / "metrics.json",
                   {{"split", o.split},
                    {"metrics", metrics_to_json(m)},
                    {"contribution_matrix", matrix_json(contribution_matrix(ck.model, samples))},
                    {"prototype_cosine", matrix_json(prototype_cosine_matrix(ck.model.prototypes()))},
                    {"mean_within_class_abs_cosine", mean_within_class_abs_cosine(ck.model.prototypes())},
                    {"fracture_localization",
                     {{"hits", hits},
                      {"correct_fracture_samples", considered},
                      {"rate", considered ? static_cast<double>(hits) / static_cast<double>(considered) : 0.0}}}});
        log("class-average accuracy " + std::to_string(m.class_avg_accuracy));
    } else if (verb == "cross-validate") {
        const Data d = load_data(config);
        std::vector<ImageSample> pool = d.train;
        pool.insert(pool.end(), d.val.begin(), d.val.end());
        const CVReport r = cross_validate(config, pool, config.eval.variants);
        write_json(out / "cv_report.json", cv_report_to_json(r));
    } else if (verb == "ablate") {
        const Data d = load_data(config);
        std::vector<ImageSample> pool = d.train;
        pool.insert(pool.end(), d.val.begin(), d.val.end());
        write_ablation(out, run_ablation(config, axis_from_name(o.axis), pool));
    } else if (verb == "sheets") {
        const Checkpoint ck = load_checkpoint(require(o.checkpoint, "--checkpoint"));
        const Data d = load_data(config);
        const auto gallery = prototype_gallery(ck.model, d.train);
        std::vector<Explanation> explanations;
        for (const auto& s : d.test) {
            if (s.grade != Grade::G0) explanations.push_back(explain_sample(ck.model, s, 3));
        }
        const int n = make_rating_sheets(out / "sheets", explanations, d.test, gallery);
        log("wrote " + std::to_string(n) + " rating sheets");
    } else if (verb == "clinical-report") {
        const ClinicalReport r = ingest_ratings(fs::path(require(o.ratings, "--ratings")),
                                                fs::path(require(o.sheets_index, "--sheets")));
        for (const auto& i : r.incomplete) {
            log("excluded " + i.sample_id + " (rater " + i.rater_id + "): " + i.reason);
        }
        write_json(out / "clinical_report.json", clinical_report_to_json(r));
        std::ofstream(out / "clinical_report.csv") << clinical_report_csv(r);
    }

    json artifacts = json::array();
    for (const auto& entry : fs::recursive_directory_iterator(out)) {
        if (entry.is_regular_file()) artifacts.push_back(fs::relative(entry.path(), out).string());
    }
    std::sort(artifacts.begin(), artifacts.end());
    write_json(out / "artifacts.json",
               {{"verb", verb}, {"config_hash", config_hash}, {"artifacts", artifacts}});
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    if (argc < 2 || std::find(kVerbs.begin(), kVerbs.end(), argv[1]) == kVerbs.end()) {
        if (argc >= 2 && (std::string(argv[1]) == "--help" || std::string(argv[1]) == "-h")) {
            std::cout << usage();
            return 0;
        }
        print_error("usage", argc < 2 ? "missing verb" : "unknown verb '" + std::string(argv[1]) + "'");
        std::cerr << usage();
        return kExitUsage;
    }
    const std::string verb = argv[1];
    Options o;
    CLI::App app{"protoverse " + verb};
    app.add_option("--config", o.config_path, "experiment config JSON");
    app.add_option("--out", o.out_dir, "output directory (default <output root>/<verb>)");
    app.add_option("--seed", o.seed, "override the config seed");
    app.add_option("--data", o.data_dir, "dataset directory written by gen-data");
    if (verb == "gen-data") app.add_flag("--png", o.png, "also write 16-bit PNG previews");
    if (verb == "push" || verb == "explain" || verb == "gallery" || verb == "evaluate" || verb == "sheets") {
        app.add_option("--checkpoint", o.checkpoint, "ProtoVerse checkpoint")->required();
    }
    if (verb == "explain") app.add_option("--k", o.k, "prototypes per explanation");
    if (verb == "explain" || verb == "cam") app.add_option("--limit", o.limit, "process at most this many samples");
    if (verb == "explain" || verb == "cam" || verb == "evaluate") app.add_option("--split", o.split, "train, val or test");
    if (verb == "cam") {
        app.add_option("--baseline", o.baseline, "baseline checkpoint")->required();
        app.add_option("--method", o.method, "gradcam, gradcam_pp or xgradcam (default: all configured)");
    }
    if (verb == "ablate") app.add_option("--axis", o.axis, "num_prototypes, lambda_div or weighting");
    if (verb == "clinical-report") {
        app.add_option("--ratings", o.ratings, "completed ratings CSV")->required();
        app.add_option("--sheets", o.sheets_index, "sheets.json written by the sheets verb")->required();
    }
    try {
        app.parse(argc - 1, argv + 1);
    } catch (const CLI::CallForHelp&) {
        std::cout << app.help();
        return 0;
    } catch (const CLI::ParseError& e) {
        print_error("usage", e.what());
        std::cerr << app.help();
        return kExitUsage;
    }

    try {
        return run_verb(verb, o);
    } catch (const ConfigError& e) {
        print_error("config", e.detail(), e.path());
        return kExitConfig;
    } catch (const Error& e) {
        print_error("runtime", e.what());
        return kExitFailure;
    } catch (const std::exception& e) {
        print_error("internal", e.what());
        return kExitFailure;
    }
}
