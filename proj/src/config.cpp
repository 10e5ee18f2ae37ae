#include "protoverse/config.hpp"

#include <fstream>

#include "protoverse/errors.hpp"

namespace protoverse {

using nlohmann::json;

namespace {

json grade_ranges_json(const SyntheticConfig& s) {
    json r = json::object();
    for (int g = 0; g < kNumGrades; ++g) {
        r[std::string(grade_name(grade_from_index(g)))] = {s.reduction_ranges[g].lo, s.reduction_ranges[g].hi};
    }
    return r;
}

std::string type_name(const json& v) {
    if (v.is_number_integer() || v.is_number_unsigned()) return "integer";
    if (v.is_number_float()) return "number";
    return v.type_name();
}

bool is_integer(const json& v) { return v.is_number_integer() || v.is_number_unsigned(); }

void check_scalar(const json& expected, const json& got, const std::string& path) {
    bool ok = false;
    std::string want;
    if (expected.is_boolean()) {
        ok = got.is_boolean();
        want = "boolean";
    } else if (is_integer(expected)) {
        ok = is_integer(got);
        want = "integer";
    } else if (expected.is_number_float()) {
        ok = got.is_number();
        want = "number";
    } else if (expected.is_string()) {
        ok = got.is_string();
        want = "string";
    } else if (expected.is_null()) {
        ok = got.is_null() || is_integer(got);  // optional integer
        want = "integer or null";
    }
    if (!ok) throw ConfigError(path, "expected " + want + ", got " + type_name(got));
}

// Walks the user document against the defaults: rejects unknown keys and type mismatches,
// and fills every key the user left out.
json merge_checked(const json& defaults, const json& user, const std::string& path) {
    if (defaults.is_object()) {
        if (!user.is_object()) throw ConfigError(path, "expected object, got " + type_name(user));
        json out = defaults;
        for (const auto& [key, value] : user.items()) {
            const std::string sub = path.empty() ? key : path + "." + key;
            if (!defaults.contains(key)) throw ConfigError(sub, "unknown key");
            out[key] = merge_checked(defaults.at(key), value, sub);
        }
        return out;
    }
    if (defaults.is_array()) {
        if (!user.is_array()) throw ConfigError(path, "expected array, got " + type_name(user));
        if (!defaults.empty()) {
            for (std::size_t i = 0; i < user.size(); ++i) {
                const std::string sub = path + "[" + std::to_string(i) + "]";
                if (defaults[0].is_array()) {
                    merge_checked(defaults[0], user[i], sub);
                } else {
                    check_scalar(defaults[0], user[i], sub);
                }
            }
        }
        return user;
    }
    check_scalar(defaults, user, path);
    return user;
}

template <typename F>
void with_prefix(const std::string& prefix, F&& f) {
    try {
        f();
    } catch (const ConfigError& e) {
        if (prefix.empty()) throw;
        throw ConfigError(e.path().empty() ? prefix : prefix + "." + e.path(), e.detail());
    }
}

ExperimentConfig typed_from_normalized(const json& j) {
    ExperimentConfig c;
    c.seed = j.at("seed").get<std::uint64_t>();
    c.output_dir = j.at("output_dir").get<std::string>();

    const json& d = j.at("data");
    const json& s = d.at("synthetic");
    SyntheticConfig& syn = c.data.synthetic;
    const auto counts = s.at("counts").get<std::vector<int>>();
    if (counts.size() != kNumGrades) throw ConfigError("data.synthetic.counts", "expected one count per grade");
    std::copy(counts.begin(), counts.end(), syn.counts.begin());
    syn.image_size = s.at("image_size").get<int>();
    syn.context_vertebrae = s.at("context_vertebrae").get<int>();
    for (const auto& [key, value] : s.at("reduction_ranges").items()) {
        const std::string path = "data.synthetic.reduction_ranges." + key;
        if (value.size() != 2) throw ConfigError(path, "expected [lo, hi]");
        int g = 0;
        try {
            g = grade_index(grade_from_name(key));
        } catch (const Error&) {
            throw ConfigError(path, "unknown grade");
        }
        syn.reduction_ranges[g] = {value[0].get<double>(), value[1].get<double>()};
    }
    const auto styles = s.at("style_weights").get<std::vector<double>>();
    if (styles.size() != 3) throw ConfigError("data.synthetic.style_weights", "expected three weights");
    std::copy(styles.begin(), styles.end(), syn.style_weights.begin());
    syn.noise = s.at("noise").get<double>();
    syn.centroid_sigma = s.at("centroid_sigma").get<double>();
    syn.id_prefix = s.at("id_prefix").get<std::string>();
    syn.seed = mix_seed(c.seed, 100);
    with_prefix("data.synthetic", [&] { syn.validate(); });
    c.data.dir = d.at("dir").get<std::string>();
    const auto split = d.at("split").get<std::vector<double>>();
    if (split.size() != 3) throw ConfigError("data.split", "expected [train, val, test] fractions");
    double total = 0.0;
    for (double f : split) {
        if (f < 0.0) throw ConfigError("data.split", "fractions must be non-negative");
        total += f;
    }
    if (std::abs(total - 1.0) > 1e-9) throw ConfigError("data.split", "fractions must sum to 1");
    std::copy(split.begin(), split.end(), c.data.split.begin());

    with_prefix("model", [&] { c.train.model = model_config_from_json(j.at("model")); });
    with_prefix("", [&] { c.train.model.validate(); });

    const json& l = j.at("losses");
    c.train.losses.lambda_clst = l.at("lambda_clst").get<double>();
    c.train.losses.lambda_sep = l.at("lambda_sep").get<double>();
    c.train.losses.lambda_div = l.at("lambda_div").get<double>();
    c.train.losses.normalized_diversity = l.at("normalized_diversity").get<bool>();
    with_prefix("", [&] { c.train.losses.weighting = strategy_from_name(l.at("weighting").get<std::string>()); });
    for (const char* key : {"lambda_clst", "lambda_sep", "lambda_div"}) {
        if (l.at(key).get<double>() < 0.0) throw ConfigError(std::string("losses.") + key, "must be non-negative");
    }

    const json& t = j.at("schedule");
    TrainSchedule& sc = c.train.schedule;
    sc.warm_epochs = t.at("warm_epochs").get<int>();
    sc.joint_epochs = t.at("joint_epochs").get<int>();
    sc.push_interval = t.at("push_interval").get<int>();
    sc.last_layer_iters = t.at("last_layer_iters").get<int>();
    sc.lr_backbone = t.at("lr_backbone").get<double>();
    sc.lr_backbone_pretrained = t.at("lr_backbone_pretrained").get<double>();
    sc.lr_addon = t.at("lr_addon").get<double>();
    sc.lr_prototypes = t.at("lr_prototypes").get<double>();
    sc.momentum = t.at("momentum").get<double>();
    sc.batch_size = t.at("batch_size").get<int>();
    sc.l1_coeff = t.at("l1_coeff").get<double>();
    with_prefix("", [&] { sc.validate(); });
    c.train.seed = c.seed;

    const json& e = j.at("explain");
    c.explain.k = e.at("k").get<int>();
    c.explain.mass_fraction = e.at("mass_fraction").get<double>();
    if (c.explain.k < 1) throw ConfigError("explain.k", "must be at least 1");
    if (!(c.explain.mass_fraction > 0.0 && c.explain.mass_fraction <= 1.0)) {
        throw ConfigError("explain.mass_fraction", "must lie in (0, 1]");
    }

    const json& cam = j.at("cam");
    c.cam.methods.clear();
    for (const auto& m : cam.at("methods")) {
        with_prefix("", [&] { c.cam.methods.push_back(cam_from_name(m.get<std::string>())); });
    }
    if (!cam.at("target_layer").is_null()) c.cam.target_layer = cam.at("target_layer").get<int>();

    const json& ev = j.at("eval");
    c.eval.folds = ev.at("folds").get<int>();
    if (c.eval.folds < 2) throw ConfigError("eval.folds", "at least 2 folds required");
    c.eval.variants = ev.at("variants").get<std::vector<std::string>>();
    for (const auto& v : c.eval.variants) {
        if (v != "protoverse" && v != "baseline" && v != "protoverse_no_div" && v != "protoverse_uniform") {
            throw ConfigError("eval.variants", "unknown variant '" + v + "'");
        }
    }
    c.eval.val_fraction = ev.at("val_fraction").get<double>();
    if (!(c.eval.val_fraction > 0.0 && c.eval.val_fraction < 1.0)) {
        throw ConfigError("eval.val_fraction", "must lie in (0, 1)");
    }
    const json& ab = ev.at("ablation");
    c.eval.ablation.num_prototypes = ab.at("num_prototypes").get<std::vector<int>>();
    for (int m : c.eval.ablation.num_prototypes) {
        if (m < 2) {
            throw ConfigError("eval.ablation.num_prototypes",
                              "every entry must be at least 2; one prototype per class severely hurts interpretability");
        }
    }
    c.eval.ablation.lambda_div = ab.at("lambda_div").get<std::vector<double>>();
    c.eval.ablation.weighting.clear();
    for (const auto& w : ab.at("weighting")) {
        with_prefix("eval.ablation", [&] { c.eval.ablation.weighting.push_back(strategy_from_name(w.get<std::string>())); });
    }
    return c;
}

}  // namespace

json default_config_json() {
    const ExperimentConfig d;
    return config_to_json(d);
}

json config_to_json(const ExperimentConfig& c) {
    const SyntheticConfig& s = c.data.synthetic;
    const TrainSchedule& t = c.train.schedule;
    json methods = json::array();
    for (auto m : c.cam.methods) methods.push_back(std::string(cam_name(m)));
    json weighting = json::array();
    for (auto w : c.eval.ablation.weighting) weighting.push_back(std::string(strategy_name(w)));
    return json{
        {"seed", c.seed},
        {"output_dir", c.output_dir},
        {"data",
         {{"synthetic",
           {{"counts", s.counts},
            {"image_size", s.image_size},
            {"context_vertebrae", s.context_vertebrae},
            {"reduction_ranges", grade_ranges_json(s)},
            {"style_weights", s.style_weights},
            {"noise", s.noise},
            {"centroid_sigma", s.centroid_sigma},
            {"id_prefix", s.id_prefix}}},
          {"dir", c.data.dir},
          {"split", c.data.split}}},
        {"model", model_config_to_json(c.train.model)},
        {"losses",
         {{"lambda_clst", c.train.losses.lambda_clst},
          {"lambda_sep", c.train.losses.lambda_sep},
          {"lambda_div", c.train.losses.lambda_div},
          {"weighting", std::string(strategy_name(c.train.losses.weighting))},
          {"normalized_diversity", c.train.losses.normalized_diversity}}},
        {"schedule",
         {{"warm_epochs", t.warm_epochs},
          {"joint_epochs", t.joint_epochs},
          {"push_interval", t.push_interval},
          {"last_layer_iters", t.last_layer_iters},
          {"lr_backbone", t.lr_backbone},
          {"lr_backbone_pretrained", t.lr_backbone_pretrained},
          {"lr_addon", t.lr_addon},
          {"lr_prototypes", t.lr_prototypes},
          {"momentum", t.momentum},
          {"batch_size", t.batch_size},
          {"l1_coeff", t.l1_coeff}}},
        {"explain", {{"k", c.explain.k}, {"mass_fraction", c.explain.mass_fraction}}},
        {"cam", {{"methods", methods}, {"target_layer", c.cam.target_layer ? json(*c.cam.target_layer) : json(nullptr)}}},
        {"eval",
         {{"folds", c.eval.folds},
          {"variants", c.eval.variants},
          {"val_fraction", c.eval.val_fraction},
          {"ablation",
           {{"num_prototypes", c.eval.ablation.num_prototypes},
            {"lambda_div", c.eval.ablation.lambda_div},
            {"weighting", weighting}}}}}};
}

json normalize_config(const json& user) {
    const json merged = merge_checked(default_config_json(), user.is_null() ? json::object() : user, "");
    return config_to_json(typed_from_normalized(merged));
}

ExperimentConfig config_from_json(const json& user) {
    return typed_from_normalized(merge_checked(default_config_json(), user.is_null() ? json::object() : user, ""));
}

ExperimentConfig load_config(const std::filesystem::path& path) {
    std::ifstream is(path);
    if (!is) throw ConfigError("", "cannot read config file " + path.string());
    json j;
    try {
        is >> j;
    } catch (const json::exception& e) {
        throw ConfigError("", "config file " + path.string() + " is not valid JSON: " + e.what());
    }
    return config_from_json(j);
}

std::uint64_t data_seed(const ExperimentConfig& c) { return mix_seed(c.seed, 100); }
std::uint64_t split_seed(const ExperimentConfig& c) { return mix_seed(c.seed, 101); }

}  // namespace protoverse
