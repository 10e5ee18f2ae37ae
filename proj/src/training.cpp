#include "protoverse/training.hpp"

#include <cmath>
#include <fstream>
#include <iomanip>
#include <limits>
#include <numeric>
#include <sstream>

#include "protoverse/errors.hpp"

namespace protoverse {

void TrainSchedule::validate() const {
    if (warm_epochs < 0 || joint_epochs < 0) throw ConfigError("schedule", "epoch counts must be non-negative");
    if (push_interval < 1) throw ConfigError("schedule.push_interval", "must be at least 1");
    if (last_layer_iters < 0) throw ConfigError("schedule.last_layer_iters", "must be non-negative");
    if (batch_size < 1) throw ConfigError("schedule.batch_size", "must be at least 1");
    if (!(momentum >= 0.0 && momentum < 1.0)) throw ConfigError("schedule.momentum", "must lie in [0, 1)");
    if (lr_backbone < 0 || lr_backbone_pretrained < 0 || lr_addon < 0 || lr_prototypes < 0) {
        throw ConfigError("schedule", "learning rates must be non-negative");
    }
    if (l1_coeff < 0) throw ConfigError("schedule.l1_coeff", "must be non-negative");
}

std::vector<int> labels_of(std::span<const ImageSample> samples) {
    std::vector<int> labels;
    labels.reserve(samples.size());
    for (const auto& s : samples) labels.push_back(grade_index(s.grade));
    return labels;
}

std::array<long, kNumGrades> require_all_classes(std::span<const ImageSample> samples, std::string_view what) {
    const auto counts = count_grades(samples);
    for (int g = 0; g < kNumGrades; ++g) {
        if (counts[g] == 0) {
            throw DataError(std::string(what) + " has no samples of grade " +
                            std::string(grade_name(grade_from_index(g))));
        }
    }
    return counts;
}

std::vector<int> predict_all(const ProtoNet& model, std::span<const ImageSample> samples) {
    std::vector<int> out;
    out.reserve(samples.size());
    for (const auto& s : samples) out.push_back(model.predict(s));
    return out;
}

Metrics evaluate(const ProtoNet& model, std::span<const ImageSample> samples) {
    const auto preds = predict_all(model, samples);
    const auto labels = labels_of(samples);
    return compute_metrics(preds, labels, model.config().num_classes);
}

std::string hash_string(std::string_view text) {
    std::uint64_t h = 1469598103934665603ULL;
    for (unsigned char ch : text) h = (h ^ ch) * 1099511628211ULL;
    std::ostringstream os;
    os << std::hex << std::setw(16) << std::setfill('0') << h;
    return os.str();
}

void project_bank(PrototypeBank& bank, std::span<const FeatureMap> features, std::span<const int> labels,
                  std::span<const std::string> sample_ids) {
    if (features.size() != labels.size() || labels.size() != sample_ids.size()) {
        throw ShapeError("projection inputs differ in length");
    }
    const int c = bank.num_classes;
    std::vector<double> best(bank.size(), std::numeric_limits<double>::infinity());
    std::vector<ProjectionEntry> entry(bank.size());
    Eigen::MatrixXd replacement(bank.size(), bank.dim());
    std::vector<bool> class_seen(c, false);

    for (std::size_t i = 0; i < features.size(); ++i) {
        const int label = labels[i];
        if (label < 0 || label >= c) continue;
        class_seen[label] = true;
        const FeatureMap& f = features[i];
        if (f.dim() != bank.dim()) throw ShapeError("feature dimension differs from prototype dimension");
        for (int p = label * bank.per_class; p < (label + 1) * bank.per_class; ++p) {
            for (int r = 0; r < f.num_patches(); ++r) {
                const double d = (f.patches.row(r) - bank.vectors.row(p)).squaredNorm();
                if (d < best[p]) {
                    best[p] = d;
                    entry[p] = ProjectionEntry{sample_ids[i], r / f.width, r % f.width, d, label};
                    replacement.row(p) = f.patches.row(r);
                }
            }
        }
    }
    for (int k = 0; k < c; ++k) {
        if (!class_seen[k]) {
            throw DataError("cannot project prototypes of class " + std::string(grade_name(grade_from_index(k))) +
                            ": no training samples");
        }
    }
    bank.vectors = replacement;
    for (int p = 0; p < bank.size(); ++p) bank.projection[p] = entry[p];
}

void project_prototypes(ProtoNet& model, std::span<const ImageSample> train_set) {
    std::vector<FeatureMap> features;
    std::vector<std::string> ids;
    features.reserve(train_set.size());
    ids.reserve(train_set.size());
    for (const auto& sample : train_set) {
        features.push_back(model.forward_features(sample));
        ids.push_back(sample.sample_id);
    }
    const auto labels = labels_of(train_set);
    project_bank(model.prototypes(), features, labels, ids);
}

namespace {

struct HeadObjective {
    double mwce = 0.0;
    Eigen::MatrixXd grad;
};

HeadObjective head_objective(const Eigen::MatrixXd& scores, std::span<const int> labels, const Eigen::MatrixXd& w,
                             const WeightVector& class_weights, bool with_grad) {
    HeadObjective out;
    if (with_grad) out.grad = Eigen::MatrixXd::Zero(w.rows(), w.cols());
    const double inv_n = 1.0 / static_cast<double>(labels.size());
    Eigen::VectorXd g;
    for (std::size_t i = 0; i < labels.size(); ++i) {
        const Eigen::VectorXd s = scores.row(static_cast<Eigen::Index>(i)).transpose();
        const Eigen::VectorXd logits = w.transpose() * s;
        out.mwce += inv_n * mwce_loss(logits, labels[i], class_weights, with_grad ? &g : nullptr);
        if (with_grad) out.grad += inv_n * s * g.transpose();
    }
    return out;
}

double off_class_l1(const Eigen::MatrixXd& w, int per_class) {
    double s = 0.0;
    for (Eigen::Index p = 0; p < w.rows(); ++p) {
        for (Eigen::Index k = 0; k < w.cols(); ++k) {
            if (k != p / per_class) s += std::fabs(w(p, k));
        }
    }
    return s;
}

}  // namespace

LastLayerResult optimize_last_layer(const Eigen::MatrixXd& scores, std::span<const int> labels,
                                    const ClassConnectionMatrix& initial, int per_class,
                                    const WeightVector& class_weights, double l1_coeff, int iterations) {
    if (scores.rows() != static_cast<Eigen::Index>(labels.size())) throw ShapeError("scores and labels differ in length");
    if (labels.empty()) throw DataError("last-layer optimisation on an empty set");
    if (!scores.allFinite() || !initial.weights.allFinite()) throw DomainError("non-finite scores or connections");
    LastLayerResult out;
    Eigen::MatrixXd w = initial.weights;
    HeadObjective cur = head_objective(scores, labels, w, class_weights, true);
    out.objective.push_back(cur.mwce + l1_coeff * off_class_l1(w, per_class));
    out.mwce.push_back(cur.mwce);
    double step = 1.0;
    for (int it = 0; it < iterations; ++it) {
        bool accepted = false;
        Eigen::MatrixXd next;
        HeadObjective trial;
        for (int tries = 0; tries < 60; ++tries) {
            next = w - step * cur.grad;
            for (Eigen::Index p = 0; p < next.rows(); ++p) {
                for (Eigen::Index k = 0; k < next.cols(); ++k) {
                    if (k == p / per_class) continue;
                    const double v = next(p, k);
                    next(p, k) = std::copysign(std::max(std::fabs(v) - step * l1_coeff, 0.0), v);
                }
            }
            trial = head_objective(scores, labels, next, class_weights, false);
            const Eigen::MatrixXd delta = next - w;
            const double bound = cur.mwce + (cur.grad.array() * delta.array()).sum() + delta.squaredNorm() / (2.0 * step);
            if (trial.mwce <= bound + 1e-15) {
                accepted = true;
                break;
            }
            step *= 0.5;
        }
        if (!accepted) break;
        const double new_obj = trial.mwce + l1_coeff * off_class_l1(next, per_class);
        if (new_obj > out.objective.back()) break;  // no further progress at machine precision
        const bool stalled = out.objective.back() - new_obj < 1e-13;
        w = next;
        cur = head_objective(scores, labels, w, class_weights, true);
        out.objective.push_back(new_obj);
        out.mwce.push_back(cur.mwce);
        if (stalled) break;
        step *= 2.0;
    }
    out.connections.weights = w;
    return out;
}

LastLayerResult optimize_last_layer(ProtoNet& model, std::span<const ImageSample> train_set,
                                    const WeightVector& class_weights, double l1_coeff, int iterations) {
    Eigen::MatrixXd scores(static_cast<Eigen::Index>(train_set.size()), model.prototypes().size());
    for (std::size_t i = 0; i < train_set.size(); ++i) {
        scores.row(static_cast<Eigen::Index>(i)) = model.forward(train_set[i]).scores.transpose();
    }
    const auto labels = labels_of(train_set);
    LastLayerResult r = optimize_last_layer(scores, labels, model.connections(), model.prototypes().per_class,
                                            class_weights, l1_coeff, iterations);
    model.connections() = r.connections;
    return r;
}

void write_epoch_csv(const std::filesystem::path& path, std::span<const EpochLog> log) {
    std::ofstream os(path);
    if (!os) throw DataError("cannot write " + path.string());
    os << "epoch,stage,mwce,clst,sep,div,total,val_class_avg_acc,val_class_avg_f1,val_sample_acc\n";
    os << std::setprecision(10);
    for (const auto& e : log) {
        os << e.epoch << ',' << stage_name(e.stage) << ',' << e.loss.mwce << ',' << e.loss.clst << ',' << e.loss.sep
           << ',' << e.loss.div << ',' << e.loss.total << ',' << e.val.class_avg_accuracy << ','
           << e.val.class_avg_f1 << ',' << e.val.sample_accuracy << '\n';
    }
}

namespace {

nlohmann::json schedule_json(const TrainConfig& c) {
    const auto& s = c.schedule;
    return nlohmann::json{{"model", model_config_to_json(c.model)},
                          {"lambda_clst", c.losses.lambda_clst},
                          {"lambda_sep", c.losses.lambda_sep},
                          {"lambda_div", c.losses.lambda_div},
                          {"weighting", strategy_name(c.losses.weighting)},
                          {"normalized_diversity", c.losses.normalized_diversity},
                          {"warm_epochs", s.warm_epochs},
                          {"joint_epochs", s.joint_epochs},
                          {"push_interval", s.push_interval},
                          {"last_layer_iters", s.last_layer_iters},
                          {"lr", {s.lr_backbone, s.lr_backbone_pretrained, s.lr_addon, s.lr_prototypes}},
                          {"momentum", s.momentum},
                          {"batch_size", s.batch_size},
                          {"l1_coeff", s.l1_coeff},
                          {"seed", c.seed}};
}

}  // namespace

TrainResult train(const TrainConfig& config, std::span<const ImageSample> train_set,
                  std::span<const ImageSample> val_set, const EpochCallback& on_epoch) {
    config.model.validate();
    config.schedule.validate();
    if (config.model.num_classes != kNumGrades) {
        throw ConfigError("model.num_classes", "the grading task has exactly " + std::to_string(kNumGrades) + " classes");
    }
    const auto counts = require_all_classes(train_set, "training set");
    require_all_classes(val_set, "validation set");
    const WeightVector class_weights = mwce_weights(counts, config.losses.weighting);
    const std::string config_hash = hash_string(schedule_json(config).dump());
    const auto& sched = config.schedule;

    TrainResult result;
    ProtoNet model(config.model, mix_seed(config.seed, 1));
    Rng order_rng(mix_seed(config.seed, 2));
    const auto labels = labels_of(train_set);

    std::vector<nn::Tensor> inputs;
    inputs.reserve(train_set.size());
    for (const auto& s : train_set) inputs.push_back(model.input_tensor(s));

    Eigen::MatrixXd proto_velocity = Eigen::MatrixXd::Zero(model.prototypes().size(), model.prototypes().dim());
    const double lr_backbone = config.model.pretrained ? sched.lr_backbone_pretrained : sched.lr_backbone;
    const double eps = config.model.epsilon;
    std::vector<std::size_t> order(train_set.size());
    std::iota(order.begin(), order.end(), 0);

    auto snapshot = [&](StageTag stage, int epoch, const nlohmann::json& metrics) {
        if (!result.checkpoints.empty() && !stage_transition_allowed(result.checkpoints.back().stage, stage)) {
            throw StageError("illegal stage transition " + std::string(stage_name(result.checkpoints.back().stage)) +
                             " -> " + std::string(stage_name(stage)));
        }
        result.checkpoints.push_back(Checkpoint{model, stage, epoch, metrics, config_hash});
    };

    auto push_cycle = [&](int epoch) {
        snapshot(StageTag::joint, epoch, nlohmann::json::object());
        project_prototypes(model, train_set);
        proto_velocity.setZero();
        snapshot(StageTag::pushed, epoch, nlohmann::json::object());
        optimize_last_layer(model, train_set, class_weights, sched.l1_coeff, sched.last_layer_iters);
        const Metrics val = evaluate(model, val_set);
        snapshot(StageTag::final_, epoch, metrics_to_json(val));
    };

    std::vector<nn::Tensor> warm_cache;  // backbone outputs while the backbone is frozen
    const int total_epochs = sched.warm_epochs + sched.joint_epochs;
    for (int epoch = 0; epoch < total_epochs; ++epoch) {
        const bool warm = epoch < sched.warm_epochs;
        if (warm && warm_cache.empty()) {
            warm_cache.reserve(inputs.size());
            for (const auto& x : inputs) warm_cache.push_back(model.backbone().forward(x));
        }
        shuffle(order, order_rng);

        std::vector<nn::SgdGroup> groups;
        groups.push_back({model.addon().parameters(), sched.lr_addon});
        if (!warm) groups.push_back({model.backbone().parameters(), lr_backbone});

        LossBreakdown epoch_loss;
        int batches = 0;
        for (std::size_t start = 0; start < order.size(); start += static_cast<std::size_t>(sched.batch_size)) {
            const std::size_t end = std::min(order.size(), start + static_cast<std::size_t>(sched.batch_size));
            const double scale = 1.0 / static_cast<double>(end - start);
            model.addon().zero_grad();
            model.backbone().zero_grad();
            Eigen::MatrixXd grad_protos = Eigen::MatrixXd::Zero(model.prototypes().size(), model.prototypes().dim());
            LossBreakdown batch;
            for (std::size_t k = start; k < end; ++k) {
                const std::size_t i = order[k];
                ProtoNet::Trace trace;
                FeatureMap f;
                if (warm) {
                    f = tensor_to_feature_map(model.addon().forward(warm_cache[i], trace.addon));
                } else {
                    f = model.forward_features(inputs[i], trace);
                }
                Eigen::MatrixXd grad_f = Eigen::MatrixXd::Zero(f.num_patches(), f.dim());
                const SampleLossTerms t = sample_loss_terms(f, labels[i], model.prototypes(), model.connections(),
                                                            class_weights, config.losses, eps, scale, &grad_f,
                                                            &grad_protos);
                batch.mwce += scale * t.mwce;
                batch.clst += scale * t.clst;
                batch.sep += scale * t.sep;
                model.backward_features(trace, grad_f, !warm);
            }
            Eigen::MatrixXd grad_div;
            batch.div = diversity_loss(model.prototypes(), &grad_div, config.losses.normalized_diversity);
            grad_protos += config.losses.lambda_div * grad_div;
            batch.total = batch.mwce + config.losses.lambda_clst * batch.clst - config.losses.lambda_sep * batch.sep +
                          config.losses.lambda_div * batch.div;
            if (!std::isfinite(batch.total) || !grad_protos.allFinite()) {
                std::ostringstream msg;
                msg << "non-finite loss at epoch " << epoch << " batch " << batches << " (mwce=" << batch.mwce
                    << ", clst=" << batch.clst << ", sep=" << batch.sep << ", div=" << batch.div << ")";
                throw DivergenceError(msg.str());
            }
            nn::sgd_step(groups, sched.momentum, 1.0);
            proto_velocity = sched.momentum * proto_velocity + grad_protos;
            model.prototypes().vectors -= sched.lr_prototypes * proto_velocity;

            epoch_loss.mwce += batch.mwce;
            epoch_loss.clst += batch.clst;
            epoch_loss.sep += batch.sep;
            epoch_loss.div += batch.div;
            epoch_loss.total += batch.total;
            ++batches;
        }
        if (batches > 0) {
            for (double* v : {&epoch_loss.mwce, &epoch_loss.clst, &epoch_loss.sep, &epoch_loss.div, &epoch_loss.total}) {
                *v /= batches;
            }
        }

        EpochLog entry;
        entry.epoch = epoch;
        entry.stage = warm ? StageTag::warm : StageTag::joint;
        entry.loss = epoch_loss;
        entry.backbone_hash = model.backbone().parameter_hash();
        entry.val = evaluate(model, val_set);
        result.log.push_back(entry);
        if (on_epoch) on_epoch(entry);

        if (warm && epoch + 1 == sched.warm_epochs) {
            warm_cache.clear();
            snapshot(StageTag::warm, epoch, metrics_to_json(entry.val));
        }
        if (!warm) {
            const int joint_index = epoch - sched.warm_epochs + 1;
            if (joint_index % sched.push_interval == 0 || joint_index == sched.joint_epochs) push_cycle(epoch);
        }
    }
    if (sched.joint_epochs == 0) {
        // Warm-only schedule still ends with a push and a last-layer pass.
        project_prototypes(model, train_set);
        snapshot(StageTag::pushed, total_epochs - 1, nlohmann::json::object());
        optimize_last_layer(model, train_set, class_weights, sched.l1_coeff, sched.last_layer_iters);
        snapshot(StageTag::final_, total_epochs - 1, metrics_to_json(evaluate(model, val_set)));
    }

    double best_score = -1.0;
    for (std::size_t i = 0; i < result.checkpoints.size(); ++i) {
        const auto& ck = result.checkpoints[i];
        if (ck.stage != StageTag::final_) continue;
        const double score = ck.metrics.at("class_avg_accuracy").get<double>();
        if (score >= best_score) {
            best_score = score;
            result.best = i;
        }
    }
    return result;
}

nlohmann::json train_config_to_json(const TrainConfig& config) { return schedule_json(config); }

}  // namespace protoverse
