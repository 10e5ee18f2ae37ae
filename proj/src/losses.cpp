#include "protoverse/losses.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

#include "protoverse/errors.hpp"

namespace protoverse {

std::string_view strategy_name(WeightingStrategy s) {
    switch (s) {
        case WeightingStrategy::uniform: return "uniform";
        case WeightingStrategy::ins: return "INS";
        case WeightingStrategy::isns: return "ISNS";
        case WeightingStrategy::median_frequency: return "median_frequency";
        case WeightingStrategy::literal_eq3: return "literal_eq3";
    }
    return "?";
}

WeightingStrategy strategy_from_name(std::string_view name) {
    if (name == "uniform") return WeightingStrategy::uniform;
    if (name == "INS" || name == "ins") return WeightingStrategy::ins;
    if (name == "ISNS" || name == "isns") return WeightingStrategy::isns;
    if (name == "median_frequency") return WeightingStrategy::median_frequency;
    if (name == "literal_eq3") return WeightingStrategy::literal_eq3;
    throw ConfigError("losses.weighting", "unknown weighting strategy '" + std::string(name) + "'");
}

WeightVector mwce_weights(std::span<const long> class_counts, WeightingStrategy strategy) {
    const auto c = static_cast<Eigen::Index>(class_counts.size());
    if (c == 0) throw DomainError("mwce_weights: no classes");
    for (long d : class_counts) {
        if (d < 1) throw DomainError("mwce_weights: every class needs at least one training sample");
    }
    WeightVector out;
    out.strategy = strategy;
    out.counts.assign(class_counts.begin(), class_counts.end());
    Eigen::VectorXd d(c);
    for (Eigen::Index j = 0; j < c; ++j) d(j) = static_cast<double>(class_counts[j]);

    std::vector<double> sorted(d.data(), d.data() + c);
    std::sort(sorted.begin(), sorted.end());
    const double median = (c % 2 == 1) ? sorted[c / 2] : 0.5 * (sorted[c / 2 - 1] + sorted[c / 2]);
    const double total = d.sum();

    switch (strategy) {
        case WeightingStrategy::uniform:
            out.w = Eigen::VectorXd::Ones(c);
            break;
        case WeightingStrategy::ins:
            out.w = d.cwiseInverse();
            out.w /= out.w.mean();
            break;
        case WeightingStrategy::isns:
            out.w = d.cwiseSqrt().cwiseInverse();
            out.w /= out.w.mean();
            break;
        case WeightingStrategy::median_frequency:
            out.w = median * d.cwiseInverse();
            break;
        case WeightingStrategy::literal_eq3:
            if (c < 2) throw DomainError("literal_eq3 weighting needs at least two classes");
            out.w.resize(c);
            for (Eigen::Index j = 0; j < c; ++j) out.w(j) = median / (total - d(j));
            break;
    }
    return out;
}

double mwce_loss(const Eigen::VectorXd& logits, int label, const WeightVector& weights, Eigen::VectorXd* grad_logits) {
    if (label < 0 || label >= logits.size()) throw DomainError("mwce_loss: label outside class range");
    if (weights.w.size() != logits.size()) throw ShapeError("mwce_loss: weight vector size differs from logits");
    const Eigen::VectorXd prob = softmax(logits);
    const double w = weights.w(label);
    if (grad_logits) {
        *grad_logits = w * prob;
        (*grad_logits)(label) -= w;
    }
    return -w * std::log(std::max(prob(label), kLogFloor));
}

namespace {

enum class Ownership { own, foreign };

// For each sample: min over selected prototypes and all patches of the squared distance.
double min_patch_loss(std::span<const FeatureMap> features, std::span<const int> labels, const PrototypeBank& bank,
                      Ownership which, PatchLossGrad* grad) {
    if (features.empty()) throw DataError("patch loss on an empty batch");
    if (features.size() != labels.size()) throw ShapeError("features and labels differ in length");
    if (which == Ownership::foreign && bank.num_classes < 2) {
        throw DomainError("separation loss needs prototypes of at least one other class");
    }
    if (grad) {
        grad->prototypes = Eigen::MatrixXd::Zero(bank.size(), bank.dim());
        grad->features.clear();
    }
    const double inv_n = 1.0 / static_cast<double>(features.size());
    double total = 0.0;
    for (std::size_t i = 0; i < features.size(); ++i) {
        const FeatureMap& f = features[i];
        if (labels[i] < 0 || labels[i] >= bank.num_classes) throw DataError("label has no prototypes in the bank");
        if (f.dim() != bank.dim()) throw ShapeError("feature dimension differs from prototype dimension");
        double best = std::numeric_limits<double>::infinity();
        int best_p = -1, best_r = -1;
        for (int p = 0; p < bank.size(); ++p) {
            const bool own = bank.class_of(p) == labels[i];
            if (own != (which == Ownership::own)) continue;
            for (int r = 0; r < f.num_patches(); ++r) {
                const double d = (f.patches.row(r) - bank.vectors.row(p)).squaredNorm();
                if (d < best) {
                    best = d;
                    best_p = p;
                    best_r = r;
                }
            }
        }
        total += best;
        if (grad) {
            Eigen::MatrixXd gf = Eigen::MatrixXd::Zero(f.num_patches(), f.dim());
            const Eigen::RowVectorXd diff = f.patches.row(best_r) - bank.vectors.row(best_p);
            gf.row(best_r) = 2.0 * inv_n * diff;
            grad->prototypes.row(best_p) -= 2.0 * inv_n * diff;
            grad->features.push_back(std::move(gf));
        }
    }
    return total * inv_n;
}

}  // namespace

double cluster_loss(std::span<const FeatureMap> features, std::span<const int> labels, const PrototypeBank& bank,
                    PatchLossGrad* grad) {
    return min_patch_loss(features, labels, bank, Ownership::own, grad);
}

double separation_loss(std::span<const FeatureMap> features, std::span<const int> labels, const PrototypeBank& bank,
                       PatchLossGrad* grad) {
    return min_patch_loss(features, labels, bank, Ownership::foreign, grad);
}

double diversity_loss(const PrototypeBank& bank, Eigen::MatrixXd* grad, bool normalized) {
    const int m = bank.per_class;
    const int c = bank.num_classes;
    if (m < 2) throw DomainError("diversity loss needs at least two prototypes per class");
    const double coef = 2.0 / (static_cast<double>(c) * m * (m - 1));
    if (grad) *grad = Eigen::MatrixXd::Zero(bank.size(), bank.dim());
    double total = 0.0;
    for (int j = 0; j < c; ++j) {
        for (int k = 0; k < m; ++k) {
            const int pk = j * m + k;
            const Eigen::RowVectorXd vk = bank.vectors.row(pk);
            const double nk = vk.squaredNorm();
            for (int l = 0; l < m; ++l) {
                if (l == k) continue;
                const int pl = j * m + l;
                const Eigen::RowVectorXd vl = bank.vectors.row(pl);
                const double a = vk.dot(vl);
                if (!normalized) {
                    total += a * a;
                    // Ordered pairs (k,l) and (l,k) both appear; each contributes 2a*p_l to p_k.
                    if (grad) grad->row(pk) += coef * 4.0 * a * vl;
                } else {
                    const double nl = vl.squaredNorm();
                    if (nk == 0.0 || nl == 0.0) throw DomainError("normalized diversity on a zero prototype");
                    total += a * a / (nk * nl);
                    if (grad) grad->row(pk) += coef * 2.0 * (2.0 * a * vl / (nk * nl) - 2.0 * a * a * vk / (nk * nk * nl));
                }
            }
        }
    }
    return coef * total;
}

SampleLossTerms sample_loss_terms(const FeatureMap& fmap, int label, const PrototypeBank& bank,
                                  const ClassConnectionMatrix& connections, const WeightVector& class_weights,
                                  const LossWeights& lambdas, double epsilon, double scale,
                                  Eigen::MatrixXd* grad_features, Eigen::MatrixXd* grad_prototypes) {
    const PrototypeActivations act = prototype_activations(fmap, bank, connections, epsilon);
    SampleLossTerms out;
    out.logits = act.logits;
    Eigen::VectorXd g_logits;
    const bool want_grad = grad_features || grad_prototypes;
    out.mwce = mwce_loss(act.logits, label, class_weights, want_grad ? &g_logits : nullptr);

    // Cluster / separation minima reuse the distance matrix: best over own / foreign rows.
    int own_p = -1, foreign_p = -1;
    double own_d = std::numeric_limits<double>::infinity(), foreign_d = own_d;
    for (int p = 0; p < bank.size(); ++p) {
        const double d = act.min_distances(p);
        if (bank.class_of(p) == label) {
            if (d < own_d) own_d = d, own_p = p;
        } else if (d < foreign_d) {
            foreign_d = d, foreign_p = p;
        }
    }
    if (own_p < 0) throw DataError("label has no prototypes in the bank");
    out.clst = own_d;
    out.sep = foreign_p >= 0 ? foreign_d : 0.0;
    if (!want_grad) return out;

    // dL/d(min distance of prototype p), then chain through the argmin patch.
    Eigen::VectorXd g_min = Eigen::VectorXd::Zero(bank.size());
    const Eigen::VectorXd g_scores = connections.weights * g_logits;
    for (int p = 0; p < bank.size(); ++p) g_min(p) = g_scores(p) * similarity_derivative(act.min_distances(p), epsilon);
    g_min(own_p) += lambdas.lambda_clst;
    if (foreign_p >= 0) g_min(foreign_p) -= lambdas.lambda_sep;
    for (int p = 0; p < bank.size(); ++p) {
        if (g_min(p) == 0.0) continue;
        const int r = act.argmin[p];
        const Eigen::RowVectorXd diff = fmap.patches.row(r) - bank.vectors.row(p);
        if (grad_features) grad_features->row(r) += scale * 2.0 * g_min(p) * diff;
        if (grad_prototypes) grad_prototypes->row(p) -= scale * 2.0 * g_min(p) * diff;
    }
    return out;
}

LossBreakdown total_loss(std::span<const FeatureMap> features, std::span<const int> labels, const PrototypeBank& bank,
                         const ClassConnectionMatrix& connections, const LossWeights& lambdas,
                         const WeightVector& class_weights, double epsilon, PatchLossGrad* grad) {
    if (features.empty()) throw DataError("total_loss on an empty batch");
    if (features.size() != labels.size()) throw ShapeError("features and labels differ in length");
    LossBreakdown b;
    const double inv_n = 1.0 / static_cast<double>(features.size());
    if (grad) {
        grad->prototypes = Eigen::MatrixXd::Zero(bank.size(), bank.dim());
        grad->features.clear();
    }
    for (std::size_t i = 0; i < features.size(); ++i) {
        Eigen::MatrixXd gf;
        if (grad) gf = Eigen::MatrixXd::Zero(features[i].num_patches(), features[i].dim());
        const SampleLossTerms t =
            sample_loss_terms(features[i], labels[i], bank, connections, class_weights, lambdas, epsilon, inv_n,
                              grad ? &gf : nullptr, grad ? &grad->prototypes : nullptr);
        b.mwce += t.mwce * inv_n;
        b.clst += t.clst * inv_n;
        b.sep += t.sep * inv_n;
        if (grad) grad->features.push_back(std::move(gf));
    }
    Eigen::MatrixXd gdiv;
    b.div = diversity_loss(bank, grad ? &gdiv : nullptr, lambdas.normalized_diversity);
    if (grad) grad->prototypes += lambdas.lambda_div * gdiv;
    b.total = b.mwce + lambdas.lambda_clst * b.clst - lambdas.lambda_sep * b.sep + lambdas.lambda_div * b.div;
    return b;
}

}  // namespace protoverse
