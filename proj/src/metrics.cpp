#include "protoverse/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "protoverse/errors.hpp"

namespace protoverse {

Metrics compute_metrics(std::span<const int> predictions, std::span<const int> labels, int num_classes) {
    if (predictions.size() != labels.size()) throw ShapeError("predictions and labels differ in length");
    if (labels.empty()) throw DataError("compute_metrics on an empty set");
    Metrics m;
    m.confusion.assign(num_classes, std::vector<long>(num_classes, 0));
    for (std::size_t i = 0; i < labels.size(); ++i) {
        if (labels[i] < 0 || labels[i] >= num_classes || predictions[i] < 0 || predictions[i] >= num_classes) {
            throw DataError("class index outside the label space");
        }
        ++m.confusion[labels[i]][predictions[i]];
    }
    long correct = 0;
    for (int k = 0; k < num_classes; ++k) {
        const long support = std::accumulate(m.confusion[k].begin(), m.confusion[k].end(), 0L);
        if (support == 0) {
            throw DataError("class " + std::to_string(k) + " has no samples; its accuracy is undefined");
        }
        long predicted = 0;
        for (int t = 0; t < num_classes; ++t) predicted += m.confusion[t][k];
        const long tp = m.confusion[k][k];
        correct += tp;
        const double recall = static_cast<double>(tp) / support;
        const double precision = predicted > 0 ? static_cast<double>(tp) / predicted : 0.0;
        const double f1 = (precision + recall) > 0 ? 2.0 * precision * recall / (precision + recall) : 0.0;
        m.per_class_accuracy.push_back(100.0 * recall);
        m.per_class_f1.push_back(100.0 * f1);
    }
    m.class_avg_accuracy = class_average(m.per_class_accuracy);
    m.class_avg_f1 = class_average(m.per_class_f1);
    m.sample_accuracy = 100.0 * static_cast<double>(correct) / static_cast<double>(labels.size());
    return m;
}

double class_average(std::span<const double> per_class) {
    if (per_class.empty()) throw DataError("class_average of no classes");
    return std::accumulate(per_class.begin(), per_class.end(), 0.0) / static_cast<double>(per_class.size());
}

nlohmann::json metrics_to_json(const Metrics& m) {
    return nlohmann::json{{"per_class_accuracy", m.per_class_accuracy},
                          {"per_class_f1", m.per_class_f1},
                          {"class_avg_accuracy", m.class_avg_accuracy},
                          {"class_avg_f1", m.class_avg_f1},
                          {"sample_accuracy", m.sample_accuracy},
                          {"confusion", m.confusion}};
}

Metrics metrics_from_json(const nlohmann::json& j) {
    Metrics m;
    m.per_class_accuracy = j.at("per_class_accuracy").get<std::vector<double>>();
    m.per_class_f1 = j.at("per_class_f1").get<std::vector<double>>();
    m.class_avg_accuracy = j.at("class_avg_accuracy").get<double>();
    m.class_avg_f1 = j.at("class_avg_f1").get<double>();
    m.sample_accuracy = j.at("sample_accuracy").get<double>();
    m.confusion = j.at("confusion").get<std::vector<std::vector<long>>>();
    return m;
}

std::string_view alternative_name(Alternative a) {
    switch (a) {
        case Alternative::greater: return "greater";
        case Alternative::less: return "less";
        case Alternative::two_sided: return "two-sided";
    }
    return "?";
}

WilcoxonResult wilcoxon_signed_rank(std::span<const double> a, std::span<const double> b, Alternative alternative) {
    if (a.size() != b.size()) throw ShapeError("wilcoxon_signed_rank: paired vectors differ in length");
    std::vector<double> diffs;
    for (std::size_t i = 0; i < a.size(); ++i) {
        const double d = a[i] - b[i];
        if (d != 0.0) diffs.push_back(d);
    }
    WilcoxonResult r;
    r.n_used = static_cast<int>(diffs.size());
    if (diffs.empty()) {
        r.no_difference = true;
        r.p_value = 1.0;
        return r;
    }

    // Doubled midranks keep every rank an integer.
    const std::size_t n = diffs.size();
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), 0);
    std::sort(order.begin(), order.end(), [&](std::size_t i, std::size_t j) { return std::fabs(diffs[i]) < std::fabs(diffs[j]); });
    std::vector<long> rank2(n);
    for (std::size_t i = 0; i < n;) {
        std::size_t j = i;
        while (j + 1 < n && std::fabs(diffs[order[j + 1]]) == std::fabs(diffs[order[i]])) ++j;
        const long r2 = static_cast<long>(i + 1 + j + 1);
        for (std::size_t k = i; k <= j; ++k) rank2[order[k]] = r2;
        i = j + 1;
    }
    long observed2 = 0, total2 = 0;
    for (std::size_t i = 0; i < n; ++i) {
        total2 += rank2[i];
        if (diffs[i] > 0) observed2 += rank2[i];
    }
    r.statistic = observed2 / 2.0;

    constexpr std::size_t kExactLimit = 50;
    if (n <= kExactLimit) {
        // Distribution of the doubled positive-rank sum over all 2^n sign patterns.
        std::vector<double> count(static_cast<std::size_t>(total2) + 1, 0.0);
        count[0] = 1.0;
        long reach = 0;
        for (std::size_t i = 0; i < n; ++i) {
            for (long s = reach; s >= 0; --s) {
                if (count[s] != 0.0) count[s + rank2[i]] += count[s];
            }
            reach += rank2[i];
        }
        const double patterns = std::ldexp(1.0, static_cast<int>(n));
        double upper = 0.0, lower = 0.0, extreme = 0.0;
        const long mean2x2 = total2;  // 2 * (doubled mean) = total2, compare |2s - total2|
        const long dev = std::labs(2 * observed2 - mean2x2);
        for (long s = 0; s <= total2; ++s) {
            if (count[s] == 0.0) continue;
            if (s >= observed2) upper += count[s];
            if (s <= observed2) lower += count[s];
            if (std::labs(2 * s - mean2x2) >= dev) extreme += count[s];
        }
        switch (alternative) {
            case Alternative::greater: r.p_value = upper / patterns; break;
            case Alternative::less: r.p_value = lower / patterns; break;
            case Alternative::two_sided: r.p_value = std::min(1.0, extreme / patterns); break;
        }
        r.exact = true;
        return r;
    }

    // Normal approximation with tie correction and continuity correction.
    r.exact = false;
    const double nn = static_cast<double>(n);
    const double mean = nn * (nn + 1) / 4.0;
    double var = nn * (nn + 1) * (2 * nn + 1) / 24.0;
    std::vector<long> sorted(rank2);
    std::sort(sorted.begin(), sorted.end());
    for (std::size_t i = 0; i < n;) {
        std::size_t j = i;
        while (j + 1 < n && sorted[j + 1] == sorted[i]) ++j;
        const double t = static_cast<double>(j - i + 1);
        var -= (t * t * t - t) / 48.0;
        i = j + 1;
    }
    const double sd = std::sqrt(var);
    auto upper_tail = [](double z) { return 0.5 * std::erfc(z / std::sqrt(2.0)); };
    switch (alternative) {
        case Alternative::greater: r.p_value = upper_tail((r.statistic - mean - 0.5) / sd); break;
        case Alternative::less: r.p_value = 1.0 - upper_tail((r.statistic - mean + 0.5) / sd); break;
        case Alternative::two_sided:
            r.p_value = std::min(1.0, 2.0 * upper_tail((std::fabs(r.statistic - mean) - 0.5) / sd));
            break;
    }
    return r;
}

}  // namespace protoverse
