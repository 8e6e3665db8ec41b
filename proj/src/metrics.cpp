#include "histovit/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <map>
#include <numeric>

#include "histovit/ensemble.hpp"
#include "histovit/error.hpp"

namespace histovit {

namespace {

std::string fmt(double v) {
    char buf[40];
    std::snprintf(buf, sizeof(buf), "%.9f", v);
    return buf;
}

}  // namespace

std::size_t ConfusionMatrix::total() const {
    return std::accumulate(counts.begin(), counts.end(), std::size_t{0});
}

std::size_t ConfusionMatrix::trace() const {
    std::size_t t = 0;
    for (std::size_t i = 0; i < num_classes; ++i) t += at(i, i);
    return t;
}

ConfusionMatrix confusion(std::span<const int> truth, std::span<const int> predicted,
                          std::size_t num_classes, std::vector<std::string> labels) {
    if (truth.size() != predicted.size())
        throw Error(ErrorCategory::input, "confusion: " + std::to_string(truth.size()) +
                                              " truths vs " + std::to_string(predicted.size()) +
                                              " predictions");
    ConfusionMatrix cm;
    cm.num_classes = num_classes;
    cm.counts.assign(num_classes * num_classes, 0);
    cm.labels = labels.empty() ? default_class_labels(num_classes) : std::move(labels);
    for (std::size_t i = 0; i < truth.size(); ++i) {
        const int t = truth[i], p = predicted[i];
        if (t < 0 || static_cast<std::size_t>(t) >= num_classes || p < 0 ||
            static_cast<std::size_t>(p) >= num_classes)
            throw Error(ErrorCategory::input, "confusion: label outside [0, " +
                                                  std::to_string(num_classes) + ")");
        cm.counts[static_cast<std::size_t>(t) * num_classes + static_cast<std::size_t>(p)] += 1;
    }
    return cm;
}

MetricsTable per_class_metrics(const ConfusionMatrix& cm) {
    if (cm.num_classes == 0 || cm.total() == 0)
        throw Error(ErrorCategory::input, "per_class_metrics on an empty confusion matrix");
    const double total = static_cast<double>(cm.total());
    MetricsTable table;
    table.per_class.resize(cm.num_classes);
    for (std::size_t k = 0; k < cm.num_classes; ++k) {
        std::size_t tp = cm.at(k, k), fp = 0, fn = 0;
        for (std::size_t i = 0; i < cm.num_classes; ++i) {
            if (i == k) continue;
            fp += cm.at(i, k);
            fn += cm.at(k, i);
        }
        const std::size_t tn = cm.total() - tp - fp - fn;
        ClassMetrics& m = table.per_class[k];
        m.accuracy = static_cast<double>(tp + tn) / total;
        if (tp + fp == 0) {
            m.precision = 0.0;
            m.precision_zero_div = true;
        } else {
            m.precision = static_cast<double>(tp) / static_cast<double>(tp + fp);
        }
        if (tp + fn == 0) {
            m.recall = 0.0;
            m.recall_zero_div = true;
        } else {
            m.recall = static_cast<double>(tp) / static_cast<double>(tp + fn);
        }
        if (m.precision + m.recall == 0.0) {
            m.f1 = 0.0;
            m.f1_zero_div = true;
        } else {
            m.f1 = 2.0 * m.precision * m.recall / (m.precision + m.recall);
        }
        table.macro_precision += m.precision;
        table.macro_recall += m.recall;
        table.macro_f1 += m.f1;
    }
    const double c = static_cast<double>(cm.num_classes);
    table.macro_precision /= c;
    table.macro_recall /= c;
    table.macro_f1 /= c;
    table.overall_accuracy = static_cast<double>(cm.trace()) / total;
    return table;
}

RocCurve roc_auc(std::span<const int> truth, const std::vector<std::vector<double>>& scores,
                 std::size_t num_classes) {
    if (truth.size() != scores.size())
        throw Error(ErrorCategory::input, "roc_auc: truth/score count mismatch");
    for (const auto& row : scores) {
        if (row.size() != num_classes)
            throw Error(ErrorCategory::input, "roc_auc: score row width mismatch");
    }
    RocCurve curve;
    curve.per_class.resize(num_classes);
    double auc_sum = 0.0;
    std::size_t defined = 0;
    for (std::size_t k = 0; k < num_classes; ++k) {
        std::size_t positives = 0;
        for (int t : truth) {
            if (static_cast<std::size_t>(t) == k) ++positives;
        }
        const std::size_t negatives = truth.size() - positives;
        ClassRoc& roc = curve.per_class[k];
        if (positives == 0 || negatives == 0) continue;
        roc.defined = true;

        // Sweep thresholds over the unique scores, highest first. Samples
        // sharing a score enter together, which gives ties half credit under
        // the trapezoid rule.
        std::vector<std::size_t> order(truth.size());
        std::iota(order.begin(), order.end(), 0);
        std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
            return scores[a][k] > scores[b][k];
        });
        roc.points.push_back({0.0, 0.0});
        std::size_t tp = 0, fp = 0;
        std::size_t i = 0;
        double auc = 0.0;
        double prev_fpr = 0.0, prev_tpr = 0.0;
        while (i < order.size()) {
            const double threshold = scores[order[i]][k];
            while (i < order.size() && scores[order[i]][k] == threshold) {
                if (static_cast<std::size_t>(truth[order[i]]) == k) ++tp;
                else ++fp;
                ++i;
            }
            const double tpr = static_cast<double>(tp) / static_cast<double>(positives);
            const double fpr = static_cast<double>(fp) / static_cast<double>(negatives);
            auc += (fpr - prev_fpr) * (tpr + prev_tpr) * 0.5;
            roc.points.push_back({fpr, tpr});
            prev_fpr = fpr;
            prev_tpr = tpr;
        }
        roc.auc = auc;
        auc_sum += auc;
        ++defined;
    }
    if (defined > 0) {
        curve.macro_defined = true;
        curve.macro_auc = auc_sum / static_cast<double>(defined);
    }
    return curve;
}

double rank_auc(std::span<const int> truth, int positive_class, std::span<const double> score) {
    if (truth.size() != score.size())
        throw Error(ErrorCategory::input, "rank_auc: size mismatch");
    std::size_t p = 0;
    for (int t : truth) p += t == positive_class ? 1 : 0;
    const std::size_t n = truth.size() - p;
    if (p == 0 || n == 0) throw Error(ErrorCategory::input, "rank_auc: degenerate class");

    std::vector<std::size_t> order(score.size());
    std::iota(order.begin(), order.end(), 0);
    std::sort(order.begin(), order.end(),
              [&](std::size_t a, std::size_t b) { return score[a] < score[b]; });
    // Midranks over tied groups.
    double rank_sum_pos = 0.0;
    std::size_t i = 0;
    while (i < order.size()) {
        std::size_t j = i;
        while (j < order.size() && score[order[j]] == score[order[i]]) ++j;
        const double midrank = 0.5 * static_cast<double>(i + 1 + j);  // average of i+1 .. j
        for (std::size_t t = i; t < j; ++t) {
            if (truth[order[t]] == positive_class) rank_sum_pos += midrank;
        }
        i = j;
    }
    const double pd = static_cast<double>(p), nd = static_cast<double>(n);
    return (rank_sum_pos - pd * (pd + 1.0) / 2.0) / (pd * nd);
}

MisclassAudit malignancy_audit(std::span<const SampleRecord> records,
                               std::span<const int> predictions) {
    if (records.size() != predictions.size())
        throw Error(ErrorCategory::input, "malignancy_audit: " + std::to_string(records.size()) +
                                              " records vs " + std::to_string(predictions.size()) +
                                              " predictions");
    MisclassAudit audit;
    for (std::size_t i = 0; i < records.size(); ++i) {
        const int p = predictions[i];
        if (p < 0 || static_cast<std::size_t>(p) >= kAllSubclasses.size())
            throw Error(ErrorCategory::input, "malignancy_audit: prediction outside taxonomy");
        const Subclass predicted = kAllSubclasses[static_cast<std::size_t>(p)];
        const Subclass truth = records[i].subclass;
        if (predicted == truth) continue;
        audit.entries.push_back({records[i].sample_id, truth, predicted});
        if (main_class_of(truth) == MainClass::malignant &&
            main_class_of(predicted) == MainClass::benign)
            ++audit.malignant_as_benign;
        if (main_class_of(truth) == MainClass::benign &&
            main_class_of(predicted) == MainClass::malignant)
            ++audit.benign_as_malignant;
    }
    return audit;
}

AttentionMap attention_map_from_record(const AttentionRecord& record,
                                       const TransformerConfig& cfg, AttentionMethod method) {
    if (record.empty())
        throw Error(ErrorCategory::state, "attention map requested but no attention was captured");
    const std::size_t t = record.tokens;
    const std::size_t skip = cfg.num_special_tokens();
    const std::size_t patches = t - skip;
    if (t != cfg.seq_len())
        throw Error(ErrorCategory::state, "attention record does not match the config");

    auto head_average = [&](const std::vector<std::vector<double>>& heads) {
        std::vector<double> avg(t * t, 0.0);
        for (const auto& h : heads) {
            for (std::size_t i = 0; i < t * t; ++i) avg[i] += h[i];
        }
        const double inv = 1.0 / static_cast<double>(heads.size());
        for (double& v : avg) v *= inv;
        return avg;
    };

    std::vector<double> class_row(t, 0.0);
    if (method == AttentionMethod::last_layer) {
        const std::vector<double> avg = head_average(record.blocks.back());
        std::copy_n(avg.begin(), t, class_row.begin());
    } else {
        // Rollout: mix each head-averaged block with identity, renormalize
        // rows, and multiply across blocks.
        std::vector<double> rolled(t * t, 0.0);
        for (std::size_t i = 0; i < t; ++i) rolled[i * t + i] = 1.0;
        std::vector<double> mixed(t * t), next(t * t);
        for (const auto& heads : record.blocks) {
            const std::vector<double> avg = head_average(heads);
            for (std::size_t i = 0; i < t; ++i) {
                double row_sum = 0.0;
                for (std::size_t j = 0; j < t; ++j) {
                    const double v = 0.5 * avg[i * t + j] + (i == j ? 0.5 : 0.0);
                    mixed[i * t + j] = v;
                    row_sum += v;
                }
                for (std::size_t j = 0; j < t; ++j) mixed[i * t + j] /= row_sum;
            }
            // next = mixed * rolled
            for (std::size_t i = 0; i < t; ++i) {
                for (std::size_t j = 0; j < t; ++j) {
                    double acc = 0.0;
                    for (std::size_t l = 0; l < t; ++l) acc += mixed[i * t + l] * rolled[l * t + j];
                    next[i * t + j] = acc;
                }
            }
            std::swap(rolled, next);
        }
        std::copy_n(rolled.begin(), t, class_row.begin());
    }

    AttentionMap map;
    map.method = method;
    map.grid = cfg.patches_per_side();
    map.raw.assign(class_row.begin() + static_cast<std::ptrdiff_t>(skip), class_row.end());
    if (map.raw.size() != patches || patches != map.grid * map.grid)
        throw Error(ErrorCategory::state, "attention record patch count mismatch");
    double lo = map.raw[0], hi = map.raw[0];
    for (double v : map.raw) {
        lo = std::min(lo, v);
        hi = std::max(hi, v);
    }
    map.heat.resize(map.raw.size());
    if (hi - lo > 0.0) {
        for (std::size_t i = 0; i < map.raw.size(); ++i) map.heat[i] = (map.raw[i] - lo) / (hi - lo);
    }  // uniform attention flattens to all zeros
    return map;
}

AttentionMap attention_map(const ModelWeights& weights, const Tensor& image,
                           AttentionMethod method) {
    AttentionRecord record;
    forward(image, weights.config, weights, nullptr, &record);
    return attention_map_from_record(record, weights.config, method);
}

Image render_attention_overlay(const Tensor& image, const AttentionMap& map) {
    if (image.rank() != 3)
        throw Error(ErrorCategory::shape, "overlay expects an [H x W x C] image");
    const std::size_t s = image.dim(0);
    Tensor heat_grid = Tensor::zeros({map.grid, map.grid, 1});
    std::copy(map.heat.begin(), map.heat.end(), heat_grid.mutable_values().begin());
    Tensor heat = resize_bilinear(heat_grid, s);

    Tensor out = Tensor::zeros({s, s, std::size_t{3}});
    auto ov = out.mutable_values();
    auto iv = image.values();
    auto hv = heat.values();
    const std::size_t c = image.dim(2);
    for (std::size_t i = 0; i < s * s; ++i) {
        const double h = hv[i];
        const double r = iv[i * c + 0];
        const double g = c > 1 ? iv[i * c + 1] : r;
        const double b = c > 2 ? iv[i * c + 2] : r;
        ov[i * 3 + 0] = std::min(1.0, 0.5 * r + 0.5 * h);
        ov[i * 3 + 1] = std::min(1.0, 0.5 * g + 0.2 * h);
        ov[i * 3 + 2] = 0.5 * b;
    }
    return tensor_to_image(out);
}

EvalReport evaluate(std::span<const SampleRecord> records, std::span<const int> predictions,
                    const std::vector<std::vector<double>>& scores, std::size_t num_classes) {
    if (records.size() != predictions.size())
        throw Error(ErrorCategory::input, "evaluate: record/prediction count mismatch");
    std::vector<int> truth(records.size());
    for (std::size_t i = 0; i < records.size(); ++i)
        truth[i] = static_cast<int>(subclass_index(records[i].subclass));

    EvalReport report;
    report.cm = confusion(truth, predictions, num_classes);
    report.metrics = per_class_metrics(report.cm);
    if (!scores.empty()) report.roc = roc_auc(truth, scores, num_classes);
    if (num_classes == kAllSubclasses.size())
        report.audit = malignancy_audit(records, predictions);
    report.notes.push_back("aggregate precision/recall/f1 are macro averages");
    report.notes.push_back("per-class accuracy is one-vs-rest: (TP+TN)/total");
    report.notes.push_back("overall accuracy equals micro precision/recall for single-label data");
    return report;
}

void write_report(std::ostream& out, const EvalReport& report) {
    out << "histovit-report 1\n";
    out << "samples " << report.cm.total() << "\n";
    for (const std::string& note : report.notes) out << "note " << note << "\n";
    out << "overall_accuracy " << fmt(report.metrics.overall_accuracy) << "\n";
    out << "macro_precision " << fmt(report.metrics.macro_precision) << "\n";
    out << "macro_recall " << fmt(report.metrics.macro_recall) << "\n";
    out << "macro_f1 " << fmt(report.metrics.macro_f1) << "\n";
    if (report.roc.macro_defined) out << "macro_auc " << fmt(report.roc.macro_auc) << "\n";
    for (std::size_t k = 0; k < report.cm.num_classes; ++k) {
        const ClassMetrics& m = report.metrics.per_class[k];
        out << "class " << report.cm.labels[k] << " accuracy " << fmt(m.accuracy) << " precision "
            << fmt(m.precision) << (m.precision_zero_div ? " (zero-div)" : "") << " recall "
            << fmt(m.recall) << (m.recall_zero_div ? " (zero-div)" : "") << " f1 " << fmt(m.f1)
            << (m.f1_zero_div ? " (zero-div)" : "");
        if (k < report.roc.per_class.size()) {
            const ClassRoc& roc = report.roc.per_class[k];
            if (roc.defined) out << " auc " << fmt(roc.auc);
            else out << " auc absent";
        }
        out << "\n";
    }
    out << "confusion " << report.cm.num_classes << "\n";
    for (std::size_t i = 0; i < report.cm.num_classes; ++i) {
        for (std::size_t j = 0; j < report.cm.num_classes; ++j) {
            if (j) out << " ";
            out << report.cm.at(i, j);
        }
        out << "\n";
    }
    for (std::size_t k = 0; k < report.roc.per_class.size(); ++k) {
        const ClassRoc& roc = report.roc.per_class[k];
        if (!roc.defined) continue;
        out << "roc " << report.cm.labels[k];
        for (const RocPoint& pt : roc.points) out << " " << fmt(pt.fpr) << ":" << fmt(pt.tpr);
        out << "\n";
    }
    out << "audit malignant_as_benign " << report.audit.malignant_as_benign
        << " benign_as_malignant " << report.audit.benign_as_malignant << "\n";
    for (const auto& e : report.audit.entries) {
        out << "miss " << e.sample_id << " " << to_string(e.truth) << " " << to_string(e.predicted)
            << "\n";
    }
}

}  // namespace histovit
