#pragma once

#include <ostream>
#include <span>
#include <string>
#include <vector>

#include "histovit/dataset.hpp"
#include "histovit/image.hpp"
#include "histovit/transformer.hpp"

namespace histovit {

// Rows are true classes, columns predicted classes.
struct ConfusionMatrix {
    std::size_t num_classes = 0;
    std::vector<std::size_t> counts;
    std::vector<std::string> labels;

    std::size_t at(std::size_t truth, std::size_t predicted) const {
        return counts[truth * num_classes + predicted];
    }
    std::size_t total() const;
    std::size_t trace() const;
};

ConfusionMatrix confusion(std::span<const int> truth, std::span<const int> predicted,
                          std::size_t num_classes, std::vector<std::string> labels = {});

struct ClassMetrics {
    double accuracy = 0.0;  // one-vs-rest accuracy (TP+TN)/total
    double precision = 0.0;
    double recall = 0.0;
    double f1 = 0.0;
    bool precision_zero_div = false;
    bool recall_zero_div = false;
    bool f1_zero_div = false;
};

struct MetricsTable {
    std::vector<ClassMetrics> per_class;
    double macro_precision = 0.0;
    double macro_recall = 0.0;
    double macro_f1 = 0.0;
    double overall_accuracy = 0.0;  // trace/total; equals micro P/R/F1 here
};

// Division by zero yields 0 with the matching flag set.
MetricsTable per_class_metrics(const ConfusionMatrix& cm);

struct RocPoint {
    double fpr = 0.0;
    double tpr = 0.0;
};

struct ClassRoc {
    bool defined = false;  // false when the class has no positives or no negatives
    std::vector<RocPoint> points;
    double auc = 0.0;
};

struct RocCurve {
    std::vector<ClassRoc> per_class;
    bool macro_defined = false;
    double macro_auc = 0.0;  // unweighted mean over defined classes
};

// One-vs-rest curves with thresholds swept over the unique scores; AUC by the
// trapezoid rule. scores[sample][class].
RocCurve roc_auc(std::span<const int> truth, const std::vector<std::vector<double>>& scores,
                 std::size_t num_classes);

// Rank-statistic AUC (midranks, ties half-credited) for one-vs-rest of
// positive_class; an algebraically independent route used to cross-check the
// trapezoid AUC.
double rank_auc(std::span<const int> truth, int positive_class, std::span<const double> score);

struct MisclassAudit {
    struct Entry {
        std::string sample_id;
        Subclass truth;
        Subclass predicted;
    };
    std::vector<Entry> entries;
    std::size_t malignant_as_benign = 0;
    std::size_t benign_as_malignant = 0;
};

// Lists every subclass-level error and counts the cross-main-class cases.
// predictions are subclass indices aligned with records.
MisclassAudit malignancy_audit(std::span<const SampleRecord> records,
                               std::span<const int> predictions);

enum class AttentionMethod { last_layer, rollout };

struct AttentionMap {
    std::size_t grid = 0;
    std::vector<double> raw;   // class-token attention per patch, pre-normalization
    std::vector<double> heat;  // min-max normalized to [0, 1]
    AttentionMethod method = AttentionMethod::last_layer;
};

// last_layer: head-averaged class-token row of the final block. rollout:
// identity-mixed head averages multiplied across blocks.
AttentionMap attention_map_from_record(const AttentionRecord& record,
                                       const TransformerConfig& cfg, AttentionMethod method);
AttentionMap attention_map(const ModelWeights& weights, const Tensor& image,
                           AttentionMethod method);

// Heat bilinearly upsampled onto the input image.
Image render_attention_overlay(const Tensor& image, const AttentionMap& map);

struct EvalReport {
    ConfusionMatrix cm;
    MetricsTable metrics;
    RocCurve roc;
    MisclassAudit audit;
    std::vector<std::string> notes;
};

EvalReport evaluate(std::span<const SampleRecord> records, std::span<const int> predictions,
                    const std::vector<std::vector<double>>& scores, std::size_t num_classes);

// Deterministic structured-text serialization.
void write_report(std::ostream& out, const EvalReport& report);

}  // namespace histovit
