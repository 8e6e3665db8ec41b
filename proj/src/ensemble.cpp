#include "histovit/ensemble.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>

#include "histovit/distill.hpp"
#include "histovit/error.hpp"

namespace histovit {

namespace {

constexpr double kSumTolerance = 1e-9;
constexpr double kTieTolerance = 1e-12;

std::string format_double(double v) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    return buf;
}

}  // namespace

std::size_t ProbVector::argmax() const {
    std::size_t best = 0;
    for (std::size_t i = 1; i < probs.size(); ++i) {
        if (probs[i] > probs[best]) best = i;
    }
    return best;
}

void ProbVector::validate(ErrorCategory cat) const {
    if (probs.empty()) throw Error(cat, "empty probability vector");
    double total = 0.0;
    for (double p : probs) {
        if (!std::isfinite(p) || p < 0.0)
            throw Error(cat, "probability entry " + format_double(p) + " is invalid");
        total += p;
    }
    if (std::fabs(total - 1.0) > kSumTolerance)
        throw Error(cat, "probabilities sum to " + format_double(total) + ", not 1");
    if (!class_labels.empty() && class_labels.size() != probs.size())
        throw Error(cat, "label list does not match probability count");
}

std::vector<std::string> default_class_labels(std::size_t num_classes) {
    // The BreakHis taxonomy when the class count matches, generic otherwise.
    static const std::vector<std::string> kSubclasses{"A",  "F",  "TA", "PT",
                                                      "DC", "LC", "MC", "PC"};
    if (num_classes == kSubclasses.size()) return kSubclasses;
    std::vector<std::string> out;
    out.reserve(num_classes);
    for (std::size_t i = 0; i < num_classes; ++i) out.push_back("class" + std::to_string(i));
    return out;
}

EnsemblePrediction soft_vote(std::span<const ProbVector> members) {
    if (members.empty())
        throw Error(ErrorCategory::arity, "soft_vote needs at least one classifier");
    const std::size_t c = members.front().num_classes();
    for (const ProbVector& m : members) {
        m.validate(ErrorCategory::input);
        if (m.num_classes() != c || m.class_labels != members.front().class_labels)
            throw Error(ErrorCategory::alignment,
                        "ensemble members disagree on the class label ordering");
    }
    EnsemblePrediction out;
    out.num_classifiers = members.size();
    out.averaged_probs.assign(c, 0.0);
    out.member_probs.reserve(members.size());
    for (const ProbVector& m : members) out.member_probs.push_back(m.probs);
    // Each class column is summed in sorted order so the average is exactly
    // invariant under member permutation.
    const double inv_n = 1.0 / static_cast<double>(members.size());
    std::vector<double> column(members.size());
    for (std::size_t i = 0; i < c; ++i) {
        for (std::size_t j = 0; j < members.size(); ++j) column[j] = members[j].probs[i];
        std::sort(column.begin(), column.end());
        double total = 0.0;
        for (double v : column) total += v;
        out.averaged_probs[i] = total * inv_n;
    }

    // Smallest index within tie tolerance of the maximum wins, so a
    // rounding-dust difference between genuinely tied averages cannot flip
    // the prediction.
    double mx = out.averaged_probs[0];
    for (double p : out.averaged_probs) mx = std::max(mx, p);
    std::size_t winners = 0;
    for (std::size_t i = 0; i < c; ++i) {
        if (mx - out.averaged_probs[i] <= kTieTolerance) {
            if (winners == 0) out.predicted_index = i;
            ++winners;
        }
    }
    out.tie_broken = winners >= 2;
    return out;
}

ProbVector model_probs(const LoadedModel& model, const Tensor& image) {
    const TransformerConfig& cfg = model.weights.config;
    ForwardResult result = forward(image, cfg, model.weights);
    if (cfg.use_distillation_token) {
        return deit_inference_probs(result.logits, result.dist_logits);
    }
    Tensor probs = softmax_rows(result.logits);
    ProbVector out;
    out.probs.assign(probs.values().begin(), probs.values().end());
    out.class_labels = default_class_labels(cfg.num_classes);
    return out;
}

EnsemblePrediction ensemble_predict(const Tensor& image, std::span<const LoadedModel> models) {
    if (models.empty())
        throw Error(ErrorCategory::arity, "ensemble_predict needs at least one model");
    std::vector<ProbVector> members;
    members.reserve(models.size());
    for (const LoadedModel& m : models) members.push_back(model_probs(m, image));
    return soft_vote(members);
}

void write_prob_file(const std::filesystem::path& path, std::span<const ProbRecord> records) {
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw Error(ErrorCategory::io, "cannot open " + path.string() + " for writing");
    for (const ProbRecord& r : records) {
        out << r.sample_id << "," << r.model_id;
        for (double p : r.probs) out << "," << format_double(p);
        out << "\n";
    }
    if (!out) throw Error(ErrorCategory::io, "write failed for " + path.string());
}

std::vector<ProbRecord> read_prob_file(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw Error(ErrorCategory::io, "cannot open " + path.string());
    std::vector<ProbRecord> out;
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.empty()) continue;
        std::istringstream ls(line);
        std::string field;
        ProbRecord rec;
        if (!std::getline(ls, rec.sample_id, ',') || !std::getline(ls, rec.model_id, ','))
            throw Error(ErrorCategory::parse,
                        path.string() + ":" + std::to_string(line_no) + ": malformed record");
        while (std::getline(ls, field, ',')) {
            try {
                rec.probs.push_back(std::stod(field));
            } catch (const std::exception&) {
                throw Error(ErrorCategory::parse, path.string() + ":" + std::to_string(line_no) +
                                                      ": bad probability '" + field + "'");
            }
        }
        if (rec.probs.empty())
            throw Error(ErrorCategory::parse,
                        path.string() + ":" + std::to_string(line_no) + ": no probabilities");
        out.push_back(std::move(rec));
    }
    return out;
}

}  // namespace histovit
