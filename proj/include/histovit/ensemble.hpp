#pragma once

#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "histovit/error.hpp"
#include "histovit/transformer.hpp"

namespace histovit {

// Per-class probability distribution with its label ordering.
struct ProbVector {
    std::vector<double> probs;
    std::vector<std::string> class_labels;

    std::size_t num_classes() const { return probs.size(); }
    std::size_t argmax() const;
    // Entries >= 0 and summing to 1 within 1e-9; throws the given category.
    void validate(ErrorCategory cat = ErrorCategory::input) const;
};

std::vector<std::string> default_class_labels(std::size_t num_classes);

struct EnsemblePrediction {
    std::size_t predicted_index = 0;
    std::vector<double> averaged_probs;
    std::vector<std::vector<double>> member_probs;
    std::size_t num_classifiers = 0;
    bool tie_broken = false;
};

// Soft voting: average the member distributions and take the argmax. Ties go
// to the lowest class index and are flagged.
EnsemblePrediction soft_vote(std::span<const ProbVector> members);

// A trained model ready for inference.
struct LoadedModel {
    std::string id;
    ModelWeights weights;
};

// Probability inference for one model: softmax of the class logits, or the
// two-head softmax average for distillation-token models.
ProbVector model_probs(const LoadedModel& model, const Tensor& image);

EnsemblePrediction ensemble_predict(const Tensor& image, std::span<const LoadedModel> models);

// Probability interchange file: one line per record,
// `sample_id,model_id,p0,...,p{C-1}`. This is both the offline-evaluation
// input format and the hook for third-party model injection.
struct ProbRecord {
    std::string sample_id;
    std::string model_id;
    std::vector<double> probs;
};

void write_prob_file(const std::filesystem::path& path, std::span<const ProbRecord> records);
std::vector<ProbRecord> read_prob_file(const std::filesystem::path& path);

}  // namespace histovit
