#pragma once

#include "histovit/ensemble.hpp"
#include "histovit/tensor.hpp"

namespace histovit {

// Hard or soft distillation objective. Hard supervises the distillation head
// with the teacher's argmax; soft matches temperature-scaled distributions.
struct DistillationLossConfig {
    enum class Mode { hard, soft };
    Mode mode = Mode::hard;
    double lambda = 0.5;      // weight of the distillation term
    double temperature = 3.0;  // soft mode only

    void validate() const;
};

// Prediction source for distillation. The true label is passed alongside the
// image so trivial teachers (label echo) fit the same interface; model-backed
// teachers ignore it. Implementations must be safe for concurrent reads.
class TeacherOracle {
  public:
    virtual ~TeacherOracle() = default;
    virtual ProbVector predict(const Tensor& image, int true_label) const = 0;
};

// Returns a one-hot distribution on the true label. Unit-test stub.
class LabelEchoTeacher : public TeacherOracle {
  public:
    explicit LabelEchoTeacher(std::size_t num_classes) : num_classes_(num_classes) {}
    ProbVector predict(const Tensor& image, int true_label) const override;

  private:
    std::size_t num_classes_;
};

// Wraps a trained model (typically a ViT checkpoint).
class ModelTeacher : public TeacherOracle {
  public:
    explicit ModelTeacher(ModelWeights weights, std::string id = "teacher");
    ProbVector predict(const Tensor& image, int true_label) const override;

  private:
    LoadedModel model_;
};

// (1-lambda) * CE(cls, label) + lambda * distillation term. Hard mode uses
// CE(dist, argmax teacher); soft mode uses tau^2 * KL(teacher_tau || student_tau).
Tensor distillation_loss(const Tensor& cls_logits, const Tensor& dist_logits, int true_label,
                         const ProbVector& teacher_probs, const DistillationLossConfig& cfg,
                         Tape* tape = nullptr);

// Inference-time fusion of the two DeiT heads: elementwise average of the two
// softmax distributions.
ProbVector deit_inference_probs(const Tensor& cls_logits, const Tensor& dist_logits);

}  // namespace histovit
