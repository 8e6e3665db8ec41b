#include "histovit/distill.hpp"

#include <cmath>
#include <limits>

#include "histovit/error.hpp"

namespace histovit {

namespace {

// Accepts [C] or [1 x C] logits; returns the class count.
std::size_t logit_width(const Tensor& logits, const char* who) {
    if (!logits.defined())
        throw Error(ErrorCategory::input, std::string(who) + ": logits missing");
    if (logits.rank() == 1) return logits.dim(0);
    if (logits.rank() == 2 && logits.dim(0) == 1) return logits.dim(1);
    throw Error(ErrorCategory::shape, std::string(who) + ": logits must be a single row");
}

std::vector<double> stable_softmax(std::span<const double> z) {
    std::vector<double> p(z.size());
    double mx = z[0];
    for (double v : z) mx = std::max(mx, v);
    double denom = 0.0;
    for (std::size_t i = 0; i < z.size(); ++i) {
        p[i] = std::exp(z[i] - mx);
        denom += p[i];
    }
    for (double& v : p) v /= denom;
    return p;
}

}  // namespace

void DistillationLossConfig::validate() const {
    if (lambda < 0.0 || lambda > 1.0)
        throw Error(ErrorCategory::config, "distillation lambda must lie in [0, 1]");
    if (temperature <= 0.0)
        throw Error(ErrorCategory::config, "distillation temperature must be positive");
}

ProbVector LabelEchoTeacher::predict(const Tensor& /*image*/, int true_label) const {
    if (true_label < 0 || static_cast<std::size_t>(true_label) >= num_classes_)
        throw Error(ErrorCategory::label, "label " + std::to_string(true_label) +
                                              " outside [0, " + std::to_string(num_classes_) + ")");
    ProbVector out;
    out.probs.assign(num_classes_, 0.0);
    out.probs[static_cast<std::size_t>(true_label)] = 1.0;
    out.class_labels = default_class_labels(num_classes_);
    return out;
}

ModelTeacher::ModelTeacher(ModelWeights weights, std::string id)
    : model_{std::move(id), std::move(weights)} {}

ProbVector ModelTeacher::predict(const Tensor& image, int /*true_label*/) const {
    return model_probs(model_, image);
}

Tensor distillation_loss(const Tensor& cls_logits, const Tensor& dist_logits, int true_label,
                         const ProbVector& teacher_probs, const DistillationLossConfig& cfg,
                         Tape* tape) {
    cfg.validate();
    const std::size_t c = logit_width(cls_logits, "distillation_loss");
    if (logit_width(dist_logits, "distillation_loss") != c)
        throw Error(ErrorCategory::shape, "class and distillation logits disagree in width");
    if (true_label < 0 || static_cast<std::size_t>(true_label) >= c)
        throw Error(ErrorCategory::label,
                    "label " + std::to_string(true_label) + " outside [0, " + std::to_string(c) + ")");
    if (teacher_probs.probs.size() != c)
        throw Error(ErrorCategory::teacher, "teacher distribution has " +
                                                std::to_string(teacher_probs.probs.size()) +
                                                " classes, expected " + std::to_string(c));
    teacher_probs.validate(ErrorCategory::teacher);

    Tensor cls_row = cls_logits.rank() == 1 ? reshape(cls_logits, {1, c}, tape) : cls_logits;
    Tensor dist_row = dist_logits.rank() == 1 ? reshape(dist_logits, {1, c}, tape) : dist_logits;

    const int targets[1] = {true_label};
    Tensor ce_cls = cross_entropy(cls_row, targets, tape);
    if (cfg.lambda == 0.0) return ce_cls;

    Tensor dist_term;
    if (cfg.mode == DistillationLossConfig::Mode::hard) {
        // Teacher argmax, ties to the lowest index.
        std::size_t t = 0;
        for (std::size_t i = 1; i < c; ++i) {
            if (teacher_probs.probs[i] > teacher_probs.probs[t]) t = i;
        }
        const int hard_target[1] = {static_cast<int>(t)};
        dist_term = cross_entropy(dist_row, hard_target, tape);
    } else {
        // tau^2 * KL(q || softmax(z/tau)) with q the temperature-scaled
        // teacher. Only the student logits carry gradient; the teacher
        // entropy enters as a constant.
        const double tau = cfg.temperature;
        std::vector<double> log_teacher(c);
        for (std::size_t i = 0; i < c; ++i) {
            log_teacher[i] = teacher_probs.probs[i] > 0.0
                                 ? std::log(teacher_probs.probs[i]) / tau
                                 : -std::numeric_limits<double>::infinity();
        }
        // q = softmax(log p / tau), computed in plain doubles.
        double mx = log_teacher[0];
        for (double v : log_teacher) mx = std::max(mx, v);
        std::vector<double> q(c);
        double denom = 0.0;
        for (std::size_t i = 0; i < c; ++i) {
            q[i] = std::isfinite(log_teacher[i]) ? std::exp(log_teacher[i] - mx) : 0.0;
            denom += q[i];
        }
        double entropy_term = 0.0;  // sum q log q
        std::vector<double> neg_q(c);
        for (std::size_t i = 0; i < c; ++i) {
            q[i] /= denom;
            neg_q[i] = -q[i];
            if (q[i] > 0.0) entropy_term += q[i] * std::log(q[i]);
        }
        Tensor student_log = log_softmax_rows(scale(dist_row, 1.0 / tau, tape), tape);
        Tensor kl = add_scalar(weighted_sum(student_log, neg_q, tape), entropy_term, tape);
        dist_term = scale(kl, tau * tau, tape);
    }
    if (cfg.lambda == 1.0) return dist_term;
    return add(scale(ce_cls, 1.0 - cfg.lambda, tape), scale(dist_term, cfg.lambda, tape), tape);
}

ProbVector deit_inference_probs(const Tensor& cls_logits, const Tensor& dist_logits) {
    const std::size_t c = logit_width(cls_logits, "deit_inference_probs");
    if (logit_width(dist_logits, "deit_inference_probs") != c)
        throw Error(ErrorCategory::shape, "class and distillation logits disagree in width");
    const std::vector<double> pc = stable_softmax(cls_logits.values());
    const std::vector<double> pd = stable_softmax(dist_logits.values());
    ProbVector out;
    out.probs.resize(c);
    for (std::size_t i = 0; i < c; ++i) out.probs[i] = 0.5 * (pc[i] + pd[i]);
    out.class_labels = default_class_labels(c);
    return out;
}

}  // namespace histovit
