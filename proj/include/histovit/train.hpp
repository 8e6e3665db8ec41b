#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include "histovit/dataset.hpp"
#include "histovit/distill.hpp"
#include "histovit/transformer.hpp"

namespace histovit {

struct TrainConfig {
    double learning_rate = 1e-4;
    double weight_decay = 0.001;
    std::size_t batch_size = 16;
    std::size_t epochs = 15;
    std::uint64_t seed = 0;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    bool freeze_backbone = false;
    std::optional<DistillationLossConfig> distillation;

    void validate() const;
};

// Key=value text config shared with the CLI.
TrainConfig load_train_config(const std::filesystem::path& path);
void save_train_config(const std::filesystem::path& path, const TrainConfig& cfg);

struct TrainRun {
    std::vector<double> train_loss;      // per epoch
    std::vector<double> train_accuracy;  // per epoch
    std::vector<double> test_accuracy;   // per epoch
    std::size_t optimizer_steps = 0;
    std::string checkpoint_path;
    double wall_seconds = 0.0;
    std::uint64_t seed = 0;
    std::size_t epochs = 0;
};

// Adam with decoupled weight decay over a fixed parameter list. Gradients are
// read from each tensor's grad buffer.
class AdamW {
  public:
    AdamW(std::vector<Tensor> params, double learning_rate, double weight_decay, double beta1,
          double beta2, double eps);
    explicit AdamW(std::vector<Tensor> params, const TrainConfig& cfg)
        : AdamW(std::move(params), cfg.learning_rate, cfg.weight_decay, cfg.beta1, cfg.beta2,
                cfg.eps) {}

    void step();
    void zero_grad();
    std::size_t steps_taken() const { return t_; }

  private:
    std::vector<Tensor> params_;
    std::vector<std::vector<double>> m_, v_;
    double lr_, wd_, beta1_, beta2_, eps_;
    std::size_t t_ = 0;
};

// One tensor-sized update, exposed for direct testing of the optimizer rule.
void adamw_apply(std::span<double> param, std::span<const double> grad, std::span<double> m,
                 std::span<double> v, std::size_t step, double lr, double weight_decay,
                 double beta1, double beta2, double eps);

// Maps a sample to its input tensor. Tests inject tensors directly; the CLI
// uses disk_image_loader. The trainer calls it once per unique sample.
using ImageLoader = std::function<Tensor(const SampleRecord&)>;
ImageLoader disk_image_loader(const std::filesystem::path& manifest_dir, std::size_t image_size);

// Full fine-tuning loop: seeded shuffling, mini-batches (last partial batch
// included), AdamW updates, per-epoch train/test metrics, checkpoint at the
// end. DeiT weights train against the teacher's distillation objective; with
// no teacher both heads are supervised by the true label.
TrainRun train(ModelWeights& weights, const DatasetManifest& manifest, const SplitPlan& split,
               const TrainConfig& cfg, const ImageLoader& loader,
               const TeacherOracle* teacher = nullptr,
               const std::filesystem::path& checkpoint_path = {},
               std::ostream* metrics_log = nullptr);

// Loads a checkpoint, swaps the prediction head(s) for new_num_classes, then
// trains. Zero epochs returns the re-headed weights without training.
struct FineTuneResult {
    ModelWeights weights;
    TrainRun run;
};
FineTuneResult fine_tune(const std::filesystem::path& checkpoint, std::size_t new_num_classes,
                         const DatasetManifest& manifest, const SplitPlan& split,
                         const TrainConfig& cfg, const ImageLoader& loader,
                         const TeacherOracle* teacher = nullptr,
                         const std::filesystem::path& checkpoint_out = {},
                         std::ostream* metrics_log = nullptr);

// Label used for training/evaluation: the subclass index.
int class_index_of(const SampleRecord& record);

// Accuracy of a weights/loader pair over the given sample ids.
double evaluate_accuracy(const ModelWeights& weights, const DatasetManifest& manifest,
                         const std::vector<std::string>& ids, const ImageLoader& loader);

}  // namespace histovit
