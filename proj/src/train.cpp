#include "histovit/train.hpp"

#include <chrono>
#include <cmath>
#include <fstream>
#include <memory>
#include <sstream>
#include <unordered_map>

#include "histovit/checkpoint.hpp"
#include "histovit/error.hpp"
#include "histovit/image.hpp"
#include "histovit/kernels.hpp"
#include "histovit/rng.hpp"

namespace histovit {

void TrainConfig::validate() const {
    if (learning_rate < 0.0) throw Error(ErrorCategory::config, "learning rate must be >= 0");
    if (weight_decay < 0.0) throw Error(ErrorCategory::config, "weight decay must be >= 0");
    if (batch_size == 0) throw Error(ErrorCategory::config, "batch size must be positive");
    if (epochs == 0) throw Error(ErrorCategory::config, "epochs must be at least 1");
    if (beta1 < 0.0 || beta1 >= 1.0 || beta2 < 0.0 || beta2 >= 1.0)
        throw Error(ErrorCategory::config, "betas must lie in [0, 1)");
    if (eps <= 0.0) throw Error(ErrorCategory::config, "eps must be positive");
    if (distillation) distillation->validate();
}

TrainConfig load_train_config(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw Error(ErrorCategory::io, "cannot open " + path.string());
    TrainConfig cfg;
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.empty() || line[0] == '#') continue;
        const auto eq = line.find('=');
        if (eq == std::string::npos)
            throw Error(ErrorCategory::parse,
                        path.string() + ":" + std::to_string(line_no) + ": expected key=value");
        const std::string key = line.substr(0, eq);
        const std::string value = line.substr(eq + 1);
        try {
            if (key == "learning_rate") cfg.learning_rate = std::stod(value);
            else if (key == "weight_decay") cfg.weight_decay = std::stod(value);
            else if (key == "batch_size") cfg.batch_size = std::stoull(value);
            else if (key == "epochs") cfg.epochs = std::stoull(value);
            else if (key == "seed") cfg.seed = std::stoull(value);
            else if (key == "beta1") cfg.beta1 = std::stod(value);
            else if (key == "beta2") cfg.beta2 = std::stod(value);
            else if (key == "eps") cfg.eps = std::stod(value);
            else if (key == "freeze_backbone") cfg.freeze_backbone = value == "1";
            else if (key == "distill_mode") {
                if (!cfg.distillation) cfg.distillation.emplace();
                if (value == "hard") cfg.distillation->mode = DistillationLossConfig::Mode::hard;
                else if (value == "soft") cfg.distillation->mode = DistillationLossConfig::Mode::soft;
                else throw Error(ErrorCategory::parse, "distill_mode must be hard or soft");
            } else if (key == "distill_lambda") {
                if (!cfg.distillation) cfg.distillation.emplace();
                cfg.distillation->lambda = std::stod(value);
            } else if (key == "distill_temperature") {
                if (!cfg.distillation) cfg.distillation.emplace();
                cfg.distillation->temperature = std::stod(value);
            } else {
                throw Error(ErrorCategory::parse, path.string() + ":" + std::to_string(line_no) +
                                                      ": unknown key '" + key + "'");
            }
        } catch (const Error&) {
            throw;
        } catch (const std::exception&) {
            throw Error(ErrorCategory::parse, path.string() + ":" + std::to_string(line_no) +
                                                  ": bad value '" + value + "'");
        }
    }
    return cfg;
}

void save_train_config(const std::filesystem::path& path, const TrainConfig& cfg) {
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw Error(ErrorCategory::io, "cannot open " + path.string() + " for writing");
    out << "learning_rate=" << cfg.learning_rate << "\n";
    out << "weight_decay=" << cfg.weight_decay << "\n";
    out << "batch_size=" << cfg.batch_size << "\n";
    out << "epochs=" << cfg.epochs << "\n";
    out << "seed=" << cfg.seed << "\n";
    out << "beta1=" << cfg.beta1 << "\n";
    out << "beta2=" << cfg.beta2 << "\n";
    out << "eps=" << cfg.eps << "\n";
    out << "freeze_backbone=" << (cfg.freeze_backbone ? 1 : 0) << "\n";
    if (cfg.distillation) {
        out << "distill_mode="
            << (cfg.distillation->mode == DistillationLossConfig::Mode::hard ? "hard" : "soft")
            << "\n";
        out << "distill_lambda=" << cfg.distillation->lambda << "\n";
        out << "distill_temperature=" << cfg.distillation->temperature << "\n";
    }
    if (!out) throw Error(ErrorCategory::io, "write failed for " + path.string());
}

// ---------------------------------------------------------------------------
// AdamW

void adamw_apply(std::span<double> param, std::span<const double> grad, std::span<double> m,
                 std::span<double> v, std::size_t step, double lr, double weight_decay,
                 double beta1, double beta2, double eps) {
    if (param.size() != grad.size() || param.size() != m.size() || param.size() != v.size())
        throw Error(ErrorCategory::shape, "adamw_apply: buffer sizes disagree");
    if (step == 0) throw Error(ErrorCategory::state, "adamw_apply: step starts at 1");
    for (double g : grad) {
        if (!std::isfinite(g))
            throw Error(ErrorCategory::numeric, "adamw_apply: non-finite gradient");
    }
    const double t = static_cast<double>(step);
    const double inv_bc1 = 1.0 / (1.0 - std::pow(beta1, t));
    const double inv_bc2 = 1.0 / (1.0 - std::pow(beta2, t));
    kernels::active().adamw_update(param.data(), grad.data(), m.data(), v.data(), param.size(), lr,
                                   beta1, beta2, eps, weight_decay, inv_bc1, inv_bc2);
}

AdamW::AdamW(std::vector<Tensor> params, double learning_rate, double weight_decay, double beta1,
             double beta2, double eps)
    : params_(std::move(params)), lr_(learning_rate), wd_(weight_decay), beta1_(beta1),
      beta2_(beta2), eps_(eps) {
    m_.reserve(params_.size());
    v_.reserve(params_.size());
    for (const Tensor& p : params_) {
        m_.emplace_back(p.size(), 0.0);
        v_.emplace_back(p.size(), 0.0);
    }
}

void AdamW::step() {
    ++t_;
    for (std::size_t i = 0; i < params_.size(); ++i) {
        Tensor& p = params_[i];
        adamw_apply(p.mutable_values(), p.mutable_grad(), m_[i], v_[i], t_, lr_, wd_, beta1_,
                    beta2_, eps_);
    }
}

void AdamW::zero_grad() {
    for (Tensor& p : params_) p.zero_grad();
}

// ---------------------------------------------------------------------------
// Training loop

int class_index_of(const SampleRecord& record) {
    return static_cast<int>(subclass_index(record.subclass));
}

ImageLoader disk_image_loader(const std::filesystem::path& manifest_dir, std::size_t image_size) {
    return [manifest_dir, image_size](const SampleRecord& rec) {
        std::filesystem::path p(rec.path);
        if (p.is_relative()) p = manifest_dir / p;
        return load_image(p, image_size);
    };
}

namespace {

struct Sample {
    const SampleRecord* record;
    Tensor image;
    int label;
};

std::vector<Sample> gather(const DatasetManifest& manifest, const std::vector<std::string>& ids,
                           const ImageLoader& loader) {
    std::unordered_map<std::string, const SampleRecord*> by_id;
    for (const SampleRecord& r : manifest.records()) by_id.emplace(r.sample_id, &r);
    std::vector<Sample> out;
    out.reserve(ids.size());
    for (const std::string& id : ids) {
        auto it = by_id.find(id);
        if (it == by_id.end())
            throw Error(ErrorCategory::split, "split references unknown sample '" + id + "'");
        out.push_back({it->second, loader(*it->second), class_index_of(*it->second)});
    }
    return out;
}

std::size_t predict_index(const ModelWeights& weights, const Tensor& image) {
    return model_probs(LoadedModel{"", weights}, image).argmax();
}

}  // namespace

double evaluate_accuracy(const ModelWeights& weights, const DatasetManifest& manifest,
                         const std::vector<std::string>& ids, const ImageLoader& loader) {
    if (ids.empty()) return 0.0;
    const std::vector<Sample> samples = gather(manifest, ids, loader);
    std::size_t correct = 0;
    for (const Sample& s : samples) {
        if (predict_index(weights, s.image) == static_cast<std::size_t>(s.label)) ++correct;
    }
    return static_cast<double>(correct) / static_cast<double>(samples.size());
}

TrainRun train(ModelWeights& weights, const DatasetManifest& manifest, const SplitPlan& split,
               const TrainConfig& cfg, const ImageLoader& loader, const TeacherOracle* teacher,
               const std::filesystem::path& checkpoint_path, std::ostream* metrics_log) {
    cfg.validate();
    weights.config.validate();
    if (split.train_ids.empty()) throw Error(ErrorCategory::split, "empty training split");
    if (cfg.batch_size > split.train_ids.size())
        throw Error(ErrorCategory::config, "batch size exceeds the training set size");

    const auto start = std::chrono::steady_clock::now();
    const bool is_deit = weights.config.use_distillation_token;

    // With a distillation token but no teacher, both heads learn from the
    // true label (label echo); otherwise the dist head would stay at its
    // random initialization and poison the two-head inference average.
    std::unique_ptr<LabelEchoTeacher> echo;
    const TeacherOracle* effective_teacher = teacher;
    const DistillationLossConfig dist_cfg =
        cfg.distillation.value_or(DistillationLossConfig{});
    if (is_deit && !effective_teacher) {
        echo = std::make_unique<LabelEchoTeacher>(weights.config.num_classes);
        effective_teacher = echo.get();
    }

    std::vector<Tensor> params;
    {
        const auto named = cfg.freeze_backbone ? weights.head_named() : weights.named();
        params.reserve(named.size());
        for (const auto& [name, tensor] : named) params.push_back(tensor);
    }
    for (Tensor& p : params) p.set_requires_grad(true);
    AdamW optimizer(params, cfg);

    const std::vector<Sample> train_set = gather(manifest, split.train_ids, loader);
    const std::vector<Sample> test_set = gather(manifest, split.test_ids, loader);

    TrainRun run;
    run.seed = cfg.seed;
    run.epochs = cfg.epochs;
    if (metrics_log) {
        *metrics_log << "# seed=" << cfg.seed << " epochs=" << cfg.epochs
                     << " batch_size=" << cfg.batch_size << " lr=" << cfg.learning_rate
                     << " weight_decay=" << cfg.weight_decay
                     << " arch=" << (is_deit ? "deit" : "vit")
                     << " teacher=" << (teacher ? "yes" : "none") << "\n";
    }

    for (std::size_t epoch = 1; epoch <= cfg.epochs; ++epoch) {
        std::vector<std::size_t> order(train_set.size());
        for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
        rng::Stream shuffle_stream(rng::derive(cfg.seed, "epoch-shuffle", epoch));
        shuffle_stream.shuffle(order);

        double epoch_loss = 0.0;
        std::size_t epoch_correct = 0;
        std::size_t batches = 0;
        for (std::size_t begin = 0; begin < order.size(); begin += cfg.batch_size) {
            const std::size_t end = std::min(begin + cfg.batch_size, order.size());
            const std::size_t batch_n = end - begin;
            optimizer.zero_grad();
            Tape tape;
            Tensor batch_loss;
            try {
                for (std::size_t bi = begin; bi < end; ++bi) {
                    const Sample& s = train_set[order[bi]];
                    ForwardResult fwd = forward(s.image, weights.config, weights, &tape);
                    Tensor sample_loss;
                    if (is_deit) {
                        const ProbVector teacher_probs =
                            effective_teacher->predict(s.image, s.label);
                        sample_loss = distillation_loss(fwd.logits, fwd.dist_logits, s.label,
                                                        teacher_probs, dist_cfg, &tape);
                    } else {
                        const int target[1] = {s.label};
                        sample_loss = cross_entropy(fwd.logits, target, &tape);
                    }
                    batch_loss = batch_loss.defined() ? add(batch_loss, sample_loss, &tape)
                                                      : sample_loss;
                    // Running train accuracy from the class head seen during the pass.
                    const auto logits = fwd.logits.values();
                    std::size_t best = 0;
                    for (std::size_t i = 1; i < logits.size(); ++i) {
                        if (logits[i] > logits[best]) best = i;
                    }
                    if (best == static_cast<std::size_t>(s.label)) ++epoch_correct;
                }
            } catch (const Error& e) {
                if (e.category() != ErrorCategory::numeric) throw;
                throw Error(ErrorCategory::training,
                            "loss diverged at epoch " + std::to_string(epoch) + ", batch " +
                                std::to_string(batches + 1) + ": " + e.what());
            }
            batch_loss = scale(batch_loss, 1.0 / static_cast<double>(batch_n), &tape);
            const double loss_value = batch_loss.item();
            if (!std::isfinite(loss_value))
                throw Error(ErrorCategory::training,
                            "loss diverged at epoch " + std::to_string(epoch) + ", batch " +
                                std::to_string(batches + 1));
            tape.backward(batch_loss);
            optimizer.step();
            epoch_loss += loss_value;
            ++batches;
        }
        run.optimizer_steps = optimizer.steps_taken();
        const double mean_loss = epoch_loss / static_cast<double>(batches);
        const double train_acc =
            static_cast<double>(epoch_correct) / static_cast<double>(train_set.size());
        double test_acc = 0.0;
        {
            std::size_t correct = 0;
            for (const Sample& s : test_set) {
                if (predict_index(weights, s.image) == static_cast<std::size_t>(s.label))
                    ++correct;
            }
            test_acc = test_set.empty()
                           ? 0.0
                           : static_cast<double>(correct) / static_cast<double>(test_set.size());
        }
        run.train_loss.push_back(mean_loss);
        run.train_accuracy.push_back(train_acc);
        run.test_accuracy.push_back(test_acc);
        if (metrics_log) {
            *metrics_log << epoch << ",train,loss," << mean_loss << "\n";
            *metrics_log << epoch << ",train,accuracy," << train_acc << "\n";
            *metrics_log << epoch << ",test,accuracy," << test_acc << "\n";
        }
    }

    if (!checkpoint_path.empty()) {
        save_checkpoint(checkpoint_path, weights);
        run.checkpoint_path = checkpoint_path.string();
    }
    run.wall_seconds =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    return run;
}

FineTuneResult fine_tune(const std::filesystem::path& checkpoint, std::size_t new_num_classes,
                         const DatasetManifest& manifest, const SplitPlan& split,
                         const TrainConfig& cfg, const ImageLoader& loader,
                         const TeacherOracle* teacher, const std::filesystem::path& checkpoint_out,
                         std::ostream* metrics_log) {
    ModelWeights source = load_checkpoint(checkpoint);
    TransformerConfig target_cfg = source.config;
    target_cfg.num_classes = new_num_classes;
    target_cfg.validate();

    // Fresh init for the target config, then the backbone is copied over so
    // only the head(s) differ from the checkpoint.
    ModelWeights weights = ModelWeights::init(target_cfg, rng::derive(cfg.seed, "fine-tune-head"));
    {
        std::unordered_map<std::string, Tensor> head_only;
        for (const auto& [name, tensor] : weights.head_named()) head_only.emplace(name, tensor);
        auto dst = weights.named();
        std::unordered_map<std::string, Tensor> src;
        for (const auto& [name, tensor] : source.named()) src.emplace(name, tensor);
        for (auto& [name, tensor] : dst) {
            if (head_only.contains(name)) continue;
            auto it = src.find(name);
            if (it == src.end() || it->second.shape() != tensor.shape())
                throw Error(ErrorCategory::checkpoint,
                            "backbone tensor '" + name + "' missing or mismatched in checkpoint");
            Tensor d = tensor;
            std::copy(it->second.values().begin(), it->second.values().end(),
                      d.mutable_values().begin());
        }
    }

    FineTuneResult result{std::move(weights), {}};
    if (cfg.epochs == 0) {
        if (!checkpoint_out.empty()) {
            save_checkpoint(checkpoint_out, result.weights);
            result.run.checkpoint_path = checkpoint_out.string();
        }
        result.run.seed = cfg.seed;
        return result;
    }
    result.run = train(result.weights, manifest, split, cfg, loader, teacher, checkpoint_out,
                       metrics_log);
    return result;
}

}  // namespace histovit
