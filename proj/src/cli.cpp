#include "histovit/cli.hpp"

#include <CLI11.hpp>
#include <fstream>
#include <iostream>
#include <map>
#include <set>
#include <sstream>

#include "histovit/checkpoint.hpp"
#include "histovit/dataset.hpp"
#include "histovit/distill.hpp"
#include "histovit/ensemble.hpp"
#include "histovit/error.hpp"
#include "histovit/metrics.hpp"
#include "histovit/rng.hpp"
#include "histovit/synth.hpp"
#include "histovit/train.hpp"

namespace histovit::cli {

namespace {

namespace fs = std::filesystem;

void emit_artifact(const fs::path& path) { std::cout << path.string() << "\n"; }

std::ofstream open_out(const fs::path& path) {
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw Error(ErrorCategory::io, "cannot open " + path.string() + " for writing");
    return out;
}

// Magnification-dependent protocols work on one magnification at a time.
DatasetManifest filter_magnification(const DatasetManifest& manifest, int magnification) {
    if (magnification == 0) return manifest;
    auto parts = partition_by_magnification(manifest);
    auto it = parts.find(magnification);
    if (it == parts.end())
        throw Error(ErrorCategory::usage,
                    "--magnification must be one of 40/100/200/400");
    return std::move(it->second);
}

// Model subset selected by a split file, or the whole manifest without one.
std::vector<SampleRecord> select_records(const DatasetManifest& manifest,
                                         const std::string& split_path,
                                         const std::string& subset) {
    if (split_path.empty()) return manifest.records();
    if (subset != "train" && subset != "test")
        throw Error(ErrorCategory::usage, "--subset must be train or test");
    const SplitPlan plan = load_split(split_path);
    const std::vector<std::string>& ids = subset == "train" ? plan.train_ids : plan.test_ids;
    std::map<std::string, const SampleRecord*> by_id;
    for (const SampleRecord& r : manifest.records()) by_id.emplace(r.sample_id, &r);
    std::vector<SampleRecord> out;
    out.reserve(ids.size());
    for (const std::string& id : ids) {
        auto it = by_id.find(id);
        if (it == by_id.end())
            throw Error(ErrorCategory::split, "split references unknown sample '" + id + "'");
        out.push_back(*it->second);
    }
    return out;
}

struct SynthArgs {
    std::string out_dir;
    std::size_t per_class = 50;
    std::size_t image_size = 32;
    std::uint64_t seed = 0;
    std::vector<int> magnifications{40, 100, 200, 400};
    double noise = 0.03;
};

struct BalanceArgs {
    std::string manifest, out, scope = "independent";
    std::uint64_t seed = 0;
    int magnification = 0;
};

struct SplitArgs {
    std::string manifest, out;
    double test_fraction = 0.2;
    bool stratify_magnification = false;
    bool by_patient = false;
    std::uint64_t seed = 0;
    int magnification = 0;
};

struct TrainArgs {
    std::string manifest, split, arch = "vit", config, teacher, out, log;
    std::uint64_t seed = 0;
    bool seed_set = false;
    // model shape
    std::size_t image_size = 32, patch_size = 4, embed_dim = 32, heads = 2, blocks = 2,
                mlp_dim = 64, classes = 8, head_hidden = 0;
    bool single_head = false, gelu_tanh = false, freeze_backbone = false;
    // optimizer overrides
    double lr = -1.0, weight_decay = -1.0;
    long long batch_size = -1, epochs = -1;
    std::string distill_mode;
    double distill_lambda = -1.0, distill_tau = -1.0;
};

struct EvalArgs {
    std::string manifest, split, subset = "test", model, report, probs_out, model_id;
    int magnification = 0;
};

struct EnsembleArgs {
    std::string probs, manifest, report, predictions_out;
    std::vector<std::string> models;
    std::string split, subset = "test";
    std::string probs_out;
};

struct AttentionArgs {
    std::string model, image, method = "last", out, grid_out;
};

struct ReportArgs {
    std::string probs, manifest, out;
};

void run_synth(const SynthArgs& args) {
    SynthSpec spec;
    spec.per_class = args.per_class;
    spec.image_size = args.image_size;
    spec.seed = args.seed;
    spec.magnifications = args.magnifications;
    spec.noise_stddev = args.noise;
    generate_synthetic(spec, args.out_dir);
    emit_artifact(fs::path(args.out_dir) / "manifest.txt");
}

// A manifest written to a new directory must keep its relative image paths
// resolvable from there.
DatasetManifest rebase_paths(const DatasetManifest& manifest, const fs::path& old_dir,
                             const fs::path& new_dir) {
    if (fs::weakly_canonical(fs::absolute(old_dir)) == fs::weakly_canonical(fs::absolute(new_dir)))
        return manifest;
    std::vector<SampleRecord> records = manifest.records();
    for (SampleRecord& rec : records) {
        fs::path p(rec.path);
        if (p.is_relative()) {
            rec.path = fs::proximate(old_dir / p, new_dir).string();
        }
    }
    return DatasetManifest::from_records(std::move(records));
}

void run_balance(const BalanceArgs& args) {
    if (args.scope != "independent" && args.scope != "dependent")
        throw Error(ErrorCategory::usage, "--scope must be independent or dependent");
    const DatasetManifest manifest =
        filter_magnification(load_manifest(args.manifest), args.magnification);
    const BalanceScope scope = args.scope == "independent"
                                   ? BalanceScope::magnification_independent
                                   : BalanceScope::magnification_dependent;
    const DatasetManifest balanced = undersample_balance(manifest, scope, args.seed);
    save_manifest(args.out, rebase_paths(balanced, fs::path(args.manifest).parent_path(),
                                         fs::path(args.out).parent_path()));
    emit_artifact(args.out);
}

void run_split(const SplitArgs& args) {
    const DatasetManifest manifest =
        filter_magnification(load_manifest(args.manifest), args.magnification);
    const SplitPlan plan = make_split(manifest, args.test_fraction, args.stratify_magnification,
                                      args.seed, args.by_patient);
    save_split(args.out, plan);
    emit_artifact(args.out);
}

TransformerConfig model_config_from(const TrainArgs& args) {
    TransformerConfig cfg;
    cfg.image_size = args.image_size;
    cfg.patch_size = args.patch_size;
    cfg.embed_dim = args.embed_dim;
    cfg.num_heads = args.heads;
    cfg.num_blocks = args.blocks;
    cfg.mlp_hidden_dim = args.mlp_dim;
    cfg.num_classes = args.classes;
    cfg.use_distillation_token = args.arch == "deit";
    cfg.head = args.single_head ? TransformerConfig::HeadKind::single_linear
                                : TransformerConfig::HeadKind::two_layer_gelu;
    cfg.head_hidden_dim = args.head_hidden;
    cfg.gelu_tanh_approx = args.gelu_tanh;
    return cfg;
}

void run_train(const TrainArgs& args) {
    if (args.arch != "vit" && args.arch != "deit")
        throw Error(ErrorCategory::usage, "--arch must be vit or deit");
    TrainConfig cfg;
    if (!args.config.empty()) cfg = load_train_config(args.config);
    if (args.seed_set) cfg.seed = args.seed;
    if (args.lr >= 0.0) cfg.learning_rate = args.lr;
    if (args.weight_decay >= 0.0) cfg.weight_decay = args.weight_decay;
    if (args.batch_size > 0) cfg.batch_size = static_cast<std::size_t>(args.batch_size);
    if (args.epochs > 0) cfg.epochs = static_cast<std::size_t>(args.epochs);
    cfg.freeze_backbone = cfg.freeze_backbone || args.freeze_backbone;
    if (!args.distill_mode.empty()) {
        if (!cfg.distillation) cfg.distillation.emplace();
        if (args.distill_mode == "hard")
            cfg.distillation->mode = DistillationLossConfig::Mode::hard;
        else if (args.distill_mode == "soft")
            cfg.distillation->mode = DistillationLossConfig::Mode::soft;
        else
            throw Error(ErrorCategory::usage, "--distill-mode must be hard or soft");
    }
    if (args.distill_lambda >= 0.0) {
        if (!cfg.distillation) cfg.distillation.emplace();
        cfg.distillation->lambda = args.distill_lambda;
    }
    if (args.distill_tau > 0.0) {
        if (!cfg.distillation) cfg.distillation.emplace();
        cfg.distillation->temperature = args.distill_tau;
    }

    const DatasetManifest manifest = load_manifest(args.manifest);
    const SplitPlan plan = load_split(args.split);
    const ImageLoader loader =
        disk_image_loader(fs::path(args.manifest).parent_path(), args.image_size);

    std::unique_ptr<ModelTeacher> teacher;
    if (!args.teacher.empty()) {
        teacher = std::make_unique<ModelTeacher>(load_checkpoint(args.teacher),
                                                 fs::path(args.teacher).stem().string());
    }

    ModelWeights weights =
        ModelWeights::init(model_config_from(args), rng::derive(cfg.seed, "weights-init"));
    std::ofstream log;
    std::ostream* log_stream = nullptr;
    if (!args.log.empty()) {
        log = open_out(args.log);
        log_stream = &log;
    }
    const TrainRun run =
        train(weights, manifest, plan, cfg, loader, teacher.get(), args.out, log_stream);
    emit_artifact(args.out);
    if (!args.log.empty()) emit_artifact(args.log);
    std::cout << "final_test_accuracy " << (run.test_accuracy.empty() ? 0.0
                                                                      : run.test_accuracy.back())
              << "\n";
}

// Runs one model over records, returning per-sample probability vectors.
std::vector<ProbVector> model_probs_over(const LoadedModel& model,
                                         const std::vector<SampleRecord>& records,
                                         const ImageLoader& loader) {
    std::vector<ProbVector> out;
    out.reserve(records.size());
    for (const SampleRecord& rec : records) out.push_back(model_probs(model, loader(rec)));
    return out;
}

void write_eval_report(const fs::path& path, const std::vector<SampleRecord>& records,
                       const std::vector<int>& predictions,
                       const std::vector<std::vector<double>>& scores, std::size_t num_classes) {
    EvalReport report = evaluate(records, predictions, scores, num_classes);
    std::ofstream out = open_out(path);
    write_report(out, report);
    emit_artifact(path);
}

void run_eval(const EvalArgs& args) {
    const DatasetManifest manifest =
        filter_magnification(load_manifest(args.manifest), args.magnification);
    const std::vector<SampleRecord> records =
        select_records(manifest, args.split, args.subset);
    if (records.empty()) throw Error(ErrorCategory::input, "no samples selected for evaluation");
    const ModelWeights weights = load_checkpoint(args.model);
    const std::string model_id =
        args.model_id.empty() ? fs::path(args.model).stem().string() : args.model_id;
    const LoadedModel model{model_id, weights};
    const ImageLoader loader =
        disk_image_loader(fs::path(args.manifest).parent_path(), weights.config.image_size);

    const std::vector<ProbVector> probs = model_probs_over(model, records, loader);
    std::vector<int> predictions;
    std::vector<std::vector<double>> scores;
    predictions.reserve(records.size());
    for (const ProbVector& p : probs) {
        predictions.push_back(static_cast<int>(p.argmax()));
        scores.push_back(p.probs);
    }
    if (!args.probs_out.empty()) {
        std::vector<ProbRecord> rows;
        rows.reserve(records.size());
        for (std::size_t i = 0; i < records.size(); ++i) {
            rows.push_back({records[i].sample_id, model_id, probs[i].probs});
        }
        write_prob_file(args.probs_out, rows);
        emit_artifact(args.probs_out);
    }
    write_eval_report(args.report, records, predictions, scores, weights.config.num_classes);
}

void run_ensemble(const EnsembleArgs& args) {
    // Per-sample member distributions, either from a probability interchange
    // file or by running the listed checkpoints.
    std::vector<std::string> sample_order;
    std::map<std::string, std::vector<ProbVector>> members_by_sample;

    if (!args.probs.empty()) {
        if (!args.models.empty())
            throw Error(ErrorCategory::usage, "--probs and --models are mutually exclusive");
        for (const ProbRecord& rec : read_prob_file(args.probs)) {
            if (!members_by_sample.contains(rec.sample_id)) sample_order.push_back(rec.sample_id);
            ProbVector pv;
            pv.probs = rec.probs;
            pv.class_labels = default_class_labels(rec.probs.size());
            members_by_sample[rec.sample_id].push_back(std::move(pv));
        }
    } else {
        if (args.models.size() < 1)
            throw Error(ErrorCategory::usage, "ensemble needs --probs or at least one --models");
        if (args.manifest.empty())
            throw Error(ErrorCategory::usage, "--manifest is required with --models");
        const DatasetManifest manifest = load_manifest(args.manifest);
        const std::vector<SampleRecord> records =
            select_records(manifest, args.split, args.subset);
        std::vector<LoadedModel> models;
        for (const std::string& path : args.models) {
            models.push_back({fs::path(path).stem().string(), load_checkpoint(path)});
        }
        const ImageLoader loader = disk_image_loader(fs::path(args.manifest).parent_path(),
                                                     models.front().weights.config.image_size);
        std::vector<ProbRecord> prob_rows;
        for (const SampleRecord& rec : records) {
            sample_order.push_back(rec.sample_id);
            const Tensor image = loader(rec);
            for (const LoadedModel& model : models) {
                ProbVector pv = model_probs(model, image);
                prob_rows.push_back({rec.sample_id, model.id, pv.probs});
                members_by_sample[rec.sample_id].push_back(std::move(pv));
            }
        }
        if (!args.probs_out.empty()) {
            write_prob_file(args.probs_out, prob_rows);
            emit_artifact(args.probs_out);
        }
    }
    if (sample_order.empty()) throw Error(ErrorCategory::input, "no samples to vote on");

    std::map<std::string, EnsemblePrediction> voted;
    for (const std::string& id : sample_order) {
        voted.emplace(id, soft_vote(members_by_sample.at(id)));
    }
    if (!args.predictions_out.empty()) {
        std::ofstream out = open_out(args.predictions_out);
        for (const std::string& id : sample_order) {
            const EnsemblePrediction& p = voted.at(id);
            out << id << "," << p.predicted_index << (p.tie_broken ? ",tie" : "") << "\n";
        }
        emit_artifact(args.predictions_out);
    }
    if (!args.report.empty()) {
        if (args.manifest.empty())
            throw Error(ErrorCategory::usage, "--manifest is required to write a report");
        const DatasetManifest manifest = load_manifest(args.manifest);
        std::map<std::string, const SampleRecord*> by_id;
        for (const SampleRecord& r : manifest.records()) by_id.emplace(r.sample_id, &r);
        std::vector<SampleRecord> records;
        std::vector<int> predictions;
        std::vector<std::vector<double>> scores;
        for (const std::string& id : sample_order) {
            auto it = by_id.find(id);
            if (it == by_id.end())
                throw Error(ErrorCategory::alignment,
                            "sample '" + id + "' is not in the manifest");
            const EnsemblePrediction& p = voted.at(id);
            records.push_back(*it->second);
            predictions.push_back(static_cast<int>(p.predicted_index));
            scores.push_back(p.averaged_probs);
        }
        write_eval_report(args.report, records, predictions, scores,
                          scores.front().size());
    }
}

void run_attention(const AttentionArgs& args) {
    if (args.method != "last" && args.method != "rollout")
        throw Error(ErrorCategory::usage, "--method must be last or rollout");
    const ModelWeights weights = load_checkpoint(args.model);
    const Tensor image = load_image(args.image, weights.config.image_size);
    const AttentionMethod method =
        args.method == "last" ? AttentionMethod::last_layer : AttentionMethod::rollout;
    const AttentionMap map = attention_map(weights, image, method);
    write_ppm(args.out, render_attention_overlay(image, map));
    emit_artifact(args.out);
    if (!args.grid_out.empty()) {
        std::ofstream out = open_out(args.grid_out);
        out << "method " << args.method << "\n";
        out << "grid " << map.grid << "\n";
        for (std::size_t y = 0; y < map.grid; ++y) {
            for (std::size_t x = 0; x < map.grid; ++x) {
                if (x) out << " ";
                char buf[40];
                std::snprintf(buf, sizeof(buf), "%.9f", map.heat[y * map.grid + x]);
                out << buf;
            }
            out << "\n";
        }
        emit_artifact(args.grid_out);
    }
}

void run_report(const ReportArgs& args) {
    EnsembleArgs fwd;
    fwd.probs = args.probs;
    fwd.manifest = args.manifest;
    fwd.report = args.out;
    run_ensemble(fwd);
}

}  // namespace

int run(int argc, const char* const* argv) {
    CLI::App app{"ViT/DeiT soft-voting ensemble pipeline for histopathology classification"};
    app.require_subcommand(1);

    SynthArgs synth_args;
    auto* synth = app.add_subcommand("synth", "Generate the synthetic texture dataset");
    synth->add_option("--out", synth_args.out_dir, "Output directory")->required();
    synth->add_option("--per-class", synth_args.per_class,
                      "Images per subclass per magnification");
    synth->add_option("--image-size", synth_args.image_size, "Square image size in pixels");
    synth->add_option("--seed", synth_args.seed, "Generator seed");
    synth->add_option("--magnifications", synth_args.magnifications,
                      "Magnification factors to emit")->delimiter(',');
    synth->add_option("--noise", synth_args.noise, "Per-pixel noise stddev");

    BalanceArgs balance_args;
    auto* balance = app.add_subcommand("balance", "Undersample to the smallest subclass");
    balance->add_option("--manifest", balance_args.manifest, "Input manifest")->required();
    balance->add_option("--out", balance_args.out, "Balanced manifest path")->required();
    balance->add_option("--scope", balance_args.scope,
                        "Balance scope: independent|dependent (per magnification)");
    balance->add_option("--seed", balance_args.seed, "Sampling seed");
    balance->add_option("--magnification", balance_args.magnification,
                        "Restrict to one magnification factor first");

    SplitArgs split_args;
    auto* split = app.add_subcommand("split", "Stratified train/test split");
    split->add_option("--manifest", split_args.manifest, "Input manifest")->required();
    split->add_option("--out", split_args.out, "Split plan path")->required();
    split->add_option("--test-fraction", split_args.test_fraction, "Test fraction (default 0.2)");
    split->add_flag("--stratify-magnification", split_args.stratify_magnification,
                    "Also stratify by magnification");
    split->add_flag("--by-patient", split_args.by_patient, "Keep patients on one side");
    split->add_option("--seed", split_args.seed, "Shuffle seed");
    split->add_option("--magnification", split_args.magnification,
                      "Restrict to one magnification factor first");

    TrainArgs train_args;
    auto* train_cmd = app.add_subcommand("train", "Train a ViT or DeiT model");
    train_cmd->add_option("--manifest", train_args.manifest, "Dataset manifest")->required();
    train_cmd->add_option("--split", train_args.split, "Split plan")->required();
    train_cmd->add_option("--arch", train_args.arch, "Architecture: vit|deit");
    train_cmd->add_option("--config", train_args.config, "Training config file");
    train_cmd->add_option("--teacher", train_args.teacher, "Teacher checkpoint (deit)");
    train_cmd->add_option("--out", train_args.out, "Checkpoint output path")->required();
    train_cmd->add_option("--log", train_args.log, "Metrics log path");
    train_cmd->add_option("--seed", train_args.seed, "Training seed")
        ->each([&train_args](const std::string&) { train_args.seed_set = true; });
    train_cmd->add_option("--image-size", train_args.image_size, "Model input size");
    train_cmd->add_option("--patch-size", train_args.patch_size, "Patch size");
    train_cmd->add_option("--embed-dim", train_args.embed_dim, "Embedding width");
    train_cmd->add_option("--heads", train_args.heads, "Attention heads");
    train_cmd->add_option("--blocks", train_args.blocks, "Encoder blocks");
    train_cmd->add_option("--mlp-dim", train_args.mlp_dim, "FFN hidden width");
    train_cmd->add_option("--classes", train_args.classes, "Number of classes");
    train_cmd->add_option("--head-hidden", train_args.head_hidden,
                          "Head hidden width (0 = embed dim)");
    train_cmd->add_flag("--single-head", train_args.single_head,
                        "Single linear head instead of the two-layer GELU head");
    train_cmd->add_flag("--gelu-tanh", train_args.gelu_tanh, "Use the tanh GELU approximation");
    train_cmd->add_flag("--freeze-backbone", train_args.freeze_backbone,
                        "Train only the prediction head(s)");
    train_cmd->add_option("--lr", train_args.lr, "Learning rate");
    train_cmd->add_option("--weight-decay", train_args.weight_decay, "Decoupled weight decay");
    train_cmd->add_option("--batch-size", train_args.batch_size, "Batch size");
    train_cmd->add_option("--epochs", train_args.epochs, "Epochs");
    train_cmd->add_option("--distill-mode", train_args.distill_mode, "hard|soft");
    train_cmd->add_option("--distill-lambda", train_args.distill_lambda,
                          "Distillation loss weight");
    train_cmd->add_option("--distill-tau", train_args.distill_tau, "Soft distillation temperature");

    EvalArgs eval_args;
    auto* eval_cmd = app.add_subcommand("eval", "Evaluate one checkpoint");
    eval_cmd->add_option("--manifest", eval_args.manifest, "Dataset manifest")->required();
    eval_cmd->add_option("--split", eval_args.split, "Split plan (evaluates the subset)");
    eval_cmd->add_option("--subset", eval_args.subset, "Subset when --split given: test|train");
    eval_cmd->add_option("--model", eval_args.model, "Checkpoint to evaluate")->required();
    eval_cmd->add_option("--report", eval_args.report, "Report output path")->required();
    eval_cmd->add_option("--probs-out", eval_args.probs_out, "Probability interchange output");
    eval_cmd->add_option("--model-id", eval_args.model_id, "Model id for the probability file");
    eval_cmd->add_option("--magnification", eval_args.magnification,
                         "Restrict to one magnification factor");

    EnsembleArgs ens_args;
    auto* ens = app.add_subcommand("ensemble", "Soft-vote member models");
    ens->add_option("--probs", ens_args.probs, "Probability interchange file");
    ens->add_option("--models", ens_args.models, "Member checkpoints")->delimiter(',');
    ens->add_option("--manifest", ens_args.manifest, "Dataset manifest");
    ens->add_option("--split", ens_args.split, "Split plan");
    ens->add_option("--subset", ens_args.subset, "Subset when --split given: test|train");
    ens->add_option("--report", ens_args.report, "Report output path");
    ens->add_option("--predictions-out", ens_args.predictions_out, "Predictions CSV");
    ens->add_option("--probs-out", ens_args.probs_out,
                    "Member probability interchange output (with --models)");

    AttentionArgs attn_args;
    auto* attn = app.add_subcommand("attention", "Render an attention map overlay");
    attn->add_option("--model", attn_args.model, "Checkpoint")->required();
    attn->add_option("--image", attn_args.image, "Input image (PPM)")->required();
    attn->add_option("--method", attn_args.method, "last|rollout");
    attn->add_option("--out", attn_args.out, "Overlay output (PPM)")->required();
    attn->add_option("--grid-out", attn_args.grid_out, "Heat grid text output");

    ReportArgs report_args;
    auto* report_cmd =
        app.add_subcommand("report", "Evaluate a probability interchange file offline");
    report_cmd->add_option("--probs", report_args.probs, "Probability interchange file")
        ->required();
    report_cmd->add_option("--manifest", report_args.manifest, "Dataset manifest")->required();
    report_cmd->add_option("--out", report_args.out, "Report output path")->required();

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);  // 0
    } catch (const CLI::CallForAllHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return 2;
    }

    try {
        if (app.got_subcommand(synth)) run_synth(synth_args);
        else if (app.got_subcommand(balance)) run_balance(balance_args);
        else if (app.got_subcommand(split)) run_split(split_args);
        else if (app.got_subcommand(train_cmd)) run_train(train_args);
        else if (app.got_subcommand(eval_cmd)) run_eval(eval_args);
        else if (app.got_subcommand(ens)) run_ensemble(ens_args);
        else if (app.got_subcommand(attn)) run_attention(attn_args);
        else if (app.got_subcommand(report_cmd)) run_report(report_args);
    } catch (const Error& e) {
        std::cerr << "error [" << to_string(e.category()) << "]: " << e.what() << "\n";
        return e.category() == ErrorCategory::usage ? 2 : 1;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 0;
}

}  // namespace histovit::cli
