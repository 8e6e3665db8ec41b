#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <unordered_map>

#include "histovit/checkpoint.hpp"
#include "histovit/error.hpp"
#include "histovit/synth.hpp"
#include "histovit/train.hpp"

using namespace histovit;
namespace fs = std::filesystem;

namespace {

struct MiniData {
    DatasetManifest manifest;
    std::unordered_map<std::string, Tensor> images;
    SplitPlan all_train;
};

// In-memory texture dataset at one magnification; no disk involved.
MiniData make_texture_data(std::size_t per_class, std::size_t image_size, std::uint64_t seed,
                           std::size_t num_classes = 8) {
    SynthSpec spec;
    spec.image_size = image_size;
    spec.seed = seed;
    MiniData data;
    std::vector<SampleRecord> records;
    for (std::size_t si = 0; si < num_classes; ++si) {
        for (std::size_t i = 0; i < per_class; ++i) {
            SampleRecord rec;
            rec.sample_id = std::string(to_string(kAllSubclasses[si])) + "-" + std::to_string(i);
            rec.path = rec.sample_id + ".ppm";
            rec.subclass = kAllSubclasses[si];
            rec.magnification = 40;
            rec.patient_id = "p" + std::to_string(i % 3);
            data.images.emplace(rec.sample_id, image_to_tensor(render_synthetic_image(
                                                   spec, rec.subclass, 40, i)));
            data.all_train.train_ids.push_back(rec.sample_id);
            records.push_back(std::move(rec));
        }
    }
    data.manifest = DatasetManifest::from_records(std::move(records));
    return data;
}

ImageLoader memory_loader(const MiniData& data) {
    return [&data](const SampleRecord& rec) { return data.images.at(rec.sample_id); };
}

TransformerConfig tiny_config(bool deit, std::size_t image_size = 8, std::size_t num_classes = 8) {
    TransformerConfig cfg;
    cfg.image_size = image_size;
    cfg.patch_size = 4;
    cfg.channels = 3;
    cfg.embed_dim = 16;
    cfg.num_heads = 2;
    cfg.num_blocks = 1;
    cfg.mlp_hidden_dim = 32;
    cfg.num_classes = num_classes;
    cfg.use_distillation_token = deit;
    return cfg;
}

bool same_bits(const Tensor& a, const Tensor& b) {
    return a.size() == b.size() &&
           std::memcmp(a.values().data(), b.values().data(), a.size() * sizeof(double)) == 0;
}

bool same_file_bytes(const fs::path& a, const fs::path& b) {
    std::ifstream fa(a, std::ios::binary), fb(b, std::ios::binary);
    std::string sa((std::istreambuf_iterator<char>(fa)), std::istreambuf_iterator<char>());
    std::string sb((std::istreambuf_iterator<char>(fb)), std::istreambuf_iterator<char>());
    return !sa.empty() && sa == sb;
}

}  // namespace

TEST_CASE("adamw_apply hand-stepped and closed-form cases") {
    // zero gradient, zero decay: parameters do not move
    {
        std::vector<double> p{1.5, -0.5}, g{0.0, 0.0}, m(2, 0.0), v(2, 0.0);
        adamw_apply(p, g, m, v, 1, 1e-3, 0.0, 0.9, 0.999, 1e-8);
        CHECK(p[0] == 1.5);
        CHECK(p[1] == -0.5);
    }
    // zero gradient with decay: pure multiplicative shrink by (1 - lr*wd)
    {
        std::vector<double> p{2.0}, g{0.0}, m(1, 0.0), v(1, 0.0);
        adamw_apply(p, g, m, v, 1, 0.1, 0.5, 0.9, 0.999, 1e-8);
        CHECK(p[0] == doctest::Approx(2.0 * (1.0 - 0.1 * 0.5)).epsilon(1e-15));
        adamw_apply(p, g, m, v, 2, 0.1, 0.5, 0.9, 0.999, 1e-8);
        CHECK(p[0] == doctest::Approx(2.0 * (1.0 - 0.05) * (1.0 - 0.05)).epsilon(1e-15));
    }
    // two steps with fixed grad 1, hand-stepped trace
    {
        const double lr = 0.01, b1 = 0.9, b2 = 0.999, eps = 1e-8;
        std::vector<double> p{0.5}, g{1.0}, m(1, 0.0), v(1, 0.0);
        adamw_apply(p, g, m, v, 1, lr, 0.0, b1, b2, eps);
        // step 1: m=0.1, v=0.001, mhat=1, vhat=1 -> p -= lr * 1/(1+eps)
        double m_expect = 0.1, v_expect = 0.001;
        double p_expect = 0.5 - lr * (m_expect / (1 - b1)) /
                                    (std::sqrt(v_expect / (1 - b2)) + eps);
        CHECK(p[0] == doctest::Approx(p_expect).epsilon(1e-14));
        adamw_apply(p, g, m, v, 2, lr, 0.0, b1, b2, eps);
        m_expect = b1 * 0.1 + (1 - b1);
        v_expect = b2 * 0.001 + (1 - b2);
        p_expect -= lr * (m_expect / (1 - b1 * b1)) /
                    (std::sqrt(v_expect / (1 - b2 * b2)) + eps);
        CHECK(p[0] == doctest::Approx(p_expect).epsilon(1e-14));
    }
    // beta1 = beta2 = 0, wd = 0 reduces to lr * g / (|g| + eps)
    {
        std::vector<double> p{1.0}, g{-0.3}, m(1, 0.0), v(1, 0.0);
        adamw_apply(p, g, m, v, 1, 0.05, 0.0, 0.0, 0.0, 1e-8);
        const double expected = 1.0 - 0.05 * (-0.3) / (std::fabs(-0.3) + 1e-8);
        CHECK(std::fabs(p[0] - expected) <= 1e-12);
    }
    // non-finite gradient is rejected
    {
        std::vector<double> p{1.0}, g{std::nan("")}, m(1, 0.0), v(1, 0.0);
        CHECK_THROWS_AS(adamw_apply(p, g, m, v, 1, 0.05, 0.0, 0.9, 0.999, 1e-8), Error);
    }
}

TEST_CASE("one epoch over 16 samples at batch 16 takes exactly one optimizer step") {
    MiniData data = make_texture_data(2, 8, 301);
    REQUIRE(data.all_train.train_ids.size() == 16);
    TransformerConfig cfg = tiny_config(false);
    ModelWeights w = ModelWeights::init(cfg, 1);
    TrainConfig tc;
    tc.epochs = 1;
    tc.batch_size = 16;
    tc.seed = 5;
    const TrainRun run = train(w, data.manifest, data.all_train, tc, memory_loader(data));
    CHECK(run.optimizer_steps == 1);
    CHECK(run.train_loss.size() == 1);
    CHECK(run.train_accuracy.size() == 1);
    CHECK(run.test_accuracy.size() == 1);

    // a trailing partial batch still trains: 16 samples at batch 6 -> 3 steps
    ModelWeights w2 = ModelWeights::init(cfg, 1);
    TrainConfig tc2 = tc;
    tc2.batch_size = 6;
    CHECK(train(w2, data.manifest, data.all_train, tc2, memory_loader(data)).optimizer_steps ==
          3);
}

TEST_CASE("learning rate zero leaves the weights bitwise unchanged") {
    MiniData data = make_texture_data(2, 8, 302);
    TransformerConfig cfg = tiny_config(true);  // deit path, no teacher
    ModelWeights w = ModelWeights::init(cfg, 2);
    std::vector<Tensor> before;
    for (auto& [name, t] : w.named()) before.push_back(t.clone());
    TrainConfig tc;
    tc.epochs = 2;
    tc.batch_size = 8;
    tc.learning_rate = 0.0;
    const TrainRun run = train(w, data.manifest, data.all_train, tc, memory_loader(data));
    CHECK(run.optimizer_steps == 4);
    std::size_t i = 0;
    for (auto& [name, t] : w.named()) {
        CAPTURE(name);
        CHECK(same_bits(t, before[i]));
        ++i;
    }
}

TEST_CASE("training is bitwise deterministic per seed") {
    MiniData data = make_texture_data(3, 8, 303);
    const fs::path ck_a = fs::temp_directory_path() / "histovit_det_a.ckpt";
    const fs::path ck_b = fs::temp_directory_path() / "histovit_det_b.ckpt";
    for (const fs::path& p : {ck_a, ck_b}) {
        TransformerConfig cfg = tiny_config(false);
        ModelWeights w = ModelWeights::init(cfg, 7);
        TrainConfig tc;
        tc.epochs = 3;
        tc.batch_size = 8;
        tc.seed = 77;
        train(w, data.manifest, data.all_train, tc, memory_loader(data), nullptr, p);
    }
    CHECK(same_file_bytes(ck_a, ck_b));
    fs::remove(ck_a);
    fs::remove(ck_b);
}

TEST_CASE("overfit-one-batch reaches a small loss within 500 steps") {
    MiniData data = make_texture_data(1, 8, 304, 4);  // 4 samples, one per class
    REQUIRE(data.all_train.train_ids.size() == 4);
    TransformerConfig cfg = tiny_config(false, 8, 4);
    ModelWeights w = ModelWeights::init(cfg, 3);
    TrainConfig tc;
    tc.epochs = 500;  // one step per epoch at batch 4
    tc.batch_size = 4;
    tc.learning_rate = 1e-3;
    tc.weight_decay = 0.0;
    tc.seed = 11;
    const TrainRun run = train(w, data.manifest, data.all_train, tc, memory_loader(data));
    double best = run.train_loss.front();
    for (double loss : run.train_loss) best = std::min(best, loss);
    CHECK(best < 1e-2);
    CHECK(evaluate_accuracy(w, data.manifest, data.all_train.train_ids, memory_loader(data)) ==
          1.0);
}

TEST_CASE("divergence during an epoch is reported as a training error with indices") {
    MiniData data = make_texture_data(2, 8, 305);
    TransformerConfig cfg = tiny_config(false);
    ModelWeights w = ModelWeights::init(cfg, 4);
    TrainConfig tc;
    tc.epochs = 1;
    tc.batch_size = 16;
    auto poisoned = [&data](const SampleRecord& rec) {
        Tensor img = data.images.at(rec.sample_id).clone();
        img.mutable_values()[0] = std::numeric_limits<double>::quiet_NaN();
        return img;
    };
    try {
        train(w, data.manifest, data.all_train, tc, poisoned);
        FAIL("expected training error");
    } catch (const Error& e) {
        CHECK(e.category() == ErrorCategory::training);
        CHECK(std::string(e.what()).find("epoch 1") != std::string::npos);
        CHECK(std::string(e.what()).find("batch 1") != std::string::npos);
    }
}

TEST_CASE("checkpoint round-trip reproduces logits bitwise") {
    TransformerConfig cfg = tiny_config(true, 16);
    ModelWeights w = ModelWeights::init(cfg, 21);
    const fs::path path = fs::temp_directory_path() / "histovit_rt.ckpt";
    save_checkpoint(path, w);
    const ModelWeights loaded = load_checkpoint(path);
    SynthSpec spec;
    spec.image_size = 16;
    spec.seed = 9;
    Tensor image = image_to_tensor(render_synthetic_image(spec, Subclass::MC, 200, 0));
    ForwardResult a = forward(image, cfg, w);
    ForwardResult b = forward(image, loaded.config, loaded);
    CHECK(same_bits(a.logits, b.logits));
    CHECK(same_bits(a.dist_logits, b.dist_logits));
    fs::remove(path);
}

TEST_CASE("checkpoint loader rejects corrupted files") {
    TransformerConfig cfg = tiny_config(false, 16);
    ModelWeights w = ModelWeights::init(cfg, 22);
    const fs::path path = fs::temp_directory_path() / "histovit_corrupt.ckpt";
    save_checkpoint(path, w);

    // flip the embed_dim header: every tensor shape now disagrees
    std::ifstream in(path, std::ios::binary);
    std::string content((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    in.close();
    const auto pos = content.find("embed_dim=16");
    REQUIRE(pos != std::string::npos);
    content.replace(pos, 12, "embed_dim=32");
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    out.write(content.data(), static_cast<std::streamsize>(content.size()));
    out.close();
    try {
        load_checkpoint(path);
        FAIL("expected checkpoint error");
    } catch (const Error& e) {
        CHECK(e.category() == ErrorCategory::checkpoint);
    }
    fs::remove(path);
    CHECK_THROWS_AS(load_checkpoint(path), Error);  // missing file
}

TEST_CASE("fine-tune with zero epochs keeps the backbone and re-heads the model") {
    TransformerConfig source_cfg = tiny_config(false, 16, 4);
    ModelWeights source = ModelWeights::init(source_cfg, 31);
    const fs::path path = fs::temp_directory_path() / "histovit_src4.ckpt";
    save_checkpoint(path, source);

    MiniData data = make_texture_data(2, 16, 306);
    TrainConfig tc;
    tc.epochs = 0;
    tc.seed = 1;
    const FineTuneResult result =
        fine_tune(path, 8, data.manifest, data.all_train, tc, memory_loader(data));
    CHECK(result.weights.config.num_classes == 8);

    // backbone tensors match the checkpoint bitwise
    std::unordered_map<std::string, Tensor> src_named;
    for (auto& [name, t] : source.named()) src_named.emplace(name, t);
    for (auto& [name, t] : result.weights.named()) {
        if (name.starts_with("head_") || name.starts_with("dist_head_")) continue;
        CAPTURE(name);
        CHECK(same_bits(t, src_named.at(name)));
    }
    // heads are fresh: new output width 8
    CHECK(result.weights.head_w2.shape() == std::vector<std::size_t>{16, 8});
    CHECK(result.weights.head_b2.size() == 8);
    fs::remove(path);
}

TEST_CASE("freeze_backbone trains only the heads") {
    MiniData data = make_texture_data(2, 8, 307);
    TransformerConfig cfg = tiny_config(false);
    ModelWeights w = ModelWeights::init(cfg, 41);
    std::unordered_map<std::string, Tensor> before;
    for (auto& [name, t] : w.named()) before.emplace(name, t.clone());
    TrainConfig tc;
    tc.epochs = 2;
    tc.batch_size = 8;
    tc.freeze_backbone = true;
    train(w, data.manifest, data.all_train, tc, memory_loader(data));
    bool head_changed = false;
    for (auto& [name, t] : w.named()) {
        if (name.starts_with("head_")) {
            head_changed = head_changed || !same_bits(t, before.at(name));
        } else {
            CAPTURE(name);
            CHECK(same_bits(t, before.at(name)));
        }
    }
    CHECK(head_changed);
}

TEST_CASE("training config files round-trip") {
    TrainConfig cfg;
    cfg.learning_rate = 5e-4;
    cfg.weight_decay = 0.01;
    cfg.batch_size = 4;
    cfg.epochs = 7;
    cfg.seed = 99;
    cfg.distillation.emplace();
    cfg.distillation->mode = DistillationLossConfig::Mode::soft;
    cfg.distillation->lambda = 0.25;
    cfg.distillation->temperature = 4.0;
    const fs::path path = fs::temp_directory_path() / "histovit_train.cfg";
    save_train_config(path, cfg);
    const TrainConfig loaded = load_train_config(path);
    CHECK(loaded.learning_rate == cfg.learning_rate);
    CHECK(loaded.weight_decay == cfg.weight_decay);
    CHECK(loaded.batch_size == cfg.batch_size);
    CHECK(loaded.epochs == cfg.epochs);
    CHECK(loaded.seed == cfg.seed);
    REQUIRE(loaded.distillation.has_value());
    CHECK(loaded.distillation->lambda == 0.25);
    CHECK(loaded.distillation->temperature == 4.0);
    fs::remove(path);

    TrainConfig bad;
    bad.epochs = 0;
    CHECK_THROWS_AS(bad.validate(), Error);
    bad.epochs = 1;
    bad.batch_size = 0;
    CHECK_THROWS_AS(bad.validate(), Error);
}

TEST_CASE("a split that references unknown samples is rejected") {
    MiniData data = make_texture_data(1, 8, 308);
    TransformerConfig cfg = tiny_config(false);
    ModelWeights w = ModelWeights::init(cfg, 51);
    SplitPlan plan = data.all_train;
    plan.train_ids.push_back("ghost");
    TrainConfig tc;
    tc.epochs = 1;
    tc.batch_size = 4;
    CHECK_THROWS_AS(train(w, data.manifest, plan, tc, memory_loader(data)), Error);
}

TEST_CASE("fine-tuning from a related task reaches the target sooner than random init") {
    // source task: same texture family, different rendering seed
    MiniData source = make_texture_data(30, 16, 400);
    MiniData target = make_texture_data(30, 16, 500);
    const SplitPlan target_split = make_split(target.manifest, 0.2, false, 9);

    TransformerConfig cfg = tiny_config(false, 16);
    cfg.embed_dim = 32;
    cfg.num_blocks = 2;
    cfg.mlp_hidden_dim = 64;
    const fs::path src_ckpt = fs::temp_directory_path() / "histovit_transfer_src.ckpt";
    {
        ModelWeights w = ModelWeights::init(cfg, 61);
        TrainConfig tc;
        tc.epochs = 24;
        tc.batch_size = 16;
        tc.learning_rate = 1e-3;
        tc.seed = 1;
        train(w, source.manifest, source.all_train, tc, memory_loader(source), nullptr, src_ckpt);
    }

    const double threshold = 0.7;
    const std::size_t max_epochs = 24;
    auto epochs_to_reach = [&](const TrainRun& run) {
        for (std::size_t e = 0; e < run.test_accuracy.size(); ++e) {
            if (run.test_accuracy[e] >= threshold) return e + 1;
        }
        return max_epochs + 1;
    };

    std::vector<double> pretrained_epochs, fresh_epochs;
    for (std::uint64_t seed : {201, 202, 203}) {
        TrainConfig tc;
        tc.epochs = max_epochs;
        tc.batch_size = 16;
        tc.learning_rate = 1e-3;
        tc.seed = seed;
        const FineTuneResult ft = fine_tune(src_ckpt, 8, target.manifest, target_split, tc,
                                            memory_loader(target));
        pretrained_epochs.push_back(static_cast<double>(epochs_to_reach(ft.run)));

        ModelWeights fresh = ModelWeights::init(cfg, seed);
        const TrainRun run =
            train(fresh, target.manifest, target_split, tc, memory_loader(target));
        fresh_epochs.push_back(static_cast<double>(epochs_to_reach(run)));
    }
    std::sort(pretrained_epochs.begin(), pretrained_epochs.end());
    std::sort(fresh_epochs.begin(), fresh_epochs.end());
    CAPTURE(pretrained_epochs[0]);
    CAPTURE(pretrained_epochs[1]);
    CAPTURE(fresh_epochs[1]);
    CHECK(pretrained_epochs[1] < fresh_epochs[1]);  // medians
    fs::remove(src_ckpt);
}
