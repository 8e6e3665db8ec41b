#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <cstring>

#include "histovit/error.hpp"
#include "histovit/transformer.hpp"
#include "testutil.hpp"

using namespace histovit;
using testutil::grad_check;
using testutil::random_tensor;

namespace {

TransformerConfig toy_config(bool deit) {
    TransformerConfig cfg;
    cfg.image_size = 16;
    cfg.patch_size = 4;
    cfg.channels = 3;
    cfg.embed_dim = 16;
    cfg.num_heads = 2;
    cfg.num_blocks = 2;
    cfg.mlp_hidden_dim = 32;
    cfg.num_classes = 8;
    cfg.use_distillation_token = deit;
    return cfg;
}

Tensor random_image(const TransformerConfig& cfg, std::uint64_t seed) {
    rng::Stream s(rng::derive(seed, "image"));
    return random_tensor({cfg.image_size, cfg.image_size, cfg.channels}, s, 0.0, 1.0);
}

}  // namespace

TEST_CASE("patch_embed produces the expected patch counts") {
    TransformerConfig big;
    big.image_size = 224;
    big.patch_size = 16;
    big.embed_dim = 8;
    big.num_heads = 2;
    big.mlp_hidden_dim = 8;
    ModelWeights w = ModelWeights::zeros(big);
    Tensor image = Tensor::zeros({224, 224, 3});
    CHECK(patch_embed(image, big, w).shape() == std::vector<std::size_t>{196, 8});

    TransformerConfig small = toy_config(false);
    small.image_size = 32;
    ModelWeights ws = ModelWeights::zeros(small);
    Tensor image2 = Tensor::zeros({32, 32, 3});
    CHECK(patch_embed(image2, small, ws).shape() == std::vector<std::size_t>{64, 16});

    CHECK_THROWS_AS(patch_embed(Tensor::zeros({16, 16, 3}), small, ws), Error);
}

TEST_CASE("patch_embed with identity projection reproduces the flattened patch") {
    TransformerConfig cfg;
    cfg.image_size = 4;
    cfg.patch_size = 2;
    cfg.channels = 1;
    cfg.embed_dim = 4;  // == patch_dim, square projection
    cfg.num_heads = 1;
    cfg.num_blocks = 1;
    cfg.mlp_hidden_dim = 4;
    ModelWeights w = ModelWeights::zeros(cfg);
    auto proj = w.patch_proj.mutable_values();
    for (std::size_t i = 0; i < 4; ++i) proj[i * 4 + i] = 1.0;

    std::vector<double> img(16);
    for (std::size_t i = 0; i < 16; ++i) img[i] = static_cast<double>(i) * 0.1;
    Tensor image = Tensor::from_vector({4, 4, 1}, img);
    Tensor patches = patch_embed(image, cfg, w);
    // top-left patch flattened row-major: pixels (0,0), (0,1), (1,0), (1,1)
    CHECK(patches.at(0, 0) == doctest::Approx(0.0));
    CHECK(patches.at(0, 1) == doctest::Approx(0.1));
    CHECK(patches.at(0, 2) == doctest::Approx(0.4));
    CHECK(patches.at(0, 3) == doctest::Approx(0.5));
}

TEST_CASE("assemble_sequence token counts and zero positional table") {
    TransformerConfig vit = toy_config(false);
    TransformerConfig deit = toy_config(true);
    CHECK(vit.seq_len() == 17);   // 16 patches + class token
    CHECK(deit.seq_len() == 18);  // + distillation token

    TransformerConfig big;
    big.image_size = 224;
    big.patch_size = 16;
    big.embed_dim = 8;
    big.num_heads = 1;
    big.mlp_hidden_dim = 8;
    CHECK(big.seq_len() == 197);
    big.use_distillation_token = true;
    CHECK(big.seq_len() == 198);

    ModelWeights w = ModelWeights::init(vit, 3);
    std::fill(w.pos_table.mutable_values().begin(), w.pos_table.mutable_values().end(), 0.0);
    rng::Stream s(rng::derive(17, "patches"));
    Tensor patches = random_tensor({vit.num_patches(), vit.embed_dim}, s);
    Tensor seq = assemble_sequence(patches, vit, w);
    REQUIRE(seq.shape() == std::vector<std::size_t>{17, 16});
    for (std::size_t p = 0; p < vit.num_patches(); ++p) {
        for (std::size_t d = 0; d < vit.embed_dim; ++d) {
            CHECK(seq.at(p + 1, d) == patches.at(p, d));
        }
    }
    for (std::size_t d = 0; d < vit.embed_dim; ++d) {
        CHECK(seq.at(0, d) == w.class_token.at(0, d));
    }
}

TEST_CASE("encoder_block with all-zero weights is the identity") {
    TransformerConfig cfg = toy_config(false);
    ModelWeights w = ModelWeights::zeros(cfg);
    rng::Stream s(rng::derive(18, "block-input"));
    Tensor x = random_tensor({cfg.seq_len(), cfg.embed_dim}, s);
    Tensor y = encoder_block(x, w.blocks[0], cfg);
    for (std::size_t i = 0; i < x.size(); ++i) CHECK(y.at(i) == x.at(i));
}

TEST_CASE("attention rows sum to one for every block and head") {
    TransformerConfig cfg = toy_config(true);
    ModelWeights w = ModelWeights::init(cfg, 5);
    AttentionRecord record;
    forward(random_image(cfg, 21), cfg, w, nullptr, &record);
    REQUIRE(record.blocks.size() == cfg.num_blocks);
    for (const auto& heads : record.blocks) {
        REQUIRE(heads.size() == cfg.num_heads);
        for (const auto& attn : heads) {
            REQUIRE(attn.size() == cfg.seq_len() * cfg.seq_len());
            for (std::size_t r = 0; r < cfg.seq_len(); ++r) {
                double total = 0.0;
                for (std::size_t c = 0; c < cfg.seq_len(); ++c) {
                    const double v = attn[r * cfg.seq_len() + c];
                    CHECK(v >= 0.0);
                    total += v;
                }
                CHECK(std::fabs(total - 1.0) <= 1e-9);
            }
        }
    }
}

// Independent scalar walk-through of one single-head block at T=2, D=2.
TEST_CASE("encoder_block matches a hand-stepped scalar computation") {
    TransformerConfig cfg;
    cfg.image_size = 4;
    cfg.patch_size = 4;
    cfg.channels = 1;
    cfg.embed_dim = 2;
    cfg.num_heads = 1;
    cfg.num_blocks = 1;
    cfg.mlp_hidden_dim = 4;
    ModelWeights w = ModelWeights::zeros(cfg);
    BlockWeights& blk = w.blocks[0];

    const double x_in[2][2] = {{0.5, -1.0}, {1.5, 2.0}};
    const double wq[2][2] = {{0.2, -0.1}, {0.4, 0.3}};
    const double bq[2] = {0.01, -0.02};
    const double wk[2][2] = {{-0.3, 0.5}, {0.1, 0.2}};
    const double bk[2] = {0.03, 0.0};
    const double wv[2][2] = {{0.6, -0.4}, {-0.2, 0.1}};
    const double bv[2] = {0.0, 0.05};
    const double wo[2][2] = {{1.0, 0.5}, {-0.5, 0.25}};
    const double bo[2] = {0.02, -0.01};
    const double w1[2][4] = {{0.1, 0.2, -0.1, 0.3}, {0.0, -0.2, 0.4, 0.1}};
    const double b1[4] = {0.01, 0.02, 0.03, 0.04};
    const double w2[4][2] = {{0.2, -0.1}, {0.1, 0.0}, {-0.3, 0.2}, {0.05, 0.15}};
    const double b2[2] = {-0.01, 0.02};
    const double eps = 1e-5;

    blk.ln1_gain = Tensor::from_vector({2}, {1.0, 1.0});
    blk.ln2_gain = Tensor::from_vector({2}, {1.0, 1.0});
    blk.wq = Tensor::from_vector({2, 2}, {wq[0][0], wq[0][1], wq[1][0], wq[1][1]});
    blk.bq = Tensor::from_vector({2}, {bq[0], bq[1]});
    blk.wk = Tensor::from_vector({2, 2}, {wk[0][0], wk[0][1], wk[1][0], wk[1][1]});
    blk.bk = Tensor::from_vector({2}, {bk[0], bk[1]});
    blk.wv = Tensor::from_vector({2, 2}, {wv[0][0], wv[0][1], wv[1][0], wv[1][1]});
    blk.bv = Tensor::from_vector({2}, {bv[0], bv[1]});
    blk.wo = Tensor::from_vector({2, 2}, {wo[0][0], wo[0][1], wo[1][0], wo[1][1]});
    blk.bo = Tensor::from_vector({2}, {bo[0], bo[1]});
    blk.ffn_w1 = Tensor::from_vector({2, 4}, {w1[0][0], w1[0][1], w1[0][2], w1[0][3], w1[1][0],
                                              w1[1][1], w1[1][2], w1[1][3]});
    blk.ffn_b1 = Tensor::from_vector({4}, {b1[0], b1[1], b1[2], b1[3]});
    blk.ffn_w2 = Tensor::from_vector({4, 2}, {w2[0][0], w2[0][1], w2[1][0], w2[1][1], w2[2][0],
                                              w2[2][1], w2[3][0], w2[3][1]});
    blk.ffn_b2 = Tensor::from_vector({2}, {b2[0], b2[1]});

    Tensor x = Tensor::from_vector({2, 2}, {x_in[0][0], x_in[0][1], x_in[1][0], x_in[1][1]});
    Tensor got = encoder_block(x, blk, cfg);

    // -- independent scalar recomputation --
    auto norm2 = [&](const double r[2], double out[2]) {
        const double mean = (r[0] + r[1]) / 2.0;
        const double var = ((r[0] - mean) * (r[0] - mean) + (r[1] - mean) * (r[1] - mean)) / 2.0;
        const double inv = 1.0 / std::sqrt(var + eps);
        out[0] = (r[0] - mean) * inv;
        out[1] = (r[1] - mean) * inv;
    };
    double h[2][2];
    norm2(x_in[0], h[0]);
    norm2(x_in[1], h[1]);
    double q[2][2], k[2][2], v[2][2];
    for (int t = 0; t < 2; ++t) {
        for (int d = 0; d < 2; ++d) {
            q[t][d] = h[t][0] * wq[0][d] + h[t][1] * wq[1][d] + bq[d];
            k[t][d] = h[t][0] * wk[0][d] + h[t][1] * wk[1][d] + bk[d];
            v[t][d] = h[t][0] * wv[0][d] + h[t][1] * wv[1][d] + bv[d];
        }
    }
    const double inv_sqrt_d = 1.0 / std::sqrt(2.0);
    double attn[2][2], ctx[2][2];
    for (int t = 0; t < 2; ++t) {
        double s0 = (q[t][0] * k[0][0] + q[t][1] * k[0][1]) * inv_sqrt_d;
        double s1 = (q[t][0] * k[1][0] + q[t][1] * k[1][1]) * inv_sqrt_d;
        const double mx = std::max(s0, s1);
        const double e0 = std::exp(s0 - mx), e1 = std::exp(s1 - mx);
        attn[t][0] = e0 / (e0 + e1);
        attn[t][1] = e1 / (e0 + e1);
        for (int d = 0; d < 2; ++d) ctx[t][d] = attn[t][0] * v[0][d] + attn[t][1] * v[1][d];
    }
    double x1[2][2];
    for (int t = 0; t < 2; ++t) {
        for (int d = 0; d < 2; ++d) {
            x1[t][d] = x_in[t][d] + ctx[t][0] * wo[0][d] + ctx[t][1] * wo[1][d] + bo[d];
        }
    }
    double h2[2][2];
    norm2(x1[0], h2[0]);
    norm2(x1[1], h2[1]);
    auto gelu_exact = [](double z) { return 0.5 * z * (1.0 + std::erf(z / std::sqrt(2.0))); };
    double expected[2][2];
    for (int t = 0; t < 2; ++t) {
        double f[4];
        for (int j = 0; j < 4; ++j) {
            f[j] = gelu_exact(h2[t][0] * w1[0][j] + h2[t][1] * w1[1][j] + b1[j]);
        }
        for (int d = 0; d < 2; ++d) {
            double acc = b2[d];
            for (int j = 0; j < 4; ++j) acc += f[j] * w2[j][d];
            expected[t][d] = x1[t][d] + acc;
        }
    }
    for (int t = 0; t < 2; ++t) {
        for (int d = 0; d < 2; ++d) {
            CHECK(got.at(static_cast<std::size_t>(t), static_cast<std::size_t>(d)) ==
                  doctest::Approx(expected[t][d]).epsilon(1e-12));
        }
    }
}

TEST_CASE("forward is deterministic and sized by num_classes") {
    TransformerConfig cfg = toy_config(false);
    ModelWeights w = ModelWeights::init(cfg, 9);
    Tensor image = random_image(cfg, 22);
    ForwardResult a = forward(image, cfg, w);
    ForwardResult b = forward(image, cfg, w);
    REQUIRE(a.logits.size() == 8);
    CHECK(std::memcmp(a.logits.values().data(), b.logits.values().data(),
                      8 * sizeof(double)) == 0);
    CHECK_FALSE(a.dist_logits.defined());

    TransformerConfig dcfg = toy_config(true);
    ModelWeights dw = ModelWeights::init(dcfg, 9);
    ForwardResult d = forward(random_image(dcfg, 23), dcfg, dw);
    CHECK(d.logits.size() == 8);
    REQUIRE(d.dist_logits.defined());
    CHECK(d.dist_logits.size() == 8);
}

TEST_CASE("parameter count matches the closed form for three configs") {
    TransformerConfig vit = toy_config(false);
    TransformerConfig deit = toy_config(true);
    TransformerConfig single = toy_config(false);
    single.head = TransformerConfig::HeadKind::single_linear;
    single.embed_dim = 24;
    single.num_heads = 3;
    for (const TransformerConfig& cfg : {vit, deit, single}) {
        ModelWeights w = ModelWeights::init(cfg, 1);
        CHECK(w.parameter_count() == ModelWeights::expected_parameter_count(cfg));
    }
    // Enabling the distillation token adds its token vector, its positional
    // row and one extra head.
    const std::size_t head_params =
        vit.embed_dim * vit.resolved_head_hidden() + vit.resolved_head_hidden() +
        vit.resolved_head_hidden() * vit.num_classes + vit.num_classes;
    CHECK(ModelWeights::expected_parameter_count(deit) -
              ModelWeights::expected_parameter_count(vit) ==
          2 * vit.embed_dim + head_params);
    CHECK(deit.seq_len() == vit.seq_len() + 1);
}

TEST_CASE("with a zero positional table, swapping patches leaves logits unchanged") {
    TransformerConfig cfg = toy_config(false);
    ModelWeights w = ModelWeights::init(cfg, 31);
    Tensor image = random_image(cfg, 33);

    // Swap two full patch blocks in image space (grid cells 0 and 2 of row 0).
    Tensor swapped = image.clone();
    {
        auto sv = swapped.mutable_values();
        auto iv = image.values();
        const std::size_t ps = cfg.patch_size, ch = cfg.channels, width = cfg.image_size;
        for (std::size_t y = 0; y < ps; ++y) {
            for (std::size_t x = 0; x < ps; ++x) {
                for (std::size_t c = 0; c < ch; ++c) {
                    const std::size_t a = (y * width + x) * ch + c;
                    const std::size_t b = (y * width + (x + 2 * ps)) * ch + c;
                    sv[a] = iv[b];
                    sv[b] = iv[a];
                }
            }
        }
    }

    ForwardResult base = forward(image, cfg, w);
    ForwardResult with_pos = forward(swapped, cfg, w);
    bool any_diff = false;
    for (std::size_t i = 0; i < 8; ++i) {
        if (std::fabs(base.logits.at(i) - with_pos.logits.at(i)) > 1e-9) any_diff = true;
    }
    CHECK(any_diff);  // positional embeddings make patch order matter

    std::fill(w.pos_table.mutable_values().begin(), w.pos_table.mutable_values().end(), 0.0);
    ForwardResult no_pos_a = forward(image, cfg, w);
    ForwardResult no_pos_b = forward(swapped, cfg, w);
    for (std::size_t i = 0; i < 8; ++i) {
        CHECK(no_pos_a.logits.at(i) == doctest::Approx(no_pos_b.logits.at(i)).epsilon(1e-10));
    }
}

TEST_CASE("full gradient check through toy ViT and DeiT models") {
    for (bool deit : {false, true}) {
        CAPTURE(deit);
        TransformerConfig cfg = toy_config(deit);
        ModelWeights w = ModelWeights::init(cfg, 41);
        Tensor image = random_image(cfg, 42);
        std::vector<Tensor> params;
        for (auto& [name, tensor] : w.named()) params.push_back(tensor);

        std::vector<double> upstream(8);
        rng::Stream s(rng::derive(43, "upstream"));
        for (double& v : upstream) v = s.uniform(-1.0, 1.0);

        auto fn = [&](Tape* tape) {
            ForwardResult out = forward(image, cfg, w, tape);
            Tensor loss = weighted_sum(out.logits, upstream, tape);
            if (cfg.use_distillation_token) {
                loss = add(loss, weighted_sum(out.dist_logits, upstream, tape), tape);
            }
            return loss;
        };
        const auto result = grad_check(fn, params);
        CHECK(result.max_rel_err < 1e-4);
    }
}
