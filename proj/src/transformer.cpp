#include "histovit/transformer.hpp"

#include <cmath>

#include "histovit/error.hpp"
#include "histovit/rng.hpp"

namespace histovit {

namespace {

constexpr double kLayerNormEps = 1e-5;
constexpr double kInitStd = 0.02;

Tensor apply_gelu(const Tensor& x, const TransformerConfig& cfg, Tape* tape) {
    return cfg.gelu_tanh_approx ? gelu_tanh(x, tape) : gelu(x, tape);
}

Tensor apply_head(const Tensor& state, const Tensor& w1, const Tensor& b1, const Tensor& w2,
                  const Tensor& b2, const TransformerConfig& cfg, Tape* tape) {
    if (cfg.head == TransformerConfig::HeadKind::single_linear) {
        return add_rowvec(matmul(state, w1, tape), b1, tape);
    }
    Tensor h = add_rowvec(matmul(state, w1, tape), b1, tape);
    h = apply_gelu(h, cfg, tape);
    return add_rowvec(matmul(h, w2, tape), b2, tape);
}

}  // namespace

void TransformerConfig::validate() const {
    if (image_size == 0 || patch_size == 0 || image_size % patch_size != 0)
        throw Error(ErrorCategory::config,
                    "image_size " + std::to_string(image_size) + " not divisible by patch_size " +
                        std::to_string(patch_size));
    if (channels == 0) throw Error(ErrorCategory::config, "channels must be positive");
    if (embed_dim == 0 || num_heads == 0 || embed_dim % num_heads != 0)
        throw Error(ErrorCategory::config, "embed_dim " + std::to_string(embed_dim) +
                                               " not divisible by num_heads " +
                                               std::to_string(num_heads));
    if (num_blocks == 0) throw Error(ErrorCategory::config, "num_blocks must be positive");
    if (mlp_hidden_dim == 0) throw Error(ErrorCategory::config, "mlp_hidden_dim must be positive");
    if (num_classes < 2) throw Error(ErrorCategory::config, "num_classes must be at least 2");
}

ModelWeights ModelWeights::zeros(const TransformerConfig& cfg) {
    cfg.validate();
    const std::size_t pd = cfg.patch_dim();
    const std::size_t e = cfg.embed_dim;
    const std::size_t m = cfg.mlp_hidden_dim;
    const std::size_t c = cfg.num_classes;
    const std::size_t hh = cfg.resolved_head_hidden();

    ModelWeights w;
    w.config = cfg;
    w.patch_proj = Tensor::zeros({pd, e});
    w.patch_bias = Tensor::zeros({e});
    w.class_token = Tensor::zeros({1, e});
    if (cfg.use_distillation_token) w.dist_token = Tensor::zeros({1, e});
    w.pos_table = Tensor::zeros({cfg.seq_len(), e});
    w.blocks.resize(cfg.num_blocks);
    for (BlockWeights& blk : w.blocks) {
        blk.ln1_gain = Tensor::zeros({e});
        blk.ln1_bias = Tensor::zeros({e});
        blk.wq = Tensor::zeros({e, e});
        blk.bq = Tensor::zeros({e});
        blk.wk = Tensor::zeros({e, e});
        blk.bk = Tensor::zeros({e});
        blk.wv = Tensor::zeros({e, e});
        blk.bv = Tensor::zeros({e});
        blk.wo = Tensor::zeros({e, e});
        blk.bo = Tensor::zeros({e});
        blk.ln2_gain = Tensor::zeros({e});
        blk.ln2_bias = Tensor::zeros({e});
        blk.ffn_w1 = Tensor::zeros({e, m});
        blk.ffn_b1 = Tensor::zeros({m});
        blk.ffn_w2 = Tensor::zeros({m, e});
        blk.ffn_b2 = Tensor::zeros({e});
    }
    w.final_gain = Tensor::zeros({e});
    w.final_bias = Tensor::zeros({e});
    const bool two_layer = cfg.head == TransformerConfig::HeadKind::two_layer_gelu;
    if (two_layer) {
        w.head_w1 = Tensor::zeros({e, hh});
        w.head_b1 = Tensor::zeros({hh});
        w.head_w2 = Tensor::zeros({hh, c});
        w.head_b2 = Tensor::zeros({c});
    } else {
        w.head_w1 = Tensor::zeros({e, c});
        w.head_b1 = Tensor::zeros({c});
    }
    if (cfg.use_distillation_token) {
        if (two_layer) {
            w.dist_head_w1 = Tensor::zeros({e, hh});
            w.dist_head_b1 = Tensor::zeros({hh});
            w.dist_head_w2 = Tensor::zeros({hh, c});
            w.dist_head_b2 = Tensor::zeros({c});
        } else {
            w.dist_head_w1 = Tensor::zeros({e, c});
            w.dist_head_b1 = Tensor::zeros({c});
        }
    }
    return w;
}

namespace {

enum class InitKind { trunc_normal, zero, one };

void fill(Tensor& t, InitKind kind, rng::Stream& stream) {
    auto v = t.mutable_values();
    switch (kind) {
        case InitKind::zero:
            break;  // already zero
        case InitKind::one:
            for (double& x : v) x = 1.0;
            break;
        case InitKind::trunc_normal:
            for (double& x : v) x = stream.truncated_normal(kInitStd);
            break;
    }
}

}  // namespace

ModelWeights ModelWeights::init(const TransformerConfig& cfg, std::uint64_t seed) {
    ModelWeights w = zeros(cfg);
    rng::Stream stream(rng::derive(seed, "model-init"));
    fill(w.patch_proj, InitKind::trunc_normal, stream);
    fill(w.patch_bias, InitKind::zero, stream);
    fill(w.class_token, InitKind::trunc_normal, stream);
    if (cfg.use_distillation_token) fill(w.dist_token, InitKind::trunc_normal, stream);
    fill(w.pos_table, InitKind::trunc_normal, stream);
    for (BlockWeights& blk : w.blocks) {
        fill(blk.ln1_gain, InitKind::one, stream);
        fill(blk.ln1_bias, InitKind::zero, stream);
        fill(blk.wq, InitKind::trunc_normal, stream);
        fill(blk.bq, InitKind::zero, stream);
        fill(blk.wk, InitKind::trunc_normal, stream);
        fill(blk.bk, InitKind::zero, stream);
        fill(blk.wv, InitKind::trunc_normal, stream);
        fill(blk.bv, InitKind::zero, stream);
        fill(blk.wo, InitKind::trunc_normal, stream);
        fill(blk.bo, InitKind::zero, stream);
        fill(blk.ln2_gain, InitKind::one, stream);
        fill(blk.ln2_bias, InitKind::zero, stream);
        fill(blk.ffn_w1, InitKind::trunc_normal, stream);
        fill(blk.ffn_b1, InitKind::zero, stream);
        fill(blk.ffn_w2, InitKind::trunc_normal, stream);
        fill(blk.ffn_b2, InitKind::zero, stream);
    }
    fill(w.final_gain, InitKind::one, stream);
    fill(w.final_bias, InitKind::zero, stream);
    fill(w.head_w1, InitKind::trunc_normal, stream);
    fill(w.head_b1, InitKind::zero, stream);
    if (w.head_w2.defined()) {
        fill(w.head_w2, InitKind::trunc_normal, stream);
        fill(w.head_b2, InitKind::zero, stream);
    }
    if (cfg.use_distillation_token) {
        fill(w.dist_head_w1, InitKind::trunc_normal, stream);
        fill(w.dist_head_b1, InitKind::zero, stream);
        if (w.dist_head_w2.defined()) {
            fill(w.dist_head_w2, InitKind::trunc_normal, stream);
            fill(w.dist_head_b2, InitKind::zero, stream);
        }
    }
    return w;
}

std::vector<std::pair<std::string, Tensor>> ModelWeights::named() const {
    std::vector<std::pair<std::string, Tensor>> out;
    out.emplace_back("patch_proj", patch_proj);
    out.emplace_back("patch_bias", patch_bias);
    out.emplace_back("class_token", class_token);
    if (config.use_distillation_token) out.emplace_back("dist_token", dist_token);
    out.emplace_back("pos_table", pos_table);
    for (std::size_t b = 0; b < blocks.size(); ++b) {
        const std::string prefix = "block" + std::to_string(b) + ".";
        const BlockWeights& blk = blocks[b];
        out.emplace_back(prefix + "ln1_gain", blk.ln1_gain);
        out.emplace_back(prefix + "ln1_bias", blk.ln1_bias);
        out.emplace_back(prefix + "wq", blk.wq);
        out.emplace_back(prefix + "bq", blk.bq);
        out.emplace_back(prefix + "wk", blk.wk);
        out.emplace_back(prefix + "bk", blk.bk);
        out.emplace_back(prefix + "wv", blk.wv);
        out.emplace_back(prefix + "bv", blk.bv);
        out.emplace_back(prefix + "wo", blk.wo);
        out.emplace_back(prefix + "bo", blk.bo);
        out.emplace_back(prefix + "ln2_gain", blk.ln2_gain);
        out.emplace_back(prefix + "ln2_bias", blk.ln2_bias);
        out.emplace_back(prefix + "ffn_w1", blk.ffn_w1);
        out.emplace_back(prefix + "ffn_b1", blk.ffn_b1);
        out.emplace_back(prefix + "ffn_w2", blk.ffn_w2);
        out.emplace_back(prefix + "ffn_b2", blk.ffn_b2);
    }
    out.emplace_back("final_gain", final_gain);
    out.emplace_back("final_bias", final_bias);
    for (const auto& [name, tensor] : head_named()) out.emplace_back(name, tensor);
    return out;
}

std::vector<std::pair<std::string, Tensor>> ModelWeights::head_named() const {
    std::vector<std::pair<std::string, Tensor>> out;
    out.emplace_back("head_w1", head_w1);
    out.emplace_back("head_b1", head_b1);
    if (head_w2.defined()) {
        out.emplace_back("head_w2", head_w2);
        out.emplace_back("head_b2", head_b2);
    }
    if (config.use_distillation_token) {
        out.emplace_back("dist_head_w1", dist_head_w1);
        out.emplace_back("dist_head_b1", dist_head_b1);
        if (dist_head_w2.defined()) {
            out.emplace_back("dist_head_w2", dist_head_w2);
            out.emplace_back("dist_head_b2", dist_head_b2);
        }
    }
    return out;
}

std::size_t ModelWeights::parameter_count() const {
    std::size_t total = 0;
    for (const auto& [name, tensor] : named()) total += tensor.size();
    return total;
}

std::size_t ModelWeights::expected_parameter_count(const TransformerConfig& cfg) {
    const std::size_t e = cfg.embed_dim;
    const std::size_t m = cfg.mlp_hidden_dim;
    const std::size_t c = cfg.num_classes;
    const std::size_t hh = cfg.resolved_head_hidden();
    std::size_t total = cfg.patch_dim() * e + e;  // patch projection
    total += e;                                   // class token
    if (cfg.use_distillation_token) total += e;   // distillation token
    total += cfg.seq_len() * e;                   // positional table
    const std::size_t per_block = 2 * e + 4 * (e * e + e) + 2 * e + (e * m + m) + (m * e + e);
    total += cfg.num_blocks * per_block;
    total += 2 * e;  // final layer norm
    const std::size_t head = cfg.head == TransformerConfig::HeadKind::two_layer_gelu
                                 ? (e * hh + hh + hh * c + c)
                                 : (e * c + c);
    total += head;
    if (cfg.use_distillation_token) total += head;
    return total;
}

void ModelWeights::set_requires_grad(bool value) {
    for (auto& [name, tensor] : named()) {
        Tensor t = tensor;
        t.set_requires_grad(value);
    }
}

Tensor patch_embed(const Tensor& image, const TransformerConfig& cfg, const ModelWeights& weights,
                   Tape* tape) {
    if (image.rank() != 3 || image.dim(0) != cfg.image_size || image.dim(1) != cfg.image_size ||
        image.dim(2) != cfg.channels)
        throw Error(ErrorCategory::config,
                    "image does not match config: expected " + std::to_string(cfg.image_size) +
                        "x" + std::to_string(cfg.image_size) + "x" + std::to_string(cfg.channels));
    Tensor patches = im2patches(image, cfg.patch_size, tape);
    return add_rowvec(matmul(patches, weights.patch_proj, tape), weights.patch_bias, tape);
}

Tensor assemble_sequence(const Tensor& patches, const TransformerConfig& cfg,
                         const ModelWeights& weights, Tape* tape) {
    if (patches.rank() != 2 || patches.dim(0) != cfg.num_patches() ||
        patches.dim(1) != cfg.embed_dim)
        throw Error(ErrorCategory::shape,
                    "patch matrix does not match config: expected " +
                        std::to_string(cfg.num_patches()) + "x" + std::to_string(cfg.embed_dim));
    std::vector<Tensor> parts;
    parts.push_back(weights.class_token);
    if (cfg.use_distillation_token) parts.push_back(weights.dist_token);
    parts.push_back(patches);
    Tensor seq = concat_rows(parts, tape);
    return add(seq, weights.pos_table, tape);
}

Tensor encoder_block(const Tensor& x, const BlockWeights& block, const TransformerConfig& cfg,
                     Tape* tape, AttentionRecord* attention) {
    const std::size_t dh = cfg.head_dim();
    const double attn_scale = 1.0 / std::sqrt(static_cast<double>(dh));

    Tensor h = layer_norm(x, block.ln1_gain, block.ln1_bias, kLayerNormEps, tape);
    Tensor q = add_rowvec(matmul(h, block.wq, tape), block.bq, tape);
    Tensor k = add_rowvec(matmul(h, block.wk, tape), block.bk, tape);
    Tensor v = add_rowvec(matmul(h, block.wv, tape), block.bv, tape);

    std::vector<Tensor> head_outputs;
    std::vector<std::vector<double>> head_attn;
    head_outputs.reserve(cfg.num_heads);
    for (std::size_t hd = 0; hd < cfg.num_heads; ++hd) {
        const std::size_t c0 = hd * dh, c1 = (hd + 1) * dh;
        Tensor qh = cols(q, c0, c1, tape);
        Tensor kh = cols(k, c0, c1, tape);
        Tensor vh = cols(v, c0, c1, tape);
        Tensor scores = scale(matmul(qh, transpose(kh, tape), tape), attn_scale, tape);
        Tensor attn = softmax_rows(scores, tape);
        if (attention) {
            head_attn.emplace_back(attn.values().begin(), attn.values().end());
        }
        head_outputs.push_back(matmul(attn, vh, tape));
    }
    Tensor merged = concat_cols(head_outputs, tape);
    Tensor attended = add_rowvec(matmul(merged, block.wo, tape), block.bo, tape);
    Tensor x1 = add(x, attended, tape);

    Tensor h2 = layer_norm(x1, block.ln2_gain, block.ln2_bias, kLayerNormEps, tape);
    Tensor f = add_rowvec(matmul(h2, block.ffn_w1, tape), block.ffn_b1, tape);
    f = apply_gelu(f, cfg, tape);
    f = add_rowvec(matmul(f, block.ffn_w2, tape), block.ffn_b2, tape);
    Tensor out = add(x1, f, tape);

    if (attention) attention->blocks.push_back(std::move(head_attn));
    return out;
}

ForwardResult forward(const Tensor& image, const TransformerConfig& cfg,
                      const ModelWeights& weights, Tape* tape, AttentionRecord* attention) {
    cfg.validate();
    if (!(weights.config == cfg))
        throw Error(ErrorCategory::config, "weights were built for a different config");
    if (attention) {
        attention->tokens = cfg.seq_len();
        attention->heads = cfg.num_heads;
        attention->blocks.clear();
    }
    Tensor patches = patch_embed(image, cfg, weights, tape);
    Tensor seq = assemble_sequence(patches, cfg, weights, tape);
    for (const BlockWeights& block : weights.blocks) {
        seq = encoder_block(seq, block, cfg, tape, attention);
    }
    Tensor final_seq = layer_norm(seq, weights.final_gain, weights.final_bias, kLayerNormEps, tape);

    ForwardResult result;
    Tensor cls_state = row(final_seq, 0, tape);
    result.logits = apply_head(cls_state, weights.head_w1, weights.head_b1, weights.head_w2,
                               weights.head_b2, cfg, tape);
    if (cfg.use_distillation_token) {
        Tensor dist_state = row(final_seq, 1, tape);
        result.dist_logits = apply_head(dist_state, weights.dist_head_w1, weights.dist_head_b1,
                                        weights.dist_head_w2, weights.dist_head_b2, cfg, tape);
    }
    return result;
}

}  // namespace histovit
