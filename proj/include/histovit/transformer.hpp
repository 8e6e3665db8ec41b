#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "histovit/tensor.hpp"

namespace histovit {

// Architecture hyperparameters shared by the ViT and DeiT variants. The DeiT
// variant is the same encoder with use_distillation_token set, which adds the
// extra token, its positional row, and a second prediction head.
struct TransformerConfig {
    std::size_t image_size = 32;
    std::size_t patch_size = 4;
    std::size_t channels = 3;
    std::size_t embed_dim = 32;
    std::size_t num_heads = 2;
    std::size_t num_blocks = 2;
    std::size_t mlp_hidden_dim = 64;
    std::size_t num_classes = 8;
    bool use_distillation_token = false;

    enum class HeadKind { two_layer_gelu, single_linear };
    HeadKind head = HeadKind::two_layer_gelu;
    std::size_t head_hidden_dim = 0;  // 0 means embed_dim
    bool gelu_tanh_approx = false;

    void validate() const;

    std::size_t patches_per_side() const { return image_size / patch_size; }
    std::size_t num_patches() const { return patches_per_side() * patches_per_side(); }
    std::size_t num_special_tokens() const { return use_distillation_token ? 2 : 1; }
    std::size_t seq_len() const { return num_patches() + num_special_tokens(); }
    std::size_t head_dim() const { return embed_dim / num_heads; }
    std::size_t patch_dim() const { return patch_size * patch_size * channels; }
    std::size_t resolved_head_hidden() const { return head_hidden_dim ? head_hidden_dim : embed_dim; }

    bool operator==(const TransformerConfig&) const = default;
};

struct BlockWeights {
    Tensor ln1_gain, ln1_bias;
    Tensor wq, bq, wk, bk, wv, bv, wo, bo;
    Tensor ln2_gain, ln2_bias;
    Tensor ffn_w1, ffn_b1, ffn_w2, ffn_b2;
};

// Every learned parameter of one model. Shapes are a pure function of the
// config; named() gives the canonical ordering used by the optimizer, the
// checkpoint format and the gradient checks.
struct ModelWeights {
    TransformerConfig config;

    Tensor patch_proj, patch_bias;
    Tensor class_token, dist_token;
    Tensor pos_table;
    std::vector<BlockWeights> blocks;
    Tensor final_gain, final_bias;
    Tensor head_w1, head_b1, head_w2, head_b2;
    Tensor dist_head_w1, dist_head_b1, dist_head_w2, dist_head_b2;

    static ModelWeights init(const TransformerConfig& cfg, std::uint64_t seed);
    static ModelWeights zeros(const TransformerConfig& cfg);

    std::vector<std::pair<std::string, Tensor>> named() const;
    // Parameters belonging to the classification head(s) only (fine-tune swap).
    std::vector<std::pair<std::string, Tensor>> head_named() const;
    std::size_t parameter_count() const;
    static std::size_t expected_parameter_count(const TransformerConfig& cfg);

    void set_requires_grad(bool value);
};

// Per-block, per-head attention matrices captured during a forward pass.
// Each matrix is seq_len x seq_len, rows summing to 1.
struct AttentionRecord {
    std::size_t tokens = 0;
    std::size_t heads = 0;
    std::vector<std::vector<std::vector<double>>> blocks;  // [block][head] -> T*T row-major

    bool empty() const { return blocks.empty(); }
};

struct ForwardResult {
    Tensor logits;       // [1 x num_classes]
    Tensor dist_logits;  // defined only when the distillation token is enabled
};

// Projects the non-overlapping patches of an [S x S x C] image. Rows are
// patches in row-major grid order.
Tensor patch_embed(const Tensor& image, const TransformerConfig& cfg, const ModelWeights& weights,
                   Tape* tape = nullptr);

// Prepends the class token (and distillation token when configured) and adds
// positional embeddings. Token order: class, [distillation], patches.
Tensor assemble_sequence(const Tensor& patches, const TransformerConfig& cfg,
                         const ModelWeights& weights, Tape* tape = nullptr);

// One pre-norm encoder block: x + MSA(LN1(x)) followed by x + FFN(LN2(x)).
Tensor encoder_block(const Tensor& x, const BlockWeights& block, const TransformerConfig& cfg,
                     Tape* tape = nullptr, AttentionRecord* attention = nullptr);

ForwardResult forward(const Tensor& image, const TransformerConfig& cfg,
                      const ModelWeights& weights, Tape* tape = nullptr,
                      AttentionRecord* attention = nullptr);

}  // namespace histovit
