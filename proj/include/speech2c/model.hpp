#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "speech2c/audio.hpp"
#include "speech2c/tensor.hpp"

namespace s2c {

// Transformer geometry. Paper-scale: 12 encoder / 6 decoder layers,
// d_model 768, inner 3072, 12 heads; desk-scale shrinks everything.
struct ArchConfig {
    int enc_layers = 2;
    int dec_layers = 2;
    int d_model = 64;
    int d_ffn = 128;
    int n_heads = 4;
    int rel_pos_max_distance = 16;
    int C = 32;              // code vocabulary (quantizer classes)
    int code_embed_dim = 64;

    static ArchConfig paper();
    static ArchConfig desk();
    void validate() const;
};

// Code-decoder specials appended after the C codes.
inline int code_vocab_size(int C) { return C + 3; }
inline int code_bos(int C) { return C; }
inline int code_eos(int C) { return C + 1; }
inline int code_pad(int C) { return C + 2; }

// Named parameter collection. Iteration is name-ordered everywhere, which
// keeps optimizer updates and checkpoints deterministic.
struct ModelParams {
    std::map<std::string, TensorPtr> tensors;

    TensorPtr at(const std::string& name) const;
    bool has(const std::string& name) const { return tensors.count(name) > 0; }
    TensorPtr add(const std::string& name, TensorPtr t);
    std::vector<TensorPtr> all() const;                    // name order
    std::vector<std::string> names() const;                // sorted
    void zero_grads();
};

// Attention parameter bundle (views into a ModelParams).
struct AttentionParams {
    TensorPtr wq, bq, wk, bk, wv, bv, wo, bo;
    TensorPtr rel;  // nullptr = no relative bias (cross-attention)
    int n_heads = 1;
    int rel_max_distance = 0;
};

// Cosine-similarity code head: p(c) = softmax_c(sim(h W, e_c) / tau).
struct EncoderPostNet {
    TensorPtr proj;         // [d_model, code_embed_dim]
    TensorPtr code_embeds;  // [C, code_embed_dim]
    double tau = 0.1;
};

std::vector<std::uint8_t> full_mask(int q_len, int k_len);
std::vector<std::uint8_t> causal_mask(int n);

// Per-head scaled dot-product attention with optional relative-offset bias
// added to the logits; fully-masked rows output zeros.
TensorPtr mha_forward(const TensorPtr& queries, const TensorPtr& keys, const TensorPtr& values,
                      const std::vector<std::uint8_t>& mask, const AttentionParams& p);

// Conv features [T, conv_ch] -> model width [T, d_model].
TensorPtr project_features(const TensorPtr& feats, const ModelParams& params);

// Pre-norm self-attention + FFN blocks; empty stacks return the input
// unchanged (no final norm), so a zero-layer encoder is the identity.
TensorPtr encoder_forward(const TensorPtr& x_masked, const ModelParams& params, const ArchConfig& arch);

EncoderPostNet encoder_post_net(const ModelParams& params);
// Cosine similarities between projected states and code embeddings, [T, C].
TensorPtr code_cosine_sims(const TensorPtr& h, const EncoderPostNet& post);
// sims / tau, the logits of the code distribution.
TensorPtr code_logits(const TensorPtr& h, const EncoderPostNet& post);
// Probability vector over C for one hidden state [d_model].
TensorPtr code_distribution(const TensorPtr& h_t, const EncoderPostNet& post);

// Causal decoder with cross-attention; `tokens_in` starts with BOS. Returns
// one logit row per input position over the decoder vocabulary.
TensorPtr decoder_forward(const std::vector<int>& tokens_in, const TensorPtr& enc_out,
                          const ModelParams& params, const ArchConfig& arch);

// Decoder-only variant (no cross-attention) for the character LM.
TensorPtr lm_forward(const std::vector<int>& tokens_in, const ModelParams& params, const ArchConfig& arch);

// ---- model construction ----

// Pre-training model: conv pre-net, feature projection + mask embedding,
// encoder blocks, cosine code head, code-decoder with pre/post-nets.
ModelParams build_pretrain_params(const ArchConfig& arch, const ConvStackConfig& conv,
                                  std::uint64_t seed);

// Fine-tuning model: same trunk but character pre/post-nets and a CTC
// projection instead of the code-specific heads.
ModelParams build_finetune_params(const ArchConfig& arch, const ConvStackConfig& conv, int vocab_size,
                                  std::uint64_t seed);

// Character LM: embedding + causal blocks + output head.
ModelParams build_lm_params(const ArchConfig& arch, int vocab_size, std::uint64_t seed);

}  // namespace s2c
