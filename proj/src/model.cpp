#include "speech2c/model.hpp"

#include <cmath>

#include "speech2c/errors.hpp"
#include "speech2c/rng.hpp"

namespace s2c {

ArchConfig ArchConfig::paper() {
    ArchConfig a;
    a.enc_layers = 12;
    a.dec_layers = 6;
    a.d_model = 768;
    a.d_ffn = 3072;
    a.n_heads = 12;
    a.rel_pos_max_distance = 16;
    a.C = 500;
    a.code_embed_dim = 256;
    return a;
}

ArchConfig ArchConfig::desk() { return ArchConfig{}; }

void ArchConfig::validate() const {
    if (enc_layers < 0 || dec_layers < 0) throw argument_error("ArchConfig: negative layer count");
    if (d_model < 1 || d_ffn < 1 || n_heads < 1 || C < 2 || code_embed_dim < 1) {
        throw argument_error("ArchConfig: non-positive dimension");
    }
    if (d_model % n_heads != 0) {
        throw argument_error("ArchConfig: d_model " + std::to_string(d_model) +
                             " not divisible by n_heads " + std::to_string(n_heads));
    }
    if (rel_pos_max_distance < 1) throw argument_error("ArchConfig: rel_pos_max_distance must be >= 1");
}

TensorPtr ModelParams::at(const std::string& name) const {
    auto it = tensors.find(name);
    if (it == tensors.end()) throw contract_error("ModelParams: no tensor named '" + name + "'");
    return it->second;
}

TensorPtr ModelParams::add(const std::string& name, TensorPtr t) {
    if (tensors.count(name)) throw contract_error("ModelParams: duplicate tensor '" + name + "'");
    tensors.emplace(name, t);
    return t;
}

std::vector<TensorPtr> ModelParams::all() const {
    std::vector<TensorPtr> out;
    out.reserve(tensors.size());
    for (const auto& [name, t] : tensors) out.push_back(t);
    return out;
}

std::vector<std::string> ModelParams::names() const {
    std::vector<std::string> out;
    out.reserve(tensors.size());
    for (const auto& [name, t] : tensors) out.push_back(name);
    return out;
}

void ModelParams::zero_grads() {
    for (auto& [name, t] : tensors) t->zero_grad();
}

std::vector<std::uint8_t> full_mask(int q_len, int k_len) {
    return std::vector<std::uint8_t>(static_cast<std::size_t>(q_len) * k_len, 1);
}

std::vector<std::uint8_t> causal_mask(int n) {
    std::vector<std::uint8_t> m(static_cast<std::size_t>(n) * n, 0);
    for (int i = 0; i < n; ++i)
        for (int j = 0; j <= i; ++j) m[static_cast<std::size_t>(i) * n + j] = 1;
    return m;
}

// ---------------------------------------------------------------------------
// attention
// ---------------------------------------------------------------------------

TensorPtr mha_forward(const TensorPtr& queries, const TensorPtr& keys, const TensorPtr& values,
                      const std::vector<std::uint8_t>& mask, const AttentionParams& p) {
    const int tq = queries->shape[0];
    const int tk = keys->shape[0];
    const int d = p.wq->shape[0];
    if (static_cast<int>(mask.size()) != tq * tk) {
        throw dimension_error("mha_forward: mask of " + std::to_string(mask.size()) + " entries for " +
                              std::to_string(tq) + "x" + std::to_string(tk));
    }
    const int hd = d / p.n_heads;
    auto q = add_rows(matmul(queries, p.wq), p.bq);
    auto k = add_rows(matmul(keys, p.wk), p.bk);
    auto v = add_rows(matmul(values, p.wv), p.bv);
    TensorPtr bias;
    if (p.rel) bias = rel_pos_bias(p.rel, tq, tk, p.rel_max_distance);
    const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(hd));
    std::vector<TensorPtr> heads;
    heads.reserve(static_cast<std::size_t>(p.n_heads));
    for (int h = 0; h < p.n_heads; ++h) {
        auto qh = slice_cols(q, h * hd, (h + 1) * hd);
        auto kh = slice_cols(k, h * hd, (h + 1) * hd);
        auto vh = slice_cols(v, h * hd, (h + 1) * hd);
        auto scores = scale(matmul(qh, transpose2d(kh)), inv_sqrt);
        if (bias) scores = add(scores, slice_flat(bias, h * tq * tk, tq * tk, {tq, tk}));
        auto attn = masked_softmax(scores, mask);
        heads.push_back(matmul(attn, vh));
    }
    return add_rows(matmul(concat_cols(heads), p.wo), p.bo);
}

namespace {

AttentionParams attn_params(const ModelParams& params, const std::string& prefix, const ArchConfig& arch,
                            bool with_rel) {
    AttentionParams p;
    p.wq = params.at(prefix + ".wq");
    p.bq = params.at(prefix + ".bq");
    p.wk = params.at(prefix + ".wk");
    p.bk = params.at(prefix + ".bk");
    p.wv = params.at(prefix + ".wv");
    p.bv = params.at(prefix + ".bv");
    p.wo = params.at(prefix + ".wo");
    p.bo = params.at(prefix + ".bo");
    p.n_heads = arch.n_heads;
    if (with_rel) {
        p.rel = params.at(prefix + ".rel");
        p.rel_max_distance = arch.rel_pos_max_distance;
    }
    return p;
}

TensorPtr apply_ln(const TensorPtr& x, const ModelParams& params, const std::string& prefix) {
    return layer_norm(x, params.at(prefix + ".g"), params.at(prefix + ".b"), 1e-5);
}

TensorPtr apply_ffn(const TensorPtr& x, const ModelParams& params, const std::string& prefix) {
    auto h = gelu(add_rows(matmul(x, params.at(prefix + ".w1")), params.at(prefix + ".b1")));
    return add_rows(matmul(h, params.at(prefix + ".w2")), params.at(prefix + ".b2"));
}

}  // namespace

TensorPtr project_features(const TensorPtr& feats, const ModelParams& params) {
    return add_rows(matmul(feats, params.at("encoder.feat_proj.w")), params.at("encoder.feat_proj.b"));
}

TensorPtr encoder_forward(const TensorPtr& x_masked, const ModelParams& params, const ArchConfig& arch) {
    arch.validate();
    if (x_masked->shape.size() != 2 || x_masked->shape[1] != arch.d_model) {
        throw dimension_error("encoder_forward: input " + shape_str(x_masked->shape) + " for d_model " +
                              std::to_string(arch.d_model));
    }
    auto x = x_masked;
    const int t = x->shape[0];
    const auto mask = full_mask(t, t);
    for (int l = 0; l < arch.enc_layers; ++l) {
        const std::string blk = "encoder.block" + std::to_string(l);
        auto y = apply_ln(x, params, blk + ".ln1");
        x = add(x, mha_forward(y, y, y, mask, attn_params(params, blk + ".attn", arch, true)));
        x = add(x, apply_ffn(apply_ln(x, params, blk + ".ln2"), params, blk + ".ffn"));
    }
    if (arch.enc_layers > 0) x = apply_ln(x, params, "encoder.final_ln");
    return x;
}

EncoderPostNet encoder_post_net(const ModelParams& params) {
    return EncoderPostNet{params.at("enc_post.proj"), params.at("enc_post.codes"), 0.1};
}

TensorPtr code_cosine_sims(const TensorPtr& h, const EncoderPostNet& post) {
    auto projected = row_l2_normalize(matmul(h, post.proj));
    auto codes = row_l2_normalize(post.code_embeds);
    return matmul(projected, transpose2d(codes));
}

TensorPtr code_logits(const TensorPtr& h, const EncoderPostNet& post) {
    return scale(code_cosine_sims(h, post), 1.0 / post.tau);
}

TensorPtr code_distribution(const TensorPtr& h_t, const EncoderPostNet& post) {
    if (h_t->shape.size() != 1) {
        throw dimension_error("code_distribution: expected a vector, got " + shape_str(h_t->shape));
    }
    auto row = slice_flat(h_t, 0, h_t->numel(), {1, h_t->numel()});
    return softmax(code_cosine_sims(row, post), post.tau);
}

namespace {

TensorPtr decoder_stack(const TensorPtr& x0, const TensorPtr& enc_out, const ModelParams& params,
                        const ArchConfig& arch, const std::string& scope) {
    auto x = x0;
    const int n = x->shape[0];
    const auto self_mask = causal_mask(n);
    for (int l = 0; l < arch.dec_layers; ++l) {
        const std::string blk = scope + ".block" + std::to_string(l);
        auto y = apply_ln(x, params, blk + ".ln1");
        x = add(x, mha_forward(y, y, y, self_mask, attn_params(params, blk + ".self_attn", arch, true)));
        if (enc_out) {
            const auto cross_mask = full_mask(n, enc_out->shape[0]);
            auto q = apply_ln(x, params, blk + ".ln2");
            x = add(x, mha_forward(q, enc_out, enc_out, cross_mask,
                                   attn_params(params, blk + ".cross_attn", arch, false)));
        }
        x = add(x, apply_ffn(apply_ln(x, params, blk + ".ln3"), params, blk + ".ffn"));
    }
    if (arch.dec_layers > 0) x = apply_ln(x, params, scope + ".final_ln");
    return x;
}

}  // namespace

TensorPtr decoder_forward(const std::vector<int>& tokens_in, const TensorPtr& enc_out,
                          const ModelParams& params, const ArchConfig& arch) {
    arch.validate();
    if (tokens_in.empty()) throw argument_error("decoder_forward: empty input");
    auto x = embedding(params.at("decoder.embed"), tokens_in);
    auto h = decoder_stack(x, enc_out, params, arch, "decoder");
    return add_rows(matmul(h, params.at("dec_post.w")), params.at("dec_post.b"));
}

TensorPtr lm_forward(const std::vector<int>& tokens_in, const ModelParams& params, const ArchConfig& arch) {
    if (tokens_in.empty()) throw argument_error("lm_forward: empty input");
    auto x = embedding(params.at("lm.embed"), tokens_in);
    auto h = decoder_stack(x, nullptr, params, arch, "lm");
    return add_rows(matmul(h, params.at("lm.out.w")), params.at("lm.out.b"));
}

// ---------------------------------------------------------------------------
// construction
// ---------------------------------------------------------------------------

namespace {

class ParamBuilder {
  public:
    ParamBuilder(ModelParams& params, std::uint64_t seed) : params_(params), rng_(seed) {}

    void normal(const std::string& name, std::vector<int> shape, double stddev) {
        auto t = Tensor::zeros(std::move(shape), true);
        for (auto& v : t->data) v = rng_.normal(0.0, stddev);
        params_.add(name, t);
    }

    // Glorot scaling for [fan_in, fan_out] matrices keeps activations usable
    // at desk-scale widths.
    void xavier(const std::string& name, int fan_in, int fan_out) {
        normal(name, {fan_in, fan_out}, std::sqrt(2.0 / (fan_in + fan_out)));
    }

    void constant(const std::string& name, std::vector<int> shape, double value) {
        params_.add(name, Tensor::full(std::move(shape), value, true));
    }

    void attention(const std::string& prefix, const ArchConfig& arch, bool with_rel) {
        const int d = arch.d_model;
        for (const char* w : {"wq", "wk", "wv", "wo"}) xavier(prefix + "." + w, d, d);
        for (const char* b : {"bq", "bk", "bv", "bo"}) constant(prefix + "." + b, {d}, 0.0);
        if (with_rel) normal(prefix + ".rel", {arch.n_heads, 2 * arch.rel_pos_max_distance + 1}, 0.02);
    }

    void layer_norm_params(const std::string& prefix, int d) {
        constant(prefix + ".g", {d}, 1.0);
        constant(prefix + ".b", {d}, 0.0);
    }

    void ffn(const std::string& prefix, const ArchConfig& arch) {
        xavier(prefix + ".w1", arch.d_model, arch.d_ffn);
        constant(prefix + ".b1", {arch.d_ffn}, 0.0);
        xavier(prefix + ".w2", arch.d_ffn, arch.d_model);
        constant(prefix + ".b2", {arch.d_model}, 0.0);
    }

    void encoder_block(const std::string& blk, const ArchConfig& arch) {
        layer_norm_params(blk + ".ln1", arch.d_model);
        attention(blk + ".attn", arch, true);
        layer_norm_params(blk + ".ln2", arch.d_model);
        ffn(blk + ".ffn", arch);
    }

    void decoder_block(const std::string& blk, const ArchConfig& arch, bool with_cross) {
        layer_norm_params(blk + ".ln1", arch.d_model);
        attention(blk + ".self_attn", arch, true);
        if (with_cross) {
            layer_norm_params(blk + ".ln2", arch.d_model);
            attention(blk + ".cross_attn", arch, false);
        }
        layer_norm_params(blk + ".ln3", arch.d_model);
        ffn(blk + ".ffn", arch);
    }

    void conv_stack(const ConvStackConfig& conv) {
        int c_in = 1;
        for (std::size_t i = 0; i < conv.layers.size(); ++i) {
            const auto& l = conv.layers[i];
            const double stddev = 1.0 / std::sqrt(static_cast<double>(c_in * l.kernel));
            normal("prenet.conv" + std::to_string(i) + ".w", {l.channels, c_in, l.kernel}, stddev);
            c_in = l.channels;
        }
    }

  private:
    ModelParams& params_;
    Rng rng_;
};

}  // namespace

ModelParams build_pretrain_params(const ArchConfig& arch, const ConvStackConfig& conv,
                                  std::uint64_t seed) {
    arch.validate();
    conv.validate();
    ModelParams params;
    ParamBuilder b(params, derive_seed(seed, "init.pretrain"));
    const double emb_std = 1.0 / std::sqrt(static_cast<double>(arch.d_model));
    b.conv_stack(conv);
    const int conv_ch = conv.layers.back().channels;
    b.xavier("encoder.feat_proj.w", conv_ch, arch.d_model);
    b.constant("encoder.feat_proj.b", {arch.d_model}, 0.0);
    b.normal("encoder.mask_emb", {arch.d_model}, emb_std);
    for (int l = 0; l < arch.enc_layers; ++l) b.encoder_block("encoder.block" + std::to_string(l), arch);
    if (arch.enc_layers > 0) b.layer_norm_params("encoder.final_ln", arch.d_model);
    b.xavier("enc_post.proj", arch.d_model, arch.code_embed_dim);
    b.normal("enc_post.codes", {arch.C, arch.code_embed_dim}, 0.1);
    const int v = code_vocab_size(arch.C);
    b.normal("decoder.embed", {v, arch.d_model}, emb_std);
    for (int l = 0; l < arch.dec_layers; ++l)
        b.decoder_block("decoder.block" + std::to_string(l), arch, true);
    if (arch.dec_layers > 0) b.layer_norm_params("decoder.final_ln", arch.d_model);
    b.xavier("dec_post.w", arch.d_model, v);
    b.constant("dec_post.b", {v}, 0.0);
    return params;
}

ModelParams build_finetune_params(const ArchConfig& arch, const ConvStackConfig& conv, int vocab_size,
                                  std::uint64_t seed) {
    arch.validate();
    conv.validate();
    if (vocab_size < 2) throw argument_error("build_finetune_params: vocab_size must be >= 2");
    ModelParams params;
    ParamBuilder b(params, derive_seed(seed, "init.finetune"));
    const double emb_std = 1.0 / std::sqrt(static_cast<double>(arch.d_model));
    b.conv_stack(conv);
    const int conv_ch = conv.layers.back().channels;
    b.xavier("encoder.feat_proj.w", conv_ch, arch.d_model);
    b.constant("encoder.feat_proj.b", {arch.d_model}, 0.0);
    b.normal("encoder.mask_emb", {arch.d_model}, emb_std);
    for (int l = 0; l < arch.enc_layers; ++l) b.encoder_block("encoder.block" + std::to_string(l), arch);
    if (arch.enc_layers > 0) b.layer_norm_params("encoder.final_ln", arch.d_model);
    b.normal("decoder.embed", {vocab_size, arch.d_model}, emb_std);
    for (int l = 0; l < arch.dec_layers; ++l)
        b.decoder_block("decoder.block" + std::to_string(l), arch, true);
    if (arch.dec_layers > 0) b.layer_norm_params("decoder.final_ln", arch.d_model);
    b.xavier("dec_post.w", arch.d_model, vocab_size);
    b.constant("dec_post.b", {vocab_size}, 0.0);
    b.xavier("ctc.w", arch.d_model, vocab_size);
    b.constant("ctc.b", {vocab_size}, 0.0);
    return params;
}

ModelParams build_lm_params(const ArchConfig& arch, int vocab_size, std::uint64_t seed) {
    arch.validate();
    if (vocab_size < 2) throw argument_error("build_lm_params: vocab_size must be >= 2");
    ModelParams params;
    ParamBuilder b(params, derive_seed(seed, "init.lm"));
    b.normal("lm.embed", {vocab_size, arch.d_model}, 1.0 / std::sqrt(static_cast<double>(arch.d_model)));
    for (int l = 0; l < arch.dec_layers; ++l)
        b.decoder_block("lm.block" + std::to_string(l), arch, false);
    if (arch.dec_layers > 0) b.layer_norm_params("lm.final_ln", arch.d_model);
    b.xavier("lm.out.w", arch.d_model, vocab_size);
    b.constant("lm.out.b", {vocab_size}, 0.0);
    return params;
}

}  // namespace s2c
