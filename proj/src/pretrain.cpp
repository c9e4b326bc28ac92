#include "speech2c/pretrain.hpp"

#include <algorithm>
#include <cmath>
#include <set>
#include <sstream>

#include "speech2c/errors.hpp"
#include "speech2c/rng.hpp"

namespace s2c {

void MaskSpec::validate() const {
    if (!(mask_prob > 0.0) || !(mask_prob < 1.0)) {
        throw argument_error("MaskSpec: mask_prob must be in (0,1), got " + std::to_string(mask_prob));
    }
    if (span_len < 1) throw argument_error("MaskSpec: span_len must be >= 1");
}

SpanMask sample_span_mask(int T, const MaskSpec& spec) {
    spec.validate();
    if (T < 1) throw argument_error("sample_span_mask: T must be >= 1");
    // ceil with a small nudge so exact products (0.08 * 100) stay exact
    const int n_starts = std::max(1, static_cast<int>(std::ceil(spec.mask_prob * T - 1e-9)));
    Rng rng(spec.seed);
    SpanMask out;
    out.starts = rng.sample_without_replacement(T, std::min(n_starts, T));
    std::sort(out.starts.begin(), out.starts.end());
    std::set<int> masked;
    for (int s : out.starts) {
        const int end = std::min(s + spec.span_len, T);
        for (int t = s; t < end; ++t) masked.insert(t);
    }
    out.positions.assign(masked.begin(), masked.end());
    return out;
}

TensorPtr apply_mask(const TensorPtr& x, const std::vector<int>& mask, const TensorPtr& mask_emb) {
    if (mask.empty()) return x;
    return replace_rows(x, mask, mask_emb);
}

PretrainBatch build_pretrain_batch(const Waveform& w, const CodeSequence& frame_codes,
                                   const ModelParams& params, const ConvStackConfig& conv,
                                   const MaskSpec& mask_spec, bool reduce, const ArchConfig& arch) {
    std::vector<TensorPtr> kernels;
    for (std::size_t i = 0; i < conv.layers.size(); ++i) {
        kernels.push_back(params.at("prenet.conv" + std::to_string(i) + ".w"));
    }
    auto feats = feature_encode(w, conv, kernels);
    const int T = feats->shape[0];
    if (static_cast<int>(frame_codes.codes.size()) != T) {
        throw dimension_error("build_pretrain_batch: " + std::to_string(frame_codes.codes.size()) +
                              " codes for " + std::to_string(T) + " frames");
    }
    for (int c : frame_codes.codes) {
        if (c < 0 || c >= arch.C) {
            throw index_error("build_pretrain_batch: code " + std::to_string(c) + " out of range [0," +
                              std::to_string(arch.C) + ")");
        }
    }
    PretrainBatch batch;
    batch.x = project_features(feats, params);
    batch.mask = sample_span_mask(T, mask_spec).positions;
    batch.x_masked = apply_mask(batch.x, batch.mask, params.at("encoder.mask_emb"));
    batch.frame_codes = frame_codes.codes;
    batch.decoder_targets = reduce ? reduce_codes(frame_codes).codes : frame_codes.codes;
    return batch;
}

TensorPtr mlm_loss(const TensorPtr& h, const std::vector<int>& frame_codes,
                   const std::vector<int>& mask, const EncoderPostNet& post) {
    const int T = h->shape[0];
    if (static_cast<int>(frame_codes.size()) != T) {
        throw dimension_error("mlm_loss: " + std::to_string(frame_codes.size()) + " codes for " +
                              std::to_string(T) + " states");
    }
    constexpr int kIgnore = -1;
    std::vector<int> targets(static_cast<std::size_t>(T), kIgnore);
    for (int t : mask) {
        if (t < 0 || t >= T) {
            throw index_error("mlm_loss: masked timestep " + std::to_string(t) + " out of range [0," +
                              std::to_string(T) + ")");
        }
        targets[static_cast<std::size_t>(t)] = frame_codes[static_cast<std::size_t>(t)];
    }
    auto log_probs = log_softmax(code_logits(h, post));
    return cross_entropy(log_probs, targets, kIgnore);
}

TensorPtr reconstruction_loss(const TensorPtr& decoder_logits, const std::vector<int>& targets) {
    if (decoder_logits->shape.size() != 2 ||
        decoder_logits->shape[0] != static_cast<int>(targets.size())) {
        throw contract_error("reconstruction_loss: " + std::to_string(targets.size()) +
                             " targets for logits " + shape_str(decoder_logits->shape));
    }
    return cross_entropy(log_softmax(decoder_logits), targets);
}

std::vector<double> per_position_nll(const TensorPtr& logits, const std::vector<int>& targets) {
    NoGradGuard ng;
    auto lp = log_softmax(logits);
    const int v = lp->shape[1];
    std::vector<double> out(targets.size());
    for (std::size_t i = 0; i < targets.size(); ++i) {
        out[i] = -lp->data[i * static_cast<std::size_t>(v) + static_cast<std::size_t>(targets[i])];
    }
    return out;
}

namespace {

std::pair<TensorPtr, TensorPtr> pretrain_losses(const PretrainBatch& batch, const ModelParams& params,
                                                const ArchConfig& arch) {
    auto h = encoder_forward(batch.x_masked, params, arch);
    auto lmlm = mlm_loss(h, batch.frame_codes, batch.mask, encoder_post_net(params));
    std::vector<int> dec_in;
    dec_in.reserve(batch.decoder_targets.size() + 1);
    dec_in.push_back(code_bos(arch.C));
    dec_in.insert(dec_in.end(), batch.decoder_targets.begin(), batch.decoder_targets.end());
    std::vector<int> dec_tgt = batch.decoder_targets;
    dec_tgt.push_back(code_eos(arch.C));
    auto logits = decoder_forward(dec_in, h, params, arch);
    auto lmle = reconstruction_loss(logits, dec_tgt);
    return {lmlm, lmle};
}

}  // namespace

PretrainMetrics pretrain_step(const PretrainBatch& batch, ModelParams& params, const ArchConfig& arch,
                              AdamState& opt, const PretrainWeights& weights, double lr,
                              std::int64_t step) {
    if (weights.lambda_mlm < 0.0 || weights.lambda_mle < 0.0 ||
        (weights.lambda_mlm == 0.0 && weights.lambda_mle == 0.0)) {
        throw argument_error("pretrain_step: weights must be >= 0 and not both zero");
    }
    if (!grad_enabled()) throw contract_error("pretrain_step: gradient recording is disabled");
    auto [lmlm, lmle] = pretrain_losses(batch, params, arch);
    auto total = add(scale(lmlm, weights.lambda_mlm), scale(lmle, weights.lambda_mle));
    PretrainMetrics metrics{lmlm->value(), lmle->value()};
    if (!std::isfinite(total->value())) {
        std::ostringstream os;
        os << "pretrain_step: non-finite loss at step " << step << " (lmlm=" << metrics.lmlm
           << ", lmle=" << metrics.lmle << ")";
        throw std::runtime_error(os.str());
    }
    params.zero_grads();
    backward(total);
    adam_step(params.all(), opt, lr);
    return metrics;
}

PretrainMetrics eval_pretrain_losses(const PretrainBatch& batch, const ModelParams& params,
                                     const ArchConfig& arch) {
    NoGradGuard ng;
    auto [lmlm, lmle] = pretrain_losses(batch, params, arch);
    return {lmlm->value(), lmle->value()};
}

double lr_schedule_pretrain(std::int64_t step, std::int64_t total_steps, double peak) {
    if (total_steps < 1) throw argument_error("lr_schedule_pretrain: total_steps must be >= 1");
    if (step < 0 || step > total_steps) {
        throw argument_error("lr_schedule_pretrain: step " + std::to_string(step) + " outside [0," +
                             std::to_string(total_steps) + "]");
    }
    const double warmup = 0.08 * static_cast<double>(total_steps);
    const double s = static_cast<double>(step);
    if (s <= warmup) return peak * s / warmup;
    return peak * (static_cast<double>(total_steps) - s) / (static_cast<double>(total_steps) - warmup);
}

}  // namespace s2c
