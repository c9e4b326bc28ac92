#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "speech2c/audio.hpp"
#include "speech2c/model.hpp"
#include "speech2c/quantizer.hpp"
#include "speech2c/tensor.hpp"

namespace s2c {

// Span masking: a fraction of timesteps become span starts, each masking
// `span_len` steps (clipped at the end); overlapping spans union.
struct MaskSpec {
    double mask_prob = 0.08;
    int span_len = 10;
    std::uint64_t seed = 0;

    void validate() const;
};

struct SpanMask {
    std::vector<int> starts;     // sorted span start indices
    std::vector<int> positions;  // sorted union of the spans (the set M)
};

// ceil(mask_prob*T) start indices drawn without replacement, each masking
// [s, min(s+span_len, T)); deterministic given spec.seed.
SpanMask sample_span_mask(int T, const MaskSpec& spec);

// Masked-feature builder: rows in `mask` replaced by the learned embedding.
TensorPtr apply_mask(const TensorPtr& x, const std::vector<int>& mask, const TensorPtr& mask_emb);

struct PretrainBatch {
    TensorPtr x;                       // [T, d_model] projected features
    TensorPtr x_masked;                // x with masked rows swapped for the mask embedding
    std::vector<int> mask;             // sorted masked timesteps
    std::vector<int> frame_codes;      // z, length T
    std::vector<int> decoder_targets;  // reduced codes (or frame codes in repeated mode)
};

// Runs the conv pre-net + projection and assembles masking and code targets.
// The tensors stay attached to the parameter graph so a subsequent backward
// reaches the pre-net.
PretrainBatch build_pretrain_batch(const Waveform& w, const CodeSequence& frame_codes,
                                   const ModelParams& params, const ConvStackConfig& conv,
                                   const MaskSpec& mask_spec, bool reduce, const ArchConfig& arch);

// Mean over masked timesteps of -log p(z_t); empty mask yields 0 with zero
// gradient. Unmasked timesteps contribute nothing to value or gradient.
TensorPtr mlm_loss(const TensorPtr& h, const std::vector<int>& frame_codes,
                   const std::vector<int>& mask, const EncoderPostNet& post);

// Mean token-level cross-entropy of teacher-forced decoder logits against
// targets (reduced codes + EOS).
TensorPtr reconstruction_loss(const TensorPtr& decoder_logits, const std::vector<int>& targets);

// Forward-only per-position -log p values (diagnostics and tests).
std::vector<double> per_position_nll(const TensorPtr& logits, const std::vector<int>& targets);

struct PretrainWeights {
    double lambda_mlm = 1.0;
    double lambda_mle = 1.0;
};

struct PretrainMetrics {
    double lmlm = 0.0;
    double lmle = 0.0;
};

// One optimization step: total = lambda_mlm*L_mlm + lambda_mle*L_mle, one
// backward, one Adam update. Aborts with diagnostics on non-finite loss.
PretrainMetrics pretrain_step(const PretrainBatch& batch, ModelParams& params, const ArchConfig& arch,
                              AdamState& opt, const PretrainWeights& weights, double lr,
                              std::int64_t step);

// Forward-only loss evaluation (no update), e.g. for before/after comparisons.
PretrainMetrics eval_pretrain_losses(const PretrainBatch& batch, const ModelParams& params,
                                     const ArchConfig& arch);

// Linear warmup to `peak` over the first 8% of steps, then linear decay to 0.
double lr_schedule_pretrain(std::int64_t step, std::int64_t total_steps, double peak);

}  // namespace s2c
