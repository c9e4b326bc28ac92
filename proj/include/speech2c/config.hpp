#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "speech2c/audio.hpp"
#include "speech2c/model.hpp"
#include "speech2c/pretrain.hpp"

namespace s2c {

// Flat run configuration. Values resolve as defaults <- file <- overrides;
// unknown keys are rejected. Paths are CLI flags, not config keys, so the
// fingerprint identifies the experiment rather than its location on disk.
struct Config {
    std::uint64_t seed = 1;

    // architecture
    int enc_layers = 2;
    int dec_layers = 2;
    int d_model = 64;
    int d_ffn = 128;
    int n_heads = 4;
    int rel_pos_max_distance = 16;
    int code_embed_dim = 64;

    // conv pre-net
    std::string conv_preset = "desk";  // desk | paper
    int conv_channels = 32;

    // quantizer
    int codebook_size = 32;  // C
    int kmeans_iters = 50;
    double kmeans_tol = 1e-7;
    int feature_bands = 16;

    // masking
    double mask_prob = 0.08;
    int span_len = 10;

    // pre-training
    std::int64_t pretrain_steps = 200;
    double pretrain_peak_lr = 3e-3;
    double lambda_mlm = 1.0;
    double lambda_mle = 1.0;
    std::string codes_mode = "reduced";  // reduced | repeated

    // fine-tuning
    std::int64_t finetune_steps = 300;
    double finetune_peak_lr = 3e-3;
    double ctc_weight = 0.5;
    double ce_weight = 0.5;
    double freeze_frac = 0.1;
    std::int64_t finetune_eval_every = 25;  // 0 disables in-training WER probes

    // synthetic corpus
    int synth_utts = 20;
    double synth_dur_min = 0.5;
    double synth_dur_max = 1.0;
    std::string synth_vocab = "abcdefgh";

    // decoding
    int beam = 4;
    double lambda_ctc = 0.3;
    double lambda_lm = 0.0;
    int max_decode_len = 64;

    // character LM
    int lm_layers = 2;
    int lm_d_model = 32;
    int lm_d_ffn = 64;
    int lm_heads = 2;
    std::int64_t lm_steps = 300;
    double lm_lr = 3e-3;

    ArchConfig arch() const;
    ConvStackConfig conv() const;
    MaskSpec mask_spec() const;  // seed split from the master seed
    void validate() const;

    // Canonical "key = value" rendering, sorted by key.
    std::string canonical_text() const;
    // FNV-1a hash of the canonical text.
    std::uint64_t fingerprint() const;
};

// Parses "key = value" lines ('#' comments, blank lines allowed) and applies
// them over the defaults. `overrides` are additional "key=value" strings that
// win over the file.
Config parse_config(const std::string& path, const std::vector<std::string>& overrides);
// Same, but with no file (defaults + overrides only).
Config config_from_overrides(const std::vector<std::string>& overrides);

}  // namespace s2c
