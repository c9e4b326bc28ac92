#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "speech2c/config.hpp"
#include "speech2c/pretrain.hpp"
#include "speech2c/search.hpp"

namespace s2c {

// End-to-end command drivers. The CLI subcommands are thin wrappers around
// these, and the acceptance suite drives them directly; both therefore
// produce identical artifacts (manifests, codes, logs, checkpoints, decodes).

// Writes utt_%04d.wav files plus manifest.tsv into out_dir; returns the
// manifest path.
std::string run_synth(const Config& cfg, const std::string& out_dir);

struct QuantizeOutcome {
    double avg_frame_len = 0.0;
    double avg_reduced_len = 0.0;
};

// Fits k-means on the corpus frame features (or assigns with an existing
// model when `assign_model` is non-empty) and writes the per-utterance codes.
QuantizeOutcome run_quantize(const Config& cfg, const std::string& manifest,
                             const std::string& out_codes, const std::string& out_model,
                             const std::string& assign_model = "");

struct PretrainOutcome {
    PretrainMetrics initial;  // corpus eval losses before training (fixed masks)
    PretrainMetrics final;    // same evaluation after the last step
};

// Pre-trains on the corpus, one utterance per step in manifest order.
// `init_encoder_ckpt` copies encoder-side tensors from a prior checkpoint;
// `resume_ckpt` continues a run (fingerprint-checked unless allowed).
PretrainOutcome run_pretrain(const Config& cfg, const std::string& manifest, const std::string& codes,
                             const std::string& out_ckpt, const std::string& log_path,
                             const std::string& init_encoder_ckpt = "",
                             const std::string& resume_ckpt = "",
                             bool allow_fingerprint_mismatch = false);

struct FinetuneOutcome {
    std::int64_t first_zero_wer_step = -1;  // earliest probe with train WER 0; -1 = never
    double final_train_wer = -1.0;          // last probe value; -1 when probing is off
};

FinetuneOutcome run_finetune(const Config& cfg, const std::string& manifest,
                             const std::string& pretrain_ckpt, const std::string& out_ckpt,
                             const std::string& log_path);

// Trains the toy character LM on a manifest's transcripts and saves it as a
// checkpoint (kind=charlm, vocabulary in metadata).
void run_train_lm(const Config& cfg, const std::string& lm_manifest, const CharVocab& vocab,
                  const std::string& out_ckpt);

// Decodes every utterance; output lines are "<utt-id>\t<transcript>". The
// optional n-best file lists rank, combined/att/ctc/lm scores and text.
void run_decode(const Config& cfg, const std::string& manifest, const std::string& ckpt_path,
                const std::string& out_path, const std::string& nbest_path = "",
                const std::string& lm_ckpt = "");

SweepResult run_sweep(const Config& cfg, const std::string& manifest, const std::string& ckpt_path,
                      const std::vector<double>& grid_ctc, const std::vector<double>& grid_lm,
                      const std::string& out_path, const std::string& lm_ckpt = "");

// Emits the code/text correlation report for a quantized corpus.
void run_analyze(const Config& cfg, const std::string& manifest, const std::string& codes,
                 const std::string& out_path);

// Shared helpers.
std::string utt_id_from_path(const std::string& wav_path);
std::vector<std::pair<Waveform, std::string>> load_corpus(const std::string& manifest_path);

}  // namespace s2c
