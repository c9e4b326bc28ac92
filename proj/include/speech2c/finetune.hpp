#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "speech2c/audio.hpp"
#include "speech2c/checkpoint.hpp"
#include "speech2c/model.hpp"
#include "speech2c/tensor.hpp"

namespace s2c {

// Character inventory plus specials. BLANK is reserved for CTC and never
// appears in decoder targets; indices are stable across save/load via
// serialize/deserialize.
struct CharVocab {
    static constexpr int PAD = 0;
    static constexpr int BOS = 1;
    static constexpr int EOS = 2;
    static constexpr int BLANK = 3;

    std::vector<char> chars;  // sorted, unique

    static CharVocab from_transcripts(const std::vector<std::string>& transcripts);
    static CharVocab from_chars(const std::string& chars);
    static CharVocab deserialize(const std::string& s);
    std::string serialize() const;

    int size() const { return 4 + static_cast<int>(chars.size()); }
    int id(char c) const;          // throws index_error for unknown characters
    char char_at(int id) const;    // real characters only
    bool is_char(int id) const { return id >= 4 && id < size(); }
    std::vector<int> encode(const std::string& text) const;
    std::string decode(const std::vector<int>& ids) const;  // specials skipped
};

// Uppercases letters; space and apostrophe pass through.
std::string normalize_transcript(const std::string& text);

struct FinetuneConfig {
    double ctc_weight = 0.5;
    double ce_weight = 0.5;
    double freeze_frac = 0.1;   // encoder fixed while step < freeze_frac * total
    std::int64_t total_steps = 300;
    double peak_lr = 3e-3;
};

// Builds the ASR model from a pre-training checkpoint: conv pre-net, encoder
// stack and decoder stack are copied bit-exactly; the code-specific encoder
// post-net and decoder pre/post-nets are discarded; character pre/post-nets
// and the CTC projection are freshly initialized from `seed`.
ModelParams init_from_pretrained(const Checkpoint& ckpt, const ArchConfig& arch,
                                 const ConvStackConfig& conv, const CharVocab& vocab,
                                 std::uint64_t seed);

// CTC negative log-likelihood over the blank-augmented target lattice, in log
// space, differentiable through the autodiff graph. `log_probs` rows must be
// normalized (log_softmax output).
TensorPtr ctc_loss(const TensorPtr& log_probs, const std::vector<int>& target, int blank);

// Frames required to emit `target` (length plus blanks between repeats).
int ctc_min_frames(const std::vector<int>& target);

// Encoder states -> per-frame log-probs over the vocabulary (CTC head).
TensorPtr ctc_log_probs(const TensorPtr& enc_out, const ModelParams& params);

// Names with these prefixes form the encoder side (frozen early in
// fine-tuning and copied by the continued pre-training path).
bool is_encoder_side_param(const std::string& name);

// Architecture fields as checkpoint metadata, used for compatibility checks.
std::map<std::string, std::string> arch_metadata(const ArchConfig& arch, const ConvStackConfig& conv);

struct FinetuneMetrics {
    double lctc = 0.0;
    double lce = 0.0;
};

// One fine-tuning step on a single utterance: loss = ctc_weight * CTC +
// ce_weight * CE(teacher-forced characters). Encoder-side gradients are
// zeroed while step < freeze_frac * total_steps.
FinetuneMetrics finetune_step(const Waveform& wav, const std::string& transcript, ModelParams& params,
                              const ArchConfig& arch, const ConvStackConfig& conv,
                              const CharVocab& vocab, AdamState& opt, const FinetuneConfig& cfg,
                              std::int64_t step);

// Linear warmup over the first 10% of steps, constant peak through 50%, then
// linear decay to 0.
double lr_schedule_tristage(std::int64_t step, std::int64_t total_steps, double peak);

}  // namespace s2c
