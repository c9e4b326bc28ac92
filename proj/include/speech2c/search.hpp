#pragma once

#include <cstdint>
#include <memory>
#include <string>
#include <vector>

#include "speech2c/audio.hpp"
#include "speech2c/finetune.hpp"
#include "speech2c/model.hpp"

namespace s2c {

// Plain row-major matrix for inference-side math (no graph).
struct LogProbMatrix {
    int rows = 0;
    int cols = 0;
    std::vector<double> values;

    double at(int r, int c) const { return values[static_cast<std::size_t>(r) * cols + c]; }
};

// Incremental CTC prefix probabilities (forward variables split by whether
// the prefix currently ends in blank), in log space. One scorer per
// utterance; extension states are owned by the hypotheses.
class CtcPrefixScorer {
  public:
    struct State {
        std::vector<double> r_nb;  // ends with the prefix's last label
        std::vector<double> r_b;   // ends with blank
        int last = -1;             // last label of the prefix (-1 = empty)
        int length = 0;
    };

    CtcPrefixScorer(const LogProbMatrix& log_probs, int blank);

    State initial() const;
    // Extends the prefix with label c; returns the new state and writes the
    // prefix score log p(prefix c ...) to `prefix_logp`.
    State extend(const State& state, int c, double* prefix_logp) const;
    // Log-probability that the frames emit exactly the prefix (EOS scoring).
    double complete_logp(const State& state) const;

  private:
    const LogProbMatrix lp_;
    int blank_;
    int T_;
};

struct Hypothesis {
    std::vector<int> tokens;  // emitted characters (no BOS/EOS)
    double att_logp = 0.0;
    double ctc_logp = 0.0;  // prefix score, or complete score once finished
    double lm_logp = 0.0;
    bool finished = false;
    bool forced = false;  // terminated by max_len rather than EOS
    std::shared_ptr<CtcPrefixScorer::State> ctc_state;

    // Zero-weight terms are skipped outright so an impossible component
    // (-inf) cannot poison the sum with NaN.
    double combined(double lambda_ctc, double lambda_lm) const {
        double s = 0.0;
        if (lambda_ctc != 1.0) s += (1.0 - lambda_ctc) * att_logp;
        if (lambda_ctc != 0.0) s += lambda_ctc * ctc_logp;
        if (lambda_lm != 0.0) s += lambda_lm * lm_logp;
        return s;
    }
};

struct BeamSearchOptions {
    int beam = 4;
    double lambda_ctc = 0.3;
    double lambda_lm = 0.0;
    int max_len = 64;
};

struct BeamSearchResult {
    std::vector<Hypothesis> nbest;  // sorted by combined score, best first
    bool any_forced = false;
    std::string transcript(const CharVocab& vocab) const;
};

// Runs the encoder on one utterance and materializes the decoder inputs
// (encoder states and CTC frame log-probs) without building a graph.
struct EncodedUtterance {
    TensorPtr enc_out;       // [T, d_model], detached
    LogProbMatrix ctc_logp;  // [T, vocab]
};
EncodedUtterance encode_utterance(const Waveform& wav, const ModelParams& params, const ArchConfig& arch,
                                  const ConvStackConfig& conv);

// Joint CTC/attention beam search with optional shallow LM fusion. Hypothesis
// score: (1-lambda_ctc)*att + lambda_ctc*ctc_prefix + lambda_lm*lm; finished
// hypotheses swap the prefix score for the complete-labeling score. Ties
// break by token order, so results are deterministic.
BeamSearchResult joint_beam_search(const EncodedUtterance& utt, const ModelParams& params,
                                   const ArchConfig& arch, const CharVocab& vocab,
                                   const ModelParams* lm, const ArchConfig* lm_arch,
                                   const BeamSearchOptions& opts);

// ---- character LM ----

struct CharLmConfig {
    ArchConfig arch;  // dec_layers/d_model/d_ffn/n_heads used; no cross-attention
    std::int64_t steps = 300;
    double lr = 3e-3;
    std::uint64_t seed = 1;
};

// Teacher-forced autoregressive training on the transcripts.
ModelParams train_char_lm(const std::vector<std::string>& transcripts, const CharVocab& vocab,
                          const CharLmConfig& cfg);

// Per-character perplexity of the LM on a corpus.
double char_lm_perplexity(const ModelParams& lm, const ArchConfig& lm_arch, const CharVocab& vocab,
                          const std::vector<std::string>& transcripts);

// ---- metrics ----

// Unit-cost edit distance over token sequences.
long edit_distance(const std::vector<std::string>& a, const std::vector<std::string>& b);
std::vector<std::string> split_words(const std::string& text);
// Word error rate: edit distance / reference length; an empty reference
// counts insertions over a denominator of 1 (documented convention).
double wer(const std::string& hyp, const std::string& ref);

// ---- weight sweep ----

struct SweepPoint {
    double lambda_ctc = 0.0;
    double lambda_lm = 0.0;
    double wer = 0.0;
};

struct SweepResult {
    double best_lambda_ctc = 0.0;
    double best_lambda_lm = 0.0;
    double best_wer = 0.0;
    std::vector<SweepPoint> table;
};

// Decodes the dev set at every grid point and returns the argmin WER
// (ties prefer smaller lambda_ctc, then smaller lambda_lm).
SweepResult sweep_weights(const std::vector<std::pair<Waveform, std::string>>& dev,
                          const ModelParams& params, const ArchConfig& arch, const ConvStackConfig& conv,
                          const CharVocab& vocab, const ModelParams* lm, const ArchConfig* lm_arch,
                          const std::vector<double>& grid_ctc, const std::vector<double>& grid_lm,
                          const BeamSearchOptions& base_opts);

}  // namespace s2c
