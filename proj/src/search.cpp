#include "speech2c/search.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "speech2c/errors.hpp"

namespace s2c {

namespace {

constexpr double kNegInf = -std::numeric_limits<double>::infinity();

double log_add(double a, double b) {
    if (a == kNegInf) return b;
    if (b == kNegInf) return a;
    const double hi = std::max(a, b);
    return hi + std::log1p(std::exp(std::min(a, b) - hi));
}

}  // namespace

// ---------------------------------------------------------------------------
// CTC prefix scoring
// ---------------------------------------------------------------------------

CtcPrefixScorer::CtcPrefixScorer(const LogProbMatrix& log_probs, int blank)
    : lp_(log_probs), blank_(blank), T_(log_probs.rows) {
    if (T_ < 1 || lp_.cols < 1) throw argument_error("CtcPrefixScorer: empty log-prob matrix");
    if (blank_ < 0 || blank_ >= lp_.cols) {
        throw index_error("CtcPrefixScorer: blank " + std::to_string(blank_) + " outside vocab");
    }
}

CtcPrefixScorer::State CtcPrefixScorer::initial() const {
    State s;
    s.r_nb.assign(static_cast<std::size_t>(T_), kNegInf);
    s.r_b.resize(static_cast<std::size_t>(T_));
    double acc = 0.0;
    for (int t = 0; t < T_; ++t) {
        acc += lp_.at(t, blank_);
        s.r_b[static_cast<std::size_t>(t)] = acc;
    }
    s.last = -1;
    s.length = 0;
    return s;
}

CtcPrefixScorer::State CtcPrefixScorer::extend(const State& state, int c, double* prefix_logp) const {
    if (static_cast<int>(state.r_nb.size()) != T_ || static_cast<int>(state.r_b.size()) != T_) {
        throw contract_error("CtcPrefixScorer: state does not belong to this scorer");
    }
    if (c < 0 || c >= lp_.cols || c == blank_) {
        throw index_error("CtcPrefixScorer: cannot extend with label " + std::to_string(c));
    }
    State out;
    out.r_nb.assign(static_cast<std::size_t>(T_), kNegInf);
    out.r_b.assign(static_cast<std::size_t>(T_), kNegInf);
    out.last = c;
    out.length = state.length + 1;

    out.r_nb[0] = state.length == 0 ? lp_.at(0, c) : kNegInf;
    double psi = out.r_nb[0];
    for (int t = 1; t < T_; ++t) {
        // phi: paths that emitted the old prefix by t-1 and may start c at t
        double phi = state.r_b[static_cast<std::size_t>(t - 1)];
        if (c != state.last) phi = log_add(phi, state.r_nb[static_cast<std::size_t>(t - 1)]);
        out.r_nb[static_cast<std::size_t>(t)] =
            log_add(out.r_nb[static_cast<std::size_t>(t - 1)], phi) + lp_.at(t, c);
        out.r_b[static_cast<std::size_t>(t)] =
            log_add(out.r_b[static_cast<std::size_t>(t - 1)], out.r_nb[static_cast<std::size_t>(t - 1)]) +
            lp_.at(t, blank_);
        psi = log_add(psi, phi + lp_.at(t, c));
    }
    if (prefix_logp) *prefix_logp = psi;
    return out;
}

double CtcPrefixScorer::complete_logp(const State& state) const {
    if (static_cast<int>(state.r_b.size()) != T_) {
        throw contract_error("CtcPrefixScorer: state does not belong to this scorer");
    }
    return log_add(state.r_nb[static_cast<std::size_t>(T_ - 1)], state.r_b[static_cast<std::size_t>(T_ - 1)]);
}

// ---------------------------------------------------------------------------
// utterance encoding + next-token distributions
// ---------------------------------------------------------------------------

EncodedUtterance encode_utterance(const Waveform& wav, const ModelParams& params, const ArchConfig& arch,
                                  const ConvStackConfig& conv) {
    NoGradGuard ng;
    std::vector<TensorPtr> kernels;
    for (std::size_t i = 0; i < conv.layers.size(); ++i) {
        kernels.push_back(params.at("prenet.conv" + std::to_string(i) + ".w"));
    }
    auto feats = feature_encode(wav, conv, kernels);
    EncodedUtterance out;
    out.enc_out = encoder_forward(project_features(feats, params), params, arch);
    auto lp = ctc_log_probs(out.enc_out, params);
    out.ctc_logp.rows = lp->shape[0];
    out.ctc_logp.cols = lp->shape[1];
    out.ctc_logp.values = lp->data;
    return out;
}

namespace {

std::vector<double> decoder_next_logp(const std::vector<int>& tokens, const TensorPtr& enc_out,
                                      const ModelParams& params, const ArchConfig& arch) {
    NoGradGuard ng;
    std::vector<int> in;
    in.reserve(tokens.size() + 1);
    in.push_back(CharVocab::BOS);
    in.insert(in.end(), tokens.begin(), tokens.end());
    auto lp = log_softmax(decoder_forward(in, enc_out, params, arch));
    const int v = lp->shape[1];
    const int last = lp->shape[0] - 1;
    return std::vector<double>(lp->data.begin() + static_cast<std::ptrdiff_t>(last) * v,
                               lp->data.begin() + static_cast<std::ptrdiff_t>(last + 1) * v);
}

std::vector<double> lm_next_logp(const std::vector<int>& tokens, const ModelParams& lm,
                                 const ArchConfig& lm_arch) {
    NoGradGuard ng;
    std::vector<int> in;
    in.reserve(tokens.size() + 1);
    in.push_back(CharVocab::BOS);
    in.insert(in.end(), tokens.begin(), tokens.end());
    auto lp = log_softmax(lm_forward(in, lm, lm_arch));
    const int v = lp->shape[1];
    const int last = lp->shape[0] - 1;
    return std::vector<double>(lp->data.begin() + static_cast<std::ptrdiff_t>(last) * v,
                               lp->data.begin() + static_cast<std::ptrdiff_t>(last + 1) * v);
}

bool better_hyp(const Hypothesis& a, const Hypothesis& b, double lc, double ll) {
    const double sa = a.combined(lc, ll);
    const double sb = b.combined(lc, ll);
    if (sa != sb) return sa > sb;
    return a.tokens < b.tokens;  // deterministic tie rule
}

}  // namespace

// ---------------------------------------------------------------------------
// joint beam search
// ---------------------------------------------------------------------------

std::string BeamSearchResult::transcript(const CharVocab& vocab) const {
    if (nbest.empty()) return "";
    return vocab.decode(nbest.front().tokens);
}

BeamSearchResult joint_beam_search(const EncodedUtterance& utt, const ModelParams& params,
                                   const ArchConfig& arch, const CharVocab& vocab,
                                   const ModelParams* lm, const ArchConfig* lm_arch,
                                   const BeamSearchOptions& opts) {
    if (opts.beam < 1) throw argument_error("joint_beam_search: beam must be >= 1");
    if (opts.lambda_ctc < 0.0 || opts.lambda_ctc > 1.0 || opts.lambda_lm < 0.0) {
        throw argument_error("joint_beam_search: lambda_ctc in [0,1], lambda_lm >= 0 required");
    }
    if (opts.max_len < 1) throw argument_error("joint_beam_search: max_len must be >= 1");
    if (lm && !lm_arch) throw contract_error("joint_beam_search: lm passed without its arch");

    CtcPrefixScorer scorer(utt.ctc_logp, CharVocab::BLANK);
    const double lc = opts.lambda_ctc, ll = opts.lambda_lm;

    Hypothesis root;
    root.ctc_state = std::make_shared<CtcPrefixScorer::State>(scorer.initial());
    root.ctc_logp = 0.0;  // every labeling extends the empty prefix

    std::vector<Hypothesis> live{root};
    std::vector<Hypothesis> finished;
    bool any_forced = false;

    for (int step = 0; step < opts.max_len && !live.empty(); ++step) {
        std::vector<Hypothesis> candidates;
        for (const auto& hyp : live) {
            const auto dec_lp = decoder_next_logp(hyp.tokens, utt.enc_out, params, arch);
            std::vector<double> lm_lp;
            if (lm) lm_lp = lm_next_logp(hyp.tokens, *lm, *lm_arch);
            // EOS closes the hypothesis with the complete-labeling CTC score
            {
                Hypothesis done = hyp;
                done.att_logp += dec_lp[CharVocab::EOS];
                done.ctc_logp = scorer.complete_logp(*hyp.ctc_state);
                if (lm) done.lm_logp += lm_lp[CharVocab::EOS];
                done.finished = true;
                finished.push_back(std::move(done));
            }
            for (int c = 4; c < vocab.size(); ++c) {
                Hypothesis next = hyp;
                next.tokens.push_back(c);
                next.att_logp += dec_lp[static_cast<std::size_t>(c)];
                double psi = kNegInf;
                next.ctc_state =
                    std::make_shared<CtcPrefixScorer::State>(scorer.extend(*hyp.ctc_state, c, &psi));
                next.ctc_logp = psi;
                if (lm) next.lm_logp += lm_lp[static_cast<std::size_t>(c)];
                candidates.push_back(std::move(next));
            }
        }
        std::sort(candidates.begin(), candidates.end(),
                  [lc, ll](const Hypothesis& a, const Hypothesis& b) { return better_hyp(a, b, lc, ll); });
        if (static_cast<int>(candidates.size()) > opts.beam) candidates.resize(static_cast<std::size_t>(opts.beam));
        live = std::move(candidates);
    }
    // leftovers at max_len: terminate them anyway and flag it
    for (auto& hyp : live) {
        const auto dec_lp = decoder_next_logp(hyp.tokens, utt.enc_out, params, arch);
        hyp.att_logp += dec_lp[CharVocab::EOS];
        hyp.ctc_logp = scorer.complete_logp(*hyp.ctc_state);
        if (lm) {
            const auto lm_lp = lm_next_logp(hyp.tokens, *lm, *lm_arch);
            hyp.lm_logp += lm_lp[CharVocab::EOS];
        }
        hyp.finished = true;
        hyp.forced = true;
        any_forced = true;
        finished.push_back(hyp);
    }
    std::sort(finished.begin(), finished.end(),
              [lc, ll](const Hypothesis& a, const Hypothesis& b) { return better_hyp(a, b, lc, ll); });
    BeamSearchResult result;
    result.any_forced = any_forced;
    const std::size_t keep = std::min<std::size_t>(finished.size(), static_cast<std::size_t>(opts.beam));
    result.nbest.assign(finished.begin(), finished.begin() + static_cast<std::ptrdiff_t>(keep));
    return result;
}

// ---------------------------------------------------------------------------
// character LM
// ---------------------------------------------------------------------------

ModelParams train_char_lm(const std::vector<std::string>& transcripts, const CharVocab& vocab,
                          const CharLmConfig& cfg) {
    if (transcripts.empty()) throw argument_error("train_char_lm: empty corpus");
    if (!grad_enabled()) throw contract_error("train_char_lm: gradient recording is disabled");
    ModelParams lm = build_lm_params(cfg.arch, vocab.size(), cfg.seed);
    AdamState opt;
    for (std::int64_t step = 0; step < cfg.steps; ++step) {
        const auto& text = transcripts[static_cast<std::size_t>(step % static_cast<std::int64_t>(transcripts.size()))];
        const auto ids = vocab.encode(normalize_transcript(text));
        std::vector<int> in;
        in.reserve(ids.size() + 1);
        in.push_back(CharVocab::BOS);
        in.insert(in.end(), ids.begin(), ids.end());
        std::vector<int> tgt = ids;
        tgt.push_back(CharVocab::EOS);
        auto loss = cross_entropy(log_softmax(lm_forward(in, lm, cfg.arch)), tgt);
        lm.zero_grads();
        backward(loss);
        adam_step(lm.all(), opt, cfg.lr);
    }
    return lm;
}

double char_lm_perplexity(const ModelParams& lm, const ArchConfig& lm_arch, const CharVocab& vocab,
                          const std::vector<std::string>& transcripts) {
    if (transcripts.empty()) throw argument_error("char_lm_perplexity: empty corpus");
    NoGradGuard ng;
    double total_nll = 0.0;
    long total_chars = 0;
    for (const auto& text : transcripts) {
        const auto ids = vocab.encode(normalize_transcript(text));
        std::vector<int> in;
        in.push_back(CharVocab::BOS);
        in.insert(in.end(), ids.begin(), ids.end());
        std::vector<int> tgt = ids;
        tgt.push_back(CharVocab::EOS);
        auto nll = cross_entropy(log_softmax(lm_forward(in, lm, lm_arch)), tgt);
        total_nll += nll->value() * static_cast<double>(tgt.size());
        total_chars += static_cast<long>(tgt.size());
    }
    return std::exp(total_nll / static_cast<double>(total_chars));
}

// ---------------------------------------------------------------------------
// WER
// ---------------------------------------------------------------------------

std::vector<std::string> split_words(const std::string& text) {
    std::vector<std::string> words;
    std::string cur;
    for (char c : text) {
        if (c == ' ' || c == '\t') {
            if (!cur.empty()) words.push_back(std::move(cur));
            cur.clear();
        } else {
            cur.push_back(c);
        }
    }
    if (!cur.empty()) words.push_back(std::move(cur));
    return words;
}

long edit_distance(const std::vector<std::string>& a, const std::vector<std::string>& b) {
    const std::size_t n = a.size(), m = b.size();
    std::vector<long> prev(m + 1), cur(m + 1);
    for (std::size_t j = 0; j <= m; ++j) prev[j] = static_cast<long>(j);
    for (std::size_t i = 1; i <= n; ++i) {
        cur[0] = static_cast<long>(i);
        for (std::size_t j = 1; j <= m; ++j) {
            const long subst = prev[j - 1] + (a[i - 1] == b[j - 1] ? 0 : 1);
            cur[j] = std::min({prev[j] + 1, cur[j - 1] + 1, subst});
        }
        std::swap(prev, cur);
    }
    return prev[m];
}

double wer(const std::string& hyp, const std::string& ref) {
    const auto h = split_words(hyp);
    const auto r = split_words(ref);
    const long dist = edit_distance(h, r);
    if (r.empty()) return static_cast<double>(dist);  // insertions over a denominator of 1
    return static_cast<double>(dist) / static_cast<double>(r.size());
}

// ---------------------------------------------------------------------------
// weight sweep
// ---------------------------------------------------------------------------

SweepResult sweep_weights(const std::vector<std::pair<Waveform, std::string>>& dev,
                          const ModelParams& params, const ArchConfig& arch, const ConvStackConfig& conv,
                          const CharVocab& vocab, const ModelParams* lm, const ArchConfig* lm_arch,
                          const std::vector<double>& grid_ctc, const std::vector<double>& grid_lm,
                          const BeamSearchOptions& base_opts) {
    if (dev.empty()) throw argument_error("sweep_weights: empty dev set");
    if (grid_ctc.empty() || grid_lm.empty()) throw argument_error("sweep_weights: empty grid");
    for (double v : grid_ctc) {
        if (v < 0.0 || v > 1.0) throw argument_error("sweep_weights: grid values must lie in [0,1]");
    }
    for (double v : grid_lm) {
        if (v < 0.0 || v > 1.0) throw argument_error("sweep_weights: grid values must lie in [0,1]");
    }
    std::vector<EncodedUtterance> encoded;
    encoded.reserve(dev.size());
    for (const auto& [wav, ref] : dev) encoded.push_back(encode_utterance(wav, params, arch, conv));

    SweepResult result;
    bool first = true;
    for (double lam_ctc : grid_ctc) {
        for (double lam_lm : grid_lm) {
            BeamSearchOptions opts = base_opts;
            opts.lambda_ctc = lam_ctc;
            opts.lambda_lm = lam_lm;
            long total_edits = 0;
            long total_ref_words = 0;
            for (std::size_t i = 0; i < dev.size(); ++i) {
                auto res = joint_beam_search(encoded[i], params, arch, vocab,
                                             lam_lm > 0.0 ? lm : nullptr, lam_lm > 0.0 ? lm_arch : nullptr,
                                             opts);
                const auto hyp_words = split_words(res.transcript(vocab));
                const auto ref_words = split_words(normalize_transcript(dev[i].second));
                total_edits += edit_distance(hyp_words, ref_words);
                total_ref_words += static_cast<long>(ref_words.size());
            }
            const double corpus_wer = total_ref_words == 0
                                          ? static_cast<double>(total_edits)
                                          : static_cast<double>(total_edits) / static_cast<double>(total_ref_words);
            result.table.push_back({lam_ctc, lam_lm, corpus_wer});
            // strict improvement only: grid is scanned in ascending order, so
            // ties keep the smaller weights
            if (first || corpus_wer < result.best_wer) {
                first = false;
                result.best_wer = corpus_wer;
                result.best_lambda_ctc = lam_ctc;
                result.best_lambda_lm = lam_lm;
            }
        }
    }
    return result;
}

}  // namespace s2c
