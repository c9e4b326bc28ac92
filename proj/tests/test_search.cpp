#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <functional>
#include <map>

#include "speech2c/errors.hpp"
#include "speech2c/finetune.hpp"
#include "speech2c/pretrain.hpp"
#include "speech2c/search.hpp"
#include "oracles.hpp"
#include "testutil.hpp"

using namespace s2c;
using testutil::random_tensor;

namespace {

ArchConfig tiny_arch() {
    ArchConfig a;
    a.enc_layers = 1;
    a.dec_layers = 1;
    a.d_model = 8;
    a.d_ffn = 12;
    a.n_heads = 2;
    a.rel_pos_max_distance = 4;
    a.C = 5;
    a.code_embed_dim = 6;
    return a;
}

ConvStackConfig tiny_conv() {
    ConvStackConfig c;
    c.layers = {{3, 4, 3}, {3, 3, 2}};
    return c;
}

ModelParams tiny_ft_model(const CharVocab& vocab, std::uint64_t seed) {
    return build_finetune_params(tiny_arch(), tiny_conv(), vocab.size(), seed);
}

// Next-character attention log-probs via the library decoder (inference).
std::vector<double> att_next(const ModelParams& params, const ArchConfig& arch, const TensorPtr& enc,
                             const std::vector<int>& tokens) {
    NoGradGuard ng;
    std::vector<int> in{CharVocab::BOS};
    in.insert(in.end(), tokens.begin(), tokens.end());
    auto lp = log_softmax(decoder_forward(in, enc, params, arch));
    const int v = lp->shape[1];
    const int last = lp->shape[0] - 1;
    return std::vector<double>(lp->data.begin() + static_cast<std::ptrdiff_t>(last) * v,
                               lp->data.begin() + static_cast<std::ptrdiff_t>(last + 1) * v);
}

struct OracleHyp {
    std::vector<int> tokens;
    double att = 0.0;
    double ctc = 0.0;
};

// Exhaustive search over all character sequences up to max_len: attention
// scores by teacher-forced enumeration, CTC scores by the path-sum oracle.
std::vector<OracleHyp> exhaustive_hyps(const ModelParams& params, const ArchConfig& arch,
                                       const EncodedUtterance& utt, const CharVocab& vocab, int max_len) {
    const auto totals = testutil::ctc_enumerate(utt.ctc_logp, CharVocab::BLANK);
    std::vector<OracleHyp> out;
    std::function<void(std::vector<int>&, double)> walk = [&](std::vector<int>& prefix, double att) {
        const auto lp = att_next(params, arch, utt.enc_out, prefix);
        OracleHyp h;
        h.tokens = prefix;
        h.att = att + lp[CharVocab::EOS];
        const auto it = totals.find(prefix);
        h.ctc = it == totals.end() || it->second <= 0.0 ? -std::numeric_limits<double>::infinity()
                                                        : std::log(it->second);
        out.push_back(h);
        if (static_cast<int>(prefix.size()) == max_len) return;
        for (int c = 4; c < vocab.size(); ++c) {
            prefix.push_back(c);
            walk(prefix, att + lp[static_cast<std::size_t>(c)]);
            prefix.pop_back();
        }
    };
    std::vector<int> empty;
    walk(empty, 0.0);
    return out;
}

double oracle_score(const OracleHyp& h, double lambda_ctc) {
    double s = 0.0;
    if (lambda_ctc != 1.0) s += (1.0 - lambda_ctc) * h.att;
    if (lambda_ctc != 0.0) s += lambda_ctc * h.ctc;
    return s;
}

void sort_oracle(std::vector<OracleHyp>& hyps, double lambda_ctc) {
    std::sort(hyps.begin(), hyps.end(), [lambda_ctc](const OracleHyp& a, const OracleHyp& b) {
        const double sa = oracle_score(a, lambda_ctc);
        const double sb = oracle_score(b, lambda_ctc);
        if (sa != sb) return sa > sb;
        return a.tokens < b.tokens;
    });
}

// Independent recursive edit-distance oracle (memoized, not the DP loop the
// implementation uses).
long edit_oracle(const std::vector<std::string>& a, const std::vector<std::string>& b, std::size_t i,
                 std::size_t j, std::map<std::pair<std::size_t, std::size_t>, long>& memo) {
    if (i == a.size()) return static_cast<long>(b.size() - j);
    if (j == b.size()) return static_cast<long>(a.size() - i);
    const auto key = std::make_pair(i, j);
    auto it = memo.find(key);
    if (it != memo.end()) return it->second;
    long best = edit_oracle(a, b, i + 1, j + 1, memo) + (a[i] == b[j] ? 0 : 1);
    best = std::min(best, edit_oracle(a, b, i + 1, j, memo) + 1);
    best = std::min(best, edit_oracle(a, b, i, j + 1, memo) + 1);
    memo[key] = best;
    return best;
}

}  // namespace

TEST_CASE("ctc prefix scorer: single frame, impossible char, loss consistency") {
    Rng rng(3);
    auto lp = testutil::random_log_probs(1, 4, rng);
    CtcPrefixScorer scorer(lp, 0);
    auto root = scorer.initial();
    double psi = 0.0;
    auto st = scorer.extend(root, 2, &psi);
    CHECK(scorer.complete_logp(st) == doctest::Approx(lp.at(0, 2)).epsilon(1e-14));

    // a char with zero probability everywhere scores -inf
    LogProbMatrix zeroed = testutil::random_log_probs(3, 4, rng);
    for (int t = 0; t < 3; ++t) zeroed.values[static_cast<std::size_t>(t) * 4 + 3] = -std::numeric_limits<double>::infinity();
    CtcPrefixScorer sz(zeroed, 0);
    double psi_z = 0.0;
    sz.extend(sz.initial(), 3, &psi_z);
    CHECK(psi_z == -std::numeric_limits<double>::infinity());

    // completing a prefix reproduces -ctc_loss of that target
    Rng rng2(7);
    for (int trial = 0; trial < 30; ++trial) {
        const int T = 3 + static_cast<int>(rng2.below(4));
        auto m = testutil::random_log_probs(T, 4, rng2);
        CtcPrefixScorer sc(m, 0);
        std::vector<int> target{1, 2};
        auto s = sc.initial();
        for (int c : target) {
            double unused;
            s = sc.extend(s, c, &unused);
        }
        auto t = Tensor::from({T, 4}, m.values);
        auto loss = ctc_loss(t, target, 0);
        CHECK(std::fabs(sc.complete_logp(s) - (-loss->value())) < 1e-10);
    }
}

TEST_CASE("ctc prefix scores match the exhaustive prefix mass") {
    Rng rng(11);
    for (int trial = 0; trial < 40; ++trial) {
        const int T = 2 + static_cast<int>(rng.below(5));
        const int V = 3 + static_cast<int>(rng.below(2));
        auto lp = testutil::random_log_probs(T, V, rng);
        auto totals = testutil::ctc_enumerate(lp, 0);
        CtcPrefixScorer scorer(lp, 0);
        auto root = scorer.initial();
        for (int c1 = 1; c1 < V; ++c1) {
            double psi1 = 0.0;
            auto s1 = scorer.extend(root, c1, &psi1);
            const double mass1 = testutil::ctc_prefix_mass(totals, {c1});
            CHECK(std::fabs(psi1 - std::log(mass1)) < 1e-10);
            for (int c2 = 1; c2 < V; ++c2) {
                double psi2 = 0.0;
                scorer.extend(s1, c2, &psi2);
                const double mass2 = testutil::ctc_prefix_mass(totals, {c1, c2});
                if (mass2 > 0.0) {
                    CHECK(std::fabs(psi2 - std::log(mass2)) < 1e-10);
                } else {
                    CHECK(psi2 == -std::numeric_limits<double>::infinity());
                }
            }
        }
    }
}

TEST_CASE("boundary equivalence: beam search matches exhaustive rankings") {
    auto arch = tiny_arch();
    auto vocab = CharVocab::from_chars("ABC");  // 3 characters -> 4 expansion choices
    Rng rng(13);
    for (int trial = 0; trial < 5; ++trial) {
        auto params = tiny_ft_model(vocab, 100 + static_cast<std::uint64_t>(trial));
        EncodedUtterance utt;
        utt.enc_out = random_tensor({4, arch.d_model}, rng, false);
        utt.ctc_logp = testutil::random_log_probs(4, vocab.size(), rng);

        const int max_len = 3;
        auto oracle = exhaustive_hyps(params, arch, utt, vocab, max_len);

        for (double lambda_ctc : {0.0, 1.0, 0.5}) {
            BeamSearchOptions opts;
            opts.beam = static_cast<int>(oracle.size());  // wide enough to be exhaustive
            opts.lambda_ctc = lambda_ctc;
            opts.lambda_lm = 0.0;
            opts.max_len = max_len;
            auto res = joint_beam_search(utt, params, arch, vocab, nullptr, nullptr, opts);
            auto expect = oracle;
            sort_oracle(expect, lambda_ctc);
            REQUIRE(res.nbest.size() == expect.size());
            for (std::size_t r = 0; r < expect.size(); ++r) {
                CHECK(res.nbest[r].tokens == expect[r].tokens);
                const double got = res.nbest[r].combined(lambda_ctc, 0.0);
                const double want = oracle_score(expect[r], lambda_ctc);
                if (std::isfinite(want)) {
                    CHECK(got == doctest::Approx(want).epsilon(1e-10));
                } else {
                    CHECK(got == want);
                }
            }
        }
    }
}

TEST_CASE("n-best scores are non-increasing and ties break by token order") {
    auto arch = tiny_arch();
    auto vocab = CharVocab::from_chars("AB");
    auto params = tiny_ft_model(vocab, 19);
    Rng rng(23);
    EncodedUtterance utt;
    utt.enc_out = random_tensor({3, arch.d_model}, rng, false);
    utt.ctc_logp = testutil::random_log_probs(3, vocab.size(), rng);
    BeamSearchOptions opts;
    opts.beam = 6;
    opts.lambda_ctc = 0.4;
    opts.max_len = 4;
    auto res = joint_beam_search(utt, params, arch, vocab, nullptr, nullptr, opts);
    REQUIRE(res.nbest.size() >= 2);
    for (std::size_t r = 1; r < res.nbest.size(); ++r) {
        const double prev = res.nbest[r - 1].combined(0.4, 0.0);
        const double cur = res.nbest[r].combined(0.4, 0.0);
        CHECK(prev >= cur);
        if (prev == cur) CHECK(res.nbest[r - 1].tokens < res.nbest[r].tokens);
    }
}

TEST_CASE("beam search is deterministic") {
    auto arch = tiny_arch();
    auto vocab = CharVocab::from_chars("AB");
    auto params = tiny_ft_model(vocab, 29);
    Rng rng(31);
    EncodedUtterance utt;
    utt.enc_out = random_tensor({4, arch.d_model}, rng, false);
    utt.ctc_logp = testutil::random_log_probs(4, vocab.size(), rng);
    BeamSearchOptions opts;
    opts.beam = 3;
    opts.lambda_ctc = 0.3;
    opts.max_len = 5;
    auto r1 = joint_beam_search(utt, params, arch, vocab, nullptr, nullptr, opts);
    auto r2 = joint_beam_search(utt, params, arch, vocab, nullptr, nullptr, opts);
    REQUIRE(r1.nbest.size() == r2.nbest.size());
    for (std::size_t i = 0; i < r1.nbest.size(); ++i) {
        CHECK(r1.nbest[i].tokens == r2.nbest[i].tokens);
        CHECK(r1.nbest[i].att_logp == r2.nbest[i].att_logp);
        CHECK(r1.nbest[i].ctc_logp == r2.nbest[i].ctc_logp);
    }
}

TEST_CASE("char LM: overfit perplexity, normalized rows, determinism") {
    auto vocab = CharVocab::from_chars("AB ");
    CharLmConfig cfg;
    cfg.arch.enc_layers = 0;
    cfg.arch.dec_layers = 1;
    cfg.arch.d_model = 16;
    cfg.arch.d_ffn = 32;
    cfg.arch.n_heads = 2;
    cfg.arch.rel_pos_max_distance = 8;
    cfg.steps = 250;
    cfg.lr = 5e-3;
    cfg.seed = 3;
    std::vector<std::string> corpus{"AB AB"};
    auto lm = train_char_lm(corpus, vocab, cfg);
    CHECK(char_lm_perplexity(lm, cfg.arch, vocab, corpus) < 1.15);

    {
        NoGradGuard ng;
        auto lp = log_softmax(lm_forward({CharVocab::BOS, vocab.id('A')}, lm, cfg.arch));
        for (int r = 0; r < lp->shape[0]; ++r) {
            double s = 0.0;
            for (int c = 0; c < lp->shape[1]; ++c) s += std::exp(lp->data[r * lp->shape[1] + c]);
            CHECK(std::fabs(s - 1.0) < 1e-12);
        }
        // training entry points must refuse to run silently under no-grad
        CHECK_THROWS_AS(train_char_lm(corpus, vocab, cfg), contract_error);
    }

    auto lm2 = train_char_lm(corpus, vocab, cfg);
    for (const auto& name : lm.names()) CHECK(lm.at(name)->data == lm2.at(name)->data);

    CHECK_THROWS_AS(train_char_lm({}, vocab, cfg), argument_error);
}

TEST_CASE("shallow fusion shifts scores by the LM log-probability") {
    auto arch = tiny_arch();
    auto vocab = CharVocab::from_chars("AB");
    auto params = tiny_ft_model(vocab, 37);
    CharLmConfig lm_cfg;
    lm_cfg.arch.enc_layers = 0;
    lm_cfg.arch.dec_layers = 1;
    lm_cfg.arch.d_model = 16;
    lm_cfg.arch.d_ffn = 24;
    lm_cfg.arch.n_heads = 2;
    lm_cfg.arch.rel_pos_max_distance = 4;
    lm_cfg.steps = 40;
    lm_cfg.seed = 5;
    auto lm = train_char_lm({"AABB"}, vocab, lm_cfg);

    Rng rng(41);
    EncodedUtterance utt;
    utt.enc_out = random_tensor({3, arch.d_model}, rng, false);
    utt.ctc_logp = testutil::random_log_probs(3, vocab.size(), rng);
    BeamSearchOptions opts;
    opts.beam = 20;
    opts.lambda_ctc = 0.0;
    opts.lambda_lm = 0.5;
    opts.max_len = 2;
    auto res = joint_beam_search(utt, params, arch, vocab, &lm, &lm_cfg.arch, opts);
    REQUIRE(!res.nbest.empty());
    // every hypothesis carries an lm score equal to the chain of next-char
    // log-probs including EOS
    NoGradGuard ng;
    for (const auto& h : res.nbest) {
        std::vector<int> in{CharVocab::BOS};
        in.insert(in.end(), h.tokens.begin(), h.tokens.end());
        auto lp = log_softmax(lm_forward(in, lm, lm_cfg.arch));
        const int v = lp->shape[1];
        double expect = 0.0;
        for (std::size_t i = 0; i < h.tokens.size(); ++i) {
            expect += lp->data[static_cast<std::size_t>(i) * v + static_cast<std::size_t>(h.tokens[i])];
        }
        expect += lp->data[(in.size() - 1) * static_cast<std::size_t>(v) + CharVocab::EOS];
        CHECK(h.lm_logp == doctest::Approx(expect).epsilon(1e-12));
    }
}

TEST_CASE("wer: identity, substitution, empty reference convention") {
    CHECK(wer("A B C", "A B C") == 0.0);
    CHECK(wer("A X C", "A B C") == doctest::Approx(1.0 / 3).epsilon(1e-15));
    CHECK(wer("A B", "") == 2.0);  // insertions over a denominator of 1
    CHECK(wer("", "A B") == 1.0);  // two deletions / two ref words
}

TEST_CASE("edit distance matches a recursive oracle and satisfies the triangle inequality") {
    Rng rng(43);
    auto random_words = [&](int max_len) {
        std::vector<std::string> words;
        const int n = static_cast<int>(rng.below(static_cast<std::uint64_t>(max_len + 1)));
        for (int i = 0; i < n; ++i) {
            words.push_back(std::string(1, static_cast<char>('a' + rng.below(3))));
        }
        return words;
    };
    for (int trial = 0; trial < 200; ++trial) {
        auto a = random_words(6), b = random_words(6), c = random_words(6);
        std::map<std::pair<std::size_t, std::size_t>, long> memo;
        CHECK(edit_distance(a, b) == edit_oracle(a, b, 0, 0, memo));
        CHECK(edit_distance(a, b) <= edit_distance(a, c) + edit_distance(c, b));
    }
}

TEST_CASE("sweep: single point, determinism, constructed preference for attention") {
    auto arch = tiny_arch();
    auto conv = tiny_conv();
    // overfit the attention decoder only; the CTC head stays untrained
    auto params = build_finetune_params(arch, conv, CharVocab::from_chars("AB ").size(), 51);
    auto vocab = CharVocab::from_chars("AB ");
    Waveform wav;
    wav.sample_rate = 16000;
    for (int i = 0; i < 90; ++i) wav.samples.push_back(0.4 * std::sin(0.06 * i));
    FinetuneConfig fcfg;
    fcfg.ctc_weight = 0.0;  // leaves the CTC projection at its random init
    fcfg.ce_weight = 1.0;
    fcfg.freeze_frac = 0.0;
    fcfg.total_steps = 80;
    fcfg.peak_lr = 5e-3;
    AdamState opt;
    for (int step = 0; step < 80; ++step) {
        finetune_step(wav, "AB", params, arch, conv, vocab, opt, fcfg, step);
    }
    std::vector<std::pair<Waveform, std::string>> dev{{wav, "AB"}};
    BeamSearchOptions opts;
    opts.beam = 4;
    opts.max_len = 6;

    auto single = sweep_weights(dev, params, arch, conv, vocab, nullptr, nullptr, {0.3}, {0.0}, opts);
    CHECK(single.best_lambda_ctc == 0.3);
    REQUIRE(single.table.size() == 1);

    auto result = sweep_weights(dev, params, arch, conv, vocab, nullptr, nullptr, {0.0, 1.0}, {0.0}, opts);
    REQUIRE(result.table.size() == 2);
    CHECK(result.best_lambda_ctc == 0.0);
    CHECK(result.best_wer == 0.0);
    CHECK(result.table[1].wer > 0.0);  // untrained CTC head cannot decode the utterance

    auto rerun = sweep_weights(dev, params, arch, conv, vocab, nullptr, nullptr, {0.0, 1.0}, {0.0}, opts);
    for (std::size_t i = 0; i < result.table.size(); ++i) {
        CHECK(result.table[i].wer == rerun.table[i].wer);
    }

    CHECK_THROWS_AS(sweep_weights({}, params, arch, conv, vocab, nullptr, nullptr, {0.0}, {0.0}, opts),
                    argument_error);
}
