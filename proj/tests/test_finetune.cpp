#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "speech2c/errors.hpp"
#include "speech2c/finetune.hpp"
#include "speech2c/pretrain.hpp"
#include "speech2c/rng.hpp"
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

Checkpoint tiny_pretrain_ckpt(std::uint64_t seed) {
    auto arch = tiny_arch();
    auto conv = tiny_conv();
    auto params = build_pretrain_params(arch, conv, seed);
    auto metadata = arch_metadata(arch, conv);
    metadata["kind"] = "pretrain";
    return make_checkpoint(params, 1, 100, metadata);
}

Waveform tone(int n) {
    Waveform w;
    w.sample_rate = 16000;
    for (int i = 0; i < n; ++i) w.samples.push_back(0.4 * std::sin(0.06 * i) + 0.1 * std::sin(0.013 * i));
    return w;
}

}  // namespace

TEST_CASE("char vocab: stable ids, blank reserved, round trip") {
    auto vocab = CharVocab::from_transcripts({"ab ba", "CAB"});
    // normalized to uppercase; characters sorted: ' ', 'A', 'B', 'C'
    CHECK(vocab.size() == 4 + 4);
    CHECK(vocab.id(' ') == 4);
    CHECK(vocab.id('A') == 5);
    CHECK(vocab.id('C') == 7);
    CHECK_THROWS_AS(vocab.id('z'), index_error);

    auto ids = vocab.encode("AB C");
    for (int i : ids) CHECK(i != CharVocab::BLANK);
    CHECK(vocab.decode(ids) == "AB C");

    auto vocab2 = CharVocab::deserialize(vocab.serialize());
    CHECK(vocab2.chars == vocab.chars);
    CHECK(vocab2.id('B') == vocab.id('B'));
}

TEST_CASE("init_from_pretrained copies the trunk bit-exactly and drops code heads") {
    auto arch = tiny_arch();
    auto conv = tiny_conv();
    auto ckpt = tiny_pretrain_ckpt(11);
    auto vocab = CharVocab::from_chars("AB ");
    auto params = init_from_pretrained(ckpt, arch, conv, vocab, 77);

    int copied = 0;
    for (const auto& name : params.names()) {
        const bool trunk = name.rfind("prenet.", 0) == 0 || name.rfind("encoder.", 0) == 0 ||
                           (name.rfind("decoder.", 0) == 0 && name != "decoder.embed");
        if (trunk) {
            CHECK(params.at(name)->data == ckpt.tensors.at(name)->data);
            ++copied;
        }
    }
    CHECK(copied > 10);

    // code-specific nets are gone
    CHECK_FALSE(params.has("enc_post.proj"));
    CHECK_FALSE(params.has("enc_post.codes"));
    // char-specific nets are new and sized to the vocab
    CHECK(params.at("decoder.embed")->shape == std::vector<int>{vocab.size(), arch.d_model});
    CHECK(params.at("dec_post.w")->shape == std::vector<int>{arch.d_model, vocab.size()});
    CHECK(params.at("ctc.w")->shape == std::vector<int>{arch.d_model, vocab.size()});
    CHECK(params.at("decoder.embed")->data != ckpt.tensors.at("decoder.embed")->data);

    // fresh layers are deterministic in the seed
    auto again = init_from_pretrained(ckpt, arch, conv, vocab, 77);
    CHECK(again.at("decoder.embed")->data == params.at("decoder.embed")->data);
    CHECK(again.at("ctc.w")->data == params.at("ctc.w")->data);
    auto other = init_from_pretrained(ckpt, arch, conv, vocab, 78);
    CHECK(other.at("ctc.w")->data != params.at("ctc.w")->data);
}

TEST_CASE("init_from_pretrained preserves encoder outputs bit-exactly") {
    auto arch = tiny_arch();
    auto conv = tiny_conv();
    auto pre_params = build_pretrain_params(arch, conv, 13);
    auto metadata = arch_metadata(arch, conv);
    auto ckpt = make_checkpoint(pre_params, 1, 0, metadata);
    auto vocab = CharVocab::from_chars("ABC");
    auto ft_params = init_from_pretrained(ckpt, arch, conv, vocab, 5);

    auto wav = tone(90);
    auto run = [&](const ModelParams& p) {
        NoGradGuard ng;
        std::vector<TensorPtr> kernels;
        for (std::size_t i = 0; i < conv.layers.size(); ++i) {
            kernels.push_back(p.at("prenet.conv" + std::to_string(i) + ".w"));
        }
        auto feats = feature_encode(wav, conv, kernels);
        return encoder_forward(project_features(feats, p), p, arch);
    };
    auto h_pre = run(pre_params);
    auto h_ft = run(ft_params);
    CHECK(h_pre->data == h_ft->data);
}

TEST_CASE("init_from_pretrained rejects incompatible architectures listing fields") {
    auto ckpt = tiny_pretrain_ckpt(11);
    auto arch = tiny_arch();
    arch.d_model = 16;
    arch.enc_layers = 2;
    auto vocab = CharVocab::from_chars("AB");
    CHECK_THROWS_WITH_AS(init_from_pretrained(ckpt, arch, tiny_conv(), vocab, 1),
                         doctest::Contains("arch.d_model"), dimension_error);
}

TEST_CASE("ctc_loss single-frame and two-frame cases match path enumeration") {
    // T=1, target "a": the only path emits a at frame 0
    LogProbMatrix lp1;
    Rng rng(3);
    lp1 = testutil::random_log_probs(1, 4, rng);
    auto t1 = Tensor::from({1, 4}, lp1.values);
    auto loss1 = ctc_loss(t1, {1}, 0);
    CHECK(loss1->value() == doctest::Approx(-lp1.at(0, 1)).epsilon(1e-14));

    // T=2, target "a": paths aa, -a, a-
    auto lp2 = testutil::random_log_probs(2, 4, rng);
    auto t2 = Tensor::from({2, 4}, lp2.values);
    auto loss2 = ctc_loss(t2, {2}, 0);
    const double pa0 = std::exp(lp2.at(0, 2)), pa1 = std::exp(lp2.at(1, 2));
    const double pb0 = std::exp(lp2.at(0, 0)), pb1 = std::exp(lp2.at(1, 0));
    const double expect = pa0 * pa1 + pb0 * pa1 + pa0 * pb1;
    CHECK(loss2->value() == doctest::Approx(-std::log(expect)).epsilon(1e-12));
}

TEST_CASE("ctc_loss matches the exhaustive collapse oracle on random tiny instances") {
    Rng rng(7);
    int checked = 0;
    for (int trial = 0; trial < 60; ++trial) {
        const int T = 2 + static_cast<int>(rng.below(7));  // 2..8
        const int V = 2 + static_cast<int>(rng.below(3));  // 2..4
        auto lp = testutil::random_log_probs(T, V, rng);
        auto totals = testutil::ctc_enumerate(lp, 0);
        std::vector<int> target;
        const int len = static_cast<int>(rng.below(4));  // 0..3
        for (int i = 0; i < len; ++i) target.push_back(1 + static_cast<int>(rng.below(static_cast<std::uint64_t>(V - 1))));
        if (T < ctc_min_frames(target)) {
            auto t = Tensor::from({T, V}, lp.values);
            CHECK_THROWS_AS(ctc_loss(t, target, 0), argument_error);
            continue;
        }
        auto t = Tensor::from({T, V}, lp.values);
        auto loss = ctc_loss(t, target, 0);
        const auto it = totals.find(target);
        REQUIRE(it != totals.end());
        CHECK(std::fabs(loss->value() - (-std::log(it->second))) < 1e-10);
        ++checked;
    }
    CHECK(checked >= 30);
}

TEST_CASE("ctc_loss gradient matches finite differences") {
    Rng rng(11);
    for (int trial = 0; trial < 20; ++trial) {
        const int T = 5, V = 4;
        auto logits = random_tensor({T, V}, rng);
        std::vector<int> target{1, 3, 1};
        auto loss_fn = [&] { return ctc_loss(log_softmax(logits), target, 0)->value(); };
        auto res = testutil::finite_diff_check({logits}, loss_fn, [&] {
            backward(ctc_loss(log_softmax(logits), target, 0));
        });
        CHECK_MESSAGE(res.ok(1e-4), "rel err ", res.max_rel_err);
    }
}

TEST_CASE("ctc_loss validates blank, targets and feasibility") {
    auto lp = Tensor::zeros({3, 4});
    CHECK_THROWS_AS(ctc_loss(lp, {1}, 9), index_error);
    CHECK_THROWS_AS(ctc_loss(lp, {0}, 0), index_error);  // target equals blank
    // a repeated label needs a separating blank: {1,1} takes 3 frames
    CHECK_NOTHROW(ctc_loss(lp, {1, 1}, 0));
    CHECK_THROWS_WITH_AS(ctc_loss(lp, {1, 1, 2, 2}, 0), doctest::Contains("infeasible"), argument_error);
}

TEST_CASE("finetune freeze phase: encoder bit-identical, decoder moves") {
    auto arch = tiny_arch();
    auto conv = tiny_conv();
    auto ckpt = tiny_pretrain_ckpt(17);
    auto vocab = CharVocab::from_chars("AB ");
    auto params = init_from_pretrained(ckpt, arch, conv, vocab, 3);
    FinetuneConfig cfg;
    cfg.freeze_frac = 0.5;
    cfg.total_steps = 10;
    cfg.peak_lr = 1e-3;
    AdamState opt;
    auto wav = tone(90);

    std::map<std::string, std::vector<double>> before;
    for (const auto& name : params.names()) before[name] = params.at(name)->data;

    // step 1 is inside the freeze window (1 < 0.5*10) with a nonzero lr
    finetune_step(wav, "AB", params, arch, conv, vocab, opt, cfg, 1);

    bool decoder_moved = false;
    for (const auto& name : params.names()) {
        if (is_encoder_side_param(name)) {
            CHECK(params.at(name)->data == before[name]);
        } else {
            decoder_moved |= params.at(name)->data != before[name];
        }
    }
    CHECK(decoder_moved);

    // past the freeze boundary the encoder moves too
    finetune_step(wav, "AB", params, arch, conv, vocab, opt, cfg, 5);
    bool encoder_moved = false;
    for (const auto& name : params.names()) {
        if (is_encoder_side_param(name)) encoder_moved |= params.at(name)->data != before[name];
    }
    CHECK(encoder_moved);
}

TEST_CASE("ctc_weight=0 starves the CTC projection of gradient") {
    auto arch = tiny_arch();
    auto conv = tiny_conv();
    auto ckpt = tiny_pretrain_ckpt(19);
    auto vocab = CharVocab::from_chars("AB ");
    auto params = init_from_pretrained(ckpt, arch, conv, vocab, 3);
    FinetuneConfig cfg;
    cfg.ctc_weight = 0.0;
    cfg.ce_weight = 1.0;
    cfg.freeze_frac = 0.0;
    cfg.total_steps = 10;
    AdamState opt;
    finetune_step(tone(90), "AB", params, arch, conv, vocab, opt, cfg, 1);
    for (const char* name : {"ctc.w", "ctc.b"}) {
        for (double g : params.at(name)->grad) CHECK(g == 0.0);
    }
}

TEST_CASE("loss decomposition: total equals the weighted sum of components") {
    auto arch = tiny_arch();
    auto conv = tiny_conv();
    auto ckpt = tiny_pretrain_ckpt(23);
    auto vocab = CharVocab::from_chars("AB ");
    auto params = init_from_pretrained(ckpt, arch, conv, vocab, 3);
    NoGradGuard ng;
    auto wav = tone(90);
    std::vector<TensorPtr> kernels;
    for (std::size_t i = 0; i < conv.layers.size(); ++i) {
        kernels.push_back(params.at("prenet.conv" + std::to_string(i) + ".w"));
    }
    auto h = encoder_forward(project_features(feature_encode(wav, conv, kernels), params), params, arch);
    const auto ids = vocab.encode("AB");
    auto lctc = ctc_loss(ctc_log_probs(h, params), ids, CharVocab::BLANK);
    std::vector<int> dec_in{CharVocab::BOS};
    dec_in.insert(dec_in.end(), ids.begin(), ids.end());
    std::vector<int> tgt = ids;
    tgt.push_back(CharVocab::EOS);
    auto lce = cross_entropy(log_softmax(decoder_forward(dec_in, h, params, arch)), tgt);
    auto total = add(scale(lctc, 0.5), scale(lce, 0.5));
    CHECK(std::fabs(total->value() - (0.5 * lctc->value() + 0.5 * lce->value())) < 1e-12);
}

TEST_CASE("full fine-tuning loss gradient check on a tiny model") {
    auto arch = tiny_arch();
    auto conv = tiny_conv();
    auto ckpt = tiny_pretrain_ckpt(29);
    auto vocab = CharVocab::from_chars("AB");
    auto params = init_from_pretrained(ckpt, arch, conv, vocab, 3);
    auto wav = tone(60);
    const auto ids = vocab.encode("AB");

    auto build_loss = [&]() {
        std::vector<TensorPtr> kernels;
        for (std::size_t i = 0; i < conv.layers.size(); ++i) {
            kernels.push_back(params.at("prenet.conv" + std::to_string(i) + ".w"));
        }
        auto h = encoder_forward(project_features(feature_encode(wav, conv, kernels), params), params, arch);
        auto lctc = ctc_loss(ctc_log_probs(h, params), ids, CharVocab::BLANK);
        std::vector<int> dec_in{CharVocab::BOS};
        dec_in.insert(dec_in.end(), ids.begin(), ids.end());
        std::vector<int> tgt = ids;
        tgt.push_back(CharVocab::EOS);
        auto lce = cross_entropy(log_softmax(decoder_forward(dec_in, h, params, arch)), tgt);
        return add(scale(lctc, 0.5), scale(lce, 0.5));
    };
    auto all = params.all();
    auto res = testutil::finite_diff_check(
        all, [&] { return build_loss()->value(); }, [&] { backward(build_loss()); });
    CHECK_MESSAGE(res.ok(1e-4), res.worst, " rel err ", res.max_rel_err);
}

TEST_CASE("tristage schedule: warmup, hold, decay probes") {
    const std::int64_t total = 1000;
    const double peak = 4e-5;
    CHECK(lr_schedule_tristage(0, total, peak) == 0.0);
    CHECK(lr_schedule_tristage(25, total, peak) == 0.25 * peak);
    CHECK(lr_schedule_tristage(100, total, peak) == peak);
    CHECK(lr_schedule_tristage(300, total, peak) == peak);
    CHECK(lr_schedule_tristage(499, total, peak) == peak);
    CHECK(lr_schedule_tristage(500, total, peak) == peak);  // decay leg starts at peak
    CHECK(lr_schedule_tristage(750, total, peak) == 0.5 * peak);
    CHECK(lr_schedule_tristage(total, total, peak) == 0.0);
    CHECK_THROWS_AS(lr_schedule_tristage(1001, total, peak), argument_error);
}
