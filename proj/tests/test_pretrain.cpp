#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <set>

#include "speech2c/errors.hpp"
#include "speech2c/pretrain.hpp"
#include "speech2c/rng.hpp"
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

Waveform tone(int n) {
    Waveform w;
    w.sample_rate = 16000;
    for (int i = 0; i < n; ++i) w.samples.push_back(0.4 * std::sin(0.05 * i));
    return w;
}

CodeSequence codes_for(int T, int C, std::uint64_t seed) {
    Rng rng(seed);
    CodeSequence z;
    for (int t = 0; t < T; ++t) z.codes.push_back(static_cast<int>(rng.below(static_cast<std::uint64_t>(C))));
    return z;
}

}  // namespace

TEST_CASE("span mask: start count, bound, saturation, determinism") {
    MaskSpec spec;
    spec.seed = 5;
    auto m = sample_span_mask(100, spec);
    CHECK(m.starts.size() == 8);  // ceil(0.08 * 100)
    CHECK(m.positions.size() <= 80);
    CHECK(!m.positions.empty());
    std::set<int> uniq(m.starts.begin(), m.starts.end());
    CHECK(uniq.size() == m.starts.size());  // without replacement

    // saturation: spans clip at T, so M covers [min(starts), T); with T=1 the
    // only possible start is 0 and everything is masked
    MaskSpec sat;
    sat.span_len = 50;
    sat.seed = 9;
    auto ms1 = sample_span_mask(1, sat);
    CHECK(ms1.positions == std::vector<int>{0});
    MaskSpec dense;
    dense.mask_prob = 0.99;  // every timestep becomes a start
    dense.span_len = 5;
    dense.seed = 11;
    auto ms3 = sample_span_mask(3, dense);
    CHECK(ms3.starts.size() == 3);
    CHECK(ms3.positions == std::vector<int>{0, 1, 2});
    auto ms20 = sample_span_mask(20, sat);
    CHECK(static_cast<int>(ms20.positions.size()) == 20 - *std::min_element(ms20.starts.begin(), ms20.starts.end()));

    auto m2 = sample_span_mask(100, spec);
    CHECK(m.starts == m2.starts);
    CHECK(m.positions == m2.positions);

    MaskSpec other = spec;
    other.seed = 6;
    CHECK(sample_span_mask(100, other).positions != m.positions);
}

TEST_CASE("mask spec validation") {
    MaskSpec bad;
    bad.mask_prob = 0.0;
    CHECK_THROWS_AS(bad.validate(), argument_error);
    bad.mask_prob = 1.0;
    CHECK_THROWS_AS(bad.validate(), argument_error);
    bad.mask_prob = 0.08;
    bad.span_len = 0;
    CHECK_THROWS_AS(bad.validate(), argument_error);
}

TEST_CASE("mask coverage stays inside [p, p*span] and masked rows carry the embedding") {
    MaskSpec spec;
    double total = 0.0;
    const int T = 500, samples = 200;
    for (int i = 0; i < samples; ++i) {
        spec.seed = static_cast<std::uint64_t>(i);
        total += static_cast<double>(sample_span_mask(T, spec).positions.size()) / T;
    }
    const double mean_cov = total / samples;
    CHECK(mean_cov >= spec.mask_prob);
    CHECK(mean_cov <= spec.mask_prob * spec.span_len);

    Rng rng(3);
    auto x = random_tensor({6, 4}, rng);
    auto emb = random_tensor({4}, rng);
    auto xm = apply_mask(x, {1, 4}, emb);
    for (int j = 0; j < 4; ++j) {
        CHECK(xm->data[1 * 4 + j] == emb->data[static_cast<std::size_t>(j)]);
        CHECK(xm->data[4 * 4 + j] == emb->data[static_cast<std::size_t>(j)]);
        CHECK(xm->data[0 * 4 + j] == x->data[0 * 4 + j]);
    }
}

TEST_CASE("mlm_loss: uniform code head gives ln C") {
    const int C = 5, ce = 4, d = 8, T = 6;
    EncoderPostNet post;
    Rng rng(7);
    post.proj = random_tensor({d, ce}, rng, false);
    std::vector<double> row{0.4, -0.1, 0.2, 0.7};
    std::vector<double> all;
    for (int c = 0; c < C; ++c) all.insert(all.end(), row.begin(), row.end());
    post.code_embeds = Tensor::from({C, ce}, all);
    auto h = random_tensor({T, d}, rng, false);
    std::vector<int> z{0, 1, 2, 3, 4, 0};
    auto loss = mlm_loss(h, z, {0, 2, 5}, post);
    CHECK(loss->value() == doctest::Approx(std::log(static_cast<double>(C))).epsilon(1e-12));
}

TEST_CASE("mlm_loss: empty mask yields zero with zero gradients") {
    const int C = 4, ce = 3, d = 6;
    Rng rng(11);
    EncoderPostNet post;
    post.proj = random_tensor({d, ce}, rng);
    post.code_embeds = random_tensor({C, ce}, rng);
    auto h = random_tensor({5, d}, rng);
    auto loss = mlm_loss(h, {0, 1, 2, 3, 0}, {}, post);
    CHECK(loss->value() == 0.0);
    backward(loss);
    CHECK(post.proj->grad.empty());
    CHECK(post.code_embeds->grad.empty());
}

TEST_CASE("mlm_loss ignores targets and states at unmasked timesteps") {
    const int C = 4, ce = 3, d = 6, T = 7;
    Rng rng(13);
    EncoderPostNet post;
    post.proj = random_tensor({d, ce}, rng);
    post.code_embeds = random_tensor({C, ce}, rng);
    std::vector<int> mask{1, 4};
    std::vector<int> z1{0, 1, 2, 3, 0, 1, 2};
    std::vector<int> z2 = z1;
    z2[0] = 3;  // unmasked target changed
    z2[6] = 0;
    auto h_data = random_tensor({T, d}, rng, false)->data;

    auto run = [&](const std::vector<int>& z, double bump) {
        post.proj->zero_grad();
        post.code_embeds->zero_grad();
        auto h = Tensor::from({T, d}, h_data, true);
        for (int j = 0; j < d; ++j) h->data[2 * d + j] += bump;  // unmasked state changed
        auto loss = mlm_loss(h, z, mask, post);
        backward(loss);
        return std::make_tuple(loss->value(), post.proj->grad, post.code_embeds->grad);
    };
    auto [v1, gp1, gc1] = run(z1, 0.0);
    auto [v2, gp2, gc2] = run(z2, 2.5);
    CHECK(v1 == v2);
    CHECK(gp1 == gp2);
    CHECK(gc1 == gc2);
}

TEST_CASE("mlm_loss single masked frame matches the direct formula") {
    const int C = 3, ce = 2, d = 2;
    EncoderPostNet post;
    post.proj = Tensor::from({d, ce}, {1, 0, 0, 1});  // identity
    post.code_embeds = Tensor::from({C, ce}, {1, 0, 0, 1, -1, 0});
    auto h = Tensor::from({1, d}, {0.6, 0.8});
    const int target = 1;
    auto loss = mlm_loss(h, {target}, {0}, post);
    // direct: sims = cos(h, e_c) = {0.6, 0.8, -0.6}; p = softmax(sims / 0.1)
    const double s0 = std::exp(0.6 / 0.1), s1 = std::exp(0.8 / 0.1), s2 = std::exp(-0.6 / 0.1);
    const double expect = -std::log(s1 / (s0 + s1 + s2));
    CHECK(loss->value() == doctest::Approx(expect).epsilon(1e-12));
}

TEST_CASE("reconstruction_loss: uniform logits give ln V, one-hot margin goes to zero") {
    const int V = 8, N = 4;
    auto logits = Tensor::zeros({N, V});
    std::vector<int> targets{1, 2, 3, 4};
    CHECK(reconstruction_loss(logits, targets)->value() ==
          doctest::Approx(std::log(static_cast<double>(V))).epsilon(1e-12));

    auto sharp = Tensor::zeros({N, V});
    for (int i = 0; i < N; ++i) sharp->data[i * V + targets[static_cast<std::size_t>(i)]] = 200.0;
    CHECK(reconstruction_loss(sharp, targets)->value() < 1e-12);
}

TEST_CASE("reconstruction_loss N=2 matches hand-summed teacher-forced log-probs") {
    const int V = 4;
    Rng rng(17);
    auto logits = random_tensor({2, V}, rng, false);
    std::vector<int> targets{2, 0};
    double expect = 0.0;
    for (int i = 0; i < 2; ++i) {
        double mx = logits->data[i * V];
        for (int j = 1; j < V; ++j) mx = std::max(mx, logits->data[i * V + j]);
        double lse = 0.0;
        for (int j = 0; j < V; ++j) lse += std::exp(logits->data[i * V + j] - mx);
        expect -= logits->data[i * V + targets[static_cast<std::size_t>(i)]] - mx - std::log(lse);
    }
    expect /= 2.0;
    CHECK(reconstruction_loss(logits, targets)->value() == doctest::Approx(expect).epsilon(1e-13));
}

TEST_CASE("reconstruction_loss rejects a length mismatch") {
    auto logits = Tensor::zeros({3, 4});
    CHECK_THROWS_AS(reconstruction_loss(logits, {1, 2}), contract_error);
}

TEST_CASE("teacher forcing: per-position loss before a target change is bit-identical") {
    auto arch = tiny_arch();
    auto params = build_pretrain_params(arch, tiny_conv(), 23);
    Rng rng(29);
    auto enc = random_tensor({5, arch.d_model}, rng, false);
    std::vector<int> t1{2, 0, 3, 1};
    std::vector<int> t2{2, 0, 1, 1};  // differs at position 2
    auto run = [&](const std::vector<int>& tgt) {
        std::vector<int> in;
        in.push_back(code_bos(arch.C));
        in.insert(in.end(), tgt.begin(), tgt.end());
        std::vector<int> full = tgt;
        full.push_back(code_eos(arch.C));
        auto logits = decoder_forward(in, enc, params, arch);
        return per_position_nll(logits, full);
    };
    auto n1 = run(t1);
    auto n2 = run(t2);
    CHECK(n1[0] == n2[0]);
    CHECK(n1[1] == n2[1]);
    CHECK(n1[2] != n2[2]);
}

TEST_CASE("pretrain_step: lambda toggles isolate parameter subsets") {
    auto arch = tiny_arch();
    auto conv = tiny_conv();
    auto wav = tone(80);
    const int T = frame_count(80, conv);
    REQUIRE(T > 0);
    auto z = codes_for(T, arch.C, 31);
    MaskSpec spec;
    spec.seed = 7;

    SUBCASE("lambda_mle = 0 leaves all decoder parameters untouched") {
        auto params = build_pretrain_params(arch, conv, 37);
        auto before = params.at("decoder.block0.self_attn.wq")->data;
        AdamState opt;
        auto batch = build_pretrain_batch(wav, z, params, conv, spec, true, arch);
        pretrain_step(batch, params, arch, opt, {1.0, 0.0}, 1e-3, 0);
        for (const auto& name : params.names()) {
            if (name.rfind("decoder.", 0) == 0 || name.rfind("dec_post.", 0) == 0) {
                const auto& g = params.at(name)->grad;
                for (double v : g) CHECK(v == 0.0);
            }
        }
        CHECK(params.at("decoder.block0.self_attn.wq")->data == before);
    }

    SUBCASE("lambda_mlm = 0 leaves the code head untouched") {
        auto params = build_pretrain_params(arch, conv, 37);
        AdamState opt;
        auto batch = build_pretrain_batch(wav, z, params, conv, spec, true, arch);
        pretrain_step(batch, params, arch, opt, {0.0, 1.0}, 1e-3, 0);
        for (const char* name : {"enc_post.proj", "enc_post.codes"}) {
            const auto& g = params.at(name)->grad;
            for (double v : g) CHECK(v == 0.0);
        }
    }

    SUBCASE("both weights zero is rejected") {
        auto params = build_pretrain_params(arch, conv, 37);
        AdamState opt;
        auto batch = build_pretrain_batch(wav, z, params, conv, spec, true, arch);
        CHECK_THROWS_AS(pretrain_step(batch, params, arch, opt, {0.0, 0.0}, 1e-3, 0), argument_error);
    }
}

TEST_CASE("repeated mode feeds frame codes to the decoder") {
    auto arch = tiny_arch();
    auto conv = tiny_conv();
    auto wav = tone(80);
    const int T = frame_count(80, conv);
    auto params = build_pretrain_params(arch, conv, 41);
    CodeSequence z;
    for (int t = 0; t < T; ++t) z.codes.push_back(t % 2 == 0 ? 1 : 1);  // constant run
    MaskSpec spec;
    auto reduced = build_pretrain_batch(wav, z, params, conv, spec, true, arch);
    auto repeated = build_pretrain_batch(wav, z, params, conv, spec, false, arch);
    CHECK(reduced.decoder_targets == std::vector<int>{1});
    CHECK(static_cast<int>(repeated.decoder_targets.size()) == T);
}

TEST_CASE("lr_schedule_pretrain: peak at the 8% boundary, zero at the end, half at 54%") {
    const std::int64_t total = 1000;
    const double peak = 2e-4;
    CHECK(lr_schedule_pretrain(80, total, peak) == peak);
    CHECK(lr_schedule_pretrain(total, total, peak) == 0.0);
    CHECK(lr_schedule_pretrain(540, total, peak) == 0.5 * peak);
    CHECK(lr_schedule_pretrain(0, total, peak) == 0.0);
    // continuity across the boundary
    const double before = lr_schedule_pretrain(79, total, peak);
    const double after = lr_schedule_pretrain(81, total, peak);
    CHECK(before < peak);
    CHECK(after < peak);
    CHECK(std::fabs(before - peak) < peak * 2.0 / 80.0);
    CHECK_THROWS_AS(lr_schedule_pretrain(-1, total, peak), argument_error);
    CHECK_THROWS_AS(lr_schedule_pretrain(1001, total, peak), argument_error);
}

TEST_CASE("metrics stay finite over a few optimization steps and losses move") {
    auto arch = tiny_arch();
    auto conv = tiny_conv();
    auto wav = tone(120);
    const int T = frame_count(120, conv);
    auto z = codes_for(T, arch.C, 47);
    auto params = build_pretrain_params(arch, conv, 51);
    AdamState opt;
    MaskSpec spec;
    double first = 0.0, last = 0.0;
    for (int step = 0; step < 30; ++step) {
        spec.seed = derive_seed(1, "step." + std::to_string(step));
        auto batch = build_pretrain_batch(wav, z, params, conv, spec, true, arch);
        auto m = pretrain_step(batch, params, arch, opt, {1.0, 1.0}, 3e-3, step);
        if (step == 0) first = m.lmlm + m.lmle;
        last = m.lmlm + m.lmle;
        CHECK(std::isfinite(m.lmlm));
        CHECK(std::isfinite(m.lmle));
    }
    CHECK(last < first);  // single repeated utterance overfits quickly
}
