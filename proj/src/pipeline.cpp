#include "speech2c/pipeline.hpp"

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "speech2c/checkpoint.hpp"
#include "speech2c/errors.hpp"
#include "speech2c/rng.hpp"

namespace s2c {

namespace {

std::string join_path(const std::string& dir, const std::string& rel) {
    if (dir.empty()) return rel;
    return dir + "/" + rel;
}

std::string fmt_metric(double v) {
    char buf[40];
    std::snprintf(buf, sizeof(buf), "%.9g", v);
    return buf;
}

std::ofstream open_log(const std::string& path) {
    std::ofstream log(path);
    if (!log) throw format_error("cannot open log file " + path + " for writing");
    return log;
}

void echo_config(std::ofstream& log, const Config& cfg) {
    std::istringstream text(cfg.canonical_text());
    std::string line;
    while (std::getline(text, line)) log << "# " << line << '\n';
    log << "# fingerprint = " << cfg.fingerprint() << '\n';
}

ArchConfig lm_arch_from(const Config& cfg) {
    ArchConfig a;
    a.enc_layers = 0;
    a.dec_layers = cfg.lm_layers;
    a.d_model = cfg.lm_d_model;
    a.d_ffn = cfg.lm_d_ffn;
    a.n_heads = cfg.lm_heads;
    a.rel_pos_max_distance = cfg.rel_pos_max_distance;
    return a;
}

CharVocab vocab_from_checkpoint(const Checkpoint& ckpt) {
    auto it = ckpt.metadata.find("vocab");
    if (it == ckpt.metadata.end()) {
        throw format_error("checkpoint has no 'vocab' metadata (not a fine-tuned model?)");
    }
    return CharVocab::deserialize(it->second);
}

ModelParams load_lm(const std::string& lm_ckpt, const CharVocab& vocab, ArchConfig* lm_arch_out) {
    auto ckpt = load_checkpoint(lm_ckpt);
    auto kind = ckpt.metadata.find("kind");
    if (kind == ckpt.metadata.end() || kind->second != "charlm") {
        throw format_error("checkpoint " + lm_ckpt + " is not a character LM");
    }
    const CharVocab lm_vocab = vocab_from_checkpoint(ckpt);
    if (lm_vocab.serialize() != vocab.serialize()) {
        throw format_error("LM vocabulary '" + lm_vocab.serialize() + "' differs from model vocabulary '" +
                           vocab.serialize() + "'");
    }
    ArchConfig a;
    a.enc_layers = 0;
    a.dec_layers = std::stoi(ckpt.metadata.at("arch.dec_layers"));
    a.d_model = std::stoi(ckpt.metadata.at("arch.d_model"));
    a.d_ffn = std::stoi(ckpt.metadata.at("arch.d_ffn"));
    a.n_heads = std::stoi(ckpt.metadata.at("arch.n_heads"));
    a.rel_pos_max_distance = std::stoi(ckpt.metadata.at("arch.rel_pos_max_distance"));
    ModelParams lm = build_lm_params(a, vocab.size(), 0);
    restore_params(ckpt, lm);
    if (lm_arch_out) *lm_arch_out = a;
    return lm;
}

}  // namespace

std::string utt_id_from_path(const std::string& wav_path) {
    std::string stem = wav_path;
    const auto slash = stem.find_last_of('/');
    if (slash != std::string::npos) stem = stem.substr(slash + 1);
    const auto dot = stem.find_last_of('.');
    if (dot != std::string::npos) stem = stem.substr(0, dot);
    return stem;
}

std::vector<std::pair<Waveform, std::string>> load_corpus(const std::string& manifest_path) {
    const auto entries = read_manifest(manifest_path);
    const std::string dir = parent_dir(manifest_path);
    std::vector<std::pair<Waveform, std::string>> corpus;
    corpus.reserve(entries.size());
    for (const auto& e : entries) {
        corpus.emplace_back(load_wav(join_path(dir, e.wav_path)), e.transcript);
    }
    return corpus;
}

// ---------------------------------------------------------------------------
// synth
// ---------------------------------------------------------------------------

std::string run_synth(const Config& cfg, const std::string& out_dir) {
    SynthSpec spec;
    spec.n_utts = cfg.synth_utts;
    spec.dur_min_s = cfg.synth_dur_min;
    spec.dur_max_s = cfg.synth_dur_max;
    spec.vocab = cfg.synth_vocab;
    spec.seed = derive_seed(cfg.seed, "synth");
    std::filesystem::create_directories(out_dir);
    const auto corpus = synth_corpus(spec);
    std::vector<ManifestEntry> entries;
    for (std::size_t u = 0; u < corpus.size(); ++u) {
        char name[32];
        std::snprintf(name, sizeof(name), "utt_%04zu.wav", u);
        save_wav(join_path(out_dir, name), corpus[u].first);
        entries.push_back({name, corpus[u].second});
    }
    const std::string manifest = join_path(out_dir, "manifest.tsv");
    write_manifest(manifest, entries);
    return manifest;
}

// ---------------------------------------------------------------------------
// quantize
// ---------------------------------------------------------------------------

QuantizeOutcome run_quantize(const Config& cfg, const std::string& manifest,
                             const std::string& out_codes, const std::string& out_model,
                             const std::string& assign_model) {
    const auto conv = cfg.conv();
    const auto corpus = load_corpus(manifest);
    if (corpus.empty()) throw argument_error("run_quantize: empty manifest " + manifest);

    std::vector<std::vector<std::vector<double>>> per_utt;
    std::vector<std::vector<double>> pooled;
    per_utt.reserve(corpus.size());
    for (const auto& [wav, text] : corpus) {
        per_utt.push_back(frame_features(wav, conv, cfg.feature_bands));
        for (const auto& f : per_utt.back()) pooled.push_back(f);
    }

    KMeansModel model;
    if (!assign_model.empty()) {
        model = load_kmeans(assign_model);
        const auto kind = frame_feature_kind(conv, cfg.feature_bands);
        if (model.feature_kind != kind) {
            throw format_error("run_quantize: model features '" + model.feature_kind +
                               "' differ from extractor '" + kind + "'");
        }
    } else {
        model = kmeans_fit(pooled, cfg.codebook_size, derive_seed(cfg.seed, "kmeans"), cfg.kmeans_iters,
                           cfg.kmeans_tol);
        model.feature_kind = frame_feature_kind(conv, cfg.feature_bands);
        if (!out_model.empty()) save_kmeans(out_model, model);
    }

    std::vector<CodeSequence> codes;
    QuantizeOutcome outcome;
    for (const auto& feats : per_utt) {
        codes.push_back(kmeans_assign(model, feats));
        outcome.avg_frame_len += static_cast<double>(codes.back().codes.size());
        outcome.avg_reduced_len += static_cast<double>(reduce_codes(codes.back()).codes.size());
    }
    outcome.avg_frame_len /= static_cast<double>(codes.size());
    outcome.avg_reduced_len /= static_cast<double>(codes.size());
    write_codes(out_codes, codes);
    return outcome;
}

// ---------------------------------------------------------------------------
// pretrain
// ---------------------------------------------------------------------------

namespace {

PretrainMetrics eval_corpus_losses(const std::vector<std::pair<Waveform, std::string>>& corpus,
                                   const std::vector<CodeSequence>& codes, const ModelParams& params,
                                   const Config& cfg, const ArchConfig& arch, const ConvStackConfig& conv) {
    NoGradGuard ng;
    const bool reduce = cfg.codes_mode == "reduced";
    MaskSpec base = cfg.mask_spec();
    PretrainMetrics sum;
    for (std::size_t u = 0; u < corpus.size(); ++u) {
        MaskSpec spec = base;
        spec.seed = derive_seed(base.seed, "eval." + std::to_string(u));
        auto batch = build_pretrain_batch(corpus[u].first, codes[u], params, conv, spec, reduce, arch);
        auto m = eval_pretrain_losses(batch, params, arch);
        sum.lmlm += m.lmlm;
        sum.lmle += m.lmle;
    }
    sum.lmlm /= static_cast<double>(corpus.size());
    sum.lmle /= static_cast<double>(corpus.size());
    return sum;
}

}  // namespace

PretrainOutcome run_pretrain(const Config& cfg, const std::string& manifest, const std::string& codes_path,
                             const std::string& out_ckpt, const std::string& log_path,
                             const std::string& init_encoder_ckpt, const std::string& resume_ckpt,
                             bool allow_fingerprint_mismatch) {
    const auto arch = cfg.arch();
    const auto conv = cfg.conv();
    const auto corpus = load_corpus(manifest);
    auto codes = read_codes(codes_path);
    if (codes.size() != corpus.size()) {
        throw format_error("run_pretrain: " + std::to_string(codes.size()) + " code lines for " +
                           std::to_string(corpus.size()) + " utterances");
    }

    ModelParams params = build_pretrain_params(arch, conv, cfg.seed);
    AdamState opt;
    std::int64_t start_step = 0;

    if (!resume_ckpt.empty() && !init_encoder_ckpt.empty()) {
        throw argument_error("run_pretrain: --resume and --init-encoder are mutually exclusive");
    }
    if (!resume_ckpt.empty()) {
        auto ckpt = load_checkpoint(resume_ckpt);
        if (ckpt.fingerprint != cfg.fingerprint() && !allow_fingerprint_mismatch) {
            throw format_error("run_pretrain: checkpoint fingerprint " + std::to_string(ckpt.fingerprint) +
                               " does not match config fingerprint " + std::to_string(cfg.fingerprint()) +
                               " (pass --allow-config-mismatch to override)");
        }
        restore_params(ckpt, params);
        if (ckpt.has_opt) opt = ckpt.opt;
        start_step = static_cast<std::int64_t>(ckpt.step);
    }
    if (!init_encoder_ckpt.empty()) {
        auto ckpt = load_checkpoint(init_encoder_ckpt);
        // encoder side only: conv pre-net, projection/mask embedding, encoder
        // blocks and the code head; the decoder keeps its fresh init
        std::string mismatches;
        int copied = 0;
        for (auto& [name, t] : params.tensors) {
            const bool encoder_side = is_encoder_side_param(name) || name.rfind("enc_post.", 0) == 0;
            if (!encoder_side) continue;
            auto it = ckpt.tensors.find(name);
            if (it == ckpt.tensors.end()) {
                mismatches += (mismatches.empty() ? "" : ", ") + name + " missing";
                continue;
            }
            if (it->second->shape != t->shape) {
                mismatches += (mismatches.empty() ? "" : ", ") + name + " shape " +
                              shape_str(it->second->shape) + " vs " + shape_str(t->shape);
                continue;
            }
            t->data = it->second->data;
            ++copied;
        }
        if (!mismatches.empty()) {
            throw dimension_error("run_pretrain: encoder init incompatible: " + mismatches);
        }
        if (copied == 0) throw format_error("run_pretrain: no encoder tensors found in " + init_encoder_ckpt);
    }

    auto log = open_log(log_path);
    echo_config(log, cfg);

    // reference lengths for the repeated-vs-reduced ablation
    {
        double avg_frame = 0.0, avg_reduced = 0.0;
        for (const auto& z : codes) {
            avg_frame += static_cast<double>(z.codes.size());
            avg_reduced += static_cast<double>(reduce_codes(z).codes.size());
        }
        avg_frame /= static_cast<double>(codes.size());
        avg_reduced /= static_cast<double>(codes.size());
        log << "# codes: mode=" << cfg.codes_mode << " avg_frame_len=" << fmt_metric(avg_frame)
            << " avg_reduced_len=" << fmt_metric(avg_reduced) << '\n';
    }

    PretrainOutcome outcome;
    outcome.initial = eval_corpus_losses(corpus, codes, params, cfg, arch, conv);
    log << "# eval phase=initial lmlm=" << fmt_metric(outcome.initial.lmlm)
        << " lmle=" << fmt_metric(outcome.initial.lmle) << '\n';

    const bool reduce = cfg.codes_mode == "reduced";
    const MaskSpec base_mask = cfg.mask_spec();
    const PretrainWeights weights{cfg.lambda_mlm, cfg.lambda_mle};
    for (std::int64_t step = start_step; step < cfg.pretrain_steps; ++step) {
        const std::size_t u = static_cast<std::size_t>(step % static_cast<std::int64_t>(corpus.size()));
        MaskSpec spec = base_mask;
        spec.seed = derive_seed(base_mask.seed, "step." + std::to_string(step));
        auto batch = build_pretrain_batch(corpus[u].first, codes[u], params, conv, spec, reduce, arch);
        const double lr = lr_schedule_pretrain(step, cfg.pretrain_steps, cfg.pretrain_peak_lr);
        auto metrics = pretrain_step(batch, params, arch, opt, weights, lr, step);
        log << "step=" << step << " lmlm=" << fmt_metric(metrics.lmlm)
            << " lmle=" << fmt_metric(metrics.lmle) << " lr=" << fmt_metric(lr) << '\n';
    }

    outcome.final = eval_corpus_losses(corpus, codes, params, cfg, arch, conv);
    log << "# eval phase=final lmlm=" << fmt_metric(outcome.final.lmlm)
        << " lmle=" << fmt_metric(outcome.final.lmle) << '\n';

    auto metadata = arch_metadata(arch, conv);
    metadata["kind"] = "pretrain";
    metadata["codes_mode"] = cfg.codes_mode;
    metadata["arch.C"] = std::to_string(arch.C);
    metadata["arch.code_embed_dim"] = std::to_string(arch.code_embed_dim);
    auto ckpt = make_checkpoint(params, cfg.fingerprint(),
                                static_cast<std::uint64_t>(cfg.pretrain_steps), metadata, &opt);
    save_checkpoint(out_ckpt, ckpt);
    return outcome;
}

// ---------------------------------------------------------------------------
// finetune
// ---------------------------------------------------------------------------

namespace {

double corpus_train_wer(const std::vector<std::pair<Waveform, std::string>>& corpus,
                        const ModelParams& params, const ArchConfig& arch, const ConvStackConfig& conv,
                        const CharVocab& vocab, const Config& cfg) {
    BeamSearchOptions opts;
    opts.beam = cfg.beam;
    opts.lambda_ctc = cfg.lambda_ctc;
    opts.lambda_lm = 0.0;
    opts.max_len = cfg.max_decode_len;
    long edits = 0, ref_words = 0;
    for (const auto& [wav, ref] : corpus) {
        auto utt = encode_utterance(wav, params, arch, conv);
        auto res = joint_beam_search(utt, params, arch, vocab, nullptr, nullptr, opts);
        const auto h = split_words(res.transcript(vocab));
        const auto r = split_words(normalize_transcript(ref));
        edits += edit_distance(h, r);
        ref_words += static_cast<long>(r.size());
    }
    return ref_words == 0 ? static_cast<double>(edits)
                          : static_cast<double>(edits) / static_cast<double>(ref_words);
}

}  // namespace

FinetuneOutcome run_finetune(const Config& cfg, const std::string& manifest,
                             const std::string& pretrain_ckpt, const std::string& out_ckpt,
                             const std::string& log_path) {
    const auto arch = cfg.arch();
    const auto conv = cfg.conv();
    const auto corpus = load_corpus(manifest);
    if (corpus.empty()) throw argument_error("run_finetune: empty manifest " + manifest);

    std::vector<std::string> transcripts;
    for (const auto& [wav, text] : corpus) transcripts.push_back(text);
    const CharVocab vocab = CharVocab::from_transcripts(transcripts);

    auto ckpt = load_checkpoint(pretrain_ckpt);
    ModelParams params = init_from_pretrained(ckpt, arch, conv, vocab, cfg.seed);

    FinetuneConfig fcfg;
    fcfg.ctc_weight = cfg.ctc_weight;
    fcfg.ce_weight = cfg.ce_weight;
    fcfg.freeze_frac = cfg.freeze_frac;
    fcfg.total_steps = cfg.finetune_steps;
    fcfg.peak_lr = cfg.finetune_peak_lr;

    auto log = open_log(log_path);
    echo_config(log, cfg);

    AdamState opt;
    FinetuneOutcome outcome;
    for (std::int64_t step = 0; step < cfg.finetune_steps; ++step) {
        const std::size_t u = static_cast<std::size_t>(step % static_cast<std::int64_t>(corpus.size()));
        auto metrics = finetune_step(corpus[u].first, corpus[u].second, params, arch, conv, vocab, opt,
                                     fcfg, step);
        const double lr = lr_schedule_tristage(step, cfg.finetune_steps, cfg.finetune_peak_lr);
        log << "step=" << step << " lctc=" << fmt_metric(metrics.lctc) << " lce=" << fmt_metric(metrics.lce)
            << " lr=" << fmt_metric(lr) << '\n';
        if (cfg.finetune_eval_every > 0 && (step + 1) % cfg.finetune_eval_every == 0) {
            const double train_wer = corpus_train_wer(corpus, params, arch, conv, vocab, cfg);
            log << "# eval step=" << step << " train_wer=" << fmt_metric(train_wer) << '\n';
            outcome.final_train_wer = train_wer;
            if (train_wer == 0.0 && outcome.first_zero_wer_step < 0) outcome.first_zero_wer_step = step;
        }
    }

    auto metadata = arch_metadata(arch, conv);
    metadata["kind"] = "finetune";
    metadata["vocab"] = vocab.serialize();
    auto out = make_checkpoint(params, cfg.fingerprint(), static_cast<std::uint64_t>(cfg.finetune_steps),
                               metadata, &opt);
    save_checkpoint(out_ckpt, out);
    return outcome;
}

// ---------------------------------------------------------------------------
// character LM
// ---------------------------------------------------------------------------

void run_train_lm(const Config& cfg, const std::string& lm_manifest, const CharVocab& vocab,
                  const std::string& out_ckpt) {
    const auto entries = read_manifest(lm_manifest);
    std::vector<std::string> transcripts;
    for (const auto& e : entries) transcripts.push_back(e.transcript);
    CharLmConfig lm_cfg;
    lm_cfg.arch = lm_arch_from(cfg);
    lm_cfg.steps = cfg.lm_steps;
    lm_cfg.lr = cfg.lm_lr;
    lm_cfg.seed = derive_seed(cfg.seed, "lm");
    auto lm = train_char_lm(transcripts, vocab, lm_cfg);
    std::map<std::string, std::string> metadata{
        {"kind", "charlm"},
        {"vocab", vocab.serialize()},
        {"arch.dec_layers", std::to_string(lm_cfg.arch.dec_layers)},
        {"arch.d_model", std::to_string(lm_cfg.arch.d_model)},
        {"arch.d_ffn", std::to_string(lm_cfg.arch.d_ffn)},
        {"arch.n_heads", std::to_string(lm_cfg.arch.n_heads)},
        {"arch.rel_pos_max_distance", std::to_string(lm_cfg.arch.rel_pos_max_distance)},
    };
    ModelParams as_params;
    as_params.tensors = lm.tensors;
    save_checkpoint(out_ckpt, make_checkpoint(as_params, cfg.fingerprint(),
                                              static_cast<std::uint64_t>(cfg.lm_steps), metadata));
}

// ---------------------------------------------------------------------------
// decode / sweep
// ---------------------------------------------------------------------------

namespace {

struct LoadedAsrModel {
    ModelParams params;
    CharVocab vocab;
};

LoadedAsrModel load_asr_model(const Config& cfg, const std::string& ckpt_path) {
    auto ckpt = load_checkpoint(ckpt_path);
    auto kind = ckpt.metadata.find("kind");
    if (kind == ckpt.metadata.end() || kind->second != "finetune") {
        throw format_error("decode: checkpoint " + ckpt_path + " is not a fine-tuned ASR model");
    }
    LoadedAsrModel out{ModelParams{}, vocab_from_checkpoint(ckpt)};
    out.params = build_finetune_params(cfg.arch(), cfg.conv(), out.vocab.size(), cfg.seed);
    restore_params(ckpt, out.params);
    return out;
}

}  // namespace

void run_decode(const Config& cfg, const std::string& manifest, const std::string& ckpt_path,
                const std::string& out_path, const std::string& nbest_path, const std::string& lm_ckpt) {
    const auto arch = cfg.arch();
    const auto conv = cfg.conv();
    const auto corpus_entries = read_manifest(manifest);
    const std::string dir = parent_dir(manifest);
    auto model = load_asr_model(cfg, ckpt_path);

    ModelParams lm;
    ArchConfig lm_arch;
    const bool use_lm = !lm_ckpt.empty() && cfg.lambda_lm > 0.0;
    if (use_lm) lm = load_lm(lm_ckpt, model.vocab, &lm_arch);

    BeamSearchOptions opts;
    opts.beam = cfg.beam;
    opts.lambda_ctc = cfg.lambda_ctc;
    opts.lambda_lm = use_lm ? cfg.lambda_lm : 0.0;
    opts.max_len = cfg.max_decode_len;

    std::ofstream out(out_path);
    if (!out) throw format_error("run_decode: cannot open " + out_path + " for writing");
    std::ofstream nbest;
    if (!nbest_path.empty()) {
        nbest.open(nbest_path);
        if (!nbest) throw format_error("run_decode: cannot open " + nbest_path + " for writing");
    }
    for (const auto& e : corpus_entries) {
        const auto wav = load_wav(join_path(dir, e.wav_path));
        auto utt = encode_utterance(wav, model.params, arch, conv);
        auto res = joint_beam_search(utt, model.params, arch, model.vocab, use_lm ? &lm : nullptr,
                                     use_lm ? &lm_arch : nullptr, opts);
        const std::string id = utt_id_from_path(e.wav_path);
        out << id << '\t' << res.transcript(model.vocab) << '\n';
        if (nbest.is_open()) {
            for (std::size_t r = 0; r < res.nbest.size(); ++r) {
                const auto& h = res.nbest[r];
                nbest << id << '\t' << r << '\t' << fmt_metric(h.combined(opts.lambda_ctc, opts.lambda_lm))
                      << '\t' << fmt_metric(h.att_logp) << '\t' << fmt_metric(h.ctc_logp) << '\t'
                      << fmt_metric(h.lm_logp) << '\t' << model.vocab.decode(h.tokens)
                      << (h.forced ? "\t[forced]" : "") << '\n';
            }
        }
    }
}

SweepResult run_sweep(const Config& cfg, const std::string& manifest, const std::string& ckpt_path,
                      const std::vector<double>& grid_ctc, const std::vector<double>& grid_lm,
                      const std::string& out_path, const std::string& lm_ckpt) {
    const auto corpus = load_corpus(manifest);
    auto model = load_asr_model(cfg, ckpt_path);
    ModelParams lm;
    ArchConfig lm_arch;
    const ModelParams* lm_ptr = nullptr;
    const ArchConfig* lm_arch_ptr = nullptr;
    if (!lm_ckpt.empty()) {
        lm = load_lm(lm_ckpt, model.vocab, &lm_arch);
        lm_ptr = &lm;
        lm_arch_ptr = &lm_arch;
    }
    BeamSearchOptions opts;
    opts.beam = cfg.beam;
    opts.max_len = cfg.max_decode_len;
    auto result = sweep_weights(corpus, model.params, cfg.arch(), cfg.conv(), model.vocab, lm_ptr,
                                lm_arch_ptr, grid_ctc, grid_lm, opts);
    std::ofstream out(out_path);
    if (!out) throw format_error("run_sweep: cannot open " + out_path + " for writing");
    out << "lambda_ctc\tlambda_lm\twer\n";
    for (const auto& p : result.table) {
        out << fmt_metric(p.lambda_ctc) << '\t' << fmt_metric(p.lambda_lm) << '\t' << fmt_metric(p.wer)
            << '\n';
    }
    out << "# best lambda_ctc=" << fmt_metric(result.best_lambda_ctc)
        << " lambda_lm=" << fmt_metric(result.best_lambda_lm) << " wer=" << fmt_metric(result.best_wer)
        << '\n';
    return result;
}

// ---------------------------------------------------------------------------
// analyze
// ---------------------------------------------------------------------------

void run_analyze(const Config& cfg, const std::string& manifest, const std::string& codes_path,
                 const std::string& out_path) {
    const auto entries = read_manifest(manifest);
    auto codes = read_codes(codes_path);
    if (codes.size() != entries.size()) {
        throw format_error("run_analyze: " + std::to_string(codes.size()) + " code lines for " +
                           std::to_string(entries.size()) + " utterances");
    }
    std::vector<std::string> transcripts;
    for (const auto& e : entries) transcripts.push_back(normalize_transcript(e.transcript));
    auto report = code_text_report(codes, transcripts, cfg.codebook_size);
    std::ofstream out(out_path);
    if (!out) throw format_error("run_analyze: cannot open " + out_path + " for writing");
    out << report.text;
}

}  // namespace s2c
