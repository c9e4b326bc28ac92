#include <cstdio>
#include <exception>
#include <filesystem>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "speech2c/checkpoint.hpp"
#include "speech2c/errors.hpp"
#include "speech2c/pipeline.hpp"

namespace {

// Removes declared outputs when a command fails partway.
class OutputGuard {
  public:
    void declare(const std::string& path) {
        if (!path.empty()) paths_.push_back(path);
    }
    void declare_dir(const std::string& path) {
        if (!path.empty()) dirs_.push_back(path);
    }
    void commit() { committed_ = true; }
    ~OutputGuard() {
        if (committed_) return;
        std::error_code ec;
        for (const auto& p : paths_) std::filesystem::remove(p, ec);
        for (const auto& d : dirs_) std::filesystem::remove_all(d, ec);
    }

  private:
    std::vector<std::string> paths_;
    std::vector<std::string> dirs_;
    bool committed_ = false;
};

std::vector<double> parse_grid(const std::string& csv) {
    std::vector<double> out;
    std::size_t pos = 0;
    while (pos < csv.size()) {
        auto comma = csv.find(',', pos);
        if (comma == std::string::npos) comma = csv.size();
        out.push_back(std::stod(csv.substr(pos, comma - pos)));
        pos = comma + 1;
    }
    return out;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"speech-to-code pre-training, ASR fine-tuning and joint decoding"};
    app.require_subcommand(1);
    app.fallthrough();  // --config/--set may appear after the subcommand

    std::string config_path;
    std::vector<std::string> overrides;
    app.add_option("--config", config_path, "config file (key = value lines)");
    app.add_option("--set", overrides, "config override key=value (repeatable)");

    auto cfg = [&]() {
        return config_path.empty() ? s2c::config_from_overrides(overrides)
                                   : s2c::parse_config(config_path, overrides);
    };

    // synth
    auto* synth = app.add_subcommand("synth", "write a synthetic corpus (wavs + manifest)");
    std::string synth_out;
    synth->add_option("--out-dir", synth_out, "output directory")->required();

    // quantize
    auto* quantize = app.add_subcommand("quantize", "fit k-means on frame features and write codes");
    std::string q_manifest, q_codes, q_model, q_assign;
    quantize->add_option("--manifest", q_manifest)->required();
    quantize->add_option("--out-codes", q_codes)->required();
    quantize->add_option("--out-model", q_model, "path for the fitted k-means model");
    quantize->add_option("--model", q_assign, "assign with an existing model instead of fitting");

    // pretrain
    auto* pretrain = app.add_subcommand("pretrain", "masked-prediction + code-reconstruction training");
    std::string p_manifest, p_codes, p_ckpt, p_log, p_init, p_resume;
    bool p_allow_mismatch = false;
    pretrain->add_option("--manifest", p_manifest)->required();
    pretrain->add_option("--codes", p_codes)->required();
    pretrain->add_option("--out-ckpt", p_ckpt)->required();
    pretrain->add_option("--log", p_log)->required();
    pretrain->add_option("--init-encoder", p_init, "copy encoder tensors from a prior checkpoint");
    pretrain->add_option("--resume", p_resume, "continue a run from its checkpoint");
    pretrain->add_flag("--allow-config-mismatch", p_allow_mismatch,
                       "resume even if the config fingerprint differs");

    // finetune
    auto* finetune = app.add_subcommand("finetune", "CTC+attention ASR fine-tuning");
    std::string f_manifest, f_pre, f_ckpt, f_log;
    finetune->add_option("--manifest", f_manifest)->required();
    finetune->add_option("--ckpt", f_pre, "pre-training checkpoint")->required();
    finetune->add_option("--out-ckpt", f_ckpt)->required();
    finetune->add_option("--log", f_log)->required();

    // decode
    auto* decode = app.add_subcommand("decode", "joint CTC/attention decoding");
    std::string d_manifest, d_ckpt, d_out, d_nbest, d_lm, d_lm_manifest, d_lm_out;
    decode->add_option("--manifest", d_manifest)->required();
    decode->add_option("--ckpt", d_ckpt)->required();
    decode->add_option("--out", d_out)->required();
    decode->add_option("--nbest", d_nbest, "n-best list with per-hypothesis scores");
    decode->add_option("--lm-ckpt", d_lm, "character LM checkpoint for shallow fusion");
    decode->add_option("--lm-manifest", d_lm_manifest, "train the character LM on these transcripts");
    decode->add_option("--lm-out", d_lm_out, "where to save an LM trained via --lm-manifest");

    // sweep
    auto* sweep = app.add_subcommand("sweep", "grid-search decoding weights by WER");
    std::string s_manifest, s_ckpt, s_out, s_lm, s_lm_manifest, s_lm_out;
    std::string s_grid_ctc = "0,0.1,0.2,0.3,0.4,0.5,0.6,0.7,0.8,0.9,1",
                s_grid_lm = "0";
    sweep->add_option("--manifest", s_manifest)->required();
    sweep->add_option("--ckpt", s_ckpt)->required();
    sweep->add_option("--out", s_out)->required();
    sweep->add_option("--grid-ctc", s_grid_ctc, "comma-separated lambda_ctc grid");
    sweep->add_option("--grid-lm", s_grid_lm, "comma-separated lambda_lm grid");
    sweep->add_option("--lm-ckpt", s_lm);
    sweep->add_option("--lm-manifest", s_lm_manifest);
    sweep->add_option("--lm-out", s_lm_out);

    // analyze
    auto* analyze = app.add_subcommand("analyze", "code/text correlation report");
    std::string a_manifest, a_codes, a_out;
    analyze->add_option("--manifest", a_manifest)->required();
    analyze->add_option("--codes", a_codes)->required();
    analyze->add_option("--out", a_out)->required();

    CLI11_PARSE(app, argc, argv);

    try {
        if (*synth) {
            OutputGuard guard;
            guard.declare_dir(synth_out);
            const auto manifest = s2c::run_synth(cfg(), synth_out);
            std::printf("wrote %s\n", manifest.c_str());
            guard.commit();
        } else if (*quantize) {
            OutputGuard guard;
            guard.declare(q_codes);
            guard.declare(q_model);
            auto outcome = s2c::run_quantize(cfg(), q_manifest, q_codes, q_model, q_assign);
            std::printf("codes: avg_frame_len=%.2f avg_reduced_len=%.2f\n", outcome.avg_frame_len,
                        outcome.avg_reduced_len);
            guard.commit();
        } else if (*pretrain) {
            OutputGuard guard;
            guard.declare(p_ckpt);
            guard.declare(p_log);
            auto outcome = s2c::run_pretrain(cfg(), p_manifest, p_codes, p_ckpt, p_log, p_init, p_resume,
                                             p_allow_mismatch);
            std::printf("lmlm %.4f -> %.4f, lmle %.4f -> %.4f\n", outcome.initial.lmlm, outcome.final.lmlm,
                        outcome.initial.lmle, outcome.final.lmle);
            guard.commit();
        } else if (*finetune) {
            OutputGuard guard;
            guard.declare(f_ckpt);
            guard.declare(f_log);
            auto outcome = s2c::run_finetune(cfg(), f_manifest, f_pre, f_ckpt, f_log);
            if (outcome.final_train_wer >= 0.0) {
                std::printf("final train WER %.4f%s\n", outcome.final_train_wer,
                            outcome.first_zero_wer_step >= 0 ? " (reached 0)" : "");
            }
            guard.commit();
        } else if (*decode) {
            OutputGuard guard;
            guard.declare(d_out);
            guard.declare(d_nbest);
            auto c = cfg();
            std::string lm_path = d_lm;
            if (!d_lm_manifest.empty()) {
                auto ckpt = s2c::load_checkpoint(d_ckpt);
                auto it = ckpt.metadata.find("vocab");
                if (it == ckpt.metadata.end()) throw s2c::format_error("checkpoint has no vocab metadata");
                const auto vocab = s2c::CharVocab::deserialize(it->second);
                lm_path = d_lm_out.empty() ? d_out + ".lm" : d_lm_out;
                guard.declare(lm_path);
                s2c::run_train_lm(c, d_lm_manifest, vocab, lm_path);
            }
            s2c::run_decode(c, d_manifest, d_ckpt, d_out, d_nbest, lm_path);
            guard.commit();
        } else if (*sweep) {
            OutputGuard guard;
            guard.declare(s_out);
            auto c = cfg();
            std::string lm_path = s_lm;
            if (!s_lm_manifest.empty()) {
                auto ckpt = s2c::load_checkpoint(s_ckpt);
                auto it = ckpt.metadata.find("vocab");
                if (it == ckpt.metadata.end()) throw s2c::format_error("checkpoint has no vocab metadata");
                const auto vocab = s2c::CharVocab::deserialize(it->second);
                lm_path = s_lm_out.empty() ? s_out + ".lm" : s_lm_out;
                guard.declare(lm_path);
                s2c::run_train_lm(c, s_lm_manifest, vocab, lm_path);
            }
            auto result = s2c::run_sweep(c, s_manifest, s_ckpt, parse_grid(s_grid_ctc),
                                         parse_grid(s_grid_lm), s_out, lm_path);
            std::printf("best lambda_ctc=%.2f lambda_lm=%.2f wer=%.4f\n", result.best_lambda_ctc,
                        result.best_lambda_lm, result.best_wer);
            guard.commit();
        } else if (*analyze) {
            OutputGuard guard;
            guard.declare(a_out);
            s2c::run_analyze(cfg(), a_manifest, a_codes, a_out);
            guard.commit();
        }
    } catch (const std::exception& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 1;
    }
    return 0;
}
