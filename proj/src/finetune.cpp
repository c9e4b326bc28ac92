#include "speech2c/finetune.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <limits>
#include <set>
#include <sstream>

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
// vocabulary
// ---------------------------------------------------------------------------

std::string normalize_transcript(const std::string& text) {
    std::string out;
    out.reserve(text.size());
    for (char c : text) out.push_back(static_cast<char>(std::toupper(static_cast<unsigned char>(c))));
    return out;
}

CharVocab CharVocab::from_transcripts(const std::vector<std::string>& transcripts) {
    std::set<char> seen;
    for (const auto& t : transcripts) {
        for (char c : normalize_transcript(t)) seen.insert(c);
    }
    CharVocab v;
    v.chars.assign(seen.begin(), seen.end());
    if (v.chars.empty()) throw argument_error("CharVocab: no characters in transcripts");
    return v;
}

CharVocab CharVocab::from_chars(const std::string& chars) {
    std::set<char> seen(chars.begin(), chars.end());
    CharVocab v;
    v.chars.assign(seen.begin(), seen.end());
    if (v.chars.empty()) throw argument_error("CharVocab: empty character set");
    return v;
}

std::string CharVocab::serialize() const { return std::string(chars.begin(), chars.end()); }

CharVocab CharVocab::deserialize(const std::string& s) { return from_chars(s); }

int CharVocab::id(char c) const {
    const auto it = std::lower_bound(chars.begin(), chars.end(), c);
    if (it == chars.end() || *it != c) {
        throw index_error(std::string("CharVocab: unknown character '") + c + "'");
    }
    return 4 + static_cast<int>(it - chars.begin());
}

char CharVocab::char_at(int idx) const {
    if (!is_char(idx)) {
        throw index_error("CharVocab: id " + std::to_string(idx) + " is not a character");
    }
    return chars[static_cast<std::size_t>(idx - 4)];
}

std::vector<int> CharVocab::encode(const std::string& text) const {
    std::vector<int> out;
    out.reserve(text.size());
    for (char c : text) out.push_back(id(c));
    return out;
}

std::string CharVocab::decode(const std::vector<int>& ids) const {
    std::string out;
    for (int i : ids) {
        if (is_char(i)) out.push_back(char_at(i));
    }
    return out;
}

// ---------------------------------------------------------------------------
// initialization from a pre-training checkpoint
// ---------------------------------------------------------------------------

namespace {

void check_arch_compatible(const Checkpoint& ckpt, const ArchConfig& arch, const ConvStackConfig& conv) {
    const std::pair<const char*, std::string> expected[] = {
        {"arch.enc_layers", std::to_string(arch.enc_layers)},
        {"arch.dec_layers", std::to_string(arch.dec_layers)},
        {"arch.d_model", std::to_string(arch.d_model)},
        {"arch.d_ffn", std::to_string(arch.d_ffn)},
        {"arch.n_heads", std::to_string(arch.n_heads)},
        {"arch.rel_pos_max_distance", std::to_string(arch.rel_pos_max_distance)},
        {"conv.layers", std::to_string(conv.layers.size())},
        {"conv.channels", std::to_string(conv.layers.back().channels)},
    };
    std::string diffs;
    for (const auto& [key, want] : expected) {
        auto it = ckpt.metadata.find(key);
        const std::string have = it == ckpt.metadata.end() ? std::string("<missing>") : it->second;
        if (have != want) {
            if (!diffs.empty()) diffs += ", ";
            diffs += std::string(key) + " checkpoint=" + have + " requested=" + want;
        }
    }
    if (!diffs.empty()) {
        throw dimension_error("init_from_pretrained: incompatible architecture: " + diffs);
    }
}

bool copied_from_pretrain(const std::string& name) {
    if (name.rfind("prenet.", 0) == 0) return true;
    if (name.rfind("encoder.", 0) == 0) return true;
    if (name.rfind("decoder.", 0) == 0 && name != "decoder.embed") return true;
    return false;
}

}  // namespace

std::map<std::string, std::string> arch_metadata(const ArchConfig& arch, const ConvStackConfig& conv) {
    return {
        {"arch.enc_layers", std::to_string(arch.enc_layers)},
        {"arch.dec_layers", std::to_string(arch.dec_layers)},
        {"arch.d_model", std::to_string(arch.d_model)},
        {"arch.d_ffn", std::to_string(arch.d_ffn)},
        {"arch.n_heads", std::to_string(arch.n_heads)},
        {"arch.rel_pos_max_distance", std::to_string(arch.rel_pos_max_distance)},
        {"conv.layers", std::to_string(conv.layers.size())},
        {"conv.channels", std::to_string(conv.layers.back().channels)},
    };
}

ModelParams init_from_pretrained(const Checkpoint& ckpt, const ArchConfig& arch,
                                 const ConvStackConfig& conv, const CharVocab& vocab,
                                 std::uint64_t seed) {
    check_arch_compatible(ckpt, arch, conv);
    ModelParams params = build_finetune_params(arch, conv, vocab.size(), seed);
    for (auto& [name, t] : params.tensors) {
        if (!copied_from_pretrain(name)) continue;  // fresh char/CTC layers keep their seeded init
        auto it = ckpt.tensors.find(name);
        if (it == ckpt.tensors.end()) {
            throw format_error("init_from_pretrained: checkpoint is missing tensor '" + name + "'");
        }
        if (it->second->shape != t->shape) {
            throw dimension_error("init_from_pretrained: tensor '" + name + "' has shape " +
                                  shape_str(it->second->shape) + ", model expects " + shape_str(t->shape));
        }
        t->data = it->second->data;
    }
    return params;
}

bool is_encoder_side_param(const std::string& name) {
    return name.rfind("prenet.", 0) == 0 || name.rfind("encoder.", 0) == 0;
}

// ---------------------------------------------------------------------------
// CTC loss
// ---------------------------------------------------------------------------

int ctc_min_frames(const std::vector<int>& target) {
    int repeats = 0;
    for (std::size_t i = 1; i < target.size(); ++i) {
        if (target[i] == target[i - 1]) ++repeats;
    }
    return static_cast<int>(target.size()) + repeats;
}

TensorPtr ctc_loss(const TensorPtr& log_probs, const std::vector<int>& target, int blank) {
    if (log_probs->shape.size() != 2) {
        throw dimension_error("ctc_loss: log_probs " + shape_str(log_probs->shape));
    }
    const int T = log_probs->shape[0];
    const int V = log_probs->shape[1];
    if (blank < 0 || blank >= V) {
        throw index_error("ctc_loss: blank " + std::to_string(blank) + " outside [0," + std::to_string(V) + ")");
    }
    for (std::size_t i = 0; i < target.size(); ++i) {
        if (target[i] < 0 || target[i] >= V || target[i] == blank) {
            throw index_error("ctc_loss: target " + std::to_string(target[i]) + " at position " +
                              std::to_string(i) + " invalid for vocab " + std::to_string(V));
        }
    }
    if (T < ctc_min_frames(target)) {
        throw argument_error("ctc_loss: infeasible alignment, " + std::to_string(T) + " frames for target needing " +
                             std::to_string(ctc_min_frames(target)));
    }

    // augmented label sequence: blank, l1, blank, l2, ..., blank
    const int L = static_cast<int>(target.size());
    const int S = 2 * L + 1;
    auto label = [&](int s) { return s % 2 == 0 ? blank : target[static_cast<std::size_t>(s / 2)]; };
    auto lp = [&](int t, int s) { return log_probs->data[static_cast<std::size_t>(t) * V + label(s)]; };
    // a skip s-2 -> s is legal when the state is a non-blank different from
    // the previous non-blank
    auto can_skip = [&](int s) {
        return s % 2 == 1 && s >= 2 && label(s) != label(s - 2);
    };

    // alpha[t][s]: log-prob of emitting frames 0..t and being in state s
    std::vector<double> alpha(static_cast<std::size_t>(T) * S, kNegInf);
    alpha[0] = lp(0, 0);
    if (S > 1) alpha[1] = lp(0, 1);
    for (int t = 1; t < T; ++t) {
        for (int s = 0; s < S; ++s) {
            double acc = alpha[static_cast<std::size_t>(t - 1) * S + s];
            if (s >= 1) acc = log_add(acc, alpha[static_cast<std::size_t>(t - 1) * S + s - 1]);
            if (can_skip(s)) acc = log_add(acc, alpha[static_cast<std::size_t>(t - 1) * S + s - 2]);
            alpha[static_cast<std::size_t>(t) * S + s] = acc == kNegInf ? kNegInf : acc + lp(t, s);
        }
    }
    double log_total = alpha[static_cast<std::size_t>(T - 1) * S + S - 1];
    if (S > 1) log_total = log_add(log_total, alpha[static_cast<std::size_t>(T - 1) * S + S - 2]);

    auto out = make_op_node({1}, {log_probs}, [log_probs, target, blank, T, V, S, log_total,
                                               alpha = std::move(alpha)](Tensor& self) {
        if (!log_probs->requires_grad || log_total == kNegInf) return;
        log_probs->ensure_grad();
        auto label = [&](int s) { return s % 2 == 0 ? blank : target[static_cast<std::size_t>(s / 2)]; };
        auto lp = [&](int t, int s) {
            return log_probs->data[static_cast<std::size_t>(t) * V + label(s)];
        };
        auto can_skip = [&](int s) { return s % 2 == 1 && s >= 2 && label(s) != label(s - 2); };
        // beta[t][s]: log-prob of emitting frames t+1..T-1 given state s at t
        std::vector<double> beta(static_cast<std::size_t>(T) * S, kNegInf);
        beta[static_cast<std::size_t>(T - 1) * S + S - 1] = 0.0;
        if (S > 1) beta[static_cast<std::size_t>(T - 1) * S + S - 2] = 0.0;
        for (int t = T - 2; t >= 0; --t) {
            for (int s = 0; s < S; ++s) {
                double acc = beta[static_cast<std::size_t>(t + 1) * S + s] + lp(t + 1, s);
                if (s + 1 < S) {
                    acc = log_add(acc, beta[static_cast<std::size_t>(t + 1) * S + s + 1] + lp(t + 1, s + 1));
                }
                if (s + 2 < S && can_skip(s + 2)) {
                    acc = log_add(acc, beta[static_cast<std::size_t>(t + 1) * S + s + 2] + lp(t + 1, s + 2));
                }
                beta[static_cast<std::size_t>(t) * S + s] = acc;
            }
        }
        // d(-log p)/d(log_probs[t][v]) = -sum over states with label v of
        // exp(alpha + beta - log p)
        const double g = self.grad[0];
        for (int t = 0; t < T; ++t) {
            for (int s = 0; s < S; ++s) {
                const double ab = alpha[static_cast<std::size_t>(t) * S + s] +
                                  beta[static_cast<std::size_t>(t) * S + s];
                if (ab == kNegInf) continue;
                log_probs->grad[static_cast<std::size_t>(t) * V + label(s)] -=
                    g * std::exp(ab - log_total);
            }
        }
    });
    out->data[0] = -log_total;
    return out;
}

TensorPtr ctc_log_probs(const TensorPtr& enc_out, const ModelParams& params) {
    return log_softmax(add_rows(matmul(enc_out, params.at("ctc.w")), params.at("ctc.b")));
}

// ---------------------------------------------------------------------------
// fine-tuning step
// ---------------------------------------------------------------------------

FinetuneMetrics finetune_step(const Waveform& wav, const std::string& transcript, ModelParams& params,
                              const ArchConfig& arch, const ConvStackConfig& conv,
                              const CharVocab& vocab, AdamState& opt, const FinetuneConfig& cfg,
                              std::int64_t step) {
    if (cfg.ctc_weight < 0 || cfg.ce_weight < 0 || cfg.ctc_weight + cfg.ce_weight <= 0) {
        throw argument_error("finetune_step: loss weights must be >= 0 with positive sum");
    }
    if (!grad_enabled()) throw contract_error("finetune_step: gradient recording is disabled");
    std::vector<TensorPtr> kernels;
    for (std::size_t i = 0; i < conv.layers.size(); ++i) {
        kernels.push_back(params.at("prenet.conv" + std::to_string(i) + ".w"));
    }
    auto feats = feature_encode(wav, conv, kernels);
    auto h = encoder_forward(project_features(feats, params), params, arch);

    const auto char_ids = vocab.encode(normalize_transcript(transcript));
    auto lctc = ctc_loss(ctc_log_probs(h, params), char_ids, CharVocab::BLANK);

    std::vector<int> dec_in;
    dec_in.reserve(char_ids.size() + 1);
    dec_in.push_back(CharVocab::BOS);
    dec_in.insert(dec_in.end(), char_ids.begin(), char_ids.end());
    std::vector<int> dec_tgt = char_ids;
    dec_tgt.push_back(CharVocab::EOS);
    auto logits = decoder_forward(dec_in, h, params, arch);
    auto lce = cross_entropy(log_softmax(logits), dec_tgt);

    auto total = add(scale(lctc, cfg.ctc_weight), scale(lce, cfg.ce_weight));
    FinetuneMetrics metrics{lctc->value(), lce->value()};
    if (!std::isfinite(total->value())) {
        std::ostringstream os;
        os << "finetune_step: non-finite loss at step " << step << " (lctc=" << metrics.lctc
           << ", lce=" << metrics.lce << ")";
        throw std::runtime_error(os.str());
    }
    params.zero_grads();
    backward(total);
    const bool frozen = static_cast<double>(step) < cfg.freeze_frac * static_cast<double>(cfg.total_steps);
    if (frozen) {
        for (auto& [name, t] : params.tensors) {
            if (is_encoder_side_param(name)) t->zero_grad();
        }
    }
    adam_step(params.all(), opt, lr_schedule_tristage(step, cfg.total_steps, cfg.peak_lr));
    return metrics;
}

double lr_schedule_tristage(std::int64_t step, std::int64_t total_steps, double peak) {
    if (total_steps < 1) throw argument_error("lr_schedule_tristage: total_steps must be >= 1");
    if (step < 0 || step > total_steps) {
        throw argument_error("lr_schedule_tristage: step " + std::to_string(step) + " outside [0," +
                             std::to_string(total_steps) + "]");
    }
    const double total = static_cast<double>(total_steps);
    const double warmup = 0.1 * total;
    const double hold_end = 0.5 * total;
    const double s = static_cast<double>(step);
    if (s < warmup) return peak * s / warmup;
    if (s < hold_end) return peak;
    return peak * (total - s) / (total - hold_end);
}

}  // namespace s2c
