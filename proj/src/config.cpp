#include "speech2c/config.hpp"

#include <charconv>
#include <cstdio>
#include <fstream>
#include <functional>
#include <map>
#include <sstream>

#include "speech2c/errors.hpp"
#include "speech2c/rng.hpp"

namespace s2c {

namespace {

struct KeyHandler {
    std::function<void(Config&, const std::string&)> set;
    std::function<std::string(const Config&)> get;
};

std::string trim(const std::string& s) {
    const auto b = s.find_first_not_of(" \t\r");
    if (b == std::string::npos) return "";
    const auto e = s.find_last_not_of(" \t\r");
    return s.substr(b, e - b + 1);
}

template <typename T>
T parse_number(const std::string& key, const std::string& value) {
    std::istringstream is(value);
    T v;
    if (!(is >> v) || !(is >> std::ws).eof()) {
        throw config_error("config: unparsable value '" + value + "' for key '" + key + "'");
    }
    return v;
}

std::string format_double(double v) {
    char buf[40];
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    return buf;
}

const std::map<std::string, KeyHandler>& registry() {
    static const std::map<std::string, KeyHandler> g = [] {
        std::map<std::string, KeyHandler> m;
        auto add_int = [&m](const std::string& key, auto member) {
            m[key] = {[key, member](Config& c, const std::string& v) {
                          c.*member = parse_number<std::remove_reference_t<decltype(std::declval<Config>().*member)>>(key, v);
                      },
                      [member](const Config& c) { return std::to_string(c.*member); }};
        };
        auto add_double = [&m](const std::string& key, double Config::*member) {
            m[key] = {[key, member](Config& c, const std::string& v) { c.*member = parse_number<double>(key, v); },
                      [member](const Config& c) { return format_double(c.*member); }};
        };
        auto add_string = [&m](const std::string& key, std::string Config::*member) {
            m[key] = {[member](Config& c, const std::string& v) { c.*member = v; },
                      [member](const Config& c) { return c.*member; }};
        };
        add_int("seed", &Config::seed);
        add_int("enc_layers", &Config::enc_layers);
        add_int("dec_layers", &Config::dec_layers);
        add_int("d_model", &Config::d_model);
        add_int("d_ffn", &Config::d_ffn);
        add_int("n_heads", &Config::n_heads);
        add_int("rel_pos_max_distance", &Config::rel_pos_max_distance);
        add_int("code_embed_dim", &Config::code_embed_dim);
        add_string("conv_preset", &Config::conv_preset);
        add_int("conv_channels", &Config::conv_channels);
        add_int("codebook_size", &Config::codebook_size);
        add_int("kmeans_iters", &Config::kmeans_iters);
        add_double("kmeans_tol", &Config::kmeans_tol);
        add_int("feature_bands", &Config::feature_bands);
        add_double("mask_prob", &Config::mask_prob);
        add_int("span_len", &Config::span_len);
        add_int("pretrain_steps", &Config::pretrain_steps);
        add_double("pretrain_peak_lr", &Config::pretrain_peak_lr);
        add_double("lambda_mlm", &Config::lambda_mlm);
        add_double("lambda_mle", &Config::lambda_mle);
        add_string("codes_mode", &Config::codes_mode);
        add_int("finetune_steps", &Config::finetune_steps);
        add_double("finetune_peak_lr", &Config::finetune_peak_lr);
        add_double("ctc_weight", &Config::ctc_weight);
        add_double("ce_weight", &Config::ce_weight);
        add_double("freeze_frac", &Config::freeze_frac);
        add_int("finetune_eval_every", &Config::finetune_eval_every);
        add_int("synth_utts", &Config::synth_utts);
        add_double("synth_dur_min", &Config::synth_dur_min);
        add_double("synth_dur_max", &Config::synth_dur_max);
        add_string("synth_vocab", &Config::synth_vocab);
        add_int("beam", &Config::beam);
        add_double("lambda_ctc", &Config::lambda_ctc);
        add_double("lambda_lm", &Config::lambda_lm);
        add_int("max_decode_len", &Config::max_decode_len);
        add_int("lm_layers", &Config::lm_layers);
        add_int("lm_d_model", &Config::lm_d_model);
        add_int("lm_d_ffn", &Config::lm_d_ffn);
        add_int("lm_heads", &Config::lm_heads);
        add_int("lm_steps", &Config::lm_steps);
        add_double("lm_lr", &Config::lm_lr);
        return m;
    }();
    return g;
}

void apply_kv(Config& cfg, const std::string& key, const std::string& value, const std::string& where) {
    auto it = registry().find(key);
    if (it == registry().end()) {
        throw config_error("config: unknown key '" + key + "' " + where);
    }
    it->second.set(cfg, value);
}

}  // namespace

ArchConfig Config::arch() const {
    ArchConfig a;
    a.enc_layers = enc_layers;
    a.dec_layers = dec_layers;
    a.d_model = d_model;
    a.d_ffn = d_ffn;
    a.n_heads = n_heads;
    a.rel_pos_max_distance = rel_pos_max_distance;
    a.C = codebook_size;
    a.code_embed_dim = code_embed_dim;
    return a;
}

ConvStackConfig Config::conv() const {
    if (conv_preset == "paper") return ConvStackConfig::paper();
    if (conv_preset == "desk") return ConvStackConfig::desk(conv_channels);
    throw config_error("config: conv_preset must be 'desk' or 'paper', got '" + conv_preset + "'");
}

MaskSpec Config::mask_spec() const {
    MaskSpec spec;
    spec.mask_prob = mask_prob;
    spec.span_len = span_len;
    spec.seed = derive_seed(seed, "mask");
    return spec;
}

void Config::validate() const {
    arch().validate();
    conv().validate();
    MaskSpec ms{mask_prob, span_len, 0};
    ms.validate();
    if (codes_mode != "reduced" && codes_mode != "repeated") {
        throw config_error("config: codes_mode must be 'reduced' or 'repeated', got '" + codes_mode + "'");
    }
    if (pretrain_steps < 1 || finetune_steps < 1 || lm_steps < 1) {
        throw config_error("config: step counts must be >= 1");
    }
    if (ctc_weight < 0 || ce_weight < 0 || ctc_weight + ce_weight <= 0) {
        throw config_error("config: ctc_weight/ce_weight must be >= 0 and sum > 0");
    }
    if (freeze_frac < 0 || freeze_frac > 1) throw config_error("config: freeze_frac must be in [0,1]");
    if (beam < 1) throw config_error("config: beam must be >= 1");
    if (lambda_ctc < 0 || lambda_ctc > 1 || lambda_lm < 0) {
        throw config_error("config: lambda_ctc in [0,1] and lambda_lm >= 0 required");
    }
}

std::string Config::canonical_text() const {
    std::ostringstream os;
    for (const auto& [key, handler] : registry()) {
        os << key << " = " << handler.get(*this) << '\n';
    }
    return os.str();
}

std::uint64_t Config::fingerprint() const {
    const std::string text = canonical_text();
    std::uint64_t h = 1469598103934665603ULL;
    for (char c : text) {
        h ^= static_cast<std::uint64_t>(static_cast<unsigned char>(c));
        h *= 1099511628211ULL;
    }
    return h;
}

Config parse_config(const std::string& path, const std::vector<std::string>& overrides) {
    Config cfg;
    std::ifstream in(path);
    if (!in) throw config_error("config: cannot open " + path);
    std::string line;
    int lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        const auto hash = line.find('#');
        if (hash != std::string::npos) line = line.substr(0, hash);
        line = trim(line);
        if (line.empty()) continue;
        const auto eq = line.find('=');
        if (eq == std::string::npos) {
            throw config_error("config: line " + std::to_string(lineno) + " of " + path +
                               " is not 'key = value'");
        }
        apply_kv(cfg, trim(line.substr(0, eq)), trim(line.substr(eq + 1)),
                 "at line " + std::to_string(lineno) + " of " + path);
    }
    for (const auto& ov : overrides) {
        const auto eq = ov.find('=');
        if (eq == std::string::npos) throw config_error("config: override '" + ov + "' is not key=value");
        apply_kv(cfg, trim(ov.substr(0, eq)), trim(ov.substr(eq + 1)), "from command line");
    }
    cfg.validate();
    return cfg;
}

Config config_from_overrides(const std::vector<std::string>& overrides) {
    Config cfg;
    for (const auto& ov : overrides) {
        const auto eq = ov.find('=');
        if (eq == std::string::npos) throw config_error("config: override '" + ov + "' is not key=value");
        apply_kv(cfg, trim(ov.substr(0, eq)), trim(ov.substr(eq + 1)), "from command line");
    }
    cfg.validate();
    return cfg;
}

}  // namespace s2c
