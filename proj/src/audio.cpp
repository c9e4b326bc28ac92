#include "speech2c/audio.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <numbers>

#include "speech2c/errors.hpp"
#include "speech2c/rng.hpp"

namespace s2c {

ConvStackConfig ConvStackConfig::paper() {
    ConvStackConfig cfg;
    const int strides[] = {5, 2, 2, 2, 2, 2, 2};
    const int kernels[] = {10, 3, 3, 3, 3, 2, 2};
    for (int i = 0; i < 7; ++i) cfg.layers.push_back({512, kernels[i], strides[i]});
    return cfg;
}

ConvStackConfig ConvStackConfig::desk(int channels) {
    ConvStackConfig cfg = paper();
    for (auto& l : cfg.layers) l.channels = channels;
    return cfg;
}

void ConvStackConfig::validate() const {
    if (layers.empty()) throw argument_error("conv stack needs at least one layer");
    for (const auto& l : layers) {
        if (l.channels < 1 || l.kernel < 1 || l.stride < 1) {
            throw argument_error("conv stack layer needs positive channels/kernel/stride");
        }
    }
}

int frame_count(int n_samples, const ConvStackConfig& cfg) {
    int t = n_samples;
    for (const auto& l : cfg.layers) {
        if (t < l.kernel) return 0;
        t = (t - l.kernel) / l.stride + 1;
    }
    return t;
}

int total_stride(const ConvStackConfig& cfg) {
    int s = 1;
    for (const auto& l : cfg.layers) s *= l.stride;
    return s;
}

int receptive_field(const ConvStackConfig& cfg) {
    int r = 1;
    int jump = 1;
    for (const auto& l : cfg.layers) {
        r += (l.kernel - 1) * jump;
        jump *= l.stride;
    }
    return r;
}

int min_input_samples(const ConvStackConfig& cfg) { return receptive_field(cfg); }

// ---------------------------------------------------------------------------
// WAV I/O
// ---------------------------------------------------------------------------

namespace {

std::uint32_t read_u32(const unsigned char* p) {
    return static_cast<std::uint32_t>(p[0]) | (static_cast<std::uint32_t>(p[1]) << 8) |
           (static_cast<std::uint32_t>(p[2]) << 16) | (static_cast<std::uint32_t>(p[3]) << 24);
}

std::uint16_t read_u16(const unsigned char* p) {
    return static_cast<std::uint16_t>(p[0] | (p[1] << 8));
}

void put_u32(std::string& s, std::uint32_t v) {
    s.push_back(static_cast<char>(v & 0xff));
    s.push_back(static_cast<char>((v >> 8) & 0xff));
    s.push_back(static_cast<char>((v >> 16) & 0xff));
    s.push_back(static_cast<char>((v >> 24) & 0xff));
}

void put_u16(std::string& s, std::uint16_t v) {
    s.push_back(static_cast<char>(v & 0xff));
    s.push_back(static_cast<char>((v >> 8) & 0xff));
}

}  // namespace

Waveform load_wav(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw format_error("load_wav: cannot open " + path);
    std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    const auto* p = reinterpret_cast<const unsigned char*>(bytes.data());
    const std::size_t n = bytes.size();
    if (n < 12 || std::memcmp(p, "RIFF", 4) != 0) throw format_error("load_wav: missing RIFF header in " + path);
    if (std::memcmp(p + 8, "WAVE", 4) != 0) throw format_error("load_wav: RIFF form is not WAVE in " + path);

    Waveform w;
    bool have_fmt = false, have_data = false;
    std::size_t off = 12;
    while (off + 8 <= n) {
        const char* id = reinterpret_cast<const char*>(p + off);
        const std::uint32_t sz = read_u32(p + off + 4);
        const std::size_t body = off + 8;
        if (body + sz > n) throw format_error("load_wav: chunk '" + std::string(id, 4) + "' overruns file");
        if (std::memcmp(id, "fmt ", 4) == 0) {
            if (sz < 16) throw format_error("load_wav: fmt chunk too short");
            const std::uint16_t audio_format = read_u16(p + body);
            const std::uint16_t channels = read_u16(p + body + 2);
            const std::uint32_t rate = read_u32(p + body + 4);
            const std::uint16_t bits = read_u16(p + body + 14);
            if (audio_format != 1) {
                throw format_error("load_wav: audio_format " + std::to_string(audio_format) +
                                   " is not PCM");
            }
            if (channels != 1) {
                throw format_error("load_wav: num_channels " + std::to_string(channels) +
                                   " (mono required)");
            }
            if (bits != 16) {
                throw format_error("load_wav: bits_per_sample " + std::to_string(bits) +
                                   " (PCM16 required)");
            }
            w.sample_rate = static_cast<int>(rate);
            have_fmt = true;
        } else if (std::memcmp(id, "data", 4) == 0) {
            if (!have_fmt) throw format_error("load_wav: data chunk before fmt chunk");
            if (sz % 2 != 0) throw format_error("load_wav: odd data chunk size");
            const std::size_t count = sz / 2;
            w.samples.resize(count);
            for (std::size_t i = 0; i < count; ++i) {
                const std::int16_t s =
                    static_cast<std::int16_t>(read_u16(p + body + 2 * i));
                w.samples[i] = static_cast<double>(s) / 32768.0;
            }
            have_data = true;
        }
        off = body + sz + (sz & 1);  // chunks are word-aligned
    }
    if (!have_fmt) throw format_error("load_wav: missing fmt chunk in " + path);
    if (!have_data) throw format_error("load_wav: missing data chunk in " + path);
    if (w.samples.empty()) throw format_error("load_wav: empty data chunk in " + path);
    return w;
}

void save_wav(const std::string& path, const Waveform& w) {
    if (w.samples.empty()) throw argument_error("save_wav: empty waveform");
    std::string out;
    const std::uint32_t data_bytes = static_cast<std::uint32_t>(w.samples.size() * 2);
    out.reserve(44 + data_bytes);
    out += "RIFF";
    put_u32(out, 36 + data_bytes);
    out += "WAVE";
    out += "fmt ";
    put_u32(out, 16);
    put_u16(out, 1);  // PCM
    put_u16(out, 1);  // mono
    put_u32(out, static_cast<std::uint32_t>(w.sample_rate));
    put_u32(out, static_cast<std::uint32_t>(w.sample_rate * 2));  // byte rate
    put_u16(out, 2);                                              // block align
    put_u16(out, 16);                                             // bits
    out += "data";
    put_u32(out, data_bytes);
    for (double x : w.samples) {
        const double clamped = std::clamp(x, -1.0, 1.0);
        long v = std::lround(clamped * 32768.0);
        v = std::clamp(v, -32768L, 32767L);
        put_u16(out, static_cast<std::uint16_t>(static_cast<std::int16_t>(v)));
    }
    std::ofstream f(path, std::ios::binary);
    if (!f) throw format_error("save_wav: cannot open " + path + " for writing");
    f.write(out.data(), static_cast<std::streamsize>(out.size()));
    if (!f) throw format_error("save_wav: short write to " + path);
}

// ---------------------------------------------------------------------------
// feature encoding
// ---------------------------------------------------------------------------

TensorPtr feature_encode(const Waveform& w, const ConvStackConfig& cfg,
                         const std::vector<TensorPtr>& kernels) {
    cfg.validate();
    if (kernels.size() != cfg.layers.size()) {
        throw dimension_error("feature_encode: " + std::to_string(kernels.size()) + " kernels for " +
                              std::to_string(cfg.layers.size()) + " layers");
    }
    const int need = min_input_samples(cfg);
    if (static_cast<int>(w.samples.size()) < need) {
        throw argument_error("feature_encode: input of " + std::to_string(w.samples.size()) +
                             " samples too short, need at least " + std::to_string(need));
    }
    auto x = Tensor::from({static_cast<int>(w.samples.size()), 1}, w.samples);
    for (std::size_t i = 0; i < cfg.layers.size(); ++i) {
        x = gelu(conv1d(x, kernels[i], cfg.layers[i].stride));
    }
    return x;
}

// ---------------------------------------------------------------------------
// synthetic corpus
// ---------------------------------------------------------------------------

int synth_symbol_samples() { return 1600; }

std::vector<double> symbol_signature(char symbol, int sample_rate) {
    const int n = synth_symbol_samples();
    std::vector<double> sig(static_cast<std::size_t>(n), 0.0);
    if (symbol == ' ') {
        // near-silence keeps the frame features non-degenerate
        Rng noise(derive_seed(0x5f3759df, "space"));
        for (int i = 0; i < n; ++i) sig[static_cast<std::size_t>(i)] = 0.004 * (noise.uniform01() - 0.5);
        return sig;
    }
    const int idx = static_cast<int>(static_cast<unsigned char>(symbol));
    const double f1 = 220.0 + 97.0 * (idx % 29);
    const double f2 = 850.0 + 151.0 * (idx % 23);
    Rng noise(derive_seed(static_cast<std::uint64_t>(idx), "signature"));
    const double twopi = 2.0 * std::numbers::pi;
    for (int i = 0; i < n; ++i) {
        const double t = static_cast<double>(i) / sample_rate;
        double v = 0.32 * std::sin(twopi * f1 * t) + 0.28 * std::sin(twopi * f2 * t + 0.7 * idx);
        v += 0.02 * (noise.uniform01() - 0.5);
        // short fade at both ends against boundary clicks
        const int ramp = 64;
        if (i < ramp) v *= static_cast<double>(i) / ramp;
        if (i >= n - ramp) v *= static_cast<double>(n - 1 - i) / ramp;
        sig[static_cast<std::size_t>(i)] = v;
    }
    return sig;
}

Waveform render_transcript(const std::string& transcript, int sample_rate) {
    if (transcript.empty()) throw argument_error("render_transcript: empty transcript");
    Waveform w;
    w.sample_rate = sample_rate;
    w.samples.reserve(transcript.size() * static_cast<std::size_t>(synth_symbol_samples()));
    for (char c : transcript) {
        const char sym = (c == ' ') ? ' ' : static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
        auto sig = symbol_signature(sym, sample_rate);
        w.samples.insert(w.samples.end(), sig.begin(), sig.end());
    }
    return w;
}

std::vector<std::pair<Waveform, std::string>> synth_corpus(const SynthSpec& spec) {
    if (spec.vocab.empty()) throw argument_error("synth_corpus: empty vocab");
    if (spec.n_utts < 1) throw argument_error("synth_corpus: n_utts must be >= 1");
    if (!(spec.dur_min_s > 0.0) || spec.dur_max_s < spec.dur_min_s) {
        throw argument_error("synth_corpus: bad duration range");
    }
    Rng rng(derive_seed(spec.seed, "synth"));
    const double sym_dur = static_cast<double>(synth_symbol_samples()) / spec.sample_rate;
    std::vector<std::pair<Waveform, std::string>> corpus;
    corpus.reserve(static_cast<std::size_t>(spec.n_utts));
    for (int u = 0; u < spec.n_utts; ++u) {
        const double target = rng.uniform(spec.dur_min_s, spec.dur_max_s);
        const int n_syms = std::max(1, static_cast<int>(std::lround(target / sym_dur)));
        std::string transcript;
        int remaining = n_syms;
        while (remaining > 0) {
            const int wlen = std::min(remaining, 2 + static_cast<int>(rng.below(3)));  // words of 2..4
            for (int k = 0; k < wlen; ++k) {
                const char sym = spec.vocab[static_cast<std::size_t>(rng.below(spec.vocab.size()))];
                transcript.push_back(static_cast<char>(std::toupper(static_cast<unsigned char>(sym))));
            }
            remaining -= wlen;
            if (remaining >= 2) {  // room for a separator plus at least one symbol
                transcript.push_back(' ');
                --remaining;
            } else {
                remaining = 0;
            }
        }
        corpus.emplace_back(render_transcript(transcript, spec.sample_rate), transcript);
    }
    return corpus;
}

// ---------------------------------------------------------------------------
// manifest
// ---------------------------------------------------------------------------

std::vector<ManifestEntry> read_manifest(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw format_error("read_manifest: cannot open " + path);
    std::vector<ManifestEntry> entries;
    std::string line;
    int lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.empty()) continue;
        const auto tab = line.find('\t');
        if (tab == std::string::npos) {
            throw format_error("read_manifest: line " + std::to_string(lineno) + " has no tab separator");
        }
        entries.push_back({line.substr(0, tab), line.substr(tab + 1)});
    }
    return entries;
}

void write_manifest(const std::string& path, const std::vector<ManifestEntry>& entries) {
    std::ofstream out(path);
    if (!out) throw format_error("write_manifest: cannot open " + path + " for writing");
    for (const auto& e : entries) out << e.wav_path << '\t' << e.transcript << '\n';
    if (!out) throw format_error("write_manifest: short write to " + path);
}

std::string parent_dir(const std::string& path) {
    const auto pos = path.find_last_of('/');
    return pos == std::string::npos ? std::string() : path.substr(0, pos);
}

}  // namespace s2c
