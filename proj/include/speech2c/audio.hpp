#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "speech2c/tensor.hpp"

namespace s2c {

struct Waveform {
    std::vector<double> samples;  // in [-1, 1]
    int sample_rate = 16000;
};

struct ConvLayerSpec {
    int channels;
    int kernel;
    int stride;
};

// Waveform pre-net geometry. Paper-scale: seven 512-channel layers,
// strides [5,2,2,2,2,2,2], kernels [10,3,3,3,3,2,2]; desk-scale keeps the
// strides/kernels and shrinks channels to 32.
struct ConvStackConfig {
    std::vector<ConvLayerSpec> layers;

    static ConvStackConfig paper();                 // 512 channels
    static ConvStackConfig desk(int channels = 32); // same geometry, few channels
    void validate() const;
};

// Output frame count through the whole stack; 0 when the input is too short.
int frame_count(int n_samples, const ConvStackConfig& cfg);
// Samples consumed per output frame step (product of strides).
int total_stride(const ConvStackConfig& cfg);
// Input samples covered by one output frame.
int receptive_field(const ConvStackConfig& cfg);
// Smallest input length yielding one frame (== receptive_field).
int min_input_samples(const ConvStackConfig& cfg);

// RIFF/WAVE PCM16 mono only. Samples scaled by 1/32768.
Waveform load_wav(const std::string& path);
void save_wav(const std::string& path, const Waveform& w);

// Applies the conv stack (GELU between layers) to the waveform. `kernels`
// holds one [c_out, c_in, k] tensor per layer, matching cfg.
TensorPtr feature_encode(const Waveform& w, const ConvStackConfig& cfg,
                         const std::vector<TensorPtr>& kernels);

struct SynthSpec {
    int n_utts = 20;
    double dur_min_s = 0.5;
    double dur_max_s = 1.0;
    std::string vocab = "abcdefgh";  // pseudo-phoneme symbols
    std::uint64_t seed = 1;
    int sample_rate = 16000;
};

// Samples per rendered symbol signature (fixed so transcripts concatenate
// exactly and frames of one symbol look alike everywhere).
int synth_symbol_samples();

// Deterministic per-symbol tone+pseudo-noise signature; ' ' renders as
// near-silence. Depends only on the symbol, not the corpus seed.
std::vector<double> symbol_signature(char symbol, int sample_rate);

// Renders a transcript (already uppercased, may contain spaces) to audio.
Waveform render_transcript(const std::string& transcript, int sample_rate);

// Deterministic toy corpus: word-shaped transcripts over `vocab`, rendered
// symbol by symbol. Transcripts are uppercase.
std::vector<std::pair<Waveform, std::string>> synth_corpus(const SynthSpec& spec);

// Manifest: one line per utterance, "<relative-wav-path>\t<transcript>".
struct ManifestEntry {
    std::string wav_path;  // relative to the manifest directory
    std::string transcript;
};
std::vector<ManifestEntry> read_manifest(const std::string& path);
void write_manifest(const std::string& path, const std::vector<ManifestEntry>& entries);
// Directory part of a path ("" when none), for resolving relative wav paths.
std::string parent_dir(const std::string& path);

}  // namespace s2c
