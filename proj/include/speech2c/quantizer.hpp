#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "speech2c/audio.hpp"

namespace s2c {

// Integer acoustic-unit labels for one utterance. Frame-level sequences have
// one code per encoder frame; reduced sequences collapse adjacent repeats.
struct CodeSequence {
    std::vector<int> codes;
    bool reduced = false;
};

struct KMeansModel {
    int C = 0;                       // number of classes
    int dim = 0;                     // feature dimensionality
    std::string feature_kind;        // identifier of the fit-time frame features
    std::vector<double> centroids;   // row-major C x dim
};

// Log-magnitude band-energy features at the conv pre-net frame rate: one
// feature row per encoder frame, window = receptive field, hop = total
// stride, `bands` goertzel-style band magnitudes. Codes produced from these
// align 1:1 with encoder frames.
std::vector<std::vector<double>> frame_features(const Waveform& w, const ConvStackConfig& cfg,
                                                int bands = 16);
std::string frame_feature_kind(const ConvStackConfig& cfg, int bands = 16);

// Lloyd's algorithm with k-means++ seeding. The objective (sum of squared
// distances) is non-increasing per iteration; empty clusters are re-seeded
// from the farthest point.
KMeansModel kmeans_fit(const std::vector<std::vector<double>>& features, int C, std::uint64_t seed,
                       int max_iters = 50, double tol = 1e-7);

// Nearest centroid by squared Euclidean distance, ties to the lowest index.
CodeSequence kmeans_assign(const KMeansModel& model, const std::vector<std::vector<double>>& features);

// Objective of an assignment, exposed for monotonicity checks.
double kmeans_objective(const KMeansModel& model, const std::vector<std::vector<double>>& features);

// Collapses runs of equal adjacent codes to a single occurrence.
CodeSequence reduce_codes(const CodeSequence& z);

// ---- code/text correlation report ----

struct SymbolCodeStats {
    char symbol;
    long frames = 0;
    double purity = 0.0;          // max class probability for this symbol
    std::vector<int> top_codes;   // most frequent codes, descending
};

struct CodeTextReport {
    std::vector<SymbolCodeStats> rows;  // sorted by symbol
    int skipped_pairs = 0;              // zero-length code sequences
    std::string text;                   // human-readable rendering
};

// Correlates frame codes with transcript symbols. Frames are attributed to
// symbols proportionally (the toy corpus renders every symbol at a fixed
// length, so proportional spans are the true alignment up to edge frames).
CodeTextReport code_text_report(const std::vector<CodeSequence>& codes,
                                const std::vector<std::string>& transcripts, int C,
                                int top_k = 3);

// ---- file formats ----

// Codes file: one utterance per line, space-separated decimal codes.
void write_codes(const std::string& path, const std::vector<CodeSequence>& codes);
std::vector<CodeSequence> read_codes(const std::string& path);

// Model file: text header (C, dim, feature_kind) then one centroid per line.
void save_kmeans(const std::string& path, const KMeansModel& model);
KMeansModel load_kmeans(const std::string& path);

}  // namespace s2c
