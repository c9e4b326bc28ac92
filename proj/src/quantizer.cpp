#include "speech2c/quantizer.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>
#include <map>
#include <numbers>
#include <sstream>

#include "speech2c/errors.hpp"
#include "speech2c/rng.hpp"

namespace s2c {

// ---------------------------------------------------------------------------
// frame features
// ---------------------------------------------------------------------------

std::string frame_feature_kind(const ConvStackConfig& cfg, int bands) {
    std::ostringstream os;
    os << "logband" << bands << "_hop" << total_stride(cfg) << "_win" << receptive_field(cfg);
    return os.str();
}

std::vector<std::vector<double>> frame_features(const Waveform& w, const ConvStackConfig& cfg,
                                                int bands) {
    if (bands < 1) throw argument_error("frame_features: bands must be >= 1");
    const int hop = total_stride(cfg);
    const int win = receptive_field(cfg);
    const int frames = frame_count(static_cast<int>(w.samples.size()), cfg);
    std::vector<std::vector<double>> feats(static_cast<std::size_t>(frames));
    if (frames == 0) return feats;

    // Band center frequencies spaced geometrically from 100 Hz to 0.45*sr.
    std::vector<double> omega(static_cast<std::size_t>(bands));
    const double f_lo = 100.0, f_hi = 0.45 * w.sample_rate;
    for (int b = 0; b < bands; ++b) {
        const double frac = bands == 1 ? 0.0 : static_cast<double>(b) / (bands - 1);
        const double f = f_lo * std::pow(f_hi / f_lo, frac);
        omega[static_cast<std::size_t>(b)] = 2.0 * std::numbers::pi * f / w.sample_rate;
    }
    for (int t = 0; t < frames; ++t) {
        auto& row = feats[static_cast<std::size_t>(t)];
        row.resize(static_cast<std::size_t>(bands));
        const int start = t * hop;
        for (int b = 0; b < bands; ++b) {
            // direct DFT magnitude at the band frequency
            double re = 0.0, im = 0.0;
            const double om = omega[static_cast<std::size_t>(b)];
            for (int i = 0; i < win; ++i) {
                const double x = w.samples[static_cast<std::size_t>(start + i)];
                re += x * std::cos(om * i);
                im -= x * std::sin(om * i);
            }
            row[static_cast<std::size_t>(b)] = std::log((re * re + im * im) / win + 1e-10);
        }
    }
    return feats;
}

// ---------------------------------------------------------------------------
// k-means
// ---------------------------------------------------------------------------

namespace {

double sq_dist(const double* a, const double* b, int d) {
    double s = 0.0;
    for (int j = 0; j < d; ++j) {
        const double diff = a[j] - b[j];
        s += diff * diff;
    }
    return s;
}

}  // namespace

double kmeans_objective(const KMeansModel& model, const std::vector<std::vector<double>>& features) {
    double obj = 0.0;
    for (const auto& f : features) {
        double best = std::numeric_limits<double>::infinity();
        for (int c = 0; c < model.C; ++c) {
            best = std::min(best, sq_dist(f.data(), &model.centroids[static_cast<std::size_t>(c) * model.dim],
                                          model.dim));
        }
        obj += best;
    }
    return obj;
}

KMeansModel kmeans_fit(const std::vector<std::vector<double>>& features, int C, std::uint64_t seed,
                       int max_iters, double tol) {
    if (C < 2) throw argument_error("kmeans_fit: C must be >= 2");
    const int n = static_cast<int>(features.size());
    if (n < C) {
        throw argument_error("kmeans_fit: " + std::to_string(n) + " frames for C=" + std::to_string(C));
    }
    const int d = static_cast<int>(features[0].size());
    for (const auto& f : features) {
        if (static_cast<int>(f.size()) != d) throw dimension_error("kmeans_fit: ragged feature rows");
    }

    KMeansModel model;
    model.C = C;
    model.dim = d;
    model.centroids.assign(static_cast<std::size_t>(C) * d, 0.0);

    Rng rng(seed);
    // k-means++ seeding
    {
        std::vector<double> min_d2(static_cast<std::size_t>(n), std::numeric_limits<double>::infinity());
        int first = static_cast<int>(rng.below(static_cast<std::uint64_t>(n)));
        std::copy(features[static_cast<std::size_t>(first)].begin(),
                  features[static_cast<std::size_t>(first)].end(), model.centroids.begin());
        for (int c = 1; c < C; ++c) {
            double total = 0.0;
            for (int i = 0; i < n; ++i) {
                const double d2 = sq_dist(features[static_cast<std::size_t>(i)].data(),
                                          &model.centroids[static_cast<std::size_t>(c - 1) * d], d);
                min_d2[static_cast<std::size_t>(i)] = std::min(min_d2[static_cast<std::size_t>(i)], d2);
                total += min_d2[static_cast<std::size_t>(i)];
            }
            int pick = 0;
            if (total > 0.0) {
                const double r = rng.uniform01() * total;
                double acc = 0.0;
                pick = n - 1;
                for (int i = 0; i < n; ++i) {
                    acc += min_d2[static_cast<std::size_t>(i)];
                    if (acc >= r) {
                        pick = i;
                        break;
                    }
                }
            } else {
                pick = static_cast<int>(rng.below(static_cast<std::uint64_t>(n)));
            }
            std::copy(features[static_cast<std::size_t>(pick)].begin(),
                      features[static_cast<std::size_t>(pick)].end(),
                      model.centroids.begin() + static_cast<std::size_t>(c) * d);
        }
    }

    std::vector<int> assign(static_cast<std::size_t>(n), 0);
    std::vector<double> dist(static_cast<std::size_t>(n), 0.0);
    double prev_obj = std::numeric_limits<double>::infinity();
    for (int iter = 0; iter < max_iters; ++iter) {
        // assignment step
        double obj = 0.0;
        for (int i = 0; i < n; ++i) {
            double best = std::numeric_limits<double>::infinity();
            int bc = 0;
            for (int c = 0; c < C; ++c) {
                const double d2 = sq_dist(features[static_cast<std::size_t>(i)].data(),
                                          &model.centroids[static_cast<std::size_t>(c) * d], d);
                if (d2 < best) {
                    best = d2;
                    bc = c;
                }
            }
            assign[static_cast<std::size_t>(i)] = bc;
            dist[static_cast<std::size_t>(i)] = best;
            obj += best;
        }
        // empty clusters grab the farthest point
        std::vector<int> counts(static_cast<std::size_t>(C), 0);
        for (int a : assign) ++counts[static_cast<std::size_t>(a)];
        for (int c = 0; c < C; ++c) {
            if (counts[static_cast<std::size_t>(c)] > 0) continue;
            int far = 0;
            double far_d = -1.0;
            for (int i = 0; i < n; ++i) {
                if (counts[static_cast<std::size_t>(assign[static_cast<std::size_t>(i)])] > 1 &&
                    dist[static_cast<std::size_t>(i)] > far_d) {
                    far_d = dist[static_cast<std::size_t>(i)];
                    far = i;
                }
            }
            --counts[static_cast<std::size_t>(assign[static_cast<std::size_t>(far)])];
            assign[static_cast<std::size_t>(far)] = c;
            counts[static_cast<std::size_t>(c)] = 1;
            dist[static_cast<std::size_t>(far)] = 0.0;
        }
        // update step
        std::fill(model.centroids.begin(), model.centroids.end(), 0.0);
        for (int i = 0; i < n; ++i) {
            const int c = assign[static_cast<std::size_t>(i)];
            for (int j = 0; j < d; ++j)
                model.centroids[static_cast<std::size_t>(c) * d + j] += features[static_cast<std::size_t>(i)][static_cast<std::size_t>(j)];
        }
        for (int c = 0; c < C; ++c) {
            const double inv = 1.0 / counts[static_cast<std::size_t>(c)];
            for (int j = 0; j < d; ++j) model.centroids[static_cast<std::size_t>(c) * d + j] *= inv;
        }
        if (prev_obj - obj <= tol * std::max(prev_obj, 1e-12) && iter > 0) break;
        prev_obj = obj;
    }
    return model;
}

CodeSequence kmeans_assign(const KMeansModel& model, const std::vector<std::vector<double>>& features) {
    CodeSequence z;
    z.codes.reserve(features.size());
    for (const auto& f : features) {
        if (static_cast<int>(f.size()) != model.dim) {
            throw dimension_error("kmeans_assign: feature dim " + std::to_string(f.size()) +
                                  " vs centroid dim " + std::to_string(model.dim));
        }
        double best = std::numeric_limits<double>::infinity();
        int bc = 0;
        for (int c = 0; c < model.C; ++c) {
            const double d2 =
                sq_dist(f.data(), &model.centroids[static_cast<std::size_t>(c) * model.dim], model.dim);
            if (d2 < best) {  // strict: ties keep the lowest index
                best = d2;
                bc = c;
            }
        }
        z.codes.push_back(bc);
    }
    return z;
}

CodeSequence reduce_codes(const CodeSequence& z) {
    CodeSequence out;
    out.reduced = true;
    out.codes.reserve(z.codes.size());
    for (int c : z.codes) {
        if (out.codes.empty() || out.codes.back() != c) out.codes.push_back(c);
    }
    return out;
}

// ---------------------------------------------------------------------------
// code/text report
// ---------------------------------------------------------------------------

CodeTextReport code_text_report(const std::vector<CodeSequence>& codes,
                                const std::vector<std::string>& transcripts, int C, int top_k) {
    if (codes.size() != transcripts.size()) {
        throw dimension_error("code_text_report: " + std::to_string(codes.size()) + " code sequences vs " +
                              std::to_string(transcripts.size()) + " transcripts");
    }
    CodeTextReport report;
    std::map<char, std::vector<long>> hist;  // symbol -> code counts
    for (std::size_t u = 0; u < codes.size(); ++u) {
        const auto& z = codes[u].codes;
        const auto& txt = transcripts[u];
        if (z.empty() || txt.empty()) {
            ++report.skipped_pairs;
            continue;
        }
        const int T = static_cast<int>(z.size());
        const int m = static_cast<int>(txt.size());
        for (int s = 0; s < m; ++s) {
            const int lo = static_cast<int>(static_cast<long>(s) * T / m);
            const int hi = static_cast<int>(static_cast<long>(s + 1) * T / m);
            auto& counts = hist[txt[static_cast<std::size_t>(s)]];
            if (counts.empty()) counts.assign(static_cast<std::size_t>(C), 0);
            for (int t = lo; t < hi; ++t) {
                const int c = z[static_cast<std::size_t>(t)];
                if (c < 0 || c >= C) {
                    throw index_error("code_text_report: code " + std::to_string(c) + " out of range [0," +
                                      std::to_string(C) + ")");
                }
                ++counts[static_cast<std::size_t>(c)];
            }
        }
    }
    std::ostringstream os;
    os << "symbol\tframes\tpurity\ttop_codes\n";
    for (const auto& [sym, counts] : hist) {
        SymbolCodeStats row;
        row.symbol = sym;
        for (long c : counts) row.frames += c;
        if (row.frames == 0) continue;
        std::vector<int> order(counts.size());
        for (std::size_t i = 0; i < counts.size(); ++i) order[i] = static_cast<int>(i);
        std::stable_sort(order.begin(), order.end(),
                         [&](int a, int b) { return counts[static_cast<std::size_t>(a)] > counts[static_cast<std::size_t>(b)]; });
        row.purity = static_cast<double>(counts[static_cast<std::size_t>(order[0])]) / row.frames;
        for (int i = 0; i < top_k && i < static_cast<int>(order.size()); ++i) {
            if (counts[static_cast<std::size_t>(order[static_cast<std::size_t>(i)])] == 0) break;
            row.top_codes.push_back(order[static_cast<std::size_t>(i)]);
        }
        char buf[64];
        std::snprintf(buf, sizeof(buf), "%.4f", row.purity);
        os << (sym == ' ' ? '_' : sym) << '\t' << row.frames << '\t' << buf << '\t';
        for (std::size_t i = 0; i < row.top_codes.size(); ++i) {
            if (i) os << ' ';
            os << row.top_codes[i];
        }
        os << '\n';
        report.rows.push_back(std::move(row));
    }
    if (report.skipped_pairs > 0) {
        os << "# skipped " << report.skipped_pairs << " pair(s) with empty codes or transcript\n";
    }
    report.text = os.str();
    return report;
}

// ---------------------------------------------------------------------------
// file formats
// ---------------------------------------------------------------------------

void write_codes(const std::string& path, const std::vector<CodeSequence>& codes) {
    std::ofstream out(path);
    if (!out) throw format_error("write_codes: cannot open " + path + " for writing");
    for (const auto& z : codes) {
        for (std::size_t i = 0; i < z.codes.size(); ++i) {
            if (i) out << ' ';
            out << z.codes[i];
        }
        out << '\n';
    }
    if (!out) throw format_error("write_codes: short write to " + path);
}

std::vector<CodeSequence> read_codes(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw format_error("read_codes: cannot open " + path);
    std::vector<CodeSequence> out;
    std::string line;
    int lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        CodeSequence z;
        std::istringstream is(line);
        long v;
        while (is >> v) z.codes.push_back(static_cast<int>(v));
        if (!is.eof()) {
            throw format_error("read_codes: unparsable token on line " + std::to_string(lineno));
        }
        out.push_back(std::move(z));
    }
    return out;
}

void save_kmeans(const std::string& path, const KMeansModel& model) {
    std::ofstream out(path);
    if (!out) throw format_error("save_kmeans: cannot open " + path + " for writing");
    out << "kmeans " << model.C << ' ' << model.dim << ' ' << model.feature_kind << '\n';
    char buf[40];
    for (int c = 0; c < model.C; ++c) {
        for (int j = 0; j < model.dim; ++j) {
            std::snprintf(buf, sizeof(buf), "%.17g", model.centroids[static_cast<std::size_t>(c) * model.dim + j]);
            out << buf << (j + 1 == model.dim ? '\n' : ' ');
        }
    }
    if (!out) throw format_error("save_kmeans: short write to " + path);
}

KMeansModel load_kmeans(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw format_error("load_kmeans: cannot open " + path);
    std::string tag;
    KMeansModel model;
    if (!(in >> tag >> model.C >> model.dim >> model.feature_kind) || tag != "kmeans") {
        throw format_error("load_kmeans: bad header in " + path);
    }
    if (model.C < 2 || model.dim < 1) throw format_error("load_kmeans: bad C/dim in header");
    model.centroids.resize(static_cast<std::size_t>(model.C) * model.dim);
    for (auto& v : model.centroids) {
        if (!(in >> v)) throw format_error("load_kmeans: truncated centroid data in " + path);
    }
    return model;
}

}  // namespace s2c
