#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <limits>
#include <optional>
#include <random>
#include <vector>

#include "samsep/codec.hpp"
#include "samsep/data.hpp"
#include "samsep/flow.hpp"
#include "samsep/prompts.hpp"

namespace samsep::eval {

using codec::Waveform;
using prompt::SpanSet;

// ---------------------------------------------------------------------------
// SpanIoU

inline double total_length(const SpanSet& s) {
    double n = 0.0;
    for (const auto& iv : s) n += iv.length();
    return n;
}

/// Intersection length of two sorted disjoint interval sets (two-pointer sweep).
inline double intersection_length(const SpanSet& a, const SpanSet& b) {
    double acc = 0.0;
    std::size_t i = 0, j = 0;
    while (i < a.size() && j < b.size()) {
        const double lo = std::max(a[i].start, b[j].start);
        const double hi = std::min(a[i].end, b[j].end);
        if (hi > lo) acc += hi - lo;
        if (a[i].end < b[j].end) ++i;
        else ++j;
    }
    return acc;
}

/// Total intersection over total union; two empty sets agree perfectly (1.0).
inline double span_iou(const SpanSet& pred, const SpanSet& ref) {
    prompt::validate(pred);
    prompt::validate(ref);
    const double inter = intersection_length(pred, ref);
    const double uni = total_length(pred) + total_length(ref) - inter;
    if (uni <= 0.0) return 1.0;
    return std::clamp(inter / uni, 0.0, 1.0);
}

// ---------------------------------------------------------------------------
// SI-SDR

inline constexpr double kSiSdrCapDb = 60.0;

/// Scale-invariant SDR in dB, clamped to +-60 dB.
inline double si_sdr(std::span<const float> est, std::span<const float> ref) {
    if (est.size() != ref.size()) throw ContractError("si_sdr: length mismatch");
    double rr = 0.0, er = 0.0;
    for (std::size_t i = 0; i < ref.size(); ++i) {
        rr += static_cast<double>(ref[i]) * ref[i];
        er += static_cast<double>(est[i]) * ref[i];
    }
    if (!(rr > 0.0)) throw ContractError("si_sdr: zero reference");
    const double alpha = er / rr;
    double num = 0.0, den = 0.0;
    for (std::size_t i = 0; i < ref.size(); ++i) {
        const double proj = alpha * ref[i];
        const double err = static_cast<double>(est[i]) - proj;
        num += proj * proj;
        den += err * err;
    }
    if (den <= 0.0) return kSiSdrCapDb;
    if (num <= 0.0) return -kSiSdrCapDb;
    return std::clamp(10.0 * std::log10(num / den), -kSiSdrCapDb, kSiSdrCapDb);
}

inline double si_sdr(const Waveform& est, const Waveform& ref) { return si_sdr(est.samples, ref.samples); }

// ---------------------------------------------------------------------------
// Span prediction (toy frame-level text-queried detector)

inline constexpr double kDetectorSlope = 12.0;
inline constexpr double kDetectorCentre = 0.15;
inline constexpr double kDefaultSpanThreshold = 0.3;

/// Frame probability that the prompted class is active: logistic map of the
/// cosine between each mixture latent frame and the class signature.
inline std::vector<double> frame_probabilities(const Waveform& mix, codec::EventClass cls) {
    const auto z = codec::encode(mix);
    const auto& sig = codec::class_signatures()[static_cast<std::size_t>(cls)];
    std::vector<double> p(z.rows());
    for (std::size_t t = 0; t < z.rows(); ++t) {
        double dot = 0.0, n = 0.0;
        for (std::size_t ch = 0; ch < codec::kChannels; ++ch) {
            dot += z(t, ch) * sig[ch];
            n += static_cast<double>(z(t, ch)) * z(t, ch);
        }
        const double cs = n > 0.0 ? dot / std::sqrt(n) : 0.0;
        p[t] = 1.0 / (1.0 + std::exp(-kDetectorSlope * (cs - kDetectorCentre)));
    }
    return p;
}

inline SpanSet predict_spans(const Waveform& mix, const prompt::TextPrompt& text,
                             double threshold = kDefaultSpanThreshold) {
    if (!(threshold > 0.0 && threshold < 1.0)) throw ContractError("predict_spans: threshold outside (0, 1)");
    const auto cls = text.target_class();
    if (!cls) return {};
    const auto p = frame_probabilities(mix, *cls);
    prompt::SpanTokens st{std::vector<prompt::SpanToken>(p.size(), prompt::SpanToken::Sil)};
    for (std::size_t t = 0; t < p.size(); ++t)
        if (p[t] > threshold) st.seq[t] = prompt::SpanToken::Act;
    return prompt::decode_span(st);
}

/// Text separation with the predicted span added to the prompt bundle.
struct BoostedSeparation {
    flow::Separation sep;
    SpanSet predicted;
};

inline BoostedSeparation separate_text_boosted(const Waveform& mix, const prompt::TextPrompt& text,
                                               const flow::FlowConfig& cfg, const flow::Model& model,
                                               std::uint64_t seed, double threshold = kDefaultSpanThreshold) {
    if (text.is_empty()) throw ContractError("separate_text_boosted: text prompt must not be empty");
    const std::size_t frames = codec::frames_for(mix.samples.size());
    BoostedSeparation out;
    out.predicted = predict_spans(mix, text, threshold);
    auto bundle = prompt::PromptBundle::dummy(frames);
    bundle.text = text;
    bundle.span = prompt::encode_span(out.predicted, frames);
    out.sep = flow::separate(mix, bundle, cfg, model, seed);
    return out;
}

// ---------------------------------------------------------------------------
// Candidate re-ranking

inline constexpr std::size_t kDefaultBeam = 8;
inline constexpr double kJudgeWeight = 1.0;
inline constexpr double kClapWeight = 5.0;

/// argmax of w_judge * judge + w_clap * clap; ties go to the lowest index.
inline std::size_t rerank(std::span<const double> judge, std::span<const double> clap, double w_judge = kJudgeWeight,
                          double w_clap = kClapWeight) {
    if (judge.size() != clap.size()) throw ContractError("rerank: score lists differ in length");
    if (judge.empty()) throw ContractError("rerank: empty candidate set");
    std::size_t best = 0;
    double best_score = -std::numeric_limits<double>::infinity();
    for (std::size_t i = 0; i < judge.size(); ++i) {
        const double s = w_judge * judge[i] + w_clap * clap[i];
        if (s > best_score) {
            best_score = s;
            best = i;
        }
    }
    return best;
}

/// Toy judge: mean of target/prompt agreement and residual/prompt disagreement.
inline double toy_judge(const Waveform& tgt, const Waveform& res, codec::EventClass cls) {
    return 0.5 * (data::toy_clap(tgt, cls) + (1.0 - data::toy_clap(res, cls)));
}

struct CandidateSet {
    std::vector<flow::Separation> candidates;
    std::vector<double> judge;
    std::vector<double> clap;
    std::size_t chosen = 0;
};

/// Class the re-ranker scores against: the text class, else the dominant
/// visual class, else none.
inline std::optional<codec::EventClass> prompt_class(const prompt::PromptBundle& b) {
    if (auto c = b.text.target_class()) return c;
    if (b.visual.present && b.visual.frames() > 0) {
        std::vector<double> m(prompt::kVisualDim, 0.0);
        for (std::size_t t = 0; t < b.visual.frames(); ++t)
            for (std::size_t k = 0; k < prompt::kVisualDim; ++k) m[k] += b.visual.feats(t, k);
        const auto it = std::max_element(m.begin(), m.end());
        if (*it > 0.5) return static_cast<codec::EventClass>(std::distance(m.begin(), it));
    }
    return std::nullopt;
}

/// Separates with seeds seed, seed+1, ... and keeps the best-scoring
/// candidate. A beam of one skips scoring entirely.
template <typename SeparateFn>
CandidateSet beam_separate(std::size_t beam, std::uint64_t seed, const prompt::PromptBundle& bundle, SeparateFn&& run) {
    if (beam < 1) throw ContractError("beam must be >= 1");
    CandidateSet cs;
    for (std::size_t i = 0; i < beam; ++i) cs.candidates.push_back(run(seed + i));
    if (beam == 1) return cs;
    const auto cls = prompt_class(bundle);
    if (!cls) return cs;
    for (const auto& c : cs.candidates) {
        cs.judge.push_back(toy_judge(c.target, c.residual, *cls));
        cs.clap.push_back(data::toy_clap(c.target, *cls));
    }
    cs.chosen = rerank(cs.judge, cs.clap);
    return cs;
}

// ---------------------------------------------------------------------------
// Pairwise preference aggregation

enum class Verdict { AWins, BWins, Tie };

struct PairwiseRecord {
    std::string item;
    Verdict verdict = Verdict::Tie;
};

struct Interval95 {
    double lo = 0.0;
    double hi = 0.0;
};

struct NetWinRate {
    double value = 0.0;
    Interval95 ci;
};

inline double net_win_rate_point(std::span<const PairwiseRecord> records) {
    if (records.empty()) throw ContractError("net_win_rate: no records");
    long a = 0, b = 0;
    for (const auto& r : records) {
        a += r.verdict == Verdict::AWins;
        b += r.verdict == Verdict::BWins;
    }
    return static_cast<double>(a - b) / static_cast<double>(records.size());
}

/// Percentile interval of a statistic over bootstrap resamples of `values`.
template <typename Stat, typename V>
Interval95 bootstrap_ci(std::span<const V> values, Stat&& stat, std::size_t resamples, std::uint64_t seed) {
    if (values.empty()) return {};
    std::mt19937_64 rng(seed);
    std::uniform_int_distribution<std::size_t> pick(0, values.size() - 1);
    std::vector<double> stats(resamples);
    std::vector<V> sample(values.size());
    for (std::size_t r = 0; r < resamples; ++r) {
        for (auto& s : sample) s = values[pick(rng)];
        stats[r] = stat(std::span<const V>(sample));
    }
    std::sort(stats.begin(), stats.end());
    auto at = [&](double q) {
        const auto idx = static_cast<std::size_t>(std::floor(q * static_cast<double>(resamples - 1) + 0.5));
        return stats[std::min(idx, resamples - 1)];
    };
    return {at(0.025), at(0.975)};
}

/// (wins_A - wins_B) / N with ties counted in N, plus a 95% bootstrap interval.
inline NetWinRate net_win_rate(std::span<const PairwiseRecord> records, std::size_t resamples = 1000,
                               std::uint64_t seed = 0) {
    NetWinRate out;
    out.value = net_win_rate_point(records);
    out.ci = bootstrap_ci(records, [](std::span<const PairwiseRecord> s) { return net_win_rate_point(s); }, resamples,
                          seed);
    return out;
}

inline std::vector<PairwiseRecord> swap_labels(std::span<const PairwiseRecord> records) {
    std::vector<PairwiseRecord> out(records.begin(), records.end());
    for (auto& r : out) {
        if (r.verdict == Verdict::AWins) r.verdict = Verdict::BWins;
        else if (r.verdict == Verdict::BWins) r.verdict = Verdict::AWins;
    }
    return out;
}

inline double mean_of(std::span<const double> v) {
    if (v.empty()) return 0.0;
    double s = 0.0;
    for (double x : v) s += x;
    return s / static_cast<double>(v.size());
}

inline double median_of(std::vector<double> v) {
    if (v.empty()) return 0.0;
    std::sort(v.begin(), v.end());
    const std::size_t n = v.size();
    return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

}  // namespace samsep::eval
