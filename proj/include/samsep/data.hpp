#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <optional>
#include <random>
#include <string>
#include <string_view>
#include <vector>

#include "samsep/codec.hpp"
#include "samsep/errors.hpp"
#include "samsep/prompts.hpp"

namespace samsep::data {

using codec::EventClass;
using codec::EventSpec;
using codec::Waveform;

// ---------------------------------------------------------------------------
// SNR control

inline double energy(std::span<const float> x) {
    double e = 0.0;
    for (float v : x) e += static_cast<double>(v) * v;
    return e;
}

inline double energy(std::span<const double> x) {
    double e = 0.0;
    for (double v : x) e += v * v;
    return e;
}

/// Gain that puts `res` at `snr_db` below `tgt`: sqrt(E_tgt / E_res) * 10^(-snr/20).
inline double snr_gain(double e_tgt, double e_res, double snr_db) {
    if (!(e_tgt > 0.0) || !(e_res > 0.0)) throw ContractError("rescale_to_snr: zero-energy input");
    return std::sqrt(e_tgt / e_res) * std::pow(10.0, -snr_db / 20.0);
}

/// Returns g * res with 10 log10(E_tgt / E_{g res}) == snr_db.
inline Waveform rescale_to_snr(const Waveform& tgt, const Waveform& res, double snr_db) {
    const double g = snr_gain(energy(tgt.samples), energy(res.samples), snr_db);
    Waveform out = res;
    for (auto& v : out.samples) v = static_cast<float>(g * v);
    return out;
}

inline double measured_snr_db(std::span<const double> tgt, std::span<const double> res) {
    return 10.0 * std::log10(energy(tgt) / energy(res));
}

// ---------------------------------------------------------------------------
// Energy VAD

inline constexpr double kVadThresholdDbfs = -40.0;
/// 250 ms at 25 Hz is 6.25 frames; runs need ceil(6.25) = 7 frames.
inline constexpr std::size_t kVadMinFrames = 7;

/// Per-frame RMS over 40 ms windows on the 25 Hz latent grid.
inline std::vector<double> frame_rms(const Waveform& w) {
    const std::size_t frames = codec::frames_for(w.samples.size());
    std::vector<double> rms(frames, 0.0);
    for (std::size_t f = 0; f < frames; ++f) {
        double e = 0.0;
        for (std::size_t i = 0; i < codec::kHop; ++i) {
            const std::size_t n = f * codec::kHop + i;
            if (n < w.samples.size()) e += static_cast<double>(w.samples[n]) * w.samples[n];
        }
        rms[f] = std::sqrt(e / static_cast<double>(codec::kHop));
    }
    return rms;
}

/// Sounding spans: frames above -40 dBFS (RMS, full scale 1.0), runs shorter
/// than 250 ms dropped. Intervals are clipped to the waveform duration.
inline prompt::SpanSet vad_spans(const Waveform& w) {
    if (w.samples.empty()) throw ContractError("vad_spans: empty waveform");
    const auto rms = frame_rms(w);
    const double thr = std::pow(10.0, kVadThresholdDbfs / 20.0);
    const double dur = w.duration();
    prompt::SpanSet out;
    std::size_t t = 0;
    while (t < rms.size()) {
        if (!(rms[t] > thr)) {
            ++t;
            continue;
        }
        std::size_t e = t;
        while (e < rms.size() && rms[e] > thr) ++e;
        if (e - t >= kVadMinFrames) {
            const double s = static_cast<double>(t) / codec::kFrameRate;
            const double en = std::min(static_cast<double>(e) / codec::kFrameRate, dur);
            if (en > s) out.push_back({s, en});
        }
        t = e;
    }
    return out;
}

inline double silence_ratio(const Waveform& w) {
    const auto spans = vad_spans(w);
    double active = 0.0;
    for (const auto& s : spans) active += s.length();
    return std::clamp(1.0 - active / w.duration(), 0.0, 1.0);
}

// ---------------------------------------------------------------------------
// Triplets

enum class Regime : std::uint8_t { MultiStem = 0, TargetPlusNoise, SpikySpan };

inline constexpr std::array<std::string_view, 3> kRegimeNames = {"multi_stem", "target_plus_noise", "spiky_span"};

inline std::string_view regime_name(Regime r) { return kRegimeNames.at(static_cast<std::size_t>(r)); }

inline Regime parse_regime(std::string_view s) {
    for (std::size_t i = 0; i < kRegimeNames.size(); ++i)
        if (kRegimeNames[i] == s) return static_cast<Regime>(i);
    throw ValidationError("unknown regime '" + std::string(s) + "'");
}

/// SNR half-range (dB) of the uniform draw for each regime.
inline double snr_range_db(Regime r) { return r == Regime::MultiStem ? 5.0 : 15.0; }
inline constexpr double kDistractorSnrDb = 5.0;
inline constexpr double kPeakLevel = 0.9;

struct StemRecord {
    std::vector<EventSpec> events;
    double snr_db = 0.0;  // relative to the target (target stem: 0)
    bool is_target = false;
};

struct Provenance {
    std::uint64_t seed = 0;
    double clip_seconds = 10.0;
    std::vector<StemRecord> stems;
    bool visible = false;
    std::uint64_t visual_seed = 0;
    double peak_gain = 1.0;
};

struct MixTriplet {
    Waveform mix, tgt, res;
    prompt::PromptBundle bundle;
    Regime regime = Regime::MultiStem;
    EventClass target_class = EventClass::SineBurst;
    prompt::SpanSet target_spans;  // VAD of the clean target
    Provenance provenance;
};

struct TripletOptions {
    double clip_seconds = 10.0;
    std::optional<int> sources;  // multi_stem only: force N
    std::optional<bool> visible;
};

namespace detail {

inline double uniform(std::mt19937_64& rng, double lo, double hi) {
    return std::uniform_real_distribution<double>(lo, hi)(rng);
}

inline int uniform_int(std::mt19937_64& rng, int lo, int hi) { return std::uniform_int_distribution<int>(lo, hi)(rng); }

/// Places an event of the given duration avoiding `taken` intervals (with a
/// guard gap). Falls back to an unconstrained onset after 64 tries.
inline double place(std::mt19937_64& rng, double clip, double dur, const std::vector<prompt::Interval>& taken,
                    double gap) {
    double onset = 0.0;
    for (int tries = 0; tries < 64; ++tries) {
        onset = uniform(rng, 0.0, clip - dur);
        const bool clash = std::any_of(taken.begin(), taken.end(), [&](const prompt::Interval& iv) {
            return onset < iv.end + gap && onset + dur > iv.start - gap;
        });
        if (!clash) return onset;
    }
    return onset;
}

inline std::vector<double> render(const std::vector<EventSpec>& events, double clip) {
    const std::size_t frames = codec::frames_for_seconds(clip);
    Tensor<double> z = Tensor<double>::matrix(frames, codec::kChannels);
    for (const auto& e : events) z.arr() += codec::event_latent<double>(e, clip).arr();
    const auto n = static_cast<std::size_t>(std::llround(clip * codec::kSampleRate));
    const auto w = codec::decode(z, n);
    return std::vector<double>(w.samples.begin(), w.samples.end());
}

inline EventSpec random_event(std::mt19937_64& rng, EventClass cls, double clip, double min_dur, double max_dur,
                              const std::vector<prompt::Interval>& taken, double gap) {
    EventSpec e;
    e.cls = cls;
    e.duration = std::min(uniform(rng, min_dur, max_dur), clip);
    e.onset = place(rng, clip, e.duration, taken, gap);
    e.amplitude = uniform(rng, 0.5, 1.0);
    e.seed = rng();
    return e;
}

}  // namespace detail

/// Draws one mixture/target/residual triplet for a regime, fully determined by `seed`.
///
///   multi_stem         N in [2, 4] sources of distinct classes, one is the
///                      target; every other stem at a uniform +-5 dB SNR.
///   target_plus_noise  one or two bursts of a bursty class over a full-length
///                      ambience (sustained class) at +-15 dB.
///   spiky_span         one to three short bursts (0.25-0.8 s) over ambience
///                      at +-15 dB; half the items add a same-class distractor
///                      burst to the residual at +-5 dB. Spans are prompted.
///
/// All stems are scaled so the mixture peaks at 0.9, and mix = tgt + res
/// holds sample-exactly in float.
inline MixTriplet make_triplet(Regime regime, std::uint64_t seed, const TripletOptions& opt = {}) {
    const double clip = opt.clip_seconds;
    if (!(clip >= 1.0)) throw ContractError("make_triplet: clip must be at least 1 s");
    std::mt19937_64 rng(seed);
    MixTriplet tr;
    tr.regime = regime;
    tr.provenance.seed = seed;
    tr.provenance.clip_seconds = clip;

    std::vector<EventSpec> target_events;
    std::vector<std::pair<std::vector<EventSpec>, double>> others;  // events, snr half-range
    std::vector<prompt::Interval> taken;
    const double range = snr_range_db(regime);

    auto sustained = [&] { return detail::uniform_int(rng, 0, 1) ? EventClass::SustainedNoise : EventClass::SustainedTone; };
    auto bursty = [&] { return static_cast<EventClass>(detail::uniform_int(rng, 0, 5)); };

    switch (regime) {
        case Regime::MultiStem: {
            const int n = opt.sources.value_or(detail::uniform_int(rng, 2, 4));
            if (n < 2 || n > static_cast<int>(codec::kNumClasses)) throw ContractError("make_triplet: bad source count");
            std::array<int, codec::kNumClasses> classes{};
            for (int i = 0; i < static_cast<int>(codec::kNumClasses); ++i) classes[static_cast<std::size_t>(i)] = i;
            std::shuffle(classes.begin(), classes.end(), rng);
            const int target = detail::uniform_int(rng, 0, n - 1);
            for (int i = 0; i < n; ++i) {
                const auto cls = static_cast<EventClass>(classes[static_cast<std::size_t>(i)]);
                const bool sus = !codec::is_bursty(cls);
                const double lo = sus ? std::min(4.0, clip) : std::min(0.5, clip);
                const double hi = sus ? clip : std::min(4.0, clip);
                auto e = detail::random_event(rng, cls, clip, lo, hi, {}, 0.0);
                if (i == target) target_events.push_back(e);
                else others.push_back({{e}, range});
            }
            break;
        }
        case Regime::TargetPlusNoise: {
            const auto cls = bursty();
            const int n = detail::uniform_int(rng, 1, 2);
            for (int i = 0; i < n; ++i) {
                auto e = detail::random_event(rng, cls, clip, 0.5, std::min(3.0, clip / 2), taken, 0.25);
                taken.push_back({e.onset, e.onset + e.duration});
                target_events.push_back(e);
            }
            EventSpec amb{sustained(), 0.0, clip, detail::uniform(rng, 0.5, 1.0), rng()};
            others.push_back({{amb}, range});
            break;
        }
        case Regime::SpikySpan: {
            const auto cls = bursty();
            const int n = detail::uniform_int(rng, 1, 3);
            for (int i = 0; i < n; ++i) {
                auto e = detail::random_event(rng, cls, clip, 0.25, 0.8, taken, 0.5);
                taken.push_back({e.onset, e.onset + e.duration});
                target_events.push_back(e);
            }
            EventSpec amb{sustained(), 0.0, clip, detail::uniform(rng, 0.5, 1.0), rng()};
            others.push_back({{amb}, range});
            if (detail::uniform(rng, 0.0, 1.0) < 0.5) {
                auto d = detail::random_event(rng, cls, clip, 0.25, 0.8, taken, 0.5);
                others.push_back({{d}, kDistractorSnrDb});
            }
            break;
        }
    }
    std::sort(target_events.begin(), target_events.end(),
              [](const EventSpec& a, const EventSpec& b) { return a.onset < b.onset; });
    tr.target_class = target_events.front().cls;

    const std::vector<double> tgt = detail::render(target_events, clip);
    const double e_tgt = energy(tgt);
    std::vector<double> res(tgt.size(), 0.0);
    tr.provenance.stems.push_back({target_events, 0.0, true});
    for (auto& [events, half_range] : others) {
        const double snr = detail::uniform(rng, -half_range, half_range);
        const auto stem = detail::render(events, clip);
        const double g = snr_gain(e_tgt, energy(stem), snr);
        for (std::size_t i = 0; i < res.size(); ++i) res[i] += g * stem[i];
        tr.provenance.stems.push_back({events, snr, false});
    }

    double peak = 0.0;
    for (std::size_t i = 0; i < tgt.size(); ++i) peak = std::max(peak, std::abs(tgt[i] + res[i]));
    const double gain = peak > 0.0 ? kPeakLevel / peak : 1.0;
    tr.provenance.peak_gain = gain;
    tr.tgt.samples.resize(tgt.size());
    tr.res.samples.resize(tgt.size());
    tr.mix.samples.resize(tgt.size());
    for (std::size_t i = 0; i < tgt.size(); ++i) {
        tr.tgt.samples[i] = static_cast<float>(gain * tgt[i]);
        tr.res.samples[i] = static_cast<float>(gain * res[i]);
        tr.mix.samples[i] = tr.tgt.samples[i] + tr.res.samples[i];
    }

    const std::size_t frames = codec::frames_for(tr.mix.samples.size());
    tr.target_spans = vad_spans(tr.tgt);
    tr.bundle = prompt::PromptBundle::dummy(frames);
    tr.bundle.text = prompt::TextPrompt::of_class(tr.target_class);
    if (regime == Regime::SpikySpan) tr.bundle.span = prompt::encode_span(tr.target_spans, frames);

    tr.provenance.visible = opt.visible.value_or(detail::uniform(rng, 0.0, 1.0) < 0.5);
    tr.provenance.visual_seed = rng();
    if (tr.provenance.visible) {
        std::vector<prompt::VisibleEvent> vis;
        for (const auto& e : target_events) vis.push_back({e, true});
        tr.bundle.visual = prompt::make_visual_feats(vis, frames, tr.provenance.visual_seed);
    }
    return tr;
}

// ---------------------------------------------------------------------------
// Pseudo-label filtering

struct FilterScores {
    double clap_tgt = 0.0;
    double clap_res = 0.0;
    double aes_pc = 1.0;
    double silence_ratio = 0.0;
    double mask_coverage = 0.0;
    double imagebind = 0.0;
    bool has_visual = false;
};

struct FilterThresholds {
    double clap_tgt_min = 0.35;
    double clap_res_max = 0.0;
    double aes_pc_max = 2.5;
    double silence_ratio_max = 0.95;
    double mask_coverage_min = 0.02;
    double imagebind_min = 0.2;
};

struct GateVerdict {
    bool keep = false;
    std::vector<std::string> reasons;
};

/// Keeps a candidate only if every text-audio criterion holds (and, for
/// visual samples, both visual criteria). All comparisons are strict.
inline GateVerdict filter_gate(const FilterScores& s, const FilterThresholds& th = {}) {
    GateVerdict v;
    if (!(s.clap_tgt > th.clap_tgt_min)) v.reasons.emplace_back("clap_tgt");
    if (!(s.clap_res < th.clap_res_max)) v.reasons.emplace_back("clap_res");
    if (!(s.aes_pc < th.aes_pc_max)) v.reasons.emplace_back("aes_pc");
    if (!(s.silence_ratio < th.silence_ratio_max)) v.reasons.emplace_back("silence_ratio");
    if (s.has_visual) {
        if (!(s.mask_coverage > th.mask_coverage_min)) v.reasons.emplace_back("mask_coverage");
        if (!(s.imagebind > th.imagebind_min)) v.reasons.emplace_back("imagebind");
    }
    v.keep = v.reasons.empty();
    return v;
}

// ---------------------------------------------------------------------------
// Toy scorers

/// Clip-level class-response vector: mean latent frame projected on the
/// class signatures.
template <typename T>
std::array<double, codec::kNumClasses> clip_class_scores(const Tensor<T>& z) {
    const auto m = codec::mean_frame(z);
    const auto& sig = codec::class_signatures();
    std::array<double, codec::kNumClasses> s{};
    for (std::size_t c = 0; c < codec::kNumClasses; ++c)
        for (std::size_t ch = 0; ch < codec::kChannels; ++ch) s[c] += m[ch] * sig[c][ch];
    return s;
}

/// Toy CLAP: cosine between the clip's class-response vector and the
/// centred one-hot text embedding of `cls`. Silent audio scores 0.
inline double toy_clap(const std::array<double, codec::kNumClasses>& scores, EventClass cls) {
    const double k = static_cast<double>(codec::kNumClasses);
    double dot = 0.0, sn = 0.0, tn = 0.0;
    for (std::size_t c = 0; c < codec::kNumClasses; ++c) {
        const double tv = (c == static_cast<std::size_t>(cls) ? 1.0 : 0.0) - 1.0 / k;
        dot += scores[c] * tv;
        sn += scores[c] * scores[c];
        tn += tv * tv;
    }
    return sn > 0.0 ? dot / std::sqrt(sn * tn) : 0.0;
}

inline double toy_clap(const Waveform& w, EventClass cls) { return toy_clap(clip_class_scores(codec::encode(w)), cls); }

/// Production-complexity proxy: number of classes holding more than 5% of
/// the clip energy, clamped onto the 1-5 scale.
template <typename T>
double complexity_score(const Tensor<T>& z) {
    const auto r = codec::class_responses(z);
    double total = 0.0;
    for (auto v : z.storage()) total += static_cast<double>(v) * v;
    if (!(total > 0.0)) return 1.0;
    int count = 0;
    for (std::size_t c = 0; c < codec::kNumClasses; ++c) {
        double e = 0.0;
        for (std::size_t f = 0; f < r.rows(); ++f) e += r(f, c) * r(f, c);
        if (e / total > 0.05) ++count;
    }
    return static_cast<double>(std::clamp(count, 1, 5));
}

/// Deterministic stand-ins for CLAP, the aesthetics PC axis, VAD silence,
/// mask coverage and ImageBind.
inline FilterScores toy_scorers(const Waveform& tgt, const Waveform& res, const prompt::TextPrompt& text,
                                const prompt::VisualFeats& visual) {
    FilterScores s;
    const auto zt = codec::encode(tgt);
    const auto zr = codec::encode(res);
    const auto cls = text.target_class();
    if (cls) {
        s.clap_tgt = toy_clap(clip_class_scores(zt), *cls);
        s.clap_res = toy_clap(clip_class_scores(zr), *cls);
    }
    s.aes_pc = complexity_score(zt);
    s.silence_ratio = silence_ratio(tgt);
    s.has_visual = visual.present;
    if (visual.present && visual.frames() > 0) {
        std::size_t covered = 0;
        std::array<double, prompt::kVisualDim> mv{};
        for (std::size_t t = 0; t < visual.frames(); ++t) {
            float mx = 0.0f;
            for (std::size_t k = 0; k < prompt::kVisualDim; ++k) {
                mx = std::max(mx, visual.feats(t, k));
                mv[k] += visual.feats(t, k) / static_cast<double>(visual.frames());
            }
            if (mx > 0.5f) ++covered;
        }
        s.mask_coverage = static_cast<double>(covered) / static_cast<double>(visual.frames());
        // Pairing: visual class k maps onto audio class signature k.
        const auto& sig = codec::class_signatures();
        std::array<double, codec::kChannels> vproj{};
        for (std::size_t k = 0; k < prompt::kVisualDim && k < codec::kNumClasses; ++k)
            for (std::size_t ch = 0; ch < codec::kChannels; ++ch) vproj[ch] += mv[k] * sig[k][ch];
        const auto am = codec::mean_frame(zt);
        double dot = 0.0, a2 = 0.0, v2 = 0.0;
        for (std::size_t ch = 0; ch < codec::kChannels; ++ch) {
            dot += vproj[ch] * am[ch];
            a2 += am[ch] * am[ch];
            v2 += vproj[ch] * vproj[ch];
        }
        s.imagebind = (a2 > 0.0 && v2 > 0.0) ? dot / std::sqrt(a2 * v2) : 0.0;
    }
    return s;
}

}  // namespace samsep::data
