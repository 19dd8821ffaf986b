#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <optional>
#include <random>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "samsep/autograd.hpp"
#include "samsep/codec.hpp"
#include "samsep/errors.hpp"
#include "samsep/tensor.hpp"

namespace samsep::prompt {

inline constexpr std::size_t kTextDim = 32;    // d_txt
inline constexpr std::size_t kSpanDim = 8;     // Ds
inline constexpr std::size_t kVisualDim = 8;   // Dv

// ---------------------------------------------------------------------------
// Text

/// Vocabulary: the K class labels, a few template modifiers, then EMPTY.
inline constexpr std::array<std::string_view, 6> kModifiers = {"a", "the", "sound", "of", "loud", "soft"};
inline constexpr std::size_t kEmptyToken = codec::kNumClasses + kModifiers.size();
inline constexpr std::size_t kVocabSize = kEmptyToken + 1;

struct TextPrompt {
    std::vector<std::size_t> tokens{kEmptyToken};

    static TextPrompt empty() { return TextPrompt{}; }
    static TextPrompt of_class(codec::EventClass c) { return TextPrompt{{static_cast<std::size_t>(c)}}; }

    bool is_empty() const { return tokens.size() == 1 && tokens[0] == kEmptyToken; }

    /// First class token, if any.
    std::optional<codec::EventClass> target_class() const {
        for (auto t : tokens)
            if (t < codec::kNumClasses) return static_cast<codec::EventClass>(t);
        return std::nullopt;
    }

    friend bool operator==(const TextPrompt&, const TextPrompt&) = default;
};

inline void validate(const TextPrompt& p) {
    if (p.tokens.empty()) throw ContractError("text prompt: no tokens");
    for (auto t : p.tokens) {
        if (t >= kVocabSize) throw ContractError("text prompt: token id " + std::to_string(t) + " out of vocabulary");
        if (t == kEmptyToken && p.tokens.size() != 1) throw ContractError("text prompt: EMPTY must appear alone");
    }
}

/// Whitespace tokenizer over the fixed vocabulary; "" maps to EMPTY.
inline TextPrompt parse_text(std::string_view text) {
    std::istringstream is{std::string(text)};
    TextPrompt p;
    p.tokens.clear();
    std::string word;
    while (is >> word) {
        std::transform(word.begin(), word.end(), word.begin(), [](unsigned char c) { return std::tolower(c); });
        std::optional<std::size_t> id;
        for (std::size_t c = 0; c < codec::kNumClasses; ++c)
            if (codec::kClassNames[c] == word) id = c;
        for (std::size_t m = 0; m < kModifiers.size(); ++m)
            if (kModifiers[m] == word) id = codec::kNumClasses + m;
        if (!id) throw ContractError("text prompt: unknown word '" + word + "'");
        p.tokens.push_back(*id);
    }
    if (p.tokens.empty()) p.tokens.push_back(kEmptyToken);
    return p;
}

inline std::string to_string(const TextPrompt& p) {
    if (p.is_empty()) return "";
    std::string out;
    for (auto t : p.tokens) {
        if (!out.empty()) out += ' ';
        out += t < codec::kNumClasses ? std::string(codec::kClassNames[t])
                                      : std::string(kModifiers.at(t - codec::kNumClasses));
    }
    return out;
}

// ---------------------------------------------------------------------------
// Spans

struct Interval {
    double start = 0.0;
    double end = 0.0;
    double length() const { return end - start; }
    friend bool operator==(const Interval&, const Interval&) = default;
};

using SpanSet = std::vector<Interval>;

/// Sorted, disjoint, non-inverted half-open intervals.
inline void validate(const SpanSet& s) {
    for (std::size_t i = 0; i < s.size(); ++i) {
        if (!(s[i].start < s[i].end) || !std::isfinite(s[i].start) || !std::isfinite(s[i].end))
            throw ValidationError("span: interval " + std::to_string(i) + " is empty or inverted");
        if (i > 0 && s[i].start < s[i - 1].end) throw ValidationError("span: intervals overlap or are unsorted");
    }
}

enum class SpanToken : std::uint8_t { Sil = 0, Act = 1, Null = 2 };
inline constexpr std::size_t kSpanVocab = 3;

struct SpanTokens {
    std::vector<SpanToken> seq;

    static SpanTokens null(std::size_t frames) { return SpanTokens{std::vector<SpanToken>(frames, SpanToken::Null)}; }
    bool is_null() const {
        return !seq.empty() && std::all_of(seq.begin(), seq.end(), [](SpanToken t) { return t == SpanToken::Null; });
    }
    std::size_t size() const { return seq.size(); }
    friend bool operator==(const SpanTokens&, const SpanTokens&) = default;
};

inline void validate(const SpanTokens& st) {
    const bool any_null = std::any_of(st.seq.begin(), st.seq.end(), [](SpanToken t) { return t == SpanToken::Null; });
    if (any_null && !st.is_null()) throw ContractError("span tokens: NULL may only appear as the full sequence");
}

/// Frame t is ACT iff its centre (t + 0.5) / frame_rate lies in some interval.
inline SpanTokens encode_span(const SpanSet& s, std::size_t frames, double frame_rate = codec::kFrameRate) {
    validate(s);
    const double total = static_cast<double>(frames) / frame_rate;
    for (const auto& iv : s)
        if (iv.start < 0.0 || iv.end > total + 1e-9) throw ValidationError("span: interval outside clip");
    SpanTokens out{std::vector<SpanToken>(frames, SpanToken::Sil)};
    std::size_t k = 0;
    for (std::size_t t = 0; t < frames; ++t) {
        const double c = (static_cast<double>(t) + 0.5) / frame_rate;
        while (k < s.size() && s[k].end <= c) ++k;
        if (k < s.size() && s[k].start <= c) out.seq[t] = SpanToken::Act;
    }
    return out;
}

/// Maximal ACT runs as intervals on the frame grid.
inline SpanSet decode_span(const SpanTokens& st, double frame_rate = codec::kFrameRate) {
    SpanSet out;
    std::size_t t = 0;
    while (t < st.seq.size()) {
        if (st.seq[t] != SpanToken::Act) {
            ++t;
            continue;
        }
        std::size_t e = t;
        while (e < st.seq.size() && st.seq[e] == SpanToken::Act) ++e;
        out.push_back({static_cast<double>(t) / frame_rate, static_cast<double>(e) / frame_rate});
        t = e;
    }
    return out;
}

inline std::vector<std::size_t> span_ids(const SpanTokens& st) {
    std::vector<std::size_t> ids(st.seq.size());
    std::transform(st.seq.begin(), st.seq.end(), ids.begin(), [](SpanToken t) { return static_cast<std::size_t>(t); });
    return ids;
}

/// Learned text lookup: row i is the embedding of token i (N x d_txt).
template <typename T>
ag::Var<T> embed_text(const TextPrompt& p, const ag::Var<T>& table) {
    validate(p);
    if (table.rows() != kVocabSize) throw ContractError("embed_text: table does not cover the vocabulary");
    return ag::gather_rows(table, p.tokens);
}

/// Per-frame span token lookup (T x Ds).
template <typename T>
ag::Var<T> embed_span(const SpanTokens& st, const ag::Var<T>& table) {
    validate(st);
    return ag::gather_rows(table, span_ids(st));
}

// ---------------------------------------------------------------------------
// Visual

struct VisualFeats {
    Tensor<float> feats;  // T x Dv
    bool present = false;

    static VisualFeats absent(std::size_t frames) { return VisualFeats{Tensor<float>::matrix(frames, kVisualDim), false}; }
    std::size_t frames() const { return feats.rows(); }
    friend bool operator==(const VisualFeats&, const VisualFeats&) = default;
};

struct VisibleEvent {
    codec::EventSpec spec;
    bool visible = false;
};

inline constexpr double kVisualNoiseSigma = 0.05;

/// Oracle frame features: one-hot class of each visible event while its
/// frame centre is inside the event, plus N(0, 0.05^2) noise on every frame.
inline VisualFeats make_visual_feats(const std::vector<VisibleEvent>& events, std::size_t frames, std::uint64_t seed) {
    VisualFeats v{Tensor<float>::matrix(frames, kVisualDim), true};
    for (const auto& ev : events) {
        if (!ev.visible) continue;
        const auto cls = static_cast<std::size_t>(ev.spec.cls);
        for (std::size_t t = 0; t < frames; ++t) {
            const double c = (static_cast<double>(t) + 0.5) / codec::kFrameRate;
            if (c >= ev.spec.onset && c < ev.spec.onset + ev.spec.duration) v.feats(t, cls) = 1.0f;
        }
    }
    std::mt19937_64 rng(seed);
    std::normal_distribution<float> noise(0.0f, static_cast<float>(kVisualNoiseSigma));
    for (auto& x : v.feats.storage()) x += noise(rng);
    return v;
}

// ---------------------------------------------------------------------------
// Bundle

struct PromptBundle {
    TextPrompt text;
    SpanTokens span;
    VisualFeats visual;

    /// All-dummy bundle for a clip of `frames` latent frames.
    static PromptBundle dummy(std::size_t frames) {
        return PromptBundle{TextPrompt::empty(), SpanTokens::null(frames), VisualFeats::absent(frames)};
    }

    bool has_text() const { return !text.is_empty(); }
    bool has_span() const { return !span.is_null(); }
    bool has_visual() const { return visual.present; }
    bool any_present() const { return has_text() || has_span() || has_visual(); }

    friend bool operator==(const PromptBundle&, const PromptBundle&) = default;
};

inline void validate(const PromptBundle& b, std::size_t frames) {
    validate(b.text);
    validate(b.span);
    if (b.span.size() != frames) throw ContractError("bundle: span length differs from clip length");
    if (b.visual.frames() != frames || b.visual.feats.cols() != kVisualDim)
        throw ContractError("bundle: visual features have wrong extent");
}

/// Frame slice [begin, end) of the frame-aligned modalities; text is shared.
inline PromptBundle slice_frames(const PromptBundle& b, std::size_t begin, std::size_t end) {
    PromptBundle out;
    out.text = b.text;
    out.span.seq.assign(b.span.seq.begin() + static_cast<std::ptrdiff_t>(begin),
                        b.span.seq.begin() + static_cast<std::ptrdiff_t>(end));
    out.visual.present = b.visual.present;
    out.visual.feats = slice_rows_of(b.visual.feats, begin, end);
    return out;
}

/// Independently replaces each present modality by its dummy with the given
/// probability. Three uniforms are always consumed so replay is stable.
template <typename Rng>
PromptBundle apply_condition_dropout(const PromptBundle& b, double p_text, double p_span, double p_vid, Rng& rng) {
    for (double p : {p_text, p_span, p_vid})
        if (!(p >= 0.0 && p <= 1.0)) throw ContractError("dropout probability outside [0, 1]");
    std::uniform_real_distribution<double> uni(0.0, 1.0);
    const double ut = uni(rng), us = uni(rng), uv = uni(rng);
    PromptBundle out = b;
    if (b.has_text() && ut < p_text) out.text = TextPrompt::empty();
    if (b.has_span() && us < p_span) out.span = SpanTokens::null(b.span.size());
    if (b.has_visual() && uv < p_vid) out.visual = VisualFeats::absent(b.visual.frames());
    return out;
}

}  // namespace samsep::prompt
