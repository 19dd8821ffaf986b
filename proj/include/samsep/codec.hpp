#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <numbers>
#include <random>
#include <string>
#include <string_view>
#include <vector>

#include "samsep/errors.hpp"
#include "samsep/tensor.hpp"

namespace samsep::codec {

inline constexpr int kSampleRate = 8000;
inline constexpr int kFrameRate = 25;
inline constexpr std::size_t kHop = kSampleRate / kFrameRate;  // 320
inline constexpr std::size_t kHalf = kHop / 2;                 // 160
inline constexpr std::size_t kBands = 8;
inline constexpr std::size_t kChannels = 2 * kBands;  // C
inline constexpr std::size_t kNumClasses = 8;

/// DCT-II indices kept per half-frame. All even, so a constant coefficient
/// across consecutive half-frames is a continuous tone at 25 * k Hz.
inline constexpr std::array<int, kBands> kBandIndex = {8, 12, 16, 22, 28, 36, 46, 58};

inline double band_frequency_hz(std::size_t band) {
    return static_cast<double>(kBandIndex.at(band)) * kSampleRate / (2.0 * kHalf);
}

/// Latent channel of (half, band): first half-frame bands occupy [0, 8),
/// second half-frame bands [8, 16).
inline constexpr std::size_t channel_of(std::size_t half, std::size_t band) { return half * kBands + band; }

struct Waveform {
    std::vector<float> samples;
    int sample_rate = kSampleRate;

    double duration() const { return static_cast<double>(samples.size()) / sample_rate; }
    std::size_t size() const { return samples.size(); }
    bool all_finite() const {
        return std::all_of(samples.begin(), samples.end(), [](float v) { return std::isfinite(v); });
    }
    friend bool operator==(const Waveform&, const Waveform&) = default;
};

/// Number of latent frames for a sample count; partial frames are padded.
inline std::size_t frames_for(std::size_t samples) { return (samples + kHop - 1) / kHop; }

inline std::size_t frames_for_seconds(double seconds) {
    return frames_for(static_cast<std::size_t>(std::llround(seconds * kSampleRate)));
}

namespace detail {

/// cos(pi (m + 1/2) k / 160) for each kept band; the synthesis atoms.
inline const std::vector<double>& atoms() {
    static const std::vector<double> table = [] {
        std::vector<double> t(kBands * kHalf);
        for (std::size_t b = 0; b < kBands; ++b)
            for (std::size_t m = 0; m < kHalf; ++m)
                t[b * kHalf + m] = std::cos(std::numbers::pi * (static_cast<double>(m) + 0.5) * kBandIndex[b] /
                                            static_cast<double>(kHalf));
        return t;
    }();
    return table;
}

}  // namespace detail

/// Encodes a waveform into a T x 16 latent sequence at 25 Hz.
///
/// Each 320-sample frame is split in two halves; each half is projected on
/// the eight kept DCT-II atoms (orthonormal block DCT followed by coefficient
/// selection), scaled so a latent value equals the peak amplitude of the
/// corresponding tone. Trailing partial frames are zero-padded.
template <typename T = float>
Tensor<T> encode(const Waveform& w) {
    if (w.samples.empty()) throw ContractError("encode: empty waveform");
    if (w.sample_rate != kSampleRate) throw ContractError("encode: sample rate must be 8000 Hz");
    const std::size_t frames = frames_for(w.samples.size());
    const auto& at = detail::atoms();
    Tensor<T> z = Tensor<T>::matrix(frames, kChannels);
    const double norm = 2.0 / static_cast<double>(kHalf);
    for (std::size_t f = 0; f < frames; ++f) {
        for (std::size_t h = 0; h < 2; ++h) {
            const std::size_t base = f * kHop + h * kHalf;
            for (std::size_t b = 0; b < kBands; ++b) {
                double acc = 0.0;
                for (std::size_t m = 0; m < kHalf; ++m) {
                    const std::size_t n = base + m;
                    if (n >= w.samples.size()) break;
                    acc += static_cast<double>(w.samples[n]) * at[b * kHalf + m];
                }
                z(f, channel_of(h, b)) = static_cast<T>(acc * norm);
            }
        }
    }
    return z;
}

/// Synthesizes T * 320 samples from a T x 16 latent sequence.
template <typename T>
Waveform decode(const Tensor<T>& z) {
    if (z.cols() != kChannels || z.rank() != 2)
        throw ContractError("decode: latent must have " + std::to_string(kChannels) + " channels");
    const auto& at = detail::atoms();
    Waveform w;
    w.samples.assign(z.rows() * kHop, 0.0f);
    for (std::size_t f = 0; f < z.rows(); ++f) {
        for (std::size_t h = 0; h < 2; ++h) {
            const std::size_t base = f * kHop + h * kHalf;
            for (std::size_t m = 0; m < kHalf; ++m) {
                double acc = 0.0;
                for (std::size_t b = 0; b < kBands; ++b)
                    acc += static_cast<double>(z(f, channel_of(h, b))) * at[b * kHalf + m];
                w.samples[base + m] = static_cast<float>(acc);
            }
        }
    }
    return w;
}

/// Decodes and trims to a sample count (undoing encode's padding).
template <typename T>
Waveform decode(const Tensor<T>& z, std::size_t length) {
    Waveform w = decode(z);
    if (length > w.samples.size()) throw ContractError("decode: requested length exceeds latent extent");
    w.samples.resize(length);
    return w;
}

// ---------------------------------------------------------------------------
// Synthetic sound events

enum class EventClass : std::uint8_t {
    SineBurst = 0,
    ChirpUp,
    ChirpDown,
    AmTone,
    NoiseBurst,
    ClickTrain,
    SustainedTone,
    SustainedNoise,
};

inline constexpr std::array<std::string_view, kNumClasses> kClassNames = {
    "sine-burst", "chirp-up", "chirp-down", "am-tone", "noise-burst", "click-train", "sustained-tone", "sustained-noise",
};

inline std::string_view class_name(EventClass c) { return kClassNames.at(static_cast<std::size_t>(c)); }

inline bool is_bursty(EventClass c) { return static_cast<int>(c) < static_cast<int>(EventClass::SustainedTone); }

struct EventSpec {
    EventClass cls = EventClass::SineBurst;
    double onset = 0.0;     // seconds
    double duration = 1.0;  // seconds
    double amplitude = 1.0;
    std::uint64_t seed = 0;

    friend bool operator==(const EventSpec&, const EventSpec&) = default;
};

/// Half-frame slots (20 ms each) lying fully inside [onset, onset + duration).
inline std::pair<std::size_t, std::size_t> event_slots(const EventSpec& e) {
    const double start_sample = std::ceil(e.onset * kSampleRate - 1e-6);
    const double end_sample = std::floor((e.onset + e.duration) * kSampleRate + 1e-6);
    const auto first = static_cast<std::size_t>(std::ceil(start_sample / kHalf - 1e-9));
    const double last = std::floor(end_sample / kHalf + 1e-9);
    const auto last_excl = last > static_cast<double>(first) ? static_cast<std::size_t>(last) : first;
    return {first, last_excl};
}

/// Per-slot envelope for the class modulation pattern. Envelopes are
/// non-negative so every class has a non-zero mean latent.
///   sine-burst       band 0, flat
///   chirp-up         band 1, level rises 0.25 -> 1
///   chirp-down       band 2, level falls 1 -> 0.25
///   am-tone          band 3, 5 Hz amplitude modulation
///   noise-burst      band 4, random level per slot in [0.4, 1)
///   click-train      band 5, alternating 1 / 0.15 slots
///   sustained-tone   band 6, flat
///   sustained-noise  band 7, random level per slot in [0.4, 1)
inline std::vector<double> class_envelope(EventClass cls, std::size_t n, std::uint64_t seed) {
    std::vector<double> env(n, 1.0);
    const double span = n > 1 ? static_cast<double>(n - 1) : 1.0;
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> uni(0.0, 1.0);
    for (std::size_t j = 0; j < n; ++j) {
        const double x = static_cast<double>(j);
        switch (cls) {
            case EventClass::SineBurst:
            case EventClass::SustainedTone: env[j] = 1.0; break;
            case EventClass::ChirpUp: env[j] = 0.25 + 0.75 * x / span; break;
            case EventClass::ChirpDown: env[j] = 1.0 - 0.75 * x / span; break;
            case EventClass::AmTone:
                env[j] = 0.55 + 0.45 * std::sin(2.0 * std::numbers::pi * 5.0 * x * kHalf / kSampleRate);
                break;
            case EventClass::NoiseBurst:
            case EventClass::SustainedNoise: env[j] = 0.4 + 0.6 * uni(rng); break;
            case EventClass::ClickTrain: env[j] = (j % 2 == 0) ? 1.0 : 0.15; break;
        }
    }
    return env;
}

/// Latent of a single event on a clip of `total_duration` seconds.
template <typename T = float>
Tensor<T> event_latent(const EventSpec& e, double total_duration) {
    if (e.onset < 0.0 || e.duration <= 0.0) throw ContractError("synth_event: onset must be >= 0 and duration > 0");
    if (e.amplitude < 0.0 || e.amplitude > 1.0) throw ContractError("synth_event: amplitude outside [0, 1]");
    if (e.onset + e.duration > total_duration + 1e-9) throw ContractError("synth_event: event overruns clip");
    const std::size_t frames = frames_for_seconds(total_duration);
    Tensor<T> z = Tensor<T>::matrix(frames, kChannels);
    const auto [first, last] = event_slots(e);
    const auto band = static_cast<std::size_t>(e.cls);
    const auto env = class_envelope(e.cls, last - first, e.seed);
    for (std::size_t s = first; s < last && s / 2 < frames; ++s)
        z(s / 2, channel_of(s % 2, band)) = static_cast<T>(e.amplitude * env[s - first]);
    return z;
}

/// Deterministic waveform of one event; exactly zero outside its support.
inline Waveform synth_event(const EventSpec& e, double total_duration) {
    const auto z = event_latent<double>(e, total_duration);
    const auto n = static_cast<std::size_t>(std::llround(total_duration * kSampleRate));
    return decode(z, n);
}

// ---------------------------------------------------------------------------
// Class signatures (toy audio-event embedding)

/// Unit-norm mean latent frame of clean events of each class.
inline const std::array<std::array<double, kChannels>, kNumClasses>& class_signatures() {
    static const auto table = [] {
        std::array<std::array<double, kChannels>, kNumClasses> sig{};
        for (std::size_t c = 0; c < kNumClasses; ++c) {
            std::array<double, kChannels> acc{};
            for (std::uint64_t k = 0; k < 8; ++k) {
                EventSpec e{static_cast<EventClass>(c), 0.1 * static_cast<double>(k), 1.0 + 0.25 * static_cast<double>(k),
                            1.0, 1000 + k};
                const auto z = event_latent<double>(e, 4.0);
                for (std::size_t f = 0; f < z.rows(); ++f)
                    for (std::size_t ch = 0; ch < kChannels; ++ch) acc[ch] += z(f, ch);
            }
            double n = 0.0;
            for (double v : acc) n += v * v;
            n = std::sqrt(n);
            for (std::size_t ch = 0; ch < kChannels; ++ch) sig[c][ch] = acc[ch] / n;
        }
        return sig;
    }();
    return table;
}

/// Dot product of each latent frame with each class signature (T x 8).
template <typename T>
Tensor<double> class_responses(const Tensor<T>& z) {
    const auto& sig = class_signatures();
    Tensor<double> r = Tensor<double>::matrix(z.rows(), kNumClasses);
    for (std::size_t f = 0; f < z.rows(); ++f)
        for (std::size_t c = 0; c < kNumClasses; ++c) {
            double acc = 0.0;
            for (std::size_t ch = 0; ch < kChannels; ++ch) acc += static_cast<double>(z(f, ch)) * sig[c][ch];
            r(f, c) = acc;
        }
    return r;
}

/// Mean latent frame of a sequence.
template <typename T>
std::array<double, kChannels> mean_frame(const Tensor<T>& z) {
    std::array<double, kChannels> m{};
    if (z.rows() == 0) return m;
    for (std::size_t f = 0; f < z.rows(); ++f)
        for (std::size_t ch = 0; ch < kChannels; ++ch) m[ch] += static_cast<double>(z(f, ch));
    for (auto& v : m) v /= static_cast<double>(z.rows());
    return m;
}

/// Nearest class signature by cosine; the toy event classifier.
template <typename T>
EventClass classify(const Tensor<T>& z) {
    const auto m = mean_frame(z);
    const auto& sig = class_signatures();
    double best = -2.0;
    std::size_t arg = 0;
    double mn = 0.0;
    for (double v : m) mn += v * v;
    mn = std::sqrt(mn);
    for (std::size_t c = 0; c < kNumClasses; ++c) {
        double d = 0.0;
        for (std::size_t ch = 0; ch < kChannels; ++ch) d += m[ch] * sig[c][ch];
        const double cs = mn > 0 ? d / mn : 0.0;
        if (cs > best) {
            best = cs;
            arg = c;
        }
    }
    return static_cast<EventClass>(arg);
}

/// Per-frame toy AED embedding (T x 16): magnitude of each latent channel.
template <typename T>
Tensor<T> aed_embedding(const Tensor<T>& z) {
    Tensor<T> a = z;
    a.arr() = a.arr().abs();
    return a;
}

}  // namespace samsep::codec
