#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "samsep/codec.hpp"

using namespace samsep;
using namespace samsep::codec;

namespace {

Waveform random_wave(std::size_t n, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<float> u(-1.0f, 1.0f);
    Waveform w;
    w.samples.resize(n);
    for (auto& v : w.samples) v = u(rng);
    return w;
}

EventSpec random_spec(std::mt19937_64& rng, double clip) {
    std::uniform_real_distribution<double> u(0.0, 1.0);
    EventSpec e;
    e.cls = static_cast<EventClass>(rng() % kNumClasses);
    e.duration = 0.1 + u(rng) * (clip - 0.2);
    e.onset = u(rng) * (clip - e.duration);
    e.amplitude = 0.05 + 0.95 * u(rng);
    e.seed = rng();
    return e;
}

double max_abs_diff(const Waveform& a, const Waveform& b) {
    double m = 0.0;
    for (std::size_t i = 0; i < a.samples.size(); ++i) m = std::max(m, std::abs(double(a.samples[i]) - b.samples[i]));
    return m;
}

}  // namespace

TEST(Encode, ZeroWaveformGivesZeroLatent) {
    Waveform w;
    w.samples.assign(8000, 0.0f);
    const auto z = encode(w);
    for (float v : z.storage()) EXPECT_EQ(v, 0.0f);
}

TEST(Encode, IsLinear) {
    const auto a = random_wave(16000, 1), b = random_wave(16000, 2);
    Waveform s = a;
    for (std::size_t i = 0; i < s.samples.size(); ++i) s.samples[i] += b.samples[i];
    const auto za = encode(a), zb = encode(b), zs = encode(s);
    for (std::size_t i = 0; i < zs.numel(); ++i) EXPECT_NEAR(zs[i], za[i] + zb[i], 1e-6);
}

TEST(Encode, TwoSecondsIsFiftyFrames) {
    Waveform w;
    w.samples.assign(2 * kSampleRate, 0.0f);
    EXPECT_EQ(encode(w).rows(), 50u);
    EXPECT_EQ(encode(w).cols(), 16u);
}

TEST(Encode, PartialFramesArePaddedNotTruncated) {
    Waveform w;
    w.samples.assign(2 * kSampleRate + 1, 0.0f);
    EXPECT_EQ(encode(w).rows(), 51u);
}

TEST(Encode, EmptyWaveformIsContractError) {
    EXPECT_THROW(encode(Waveform{}), ContractError);
}

TEST(Encode, WrongSampleRateIsContractError) {
    Waveform w{std::vector<float>(320, 0.0f), 16000};
    EXPECT_THROW(encode(w), ContractError);
}

TEST(Decode, ZeroLatentGivesZeroWaveform) {
    const auto w = decode(Tensor<float>::matrix(10, kChannels));
    EXPECT_EQ(w.samples.size(), 10 * kHop);
    for (float v : w.samples) EXPECT_EQ(v, 0.0f);
}

TEST(Decode, WrongChannelCountIsContractError) {
    EXPECT_THROW(decode(Tensor<float>::matrix(4, 15)), ContractError);
}

TEST(Decode, RoundTripOnGeneratedEvents) {
    std::mt19937_64 rng(7);
    for (int i = 0; i < 100; ++i) {
        const auto e = random_spec(rng, 3.0);
        const auto w = synth_event(e, 3.0);
        EXPECT_LT(max_abs_diff(decode(encode(w), w.samples.size()), w), 1e-5) << "spec " << i;
    }
}

TEST(Decode, RoundTripOnMixedSources) {
    std::mt19937_64 rng(8);
    for (int i = 0; i < 20; ++i) {
        const auto a = synth_event(random_spec(rng, 2.0), 2.0);
        const auto b = synth_event(random_spec(rng, 2.0), 2.0);
        Waveform s = a;
        for (std::size_t k = 0; k < s.samples.size(); ++k) s.samples[k] += b.samples[k];
        EXPECT_LT(max_abs_diff(decode(encode(s), s.samples.size()), s), 1e-5);
    }
}

TEST(SynthEvent, ZeroAmplitudeIsSilent) {
    const auto w = synth_event({EventClass::ChirpUp, 0.5, 1.0, 0.0, 3}, 2.0);
    for (float v : w.samples) EXPECT_EQ(v, 0.0f);
}

TEST(SynthEvent, IsDeterministic) {
    const EventSpec e{EventClass::NoiseBurst, 0.3, 1.1, 0.8, 42};
    EXPECT_EQ(synth_event(e, 2.0), synth_event(e, 2.0));
}

TEST(SynthEvent, SineBurstIsZeroOutsideItsSupport) {
    const auto w = synth_event({EventClass::SineBurst, 1.0, 0.5, 1.0, 0}, 3.0);
    ASSERT_EQ(w.samples.size(), 24000u);
    for (std::size_t i = 0; i < 8000; ++i) ASSERT_EQ(w.samples[i], 0.0f) << i;
    for (std::size_t i = 12000; i < w.samples.size(); ++i) ASSERT_EQ(w.samples[i], 0.0f) << i;
    double e = 0.0;
    for (std::size_t i = 8000; i < 12000; ++i) e += double(w.samples[i]) * w.samples[i];
    EXPECT_GT(e, 0.0);
}

TEST(SynthEvent, OverrunIsContractError) {
    EXPECT_THROW(synth_event({EventClass::SineBurst, 1.5, 1.0, 1.0, 0}, 2.0), ContractError);
}

TEST(SynthEvent, ClassesOccupyTheirOwnBand) {
    for (std::size_t c = 0; c < kNumClasses; ++c) {
        const auto z = event_latent<double>({static_cast<EventClass>(c), 0.0, 1.0, 1.0, 5}, 1.0);
        for (std::size_t f = 0; f < z.rows(); ++f)
            for (std::size_t ch = 0; ch < kChannels; ++ch)
                if (ch % kBands != c) EXPECT_EQ(z(f, ch), 0.0);
    }
}

TEST(SynthEvent, PeakAmplitudeEqualsLatentValue) {
    const auto w = synth_event({EventClass::SustainedTone, 0.0, 1.0, 0.7, 0}, 1.0);
    float peak = 0.0f;
    for (float v : w.samples) peak = std::max(peak, std::abs(v));
    EXPECT_NEAR(peak, 0.7, 0.01);
}

TEST(ClassSignatures, NearestSignatureClassifiesCleanEvents) {
    std::mt19937_64 rng(9);
    for (int i = 0; i < 200; ++i) {
        auto e = random_spec(rng, 4.0);
        e.duration = std::max(e.duration, 0.2);
        e.onset = std::min(e.onset, 4.0 - e.duration);
        const auto z = encode(synth_event(e, 4.0));
        EXPECT_EQ(classify(z), e.cls) << "event " << i;
    }
}

TEST(ClassSignatures, AreUnitNorm) {
    for (const auto& s : class_signatures()) {
        double n = 0.0;
        for (double v : s) n += v * v;
        EXPECT_NEAR(n, 1.0, 1e-12);
    }
}
