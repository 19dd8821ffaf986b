#pragma once

#include <bit>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include <json.hpp>

#include "samsep/codec.hpp"
#include "samsep/data.hpp"
#include "samsep/errors.hpp"
#include "samsep/prompts.hpp"
#include "samsep/train.hpp"

namespace samsep::io {

namespace fs = std::filesystem;
using json = nlohmann::json;

// ---------------------------------------------------------------------------
// Raw little-endian float32 files

inline std::string read_bytes(const fs::path& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw ValidationError("cannot read " + path.string());
    return std::string((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
}

inline void write_bytes(const fs::path& path, const std::string& bytes) {
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) throw ValidationError("cannot write " + path.string());
    f.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!f) throw ValidationError("write failed: " + path.string());
}

inline std::string f32_bytes(std::span<const float> x) {
    std::string out;
    out.reserve(4 * x.size());
    for (float v : x) {
        const auto u = std::bit_cast<std::uint32_t>(v);
        for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((u >> (8 * i)) & 0xFF));
    }
    return out;
}

inline std::vector<float> f32_values(const std::string& b) {
    if (b.size() % 4 != 0) throw ValidationError("raw f32 file size is not a multiple of 4");
    std::vector<float> out(b.size() / 4);
    for (std::size_t i = 0; i < out.size(); ++i) {
        std::uint32_t u = 0;
        for (std::size_t k = 0; k < 4; ++k) u |= static_cast<std::uint32_t>(static_cast<unsigned char>(b[4 * i + k])) << (8 * k);
        out[i] = std::bit_cast<float>(u);
    }
    return out;
}

inline void write_waveform(const fs::path& path, const codec::Waveform& w) { write_bytes(path, f32_bytes(w.samples)); }

inline codec::Waveform read_waveform(const fs::path& path) {
    codec::Waveform w;
    w.samples = f32_values(read_bytes(path));
    return w;
}

/// Row-major T x Dv visual features.
inline void write_visual(const fs::path& path, const prompt::VisualFeats& v) { write_bytes(path, f32_bytes(v.feats.storage())); }

inline prompt::VisualFeats read_visual(const fs::path& path, std::size_t frames) {
    auto vals = f32_values(read_bytes(path));
    if (vals.size() != frames * prompt::kVisualDim) throw ValidationError("visual features have wrong size: " + path.string());
    return prompt::VisualFeats{Tensor<float>(Shape{frames, prompt::kVisualDim}, std::move(vals)), true};
}

// ---------------------------------------------------------------------------
// Spans

inline json spans_to_json(const prompt::SpanSet& s) {
    json a = json::array();
    for (const auto& iv : s) a.push_back({iv.start, iv.end});
    return a;
}

inline prompt::SpanSet spans_from_json(const json& j) {
    prompt::SpanSet s;
    for (const auto& p : j) {
        if (!p.is_array() || p.size() != 2) throw ValidationError("span entries must be [start, end] pairs");
        s.push_back({p[0].get<double>(), p[1].get<double>()});
    }
    prompt::validate(s);
    return s;
}

// ---------------------------------------------------------------------------
// Corpus manifest (JSON lines, one record per triplet)

struct ManifestRecord {
    std::string id;
    data::Regime regime = data::Regime::MultiStem;
    double clip_seconds = 10.0;
    std::size_t length = 0;
    int target_class = 0;
    std::string text;
    std::vector<int> classes;  // every event class per stem, target stem first
    std::vector<double> snr_db;  // per non-target stem
    prompt::SpanSet spans;       // ground-truth target activity
    bool span_prompt = false;
    std::uint64_t seed = 0;
    std::uint64_t visual_seed = 0;
    bool visible = false;
    std::string mix_path, tgt_path, res_path, visual_path;  // relative to the manifest directory
    std::optional<data::GateVerdict> verdict;
};

inline json to_json(const ManifestRecord& r) {
    json j = {{"id", r.id},
              {"regime", std::string(data::regime_name(r.regime))},
              {"clip_seconds", r.clip_seconds},
              {"sample_rate", codec::kSampleRate},
              {"length", r.length},
              {"target_class", r.target_class},
              {"text", r.text},
              {"classes", r.classes},
              {"snr_db", r.snr_db},
              {"spans", spans_to_json(r.spans)},
              {"span_prompt", r.span_prompt},
              {"seed", r.seed},
              {"visual_seed", r.visual_seed},
              {"visible", r.visible},
              {"paths", {{"mix", r.mix_path}, {"tgt", r.tgt_path}, {"res", r.res_path}, {"visual", r.visual_path}}}};
    if (r.verdict) j["verdict"] = {{"keep", r.verdict->keep}, {"reasons", r.verdict->reasons}};
    else j["verdict"] = nullptr;
    return j;
}

inline ManifestRecord record_from_json(const json& j) {
    ManifestRecord r;
    try {
        r.id = j.at("id").get<std::string>();
        r.regime = data::parse_regime(j.at("regime").get<std::string>());
        r.clip_seconds = j.at("clip_seconds").get<double>();
        r.length = j.at("length").get<std::size_t>();
        r.target_class = j.at("target_class").get<int>();
        r.text = j.at("text").get<std::string>();
        r.classes = j.at("classes").get<std::vector<int>>();
        r.snr_db = j.at("snr_db").get<std::vector<double>>();
        r.spans = spans_from_json(j.at("spans"));
        r.span_prompt = j.at("span_prompt").get<bool>();
        r.seed = j.at("seed").get<std::uint64_t>();
        r.visual_seed = j.at("visual_seed").get<std::uint64_t>();
        r.visible = j.at("visible").get<bool>();
        const auto& p = j.at("paths");
        r.mix_path = p.at("mix").get<std::string>();
        r.tgt_path = p.value("tgt", std::string());
        r.res_path = p.value("res", std::string());
        r.visual_path = p.value("visual", std::string());
        if (j.contains("verdict") && !j.at("verdict").is_null())
            r.verdict = data::GateVerdict{j["verdict"].at("keep").get<bool>(),
                                          j["verdict"].at("reasons").get<std::vector<std::string>>()};
    } catch (const json::exception& e) {
        throw ValidationError(std::string("manifest record: ") + e.what());
    }
    if (r.target_class < 0 || r.target_class >= static_cast<int>(codec::kNumClasses))
        throw ValidationError("manifest record " + r.id + ": target_class out of range");
    return r;
}

inline std::vector<ManifestRecord> read_manifest(const fs::path& path) {
    std::ifstream f(path);
    if (!f) throw ValidationError("cannot read manifest " + path.string());
    std::vector<ManifestRecord> out;
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(f, line)) {
        ++lineno;
        if (line.empty()) continue;
        json j;
        try {
            j = json::parse(line);
        } catch (const json::exception& e) {
            throw ValidationError("manifest line " + std::to_string(lineno) + ": " + e.what());
        }
        out.push_back(record_from_json(j));
    }
    return out;
}

/// Single appender for manifest lines.
class ManifestWriter {
public:
    explicit ManifestWriter(const fs::path& path) : f_(path, std::ios::trunc) {
        if (!f_) throw ValidationError("cannot write manifest " + path.string());
    }
    void append(const ManifestRecord& r) { f_ << to_json(r).dump() << '\n'; }

private:
    std::ofstream f_;
};

/// Record describing a synthesized triplet, with files named after `id`.
inline ManifestRecord describe(const data::MixTriplet& tr, const std::string& id) {
    ManifestRecord r;
    r.id = id;
    r.regime = tr.regime;
    r.clip_seconds = tr.provenance.clip_seconds;
    r.length = tr.mix.samples.size();
    r.target_class = static_cast<int>(tr.target_class);
    r.text = prompt::to_string(tr.bundle.text);
    for (const auto& st : tr.provenance.stems) {
        for (const auto& e : st.events) r.classes.push_back(static_cast<int>(e.cls));
        if (!st.is_target) r.snr_db.push_back(st.snr_db);
    }
    r.spans = tr.target_spans;
    r.span_prompt = tr.bundle.has_span();
    r.seed = tr.provenance.seed;
    r.visual_seed = tr.provenance.visual_seed;
    r.visible = tr.provenance.visible;
    r.mix_path = "stems/" + id + ".mix.f32";
    r.tgt_path = "stems/" + id + ".tgt.f32";
    r.res_path = "stems/" + id + ".res.f32";
    if (r.visible) r.visual_path = "stems/" + id + ".vis.f32";
    return r;
}

/// Writes the waveform (and visual) files a record refers to.
inline void write_triplet_files(const fs::path& root, const ManifestRecord& r, const data::MixTriplet& tr) {
    fs::create_directories(root / "stems");
    write_waveform(root / r.mix_path, tr.mix);
    write_waveform(root / r.tgt_path, tr.tgt);
    write_waveform(root / r.res_path, tr.res);
    if (!r.visual_path.empty()) write_visual(root / r.visual_path, tr.bundle.visual);
}

inline bool has_stems(const fs::path& root, const ManifestRecord& r) {
    return !r.tgt_path.empty() && !r.res_path.empty() && fs::exists(root / r.mix_path) && fs::exists(root / r.tgt_path) &&
           fs::exists(root / r.res_path);
}

/// Prompt bundle a record implies: its text, its spans when span-prompted,
/// its visual features when visible.
inline prompt::PromptBundle bundle_of(const fs::path& root, const ManifestRecord& r, std::size_t frames) {
    auto b = prompt::PromptBundle::dummy(frames);
    b.text = prompt::parse_text(r.text);
    if (r.span_prompt) b.span = prompt::encode_span(r.spans, frames);
    if (r.visible && !r.visual_path.empty()) b.visual = read_visual(root / r.visual_path, frames);
    return b;
}

inline data::MixTriplet load_triplet(const fs::path& root, const ManifestRecord& r) {
    data::MixTriplet tr;
    tr.mix = read_waveform(root / r.mix_path);
    tr.tgt = read_waveform(root / r.tgt_path);
    tr.res = read_waveform(root / r.res_path);
    if (tr.mix.samples.size() != r.length || tr.tgt.samples.size() != r.length || tr.res.samples.size() != r.length)
        throw ValidationError("manifest record " + r.id + ": stem length differs from manifest");
    tr.regime = r.regime;
    tr.target_class = static_cast<codec::EventClass>(r.target_class);
    tr.target_spans = r.spans;
    tr.bundle = bundle_of(root, r, codec::frames_for(r.length));
    tr.provenance.seed = r.seed;
    tr.provenance.clip_seconds = r.clip_seconds;
    tr.provenance.visible = r.visible;
    tr.provenance.visual_seed = r.visual_seed;
    return tr;
}

/// Training source drawing uniformly from a manifest; stems are read on demand.
class ManifestSource : public train::DataSource {
public:
    ManifestSource(fs::path root, std::vector<ManifestRecord> records) : root_(std::move(root)) {
        for (auto& r : records)
            if (!r.verdict || r.verdict->keep) records_.push_back(std::move(r));
        if (records_.empty()) throw ValidationError("corpus has no usable records");
    }
    data::MixTriplet draw(std::uint64_t seed) const override {
        std::mt19937_64 rng(seed);
        return load_triplet(root_, records_[std::uniform_int_distribution<std::size_t>(0, records_.size() - 1)(rng)]);
    }
    std::size_t size() const { return records_.size(); }

private:
    fs::path root_;
    std::vector<ManifestRecord> records_;
};

}  // namespace samsep::io
