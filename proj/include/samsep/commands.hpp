#pragma once

#include <algorithm>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "samsep/checkpoint.hpp"
#include "samsep/codec.hpp"
#include "samsep/config.hpp"
#include "samsep/data.hpp"
#include "samsep/errors.hpp"
#include "samsep/eval.hpp"
#include "samsep/flow.hpp"
#include "samsep/io.hpp"
#include "samsep/prompts.hpp"
#include "samsep/train.hpp"

namespace samsep::cmd {

namespace fs = std::filesystem;
using json = nlohmann::json;

inline std::string item_id(std::size_t i) {
    char buf[16];
    std::snprintf(buf, sizeof buf, "%06zu", i);
    return buf;
}

/// FNV-1a, used to derive per-item seeds from stable ids.
inline std::uint64_t fnv1a(const std::string& s) {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (unsigned char c : s) {
        h ^= c;
        h *= 0x100000001b3ULL;
    }
    return h;
}

inline std::string format_real(double v) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.9g", v);
    return buf;
}

// ---------------------------------------------------------------------------
// synth

/// Regime and triplet seed of corpus item i.
inline std::pair<data::Regime, std::uint64_t> synth_plan(const config::DataConfig& d, std::size_t i) {
    std::mt19937_64 rng(train::mix_seed(d.seed, i, 0));
    const auto regime = train::pick_regime(d.weights, rng);
    return {regime, train::mix_seed(d.seed, i, 1)};
}

/// Writes data.count triplets and manifest.jsonl under out_dir.
inline std::vector<io::ManifestRecord> synth(const config::RunConfig& cfg, const fs::path& out_dir) {
    config::validate(cfg);
    fs::create_directories(out_dir);
    io::ManifestWriter writer(out_dir / "manifest.jsonl");
    std::vector<io::ManifestRecord> records;
    for (std::size_t i = 0; i < cfg.data.count; ++i) {
        const auto [regime, seed] = synth_plan(cfg.data, i);
        data::TripletOptions opt;
        opt.clip_seconds = cfg.data.clip_seconds;
        const auto tr = data::make_triplet(regime, seed, opt);
        auto rec = io::describe(tr, item_id(i));
        io::write_triplet_files(out_dir, rec, tr);
        writer.append(rec);
        records.push_back(std::move(rec));
    }
    return records;
}

// ---------------------------------------------------------------------------
// train

struct TrainArgs {
    config::RunConfig cfg;
    train::Stage stage = train::Stage::Pretrain;
    std::optional<fs::path> corpus;  // manifest; synthetic on-the-fly data when absent
    fs::path out_dir;
    std::optional<fs::path> resume;  // training-state checkpoint
    std::optional<fs::path> init;    // model weights to start from (fresh optimizer)
};

inline std::string stage_name(train::Stage s) { return s == train::Stage::Pretrain ? "pretrain" : "finetune"; }

inline train::Stage parse_stage(const std::string& s) {
    if (s == "pretrain") return train::Stage::Pretrain;
    if (s == "finetune") return train::Stage::Finetune;
    throw UsageError("unknown stage '" + s + "' (expected pretrain or finetune)");
}

inline json flow_json(const flow::FlowConfig& f) {
    return {{"sigma_min", f.sigma_min},
            {"lambda_aux", f.lambda_aux},
            {"ode_steps", f.ode_steps},
            {"solver", f.solver == flow::Solver::Midpoint ? "midpoint" : "euler"}};
}

inline flow::FlowConfig flow_from_json(const json& j) {
    flow::FlowConfig f;
    if (j.is_null()) return f;
    f.sigma_min = j.value("sigma_min", f.sigma_min);
    f.lambda_aux = j.value("lambda_aux", f.lambda_aux);
    f.ode_steps = j.value("ode_steps", f.ode_steps);
    f.solver = j.value("solver", std::string("midpoint")) == "euler" ? flow::Solver::Euler : flow::Solver::Midpoint;
    return f;
}

/// Effective flow and training settings for a stage: fine-tuning drops the
/// auxiliary loss and conditioning dropout.
inline std::pair<flow::FlowConfig, train::TrainConfig> stage_settings(const config::RunConfig& cfg, train::Stage stage) {
    flow::FlowConfig fc = cfg.flow;
    train::TrainConfig tc = cfg.train;
    tc.stage = stage;
    if (stage == train::Stage::Finetune) {
        fc.lambda_aux = 0.0;
        tc.dropout = 0.0;
    }
    return {fc, tc};
}

struct TrainResult {
    train::TrainState state;
    std::vector<train::StepStats> log;  // steps run by this invocation
};

/// Trains to cfg.train.steps, writing loss.csv, ckpt_stepNNNNNN.samt every
/// checkpoint_every steps, final.samt (full state) and ema.samt (EMA weights).
inline TrainResult train_model(const TrainArgs& a, const std::function<void(const train::StepStats&)>& progress = {}) {
    config::validate(a.cfg);
    const auto [fc, tc] = stage_settings(a.cfg, a.stage);
    fs::create_directories(a.out_dir);

    std::unique_ptr<train::DataSource> source;
    if (a.corpus) source = std::make_unique<io::ManifestSource>(a.corpus->parent_path(), io::read_manifest(*a.corpus));
    else source = std::make_unique<train::SyntheticSource>(a.cfg.data.weights, a.cfg.data.clip_seconds);

    TrainResult r;
    if (a.resume) {
        dit::DitConfig saved;
        r.state = ckpt::load_state(ckpt::read(a.resume->string()), &saved);
        if (!(saved == a.cfg.model)) throw ConfigError("resume: checkpoint model config differs from the run config");
    } else if (a.init) {
        const auto m = ckpt::load_model(ckpt::read(a.init->string()));
        if (!(m.config == a.cfg.model)) throw ConfigError("init: checkpoint model config differs from the run config");
        r.state.params = m.params;
        r.state.ema = m.params;
        r.state.opt.init(r.state.params);
    } else {
        r.state = train::init_state(a.cfg.model, tc.seed);
    }

    // Keep log rows from before the starting step so a resumed run in the
    // same directory ends with the same file as an uninterrupted one.
    const fs::path log_path = a.out_dir / "loss.csv";
    std::string kept = "step,fm_loss,aux_loss\n";
    if (a.resume && fs::exists(log_path)) {
        std::ifstream in(log_path);
        std::string line;
        std::getline(in, line);
        while (std::getline(in, line)) {
            if (line.empty()) continue;
            if (std::stoull(line.substr(0, line.find(','))) < r.state.step) kept += line + '\n';
        }
    }
    std::ofstream log(log_path, std::ios::trunc);
    if (!log) throw ValidationError("cannot write " + log_path.string());
    log << kept;

    json meta = {{"stage", stage_name(a.stage)},
                 {"train_seed", tc.seed},
                 {"data_seed", a.cfg.data.seed},
                 {"flow", flow_json(fc)},
                 {"corpus", a.corpus.has_value()}};

    while (r.state.step < tc.steps) {
        train::StepStats s;
        try {
            s = train::train_step(r.state, *source, a.cfg.model, fc, tc);
        } catch (const NumericError& e) {
            std::ofstream dump(a.out_dir / "nan_dump.json", std::ios::trunc);
            dump << json{{"step", r.state.step}, {"train_seed", tc.seed}, {"error", e.what()}}.dump(2) << '\n';
            throw;
        }
        log << s.step << ',' << format_real(s.fm_loss) << ',' << format_real(s.aux_loss) << '\n';
        r.log.push_back(s);
        if (progress) progress(s);
        if (a.cfg.checkpoint_every > 0 && r.state.step % a.cfg.checkpoint_every == 0 && r.state.step < tc.steps)
            ckpt::write((a.out_dir / ("ckpt_step" + item_id(r.state.step) + ".samt")).string(),
                        ckpt::state_checkpoint(a.cfg.model, r.state, meta));
    }
    log.flush();
    ckpt::write((a.out_dir / "final.samt").string(), ckpt::state_checkpoint(a.cfg.model, r.state, meta));
    ckpt::write((a.out_dir / "ema.samt").string(), ckpt::model_checkpoint(a.cfg.model, r.state.ema, meta));
    return r;
}

// ---------------------------------------------------------------------------
// separate

struct SeparateArgs {
    fs::path ckpt;
    fs::path input;  // raw f32 mixture
    std::optional<std::string> text;
    std::optional<prompt::SpanSet> spans;
    std::optional<fs::path> visual;  // raw f32 T x Dv oracle features
    bool predict_spans = false;      // add detector spans to a text prompt
    double span_threshold = eval::kDefaultSpanThreshold;
    bool longform = false;
    std::size_t window = 500;
    std::size_t overlap = 125;
    std::size_t beam = 1;
    std::uint64_t seed = 0;
    std::optional<int> ode_steps;
    std::optional<fs::path> ref_target;
    std::optional<fs::path> ref_residual;
    fs::path out_dir;
};

/// Parses spans given as JSON ("[[0.5, 1.2], [3, 4]]") or as "0.5-1.2,3-4".
inline prompt::SpanSet parse_spans(const std::string& s) {
    const auto first = s.find_first_not_of(" \t");
    if (first != std::string::npos && s[first] == '[') {
        try {
            return io::spans_from_json(json::parse(s));
        } catch (const json::exception& e) {
            throw UsageError(std::string("--spans: ") + e.what());
        }
    }
    prompt::SpanSet out;
    std::stringstream ss(s);
    std::string item;
    while (std::getline(ss, item, ',')) {
        const auto dash = item.find('-', 1);
        if (dash == std::string::npos) throw UsageError("--spans: expected start-end pairs, got '" + item + "'");
        try {
            out.push_back({std::stod(item.substr(0, dash)), std::stod(item.substr(dash + 1))});
        } catch (const std::exception&) {
            throw UsageError("--spans: bad number in '" + item + "'");
        }
    }
    prompt::validate(out);
    return out;
}

struct SeparateResult {
    flow::Separation sep;
    json report;
};

inline SeparateResult separate(const SeparateArgs& a) {
    if (!a.text && !a.spans && !a.visual) throw UsageError("separate: give at least one of --text, --spans, --visual-oracle");
    if (a.beam < 1) throw UsageError("separate: --beam must be >= 1");
    const auto ck = ckpt::read(a.ckpt.string());
    const flow::Model model = ckpt::load_model(ck);
    flow::FlowConfig fc = flow_from_json(ck.meta.value("flow", json()));
    if (a.ode_steps) fc.ode_steps = *a.ode_steps;
    flow::validate(fc);

    const auto mix = io::read_waveform(a.input);
    if (mix.samples.empty()) throw ValidationError("separate: empty input");
    const std::size_t frames = codec::frames_for(mix.samples.size());
    const double seconds = static_cast<double>(mix.samples.size()) / codec::kSampleRate;
    if (frames > flow::kOneShotMaxFrames && !a.longform)
        throw UsageError("separate: input is " + format_real(seconds) +
                         " s, longer than the 30 s one-shot limit; rerun with --longform");

    auto bundle = prompt::PromptBundle::dummy(frames);
    if (a.text) bundle.text = prompt::parse_text(*a.text);
    if (a.spans) bundle.span = prompt::encode_span(*a.spans, frames);
    if (a.visual) bundle.visual = io::read_visual(*a.visual, frames);

    json report = {{"seed", a.seed},
                   {"beam", a.beam},
                   {"frames", frames},
                   {"longform", a.longform},
                   {"ode_steps", fc.ode_steps},
                   {"prompt",
                    {{"text", a.text ? prompt::to_string(bundle.text) : ""},
                     {"spans", a.spans ? io::spans_to_json(*a.spans) : json(nullptr)},
                     {"visual", a.visual.has_value()}}}};

    if (a.predict_spans) {
        if (!a.text || bundle.text.is_empty()) throw UsageError("separate: --predict-spans needs a --text prompt");
        if (a.spans) throw UsageError("separate: --predict-spans and --spans are exclusive");
        const auto pred = eval::predict_spans(mix, bundle.text, a.span_threshold);
        bundle.span = prompt::encode_span(pred, frames);
        report["predicted_spans"] = io::spans_to_json(pred);
    }

    std::optional<flow::WindowPlan> plan;
    if (a.longform) {
        plan = flow::make_window_plan(frames, a.window, a.overlap);
        report["windows"] = plan->windows.size();
    }
    auto run = [&](std::uint64_t s) {
        return plan ? flow::multi_diffusion(mix, bundle, *plan, fc, model, s) : flow::separate(mix, bundle, fc, model, s);
    };
    auto cs = eval::beam_separate(a.beam, a.seed, bundle, run);
    report["chosen"] = cs.chosen;
    if (!cs.judge.empty()) report["candidates"] = {{"judge", cs.judge}, {"clap", cs.clap}};

    SeparateResult out{std::move(cs.candidates[cs.chosen]), {}};
    if (!out.sep.target.all_finite() || !out.sep.residual.all_finite())
        throw NumericError("separate: non-finite output (seed " + std::to_string(a.seed) + ")");
    if (a.ref_target || a.ref_residual) {
        json m;
        if (a.ref_target) {
            const auto ref = io::read_waveform(*a.ref_target);
            m["si_sdr_target"] = eval::si_sdr(out.sep.target, ref);
            m["si_sdr_mix"] = eval::si_sdr(mix, ref);
            m["si_sdri"] = m["si_sdr_target"].get<double>() - m["si_sdr_mix"].get<double>();
        }
        if (a.ref_residual) m["si_sdr_residual"] = eval::si_sdr(out.sep.residual, io::read_waveform(*a.ref_residual));
        report["metrics"] = m;
    }
    fs::create_directories(a.out_dir);
    io::write_waveform(a.out_dir / "target.f32", out.sep.target);
    io::write_waveform(a.out_dir / "residual.f32", out.sep.residual);
    std::ofstream(a.out_dir / "report.json", std::ios::trunc) << report.dump(2) << '\n';
    out.report = std::move(report);
    return out;
}

// ---------------------------------------------------------------------------
// eval

enum class PromptMode { Bundle, Text, TextPredicted, TextOracle };

inline PromptMode parse_prompt_mode(const std::string& s) {
    if (s == "bundle") return PromptMode::Bundle;
    if (s == "text") return PromptMode::Text;
    if (s == "text+pred") return PromptMode::TextPredicted;
    if (s == "text+gt") return PromptMode::TextOracle;
    throw UsageError("unknown prompt mode '" + s + "' (bundle, text, text+pred, text+gt)");
}

/// Prompt bundle for an item under the requested mode.
inline prompt::PromptBundle eval_bundle(const data::MixTriplet& tr, PromptMode mode) {
    const std::size_t frames = codec::frames_for(tr.mix.samples.size());
    if (mode == PromptMode::Bundle) return tr.bundle;
    auto b = prompt::PromptBundle::dummy(frames);
    b.text = tr.bundle.text;
    if (mode == PromptMode::TextPredicted) b.span = prompt::encode_span(eval::predict_spans(tr.mix, b.text), frames);
    if (mode == PromptMode::TextOracle) b.span = prompt::encode_span(tr.target_spans, frames);
    return b;
}

struct EvalArgs {
    fs::path ckpt;
    fs::path manifest;
    fs::path out_report;
    PromptMode mode = PromptMode::Bundle;
    std::uint64_t seed = 0;
    std::optional<int> ode_steps;
};

inline const std::vector<std::string>& eval_metrics() {
    static const std::vector<std::string> m = {"si_sdr_target", "si_sdr_residual", "si_sdr_mix",
                                               "si_sdri",       "span_iou",        "clap_target"};
    return m;
}

/// Per-item metrics for one separated triplet.
inline json item_metrics(const data::MixTriplet& tr, const flow::Separation& sep) {
    const double st = eval::si_sdr(sep.target, tr.tgt);
    const double sm = eval::si_sdr(tr.mix, tr.tgt);
    return {{"si_sdr_target", st},
            {"si_sdr_residual", eval::si_sdr(sep.residual, tr.res)},
            {"si_sdr_mix", sm},
            {"si_sdri", st - sm},
            {"span_iou", eval::span_iou(data::vad_spans(sep.target), tr.target_spans)},
            {"clap_target", data::toy_clap(sep.target, tr.target_class)}};
}

/// Aggregates per-item lines: mean and 95% bootstrap interval per metric.
inline json summarize(const std::vector<json>& items, std::uint64_t seed) {
    json summary = json::object();
    std::size_t scored = 0, skipped = 0;
    for (const auto& it : items) (it.contains("skipped") ? skipped : scored)++;
    for (const auto& name : eval_metrics()) {
        std::vector<double> v;
        for (const auto& it : items)
            if (it.contains("metrics")) v.push_back(it["metrics"][name].get<double>());
        if (v.empty()) continue;
        const auto ci = eval::bootstrap_ci(std::span<const double>(v), [](std::span<const double> s) { return eval::mean_of(s); },
                                           1000, train::mix_seed(seed, fnv1a(name)));
        summary[name] = {{"mean", eval::mean_of(v)}, {"ci95", {ci.lo, ci.hi}}, {"n", v.size()}};
    }
    return {{"summary", summary}, {"count", scored}, {"skipped", skipped}};
}

/// Evaluates every manifest item (in id order, so aggregates do not depend
/// on manifest order) and writes per-item JSON lines plus a summary line.
inline json evaluate(const EvalArgs& a) {
    const auto ck = ckpt::read(a.ckpt.string());
    const flow::Model model = ckpt::load_model(ck);
    flow::FlowConfig fc = flow_from_json(ck.meta.value("flow", json()));
    if (a.ode_steps) fc.ode_steps = *a.ode_steps;
    auto records = io::read_manifest(a.manifest);
    std::sort(records.begin(), records.end(), [](const auto& x, const auto& y) { return x.id < y.id; });
    const fs::path root = a.manifest.parent_path();

    std::vector<json> items;
    for (const auto& r : records) {
        if (!io::has_stems(root, r)) {
            items.push_back({{"id", r.id}, {"skipped", "missing stems"}});
            continue;
        }
        const auto tr = io::load_triplet(root, r);
        const auto seed = train::mix_seed(a.seed, fnv1a(r.id));
        const auto sep = flow::separate(tr.mix, eval_bundle(tr, a.mode), fc, model, seed);
        items.push_back({{"id", r.id}, {"regime", data::regime_name(r.regime)}, {"seed", seed}, {"metrics", item_metrics(tr, sep)}});
    }
    json summary = summarize(items, a.seed);
    std::ofstream out(a.out_report, std::ios::trunc);
    if (!out) throw ValidationError("cannot write " + a.out_report.string());
    for (const auto& it : items) out << it.dump() << '\n';
    out << summary.dump() << '\n';
    return summary;
}

// ---------------------------------------------------------------------------
// filter (pseudo-labelling)

struct FilterArgs {
    fs::path ckpt;
    config::RunConfig cfg;  // data.* drives the unlabeled mixtures
    fs::path out_dir;
    std::uint64_t seed = 0;
    std::optional<int> ode_steps;
};

struct FilterResult {
    std::size_t kept = 0;
    std::size_t rejected = 0;
};

/// Separates synthetic "unlabeled" mixtures with their class prompt, scores
/// the estimates, and emits every candidate with its gate verdict. Stems
/// are written only for kept candidates: target = estimate, residual =
/// mixture - estimate, mixture = target + residual.
inline FilterResult pseudo_label(const FilterArgs& a) {
    config::validate(a.cfg);
    const auto ck = ckpt::read(a.ckpt.string());
    const flow::Model model = ckpt::load_model(ck);
    flow::FlowConfig fc = flow_from_json(ck.meta.value("flow", json()));
    if (a.ode_steps) fc.ode_steps = *a.ode_steps;
    fs::create_directories(a.out_dir / "stems");
    io::ManifestWriter writer(a.out_dir / "manifest.jsonl");
    FilterResult res;
    for (std::size_t i = 0; i < a.cfg.data.count; ++i) {
        const auto [regime, tseed] = synth_plan(a.cfg.data, i);
        data::TripletOptions opt;
        opt.clip_seconds = a.cfg.data.clip_seconds;
        auto tr = data::make_triplet(regime, tseed, opt);
        auto bundle = prompt::PromptBundle::dummy(codec::frames_for(tr.mix.samples.size()));
        bundle.text = tr.bundle.text;
        bundle.visual = tr.bundle.visual;
        const auto sep = flow::separate(tr.mix, bundle, fc, model, train::mix_seed(a.seed, i));
        const auto scores = data::toy_scorers(sep.target, sep.residual, bundle.text, bundle.visual);
        const auto verdict = data::filter_gate(scores);

        auto rec = io::describe(tr, item_id(i));
        rec.verdict = verdict;
        if (verdict.keep) {
            tr.tgt = sep.target;
            for (std::size_t n = 0; n < tr.mix.samples.size(); ++n) {
                tr.res.samples[n] = tr.mix.samples[n] - tr.tgt.samples[n];
                tr.mix.samples[n] = tr.tgt.samples[n] + tr.res.samples[n];
            }
            tr.target_spans = data::vad_spans(tr.tgt);
            rec.spans = tr.target_spans;
            io::write_triplet_files(a.out_dir, rec, tr);
            ++res.kept;
        } else {
            rec.tgt_path.clear();
            rec.res_path.clear();
            rec.visual_path.clear();
            io::write_waveform(a.out_dir / rec.mix_path, tr.mix);
            ++res.rejected;
        }
        writer.append(rec);
    }
    return res;
}

}  // namespace samsep::cmd
