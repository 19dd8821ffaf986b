#include <cstdio>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "samsep/commands.hpp"

namespace {

using namespace samsep;

enum Exit { kOk = 0, kUsage = 2, kData = 3, kNumeric = 4 };

config::RunConfig load_config(const std::string& path, const std::vector<std::string>& overrides) {
    auto cfg = config::load(path);
    for (const auto& kv : overrides) {
        const auto eq = kv.find('=');
        if (eq == std::string::npos) throw UsageError("--set expects key=value, got '" + kv + "'");
        config::set(cfg, kv.substr(0, eq), kv.substr(eq + 1));
    }
    config::validate(cfg);
    return cfg;
}

template <typename T>
std::optional<T> opt_if(const CLI::Option* o, const T& v) {
    return o->count() ? std::optional<T>(v) : std::nullopt;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Promptable source separation with conditional flow matching"};
    app.require_subcommand(1);

    std::string config_path, out, ckpt_path, corpus, resume, init, stage = "pretrain";
    std::vector<std::string> overrides;
    bool quiet = false;

    auto* synth = app.add_subcommand("synth", "Synthesize a corpus of mixture triplets");
    synth->add_option("--config", config_path, "Run config (key = value)")->required()->check(CLI::ExistingFile);
    synth->add_option("--out", out, "Output directory")->required();
    synth->add_option("--set", overrides, "Override a config key (key=value)");

    auto* trn = app.add_subcommand("train", "Train the separator");
    trn->add_option("--config", config_path, "Run config (key = value)")->required()->check(CLI::ExistingFile);
    trn->add_option("--out", out, "Output directory for checkpoints and loss.csv")->required();
    auto* corpus_opt = trn->add_option("--corpus", corpus, "Corpus manifest; synthetic data on the fly when omitted")
                           ->check(CLI::ExistingFile);
    trn->add_option("--stage", stage, "pretrain or finetune")->check(CLI::IsMember({"pretrain", "finetune"}));
    auto* resume_opt = trn->add_option("--resume", resume, "Resume from a training-state checkpoint")->check(CLI::ExistingFile);
    auto* init_opt = trn->add_option("--init", init, "Start from model weights")->check(CLI::ExistingFile);
    trn->add_option("--set", overrides, "Override a config key (key=value)");
    trn->add_flag("--quiet", quiet, "No progress output");
    resume_opt->excludes(init_opt);

    cmd::SeparateArgs sa;
    std::string input, text, spans, visual, ref_t, ref_r;
    int steps = 0;
    auto* sep = app.add_subcommand("separate", "Separate one mixture");
    sep->add_option("--ckpt", ckpt_path, "Model or training-state checkpoint")->required()->check(CLI::ExistingFile);
    sep->add_option("--input", input, "Mixture, raw float32 LE at 8 kHz")->required()->check(CLI::ExistingFile);
    sep->add_option("--out", out, "Output directory")->required();
    auto* text_opt = sep->add_option("--text", text, "Text prompt, e.g. \"chirp-up\"");
    auto* spans_opt = sep->add_option("--spans", spans, "Span prompt: \"0.5-1.2,3-4\" or JSON [[s, e], ...]");
    auto* vis_opt = sep->add_option("--visual-oracle", visual, "Visual features, raw float32 T x 8")->check(CLI::ExistingFile);
    sep->add_flag("--predict-spans", sa.predict_spans, "Add predicted spans to the text prompt");
    sep->add_option("--threshold", sa.span_threshold, "Span detector frame threshold");
    sep->add_flag("--longform", sa.longform, "Multi-diffusion over overlapping windows");
    sep->add_option("--window", sa.window, "Long-form window length in frames");
    sep->add_option("--overlap", sa.overlap, "Long-form window overlap in frames");
    sep->add_option("--beam", sa.beam, "Candidates to generate and re-rank")->check(CLI::PositiveNumber);
    sep->add_option("--seed", sa.seed, "Noise seed");
    auto* sep_steps = sep->add_option("--steps", steps, "ODE steps (default from checkpoint)")->check(CLI::PositiveNumber);
    auto* ref_t_opt = sep->add_option("--ref-target", ref_t, "Reference target for metrics")->check(CLI::ExistingFile);
    auto* ref_r_opt = sep->add_option("--ref-residual", ref_r, "Reference residual for metrics")->check(CLI::ExistingFile);

    cmd::EvalArgs ea;
    std::string manifest, mode = "bundle";
    auto* ev = app.add_subcommand("eval", "Evaluate a checkpoint on a manifest");
    ev->add_option("--ckpt", ckpt_path, "Checkpoint")->required()->check(CLI::ExistingFile);
    ev->add_option("--manifest", manifest, "Test manifest")->required()->check(CLI::ExistingFile);
    ev->add_option("--out", out, "Report path (JSON lines)")->required();
    ev->add_option("--mode", mode, "Prompt mode: bundle, text, text+pred, text+gt")
        ->check(CLI::IsMember({"bundle", "text", "text+pred", "text+gt"}));
    ev->add_option("--seed", ea.seed, "Noise seed");
    auto* ev_steps = ev->add_option("--steps", steps, "ODE steps (default from checkpoint)")->check(CLI::PositiveNumber);

    cmd::FilterArgs fa;
    auto* flt = app.add_subcommand("filter", "Pseudo-label synthetic mixtures and gate them");
    flt->add_option("--ckpt", ckpt_path, "Checkpoint")->required()->check(CLI::ExistingFile);
    flt->add_option("--config", config_path, "Run config; data.* drives the mixtures")->required()->check(CLI::ExistingFile);
    flt->add_option("--out", out, "Output directory")->required();
    flt->add_option("--seed", fa.seed, "Noise seed");
    auto* flt_steps = flt->add_option("--steps", steps, "ODE steps (default from checkpoint)")->check(CLI::PositiveNumber);
    flt->add_option("--set", overrides, "Override a config key (key=value)");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int rc = app.exit(e);
        return rc == 0 ? kOk : kUsage;
    }

    try {
        if (synth->parsed()) {
            const auto records = cmd::synth(load_config(config_path, overrides), out);
            std::cout << "wrote " << records.size() << " triplets to " << out << "\n";
        } else if (trn->parsed()) {
            cmd::TrainArgs ta;
            ta.cfg = load_config(config_path, overrides);
            ta.stage = cmd::parse_stage(stage);
            ta.out_dir = out;
            ta.corpus = opt_if<std::filesystem::path>(corpus_opt, corpus);
            ta.resume = opt_if<std::filesystem::path>(resume_opt, resume);
            ta.init = opt_if<std::filesystem::path>(init_opt, init);
            const std::size_t every = std::max<std::size_t>(1, ta.cfg.train.steps / 20);
            auto progress = [&](const train::StepStats& s) {
                if (quiet || (s.step % every != 0 && s.step + 1 != ta.cfg.train.steps)) return;
                std::fprintf(stderr, "step %zu  fm %.5f  aux %.5f  lr %.2e\n", s.step, s.fm_loss, s.aux_loss, s.lr);
            };
            const auto r = cmd::train_model(ta, progress);
            std::cout << "trained to step " << r.state.step << "; checkpoints in " << out << "\n";
        } else if (sep->parsed()) {
            sa.ckpt = ckpt_path;
            sa.input = input;
            sa.out_dir = out;
            sa.text = opt_if(text_opt, text);
            if (spans_opt->count()) sa.spans = cmd::parse_spans(spans);
            sa.visual = opt_if<std::filesystem::path>(vis_opt, visual);
            sa.ode_steps = opt_if(sep_steps, steps);
            sa.ref_target = opt_if<std::filesystem::path>(ref_t_opt, ref_t);
            sa.ref_residual = opt_if<std::filesystem::path>(ref_r_opt, ref_r);
            const auto r = cmd::separate(sa);
            std::cout << r.report.dump(2) << "\n";
        } else if (ev->parsed()) {
            ea.ckpt = ckpt_path;
            ea.manifest = manifest;
            ea.out_report = out;
            ea.mode = cmd::parse_prompt_mode(mode);
            ea.ode_steps = opt_if(ev_steps, steps);
            std::cout << cmd::evaluate(ea).dump(2) << "\n";
        } else if (flt->parsed()) {
            fa.ckpt = ckpt_path;
            fa.cfg = load_config(config_path, overrides);
            fa.out_dir = out;
            fa.ode_steps = opt_if(flt_steps, steps);
            const auto r = cmd::pseudo_label(fa);
            std::cout << "kept " << r.kept << ", rejected " << r.rejected << "\n";
        }
    } catch (const UsageError& e) {
        std::cerr << "usage error: " << e.what() << "\n";
        return kUsage;
    } catch (const NumericError& e) {
        std::cerr << "numeric failure: " << e.what() << "\n";
        return kNumeric;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kData;
    }
    return kOk;
}
