// Command-line front end: data generation, training, ablation sweeps,
// spectral and theory suites, report emission, and full preset pipelines.

#include <malloc.h>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>

#include <CLI11.hpp>

#include "pelab/experiment.hpp"
#include "pelab/theory.hpp"

using namespace pelab;
namespace fs = std::filesystem;

namespace {

void tune_allocator() {
    // large tensor buffers churn every step; keep them in the arena
    mallopt(M_TRIM_THRESHOLD, 1 << 30);
    mallopt(M_MMAP_THRESHOLD, 256 << 20);
}

TaskConfig parse_task_flags(const std::string& task, std::size_t seq_len, std::size_t samples,
                            std::size_t bin_width, std::size_t count_max,
                            std::size_t num_triggers, std::uint64_t seed) {
    TaskConfig cfg;
    cfg.task = task_kind_from_name(task);
    cfg.seq_len = seq_len;
    cfg.num_samples = samples;
    cfg.distance_bin_width = bin_width;
    cfg.count_max = count_max;
    cfg.num_triggers = num_triggers;
    cfg.seed = seed;
    if (cfg.task == TaskKind::TriggerCount) {
        cfg.trigger_vocab = {0, 20};
        cfg.filler_vocab = {20, 574};
    }
    return cfg;
}

int cmd_gen_data(const std::string& task, std::size_t seq_len, std::size_t samples,
                 std::size_t bin_width, std::size_t count_max, std::size_t num_triggers,
                 std::uint64_t seed, const std::string& out) {
    TaskConfig cfg =
        parse_task_flags(task, seq_len, samples, bin_width, count_max, num_triggers, seed);
    cfg.validate();
    Dataset ds = generate(cfg, seed);
    write_jsonl(ds, out);
    std::printf("wrote %zu samples (%zu classes) to %s\n", ds.size(), cfg.num_classes(),
                out.c_str());
    return 0;
}

int cmd_run(const std::string& config_path, const std::string& preset,
            const std::string& output_root, bool force) {
    std::vector<ExperimentConfig> configs;
    if (!preset.empty()) {
        configs = make_preset(preset, output_root);
    } else {
        configs.push_back(ExperimentConfig::load(config_path));
    }
    for (const ExperimentConfig& cfg : configs) {
        std::printf("== running %s -> %s\n", cfg.name.c_str(), cfg.output_dir.c_str());
        RunManifest manifest = run_experiment(cfg, force);
        std::printf("   %zu artifacts, config hash %llu\n", manifest.artifacts.size(),
                    static_cast<unsigned long long>(manifest.config_hash));
    }
    return 0;
}

int cmd_train(const std::string& config_path, bool force) {
    ExperimentConfig cfg = ExperimentConfig::load(config_path);
    cfg.analyses.clear();
    RunManifest manifest = run_experiment(cfg, force);
    std::printf("trained %zu artifacts into %s\n", manifest.artifacts.size(),
                cfg.output_dir.c_str());
    return 0;
}

int cmd_ablate(const std::string& ckpt, const std::string& data, const std::string& out_csv,
               const std::string& out_svg) {
    Model32 model = Model32::load_checkpoint(ckpt);
    Dataset ds = read_jsonl(data);
    AblationReport rep = head_sweep(model, ds);
    rep.write_csv(out_csv);
    std::printf("baseline %.4f; wrote %s\n", rep.baseline_acc, out_csv.c_str());
    DepositScore score = deposit_score(rep);
    for (std::size_t l = 0; l < score.flagged.size(); ++l) {
        std::printf("  layer %zu: outlier score %.4f%s\n", l + 1, score.score[l],
                    score.flagged[l] ? "  [single-head deposit]" : "");
    }
    if (!out_svg.empty()) {
        emit_svg_violin(out_csv, out_svg);
        std::printf("wrote %s\n", out_svg.c_str());
    }
    return 0;
}

int cmd_spectral(const std::string& out_dir, std::uint64_t seed) {
    emit_spectral_artifacts(out_dir, seed);
    std::printf("spectral artifacts in %s\n", out_dir.c_str());
    return 0;
}

int cmd_theory(const std::string& out_dir, const std::string& ckpt, const std::string& data,
               std::uint64_t seed) {
    std::optional<Model32> model;
    Dataset batch;
    if (!ckpt.empty()) model = Model32::load_checkpoint(ckpt);
    if (!data.empty()) {
        Dataset full = read_jsonl(data);
        const std::size_t take = std::min<std::size_t>(256, full.size());
        batch.samples.assign(full.samples.begin(), full.samples.begin() + take);
    }
    emit_theory_artifacts(out_dir, model.has_value() ? &*model : nullptr,
                          batch.empty() ? nullptr : &batch, seed);
    std::printf("theory suite in %s/theory.json\n", out_dir.c_str());
    return 0;
}

int cmd_report(const std::string& mode, const std::string& in_a, const std::string& in_b,
               const std::string& out) {
    if (mode == "violin") {
        emit_svg_violin(in_a, out);
        std::printf("wrote %s\n", out.c_str());
        return 0;
    }
    if (mode == "table1") {
        OrdinalReport rep = compare_table1(in_a, in_b);
        if (!out.empty()) {
            std::ofstream f(out);
            f << rep.to_json() << "\n";
        }
        std::printf("%s\n", rep.to_json().c_str());
        return 0;
    }
    throw ConfigError("report: unknown mode '" + mode + "' (violin|table1)");
}

}  // namespace

int main(int argc, char** argv) {
    tune_allocator();
    CLI::App app{"positional-encoding laboratory"};
    app.require_subcommand(1);

    // gen-data
    auto* gen = app.add_subcommand("gen-data", "generate a synthetic task dataset (JSONL)");
    std::string task = "rel_distance", gen_out = "dataset.jsonl";
    std::size_t seq_len = 64, samples = 20000, bin_width = 1, count_max = 15, num_triggers = 3;
    std::uint64_t seed = 1000;
    gen->add_option("--task", task, "rel_distance|trigger_count|multi_trigger_sum");
    gen->add_option("--seq-len", seq_len);
    gen->add_option("--samples", samples);
    gen->add_option("--bin-width", bin_width);
    gen->add_option("--count-max", count_max);
    gen->add_option("--num-triggers", num_triggers);
    gen->add_option("--seed", seed);
    gen->add_option("--out", gen_out);

    // run / train
    auto* run = app.add_subcommand("run", "run a full experiment pipeline");
    std::string run_config, run_preset, output_root = "runs";
    bool force = false;
    run->add_option("--config", run_config, "experiment config JSON");
    run->add_option("--preset", run_preset, "one of the named presets");
    run->add_option("--output-root", output_root, "root directory for preset outputs");
    run->add_flag("--force", force, "overwrite a non-empty output dir");

    auto* train = app.add_subcommand("train", "train only (config analyses are skipped)");
    std::string train_config;
    bool train_force = false;
    train->add_option("--config", train_config)->required();
    train->add_flag("--force", train_force);

    auto* presets = app.add_subcommand("presets", "list the named presets");

    // ablate
    auto* ablate = app.add_subcommand("ablate", "head-wise ablation sweep of a checkpoint");
    std::string ab_ckpt, ab_data, ab_csv = "ablation.csv", ab_svg;
    ablate->add_option("--checkpoint", ab_ckpt, "checkpoint prefix")->required();
    ablate->add_option("--data", ab_data, "evaluation JSONL")->required();
    ablate->add_option("--out", ab_csv);
    ablate->add_option("--svg", ab_svg);

    // spectral / theory
    auto* spectral = app.add_subcommand("spectral", "emit the spectral suite artifacts");
    std::string sp_out = "spectral";
    std::uint64_t sp_seed = 20240801;
    spectral->add_option("--out", sp_out);
    spectral->add_option("--seed", sp_seed);

    auto* theory = app.add_subcommand("theory", "emit the theory suite report");
    std::string th_out = "theory", th_ckpt, th_data;
    std::uint64_t th_seed = 20240802;
    theory->add_option("--out", th_out);
    theory->add_option("--checkpoint", th_ckpt, "optional rotary checkpoint for measured ops");
    theory->add_option("--data", th_data, "optional task-1 JSONL for measured ops");
    theory->add_option("--seed", th_seed);

    // report
    auto* report = app.add_subcommand("report", "emit reports from artifacts");
    std::string rp_mode = "violin", rp_in_a, rp_in_b, rp_out;
    report->add_option("--mode", rp_mode, "violin|table1")->required();
    report->add_option("--in", rp_in_a, "ablation CSV (violin) or task-1 run dir (table1)")
        ->required();
    report->add_option("--in2", rp_in_b, "task-2 run dir (table1)");
    report->add_option("--out", rp_out);

    CLI11_PARSE(app, argc, argv);

    try {
        if (gen->parsed()) {
            return cmd_gen_data(task, seq_len, samples, bin_width, count_max, num_triggers,
                                seed, gen_out);
        }
        if (run->parsed()) return cmd_run(run_config, run_preset, output_root, force);
        if (train->parsed()) return cmd_train(train_config, train_force);
        if (presets->parsed()) {
            for (const std::string& name : preset_names()) std::printf("%s\n", name.c_str());
            return 0;
        }
        if (ablate->parsed()) return cmd_ablate(ab_ckpt, ab_data, ab_csv, ab_svg);
        if (spectral->parsed()) return cmd_spectral(sp_out, sp_seed);
        if (theory->parsed()) return cmd_theory(th_out, th_ckpt, th_data, th_seed);
        if (report->parsed()) return cmd_report(rp_mode, rp_in_a, rp_in_b, rp_out);
    } catch (const std::exception& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 1;
    }
    return 0;
}
