#pragma once

#include <cstddef>
#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "pelab/ablate.hpp"
#include "pelab/model.hpp"
#include "pelab/tasks.hpp"
#include "pelab/train.hpp"

namespace pelab {

enum class AnalysisKind { HeadSweep, PiRemoval, PartialRope, Spectral, Theory };

std::string analysis_name(AnalysisKind kind);
AnalysisKind analysis_from_name(const std::string& name);

struct TrainProtocol {
    std::size_t epochs = 30;
    std::size_t batch_size = 512;
    std::size_t micro_batch = 64;
    double lr = 1e-4;
    double beta1 = 0.98;  // printed protocol order; see the config override
    double beta2 = 0.9;
    double weight_decay = 1e-5;
    double warmup_frac = 0.06;
    std::vector<std::uint64_t> seeds{0, 42};
};

struct ExperimentConfig {
    std::string name;
    TaskConfig task;
    ModelConfig model;
    TrainProtocol train;
    std::vector<PeKind> pe_kinds;  // sweep; defaults to {model.pe.kind}
    std::vector<AnalysisKind> analyses;
    std::vector<std::vector<std::size_t>> partial_rope_k;  // PartialRope analysis configs
    std::string output_dir;

    // Throws ConfigError listing every offending field.
    void validate() const;
    std::string to_json() const;
    static ExperimentConfig from_json(const std::string& text);
    static ExperimentConfig load(const std::string& path);
    void save(const std::string& path) const;

    // FNV-1a over the canonical serialization; stable under re-serialization.
    std::uint64_t config_hash() const;
};

struct RunManifest {
    std::uint64_t config_hash = 0;
    std::string code_version;
    std::vector<std::string> artifacts;
    std::map<std::string, double> wall_times_sec;

    std::string to_json() const;
    static RunManifest from_json(const std::string& text);
};

// Executes generate -> train (per seed x PE kind) -> analyses -> reports into
// config.output_dir. Refuses to touch a non-empty directory unless force is
// set. Worker pool size comes from PE_LAB_THREADS.
RunManifest run_experiment(const ExperimentConfig& config, bool force = false);

// Per-run summary written next to each checkpoint.
struct RunSummary {
    std::string pe_kind;
    std::uint64_t seed = 0;
    double final_train_acc = 0.0;
    double final_test_acc = 0.0;
    double wall_time_sec = 0.0;
    std::string checkpoint_prefix;

    std::string to_json() const;
    static RunSummary from_json(const std::string& text);
};

// ---- Table 1 ordinal comparison --------------------------------------------------

struct OrdinalReport {
    // measured mean accuracies keyed by pe kind
    std::map<std::string, double> task1_acc;
    std::map<std::string, double> task2_acc;
    bool task1_chain_holds = false;  // rope > mla >> nope
    bool task2_chain_holds = false;  // mla > nope > rope
    std::vector<std::string> notes;  // ties and missing-run diagnostics

    std::string to_json() const;
};

// Reads run summaries from two experiment directories (task 1 and task 2).
// Lists what is missing instead of failing when runs are absent.
OrdinalReport compare_table1(const std::string& task1_dir, const std::string& task2_dir);

// ---- presets ------------------------------------------------------------------------

// Named presets covering every figure/table in scope: fig2, fig3, fig4,
// fig5, fig6, fig7, table1 (two configs), appendix-d2, appendix-d3,
// appendix-d4, theory-c, spectral-b.
std::vector<std::string> preset_names();
// table1 expands to two configs (task 1 and task 2); others to one.
std::vector<ExperimentConfig> make_preset(const std::string& name,
                                          const std::string& output_root = "runs");

// ---- report emission -------------------------------------------------------------------

// One box/whisker glyph per layer from an ablation CSV; pure text SVG.
void emit_svg_violin(const std::string& ablation_csv, const std::string& svg_path);

// Spectral and theory artifact emitters used by the CLI subcommands.
void emit_spectral_artifacts(const std::string& output_dir, std::uint64_t seed = 20240801);
void emit_theory_artifacts(const std::string& output_dir, const Model32* rope_model,
                           const Dataset* task1_batch, std::uint64_t seed = 20240802);

extern const char* kCodeVersion;

}  // namespace pelab
