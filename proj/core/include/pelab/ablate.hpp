#pragma once

#include <cstddef>
#include <string>
#include <vector>

#include "pelab/model.hpp"
#include "pelab/tasks.hpp"
#include "pelab/train.hpp"

namespace pelab {

struct AblationEntry {
    std::size_t layer = 0;
    std::size_t head = 0;
    double acc = 0.0;
};

struct LayerSummary {
    std::size_t layer = 0;
    double min = 0.0, q1 = 0.0, median = 0.0, q3 = 0.0, max = 0.0;
};

struct AblationReport {
    double baseline_acc = 0.0;
    std::size_t num_layers = 0, num_heads = 0;
    std::vector<AblationEntry> entries;  // exactly layers x heads, row-major

    double acc_at(std::size_t layer, std::size_t head) const;
    double drop_at(std::size_t layer, std::size_t head) const;
    std::vector<LayerSummary> per_layer_summary() const;

    // layer,head,acc,baseline,drop
    void write_csv(const std::string& path) const;
    static AblationReport read_csv(const std::string& path);
    // layer,min,q1,median,q3,max
    void write_violin_csv(const std::string& path) const;
};

// Evaluates the model once per (layer, head) with that single head zeroed.
// Worker count comes from PE_LAB_THREADS (default 1); results are ordered
// deterministically regardless of scheduling.
AblationReport head_sweep(const Model32& model, const Dataset& test_set,
                          std::size_t micro_batch = 64);

struct DepositScore {
    std::vector<double> score;        // per layer: max_drop - median_drop
    std::vector<bool> flagged;        // per layer: single-head deposit detected
    std::vector<std::size_t> argmax;  // per layer: head with the largest drop
    bool any() const;
};

// Flags layer l iff max_drop >= drop_threshold and the second-largest drop
// stays below second_threshold.
DepositScore deposit_score(const AblationReport& report, double drop_threshold = 0.30,
                           double second_threshold = 0.10);

struct PartialRopeResult {
    std::vector<std::size_t> heads_per_layer;
    double final_test_acc = 0.0;
    TrainReport report;
    AblationReport sweep;
};

// Trains one model per k-configuration and reports accuracy plus its head
// sweep. `base` must carry PeKind::PartialRope; its head list is replaced by
// each configuration in turn.
std::vector<PartialRopeResult> partial_rope_sweep(
    const std::vector<std::vector<std::size_t>>& configurations, const ModelConfig& base,
    const Dataset& train_set, const Dataset& test_set, const TrainConfig& train_cfg);

struct PiRemovalEntry {
    std::size_t layer = 0;
    double drop_pi = 0.0;
    double drop_random = 0.0;               // mean over seeds
    std::vector<double> drop_random_seeds;  // per seed
};

struct PiRemovalStudy {
    double baseline_acc = 0.0;
    std::vector<PiRemovalEntry> layers;
    void write_csv(const std::string& path) const;
};

// Layer-wise position-vector removal versus norm-matched random removal.
// Requires a PE with explicit position vectors (Absolute or the hybrid).
PiRemovalStudy pi_removal_study(const Model32& model, const Dataset& test_set,
                                const std::vector<std::size_t>& layers,
                                const std::vector<std::uint64_t>& seeds,
                                std::size_t micro_batch = 64);

// Bounded worker pool size: PE_LAB_THREADS, default 1.
std::size_t worker_pool_size();

}  // namespace pelab
