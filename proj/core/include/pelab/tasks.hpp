#pragma once

#include <cstddef>
#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "pelab/errors.hpp"

namespace pelab {

enum class TaskKind { RelDistance, TriggerCount, MultiTriggerSum };

std::string task_kind_name(TaskKind kind);
TaskKind task_kind_from_name(const std::string& name);

struct TaskConfig {
    TaskKind task = TaskKind::RelDistance;
    std::size_t seq_len = 64;
    std::size_t vocab_size = 574;
    std::pair<int, int> trigger_vocab{0, 512};   // [lo, hi)
    std::pair<int, int> filler_vocab{512, 574};  // [lo, hi)
    std::size_t num_samples = 0;
    std::size_t distance_bin_width = 1;
    std::size_t count_max = 15;
    std::size_t num_triggers = 3;  // MultiTriggerSum only
    std::uint64_t seed = 0;

    // Distance label: floor(d / bin_width); count label: the count itself.
    std::size_t num_classes() const;
    int bin_distance(std::size_t d) const;
    void validate() const;

    std::string to_json() const;
    static TaskConfig from_json(const std::string& text);
};

struct SampleRecord {
    std::vector<int> tokens;
    int label = 0;
    std::vector<int> positions;  // trigger positions, ascending
    int distance = 0;            // 0 for position-agnostic tasks
};

struct Dataset {
    std::vector<SampleRecord> samples;

    std::size_t size() const { return samples.size(); }
    bool empty() const { return samples.empty(); }
};

Dataset gen_task1(const TaskConfig& cfg, std::uint64_t seed);
Dataset gen_task2(const TaskConfig& cfg, std::uint64_t seed);
Dataset gen_task3_multi(const TaskConfig& cfg, std::uint64_t seed);
Dataset generate(const TaskConfig& cfg, std::uint64_t seed);

std::pair<Dataset, Dataset> split(const Dataset& dataset, double ratio, std::uint64_t seed);

// One record per line: {"tokens":[...],"label":N,"meta":{"positions":[...],"distance":N}}.
void write_jsonl(const Dataset& dataset, const std::string& path);
Dataset read_jsonl(const std::string& path);
std::string sample_to_json(const SampleRecord& rec);

// Re-derives the label and structural invariants from the raw tokens; throws
// ContractError on any violation.
void validate_sample(const SampleRecord& rec, const TaskConfig& cfg);

}  // namespace pelab
