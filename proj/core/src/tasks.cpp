#include "pelab/tasks.hpp"

#include <algorithm>
#include <fstream>
#include <set>
#include <sstream>

#include <json.hpp>

#include "pelab/rng.hpp"

namespace pelab {

using nlohmann::json;

std::string task_kind_name(TaskKind kind) {
    switch (kind) {
        case TaskKind::RelDistance: return "rel_distance";
        case TaskKind::TriggerCount: return "trigger_count";
        case TaskKind::MultiTriggerSum: return "multi_trigger_sum";
    }
    throw ConfigError("task_kind_name: unknown kind");
}

TaskKind task_kind_from_name(const std::string& name) {
    for (TaskKind k : {TaskKind::RelDistance, TaskKind::TriggerCount, TaskKind::MultiTriggerSum}) {
        if (task_kind_name(k) == name) return k;
    }
    throw ConfigError("task_kind_from_name: unknown task '" + name + "'");
}

std::size_t TaskConfig::num_classes() const {
    if (task == TaskKind::TriggerCount) return count_max + 1;
    // distances run 1..seq_len-1, binned by floor(d/width)
    return static_cast<std::size_t>(bin_distance(seq_len - 1)) + 1;
}

int TaskConfig::bin_distance(std::size_t d) const {
    return static_cast<int>(d / distance_bin_width);
}

void TaskConfig::validate() const {
    if (num_samples == 0) throw ConfigError("TaskConfig: num_samples must be positive");
    if (seq_len < 3) throw ConfigError("TaskConfig: seq_len too small");
    if (distance_bin_width == 0) throw ConfigError("TaskConfig: distance_bin_width must be >= 1");
    auto check_range = [&](std::pair<int, int> r, const char* what) {
        if (r.first < 0 || r.second <= r.first ||
            static_cast<std::size_t>(r.second) > vocab_size) {
            throw ConfigError(std::string("TaskConfig: bad ") + what + " range");
        }
    };
    check_range(trigger_vocab, "trigger_vocab");
    check_range(filler_vocab, "filler_vocab");
    if (std::max(trigger_vocab.first, filler_vocab.first) <
        std::min(trigger_vocab.second, filler_vocab.second)) {
        throw ConfigError("TaskConfig: trigger and filler vocab ranges overlap");
    }
    if (task == TaskKind::RelDistance && trigger_vocab.second - trigger_vocab.first < 2) {
        throw ConfigError("TaskConfig: RelDistance needs at least two trigger ids");
    }
    if (task == TaskKind::TriggerCount && count_max >= seq_len) {
        throw ConfigError("TaskConfig: count_max must be below seq_len");
    }
    if (task == TaskKind::MultiTriggerSum) {
        if (num_triggers < 3) throw ConfigError("TaskConfig: MultiTriggerSum needs >= 3 triggers");
        if (num_triggers > seq_len) {
            throw ConfigError("TaskConfig: num_triggers exceeds seq_len");
        }
        if (static_cast<int>(num_triggers) > trigger_vocab.second - trigger_vocab.first) {
            throw ConfigError("TaskConfig: trigger vocab too small for num_triggers");
        }
    }
}

std::string TaskConfig::to_json() const {
    json j;
    j["task"] = task_kind_name(task);
    j["seq_len"] = seq_len;
    j["vocab_size"] = vocab_size;
    j["trigger_vocab"] = {trigger_vocab.first, trigger_vocab.second};
    j["filler_vocab"] = {filler_vocab.first, filler_vocab.second};
    j["num_samples"] = num_samples;
    j["distance_bin_width"] = distance_bin_width;
    j["count_max"] = count_max;
    j["num_triggers"] = num_triggers;
    j["seed"] = seed;
    return j.dump();
}

TaskConfig TaskConfig::from_json(const std::string& text) {
    json j = json::parse(text);
    TaskConfig cfg;
    cfg.task = task_kind_from_name(j.at("task").get<std::string>());
    cfg.seq_len = j.at("seq_len").get<std::size_t>();
    cfg.vocab_size = j.at("vocab_size").get<std::size_t>();
    cfg.trigger_vocab = {j.at("trigger_vocab")[0].get<int>(), j.at("trigger_vocab")[1].get<int>()};
    cfg.filler_vocab = {j.at("filler_vocab")[0].get<int>(), j.at("filler_vocab")[1].get<int>()};
    cfg.num_samples = j.at("num_samples").get<std::size_t>();
    cfg.distance_bin_width = j.value("distance_bin_width", std::size_t{1});
    cfg.count_max = j.value("count_max", std::size_t{15});
    cfg.num_triggers = j.value("num_triggers", std::size_t{3});
    cfg.seed = j.value("seed", std::uint64_t{0});
    return cfg;
}

// ---- generators ------------------------------------------------------------------

namespace {

int draw_from_range(Rng& rng, std::pair<int, int> range) {
    return range.first +
           static_cast<int>(rng.uniform_int(static_cast<std::uint64_t>(range.second - range.first)));
}

void fill_fillers(Rng& rng, const TaskConfig& cfg, std::vector<int>& tokens) {
    for (int& t : tokens) {
        if (t < 0) t = draw_from_range(rng, cfg.filler_vocab);
    }
}

// k distinct positions in [0, n), ascending; partial Fisher-Yates.
std::vector<int> distinct_positions(Rng& rng, std::size_t n, std::size_t k) {
    std::vector<int> pool(n);
    for (std::size_t i = 0; i < n; ++i) pool[i] = static_cast<int>(i);
    for (std::size_t i = 0; i < k; ++i) {
        const std::size_t j = i + static_cast<std::size_t>(rng.uniform_int(n - i));
        std::swap(pool[i], pool[j]);
    }
    std::vector<int> out(pool.begin(), pool.begin() + static_cast<long>(k));
    std::sort(out.begin(), out.end());
    return out;
}

// k distinct trigger ids; draws indices without replacement.
std::vector<int> distinct_triggers(Rng& rng, std::pair<int, int> range, std::size_t k) {
    const std::size_t span = static_cast<std::size_t>(range.second - range.first);
    std::set<int> chosen;
    std::vector<int> out;
    while (out.size() < k) {
        int candidate = range.first + static_cast<int>(rng.uniform_int(span));
        if (chosen.insert(candidate).second) out.push_back(candidate);
    }
    return out;
}

}  // namespace

Dataset gen_task1(const TaskConfig& cfg, std::uint64_t seed) {
    TaskConfig c = cfg;
    c.task = TaskKind::RelDistance;
    c.validate();
    Rng rng(seed);
    Dataset ds;
    ds.samples.reserve(c.num_samples);
    const std::size_t L = c.seq_len;
    for (std::size_t s = 0; s < c.num_samples; ++s) {
        SampleRecord rec;
        rec.tokens.assign(L, -1);
        // uniform ordered pair i < j
        int a = static_cast<int>(rng.uniform_int(L));
        int b = static_cast<int>(rng.uniform_int(L - 1));
        if (b >= a) ++b;
        const int i = std::min(a, b), j = std::max(a, b);
        const std::vector<int> trig = distinct_triggers(rng, c.trigger_vocab, 2);
        rec.tokens[static_cast<std::size_t>(i)] = trig[0];
        rec.tokens[static_cast<std::size_t>(j)] = trig[1];
        fill_fillers(rng, c, rec.tokens);
        rec.positions = {i, j};
        rec.distance = j - i;
        rec.label = c.bin_distance(static_cast<std::size_t>(rec.distance));
        ds.samples.push_back(std::move(rec));
    }
    return ds;
}

Dataset gen_task2(const TaskConfig& cfg, std::uint64_t seed) {
    TaskConfig c = cfg;
    c.task = TaskKind::TriggerCount;
    c.validate();
    Rng rng(seed);
    Dataset ds;
    ds.samples.reserve(c.num_samples);
    const std::size_t L = c.seq_len;
    for (std::size_t s = 0; s < c.num_samples; ++s) {
        SampleRecord rec;
        rec.tokens.assign(L, -1);
        const std::size_t count = static_cast<std::size_t>(rng.uniform_int(c.count_max + 1));
        rec.positions = distinct_positions(rng, L, count);
        for (int pos : rec.positions) {
            rec.tokens[static_cast<std::size_t>(pos)] = draw_from_range(rng, c.trigger_vocab);
        }
        fill_fillers(rng, c, rec.tokens);
        rec.distance = 0;
        rec.label = static_cast<int>(count);
        ds.samples.push_back(std::move(rec));
    }
    return ds;
}

Dataset gen_task3_multi(const TaskConfig& cfg, std::uint64_t seed) {
    TaskConfig c = cfg;
    c.task = TaskKind::MultiTriggerSum;
    c.validate();
    Rng rng(seed);
    Dataset ds;
    ds.samples.reserve(c.num_samples);
    const std::size_t L = c.seq_len;
    for (std::size_t s = 0; s < c.num_samples; ++s) {
        SampleRecord rec;
        rec.tokens.assign(L, -1);
        rec.positions = distinct_positions(rng, L, c.num_triggers);
        const std::vector<int> trig = distinct_triggers(rng, c.trigger_vocab, c.num_triggers);
        for (std::size_t t = 0; t < c.num_triggers; ++t) {
            rec.tokens[static_cast<std::size_t>(rec.positions[t])] = trig[t];
        }
        fill_fillers(rng, c, rec.tokens);
        // gap sum telescopes to last - first
        rec.distance = rec.positions.back() - rec.positions.front();
        rec.label = c.bin_distance(static_cast<std::size_t>(rec.distance));
        ds.samples.push_back(std::move(rec));
    }
    return ds;
}

Dataset generate(const TaskConfig& cfg, std::uint64_t seed) {
    switch (cfg.task) {
        case TaskKind::RelDistance: return gen_task1(cfg, seed);
        case TaskKind::TriggerCount: return gen_task2(cfg, seed);
        case TaskKind::MultiTriggerSum: return gen_task3_multi(cfg, seed);
    }
    throw ConfigError("generate: unknown task");
}

std::pair<Dataset, Dataset> split(const Dataset& dataset, double ratio, std::uint64_t seed) {
    if (dataset.empty()) throw ConfigError("split: dataset is empty");
    if (ratio <= 0.0 || ratio >= 1.0) throw ConfigError("split: ratio must be in (0,1)");
    Rng rng(seed);
    std::vector<std::uint32_t> perm = rng.permutation(dataset.size());
    const std::size_t train_n =
        static_cast<std::size_t>(ratio * static_cast<double>(dataset.size()) + 1e-9);
    Dataset train, test;
    train.samples.reserve(train_n);
    test.samples.reserve(dataset.size() - train_n);
    for (std::size_t i = 0; i < dataset.size(); ++i) {
        (i < train_n ? train : test).samples.push_back(dataset.samples[perm[i]]);
    }
    return {std::move(train), std::move(test)};
}

// ---- JSONL ------------------------------------------------------------------------

std::string sample_to_json(const SampleRecord& rec) {
    std::ostringstream os;
    os << "{\"tokens\":[";
    for (std::size_t i = 0; i < rec.tokens.size(); ++i) os << (i ? "," : "") << rec.tokens[i];
    os << "],\"label\":" << rec.label << ",\"meta\":{\"positions\":[";
    for (std::size_t i = 0; i < rec.positions.size(); ++i)
        os << (i ? "," : "") << rec.positions[i];
    os << "],\"distance\":" << rec.distance << "}}";
    return os.str();
}

void write_jsonl(const Dataset& dataset, const std::string& path) {
    std::ofstream f(path, std::ios::binary);  // binary: byte-identical across platforms
    if (!f) throw IoError("write_jsonl: cannot open " + path);
    for (const SampleRecord& rec : dataset.samples) f << sample_to_json(rec) << "\n";
}

Dataset read_jsonl(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw IoError("read_jsonl: cannot open " + path);
    Dataset ds;
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(f, line)) {
        ++line_no;
        if (line.empty()) continue;
        json j;
        try {
            j = json::parse(line);
        } catch (const json::parse_error& e) {
            throw IoError("read_jsonl: parse error at line " + std::to_string(line_no) + ": " +
                          e.what());
        }
        SampleRecord rec;
        rec.tokens = j.at("tokens").get<std::vector<int>>();
        rec.label = j.at("label").get<int>();
        if (j.contains("meta")) {
            rec.positions = j["meta"].value("positions", std::vector<int>{});
            rec.distance = j["meta"].value("distance", 0);
        }
        ds.samples.push_back(std::move(rec));
    }
    return ds;
}

// ---- validation ---------------------------------------------------------------------

void validate_sample(const SampleRecord& rec, const TaskConfig& cfg) {
    if (rec.tokens.size() != cfg.seq_len) {
        throw ContractError("validate_sample: wrong sequence length");
    }
    auto in_range = [](int id, std::pair<int, int> r) {
        return id >= r.first && id < r.second;
    };
    std::vector<std::size_t> trigger_positions;
    for (std::size_t p = 0; p < rec.tokens.size(); ++p) {
        const int id = rec.tokens[p];
        if (in_range(id, cfg.trigger_vocab)) {
            trigger_positions.push_back(p);
        } else if (!in_range(id, cfg.filler_vocab)) {
            throw ContractError("validate_sample: token outside both vocab ranges");
        }
    }
    switch (cfg.task) {
        case TaskKind::RelDistance: {
            if (trigger_positions.size() != 2) {
                throw ContractError("validate_sample: expected exactly two trigger tokens");
            }
            if (rec.tokens[trigger_positions[0]] == rec.tokens[trigger_positions[1]]) {
                throw ContractError("validate_sample: trigger tokens must be distinct");
            }
            const std::size_t d = trigger_positions[1] - trigger_positions[0];
            if (rec.label != cfg.bin_distance(d)) {
                throw ContractError("validate_sample: label does not match binned distance");
            }
            break;
        }
        case TaskKind::TriggerCount: {
            if (trigger_positions.size() != static_cast<std::size_t>(rec.label)) {
                throw ContractError("validate_sample: label does not match trigger count");
            }
            if (trigger_positions.size() > cfg.count_max) {
                throw ContractError("validate_sample: count exceeds count_max");
            }
            break;
        }
        case TaskKind::MultiTriggerSum: {
            if (trigger_positions.size() != cfg.num_triggers) {
                throw ContractError("validate_sample: wrong number of triggers");
            }
            const std::size_t d = trigger_positions.back() - trigger_positions.front();
            if (rec.label != cfg.bin_distance(d)) {
                throw ContractError("validate_sample: label does not match gap sum");
            }
            break;
        }
    }
}

}  // namespace pelab
