#include "pelab/ablate.hpp"

#include <algorithm>
#include <atomic>
#include <cstdlib>
#include <fstream>
#include <sstream>
#include <thread>

namespace pelab {

std::size_t worker_pool_size() {
    const char* env = std::getenv("PE_LAB_THREADS");
    if (!env) return 1;
    const long n = std::strtol(env, nullptr, 10);
    return n > 0 ? static_cast<std::size_t>(n) : 1;
}

double AblationReport::acc_at(std::size_t layer, std::size_t head) const {
    return entries.at(layer * num_heads + head).acc;
}

double AblationReport::drop_at(std::size_t layer, std::size_t head) const {
    return baseline_acc - acc_at(layer, head);
}

namespace {

double quantile(std::vector<double> sorted, double q) {
    if (sorted.empty()) return 0.0;
    const double pos = q * static_cast<double>(sorted.size() - 1);
    const std::size_t lo = static_cast<std::size_t>(pos);
    const std::size_t hi = std::min(lo + 1, sorted.size() - 1);
    const double frac = pos - static_cast<double>(lo);
    return sorted[lo] * (1.0 - frac) + sorted[hi] * frac;
}

}  // namespace

std::vector<LayerSummary> AblationReport::per_layer_summary() const {
    std::vector<LayerSummary> out;
    out.reserve(num_layers);
    for (std::size_t l = 0; l < num_layers; ++l) {
        std::vector<double> accs;
        accs.reserve(num_heads);
        for (std::size_t h = 0; h < num_heads; ++h) accs.push_back(acc_at(l, h));
        std::sort(accs.begin(), accs.end());
        LayerSummary s;
        s.layer = l;
        s.min = accs.front();
        s.q1 = quantile(accs, 0.25);
        s.median = quantile(accs, 0.5);
        s.q3 = quantile(accs, 0.75);
        s.max = accs.back();
        out.push_back(s);
    }
    return out;
}

void AblationReport::write_csv(const std::string& path) const {
    std::ofstream f(path);
    if (!f) throw IoError("AblationReport::write_csv: cannot open " + path);
    f << "layer,head,acc,baseline,drop\n";
    f.precision(10);
    for (const AblationEntry& e : entries) {
        f << e.layer << "," << e.head << "," << e.acc << "," << baseline_acc << ","
          << (baseline_acc - e.acc) << "\n";
    }
}

AblationReport AblationReport::read_csv(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw IoError("AblationReport::read_csv: cannot open " + path);
    std::string line;
    std::getline(f, line);
    if (line != "layer,head,acc,baseline,drop") {
        throw IoError("AblationReport::read_csv: unexpected header in " + path);
    }
    AblationReport rep;
    std::size_t line_no = 1;
    while (std::getline(f, line)) {
        ++line_no;
        if (line.empty()) continue;
        std::istringstream is(line);
        AblationEntry e;
        char c1, c2, c3, c4;
        double baseline, drop;
        if (!(is >> e.layer >> c1 >> e.head >> c2 >> e.acc >> c3 >> baseline >> c4 >> drop)) {
            throw IoError("AblationReport::read_csv: parse error at line " +
                          std::to_string(line_no));
        }
        rep.baseline_acc = baseline;
        rep.entries.push_back(e);
        rep.num_layers = std::max(rep.num_layers, e.layer + 1);
        rep.num_heads = std::max(rep.num_heads, e.head + 1);
    }
    return rep;
}

void AblationReport::write_violin_csv(const std::string& path) const {
    std::ofstream f(path);
    if (!f) throw IoError("AblationReport::write_violin_csv: cannot open " + path);
    f << "layer,min,q1,median,q3,max\n";
    f.precision(10);
    for (const LayerSummary& s : per_layer_summary()) {
        f << s.layer << "," << s.min << "," << s.q1 << "," << s.median << "," << s.q3 << ","
          << s.max << "\n";
    }
}

AblationReport head_sweep(const Model32& model, const Dataset& test_set,
                          std::size_t micro_batch) {
    const ModelConfig& cfg = model.config();
    AblationReport rep;
    rep.num_layers = cfg.num_layers;
    rep.num_heads = cfg.num_heads;
    rep.baseline_acc = evaluate(model, test_set, micro_batch);
    rep.entries.assign(cfg.num_layers * cfg.num_heads, AblationEntry{});

    const std::size_t total = cfg.num_layers * cfg.num_heads;
    const std::size_t workers = std::min(worker_pool_size(), total);
    std::atomic<std::size_t> next{0};
    auto work = [&]() {
        for (;;) {
            const std::size_t idx = next.fetch_add(1);
            if (idx >= total) return;
            const std::size_t layer = idx / cfg.num_heads;
            const std::size_t head = idx % cfg.num_heads;
            HeadMask mask;
            mask.zeroed = {{layer, head}};
            AblationEntry e;
            e.layer = layer;
            e.head = head;
            e.acc = evaluate(model, test_set, micro_batch, &mask);
            rep.entries[idx] = e;  // slot per index: no write contention
        }
    };
    if (workers <= 1) {
        work();
    } else {
        std::vector<std::thread> pool;
        pool.reserve(workers);
        for (std::size_t w = 0; w < workers; ++w) pool.emplace_back(work);
        for (auto& t : pool) t.join();
    }
    return rep;
}

DepositScore deposit_score(const AblationReport& report, double drop_threshold,
                           double second_threshold) {
    DepositScore out;
    for (std::size_t l = 0; l < report.num_layers; ++l) {
        std::vector<double> drops;
        drops.reserve(report.num_heads);
        std::size_t arg = 0;
        for (std::size_t h = 0; h < report.num_heads; ++h) {
            drops.push_back(report.drop_at(l, h));
            if (drops[h] > drops[arg]) arg = h;
        }
        std::vector<double> sorted = drops;
        std::sort(sorted.begin(), sorted.end());
        const double max_drop = sorted.back();
        const double second =
            sorted.size() > 1 ? sorted[sorted.size() - 2] : 0.0;
        const double median = quantile(sorted, 0.5);
        out.score.push_back(max_drop - median);
        out.flagged.push_back(max_drop >= drop_threshold && second <= second_threshold);
        out.argmax.push_back(arg);
    }
    return out;
}

bool DepositScore::any() const {
    for (bool f : flagged)
        if (f) return true;
    return false;
}

std::vector<PartialRopeResult> partial_rope_sweep(
    const std::vector<std::vector<std::size_t>>& configurations, const ModelConfig& base,
    const Dataset& train_set, const Dataset& test_set, const TrainConfig& train_cfg) {
    if (base.pe.kind != PeKind::PartialRope) {
        throw ConfigError("partial_rope_sweep: base config must use PartialRope");
    }
    std::vector<PartialRopeResult> out;
    for (const auto& heads : configurations) {
        ModelConfig cfg = base;
        cfg.pe.partial_rope_heads = heads;
        cfg.validate();
        Model32 model(cfg, train_cfg.seed);
        PartialRopeResult res;
        res.heads_per_layer = heads;
        res.report = train_model(model, train_set, test_set, train_cfg);
        res.final_test_acc = res.report.final_test_acc;
        res.sweep = head_sweep(model, test_set, train_cfg.micro_batch);
        out.push_back(std::move(res));
    }
    return out;
}

PiRemovalStudy pi_removal_study(const Model32& model, const Dataset& test_set,
                                const std::vector<std::size_t>& layers,
                                const std::vector<std::uint64_t>& seeds,
                                std::size_t micro_batch) {
    if (!model.config().pe.adds_sinusoidal()) {
        throw ContractError("pi_removal_study: model PE has no explicit position vectors");
    }
    if (test_set.empty()) throw ConfigError("pi_removal_study: empty test set");
    const std::size_t len = test_set.samples.front().tokens.size();
    PiRemovalStudy study;
    study.baseline_acc = evaluate(model, test_set, micro_batch);
    for (std::size_t layer : layers) {
        PiRemovalEntry entry;
        entry.layer = layer;
        {
            std::vector<Intervention<float>> iv{model.make_pi_intervention(layer, len)};
            entry.drop_pi =
                study.baseline_acc - evaluate(model, test_set, micro_batch, nullptr, &iv);
        }
        double sum = 0.0;
        for (std::uint64_t seed : seeds) {
            std::vector<Intervention<float>> iv{
                model.make_random_intervention(layer, len, seed)};
            const double drop =
                study.baseline_acc - evaluate(model, test_set, micro_batch, nullptr, &iv);
            entry.drop_random_seeds.push_back(drop);
            sum += drop;
        }
        entry.drop_random = seeds.empty() ? 0.0 : sum / static_cast<double>(seeds.size());
        study.layers.push_back(std::move(entry));
    }
    return study;
}

void PiRemovalStudy::write_csv(const std::string& path) const {
    std::ofstream f(path);
    if (!f) throw IoError("PiRemovalStudy::write_csv: cannot open " + path);
    f << "layer,baseline,drop_pi,drop_random_mean,num_seeds\n";
    f.precision(10);
    for (const PiRemovalEntry& e : layers) {
        f << e.layer << "," << baseline_acc << "," << e.drop_pi << "," << e.drop_random << ","
          << e.drop_random_seeds.size() << "\n";
    }
}

}  // namespace pelab
