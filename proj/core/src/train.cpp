#include "pelab/train.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <fstream>
#include <numbers>

namespace pelab {

// ---- AdamW ---------------------------------------------------------------------

template <typename S>
AdamW<S>::AdamW(std::vector<Tensor<S>*> params, AdamWConfig cfg)
    : params_(std::move(params)), cfg_(cfg) {
    m_.reserve(params_.size());
    v_.reserve(params_.size());
    for (Tensor<S>* p : params_) {
        m_.emplace_back(p->size(), S(0));
        v_.emplace_back(p->size(), S(0));
    }
}

template <typename S>
void AdamW<S>::step(double lr_now, double grad_scale) {
    ++step_;
    const double b1 = cfg_.beta1, b2 = cfg_.beta2;
    const double bc1 = 1.0 - std::pow(b1, static_cast<double>(step_));
    const double bc2 = 1.0 - std::pow(b2, static_cast<double>(step_));
    for (std::size_t i = 0; i < params_.size(); ++i) {
        Tensor<S>& p = *params_[i];
        if (!p.has_grad()) continue;
        const std::vector<S>& g = p.impl()->grad;
        std::vector<S>& val = p.mutable_value();
        std::vector<S>& m = m_[i];
        std::vector<S>& v = v_[i];
        for (std::size_t t = 0; t < val.size(); ++t) {
            const double gt = static_cast<double>(g[t]) * grad_scale;
            if (!std::isfinite(gt)) {
                throw NumericError("AdamW: non-finite gradient at step " +
                                   std::to_string(step_));
            }
            const double mt = b1 * static_cast<double>(m[t]) + (1.0 - b1) * gt;
            const double vt = b2 * static_cast<double>(v[t]) + (1.0 - b2) * gt * gt;
            m[t] = static_cast<S>(mt);
            v[t] = static_cast<S>(vt);
            double theta = static_cast<double>(val[t]);
            theta -= lr_now * cfg_.weight_decay * theta;  // decoupled decay
            theta -= lr_now * (mt / bc1) / (std::sqrt(vt / bc2) + cfg_.eps);
            val[t] = static_cast<S>(theta);
        }
    }
}

template <typename S>
void AdamW<S>::zero_grads() {
    for (Tensor<S>* p : params_) p->zero_grad();
}

template class AdamW<float>;
template class AdamW<double>;

// ---- schedule -------------------------------------------------------------------

double cosine_warmup_lr(std::size_t step, std::size_t total_steps, double peak_lr,
                        double warmup_frac) {
    if (total_steps == 0) throw ConfigError("cosine_warmup_lr: total_steps is zero");
    if (step > total_steps) throw ConfigError("cosine_warmup_lr: step exceeds total_steps");
    const std::size_t warmup = static_cast<std::size_t>(
        std::ceil(warmup_frac * static_cast<double>(total_steps)));
    if (warmup > 0 && step <= warmup) {
        return peak_lr * static_cast<double>(step) / static_cast<double>(warmup);
    }
    const double progress = static_cast<double>(step - warmup) /
                            static_cast<double>(total_steps - warmup);
    return peak_lr * 0.5 * (1.0 + std::cos(std::numbers::pi * progress));
}

// ---- train / evaluate --------------------------------------------------------------

namespace {

template <typename S>
void fill_batch(const Dataset& ds, const std::vector<std::uint32_t>& order, std::size_t lo,
                std::size_t hi, std::vector<int>& tokens, std::vector<int>& labels) {
    const std::size_t len = ds.samples.front().tokens.size();
    tokens.resize((hi - lo) * len);
    labels.resize(hi - lo);
    for (std::size_t i = lo; i < hi; ++i) {
        const SampleRecord& rec = ds.samples[order[i]];
        std::copy(rec.tokens.begin(), rec.tokens.end(), tokens.begin() + (i - lo) * len);
        labels[i - lo] = rec.label;
    }
}

template <typename S>
std::size_t count_argmax_correct(const Tensor<S>& logits, const std::vector<int>& labels) {
    const std::size_t b = logits.dim(0), c = logits.dim(1);
    std::size_t correct = 0;
    for (std::size_t i = 0; i < b; ++i) {
        const S* row = logits.value().data() + i * c;
        std::size_t best = 0;
        for (std::size_t j = 1; j < c; ++j)
            if (row[j] > row[best]) best = j;
        if (static_cast<int>(best) == labels[i]) ++correct;
    }
    return correct;
}

}  // namespace

template <typename S>
TrainReport train_model(TransformerModel<S>& model, const Dataset& train_set,
                        const Dataset& test_set, const TrainConfig& cfg,
                        const std::string& metrics_csv, const std::string& checkpoint_prefix) {
    if (train_set.empty()) throw ConfigError("train_model: empty training set");
    if (cfg.batch_size == 0 || cfg.batch_size > train_set.size()) {
        throw ConfigError("train_model: batch_size must be in [1, train size]");
    }
    const auto t_start = std::chrono::steady_clock::now();
    const std::size_t n = train_set.size();
    const std::size_t len = train_set.samples.front().tokens.size();
    const std::size_t steps_per_epoch = (n + cfg.batch_size - 1) / cfg.batch_size;
    const std::size_t total_steps = steps_per_epoch * cfg.epochs;
    const std::size_t micro = std::max<std::size_t>(1, cfg.micro_batch);

    auto named = model.named_params();
    std::vector<Tensor<S>*> params;
    params.reserve(named.size());
    for (auto& [name, t] : named) params.push_back(t);
    AdamW<S> opt(params, cfg.opt);

    std::ofstream csv;
    if (!metrics_csv.empty()) {
        csv.open(metrics_csv);
        if (!csv) throw IoError("train_model: cannot open " + metrics_csv);
        csv << "epoch,split,loss,accuracy,lr,seed,pe_kind\n";
    }

    TrainReport report;
    report.seed = cfg.seed;
    const std::uint64_t shuffle_master = mix_seed(cfg.seed, 1);
    const std::uint64_t dropout_master = mix_seed(cfg.seed, 2);

    std::vector<int> tokens, labels;
    std::size_t global_step = 0;
    double last_lr = 0.0;
    for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
        Rng shuffle_rng(mix_seed(shuffle_master, epoch));
        std::vector<std::uint32_t> order = shuffle_rng.permutation(n);
        double loss_sum = 0.0;
        std::size_t correct = 0;
        for (std::size_t step = 0; step < steps_per_epoch; ++step) {
            const std::size_t lo = step * cfg.batch_size;
            const std::size_t hi = std::min(n, lo + cfg.batch_size);
            const std::size_t bsz = hi - lo;
            opt.zero_grads();
            std::size_t micro_idx = 0;
            for (std::size_t mlo = lo; mlo < hi; mlo += micro, ++micro_idx) {
                const std::size_t mhi = std::min(hi, mlo + micro);
                fill_batch<S>(train_set, order, mlo, mhi, tokens, labels);
                Rng drop_rng(mix_seed(dropout_master,
                                      (epoch * steps_per_epoch + step) * 4096 + micro_idx));
                Tape<S> tape;
                ForwardOptions<S> fwd;
                fwd.training = true;
                fwd.dropout_rng = &drop_rng;
                Tensor<S> logits = model.forward(&tape, tokens, mhi - mlo, len, fwd);
                Tensor<S> loss =
                    cross_entropy_loss(&tape, logits, labels, Reduction::Sum);
                const double lval = static_cast<double>(loss.item());
                if (!std::isfinite(lval)) {
                    throw NumericError("train_model: diverged (non-finite loss) at step " +
                                       std::to_string(global_step));
                }
                loss_sum += lval;
                correct += count_argmax_correct(logits, labels);
                tape.backward(loss);
            }
            ++global_step;
            last_lr = cosine_warmup_lr(global_step, total_steps, cfg.opt.lr, cfg.warmup_frac);
            opt.step(last_lr, 1.0 / static_cast<double>(bsz));
        }
        const double train_loss = loss_sum / static_cast<double>(n);
        const double train_acc = static_cast<double>(correct) / static_cast<double>(n);
        const double test_acc =
            test_set.empty() ? 0.0 : evaluate(model, test_set, micro);
        report.train_loss.push_back(train_loss);
        report.train_acc.push_back(train_acc);
        report.test_acc.push_back(test_acc);
        if (csv.is_open()) {
            csv << epoch << ",train," << train_loss << "," << train_acc << "," << last_lr << ","
                << cfg.seed << "," << cfg.pe_label << "\n";
            csv << epoch << ",test,," << test_acc << "," << last_lr << "," << cfg.seed << ","
                << cfg.pe_label << "\n";
            csv.flush();
        }
    }
    report.final_train_acc = evaluate(model, train_set, micro);
    report.final_test_acc = test_set.empty() ? 0.0 : evaluate(model, test_set, micro);
    if (!checkpoint_prefix.empty()) {
        model.save_checkpoint(checkpoint_prefix);
        report.checkpoint_path = checkpoint_prefix;
    }
    report.wall_time_sec =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t_start).count();
    return report;
}

template <typename S>
double evaluate(const TransformerModel<S>& model, const Dataset& dataset, std::size_t micro_batch,
                const HeadMask* mask, const std::vector<Intervention<S>>* interventions) {
    if (dataset.empty()) throw ConfigError("evaluate: empty dataset");
    const std::size_t n = dataset.size();
    const std::size_t len = dataset.samples.front().tokens.size();
    const std::size_t micro = std::max<std::size_t>(1, micro_batch);
    std::vector<std::uint32_t> order(n);
    for (std::size_t i = 0; i < n; ++i) order[i] = static_cast<std::uint32_t>(i);
    std::vector<int> tokens, labels;
    std::size_t correct = 0;
    for (std::size_t lo = 0; lo < n; lo += micro) {
        const std::size_t hi = std::min(n, lo + micro);
        fill_batch<S>(dataset, order, lo, hi, tokens, labels);
        ForwardOptions<S> fwd;
        fwd.head_mask = mask;
        fwd.interventions = interventions;
        Tensor<S> logits = model.forward(nullptr, tokens, hi - lo, len, fwd);
        correct += count_argmax_correct(logits, labels);
    }
    return static_cast<double>(correct) / static_cast<double>(n);
}

template <typename S>
std::vector<int> predict(const TransformerModel<S>& model, const Dataset& dataset,
                         std::size_t micro_batch) {
    if (dataset.empty()) throw ConfigError("predict: empty dataset");
    const std::size_t n = dataset.size();
    const std::size_t len = dataset.samples.front().tokens.size();
    const std::size_t micro = std::max<std::size_t>(1, micro_batch);
    std::vector<std::uint32_t> order(n);
    for (std::size_t i = 0; i < n; ++i) order[i] = static_cast<std::uint32_t>(i);
    std::vector<int> tokens, labels, preds;
    preds.reserve(n);
    for (std::size_t lo = 0; lo < n; lo += micro) {
        const std::size_t hi = std::min(n, lo + micro);
        fill_batch<S>(dataset, order, lo, hi, tokens, labels);
        Tensor<S> logits = model.forward(nullptr, tokens, hi - lo, len, {});
        const std::size_t c = logits.dim(1);
        for (std::size_t i = 0; i < hi - lo; ++i) {
            const S* row = logits.value().data() + i * c;
            std::size_t best = 0;
            for (std::size_t j = 1; j < c; ++j)
                if (row[j] > row[best]) best = j;
            preds.push_back(static_cast<int>(best));
        }
    }
    return preds;
}

#define PELAB_INSTANTIATE_TRAIN(S)                                                          \
    template TrainReport train_model<S>(TransformerModel<S>&, const Dataset&, const Dataset&, \
                                        const TrainConfig&, const std::string&,             \
                                        const std::string&);                                \
    template double evaluate<S>(const TransformerModel<S>&, const Dataset&, std::size_t,    \
                                const HeadMask*, const std::vector<Intervention<S>>*);      \
    template std::vector<int> predict<S>(const TransformerModel<S>&, const Dataset&,        \
                                         std::size_t);

PELAB_INSTANTIATE_TRAIN(float)
PELAB_INSTANTIATE_TRAIN(double)

#undef PELAB_INSTANTIATE_TRAIN

}  // namespace pelab
