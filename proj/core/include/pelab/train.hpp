#pragma once

#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

#include "pelab/model.hpp"
#include "pelab/tasks.hpp"

namespace pelab {

struct AdamWConfig {
    double lr = 1e-4;
    // Printed protocol order; override to (0.9, 0.98) for the conventional pairing.
    double beta1 = 0.98;
    double beta2 = 0.9;
    double eps = 1e-8;
    double weight_decay = 1e-5;
};

// Decoupled weight decay: the shrink is applied separately from the
// bias-corrected adaptive update.
template <typename S>
class AdamW {
public:
    AdamW(std::vector<Tensor<S>*> params, AdamWConfig cfg);

    // Applies one update using each parameter's accumulated grad. `lr_now`
    // overrides cfg.lr (schedule); grads may be pre-scaled via grad_scale.
    void step(double lr_now, double grad_scale = 1.0);
    void zero_grads();
    std::size_t step_count() const { return step_; }

    const std::vector<S>& first_moment(std::size_t i) const { return m_.at(i); }
    const std::vector<S>& second_moment(std::size_t i) const { return v_.at(i); }

private:
    std::vector<Tensor<S>*> params_;
    AdamWConfig cfg_;
    std::vector<std::vector<S>> m_, v_;
    std::size_t step_ = 0;
};

// Linear 0 -> peak over the warmup range, then cosine decay peak -> 0.
double cosine_warmup_lr(std::size_t step, std::size_t total_steps, double peak_lr,
                        double warmup_frac = 0.06);

struct TrainConfig {
    std::size_t epochs = 30;
    std::size_t batch_size = 512;
    std::size_t micro_batch = 64;
    AdamWConfig opt;
    double warmup_frac = 0.06;
    std::uint64_t seed = 0;
    std::string pe_label;  // written into the metrics CSV
};

struct TrainReport {
    std::vector<double> train_loss;  // per epoch
    std::vector<double> train_acc;   // per epoch, measured on-the-fly under dropout
    std::vector<double> test_acc;    // per epoch, eval mode
    double final_train_acc = 0.0;    // eval-mode pass over the train set
    double final_test_acc = 0.0;
    double wall_time_sec = 0.0;
    std::uint64_t seed = 0;
    std::string checkpoint_path;
};

// Seeded shuffling per epoch; dropout active only here; metrics CSV and
// checkpoint emitted when paths are given. Throws NumericError on divergence.
template <typename S>
TrainReport train_model(TransformerModel<S>& model, const Dataset& train_set,
                        const Dataset& test_set, const TrainConfig& cfg,
                        const std::string& metrics_csv = "",
                        const std::string& checkpoint_prefix = "");

template <typename S>
double evaluate(const TransformerModel<S>& model, const Dataset& dataset,
                std::size_t micro_batch = 64, const HeadMask* mask = nullptr,
                const std::vector<Intervention<S>>* interventions = nullptr);

template <typename S>
std::vector<int> predict(const TransformerModel<S>& model, const Dataset& dataset,
                         std::size_t micro_batch = 64);

extern template class AdamW<float>;
extern template class AdamW<double>;

}  // namespace pelab
