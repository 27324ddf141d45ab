#pragma once

#include <ostream>
#include <string>
#include <vector>

#include "bimamba/data.hpp"
#include "bimamba/model.hpp"

namespace bimamba::train {

struct TrainConfig {
    double lr = 5e-6;
    double weight_decay = 1e-8;
    i64 batch_size = 24;
    i64 epochs = 30;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    u64 seed = 0;
    bool augment = true;
    i64 warmup_steps = 0;   // off unless requested
    double grad_clip = 0;   // 0 disables clipping
    // Batch members evaluated on this many threads, each against its own
    // parameter copy; gradients merged by one aggregator in worker order, so
    // results are reproducible for a fixed worker count.
    i64 workers = 2;

    void validate() const {
        if (lr <= 0) throw ContractError("train config: lr must be positive");
        if (batch_size < 1) throw ContractError("train config: batch_size must be >= 1");
        if (epochs < 1) throw ContractError("train config: epochs must be >= 1");
        if (workers < 1) throw ContractError("train config: workers must be >= 1");
    }
};

// Decoupled weight decay: the decay shrink and the adaptive update are two
// separate subtractions on the parameter.
class AdamW {
public:
    AdamW(std::vector<model::NamedParam> params, const TrainConfig& cfg);
    void step(double lr);
    void zero_grads();
    i64 steps_taken() const { return t_; }

private:
    std::vector<model::NamedParam> params_;
    std::vector<Tensor> m_, v_;
    TrainConfig cfg_;
    i64 t_ = 0;
};

// lr_init * 0.5 * (1 + cos(pi * step / total)); exactly 0 at the last step.
double cosine_lr(i64 step, i64 total_steps, double lr_init);

struct EpochRow {
    i64 epoch;
    double train_loss;
    double val_auroc;
    double lr;
};

struct TrainResult {
    std::vector<EpochRow> history;
    double best_val_auroc = -1.0;
    i64 best_epoch = -1;
};

// Seeded shuffle + augmentation per epoch, per-batch backward and update,
// validation AUROC per epoch, checkpoint kept at the best validation score.
TrainResult train_loop(model::ModelParams& params, const model::ModelConfig& cfg,
                       const data::Dataset& dataset, const TrainConfig& tc,
                       const std::string& checkpoint_path, std::ostream* log = nullptr);

double evaluate_auroc(const model::ModelParams& params, const model::ModelConfig& cfg,
                      const data::Dataset& dataset, const std::string& split);

void write_history_csv(const std::string& path, const std::vector<EpochRow>& history);

}  // namespace bimamba::train
