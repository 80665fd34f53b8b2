#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "mman/data.hpp"
#include "mman/model.hpp"

namespace mman::train {

struct TrainConfig {
    double lr0 = 0.001;
    double weight_decay = 0.001; // decoupled, weights only
    double beta1 = 0.9;
    double beta2 = 0.999;
    double adam_eps = 1e-8;
    std::size_t batch_size = 64;
    std::size_t epochs = 10;
    std::uint64_t seed = 1;
    bool track_train_accuracy = true;
};

// lr0 * (1 - t/T) for 1-based step t of T; exactly 0 at the final step.
double linear_decay_lr(double lr0, std::size_t step_index, std::size_t total_steps);

class AdamState {
public:
    explicit AdamState(const model::ModelParams& params);
    // Applies decoupled weight decay then the bias-corrected Adam update,
    // reading gradients straight from the parameter tensors. Throws
    // NumericError naming the parameter on a non-finite gradient.
    void step(model::ModelParams& params, double lr, const TrainConfig& config);
    std::size_t step_index() const { return t_; }

private:
    std::vector<std::vector<double>> m_;
    std::vector<std::vector<double>> v_;
    std::size_t t_ = 0;
};

struct EpochStats {
    std::size_t epoch = 0;
    double mean_loss = 0.0;
    double train_accuracy = 0.0;
};

struct TrainResult {
    std::vector<EpochStats> curve;
    bool diverged = false;
    std::size_t steps_taken = 0;
};

struct EvalReport {
    std::uint64_t tp = 0, fp = 0, tn = 0, fn = 0;
    double accuracy = 0.0;
    double mcc = 0.0;
    double mean_loss = 0.0;
    std::uint64_t total() const { return tp + fp + tn + fn; }
};

// Zero whenever a denominator factor vanishes.
double mcc_from_confusion(std::uint64_t tp, std::uint64_t fp, std::uint64_t tn,
                          std::uint64_t fn);

// argmax capsule norm; the Fall capsule wins exact ties
int predict_label(const model::Capsules& capsules);

EvalReport evaluate(const model::Model& model, const model::ModelParams& params,
                    const std::vector<data::Sample>& samples);

// Seeded-shuffle epoch loop with per-batch mean loss; deterministic for a
// fixed seed. On a NaN batch loss the last epoch-end snapshot is restored
// and the run stops with diverged=true.
TrainResult train_model(const model::Model& model, model::ModelParams& params,
                        const std::vector<data::Sample>& train_set, const TrainConfig& config);

struct SplitIndices {
    std::vector<std::size_t> train, val, test;
};

// 70/10/20 by reference time within each stock.
SplitIndices chronological_split(const std::vector<data::Sample>& samples,
                                 double train_frac = 0.7, double val_frac = 0.1);

std::vector<data::Sample> take(const std::vector<data::Sample>& samples,
                               const std::vector<std::size_t>& indices);

struct AblationRow {
    std::string variant;
    EvalReport test;
    double final_train_loss = 0.0;
    double final_train_accuracy = 0.0;
};

struct AblationResult {
    std::vector<AblationRow> rows; // full, nA, nH, oC, oH
};

// Trains and evaluates all five variants on one shared split and seed.
AblationResult run_ablation_suite(const std::vector<data::Sample>& samples,
                                  model::ModelConfig base_config, const TrainConfig& tconfig);

} // namespace mman::train
