#include "mman/train.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <random>

namespace mman::train {

double linear_decay_lr(double lr0, std::size_t step_index, std::size_t total_steps) {
    if (step_index == 0 || total_steps == 0 || step_index > total_steps) {
        throw ContractError("linear_decay_lr: step " + std::to_string(step_index) +
                            " outside [1, " + std::to_string(total_steps) + "]");
    }
    const double lr = lr0 * (1.0 - static_cast<double>(step_index) /
                                       static_cast<double>(total_steps));
    if (lr < 0.0) throw ContractError("linear_decay_lr: negative learning rate");
    return lr;
}

AdamState::AdamState(const model::ModelParams& params) {
    for (const auto& e : params.entries()) {
        m_.emplace_back(e.tensor.numel(), 0.0);
        v_.emplace_back(e.tensor.numel(), 0.0);
    }
}

void AdamState::step(model::ModelParams& params, double lr, const TrainConfig& config) {
    if (m_.size() != params.entries().size()) {
        throw ContractError("AdamState: parameter layout mismatch");
    }
    ++t_;
    const double bc1 = 1.0 - std::pow(config.beta1, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(config.beta2, static_cast<double>(t_));
    for (std::size_t p = 0; p < m_.size(); ++p) {
        model::ParamEntry& entry = params.mutable_entries()[p];
        auto& w = entry.tensor.values();
        const auto& g = entry.tensor.grad();
        auto& m = m_[p];
        auto& v = v_[p];
        const bool decay = entry.decay && config.weight_decay > 0.0;
        for (std::size_t i = 0; i < w.size(); ++i) {
            const double gi = g[i];
            if (!std::isfinite(gi)) {
                throw NumericError("non-finite gradient in parameter '" + entry.path +
                                   "' at coordinate " + std::to_string(i));
            }
            if (decay) w[i] -= lr * config.weight_decay * w[i];
            m[i] = config.beta1 * m[i] + (1.0 - config.beta1) * gi;
            v[i] = config.beta2 * v[i] + (1.0 - config.beta2) * gi * gi;
            const double m_hat = m[i] / bc1;
            const double v_hat = v[i] / bc2;
            w[i] -= lr * m_hat / (std::sqrt(v_hat) + config.adam_eps);
        }
    }
}

double mcc_from_confusion(std::uint64_t tp, std::uint64_t fp, std::uint64_t tn,
                          std::uint64_t fn) {
    const double a = static_cast<double>(tp + fp);
    const double b = static_cast<double>(tp + fn);
    const double c = static_cast<double>(tn + fp);
    const double d = static_cast<double>(tn + fn);
    if (a == 0.0 || b == 0.0 || c == 0.0 || d == 0.0) return 0.0;
    const double num = static_cast<double>(tp) * static_cast<double>(tn) -
                       static_cast<double>(fp) * static_cast<double>(fn);
    return num / std::sqrt(a * b * c * d);
}

int predict_label(const model::Capsules& capsules) {
    return capsules.norms.values()[1] > capsules.norms.values()[0] ? 1 : 0;
}

EvalReport evaluate(const model::Model& model, const model::ModelParams& params,
                    const std::vector<data::Sample>& samples) {
    EvalReport report;
    double loss_sum = 0.0;
    for (const data::Sample& s : samples) {
        const model::ModelInput input = model::tensorize(s, model.config());
        const model::ForwardResult fwd = model.forward(input, params, false, nullptr);
        loss_sum += model.total_loss(fwd, s.label, params).item();
        const int pred = predict_label(fwd.capsules);
        if (s.label == 1) {
            (pred == 1 ? report.tp : report.fn) += 1;
        } else {
            (pred == 1 ? report.fp : report.tn) += 1;
        }
    }
    const std::uint64_t total = report.total();
    report.accuracy = total ? static_cast<double>(report.tp + report.tn) /
                                  static_cast<double>(total)
                            : 0.0;
    report.mcc = mcc_from_confusion(report.tp, report.fp, report.tn, report.fn);
    report.mean_loss = total ? loss_sum / static_cast<double>(total) : 0.0;
    return report;
}

TrainResult train_model(const model::Model& model, model::ModelParams& params,
                        const std::vector<data::Sample>& train_set, const TrainConfig& config) {
    if (train_set.empty()) throw ContractError("train_model: empty training set");
    if (config.batch_size == 0) throw ContractError("train_model: batch_size must be >= 1");

    const std::size_t n = train_set.size();
    std::vector<model::ModelInput> inputs;
    inputs.reserve(n);
    for (const data::Sample& s : train_set) inputs.push_back(model::tensorize(s, model.config()));

    const std::size_t steps_per_epoch = (n + config.batch_size - 1) / config.batch_size;
    const std::size_t total_steps = steps_per_epoch * config.epochs;

    std::mt19937_64 rng(config.seed);
    AdamState adam(params);
    model::ModelParams last_good = params.clone();

    TrainResult result;
    std::vector<std::size_t> order(n);
    for (std::size_t i = 0; i < n; ++i) order[i] = i;

    for (std::size_t epoch = 1; epoch <= config.epochs; ++epoch) {
        std::shuffle(order.begin(), order.end(), rng);
        double epoch_loss = 0.0;
        for (std::size_t start = 0; start < n; start += config.batch_size) {
            const std::size_t count = std::min(config.batch_size, n - start);
            params.zero_grads();
            double batch_loss = 0.0;
            for (std::size_t k = 0; k < count; ++k) {
                const std::size_t idx = order[start + k];
                Tape tape;
                TapeScope scope(tape);
                const model::ForwardResult fwd =
                    model.forward(inputs[idx], params, true, &rng);
                Tensor loss = model.total_loss(fwd, train_set[idx].label, params);
                batch_loss += loss.item();
                tape.backward(scalar_mul(loss, 1.0 / static_cast<double>(count)));
            }
            const double mean_batch = batch_loss / static_cast<double>(count);
            if (!std::isfinite(mean_batch)) {
                params.restore(last_good);
                result.diverged = true;
                return result;
            }
            epoch_loss += batch_loss;
            const double lr = linear_decay_lr(config.lr0, adam.step_index() + 1, total_steps);
            adam.step(params, lr, config);
            ++result.steps_taken;
        }
        EpochStats stats;
        stats.epoch = epoch;
        stats.mean_loss = epoch_loss / static_cast<double>(n);
        if (config.track_train_accuracy) {
            stats.train_accuracy = evaluate(model, params, train_set).accuracy;
        }
        result.curve.push_back(stats);
        last_good = params.clone();
    }
    return result;
}

SplitIndices chronological_split(const std::vector<data::Sample>& samples, double train_frac,
                                 double val_frac) {
    std::map<std::string, std::vector<std::size_t>> by_stock;
    for (std::size_t i = 0; i < samples.size(); ++i) {
        by_stock[samples[i].stock_id].push_back(i);
    }
    SplitIndices split;
    for (auto& [stock, idx] : by_stock) {
        (void)stock;
        std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) {
            return samples[a].reference_time < samples[b].reference_time;
        });
        const std::size_t n = idx.size();
        const std::size_t n_train = static_cast<std::size_t>(std::floor(train_frac * n));
        const std::size_t n_val = static_cast<std::size_t>(std::floor(val_frac * n));
        for (std::size_t k = 0; k < n; ++k) {
            if (k < n_train) {
                split.train.push_back(idx[k]);
            } else if (k < n_train + n_val) {
                split.val.push_back(idx[k]);
            } else {
                split.test.push_back(idx[k]);
            }
        }
    }
    return split;
}

std::vector<data::Sample> take(const std::vector<data::Sample>& samples,
                               const std::vector<std::size_t>& indices) {
    std::vector<data::Sample> out;
    out.reserve(indices.size());
    for (std::size_t i : indices) out.push_back(samples[i]);
    return out;
}

AblationResult run_ablation_suite(const std::vector<data::Sample>& samples,
                                  model::ModelConfig base_config, const TrainConfig& tconfig) {
    const SplitIndices split = chronological_split(samples);
    const std::vector<data::Sample> train_set = take(samples, split.train);
    const std::vector<data::Sample> test_set = take(samples, split.test);

    AblationResult result;
    for (model::Ablation ab : model::all_ablations()) {
        model::ModelConfig cfg = base_config;
        cfg.ablation = ab;
        model::Model m(cfg);
        model::ModelParams params = model::ModelParams::init(cfg, tconfig.seed);
        const TrainResult tr = train_model(m, params, train_set, tconfig);

        AblationRow row;
        row.variant = model::ablation_name(ab);
        row.test = evaluate(m, params, test_set);
        if (!tr.curve.empty()) {
            row.final_train_loss = tr.curve.back().mean_loss;
            row.final_train_accuracy = tr.curve.back().train_accuracy;
        }
        result.rows.push_back(std::move(row));
    }
    return result;
}

} // namespace mman::train
