#include "mman/grad_check.hpp"

#include <cmath>

namespace mman {

GradCheckReport grad_check(const std::function<Tensor()>& loss_fn,
                           const std::vector<std::pair<std::string, Tensor>>& params,
                           double eps) {
    if (eps <= 0.0) throw ContractError("grad_check: eps must be positive");

    for (const auto& [path, t] : params) {
        (void)path;
        const_cast<Tensor&>(t).zero_grad();
    }

    std::vector<std::vector<double>> ad_grads;
    {
        Tape tape;
        TapeScope scope(tape);
        Tensor loss = loss_fn();
        if (!std::isfinite(loss.item())) {
            throw ContractError("grad_check: loss is not finite");
        }
        tape.backward(loss);
    }
    ad_grads.reserve(params.size());
    for (const auto& [path, t] : params) {
        (void)path;
        ad_grads.push_back(t.grad());
    }

    auto eval = [&loss_fn]() {
        const double v = loss_fn().item();
        if (!std::isfinite(v)) throw ContractError("grad_check: perturbed loss is not finite");
        return v;
    };

    GradCheckReport report;
    for (std::size_t p = 0; p < params.size(); ++p) {
        Tensor t = params[p].second;
        GradCheckEntry entry;
        entry.path = params[p].first;
        for (std::size_t i = 0; i < t.numel(); ++i) {
            const double saved = t.values()[i];
            t.values()[i] = saved + eps;
            const double fp = eval();
            t.values()[i] = saved - eps;
            const double fm = eval();
            t.values()[i] = saved;
            const double g_fd = (fp - fm) / (2.0 * eps);
            const double g_ad = ad_grads[p][i];
            const double denom = std::max({1.0, std::fabs(g_ad), std::fabs(g_fd)});
            const double rel = std::fabs(g_ad - g_fd) / denom;
            entry.max_rel_err = std::max(entry.max_rel_err, rel);
        }
        if (entry.max_rel_err >= report.max_rel_err) {
            // >= so the first param still claims worst_path when all are 0
            if (entry.max_rel_err > report.max_rel_err || report.worst_path.empty()) {
                report.worst_path = entry.path;
            }
            report.max_rel_err = std::max(report.max_rel_err, entry.max_rel_err);
        }
        report.per_param.push_back(std::move(entry));
    }
    return report;
}

} // namespace mman
