#pragma once

#include <functional>
#include <string>
#include <utility>
#include <vector>

#include "mman/tensor.hpp"

namespace mman {

struct GradCheckEntry {
    std::string path;
    double max_rel_err = 0.0;
};

struct GradCheckReport {
    double max_rel_err = 0.0;
    std::string worst_path;
    std::vector<GradCheckEntry> per_param;
};

// Central-difference oracle for the reverse-mode tape. `loss_fn` must be a
// deterministic scalar function of the listed parameter values; it is
// evaluated once under a recording tape and then twice per coordinate with
// the coordinate nudged by +/-eps. The error per coordinate is
// |g_ad - g_fd| / max(1, |g_ad|, |g_fd|).
GradCheckReport grad_check(const std::function<Tensor()>& loss_fn,
                           const std::vector<std::pair<std::string, Tensor>>& params,
                           double eps = 1e-5);

} // namespace mman
