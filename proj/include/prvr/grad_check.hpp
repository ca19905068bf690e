#pragma once

/**
 * @file grad_check.hpp
 * @brief Central finite-difference validation of reverse-mode gradients.
 */

#include <functional>
#include <string>
#include <vector>

#include "prvr/tensor.hpp"

namespace prvr {

/// Builds a scalar loss from a flat parameter vector. When `g` is non-null
/// the parameters must enter the computation through `flat_params` (a leaf of
/// `g`); when null the evaluation is plain arithmetic.
using LossFn = std::function<Tensor(Graph* g, const Tensor& flat_params)>;

struct GradCheckReport {
    double max_rel_err = 0.0;
    size_t worst_coord = 0;
    bool pass = false;

    std::string summary() const;
};

/// Compares `analytic` against the central difference of `f` at `params`.
/// rel err = |g_ad - g_fd| / max(1, |g_ad|, |g_fd|) per coordinate.
GradCheckReport fd_compare(const LossFn& f, const std::vector<double>& params,
                           const std::vector<double>& analytic, double h, double tol);

/// Runs backward() on f's graph-attached evaluation, then fd_compare.
GradCheckReport grad_check(const LossFn& f, const std::vector<double>& params, double h,
                           double tol);

}  // namespace prvr
