#include "prvr/grad_check.hpp"

#include <cmath>
#include <sstream>

namespace prvr {

std::string GradCheckReport::summary() const {
    std::ostringstream os;
    os << (pass ? "pass" : "FAIL") << " max_rel_err=" << max_rel_err << " at coord "
       << worst_coord;
    return os.str();
}

GradCheckReport fd_compare(const LossFn& f, const std::vector<double>& params,
                           const std::vector<double>& analytic, double h, double tol) {
    if (analytic.size() != params.size()) {
        throw std::invalid_argument("fd_compare: gradient size " +
                                    std::to_string(analytic.size()) + " != parameter size " +
                                    std::to_string(params.size()));
    }
    auto eval = [&](const std::vector<double>& p) {
        double v = f(nullptr, Tensor::vec(p)).item();
        if (!std::isfinite(v)) throw NumericError("fd_compare: non-finite objective value");
        return v;
    };
    GradCheckReport rep;
    std::vector<double> p = params;
    for (size_t i = 0; i < p.size(); ++i) {
        double keep = p[i];
        p[i] = keep + h;
        double fp = eval(p);
        p[i] = keep - h;
        double fm = eval(p);
        p[i] = keep;
        double fd = (fp - fm) / (2.0 * h);
        double denom = std::max({1.0, std::abs(fd), std::abs(analytic[i])});
        double rel = std::abs(analytic[i] - fd) / denom;
        if (rel > rep.max_rel_err) {
            rep.max_rel_err = rel;
            rep.worst_coord = i;
        }
    }
    rep.pass = rep.max_rel_err < tol;
    return rep;
}

GradCheckReport grad_check(const LossFn& f, const std::vector<double>& params, double h,
                           double tol) {
    Graph g;
    Tensor flat = g.leaf(Tensor::vec(params));
    Tensor loss = f(&g, flat);
    if (loss.numel() != 1) {
        throw std::invalid_argument("grad_check: objective must be scalar, got shape " +
                                    shape_str(loss.shape()));
    }
    auto grads = g.backward(loss);
    return fd_compare(f, params, grads.wrt(flat), h, tol);
}

}  // namespace prvr
