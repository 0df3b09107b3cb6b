#pragma once

#include <functional>
#include <stdexcept>
#include <vector>

#include "foodcl/matrix.hpp"

namespace foodcl {

// Central-difference gradient estimate, (f(p+eps) - f(p-eps)) / (2 eps) per
// coordinate. f must be deterministic. Independent of the tape by
// construction; the gradient-check suites compare tape output against this.
inline std::vector<double> numerical_gradient(const std::function<double(const std::vector<double>&)>& f,
                                              std::vector<double> params, double eps) {
    if (!(eps > 0.0)) throw std::invalid_argument("numerical_gradient: eps must be > 0");
    std::vector<double> grad(params.size(), 0.0);
    for (size_t i = 0; i < params.size(); ++i) {
        const double orig = params[i];
        params[i] = orig + eps;
        const double fp = f(params);
        params[i] = orig - eps;
        const double fm = f(params);
        params[i] = orig;
        grad[i] = (fp - fm) / (2.0 * eps);
    }
    return grad;
}

// Same estimate for an objective over a set of in-place matrices. Each
// coordinate of each matrix is perturbed and restored; the returned
// gradients mirror the input shapes.
inline std::vector<Matrix> numerical_gradient(const std::function<double()>& f, const std::vector<Matrix*>& params,
                                              double eps) {
    if (!(eps > 0.0)) throw std::invalid_argument("numerical_gradient: eps must be > 0");
    std::vector<Matrix> grads;
    grads.reserve(params.size());
    for (Matrix* p : params) {
        if (!p) throw std::invalid_argument("numerical_gradient: null parameter");
        Matrix g(p->rows, p->cols);
        for (size_t i = 0; i < p->data.size(); ++i) {
            const double orig = p->data[i];
            p->data[i] = orig + eps;
            const double fp = f();
            p->data[i] = orig - eps;
            const double fm = f();
            p->data[i] = orig;
            g.data[i] = (fp - fm) / (2.0 * eps);
        }
        grads.push_back(std::move(g));
    }
    return grads;
}

// Largest relative error between an analytic gradient and its estimate,
// with an absolute floor so near-zero entries do not blow up the ratio.
inline double max_relative_error(const std::vector<Matrix>& analytic, const std::vector<Matrix>& estimate,
                                 double floor = 1e-8) {
    if (analytic.size() != estimate.size()) throw std::invalid_argument("max_relative_error: size mismatch");
    double worst = 0.0;
    for (size_t k = 0; k < analytic.size(); ++k) {
        const Matrix& a = analytic[k];
        const Matrix& e = estimate[k];
        if (!a.same_shape(e)) throw std::invalid_argument("max_relative_error: shape mismatch");
        for (size_t i = 0; i < a.data.size(); ++i) {
            const double denom = std::max({std::abs(a.data[i]), std::abs(e.data[i]), floor});
            worst = std::max(worst, std::abs(a.data[i] - e.data[i]) / denom);
        }
    }
    return worst;
}

}  // namespace foodcl
