#pragma once

#include <cmath>
#include <cstddef>
#include <functional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "mbn/tensor.hpp"

namespace mbn::oracle {

// Richardson-extrapolated central finite differences, the project's ground
// truth for every analytic backward pass. The step is scaled per coordinate
// so large activations do not starve the difference of significant bits, and
// combining the full- and half-step central differences cancels the O(h^2)
// truncation term — normalization denominators near sqrt(eps) are curved
// enough that plain central differences lose several digits there.
inline Tensor fd_gradient(const std::function<double(const Tensor&)>& f, const Tensor& x,
                          double h = 1e-4) {
    if (h <= 0.0) throw std::invalid_argument("fd_gradient: step must be positive");
    Tensor grad(x.shape());
    Tensor probe = x;
    for (std::size_t i = 0; i < x.size(); ++i) {
        const double step = h * std::max(1.0, std::abs(x[i]));
        auto central = [&](double s) {
            probe[i] = x[i] + s;
            const double fp = f(probe);
            probe[i] = x[i] - s;
            const double fm = f(probe);
            probe[i] = x[i];
            if (!std::isfinite(fp) || !std::isfinite(fm))
                throw std::runtime_error("fd_gradient: non-finite objective at coordinate " +
                                         std::to_string(i));
            return (fp - fm) / (2.0 * s);
        };
        const double full = central(step);
        const double half = central(0.5 * step);
        grad[i] = (4.0 * half - full) / 3.0;
    }
    return grad;
}

// Weighted pooled mean/variance computed directly over raw samples, one
// weight per batch applied to each of its samples. This is the definitional
// sample-level form that the moment-level estimator must reproduce.
// Batches are rank-2 (samples x features).
inline std::pair<Tensor, Tensor> pooled_stats(const std::vector<Tensor>& batches,
                                              const std::vector<double>& weights) {
    if (batches.empty()) throw std::invalid_argument("pooled_stats: no batches");
    if (batches.size() != weights.size())
        throw std::invalid_argument("pooled_stats: weights/batches length mismatch");
    const Shape feat_shape{batches.front().shape().at(1)};
    const std::size_t dim = feat_shape[0];
    double total = 0.0;
    for (std::size_t b = 0; b < batches.size(); ++b) {
        if (batches[b].rank() != 2 || batches[b].shape()[1] != dim)
            throw std::invalid_argument("pooled_stats: batch " + std::to_string(b) +
                                        " has inconsistent feature shape");
        if (weights[b] < 0.0)
            throw std::invalid_argument("pooled_stats: negative weight at batch " +
                                        std::to_string(b));
        total += weights[b] * static_cast<double>(batches[b].shape()[0]);
    }
    if (total <= 0.0) throw std::invalid_argument("pooled_stats: degenerate weights");

    Tensor mean(feat_shape);
    for (std::size_t b = 0; b < batches.size(); ++b) {
        const Tensor& x = batches[b];
        for (std::size_t j = 0; j < x.shape()[0]; ++j)
            for (std::size_t f = 0; f < dim; ++f) mean[f] += weights[b] * x[j * dim + f];
    }
    for (std::size_t f = 0; f < dim; ++f) mean[f] /= total;

    Tensor var(feat_shape);
    for (std::size_t b = 0; b < batches.size(); ++b) {
        const Tensor& x = batches[b];
        for (std::size_t j = 0; j < x.shape()[0]; ++j)
            for (std::size_t f = 0; f < dim; ++f) {
                const double d = x[j * dim + f] - mean[f];
                var[f] += weights[b] * d * d;
            }
    }
    for (std::size_t f = 0; f < dim; ++f) var[f] /= total;
    return {std::move(mean), std::move(var)};
}

struct GradReport {
    bool pass = true;
    double max_abs_err = 0.0;
    double max_rel_err = 0.0;
    std::size_t worst_index = 0;
    double worst_analytic = 0.0;
    double worst_numeric = 0.0;

    std::string str() const {
        std::ostringstream os;
        os << (pass ? "pass" : "FAIL") << " max_abs=" << max_abs_err
           << " max_rel=" << max_rel_err << " worst[" << worst_index
           << "] analytic=" << worst_analytic << " numeric=" << worst_numeric;
        return os.str();
    }
};

// Elementwise |a-n| <= abs_tol + rel_tol*max(|a|,|n|).
inline GradReport compare_grads(const Tensor& analytic, const Tensor& numeric,
                                double rel_tol = 1e-5, double abs_tol = 1e-8) {
    if (analytic.shape() != numeric.shape())
        throw std::invalid_argument("compare_grads: shape mismatch " +
                                    shape_str(analytic.shape()) + " vs " +
                                    shape_str(numeric.shape()));
    GradReport report;
    double worst_margin = -1.0;
    for (std::size_t i = 0; i < analytic.size(); ++i) {
        const double a = analytic[i], n = numeric[i];
        const double abs_err = std::abs(a - n);
        const double scale = std::max(std::abs(a), std::abs(n));
        const double allowed = abs_tol + rel_tol * scale;
        report.max_abs_err = std::max(report.max_abs_err, abs_err);
        if (scale > 0.0) report.max_rel_err = std::max(report.max_rel_err, abs_err / scale);
        if (abs_err > allowed) report.pass = false;
        const double margin = abs_err - allowed;
        if (margin > worst_margin) {
            worst_margin = margin;
            report.worst_index = i;
            report.worst_analytic = a;
            report.worst_numeric = n;
        }
    }
    return report;
}

}  // namespace mbn::oracle
