#pragma once

#include <functional>
#include <vector>

#include "rapm/autodiff.hpp"

namespace rapm::testutil {

// Central finite difference of a scalar-valued function of several matrix
// parameters, evaluated entry by entry.
inline std::vector<ad::Mat> fd_grads(
    std::vector<ad::Mat> params,
    const std::function<double(const std::vector<ad::Mat>&)>& f, double h = 1e-6) {
    std::vector<ad::Mat> grads;
    for (std::size_t p = 0; p < params.size(); ++p) {
        ad::Mat g = ad::Mat::Zero(params[p].rows(), params[p].cols());
        for (Eigen::Index i = 0; i < params[p].rows(); ++i) {
            for (Eigen::Index j = 0; j < params[p].cols(); ++j) {
                double orig = params[p](i, j);
                params[p](i, j) = orig + h;
                double up = f(params);
                params[p](i, j) = orig - h;
                double down = f(params);
                params[p](i, j) = orig;
                g(i, j) = (up - down) / (2 * h);
            }
        }
        grads.push_back(std::move(g));
    }
    return grads;
}

inline double rel_err(const ad::Mat& a, const ad::Mat& b) {
    double denom = std::max(1.0, std::max(a.norm(), b.norm()));
    return (a - b).norm() / denom;
}

}  // namespace rapm::testutil
