#pragma once

// Central-difference gradient checking at double precision. Shared by the
// kernel tests and the acceptance suite.

#include <gtest/gtest.h>

#include <cmath>
#include <functional>
#include <vector>

#include "spdl/tensor.hpp"

// make_loss must be pure: calling it twice on unchanged params yields the
// same scalar. It runs once under a recording scope (analytic grads) and
// then 2 * numel times without one (finite differences).
inline void expect_gradients_match(std::function<spdl::Tensor<double>()> make_loss,
                                   std::vector<spdl::Tensor<double>> params,
                                   double h = 1e-5, double tol = 1e-4) {
    using namespace spdl;
    for (auto& p : params) {
        p.set_requires_grad();
        p.zero_grad();
    }
    Graph<double> g;
    {
        auto scope = g.record();
        Tensor<double> loss = make_loss();
        ASSERT_EQ(loss.numel(), 1);
        g.backward(loss);
    }
    ASSERT_GT(g.size(), 0u) << "loss did not record any ops";
    for (size_t pi = 0; pi < params.size(); ++pi) {
        auto& p = params[pi];
        for (int64_t i = 0; i < p.numel(); ++i) {
            const double keep = p.data()[i];
            p.data()[i] = keep + h;
            const double lp = make_loss().item();
            p.data()[i] = keep - h;
            const double lm = make_loss().item();
            p.data()[i] = keep;
            const double fd = (lp - lm) / (2.0 * h);
            const double an = p.grad()[i];
            const double err = std::abs(fd - an) / std::max({1.0, std::abs(fd), std::abs(an)});
            ASSERT_LE(err, tol) << "param " << pi << " element " << i << ": analytic " << an
                                << " vs finite-difference " << fd;
        }
    }
}
