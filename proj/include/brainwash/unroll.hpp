#pragma once

// k-step SGD unroll p_{j+1} = p_j − lr·∇_p L(p_j, x) and its reverse-mode
// derivative with respect to the inputs x.
//
// A Problem exposes
//   template <class T>
//   T gradients(std::span<const T> p, std::span<const T> x,
//               std::vector<T>& dp, std::vector<T>* dx) const;
// returning L(p, x) and writing ∇_p L (and ∇_x L when dx is non-null). It is
// instantiated with double for the forward unroll and with Dual for exact
// Hessian-vector products in the backward sweep.

#include <cmath>
#include <span>
#include <vector>

#include "brainwash/dual.hpp"
#include "brainwash/error.hpp"

namespace brainwash {

enum class UnrollGradient {
    exact,              // forward-over-reverse Hessian-vector products
    finite_difference,  // central differences of first-order gradients
};

struct UnrollTrajectory {
    std::vector<std::vector<double>> params;  // p_0 .. p_k
    std::vector<double> losses;               // L(p_j, x) for j < k
};

template <class Problem>
UnrollTrajectory unroll_forward(const Problem& problem, std::vector<double> p0, std::span<const double> x, double lr,
                                int k) {
    BRAINWASH_REQUIRE(k >= 1, "unroll: k must be >= 1");
    UnrollTrajectory tr;
    tr.params.push_back(std::move(p0));
    for (int j = 0; j < k; ++j) {
        const auto& p = tr.params.back();
        std::vector<double> dp;
        const double loss = problem.template gradients<double>(p, x, dp, nullptr);
        if (!std::isfinite(loss)) throw RuntimeFailure("unroll: non-finite inner loss");
        std::vector<double> next(p.size());
        for (std::size_t i = 0; i < p.size(); ++i) next[i] = p[i] - lr * dp[i];
        tr.losses.push_back(loss);
        tr.params.push_back(std::move(next));
    }
    return tr;
}

// Hessian-vector products H_pp·v and H_xp·v of L at (p, x).
template <class Problem>
void hessian_vector_products(const Problem& problem, std::span<const double> p, std::span<const double> x,
                             std::span<const double> v, UnrollGradient mode, std::vector<double>& hpp,
                             std::vector<double>& hxp) {
    if (mode == UnrollGradient::exact) {
        std::vector<Dual> pd(p.size()), xd(x.begin(), x.end());
        for (std::size_t i = 0; i < p.size(); ++i) pd[i] = Dual(p[i], v[i]);
        std::vector<Dual> dp, dx;
        problem.template gradients<Dual>(pd, xd, dp, &dx);
        hpp.resize(dp.size());
        hxp.resize(dx.size());
        for (std::size_t i = 0; i < dp.size(); ++i) hpp[i] = dp[i].d;
        for (std::size_t i = 0; i < dx.size(); ++i) hxp[i] = dx[i].d;
        return;
    }
    double norm = 0.0;
    for (double vi : v) norm += vi * vi;
    norm = std::sqrt(norm);
    hpp.assign(p.size(), 0.0);
    hxp.assign(x.size(), 0.0);
    if (norm == 0.0) return;
    // Small enough that ±r·v rarely crosses a ReLU kink.
    const double r = 1e-6 / norm;
    std::vector<double> plus(p.begin(), p.end()), minus(p.begin(), p.end());
    for (std::size_t i = 0; i < p.size(); ++i) {
        plus[i] += r * v[i];
        minus[i] -= r * v[i];
    }
    std::vector<double> gp, gm, xp, xm;
    problem.template gradients<double>(plus, x, gp, &xp);
    problem.template gradients<double>(minus, x, gm, &xm);
    for (std::size_t i = 0; i < p.size(); ++i) hpp[i] = (gp[i] - gm[i]) / (2.0 * r);
    for (std::size_t i = 0; i < x.size(); ++i) hxp[i] = (xp[i] - xm[i]) / (2.0 * r);
}

// Given v = ∂O/∂p_k, returns ∂O/∂x through the unrolled steps; optionally
// writes ∂O/∂p_0.
template <class Problem>
std::vector<double> unroll_backward(const Problem& problem, const UnrollTrajectory& tr, std::span<const double> x,
                                    double lr, std::vector<double> v, UnrollGradient mode,
                                    std::vector<double>* dp0 = nullptr) {
    std::vector<double> gx(x.size(), 0.0);
    std::vector<double> hpp, hxp;
    for (std::size_t j = tr.params.size() - 1; j-- > 0;) {
        hessian_vector_products(problem, tr.params[j], x, v, mode, hpp, hxp);
        for (std::size_t i = 0; i < gx.size(); ++i) gx[i] -= lr * hxp[i];
        for (std::size_t i = 0; i < v.size(); ++i) v[i] -= lr * hpp[i];
    }
    if (dp0) *dp0 = std::move(v);
    return gx;
}

}  // namespace brainwash
