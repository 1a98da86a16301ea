#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>

#include <Eigen/Dense>

#include "eplearn/error.hpp"
#include "eplearn/risk_spec.hpp"

namespace eplearn {

struct LinearFit {
    Eigen::VectorXd beta;
    int iterations = 0;
    double gradient_norm = 0.0;
    /// Ridge actually used (differs from the request after a separation fallback).
    double ridge = 0.0;
};

namespace detail {

inline void check_weights(const Eigen::VectorXd& weights, Eigen::Index n, const char* who) {
    if (weights.size() != n) {
        fail(ErrorCode::DimensionMismatch, std::string(who) + ": weight length does not match rows");
    }
    if (n < 1) {
        fail(ErrorCode::EmptyData, std::string(who) + ": no rows");
    }
    if ((weights.array() < 0.0).any()) {
        fail(ErrorCode::InvalidConfig, std::string(who) + ": weights must be nonnegative");
    }
    if (weights.sum() <= 0.0) {
        fail(ErrorCode::AllZeroWeights, std::string(who) + ": all weights are zero");
    }
}

} // namespace detail

/// Weighted least squares with offset and ridge penalty:
///   argmin_beta sum_i w_i (y_i - offset_i - X_i beta)^2 + ridge * |beta|^2.
/// Solved by column-pivoted QR on the row-scaled design stacked on sqrt(ridge) I.
inline LinearFit fit_wls_offset(const Eigen::MatrixXd& X, const Eigen::VectorXd& y, const Eigen::VectorXd& weights,
                                const Eigen::VectorXd& offset, double ridge) {
    const auto n = X.rows();
    const auto p = X.cols();
    if (y.size() != n || offset.size() != n) {
        fail(ErrorCode::DimensionMismatch, "fit_wls_offset: y/offset length does not match rows");
    }
    detail::check_weights(weights, n, "fit_wls_offset");
    if (ridge < 0.0) fail(ErrorCode::InvalidConfig, "fit_wls_offset: ridge must be >= 0");

    LinearFit out;
    out.ridge = ridge;
    out.beta = Eigen::VectorXd::Zero(p);
    if (p == 0) return out;

    const Eigen::VectorXd sw = weights.array().sqrt();
    Eigen::MatrixXd A(n + p, p);
    A.topRows(n) = sw.asDiagonal() * X;
    A.bottomRows(p) = std::sqrt(ridge) * Eigen::MatrixXd::Identity(p, p);
    Eigen::VectorXd b = Eigen::VectorXd::Zero(n + p);
    b.head(n) = sw.array() * (y - offset).array();

    Eigen::ColPivHouseholderQR<Eigen::MatrixXd> qr(A);
    if (ridge == 0.0 && qr.rank() < p) {
        fail(ErrorCode::SingularDesign, "fit_wls_offset: weighted design has rank " + std::to_string(qr.rank()) +
                                            " < " + std::to_string(p));
    }
    out.beta = qr.solve(b);
    const Eigen::VectorXd resid = y - offset - X * out.beta;
    out.gradient_norm =
        (X.transpose() * (weights.array() * resid.array()).matrix() - ridge * out.beta).cwiseAbs().maxCoeff();
    return out;
}

struct IrlsOptions {
    int max_iterations = 100;
    double deviance_tolerance = 1e-10;
    double gradient_tolerance = 1e-6;
    double working_weight_floor = 1e-10;
    double separation_ridge = 1e-8;
};

namespace detail {

inline double logistic_objective(const Eigen::MatrixXd& X, const Eigen::VectorXd& y, const Eigen::VectorXd& w,
                                 const Eigen::VectorXd& offset, double ridge, const Eigen::VectorXd& beta) {
    const Eigen::VectorXd eta = offset + X * beta;
    double f = 0.0;
    for (Eigen::Index i = 0; i < eta.size(); ++i) {
        if (w[i] == 0.0) continue;
        f += w[i] * (log1pexp(eta[i]) - y[i] * eta[i]);
    }
    return f + 0.5 * ridge * beta.squaredNorm();
}

struct IrlsState {
    Eigen::VectorXd beta;
    int iterations = 0;
    double gradient_norm = 0.0;
    bool converged = false;
};

inline IrlsState run_irls(const Eigen::MatrixXd& X, const Eigen::VectorXd& y, const Eigen::VectorXd& w,
                          const Eigen::VectorXd& offset, double ridge, const IrlsOptions& opt) {
    const auto p = X.cols();
    IrlsState st;
    st.beta = Eigen::VectorXd::Zero(p);
    double f = logistic_objective(X, y, w, offset, ridge, st.beta);
    double f_change = std::numeric_limits<double>::infinity();
    for (int it = 0; it <= opt.max_iterations; ++it) {
        const Eigen::VectorXd eta = offset + X * st.beta;
        Eigen::VectorXd resid(eta.size());
        Eigen::VectorXd work(eta.size());
        for (Eigen::Index i = 0; i < eta.size(); ++i) {
            const double mu = expit(eta[i]);
            resid[i] = w[i] * (y[i] - mu);
            work[i] = w[i] * std::max(mu * (1.0 - mu), opt.working_weight_floor);
        }
        const Eigen::VectorXd grad = X.transpose() * resid - ridge * st.beta;
        st.gradient_norm = grad.cwiseAbs().maxCoeff();
        st.iterations = it;
        if (!std::isfinite(st.gradient_norm) || !std::isfinite(f)) return st;
        if (st.gradient_norm < opt.gradient_tolerance &&
            (f_change < opt.deviance_tolerance * std::max(1.0, std::abs(f)) || st.gradient_norm < 1e-12)) {
            st.converged = true;
            return st;
        }
        if (it == opt.max_iterations) break;

        Eigen::MatrixXd H = X.transpose() * work.asDiagonal() * X;
        H.diagonal().array() += ridge;
        Eigen::LDLT<Eigen::MatrixXd> ldlt(H);
        Eigen::VectorXd step = ldlt.solve(grad);
        if (ldlt.info() != Eigen::Success || !step.allFinite()) {
            step = H.completeOrthogonalDecomposition().solve(grad);
        }
        if (!step.allFinite()) return st;

        // Step halving keeps the penalized objective monotone.
        double t = 1.0;
        Eigen::VectorXd trial = st.beta + step;
        double f_trial = logistic_objective(X, y, w, offset, ridge, trial);
        while (!(f_trial <= f + 1e-12 * std::max(1.0, std::abs(f))) && t > 1e-10) {
            t *= 0.5;
            trial = st.beta + t * step;
            f_trial = logistic_objective(X, y, w, offset, ridge, trial);
        }
        f_change = std::abs(f - f_trial);
        st.beta = trial;
        f = f_trial;
    }
    return st;
}

} // namespace detail

/// Weighted Bernoulli quasi-likelihood with linear predictor offset + X beta,
/// fitted by IRLS (Newton with step halving). Fractional outcomes in [0, 1]
/// are allowed. An unpenalized fit that fails to converge (quasi-separation)
/// is retried with a small ridge.
inline LinearFit fit_logistic_offset(const Eigen::MatrixXd& X, const Eigen::VectorXd& y,
                                     const Eigen::VectorXd& weights, const Eigen::VectorXd& offset, double ridge,
                                     const IrlsOptions& opt = {}) {
    const auto n = X.rows();
    if (y.size() != n || offset.size() != n) {
        fail(ErrorCode::DimensionMismatch, "fit_logistic_offset: y/offset length does not match rows");
    }
    detail::check_weights(weights, n, "fit_logistic_offset");
    if ((y.array() < 0.0).any() || (y.array() > 1.0).any()) {
        fail(ErrorCode::InvalidConfig, "fit_logistic_offset: outcomes must lie in [0, 1]");
    }
    LinearFit out;
    out.ridge = ridge;
    if (X.cols() == 0) {
        out.beta = Eigen::VectorXd::Zero(0);
        return out;
    }
    auto st = detail::run_irls(X, y, weights, offset, ridge, opt);
    if (!st.converged && ridge < opt.separation_ridge) {
        out.ridge = opt.separation_ridge;
        st = detail::run_irls(X, y, weights, offset, opt.separation_ridge, opt);
    }
    if (!st.converged) {
        fail(ErrorCode::NoConvergence, "fit_logistic_offset: IRLS did not converge after " +
                                           std::to_string(st.iterations) +
                                           " iterations (gradient norm " + std::to_string(st.gradient_norm) + ")");
    }
    out.beta = std::move(st.beta);
    out.iterations = st.iterations;
    out.gradient_norm = st.gradient_norm;
    return out;
}

} // namespace eplearn
