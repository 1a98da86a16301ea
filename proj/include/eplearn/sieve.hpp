#pragma once

#include <algorithm>
#include <cmath>
#include <optional>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "eplearn/basis.hpp"
#include "eplearn/crossfit.hpp"
#include "eplearn/dataset.hpp"
#include "eplearn/error.hpp"
#include "eplearn/linear_models.hpp"
#include "eplearn/risk_spec.hpp"

namespace eplearn {

inline CosineBasis cosine_basis(const Dataset& data, int k) { return CosineBasis::fit(data.covariates(), k); }

enum class DebiasMethod { logistic = 1, linear = 2, bounded = 3 };

/// Method 1 when the declared outcome range is [0, 1], method 2 otherwise.
inline DebiasMethod default_debias_method(const RiskSpec& spec) {
    return spec.unit_outcomes() ? DebiasMethod::logistic : DebiasMethod::linear;
}

/// Debiasing feature row for arm a at a point whose basis features are `phi`
/// and initial outcome regression is `mu`:
///   general:    (H_1(a, mu) phi, H_2(a, mu) phi)        length 2q
///   simplified: (H_1(a, mu) + H_2(a, mu)) phi           length q   (CATE: (2a - 1) phi)
inline void debias_feature_row(const RiskSpec& spec, bool simplified, int a, double mu,
                               const Eigen::Ref<const Eigen::RowVectorXd, 0, Eigen::InnerStride<>>& phi, Eigen::Ref<Eigen::RowVectorXd, 0, Eigen::InnerStride<>> out) {
    const auto q = phi.size();
    if (simplified) {
        out = (spec.H(1, a, mu) + spec.H(2, a, mu)) * phi;
    } else {
        out.head(q) = spec.H(1, a, mu) * phi;
        out.tail(q) = spec.H(2, a, mu) * phi;
    }
}

inline void check_simplified(const RiskSpec& spec, bool simplified) {
    if (simplified && spec.family != Family::CATE) {
        fail(ErrorCode::Unsupported, "simplified debiasing features are only defined for the CATE risk");
    }
}

/// Feature matrix at the observed (A_i, W_i), built from the out-of-fold
/// nuisances. `phi` is the basis evaluated at W_i (n x q).
inline Eigen::MatrixXd build_debias_features(const Dataset& data, const NuisanceRows& nuis, const RiskSpec& spec,
                                             const Eigen::MatrixXd& phi, bool simplified) {
    check_simplified(spec, simplified);
    const auto q = phi.cols();
    Eigen::MatrixXd out(data.n(), simplified ? q : 2 * q);
    for (Eigen::Index i = 0; i < data.n(); ++i) {
        const int a = data.a(i);
        debias_feature_row(spec, simplified, a, nuis.mu(i, a), phi.row(i), out.row(i));
    }
    return out;
}

inline Eigen::MatrixXd build_debias_features(const Dataset& data, const NuisanceRows& nuis, const RiskSpec& spec,
                                             const CosineBasis& basis, bool simplified) {
    return build_debias_features(data, nuis, spec, basis.features(data.covariates()), simplified);
}

/// Maps an initial outcome-regression value to the debiased one:
/// mu* = g^{-1}(g(mu) + phi_hat' beta) for the method's link g.
struct DebiasLink {
    DebiasMethod method = DebiasMethod::linear;
    double lo = 0.0; // method 3 range
    double hi = 1.0;

    static constexpr double eps = 1e-6;

    double forward(double mu) const {
        switch (method) {
        case DebiasMethod::logistic: return logit(std::clamp(mu, eps, 1.0 - eps));
        case DebiasMethod::linear: return mu;
        case DebiasMethod::bounded: return logit(std::clamp((mu - lo) / (hi - lo), eps, 1.0 - eps));
        }
        return mu;
    }

    double inverse(double eta) const {
        switch (method) {
        case DebiasMethod::logistic: return expit(eta);
        case DebiasMethod::linear: return eta;
        case DebiasMethod::bounded: return lo + (hi - lo) * expit(eta);
        }
        return eta;
    }
};

struct DebiasResult {
    DebiasMethod method = DebiasMethod::linear;
    bool simplified = false;
    Eigen::VectorXd beta;
    DebiasLink link;
    /// mu*_{j(i)}(0, W_i) and mu*_{j(i)}(1, W_i) for every row of the dataset.
    Eigen::VectorXd mu_star0;
    Eigen::VectorXd mu_star1;
    double score_residual = 0.0;
    double ridge_used = 0.0;

    double mu_star(Eigen::Index i, int a) const { return a == 1 ? mu_star1[i] : mu_star0[i]; }

    /// mu*_j(a, w) at new points, given the fold-j initial outcome values and
    /// the basis features at those points.
    Eigen::VectorXd adjust(const RiskSpec& spec, int a, const Eigen::VectorXd& mu, const Eigen::MatrixXd& phi) const {
        Eigen::VectorXd out(mu.size());
        Eigen::RowVectorXd row(beta.size());
        for (Eigen::Index i = 0; i < mu.size(); ++i) {
            if (beta.size() == 0) {
                out[i] = mu[i];
                continue;
            }
            debias_feature_row(spec, simplified, a, mu[i], phi.row(i), row);
            out[i] = link.inverse(link.forward(mu[i]) + row.dot(beta));
        }
        return out;
    }

    /// mu*_j(a, W) at arbitrary covariates, using fold j's initial regression.
    Eigen::VectorXd predict(const NuisanceEstimates& nuisances, const RiskSpec& spec, const CosineBasis& basis, int j,
                            int a, const Eigen::MatrixXd& W) const {
        return adjust(spec, a, nuisances.outcome(j, a, W), basis.features(W));
    }
};

/// Max over feature columns c of |(1/n) sum_i phi_hat_{i,c} / pi(A_i | W_i) * (Y_i - mu*(A_i, W_i))|
/// over the rows in `subset` (all rows when empty). Zero for an empty basis.
inline double check_score_equation(const Dataset& data, const NuisanceRows& nuis, const RiskSpec& spec,
                                   const Eigen::MatrixXd& phi, bool simplified, const Eigen::VectorXd& mu_star0,
                                   const Eigen::VectorXd& mu_star1, const std::vector<Eigen::Index>& subset = {}) {
    check_simplified(spec, simplified);
    if (phi.cols() == 0) return 0.0;
    const auto p = simplified ? phi.cols() : 2 * phi.cols();
    Eigen::VectorXd score = Eigen::VectorXd::Zero(p);
    Eigen::RowVectorXd row(p);
    auto add = [&](Eigen::Index i) {
        const int a = data.a(i);
        debias_feature_row(spec, simplified, a, nuis.mu(i, a), phi.row(i), row);
        const double mu_star = a == 1 ? mu_star1[i] : mu_star0[i];
        score += (row * ((data.y(i) - mu_star) / nuis.pi(i, a))).transpose();
    };
    Eigen::Index count = 0;
    if (subset.empty()) {
        for (Eigen::Index i = 0; i < data.n(); ++i) add(i);
        count = data.n();
    } else {
        for (const auto i : subset) add(i);
        count = static_cast<Eigen::Index>(subset.size());
    }
    return score.cwiseAbs().maxCoeff() / static_cast<double>(count);
}

inline double check_score_equation(const Dataset& data, const NuisanceRows& nuis, const RiskSpec& spec,
                                   const CosineBasis& basis, bool simplified, const DebiasResult& result) {
    return check_score_equation(data, nuis, spec, basis.features(data.covariates()), simplified, result.mu_star0,
                                result.mu_star1);
}

struct DebiasOptions {
    DebiasMethod method = DebiasMethod::linear;
    bool simplified = false;
    double ridge = 1e-8;
};

/// Sieve adjustment of the cross-fitted outcome regression. A single
/// coefficient vector is fitted over the rows in `subset` (all rows when
/// empty) by a weighted regression of Y on the debiasing features, with
/// offset g(mu_{j(i)}(A_i, W_i)) and weight 1 / pi_{j(i)}(A_i | W_i).
/// mu* is then produced for both arms at every row.
inline DebiasResult debias_outcome_regression(const Dataset& data, const NuisanceRows& nuis, const RiskSpec& spec,
                                              const Eigen::MatrixXd& phi, const DebiasOptions& opt,
                                              const std::vector<Eigen::Index>& subset = {}) {
    check_simplified(spec, opt.simplified);
    if (phi.rows() != data.n()) fail(ErrorCode::DimensionMismatch, "basis rows do not match the dataset");
    std::vector<Eigen::Index> rows = subset;
    if (rows.empty()) {
        rows.resize(static_cast<std::size_t>(data.n()));
        for (Eigen::Index i = 0; i < data.n(); ++i) rows[static_cast<std::size_t>(i)] = i;
    }
    const auto m = static_cast<Eigen::Index>(rows.size());
    const auto q = phi.cols();
    const auto p = opt.simplified ? q : 2 * q;

    DebiasResult res;
    res.method = opt.method;
    res.simplified = opt.simplified;
    res.link.method = opt.method;
    res.ridge_used = opt.ridge;

    if (opt.method == DebiasMethod::logistic) {
        for (const auto i : rows) {
            if (data.y(i) < 0.0 || data.y(i) > 1.0) {
                fail(ErrorCode::MethodOutcomeMismatch,
                     "logistic debiasing needs outcomes in [0, 1]; row " + std::to_string(i + 1) + " has y = " +
                         std::to_string(data.y(i)));
            }
        }
    }
    if (opt.method == DebiasMethod::bounded) {
        double lo = std::numeric_limits<double>::infinity();
        double hi = -lo;
        for (const auto i : rows) {
            const double mu = nuis.mu(i, data.a(i));
            lo = std::min({lo, data.y(i), mu});
            hi = std::max({hi, data.y(i), mu});
        }
        if (!(hi > lo)) fail(ErrorCode::MethodOutcomeMismatch, "bounded debiasing needs a non-degenerate range");
        res.link.lo = lo;
        res.link.hi = hi;
    }

    Eigen::MatrixXd F(m, p);
    Eigen::VectorXd y(m), w(m), offset(m);
    for (Eigen::Index r = 0; r < m; ++r) {
        const auto i = rows[static_cast<std::size_t>(r)];
        const int a = data.a(i);
        const double mu = nuis.mu(i, a);
        debias_feature_row(spec, opt.simplified, a, mu, phi.row(i), F.row(r));
        offset[r] = res.link.forward(mu);
        w[r] = 1.0 / nuis.pi(i, a);
        y[r] = opt.method == DebiasMethod::bounded ? (data.y(i) - res.link.lo) / (res.link.hi - res.link.lo)
                                                   : data.y(i);
    }

    // Columns that vanish on every row (e.g. the H_1 block of the CATE risk)
    // carry no information; their coefficients are fixed at zero.
    std::vector<Eigen::Index> live;
    for (Eigen::Index c = 0; c < p; ++c) {
        if (F.col(c).cwiseAbs().maxCoeff() > 0.0) live.push_back(c);
    }
    res.beta = Eigen::VectorXd::Zero(p);
    if (!live.empty()) {
        Eigen::MatrixXd Fl(m, static_cast<Eigen::Index>(live.size()));
        for (std::size_t c = 0; c < live.size(); ++c) Fl.col(static_cast<Eigen::Index>(c)) = F.col(live[c]);
        const LinearFit fit = opt.method == DebiasMethod::linear ? fit_wls_offset(Fl, y, w, offset, opt.ridge)
                                                                 : fit_logistic_offset(Fl, y, w, offset, opt.ridge);
        res.ridge_used = fit.ridge;
        for (std::size_t c = 0; c < live.size(); ++c) res.beta[live[c]] = fit.beta[static_cast<Eigen::Index>(c)];
    }

    res.mu_star0.resize(data.n());
    res.mu_star1.resize(data.n());
    Eigen::RowVectorXd row(p);
    for (Eigen::Index i = 0; i < data.n(); ++i) {
        for (int a = 0; a < 2; ++a) {
            const double mu = nuis.mu(i, a);
            double value = mu;
            if (p > 0) {
                debias_feature_row(spec, opt.simplified, a, mu, phi.row(i), row);
                value = res.link.inverse(res.link.forward(mu) + row.dot(res.beta));
            }
            (a == 1 ? res.mu_star1 : res.mu_star0)[i] = value;
        }
    }
    res.score_residual =
        check_score_equation(data, nuis, spec, phi, opt.simplified, res.mu_star0, res.mu_star1, subset);
    return res;
}

inline DebiasResult debias_outcome_regression(const Dataset& data, const NuisanceRows& nuis, const RiskSpec& spec,
                                              const CosineBasis& basis, const DebiasOptions& opt) {
    return debias_outcome_regression(data, nuis, spec, basis.features(data.covariates()), opt);
}

} // namespace eplearn
