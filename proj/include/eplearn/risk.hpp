#pragma once

#include <algorithm>
#include <cmath>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "eplearn/crossfit.hpp"
#include "eplearn/dataset.hpp"
#include "eplearn/error.hpp"
#include "eplearn/risk_spec.hpp"

namespace eplearn {

/// chi(w, a, y) = mu(1, w) - mu(0, w) + (2a - 1) / pi(a | w) * (y - mu(a, w)).
inline double dr_pseudo_outcome(int a, double y, double pi_a, double mu0, double mu1) {
    const double mu_a = a == 1 ? mu1 : mu0;
    return mu1 - mu0 + (2.0 * a - 1.0) / pi_a * (y - mu_a);
}

inline Eigen::VectorXd dr_pseudo_outcomes(const Dataset& data, const NuisanceRows& nuis) {
    Eigen::VectorXd chi(data.n());
    for (Eigen::Index i = 0; i < data.n(); ++i) {
        const int a = data.a(i);
        chi[i] = dr_pseudo_outcome(a, data.y(i), nuis.pi(i, a), nuis.mu0[i], nuis.mu1[i]);
    }
    return chi;
}

/// Delta_{pi,mu}(w, a, y; theta) = (1 / pi(a | w)) * sum_m H_m(a, mu(a, w)) h_m(theta) * (y - mu(a, w)).
inline double debias_term(const RiskSpec& spec, int a, double y, double pi_a, double mu0, double mu1, double theta) {
    const double mu_a = a == 1 ? mu1 : mu0;
    const double weight = spec.H(1, a, mu_a) * spec.h1(theta) + spec.H(2, a, mu_a) * spec.h2(theta);
    return weight * (y - mu_a) / pi_a;
}

/// Orthogonal (one-step) loss L_mu(theta, w) + Delta_{pi,mu}(o; theta) for one observation.
inline double onestep_loss(const RiskSpec& spec, int a, double y, double pi_a, double mu0, double mu1, double theta) {
    return evaluate_loss(spec, mu0, mu1, theta) + debias_term(spec, a, y, pi_a, mu0, mu1, theta);
}

/// Efficient influence function of theta -> R(theta), centred at `risk_value`.
inline double eif(const RiskSpec& spec, int a, double y, double pi_a, double mu0, double mu1, double theta,
                  double risk_value) {
    return onestep_loss(spec, a, y, pi_a, mu0, mu1, theta) - risk_value;
}

namespace detail {

inline void check_theta(const Dataset& data, const Eigen::VectorXd& theta) {
    if (theta.size() != data.n()) {
        fail(ErrorCode::DimensionMismatch, "theta has " + std::to_string(theta.size()) + " values for " +
                                               std::to_string(data.n()) + " rows");
    }
}

} // namespace detail

/// Mean debiasing term (1/n) sum_i Delta_{pi_{j(i)}, mu_{j(i)}}(O_i; theta(W_i)).
inline double mean_debias_term(const RiskSpec& spec, const Dataset& data, const NuisanceRows& nuis,
                               const Eigen::VectorXd& theta) {
    detail::check_theta(data, theta);
    double s = 0.0;
    for (Eigen::Index i = 0; i < data.n(); ++i) {
        const int a = data.a(i);
        s += debias_term(spec, a, data.y(i), nuis.pi(i, a), nuis.mu0[i], nuis.mu1[i], theta[i]);
    }
    return s / static_cast<double>(data.n());
}

/// (1/n) sum_i L_{mu_{j(i)}}(theta, W_i) with nuisances resolved per row.
inline double plugin_risk(const RiskSpec& spec, const Eigen::VectorXd& mu0, const Eigen::VectorXd& mu1,
                          const Eigen::VectorXd& theta) {
    if (mu0.size() != theta.size() || mu1.size() != theta.size()) {
        fail(ErrorCode::DimensionMismatch, "plugin_risk: length mismatch");
    }
    if (theta.size() == 0) fail(ErrorCode::EmptyData, "plugin_risk: no rows");
    double s = 0.0;
    for (Eigen::Index i = 0; i < theta.size(); ++i) s += evaluate_loss(spec, mu0[i], mu1[i], theta[i]);
    return s / static_cast<double>(theta.size());
}

/// One-step risk: plug-in risk at the cross-fitted mu plus the mean debiasing term.
/// `theta` holds theta(W_i) for every row.
inline double onestep_risk(const RiskSpec& spec, const Dataset& data, const NuisanceRows& nuis,
                           const Eigen::VectorXd& theta) {
    detail::check_theta(data, theta);
    double s = 0.0;
    for (Eigen::Index i = 0; i < data.n(); ++i) {
        const int a = data.a(i);
        s += onestep_loss(spec, a, data.y(i), nuis.pi(i, a), nuis.mu0[i], nuis.mu1[i], theta[i]);
    }
    return s / static_cast<double>(data.n());
}

/// Plug-in risk at the debiased outcome regression mu*.
inline double ep_plugin_risk(const RiskSpec& spec, const Eigen::VectorXd& mu_star0, const Eigen::VectorXd& mu_star1,
                             const Eigen::VectorXd& theta) {
    return plugin_risk(spec, mu_star0, mu_star1, theta);
}

/// Regression targets and weights for a second-stage contrast fit.
struct PseudoRegression {
    Family family = Family::CATE;
    Eigen::VectorXd outcome;
    Eigen::VectorXd weight;
    bool any_negative_weight = false;
    bool any_outcome_outside_unit = false;
    Eigen::Index negative_weight_count = 0;
    Eigen::Index outside_unit_count = 0;
    /// Rows whose pseudo-weight was exactly zero; they carry weight 0 and outcome 0.
    std::vector<Eigen::Index> excluded;

    Eigen::Index size() const { return outcome.size(); }

    void census() {
        negative_weight_count = 0;
        outside_unit_count = 0;
        for (Eigen::Index i = 0; i < size(); ++i) {
            if (weight[i] < 0.0) ++negative_weight_count;
            if (outcome[i] < 0.0 || outcome[i] > 1.0) ++outside_unit_count;
        }
        any_negative_weight = negative_weight_count > 0;
        any_outcome_outside_unit = outside_unit_count > 0;
    }
};

/// CRR doubly robust pseudo-pairs: mu_hat_s = mu(s, W) + 1{A = s} / pi(s | W) * (Y - mu(s, W)),
/// weight mu_hat_0 + mu_hat_1, outcome mu_hat_1 / weight. Rows with weight
/// exactly zero are excluded (recorded in `excluded`).
inline PseudoRegression crr_dr_pseudo(const Dataset& data, const NuisanceRows& nuis) {
    PseudoRegression out;
    out.family = Family::CRR;
    out.outcome.resize(data.n());
    out.weight.resize(data.n());
    for (Eigen::Index i = 0; i < data.n(); ++i) {
        const int a = data.a(i);
        const double resid = (data.y(i) - nuis.mu(i, a)) / nuis.pi(i, a);
        const double m0 = nuis.mu0[i] + (a == 0 ? resid : 0.0);
        const double m1 = nuis.mu1[i] + (a == 1 ? resid : 0.0);
        const double w = m0 + m1;
        if (w == 0.0) {
            out.excluded.push_back(i);
            out.weight[i] = 0.0;
            out.outcome[i] = 0.0;
            continue;
        }
        out.weight[i] = w;
        out.outcome[i] = m1 / w;
    }
    out.census();
    return out;
}

/// CRR EP pseudo-pairs from the debiased regression: weight mu*_1 + mu*_0, outcome mu*_1 / weight.
inline PseudoRegression crr_ep_pseudo(const Eigen::VectorXd& mu_star0, const Eigen::VectorXd& mu_star1) {
    if (mu_star0.size() != mu_star1.size()) fail(ErrorCode::DimensionMismatch, "crr_ep_pseudo: length mismatch");
    PseudoRegression out;
    out.family = Family::CRR;
    out.weight = mu_star0 + mu_star1;
    out.outcome.resize(mu_star0.size());
    for (Eigen::Index i = 0; i < mu_star0.size(); ++i) {
        if (!(mu_star0[i] > 0.0 && mu_star1[i] > 0.0)) {
            fail(ErrorCode::NonFiniteValue, "crr_ep_pseudo: debiased outcome regression must be positive (row " +
                                                std::to_string(i + 1) + ")");
        }
        out.outcome[i] = mu_star1[i] / out.weight[i];
    }
    out.census();
    return out;
}

/// Empirical quantile with linear interpolation between order statistics.
inline double empirical_quantile(std::vector<double> values, double q) {
    if (values.empty()) fail(ErrorCode::EmptyData, "quantile of an empty sample");
    std::sort(values.begin(), values.end());
    const double pos = std::clamp(q, 0.0, 1.0) * static_cast<double>(values.size() - 1);
    const auto lo = static_cast<std::size_t>(std::floor(pos));
    const auto hi = std::min(lo + 1, values.size() - 1);
    return values[lo] + (pos - static_cast<double>(lo)) * (values[hi] - values[lo]);
}

} // namespace eplearn
