#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <initializer_list>
#include <optional>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Dense>

#include "eplearn/crossfit.hpp"
#include "eplearn/dataset.hpp"
#include "eplearn/error.hpp"
#include "eplearn/risk_spec.hpp"

namespace eplearn {

enum class ScenarioFamily { CATE_lowdim, CATE_highdim, CRR, INTRO };
enum class Overlap { moderate, limited };
enum class Complexity { simple, complex };

inline std::string to_string(ScenarioFamily f) {
    switch (f) {
    case ScenarioFamily::CATE_lowdim: return "cate_lowdim";
    case ScenarioFamily::CATE_highdim: return "cate_highdim";
    case ScenarioFamily::CRR: return "crr";
    case ScenarioFamily::INTRO: return "intro";
    }
    return "unknown";
}
inline std::string to_string(Overlap o) { return o == Overlap::moderate ? "moderate" : "limited"; }
inline std::string to_string(Complexity c) { return c == Complexity::simple ? "simple" : "complex"; }

inline ScenarioFamily parse_scenario_family(const std::string& s) {
    for (auto f : {ScenarioFamily::CATE_lowdim, ScenarioFamily::CATE_highdim, ScenarioFamily::CRR, ScenarioFamily::INTRO}) {
        if (s == to_string(f)) return f;
    }
    fail(ErrorCode::InvalidConfig, "unknown scenario '" + s + "' (expected cate_lowdim, cate_highdim, crr, intro)");
}
inline Overlap parse_overlap(const std::string& s) {
    if (s == "moderate") return Overlap::moderate;
    if (s == "limited") return Overlap::limited;
    fail(ErrorCode::InvalidConfig, "unknown overlap '" + s + "' (expected moderate, limited)");
}
inline Complexity parse_complexity(const std::string& s) {
    if (s == "simple") return Complexity::simple;
    if (s == "complex") return Complexity::complex;
    fail(ErrorCode::InvalidConfig, "unknown complexity '" + s + "' (expected simple, complex)");
}

struct ScenarioConfig {
    ScenarioFamily family = ScenarioFamily::CATE_lowdim;
    Overlap overlap = Overlap::moderate;
    Complexity complexity = Complexity::simple;
    Eigen::Index n = 500;
    std::uint64_t seed = 0;

    void validate() const {
        if (n < 50) fail(ErrorCode::InvalidConfig, "scenario n must be >= 50, got " + std::to_string(n));
    }

    std::string name() const {
        return to_string(family) + "/" + to_string(overlap) + "/" + to_string(complexity);
    }
};

namespace detail {

inline Eigen::MatrixXd equicorrelation_cholesky(int d, double rho) {
    Eigen::MatrixXd S = Eigen::MatrixXd::Constant(d, d, rho);
    S.diagonal().setOnes();
    return S.llt().matrixL();
}

} // namespace detail

/// Covariate law, propensity, outcome regressions and true contrast of one
/// simulation design. All functions take a covariate row.
class Scenario {
public:
    explicit Scenario(ScenarioConfig cfg) : cfg_(cfg) {
        if (cfg_.family == ScenarioFamily::CATE_highdim) chol_ = detail::equicorrelation_cholesky(20, 0.4);
    }

    const ScenarioConfig& config() const { return cfg_; }

    int dim() const {
        switch (cfg_.family) {
        case ScenarioFamily::CATE_lowdim:
        case ScenarioFamily::CRR: return 3;
        case ScenarioFamily::CATE_highdim: return 20;
        case ScenarioFamily::INTRO: return 1;
        }
        return 0;
    }

    Family contrast() const { return cfg_.family == ScenarioFamily::CRR ? Family::CRR : Family::CATE; }

    /// Declared outcome range: [0, 1] for the binary-outcome designs.
    std::optional<std::pair<double, double>> outcome_range() const {
        if (cfg_.family == ScenarioFamily::CRR || cfg_.family == ScenarioFamily::INTRO) return std::make_pair(0.0, 1.0);
        return std::nullopt;
    }

    RiskSpec risk_spec() const { return risk_spec_for(contrast(), outcome_range()); }

    bool gaussian_outcome() const {
        return cfg_.family == ScenarioFamily::CATE_lowdim || cfg_.family == ScenarioFamily::CATE_highdim;
    }

    template <class Row>
    double propensity(const Row& w) const {
        switch (cfg_.family) {
        case ScenarioFamily::CATE_lowdim:
        case ScenarioFamily::CRR: {
            const double s = w[0] + w[1] + w[2];
            return expit(cfg_.overlap == Overlap::moderate ? s / 3.0 : s);
        }
        case ScenarioFamily::CATE_highdim: return expit((w[0] + w[4] + w[8] + w[10] + w[18]) / 1.3);
        case ScenarioFamily::INTRO: return expit(w[0]);
        }
        return 0.5;
    }

    template <class Row>
    double mu(int a, const Row& w) const {
        switch (cfg_.family) {
        case ScenarioFamily::CATE_lowdim: {
            double m0 = 0.0;
            for (int k = 0; k < 3; ++k) m0 += w[k] / 2.0 + std::sin(5.0 * w[k]) + 1.0 / (w[k] + 1.2);
            return m0 + a * theta(w);
        }
        case ScenarioFamily::CATE_highdim: {
            const double m0 = (std::cos(4.0 * w[0]) + std::cos(4.0 * w[4]) + std::sin(4.0 * w[8]) +
                               1.0 / (1.5 + w[14]) + 1.0 / (1.5 + w[9])) /
                              5.0;
            return m0 + a * theta(w);
        }
        case ScenarioFamily::CRR: {
            const double m0 = crr_baseline(w);
            return a == 1 ? std::min(1.0, m0 * std::exp(crr_log_ratio(w))) : m0;
        }
        case ScenarioFamily::INTRO: {
            const double m0 = 0.35 + 0.65 * expit(w[0] - 2.0);
            if (a == 0) return m0;
            return std::clamp(m0 + expit(2.0 * w[0] + 2.0) - expit(w[0] - 2.0) - 0.349, 0.0, 1.0);
        }
        }
        return 0.0;
    }

    /// True contrast: mu(1, w) - mu(0, w) or log mu(1, w) - log mu(0, w).
    template <class Row>
    double theta(const Row& w) const {
        switch (cfg_.family) {
        case ScenarioFamily::CATE_lowdim: {
            double s = 1.0;
            for (int k = 0; k < 3; ++k) s += w[k] + (cfg_.complexity == Complexity::complex ? std::sin(5.0 * w[k]) : 0.0);
            return s;
        }
        case ScenarioFamily::CATE_highdim:
            if (cfg_.complexity == Complexity::simple) return 1.0 + (w[0] + w[4] + w[8] + w[14] + w[9]) / 5.0;
            return 1.0 + (std::sin(4.0 * w[0]) + std::sin(4.0 * w[4]) + std::cos(4.0 * w[8]) +
                          1.5 * (w[14] * w[14] - w[9] * w[9])) /
                             5.0;
        case ScenarioFamily::CRR: return std::log(mu(1, w)) - std::log(mu(0, w));
        case ScenarioFamily::INTRO: return mu(1, w) - mu(0, w);
        }
        return 0.0;
    }

    Eigen::MatrixXd draw_covariates(Eigen::Index n, std::mt19937_64& rng) const {
        Eigen::MatrixXd W(n, dim());
        switch (cfg_.family) {
        case ScenarioFamily::CATE_lowdim:
        case ScenarioFamily::CRR: {
            std::uniform_real_distribution<double> u(-1.0, 1.0);
            for (Eigen::Index i = 0; i < n; ++i) {
                for (int k = 0; k < 3; ++k) W(i, k) = u(rng);
            }
            break;
        }
        case ScenarioFamily::CATE_highdim: {
            for (Eigen::Index i = 0; i < n; ++i) W.row(i) = 0.5 * truncated_normal_row(rng).transpose();
            break;
        }
        case ScenarioFamily::INTRO: {
            std::student_t_distribution<double> t(5.0);
            for (Eigen::Index i = 0; i < n; ++i) W(i, 0) = t(rng);
            break;
        }
        }
        return W;
    }

    /// Untruncated proposals drawn so far by the truncated-normal sampler.
    std::uint64_t proposals() const { return proposals_; }
    std::uint64_t accepted() const { return accepted_; }

    /// Oracle nuisances (true pi and mu) shared across all folds.
    NuisanceEstimates oracle_nuisances(int J, double eta = 0.0) const {
        NuisanceEstimates::Fold f;
        const Scenario self = *this;
        f.propensity = [self](const Eigen::MatrixXd& W) { return self.apply(W, [&](const auto& r) { return self.propensity(r); }); };
        f.outcome0 = [self](const Eigen::MatrixXd& W) { return self.apply(W, [&](const auto& r) { return self.mu(0, r); }); };
        f.outcome1 = [self](const Eigen::MatrixXd& W) { return self.apply(W, [&](const auto& r) { return self.mu(1, r); }); };
        return NuisanceEstimates::shared(J, std::move(f), eta);
    }

    Eigen::VectorXd theta(const Eigen::MatrixXd& W) const {
        return apply(W, [&](const auto& r) { return theta(r); });
    }

    template <class F>
    Eigen::VectorXd apply(const Eigen::MatrixXd& W, F f) const {
        Eigen::VectorXd out(W.rows());
        for (Eigen::Index i = 0; i < W.rows(); ++i) {
            const Eigen::RowVectorXd r = W.row(i);
            out[i] = f(r);
        }
        return out;
    }

private:
    template <class Row>
    double crr_baseline(const Row& w) const {
        double s = 0.0;
        for (int k = 0; k < 3; ++k) s += w[k] + std::sin(4.0 * w[k]);
        return expit(-1.0 + 0.3 * s);
    }

    template <class Row>
    double crr_log_ratio(const Row& w) const {
        double s = 0.0;
        for (int k = 0; k < 3; ++k) s += w[k] + (cfg_.complexity == Complexity::complex ? std::sin(4.0 * w[k]) : 0.0);
        return -0.1 + 0.1 * s;
    }

    /// Mean-zero normal with unit variances and 0.4 covariances, conditioned
    /// on every coordinate lying in [-2, 2], by rejection.
    Eigen::VectorXd truncated_normal_row(std::mt19937_64& rng) const {
        std::normal_distribution<double> z(0.0, 1.0);
        Eigen::VectorXd e(chol_.rows());
        for (;;) {
            for (Eigen::Index k = 0; k < e.size(); ++k) e[k] = z(rng);
            Eigen::VectorXd x = chol_ * e;
            ++proposals_;
            if (x.cwiseAbs().maxCoeff() <= 2.0) {
                ++accepted_;
                return x;
            }
        }
    }

    ScenarioConfig cfg_;
    Eigen::MatrixXd chol_;
    mutable std::uint64_t proposals_ = 0;
    mutable std::uint64_t accepted_ = 0;
};

struct SimulatedData {
    Scenario scenario;
    Dataset data;
    /// True contrast at the training rows.
    Eigen::VectorXd theta0;
};

/// Draws n observations: W from the covariate law, A ~ Bernoulli(pi(1 | W)),
/// Y ~ N(mu(A, W), 4) for the CATE designs or Bernoulli(mu(A, W)) otherwise.
inline SimulatedData generate(const ScenarioConfig& cfg) {
    cfg.validate();
    Scenario sc(cfg);
    std::mt19937_64 rng(cfg.seed);
    Eigen::MatrixXd W = sc.draw_covariates(cfg.n, rng);
    Eigen::VectorXi A(cfg.n);
    Eigen::VectorXd Y(cfg.n);
    std::uniform_real_distribution<double> u(0.0, 1.0);
    std::normal_distribution<double> noise(0.0, 2.0);
    for (Eigen::Index i = 0; i < cfg.n; ++i) {
        const Eigen::RowVectorXd w = W.row(i);
        A[i] = u(rng) < sc.propensity(w) ? 1 : 0;
        const double m = sc.mu(A[i], w);
        Y[i] = sc.gaussian_outcome() ? m + noise(rng) : (u(rng) < m ? 1.0 : 0.0);
    }
    Eigen::VectorXd theta0 = sc.theta(W);
    return SimulatedData{sc, Dataset(std::move(W), std::move(A), std::move(Y)), std::move(theta0)};
}

/// Fresh covariate draws from the scenario's covariate law.
inline Eigen::MatrixXd draw_eval_points(const Scenario& sc, Eigen::Index m, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    return sc.draw_covariates(m, rng);
}

/// (1/m) sum_j (theta_hat(w_j) - theta_0(w_j))^2.
inline double mse_against_truth(const Eigen::VectorXd& predicted, const Eigen::VectorXd& truth) {
    if (predicted.size() != truth.size()) fail(ErrorCode::DimensionMismatch, "mse: length mismatch");
    if (predicted.size() == 0) fail(ErrorCode::EmptyData, "mse: no evaluation points");
    return (predicted - truth).squaredNorm() / static_cast<double>(predicted.size());
}

template <class Model>
double mse_against_truth(const Model& model, const Scenario& sc, const Eigen::MatrixXd& eval_points) {
    return mse_against_truth(model.predict(eval_points), sc.theta(eval_points));
}

/// splitmix64 finalizer; used to derive independent per-cell seeds.
inline std::uint64_t mix64(std::uint64_t x) {
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
}

inline std::uint64_t derive_seed(std::uint64_t base, std::initializer_list<std::uint64_t> parts) {
    std::uint64_t h = mix64(base);
    for (const auto p : parts) h = mix64(h ^ mix64(p));
    return h;
}

} // namespace eplearn
