#pragma once

#include <algorithm>
#include <array>
#include <cstdint>
#include <functional>
#include <limits>
#include <memory>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Dense>

#include "eplearn/dataset.hpp"
#include "eplearn/error.hpp"
#include "eplearn/learners.hpp"
#include "eplearn/risk_spec.hpp"

namespace eplearn {

/// Fold labels for J-fold cross-fitting. `fold_of[i]` is 0-based.
struct FoldAssignment {
    int J = 1;
    std::vector<int> fold_of;
    std::uint64_t seed = 0;

    std::size_t n() const { return fold_of.size(); }

    std::vector<Eigen::Index> members(int j) const {
        std::vector<Eigen::Index> out;
        for (std::size_t i = 0; i < fold_of.size(); ++i) {
            if (fold_of[i] == j) out.push_back(static_cast<Eigen::Index>(i));
        }
        return out;
    }

    std::vector<Eigen::Index> complement(int j) const {
        std::vector<Eigen::Index> out;
        for (std::size_t i = 0; i < fold_of.size(); ++i) {
            if (fold_of[i] != j) out.push_back(static_cast<Eigen::Index>(i));
        }
        return out;
    }
};

inline FoldAssignment partition_folds(std::size_t n, int J, std::uint64_t seed) {
    if (J < 1 || static_cast<std::size_t>(J) > n) {
        fail(ErrorCode::BadFoldCount, "fold count " + std::to_string(J) + " outside [1, " + std::to_string(n) + "]");
    }
    return FoldAssignment{J, shuffled_blocks(n, J, seed), seed};
}

/// Nuisance values resolved at the observed rows, each taken from the fold
/// model that did not see that row: pi1[i] = pi_{j(i)}(1 | W_i),
/// mu0[i] = mu_{j(i)}(0, W_i), mu1[i] = mu_{j(i)}(1, W_i).
struct NuisanceRows {
    Eigen::VectorXd pi1;
    Eigen::VectorXd mu0;
    Eigen::VectorXd mu1;

    Eigen::Index size() const { return pi1.size(); }
    double pi(Eigen::Index i, int a) const { return a == 1 ? pi1[i] : 1.0 - pi1[i]; }
    double mu(Eigen::Index i, int a) const { return a == 1 ? mu1[i] : mu0[i]; }
};

struct NuisanceOptions {
    /// Propensities are clamped to [eta, 1 - eta].
    double eta = 0.01;
    /// Outcome-regression clamp used in CRR mode.
    double crr_mu_lo = 1e-3;
    double crr_mu_hi = std::numeric_limits<double>::infinity();
};

using Predictor = std::function<Eigen::VectorXd(const Eigen::MatrixXd&)>;

/// Per-fold propensity and arm-specific outcome predictors with clamping.
class NuisanceEstimates {
public:
    struct Fold {
        Predictor propensity; // returns pi(1 | w)
        Predictor outcome0;
        Predictor outcome1;
    };

    NuisanceEstimates(std::vector<Fold> folds, double eta, std::optional<std::pair<double, double>> mu_clamp)
        : folds_(std::move(folds)), eta_(eta), mu_clamp_(mu_clamp) {
        if (!(eta_ >= 0.0 && eta_ < 0.5)) fail(ErrorCode::InvalidConfig, "eta must lie in [0, 0.5)");
        if (mu_clamp_ && !(mu_clamp_->first > 0.0 && mu_clamp_->first < mu_clamp_->second)) {
            fail(ErrorCode::InvalidConfig, "outcome clamp needs 0 < lo < hi");
        }
    }

    /// The same analytic predictors for every fold (oracle nuisances).
    static NuisanceEstimates shared(int J, Fold fold, double eta,
                                    std::optional<std::pair<double, double>> mu_clamp = std::nullopt) {
        return NuisanceEstimates(std::vector<Fold>(static_cast<std::size_t>(J), std::move(fold)), eta, mu_clamp);
    }

    int fold_count() const { return static_cast<int>(folds_.size()); }
    double eta() const { return eta_; }
    const std::optional<std::pair<double, double>>& mu_clamp() const { return mu_clamp_; }

    Eigen::VectorXd propensity(int j, const Eigen::MatrixXd& W) const {
        Eigen::VectorXd p = fold(j).propensity(W);
        return p.array().max(eta_).min(1.0 - eta_);
    }

    Eigen::VectorXd outcome(int j, int a, const Eigen::MatrixXd& W) const {
        Eigen::VectorXd m = a == 1 ? fold(j).outcome1(W) : fold(j).outcome0(W);
        if (mu_clamp_) m = m.array().max(mu_clamp_->first).min(mu_clamp_->second);
        return m;
    }

    NuisanceRows rows(const Dataset& data, const FoldAssignment& folds) const {
        if (static_cast<Eigen::Index>(folds.n()) != data.n()) {
            fail(ErrorCode::DimensionMismatch, "fold assignment length does not match the dataset");
        }
        NuisanceRows out{Eigen::VectorXd(data.n()), Eigen::VectorXd(data.n()), Eigen::VectorXd(data.n())};
        for (int j = 0; j < folds.J; ++j) {
            const auto idx = folds.members(j);
            if (idx.empty()) continue;
            Eigen::MatrixXd W(static_cast<Eigen::Index>(idx.size()), data.d());
            for (std::size_t r = 0; r < idx.size(); ++r) W.row(static_cast<Eigen::Index>(r)) = data.covariates().row(idx[r]);
            const auto p = propensity(j, W);
            const auto m0 = outcome(j, 0, W);
            const auto m1 = outcome(j, 1, W);
            for (std::size_t r = 0; r < idx.size(); ++r) {
                const auto rr = static_cast<Eigen::Index>(r);
                out.pi1[idx[r]] = p[rr];
                out.mu0[idx[r]] = m0[rr];
                out.mu1[idx[r]] = m1[rr];
            }
        }
        return out;
    }

private:
    const Fold& fold(int j) const {
        if (j < 0 || j >= fold_count()) fail(ErrorCode::BadFoldCount, "fold index out of range");
        return folds_[static_cast<std::size_t>(j)];
    }

    std::vector<Fold> folds_;
    double eta_;
    std::optional<std::pair<double, double>> mu_clamp_;
};

inline Predictor as_predictor(FittedRegressor model) {
    auto shared = std::make_shared<const FittedRegressor>(std::move(model));
    return [shared](const Eigen::MatrixXd& W) { return shared->predict(W); };
}

inline std::optional<std::pair<double, double>> outcome_clamp_for(const RiskSpec& spec, const NuisanceOptions& opt) {
    if (spec.family != Family::CRR) return std::nullopt;
    return std::make_pair(opt.crr_mu_lo, opt.crr_mu_hi);
}

namespace detail {

inline std::pair<Eigen::MatrixXd, Eigen::VectorXd> gather(const Dataset& data, const std::vector<Eigen::Index>& rows,
                                                          bool treatment_as_y) {
    Eigen::MatrixXd W(static_cast<Eigen::Index>(rows.size()), data.d());
    Eigen::VectorXd y(static_cast<Eigen::Index>(rows.size()));
    for (std::size_t r = 0; r < rows.size(); ++r) {
        const auto rr = static_cast<Eigen::Index>(r);
        W.row(rr) = data.covariates().row(rows[r]);
        y[rr] = treatment_as_y ? static_cast<double>(data.a(rows[r])) : data.y(rows[r]);
    }
    return {std::move(W), std::move(y)};
}

} // namespace detail

/// Fits pi_j on the rows outside fold j by regressing A on W, and mu_j(a, .)
/// on the treated (a = 1) or control (a = 0) rows outside fold j, with
/// `out_cfg[a]` as the learner for arm a.
inline NuisanceEstimates fit_nuisances(const Dataset& data, const FoldAssignment& folds, const LearnerConfig& prop_cfg,
                                       const std::array<LearnerConfig, 2>& out_cfg, const RiskSpec& spec,
                                       const NuisanceOptions& opt = {}) {
    if (static_cast<Eigen::Index>(folds.n()) != data.n()) {
        fail(ErrorCode::DimensionMismatch, "fold assignment length does not match the dataset");
    }
    const LearnerConfig prop = prop_cfg.with_link(Link::logit);
    std::vector<NuisanceEstimates::Fold> fitted;
    fitted.reserve(static_cast<std::size_t>(folds.J));
    for (int j = 0; j < folds.J; ++j) {
        const std::string where = "fold " + std::to_string(j + 1);
        try {
            auto train = folds.J == 1 ? folds.members(0) : folds.complement(j);
            auto [W, A] = detail::gather(data, train, true);
            NuisanceEstimates::Fold f;
            f.propensity = as_predictor(fit_learner(prop, W, A));
            for (int a = 0; a < 2; ++a) {
                std::vector<Eigen::Index> arm;
                for (const auto i : train) {
                    if (data.a(i) == a) arm.push_back(i);
                }
                if (arm.empty()) {
                    fail(ErrorCode::EmptyData, "no rows with a = " + std::to_string(a) + " in the training folds");
                }
                auto [Wa, Ya] = detail::gather(data, arm, false);
                (a == 1 ? f.outcome1 : f.outcome0) = as_predictor(fit_learner(out_cfg[static_cast<std::size_t>(a)], Wa, Ya));
            }
            fitted.push_back(std::move(f));
        } catch (const Error& e) {
            throw Error(e.code(), where + ": " + e.what());
        }
    }
    return NuisanceEstimates(std::move(fitted), opt.eta, outcome_clamp_for(spec, opt));
}

inline NuisanceEstimates fit_nuisances(const Dataset& data, const FoldAssignment& folds, const LearnerConfig& prop_cfg,
                                       const LearnerConfig& out_cfg, const RiskSpec& spec,
                                       const NuisanceOptions& opt = {}) {
    return fit_nuisances(data, folds, prop_cfg, {out_cfg, out_cfg}, spec, opt);
}

/// Outcome-regression link used for tuned nuisances: logit when the risk
/// declares [0, 1] outcomes and the data respect it.
inline Link outcome_link(const Dataset& data, const RiskSpec& spec) {
    return spec.unit_outcomes() && data.outcome_in_unit_interval() ? Link::logit : Link::identity;
}

/// Candidate outcome learners for tuned nuisances: boosted trees tuned along
/// the boosting path, Gaussian-kernel smoothers and additive cosine-series
/// regressions.
struct NuisanceLibrary {
    BoostingGrid boosting;
    std::vector<double> bandwidths{0.1, 0.2, 0.4, 0.8};
    std::vector<int> series{1, 2, 3, 4, 5, 6, 7, 8, 9, 10};
    int folds = 5;
};

/// Per-arm outcome learner chosen by cross-validation on all rows of that arm.
inline std::array<LearnerConfig, 2> tune_outcome_learners(const Dataset& data, const RiskSpec& spec,
                                                          const NuisanceLibrary& lib, std::uint64_t seed) {
    std::array<LearnerConfig, 2> out;
    const Link link = outcome_link(data, spec);
    for (int a = 0; a < 2; ++a) {
        std::vector<Eigen::Index> arm;
        for (Eigen::Index i = 0; i < data.n(); ++i) {
            if (data.a(i) == a) arm.push_back(i);
        }
        if (arm.size() < 2) fail(ErrorCode::EmptyData, "fewer than two rows with a = " + std::to_string(a));
        auto [W, Y] = detail::gather(data, arm, false);
        const Eigen::VectorXd ones = Eigen::VectorXd::Ones(Y.size());
        const int folds = std::min<int>(lib.folds, static_cast<int>(Y.size()));
        const std::uint64_t arm_seed = seed + static_cast<std::uint64_t>(a);
        const auto boosted = cv_tune_boosting(lib.boosting, W, Y, ones, link, folds, arm_seed);
        LearnerConfig best = boosted.config;
        std::vector<LearnerConfig> others;
        for (const double h : lib.bandwidths) others.push_back(kernel_config(h).with_link(link));
        for (const int k : lib.series) others.push_back(series_config(k).with_link(link));
        if (!others.empty()) {
            const auto sel = cv_select_detailed(others, W, CvTargets{Y, ones, Y, ones}, folds, arm_seed, true);
            if (sel.criterion[sel.index] < boosted.criterion) best = others[sel.index];
        }
        out[static_cast<std::size_t>(a)] = best;
    }
    return out;
}

} // namespace eplearn
