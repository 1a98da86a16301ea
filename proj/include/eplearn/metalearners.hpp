#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Dense>

#include "eplearn/crossfit.hpp"
#include "eplearn/dataset.hpp"
#include "eplearn/error.hpp"
#include "eplearn/learners.hpp"
#include "eplearn/risk.hpp"
#include "eplearn/risk_spec.hpp"
#include "eplearn/sieve.hpp"

namespace eplearn {

enum class Method { T, DR, R, IPW_E, EP, CV_EP, KNN_EP };

inline std::string to_string(Method m) {
    switch (m) {
    case Method::T: return "t";
    case Method::DR: return "dr";
    case Method::R: return "r";
    case Method::IPW_E: return "ipw_e";
    case Method::EP: return "ep";
    case Method::CV_EP: return "cv_ep";
    case Method::KNN_EP: return "knn_ep";
    }
    return "unknown";
}

inline Method parse_method(const std::string& text) {
    for (auto m : {Method::T, Method::DR, Method::R, Method::IPW_E, Method::EP, Method::CV_EP, Method::KNN_EP}) {
        if (text == to_string(m)) return m;
    }
    fail(ErrorCode::InvalidConfig, "unknown method '" + text + "' (expected t, dr, r, ipw_e, ep, cv_ep, knn_ep)");
}

/// Candidate second-stage learners. With more than one candidate the choice
/// is made by cross-validation on the orthogonal loss.
struct Stage2Options {
    std::vector<LearnerConfig> grid{boosted_config(2)};
    int cv_folds = 10;
    std::uint64_t seed = 0;
    /// Clip CATE predictions to [-1, 1] when the training outcome is binary.
    bool truncate = false;
};

struct EpOptions {
    /// Defaults to method 1 for [0, 1] outcome ranges, method 2 otherwise.
    std::optional<DebiasMethod> method;
    /// Defaults to the simplified features for the CATE risk.
    std::optional<bool> simplified;
    double ridge = 1e-8;
    /// Debiased CRR regressions are clamped to [crr_mu_lo, crr_mu_hi].
    double crr_mu_lo = 1e-3;
    double crr_mu_hi = std::numeric_limits<double>::infinity();

    DebiasOptions resolve(const RiskSpec& spec) const {
        DebiasOptions o;
        o.method = method.value_or(default_debias_method(spec));
        o.simplified = simplified.value_or(spec.family == Family::CATE);
        o.ridge = ridge;
        return o;
    }
};

inline constexpr double score_residual_warning = 1e-4;

class ContrastModel {
public:
    Method method = Method::EP;
    Family family = Family::CATE;
    Eigen::Index dim = 0;
    /// T-learner: {mu(0, .), mu(1, .)}; every other method: {theta}.
    std::vector<FittedRegressor> stages;
    LearnerConfig stage2;
    bool truncated = false;
    double lower = -1.0;
    double upper = 1.0;
    /// T-learner CRR: outcome predictions are clamped before taking logs.
    std::optional<std::pair<double, double>> mu_clamp;
    /// EP variants: sieve frequencies used, the candidate grid and the
    /// per-k cross-validation criterion.
    int k = -1;
    std::vector<int> k_grid;
    std::vector<double> cv_criterion;
    double score_residual = std::numeric_limits<double>::quiet_NaN();
    Eigen::Index negative_weight_count = 0;
    Eigen::Index outside_unit_count = 0;
    std::uint64_t seed = 0;
    std::vector<std::string> warnings;

    Eigen::VectorXd predict(const Eigen::MatrixXd& W) const {
        if (W.cols() != dim) {
            fail(ErrorCode::DimensionMismatch, "predict: query has " + std::to_string(W.cols()) +
                                                   " columns, model expects " + std::to_string(dim));
        }
        if (stages.empty()) fail(ErrorCode::InvalidConfig, "predict: model has no fitted stages");
        Eigen::VectorXd out;
        if (method == Method::T) {
            Eigen::VectorXd m0 = stages.at(0).predict(W);
            Eigen::VectorXd m1 = stages.at(1).predict(W);
            if (family == Family::CRR) {
                if (mu_clamp) {
                    m0 = m0.array().max(mu_clamp->first).min(mu_clamp->second);
                    m1 = m1.array().max(mu_clamp->first).min(mu_clamp->second);
                }
                out = m1.array().log() - m0.array().log();
            } else {
                out = m1 - m0;
            }
        } else if (family == Family::CRR) {
            out = stages.front().predict_link(W);
        } else {
            out = stages.front().predict(W);
        }
        if (truncated) out = out.array().max(lower).min(upper);
        return out;
    }
};

inline Eigen::VectorXd predict_contrast(const ContrastModel& model, const Eigen::MatrixXd& W) {
    return model.predict(W);
}

namespace detail {

inline Eigen::MatrixXd rows_of(const Eigen::MatrixXd& X, const std::vector<Eigen::Index>& rows) {
    Eigen::MatrixXd out(static_cast<Eigen::Index>(rows.size()), X.cols());
    for (std::size_t r = 0; r < rows.size(); ++r) out.row(static_cast<Eigen::Index>(r)) = X.row(rows[r]);
    return out;
}

inline Eigen::VectorXd rows_of(const Eigen::VectorXd& v, const std::vector<Eigen::Index>& rows) {
    Eigen::VectorXd out(static_cast<Eigen::Index>(rows.size()));
    for (std::size_t r = 0; r < rows.size(); ++r) out[static_cast<Eigen::Index>(r)] = v[rows[r]];
    return out;
}

inline std::vector<LearnerConfig> linked_grid(const Stage2Options& opt, Link link) {
    if (opt.grid.empty()) fail(ErrorCode::InvalidConfig, "empty second-stage learner grid");
    std::vector<LearnerConfig> out;
    for (const auto& c : opt.grid) out.push_back(c.with_link(link));
    return out;
}

struct Stage2Fit {
    FittedRegressor model;
    LearnerConfig config;
};

/// Chooses among the candidates by cross-validation (training on
/// `t.train_*`, scoring on `t.eval_*`), then refits on all rows.
inline Stage2Fit fit_stage2(const Stage2Options& opt, const Eigen::MatrixXd& W, const CvTargets& t, Link link) {
    const auto grid = linked_grid(opt, link);
    std::size_t pick = 0;
    if (grid.size() > 1) {
        const int folds = std::min<int>(opt.cv_folds, static_cast<int>(W.rows()));
        pick = cv_select_detailed(grid, W, t, folds, opt.seed).index;
    }
    return {fit_learner(grid[pick], W, t.train_y, t.train_w), grid[pick]};
}

inline bool apply_truncation(const Stage2Options& opt, const Dataset& data, const RiskSpec& spec) {
    return opt.truncate && spec.family == Family::CATE && data.outcome_binary();
}

inline ContrastModel base_model(Method method, const RiskSpec& spec, const Dataset& data, const Stage2Options& opt) {
    ContrastModel m;
    m.method = method;
    m.family = spec.family;
    m.dim = data.d();
    m.seed = opt.seed;
    m.truncated = apply_truncation(opt, data, spec);
    return m;
}

inline void require_family(const RiskSpec& spec, Family f, const char* who) {
    if (spec.family != f) {
        fail(ErrorCode::Unsupported, std::string(who) + " is only defined for the " + to_string(f) + " contrast");
    }
}

} // namespace detail

/// T-learner: arm-specific outcome regressions on the full sample;
/// theta = mu(1, .) - mu(0, .) (CATE) or log mu(1, .) - log mu(0, .) (CRR).
inline ContrastModel fit_t_learner(const Dataset& data, const RiskSpec& spec, const Stage2Options& opt,
                                   const NuisanceOptions& clamp = {}) {
    auto model = detail::base_model(Method::T, spec, data, opt);
    const Link link = spec.family == Family::CRR ? Link::logit : Link::identity;
    for (int a = 0; a < 2; ++a) {
        std::vector<Eigen::Index> arm;
        for (Eigen::Index i = 0; i < data.n(); ++i) {
            if (data.a(i) == a) arm.push_back(i);
        }
        if (arm.empty()) fail(ErrorCode::EmptyData, "T-learner: no rows with a = " + std::to_string(a));
        const Eigen::MatrixXd W = detail::rows_of(data.covariates(), arm);
        const Eigen::VectorXd y = detail::rows_of(data.outcome(), arm);
        const Eigen::VectorXd ones = Eigen::VectorXd::Ones(y.size());
        auto fit = detail::fit_stage2(opt, W, CvTargets{y, ones, y, ones}, link);
        model.stages.push_back(std::move(fit.model));
        model.stage2 = fit.config;
    }
    if (spec.family == Family::CRR) model.mu_clamp = std::make_pair(clamp.crr_mu_lo, clamp.crr_mu_hi);
    return model;
}

/// DR-learner: regression of the doubly robust pseudo-outcome on W.
inline ContrastModel fit_dr_learner(const Dataset& data, const NuisanceRows& nuis, const RiskSpec& spec,
                                    const Stage2Options& opt) {
    detail::require_family(spec, Family::CATE, "DR-learner");
    auto model = detail::base_model(Method::DR, spec, data, opt);
    const Eigen::VectorXd chi = dr_pseudo_outcomes(data, nuis);
    const Eigen::VectorXd ones = Eigen::VectorXd::Ones(data.n());
    auto fit = detail::fit_stage2(opt, data.covariates(), CvTargets{chi, ones, chi, ones}, Link::identity);
    model.stages.push_back(std::move(fit.model));
    model.stage2 = fit.config;
    return model;
}

/// R-learner: residual-on-residual regression, pseudo-outcome
/// (Y - m(W)) / (A - pi(1 | W)) with weight (A - pi(1 | W))^2 and
/// m = pi(1 | W) mu(1, W) + (1 - pi(1 | W)) mu(0, W).
inline ContrastModel fit_r_learner(const Dataset& data, const NuisanceRows& nuis, const RiskSpec& spec,
                                   const Stage2Options& opt) {
    detail::require_family(spec, Family::CATE, "R-learner");
    auto model = detail::base_model(Method::R, spec, data, opt);
    Eigen::VectorXd y(data.n()), w(data.n());
    for (Eigen::Index i = 0; i < data.n(); ++i) {
        const double p = nuis.pi1[i];
        const double m = p * nuis.mu1[i] + (1.0 - p) * nuis.mu0[i];
        const double r = data.a(i) - p;
        y[i] = (data.y(i) - m) / r;
        w[i] = r * r;
    }
    auto fit = detail::fit_stage2(opt, data.covariates(), CvTargets{y, w, y, w}, Link::identity);
    model.stages.push_back(std::move(fit.model));
    model.stage2 = fit.config;
    return model;
}

/// IPW E-learner for the log relative risk: logit-link regression of A on W
/// with weight Y / pi(A | W).
inline ContrastModel fit_ipw_elearner(const Dataset& data, const NuisanceRows& nuis, const RiskSpec& spec,
                                      const Stage2Options& opt) {
    detail::require_family(spec, Family::CRR, "IPW E-learner");
    auto model = detail::base_model(Method::IPW_E, spec, data, opt);
    Eigen::VectorXd y(data.n()), w(data.n());
    for (Eigen::Index i = 0; i < data.n(); ++i) {
        if (data.y(i) < 0.0) {
            fail(ErrorCode::MethodOutcomeMismatch,
                 "IPW E-learner needs nonnegative outcomes; row " + std::to_string(i + 1));
        }
        const int a = data.a(i);
        y[i] = a;
        w[i] = data.y(i) / nuis.pi(i, a);
    }
    if (!(w.sum() > 0.0)) fail(ErrorCode::AllZeroWeights, "IPW E-learner: every pseudo-weight is zero");
    model.negative_weight_count = 0;
    auto fit = detail::fit_stage2(opt, data.covariates(), CvTargets{y, w, y, w}, Link::logit);
    model.stages.push_back(std::move(fit.model));
    model.stage2 = fit.config;
    return model;
}

/// Second-stage inputs produced by the sieve debiasing step.
struct EpTargets {
    DebiasResult debias;
    Eigen::VectorXd target;
    Eigen::VectorXd weight;
    PseudoRegression crr; // CRR only
};

namespace detail {

inline EpTargets ep_targets(const Dataset& data, const NuisanceRows& nuis, const RiskSpec& spec,
                            const Eigen::MatrixXd& phi, const EpOptions& opt,
                            const std::vector<Eigen::Index>& subset = {}) {
    EpTargets t;
    t.debias = debias_outcome_regression(data, nuis, spec, phi, opt.resolve(spec), subset);
    if (spec.family == Family::CATE) {
        t.target = t.debias.mu_star1 - t.debias.mu_star0;
        t.weight = Eigen::VectorXd::Ones(data.n());
    } else {
        const Eigen::VectorXd m0 = t.debias.mu_star0.array().max(opt.crr_mu_lo).min(opt.crr_mu_hi);
        const Eigen::VectorXd m1 = t.debias.mu_star1.array().max(opt.crr_mu_lo).min(opt.crr_mu_hi);
        t.crr = crr_ep_pseudo(m0, m1);
        t.target = t.crr.outcome;
        t.weight = t.crr.weight;
    }
    return t;
}

/// Evaluation targets under which the stage-2 CV loss equals the one-step
/// loss up to a per-row constant: chi for CATE, the DR pseudo-pairs for CRR.
inline std::pair<Eigen::VectorXd, Eigen::VectorXd> orthogonal_eval(const Dataset& data, const NuisanceRows& nuis,
                                                                   const RiskSpec& spec) {
    if (spec.family == Family::CATE) return {dr_pseudo_outcomes(data, nuis), Eigen::VectorXd::Ones(data.n())};
    auto dr = crr_dr_pseudo(data, nuis);
    return {dr.outcome, dr.weight};
}

inline Link contrast_link(const RiskSpec& spec) { return spec.family == Family::CRR ? Link::logit : Link::identity; }

inline void note_score_residual(ContrastModel& model) {
    if (model.score_residual > score_residual_warning) {
        model.warnings.push_back("ScoreResidualTooLarge: score equation residual " +
                                 std::to_string(model.score_residual) + " exceeds 1e-4");
    }
}

} // namespace detail

/// EP-learner at a fixed number of sieve frequencies per covariate.
inline ContrastModel fit_ep_learner(const Dataset& data, const NuisanceRows& nuis, const RiskSpec& spec, int k,
                                    const EpOptions& ep, const Stage2Options& opt) {
    auto model = detail::base_model(Method::EP, spec, data, opt);
    const CosineBasis basis = CosineBasis::fit(data.covariates(), k);
    const EpTargets t = detail::ep_targets(data, nuis, spec, basis.features(data.covariates()), ep);
    const auto [eval_y, eval_w] = detail::orthogonal_eval(data, nuis, spec);
    auto fit = detail::fit_stage2(opt, data.covariates(), CvTargets{t.target, t.weight, eval_y, eval_w},
                                  detail::contrast_link(spec));
    model.stages.push_back(std::move(fit.model));
    model.stage2 = fit.config;
    model.k = k;
    model.k_grid = {k};
    model.score_residual = t.debias.score_residual;
    model.negative_weight_count = t.crr.negative_weight_count;
    model.outside_unit_count = t.crr.outside_unit_count;
    detail::note_score_residual(model);
    return model;
}

/// Cross-validated EP-learner. The stage-2 learner is chosen once, by
/// cross-validation of the EP fit at the smallest k of the grid. Then for
/// every k and every fold j: debias using the rows outside fold j, fit the
/// second stage on those rows, and score fold j with the one-step loss under
/// the original cross-fitted nuisances. The k with the smallest average loss
/// wins (ties: smaller k) and is refitted on all rows.
inline ContrastModel fit_ep_learner_cv(const Dataset& data, const FoldAssignment& folds, const NuisanceRows& nuis,
                                       const RiskSpec& spec, const std::vector<int>& k_grid, const EpOptions& ep,
                                       const Stage2Options& opt) {
    if (k_grid.empty()) fail(ErrorCode::InvalidConfig, "empty sieve frequency grid");
    if (static_cast<Eigen::Index>(folds.n()) != data.n()) {
        fail(ErrorCode::DimensionMismatch, "fold assignment length does not match the dataset");
    }
    const Link link = detail::contrast_link(spec);
    auto grid = detail::linked_grid(opt, link);
    if (grid.size() > 1) {
        const int k_ref = *std::min_element(k_grid.begin(), k_grid.end());
        grid = {fit_ep_learner(data, nuis, spec, k_ref, ep, opt).stage2};
    }
    const LearnerConfig stage2 = grid.front();

    std::vector<double> crit(k_grid.size(), 0.0);
    if (k_grid.size() > 1 && folds.J >= 2) {
        for (std::size_t kk = 0; kk < k_grid.size(); ++kk) {
            const CosineBasis basis = CosineBasis::fit(data.covariates(), k_grid[kk]);
            const Eigen::MatrixXd phi = basis.features(data.covariates());
            for (int j = 0; j < folds.J; ++j) {
                const auto train = folds.complement(j);
                const auto test = folds.members(j);
                if (test.empty()) continue;
                const EpTargets t = detail::ep_targets(data, nuis, spec, phi, ep, train);
                const auto fit = fit_learner(stage2, detail::rows_of(data.covariates(), train),
                                             detail::rows_of(t.target, train), detail::rows_of(t.weight, train));
                const Eigen::MatrixXd Wte = detail::rows_of(data.covariates(), test);
                const Eigen::VectorXd theta = link == Link::logit ? fit.predict_link(Wte) : fit.predict(Wte);
                double s = 0.0;
                for (std::size_t r = 0; r < test.size(); ++r) {
                    const auto i = test[r];
                    const int a = data.a(i);
                    s += onestep_loss(spec, a, data.y(i), nuis.pi(i, a), nuis.mu0[i], nuis.mu1[i],
                                      theta[static_cast<Eigen::Index>(r)]);
                }
                crit[kk] += s;
            }
            crit[kk] /= static_cast<double>(data.n());
        }
    }

    std::size_t best = 0;
    for (std::size_t kk = 1; kk < k_grid.size(); ++kk) {
        if (crit[kk] < crit[best] || (crit[kk] == crit[best] && k_grid[kk] < k_grid[best])) best = kk;
    }

    Stage2Options refit = opt;
    refit.grid = {stage2};
    auto model = fit_ep_learner(data, nuis, spec, k_grid[best], ep, refit);
    model.method = Method::CV_EP;
    model.k_grid = k_grid;
    model.cv_criterion = crit;
    return model;
}

/// k-NN EP-learner: debias at `k` frequencies, then average the debiased
/// contrast mu*(1, W_i) - mu*(0, W_i) over the K nearest training points.
inline ContrastModel fit_knn_ep_learner(const Dataset& data, const NuisanceRows& nuis, const RiskSpec& spec, int k,
                                        int neighbors, const EpOptions& ep, const Stage2Options& opt = {}) {
    detail::require_family(spec, Family::CATE, "k-NN EP-learner");
    if (neighbors < 1 || neighbors > data.n()) {
        fail(ErrorCode::KTooLarge, "k-NN EP-learner: K = " + std::to_string(neighbors) + " outside [1, " +
                                       std::to_string(data.n()) + "]");
    }
    auto model = detail::base_model(Method::KNN_EP, spec, data, opt);
    const CosineBasis basis = CosineBasis::fit(data.covariates(), k);
    const EpTargets t = detail::ep_targets(data, nuis, spec, basis.features(data.covariates()), ep);
    model.stage2 = knn_config(neighbors);
    model.stages.push_back(fit_knn(data.covariates(), t.target, neighbors));
    model.k = k;
    model.k_grid = {k};
    model.score_residual = t.debias.score_residual;
    detail::note_score_residual(model);
    return model;
}

} // namespace eplearn
