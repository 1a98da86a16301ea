#include <algorithm>
#include <cmath>
#include <random>

#include <gtest/gtest.h>

#include "eplearn/metalearners.hpp"
#include "eplearn/simulation.hpp"
#include "test_util.hpp"

using namespace eplearn;
using eplearn::testing::random_dataset;
using eplearn::testing::random_nuisances;

namespace {

ErrorCode code_of(const std::function<void()>& f) {
    try {
        f();
    } catch (const Error& e) {
        return e.code();
    }
    ADD_FAILURE() << "expected an eplearn::Error";
    return ErrorCode::InvalidConfig;
}

Stage2Options single(const LearnerConfig& c, bool truncate = false) {
    Stage2Options o;
    o.grid = {c};
    o.truncate = truncate;
    return o;
}

NuisanceRows truth_rows(const Scenario& sc, const Eigen::MatrixXd& W) {
    NuisanceRows r{Eigen::VectorXd(W.rows()), Eigen::VectorXd(W.rows()), Eigen::VectorXd(W.rows())};
    for (Eigen::Index i = 0; i < W.rows(); ++i) {
        const Eigen::RowVectorXd w = W.row(i);
        r.pi1[i] = sc.propensity(w);
        r.mu0[i] = sc.mu(0, w);
        r.mu1[i] = sc.mu(1, w);
    }
    return r;
}

// Simulated covariates and treatments with the outcome replaced by its
// conditional mean, so every residual is zero.
SimulatedData noiseless(ScenarioFamily family, Eigen::Index n, std::uint64_t seed) {
    ScenarioConfig cfg;
    cfg.family = family;
    cfg.complexity = Complexity::complex;
    cfg.n = n;
    cfg.seed = seed;
    auto sim = generate(cfg);
    Eigen::VectorXd Y(n);
    for (Eigen::Index i = 0; i < n; ++i) {
        const Eigen::RowVectorXd w = sim.data.covariates().row(i);
        Y[i] = sim.scenario.mu(sim.data.a(i), w);
    }
    sim.data = sim.data.with_outcome(Y);
    return sim;
}

} // namespace

TEST(TLearner, EqualArmsGiveZeroContrast) {
    const Dataset data = random_dataset(60, 2, 1).with_outcome(Eigen::VectorXd::Constant(60, 2.5));
    for (const auto& c : {boosted_config(2), knn_config(3), linear_config()}) {
        const auto m = fit_t_learner(data, cate_risk_spec(), single(c));
        EXPECT_LE(m.predict(data.covariates()).cwiseAbs().maxCoeff(), 1e-8) << c.label();
    }
}

TEST(TLearner, DoubledRiskGivesLogTwo) {
    const Dataset base = random_dataset(60, 2, 2, true);
    Eigen::VectorXd Y(60);
    for (Eigen::Index i = 0; i < 60; ++i) Y[i] = base.a(i) == 1 ? 0.4 : 0.2;
    const auto m = fit_t_learner(base.with_outcome(Y), crr_risk_spec(), single(knn_config(4)));
    const Eigen::VectorXd p = m.predict(base.covariates());
    EXPECT_LE((p.array() - std::log(2.0)).abs().maxCoeff(), 1e-12);
}

TEST(TLearner, Deterministic) {
    const Dataset data = random_dataset(120, 2, 3);
    Stage2Options opt;
    opt.grid = {boosted_config(1), boosted_config(3)};
    opt.cv_folds = 5;
    opt.seed = 7;
    const auto a = fit_t_learner(data, cate_risk_spec(), opt).predict(data.covariates());
    const auto b = fit_t_learner(data, cate_risk_spec(), opt).predict(data.covariates());
    EXPECT_EQ(a, b);
}

TEST(DrLearner, TruncatesBinaryOutcomes) {
    const Dataset data = random_dataset(200, 2, 4, true);
    const auto nuis = random_nuisances(200, 5);
    const auto m = fit_dr_learner(data, nuis, cate_risk_spec(), single(knn_config(1), true));
    EXPECT_TRUE(m.truncated);
    const Eigen::VectorXd p = m.predict(data.covariates());
    EXPECT_GE(p.minCoeff(), -1.0);
    EXPECT_LE(p.maxCoeff(), 1.0);
    // The untruncated fit interpolates pseudo-outcomes far outside [-1, 1].
    const auto raw = fit_dr_learner(data, nuis, cate_risk_spec(), single(knn_config(1)));
    EXPECT_GT(raw.predict(data.covariates()).cwiseAbs().maxCoeff(), 1.0);
    EXPECT_EQ(code_of([&] { fit_dr_learner(data, nuis, crr_risk_spec(), single(knn_config(1))); }),
              ErrorCode::Unsupported);
}

TEST(DrLearner, IntroDesignHasExtremePseudoOutcomes) {
    int extreme = 0;
    for (std::uint64_t seed = 0; seed < 20; ++seed) {
        ScenarioConfig cfg;
        cfg.family = ScenarioFamily::INTRO;
        cfg.n = 1500;
        cfg.seed = seed;
        const auto sim = generate(cfg);
        const auto folds = partition_folds(1500, 5, seed);
        const auto spec = sim.scenario.risk_spec();
        const auto rows = fit_nuisances(sim.data, folds, linear_config(), boosted_config(2).with_link(Link::logit), spec)
                              .rows(sim.data, folds);
        if (dr_pseudo_outcomes(sim.data, rows).cwiseAbs().maxCoeff() > 5.0) ++extreme;
    }
    EXPECT_GE(extreme, 16);
}

TEST(RLearner, ConstantEffectRecovered) {
    std::mt19937_64 rng(6);
    std::uniform_real_distribution<double> u(-1.0, 1.0), p(0.2, 0.8);
    const Eigen::Index n = 80;
    const double tau = 0.7;
    Eigen::MatrixXd W(n, 2);
    Eigen::VectorXi A(n);
    Eigen::VectorXd Y(n);
    NuisanceRows nuis{Eigen::VectorXd(n), Eigen::VectorXd(n), Eigen::VectorXd(n)};
    for (Eigen::Index i = 0; i < n; ++i) {
        W(i, 0) = u(rng);
        W(i, 1) = u(rng);
        nuis.pi1[i] = p(rng);
        A[i] = u(rng) > 0 ? 1 : 0;
        const double m = std::sin(3 * W(i, 0)) + W(i, 1);
        Y[i] = m + (A[i] - nuis.pi1[i]) * tau;
        nuis.mu0[i] = m - nuis.pi1[i] * tau;
        nuis.mu1[i] = m + (1.0 - nuis.pi1[i]) * tau;
    }
    const Dataset data(W, A, Y);
    const auto m = fit_r_learner(data, nuis, cate_risk_spec(), single(knn_config(1)));
    EXPECT_LE((m.predict(W).array() - tau).abs().maxCoeff(), 1e-12);
}

TEST(RLearner, ConstantStageIsWeightedMean) {
    const Dataset data = random_dataset(50, 2, 7);
    const auto nuis = random_nuisances(50, 8);
    double num = 0.0, den = 0.0;
    for (Eigen::Index i = 0; i < 50; ++i) {
        const double p = nuis.pi1[i];
        const double r = data.a(i) - p;
        const double y = (data.y(i) - p * nuis.mu1[i] - (1 - p) * nuis.mu0[i]) / r;
        EXPECT_GT(r * r, 0.0);
        EXPECT_LT(r * r, 1.0);
        num += r * r * y;
        den += r * r;
    }
    const auto m = fit_r_learner(data, nuis, cate_risk_spec(), single(knn_config(50)));
    const Eigen::VectorXd pred = m.predict(data.covariates());
    EXPECT_LE((pred.array() - num / den).abs().maxCoeff(), 1e-12);
}

TEST(IpwELearner, RejectsDegenerateInputs) {
    const Dataset data = random_dataset(40, 2, 9, true);
    const auto nuis = random_nuisances(40, 10);
    EXPECT_EQ(code_of([&] { fit_ipw_elearner(data.with_outcome(Eigen::VectorXd::Zero(40)), nuis, crr_risk_spec(), single(linear_config())); }),
              ErrorCode::AllZeroWeights);
    EXPECT_EQ(code_of([&] { fit_ipw_elearner(data, nuis, cate_risk_spec(), single(linear_config())); }),
              ErrorCode::Unsupported);
}

TEST(IpwELearner, ConsistentUnderRandomization) {
    ScenarioConfig cfg;
    cfg.family = ScenarioFamily::CRR;
    const Scenario sc(cfg);
    const Eigen::MatrixXd eval = draw_eval_points(sc, 4000, 99);
    const Eigen::VectorXd truth = sc.theta(eval);
    std::vector<double> mse_small, mse_large;
    for (std::uint64_t seed = 0; seed < 10; ++seed) {
        for (Eigen::Index n : {1000, 4000}) {
            std::mt19937_64 rng(seed * 31 + static_cast<std::uint64_t>(n));
            std::uniform_real_distribution<double> u(0.0, 1.0);
            const Eigen::MatrixXd W = sc.draw_covariates(n, rng);
            Eigen::VectorXi A(n);
            Eigen::VectorXd Y(n);
            for (Eigen::Index i = 0; i < n; ++i) {
                const Eigen::RowVectorXd w = W.row(i);
                A[i] = u(rng) < 0.5 ? 1 : 0;
                Y[i] = u(rng) < sc.mu(A[i], w) ? 1.0 : 0.0;
            }
            const Dataset data(W, A, Y);
            const NuisanceRows nuis{Eigen::VectorXd::Constant(n, 0.5), Eigen::VectorXd::Zero(n), Eigen::VectorXd::Zero(n)};
            const auto m = fit_ipw_elearner(data, nuis, crr_risk_spec(), single(linear_config()));
            (n == 1000 ? mse_small : mse_large).push_back(mse_against_truth(m.predict(eval), truth));
        }
    }
    EXPECT_LT(empirical_quantile(mse_large, 0.5), empirical_quantile(mse_small, 0.5));
}

TEST(EpLearner, NoSieveIsPluginContrast) {
    const Dataset data = random_dataset(70, 2, 11);
    const auto nuis = random_nuisances(70, 12);
    const auto m = fit_ep_learner(data, nuis, cate_risk_spec(), 0, EpOptions{}, single(knn_config(1)));
    EXPECT_LE((m.predict(data.covariates()) - (nuis.mu1 - nuis.mu0)).cwiseAbs().maxCoeff(), 1e-15);
    EXPECT_EQ(m.k, 0);
    EXPECT_EQ(m.score_residual, 0.0);
}

TEST(EpLearner, InterpolatesDebiasedContrast) {
    const Dataset data = random_dataset(90, 2, 13);
    const auto nuis = random_nuisances(90, 14);
    const auto spec = cate_risk_spec();
    EpOptions ep;
    ep.ridge = 0.0;
    const auto m = fit_ep_learner(data, nuis, spec, 3, ep, single(knn_config(1)));
    const auto res = debias_outcome_regression(data, nuis, spec, cosine_basis(data, 3).features(data.covariates()),
                                               ep.resolve(spec));
    EXPECT_LE((m.predict(data.covariates()) - (res.mu_star1 - res.mu_star0)).cwiseAbs().maxCoeff(), 1e-12);
    EXPECT_EQ(m.score_residual, res.score_residual);
    EXPECT_TRUE(m.warnings.empty());
}

TEST(EpLearner, CrrSecondStageInputsAlwaysValid) {
    for (auto overlap : {Overlap::moderate, Overlap::limited}) {
        ScenarioConfig cfg;
        cfg.family = ScenarioFamily::CRR;
        cfg.overlap = overlap;
        cfg.n = 800;
        cfg.seed = 15;
        const auto sim = generate(cfg);
        const auto folds = partition_folds(800, 5, 1);
        const auto spec = sim.scenario.risk_spec();
        const auto rows = fit_nuisances(sim.data, folds, linear_config(), linear_config(Link::logit), spec)
                              .rows(sim.data, folds);
        const auto m = fit_ep_learner(sim.data, rows, spec, 3, EpOptions{}, single(boosted_config(2)));
        EXPECT_EQ(m.negative_weight_count, 0);
        EXPECT_EQ(m.outside_unit_count, 0);
        EXPECT_TRUE(m.predict(sim.data.covariates()).allFinite());
    }
}

TEST(MetalearnerProperty, OracleNuisancesRecoverTruthAtTrainingPoints) {
    const auto sim = noiseless(ScenarioFamily::CATE_lowdim, 300, 16);
    const auto nuis = truth_rows(sim.scenario, sim.data.covariates());
    const auto spec = cate_risk_spec();
    const auto& W = sim.data.covariates();
    const auto opt = single(knn_config(1));
    EXPECT_LE((fit_dr_learner(sim.data, nuis, spec, opt).predict(W) - sim.theta0).cwiseAbs().maxCoeff(), 1e-10);
    EXPECT_LE((fit_r_learner(sim.data, nuis, spec, opt).predict(W) - sim.theta0).cwiseAbs().maxCoeff(), 1e-10);
    EpOptions ep;
    ep.ridge = 0.0;
    EXPECT_LE((fit_ep_learner(sim.data, nuis, spec, 4, ep, opt).predict(W) - sim.theta0).cwiseAbs().maxCoeff(), 1e-10);
}

TEST(CvEpLearner, SingletonGridKeepsK) {
    const Dataset data = random_dataset(100, 2, 17);
    const auto nuis = random_nuisances(100, 18);
    const auto folds = partition_folds(100, 5, 1);
    const auto m = fit_ep_learner_cv(data, folds, nuis, cate_risk_spec(), {3}, EpOptions{}, single(knn_config(5)));
    EXPECT_EQ(m.k, 3);
    EXPECT_EQ(m.method, Method::CV_EP);
    EXPECT_EQ(code_of([&] { fit_ep_learner_cv(data, folds, nuis, cate_risk_spec(), {}, EpOptions{}, single(knn_config(5))); }),
              ErrorCode::InvalidConfig);
}

TEST(CvEpLearner, ExactTiesPickSmallestK) {
    const Dataset base = random_dataset(100, 2, 19);
    const auto nuis = random_nuisances(100, 20);
    Eigen::VectorXd Y(100);
    for (Eigen::Index i = 0; i < 100; ++i) Y[i] = nuis.mu(i, base.a(i));
    const Dataset data = base.with_outcome(Y);
    const auto folds = partition_folds(100, 5, 2);
    EpOptions ep;
    ep.ridge = 0.0;
    const auto m = fit_ep_learner_cv(data, folds, nuis, cate_risk_spec(), {4, 2, 5, 3}, ep, single(knn_config(5)));
    ASSERT_EQ(m.cv_criterion.size(), 4u);
    for (double c : m.cv_criterion) EXPECT_EQ(c, m.cv_criterion[0]);
    EXPECT_EQ(m.k, 2);
}

TEST(CvEpLearner, CriterionMatchesIndependentRecomputation) {
    for (auto family : {ScenarioFamily::CATE_lowdim, ScenarioFamily::CRR}) {
        ScenarioConfig cfg;
        cfg.family = family;
        cfg.complexity = Complexity::complex;
        cfg.n = 300;
        cfg.seed = 21;
        const auto sim = generate(cfg);
        const auto spec = sim.scenario.risk_spec();
        const auto folds = partition_folds(300, 5, 3);
        const auto out_cfg = family == ScenarioFamily::CRR ? linear_config(Link::logit) : linear_config();
        const auto nuis = fit_nuisances(sim.data, folds, linear_config(), out_cfg, spec).rows(sim.data, folds);
        const std::vector<int> grid{1, 2, 3};
        const LearnerConfig stage2 =
            boosted_config(2).with_link(family == ScenarioFamily::CRR ? Link::logit : Link::identity);
        const EpOptions ep;
        const auto m = fit_ep_learner_cv(sim.data, folds, nuis, spec, grid, ep, single(boosted_config(2)));
        ASSERT_EQ(m.cv_criterion.size(), grid.size());

        const auto& W = sim.data.covariates();
        for (std::size_t g = 0; g < grid.size(); ++g) {
            const Eigen::MatrixXd phi = CosineBasis::fit(W, grid[g]).features(W);
            double total = 0.0;
            for (int j = 0; j < folds.J; ++j) {
                const auto train = folds.complement(j);
                const auto res = debias_outcome_regression(sim.data, nuis, spec, phi, ep.resolve(spec), train);
                Eigen::VectorXd target(300), weight(300);
                for (Eigen::Index i = 0; i < 300; ++i) {
                    if (spec.family == Family::CATE) {
                        target[i] = res.mu_star1[i] - res.mu_star0[i];
                        weight[i] = 1.0;
                    } else {
                        const double m0 = std::max(res.mu_star0[i], ep.crr_mu_lo);
                        const double m1 = std::max(res.mu_star1[i], ep.crr_mu_lo);
                        weight[i] = m0 + m1;
                        target[i] = m1 / (m0 + m1);
                    }
                }
                Eigen::MatrixXd Wtr(static_cast<Eigen::Index>(train.size()), W.cols());
                Eigen::VectorXd ytr(Wtr.rows()), wtr(Wtr.rows());
                for (std::size_t r = 0; r < train.size(); ++r) {
                    Wtr.row(static_cast<Eigen::Index>(r)) = W.row(train[r]);
                    ytr[static_cast<Eigen::Index>(r)] = target[train[r]];
                    wtr[static_cast<Eigen::Index>(r)] = weight[train[r]];
                }
                const auto fit = fit_learner(stage2, Wtr, ytr, wtr);
                for (const auto i : folds.members(j)) {
                    const Eigen::MatrixXd w = W.row(i);
                    const double theta = spec.family == Family::CRR ? fit.predict_link(w)[0] : fit.predict(w)[0];
                    const int a = sim.data.a(i);
                    const double pa = a == 1 ? nuis.pi1[i] : 1.0 - nuis.pi1[i];
                    total += evaluate_loss(spec, nuis.mu0[i], nuis.mu1[i], theta) +
                             debias_term(spec, a, sim.data.y(i), pa, nuis.mu0[i], nuis.mu1[i], theta);
                }
            }
            EXPECT_NEAR(m.cv_criterion[g], total / 300.0, 1e-10) << to_string(spec.family) << " k=" << grid[g];
        }
        const auto best = std::min_element(m.cv_criterion.begin(), m.cv_criterion.end()) - m.cv_criterion.begin();
        EXPECT_EQ(m.k, grid[static_cast<std::size_t>(best)]);
    }
}

TEST(CvEpLearnerProperty, ScalingLeavesSelectionUnchanged) {
    ScenarioConfig cfg;
    cfg.n = 300;
    cfg.seed = 22;
    cfg.complexity = Complexity::complex;
    const auto sim = generate(cfg);
    const auto folds = partition_folds(300, 5, 4);
    const auto spec = cate_risk_spec();
    const auto nuis = fit_nuisances(sim.data, folds, linear_config(), linear_config(), spec).rows(sim.data, folds);
    const auto m = fit_ep_learner_cv(sim.data, folds, nuis, spec, {1, 2, 3, 4}, EpOptions{}, single(boosted_config(2)));
    // Doubling Y and mu is exact in floating point and multiplies every
    // criterion value by four.
    const NuisanceRows doubled{nuis.pi1, 2.0 * nuis.mu0, 2.0 * nuis.mu1};
    const Dataset data2 = sim.data.with_outcome(2.0 * sim.data.outcome());
    const auto m2 = fit_ep_learner_cv(data2, folds, doubled, spec, {1, 2, 3, 4}, EpOptions{}, single(boosted_config(2)));
    EXPECT_EQ(m.k, m2.k);
    for (std::size_t g = 0; g < m.cv_criterion.size(); ++g) {
        EXPECT_NEAR(m2.cv_criterion[g], 4.0 * m.cv_criterion[g], 1e-9 * std::abs(m.cv_criterion[g]));
    }
}

TEST(CvEpLearner, Deterministic) {
    const auto sim = generate(ScenarioConfig{ScenarioFamily::CATE_lowdim, Overlap::moderate, Complexity::simple, 250, 23});
    const auto folds = partition_folds(250, 5, 5);
    const auto spec = cate_risk_spec();
    const auto nuis = fit_nuisances(sim.data, folds, linear_config(), boosted_config(2), spec).rows(sim.data, folds);
    Stage2Options opt;
    opt.grid = {boosted_config(1), boosted_config(2), knn_config(10)};
    opt.cv_folds = 5;
    opt.seed = 11;
    const auto a = fit_ep_learner_cv(sim.data, folds, nuis, spec, {1, 2, 3}, EpOptions{}, opt);
    const auto b = fit_ep_learner_cv(sim.data, folds, nuis, spec, {1, 2, 3}, EpOptions{}, opt);
    EXPECT_EQ(a.k, b.k);
    EXPECT_EQ(a.cv_criterion, b.cv_criterion);
    EXPECT_EQ(a.stage2, b.stage2);
    EXPECT_EQ(a.predict(sim.data.covariates()), b.predict(sim.data.covariates()));
}

TEST(KnnEpLearner, FullAndSingleNeighbour) {
    const Dataset data = random_dataset(60, 2, 24);
    const auto nuis = random_nuisances(60, 25);
    const auto spec = cate_risk_spec();
    const auto res = debias_outcome_regression(data, nuis, spec, cosine_basis(data, 2).features(data.covariates()),
                                               EpOptions{}.resolve(spec));
    const Eigen::VectorXd contrast = res.mu_star1 - res.mu_star0;
    const auto all = fit_knn_ep_learner(data, nuis, spec, 2, 60, EpOptions{});
    EXPECT_LE((all.predict(data.covariates()).array() - contrast.mean()).abs().maxCoeff(), 1e-12);
    const auto one = fit_knn_ep_learner(data, nuis, spec, 2, 1, EpOptions{});
    EXPECT_EQ(one.predict(data.covariates()), contrast);
    EXPECT_EQ(code_of([&] { fit_knn_ep_learner(data, nuis, spec, 2, 61, EpOptions{}); }), ErrorCode::KTooLarge);
}

TEST(PredictContrast, QueryHandling) {
    const Dataset data = random_dataset(40, 2, 26);
    const auto nuis = random_nuisances(40, 27);
    const auto m = fit_dr_learner(data, nuis, cate_risk_spec(), single(boosted_config(2)));
    EXPECT_EQ(predict_contrast(m, Eigen::MatrixXd(0, 2)).size(), 0);
    Eigen::MatrixXd rep(3, 2);
    rep << 0.1, 0.2, 0.1, 0.2, 0.1, 0.2;
    const Eigen::VectorXd p = predict_contrast(m, rep);
    EXPECT_EQ(p[0], p[1]);
    EXPECT_EQ(p[1], p[2]);
    EXPECT_EQ(code_of([&] { predict_contrast(m, Eigen::MatrixXd::Zero(1, 3)); }), ErrorCode::DimensionMismatch);
}

TEST(MethodNames, RoundTrip) {
    for (auto m : {Method::T, Method::DR, Method::R, Method::IPW_E, Method::EP, Method::CV_EP, Method::KNN_EP}) {
        EXPECT_EQ(parse_method(to_string(m)), m);
    }
    EXPECT_EQ(code_of([] { parse_method("xlearner"); }), ErrorCode::InvalidConfig);
}
