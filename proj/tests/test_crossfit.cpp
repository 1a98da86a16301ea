#include <algorithm>
#include <random>

#include <gtest/gtest.h>

#include "eplearn/crossfit.hpp"
#include "test_util.hpp"

using namespace eplearn;
using eplearn::testing::random_dataset;

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

} // namespace

TEST(PartitionFolds, BalancedAndComplete) {
    for (std::size_t n : {10u, 37u, 100u, 501u}) {
        for (int J : {1, 2, 3, 5, 10}) {
            const auto f = partition_folds(n, J, 17 + n);
            ASSERT_EQ(f.n(), n);
            std::vector<std::size_t> sizes(static_cast<std::size_t>(J), 0);
            for (int j : f.fold_of) {
                ASSERT_GE(j, 0);
                ASSERT_LT(j, J);
                ++sizes[static_cast<std::size_t>(j)];
            }
            const auto [lo, hi] = std::minmax_element(sizes.begin(), sizes.end());
            EXPECT_LE(*hi - *lo, 1u);
            EXPECT_GE(*lo, 1u);
            for (int j = 0; j < J; ++j) EXPECT_EQ(f.members(j).size() + f.complement(j).size(), n);
        }
    }
}

TEST(PartitionFolds, DeterministicAndSeedSensitive) {
    EXPECT_EQ(partition_folds(200, 5, 3).fold_of, partition_folds(200, 5, 3).fold_of);
    EXPECT_NE(partition_folds(200, 5, 3).fold_of, partition_folds(200, 5, 4).fold_of);
}

TEST(PartitionFolds, RejectsBadCounts) {
    EXPECT_EQ(code_of([] { partition_folds(10, 0, 1); }), ErrorCode::BadFoldCount);
    EXPECT_EQ(code_of([] { partition_folds(10, 11, 1); }), ErrorCode::BadFoldCount);
    EXPECT_NO_THROW(partition_folds(10, 10, 1));
}

TEST(FitNuisances, ConstantOutcomeReproduced) {
    const Dataset base = random_dataset(120, 2, 5);
    const Dataset data = base.with_outcome(Eigen::VectorXd::Constant(120, 0.375));
    const auto folds = partition_folds(120, 4, 9);
    const auto spec = cate_risk_spec();
    for (const auto& cfg : {knn_config(5), kernel_config(0.3), boosted_config(2), linear_config()}) {
        const auto rows = fit_nuisances(data, folds, linear_config(), cfg, spec).rows(data, folds);
        EXPECT_LE((rows.mu0.array() - 0.375).abs().maxCoeff(), 1e-8) << cfg.label();
        EXPECT_LE((rows.mu1.array() - 0.375).abs().maxCoeff(), 1e-8) << cfg.label();
    }
}

TEST(FitNuisances, IndependentTreatmentGivesHalfPropensity) {
    std::mt19937_64 rng(11);
    std::uniform_real_distribution<double> u(-1.0, 1.0);
    std::bernoulli_distribution coin(0.5);
    const Eigen::Index n = 4000;
    Eigen::MatrixXd W(n, 2);
    Eigen::VectorXi A(n);
    Eigen::VectorXd Y(n);
    for (Eigen::Index i = 0; i < n; ++i) {
        W(i, 0) = u(rng);
        W(i, 1) = u(rng);
        A[i] = coin(rng) ? 1 : 0;
        Y[i] = u(rng);
    }
    const Dataset data(W, A, Y);
    const auto folds = partition_folds(static_cast<std::size_t>(n), 5, 2);
    const auto rows = fit_nuisances(data, folds, linear_config(), linear_config(), cate_risk_spec()).rows(data, folds);
    EXPECT_NEAR(rows.pi1.mean(), 0.5, 0.02);
    EXPECT_LE((rows.pi1.array() - 0.5).abs().maxCoeff(), 0.08);
}

TEST(FitNuisancesProperty, RowsIgnoreTheirOwnFold) {
    const Dataset data = random_dataset(150, 2, 21);
    const auto folds = partition_folds(150, 5, 4);
    const auto spec = cate_risk_spec();
    const auto before = fit_nuisances(data, folds, boosted_config(2), boosted_config(2), spec).rows(data, folds);
    for (int j = 0; j < folds.J; ++j) {
        // Poison the outcomes and treatments inside fold j only.
        Eigen::VectorXd Y = data.outcome();
        Eigen::VectorXi A = data.treatment();
        for (const auto i : folds.members(j)) {
            Y[i] = 1e3 * (i + 1);
            A[i] = 1 - A[i];
        }
        const Dataset poisoned(data.covariates(), A, Y);
        const auto after = fit_nuisances(poisoned, folds, boosted_config(2), boosted_config(2), spec).rows(poisoned, folds);
        for (const auto i : folds.members(j)) {
            EXPECT_EQ(after.pi1[i], before.pi1[i]);
            EXPECT_EQ(after.mu0[i], before.mu0[i]);
            EXPECT_EQ(after.mu1[i], before.mu1[i]);
        }
    }
}

TEST(FitNuisancesProperty, ArmModelsIgnoreOtherArm) {
    const Dataset data = random_dataset(160, 2, 22);
    const auto folds = partition_folds(160, 4, 8);
    const auto spec = cate_risk_spec();
    const auto before = fit_nuisances(data, folds, linear_config(), kernel_config(0.3), spec).rows(data, folds);
    Eigen::VectorXd Y = data.outcome();
    for (Eigen::Index i = 0; i < data.n(); ++i) {
        if (data.a(i) == 1) Y[i] = -50.0 + i;
    }
    const Dataset poisoned = data.with_outcome(Y);
    const auto after = fit_nuisances(poisoned, folds, linear_config(), kernel_config(0.3), spec).rows(poisoned, folds);
    EXPECT_EQ(after.mu0, before.mu0);
    EXPECT_EQ(after.pi1, before.pi1);
    EXPECT_GT((after.mu1 - before.mu1).cwiseAbs().maxCoeff(), 1.0);
}

TEST(FitNuisances, SingleFoldUsesAllRows) {
    const Dataset data = random_dataset(60, 1, 23);
    const auto folds = partition_folds(60, 1, 0);
    const auto rows = fit_nuisances(data, folds, linear_config(), knn_config(1), cate_risk_spec()).rows(data, folds);
    for (Eigen::Index i = 0; i < data.n(); ++i) {
        EXPECT_EQ(rows.mu(i, data.a(i)), data.y(i));
    }
}

TEST(FitNuisances, PropensityClampedToEta) {
    // Treatment fully determined by w1 drives the raw propensity to 0 and 1.
    const Dataset base = random_dataset(200, 1, 24);
    Eigen::VectorXi A(200);
    for (Eigen::Index i = 0; i < 200; ++i) A[i] = base.covariates()(i, 0) > 0.0 ? 1 : 0;
    const Dataset data(base.covariates(), A, base.outcome());
    const auto folds = partition_folds(200, 2, 5);
    NuisanceOptions opt;
    opt.eta = 0.05;
    const auto rows = fit_nuisances(data, folds, knn_config(3), knn_config(3), cate_risk_spec(), opt).rows(data, folds);
    EXPECT_DOUBLE_EQ(rows.pi1.minCoeff(), 0.05);
    EXPECT_DOUBLE_EQ(rows.pi1.maxCoeff(), 0.95);
}

TEST(FitNuisances, CrrOutcomeClamp) {
    const Dataset base = random_dataset(120, 1, 25, true);
    const Dataset data = base.with_outcome(Eigen::VectorXd::Zero(120));
    const auto folds = partition_folds(120, 3, 5);
    NuisanceOptions opt;
    opt.crr_mu_lo = 0.02;
    const auto rows = fit_nuisances(data, folds, linear_config(), knn_config(4), crr_risk_spec(), opt).rows(data, folds);
    EXPECT_EQ(rows.mu0.minCoeff(), 0.02);
    EXPECT_EQ(rows.mu1.maxCoeff(), 0.02);
    // The CATE risk leaves outcome regressions untouched.
    const auto raw = fit_nuisances(data, folds, linear_config(), knn_config(4), cate_risk_spec(), opt).rows(data, folds);
    EXPECT_EQ(raw.mu0.maxCoeff(), 0.0);
}

TEST(FitNuisances, EmptyArmReported) {
    const Dataset base = random_dataset(40, 1, 26);
    Eigen::VectorXi A = Eigen::VectorXi::Zero(40);
    A[0] = 1;
    const Dataset data(base.covariates(), A, base.outcome());
    const auto folds = partition_folds(40, 2, 1);
    EXPECT_EQ(code_of([&] { fit_nuisances(data, folds, linear_config(), knn_config(1), cate_risk_spec()); }),
              ErrorCode::EmptyData);
}

TEST(NuisanceEstimates, RejectsBadClamps) {
    NuisanceEstimates::Fold f{[](const Eigen::MatrixXd& W) { return Eigen::VectorXd::Constant(W.rows(), 0.5); },
                              [](const Eigen::MatrixXd& W) { return Eigen::VectorXd::Zero(W.rows()); },
                              [](const Eigen::MatrixXd& W) { return Eigen::VectorXd::Zero(W.rows()); }};
    EXPECT_EQ(code_of([&] { NuisanceEstimates::shared(2, f, 0.5); }), ErrorCode::InvalidConfig);
    EXPECT_EQ(code_of([&] { NuisanceEstimates::shared(2, f, 0.1, std::make_pair(0.0, 1.0)); }),
              ErrorCode::InvalidConfig);
    EXPECT_EQ(code_of([&] { NuisanceEstimates::shared(2, f, 0.1).propensity(2, Eigen::MatrixXd::Zero(1, 1)); }),
              ErrorCode::BadFoldCount);
}

TEST(TuneOutcomeLearners, DeterministicAndArmSpecific) {
    const Dataset data = random_dataset(200, 2, 27);
    NuisanceLibrary lib;
    lib.boosting.rounds = {10, 25};
    lib.series = {1, 2, 3};
    const auto a = tune_outcome_learners(data, cate_risk_spec(), lib, 3);
    const auto b = tune_outcome_learners(data, cate_risk_spec(), lib, 3);
    EXPECT_EQ(a[0], b[0]);
    EXPECT_EQ(a[1], b[1]);
    EXPECT_EQ(a[0].effective_link(), Link::identity);
    const Dataset binary = random_dataset(200, 2, 28, true);
    EXPECT_EQ(tune_outcome_learners(binary, cate_risk_spec(std::make_pair(0.0, 1.0)), lib, 3)[1].effective_link(), Link::logit);
}
