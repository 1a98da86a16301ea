#pragma once

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <limits>
#include <numeric>
#include <optional>
#include <random>
#include <string>
#include <variant>
#include <vector>

#include <Eigen/Dense>

#include "eplearn/basis.hpp"
#include "eplearn/boosting.hpp"
#include "eplearn/error.hpp"
#include "eplearn/linear_models.hpp"
#include "eplearn/risk_spec.hpp"

namespace eplearn {

enum class LearnerKind { wls, logistic, knn, kernel, boosted_stumps };

inline std::string to_string(LearnerKind k) {
    switch (k) {
    case LearnerKind::wls: return "wls";
    case LearnerKind::logistic: return "logistic";
    case LearnerKind::knn: return "knn";
    case LearnerKind::kernel: return "kernel";
    case LearnerKind::boosted_stumps: return "boosted_stumps";
    }
    return "unknown";
}

inline LearnerKind parse_learner_kind(const std::string& text) {
    if (text == "wls") return LearnerKind::wls;
    if (text == "logistic") return LearnerKind::logistic;
    if (text == "knn") return LearnerKind::knn;
    if (text == "kernel") return LearnerKind::kernel;
    if (text == "boosted_stumps" || text == "boosted") return LearnerKind::boosted_stumps;
    fail(ErrorCode::InvalidConfig, "learner: unknown kind '" + text + "'");
}

struct LearnerConfig {
    LearnerKind kind = LearnerKind::wls;
    int neighbors = 10;
    double bandwidth = 0.25;
    int depth = 2;
    int rounds = 50;
    double learning_rate = 0.2;
    double ridge = 1e-8;
    int min_leaf = 5;
    /// wls / logistic: when positive, regress on the additive cosine basis
    /// with this many frequencies per covariate instead of the raw covariates.
    int series = 0;
    /// Response link; logistic always fits on the logit scale.
    Link link = Link::identity;

    void validate() const {
        if (neighbors < 1) fail(ErrorCode::InvalidConfig, "neighbors must be >= 1");
        if (!(bandwidth > 0.0)) fail(ErrorCode::InvalidConfig, "bandwidth must be > 0");
        if (depth < 1 || depth > 8) fail(ErrorCode::InvalidConfig, "depth must lie in [1, 8]");
        if (rounds < 1) fail(ErrorCode::InvalidConfig, "rounds must be >= 1");
        if (!(learning_rate > 0.0 && learning_rate <= 1.0)) {
            fail(ErrorCode::InvalidConfig, "learning_rate must lie in (0, 1]");
        }
        if (ridge < 0.0) fail(ErrorCode::InvalidConfig, "ridge must be >= 0");
        if (min_leaf < 1) fail(ErrorCode::InvalidConfig, "min_leaf must be >= 1");
        if (series < 0) fail(ErrorCode::InvalidConfig, "series must be >= 0");
    }

    Link effective_link() const { return kind == LearnerKind::logistic ? Link::logit : link; }

    LearnerConfig with_link(Link l) const {
        LearnerConfig c = *this;
        c.link = l;
        if (l == Link::logit && c.kind == LearnerKind::wls) c.kind = LearnerKind::logistic;
        if (l == Link::identity && c.kind == LearnerKind::logistic) c.kind = LearnerKind::wls;
        return c;
    }

    /// Short human-readable label, e.g. "boosted_stumps(depth=3)".
    std::string label() const {
        switch (kind) {
        case LearnerKind::wls:
        case LearnerKind::logistic:
            return series > 0 ? to_string(kind) + "(series=" + std::to_string(series) + ")" : to_string(kind);
        case LearnerKind::knn: return "knn(k=" + std::to_string(neighbors) + ")";
        case LearnerKind::kernel: {
            char buf[64];
            std::snprintf(buf, sizeof buf, "kernel(h=%g)", bandwidth);
            return buf;
        }
        case LearnerKind::boosted_stumps: return "boosted_stumps(depth=" + std::to_string(depth) + ")";
        }
        return "unknown";
    }

    bool operator==(const LearnerConfig&) const = default;
};

inline LearnerConfig boosted_config(int depth, int rounds = 50, double learning_rate = 0.2, int min_leaf = 5) {
    LearnerConfig c;
    c.kind = LearnerKind::boosted_stumps;
    c.depth = depth;
    c.rounds = rounds;
    c.learning_rate = learning_rate;
    c.min_leaf = min_leaf;
    return c;
}

inline LearnerConfig knn_config(int k) {
    LearnerConfig c;
    c.kind = LearnerKind::knn;
    c.neighbors = k;
    return c;
}

inline LearnerConfig kernel_config(double bandwidth) {
    LearnerConfig c;
    c.kind = LearnerKind::kernel;
    c.bandwidth = bandwidth;
    return c;
}

inline LearnerConfig linear_config(Link link = Link::identity, double ridge = 1e-8) {
    LearnerConfig c;
    c.kind = link == Link::logit ? LearnerKind::logistic : LearnerKind::wls;
    c.ridge = ridge;
    c.link = link;
    return c;
}

struct LinearModel {
    double intercept = 0.0;
    Eigen::VectorXd beta;
    /// Present for series fits: beta applies to basis->features(X).
    std::optional<CosineBasis> basis;
};

inline LearnerConfig series_config(int frequencies, Link link = Link::identity, double ridge = 1e-8) {
    LearnerConfig c = linear_config(link, ridge);
    c.series = frequencies;
    return c;
}

/// Stored-sample learners (k-NN, kernel) keep their training data.
struct KnnModel {
    Eigen::MatrixXd X;
    Eigen::VectorXd y;
    Eigen::VectorXd w;
    int k = 1;
};

struct KernelModel {
    Eigen::MatrixXd X;
    Eigen::VectorXd y;
    Eigen::VectorXd w;
    double bandwidth = 1.0;
    double global_mean = 0.0;
};

namespace detail {

inline double clamp_prob(double p) { return std::clamp(p, 1e-12, 1.0 - 1e-12); }

inline double knn_predict(const KnnModel& m, const Eigen::Ref<const Eigen::RowVectorXd>& x,
                          std::vector<std::pair<double, Eigen::Index>>& scratch) {
    const auto n = m.X.rows();
    scratch.resize(static_cast<std::size_t>(n));
    for (Eigen::Index i = 0; i < n; ++i) {
        scratch[static_cast<std::size_t>(i)] = {(m.X.row(i) - x).squaredNorm(), i};
    }
    const auto kth = scratch.begin() + m.k;
    std::nth_element(scratch.begin(), kth - 1, scratch.end());
    double sw = 0.0, swy = 0.0, sy = 0.0;
    for (auto it = scratch.begin(); it != kth; ++it) {
        const auto i = it->second;
        sw += m.w[i];
        swy += m.w[i] * m.y[i];
        sy += m.y[i];
    }
    return sw > 0.0 ? swy / sw : sy / m.k;
}

inline double kernel_predict(const KernelModel& m, const Eigen::Ref<const Eigen::RowVectorXd>& x) {
    double num = 0.0, den = 0.0;
    const double inv_h2 = 1.0 / (m.bandwidth * m.bandwidth);
    for (Eigen::Index i = 0; i < m.X.rows(); ++i) {
        const double kv = m.w[i] * std::exp(-0.5 * (m.X.row(i) - x).squaredNorm() * inv_h2);
        num += kv * m.y[i];
        den += kv;
    }
    if (!(den > std::numeric_limits<double>::min())) return m.global_mean;
    return num / den;
}

} // namespace detail

/// An immutable fitted regressor. `predict` returns the response scale
/// (probabilities for the logit link); `predict_link` the additive scale.
class FittedRegressor {
public:
    using Model = std::variant<LinearModel, KnnModel, KernelModel, TreeEnsemble>;

    FittedRegressor() = default;
    FittedRegressor(LearnerKind kind, Link link, Eigen::Index dim, Model model)
        : kind_(kind), link_(link), dim_(dim), model_(std::move(model)) {}

    LearnerKind kind() const { return kind_; }
    Link link() const { return link_; }
    Eigen::Index dim() const { return dim_; }
    const Model& model() const { return model_; }

    Eigen::VectorXd predict(const Eigen::MatrixXd& X) const {
        Eigen::VectorXd out = raw(X);
        if (link_ == Link::logit && !is_averaging()) {
            for (Eigen::Index i = 0; i < out.size(); ++i) out[i] = expit(out[i]);
        }
        return out;
    }

    Eigen::VectorXd predict_link(const Eigen::MatrixXd& X) const {
        Eigen::VectorXd out = raw(X);
        if (link_ == Link::logit && is_averaging()) {
            for (Eigen::Index i = 0; i < out.size(); ++i) out[i] = logit(detail::clamp_prob(out[i]));
        }
        return out;
    }

private:
    bool is_averaging() const { return kind_ == LearnerKind::knn || kind_ == LearnerKind::kernel; }

    Eigen::VectorXd raw(const Eigen::MatrixXd& X) const {
        if (X.cols() != dim_) {
            fail(ErrorCode::DimensionMismatch, "predict: query has " + std::to_string(X.cols()) +
                                                   " columns, model expects " + std::to_string(dim_));
        }
        Eigen::VectorXd out(X.rows());
        std::visit(
            [&](const auto& m) {
                using M = std::decay_t<decltype(m)>;
                if constexpr (std::is_same_v<M, LinearModel>) {
                    if (m.basis) {
                        out = (m.basis->features(X) * m.beta).array() + m.intercept;
                    } else {
                        out = (X * m.beta).array() + m.intercept;
                    }
                } else if constexpr (std::is_same_v<M, KnnModel>) {
                    std::vector<std::pair<double, Eigen::Index>> scratch;
                    for (Eigen::Index i = 0; i < X.rows(); ++i) out[i] = detail::knn_predict(m, X.row(i), scratch);
                } else if constexpr (std::is_same_v<M, KernelModel>) {
                    for (Eigen::Index i = 0; i < X.rows(); ++i) out[i] = detail::kernel_predict(m, X.row(i));
                } else {
                    for (Eigen::Index i = 0; i < X.rows(); ++i) out[i] = m.predict_link(X.row(i));
                }
            },
            model_);
        return out;
    }

    LearnerKind kind_ = LearnerKind::wls;
    Link link_ = Link::identity;
    Eigen::Index dim_ = 0;
    Model model_;
};

inline Eigen::VectorXd unit_weights(Eigen::Index n) { return Eigen::VectorXd::Ones(n); }

/// k-NN regression; ties in distance are broken by lowest training index.
inline FittedRegressor fit_knn(const Eigen::MatrixXd& X, const Eigen::VectorXd& y, int k,
                               std::optional<Eigen::VectorXd> weights = std::nullopt, Link link = Link::identity) {
    if (k < 1 || k > X.rows()) {
        fail(ErrorCode::KTooLarge, "fit_knn: k = " + std::to_string(k) + " outside [1, " + std::to_string(X.rows()) + "]");
    }
    if (y.size() != X.rows()) fail(ErrorCode::DimensionMismatch, "fit_knn: y length does not match rows");
    KnnModel m{X, y, weights ? *weights : unit_weights(X.rows()), k};
    return FittedRegressor(LearnerKind::knn, link, X.cols(), std::move(m));
}

/// Nadaraya-Watson smoother with a Gaussian kernel.
inline FittedRegressor fit_kernel(const Eigen::MatrixXd& X, const Eigen::VectorXd& y, double bandwidth,
                                  std::optional<Eigen::VectorXd> weights = std::nullopt, Link link = Link::identity) {
    if (!(bandwidth > 0.0)) fail(ErrorCode::InvalidConfig, "fit_kernel: bandwidth must be > 0");
    if (X.rows() < 1) fail(ErrorCode::EmptyData, "fit_kernel: no rows");
    if (y.size() != X.rows()) fail(ErrorCode::DimensionMismatch, "fit_kernel: y length does not match rows");
    Eigen::VectorXd w = weights ? *weights : unit_weights(X.rows());
    const double sw = w.sum();
    const double mean = sw > 0.0 ? w.dot(y) / sw : y.mean();
    KernelModel m{X, y, std::move(w), bandwidth, mean};
    return FittedRegressor(LearnerKind::kernel, link, X.cols(), std::move(m));
}

inline FittedRegressor fit_boosted_stumps(const Eigen::MatrixXd& X, const Eigen::VectorXd& y,
                                          const Eigen::VectorXd& weights, int rounds, int depth, double learning_rate,
                                          int min_leaf = 5, Link link = Link::identity) {
    BoostingOptions opt;
    opt.rounds = rounds;
    opt.depth = depth;
    opt.learning_rate = learning_rate;
    opt.min_leaf = min_leaf;
    opt.link = link;
    return FittedRegressor(LearnerKind::boosted_stumps, link, X.cols(), fit_boosted_trees(X, y, weights, opt));
}

namespace detail {

inline Eigen::MatrixXd with_intercept(const Eigen::MatrixXd& X) {
    Eigen::MatrixXd Z(X.rows(), X.cols() + 1);
    Z.col(0).setOnes();
    Z.rightCols(X.cols()) = X;
    return Z;
}

/// Linear or logistic fit with an intercept column. The ridge also touches
/// the intercept; at the default 1e-8 that is immaterial.
inline FittedRegressor fit_linear(const LearnerConfig& cfg, const Eigen::MatrixXd& X, const Eigen::VectorXd& y,
                                  const Eigen::VectorXd& w) {
    std::optional<CosineBasis> basis;
    if (cfg.series > 0) basis = CosineBasis::fit(X, cfg.series);
    const Eigen::MatrixXd Z = with_intercept(basis ? basis->features(X) : X);
    const Eigen::VectorXd zero = Eigen::VectorXd::Zero(X.rows());
    const bool logistic = cfg.effective_link() == Link::logit;
    const LinearFit fit = logistic ? fit_logistic_offset(Z, y, w, zero, cfg.ridge) : fit_wls_offset(Z, y, w, zero, cfg.ridge);
    LinearModel m{fit.beta[0], fit.beta.tail(Z.cols() - 1), std::move(basis)};
    return FittedRegressor(logistic ? LearnerKind::logistic : LearnerKind::wls, logistic ? Link::logit : Link::identity,
                           X.cols(), std::move(m));
}

} // namespace detail

/// Fits any configured learner. Weights default to one.
inline FittedRegressor fit_learner(const LearnerConfig& cfg, const Eigen::MatrixXd& X, const Eigen::VectorXd& y,
                                   std::optional<Eigen::VectorXd> weights = std::nullopt) {
    cfg.validate();
    const Eigen::VectorXd w = weights ? *weights : unit_weights(X.rows());
    switch (cfg.kind) {
    case LearnerKind::wls:
    case LearnerKind::logistic: return detail::fit_linear(cfg, X, y, w);
    case LearnerKind::knn: return fit_knn(X, y, std::min<int>(cfg.neighbors, static_cast<int>(X.rows())), w, cfg.link);
    case LearnerKind::kernel: return fit_kernel(X, y, cfg.bandwidth, w, cfg.link);
    case LearnerKind::boosted_stumps:
        return fit_boosted_stumps(X, y, w, cfg.rounds, cfg.depth, cfg.learning_rate, cfg.min_leaf, cfg.link);
    }
    fail(ErrorCode::InvalidConfig, "unknown learner kind");
}

/// Seeded shuffle followed by contiguous blocks: fold sizes differ by at most one.
/// Entries are 0-based fold indices.
inline std::vector<int> shuffled_blocks(std::size_t n, int folds, std::uint64_t seed) {
    std::vector<std::size_t> perm(n);
    std::iota(perm.begin(), perm.end(), std::size_t{0});
    std::mt19937_64 rng(seed);
    std::shuffle(perm.begin(), perm.end(), rng);
    std::vector<int> fold_of(n);
    const std::size_t J = static_cast<std::size_t>(folds);
    const std::size_t base = n / J, extra = n % J;
    std::size_t pos = 0;
    for (std::size_t j = 0; j < J; ++j) {
        const std::size_t size = base + (j < extra ? 1 : 0);
        for (std::size_t t = 0; t < size; ++t) fold_of[perm[pos++]] = static_cast<int>(j);
    }
    return fold_of;
}

/// Targets for cross-validated selection. Models are trained on
/// (train_y, train_w) and scored on (eval_y, eval_w); by default both are the
/// same. Identity link scores weighted squared error; logit link scores the
/// weighted Bernoulli loss w * (log(1 + e^f) - y f) on the link scale.
struct CvTargets {
    Eigen::VectorXd train_y;
    Eigen::VectorXd train_w;
    Eigen::VectorXd eval_y;
    Eigen::VectorXd eval_w;
};

struct CvSelection {
    std::size_t index = 0;
    std::vector<double> criterion;
};

inline CvSelection cv_select_detailed(const std::vector<LearnerConfig>& configs, const Eigen::MatrixXd& X,
                                      const CvTargets& t, int folds, std::uint64_t seed, bool score_single = false) {
    if (configs.empty()) fail(ErrorCode::InvalidConfig, "cv_select: empty config list");
    CvSelection out;
    out.criterion.assign(configs.size(), 0.0);
    if (configs.size() == 1 && !score_single) return out;
    const auto n = X.rows();
    if (folds < 2 || folds > n) fail(ErrorCode::BadFoldCount, "cv_select: fold count must lie in [2, n]");
    const auto fold_of = shuffled_blocks(static_cast<std::size_t>(n), folds, seed);

    for (int j = 0; j < folds; ++j) {
        std::vector<Eigen::Index> train, test;
        for (Eigen::Index i = 0; i < n; ++i) (fold_of[static_cast<std::size_t>(i)] == j ? test : train).push_back(i);
        Eigen::MatrixXd Xtr(static_cast<Eigen::Index>(train.size()), X.cols());
        Eigen::VectorXd ytr(Xtr.rows()), wtr(Xtr.rows());
        for (std::size_t r = 0; r < train.size(); ++r) {
            Xtr.row(static_cast<Eigen::Index>(r)) = X.row(train[r]);
            ytr[static_cast<Eigen::Index>(r)] = t.train_y[train[r]];
            wtr[static_cast<Eigen::Index>(r)] = t.train_w[train[r]];
        }
        Eigen::MatrixXd Xte(static_cast<Eigen::Index>(test.size()), X.cols());
        for (std::size_t r = 0; r < test.size(); ++r) Xte.row(static_cast<Eigen::Index>(r)) = X.row(test[r]);

        for (std::size_t c = 0; c < configs.size(); ++c) {
            const auto model = fit_learner(configs[c], Xtr, ytr, wtr);
            const Eigen::VectorXd f = model.predict_link(Xte);
            const bool logit_scale = configs[c].effective_link() == Link::logit;
            double s = 0.0;
            for (std::size_t r = 0; r < test.size(); ++r) {
                const auto i = test[r];
                const double fr = f[static_cast<Eigen::Index>(r)];
                s += logit_scale ? t.eval_w[i] * (log1pexp(fr) - t.eval_y[i] * fr)
                                 : t.eval_w[i] * (t.eval_y[i] - fr) * (t.eval_y[i] - fr);
            }
            out.criterion[c] += s / static_cast<double>(n);
        }
    }
    out.index = static_cast<std::size_t>(std::min_element(out.criterion.begin(), out.criterion.end()) -
                                         out.criterion.begin());
    return out;
}

/// Config minimizing J-fold cross-validated weighted loss; ties resolve to
/// the earliest position in `configs`.
inline LearnerConfig cv_select(const std::vector<LearnerConfig>& configs, const Eigen::MatrixXd& X,
                               const Eigen::VectorXd& y, const Eigen::VectorXd& weights, int folds, std::uint64_t seed) {
    const auto sel = cv_select_detailed(configs, X, CvTargets{y, weights, y, weights}, folds, seed);
    return configs[sel.index];
}

/// Candidate boosting settings for path-wise tuning: every depth is fitted
/// once per fold with the largest round count, and each smaller round count
/// is scored along the way.
struct BoostingGrid {
    std::vector<int> depths{1, 2, 3};
    std::vector<int> rounds{25, 50, 100, 200, 400};
    double learning_rate = 0.1;
    int min_leaf = 10;
};

struct BoostingTuning {
    LearnerConfig config;
    /// Cross-validated loss of `config`, averaged over rows.
    double criterion = 0.0;
};

/// J-fold cross-validated choice of (depth, rounds) for boosted trees under
/// weighted squared error (identity link) or weighted Bernoulli loss (logit
/// link). Ties go to the earlier depth, then the fewer rounds. Uses the same
/// fold split as cv_select_detailed for equal (n, folds, seed).
inline BoostingTuning cv_tune_boosting(const BoostingGrid& grid, const Eigen::MatrixXd& X, const Eigen::VectorXd& y,
                                      const Eigen::VectorXd& w, Link link, int folds, std::uint64_t seed) {
    if (grid.depths.empty() || grid.rounds.empty()) fail(ErrorCode::InvalidConfig, "cv_tune_boosting: empty grid");
    std::vector<int> rounds = grid.rounds;
    std::sort(rounds.begin(), rounds.end());
    const auto n = X.rows();
    folds = std::min<int>(folds, static_cast<int>(n));
    if (folds < 2) fail(ErrorCode::BadFoldCount, "cv_tune_boosting: needs at least two rows");
    const auto fold_of = shuffled_blocks(static_cast<std::size_t>(n), folds, seed);
    std::vector<std::vector<double>> loss(grid.depths.size(), std::vector<double>(rounds.size(), 0.0));

    for (int j = 0; j < folds; ++j) {
        std::vector<Eigen::Index> train, test;
        for (Eigen::Index i = 0; i < n; ++i) (fold_of[static_cast<std::size_t>(i)] == j ? test : train).push_back(i);
        Eigen::MatrixXd Xtr(static_cast<Eigen::Index>(train.size()), X.cols());
        Eigen::VectorXd ytr(Xtr.rows()), wtr(Xtr.rows());
        for (std::size_t r = 0; r < train.size(); ++r) {
            Xtr.row(static_cast<Eigen::Index>(r)) = X.row(train[r]);
            ytr[static_cast<Eigen::Index>(r)] = y[train[r]];
            wtr[static_cast<Eigen::Index>(r)] = w[train[r]];
        }
        for (std::size_t dd = 0; dd < grid.depths.size(); ++dd) {
            BoostingOptions opt;
            opt.rounds = rounds.back();
            opt.depth = grid.depths[dd];
            opt.learning_rate = grid.learning_rate;
            opt.min_leaf = grid.min_leaf;
            opt.link = link;
            const TreeEnsemble model = fit_boosted_trees(Xtr, ytr, wtr, opt);
            std::vector<double> f(test.size(), model.base);
            std::size_t next = 0;
            for (int t = 0; t < rounds.back(); ++t) {
                for (std::size_t r = 0; r < test.size(); ++r) {
                    f[r] += model.learning_rate * model.trees[static_cast<std::size_t>(t)].predict(X.row(test[r]));
                }
                while (next < rounds.size() && rounds[next] == t + 1) {
                    double s = 0.0;
                    for (std::size_t r = 0; r < test.size(); ++r) {
                        const auto i = test[r];
                        s += link == Link::logit ? w[i] * (log1pexp(f[r]) - y[i] * f[r])
                                                 : w[i] * (y[i] - f[r]) * (y[i] - f[r]);
                    }
                    loss[dd][next] += s;
                    ++next;
                }
            }
        }
    }
    std::size_t best_d = 0, best_r = 0;
    for (std::size_t dd = 0; dd < grid.depths.size(); ++dd) {
        for (std::size_t rr = 0; rr < rounds.size(); ++rr) {
            if (loss[dd][rr] < loss[best_d][best_r]) {
                best_d = dd;
                best_r = rr;
            }
        }
    }
    LearnerConfig cfg = boosted_config(grid.depths[best_d], rounds[best_r], grid.learning_rate, grid.min_leaf);
    cfg.link = link;
    return {cfg, loss[best_d][best_r] / static_cast<double>(n)};
}

} // namespace eplearn
