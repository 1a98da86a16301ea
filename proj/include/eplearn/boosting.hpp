#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <vector>

#include <Eigen/Dense>

#include "eplearn/error.hpp"
#include "eplearn/risk_spec.hpp"

namespace eplearn {

enum class Link { identity, logit };

struct TreeNode {
    int feature = -1; // -1 marks a leaf
    double threshold = 0.0;
    int left = -1;
    int right = -1;
    double value = 0.0;
};

/// Axis-aligned regression tree; rows with x[feature] <= threshold go left.
struct RegressionTree {
    std::vector<TreeNode> nodes;

    template <class Row>
    double predict(const Row& x) const {
        int v = 0;
        while (nodes[static_cast<std::size_t>(v)].feature >= 0) {
            const auto& node = nodes[static_cast<std::size_t>(v)];
            v = x[node.feature] <= node.threshold ? node.left : node.right;
        }
        return nodes[static_cast<std::size_t>(v)].value;
    }
};

struct TreeEnsemble {
    double base = 0.0;
    double learning_rate = 0.1;
    Link link = Link::identity;
    std::vector<RegressionTree> trees;

    /// Additive score (the link scale).
    double predict_link(const Eigen::Ref<const Eigen::RowVectorXd>& x) const {
        double f = base;
        for (const auto& tree : trees) f += learning_rate * tree.predict(x);
        return f;
    }
};

struct BoostingOptions {
    int rounds = 100;
    int depth = 2;
    double learning_rate = 0.1;
    int min_leaf = 5;
    Link link = Link::identity;
};

namespace detail {

/// Each feature's row order and the matching sorted values.
struct SortedColumns {
    std::vector<std::vector<int>> order;
    std::vector<std::vector<double>> value;

    explicit SortedColumns(const Eigen::MatrixXd& X) : order(static_cast<std::size_t>(X.cols())), value(order.size()) {
        const auto n = static_cast<std::size_t>(X.rows());
        for (Eigen::Index f = 0; f < X.cols(); ++f) {
            auto& idx = order[static_cast<std::size_t>(f)];
            idx.resize(n);
            std::iota(idx.begin(), idx.end(), 0);
            std::stable_sort(idx.begin(), idx.end(), [&](int a, int b) { return X(a, f) < X(b, f); });
            auto& v = value[static_cast<std::size_t>(f)];
            v.resize(n);
            for (std::size_t p = 0; p < n; ++p) v[p] = X(idx[p], f);
        }
    }
};

/// Grows regression trees on per-row gradients g and hessians h (for least
/// squares, g = w * residual and h = w). Leaf value G / H, split gain
/// G_L^2 / H_L + G_R^2 / H_R - G^2 / H over midpoints of sorted distinct
/// values, first best wins. Every feature keeps its rows sorted and grouped
/// by node, so each node is scanned as one contiguous block.
class TreeGrower {
public:
    TreeGrower(const Eigen::MatrixXd& X, int max_depth, int min_leaf)
        : X_(X), sorted_(X), max_depth_(max_depth), min_leaf_(min_leaf), n_(static_cast<std::size_t>(X.rows())),
          d_(static_cast<std::size_t>(X.cols())), goes_left_(n_) {
        for (auto* side : {&a_, &b_}) {
            side->resize(d_);
            for (auto& c : *side) {
                c.idx.resize(n_);
                c.x.resize(n_);
                c.g.resize(n_);
                c.h.resize(n_);
            }
        }
    }

    /// Returns the tree and writes each row's leaf value into `leaf_value`.
    RegressionTree grow(const std::vector<double>& g, const std::vector<double>& h, std::vector<double>& leaf_value) {
        RegressionTree tree;
        tree.nodes.emplace_back();
        leaf_value.resize(n_);
        for (std::size_t f = 0; f < d_; ++f) {
            Column& c = a_[f];
            std::copy(sorted_.order[f].begin(), sorted_.order[f].end(), c.idx.begin());
            std::copy(sorted_.value[f].begin(), sorted_.value[f].end(), c.x.begin());
            for (std::size_t p = 0; p < n_; ++p) {
                const auto i = static_cast<std::size_t>(c.idx[p]);
                c.g[p] = g[i];
                c.h[p] = h[i];
            }
        }
        double total_scale = 0.0;
        for (std::size_t i = 0; i < n_; ++i) {
            if (h[i] > 0.0) total_scale += g[i] * g[i] / h[i];
        }
        const double min_gain = 1e-12 * total_scale;

        std::vector<Column>* cur = &a_;
        std::vector<Column>* nxt = &b_;
        std::vector<Segment> active{{0, 0, n_}};
        for (int level = 0; !active.empty(); ++level) {
            std::vector<Segment> next;
            for (const Segment& seg : active) {
                const Column& c0 = (*cur)[0];
                double G = 0.0, H = 0.0;
                int count = 0;
                for (std::size_t p = seg.begin; p < seg.end; ++p) {
                    G += c0.g[p];
                    H += c0.h[p];
                    count += c0.h[p] > 0.0 ? 1 : 0;
                }
                const double value = H > 0.0 ? G / H : 0.0;
                tree.nodes[static_cast<std::size_t>(seg.node)].value = value;

                int best_feature = -1;
                double best_threshold = 0.0;
                if (level < max_depth_ && count >= 2 * min_leaf_) {
                    double bar = (H > 0.0 ? G * G / H : 0.0) + min_gain;
                    for (std::size_t f = 0; f < d_; ++f) {
                        const Column& c = (*cur)[f];
                        double LG = 0.0, LH = 0.0;
                        double last_x = -std::numeric_limits<double>::infinity();
                        int lc = 0;
                        for (std::size_t p = seg.begin; p < seg.end; ++p) {
                            const double x = c.x[p];
                            if (lc >= min_leaf_ && x > last_x) {
                                const double HR = H - LH;
                                if (count - lc >= min_leaf_ && LH > 0.0 && HR > 0.0) {
                                    const double GR = G - LG;
                                    // score > bar without dividing: both hessian sums are positive.
                                    if (LG * LG * HR + GR * GR * LH > bar * LH * HR) {
                                        bar = LG * LG / LH + GR * GR / HR;
                                        best_feature = static_cast<int>(f);
                                        best_threshold = 0.5 * (last_x + x);
                                    }
                                }
                            }
                            LG += c.g[p];
                            LH += c.h[p];
                            lc += c.h[p] > 0.0 ? 1 : 0;
                            last_x = x;
                        }
                    }
                }

                if (best_feature < 0) {
                    for (std::size_t p = seg.begin; p < seg.end; ++p) {
                        leaf_value[static_cast<std::size_t>(c0.idx[p])] = value;
                    }
                    continue;
                }
                const int l = static_cast<int>(tree.nodes.size());
                tree.nodes.emplace_back();
                tree.nodes.emplace_back();
                TreeNode& node = tree.nodes[static_cast<std::size_t>(seg.node)];
                node.feature = best_feature;
                node.threshold = best_threshold;
                node.left = l;
                node.right = l + 1;

                if (level + 1 == max_depth_) {
                    // Children are leaves: no need to keep the columns sorted.
                    double lg = 0.0, lh = 0.0, rg = 0.0, rh = 0.0;
                    for (std::size_t p = seg.begin; p < seg.end; ++p) {
                        const bool left = X_(c0.idx[p], best_feature) <= best_threshold;
                        (left ? lg : rg) += c0.g[p];
                        (left ? lh : rh) += c0.h[p];
                    }
                    const double lv = lh > 0.0 ? lg / lh : 0.0;
                    const double rv = rh > 0.0 ? rg / rh : 0.0;
                    tree.nodes[static_cast<std::size_t>(l)].value = lv;
                    tree.nodes[static_cast<std::size_t>(l + 1)].value = rv;
                    for (std::size_t p = seg.begin; p < seg.end; ++p) {
                        const int i = c0.idx[p];
                        leaf_value[static_cast<std::size_t>(i)] = X_(i, best_feature) <= best_threshold ? lv : rv;
                    }
                    continue;
                }
                std::size_t n_left = 0;
                for (std::size_t p = seg.begin; p < seg.end; ++p) {
                    const int i = c0.idx[p];
                    const bool left = X_(i, best_feature) <= best_threshold;
                    goes_left_[static_cast<std::size_t>(i)] = left ? 1 : 0;
                    n_left += left ? 1 : 0;
                }
                for (std::size_t f = 0; f < d_; ++f) {
                    const Column& src = (*cur)[f];
                    Column& dst = (*nxt)[f];
                    std::size_t lo = seg.begin, hi = seg.begin + n_left;
                    for (std::size_t p = seg.begin; p < seg.end; ++p) {
                        const std::size_t q = goes_left_[static_cast<std::size_t>(src.idx[p])] ? lo++ : hi++;
                        dst.idx[q] = src.idx[p];
                        dst.x[q] = src.x[p];
                        dst.g[q] = src.g[p];
                        dst.h[q] = src.h[p];
                    }
                }
                next.push_back({l, seg.begin, seg.begin + n_left});
                next.push_back({l + 1, seg.begin + n_left, seg.end});
            }
            active = std::move(next);
            std::swap(cur, nxt);
        }
        return tree;
    }

private:
    struct Column {
        std::vector<int> idx;
        std::vector<double> x, g, h;
    };
    struct Segment {
        int node;
        std::size_t begin, end;
    };

    const Eigen::MatrixXd& X_;
    SortedColumns sorted_;
    int max_depth_;
    int min_leaf_;
    std::size_t n_, d_;
    std::vector<char> goes_left_;
    std::vector<Column> a_, b_;
};

} // namespace detail

/// Stagewise gradient boosting of depth-limited regression trees.
/// Identity link: weighted least squares. Logit link: Newton boosting on the
/// weighted Bernoulli quasi-likelihood (outcomes in [0, 1]).
inline TreeEnsemble fit_boosted_trees(const Eigen::MatrixXd& X, const Eigen::VectorXd& y,
                                      const Eigen::VectorXd& weights, const BoostingOptions& opt,
                                      std::vector<double>* training_loss = nullptr) {
    const auto n = X.rows();
    if (y.size() != n || weights.size() != n) {
        fail(ErrorCode::DimensionMismatch, "fit_boosted_trees: y/weights length does not match rows");
    }
    if (n < 1) fail(ErrorCode::EmptyData, "fit_boosted_trees: no rows");
    if (opt.rounds < 1) fail(ErrorCode::InvalidConfig, "boosting rounds must be >= 1");
    if (opt.depth < 1 || opt.depth > 8) fail(ErrorCode::InvalidConfig, "tree depth must lie in [1, 8]");
    if (opt.min_leaf < 1) fail(ErrorCode::InvalidConfig, "min_leaf must be >= 1");
    if (!(opt.learning_rate > 0.0 && opt.learning_rate <= 1.0)) {
        fail(ErrorCode::InvalidConfig, "learning rate must lie in (0, 1]");
    }
    if ((weights.array() < 0.0).any()) fail(ErrorCode::InvalidConfig, "fit_boosted_trees: negative weight");
    const double wsum = weights.sum();
    if (wsum <= 0.0) fail(ErrorCode::AllZeroWeights, "fit_boosted_trees: all weights are zero");

    TreeEnsemble model;
    model.learning_rate = opt.learning_rate;
    model.link = opt.link;
    const double ybar = weights.dot(y) / wsum;
    if (opt.link == Link::logit) {
        if ((y.array() < 0.0).any() || (y.array() > 1.0).any()) {
            fail(ErrorCode::InvalidConfig, "logit-link boosting needs outcomes in [0, 1]");
        }
        model.base = logit(std::clamp(ybar, 1e-6, 1.0 - 1e-6));
    } else {
        model.base = ybar;
    }

    detail::TreeGrower grower(X, opt.depth, opt.min_leaf);

    std::vector<double> F(static_cast<std::size_t>(n), model.base);
    std::vector<double> g(static_cast<std::size_t>(n)), h(static_cast<std::size_t>(n)), leaf;
    auto loss = [&]() {
        double total = 0.0;
        for (Eigen::Index i = 0; i < n; ++i) {
            const double f = F[static_cast<std::size_t>(i)];
            total += opt.link == Link::identity ? weights[i] * (y[i] - f) * (y[i] - f)
                                                : weights[i] * (log1pexp(f) - y[i] * f);
        }
        return total;
    };
    if (training_loss) training_loss->assign(1, loss());

    model.trees.reserve(static_cast<std::size_t>(opt.rounds));
    for (int r = 0; r < opt.rounds; ++r) {
        for (Eigen::Index i = 0; i < n; ++i) {
            const auto k = static_cast<std::size_t>(i);
            if (opt.link == Link::identity) {
                g[k] = weights[i] * (y[i] - F[k]);
                h[k] = weights[i];
            } else {
                const double p = expit(F[k]);
                g[k] = weights[i] * (y[i] - p);
                h[k] = weights[i] * std::max(p * (1.0 - p), 1e-10);
            }
        }
        model.trees.push_back(grower.grow(g, h, leaf));
        for (std::size_t k = 0; k < F.size(); ++k) F[k] += opt.learning_rate * leaf[k];
        if (training_loss) training_loss->push_back(loss());
    }
    return model;
}

} // namespace eplearn
