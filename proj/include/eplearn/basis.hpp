#pragma once

#include <algorithm>
#include <cmath>
#include <numbers>
#include <vector>

#include <Eigen/Dense>

#include "eplearn/error.hpp"

namespace eplearn {

/// Additive univariate cosine basis: for each covariate r, u = (w_r - min_r) /
/// (max_r - min_r) clipped to [0, 1], features cos(pi f u) for f = 1..k.
/// Covariates with a constant training range are dropped.
class CosineBasis {
public:
    CosineBasis() = default;

    static CosineBasis fit(const Eigen::MatrixXd& W, int k) {
        if (k < 0) fail(ErrorCode::InvalidConfig, "sieve frequencies must be >= 0");
        CosineBasis b;
        b.k_ = k;
        b.input_dim_ = W.cols();
        for (Eigen::Index r = 0; r < W.cols(); ++r) {
            const double lo = W.col(r).minCoeff();
            const double hi = W.col(r).maxCoeff();
            if (!(hi > lo)) {
                b.dropped_.push_back(r);
                continue;
            }
            b.dims_.push_back(r);
            b.lo_.push_back(lo);
            b.hi_.push_back(hi);
        }
        return b;
    }

    /// Rebuilds a basis from stored parts (used when loading saved models).
    static CosineBasis from_parts(int k, Eigen::Index input_dim, std::vector<Eigen::Index> dims,
                                  std::vector<double> lo, std::vector<double> hi) {
        if (k < 0 || dims.size() != lo.size() || dims.size() != hi.size()) {
            fail(ErrorCode::InvalidConfig, "cosine basis: inconsistent stored parts");
        }
        CosineBasis b;
        b.k_ = k;
        b.input_dim_ = input_dim;
        for (Eigen::Index r = 0; r < input_dim; ++r) {
            if (std::find(dims.begin(), dims.end(), r) == dims.end()) b.dropped_.push_back(r);
        }
        for (std::size_t s = 0; s < dims.size(); ++s) {
            if (dims[s] < 0 || dims[s] >= input_dim || !(hi[s] > lo[s])) {
                fail(ErrorCode::InvalidConfig, "cosine basis: invalid stored dimension");
            }
        }
        b.dims_ = std::move(dims);
        b.lo_ = std::move(lo);
        b.hi_ = std::move(hi);
        return b;
    }

    int frequencies() const { return k_; }
    Eigen::Index input_dim() const { return input_dim_; }
    Eigen::Index size() const { return static_cast<Eigen::Index>(dims_.size()) * k_; }
    const std::vector<Eigen::Index>& dropped_dims() const { return dropped_; }
    const std::vector<Eigen::Index>& kept_dims() const { return dims_; }
    const std::vector<double>& lower() const { return lo_; }
    const std::vector<double>& upper() const { return hi_; }

    bool operator==(const CosineBasis&) const = default;

    Eigen::MatrixXd features(const Eigen::MatrixXd& W) const {
        if (W.cols() != input_dim_) {
            fail(ErrorCode::DimensionMismatch, "cosine basis: query dimension does not match training");
        }
        Eigen::MatrixXd out(W.rows(), size());
        for (std::size_t s = 0; s < dims_.size(); ++s) {
            const double span = hi_[s] - lo_[s];
            for (Eigen::Index i = 0; i < W.rows(); ++i) {
                const double u = std::clamp((W(i, dims_[s]) - lo_[s]) / span, 0.0, 1.0);
                for (int f = 1; f <= k_; ++f) {
                    out(i, static_cast<Eigen::Index>(s) * k_ + (f - 1)) = std::cos(std::numbers::pi * f * u);
                }
            }
        }
        return out;
    }

private:
    int k_ = 0;
    Eigen::Index input_dim_ = 0;
    std::vector<Eigen::Index> dims_;
    std::vector<Eigen::Index> dropped_;
    std::vector<double> lo_, hi_;
};

} // namespace eplearn
