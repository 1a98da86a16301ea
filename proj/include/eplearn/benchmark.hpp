#pragma once

#include <algorithm>
#include <array>
#include <atomic>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <mutex>
#include <optional>
#include <ostream>
#include <string>
#include <thread>
#include <vector>

#include <Eigen/Dense>

#include "eplearn/crossfit.hpp"
#include "eplearn/dataset.hpp"
#include "eplearn/error.hpp"
#include "eplearn/learners.hpp"
#include "eplearn/metalearners.hpp"
#include "eplearn/simulation.hpp"

namespace eplearn {

/// Named second-stage candidate grids.
inline std::vector<LearnerConfig> learner_grid(const std::string& name, int max_depth = 8) {
    std::vector<LearnerConfig> out;
    if (name == "boosted") {
        for (int d = 1; d <= max_depth; ++d) out.push_back(boosted_config(d));
    } else if (name == "knn") {
        for (int k : {5, 10, 20, 40}) out.push_back(knn_config(k));
    } else if (name == "kernel") {
        for (double h : {0.05, 0.1, 0.2, 0.4}) out.push_back(kernel_config(h));
    } else if (name == "linear") {
        out.push_back(linear_config());
    } else {
        fail(ErrorCode::InvalidConfig, "unknown learner grid '" + name + "' (expected boosted, knn, kernel, linear)");
    }
    return out;
}

struct ScenarioSpec {
    ScenarioFamily family = ScenarioFamily::CATE_lowdim;
    Overlap overlap = Overlap::moderate;
    Complexity complexity = Complexity::simple;
};

struct NamedGrid {
    std::string name;
    std::vector<LearnerConfig> grid;
};

/// Nuisance and EP settings shared by every cell of a benchmark.
struct EstimationSettings {
    int folds = 10;
    LearnerConfig propensity = linear_config(Link::logit);
    /// Fixed outcome learner; when unset each arm's learner is chosen by
    /// cross-validation over `outcome_library`.
    std::optional<LearnerConfig> outcome;
    NuisanceLibrary outcome_library;
    NuisanceOptions nuisance;
    EpOptions ep;
    std::vector<int> k_grid{1, 2, 3, 4, 5, 6};
    /// Sieve frequencies for the fixed-k EP and k-NN EP learners.
    int ep_k = 3;
    int knn_neighbors = 3;
    int stage2_cv_folds = 10;
    bool truncate = false;
};

struct BenchmarkConfig {
    std::vector<ScenarioSpec> scenarios;
    std::vector<Method> methods;
    std::vector<NamedGrid> learners;
    std::vector<Eigen::Index> n_list;
    int reps = 1;
    std::uint64_t base_seed = 0;
    int workers = 1;
    Eigen::Index eval_points = 10000;
    EstimationSettings settings;
    /// Wall-clock timing makes the table nondeterministic; off by default.
    bool record_runtime = false;

    void validate() const {
        if (scenarios.empty()) fail(ErrorCode::InvalidConfig, "benchmark: no scenarios");
        if (methods.empty()) fail(ErrorCode::InvalidConfig, "benchmark: no methods");
        if (learners.empty()) fail(ErrorCode::InvalidConfig, "benchmark: no learner grids");
        if (n_list.empty()) fail(ErrorCode::InvalidConfig, "benchmark: no sample sizes");
        if (reps < 1) fail(ErrorCode::InvalidConfig, "benchmark: reps must be >= 1");
        if (workers < 1) fail(ErrorCode::InvalidConfig, "benchmark: workers must be >= 1");
        if (eval_points < 1) fail(ErrorCode::InvalidConfig, "benchmark: eval_points must be >= 1");
        for (const auto n : n_list) {
            if (n < 50) fail(ErrorCode::InvalidConfig, "benchmark: n must be >= 50");
        }
    }
};

struct BenchmarkRow {
    ScenarioSpec scenario;
    Method method = Method::EP;
    std::string base_learner;
    Eigen::Index n = 0;
    int rep = 0;
    std::uint64_t seed = 0;
    double mse = std::numeric_limits<double>::quiet_NaN();
    double runtime_ms = 0.0;
    double score_residual = std::numeric_limits<double>::quiet_NaN();
    Eigen::Index neg_weight_count = 0;
    /// Empty on success; otherwise "<ErrorCode>: message" and mse is NaN.
    std::string error;
};

inline bool method_applies(Method m, Family f) {
    switch (m) {
    case Method::DR:
    case Method::R:
    case Method::KNN_EP: return f == Family::CATE;
    case Method::IPW_E: return f == Family::CRR;
    case Method::T:
    case Method::EP:
    case Method::CV_EP: return true;
    }
    return false;
}

/// Fits one method on a simulated dataset whose cross-fitted nuisances are
/// already available.
inline ContrastModel fit_method(Method m, const SimulatedData& sim, const FoldAssignment& folds,
                                const NuisanceRows& nuis, const EstimationSettings& s, const Stage2Options& stage2) {
    const RiskSpec spec = sim.scenario.risk_spec();
    switch (m) {
    case Method::T: return fit_t_learner(sim.data, spec, stage2, s.nuisance);
    case Method::DR: return fit_dr_learner(sim.data, nuis, spec, stage2);
    case Method::R: return fit_r_learner(sim.data, nuis, spec, stage2);
    case Method::IPW_E: return fit_ipw_elearner(sim.data, nuis, spec, stage2);
    case Method::EP: return fit_ep_learner(sim.data, nuis, spec, s.ep_k, s.ep, stage2);
    case Method::CV_EP: return fit_ep_learner_cv(sim.data, folds, nuis, spec, s.k_grid, s.ep, stage2);
    case Method::KNN_EP: return fit_knn_ep_learner(sim.data, nuis, spec, s.ep_k, s.knn_neighbors, s.ep, stage2);
    }
    fail(ErrorCode::InvalidConfig, "unknown method");
}

namespace detail {

struct Cell {
    ScenarioSpec scenario;
    Eigen::Index n = 0;
    int rep = 0;
    std::uint64_t seed = 0;
};

inline std::string error_text(const std::exception& e) {
    if (const auto* err = dynamic_cast<const Error*>(&e)) return std::string(to_string(err->code())) + ": " + err->what();
    return std::string("Internal: ") + e.what();
}

inline std::vector<BenchmarkRow> run_cell(const BenchmarkConfig& cfg, const Cell& cell) {
    std::vector<BenchmarkRow> rows;
    auto row_for = [&](Method m, const std::string& learner) {
        BenchmarkRow r;
        r.scenario = cell.scenario;
        r.method = m;
        r.base_learner = learner;
        r.n = cell.n;
        r.rep = cell.rep;
        r.seed = cell.seed;
        return r;
    };
    const auto& s = cfg.settings;

    ScenarioConfig sc{cell.scenario.family, cell.scenario.overlap, cell.scenario.complexity, cell.n, cell.seed};
    std::optional<SimulatedData> sim;
    std::optional<FoldAssignment> folds;
    NuisanceRows nuis;
    Eigen::MatrixXd eval;
    Eigen::VectorXd truth;
    std::string setup_error;
    try {
        sim = generate(sc);
        folds = partition_folds(static_cast<std::size_t>(cell.n), s.folds, derive_seed(cell.seed, {1}));
        const RiskSpec spec = sim->scenario.risk_spec();
        const auto outcome = s.outcome ? std::array<LearnerConfig, 2>{*s.outcome, *s.outcome}
                                       : tune_outcome_learners(sim->data, spec, s.outcome_library,
                                                               derive_seed(cell.seed, {4}));
        const auto nuisances = fit_nuisances(sim->data, *folds, s.propensity, outcome, spec, s.nuisance);
        nuis = nuisances.rows(sim->data, *folds);
        eval = draw_eval_points(sim->scenario, cfg.eval_points, derive_seed(cell.seed, {2}));
        truth = sim->scenario.theta(eval);
    } catch (const std::exception& e) {
        setup_error = error_text(e);
    }

    const Family family = Scenario(sc).contrast();
    for (const auto m : cfg.methods) {
        if (!method_applies(m, family)) continue;
        const bool learner_free = m == Method::KNN_EP;
        for (std::size_t g = 0; g < cfg.learners.size(); ++g) {
            if (learner_free && g > 0) break;
            const std::string label =
                learner_free ? "knn(k=" + std::to_string(s.knn_neighbors) + ")" : cfg.learners[g].name;
            BenchmarkRow r = row_for(m, label);
            if (!setup_error.empty()) {
                r.error = setup_error;
                rows.push_back(std::move(r));
                continue;
            }
            Stage2Options stage2;
            stage2.grid = cfg.learners[g].grid;
            stage2.cv_folds = s.stage2_cv_folds;
            stage2.seed = derive_seed(cell.seed, {3});
            stage2.truncate = s.truncate;
            const auto t0 = std::chrono::steady_clock::now();
            try {
                const auto model = fit_method(m, *sim, *folds, nuis, s, stage2);
                r.mse = mse_against_truth(model.predict(eval), truth);
                r.score_residual = model.score_residual;
                r.neg_weight_count = model.negative_weight_count;
            } catch (const std::exception& e) {
                r.error = error_text(e);
            }
            if (cfg.record_runtime) {
                r.runtime_ms =
                    std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
            }
            rows.push_back(std::move(r));
        }
    }
    return rows;
}

} // namespace detail

/// Runs every (scenario, n, rep) cell. Each cell's seed is a hash of the base
/// seed and the cell coordinates, so results do not depend on scheduling.
/// Rows come back ordered by cell, then method, then learner grid.
inline std::vector<BenchmarkRow> run_benchmark(const BenchmarkConfig& cfg,
                                               const std::function<void(std::size_t, std::size_t)>& progress = {}) {
    cfg.validate();
    std::vector<detail::Cell> cells;
    for (std::size_t s = 0; s < cfg.scenarios.size(); ++s) {
        for (const auto n : cfg.n_list) {
            for (int rep = 0; rep < cfg.reps; ++rep) {
                const auto& sc = cfg.scenarios[s];
                const auto seed =
                    derive_seed(cfg.base_seed, {static_cast<std::uint64_t>(sc.family), static_cast<std::uint64_t>(sc.overlap),
                                                static_cast<std::uint64_t>(sc.complexity),
                                                static_cast<std::uint64_t>(n), static_cast<std::uint64_t>(rep)});
                cells.push_back({sc, n, rep, seed});
            }
        }
    }

    std::vector<std::vector<BenchmarkRow>> results(cells.size());
    std::atomic<std::size_t> next{0};
    std::atomic<std::size_t> done{0};
    std::mutex progress_mutex;
    auto worker = [&]() {
        for (;;) {
            const std::size_t c = next.fetch_add(1);
            if (c >= cells.size()) return;
            results[c] = detail::run_cell(cfg, cells[c]);
            const std::size_t finished = ++done;
            if (progress) {
                std::lock_guard<std::mutex> lock(progress_mutex);
                progress(finished, cells.size());
            }
        }
    };
    const int workers = std::min<int>(cfg.workers, static_cast<int>(cells.size()));
    if (workers <= 1) {
        worker();
    } else {
        std::vector<std::thread> pool;
        for (int t = 0; t < workers; ++t) pool.emplace_back(worker);
        for (auto& t : pool) t.join();
    }

    std::vector<BenchmarkRow> rows;
    for (auto& r : results) {
        for (auto& row : r) rows.push_back(std::move(row));
    }
    return rows;
}

inline const char* benchmark_header() {
    return "scenario,overlap,complexity,method,base_learner,n,rep,seed,mse,runtime_ms,score_residual,neg_weight_count";
}

inline void write_benchmark_csv(std::ostream& out, const std::vector<BenchmarkRow>& rows) {
    out << benchmark_header() << '\n';
    for (const auto& r : rows) {
        out << to_string(r.scenario.family) << ',' << to_string(r.scenario.overlap) << ','
            << to_string(r.scenario.complexity) << ',' << to_string(r.method) << ',' << r.base_learner
            << ',' << r.n << ',' << r.rep << ',' << r.seed << ',' << csv::format_double(r.mse) << ','
            << csv::format_double(r.runtime_ms) << ',' << csv::format_double(r.score_residual) << ','
            << r.neg_weight_count << '\n';
    }
}

} // namespace eplearn
