#pragma once

#include <algorithm>
#include <cstdint>
#include <fstream>
#include <iomanip>
#include <map>
#include <ostream>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "eplearn/benchmark.hpp"
#include "eplearn/crossfit.hpp"
#include "eplearn/dataset.hpp"
#include "eplearn/error.hpp"
#include "eplearn/metalearners.hpp"
#include "eplearn/risk.hpp"
#include "eplearn/serialize.hpp"
#include "eplearn/sieve.hpp"
#include "eplearn/simulation.hpp"

namespace eplearn::cli {

/// Flat key = value settings. Later sources override earlier ones.
class RunConfig {
public:
    void set(const std::string& key, const std::string& value) { values_[key] = value; }

    bool has(const std::string& key) const { return values_.count(key) > 0; }

    std::string get(const std::string& key, const std::string& fallback) const {
        const auto it = values_.find(key);
        return it == values_.end() ? fallback : it->second;
    }

    std::string require(const std::string& key) const {
        const auto it = values_.find(key);
        if (it == values_.end() || it->second.empty()) fail(ErrorCode::InvalidConfig, "missing required key '" + key + "'");
        return it->second;
    }

    long long get_int(const std::string& key, long long fallback) const {
        if (!has(key)) return fallback;
        const std::string v = values_.at(key);
        try {
            std::size_t used = 0;
            const long long out = std::stoll(v, &used);
            if (used == v.size()) return out;
        } catch (const std::exception&) {
        }
        fail(ErrorCode::InvalidConfig, "key '" + key + "': '" + v + "' is not an integer");
    }

    std::uint64_t get_u64(const std::string& key, std::uint64_t fallback) const {
        if (!has(key)) return fallback;
        const std::string v = values_.at(key);
        try {
            std::size_t used = 0;
            if (!v.empty() && v[0] != '-') {
                const auto out = std::stoull(v, &used);
                if (used == v.size()) return out;
            }
        } catch (const std::exception&) {
        }
        fail(ErrorCode::InvalidConfig, "key '" + key + "': '" + v + "' is not an unsigned integer");
    }

    double get_double(const std::string& key, double fallback) const {
        if (!has(key)) return fallback;
        const std::string v = values_.at(key);
        if (v == "inf") return std::numeric_limits<double>::infinity();
        try {
            std::size_t used = 0;
            const double out = std::stod(v, &used);
            if (used == v.size()) return out;
        } catch (const std::exception&) {
        }
        fail(ErrorCode::InvalidConfig, "key '" + key + "': '" + v + "' is not a number");
    }

    bool get_bool(const std::string& key, bool fallback) const {
        if (!has(key)) return fallback;
        const std::string v = values_.at(key);
        if (v == "true" || v == "1" || v == "yes") return true;
        if (v == "false" || v == "0" || v == "no") return false;
        fail(ErrorCode::InvalidConfig, "key '" + key + "': '" + v + "' is not a boolean");
    }

    std::vector<std::string> get_list(const std::string& key, const std::string& fallback) const {
        std::vector<std::string> out;
        std::stringstream ss(get(key, fallback));
        std::string item;
        while (std::getline(ss, item, ',')) {
            item.erase(0, item.find_first_not_of(" \t"));
            item.erase(item.find_last_not_of(" \t") + 1);
            if (!item.empty()) out.push_back(item);
        }
        return out;
    }

    std::vector<int> get_int_list(const std::string& key, const std::string& fallback) const {
        std::vector<int> out;
        for (const auto& item : get_list(key, fallback)) {
            try {
                std::size_t used = 0;
                const int v = std::stoi(item, &used);
                if (used == item.size()) {
                    out.push_back(v);
                    continue;
                }
            } catch (const std::exception&) {
            }
            fail(ErrorCode::InvalidConfig, "key '" + key + "': '" + item + "' is not an integer");
        }
        return out;
    }

    /// Rejects any key outside `allowed`, naming the first offender.
    void check_keys(const std::set<std::string>& allowed, const std::string& command) const {
        for (const auto& [k, v] : values_) {
            if (!allowed.count(k)) fail(ErrorCode::InvalidConfig, "unknown key '" + k + "' for command " + command);
        }
    }

private:
    std::map<std::string, std::string> values_;
};

/// Reads `key = value` lines; '#' starts a comment.
inline void read_config_file(const std::string& path, RunConfig& cfg) {
    std::ifstream in(path);
    if (!in) fail(ErrorCode::IOError, "cannot open config file '" + path + "'");
    std::string line;
    int number = 0;
    while (std::getline(in, line)) {
        ++number;
        const auto hash = line.find('#');
        if (hash != std::string::npos) line.erase(hash);
        line.erase(0, line.find_first_not_of(" \t\r"));
        line.erase(line.find_last_not_of(" \t\r") + 1);
        if (line.empty()) continue;
        const auto eq = line.find('=');
        if (eq == std::string::npos) {
            fail(ErrorCode::ParseError, path + ":" + std::to_string(number) + ": expected key = value");
        }
        std::string key = line.substr(0, eq), value = line.substr(eq + 1);
        key.erase(key.find_last_not_of(" \t") + 1);
        value.erase(0, value.find_first_not_of(" \t"));
        if (key.empty()) fail(ErrorCode::ParseError, path + ":" + std::to_string(number) + ": empty key");
        cfg.set(key, value);
    }
}

/// Learner specs: linear, logistic, boosted:<depth>, knn:<k>, kernel:<h>, series:<k>.
inline LearnerConfig parse_learner(const std::string& spec, const std::string& key) {
    const auto colon = spec.find(':');
    const std::string name = spec.substr(0, colon);
    const std::string arg = colon == std::string::npos ? "" : spec.substr(colon + 1);
    auto bad = [&]() -> LearnerConfig {
        fail(ErrorCode::InvalidConfig, "key '" + key + "': cannot parse learner '" + spec +
                                           "' (expected linear, logistic, boosted:<depth>, knn:<k>, kernel:<h>, "
                                           "series:<k>)");
    };
    try {
        LearnerConfig c;
        if (name == "linear" && arg.empty()) {
            c = linear_config();
        } else if (name == "logistic" && arg.empty()) {
            c = linear_config(Link::logit);
        } else if (name == "boosted") {
            c = boosted_config(arg.empty() ? 2 : std::stoi(arg));
        } else if (name == "knn" && !arg.empty()) {
            c = knn_config(std::stoi(arg));
        } else if (name == "kernel" && !arg.empty()) {
            c = kernel_config(std::stod(arg));
        } else if (name == "series" && !arg.empty()) {
            c = series_config(std::stoi(arg));
        } else {
            return bad();
        }
        c.validate();
        return c;
    } catch (const Error&) {
        throw;
    } catch (const std::exception&) {
        return bad();
    }
}

/// A stage-2 grid: a named grid (boosted, knn, kernel, linear) or one learner spec.
inline std::vector<LearnerConfig> parse_grid(const std::string& spec, int max_depth, const std::string& key) {
    if (spec == "boosted" || spec == "knn" || spec == "kernel" || spec == "linear") return learner_grid(spec, max_depth);
    return {parse_learner(spec, key)};
}

inline std::optional<std::pair<double, double>> resolve_range(const RunConfig& cfg, const Dataset& data) {
    const std::string r = cfg.get("outcome_range", "auto");
    if (r == "unit") return std::make_pair(0.0, 1.0);
    if (r == "real") return std::nullopt;
    if (r == "auto") return data.outcome_in_unit_interval() ? std::optional(std::make_pair(0.0, 1.0)) : std::nullopt;
    fail(ErrorCode::InvalidConfig, "key 'outcome_range': expected auto, unit or real");
}

inline std::string join(const std::vector<int>& v) {
    std::string out;
    for (std::size_t i = 0; i < v.size(); ++i) out += (i ? "," : "") + std::to_string(v[i]);
    return out;
}

inline std::string join(const std::vector<double>& v) {
    std::string out;
    for (std::size_t i = 0; i < v.size(); ++i) out += (i ? "," : "") + csv::format_double(v[i]);
    return out;
}

inline void write_text(const std::string& path, const std::string& body) {
    std::ofstream out(path, std::ios::binary);
    if (!out) fail(ErrorCode::IOError, "cannot open '" + path + "' for writing");
    out << body;
    if (!out) fail(ErrorCode::IOError, "failed writing '" + path + "'");
}

inline std::string truth_path_for(const std::string& out) {
    if (out.size() > 4 && out.compare(out.size() - 4, 4, ".csv") == 0) return out.substr(0, out.size() - 4) + "_theta0.csv";
    return out + "_theta0.csv";
}

inline ScenarioConfig scenario_from(const RunConfig& cfg) {
    ScenarioConfig sc;
    sc.family = parse_scenario_family(cfg.require("scenario"));
    sc.overlap = parse_overlap(cfg.get("overlap", "moderate"));
    sc.complexity = parse_complexity(cfg.get("complexity", "simple"));
    sc.n = cfg.get_int("n", 500);
    sc.seed = cfg.get_u64("seed", 0);
    sc.validate();
    return sc;
}

// Nuisance-related keys shared by fit, diagnose and benchmark.
inline const std::set<std::string> nuisance_keys{"J", "propensity", "outcome", "eta", "crr_mu_lo", "crr_mu_hi", "seed"};

struct Prepared {
    Dataset data;
    RiskSpec spec;
    FoldAssignment folds;
    NuisanceRows nuis;
    std::array<LearnerConfig, 2> outcome;
    NuisanceOptions clamp;
};

inline NuisanceOptions clamp_from(const RunConfig& cfg) {
    NuisanceOptions o;
    o.eta = cfg.get_double("eta", o.eta);
    o.crr_mu_lo = cfg.get_double("crr_mu_lo", o.crr_mu_lo);
    o.crr_mu_hi = cfg.get_double("crr_mu_hi", o.crr_mu_hi);
    if (!(o.eta > 0.0 && o.eta < 0.5)) fail(ErrorCode::InvalidConfig, "key 'eta': must lie in (0, 0.5)");
    if (!(o.crr_mu_lo > 0.0 && o.crr_mu_hi > o.crr_mu_lo)) {
        fail(ErrorCode::InvalidConfig, "keys 'crr_mu_lo'/'crr_mu_hi': need 0 < lo < hi");
    }
    return o;
}

inline Prepared prepare(const RunConfig& cfg, Dataset data) {
    const Family family = parse_family(cfg.get("family", "cate"));
    RiskSpec spec = risk_spec_for(family, resolve_range(cfg, data));
    const int J = static_cast<int>(cfg.get_int("J", 10));
    const std::uint64_t seed = cfg.get_u64("seed", 0);
    FoldAssignment folds = partition_folds(static_cast<std::size_t>(data.n()), J, derive_seed(seed, {1}));
    const LearnerConfig prop = parse_learner(cfg.get("propensity", "logistic"), "propensity");
    const std::string out_spec = cfg.get("outcome", "tuned");
    std::array<LearnerConfig, 2> outcome;
    if (out_spec == "tuned") {
        outcome = tune_outcome_learners(data, spec, NuisanceLibrary{}, derive_seed(seed, {4}));
    } else {
        const LearnerConfig c = parse_learner(out_spec, "outcome").with_link(outcome_link(data, spec));
        outcome = {c, c};
    }
    const NuisanceOptions clamp = clamp_from(cfg);
    const auto est = fit_nuisances(data, folds, prop.with_link(Link::logit), outcome, spec, clamp);
    NuisanceRows nuis = est.rows(data, folds);
    return Prepared{std::move(data), spec, std::move(folds), std::move(nuis), outcome, clamp};
}

inline EpOptions ep_options_from(const RunConfig& cfg, const NuisanceOptions& clamp) {
    EpOptions ep;
    const std::string m = cfg.get("debias_method", "auto");
    if (m == "1") ep.method = DebiasMethod::logistic;
    else if (m == "2") ep.method = DebiasMethod::linear;
    else if (m == "3") ep.method = DebiasMethod::bounded;
    else if (m != "auto") fail(ErrorCode::InvalidConfig, "key 'debias_method': expected auto, 1, 2 or 3");
    const std::string s = cfg.get("simplified", "auto");
    if (s != "auto") ep.simplified = cfg.get_bool("simplified", false);
    ep.ridge = cfg.get_double("ridge", ep.ridge);
    if (ep.ridge < 0.0) fail(ErrorCode::InvalidConfig, "key 'ridge': must be >= 0");
    ep.crr_mu_lo = clamp.crr_mu_lo;
    ep.crr_mu_hi = clamp.crr_mu_hi;
    return ep;
}

inline std::vector<int> k_grid_from(const RunConfig& cfg) {
    auto grid = cfg.get_int_list("k_grid", "1,2,3,4,5,6");
    if (grid.empty()) fail(ErrorCode::InvalidConfig, "key 'k_grid': empty");
    for (const int k : grid) {
        if (k < 1) fail(ErrorCode::InvalidConfig, "key 'k_grid': frequencies must be >= 1");
    }
    return grid;
}

inline int cmd_simulate(const RunConfig& cfg, std::ostream& out) {
    cfg.check_keys({"scenario", "overlap", "complexity", "n", "seed", "out", "truth_out"}, "simulate");
    const ScenarioConfig sc = scenario_from(cfg);
    const std::string path = cfg.require("out");
    const SimulatedData sim = generate(sc);
    std::ostringstream body;
    write_dataset_csv(body, sim.data);
    write_text(path, body.str());
    std::ostringstream truth;
    truth << "theta0\n";
    for (Eigen::Index i = 0; i < sim.theta0.size(); ++i) truth << csv::format_double(sim.theta0[i]) << '\n';
    const std::string truth_path = cfg.get("truth_out", truth_path_for(path));
    write_text(truth_path, truth.str());
    out << "wrote " << sim.data.n() << " rows (" << sim.data.d() << " covariates) to " << path << '\n'
        << "wrote true contrast to " << truth_path << '\n';
    return 0;
}

inline int cmd_fit(const RunConfig& cfg, std::ostream& out) {
    std::set<std::string> keys{"data",   "method",  "family",        "outcome_range", "stage2",     "stage2_max_depth",
                               "stage2_cv_folds", "k", "k_grid",    "knn_neighbors",  "truncate",   "debias_method",
                               "simplified", "ridge", "out",        "report"};
    keys.insert(nuisance_keys.begin(), nuisance_keys.end());
    cfg.check_keys(keys, "fit");
    const Method method = parse_method(cfg.require("method"));
    const Family family = parse_family(cfg.get("family", "cate"));
    if (method == Method::DR && family == Family::CRR) {
        fail(ErrorCode::Unsupported, "DR CRR estimation unsupported (nonconvex loss); use diagnose");
    }
    if (!method_applies(method, family)) {
        fail(ErrorCode::Unsupported, "method " + to_string(method) + " is not defined for family " + to_string(family));
    }
    const std::string model_path = cfg.require("out");
    const std::string data_path = cfg.require("data");
    const std::vector<int> k_grid = k_grid_from(cfg);
    const int k = static_cast<int>(cfg.get_int("k", 3));
    const int neighbors = static_cast<int>(cfg.get_int("knn_neighbors", 3));
    const int max_depth = static_cast<int>(cfg.get_int("stage2_max_depth", 8));
    if (max_depth < 1 || max_depth > 8) fail(ErrorCode::InvalidConfig, "key 'stage2_max_depth': must lie in [1, 8]");

    Prepared p = prepare(cfg, read_dataset_csv(data_path));
    Stage2Options st;
    st.grid = parse_grid(cfg.get("stage2", "boosted"), max_depth, "stage2");
    st.cv_folds = static_cast<int>(cfg.get_int("stage2_cv_folds", 10));
    st.seed = derive_seed(cfg.get_u64("seed", 0), {3});
    st.truncate = cfg.get_bool("truncate", false);
    const EpOptions ep = ep_options_from(cfg, p.clamp);

    ContrastModel model;
    switch (method) {
    case Method::T: model = fit_t_learner(p.data, p.spec, st, p.clamp); break;
    case Method::DR: model = fit_dr_learner(p.data, p.nuis, p.spec, st); break;
    case Method::R: model = fit_r_learner(p.data, p.nuis, p.spec, st); break;
    case Method::IPW_E: model = fit_ipw_elearner(p.data, p.nuis, p.spec, st); break;
    case Method::EP: model = fit_ep_learner(p.data, p.nuis, p.spec, k, ep, st); break;
    case Method::CV_EP: model = fit_ep_learner_cv(p.data, p.folds, p.nuis, p.spec, k_grid, ep, st); break;
    case Method::KNN_EP: model = fit_knn_ep_learner(p.data, p.nuis, p.spec, k, neighbors, ep, st); break;
    }
    save_model(model_path, model);

    std::ostringstream report;
    report << "method=" << to_string(model.method) << '\n'
           << "family=" << to_string(model.family) << '\n'
           << "n=" << p.data.n() << '\n'
           << "d=" << p.data.d() << '\n'
           << "outcome_learners=" << p.outcome[0].label() << ',' << p.outcome[1].label() << '\n'
           << "stage2=" << model.stage2.label() << '\n';
    if (model.k >= 0) {
        report << "k=" << model.k << '\n' << "k_grid=" << join(model.k_grid) << '\n';
        if (!model.cv_criterion.empty()) report << "cv_criterion=" << join(model.cv_criterion) << '\n';
        report << "score_residual=" << csv::format_double(model.score_residual) << '\n';
    }
    if (model.family == Family::CRR && model.method != Method::T) {
        report << "negative_weight_count=" << model.negative_weight_count << '\n'
               << "outside_unit_count=" << model.outside_unit_count << '\n';
    }
    report << "truncated=" << (model.truncated ? "true" : "false") << '\n';
    for (const auto& w : model.warnings) report << "warning=" << w << '\n';
    report << "model=" << model_path << '\n';
    if (cfg.has("report")) write_text(cfg.get("report", ""), report.str());
    out << report.str();
    return 0;
}

inline int cmd_predict(const RunConfig& cfg, std::ostream& out) {
    cfg.check_keys({"model", "query", "out", "seed"}, "predict");
    const ContrastModel model = load_model(cfg.require("model"));
    const Eigen::MatrixXd W = read_covariates_csv(cfg.require("query"));
    const Eigen::VectorXd theta = predict_contrast(model, W);
    std::ostringstream body;
    body << "theta\n";
    for (Eigen::Index i = 0; i < theta.size(); ++i) body << csv::format_double(theta[i]) << '\n';
    if (cfg.has("out")) {
        write_text(cfg.get("out", ""), body.str());
        out << "wrote " << theta.size() << " predictions to " << cfg.get("out", "") << '\n';
    } else {
        out << body.str();
    }
    return 0;
}

/// Scenario list entries: family[/overlap[/complexity]].
inline std::vector<ScenarioSpec> parse_scenarios(const std::vector<std::string>& items) {
    std::vector<ScenarioSpec> out;
    for (const auto& item : items) {
        std::vector<std::string> parts;
        std::stringstream ss(item);
        std::string part;
        while (std::getline(ss, part, '/')) parts.push_back(part);
        if (parts.empty() || parts.size() > 3) fail(ErrorCode::InvalidConfig, "key 'scenarios': bad entry '" + item + "'");
        ScenarioSpec s;
        s.family = parse_scenario_family(parts[0]);
        if (parts.size() > 1) s.overlap = parse_overlap(parts[1]);
        if (parts.size() > 2) s.complexity = parse_complexity(parts[2]);
        out.push_back(s);
    }
    return out;
}

inline int cmd_benchmark(const RunConfig& cfg, std::ostream& out, std::ostream& err) {
    cfg.check_keys({"scenarios", "methods", "learners", "n_list", "reps", "seed", "workers", "eval_points", "k_grid", "k",
                    "knn_neighbors", "J", "outcome", "stage2_max_depth", "stage2_cv_folds", "truncate", "record_runtime",
                    "eta", "crr_mu_lo", "crr_mu_hi", "out"},
                   "benchmark");
    BenchmarkConfig b;
    b.scenarios = parse_scenarios(cfg.get_list("scenarios", "cate_lowdim"));
    for (const auto& m : cfg.get_list("methods", "dr,cv_ep")) b.methods.push_back(parse_method(m));
    const int max_depth = static_cast<int>(cfg.get_int("stage2_max_depth", 8));
    if (max_depth < 1 || max_depth > 8) fail(ErrorCode::InvalidConfig, "key 'stage2_max_depth': must lie in [1, 8]");
    for (const auto& g : cfg.get_list("learners", "boosted")) b.learners.push_back({g, parse_grid(g, max_depth, "learners")});
    for (const int n : cfg.get_int_list("n_list", "500")) b.n_list.push_back(n);
    b.reps = static_cast<int>(cfg.get_int("reps", 1));
    b.base_seed = cfg.get_u64("seed", 0);
    b.workers = static_cast<int>(cfg.get_int("workers", 1));
    b.eval_points = cfg.get_int("eval_points", 10000);
    b.record_runtime = cfg.get_bool("record_runtime", false);
    auto& s = b.settings;
    s.k_grid = k_grid_from(cfg);
    s.ep_k = static_cast<int>(cfg.get_int("k", s.ep_k));
    s.knn_neighbors = static_cast<int>(cfg.get_int("knn_neighbors", s.knn_neighbors));
    s.folds = static_cast<int>(cfg.get_int("J", s.folds));
    s.stage2_cv_folds = static_cast<int>(cfg.get_int("stage2_cv_folds", s.stage2_cv_folds));
    s.truncate = cfg.get_bool("truncate", false);
    s.nuisance = clamp_from(cfg);
    s.ep.crr_mu_lo = s.nuisance.crr_mu_lo;
    s.ep.crr_mu_hi = s.nuisance.crr_mu_hi;
    const std::string outcome = cfg.get("outcome", "tuned");
    if (outcome != "tuned") s.outcome = parse_learner(outcome, "outcome");
    b.validate();

    const auto rows = run_benchmark(b);
    std::ostringstream body;
    write_benchmark_csv(body, rows);
    std::size_t failed = 0;
    for (const auto& r : rows) {
        if (!r.error.empty()) {
            ++failed;
            err << "warning: cell " << to_string(r.scenario.family) << " n=" << r.n << " rep=" << r.rep << " method="
                << to_string(r.method) << " failed: " << r.error << '\n';
        }
    }
    if (cfg.has("out")) {
        write_text(cfg.get("out", ""), body.str());
        out << "wrote " << rows.size() << " rows to " << cfg.get("out", "") << " (" << failed << " failed)\n";
    } else {
        out << body.str();
    }
    return 0;
}

inline int cmd_diagnose(const RunConfig& cfg, std::ostream& out) {
    std::set<std::string> keys{"data", "scenario", "overlap", "complexity", "n", "family", "outcome_range", "k_grid",
                               "debias_method", "simplified", "ridge", "out"};
    keys.insert(nuisance_keys.begin(), nuisance_keys.end());
    cfg.check_keys(keys, "diagnose");
    if (cfg.has("data") == cfg.has("scenario")) fail(ErrorCode::InvalidConfig, "give exactly one of 'data' or 'scenario'");
    RunConfig local = cfg;
    std::optional<Dataset> data;
    std::string source;
    if (cfg.has("data")) {
        source = cfg.get("data", "");
        data = read_dataset_csv(source);
    } else {
        const SimulatedData sim = generate(scenario_from(cfg));
        source = sim.scenario.config().name();
        data = sim.data;
        if (!cfg.has("family")) local.set("family", to_string(sim.scenario.contrast()));
        if (!cfg.has("outcome_range")) local.set("outcome_range", sim.scenario.outcome_range() ? "unit" : "real");
    }
    const Prepared p = prepare(local, std::move(*data));
    const EpOptions ep = ep_options_from(local, p.clamp);
    const DebiasOptions dopt = ep.resolve(p.spec);

    std::ostringstream report;
    report << "source=" << source << '\n'
           << "family=" << to_string(p.spec.family) << '\n'
           << "n=" << p.data.n() << '\n'
           << "outcome_learners=" << p.outcome[0].label() << ',' << p.outcome[1].label() << '\n'
           << "debias_method=" << static_cast<int>(dopt.method) << '\n';
    for (const int k : k_grid_from(local)) {
        const CosineBasis basis = CosineBasis::fit(p.data.covariates(), k);
        const auto res = debias_outcome_regression(p.data, p.nuis, p.spec, basis.features(p.data.covariates()), dopt);
        report << "score_residual[k=" << k << "]=" << csv::format_double(res.score_residual) << '\n';
    }
    if (p.spec.family == Family::CATE) {
        const Eigen::VectorXd chi = dr_pseudo_outcomes(p.data, p.nuis);
        std::vector<double> v(chi.data(), chi.data() + chi.size());
        report << "chi_min=" << csv::format_double(chi.minCoeff()) << '\n';
        for (double q : {0.01, 0.25, 0.5, 0.75, 0.99}) {
            std::ostringstream label;
            label << q;
            report << "chi_q" << label.str() << '=' << csv::format_double(empirical_quantile(v, q)) << '\n';
        }
        report << "chi_max=" << csv::format_double(chi.maxCoeff()) << '\n'
               << "chi_max_abs=" << csv::format_double(chi.cwiseAbs().maxCoeff()) << '\n';
    } else {
        const PseudoRegression dr = crr_dr_pseudo(p.data, p.nuis);
        const CosineBasis basis = CosineBasis::fit(p.data.covariates(), 3);
        const auto res = debias_outcome_regression(p.data, p.nuis, p.spec, basis.features(p.data.covariates()), dopt);
        const Eigen::VectorXd m0 = res.mu_star0.array().max(ep.crr_mu_lo).min(ep.crr_mu_hi);
        const Eigen::VectorXd m1 = res.mu_star1.array().max(ep.crr_mu_lo).min(ep.crr_mu_hi);
        const PseudoRegression epp = crr_ep_pseudo(m0, m1);
        report << "dr_negative_weights=" << dr.negative_weight_count << '\n'
               << "dr_outcomes_outside_unit=" << dr.outside_unit_count << '\n'
               << "dr_zero_weight_rows=" << dr.excluded.size() << '\n'
               << "ep_negative_weights=" << epp.negative_weight_count << '\n'
               << "ep_outcomes_outside_unit=" << epp.outside_unit_count << '\n';
    }
    if (cfg.has("out")) write_text(cfg.get("out", ""), report.str());
    out << report.str();
    return 0;
}

/// Exit code for a library error: 1 for invalid input or configuration,
/// 2 for failures while running.
inline int exit_code_for(ErrorCode code) {
    switch (code) {
    case ErrorCode::IOError:
    case ErrorCode::SingularDesign:
    case ErrorCode::NoConvergence:
    case ErrorCode::NonFiniteLoss:
    case ErrorCode::ZeroWeightDivision:
    case ErrorCode::AllZeroWeights: return 2;
    default: return 1;
    }
}

inline std::string one_line(std::string s) {
    std::replace(s.begin(), s.end(), '\n', ' ');
    return s;
}

/// Entry point: `eplearn <command> [--config f] [--seed s] [--out p] [--workers k] [key=value ...]`.
inline int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
    CLI::App app{"EP-learner estimation, diagnostics and simulation benchmarks"};
    std::string command, config_path, out_path;
    std::optional<std::uint64_t> seed;
    std::optional<int> workers;
    std::vector<std::string> overrides;
    app.add_option("command", command, "simulate | fit | predict | benchmark | diagnose")->required();
    app.add_option("overrides", overrides, "key=value settings");
    app.add_option("--config", config_path, "flat key = value config file");
    app.add_option("--seed", seed, "random seed");
    app.add_option("--out", out_path, "output path");
    app.add_option("--workers", workers, "benchmark worker threads");
    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp&) {
        out << app.help();
        return 0;
    } catch (const CLI::ParseError& e) {
        err << "error: kind=InvalidConfig message=" << one_line(e.what()) << '\n';
        return 1;
    }

    try {
        RunConfig cfg;
        if (!config_path.empty()) read_config_file(config_path, cfg);
        for (const auto& kv : overrides) {
            const auto eq = kv.find('=');
            if (eq == std::string::npos || eq == 0) fail(ErrorCode::InvalidConfig, "expected key=value, got '" + kv + "'");
            cfg.set(kv.substr(0, eq), kv.substr(eq + 1));
        }
        if (seed) cfg.set("seed", std::to_string(*seed));
        if (!out_path.empty()) cfg.set("out", out_path);
        if (workers) {
            if (command != "benchmark") fail(ErrorCode::InvalidConfig, "--workers only applies to benchmark");
            cfg.set("workers", std::to_string(*workers));
        }
        if (command == "simulate") return cmd_simulate(cfg, out);
        if (command == "fit") return cmd_fit(cfg, out);
        if (command == "predict") return cmd_predict(cfg, out);
        if (command == "benchmark") return cmd_benchmark(cfg, out, err);
        if (command == "diagnose") return cmd_diagnose(cfg, out);
        fail(ErrorCode::InvalidConfig, "unknown command '" + command + "' (expected simulate, fit, predict, benchmark, diagnose)");
    } catch (const Error& e) {
        err << "error: kind=" << to_string(e.code()) << " message=" << one_line(e.what()) << '\n';
        return exit_code_for(e.code());
    } catch (const std::exception& e) {
        err << "error: kind=Internal message=" << one_line(e.what()) << '\n';
        return 2;
    }
}

} // namespace eplearn::cli
