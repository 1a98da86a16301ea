#pragma once

#include <cmath>
#include <cstdint>
#include <fstream>
#include <istream>
#include <limits>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <json.hpp>

#include "eplearn/error.hpp"
#include "eplearn/learners.hpp"
#include "eplearn/metalearners.hpp"

namespace eplearn {

using Json = nlohmann::json;

inline constexpr const char* model_format_name = "eplearn-contrast-model";
inline constexpr int model_format_version = 1;

namespace io {

// JSON numbers cannot hold NaN or infinities; those travel as strings.
inline Json put(double v) {
    if (std::isnan(v)) return "nan";
    if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
    return v;
}

inline double get_double(const Json& j, const std::string& what) {
    if (j.is_number()) return j.get<double>();
    if (j.is_string()) {
        const auto s = j.get<std::string>();
        if (s == "nan") return std::numeric_limits<double>::quiet_NaN();
        if (s == "inf") return std::numeric_limits<double>::infinity();
        if (s == "-inf") return -std::numeric_limits<double>::infinity();
    }
    fail(ErrorCode::ParseError, "model file: '" + what + "' is not a number");
}

inline const Json& field(const Json& j, const char* key) {
    if (!j.is_object() || !j.contains(key)) fail(ErrorCode::ParseError, std::string("model file: missing '") + key + "'");
    return j.at(key);
}

inline double number(const Json& j, const char* key) { return get_double(field(j, key), key); }

template <class T>
T integer(const Json& j, const char* key) {
    const Json& v = field(j, key);
    if (!v.is_number_integer()) fail(ErrorCode::ParseError, std::string("model file: '") + key + "' is not an integer");
    return v.get<T>();
}

inline std::string text(const Json& j, const char* key) {
    const Json& v = field(j, key);
    if (!v.is_string()) fail(ErrorCode::ParseError, std::string("model file: '") + key + "' is not a string");
    return v.get<std::string>();
}

inline Json put(const Eigen::VectorXd& v) {
    Json out = Json::array();
    for (Eigen::Index i = 0; i < v.size(); ++i) out.push_back(put(v[i]));
    return out;
}

inline Eigen::VectorXd vector(const Json& j, const char* key) {
    const Json& v = field(j, key);
    if (!v.is_array()) fail(ErrorCode::ParseError, std::string("model file: '") + key + "' is not an array");
    Eigen::VectorXd out(static_cast<Eigen::Index>(v.size()));
    for (std::size_t i = 0; i < v.size(); ++i) out[static_cast<Eigen::Index>(i)] = get_double(v[i], key);
    return out;
}

inline Json put(const Eigen::MatrixXd& m) {
    Json out = Json::array();
    for (Eigen::Index i = 0; i < m.rows(); ++i) {
        Json row = Json::array();
        for (Eigen::Index c = 0; c < m.cols(); ++c) row.push_back(put(m(i, c)));
        out.push_back(std::move(row));
    }
    return out;
}

inline Eigen::MatrixXd matrix(const Json& j, const char* key, Eigen::Index cols) {
    const Json& v = field(j, key);
    if (!v.is_array()) fail(ErrorCode::ParseError, std::string("model file: '") + key + "' is not an array");
    Eigen::MatrixXd out(static_cast<Eigen::Index>(v.size()), cols);
    for (std::size_t i = 0; i < v.size(); ++i) {
        if (!v[i].is_array() || static_cast<Eigen::Index>(v[i].size()) != cols) {
            fail(ErrorCode::ParseError, std::string("model file: ragged matrix '") + key + "'");
        }
        for (Eigen::Index c = 0; c < cols; ++c) {
            out(static_cast<Eigen::Index>(i), c) = get_double(v[i][static_cast<std::size_t>(c)], key);
        }
    }
    return out;
}

inline std::string link_name(Link l) { return l == Link::logit ? "logit" : "identity"; }

inline Link parse_link(const std::string& s) {
    if (s == "identity") return Link::identity;
    if (s == "logit") return Link::logit;
    fail(ErrorCode::ParseError, "model file: unknown link '" + s + "'");
}

} // namespace io

inline Json to_json(const LearnerConfig& c) {
    return Json{{"kind", to_string(c.kind)},
                {"neighbors", c.neighbors},
                {"bandwidth", io::put(c.bandwidth)},
                {"depth", c.depth},
                {"rounds", c.rounds},
                {"learning_rate", io::put(c.learning_rate)},
                {"ridge", io::put(c.ridge)},
                {"min_leaf", c.min_leaf},
                {"series", c.series},
                {"link", io::link_name(c.link)}};
}

inline LearnerConfig learner_config_from_json(const Json& j) {
    LearnerConfig c;
    c.kind = parse_learner_kind(io::text(j, "kind"));
    c.neighbors = io::integer<int>(j, "neighbors");
    c.bandwidth = io::number(j, "bandwidth");
    c.depth = io::integer<int>(j, "depth");
    c.rounds = io::integer<int>(j, "rounds");
    c.learning_rate = io::number(j, "learning_rate");
    c.ridge = io::number(j, "ridge");
    c.min_leaf = io::integer<int>(j, "min_leaf");
    c.series = io::integer<int>(j, "series");
    c.link = io::parse_link(io::text(j, "link"));
    return c;
}

inline Json to_json(const FittedRegressor& f) {
    Json model;
    std::visit(
        [&](const auto& m) {
            using M = std::decay_t<decltype(m)>;
            if constexpr (std::is_same_v<M, LinearModel>) {
                model = {{"type", "linear"}, {"intercept", io::put(m.intercept)}, {"beta", io::put(m.beta)}};
                if (m.basis) {
                    const auto& b = *m.basis;
                    Json lo = Json::array(), hi = Json::array();
                    for (double v : b.lower()) lo.push_back(io::put(v));
                    for (double v : b.upper()) hi.push_back(io::put(v));
                    model["basis"] = {{"frequencies", b.frequencies()},
                                      {"input_dim", b.input_dim()},
                                      {"dims", b.kept_dims()},
                                      {"lower", lo},
                                      {"upper", hi}};
                } else {
                    model["basis"] = nullptr;
                }
            } else if constexpr (std::is_same_v<M, KnnModel>) {
                model = {{"type", "knn"}, {"X", io::put(m.X)}, {"y", io::put(m.y)}, {"w", io::put(m.w)}, {"k", m.k}};
            } else if constexpr (std::is_same_v<M, KernelModel>) {
                model = {{"type", "kernel"},
                         {"X", io::put(m.X)},
                         {"y", io::put(m.y)},
                         {"w", io::put(m.w)},
                         {"bandwidth", io::put(m.bandwidth)},
                         {"global_mean", io::put(m.global_mean)}};
            } else {
                Json trees = Json::array();
                for (const auto& tree : m.trees) {
                    Json nodes = Json::array();
                    for (const auto& n : tree.nodes) {
                        nodes.push_back(Json::array({n.feature, io::put(n.threshold), n.left, n.right, io::put(n.value)}));
                    }
                    trees.push_back(std::move(nodes));
                }
                model = {{"type", "trees"},
                         {"base", io::put(m.base)},
                         {"learning_rate", io::put(m.learning_rate)},
                         {"link", io::link_name(m.link)},
                         {"trees", std::move(trees)}};
            }
        },
        f.model());
    return Json{{"kind", to_string(f.kind())}, {"link", io::link_name(f.link())}, {"dim", f.dim()}, {"model", model}};
}

inline FittedRegressor fitted_regressor_from_json(const Json& j) {
    const LearnerKind kind = parse_learner_kind(io::text(j, "kind"));
    const Link link = io::parse_link(io::text(j, "link"));
    const auto dim = io::integer<Eigen::Index>(j, "dim");
    const Json& m = io::field(j, "model");
    const std::string type = io::text(m, "type");
    if (type == "linear") {
        LinearModel lm;
        lm.intercept = io::number(m, "intercept");
        lm.beta = io::vector(m, "beta");
        const Json& b = io::field(m, "basis");
        if (!b.is_null()) {
            const Json& lo = io::field(b, "lower");
            const Json& hi = io::field(b, "upper");
            std::vector<double> lov, hiv;
            for (const auto& v : lo) lov.push_back(io::get_double(v, "lower"));
            for (const auto& v : hi) hiv.push_back(io::get_double(v, "upper"));
            lm.basis = CosineBasis::from_parts(io::integer<int>(b, "frequencies"), io::integer<Eigen::Index>(b, "input_dim"),
                                               io::field(b, "dims").get<std::vector<Eigen::Index>>(), std::move(lov),
                                               std::move(hiv));
        }
        return FittedRegressor(kind, link, dim, std::move(lm));
    }
    if (type == "knn") {
        KnnModel km{io::matrix(m, "X", dim), io::vector(m, "y"), io::vector(m, "w"), io::integer<int>(m, "k")};
        return FittedRegressor(kind, link, dim, std::move(km));
    }
    if (type == "kernel") {
        KernelModel km{io::matrix(m, "X", dim), io::vector(m, "y"), io::vector(m, "w"), io::number(m, "bandwidth"),
                       io::number(m, "global_mean")};
        return FittedRegressor(kind, link, dim, std::move(km));
    }
    if (type == "trees") {
        TreeEnsemble te;
        te.base = io::number(m, "base");
        te.learning_rate = io::number(m, "learning_rate");
        te.link = io::parse_link(io::text(m, "link"));
        for (const auto& tj : io::field(m, "trees")) {
            RegressionTree tree;
            for (const auto& nj : tj) {
                if (!nj.is_array() || nj.size() != 5) fail(ErrorCode::ParseError, "model file: malformed tree node");
                TreeNode n;
                n.feature = nj[0].get<int>();
                n.threshold = io::get_double(nj[1], "threshold");
                n.left = nj[2].get<int>();
                n.right = nj[3].get<int>();
                n.value = io::get_double(nj[4], "value");
                tree.nodes.push_back(n);
            }
            const int count = static_cast<int>(tree.nodes.size());
            for (const auto& n : tree.nodes) {
                if (n.feature >= dim || (n.feature >= 0 && (n.left <= 0 || n.left >= count || n.right <= 0 ||
                                                            n.right >= count))) {
                    fail(ErrorCode::ParseError, "model file: tree node refers outside the tree");
                }
            }
            if (tree.nodes.empty()) fail(ErrorCode::ParseError, "model file: empty tree");
            te.trees.push_back(std::move(tree));
        }
        return FittedRegressor(kind, link, dim, std::move(te));
    }
    fail(ErrorCode::ParseError, "model file: unknown regressor type '" + type + "'");
}

inline Json to_json(const ContrastModel& m) {
    Json stages = Json::array();
    for (const auto& s : m.stages) stages.push_back(to_json(s));
    Json crit = Json::array();
    for (double v : m.cv_criterion) crit.push_back(io::put(v));
    Json clamp = nullptr;
    if (m.mu_clamp) clamp = Json::array({io::put(m.mu_clamp->first), io::put(m.mu_clamp->second)});
    return Json{{"format", model_format_name},
                {"version", model_format_version},
                {"method", to_string(m.method)},
                {"family", to_string(m.family)},
                {"dim", m.dim},
                {"stage2", to_json(m.stage2)},
                {"truncated", m.truncated},
                {"lower", io::put(m.lower)},
                {"upper", io::put(m.upper)},
                {"mu_clamp", clamp},
                {"k", m.k},
                {"k_grid", m.k_grid},
                {"cv_criterion", crit},
                {"score_residual", io::put(m.score_residual)},
                {"negative_weight_count", m.negative_weight_count},
                {"outside_unit_count", m.outside_unit_count},
                {"seed", m.seed},
                {"warnings", m.warnings},
                {"stages", stages}};
}

inline ContrastModel contrast_model_from_json(const Json& j) {
    if (io::text(j, "format") != model_format_name) fail(ErrorCode::ParseError, "not an eplearn model file");
    if (io::integer<int>(j, "version") != model_format_version) {
        fail(ErrorCode::ParseError, "unsupported model file version");
    }
    ContrastModel m;
    m.method = parse_method(io::text(j, "method"));
    m.family = parse_family(io::text(j, "family"));
    m.dim = io::integer<Eigen::Index>(j, "dim");
    m.stage2 = learner_config_from_json(io::field(j, "stage2"));
    m.truncated = io::field(j, "truncated").get<bool>();
    m.lower = io::number(j, "lower");
    m.upper = io::number(j, "upper");
    const Json& clamp = io::field(j, "mu_clamp");
    if (!clamp.is_null()) {
        if (!clamp.is_array() || clamp.size() != 2) fail(ErrorCode::ParseError, "model file: malformed mu_clamp");
        m.mu_clamp = std::make_pair(io::get_double(clamp[0], "mu_clamp"), io::get_double(clamp[1], "mu_clamp"));
    }
    m.k = io::integer<int>(j, "k");
    m.k_grid = io::field(j, "k_grid").get<std::vector<int>>();
    for (const auto& v : io::field(j, "cv_criterion")) m.cv_criterion.push_back(io::get_double(v, "cv_criterion"));
    m.score_residual = io::number(j, "score_residual");
    m.negative_weight_count = io::integer<Eigen::Index>(j, "negative_weight_count");
    m.outside_unit_count = io::integer<Eigen::Index>(j, "outside_unit_count");
    m.seed = io::integer<std::uint64_t>(j, "seed");
    m.warnings = io::field(j, "warnings").get<std::vector<std::string>>();
    for (const auto& s : io::field(j, "stages")) {
        auto reg = fitted_regressor_from_json(s);
        if (reg.dim() != m.dim) fail(ErrorCode::ParseError, "model file: stage dimension does not match the model");
        m.stages.push_back(std::move(reg));
    }
    const std::size_t want = m.method == Method::T ? 2 : 1;
    if (m.stages.size() != want) fail(ErrorCode::ParseError, "model file: wrong number of fitted stages");
    return m;
}

inline void save_model(std::ostream& out, const ContrastModel& m) { out << to_json(m).dump(1) << '\n'; }

inline void save_model(const std::string& path, const ContrastModel& m) {
    std::ofstream out(path, std::ios::binary);
    if (!out) fail(ErrorCode::IOError, "cannot open '" + path + "' for writing");
    save_model(out, m);
    if (!out) fail(ErrorCode::IOError, "failed writing '" + path + "'");
}

inline ContrastModel load_model(std::istream& in, const std::string& source = "<stream>") {
    Json j;
    try {
        j = Json::parse(in);
    } catch (const Json::exception& e) {
        fail(ErrorCode::ParseError, source + ": " + e.what());
    }
    try {
        return contrast_model_from_json(j);
    } catch (const Json::exception& e) {
        fail(ErrorCode::ParseError, source + ": " + e.what());
    }
}

inline ContrastModel load_model(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) fail(ErrorCode::IOError, "cannot open model file '" + path + "'");
    return load_model(in, path);
}

} // namespace eplearn
