#pragma once

#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "eplearn/error.hpp"

namespace eplearn {

/// Observations (W, A, Y) with binary treatment. Immutable once built; the
/// constructor enforces the invariants so every Dataset in flight is valid.
class Dataset {
public:
    Dataset(Eigen::MatrixXd covariates, Eigen::VectorXi treatment, Eigen::VectorXd outcome)
        : covariates_(std::move(covariates)),
          treatment_(std::move(treatment)),
          outcome_(std::move(outcome)) {
        const auto n = covariates_.rows();
        if (n < 1) {
            fail(ErrorCode::EmptyData, "dataset has no rows");
        }
        if (treatment_.size() != n || outcome_.size() != n) {
            fail(ErrorCode::DimensionMismatch, "covariate, treatment and outcome lengths differ");
        }
        for (Eigen::Index i = 0; i < n; ++i) {
            if (treatment_[i] != 0 && treatment_[i] != 1) {
                fail(ErrorCode::NonBinaryTreatment,
                     "row " + std::to_string(i + 1) + ": treatment must be 0 or 1");
            }
            if (!std::isfinite(outcome_[i])) {
                fail(ErrorCode::NonFiniteValue, "row " + std::to_string(i + 1) + ": outcome is not finite");
            }
            for (Eigen::Index r = 0; r < covariates_.cols(); ++r) {
                if (!std::isfinite(covariates_(i, r))) {
                    fail(ErrorCode::NonFiniteValue, "row " + std::to_string(i + 1) + ": covariate w" +
                                                        std::to_string(r + 1) + " is not finite");
                }
            }
        }
    }

    Eigen::Index n() const { return covariates_.rows(); }
    Eigen::Index d() const { return covariates_.cols(); }

    const Eigen::MatrixXd& covariates() const { return covariates_; }
    const Eigen::VectorXi& treatment() const { return treatment_; }
    const Eigen::VectorXd& outcome() const { return outcome_; }

    int a(Eigen::Index i) const { return treatment_[i]; }
    double y(Eigen::Index i) const { return outcome_[i]; }

    bool outcome_in_unit_interval() const {
        return outcome_.minCoeff() >= 0.0 && outcome_.maxCoeff() <= 1.0;
    }

    bool outcome_binary() const {
        for (Eigen::Index i = 0; i < n(); ++i) {
            if (outcome_[i] != 0.0 && outcome_[i] != 1.0) return false;
        }
        return true;
    }

    /// Copy with a replaced outcome column (still validated).
    Dataset with_outcome(Eigen::VectorXd outcome) const {
        return Dataset(covariates_, treatment_, std::move(outcome));
    }

    /// Copy restricted to the given rows, in the given order.
    Dataset subset(const std::vector<Eigen::Index>& rows) const {
        Eigen::MatrixXd w(static_cast<Eigen::Index>(rows.size()), d());
        Eigen::VectorXi a(static_cast<Eigen::Index>(rows.size()));
        Eigen::VectorXd y(static_cast<Eigen::Index>(rows.size()));
        for (std::size_t k = 0; k < rows.size(); ++k) {
            const auto i = rows[k];
            w.row(static_cast<Eigen::Index>(k)) = covariates_.row(i);
            a[static_cast<Eigen::Index>(k)] = treatment_[i];
            y[static_cast<Eigen::Index>(k)] = outcome_[i];
        }
        return Dataset(std::move(w), std::move(a), std::move(y));
    }

private:
    Eigen::MatrixXd covariates_;
    Eigen::VectorXi treatment_;
    Eigen::VectorXd outcome_;
};

/// Builds a Dataset from raw rows laid out as (w1..wd, a, y).
inline Dataset validate_dataset(const std::vector<std::vector<double>>& rows) {
    if (rows.empty()) {
        fail(ErrorCode::EmptyData, "table has no rows");
    }
    const std::size_t width = rows.front().size();
    if (width < 2) {
        fail(ErrorCode::ParseError, "row 1: expected at least the a and y columns");
    }
    const auto n = static_cast<Eigen::Index>(rows.size());
    const auto d = static_cast<Eigen::Index>(width - 2);
    Eigen::MatrixXd w(n, d);
    Eigen::VectorXi a(n);
    Eigen::VectorXd y(n);
    for (Eigen::Index i = 0; i < n; ++i) {
        const auto& row = rows[static_cast<std::size_t>(i)];
        const std::string where = "row " + std::to_string(i + 1);
        if (row.size() != width) {
            fail(ErrorCode::ParseError, where + ": expected " + std::to_string(width) + " columns, found " +
                                            std::to_string(row.size()));
        }
        for (std::size_t c = 0; c < width; ++c) {
            if (!std::isfinite(row[c])) {
                fail(ErrorCode::NonFiniteValue, where + ": column " + std::to_string(c + 1) + " is not finite");
            }
        }
        const double av = row[width - 2];
        if (av != 0.0 && av != 1.0) {
            fail(ErrorCode::NonBinaryTreatment, where + ": treatment must be 0 or 1");
        }
        for (Eigen::Index r = 0; r < d; ++r) w(i, r) = row[static_cast<std::size_t>(r)];
        a[i] = static_cast<int>(av);
        y[i] = row[width - 1];
    }
    return Dataset(std::move(w), std::move(a), std::move(y));
}

namespace csv {

inline std::vector<std::string> split_line(const std::string& line) {
    std::vector<std::string> out;
    std::string cell;
    std::istringstream stream(line);
    while (std::getline(stream, cell, ',')) {
        while (!cell.empty() && (cell.back() == '\r' || cell.back() == ' ')) cell.pop_back();
        while (!cell.empty() && cell.front() == ' ') cell.erase(cell.begin());
        out.push_back(cell);
    }
    if (!line.empty() && line.back() == ',') out.emplace_back();
    return out;
}

inline double parse_number(const std::string& text, const std::string& where) {
    if (text == "nan" || text == "NaN" || text == "NA") return std::nan("");
    std::size_t used = 0;
    double value = 0.0;
    try {
        value = std::stod(text, &used);
    } catch (const std::exception&) {
        fail(ErrorCode::ParseError, where + ": cannot parse '" + text + "' as a number");
    }
    if (used != text.size()) {
        fail(ErrorCode::ParseError, where + ": trailing characters in '" + text + "'");
    }
    return value;
}

/// Shortest text that reads back to the same double.
inline std::string format_double(double value) {
    char buf[64];
    for (int precision = 1; precision <= 17; ++precision) {
        std::snprintf(buf, sizeof buf, "%.*g", precision, value);
        if (std::strtod(buf, nullptr) == value) break;
    }
    return buf;
}

/// Parses a numeric CSV with a header. Returns the header and the rows.
inline std::pair<std::vector<std::string>, std::vector<std::vector<double>>>
read_numeric(std::istream& in, const std::string& source) {
    std::string line;
    if (!std::getline(in, line)) {
        fail(ErrorCode::EmptyData, source + ": file is empty");
    }
    auto header = split_line(line);
    std::vector<std::vector<double>> rows;
    std::size_t row_number = 0;
    while (std::getline(in, line)) {
        if (line.empty() || line == "\r") continue;
        ++row_number;
        const auto cells = split_line(line);
        const std::string where = source + ": row " + std::to_string(row_number);
        if (cells.size() != header.size()) {
            fail(ErrorCode::ParseError, where + ": expected " + std::to_string(header.size()) + " columns, found " +
                                            std::to_string(cells.size()));
        }
        std::vector<double> values;
        values.reserve(cells.size());
        for (const auto& cell : cells) values.push_back(parse_number(cell, where));
        rows.push_back(std::move(values));
    }
    return {std::move(header), std::move(rows)};
}

} // namespace csv

/// Reads the `w1,...,wd,a,y` dataset format.
inline Dataset read_dataset_csv(std::istream& in, const std::string& source = "<stream>") {
    auto [header, rows] = csv::read_numeric(in, source);
    if (header.size() < 2 || header[header.size() - 2] != "a" || header.back() != "y") {
        fail(ErrorCode::ParseError, source + ": header must be w1,...,wd,a,y");
    }
    for (std::size_t r = 0; r + 2 < header.size(); ++r) {
        if (header[r] != "w" + std::to_string(r + 1)) {
            fail(ErrorCode::ParseError, source + ": header column " + std::to_string(r + 1) + " must be w" +
                                            std::to_string(r + 1));
        }
    }
    if (rows.empty()) {
        fail(ErrorCode::EmptyData, source + ": no data rows");
    }
    try {
        return validate_dataset(rows);
    } catch (const Error& e) {
        throw Error(e.code(), source + ": " + e.what());
    }
}

inline Dataset read_dataset_csv(const std::string& path) {
    std::ifstream in(path);
    if (!in) {
        fail(ErrorCode::IOError, "cannot open '" + path + "' for reading");
    }
    return read_dataset_csv(in, path);
}

inline void write_dataset_csv(std::ostream& out, const Dataset& data) {
    for (Eigen::Index r = 0; r < data.d(); ++r) out << 'w' << (r + 1) << ',';
    out << "a,y\n";
    for (Eigen::Index i = 0; i < data.n(); ++i) {
        for (Eigen::Index r = 0; r < data.d(); ++r) out << csv::format_double(data.covariates()(i, r)) << ',';
        out << data.a(i) << ',' << csv::format_double(data.y(i)) << '\n';
    }
}

/// Reads a covariate-only query file (`w1,...,wd`).
inline Eigen::MatrixXd read_covariates_csv(const std::string& path) {
    std::ifstream in(path);
    if (!in) {
        fail(ErrorCode::IOError, "cannot open '" + path + "' for reading");
    }
    auto [header, rows] = csv::read_numeric(in, path);
    // A full dataset file is also accepted; a and y are ignored.
    std::size_t d = header.size();
    if (header.size() >= 2 && header[header.size() - 2] == "a" && header.back() == "y") d -= 2;
    Eigen::MatrixXd w(static_cast<Eigen::Index>(rows.size()), static_cast<Eigen::Index>(d));
    for (std::size_t i = 0; i < rows.size(); ++i) {
        for (std::size_t r = 0; r < d; ++r) {
            if (!std::isfinite(rows[i][r])) {
                fail(ErrorCode::NonFiniteValue, path + ": row " + std::to_string(i + 1) + " is not finite");
            }
            w(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(r)) = rows[i][r];
        }
    }
    return w;
}

} // namespace eplearn
