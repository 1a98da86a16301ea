#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>

#include <gtest/gtest.h>

#include "eplearn/cli.hpp"

namespace fs = std::filesystem;

namespace {

struct CliRun {
    int code = -1;
    std::string out, err;
};

CliRun cli(std::vector<std::string> args) {
    args.insert(args.begin(), "eplearn");
    std::vector<const char*> argv;
    for (const auto& a : args) argv.push_back(a.c_str());
    std::ostringstream out, err;
    CliRun r;
    r.code = eplearn::cli::run_cli(static_cast<int>(argv.size()), argv.data(), out, err);
    r.out = out.str();
    r.err = err.str();
    return r;
}

std::string slurp(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    std::stringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

std::map<std::string, std::string> report_map(const std::string& text) {
    std::map<std::string, std::string> m;
    std::istringstream in(text);
    std::string line;
    while (std::getline(in, line)) {
        const auto eq = line.rfind('=');
        if (eq != std::string::npos) m[line.substr(0, eq)] = line.substr(eq + 1);
    }
    return m;
}

std::size_t line_count(const std::string& s) { return static_cast<std::size_t>(std::count(s.begin(), s.end(), '\n')); }

class Cli : public ::testing::Test {
protected:
    void SetUp() override {
        dir = fs::temp_directory_path() /
              ("eplearn_cli_" + std::string(::testing::UnitTest::GetInstance()->current_test_info()->name()));
        fs::remove_all(dir);
        fs::create_directories(dir);
    }
    void TearDown() override { fs::remove_all(dir); }
    std::string path(const std::string& name) const { return (dir / name).string(); }

    std::string simulate(const std::string& scenario, int n, std::uint64_t seed, const std::string& name) {
        const CliRun r = cli({"simulate", "scenario=" + scenario, "n=" + std::to_string(n), "--seed", std::to_string(seed),
                           "--out", path(name)});
        EXPECT_EQ(r.code, 0) << r.err;
        return path(name);
    }

    fs::path dir;
};

} // namespace

TEST_F(Cli, SimulateShapeAndDeterminism) {
    const auto a = simulate("cate_lowdim", 100, 3, "a.csv");
    const auto b = simulate("cate_lowdim", 100, 3, "b.csv");
    const std::string text = slurp(a);
    EXPECT_EQ(line_count(text), 101u);
    EXPECT_EQ(text.substr(0, text.find('\n')), "w1,w2,w3,a,y");
    EXPECT_EQ(text, slurp(b));
    EXPECT_EQ(slurp(path("a_theta0.csv")), slurp(path("b_theta0.csv")));
    EXPECT_EQ(line_count(slurp(path("a_theta0.csv"))), 101u);
    const auto c = simulate("cate_lowdim", 100, 4, "c.csv");
    EXPECT_NE(text, slurp(c));
}

TEST_F(Cli, SimulateRejectsBadScenario) {
    const CliRun r = cli({"simulate", "scenario=nope", "--out", path("x.csv")});
    EXPECT_EQ(r.code, 1);
    EXPECT_NE(r.err.find("kind=InvalidConfig"), std::string::npos);
    EXPECT_NE(r.err.find("scenario"), std::string::npos);
    EXPECT_FALSE(fs::exists(path("x.csv")));
}

TEST_F(Cli, FitEpPredictRoundTrip) {
    const auto data = simulate("cate_lowdim", 400, 5, "d.csv");
    const CliRun fit = cli({"fit", "data=" + data, "method=cv_ep", "k_grid=1,2,3", "ridge=0", "outcome=linear",
                         "stage2=boosted:2", "report=" + path("report.txt"), "--out", path("m.json"), "--seed", "1"});
    ASSERT_EQ(fit.code, 0) << fit.err;
    const auto rep = report_map(fit.out);
    EXPECT_EQ(rep.at("method"), "cv_ep");
    const int k = std::stoi(rep.at("k"));
    EXPECT_TRUE(k >= 1 && k <= 3) << k;
    EXPECT_LE(std::stod(rep.at("score_residual")), 1e-6);
    EXPECT_EQ(slurp(path("report.txt")), fit.out);

    const CliRun p1 = cli({"predict", "model=" + path("m.json"), "query=" + data});
    const CliRun p2 = cli({"predict", "model=" + path("m.json"), "query=" + data});
    ASSERT_EQ(p1.code, 0) << p1.err;
    EXPECT_EQ(p1.out, p2.out);
    EXPECT_EQ(line_count(p1.out), 401u);
    EXPECT_EQ(p1.out.substr(0, 6), "theta\n");

    // the same model object predicts the same values
    const auto model = eplearn::load_model(path("m.json"));
    const auto W = eplearn::read_covariates_csv(data);
    const Eigen::VectorXd theta = eplearn::predict_contrast(model, W);
    std::istringstream in(p1.out);
    std::string line;
    std::getline(in, line);
    for (Eigen::Index i = 0; i < theta.size(); ++i) {
        std::getline(in, line);
        EXPECT_NEAR(std::stod(line), theta[i], 1e-12 * (1 + std::abs(theta[i])));
    }

    // refitting with the same config reproduces the model file byte for byte
    const CliRun again = cli({"fit", "data=" + data, "method=cv_ep", "k_grid=1,2,3", "ridge=0", "outcome=linear",
                           "stage2=boosted:2", "--out", path("m2.json"), "--seed", "1"});
    ASSERT_EQ(again.code, 0) << again.err;
    EXPECT_EQ(slurp(path("m.json")), slurp(path("m2.json")));
}

TEST_F(Cli, FitCrrEpReportsCleanCensus) {
    const auto data = simulate("crr", 500, 6, "crr.csv");
    const CliRun fit = cli({"fit", "data=" + data, "method=ep", "family=crr", "k=2", "outcome=logistic",
                         "stage2=boosted:2", "--out", path("m.json")});
    ASSERT_EQ(fit.code, 0) << fit.err;
    const auto rep = report_map(fit.out);
    EXPECT_EQ(rep.at("negative_weight_count"), "0");
    EXPECT_EQ(rep.at("outside_unit_count"), "0");
}

TEST_F(Cli, PredictDimensionMismatch) {
    const auto data = simulate("cate_lowdim", 200, 7, "d.csv");
    ASSERT_EQ(cli({"fit", "data=" + data, "method=t", "stage2=linear", "--out", path("m.json")}).code, 0);
    {
        std::ofstream q(path("q.csv"));
        q << "w1,w2\n0.1,0.2\n";
    }
    const CliRun r = cli({"predict", "model=" + path("m.json"), "query=" + path("q.csv")});
    EXPECT_EQ(r.code, 1);
    EXPECT_NE(r.err.find("kind=DimensionMismatch"), std::string::npos) << r.err;
}

TEST_F(Cli, DrCrrRejected) {
    const auto data = simulate("crr", 200, 8, "crr.csv");
    const CliRun r = cli({"fit", "data=" + data, "method=dr", "family=crr", "--out", path("m.json")});
    EXPECT_EQ(r.code, 1);
    EXPECT_NE(r.err.find("kind=Unsupported"), std::string::npos);
    EXPECT_NE(r.err.find("DR CRR estimation unsupported (nonconvex loss); use diagnose"), std::string::npos);
}

TEST_F(Cli, MissingDataFileIsIOError) {
    const std::string missing = path("nowhere.csv");
    const CliRun r = cli({"fit", "data=" + missing, "method=t", "--out", path("m.json")});
    EXPECT_EQ(r.code, 2);
    EXPECT_NE(r.err.find("kind=IOError"), std::string::npos);
    EXPECT_NE(r.err.find(missing), std::string::npos);
}

TEST_F(Cli, ValidationErrors) {
    const CliRun unknown = cli({"simulate", "scenario=crr", "colour=blue", "--out", path("x.csv")});
    EXPECT_EQ(unknown.code, 1);
    EXPECT_NE(unknown.err.find("colour"), std::string::npos);

    const CliRun workers = cli({"simulate", "scenario=crr", "--workers", "2", "--out", path("x.csv")});
    EXPECT_EQ(workers.code, 1);
    EXPECT_NE(workers.err.find("--workers"), std::string::npos);

    const CliRun command = cli({"frobnicate"});
    EXPECT_EQ(command.code, 1);
    EXPECT_NE(command.err.find("unknown command"), std::string::npos);

    const CliRun malformed = cli({"simulate", "scenario"});
    EXPECT_EQ(malformed.code, 1);

    const CliRun help = cli({"--help"});
    EXPECT_EQ(help.code, 0);
    EXPECT_NE(help.out.find("simulate"), std::string::npos);

    // every error is a single machine-parsable line
    for (const CliRun* r : {&unknown, &workers, &command, &malformed}) {
        EXPECT_EQ(r->err.rfind("error: kind=", 0), 0u) << r->err;
        EXPECT_EQ(line_count(r->err), 1u);
    }
}

TEST_F(Cli, ConfigFileAndFlagPrecedence) {
    {
        std::ofstream c(path("run.cfg"));
        c << "# simulation settings\n"
          << "scenario = cate_lowdim\n"
          << "n = 60   # small\n"
          << "seed = 11\n";
    }
    ASSERT_EQ(cli({"simulate", "--config", path("run.cfg"), "--out", path("a.csv")}).code, 0);
    ASSERT_EQ(cli({"simulate", "scenario=cate_lowdim", "n=60", "seed=11", "--out", path("b.csv")}).code, 0);
    EXPECT_EQ(slurp(path("a.csv")), slurp(path("b.csv")));
    // the flag wins over the file and over key=value
    ASSERT_EQ(cli({"simulate", "--config", path("run.cfg"), "n=80", "--seed", "12", "--out", path("c.csv")}).code, 0);
    ASSERT_EQ(cli({"simulate", "scenario=cate_lowdim", "n=80", "seed=12", "--out", path("d.csv")}).code, 0);
    EXPECT_EQ(slurp(path("c.csv")), slurp(path("d.csv")));
    EXPECT_EQ(line_count(slurp(path("c.csv"))), 81u);

    {
        std::ofstream c(path("bad.cfg"));
        c << "scenario cate_lowdim\n";
    }
    const CliRun bad = cli({"simulate", "--config", path("bad.cfg"), "--out", path("e.csv")});
    EXPECT_EQ(bad.code, 1);
    EXPECT_NE(bad.err.find("kind=ParseError"), std::string::npos);
    EXPECT_NE(bad.err.find("bad.cfg:1"), std::string::npos);
}

TEST_F(Cli, DiagnoseReports) {
    const CliRun crr = cli({"diagnose", "scenario=crr", "overlap=limited", "n=800", "seed=2", "outcome=logistic",
                         "k_grid=1,2"});
    ASSERT_EQ(crr.code, 0) << crr.err;
    const auto c = report_map(crr.out);
    EXPECT_EQ(c.at("ep_negative_weights"), "0");
    EXPECT_EQ(c.at("ep_outcomes_outside_unit"), "0");
    EXPECT_GE(std::stoi(c.at("dr_negative_weights")), 0);
    EXPECT_LE(std::stod(c.at("score_residual[k=1]")), 1e-6);
    EXPECT_LE(std::stod(c.at("score_residual[k=2]")), 1e-6);

    const CliRun cate = cli({"diagnose", "scenario=intro", "n=400", "seed=3", "outcome=logistic", "k_grid=2"});
    ASSERT_EQ(cate.code, 0) << cate.err;
    const auto m = report_map(cate.out);
    EXPECT_LE(std::stod(m.at("chi_min")), std::stod(m.at("chi_q0.5")));
    EXPECT_LE(std::stod(m.at("chi_q0.5")), std::stod(m.at("chi_max")));
    EXPECT_EQ(std::stod(m.at("chi_max_abs")),
              std::max(std::abs(std::stod(m.at("chi_min"))), std::abs(std::stod(m.at("chi_max")))));

    const CliRun both = cli({"diagnose", "scenario=crr", "data=" + path("x.csv")});
    EXPECT_EQ(both.code, 1);
}

TEST_F(Cli, BenchmarkDeterministicAcrossWorkers) {
    const std::vector<std::string> base{"benchmark",  "scenarios=cate_lowdim,crr", "methods=t,dr,ep", "n_list=150",
                                        "reps=2",     "eval_points=200",           "J=3",              "outcome=boosted:2",
                                        "k_grid=1,2", "learners=boosted",          "stage2_max_depth=2", "stage2_cv_folds=3"};
    auto with = [&](std::vector<std::string> extra) {
        auto args = base;
        args.insert(args.end(), extra.begin(), extra.end());
        return cli(args);
    };
    const CliRun a = with({"--seed", "5"});
    const CliRun b = with({"--seed", "5"});
    const CliRun c = with({"--seed", "5", "--workers", "3"});
    ASSERT_EQ(a.code, 0) << a.err;
    EXPECT_EQ(a.out, b.out);
    EXPECT_EQ(a.out, c.out);
    // 2 reps x (cate: t, dr, ep + crr: t, ep)
    EXPECT_EQ(line_count(a.out), 1u + 2u * 5u);
    const CliRun d = with({"--seed", "6"});
    EXPECT_NE(a.out, d.out);
}

TEST_F(Cli, BinaryExitCodes) {
    const std::string bin = EPLEARN_CLI_PATH;
    auto status = [&](const std::string& args) {
        const int raw = std::system((bin + " " + args + " >" + path("o.txt") + " 2>" + path("e.txt")).c_str());
        return WEXITSTATUS(raw);
    };
    EXPECT_EQ(status("--help"), 0);
    EXPECT_EQ(status("simulate scenario=cate_lowdim n=60 --out " + path("s.csv")), 0);
    EXPECT_EQ(line_count(slurp(path("s.csv"))), 61u);
    EXPECT_EQ(status("simulate scenario=bogus --out " + path("s.csv")), 1);
    EXPECT_EQ(slurp(path("e.txt")).rfind("error: kind=InvalidConfig", 0), 0u);
    EXPECT_EQ(status("predict model=" + path("missing.json") + " query=" + path("s.csv")), 2);
    EXPECT_EQ(slurp(path("e.txt")).rfind("error: kind=IOError", 0), 0u);
}
