#include <gtest/gtest.h>

#include <sys/wait.h>
#include <unistd.h>

#include <cstdlib>
#include <fstream>
#include <sstream>

#include "synthetic.hpp"
#include "warp_lca/metrics.hpp"
#include "warp_lca/storage.hpp"

using namespace warp_lca;
using nlohmann::json;
namespace fs = std::filesystem;

namespace {

struct CliRun {
    int status = -1;
    std::string out;
    std::string err;
    json summary() const { return json::parse(out); }
    json error() const { return json::parse(err.substr(err.rfind("{\"error\""))); }
};

std::string slurp(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    std::stringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

std::size_t line_count(const fs::path& p) {
    const std::string s = slurp(p);
    return static_cast<std::size_t>(std::count(s.begin(), s.end(), '\n'));
}

class Cli : public ::testing::Test {
protected:
    static fs::path root_;

    static void SetUpTestSuite() {
        root_ = fs::temp_directory_path() / ("warp_lca_cli_" + std::to_string(::getpid()));
        fs::remove_all(root_);
        fs::create_directories(root_ / "pgm");
        const auto dict = warp_lca::testing::gabor_dictionary(8, 5, 2);
        auto train = warp_lca::testing::synthetic_images(dict, 8, 16, 16, 0.05, 1);
        auto test = warp_lca::testing::synthetic_images(dict, 3, 16, 16, 0.05, 2);
        write_tensor(root_ / "train.wtns", stack(std::span<const Tensor4>(train)));
        write_tensor(root_ / "test.wtns", stack(std::span<const Tensor4>(test)));
        save_image(root_ / "pgm" / "a_zero.pgm", Tensor4(Shape4{1, 1, 16, 16}, 0.0));
        save_image(root_ / "pgm" / "b_image.pgm", train[0]);

        ASSERT_EQ(run("learn-dict --data train.wtns --features 8 --kernel 5 --epochs 3 --ista-steps 30 "
                      "--increase-factor 1 --lambda0 0.1 --eta 0.05 --seed 4 --out dict")
                      .status,
                  0);
        ASSERT_EQ(run("encode --data train.wtns --dictionary dict/dictionary.wtns --lambdas 0.15,0.2 --n-iters 100 "
                      "--out enc")
                      .status,
                  0);
        ASSERT_EQ(run("train-predictor --states enc --dictionary dict/dictionary.wtns --epochs 2 --trunk-widths 4,4 "
                      "--branch-width 4 --lr 1e-3 --seed 1 --out pred")
                      .status,
                  0);
    }

    static void TearDownTestSuite() { fs::remove_all(root_); }

    static CliRun run(const std::string& args) {
        const fs::path out = root_ / "stdout.txt", err = root_ / "stderr.txt";
        const std::string cmd = "cd '" + root_.string() + "' && '" WARP_LCA_CLI_PATH "' " + args + " > '" + out.string() +
                                "' 2> '" + err.string() + "'";
        const int raw = std::system(cmd.c_str());
        CliRun r;
        r.status = WIFEXITED(raw) ? WEXITSTATUS(raw) : -1;
        r.out = slurp(out);
        r.err = slurp(err);
        return r;
    }

    static const char* dict() { return "--dictionary dict/dictionary.wtns"; }
};

fs::path Cli::root_;

} // namespace

TEST_F(Cli, HelpExitsZero) {
    const CliRun r = run("--help");
    EXPECT_EQ(r.status, 0);
    for (const char* verb : {"learn-dict", "encode", "train-predictor", "compare", "denoise", "activation-map", "step-sweep"})
        EXPECT_NE(r.out.find(verb), std::string::npos) << verb;
}

TEST_F(Cli, UsageErrorsAreJson) {
    CliRun r = run("frobnicate");
    EXPECT_EQ(r.status, 2);
    EXPECT_EQ(r.error()["error"]["kind"], "usage");
    r = run("encode --dictionary dict/dictionary.wtns");
    EXPECT_EQ(r.status, 2);
    EXPECT_NE(r.error()["error"]["message"].get<std::string>().find("--data"), std::string::npos);
}

TEST_F(Cli, RuntimeErrorsAreJson) {
    CliRun r = run(std::string("compare --cold-only --data missing.wtns ") + dict() + " --out e1");
    EXPECT_EQ(r.status, 1);
    EXPECT_EQ(r.error()["error"]["kind"], "io");
    EXPECT_EQ(r.error()["error"]["command"], "compare");
    r = run(std::string("compare --data test.wtns ") + dict() + " --threshold cel0 --cold-only --out e2");
    EXPECT_EQ(r.status, 1);
    EXPECT_EQ(r.error()["error"]["kind"], "config");
}

TEST_F(Cli, ScientificNotationForNumericFlags) {
    CliRun r = run(std::string("compare --cold-only --data test.wtns ") + dict() +
                " --n-iters 2.5e1 --track-every 1e1 --tau 2e2 --lambda 1.5e-1 --out sci");
    ASSERT_EQ(r.status, 0) << r.err;
    EXPECT_EQ(r.summary()["solver"]["n_iters"], 25);
    EXPECT_DOUBLE_EQ(r.summary()["solver"]["tau"].get<double>(), 200.0);
    r = run(std::string("compare --cold-only --data test.wtns ") + dict() + " --n-iters 2.5 --out sci2");
    EXPECT_EQ(r.status, 2);
}

TEST_F(Cli, LearnDictZeroEpochsAndDeterminism) {
    CliRun a = run("learn-dict --data train.wtns --features 4 --kernel 5 --epochs 0 --ista-steps 5 --increase-factor 1 "
                "--seed 9 --out ld0a");
    CliRun b = run("learn-dict --data train.wtns --features 4 --kernel 5 --epochs 0 --ista-steps 5 --increase-factor 1 "
                "--seed 9 --out ld0b");
    CliRun c = run("learn-dict --data train.wtns --features 4 --kernel 5 --epochs 0 --ista-steps 5 --increase-factor 1 "
                "--seed 10 --out ld0c");
    ASSERT_EQ(a.status, 0) << a.err;
    EXPECT_EQ(a.summary()["fingerprint"], b.summary()["fingerprint"]);
    EXPECT_NE(a.summary()["fingerprint"], c.summary()["fingerprint"]);
    const Dictionary d = load_dictionary(root_ / "ld0a" / "dictionary.wtns");
    for (double n : kernel_norms(d.kernels)) EXPECT_NEAR(n, 1.0, 1e-6);
}

TEST_F(Cli, LearnDictPaperPresetAccepted) {
    const CliRun r = run("learn-dict --data train.wtns --kernel 9 --stride 2 --features 100 --lambda0 2.55 --eta 0.01 "
                      "--epochs 0 --ista-steps 10 --increase-factor 1 --out preset");
    ASSERT_EQ(r.status, 0) << r.err;
    EXPECT_EQ(r.summary()["features"], 100);
}

TEST_F(Cli, EncodeManifestAndZeroImage) {
    ASSERT_EQ(run("learn-dict --data pgm --features 4 --kernel 5 --epochs 1 --ista-steps 10 --increase-factor 1 "
                  "--no-normalize --out rawdict")
                  .status,
              0);
    const CliRun r = run("encode --data pgm --dictionary rawdict/dictionary.wtns --n-iters 50 --out rawenc");
    ASSERT_EQ(r.status, 0) << r.err;
    const StateDataset ds = load_state_dataset(root_ / "rawenc");
    ASSERT_EQ(ds.states.size(), 2u);
    EXPECT_EQ(ds.states[0].max_abs(), 0.0);
    EXPECT_EQ(ds.final_l0[0], 0u);
}

TEST_F(Cli, EncodeCountsAndFinalL0) {
    const StateDataset ds = load_state_dataset(root_ / "enc");
    EXPECT_EQ(ds.states.size(), 16u); // 8 images x 2 lambdas
    const Dictionary d = load_dictionary(root_ / "dict" / "dictionary.wtns");
    EXPECT_EQ(ds.dictionary_fingerprint, dictionary_fingerprint(d));
    const auto norms = kernel_norms(d.kernels);
    for (std::size_t i = 0; i < ds.states.size(); ++i) {
        const ThresholdSpec t = ThresholdSpec::hard(ds.lambdas[i]);
        EXPECT_EQ(ds.final_l0[i], l0_count(apply_threshold(ds.states[i], t, std::span<const double>(norms)))) << i;
    }
    EXPECT_DOUBLE_EQ(ds.lambdas[0], 0.15);
    EXPECT_DOUBLE_EQ(ds.lambdas[8], 0.2);
}

TEST_F(Cli, TrainRejectsForeignStates) {
    ASSERT_EQ(run("learn-dict --data train.wtns --features 8 --kernel 5 --epochs 0 --ista-steps 5 --increase-factor 1 "
                  "--seed 77 --out other")
                  .status,
              0);
    const CliRun r = run("train-predictor --states enc --dictionary other/dictionary.wtns --epochs 1 --out badpred");
    EXPECT_EQ(r.status, 1);
    EXPECT_EQ(r.error()["error"]["kind"], "fingerprint");
    EXPECT_FALSE(fs::exists(root_ / "badpred" / "predictor.wtns"));
}

TEST_F(Cli, TrainIsDeterministic) {
    const std::string args = "train-predictor --states enc --dictionary dict/dictionary.wtns --epochs 2 "
                             "--trunk-widths 4,4 --branch-width 4 --lr 1e-3 --seed 1 --out ";
    ASSERT_EQ(run(args + "pred_again").status, 0);
    EXPECT_EQ(slurp(root_ / "pred" / "train_loss.csv"), slurp(root_ / "pred_again" / "train_loss.csv"));
    EXPECT_EQ(slurp(root_ / "pred" / "predictor.wtns"), slurp(root_ / "pred_again" / "predictor.wtns"));
}

TEST_F(Cli, CompareColdOnlyCsvShape) {
    const CliRun r = run(std::string("compare --cold-only --data test.wtns ") + dict() +
                      " --n-iters 25 --track-every 10 --out cold");
    ASSERT_EQ(r.status, 0) << r.err;
    EXPECT_EQ(line_count(root_ / "cold" / "compare_trajectory.csv"), 1u + 4u); // header + ceil(25/10) + 1
    EXPECT_FALSE(r.summary().contains("speedup"));
    EXPECT_TRUE(fs::exists(root_ / "cold" / "compare_final.csv"));
    EXPECT_TRUE(fs::exists(root_ / "cold" / "compare_recon_0.png"));
}

TEST_F(Cli, CompareOracleWarmStartSpeedUp) {
    const CliRun r = run(std::string("compare --oracle-warm --data test.wtns ") + dict() + " --n-iters 60 --out oracle");
    ASSERT_EQ(r.status, 0) << r.err;
    const json s = r.summary()["speedup"];
    EXPECT_TRUE(s["reached"].get<bool>());
    EXPECT_EQ(s["iteration"], 0);
    EXPECT_DOUBLE_EQ(s["factor"].get<double>(), 60.0);
}

TEST_F(Cli, CompareWithPredictorAndAllOperators) {
    for (const std::string t : {"hard", "soft", "half", "cel0 --mu 0.5"}) {
        const CliRun r = run(std::string("compare --data test.wtns ") + dict() +
                          " --predictor pred/predictor.wtns --n-iters 30 --threshold " + t + " --out op");
        ASSERT_EQ(r.status, 0) << t << ": " << r.err;
        EXPECT_TRUE(r.summary()["final"].contains("warp_lca")) << t;
        EXPECT_TRUE(r.summary()["speedup"].contains("factor")) << t;
    }
}

TEST_F(Cli, ConfigFileWithCommandLineOverride) {
    std::ofstream(root_ / "cfg.json") << R"({"seed": 3, "out": "cfgout", "n_iters": 20, "track-every": 5,
        "compare": {"cold-only": true, "data": "test.wtns", "dictionary": "dict/dictionary.wtns"}})";
    CliRun r = run("compare --config cfg.json");
    ASSERT_EQ(r.status, 0) << r.err;
    EXPECT_EQ(r.summary()["solver"]["n_iters"], 20);
    EXPECT_EQ(line_count(root_ / "cfgout" / "compare_trajectory.csv"), 1u + 5u);
    r = run("compare --config cfg.json --n-iters 10");
    ASSERT_EQ(r.status, 0) << r.err;
    EXPECT_EQ(r.summary()["solver"]["n_iters"], 10);
    std::ofstream(root_ / "bad.json") << "{not json";
    r = run("compare --config bad.json");
    EXPECT_NE(r.status, 0);
    EXPECT_NO_THROW(r.error());
}

TEST_F(Cli, DenoiseZeroSigmaMatchesEncode) {
    const CliRun enc = run("encode --data test.wtns --dictionary dict/dictionary.wtns --lambdas 0.2 --n-iters 120 --out enc02");
    ASSERT_EQ(enc.status, 0) << enc.err;
    const CliRun dn = run(std::string("denoise --cold-only --data test.wtns ") + dict() +
                       " --sigmas 0 --cold-iters 120 --out dn0");
    ASSERT_EQ(dn.status, 0) << dn.err;
    EXPECT_NEAR(dn.summary()["rows"][0]["psnr"].get<double>(), enc.summary()["mean_final_psnr"].get<double>(), 1e-6);
}

TEST_F(Cli, DenoiseDegradesWithSigmaAndIsReproducible) {
    const std::string args = std::string("denoise --data test.wtns ") + dict() +
                             " --predictor pred/predictor.wtns --sigmas 0.05,0.1,0.2 --cold-iters 200 --warm-iters 50 "
                             "--seed 5 --out ";
    CliRun a = run(args + "dna");
    ASSERT_EQ(a.status, 0) << a.err;
    CliRun b = run(args + "dnb");
    ASSERT_EQ(b.status, 0) << b.err;
    EXPECT_EQ(slurp(root_ / "dna" / "denoise.csv"), slurp(root_ / "dnb" / "denoise.csv"));
    const json summary = a.summary();
    for (const std::string method : {"lca", "warp_lca"}) {
        std::vector<double> psnrs;
        for (const auto& row : summary["rows"])
            if (row["method"] == method) psnrs.push_back(row["psnr"].get<double>());
        ASSERT_EQ(psnrs.size(), 3u);
        EXPECT_GT(psnrs[0], psnrs[1]) << method;
        EXPECT_GT(psnrs[1], psnrs[2]) << method;
    }
    CliRun c = run(args.substr(0, args.find("--seed")) + "--seed 6 --out dnc");
    ASSERT_EQ(c.status, 0);
    EXPECT_NE(slurp(root_ / "dna" / "denoise.csv"), slurp(root_ / "dnc" / "denoise.csv"));
}

TEST_F(Cli, ActivationMapOutputs) {
    const CliRun r = run(std::string("activation-map --data test.wtns ") + dict() +
                      " --predictor pred/predictor.wtns --count 2 --cold-iters 40 --out am");
    ASSERT_EQ(r.status, 0) << r.err;
    EXPECT_EQ(r.summary()["images"].size(), 2u);
    for (const char* f : {"activation_0_recon.png", "activation_0_maps.png", "activation_1_maps.wtns", "activation_map.csv"})
        EXPECT_TRUE(fs::exists(root_ / "am" / f)) << f;
    const auto maps = read_tensors(root_ / "am" / "activation_0_maps.wtns");
    ASSERT_EQ(maps.size(), 2u);
    double lo = 1.0, hi = 0.0;
    for (const auto& m : maps) {
        lo = std::min(lo, m.min());
        hi = std::max(hi, m.max());
    }
    EXPECT_GE(lo, 0.0);
    EXPECT_LE(hi, 1.0);
}

TEST_F(Cli, StepSweepRows) {
    const CliRun r = run(std::string("step-sweep --oracle-warm --data test.wtns ") + dict() +
                      " --taus 50,100,200 --n-iters 40 --out sweep");
    ASSERT_EQ(r.status, 0) << r.err;
    EXPECT_EQ(r.summary()["rows"].size(), 6u);
    EXPECT_EQ(line_count(root_ / "sweep" / "step_sweep.csv"), 7u);
    EXPECT_TRUE(fs::exists(root_ / "sweep" / "step_sweep_trajectory_2.csv"));
}

TEST_F(Cli, ThreadCountDoesNotChangeResults) {
    const std::string args = std::string("compare --data test.wtns ") + dict() +
                             " --predictor pred/predictor.wtns --n-iters 30 --out ";
    ASSERT_EQ(run("--threads 1 " + args + "t1").status, 0);
    ASSERT_EQ(run("--threads 3 " + args + "t3").status, 0);
    EXPECT_EQ(slurp(root_ / "t1" / "compare_trajectory.csv"), slurp(root_ / "t3" / "compare_trajectory.csv"));
}
