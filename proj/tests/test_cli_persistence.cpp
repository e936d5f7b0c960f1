#include "cli_harness.hpp"

#include "hld/checkpoint.hpp"
#include "hld/config.hpp"
#include "hld/io.hpp"

#include <gtest/gtest.h>
#include <nlohmann/json.hpp>

using namespace hld;
using namespace hld::testing;
namespace fs = std::filesystem;

namespace {

Checkpoint small_checkpoint(bool with_hypernet) {
    Checkpoint c;
    c.schedule = ScheduleSpec{ScheduleKind::linear, 20, 1e-3, 0.2};
    c.denoiser = init_denoiser(DenoiserConfig{9, 4, 6, 8, 20}, 3);
    if (with_hypernet) {
        HypernetConfig hc;
        hc.image_dim = 9;
        hc.feature = 4;
        hc.rank = 2;
        hc.targets = c.denoiser.target_shapes();
        c.hypernet = init_hypernet(hc, 4);
    }
    c.adapters["heldout:0"] = new_adapter_set(c.denoiser.target_shapes(), 2, LoraInit::b_zero_a_random, 5);
    c.config_echo = "[run]\nseed = 1\n";
    c.seed = 1;
    c.rng_summary = "mt19937_64";
    return c;
}

} // namespace

TEST(ConfigFile, SectionsCommentsAndTypes) {
    const ConfigFile cf = ConfigFile::parse("# comment\n top = 1\n[a]\nx = 2.5\n; other comment\n\n[b]\n"
                                            "flag = true\nname = hello world\nbig = 18446744073709551615\n");
    EXPECT_EQ(cf.get_int("", "top", 0), 1);
    EXPECT_DOUBLE_EQ(cf.get_double("a", "x", 0.0), 2.5);
    EXPECT_TRUE(cf.get_bool("b", "flag", false));
    EXPECT_EQ(cf.get_string("b", "name", ""), "hello world");
    EXPECT_EQ(cf.get_u64("b", "big", 0), 18446744073709551615ull);
    EXPECT_EQ(cf.get_int("b", "absent", 42), 42);
    EXPECT_NO_THROW(cf.reject_unknown());
}

TEST(ConfigFile, Errors) {
    EXPECT_THROW(ConfigFile::parse("[a]\nx = 1\nx = 2\n"), UsageError);
    EXPECT_THROW(ConfigFile::parse("[a\n"), UsageError);
    EXPECT_THROW(ConfigFile::parse("[a]\njust words\n"), UsageError);
    const ConfigFile bad = ConfigFile::parse("[a]\nx = 1.5x\n", "f.cfg");
    try {
        bad.get_double("a", "x", 0.0);
        FAIL() << "accepted a malformed number";
    } catch (const UsageError &e) {
        EXPECT_NE(std::string(e.what()).find("f.cfg:2"), std::string::npos) << e.what();
    }
    EXPECT_THROW(ConfigFile::parse("[a]\nn = 3.0\n").get_int("a", "n", 0), UsageError);
    EXPECT_THROW(ConfigFile::parse("[a]\nb = maybe\n").get_bool("a", "b", false), UsageError);
    const ConfigFile extra = ConfigFile::parse("[a]\nknown = 1\ntypo = 2\n");
    extra.get_int("a", "known", 0);
    try {
        extra.reject_unknown();
        FAIL() << "unknown key accepted";
    } catch (const UsageError &e) {
        EXPECT_NE(std::string(e.what()).find("typo"), std::string::npos);
    }
    try {
        ConfigFile::load("/nonexistent/run.cfg");
        FAIL() << "missing file accepted";
    } catch (const UsageError &e) {
        EXPECT_NE(std::string(e.what()).find("/nonexistent/run.cfg"), std::string::npos);
    }
}

TEST(RunConfig, DefaultsAndOverrides) {
    const RunConfig d = run_config_from(ConfigFile::parse(""));
    EXPECT_FALSE(d.seed.has_value());
    EXPECT_DOUBLE_EQ(d.guidance.guidance_scale(), 7.5);
    EXPECT_EQ(d.guidance.steps, 30);
    EXPECT_EQ(d.schedule.T, kToySchedule.T);
    const RunConfig c = run_config_from(ConfigFile::parse("[run]\nseed = 9\n[guidance]\nkappa = 1.4\n"));
    EXPECT_EQ(c.seed, 9u);
    EXPECT_DOUBLE_EQ(c.guidance.kappa, 1.4);
    EXPECT_THROW(run_config_from(ConfigFile::parse("[guidance]\nkappa = 3\n")), UsageError);
    EXPECT_THROW(run_config_from(ConfigFile::parse("[model]\nwidth = 3\n")), UsageError);
    // The canonical echo parses back to the same configuration.
    EXPECT_EQ(describe(run_config_from(ConfigFile::parse(describe(c)))), describe(c));
}

TEST(Checkpoint, RoundTripIsByteIdentical) {
    const fs::path dir = scratch_dir("ckpt");
    for (bool hyper : {false, true}) {
        const Checkpoint c = small_checkpoint(hyper);
        save_checkpoint(dir / "a.ckpt", c);
        const Checkpoint back = load_checkpoint(dir / "a.ckpt");
        save_checkpoint(dir / "b.ckpt", back);
        EXPECT_EQ(slurp(dir / "a.ckpt"), slurp(dir / "b.ckpt"));
        EXPECT_EQ(back.hypernet.has_value(), hyper);
        EXPECT_EQ(back.config_echo, c.config_echo);
        EXPECT_EQ(back.seed, 1u);
        ASSERT_EQ(back.adapters.count("heldout:0"), 1u);
        EXPECT_EQ(back.adapters.at("heldout:0").flatten(),
                  c.adapters.at("heldout:0").flatten().cast<float>().cast<double>());
    }
    fs::remove_all(dir);
}

TEST(Checkpoint, CorruptionIsRejected) {
    const auto bytes = serialize_checkpoint(small_checkpoint(true));
    EXPECT_EQ(std::string(bytes.begin(), bytes.begin() + 4), "HCKP");
    auto crc = bytes;
    crc[crc.size() / 2] ^= 0x08;
    EXPECT_THROW(deserialize_checkpoint(crc), FormatError);
    auto version = bytes;
    version[4] = 9;
    EXPECT_THROW(deserialize_checkpoint(version), FormatError);
    const std::vector<std::uint8_t> cut(bytes.begin(), bytes.end() - 3);
    EXPECT_THROW(deserialize_checkpoint(cut), FormatError);
    EXPECT_THROW(load_checkpoint("/nonexistent/x.ckpt"), UsageError);
}

TEST(OutputLock, ExclusiveUntilReleased) {
    const fs::path dir = scratch_dir("lock");
    {
        OutputLock first(dir);
        EXPECT_THROW(OutputLock second(dir), UsageError);
    }
    EXPECT_NO_THROW(OutputLock again(dir));
    EXPECT_FALSE(fs::exists(dir / ".hld.lock"));
    fs::remove_all(dir);
}

class Cli : public ::testing::Test {
protected:
    static void SetUpTestSuite() {
        dir_ = scratch_dir("cli");
        write_small_config(dir_ / "run.cfg");
        const CliResult r = run_cli({"pretrain", "--config", (dir_ / "run.cfg").string(), "--out",
                                     (dir_ / "base.ckpt").string()});
        ASSERT_EQ(r.code, 0) << r.output;
    }
    static void TearDownTestSuite() { fs::remove_all(dir_); }

    static fs::path dir_;
};

fs::path Cli::dir_;

TEST_F(Cli, MissingConfigIsUsageError) {
    const CliResult r = run_cli({"pretrain", "--config", (dir_ / "nope.cfg").string(), "--out",
                                 (dir_ / "x.ckpt").string()});
    EXPECT_EQ(r.code, 2) << r.output;
    EXPECT_NE(r.output.find("nope.cfg"), std::string::npos);
    EXPECT_EQ(run_cli({"pretrain"}).code, 2);
    EXPECT_EQ(run_cli({"no-such-command"}).code, 2);
}

TEST_F(Cli, KappaOutOfRangeFailsBeforeWork) {
    const CliResult r = run_cli({"sample", "--checkpoint", (dir_ / "base.ckpt").string(), "--mode", "hmcfg",
                                 "--kappa", "3", "--subject-class", "0", "--generic-class", "0", "--out-dir",
                                 (dir_ / "k3").string()});
    EXPECT_EQ(r.code, 2);
    EXPECT_NE(r.output.find("kappa out of [0,2]"), std::string::npos) << r.output;
    EXPECT_FALSE(fs::exists(dir_ / "k3"));
}

TEST_F(Cli, CorruptCheckpointIsFormatError) {
    auto bytes = slurp(dir_ / "base.ckpt");
    bytes[bytes.size() / 2] ^= 0x20;
    std::ofstream(dir_ / "bad.ckpt", std::ios::binary).write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    const CliResult r = run_cli({"sample", "--checkpoint", (dir_ / "bad.ckpt").string(), "--class", "0", "--out-dir",
                                 (dir_ / "bad_out").string(), "--seed", "1"});
    EXPECT_EQ(r.code, 4) << r.output;
}

TEST_F(Cli, UnitScaleCfgMatchesUnguided) {
    const std::string ck = (dir_ / "base.ckpt").string();
    ASSERT_EQ(run_cli({"sample", "--checkpoint", ck, "--class", "1", "--mode", "cfg", "--guidance-scale", "1",
                       "--steps", "10", "-n", "4", "--seed", "5", "--out-dir", (dir_ / "cfg1").string()})
                  .code,
              0);
    ASSERT_EQ(run_cli({"sample", "--checkpoint", ck, "--class", "1", "--mode", "none", "--steps", "10", "-n", "4",
                       "--seed", "5", "--out-dir", (dir_ / "none").string()})
                  .code,
              0);
    EXPECT_EQ(slurp(dir_ / "cfg1" / "samples.hsmp"), slurp(dir_ / "none" / "samples.hsmp"));
}

TEST_F(Cli, DefaultsAndSeedAreRecorded) {
    const CliResult r = run_cli({"sample", "--checkpoint", (dir_ / "base.ckpt").string(), "--class", "2", "--steps",
                                 "5", "-n", "2", "--out-dir", (dir_ / "defaults").string()});
    ASSERT_EQ(r.code, 0) << r.output;
    EXPECT_NE(r.output.find("seed: "), std::string::npos);
    const auto text = slurp(dir_ / "defaults" / "meta.json");
    const auto meta = nlohmann::json::parse(text.begin(), text.end());
    EXPECT_DOUBLE_EQ(meta.at("guidance_scale").get<double>(), 7.5);
    EXPECT_EQ(meta.at("mode").get<std::string>(), "cfg");
    EXPECT_TRUE(meta.at("seed").is_number_unsigned());
    EXPECT_TRUE(fs::exists(dir_ / "defaults" / "sample_001.pgm"));
    EXPECT_FALSE(fs::exists(dir_ / "defaults" / ".hld.lock"));
}

TEST_F(Cli, EvalReportsBothFidelities) {
    ASSERT_EQ(run_cli({"sample", "--checkpoint", (dir_ / "base.ckpt").string(), "--class", "0", "--steps", "5", "-n",
                       "3", "--seed", "2", "--out-dir", (dir_ / "ev").string()})
                  .code,
              0);
    const CliResult r = run_cli({"eval", "--config", (dir_ / "run.cfg").string(), "--samples",
                                 (dir_ / "ev" / "samples.hsmp").string(), "--subject", "heldout:0", "--out",
                                 (dir_ / "ev" / "report.txt").string()});
    ASSERT_EQ(r.code, 0) << r.output;
    const auto text = slurp(dir_ / "ev" / "report.txt");
    const std::string report(text.begin(), text.end());
    EXPECT_NE(report.find("subject_fidelity: "), std::string::npos);
    EXPECT_NE(report.find("prompt_fidelity: "), std::string::npos);
    EXPECT_NE(report.find("seed: 2\n"), std::string::npos);
    EXPECT_EQ(run_cli({"eval", "--config", (dir_ / "run.cfg").string(), "--samples",
                       (dir_ / "ev" / "samples.hsmp").string(), "--subject", "heldout:99"})
                  .code,
              2);
}

TEST_F(Cli, OracleVerifyPasses) {
    const CliResult r = run_cli({"oracle-verify", "--seed", "3", "--chains", "4000"});
    EXPECT_EQ(r.code, 0) << r.output;
    EXPECT_EQ(r.output.find("FAIL"), std::string::npos) << r.output;
}
