#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "doctest.h"
#include "humdex/json_io.hpp"

namespace fs = std::filesystem;

namespace {

int run_cli(const std::string& args) {
    const std::string cmd = std::string(HUMDEX_CLI_PATH) + " " + args + " >/dev/null 2>&1";
    const int status = std::system(cmd.c_str());
    return WEXITSTATUS(status);
}

std::string slurp(const fs::path& path) {
    std::ifstream in(path, std::ios::binary);
    std::ostringstream buf;
    buf << in.rdbuf();
    return buf.str();
}

int line_count(const fs::path& path) {
    std::ifstream in(path);
    int n = 0;
    std::string line;
    while (std::getline(in, line)) ++n;
    return n;
}

struct TempDir {
    fs::path path;
    TempDir() : path(fs::temp_directory_path() / "humdex_cli_test") {
        fs::remove_all(path);
        fs::create_directories(path);
    }
    ~TempDir() { fs::remove_all(path); }
};

}  // namespace

TEST_SUITE("cli") {

TEST_CASE("synth writes the requested number of frames") {
    TempDir tmp;
    const auto out = tmp.path / "m.jsonl";
    CHECK(run_cli("synth --duration 1 --rate 100 --seed 4 --out " + out.string()) == 0);
    CHECK(line_count(out) == 100);
    CHECK(fs::exists(tmp.path / "m.jsonl.manifest.json"));
}

TEST_CASE("fixed seeds reproduce outputs byte for byte") {
    TempDir tmp;
    const auto a = tmp.path / "a.jsonl";
    const auto b = tmp.path / "b.jsonl";
    REQUIRE(run_cli("synth --duration 0.5 --rate 100 --seed 11 --out " + a.string()) == 0);
    REQUIRE(run_cli("synth --duration 0.5 --rate 100 --seed 11 --out " + b.string()) == 0);
    CHECK(slurp(a) == slurp(b));
}

TEST_CASE("retarget is invariant to injected drift end to end") {
    TempDir tmp;
    const auto clean = tmp.path / "m.jsonl";
    const auto drifted = tmp.path / "md.jsonl";
    REQUIRE(run_cli("synth --duration 0.3 --rate 100 --seed 5 --out " + clean.string()) == 0);
    REQUIRE(run_cli("synth --duration 0.3 --rate 100 --seed 5 --drift-sigma 0.02 --drift-seed 9 --out " +
                    drifted.string()) == 0);
    CHECK(slurp(clean) != slurp(drifted));  // inputs differ

    const auto cmd_a = tmp.path / "cmd_a.jsonl";
    const auto cmd_b = tmp.path / "cmd_b.jsonl";
    REQUIRE(run_cli("retarget --model g1body --in " + clean.string() + " --hands midpoint --out " +
                    cmd_a.string()) == 0);
    REQUIRE(run_cli("retarget --model g1body --in " + drifted.string() +
                    " --hands midpoint --out " + cmd_b.string()) == 0);
    CHECK(slurp(cmd_a) == slurp(cmd_b));  // outputs identical
    CHECK(line_count(cmd_a) == 30);
}

TEST_CASE("hand gen-dataset and infer round-trip through files") {
    TempDir tmp;
    const auto pairs = tmp.path / "pairs.jsonl";
    REQUIRE(run_cli("hand gen-dataset --count 60 --seed 2 --out " + pairs.string()) == 0);
    CHECK(line_count(pairs) == 60);

    const auto ckpt = tmp.path / "ckpt.json";
    const auto report = tmp.path / "report.json";
    REQUIRE(run_cli("hand train --data " + pairs.string() + " --epochs 2 --batch 32 --seed 3 " +
                    "--hidden 16 --out " + ckpt.string() + " --report " + report.string()) == 0);
    CHECK(fs::exists(ckpt));
    CHECK(fs::exists(report));

    // Tips-only input for inference.
    const auto tips = tmp.path / "tips.jsonl";
    {
        std::ofstream out(tips);
        const auto lines = humdex::io::read_jsonl(pairs);
        for (int i = 0; i < 5; ++i) out << nlohmann::json{{"p", lines[i]["p"]}}.dump() << "\n";
    }
    const auto joints = tmp.path / "joints.jsonl";
    REQUIRE(run_cli("hand infer --checkpoint " + ckpt.string() + " --in " + tips.string() +
                    " --out " + joints.string()) == 0);
    CHECK(line_count(joints) == 5);

    const auto metrics = tmp.path / "metrics.json";
    REQUIRE(run_cli("hand eval --checkpoint " + ckpt.string() + " --data " + pairs.string() +
                    " --split val --out " + metrics.string()) == 0);
    CHECK(fs::exists(metrics));
}

TEST_CASE("pipeline run records an episode and episode inspect reads it") {
    TempDir tmp;
    const auto motion = tmp.path / "m.jsonl";
    REQUIRE(run_cli("synth --duration 1 --rate 100 --seed 6 --out " + motion.string()) == 0);
    const auto record = tmp.path / "record";
    REQUIRE(run_cli("pipeline run --motion " + motion.string() +
                    " --hands midpoint --pedal 0:1 --out " + record.string()) == 0);
    CHECK(fs::exists(record / "episode_0000" / "meta.json"));
    CHECK(fs::exists(record / "stats.json"));

    const auto summary = tmp.path / "summary.json";
    REQUIRE(run_cli("episode inspect --dir " + (record / "episode_0000").string() + " --out " +
                    summary.string()) == 0);
    const auto doc = nlohmann::json::parse(slurp(summary));
    CHECK(doc["frames"].get<int>() >= 29);
    CHECK(doc["frames"].get<int>() <= 31);
}

TEST_CASE("validate-lag on synthetic episodes finds k*=1") {
    TempDir tmp;
    const auto out = tmp.path / "lag.json";
    REQUIRE(run_cli("validate-lag --synthetic 3 --seed 8 --out " + out.string()) == 0);
    const auto doc = nlohmann::json::parse(slurp(out));
    CHECK(doc["best_k"].get<int>() == 1);
    CHECK(doc["mean_error"][1].get<double>() <= 1e-12);
}

TEST_CASE("exit codes: usage=1, data=2") {
    CHECK(run_cli("synth --no-such-flag") == 1);
    CHECK(run_cli("retarget --model g1body --in /nonexistent.jsonl --out /tmp/x.jsonl") == 2);
    CHECK(run_cli("hand train --data /nonexistent.jsonl --out /tmp/x.json") == 2);
}

}  // TEST_SUITE
