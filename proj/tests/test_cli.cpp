#include <filesystem>
#include <fstream>
#include <sstream>

#include "dyns/cli.hpp"
#include "json.hpp"
#include "support.hpp"

using namespace dyns;
namespace fs = std::filesystem;

namespace {

const char* kTinyConfig = R"(# small enough for a unit test
preset = desk
rois = 4
steps = 24
regimes = 1
subjects_per_class = 8
d_lat = 8
d_h = 4
d_k = 8
tokens = 2
llm_blocks = 1
llm_heads = 2
llm_ffn_mult = 2
vocab = 8
context = 8
prompt = 1, 5, 3
r = 2
epochs = 1
batch_size = 4
validation_fraction = 0.25
)";

struct Outcome {
  int code;
  std::string out, err;
};

Outcome run(std::vector<std::string> args) {
  std::ostringstream out, err;
  const int code = run_cli(args, out, err);
  return {code, out.str(), err.str()};
}

fs::path scratch(const std::string& name) {
  const fs::path dir = fs::temp_directory_path() / ("dyns_cli_" + name);
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

fs::path tiny_config_file(const fs::path& dir) {
  std::ofstream(dir / "tiny.conf") << kTinyConfig;
  return dir / "tiny.conf";
}

}  // namespace

TEST_SUITE("cli") {
  TEST_CASE("config parsing and unknown keys") {
    const auto pairs = parse_config_text("# comment\nseed = 4\n\n  lr=0.01  # trailing\n");
    REQUIRE(pairs.size() == 2);
    CHECK(pairs[0] == std::pair<std::string, std::string>{"seed", "4"});
    CHECK(pairs[1] == std::pair<std::string, std::string>{"lr", "0.01"});
    CHECK_THROWS_AS(resolve_settings("learning_rate = 0.1\n", {}, nullptr), ConfigError);
    CHECK_THROWS_AS(resolve_settings("epochs = 3x\n", {}, nullptr), ConfigError);
    CHECK_THROWS_AS(resolve_settings("", {{"bogus", "1"}}, nullptr), ConfigError);
  }

  TEST_CASE("layer precedence: flags over --set over file over DYNS_SEED over preset") {
    CHECK(resolve_settings("", {}, nullptr).seed == 0);
    CHECK(resolve_settings("", {}, "9").seed == 9);
    CHECK(resolve_settings("seed = 4\n", {}, "9").seed == 4);
    CHECK(resolve_settings("seed = 4\n", {{"seed", "5"}}, "9").seed == 5);
    CHECK(resolve_settings("seed = 4\n", {{"seed", "5"}, {"seed", "6"}}, "9").seed == 6);
    CHECK_THROWS_AS(resolve_settings("", {}, "nine"), ConfigError);

    const RunSettings desk = resolve_settings("preset = desk\n", {}, nullptr);
    CHECK(desk.model.encoder.d_lat == 16);
    CHECK(desk.train.adam.learning_rate == 1e-3);
    CHECK(resolve_settings("preset = desk\nd_lat = 24\n", {}, nullptr).model.encoder.d_lat == 24);
    CHECK(resolve_settings("d_lat = 24\n", {{"preset", "desk"}}, nullptr).model.encoder.d_lat == 24);
  }

  TEST_CASE("resolved config round-trips through the parser") {
    RunSettings s = resolve_settings(kTinyConfig, {{"seed", "11"}, {"variant", "static_graph"}}, nullptr);
    const std::string text = resolved_text(s);
    CHECK(text.rfind("# version ", 0) == 0);
    const RunSettings back = resolve_settings(text, {}, nullptr);
    CHECK(resolved_text(back) == text);
    for (const auto& key : config_keys()) CHECK(get_config_value(back, key) == get_config_value(s, key));
  }

  TEST_CASE("exit codes for usage and help") {
    CHECK(run({}).code == 1);
    CHECK(run({"frobnicate"}).code == 1);
    CHECK(run({"--help"}).code == 0);
    const Outcome v = run({"--version"});
    CHECK(v.code == 0);
    CHECK(v.out.find(code_version()) != std::string::npos);
    CHECK(run({"train", "--epochs", "0"}).code == 1);
    CHECK(run({"train", "--set", "nonsense=1"}).code == 1);
    CHECK(run({"train", "--variant", "bogus"}).code == 1);
    CHECK(run({"train", "--data", "/nonexistent/manifest.json", "--epochs", "1"}).code == 2);
  }

  TEST_CASE("gradcheck subcommand passes and reports JSON") {
    const Outcome text = run({"gradcheck", "--seed", "7"});
    CHECK(text.code == 0);
    CHECK(text.out.find("FAIL") == std::string::npos);
    CHECK(text.out.find("matmul") != std::string::npos);
    const Outcome json = run({"--json", "gradcheck", "--seed", "7"});
    CHECK(json.code == 0);
    const auto j = nlohmann::json::parse(json.out);
    CHECK(j.at("pass") == true);
    CHECK(j.at("ops").size() > 20);
  }

  TEST_CASE("generate-data is byte-identical across invocations") {
    const fs::path dir = scratch("generate");
    const auto conf = tiny_config_file(dir).string();
    for (const char* name : {"a", "b"})
      REQUIRE(run({"--quiet", "generate-data", "--config", conf, "--seed", "3", "--out", (dir / name).string()}).code ==
              0);
    std::vector<std::string> files;
    for (const auto& e : fs::directory_iterator(dir / "a")) files.push_back(e.path().filename().string());
    CHECK(files.size() == 18);  // 16 subjects, manifest, config.resolved
    for (const auto& f : files) {
      INFO(f);
      CHECK(fs::exists(dir / "b" / f));
      CHECK(slurp(dir / "a" / f) == slurp(dir / "b" / f));
    }
    const Outcome other = run({"--quiet", "generate-data", "--config", conf, "--seed", "4", "--out", (dir / "c").string()});
    CHECK(other.code == 0);
    CHECK(slurp(dir / "a" / "manifest.json") != "");
    fs::remove_all(dir);
  }

  TEST_CASE("train, evaluate and report round trip") {
    const fs::path dir = scratch("train");
    const auto conf = tiny_config_file(dir).string();
    const Outcome trained = run({"--quiet", "--json", "--threads", "1", "train", "--config", conf, "--seed", "2",
                                 "--out", (dir / "runs").string()});
    REQUIRE(trained.code == 0);
    const auto summary = nlohmann::json::parse(trained.out);
    const fs::path run_dir = summary.at("run_dir").get<std::string>();
    CHECK(run_dir.filename().string().find("-s2") != std::string::npos);
    for (const char* f : {"config.resolved", "logs.jsonl", "metrics.json", "checkpoints/best.ckpt",
                          "checkpoints/epoch_000.ckpt", "checkpoints/epoch_001.ckpt"})
      CHECK(fs::exists(run_dir / f));
    const auto metrics = nlohmann::json::parse(slurp(run_dir / "metrics.json"));
    CHECK(metrics.at("seed") == 2);
    CHECK(metrics.at("variant") == "full");

    const Outcome ev = run({"--json", "evaluate", "--run", run_dir.string()});
    REQUIRE(ev.code == 0);
    const auto evj = nlohmann::json::parse(ev.out);
    CHECK(evj.at("metrics").at("accuracy") == metrics.at("test").at("accuracy"));
    CHECK(evj.at("metrics").at("loss") == metrics.at("test").at("loss"));

    const Outcome rep = run({"report", (dir / "runs").string()});
    REQUIRE(rep.code == 0);
    std::istringstream lines(rep.out);
    std::string header, line;
    std::getline(lines, header);
    CHECK(header == "run,variant,seed,epoch,split,loss,accuracy,precision,recall,f1");
    int rows = 0;
    while (std::getline(lines, line)) ++rows;
    CHECK(rows == 4);  // val 0, train 1, val 1, test
    CHECK(run({"report", (dir / "nothing").string()}).code == 2);
    fs::remove_all(dir);
  }

  TEST_CASE("scan-bench writes the documented CSV") {
    const fs::path dir = scratch("bench");
    const Outcome r = run({"--quiet", "scan-bench", "--bench-lengths", "16,64", "--bench-repeats", "3", "--output",
                           (dir / "bench.csv").string()});
    REQUIRE(r.code == 0);
    std::istringstream in(slurp(dir / "bench.csv"));
    std::string line;
    std::getline(in, line);
    CHECK(line == "T,backend,median_ns,p10_ns,p90_ns");
    int rows = 0;
    while (std::getline(in, line)) ++rows;
    CHECK(rows == 4);
    fs::remove_all(dir);
  }
}
