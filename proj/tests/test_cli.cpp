#include <algorithm>
#include <cmath>
#include <filesystem>
#include <map>
#include <sstream>

#include "commands.hpp"
#include "doctest.h"
#include "json.hpp"
#include "run_config.hpp"
#include "s2vc/checkpoint.hpp"
#include "s2vc/synthvid.hpp"

using namespace s2vc;
using namespace s2vc::cli;
namespace fs = std::filesystem;

namespace {

constexpr const char* kTinyConfig = R"(# small enough for unit tests
seed = 5
[data]
classes = 3
clips_per_class = 6
[flow]
epochs = 4
[contrast]
steps = 6
batch_size = 4
queue_size = 16
[eval]
probe_epochs = 20
strip_clips = 2
)";

struct Outcome {
  int status;
  std::string out;
  std::string err;
};

Outcome invoke(std::vector<std::string> args) {
  args.insert(args.begin(), "s2vc");
  std::ostringstream out, err;
  const int status = run(args, out, err);
  return {status, out.str(), err.str()};
}

/// A fresh scratch directory removed when the test ends.
struct Scratch {
  fs::path root;
  explicit Scratch(const std::string& name) : root(fs::temp_directory_path() / ("s2vc_cli_" + name)) {
    fs::remove_all(root);
    fs::create_directories(root);
  }
  ~Scratch() { fs::remove_all(root); }
  std::string operator/(const std::string& name) const { return (root / name).string(); }
};

std::string write_config(const Scratch& s, const std::string& text = kTinyConfig) {
  const auto path = s / "run.ini";
  write_text_file(path, text);
  return path;
}

/// Every file below `dir` except the run manifest, keyed by relative path.
std::map<std::string, std::string> tree_contents(const fs::path& dir) {
  std::map<std::string, std::string> files;
  for (const auto& e : fs::recursive_directory_iterator(dir)) {
    if (!e.is_regular_file() || e.path().filename() == kRunManifestName) continue;
    files[fs::relative(e.path(), dir).string()] = read_text_file(e.path());
  }
  return files;
}

std::vector<double> csv_column(const std::string& text, std::size_t column) {
  std::istringstream in(text);
  std::string line;
  std::getline(in, line);
  std::vector<double> values;
  while (std::getline(in, line)) {
    std::istringstream row(line);
    std::string cell;
    for (std::size_t c = 0; c <= column; ++c) std::getline(row, cell, ',');
    values.push_back(std::stod(cell));
  }
  return values;
}

/// gen-data then train-flow into `s`, returning the flow checkpoint path.
std::string prepare_flow(const Scratch& s, const std::string& config) {
  REQUIRE(invoke({"gen-data", "--config", config, "--out", s / "data"}).status == 0);
  const auto flow = invoke({"train-flow", "--config", config, "--data", s / "data", "--out", s / "flow"});
  REQUIRE_MESSAGE(flow.status == 0, flow.err);
  return s / "flow/flow.ckpt";
}

}  // namespace

TEST_CASE("config defaults resolve the flow and encoder dimensions") {
  const RunConfig c;
  const auto& g = c.data.geometry;
  CHECK(c.flow.train.arch.dim == g.height * g.width * g.channels);
  CHECK(c.contrast.encoder.frame_dim == g.height * g.width * g.channels);
  CHECK(c.data.seed == c.seed);
  CHECK(c.contrast.alpha == c.suppress.alpha);
}

TEST_CASE("config values override defaults and the seed reaches every stage") {
  const RunConfig c = parse_run_config(
      "seed = 11\n[flow]\ndownsample = 2\nepochs = 7\n[suppress]\nalpha = 0.3\nstrategy = shuffle-in-clip\n"
      "; comment\n[eval]\nrecall_k = 1, 3  # trailing comment\nprobe_epochs = 40 ; another\n");
  CHECK(c.seed == 11);
  CHECK(c.data.seed == 11);
  CHECK(c.flow.train.seed == 11);
  CHECK(c.contrast.seed == 11);
  CHECK(c.eval.probe.seed == 11);
  CHECK(c.flow.train.epochs == 7);
  CHECK(c.flow.train.arch.dim == (c.data.geometry.height / 2) * (c.data.geometry.width / 2) * c.data.geometry.channels);
  CHECK(c.contrast.alpha == doctest::Approx(0.3));
  CHECK(c.contrast.strategy == Strategy::shuffle_in_clip);
  CHECK(c.eval.recall_k == std::vector<std::size_t>{1, 3});
  CHECK(c.eval.probe.epochs == 40);
}

TEST_CASE("config rejects unknown keys, sections and malformed values") {
  CHECK_THROWS_WITH_AS(parse_run_config("[flow]\nepoch = 3\n"), doctest::Contains("unknown config key [flow] epoch"),
                       Error);
  CHECK_THROWS_WITH_AS(parse_run_config("[model]\nx = 1\n"), doctest::Contains("unknown config section [model]"),
                       Error);
  CHECK_THROWS_WITH_AS(parse_run_config("seeds = 1\n"), doctest::Contains("unknown config key seeds"), Error);
  CHECK_THROWS_WITH_AS(parse_run_config("[flow]\nepochs = -2\n"),
                       doctest::Contains("invalid value for [flow] epochs"), Error);
  CHECK_THROWS_WITH_AS(parse_run_config("[suppress]\nalpha = nan\n"), doctest::Contains("[suppress] alpha"), Error);
  CHECK_THROWS_WITH_AS(parse_run_config("[suppress]\nstrategy = blur\n"), doctest::Contains("[suppress] strategy"),
                       Error);
  CHECK_THROWS_WITH_AS(parse_run_config("[contrast]\nsuppress = maybe\n"), doctest::Contains("true or false"), Error);
  CHECK_THROWS_WITH_AS(parse_run_config("[flow]\ndownsample = 3\n"), doctest::Contains("power of two"), Error);
  CHECK_THROWS_WITH_AS(parse_run_config("[flow\n"), doctest::Contains("config line 1"), Error);
}

TEST_CASE("formatted config parses back to the same configuration") {
  const RunConfig c = parse_run_config(kTinyConfig);
  const std::string text = format_run_config(c);
  CHECK(format_run_config(parse_run_config(text)) == text);
  CHECK(config_hash(parse_run_config(text)) == config_hash(c));
  CHECK(config_hash(c).size() == 16);
  CHECK(config_hash(c) != config_hash(RunConfig{}));
}

TEST_CASE("help and version exit cleanly; usage errors exit 2 with one line") {
  const auto help = invoke({"--help"});
  CHECK(help.status == 0);
  CHECK(help.out.find("train-flow") != std::string::npos);
  CHECK(invoke({"suppress", "--help"}).status == 0);
  CHECK(invoke({"--version"}).out == std::string(kToolVersion) + "\n");

  for (const auto& args : std::vector<std::vector<std::string>>{
           {}, {"train-flow"}, {"gen-data", "--bogus"}, {"gen-data", "--threads", "0"}, {"gen-data", "--confound", "2"}}) {
    const auto r = invoke(args);
    CHECK(r.status == 2);
    CHECK(r.err.rfind("error: ", 0) == 0);
    CHECK(std::count(r.err.begin(), r.err.end(), '\n') == 1);
  }
}

TEST_CASE("runtime failures report one error line and exit 1") {
  Scratch s("failures");
  const auto missing = invoke({"train-flow", "--data", s / "nowhere", "--out", s / "out"});
  CHECK(missing.status == 1);
  CHECK(missing.err.rfind("error: ", 0) == 0);
  CHECK(std::count(missing.err.begin(), missing.err.end(), '\n') == 1);

  write_text_file(s / "bad.ini", "[flow]\nepochz = 1\n");
  const auto bad = invoke({"gen-data", "--config", s / "bad.ini", "--out", s / "data"});
  CHECK(bad.status == 1);
  CHECK(bad.err.find("unknown config key [flow] epochz") != std::string::npos);
}

TEST_CASE("every run writes the resolved config and a manifest listing its files") {
  Scratch s("manifest");
  const auto config = write_config(s);
  REQUIRE(invoke({"gen-data", "--config", config, "--out", s / "data", "--seed", "9"}).status == 0);
  const RunConfig resolved = parse_run_config(read_text_file(s / "data/resolved.ini"));
  CHECK(resolved.seed == 9);
  CHECK(resolved.data.num_classes == 3);

  const auto manifest = nlohmann::json::parse(read_text_file(s / "data/run.json"));
  CHECK(manifest["command"] == "gen-data");
  CHECK(manifest["seeds"]["run"] == 9);
  CHECK(manifest["config_hash"] == config_hash(resolved));
  CHECK(manifest["tool_version"] == std::string(kToolVersion));
  CHECK(manifest["wall_clock_seconds"].get<double>() >= 0.0);
  std::vector<std::string> listed = manifest["artifacts"];
  std::vector<std::string> present;
  for (const auto& e : fs::directory_iterator(s / "data")) present.push_back(e.path().filename().string());
  std::sort(present.begin(), present.end());
  CHECK(listed == present);
}

TEST_CASE("output directories are never silently replaced") {
  Scratch s("force");
  const auto config = write_config(s);
  REQUIRE(invoke({"gen-data", "--config", config, "--out", s / "data"}).status == 0);
  const auto again = invoke({"gen-data", "--config", config, "--out", s / "data"});
  CHECK(again.status == 1);
  CHECK(again.err.find("--force") != std::string::npos);
  CHECK(invoke({"gen-data", "--config", config, "--out", s / "data", "--force"}).status == 0);

  fs::create_directories(s / "precious");
  write_text_file(s / "precious/notes.txt", "keep me");
  CHECK(invoke({"gen-data", "--config", config, "--out", s / "precious", "--force"}).status == 1);
  CHECK(read_text_file(s / "precious/notes.txt") == "keep me");
}

TEST_CASE("the output root variable picks the default location") {
  Scratch s("envroot");
  const auto config = write_config(s);
  ::setenv(kOutputRootEnv, s.root.c_str(), 1);
  const auto r = invoke({"gen-data", "--config", config});
  ::unsetenv(kOutputRootEnv);
  CHECK(r.status == 0);
  CHECK(fs::exists(s.root / "gen-data" / kRunManifestName));
}

TEST_CASE("the full pipeline is byte-identical across reruns and thread counts") {
  Scratch s("determinism");
  const auto config = write_config(s);
  const auto pipeline = [&](const std::string& tag, const std::string& threads) {
    const auto d = [&](const std::string& name) { return s / (tag + "/" + name); };
    const std::vector<std::vector<std::string>> steps = {
        {"gen-data", "--out", d("data")},
        {"train-flow", "--data", d("data"), "--out", d("flow")},
        {"suppress", "--data", d("data"), "--flow", d("flow/flow.ckpt"), "--out", d("sup"), "--alpha-sweep"},
        {"pretrain", "--data", d("data"), "--flow", d("flow/flow.ckpt"), "--out", d("enc")},
        {"pretrain", "--data", d("data"), "--no-suppress", "--out", d("base")},
        {"eval", "--data", d("data"), "--encoder", d("enc/encoder.ckpt"), "--baseline", d("base/encoder.ckpt"), "--out",
         d("eval")},
        {"stats", "--data", d("data"), "--flow", d("flow/flow.ckpt"), "--out", d("stats")},
    };
    for (auto args : steps) {
      args.insert(args.end(), {"--config", config, "--threads", threads});
      const auto r = invoke(args);
      REQUIRE_MESSAGE(r.status == 0, args.front() << ": " << r.err);
    }
    return tree_contents(s.root / tag);
  };
  const auto first = pipeline("a", "1");
  const auto second = pipeline("b", "1");
  const auto threaded = pipeline("c", "4");
  CHECK(first.size() > 20);
  CHECK(first.count("sup/stats.csv") == 1);
  CHECK(first.count("sup/alpha_sweep.csv") == 1);
  CHECK(first.count("eval/paired.csv") == 1);
  CHECK(first.count("stats/strip_00001.pgm") == 1);
  CHECK(first.count("stats/similarity.csv") == 1);
  for (const auto& [name, text] : first) {
    CAPTURE(name);
    CHECK(second.at(name) == text);
    CHECK(threaded.at(name) == text);
  }
}

TEST_CASE("flow training loss is monotone up to small rises and resumes with continued numbering") {
  Scratch s("resume");
  const auto config = write_config(s);
  prepare_flow(s, config);
  const auto nll = csv_column(read_text_file(s / "flow/loss.csv"), 1);
  REQUIRE(nll.size() == 4);
  for (std::size_t i = 1; i < nll.size(); ++i) CHECK(nll[i] <= nll[i - 1] + 0.02 * std::abs(nll[i - 1]));
  CHECK(nll.back() < nll.front());

  const auto r = invoke({"train-flow", "--config", config, "--data", s / "data", "--resume", s / "flow", "--out", s / "more"});
  REQUIRE_MESSAGE(r.status == 0, r.err);
  const std::string text = read_text_file(s / "more/loss.csv");
  const auto epochs = csv_column(text, 0);
  REQUIRE(epochs.size() == 8);
  for (std::size_t i = 0; i < epochs.size(); ++i) CHECK(epochs[i] == double(i + 1));
  const auto resumed = csv_column(text, 1);
  for (std::size_t i = 0; i < nll.size(); ++i) CHECK(resumed[i] == doctest::Approx(nll[i]).epsilon(1e-8));
  CHECK(resumed.back() < resumed[3]);
}

TEST_CASE("a corrupt checkpoint is reported as an error, not a crash") {
  Scratch s("corrupt");
  const auto config = write_config(s);
  const auto flow = prepare_flow(s, config);
  std::string text = read_text_file(flow);
  text.resize(text.size() / 2);
  write_text_file(s / "broken.ckpt", text);
  for (const auto& cmd : {"suppress", "stats"}) {
    const auto r = invoke({cmd, "--config", config, "--data", s / "data", "--flow", s / "broken.ckpt", "--out", s / "x"});
    CHECK(r.status == 1);
    CHECK(r.err.rfind("error: ", 0) == 0);
    CHECK(std::count(r.err.begin(), r.err.end(), '\n') == 1);
    CHECK_FALSE(fs::exists(s / "x"));
  }
  write_text_file(s / "garbage.ckpt", "not a checkpoint\n");
  const auto r = invoke({"eval", "--config", config, "--data", s / "data", "--encoder", s / "garbage.ckpt", "--out",
                      s / "x"});
  CHECK(r.status == 1);
}

TEST_CASE("alpha zero suppression reproduces the input clips") {
  Scratch s("alphazero");
  const auto config = write_config(s);
  const auto flow = prepare_flow(s, config);
  const auto r = invoke({"suppress", "--config", config, "--data", s / "data", "--flow", flow, "--alpha", "0", "--out",
                      s / "sup"});
  REQUIRE_MESSAGE(r.status == 0, r.err);
  const Dataset in = read_dataset(s / "data");
  const Dataset out = read_dataset(s / "sup");
  REQUIRE(in.clips.size() == out.clips.size());
  double worst = 0.0;
  for (std::size_t i = 0; i < in.clips.size(); ++i) {
    CHECK(out.clips[i].label == in.clips[i].label);
    const auto a = in.clips[i].clip.pixels(), b = out.clips[i].clip.pixels();
    REQUIRE(a.size() == b.size());
    for (std::size_t j = 0; j < a.size(); ++j) worst = std::max(worst, std::abs(double(a[j]) - double(b[j])));
  }
  CHECK(worst < 1e-4);
  for (const double count : csv_column(read_text_file(s / "sup/stats.csv"), 3)) CHECK(count == 0.0);
}

TEST_CASE("pretraining with suppression requires a flow and a latent strategy") {
  Scratch s("pretrain");
  const auto config = write_config(s);
  REQUIRE(invoke({"gen-data", "--config", config, "--out", s / "data"}).status == 0);
  const auto no_flow = invoke({"pretrain", "--config", config, "--data", s / "data", "--out", s / "enc"});
  CHECK(no_flow.status == 1);
  CHECK(no_flow.err.find("--flow") != std::string::npos);

  write_text_file(s / "tfd.ini", std::string(kTinyConfig) + "[suppress]\nstrategy = tfd\n");
  const auto tfd = invoke({"pretrain", "--config", s / "tfd.ini", "--data", s / "data", "--flow", "x", "--out", s / "enc"});
  CHECK(tfd.status == 1);
  CHECK(tfd.err.find("tfd") != std::string::npos);

  const auto ok = invoke({"pretrain", "--config", config, "--data", s / "data", "--no-suppress", "--out", s / "enc"});
  REQUIRE(ok.status == 0);
  CHECK(csv_column(read_text_file(s / "enc/loss.csv"), 1).size() == 6);
}
