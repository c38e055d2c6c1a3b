#include <algorithm>
#include <fstream>
#include <sstream>

#include "doctest.h"
#include "helpers.hpp"

#include "json.hpp"

#include "cbnlab/cli.hpp"
#include "cbnlab/trainer.hpp"

using namespace cbnlab;

namespace {

struct Run {
  int code;
  std::string out, err;
};

Run cli(std::vector<std::string> args) {
  std::ostringstream out, err;
  const int code = run_cli(args, out, err);
  return {code, out.str(), err.str()};
}

std::string write_config(const std::filesystem::path& dir, const ExperimentConfig& c) {
  const auto p = dir / "in.json";
  std::ofstream(p) << to_json(c).dump(2);
  return p.string();
}

}  // namespace

TEST_SUITE("cli") {

TEST_CASE("no arguments prints usage and exits 1") {
  const Run r = cli({});
  CHECK(r.code == 1);
  CHECK((r.err + r.out).find("gen-data") != std::string::npos);
}

TEST_CASE("usage errors exit 1") {
  CHECK(cli({"frobnicate"}).code == 1);
  CHECK(cli({"train", "--bogus"}).code == 1);
  CHECK(cli({"train", "--regime", "mnist"}).code == 1);
  CHECK(cli({"train", "--seed", "minus-one"}).code == 1);
  CHECK(cli({"train", "--config", "/nonexistent/cfg.json"}).code == 1);
  CHECK(cli({"train"}).code == 1);
}

TEST_CASE("help exits 0 and documents precedence") {
  const Run r = cli({"--help"});
  CHECK(r.code == 0);
  CHECK(r.out.find("--config") != std::string::npos);
  CHECK(r.out.find("command line wins") != std::string::npos);
}

TEST_CASE("invalid config values exit 1") {
  testing::TempDir dir("cli_badcfg");
  const auto p = dir.path / "bad.json";
  std::ofstream(p) << R"({"batch_size": 1})";
  CHECK(cli({"train", "--config", p.string(), "--out", (dir.path / "o").string()}).code == 1);
  std::ofstream(p) << "{not json";
  CHECK(cli({"train", "--config", p.string(), "--out", (dir.path / "o").string()}).code == 1);
}

TEST_CASE("grad-check passes with the default config") {
  const Run r = cli({"grad-check", "--trials", "3"});
  CHECK(r.code == 0);
  CHECK(r.out.find("cbn_model") != std::string::npos);
  CHECK(r.out.find("FAIL") == std::string::npos);
}

TEST_CASE("gen-data is byte-identical across invocations") {
  testing::TempDir dir("cli_gen");
  ExperimentConfig c = testing::tiny_config();
  const std::string cfg = write_config(dir.path, c);
  const auto a = dir.path / "a", b = dir.path / "b";
  REQUIRE(cli({"gen-data", "--config", cfg, "--regime", "cub-like", "--seed", "7", "--out",
               a.string()})
              .code == 0);
  REQUIRE(cli({"gen-data", "--config", cfg, "--regime", "cub-like", "--seed", "7", "--out",
               b.string()})
              .code == 0);
  CHECK(testing::slurp(a / "dataset.scds") == testing::slurp(b / "dataset.scds"));
  const auto j = nlohmann::json::parse(testing::slurp(a / "config.json"));
  CHECK(j["seed"] == 7);
  CHECK(j["dataset"]["seed"] == 7);
  CHECK(j["dataset"]["num_classes"] == 10);
  CHECK(j["dataset"]["samples_per_class"] == c.dataset.samples_per_class);
  const Dataset d = load_dataset(a / "dataset.scds");
  CHECK(d.num_classes == 10);
}

TEST_CASE("resolved config reproduces the run") {
  testing::TempDir dir("cli_echo");
  ExperimentConfig c = testing::tiny_config();
  c.num_runs = 1;
  const std::string cfg = write_config(dir.path, c);
  const auto a = dir.path / "a", b = dir.path / "b";
  const Run first = cli({"train", "--config", cfg, "--seed", "3", "--out", a.string()});
  REQUIRE(first.code == 0);
  CHECK(first.out.find("test accuracy") != std::string::npos);
  for (const char* f : {"config.json", "metrics.csv", "model.ckpt", "model.ckpt.json"}) {
    CHECK(std::filesystem::exists(a / f));
  }
  REQUIRE(cli({"train", "--config", (a / "config.json").string(), "--out", b.string()}).code ==
          0);
  CHECK(testing::slurp(a / "config.json") == testing::slurp(b / "config.json"));
  CHECK(testing::slurp(a / "metrics.csv") == testing::slurp(b / "metrics.csv"));
  CHECK(testing::slurp(a / "model.ckpt") == testing::slurp(b / "model.ckpt"));
  const std::string header = testing::slurp(a / "metrics.csv");
  CHECK(header.rfind(kMetricsHeader, 0) == 0);
}

TEST_CASE("supplementary training writes both checkpoints") {
  testing::TempDir dir("cli_supp");
  ExperimentConfig c = testing::tiny_config();
  c.epochs = 1;
  c.supplementary_enabled = true;
  const std::string cfg = write_config(dir.path, c);
  REQUIRE(cli({"train", "--config", cfg, "--out", (dir.path / "o").string()}).code == 0);
  CHECK(std::filesystem::exists(dir.path / "o" / "supplementary.ckpt"));
}

TEST_CASE("divergence exits 2") {
  testing::TempDir dir("cli_div");
  ExperimentConfig c = testing::tiny_config();
  c.learning_rate = 1e200;
  c.cosine_decay = false;
  const std::string cfg = write_config(dir.path, c);
  const Run r = cli({"train", "--config", cfg, "--out", (dir.path / "o").string()});
  CHECK(r.code == 2);
  CHECK(r.err.find("diverged") != std::string::npos);
}

TEST_CASE("sweep and report subcommands") {
  testing::TempDir dir("cli_sweep");
  ExperimentConfig c = testing::tiny_config();
  c.epochs = 1;
  c.num_runs = 2;
  const std::string cfg = write_config(dir.path, c);
  const auto out = dir.path / "sweep";
  const Run s = cli({"sweep-test-mask", "--config", cfg, "--mask-mode", "dimension_zero",
                     "--jobs", "2", "--out", out.string()});
  REQUIRE(s.code == 0);
  const std::string csv = testing::slurp(out / "sweeps.csv");
  CHECK(csv.find("test_dimension_zero") != std::string::npos);
  CHECK(std::count(csv.begin(), csv.end(), '\n') == 12);
  CHECK(std::filesystem::exists(out / "config.json"));

  const Run rep = cli({"report", "--out", out.string()});
  CHECK(rep.code == 0);
  CHECK(rep.out.find("aggregates recomputed") != std::string::npos);

  std::string edited = csv;
  const auto last = edited.rfind(',');
  edited.insert(last + 1, "9");
  std::ofstream(out / "sweeps.csv", std::ios::binary) << edited;
  CHECK(cli({"report", "--out", out.string()}).code == 2);
}

TEST_CASE("saliency subcommand writes heatmaps inside --out") {
  testing::TempDir dir("cli_saliency");
  ExperimentConfig c = testing::tiny_config();
  c.epochs = 1;
  c.num_runs = 1;
  const std::string cfg = write_config(dir.path, c);
  const auto out = dir.path / "sal";
  REQUIRE(cli({"saliency", "--config", cfg, "--examples", "2", "--out", out.string()}).code == 0);
  const std::string csv = testing::slurp(out / "saliency.csv");
  CHECK(std::count(csv.begin(), csv.end(), '\n') == 4);
  std::size_t pgm = 0;
  for (const auto& e : std::filesystem::recursive_directory_iterator(out)) {
    pgm += e.path().extension() == ".pgm";
  }
  CHECK(pgm == 6);
}

}  // TEST_SUITE
