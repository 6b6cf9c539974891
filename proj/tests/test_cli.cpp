#include <doctest.h>

#include <sstream>

#include "support.hpp"
#include "tokenhier/bench.hpp"
#include "tokenhier/cli.hpp"
#include "tokenhier/json_schema.hpp"
#include "tokenhier/tiler.hpp"

using namespace tokenhier;

namespace {

struct Run {
  int code = 0;
  std::string out, err;
};

Run cli(std::vector<std::string> args) {
  args.insert(args.begin(), "tokenhier");
  std::vector<const char*> argv;
  for (const auto& a : args) argv.push_back(a.c_str());
  std::ostringstream out, err;
  Run r;
  r.code = run_cli(static_cast<int>(argv.size()), argv.data(), out, err);
  r.out = out.str();
  r.err = err.str();
  return r;
}

std::size_t line_count(const std::string& s) { return static_cast<std::size_t>(std::count(s.begin(), s.end(), '\n')); }

const char* kTinySsl = R"({"prototype_count": 16, "batch_size": 4,
  "encoder": {"image_size": 32, "token_size": 16, "embed_dim": 16, "depth": 1, "num_heads": 2}})";

std::string tiny_ssl_file(const testing::TempDir& dir) {
  const auto p = dir / "ssl.json";
  std::ofstream(p) << kTinySsl;
  return p.string();
}

Raster dark_block(int size) {
  Raster r(size, size, 250);
  for (int y = 0; y < size / 2; ++y) {
    for (int x = 0; x < size; ++x) r.set(x, y, 60, 30, 90);
  }
  return r;
}

}  // namespace

TEST_CASE("usage errors") {
  CHECK(cli({}).code == kExitUsage);
  CHECK(cli({"--help"}).code == kExitOk);
  CHECK(cli({"frobnicate"}).code == kExitUsage);
  testing::TempDir dir("usage");
  const Run bogus = cli({"probe", "--ckpt", "x", "--suite", "LOCAL", "--mode", "bogus", "--report", "r.json"});
  CHECK(bogus.code == kExitUsage);
  CHECK(bogus.err.find("bogus") != std::string::npos);
  CHECK(cli({"--threads", "0", "gradcheck"}).code == kExitUsage);
}

TEST_CASE("tile command") {
  testing::TempDir dir("tile");
  std::filesystem::create_directories(dir / "in");
  write_ppm(dir / "in" / "slide.ppm", dark_block(512));
  const std::string manifest = (dir / "m.jsonl").string();
  const Run r = cli({"--quiet", "tile", "--input", (dir / "in" / "slide.ppm").string(), "--out", manifest,
                     "--tile-size", "256", "--min-tissue", "0"});
  CHECK(r.code == kExitOk);
  const std::string first = testing::slurp(manifest);
  CHECK(line_count(first) == 5);  // header plus one line per tile
  CHECK(read_manifest(manifest).records.size() == 4);
  CHECK(cli({"--quiet", "tile", "--input", (dir / "in").string(), "--out", manifest, "--tile-size", "256",
             "--min-tissue", "0"})
            .code == kExitOk);
  CHECK(testing::slurp(manifest) == first);
  CHECK(std::filesystem::exists(manifest + ".run.json"));

  // Half the image is tissue: only the top row of tiles is kept at 0.5.
  CHECK(cli({"--quiet", "tile", "--input", (dir / "in").string(), "--out", manifest, "--tile-size", "128"}).code ==
        kExitOk);
  CHECK(read_manifest(manifest).records.size() == 8);

  std::filesystem::create_directories(dir / "empty");
  const Run e = cli({"--quiet", "tile", "--input", (dir / "empty").string(), "--out", manifest});
  CHECK(e.code == kExitOk);
  CHECK(e.err.find("warning") != std::string::npos);
  CHECK(read_manifest(manifest).records.empty());

  CHECK(cli({"--quiet", "tile", "--input", (dir / "nothing").string(), "--out", manifest}).code == kExitUsage);
  std::ofstream(dir / "bad.ppm") << "P3\n1 1\n";
  CHECK(cli({"--quiet", "tile", "--input", (dir / "bad.ppm").string(), "--out", manifest}).code == kExitUsage);
  std::filesystem::create_directories(dir / "white");
  write_ppm(dir / "white" / "blank.ppm", Raster(300, 300, 255));
  CHECK(cli({"--quiet", "tile", "--input", (dir / "white").string(), "--out", manifest}).code == kExitData);
}

TEST_CASE("pretrain and posttrain") {
  testing::TempDir dir("train");
  const std::string cfg = tiny_ssl_file(dir);
  const std::string init = (dir / "init.ckpt").string(), pre = (dir / "pre.ckpt").string();
  REQUIRE(cli({"--quiet", "pretrain", "--config", cfg, "--steps", "0", "--out", init}).code == kExitOk);
  SslState fresh(ssl_config_from_json(nlohmann::json::parse(kTinySsl)));
  SslState loaded(fresh.cfg);
  load_ssl_checkpoint(read_checkpoint(init), loaded);
  CHECK(hash_params(loaded.student) == hash_params(fresh.student));
  CHECK(testing::slurp(init + ".loss.jsonl").empty());

  REQUIRE(cli({"--quiet", "pretrain", "--config", cfg, "--steps", "3", "--out", pre}).code == kExitOk);
  std::istringstream log(testing::slurp(pre + ".loss.jsonl"));
  std::string line;
  int n = 0;
  while (std::getline(log, line)) {
    CHECK(nlohmann::json::parse(line)["gram"] == 0.0);
    ++n;
  }
  CHECK(n == 3);

  const Run missing = cli({"--quiet", "posttrain", "--config", cfg, "--steps", "1", "--out", (dir / "p.ckpt").string()});
  CHECK(missing.code == kExitUsage);
  CHECK(missing.err.find("gram-teacher") != std::string::npos);

  REQUIRE(cli({"--quiet", "posttrain", "--config", cfg, "--steps", "2", "--init", pre, "--gram-teacher", init,
               "--out", (dir / "post.ckpt").string()})
              .code == kExitOk);
  std::istringstream plog(testing::slurp(dir / "post.ckpt.loss.jsonl"));
  while (std::getline(plog, line)) CHECK(nlohmann::json::parse(line)["gram"].get<double>() > 0.0);
}

TEST_CASE("probe reports") {
  testing::TempDir dir("probe");
  const std::string init = (dir / "init.ckpt").string();
  REQUIRE(cli({"--quiet", "pretrain", "--steps", "0", "--out", init}).code == kExitOk);

  const std::string g = (dir / "global.json").string();
  REQUIRE(cli({"--quiet", "probe", "--ckpt", init, "--suite", "GLOBAL", "--mode", "linear", "--report", g}).code ==
          kExitOk);
  const auto report = nlohmann::json::parse(testing::slurp(g));
  CHECK(validate_json(report, bench_report_schema()).empty());
  CHECK(report["tasks"][0]["row_means"][0]["bacc"].get<double>() >= 0.9);

  double bacc[2];
  int i = 0;
  for (const char* mode : {"linear", "attnpool"}) {
    const std::string path = (dir / (std::string(mode) + ".json")).string();
    REQUIRE(cli({"--quiet", "probe", "--ckpt", init, "--suite", "LOCAL", "--per-class", "200", "--mode", mode,
                 "--report", path})
                .code == kExitOk);
    bacc[i++] = nlohmann::json::parse(testing::slurp(path))["tasks"][0]["row_means"][0]["bacc"].get<double>();
  }
  CHECK(bacc[1] - bacc[0] >= 0.3);

  // A single-class directory is a usage error.
  LabeledDataset one;
  one.class_names = {"only"};
  RngStream rng(1, 0);
  for (int k = 0; k < 5; ++k) one.items.push_back({"i" + std::to_string(k), {}, testing::random_raster(64, 64, rng), 0});
  write_dataset(one, dir / "one");
  CHECK(cli({"--quiet", "probe", "--ckpt", init, "--data", (dir / "one").string(), "--report", g}).code == kExitUsage);
}

TEST_CASE("gradcheck command") {
  const Run ok = cli({"gradcheck"});
  CHECK(ok.code == kExitOk);
  CHECK(ok.out.find("gradcheck passed") != std::string::npos);
  const Run fault = cli({"gradcheck", "--fault", "heads.attnpool"});
  CHECK(fault.code == kExitVerifyFailed);
  CHECK(fault.out.find("heads.attnpool ") != std::string::npos);
  CHECK(fault.out.find("FAIL") != std::string::npos);
  CHECK(cli({"gradcheck", "--fault", "heads.nothing"}).code == kExitUsage);
  CHECK(cli({"--threads", "4", "gradcheck"}).out == ok.out);
}

TEST_CASE("outputs do not depend on the thread count") {
  testing::TempDir dir("threads");
  const std::string cfg = tiny_ssl_file(dir);
  std::vector<std::string> ckpts, logs, reports;
  for (const char* threads : {"1", "4", "8"}) {
    // Same paths every time, since the paths are part of the recorded config.
    const auto base = dir / "run";
    REQUIRE(cli({"--quiet", "--threads", threads, "pretrain", "--config", cfg, "--steps", "3", "--out",
                 (base.string() + ".ckpt")})
                .code == kExitOk);
    REQUIRE(cli({"--quiet", "--threads", threads, "probe", "--ckpt", base.string() + ".ckpt", "--suite", "LOCAL",
                 "--per-class", "20", "--mode", "attnpool", "--epochs", "5", "--report", base.string() + ".json"})
                .code == kExitOk);
    ckpts.push_back(testing::slurp(base.string() + ".ckpt"));
    logs.push_back(testing::slurp(base.string() + ".ckpt.loss.jsonl"));
    reports.push_back(testing::slurp(base.string() + ".json"));
  }
  for (std::size_t k = 1; k < 3; ++k) {
    CHECK(ckpts[k] == ckpts[0]);
    CHECK(logs[k] == logs[0]);
    CHECK(reports[k] == reports[0]);
  }
}

TEST_CASE("ablate and synth commands") {
  testing::TempDir dir("ablate");
  const nlohmann::json cfg = {
      {"seeds", {0}},
      {"suites", {"LOCAL"}},
      {"suite", {{"per_class", 10}, {"image_size", 32}, {"tile_size", 16}}},
      {"ssl", nlohmann::json::parse(kTinySsl)},
      {"pretrain_steps", 2},
      {"head", {{"epochs", 3}}}};
  std::ofstream(dir / "a.json") << cfg.dump();
  const std::string out = (dir / "report.json").string();
  const Run r = cli({"--quiet", "ablate", "--config", (dir / "a.json").string(), "--out", out});
  CHECK(r.code == kExitOk);
  const auto report = nlohmann::json::parse(testing::slurp(out));
  CHECK(validate_json(report, bench_report_schema()).empty());
  CHECK(report["tasks"][0]["row_means"].size() == 3);
  CHECK(std::filesystem::exists(dir / "report.svg"));

  REQUIRE(cli({"--quiet", "synth", "--kind", "GLOBAL", "--per-class", "5", "--out", (dir / "syn").string()}).code ==
          kExitOk);
  const IngestResult ing = ingest_directory(dir / "syn");
  CHECK(ing.dataset.num_classes() == 2);
  CHECK(ing.dataset.items.size() == 10);
}
