// Acceptance runner: one PASS/FAIL/SKIP line per criterion, details indented
// underneath. Exit status is nonzero when any criterion fails, except those
// listed with --allow-fail.

#include <chrono>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iomanip>
#include <iostream>
#include <map>
#include <set>
#include <sstream>

#include <CLI11.hpp>

#include "oracles.hpp"
#include "support.hpp"
#include "tokenhier/bench.hpp"
#include "tokenhier/cli.hpp"
#include "tokenhier/color.hpp"
#include "tokenhier/gradcheck.hpp"
#include "tokenhier/heads.hpp"
#include "tokenhier/json_schema.hpp"
#include "tokenhier/metrics.hpp"
#include "tokenhier/ssl.hpp"

using namespace tokenhier;
namespace fs = std::filesystem;

namespace {

enum class Verdict { PASS, FAIL, SKIP };

struct Outcome {
  Verdict verdict = Verdict::FAIL;
  std::vector<std::string> details;

  void note(const std::string& s) { details.push_back(s); }
  Outcome& require(bool ok, const std::string& what) {
    note(std::string(ok ? "ok   " : "FAIL ") + what);
    if (!ok) verdict = Verdict::FAIL;
    return *this;
  }
};

std::string num(double v, int digits = 4) {
  std::ostringstream os;
  os << std::fixed << std::setprecision(digits) << v;
  return os.str();
}

std::string sci(double v) {
  std::ostringstream os;
  os << std::scientific << std::setprecision(2) << v;
  return os.str();
}

Outcome start() { return Outcome{Verdict::PASS, {}}; }

// ------------------------------------------------------------------ 1

Outcome gradients() {
  Outcome o = start();
  double worst = 0.0;
  for (const auto& r : run_gradcheck()) {
    o.require(r.passed, r.component + " worst rel. error " + sci(r.worst_rel_error) + " (" + r.worst_tensor + ")");
    worst = std::max(worst, r.worst_rel_error);
  }
  o.note("max over components " + sci(worst) + ", tolerance 1e-4");
  return o;
}

// ------------------------------------------------------------------ 2

Outcome oracles() {
  Outcome o = start();
  RngStream hist_rng(2024, 21);
  int mismatches = 0;
  for (int i = 0; i < 1000; ++i) {
    const GrayHistogram h = testing::random_histogram(hist_rng);
    mismatches += otsu_threshold(h) != testing::exhaustive_otsu(h);
  }
  o.require(mismatches == 0, "otsu vs exhaustive search: " + std::to_string(mismatches) + " / 1000 mismatches");

  RngStream k_rng(2024, 22);
  double worst = 0.0;
  for (int n = 2; n <= 64; ++n) {
    const Mat f = testing::random_mat(n, 8, k_rng);
    worst = std::max(worst, std::abs(koleo_loss(f) - static_cast<double>(testing::koleo_oracle(f))));
  }
  o.require(worst <= 1e-12, "koleo vs all-pairs oracle, n = 2..64: max abs diff " + sci(worst));

  RngStream p_rng(0, 0);
  AttnPoolParams p = AttnPoolParams::init(2, 2, 1, true, p_rng);
  p.wq = Mat::Identity(2, 2);
  p.wk = Mat{{1.0, 0.0}, {0.0, 2.0}};
  p.wv = Mat::Identity(2, 2);
  p.wo = Mat::Identity(2, 2);
  p.bq.setZero();
  p.bk.setZero();
  p.bv.setZero();
  p.bo.setZero();
  TokenSequence s;
  s.cls = RowVec{{1.0, 0.0}};
  s.patches = Mat{{2.0, 0.0}, {0.0, 1.0}};
  const long double e = std::exp(std::sqrt(2.0L));
  const long double a1 = e / (e + 1), a2 = 1 / (e + 1);
  const RowVec h = attention_pool(s, p).h;
  const double err = std::max(std::abs(h(0) - static_cast<double>(2 * a1)), std::abs(h(1) - static_cast<double>(a2)));
  o.require(err <= 1e-12, "two-token attention pool vs closed form: max abs diff " + sci(err));
  return o;
}

// ------------------------------------------------------------------ 3

int max_channel_error(const Raster& a, const Raster& b) {
  int worst = 0;
  for (std::size_t i = 0; i < a.pixels.size(); ++i) worst = std::max(worst, std::abs(a.pixels[i] - b.pixels[i]));
  return worst;
}

Outcome colorimetry() {
  Outcome o = start();
  RngStream rng(2024, 31);
  const Raster r = testing::random_raster(400, 250, rng);
  const int lab_err = max_channel_error(r, lab_to_rgb(rgb_to_lab(r)));
  const int hsv_err = max_channel_error(r, hsv_to_rgb(rgb_to_hsv(r)));
  o.require(lab_err <= 1, "RGB->LAB->RGB on 1e5 pixels: max channel error " + std::to_string(lab_err) + "/255");
  o.require(hsv_err <= 1, "RGB->HSV->RGB on 1e5 pixels: max channel error " + std::to_string(hsv_err) + "/255");

  const auto white = rgb_to_lab(255, 255, 255), black = rgb_to_lab(0, 0, 0);
  o.require(std::abs(white[0] - 100.0) < 1e-9 && std::abs(white[1]) < 0.01 && std::abs(white[2]) < 0.01,
            "white -> LAB (" + num(white[0]) + ", " + num(white[1]) + ", " + num(white[2]) + ")");
  o.require(black[0] == 0.0 && black[1] == 0.0 && black[2] == 0.0, "black -> LAB (0, 0, 0)");
  const auto red = rgb_to_hsv(255, 0, 0);
  o.require(red[0] == 0.0 && red[1] == 1.0 && red[2] == 1.0, "red -> HSV (0, 1, 1)");
  o.require(hsv_to_rgb(0.0, 1.0, 1.0) == std::array<std::uint8_t, 3>{255, 0, 0} &&
                lab_to_rgb(100.0, 0.0, 0.0) == std::array<std::uint8_t, 3>{255, 255, 255},
            "inverse anchors");
  return o;
}

// ------------------------------------------------------------------ 4

Outcome local_signal() {
  Outcome o = start();
  const auto t0 = std::chrono::steady_clock::now();
  const HeadTrainConfig head;
  const TokenSuiteSpec spec;
  double lin = 0.0, att = 0.0;
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    RngStream rng(seed, 0x70c);
    const TokenSplits d = make_local_token_suite(rng, spec);
    HeadTrainConfig h = head;
    h.seed = seed;
    const double l = run_probe(d.train, d.val, d.test, spec.num_classes, HeadMode::LINEAR, h).test.bacc;
    const double a = run_probe(d.train, d.val, d.test, spec.num_classes, HeadMode::ATTNPOOL, h).test.bacc;
    o.note("seed " + std::to_string(seed) + ": linear " + num(l) + ", attnpool " + num(a));
    lin += l / 5;
    att += a / 5;
  }
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  o.require(lin >= 0.45 && lin <= 0.55, "linear probe 5-seed mean BACC " + num(lin) + " in [0.45, 0.55]");
  o.require(att >= 0.95, "attention pooling 5-seed mean BACC " + num(att) + " >= 0.95");
  o.require(secs < 300, "runtime " + num(secs, 1) + " s < 300 s");
  return o;
}

// ------------------------------------------------------------------ 5

Outcome ablation() {
  Outcome o = start();
  const auto t0 = std::chrono::steady_clock::now();
  const AblationConfig cfg = default_ablation_config();
  const nlohmann::json report = run_ablation(cfg);
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();

  for (const auto& task : report["tasks"]) {
    std::string line = task["name"].get<std::string>() + ":";
    const auto& m = task["row_means"];
    for (std::size_t r = 0; r < m.size(); ++r) {
      line += " row " + std::to_string(m[r]["row"].get<int>()) + " " + num(m[r]["bacc"].get<double>() * 100.0, 1);
      if (r > 0) line += " " + format_delta(m[r]["bacc"].get<double>() - m[r - 1]["bacc"].get<double>());
    }
    o.note(line);
  }
  const auto& rows = report["ablation_rows"];
  std::string avg = "average:";
  for (std::size_t r = 0; r < rows.size(); ++r) {
    avg += " row " + std::to_string(rows[r]["row"].get<int>()) + " " + num(rows[r]["bacc"].get<double>() * 100.0, 1);
    if (r > 0) avg += " " + report["deltas"][r - 1]["text"].get<std::string>();
  }
  o.note(avg);
  o.require(rows.size() == 3, "three ablation rows");
  for (std::size_t r = 1; r < rows.size(); ++r) {
    const double margin = rows[r]["bacc"].get<double>() - rows[r - 1]["bacc"].get<double>();
    o.require(margin >= cfg.min_margin, "task average: row " + std::to_string(r + 1) + " - row " + std::to_string(r) +
                                            " = " + num(margin) + ", needs >= " + num(cfg.min_margin, 2));
  }
  for (const auto& c : report["ordering"]) {
    o.require(c["passed"].get<bool>(), c["task"].get<std::string>() + ": row " + std::to_string(c["to_row"].get<int>()) +
                                           " - row " + std::to_string(c["from_row"].get<int>()) + " = " +
                                           num(c["margin"].get<double>()) + " " + c["text"].get<std::string>() +
                                           ", needs >= " + num(cfg.min_margin, 2));
  }
  o.require(validate_json(report, bench_report_schema()).empty(), "report validates against the shipped schema");
  o.require(secs < 900, "runtime " + num(secs, 1) + " s < 900 s");
  return o;
}

// ------------------------------------------------------------------ 6

Outcome smoke_training() {
  Outcome o = start();
  SslState st{SslConfig{}};
  const auto corpus = bundled_corpus(st.cfg.seed, 64, st.cfg.encoder.image_size);
  std::vector<double> total;
  run_training(st, corpus, 200, Phase::PRETRAIN, [&](int, const LossBreakdown& l) { total.push_back(l.total); });
  std::vector<double> window(4, 0.0);
  for (int w = 0; w < 4; ++w) {
    for (int i = 50 * w; i < 50 * w + 50; ++i) window[static_cast<std::size_t>(w)] += total[static_cast<std::size_t>(i)] / 50;
  }
  o.require(window[0] > window[1] && window[1] > window[2] && window[2] > window[3],
            "50-step window means of total loss: " + num(window[0]) + " > " + num(window[1]) + " > " +
                num(window[2]) + " > " + num(window[3]));

  std::vector<Raster> batch(corpus.begin(), corpus.begin() + st.cfg.batch_size);
  anchor_gram_teacher(st);
  const LossBreakdown post = evaluate_objective(st, batch, Phase::POSTTRAIN, nullptr);
  o.require(std::isfinite(post.gram) && post.gram > 0.0,
            "post-training gram term with the teacher snapshot as anchor: " + sci(post.gram));
  st.gram_teacher = st.student.encoder;
  const LossBreakdown same = evaluate_objective(st, batch, Phase::POSTTRAIN, nullptr);
  o.require(same.gram == 0.0, "gram term with the student as anchor: " + sci(same.gram));
  return o;
}

// ------------------------------------------------------------------ 7

Outcome metrics() {
  Outcome o = start();
  const std::vector<int> t{0, 0, 1, 1}, p{0, 1, 1, 1};
  const double ex = balanced_accuracy(t, p, 2).bacc;
  o.require(ex == 0.75, "hand-computed example: " + num(ex));

  RngStream rng(2024, 71);
  double worst = 0.0;
  for (int trial = 0; trial < 500; ++trial) {
    const int c = 2 + static_cast<int>(rng.below(8)), per = 1 + static_cast<int>(rng.below(40));
    std::vector<int> yt, yp;
    int correct = 0;
    for (int k = 0; k < c; ++k) {
      for (int i = 0; i < per; ++i) {
        yt.push_back(k);
        yp.push_back(static_cast<int>(rng.below(static_cast<std::uint64_t>(c))));
        correct += yp.back() == k;
      }
    }
    worst = std::max(worst, std::abs(balanced_accuracy(yt, yp, c).bacc - static_cast<double>(correct) / yt.size()));
  }
  o.require(worst <= 1e-12, "balanced constructions vs plain accuracy: max diff " + sci(worst));

  double worst_const = 0.0;
  for (int c = 2; c <= 9; ++c) {
    std::vector<int> yt;
    for (int k = 0; k < c; ++k) yt.insert(yt.end(), 11, k);
    for (int k = 0; k < c; ++k) {
      const std::vector<int> yp(yt.size(), k);
      worst_const = std::max(worst_const, std::abs(balanced_accuracy(yt, yp, c).bacc - 1.0 / c));
    }
  }
  o.require(worst_const <= 1e-15, "constant predictor scores 1/C for C = 2..9");
  return o;
}

// ------------------------------------------------------------------ 8

int cli(const std::vector<std::string>& args, std::string* stdout_text = nullptr) {
  std::vector<const char*> argv{"tokenhier"};
  for (const auto& a : args) argv.push_back(a.c_str());
  std::ostringstream out, err;
  const int code = run_cli(static_cast<int>(argv.size()), argv.data(), out, err);
  if (stdout_text) *stdout_text = out.str();
  return code;
}

// Every regular file under `root` except run sidecars, concatenated with names.
std::string tree_bytes(const fs::path& root) {
  std::vector<fs::path> files;
  for (const auto& e : fs::recursive_directory_iterator(root)) {
    if (e.is_regular_file() && e.path().string().find(".run.json") == std::string::npos) files.push_back(e.path());
  }
  std::sort(files.begin(), files.end());
  std::string all;
  for (const auto& f : files) all += fs::relative(f, root).string() + '\n' + testing::slurp(f);
  return all;
}

Outcome determinism() {
  Outcome o = start();
  testing::TempDir dir("acceptance-threads");
  const fs::path in = dir / "inputs";
  fs::create_directories(in / "slides");
  const auto tiles = bundled_corpus(0, 4, 64);
  Raster slide(256, 256, 255);
  for (std::size_t i = 0; i < tiles.size(); ++i) {
    for (int y = 0; y < 64; ++y) {
      for (int x = 0; x < 64; ++x) {
        for (int c = 0; c < 3; ++c) slide.at(64 + 64 * static_cast<int>(i % 2) + x, 64 + 64 * static_cast<int>(i / 2) + y, c) = tiles[i].at(x, y, c);
      }
    }
  }
  write_ppm(in / "slides" / "slide.ppm", slide);
  const std::string ssl = (in / "ssl.json").string();
  std::ofstream(ssl) << R"({"prototype_count": 32, "batch_size": 4,
    "encoder": {"image_size": 32, "token_size": 16, "embed_dim": 16, "depth": 1, "num_heads": 2}})";
  const std::string abl = (in / "ablation.json").string();
  std::ofstream(abl) << R"({"seeds": [0], "suites": ["SHIFTED", "LOCAL"], "pretrain_steps": 3,
    "suite": {"per_class": 10, "image_size": 32, "tile_size": 16}, "head": {"epochs": 3},
    "ssl": {"prototype_count": 32, "batch_size": 4,
            "encoder": {"image_size": 32, "token_size": 16, "embed_dim": 16, "depth": 1, "num_heads": 2}}})";

  const fs::path w = dir / "work";
  const std::string W = w.string();
  struct Command {
    std::string name;
    std::vector<std::string> args;
  };
  const std::vector<Command> commands = {
      {"synth", {"synth", "--kind", "LOCAL", "--per-class", "6", "--image-size", "32", "--out", W + "/synth"}},
      {"tile", {"tile", "--input", (in / "slides").string(), "--out", W + "/tiles.jsonl", "--tile-size", "64"}},
      {"augment", {"augment", "--input", (in / "slides" / "slide.ppm").string(), "--out", W + "/aug.ppm", "--space", "both"}},
      {"pretrain", {"pretrain", "--config", ssl, "--steps", "3", "--out", W + "/pre.ckpt"}},
      {"posttrain", {"posttrain", "--config", ssl, "--steps", "2", "--init", W + "/pre.ckpt", "--gram-teacher",
                     W + "/pre.ckpt", "--out", W + "/post.ckpt"}},
      {"embed", {"embed", "--ckpt", W + "/post.ckpt", "--data", W + "/synth", "--out", W + "/emb.ckpt"}},
      {"probe", {"probe", "--ckpt", W + "/post.ckpt", "--suite", "LOCAL", "--per-class", "20", "--mode", "attnpool",
                 "--epochs", "5", "--report", W + "/probe.json"}},
      {"bench", {"bench", "--ckpt", W + "/post.ckpt", "--suite", "GLOBAL", "--data", W + "/synth", "--per-class", "10",
                 "--epochs", "3", "--report", W + "/bench.json"}},
      {"ablate", {"ablate", "--config", abl, "--out", W + "/ablation.json"}},
      {"gradcheck", {"gradcheck"}},
  };

  std::map<std::string, std::string> reference;
  std::set<std::string> differs;
  bool all_ran = true;
  for (const char* threads : {"1", "4", "8"}) {
    fs::remove_all(w);
    fs::create_directories(w);
    std::map<std::string, std::string> stdout_text;
    for (const auto& c : commands) {
      std::vector<std::string> args = {"--quiet", "--threads", threads, "--seed", "3"};
      args.insert(args.end(), c.args.begin(), c.args.end());
      std::string text;
      const int code = cli(args, &text);
      if (code != kExitOk) {
        all_ran = false;
        o.note(std::string("FAIL ") + c.name + " exited with " + std::to_string(code) + " at --threads " + threads);
      }
      stdout_text[c.name] = text;
    }
    const std::string outputs = tree_bytes(w);
    std::map<std::string, std::string> current = stdout_text;
    current["files"] = outputs;
    if (reference.empty()) {
      reference = current;
    } else {
      for (const auto& [name, bytes] : current) {
        if (reference[name] != bytes) differs.insert(name + " (--threads " + threads + ")");
      }
    }
  }
  o.note("compared " + std::to_string(reference["files"].size()) + " bytes of output files plus stdout per run");
  std::string names;
  for (const auto& c : commands) names += (names.empty() ? "" : ", ") + c.name;
  o.require(all_ran, "all commands exit 0: " + names);
  std::string diff;
  for (const auto& d : differs) diff += " " + d;
  o.require(differs.empty(), "output files and stdout byte-identical across --threads 1, 4, 8" +
                                 (diff.empty() ? std::string() : ";" + diff + " differ"));
  return o;
}

// ------------------------------------------------------------------ 9

Outcome real_data() {
  Outcome o = start();
  const char* dir = std::getenv("TOKENHIER_CRC_VAL_DIR");
  if (!dir || !*dir) {
    o.verdict = Verdict::SKIP;
    o.note("set TOKENHIER_CRC_VAL_DIR to a CRC-VAL-HE-7K class-directory tree to run");
    return o;
  }
  const IngestResult r = ingest_directory(dir);
  o.note(std::to_string(r.files_seen) + " files seen, " + std::to_string(r.errors.size()) + " unreadable, " +
         std::to_string(r.warnings.size()) + " warnings");
  o.require(r.dataset.num_classes() == 9, "classes: " + std::to_string(r.dataset.num_classes()) + " (expected 9)");
  o.require(r.dataset.items.size() == 7180, "items: " + std::to_string(r.dataset.items.size()) + " (expected 7180)");
  return o;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Acceptance criteria runner"};
  std::vector<int> only, allow_fail;
  app.add_option("--only", only, "Run only these criteria (1-9)");
  app.add_option("--allow-fail", allow_fail, "Criteria whose failure does not affect the exit status");
  CLI11_PARSE(app, argc, argv);

  const std::vector<std::pair<std::string, std::function<Outcome()>>> criteria = {
      {"gradient correctness", gradients},
      {"oracle equivalence", oracles},
      {"colorimetry", colorimetry},
      {"local-signal separation", local_signal},
      {"ablation ordering", ablation},
      {"ssl smoke training", smoke_training},
      {"metric correctness", metrics},
      {"cli determinism", determinism},
      {"real-data ingestion", real_data},
  };

  int failures = 0, tolerated = 0;
  for (std::size_t i = 0; i < criteria.size(); ++i) {
    const int id = static_cast<int>(i) + 1;
    if (!only.empty() && std::find(only.begin(), only.end(), id) == only.end()) continue;
    const auto t0 = std::chrono::steady_clock::now();
    Outcome o;
    try {
      o = criteria[i].second();
    } catch (const std::exception& e) {
      o.verdict = Verdict::FAIL;
      o.note(std::string("exception: ") + e.what());
    }
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    const bool allowed = std::find(allow_fail.begin(), allow_fail.end(), id) != allow_fail.end();
    const char* tag = o.verdict == Verdict::PASS ? "PASS" : o.verdict == Verdict::SKIP ? "SKIP" : "FAIL";
    std::cout << "criterion " << id << ": " << tag << "  " << criteria[i].first << " (" << num(secs, 1) << " s)";
    if (o.verdict == Verdict::FAIL && allowed) std::cout << "  [known failure, not counted]";
    std::cout << '\n';
    for (const auto& d : o.details) std::cout << "    " << d << '\n';
    std::cout.flush();
    if (o.verdict == Verdict::FAIL) (allowed ? tolerated : failures) += 1;
  }
  std::cout << "summary: " << failures << " failing, " << tolerated << " known failing\n";
  return failures == 0 ? 0 : 1;
}
