#include "tokenhier/cli.hpp"

#include <CLI11.hpp>

#include <algorithm>
#include <cstdlib>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <set>
#include <sstream>

#include "tokenhier/bench.hpp"
#include "tokenhier/checkpoint.hpp"
#include "tokenhier/gradcheck.hpp"
#include "tokenhier/json_schema.hpp"
#include "tokenhier/ssl.hpp"
#include "tokenhier/tiler.hpp"

namespace tokenhier {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

struct Global {
  int threads = 0;
  std::uint64_t seed = 0;
  bool seed_given = false;
  bool quiet = false;
};

void write_text(const fs::path& path, const std::string& text) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream f(path, std::ios::binary);
  if (!f) throw DataError("cannot write " + path.string());
  f << text;
  if (!f) throw DataError("write failed: " + path.string());
}

json read_json_file(const fs::path& path) {
  std::ifstream f(path);
  if (!f) throw ConfigError("cannot read config " + path.string());
  try {
    return json::parse(f);
  } catch (const json::exception& e) {
    throw ConfigError(path.string() + ": " + e.what());
  }
}

/// Sidecar next to the primary output: resolved config and its fingerprint.
void write_run_record(const fs::path& primary, const std::string& command, const json& config) {
  const json rec = {{"command", command}, {"config", config}, {"config_fingerprint", config_fingerprint(config)}};
  write_text(primary.string() + ".run.json", rec.dump(2) + "\n");
}

std::vector<fs::path> list_ppm(const fs::path& dir, bool recursive) {
  std::vector<fs::path> out;
  auto take = [&](const fs::directory_entry& e) {
    std::string ext = e.path().extension().string();
    std::transform(ext.begin(), ext.end(), ext.begin(), [](unsigned char c) { return std::tolower(c); });
    if (e.is_regular_file() && ext == ".ppm") out.push_back(e.path());
  };
  if (recursive) {
    for (const auto& e : fs::recursive_directory_iterator(dir)) take(e);
  } else {
    for (const auto& e : fs::directory_iterator(dir)) take(e);
  }
  std::sort(out.begin(), out.end());
  return out;
}

fs::path with_extension(const fs::path& p, const std::string& ext) {
  fs::path q = p;
  q.replace_extension(ext);
  return q;
}

// ---------------------------------------------------------------- tile

struct TileArgs {
  std::string input, out;
  int tile_size = 256;
  double min_tissue = 0.5;
  bool invert = false;
  std::optional<int> label;
};

int cmd_tile(const TileArgs& a, std::ostream& out, std::ostream& err) {
  std::vector<fs::path> inputs;
  if (fs::is_directory(a.input)) {
    inputs = list_ppm(a.input, false);
  } else if (fs::is_regular_file(a.input)) {
    inputs = {a.input};
  } else {
    throw ConfigError("tile: cannot read input '" + a.input + "'");
  }
  TileOptions opt;
  opt.tile_size = a.tile_size;
  opt.min_tissue_fraction = a.min_tissue;
  opt.invert = a.invert;
  opt.label = a.label;

  std::vector<TileManifest> parts;
  int skipped = 0;
  for (const auto& p : inputs) {
    Raster r;
    try {
      r = read_ppm(p);
    } catch (const Error& e) {
      throw ConfigError("tile: unreadable input " + p.string() + ": " + e.what());
    }
    try {
      parts.push_back(extract_tiles(r, p.stem().string(), opt));
    } catch (const DegenerateInputError& e) {
      err << "warning: skipping " << p.string() << ": " << e.what() << '\n';
      ++skipped;
    }
  }
  if (inputs.empty()) err << "warning: no .ppm inputs under " << a.input << '\n';
  const TileManifest m = merge_manifests(std::move(parts), opt);
  write_manifest(a.out, m);
  const json config = {{"tile_size", a.tile_size},
                       {"min_tissue_fraction", a.min_tissue},
                       {"invert", a.invert},
                       {"label", a.label ? json(*a.label) : json(nullptr)},
                       {"sources", inputs.size()}};
  write_run_record(a.out, "tile", config);
  out << "tiles: " << m.records.size() << " from " << inputs.size() - static_cast<std::size_t>(skipped)
      << " sources (" << skipped << " skipped)\n";
  if (!inputs.empty() && static_cast<std::size_t>(skipped) == inputs.size()) return kExitData;
  return kExitOk;
}

// ---------------------------------------------------------------- augment

struct AugmentArgs {
  std::string input, out, space = "random", config;
};

int cmd_augment(const AugmentArgs& a, const Global& g, std::ostream& out) {
  StainAugConfig stain;
  if (!a.config.empty()) stain = ssl_config_from_json({{"stain", read_json_file(a.config)}}).stain;
  stain.space = stain_space_from_string(a.space);
  stain.validate();
  const Raster r = read_ppm(a.input);
  RngStream rng(g.seed, 0xa06);
  std::vector<StainDraw> trace;
  const Raster aug = stain_augment(r, stain, rng, &trace);
  write_ppm(a.out, aug);
  json draws = json::array();
  for (const auto& d : trace) {
    draws.push_back({{"space", to_string(d.space)}, {"delta_mean", d.delta_mean}, {"std_ratio", d.std_ratio}});
  }
  json config = ssl_config_to_json(SslConfig{})["stain"];
  config["space"] = to_string(stain.space);
  config["lab"] = {{"mean", stain.lab.mean}, {"std_ratio", stain.lab.std_ratio}};
  config["hsv"] = {{"mean", stain.hsv.mean}, {"std_ratio", stain.hsv.std_ratio}};
  config["seed"] = g.seed;
  json rec = {{"command", "augment"}, {"config", config}, {"config_fingerprint", config_fingerprint(config)},
              {"draws", draws}};
  write_text(a.out + ".run.json", rec.dump(2) + "\n");
  out << "augmented " << a.input << " -> " << a.out << " (" << draws.size() << " draw(s))\n";
  return kExitOk;
}

// ---------------------------------------------------------------- pretrain / posttrain

struct TrainArgs {
  std::string config, out, data, gram_teacher, init, loss_log;
  int steps = 200;
};

std::vector<Raster> load_corpus(const std::string& dir, int image_size) {
  if (!fs::is_directory(dir)) throw ConfigError("--data '" + dir + "' is not a directory");
  std::vector<Raster> corpus;
  for (const auto& p : list_ppm(dir, true)) corpus.push_back(resample(read_ppm(p), image_size));
  if (corpus.empty()) throw DataError("no .ppm rasters under " + dir);
  return corpus;
}

int cmd_train(const TrainArgs& a, Phase phase, const Global& g, std::ostream& out) {
  const std::string name = phase == Phase::PRETRAIN ? "pretrain" : "posttrain";
  if (phase == Phase::POSTTRAIN && a.gram_teacher.empty()) {
    throw ConfigError("posttrain requires --gram-teacher CKPT");
  }
  if (a.steps < 0) throw ConfigError(name + ": --steps must be >= 0");
  SslConfig cfg = a.config.empty() ? SslConfig{} : ssl_config_from_json(read_json_file(a.config));
  if (g.seed_given) cfg.seed = g.seed;
  if (phase == Phase::POSTTRAIN) cfg.gram_teacher_checkpoint = a.gram_teacher;

  SslState state(cfg);
  if (!a.init.empty()) load_ssl_checkpoint(read_checkpoint(a.init), state);
  if (phase == Phase::POSTTRAIN) {
    EncoderParams anchor = encoder_from_checkpoint(read_checkpoint(a.gram_teacher));
    if (!(anchor.config == cfg.encoder)) throw ConfigError("gram teacher encoder config differs from the run config");
    state.gram_teacher = std::move(anchor);
  }
  const std::vector<Raster> corpus =
      a.data.empty() ? bundled_corpus(cfg.seed, 64, cfg.encoder.image_size) : load_corpus(a.data, cfg.encoder.image_size);

  std::ostringstream log;
  LossBreakdown last;
  run_training(state, corpus, a.steps, phase, [&](int step, const LossBreakdown& l) {
    log << loss_to_json(step, l).dump() << '\n';
    last = l;
  });

  const json config = {{"command", name},
                       {"ssl", ssl_config_to_json(cfg)},
                       {"steps", a.steps},
                       {"data", a.data.empty() ? std::string("bundled") : a.data},
                       {"init", a.init},
                       {"gram_teacher", a.gram_teacher}};
  CheckpointFile ck = ssl_checkpoint(state);
  ck.meta["config_fingerprint"] = config_fingerprint(config);
  write_checkpoint(a.out, ck);
  write_text(a.loss_log.empty() ? a.out + ".loss.jsonl" : a.loss_log, log.str());
  write_run_record(a.out, name, config);
  out << name << ": " << a.steps << " steps on " << corpus.size() << " images";
  if (a.steps > 0) out << ", final total loss " << std::setprecision(6) << last.total;
  out << " -> " << a.out << '\n';
  return kExitOk;
}

// ---------------------------------------------------------------- datasets for embed / probe / bench

DatasetSplits load_task(const std::string& data, const std::string& suite, int per_class, const EncoderConfig& enc,
                        std::uint64_t seed, std::string& task_name, std::ostream& err) {
  if (!suite.empty()) {
    SuiteSpec spec;
    spec.kind = suite_kind_from_string(suite);
    spec.per_class = per_class;
    spec.image_size = enc.image_size;
    spec.tile_size = enc.token_size;
    RngStream rng(seed, 0x5017e000ull + static_cast<std::uint64_t>(spec.kind));
    task_name = suite;
    return make_synthetic_suite(rng, spec);
  }
  IngestResult ing = ingest_directory(data);
  for (const auto& w : ing.warnings) err << "warning: " << w << '\n';
  if (!ing.errors.empty()) {
    for (const auto& e : ing.errors) err << "unreadable: " << e << '\n';
    throw DataError(std::to_string(ing.errors.size()) + " unreadable file(s) under " + data);
  }
  if (ing.dataset.num_classes() < 2) throw ConfigError("need at least 2 classes, found " +
                                                       std::to_string(ing.dataset.num_classes()) + " under " + data);
  task_name = fs::path(data).filename().string();
  return split_dataset(ing.dataset, seed);
}

HeadTrainConfig resolve_head(const std::string& file, int epochs, double lr, std::uint64_t seed) {
  json j = head_config_to_json(default_ablation_config().head);
  if (!file.empty()) j.update(read_json_file(file));
  HeadTrainConfig h = head_config_from_json(j);
  if (epochs > 0) h.epochs = epochs;
  if (lr > 0) h.lr = lr;
  h.seed = seed;
  h.validate();
  return h;
}

void require_two_classes(const DatasetSplits& s) {
  std::set<int> seen;
  for (const auto& it : s.train.items) seen.insert(it.label);
  if (seen.size() < 2) throw ConfigError("single-class training data; a classifier needs at least 2 classes");
}

// ---------------------------------------------------------------- embed

struct EmbedArgs {
  std::string ckpt, data, out;
};

int cmd_embed(const EmbedArgs& a, std::ostream& out, std::ostream& err) {
  const EncoderParams enc = encoder_from_checkpoint(read_checkpoint(a.ckpt));
  IngestResult ing = ingest_directory(a.data);
  for (const auto& w : ing.warnings) err << "warning: " << w << '\n';
  if (!ing.errors.empty()) {
    for (const auto& e : ing.errors) err << "unreadable: " << e << '\n';
    return kExitData;
  }
  const auto tokens = embed_dataset(ing.dataset, enc);
  const int n = enc.config.num_patches(), d = enc.config.embed_dim;
  CheckpointFile ck;
  ck.kind = "embeddings";
  json items = json::array();
  Mat cls(static_cast<Eigen::Index>(tokens.size()), d);
  Mat patches(static_cast<Eigen::Index>(tokens.size()) * n, d);
  for (std::size_t i = 0; i < tokens.size(); ++i) {
    cls.row(static_cast<Eigen::Index>(i)) = tokens[i].seq.cls;
    patches.middleRows(static_cast<Eigen::Index>(i) * n, n) = tokens[i].seq.patches;
    items.push_back({{"source_id", ing.dataset.items[i].source_id}, {"label", ing.dataset.items[i].label}});
  }
  const json config = {{"checkpoint", a.ckpt}, {"data", a.data}, {"encoder", encoder_config_to_json(enc.config)}};
  ck.meta = {{"class_names", ing.dataset.class_names},
             {"items", items},
             {"num_patches", n},
             {"config_fingerprint", config_fingerprint(config)}};
  ck.names = {"cls", "patches"};
  ck.tensors = {cls, patches};
  write_checkpoint(a.out, ck);
  write_run_record(a.out, "embed", config);
  out << "embedded " << tokens.size() << " items (" << ing.dataset.num_classes() << " classes) -> " << a.out << '\n';
  return kExitOk;
}

// ---------------------------------------------------------------- probe / bench

struct ProbeArgs {
  std::string ckpt, data, suite, mode = "linear", report, head_config, head_out;
  int per_class = 50;
  int epochs = 0;
  double lr = 0.0;
};

void write_report(const fs::path& path, const json& report) {
  const auto errors = validate_json(report, bench_report_schema());
  if (!errors.empty()) {
    std::string msg = "report failed schema validation:";
    for (const auto& e : errors) msg += "\n  " + e;
    throw NumericError(msg);
  }
  write_text(path, report.dump(2) + "\n");
  write_text(with_extension(path, ".svg"), render_svg(report));
}

int cmd_probe(const ProbeArgs& a, const Global& g, std::ostream& out, std::ostream& err) {
  if (a.data.empty() == a.suite.empty()) throw ConfigError("probe: give exactly one of --data or --suite");
  const EncoderParams enc = encoder_from_checkpoint(read_checkpoint(a.ckpt));
  std::string task;
  const DatasetSplits splits = load_task(a.data, a.suite, a.per_class, enc.config, g.seed, task, err);
  require_two_classes(splits);
  const HeadTrainConfig head = resolve_head(a.head_config, a.epochs, a.lr, g.seed);
  const HeadMode mode = head_mode_from_string(a.mode);

  const auto train = embed_dataset(splits.train, enc);
  const auto val = embed_dataset(splits.val, enc);
  const auto test = embed_dataset(splits.test, enc);
  const ProbeOutcome o = run_probe(train, val, test, splits.train.num_classes(), mode, head);

  const json config = {{"command", "probe"},
                       {"checkpoint", a.ckpt},
                       {"data", a.data},
                       {"suite", a.suite},
                       {"per_class", a.per_class},
                       {"mode", a.mode},
                       {"head", head_config_to_json(head)},
                       {"encoder", encoder_config_to_json(enc.config)}};
  write_report(a.report, probe_report(task, splits, o, g.seed, config));
  if (!a.head_out.empty()) write_checkpoint(a.head_out, head_checkpoint(o.head));
  out << "probe " << task << " mode=" << a.mode << " bacc=" << std::fixed << std::setprecision(4) << o.test.bacc
      << " (val " << o.best_val_bacc << ", epoch " << o.best_epoch << ") -> " << a.report << '\n';
  return kExitOk;
}

struct BenchArgs {
  std::string ckpt, report, head_config;
  std::vector<std::string> data, suites;
  int per_class = 50;
  int epochs = 0;
  double lr = 0.0;
};

int cmd_bench(const BenchArgs& a, const Global& g, std::ostream& out, std::ostream& err) {
  if (a.data.empty() && a.suites.empty()) throw ConfigError("bench: give --data and/or --suite");
  const EncoderParams enc = encoder_from_checkpoint(read_checkpoint(a.ckpt));
  const HeadTrainConfig head = resolve_head(a.head_config, a.epochs, a.lr, g.seed);
  const json config = {{"command", "bench"},
                       {"checkpoint", a.ckpt},
                       {"data", a.data},
                       {"suites", a.suites},
                       {"per_class", a.per_class},
                       {"head", head_config_to_json(head)},
                       {"encoder", encoder_config_to_json(enc.config)}};
  json report;
  json tasks = json::array();
  auto run_task = [&](const std::string& data, const std::string& suite) {
    std::string task;
    const DatasetSplits splits = load_task(data, suite, a.per_class, enc.config, g.seed, task, err);
    require_two_classes(splits);
    const auto train = embed_dataset(splits.train, enc);
    const auto val = embed_dataset(splits.val, enc);
    const auto test = embed_dataset(splits.test, enc);
    json merged;
    for (HeadMode mode : {HeadMode::LINEAR, HeadMode::ATTNPOOL}) {
      const ProbeOutcome o = run_probe(train, val, test, splits.train.num_classes(), mode, head);
      json r = probe_report(task, splits, o, g.seed, config);
      if (merged.is_null()) {
        merged = r;
      } else {
        merged["tasks"][0]["runs"][0]["rows"].push_back(r["tasks"][0]["runs"][0]["rows"][0]);
        merged["tasks"][0]["row_means"].push_back({{"row", 2}, {"bacc", o.test.bacc}});
      }
      out << "bench " << task << " mode=" << to_string(mode) << " bacc=" << std::fixed << std::setprecision(4)
          << o.test.bacc << '\n';
    }
    if (report.is_null()) report = merged;
    tasks.push_back(merged["tasks"][0]);
  };
  for (const auto& s : a.suites) run_task("", s);
  for (const auto& d : a.data) run_task(d, "");
  report["kind"] = "bench";
  report["tasks"] = tasks;
  write_report(a.report, report);
  return kExitOk;
}

// ---------------------------------------------------------------- ablate

struct AblateArgs {
  std::string config, out;
  bool require_ordering = false;
};

int cmd_ablate(const AblateArgs& a, const Global& g, std::ostream& out, std::ostream& err) {
  AblationConfig cfg = a.config.empty() ? default_ablation_config() : ablation_config_from_json(read_json_file(a.config));
  if (g.seed_given) cfg.seeds = {g.seed};
  const json report = run_ablation(cfg, g.quiet ? nullptr : &err);
  write_report(a.out, report);

  out << report["notice"].get<std::string>() << '\n';
  const auto& rows = report["ablation_rows"];
  for (std::size_t i = 0; i < rows.size(); ++i) {
    const auto& r = rows[i];
    out << "row " << r["row"].get<int>() << "  " << std::left << std::setw(16)
        << (std::string(r["staining_aug"].get<bool>() ? "aug" : "no aug") + " + " + r["head_mode"].get<std::string>())
        << std::right << " BACC " << std::fixed << std::setprecision(1) << r["bacc"].get<double>() * 100.0;
    if (i > 0) out << ' ' << report["deltas"][i - 1]["text"].get<std::string>();
    out << "   [reference " << r["reference_bacc"].get<double>() << ", not reproducible]\n";
  }
  bool ok = true;
  for (const auto& o : report["ordering"]) {
    out << "ordering " << o["task"].get<std::string>() << ": row " << o["to_row"].get<int>() << " vs row "
        << o["from_row"].get<int>() << ' ' << o["text"].get<std::string>() << (o["passed"].get<bool>() ? " ok" : " FAILED")
        << '\n';
    ok = ok && o["passed"].get<bool>();
  }
  out << "report -> " << a.out << '\n';
  return a.require_ordering && !ok ? kExitVerifyFailed : kExitOk;
}

// ---------------------------------------------------------------- gradcheck

struct GradcheckArgs {
  double tolerance = 1e-4;
  std::string fault;
};

int cmd_gradcheck(const GradcheckArgs& a, std::ostream& out) {
  GradcheckOptions opt;
  opt.tolerance = a.tolerance;
  opt.fault_component = a.fault;
  const auto results = run_gradcheck(opt);
  if (!a.fault.empty() && std::none_of(results.begin(), results.end(),
                                       [&](const GradcheckResult& r) { return r.component == a.fault; })) {
    throw ConfigError("gradcheck: unknown component '" + a.fault + "' for --fault");
  }
  bool ok = true;
  for (const auto& r : results) {
    out << std::left << std::setw(26) << r.component << std::right << std::scientific << std::setprecision(3)
        << r.worst_rel_error << "  " << (r.passed ? "ok  " : "FAIL") << "  " << r.worst_tensor << '\n';
    ok = ok && r.passed;
  }
  out << (ok ? "gradcheck passed" : "gradcheck FAILED") << '\n';
  return ok ? kExitOk : kExitVerifyFailed;
}

// ---------------------------------------------------------------- synth

struct SynthArgs {
  std::string kind = "LOCAL", out, split = "all";
  int per_class = 50, image_size = 64, tile_size = 16, num_classes = 2;
};

int cmd_synth(const SynthArgs& a, const Global& g, std::ostream& out) {
  SuiteSpec spec;
  spec.kind = suite_kind_from_string(a.kind);
  spec.per_class = a.per_class;
  spec.image_size = a.image_size;
  spec.tile_size = a.tile_size;
  spec.num_classes = a.num_classes;
  RngStream rng(g.seed, 0x5017e000ull + static_cast<std::uint64_t>(spec.kind));
  const DatasetSplits s = make_synthetic_suite(rng, spec);
  std::size_t n = 0;
  for (const auto* part : {&s.train, &s.val, &s.test}) {
    if (a.split != "all" && a.split != to_string(part->split)) continue;
    write_dataset(*part, a.out);
    n += part->items.size();
  }
  json config = suite_spec_to_json(spec);
  config["seed"] = g.seed;
  config["split"] = a.split;
  write_run_record(fs::path(a.out) / "suite", "synth", config);
  out << "wrote " << n << " images (" << a.kind << ", " << a.split << ") -> " << a.out << '\n';
  return kExitOk;
}

// ---------------------------------------------------------------- demo

int cmd_demo(const std::string& dir, const Global& g, std::ostream& out, std::ostream& err) {
  const fs::path root = dir;
  fs::create_directories(root);
  const std::string seed = std::to_string(g.seed);
  const std::string threads = std::to_string(thread_count());
  auto step = [&](std::vector<std::string> args) {
    std::vector<std::string> full = {"tokenhier", "--threads", threads, "--seed", seed};
    if (g.quiet) full.emplace_back("--quiet");
    full.insert(full.end(), args.begin(), args.end());
    std::vector<const char*> argv;
    for (const auto& s : full) argv.push_back(s.c_str());
    out << "$";
    for (std::size_t i = 1; i < full.size(); ++i) out << ' ' << full[i];
    out << '\n';
    const int code = run_cli(static_cast<int>(argv.size()), argv.data(), out, err);
    if (code != kExitOk) throw Error("demo step failed with exit code " + std::to_string(code));
  };

  // A mock slide: bundled tiles on white glass.
  const auto tiles = bundled_corpus(g.seed, 16, 64);
  Raster slide(512, 512, 255);
  for (std::size_t i = 0; i < tiles.size(); ++i) {
    const int ox = 64 + static_cast<int>(i % 4) * 64, oy = 64 + static_cast<int>(i / 4) * 64;
    for (int y = 0; y < 64; ++y) {
      for (int x = 0; x < 64; ++x) {
        for (int c = 0; c < 3; ++c) slide.at(ox + x, oy + y, c) = tiles[i].at(x, y, c);
      }
    }
  }
  fs::create_directories(root / "slides");
  write_ppm(root / "slides" / "mock_slide.ppm", slide);

  AblationConfig abl = default_ablation_config();
  abl.seeds = {g.seed};
  json ssl = ssl_config_to_json(abl.ssl);
  write_text(root / "ssl_config.json", ssl.dump(2) + "\n");
  json abl_json = ablation_config_to_json(abl);
  write_text(root / "ablation_config.json", abl_json.dump(2) + "\n");

  step({"tile", "--input", (root / "slides").string(), "--out", (root / "tiles.jsonl").string(), "--tile-size", "64",
        "--min-tissue", "0.5"});
  step({"augment", "--input", (root / "slides" / "mock_slide.ppm").string(), "--out",
        (root / "mock_slide_aug.ppm").string()});
  step({"synth", "--kind", "LOCAL", "--out", (root / "data" / "local").string()});
  step({"pretrain", "--config", (root / "ssl_config.json").string(), "--steps", "200", "--out",
        (root / "pretrain.ckpt").string()});
  step({"posttrain", "--config", (root / "ssl_config.json").string(), "--steps", "50", "--init",
        (root / "pretrain.ckpt").string(), "--gram-teacher", (root / "pretrain.ckpt").string(), "--out",
        (root / "posttrain.ckpt").string()});
  step({"embed", "--ckpt", (root / "posttrain.ckpt").string(), "--data", (root / "data" / "local").string(), "--out",
        (root / "local.emb").string()});
  step({"bench", "--ckpt", (root / "posttrain.ckpt").string(), "--data", (root / "data" / "local").string(),
        "--report", (root / "bench_local.json").string()});
  step({"ablate", "--config", (root / "ablation_config.json").string(), "--out",
        (root / "ablation.json").string()});
  out << "demo outputs under " << root.string() << '\n';
  return kExitOk;
}

int resolve_threads(int flag) {
  if (flag > 0) return flag;
  if (const char* env = std::getenv("TOKENHIER_THREADS")) {
    try {
      const int n = std::stoi(env);
      if (n > 0) return n;
    } catch (const std::exception&) {
    }
    throw ConfigError(std::string("TOKENHIER_THREADS must be a positive integer, got '") + env + "'");
  }
  return 1;
}

}  // namespace

int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  CLI::App app{"tokenhier: ViT token-hierarchy pipeline (tiling, SSL pretraining, probing, benchmarking)"};
  app.require_subcommand(1);
  Global g;
  app.add_option("--threads", g.threads, "Worker threads (default: TOKENHIER_THREADS or 1)")->check(CLI::PositiveNumber);
  auto* seed_opt = app.add_option("--seed", g.seed, "Random seed");
  app.add_flag("--quiet", g.quiet, "Suppress progress output");

  TileArgs tile;
  auto* c_tile = app.add_subcommand("tile", "Otsu tissue tiling of .ppm rasters into a JSON-lines manifest");
  c_tile->add_option("--input", tile.input, "Raster file or directory of .ppm files")->required();
  c_tile->add_option("--out", tile.out, "Manifest path")->required();
  c_tile->add_option("--tile-size", tile.tile_size, "Tile side in pixels")->capture_default_str();
  c_tile->add_option("--min-tissue", tile.min_tissue, "Minimum tissue fraction")->capture_default_str();
  c_tile->add_flag("--invert", tile.invert, "Treat bright pixels as tissue");
  c_tile->add_option("--label", tile.label, "Label stored on every record");

  AugmentArgs aug;
  auto* c_aug = app.add_subcommand("augment", "Stain-jitter one raster");
  c_aug->add_option("--input", aug.input)->required();
  c_aug->add_option("--out", aug.out)->required();
  c_aug->add_option("--space", aug.space)->check(CLI::IsMember({"lab", "hsv", "both", "random"}))->capture_default_str();
  c_aug->add_option("--config", aug.config, "JSON with lab/hsv jitter sigmas");

  TrainArgs pre, post;
  auto* c_pre = app.add_subcommand("pretrain", "Self-supervised pretraining (dino + ibot + koleo)");
  auto* c_post = app.add_subcommand("posttrain", "Post-training with Gram anchoring");
  for (auto [cmd, args] : {std::pair{c_pre, &pre}, std::pair{c_post, &post}}) {
    cmd->add_option("--config", args->config, "SSL config JSON");
    cmd->add_option("--steps", args->steps, "Optimizer steps")->capture_default_str();
    cmd->add_option("--out", args->out, "Checkpoint path")->required();
    cmd->add_option("--data", args->data, "Directory of .ppm images (default: bundled synthetic corpus)");
    cmd->add_option("--init", args->init, "Resume from an ssl checkpoint");
    cmd->add_option("--loss-log", args->loss_log, "JSON-lines loss log (default: OUT.loss.jsonl)");
  }
  c_post->add_option("--gram-teacher", post.gram_teacher, "Checkpoint providing the Gram anchor");

  EmbedArgs emb;
  auto* c_emb = app.add_subcommand("embed", "Frozen-encoder token embeddings of a class-directory dataset");
  c_emb->add_option("--ckpt", emb.ckpt)->required();
  c_emb->add_option("--data", emb.data)->required();
  c_emb->add_option("--out", emb.out)->required();

  ProbeArgs probe;
  auto* c_probe = app.add_subcommand("probe", "Train one head on frozen embeddings and report BACC");
  c_probe->add_option("--ckpt", probe.ckpt)->required();
  c_probe->add_option("--data", probe.data, "root/<class>/*.ppm");
  c_probe->add_option("--suite", probe.suite, "Synthetic suite instead of --data")
      ->check(CLI::IsMember({"GLOBAL", "LOCAL", "SHIFTED"}));
  c_probe->add_option("--per-class", probe.per_class)->capture_default_str();
  c_probe->add_option("--mode", probe.mode)->check(CLI::IsMember({"linear", "attnpool"}))->capture_default_str();
  c_probe->add_option("--report", probe.report)->required();
  c_probe->add_option("--head-config", probe.head_config, "Head training JSON");
  c_probe->add_option("--epochs", probe.epochs);
  c_probe->add_option("--lr", probe.lr);
  c_probe->add_option("--head-out", probe.head_out, "Write the trained head checkpoint");

  BenchArgs bench;
  auto* c_bench = app.add_subcommand("bench", "Both heads on one or more datasets");
  c_bench->add_option("--ckpt", bench.ckpt)->required();
  c_bench->add_option("--data", bench.data, "root/<class>/*.ppm (repeatable)");
  c_bench->add_option("--suite", bench.suites, "Synthetic suite (repeatable)")
      ->check(CLI::IsMember({"GLOBAL", "LOCAL", "SHIFTED"}));
  c_bench->add_option("--per-class", bench.per_class)->capture_default_str();
  c_bench->add_option("--report", bench.report)->required();
  c_bench->add_option("--head-config", bench.head_config);
  c_bench->add_option("--epochs", bench.epochs);
  c_bench->add_option("--lr", bench.lr);

  AblateArgs ablate;
  auto* c_ablate = app.add_subcommand("ablate", "Three-row ablation grid (stain aug x head mode)");
  c_ablate->add_option("--config", ablate.config, "Ablation config JSON (default: desk-scale config)");
  c_ablate->add_option("--out", ablate.out, "Report path (an .svg is written next to it)")->required();
  c_ablate->add_flag("--require-ordering", ablate.require_ordering, "Exit 1 when an ordering check fails");

  GradcheckArgs gc;
  auto* c_gc = app.add_subcommand("gradcheck", "Finite-difference checks of every analytic gradient");
  c_gc->add_option("--tolerance", gc.tolerance)->capture_default_str();
  c_gc->add_option("--fault", gc.fault)->group("");

  SynthArgs synth;
  auto* c_synth = app.add_subcommand("synth", "Write a synthetic suite as root/<class>/*.ppm");
  c_synth->add_option("--kind", synth.kind)->check(CLI::IsMember({"GLOBAL", "LOCAL", "SHIFTED"}))->capture_default_str();
  c_synth->add_option("--out", synth.out)->required();
  c_synth->add_option("--split", synth.split)->check(CLI::IsMember({"all", "train", "val", "test"}))->capture_default_str();
  c_synth->add_option("--per-class", synth.per_class)->capture_default_str();
  c_synth->add_option("--classes", synth.num_classes)->capture_default_str();
  c_synth->add_option("--image-size", synth.image_size)->capture_default_str();
  c_synth->add_option("--tile-size", synth.tile_size)->capture_default_str();

  std::string demo_dir = "demo_out";
  auto* c_demo = app.add_subcommand("demo", "Run the whole pipeline end to end on synthetic data");
  c_demo->add_option("--out", demo_dir)->capture_default_str();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e, out, err) == 0 ? kExitOk : kExitUsage;
  }

  try {
    g.seed_given = seed_opt->count() > 0;
    set_thread_count(resolve_threads(g.threads));
    if (c_tile->parsed()) return cmd_tile(tile, out, err);
    if (c_aug->parsed()) return cmd_augment(aug, g, out);
    if (c_pre->parsed()) return cmd_train(pre, Phase::PRETRAIN, g, out);
    if (c_post->parsed()) return cmd_train(post, Phase::POSTTRAIN, g, out);
    if (c_emb->parsed()) return cmd_embed(emb, out, err);
    if (c_probe->parsed()) return cmd_probe(probe, g, out, err);
    if (c_bench->parsed()) return cmd_bench(bench, g, out, err);
    if (c_ablate->parsed()) return cmd_ablate(ablate, g, out, err);
    if (c_gc->parsed()) return cmd_gradcheck(gc, out);
    if (c_synth->parsed()) return cmd_synth(synth, g, out);
    if (c_demo->parsed()) return cmd_demo(demo_dir, g, out, err);
  } catch (const ConfigError& e) {
    err << "error: " << e.what() << '\n';
    return kExitUsage;
  } catch (const ParameterError& e) {
    err << "error: " << e.what() << '\n';
    return kExitUsage;
  } catch (const ShapeError& e) {
    err << "error: " << e.what() << '\n';
    return kExitUsage;
  } catch (const NumericError& e) {
    err << "error: " << e.what() << '\n';
    return kExitVerifyFailed;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return kExitData;
  }
  return kExitUsage;
}

}  // namespace tokenhier
