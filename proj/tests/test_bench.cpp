#include <doctest.h>

#include <fstream>
#include <set>

#include "support.hpp"
#include "tokenhier/bench.hpp"
#include "tokenhier/json_schema.hpp"

using namespace tokenhier;

namespace {

std::array<double, 3> mean_rgb(const Raster& r) {
  std::array<double, 3> m{};
  for (std::size_t i = 0; i < r.pixels.size(); ++i) m[i % 3] += r.pixels[i];
  for (double& v : m) v /= static_cast<double>(r.pixels.size() / 3);
  return m;
}

// Nearest class centroid of the mean image color, fitted on TRAIN, scored on TEST.
double mean_color_centroid_bacc(const DatasetSplits& s) {
  const int c = s.train.num_classes();
  std::vector<std::array<double, 3>> centroid(static_cast<std::size_t>(c), {0, 0, 0});
  std::vector<int> count(static_cast<std::size_t>(c), 0);
  for (const auto& item : s.train.items) {
    const auto m = mean_rgb(load_raster(item));
    for (int k = 0; k < 3; ++k) centroid[item.label][k] += m[k];
    ++count[item.label];
  }
  for (int j = 0; j < c; ++j) {
    for (double& v : centroid[j]) v /= count[j];
  }
  std::vector<int> pred;
  for (const auto& item : s.test.items) {
    const auto m = mean_rgb(load_raster(item));
    int best = 0;
    double best_d = 1e300;
    for (int j = 0; j < c; ++j) {
      double d = 0;
      for (int k = 0; k < 3; ++k) d += (m[k] - centroid[j][k]) * (m[k] - centroid[j][k]);
      if (d < best_d) {
        best_d = d;
        best = j;
      }
    }
    pred.push_back(best);
  }
  return balanced_accuracy(s.test.labels(), pred, c).bacc;
}

EncoderConfig tiny_encoder() {
  EncoderConfig c;
  c.image_size = 32;
  c.token_size = 16;
  c.embed_dim = 16;
  c.depth = 1;
  c.num_heads = 2;
  return c;
}

}  // namespace

TEST_CASE("global suite is separable by mean color") {
  RngStream rng(1, 0);
  SuiteSpec spec;
  spec.kind = SuiteKind::GLOBAL;
  spec.num_classes = 3;
  spec.per_class = 40;
  CHECK(mean_color_centroid_bacc(make_synthetic_suite(rng, spec)) >= 0.95);
}

TEST_CASE("local suite hides the label from mean color") {
  RngStream rng(2, 0);
  SuiteSpec spec;
  spec.kind = SuiteKind::LOCAL;
  spec.per_class = 250;
  const double bacc = mean_color_centroid_bacc(make_synthetic_suite(rng, spec));
  CHECK(bacc >= 0.4);
  CHECK(bacc <= 0.6);
}

TEST_CASE("shifted suite moves only the test split") {
  RngStream rng(3, 0);
  SuiteSpec spec;
  spec.kind = SuiteKind::SHIFTED;
  spec.per_class = 60;
  spec.test_jitter_lab = {0.0, 0.0, 0.0};
  const DatasetSplits s = make_synthetic_suite(rng, spec);
  auto mean_l = [](const LabeledDataset& ds, int label) {
    double sum = 0;
    int n = 0;
    for (const auto& item : ds.items) {
      if (item.label != label) continue;
      const auto lab = rgb_to_lab(load_raster(item));
      sum += lab.px.col(0).mean();
      ++n;
    }
    return sum / n;
  };
  for (int c = 0; c < 2; ++c) {
    const double train = mean_l(s.train, c), val = mean_l(s.val, c), test = mean_l(s.test, c);
    CHECK(std::abs(train - val) < 0.6);
    CHECK(test - train == doctest::Approx(spec.test_shift_lab[0]).epsilon(0.3));
  }
  // More nuclei in the higher class makes it darker.
  CHECK(mean_l(s.train, 1) < mean_l(s.train, 0) - 2.0);
}

TEST_CASE("suites are deterministic and stratified") {
  SuiteSpec spec;
  spec.num_classes = 3;
  spec.per_class = 25;
  RngStream a(9, 1), b(9, 1), c(10, 1);
  const DatasetSplits sa = make_synthetic_suite(a, spec), sb = make_synthetic_suite(b, spec);
  const DatasetSplits sc = make_synthetic_suite(c, spec);
  CHECK(sa.hash() == sb.hash());
  CHECK(load_raster(sa.test.items[3]) == load_raster(sb.test.items[3]));
  CHECK(load_raster(sa.train.items[0]) != load_raster(sc.train.items[0]));

  std::set<std::string> ids;
  for (const auto* part : {&sa.train, &sa.val, &sa.test}) {
    for (int k = 0; k < 3; ++k) {
      const auto labels = part->labels();
      const auto n = std::count(labels.begin(), labels.end(), k);
      CHECK(n == (part == &sa.train ? 15 : 5));
    }
    for (const auto& item : part->items) ids.insert(item.source_id);
  }
  CHECK(ids.size() == 75);
  CHECK(sa.train.split == Split::TRAIN);
  CHECK(sa.test.split == Split::TEST);
}

TEST_CASE("suite spec validation and serialization") {
  SuiteSpec s;
  s.kind = SuiteKind::SHIFTED;
  s.test_shift_lab = {1.0, 2.0, 3.0};
  const auto j = suite_spec_to_json(s);
  CHECK(suite_spec_to_json(suite_spec_from_json(j)) == j);
  auto bad = j;
  bad["colour"] = 1;
  CHECK_THROWS_AS(suite_spec_from_json(bad), ConfigError);
  SuiteSpec t;
  t.num_classes = 1;
  CHECK_THROWS_AS(t.validate(), ParameterError);
  t = SuiteSpec{};
  t.test_jitter_lab[1] = -1.0;
  CHECK_THROWS_AS(t.validate(), ParameterError);
  t = SuiteSpec{};
  t.image_size = 50;
  CHECK_THROWS_AS(t.validate(), ParameterError);
  CHECK(suite_kind_from_string("LOCAL") == SuiteKind::LOCAL);
  CHECK_THROWS(suite_kind_from_string("regional"));
}

TEST_CASE("directory ingestion") {
  testing::TempDir dir("ingest");
  LabeledDataset ds;
  ds.name = "toy";
  ds.class_names = {"alpha", "beta"};
  RngStream rng(4, 0);
  for (int i = 0; i < 6; ++i) {
    LabeledItem item;
    item.source_id = "img" + std::to_string(i);
    item.raster = testing::random_raster(8, 8, rng);
    item.label = i % 2;
    ds.items.push_back(item);
  }
  write_dataset(ds, dir.path());
  std::filesystem::create_directories(dir / "gamma");

  IngestResult res = ingest_directory(dir.path());
  CHECK(res.dataset.num_classes() == 2);
  CHECK(res.dataset.items.size() == 6);
  REQUIRE(res.warnings.size() == 1);
  CHECK(res.warnings[0].find("gamma") != std::string::npos);
  CHECK(res.errors.empty());
  CHECK(load_raster(res.dataset.items[0]) == *ds.items[0].raster);

  std::ofstream(dir / "alpha" / "broken.ppm") << "P6\n8 8\n255\nshort";
  std::ofstream(dir / "beta" / "scan.png") << "x";
  std::ofstream(dir / "beta" / "notes.txt") << "ignored";
  res = ingest_directory(dir.path());
  CHECK(res.files_seen == 8);
  REQUIRE(res.errors.size() == 1);
  CHECK(res.errors[0].find("broken.ppm") != std::string::npos);
  CHECK(res.dataset.items.size() == 7);
  const auto png = std::find_if(res.dataset.items.begin(), res.dataset.items.end(),
                                [](const LabeledItem& i) { return i.source_id == "beta/scan"; });
  REQUIRE(png != res.dataset.items.end());
  CHECK_THROWS_AS(load_raster(*png), DataError);

  CHECK_THROWS_AS(ingest_directory(dir / "missing"), DataError);
}

TEST_CASE("dataset splitting") {
  LabeledDataset ds;
  ds.class_names = {"a", "b"};
  for (int i = 0; i < 50; ++i) ds.items.push_back({"id" + std::to_string(i), {}, Raster(2, 2), i < 20 ? 0 : 1});
  const DatasetSplits s = split_dataset(ds, 5);
  CHECK(s.train.items.size() == 30);
  CHECK(s.val.items.size() == 10);
  CHECK(s.test.items.size() == 10);
  CHECK(split_dataset(ds, 5).hash() == s.hash());
  CHECK(split_dataset(ds, 6).hash() != s.hash());

  LabeledDataset gap = ds;
  gap.items[3].label = 2;
  CHECK_THROWS_AS(gap.validate(), ParameterError);
}

TEST_CASE("resampling") {
  RngStream rng(6, 0);
  const Raster r = testing::random_raster(32, 32, rng);
  CHECK(resample(r, 32) == r);
  const Raster flat(64, 64, 77);
  CHECK(resample(flat, 16) == Raster(16, 16, 77));
  const Raster half = resample(r, 16);
  const int sum = r.at(0, 0, 1) + r.at(1, 0, 1) + r.at(0, 1, 1) + r.at(1, 1, 1);
  CHECK(std::abs(half.at(0, 0, 1) - sum / 4.0) <= 0.5);
}

TEST_CASE("token level local suite") {
  RngStream rng(7, 0);
  TokenSuiteSpec spec;
  spec.per_class = 100;
  const TokenSplits s = make_local_token_suite(rng, spec);
  CHECK(s.train.size() == 120);
  CHECK(s.val.size() == 40);
  CHECK(s.test.size() == 40);
  for (const auto& item : s.train) {
    REQUIRE(item.seq.patches.rows() == 16);
    REQUIRE(item.seq.cls.size() == 16);
    Eigen::Index marked = 0;
    item.seq.patches.col(0).maxCoeff(&marked);
    const double own = item.seq.patches(marked, 1 + item.label);
    const double other = item.seq.patches(marked, 2 - item.label);
    CHECK(own - other > -3.0);
  }
  double cls_mean = 0;
  for (const auto& item : s.train) cls_mean += item.seq.cls(1) * (item.label == 0 ? 1 : -1);
  CHECK(std::abs(cls_mean / 120.0) < 0.4);
  RngStream again(7, 0);
  CHECK(make_local_token_suite(again, spec).test[5].seq.patches == s.test[5].seq.patches);
  TokenSuiteSpec bad = spec;
  bad.dim = 2;
  CHECK_THROWS(bad.validate());
}

TEST_CASE("delta format and fingerprints") {
  CHECK(format_delta(0.023) == "(2.3↑)");
  CHECK(format_delta(-0.010) == "(1.0↓)");
  CHECK(format_delta(0.0) == "(0.0↑)");
  const nlohmann::json a = {{"x", 1}, {"y", {1, 2}}};
  const nlohmann::json b = {{"y", {1, 2}}, {"x", 1}};
  CHECK(config_fingerprint(a) == config_fingerprint(b));
  CHECK(config_fingerprint(a) != config_fingerprint({{"x", 2}, {"y", {1, 2}}}));

  const AblationConfig cfg = default_ablation_config();
  const auto j = ablation_config_to_json(cfg);
  CHECK(ablation_config_to_json(ablation_config_from_json(j)) == j);
  CHECK_THROWS_AS(ablation_config_from_json({{"seedz", 1}}), ConfigError);
}

TEST_CASE("probe report validates against the schema") {
  RngStream rng(8, 0);
  SuiteSpec spec;
  spec.kind = SuiteKind::GLOBAL;
  spec.per_class = 10;
  spec.image_size = 32;
  const DatasetSplits s = make_synthetic_suite(rng, spec);
  RngStream erng(8, 1);
  const EncoderParams enc = EncoderParams::init(tiny_encoder(), erng);
  const auto train = embed_dataset(s.train, enc), val = embed_dataset(s.val, enc), test = embed_dataset(s.test, enc);
  CHECK(train.size() == s.train.items.size());
  HeadTrainConfig hc;
  hc.epochs = 3;
  const ProbeOutcome out = run_probe(train, val, test, 2, HeadMode::LINEAR, hc);
  const nlohmann::json report = probe_report("global", s, out, 0, head_config_to_json(hc));
  const auto schema = bench_report_schema();
  CHECK(validate_json(report, schema).empty());
  CHECK(render_svg(report).find("<svg") != std::string::npos);

  nlohmann::json broken = report;
  broken["schema_version"] = "one";
  CHECK_FALSE(validate_json(broken, schema).empty());
  broken = report;
  broken.erase("tasks");
  CHECK_FALSE(validate_json(broken, schema).empty());
}

TEST_CASE("schema validator subset") {
  const nlohmann::json schema = nlohmann::json::parse(R"({
    "type": "object", "required": ["a"], "additionalProperties": false,
    "properties": {"a": {"type": "number", "minimum": 0, "maximum": 1},
                   "b": {"type": "array", "items": {"enum": ["x", "y"]}, "minItems": 1}}})");
  CHECK(validate_json({{"a", 0.5}}, schema).empty());
  CHECK(validate_json({{"a", 0.5}, {"b", {"x", "y"}}}, schema).empty());
  CHECK(validate_json({{"a", 1.5}}, schema).size() == 1);
  CHECK(validate_json({{"b", {"x"}}}, schema).size() == 1);
  CHECK(validate_json({{"a", 0}, {"c", 1}}, schema).size() == 1);
  const auto errs = validate_json({{"a", 0}, {"b", {"z"}}}, schema);
  REQUIRE(errs.size() == 1);
  CHECK(errs[0].find("/b/0") != std::string::npos);
}

TEST_CASE("bundled corpus") {
  const auto a = bundled_corpus(3, 12, 32), b = bundled_corpus(3, 12, 32);
  REQUIRE(a.size() == 12);
  CHECK(a[7] == b[7]);
  CHECK(a[0].width == 32);
}
