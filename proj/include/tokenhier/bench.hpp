#pragma once

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "tokenhier/color.hpp"
#include "tokenhier/heads.hpp"
#include "tokenhier/metrics.hpp"
#include "tokenhier/ssl.hpp"

namespace tokenhier {

enum class Split { TRAIN, VAL, TEST };
std::string to_string(Split s);

struct LabeledItem {
  std::string source_id;
  std::filesystem::path path;    // empty for inline rasters
  std::optional<Raster> raster;  // inline pixels
  int label = 0;
};

struct LabeledDataset {
  std::string name;
  std::vector<std::string> class_names;
  std::vector<LabeledItem> items;
  Split split = Split::TRAIN;

  int num_classes() const { return static_cast<int>(class_names.size()); }
  std::vector<int> labels() const;
  /// Digest of the ordered source ids and labels.
  std::string hash() const;
  /// Throws ParameterError unless labels are dense in [0, C).
  void validate() const;
};

struct DatasetSplits {
  LabeledDataset train, val, test;

  /// Digest over the three split hashes; equal digests mean identical splits.
  std::string hash() const;
};

/// Inline raster or the decoded file. Only binary PPM is decodable; other
/// recognised extensions raise DataError here.
Raster load_raster(const LabeledItem& item);

/// Box-filter resample to size x size (identity when already that size).
Raster resample(const Raster& r, int size);

enum class SuiteKind { GLOBAL, LOCAL, SHIFTED };
std::string to_string(SuiteKind k);
SuiteKind suite_kind_from_string(const std::string& s);

struct SuiteSpec {
  SuiteKind kind = SuiteKind::LOCAL;
  int num_classes = 2;
  int per_class = 50;
  int image_size = 64;
  /// Side of the planted LOCAL region; matches the encoder token size.
  int tile_size = 16;
  /// Shift applied to TEST images of SHIFTED suites, in LAB units.
  std::array<double, 3> test_shift_lab{-2.0, 1.6, -1.6};
  /// Per-image LAB std added on top of test_shift_lab, TEST images only.
  std::array<double, 3> test_jitter_lab{3.0, 2.4, 2.4};

  void validate() const;
};

nlohmann::json suite_spec_to_json(const SuiteSpec& s);
SuiteSpec suite_spec_from_json(const nlohmann::json& j);

/// Reproducible rasters and labels, split 60/20/20 per class.
///   GLOBAL: class-dependent overall tint.
///   LOCAL: one randomly placed tile holds a cell cluster whose texture
///     depends on the class and which carries its class tint; every class
///     tint covers the same number of tiles, so whole-image color statistics
///     hold no label.
///   SHIFTED: class-dependent nuclear density; TEST images get a fixed LAB
///     stain shift never present in TRAIN or VAL.
DatasetSplits make_synthetic_suite(RngStream& rng, const SuiteSpec& spec);

/// Deterministic unlabeled mix of all suite kinds used for SSL smoke runs.
std::vector<Raster> bundled_corpus(std::uint64_t seed = 0, int count = 64, int image_size = 64);

struct IngestResult {
  LabeledDataset dataset;
  std::vector<std::string> warnings;
  /// One entry per unreadable file; those files are left out of `dataset`.
  std::vector<std::string> errors;
  std::size_t files_seen = 0;
};

/// root/<class_name>/<file> with classes in sorted name order. Files with
/// .ppm/.tif/.tiff/.png/.jpg/.jpeg extensions are items; PPM headers are
/// checked. Empty class directories are skipped with a warning.
IngestResult ingest_directory(const std::filesystem::path& root);

/// Seeded stratified 60/20/20 split by source id.
DatasetSplits split_dataset(const LabeledDataset& ds, std::uint64_t seed);

/// Writes every item as root/<class>/<source_id>.ppm.
void write_dataset(const LabeledDataset& ds, const std::filesystem::path& root);

/// Frozen-encoder token sequences, one per item, in item order.
std::vector<LabeledTokens> embed_dataset(const LabeledDataset& ds, const EncoderParams& encoder);

struct ProbeOutcome {
  HeadMode mode = HeadMode::LINEAR;
  BaccResult test;
  int best_epoch = 0;
  double best_val_bacc = 0.0;
  TrainedHead head;
};

/// Token-level form of the LOCAL construction: class tokens are pure noise
/// and the label lives in one patch token at a random position, marked by a
/// raised first coordinate and carrying a class code in the next ones.
struct TokenSuiteSpec {
  int num_classes = 2;
  int per_class = 500;
  int num_patches = 16;
  int dim = 16;
  double signal = 4.0;

  void validate() const;
};

struct TokenSplits {
  std::vector<LabeledTokens> train, val, test;
};

TokenSplits make_local_token_suite(RngStream& rng, const TokenSuiteSpec& spec);

ProbeOutcome run_probe(const std::vector<LabeledTokens>& train, const std::vector<LabeledTokens>& val,
                       const std::vector<LabeledTokens>& test, int num_classes, HeadMode mode,
                       const HeadTrainConfig& cfg);

struct AblationConfig {
  std::vector<std::uint64_t> seeds{0, 1, 2, 3, 4};
  std::vector<SuiteKind> suites{SuiteKind::SHIFTED, SuiteKind::LOCAL};
  /// Extra labeled directories, each split per seed.
  std::vector<std::pair<std::string, std::filesystem::path>> directories;
  SuiteSpec suite;
  SslConfig ssl;
  int pretrain_steps = 300;
  HeadTrainConfig head;
  /// When both are set the encoders are loaded instead of trained per seed.
  std::string noaug_checkpoint;
  std::string aug_checkpoint;
  double min_margin = 0.02;

  void validate() const;
};

/// Desk-scale defaults: small encoder, stronger stain jitter than the
/// pretraining defaults so the augmented arm sees shifts of the test size.
AblationConfig default_ablation_config();
nlohmann::json ablation_config_to_json(const AblationConfig& c);
/// Missing fields keep the desk-scale defaults; unknown fields are rejected.
AblationConfig ablation_config_from_json(const nlohmann::json& j);

/// Stable digest of a resolved configuration.
std::string config_fingerprint(const nlohmann::json& config);

/// "(2.3↑)" for +0.023, "(1.0↓)" for -0.010; percentage points, one decimal.
std::string format_delta(double delta);

constexpr int kReportSchemaVersion = 1;

/// Three rows {no-aug + linear, aug + linear, aug + attnpool} per task and
/// seed on identical splits and head seeds. Ordering checks are reported for
/// SHIFTED (row 2 over row 1) and LOCAL (row 3 over row 2).
nlohmann::json run_ablation(const AblationConfig& cfg, std::ostream* log = nullptr);

/// Report of one head on one labeled dataset.
nlohmann::json probe_report(const std::string& task, const DatasetSplits& splits, const ProbeOutcome& outcome,
                            std::uint64_t seed, const nlohmann::json& config);

/// Bar chart of per-row BACC (ablation) or per-task BACC (probe/bench).
std::string render_svg(const nlohmann::json& report);

}  // namespace tokenhier
