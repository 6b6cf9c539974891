#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "tokenhier/color.hpp"

namespace tokenhier {

using GrayHistogram = std::array<std::uint64_t, 256>;

/// Otsu's method: the level t maximizing w0(t) * w1(t) * (mu0(t) - mu1(t))^2
/// where class 0 is levels <= t. Ties go to the smallest t. Throws
/// DegenerateInputError when fewer than two bins are populated.
std::uint8_t otsu_threshold(std::span<const std::uint64_t, 256> histogram);

/// BT.601 luma rounded to the nearest integer.
std::uint8_t luma(std::uint8_t r, std::uint8_t g, std::uint8_t b);
GrayHistogram gray_histogram(const Raster& r);

struct TissueMask {
  int width = 0;
  int height = 0;
  std::uint8_t threshold = 0;
  std::vector<std::uint8_t> tissue;  // 1 = tissue

  bool at(int x, int y) const {
    return tissue[static_cast<std::size_t>(y) * static_cast<std::size_t>(width) + static_cast<std::size_t>(x)] != 0;
  }
  double fraction() const;
};

/// Tissue is gray <= otsu level (stain is darker than the glass), or the
/// complement when `invert` is set. An all-one-level image has no tissue and
/// surfaces DegenerateInputError.
TissueMask tissue_mask(const Raster& r, bool invert = false);

struct TileRecord {
  std::string source_id;
  int x = 0;
  int y = 0;
  int size = 0;
  double tissue_fraction = 0.0;
  std::optional<int> label;

  bool operator==(const TileRecord&) const = default;
};

struct TileManifest {
  std::vector<TileRecord> records;
  int tile_size = 256;
  /// Set when every contributing source used the same level.
  std::optional<int> threshold_used;
  double min_tissue_fraction = 0.5;
  std::map<std::string, int> source_thresholds;

  bool operator==(const TileManifest&) const = default;
};

struct TileOptions {
  int tile_size = 256;
  double min_tissue_fraction = 0.5;
  bool invert = false;
  std::optional<int> label;
};

/// Grid-aligned, non-overlapping tiles; partial edge tiles are dropped.
TileManifest extract_tiles(const Raster& r, const std::string& source_id, const TileOptions& opt);

/// Concatenates per-source manifests and sorts by (source_id, y, x).
/// Throws ParameterError on mismatched tile sizes or duplicate keys.
TileManifest merge_manifests(std::vector<TileManifest> parts, const TileOptions& opt);

// JSON-lines: a header object, then one TileRecord object per line.
std::string manifest_to_jsonl(const TileManifest& m);
TileManifest manifest_from_jsonl(const std::string& text);
void write_manifest(const std::filesystem::path& path, const TileManifest& m);
TileManifest read_manifest(const std::filesystem::path& path);

}  // namespace tokenhier
