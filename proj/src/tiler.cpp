#include "tokenhier/tiler.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <set>
#include <sstream>

#include <json.hpp>

namespace tokenhier {

std::uint8_t otsu_threshold(std::span<const std::uint64_t, 256> histogram) {
  std::uint64_t total = 0, weighted = 0;
  int populated = 0;
  for (int i = 0; i < 256; ++i) {
    total += histogram[i];
    weighted += static_cast<std::uint64_t>(i) * histogram[i];
    populated += histogram[i] > 0;
  }
  if (populated < 2) throw DegenerateInputError("otsu: histogram has fewer than two populated levels");

  // Between-class variance scaled by total^4: (total*s0 - weighted*w0)^2 / (w0*w1).
  std::uint64_t w0 = 0, s0 = 0;
  long double best = -1.0L;
  int best_t = 0;
  for (int t = 0; t < 255; ++t) {
    w0 += histogram[t];
    s0 += static_cast<std::uint64_t>(t) * histogram[t];
    const std::uint64_t w1 = total - w0;
    if (w0 == 0 || w1 == 0) continue;
    const __int128 diff = static_cast<__int128>(total) * s0 - static_cast<__int128>(weighted) * w0;
    const long double d = static_cast<long double>(diff);
    const long double score = d * d / (static_cast<long double>(w0) * static_cast<long double>(w1));
    if (score > best) {
      best = score;
      best_t = t;
    }
  }
  return static_cast<std::uint8_t>(best_t);
}

std::uint8_t luma(std::uint8_t r, std::uint8_t g, std::uint8_t b) {
  return static_cast<std::uint8_t>(std::lround(0.299 * r + 0.587 * g + 0.114 * b));
}

GrayHistogram gray_histogram(const Raster& r) {
  r.validate();
  GrayHistogram h{};
  for (std::size_t i = 0; i < r.pixels.size(); i += 3) {
    ++h[luma(r.pixels[i], r.pixels[i + 1], r.pixels[i + 2])];
  }
  return h;
}

double TissueMask::fraction() const {
  if (tissue.empty()) return 0.0;
  return static_cast<double>(std::count(tissue.begin(), tissue.end(), 1)) / static_cast<double>(tissue.size());
}

TissueMask tissue_mask(const Raster& r, bool invert) {
  const GrayHistogram hist = gray_histogram(r);
  std::uint8_t t;
  try {
    t = otsu_threshold(hist);
  } catch (const DegenerateInputError&) {
    throw DegenerateInputError("no tissue: image has a single gray level");
  }
  TissueMask m;
  m.width = r.width;
  m.height = r.height;
  m.threshold = t;
  m.tissue.resize(static_cast<std::size_t>(r.width) * static_cast<std::size_t>(r.height));
  for (std::size_t i = 0; i < m.tissue.size(); ++i) {
    const bool dark = luma(r.pixels[3 * i], r.pixels[3 * i + 1], r.pixels[3 * i + 2]) <= t;
    m.tissue[i] = dark != invert;
  }
  return m;
}

TileManifest extract_tiles(const Raster& r, const std::string& source_id, const TileOptions& opt) {
  if (opt.tile_size < 16) throw ParameterError("extract_tiles: tile_size must be >= 16");
  if (!(opt.min_tissue_fraction >= 0.0 && opt.min_tissue_fraction <= 1.0)) {
    throw ParameterError("extract_tiles: min_tissue_fraction must be in [0, 1]");
  }
  r.validate();
  TileManifest out;
  out.tile_size = opt.tile_size;
  out.min_tissue_fraction = opt.min_tissue_fraction;
  const int cols = r.width / opt.tile_size;
  const int rows = r.height / opt.tile_size;
  if (cols == 0 || rows == 0) return out;

  const TissueMask mask = tissue_mask(r, opt.invert);
  out.threshold_used = mask.threshold;
  out.source_thresholds[source_id] = mask.threshold;
  const double area = static_cast<double>(opt.tile_size) * opt.tile_size;
  for (int ty = 0; ty < rows; ++ty) {
    for (int tx = 0; tx < cols; ++tx) {
      const int x0 = tx * opt.tile_size, y0 = ty * opt.tile_size;
      std::size_t count = 0;
      for (int y = y0; y < y0 + opt.tile_size; ++y) {
        for (int x = x0; x < x0 + opt.tile_size; ++x) count += mask.at(x, y);
      }
      const double frac = static_cast<double>(count) / area;
      if (frac >= opt.min_tissue_fraction) {
        out.records.push_back({source_id, x0, y0, opt.tile_size, frac, opt.label});
      }
    }
  }
  return out;
}

TileManifest merge_manifests(std::vector<TileManifest> parts, const TileOptions& opt) {
  TileManifest out;
  out.tile_size = opt.tile_size;
  out.min_tissue_fraction = opt.min_tissue_fraction;
  std::set<int> levels;
  for (auto& p : parts) {
    if (p.tile_size != opt.tile_size) throw ParameterError("merge_manifests: tile size mismatch");
    for (auto& [src, t] : p.source_thresholds) {
      out.source_thresholds[src] = t;
      levels.insert(t);
    }
    std::move(p.records.begin(), p.records.end(), std::back_inserter(out.records));
  }
  if (levels.size() == 1) out.threshold_used = *levels.begin();
  std::sort(out.records.begin(), out.records.end(), [](const TileRecord& a, const TileRecord& b) {
    return std::tie(a.source_id, a.y, a.x) < std::tie(b.source_id, b.y, b.x);
  });
  for (std::size_t i = 1; i < out.records.size(); ++i) {
    const auto& a = out.records[i - 1];
    const auto& b = out.records[i];
    if (a.source_id == b.source_id && a.x == b.x && a.y == b.y) {
      throw ParameterError("merge_manifests: duplicate tile " + a.source_id + " @ " +
                           std::to_string(a.x) + "," + std::to_string(a.y));
    }
  }
  return out;
}

std::string manifest_to_jsonl(const TileManifest& m) {
  using nlohmann::json;
  json header = {{"tile_size", m.tile_size},
                 {"threshold_used", m.threshold_used ? json(*m.threshold_used) : json(nullptr)},
                 {"min_tissue_fraction", m.min_tissue_fraction},
                 {"thresholds", m.source_thresholds}};
  std::string out = header.dump() + "\n";
  for (const auto& r : m.records) {
    json rec = {{"source_id", r.source_id},
                {"x", r.x},
                {"y", r.y},
                {"size", r.size},
                {"tissue_fraction", r.tissue_fraction},
                {"label", r.label ? json(*r.label) : json(nullptr)}};
    out += rec.dump() + "\n";
  }
  return out;
}

TileManifest manifest_from_jsonl(const std::string& text) {
  using nlohmann::json;
  std::istringstream in(text);
  std::string line;
  TileManifest m;
  bool have_header = false;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    json j;
    try {
      j = json::parse(line);
    } catch (const json::exception& e) {
      throw DataError(std::string("manifest: ") + e.what());
    }
    if (!have_header) {
      m.tile_size = j.at("tile_size").get<int>();
      if (!j.at("threshold_used").is_null()) m.threshold_used = j.at("threshold_used").get<int>();
      m.min_tissue_fraction = j.at("min_tissue_fraction").get<double>();
      if (j.contains("thresholds")) m.source_thresholds = j["thresholds"].get<std::map<std::string, int>>();
      have_header = true;
      continue;
    }
    TileRecord r;
    r.source_id = j.at("source_id").get<std::string>();
    r.x = j.at("x").get<int>();
    r.y = j.at("y").get<int>();
    r.size = j.at("size").get<int>();
    r.tissue_fraction = j.at("tissue_fraction").get<double>();
    if (!j.at("label").is_null()) r.label = j.at("label").get<int>();
    m.records.push_back(std::move(r));
  }
  if (!have_header) throw DataError("manifest: missing header line");
  return m;
}

void write_manifest(const std::filesystem::path& path, const TileManifest& m) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write " + path.string());
  out << manifest_to_jsonl(m);
}

TileManifest read_manifest(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return manifest_from_jsonl(ss.str());
}

}  // namespace tokenhier
