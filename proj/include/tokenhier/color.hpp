#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "tokenhier/numkernel.hpp"

namespace tokenhier {

/// 8-bit RGB image, row-major, interleaved channels.
struct Raster {
  int width = 0;
  int height = 0;
  std::vector<std::uint8_t> pixels;

  Raster() = default;
  Raster(int w, int h, std::uint8_t fill = 0);

  bool empty() const { return width == 0 || height == 0; }
  std::size_t index(int x, int y) const {
    return 3 * (static_cast<std::size_t>(y) * static_cast<std::size_t>(width) + static_cast<std::size_t>(x));
  }
  std::uint8_t& at(int x, int y, int c) { return pixels[index(x, y) + static_cast<std::size_t>(c)]; }
  std::uint8_t at(int x, int y, int c) const { return pixels[index(x, y) + static_cast<std::size_t>(c)]; }
  void set(int x, int y, std::uint8_t r, std::uint8_t g, std::uint8_t b);

  /// Throws ParameterError if the buffer length disagrees with the dimensions.
  void validate() const;
  bool operator==(const Raster&) const = default;
};

/// Floating point three-channel image: one row per pixel, in raster order.
struct ChannelImage {
  int width = 0;
  int height = 0;
  Eigen::Matrix<double, Eigen::Dynamic, 3, Eigen::RowMajor> px;
};

// CIELAB, D65 / 2 degree observer. The reference white is the sRGB matrix
// applied to linear (1, 1, 1), so RGB white maps to a = b = 0.
std::array<double, 3> rgb_to_lab(std::uint8_t r, std::uint8_t g, std::uint8_t b);
std::array<std::uint8_t, 3> lab_to_rgb(double l, double a, double b);
ChannelImage rgb_to_lab(const Raster& r);
Raster lab_to_rgb(const ChannelImage& img);

// Hexcone HSV with H in [0, 360) and S, V in [0, 1]. Achromatic pixels get H = 0.
std::array<double, 3> rgb_to_hsv(std::uint8_t r, std::uint8_t g, std::uint8_t b);
std::array<std::uint8_t, 3> hsv_to_rgb(double h, double s, double v);
ChannelImage rgb_to_hsv(const Raster& r);
Raster hsv_to_rgb(const ChannelImage& img);

enum class StainSpace { LAB, HSV, BOTH, RANDOM };

std::string to_string(StainSpace s);
StainSpace stain_space_from_string(const std::string& s);

struct JitterSigmas {
  std::array<double, 3> mean{};
  std::array<double, 3> std_ratio{};
};

struct StainAugConfig {
  bool enabled = true;
  /// RANDOM picks LAB or HSV uniformly per call.
  StainSpace space = StainSpace::RANDOM;
  JitterSigmas lab{{2.0, 1.5, 1.5}, {0.08, 0.08, 0.08}};
  JitterSigmas hsv{{4.0, 0.03, 0.03}, {0.05, 0.05, 0.05}};

  void validate() const;
};

/// What stain_augment drew, one entry per color space applied.
struct StainDraw {
  StainSpace space = StainSpace::LAB;
  std::array<double, 3> delta_mean{};
  std::array<double, 3> std_ratio{};
  std::array<double, 3> source_mean{};
  std::array<double, 3> source_std{};
};

constexpr double kMinStdRatio = 0.05;

/// Statistic jitter: per channel, x -> (x - mean) * ratio + mean + delta with
/// delta ~ N(0, sigma_mean) and ratio ~ N(1, sigma_std) clamped at 0.05. Hue
/// is only shifted (mod 360). BOTH applies LAB then HSV with fresh draws.
Raster stain_augment(const Raster& r, const StainAugConfig& cfg, RngStream& rng,
                     std::vector<StainDraw>* trace = nullptr);

/// Per-channel mean and population standard deviation.
std::pair<std::array<double, 3>, std::array<double, 3>> channel_stats(const ChannelImage& img);

// Binary PPM (P6, maxval 255). Bit-exact round trip.
Raster read_ppm(const std::filesystem::path& path);
void write_ppm(const std::filesystem::path& path, const Raster& r);
Raster decode_ppm(const std::string& bytes);
std::string encode_ppm(const Raster& r);

}  // namespace tokenhier
