#include "tokenhier/color.hpp"

#include <algorithm>
#include <cmath>

namespace tokenhier {

Raster::Raster(int w, int h, std::uint8_t fill)
    : width(w), height(h), pixels(3 * static_cast<std::size_t>(w) * static_cast<std::size_t>(h), fill) {
  if (w < 0 || h < 0) throw ParameterError("Raster: negative dimensions");
}

void Raster::set(int x, int y, std::uint8_t r, std::uint8_t g, std::uint8_t b) {
  const std::size_t i = index(x, y);
  pixels[i] = r;
  pixels[i + 1] = g;
  pixels[i + 2] = b;
}

void Raster::validate() const {
  if (width < 0 || height < 0 ||
      pixels.size() != 3 * static_cast<std::size_t>(width) * static_cast<std::size_t>(height)) {
    throw ParameterError("Raster: pixel buffer does not match " + std::to_string(width) + "x" +
                         std::to_string(height));
  }
}

namespace {

using Mat3 = Eigen::Matrix3d;

const Mat3& rgb_to_xyz_matrix() {
  static const Mat3 m = (Mat3() << 0.4124564, 0.3575761, 0.1804375,  //
                         0.2126729, 0.7151522, 0.0721750,               //
                         0.0193339, 0.1191920, 0.9503041)
                            .finished();
  return m;
}

const Mat3& xyz_to_rgb_matrix() {
  static const Mat3 m = rgb_to_xyz_matrix().inverse();
  return m;
}

const Eigen::Vector3d& white_point() {
  static const Eigen::Vector3d w = rgb_to_xyz_matrix() * Eigen::Vector3d::Ones();
  return w;
}

double srgb_to_linear(double c) {
  return c <= 0.04045 ? c / 12.92 : std::pow((c + 0.055) / 1.055, 2.4);
}

double linear_to_srgb(double c) {
  return c <= 0.0031308 ? 12.92 * c : 1.055 * std::pow(c, 1.0 / 2.4) - 0.055;
}

constexpr double kDelta = 6.0 / 29.0;

double lab_f(double t) {
  return t > kDelta * kDelta * kDelta ? std::cbrt(t) : t / (3.0 * kDelta * kDelta) + 4.0 / 29.0;
}

double lab_f_inv(double t) {
  return t > kDelta ? t * t * t : 3.0 * kDelta * kDelta * (t - 4.0 / 29.0);
}

std::uint8_t to_byte(double unit) {
  const double v = std::round(unit * 255.0);
  return static_cast<std::uint8_t>(std::clamp(v, 0.0, 255.0));
}

ChannelImage convert(const Raster& r, std::array<double, 3> (*fn)(std::uint8_t, std::uint8_t, std::uint8_t)) {
  r.validate();
  ChannelImage img;
  img.width = r.width;
  img.height = r.height;
  const auto n = static_cast<Eigen::Index>(r.pixels.size() / 3);
  img.px.resize(n, 3);
  for (Eigen::Index i = 0; i < n; ++i) {
    const auto p = fn(r.pixels[3 * i], r.pixels[3 * i + 1], r.pixels[3 * i + 2]);
    img.px.row(i) << p[0], p[1], p[2];
  }
  return img;
}

Raster convert_back(const ChannelImage& img, std::array<std::uint8_t, 3> (*fn)(double, double, double)) {
  Raster out(img.width, img.height);
  for (Eigen::Index i = 0; i < img.px.rows(); ++i) {
    const auto p = fn(img.px(i, 0), img.px(i, 1), img.px(i, 2));
    std::copy(p.begin(), p.end(), out.pixels.begin() + 3 * i);
  }
  return out;
}

}  // namespace

std::array<double, 3> rgb_to_lab(std::uint8_t r, std::uint8_t g, std::uint8_t b) {
  const Eigen::Vector3d lin(srgb_to_linear(r / 255.0), srgb_to_linear(g / 255.0),
                            srgb_to_linear(b / 255.0));
  const Eigen::Vector3d xyz = rgb_to_xyz_matrix() * lin;
  const Eigen::Vector3d& w = white_point();
  const double fx = lab_f(xyz(0) / w(0));
  const double fy = lab_f(xyz(1) / w(1));
  const double fz = lab_f(xyz(2) / w(2));
  return {116.0 * fy - 16.0, 500.0 * (fx - fy), 200.0 * (fy - fz)};
}

std::array<std::uint8_t, 3> lab_to_rgb(double l, double a, double b) {
  const double fy = (l + 16.0) / 116.0;
  const double fx = fy + a / 500.0;
  const double fz = fy - b / 200.0;
  const Eigen::Vector3d& w = white_point();
  const Eigen::Vector3d xyz(w(0) * lab_f_inv(fx), w(1) * lab_f_inv(fy), w(2) * lab_f_inv(fz));
  const Eigen::Vector3d lin = xyz_to_rgb_matrix() * xyz;
  return {to_byte(linear_to_srgb(std::max(lin(0), 0.0))), to_byte(linear_to_srgb(std::max(lin(1), 0.0))),
          to_byte(linear_to_srgb(std::max(lin(2), 0.0)))};
}

std::array<double, 3> rgb_to_hsv(std::uint8_t r8, std::uint8_t g8, std::uint8_t b8) {
  const double r = r8 / 255.0, g = g8 / 255.0, b = b8 / 255.0;
  const double hi = std::max({r, g, b});
  const double lo = std::min({r, g, b});
  const double chroma = hi - lo;
  double h = 0.0;
  if (chroma > 0) {
    if (hi == r) {
      h = 60.0 * std::fmod((g - b) / chroma + 6.0, 6.0);
    } else if (hi == g) {
      h = 60.0 * ((b - r) / chroma + 2.0);
    } else {
      h = 60.0 * ((r - g) / chroma + 4.0);
    }
    if (h >= 360.0) h -= 360.0;
  }
  const double s = hi > 0 ? chroma / hi : 0.0;
  return {h, s, hi};
}

std::array<std::uint8_t, 3> hsv_to_rgb(double h, double s, double v) {
  s = std::clamp(s, 0.0, 1.0);
  v = std::clamp(v, 0.0, 1.0);
  h = std::fmod(h, 360.0);
  if (h < 0) h += 360.0;
  const double chroma = v * s;
  const double hp = h / 60.0;
  const double x = chroma * (1.0 - std::abs(std::fmod(hp, 2.0) - 1.0));
  double r = 0, g = 0, b = 0;
  switch (static_cast<int>(hp)) {
    case 0: r = chroma; g = x; break;
    case 1: r = x; g = chroma; break;
    case 2: g = chroma; b = x; break;
    case 3: g = x; b = chroma; break;
    case 4: r = x; b = chroma; break;
    default: r = chroma; b = x; break;
  }
  const double m = v - chroma;
  return {to_byte(r + m), to_byte(g + m), to_byte(b + m)};
}

ChannelImage rgb_to_lab(const Raster& r) { return convert(r, &rgb_to_lab); }
Raster lab_to_rgb(const ChannelImage& img) { return convert_back(img, &lab_to_rgb); }
ChannelImage rgb_to_hsv(const Raster& r) { return convert(r, &rgb_to_hsv); }
Raster hsv_to_rgb(const ChannelImage& img) { return convert_back(img, &hsv_to_rgb); }

std::string to_string(StainSpace s) {
  switch (s) {
    case StainSpace::LAB: return "lab";
    case StainSpace::HSV: return "hsv";
    case StainSpace::BOTH: return "both";
    case StainSpace::RANDOM: return "random";
  }
  return "?";
}

StainSpace stain_space_from_string(const std::string& s) {
  if (s == "lab") return StainSpace::LAB;
  if (s == "hsv") return StainSpace::HSV;
  if (s == "both") return StainSpace::BOTH;
  if (s == "random") return StainSpace::RANDOM;
  throw ConfigError("unknown stain space '" + s + "' (expected lab|hsv|both|random)");
}

void StainAugConfig::validate() const {
  for (const auto* js : {&lab, &hsv}) {
    for (int c = 0; c < 3; ++c) {
      if (!(js->mean[c] >= 0) || !(js->std_ratio[c] >= 0)) {
        throw ParameterError("StainAugConfig: jitter sigmas must be >= 0");
      }
    }
  }
}

std::pair<std::array<double, 3>, std::array<double, 3>> channel_stats(const ChannelImage& img) {
  std::array<double, 3> mean{}, sd{};
  const double n = static_cast<double>(img.px.rows());
  for (int c = 0; c < 3; ++c) {
    mean[c] = img.px.col(c).sum() / n;
    sd[c] = std::sqrt((img.px.col(c).array() - mean[c]).square().sum() / n);
  }
  return {mean, sd};
}

namespace {

Raster jitter_in_space(const Raster& r, StainSpace space, const JitterSigmas& sig, RngStream& rng,
                       std::vector<StainDraw>* trace) {
  const bool hsv = space == StainSpace::HSV;
  ChannelImage img = hsv ? rgb_to_hsv(r) : rgb_to_lab(r);
  const auto [mean, sd] = channel_stats(img);
  StainDraw draw;
  draw.space = space;
  draw.source_mean = mean;
  draw.source_std = sd;
  for (int c = 0; c < 3; ++c) {
    const double delta = gaussian(rng, 1, 0.0, sig.mean[c])[0];
    const double ratio = std::max(kMinStdRatio, gaussian(rng, 1, 1.0, sig.std_ratio[c])[0]);
    draw.delta_mean[c] = delta;
    draw.std_ratio[c] = ratio;
    auto col = img.px.col(c).array();
    if (hsv && c == 0) {
      // Hue is circular: shift only.
      for (Eigen::Index i = 0; i < img.px.rows(); ++i) {
        double h = std::fmod(img.px(i, 0) + delta, 360.0);
        img.px(i, 0) = h < 0 ? h + 360.0 : h;
      }
    } else {
      col = (col - mean[c]) * ratio + mean[c] + delta;
      if (hsv) col = col.max(0.0).min(1.0);
    }
  }
  if (trace) trace->push_back(draw);
  return hsv ? hsv_to_rgb(img) : lab_to_rgb(img);
}

}  // namespace

Raster stain_augment(const Raster& r, const StainAugConfig& cfg, RngStream& rng,
                     std::vector<StainDraw>* trace) {
  r.validate();
  if (r.empty()) throw ParameterError("stain_augment: empty raster");
  if (!cfg.enabled) return r;
  cfg.validate();
  switch (cfg.space) {
    case StainSpace::LAB: return jitter_in_space(r, StainSpace::LAB, cfg.lab, rng, trace);
    case StainSpace::HSV: return jitter_in_space(r, StainSpace::HSV, cfg.hsv, rng, trace);
    case StainSpace::BOTH: {
      const Raster mid = jitter_in_space(r, StainSpace::LAB, cfg.lab, rng, trace);
      return jitter_in_space(mid, StainSpace::HSV, cfg.hsv, rng, trace);
    }
    case StainSpace::RANDOM: {
      const bool use_hsv = rng.uniform() < 0.5;
      return use_hsv ? jitter_in_space(r, StainSpace::HSV, cfg.hsv, rng, trace)
                     : jitter_in_space(r, StainSpace::LAB, cfg.lab, rng, trace);
    }
  }
  return r;
}

}  // namespace tokenhier
