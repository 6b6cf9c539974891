#pragma once

#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>

#include "tokenhier/color.hpp"
#include "tokenhier/numkernel.hpp"

namespace testing {

/// Fresh directory under the system temp dir, removed on destruction.
class TempDir {
 public:
  explicit TempDir(const std::string& tag) {
    path_ = std::filesystem::temp_directory_path() /
            ("tokenhier-" + tag + "-" + std::to_string(reinterpret_cast<std::uintptr_t>(this)));
    std::filesystem::remove_all(path_);
    std::filesystem::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;

  const std::filesystem::path& path() const { return path_; }
  std::filesystem::path operator/(const std::string& name) const { return path_ / name; }

 private:
  std::filesystem::path path_;
};

inline std::string slurp(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

inline tokenhier::Raster random_raster(int w, int h, tokenhier::RngStream& rng) {
  tokenhier::Raster r(w, h);
  for (auto& v : r.pixels) v = static_cast<std::uint8_t>(rng.below(256));
  return r;
}

inline tokenhier::Mat random_mat(Eigen::Index rows, Eigen::Index cols, tokenhier::RngStream& rng) {
  tokenhier::Mat m(rows, cols);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = rng.normal();
  return m;
}

}  // namespace testing
