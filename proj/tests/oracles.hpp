#pragma once

// Independent reference implementations shared by the unit tests and the
// acceptance runner.

#include <algorithm>
#include <cmath>
#include <limits>
#include <vector>

#include "tokenhier/numkernel.hpp"
#include "tokenhier/ssl.hpp"
#include "tokenhier/tiler.hpp"

namespace testing {

using namespace tokenhier;

using u128 = unsigned __int128;

// Exhaustive search over t in [0, 254] with exact rational comparison of the
// between-class variance w0 w1 (mu0 - mu1)^2, written as (s0 w1 - s1 w0)^2 / (w0 w1).
inline int exhaustive_otsu(const GrayHistogram& h) {
  int best_t = -1;
  u128 best_num = 0, best_den = 1;
  for (int t = 0; t < 255; ++t) {
    std::uint64_t w0 = 0, w1 = 0, s0 = 0, s1 = 0;
    for (int i = 0; i < 256; ++i) {
      (i <= t ? w0 : w1) += h[i];
      (i <= t ? s0 : s1) += static_cast<std::uint64_t>(i) * h[i];
    }
    if (w0 == 0 || w1 == 0) continue;
    const __int128 diff = static_cast<__int128>(s0) * w1 - static_cast<__int128>(s1) * w0;
    const u128 num = static_cast<u128>(diff < 0 ? -diff : diff) * static_cast<u128>(diff < 0 ? -diff : diff);
    const u128 den = static_cast<u128>(w0) * w1;
    if (best_t < 0 || num * best_den > best_num * den) {
      best_t = t;
      best_num = num;
      best_den = den;
    }
  }
  return best_t;
}

inline GrayHistogram random_histogram(RngStream& rng) {
  GrayHistogram h{};
  switch (rng.below(4)) {
    case 0:  // dense
      for (auto& v : h) v = rng.below(201);
      break;
    case 1: {  // sparse
      const int levels = 2 + static_cast<int>(rng.below(6));
      for (int k = 0; k < levels; ++k) h[rng.below(256)] += 1 + rng.below(200);
      break;
    }
    case 2: {  // bimodal clusters
      const int a = static_cast<int>(rng.below(100)), b = 130 + static_cast<int>(rng.below(100));
      for (int k = 0; k < 12; ++k) {
        h[a + k] += rng.below(200);
        h[b + k] += rng.below(200);
      }
      h[a] += 1;
      h[b] += 1;
      break;
    }
    default:  // single spike plus noise floor
      for (auto& v : h) v = rng.below(3);
      h[rng.below(256)] += 200;
      break;
  }
  int populated = 0;
  for (auto v : h) populated += v > 0;
  if (populated < 2) {
    h[0] += 1;
    h[255] += 1;
  }
  return h;
}

/// Brute-force all-pairs nearest neighbour form of the Koleo term.
inline long double koleo_oracle(const Mat& f) {
  const Eigen::Index n = f.rows();
  std::vector<std::vector<long double>> u(static_cast<std::size_t>(n));
  for (Eigen::Index i = 0; i < n; ++i) {
    long double norm = 0;
    for (Eigen::Index j = 0; j < f.cols(); ++j) norm += static_cast<long double>(f(i, j)) * f(i, j);
    norm = std::sqrt(norm);
    for (Eigen::Index j = 0; j < f.cols(); ++j) u[i].push_back(f(i, j) / norm);
  }
  long double sum = 0;
  for (Eigen::Index i = 0; i < n; ++i) {
    long double best = std::numeric_limits<long double>::infinity();
    for (Eigen::Index j = 0; j < n; ++j) {
      if (i == j) continue;
      long double d2 = 0;
      for (std::size_t k = 0; k < u[i].size(); ++k) d2 += (u[i][k] - u[j][k]) * (u[i][k] - u[j][k]);
      best = std::min(best, std::sqrt(d2));
    }
    sum -= std::log(std::max(best, static_cast<long double>(kKoleoEps)));
  }
  return sum / n;
}

}  // namespace testing
