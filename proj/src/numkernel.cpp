#include "tokenhier/numkernel.hpp"

#include <atomic>
#include <bit>
#include <cstring>
#include <mutex>
#include <numbers>
#include <thread>

namespace tokenhier {

std::string shape_str(Eigen::Index rows, Eigen::Index cols) {
  return "(" + std::to_string(rows) + "x" + std::to_string(cols) + ")";
}

Mat layer_norm(const Mat& x, const Mat& gain, const Mat& bias, double eps, LayerNormCache* cache) {
  if (gain.size() != x.cols() || bias.size() != x.cols()) {
    throw ShapeError("layer_norm: gain/bias of size " + std::to_string(gain.size()) +
                     " do not broadcast over " + shape_str(x.rows(), x.cols()));
  }
  if (!(eps > 0)) throw ParameterError("layer_norm: eps must be positive");
  const Eigen::Index n = x.rows();
  const double cols = static_cast<double>(x.cols());
  Mat xhat(n, x.cols());
  Vec inv_sigma(n);
  std::vector<bool> clamped(static_cast<std::size_t>(n));
  for (Eigen::Index r = 0; r < n; ++r) {
    const double mean = x.row(r).sum() / cols;
    xhat.row(r) = x.row(r).array() - mean;
    const double var = xhat.row(r).squaredNorm() / cols;
    clamped[static_cast<std::size_t>(r)] = var < eps;
    inv_sigma(r) = 1.0 / std::sqrt(std::max(var, eps));
    xhat.row(r) *= inv_sigma(r);
  }
  Mat y = xhat;
  for (Eigen::Index r = 0; r < n; ++r) {
    y.row(r) = y.row(r).cwiseProduct(gain.reshaped<Eigen::RowMajor>().transpose()) +
               bias.reshaped<Eigen::RowMajor>().transpose();
  }
  if (cache) {
    cache->normalized = std::move(xhat);
    cache->inv_sigma = std::move(inv_sigma);
    cache->clamped = std::move(clamped);
  }
  return y;
}

LayerNormGrads layer_norm_backward(const Mat& dy, const Mat& gain, const LayerNormCache& cache) {
  const Mat& xhat = cache.normalized;
  const Eigen::Index n = dy.rows();
  const double cols = static_cast<double>(dy.cols());
  LayerNormGrads g;
  g.dgain = Mat::Zero(1, dy.cols());
  g.dbias = Mat::Zero(1, dy.cols());
  g.dx.resize(n, dy.cols());
  const RowVec gvec = gain.reshaped<Eigen::RowMajor>().transpose();
  for (Eigen::Index r = 0; r < n; ++r) {
    g.dgain.row(0) += dy.row(r).cwiseProduct(xhat.row(r));
    g.dbias.row(0) += dy.row(r);
    const RowVec dxhat = dy.row(r).cwiseProduct(gvec);
    const double mean_d = dxhat.sum() / cols;
    if (cache.clamped[static_cast<std::size_t>(r)]) {
      g.dx.row(r) = (dxhat.array() - mean_d) * cache.inv_sigma(r);
    } else {
      const double mean_dx = dxhat.dot(xhat.row(r)) / cols;
      g.dx.row(r) =
          (dxhat.array() - mean_d - xhat.row(r).array() * mean_dx) * cache.inv_sigma(r);
    }
  }
  return g;
}

void require_finite(const Mat& m, const std::string& where) {
  if (!m.allFinite()) throw NumericError("non-finite values in " + where);
}

std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ull;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
  return x ^ (x >> 31);
}

RngStream::RngStream(std::uint64_t seed, std::uint64_t stream_id)
    : seed_(seed),
      stream_id_(stream_id),
      key_(splitmix64(seed ^ splitmix64(stream_id ^ 0x6a09e667f3bcc909ull))) {}

std::uint64_t RngStream::next_u64() {
  ++counter_;
  return splitmix64(key_ + counter_ * 0x9e3779b97f4a7c15ull);
}

double RngStream::uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

std::uint64_t RngStream::below(std::uint64_t n) {
  if (n == 0) throw ParameterError("RngStream::below: n must be positive");
  // Rejection keeps the result unbiased.
  const std::uint64_t limit = std::numeric_limits<std::uint64_t>::max() -
                              std::numeric_limits<std::uint64_t>::max() % n;
  std::uint64_t v;
  do {
    v = next_u64();
  } while (v >= limit);
  return v % n;
}

double RngStream::normal() {
  const double u1 = 1.0 - uniform();  // (0, 1]
  const double u2 = uniform();
  return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
}

RngStream RngStream::child(std::uint64_t sub_id) const {
  return RngStream(seed_, splitmix64(stream_id_ * 0x100000001b3ull + sub_id + 1));
}

std::vector<double> gaussian(RngStream& rng, std::size_t n, double mu, double sigma) {
  if (!(sigma >= 0)) throw ParameterError("gaussian: sigma must be >= 0");
  std::vector<double> out(n);
  for (auto& v : out) v = mu + sigma * rng.normal();
  return out;
}

void shuffle_indices(std::vector<std::size_t>& idx, RngStream& rng) {
  for (std::size_t i = idx.size(); i > 1; --i) {
    std::swap(idx[i - 1], idx[rng.below(i)]);
  }
}

Mat trunc_normal(RngStream& rng, Eigen::Index rows, Eigen::Index cols, double sigma) {
  Mat m(rows, cols);
  for (Eigen::Index i = 0; i < m.size(); ++i) {
    double z;
    do {
      z = rng.normal();
    } while (std::abs(z) > 2.0);
    m.data()[i] = sigma * z;
  }
  return m;
}

namespace {
std::atomic<int> g_threads{1};
thread_local bool t_inside_parallel = false;
}

void set_thread_count(int n) { g_threads = std::max(1, n); }
int thread_count() { return g_threads; }

void parallel_for(std::size_t n, const std::function<void(std::size_t)>& fn) {
  const std::size_t workers = std::min<std::size_t>(static_cast<std::size_t>(g_threads.load()), n);
  // Nested calls run inline on the calling worker.
  if (workers <= 1 || t_inside_parallel) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::exception_ptr failure;
  std::size_t failure_index = n;
  std::mutex failure_mu;
  auto body = [&] {
    t_inside_parallel = true;
    for (;;) {
      const std::size_t i = next.fetch_add(1);
      if (i >= n) break;
      try {
        fn(i);
      } catch (...) {
        std::lock_guard lock(failure_mu);
        // Keep the lowest failing index so the reported error does not depend on scheduling.
        if (i < failure_index) {
          failure_index = i;
          failure = std::current_exception();
        }
      }
    }
    t_inside_parallel = false;
  };
  {
    std::vector<std::jthread> pool;
    pool.reserve(workers - 1);
    for (std::size_t w = 1; w < workers; ++w) pool.emplace_back(body);
    body();
  }
  if (failure) std::rethrow_exception(failure);
}

std::uint64_t fnv1a64(std::span<const unsigned char> bytes, std::uint64_t h) {
  for (unsigned char b : bytes) {
    h ^= b;
    h *= 1099511628211ull;
  }
  return h;
}

std::uint64_t hash_matrix(const Mat& m, std::uint64_t h) {
  const std::int64_t dims[2] = {m.rows(), m.cols()};
  h = fnv1a64({reinterpret_cast<const unsigned char*>(dims), sizeof dims}, h);
  return fnv1a64({reinterpret_cast<const unsigned char*>(m.data()),
                  static_cast<std::size_t>(m.size()) * sizeof(double)},
                 h);
}

std::string hex64(std::uint64_t v) {
  static const char* digits = "0123456789abcdef";
  std::string s(16, '0');
  for (int i = 15; i >= 0; --i, v >>= 4) s[static_cast<std::size_t>(i)] = digits[v & 0xf];
  return s;
}

}  // namespace tokenhier
