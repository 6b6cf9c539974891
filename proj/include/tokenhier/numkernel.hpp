#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include <Eigen/Dense>

namespace tokenhier {

// Row-major dense storage throughout; tokens are rows.
template <typename Scalar>
using MatrixT = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename Scalar>
using RowVectorT = Eigen::Matrix<Scalar, 1, Eigen::Dynamic>;

using Mat = MatrixT<double>;
using RowVec = RowVectorT<double>;
using Vec = Eigen::VectorXd;

struct Error : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct ShapeError : Error {
  using Error::Error;
};
struct ParameterError : Error {
  using Error::Error;
};
struct DegenerateInputError : Error {
  using Error::Error;
};
struct NumericError : Error {
  using Error::Error;
};
struct ConfigError : Error {
  using Error::Error;
};
struct DataError : Error {
  using Error::Error;
};

std::string shape_str(Eigen::Index rows, Eigen::Index cols);

/// Checked product. Throws ShapeError when inner dimensions disagree.
template <typename A, typename B>
MatrixT<typename A::Scalar> matmul(const Eigen::MatrixBase<A>& a, const Eigen::MatrixBase<B>& b) {
  if (a.cols() != b.rows()) {
    throw ShapeError("matmul: " + shape_str(a.rows(), a.cols()) + " x " +
                     shape_str(b.rows(), b.cols()));
  }
  return a * b;
}

/// Row-wise softmax with max subtraction; every output row sums to one.
template <typename Derived>
MatrixT<typename Derived::Scalar> softmax_rows(const Eigen::MatrixBase<Derived>& expr) {
  using Scalar = typename Derived::Scalar;
  const MatrixT<Scalar> m = expr;
  MatrixT<Scalar> out(m.rows(), m.cols());
  for (Eigen::Index r = 0; r < m.rows(); ++r) {
    const Scalar peak = m.row(r).maxCoeff();
    Scalar total = 0;
    for (Eigen::Index c = 0; c < m.cols(); ++c) {
      out(r, c) = std::exp(m(r, c) - peak);
      total += out(r, c);
    }
    out.row(r) /= total;
  }
  return out;
}

/// Log-softmax of each row, stable for large magnitudes.
template <typename Derived>
MatrixT<typename Derived::Scalar> log_softmax_rows(const Eigen::MatrixBase<Derived>& expr) {
  using Scalar = typename Derived::Scalar;
  const MatrixT<Scalar> m = expr;
  MatrixT<Scalar> out(m.rows(), m.cols());
  for (Eigen::Index r = 0; r < m.rows(); ++r) {
    const Scalar peak = m.row(r).maxCoeff();
    Scalar total = 0;
    for (Eigen::Index c = 0; c < m.cols(); ++c) total += std::exp(m(r, c) - peak);
    const Scalar lse = peak + std::log(total);
    for (Eigen::Index c = 0; c < m.cols(); ++c) out(r, c) = m(r, c) - lse;
  }
  return out;
}

/// Per-row statistics kept by layer_norm for the backward pass.
struct LayerNormCache {
  Mat normalized;  // (x - mean) / sigma
  Vec inv_sigma;   // 1 / sqrt(max(var, eps))
  std::vector<bool> clamped;
};

/// Row-wise layer normalization: ((x - mean) / sqrt(max(var, eps))) * gain + bias.
/// gain and bias are 1 x cols and broadcast over rows. Variance is the
/// population variance; rows whose variance falls below eps are clamped.
Mat layer_norm(const Mat& x, const Mat& gain, const Mat& bias, double eps,
               LayerNormCache* cache = nullptr);

struct LayerNormGrads {
  Mat dx;
  Mat dgain;
  Mat dbias;
};
LayerNormGrads layer_norm_backward(const Mat& dy, const Mat& gain, const LayerNormCache& cache);

inline double gelu(double x) { return 0.5 * x * (1.0 + std::erf(x / std::sqrt(2.0))); }
inline double gelu_grad(double x) {
  constexpr double inv_sqrt_2pi = 0.39894228040143267794;
  return 0.5 * (1.0 + std::erf(x / std::sqrt(2.0))) + x * inv_sqrt_2pi * std::exp(-0.5 * x * x);
}

/// Throws NumericError naming `where` if any entry is NaN or infinite.
void require_finite(const Mat& m, const std::string& where);

/// Counter-based random stream. The n-th draw of a stream is a pure function
/// of (seed, stream_id, n): splitmix64 finalization of a key derived from the
/// seed and stream id, advanced by a Weyl increment per draw.
class RngStream {
 public:
  RngStream(std::uint64_t seed, std::uint64_t stream_id);

  std::uint64_t seed() const { return seed_; }
  std::uint64_t stream_id() const { return stream_id_; }
  std::uint64_t counter() const { return counter_; }

  std::uint64_t next_u64();
  /// Uniform in [0, 1) with 53 random bits.
  double uniform();
  /// Uniform integer in [0, n).
  std::uint64_t below(std::uint64_t n);
  /// One standard normal via Box-Muller (consumes two uniforms).
  double normal();

  /// A stream keyed by this stream's seed and a sub-id; independent of this
  /// stream's counter so per-item streams do not depend on draw order.
  RngStream child(std::uint64_t sub_id) const;

 private:
  std::uint64_t seed_;
  std::uint64_t stream_id_;
  std::uint64_t key_;
  std::uint64_t counter_ = 0;
};

std::uint64_t splitmix64(std::uint64_t x);

/// n draws from N(mu, sigma^2). sigma = 0 returns exactly mu.
std::vector<double> gaussian(RngStream& rng, std::size_t n, double mu, double sigma);

/// Fisher-Yates shuffle driven by the stream.
void shuffle_indices(std::vector<std::size_t>& idx, RngStream& rng);

/// Truncated normal (two sigma) fill, the usual transformer init.
Mat trunc_normal(RngStream& rng, Eigen::Index rows, Eigen::Index cols, double sigma);

// Worker pool configuration. Parallel loops write to per-index slots only,
// so results never depend on the thread count.
void set_thread_count(int n);
int thread_count();
void parallel_for(std::size_t n, const std::function<void(std::size_t)>& fn);

/// FNV-1a over raw bytes.
std::uint64_t fnv1a64(std::span<const unsigned char> bytes, std::uint64_t h = 14695981039346656037ull);
std::uint64_t hash_matrix(const Mat& m, std::uint64_t h = 14695981039346656037ull);
std::string hex64(std::uint64_t v);

}  // namespace tokenhier
