#pragma once

#include <string>
#include <vector>

#include "tokenhier/params.hpp"

namespace tokenhier {

struct GradcheckOptions {
  double tolerance = 1e-4;
  double step = 1e-5;
  /// Coordinates sampled per tensor; tensors at most this large are checked in full.
  std::size_t max_coords_per_tensor = 64;
  std::uint64_t seed = 7;
  /// Test hook: scales the analytic gradient of the named component by 1.01.
  std::string fault_component;
};

struct GradcheckResult {
  std::string component;
  double worst_rel_error = 0.0;
  std::string worst_tensor;
  bool passed = false;
};

/// Relative error ||a - n|| / max(||a||, ||n||, 1e-4) between an analytic and
/// a central-difference gradient sample.
double relative_error(const Eigen::VectorXd& analytic, const Eigen::VectorXd& numeric);

/// Central differences on sampled coordinates of every tensor of `params`,
/// compared against `analytic`. Returns the worst per-tensor relative error.
template <class P, class LossFn>
double finite_difference_check(P& params, const P& analytic, LossFn&& loss, const GradcheckOptions& opt,
                               RngStream& rng, std::string* worst_tensor = nullptr) {
  auto ps = tensors(params);
  auto as = tensors(analytic);
  const auto names = tensor_names(params);
  double worst = 0.0;
  for (std::size_t t = 0; t < ps.size(); ++t) {
    Mat& m = *ps[t];
    const auto size = static_cast<std::size_t>(m.size());
    std::vector<std::size_t> coords;
    if (size <= opt.max_coords_per_tensor) {
      for (std::size_t i = 0; i < size; ++i) coords.push_back(i);
    } else {
      for (std::size_t i = 0; i < opt.max_coords_per_tensor; ++i) coords.push_back(rng.below(size));
    }
    Eigen::VectorXd a(static_cast<Eigen::Index>(coords.size())), n(a.size());
    for (std::size_t k = 0; k < coords.size(); ++k) {
      double& x = m.data()[coords[k]];
      const double saved = x;
      x = saved + opt.step;
      const double up = loss();
      x = saved - opt.step;
      const double down = loss();
      x = saved;
      n(static_cast<Eigen::Index>(k)) = (up - down) / (2.0 * opt.step);
      a(static_cast<Eigen::Index>(k)) = as[t]->data()[coords[k]];
    }
    const double err = relative_error(a, n);
    if (t == 0 || err > worst) {
      worst = err;
      if (worst_tensor) *worst_tensor = names[t];
    }
  }
  return worst;
}

/// Every finite-difference suite: encoder layers, the four SSL losses, the
/// projection head, the full SSL objective and both classification heads.
std::vector<GradcheckResult> run_gradcheck(const GradcheckOptions& opt = {});

}  // namespace tokenhier
