#pragma once

#include <span>
#include <vector>

namespace tokenhier {

struct BaccResult {
  double bacc = 0.0;
  /// Recall per class; NaN for classes without support.
  std::vector<double> recalls;
  std::vector<int> excluded_classes;
  double accuracy = 0.0;
};

/// Unweighted mean of per-class recalls over classes with nonzero support.
/// Throws ParameterError on empty or mismatched input or labels outside [0, C).
BaccResult balanced_accuracy(std::span<const int> y_true, std::span<const int> y_pred, int num_classes);

/// Index of the largest entry; ties go to the lowest index.
template <typename V>
int argmax(const V& v) {
  int best = 0;
  for (int i = 1; i < static_cast<int>(v.size()); ++i) {
    if (v[i] > v[best]) best = i;
  }
  return best;
}

}  // namespace tokenhier
