#include "tokenhier/metrics.hpp"

#include <cmath>
#include <limits>
#include <string>

#include "tokenhier/numkernel.hpp"

namespace tokenhier {

BaccResult balanced_accuracy(std::span<const int> y_true, std::span<const int> y_pred, int num_classes) {
  if (y_true.empty()) throw ParameterError("balanced_accuracy: empty input");
  if (y_true.size() != y_pred.size()) throw ParameterError("balanced_accuracy: length mismatch");
  if (num_classes < 1) throw ParameterError("balanced_accuracy: need at least one class");
  std::vector<std::size_t> support(static_cast<std::size_t>(num_classes), 0), hits(support.size(), 0);
  std::size_t correct = 0;
  for (std::size_t i = 0; i < y_true.size(); ++i) {
    const int t = y_true[i], p = y_pred[i];
    if (t < 0 || t >= num_classes || p < 0 || p >= num_classes) {
      throw ParameterError("balanced_accuracy: label outside [0, " + std::to_string(num_classes) + ")");
    }
    ++support[static_cast<std::size_t>(t)];
    if (t == p) {
      ++hits[static_cast<std::size_t>(t)];
      ++correct;
    }
  }
  BaccResult r;
  r.recalls.assign(support.size(), std::numeric_limits<double>::quiet_NaN());
  double sum = 0.0;
  int counted = 0;
  for (std::size_t c = 0; c < support.size(); ++c) {
    if (support[c] == 0) {
      r.excluded_classes.push_back(static_cast<int>(c));
      continue;
    }
    r.recalls[c] = static_cast<double>(hits[c]) / static_cast<double>(support[c]);
    sum += r.recalls[c];
    ++counted;
  }
  r.bacc = sum / counted;
  r.accuracy = static_cast<double>(correct) / static_cast<double>(y_true.size());
  return r;
}

}  // namespace tokenhier
