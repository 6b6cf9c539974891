#pragma once

#include <string>
#include <vector>

#include "tokenhier/numkernel.hpp"

namespace tokenhier {

// Parameter structs expose `visit(f)` calling f(name, tensor) for every
// tensor in a fixed declared order. Everything below works off that order.

template <class P>
std::vector<Mat*> tensors(P& p) {
  std::vector<Mat*> out;
  p.visit([&](const std::string&, Mat& m) { out.push_back(&m); });
  return out;
}

template <class P>
std::vector<const Mat*> tensors(const P& p) {
  std::vector<const Mat*> out;
  p.visit([&](const std::string&, const Mat& m) { out.push_back(&m); });
  return out;
}

template <class P>
std::vector<std::string> tensor_names(const P& p) {
  std::vector<std::string> out;
  p.visit([&](const std::string& name, const Mat&) { out.push_back(name); });
  return out;
}

template <class P>
std::size_t parameter_count(const P& p) {
  std::size_t n = 0;
  p.visit([&](const std::string&, const Mat& m) { n += static_cast<std::size_t>(m.size()); });
  return n;
}

template <class P>
P zeros_like(const P& p) {
  P z = p;
  z.visit([](const std::string&, Mat& m) { m.setZero(); });
  return z;
}

/// y += alpha * x, tensor by tensor.
template <class P>
void axpy(P& y, double alpha, const P& x) {
  auto ys = tensors(y);
  auto xs = tensors(x);
  for (std::size_t i = 0; i < ys.size(); ++i) *ys[i] += alpha * *xs[i];
}

template <class P>
void scale(P& p, double alpha) {
  p.visit([&](const std::string&, Mat& m) { m *= alpha; });
}

/// target <- m * target + (1 - m) * source
template <class P>
void ema_update(P& target, const P& source, double momentum) {
  auto ts = tensors(target);
  auto ss = tensors(source);
  for (std::size_t i = 0; i < ts.size(); ++i) {
    *ts[i] = momentum * *ts[i] + (1.0 - momentum) * *ss[i];
  }
}

template <class P>
bool all_finite(const P& p) {
  bool ok = true;
  p.visit([&](const std::string&, const Mat& m) { ok = ok && m.allFinite(); });
  return ok;
}

template <class P>
std::uint64_t hash_params(const P& p) {
  std::uint64_t h = 14695981039346656037ull;
  p.visit([&](const std::string&, const Mat& m) { h = hash_matrix(m, h); });
  return h;
}

/// Adam with optional coupled L2 weight decay (added to the gradient).
class Adam {
 public:
  explicit Adam(double lr, double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8,
                double weight_decay = 0.0)
      : lr_(lr), beta1_(beta1), beta2_(beta2), eps_(eps), weight_decay_(weight_decay) {}

  template <class P>
  void step(P& params, const P& grads) {
    auto ps = tensors(params);
    auto gs = tensors(grads);
    if (m_.empty()) {
      for (const Mat* p : ps) {
        m_.push_back(Mat::Zero(p->rows(), p->cols()));
        v_.push_back(Mat::Zero(p->rows(), p->cols()));
      }
    }
    ++t_;
    const double c1 = 1.0 - std::pow(beta1_, t_);
    const double c2 = 1.0 - std::pow(beta2_, t_);
    for (std::size_t i = 0; i < ps.size(); ++i) {
      Mat g = *gs[i];
      if (weight_decay_ != 0.0) g += weight_decay_ * *ps[i];
      m_[i] = beta1_ * m_[i] + (1.0 - beta1_) * g;
      v_[i] = beta2_ * v_[i] + (1.0 - beta2_) * g.cwiseProduct(g);
      *ps[i] -= (lr_ * (m_[i] / c1).array() / ((v_[i] / c2).array().sqrt() + eps_)).matrix();
    }
  }

  int steps() const { return t_; }

 private:
  double lr_, beta1_, beta2_, eps_, weight_decay_;
  int t_ = 0;
  std::vector<Mat> m_, v_;
};

}  // namespace tokenhier
