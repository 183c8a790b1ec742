#include "sgma/gradcheck.hpp"

#include <algorithm>
#include <cmath>

namespace sgma {

double relative_error(double analytic, double numeric) {
  const double denom = std::max({std::abs(analytic), std::abs(numeric), 1e-8});
  return std::abs(analytic - numeric) / denom;
}

double grad_check(const std::function<Tensor()>& fn, std::span<Tensor> inputs, double eps) {
  for (auto& t : inputs) {
    if (!t.requires_grad()) throw std::invalid_argument("grad_check: every input must track gradients");
    t.zero_grad();
  }
  std::vector<std::vector<double>> analytic;
  {
    Tape tape;
    Tensor loss = fn();
    if (loss.numel() != 1) throw ShapeError("grad_check: function must return a scalar");
    tape.backward(loss);
  }
  for (auto& t : inputs) analytic.emplace_back(t.grad().begin(), t.grad().end());

  auto evaluate = [&] {
    NoGradGuard guard;
    const double v = fn().item();
    if (!std::isfinite(v)) throw NonFiniteError("grad_check: non-finite function value");
    return v;
  };

  double worst = 0.0;
  for (std::size_t k = 0; k < inputs.size(); ++k) {
    auto values = inputs[k].mutable_data();
    for (std::size_t i = 0; i < values.size(); ++i) {
      const double saved = values[i];
      values[i] = saved + eps;
      const double up = evaluate();
      values[i] = saved - eps;
      const double down = evaluate();
      values[i] = saved;
      worst = std::max(worst, relative_error(analytic[k][i], (up - down) / (2.0 * eps)));
    }
  }
  return worst;
}

double grad_check(const std::function<Tensor(const Tensor&)>& fn, const Tensor& input, double eps) {
  Tensor leaf = input.detach();
  leaf.set_requires_grad(true);
  Tensor inputs[] = {leaf};
  return grad_check([&] { return fn(leaf); }, inputs, eps);
}

}  // namespace sgma
