#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <vector>

#include "siamav/tensor.hpp"

namespace siamav {

struct GradCheckResult {
  double max_rel_error = 0.0;
  std::size_t worst_index = 0;
  std::size_t checked = 0;
};

inline double grad_rel_error(double analytic, double numeric) {
  return std::abs(analytic - numeric) / std::max(1.0, std::abs(analytic));
}

// Compares backward() against central differences for every coordinate of x.
// Error per coordinate is |analytic - numeric| / max(1, |analytic|).
inline GradCheckResult finite_diff_check(const std::function<Tensor<double>(const Tensor<double>&)>& f,
                                         const Tensor<double>& x, double h = 1e-5) {
  Tensor<double> leaf(x.shape(), x.values(), true);
  auto loss = f(leaf);
  backward(loss);
  const std::vector<double> analytic(leaf.grad().begin(), leaf.grad().end());

  GradCheckResult r;
  std::vector<double> probe(x.values());
  for (std::size_t i = 0; i < probe.size(); ++i) {
    const double orig = probe[i];
    probe[i] = orig + h;
    const double up = f(Tensor<double>(x.shape(), probe)).item();
    probe[i] = orig - h;
    const double down = f(Tensor<double>(x.shape(), probe)).item();
    probe[i] = orig;
    const double err = grad_rel_error(analytic[i], (up - down) / (2.0 * h));
    if (err > r.max_rel_error) {
      r.max_rel_error = err;
      r.worst_index = i;
    }
    ++r.checked;
  }
  return r;
}

// Coordinate of a leaf tensor, for checks over a sample of model parameters.
struct LeafCoordinate {
  Tensor<double> leaf;
  std::size_t index;
};

// `analytic` builds the graph that backward() differentiates; `reference` is
// the scalar function probed by central differences. They differ only where the
// graph holds stop_gradient boundaries, whose outputs the reference must treat
// as constants. Both rebuild from the current leaf values on every call.
inline GradCheckResult finite_diff_check(const std::function<Tensor<double>()>& analytic,
                                         const std::function<Tensor<double>()>& reference,
                                         std::vector<LeafCoordinate> coords, double h = 1e-5) {
  for (auto& c : coords) c.leaf.zero_grad();
  backward(analytic());
  std::vector<double> grads;
  grads.reserve(coords.size());
  for (auto& c : coords) grads.push_back(c.leaf.grad()[c.index]);

  GradCheckResult r;
  for (std::size_t i = 0; i < coords.size(); ++i) {
    auto data = coords[i].leaf.mutable_data();
    const double orig = data[coords[i].index];
    data[coords[i].index] = orig + h;
    const double up = reference().item();
    data[coords[i].index] = orig - h;
    const double down = reference().item();
    data[coords[i].index] = orig;
    const double err = grad_rel_error(grads[i], (up - down) / (2.0 * h));
    if (err > r.max_rel_error) {
      r.max_rel_error = err;
      r.worst_index = i;
    }
    ++r.checked;
  }
  return r;
}

inline GradCheckResult finite_diff_check(const std::function<Tensor<double>()>& loss,
                                         std::vector<LeafCoordinate> coords, double h = 1e-5) {
  return finite_diff_check(loss, loss, std::move(coords), h);
}

}  // namespace siamav
