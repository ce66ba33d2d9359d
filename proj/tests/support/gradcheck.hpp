#pragma once

// Central finite-difference checks for every differentiable op.
//
// Each check reduces the op's output to a scalar with a fixed random linear
// functional L(y) = sum_i c_i y_i. The numerical side evaluates L in double
// from the op's raw output values, so rounding of the reduction itself does
// not pollute the difference quotient. Inputs are drawn away from kinks
// (activation at 0, pooling ties, |.| at 0) by more than the step size.
//
// 32-bit ops round their outputs at ~6e-8 relative, which swamps a plain
// central difference at small steps; for them the quotient is Richardson
// extrapolated, (4 D(h/2) - D(h)) / 3, so a larger step can be used.

#include <algorithm>
#include <cmath>
#include <functional>
#include <random>
#include <string>
#include <vector>

#include "kpn/kpn.hpp"

namespace kpn::check {

template <typename Real>
struct GradCheckSettings {
  double step;
  double tolerance;
  bool extrapolate;
};

template <typename Real>
GradCheckSettings<Real> default_settings() {
  if constexpr (sizeof(Real) == 4) {
    return {4e-2, 1e-3, true};
  } else {
    return {1e-6, 1e-5, false};
  }
}

// L(y) = sum c_i y_i as a graph op, so backward() can seed it.
template <typename Real>
Tensor<Real> linear_functional(const Tensor<Real>& y, const std::vector<double>& c) {
  double total = 0;
  for (std::size_t i = 0; i < c.size(); ++i) total += c[i] * static_cast<double>(y.values()[i]);
  return make_result<Real>({1}, {static_cast<Real>(total)}, {y}, [c](TensorNode<Real>& self) {
    auto& p = *self.parents[0];
    auto& g = p.grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += static_cast<Real>(c[i]) * self.grad[0];
  });
}

template <typename Real>
double functional_value(const Tensor<Real>& y, const std::vector<double>& c) {
  double total = 0;
  for (std::size_t i = 0; i < c.size(); ++i) total += c[i] * static_cast<double>(y.values()[i]);
  return total;
}

// |a - n| / max(|a|, |n|, 0.1): relative where the gradient is appreciable,
// absolute below 0.1, where output rounding dominates a 32-bit quotient.
inline double relative_error(double analytic, double numeric) {
  return std::abs(analytic - numeric) / std::max({std::abs(analytic), std::abs(numeric), 1e-1});
}

// Max relative error over every element of every input.
template <typename Real>
double check_gradients(const std::function<Tensor<Real>(const std::vector<Tensor<Real>>&)>& op,
                       std::vector<Tensor<Real>> inputs, std::mt19937_64& rng, double step,
                       bool extrapolate = false) {
  for (auto& t : inputs) t.set_requires_grad(true);
  const auto y = op(inputs);
  std::normal_distribution<double> normal(0.0, 1.0);
  std::vector<double> c(y.numel());
  for (auto& v : c) v = normal(rng);
  backward(linear_functional(y, c));

  double worst = 0;
  for (std::size_t k = 0; k < inputs.size(); ++k) {
    const std::vector<Real> analytic(inputs[k].grad().begin(), inputs[k].grad().end());
    for (std::size_t i = 0; i < inputs[k].numel(); ++i) {
      auto values = inputs[k].mutable_values();
      const Real orig = values[i];
      const auto quotient = [&](double h) {
        const Real up = orig + static_cast<Real>(h);
        const Real down = orig - static_cast<Real>(h);
        values[i] = up;
        const double fp = functional_value(op(inputs), c);
        values[i] = down;
        const double fm = functional_value(op(inputs), c);
        values[i] = orig;
        return (fp - fm) / (static_cast<double>(up) - static_cast<double>(down));
      };
      const double numeric = extrapolate ? (4 * quotient(step / 2) - quotient(step)) / 3 : quotient(step);
      worst = std::max(worst, relative_error(static_cast<double>(analytic[i]), numeric));
    }
  }
  return worst;
}

struct OpReport {
  std::string op;
  std::size_t instances = 0;
  double max_error = 0;
};

template <typename Real>
Tensor<Real> random_tensor(const Shape& shape, std::mt19937_64& rng, double lo = -1.0, double hi = 1.0) {
  std::uniform_real_distribution<double> u(lo, hi);
  std::vector<Real> v(shape_numel(shape));
  for (auto& x : v) x = static_cast<Real>(u(rng));
  return Tensor<Real>(shape, std::move(v));
}

// Values with |x| >= margin, random sign.
template <typename Real>
Tensor<Real> away_from_zero(const Shape& shape, std::mt19937_64& rng, double margin) {
  std::uniform_real_distribution<double> u(margin, 1.0);
  std::bernoulli_distribution sign(0.5);
  std::vector<Real> v(shape_numel(shape));
  for (auto& x : v) x = static_cast<Real>(sign(rng) ? u(rng) : -u(rng));
  return Tensor<Real>(shape, std::move(v));
}

// Distinct values spaced by `gap`, shuffled: no pooling window has a near tie.
template <typename Real>
Tensor<Real> spaced_values(const Shape& shape, std::mt19937_64& rng, double gap) {
  std::vector<Real> v(shape_numel(shape));
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = static_cast<Real>(gap * (static_cast<double>(i) - v.size() / 2.0));
  std::shuffle(v.begin(), v.end(), rng);
  return Tensor<Real>(shape, std::move(v));
}

template <typename Real>
std::vector<OpReport> run_gradient_suite(std::uint64_t seed, std::size_t instances) {
  using Inputs = std::vector<Tensor<Real>>;
  const auto settings = default_settings<Real>();
  const double h = settings.step;
  const bool ex = settings.extrapolate;
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<std::size_t> dim(1, 3);
  std::vector<OpReport> reports;

  const auto run = [&](const std::string& name, const auto& body) {
    OpReport r{name, instances, 0.0};
    for (std::size_t t = 0; t < instances; ++t) r.max_error = std::max(r.max_error, body());
    reports.push_back(r);
  };

  run("conv2d", [&] {
    const std::size_t n = dim(rng), cin = dim(rng), cout = dim(rng);
    const std::size_t k = std::uniform_int_distribution<std::size_t>(1, 3)(rng);
    const std::size_t stride = std::uniform_int_distribution<std::size_t>(1, 2)(rng);
    const std::size_t pad = std::uniform_int_distribution<std::size_t>(0, k / 2)(rng);
    const std::size_t hw = std::uniform_int_distribution<std::size_t>(k, 6)(rng);
    return check_gradients<Real>(
        [=](const Inputs& in) { return conv2d(in[0], in[1], stride, pad); },
        {random_tensor<Real>({n, cin, hw, hw}, rng), random_tensor<Real>({cout, cin, k, k}, rng)}, rng, h, ex);
  });

  run("batch_norm.train", [&] {
    const std::size_t n = dim(rng) + 1, c = dim(rng);
    const bool spatial = std::bernoulli_distribution(0.5)(rng);
    const Shape shape = spatial ? Shape{n, c, 3, 2} : Shape{n + 2, c};
    BatchNormState<Real> st(c);
    return check_gradients<Real>(
        [&st](const Inputs& in) { return batch_norm(in[0], in[1], in[2], st, Mode::train); },
        {random_tensor<Real>(shape, rng), random_tensor<Real>({c}, rng, 0.5, 1.5), random_tensor<Real>({c}, rng)},
        rng, h, ex);
  });

  run("batch_norm.eval", [&] {
    const std::size_t n = dim(rng), c = dim(rng);
    BatchNormState<Real> st(c);
    for (std::size_t i = 0; i < c; ++i) {
      st.running_mean[i] = static_cast<Real>(0.3 * static_cast<double>(i));
      st.running_var[i] = static_cast<Real>(0.5 + static_cast<double>(i));
    }
    return check_gradients<Real>(
        [&st](const Inputs& in) { return batch_norm(in[0], in[1], in[2], st, Mode::eval); },
        {random_tensor<Real>({n, c, 2, 3}, rng), random_tensor<Real>({c}, rng), random_tensor<Real>({c}, rng)}, rng,
        h, ex);
  });

  run("leaky_relu", [&] {
    const Real slope = static_cast<Real>(std::uniform_real_distribution<double>(0.0, 0.5)(rng));
    return check_gradients<Real>([slope](const Inputs& in) { return leaky_relu(in[0], slope); },
                                 {away_from_zero<Real>({dim(rng), dim(rng), 3, 3}, rng, 10 * h)}, rng, h, ex);
  });

  run("relu", [&] {
    return check_gradients<Real>([](const Inputs& in) { return relu(in[0]); },
                                 {away_from_zero<Real>({dim(rng), dim(rng), 2, 4}, rng, 10 * h)}, rng, h, ex);
  });

  run("max_pool2d", [&] {
    const std::size_t k = std::uniform_int_distribution<std::size_t>(2, 3)(rng);
    const std::size_t stride = std::uniform_int_distribution<std::size_t>(1, k)(rng);
    const std::size_t pad = std::uniform_int_distribution<std::size_t>(0, k / 2)(rng);
    const std::size_t hw = std::uniform_int_distribution<std::size_t>(k, 6)(rng);
    return check_gradients<Real>([=](const Inputs& in) { return max_pool2d(in[0], k, stride, pad); },
                                 {spaced_values<Real>({dim(rng), dim(rng), hw, hw}, rng, 10 * h)}, rng, h, ex);
  });

  run("global_avg_pool", [&] {
    return check_gradients<Real>([](const Inputs& in) { return global_avg_pool(in[0]); },
                                 {random_tensor<Real>({dim(rng), dim(rng), dim(rng) + 1, dim(rng)}, rng)}, rng, h, ex);
  });

  run("dense", [&] {
    const std::size_t n = dim(rng), d = dim(rng) + 1, k = dim(rng) + 1;
    return check_gradients<Real>(
        [](const Inputs& in) { return dense(in[0], in[1], in[2]); },
        {random_tensor<Real>({n, d}, rng), random_tensor<Real>({d, k}, rng), random_tensor<Real>({k}, rng)}, rng, h, ex);
  });

  run("softmax_cross_entropy", [&] {
    const std::size_t n = dim(rng), k = dim(rng) + 1;
    std::vector<int> labels(n);
    for (auto& l : labels) l = static_cast<int>(std::uniform_int_distribution<std::size_t>(0, k - 1)(rng));
    return check_gradients<Real>(
        [labels](const Inputs& in) { return softmax_cross_entropy(in[0], std::span<const int>(labels)); },
        {random_tensor<Real>({n, k}, rng, -2.0, 2.0)}, rng, h, ex);
  });

  run("add", [&] {
    const Shape s{dim(rng), dim(rng), 2, 2};
    return check_gradients<Real>([](const Inputs& in) { return add(in[0], in[1]); },
                                 {random_tensor<Real>(s, rng), random_tensor<Real>(s, rng)}, rng, h, ex);
  });

  run("scale", [&] {
    const Real f = static_cast<Real>(std::uniform_real_distribution<double>(-2.0, 2.0)(rng));
    return check_gradients<Real>([f](const Inputs& in) { return scale(in[0], f); },
                                 {random_tensor<Real>({dim(rng), dim(rng)}, rng)}, rng, h, ex);
  });

  run("sum_squares", [&] {
    return check_gradients<Real>([](const Inputs& in) { return sum_squares(in[0]); },
                                 {random_tensor<Real>({dim(rng), dim(rng), 2}, rng)}, rng, h, ex);
  });

  run("reshape", [&] {
    const std::size_t a = dim(rng), b = dim(rng);
    return check_gradients<Real>([=](const Inputs& in) { return reshape(in[0], Shape{a * b, 4}); },
                                 {random_tensor<Real>({a, b, 2, 2}, rng)}, rng, h, ex);
  });

  run("weighted_abs_mean", [&] {
    const Shape s{dim(rng), dim(rng), 2, 2};
    const auto a = random_tensor<Real>(s, rng);
    // b = a + offset with |offset| well above the step: no element sits on the kink.
    const auto offset = away_from_zero<Real>(s, rng, 10 * h);
    std::vector<Real> bv(a.numel());
    for (std::size_t i = 0; i < bv.size(); ++i) bv[i] = a.values()[i] + offset.values()[i];
    std::vector<Real> w(a.numel());
    for (auto& x : w) x = static_cast<Real>(std::uniform_real_distribution<double>(0.25, 1.0)(rng));
    return check_gradients<Real>([w](const Inputs& in) { return weighted_abs_mean<Real>(w, in[0], in[1]); },
                                 {a, Tensor<Real>(s, bv)}, rng, h, ex);
  });

  run("project", [&] {
    const std::size_t tc = dim(rng) + 1, sc = dim(rng);
    ProjectionLayer<Real> layer(tc, sc, rng());
    return check_gradients<Real>(
        [&layer](const Inputs& in) {
          layer.weight.tensor = in[1];
          return project(in[0], layer);
        },
        {random_tensor<Real>({dim(rng), tc, 3, 3}, rng), random_tensor<Real>({sc, tc, 1, 1}, rng)}, rng, h, ex);
  });

  return reports;
}

}  // namespace kpn::check
