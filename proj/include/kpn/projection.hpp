#pragma once

#include <cmath>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "kpn/network.hpp"

namespace kpn {

// Where the relaxation mask h(.) is evaluated. The teacher feature has
// teacher channels while the penalized difference has student channels, so
// the mask needs a student-shaped source:
//   projected     h applied to the projected feature r = P mu itself
//   teacher_mean  per student channel, the |P|-weighted mean of h over the
//                 teacher channels at each position
enum class MaskSource { projected, teacher_mean };

inline std::string to_string(MaskSource m) {
  return m == MaskSource::projected ? "projected" : "teacher-mean";
}

inline MaskSource parse_mask_source(const std::string& s) {
  if (s == "projected") return MaskSource::projected;
  if (s == "teacher-mean") return MaskSource::teacher_mean;
  throw ConfigError("unknown mask source '" + s + "' (expected projected|teacher-mean)");
}

inline void validate_eta(double eta) {
  if (!(eta > 0 && eta <= 1)) throw ConfigError("eta must lie in (0, 1], got " + std::to_string(eta));
}

// Learned 1x1 convolution from teacher channels to student channels. No bias,
// no activation.
template <typename Real>
struct ProjectionLayer {
  Parameter<Real> weight;  // student_channels x teacher_channels x 1 x 1

  ProjectionLayer(std::size_t teacher_channels, std::size_t student_channels, std::uint64_t seed,
                  Real weight_decay = 0) {
    Rng rng(seed);
    weight = Parameter<Real>("projection.weight",
                             uniform_tensor<Real>({student_channels, teacher_channels, 1, 1},
                                                  static_cast<Real>(std::sqrt(3.0 / teacher_channels)), rng),
                             weight_decay);
  }

  explicit ProjectionLayer(Parameter<Real> w) : weight(std::move(w)) {
    if (weight.tensor.rank() != 4 || weight.tensor.extent(2) != 1 || weight.tensor.extent(3) != 1) {
      throw ShapeError("projection weight must be OxIx1x1, got " + shape_str(weight.tensor.shape()));
    }
  }

  std::size_t teacher_channels() const { return weight.tensor.extent(1); }
  std::size_t student_channels() const { return weight.tensor.extent(0); }

  ProjectionLayer clone() const { return ProjectionLayer(weight.clone()); }
};

// r = P . mu as a pure 1x1 convolution.
template <typename Real>
Tensor<Real> project(const Tensor<Real>& teacher_feature, const ProjectionLayer<Real>& layer) {
  if (teacher_feature.rank() != 4 || teacher_feature.extent(1) != layer.teacher_channels()) {
    throw ShapeError("project: teacher feature " + shape_str(teacher_feature.shape()) +
                     " does not have " + std::to_string(layer.teacher_channels()) + " channels");
  }
  return conv2d(teacher_feature, layer.weight.tensor, 1, 0);
}

// h(x) = 1 for x >= 0, eta otherwise.
template <typename Real>
std::vector<Real> relax_mask(std::span<const Real> source, Real eta) {
  std::vector<Real> mask(source.size());
  for (std::size_t i = 0; i < source.size(); ++i) mask[i] = source[i] >= 0 ? Real(1) : eta;
  return mask;
}

template <typename Real>
std::vector<Real> teacher_mean_mask(const Tensor<Real>& teacher_feature, const ProjectionLayer<Real>& layer,
                                    Real eta) {
  const std::size_t n = teacher_feature.extent(0), tc = layer.teacher_channels(),
                    sc = layer.student_channels();
  const std::size_t plane = teacher_feature.extent(2) * teacher_feature.extent(3);
  const auto h = relax_mask(teacher_feature.values(), eta);
  const auto w = layer.weight.tensor.values();
  std::vector<Real> mask(n * sc * plane);
  for (std::size_t o = 0; o < sc; ++o) {
    Real norm = 0;
    for (std::size_t c = 0; c < tc; ++c) norm += std::abs(w[o * tc + c]);
    for (std::size_t s = 0; s < n; ++s) {
      for (std::size_t p = 0; p < plane; ++p) {
        Real acc = 0;
        for (std::size_t c = 0; c < tc; ++c) {
          const Real weight = norm > 0 ? std::abs(w[o * tc + c]) / norm : Real(1) / static_cast<Real>(tc);
          acc += weight * h[(s * tc + c) * plane + p];
        }
        mask[(s * sc + o) * plane + p] = acc;
      }
    }
  }
  return mask;
}

// Relaxed L1 between the projected teacher feature and the injection-layer
// output, averaged over every element. The mask is a constant.
template <typename Real>
Tensor<Real> kp_loss(std::span<const Real> mask, const Tensor<Real>& projected, const Tensor<Real>& injected) {
  return weighted_abs_mean(mask, projected, injected);
}

template <typename Real>
Tensor<Real> kp_loss(const Tensor<Real>& mask_source, const Tensor<Real>& projected,
                     const Tensor<Real>& injected, Real eta) {
  validate_eta(eta);
  if (mask_source.shape() != projected.shape()) {
    throw ShapeError("kp_loss: mask source " + shape_str(mask_source.shape()) + " vs projected " +
                     shape_str(projected.shape()));
  }
  const auto mask = relax_mask(mask_source.values(), eta);
  return weighted_abs_mean<Real>(mask, projected, injected);
}

template <typename Real>
std::vector<Real> kp_mask(MaskSource source, const Tensor<Real>& teacher_feature, const Tensor<Real>& projected,
                          const ProjectionLayer<Real>& layer, Real eta) {
  validate_eta(eta);
  return source == MaskSource::projected ? relax_mask(projected.values(), eta)
                                         : teacher_mean_mask(teacher_feature, layer, eta);
}

// lambda * kp + task + l2, with each addend kept for logging.
template <typename Real>
struct JointLoss {
  Tensor<Real> total;
  double lambda = 0, kp = 0, task = 0, l2 = 0;
};

template <typename Real>
JointLoss<Real> joint_loss(const Tensor<Real>& kp, const Tensor<Real>& task, Real lambda,
                           const std::optional<Tensor<Real>>& l2 = std::nullopt) {
  if (lambda < 0) throw ConfigError("lambda must be nonnegative");
  JointLoss<Real> out;
  out.lambda = lambda;
  out.kp = kp.item();
  out.task = task.item();
  out.total = add(scale(kp, lambda), task);
  if (l2) {
    out.l2 = l2->item();
    out.total = add(out.total, *l2);
  }
  return out;
}

}  // namespace kpn
