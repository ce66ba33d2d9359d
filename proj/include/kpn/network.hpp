#pragma once

#include <cmath>
#include <cstdint>
#include <map>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "kpn/arch.hpp"
#include "kpn/ops.hpp"
#include "kpn/optim.hpp"

namespace kpn {

using Rng = std::mt19937_64;

// Draws weights uniformly in [-bound, bound].
template <typename Real>
Tensor<Real> uniform_tensor(Shape shape, Real bound, Rng& rng) {
  std::uniform_real_distribution<Real> dist(-bound, bound);
  std::vector<Real> values(shape_numel(shape));
  for (auto& v : values) v = dist(rng);
  return Tensor<Real>(std::move(shape), std::move(values));
}

// Forward-pass controls. Conv ordinals are 1-based.
template <typename Real>
struct ForwardSpec {
  Mode mode = Mode::eval;
  // Conv outputs (pre-normalization) to hand back.
  std::vector<std::size_t> capture;
  // Stop once this conv has run; 0 runs the whole network.
  std::size_t stop_after = 0;
  // Replace this conv's output with `substitute` for everything downstream.
  // Activations computed before it reach later layers only as constants, so
  // no gradient from downstream losses flows into the input side.
  std::size_t substitute_at = 0;
  Tensor<Real> substitute;
};

template <typename Real>
struct ForwardResult {
  Tensor<Real> output;
  std::map<std::size_t, Tensor<Real>> captured;
};

template <typename Real>
class Network {
 public:
  struct LayerState {
    std::optional<Parameter<Real>> weight, bias, gamma, beta, adapter;
    std::optional<BatchNormState<Real>> bn;
  };

  Network(Architecture arch, std::string prefix, std::uint64_t seed, Real weight_decay = 0)
      : arch_(std::move(arch)), prefix_(std::move(prefix)), resolved_(resolve(arch_)) {
    Rng rng(seed);
    layers_.resize(resolved_.size());
    for (std::size_t i = 0; i < resolved_.size(); ++i) {
      const auto& r = resolved_[i];
      auto& st = layers_[i];
      const std::string base = prefix_ + "." + std::to_string(i) + ".";
      switch (r.spec.kind) {
        case LayerKind::conv: {
          const std::size_t fan_in = r.in.channels * r.spec.kernel * r.spec.kernel;
          st.weight.emplace(base + "weight",
                            uniform_tensor<Real>({r.out.channels, r.in.channels, r.spec.kernel, r.spec.kernel},
                                                 static_cast<Real>(std::sqrt(6.0 / fan_in)), rng),
                            weight_decay);
          conv_layers_.push_back(i);
          break;
        }
        case LayerKind::bn:
          st.gamma.emplace(base + "gamma", Tensor<Real>({r.in.channels}, Real(1)), weight_decay);
          st.beta.emplace(base + "beta", Tensor<Real>({r.in.channels}, Real(0)), weight_decay);
          st.bn.emplace(r.in.channels);
          break;
        case LayerKind::dense: {
          const std::size_t fan_in = r.in.numel();
          st.weight.emplace(base + "weight",
                            uniform_tensor<Real>({fan_in, r.out.channels},
                                                 static_cast<Real>(1.0 / std::sqrt(fan_in)), rng),
                            weight_decay);
          st.bias.emplace(base + "bias", Tensor<Real>({r.out.channels}, Real(0)), weight_decay);
          break;
        }
        case LayerKind::residual_add:
          if (r.has_adapter) {
            st.adapter.emplace(base + "adapter",
                               uniform_tensor<Real>({r.out.channels, r.source.channels, 1, 1},
                                                    static_cast<Real>(std::sqrt(6.0 / r.source.channels)), rng),
                               weight_decay);
          }
          break;
        default:
          break;
      }
    }
  }

  Network(Network&&) noexcept = default;
  Network& operator=(Network&&) noexcept = default;
  Network(const Network&) = delete;
  Network& operator=(const Network&) = delete;

  // Deep copy with independent storage; optionally renamed.
  Network clone(std::optional<std::string> prefix = std::nullopt) const {
    Network copy(*this, prefix.value_or(prefix_));
    return copy;
  }

  const Architecture& architecture() const { return arch_; }
  const std::vector<ResolvedLayer>& resolved() const { return resolved_; }
  const std::string& prefix() const { return prefix_; }
  std::size_t conv_count() const { return conv_layers_.size(); }

  std::size_t conv_layer_index(std::size_t ordinal) const {
    if (ordinal == 0 || ordinal > conv_layers_.size()) {
      throw ConfigError(prefix_ + ": conv ordinal " + std::to_string(ordinal) + " out of range [1, " +
                        std::to_string(conv_layers_.size()) + "]");
    }
    return conv_layers_[ordinal - 1];
  }

  FeatureShape conv_output_shape(std::size_t ordinal) const {
    return resolved_[conv_layer_index(ordinal)].out;
  }

  const Parameter<Real>& conv_weight(std::size_t ordinal) const {
    return *layers_[conv_layer_index(ordinal)].weight;
  }

  std::vector<Parameter<Real>*> parameters() {
    std::vector<Parameter<Real>*> out;
    for (auto& st : layers_) {
      for (auto* p : {&st.weight, &st.bias, &st.gamma, &st.beta, &st.adapter}) {
        if (*p) out.push_back(&**p);
      }
    }
    return out;
  }

  std::vector<const Parameter<Real>*> parameters() const {
    std::vector<const Parameter<Real>*> out;
    for (const auto& st : layers_) {
      for (const auto* p : {&st.weight, &st.bias, &st.gamma, &st.beta, &st.adapter}) {
        if (*p) out.push_back(&**p);
      }
    }
    return out;
  }

  // Parameters owned by layers [first, last).
  std::vector<Parameter<Real>*> parameters_in(std::size_t first, std::size_t last) {
    std::vector<Parameter<Real>*> out;
    for (std::size_t i = first; i < last && i < layers_.size(); ++i) {
      auto& st = layers_[i];
      for (auto* p : {&st.weight, &st.bias, &st.gamma, &st.beta, &st.adapter}) {
        if (*p) out.push_back(&**p);
      }
    }
    return out;
  }

  std::vector<LayerState>& layers() { return layers_; }
  const std::vector<LayerState>& layers() const { return layers_; }

  void freeze() {
    for (auto* p : parameters()) p->freeze();
  }

  void set_weight_decay(Real decay) {
    for (auto* p : parameters()) p->weight_decay = decay;
  }

  Tensor<Real> forward(const Tensor<Real>& input, Mode mode) {
    ForwardSpec<Real> spec;
    spec.mode = mode;
    return forward(input, spec).output;
  }

  ForwardResult<Real> forward(const Tensor<Real>& input, const ForwardSpec<Real>& spec) {
    const auto& in_shape = arch_.input_shape;
    if (input.rank() != 4 || input.extent(1) != in_shape[0] || input.extent(2) != in_shape[1] ||
        input.extent(3) != in_shape[2]) {
      throw ShapeError(prefix_ + ": input " + shape_str(input.shape()) + " does not match Nx" +
                       std::to_string(in_shape[0]) + "x" + std::to_string(in_shape[1]) + "x" +
                       std::to_string(in_shape[2]));
    }
    const std::size_t sub_layer = spec.substitute_at ? conv_layer_index(spec.substitute_at) : 0;
    const std::size_t stop_layer = spec.stop_after ? conv_layer_index(spec.stop_after) : resolved_.size();

    ForwardResult<Real> result;
    std::vector<Tensor<Real>> outs(resolved_.size());
    std::map<std::size_t, Tensor<Real>> detached;
    // Residual sources from the input side are constants past a substitution.
    const auto source = [&](int src, std::size_t consumer) -> Tensor<Real> {
      if (src < 0) return input;
      const auto s = static_cast<std::size_t>(src);
      if (spec.substitute_at && consumer > sub_layer && s < sub_layer) {
        auto it = detached.find(s);
        if (it == detached.end()) it = detached.emplace(s, outs[s].detach()).first;
        return it->second;
      }
      return outs[s];
    };

    Tensor<Real> cur = input;
    for (std::size_t i = 0; i < resolved_.size(); ++i) {
      const auto& r = resolved_[i];
      auto& st = layers_[i];
      switch (r.spec.kind) {
        case LayerKind::conv:
          cur = conv2d(cur, st.weight->tensor, r.spec.stride, r.spec.pad);
          break;
        case LayerKind::bn:
          cur = batch_norm(cur, st.gamma->tensor, st.beta->tensor, *st.bn, spec.mode);
          break;
        case LayerKind::act:
          cur = leaky_relu(cur, static_cast<Real>(r.spec.slope));
          break;
        case LayerKind::pool:
          cur = r.spec.pool == PoolKind::global_avg ? global_avg_pool(cur)
                                                    : max_pool2d(cur, r.spec.kernel, r.spec.stride, r.spec.pad);
          break;
        case LayerKind::dense:
          if (cur.rank() != 2) cur = reshape(cur, {cur.extent(0), r.in.numel()});
          cur = dense(cur, st.weight->tensor, st.bias->tensor);
          break;
        case LayerKind::residual_add: {
          Tensor<Real> skip = source(*r.spec.residual_source, i);
          if (r.has_adapter) skip = conv2d(skip, st.adapter->tensor, r.adapter_stride, 0);
          cur = add(cur, skip);
          break;
        }
      }
      if (r.conv_ordinal) {
        for (auto c : spec.capture) {
          if (c == r.conv_ordinal) result.captured[c] = cur;
        }
      }
      if (spec.substitute_at && i == sub_layer) {
        if (spec.substitute.shape() != cur.shape()) {
          throw ShapeError(prefix_ + ": substitute " + shape_str(spec.substitute.shape()) +
                           " does not match conv output " + shape_str(cur.shape()));
        }
        cur = spec.substitute;
      }
      outs[i] = cur;
      if (i == stop_layer) break;
    }
    result.output = cur;
    return result;
  }

 private:
  Network(const Network& other, std::string prefix)
      : arch_(other.arch_), prefix_(std::move(prefix)), resolved_(other.resolved_),
        conv_layers_(other.conv_layers_) {
    layers_.resize(other.layers_.size());
    for (std::size_t i = 0; i < layers_.size(); ++i) {
      const auto& src = other.layers_[i];
      auto& dst = layers_[i];
      const auto copy = [&](const std::optional<Parameter<Real>>& from, std::optional<Parameter<Real>>& to) {
        if (!from) return;
        to = from->clone();
        const auto dot = to->name.find('.');
        to->name = prefix_ + (dot == std::string::npos ? "." + to->name : to->name.substr(dot));
      };
      copy(src.weight, dst.weight);
      copy(src.bias, dst.bias);
      copy(src.gamma, dst.gamma);
      copy(src.beta, dst.beta);
      copy(src.adapter, dst.adapter);
      dst.bn = src.bn;
    }
  }

  Architecture arch_;
  std::string prefix_;
  std::vector<ResolvedLayer> resolved_;
  std::vector<LayerState> layers_;
  std::vector<std::size_t> conv_layers_;
};

// FNV-1a over every parameter value and batch-norm running statistic.
template <typename Real>
std::uint64_t parameter_hash(const Network<Real>& net) {
  std::uint64_t h = 1469598103934665603ULL;
  const auto mix = [&](std::span<const Real> values) {
    const auto* bytes = reinterpret_cast<const unsigned char*>(values.data());
    for (std::size_t i = 0; i < values.size_bytes(); ++i) h = (h ^ bytes[i]) * 1099511628211ULL;
  };
  for (const auto* p : net.parameters()) mix(p->tensor.values());
  for (const auto& st : net.layers()) {
    if (!st.bn) continue;
    mix(st.bn->running_mean);
    mix(st.bn->running_var);
  }
  return h;
}

}  // namespace kpn
