#pragma once

// Random conv stacks and a brute-force route scan that walks shapes and
// receptive fields on its own instead of going through resolve().

#include <algorithm>
#include <cstdint>
#include <random>
#include <set>
#include <utility>
#include <vector>

#include "kpn/arch.hpp"

namespace kpn::check {

struct ConvTrace {
  std::size_t ordinal;
  std::size_t height, width;
  double field;
};

inline std::vector<ConvTrace> trace_convs(const Architecture& arch) {
  std::vector<ConvTrace> out;
  std::size_t h = arch.input_shape[1], w = arch.input_shape[2], ordinal = 0;
  double field = 0, jump = 1;
  for (const auto& l : arch.layers) {
    const bool conv = l.kind == LayerKind::conv;
    const bool max_pool = l.kind == LayerKind::pool && l.pool == PoolKind::max;
    if (!conv && !max_pool) continue;
    h = (h + 2 * l.pad - l.kernel) / l.stride + 1;
    w = (w + 2 * l.pad - l.kernel) / l.stride + 1;
    field += jump * (static_cast<double>(l.kernel) - 1);
    jump *= static_cast<double>(l.stride);
    if (conv) out.push_back({++ordinal, h, w, field});
  }
  return out;
}

inline std::set<std::pair<std::size_t, std::size_t>> brute_force_routes(const Architecture& teacher,
                                                                        const Architecture& student, double beta) {
  std::set<std::pair<std::size_t, std::size_t>> out;
  for (const auto& t : trace_convs(teacher)) {
    for (const auto& s : trace_convs(student)) {
      if (t.height != s.height || t.width != s.width) continue;
      const double lo = (1 - beta) * t.field, hi = (1 + beta) * t.field;
      if (s.field + 1e-9 < lo || s.field - 1e-9 > hi) continue;
      out.insert({t.ordinal, s.ordinal});
    }
  }
  return out;
}

// 1..max_convs convs (kernel 1/3/5, stride 1/2) with optional BN, activation,
// 2x2 max-pools and shape-preserving residual adds on a square input.
inline Architecture random_conv_stack(std::mt19937_64& rng, std::size_t max_convs = 12, std::size_t input = 32) {
  std::uniform_int_distribution<std::size_t> count(1, max_convs);
  std::uniform_int_distribution<int> coin(0, 3);
  const std::size_t kernels[] = {1, 3, 5};
  Architecture arch{"random", {1, input, input}, {}};
  std::size_t extent = input, channels = 1;
  const std::size_t convs = count(rng);
  for (std::size_t i = 0; i < convs; ++i) {
    const int block_input = static_cast<int>(arch.layers.size()) - 1;
    const std::size_t k = kernels[std::uniform_int_distribution<int>(0, 2)(rng)];
    const std::size_t s = extent > 4 && coin(rng) == 0 ? 2 : 1;
    const std::size_t c = std::uniform_int_distribution<std::size_t>(1, 3)(rng) * 2;
    arch.layers.push_back(LayerSpec::conv(c, k, s));
    extent = (extent + 2 * (k / 2) - k) / s + 1;
    if (coin(rng) != 0) arch.layers.push_back(LayerSpec::batch_norm());
    if (coin(rng) != 0) arch.layers.push_back(LayerSpec::act(coin(rng) == 0 ? 0.1 : 0.0));
    if (s == 1 && c == channels && block_input >= 0 && coin(rng) == 0) {
      arch.layers.push_back(LayerSpec::residual_add(block_input));
    }
    channels = c;
    if (extent >= 8 && coin(rng) == 0) {
      arch.layers.push_back(LayerSpec::max_pool(2, 2));
      extent /= 2;
    }
  }
  return arch;
}

// Two-conv teacher and six-conv student on 28x28, built so that at beta 0.2
// exactly (1,3), (1,4) and (2,5) are admissible. Teacher fields: 2 (28x28),
// 6 (14x14). Student fields: 0, 0, 2, 2 at 28x28, 6 at 14x14 and 6 at 7x7
// (the last matches conv 2's field but not its shape).
struct RouteScenario {
  Architecture teacher, student;
};

inline RouteScenario hand_built_route_scenario() {
  using L = LayerSpec;
  Architecture teacher{"scenario-teacher", {1, 28, 28},
                       {L::conv(8, 3, 1), L::act(), L::conv(8, 5, 2), L::act(), L::global_avg_pool(), L::dense(10)}};
  Architecture student{"scenario-student",
                       {1, 28, 28},
                       {L::conv(4, 1, 1), L::conv(4, 1, 1), L::conv(4, 3, 1), L::batch_norm(), L::act(),
                        L::conv(4, 1, 1), L::conv(4, 5, 2), L::act(), L::conv(4, 1, 2), L::global_avg_pool(),
                        L::dense(10)}};
  return {teacher, student};
}

}  // namespace kpn::check
