#pragma once

// Hand-evaluated receptive fields: S accumulates jump * (F - 1) over convs
// and max-pools, jump multiplies by each stride.

#include <string>
#include <vector>

#include "kpn/arch.hpp"

namespace kpn::check {

struct FieldCase {
  std::string label;
  Architecture arch;
  std::int64_t expected;  // field after the last layer
};

inline std::vector<FieldCase> receptive_field_cases() {
  using L = LayerSpec;
  const auto stack = [](std::vector<LayerSpec> layers) { return Architecture{"rf", {1, 64, 64}, std::move(layers)}; };
  const auto plain = [&](std::size_t n) {
    std::vector<LayerSpec> layers;
    for (std::size_t i = 0; i < n; ++i) {
      layers.push_back(L::conv(4, 3, 1));
      layers.push_back(L::act());
    }
    return stack(layers);
  };
  return {
      {"two 3x3 stride 1", stack({L::conv(4, 3, 1), L::conv(4, 3, 1)}), 4},             // 2 + 2
      {"3x3 s2 then 3x3 s1", stack({L::conv(4, 3, 2), L::conv(4, 3, 1)}), 6},           // 2 + 2*2
      {"single 1x1", stack({L::conv(4, 1, 1)}), 0},                                     // 0
      {"five 3x3 s1 (2L)", plain(5), 10},                                               // 2 * 5
      {"twelve 3x3 s1 (2L)", plain(12), 24},                                            // 2 * 12
      {"5x5 then 3x3", stack({L::conv(4, 5, 1), L::batch_norm(), L::conv(4, 3, 1)}), 6},  // 4 + 2
      {"three 3x3 s2", stack({L::conv(4, 3, 2), L::conv(4, 3, 2), L::conv(4, 3, 2)}), 14},  // 2 + 4 + 8
      {"conv, maxpool 2/2, conv", stack({L::conv(4, 3, 1), L::max_pool(2, 2), L::conv(4, 3, 1)}), 7},  // 2 + 1 + 4
      {"7x7 s2, maxpool 3/2, 3x3", stack({L::conv(4, 7, 2, 3), L::max_pool(3, 2, 1), L::conv(4, 3, 1)}), 18},  // 6 + 4 + 8
      {"1x1 s2 then 3x3", stack({L::conv(4, 1, 2), L::conv(4, 3, 1)}), 4},                 // 0 + 2*2
      {"global pool adds nothing",
       stack({L::conv(4, 3, 1), L::batch_norm(), L::act(), L::conv(4, 3, 1), L::global_avg_pool(), L::dense(3)}), 4},
  };
}

}  // namespace kpn::check
