#pragma once

#include <algorithm>
#include <array>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "kpn/errors.hpp"

namespace kpn {

enum class LayerKind { conv, bn, act, pool, dense, residual_add };
enum class PoolKind { max, global_avg };

// One entry of a flat layer list. Every layer consumes the output of the
// layer before it; residual_add additionally adds the output of
// `residual_source` (-1 denotes the network input). Fields that a kind does
// not use keep their defaults.
struct LayerSpec {
  LayerKind kind = LayerKind::conv;
  std::size_t channels = 0;  // conv / dense output width
  std::size_t kernel = 1;
  std::size_t stride = 1;
  std::size_t pad = 0;
  std::optional<int> residual_source;
  PoolKind pool = PoolKind::max;
  double slope = 0;  // act: 0 is ReLU

  bool operator==(const LayerSpec&) const = default;

  static LayerSpec conv(std::size_t out, std::size_t k, std::size_t s = 1,
                        std::optional<std::size_t> p = std::nullopt) {
    LayerSpec l;
    l.kind = LayerKind::conv;
    l.channels = out;
    l.kernel = k;
    l.stride = s;
    l.pad = p.value_or(k / 2);
    return l;
  }
  static LayerSpec batch_norm() {
    LayerSpec l;
    l.kind = LayerKind::bn;
    return l;
  }
  static LayerSpec act(double slope = 0) {
    LayerSpec l;
    l.kind = LayerKind::act;
    l.slope = slope;
    return l;
  }
  static LayerSpec max_pool(std::size_t k, std::size_t s, std::size_t p = 0) {
    LayerSpec l;
    l.kind = LayerKind::pool;
    l.pool = PoolKind::max;
    l.kernel = k;
    l.stride = s;
    l.pad = p;
    return l;
  }
  static LayerSpec global_avg_pool() {
    LayerSpec l;
    l.kind = LayerKind::pool;
    l.pool = PoolKind::global_avg;
    return l;
  }
  static LayerSpec dense(std::size_t out) {
    LayerSpec l;
    l.kind = LayerKind::dense;
    l.channels = out;
    return l;
  }
  static LayerSpec residual_add(int source) {
    LayerSpec l;
    l.kind = LayerKind::residual_add;
    l.residual_source = source;
    return l;
  }
};

struct Architecture {
  std::string name;
  std::array<std::size_t, 3> input_shape{1, 28, 28};  // C, H, W
  std::vector<LayerSpec> layers;

  bool operator==(const Architecture&) const = default;
};

// Feature map extents between layers. `flat` marks NxC tensors produced by
// global pooling or dense layers.
struct FeatureShape {
  std::size_t channels = 0, height = 1, width = 1;
  bool flat = false;

  std::size_t numel() const { return channels * height * width; }
  bool operator==(const FeatureShape&) const = default;
};

struct ResolvedLayer {
  LayerSpec spec;
  FeatureShape in, out;
  std::size_t conv_ordinal = 0;  // 1-based among conv layers, 0 otherwise
  // residual_add only: a 1x1 conv mapping the source onto `in` when they differ.
  bool has_adapter = false;
  std::size_t adapter_stride = 1;
  FeatureShape source;
};

inline std::string to_string(LayerKind kind) {
  switch (kind) {
    case LayerKind::conv: return "conv";
    case LayerKind::bn: return "bn";
    case LayerKind::act: return "act";
    case LayerKind::pool: return "pool";
    case LayerKind::dense: return "dense";
    case LayerKind::residual_add: return "residual-add";
  }
  return "?";
}

namespace detail {

inline std::size_t out_extent(std::size_t in, std::size_t k, std::size_t s, std::size_t p,
                              std::size_t layer) {
  const long span = static_cast<long>(in) + 2 * static_cast<long>(p) - static_cast<long>(k);
  if (s == 0 || span < 0) {
    throw ConfigError("layer " + std::to_string(layer) + ": kernel " + std::to_string(k) +
                      " with pad " + std::to_string(p) + " and stride " + std::to_string(s) +
                      " gives no output on extent " + std::to_string(in));
  }
  return static_cast<std::size_t>(span) / s + 1;
}

}  // namespace detail

// Propagates shapes through the layer list. Throws ConfigError/ShapeError on
// anything that cannot be built.
inline std::vector<ResolvedLayer> resolve(const Architecture& arch) {
  std::vector<ResolvedLayer> out;
  out.reserve(arch.layers.size());
  FeatureShape input{arch.input_shape[0], arch.input_shape[1], arch.input_shape[2], false};
  if (input.channels == 0 || input.height == 0 || input.width == 0) {
    throw ConfigError("architecture '" + arch.name + "' has an empty input shape");
  }
  FeatureShape cur = input;
  std::size_t conv_count = 0;
  for (std::size_t i = 0; i < arch.layers.size(); ++i) {
    const LayerSpec& spec = arch.layers[i];
    ResolvedLayer r;
    r.spec = spec;
    r.in = cur;
    const auto need_map = [&](const char* what) {
      if (cur.flat) {
        throw ShapeError("layer " + std::to_string(i) + " (" + what +
                         ") needs a spatial feature map but gets a flat vector");
      }
    };
    switch (spec.kind) {
      case LayerKind::conv:
        need_map("conv");
        if (spec.channels == 0 || spec.kernel == 0) {
          throw ConfigError("layer " + std::to_string(i) + ": conv needs positive channels and kernel");
        }
        r.out = {spec.channels, detail::out_extent(cur.height, spec.kernel, spec.stride, spec.pad, i),
                 detail::out_extent(cur.width, spec.kernel, spec.stride, spec.pad, i), false};
        r.conv_ordinal = ++conv_count;
        break;
      case LayerKind::bn:
        r.out = cur;
        break;
      case LayerKind::act:
        if (!(spec.slope >= 0 && spec.slope <= 1)) {
          throw ConfigError("layer " + std::to_string(i) + ": activation slope must lie in [0, 1]");
        }
        r.out = cur;
        break;
      case LayerKind::pool:
        need_map("pool");
        if (spec.pool == PoolKind::global_avg) {
          r.out = {cur.channels, 1, 1, true};
        } else {
          if (spec.kernel == 0) throw ConfigError("layer " + std::to_string(i) + ": pool kernel must be positive");
          r.out = {cur.channels, detail::out_extent(cur.height, spec.kernel, spec.stride, spec.pad, i),
                   detail::out_extent(cur.width, spec.kernel, spec.stride, spec.pad, i), false};
        }
        break;
      case LayerKind::dense:
        if (spec.channels == 0) throw ConfigError("layer " + std::to_string(i) + ": dense needs positive width");
        r.out = {spec.channels, 1, 1, true};
        break;
      case LayerKind::residual_add: {
        if (!spec.residual_source || *spec.residual_source < -1 ||
            *spec.residual_source >= static_cast<int>(i)) {
          throw ConfigError("layer " + std::to_string(i) +
                            ": residual_source must reference an earlier layer or -1");
        }
        const int src = *spec.residual_source;
        r.source = src < 0 ? input : out[static_cast<std::size_t>(src)].out;
        r.out = cur;
        if (r.source != cur) {
          if (r.source.flat || cur.flat) {
            throw ShapeError("layer " + std::to_string(i) + ": cannot adapt flat residual source");
          }
          std::size_t stride = 0;
          for (std::size_t s = 1; s <= r.source.height; ++s) {
            if ((r.source.height - 1) / s + 1 == cur.height &&
                (r.source.width - 1) / s + 1 == cur.width) {
              stride = s;
              break;
            }
          }
          if (stride == 0) {
            throw ShapeError("layer " + std::to_string(i) + ": residual source " +
                             std::to_string(r.source.height) + "x" + std::to_string(r.source.width) +
                             " cannot be strided onto " + std::to_string(cur.height) + "x" +
                             std::to_string(cur.width));
          }
          r.has_adapter = true;
          r.adapter_stride = stride;
        }
        break;
      }
    }
    cur = r.out;
    out.push_back(r);
  }
  return out;
}

// Number of conv layers; residual adapters are not layers of their own.
inline std::size_t conv_layer_count(const Architecture& arch) {
  std::size_t n = 0;
  for (const auto& l : arch.layers) n += l.kind == LayerKind::conv;
  return n;
}

// ---------------------------------------------------------------------------
// Complexity

struct LayerCost {
  std::size_t index = 0;
  LayerKind kind = LayerKind::conv;
  std::uint64_t multiply_adds = 0;
  std::uint64_t params = 0;
};

struct ComplexityReport {
  std::vector<LayerCost> layers;
  std::uint64_t total_multiply_adds = 0;
  std::uint64_t total_params = 0;
};

// Convolution cost is C_in * H_out * W_out * C_out * K^2 per sample; dense is
// D * K. Bias adds, normalization and activations are not counted as
// multiply-adds; batch-norm scale/shift and dense bias do count as parameters.
inline ComplexityReport count_complexity(const Architecture& arch) {
  ComplexityReport report;
  const auto resolved = resolve(arch);
  for (std::size_t i = 0; i < resolved.size(); ++i) {
    const auto& r = resolved[i];
    LayerCost cost{i, r.spec.kind, 0, 0};
    const std::uint64_t k2 = static_cast<std::uint64_t>(r.spec.kernel) * r.spec.kernel;
    switch (r.spec.kind) {
      case LayerKind::conv:
        cost.params = r.in.channels * r.out.channels * k2;
        cost.multiply_adds = cost.params * r.out.height * r.out.width;
        break;
      case LayerKind::bn:
        cost.params = 2 * static_cast<std::uint64_t>(r.in.channels);
        break;
      case LayerKind::dense:
        cost.multiply_adds = static_cast<std::uint64_t>(r.in.numel()) * r.out.channels;
        cost.params = cost.multiply_adds + r.out.channels;
        break;
      case LayerKind::residual_add:
        if (r.has_adapter) {
          cost.params = static_cast<std::uint64_t>(r.source.channels) * r.out.channels;
          cost.multiply_adds = cost.params * r.out.height * r.out.width;
        }
        break;
      default:
        break;
    }
    report.total_multiply_adds += cost.multiply_adds;
    report.total_params += cost.params;
    report.layers.push_back(cost);
  }
  return report;
}

// ---------------------------------------------------------------------------
// Bottleneck blocks

enum class BottleneckType { A, B };

// Type A squeezes C -> X with a 1x1 conv then expands X -> C' with a KxK conv.
// Type B adds a trailing 1x1: C -> X (1x1), X -> X (KxK), X -> C' (1x1).
struct BottleneckSpec {
  BottleneckType type = BottleneckType::A;
  std::size_t in_channels = 0;   // C
  std::size_t squeezed = 0;      // X
  std::size_t out_channels = 0;  // C'
  std::size_t kernel = 3;        // K
  std::size_t stride = 1;        // applied on the KxK conv

  double width_multiplier() const {
    return static_cast<double>(squeezed) / static_cast<double>(in_channels);
  }
};

inline void validate(const BottleneckSpec& b) {
  if (b.in_channels == 0 || b.kernel == 0 || b.stride == 0) {
    throw ConfigError("bottleneck needs positive C, K and stride");
  }
  if (b.squeezed < 1 || b.squeezed > b.in_channels) {
    throw ConfigError("invalid squeeze: X=" + std::to_string(b.squeezed) + " must lie in [1, C=" +
                      std::to_string(b.in_channels) + "]");
  }
  if (b.out_channels < b.in_channels || b.out_channels > 2 * b.in_channels) {
    throw ConfigError("bottleneck output C'=" + std::to_string(b.out_channels) +
                      " must lie in [C, 2C] for C=" + std::to_string(b.in_channels));
  }
}

// conv + bn + act for every conv in the block.
inline std::vector<LayerSpec> build_bottleneck(const BottleneckSpec& b, double slope = 0) {
  validate(b);
  std::vector<LayerSpec> layers;
  const auto unit = [&](LayerSpec conv) {
    layers.push_back(conv);
    layers.push_back(LayerSpec::batch_norm());
    layers.push_back(LayerSpec::act(slope));
  };
  unit(LayerSpec::conv(b.squeezed, 1));
  if (b.type == BottleneckType::A) {
    unit(LayerSpec::conv(b.out_channels, b.kernel, b.stride));
  } else {
    unit(LayerSpec::conv(b.squeezed, b.kernel, b.stride));
    unit(LayerSpec::conv(b.out_channels, 1));
  }
  return layers;
}

// Multiply-adds of a plain KxK conv C -> C' on an HxW map.
inline std::uint64_t standard_conv_cost(std::uint64_t c, std::uint64_t c_out, std::uint64_t k,
                                        std::uint64_t h, std::uint64_t w) {
  return c * h * w * c_out * k * k;
}

// Closed-form cost of a stride-1 bottleneck on an HxW map.
inline std::uint64_t bottleneck_cost(const BottleneckSpec& b, std::uint64_t h, std::uint64_t w) {
  const std::uint64_t c = b.in_channels, x = b.squeezed, co = b.out_channels, k = b.kernel;
  if (b.type == BottleneckType::A) return c * h * w * x + x * h * w * co * k * k;
  return c * h * w * x + x * x * h * w * k * k + x * h * w * co;
}

struct ReductionRatio {
  double exact = 0;
  double approximate = 0;
};

// Bottleneck cost over the cost of the standard conv it replaces, with the
// leading-term approximation (X/C for A, X^2/(C C') for B).
inline ReductionRatio reduction_ratio(const BottleneckSpec& b) {
  validate(b);
  const double c = static_cast<double>(b.in_channels), x = static_cast<double>(b.squeezed),
               co = static_cast<double>(b.out_channels), k2 = static_cast<double>(b.kernel * b.kernel);
  if (b.type == BottleneckType::A) return {x / (co * k2) + x / c, x / c};
  return {x / (co * k2) + x * x / (c * co) + x / (c * k2), x * x / (c * co)};
}

// ---------------------------------------------------------------------------
// Receptive field

// S_L = sum_{p<=L} (prod_{q<p} stride_q) (F_p - 1), accumulated over the
// main layer chain. Convs and max-pools contribute; everything else
// (including residual adapters and global pooling) contributes 0. Note that
// this is one less than the conventional receptive-field width.
inline std::vector<std::int64_t> receptive_fields(const Architecture& arch) {
  std::vector<std::int64_t> out;
  out.reserve(arch.layers.size());
  std::int64_t jump = 1, field = 0;
  for (const auto& l : arch.layers) {
    const bool windowed = l.kind == LayerKind::conv ||
                          (l.kind == LayerKind::pool && l.pool == PoolKind::max);
    if (windowed) {
      field += jump * (static_cast<std::int64_t>(l.kernel) - 1);
      jump *= static_cast<std::int64_t>(l.stride);
    }
    out.push_back(field);
  }
  return out;
}

inline std::int64_t receptive_field(const Architecture& arch, std::size_t layer) {
  if (layer >= arch.layers.size()) {
    throw ConfigError("receptive_field: layer " + std::to_string(layer) + " out of range");
  }
  return receptive_fields(arch)[layer];
}

// ---------------------------------------------------------------------------
// Presets

struct SlimResidualLayout {
  std::size_t stem = 16;
  std::array<std::size_t, 3> stage_channels{};
  std::array<std::size_t, 3> stage_convs{};
  std::size_t head = 0;
};

inline const std::vector<std::pair<std::string, SlimResidualLayout>>& slim_layouts() {
  static const std::vector<std::pair<std::string, SlimResidualLayout>> table = {
      {"50", {16, {32, 64, 128}, {16, 16, 16}, 256}},
      {"50-", {16, {32, 32, 64}, {16, 16, 16}, 128}},
      {"50--", {16, {16, 32, 48}, {16, 16, 16}, 96}},
      {"44-", {16, {32, 32, 64}, {14, 14, 14}, 128}},
      {"44--", {16, {16, 32, 48}, {14, 14, 14}, 96}},
      {"38-", {16, {32, 32, 64}, {12, 12, 12}, 128}},
      {"38--", {16, {16, 32, 48}, {12, 12, 12}, 96}},
      {"32-", {16, {32, 32, 64}, {10, 10, 10}, 128}},
      {"32--", {16, {16, 32, 48}, {10, 10, 10}, 96}},
      {"26-", {16, {32, 32, 64}, {8, 8, 8}, 128}},
      {"26--", {16, {16, 32, 48}, {8, 8, 8}, 96}},
  };
  return table;
}

// Residual net: conv3x3 stem, three stages of two-conv residual blocks
// (stride 2 on the first conv of stages one and three), conv3x3 head, global
// average pool and a dense classifier.
inline Architecture slim_residual(const std::string& name, const SlimResidualLayout& layout,
                                  std::size_t classes, std::array<std::size_t, 3> input) {
  Architecture arch{name, input, {}};
  auto& L = arch.layers;
  const auto unit = [&](LayerSpec conv) {
    L.push_back(conv);
    L.push_back(LayerSpec::batch_norm());
    L.push_back(LayerSpec::act());
  };
  unit(LayerSpec::conv(layout.stem, 3, 1));
  const std::array<std::size_t, 3> strides{2, 1, 2};
  for (std::size_t s = 0; s < 3; ++s) {
    if (layout.stage_convs[s] % 2 != 0) throw ConfigError("stage depth must be even");
    for (std::size_t b = 0; b < layout.stage_convs[s] / 2; ++b) {
      const int block_input = static_cast<int>(L.size()) - 1;
      unit(LayerSpec::conv(layout.stage_channels[s], 3, b == 0 ? strides[s] : 1));
      L.push_back(LayerSpec::conv(layout.stage_channels[s], 3, 1));
      L.push_back(LayerSpec::batch_norm());
      L.push_back(LayerSpec::residual_add(block_input));
      L.push_back(LayerSpec::act());
    }
  }
  unit(LayerSpec::conv(layout.head, 3, 1));
  L.push_back(LayerSpec::global_avg_pool());
  L.push_back(LayerSpec::dense(classes));
  return arch;
}

// Plain six-conv CNN used as the frozen teacher in desk-scale runs.
inline Architecture teacher_cnn(std::size_t classes, std::array<std::size_t, 3> input) {
  Architecture arch{"teacher-cnn", input, {}};
  const auto unit = [&](std::size_t c, std::size_t s) {
    arch.layers.push_back(LayerSpec::conv(c, 3, s));
    arch.layers.push_back(LayerSpec::batch_norm());
    arch.layers.push_back(LayerSpec::act());
  };
  unit(32, 1);
  unit(32, 2);
  unit(64, 1);
  unit(64, 1);
  unit(128, 2);
  unit(128, 1);
  arch.layers.push_back(LayerSpec::global_avg_pool());
  arch.layers.push_back(LayerSpec::dense(classes));
  return arch;
}

inline std::vector<std::string> preset_names() {
  std::vector<std::string> names;
  for (const auto& [name, layout] : slim_layouts()) names.push_back(name);
  names.push_back("teacher-cnn");
  return names;
}

inline Architecture preset(const std::string& name, std::size_t classes = 10,
                           std::array<std::size_t, 3> input = {1, 28, 28}) {
  for (const auto& [key, layout] : slim_layouts()) {
    if (key == name) return slim_residual(name, layout, classes, input);
  }
  if (name == "teacher-cnn") return teacher_cnn(classes, input);
  throw ConfigError("unknown preset '" + name + "'");
}

// ---------------------------------------------------------------------------
// JSON

inline nlohmann::json to_json(const Architecture& arch) {
  nlohmann::json layers = nlohmann::json::array();
  for (const auto& l : arch.layers) {
    nlohmann::json j = {{"kind", to_string(l.kind)},
                        {"channels", l.channels},
                        {"kernel", l.kernel},
                        {"stride", l.stride},
                        {"pad", l.pad},
                        {"residual_source", nullptr}};
    if (l.residual_source) j["residual_source"] = *l.residual_source;
    if (l.kind == LayerKind::pool) j["pool"] = l.pool == PoolKind::max ? "max" : "global_avg";
    if (l.kind == LayerKind::act) j["slope"] = l.slope;
    layers.push_back(std::move(j));
  }
  return {{"name", arch.name}, {"input_shape", arch.input_shape}, {"layers", std::move(layers)}};
}

inline Architecture architecture_from_json(const nlohmann::json& doc) {
  const auto fail = [](const std::string& why) -> ConfigError {
    return ConfigError("architecture schema: " + why);
  };
  if (!doc.is_object()) throw fail("document must be an object");
  for (const auto& [key, value] : doc.items()) {
    if (key != "name" && key != "input_shape" && key != "layers") throw fail("unknown key '" + key + "'");
  }
  try {
    Architecture arch;
    arch.name = doc.value("name", std::string{});
    arch.input_shape = doc.at("input_shape").get<std::array<std::size_t, 3>>();
    for (const auto& j : doc.at("layers")) {
      LayerSpec l;
      for (const auto& [key, value] : j.items()) {
        static const std::array<const char*, 8> allowed{"kind", "channels", "kernel", "stride",
                                                        "pad", "residual_source", "pool", "slope"};
        if (std::find_if(allowed.begin(), allowed.end(), [&](const char* a) { return key == a; }) ==
            allowed.end()) {
          throw fail("unknown layer key '" + key + "'");
        }
      }
      const auto kind = j.at("kind").get<std::string>();
      if (kind == "conv") l.kind = LayerKind::conv;
      else if (kind == "bn") l.kind = LayerKind::bn;
      else if (kind == "act") l.kind = LayerKind::act;
      else if (kind == "pool") l.kind = LayerKind::pool;
      else if (kind == "dense") l.kind = LayerKind::dense;
      else if (kind == "residual-add") l.kind = LayerKind::residual_add;
      else throw fail("unknown layer kind '" + kind + "'");
      l.channels = j.value("channels", std::size_t{0});
      l.kernel = j.value("kernel", std::size_t{1});
      l.stride = j.value("stride", std::size_t{1});
      l.pad = j.value("pad", std::size_t{0});
      if (j.contains("residual_source") && !j["residual_source"].is_null()) {
        l.residual_source = j["residual_source"].get<int>();
      }
      if (j.contains("pool")) {
        const auto p = j["pool"].get<std::string>();
        if (p == "max") l.pool = PoolKind::max;
        else if (p == "global_avg") l.pool = PoolKind::global_avg;
        else throw fail("unknown pool '" + p + "'");
      }
      l.slope = j.value("slope", 0.0);
      arch.layers.push_back(l);
    }
    return arch;
  } catch (const nlohmann::json::exception& e) {
    throw fail(e.what());
  }
}

inline void save_arch(const Architecture& arch, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw DataError(DataError::Kind::io, "cannot write " + path.string());
  out << to_json(arch).dump(2) << '\n';
  if (!out) throw DataError(DataError::Kind::io, "write failed for " + path.string());
}

inline Architecture load_arch(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw DataError(DataError::Kind::io, "cannot open " + path.string());
  nlohmann::json doc;
  try {
    in >> doc;
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError("architecture file " + path.string() + ": " + e.what());
  }
  return architecture_from_json(doc);
}

}  // namespace kpn
