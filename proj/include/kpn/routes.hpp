#pragma once

#include <cstdint>
#include <vector>

#include <nlohmann/json.hpp>

#include "kpn/arch.hpp"

namespace kpn {

// Knowledge layer (teacher conv ordinal) -> injection layer (student conv
// ordinal). Ordinals are 1-based.
struct Route {
  std::size_t knowledge = 0;
  std::size_t injection = 0;

  auto operator<=>(const Route&) const = default;
};

struct RouteCandidate {
  Route route;
  std::int64_t teacher_field = 0;
  std::int64_t student_field = 0;
  FeatureShape teacher_shape;
  FeatureShape student_shape;
};

// (1 - beta) S_i <= S_j <= (1 + beta) S_i, with 1e-9 slack for the
// floating-point products.
inline bool receptive_fields_compatible(std::int64_t teacher_field, std::int64_t student_field, double beta) {
  const double si = static_cast<double>(teacher_field), sj = static_cast<double>(student_field);
  return sj >= (1 - beta) * si - 1e-9 && sj <= (1 + beta) * si + 1e-9;
}

struct ConvSite {
  std::size_t ordinal;
  std::int64_t field;
  FeatureShape shape;
};

inline std::vector<ConvSite> conv_sites(const Architecture& arch) {
  const auto resolved = resolve(arch);
  const auto fields = receptive_fields(arch);
  std::vector<ConvSite> sites;
  for (std::size_t i = 0; i < resolved.size(); ++i) {
    if (resolved[i].conv_ordinal) sites.push_back({resolved[i].conv_ordinal, fields[i], resolved[i].out});
  }
  return sites;
}

// Every conv pair with identical output height/width and compatible
// receptive fields. An empty result is not an error.
inline std::vector<RouteCandidate> enumerate_routes(const Architecture& teacher, const Architecture& student,
                                                    double beta) {
  if (!(beta >= 0)) throw ConfigError("beta must be nonnegative");
  if (teacher.input_shape != student.input_shape) {
    throw ConfigError("teacher and student must share an input shape");
  }
  std::vector<RouteCandidate> routes;
  const auto t_sites = conv_sites(teacher);
  const auto s_sites = conv_sites(student);
  for (const auto& t : t_sites) {
    for (const auto& s : s_sites) {
      if (t.shape.height != s.shape.height || t.shape.width != s.shape.width) continue;
      if (!receptive_fields_compatible(t.field, s.field, beta)) continue;
      routes.push_back({{t.ordinal, s.ordinal}, t.field, s.field, t.shape, s.shape});
    }
  }
  return routes;
}

inline nlohmann::json to_json(const Route& r) {
  return {{"knowledge", r.knowledge}, {"injection", r.injection}};
}

inline nlohmann::json to_json(const RouteCandidate& c) {
  return {{"knowledge", c.route.knowledge},
          {"injection", c.route.injection},
          {"teacher_field", c.teacher_field},
          {"student_field", c.student_field},
          {"height", c.student_shape.height},
          {"width", c.student_shape.width},
          {"teacher_channels", c.teacher_shape.channels},
          {"student_channels", c.student_shape.channels}};
}

}  // namespace kpn
