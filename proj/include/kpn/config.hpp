#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "kpn/errors.hpp"
#include "kpn/projection.hpp"
#include "kpn/prune.hpp"

namespace kpn {

// Learning rate `lr` applies from fraction `from` of the run onwards.
struct LrStep {
  double from = 0;
  double lr = 0;
  bool operator==(const LrStep&) const = default;
};

struct TrainConfig {
  std::size_t total_iterations = 20000;
  std::size_t batch_size = 32;
  std::uint64_t seed = 0;
  std::vector<LrStep> lr_schedule{{0.0, 0.1}, {0.5, 0.01}, {0.75, 0.001}};
  double momentum = 0.9;
  double weight_decay = 1e-4;
  double kp_weight_decay_init = 1e-3;
  double kp_weight_decay_joint = 0.0;
  double lambda0 = 0.6;
  double eta = 0.25;
  double beta = 0.2;
  double init_fraction = 0.4;
  std::size_t prune_period = 10000;
  std::string prune_period_unit = "iterations";  // or "epochs"
  double revoke_probability = 0.1;                // per epoch boundary in the joint stage
  std::size_t revoke_duration = 100;
  bool revoke_restores_kp_decay = true;
  double revoke_cutoff = 0.9;                     // no revocation may run past this fraction
  double hflip_probability = 0.0;
  double val_fraction = 0.1;
  MaskSource mask_source = MaskSource::projected;
  PruneDirection prune_direction = PruneDirection::worst;
  std::size_t log_every = 50;
  std::size_t eval_batch_size = 200;

  bool operator==(const TrainConfig&) const = default;
};

inline void validate(const TrainConfig& c) {
  const auto bad = [](const std::string& why) { return ConfigError("train config: " + why); };
  if (c.total_iterations == 0) throw bad("total_iterations must be positive");
  if (c.batch_size == 0 || c.eval_batch_size == 0) throw bad("batch sizes must be positive");
  if (c.lr_schedule.empty() || c.lr_schedule.front().from != 0.0) throw bad("lr_schedule must start at fraction 0");
  for (std::size_t i = 0; i < c.lr_schedule.size(); ++i) {
    if (!(c.lr_schedule[i].lr >= 0)) throw bad("learning rates must be nonnegative");
    if (i && !(c.lr_schedule[i].from > c.lr_schedule[i - 1].from)) throw bad("lr_schedule fractions must increase");
  }
  if (!(c.momentum >= 0 && c.momentum < 1)) throw bad("momentum must lie in [0, 1)");
  if (c.weight_decay < 0 || c.kp_weight_decay_init < 0 || c.kp_weight_decay_joint < 0) {
    throw bad("weight decays must be nonnegative");
  }
  if (!(c.lambda0 >= 0)) throw bad("lambda0 must be nonnegative");
  validate_eta(c.eta);
  if (!(c.beta >= 0)) throw bad("beta must be nonnegative");
  if (!(c.init_fraction >= 0 && c.init_fraction <= 1)) throw bad("init_fraction must lie in [0, 1]");
  if (c.prune_period == 0) throw bad("prune_period must be positive");
  if (c.prune_period_unit != "iterations" && c.prune_period_unit != "epochs") {
    throw bad("prune_period_unit must be iterations|epochs");
  }
  if (!(c.revoke_probability >= 0 && c.revoke_probability <= 1)) throw bad("revoke_probability must lie in [0, 1]");
  if (!(c.revoke_cutoff >= 0 && c.revoke_cutoff <= 1)) throw bad("revoke_cutoff must lie in [0, 1]");
  if (!(c.hflip_probability >= 0 && c.hflip_probability <= 1)) throw bad("hflip_probability must lie in [0, 1]");
  if (!(c.val_fraction >= 0 && c.val_fraction < 1)) throw bad("val_fraction must lie in [0, 1)");
}

inline nlohmann::json to_json(const TrainConfig& c) {
  nlohmann::json lr = nlohmann::json::array();
  for (const auto& s : c.lr_schedule) lr.push_back({{"from", s.from}, {"lr", s.lr}});
  return {{"total_iterations", c.total_iterations},
          {"batch_size", c.batch_size},
          {"seed", c.seed},
          {"lr_schedule", lr},
          {"momentum", c.momentum},
          {"weight_decay", c.weight_decay},
          {"kp_weight_decay_init", c.kp_weight_decay_init},
          {"kp_weight_decay_joint", c.kp_weight_decay_joint},
          {"lambda0", c.lambda0},
          {"eta", c.eta},
          {"beta", c.beta},
          {"init_fraction", c.init_fraction},
          {"prune_period", c.prune_period},
          {"prune_period_unit", c.prune_period_unit},
          {"revoke_probability", c.revoke_probability},
          {"revoke_duration", c.revoke_duration},
          {"revoke_restores_kp_decay", c.revoke_restores_kp_decay},
          {"revoke_cutoff", c.revoke_cutoff},
          {"hflip_probability", c.hflip_probability},
          {"val_fraction", c.val_fraction},
          {"mask_source", to_string(c.mask_source)},
          {"prune_direction", to_string(c.prune_direction)},
          {"log_every", c.log_every},
          {"eval_batch_size", c.eval_batch_size}};
}

// Overlays the keys present in `doc` onto `base`. Unknown keys are rejected.
inline TrainConfig train_config_from_json(const nlohmann::json& doc, TrainConfig base = {}) {
  if (!doc.is_object()) throw ConfigError("train config must be an object");
  const nlohmann::json known = to_json(base);
  for (const auto& [key, value] : doc.items()) {
    if (!known.contains(key)) throw ConfigError("train config: unknown key '" + key + "'");
  }
  try {
    TrainConfig c = base;
    const auto get = [&](const char* key, auto& field) {
      if (doc.contains(key)) field = doc.at(key).get<std::decay_t<decltype(field)>>();
    };
    get("total_iterations", c.total_iterations);
    get("batch_size", c.batch_size);
    get("seed", c.seed);
    if (doc.contains("lr_schedule")) {
      c.lr_schedule.clear();
      for (const auto& s : doc.at("lr_schedule")) c.lr_schedule.push_back({s.at("from").get<double>(), s.at("lr").get<double>()});
    }
    get("momentum", c.momentum);
    get("weight_decay", c.weight_decay);
    get("kp_weight_decay_init", c.kp_weight_decay_init);
    get("kp_weight_decay_joint", c.kp_weight_decay_joint);
    get("lambda0", c.lambda0);
    get("eta", c.eta);
    get("beta", c.beta);
    get("init_fraction", c.init_fraction);
    get("prune_period", c.prune_period);
    get("prune_period_unit", c.prune_period_unit);
    get("revoke_probability", c.revoke_probability);
    get("revoke_duration", c.revoke_duration);
    get("revoke_restores_kp_decay", c.revoke_restores_kp_decay);
    get("revoke_cutoff", c.revoke_cutoff);
    get("hflip_probability", c.hflip_probability);
    get("val_fraction", c.val_fraction);
    if (doc.contains("mask_source")) c.mask_source = parse_mask_source(doc.at("mask_source").get<std::string>());
    if (doc.contains("prune_direction")) c.prune_direction = parse_prune_direction(doc.at("prune_direction").get<std::string>());
    get("log_every", c.log_every);
    get("eval_batch_size", c.eval_batch_size);
    return c;
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("train config: ") + e.what());
  }
}

// ---------------------------------------------------------------------------
// Schedules

inline std::size_t init_iterations(const TrainConfig& c) {
  return static_cast<std::size_t>(std::floor(c.init_fraction * static_cast<double>(c.total_iterations)));
}

inline double lr_at(const TrainConfig& c, std::size_t iter) {
  const double frac = static_cast<double>(iter) / static_cast<double>(c.total_iterations);
  double lr = c.lr_schedule.front().lr;
  for (const auto& s : c.lr_schedule) {
    if (frac >= s.from) lr = s.lr;
  }
  return lr;
}

// lambda0 through the initialization stage, then a straight line down to
// exactly 0 at the final iteration.
inline double lambda_at(const TrainConfig& c, std::size_t iter) {
  const std::size_t last = c.total_iterations - 1;
  const std::size_t start = init_iterations(c);
  if (iter >= last) return 0.0;
  if (iter < start) return c.lambda0;
  const double span = static_cast<double>(last - start);
  return c.lambda0 * (1.0 - static_cast<double>(iter - start) / span);
}

enum class Stage { init, joint };

inline std::string to_string(Stage s) { return s == Stage::init ? "init" : "joint"; }

struct StageState {
  Stage mode = Stage::init;
  std::size_t iteration = 0;
  std::size_t revoke_remaining = 0;

  bool operator==(const StageState&) const = default;
};

inline Stage scheduled_stage(const TrainConfig& c, const StageState& s) {
  if (s.iteration < init_iterations(c) || s.revoke_remaining > 0) return Stage::init;
  return Stage::joint;
}

// Called at epoch boundaries: while in the joint stage, with probability
// revoke_probability switch back to the initialization stage for
// revoke_duration iterations.
inline StageState maybe_revoke_init(std::mt19937_64& rng, StageState s, const TrainConfig& c) {
  if (s.iteration < init_iterations(c) || s.revoke_remaining > 0 || c.revoke_duration == 0) return s;
  const double limit = c.revoke_cutoff * static_cast<double>(c.total_iterations);
  if (static_cast<double>(s.iteration + c.revoke_duration) > limit) return s;
  std::bernoulli_distribution coin(c.revoke_probability);
  if (coin(rng)) {
    s.revoke_remaining = c.revoke_duration;
    s.mode = Stage::init;
  }
  return s;
}

inline void advance(StageState& s, const TrainConfig& c) {
  ++s.iteration;
  if (s.revoke_remaining > 0) --s.revoke_remaining;
  s.mode = scheduled_stage(c, s);
}

}  // namespace kpn
