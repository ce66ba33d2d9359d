#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <map>
#include <optional>
#include <random>
#include <set>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "kpn/config.hpp"
#include "kpn/data.hpp"
#include "kpn/network.hpp"
#include "kpn/projection.hpp"
#include "kpn/prune.hpp"
#include "kpn/routes.hpp"

namespace kpn {

// SplitMix64 finalizer; derives independent seeds from (seed, stream).
inline std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t stream) {
  std::uint64_t z = seed + 0x9e3779b97f4a7c15ULL * (stream + 1);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

// One training record; fields that do not apply are left empty.
struct LogRecord {
  std::size_t iter = 0;
  std::string stage;
  double lambda = 0;
  std::optional<double> kp_loss;
  std::optional<double> task_loss;
  std::optional<double> val_acc;
  std::optional<std::size_t> candidate;
  std::string note;
};

inline nlohmann::json to_json(const LogRecord& r) {
  const auto opt = [](const auto& v) { return v ? nlohmann::json(*v) : nlohmann::json(nullptr); };
  nlohmann::json j = {{"iter", r.iter},        {"stage", r.stage},          {"lambda", r.lambda},
                      {"kp_loss", opt(r.kp_loss)}, {"task_loss", opt(r.task_loss)}, {"val_acc", opt(r.val_acc)}};
  if (r.candidate) j["candidate"] = *r.candidate;
  if (!r.note.empty()) j["note"] = r.note;
  return j;
}

using LogSink = std::function<void(const LogRecord&)>;

// ---------------------------------------------------------------------------
// Evaluation helpers

template <typename Real>
std::vector<Real> predict_logits(Network<Real>& net, const Dataset& d, std::size_t batch_size) {
  std::vector<Real> out;
  std::vector<std::size_t> idx;
  for (std::size_t start = 0; start < d.size(); start += batch_size) {
    idx.clear();
    for (std::size_t i = start; i < std::min(d.size(), start + batch_size); ++i) idx.push_back(i);
    const auto batch = make_batch<Real>(d, idx);
    const auto logits = net.forward(batch.images, Mode::eval);
    out.insert(out.end(), logits.values().begin(), logits.values().end());
  }
  return out;
}

template <typename Real>
double accuracy(Network<Real>& net, const Dataset& d, std::size_t batch_size = 200) {
  if (d.size() == 0) return 0.0;
  const auto logits = predict_logits(net, d, batch_size);
  const std::size_t k = logits.size() / d.size();
  std::size_t correct = 0;
  for (std::size_t i = 0; i < d.size(); ++i) {
    const auto row = logits.begin() + static_cast<std::ptrdiff_t>(i * k);
    correct += static_cast<int>(std::max_element(row, row + static_cast<std::ptrdiff_t>(k)) - row) == d.labels[i];
  }
  return static_cast<double>(correct) / static_cast<double>(d.size());
}

// Teacher conv outputs for the requested ordinals from one eval-mode pass.
template <typename Real>
std::map<std::size_t, Tensor<Real>> teacher_features(Network<Real>& teacher, const Tensor<Real>& images,
                                                     const std::set<std::size_t>& ordinals) {
  if (ordinals.empty()) return {};
  ForwardSpec<Real> spec;
  spec.mode = Mode::eval;
  spec.capture.assign(ordinals.begin(), ordinals.end());
  spec.stop_after = *ordinals.rbegin();
  return teacher.forward(images, spec).captured;
}

// Fixed validation batches with the teacher features precomputed; the
// teacher is frozen, so these never change during a run.
template <typename Real>
struct TeacherCache {
  std::vector<Batch<Real>> batches;
  std::vector<std::map<std::size_t, Tensor<Real>>> features;
};

template <typename Real>
TeacherCache<Real> build_teacher_cache(Network<Real>& teacher, const Dataset& d, const std::set<std::size_t>& ordinals,
                                       std::size_t batch_size) {
  TeacherCache<Real> cache;
  std::vector<std::size_t> idx;
  for (std::size_t start = 0; start < d.size(); start += batch_size) {
    idx.clear();
    for (std::size_t i = start; i < std::min(d.size(), start + batch_size); ++i) idx.push_back(i);
    cache.batches.push_back(make_batch<Real>(d, idx));
    cache.features.push_back(teacher_features(teacher, cache.batches.back().images, ordinals));
  }
  return cache;
}

// ---------------------------------------------------------------------------
// Plain supervised training (teacher pre-training and the no-guidance
// student baseline)

template <typename Real>
Network<Real> train_supervised(const Architecture& arch, const Dataset& train, const TrainConfig& cfg,
                               const std::string& prefix, const LogSink& sink = {}) {
  validate(cfg);
  Network<Real> net(arch, prefix, derive_seed(cfg.seed, 1), static_cast<Real>(cfg.weight_decay));
  BatchSampler sampler(train.size(), cfg.batch_size, derive_seed(cfg.seed, 2));
  std::mt19937_64 aug_rng(derive_seed(cfg.seed, 3));
  auto params = net.parameters();
  for (std::size_t it = 0; it < cfg.total_iterations; ++it) {
    const auto idx = sampler.next();
    auto batch = make_batch<Real>(train, idx);
    if (cfg.hflip_probability > 0) batch = augment_hflip(batch, cfg.hflip_probability, aug_rng);
    const auto logits = net.forward(batch.images, Mode::train);
    const auto loss = softmax_cross_entropy(logits, std::span<const int>(batch.labels));
    if (!std::isfinite(loss.item())) {
      throw NumericError(prefix + ": non-finite loss at iteration " + std::to_string(it));
    }
    backward(loss);
    sgd_step<Real>(params, static_cast<Real>(lr_at(cfg, it)), static_cast<Real>(cfg.momentum));
    zero_grad<Real>(params);
    if (sink && cfg.log_every && (it % cfg.log_every == 0 || it + 1 == cfg.total_iterations)) {
      LogRecord rec;
      rec.iter = it;
      rec.stage = "supervised";
      rec.task_loss = loss.item();
      sink(rec);
    }
  }
  return net;
}

template <typename Real>
Network<Real> train_teacher(const Architecture& arch, const Dataset& train, const TrainConfig& cfg,
                            const LogSink& sink = {}) {
  auto net = train_supervised<Real>(arch, train, cfg, "teacher", sink);
  net.freeze();
  return net;
}

// ---------------------------------------------------------------------------
// Knowledge projection candidates

template <typename Real>
struct KpnInstance {
  Network<Real> student;
  ProjectionLayer<Real> projection;
  Route route;
  std::optional<double> validation_joint_loss;
  StageState stage;
  std::mt19937_64 rng;
  bool diverged = false;

  std::vector<Parameter<Real>*> parameters() {
    auto out = student.parameters();
    out.push_back(&projection.weight);
    return out;
  }
};

template <typename Real>
KpnInstance<Real> make_kpn_instance(const Network<Real>& teacher, const Architecture& student_arch, Route route,
                                    const TrainConfig& cfg, std::uint64_t seed) {
  Network<Real> student(student_arch, "student", derive_seed(seed, 11), static_cast<Real>(cfg.weight_decay));
  const auto t_shape = teacher.conv_output_shape(route.knowledge);
  const auto s_shape = student.conv_output_shape(route.injection);
  if (t_shape.height != s_shape.height || t_shape.width != s_shape.width) {
    throw ConfigError("route " + std::to_string(route.knowledge) + "->" + std::to_string(route.injection) +
                      " joins spatially mismatched layers");
  }
  ProjectionLayer<Real> proj(t_shape.channels, s_shape.channels, derive_seed(seed, 12),
                             static_cast<Real>(cfg.kp_weight_decay_init));
  return {std::move(student), std::move(proj), route, std::nullopt, StageState{}, std::mt19937_64(derive_seed(seed, 13)),
          false};
}

struct StepLosses {
  Stage stage = Stage::init;
  double lambda = 0;
  double kp_loss = 0;
  double task_loss = 0;
  double total = 0;
};

enum class LossTerms { both, kp_only, task_only };

namespace detail {

template <typename Real>
Tensor<Real> combine(const Tensor<Real>& kp, const Tensor<Real>& task, double lambda, LossTerms terms) {
  switch (terms) {
    case LossTerms::kp_only: return scale(kp, static_cast<Real>(lambda));
    case LossTerms::task_only: return task;
    default: return joint_loss(kp, task, static_cast<Real>(lambda)).total;
  }
}

}  // namespace detail

// Initialization stage. The projected teacher feature replaces the injection
// conv's output, so the task loss trains the projection plus every layer
// after the injection point. The layers up to and including the injection
// conv see only the relaxed L1 loss against the projected feature, which is
// held constant for that update. Gradients are accumulated, not applied.
template <typename Real>
StepLosses accumulate_init_gradients(KpnInstance<Real>& k, const Batch<Real>& batch, const Tensor<Real>& teacher_feature,
                                     const TrainConfig& cfg, double lambda, LossTerms terms = LossTerms::both) {
  const std::size_t j = k.route.injection;
  const auto projected = project(teacher_feature, k.projection);
  ForwardSpec<Real> spec;
  spec.mode = Mode::train;
  spec.capture = {j};
  spec.substitute_at = j;
  spec.substitute = projected;
  auto fr = k.student.forward(batch.images, spec);
  const auto& injected = fr.captured.at(j);
  const auto target = projected.detach();
  const auto mask = kp_mask(cfg.mask_source, teacher_feature, target, k.projection, static_cast<Real>(cfg.eta));
  const auto kp = kp_loss<Real>(mask, target, injected);
  const auto task = softmax_cross_entropy(fr.output, std::span<const int>(batch.labels));
  const auto total = detail::combine(kp, task, lambda, terms);
  StepLosses out{Stage::init, lambda, kp.item(), task.item(), lambda * kp.item() + task.item()};
  if (std::isfinite(out.total)) backward(total);
  return out;
}

// Joint stage: one full student pass; lambda * L_KP + L_p is backpropagated
// through the whole student and, via L_KP, into the projection.
template <typename Real>
StepLosses accumulate_joint_gradients(KpnInstance<Real>& k, const Batch<Real>& batch,
                                      const Tensor<Real>& teacher_feature, const TrainConfig& cfg, double lambda,
                                      LossTerms terms = LossTerms::both) {
  const std::size_t j = k.route.injection;
  const auto projected = project(teacher_feature, k.projection);
  ForwardSpec<Real> spec;
  spec.mode = Mode::train;
  spec.capture = {j};
  auto fr = k.student.forward(batch.images, spec);
  const auto& injected = fr.captured.at(j);
  const auto mask = kp_mask(cfg.mask_source, teacher_feature, projected, k.projection, static_cast<Real>(cfg.eta));
  const auto kp = kp_loss<Real>(mask, projected, injected);
  const auto task = softmax_cross_entropy(fr.output, std::span<const int>(batch.labels));
  const auto total = detail::combine(kp, task, lambda, terms);
  StepLosses out{Stage::joint, lambda, kp.item(), task.item(), lambda * kp.item() + task.item()};
  if (std::isfinite(out.total)) backward(total);
  return out;
}

namespace detail {

template <typename Real>
void apply_update(KpnInstance<Real>& k, const StepLosses& losses, double lr, double momentum) {
  auto params = k.parameters();
  if (std::isfinite(losses.total)) {
    sgd_step<Real>(params, static_cast<Real>(lr), static_cast<Real>(momentum));
  } else {
    k.diverged = true;
  }
  zero_grad<Real>(params);
}

}  // namespace detail

template <typename Real>
StepLosses init_stage_step(KpnInstance<Real>& k, const Batch<Real>& batch, const Tensor<Real>& teacher_feature,
                           const TrainConfig& cfg) {
  if (k.stage.mode != Stage::init) throw ConfigError("init_stage_step outside the initialization stage");
  const std::size_t it = k.stage.iteration;
  const bool revoked = it >= init_iterations(cfg);
  k.projection.weight.weight_decay = static_cast<Real>(
      revoked && !cfg.revoke_restores_kp_decay ? cfg.kp_weight_decay_joint : cfg.kp_weight_decay_init);
  const auto losses = accumulate_init_gradients(k, batch, teacher_feature, cfg, lambda_at(cfg, it));
  detail::apply_update(k, losses, lr_at(cfg, it), cfg.momentum);
  return losses;
}

template <typename Real>
StepLosses joint_stage_step(KpnInstance<Real>& k, const Batch<Real>& batch, const Tensor<Real>& teacher_feature,
                            const TrainConfig& cfg) {
  if (k.stage.mode != Stage::joint) throw ConfigError("joint_stage_step outside the joint stage");
  const std::size_t it = k.stage.iteration;
  k.projection.weight.weight_decay = static_cast<Real>(cfg.kp_weight_decay_joint);
  const auto losses = accumulate_joint_gradients(k, batch, teacher_feature, cfg, lambda_at(cfg, it));
  detail::apply_update(k, losses, lr_at(cfg, it), cfg.momentum);
  return losses;
}

template <typename Real>
StepLosses init_stage_step(KpnInstance<Real>& k, const Batch<Real>& batch, Network<Real>& teacher,
                           const TrainConfig& cfg) {
  const auto mu = teacher_features(teacher, batch.images, {k.route.knowledge});
  return init_stage_step(k, batch, mu.at(k.route.knowledge), cfg);
}

template <typename Real>
StepLosses joint_stage_step(KpnInstance<Real>& k, const Batch<Real>& batch, Network<Real>& teacher,
                            const TrainConfig& cfg) {
  const auto mu = teacher_features(teacher, batch.images, {k.route.knowledge});
  return joint_stage_step(k, batch, mu.at(k.route.knowledge), cfg);
}

// One scheduled iteration: possible revocation at an epoch boundary, the
// stage's step, then the counter advance.
template <typename Real>
StepLosses kpn_step(KpnInstance<Real>& k, const Batch<Real>& batch, const Tensor<Real>& teacher_feature,
                    const TrainConfig& cfg, bool epoch_boundary) {
  if (epoch_boundary) k.stage = maybe_revoke_init(k.rng, k.stage, cfg);
  k.stage.mode = scheduled_stage(cfg, k.stage);
  const auto losses = k.stage.mode == Stage::init ? init_stage_step(k, batch, teacher_feature, cfg)
                                                  : joint_stage_step(k, batch, teacher_feature, cfg);
  advance(k.stage, cfg);
  return losses;
}

// Mean over validation batches of lambda * L_KP + L_p with the student in
// eval mode. Stored on the instance.
template <typename Real>
double evaluate_joint_loss(KpnInstance<Real>& k, const TeacherCache<Real>& cache, const TrainConfig& cfg, double lambda) {
  if (k.diverged) {
    k.validation_joint_loss = std::nan("");
    return *k.validation_joint_loss;
  }
  double total = 0;
  std::size_t count = 0;
  for (std::size_t b = 0; b < cache.batches.size(); ++b) {
    const auto& batch = cache.batches[b];
    const auto& mu = cache.features[b].at(k.route.knowledge);
    const auto projected = project(mu, k.projection).detach();
    ForwardSpec<Real> spec;
    spec.mode = Mode::eval;
    spec.capture = {k.route.injection};
    auto fr = k.student.forward(batch.images, spec);
    const auto mask = kp_mask(cfg.mask_source, mu, projected, k.projection, static_cast<Real>(cfg.eta));
    const double kp = kp_loss<Real>(mask, projected, fr.captured.at(k.route.injection).detach()).item();
    const double task = softmax_cross_entropy(fr.output.detach(), std::span<const int>(batch.labels)).item();
    total += (lambda * kp + task) * static_cast<double>(batch.labels.size());
    count += batch.labels.size();
  }
  k.validation_joint_loss = count ? total / static_cast<double>(count) : 0.0;
  return *k.validation_joint_loss;
}

template <typename Real>
double evaluate_joint_loss(KpnInstance<Real>& k, Network<Real>& teacher, const Dataset& val, const TrainConfig& cfg,
                           double lambda) {
  const auto cache = build_teacher_cache(teacher, val, {k.route.knowledge}, cfg.eval_batch_size);
  return evaluate_joint_loss(k, cache, cfg, lambda);
}

// Standalone student with the projection and every teacher reference dropped.
template <typename Real>
Network<Real> export_student(const KpnInstance<Real>& k) {
  return k.student.clone(std::string("student"));
}

// ---------------------------------------------------------------------------
// Full pipeline: route enumeration, the pruning race, then the survivor's
// remaining two-stage schedule.

struct KpnOptions {
  // Skip the race and train this route only.
  std::optional<Route> route;
  // Stop once the race has a survivor.
  bool race_only = false;
};

template <typename Real>
struct KpnRun {
  KpnInstance<Real> survivor;
  std::vector<RouteCandidate> routes;
  PruneReport race;
  std::vector<LogRecord> log;
};

template <typename Real>
KpnRun<Real> train_kpn(Network<Real>& teacher, const Architecture& student_arch, const Dataset& train,
                       const Dataset& val, const TrainConfig& cfg, const KpnOptions& options = {},
                       const LogSink& sink = {}) {
  validate(cfg);
  for (const auto* p : std::as_const(teacher).parameters()) {
    if (p->learnable) throw ConfigError("train_kpn: teacher parameters must be frozen");
  }
  std::vector<RouteCandidate> routes;
  if (options.route) {
    const auto all = enumerate_routes(teacher.architecture(), student_arch, std::numeric_limits<double>::infinity());
    for (const auto& r : all) {
      if (r.route == *options.route) routes.push_back(r);
    }
    if (routes.empty()) throw ConfigError("requested route joins spatially mismatched or missing layers");
  } else {
    routes = enumerate_routes(teacher.architecture(), student_arch, cfg.beta);
  }
  if (routes.empty()) throw ConfigError("no admissible projection routes between teacher and student");

  BatchSampler sampler(train.size(), cfg.batch_size, derive_seed(cfg.seed, 2));
  const std::size_t epoch_len = std::max<std::size_t>(1, sampler.batches_per_epoch());
  const std::size_t period = cfg.prune_period_unit == "epochs" ? cfg.prune_period * epoch_len : cfg.prune_period;
  if ((routes.size() - 1) * period >= cfg.total_iterations) {
    throw ConfigError("pruning race needs " + std::to_string((routes.size() - 1) * period) + " iterations for " +
                      std::to_string(routes.size()) + " candidates but total_iterations is " +
                      std::to_string(cfg.total_iterations));
  }

  std::vector<KpnInstance<Real>> candidates;
  std::set<std::size_t> knowledge;
  for (std::size_t c = 0; c < routes.size(); ++c) {
    candidates.push_back(make_kpn_instance(teacher, student_arch, routes[c].route, cfg, derive_seed(cfg.seed, 100 + c)));
    knowledge.insert(routes[c].route.knowledge);
  }
  const auto cache = build_teacher_cache(teacher, val, knowledge, cfg.eval_batch_size);
  std::mt19937_64 aug_rng(derive_seed(cfg.seed, 3));

  std::vector<LogRecord> log;
  const auto emit = [&](LogRecord rec) {
    if (sink) sink(rec);
    log.push_back(std::move(rec));
  };

  // Trains the listed candidates on shared batches; one teacher pass per batch.
  const auto train_steps = [&](std::span<const std::size_t> alive, std::size_t steps) {
    std::set<std::size_t> needed;
    for (auto c : alive) needed.insert(candidates[c].route.knowledge);
    for (std::size_t t = 0; t < steps; ++t) {
      auto batch = make_batch<Real>(train, sampler.next());
      if (cfg.hflip_probability > 0) batch = augment_hflip(batch, cfg.hflip_probability, aug_rng);
      const auto mu = teacher_features(teacher, batch.images, needed);
      for (auto c : alive) {
        auto& k = candidates[c];
        const std::size_t it = k.stage.iteration;
        const bool boundary = it > 0 && it % epoch_len == 0;
        const auto losses = kpn_step(k, batch, mu.at(k.route.knowledge), cfg, boundary);
        if (cfg.log_every && (it % cfg.log_every == 0 || it + 1 == cfg.total_iterations)) {
          LogRecord rec;
          rec.iter = it;
          rec.stage = to_string(losses.stage);
          rec.lambda = losses.lambda;
          rec.kp_loss = losses.kp_loss;
          rec.task_loss = losses.task_loss;
          if (alive.size() > 1) rec.candidate = c;
          emit(std::move(rec));
        }
      }
    }
  };

  struct Driver {
    std::function<void(std::span<const std::size_t>)> train;
    std::function<double(std::size_t)> validate;
    void train_round(std::span<const std::size_t> alive) { train(alive); }
    double validation_loss(std::size_t c) { return validate(c); }
  } driver{[&](std::span<const std::size_t> alive) { train_steps(alive, period); },
           [&](std::size_t c) {
             auto& k = candidates[c];
             return evaluate_joint_loss(k, cache, cfg, lambda_at(cfg, k.stage.iteration));
           }};

  auto race = iterative_prune(candidates.size(), driver, cfg.prune_direction, [&](const std::string& msg) {
    LogRecord rec;
    rec.stage = "warning";
    rec.note = msg;
    emit(std::move(rec));
  });

  auto& survivor = candidates[race.survivor];
  const std::size_t solo[] = {race.survivor};
  const std::size_t chunk = std::max<std::size_t>(1, cfg.total_iterations / 10);
  while (!options.race_only && survivor.stage.iteration < cfg.total_iterations) {
    train_steps(solo, std::min(chunk, cfg.total_iterations - survivor.stage.iteration));
    if (survivor.diverged) throw NumericError("surviving candidate diverged (non-finite loss)");
  }
  evaluate_joint_loss(survivor, cache, cfg, 0.0);
  if (val.size()) {
    LogRecord rec;
    rec.iter = survivor.stage.iteration;
    rec.stage = "final";
    rec.task_loss = survivor.validation_joint_loss;
    rec.val_acc = accuracy(survivor.student, val, cfg.eval_batch_size);
    emit(std::move(rec));
  }
  return KpnRun<Real>{std::move(survivor), std::move(routes), std::move(race), std::move(log)};
}

}  // namespace kpn
