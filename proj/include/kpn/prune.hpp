#pragma once

#include <cmath>
#include <concepts>
#include <cstddef>
#include <functional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "kpn/errors.hpp"

namespace kpn {

// worst:         drop the candidate with the highest validation joint loss
// paper_literal: drop the argmin each round (keeps the worst candidate)
enum class PruneDirection { worst, paper_literal };

inline std::string to_string(PruneDirection d) {
  return d == PruneDirection::worst ? "worst" : "paper-literal";
}

inline PruneDirection parse_prune_direction(const std::string& s) {
  if (s == "worst") return PruneDirection::worst;
  if (s == "paper-literal") return PruneDirection::paper_literal;
  throw ConfigError("unknown prune direction '" + s + "' (expected worst|paper-literal)");
}

struct PruneEvent {
  std::size_t round = 0;
  std::size_t candidate = 0;
  double loss = 0;
  std::string reason;  // "loss" or "nan"
};

struct PruneRound {
  std::size_t round = 0;
  std::vector<std::pair<std::size_t, double>> losses;  // (candidate, validation joint loss)
};

struct PruneReport {
  std::size_t survivor = 0;
  std::vector<PruneRound> rounds;
  std::vector<PruneEvent> events;
};

// A race driver trains every listed candidate for one period and reports a
// candidate's validation joint loss afterwards.
template <class D>
concept RaceDriver = requires(D& d, std::span<const std::size_t> alive, std::size_t c) {
  d.train_round(alive);
  { d.validation_loss(c) } -> std::convertible_to<double>;
};

// Runs the survival race over candidates 0..count-1 and returns the single
// survivor. Each round trains all survivors, evaluates them, and removes one
// candidate. Non-finite losses are pruned straight away (one event each) and
// replace that round's loss-based removal.
template <RaceDriver D>
PruneReport iterative_prune(std::size_t count, D& driver, PruneDirection direction = PruneDirection::worst,
                            const std::function<void(const std::string&)>& warn = {}) {
  if (count == 0) throw ConfigError("iterative_prune: no candidates");
  PruneReport report;
  std::vector<std::size_t> alive(count);
  for (std::size_t i = 0; i < count; ++i) alive[i] = i;

  for (std::size_t round = 1; alive.size() > 1; ++round) {
    driver.train_round(std::span<const std::size_t>(alive));
    PruneRound table{round, {}};
    for (auto c : alive) table.losses.emplace_back(c, static_cast<double>(driver.validation_loss(c)));
    report.rounds.push_back(table);

    std::vector<std::size_t> next;
    bool pruned_nan = false;
    std::size_t finite = 0;
    for (const auto& [c, loss] : table.losses) finite += std::isfinite(loss) ? 1 : 0;
    if (finite == 0) throw NumericError("iterative_prune: every candidate has a non-finite validation loss");
    for (const auto& [c, loss] : table.losses) {
      if (std::isfinite(loss)) {
        next.push_back(c);
      } else {
        pruned_nan = true;
        report.events.push_back({round, c, loss, "nan"});
        if (warn) warn("candidate " + std::to_string(c) + " produced a non-finite validation loss; pruned");
      }
    }
    if (!pruned_nan) {
      std::size_t pick = 0;
      for (std::size_t k = 1; k < table.losses.size(); ++k) {
        const double cand = table.losses[k].second, best = table.losses[pick].second;
        if (direction == PruneDirection::worst ? cand > best : cand < best) pick = k;
      }
      report.events.push_back({round, table.losses[pick].first, table.losses[pick].second, "loss"});
      next.erase(next.begin() + static_cast<std::ptrdiff_t>(pick));
    }
    alive = std::move(next);
  }
  report.survivor = alive.front();
  return report;
}

inline nlohmann::json to_json(const PruneReport& r) {
  nlohmann::json rounds = nlohmann::json::array();
  for (const auto& round : r.rounds) {
    nlohmann::json losses = nlohmann::json::array();
    for (const auto& [c, loss] : round.losses) {
      losses.push_back({{"candidate", c}, {"loss", std::isfinite(loss) ? nlohmann::json(loss) : nlohmann::json(nullptr)}});
    }
    rounds.push_back({{"round", round.round}, {"losses", losses}});
  }
  nlohmann::json events = nlohmann::json::array();
  for (const auto& e : r.events) {
    events.push_back({{"round", e.round},
                      {"candidate", e.candidate},
                      {"loss", std::isfinite(e.loss) ? nlohmann::json(e.loss) : nlohmann::json(nullptr)},
                      {"reason", e.reason}});
  }
  return {{"survivor", r.survivor}, {"rounds", rounds}, {"events", events}};
}

}  // namespace kpn
