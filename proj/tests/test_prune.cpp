#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <random>

#include "kpn/kpn.hpp"
#include "support/rigged_race.hpp"

using namespace kpn;

namespace {

constexpr double nan_loss = std::numeric_limits<double>::quiet_NaN();

TEST(Prune, RiggedThreeCandidates) {
  check::RiggedDriver d{{0.9, 0.5, 0.1}};
  const auto report = iterative_prune(3, d);
  EXPECT_EQ(report.survivor, 2u);
  ASSERT_EQ(report.events.size(), 2u);
  EXPECT_EQ(report.events[0].candidate, 0u);
  EXPECT_EQ(report.events[1].candidate, 1u);
  EXPECT_EQ(d.rounds, 2u);
  EXPECT_EQ(d.trained, (std::vector<std::size_t>{1, 2, 2}));
  ASSERT_EQ(report.rounds.size(), 2u);
  EXPECT_EQ(report.rounds[1].losses.size(), 2u);
}

TEST(Prune, SurvivorIsMinimumOverRandomRaces) {
  std::mt19937_64 rng(5);
  for (int trial = 0; trial < 200; ++trial) {
    const std::size_t g = std::uniform_int_distribution<std::size_t>(1, 12)(rng);
    std::vector<double> losses(g);
    for (auto& l : losses) l = std::uniform_real_distribution<double>(0.0, 5.0)(rng);
    check::RiggedDriver d{losses};
    const auto report = iterative_prune(g, d);
    const auto best = static_cast<std::size_t>(std::min_element(losses.begin(), losses.end()) - losses.begin());
    EXPECT_EQ(report.survivor, best);
    EXPECT_EQ(report.events.size(), g - 1);
    EXPECT_EQ(d.rounds, g - 1);
    // The survivor's loss is the minimum of the final round.
    if (!report.rounds.empty()) {
      const auto& last = report.rounds.back().losses;
      for (const auto& [c, l] : last) EXPECT_LE(losses[report.survivor], l);
    }
  }
}

TEST(Prune, SingleCandidateHasNoEvents) {
  check::RiggedDriver d{{0.3}};
  const auto report = iterative_prune(1, d);
  EXPECT_EQ(report.survivor, 0u);
  EXPECT_TRUE(report.events.empty());
  EXPECT_THROW(iterative_prune(0, d), ConfigError);
}

TEST(Prune, ArgminDirectionKeepsTheWorst) {
  check::RiggedDriver d{{0.9, 0.5, 0.1}};
  EXPECT_EQ(iterative_prune(3, d, PruneDirection::paper_literal).survivor, 0u);
  EXPECT_EQ(parse_prune_direction("paper-literal"), PruneDirection::paper_literal);
  EXPECT_THROW(parse_prune_direction("best"), ConfigError);
}

TEST(Prune, NonFiniteCandidatesArePrunedImmediately) {
  check::RiggedDriver d{{0.4, nan_loss, 0.2, std::numeric_limits<double>::infinity(), 0.3}};
  std::vector<std::string> warnings;
  const auto report = iterative_prune(5, d, PruneDirection::worst, [&](const std::string& w) { warnings.push_back(w); });
  EXPECT_EQ(report.survivor, 2u);
  EXPECT_EQ(report.events.size(), 4u);
  EXPECT_EQ(report.events[0].reason, "nan");
  EXPECT_EQ(report.events[1].reason, "nan");
  EXPECT_EQ(report.events[0].round, 1u);
  EXPECT_EQ(report.events[1].round, 1u);
  EXPECT_EQ(warnings.size(), 2u);
  check::RiggedDriver all_nan({nan_loss, nan_loss});
  EXPECT_THROW(iterative_prune(2, all_nan), NumericError);
}

TEST(Prune, TeacherUnchangedByRace) {
  Network<float> teacher(preset("teacher-cnn"), "teacher", 3);
  teacher.freeze();
  const auto before = parameter_hash(teacher);
  check::RiggedDriver d{{0.9, 0.1, 0.5, 0.7}, &teacher};
  EXPECT_EQ(iterative_prune(4, d).survivor, 1u);
  EXPECT_EQ(parameter_hash(teacher), before);
}

TEST(Prune, ReportJson) {
  check::RiggedDriver d{{0.9, nan_loss, 0.1}};
  const auto j = to_json(iterative_prune(3, d));
  EXPECT_EQ(j["survivor"], 2);
  EXPECT_TRUE(j["events"][0]["loss"].is_null());
  EXPECT_EQ(j["events"].size(), 2u);
}

}  // namespace
