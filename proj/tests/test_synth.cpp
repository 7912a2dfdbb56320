#include <set>

#include "doctest.h"
#include "support.hpp"

using namespace pelican;

namespace {

UserProfile toy_profile(std::uint64_t seed) {
  UserProfile p;
  p.user_id = "toy";
  p.home = "B01";
  p.frequent_set = {{"B02", 1.5}, {"B03", 0.7}};
  p.predictability = 0.85;
  p.mobility_degree = 3;
  p.dwell_means = {{"B01", 90.0}, {"B02", 120.0}, {"B03", 60.0}};
  p.seed = seed;
  return p;
}

}  // namespace

TEST_CASE("generated days chain sessions back to back inside the schedule") {
  const UserProfile profile = toy_profile(7);
  const ScheduleParams schedule;
  const Trace trace = generate_user(profile, 2, schedule);
  REQUIRE(trace.size() > 20);
  CHECK(trace.user_id == "toy");

  const std::set<std::string> allowed{"B01", "B02", "B03"};
  std::int64_t prev_end = -1;
  std::int64_t prev_day = -1;
  for (const Session& s : trace.sessions) {
    CHECK(allowed.count(s.location) == 1);
    CHECK(s.duration >= schedule.min_duration);
    CHECK(s.minute_of_day() >= schedule.day_start_minute);
    if (s.day_index() == prev_day) {
      CHECK(s.entry == prev_end + schedule.gap_minutes);  // continuity
    } else {
      CHECK(s.location == profile.home);  // every day starts at home
      CHECK(s.minute_of_day() == schedule.day_start_minute);
      CHECK(s.day_index() >= schedule.start_day);
    }
    // Sessions begin before the nominal day end; the last one may run past it.
    CHECK(s.minute_of_day() < schedule.day_end_minute);
    prev_end = s.end();
    prev_day = s.day_index();
  }
}

TEST_CASE("generation is deterministic and extending weeks preserves the prefix") {
  const UserProfile profile = toy_profile(99);
  const Trace a = generate_user(profile, 2);
  const Trace b = generate_user(profile, 2);
  REQUIRE(a.size() == b.size());
  for (std::size_t i = 0; i < a.size(); ++i) {
    CHECK(a.sessions[i].location == b.sessions[i].location);
    CHECK(a.sessions[i].entry == b.sessions[i].entry);
    CHECK(a.sessions[i].duration == b.sessions[i].duration);
  }

  // The per-day stream layout means more weeks only append new days.
  const Trace longer = generate_user(profile, 3);
  REQUIRE(longer.size() > a.size());
  for (std::size_t i = 0; i < a.size(); ++i) {
    CHECK(longer.sessions[i].location == a.sessions[i].location);
    CHECK(longer.sessions[i].entry == a.sessions[i].entry);
    CHECK(longer.sessions[i].duration == a.sessions[i].duration);
  }

  const Trace other_seed = generate_user(toy_profile(100), 2);
  bool any_differs = other_seed.size() != a.size();
  for (std::size_t i = 0; !any_differs && i < a.size(); ++i)
    any_differs = other_seed.sessions[i].location != a.sessions[i].location ||
                  other_seed.sessions[i].entry != a.sessions[i].entry;
  CHECK(any_differs);
}

TEST_CASE("cohorts draw disjoint deterministic populations within the ranges") {
  CohortSpec spec;
  spec.n_contributors = 5;
  spec.n_targets = 3;
  spec.vocab = make_building_vocab(8);
  spec.weeks = 1;
  spec.global_seed = 42;
  const Cohort cohort = generate_cohort(spec);
  REQUIRE(cohort.contributors.size() == 5);
  REQUIRE(cohort.targets.size() == 3);
  REQUIRE(cohort.contributor_profiles.size() == 5);
  REQUIRE(cohort.target_profiles.size() == 3);

  std::set<std::string> ids;
  for (const auto& p : cohort.contributor_profiles) ids.insert(p.user_id);
  for (const auto& p : cohort.target_profiles) ids.insert(p.user_id);
  CHECK(ids.size() == 8);

  for (const auto& p : cohort.target_profiles) {
    CHECK(p.mobility_degree >= spec.profiles.degree_min);
    CHECK(p.mobility_degree <= spec.profiles.degree_max);
    CHECK(p.predictability >= spec.profiles.predictability_min);
    CHECK(p.predictability <= spec.profiles.predictability_max);
    CHECK(static_cast<int>(p.dwell_means.size()) == p.mobility_degree);
    CHECK(spec.vocab.contains(p.home));
  }
  for (const auto& t : cohort.targets)
    for (const auto& loc : t.distinct_locations()) CHECK(spec.vocab.contains(loc));

  const Cohort again = generate_cohort(spec);
  CHECK(again.targets[0].sessions[5].entry == cohort.targets[0].sessions[5].entry);
  CHECK(again.contributor_profiles[2].home == cohort.contributor_profiles[2].home);

  spec.global_seed = 43;
  const Cohort shifted = generate_cohort(spec);
  CHECK(shifted.target_profiles[0].seed != cohort.target_profiles[0].seed);
}

TEST_CASE("train/test split cuts at a session boundary in time order") {
  const UserProfile profile = toy_profile(5);
  const Trace trace = generate_user(profile, 2);
  const auto [train, test] = split_train_test(trace, 0.8);
  CHECK(train.size() + test.size() == trace.size());
  CHECK(train.size() == static_cast<std::size_t>(
                            std::ceil(0.8 * static_cast<double>(trace.size()))));
  CHECK(train.sessions.back().end() <= test.sessions.front().entry);

  CHECK_THROWS_AS(split_train_test(trace, 0.0), InputError);
  CHECK_THROWS_AS(split_train_test(trace, 1.0), InputError);

  const Trace tiny = generate_user(profile, 1);
  Trace four_sessions;
  four_sessions.user_id = "tiny";
  four_sessions.sessions.assign(tiny.sessions.begin(), tiny.sessions.begin() + 4);
  CHECK_THROWS_AS(split_train_test(four_sessions, 0.8), SplitError);
}

TEST_CASE("vocabulary factories produce ordered synthetic alphabets") {
  const DomainVocab buildings = make_building_vocab(12);
  CHECK(buildings.size() == 12);
  CHECK(buildings.location(0) == "B01");
  CHECK(buildings.location(11) == "B12");
  CHECK(buildings.scale() == SpatialScale::building);

  const DomainVocab aps = make_access_point_vocab(3);
  CHECK(aps.size() == 3);
  CHECK(aps.location(0) == "AP001");
  CHECK(aps.scale() == SpatialScale::access_point);

  CHECK_THROWS_AS(make_building_vocab(0), ConfigError);
}
