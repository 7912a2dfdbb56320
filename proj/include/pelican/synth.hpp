#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "pelican/trace.hpp"

namespace pelican {

/// Scheduling constants for the day simulator. Waking hours must leave room
/// for the duration cap so sessions never overlap across days.
struct ScheduleParams {
  int day_start_minute = 7 * 60;
  int day_end_minute = 22 * 60;
  int gap_minutes = 0;               // idle time between consecutive sessions
  double duration_sigma_frac = 0.2;  // stddev as a fraction of the dwell mean
  int min_duration = 10;
  std::int64_t start_day = 20458;    // 2026-01-05, a Monday
};

/// Behavioural profile of one synthetic user.
struct UserProfile {
  std::string user_id;
  std::string home;
  std::vector<std::pair<std::string, double>> frequent_set;  // (location, propensity > 0)
  double predictability = 0.8;  // [0, 1]: 1 -> deterministic daily routine
  int mobility_degree = 0;      // |{home} u frequent locations|
  std::map<std::string, double> dwell_means;  // minutes per location
  std::uint64_t seed = 0;

  void validate() const;  // throws ConfigError
};

/// Sampling ranges used when a cohort draws its profiles.
struct ProfileRanges {
  int degree_min = 4;
  int degree_max = 8;
  double predictability_min = 0.5;
  double predictability_max = 0.95;
  double dwell_min = 60.0;
  double dwell_max = 170.0;
  double weight_min = 0.5;
  double weight_max = 2.0;
};

struct CohortSpec {
  int n_contributors = 40;
  int n_targets = 10;
  DomainVocab vocab;  // the 12-location building vocabulary by default
  int weeks = 8;
  std::uint64_t global_seed = 1;
  ProfileRanges profiles;
  ScheduleParams schedule;
};

/// Simulates `weeks` of sessions for one profile. Day structure: the user
/// wakes at home, chains sessions back to back (continuity: next entry =
/// previous entry + duration + gap) and picks the next location from a
/// time-of-day-modulated first-order Markov kernel. With probability
/// `predictability` the kernel follows the user's fixed daily routine cycle,
/// otherwise it draws from the propensity weights, so transition entropy
/// falls to zero as predictability approaches one.
Trace generate_user(const UserProfile& profile, int weeks, const ScheduleParams& schedule = {});

struct Cohort {
  std::vector<Trace> contributors;
  std::vector<Trace> targets;
  std::vector<UserProfile> contributor_profiles;
  std::vector<UserProfile> target_profiles;
};

/// Draws disjoint contributor/target populations. Each user gets an
/// independent seed stream derived from the global seed and the user index,
/// so regeneration with the same spec is byte-identical.
Cohort generate_cohort(const CohortSpec& spec);

/// Temporal split: the first ceil(fraction * n) sessions train, the rest test.
/// Throws SplitError when either side cannot produce at least one window.
std::pair<Trace, Trace> split_train_test(const Trace& trace, double train_fraction);

/// Default desk-scale building vocabulary: B01..Bnn.
DomainVocab make_building_vocab(int n_locations);
DomainVocab make_access_point_vocab(int n_locations);

}  // namespace pelican
