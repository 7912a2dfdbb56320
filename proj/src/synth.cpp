#include "pelican/synth.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <set>

#include "pelican/rng.hpp"

namespace pelican {

void UserProfile::validate() const {
  if (user_id.empty()) throw ConfigError("profile needs a user id");
  if (home.empty()) throw ConfigError("profile needs a home location");
  if (frequent_set.empty()) throw ConfigError("profile " + user_id + " has an empty frequent set");
  if (predictability < 0.0 || predictability > 1.0)
    throw ConfigError("predictability must lie in [0, 1]");
  std::set<std::string> distinct{home};
  for (const auto& [loc, weight] : frequent_set) {
    if (weight <= 0.0) throw ConfigError("propensity weights must be positive");
    distinct.insert(loc);
  }
  if (static_cast<int>(distinct.size()) != mobility_degree)
    throw ConfigError("mobility_degree " + std::to_string(mobility_degree) +
                      " does not match the " + std::to_string(distinct.size()) +
                      " distinct locations of " + user_id);
}

namespace {

struct Kernel {
  std::vector<std::string> locations;  // routine cycle order, home first
  std::vector<double> weights;         // propensity per location
  std::vector<double> dwell;           // mean dwell per location
};

Kernel make_kernel(const UserProfile& p) {
  Kernel k;
  k.locations.push_back(p.home);
  for (const auto& [loc, w] : p.frequent_set) {
    if (std::find(k.locations.begin(), k.locations.end(), loc) == k.locations.end())
      k.locations.push_back(loc);
  }
  k.weights.assign(k.locations.size(), 1.0);
  for (std::size_t i = 0; i < k.locations.size(); ++i) {
    for (const auto& [loc, w] : p.frequent_set)
      if (loc == k.locations[i]) k.weights[i] = w;
  }
  k.dwell.assign(k.locations.size(), 90.0);
  for (std::size_t i = 0; i < k.locations.size(); ++i) {
    auto it = p.dwell_means.find(k.locations[i]);
    if (it != p.dwell_means.end()) k.dwell[i] = it->second;
  }
  return k;
}

std::size_t draw_weighted(const std::vector<double>& weights, std::size_t exclude, Rng& rng) {
  double total = 0.0;
  for (std::size_t i = 0; i < weights.size(); ++i)
    if (i != exclude) total += weights[i];
  double u = rng.uniform() * total;
  for (std::size_t i = 0; i < weights.size(); ++i) {
    if (i == exclude) continue;
    u -= weights[i];
    if (u <= 0.0) return i;
  }
  for (std::size_t i = weights.size(); i-- > 0;)
    if (i != exclude) return i;
  return 0;
}

}  // namespace

Trace generate_user(const UserProfile& profile, int weeks, const ScheduleParams& schedule) {
  profile.validate();
  if (weeks <= 0) throw ConfigError("weeks must be positive");
  if (schedule.day_end_minute + kDurationCapMinutes > kMinutesPerDay + schedule.day_start_minute)
    throw ConfigError("waking hours leave no room for the duration cap");

  const Kernel kernel = make_kernel(profile);
  const std::size_t cycle = kernel.locations.size();
  Rng rng(profile.seed);

  std::vector<Session> sessions;
  for (int day = 0; day < 7 * weeks; ++day) {
    const std::int64_t day_base = (schedule.start_day + day) * std::int64_t{kMinutesPerDay};
    int t = schedule.day_start_minute;
    std::size_t loc = 0;  // each day starts at home
    int k = 0;
    while (t < schedule.day_end_minute) {
      const double mean = kernel.dwell[loc];
      double drawn = rng.gaussian(mean, schedule.duration_sigma_frac * mean);
      int duration = static_cast<int>(std::lround(drawn));
      duration = std::clamp(duration, schedule.min_duration, kDurationCapMinutes);
      sessions.push_back(Session{kernel.locations[loc], day_base + t, duration});
      t += duration + schedule.gap_minutes;
      ++k;
      // Time-of-day-modulated first-order kernel: the within-day position
      // anchors the routine; predictability mixes it with a propensity draw.
      if (rng.uniform() < profile.predictability) {
        loc = static_cast<std::size_t>(k) % cycle;
      } else if (cycle > 1) {
        loc = draw_weighted(kernel.weights, loc, rng);
      } else {
        loc = 0;
      }
    }
  }
  return Trace::create(profile.user_id, std::move(sessions));
}

namespace {

UserProfile sample_profile(const std::string& user_id, const DomainVocab& vocab,
                           const ProfileRanges& ranges, std::uint64_t seed) {
  Rng rng(seed);
  UserProfile p;
  p.user_id = user_id;
  p.seed = rng.next_u64();
  p.predictability = rng.uniform(ranges.predictability_min, ranges.predictability_max);
  const int degree =
      static_cast<int>(rng.between(ranges.degree_min, ranges.degree_max));
  p.mobility_degree = degree;

  std::vector<Index> pool(static_cast<std::size_t>(vocab.size()));
  for (std::size_t i = 0; i < pool.size(); ++i) pool[i] = static_cast<Index>(i);
  rng.shuffle(pool);
  p.home = vocab.location(pool[0]);
  for (int i = 0; i < degree; ++i) {
    const std::string& loc = vocab.location(pool[static_cast<std::size_t>(i)]);
    p.frequent_set.emplace_back(loc, rng.uniform(ranges.weight_min, ranges.weight_max));
    p.dwell_means[loc] = rng.uniform(ranges.dwell_min, ranges.dwell_max);
  }
  return p;
}

}  // namespace

Cohort generate_cohort(const CohortSpec& spec) {
  if (spec.n_contributors < 0 || spec.n_targets < 0)
    throw ConfigError("cohort sizes must be non-negative");
  if (spec.n_contributors + spec.n_targets == 0) throw ConfigError("cohort is empty");
  if (spec.vocab.size() == 0) throw ConfigError("cohort needs a vocabulary");
  if (spec.profiles.degree_min < 1 || spec.profiles.degree_min > spec.profiles.degree_max)
    throw ConfigError("bad mobility-degree range");
  if (static_cast<Index>(spec.profiles.degree_max) > spec.vocab.size())
    throw ConfigError("vocabulary smaller than the maximum mobility degree");
  if (spec.weeks <= 0) throw ConfigError("weeks must be positive");

  Cohort cohort;
  char name[32];
  for (int i = 0; i < spec.n_contributors; ++i) {
    std::snprintf(name, sizeof(name), "contrib-%03d", i + 1);
    auto profile = sample_profile(name, spec.vocab, spec.profiles,
                                  mix_seed(spec.global_seed, static_cast<std::uint64_t>(i)));
    cohort.contributors.push_back(generate_user(profile, spec.weeks, spec.schedule));
    cohort.contributor_profiles.push_back(std::move(profile));
  }
  for (int i = 0; i < spec.n_targets; ++i) {
    std::snprintf(name, sizeof(name), "target-%03d", i + 1);
    auto profile = sample_profile(
        name, spec.vocab, spec.profiles,
        mix_seed(spec.global_seed, 1000000ULL + static_cast<std::uint64_t>(i)));
    cohort.targets.push_back(generate_user(profile, spec.weeks, spec.schedule));
    cohort.target_profiles.push_back(std::move(profile));
  }
  return cohort;
}

std::pair<Trace, Trace> split_train_test(const Trace& trace, double train_fraction) {
  if (!(train_fraction > 0.0 && train_fraction < 1.0))
    throw InputError("train fraction must lie strictly between 0 and 1");
  const std::size_t n = trace.sessions.size();
  const std::size_t n_train =
      static_cast<std::size_t>(std::ceil(train_fraction * static_cast<double>(n)));
  if (n_train < 3 || n - n_train < 3)
    throw SplitError("trace " + trace.user_id + " too short to window both sides (" +
                     std::to_string(n) + " sessions)");
  Trace train, test;
  train.user_id = trace.user_id;
  test.user_id = trace.user_id;
  train.sessions.assign(trace.sessions.begin(),
                        trace.sessions.begin() + static_cast<std::ptrdiff_t>(n_train));
  test.sessions.assign(trace.sessions.begin() + static_cast<std::ptrdiff_t>(n_train),
                       trace.sessions.end());
  return {std::move(train), std::move(test)};
}

DomainVocab make_building_vocab(int n_locations) {
  if (n_locations < 1 || n_locations > 99) throw ConfigError("building vocab supports 1..99 ids");
  std::vector<std::string> ids;
  char buf[8];
  for (int i = 1; i <= n_locations; ++i) {
    std::snprintf(buf, sizeof(buf), "B%02d", i);
    ids.emplace_back(buf);
  }
  return DomainVocab(SpatialScale::building, std::move(ids));
}

DomainVocab make_access_point_vocab(int n_locations) {
  if (n_locations < 1 || n_locations > 999) throw ConfigError("ap vocab supports 1..999 ids");
  std::vector<std::string> ids;
  char buf[8];
  for (int i = 1; i <= n_locations; ++i) {
    std::snprintf(buf, sizeof(buf), "AP%03d", i);
    ids.emplace_back(buf);
  }
  return DomainVocab(SpatialScale::access_point, std::move(ids));
}

}  // namespace pelican
