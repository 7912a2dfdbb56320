#include "pelican/trace.hpp"

#include <algorithm>
#include <cstdio>
#include <set>

namespace pelican {

std::string to_string(SpatialScale scale) {
  return scale == SpatialScale::building ? "building" : "access_point";
}

SpatialScale scale_from_string(const std::string& name) {
  if (name == "building") return SpatialScale::building;
  if (name == "access_point") return SpatialScale::access_point;
  throw InputError("unknown spatial scale: " + name);
}

int discretize_entry(int minute_of_day) {
  if (minute_of_day < 0 || minute_of_day >= kMinutesPerDay)
    throw InputError("entry minute out of range: " + std::to_string(minute_of_day));
  return minute_of_day / 30;
}

int discretize_duration(int minutes) {
  if (minutes <= 0) throw InputError("duration must be positive, got " + std::to_string(minutes));
  if (minutes > kDurationCapMinutes) return kDurationBins - 1;
  return (minutes - 1) / 10;  // bin i covers (10i, 10(i+1)]
}

int duration_bin_representative(int bin) {
  if (bin < 0 || bin >= kDurationBins) throw InputError("duration bin out of range");
  return 10 * (bin + 1);
}

int weekday_of_day(std::int64_t day_index) {
  // 1970-01-01 was a Thursday; weekday 0 is Monday.
  std::int64_t w = (day_index + 3) % 7;
  if (w < 0) w += 7;
  return static_cast<int>(w);
}

// Howard Hinnant's civil-date algorithms.
std::int64_t days_from_civil(int y, int m, int d) {
  y -= m <= 2;
  const std::int64_t era = (y >= 0 ? y : y - 399) / 400;
  const unsigned yoe = static_cast<unsigned>(y - era * 400);
  const unsigned doy = (153u * static_cast<unsigned>(m + (m > 2 ? -3 : 9)) + 2) / 5 +
                       static_cast<unsigned>(d) - 1;
  const unsigned doe = yoe * 365 + yoe / 4 - yoe / 100 + doy;
  return era * 146097 + static_cast<std::int64_t>(doe) - 719468;
}

void civil_from_days(std::int64_t z, int& year, int& month, int& day) {
  z += 719468;
  const std::int64_t era = (z >= 0 ? z : z - 146096) / 146097;
  const unsigned doe = static_cast<unsigned>(z - era * 146097);
  const unsigned yoe = (doe - doe / 1460 + doe / 36524 - doe / 146096) / 365;
  const std::int64_t y = static_cast<std::int64_t>(yoe) + era * 400;
  const unsigned doy = doe - (365 * yoe + yoe / 4 - yoe / 100);
  const unsigned mp = (5 * doy + 2) / 153;
  day = static_cast<int>(doy - (153 * mp + 2) / 5 + 1);
  month = static_cast<int>(mp + (mp < 10 ? 3 : -9));
  year = static_cast<int>(y + (month <= 2));
}

int Session::minute_of_day() const {
  std::int64_t m = entry % kMinutesPerDay;
  if (m < 0) m += kMinutesPerDay;
  return static_cast<int>(m);
}

std::int64_t Session::day_index() const {
  std::int64_t e = entry;
  if (e < 0) e -= kMinutesPerDay - 1;  // floor division
  return e / kMinutesPerDay;
}

int Session::day_of_week() const { return weekday_of_day(day_index()); }
int Session::entry_slot() const { return discretize_entry(minute_of_day()); }
int Session::duration_bin() const { return discretize_duration(duration); }

void Session::validate() const {
  if (location.empty()) throw InputError("session has an empty location id");
  if (duration <= 0)
    throw InputError("session at " + location + " has non-positive duration " +
                     std::to_string(duration));
}

Trace Trace::create(std::string user_id, std::vector<Session> sessions) {
  std::stable_sort(sessions.begin(), sessions.end(),
                   [](const Session& a, const Session& b) { return a.entry < b.entry; });
  for (std::size_t i = 0; i < sessions.size(); ++i) {
    sessions[i].validate();
    if (i > 0 && sessions[i].entry < sessions[i - 1].end()) {
      throw InputError("user " + user_id + ": sessions overlap at " +
                       to_iso8601(sessions[i].entry));
    }
  }
  Trace t;
  t.user_id = std::move(user_id);
  t.sessions = std::move(sessions);
  return t;
}

std::vector<std::string> Trace::distinct_locations() const {
  std::set<std::string> seen;
  for (const auto& s : sessions) seen.insert(s.location);
  return {seen.begin(), seen.end()};
}

DomainVocab::DomainVocab(SpatialScale scale, std::vector<std::string> ordered_locations)
    : scale_(scale), locations_(std::move(ordered_locations)) {
  for (std::size_t i = 0; i < locations_.size(); ++i) {
    if (!index_.emplace(locations_[i], static_cast<Index>(i)).second)
      throw InputError("duplicate location id in vocabulary: " + locations_[i]);
  }
}

Index DomainVocab::index_of(const std::string& id) const {
  auto it = index_.find(id);
  if (it == index_.end()) throw DomainError("location not in vocabulary: " + id);
  return it->second;
}

std::string DomainVocab::fingerprint() const {
  std::uint64_t h = 1469598103934665603ULL;
  auto mix = [&h](const char* data, std::size_t n) {
    for (std::size_t i = 0; i < n; ++i) {
      h ^= static_cast<unsigned char>(data[i]);
      h *= 1099511628211ULL;
    }
  };
  const std::string scale = to_string(scale_);
  mix(scale.data(), scale.size());
  for (const auto& loc : locations_) {
    mix("\0", 1);
    mix(loc.data(), loc.size());
  }
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

DomainVocab build_vocab(const std::vector<Trace>& traces, SpatialScale scale) {
  std::set<std::string> ids;
  for (const auto& t : traces)
    for (const auto& s : t.sessions) ids.insert(s.location);
  if (ids.empty()) throw InputError("cannot build a vocabulary from traces with no sessions");
  return DomainVocab(scale, {ids.begin(), ids.end()});
}

DomainVocab equalize_domain(const DomainVocab& target, const DomainVocab& source) {
  if (target.scale() != source.scale())
    throw DomainError("domain equalization requires matching spatial scales");
  for (const auto& loc : target.locations()) {
    if (!source.contains(loc))
      throw DomainError("target location " + loc + " missing from the source domain");
  }
  return source;
}

EncodedSession encode_session(const Session& s, const DomainVocab& vocab) {
  EncodedSession e;
  e.location = static_cast<int>(vocab.index_of(s.location));
  e.entry_slot = s.entry_slot();
  e.duration_bin = s.duration_bin();
  e.day_of_week = s.day_of_week();
  return e;
}

Session decode_session(const EncodedSession& e, const DomainVocab& vocab) {
  if (e.location < 0 || e.location >= vocab.size()) throw DomainError("location index out of range");
  if (e.entry_slot < 0 || e.entry_slot >= kEntrySlots) throw InputError("entry slot out of range");
  if (e.day_of_week < 0 || e.day_of_week >= kDaysOfWeek) throw InputError("day of week out of range");
  Session s;
  s.location = vocab.location(e.location);
  // Smallest non-negative day whose weekday matches: weekday(d) = (d + 3) % 7.
  const std::int64_t day = (e.day_of_week + 4) % 7;
  s.entry = day * kMinutesPerDay + std::int64_t{30} * e.entry_slot;
  s.duration = duration_bin_representative(e.duration_bin);
  return s;
}

VecX encode_features(const EncodedSession& e, Index n_locations) {
  VecX x = VecX::Zero(encoded_width(n_locations));
  if (e.location < 0 || e.location >= n_locations)
    throw DomainError("location index out of range for encoding");
  x(e.location) = 1.0;
  x(n_locations + e.entry_slot) = 1.0;
  x(n_locations + kEntrySlots + e.duration_bin) = 1.0;
  x(n_locations + kEntrySlots + kDurationBins + e.day_of_week) = 1.0;
  return x;
}

void encode_features_into(const EncodedSession& e, Index n_locations, Eigen::Ref<MatX> out,
                          Index column) {
  out.col(column).setZero();
  out(e.location, column) = 1.0;
  out(n_locations + e.entry_slot, column) = 1.0;
  out(n_locations + kEntrySlots + e.duration_bin, column) = 1.0;
  out(n_locations + kEntrySlots + kDurationBins + e.day_of_week, column) = 1.0;
}

std::vector<Window> windowize(const Trace& trace, const DomainVocab& vocab) {
  std::vector<Window> windows;
  if (trace.sessions.size() < 3) return windows;
  windows.reserve(trace.sessions.size() - 2);
  for (std::size_t i = 0; i + 2 < trace.sessions.size(); ++i) {
    Window w;
    w.prev2 = encode_session(trace.sessions[i], vocab);
    w.prev1 = encode_session(trace.sessions[i + 1], vocab);
    w.label = static_cast<int>(vocab.index_of(trace.sessions[i + 2].location));
    windows.push_back(w);
  }
  return windows;
}

}  // namespace pelican
