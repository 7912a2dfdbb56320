#pragma once

#include <cstdint>
#include <string>
#include <unordered_map>
#include <vector>

#include "pelican/errors.hpp"
#include "pelican/types.hpp"

namespace pelican {

enum class SpatialScale { building, access_point };

std::string to_string(SpatialScale scale);
SpatialScale scale_from_string(const std::string& name);

/// Discretizes a minute-of-day entry time into one of 48 half-hour slots.
/// Requires 0 <= minute_of_day < 1440.
int discretize_entry(int minute_of_day);

/// Discretizes a positive duration into 24 ten-minute bins; bin i covers
/// (10*i, 10*(i+1)] minutes and everything above 240 falls in bin 23.
int discretize_duration(int minutes);

/// Canonical duration for an enumerated bin: the bin's right edge.
/// Round-trips: discretize_duration(duration_bin_representative(b)) == b.
int duration_bin_representative(int bin);

/// Weekday of an absolute day index (days since 1970-01-01); 0 = Monday.
int weekday_of_day(std::int64_t day_index);

std::int64_t days_from_civil(int year, int month, int day);
void civil_from_days(std::int64_t days, int& year, int& month, int& day);

/// One dwell at a location. Entry times live on an absolute timeline
/// (minutes since 1970-01-01 00:00) so windows can cross midnight without
/// losing the day of week.
struct Session {
  std::string location;
  std::int64_t entry = 0;  // absolute minutes
  int duration = 0;        // minutes, > 0

  int minute_of_day() const;
  std::int64_t day_index() const;
  int day_of_week() const;  // 0 = Monday, consistent with entry's absolute day
  int entry_slot() const;
  int duration_bin() const;
  std::int64_t end() const { return entry + duration; }

  void validate() const;  // throws InputError
};

/// Time-ordered, non-overlapping sessions of one user.
struct Trace {
  std::string user_id;
  std::vector<Session> sessions;

  /// Sorts by entry time and validates the invariants (positive durations,
  /// no overlap). Throws InputError on violation.
  static Trace create(std::string user_id, std::vector<Session> sessions);

  std::size_t size() const { return sessions.size(); }
  std::vector<std::string> distinct_locations() const;
};

/// Ordered location alphabet for one spatial scale. Index lookup is a
/// bijection onto [0, size).
class DomainVocab {
 public:
  DomainVocab() = default;
  DomainVocab(SpatialScale scale, std::vector<std::string> ordered_locations);

  SpatialScale scale() const { return scale_; }
  Index size() const { return static_cast<Index>(locations_.size()); }
  const std::vector<std::string>& locations() const { return locations_; }
  const std::string& location(Index i) const { return locations_.at(static_cast<std::size_t>(i)); }

  bool contains(const std::string& id) const { return index_.count(id) != 0; }
  Index index_of(const std::string& id) const;  // throws DomainError

  /// FNV-1a over scale + ordered ids; binds models to the vocabulary.
  std::string fingerprint() const;

 private:
  SpatialScale scale_ = SpatialScale::building;
  std::vector<std::string> locations_;
  std::unordered_map<std::string, Index> index_;
};

/// Sorted lexicographic union of all location ids in `traces`.
DomainVocab build_vocab(const std::vector<Trace>& traces, SpatialScale scale);

/// Verifies target is a subset of source (same scale) and returns the source
/// vocabulary, whose ordering target data must be encoded against.
DomainVocab equalize_domain(const DomainVocab& target, const DomainVocab& source);

/// A session reduced to its four categorical features.
struct EncodedSession {
  int location = 0;      // vocab index
  int entry_slot = 0;    // 0..47
  int duration_bin = 0;  // 0..23
  int day_of_week = 0;   // 0..6

  bool operator==(const EncodedSession&) const = default;
};

EncodedSession encode_session(const Session& s, const DomainVocab& vocab);

/// Canonical session for an encoded one: entry at the slot start of a day
/// with the requested weekday, duration at the bin representative.
/// encode_session(decode_session(e)) == e.
Session decode_session(const EncodedSession& e, const DomainVocab& vocab);

/// One training example: two consecutive encoded sessions and the index of
/// the location that followed them.
struct Window {
  EncodedSession prev2;  // x_{t-2}
  EncodedSession prev1;  // x_{t-1}
  int label = 0;         // vocab index of l_t
};

/// Materializes the concatenated one-hot blocks [location | slot | bin | dow].
VecX encode_features(const EncodedSession& e, Index n_locations);
void encode_features_into(const EncodedSession& e, Index n_locations, Eigen::Ref<MatX> out, Index column);

/// One window per consecutive session triple; traces with fewer than three
/// sessions yield an empty list.
std::vector<Window> windowize(const Trace& trace, const DomainVocab& vocab);

/// Session CSV schema: header `user_id,entry_iso8601,duration_min,location_id`.
/// Rows may arrive out of order; they are grouped per user and sorted.
/// Throws ParseError (with line number) on malformed rows and InputError on
/// invariant violations such as overlapping sessions.
std::vector<Trace> ingest_csv(const std::string& path);
void write_csv(const std::vector<Trace>& traces, const std::string& path);

std::string to_iso8601(std::int64_t absolute_minutes);
std::int64_t from_iso8601(const std::string& text);  // throws ParseError

}  // namespace pelican
