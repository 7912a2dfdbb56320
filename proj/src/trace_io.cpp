#include <cctype>
#include <cstdio>
#include <fstream>
#include <map>
#include <sstream>

#include "pelican/trace.hpp"

namespace pelican {

namespace {

const char* kCsvHeader = "user_id,entry_iso8601,duration_min,location_id";

bool parse_int(const std::string& text, long long& out) {
  if (text.empty()) return false;
  std::size_t i = (text[0] == '-' || text[0] == '+') ? 1 : 0;
  if (i == text.size()) return false;
  for (; i < text.size(); ++i)
    if (!std::isdigit(static_cast<unsigned char>(text[i]))) return false;
  out = std::stoll(text);
  return true;
}

std::vector<std::string> split_csv_row(const std::string& line) {
  std::vector<std::string> fields;
  std::string field;
  std::stringstream ss(line);
  while (std::getline(ss, field, ',')) fields.push_back(field);
  if (!line.empty() && line.back() == ',') fields.emplace_back();
  return fields;
}

}  // namespace

std::string to_iso8601(std::int64_t absolute_minutes) {
  std::int64_t day = absolute_minutes / kMinutesPerDay;
  std::int64_t rem = absolute_minutes % kMinutesPerDay;
  if (rem < 0) {
    rem += kMinutesPerDay;
    --day;
  }
  int y, m, d;
  civil_from_days(day, y, m, d);
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%04d-%02d-%02dT%02lld:%02lld", y, m, d,
                static_cast<long long>(rem / 60), static_cast<long long>(rem % 60));
  return buf;
}

std::int64_t from_iso8601(const std::string& text) {
  int y = 0, mo = 0, d = 0, h = 0, mi = 0, s = 0;
  int consumed = 0;
  int n = std::sscanf(text.c_str(), "%d-%d-%dT%d:%d%n", &y, &mo, &d, &h, &mi, &consumed);
  if (n != 5) throw ParseError("bad ISO-8601 timestamp: " + text);
  std::string rest = text.substr(static_cast<std::size_t>(consumed));
  if (!rest.empty()) {
    if (std::sscanf(rest.c_str(), ":%d", &s) != 1 || s != 0)
      throw ParseError("timestamps must have minute resolution: " + text);
  }
  if (mo < 1 || mo > 12 || d < 1 || d > 31 || h < 0 || h > 23 || mi < 0 || mi > 59)
    throw ParseError("timestamp field out of range: " + text);
  return days_from_civil(y, mo, d) * std::int64_t{kMinutesPerDay} + h * 60 + mi;
}

std::vector<Trace> ingest_csv(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw InputError("cannot open trace file: " + path);
  std::string line;
  long line_no = 0;
  if (!std::getline(in, line)) throw ParseError("empty file: " + path, 1);
  ++line_no;
  if (!line.empty() && line.back() == '\r') line.pop_back();
  if (line != kCsvHeader)
    throw ParseError("expected header '" + std::string(kCsvHeader) + "'", line_no);

  // Group rows per user in first-seen order; Trace::create sorts and validates.
  std::vector<std::string> user_order;
  std::map<std::string, std::vector<Session>> grouped;
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    auto fields = split_csv_row(line);
    if (fields.size() != 4) throw ParseError("expected 4 fields, got " +
                                             std::to_string(fields.size()), line_no);
    const std::string& user = fields[0];
    if (user.empty()) throw ParseError("empty user_id", line_no);
    Session s;
    try {
      s.entry = from_iso8601(fields[1]);
    } catch (const ParseError& e) {
      throw ParseError(e.what(), line_no);
    }
    long long duration = 0;
    if (!parse_int(fields[2], duration)) throw ParseError("bad duration: " + fields[2], line_no);
    if (duration <= 0) throw ParseError("duration must be positive", line_no);
    s.duration = static_cast<int>(duration);
    s.location = fields[3];
    if (s.location.empty()) throw ParseError("empty location_id", line_no);
    if (grouped.find(user) == grouped.end()) user_order.push_back(user);
    grouped[user].push_back(std::move(s));
  }

  std::vector<Trace> traces;
  traces.reserve(user_order.size());
  for (const auto& user : user_order) traces.push_back(Trace::create(user, grouped[user]));
  return traces;
}

void write_csv(const std::vector<Trace>& traces, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw InputError("cannot write trace file: " + path);
  out << kCsvHeader << "\n";
  for (const auto& t : traces) {
    for (const auto& s : t.sessions) {
      out << t.user_id << ',' << to_iso8601(s.entry) << ',' << s.duration << ',' << s.location
          << "\n";
    }
  }
  if (!out) throw InputError("write failed: " + path);
}

}  // namespace pelican
