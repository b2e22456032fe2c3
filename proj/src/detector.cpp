#include "evacnet/detector.hpp"

#include <cctype>
#include <charconv>
#include <cstdio>

#include "evacnet/error.hpp"

namespace evacnet {

namespace {

// Howard Hinnant's days_from_civil / civil_from_days.
std::int64_t days_from_civil(std::int64_t y, unsigned m, unsigned d) {
  y -= m <= 2;
  const std::int64_t era = (y >= 0 ? y : y - 399) / 400;
  const auto yoe = static_cast<unsigned>(y - era * 400);
  const unsigned doy = (153 * (m + (m > 2 ? -3 : 9)) + 2) / 5 + d - 1;
  const unsigned doe = yoe * 365 + yoe / 4 - yoe / 100 + doy;
  return era * 146097 + static_cast<std::int64_t>(doe) - 719468;
}

void civil_from_days(std::int64_t z, std::int64_t& y, unsigned& m, unsigned& d) {
  z += 719468;
  const std::int64_t era = (z >= 0 ? z : z - 146096) / 146097;
  const auto doe = static_cast<unsigned>(z - era * 146097);
  const unsigned yoe = (doe - doe / 1460 + doe / 36524 - doe / 146096) / 365;
  y = static_cast<std::int64_t>(yoe) + era * 400;
  const unsigned doy = doe - (365 * yoe + yoe / 4 - yoe / 100);
  const unsigned mp = (5 * doy + 2) / 153;
  d = doy - (153 * mp + 2) / 5 + 1;
  m = mp < 10 ? mp + 3 : mp - 9;
  y += m <= 2;
}

int parse_fixed(std::string_view s, std::size_t pos, std::size_t len, std::string_view whole) {
  int v = 0;
  if (pos + len > s.size()) throw UserError("malformed timestamp '" + std::string(whole) + "'");
  auto [ptr, ec] = std::from_chars(s.data() + pos, s.data() + pos + len, v);
  if (ec != std::errc{} || ptr != s.data() + pos + len) {
    throw UserError("malformed timestamp '" + std::string(whole) + "'");
  }
  return v;
}

}  // namespace

std::string_view to_string(Highway h) {
  switch (h) {
    case Highway::I4: return "I4";
    case Highway::I10: return "I10";
    case Highway::I75: return "I75";
    case Highway::I95: return "I95";
    case Highway::TPK: return "TPK";
  }
  return "?";
}

Highway parse_highway(std::string_view s) {
  std::string norm;
  for (char c : s) {
    if (c == '-' || c == ' ') continue;
    norm.push_back(static_cast<char>(std::toupper(static_cast<unsigned char>(c))));
  }
  for (Highway h : kHighways) {
    if (norm == to_string(h)) return h;
  }
  throw UserError("unknown highway '" + std::string(s) + "' (expected I4, I10, I75, I95 or TPK)");
}

Hour parse_timestamp(std::string_view s) {
  // YYYY-MM-DDTHH[:MM[:SS]][Z]
  if (s.size() < 13 || s[4] != '-' || s[7] != '-' || (s[10] != 'T' && s[10] != ' ')) {
    throw UserError("malformed timestamp '" + std::string(s) + "'");
  }
  const int y = parse_fixed(s, 0, 4, s);
  const int mo = parse_fixed(s, 5, 2, s);
  const int d = parse_fixed(s, 8, 2, s);
  const int h = parse_fixed(s, 11, 2, s);
  std::size_t pos = 13;
  int minute = 0, second = 0;
  if (pos < s.size() && s[pos] == ':') {
    minute = parse_fixed(s, pos + 1, 2, s);
    pos += 3;
    if (pos < s.size() && s[pos] == ':') {
      second = parse_fixed(s, pos + 1, 2, s);
      pos += 3;
    }
  }
  if (pos < s.size() && s[pos] == 'Z') ++pos;
  if (pos != s.size() || mo < 1 || mo > 12 || d < 1 || d > 31 || h > 23) {
    throw UserError("malformed timestamp '" + std::string(s) + "'");
  }
  if (minute != 0 || second != 0) {
    throw UserError("timestamp '" + std::string(s) + "' is not on an hour boundary");
  }
  return days_from_civil(y, static_cast<unsigned>(mo), static_cast<unsigned>(d)) * 24 + h;
}

std::string format_timestamp(Hour h) {
  std::int64_t days = h >= 0 ? h / 24 : (h - 23) / 24;
  const auto hour = static_cast<int>(h - days * 24);
  std::int64_t y;
  unsigned m, d;
  civil_from_days(days, y, m, d);
  char buf[64];
  std::snprintf(buf, sizeof buf, "%04lld-%02u-%02uT%02d:00:00", static_cast<long long>(y), m, d, hour);
  return buf;
}

int weekday(Hour h) {
  const std::int64_t days = h >= 0 ? h / 24 : (h - 23) / 24;
  // 1970-01-01 was a Thursday (index 3).
  return static_cast<int>(((days % 7) + 7 + 3) % 7);
}

}  // namespace evacnet
