#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <string_view>

namespace evacnet {

enum class Highway { I4, I10, I75, I95, TPK };

inline constexpr std::array<Highway, 5> kHighways{Highway::I4, Highway::I10, Highway::I75, Highway::I95,
                                                  Highway::TPK};

std::string_view to_string(Highway h);

/// Accepts "I4" / "I-4" style names (case-insensitive) and "TPK".
/// Throws UserError on anything else.
Highway parse_highway(std::string_view s);

struct DetectorMeta {
  std::string id;
  Highway highway = Highway::I4;
  double milepost = 0.0;  // miles along the highway
  int lanes = 1;
  double lat = 0.0;
  double lon = 0.0;
};

/// Hours since 1970-01-01T00:00Z.
using Hour = std::int64_t;

/// Parses an hour-resolution ISO-8601 timestamp such as
/// "2024-10-07T13:00:00", "2024-10-07T13:00Z" or "2024-10-07 13:00:00".
/// Minutes and seconds must be zero.
Hour parse_timestamp(std::string_view s);

/// Inverse of parse_timestamp, formatted as "YYYY-MM-DDTHH:00:00".
std::string format_timestamp(Hour h);

/// 0 = Monday ... 6 = Sunday.
int weekday(Hour h);

}  // namespace evacnet
