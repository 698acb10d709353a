// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <sstream>
#include <string>

#include "pooch/io.hpp"
#include "pooch/simulator.hpp"

namespace pooch {

/// Chrome trace event format: complete ("X") events, one thread per lane
/// (0 = compute, 1 = device-to-host, 2 = host-to-device).
inline json chrome_trace(const Timeline& t) {
  json out = json::array();
  for (const auto& e : t.events) {
    out.push_back({{"name", to_string(e.task)},
                   {"ph", "X"},
                   {"ts", e.start},
                   {"dur", e.end - e.start},
                   {"pid", 0},
                   {"tid", static_cast<int>(e.lane)}});
  }
  return out;
}

/// CSV `time_us,delta_bytes,total_bytes,layer,reason`; total includes the resident base.
inline std::string memory_csv(const MemoryTrace& m) {
  std::ostringstream os;
  os << "time_us,delta_bytes,total_bytes,layer,reason\n";
  Bytes total = m.base;
  for (const auto& e : m.entries) {
    total += e.delta;
    os << e.time << ',' << e.delta << ',' << total << ',' << e.layer << ',' << to_string(e.reason) << '\n';
  }
  return os.str();
}

}  // namespace pooch
