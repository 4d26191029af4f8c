// SPDX-License-Identifier: Apache-2.0
//
// Fixtures shared by the unit suites.
#pragma once

#include <filesystem>
#include <random>
#include <string>
#include <vector>

#include "anableps/trace_io.hpp"

namespace anableps::testing {

inline trace::NetworkTrace constant_trace(double kbps, double duration_s) {
  std::vector<trace::BandwidthSample> s;
  const auto n = static_cast<std::size_t>(duration_s / trace::kTraceGranularitySec);
  for (std::size_t i = 0; i < n; ++i) s.push_back({0.5 * static_cast<double>(i), kbps});
  return trace::NetworkTrace(std::move(s));
}

inline trace::NetworkTrace step_trace(double before, double after, double step_at,
                                      double duration_s) {
  std::vector<trace::BandwidthSample> s;
  const auto n = static_cast<std::size_t>(duration_s / trace::kTraceGranularitySec);
  for (std::size_t i = 0; i < n; ++i) {
    const double t = 0.5 * static_cast<double>(i);
    s.push_back({t, t < step_at ? before : after});
  }
  return trace::NetworkTrace(std::move(s));
}

inline trace::ComplexityTrace flat_video(double si, double ti, double duration_s,
                                         double fps = 25.0, int gop = 125) {
  std::vector<trace::ComplexitySample> s;
  const auto n = static_cast<std::size_t>(duration_s / trace::kComplexityPeriodSec);
  for (std::size_t i = 0; i < n; ++i) s.push_back({0.25 * static_cast<double>(i), si, ti});
  return trace::ComplexityTrace(std::move(s), fps, gop);
}

inline std::filesystem::path temp_dir(const std::string& name) {
  auto dir = std::filesystem::temp_directory_path() / ("anableps_test_" + name);
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  return dir;
}

}  // namespace anableps::testing
