/*
 * Copyright 2026 The upmu Authors
 *
 * Licensed under the Apache License, Version 2.0 (the "License");
 * you may not use this file except in compliance with the License.
 * You may obtain a copy of the License at
 *
 *     http://www.apache.org/licenses/LICENSE-2.0
 *
 * Unless required by applicable law or agreed to in writing, software
 * distributed under the License is distributed on an "AS IS" BASIS,
 * WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
 * See the License for the specific language governing permissions and
 * limitations under the License.
 */

#pragma once

/// \file
/// Synthesizes micro-PMU frame streams from a feeder model: per report
/// instant the event-adjusted model is solved, meter buses are read and
/// Gaussian instrument noise is added.

#include <array>
#include <cstdint>
#include <limits>
#include <map>
#include <optional>
#include <string>
#include <variant>
#include <vector>

#include "upmu/feeder.hpp"

namespace upmu {

struct NoiseModel {
  double angle_sigma = deg_to_rad(0.01);  ///< radians
  double magnitude_sigma_pu = 1.7e-4;     ///< fraction of the bus base
  std::uint64_t seed = 0;

  static NoiseModel none() { return {0.0, 0.0, 0}; }
};

/// Piecewise-linear per-phase multiplier over time. An empty profile is
/// the constant 1.
struct LoadProfile {
  std::vector<double> times_s;
  std::vector<std::array<double, 3>> scales;

  std::array<double, 3> at(double t) const;

  static LoadProfile constant(std::array<double, 3> scale = {1.0, 1.0, 1.0});
  /// Independent mean-reverting walk per phase around 1:
  /// s[k+1] = 1 + rho (s[k] - 1) + sigma * N(0, 1), sampled every `step_s`.
  static LoadProfile random_walk(std::uint64_t seed, double duration_s, double step_s, double sigma,
                                 double rho = 0.98);
};

struct SwitchToggle {
  std::string branch;
};
struct LoadStep {
  std::string bus;
  double scale = 1.0;
};
struct BoltedFault {
  std::string branch;
  double distance_fraction = 0.5;
  std::array<bool, 3> phases{true, false, false};
  double duration_s = 0.1;
  double impedance_ohm = 1e-3;
};
struct VoltageSag {
  std::string source;
  double depth = 0.1;  ///< fractional magnitude reduction
  double duration_s = 0.1;
};
struct Oscillation {
  std::string source;
  double amplitude = 0.01;  ///< fractional magnitude modulation
  double frequency_hz = 1.0;
  double duration_s = std::numeric_limits<double>::infinity();
};

using EventAction = std::variant<SwitchToggle, LoadStep, BoltedFault, VoltageSag, Oscillation>;

struct Event {
  double time_s = 0.0;
  EventAction action;
};

struct EventScript {
  std::vector<Event> events;

  /// Times strictly increasing and inside [0, horizon_s); references resolve.
  void validate(const FeederModel& model, double horizon_s) const;
};

struct TelemetryOptions {
  double report_rate = kNominalReportRate;
  std::int64_t start_ns = 0;
  bool keep_truth = false;
};

struct Telemetry {
  std::vector<std::string> meter_ids;
  std::vector<std::vector<Frame>> frames;  ///< per meter, noisy
  std::vector<std::vector<Frame>> truth;   ///< per meter, noiseless (if kept)

  const std::vector<Frame>& stream(std::string_view meter_id) const;
  const std::vector<Frame>& truth_stream(std::string_view meter_id) const;
};

/// Model in force at `t_s` after applying every event up to that instant.
FeederModel model_at(const FeederModel& base, const std::map<std::string, LoadProfile>& load_profiles,
                     const std::optional<LoadProfile>& source_profile, const EventScript& events, double t_s);

/// Frame timestamp of report k: start + floor(k * 1e9 / rate).
std::int64_t report_time_ns(std::int64_t start_ns, std::size_t k, double rate);

/// One frame stream per meter at `options.report_rate` frames/s. Solver
/// failures produce gap frames rather than aborting. Deterministic for a
/// fixed noise seed.
Telemetry simulate_telemetry(const FeederModel& model, const std::map<std::string, LoadProfile>& load_profiles,
                             const std::optional<LoadProfile>& source_profile, const NoiseModel& noise,
                             const EventScript& events, double duration_s, const TelemetryOptions& options = {});

}  // namespace upmu
