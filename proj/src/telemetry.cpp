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

#include "upmu/telemetry.hpp"

#include <algorithm>
#include <cmath>
#include <random>

#include "upmu/error.hpp"

namespace upmu {

std::array<double, 3> LoadProfile::at(double t) const {
  if (times_s.empty()) return {1.0, 1.0, 1.0};
  if (t <= times_s.front()) return scales.front();
  if (t >= times_s.back()) return scales.back();
  const auto hi = static_cast<std::size_t>(std::upper_bound(times_s.begin(), times_s.end(), t) - times_s.begin());
  const std::size_t lo = hi - 1;
  const double w = (t - times_s[lo]) / (times_s[hi] - times_s[lo]);
  std::array<double, 3> out{};
  for (std::size_t p = 0; p < 3; ++p) out[p] = scales[lo][p] + w * (scales[hi][p] - scales[lo][p]);
  return out;
}

LoadProfile LoadProfile::constant(std::array<double, 3> scale) { return LoadProfile{{0.0}, {scale}}; }

LoadProfile LoadProfile::random_walk(std::uint64_t seed, double duration_s, double step_s, double sigma, double rho) {
  if (!(step_s > 0.0) || !(duration_s >= 0.0)) {
    throw Error(ErrorCode::InvalidArgument, "random walk needs a positive step and non-negative duration");
  }
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> gauss(0.0, 1.0);
  LoadProfile out;
  std::array<double, 3> s{1.0, 1.0, 1.0};
  const auto steps = static_cast<std::size_t>(std::ceil(duration_s / step_s)) + 1;
  out.times_s.reserve(steps);
  out.scales.reserve(steps);
  for (std::size_t k = 0; k < steps; ++k) {
    out.times_s.push_back(static_cast<double>(k) * step_s);
    out.scales.push_back(s);
    for (auto& v : s) v = 1.0 + rho * (v - 1.0) + sigma * gauss(rng);
  }
  return out;
}

void EventScript::validate(const FeederModel& model, double horizon_s) const {
  double last = -std::numeric_limits<double>::infinity();
  for (std::size_t i = 0; i < events.size(); ++i) {
    const Event& e = events[i];
    const std::string where = "event " + std::to_string(i);
    if (!(e.time_s > last)) throw Error(ErrorCode::Validation, where + ": times must be strictly increasing");
    if (!(e.time_s >= 0.0 && e.time_s < horizon_s)) {
      throw Error(ErrorCode::Validation, where + ": time outside the simulation horizon");
    }
    last = e.time_s;
    std::visit(
        [&](const auto& a) {
          using T = std::decay_t<decltype(a)>;
          if constexpr (std::is_same_v<T, SwitchToggle>) {
            auto k = model.branch_index(a.branch);
            if (!k || !model.branches[*k].is_switch()) {
              throw Error(ErrorCode::Validation, where + ": '" + a.branch + "' is not a switch");
            }
          } else if constexpr (std::is_same_v<T, LoadStep>) {
            if (!model.bus_index(a.bus)) throw Error(ErrorCode::Validation, where + ": unknown bus '" + a.bus + "'");
            if (!(a.scale >= 0.0)) throw Error(ErrorCode::Validation, where + ": load scale must be >= 0");
          } else if constexpr (std::is_same_v<T, BoltedFault>) {
            auto k = model.branch_index(a.branch);
            if (!k || !model.branches[*k].is_line()) {
              throw Error(ErrorCode::Validation, where + ": '" + a.branch + "' is not a line");
            }
            if (!(a.distance_fraction >= 0.0 && a.distance_fraction <= 1.0)) {
              throw Error(ErrorCode::Validation, where + ": distance_fraction must lie in [0, 1]");
            }
            if (!(a.duration_s > 0.0) || !(a.impedance_ohm > 0.0)) {
              throw Error(ErrorCode::Validation, where + ": fault duration and impedance must be positive");
            }
          } else if constexpr (std::is_same_v<T, VoltageSag>) {
            if (a.source != model.source.bus) throw Error(ErrorCode::Validation, where + ": sag source must be the source bus");
            if (!(a.depth >= 0.0 && a.depth <= 1.0) || !(a.duration_s > 0.0)) {
              throw Error(ErrorCode::Validation, where + ": sag depth in [0, 1] and positive duration required");
            }
          } else {
            if (a.source != model.source.bus) {
              throw Error(ErrorCode::Validation, where + ": oscillation source must be the source bus");
            }
            if (!(a.frequency_hz > 0.0) || !(a.duration_s > 0.0)) {
              throw Error(ErrorCode::Validation, where + ": oscillation frequency and duration must be positive");
            }
          }
        },
        e.action);
  }
}

const std::vector<Frame>& Telemetry::stream(std::string_view meter_id) const {
  auto it = std::find(meter_ids.begin(), meter_ids.end(), meter_id);
  if (it == meter_ids.end()) throw Error(ErrorCode::NotFound, "no meter '" + std::string(meter_id) + "'");
  return frames[static_cast<std::size_t>(it - meter_ids.begin())];
}

const std::vector<Frame>& Telemetry::truth_stream(std::string_view meter_id) const {
  auto it = std::find(meter_ids.begin(), meter_ids.end(), meter_id);
  if (it == meter_ids.end() || truth.empty()) {
    throw Error(ErrorCode::NotFound, "no truth stream for meter '" + std::string(meter_id) + "'");
  }
  return truth[static_cast<std::size_t>(it - meter_ids.begin())];
}

FeederModel model_at(const FeederModel& base, const std::map<std::string, LoadProfile>& load_profiles,
                     const std::optional<LoadProfile>& source_profile, const EventScript& events, double t_s) {
  FeederModel m = base;
  if (source_profile) {
    const auto s = source_profile->at(t_s);
    for (int p = 0; p < 3; ++p) m.source.voltage[p] *= s[static_cast<std::size_t>(p)];
  }
  for (auto& load : m.loads) {
    auto it = load_profiles.find(load.bus);
    if (it == load_profiles.end()) continue;
    const auto s = it->second.at(t_s);
    for (int p = 0; p < 3; ++p) load.value[p] *= s[static_cast<std::size_t>(p)];
  }
  std::vector<const BoltedFault*> faults;
  double source_scale = 1.0;
  for (const Event& e : events.events) {
    if (e.time_s > t_s) break;
    const double since = t_s - e.time_s;
    std::visit(
        [&](const auto& a) {
          using T = std::decay_t<decltype(a)>;
          if constexpr (std::is_same_v<T, SwitchToggle>) {
            auto k = m.branch_index(a.branch);
            if (!k) return;
            if (auto* sw = std::get_if<SwitchBranch>(&m.branches[*k].kind)) {
              sw->status = sw->status == SwitchStatus::Open ? SwitchStatus::Closed : SwitchStatus::Open;
            }
          } else if constexpr (std::is_same_v<T, LoadStep>) {
            for (auto& load : m.loads) {
              if (load.bus == a.bus) load.value *= a.scale;
            }
          } else if constexpr (std::is_same_v<T, BoltedFault>) {
            if (since < a.duration_s) faults.push_back(&a);
          } else if constexpr (std::is_same_v<T, VoltageSag>) {
            if (since < a.duration_s) source_scale *= 1.0 - a.depth;
          } else {
            if (since < a.duration_s) source_scale *= 1.0 + a.amplitude * std::sin(2.0 * kPi * a.frequency_hz * since);
          }
        },
        e.action);
  }
  m.source.voltage *= source_scale;
  for (const BoltedFault* f : faults) {
    m = with_fault(m, f->branch, f->distance_fraction, f->phases, f->impedance_ohm);
  }
  return m;
}

std::int64_t report_time_ns(std::int64_t start_ns, std::size_t k, double rate) {
  const long double offset = static_cast<long double>(k) * 1.0e9L / static_cast<long double>(rate);
  return start_ns + static_cast<std::int64_t>(std::floor(offset));
}

Telemetry simulate_telemetry(const FeederModel& model, const std::map<std::string, LoadProfile>& load_profiles,
                             const std::optional<LoadProfile>& source_profile, const NoiseModel& noise,
                             const EventScript& events, double duration_s, const TelemetryOptions& options) {
  model.validate();
  if (!(duration_s > 0.0) || !(options.report_rate > 0.0)) {
    throw Error(ErrorCode::InvalidArgument, "duration and report rate must be positive");
  }
  if (noise.angle_sigma < 0.0 || noise.magnitude_sigma_pu < 0.0) {
    throw Error(ErrorCode::InvalidArgument, "noise sigmas must be non-negative");
  }
  events.validate(model, duration_s);

  const PerUnitBases bases = per_unit_bases(model);
  Telemetry out;
  const std::size_t n_meters = model.meters.size();
  const auto n_reports = static_cast<std::size_t>(std::floor(duration_s * options.report_rate + 1e-9));
  std::vector<std::size_t> meter_bus(n_meters);
  for (std::size_t i = 0; i < n_meters; ++i) {
    out.meter_ids.push_back(model.meters[i].id);
    meter_bus[i] = *model.bus_index(model.meters[i].bus);
  }
  out.frames.assign(n_meters, {});
  if (options.keep_truth) out.truth.assign(n_meters, {});
  for (auto& f : out.frames) f.reserve(n_reports);

  std::mt19937_64 rng(noise.seed);
  std::normal_distribution<double> gauss(0.0, 1.0);

  auto perturb = [&](const Vector3c& clean, double base) {
    Vector3c noisy;
    for (int p = 0; p < 3; ++p) {
      const double dm = gauss(rng) * noise.magnitude_sigma_pu * base;
      const double da = gauss(rng) * noise.angle_sigma;
      const Complex z = clean[p];
      noisy[p] = z == Complex{} ? z : std::polar(std::abs(z) + dm, std::arg(z) + da);
    }
    return noisy;
  };

  for (std::size_t k = 0; k < n_reports; ++k) {
    const double t = static_cast<double>(k) / options.report_rate;
    const std::int64_t ts = report_time_ns(options.start_ns, k, options.report_rate);
    std::optional<PowerFlowSolution> sol;
    FeederModel current_model;
    try {
      current_model = model_at(model, load_profiles, source_profile, events, t);
      sol = solve_power_flow(current_model);
    } catch (const Error&) {
      sol.reset();
    }
    for (std::size_t i = 0; i < n_meters; ++i) {
      const Meter& meter = model.meters[i];
      Frame clean;
      clean.timestamp_ns = ts;
      clean.meter_id = meter.id;
      Vector3c v = Vector3c::Zero(), c = Vector3c::Zero();
      if (sol) {
        v = sol->voltage(meter.bus);
        const Meter& live = current_model.meter(meter.id);
        c = meter_current(current_model, *sol, live);
      } else {
        clean.gap = true;
      }
      clean.voltage = ThreePhaseSet::from_vector(v);
      clean.current = ThreePhaseSet::from_vector(c);
      Frame noisy = clean;
      const Vector3c nv = perturb(v, bases.voltage[meter_bus[i]]);
      const Vector3c nc = perturb(c, bases.current[meter_bus[i]]);
      if (!clean.gap) {
        noisy.voltage = ThreePhaseSet::from_vector(nv);
        noisy.current = ThreePhaseSet::from_vector(nc);
      }
      out.frames[i].push_back(std::move(noisy));
      if (options.keep_truth) out.truth[i].push_back(std::move(clean));
    }
  }
  return out;
}

}  // namespace upmu
