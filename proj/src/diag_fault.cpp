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

#include <algorithm>
#include <cmath>
#include <limits>

#include "upmu/diagnostics.hpp"
#include "upmu/error.hpp"

namespace upmu::diag {

namespace {

/// Meter voltages and the substation current for one solved model.
struct Response {
  std::vector<Vector3c> v;  // remote meters, in order
  Vector3c i_sub;
};

Response observe(const FeederModel& m, const PowerFlowSolution& sol, const std::vector<const Meter*>& remote,
                 const Meter& sub) {
  Response r;
  for (const Meter* mt : remote) r.v.push_back(sol.voltage(mt->bus));
  r.i_sub = meter_current(m, sol, sub);
  return r;
}

struct Locator {
  const FeederModel& base;  // source set to the during-fault substation voltage
  const Meter& sub;
  std::vector<const Meter*> remote;
  std::vector<double> vbase;
  Response at_rest;  // prefault source, no fault current
  std::vector<Vector3c> dv_meas;
  Vector3c di_meas;
  double i_base;

  Response inject(FeederModel& m, const Vector3c& i_f) const {
    m.loads.back().value = i_f;
    return observe(m, solve_power_flow(m), remote, sub);
  }

  /// Mismatch for a fault current drawn at `bus` of `m`, plus that current.
  /// The current is chosen so the substation current change matches.
  std::pair<double, Vector3c> evaluate(const FeederModel& m, const std::string& bus) const {
    FeederModel probe = m;
    probe.loads.push_back({bus, LoadModel::ConstantCurrent, Vector3c::Zero()});
    try {
      const Response r0 = inject(probe, Vector3c::Zero());
      Eigen::Matrix3cd ts;
      for (int p = 0; p < 3; ++p) {
        Vector3c e = Vector3c::Zero();
        e[p] = i_base;
        ts.col(p) = (inject(probe, e).i_sub - r0.i_sub) / i_base;
      }
      const auto solver = ts.completeOrthogonalDecomposition();
      Vector3c i_f = solver.solve(di_meas - (r0.i_sub - at_rest.i_sub));
      Response r = inject(probe, i_f);
      for (int it = 0; it < 30; ++it) {
        const Vector3c gap = di_meas - (r.i_sub - at_rest.i_sub);
        if (gap.cwiseAbs().maxCoeff() < 1e-10 * i_base) break;
        i_f += solver.solve(gap);
        r = inject(probe, i_f);
      }
      double mis = 0.0;
      for (std::size_t k = 0; k < remote.size(); ++k) {
        mis += ((r.v[k] - at_rest.v[k] - dv_meas[k]) / vbase[k]).squaredNorm();
      }
      return {mis, i_f};
    } catch (const Error&) {
      return {std::numeric_limits<double>::infinity(), Vector3c::Zero()};
    }
  }

  std::pair<double, Vector3c> evaluate(const std::string& branch, double f) const {
    const Branch& br = base.branch(branch);
    if (f <= 0.0) return evaluate(base, br.from);
    if (f >= 1.0) return evaluate(base, br.to);
    return evaluate(with_fault(base, branch, f, {false, false, false}), branch + "@fault");
  }
};

}  // namespace

MeterSnapshot average_window(const std::map<std::string, std::vector<Frame>>& frames, std::int64_t t0,
                             std::int64_t t1) {
  MeterSnapshot snap;
  for (const auto& [id, fs] : frames) {
    Vector3c v = Vector3c::Zero(), i = Vector3c::Zero();
    int n = 0;
    for (const Frame& f : fs) {
      if (f.gap || f.timestamp_ns < t0 || f.timestamp_ns >= t1) continue;
      v += f.voltage.to_vector();
      i += f.current.to_vector();
      ++n;
    }
    if (n == 0) continue;
    snap.voltage[id] = v / static_cast<double>(n);
    snap.current[id] = i / static_cast<double>(n);
  }
  return snap;
}

FaultLocation locate_fault(const FeederModel& model, const MeterSnapshot& pre, const MeterSnapshot& during,
                           const FaultLocatorOptions& options) {
  const Meter* sub = nullptr;
  for (const Meter& m : model.meters) {
    const bool named = !options.substation_meter.empty() && m.id == options.substation_meter;
    const bool implied = options.substation_meter.empty() && m.bus == model.source.bus && m.branch.empty();
    if (named || implied) sub = &m;
  }
  if (!sub) throw Error(ErrorCode::InvalidArgument, "fault location needs a substation meter");
  for (const MeterSnapshot* s : {&pre, &during}) {
    if (!s->voltage.count(sub->id) || !s->current.count(sub->id)) {
      throw Error(ErrorCode::InvalidArgument, "substation meter '" + sub->id + "' missing from a window");
    }
  }

  const PerUnitBases bases = per_unit_bases(model);
  const std::size_t src_bus = *model.bus_index(model.source.bus);

  FeederModel rest = model;
  rest.source.voltage = pre.voltage.at(sub->id);
  FeederModel base = model;
  base.source.voltage = during.voltage.at(sub->id);

  Locator loc{base, *sub, {}, {}, {}, {}, {}, bases.current[src_bus]};
  double disturbance =
      ((during.current.at(sub->id) - pre.current.at(sub->id)) / bases.current[src_bus]).cwiseAbs().maxCoeff();
  for (const Meter& m : model.meters) {
    if (&m == sub || !pre.voltage.count(m.id) || !during.voltage.count(m.id)) continue;
    const double vb = bases.voltage[*model.bus_index(m.bus)];
    loc.remote.push_back(&m);
    loc.vbase.push_back(vb);
    loc.dv_meas.push_back(during.voltage.at(m.id) - pre.voltage.at(m.id));
    disturbance = std::max(disturbance, (loc.dv_meas.back() / vb).cwiseAbs().maxCoeff());
  }
  if (loc.remote.empty()) throw Error(ErrorCode::InvalidArgument, "fault location needs at least one remote meter");
  if (disturbance < options.min_disturbance_pu) {
    throw Error(ErrorCode::NoFaultDetected, "largest change between windows is " + std::to_string(disturbance) + " pu");
  }
  loc.di_meas = during.current.at(sub->id) - pre.current.at(sub->id);
  loc.at_rest = observe(rest, solve_power_flow(rest), loc.remote, *sub);

  // Grid scan over every line.
  FaultLocation out;
  const int steps = static_cast<int>(std::lround(1.0 / options.grid_step));
  std::map<std::string, double> bus_mismatch;  // faults exactly at a bus are shared between branches
  for (const Branch& br : base.branches) {
    if (!br.is_line()) continue;
    for (int s = 0; s <= steps; ++s) {
      const double f = static_cast<double>(s) / steps;
      double mis;
      const std::string* at_bus = s == 0 ? &br.from : (s == steps ? &br.to : nullptr);
      if (at_bus && bus_mismatch.count(*at_bus)) {
        mis = bus_mismatch.at(*at_bus);
      } else {
        mis = loc.evaluate(br.id, f).first;
        if (at_bus) bus_mismatch[*at_bus] = mis;
      }
      out.scan.push_back({br.id, f, mis});
    }
  }
  if (out.scan.empty()) throw Error(ErrorCode::InvalidArgument, "model has no lines to search");

  std::size_t best = 0;
  for (std::size_t i = 1; i < out.scan.size(); ++i)
    if (out.scan[i].mismatch < out.scan[best].mismatch) best = i;
  const FaultCandidate top = out.scan[best];
  if (!std::isfinite(top.mismatch)) throw Error(ErrorCode::Diverged, "no candidate location yields a power flow");

  // Anything that is not the same physical spot and scores nearly as well is a rival.
  const double h = options.grid_step;
  auto endpoint = [&](const FaultCandidate& c) -> const std::string* {
    const Branch& br = base.branch(c.branch);
    if (c.distance_fraction <= 3 * h + 1e-12) return &br.from;
    if (c.distance_fraction >= 1 - 3 * h - 1e-12) return &br.to;
    return nullptr;
  };
  const std::string* top_end = endpoint(top);
  std::vector<std::string> rivals;
  for (const auto& c : out.scan) {
    const bool same_branch = c.branch == top.branch && std::abs(c.distance_fraction - top.distance_fraction) <= 3 * h + 1e-12;
    const std::string* e = endpoint(c);
    const bool same_bus = top_end && e && *e == *top_end;
    if (same_branch || same_bus) continue;
    if (c.mismatch <= top.mismatch * options.ambiguity_ratio) {
      rivals.push_back(c.branch + "@" + std::to_string(c.distance_fraction));
    }
  }
  if (!rivals.empty()) {
    rivals.insert(rivals.begin(), top.branch + "@" + std::to_string(top.distance_fraction));
    throw Error(ErrorCode::AmbiguousLocation, "several locations explain the measurements", rivals);
  }

  out.branch = top.branch;
  out.distance_fraction = top.distance_fraction;
  out.mismatch = top.mismatch;
  out.fault_current = loc.evaluate(top.branch, top.distance_fraction).second;

  // Quadratic refinement through the neighbouring grid points on the same branch.
  if (best > 0 && best + 1 < out.scan.size() && out.scan[best - 1].branch == top.branch &&
      out.scan[best + 1].branch == top.branch) {
    const double y0 = out.scan[best - 1].mismatch, y1 = top.mismatch, y2 = out.scan[best + 1].mismatch;
    const double den = y0 - 2 * y1 + y2;
    if (den > 0) {
      const double shift = std::clamp(0.5 * (y0 - y2) / den, -1.0, 1.0) * h;
      const double f = std::clamp(top.distance_fraction + shift, 0.0, 1.0);
      const auto [mis, cur] = loc.evaluate(top.branch, f);
      if (mis < out.mismatch) {
        out.distance_fraction = f;
        out.mismatch = mis;
        out.fault_current = cur;
      }
    }
  }
  return out;
}

}  // namespace upmu::diag
