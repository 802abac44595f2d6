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

VotingResult detect_topology_voting(const FeederModel& model, const std::vector<TopologyHypothesis>& hypotheses,
                                    const std::map<std::string, std::vector<Frame>>& frames,
                                    const VotingOptions& options) {
  if (hypotheses.empty()) throw Error(ErrorCode::InvalidArgument, "no topology hypotheses given");

  // Meters we can use, substation first.
  const Meter* sub = nullptr;
  std::vector<const Meter*> others;
  for (const Meter& m : model.meters) {
    if (!frames.count(m.id)) continue;
    if (m.bus == model.source.bus && m.branch.empty()) {
      sub = &m;
    } else {
      others.push_back(&m);
    }
  }
  if (!sub) throw Error(ErrorCode::InvalidArgument, "topology voting needs frames from the substation meter");
  if (others.empty()) throw Error(ErrorCode::InvalidArgument, "topology voting needs at least one remote meter");

  std::vector<std::vector<Frame>> streams{frames.at(sub->id)};
  for (const Meter* m : others) streams.push_back(frames.at(m->id));
  const auto aligned = align_frames(streams);
  const std::size_t n = aligned[0].size();
  if (n < options.min_samples) {
    throw Error(ErrorCode::InsufficientSamples,
                std::to_string(n) + " aligned samples, need " + std::to_string(options.min_samples));
  }

  const PerUnitBases bases = per_unit_bases(model);
  std::vector<double> vbase;
  for (const Meter* m : others) vbase.push_back(bases.voltage[*model.bus_index(m->bus)]);

  // Buses whose load is replaced by a measured current.
  std::vector<std::pair<std::string, std::size_t>> metered_loads;  // bus, stream index
  for (std::size_t k = 0; k < others.size(); ++k) {
    if (others[k]->branch.empty()) metered_loads.emplace_back(others[k]->bus, k + 1);
  }

  const std::size_t h = hypotheses.size();
  std::vector<FeederModel> models;
  for (const auto& hyp : hypotheses) {
    FeederModel m = with_switch_states(model, hyp.closed);
    std::erase_if(m.loads, [&](const Load& l) {
      return std::any_of(metered_loads.begin(), metered_loads.end(), [&](const auto& ml) { return ml.first == l.bus; });
    });
    models.push_back(std::move(m));
  }

  std::vector<bool> alive(h, true);
  std::vector<std::vector<double>> residual(h, std::vector<double>(n, 0.0));
  for (std::size_t hi = 0; hi < h; ++hi) {
    FeederModel m = models[hi];
    const std::size_t base_loads = m.loads.size();
    for (const auto& ml : metered_loads) m.loads.push_back({ml.first, LoadModel::ConstantCurrent, Vector3c::Zero()});
    try {
      for (std::size_t t = 0; t < n; ++t) {
        m.source.voltage = aligned[0][t].voltage.to_vector();
        for (std::size_t j = 0; j < metered_loads.size(); ++j) {
          m.loads[base_loads + j].value = aligned[metered_loads[j].second][t].current.to_vector();
        }
        const PowerFlowSolution sol = solve_power_flow(m);
        double r = 0.0;
        for (std::size_t k = 0; k < others.size(); ++k) {
          const Vector3c pred = sol.voltage(others[k]->bus);
          const Vector3c meas = aligned[k + 1][t].voltage.to_vector();
          for (int p = 0; p < 3; ++p) {
            switch (options.metric) {
              case ResidualMetric::Complex:
                r += std::norm((pred[p] - meas[p]) / vbase[k]);
                break;
              case ResidualMetric::Angle: {
                const double d = std::abs(pred[p]) > 0 ? wrap_angle(std::arg(pred[p]) - std::arg(meas[p])) : kPi;
                r += d * d;
                break;
              }
              case ResidualMetric::Magnitude: {
                const double d = (std::abs(pred[p]) - std::abs(meas[p])) / vbase[k];
                r += d * d;
                break;
              }
            }
          }
        }
        residual[hi][t] = r;
      }
    } catch (const Error&) {
      alive[hi] = false;
    }
  }

  VotingResult res;
  res.votes.assign(h, 0);
  for (std::size_t hi = 0; hi < h; ++hi) {
    res.hypothesis_ids.push_back(hypotheses[hi].id);
    if (!alive[hi]) res.disqualified.push_back(hypotheses[hi].id);
  }
  if (res.disqualified.size() == h) {
    throw Error(ErrorCode::AmbiguousTopology, "no hypothesis yields a solvable power flow", res.disqualified);
  }
  // Hypotheses sharing the minimal residual each take the sample's vote.
  for (std::size_t t = 0; t < n; ++t) {
    double lo = std::numeric_limits<double>::infinity();
    for (std::size_t hi = 0; hi < h; ++hi)
      if (alive[hi]) lo = std::min(lo, residual[hi][t]);
    for (std::size_t hi = 0; hi < h; ++hi) {
      if (alive[hi] && residual[hi][t] <= lo * (1.0 + 1e-12)) ++res.votes[hi];
    }
  }
  const int top = *std::max_element(res.votes.begin(), res.votes.end());
  std::vector<std::string> tied;
  for (std::size_t hi = 0; hi < h; ++hi) {
    res.shares.push_back(static_cast<double>(res.votes[hi]) / static_cast<double>(n));
    if (res.votes[hi] == top) tied.push_back(hypotheses[hi].id);
  }
  if (tied.size() > 1) throw Error(ErrorCode::AmbiguousTopology, "hypotheses tie on votes", tied);
  res.winner = tied.front();
  return res;
}

}  // namespace upmu::diag
