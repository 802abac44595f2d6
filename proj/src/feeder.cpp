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

#include "upmu/feeder.hpp"

#include <algorithm>
#include <cmath>
#include <deque>
#include <set>
#include <unordered_map>

#include <Eigen/LU>

#include "upmu/error.hpp"

namespace upmu {

namespace {

const double kSqrt3 = std::sqrt(3.0);

[[noreturn]] void violation(const std::string& what) { throw Error(ErrorCode::ModelViolation, what); }

Matrix3c as_complex(const Matrix3d& m) { return m.cast<Complex>(); }

/// Radial traversal of the energized, closed-switch graph.
struct Tree {
  std::vector<std::size_t> order;        // BFS order, source first
  std::vector<std::ptrdiff_t> parent;    // bus -> parent bus, -1 for the source / unreached
  std::vector<std::ptrdiff_t> via;       // bus -> branch from its parent
  std::vector<bool> forward;             // parent edge traversed from -> to
  std::vector<bool> reached;
};

struct Edge {
  std::size_t branch;
  std::size_t other;
  bool forward;
};

struct Indexed {
  std::unordered_map<std::string_view, std::size_t> bus;
  std::vector<std::size_t> from, to;
  std::size_t source = 0;
};

Indexed index_model(const FeederModel& model) {
  Indexed ix;
  for (std::size_t i = 0; i < model.buses.size(); ++i) ix.bus.emplace(model.buses[i], i);
  auto lookup = [&](const std::string& id) {
    auto it = ix.bus.find(id);
    if (it == ix.bus.end()) violation("unknown bus '" + id + "'");
    return it->second;
  };
  ix.source = lookup(model.source.bus);
  ix.from.reserve(model.branches.size());
  ix.to.reserve(model.branches.size());
  for (const auto& br : model.branches) {
    ix.from.push_back(lookup(br.from));
    ix.to.push_back(lookup(br.to));
  }
  return ix;
}

Tree build_tree(const FeederModel& model, const Indexed& ix, bool include_open) {
  const std::size_t n = model.buses.size();
  std::vector<std::vector<Edge>> adj(n);
  for (std::size_t k = 0; k < model.branches.size(); ++k) {
    const auto& br = model.branches[k];
    if (const auto* sw = std::get_if<SwitchBranch>(&br.kind); sw && sw->status == SwitchStatus::Open && !include_open) {
      continue;
    }
    adj[ix.from[k]].push_back({k, ix.to[k], true});
    adj[ix.to[k]].push_back({k, ix.from[k], false});
  }
  Tree t;
  t.parent.assign(n, -1);
  t.via.assign(n, -1);
  t.forward.assign(n, true);
  t.reached.assign(n, false);
  std::deque<std::size_t> queue{ix.source};
  t.reached[ix.source] = true;
  while (!queue.empty()) {
    const std::size_t u = queue.front();
    queue.pop_front();
    t.order.push_back(u);
    for (const Edge& e : adj[u]) {
      if (static_cast<std::ptrdiff_t>(e.branch) == t.via[u]) continue;
      if (t.reached[e.other]) {
        if (include_open) continue;
        throw Error(ErrorCode::NotRadial, "loop through branch '" + model.branches[e.branch].id + "'");
      }
      t.reached[e.other] = true;
      t.parent[e.other] = static_cast<std::ptrdiff_t>(u);
      t.via[e.other] = static_cast<std::ptrdiff_t>(e.branch);
      t.forward[e.other] = e.forward;
      queue.push_back(e.other);
    }
  }
  return t;
}

}  // namespace

std::optional<std::size_t> FeederModel::bus_index(std::string_view id) const {
  auto it = std::find(buses.begin(), buses.end(), id);
  if (it == buses.end()) return std::nullopt;
  return static_cast<std::size_t>(it - buses.begin());
}

std::optional<std::size_t> FeederModel::branch_index(std::string_view id) const {
  auto it = std::find_if(branches.begin(), branches.end(), [&](const Branch& b) { return b.id == id; });
  if (it == branches.end()) return std::nullopt;
  return static_cast<std::size_t>(it - branches.begin());
}

const Branch& FeederModel::branch(std::string_view id) const {
  auto k = branch_index(id);
  if (!k) throw Error(ErrorCode::NotFound, "no branch '" + std::string(id) + "'");
  return branches[*k];
}

const Meter& FeederModel::meter(std::string_view id) const {
  auto it = std::find_if(meters.begin(), meters.end(), [&](const Meter& m) { return m.id == id; });
  if (it == meters.end()) throw Error(ErrorCode::NotFound, "no meter '" + std::string(id) + "'");
  return *it;
}

void FeederModel::validate() const {
  std::set<std::string_view> seen;
  for (const auto& b : buses) {
    if (b.empty()) violation("empty bus id");
    if (!seen.insert(b).second) violation("duplicate bus '" + b + "'");
  }
  if (!bus_index(source.bus)) violation("source bus '" + source.bus + "' is not a bus");
  if (!source.voltage.allFinite()) violation("source voltage must be finite");
  if (!(va_base > 0.0) || !(frequency_hz > 0.0)) violation("va_base and frequency must be positive");
  seen.clear();
  for (const auto& br : branches) {
    if (br.id.empty()) violation("empty branch id");
    if (!seen.insert(br.id).second) violation("duplicate branch '" + br.id + "'");
    if (!bus_index(br.from) || !bus_index(br.to)) violation("branch '" + br.id + "' references an unknown bus");
    if (br.from == br.to) violation("branch '" + br.id + "' is a self loop");
    if (const auto* line = std::get_if<LineBranch>(&br.kind)) {
      if (!line->z.allFinite()) violation("branch '" + br.id + "' impedance must be finite");
      if (!is_symmetric(line->z)) violation("line '" + br.id + "' impedance is not symmetric");
      for (int p = 0; p < 3; ++p) {
        if (line->z(p, p).real() < 0.0) violation("line '" + br.id + "' has negative resistance");
      }
    } else if (const auto* tx = std::get_if<TransformerBranch>(&br.kind)) {
      if (!(tx->n_t > 0.0)) throw Error(ErrorCode::InvalidRatio, "transformer '" + br.id + "' needs n_t > 0");
      for (int i = 0; i < 3; ++i) {
        for (int j = 0; j < 3; ++j) {
          if (i != j && tx->z_abc(i, j) != Complex{}) violation("transformer '" + br.id + "' impedance must be diagonal");
        }
        if (tx->z_abc(i, i).real() < 0.0) violation("transformer '" + br.id + "' has negative resistance");
      }
    }
  }
  for (const auto& load : loads) {
    if (!bus_index(load.bus)) violation("load references unknown bus '" + load.bus + "'");
    if (!load.value.allFinite()) violation("load at '" + load.bus + "' must be finite");
  }
  seen.clear();
  for (const auto& m : meters) {
    if (!seen.insert(m.id).second) violation("duplicate meter '" + m.id + "'");
    if (!bus_index(m.bus)) violation("meter '" + m.id + "' references unknown bus '" + m.bus + "'");
    if (!m.branch.empty()) {
      auto k = branch_index(m.branch);
      if (!k) violation("meter '" + m.id + "' references unknown branch '" + m.branch + "'");
      if (branches[*k].from != m.bus && branches[*k].to != m.bus) {
        violation("meter '" + m.id + "' bus is not an end of branch '" + m.branch + "'");
      }
    }
  }
}

Vector3c balanced_voltage(double magnitude, double angle) {
  return Vector3c(std::polar(magnitude, angle), std::polar(magnitude, angle - 2.0 * kPi / 3.0),
                  std::polar(magnitude, angle + 2.0 * kPi / 3.0));
}

bool is_symmetric(const Matrix3c& z, double tol) {
  for (int i = 0; i < 3; ++i) {
    for (int j = i + 1; j < 3; ++j) {
      if (std::abs(z(i, j) - z(j, i)) > tol) return false;
    }
  }
  return true;
}

Matrix3d transformer_ratio_matrix(double n_t) {
  if (!(n_t > 0.0) || !std::isfinite(n_t)) {
    throw Error(ErrorCode::InvalidRatio, "transformer ratio must be positive");
  }
  Matrix3d a;
  a << 1, 0, -1, -1, 1, 0, 0, -1, 1;
  return a / n_t;
}

Vector3c line_drop(const Matrix3c& z, const Vector3c& current) {
  if (!is_symmetric(z)) violation("line impedance is not symmetric");
  return z * current;
}

ThreePhaseSet line_drop(const Matrix3c& z, const ThreePhaseSet& current) {
  return ThreePhaseSet::from_vector(line_drop(z, current.to_vector()));
}

Vector3c transformer_secondary(const Vector3c& vln_high, const Vector3c& i_low, const TransformerBranch& xfmr) {
  return as_complex(transformer_ratio_matrix(xfmr.n_t)) * vln_high - xfmr.z_abc * i_low;
}

ThreePhaseSet transformer_secondary(const ThreePhaseSet& vln_high, const ThreePhaseSet& i_low,
                                    const TransformerBranch& xfmr) {
  return ThreePhaseSet::from_vector(transformer_secondary(vln_high.to_vector(), i_low.to_vector(), xfmr));
}

PerUnitBases per_unit_bases(const FeederModel& model) {
  const Indexed ix = index_model(model);
  const Tree tree = build_tree(model, ix, /*include_open=*/true);
  const double source_base = model.source.voltage.cwiseAbs().mean();
  PerUnitBases bases;
  bases.voltage.assign(model.buses.size(), source_base);
  for (std::size_t u : tree.order) {
    if (tree.parent[u] < 0) continue;
    const double up = bases.voltage[static_cast<std::size_t>(tree.parent[u])];
    const auto& br = model.branches[static_cast<std::size_t>(tree.via[u])];
    if (const auto* tx = std::get_if<TransformerBranch>(&br.kind)) {
      bases.voltage[u] = tree.forward[u] ? up * kSqrt3 / tx->n_t : up * tx->n_t / kSqrt3;
    } else {
      bases.voltage[u] = up;
    }
  }
  bases.current.resize(bases.voltage.size());
  for (std::size_t i = 0; i < bases.voltage.size(); ++i) {
    bases.current[i] = model.va_base / 3.0 / bases.voltage[i];
  }
  return bases;
}

const Vector3c& PowerFlowSolution::voltage(std::string_view bus) const {
  auto it = std::find(bus_ids.begin(), bus_ids.end(), bus);
  if (it == bus_ids.end()) throw Error(ErrorCode::NotFound, "no bus '" + std::string(bus) + "'");
  return bus_voltage[static_cast<std::size_t>(it - bus_ids.begin())];
}

PowerFlowSolution solve_power_flow(const FeederModel& model, const PowerFlowOptions& options) {
  const Indexed ix = index_model(model);
  const Tree tree = build_tree(model, ix, /*include_open=*/false);
  for (const auto& br : model.branches) {
    if (const auto* tx = std::get_if<TransformerBranch>(&br.kind); tx && !(tx->n_t > 0.0)) {
      throw Error(ErrorCode::InvalidRatio, "transformer '" + br.id + "' needs n_t > 0");
    }
  }
  const std::size_t n = model.buses.size();
  const PerUnitBases bases = per_unit_bases(model);

  std::vector<std::size_t> load_bus(model.loads.size());
  bool nonlinear = false;
  for (std::size_t k = 0; k < model.loads.size(); ++k) {
    auto it = ix.bus.find(model.loads[k].bus);
    if (it == ix.bus.end()) violation("load references unknown bus '" + model.loads[k].bus + "'");
    load_bus[k] = it->second;
    if (model.loads[k].model == LoadModel::ConstantPower && tree.reached[it->second]) nonlinear = true;
  }

  // Per-load linear snapshot: drawn current = y .* V + j.
  std::vector<Vector3c> load_y(model.loads.size()), load_j(model.loads.size());
  auto linearize_loads = [&](const std::vector<Vector3c>& v) {
    for (std::size_t k = 0; k < model.loads.size(); ++k) {
      const Load& load = model.loads[k];
      const std::size_t b = load_bus[k];
      load_y[k].setZero();
      load_j[k].setZero();
      if (!tree.reached[b]) continue;
      switch (load.model) {
        case LoadModel::ConstantImpedance:
          load_y[k] = load.value;
          break;
        case LoadModel::ConstantCurrent:
          load_j[k] = load.value;
          break;
        case LoadModel::ConstantPower: {
          const double v_floor = model.v_min_pu * bases.voltage[b];
          for (int p = 0; p < 3; ++p) {
            const Complex vp = v[b][p];
            if (std::abs(vp) >= v_floor && v_floor > 0.0) {
              load_j[k][p] = std::conj(load.value[p] / vp);
            } else {
              load_y[k][p] = std::conj(load.value[p]) / (v_floor * v_floor);
            }
          }
          break;
        }
      }
    }
  };

  std::vector<Matrix3c> y_eq(n), m_inv(n);
  std::vector<Vector3c> j_eq(n), zj(n);
  std::vector<Vector3c> v(n, Vector3c::Zero());
  const Matrix3c identity = Matrix3c::Identity();

  auto sweep = [&]() {
    for (std::size_t b = 0; b < n; ++b) {
      y_eq[b].setZero();
      j_eq[b].setZero();
    }
    for (std::size_t k = 0; k < model.loads.size(); ++k) {
      y_eq[load_bus[k]].diagonal() += load_y[k];
      j_eq[load_bus[k]] += load_j[k];
    }
    // Backward: fold each subtree into its parent.
    for (auto it = tree.order.rbegin(); it != tree.order.rend(); ++it) {
      const std::size_t c = *it;
      if (tree.parent[c] < 0) continue;
      const auto p = static_cast<std::size_t>(tree.parent[c]);
      const Branch& br = model.branches[static_cast<std::size_t>(tree.via[c])];
      if (const auto* line = std::get_if<LineBranch>(&br.kind)) {
        m_inv[c] = (identity + line->z * y_eq[c]).inverse();
        zj[c] = line->z * j_eq[c];
        y_eq[p] += y_eq[c] * m_inv[c];
        j_eq[p] += j_eq[c] - y_eq[c] * m_inv[c] * zj[c];
      } else if (const auto* tx = std::get_if<TransformerBranch>(&br.kind)) {
        if (!tree.forward[c]) violation("transformer '" + br.id + "' is fed from its low side");
        const Matrix3c a = as_complex(transformer_ratio_matrix(tx->n_t));
        m_inv[c] = (identity + tx->z_abc * y_eq[c]).inverse();
        zj[c] = tx->z_abc * j_eq[c];
        y_eq[p] += a.transpose() * y_eq[c] * m_inv[c] * a;
        j_eq[p] += a.transpose() * (j_eq[c] - y_eq[c] * m_inv[c] * zj[c]);
      } else {
        y_eq[p] += y_eq[c];
        j_eq[p] += j_eq[c];
      }
    }
    // Forward: voltages from the source outward.
    std::vector<Vector3c> next(n, Vector3c::Zero());
    next[ix.source] = model.source.voltage;
    for (std::size_t c : tree.order) {
      if (tree.parent[c] < 0) continue;
      const Vector3c& vp = next[static_cast<std::size_t>(tree.parent[c])];
      const Branch& br = model.branches[static_cast<std::size_t>(tree.via[c])];
      if (br.is_line()) {
        next[c] = m_inv[c] * (vp - zj[c]);
      } else if (const auto* tx = std::get_if<TransformerBranch>(&br.kind)) {
        next[c] = m_inv[c] * (as_complex(transformer_ratio_matrix(tx->n_t)) * vp - zj[c]);
      } else {
        next[c] = vp;
      }
    }
    return next;
  };

  // Start from the no-load profile.
  linearize_loads(v);
  for (auto& y : load_y) y.setZero();
  for (auto& j : load_j) j.setZero();
  v = sweep();

  PowerFlowSolution sol;
  int iter = 0;
  for (;;) {
    ++iter;
    linearize_loads(v);
    std::vector<Vector3c> next = sweep();
    double delta = 0.0;
    for (std::size_t b = 0; b < n; ++b) {
      if (!next[b].allFinite()) throw Error(ErrorCode::Diverged, "non-finite voltage at '" + model.buses[b] + "'");
      delta = std::max(delta, (next[b] - v[b]).cwiseAbs().maxCoeff() / bases.voltage[b]);
    }
    v = std::move(next);
    if (!nonlinear || delta < options.tolerance_pu) break;
    if (iter >= options.max_iterations) {
      throw Error(ErrorCode::Diverged, "no convergence in " + std::to_string(options.max_iterations) + " iterations");
    }
  }

  sol.iterations = iter;
  sol.bus_ids = model.buses;
  sol.bus_voltage = v;
  sol.energized = tree.reached;
  sol.branch_current_from.assign(model.branches.size(), Vector3c::Zero());
  sol.branch_current_to.assign(model.branches.size(), Vector3c::Zero());
  for (std::size_t c : tree.order) {
    if (tree.parent[c] < 0) continue;
    const auto k = static_cast<std::size_t>(tree.via[c]);
    const Vector3c into_child = y_eq[c] * v[c] + j_eq[c];
    const Branch& br = model.branches[k];
    if (const auto* tx = std::get_if<TransformerBranch>(&br.kind)) {
      sol.branch_current_to[k] = into_child;
      sol.branch_current_from[k] = as_complex(transformer_ratio_matrix(tx->n_t)).transpose() * into_child;
    } else {
      const Vector3c oriented = tree.forward[c] ? into_child : Vector3c(-into_child);
      sol.branch_current_from[k] = oriented;
      sol.branch_current_to[k] = oriented;
    }
  }
  sol.source_current = y_eq[ix.source] * v[ix.source] + j_eq[ix.source];
  sol.load_current.resize(model.loads.size());
  for (std::size_t k = 0; k < model.loads.size(); ++k) {
    sol.load_current[k] = load_y[k].cwiseProduct(v[load_bus[k]]) + load_j[k];
  }
  return sol;
}

Vector3c meter_current(const FeederModel& model, const PowerFlowSolution& solution, const Meter& meter) {
  if (!meter.branch.empty()) {
    auto k = model.branch_index(meter.branch);
    if (!k) throw Error(ErrorCode::NotFound, "no branch '" + meter.branch + "'");
    return model.branches[*k].from == meter.bus ? solution.branch_current_from[*k] : solution.branch_current_to[*k];
  }
  if (meter.bus == model.source.bus) return solution.source_current;
  Vector3c total = Vector3c::Zero();
  for (std::size_t k = 0; k < model.loads.size(); ++k) {
    if (model.loads[k].bus == meter.bus) total += solution.load_current[k];
  }
  return total;
}

FeederModel with_fault(const FeederModel& model, std::string_view branch_id, double distance_fraction,
                       const std::array<bool, 3>& phases, double impedance_ohm) {
  auto k = model.branch_index(branch_id);
  if (!k) throw Error(ErrorCode::NotFound, "no branch '" + std::string(branch_id) + "'");
  const Branch original = model.branches[*k];
  const auto* line = std::get_if<LineBranch>(&original.kind);
  if (!line) violation("faults can only be placed on lines, not '" + original.id + "'");
  if (!(distance_fraction >= 0.0 && distance_fraction <= 1.0)) {
    throw Error(ErrorCode::InvalidArgument, "fault distance fraction must lie in [0, 1]");
  }
  if (!(impedance_ohm > 0.0)) throw Error(ErrorCode::InvalidArgument, "fault impedance must be positive");

  FeederModel out = model;
  const std::string fault_bus = original.id + "@fault";
  const std::string first = original.id + "#1";
  const std::string second = original.id + "#2";
  out.buses.push_back(fault_bus);
  out.branches[*k] = Branch{first, original.from, fault_bus, LineBranch{line->z * distance_fraction}};
  out.branches.insert(out.branches.begin() + static_cast<std::ptrdiff_t>(*k) + 1,
                      Branch{second, fault_bus, original.to, LineBranch{line->z * (1.0 - distance_fraction)}});
  for (auto& m : out.meters) {
    if (m.branch == original.id) m.branch = (m.bus == original.from) ? first : second;
  }
  Vector3c y = Vector3c::Zero();
  for (int p = 0; p < 3; ++p) {
    if (phases[static_cast<std::size_t>(p)]) y[p] = 1.0 / impedance_ohm;
  }
  out.loads.push_back(Load{fault_bus, LoadModel::ConstantImpedance, y});
  return out;
}

FeederModel with_switch_states(const FeederModel& model, const std::vector<bool>& closed) {
  FeederModel out = model;
  std::size_t i = 0;
  for (auto& br : out.branches) {
    if (auto* sw = std::get_if<SwitchBranch>(&br.kind)) {
      if (i >= closed.size()) throw Error(ErrorCode::InvalidArgument, "switch state vector too short");
      sw->status = closed[i++] ? SwitchStatus::Closed : SwitchStatus::Open;
    }
  }
  if (i != closed.size()) throw Error(ErrorCode::InvalidArgument, "switch state vector too long");
  return out;
}

std::vector<std::string> switch_ids(const FeederModel& model) {
  std::vector<std::string> ids;
  for (const auto& br : model.branches) {
    if (br.is_switch()) ids.push_back(br.id);
  }
  return ids;
}

}  // namespace upmu
