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
/// Three-phase unbalanced radial feeder model and its power-flow solver.
///
/// Quantities are physical (volts line-to-neutral, amperes, ohms, VA per
/// phase). Per-unit bases are derived per voltage level: the source bus
/// base is the mean source magnitude and each delta-grounded-wye
/// transformer maps a high-side base V to a low-side base sqrt(3) V / n_t.

#include <optional>
#include <string>
#include <string_view>
#include <variant>
#include <vector>

#include "upmu/phasor.hpp"

namespace upmu {

struct LineBranch {
  Matrix3c z;  ///< series impedance, ohms, symmetric
};

/// Delta (high, `from`) to grounded-wye (low, `to`) transformer.
struct TransformerBranch {
  double n_t = 1.0;  ///< rated high-side line-to-line over low-side line-to-neutral
  Matrix3c z_abc;    ///< diagonal, ohms, referred to the low side
};

enum class SwitchStatus { Open, Closed };

struct SwitchBranch {
  SwitchStatus status = SwitchStatus::Closed;
};

struct Branch {
  std::string id;
  std::string from;
  std::string to;
  std::variant<LineBranch, TransformerBranch, SwitchBranch> kind;

  bool is_line() const noexcept { return std::holds_alternative<LineBranch>(kind); }
  bool is_transformer() const noexcept { return std::holds_alternative<TransformerBranch>(kind); }
  bool is_switch() const noexcept { return std::holds_alternative<SwitchBranch>(kind); }
};

enum class LoadModel {
  ConstantPower,      ///< value = complex power drawn per phase, VA
  ConstantCurrent,    ///< value = current phasor drawn per phase, A
  ConstantImpedance,  ///< value = shunt admittance per phase to ground, S
};

struct Load {
  std::string bus;
  LoadModel model = LoadModel::ConstantPower;
  Vector3c value = Vector3c::Zero();
};

struct Source {
  std::string bus;
  Vector3c voltage;  ///< line-to-neutral, volts
};

/// A measurement point. With `branch` set the meter reports that branch's
/// current at the end attached to `bus`, oriented from -> to. Without it
/// the meter reports the source injection (at the source bus) or the
/// total load current drawn at the bus.
struct Meter {
  std::string id;
  std::string bus;
  std::string branch;
};

struct FeederModel {
  double va_base = 1.0e6;  ///< three-phase VA base shared by all voltage levels
  double frequency_hz = 60.0;
  /// Constant-power loads fall back to constant impedance below this
  /// per-unit voltage, as distribution solvers conventionally do.
  double v_min_pu = 0.7;
  Source source;
  std::vector<std::string> buses;
  std::vector<Branch> branches;
  std::vector<Load> loads;
  std::vector<Meter> meters;

  std::optional<std::size_t> bus_index(std::string_view id) const;
  std::optional<std::size_t> branch_index(std::string_view id) const;
  const Branch& branch(std::string_view id) const;
  const Meter& meter(std::string_view id) const;

  /// Checks ids, references and branch structure. Throws ModelViolation.
  void validate() const;
};

/// Balanced positive-sequence phasors a = V, b = V e^{-j120}, c = V e^{+j120}.
Vector3c balanced_voltage(double magnitude, double angle = 0.0);

/// Checks the symmetric-impedance invariant within 1e-12.
bool is_symmetric(const Matrix3c& z, double tol = 1e-12);

/// A_t = (1/n_t) [[1,0,-1],[-1,1,0],[0,-1,1]]. Throws InvalidRatio for n_t <= 0.
Matrix3d transformer_ratio_matrix(double n_t);

/// Per-branch voltage drop V_from - V_to = Z I. Throws ModelViolation on an asymmetric z.
Vector3c line_drop(const Matrix3c& z, const Vector3c& current);
ThreePhaseSet line_drop(const Matrix3c& z, const ThreePhaseSet& current);

/// Low-side line-to-ground voltages A_t V_high - Z_abc I_low.
Vector3c transformer_secondary(const Vector3c& vln_high, const Vector3c& i_low, const TransformerBranch& xfmr);
ThreePhaseSet transformer_secondary(const ThreePhaseSet& vln_high, const ThreePhaseSet& i_low,
                                    const TransformerBranch& xfmr);

struct PerUnitBases {
  std::vector<double> voltage;  ///< line-to-neutral volts, per bus
  std::vector<double> current;  ///< amperes, per bus (va_base / 3 / voltage)
};

PerUnitBases per_unit_bases(const FeederModel& model);

struct PowerFlowOptions {
  double tolerance_pu = 1e-9;
  int max_iterations = 100;
};

struct PowerFlowSolution {
  std::vector<std::string> bus_ids;
  std::vector<Vector3c> bus_voltage;          ///< zero on de-energized buses
  std::vector<bool> energized;
  std::vector<Vector3c> branch_current_from;  ///< entering at `from`, oriented from -> to
  std::vector<Vector3c> branch_current_to;    ///< leaving at `to`, oriented from -> to
  std::vector<Vector3c> load_current;         ///< per model load, drawn from the bus
  Vector3c source_current = Vector3c::Zero();
  int iterations = 0;

  const Vector3c& voltage(std::string_view bus) const;
};

/// Forward-backward sweep over the radial energized tree. The backward
/// pass folds each subtree into a Norton equivalent (admittance plus
/// current source), so linear elements are solved exactly and only
/// constant-power loads drive iteration.
/// Throws NotRadial, Diverged or ModelViolation.
PowerFlowSolution solve_power_flow(const FeederModel& model, const PowerFlowOptions& options = {});

/// Current reported by `meter` in `solution` (see Meter).
Vector3c meter_current(const FeederModel& model, const PowerFlowSolution& solution, const Meter& meter);

/// Copy of `model` with line `branch_id` split at `distance_fraction`
/// (new bus "<id>@fault", segments "<id>#1" and "<id>#2") and a shunt of
/// `impedance_ohm` to ground on each phase flagged in `phases`.
FeederModel with_fault(const FeederModel& model, std::string_view branch_id, double distance_fraction,
                       const std::array<bool, 3>& phases, double impedance_ohm = 1e-3);

/// Copy of `model` with every switch set from `closed` (in branch order).
FeederModel with_switch_states(const FeederModel& model, const std::vector<bool>& closed);

/// Ids of the switch branches, in model order.
std::vector<std::string> switch_ids(const FeederModel& model);

}  // namespace upmu
