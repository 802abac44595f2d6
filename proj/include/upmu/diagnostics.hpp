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
/// Diagnostic analyses over synchronized phasor frames. Everything here is a
/// pure function of its arguments.

#include <array>
#include <cstdint>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include <Eigen/Dense>

#include "upmu/feeder.hpp"
#include "upmu/phasor.hpp"

namespace upmu::diag {

/// Per-phase complex series, all three the same length.
using PhaseSeries = std::array<std::vector<Complex>, 3>;

/// Voltage (or current) phasors of non-gap frames.
PhaseSeries phase_series(const std::vector<Frame>& frames, bool current = false);

/// Keeps only timestamps present (and not gaps) in every stream, in order.
std::vector<std::vector<Frame>> align_frames(const std::vector<std::vector<Frame>>& streams);

// ---------------------------------------------------------------- phase id

struct PhaseAssignment {
  std::string meter_id;
  std::array<int, 3> mapping{0, 1, 2};  ///< local label i is reference phase mapping[i]
  int offset_deg = 0;                   ///< multiple of 30 in (-180, 180]
  /// Mean Pearson correlation of magnitudes against the tracked reference:
  /// the mapped phase, or for odd multiples of 30 degrees the matching
  /// line-to-line difference.
  double score = 0.0;
  double angle_residual_deg = 0.0;      ///< mean |residual| after removing the offset
};

struct PhaseIdOptions {
  double angle_gate_deg = 5.0;
  /// Candidates scoring within this of the best are treated as tied and the
  /// smallest |offset| wins. Across a delta winding two labelings describe
  /// the same phasors and score identically; this picks one of them.
  double tie_margin = 1e-9;
  std::size_t min_samples = 300;
};

PhaseAssignment identify_phase(const PhaseSeries& reference, const PhaseSeries& candidate,
                               const PhaseIdOptions& options = {});

// ---------------------------------------------------------------- topology

struct TopologyHypothesis {
  std::string id;
  std::vector<bool> closed;  ///< one entry per switch_ids(model)
};

enum class ResidualMetric { Complex, Angle, Magnitude };

struct VotingOptions {
  ResidualMetric metric = ResidualMetric::Complex;
  std::size_t min_samples = 30;
};

struct VotingResult {
  std::string winner;
  std::vector<std::string> hypothesis_ids;
  std::vector<int> votes;
  std::vector<double> shares;
  std::vector<std::string> disqualified;
};

/// `frames` maps meter id to frames; streams are aligned internally. The
/// source voltage comes from the meter at the source bus, and loads at buses
/// with a bus-level meter are replaced by the measured current.
VotingResult detect_topology_voting(const FeederModel& model, const std::vector<TopologyHypothesis>& hypotheses,
                                    const std::map<std::string, std::vector<Frame>>& frames,
                                    const VotingOptions& options = {});

// ---------------------------------------------------------------- CUSUM

struct CusumOptions {
  double drift = 1.0;       ///< k, in noise sigmas
  double threshold = 8.0;   ///< h, in noise sigmas
  std::size_t warmup = 50;  ///< samples used to (re)estimate the baseline
};

/// Two-sided CUSUM. Returns sample indices where a level shift starts.
/// Noise sigma is the MAD of first differences; after each alarm the
/// baseline restarts from the detected change point.
std::vector<std::size_t> cusum_change_points(std::span<const double> series, const CusumOptions& options = {});

std::vector<std::int64_t> detect_switch_transition(std::span<const std::int64_t> times, std::span<const double> series,
                                                   const CusumOptions& options = {});

// ---------------------------------------------------------------- impedance

enum class ZStructure { Symmetric, Diagonal };

struct ImpedanceEstimate {
  std::string branch;
  Matrix3c z_hat = Matrix3c::Zero();
  std::optional<double> relative_error_norm;
  double condition_metric = 1.0;
};

struct ImpedanceOptions {
  double max_condition = 1e3;
  std::size_t min_samples = 60;
  std::optional<Matrix3c> truth;
  std::string branch;
};

/// Condition number of the stacked OLS regressor built from `currents`;
/// +inf when it is rank deficient to machine precision.
double excitation_condition(const std::vector<Vector3c>& currents, ZStructure structure = ZStructure::Symmetric);

/// Solves dv(t) = Z i(t) by OLS under the given structure.
ImpedanceEstimate estimate_impedance(const std::vector<Vector3c>& dv, const std::vector<Vector3c>& currents,
                                     ZStructure structure, const ImpedanceOptions& options = {});

/// V1 - V2 = Z I1, frames from both ends of one line (aligned internally).
ImpedanceEstimate estimate_line_impedance(const std::vector<Frame>& end1, const std::vector<Frame>& end2,
                                          const ImpedanceOptions& options = {});

/// A_t V_high - V_low = Z I_low, with I_low read at the low-side meter.
ImpedanceEstimate estimate_transformer_impedance(const std::vector<Frame>& high, const std::vector<Frame>& low,
                                                 double n_t, const ImpedanceOptions& options = {});

double relative_z_error(const Matrix3c& estimate, const Matrix3c& truth);

// ---------------------------------------------------------------- state estimation

struct VoltageMeasurement {
  std::string bus;
  Vector3c value;
  double sigma_magnitude_pu = 1.7e-4;
  double sigma_angle_rad = deg_to_rad(0.01);
};

/// Forecast load at a bus; consumption positive.
struct LoadPseudoMeasurement {
  std::string bus;
  Vector3c power;
  double sigma_fraction = 0.2;  ///< per-axis sigma of P and Q as a fraction of |S|
};

struct SeMeasurements {
  std::vector<VoltageMeasurement> voltages;
  std::vector<LoadPseudoMeasurement> loads;
  /// Buses without a load pseudo-measurement (other than the source) are
  /// zero-injection, with this sigma on the per-unit injection.
  double zero_injection_sigma_pu = 1e-3;
  /// Floor on a load pseudo-measurement sigma, per unit of the per-phase
  /// power base. Keeps tiny forecasts from acting as hard constraints.
  double min_load_sigma_pu = 1e-4;
};

struct StateEstimate {
  std::vector<std::string> bus_ids;
  std::vector<Vector3c> voltage;
  std::vector<Eigen::Vector3d> std_dev;  ///< sqrt of the rectangular variance sum, volts
  int iterations = 0;

  const Vector3c& at(std::string_view bus) const;
};

struct LinearSeOptions {
  /// Prior mean defaults to the no-load voltages; sigma is per rectangular
  /// axis, per unit.
  std::optional<std::vector<Vector3c>> prior_mean;
  double prior_sigma_pu = 0.1;
};

StateEstimate linear_state_estimate(const FeederModel& model, const SeMeasurements& measurements,
                                    const LinearSeOptions& options = {});

struct WlsOptions {
  double tolerance = 1e-9;
  int max_iterations = 50;
};

StateEstimate wls_state_estimate(const FeederModel& model, const SeMeasurements& measurements,
                                 const WlsOptions& options = {});

/// RMS over buses and phases of |estimate - truth| / base.
double rms_voltage_error_pu(const FeederModel& model, const StateEstimate& estimate,
                            const std::map<std::string, Vector3c>& truth);

// ---------------------------------------------------------------- kPCA

enum class KernelType { Gaussian, Linear };

struct KpcaOptions {
  KernelType kernel = KernelType::Gaussian;
  double kernel_width = 0.0;  ///< <= 0 picks the median pairwise distance
  int n_components = 10;
  double threshold_quantile = 0.99;
  bool standardize = true;
  /// Training scores used for the threshold come from this many contiguous
  /// folds, each scored by a model fit without it. In-sample scores sit
  /// below those of unseen nominal windows. 0 or 1 scores in-sample.
  int calibration_folds = 5;
};

struct EventFlag {
  std::int64_t start_ns = 0;
  std::int64_t end_ns = 0;
  double score = 0.0;
  bool is_anomaly = false;
};

struct FeatureWindow {
  std::int64_t start_ns = 0;
  std::int64_t end_ns = 0;
  Eigen::VectorXd x;
};

class KpcaModel {
 public:
  static KpcaModel fit(const std::vector<Eigen::VectorXd>& train, const KpcaOptions& options = {});

  double score(const Eigen::VectorXd& x) const;
  double threshold() const { return threshold_; }
  /// Scores the threshold was taken from (out-of-fold when calibrated).
  const std::vector<double>& training_scores() const { return train_scores_; }
  int components() const { return static_cast<int>(alpha_.cols()); }

 private:
  static KpcaModel fit_unscored(const std::vector<Eigen::VectorXd>& train, const KpcaOptions& options);
  Eigen::VectorXd standardized(const Eigen::VectorXd& x) const;
  double kernel(const Eigen::VectorXd& a, const Eigen::VectorXd& b) const;

  KpcaOptions opt_;
  Eigen::VectorXd mean_, scale_;
  Eigen::MatrixXd x_;      ///< standardized training data, one row each
  Eigen::VectorXd k_col_;  ///< column means of K
  double k_all_ = 0.0;     ///< grand mean of K
  Eigen::MatrixXd alpha_;  ///< normalized expansion coefficients
  double width_ = 1.0;
  double threshold_ = 0.0;
  std::vector<double> train_scores_;
};

std::vector<EventFlag> detect_events_kpca(const std::vector<FeatureWindow>& train, const std::vector<FeatureWindow>& test,
                                          const KpcaOptions& options = {});

/// Non-overlapping windows of `window_frames` aligned frames. Features per
/// frame: per meter and phase |V| / base, then the angle difference to the
/// same phase of meters[0] (radians). Windows containing gaps are skipped.
std::vector<FeatureWindow> build_feature_windows(const std::vector<std::vector<Frame>>& meters,
                                                 const std::vector<double>& voltage_base,
                                                 std::size_t window_frames = 10);

/// Linear interpolation quantile (the common "type 7" definition).
double quantile(std::vector<double> values, double q);

// ---------------------------------------------------------------- fault location

struct FaultCandidate {
  std::string branch;
  double distance_fraction = 0.0;
  double mismatch = 0.0;
};

struct FaultLocation {
  std::string branch;
  double distance_fraction = 0.0;
  double mismatch = 0.0;
  Vector3c fault_current = Vector3c::Zero();
  std::vector<FaultCandidate> scan;  ///< every grid point evaluated
};

struct FaultLocatorOptions {
  std::string substation_meter;  ///< defaults to the meter at the source bus
  double grid_step = 0.01;
  double min_disturbance_pu = 1e-3;
  /// A distinct location whose mismatch is within this factor of the best
  /// makes the answer ambiguous.
  double ambiguity_ratio = 1.0 + 1e-3;
};

/// Averaged phasors at each meter for one window.
struct MeterSnapshot {
  std::map<std::string, Vector3c> voltage;
  std::map<std::string, Vector3c> current;
};

MeterSnapshot average_window(const std::map<std::string, std::vector<Frame>>& frames, std::int64_t t0, std::int64_t t1);

FaultLocation locate_fault(const FeederModel& model, const MeterSnapshot& prefault, const MeterSnapshot& during,
                           const FaultLocatorOptions& options = {});

// ---------------------------------------------------------------- reverse flow

/// Per frame and phase: Re(V conj(I)) / (va_base / 3) < -deadband.
std::vector<std::array<bool, 3>> detect_reverse_flow(const std::vector<Frame>& frames, double va_base,
                                                     double deadband_pu = 1e-4);

// ---------------------------------------------------------------- requirements

struct StreamStatistics {
  std::optional<double> tve_percent;
  std::optional<double> latency_s;
  std::optional<double> report_rate_hz;
  double nominal_frequency_hz = 60.0;
};

struct CriterionResult {
  std::string name;
  bool pass = false;
  double value = 0.0;
  double limit = 0.0;
  double margin = 0.0;  ///< limit - value for upper limits, value - limit for lower
};

struct ComplianceReport {
  std::string use_case;
  bool pass = true;
  std::vector<CriterionResult> criteria;
};

struct UseCaseLimits {
  std::string name;
  std::string family;  ///< "state estimation" or "topology detection"
  double tve_percent_max;
  double latency_s_max;
  double report_rate_per_cycle_min;
};

const std::vector<UseCaseLimits>& use_case_table();

/// Use-case names match case-insensitively, ignoring punctuation.
ComplianceReport check_requirements(const StreamStatistics& stats, std::string_view use_case);

}  // namespace upmu::diag
