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
/// Measurement primitives: phasors, three-phase sets, frames and the
/// angle/TVE arithmetic shared by every other module. Angles are radians
/// throughout; degrees appear only at I/O boundaries.

#include <array>
#include <complex>
#include <cstdint>
#include <numbers>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Core>

namespace upmu {

using Complex = std::complex<double>;
using Vector3c = Eigen::Vector3cd;
using Matrix3c = Eigen::Matrix3cd;
using Matrix3d = Eigen::Matrix3d;

inline constexpr double kPi = std::numbers::pi;

constexpr double deg_to_rad(double deg) noexcept { return deg * kPi / 180.0; }
constexpr double rad_to_deg(double rad) noexcept { return rad * 180.0 / kPi; }

/// Wraps to the half-open branch (-pi, pi]; -pi itself maps to +pi.
/// Throws InvalidAngle for non-finite input.
double wrap_angle(double theta);

/// wrap_angle(a - b).
double angle_diff(double a, double b);

/// RMS magnitude plus wrapped angle. Construction normalizes the angle
/// and rejects negative or non-finite magnitudes.
class Phasor {
 public:
  Phasor() = default;
  Phasor(double magnitude, double angle);

  static Phasor from_complex(Complex z);

  double magnitude() const noexcept { return magnitude_; }
  double angle() const noexcept { return angle_; }
  Complex to_complex() const noexcept { return std::polar(magnitude_, angle_); }

  friend bool operator==(const Phasor&, const Phasor&) = default;

 private:
  double magnitude_ = 0.0;
  double angle_ = 0.0;
};

struct ThreePhaseSet {
  Phasor a, b, c;

  const Phasor& operator[](std::size_t phase) const { return phase == 0 ? a : (phase == 1 ? b : c); }
  Phasor& operator[](std::size_t phase) { return phase == 0 ? a : (phase == 1 ? b : c); }

  static ThreePhaseSet from_vector(const Vector3c& v);
  Vector3c to_vector() const;

  friend bool operator==(const ThreePhaseSet&, const ThreePhaseSet&) = default;
};

/// One timestamped three-phase voltage + current report from one meter.
/// `gap` marks instants where the simulator could not produce a solution.
struct Frame {
  std::int64_t timestamp_ns = 0;
  std::string meter_id;
  ThreePhaseSet voltage;
  ThreePhaseSet current;
  bool gap = false;
};

inline constexpr double kNominalReportRate = 120.0;  // frames per second

/// Fundamental phasor of one nominal cycle of waveform samples, via a
/// rectangular single-bin DFT. Magnitude is RMS (peak / sqrt 2).
/// Throws InsufficientSamples when fewer than 8 samples are given.
Phasor estimate_phasor(std::span<const double> window, double nominal_freq = 60.0);

/// Samples `cycles` nominal cycles of the sinusoid described by `phasor`
/// (RMS convention) at `samples_per_cycle` points per cycle. Up to 512
/// samples per cycle matches the instrument's power-quality mode.
std::vector<double> synthesize_waveform(const Phasor& phasor, int samples_per_cycle, int cycles = 1);

/// Total vector error |measured - reference| / |reference|.
double tve(const Phasor& measured, const Phasor& reference);

/// Lossless-line real power transfer (v1 v2 / x) sin(delta), per unit.
double power_flow_approx(double v1, double v2, double x, double delta);

}  // namespace upmu
