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

#include "upmu/phasor.hpp"

#include <cmath>

#include "upmu/error.hpp"

namespace upmu {

double wrap_angle(double theta) {
  if (!std::isfinite(theta)) {
    throw Error(ErrorCode::InvalidAngle, "angle must be finite");
  }
  double r = std::remainder(theta, 2.0 * kPi);
  if (r <= -kPi) r += 2.0 * kPi;
  if (r > kPi) r -= 2.0 * kPi;
  return r;
}

double angle_diff(double a, double b) { return wrap_angle(a - b); }

Phasor::Phasor(double magnitude, double angle) {
  if (!std::isfinite(magnitude) || magnitude < 0.0) {
    throw Error(ErrorCode::InvalidArgument, "phasor magnitude must be finite and >= 0");
  }
  magnitude_ = magnitude;
  angle_ = wrap_angle(angle);
}

Phasor Phasor::from_complex(Complex z) {
  if (z == Complex{}) return Phasor{};
  return Phasor(std::abs(z), std::arg(z));
}

ThreePhaseSet ThreePhaseSet::from_vector(const Vector3c& v) {
  return {Phasor::from_complex(v[0]), Phasor::from_complex(v[1]), Phasor::from_complex(v[2])};
}

Vector3c ThreePhaseSet::to_vector() const {
  return Vector3c(a.to_complex(), b.to_complex(), c.to_complex());
}

Phasor estimate_phasor(std::span<const double> window, double nominal_freq) {
  if (window.size() < 8) {
    throw Error(ErrorCode::InsufficientSamples,
                "need at least 8 samples per cycle, got " + std::to_string(window.size()));
  }
  if (!(nominal_freq > 0.0)) {
    throw Error(ErrorCode::InvalidArgument, "nominal frequency must be positive");
  }
  // The window spans exactly one nominal cycle, so the bin frequency is
  // fixed by N alone; nominal_freq only sets the time scale.
  const auto n = static_cast<double>(window.size());
  Complex acc{};
  for (std::size_t k = 0; k < window.size(); ++k) {
    const double w = 2.0 * kPi * static_cast<double>(k) / n;
    acc += window[k] * Complex(std::cos(w), -std::sin(w));
  }
  const Complex peak = acc * (2.0 / n);
  return Phasor::from_complex(peak / std::sqrt(2.0));
}

std::vector<double> synthesize_waveform(const Phasor& phasor, int samples_per_cycle, int cycles) {
  if (samples_per_cycle < 1 || cycles < 1) {
    throw Error(ErrorCode::InvalidArgument, "samples_per_cycle and cycles must be positive");
  }
  const double peak = phasor.magnitude() * std::sqrt(2.0);
  std::vector<double> out(static_cast<std::size_t>(samples_per_cycle) * static_cast<std::size_t>(cycles));
  for (std::size_t k = 0; k < out.size(); ++k) {
    const double w = 2.0 * kPi * static_cast<double>(k) / samples_per_cycle;
    out[k] = peak * std::cos(w + phasor.angle());
  }
  return out;
}

double tve(const Phasor& measured, const Phasor& reference) {
  if (!(reference.magnitude() > 0.0)) {
    throw Error(ErrorCode::DegenerateReference, "reference phasor has zero magnitude");
  }
  return std::abs(measured.to_complex() - reference.to_complex()) / reference.magnitude();
}

double power_flow_approx(double v1, double v2, double x, double delta) {
  if (!(x > 0.0)) {
    throw Error(ErrorCode::InvalidReactance, "reactance must be positive");
  }
  return v1 * v2 / x * std::sin(delta);
}

}  // namespace upmu
