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

#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace upmu {

/// Failure classes raised by the library. Every throw site uses one of
/// these so callers (and the CLI exit-code mapping) can branch on kind.
enum class ErrorCode {
  // phasor-core
  InvalidAngle,
  InsufficientSamples,
  DegenerateReference,
  InvalidReactance,
  // feeder-sim
  InvalidRatio,
  ModelViolation,
  NotRadial,
  Diverged,
  // timeseries-store
  BatchConflict,
  NotFound,
  InvalidPointwidth,
  StorageCorrupt,
  // distiller-pipeline
  OutputClaimed,
  CyclicDependency,
  // diagnostics
  NoConsistentAssignment,
  InsufficientVariation,
  AmbiguousTopology,
  InsufficientExcitation,
  NumericallySingular,
  Unobservable,
  DegenerateTraining,
  NoFaultDetected,
  AmbiguousLocation,
  UnknownUseCase,
  // scenario / cli
  Validation,
  InvalidArgument,
};

std::string_view to_string(ErrorCode code) noexcept;

class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& what, std::vector<std::string> details = {})
      : std::runtime_error(std::string(to_string(code)) + ": " + what),
        code_(code),
        details_(std::move(details)) {}

  ErrorCode code() const noexcept { return code_; }

  /// Extra structured payload, e.g. the tied hypotheses of an
  /// AmbiguousTopology or the candidate branches of an AmbiguousLocation.
  const std::vector<std::string>& details() const noexcept { return details_; }

 private:
  ErrorCode code_;
  std::vector<std::string> details_;
};

}  // namespace upmu
