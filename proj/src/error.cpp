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

#include "upmu/error.hpp"

namespace upmu {

std::string_view to_string(ErrorCode code) noexcept {
  switch (code) {
    case ErrorCode::InvalidAngle: return "InvalidAngle";
    case ErrorCode::InsufficientSamples: return "InsufficientSamples";
    case ErrorCode::DegenerateReference: return "DegenerateReference";
    case ErrorCode::InvalidReactance: return "InvalidReactance";
    case ErrorCode::InvalidRatio: return "InvalidRatio";
    case ErrorCode::ModelViolation: return "ModelViolation";
    case ErrorCode::NotRadial: return "NotRadial";
    case ErrorCode::Diverged: return "Diverged";
    case ErrorCode::BatchConflict: return "BatchConflict";
    case ErrorCode::NotFound: return "NotFound";
    case ErrorCode::InvalidPointwidth: return "InvalidPointwidth";
    case ErrorCode::StorageCorrupt: return "StorageCorrupt";
    case ErrorCode::OutputClaimed: return "OutputClaimed";
    case ErrorCode::CyclicDependency: return "CyclicDependency";
    case ErrorCode::NoConsistentAssignment: return "NoConsistentAssignment";
    case ErrorCode::InsufficientVariation: return "InsufficientVariation";
    case ErrorCode::AmbiguousTopology: return "AmbiguousTopology";
    case ErrorCode::InsufficientExcitation: return "InsufficientExcitation";
    case ErrorCode::NumericallySingular: return "NumericallySingular";
    case ErrorCode::Unobservable: return "Unobservable";
    case ErrorCode::DegenerateTraining: return "DegenerateTraining";
    case ErrorCode::NoFaultDetected: return "NoFaultDetected";
    case ErrorCode::AmbiguousLocation: return "AmbiguousLocation";
    case ErrorCode::UnknownUseCase: return "UnknownUseCase";
    case ErrorCode::Validation: return "Validation";
    case ErrorCode::InvalidArgument: return "InvalidArgument";
  }
  return "Unknown";
}

}  // namespace upmu
