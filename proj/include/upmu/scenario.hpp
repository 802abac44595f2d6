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
/// Scenario files and the end-to-end run behind the `upmu` tool: simulate a
/// feeder, write its frames into the store, propagate distillers, run the
/// requested diagnostics and record a manifest. The file format is
/// documented in docs/scenario-schema.md.

#include <array>
#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <map>
#include <optional>
#include <string>
#include <variant>
#include <vector>

#include <json.hpp>

#include "upmu/diagnostics.hpp"
#include "upmu/distill.hpp"
#include "upmu/store.hpp"
#include "upmu/telemetry.hpp"

namespace upmu::scenario {

using json = nlohmann::json;

inline constexpr int kSchemaVersion = 1;
inline constexpr const char* kToolVersion = "0.1.0";

// ---------------------------------------------------------------- frames <-> streams

/// The twelve channels each meter is stored under, in frame order:
/// V_mag_a..c (volts), V_ang_a..c (degrees), I_mag_a..c, I_ang_a..c.
const std::vector<std::string>& frame_channels();

/// Inserts every non-gap frame as one batch per channel. Returns the
/// version written for each stream.
std::map<store::StreamKey, store::Version> ingest_frames(store::Store& store, const std::vector<Frame>& frames);

/// Rebuilds frames of `meter` in [t0, t1) from its channels; instants
/// missing any channel are skipped.
std::vector<Frame> load_frames(const store::Store& store, const std::string& meter, std::int64_t t0, std::int64_t t1);

/// CSV with header timestamp_ns,meter,va_mag,va_ang_deg,...,ic_ang_deg.
/// Gap frames are not written.
void write_frames_csv(std::ostream& out, const std::vector<std::vector<Frame>>& meters);
std::map<std::string, std::vector<Frame>> read_frames_csv(std::istream& in);

// ---------------------------------------------------------------- scenario

/// [t0, t1) in seconds from the start of the run.
struct Window {
  double t0 = 0.0;
  double t1 = 0.0;
  std::int64_t start_ns() const;
  std::int64_t end_ns() const;
};

struct ProfileSpec {
  std::string kind;  ///< random_walk, constant or table
  double step_s = 0.05, sigma = 0.02, rho = 0.98;
  std::optional<double> until_s;  ///< random walk holds its last value after this
  std::optional<std::uint64_t> seed;
  LoadProfile table;  ///< constant and table kinds
};

struct PhaseIdRequest {
  std::string reference;
  std::vector<std::string> meters;
  Window window;
};
struct TopologyRequest {
  std::vector<diag::TopologyHypothesis> hypotheses;
  Window window;
  diag::ResidualMetric metric = diag::ResidualMetric::Complex;
  std::vector<std::string> meters;  ///< empty: every stored meter
};
struct ImpedanceRequest {
  std::string branch, end1, end2;
  Window window;
  double max_condition = 1e3;
};
struct StateEstimationRequest {
  double at_s = 0.0;
  std::vector<std::string> meters;
  double load_sigma_fraction = 0.2;
};
struct KpcaRequest {
  std::vector<std::string> meters;
  Window train, test;
  std::size_t window_frames = 10;
  diag::KpcaOptions options;
};
struct FaultRequest {
  Window prefault, during;
  diag::FaultLocatorOptions options;
  std::vector<std::string> meters;  ///< empty: every stored meter
};
struct ReverseFlowRequest {
  std::string meter;
  Window window;
  double deadband_pu = 1e-4;
};
struct ChangePointRequest {
  store::StreamKey stream;
  Window window;
  diag::CusumOptions options;
};
struct RequirementsRequest {
  std::string use_case;
  std::optional<double> tve_percent, latency_s, report_rate_hz;
  std::string tve_meter;  ///< measure TVE against the simulated truth instead
  Window window;
  double tve_quantile = 1.0;
};

using DiagnosticParams = std::variant<PhaseIdRequest, TopologyRequest, ImpedanceRequest, StateEstimationRequest,
                                      KpcaRequest, FaultRequest, ReverseFlowRequest, ChangePointRequest,
                                      RequirementsRequest>;

struct DiagnosticRequest {
  std::string id;
  std::string kind;
  DiagnosticParams params;
};

/// Diagnostic kinds in the order of DiagnosticParams.
const std::vector<std::string>& diagnostic_kinds();

struct Scenario {
  int schema_version = kSchemaVersion;
  std::string name;
  std::uint64_t seed = 0;
  double duration_s = 0.0;
  double report_rate = kNominalReportRate;
  FeederModel model;
  std::map<std::string, ProfileSpec> load_profiles;  ///< by bus
  std::optional<ProfileSpec> source_profile;
  NoiseModel noise;  ///< seed is taken from `seed` at run time
  EventScript events;
  /// Per meter, the true phase behind each reported channel.
  std::map<std::string, std::array<int, 3>> phase_labels;
  /// Per meter, fixed fractional PT and CT magnitude errors applied to the
  /// reported frames (not to the truth).
  std::map<std::string, std::array<double, 2>> ratio_errors;
  std::vector<distill::DistillerSpec> distillers;
  std::vector<DiagnosticRequest> diagnostics;
  std::string output_dir;
  std::string digest;  ///< sha256 of the canonical document
};

/// Parses and validates everything before anything runs. Throws
/// Validation with one "/json/pointer: problem" entry per issue in details().
Scenario parse_scenario(const json& doc);
Scenario parse_scenario_text(std::string_view text);
Scenario load_scenario(const std::filesystem::path& path);

/// Simulates the scenario (relabeled meters included) with `seed`.
Telemetry simulate(const Scenario& scenario, bool keep_truth = false);

// ---------------------------------------------------------------- diagnostics and runs

struct DiagnosticInputs {
  const store::Store* store = nullptr;
  /// Set when the data came from simulating `scenario`; enables the
  /// ground-truth fields of each report.
  const Telemetry* truth = nullptr;
};

/// Runs one request. The result always has "id", "kind" and "status"
/// ("ok" or "error", with "error_code" and "error" on failure).
json run_diagnostic(const Scenario& scenario, const DiagnosticRequest& request, const DiagnosticInputs& inputs);

/// Flattens a report into "path = value" lines for people.
std::string report_text(const json& report);

struct RunOptions {
  std::filesystem::path out_dir;             ///< defaults to the scenario's output_dir
  std::optional<std::filesystem::path> store_dir;  ///< defaults to <out>/store
  std::optional<std::uint64_t> seed;         ///< overrides the scenario seed
};

struct RunManifest {
  json doc;
  bool ok() const;
  std::optional<std::string> failed_stage() const;
};

/// simulate -> store -> distillers -> diagnostics -> manifest.json and
/// reports/ under the output directory. A failing stage is recorded in the
/// manifest and stops later stages; a failing diagnostic does not stop the
/// others.
RunManifest run_scenario(const Scenario& scenario, const RunOptions& options);

// ---------------------------------------------------------------- plots

/// CSV with columns window_start_ns,min,max,mean,count over [t0, t1). Raw
/// points (count 1) when `pointwidth` is omitted; empty windows are kept
/// and unaligned bounds widen to whole windows.
/// Throws NotFound for an unknown stream.
void export_plot(const store::Store& store, const store::StreamKey& stream, std::int64_t t0, std::int64_t t1,
                 std::optional<int> pointwidth, std::ostream& out);

/// Hex sha256 of `text`.
std::string sha256_hex(std::string_view text);

}  // namespace upmu::scenario
