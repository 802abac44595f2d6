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
/// Derived-stream computation over the store. A distiller reads one or more
/// input streams, joins them on the first input's timestamps, runs a pure
/// kernel and writes one output stream. After new inserts, `propagate`
/// recomputes only the output chunks whose inputs changed.

#include <cstdint>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "upmu/store.hpp"

namespace upmu::distill {

using store::Point;
using store::StreamKey;
using store::TimeRange;
using store::Version;

/// One joined sample: the master timestamp and one value per input.
struct Row {
  std::int64_t time = 0;
  std::vector<double> values;
};

/// Rows arrive ascending. A kernel emits at most one point per row, stamped
/// with that row's time, and the value at time t may depend only on rows in
/// (t - lag, t]. Anything else breaks incremental recomputation.
using Kernel = std::function<std::vector<Point>(const std::vector<Row>& rows)>;

/// Named kernel plus numeric parameters; this is what gets persisted.
struct KernelRef {
  std::string name;
  std::map<std::string, double> params;
};

using KernelFactory = std::function<Kernel(const KernelRef&, std::size_t n_inputs)>;

/// Builds a kernel from the registry. Built-ins:
///   identity              1 input
///   linear                1 input, params gain (1), offset (0)
///   sum                   any number of inputs
///   angle_difference      2 angle inputs in degrees, wrapped to (-180, 180]
///   real_power            V_mag, V_ang, I_mag, I_ang -> V I cos(dtheta), W
///   magnitude_correlation 2 inputs, param window_ns; NaN below 3 rows or flat data
///   frequency_deviation   1 angle input in degrees, param window_ns; Hz off nominal
Kernel make_kernel(const KernelRef& ref, std::size_t n_inputs);
/// Adds or replaces a kernel factory (process-wide).
void register_kernel(const std::string& name, KernelFactory factory);
/// Lookback a built-in needs (its window_ns, or 0).
std::int64_t required_lag(const KernelRef& ref);

struct DistillerSpec {
  std::string name;
  std::vector<StreamKey> inputs;  // inputs[0] is the join master
  StreamKey output;
  KernelRef kernel;
  std::uint64_t kernel_version = 1;
  std::int64_t lag_ns = 0;
};

struct Materialization {
  std::string distiller;
  std::uint64_t kernel_version = 0;
  std::map<std::string, Version> input_versions;  // keyed by StreamKey::str()
  std::optional<Version> output_version;
  std::vector<TimeRange> recomputed;
  std::vector<TimeRange> failed;
  std::uint64_t unmatched_rows = 0;
  bool full = false;
};

struct PipelineOptions {
  int chunk_pointwidth = 22;
  std::int64_t join_tolerance_ns = 4'166'666;  // half of a 120 frames/s interval
};

/// Joins inputs on the master timestamps: each master point takes the
/// nearest point of every other input within `tolerance` (earlier wins a
/// tie). Rows missing any input are dropped and counted in `unmatched`.
std::vector<Row> join_nearest(const std::vector<std::vector<Point>>& inputs, std::int64_t tolerance,
                              std::uint64_t* unmatched = nullptr);

class Pipeline {
 public:
  /// With a persistent store the registry and lineage live next to it and
  /// are reloaded here.
  explicit Pipeline(store::Store& store, PipelineOptions options = {});

  /// Throws OutputClaimed, CyclicDependency, or InvalidArgument (duplicate
  /// name, no inputs, lag shorter than the kernel needs, unknown kernel).
  void register_distiller(const DistillerSpec& spec);

  /// Changes the kernel version; the next propagate recomputes everything.
  void set_kernel_version(const std::string& name, std::uint64_t version);

  std::vector<Materialization> propagate();

  /// Recomputes `spec` from scratch over its inputs without touching the
  /// store; the reference the incremental path must match.
  std::vector<Point> full_recompute(const std::string& name) const;

  std::vector<DistillerSpec> distillers() const;  // topological order
  const std::vector<Materialization>& lineage() const { return log_; }

 private:
  struct State {
    DistillerSpec spec;
    Kernel kernel;
    std::map<std::string, Version> consumed;
    std::uint64_t materialized_kernel_version = 0;
    std::vector<TimeRange> failed;
  };

  std::vector<std::size_t> topo_order(const std::vector<State>& states) const;
  std::vector<Point> run_range(const State& s, TimeRange range, std::uint64_t* unmatched) const;
  void save() const;
  void load();

  store::Store& store_;
  PipelineOptions opt_;
  std::vector<State> states_;  // kept topologically sorted
  std::vector<Materialization> log_;
};

}  // namespace upmu::distill
