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
/// Multi-resolution, versioned time-series store.
///
/// Each stream is a copy-on-write 64-ary tree over the signed 64-bit
/// nanosecond axis. A node at pointwidth `pw` covers 2^pw ns and keeps
/// min/max/sum/count summaries of each of its 64 children, so windowed
/// aggregates at any power-of-two resolution are answered without
/// touching raw points. Every insert produces a new immutable root; old
/// roots stay queryable forever (there is no garbage collection).
///
/// Persistence is an append-only segment log of nodes and version roots;
/// the layout is described in docs/storage-format.md.

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <limits>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace upmu::store {

using Version = std::uint64_t;

struct Point {
  std::int64_t time = 0;
  double value = 0.0;

  friend bool operator==(const Point&, const Point&) = default;
};

/// Aggregate of one 2^pointwidth window. With count == 0 the value fields
/// are NaN.
struct StatPoint {
  std::int64_t window_start = 0;
  int pointwidth = 0;
  double min = std::numeric_limits<double>::quiet_NaN();
  double max = std::numeric_limits<double>::quiet_NaN();
  double mean = std::numeric_limits<double>::quiet_NaN();
  std::uint64_t count = 0;

  bool empty() const noexcept { return count == 0; }
};

/// Half-open [start, end).
struct TimeRange {
  std::int64_t start = 0;
  std::int64_t end = 0;

  friend bool operator==(const TimeRange&, const TimeRange&) = default;
};

/// Stream identity: a meter plus a channel name such as "V_mag_a" or a
/// distiller output name. Rendered as "meter/channel".
struct StreamKey {
  std::string meter;
  std::string channel;

  std::string str() const { return meter + "/" + channel; }
  static StreamKey parse(std::string_view text);

  friend auto operator<=>(const StreamKey&, const StreamKey&) = default;
};

inline constexpr int kFanoutBits = 6;
inline constexpr int kMaxQueryPointwidth = 62;

/// Window start of `t` on the 2^pw grid (floor alignment).
std::int64_t align_down(std::int64_t t, int pointwidth);

class Store {
 public:
  /// Volatile store for tests and one-shot runs.
  static Store in_memory();
  /// Opens (creating if needed) the store in `dir`, replaying its log.
  static Store open(const std::filesystem::path& dir);

  Store(Store&&) noexcept;
  Store& operator=(Store&&) noexcept;
  ~Store();

  /// Writes a batch and returns the new version (1 for the first insert).
  /// Existing points with the same timestamp are overwritten. Throws
  /// BatchConflict if the batch repeats a timestamp.
  Version insert(const StreamKey& stream, std::span<const Point> points);

  /// Points in [t0, t1) at `version` (latest if omitted), ascending.
  std::vector<Point> query_raw(const StreamKey& stream, std::int64_t t0, std::int64_t t1,
                               std::optional<Version> version = std::nullopt) const;

  /// One StatPoint per 2^pointwidth window covering [t0, t1); unaligned
  /// bounds are widened outward to the grid. Empty windows are included
  /// with count 0. Throws InvalidPointwidth outside [0, 62].
  std::vector<StatPoint> query_windows(const StreamKey& stream, std::int64_t t0, std::int64_t t1, int pointwidth,
                                       std::optional<Version> version = std::nullopt) const;

  /// Sorted, disjoint ranges on the 2^pointwidth grid covering every
  /// timestamp whose stored value differs between versions a and b.
  std::vector<TimeRange> changed_ranges(const StreamKey& stream, Version a, Version b, int pointwidth) const;

  /// [first timestamp, last timestamp + 1) at `version`, or nullopt when empty.
  std::optional<TimeRange> extent(const StreamKey& stream, std::optional<Version> version = std::nullopt) const;

  Version latest_version(const StreamKey& stream) const;
  bool contains(const StreamKey& stream) const;
  std::vector<StreamKey> streams() const;
  std::optional<std::filesystem::path> directory() const;

 private:
  struct Impl;
  explicit Store(std::unique_ptr<Impl> impl);
  std::unique_ptr<Impl> impl_;
};

}  // namespace upmu::store
