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

// Randomized property drivers for the store and the distiller pipeline.
// Each returns an empty string on success, otherwise a description of the
// first violation. Oracles here are brute-force scans over plain maps.

#include <algorithm>
#include <bit>
#include <cmath>
#include <map>
#include <random>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "upmu/distill.hpp"
#include "upmu/store.hpp"

namespace upmu::testing {

using store::Point;
using store::StreamKey;

inline bool same_bits(double a, double b) { return std::bit_cast<std::uint64_t>(a) == std::bit_cast<std::uint64_t>(b); }

inline bool same_points(const std::vector<Point>& a, const std::vector<Point>& b) {
  if (a.size() != b.size()) return false;
  for (std::size_t i = 0; i < a.size(); ++i)
    if (a[i].time != b[i].time || !same_bits(a[i].value, b[i].value)) return false;
  return true;
}

/// Random insert sequence (`n_points` total over `n_versions` batches, with
/// overwrites) checked against a map oracle for every version: windows at
/// random pointwidths, changed_ranges between random version pairs, and
/// byte stability of older versions after later writes.
inline std::string store_property_run(std::uint64_t seed, std::size_t n_points = 100'000, std::size_t n_versions = 50) {
  std::mt19937_64 rng(seed);
  store::Store s = store::Store::in_memory();
  const StreamKey key{"prop", "x"};
  const std::int64_t span = std::int64_t{1} << 40;
  std::uniform_int_distribution<std::int64_t> centre(-span, span);
  std::normal_distribution<double> val(0.0, 5.0);
  std::vector<std::map<std::int64_t, double>> states{{}};
  std::vector<std::string> snapshot;  // raw bytes of each version right after it was written
  const std::size_t per_batch = n_points / n_versions;

  auto raw_bytes = [&](store::Version v) {
    auto pts = s.query_raw(key, std::numeric_limits<std::int64_t>::min(), std::numeric_limits<std::int64_t>::max(), v);
    return std::string(reinterpret_cast<const char*>(pts.data()), pts.size() * sizeof(Point));
  };

  for (std::size_t v = 1; v <= n_versions; ++v) {
    std::map<std::int64_t, double> batch;
    const bool rewrite = v > 1 && rng() % 4 == 0;
    const std::int64_t c = rewrite ? std::next(states.back().begin(), rng() % states.back().size())->first : centre(rng);
    const std::int64_t spread = std::int64_t{1} << (20 + rng() % 16);
    std::uniform_int_distribution<std::int64_t> off(-spread, spread);
    while (batch.size() < per_batch) batch[c + off(rng)] = val(rng);
    std::vector<Point> pts;
    for (auto [t, x] : batch) pts.push_back({t, x});
    std::shuffle(pts.begin(), pts.end(), rng);
    if (s.insert(key, pts) != v) return "insert returned an unexpected version";
    auto next = states.back();
    for (auto [t, x] : batch) next[t] = x;
    states.push_back(std::move(next));
    snapshot.push_back(raw_bytes(v));
  }

  for (std::size_t v = 1; v <= n_versions; ++v) {
    if (raw_bytes(v) != snapshot[v - 1]) return "version " + std::to_string(v) + " changed after later inserts";
  }

  // Windowed aggregates against brute force, at several versions and pointwidths.
  std::uniform_int_distribution<int> pwd(20, 44);
  for (int q = 0; q < 60; ++q) {
    const store::Version v = 1 + rng() % n_versions;
    const int pw = pwd(rng);
    const auto& st = states[v];
    const std::int64_t a = std::next(st.begin(), rng() % st.size())->first;
    const std::int64_t t0 = a - (std::int64_t{1} << (pw + 2)), t1 = a + (std::int64_t{1} << (pw + 3));
    const auto wins = s.query_windows(key, t0, t1, pw, v);
    if (wins.empty() || wins.front().window_start != store::align_down(t0, pw)) return "window grid misaligned";
    for (const auto& w : wins) {
      const std::int64_t end = w.window_start + (std::int64_t{1} << pw);
      std::uint64_t n = 0;
      double sum = 0, lo = INFINITY, hi = -INFINITY;
      for (auto it = st.lower_bound(w.window_start); it != st.end() && it->first < end; ++it) {
        ++n;
        sum += it->second;
        lo = std::min(lo, it->second);
        hi = std::max(hi, it->second);
      }
      if (w.count != n) return "window count mismatch";
      if (n == 0) continue;
      const double mean = sum / static_cast<double>(n);
      if (w.min != lo || w.max != hi || std::abs(w.mean - mean) > 1e-9 * std::max(1.0, std::abs(mean))) {
        std::ostringstream os;
        os << "window stats mismatch at v" << v << " pw" << pw;
        return os.str();
      }
    }
  }

  // changed_ranges: exact set of aligned windows containing a differing timestamp.
  std::uniform_int_distribution<int> cpw(0, 40);
  for (int q = 0; q < 80; ++q) {
    std::size_t va = rng() % (n_versions + 1), vb = rng() % (n_versions + 1);
    if (va > vb) std::swap(va, vb);
    const int pw = cpw(rng);
    const auto &A = states[va], &B = states[vb];
    std::set<std::int64_t> want;
    for (auto& [t, x] : B) {
      auto it = A.find(t);
      if (it == A.end() || !same_bits(it->second, x)) want.insert(store::align_down(t, pw));
    }
    for (auto& [t, x] : A)
      if (!B.count(t)) want.insert(store::align_down(t, pw));
    const auto ranges = s.changed_ranges(key, va, vb, pw);
    std::set<std::int64_t> got;
    for (std::size_t i = 0; i < ranges.size(); ++i) {
      if (i && ranges[i - 1].end >= ranges[i].start) return "changed ranges not disjoint and sorted";
      for (std::int64_t w = ranges[i].start; w < ranges[i].end; w += std::int64_t{1} << pw) {
        got.insert(w);
        if (got.size() > want.size()) return "changed ranges include untouched windows";
      }
    }
    if (got != want) return "changed ranges differ from the raw diff";
  }
  return {};
}

/// Three-distiller DAG over three jittered 120 frames/s inputs:
///   diff = angle_difference(ang_a, ang_b)
///   corr = magnitude_correlation(diff, mag, 100 ms)
///   freq = frequency_deviation(diff, 50 ms)
/// Random insert/propagate interleavings; after every propagate each
/// output must be point-identical to a from-scratch recomputation.
inline std::string pipeline_property_run(std::uint64_t seed, int rounds = 25) {
  using namespace distill;
  std::mt19937_64 rng(seed);
  store::Store s = store::Store::in_memory();
  Pipeline p(s);
  const StreamKey a{"m1", "V_ang_a"}, b{"m2", "V_ang_a"}, mag{"m2", "V_mag_a"};
  const StreamKey diff{"m1", "angdiff"}, corr{"m1", "corr"}, freq{"m1", "freq"};
  p.register_distiller({"diff", {a, b}, diff, {"angle_difference", {}}, 1, 0});
  p.register_distiller({"corr", {diff, mag}, corr, {"magnitude_correlation", {{"window_ns", 1e8}}}, 1, 100'000'000});
  p.register_distiller({"freq", {diff}, freq, {"frequency_deviation", {{"window_ns", 5e7}}}, 1, 50'000'000});

  std::uniform_int_distribution<std::int64_t> jitter(-300'000, 300'000);
  std::normal_distribution<double> noise(0.0, 0.3);
  const std::int64_t dt = 1'000'000'000 / 120;
  auto burst = [&](const StreamKey& key, std::int64_t k0, int n, double base) {
    std::map<std::int64_t, double> m;
    for (int k = 0; k < n; ++k) {
      if (rng() % 10 == 0) continue;  // dropped frame
      m[(k0 + k) * dt + jitter(rng)] = base + 7.0 * std::sin(0.05 * (k0 + k)) + noise(rng);
    }
    std::vector<Point> pts;
    for (auto [t, v] : m) pts.push_back({t, v});
    if (!pts.empty()) s.insert(key, pts);
  };

  std::uniform_int_distribution<std::int64_t> start(0, 3000);
  std::uniform_int_distribution<int> len(1, 400);
  for (int r = 0; r < rounds; ++r) {
    const int n_ins = 1 + static_cast<int>(rng() % 3);
    for (int i = 0; i < n_ins; ++i) {
      const std::int64_t k0 = start(rng);
      const int n = len(rng);
      switch (rng() % 3) {
        case 0: burst(a, k0, n, 170.0); break;
        case 1: burst(b, k0, n, -20.0); break;
        default: burst(mag, k0, n, 7200.0); break;
      }
    }
    if (rng() % 5 == 0) continue;  // let changes pile up before the next propagate
    p.propagate();
    if (!p.propagate().empty()) return "second propagate was not a no-op";
    for (const auto& [name, key] : {std::pair{"diff", diff}, {"corr", corr}, {"freq", freq}}) {
      const auto want = p.full_recompute(name);
      const auto got = s.contains(key) ? s.query_raw(key, std::numeric_limits<std::int64_t>::min(),
                                                     std::numeric_limits<std::int64_t>::max())
                                       : std::vector<Point>{};
      if (!same_points(want, got)) {
        return std::string("incremental output of '") + name + "' diverged from full recomputation in round " +
               std::to_string(r);
      }
    }
  }
  return {};
}

}  // namespace upmu::testing
