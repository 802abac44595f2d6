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

#include <doctest.h>

#include <algorithm>
#include <atomic>
#include <bit>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>
#include <random>
#include <set>
#include <thread>

#include "upmu/error.hpp"
#include "upmu/store.hpp"

using namespace upmu;
using namespace upmu::store;

namespace {

const StreamKey kKey{"m1", "V_mag_a"};

std::vector<Point> random_points(std::mt19937_64& rng, std::size_t n, std::int64_t t_lo, std::int64_t t_hi) {
  std::uniform_int_distribution<std::int64_t> t(t_lo, t_hi - 1);
  std::normal_distribution<double> v(0.0, 10.0);
  std::map<std::int64_t, double> unique;
  while (unique.size() < n) unique[t(rng)] = v(rng);
  std::vector<Point> out;
  for (auto [tt, vv] : unique) out.push_back({tt, vv});
  std::shuffle(out.begin(), out.end(), rng);
  return out;
}

// Brute-force aggregate over a flat, unordered point list.
StatPoint brute_window(const std::vector<Point>& pts, std::int64_t start, int pw) {
  StatPoint s;
  s.window_start = start;
  s.pointwidth = pw;
  const std::int64_t end = start + (std::int64_t{1} << pw);
  double sum = 0.0, lo = INFINITY, hi = -INFINITY;
  for (const Point& p : pts) {
    if (p.time < start || p.time >= end) continue;
    ++s.count;
    sum += p.value;
    lo = std::min(lo, p.value);
    hi = std::max(hi, p.value);
  }
  if (s.count) {
    s.min = lo;
    s.max = hi;
    s.mean = sum / static_cast<double>(s.count);
  }
  return s;
}

// Final-state map of a sequence of batches (last writer wins).
std::map<std::int64_t, double> replay(const std::vector<std::vector<Point>>& batches, std::size_t upto) {
  std::map<std::int64_t, double> m;
  for (std::size_t i = 0; i < upto; ++i)
    for (const Point& p : batches[i]) m[p.time] = p.value;
  return m;
}

std::string bytes_of(const std::vector<Point>& pts) {
  return std::string(reinterpret_cast<const char*>(pts.data()), pts.size() * sizeof(Point));
}

struct TempDir {
  std::filesystem::path path;
  TempDir() {
    path = std::filesystem::temp_directory_path() /
           ("upmu-store-" + std::to_string(std::random_device{}()) + std::to_string(reinterpret_cast<std::uintptr_t>(this)));
    std::filesystem::remove_all(path);
  }
  ~TempDir() { std::filesystem::remove_all(path); }
};

}  // namespace

TEST_CASE("align_down floors on the grid, including negatives") {
  CHECK(align_down(0, 4) == 0);
  CHECK(align_down(15, 4) == 0);
  CHECK(align_down(16, 4) == 16);
  CHECK(align_down(-1, 4) == -16);
  CHECK(align_down(-16, 4) == -16);
  CHECK(align_down(std::numeric_limits<std::int64_t>::min(), 62) == std::numeric_limits<std::int64_t>::min());
  CHECK_THROWS_AS(align_down(0, 63), Error);
}

TEST_CASE("insert then query_raw returns the batch sorted") {
  Store s = Store::in_memory();
  std::vector<Point> pts;
  for (int i = 0; i < 100; ++i) pts.push_back({i * 1000, i * 0.5});
  CHECK(s.insert(kKey, pts) == 1);
  CHECK(s.query_raw(kKey, std::numeric_limits<std::int64_t>::min(), std::numeric_limits<std::int64_t>::max()) == pts);
  CHECK(s.query_raw(kKey, 5, 5).empty());
  CHECK(s.query_raw(kKey, 200'000, 300'000).empty());
}

TEST_CASE("versions are immutable") {
  Store s = Store::in_memory();
  std::vector<Point> a{{1, 1.0}, {2, 2.0}}, b{{3, 3.0}, {2, 20.0}};
  CHECK(s.insert(kKey, a) == 1);
  CHECK(s.insert(kKey, b) == 2);
  CHECK(s.query_raw(kKey, 0, 10, 1) == a);
  CHECK(s.query_raw(kKey, 0, 10, 2) == std::vector<Point>{{1, 1.0}, {2, 20.0}, {3, 3.0}});
  CHECK(s.query_raw(kKey, 0, 10, 0).empty());
  CHECK_THROWS_AS(s.query_raw(kKey, 0, 10, 3), Error);
  CHECK_THROWS_AS(s.query_raw({"nope", "x"}, 0, 10), Error);
}

TEST_CASE("duplicate timestamps within a batch conflict") {
  Store s = Store::in_memory();
  std::vector<Point> bad{{5, 1.0}, {7, 1.0}, {5, 2.0}};
  try {
    s.insert(kKey, bad);
    FAIL("expected BatchConflict");
  } catch (const Error& e) {
    CHECK(e.code() == ErrorCode::BatchConflict);
  }
  CHECK_FALSE(s.contains(kKey));
}

TEST_CASE("out-of-order batches match a sort oracle") {
  std::mt19937_64 rng(21);
  Store s = Store::in_memory();
  auto pts = random_points(rng, 5000, -1'000'000'000, 1'000'000'000);
  s.insert(kKey, pts);
  auto oracle = pts;
  std::sort(oracle.begin(), oracle.end(), [](const Point& x, const Point& y) { return x.time < y.time; });
  CHECK(s.query_raw(kKey, std::numeric_limits<std::int64_t>::min(), std::numeric_limits<std::int64_t>::max()) == oracle);
}

TEST_CASE("query_raw agrees with a linear scan over 1e5 points") {
  std::mt19937_64 rng(22);
  Store s = Store::in_memory();
  const std::int64_t span = 1'000'000'000'000;  // ~17 minutes of ns
  auto pts = random_points(rng, 100'000, -span / 4, span);
  // Insert in a handful of batches so the tree is built incrementally.
  for (std::size_t i = 0; i < pts.size(); i += 17'000) {
    std::vector<Point> batch(pts.begin() + i, pts.begin() + std::min(pts.size(), i + 17'000));
    s.insert(kKey, batch);
  }
  std::uniform_int_distribution<std::int64_t> t(-span / 2, span + span / 4);
  for (int q = 0; q < 200; ++q) {
    std::int64_t a = t(rng), b = t(rng);
    if (a > b) std::swap(a, b);
    std::vector<Point> oracle;
    for (const Point& p : pts)
      if (p.time >= a && p.time < b) oracle.push_back(p);
    std::sort(oracle.begin(), oracle.end(), [](const Point& x, const Point& y) { return x.time < y.time; });
    REQUIRE(s.query_raw(kKey, a, b) == oracle);
  }
}

TEST_CASE("query_windows matches brute force at every pointwidth") {
  std::mt19937_64 rng(23);
  Store s = Store::in_memory();
  // Dense cluster plus a sparse tail so both leaf and internal summaries are used.
  auto pts = random_points(rng, 8000, 0, 1 << 20);
  auto tail = random_points(rng, 2000, -(std::int64_t{1} << 36), std::int64_t{1} << 36);
  for (const Point& p : tail)
    if (std::none_of(pts.begin(), pts.end(), [&](const Point& q) { return q.time == p.time; })) pts.push_back(p);
  s.insert(kKey, pts);

  const std::int64_t lo = -(std::int64_t{1} << 36), hi = std::int64_t{1} << 36;
  for (int pw = 0; pw <= 62; ++pw) {
    std::int64_t t0 = lo, t1 = hi;
    // Keep the window count manageable at fine resolutions.
    if (pw < 16) {
      t0 = 0;
      t1 = std::int64_t{1} << 20;
      if (pw < 4) t1 = std::int64_t{1} << 14;
    } else if (pw < 24) {
      t0 = -(std::int64_t{1} << 30);
      t1 = std::int64_t{1} << 30;
    }
    const auto win = s.query_windows(kKey, t0, t1, pw);
    REQUIRE(!win.empty());
    CHECK(win.front().window_start == align_down(t0, pw));
    std::uint64_t total = 0;
    for (const auto& w : win) {
      const StatPoint b = brute_window(pts, w.window_start, pw);
      REQUIRE(w.count == b.count);
      total += w.count;
      if (w.count == 0) {
        CHECK(std::isnan(w.mean));
        continue;
      }
      CHECK(w.min == b.min);
      CHECK(w.max == b.max);
      CHECK(std::abs(w.mean - b.mean) <= 1e-9 * std::max(1.0, std::abs(b.mean)));
      CHECK(w.min <= w.mean);
      CHECK(w.mean <= w.max);
    }
    if (pw >= 24) CHECK(total == pts.size());
  }
  CHECK_THROWS_AS(s.query_windows(kKey, 0, 1, 63), Error);
  CHECK_THROWS_AS(s.query_windows(kKey, 0, 1, -1), Error);
}

TEST_CASE("single covering window gives global aggregates") {
  std::mt19937_64 rng(24);
  Store s = Store::in_memory();
  auto pts = random_points(rng, 3000, 0, 10'000'000);
  s.insert(kKey, pts);
  const auto w = s.query_windows(kKey, 0, std::int64_t{1} << 40, 62);
  REQUIRE(w.size() == 1);
  double sum = 0, lo = INFINITY, hi = -INFINITY;
  for (auto& p : pts) {
    sum += p.value;
    lo = std::min(lo, p.value);
    hi = std::max(hi, p.value);
  }
  CHECK(w[0].count == pts.size());
  CHECK(w[0].min == lo);
  CHECK(w[0].max == hi);
  CHECK(w[0].mean == doctest::Approx(sum / pts.size()).epsilon(1e-9));
}

TEST_CASE("window merge equals brute force mean") {
  // Merging adjacent windows count-weighted reproduces the coarser window.
  std::mt19937_64 rng(25);
  Store s = Store::in_memory();
  auto pts = random_points(rng, 4000, 0, 1 << 24);
  s.insert(kKey, pts);
  const auto fine = s.query_windows(kKey, 0, 1 << 24, 18);
  const auto coarse = s.query_windows(kKey, 0, 1 << 24, 24);
  REQUIRE(coarse.size() == 1);
  double sum = 0;
  std::uint64_t n = 0;
  for (const auto& w : fine)
    if (w.count) {
      sum += w.mean * w.count;
      n += w.count;
    }
  CHECK(n == coarse[0].count);
  CHECK(std::abs(sum / n - coarse[0].mean) <= 1e-9 * std::max(1.0, std::abs(coarse[0].mean)));
}

TEST_CASE("changed_ranges examples") {
  Store s = Store::in_memory();
  const int pw = 10;
  std::vector<Point> a, b, c;
  for (int i = 0; i < 50; ++i) a.push_back({5000 + i * 7, 1.0 * i});
  for (int i = 0; i < 20; ++i) b.push_back({100'000 + i * 3, 2.0 * i});
  for (int i = 0; i < 20; ++i) c.push_back({900'000 + i * 3, 3.0 * i});
  s.insert(kKey, a);
  s.insert(kKey, b);
  CHECK(s.changed_ranges(kKey, 1, 1, pw).empty());
  auto r = s.changed_ranges(kKey, 1, 2, pw);
  REQUIRE(r.size() == 1);
  CHECK(r[0].start == align_down(100'000, pw));
  CHECK(r[0].end == align_down(100'000 + 19 * 3, pw) + (1 << pw));
  s.insert(kKey, c);
  r = s.changed_ranges(kKey, 1, 3, pw);
  CHECK(r.size() == 2);
  // Rewriting identical values is not a change.
  s.insert(kKey, c);
  CHECK(s.changed_ranges(kKey, 3, 4, pw).empty());
  CHECK_THROWS_AS(s.changed_ranges(kKey, 3, 1, pw), Error);
}

TEST_CASE("changed_ranges is sound and aligned-complete under random inserts") {
  std::mt19937_64 rng(26);
  for (int trial = 0; trial < 30; ++trial) {
    Store s = Store::in_memory();
    std::vector<std::vector<Point>> batches;
    std::uniform_int_distribution<int> nb(1, 400);
    std::uniform_int_distribution<std::int64_t> center(-(std::int64_t{1} << 34), std::int64_t{1} << 34);
    for (int k = 0; k < 8; ++k) {
      const std::int64_t c = center(rng);
      // Reuse an earlier region sometimes so overwrites happen.
      const std::int64_t base = (k > 0 && rng() % 3 == 0) ? batches[rng() % k].front().time : c;
      std::vector<Point> batch = random_points(rng, nb(rng), base - 200'000, base + 200'000);
      if (rng() % 4 == 0 && !batches.empty()) {
        // Identical rewrite of some earlier points.
        const auto& prev = batches[rng() % batches.size()];
        std::map<std::int64_t, double> m;
        for (auto& p : batch) m[p.time] = p.value;
        for (std::size_t i = 0; i < prev.size(); i += 3) m[prev[i].time] = prev[i].value;
        batch.clear();
        for (auto [t, v] : m) batch.push_back({t, v});
      }
      batches.push_back(batch);
      s.insert(kKey, batch);
    }
    std::uniform_int_distribution<int> pwd(0, 40);
    for (int q = 0; q < 10; ++q) {
      std::size_t va = rng() % 9, vb = rng() % 9;
      if (va > vb) std::swap(va, vb);
      const int pw = pwd(rng);
      const auto ra = replay(batches, va), rb = replay(batches, vb);
      std::set<std::int64_t> touched;
      for (auto& [t, v] : rb) {
        auto it = ra.find(t);
        if (it == ra.end() || std::bit_cast<std::uint64_t>(it->second) != std::bit_cast<std::uint64_t>(v)) {
          touched.insert(align_down(t, pw));
        }
      }
      for (auto& [t, v] : ra)
        if (!rb.count(t)) touched.insert(align_down(t, pw));
      const auto ranges = s.changed_ranges(kKey, va, vb, pw);
      // Sorted, disjoint, non-adjacent, aligned.
      for (std::size_t i = 0; i < ranges.size(); ++i) {
        CHECK(ranges[i].start < ranges[i].end);
        CHECK(align_down(ranges[i].start, pw) == ranges[i].start);
        if (i) CHECK(ranges[i - 1].end < ranges[i].start);
      }
      // Expand to windows and compare with the oracle exactly.
      std::set<std::int64_t> got;
      for (const auto& r : ranges)
        for (std::int64_t w = r.start; w < r.end; w += std::int64_t{1} << pw) got.insert(w);
      CHECK(got == touched);
    }
  }
}

TEST_CASE("query results at a version are byte-stable across later inserts") {
  std::mt19937_64 rng(27);
  Store s = Store::in_memory();
  s.insert(kKey, random_points(rng, 3000, 0, 1'000'000));
  const auto before = bytes_of(s.query_raw(kKey, 0, 1'000'000, 1));
  const auto wins_before = s.query_windows(kKey, 0, 1 << 20, 12, 1);
  for (int i = 0; i < 5; ++i) s.insert(kKey, random_points(rng, 3000, 0, 1'000'000));
  CHECK(bytes_of(s.query_raw(kKey, 0, 1'000'000, 1)) == before);
  const auto wins_after = s.query_windows(kKey, 0, 1 << 20, 12, 1);
  REQUIRE(wins_after.size() == wins_before.size());
  for (std::size_t i = 0; i < wins_after.size(); ++i) {
    CHECK(wins_after[i].count == wins_before[i].count);
    if (wins_after[i].count) CHECK(wins_after[i].mean == wins_before[i].mean);
  }
}

TEST_CASE("extent and stream listing") {
  Store s = Store::in_memory();
  CHECK(s.streams().empty());
  s.insert(kKey, std::vector<Point>{{-5, 1.0}, {40, 2.0}});
  s.insert({"m2", "I_mag_b"}, std::vector<Point>{{1, 1.0}});
  CHECK(s.streams().size() == 2);
  REQUIRE(s.extent(kKey));
  CHECK(*s.extent(kKey) == TimeRange{-5, 41});
  CHECK_FALSE(s.extent(kKey, 0));
  CHECK(s.latest_version(kKey) == 1);
  CHECK(StreamKey::parse("m1/V_mag_a") == kKey);
  CHECK_THROWS_AS(StreamKey::parse("novalue"), Error);
}

TEST_CASE("persistent store survives reopen and tolerates a torn tail") {
  TempDir dir;
  std::mt19937_64 rng(28);
  const auto p1 = random_points(rng, 4000, 0, 1'000'000'000);
  const auto p2 = random_points(rng, 100, 0, 1'000'000'000);
  {
    Store s = Store::open(dir.path);
    s.insert(kKey, p1);
    s.insert(kKey, p2);
    s.insert({"m9", "V_ang_c"}, std::vector<Point>{{3, 0.5}});
  }
  std::vector<Point> v1, v2;
  {
    Store s = Store::open(dir.path);
    CHECK(s.latest_version(kKey) == 2);
    CHECK(s.contains({"m9", "V_ang_c"}));
    v1 = s.query_raw(kKey, 0, 1'000'000'000, 1);
    v2 = s.query_raw(kKey, 0, 1'000'000'000, 2);
    CHECK(v1.size() == p1.size());
    // Later writes keep going to the same log.
    s.insert(kKey, std::vector<Point>{{-1, 9.0}});
  }
  const auto file = dir.path / "segments.log";
  {
    // Simulate a crash mid-record.
    std::ofstream out(file, std::ios::binary | std::ios::app);
    const char junk[7] = {1, 100, 0, 0, 0, 9, 9};
    out.write(junk, sizeof junk);
  }
  {
    Store s = Store::open(dir.path);
    CHECK(s.latest_version(kKey) == 3);
    CHECK(s.query_raw(kKey, 0, 1'000'000'000, 2) == v2);
    CHECK(s.query_raw(kKey, -1, 0) == std::vector<Point>{{-1, 9.0}});
  }
  {
    // Flip a byte in the middle: corruption, not a torn tail.
    std::fstream f(file, std::ios::binary | std::ios::in | std::ios::out);
    f.seekp(64);
    char c;
    f.read(&c, 1);
    f.seekp(64);
    c ^= 0x5a;
    f.write(&c, 1);
  }
  try {
    Store::open(dir.path);
    FAIL("expected StorageCorrupt");
  } catch (const Error& e) {
    CHECK(e.code() == ErrorCode::StorageCorrupt);
  }
}

TEST_CASE("readers pinned to a version see consistent data during writes") {
  Store s = Store::in_memory();
  std::vector<Point> first;
  for (int i = 0; i < 2000; ++i) first.push_back({i, 1.0});
  s.insert(kKey, first);
  std::atomic<bool> stop{false};
  std::atomic<int> bad{0};
  std::thread reader([&] {
    while (!stop) {
      const auto v = s.latest_version(kKey);
      const auto pts = s.query_raw(kKey, 0, 1 << 30, v);
      // Each batch writes a full block of 2000 points; partial batches would break this.
      if (pts.size() % 2000 != 0) ++bad;
    }
  });
  for (int b = 1; b < 30; ++b) {
    std::vector<Point> batch;
    for (int i = 0; i < 2000; ++i) batch.push_back({b * 10'000 + i, double(b)});
    s.insert(kKey, batch);
  }
  stop = true;
  reader.join();
  CHECK(bad == 0);
}
