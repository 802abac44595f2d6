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

#include <cmath>
#include <filesystem>
#include <random>

#include "support/properties.hpp"
#include "upmu/distill.hpp"
#include "upmu/error.hpp"

using namespace upmu;
using namespace upmu::distill;

namespace {

constexpr std::int64_t kAll0 = std::numeric_limits<std::int64_t>::min();
constexpr std::int64_t kAll1 = std::numeric_limits<std::int64_t>::max();
constexpr std::int64_t kDt = 1'000'000'000 / 120;

std::vector<Point> ramp(std::int64_t k0, int n, double slope, double offset = 0.0) {
  std::vector<Point> out;
  for (int k = 0; k < n; ++k) out.push_back({(k0 + k) * kDt, offset + slope * (k0 + k)});
  return out;
}

std::vector<Point> all(const store::Store& s, const StreamKey& k) { return s.query_raw(k, kAll0, kAll1); }

}  // namespace

TEST_CASE("join_nearest matches within tolerance and counts misses") {
  std::vector<Point> m{{0, 1}, {100, 2}, {200, 3}, {300, 4}};
  std::vector<Point> o{{-4, 10}, {4, 11}, {150, 12}, {295, 13}};
  std::uint64_t missed = 0;
  const auto rows = join_nearest({m, o}, 10, &missed);
  REQUIRE(rows.size() == 2);
  CHECK(rows[0].time == 0);
  CHECK(rows[0].values == std::vector<double>{1, 10});  // tie goes to the earlier point
  CHECK(rows[1].time == 300);
  CHECK(rows[1].values == std::vector<double>{4, 13});
  CHECK(missed == 2);
}

TEST_CASE("identity distiller copies its input") {
  store::Store s = store::Store::in_memory();
  const StreamKey in{"m", "V_mag_a"}, out{"m", "copy"};
  s.insert(in, ramp(0, 500, 0.5));
  Pipeline p(s);
  p.register_distiller({"copy", {in}, out, {"identity", {}}, 1, 0});
  const auto mats = p.propagate();
  REQUIRE(mats.size() == 1);
  CHECK(mats[0].output_version == store::Version{1});
  CHECK(all(s, out) == all(s, in));
  CHECK(p.propagate().empty());
}

TEST_CASE("registration errors") {
  store::Store s = store::Store::in_memory();
  Pipeline p(s);
  const StreamKey x{"m", "x"}, y{"m", "y"}, z{"m", "z"};
  p.register_distiller({"a", {x}, y, {"identity", {}}, 1, 0});
  auto code_of = [&](const DistillerSpec& spec) {
    try {
      p.register_distiller(spec);
    } catch (const Error& e) {
      return e.code();
    }
    return ErrorCode::Validation;  // sentinel: no error
  };
  CHECK(code_of({"b", {z}, y, {"identity", {}}, 1, 0}) == ErrorCode::OutputClaimed);
  CHECK(code_of({"c", {y}, x, {"identity", {}}, 1, 0}) == ErrorCode::CyclicDependency);
  CHECK(code_of({"d", {z}, z, {"identity", {}}, 1, 0}) == ErrorCode::CyclicDependency);
  CHECK(code_of({"a", {z}, StreamKey{"m", "w"}, {"identity", {}}, 1, 0}) == ErrorCode::InvalidArgument);
  CHECK(code_of({"e", {z}, StreamKey{"m", "w"}, {"no_such_kernel", {}}, 1, 0}) == ErrorCode::InvalidArgument);
  CHECK(code_of({"f", {z, x}, StreamKey{"m", "w"}, {"identity", {}}, 1, 0}) == ErrorCode::InvalidArgument);
  CHECK(code_of({"g", {z}, StreamKey{"m", "w"}, {"frequency_deviation", {{"window_ns", 1e8}}}, 1, 10}) ==
        ErrorCode::InvalidArgument);
  CHECK(p.distillers().size() == 1);
}

TEST_CASE("chain materializes in topological order and equals the composed kernels") {
  store::Store s = store::Store::in_memory();
  Pipeline p(s);
  const StreamKey in{"m", "raw"}, b{"m", "b"}, c{"m", "c"}, d{"m", "d"};
  // Registered out of order on purpose.
  p.register_distiller({"C", {c}, d, {"linear", {{"gain", -1.0}}}, 1, 0});
  p.register_distiller({"B", {b}, c, {"linear", {{"offset", 3.0}}}, 1, 0});
  p.register_distiller({"A", {in}, b, {"linear", {{"gain", 2.0}}}, 1, 0});
  const auto order = p.distillers();
  CHECK(order[0].name == "A");
  CHECK(order[1].name == "B");
  CHECK(order[2].name == "C");
  s.insert(in, ramp(0, 300, 1.0, 5.0));
  CHECK(p.propagate().size() == 3);
  const auto raw = all(s, in), out = all(s, d);
  REQUIRE(out.size() == raw.size());
  for (std::size_t i = 0; i < raw.size(); ++i) {
    CHECK(out[i].time == raw[i].time);
    CHECK(out[i].value == -(2.0 * raw[i].value + 3.0));
  }
}

TEST_CASE("incremental recompute touches only affected chunks") {
  store::Store s = store::Store::in_memory();
  Pipeline p(s);
  const StreamKey in{"m", "V_mag_a"}, out{"m", "corr"};
  const StreamKey other{"n", "V_mag_a"};
  s.insert(in, ramp(0, 2400, 0.1));
  s.insert(other, ramp(0, 2400, 0.2, 1.0));
  p.register_distiller({"corr", {in, other}, out, {"magnitude_correlation", {{"window_ns", 5e7}}}, 1, 50'000'000});
  p.propagate();
  const auto before = all(s, out);

  // Overwrite a short burst in the middle of `other`.
  std::vector<Point> patch;
  for (int k = 1200; k < 1210; ++k) patch.push_back({k * kDt, -50.0 + k});
  s.insert(other, patch);
  const auto mats = p.propagate();
  REQUIRE(mats.size() == 1);
  REQUIRE(mats[0].recomputed.size() == 1);
  const auto r = mats[0].recomputed[0];
  CHECK(r.start <= 1200 * kDt);
  CHECK(r.end >= 1209 * kDt + 50'000'000);
  CHECK(r.end - r.start < 200'000'000);

  const auto after = all(s, out);
  CHECK(testing::same_points(after, p.full_recompute("corr")));
  REQUIRE(after.size() == before.size());
  for (std::size_t i = 0; i < after.size(); ++i) {
    if (after[i].time < r.start || after[i].time >= r.end) {
      CHECK(testing::same_bits(after[i].value, before[i].value));
    }
  }
}

TEST_CASE("kernel_version bump recomputes everything with identical values") {
  store::Store s = store::Store::in_memory();
  Pipeline p(s);
  const StreamKey a{"m", "V_ang_a"}, b{"n", "V_ang_a"}, out{"m", "diff"};
  s.insert(a, ramp(0, 600, 0.7, 100.0));
  s.insert(b, ramp(0, 600, -0.4));
  p.register_distiller({"diff", {a, b}, out, {"angle_difference", {}}, 1, 0});
  p.propagate();
  const auto before = all(s, out);
  CHECK(p.propagate().empty());
  p.set_kernel_version("diff", 2);
  const auto mats = p.propagate();
  REQUIRE(mats.size() == 1);
  CHECK(mats[0].full);
  CHECK(mats[0].recomputed.front().start <= 0);
  CHECK(mats[0].recomputed.back().end >= 599 * kDt);
  CHECK(testing::same_points(all(s, out), before));
  for (const auto& pt : before) CHECK(pt.value > -180.0);
}

TEST_CASE("built-in kernels") {
  SUBCASE("angle_difference wraps") {
    auto k = make_kernel({"angle_difference", {}}, 2);
    const auto out = k({{0, {170.0, -170.0}}, {1, {-179.0, 179.0}}, {2, {180.0, 0.0}}});
    CHECK(out[0].value == doctest::Approx(-20.0));
    CHECK(out[1].value == doctest::Approx(2.0));
    CHECK(out[2].value == doctest::Approx(180.0));
  }
  SUBCASE("real_power") {
    auto k = make_kernel({"real_power", {}}, 4);
    const auto out = k({{0, {7200.0, 10.0, 50.0, -20.0}}});
    CHECK(out[0].value == doctest::Approx(7200.0 * 50.0 * std::cos(30.0 * std::numbers::pi / 180.0)));
  }
  SUBCASE("frequency_deviation recovers a linear angle drift across the wrap") {
    auto k = make_kernel({"frequency_deviation", {{"window_ns", 1e8}}}, 1);
    std::vector<Row> rows;
    const double df = 0.05;  // Hz
    for (int i = 0; i < 120; ++i) {
      const double t = i * kDt * 1e-9;
      double ang = std::remainder(175.0 + 360.0 * df * t, 360.0);
      rows.push_back({i * kDt, {ang}});
    }
    const auto out = k(rows);
    CHECK(std::isnan(out[0].value));
    for (std::size_t i = 5; i < out.size(); ++i) CHECK(out[i].value == doctest::Approx(df).epsilon(1e-9));
  }
  SUBCASE("magnitude_correlation") {
    auto k = make_kernel({"magnitude_correlation", {{"window_ns", 1e9}}}, 2);
    std::vector<Row> rows;
    for (int i = 0; i < 50; ++i) rows.push_back({i * kDt, {std::sin(0.3 * i), -2.0 * std::sin(0.3 * i) + 4.0}});
    const auto out = k(rows);
    CHECK(std::isnan(out[1].value));
    CHECK(out[49].value == doctest::Approx(-1.0).epsilon(1e-12));
  }
}

TEST_CASE("a failing chunk is quarantined while others proceed") {
  register_kernel("fragile", [](const KernelRef&, std::size_t) -> Kernel {
    return [](const std::vector<Row>& rows) {
      std::vector<Point> out;
      for (const auto& r : rows) {
        if (r.values[0] > 1e6) throw std::runtime_error("spike");
        out.push_back({r.time, r.values[0]});
      }
      return out;
    };
  });
  store::Store s = store::Store::in_memory();
  Pipeline p(s);
  const StreamKey in{"m", "x"}, out{"m", "y"};
  auto pts = ramp(0, 1200, 1.0);
  pts[600].value = 1e9;
  s.insert(in, pts);
  p.register_distiller({"f", {in}, out, {"fragile", {}}, 1, 0});
  const auto mats = p.propagate();
  REQUIRE(mats.size() == 1);
  REQUIRE(mats[0].failed.size() == 1);
  const auto f = mats[0].failed[0];
  CHECK(f.start <= pts[600].time);
  CHECK(f.end > pts[600].time);
  CHECK(f.end - f.start == (std::int64_t{1} << 22));
  CHECK(all(s, out).size() == 1199);

  // Fixing the input releases the quarantine.
  s.insert(in, std::vector<Point>{{pts[600].time, 600.0}});
  const auto again = p.propagate();
  REQUIRE(again.size() == 1);
  CHECK(again[0].failed.empty());
  CHECK(all(s, out).size() == 1200);
}

TEST_CASE("registry and lineage persist next to the store") {
  const auto dir = std::filesystem::temp_directory_path() / ("upmu-distill-" + std::to_string(std::random_device{}()));
  std::filesystem::remove_all(dir);
  const StreamKey in{"m", "x"}, out{"m", "y"};
  {
    store::Store s = store::Store::open(dir);
    Pipeline p(s);
    p.register_distiller({"lin", {in}, out, {"linear", {{"gain", 3.0}}}, 1, 0});
    s.insert(in, ramp(0, 100, 1.0));
    p.propagate();
  }
  {
    store::Store s = store::Store::open(dir);
    Pipeline p(s);
    REQUIRE(p.distillers().size() == 1);
    CHECK(p.distillers()[0].kernel.params.at("gain") == 3.0);
    CHECK(p.lineage().size() == 1);
    CHECK(p.propagate().empty());
    s.insert(in, ramp(100, 10, 1.0));
    CHECK(p.propagate().size() == 1);
    CHECK(all(s, out).size() == 110);
  }
  std::filesystem::remove_all(dir);
}

TEST_CASE("incremental equals full recomputation over random interleavings") {
  for (std::uint64_t seed : {1u, 2u, 3u}) {
    CAPTURE(seed);
    CHECK(testing::pipeline_property_run(seed, 15) == "");
  }
}

TEST_CASE("store property run") { CHECK(testing::store_property_run(77, 20'000, 20) == ""); }
