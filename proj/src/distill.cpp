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

#include "upmu/distill.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <mutex>
#include <numbers>

#include <json.hpp>

#include "upmu/error.hpp"

namespace upmu::distill {

namespace {

using json = nlohmann::json;
constexpr std::int64_t kMin = std::numeric_limits<std::int64_t>::min();
constexpr std::int64_t kMax = std::numeric_limits<std::int64_t>::max();
constexpr double kNaN = std::numeric_limits<double>::quiet_NaN();

std::int64_t sat_add(std::int64_t a, std::int64_t b) {
  std::int64_t r;
  if (__builtin_add_overflow(a, b, &r)) return b > 0 ? kMax : kMin;
  return r;
}

std::int64_t align_up(std::int64_t t, int pw) {
  const std::int64_t down = store::align_down(t, pw);
  return down == t ? t : sat_add(down, std::int64_t{1} << pw);
}

std::vector<TimeRange> merge(std::vector<TimeRange> r) {
  std::sort(r.begin(), r.end(), [](const TimeRange& a, const TimeRange& b) { return a.start < b.start; });
  std::vector<TimeRange> out;
  for (const auto& x : r) {
    if (x.start >= x.end) continue;
    if (!out.empty() && x.start <= out.back().end) {
      out.back().end = std::max(out.back().end, x.end);
    } else {
      out.push_back(x);
    }
  }
  return out;
}

double param(const KernelRef& ref, const std::string& key, double fallback) {
  auto it = ref.params.find(key);
  return it == ref.params.end() ? fallback : it->second;
}

void expect_inputs(const KernelRef& ref, std::size_t got, std::size_t want) {
  if (got != want) {
    throw Error(ErrorCode::InvalidArgument, "kernel '" + ref.name + "' takes " + std::to_string(want) + " inputs, got " +
                                                std::to_string(got));
  }
}

std::int64_t window_param(const KernelRef& ref) {
  const double w = param(ref, "window_ns", 0.0);
  if (!(w > 0.0)) throw Error(ErrorCode::InvalidArgument, "kernel '" + ref.name + "' needs window_ns > 0");
  return static_cast<std::int64_t>(w);
}

double wrap_deg(double d) {
  double w = std::remainder(d, 360.0);
  if (w <= -180.0) w += 360.0;
  return w;
}

/// Calls f(row_index, first_index_in_window) with the window [t - w, t].
template <class F>
void sliding(const std::vector<Row>& rows, std::int64_t w, F&& f) {
  std::size_t lo = 0;
  for (std::size_t i = 0; i < rows.size(); ++i) {
    while (rows[lo].time < rows[i].time - w) ++lo;
    f(i, lo);
  }
}

Kernel correlation_kernel(std::int64_t w) {
  return [w](const std::vector<Row>& rows) {
    std::vector<Point> out;
    out.reserve(rows.size());
    sliding(rows, w, [&](std::size_t i, std::size_t lo) {
      const std::size_t n = i - lo + 1;
      double value = kNaN;
      if (n >= 3) {
        double mx = 0, my = 0;
        for (std::size_t k = lo; k <= i; ++k) {
          mx += rows[k].values[0];
          my += rows[k].values[1];
        }
        mx /= n;
        my /= n;
        double sxy = 0, sxx = 0, syy = 0;
        for (std::size_t k = lo; k <= i; ++k) {
          const double dx = rows[k].values[0] - mx, dy = rows[k].values[1] - my;
          sxy += dx * dy;
          sxx += dx * dx;
          syy += dy * dy;
        }
        if (sxx > 0 && syy > 0) value = sxy / std::sqrt(sxx * syy);
      }
      out.push_back({rows[i].time, value});
    });
    return out;
  };
}

Kernel frequency_kernel(std::int64_t w) {
  return [w](const std::vector<Row>& rows) {
    std::vector<Point> out;
    out.reserve(rows.size());
    sliding(rows, w, [&](std::size_t i, std::size_t lo) {
      const std::size_t n = i - lo + 1;
      double value = kNaN;
      if (n >= 2) {
        // Unwrap from the window start, then least-squares slope in deg/s.
        double prev = rows[lo].values[0], acc = prev;
        double st = 0, sa = 0, stt = 0, sta = 0;
        for (std::size_t k = lo; k <= i; ++k) {
          if (k > lo) {
            acc += wrap_deg(rows[k].values[0] - prev);
            prev = rows[k].values[0];
          }
          const double t = static_cast<double>(rows[k].time - rows[i].time) * 1e-9;
          st += t;
          sa += acc;
          stt += t * t;
          sta += t * acc;
        }
        const double den = n * stt - st * st;
        if (den > 0) value = (n * sta - st * sa) / den / 360.0;
      }
      out.push_back({rows[i].time, value});
    });
    return out;
  };
}

template <class F>
Kernel pointwise(F f) {
  return [f](const std::vector<Row>& rows) {
    std::vector<Point> out;
    out.reserve(rows.size());
    for (const Row& r : rows) out.push_back({r.time, f(r.values)});
    return out;
  };
}

std::map<std::string, KernelFactory>& factories() {
  static std::map<std::string, KernelFactory> f = [] {
    std::map<std::string, KernelFactory> m;
    m["identity"] = [](const KernelRef& ref, std::size_t n) {
      expect_inputs(ref, n, 1);
      return pointwise([](const std::vector<double>& v) { return v[0]; });
    };
    m["linear"] = [](const KernelRef& ref, std::size_t n) {
      expect_inputs(ref, n, 1);
      const double g = param(ref, "gain", 1.0), o = param(ref, "offset", 0.0);
      return pointwise([g, o](const std::vector<double>& v) { return g * v[0] + o; });
    };
    m["sum"] = [](const KernelRef&, std::size_t) {
      return pointwise([](const std::vector<double>& v) {
        double s = 0;
        for (double x : v) s += x;
        return s;
      });
    };
    m["angle_difference"] = [](const KernelRef& ref, std::size_t n) {
      expect_inputs(ref, n, 2);
      return pointwise([](const std::vector<double>& v) { return wrap_deg(v[0] - v[1]); });
    };
    m["real_power"] = [](const KernelRef& ref, std::size_t n) {
      expect_inputs(ref, n, 4);
      return pointwise([](const std::vector<double>& v) { return v[0] * v[2] * std::cos((v[1] - v[3]) * std::numbers::pi / 180.0); });
    };
    m["magnitude_correlation"] = [](const KernelRef& ref, std::size_t n) {
      expect_inputs(ref, n, 2);
      return correlation_kernel(window_param(ref));
    };
    m["frequency_deviation"] = [](const KernelRef& ref, std::size_t n) {
      expect_inputs(ref, n, 1);
      return frequency_kernel(window_param(ref));
    };
    return m;
  }();
  return f;
}

std::mutex& factories_mutex() {
  static std::mutex mu;
  return mu;
}

json to_json(const TimeRange& r) { return json::array({r.start, r.end}); }
TimeRange range_from_json(const json& j) { return {j.at(0).get<std::int64_t>(), j.at(1).get<std::int64_t>()}; }

json to_json(const Materialization& m) {
  json j;
  j["distiller"] = m.distiller;
  j["kernel_version"] = m.kernel_version;
  j["input_versions"] = m.input_versions;
  j["output_version"] = m.output_version ? json(*m.output_version) : json(nullptr);
  j["recomputed"] = json::array();
  for (const auto& r : m.recomputed) j["recomputed"].push_back(to_json(r));
  j["failed"] = json::array();
  for (const auto& r : m.failed) j["failed"].push_back(to_json(r));
  j["unmatched_rows"] = m.unmatched_rows;
  j["full"] = m.full;
  return j;
}

Materialization materialization_from_json(const json& j) {
  Materialization m;
  m.distiller = j.at("distiller");
  m.kernel_version = j.at("kernel_version");
  m.input_versions = j.at("input_versions").get<std::map<std::string, Version>>();
  if (!j.at("output_version").is_null()) m.output_version = j.at("output_version").get<Version>();
  for (const auto& r : j.at("recomputed")) m.recomputed.push_back(range_from_json(r));
  for (const auto& r : j.at("failed")) m.failed.push_back(range_from_json(r));
  m.unmatched_rows = j.at("unmatched_rows");
  m.full = j.at("full");
  return m;
}

}  // namespace

Kernel make_kernel(const KernelRef& ref, std::size_t n_inputs) {
  KernelFactory f;
  {
    std::lock_guard lock(factories_mutex());
    auto it = factories().find(ref.name);
    if (it == factories().end()) throw Error(ErrorCode::InvalidArgument, "unknown kernel '" + ref.name + "'");
    f = it->second;
  }
  return f(ref, n_inputs);
}

void register_kernel(const std::string& name, KernelFactory factory) {
  std::lock_guard lock(factories_mutex());
  factories()[name] = std::move(factory);
}

std::int64_t required_lag(const KernelRef& ref) {
  return static_cast<std::int64_t>(std::max(0.0, param(ref, "window_ns", 0.0)));
}

std::vector<Row> join_nearest(const std::vector<std::vector<Point>>& inputs, std::int64_t tolerance,
                              std::uint64_t* unmatched) {
  std::vector<Row> rows;
  if (inputs.empty()) return rows;
  const auto& master = inputs[0];
  std::vector<std::size_t> cursor(inputs.size(), 0);
  std::uint64_t missed = 0;
  rows.reserve(master.size());
  for (const Point& m : master) {
    Row row{m.time, {m.value}};
    bool ok = true;
    for (std::size_t k = 1; k < inputs.size() && ok; ++k) {
      const auto& s = inputs[k];
      std::size_t& c = cursor[k];
      while (c < s.size() && s[c].time < m.time) ++c;
      // Candidates: s[c-1] (before) and s[c] (at or after).
      const Point* best = nullptr;
      std::int64_t best_d = kMax;
      if (c > 0) {
        best = &s[c - 1];
        best_d = m.time - s[c - 1].time;
      }
      if (c < s.size() && s[c].time - m.time < best_d) {
        best = &s[c];
        best_d = s[c].time - m.time;
      }
      if (!best || best_d > tolerance) {
        ok = false;
      } else {
        row.values.push_back(best->value);
      }
    }
    if (ok) {
      rows.push_back(std::move(row));
    } else {
      ++missed;
    }
  }
  if (unmatched) *unmatched += missed;
  return rows;
}

Pipeline::Pipeline(store::Store& store, PipelineOptions options) : store_(store), opt_(options) {
  if (opt_.chunk_pointwidth < 0 || opt_.chunk_pointwidth > store::kMaxQueryPointwidth) {
    throw Error(ErrorCode::InvalidPointwidth, "chunk pointwidth must lie in [0, 62]");
  }
  if (opt_.join_tolerance_ns < 0) throw Error(ErrorCode::InvalidArgument, "join tolerance must be >= 0");
  load();
}

std::vector<std::size_t> Pipeline::topo_order(const std::vector<State>& states) const {
  const std::size_t n = states.size();
  std::vector<std::vector<std::size_t>> next(n);
  std::vector<int> indeg(n, 0);
  for (std::size_t a = 0; a < n; ++a)
    for (std::size_t b = 0; b < n; ++b) {
      const auto& ins = states[b].spec.inputs;
      if (std::find(ins.begin(), ins.end(), states[a].spec.output) != ins.end()) {
        next[a].push_back(b);
        ++indeg[b];
      }
    }
  std::vector<std::size_t> order;
  std::vector<bool> done(n, false);
  while (order.size() < n) {
    std::size_t pick = n;
    for (std::size_t i = 0; i < n; ++i)
      if (!done[i] && indeg[i] == 0) {
        pick = i;
        break;
      }
    if (pick == n) {
      std::vector<std::string> cyc;
      for (std::size_t i = 0; i < n; ++i)
        if (!done[i]) cyc.push_back(states[i].spec.name);
      throw Error(ErrorCode::CyclicDependency, "distillers form a cycle", cyc);
    }
    done[pick] = true;
    order.push_back(pick);
    for (std::size_t b : next[pick]) --indeg[b];
  }
  return order;
}

void Pipeline::register_distiller(const DistillerSpec& spec) {
  if (spec.name.empty()) throw Error(ErrorCode::InvalidArgument, "distiller name is empty");
  if (spec.inputs.empty()) throw Error(ErrorCode::InvalidArgument, "distiller '" + spec.name + "' has no inputs");
  if (spec.lag_ns < 0) throw Error(ErrorCode::InvalidArgument, "lag must be >= 0");
  for (const auto& s : states_) {
    if (s.spec.name == spec.name) throw Error(ErrorCode::InvalidArgument, "distiller '" + spec.name + "' exists");
    if (s.spec.output == spec.output) {
      throw Error(ErrorCode::OutputClaimed, spec.output.str() + " is already written by '" + s.spec.name + "'");
    }
  }
  if (std::find(spec.inputs.begin(), spec.inputs.end(), spec.output) != spec.inputs.end()) {
    throw Error(ErrorCode::CyclicDependency, "distiller '" + spec.name + "' reads its own output");
  }
  if (spec.lag_ns < required_lag(spec.kernel)) {
    throw Error(ErrorCode::InvalidArgument, "lag shorter than the kernel window for '" + spec.name + "'");
  }
  State st{spec, make_kernel(spec.kernel, spec.inputs.size()), {}, 0, {}};
  std::vector<State> next = states_;
  next.push_back(std::move(st));
  const auto order = topo_order(next);
  std::vector<State> sorted;
  for (std::size_t i : order) sorted.push_back(std::move(next[i]));
  states_ = std::move(sorted);
  save();
}

void Pipeline::set_kernel_version(const std::string& name, std::uint64_t version) {
  for (auto& s : states_) {
    if (s.spec.name == name) {
      s.spec.kernel_version = version;
      save();
      return;
    }
  }
  throw Error(ErrorCode::NotFound, "no distiller '" + name + "'");
}

std::vector<DistillerSpec> Pipeline::distillers() const {
  std::vector<DistillerSpec> out;
  for (const auto& s : states_) out.push_back(s.spec);
  return out;
}

std::vector<Point> Pipeline::run_range(const State& s, TimeRange range, std::uint64_t* unmatched) const {
  const std::int64_t tol = opt_.join_tolerance_ns;
  const std::int64_t lookback = sat_add(range.start, -s.spec.lag_ns);
  const std::int64_t q0 = sat_add(lookback, -tol);
  const std::int64_t q1 = sat_add(range.end, tol);
  std::vector<std::vector<Point>> inputs;
  for (const auto& key : s.spec.inputs) {
    inputs.push_back(store_.contains(key) ? store_.query_raw(key, q0, q1) : std::vector<Point>{});
  }
  std::vector<Row> rows = join_nearest(inputs, tol);
  // Rows before the lookback may be joined against a truncated neighbour
  // and are never needed.
  std::erase_if(rows, [&](const Row& r) { return r.time < lookback || r.time >= range.end; });
  if (unmatched) {
    const auto in_range = [&](const Point& p) { return p.time >= range.start && p.time < range.end; };
    const auto rows_in = std::count_if(rows.begin(), rows.end(), [&](const Row& r) { return r.time >= range.start; });
    *unmatched += std::count_if(inputs[0].begin(), inputs[0].end(), in_range) - rows_in;
  }
  std::vector<Point> out = s.kernel(rows);
  std::erase_if(out, [&](const Point& p) { return p.time < range.start || p.time >= range.end; });
  return out;
}

std::vector<Point> Pipeline::full_recompute(const std::string& name) const {
  for (const auto& s : states_) {
    if (s.spec.name != name) continue;
    std::vector<std::vector<Point>> inputs;
    for (const auto& key : s.spec.inputs) {
      inputs.push_back(store_.contains(key) ? store_.query_raw(key, kMin, kMax) : std::vector<Point>{});
    }
    return s.kernel(join_nearest(inputs, opt_.join_tolerance_ns));
  }
  throw Error(ErrorCode::NotFound, "no distiller '" + name + "'");
}

std::vector<Materialization> Pipeline::propagate() {
  const int pw = opt_.chunk_pointwidth;
  const std::int64_t tol = opt_.join_tolerance_ns;
  std::vector<Materialization> produced;

  for (State& s : states_) {
    Materialization m;
    m.distiller = s.spec.name;
    m.kernel_version = s.spec.kernel_version;
    m.full = s.materialized_kernel_version != s.spec.kernel_version;

    std::vector<TimeRange> dirty;
    bool changed = false;
    for (const auto& key : s.spec.inputs) {
      const Version now = store_.contains(key) ? store_.latest_version(key) : 0;
      const Version before = s.consumed.count(key.str()) ? s.consumed.at(key.str()) : 0;
      m.input_versions[key.str()] = now;
      if (now == before) continue;
      changed = true;
      if (m.full) continue;
      for (const auto& r : store_.changed_ranges(key, before, now, pw)) {
        dirty.push_back({sat_add(r.start, -tol), sat_add(sat_add(r.end, s.spec.lag_ns), tol)});
      }
    }
    if (m.full) {
      if (const auto& master = s.spec.inputs[0]; store_.contains(master)) {
        if (auto e = store_.extent(master)) dirty.push_back(*e);
      }
    }
    if (!changed && !m.full) continue;
    for (auto& r : dirty) r = {store::align_down(r.start, pw), align_up(r.end, pw)};
    m.recomputed = merge(std::move(dirty));

    std::vector<Point> out;
    std::vector<TimeRange> failed;
    // A failing range is bisected down to single chunks so only those are quarantined.
    std::function<void(TimeRange)> run = [&](TimeRange r) {
      try {
        std::uint64_t unmatched = 0;
        auto pts = run_range(s, r, &unmatched);
        out.insert(out.end(), pts.begin(), pts.end());
        m.unmatched_rows += unmatched;
      } catch (const std::exception&) {
        const std::uint64_t chunks = (static_cast<std::uint64_t>(r.end) - static_cast<std::uint64_t>(r.start)) >> pw;
        if (chunks <= 1) {
          failed.push_back(r);
          return;
        }
        const std::int64_t mid = static_cast<std::int64_t>(static_cast<std::uint64_t>(r.start) +
                                                           ((chunks / 2) << pw));
        run({r.start, mid});
        run({mid, r.end});
      }
    };
    for (const auto& r : m.recomputed) run(r);
    m.failed = merge(failed);

    if (!out.empty()) {
      std::sort(out.begin(), out.end(), [](const Point& a, const Point& b) { return a.time < b.time; });
      m.output_version = store_.insert(s.spec.output, out);
    }

    // Failed chunks that were recomputed cleanly this time leave quarantine.
    std::vector<TimeRange> still;
    for (const auto& f : s.failed) {
      const bool covered = std::any_of(m.recomputed.begin(), m.recomputed.end(),
                                       [&](const TimeRange& r) { return r.start <= f.start && f.end <= r.end; });
      if (!covered) still.push_back(f);
    }
    still.insert(still.end(), m.failed.begin(), m.failed.end());
    s.failed = merge(std::move(still));
    s.consumed = m.input_versions;
    s.materialized_kernel_version = s.spec.kernel_version;

    if (const auto dir = store_.directory()) {
      std::ofstream log(*dir / "lineage.jsonl", std::ios::app);
      log << to_json(m).dump() << '\n';
    }
    log_.push_back(m);
    produced.push_back(std::move(m));
  }
  if (!produced.empty()) save();
  return produced;
}

void Pipeline::save() const {
  const auto dir = store_.directory();
  if (!dir) return;
  json reg = json::array();
  for (const auto& s : states_) {
    json j;
    j["name"] = s.spec.name;
    j["inputs"] = json::array();
    for (const auto& k : s.spec.inputs) j["inputs"].push_back(k.str());
    j["output"] = s.spec.output.str();
    j["kernel"] = {{"name", s.spec.kernel.name}, {"params", s.spec.kernel.params}};
    j["kernel_version"] = s.spec.kernel_version;
    j["lag_ns"] = s.spec.lag_ns;
    j["consumed"] = s.consumed;
    j["materialized_kernel_version"] = s.materialized_kernel_version;
    j["failed"] = json::array();
    for (const auto& r : s.failed) j["failed"].push_back(to_json(r));
    reg.push_back(std::move(j));
  }
  const auto tmp = *dir / "distillers.json.tmp";
  {
    std::ofstream out(tmp);
    out << json{{"format", 1}, {"distillers", reg}}.dump(2) << '\n';
  }
  std::filesystem::rename(tmp, *dir / "distillers.json");
}

void Pipeline::load() {
  const auto dir = store_.directory();
  if (!dir) return;
  const auto reg_path = *dir / "distillers.json";
  if (std::filesystem::exists(reg_path)) {
    std::ifstream in(reg_path);
    const json doc = json::parse(in, nullptr, false);
    if (doc.is_discarded() || !doc.contains("distillers")) {
      throw Error(ErrorCode::StorageCorrupt, "unreadable distiller registry " + reg_path.string());
    }
    for (const auto& j : doc.at("distillers")) {
      State s;
      s.spec.name = j.at("name");
      for (const auto& k : j.at("inputs")) s.spec.inputs.push_back(StreamKey::parse(k.get<std::string>()));
      s.spec.output = StreamKey::parse(j.at("output").get<std::string>());
      s.spec.kernel.name = j.at("kernel").at("name");
      s.spec.kernel.params = j.at("kernel").at("params").get<std::map<std::string, double>>();
      s.spec.kernel_version = j.at("kernel_version");
      s.spec.lag_ns = j.at("lag_ns");
      s.consumed = j.at("consumed").get<std::map<std::string, Version>>();
      s.materialized_kernel_version = j.at("materialized_kernel_version");
      for (const auto& r : j.at("failed")) s.failed.push_back(range_from_json(r));
      s.kernel = make_kernel(s.spec.kernel, s.spec.inputs.size());
      states_.push_back(std::move(s));
    }
  }
  const auto log_path = *dir / "lineage.jsonl";
  if (std::filesystem::exists(log_path)) {
    std::ifstream in(log_path);
    for (std::string line; std::getline(in, line);) {
      if (line.empty()) continue;
      const json j = json::parse(line, nullptr, false);
      if (j.is_discarded()) continue;  // torn final line
      log_.push_back(materialization_from_json(j));
    }
  }
}

}  // namespace upmu::distill
