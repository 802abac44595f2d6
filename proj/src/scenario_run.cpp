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

#include <algorithm>
#include <charconv>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <ctime>
#include <fstream>
#include <iomanip>
#include <set>
#include <sstream>

#include <openssl/evp.h>

#include "upmu/error.hpp"
#include "upmu/scenario.hpp"

namespace upmu::scenario {

namespace {

std::string num(double x) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", x);
  return buf;
}

const char* letter(int phase) { return phase == 0 ? "a" : (phase == 1 ? "b" : "c"); }

json complex_json(const Complex& z) { return json::array({z.real(), z.imag()}); }

json polar_json(const Vector3c& v, double base) {
  json out = json::array();
  for (int p = 0; p < 3; ++p) out.push_back({{"mag_pu", std::abs(v[p]) / base}, {"angle_deg", rad_to_deg(std::arg(v[p]))}});
  return out;
}

LoadProfile build_profile(const ProfileSpec& s, std::uint64_t seed, double duration) {
  if (s.kind == "random_walk") {
    return LoadProfile::random_walk(s.seed.value_or(seed), s.until_s.value_or(duration + 1.0), s.step_s, s.sigma, s.rho);
  }
  return s.table;
}

struct Profiles {
  std::map<std::string, LoadProfile> loads;
  std::optional<LoadProfile> source;
};

Profiles profiles_of(const Scenario& sc) {
  Profiles out;
  std::uint64_t k = 0;
  for (const auto& [bus, spec] : sc.load_profiles) out.loads[bus] = build_profile(spec, sc.seed * 1000003 + ++k, sc.duration_s);
  if (sc.source_profile) out.source = build_profile(*sc.source_profile, sc.seed * 1000003 + 999983, sc.duration_s);
  return out;
}

ThreePhaseSet relabel(const ThreePhaseSet& s, const std::array<int, 3>& perm) {
  ThreePhaseSet out;
  for (std::size_t i = 0; i < 3; ++i) out[i] = s[static_cast<std::size_t>(perm[i])];
  return out;
}

/// Event activity intervals in ns. Instantaneous events get one report period.
std::vector<std::pair<std::int64_t, std::int64_t>> event_spans(const Scenario& sc) {
  std::vector<std::pair<std::int64_t, std::int64_t>> out;
  auto ns = [](double s) { return static_cast<std::int64_t>(std::llround(s * 1e9)); };
  for (const Event& e : sc.events.events) {
    double dur = 1.0 / sc.report_rate;
    if (auto* f = std::get_if<BoltedFault>(&e.action)) dur = f->duration_s;
    if (auto* s = std::get_if<VoltageSag>(&e.action)) dur = s->duration_s;
    if (auto* o = std::get_if<Oscillation>(&e.action)) dur = std::min(o->duration_s, sc.duration_s - e.time_s);
    out.emplace_back(ns(e.time_s), ns(e.time_s + dur));
  }
  return out;
}

/// Number of delta-wye transformers between the source and `bus` with the
/// switch states in force in `m`.
int transformers_above(const FeederModel& m, const std::string& bus) {
  std::map<std::string, std::pair<std::string, bool>> parent;  // child -> (parent, through transformer)
  std::vector<std::string> frontier{m.source.bus};
  std::set<std::string> seen{m.source.bus};
  while (!frontier.empty()) {
    std::vector<std::string> next;
    for (const auto& b : frontier) {
      for (const Branch& br : m.branches) {
        if (auto* s = std::get_if<SwitchBranch>(&br.kind); s && s->status == SwitchStatus::Open) continue;
        const std::string* other = br.from == b ? &br.to : (br.to == b ? &br.from : nullptr);
        if (!other || seen.count(*other)) continue;
        seen.insert(*other);
        parent[*other] = {b, br.is_transformer()};
        next.push_back(*other);
      }
    }
    frontier = std::move(next);
  }
  int n = 0;
  for (std::string b = bus; parent.count(b); b = parent.at(b).first) n += parent.at(b).second;
  return n;
}

int wrap_offset(int deg) {
  deg %= 360;
  if (deg <= -180) deg += 360;
  if (deg > 180) deg -= 360;
  return deg;
}

class Runner {
 public:
  Runner(const Scenario& sc, const DiagnosticInputs& in) : sc_(sc), in_(in) {
    if (!in_.store) throw Error(ErrorCode::InvalidArgument, "diagnostics need a store");
  }

  std::vector<Frame> frames(const std::string& meter, const Window& w) const {
    return load_frames(*in_.store, meter, w.start_ns(), w.end_ns());
  }

  std::map<std::string, std::vector<Frame>> all_frames(const Window& w, const std::vector<std::string>& only = {}) const {
    std::map<std::string, std::vector<Frame>> out;
    for (const Meter& m : sc_.model.meters) {
      if (!only.empty() && std::find(only.begin(), only.end(), m.id) == only.end()) continue;
      if (in_.store->contains({m.id, frame_channels()[0]})) out[m.id] = frames(m.id, w);
    }
    return out;
  }

  FeederModel model_at_time(double t) const { return model_at(sc_.model, {}, std::nullopt, sc_.events, t); }

  json operator()(const PhaseIdRequest& q) const {
    const auto ref_frames = frames(q.reference, q.window);
    const auto one_offset = [] {
      const Vector3c v = balanced_voltage(1.0);
      const Vector3c lv = transformer_ratio_matrix(1.0).cast<Complex>() * v;
      return static_cast<int>(std::lround(rad_to_deg(std::arg(lv[0] / v[0])) / 30.0)) * 30;
    }();
    const FeederModel m = model_at_time(q.window.t0);
    json out = json::array();
    for (const auto& id : q.meters) {
      json r{{"meter", id}};
      try {
        const auto aligned = diag::align_frames({ref_frames, frames(id, q.window)});
        const auto a = diag::identify_phase(diag::phase_series(aligned[0]), diag::phase_series(aligned[1]));
        r["mapping"] = json::array({letter(a.mapping[0]), letter(a.mapping[1]), letter(a.mapping[2])});
        r["offset_deg"] = a.offset_deg;
        r["score"] = a.score;
        r["angle_residual_deg"] = a.angle_residual_deg;
        if (in_.truth) {
          const auto ident = std::array<int, 3>{0, 1, 2};
          const auto pr = sc_.phase_labels.count(q.reference) ? sc_.phase_labels.at(q.reference) : ident;
          const auto pc = sc_.phase_labels.count(id) ? sc_.phase_labels.at(id) : ident;
          std::array<int, 3> want{};
          for (int i = 0; i < 3; ++i)
            for (int j = 0; j < 3; ++j)
              if (pr[j] == pc[i]) want[i] = j;
          const int off = wrap_offset(one_offset * (transformers_above(m, sc_.model.meter(id).bus) -
                                                    transformers_above(m, sc_.model.meter(q.reference).bus)));
          r["expected_mapping"] = json::array({letter(want[0]), letter(want[1]), letter(want[2])});
          r["expected_offset_deg"] = off;
          r["correct"] = a.mapping == want && a.offset_deg == off;
        }
      } catch (const Error& e) {
        r["error_code"] = std::string(to_string(e.code()));
        r["error"] = e.what();
      }
      out.push_back(r);
    }
    return {{"reference", q.reference}, {"assignments", out}};
  }

  json operator()(const TopologyRequest& q) const {
    const auto res = diag::detect_topology_voting(sc_.model, q.hypotheses, all_frames(q.window, q.meters), {q.metric});
    json hyps = json::array();
    for (std::size_t i = 0; i < res.hypothesis_ids.size(); ++i) {
      hyps.push_back({{"id", res.hypothesis_ids[i]}, {"votes", res.votes[i]}, {"share", res.shares[i]}});
    }
    json out{{"winner", res.winner}, {"hypotheses", hyps}, {"disqualified", res.disqualified}};
    if (in_.truth) {
      const FeederModel m = model_at_time(q.window.t0);
      std::vector<bool> closed;
      for (const Branch& br : m.branches)
        if (auto* s = std::get_if<SwitchBranch>(&br.kind)) closed.push_back(s->status == SwitchStatus::Closed);
      out["truth"] = nullptr;
      for (const auto& h : q.hypotheses)
        if (h.closed == closed) out["truth"] = h.id;
      out["correct"] = out["truth"] == res.winner;
    }
    return out;
  }

  json operator()(const ImpedanceRequest& q) const {
    const Branch& br = sc_.model.branch(q.branch);
    diag::ImpedanceOptions opt;
    opt.max_condition = q.max_condition;
    opt.branch = q.branch;
    Matrix3c truth;
    if (const auto* l = std::get_if<LineBranch>(&br.kind)) truth = l->z;
    if (const auto* t = std::get_if<TransformerBranch>(&br.kind)) truth = t->z_abc;
    if (in_.truth) opt.truth = truth;
    const auto e1 = frames(q.end1, q.window), e2 = frames(q.end2, q.window);
    const auto est = br.is_transformer()
                         ? diag::estimate_transformer_impedance(e1, e2, std::get<TransformerBranch>(br.kind).n_t, opt)
                         : diag::estimate_line_impedance(e1, e2, opt);
    json z = json::array();
    for (int r = 0; r < 3; ++r) {
      json row = json::array();
      for (int c = 0; c < 3; ++c) row.push_back(complex_json(est.z_hat(r, c)));
      z.push_back(row);
    }
    json out{{"branch", q.branch}, {"structure", br.is_transformer() ? "diagonal" : "symmetric"},
             {"z_ohm", z}, {"condition", est.condition_metric}};
    if (est.relative_error_norm) out["relative_error"] = *est.relative_error_norm;
    return out;
  }

  json operator()(const StateEstimationRequest& q) const {
    const double start = q.at_s;
    diag::SeMeasurements meas;
    std::int64_t stamp = -1;
    const PerUnitBases bases = per_unit_bases(sc_.model);
    for (const auto& id : q.meters) {
      const auto fs = frames(id, {start, start + 1.0});
      if (fs.empty()) throw Error(ErrorCode::InsufficientSamples, "no frame from '" + id + "' at " + num(start) + " s");
      diag::VoltageMeasurement vm;
      vm.bus = sc_.model.meter(id).bus;
      vm.value = fs.front().voltage.to_vector();
      vm.sigma_magnitude_pu = std::max(sc_.noise.magnitude_sigma_pu, 1e-6);
      vm.sigma_angle_rad = std::max(sc_.noise.angle_sigma, 1e-7);
      meas.voltages.push_back(vm);
      stamp = std::max(stamp, fs.front().timestamp_ns);
    }
    // Forecast: the nominal model's load draw, summed per bus.
    const PowerFlowSolution nominal = solve_power_flow(sc_.model);
    std::map<std::string, Vector3c> forecast;
    for (std::size_t i = 0; i < sc_.model.loads.size(); ++i) {
      const Load& l = sc_.model.loads[i];
      const Vector3c v = nominal.voltage(l.bus);
      Vector3c s;
      for (int p = 0; p < 3; ++p) s[p] = v[p] * std::conj(nominal.load_current[i][p]);
      auto [it, fresh] = forecast.try_emplace(l.bus, Vector3c::Zero());
      it->second += s;
    }
    for (const auto& [bus, s] : forecast) meas.loads.push_back({bus, s, q.load_sigma_fraction});

    const auto lin = diag::linear_state_estimate(sc_.model, meas);
    const auto wls = diag::wls_state_estimate(sc_.model, meas);
    json buses = json::object();
    for (std::size_t b = 0; b < lin.bus_ids.size(); ++b) {
      const double vb = bases.voltage[*sc_.model.bus_index(lin.bus_ids[b])];
      buses[lin.bus_ids[b]] = {{"linear", polar_json(lin.voltage[b], vb)}, {"wls", polar_json(wls.voltage[b], vb)}};
    }
    json out{{"at_ns", stamp}, {"buses", buses}, {"wls_iterations", wls.iterations}};
    if (in_.truth) {
      const Profiles pr = profiles_of(sc_);
      const FeederModel m = model_at(sc_.model, pr.loads, pr.source, sc_.events, static_cast<double>(stamp) / 1e9);
      const PowerFlowSolution sol = solve_power_flow(m);
      std::map<std::string, Vector3c> truth;
      for (std::size_t b = 0; b < sol.bus_ids.size(); ++b) truth[sol.bus_ids[b]] = sol.bus_voltage[b];
      out["rms_error_pu"] = {{"linear", diag::rms_voltage_error_pu(sc_.model, lin, truth)},
                             {"wls", diag::rms_voltage_error_pu(sc_.model, wls, truth)}};
    }
    return out;
  }

  json operator()(const KpcaRequest& q) const {
    const PerUnitBases bases = per_unit_bases(sc_.model);
    const Window span{std::min(q.train.t0, q.test.t0), std::max(q.train.t1, q.test.t1)};
    std::vector<std::vector<Frame>> streams;
    std::vector<double> vb;
    for (const auto& id : q.meters) {
      streams.push_back(frames(id, span));
      vb.push_back(bases.voltage[*sc_.model.bus_index(sc_.model.meter(id).bus)]);
    }
    const auto windows = diag::build_feature_windows(diag::align_frames(streams), vb, q.window_frames);
    std::vector<Eigen::VectorXd> train;
    std::vector<const diag::FeatureWindow*> test;
    for (const auto& w : windows) {
      if (w.start_ns >= q.train.start_ns() && w.end_ns <= q.train.end_ns()) train.push_back(w.x);
      if (w.start_ns >= q.test.start_ns() && w.end_ns <= q.test.end_ns()) test.push_back(&w);
    }
    const auto model = diag::KpcaModel::fit(train, q.options);
    const auto spans = event_spans(sc_);
    json flagged = json::array();
    int tp = 0, fp = 0, fn = 0;
    for (const auto* w : test) {
      const double s = model.score(w->x);
      const bool flag = s > model.threshold();
      if (flag) flagged.push_back({{"start_ns", w->start_ns}, {"end_ns", w->end_ns}, {"score", s}});
      bool event = false;
      for (const auto& [a, b] : spans) event |= w->start_ns < b && w->end_ns > a;
      tp += flag && event;
      fp += flag && !event;
      fn += !flag && event;
    }
    json out{{"train_windows", train.size()}, {"test_windows", test.size()}, {"components", model.components()},
             {"threshold", model.threshold()}, {"flagged", flagged}};
    if (in_.truth) {
      out["truth"] = {{"true_positives", tp}, {"false_positives", fp}, {"false_negatives", fn},
                      {"precision", tp + fp ? static_cast<double>(tp) / (tp + fp) : 0.0},
                      {"recall", tp + fn ? static_cast<double>(tp) / (tp + fn) : 0.0}};
    }
    return out;
  }

  json operator()(const FaultRequest& q) const {
    const auto fs = all_frames({q.prefault.t0, std::max(q.prefault.t1, q.during.t1)}, q.meters);
    const auto pre = diag::average_window(fs, q.prefault.start_ns(), q.prefault.end_ns());
    const auto during = diag::average_window(fs, q.during.start_ns(), q.during.end_ns());
    const auto loc = diag::locate_fault(model_at_time(q.prefault.t0), pre, during, q.options);
    json out{{"branch", loc.branch}, {"distance_fraction", loc.distance_fraction}, {"mismatch", loc.mismatch},
             {"fault_current_a", {std::abs(loc.fault_current[0]), std::abs(loc.fault_current[1]),
                                  std::abs(loc.fault_current[2])}}};
    if (in_.truth) {
      out["truth"] = nullptr;
      for (const Event& e : sc_.events.events) {
        const auto* f = std::get_if<BoltedFault>(&e.action);
        if (!f || e.time_s >= q.during.t1 || e.time_s + f->duration_s <= q.during.t0) continue;
        out["truth"] = {{"branch", f->branch}, {"distance_fraction", f->distance_fraction}};
        out["branch_correct"] = f->branch == loc.branch;
        out["distance_error"] = std::abs(f->distance_fraction - loc.distance_fraction);
      }
    }
    return out;
  }

  json operator()(const ReverseFlowRequest& q) const {
    const auto fs = frames(q.meter, q.window);
    const auto flags = diag::detect_reverse_flow(fs, sc_.model.va_base, q.deadband_pu);
    json phases = json::object();
    for (int p = 0; p < 3; ++p) {
      std::size_t n = 0;
      json first = nullptr;
      for (std::size_t i = 0; i < flags.size(); ++i) {
        if (!flags[i][p]) continue;
        if (n++ == 0) first = fs[i].timestamp_ns;
      }
      phases[letter(p)] = {{"reverse_frames", n}, {"first_reverse_ns", first},
                           {"fraction", fs.empty() ? 0.0 : static_cast<double>(n) / fs.size()}};
    }
    return {{"meter", q.meter}, {"frames", fs.size()}, {"phases", phases}};
  }

  json operator()(const ChangePointRequest& q) const {
    const auto pts = in_.store->query_raw(q.stream, q.window.start_ns(), q.window.end_ns());
    std::vector<std::int64_t> t;
    std::vector<double> v;
    for (const auto& p : pts) {
      if (!std::isfinite(p.value)) continue;
      t.push_back(p.time);
      v.push_back(p.value);
    }
    const auto cps = diag::detect_switch_transition(t, v, q.options);
    json out{{"stream", q.stream.str()}, {"samples", v.size()}, {"change_points_ns", cps}};
    if (in_.truth) {
      json ev = json::array();
      for (const Event& e : sc_.events.events) {
        const bool step = std::holds_alternative<SwitchToggle>(e.action) || std::holds_alternative<LoadStep>(e.action);
        if (step && e.time_s >= q.window.t0 && e.time_s < q.window.t1) ev.push_back(std::llround(e.time_s * 1e9));
      }
      out["event_times_ns"] = ev;
    }
    return out;
  }

  json operator()(const RequirementsRequest& q) const {
    diag::StreamStatistics stats;
    stats.tve_percent = q.tve_percent;
    stats.latency_s = q.latency_s;
    stats.report_rate_hz = q.report_rate_hz.value_or(sc_.report_rate);
    stats.nominal_frequency_hz = sc_.model.frequency_hz;
    json out = json::object();
    if (!q.tve_meter.empty()) {
      if (!in_.truth) throw Error(ErrorCode::InvalidArgument, "tve_meter needs simulated truth; give tve_percent instead");
      std::map<std::int64_t, const Frame*> ref;
      for (const Frame& f : in_.truth->truth_stream(q.tve_meter)) ref[f.timestamp_ns] = &f;
      std::vector<double> errs;
      for (const Frame& f : frames(q.tve_meter, q.window)) {
        auto it = ref.find(f.timestamp_ns);
        if (it == ref.end() || it->second->gap) continue;
        for (std::size_t p = 0; p < 3; ++p) errs.push_back(100.0 * tve(f.voltage[p], it->second->voltage[p]));
      }
      if (errs.empty()) throw Error(ErrorCode::InsufficientSamples, "no frames to measure TVE on");
      stats.tve_percent = diag::quantile(errs, q.tve_quantile);
      out["measured_tve_percent"] = *stats.tve_percent;
      out["tve_samples"] = errs.size();
    }
    const auto rep = diag::check_requirements(stats, q.use_case);
    json crit = json::array();
    for (const auto& c : rep.criteria) {
      crit.push_back({{"name", c.name}, {"pass", c.pass}, {"value", c.value}, {"limit", c.limit}, {"margin", c.margin}});
    }
    out["use_case"] = rep.use_case;
    out["pass"] = rep.pass;
    out["criteria"] = crit;
    return out;
  }

 private:
  const Scenario& sc_;
  const DiagnosticInputs& in_;
};

void flatten(const json& j, const std::string& path, std::string& out) {
  if (j.is_object()) {
    for (const auto& [k, v] : j.items()) flatten(v, path.empty() ? k : path + "." + k, out);
  } else if (j.is_array() && !j.empty() && (j[0].is_object() || j[0].is_array())) {
    for (std::size_t i = 0; i < j.size(); ++i) flatten(j[i], path + "[" + std::to_string(i) + "]", out);
  } else {
    out += path + " = " + (j.is_string() ? j.get<std::string>() : j.dump()) + "\n";
  }
}

std::string utc_now() {
  const std::time_t t = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&t, &tm);
  std::ostringstream os;
  os << std::put_time(&tm, "%Y-%m-%dT%H:%M:%SZ");
  return os.str();
}

void write_file(const std::filesystem::path& p, const std::string& text) {
  std::ofstream f(p, std::ios::binary | std::ios::trunc);
  if (!f) throw Error(ErrorCode::InvalidArgument, "cannot write '" + p.string() + "'");
  f << text;
}

}  // namespace

// ---------------------------------------------------------------- frames

std::int64_t Window::start_ns() const { return static_cast<std::int64_t>(std::llround(t0 * 1e9)); }
std::int64_t Window::end_ns() const { return static_cast<std::int64_t>(std::llround(t1 * 1e9)); }

const std::vector<std::string>& frame_channels() {
  static const std::vector<std::string> ch{"V_mag_a", "V_mag_b", "V_mag_c", "V_ang_a", "V_ang_b", "V_ang_c",
                                           "I_mag_a", "I_mag_b", "I_mag_c", "I_ang_a", "I_ang_b", "I_ang_c"};
  return ch;
}

namespace {

double channel_value(const Frame& f, std::size_t c) {
  const ThreePhaseSet& s = c < 6 ? f.voltage : f.current;
  const Phasor& p = s[c % 3];
  return (c / 3) % 2 == 0 ? p.magnitude() : rad_to_deg(p.angle());
}

}  // namespace

std::map<store::StreamKey, store::Version> ingest_frames(store::Store& store, const std::vector<Frame>& frames) {
  std::map<store::StreamKey, store::Version> out;
  std::map<std::string, std::vector<const Frame*>> by_meter;
  for (const Frame& f : frames)
    if (!f.gap) by_meter[f.meter_id].push_back(&f);
  for (const auto& [meter, fs] : by_meter) {
    for (std::size_t c = 0; c < frame_channels().size(); ++c) {
      std::vector<store::Point> pts;
      pts.reserve(fs.size());
      for (const Frame* f : fs) pts.push_back({f->timestamp_ns, channel_value(*f, c)});
      const store::StreamKey key{meter, frame_channels()[c]};
      out[key] = store.insert(key, pts);
    }
  }
  return out;
}

std::vector<Frame> load_frames(const store::Store& store, const std::string& meter, std::int64_t t0, std::int64_t t1) {
  const auto& ch = frame_channels();
  std::map<std::int64_t, std::pair<std::array<double, 12>, int>> rows;
  for (std::size_t c = 0; c < ch.size(); ++c) {
    const store::StreamKey key{meter, ch[c]};
    if (!store.contains(key)) throw Error(ErrorCode::NotFound, "no stream " + key.str());
    for (const auto& p : store.query_raw(key, t0, t1)) {
      auto& r = rows[p.time];
      r.first[c] = p.value;
      ++r.second;
    }
  }
  std::vector<Frame> out;
  for (const auto& [t, r] : rows) {
    if (r.second != static_cast<int>(ch.size())) continue;
    Frame f;
    f.timestamp_ns = t;
    f.meter_id = meter;
    for (std::size_t p = 0; p < 3; ++p) {
      f.voltage[p] = Phasor(r.first[p], deg_to_rad(r.first[3 + p]));
      f.current[p] = Phasor(r.first[6 + p], deg_to_rad(r.first[9 + p]));
    }
    out.push_back(f);
  }
  return out;
}

void write_frames_csv(std::ostream& out, const std::vector<std::vector<Frame>>& meters) {
  out << "timestamp_ns,meter,va_mag,va_ang_deg,vb_mag,vb_ang_deg,vc_mag,vc_ang_deg,"
         "ia_mag,ia_ang_deg,ib_mag,ib_ang_deg,ic_mag,ic_ang_deg\n";
  for (const auto& fs : meters) {
    for (const Frame& f : fs) {
      if (f.gap) continue;
      out << f.timestamp_ns << ',' << f.meter_id;
      for (const ThreePhaseSet* s : {&f.voltage, &f.current})
        for (std::size_t p = 0; p < 3; ++p) out << ',' << num((*s)[p].magnitude()) << ',' << num(rad_to_deg((*s)[p].angle()));
      out << '\n';
    }
  }
}

std::map<std::string, std::vector<Frame>> read_frames_csv(std::istream& in) {
  std::map<std::string, std::vector<Frame>> out;
  std::string line;
  std::size_t lineno = 0;
  auto bad = [&](const std::string& why) {
    return Error(ErrorCode::Validation, "frame CSV line " + std::to_string(lineno) + ": " + why);
  };
  while (std::getline(in, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty() || (lineno == 1 && line.rfind("timestamp_ns", 0) == 0)) continue;
    std::vector<std::string> cells;
    std::stringstream ss(line);
    for (std::string c; std::getline(ss, c, ',');) cells.push_back(c);
    if (cells.size() != 14) throw bad("expected 14 columns, got " + std::to_string(cells.size()));
    Frame f;
    const auto [ptr, ec] = std::from_chars(cells[0].data(), cells[0].data() + cells[0].size(), f.timestamp_ns);
    if (ec != std::errc() || ptr != cells[0].data() + cells[0].size()) throw bad("bad timestamp '" + cells[0] + "'");
    f.meter_id = cells[1];
    if (f.meter_id.empty() || f.meter_id.find('/') != std::string::npos) throw bad("bad meter id");
    double v[12];
    for (int k = 0; k < 12; ++k) {
      char* end = nullptr;
      v[k] = std::strtod(cells[2 + k].c_str(), &end);
      if (cells[2 + k].empty() || *end != '\0' || !std::isfinite(v[k])) throw bad("bad number '" + cells[2 + k] + "'");
    }
    try {
      for (std::size_t p = 0; p < 3; ++p) {
        f.voltage[p] = Phasor(v[2 * p], deg_to_rad(v[2 * p + 1]));
        f.current[p] = Phasor(v[6 + 2 * p], deg_to_rad(v[7 + 2 * p]));
      }
    } catch (const Error& e) {
      throw bad(e.what());
    }
    out[f.meter_id].push_back(f);
  }
  return out;
}

// ---------------------------------------------------------------- simulate

Telemetry simulate(const Scenario& sc, bool keep_truth) {
  const Profiles pr = profiles_of(sc);
  NoiseModel noise = sc.noise;
  noise.seed = sc.seed;
  TelemetryOptions opt;
  opt.report_rate = sc.report_rate;
  opt.keep_truth = keep_truth;
  Telemetry t = simulate_telemetry(sc.model, pr.loads, pr.source, noise, sc.events, sc.duration_s, opt);
  for (std::size_t i = 0; i < t.meter_ids.size(); ++i) {
    auto it = sc.phase_labels.find(t.meter_ids[i]);
    if (it == sc.phase_labels.end()) continue;
    for (auto* streams : {&t.frames, &t.truth}) {
      if (streams->size() <= i) continue;
      for (Frame& f : (*streams)[i]) {
        f.voltage = relabel(f.voltage, it->second);
        f.current = relabel(f.current, it->second);
      }
    }
  }
  for (std::size_t i = 0; i < t.meter_ids.size(); ++i) {
    auto it = sc.ratio_errors.find(t.meter_ids[i]);
    if (it == sc.ratio_errors.end()) continue;
    const auto [pt, ct] = it->second;
    for (Frame& f : t.frames[i]) {
      for (std::size_t p = 0; p < 3; ++p) {
        f.voltage[p] = Phasor(f.voltage[p].magnitude() * (1.0 + pt), f.voltage[p].angle());
        f.current[p] = Phasor(f.current[p].magnitude() * (1.0 + ct), f.current[p].angle());
      }
    }
  }
  return t;
}

// ---------------------------------------------------------------- diagnostics

json run_diagnostic(const Scenario& sc, const DiagnosticRequest& req, const DiagnosticInputs& inputs) {
  json out{{"id", req.id}, {"kind", req.kind}};
  try {
    const Runner runner(sc, inputs);
    out["result"] = std::visit(runner, req.params);
    out["status"] = "ok";
  } catch (const Error& e) {
    out["status"] = "error";
    out["error_code"] = std::string(to_string(e.code()));
    out["error"] = e.what();
    if (!e.details().empty()) out["error_details"] = e.details();
  }
  return out;
}

std::string report_text(const json& report) {
  std::string out = report.value("kind", "report") + " " + report.value("id", "") + ": " + report.value("status", "?") + "\n";
  flatten(report, "", out);
  return out;
}

// ---------------------------------------------------------------- runs

bool RunManifest::ok() const { return !failed_stage(); }

std::optional<std::string> RunManifest::failed_stage() const {
  if (!doc.contains("failed_stage") || doc["failed_stage"].is_null()) return std::nullopt;
  return doc["failed_stage"].get<std::string>();
}

RunManifest run_scenario(const Scenario& scenario_in, const RunOptions& options) {
  Scenario sc = scenario_in;
  if (options.seed) sc.seed = *options.seed;
  const std::filesystem::path out_dir = options.out_dir.empty() ? std::filesystem::path(sc.output_dir) : options.out_dir;
  std::filesystem::create_directories(out_dir / "reports");
  const std::filesystem::path store_dir = options.store_dir.value_or(out_dir / "store");

  RunManifest m;
  json& doc = m.doc;
  doc = {{"schema_version", kSchemaVersion}, {"tool_version", kToolVersion}, {"scenario", sc.name},
         {"scenario_sha256", sc.digest},     {"seed", sc.seed},               {"run_started_utc", utc_now()},
         {"store", options.store_dir ? store_dir.string() : std::string("store")},
         {"stages", json::array()},          {"streams", json::array()},      {"distillers", json::array()},
         {"reports", json::array()},         {"failed_stage", nullptr}};

  auto stage = [&](const std::string& name, auto&& body) {
    if (!doc["failed_stage"].is_null()) return;
    json st{{"name", name}, {"status", "ok"}};
    try {
      body(st);
    } catch (const std::exception& e) {
      st["status"] = "error";
      st["error"] = e.what();
      if (const auto* ue = dynamic_cast<const Error*>(&e)) st["error_code"] = std::string(to_string(ue->code()));
    }
    if (st["status"] != "ok") doc["failed_stage"] = name;
    doc["stages"].push_back(st);
  };

  std::optional<Telemetry> tel;
  std::optional<store::Store> store;
  stage("simulate", [&](json& st) {
    tel = simulate(sc, true);
    std::size_t frames = 0, gaps = 0;
    for (const auto& fs : tel->frames)
      for (const Frame& f : fs) ++(f.gap ? gaps : frames);
    st["frames"] = frames;
    st["gap_frames"] = gaps;
  });
  stage("store", [&](json& st) {
    store = store::Store::open(store_dir);
    std::size_t points = 0;
    for (const auto& fs : tel->frames) {
      const std::size_t good = static_cast<std::size_t>(std::count_if(fs.begin(), fs.end(), [](const Frame& f) { return !f.gap; }));
      for (const auto& [key, version] : ingest_frames(*store, fs)) {
        doc["streams"].push_back({{"stream", key.str()}, {"version", version}, {"points", good}});
        points += good;
      }
    }
    st["points"] = points;
  });
  stage("distill", [&](json& st) {
    distill::Pipeline pipe(*store);
    std::set<std::string> have;
    for (const auto& d : pipe.distillers()) have.insert(d.name);
    for (const auto& d : sc.distillers)
      if (!have.count(d.name)) pipe.register_distiller(d);
    std::size_t failed = 0;
    for (const auto& mat : pipe.propagate()) {
      json ranges = json::array();
      for (const auto& r : mat.failed) ranges.push_back({r.start, r.end});
      failed += mat.failed.size();
      doc["distillers"].push_back({{"name", mat.distiller},
                                   {"output_version", mat.output_version ? json(*mat.output_version) : json(nullptr)},
                                   {"recomputed_ranges", mat.recomputed.size()},
                                   {"unmatched_rows", mat.unmatched_rows},
                                   {"failed_ranges", ranges}});
    }
    if (failed) {
      st["status"] = "error";
      st["error"] = std::to_string(failed) + " chunk range(s) failed";
    }
  });
  stage("diagnostics", [&](json& st) {
    const DiagnosticInputs in{&*store, &*tel};
    std::size_t failed = 0;
    std::string summary;
    for (const auto& req : sc.diagnostics) {
      const json rep = run_diagnostic(sc, req, in);
      const std::string base = "reports/" + req.id;
      write_file(out_dir / (base + ".json"), rep.dump(2) + "\n");
      write_file(out_dir / (base + ".txt"), report_text(rep));
      doc["reports"].push_back(
          {{"id", req.id}, {"kind", req.kind}, {"status", rep["status"]}, {"json", base + ".json"}, {"text", base + ".txt"}});
      summary += req.id + " " + rep["status"].get<std::string>() + "\n";
      failed += rep["status"] != "ok";
    }
    write_file(out_dir / "reports" / "summary.txt", summary);
    if (failed) {
      st["status"] = "error";
      st["error"] = std::to_string(failed) + " diagnostic(s) failed";
    }
  });
  write_file(out_dir / "manifest.json", doc.dump(2) + "\n");
  return m;
}

// ---------------------------------------------------------------- plots

void export_plot(const store::Store& store, const store::StreamKey& stream, std::int64_t t0, std::int64_t t1,
                 std::optional<int> pointwidth, std::ostream& out) {
  if (!store.contains(stream)) throw Error(ErrorCode::NotFound, "no stream " + stream.str());
  out << "window_start_ns,min,max,mean,count\n";
  if (t0 >= t1) return;
  if (!pointwidth) {
    for (const auto& p : store.query_raw(stream, t0, t1)) {
      const std::string v = num(p.value);
      out << p.time << ',' << v << ',' << v << ',' << v << ",1\n";
    }
    return;
  }
  for (const auto& w : store.query_windows(stream, t0, t1, *pointwidth)) {
    out << w.window_start << ',';
    if (w.empty()) {
      out << ",,,0\n";
    } else {
      out << num(w.min) << ',' << num(w.max) << ',' << num(w.mean) << ',' << w.count << '\n';
    }
  }
}

std::string sha256_hex(std::string_view text) {
  unsigned char md[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  if (EVP_Digest(text.data(), text.size(), md, &len, EVP_sha256(), nullptr) != 1) {
    throw Error(ErrorCode::InvalidArgument, "sha256 failed");
  }
  static const char* hex = "0123456789abcdef";
  std::string out;
  for (unsigned int i = 0; i < len; ++i) {
    out += hex[md[i] >> 4];
    out += hex[md[i] & 15];
  }
  return out;
}

}  // namespace upmu::scenario
