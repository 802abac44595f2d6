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
#include <cmath>
#include <fstream>
#include <limits>
#include <set>
#include <sstream>

#include "upmu/error.hpp"
#include "upmu/scenario.hpp"

namespace upmu::scenario {

namespace {

constexpr double kInf = std::numeric_limits<double>::infinity();

struct Problems {
  std::vector<std::string> list;
  void add(const std::string& path, const std::string& msg) { list.push_back((path.empty() ? "/" : path) + ": " + msg); }
};

/// Typed access to one JSON object. Keys that are never read are reported
/// by finish() so misspellings do not pass silently.
class Obj {
 public:
  Obj(const json& j, std::string path, Problems& p) : j_(j), path_(std::move(path)), p_(p) {
    if (!j.is_object()) {
      p_.add(path_, "expected an object");
      ok_ = false;
    }
  }

  std::string at(std::string_view key) const { return path_ + "/" + std::string(key); }
  bool ok() const { return ok_; }
  bool has(const char* key) const { return ok_ && j_.contains(key) && !j_.at(key).is_null(); }

  const json* get(const char* key, bool required) {
    seen_.insert(key);
    if (!has(key)) {
      if (required && ok_) p_.add(at(key), "required");
      return nullptr;
    }
    return &j_.at(key);
  }

  double number(const char* key, std::optional<double> fallback, double lo = -kInf, double hi = kInf,
                bool open_lo = false) {
    const json* v = get(key, !fallback);
    if (!v) return fallback.value_or(0.0);
    return check_number(*v, at(key), lo, hi, open_lo).value_or(fallback.value_or(0.0));
  }

  std::optional<double> maybe_number(const char* key, double lo = -kInf, double hi = kInf, bool open_lo = false) {
    const json* v = get(key, false);
    if (!v) return std::nullopt;
    return check_number(*v, at(key), lo, hi, open_lo);
  }

  std::string string(const char* key, std::optional<std::string> fallback) {
    const json* v = get(key, !fallback);
    if (!v) return fallback.value_or("");
    if (!v->is_string()) {
      p_.add(at(key), "expected a string");
      return fallback.value_or("");
    }
    return v->get<std::string>();
  }

  bool boolean(const char* key, bool fallback) {
    const json* v = get(key, false);
    if (!v) return fallback;
    if (!v->is_boolean()) {
      p_.add(at(key), "expected true or false");
      return fallback;
    }
    return v->get<bool>();
  }

  const json* array(const char* key, bool required) {
    const json* v = get(key, required);
    if (v && !v->is_array()) {
      p_.add(at(key), "expected an array");
      return nullptr;
    }
    return v;
  }

  std::optional<double> check_number(const json& v, const std::string& path, double lo, double hi, bool open_lo) {
    if (!v.is_number()) {
      p_.add(path, "expected a number");
      return std::nullopt;
    }
    const double x = v.get<double>();
    if (!std::isfinite(x) || x < lo || x > hi || (open_lo && x == lo)) {
      std::ostringstream os;
      os << "value " << x << " out of range " << (open_lo ? "(" : "[") << lo << ", " << hi << "]";
      p_.add(path, os.str());
      return std::nullopt;
    }
    return x;
  }

  void finish() {
    if (!ok_) return;
    for (const auto& [k, v] : j_.items()) {
      if (!seen_.count(k)) p_.add(at(k), "unknown key");
    }
  }

 private:
  const json& j_;
  std::string path_;
  Problems& p_;
  std::set<std::string> seen_;
  bool ok_ = true;
};

std::optional<Complex> complex_of(const json& v, const std::string& path, Problems& p) {
  if (!v.is_array() || v.size() != 2 || !v[0].is_number() || !v[1].is_number()) {
    p.add(path, "expected [real, imag]");
    return std::nullopt;
  }
  return Complex(v[0].get<double>(), v[1].get<double>());
}

std::optional<Vector3c> vector_of(const json& v, const std::string& path, Problems& p) {
  if (!v.is_array() || v.size() != 3) {
    p.add(path, "expected three [real, imag] pairs");
    return std::nullopt;
  }
  Vector3c out;
  for (int i = 0; i < 3; ++i) {
    auto c = complex_of(v[i], path + "/" + std::to_string(i), p);
    if (!c) return std::nullopt;
    out[i] = *c;
  }
  return out;
}

std::optional<std::array<double, 3>> triple_of(const json& v, const std::string& path, Problems& p) {
  if (!v.is_array() || v.size() != 3 || !std::all_of(v.begin(), v.end(), [](const json& x) { return x.is_number(); })) {
    p.add(path, "expected three numbers");
    return std::nullopt;
  }
  return std::array<double, 3>{v[0].get<double>(), v[1].get<double>(), v[2].get<double>()};
}

int phase_of(const json& v) {
  if (!v.is_string()) return -1;
  const std::string s = v.get<std::string>();
  if (s == "a" || s == "A") return 0;
  if (s == "b" || s == "B") return 1;
  if (s == "c" || s == "C") return 2;
  return -1;
}

std::vector<std::string> strings_of(Obj& o, const char* key, bool required, Problems& p) {
  std::vector<std::string> out;
  const json* a = o.array(key, required);
  if (!a) return out;
  for (std::size_t i = 0; i < a->size(); ++i) {
    if (!(*a)[i].is_string()) {
      p.add(o.at(key) + "/" + std::to_string(i), "expected a string");
      continue;
    }
    out.push_back((*a)[i].get<std::string>());
  }
  return out;
}

// ---------------------------------------------------------------- model

FeederModel parse_model(const json& j, Problems& p, std::map<std::string, std::array<double, 2>>& ratio_errors) {
  FeederModel m;
  const std::size_t before = p.list.size();
  Obj o(j, "/model", p);
  if (!o.ok()) return m;
  m.va_base = o.number("va_base", 1.0e6, 0.0, kInf, true);
  m.frequency_hz = o.number("frequency_hz", 60.0, 0.0, kInf, true);
  m.v_min_pu = o.number("v_min_pu", 0.7, 0.0, 1.0);

  if (const json* s = o.get("source", true)) {
    Obj so(*s, o.at("source"), p);
    m.source.bus = so.string("bus", std::nullopt);
    const double v = so.number("voltage_ln", std::nullopt, 0.0, kInf, true);
    const double ang = so.number("angle_deg", 0.0, -360.0, 360.0);
    m.source.voltage = balanced_voltage(v, deg_to_rad(ang));
    so.finish();
  }
  m.buses = strings_of(o, "buses", true, p);

  if (const json* bs = o.array("branches", true)) {
    for (std::size_t i = 0; i < bs->size(); ++i) {
      Obj b((*bs)[i], o.at("branches") + "/" + std::to_string(i), p);
      if (!b.ok()) continue;
      Branch br;
      br.id = b.string("id", std::nullopt);
      br.from = b.string("from", std::nullopt);
      br.to = b.string("to", std::nullopt);
      const std::string type = b.string("type", std::nullopt);
      if (type == "line") {
        Matrix3c z = Matrix3c::Zero();
        if (const json* zj = b.get("z_ohm", true)) {
          if (!zj->is_array() || zj->size() != 3) {
            p.add(b.at("z_ohm"), "expected a 3x3 matrix of [real, imag]");
          } else {
            for (int r = 0; r < 3; ++r) {
              if (auto row = vector_of((*zj)[r], b.at("z_ohm") + "/" + std::to_string(r), p)) z.row(r) = row->transpose();
            }
          }
        }
        z *= b.number("length_km", 1.0, 0.0, kInf, true);
        if (!is_symmetric(z)) p.add(b.at("z_ohm"), "line impedance must be symmetric");
        br.kind = LineBranch{z};
      } else if (type == "transformer") {
        TransformerBranch t;
        t.n_t = b.number("n_t", std::nullopt, 0.0, kInf, true);
        t.z_abc = Matrix3c::Zero();
        if (const json* zj = b.get("z_ohm", true)) {
          if (auto d = vector_of(*zj, b.at("z_ohm"), p)) t.z_abc.diagonal() = *d;
        }
        br.kind = t;
      } else if (type == "switch") {
        const std::string st = b.string("status", "closed");
        if (st != "open" && st != "closed") p.add(b.at("status"), "expected \"open\" or \"closed\"");
        br.kind = SwitchBranch{st == "open" ? SwitchStatus::Open : SwitchStatus::Closed};
      } else if (!type.empty()) {
        p.add(b.at("type"), "expected line, transformer or switch, got '" + type + "'");
      }
      b.finish();
      m.branches.push_back(std::move(br));
    }
  }

  if (const json* ls = o.array("loads", false)) {
    for (std::size_t i = 0; i < ls->size(); ++i) {
      Obj l((*ls)[i], o.at("loads") + "/" + std::to_string(i), p);
      if (!l.ok()) continue;
      Load load;
      load.bus = l.string("bus", std::nullopt);
      const std::string model = l.string("model", "constant_power");
      if (model == "constant_power") {
        load.model = LoadModel::ConstantPower;
      } else if (model == "constant_current") {
        load.model = LoadModel::ConstantCurrent;
      } else if (model == "constant_impedance") {
        load.model = LoadModel::ConstantImpedance;
      } else {
        p.add(l.at("model"), "unknown load model '" + model + "'");
      }
      if (const json* v = l.get("value", true)) {
        if (auto x = vector_of(*v, l.at("value"), p)) load.value = *x;
      }
      l.finish();
      m.loads.push_back(load);
    }
  }

  if (const json* ms = o.array("meters", true)) {
    for (std::size_t i = 0; i < ms->size(); ++i) {
      Obj mo((*ms)[i], o.at("meters") + "/" + std::to_string(i), p);
      if (!mo.ok()) continue;
      Meter mt;
      mt.id = mo.string("id", std::nullopt);
      mt.bus = mo.string("bus", std::nullopt);
      mt.branch = mo.string("branch", "");
      if (mt.id.find('/') != std::string::npos) p.add(mo.at("id"), "meter ids may not contain '/'");
      mo.get("phase_labels", false);  // read by the caller
      const auto pt = mo.maybe_number("pt_ratio_error", -0.5, 0.5);
      const auto ct = mo.maybe_number("ct_ratio_error", -0.5, 0.5);
      if (pt || ct) ratio_errors[mt.id] = {pt.value_or(0.0), ct.value_or(0.0)};
      mo.finish();
      m.meters.push_back(mt);
    }
  }
  o.finish();
  if (p.list.size() == before) {
    try {
      m.validate();
    } catch (const Error& e) {
      p.add("/model", e.what());
    }
  }
  return m;
}

std::optional<ProfileSpec> parse_profile(const json& j, const std::string& path, double duration, Problems& p) {
  Obj o(j, path, p);
  if (!o.ok()) return std::nullopt;
  ProfileSpec s;
  s.kind = o.string("kind", std::nullopt);
  if (s.kind == "random_walk") {
    s.step_s = o.number("step_s", 0.05, 0.0, kInf, true);
    s.sigma = o.number("sigma", 0.02, 0.0);
    s.rho = o.number("rho", 0.98, 0.0, 1.0);
    s.until_s = o.maybe_number("until_s", 0.0, duration);
    if (auto seed = o.maybe_number("seed", 0.0, 9.0e15)) s.seed = static_cast<std::uint64_t>(*seed);
  } else if (s.kind == "constant") {
    if (const json* v = o.get("scale", true)) {
      if (auto t = triple_of(*v, o.at("scale"), p)) s.table = LoadProfile::constant(*t);
    }
  } else if (s.kind == "table") {
    const json* ts = o.array("times_s", true);
    const json* ss = o.array("scales", true);
    if (ts && ss) {
      if (ts->size() != ss->size() || ts->empty()) p.add(path, "times_s and scales must be non-empty and equally long");
      for (std::size_t i = 0; i < std::min(ts->size(), ss->size()); ++i) {
        const auto t = o.check_number((*ts)[i], o.at("times_s") + "/" + std::to_string(i), 0.0, duration + 1.0, false);
        const auto sc = triple_of((*ss)[i], o.at("scales") + "/" + std::to_string(i), p);
        if (!t || !sc) continue;
        if (!s.table.times_s.empty() && *t <= s.table.times_s.back()) {
          p.add(o.at("times_s") + "/" + std::to_string(i), "times must increase");
        }
        s.table.times_s.push_back(*t);
        s.table.scales.push_back(*sc);
      }
    }
  } else if (!s.kind.empty()) {
    p.add(o.at("kind"), "expected random_walk, constant or table");
  }
  o.finish();
  return s;
}

// ---------------------------------------------------------------- events

void parse_events(const json& j, Scenario& sc, Problems& p) {
  if (!j.is_array()) {
    p.add("/events", "expected an array");
    return;
  }
  for (std::size_t i = 0; i < j.size(); ++i) {
    const std::string path = "/events/" + std::to_string(i);
    Obj o(j[i], path, p);
    if (!o.ok()) continue;
    Event ev;
    ev.time_s = o.number("time_s", std::nullopt, 0.0);
    const std::string type = o.string("type", std::nullopt);
    if (type == "switch_toggle") {
      ev.action = SwitchToggle{o.string("branch", std::nullopt)};
    } else if (type == "load_step") {
      ev.action = LoadStep{o.string("bus", std::nullopt), o.number("scale", std::nullopt, 0.0)};
    } else if (type == "fault") {
      BoltedFault f;
      f.branch = o.string("branch", std::nullopt);
      f.distance_fraction = o.number("distance_fraction", 0.5, 0.0, 1.0);
      f.duration_s = o.number("duration_s", 0.1, 0.0, kInf, true);
      f.impedance_ohm = o.number("impedance_ohm", 1e-3, 0.0, kInf, true);
      if (const json* ph = o.array("phases", false)) {
        f.phases = {false, false, false};
        for (std::size_t k = 0; k < ph->size(); ++k) {
          const int x = phase_of((*ph)[k]);
          if (x < 0) {
            p.add(o.at("phases") + "/" + std::to_string(k), "expected \"a\", \"b\" or \"c\"");
          } else {
            f.phases[static_cast<std::size_t>(x)] = true;
          }
        }
      }
      ev.action = f;
    } else if (type == "voltage_sag") {
      ev.action = VoltageSag{o.string("source", sc.model.source.bus), o.number("depth", 0.1, 0.0, 1.0, true),
                             o.number("duration_s", 0.1, 0.0, kInf, true)};
    } else if (type == "oscillation") {
      ev.action = Oscillation{o.string("source", sc.model.source.bus), o.number("amplitude", 0.01, 0.0, 1.0),
                              o.number("frequency_hz", 1.0, 0.0, kInf, true), o.number("duration_s", kInf, 0.0, kInf, true)};
    } else if (!type.empty()) {
      p.add(o.at("type"), "unknown event type '" + type + "'");
    }
    o.finish();
    sc.events.events.push_back(ev);
  }
}

// ---------------------------------------------------------------- diagnostics

struct RefCheck {
  const Scenario& sc;
  Problems& p;
  std::set<std::string> outputs;

  void meter(const std::string& id, const std::string& path) const {
    if (id.empty()) return;
    const bool known = std::any_of(sc.model.meters.begin(), sc.model.meters.end(), [&](const Meter& m) { return m.id == id; });
    if (!known) p.add(path, "no meter '" + id + "'");
  }
  void stream(const store::StreamKey& k, const std::string& path) const {
    if (outputs.count(k.str())) return;
    const auto& ch = frame_channels();
    meter(k.meter, path);
    if (std::find(ch.begin(), ch.end(), k.channel) == ch.end()) {
      p.add(path, "'" + k.channel + "' is neither a frame channel nor a distiller output");
    }
  }
};

Window parse_window(Obj& o, const char* key, const Scenario& sc, Problems& p, bool required = false) {
  Window w{0.0, sc.duration_s};
  const json* a = o.get(key, required);
  if (!a) return w;
  if (!a->is_array() || a->size() != 2 || !(*a)[0].is_number() || !(*a)[1].is_number()) {
    p.add(o.at(key), "expected [t0, t1] in seconds");
    return w;
  }
  w = {(*a)[0].get<double>(), (*a)[1].get<double>()};
  if (!(w.t0 >= 0.0 && w.t0 < w.t1 && w.t1 <= sc.duration_s + 1e-9)) {
    p.add(o.at(key), "window must satisfy 0 <= t0 < t1 <= duration_s");
  }
  return w;
}

std::optional<std::size_t> count_of(Obj& o, const char* key, double fallback, double lo, double hi) {
  const double v = o.number(key, fallback, lo, hi);
  if (v != std::floor(v)) {
    return std::nullopt;
  }
  return static_cast<std::size_t>(v);
}

DiagnosticRequest parse_diagnostic(const json& j, std::size_t index, const RefCheck& refs, Problems& p) {
  const std::string path = "/diagnostics/" + std::to_string(index);
  Obj o(j, path, p);
  DiagnosticRequest r;
  if (!o.ok()) return r;
  const Scenario& sc = refs.sc;
  r.kind = o.string("kind", std::nullopt);
  r.id = o.string("id", std::to_string(index) + "-" + r.kind);
  if (r.id.find('/') != std::string::npos) p.add(o.at("id"), "ids may not contain '/'");

  if (r.kind == "phase_id") {
    PhaseIdRequest q;
    q.reference = o.string("reference", std::nullopt);
    refs.meter(q.reference, o.at("reference"));
    q.meters = strings_of(o, "meters", true, p);
    for (std::size_t i = 0; i < q.meters.size(); ++i) refs.meter(q.meters[i], o.at("meters") + "/" + std::to_string(i));
    q.window = parse_window(o, "window_s", sc, p);
    r.params = q;
  } else if (r.kind == "topology") {
    TopologyRequest q;
    const auto n_switch = switch_ids(sc.model).size();
    if (const json* hs = o.array("hypotheses", true)) {
      for (std::size_t i = 0; i < hs->size(); ++i) {
        Obj h((*hs)[i], o.at("hypotheses") + "/" + std::to_string(i), p);
        if (!h.ok()) continue;
        diag::TopologyHypothesis th;
        th.id = h.string("id", std::nullopt);
        if (const json* c = h.array("closed", true)) {
          for (const auto& x : *c) th.closed.push_back(x.is_boolean() && x.get<bool>());
          if (c->size() != n_switch || !std::all_of(c->begin(), c->end(), [](const json& x) { return x.is_boolean(); })) {
            p.add(h.at("closed"), "expected " + std::to_string(n_switch) + " booleans, one per switch in model order");
          }
        }
        h.finish();
        q.hypotheses.push_back(th);
      }
      if (hs->empty()) p.add(o.at("hypotheses"), "at least one hypothesis");
    }
    q.window = parse_window(o, "window_s", sc, p);
    const std::string metric = o.string("metric", "complex");
    if (metric == "angle") {
      q.metric = diag::ResidualMetric::Angle;
    } else if (metric == "magnitude") {
      q.metric = diag::ResidualMetric::Magnitude;
    } else if (metric != "complex") {
      p.add(o.at("metric"), "expected complex, angle or magnitude");
    }
    q.meters = strings_of(o, "meters", false, p);
    for (std::size_t i = 0; i < q.meters.size(); ++i) refs.meter(q.meters[i], o.at("meters") + "/" + std::to_string(i));
    r.params = q;
  } else if (r.kind == "impedance") {
    ImpedanceRequest q;
    q.branch = o.string("branch", std::nullopt);
    q.end1 = o.string("end1", std::nullopt);
    q.end2 = o.string("end2", std::nullopt);
    refs.meter(q.end1, o.at("end1"));
    refs.meter(q.end2, o.at("end2"));
    if (!q.branch.empty()) {
      const auto bi = sc.model.branch_index(q.branch);
      if (!bi || sc.model.branches[*bi].is_switch()) p.add(o.at("branch"), "no line or transformer '" + q.branch + "'");
    }
    q.window = parse_window(o, "window_s", sc, p);
    q.max_condition = o.number("max_condition", 1e3, 1.0);
    r.params = q;
  } else if (r.kind == "state_estimation") {
    StateEstimationRequest q;
    q.at_s = o.number("at_s", std::nullopt, 0.0, sc.duration_s);
    q.meters = strings_of(o, "meters", true, p);
    for (std::size_t i = 0; i < q.meters.size(); ++i) refs.meter(q.meters[i], o.at("meters") + "/" + std::to_string(i));
    q.load_sigma_fraction = o.number("load_sigma_fraction", 0.2, 0.0, kInf, true);
    r.params = q;
  } else if (r.kind == "kpca") {
    KpcaRequest q;
    q.meters = strings_of(o, "meters", true, p);
    for (std::size_t i = 0; i < q.meters.size(); ++i) refs.meter(q.meters[i], o.at("meters") + "/" + std::to_string(i));
    q.train = parse_window(o, "train_s", sc, p, true);
    q.test = parse_window(o, "test_s", sc, p, true);
    if (auto n = count_of(o, "window_frames", 10, 1, 1e4)) {
      q.window_frames = *n;
    } else {
      p.add(o.at("window_frames"), "expected an integer");
    }
    q.options.threshold_quantile = o.number("threshold_quantile", q.options.threshold_quantile, 0.0, 1.0);
    q.options.n_components = static_cast<int>(o.number("n_components", q.options.n_components, 1, 1e4));
    const std::string kernel = o.string("kernel", "gaussian");
    if (kernel == "linear") {
      q.options.kernel = diag::KernelType::Linear;
    } else if (kernel != "gaussian") {
      p.add(o.at("kernel"), "expected gaussian or linear");
    }
    r.params = q;
  } else if (r.kind == "fault_location") {
    FaultRequest q;
    q.prefault = parse_window(o, "prefault_s", sc, p, true);
    q.during = parse_window(o, "during_s", sc, p, true);
    q.options.substation_meter = o.string("substation_meter", "");
    refs.meter(q.options.substation_meter, o.at("substation_meter"));
    q.options.grid_step = o.number("grid_step", q.options.grid_step, 1e-4, 0.5);
    q.meters = strings_of(o, "meters", false, p);
    for (std::size_t i = 0; i < q.meters.size(); ++i) refs.meter(q.meters[i], o.at("meters") + "/" + std::to_string(i));
    r.params = q;
  } else if (r.kind == "reverse_flow") {
    ReverseFlowRequest q;
    q.meter = o.string("meter", std::nullopt);
    refs.meter(q.meter, o.at("meter"));
    q.window = parse_window(o, "window_s", sc, p);
    q.deadband_pu = o.number("deadband_pu", 1e-4, 0.0);
    r.params = q;
  } else if (r.kind == "change_points") {
    ChangePointRequest q;
    const std::string s = o.string("stream", std::nullopt);
    if (!s.empty()) {
      try {
        q.stream = store::StreamKey::parse(s);
        refs.stream(q.stream, o.at("stream"));
      } catch (const Error& e) {
        p.add(o.at("stream"), e.what());
      }
    }
    q.window = parse_window(o, "window_s", sc, p);
    q.options.drift = o.number("drift", q.options.drift, 0.0);
    q.options.threshold = o.number("threshold", q.options.threshold, 0.0, kInf, true);
    r.params = q;
  } else if (r.kind == "requirements") {
    RequirementsRequest q;
    q.use_case = o.string("use_case", std::nullopt);
    if (!q.use_case.empty()) {
      try {
        diag::check_requirements({}, q.use_case);
      } catch (const Error& e) {
        p.add(o.at("use_case"), e.what());
      }
    }
    q.tve_percent = o.maybe_number("tve_percent", 0.0);
    q.latency_s = o.maybe_number("latency_s", 0.0);
    q.report_rate_hz = o.maybe_number("report_rate_hz", 0.0, kInf, true);
    q.tve_meter = o.string("tve_meter", "");
    refs.meter(q.tve_meter, o.at("tve_meter"));
    if (!q.tve_meter.empty() && q.tve_percent) p.add(o.at("tve_meter"), "give tve_percent or tve_meter, not both");
    q.window = parse_window(o, "window_s", sc, p);
    q.tve_quantile = o.number("tve_quantile", 1.0, 0.0, 1.0);
    r.params = q;
  } else if (!r.kind.empty()) {
    std::string known;
    for (const auto& k : diagnostic_kinds()) known += (known.empty() ? "" : ", ") + k;
    p.add(o.at("kind"), "unknown diagnostic '" + r.kind + "' (known: " + known + ")");
  }
  o.finish();
  return r;
}

}  // namespace

const std::vector<std::string>& diagnostic_kinds() {
  static const std::vector<std::string> k{"phase_id",       "topology",     "impedance",    "state_estimation", "kpca",
                                          "fault_location", "reverse_flow", "change_points", "requirements"};
  return k;
}

Scenario parse_scenario(const json& doc) {
  Problems p;
  Scenario sc;
  Obj o(doc, "", p);
  if (!o.ok()) throw Error(ErrorCode::Validation, "scenario is not a JSON object", p.list);

  const auto version = o.maybe_number("schema_version", 0);
  if (!o.has("schema_version")) {
    p.add("/schema_version", "required");
  } else if (version && *version != kSchemaVersion) {
    p.add("/schema_version", "unsupported version " + std::to_string(static_cast<long long>(*version)) + ", expected " +
                                 std::to_string(kSchemaVersion));
    throw Error(ErrorCode::Validation, "scenario failed validation", p.list);
  }
  sc.name = o.string("name", "scenario");
  sc.seed = static_cast<std::uint64_t>(o.number("seed", 0.0, 0.0, 9.0e15));
  sc.duration_s = o.number("duration_s", std::nullopt, 0.0, 86400.0, true);
  sc.report_rate = o.number("report_rate", kNominalReportRate, 0.0, 1e4, true);
  sc.output_dir = o.string("output_dir", "out");
  const std::size_t before_model = p.list.size();
  if (const json* m = o.get("model", true)) sc.model = parse_model(*m, p, sc.ratio_errors);
  const bool model_ok = p.list.size() == before_model;

  // Meter relabeling sits with the meter definitions.
  if (model_ok) {
    const json& meters = doc.at("model").at("meters");
    for (std::size_t i = 0; i < meters.size(); ++i) {
      if (!meters[i].contains("phase_labels")) continue;
      const std::string path = "/model/meters/" + std::to_string(i) + "/phase_labels";
      const json& pl = meters[i].at("phase_labels");
      std::array<int, 3> perm{-1, -1, -1};
      bool good = pl.is_array() && pl.size() == 3;
      for (std::size_t k = 0; good && k < 3; ++k) perm[k] = phase_of(pl[k]);
      std::array<int, 3> sorted = perm;
      std::sort(sorted.begin(), sorted.end());
      if (!good || sorted != std::array<int, 3>{0, 1, 2}) {
        p.add(path, "expected a permutation of [\"a\", \"b\", \"c\"]");
      } else {
        sc.phase_labels[sc.model.meters[i].id] = perm;
      }
    }
  }

  if (const json* lp = o.get("load_profiles", false)) {
    if (!lp->is_object()) p.add("/load_profiles", "expected an object keyed by bus");
    const json& items = lp->is_object() ? *lp : json::object();
    for (const auto& [bus, spec] : items.items()) {
      const std::string path = "/load_profiles/" + bus;
      if (model_ok && !sc.model.bus_index(bus)) p.add(path, "no bus '" + bus + "'");
      if (auto s = parse_profile(spec, path, sc.duration_s, p)) sc.load_profiles[bus] = *s;
    }
  }
  if (const json* sp = o.get("source_profile", false)) sc.source_profile = parse_profile(*sp, "/source_profile", sc.duration_s, p);

  if (const json* n = o.get("noise", false)) {
    if (n->is_string() && n->get<std::string>() == "none") {
      sc.noise = NoiseModel::none();
    } else {
      Obj no(*n, "/noise", p);
      sc.noise.angle_sigma = deg_to_rad(no.number("angle_sigma_deg", 0.01, 0.0));
      sc.noise.magnitude_sigma_pu = no.number("magnitude_sigma_pu", 1.7e-4, 0.0);
      no.finish();
    }
  }

  if (const json* ev = o.get("events", false)) {
    if (model_ok) {
      parse_events(*ev, sc, p);
      if (p.list.empty()) {
        try {
          sc.events.validate(sc.model, sc.duration_s);
        } catch (const Error& e) {
          p.add("/events", e.what());
        }
      }
    }
  }

  RefCheck refs{sc, p, {}};
  if (const json* ds = o.array("distillers", false)) {
    for (std::size_t i = 0; i < ds->size(); ++i) {
      const std::string path = "/distillers/" + std::to_string(i);
      Obj d((*ds)[i], path, p);
      if (!d.ok()) continue;
      distill::DistillerSpec spec;
      spec.name = d.string("name", std::nullopt);
      const std::string out = d.string("output", std::nullopt);
      try {
        spec.output = store::StreamKey::parse(out);
      } catch (const Error& e) {
        p.add(d.at("output"), e.what());
      }
      for (const auto& s : strings_of(d, "inputs", true, p)) {
        try {
          spec.inputs.push_back(store::StreamKey::parse(s));
        } catch (const Error& e) {
          p.add(d.at("inputs"), e.what());
        }
      }
      spec.kernel.name = d.string("kernel", std::nullopt);
      if (const json* pr = d.get("params", false)) {
        if (!pr->is_object()) p.add(d.at("params"), "expected an object of numbers");
        const json& items = pr->is_object() ? *pr : json::object();
        for (const auto& [k, v] : items.items()) {
          if (!v.is_number()) {
            p.add(d.at("params") + "/" + k, "expected a number");
          } else {
            spec.kernel.params[k] = v.template get<double>();
          }
        }
      }
      spec.kernel_version = static_cast<std::uint64_t>(d.number("kernel_version", 1, 1, 1e9));
      try {
        (void)distill::make_kernel(spec.kernel, spec.inputs.size());
        spec.lag_ns = distill::required_lag(spec.kernel);
      } catch (const Error& e) {
        p.add(d.at("kernel"), e.what());
      }
      if (auto lag = d.maybe_number("lag_s", 0.0, 86400.0)) {
        spec.lag_ns = std::max(spec.lag_ns, static_cast<std::int64_t>(std::llround(*lag * 1e9)));
      }
      d.finish();
      for (const auto& prev : sc.distillers) {
        if (prev.name == spec.name) p.add(d.at("name"), "duplicate distiller name");
        if (prev.output == spec.output) p.add(d.at("output"), "output already written by '" + prev.name + "'");
      }
      refs.outputs.insert(spec.output.str());
      sc.distillers.push_back(spec);
    }
    if (model_ok) {
      for (std::size_t i = 0; i < sc.distillers.size(); ++i) {
        const auto& spec = sc.distillers[i];
        for (std::size_t k = 0; k < spec.inputs.size(); ++k) {
          refs.stream(spec.inputs[k], "/distillers/" + std::to_string(i) + "/inputs/" + std::to_string(k));
        }
        if (spec.output.meter.empty() || std::find(frame_channels().begin(), frame_channels().end(),
                                                   spec.output.channel) != frame_channels().end()) {
          p.add("/distillers/" + std::to_string(i) + "/output", "output may not overwrite a frame channel");
        }
      }
    }
  }

  if (const json* ds = o.array("diagnostics", false)) {
    if (model_ok) {
      std::set<std::string> ids;
      for (std::size_t i = 0; i < ds->size(); ++i) {
        auto r = parse_diagnostic((*ds)[i], i, refs, p);
        if (!ids.insert(r.id).second) p.add("/diagnostics/" + std::to_string(i) + "/id", "duplicate id '" + r.id + "'");
        sc.diagnostics.push_back(std::move(r));
      }
    }
  }
  o.finish();

  if (!p.list.empty()) {
    throw Error(ErrorCode::Validation,
                "scenario failed validation with " + std::to_string(p.list.size()) + " problem(s)", p.list);
  }
  sc.digest = sha256_hex(doc.dump());
  return sc;
}

Scenario parse_scenario_text(std::string_view text) {
  json doc;
  try {
    doc = json::parse(text);
  } catch (const json::parse_error& e) {
    throw Error(ErrorCode::Validation, "scenario is not valid JSON", {std::string("/: ") + e.what()});
  }
  return parse_scenario(doc);
}

Scenario load_scenario(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorCode::NotFound, "cannot read scenario '" + path.string() + "'");
  std::ostringstream ss;
  ss << in.rdbuf();
  return parse_scenario_text(ss.str());
}

}  // namespace upmu::scenario
