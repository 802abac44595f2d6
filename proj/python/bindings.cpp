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

#include <pybind11/complex.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

#include <sstream>

#include "upmu/diagnostics.hpp"
#include "upmu/error.hpp"
#include "upmu/phasor.hpp"
#include "upmu/scenario.hpp"
#include "upmu/store.hpp"

namespace py = pybind11;
using namespace upmu;

namespace {

py::object to_py(const nlohmann::json& j) { return py::module_::import("json").attr("loads")(j.dump()); }

store::StreamKey key_of(const std::string& s) { return store::StreamKey::parse(s); }

py::dict report_dict(const diag::ComplianceReport& r) {
  py::list crit;
  for (const auto& c : r.criteria) {
    py::dict d;
    d["name"] = c.name;
    d["pass"] = c.pass;
    d["value"] = c.value;
    d["limit"] = c.limit;
    d["margin"] = c.margin;
    crit.append(d);
  }
  py::dict out;
  out["use_case"] = r.use_case;
  out["pass"] = r.pass;
  out["criteria"] = crit;
  return out;
}

}  // namespace

PYBIND11_MODULE(_core, m) {
  m.doc() = "Micro-PMU feeder analytics";

  // Carries .code (the ErrorCode name) and .details alongside the message.
  static PyObject* error_type = [&] {
    py::exception<Error> exc(m, "UpmuError", PyExc_RuntimeError);
    return exc.inc_ref().ptr();
  }();
  py::register_exception_translator([](std::exception_ptr p) {
    try {
      if (p) std::rethrow_exception(p);
    } catch (const Error& e) {
      py::object inst = py::reinterpret_borrow<py::object>(error_type)(e.what());
      inst.attr("code") = std::string(to_string(e.code()));
      inst.attr("details") = e.details();
      PyErr_SetObject(error_type, inst.ptr());
    }
  });

  // ---------------------------------------------------------------- phasors
  py::class_<Phasor>(m, "Phasor")
      .def(py::init<double, double>(), py::arg("magnitude"), py::arg("angle"))
      .def_static("from_complex", &Phasor::from_complex)
      .def_property_readonly("magnitude", &Phasor::magnitude)
      .def_property_readonly("angle", &Phasor::angle)
      .def("to_complex", &Phasor::to_complex)
      .def("__repr__", [](const Phasor& p) {
        std::ostringstream s;
        s << "Phasor(" << p.magnitude() << ", " << p.angle() << ")";
        return s.str();
      });
  m.def("wrap_angle", &wrap_angle);
  m.def("tve", &tve, py::arg("measured"), py::arg("reference"));
  m.def("estimate_phasor", [](const std::vector<double>& w, double f) { return estimate_phasor(w, f); },
        py::arg("window"), py::arg("nominal_freq") = 60.0);
  m.def("synthesize_waveform", &synthesize_waveform, py::arg("phasor"), py::arg("samples_per_cycle"),
        py::arg("cycles") = 1);

  // ---------------------------------------------------------------- requirements
  m.def("use_cases", [] {
    py::list out;
    for (const auto& u : diag::use_case_table()) {
      py::dict d;
      d["name"] = u.name;
      d["family"] = u.family;
      d["tve_percent_max"] = u.tve_percent_max;
      d["latency_s_max"] = u.latency_s_max;
      d["report_rate_per_cycle_min"] = u.report_rate_per_cycle_min;
      out.append(d);
    }
    return out;
  });
  m.def(
      "check_requirements",
      [](const std::string& use_case, std::optional<double> tve_percent, std::optional<double> latency_s,
         std::optional<double> report_rate_hz) {
        diag::StreamStatistics st;
        st.tve_percent = tve_percent;
        st.latency_s = latency_s;
        st.report_rate_hz = report_rate_hz;
        return report_dict(diag::check_requirements(st, use_case));
      },
      py::arg("use_case"), py::kw_only(), py::arg("tve_percent") = py::none(), py::arg("latency_s") = py::none(),
      py::arg("report_rate_hz") = py::none());

  // ---------------------------------------------------------------- store
  py::class_<store::Store>(m, "Store")
      .def_static("in_memory", &store::Store::in_memory)
      .def_static("open", &store::Store::open, py::arg("directory"))
      .def(
          "insert",
          [](store::Store& s, const std::string& stream, const std::vector<std::int64_t>& times,
             const std::vector<double>& values) {
            if (times.size() != values.size()) throw Error(ErrorCode::InvalidArgument, "times and values differ in length");
            std::vector<store::Point> pts(times.size());
            for (std::size_t i = 0; i < pts.size(); ++i) pts[i] = {times[i], values[i]};
            return s.insert(key_of(stream), pts);
          },
          py::arg("stream"), py::arg("times"), py::arg("values"))
      .def(
          "query_raw",
          [](const store::Store& s, const std::string& stream, std::int64_t t0, std::int64_t t1,
             std::optional<store::Version> version) {
            std::vector<std::int64_t> t;
            std::vector<double> v;
            for (const auto& p : s.query_raw(key_of(stream), t0, t1, version)) {
              t.push_back(p.time);
              v.push_back(p.value);
            }
            return py::make_tuple(t, v);
          },
          py::arg("stream"), py::arg("t0"), py::arg("t1"), py::arg("version") = py::none())
      .def(
          "query_windows",
          [](const store::Store& s, const std::string& stream, std::int64_t t0, std::int64_t t1, int pw,
             std::optional<store::Version> version) {
            py::list out;
            for (const auto& w : s.query_windows(key_of(stream), t0, t1, pw, version)) {
              py::dict d;
              d["window_start"] = w.window_start;
              d["count"] = w.count;
              d["min"] = w.min;
              d["max"] = w.max;
              d["mean"] = w.mean;
              out.append(d);
            }
            return out;
          },
          py::arg("stream"), py::arg("t0"), py::arg("t1"), py::arg("pointwidth"), py::arg("version") = py::none())
      .def("latest_version", [](const store::Store& s, const std::string& k) { return s.latest_version(key_of(k)); })
      .def("contains", [](const store::Store& s, const std::string& k) { return s.contains(key_of(k)); })
      .def("streams", [](const store::Store& s) {
        std::vector<std::string> out;
        for (const auto& k : s.streams()) out.push_back(k.str());
        return out;
      })
      .def(
          "export_plot",
          [](const store::Store& s, const std::string& stream, std::int64_t t0, std::int64_t t1,
             std::optional<int> pw) {
            std::ostringstream out;
            scenario::export_plot(s, key_of(stream), t0, t1, pw, out);
            return out.str();
          },
          py::arg("stream"), py::arg("t0"), py::arg("t1"), py::arg("pointwidth") = py::none());

  // ---------------------------------------------------------------- scenarios
  m.def(
      "validate_scenario",
      [](const std::string& text) {
        const auto sc = scenario::parse_scenario_text(text);
        py::dict d;
        d["name"] = sc.name;
        d["seed"] = sc.seed;
        d["duration_s"] = sc.duration_s;
        d["sha256"] = sc.digest;
        std::vector<std::string> ids;
        for (const auto& q : sc.diagnostics) ids.push_back(q.id);
        d["diagnostics"] = ids;
        return d;
      },
      py::arg("text"), "Parses a scenario document; raises UpmuError with details on problems.");
  m.def(
      "run_scenario",
      [](const std::filesystem::path& path, const std::filesystem::path& out_dir,
         std::optional<std::filesystem::path> store_dir, std::optional<std::uint64_t> seed) {
        const auto sc = scenario::load_scenario(path);
        scenario::RunOptions opt{out_dir, store_dir, seed};
        scenario::RunManifest man;
        {
          py::gil_scoped_release release;
          man = scenario::run_scenario(sc, opt);
        }
        return to_py(man.doc);
      },
      py::arg("path"), py::arg("out_dir"), py::arg("store_dir") = py::none(), py::arg("seed") = py::none(),
      "Runs a scenario end to end and returns its manifest.");

  m.attr("__version__") = scenario::kToolVersion;
}
