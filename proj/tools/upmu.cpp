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

// upmu: scenario runner and operator surface over the library.
//
// Exit codes: 0 success, 1 a check ran and failed (check-reqs, a failing
// run stage or diagnostic), 2 validation or usage error, 3 not found,
// 4 any other runtime error.

#include <cstdlib>
#include <fstream>
#include <iostream>
#include <limits>
#include <optional>
#include <string>

#include <CLI11.hpp>

#include "upmu/error.hpp"
#include "upmu/scenario.hpp"

namespace sc = upmu::scenario;
using upmu::Error;
using upmu::ErrorCode;
using json = nlohmann::json;

namespace {

enum Exit { kOk = 0, kCheckFailed = 1, kValidation = 2, kNotFound = 3, kRuntime = 4 };

int exit_for(ErrorCode c) {
  switch (c) {
    case ErrorCode::Validation:
    case ErrorCode::InvalidArgument:
    case ErrorCode::InvalidPointwidth:
    case ErrorCode::UnknownUseCase:
      return kValidation;
    case ErrorCode::NotFound:
      return kNotFound;
    default:
      return kRuntime;
  }
}

struct Common {
  std::string store;
  std::string out;
  std::optional<std::uint64_t> seed;
  std::string format = "text";
};

std::filesystem::path store_dir(const Common& c) {
  if (!c.store.empty()) return c.store;
  if (const char* env = std::getenv("UPMU_STORE"); env && *env) return env;
  throw Error(ErrorCode::InvalidArgument, "no store: pass --store or set UPMU_STORE");
}

/// Writes to --out when given, else stdout.
template <class F>
void emit(const std::string& path, F&& body) {
  if (path.empty()) {
    body(std::cout);
    return;
  }
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw Error(ErrorCode::InvalidArgument, "cannot write '" + path + "'");
  body(f);
}

void print_report(const json& rep, const std::string& format) {
  if (format == "csv") {
    std::cout << "key,value\n";
    std::string text = sc::report_text(rep);
    std::istringstream in(text);
    std::string line;
    std::getline(in, line);  // title
    while (std::getline(in, line)) {
      const auto eq = line.find(" = ");
      std::string v = line.substr(eq + 3);
      if (v.find_first_of(",\"") != std::string::npos) {
        std::string q;
        for (char ch : v) q += ch == '"' ? std::string("\"\"") : std::string(1, ch);
        v = "\"" + q + "\"";
      }
      std::cout << line.substr(0, eq) << ',' << v << '\n';
    }
  } else {
    std::cout << sc::report_text(rep);
  }
}

int cmd_simulate(const std::string& path, const Common& c) {
  sc::Scenario s = sc::load_scenario(path);
  if (c.seed) s.seed = *c.seed;
  const upmu::Telemetry tel = sc::simulate(s);
  if (!c.out.empty()) {
    std::filesystem::create_directories(c.out);
    std::ofstream f(std::filesystem::path(c.out) / "frames.csv", std::ios::binary);
    sc::write_frames_csv(f, tel.frames);
  }
  if (!c.store.empty() || std::getenv("UPMU_STORE")) {
    auto st = upmu::store::Store::open(store_dir(c));
    for (const auto& fs : tel.frames) sc::ingest_frames(st, fs);
  }
  if (c.out.empty() && c.store.empty() && !std::getenv("UPMU_STORE")) sc::write_frames_csv(std::cout, tel.frames);
  return kOk;
}

int cmd_ingest(const std::vector<std::string>& files, const Common& c) {
  auto st = upmu::store::Store::open(store_dir(c));
  for (const auto& path : files) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw Error(ErrorCode::NotFound, "cannot read '" + path + "'");
    for (const auto& [meter, frames] : sc::read_frames_csv(in)) {
      const auto versions = sc::ingest_frames(st, frames);
      std::cout << meter << ": " << frames.size() << " frames, " << versions.size() << " streams at version "
                << (versions.empty() ? 0 : versions.begin()->second) << '\n';
    }
  }
  return kOk;
}

int cmd_distill(const std::string& scenario_path, const Common& c) {
  auto st = upmu::store::Store::open(store_dir(c));
  upmu::distill::Pipeline pipe(st);
  if (!scenario_path.empty()) {
    const sc::Scenario s = sc::load_scenario(scenario_path);
    std::set<std::string> have;
    for (const auto& d : pipe.distillers()) have.insert(d.name);
    for (const auto& d : s.distillers)
      if (!have.count(d.name)) pipe.register_distiller(d);
  }
  const auto mats = pipe.propagate();
  if (c.format == "csv") std::cout << "distiller,output_version,recomputed_ranges,failed_ranges,unmatched_rows\n";
  bool failed = false;
  for (const auto& m : mats) {
    failed |= !m.failed.empty();
    const std::string ver = m.output_version ? std::to_string(*m.output_version) : "-";
    if (c.format == "csv") {
      std::cout << m.distiller << ',' << ver << ',' << m.recomputed.size() << ',' << m.failed.size() << ','
                << m.unmatched_rows << '\n';
    } else {
      std::cout << m.distiller << ": version " << ver << ", " << m.recomputed.size() << " range(s) recomputed, "
                << m.failed.size() << " failed, " << m.unmatched_rows << " unmatched rows\n";
    }
  }
  if (mats.empty() && c.format != "csv") std::cout << "nothing to propagate\n";
  return failed ? kCheckFailed : kOk;
}

int cmd_diagnose(std::string kind, const std::string& scenario_path, const Common& c) {
  for (char& ch : kind)
    if (ch == '-') ch = '_';
  const auto& kinds = sc::diagnostic_kinds();
  if (std::find(kinds.begin(), kinds.end(), kind) == kinds.end()) {
    throw Error(ErrorCode::InvalidArgument, "unknown diagnostic '" + kind + "'");
  }
  const sc::Scenario s = sc::load_scenario(scenario_path);
  const auto st = upmu::store::Store::open(store_dir(c));
  const sc::DiagnosticInputs in{&st, nullptr};
  int n = 0;
  bool failed = false;
  for (const auto& req : s.diagnostics) {
    if (req.kind != kind) continue;
    ++n;
    const json rep = sc::run_diagnostic(s, req, in);
    failed |= rep["status"] != "ok";
    if (!c.out.empty()) {
      std::filesystem::create_directories(c.out);
      std::ofstream(std::filesystem::path(c.out) / (req.id + ".json")) << rep.dump(2) << '\n';
      std::ofstream(std::filesystem::path(c.out) / (req.id + ".txt")) << sc::report_text(rep);
    }
    print_report(rep, c.format);
  }
  if (n == 0) throw Error(ErrorCode::NotFound, "scenario requests no '" + kind + "' diagnostic");
  return failed ? kCheckFailed : kOk;
}

int cmd_check(const std::string& use_case, std::optional<double> tve, std::optional<double> latency,
              std::optional<double> rate, const Common& c) {
  const auto rep = upmu::diag::check_requirements({tve, latency, rate}, use_case);
  if (c.format == "csv") {
    std::cout << "criterion,pass,value,limit,margin\n";
    for (const auto& k : rep.criteria)
      std::cout << k.name << ',' << (k.pass ? "pass" : "fail") << ',' << k.value << ',' << k.limit << ',' << k.margin << '\n';
  } else {
    std::cout << rep.use_case << ": " << (rep.pass ? "PASS" : "FAIL") << '\n';
    for (const auto& k : rep.criteria) {
      std::cout << "  " << (k.pass ? "pass " : "FAIL ") << k.name << ": " << k.value << " (limit " << k.limit
                << ", margin " << k.margin << ")\n";
    }
  }
  return rep.pass ? kOk : kCheckFailed;
}

int cmd_export(const std::string& stream, std::optional<std::int64_t> t0, std::optional<std::int64_t> t1,
               std::optional<int> pw, const Common& c) {
  const auto st = upmu::store::Store::open(store_dir(c));
  const auto key = upmu::store::StreamKey::parse(stream);
  if (!st.contains(key)) throw Error(ErrorCode::NotFound, "no stream " + key.str());
  const auto ext = st.extent(key);
  const std::int64_t a = t0.value_or(ext ? ext->start : 0);
  const std::int64_t b = t1.value_or(ext ? ext->end : 0);
  emit(c.out, [&](std::ostream& os) { sc::export_plot(st, key, a, b, pw, os); });
  return kOk;
}

int cmd_inspect(const std::string& stream, const Common& c) {
  const auto st = upmu::store::Store::open(store_dir(c));
  std::vector<upmu::store::StreamKey> keys;
  if (stream.empty()) {
    keys = st.streams();
  } else {
    keys.push_back(upmu::store::StreamKey::parse(stream));
    if (!st.contains(keys[0])) throw Error(ErrorCode::NotFound, "no stream " + keys[0].str());
  }
  if (c.format == "csv") std::cout << "stream,version,start_ns,end_ns,count\n";
  for (const auto& k : keys) {
    const auto ext = st.extent(k);
    std::uint64_t count = 0;
    if (ext) {
      for (const auto& w : st.query_windows(k, ext->start, ext->end, upmu::store::kMaxQueryPointwidth)) count += w.count;
    }
    if (c.format == "csv") {
      std::cout << k.str() << ',' << st.latest_version(k) << ',' << (ext ? std::to_string(ext->start) : "") << ','
                << (ext ? std::to_string(ext->end) : "") << ',' << count << '\n';
    } else {
      std::cout << k.str() << "  version " << st.latest_version(k) << "  " << count << " points";
      if (ext) std::cout << "  [" << ext->start << ", " << ext->end << ") ns";
      std::cout << '\n';
    }
  }
  return kOk;
}

int cmd_run(const std::string& path, const Common& c) {
  const sc::Scenario s = sc::load_scenario(path);
  sc::RunOptions opt;
  opt.out_dir = c.out;
  if (!c.store.empty()) {
    opt.store_dir = c.store;
  } else if (const char* env = std::getenv("UPMU_STORE"); env && *env) {
    opt.store_dir = env;
  }
  opt.seed = c.seed;
  const auto m = sc::run_scenario(s, opt);
  const std::filesystem::path out = c.out.empty() ? std::filesystem::path(s.output_dir) : std::filesystem::path(c.out);
  if (c.format == "csv") {
    std::cout << "stage,status\n";
    for (const auto& st : m.doc["stages"]) std::cout << st["name"].get<std::string>() << ',' << st["status"].get<std::string>() << '\n';
  } else {
    for (const auto& st : m.doc["stages"]) {
      std::cout << st["name"].get<std::string>() << ": " << st["status"].get<std::string>();
      if (st.contains("error")) std::cout << " (" << st["error"].get<std::string>() << ")";
      std::cout << '\n';
    }
    for (const auto& r : m.doc["reports"]) {
      std::cout << "  " << r["id"].get<std::string>() << ": " << r["status"].get<std::string>() << '\n';
    }
    std::cout << "manifest: " << (out / "manifest.json").string() << '\n';
  }
  return m.ok() ? kOk : kCheckFailed;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Micro-PMU feeder analytics: simulate, store, distill, diagnose"};
  app.require_subcommand(1);
  Common c;
  auto common = [&](CLI::App* sub, bool needs_store) {
    sub->add_option("--store", c.store, needs_store ? "Store directory (or set UPMU_STORE)" : "Store directory");
    sub->add_option("--format", c.format, "Output format")->check(CLI::IsMember({"csv", "text"}));
  };

  std::string scenario_path;
  auto* simulate = app.add_subcommand("simulate", "Simulate a scenario; frames go to --out/frames.csv, the store, or stdout");
  simulate->add_option("scenario", scenario_path, "Scenario file")->required();
  simulate->add_option("--seed", c.seed, "Override the scenario seed");
  simulate->add_option("--out", c.out, "Output directory");
  common(simulate, false);

  std::vector<std::string> csv_files;
  auto* ingest = app.add_subcommand("ingest", "Insert frame CSV files into the store");
  ingest->add_option("files", csv_files, "Frame CSV files")->required();
  common(ingest, true);

  auto* distill = app.add_subcommand("distill", "Register a scenario's distillers and propagate");
  distill->add_option("--scenario", scenario_path, "Scenario whose distillers to register");
  common(distill, true);

  std::string kind;
  auto* diagnose = app.add_subcommand("diagnose", "Run the scenario's diagnostics of one kind against the store");
  diagnose->add_option("kind", kind, "phase_id, topology, impedance, state_estimation, kpca, fault_location, "
                                     "reverse_flow, change_points or requirements")
      ->required();
  diagnose->add_option("--scenario", scenario_path, "Scenario file")->required();
  diagnose->add_option("--out", c.out, "Directory for report files");
  common(diagnose, true);

  std::string use_case;
  std::optional<double> tve, latency, rate;
  auto* check = app.add_subcommand("check-reqs", "Check stream statistics against a use case");
  check->add_option("--use-case", use_case, "Use case name")->required();
  check->add_option("--tve", tve, "Total vector error, percent");
  check->add_option("--latency", latency, "Latency, seconds");
  check->add_option("--rate", rate, "Report rate, frames per second");
  check->add_option("--format", c.format, "Output format")->check(CLI::IsMember({"csv", "text"}));

  std::string stream;
  std::optional<std::int64_t> t0, t1;
  std::optional<int> pointwidth;
  auto* plot = app.add_subcommand("export-plot", "Write plot-ready CSV for one stream");
  plot->add_option("stream", stream, "meter/channel")->required();
  plot->add_option("--t0", t0, "Start, ns (default: first point)");
  plot->add_option("--t1", t1, "End, ns exclusive (default: after the last point)");
  plot->add_option("--pointwidth", pointwidth, "Window is 2^pointwidth ns; raw points when omitted")
      ->check(CLI::Range(0, upmu::store::kMaxQueryPointwidth));
  plot->add_option("--out", c.out, "Output file (default stdout)");
  common(plot, true);

  auto* inspect = app.add_subcommand("inspect", "List streams with versions, extents and counts");
  inspect->add_option("stream", stream, "Only this meter/channel");
  common(inspect, true);

  auto* run = app.add_subcommand("run", "Simulate, store, distill and diagnose a scenario; writes a manifest");
  run->add_option("scenario", scenario_path, "Scenario file")->required();
  run->add_option("--seed", c.seed, "Override the scenario seed");
  run->add_option("--out", c.out, "Output directory (default: the scenario's output_dir)");
  common(run, false);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? kOk : kValidation;
  }

  try {
    if (*simulate) return cmd_simulate(scenario_path, c);
    if (*ingest) return cmd_ingest(csv_files, c);
    if (*distill) return cmd_distill(scenario_path, c);
    if (*diagnose) return cmd_diagnose(kind, scenario_path, c);
    if (*check) return cmd_check(use_case, tve, latency, rate, c);
    if (*plot) return cmd_export(stream, t0, t1, pointwidth, c);
    if (*inspect) return cmd_inspect(stream, c);
    if (*run) return cmd_run(scenario_path, c);
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << '\n';
    for (const auto& d : e.details()) std::cerr << "  " << d << '\n';
    return exit_for(e.code());
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kRuntime;
  }
  return kValidation;
}
