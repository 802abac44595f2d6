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
#include <cctype>
#include <cmath>
#include <limits>
#include <map>
#include <numeric>

#include "upmu/diagnostics.hpp"
#include "upmu/error.hpp"

namespace upmu::diag {

namespace {

double median(std::vector<double> v) {
  if (v.empty()) return 0.0;
  const std::size_t mid = v.size() / 2;
  std::nth_element(v.begin(), v.begin() + mid, v.end());
  double m = v[mid];
  if (v.size() % 2 == 0) m = 0.5 * (m + *std::max_element(v.begin(), v.begin() + mid));
  return m;
}

double pearson(const std::vector<double>& x, const std::vector<double>& y) {
  const double n = static_cast<double>(x.size());
  const double mx = std::accumulate(x.begin(), x.end(), 0.0) / n;
  const double my = std::accumulate(y.begin(), y.end(), 0.0) / n;
  double sxy = 0, sxx = 0, syy = 0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    sxy += (x[i] - mx) * (y[i] - my);
    sxx += (x[i] - mx) * (x[i] - mx);
    syy += (y[i] - my) * (y[i] - my);
  }
  return sxy / std::sqrt(sxx * syy);
}

bool flat(const std::vector<double>& x) {
  const double n = static_cast<double>(x.size());
  const double m = std::accumulate(x.begin(), x.end(), 0.0) / n;
  double var = 0;
  for (double v : x) var += (v - m) * (v - m);
  var /= n;
  return !(var > 1e-12 * std::max(m * m, 1e-300));
}

std::string normalize(std::string_view s) {
  std::string out;
  for (char c : s)
    if (std::isalnum(static_cast<unsigned char>(c))) out += static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
  return out;
}

}  // namespace

PhaseSeries phase_series(const std::vector<Frame>& frames, bool current) {
  PhaseSeries out;
  for (const Frame& f : frames) {
    if (f.gap) continue;
    const ThreePhaseSet& s = current ? f.current : f.voltage;
    for (int p = 0; p < 3; ++p) out[p].push_back(s[p].to_complex());
  }
  return out;
}

std::vector<std::vector<Frame>> align_frames(const std::vector<std::vector<Frame>>& streams) {
  std::vector<std::vector<Frame>> out(streams.size());
  if (streams.empty()) return out;
  std::vector<std::size_t> pos(streams.size(), 0);
  for (const Frame& f : streams[0]) {
    if (f.gap) continue;
    bool ok = true;
    std::vector<const Frame*> row{&f};
    for (std::size_t s = 1; s < streams.size() && ok; ++s) {
      auto& p = pos[s];
      while (p < streams[s].size() && streams[s][p].timestamp_ns < f.timestamp_ns) ++p;
      ok = p < streams[s].size() && streams[s][p].timestamp_ns == f.timestamp_ns && !streams[s][p].gap;
      if (ok) row.push_back(&streams[s][p]);
    }
    if (!ok) continue;
    for (std::size_t s = 0; s < row.size(); ++s) out[s].push_back(*row[s]);
  }
  return out;
}

double quantile(std::vector<double> values, double q) {
  if (values.empty()) throw Error(ErrorCode::InvalidArgument, "quantile of an empty set");
  if (!(q >= 0.0 && q <= 1.0)) throw Error(ErrorCode::InvalidArgument, "quantile level must lie in [0, 1]");
  std::sort(values.begin(), values.end());
  const double h = q * static_cast<double>(values.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(h));
  const std::size_t hi = std::min(lo + 1, values.size() - 1);
  return values[lo] + (h - static_cast<double>(lo)) * (values[hi] - values[lo]);
}

// ---------------------------------------------------------------- phase id

PhaseAssignment identify_phase(const PhaseSeries& reference, const PhaseSeries& candidate,
                               const PhaseIdOptions& options) {
  const std::size_t n = reference[0].size();
  for (int p = 0; p < 3; ++p) {
    if (reference[p].size() != n || candidate[p].size() != n) {
      throw Error(ErrorCode::InvalidArgument, "phase series must be time-aligned and equally long");
    }
  }
  if (n < options.min_samples) {
    throw Error(ErrorCode::InsufficientSamples,
                std::to_string(n) + " common samples, need " + std::to_string(options.min_samples));
  }
  std::array<std::vector<double>, 3> mref, mcand;
  for (int p = 0; p < 3; ++p) {
    for (std::size_t t = 0; t < n; ++t) {
      mref[p].push_back(std::abs(reference[p][t]));
      mcand[p].push_back(std::abs(candidate[p][t]));
    }
    if (flat(mref[p]) || flat(mcand[p])) {
      throw Error(ErrorCode::InsufficientVariation, "voltage magnitudes are too flat to correlate");
    }
  }
  // Reference magnitude each candidate phase should track. Odd multiples of
  // 30 degrees mean the candidate sits across a delta winding, so it follows
  // the line-to-line difference whose balanced angle matches.
  const Vector3c ideal = balanced_voltage(1.0);
  std::map<std::pair<int, int>, std::vector<double>> line_mag;
  auto tracked = [&](int phase, int offset) -> const std::vector<double>& {
    if (offset % 60 == 0) return mref[phase];
    const double want = std::arg(ideal[phase]) + deg_to_rad(offset);
    for (int x = 0; x < 3; ++x)
      for (int y = 0; y < 3; ++y) {
        if (x == y || std::abs(wrap_angle(std::arg(ideal[x] - ideal[y]) - want)) > 1e-6) continue;
        auto [it, fresh] = line_mag.try_emplace({x, y});
        if (fresh)
          for (std::size_t t = 0; t < n; ++t) it->second.push_back(std::abs(reference[x][t] - reference[y][t]));
        return it->second;
      }
    throw Error(ErrorCode::InvalidArgument, "offset is not a multiple of 30 degrees");
  };

  std::vector<PhaseAssignment> passing;
  std::array<int, 3> perm{0, 1, 2};
  do {
    // Angle differences for this bijection, in degrees.
    std::vector<double> d;
    d.reserve(3 * n);
    for (int i = 0; i < 3; ++i)
      for (std::size_t t = 0; t < n; ++t) {
        d.push_back(rad_to_deg(std::arg(candidate[i][t] * std::conj(reference[perm[i]][t]))));
      }
    int best_off = 0;
    double best_res = std::numeric_limits<double>::infinity();
    for (int k = -5; k <= 6; ++k) {
      const double off = 30.0 * k;
      double res = 0;
      for (double x : d) res += std::abs(rad_to_deg(wrap_angle(deg_to_rad(x - off))));
      res /= static_cast<double>(d.size());
      if (res < best_res) {
        best_res = res;
        best_off = static_cast<int>(off);
      }
    }
    if (best_res < options.angle_gate_deg) {
      PhaseAssignment a;
      a.mapping = perm;
      a.offset_deg = best_off;
      a.angle_residual_deg = best_res;
      for (int i = 0; i < 3; ++i) a.score += pearson(mcand[i], tracked(perm[i], best_off)) / 3.0;
      passing.push_back(a);
    }
  } while (std::next_permutation(perm.begin(), perm.end()));

  if (passing.empty()) {
    throw Error(ErrorCode::NoConsistentAssignment, "no bijection keeps the angle residual under " +
                                                       std::to_string(options.angle_gate_deg) + " deg");
  }
  double top = -2.0;
  for (const auto& a : passing) top = std::max(top, a.score);
  const PhaseAssignment* pick = nullptr;
  for (const auto& a : passing) {
    if (a.score < top - options.tie_margin) continue;
    if (!pick || std::abs(a.offset_deg) < std::abs(pick->offset_deg) ||
        (std::abs(a.offset_deg) == std::abs(pick->offset_deg) && a.score > pick->score)) {
      pick = &a;
    }
  }
  return *pick;
}

// ---------------------------------------------------------------- CUSUM

std::vector<std::size_t> cusum_change_points(std::span<const double> x, const CusumOptions& opt) {
  const std::size_t n = x.size();
  if (n < 100) throw Error(ErrorCode::InsufficientSamples, "CUSUM needs at least 100 samples");
  std::vector<double> dif(n - 1);
  for (std::size_t i = 1; i < n; ++i) dif[i - 1] = x[i] - x[i - 1];
  const double md = median(dif);
  for (double& v : dif) v = std::abs(v - md);
  double sigma = median(dif) / 0.6745 / std::sqrt(2.0);

  auto baseline = [&](std::size_t from) {
    const std::size_t to = std::min(n, from + std::max<std::size_t>(opt.warmup, 1));
    return median(std::vector<double>(x.begin() + from, x.begin() + to));
  };
  double mu = baseline(0);
  sigma = std::max(sigma, 1e-12 * std::max(1.0, std::abs(mu)));

  std::vector<std::size_t> out;
  double gp = 0, gn = 0;
  std::size_t start = 0;
  std::ptrdiff_t zero_p = -1, zero_n = -1;
  for (std::size_t i = 0; i < n; ++i) {
    const double z = (x[i] - mu) / sigma;
    gp = std::max(0.0, gp + z - opt.drift);
    gn = std::max(0.0, gn - z - opt.drift);
    if (gp == 0.0) zero_p = static_cast<std::ptrdiff_t>(i);
    if (gn == 0.0) zero_n = static_cast<std::ptrdiff_t>(i);
    if (gp <= opt.threshold && gn <= opt.threshold) continue;

    // Provisional start is just after the last zero of the alarming sum;
    // refine it by the likelihood ratio of a shift to the level that follows.
    const bool up = gp > opt.threshold;
    const auto first = static_cast<std::size_t>(std::max<std::ptrdiff_t>((up ? zero_p : zero_n) + 1, 0));
    const std::size_t c0 = std::max(first, start);
    const double post = baseline(i);
    const double half = 0.5 * (post - mu);
    const std::size_t lo = c0 >= start + 2 * (i - c0) + 5 ? c0 - 2 * (i - c0) - 5 : start;
    std::size_t cp = c0;
    double acc = 0.0, best = -std::numeric_limits<double>::infinity();
    for (std::size_t j = i + 1; j-- > lo;) {
      acc += (x[j] - mu - half) * (post - mu);
      if (acc > best) {
        best = acc;
        cp = j;
      }
    }
    out.push_back(cp);

    // Resume after the alarm with a fresh baseline.
    start = i + 1;
    if (start + 1 >= n) break;
    mu = baseline(start);
    gp = gn = 0;
    zero_p = zero_n = static_cast<std::ptrdiff_t>(start) - 1;
  }
  return out;
}

std::vector<std::int64_t> detect_switch_transition(std::span<const std::int64_t> times, std::span<const double> series,
                                                   const CusumOptions& options) {
  if (times.size() != series.size()) throw Error(ErrorCode::InvalidArgument, "times and series differ in length");
  std::vector<std::int64_t> out;
  for (std::size_t i : cusum_change_points(series, options)) out.push_back(times[i]);
  return out;
}

// ---------------------------------------------------------------- impedance

namespace {

constexpr int kSymIdx[3][3] = {{0, 3, 4}, {3, 1, 5}, {4, 5, 2}};

/// Real-valued regressor: rows [Re; Im] per phase per sample, columns
/// [Re z_k, Im z_k] per unknown.
Eigen::MatrixXd regressor(const std::vector<Vector3c>& currents, ZStructure structure) {
  const int unknowns = structure == ZStructure::Symmetric ? 6 : 3;
  Eigen::MatrixXd a = Eigen::MatrixXd::Zero(6 * static_cast<Eigen::Index>(currents.size()), 2 * unknowns);
  for (std::size_t t = 0; t < currents.size(); ++t) {
    for (int p = 0; p < 3; ++p) {
      const Eigen::Index row = 6 * static_cast<Eigen::Index>(t) + 2 * p;
      for (int q = 0; q < 3; ++q) {
        if (structure == ZStructure::Diagonal && q != p) continue;
        const int k = structure == ZStructure::Symmetric ? kSymIdx[p][q] : p;
        const Complex i = currents[t][q];
        // (zr + j zi)(ir + j ii) = (zr ir - zi ii) + j (zr ii + zi ir)
        a(row, 2 * k) += i.real();
        a(row, 2 * k + 1) += -i.imag();
        a(row + 1, 2 * k) += i.imag();
        a(row + 1, 2 * k + 1) += i.real();
      }
    }
  }
  return a;
}

double condition_of(const Eigen::MatrixXd& a) {
  if (a.size() == 0) return std::numeric_limits<double>::infinity();
  Eigen::JacobiSVD<Eigen::MatrixXd> svd(a);
  const auto& s = svd.singularValues();
  const double smax = s(0), smin = s(s.size() - 1);
  if (!(smax > 0.0) || smin <= smax * 1e-13) return std::numeric_limits<double>::infinity();
  return smax / smin;
}

}  // namespace

double excitation_condition(const std::vector<Vector3c>& currents, ZStructure structure) {
  if (currents.size() < 2) throw Error(ErrorCode::InsufficientSamples, "need at least 2 current samples");
  return condition_of(regressor(currents, structure));
}

double relative_z_error(const Matrix3c& estimate, const Matrix3c& truth) {
  return (estimate - truth).norm() / truth.norm();
}

ImpedanceEstimate estimate_impedance(const std::vector<Vector3c>& dv, const std::vector<Vector3c>& currents,
                                     ZStructure structure, const ImpedanceOptions& options) {
  if (dv.size() != currents.size()) throw Error(ErrorCode::InvalidArgument, "voltage and current series differ");
  if (dv.size() < options.min_samples) {
    throw Error(ErrorCode::InsufficientSamples,
                std::to_string(dv.size()) + " synchronized samples, need " + std::to_string(options.min_samples));
  }
  const Eigen::MatrixXd a = regressor(currents, structure);
  ImpedanceEstimate est;
  est.branch = options.branch;
  est.condition_metric = condition_of(a);
  if (!(est.condition_metric <= options.max_condition)) {
    throw Error(ErrorCode::InsufficientExcitation,
                "phase currents are not distinct enough (condition " + std::to_string(est.condition_metric) + ")");
  }
  Eigen::VectorXd b(a.rows());
  for (std::size_t t = 0; t < dv.size(); ++t)
    for (int p = 0; p < 3; ++p) {
      b(6 * static_cast<Eigen::Index>(t) + 2 * p) = dv[t][p].real();
      b(6 * static_cast<Eigen::Index>(t) + 2 * p + 1) = dv[t][p].imag();
    }
  const Eigen::VectorXd z = a.colPivHouseholderQr().solve(b);
  for (int p = 0; p < 3; ++p)
    for (int q = 0; q < 3; ++q) {
      if (structure == ZStructure::Diagonal) {
        if (p == q) est.z_hat(p, p) = Complex(z(2 * p), z(2 * p + 1));
      } else {
        const int k = kSymIdx[p][q];
        est.z_hat(p, q) = Complex(z(2 * k), z(2 * k + 1));
      }
    }
  if (options.truth) est.relative_error_norm = relative_z_error(est.z_hat, *options.truth);
  return est;
}

ImpedanceEstimate estimate_line_impedance(const std::vector<Frame>& end1, const std::vector<Frame>& end2,
                                          const ImpedanceOptions& options) {
  const auto al = align_frames({end1, end2});
  std::vector<Vector3c> dv, cur;
  for (std::size_t t = 0; t < al[0].size(); ++t) {
    dv.push_back(al[0][t].voltage.to_vector() - al[1][t].voltage.to_vector());
    cur.push_back(al[0][t].current.to_vector());
  }
  return estimate_impedance(dv, cur, ZStructure::Symmetric, options);
}

ImpedanceEstimate estimate_transformer_impedance(const std::vector<Frame>& high, const std::vector<Frame>& low,
                                                 double n_t, const ImpedanceOptions& options) {
  const Matrix3c at = transformer_ratio_matrix(n_t).cast<Complex>();
  const auto al = align_frames({high, low});
  std::vector<Vector3c> dv, cur;
  for (std::size_t t = 0; t < al[0].size(); ++t) {
    dv.push_back(at * al[0][t].voltage.to_vector() - al[1][t].voltage.to_vector());
    cur.push_back(al[1][t].current.to_vector());
  }
  return estimate_impedance(dv, cur, ZStructure::Diagonal, options);
}

// ---------------------------------------------------------------- reverse flow

std::vector<std::array<bool, 3>> detect_reverse_flow(const std::vector<Frame>& frames, double va_base,
                                                     double deadband_pu) {
  const double base = va_base / 3.0;
  std::vector<std::array<bool, 3>> out;
  out.reserve(frames.size());
  for (const Frame& f : frames) {
    std::array<bool, 3> r{false, false, false};
    if (!f.gap) {
      for (int p = 0; p < 3; ++p) {
        const double pw = (f.voltage[p].to_complex() * std::conj(f.current[p].to_complex())).real() / base;
        r[p] = pw < -deadband_pu;
      }
    }
    out.push_back(r);
  }
  return out;
}

// ---------------------------------------------------------------- requirements

const std::vector<UseCaseLimits>& use_case_table() {
  // Upper ends of the published ranges. "~0.000 %" is read as anything
  // that rounds to 0.000 %, i.e. strictly below 0.0005 %.
  static const std::vector<UseCaseLimits> table = {
      {"Emergency Alarms", "state estimation", 5.0, 15 * 60.0, 1.0},
      {"Avoid Constraints Violations", "state estimation", 0.5, 5 * 60.0, 1.0},
      {"Improve System Efficiency", "state estimation", 0.5, 30.0, 1.0},
      {"Switch Status Identification", "topology detection", 0.0005, 15 * 60.0, 1.0},
      {"Corroborate field crew or SCADA information", "topology detection", 1.0, 5 * 60.0, 1.0},
      {"Support State Estimation", "topology detection", 5.0, 60.0, 1.0},
  };
  return table;
}

ComplianceReport check_requirements(const StreamStatistics& stats, std::string_view use_case) {
  const std::string key = normalize(use_case);
  const UseCaseLimits* row = nullptr;
  for (const auto& r : use_case_table()) {
    std::string name = normalize(r.name);
    std::string alt = name;
    if (auto pos = alt.find("scada"); pos != std::string::npos) alt.replace(pos, 5, "sacda");
    if (key == name || key == alt || (key.size() >= 6 && (name.rfind(key, 0) == 0 || alt.rfind(key, 0) == 0))) {
      row = &r;
      break;
    }
  }
  if (!row) {
    std::vector<std::string> known;
    for (const auto& r : use_case_table()) known.push_back(r.name);
    throw Error(ErrorCode::UnknownUseCase, "unknown use case '" + std::string(use_case) + "'", known);
  }
  ComplianceReport rep;
  rep.use_case = row->name;
  if (stats.tve_percent) {
    const bool strict = row->tve_percent_max < 0.001;
    const double v = *stats.tve_percent, lim = row->tve_percent_max;
    rep.criteria.push_back({"accuracy (TVE %)", strict ? v < lim : v <= lim, v, lim, lim - v});
  }
  if (stats.latency_s) {
    const double v = *stats.latency_s, lim = row->latency_s_max;
    rep.criteria.push_back({"latency (s)", v <= lim, v, lim, lim - v});
  }
  if (stats.report_rate_hz) {
    const double v = *stats.report_rate_hz / stats.nominal_frequency_hz, lim = row->report_rate_per_cycle_min;
    rep.criteria.push_back({"report rate (per cycle)", v >= lim, v, lim, v - lim});
  }
  for (const auto& c : rep.criteria) rep.pass = rep.pass && c.pass;
  return rep;
}

}  // namespace upmu::diag
