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

#include <cmath>
#include <limits>
#include <numeric>

#include "upmu/diagnostics.hpp"
#include "upmu/error.hpp"

namespace upmu::diag {

namespace {

using Eigen::Index;
using MatrixXc = Eigen::MatrixXcd;
using VectorXc = Eigen::VectorXcd;

/// Network reduced to electrical nodes: buses joined by closed switches
/// share a node. Quantities are per unit on the per-bus bases.
struct Network {
  std::vector<std::size_t> node_of_bus;
  std::size_t nodes = 0;
  std::size_t source_node = 0;
  std::vector<double> vbase;  // per node
  double sbase = 0.0;         // per-phase VA
  MatrixXc y;                 // 3 nodes x 3 nodes, per unit
  VectorXc v0;                // no-load voltages, per unit
};

std::size_t find(std::vector<std::size_t>& parent, std::size_t i) {
  while (parent[i] != i) i = parent[i] = parent[parent[i]];
  return i;
}

Network build_network(const FeederModel& model) {
  model.validate();
  const std::size_t nb = model.buses.size();
  std::vector<std::size_t> parent(nb);
  std::iota(parent.begin(), parent.end(), 0);
  for (const Branch& br : model.branches) {
    if (const auto* sw = std::get_if<SwitchBranch>(&br.kind); sw && sw->status == SwitchStatus::Closed) {
      parent[find(parent, *model.bus_index(br.from))] = find(parent, *model.bus_index(br.to));
    }
  }
  Network net;
  net.node_of_bus.assign(nb, 0);
  std::map<std::size_t, std::size_t> root_to_node;
  for (std::size_t b = 0; b < nb; ++b) {
    const std::size_t r = find(parent, b);
    auto [it, fresh] = root_to_node.emplace(r, root_to_node.size());
    net.node_of_bus[b] = it->second;
  }
  net.nodes = root_to_node.size();
  net.source_node = net.node_of_bus[*model.bus_index(model.source.bus)];

  const PerUnitBases bases = per_unit_bases(model);
  net.vbase.assign(net.nodes, 0.0);
  for (std::size_t b = 0; b < nb; ++b) net.vbase[net.node_of_bus[b]] = bases.voltage[b];
  net.sbase = model.va_base / 3.0;

  const Index n3 = 3 * static_cast<Index>(net.nodes);
  MatrixXc y = MatrixXc::Zero(n3, n3);
  auto stamp = [&](std::size_t i, std::size_t j, const Matrix3c& block) {
    y.block<3, 3>(3 * static_cast<Index>(i), 3 * static_cast<Index>(j)) += block;
  };
  for (const Branch& br : model.branches) {
    const std::size_t f = net.node_of_bus[*model.bus_index(br.from)];
    const std::size_t t = net.node_of_bus[*model.bus_index(br.to)];
    if (const auto* line = std::get_if<LineBranch>(&br.kind)) {
      Eigen::FullPivLU<Matrix3c> lu(line->z);
      if (!lu.isInvertible()) throw Error(ErrorCode::ModelViolation, "line '" + br.id + "' has a singular impedance");
      const Matrix3c yz = lu.inverse();
      stamp(f, f, yz);
      stamp(f, t, -yz);
      stamp(t, f, -yz);
      stamp(t, t, yz);
    } else if (const auto* tx = std::get_if<TransformerBranch>(&br.kind)) {
      Eigen::FullPivLU<Matrix3c> lu(tx->z_abc);
      if (!lu.isInvertible()) {
        throw Error(ErrorCode::ModelViolation, "transformer '" + br.id + "' has a singular impedance");
      }
      const Matrix3c yz = lu.inverse();
      const Matrix3c a = transformer_ratio_matrix(tx->n_t).cast<Complex>();
      stamp(f, f, a.transpose() * yz * a);
      stamp(f, t, -a.transpose() * yz);
      stamp(t, f, -yz * a);
      stamp(t, t, yz);
    }
  }
  // To per unit: I_i / Ib_i = sum_j Y_ij Vb_j / Ib_i V_j, with Ib = sbase / Vb.
  net.y = MatrixXc(n3, n3);
  for (Index i = 0; i < n3; ++i)
    for (Index j = 0; j < n3; ++j) {
      net.y(i, j) = y(i, j) * net.vbase[static_cast<std::size_t>(j / 3)] * net.vbase[static_cast<std::size_t>(i / 3)] /
                    net.sbase;
    }

  FeederModel unloaded = model;
  unloaded.loads.clear();
  const PowerFlowSolution sol = solve_power_flow(unloaded);
  net.v0 = VectorXc::Zero(n3);
  for (std::size_t b = 0; b < nb; ++b) {
    if (!sol.energized[b]) {
      throw Error(ErrorCode::ModelViolation, "bus '" + model.buses[b] + "' is not energized in this topology");
    }
    const std::size_t node = net.node_of_bus[b];
    net.v0.segment<3>(3 * static_cast<Index>(node)) = sol.bus_voltage[b] / net.vbase[node];
  }
  return net;
}

/// Per-node summed load forecast and its per-axis sigma, per unit.
struct Injection {
  Complex s = 0.0;  // consumption
  double sigma = 0.0;
  bool declared = false;
};

std::vector<std::array<Injection, 3>> injections(const FeederModel& model, const Network& net,
                                                 const SeMeasurements& meas) {
  std::vector<std::array<Injection, 3>> inj(net.nodes);
  for (const auto& l : meas.loads) {
    const auto b = model.bus_index(l.bus);
    if (!b) throw Error(ErrorCode::NotFound, "load pseudo-measurement at unknown bus '" + l.bus + "'");
    auto& node = inj[net.node_of_bus[*b]];
    for (int p = 0; p < 3; ++p) {
      const Complex s = l.power[p] / net.sbase;
      const double sig = std::max(l.sigma_fraction * std::abs(s), meas.min_load_sigma_pu);
      node[p].s += s;
      node[p].sigma = std::sqrt(node[p].sigma * node[p].sigma + sig * sig);
      node[p].declared = true;
    }
  }
  for (auto& node : inj)
    for (auto& x : node)
      if (!x.declared) x.sigma = meas.zero_injection_sigma_pu;
  return inj;
}

std::size_t voltage_node(const FeederModel& model, const Network& net, const std::string& bus) {
  const auto b = model.bus_index(bus);
  if (!b) throw Error(ErrorCode::NotFound, "voltage measurement at unknown bus '" + bus + "'");
  return net.node_of_bus[*b];
}

StateEstimate report(const FeederModel& model, const Network& net, const VectorXc& v_pu,
                     const Eigen::VectorXd& var_pu) {
  StateEstimate est;
  est.bus_ids = model.buses;
  for (std::size_t b = 0; b < model.buses.size(); ++b) {
    const std::size_t node = net.node_of_bus[b];
    const double vb = net.vbase[node];
    est.voltage.push_back(v_pu.segment<3>(3 * static_cast<Index>(node)) * vb);
    Eigen::Vector3d sd;
    for (int p = 0; p < 3; ++p) sd[p] = std::sqrt(std::max(0.0, var_pu(3 * static_cast<Index>(node) + p))) * vb;
    est.std_dev.push_back(sd);
  }
  return est;
}

/// Rectangular 2x2 covariance of a polar measurement with magnitude m and angle th.
Eigen::Matrix2d polar_cov(double m, double th, double sm, double sa) {
  Eigen::Matrix2d rot;
  rot << std::cos(th), -std::sin(th), std::sin(th), std::cos(th);
  return rot * Eigen::Vector2d(sm * sm, m * m * sa * sa).asDiagonal() * rot.transpose();
}

}  // namespace

const Vector3c& StateEstimate::at(std::string_view bus) const {
  for (std::size_t i = 0; i < bus_ids.size(); ++i)
    if (bus_ids[i] == bus) return voltage[i];
  throw Error(ErrorCode::NotFound, "no bus '" + std::string(bus) + "' in estimate");
}

StateEstimate linear_state_estimate(const FeederModel& model, const SeMeasurements& meas,
                                    const LinearSeOptions& options) {
  const Network net = build_network(model);
  const Index nc = 3 * static_cast<Index>(net.nodes);  // complex unknowns
  const Index nx = 2 * nc;

  Eigen::VectorXd mu(nx);
  VectorXc mu_c = net.v0;
  if (options.prior_mean) {
    if (options.prior_mean->size() != model.buses.size()) {
      throw Error(ErrorCode::InvalidArgument, "prior mean must list one voltage set per bus");
    }
    for (std::size_t b = 0; b < model.buses.size(); ++b) {
      const std::size_t node = net.node_of_bus[b];
      mu_c.segment<3>(3 * static_cast<Index>(node)) = (*options.prior_mean)[b] / net.vbase[node];
    }
  }
  for (Index k = 0; k < nc; ++k) {
    mu(2 * k) = mu_c(k).real();
    mu(2 * k + 1) = mu_c(k).imag();
  }
  const double s0 = options.prior_sigma_pu;
  if (!(s0 > 0.0)) throw Error(ErrorCode::InvalidArgument, "prior sigma must be positive");

  // Measurement rows: complex coefficient rows expanded to 2x2 real blocks.
  std::vector<VectorXc> rows;
  std::vector<Complex> z;
  std::vector<Eigen::Matrix2d> r;
  for (const auto& vm : meas.voltages) {
    const std::size_t node = voltage_node(model, net, vm.bus);
    for (int p = 0; p < 3; ++p) {
      VectorXc h = VectorXc::Zero(nc);
      h(3 * static_cast<Index>(node) + p) = 1.0;
      const Complex v = vm.value[p] / net.vbase[node];
      rows.push_back(h);
      z.push_back(v);
      r.push_back(polar_cov(std::abs(v), std::arg(v), vm.sigma_magnitude_pu, vm.sigma_angle_rad));
    }
  }
  const auto inj = injections(model, net, meas);
  for (std::size_t node = 0; node < net.nodes; ++node) {
    if (node == net.source_node) continue;
    for (int p = 0; p < 3; ++p) {
      const Index k = 3 * static_cast<Index>(node) + p;
      const Complex v0 = net.v0(k);
      // Injected current linearized at the no-load voltage.
      rows.push_back(net.y.row(k).transpose());
      z.push_back(-std::conj(inj[node][p].s / v0));
      const double sig = inj[node][p].sigma / std::abs(v0);
      r.push_back(Eigen::Matrix2d::Identity() * sig * sig);
    }
  }

  const Index m = 2 * static_cast<Index>(rows.size());
  if (m == 0) {
    return report(model, net, mu_c, Eigen::VectorXd::Constant(nc, 2.0 * s0 * s0));
  }
  Eigen::MatrixXd h = Eigen::MatrixXd::Zero(m, nx);
  Eigen::VectorXd zr(m);
  Eigen::MatrixXd rr = Eigen::MatrixXd::Zero(m, m);
  for (std::size_t i = 0; i < rows.size(); ++i) {
    const Index a = 2 * static_cast<Index>(i);
    for (Index k = 0; k < nc; ++k) {
      const Complex c = rows[i](k);
      if (c == Complex(0.0)) continue;
      h(a, 2 * k) = c.real();
      h(a, 2 * k + 1) = -c.imag();
      h(a + 1, 2 * k) = c.imag();
      h(a + 1, 2 * k + 1) = c.real();
    }
    zr(a) = z[i].real();
    zr(a + 1) = z[i].imag();
    rr.block<2, 2>(a, a) = r[i];
  }

  // Prior covariance is s0^2 I, so Sigma H^T = s0^2 H^T.
  const Eigen::MatrixXd s = s0 * s0 * h * h.transpose() + rr;
  Eigen::LLT<Eigen::MatrixXd> llt(s);
  if (llt.info() != Eigen::Success) {
    throw Error(ErrorCode::NumericallySingular, "innovation covariance is not positive definite");
  }
  const Eigen::MatrixXd k_gain = s0 * s0 * llt.solve(h).transpose();  // Sigma H^T S^-1
  const Eigen::VectorXd x = mu + k_gain * (zr - h * mu);
  // Posterior diagonal: s0^2 - s0^2 diag(K H).
  Eigen::VectorXd var_c(nc);
  for (Index k = 0; k < nc; ++k) {
    double v = 0.0;
    for (Index c = 2 * k; c <= 2 * k + 1; ++c) v += s0 * s0 - s0 * s0 * k_gain.row(c).dot(h.col(c));
    var_c(k) = v;
  }
  VectorXc xc(nc);
  for (Index k = 0; k < nc; ++k) xc(k) = Complex(x(2 * k), x(2 * k + 1));
  StateEstimate est = report(model, net, xc, var_c);
  est.iterations = 1;
  return est;
}

StateEstimate wls_state_estimate(const FeederModel& model, const SeMeasurements& meas, const WlsOptions& options) {
  const Network net = build_network(model);
  const Index nc = 3 * static_cast<Index>(net.nodes);
  if (meas.voltages.empty()) {
    throw Error(ErrorCode::Unobservable, "no phasor measurements: absolute angles are unobservable");
  }

  struct VRow {
    Index k;
    double mag, ang, sm, sa;
  };
  std::vector<VRow> vrows;
  for (const auto& vm : meas.voltages) {
    const std::size_t node = voltage_node(model, net, vm.bus);
    for (int p = 0; p < 3; ++p) {
      const Complex v = vm.value[p] / net.vbase[node];
      vrows.push_back({3 * static_cast<Index>(node) + p, std::abs(v), std::arg(v), vm.sigma_magnitude_pu,
                       vm.sigma_angle_rad});
    }
  }
  const auto inj = injections(model, net, meas);
  std::vector<Index> srows;
  for (std::size_t node = 0; node < net.nodes; ++node)
    if (node != net.source_node)
      for (int p = 0; p < 3; ++p) srows.push_back(3 * static_cast<Index>(node) + p);

  const Index m = 2 * static_cast<Index>(vrows.size() + srows.size());
  const Index nx = 2 * nc;  // [Vm; Va]
  Eigen::VectorXd w(m);
  {
    Index i = 0;
    for (const auto& v : vrows) {
      w(i++) = 1.0 / (v.sm * v.sm);
      w(i++) = 1.0 / (v.sa * v.sa);
    }
    for (Index k : srows) {
      const auto& x = inj[static_cast<std::size_t>(k / 3)][static_cast<std::size_t>(k % 3)];
      w(i++) = 1.0 / (x.sigma * x.sigma);
      w(i++) = 1.0 / (x.sigma * x.sigma);
    }
  }

  Eigen::VectorXd vm = net.v0.cwiseAbs();
  Eigen::VectorXd va = net.v0.unaryExpr([](Complex c) { return std::arg(c); }).real();
  const Eigen::VectorXd sw = w.cwiseSqrt();
  for (int it = 1; it <= options.max_iterations; ++it) {
    VectorXc v(nc);
    for (Index k = 0; k < nc; ++k) v(k) = std::polar(vm(k), va(k));
    const VectorXc cur = net.y * v;
    const VectorXc sinj = v.cwiseProduct(cur.conjugate());
    const VectorXc vn = v.cwiseQuotient(vm.cast<Complex>());
    // dS/dVm = diag(V) conj(Y diag(Vn)) + conj(diag(I)) diag(Vn)
    // dS/dVa = j diag(V) conj(diag(I) - Y diag(V))
    const MatrixXc ydv = net.y * v.asDiagonal();
    const MatrixXc ydvn = net.y * vn.asDiagonal();
    MatrixXc ds_dvm = v.asDiagonal() * ydvn.conjugate();
    ds_dvm += (cur.conjugate().cwiseProduct(vn)).asDiagonal();
    MatrixXc ds_dva = -ydv.conjugate();
    ds_dva.diagonal() += cur.conjugate();
    ds_dva = Complex(0.0, 1.0) * (v.asDiagonal() * ds_dva);

    Eigen::MatrixXd jac = Eigen::MatrixXd::Zero(m, nx);
    Eigen::VectorXd res(m);
    Index i = 0;
    for (const auto& row : vrows) {
      jac(i, row.k) = 1.0;
      res(i++) = row.mag - vm(row.k);
      jac(i, nc + row.k) = 1.0;
      res(i++) = wrap_angle(row.ang - va(row.k));
    }
    for (Index k : srows) {
      const auto& x = inj[static_cast<std::size_t>(k / 3)][static_cast<std::size_t>(k % 3)];
      const Complex want = -x.s;
      jac.block(i, 0, 1, nc) = ds_dvm.row(k).real();
      jac.block(i, nc, 1, nc) = ds_dva.row(k).real();
      res(i++) = want.real() - sinj(k).real();
      jac.block(i, 0, 1, nc) = ds_dvm.row(k).imag();
      jac.block(i, nc, 1, nc) = ds_dva.row(k).imag();
      res(i++) = want.imag() - sinj(k).imag();
    }
    const Eigen::MatrixXd aw = sw.asDiagonal() * jac;
    Eigen::ColPivHouseholderQR<Eigen::MatrixXd> qr(aw);
    qr.setThreshold(1e-12);
    if (qr.rank() < nx) {
      throw Error(ErrorCode::Unobservable, "measurement Jacobian has rank " + std::to_string(qr.rank()) + " of " +
                                               std::to_string(nx));
    }
    const Eigen::VectorXd dx = qr.solve(sw.cwiseProduct(res));
    vm += dx.head(nc);
    va += dx.tail(nc);
    if (dx.lpNorm<Eigen::Infinity>() < options.tolerance) {
      // Covariance from the final gain matrix.
      const Eigen::MatrixXd g = aw.transpose() * aw;
      const Eigen::MatrixXd cov = g.ldlt().solve(Eigen::MatrixXd::Identity(nx, nx));
      VectorXc out(nc);
      Eigen::VectorXd var(nc);
      for (Index k = 0; k < nc; ++k) {
        out(k) = std::polar(vm(k), va(k));
        // Rectangular variance sum = var(Vm) + Vm^2 var(Va) to first order.
        var(k) = cov(k, k) + vm(k) * vm(k) * cov(nc + k, nc + k);
      }
      StateEstimate est = report(model, net, out, var);
      est.iterations = it;
      return est;
    }
  }
  throw Error(ErrorCode::Diverged, "WLS did not converge in " + std::to_string(options.max_iterations) + " iterations");
}

double rms_voltage_error_pu(const FeederModel& model, const StateEstimate& estimate,
                            const std::map<std::string, Vector3c>& truth) {
  const PerUnitBases bases = per_unit_bases(model);
  double acc = 0.0;
  std::size_t n = 0;
  for (const auto& [bus, v] : truth) {
    const double vb = bases.voltage[*model.bus_index(bus)];
    const Vector3c e = estimate.at(bus) - v;
    for (int p = 0; p < 3; ++p) {
      acc += std::norm(e[p]) / (vb * vb);
      ++n;
    }
  }
  return std::sqrt(acc / static_cast<double>(n));
}

}  // namespace upmu::diag
