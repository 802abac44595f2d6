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

#include "upmu/diagnostics.hpp"
#include "upmu/error.hpp"

namespace upmu::diag {

Eigen::VectorXd KpcaModel::standardized(const Eigen::VectorXd& x) const {
  if (x.size() != mean_.size()) throw Error(ErrorCode::InvalidArgument, "feature dimension differs from training");
  return (x - mean_).cwiseQuotient(scale_);
}

double KpcaModel::kernel(const Eigen::VectorXd& a, const Eigen::VectorXd& b) const {
  if (opt_.kernel == KernelType::Linear) return a.dot(b);
  return std::exp(-(a - b).squaredNorm() / (2.0 * width_ * width_));
}

KpcaModel KpcaModel::fit_unscored(const std::vector<Eigen::VectorXd>& train, const KpcaOptions& options) {
  const auto n = static_cast<Eigen::Index>(train.size());
  if (n < 50) throw Error(ErrorCode::InsufficientSamples, "kPCA needs at least 50 training windows");
  if (options.n_components < 1) throw Error(ErrorCode::InvalidArgument, "need at least one component");
  const Eigen::Index d = train[0].size();

  KpcaModel m;
  m.opt_ = options;
  m.x_.resize(n, d);
  for (Eigen::Index i = 0; i < n; ++i) {
    if (train[static_cast<std::size_t>(i)].size() != d) {
      throw Error(ErrorCode::InvalidArgument, "training windows differ in length");
    }
    m.x_.row(i) = train[static_cast<std::size_t>(i)].transpose();
  }
  m.mean_ = Eigen::VectorXd::Zero(d);
  m.scale_ = Eigen::VectorXd::Ones(d);
  if (options.standardize) {
    m.mean_ = m.x_.colwise().mean().transpose();
    for (Eigen::Index j = 0; j < d; ++j) {
      const double sd = std::sqrt((m.x_.col(j).array() - m.mean_(j)).square().sum() / static_cast<double>(n - 1));
      m.scale_(j) = sd > 0.0 ? sd : 1.0;
    }
    for (Eigen::Index i = 0; i < n; ++i) m.x_.row(i) = m.standardized(m.x_.row(i).transpose()).transpose();
  }

  if (options.kernel == KernelType::Gaussian) {
    if (options.kernel_width > 0.0) {
      m.width_ = options.kernel_width;
    } else {
      std::vector<double> dist;
      dist.reserve(static_cast<std::size_t>(n * (n - 1) / 2));
      for (Eigen::Index i = 0; i < n; ++i)
        for (Eigen::Index j = i + 1; j < n; ++j) dist.push_back((m.x_.row(i) - m.x_.row(j)).norm());
      m.width_ = quantile(dist, 0.5);
      if (!(m.width_ > 0.0)) throw Error(ErrorCode::DegenerateTraining, "training windows are all identical");
    }
  }

  Eigen::MatrixXd k(n, n);
  for (Eigen::Index i = 0; i < n; ++i)
    for (Eigen::Index j = i; j < n; ++j) k(i, j) = k(j, i) = m.kernel(m.x_.row(i), m.x_.row(j));
  m.k_col_ = k.colwise().mean().transpose();
  m.k_all_ = k.mean();
  Eigen::MatrixXd kc = k;
  kc.rowwise() -= m.k_col_.transpose();
  kc.colwise() -= m.k_col_;
  kc.array() += m.k_all_;

  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(kc);
  const Eigen::VectorXd& lam = eig.eigenvalues();  // ascending
  const double lmax = lam(n - 1);
  const double scale = std::max(k.diagonal().mean(), 1e-300);
  if (!(lmax > 1e-10 * scale)) throw Error(ErrorCode::DegenerateTraining, "centered kernel matrix is zero");
  std::vector<Eigen::Index> keep;
  for (Eigen::Index c = n - 1; c >= 0 && static_cast<int>(keep.size()) < options.n_components; --c) {
    if (lam(c) > 1e-10 * lmax) keep.push_back(c);
  }
  m.alpha_.resize(n, static_cast<Eigen::Index>(keep.size()));
  for (std::size_t c = 0; c < keep.size(); ++c) {
    m.alpha_.col(static_cast<Eigen::Index>(c)) = eig.eigenvectors().col(keep[c]) / std::sqrt(lam(keep[c]));
  }

  return m;
}

KpcaModel KpcaModel::fit(const std::vector<Eigen::VectorXd>& train, const KpcaOptions& options) {
  KpcaModel m = fit_unscored(train, options);
  const std::size_t n = train.size();
  const auto folds = static_cast<std::size_t>(std::max(options.calibration_folds, 1));
  if (folds < 2 || n - (n + folds - 1) / folds < 50) {
    for (const auto& x : train) m.train_scores_.push_back(m.score(x));
  } else {
    for (std::size_t f = 0; f < folds; ++f) {
      const std::size_t lo = f * n / folds, hi = (f + 1) * n / folds;
      std::vector<Eigen::VectorXd> rest;
      rest.reserve(n - (hi - lo));
      for (std::size_t i = 0; i < n; ++i)
        if (i < lo || i >= hi) rest.push_back(train[i]);
      const KpcaModel held = fit_unscored(rest, options);
      for (std::size_t i = lo; i < hi; ++i) m.train_scores_.push_back(held.score(train[i]));
    }
  }
  m.threshold_ = quantile(m.train_scores_, options.threshold_quantile);
  return m;
}

double KpcaModel::score(const Eigen::VectorXd& raw) const {
  const Eigen::VectorXd x = standardized(raw);
  const Eigen::Index n = x_.rows();
  Eigen::VectorXd kx(n);
  for (Eigen::Index i = 0; i < n; ++i) kx(i) = kernel(x, x_.row(i).transpose());
  const double kx_mean = kx.mean();
  const Eigen::VectorXd kxc = kx - k_col_ - Eigen::VectorXd::Constant(n, kx_mean - k_all_);
  const double self = kernel(x, x) - 2.0 * kx_mean + k_all_;
  const Eigen::VectorXd proj = alpha_.transpose() * kxc;
  return std::max(0.0, self - proj.squaredNorm());
}

std::vector<EventFlag> detect_events_kpca(const std::vector<FeatureWindow>& train, const std::vector<FeatureWindow>& test,
                                          const KpcaOptions& options) {
  std::vector<Eigen::VectorXd> xs;
  for (const auto& w : train) xs.push_back(w.x);
  const KpcaModel model = KpcaModel::fit(xs, options);
  std::vector<EventFlag> out;
  for (const auto& w : test) {
    const double s = model.score(w.x);
    out.push_back({w.start_ns, w.end_ns, s, s > model.threshold()});
  }
  return out;
}

std::vector<FeatureWindow> build_feature_windows(const std::vector<std::vector<Frame>>& meters,
                                                 const std::vector<double>& voltage_base, std::size_t window_frames) {
  if (meters.empty() || voltage_base.size() != meters.size()) {
    throw Error(ErrorCode::InvalidArgument, "need one voltage base per meter stream");
  }
  if (window_frames == 0) throw Error(ErrorCode::InvalidArgument, "window length must be positive");
  const auto aligned = align_frames(meters);
  std::map<std::int64_t, std::size_t> row_of;
  for (std::size_t i = 0; i < aligned[0].size(); ++i) row_of[aligned[0][i].timestamp_ns] = i;

  const std::size_t nm = meters.size();
  const std::size_t per_frame = 3 * nm + 3 * (nm - 1);
  std::vector<FeatureWindow> out;
  const auto& ref = meters[0];
  for (std::size_t s = 0; s + window_frames <= ref.size(); s += window_frames) {
    std::vector<std::size_t> rows;
    for (std::size_t k = s; k < s + window_frames; ++k) {
      auto it = row_of.find(ref[k].timestamp_ns);
      if (it == row_of.end()) break;
      rows.push_back(it->second);
    }
    if (rows.size() != window_frames) continue;
    FeatureWindow w;
    w.start_ns = ref[s].timestamp_ns;
    w.end_ns = ref[s + window_frames - 1].timestamp_ns + 1;
    w.x.resize(static_cast<Eigen::Index>(per_frame * window_frames));
    Eigen::Index c = 0;
    for (std::size_t r : rows) {
      for (std::size_t m = 0; m < nm; ++m)
        for (int p = 0; p < 3; ++p) w.x(c++) = aligned[m][r].voltage[p].magnitude() / voltage_base[m];
      for (std::size_t m = 1; m < nm; ++m)
        for (int p = 0; p < 3; ++p) w.x(c++) = angle_diff(aligned[m][r].voltage[p].angle(), aligned[0][r].voltage[p].angle());
    }
    out.push_back(std::move(w));
  }
  return out;
}

}  // namespace upmu::diag
