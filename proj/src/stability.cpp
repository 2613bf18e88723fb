#include "nicon/stability.hpp"

#include <algorithm>
#include <cmath>

#include <fmt/format.h>

#include "nicon/errors.hpp"

namespace nicon {
namespace {

bool is_zero(const Vec& x) { return (x.array() == 0.0).all(); }

}  // namespace

bool is_positive_definite(const Mat& q) {
  if (q.rows() != q.cols() || q.rows() == 0) return false;
  const Eigen::Index n = q.rows();
  Mat l = Mat::Zero(n, n);
  for (Eigen::Index j = 0; j < n; ++j) {
    double pivot = q(j, j);
    for (Eigen::Index k = 0; k < j; ++k) pivot -= l(j, k) * l(j, k);
    if (!(pivot > 0.0)) return false;
    l(j, j) = std::sqrt(pivot);
    for (Eigen::Index i = j + 1; i < n; ++i) {
      double s = q(i, j);
      for (Eigen::Index k = 0; k < j; ++k) s -= l(i, k) * l(j, k);
      l(i, j) = s / l(j, j);
    }
  }
  return true;
}

void StabilityConfig::validate() const {
  if (q.rows() == 0 || q.rows() != q.cols()) {
    throw ConfigError("Q must be a non-empty square matrix", "stability.q");
  }
  if (!q.allFinite() || (q - q.transpose()).cwiseAbs().maxCoeff() > 1e-12) {
    throw ConfigError("Q must be finite and symmetric", "stability.q");
  }
  if (!is_positive_definite(q)) {
    throw ConfigError("Q must be positive definite", "stability.q");
  }
  if (!(alpha > 0.0) || !std::isfinite(alpha)) {
    throw ConfigError("alpha must be positive", "stability.alpha");
  }
  if (!(eps_grad > 0.0)) {
    throw ConfigError("eps_grad must be positive", "stability.eps_grad");
  }
  if (rows_a <= 0) throw ConfigError("l must be positive", "stability.l");
}

double StabilityConfig::lambda_min() const {
  Eigen::SelfAdjointEigenSolver<Mat> solver(q, Eigen::EigenvaluesOnly);
  return solver.eigenvalues().minCoeff();
}

double StabilityConfig::lambda_max() const {
  Eigen::SelfAdjointEigenSolver<Mat> solver(q, Eigen::EigenvaluesOnly);
  return solver.eigenvalues().maxCoeff();
}

StabilityConfig make_stability_config(const Vec& q_diag, double alpha,
                                      double eps_grad, int rows_a) {
  StabilityConfig cfg;
  cfg.q = q_diag.asDiagonal();
  cfg.alpha = alpha;
  cfg.eps_grad = eps_grad;
  cfg.rows_a = rows_a > 0 ? rows_a : static_cast<int>(q_diag.size());
  cfg.validate();
  return cfg;
}

double lyapunov_value(const StabilityConfig& cfg, const Vec& x) {
  return quad_form(cfg.q, x);
}

Vec lyapunov_grad(const StabilityConfig& cfg, const Vec& x) {
  if (x.size() != cfg.dim()) {
    throw ConfigError(fmt::format("state has {} entries, Q is {}x{}", x.size(),
                                  cfg.dim(), cfg.dim()));
  }
  return 2.0 * (cfg.q * x);
}

StabilityHead make_stability_head(const StabilityConfig& cfg,
                                  const std::vector<int>& hidden, Rng& rng) {
  StabilityHead head;
  head.n = cfg.dim();
  head.rows_a = cfg.rows_a;
  head.net = make_mlp(head.n, hidden, head.output_dim(), rng);
  return head;
}

PFactors split_head_output(const Vec& head_output, int n, int rows_a) {
  if (head_output.size() != rows_a * n + n * n) {
    throw ConfigError(fmt::format("stability head output has {} entries, expected {}",
                                  head_output.size(), rows_a * n + n * n));
  }
  PFactors f{Mat(rows_a, n), Mat(n, n)};
  for (int r = 0; r < rows_a; ++r) {
    for (int c = 0; c < n; ++c) f.a(r, c) = head_output[r * n + c];
  }
  const int offset = rows_a * n;
  for (int r = 0; r < n; ++r) {
    for (int c = 0; c < n; ++c) f.b(r, c) = head_output[offset + r * n + c];
  }
  return f;
}

Mat assemble_p(const Mat& a, const Mat& b) {
  return a.transpose() * a + b - b.transpose();
}

Mat assemble_p(const StabilityHead& head, const Vec& x) {
  const Vec y = forward(head.net, x);
  const PFactors f = split_head_output(y, head.n, head.rows_a);
  return assemble_p(f.a, f.b);
}

Vec stable_hypothesis_from_p(const StabilityConfig& cfg, const Mat& p,
                             const Vec& x) {
  if (is_zero(x)) return Vec::Zero(x.size());
  const Vec grad = lyapunov_grad(cfg, x);
  const double v = lyapunov_value(cfg, x);
  const double w = grad.dot(p * grad);
  const double correction = std::max(0.0, -w + cfg.alpha * v) /
                            std::max(grad.squaredNorm(), cfg.eps_grad);
  return -(p * grad) - correction * grad;
}

Vec stable_hypothesis(const StabilityConfig& cfg, const StabilityHead& head,
                      const Vec& x) {
  return stable_hypothesis_from_p(cfg, assemble_p(head, x), x);
}

double stable_hypothesis_step_limit(const StabilityConfig& cfg) {
  const double stiffness = 0.5 * cfg.alpha * cfg.lambda_max() / cfg.lambda_min();
  return 2.5 / stiffness;
}

double decay_rate(const StabilityConfig& cfg, const StabilityHead& head,
                  const Vec& x) {
  if (is_zero(x)) {
    throw DomainError("decay rate is undefined at the equilibrium");
  }
  return lyapunov_grad(cfg, x).dot(stable_hypothesis(cfg, head, x));
}

Vec stable_hypothesis_backward(const StabilityConfig& cfg, const Vec& head_output,
                               const Vec& x, const Vec& upstream) {
  const int n = cfg.dim();
  const int l = cfg.rows_a;
  Vec d_out = Vec::Zero(head_output.size());
  if (is_zero(x)) return d_out;

  const PFactors f = split_head_output(head_output, n, l);
  const Mat p = assemble_p(f.a, f.b);
  const Vec grad = lyapunov_grad(cfg, x);
  const double v = lyapunov_value(cfg, x);
  const double w = grad.dot(p * grad);

  // f_s = -P g - r/d g with r = relu(alpha V - W), d = max(|g|^2, eps).
  Mat d_p = -upstream * grad.transpose();
  if (-w + cfg.alpha * v > 0.0) {
    const double d = std::max(grad.squaredNorm(), cfg.eps_grad);
    // dL/dr = -(upstream . g) / d and dr/dW = -1.
    const double d_w = upstream.dot(grad) / d;
    d_p += d_w * grad * grad.transpose();
  }
  // P = A^T A + B - B^T.
  const Mat d_a = f.a * (d_p + d_p.transpose());
  const Mat d_b = d_p - d_p.transpose();
  for (int r = 0; r < l; ++r) {
    for (int c = 0; c < n; ++c) d_out[r * n + c] = d_a(r, c);
  }
  const int offset = l * n;
  for (int r = 0; r < n; ++r) {
    for (int c = 0; c < n; ++c) d_out[offset + r * n + c] = d_b(r, c);
  }
  return d_out;
}

}  // namespace nicon
