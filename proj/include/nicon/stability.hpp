#pragma once

#include "nicon/neuralnet.hpp"
#include "nicon/numkit.hpp"

namespace nicon {

// Quadratic Lyapunov function V(x) = x^T Q x plus the exponential decay
// constant alpha. `eps_grad` guards the division by |grad V|^2 near the
// origin; `rows_a` is the row count l of the factor A(x).
struct StabilityConfig {
  Mat q;
  double alpha = 0.5;
  double eps_grad = 1e-12;
  int rows_a = 0;

  int dim() const { return static_cast<int>(q.rows()); }
  // Throws ConfigError unless Q is symmetric positive definite, alpha > 0,
  // eps_grad > 0 and rows_a > 0.
  void validate() const;
  double lambda_min() const;
  double lambda_max() const;
};

/// Diagonal-Q configuration with l = n.
StabilityConfig make_stability_config(const Vec& q_diag, double alpha,
                                      double eps_grad = 1e-12, int rows_a = 0);

/// True when every pivot of an unpivoted Cholesky elimination is positive.
bool is_positive_definite(const Mat& q);

double lyapunov_value(const StabilityConfig& cfg, const Vec& x);
Vec lyapunov_grad(const StabilityConfig& cfg, const Vec& x);

// Network whose output vector packs A (l x n, row-major) followed by
// B (n x n, row-major).
struct StabilityHead {
  MlpParams net;
  int n = 0;
  int rows_a = 0;

  int output_dim() const { return rows_a * n + n * n; }
};

StabilityHead make_stability_head(const StabilityConfig& cfg,
                                  const std::vector<int>& hidden, Rng& rng);

struct PFactors {
  Mat a;  // l x n
  Mat b;  // n x n
};

PFactors split_head_output(const Vec& head_output, int n, int rows_a);

// P = A^T A + B - B^T.
Mat assemble_p(const Mat& a, const Mat& b);
Mat assemble_p(const StabilityHead& head, const Vec& x);

/// f_s(x) = -P grad V - relu(alpha V - W) / max(|grad V|^2, eps) * grad V with
/// W = grad V^T P grad V; f_s(0) = 0.
Vec stable_hypothesis_from_p(const StabilityConfig& cfg, const Mat& p,
                             const Vec& x);
Vec stable_hypothesis(const StabilityConfig& cfg, const StabilityHead& head,
                      const Vec& x);

/// Largest RK4 step that stays stable on the projection term of f_s. That
/// term is -k grad V with k <= alpha / (4 lambda_min), so its Jacobian has
/// eigenvalues up to alpha * cond(Q) / 2; RK4 is stable on the negative real
/// axis out to about 2.79, and 2.5 leaves some margin.
double stable_hypothesis_step_limit(const StabilityConfig& cfg);

/// dV/dt along f_s, i.e. grad V(x)^T f_s(x). Throws DomainError at x = 0.
double decay_rate(const StabilityConfig& cfg, const StabilityHead& head,
                  const Vec& x);

/// Gradient of a scalar loss with respect to the raw head output, given the
/// loss gradient `upstream` with respect to f_s(x). The relu is treated as
/// inactive on its switching surface.
Vec stable_hypothesis_backward(const StabilityConfig& cfg, const Vec& head_output,
                               const Vec& x, const Vec& upstream);

}  // namespace nicon
