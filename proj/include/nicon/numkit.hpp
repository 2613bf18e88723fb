#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include <Eigen/Dense>

namespace nicon {

using Vec = Eigen::VectorXd;
using Mat = Eigen::MatrixXd;

// Continuous-time vector field x -> dx/dt.
using VectorField = std::function<Vec(const Vec&)>;

/// Returns x^T Q x accumulated as a plain sum of products.
/// Throws ConfigError when Q is not square or does not match x.
double quad_form(const Mat& q, const Vec& x);

/// One classical fourth-order Runge-Kutta step of size `h`.
/// Throws SimulationError if any stage derivative is non-finite.
Vec rk4_step(const VectorField& deriv, const Vec& x, double h);

bool all_finite(const Vec& v);

/// Renders a vector as "(a, b, c)" with full precision, for diagnostics.
std::string to_string(const Vec& v);

// Counter-based generator: draw k of stream s under seed z is
// mix(key(z, s) + k * golden). Every value is a pure function of
// (seed, stream, index), which makes it identical on every platform and
// lets parallel workers own independent child streams.
class Rng {
 public:
  explicit Rng(std::uint64_t seed, std::uint64_t stream = 0);

  std::uint64_t next_u64();
  // Uniform in [0, 1) with 53 random bits.
  double uniform();
  double uniform(double lo, double hi);
  // Uniform integer in [0, n).
  std::uint64_t below(std::uint64_t n);

  // Independent generator for sub-stream `id`; does not advance this one.
  Rng child(std::uint64_t id) const;

  std::uint64_t seed() const { return seed_; }
  std::uint64_t stream() const { return stream_; }
  std::uint64_t counter() const { return counter_; }

 private:
  std::uint64_t seed_;
  std::uint64_t stream_;
  std::uint64_t key_;
  std::uint64_t counter_ = 0;
};

/// Each coordinate i.i.d. uniform in [lo_i, hi_i].
Vec sample_uniform_box(Rng& rng, const Vec& lo, const Vec& hi);

// In-place Fisher-Yates shuffle driven by `rng`.
template <typename T>
void shuffle(std::vector<T>& items, Rng& rng) {
  for (std::size_t i = items.size(); i > 1; --i) {
    const auto j = static_cast<std::size_t>(rng.below(i));
    std::swap(items[i - 1], items[j]);
  }
}

}  // namespace nicon
