#include "nicon/numkit.hpp"

#include <cmath>

#include <fmt/format.h>

#include "nicon/errors.hpp"

namespace nicon {
namespace {

constexpr std::uint64_t kGolden = 0x9E3779B97F4A7C15ULL;

// SplitMix64 finalizer.
std::uint64_t mix64(std::uint64_t z) {
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}

}  // namespace

double quad_form(const Mat& q, const Vec& x) {
  if (q.rows() != q.cols() || q.rows() != x.size()) {
    throw ConfigError(fmt::format("quad_form: Q is {}x{} but x has {} entries",
                                  q.rows(), q.cols(), x.size()));
  }
  double sum = 0.0;
  for (Eigen::Index i = 0; i < q.rows(); ++i) {
    for (Eigen::Index j = 0; j < q.cols(); ++j) {
      sum += x[i] * q(i, j) * x[j];
    }
  }
  return sum;
}

bool all_finite(const Vec& v) {
  for (Eigen::Index i = 0; i < v.size(); ++i) {
    if (!std::isfinite(v[i])) return false;
  }
  return true;
}

std::string to_string(const Vec& v) {
  std::string out = "(";
  for (Eigen::Index i = 0; i < v.size(); ++i) {
    if (i > 0) out += ", ";
    out += fmt::format("{:.17g}", v[i]);
  }
  return out + ")";
}

Vec rk4_step(const VectorField& deriv, const Vec& x, double h) {
  auto eval = [&](const Vec& at) {
    Vec k = deriv(at);
    if (!all_finite(k)) {
      throw SimulationError("non-finite derivative", to_string(at));
    }
    return k;
  };
  const Vec k1 = eval(x);
  const Vec k2 = eval(x + 0.5 * h * k1);
  const Vec k3 = eval(x + 0.5 * h * k2);
  const Vec k4 = eval(x + h * k3);
  return x + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
}

Rng::Rng(std::uint64_t seed, std::uint64_t stream)
    : seed_(seed),
      stream_(stream),
      key_(mix64(seed ^ mix64(stream + kGolden))) {}

std::uint64_t Rng::next_u64() {
  const std::uint64_t value = mix64(key_ + counter_ * kGolden);
  ++counter_;
  return value;
}

double Rng::uniform() {
  return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
}

double Rng::uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

std::uint64_t Rng::below(std::uint64_t n) {
  // Lemire's multiply-shift; the residual bias is below 2^-32 for n < 2^32.
  const unsigned __int128 product =
      static_cast<unsigned __int128>(next_u64()) * n;
  return static_cast<std::uint64_t>(product >> 64);
}

Rng Rng::child(std::uint64_t id) const {
  return Rng(seed_, mix64(stream_ * kGolden + id + 1));
}

Vec sample_uniform_box(Rng& rng, const Vec& lo, const Vec& hi) {
  if (lo.size() != hi.size()) {
    throw ConfigError("sample_uniform_box: bound dimension mismatch");
  }
  Vec x(lo.size());
  for (Eigen::Index i = 0; i < lo.size(); ++i) {
    if (lo[i] > hi[i]) {
      throw ConfigError(
          fmt::format("sample_uniform_box: lo[{}] = {} exceeds hi[{}] = {}", i,
                      lo[i], i, hi[i]));
    }
    x[i] = rng.uniform(lo[i], hi[i]);
  }
  return x;
}

}  // namespace nicon
