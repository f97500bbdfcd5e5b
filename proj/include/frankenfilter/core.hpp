#pragma once

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <limits>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "rng.hpp"

namespace ff {

using State = std::vector<std::int64_t>;
using Params = std::vector<double>;
using IntMatrix = Eigen::Matrix<std::int64_t, Eigen::Dynamic, Eigen::Dynamic>;

inline constexpr double kNegInf = -std::numeric_limits<double>::infinity();
inline constexpr std::size_t kUnbounded = std::numeric_limits<std::size_t>::max();

// Invalid user-supplied configuration (bad thresholds, wrong dimensions).
class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// An estimator that produced only zero estimates where a value was required.
class EstimatorDead : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// A numerical method could not be applied (singular covariance, no bracket).
class NumericalError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// The alive filter exceeded its simulation budget.
class AbortGuardExceeded : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

enum class SuccessKind { kIndicatorMatch, kWeightEqualsSuccess, kCustom };

// Stopping-rule configuration shared by the Frankenfilter variants.
struct FilterConfig {
  double s_target = 2.0;
  std::size_t m_minus = 0;
  std::size_t m_plus = kUnbounded;
  SuccessKind success_kind = SuccessKind::kIndicatorMatch;
  // Essential supremum of a single success increment; only consulted when
  // m_minus == 0.
  double success_sup = 1.0;
  // Optional thresholds s_1..s_T; when empty every interval uses s_target.
  std::vector<double> per_interval_s;

  static FilterConfig make(double s_target, std::size_t m_minus, std::size_t m_plus,
                           SuccessKind kind = SuccessKind::kIndicatorMatch,
                           double success_sup = 1.0) {
    FilterConfig c;
    c.s_target = s_target;
    c.m_minus = m_minus;
    c.m_plus = m_plus;
    c.success_kind = kind;
    c.success_sup = success_sup;
    c.validate();
    return c;
  }

  double threshold(std::size_t interval) const {
    return per_interval_s.empty() ? s_target : per_interval_s.at(interval);
  }

  void validate() const {
    if (!(s_target >= 0.0) || !std::isfinite(s_target))
      throw ConfigError("s_target must be a finite nonnegative number");
    if (m_plus == 0) throw ConfigError("m_plus must be positive");
    if (!(m_minus < m_plus)) throw ConfigError("m_minus must be smaller than m_plus");
    auto check_threshold = [&](double s) {
      if (m_minus == 0 && !(s > success_sup))
        throw ConfigError("with m_minus = 0 the success threshold must exceed the supremum "
                          "of a single success increment");
    };
    check_threshold(s_target);
    for (double s : per_interval_s) check_threshold(s);
  }
};

// Diagnostics for one inter-observation interval.
struct IntervalRecord {
  double log_p_hat = kNegInf;
  std::size_t m = 0;
  int k = 0;
  bool visited = false;

  double p_hat() const { return std::exp(log_p_hat); }
};

struct LikelihoodEstimate {
  double log_p_hat = kNegInf;
  std::vector<IntervalRecord> per_interval;
  std::uint64_t total_simulations = 0;

  bool is_zero() const { return log_p_hat == kNegInf; }

  // Recomputes log_p_hat from the visited intervals.
  void finalise() {
    double acc = 0.0;
    for (const auto& r : per_interval) {
      if (!r.visited || r.log_p_hat == kNegInf) {
        acc = kNegInf;
        break;
      }
      acc += r.log_p_hat;
    }
    log_p_hat = acc;
  }
};

// Discretely observed data y_t = F' x_t at strictly increasing times.
struct Dataset {
  double t0 = 0.0;
  std::vector<double> times;
  std::vector<State> observations;
  IntMatrix obs_matrix;  // d_x by d_y
  bool complete = true;

  std::size_t size() const { return times.size(); }
  Eigen::Index state_dim() const { return obs_matrix.rows(); }
  Eigen::Index obs_dim() const { return obs_matrix.cols(); }

  void validate() const {
    if (times.empty()) throw ConfigError("dataset needs at least one observation");
    if (times.size() != observations.size())
      throw ConfigError("dataset times and observations differ in length");
    double prev = t0;
    for (double t : times) {
      if (!(t > prev)) throw ConfigError("observation times must be strictly increasing");
      prev = t;
    }
    for (const auto& y : observations)
      if (static_cast<Eigen::Index>(y.size()) != obs_dim())
        throw ConfigError("observation dimension does not match the observation matrix");
    const bool identity = obs_matrix.rows() == obs_matrix.cols() &&
                          obs_matrix == IntMatrix::Identity(obs_matrix.rows(), obs_matrix.cols());
    if (identity != complete)
      throw ConfigError("complete flag must be set iff the observation matrix is the identity");
  }

  static IntMatrix identity_obs(Eigen::Index d) { return IntMatrix::Identity(d, d); }
};

// Uniform estimator contract: (theta, data, stream) -> estimate.
using LikelihoodEstimator =
    std::function<LikelihoodEstimate(const Params&, const Dataset&, RngStream&)>;

// Numerically stable log(sum(exp(v))).
inline double log_sum_exp(const std::vector<double>& v, std::size_t n) {
  double mx = kNegInf;
  for (std::size_t i = 0; i < n; ++i) mx = std::max(mx, v[i]);
  if (mx == kNegInf) return kNegInf;
  if (mx == std::numeric_limits<double>::infinity()) return mx;
  double acc = 0.0;
  for (std::size_t i = 0; i < n; ++i) acc += std::exp(v[i] - mx);
  return mx + std::log(acc);
}

}  // namespace ff
