#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <numbers>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Dense>

#include "core.hpp"
#include "rng.hpp"

namespace ff {

// h(x, theta) written into `out` (length = number of reactions).
using HazardFn =
    std::function<void(std::span<const std::int64_t>, std::span<const double>, std::span<double>)>;

// Reaction network of a Markov jump process: X jumps by column i of the
// stoichiometry matrix at rate h_i(X, theta).
struct ReactionNetwork {
  std::string name;
  int num_species = 0;
  int num_reactions = 0;
  IntMatrix stoich;  // num_species by num_reactions
  HazardFn hazard;
  int theta_dim = 0;

  // Hazards clamped component-wise at zero.
  void hazards(std::span<const std::int64_t> x, std::span<const double> theta,
               std::span<double> out) const {
    hazard(x, theta, out);
    for (double& h : out)
      if (!(h > 0.0)) h = 0.0;
  }

  std::vector<double> hazards(std::span<const std::int64_t> x, std::span<const double> theta) const {
    std::vector<double> out(static_cast<std::size_t>(num_reactions));
    hazards(x, theta, out);
    return out;
  }

  void apply(std::span<std::int64_t> x, int reaction, std::int64_t times = 1) const {
    for (int s = 0; s < num_species; ++s) x[s] += stoich(s, reaction) * times;
  }
};

namespace detail {

inline std::vector<double>& hazard_scratch(std::size_t n) {
  thread_local std::vector<double> buf;
  if (buf.size() < n) buf.resize(n);
  return buf;
}

// Number of tau steps covering [0, dt]; rejects non-integer ratios.
inline int step_count(double dt, double tau) {
  if (!(tau > 0.0) || !(dt > 0.0)) throw ConfigError("tau and the interval length must be positive");
  const double ratio = dt / tau;
  const double n = std::round(ratio);
  if (n < 1.0 || std::abs(ratio - n) > 1e-9 * std::max(1.0, ratio))
    throw ConfigError("interval length must be an integer multiple of tau");
  return static_cast<int>(n);
}

inline double log_poisson_pmf(std::int64_t n, double lambda) {
  if (lambda <= 0.0) return n == 0 ? 0.0 : kNegInf;
  return static_cast<double>(n) * std::log(lambda) - lambda - std::lgamma(static_cast<double>(n) + 1.0);
}

}  // namespace detail

/// Advances `x` in place from t0 to t1 with Gillespie's direct method.
/// Returns the number of events fired.
inline std::int64_t gillespie_advance(const ReactionNetwork& net, std::span<std::int64_t> x,
                                      std::span<const double> theta, double t0, double t1,
                                      RngStream& rng) {
  const auto r = static_cast<std::size_t>(net.num_reactions);
  auto& h = detail::hazard_scratch(r);
  std::span<double> hs(h.data(), r);
  double t = t0;
  std::int64_t events = 0;
  for (;;) {
    net.hazards(x, theta, hs);
    double total = 0.0;
    for (double v : hs) total += v;
    if (!(total > 0.0)) break;
    t += rng.exponential(total);
    if (t > t1) break;
    double u = rng.uniform() * total;
    std::size_t i = 0;
    for (; i + 1 < r; ++i) {
      if (u < hs[i]) break;
      u -= hs[i];
    }
    // Guard against rounding pushing the pick onto a zero-rate channel.
    while (hs[i] <= 0.0 && i > 0) --i;
    net.apply(x, static_cast<int>(i));
    ++events;
  }
  return events;
}

inline State gillespie_simulate(const ReactionNetwork& net, State x0, const Params& theta,
                                double t0, double t1, RngStream& rng) {
  gillespie_advance(net, x0, theta, t0, t1, rng);
  return x0;
}

struct TauLeapResult {
  State end_state;
  IntMatrix event_counts;  // num_reactions by N
};

/// Advances `x` in place by N = dt / tau Poisson leaps. Hazards are frozen
/// within each leap and clamped at zero; states may go negative.
inline void tau_leap_advance(const ReactionNetwork& net, std::span<std::int64_t> x,
                             std::span<const double> theta, int steps, double tau, RngStream& rng,
                             IntMatrix* record = nullptr) {
  const auto r = static_cast<std::size_t>(net.num_reactions);
  auto& h = detail::hazard_scratch(r);
  std::span<double> hs(h.data(), r);
  for (int k = 0; k < steps; ++k) {
    net.hazards(x, theta, hs);
    for (std::size_t i = 0; i < r; ++i) {
      const std::int64_t dn = rng.poisson(hs[i] * tau);
      if (record) (*record)(static_cast<Eigen::Index>(i), k) = dn;
      if (dn != 0) net.apply(x, static_cast<int>(i), dn);
    }
  }
}

inline TauLeapResult tau_leap_simulate(const ReactionNetwork& net, State x0,
                                       const Params& theta, double t0, double t1,
                                       double tau, RngStream& rng) {
  const int steps = detail::step_count(t1 - t0, tau);
  TauLeapResult out;
  out.event_counts = IntMatrix::Zero(net.num_reactions, steps);
  tau_leap_advance(net, x0, theta, steps, tau, rng, &out.event_counts);
  out.end_state = std::move(x0);
  return out;
}

// Solves A z = b in place by Gaussian elimination with partial pivoting.
// Returns false if the smallest pivot magnitude falls below `pivot_tol`.
inline bool solve_small(Eigen::MatrixXd a, Eigen::VectorXd& b, double pivot_tol = 1e-12) {
  const Eigen::Index n = a.rows();
  for (Eigen::Index c = 0; c < n; ++c) {
    Eigen::Index p = c;
    for (Eigen::Index r = c + 1; r < n; ++r)
      if (std::abs(a(r, c)) > std::abs(a(p, c))) p = r;
    if (std::abs(a(p, c)) < pivot_tol) return false;
    if (p != c) {
      a.row(p).swap(a.row(c));
      std::swap(b(p), b(c));
    }
    for (Eigen::Index r = c + 1; r < n; ++r) {
      const double f = a(r, c) / a(c, c);
      a.row(r).tail(n - c) -= f * a.row(c).tail(n - c);
      b(r) -= f * b(c);
    }
  }
  for (Eigen::Index c = n - 1; c >= 0; --c) {
    double acc = b(c);
    for (Eigen::Index k = c + 1; k < n; ++k) acc -= a(c, k) * b(k);
    b(c) = acc / a(c, c);
  }
  return true;
}

struct ConditionedHazard {
  std::vector<double> rates;
  bool fallback = false;  // inner matrix singular; rates are the unconditioned hazard
};

/// Moment-matched hazard steering x_s toward F'x_t = y_t over the remaining
/// time: h + H S'F (F'S H S'F dt)^{-1} (y - F'x_s - F'S h dt), clamped at 0.
inline ConditionedHazard conditioned_hazard(const ReactionNetwork& net,
                                            std::span<const std::int64_t> x_s,
                                            std::span<const double> theta,
                                            std::span<const std::int64_t> y_t, const IntMatrix& F,
                                            double dt_remaining) {
  ConditionedHazard out;
  out.rates = net.hazards(x_s, theta);
  const Eigen::Index r = net.num_reactions;
  const Eigen::Index dx = net.num_species;
  const Eigen::Index dy = F.cols();

  const Eigen::MatrixXd S = net.stoich.cast<double>();
  const Eigen::MatrixXd Fd = F.cast<double>();
  const Eigen::Map<const Eigen::VectorXd> h(out.rates.data(), r);

  const Eigen::MatrixXd FtS = Fd.transpose() * S;  // dy by r
  Eigen::MatrixXd HStF = (FtS.transpose().array().colwise() * h.array()).matrix();  // r by dy
  const Eigen::MatrixXd inner = FtS * HStF * dt_remaining;

  Eigen::VectorXd xs(dx);
  for (Eigen::Index i = 0; i < dx; ++i) xs(i) = static_cast<double>(x_s[i]);
  Eigen::VectorXd resid(dy);
  for (Eigen::Index j = 0; j < dy; ++j) resid(j) = static_cast<double>(y_t[j]);
  resid -= Fd.transpose() * xs + FtS * h * dt_remaining;

  if (!solve_small(inner, resid)) {
    out.fallback = true;
    return out;
  }
  const Eigen::VectorXd adj = HStF * resid;
  for (Eigen::Index i = 0; i < r; ++i) out.rates[i] = std::max(0.0, out.rates[i] + adj(i));
  return out;
}

inline bool observation_matches(std::span<const std::int64_t> x, std::span<const std::int64_t> y,
                                const IntMatrix& F) {
  for (Eigen::Index j = 0; j < F.cols(); ++j) {
    std::int64_t acc = 0;
    for (Eigen::Index i = 0; i < F.rows(); ++i) acc += F(i, j) * x[i];
    if (acc != y[j]) return false;
  }
  return true;
}

struct BridgeResult {
  State end_state;
  double log_weight = 0.0;
  IntMatrix event_counts;  // num_reactions by N; empty unless requested
  int fallback_steps = 0;
};

/// Tau-leap bridge toward y_t driven by the conditioned hazard, refreshed at
/// every leap. The log weight is the endpoint indicator plus the tau-leap to
/// proposal Poisson log-likelihood ratio of the sampled increments.
inline void bridge_advance(const ReactionNetwork& net, std::span<std::int64_t> x,
                           std::span<const double> theta, std::span<const std::int64_t> y_t,
                           const IntMatrix& F, int steps, double tau, RngStream& rng,
                           double& log_weight, int& fallback_steps, IntMatrix* record = nullptr) {
  const auto r = static_cast<std::size_t>(net.num_reactions);
  log_weight = 0.0;
  fallback_steps = 0;
  for (int k = 0; k < steps; ++k) {
    const double remaining = tau * static_cast<double>(steps - k);
    const ConditionedHazard ch = conditioned_hazard(net, x, theta, y_t, F, remaining);
    if (ch.fallback) ++fallback_steps;
    const std::vector<double> h = net.hazards(x, theta);
    for (std::size_t i = 0; i < r; ++i) {
      const std::int64_t dn = rng.poisson(ch.rates[i] * tau);
      if (record) (*record)(static_cast<Eigen::Index>(i), k) = dn;
      log_weight += detail::log_poisson_pmf(dn, h[i] * tau) - detail::log_poisson_pmf(dn, ch.rates[i] * tau);
      if (dn != 0) net.apply(x, static_cast<int>(i), dn);
    }
  }
  if (!observation_matches(x, y_t, F)) log_weight = kNegInf;
}

inline BridgeResult bridge_simulate(const ReactionNetwork& net, State x_prev,
                                    const Params& theta,
                                    std::span<const std::int64_t> y_t, const IntMatrix& F,
                                    double dt, double tau, RngStream& rng) {
  const int steps = detail::step_count(dt, tau);
  BridgeResult out;
  out.event_counts = IntMatrix::Zero(net.num_reactions, steps);
  bridge_advance(net, x_prev, theta, y_t, F, steps, tau, rng, out.log_weight, out.fallback_steps,
                 &out.event_counts);
  out.end_state = std::move(x_prev);
  return out;
}

/// Gaussian approximation to log p(F'X_t = y | x_prev) under the chemical
/// Langevin equation. Empty when F' beta F dt is not positive definite.
inline std::optional<double> cle_log_transition_density(const ReactionNetwork& net,
                                                        std::span<const std::int64_t> x_prev,
                                                        std::span<const double> theta,
                                                        std::span<const std::int64_t> y_t,
                                                        const IntMatrix& F, double dt) {
  const std::vector<double> hv = net.hazards(x_prev, theta);
  const Eigen::Index dx = net.num_species;
  const Eigen::Index dy = F.cols();
  const Eigen::MatrixXd S = net.stoich.cast<double>();
  const Eigen::MatrixXd Fd = F.cast<double>();
  const Eigen::Map<const Eigen::VectorXd> h(hv.data(), net.num_reactions);

  Eigen::VectorXd x(dx);
  for (Eigen::Index i = 0; i < dx; ++i) x(i) = static_cast<double>(x_prev[i]);
  const Eigen::VectorXd mean = Fd.transpose() * (x + S * h * dt);
  const Eigen::MatrixXd FtS = Fd.transpose() * S;
  const Eigen::MatrixXd cov = FtS * h.asDiagonal() * FtS.transpose() * dt;

  Eigen::LLT<Eigen::MatrixXd> llt(cov);
  if (llt.info() != Eigen::Success) return std::nullopt;
  const Eigen::MatrixXd L = llt.matrixL();
  double log_det = 0.0;
  for (Eigen::Index i = 0; i < dy; ++i) {
    if (!(L(i, i) > 1e-12)) return std::nullopt;
    log_det += 2.0 * std::log(L(i, i));
  }
  Eigen::VectorXd d(dy);
  for (Eigen::Index j = 0; j < dy; ++j) d(j) = static_cast<double>(y_t[j]) - mean(j);
  const Eigen::VectorXd z = L.triangularView<Eigen::Lower>().solve(d);
  return -0.5 * (static_cast<double>(dy) * std::log(2.0 * std::numbers::pi) + log_det + z.squaredNorm());
}

inline std::optional<double> cle_transition_density(const ReactionNetwork& net,
                                                    std::span<const std::int64_t> x_prev,
                                                    std::span<const double> theta,
                                                    std::span<const std::int64_t> y_t,
                                                    const IntMatrix& F, double dt) {
  auto lp = cle_log_transition_density(net, x_prev, theta, y_t, F, dt);
  if (!lp) return std::nullopt;
  return std::exp(*lp);
}

}  // namespace ff
