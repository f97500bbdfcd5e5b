#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "core.hpp"
#include "filters.hpp"
#include "mjp.hpp"
#include "models.hpp"
#include "parallel.hpp"
#include "rng.hpp"

namespace ff {

enum class Rounding { kCeiling, kNearest };

enum class TuningMethod { kExactObs, kPartialObs };

struct TuningReport {
  std::size_t s_recommended = 0;
  std::size_t m_plus_recommended = 0;
  double v_rel_target = 1.0;
  double kappa = 10.0;
  std::vector<double> per_interval_p_estimates;
  TuningMethod method = TuningMethod::kExactObs;
  // (s, V_rel estimate) pairs visited by the partial-observation solver.
  std::vector<std::pair<std::size_t, double>> vrel_curve;
};

/// Total success needed for a relative variance of `v_rel` over T exact
/// observations: 2 + T / log(1 + v_rel), rounded up by default.
inline std::size_t success_target(std::size_t T, double v_rel, Rounding rounding = Rounding::kCeiling) {
  if (T < 1) throw ConfigError("success_target needs T >= 1");
  if (!(v_rel > 0.0)) throw ConfigError("target relative variance must be positive");
  const double x = 2.0 + static_cast<double>(T) / std::log1p(v_rel);
  // Absorb last-ulp noise so exact integers (e.g. v_rel = e - 1) are not bumped.
  const double snapped = std::abs(x - std::round(x)) < 1e-9 * x ? std::round(x) : x;
  return static_cast<std::size_t>(rounding == Rounding::kCeiling ? std::ceil(snapped) : std::round(snapped));
}

// E[P^2]/p^2 for the alive estimator (s - 1)/(M - 1): exact for s <= 3,
// bracketed for s >= 4.
struct SecondMoment {
  bool exact = false;
  double value = 0.0;  // meaningful when exact
  double lower = 0.0;
  double upper = 0.0;
};

inline SecondMoment relative_second_moment(std::size_t s, double p) {
  if (s < 2) throw ConfigError("relative second moment needs s >= 2");
  if (!(p > 0.0 && p <= 1.0)) throw ConfigError("p must lie in (0, 1]");
  SecondMoment out;
  if (p == 1.0) {
    out.exact = true;
    out.value = out.lower = out.upper = 1.0;
    return out;
  }
  const double q = 1.0 - p;
  if (s == 2) {
    out.exact = true;
    out.value = -std::log(p) / q;
    out.lower = out.upper = out.value;
  } else if (s == 3) {
    out.exact = true;
    out.value = 2.0 / q + 2.0 * p * std::log(p) / (q * q);
    out.lower = 1.0 + q / 3.0;
    out.upper = 2.0 - p;
  } else {
    const double sd = static_cast<double>(s);
    out.lower = 1.0 + (1.0 - (1.0 + 2.0 / (sd - 3.0)) * p) / (sd - 2.0);
    out.upper = 1.0 + q / (sd - 2.0);
  }
  return out;
}

/// Approximate relative variance for T exact observations: exp(T/(s-2)) - 1.
inline double vrel_exact_obs(std::size_t s, std::size_t T) {
  if (s < 3) throw ConfigError("vrel_exact_obs needs s >= 3");
  return std::exp(static_cast<double>(T) / (static_cast<double>(s) - 2.0)) - 1.0;
}

/// m_plus = ceil(kappa * s / p_min).
inline std::size_t mplus_rule(double s, double p_min, double kappa = 10.0) {
  if (!(p_min > 0.0)) throw ConfigError("p_min must be positive");
  const double x = kappa * s / p_min;
  const double snapped = std::abs(x - std::round(x)) < 1e-9 * x ? std::round(x) : x;
  return static_cast<std::size_t>(std::ceil(snapped));
}

/// Bernstein bound on P(sum_{j<=m_plus} W_j < s) when m_plus p = kappa s.
inline double bernstein_miss_bound(double kappa, double s, double w_star) {
  if (kappa < 1.75) throw NumericalError("Bernstein bound inapplicable: kappa < 7/4");
  return std::exp(-3.0 * (kappa - 1.75) * s / (8.0 * w_star));
}

/// Upper bound on E[P^2]/p^2 for the one-step filter with S = W in [0, w_star].
/// `miss_probability` is P(sum W < s) over m_plus draws; when absent the
/// Bernstein bound is substituted.
inline double capped_second_moment_bound(double s, double p, double w_star, std::size_t m_plus,
                                         std::optional<double> miss_probability = std::nullopt) {
  if (!(s > 2.0 * w_star)) throw ConfigError("capped bound needs s > 2 w_star");
  if (!(p > 0.0)) throw ConfigError("p must be positive");
  const double mp = static_cast<double>(m_plus) * p;
  const double miss = miss_probability ? *miss_probability : bernstein_miss_bound(mp / s, s, w_star);
  return 1.0 + w_star / (s - 2.0 * w_star) + (s / mp) * miss;
}

/// Mean per-interval alive-filter estimates (s - 1)/(M_t - 1) over replicates;
/// estimates P(y_t | y_{1:t-1}) at a fixed theta.
template <StateSpaceModel Model>
std::vector<double> estimate_transition_probabilities(const Model& model, const Params& theta,
                                                      const Dataset& data, std::size_t s,
                                                      std::size_t replicates, const RngStream& rng,
                                                      unsigned threads = 1,
                                                      std::uint64_t abort_guard = 1'000'000'000ULL) {
  std::vector<std::vector<double>> per_rep(replicates);
  parallel_for(replicates, threads, [&](std::size_t r) {
    RngStream sub = rng.derive(static_cast<std::uint32_t>(r));
    const auto est = alive_filter(model, theta, data, s, sub, abort_guard);
    for (const auto& rec : est.per_interval) per_rep[r].push_back(rec.p_hat());
  });
  std::vector<double> mean(data.size(), 0.0);
  for (const auto& v : per_rep)
    for (std::size_t t = 0; t < v.size(); ++t) mean[t] += v[t] / static_cast<double>(replicates);
  return mean;
}

struct PartialVrelOptions {
  ProposalKind proposal = ProposalKind::kForward;
  std::size_t m_plus = 10'000'000;
  unsigned threads = 1;
};

/// Replicate-based estimate of exp{T/(s-2)} E[prod Pbar_t^2] / E[prod Pbar_t]^2 - 1
/// where Pbar_t averages the CLE transition density p_t over the ancestor
/// population of interval t (weighted by particle weight, which is uniform
/// over the first s - 1 successes for indicator weights).
inline double vrel_partial_estimate(const MjpModel& model, const Params& theta, const Dataset& data,
                                    std::size_t s, std::size_t replicates, const RngStream& rng,
                                    const PartialVrelOptions& opts = {}) {
  if (replicates < 2) throw ConfigError("vrel_partial_estimate needs at least 2 replicates");
  if (s < 3) throw ConfigError("vrel_partial_estimate needs s >= 3");
  const auto& net = model.study().network;
  const std::size_t T = data.size();
  const std::size_t d = model.state_dim();
  FilterConfig config = FilterConfig::make(static_cast<double>(s), 0, opts.m_plus);

  auto log_p = [&](std::span<const std::int64_t> x_prev, std::size_t t) {
    const double t_prev = (t == 0) ? data.t0 : data.times[t - 1];
    const auto v = cle_log_transition_density(net, x_prev, theta, data.observations[t], data.obs_matrix,
                                              data.times[t] - t_prev);
    if (!v) throw NumericalError("CLE approximation unavailable at interval " + std::to_string(t + 1));
    return *v;
  };

  // Running mean that stays exact when all inputs are equal.
  auto running_mean = [](double& mean, double x, std::size_t n) { mean += (x - mean) / static_cast<double>(n); };

  std::vector<std::optional<double>> log_prod(replicates);
  parallel_for(replicates, opts.threads, [&](std::size_t r) {
    RngStream sub = rng.derive(static_cast<std::uint32_t>(r));
    RngStream init_rng = sub.derive(0);
    RngStream filter_rng = sub.derive(1);

    double acc = 0.0;
    // Interval 1: ancestors are s - 1 draws from the initial distribution.
    {
      double pbar = 0.0;
      std::vector<std::int64_t> x(d);
      for (std::size_t j = 1; j < s; ++j) {
        model.sample_initial(x, theta, init_rng);
        running_mean(pbar, std::exp(log_p(x, 0)), j);
      }
      acc += std::log(pbar);
    }
    std::size_t completed = 0;
    FrankenOptions fo;
    fo.observer = [&](std::size_t t, const ParticleBuffer& buf) {
      ++completed;
      if (t + 1 >= T) return;
      const std::size_t n = buf.usable();
      double mx = kNegInf;
      for (std::size_t j = 0; j < n; ++j) mx = std::max(mx, buf.log_weights[j]);
      if (mx == kNegInf) return;
      // Weighted mean; uniform weights reduce to a running mean over successes.
      double mean = 0.0;
      double wsum = 0.0;
      bool uniform = true;
      double first_w = -1.0;
      for (std::size_t j = 0; j < n; ++j) {
        const double w = std::exp(buf.log_weights[j] - mx);
        if (w == 0.0) continue;
        if (first_w < 0.0) first_w = w;
        if (w != first_w) uniform = false;
      }
      std::size_t cnt = 0;
      for (std::size_t j = 0; j < n; ++j) {
        const double w = std::exp(buf.log_weights[j] - mx);
        if (w == 0.0) continue;
        const double pj = std::exp(log_p(buf.state(j), t + 1));
        if (uniform) {
          running_mean(mean, pj, ++cnt);
        } else {
          wsum += w;
          mean += (pj - mean) * (w / wsum);
        }
      }
      acc += std::log(mean);
    };
    const auto est = frankenfilter_general(model, theta, data, config, opts.proposal, filter_rng, fo);
    if (completed == T && !est.is_zero()) log_prod[r] = acc;
  });

  std::vector<double> logs;
  for (const auto& v : log_prod)
    if (v) logs.push_back(*v);
  if (logs.size() < 2) throw EstimatorDead("too few surviving replicates for the relative variance");
  const double c = *std::max_element(logs.begin(), logs.end());
  double m1 = 0.0, m2 = 0.0;
  for (std::size_t i = 0; i < logs.size(); ++i) {
    const double e = std::exp(logs[i] - c);
    running_mean(m1, e, i + 1);
    running_mean(m2, e * e, i + 1);
  }
  const double Td = static_cast<double>(T);
  return std::exp(Td / (static_cast<double>(s) - 2.0)) * (m2 / (m1 * m1)) - 1.0;
}

// Evaluator for the integer solver: (s, replicate index) -> V_rel estimate.
using VrelEvaluator = std::function<double(std::size_t, std::uint32_t)>;

/// Smallest s in [s_lo, s_hi] whose smoothed evaluation is <= v_target, by
/// bisection. Each evaluation averages `smoothing` replicate calls.
inline std::size_t solve_s_for_vrel(const VrelEvaluator& evaluator, double v_target, std::size_t s_lo,
                                    std::size_t s_hi, std::size_t smoothing = 20,
                                    std::vector<std::pair<std::size_t, double>>* curve = nullptr) {
  if (s_lo > s_hi) throw ConfigError("empty search range for s");
  auto eval = [&](std::size_t s) {
    double mean = 0.0;
    for (std::size_t r = 0; r < smoothing; ++r)
      mean += (evaluator(s, static_cast<std::uint32_t>(r)) - mean) / static_cast<double>(r + 1);
    if (curve) curve->emplace_back(s, mean);
    return mean;
  };
  const double f_hi = eval(s_hi);
  if (!(f_hi <= v_target)) {
    const double f_lo = eval(s_lo);
    throw NumericalError("no s in [" + std::to_string(s_lo) + ", " + std::to_string(s_hi) +
                         "] reaches the target: V(s_lo) = " + std::to_string(f_lo) +
                         ", V(s_hi) = " + std::to_string(f_hi));
  }
  if (eval(s_lo) <= v_target) return s_lo;
  std::size_t lo = s_lo, hi = s_hi;  // f(lo) > target >= f(hi)
  while (hi - lo > 1) {
    const std::size_t mid = lo + (hi - lo) / 2;
    if (eval(mid) <= v_target) {
      hi = mid;
    } else {
      lo = mid;
    }
  }
  return hi;
}

inline VrelEvaluator deterministic_evaluator(std::function<double(std::size_t)> f) {
  return [f = std::move(f)](std::size_t s, std::uint32_t) { return f(s); };
}

}  // namespace ff
