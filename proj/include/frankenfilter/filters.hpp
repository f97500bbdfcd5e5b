#pragma once

#include <algorithm>
#include <cmath>
#include <concepts>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "core.hpp"
#include "rng.hpp"

namespace ff {

enum class ProposalKind { kForward, kBridge };

// Outcome of propagating one particle over an interval.
struct StepOutcome {
  double log_weight = kNegInf;  // log of f(y_t|x_t) p/q
  bool matched = false;         // F'x_t == y_t
};

// A hidden Markov model the filters can drive. `propose` receives the
// ancestor state in `x`, overwrites it with the state at the end of interval
// `t` (0-based), and reports the particle weight.
template <class M>
concept StateSpaceModel = requires(const M& m, std::span<std::int64_t> x, const Params& theta,
                                   const Dataset& data, std::size_t t, ProposalKind q,
                                   RngStream& rng) {
  { m.state_dim() } -> std::convertible_to<std::size_t>;
  m.sample_initial(x, theta, rng);
  { m.propose(x, theta, data, t, q, rng) } -> std::same_as<StepOutcome>;
};

// Particles drawn within one interval, stored flat.
struct ParticleBuffer {
  std::size_t dim = 0;
  std::vector<std::int64_t> states;
  std::vector<double> log_weights;
  std::vector<double> successes;
  std::size_t m = 0;
  int k = 0;

  void reset(std::size_t d) {
    dim = d;
    states.clear();
    log_weights.clear();
    successes.clear();
    m = 0;
    k = 0;
  }
  std::span<std::int64_t> state(std::size_t j) { return {states.data() + j * dim, dim}; }
  std::span<const std::int64_t> state(std::size_t j) const { return {states.data() + j * dim, dim}; }

  // Particles eligible as ancestors: all m unless the threshold was crossed
  // mid-loop, in which case the last draw is excluded.
  std::size_t usable() const { return k == 1 ? m - 1 : m; }
};

// Result of a single-observation estimator (Algorithms 2 and 3 style).
struct OneStepResult {
  double p_hat = 0.0;
  std::size_t m = 0;
  int k = 0;
};

namespace detail {

// Categorical sampler over exp(log_w[0..n)) using a max-shifted cumulative sum.
class WeightedPicker {
 public:
  // Returns false when the total weight is zero.
  bool prepare(std::span<const double> log_w, std::size_t n) {
    cum_.resize(n);
    double mx = kNegInf;
    for (std::size_t i = 0; i < n; ++i) mx = std::max(mx, log_w[i]);
    if (n == 0 || mx == kNegInf) return false;
    double acc = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      acc += std::exp(log_w[i] - mx);
      cum_[i] = acc;
    }
    return acc > 0.0;
  }
  std::size_t pick(RngStream& rng) const {
    const double u = rng.uniform() * cum_.back();
    auto it = std::upper_bound(cum_.begin(), cum_.end(), u);
    if (it == cum_.end()) --it;
    auto idx = static_cast<std::size_t>(it - cum_.begin());
    while (idx > 0 && cum_[idx] == cum_[idx - 1]) --idx;  // skip zero-weight entries
    return idx;
  }

 private:
  std::vector<double> cum_;
};

inline double log_mean_weight(std::span<const double> log_w, std::size_t n) {
  if (n == 0) return kNegInf;
  double mx = kNegInf;
  for (std::size_t i = 0; i < n; ++i) mx = std::max(mx, log_w[i]);
  if (mx == kNegInf) return kNegInf;
  double acc = 0.0;
  for (std::size_t i = 0; i < n; ++i) acc += std::exp(log_w[i] - mx);
  return mx + std::log(acc) - std::log(static_cast<double>(n));
}

}  // namespace detail

/// Alive filter with a hard threshold (biased baseline). Returns a zero
/// estimate whenever m reaches m_plus, including when the final success
/// arrives exactly at m_plus.
template <StateSpaceModel Model>
LikelihoodEstimate alive_hard_threshold(const Model& model, const Params& theta, const Dataset& data,
                                        std::size_t s_target, std::size_t m_plus, RngStream& rng);

namespace detail {

template <StateSpaceModel Model>
LikelihoodEstimate alive_impl(const Model& model, const Params& theta, const Dataset& data,
                              std::size_t s_target, std::size_t m_plus, std::uint64_t abort_guard,
                              RngStream& rng) {
  if (s_target < 2) throw ConfigError("alive filter needs s_target >= 2");
  const std::size_t T = data.size();
  const std::size_t d = model.state_dim();
  LikelihoodEstimate est;
  est.per_interval.resize(T);
  std::vector<std::int64_t> prev, cur;
  std::vector<std::int64_t> x(d);
  for (std::size_t t = 0; t < T; ++t) {
    cur.clear();
    std::size_t m = 0, successes = 0;
    do {
      ++m;
      if (t == 0) {
        model.sample_initial(x, theta, rng);
      } else {
        const auto a = static_cast<std::size_t>(rng.uniform_int(0, static_cast<std::int64_t>(s_target) - 2));
        std::copy_n(prev.begin() + static_cast<std::ptrdiff_t>(a * d), d, x.begin());
      }
      const StepOutcome out = model.propose(x, theta, data, t, ProposalKind::kForward, rng);
      if (out.matched) {
        ++successes;
        cur.insert(cur.end(), x.begin(), x.end());
      }
      if (++est.total_simulations > abort_guard)
        throw AbortGuardExceeded("alive filter exceeded its simulation budget");
    } while (m < m_plus && successes < s_target);

    auto& rec = est.per_interval[t];
    rec.visited = true;
    rec.m = m;
    if (m == m_plus) {
      rec.k = 2;
      rec.log_p_hat = kNegInf;
      est.log_p_hat = kNegInf;
      return est;
    }
    rec.k = 1;
    rec.log_p_hat = std::log(static_cast<double>(s_target - 1)) - std::log(static_cast<double>(m - 1));
    std::swap(prev, cur);
  }
  est.finalise();
  return est;
}

}  // namespace detail

template <StateSpaceModel Model>
LikelihoodEstimate alive_hard_threshold(const Model& model, const Params& theta, const Dataset& data,
                                        std::size_t s_target, std::size_t m_plus, RngStream& rng) {
  return detail::alive_impl(model, theta, data, s_target, m_plus, kUnbounded, rng);
}

/// Alive filter without an upper bound on simulations: per-interval estimate
/// (s-1)/(M_t-1). Throws AbortGuardExceeded once `abort_guard` total
/// simulations have been spent rather than returning zero.
template <StateSpaceModel Model>
LikelihoodEstimate alive_filter(const Model& model, const Params& theta, const Dataset& data,
                                std::size_t s_target, RngStream& rng,
                                std::uint64_t abort_guard = 1'000'000'000ULL) {
  return detail::alive_impl(model, theta, data, s_target, kUnbounded, abort_guard, rng);
}

/// Basic Frankenfilter for binary weights. The returned estimator branch is
/// chosen by whether the success count reached s_target, not by m == m_plus.
template <class Sampler>
  requires std::invocable<Sampler&, RngStream&>
OneStepResult frankenfilter_basic(Sampler&& trial, std::size_t s_target, std::size_t m_plus,
                                  RngStream& rng) {
  if (s_target < 2) throw ConfigError("basic Frankenfilter needs s_target >= 2");
  if (m_plus < 1) throw ConfigError("m_plus must be positive");
  std::size_t m = 0;
  double sum = 0.0, sum_before_last = 0.0;
  do {
    ++m;
    const double w = static_cast<double>(trial(rng));
    sum_before_last = sum;
    sum += w;
  } while (m < m_plus && sum < static_cast<double>(s_target));
  OneStepResult r;
  r.m = m;
  if (sum < static_cast<double>(s_target)) {
    r.k = 2;
    r.p_hat = sum / static_cast<double>(m);
  } else {
    r.k = 1;
    r.p_hat = sum_before_last / static_cast<double>(m - 1);
  }
  return r;
}

/// General one-step Frankenfilter. `trial` returns a (weight, success) pair.
template <class Sampler>
  requires std::invocable<Sampler&, RngStream&>
OneStepResult frankenfilter_one_step(Sampler&& trial, const FilterConfig& config, RngStream& rng) {
  config.validate();
  const double s = config.s_target;
  std::size_t m = 0;
  double sum_w = 0.0, sum_w_before_last = 0.0, sum_s = 0.0;
  auto draw = [&] {
    const auto [w, succ] = trial(rng);
    ++m;
    sum_w_before_last = sum_w;
    sum_w += w;
    sum_s += succ;
  };
  for (std::size_t j = 0; j < config.m_minus; ++j) draw();
  while (m < config.m_plus && sum_s < s) draw();
  OneStepResult r;
  r.m = m;
  if (m == config.m_minus || sum_s < s) {
    r.k = (m == config.m_minus) ? 0 : 2;
    r.p_hat = sum_w / static_cast<double>(m);
  } else {
    r.k = 1;
    r.p_hat = sum_w_before_last / static_cast<double>(m - 1);
  }
  return r;
}

/// Ancestor sampling over the previous interval's particles. Returns a
/// 0-based index; for k == 1 the last particle is excluded.
inline std::size_t ancestor_sample(std::size_t m, int k, std::span<const double> weights,
                                   RngStream& rng) {
  const std::size_t n = (k == 1) ? m - 1 : m;
  if (m == 0 || n == 0 || weights.size() < m) throw NumericalError("ancestor sampling on empty set");
  double total = 0.0;
  for (std::size_t i = 0; i < n; ++i) total += weights[i];
  if (!(total > 0.0)) throw NumericalError("ancestor sampling with zero total weight");
  double u = rng.uniform() * total;
  for (std::size_t i = 0; i < n; ++i) {
    if (u < weights[i]) return i;
    u -= weights[i];
  }
  for (std::size_t i = n; i-- > 0;)
    if (weights[i] > 0.0) return i;
  return n - 1;
}

// Called after each completed interval with the particle population.
using IntervalObserver = std::function<void(std::size_t t, const ParticleBuffer&)>;

// Custom success measure: (log weight, matched) -> success increment.
using SuccessFn = std::function<double(double, bool)>;

struct FrankenOptions {
  SuccessFn custom_success;     // required when success_kind == kCustom
  IntervalObserver observer;    // optional
};

/// General Frankenfilter over T intervals with ancestor resampling, lower and
/// upper simulation bounds, and an arbitrary success measure.
template <StateSpaceModel Model>
LikelihoodEstimate frankenfilter_general(const Model& model, const Params& theta,
                                         const Dataset& data, const FilterConfig& config,
                                         ProposalKind proposal, RngStream& rng,
                                         const FrankenOptions& opts = {}) {
  if (config.success_kind == SuccessKind::kCustom && !opts.custom_success)
    throw ConfigError("custom success measure selected but not supplied");
  if (!config.per_interval_s.empty() && config.per_interval_s.size() != data.size())
    throw ConfigError("per-interval thresholds must match the number of observations");
  const std::size_t T = data.size();
  const std::size_t d = model.state_dim();
  LikelihoodEstimate est;
  est.per_interval.resize(T);

  ParticleBuffer prev, cur;
  detail::WeightedPicker picker;
  std::vector<std::int64_t> x(d);

  auto success_of = [&](const StepOutcome& o) -> double {
    switch (config.success_kind) {
      case SuccessKind::kIndicatorMatch: return o.matched ? 1.0 : 0.0;
      case SuccessKind::kWeightEqualsSuccess: return std::exp(o.log_weight);
      case SuccessKind::kCustom: return opts.custom_success(o.log_weight, o.matched);
    }
    return 0.0;
  };

  for (std::size_t t = 0; t < T; ++t) {
    const double s_t = config.threshold(t);
    cur.reset(d);
    if (t > 0 && !picker.prepare(prev.log_weights, prev.usable())) {
      est.log_p_hat = kNegInf;
      return est;
    }
    double sum_s = 0.0;
    auto draw = [&] {
      if (t == 0) {
        model.sample_initial(x, theta, rng);
      } else {
        const std::size_t a = picker.pick(rng);
        const auto src = prev.state(a);
        std::copy(src.begin(), src.end(), x.begin());
      }
      const StepOutcome o = model.propose(x, theta, data, t, proposal, rng);
      cur.states.insert(cur.states.end(), x.begin(), x.end());
      cur.log_weights.push_back(o.log_weight);
      const double inc = success_of(o);
      cur.successes.push_back(inc);
      sum_s += inc;
      ++cur.m;
    };
    for (std::size_t j = 0; j < config.m_minus; ++j) draw();
    while (cur.m < config.m_plus && sum_s < s_t) draw();

    if (cur.m == config.m_minus) {
      cur.k = 0;
    } else if (sum_s < s_t) {
      cur.k = 2;
    } else {
      cur.k = 1;
    }
    auto& rec = est.per_interval[t];
    rec.visited = true;
    rec.m = cur.m;
    rec.k = cur.k;
    rec.log_p_hat = detail::log_mean_weight(cur.log_weights, cur.usable());
    est.total_simulations += cur.m;
    if (opts.observer) opts.observer(t, cur);
    if (rec.log_p_hat == kNegInf) {
      est.log_p_hat = kNegInf;
      return est;
    }
    std::swap(prev, cur);
  }
  est.finalise();
  return est;
}

/// Bootstrap particle filter with a fixed particle count and multinomial
/// resampling.
template <StateSpaceModel Model>
LikelihoodEstimate bootstrap_pf(const Model& model, const Params& theta, const Dataset& data,
                                std::size_t n_particles, ProposalKind proposal, RngStream& rng) {
  if (n_particles < 1) throw ConfigError("bootstrap filter needs at least one particle");
  const std::size_t T = data.size();
  const std::size_t d = model.state_dim();
  LikelihoodEstimate est;
  est.per_interval.resize(T);
  ParticleBuffer prev, cur;
  detail::WeightedPicker picker;
  std::vector<std::int64_t> x(d);
  for (std::size_t t = 0; t < T; ++t) {
    cur.reset(d);
    if (t > 0) picker.prepare(prev.log_weights, prev.m);
    for (std::size_t j = 0; j < n_particles; ++j) {
      if (t == 0) {
        model.sample_initial(x, theta, rng);
      } else {
        const auto src = prev.state(picker.pick(rng));
        std::copy(src.begin(), src.end(), x.begin());
      }
      const StepOutcome o = model.propose(x, theta, data, t, proposal, rng);
      cur.states.insert(cur.states.end(), x.begin(), x.end());
      cur.log_weights.push_back(o.log_weight);
      ++cur.m;
    }
    auto& rec = est.per_interval[t];
    rec.visited = true;
    rec.m = n_particles;
    rec.k = 2;
    rec.log_p_hat = detail::log_mean_weight(cur.log_weights, cur.m);
    est.total_simulations += n_particles;
    if (rec.log_p_hat == kNegInf) {
      est.log_p_hat = kNegInf;
      return est;
    }
    std::swap(prev, cur);
  }
  est.finalise();
  return est;
}

// Estimator handles over a model bound by value.

template <StateSpaceModel Model>
LikelihoodEstimator make_frankenfilter(Model model, FilterConfig config, ProposalKind proposal) {
  config.validate();
  return [model = std::move(model), config = std::move(config), proposal](
             const Params& theta, const Dataset& data, RngStream& rng) {
    return frankenfilter_general(model, theta, data, config, proposal, rng);
  };
}

template <StateSpaceModel Model>
LikelihoodEstimator make_bootstrap(Model model, std::size_t n_particles, ProposalKind proposal) {
  return [model = std::move(model), n_particles, proposal](const Params& theta, const Dataset& data,
                                                           RngStream& rng) {
    return bootstrap_pf(model, theta, data, n_particles, proposal, rng);
  };
}

template <StateSpaceModel Model>
LikelihoodEstimator make_alive_hard(Model model, std::size_t s_target, std::size_t m_plus) {
  return [model = std::move(model), s_target, m_plus](const Params& theta, const Dataset& data,
                                                      RngStream& rng) {
    return alive_hard_threshold(model, theta, data, s_target, m_plus, rng);
  };
}

template <StateSpaceModel Model>
LikelihoodEstimator make_alive(Model model, std::size_t s_target,
                               std::uint64_t abort_guard = 1'000'000'000ULL) {
  return [model = std::move(model), s_target, abort_guard](const Params& theta, const Dataset& data,
                                                           RngStream& rng) {
    return alive_filter(model, theta, data, s_target, rng, abort_guard);
  };
}

}  // namespace ff
