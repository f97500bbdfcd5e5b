#pragma once

#include <cmath>
#include <cstdint>
#include <map>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "core.hpp"
#include "mjp.hpp"
#include "rng.hpp"

namespace ff::oracle {

enum class Algorithm { kAlg1, kAlg2, kAlg3 };

template <class Scalar>
struct Leaf {
  Scalar probability;
  Scalar estimate;
  std::size_t m = 0;
  int k = 0;
};

template <class Scalar>
struct OutcomeTree {
  std::vector<Leaf<Scalar>> leaves;
  Scalar expectation{0};
  Scalar second_moment{0};
  Scalar total_probability{0};
};

namespace detail {

template <class Scalar>
struct Enumerator {
  Scalar p, q;
  std::size_t s, m_minus, m_plus;
  Algorithm alg;
  OutcomeTree<Scalar>* tree;

  bool stop(std::size_t m, std::size_t succ) const {
    if (m < m_minus && alg == Algorithm::kAlg3) return false;
    return succ >= s || m >= m_plus;
  }

  void leaf(const Scalar& prob, std::size_t m, std::size_t succ, bool last_success) const {
    Leaf<Scalar> l{prob, Scalar(0), m, 0};
    switch (alg) {
      case Algorithm::kAlg1:
        // Hard threshold: m == m_plus is a failure even with s successes.
        if (m == m_plus) {
          l.k = 2;
        } else {
          l.k = 1;
          l.estimate = Scalar(s - 1) / Scalar(m - 1);
        }
        break;
      case Algorithm::kAlg2:
        if (succ < s) {
          l.k = 2;
          l.estimate = Scalar(succ) / Scalar(m);
        } else {
          l.k = 1;
          l.estimate = Scalar(succ - 1) / Scalar(m - 1);
        }
        break;
      case Algorithm::kAlg3:
        if (m == m_minus || succ < s) {
          l.k = (m == m_minus) ? 0 : 2;
          l.estimate = Scalar(succ) / Scalar(m);
        } else {
          // The final draw was the crossing success; drop it.
          l.k = 1;
          l.estimate = Scalar(succ - (last_success ? 1 : 0)) / Scalar(m - 1);
        }
        break;
    }
    tree->leaves.push_back(l);
  }

  void walk(const Scalar& prob, std::size_t m, std::size_t succ, bool last_success) const {
    if (m > 0 && stop(m, succ)) {
      leaf(prob, m, succ, last_success);
      return;
    }
    if (p != Scalar(0)) walk(prob * p, m + 1, succ + 1, true);
    if (q != Scalar(0)) walk(prob * q, m + 1, succ, false);
  }
};

}  // namespace detail

/// Exhaustive enumeration of the outcome tree of a stopping-rule estimator
/// driven by i.i.d. Bernoulli(p) indicator weights.
template <class Scalar>
OutcomeTree<Scalar> enumerate_bernoulli_estimator(const Scalar& p, std::size_t s_target,
                                                  std::size_t m_minus, std::size_t m_plus,
                                                  Algorithm alg) {
  if (m_plus > 24) throw ConfigError("enumeration needs m_plus <= 24");
  if (m_plus < 1 || s_target < 1) throw ConfigError("enumeration needs m_plus >= 1 and s_target >= 1");
  if (p < Scalar(0) || p > Scalar(1)) throw ConfigError("p must lie in [0, 1]");
  if (alg == Algorithm::kAlg3 && m_minus >= m_plus) throw ConfigError("m_minus must be below m_plus");
  OutcomeTree<Scalar> tree;
  detail::Enumerator<Scalar> e{p, Scalar(1) - p, s_target, alg == Algorithm::kAlg3 ? m_minus : 0,
                               m_plus, alg, &tree};
  e.walk(Scalar(1), 0, 0, false);
  for (const auto& l : tree.leaves) {
    tree.total_probability += l.probability;
    tree.expectation += l.probability * l.estimate;
    tree.second_moment += l.probability * l.estimate * l.estimate;
  }
  return tree;
}

/// Trial index M of the s-th success in i.i.d. Bernoulli(p) draws.
inline std::int64_t negbin_trials_sample(double p, std::size_t s_target, RngStream& rng) {
  if (!(p > 0.0 && p <= 1.0)) throw ConfigError("p must lie in (0, 1]");
  if (p == 1.0) return static_cast<std::int64_t>(s_target);
  std::geometric_distribution<std::int64_t> failures(p);
  std::int64_t m = 0;
  for (std::size_t i = 0; i < s_target; ++i) m += failures(rng) + 1;
  return m;
}

struct ConvolutionResult {
  double probability = 0.0;
  double truncation_deficit = 0.0;  // probability mass dropped by kernel truncation
  std::size_t max_states = 0;
};

namespace detail {

// Poisson pmf values for n = 0.. until the cumulative mass reaches 1 - tol.
inline std::vector<long double> poisson_kernel(double lambda, long double tol) {
  std::vector<long double> out;
  if (!(lambda > 0.0)) {
    out.push_back(1.0L);
    return out;
  }
  const long double lam = lambda;
  long double pmf = std::exp(-lam);
  long double cum = 0.0L;
  for (std::int64_t n = 0;; ++n) {
    if (n > 0) pmf *= lam / static_cast<long double>(n);
    out.push_back(pmf);
    cum += pmf;
    if (cum >= 1.0L - tol && static_cast<long double>(n) > lam) break;
    if (n > 100000) throw NumericalError("Poisson kernel did not converge");
  }
  return out;
}

}  // namespace detail

/// Exact forward recursion over the N-step tau-leap chain from x_prev,
/// returning P(F'X_t = F'y_t | x_prev). Step kernels are truncated at
/// cumulative mass 1 - kernel_tol; the dropped mass is reported.
inline ConvolutionResult tau_leap_exact_convolution(const ReactionNetwork& net, const State& x_prev,
                                                    const Params& theta, double dt,
                                                    double tau, std::span<const std::int64_t> y_t,
                                                    const IntMatrix& F,
                                                    std::size_t state_cap = 10000,
                                                    double kernel_tol = 1e-12) {
  const int steps = ff::detail::step_count(dt, tau);
  if (steps > 4) throw ConfigError("convolution oracle supports at most 4 leaps");
  const auto r = static_cast<std::size_t>(net.num_reactions);
  ConvolutionResult out;
  long double deficit = 0.0L;
  std::map<State, long double> layer{{x_prev, 1.0L}};

  for (int k = 0; k < steps; ++k) {
    std::map<State, long double> next;
    for (const auto& [x, prob] : layer) {
      const std::vector<double> h = net.hazards(x, theta);
      std::vector<std::vector<long double>> kernels(r);
      long double kept = 1.0L;
      for (std::size_t i = 0; i < r; ++i) {
        kernels[i] = detail::poisson_kernel(h[i] * tau, kernel_tol);
        long double mass = 0.0L;
        for (auto v : kernels[i]) mass += v;
        kept *= mass;
      }
      deficit += prob * (1.0L - kept);
      // Odometer over the joint count vector.
      std::vector<std::size_t> n(r, 0);
      for (;;) {
        long double w = prob;
        State y = x;
        for (std::size_t i = 0; i < r; ++i) {
          w *= kernels[i][n[i]];
          if (n[i]) net.apply(y, static_cast<int>(i), static_cast<std::int64_t>(n[i]));
        }
        next[y] += w;
        if (next.size() > state_cap) throw NumericalError("convolution oracle state space exceeds cap");
        std::size_t i = 0;
        for (; i < r; ++i) {
          if (++n[i] < kernels[i].size()) break;
          n[i] = 0;
        }
        if (i == r) break;
      }
    }
    layer = std::move(next);
    out.max_states = std::max(out.max_states, layer.size());
  }

  long double prob = 0.0L;
  for (const auto& [x, w] : layer)
    if (observation_matches(x, y_t, F)) prob += w;
  out.probability = static_cast<double>(prob);
  out.truncation_deficit = static_cast<double>(deficit);
  return out;
}

}  // namespace ff::oracle
