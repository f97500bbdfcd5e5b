#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "core.hpp"
#include "filters.hpp"
#include "mjp.hpp"
#include "rng.hpp"

namespace ff {

// Independent univariate prior component.
struct Prior {
  enum class Kind { kGamma, kBeta, kUniform };
  Kind kind = Kind::kGamma;
  double a = 1.0;  // gamma shape / beta alpha / uniform lower
  double b = 1.0;  // gamma rate / beta beta / uniform upper

  static Prior gamma(double shape, double rate) { return {Kind::kGamma, shape, rate}; }
  static Prior beta(double alpha, double beta) { return {Kind::kBeta, alpha, beta}; }
  static Prior uniform(double lo, double hi) { return {Kind::kUniform, lo, hi}; }

  double log_density(double x) const {
    switch (kind) {
      case Kind::kGamma:
        if (!(x > 0.0)) return kNegInf;
        return a * std::log(b) - std::lgamma(a) + (a - 1.0) * std::log(x) - b * x;
      case Kind::kBeta:
        if (!(x > 0.0 && x < 1.0)) return kNegInf;
        return std::lgamma(a + b) - std::lgamma(a) - std::lgamma(b) + (a - 1.0) * std::log(x) +
               (b - 1.0) * std::log1p(-x);
      case Kind::kUniform:
        if (!(x > a && x < b)) return kNegInf;
        return -std::log(b - a);
    }
    return kNegInf;
  }

  double sample(RngStream& rng) const {
    switch (kind) {
      case Kind::kGamma: return std::gamma_distribution<double>(a, 1.0 / b)(rng);
      case Kind::kBeta: {
        const double u = std::gamma_distribution<double>(a, 1.0)(rng);
        const double v = std::gamma_distribution<double>(b, 1.0)(rng);
        return u / (u + v);
      }
      case Kind::kUniform: return a + (b - a) * rng.uniform();
    }
    return 0.0;
  }
};

using LogPrior = std::function<double(const Params&)>;

enum class InferentialKind { kExactMjp, kTauLeap };

struct StudyModel {
  std::string name;
  ReactionNetwork network;
  std::vector<std::string> theta_names;
  std::vector<Prior> prior;
  // Initial state: each component uniform on [first, second]; fixed when equal.
  std::vector<std::pair<std::int64_t, std::int64_t>> x0_spec;
  InferentialKind inferential_kind = InferentialKind::kExactMjp;
  double tau = 0.1;
  IntMatrix obs_matrix;

  double log_prior(const Params& theta) const {
    if (theta.size() != prior.size()) return kNegInf;
    double acc = 0.0;
    for (std::size_t i = 0; i < prior.size(); ++i) acc += prior[i].log_density(theta[i]);
    return acc;
  }

  LogPrior log_prior_fn() const {
    return [pr = prior](const Params& theta) {
      if (theta.size() != pr.size()) return kNegInf;
      double acc = 0.0;
      for (std::size_t i = 0; i < pr.size(); ++i) acc += pr[i].log_density(theta[i]);
      return acc;
    };
  }

  Params sample_prior(RngStream& rng) const {
    Params out;
    for (const auto& p : prior) out.push_back(p.sample(rng));
    return out;
  }

  bool fixed_initial_state() const {
    return std::all_of(x0_spec.begin(), x0_spec.end(), [](const auto& r) { return r.first == r.second; });
  }

  void sample_initial(std::span<std::int64_t> x, RngStream& rng) const {
    for (std::size_t i = 0; i < x0_spec.size(); ++i) {
      const auto [lo, hi] = x0_spec[i];
      x[i] = (lo == hi) ? lo : rng.uniform_int(lo, hi);
    }
  }
};

// Extra fixed constants a model may need (SEIR birth and death rates).
using ModelConstants = std::map<std::string, double>;

/// One of the four study models: "death", "dimer", "lv" or "seir". SEIR
/// needs the constants "a" and "m".
inline StudyModel build_model(const std::string& name, const ModelConstants& constants = {}) {
  StudyModel m;
  m.name = name;
  auto& net = m.network;
  net.name = name;
  if (name == "death") {
    net.num_species = 1;
    net.num_reactions = 1;
    net.stoich = IntMatrix::Constant(1, 1, -1);
    net.hazard = [](std::span<const std::int64_t> x, std::span<const double> th, std::span<double> h) {
      h[0] = th[0] * static_cast<double>(x[0]);
    };
    net.theta_dim = 1;
    m.theta_names = {"theta"};
    m.prior = {Prior::gamma(10.0, 1000.0)};
    m.x0_spec = {{100, 100}};
    m.inferential_kind = InferentialKind::kExactMjp;
  } else if (name == "dimer") {
    net.num_species = 2;
    net.num_reactions = 2;
    net.stoich.resize(2, 2);
    net.stoich << -2, 2, 1, -1;
    net.hazard = [](std::span<const std::int64_t> x, std::span<const double> th, std::span<double> h) {
      const double x1 = static_cast<double>(x[0]);
      h[0] = th[0] * x1 * (x1 - 1.0) / 2.0;
      h[1] = th[1] * static_cast<double>(x[1]);
    };
    net.theta_dim = 2;
    m.theta_names = {"theta1", "theta2"};
    m.prior = {Prior::gamma(2.0, 500.0), Prior::gamma(2.0, 2.0)};
    m.x0_spec = {{20, 20}, {1, 1}};
    m.inferential_kind = InferentialKind::kTauLeap;
  } else if (name == "lv") {
    net.num_species = 2;
    net.num_reactions = 3;
    net.stoich.resize(2, 3);
    net.stoich << 1, -1, 0, 0, 1, -1;
    net.hazard = [](std::span<const std::int64_t> x, std::span<const double> th, std::span<double> h) {
      const double x1 = static_cast<double>(x[0]);
      const double x2 = static_cast<double>(x[1]);
      h[0] = th[0] * x1;
      h[1] = th[1] * x1 * x2;
      h[2] = th[2] * x2;
    };
    net.theta_dim = 3;
    m.theta_names = {"theta1", "theta2", "theta3"};
    m.prior = {Prior::gamma(1.0, 1.0), Prior::gamma(1.0, 1.0), Prior::gamma(1.0, 1.0)};
    m.x0_spec = {{50, 50}, {50, 50}};
    m.inferential_kind = InferentialKind::kTauLeap;
  } else if (name == "seir") {
    const auto a_it = constants.find("a");
    const auto m_it = constants.find("m");
    if (a_it == constants.end() || m_it == constants.end())
      throw ConfigError("seir model needs the constants a (annual additions) and m (death rate)");
    const double a = a_it->second;
    const double mort = m_it->second;
    // Species order: S, E, I, R (R counts cumulative CWD deaths).
    net.num_species = 4;
    net.num_reactions = 7;
    net.stoich.resize(4, 7);
    // clang-format off
    net.stoich << 1, -1, -1,  0,  0,  0,  0,
                  0,  0,  1, -1, -1,  0,  0,
                  0,  0,  0,  0,  1, -1, -1,
                  0,  0,  0,  0,  0,  0,  1;
    // clang-format on
    net.hazard = [a, mort](std::span<const std::int64_t> x, std::span<const double> th,
                           std::span<double> h) {
      const double s = static_cast<double>(x[0]);
      const double e = static_cast<double>(x[1]);
      const double i = static_cast<double>(x[2]);
      const double beta = th[0], mu = th[1], alpha = th[2];
      h[0] = a;
      h[1] = mort * s;
      h[2] = beta * s * i;
      h[3] = mort * e;
      h[4] = mu / alpha * e;
      h[5] = mort * i;
      h[6] = mu / (1.0 - alpha) * i;
    };
    net.theta_dim = 3;
    m.theta_names = {"beta", "mu", "alpha"};
    m.prior = {Prior::beta(2.0, 10.0), Prior::beta(2.0, 5.0), Prior::uniform(0.0, 1.0)};
    m.x0_spec = {{10, 50}, {0, 0}, {0, 20}, {0, 0}};
    m.inferential_kind = InferentialKind::kExactMjp;
  } else {
    throw ConfigError("unknown model: " + name);
  }
  if (m.obs_matrix.size() == 0) m.obs_matrix = Dataset::identity_obs(net.num_species);
  if (name == "seir") {
    m.obs_matrix = IntMatrix::Zero(4, 1);
    m.obs_matrix(3, 0) = 1;
  }
  return m;
}

/// StateSpaceModel adapter over a study model: forward proposals use the
/// inferential dynamics (exact MJP or tau-leap) with an indicator weight;
/// bridge proposals use the conditioned-hazard tau-leap bridge.
class MjpModel {
 public:
  explicit MjpModel(StudyModel model) : model_(std::move(model)) {}

  const StudyModel& study() const { return model_; }
  std::size_t state_dim() const { return static_cast<std::size_t>(model_.network.num_species); }

  void sample_initial(std::span<std::int64_t> x, const Params&, RngStream& rng) const {
    model_.sample_initial(x, rng);
  }

  StepOutcome propose(std::span<std::int64_t> x, const Params& theta, const Dataset& data,
                      std::size_t t, ProposalKind q, RngStream& rng) const {
    const double t_prev = (t == 0) ? data.t0 : data.times[t - 1];
    const double dt = data.times[t] - t_prev;
    const auto& y = data.observations[t];
    StepOutcome out;
    if (q == ProposalKind::kBridge) {
      if (model_.inferential_kind != InferentialKind::kTauLeap)
        throw ConfigError("bridge proposals need a tau-leap inferential model");
      int fallbacks = 0;
      bridge_advance(model_.network, x, theta, y, data.obs_matrix, detail::step_count(dt, model_.tau),
                     model_.tau, rng, out.log_weight, fallbacks);
      out.matched = observation_matches(x, y, data.obs_matrix);
      return out;
    }
    if (model_.inferential_kind == InferentialKind::kExactMjp) {
      gillespie_advance(model_.network, x, theta, t_prev, data.times[t], rng);
    } else {
      tau_leap_advance(model_.network, x, theta, detail::step_count(dt, model_.tau), model_.tau, rng);
    }
    out.matched = observation_matches(x, y, data.obs_matrix);
    out.log_weight = out.matched ? 0.0 : kNegInf;
    return out;
  }

 private:
  StudyModel model_;
};

static_assert(StateSpaceModel<MjpModel>);

struct SynthesisSettings {
  Params theta;
  std::optional<State> x0;  // sampled from the model's initial spec if empty
  double dt = 1.0;
  std::size_t num_obs = 10;
  IntMatrix obs_matrix;  // defaults to the model's observation matrix
};

struct SynthesizedData {
  Dataset data;
  State x0;
  std::vector<State> latent;  // full states at observation times
};

/// Simulates the exact MJP and records F'x at t0 + dt, ..., t0 + T dt.
inline SynthesizedData synthesize_dataset(const StudyModel& model, const SynthesisSettings& settings,
                                          RngStream& rng) {
  if (settings.theta.size() != static_cast<std::size_t>(model.network.theta_dim))
    throw ConfigError("theta dimension does not match model " + model.name);
  SynthesizedData out;
  const IntMatrix F = settings.obs_matrix.size() ? settings.obs_matrix : model.obs_matrix;
  if (F.rows() != model.network.num_species) throw ConfigError("observation matrix has wrong row count");
  State x(static_cast<std::size_t>(model.network.num_species));
  if (settings.x0) {
    x = *settings.x0;
  } else {
    model.sample_initial(x, rng);
  }
  out.x0 = x;
  out.data.t0 = 0.0;
  out.data.obs_matrix = F;
  out.data.complete = F.rows() == F.cols() && F == IntMatrix::Identity(F.rows(), F.cols());
  double t = 0.0;
  for (std::size_t i = 0; i < settings.num_obs; ++i) {
    const double t_next = settings.dt * static_cast<double>(i + 1);
    gillespie_advance(model.network, x, settings.theta, t, t_next, rng);
    t = t_next;
    State y(static_cast<std::size_t>(F.cols()));
    for (Eigen::Index j = 0; j < F.cols(); ++j) {
      std::int64_t acc = 0;
      for (Eigen::Index k = 0; k < F.rows(); ++k) acc += F(k, j) * x[static_cast<std::size_t>(k)];
      y[static_cast<std::size_t>(j)] = acc;
    }
    out.data.times.push_back(t_next);
    out.data.observations.push_back(std::move(y));
    out.latent.push_back(x);
  }
  return out;
}

namespace detail {

inline double log_binomial_pmf(std::int64_t k, std::int64_t n, double log_q, double log_1mq) {
  if (k < 0 || k > n) return kNegInf;
  const auto kd = static_cast<double>(k), nd = static_cast<double>(n);
  double out = std::lgamma(nd + 1.0) - std::lgamma(kd + 1.0) - std::lgamma(nd - kd + 1.0);
  if (k > 0) out += kd * log_q;
  if (n - k > 0) out += (nd - kd) * log_1mq;
  return out;
}

}  // namespace detail

/// Per-interval log transition probabilities log Bin(x_t; x_{t-1}, e^{-theta dt})
/// of the pure death process.
inline std::vector<double> death_interval_log_probs(double theta, const Dataset& data, std::int64_t x0) {
  std::vector<double> out;
  std::int64_t prev = x0;
  double t_prev = data.t0;
  for (std::size_t i = 0; i < data.size(); ++i) {
    const double dt = data.times[i] - t_prev;
    const std::int64_t x = data.observations[i][0];
    if (!(theta > 0.0)) {
      out.push_back(x == prev ? 0.0 : kNegInf);
    } else {
      const double log_q = -theta * dt;
      out.push_back(detail::log_binomial_pmf(x, prev, log_q, std::log(-std::expm1(log_q))));
    }
    prev = x;
    t_prev = data.times[i];
  }
  return out;
}

inline double exact_death_likelihood(double theta, const Dataset& data, std::int64_t x0) {
  double acc = 0.0;
  for (double lp : death_interval_log_probs(theta, data, x0)) {
    if (lp == kNegInf) return kNegInf;
    acc += lp;
  }
  return acc;
}

/// Deterministic exact-likelihood estimator for the death model.
inline LikelihoodEstimator make_exact_death_estimator(std::int64_t x0) {
  return [x0](const Params& theta, const Dataset& data, RngStream&) {
    LikelihoodEstimate est;
    for (double lp : death_interval_log_probs(theta.at(0), data, x0)) {
      IntervalRecord r;
      r.visited = true;
      r.log_p_hat = lp;
      est.per_interval.push_back(r);
    }
    est.finalise();
    return est;
  };
}

// Named synthetic data configurations.
struct Preset {
  std::string name;
  std::string model;
  Params theta;
  State x0;
  double dt = 1.0;
  std::size_t num_obs = 0;
  bool prey_only = false;
  std::uint64_t seed = 1;
  bool death_outlier_tail = false;
  double reported_mean_pt = 0.0;  // average transition probability reported for the configuration
};

inline const std::vector<Preset>& presets() {
  static const std::vector<Preset> all = [] {
    std::vector<Preset> v;
    const Params dimer_theta{0.00332, 0.2};
    const Params lv_theta{0.5, 0.0025, 0.3};
    v.push_back({"D50", "death", {0.01}, {100}, 1.0, 50, false, 90, false, 0.0});
    v.push_back({"D50mod", "death", {0.01}, {100}, 1.0, 50, false, 90, true, 0.0});
    v.push_back({"P10a", "dimer", dimer_theta, {20, 1}, 1.0, 10, false, 210, false, 0.34});
    v.push_back({"P10b", "dimer", dimer_theta, {200, 10}, 1.0, 10, false, 211, false, 0.07});
    v.push_back({"P30a", "dimer", dimer_theta, {20, 1}, 1.0, 30, false, 230, false, 0.35});
    v.push_back({"P30b", "dimer", dimer_theta, {200, 10}, 1.0, 30, false, 231, false, 0.08});
    v.push_back({"P50a", "dimer", dimer_theta, {20, 1}, 1.0, 50, false, 250, false, 0.34});
    v.push_back({"P50b", "dimer", dimer_theta, {200, 10}, 1.0, 50, false, 251, false, 0.07});
    v.push_back({"LV20", "lv", lv_theta, {50, 50}, 1.0, 20, false, 6, false, 0.00136});
    v.push_back({"LV20prey", "lv", lv_theta, {50, 50}, 1.0, 20, true, 6, false, 0.02836});
    v.push_back({"LV40", "lv", lv_theta, {50, 50}, 0.5, 40, false, 4, false, 0.00243});
    v.push_back({"LV40prey", "lv", lv_theta, {50, 50}, 0.5, 40, true, 4, false, 0.04339});
    return v;
  }();
  return all;
}

inline const Preset& find_preset(const std::string& name) {
  for (const auto& p : presets())
    if (p.name == name) return p;
  throw ConfigError("unknown preset: " + name);
}

namespace detail {

// Smallest x with P(X <= x) >= q for X ~ Bin(n, e^{-theta dt}).
inline std::int64_t death_lower_quantile(std::int64_t n, double theta, double dt, double q) {
  const double log_q = -theta * dt;
  const double log_1mq = std::log(-std::expm1(log_q));
  double cdf = 0.0;
  for (std::int64_t x = 0; x <= n; ++x) {
    cdf += std::exp(log_binomial_pmf(x, n, log_q, log_1mq));
    if (cdf >= q) return x;
  }
  return n;
}

}  // namespace detail

struct PresetData {
  StudyModel model;
  SynthesizedData synth;
  Preset preset;
};

/// Builds the preset's dataset from its stored seed (or `seed_override`).
/// D50mod replaces the last two observations of D50 by the lower 0.01%
/// conditional quantiles given their predecessors.
inline PresetData synthesize_preset(const std::string& name,
                                    std::optional<std::uint64_t> seed_override = std::nullopt) {
  const Preset& p = find_preset(name);
  PresetData out{build_model(p.model), {}, p};
  if (seed_override) out.preset.seed = *seed_override;
  for (std::size_t i = 0; i < p.x0.size(); ++i) out.model.x0_spec[i] = {p.x0[i], p.x0[i]};
  SynthesisSettings s;
  s.theta = p.theta;
  s.x0 = p.x0;
  s.dt = p.dt;
  s.num_obs = p.num_obs;
  if (p.prey_only) {
    s.obs_matrix = IntMatrix::Zero(2, 1);
    s.obs_matrix(0, 0) = 1;
  }
  RngStream rng(out.preset.seed);
  out.synth = synthesize_dataset(out.model, s, rng);
  if (p.death_outlier_tail) {
    auto& obs = out.synth.data.observations;
    const std::size_t T = obs.size();
    for (std::size_t i = T - 2; i < T; ++i) {
      obs[i][0] = detail::death_lower_quantile(obs[i - 1][0], p.theta[0], p.dt, 1e-4);
      out.synth.latent[i] = obs[i];
    }
  }
  return out;
}

}  // namespace ff
