#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <ctime>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "core.hpp"
#include "models.hpp"
#include "parallel.hpp"
#include "rng.hpp"
#include "tuning.hpp"

namespace ff {

// CPU time of the calling thread, in seconds.
inline double thread_cpu_seconds() {
  timespec ts{};
  clock_gettime(CLOCK_THREAD_CPUTIME_ID, &ts);
  return static_cast<double>(ts.tv_sec) + 1e-9 * static_cast<double>(ts.tv_nsec);
}

/// Gaussian random walk on log theta with innovation covariance gamma * cov.
class ProposalConfig {
 public:
  ProposalConfig() = default;

  // gamma <= 0 selects the default 2.38^2 / d.
  ProposalConfig(Eigen::MatrixXd cov, double gamma = -1.0) : cov_(std::move(cov)) {
    if (cov_.rows() != cov_.cols() || cov_.rows() == 0)
      throw ConfigError("innovation covariance must be a non-empty square matrix");
    if (!cov_.isApprox(cov_.transpose())) throw ConfigError("innovation covariance must be symmetric");
    Eigen::LLT<Eigen::MatrixXd> llt(cov_);
    if (llt.info() != Eigen::Success) throw ConfigError("innovation covariance must be positive definite");
    chol_ = llt.matrixL();
    gamma_ = gamma > 0.0 ? gamma : 2.38 * 2.38 / static_cast<double>(cov_.rows());
  }

  static ProposalConfig diagonal(const std::vector<double>& variances, double gamma = -1.0) {
    Eigen::VectorXd v(static_cast<Eigen::Index>(variances.size()));
    for (std::size_t i = 0; i < variances.size(); ++i) v(static_cast<Eigen::Index>(i)) = variances[i];
    return ProposalConfig(v.asDiagonal(), gamma);
  }

  std::size_t dim() const { return static_cast<std::size_t>(cov_.rows()); }
  double gamma() const { return gamma_; }
  const Eigen::MatrixXd& covariance() const { return cov_; }

  Eigen::VectorXd draw_increment(RngStream& rng) const {
    Eigen::VectorXd z(cov_.rows());
    for (Eigen::Index i = 0; i < z.size(); ++i) z(i) = rng.normal();
    return std::sqrt(gamma_) * (chol_ * z);
  }

 private:
  Eigen::MatrixXd cov_;
  Eigen::MatrixXd chol_;
  double gamma_ = 1.0;
};

// PMMH trace. Row i is the state after iteration i.
struct Chain {
  std::size_t dim = 0;
  std::vector<Params> draws;
  std::vector<double> log_liks;
  std::vector<bool> accepted;
  std::vector<std::uint64_t> cost;
  double cpu_seconds = 0.0;

  std::size_t size() const { return draws.size(); }

  double acceptance_rate() const {
    if (accepted.empty()) return 0.0;
    return static_cast<double>(std::count(accepted.begin(), accepted.end(), true)) /
           static_cast<double>(accepted.size());
  }

  std::vector<double> column(std::size_t j, std::size_t burn_in = 0) const {
    std::vector<double> out;
    for (std::size_t i = burn_in; i < draws.size(); ++i) out.push_back(draws[i][j]);
    return out;
  }

  Eigen::MatrixXd matrix(std::size_t burn_in = 0, bool log_scale = false) const {
    const auto n = static_cast<Eigen::Index>(draws.size() - std::min(burn_in, draws.size()));
    Eigen::MatrixXd m(n, static_cast<Eigen::Index>(dim));
    for (Eigen::Index i = 0; i < n; ++i)
      for (std::size_t j = 0; j < dim; ++j) {
        const double v = draws[static_cast<std::size_t>(i) + burn_in][j];
        m(i, static_cast<Eigen::Index>(j)) = log_scale ? std::log(v) : v;
      }
    return m;
  }

  double mean_cost() const {
    if (cost.empty()) return 0.0;
    double acc = 0.0;
    for (auto c : cost) acc += static_cast<double>(c);
    return acc / static_cast<double>(cost.size());
  }
};

/// Pseudo-marginal Metropolis-Hastings with a log-scale Gaussian random walk.
/// The acceptance ratio includes the log-transform Jacobian. A zero likelihood
/// estimate is always rejected and the retained estimate is never refreshed.
inline Chain pmmh_run(const LikelihoodEstimator& estimator, const Dataset& data, const LogPrior& prior,
                      const Params& theta0, const ProposalConfig& proposal, std::size_t iterations,
                      const RngStream& rng) {
  if (iterations < 1) throw ConfigError("pmmh needs at least one iteration");
  if (theta0.size() != proposal.dim()) throw ConfigError("theta0 and proposal dimensions differ");
  double log_prior = prior(theta0);
  if (log_prior == kNegInf) throw ConfigError("prior density is zero at theta0");
  for (double v : theta0)
    if (!(v > 0.0)) throw ConfigError("log-scale random walk needs a positive theta0");

  RngStream move_rng = rng.derive(0);
  const RngStream est_base = rng.derive(1);
  auto log_jacobian = [](const Params& th) {
    double acc = 0.0;
    for (double v : th) acc += std::log(v);
    return acc;
  };

  Chain chain;
  chain.dim = theta0.size();
  chain.draws.reserve(iterations);
  chain.log_liks.reserve(iterations);
  chain.accepted.reserve(iterations);
  chain.cost.reserve(iterations);

  const double cpu0 = thread_cpu_seconds();
  Params theta = theta0;
  RngStream init_rng = est_base.derive(0xffffffffu);
  const LikelihoodEstimate init = estimator(theta, data, init_rng);
  double log_lik = init.log_p_hat;
  double log_jac = log_jacobian(theta);

  Params cand(theta.size());
  for (std::size_t it = 0; it < iterations; ++it) {
    const Eigen::VectorXd eps = proposal.draw_increment(move_rng);
    for (std::size_t j = 0; j < theta.size(); ++j)
      cand[j] = std::exp(std::log(theta[j]) + eps(static_cast<Eigen::Index>(j)));
    const double log_u = std::log(move_rng.uniform());
    std::uint64_t spent = 0;
    bool accept = false;
    const double cand_prior = prior(cand);
    double cand_ll = kNegInf;
    if (cand_prior != kNegInf) {
      RngStream sub = est_base.derive(static_cast<std::uint32_t>(it));
      const LikelihoodEstimate est = estimator(cand, data, sub);
      spent = est.total_simulations;
      cand_ll = est.log_p_hat;
      if (cand_ll != kNegInf) {
        const double cand_jac = log_jacobian(cand);
        if (log_lik == kNegInf) {
          accept = true;
        } else {
          const double log_alpha = (cand_ll - log_lik) + (cand_prior - log_prior) + (cand_jac - log_jac);
          accept = log_u < log_alpha;
        }
        if (accept) {
          theta = cand;
          log_lik = cand_ll;
          log_prior = cand_prior;
          log_jac = cand_jac;
        }
      }
    }
    chain.draws.push_back(theta);
    chain.log_liks.push_back(log_lik);
    chain.accepted.push_back(accept);
    chain.cost.push_back(spent);
  }
  chain.cpu_seconds = thread_cpu_seconds() - cpu0;
  return chain;
}

struct LogLikVariance {
  double variance = 0.0;       // over finite replicates only
  double zero_fraction = 0.0;  // fraction of replicates with a zero estimate
  double mean = 0.0;
  std::size_t finite = 0;
};

/// Sample variance of log P-hat at a fixed theta. Zero estimates are excluded
/// from the variance and reported separately.
inline LogLikVariance var_log_phat(const LikelihoodEstimator& estimator, const Dataset& data,
                                   const Params& theta, std::size_t replicates, const RngStream& rng,
                                   unsigned threads = 1) {
  if (replicates < 2) throw ConfigError("var_log_phat needs at least 2 replicates");
  std::vector<double> values(replicates);
  parallel_for(replicates, threads, [&](std::size_t r) {
    RngStream sub = rng.derive(static_cast<std::uint32_t>(r));
    values[r] = estimator(theta, data, sub).log_p_hat;
  });
  LogLikVariance out;
  double mean = 0.0, m2 = 0.0;
  std::size_t n = 0, zeros = 0;
  for (double v : values) {
    if (v == kNegInf) {
      ++zeros;
      continue;
    }
    ++n;
    const double delta = v - mean;
    mean += delta / static_cast<double>(n);
    m2 += delta * (v - mean);
  }
  if (n == 0) throw EstimatorDead("estimator dead at theta: every replicate returned zero");
  out.finite = n;
  out.mean = mean;
  out.variance = n > 1 ? m2 / static_cast<double>(n - 1) : 0.0;
  out.zero_fraction = static_cast<double>(zeros) / static_cast<double>(replicates);
  return out;
}

/// Univariate ESS by batch means with batch size floor(sqrt(n)), clipped to
/// [1, n]. A constant series returns n.
inline double ess_univariate(const std::vector<double>& series) {
  const std::size_t n = series.size();
  if (n < 10) throw ConfigError("ESS needs at least 10 draws");
  double mean = 0.0;
  for (double v : series) mean += v;
  mean /= static_cast<double>(n);
  double var = 0.0;
  for (double v : series) var += (v - mean) * (v - mean);
  var /= static_cast<double>(n - 1);
  if (!(var > 0.0)) return static_cast<double>(n);

  const auto b = static_cast<std::size_t>(std::floor(std::sqrt(static_cast<double>(n))));
  const std::size_t a = n / b;
  double bm_var = 0.0;
  for (std::size_t k = 0; k < a; ++k) {
    double bmean = 0.0;
    for (std::size_t i = k * b; i < (k + 1) * b; ++i) bmean += series[i];
    bmean /= static_cast<double>(b);
    bm_var += (bmean - mean) * (bmean - mean);
  }
  bm_var *= static_cast<double>(b) / static_cast<double>(a - 1);
  if (!(bm_var > 0.0)) return static_cast<double>(n);
  return std::clamp(static_cast<double>(n) * var / bm_var, 1.0, static_cast<double>(n));
}

/// Multivariate ESS n (|Lambda| / |Sigma|)^{1/d}: Lambda the sample covariance,
/// Sigma the batch-means covariance with batch size floor(sqrt(n)).
inline double ess_multivariate(const Eigen::MatrixXd& draws) {
  const auto n = static_cast<std::size_t>(draws.rows());
  const auto d = static_cast<std::size_t>(draws.cols());
  if (d < 1) throw ConfigError("ESS needs at least one column");
  if (n < d * d || n < 10) throw ConfigError("multivariate ESS needs n >= d^2 draws");
  const Eigen::RowVectorXd mean = draws.colwise().mean();
  const Eigen::MatrixXd centered = draws.rowwise() - mean;
  const Eigen::MatrixXd lambda = centered.transpose() * centered / static_cast<double>(n - 1);

  const auto b = static_cast<std::size_t>(std::floor(std::sqrt(static_cast<double>(n))));
  const std::size_t a = n / b;
  Eigen::MatrixXd sigma = Eigen::MatrixXd::Zero(static_cast<Eigen::Index>(d), static_cast<Eigen::Index>(d));
  for (std::size_t k = 0; k < a; ++k) {
    const Eigen::RowVectorXd bmean =
        draws.middleRows(static_cast<Eigen::Index>(k * b), static_cast<Eigen::Index>(b)).colwise().mean() - mean;
    sigma += bmean.transpose() * bmean;
  }
  sigma *= static_cast<double>(b) / static_cast<double>(a - 1);

  Eigen::LLT<Eigen::MatrixXd> llt_l(lambda);
  if (llt_l.info() != Eigen::Success || (llt_l.matrixL().toDenseMatrix().diagonal().array() <= 0.0).any())
    throw NumericalError("degenerate chain: sample covariance is singular");
  Eigen::LLT<Eigen::MatrixXd> llt_s(sigma);
  if (llt_s.info() != Eigen::Success) return static_cast<double>(n);
  const double logdet_l = 2.0 * llt_l.matrixL().toDenseMatrix().diagonal().array().log().sum();
  const double logdet_s = 2.0 * llt_s.matrixL().toDenseMatrix().diagonal().array().log().sum();
  const double ess = static_cast<double>(n) * std::exp((logdet_l - logdet_s) / static_cast<double>(d));
  return std::clamp(ess, 1.0, static_cast<double>(n));
}

// Summary statistics of a chain in the layout of the efficiency tables.
struct ChainSummary {
  std::vector<double> mean;
  std::vector<double> sd;
  std::vector<double> ess;
  double mess = 0.0;
  double cpu_seconds = 0.0;
  double acceptance_rate = 0.0;
  double mean_cost = 0.0;
  std::size_t burn_in = 0;

  double ess_per_second() const { return cpu_seconds > 0.0 ? mess / cpu_seconds : 0.0; }
  // 3 * sd / sqrt(ESS) half-width for parameter j.
  double mc_halfwidth(std::size_t j) const { return 3.0 * sd[j] / std::sqrt(ess[j]); }
};

inline ChainSummary summarize_chain(const Chain& chain, double burn_in_fraction = 0.0) {
  ChainSummary s;
  s.burn_in = static_cast<std::size_t>(burn_in_fraction * static_cast<double>(chain.size()));
  for (std::size_t j = 0; j < chain.dim; ++j) {
    const auto col = chain.column(j, s.burn_in);
    double mean = 0.0;
    for (double v : col) mean += v;
    mean /= static_cast<double>(col.size());
    double var = 0.0;
    for (double v : col) var += (v - mean) * (v - mean);
    var /= static_cast<double>(col.size() - 1);
    s.mean.push_back(mean);
    s.sd.push_back(std::sqrt(var));
    s.ess.push_back(ess_univariate(col));
  }
  try {
    s.mess = ess_multivariate(chain.matrix(s.burn_in));
  } catch (const NumericalError&) {
    s.mess = 1.0;
  }
  s.cpu_seconds = chain.cpu_seconds;
  s.acceptance_rate = chain.acceptance_rate();
  s.mean_cost = chain.mean_cost();
  return s;
}

// Estimator indexed by an integer size knob (particles, m_plus or s).
using EstimatorFamily = std::function<LikelihoodEstimator(std::size_t)>;

struct PilotSettings {
  std::size_t knob_lo = 2;
  std::size_t knob_hi = 1'000'000;
  std::size_t var_replicates = 50;
  double var_target = 1.0;
  double var_tolerance = 0.25;
  double max_zero_fraction = 0.25;
  std::size_t pilot_iterations = 2000;
  double burn_in_fraction = 0.1;
  std::optional<ProposalConfig> pilot_proposal;  // defaults to a small diagonal walk
  unsigned threads = 1;
};

struct PilotResult {
  std::size_t knob = 0;
  std::vector<std::size_t> per_theta_knob;
  TuningReport report;
  ProposalConfig proposal;
  Params start;
  Chain pilot_chain;
  double tuning_cpu_seconds = 0.0;
};

/// Smallest knob (to within bisection) whose Var(log P-hat) at theta is within
/// tolerance of the target.
inline std::size_t tune_knob_for_variance(const EstimatorFamily& family, const Dataset& data,
                                          const Params& theta, const PilotSettings& settings,
                                          const RngStream& rng) {
  auto too_noisy = [&](std::size_t knob) {
    const auto est = family(knob);
    try {
      const auto v = var_log_phat(est, data, theta, settings.var_replicates,
                                  rng.derive(static_cast<std::uint32_t>(knob)), settings.threads);
      if (v.zero_fraction > settings.max_zero_fraction) return 1;
      if (v.variance > settings.var_target + settings.var_tolerance) return 1;
      if (v.variance < settings.var_target - settings.var_tolerance) return -1;
      return 0;
    } catch (const EstimatorDead&) {
      return 1;
    }
  };
  std::size_t lo = settings.knob_lo, hi = settings.knob_hi;
  const int at_lo = too_noisy(lo);
  if (at_lo <= 0) return lo;
  if (too_noisy(hi) > 0) {
    std::string th;
    for (double v : theta) th += std::to_string(v) + " ";
    throw NumericalError("knob bracket [" + std::to_string(lo) + ", " + std::to_string(hi) +
                         "] does not reach the variance target at theta = " + th);
  }
  // Geometric bisection: knob scales the cost multiplicatively.
  while (hi > lo + 1 && static_cast<double>(hi) / static_cast<double>(lo) > 1.05) {
    const auto mid = static_cast<std::size_t>(std::round(std::sqrt(static_cast<double>(lo) * static_cast<double>(hi))));
    if (mid <= lo || mid >= hi) break;
    const int c = too_noisy(mid);
    if (c == 0) return mid;
    if (c > 0) {
      lo = mid;
    } else {
      hi = mid;
    }
  }
  return hi;
}

/// Pilot protocol: per sampled theta, find the size knob giving
/// Var(log P-hat) ~ 1; keep the largest; run a pilot chain; return its
/// posterior mean as the start point and the empirical covariance of log theta
/// as the innovation covariance.
inline PilotResult pilot_workflow(const EstimatorFamily& family, const Dataset& data, const LogPrior& prior,
                                  const std::vector<Params>& theta_samples, const PilotSettings& settings,
                                  const RngStream& rng) {
  if (theta_samples.empty()) throw ConfigError("pilot workflow needs at least one theta sample");
  PilotResult out;
  const double cpu0 = thread_cpu_seconds();
  for (std::size_t i = 0; i < theta_samples.size(); ++i) {
    const std::size_t k =
        tune_knob_for_variance(family, data, theta_samples[i], settings, rng.derive(0).derive(static_cast<std::uint32_t>(i)));
    out.per_theta_knob.push_back(k);
    out.knob = std::max(out.knob, k);
  }
  out.tuning_cpu_seconds = thread_cpu_seconds() - cpu0;

  const std::size_t d = theta_samples.front().size();
  ProposalConfig pilot_prop = settings.pilot_proposal
                                  ? *settings.pilot_proposal
                                  : ProposalConfig::diagonal(std::vector<double>(d, 0.01));
  // Start from the sample with the highest prior density.
  std::size_t best = 0;
  for (std::size_t i = 1; i < theta_samples.size(); ++i)
    if (prior(theta_samples[i]) > prior(theta_samples[best])) best = i;
  out.pilot_chain = pmmh_run(family(out.knob), data, prior, theta_samples[best], pilot_prop,
                             settings.pilot_iterations, rng.derive(1));

  const auto burn = static_cast<std::size_t>(settings.burn_in_fraction * static_cast<double>(out.pilot_chain.size()));
  const Eigen::MatrixXd logs = out.pilot_chain.matrix(burn, true);
  const Eigen::RowVectorXd mean_log = logs.colwise().mean();
  const Eigen::MatrixXd centered = logs.rowwise() - mean_log;
  Eigen::MatrixXd cov = centered.transpose() * centered / static_cast<double>(std::max<Eigen::Index>(logs.rows() - 1, 1));
  // A stuck pilot chain leaves a singular covariance; keep the pilot walk then.
  Eigen::LLT<Eigen::MatrixXd> llt(cov);
  if (llt.info() != Eigen::Success || cov.diagonal().minCoeff() <= 0.0) cov = pilot_prop.covariance();
  out.proposal = ProposalConfig(cov);
  const Eigen::MatrixXd natural = out.pilot_chain.matrix(burn, false);
  const Eigen::RowVectorXd mean = natural.colwise().mean();
  for (Eigen::Index j = 0; j < mean.size(); ++j) out.start.push_back(mean(j));
  out.report.m_plus_recommended = out.knob;
  return out;
}

}  // namespace ff
