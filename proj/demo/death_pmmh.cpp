// PMMH on the D50 death-process dataset with the exact likelihood and with
// the Frankenfilter estimator.
#include <cstdio>

#include <frankenfilter/frankenfilter.hpp>

int main() {
  using namespace ff;
  const auto d = synthesize_preset("D50");
  const MjpModel model(d.model);
  const auto prior = d.model.log_prior_fn();
  const auto proposal = ProposalConfig::diagonal({0.02});

  const LikelihoodEstimator direct = make_exact_death_estimator(100);
  const LikelihoodEstimator franken =
      make_frankenfilter(model, FilterConfig::make(50, 0, 400), ProposalKind::kForward);

  struct Run {
    const char* name;
    const LikelihoodEstimator* est;
  };
  for (const Run& r : {Run{"Direct", &direct}, Run{"FF(50,400)", &franken}}) {
    const Chain chain = pmmh_run(*r.est, d.synth.data, prior, d.preset.theta, proposal, 5000, RngStream(1));
    const ChainSummary s = summarize_chain(chain, 0.1);
    std::printf("%-11s theta/theta_true %.3f (sd %.3f)  ESS %.0f  acc %.2f  cpu %.2fs\n", r.name,
                s.mean[0] / d.preset.theta[0], s.sd[0] / d.preset.theta[0], s.ess[0], s.acceptance_rate,
                s.cpu_seconds);
  }
}
