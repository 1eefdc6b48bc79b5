#pragma once

#include <Eigen/Dense>
#include <memory>
#include <variant>
#include <vector>

#include "mars/envs.hpp"
#include "mars/interpolate.hpp"
#include "mars/random.hpp"
#include "mars/scorenet.hpp"

namespace mars::fsvgd {

// Fixed BNN shape: three hidden layers of 32 leaky-ReLU units, scalar output.
struct BnnArchitecture {
  int input_dim = 1;

  static constexpr int kHiddenUnits = 32;
  static constexpr int kHiddenLayers = 3;
  static constexpr double kLeakySlope = 0.01;

  long parameter_count() const;
};

// L flattened parameter vectors approximating the functional posterior.
struct ParticleEnsemble {
  BnnArchitecture arch;
  std::vector<Eigen::VectorXd> particles;

  int size() const { return static_cast<int>(particles.size()); }
};

struct InferenceConfig {
  double step_size = 1e-3;      // gamma
  double bandwidth = 1.0;       // ell_k, fixed (no median heuristic)
  double likelihood_std = 0.1;  // sigma, on standardized targets
  int particles = 10;
  long steps = 10000;
  int measurement_size = 8;  // points drawn from nu per step
  int data_batch = 16;       // cap on training inputs appended per step
  double weight_decay = 0.0;

  void validate() const;
};

// Prior scores over function values at a measurement set. The learned
// network, an analytic zero-mean Matern GP, the zero score (vanilla BNN
// baseline) and per-step SSGE estimates are interchangeable here.
struct LearnedScore {
  scorenet::ScoreNetworkParams net;
};

struct GaussianProcessScore {
  double lengthscale = 1.0;
  double signal_variance = 1.0;
  double jitter = 1e-6;
};

struct ZeroScore {};

// Re-fits SSGE at every step on fresh interpolator posterior samples.
struct SsgeAdhocScore {
  std::vector<std::shared_ptr<const interpolate::Interpolator>> interpolators;
  double lengthscale = 0.2;
  int eigenpairs = 0;  // 0 selects by spectral mass
};

class PriorScore {
 public:
  using Source = std::variant<LearnedScore, GaussianProcessScore, ZeroScore, SsgeAdhocScore>;

  static PriorScore learned(scorenet::ScoreNetworkParams net);
  static PriorScore analytic_gp(double lengthscale, double signal_variance);
  static PriorScore zero();
  static PriorScore ssge_adhoc(
      std::vector<std::shared_ptr<const interpolate::Interpolator>> interpolators,
      double lengthscale);

  // Per-particle prior scores: row l holds the score at particle l's
  // function values. h is L x k, one row per particle.
  Eigen::MatrixXd evaluate(const Eigen::MatrixXd& x, const Eigen::MatrixXd& h,
                           RandomStream& rng) const;

  const Source& source() const { return source_; }

 private:
  explicit PriorScore(Source s) : source_(std::move(s)) {}
  Source source_;
};

// Unit direction w and bias b = -<w, x*> for a uniformly drawn domain point
// x*; spreads activation kinks across the domain.
struct SteinwartInit {
  Eigen::VectorXd w;
  double b = 0.0;
};
SteinwartInit steinwart_bias_init(int fan_in, const Eigen::VectorXd& domain_low,
                                  const Eigen::VectorXd& domain_high, RandomStream& rng);

// He-uniform weights; first-layer biases via the Steinwart scheme over the
// data domain, deeper hidden biases over a surrogate [-1, 1] activation
// range, output bias zero.
ParticleEnsemble init_particles(const BnnArchitecture& arch, int num_particles,
                                const envs::MeasurementDistribution& domain,
                                RandomStream& rng);

Eigen::VectorXd nn_forward(const Eigen::VectorXd& theta, const BnnArchitecture& arch,
                           const Eigen::MatrixXd& x);

// J^T v without materializing the Jacobian: gradient of <h_theta(x), v>
// with respect to theta.
Eigen::VectorXd nn_vjp(const Eigen::VectorXd& theta, const BnnArchitecture& arch,
                       const Eigen::MatrixXd& x, const Eigen::VectorXd& v);

// Gaussian likelihood score on the data coordinates of the augmented
// measurement vector; zero on the nu-sampled coordinates.
Eigen::VectorXd likelihood_score(const Eigen::VectorXd& y, const Eigen::VectorXd& h,
                                 double sigma, int data_offset);

struct SvgdKernel {
  Eigen::MatrixXd k;                       // L x L, RBF over function values
  std::vector<Eigen::MatrixXd> grad;       // grad[l] row i = d k(h_l, h_i) / d h_i
};
SvgdKernel svgd_kernel(const Eigen::MatrixXd& h, double bandwidth);

// One function-space SVGD update projected into parameter space through the
// network Jacobian.
void fsvgd_step(ParticleEnsemble& ensemble, const envs::Dataset& data,
                const PriorScore& prior, const envs::MeasurementDistribution& nu,
                const InferenceConfig& cfg, RandomStream& rng);

ParticleEnsemble run_inference(const envs::Dataset& data, const PriorScore& prior,
                               const BnnArchitecture& arch, const InferenceConfig& cfg,
                               const envs::MeasurementDistribution& nu, RandomStream& rng);

// Equally weighted Gaussian mixture predictions at query points.
struct PredictiveMixture {
  Eigen::MatrixXd member_means;  // L x q
  double sigma = 0.1;

  Eigen::VectorXd mean() const { return member_means.colwise().mean().transpose(); }
};
PredictiveMixture predictive(const ParticleEnsemble& ensemble, double sigma,
                             const Eigen::MatrixXd& x_query);

}  // namespace mars::fsvgd
