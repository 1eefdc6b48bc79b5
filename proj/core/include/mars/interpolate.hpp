#pragma once

#include <Eigen/Cholesky>
#include <Eigen/Dense>
#include <memory>
#include <vector>

#include "mars/envs.hpp"
#include "mars/random.hpp"

namespace mars::interpolate {

// Matern nu=5/2 covariance between two points.
double matern52_kernel(const Eigen::VectorXd& x, const Eigen::VectorXd& xp,
                       double lengthscale, double signal_variance);

// Gram matrix between the rows of a and the rows of b.
Eigen::MatrixXd matern52_gram(const Eigen::MatrixXd& a, const Eigen::MatrixXd& b,
                              double lengthscale, double signal_variance);

// Mean and covariance of interpolated function values at a measurement set.
struct GPPosteriorMarginal {
  Eigen::VectorXd mean;  // k
  Eigen::MatrixXd cov;   // k x k, symmetric PSD up to jitter
};

// Per-task Bayesian interpolator: posterior over function values at
// arbitrary measurement sets, plus sampling.
class Interpolator {
 public:
  virtual ~Interpolator() = default;
  virtual Eigen::VectorXd sample(const Eigen::MatrixXd& x, RandomStream& rng) const = 0;
  virtual Eigen::VectorXd posterior_mean(const Eigen::MatrixXd& x) const = 0;
};

// Exposes the posterior mean where a sample is requested; used by the
// no-sampling ablation.
class MeanInterpolator : public Interpolator {
 public:
  explicit MeanInterpolator(std::shared_ptr<const Interpolator> base)
      : base_(std::move(base)) {}
  Eigen::VectorXd sample(const Eigen::MatrixXd& x, RandomStream&) const override {
    return base_->posterior_mean(x);
  }
  Eigen::VectorXd posterior_mean(const Eigen::MatrixXd& x) const override {
    return base_->posterior_mean(x);
  }

 private:
  std::shared_ptr<const Interpolator> base_;
};

// Zero-mean GP regression with the Matern-5/2 kernel. Stores the Cholesky
// factor of K + noise_variance*I; factorization failures escalate through
// a jitter ladder before giving up.
class MaternGP : public Interpolator {
 public:
  MaternGP(const envs::Dataset& data, double lengthscale, double signal_variance,
           double noise_variance);

  // GP prior (no observations) over functions of dimension input_dim.
  static MaternGP prior(int input_dim, double lengthscale, double signal_variance,
                        double noise_variance);

  double log_marginal_likelihood() const;
  GPPosteriorMarginal posterior_marginal(const Eigen::MatrixXd& x) const;

  Eigen::VectorXd sample(const Eigen::MatrixXd& x, RandomStream& rng) const override;
  Eigen::VectorXd posterior_mean(const Eigen::MatrixXd& x) const override;

  double lengthscale() const { return lengthscale_; }
  double signal_variance() const { return signal_variance_; }
  double noise_variance() const { return noise_variance_; }
  int train_size() const { return static_cast<int>(train_inputs_.rows()); }

 private:
  MaternGP() = default;

  double lengthscale_ = 1.0;
  double signal_variance_ = 1.0;
  double noise_variance_ = 0.01;
  Eigen::MatrixXd train_inputs_;
  Eigen::VectorXd train_targets_;
  Eigen::LLT<Eigen::MatrixXd> chol_;
  Eigen::VectorXd alpha_;  // (K + noise*I)^-1 y
};

MaternGP gp_fit(const envs::Dataset& data, double lengthscale, double signal_variance,
                double noise_variance);
double gp_log_marginal_likelihood(const MaternGP& gp);
GPPosteriorMarginal gp_posterior_marginal(const MaternGP& gp, const Eigen::MatrixXd& x);

// Draw from N(mean, cov) through a symmetric eigendecomposition square
// root; exact for PSD covariance including the all-zero matrix.
Eigen::VectorXd gp_sample(const GPPosteriorMarginal& marg, RandomStream& rng);

// 10 log-uniformly spaced lengthscales in [0.001, 10].
std::vector<double> default_lengthscale_grid();

// Argmax over candidates of the mean 4-fold cross-validated held-out log
// marginal likelihood across all tasks; ties break toward the smaller index.
double cv_select_lengthscale(const envs::TaskCollection& tasks,
                             const std::vector<double>& candidates,
                             double signal_variance, double noise_variance);

struct McDropoutConfig {
  double dropout = 0.1;
  int epochs = 100;
  double learning_rate = 1e-3;
  double weight_decay = 1e-4;
  int batch_size = 8;
};

// MC-dropout regression net: 3 hidden layers of 32 leaky-ReLU units.
// Sampling runs one stochastic forward pass with inverted-dropout scaling,
// so dropout = 0 reduces exactly to the deterministic network.
class McDropoutNet : public Interpolator {
 public:
  McDropoutNet(int input_dim, double dropout, RandomStream& rng);

  static McDropoutNet fit(const envs::Dataset& data, const McDropoutConfig& cfg,
                          RandomStream& rng);

  Eigen::VectorXd sample(const Eigen::MatrixXd& x, RandomStream& rng) const override;
  Eigen::VectorXd posterior_mean(const Eigen::MatrixXd& x) const override;

  double dropout() const { return dropout_; }

 private:
  void train(const envs::Dataset& data, const McDropoutConfig& cfg, RandomStream& rng);

  double dropout_ = 0.1;
  std::vector<Eigen::MatrixXd> weights_;
  std::vector<Eigen::VectorXd> biases_;
};

McDropoutNet mcdropout_fit(const envs::Dataset& data, const McDropoutConfig& cfg,
                           RandomStream& rng);
Eigen::VectorXd mcdropout_sample(const McDropoutNet& net, const Eigen::MatrixXd& x,
                                 RandomStream& rng);

// Fits one interpolator per task; kind is "gp" or "mc-dropout".
struct InterpolatorConfig {
  std::string kind = "gp";
  double lengthscale = 0.0;  // <= 0 selects by cross-validation
  double signal_variance = 1.0;
  double noise_variance = 0.01;
  McDropoutConfig mc;
};

struct FittedInterpolators {
  std::vector<std::shared_ptr<const Interpolator>> models;
  double selected_lengthscale = 0.0;  // GP only
};

FittedInterpolators fit_task_interpolators(const envs::TaskCollection& tasks,
                                           const InterpolatorConfig& cfg,
                                           RandomStream& rng);

}  // namespace mars::interpolate
