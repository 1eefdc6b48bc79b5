#pragma once

#include <Eigen/Dense>
#include <memory>
#include <string>
#include <vector>

#include "mars/envs.hpp"
#include "mars/interpolate.hpp"
#include "mars/random.hpp"

namespace mars::scorenet {

struct ScoreNetConfig {
  int embed_dim = 32;
  int num_heads = 8;
  int key_size = 16;
  int num_blocks = 2;
  int ffn_hidden = 64;
  double grad_clip = 10.0;
  double learning_rate = 1e-3;
  long train_iters = 20000;
  bool spectral_norm = true;
  int measurement_size = 8;  // k used when sampling measurement sets in training

  void validate() const;
};

struct LinearLayer {
  std::string name;
  Eigen::MatrixXd w;  // out x in
  Eigen::VectorXd b;  // out
  Eigen::VectorXd u;  // power-iteration state; empty when the layer is not normalized
};

// All weights of the attention score network. Layer order: token embedding,
// then per block the attention projections (q, k, v, out) and the two
// feed-forward layers, then the final output layer (never normalized).
struct ScoreNetworkParams {
  ScoreNetConfig config;
  int token_dim = 2;
  int output_dim = 1;
  std::vector<LinearLayer> layers;

  static ScoreNetworkParams init(const ScoreNetConfig& cfg, int token_dim, int output_dim,
                                 RandomStream& rng);

  int final_layer() const { return static_cast<int>(layers.size()) - 1; }
  long parameter_count() const;
};

struct SpectralNormResult {
  Eigen::MatrixXd w;
  Eigen::VectorXd u;
  double sigma = 0.0;
};

// One power-iteration refinement of u, then division of w by the spectral
// norm estimate. A zero matrix is returned unchanged with sigma = 0; an
// estimate within 1e-12 of one skips the division so re-normalizing an
// already-normalized matrix is an exact no-op.
SpectralNormResult spectral_normalize(const Eigen::MatrixXd& w, const Eigen::VectorXd& u);

// n power-iteration refinements of u without touching w.
Eigen::VectorXd power_iterate(const Eigen::MatrixXd& w, Eigen::VectorXd u, int steps);

// Score estimate at measurement set x (k x d) and function values h (k).
// Permutation equivariant over the k points.
Eigen::VectorXd forward(const ScoreNetworkParams& params, const Eigen::MatrixXd& x,
                        const Eigen::VectorXd& h);

// Distributional variant: tokens are the samples alone and the output has
// one score entry per sample coordinate.
Eigen::MatrixXd distribution_mode_forward(const ScoreNetworkParams& params,
                                          const Eigen::MatrixXd& samples);

// tr(ds/df) + 0.5 * ||s||^2 for one task; the trace is exact, computed via
// one gradient pass per output coordinate.
double score_matching_term(const ScoreNetworkParams& params, const Eigen::MatrixXd& x,
                           const Eigen::VectorXd& f);

struct LayerGrads {
  Eigen::MatrixXd w;
  Eigen::VectorXd b;
};

struct LossGradient {
  double loss = 0.0;
  std::vector<LayerGrads> grads;
};

// Gradient over all parameters of the mean score-matching loss across the
// task batch, clipped to global norm <= config.grad_clip.
LossGradient loss_gradient(const ScoreNetworkParams& params, const Eigen::MatrixXd& x,
                           const std::vector<Eigen::VectorXd>& f_batch);

// Adam state plus the per-step spectral re-normalization.
class ScoreNetTrainer {
 public:
  explicit ScoreNetTrainer(ScoreNetworkParams params);

  // One gradient update on a batch of function-value matrices (k x output_dim
  // each); returns the batch loss.
  double step(const Eigen::MatrixXd& x, const std::vector<Eigen::MatrixXd>& f_batch);

  const ScoreNetworkParams& params() const { return params_; }
  ScoreNetworkParams take() { return std::move(params_); }

 private:
  ScoreNetworkParams params_;
  std::vector<LayerGrads> adam_m_, adam_v_;
  long adam_t_ = 0;
};

// Alg-1 style meta-training: per iteration sample a measurement set from nu,
// draw function values from every task's interpolator posterior, and take one
// score-matching gradient step.
ScoreNetworkParams meta_train(
    const envs::TaskCollection& tasks,
    const std::vector<std::shared_ptr<const interpolate::Interpolator>>& interpolators,
    const envs::MeasurementDistribution& nu, const ScoreNetConfig& cfg,
    int measurement_size, RandomStream& rng, std::vector<double>* loss_log = nullptr);

// Distributional score estimation: per iteration a random subset of the
// sample rows forms the token set.
ScoreNetworkParams train_distribution_score(const Eigen::MatrixXd& samples, int subset_size,
                                            const ScoreNetConfig& cfg, long iters,
                                            RandomStream& rng,
                                            std::vector<double>* loss_log = nullptr);

}  // namespace mars::scorenet
