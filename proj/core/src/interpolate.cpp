#include "mars/interpolate.hpp"

#include <Eigen/Eigenvalues>
#include <cmath>
#include <numbers>

#include "mars/errors.hpp"

namespace mars::interpolate {

namespace {
constexpr double kJitterLadder[] = {0.0, 1e-10, 1e-8, 1e-6, 1e-4};
constexpr std::uint64_t kCvShuffleSeed = 0xCF01DULL;
constexpr int kCvFolds = 4;
constexpr double kLeakySlope = 0.01;
constexpr int kHiddenUnits = 32;
constexpr int kHiddenLayers = 3;

// Cholesky with escalating diagonal jitter; throws NumericError when the
// ladder is exhausted.
Eigen::LLT<Eigen::MatrixXd> robust_llt(const Eigen::MatrixXd& m, const char* what) {
  for (double jitter : kJitterLadder) {
    Eigen::MatrixXd shifted = m;
    if (jitter > 0.0)
      shifted.diagonal().array() += jitter;
    Eigen::LLT<Eigen::MatrixXd> llt(shifted);
    if (llt.info() == Eigen::Success) return llt;
  }
  throw NumericError(std::string(what) + ": Cholesky failed after max jitter");
}

}  // namespace

double matern52_kernel(const Eigen::VectorXd& x, const Eigen::VectorXd& xp,
                       double lengthscale, double signal_variance) {
  if (lengthscale <= 0.0)
    throw std::invalid_argument("matern52_kernel: lengthscale must be positive");
  const double r = (x - xp).norm();
  const double s = std::sqrt(5.0) * r / lengthscale;
  return signal_variance * (1.0 + s + s * s / 3.0) * std::exp(-s);
}

Eigen::MatrixXd matern52_gram(const Eigen::MatrixXd& a, const Eigen::MatrixXd& b,
                              double lengthscale, double signal_variance) {
  if (lengthscale <= 0.0)
    throw std::invalid_argument("matern52_gram: lengthscale must be positive");
  const double root5_over_ell = std::sqrt(5.0) / lengthscale;
  Eigen::MatrixXd gram(a.rows(), b.rows());
  for (Eigen::Index i = 0; i < a.rows(); ++i) {
    for (Eigen::Index j = 0; j < b.rows(); ++j) {
      const double s = root5_over_ell * (a.row(i) - b.row(j)).norm();
      gram(i, j) = signal_variance * (1.0 + s + s * s / 3.0) * std::exp(-s);
    }
  }
  return gram;
}

MaternGP::MaternGP(const envs::Dataset& data, double lengthscale, double signal_variance,
                   double noise_variance) {
  if (lengthscale <= 0.0 || signal_variance <= 0.0 || noise_variance <= 0.0)
    throw std::invalid_argument("MaternGP: hyperparameters must be positive");
  data.validate();
  lengthscale_ = lengthscale;
  signal_variance_ = signal_variance;
  noise_variance_ = noise_variance;
  train_inputs_ = data.inputs;
  train_targets_ = data.targets;
  Eigen::MatrixXd k = matern52_gram(train_inputs_, train_inputs_, lengthscale_,
                                    signal_variance_);
  k.diagonal().array() += noise_variance_;
  chol_ = robust_llt(k, "MaternGP");
  alpha_ = chol_.solve(train_targets_);
}

MaternGP MaternGP::prior(int input_dim, double lengthscale, double signal_variance,
                         double noise_variance) {
  if (lengthscale <= 0.0 || signal_variance <= 0.0 || noise_variance <= 0.0)
    throw std::invalid_argument("MaternGP: hyperparameters must be positive");
  MaternGP gp;
  gp.lengthscale_ = lengthscale;
  gp.signal_variance_ = signal_variance;
  gp.noise_variance_ = noise_variance;
  gp.train_inputs_.resize(0, input_dim);
  gp.train_targets_.resize(0);
  return gp;
}

double MaternGP::log_marginal_likelihood() const {
  const int m = train_size();
  if (m == 0) return 0.0;
  const double quad = train_targets_.dot(alpha_);
  const double logdet = 2.0 * chol_.matrixL().toDenseMatrix().diagonal().array().log().sum();
  return -0.5 * quad - 0.5 * logdet - 0.5 * m * std::log(2.0 * std::numbers::pi);
}

GPPosteriorMarginal MaternGP::posterior_marginal(const Eigen::MatrixXd& x) const {
  if (x.rows() < 1) throw std::invalid_argument("posterior_marginal: empty measurement set");
  if (x.cols() != train_inputs_.cols())
    throw std::invalid_argument("posterior_marginal: input dimension mismatch");
  GPPosteriorMarginal marg;
  const Eigen::MatrixXd k_star_star =
      matern52_gram(x, x, lengthscale_, signal_variance_);
  if (train_size() == 0) {
    marg.mean = Eigen::VectorXd::Zero(x.rows());
    marg.cov = k_star_star;
    return marg;
  }
  const Eigen::MatrixXd k_star =
      matern52_gram(train_inputs_, x, lengthscale_, signal_variance_);  // m x k
  marg.mean = k_star.transpose() * alpha_;
  marg.cov = k_star_star - k_star.transpose() * chol_.solve(k_star);
  marg.cov = 0.5 * (marg.cov + marg.cov.transpose()).eval();
  return marg;
}

Eigen::VectorXd MaternGP::sample(const Eigen::MatrixXd& x, RandomStream& rng) const {
  return gp_sample(posterior_marginal(x), rng);
}

Eigen::VectorXd MaternGP::posterior_mean(const Eigen::MatrixXd& x) const {
  if (train_size() == 0) return Eigen::VectorXd::Zero(x.rows());
  const Eigen::MatrixXd k_star =
      matern52_gram(train_inputs_, x, lengthscale_, signal_variance_);
  return k_star.transpose() * alpha_;
}

MaternGP gp_fit(const envs::Dataset& data, double lengthscale, double signal_variance,
                double noise_variance) {
  return MaternGP(data, lengthscale, signal_variance, noise_variance);
}

double gp_log_marginal_likelihood(const MaternGP& gp) { return gp.log_marginal_likelihood(); }

GPPosteriorMarginal gp_posterior_marginal(const MaternGP& gp, const Eigen::MatrixXd& x) {
  return gp.posterior_marginal(x);
}

Eigen::VectorXd gp_sample(const GPPosteriorMarginal& marg, RandomStream& rng) {
  const Eigen::Index k = marg.mean.size();
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(marg.cov);
  if (eig.info() != Eigen::Success) throw NumericError("gp_sample: eigendecomposition failed");
  const Eigen::VectorXd scale = eig.eigenvalues().cwiseMax(0.0).cwiseSqrt();
  Eigen::VectorXd z(k);
  for (Eigen::Index i = 0; i < k; ++i) z(i) = rng.normal();
  return marg.mean + eig.eigenvectors() * scale.asDiagonal() * z;
}

std::vector<double> default_lengthscale_grid() {
  std::vector<double> grid(10);
  const double lo = std::log10(0.001), hi = std::log10(10.0);
  for (int i = 0; i < 10; ++i)
    grid[i] = std::pow(10.0, lo + (hi - lo) * i / 9.0);
  return grid;
}

namespace {

// Log density of y under N(mean, cov + noise*I).
double log_predictive_density(const Eigen::VectorXd& y, const GPPosteriorMarginal& marg,
                              double noise_variance) {
  Eigen::MatrixXd cov = marg.cov;
  cov.diagonal().array() += noise_variance;
  const auto llt = robust_llt(cov, "log_predictive_density");
  const Eigen::VectorXd resid = y - marg.mean;
  const double quad = resid.dot(llt.solve(resid));
  const double logdet = 2.0 * llt.matrixL().toDenseMatrix().diagonal().array().log().sum();
  return -0.5 * quad - 0.5 * logdet -
         0.5 * static_cast<double>(y.size()) * std::log(2.0 * std::numbers::pi);
}

}  // namespace

double cv_select_lengthscale(const envs::TaskCollection& tasks,
                             const std::vector<double>& candidates,
                             double signal_variance, double noise_variance) {
  tasks.validate();
  if (candidates.empty())
    throw std::invalid_argument("cv_select_lengthscale: empty candidate list");
  for (int i = 0; i < tasks.size(); ++i)
    if (tasks.tasks[i].size() < kCvFolds)
      throw std::invalid_argument("cv_select_lengthscale: task " + std::to_string(i) +
                                  " has fewer than 4 points");

  std::vector<double> mean_score(candidates.size(), 0.0);
  int fold_count = 0;
  for (int ti = 0; ti < tasks.size(); ++ti) {
    const envs::Dataset& task = tasks.tasks[ti];
    const int m = task.size();
    std::vector<int> order(m);
    for (int i = 0; i < m; ++i) order[i] = i;
    RandomStream shuffle_rng(kCvShuffleSeed, static_cast<std::uint64_t>(ti));
    shuffle_rng.shuffle(order);

    int offset = 0;
    for (int f = 0; f < kCvFolds; ++f) {
      const int fold_size = m / kCvFolds + (f < m % kCvFolds ? 1 : 0);
      envs::Dataset train, val;
      train.inputs.resize(m - fold_size, task.dim());
      train.targets.resize(m - fold_size);
      val.inputs.resize(fold_size, task.dim());
      val.targets.resize(fold_size);
      int tr = 0, va = 0;
      for (int i = 0; i < m; ++i) {
        const int row = order[i];
        if (i >= offset && i < offset + fold_size) {
          val.inputs.row(va) = task.inputs.row(row);
          val.targets(va++) = task.targets(row);
        } else {
          train.inputs.row(tr) = task.inputs.row(row);
          train.targets(tr++) = task.targets(row);
        }
      }
      offset += fold_size;
      ++fold_count;
      for (std::size_t c = 0; c < candidates.size(); ++c) {
        const MaternGP gp(train, candidates[c], signal_variance, noise_variance);
        mean_score[c] += log_predictive_density(val.targets, gp.posterior_marginal(val.inputs),
                                                noise_variance);
      }
    }
  }

  std::size_t best = 0;
  for (std::size_t c = 1; c < candidates.size(); ++c)
    if (mean_score[c] > mean_score[best]) best = c;
  (void)fold_count;
  return candidates[best];
}

// ---------------------------------------------------------------------------
// MC-dropout interpolator
// ---------------------------------------------------------------------------

namespace {

double leaky_relu(double v) { return v > 0.0 ? v : kLeakySlope * v; }
double leaky_relu_grad(double v) { return v > 0.0 ? 1.0 : kLeakySlope; }

}  // namespace

McDropoutNet::McDropoutNet(int input_dim, double dropout, RandomStream& rng) {
  if (dropout < 0.0 || dropout >= 1.0)
    throw std::invalid_argument("McDropoutNet: dropout must be in [0, 1)");
  dropout_ = dropout;
  std::vector<int> widths = {input_dim, kHiddenUnits, kHiddenUnits, kHiddenUnits, 1};
  for (std::size_t l = 0; l + 1 < widths.size(); ++l) {
    const int fan_in = widths[l], fan_out = widths[l + 1];
    Eigen::MatrixXd w(fan_out, fan_in);
    const double stddev = 1.0 / std::sqrt(static_cast<double>(fan_in));
    for (int i = 0; i < fan_out; ++i)
      for (int j = 0; j < fan_in; ++j) w(i, j) = rng.truncated_normal(stddev);
    weights_.push_back(std::move(w));
    biases_.push_back(Eigen::VectorXd::Zero(fan_out));
  }
}

Eigen::VectorXd McDropoutNet::posterior_mean(const Eigen::MatrixXd& x) const {
  Eigen::MatrixXd h = x.transpose();  // layers operate on columns
  for (int l = 0; l < kHiddenLayers; ++l)
    h = ((weights_[l] * h).colwise() + biases_[l]).unaryExpr(&leaky_relu);
  const Eigen::MatrixXd out = (weights_[kHiddenLayers] * h).colwise() + biases_[kHiddenLayers];
  return out.row(0).transpose();
}

Eigen::VectorXd McDropoutNet::sample(const Eigen::MatrixXd& x, RandomStream& rng) const {
  if (dropout_ == 0.0) return posterior_mean(x);
  const double keep = 1.0 - dropout_;
  Eigen::MatrixXd h = x.transpose();
  for (int l = 0; l < kHiddenLayers; ++l) {
    h = ((weights_[l] * h).colwise() + biases_[l]).unaryExpr(&leaky_relu);
    for (int i = 0; i < h.rows(); ++i) {
      const double mask = rng.uniform() < keep ? 1.0 / keep : 0.0;
      h.row(i) *= mask;
    }
  }
  const Eigen::MatrixXd out = (weights_[kHiddenLayers] * h).colwise() + biases_[kHiddenLayers];
  return out.row(0).transpose();
}

void McDropoutNet::train(const envs::Dataset& data, const McDropoutConfig& cfg,
                         RandomStream& rng) {
  const int m = data.size();
  const int batch = std::min(cfg.batch_size, m);
  const double keep = 1.0 - dropout_;

  std::vector<Eigen::MatrixXd> mw(weights_.size()), vw(weights_.size());
  std::vector<Eigen::VectorXd> mb(biases_.size()), vb(biases_.size());
  for (std::size_t l = 0; l < weights_.size(); ++l) {
    mw[l] = Eigen::MatrixXd::Zero(weights_[l].rows(), weights_[l].cols());
    vw[l] = mw[l];
    mb[l] = Eigen::VectorXd::Zero(biases_[l].size());
    vb[l] = mb[l];
  }
  constexpr double beta1 = 0.9, beta2 = 0.999, eps = 1e-8;
  long step = 0;

  std::vector<int> order(m);
  for (int i = 0; i < m; ++i) order[i] = i;

  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    rng.shuffle(order);
    for (int start = 0; start < m; start += batch) {
      const int bs = std::min(batch, m - start);
      Eigen::MatrixXd xb(data.dim(), bs);
      Eigen::VectorXd yb(bs);
      for (int i = 0; i < bs; ++i) {
        xb.col(i) = data.inputs.row(order[start + i]).transpose();
        yb(i) = data.targets(order[start + i]);
      }

      // Forward with dropout masks kept for the backward pass.
      std::vector<Eigen::MatrixXd> pre(kHiddenLayers + 1), act(kHiddenLayers + 1);
      std::vector<Eigen::MatrixXd> masks(kHiddenLayers);
      Eigen::MatrixXd h = xb;
      for (int l = 0; l < kHiddenLayers; ++l) {
        pre[l] = (weights_[l] * h).colwise() + biases_[l];
        Eigen::MatrixXd a = pre[l].unaryExpr(&leaky_relu);
        masks[l] = Eigen::MatrixXd::Ones(a.rows(), a.cols());
        if (dropout_ > 0.0) {
          for (int i = 0; i < a.rows(); ++i)
            for (int j = 0; j < a.cols(); ++j)
              masks[l](i, j) = rng.uniform() < keep ? 1.0 / keep : 0.0;
          a = a.cwiseProduct(masks[l]);
        }
        act[l] = a;
        h = a;
      }
      pre[kHiddenLayers] = (weights_[kHiddenLayers] * h).colwise() + biases_[kHiddenLayers];
      const Eigen::RowVectorXd out = pre[kHiddenLayers].row(0);

      // Backward: mean squared error over the batch.
      Eigen::RowVectorXd dout = 2.0 * (out - yb.transpose()) / static_cast<double>(bs);
      std::vector<Eigen::MatrixXd> gw(weights_.size());
      std::vector<Eigen::VectorXd> gb(biases_.size());
      Eigen::MatrixXd delta = dout;  // 1 x bs
      for (int l = kHiddenLayers; l >= 0; --l) {
        const Eigen::MatrixXd& below = (l == 0) ? xb : act[l - 1];
        gw[l] = delta * below.transpose();
        gb[l] = delta.rowwise().sum();
        if (l > 0) {
          Eigen::MatrixXd up = weights_[l].transpose() * delta;
          up = up.cwiseProduct(masks[l - 1]);
          delta = up.cwiseProduct(pre[l - 1].unaryExpr(&leaky_relu_grad));
        }
      }

      ++step;
      const double corr1 = 1.0 - std::pow(beta1, static_cast<double>(step));
      const double corr2 = 1.0 - std::pow(beta2, static_cast<double>(step));
      for (std::size_t l = 0; l < weights_.size(); ++l) {
        mw[l] = beta1 * mw[l] + (1.0 - beta1) * gw[l];
        vw[l] = beta2 * vw[l].array().matrix() + (1.0 - beta2) * gw[l].cwiseProduct(gw[l]);
        weights_[l] -= cfg.learning_rate *
                       ((mw[l] / corr1).array() / ((vw[l] / corr2).array().sqrt() + eps))
                           .matrix();
        weights_[l] -= cfg.learning_rate * cfg.weight_decay * weights_[l];
        mb[l] = beta1 * mb[l] + (1.0 - beta1) * gb[l];
        vb[l] = beta2 * vb[l] + (1.0 - beta2) * gb[l].cwiseProduct(gb[l]);
        biases_[l] -= cfg.learning_rate *
                      ((mb[l] / corr1).array() / ((vb[l] / corr2).array().sqrt() + eps))
                          .matrix();
      }
    }
  }
}

McDropoutNet McDropoutNet::fit(const envs::Dataset& data, const McDropoutConfig& cfg,
                               RandomStream& rng) {
  data.validate();
  McDropoutNet net(data.dim(), cfg.dropout, rng);
  net.train(data, cfg, rng);
  return net;
}

McDropoutNet mcdropout_fit(const envs::Dataset& data, const McDropoutConfig& cfg,
                           RandomStream& rng) {
  return McDropoutNet::fit(data, cfg, rng);
}

Eigen::VectorXd mcdropout_sample(const McDropoutNet& net, const Eigen::MatrixXd& x,
                                 RandomStream& rng) {
  return net.sample(x, rng);
}

FittedInterpolators fit_task_interpolators(const envs::TaskCollection& tasks,
                                           const InterpolatorConfig& cfg,
                                           RandomStream& rng) {
  tasks.validate();
  FittedInterpolators out;
  if (cfg.kind == "gp") {
    double ell = cfg.lengthscale;
    if (ell <= 0.0)
      ell = cv_select_lengthscale(tasks, default_lengthscale_grid(), cfg.signal_variance,
                                  cfg.noise_variance);
    out.selected_lengthscale = ell;
    for (const auto& t : tasks.tasks)
      out.models.push_back(std::make_shared<MaternGP>(t, ell, cfg.signal_variance,
                                                      cfg.noise_variance));
  } else if (cfg.kind == "mc-dropout") {
    for (const auto& t : tasks.tasks) {
      RandomStream task_rng = rng.fork();
      out.models.push_back(
          std::make_shared<McDropoutNet>(McDropoutNet::fit(t, cfg.mc, task_rng)));
    }
  } else {
    throw std::invalid_argument("fit_task_interpolators: unknown kind '" + cfg.kind + "'");
  }
  return out;
}

}  // namespace mars::interpolate
