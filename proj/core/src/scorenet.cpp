#include "mars/scorenet.hpp"

#include <cmath>

#include "mars/autodiff.hpp"
#include "mars/errors.hpp"

namespace mars::scorenet {

namespace ad = mars::autodiff;

namespace {

constexpr double kSigmaOneTolerance = 1e-12;
constexpr int kInitPowerSteps = 50;

double uniform_limit(int fan_in) { return std::sqrt(6.0 / static_cast<double>(fan_in)); }

Eigen::MatrixXd uniform_init(int rows, int cols, double limit, RandomStream& rng) {
  Eigen::MatrixXd w(rows, cols);
  for (int i = 0; i < rows; ++i)
    for (int j = 0; j < cols; ++j) w(i, j) = rng.uniform(-limit, limit);
  return w;
}

}  // namespace

void ScoreNetConfig::validate() const {
  if (embed_dim < 1 || num_heads < 1 || key_size < 1 || ffn_hidden < 1)
    throw std::invalid_argument("ScoreNetConfig: dimensions must be positive");
  if (embed_dim % num_heads != 0)
    throw std::invalid_argument("ScoreNetConfig: embed_dim must be divisible by num_heads");
  if (num_blocks < 1) throw std::invalid_argument("ScoreNetConfig: num_blocks must be >= 1");
  if (grad_clip <= 0.0) throw std::invalid_argument("ScoreNetConfig: grad_clip must be positive");
  if (learning_rate < 0.0)
    throw std::invalid_argument("ScoreNetConfig: learning_rate must be >= 0");
  if (train_iters < 0) throw std::invalid_argument("ScoreNetConfig: train_iters must be >= 0");
  if (measurement_size < 1)
    throw std::invalid_argument("ScoreNetConfig: measurement_size must be >= 1");
}

ScoreNetworkParams ScoreNetworkParams::init(const ScoreNetConfig& cfg, int token_dim,
                                            int output_dim, RandomStream& rng) {
  cfg.validate();
  if (token_dim < 1 || output_dim < 1)
    throw std::invalid_argument("ScoreNetworkParams: token/output dims must be positive");

  ScoreNetworkParams p;
  p.config = cfg;
  p.token_dim = token_dim;
  p.output_dim = output_dim;

  const int qkv = cfg.num_heads * cfg.key_size;
  auto push = [&](const std::string& name, int out, int in, double init_scale) {
    LinearLayer l;
    l.name = name;
    l.w = uniform_init(out, in, init_scale * uniform_limit(in), rng);
    l.b = Eigen::VectorXd::Zero(out);
    p.layers.push_back(std::move(l));
  };

  push("embed", cfg.embed_dim, token_dim, 1.0);
  for (int blk = 0; blk < cfg.num_blocks; ++blk) {
    const std::string prefix = "block" + std::to_string(blk + 1) + ".";
    // Self-attention projection weights start at twice the base range.
    push(prefix + "attn_q", qkv, cfg.embed_dim, 2.0);
    push(prefix + "attn_k", qkv, cfg.embed_dim, 2.0);
    push(prefix + "attn_v", qkv, cfg.embed_dim, 2.0);
    push(prefix + "attn_out", cfg.embed_dim, qkv, 2.0);
    push(prefix + "ffn1", cfg.ffn_hidden, cfg.embed_dim, 1.0);
    push(prefix + "ffn2", cfg.embed_dim, cfg.ffn_hidden, 1.0);
  }
  push("final", output_dim, cfg.embed_dim, 1.0);

  if (cfg.spectral_norm) {
    for (std::size_t i = 0; i + 1 < p.layers.size(); ++i) {
      LinearLayer& l = p.layers[i];
      Eigen::VectorXd u0(l.w.rows());
      for (int j = 0; j < u0.size(); ++j) u0(j) = rng.normal();
      l.u = power_iterate(l.w, u0, kInitPowerSteps);
      auto r = spectral_normalize(l.w, l.u);
      l.w = std::move(r.w);
      l.u = std::move(r.u);
    }
  }
  return p;
}

long ScoreNetworkParams::parameter_count() const {
  long n = 0;
  for (const auto& l : layers) n += l.w.size() + l.b.size();
  return n;
}

Eigen::VectorXd power_iterate(const Eigen::MatrixXd& w, Eigen::VectorXd u, int steps) {
  if (u.size() != w.rows() || u.norm() == 0.0)
    u = Eigen::VectorXd::Ones(w.rows()).normalized();
  else
    u.normalize();
  for (int s = 0; s < steps; ++s) {
    Eigen::VectorXd v = w.transpose() * u;
    const double nv = v.norm();
    if (nv == 0.0) break;
    v /= nv;
    Eigen::VectorXd wu = w * v;
    const double nu = wu.norm();
    if (nu == 0.0) break;
    u = wu / nu;
  }
  return u;
}

SpectralNormResult spectral_normalize(const Eigen::MatrixXd& w, const Eigen::VectorXd& u) {
  SpectralNormResult r;
  if (w.norm() == 0.0) {
    r.w = w;
    r.u = u;
    r.sigma = 0.0;
    return r;
  }
  Eigen::VectorXd uu = u;
  if (uu.size() != w.rows() || uu.norm() == 0.0)
    uu = Eigen::VectorXd::Ones(w.rows()).normalized();
  Eigen::VectorXd v = w.transpose() * uu;
  double nv = v.norm();
  if (nv == 0.0) {
    uu = Eigen::VectorXd::Ones(w.rows()).normalized();
    v = w.transpose() * uu;
    nv = v.norm();
  }
  v /= nv;
  Eigen::VectorXd wu = w * v;
  r.sigma = wu.norm();
  r.u = r.sigma > 0.0 ? Eigen::VectorXd(wu / r.sigma) : uu;
  r.w = std::abs(r.sigma - 1.0) <= kSigmaOneTolerance ? w : Eigen::MatrixXd(w / r.sigma);
  return r;
}

// ---------------------------------------------------------------------------
// Forward pass
// ---------------------------------------------------------------------------

namespace {

struct ParamVars {
  std::vector<ad::Var> w;
  std::vector<ad::Var> b;  // stored as 1 x out rows
};

ParamVars make_param_vars(const ScoreNetworkParams& p, bool as_leaves) {
  ParamVars pv;
  pv.w.reserve(p.layers.size());
  pv.b.reserve(p.layers.size());
  for (const auto& l : p.layers) {
    pv.w.push_back(as_leaves ? ad::leaf(l.w) : ad::constant(l.w));
    pv.b.push_back(as_leaves ? ad::leaf(l.b.transpose()) : ad::constant(l.b.transpose()));
  }
  return pv;
}

ad::Var linear(const ad::Var& x, const ParamVars& pv, int layer) {
  return ad::add_rowvec(ad::matmul(x, ad::transpose(pv.w[layer])), pv.b[layer]);
}

// Tokens (k x token_dim) -> per-point scores (k x output_dim).
ad::Var forward_graph(const ScoreNetworkParams& p, const ParamVars& pv, const ad::Var& tokens) {
  const ScoreNetConfig& cfg = p.config;
  const double attn_scale = 1.0 / std::sqrt(static_cast<double>(cfg.key_size));
  int li = 0;
  ad::Var e = linear(tokens, pv, li++);
  for (int blk = 0; blk < cfg.num_blocks; ++blk) {
    const ad::Var q = linear(e, pv, li++);
    const ad::Var k = linear(e, pv, li++);
    const ad::Var v = linear(e, pv, li++);
    std::vector<ad::Var> heads;
    heads.reserve(cfg.num_heads);
    for (int h = 0; h < cfg.num_heads; ++h) {
      const int c0 = h * cfg.key_size;
      const ad::Var qh = ad::slice_cols(q, c0, cfg.key_size);
      const ad::Var kh = ad::slice_cols(k, c0, cfg.key_size);
      const ad::Var vh = ad::slice_cols(v, c0, cfg.key_size);
      const ad::Var attn =
          ad::softmax_rows(ad::scale(ad::matmul(qh, ad::transpose(kh)), attn_scale));
      heads.push_back(ad::matmul(attn, vh));
    }
    const ad::Var merged = cfg.num_heads == 1 ? heads[0] : ad::hstack(heads);
    e = ad::add(e, linear(merged, pv, li++));
    const ad::Var hidden = ad::elu(linear(e, pv, li++));
    e = ad::add(e, linear(hidden, pv, li++));
  }
  return linear(e, pv, li);
}

Eigen::MatrixXd forward_values(const ScoreNetworkParams& p, const Eigen::MatrixXd& tokens) {
  const ScoreNetConfig& cfg = p.config;
  const double attn_scale = 1.0 / std::sqrt(static_cast<double>(cfg.key_size));
  int li = 0;
  auto lin = [&](const Eigen::MatrixXd& x, int layer) -> Eigen::MatrixXd {
    return (x * p.layers[layer].w.transpose()).rowwise() + p.layers[layer].b.transpose();
  };
  Eigen::MatrixXd e = lin(tokens, li++);
  for (int blk = 0; blk < cfg.num_blocks; ++blk) {
    const Eigen::MatrixXd q = lin(e, li++);
    const Eigen::MatrixXd k = lin(e, li++);
    const Eigen::MatrixXd v = lin(e, li++);
    Eigen::MatrixXd merged(e.rows(), cfg.num_heads * cfg.key_size);
    for (int h = 0; h < cfg.num_heads; ++h) {
      const int c0 = h * cfg.key_size;
      Eigen::MatrixXd logits =
          attn_scale * q.middleCols(c0, cfg.key_size) *
          k.middleCols(c0, cfg.key_size).transpose();
      for (Eigen::Index i = 0; i < logits.rows(); ++i) {
        const double mx = logits.row(i).maxCoeff();
        logits.row(i) = (logits.row(i).array() - mx).exp();
        logits.row(i) /= logits.row(i).sum();
      }
      merged.middleCols(c0, cfg.key_size) = logits * v.middleCols(c0, cfg.key_size);
    }
    e += lin(merged, li++);
    Eigen::MatrixXd hidden = lin(e, li++);
    hidden = hidden.unaryExpr(
        [](double x) { return x > 0.0 ? x : std::exp(x) - 1.0; });
    e += lin(hidden, li++);
  }
  return lin(e, li);
}

}  // namespace

Eigen::VectorXd forward(const ScoreNetworkParams& params, const Eigen::MatrixXd& x,
                        const Eigen::VectorXd& h) {
  if (x.rows() < 1) throw std::invalid_argument("forward: empty measurement set");
  if (x.rows() != h.size())
    throw std::invalid_argument("forward: X row count does not match h length");
  if (x.cols() + 1 != params.token_dim)
    throw std::invalid_argument("forward: input dimension does not match network");
  Eigen::MatrixXd tokens(x.rows(), params.token_dim);
  tokens << x, h;
  const Eigen::MatrixXd s = forward_values(params, tokens);
  if (!s.allFinite()) throw NumericError("forward: non-finite score estimate");
  return s.col(0);
}

Eigen::MatrixXd distribution_mode_forward(const ScoreNetworkParams& params,
                                          const Eigen::MatrixXd& samples) {
  if (samples.rows() < 1) throw std::invalid_argument("distribution_mode_forward: no samples");
  if (samples.cols() != params.token_dim)
    throw std::invalid_argument("distribution_mode_forward: sample dim mismatch");
  const Eigen::MatrixXd s = forward_values(params, samples);
  if (!s.allFinite()) throw NumericError("distribution_mode_forward: non-finite estimate");
  return s;
}

// ---------------------------------------------------------------------------
// Score matching loss
// ---------------------------------------------------------------------------

namespace {

// tr(ds/df) + 0.5*||s||^2 as a graph node. x_part may have zero columns
// (distribution mode); f_leaf must be a leaf of shape k x output_dim.
ad::Var score_matching_graph(const ScoreNetworkParams& p, const ParamVars& pv,
                             const Eigen::MatrixXd& x_part, const ad::Var& f_leaf) {
  const int k = static_cast<int>(f_leaf->rows());
  const int dy = static_cast<int>(f_leaf->cols());
  ad::Var tokens = x_part.cols() == 0
                       ? f_leaf
                       : ad::hstack({ad::constant(x_part), f_leaf});
  const ad::Var s = forward_graph(p, pv, tokens);

  // Exact trace: one gradient pass per output coordinate, keeping the
  // gradient graph differentiable for the parameter pass that follows.
  ad::Var trace;
  for (int j = 0; j < k; ++j) {
    for (int c = 0; c < dy; ++c) {
      const ad::Var sjc = ad::slice_cols(ad::slice_rows(s, j, 1), c, 1);
      const ad::Var g = ad::gradients(sjc, {f_leaf}, /*create_graph=*/true)[0];
      const ad::Var gjc = ad::slice_cols(ad::slice_rows(g, j, 1), c, 1);
      trace = trace ? ad::add(trace, gjc) : gjc;
    }
  }
  const ad::Var norm_term = ad::scale(ad::sum_all(ad::mul(s, s)), 0.5);
  return ad::add(trace, norm_term);
}

struct GeneralLossGradient {
  double loss = 0.0;
  std::vector<LayerGrads> grads;
};

GeneralLossGradient loss_gradient_general(const ScoreNetworkParams& params,
                                          const Eigen::MatrixXd& x,
                                          const std::vector<Eigen::MatrixXd>& f_batch) {
  if (f_batch.empty()) throw std::invalid_argument("loss_gradient: empty batch");
  GeneralLossGradient out;
  out.grads.resize(params.layers.size());
  for (std::size_t l = 0; l < params.layers.size(); ++l) {
    out.grads[l].w = Eigen::MatrixXd::Zero(params.layers[l].w.rows(), params.layers[l].w.cols());
    out.grads[l].b = Eigen::VectorXd::Zero(params.layers[l].b.size());
  }

  const double inv_n = 1.0 / static_cast<double>(f_batch.size());
  for (const Eigen::MatrixXd& f : f_batch) {
    ParamVars pv = make_param_vars(params, /*as_leaves=*/true);
    const ad::Var f_leaf = ad::leaf(f);
    const ad::Var task_loss = score_matching_graph(params, pv, x, f_leaf);
    out.loss += inv_n * task_loss->value(0, 0);

    std::vector<ad::Var> wrt;
    wrt.reserve(2 * pv.w.size());
    for (std::size_t l = 0; l < pv.w.size(); ++l) {
      wrt.push_back(pv.w[l]);
      wrt.push_back(pv.b[l]);
    }
    const std::vector<ad::Var> grads = ad::gradients(task_loss, wrt, /*create_graph=*/false);
    for (std::size_t l = 0; l < pv.w.size(); ++l) {
      out.grads[l].w += inv_n * grads[2 * l]->value;
      out.grads[l].b += inv_n * grads[2 * l + 1]->value.row(0).transpose();
    }
  }

  const double clip = params.config.grad_clip;
  if (std::isfinite(clip)) {
    double sq = 0.0;
    for (const auto& g : out.grads) sq += g.w.squaredNorm() + g.b.squaredNorm();
    const double norm = std::sqrt(sq);
    if (norm > clip) {
      const double factor = clip / norm;
      for (auto& g : out.grads) {
        g.w *= factor;
        g.b *= factor;
      }
    }
  }
  return out;
}

}  // namespace

double score_matching_term(const ScoreNetworkParams& params, const Eigen::MatrixXd& x,
                           const Eigen::VectorXd& f) {
  if (x.rows() != f.size())
    throw std::invalid_argument("score_matching_term: shape mismatch");
  ParamVars pv = make_param_vars(params, /*as_leaves=*/false);
  const ad::Var f_leaf = ad::leaf(Eigen::MatrixXd(f));
  return score_matching_graph(params, pv, x, f_leaf)->value(0, 0);
}

LossGradient loss_gradient(const ScoreNetworkParams& params, const Eigen::MatrixXd& x,
                           const std::vector<Eigen::VectorXd>& f_batch) {
  std::vector<Eigen::MatrixXd> fs;
  fs.reserve(f_batch.size());
  for (const auto& f : f_batch) fs.emplace_back(f);
  auto g = loss_gradient_general(params, x, fs);
  return LossGradient{g.loss, std::move(g.grads)};
}

// ---------------------------------------------------------------------------
// Training
// ---------------------------------------------------------------------------

ScoreNetTrainer::ScoreNetTrainer(ScoreNetworkParams params) : params_(std::move(params)) {
  adam_m_.resize(params_.layers.size());
  adam_v_.resize(params_.layers.size());
  for (std::size_t l = 0; l < params_.layers.size(); ++l) {
    adam_m_[l].w = Eigen::MatrixXd::Zero(params_.layers[l].w.rows(), params_.layers[l].w.cols());
    adam_m_[l].b = Eigen::VectorXd::Zero(params_.layers[l].b.size());
    adam_v_[l] = adam_m_[l];
  }
}

double ScoreNetTrainer::step(const Eigen::MatrixXd& x,
                             const std::vector<Eigen::MatrixXd>& f_batch) {
  const auto lg = loss_gradient_general(params_, x, f_batch);

  constexpr double beta1 = 0.9, beta2 = 0.999, eps = 1e-8;
  ++adam_t_;
  const double corr1 = 1.0 - std::pow(beta1, static_cast<double>(adam_t_));
  const double corr2 = 1.0 - std::pow(beta2, static_cast<double>(adam_t_));
  const double lr = params_.config.learning_rate;
  for (std::size_t l = 0; l < params_.layers.size(); ++l) {
    auto& m = adam_m_[l];
    auto& v = adam_v_[l];
    m.w = beta1 * m.w + (1.0 - beta1) * lg.grads[l].w;
    v.w = beta2 * v.w + (1.0 - beta2) * lg.grads[l].w.cwiseProduct(lg.grads[l].w);
    params_.layers[l].w -=
        lr * ((m.w / corr1).array() / ((v.w / corr2).array().sqrt() + eps)).matrix();
    m.b = beta1 * m.b + (1.0 - beta1) * lg.grads[l].b;
    v.b = beta2 * v.b + (1.0 - beta2) * lg.grads[l].b.cwiseProduct(lg.grads[l].b);
    params_.layers[l].b -=
        lr * ((m.b / corr1).array() / ((v.b / corr2).array().sqrt() + eps)).matrix();
  }

  if (params_.config.spectral_norm) {
    for (int l = 0; l < params_.final_layer(); ++l) {
      auto r = spectral_normalize(params_.layers[l].w, params_.layers[l].u);
      params_.layers[l].w = std::move(r.w);
      params_.layers[l].u = std::move(r.u);
    }
  }
  return lg.loss;
}

ScoreNetworkParams meta_train(
    const envs::TaskCollection& tasks,
    const std::vector<std::shared_ptr<const interpolate::Interpolator>>& interpolators,
    const envs::MeasurementDistribution& nu, const ScoreNetConfig& cfg,
    int measurement_size, RandomStream& rng, std::vector<double>* loss_log) {
  tasks.validate();
  if (interpolators.size() != static_cast<std::size_t>(tasks.size()))
    throw std::invalid_argument("meta_train: need one fitted interpolator per task");
  if (measurement_size < 1)
    throw std::invalid_argument("meta_train: measurement_size must be >= 1");

  ScoreNetTrainer trainer(
      ScoreNetworkParams::init(cfg, tasks.input_dim + 1, 1, rng));
  std::vector<Eigen::MatrixXd> f_batch(interpolators.size());
  for (long it = 0; it < cfg.train_iters; ++it) {
    const Eigen::MatrixXd x = envs::sample_measurement_set(nu, measurement_size, rng);
    for (std::size_t i = 0; i < interpolators.size(); ++i)
      f_batch[i] = interpolators[i]->sample(x, rng);
    const double loss = trainer.step(x, f_batch);
    if (loss_log) loss_log->push_back(loss);
  }
  return trainer.take();
}

ScoreNetworkParams train_distribution_score(const Eigen::MatrixXd& samples, int subset_size,
                                            const ScoreNetConfig& cfg, long iters,
                                            RandomStream& rng,
                                            std::vector<double>* loss_log) {
  const int n = static_cast<int>(samples.rows());
  const int d = static_cast<int>(samples.cols());
  if (n < 1) throw std::invalid_argument("train_distribution_score: no samples");
  const int k = std::min(subset_size, n);

  ScoreNetTrainer trainer(ScoreNetworkParams::init(cfg, d, d, rng));
  const Eigen::MatrixXd empty_x(k, 0);
  for (long it = 0; it < iters; ++it) {
    const std::vector<int> pick = rng.choose(n, k);
    Eigen::MatrixXd f(k, d);
    for (int i = 0; i < k; ++i) f.row(i) = samples.row(pick[i]);
    const double loss = trainer.step(empty_x, {f});
    if (loss_log) loss_log->push_back(loss);
  }
  return trainer.take();
}

}  // namespace mars::scorenet
