#include "mbf/optim.hpp"

#include <cmath>
#include <sstream>

#include "mbf/parallel.hpp"

namespace mbf::optim {

namespace {

void require_grads(const StepInput& in) {
  if (in.grads == nullptr) throw OptimError("step input carries no gradients");
}

// Dense layer parameters as the bias-augmented (I+1) x O matrix; this is the
// flat layout reinterpreted, no reordering.
Matrix dense_augmented(const nn::LayerSpec& L, const nn::LayerParams& v) {
  const std::size_t rows = L.in_dim + (L.has_bias ? 1 : 0);
  std::vector<double> data;
  data.reserve(rows * L.out_dim);
  data.insert(data.end(), v.weight.begin(), v.weight.end());
  data.insert(data.end(), v.bias.begin(), v.bias.end());
  Matrix m(rows, L.out_dim);
  std::copy(data.begin(), data.end(), m.data());
  return m;
}

void dense_unaugment(const nn::LayerSpec& L, const Matrix& m, nn::LayerParams& out) {
  const std::size_t w = L.in_dim * L.out_dim;
  std::copy_n(m.data(), w, out.weight.begin());
  if (L.has_bias) std::copy_n(m.data() + w, L.out_dim, out.bias.begin());
}

// Decoupled update: W -= lr * (direction + gamma * W)
void apply_direction(nn::LayerParams& p, const nn::LayerParams& dir, double lr, double gamma) {
  for (std::size_t k = 0; k < p.weight.size(); ++k) p.weight[k] -= lr * (dir.weight[k] + gamma * p.weight[k]);
  for (std::size_t k = 0; k < p.bias.size(); ++k) p.bias[k] -= lr * (dir.bias[k] + gamma * p.bias[k]);
}

void accumulate_momentum(nn::Gradients& m, const nn::Gradients& g, double mu) {
  for (std::size_t l = 0; l < m.layers.size(); ++l) {
    auto& ml = m.layers[l];
    const auto& gl = g.layers[l];
    for (std::size_t k = 0; k < ml.weight.size(); ++k) ml.weight[k] = mu * ml.weight[k] + gl.weight[k];
    for (std::size_t k = 0; k < ml.bias.size(); ++k) ml.bias[k] = mu * ml.bias[k] + gl.bias[k];
  }
}

void check_grad_shapes(const nn::Gradients& g, const nn::Params& p) {
  if (g.layers.size() != p.layers.size()) throw OptimError("gradient/parameter layer count mismatch");
  for (std::size_t l = 0; l < g.layers.size(); ++l)
    if (g.layers[l].weight.size() != p.layers[l].weight.size() || g.layers[l].bias.size() != p.layers[l].bias.size())
      throw OptimError("gradient/parameter shape mismatch at layer " + std::to_string(l));
}

std::vector<double> flat_layer(const nn::LayerParams& v) {
  std::vector<double> f(v.weight);
  f.insert(f.end(), v.bias.begin(), v.bias.end());
  return f;
}

Matrix invert_block(const Matrix& g, double damping, std::size_t layer, const std::string& label) {
  try {
    return damping > 0.0 ? linalg::damped_inverse(g, damping) : linalg::spd_inverse(g);
  } catch (const linalg::LinalgError& e) {
    std::ostringstream os;
    os << "inversion failed for layer " << layer << " block " << label << ": " << e.what();
    throw BlockInversionError(os.str());
  }
}

}  // namespace

// ---------------------------------------------------------------- config

const char* to_string(Method m) {
  switch (m) {
    case Method::sgdm: return "sgdm";
    case Method::adam: return "adam";
    case Method::mbf: return "mbf";
    case Method::mbf_generic: return "mbf_generic";
    case Method::kfac: return "kfac";
    case Method::shampoo: return "shampoo";
  }
  return "?";
}

Method parse_method(const std::string& s) {
  if (s == "sgdm" || s == "sgd") return Method::sgdm;
  if (s == "adam") return Method::adam;
  if (s == "mbf") return Method::mbf;
  if (s == "mbf_generic") return Method::mbf_generic;
  if (s == "kfac") return Method::kfac;
  if (s == "shampoo") return Method::shampoo;
  throw ConfigError("unknown optimizer '" + s + "'");
}

OptimizerConfig OptimizerConfig::defaults(Method m) {
  OptimizerConfig c;
  c.method = m;
  switch (m) {
    case Method::mbf:
    case Method::mbf_generic: c.damping = 0.003; break;
    case Method::kfac: c.damping = 0.03; break;
    case Method::shampoo: c.damping = 0.01; break;
    case Method::adam: c.damping = 1e-8; break;
    case Method::sgdm: c.damping = 0.0; break;
  }
  return c;
}

void OptimizerConfig::validate() const {
  auto fail = [](const std::string& what) { throw ConfigError("optimizer config: " + what); };
  if (!(lr > 0.0)) fail("learning rate must be positive");
  if (!(damping >= 0.0)) fail("damping must be non-negative");
  if ((method == Method::mbf || method == Method::kfac || method == Method::shampoo) && !(damping > 0.0))
    fail("damping must be positive for " + std::string(to_string(method)));
  if (!(weight_decay >= 0.0)) fail("weight decay must be non-negative");
  if (!(momentum >= 0.0 && momentum < 1.0)) fail("momentum must lie in [0, 1)");
  if (!(ema >= 0.0 && ema <= 1.0)) fail("ema must lie in [0, 1]");
  if (!(adam_beta1 >= 0.0 && adam_beta1 < 1.0) || !(adam_beta2 >= 0.0 && adam_beta2 < 1.0))
    fail("adam betas must lie in [0, 1)");
  if (stats_period < 1 || inverse_period < 1) fail("update periods must be >= 1");
}

double lr_schedule(const LrSchedule& s, std::size_t epoch) {
  if (s.period == 0) return s.initial;
  return s.initial * std::pow(s.factor, static_cast<double>(epoch / s.period));
}

void Optimizer::step(nn::Params& params, const StepInput& input, double lr) {
  require_grads(input);
  check_grad_shapes(*input.grads, params);
  ++iteration_;
  apply(params, input, lr);
}

std::unique_ptr<Optimizer> make_optimizer(const OptimizerConfig& config, const nn::NetworkSpec& spec) {
  config.validate();
  spec.validate();
  switch (config.method) {
    case Method::sgdm: return std::make_unique<SgdMomentum>(config, spec);
    case Method::adam: return std::make_unique<Adam>(config, spec);
    case Method::mbf: return std::make_unique<MiniBlockFisher>(config, spec);
    case Method::mbf_generic: return std::make_unique<GenericMbf>(config, spec);
    case Method::kfac: return std::make_unique<Kfac>(config, spec);
    case Method::shampoo: return std::make_unique<Shampoo>(config, spec);
  }
  throw ConfigError("unknown optimizer");
}

// ---------------------------------------------------------------- SGD-m

SgdMomentum::SgdMomentum(const OptimizerConfig& config, const nn::NetworkSpec& spec)
    : Optimizer(config), momentum_(nn::zeros_like(spec)) {}

void SgdMomentum::apply(nn::Params& params, const StepInput& in, double lr) {
  accumulate_momentum(momentum_, *in.grads, config_.momentum);
  for (std::size_t l = 0; l < params.layers.size(); ++l)
    apply_direction(params.layers[l], momentum_.layers[l], lr, config_.weight_decay);
}

std::vector<std::size_t> SgdMomentum::statistics_floats() const {
  std::vector<std::size_t> out;
  for (const auto& l : momentum_.layers) out.push_back(l.weight.size() + l.bias.size());
  return out;
}

// ---------------------------------------------------------------- Adam

Adam::Adam(const OptimizerConfig& config, const nn::NetworkSpec& spec)
    : Optimizer(config), first_(nn::zeros_like(spec)), second_(nn::zeros_like(spec)) {}

void Adam::apply(nn::Params& params, const StepInput& in, double lr) {
  const double b1 = config_.adam_beta1, b2 = config_.adam_beta2, eps = config_.damping;
  const double k = static_cast<double>(iteration_);
  const double c1 = 1.0 - std::pow(b1, k);
  const double c2 = 1.0 - std::pow(b2, k);
  auto update = [&](std::vector<double>& w, std::vector<double>& m, std::vector<double>& v, const std::vector<double>& g) {
    for (std::size_t i = 0; i < w.size(); ++i) {
      m[i] = b1 * m[i] + (1.0 - b1) * g[i];
      v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
      const double mhat = m[i] / c1;
      const double vhat = v[i] / c2;
      w[i] -= lr * (mhat / (std::sqrt(vhat) + eps) + config_.weight_decay * w[i]);
    }
  };
  for (std::size_t l = 0; l < params.layers.size(); ++l) {
    update(params.layers[l].weight, first_.layers[l].weight, second_.layers[l].weight, in.grads->layers[l].weight);
    update(params.layers[l].bias, first_.layers[l].bias, second_.layers[l].bias, in.grads->layers[l].bias);
  }
}

std::vector<std::size_t> Adam::statistics_floats() const {
  std::vector<std::size_t> out;
  for (std::size_t l = 0; l < first_.layers.size(); ++l)
    out.push_back(first_.layers[l].weight.size() + first_.layers[l].bias.size() + second_.layers[l].weight.size() +
                  second_.layers[l].bias.size());
  return out;
}

// ---------------------------------------------------------------- MBF

MiniBlockFisher::MiniBlockFisher(const OptimizerConfig& config, const nn::NetworkSpec& spec)
    : Optimizer(config), spec_(spec), momentum_(nn::zeros_like(spec)) {
  const auto partition = fisher::partition_network(spec, config.shared_threshold);
  for (std::size_t l = 0; l < spec.layers.size(); ++l) {
    const auto& L = spec.layers[l];
    MbfLayerState st;
    st.partition = partition[l];
    if (L.kind == nn::LayerKind::dense) {
      const std::size_t side = L.in_dim + (L.has_bias ? 1 : 0);
      const std::size_t count = st.partition.shared() ? 1 : L.out_dim;
      st.stats.assign(count, Matrix(side, side));
    } else {
      const std::size_t K = L.kernel_size();
      st.stats.assign(L.in_channels * L.out_channels, Matrix(K, K));
      st.bias_stats.assign(L.bias_count(), 0.0);
    }
    layers_.push_back(std::move(st));
    refresh_inverses(l);
  }
}

void MiniBlockFisher::update_statistics(std::size_t l, const nn::LayerParams& g, double beta) {
  const auto& L = spec_.layers[l];
  auto& st = layers_[l];
  if (L.kind == nn::LayerKind::dense) {
    const Matrix aug = dense_augmented(L, g);  // (I+1) x O, column j = neuron j
    if (st.partition.shared()) {
      fisher::update_stats_ema_in_place(st.stats[0], fisher::spatial_average_fc(aug.transpose()), beta);
    } else {
      parallel_for(L.out_dim, [&](std::size_t j) {
        Vector col(aug.rows());
        for (std::size_t r = 0; r < aug.rows(); ++r) col[r] = aug(r, j);
        fisher::update_stats_ema_in_place(st.stats[j], fisher::approx_miniblock_fisher(col), beta);
      });
    }
  } else {
    const std::size_t K = L.kernel_size();
    parallel_for(st.stats.size(), [&](std::size_t b) {
      const std::span<const double> slice(g.weight.data() + b * K, K);
      fisher::update_stats_ema_in_place(st.stats[b], fisher::approx_miniblock_fisher(slice), beta);
    });
    for (std::size_t i = 0; i < st.bias_stats.size(); ++i)
      st.bias_stats[i] = beta * st.bias_stats[i] + (1.0 - beta) * g.bias[i] * g.bias[i];
  }
}

void MiniBlockFisher::refresh_inverses(std::size_t l) {
  auto& st = layers_[l];
  st.inverses.resize(st.stats.size());
  parallel_for(st.stats.size(), [&](std::size_t b) {
    const std::string& label = st.partition.shared() ? std::string("shared") : st.partition.blocks[b].label;
    st.inverses[b] = invert_block(st.stats[b], config_.damping, l, label);
  });
  st.bias_inverse.resize(st.bias_stats.size());
  for (std::size_t i = 0; i < st.bias_stats.size(); ++i) st.bias_inverse[i] = 1.0 / (st.bias_stats[i] + config_.damping);
  st.refreshed_at = iteration_;
}

void MiniBlockFisher::precondition_and_update(std::size_t l, nn::LayerParams& p, double lr) const {
  const auto& L = spec_.layers[l];
  const auto& st = layers_[l];
  const auto& m = momentum_.layers[l];
  nn::LayerParams dir{Vector(m.weight.size()), Vector(m.bias.size())};
  if (L.kind == nn::LayerKind::dense) {
    const Matrix aug = dense_augmented(L, m);
    Matrix pre;
    if (st.partition.shared()) {
      pre = linalg::matmul(st.inverses[0], aug);
    } else {
      pre = Matrix(aug.rows(), aug.cols());
      parallel_for(L.out_dim, [&](std::size_t j) {
        Vector col(aug.rows());
        for (std::size_t r = 0; r < aug.rows(); ++r) col[r] = aug(r, j);
        const Vector out = linalg::matvec(st.inverses[j], col);
        for (std::size_t r = 0; r < aug.rows(); ++r) pre(r, j) = out[r];
      });
    }
    dense_unaugment(L, pre, dir);
  } else {
    const std::size_t K = L.kernel_size();
    parallel_for(st.inverses.size(), [&](std::size_t b) {
      const std::span<const double> slice(m.weight.data() + b * K, K);
      const Vector out = linalg::matvec(st.inverses[b], slice);
      std::copy(out.begin(), out.end(), dir.weight.begin() + static_cast<long>(b * K));
    });
    for (std::size_t i = 0; i < m.bias.size(); ++i) dir.bias[i] = st.bias_inverse[i] * m.bias[i];
  }
  apply_direction(p, dir, lr, config_.weight_decay);
}

void MiniBlockFisher::apply(nn::Params& params, const StepInput& in, double lr) {
  const std::size_t k = iteration_;
  accumulate_momentum(momentum_, *in.grads, config_.momentum);
  for (std::size_t l = 0; l < params.layers.size(); ++l) {
    if (k % config_.stats_period == 0) update_statistics(l, in.grads->layers[l], config_.ema);
    if (k % config_.inverse_period == 0) refresh_inverses(l);
    precondition_and_update(l, params.layers[l], lr);
  }
}

void MiniBlockFisher::set_statistics(std::size_t l, std::vector<Matrix> stats, Vector bias_stats) {
  auto& st = layers_.at(l);
  if (stats.size() != st.stats.size()) throw OptimError("set_statistics: block count mismatch");
  for (std::size_t b = 0; b < stats.size(); ++b)
    if (stats[b].rows() != st.stats[b].rows() || stats[b].cols() != st.stats[b].cols())
      throw OptimError("set_statistics: block shape mismatch");
  if (!bias_stats.empty()) {
    if (bias_stats.size() != st.bias_stats.size()) throw OptimError("set_statistics: bias size mismatch");
    st.bias_stats = std::move(bias_stats);
  }
  st.stats = std::move(stats);
  refresh_inverses(l);
}

void MiniBlockFisher::accumulate_warm_start(const StepInput& in) {
  require_grads(in);
  if (warm_batches_ == 0) {
    for (auto& st : layers_) {
      for (auto& s : st.stats) s *= 0.0;
      std::fill(st.bias_stats.begin(), st.bias_stats.end(), 0.0);
    }
  }
  // Running mean: new = old + (x - old) / count, i.e. an EMA with beta = (c-1)/c.
  ++warm_batches_;
  const double beta = static_cast<double>(warm_batches_ - 1) / static_cast<double>(warm_batches_);
  for (std::size_t l = 0; l < layers_.size(); ++l) update_statistics(l, in.grads->layers[l], beta);
}

void MiniBlockFisher::finish_warm_start() {
  for (std::size_t l = 0; l < layers_.size(); ++l) refresh_inverses(l);
  warm_batches_ = 0;
}

std::vector<std::size_t> MiniBlockFisher::statistics_floats() const {
  std::vector<std::size_t> out;
  for (const auto& st : layers_) {
    std::size_t n = st.bias_stats.size();
    for (const auto& s : st.stats) n += s.size();
    out.push_back(n);
  }
  return out;
}

// ---------------------------------------------------------------- generic MBF

Vector generic_mbf_direction(const nn::NetworkSpec& spec, const fisher::NetworkPartition& partition,
                             const std::vector<Matrix>& curvature_rows, const nn::Gradients& grads, double damping) {
  if (partition.size() != spec.layers.size() || curvature_rows.size() != spec.layers.size() ||
      grads.layers.size() != spec.layers.size()) {
    throw OptimError("generic_mbf: per-layer inputs do not match the network");
  }
  if (!(damping >= 0.0)) throw OptimError("generic_mbf: damping must be non-negative");
  Vector direction;
  direction.reserve(spec.param_count());
  for (std::size_t l = 0; l < spec.layers.size(); ++l) {
    const auto& rows = curvature_rows[l];
    if (rows.cols() != spec.layers[l].param_count()) throw OptimError("generic_mbf: Jacobian width mismatch");
    const std::vector<double> g = flat_layer(grads.layers[l]);
    std::vector<double> d(g.size(), 0.0);
    const auto& blocks = partition[l].blocks;
    parallel_for(blocks.size(), [&](std::size_t b) {
      const auto& blk = blocks[b];
      const Matrix f = fisher::exact_miniblock_fisher(fisher::gather_columns(rows, blk.indices));
      const Vector gb = fisher::gather(g, blk.indices);
      Vector db(gb.size());
      if (blk.kind == fisher::BlockKind::conv_bias) {
        for (std::size_t i = 0; i < gb.size(); ++i) db[i] = gb[i] / (f(i, i) + damping);
      } else {
        db = linalg::matvec(invert_block(f, damping, l, blk.label), gb);
      }
      fisher::scatter(d, blk.indices, db);
    });
    direction.insert(direction.end(), d.begin(), d.end());
  }
  return direction;
}

void generic_mbf_step(nn::Params& params, const nn::NetworkSpec& spec, const fisher::NetworkPartition& partition,
                      const std::vector<Matrix>& curvature_rows, const nn::Gradients& grads, double lr,
                      double damping) {
  const Vector d = generic_mbf_direction(spec, partition, curvature_rows, grads, damping);
  Vector w = params.flatten();
  for (std::size_t k = 0; k < w.size(); ++k) w[k] -= lr * d[k];
  params.assign(w);
}

GenericMbf::GenericMbf(const OptimizerConfig& config, const nn::NetworkSpec& spec)
    : Optimizer(config), spec_(spec), partition_(fisher::partition_network(spec, static_cast<std::size_t>(-1))) {}

void GenericMbf::apply(nn::Params& params, const StepInput& in, double lr) {
  if (in.per_sample_grads == nullptr) throw OptimError("mbf_generic needs per-sample gradients");
  generic_mbf_step(params, spec_, partition_, *in.per_sample_grads, *in.grads, lr, config_.damping);
}

std::vector<std::size_t> GenericMbf::statistics_floats() const { return std::vector<std::size_t>(spec_.layers.size(), 0); }

// ---------------------------------------------------------------- KFAC

Kfac::Kfac(const OptimizerConfig& config, const nn::NetworkSpec& spec)
    : Optimizer(config), spec_(spec), momentum_(nn::zeros_like(spec)) {
  for (std::size_t l = 0; l < spec.layers.size(); ++l) {
    const auto& L = spec.layers[l];
    if (L.kind != nn::LayerKind::dense) {
      throw ConfigError("kfac supports dense layers only; layer " + std::to_string(l) + " is conv2d");
    }
    const std::size_t side = L.in_dim + (L.has_bias ? 1 : 0);
    layers_.push_back({{Matrix(side, side), Matrix(L.out_dim, L.out_dim)}, {}, {}});
    refresh_inverses(l);
  }
}

fisher::KfacFactors Kfac::batch_factors(std::size_t l, const StepInput& in) const {
  if (in.tape == nullptr || in.preact_grads == nullptr) throw OptimError("kfac needs the tape and pre-activation gradients");
  const auto& L = spec_.layers[l];
  const Matrix& a = in.tape->inputs.at(l);
  return fisher::kfac_factors(L.has_bias ? fisher::augment_with_ones(a) : a, in.preact_grads->at(l));
}

void Kfac::refresh_inverses(std::size_t l) {
  auto& st = layers_[l];
  const double d = std::sqrt(config_.damping);
  st.inverse_a = invert_block(st.factors.a, d, l, "A");
  st.inverse_gamma = invert_block(st.factors.gamma, d, l, "Gamma");
}

void Kfac::set_factors(std::size_t l, fisher::KfacFactors factors) {
  auto& st = layers_.at(l);
  if (factors.a.rows() != st.factors.a.rows() || factors.gamma.rows() != st.factors.gamma.rows())
    throw OptimError("set_factors: shape mismatch");
  st.factors = std::move(factors);
  refresh_inverses(l);
}

void Kfac::apply(nn::Params& params, const StepInput& in, double lr) {
  const std::size_t k = iteration_;
  accumulate_momentum(momentum_, *in.grads, config_.momentum);
  for (std::size_t l = 0; l < params.layers.size(); ++l) {
    auto& st = layers_[l];
    const auto& L = spec_.layers[l];
    if (k % config_.stats_period == 0) {
      const auto f = batch_factors(l, in);
      fisher::update_stats_ema_in_place(st.factors.a, f.a, config_.ema);
      fisher::update_stats_ema_in_place(st.factors.gamma, f.gamma, config_.ema);
    }
    if (k % config_.inverse_period == 0) refresh_inverses(l);
    const Matrix pre = linalg::matmul(linalg::matmul(st.inverse_a, dense_augmented(L, momentum_.layers[l])), st.inverse_gamma);
    nn::LayerParams dir{Vector(L.weight_count()), Vector(L.bias_count())};
    dense_unaugment(L, pre, dir);
    apply_direction(params.layers[l], dir, lr, config_.weight_decay);
  }
}

void Kfac::accumulate_warm_start(const StepInput& in) {
  ++warm_batches_;
  const double beta = static_cast<double>(warm_batches_ - 1) / static_cast<double>(warm_batches_);
  for (std::size_t l = 0; l < layers_.size(); ++l) {
    const auto f = batch_factors(l, in);
    fisher::update_stats_ema_in_place(layers_[l].factors.a, f.a, beta);
    fisher::update_stats_ema_in_place(layers_[l].factors.gamma, f.gamma, beta);
  }
}

void Kfac::finish_warm_start() {
  for (std::size_t l = 0; l < layers_.size(); ++l) refresh_inverses(l);
  warm_batches_ = 0;
}

std::vector<std::size_t> Kfac::statistics_floats() const {
  std::vector<std::size_t> out;
  for (const auto& st : layers_) out.push_back(st.factors.a.size() + st.factors.gamma.size());
  return out;
}

// ---------------------------------------------------------------- Shampoo

Matrix shampoo_matricize(const nn::LayerSpec& L, const nn::LayerParams& v) {
  if (L.kind == nn::LayerKind::dense) return dense_augmented(L, v);
  const std::size_t J = L.in_channels, I = L.out_channels, K = L.kernel_size();
  Matrix m(I, J * K + (L.has_bias ? 1 : 0));
  for (std::size_t j = 0; j < J; ++j)
    for (std::size_t i = 0; i < I; ++i)
      for (std::size_t d = 0; d < K; ++d) m(i, j * K + d) = v.weight[(j * I + i) * K + d];
  if (L.has_bias)
    for (std::size_t i = 0; i < I; ++i) m(i, J * K) = v.bias[i];
  return m;
}

void shampoo_unmatricize(const nn::LayerSpec& L, const Matrix& m, nn::LayerParams& out) {
  if (L.kind == nn::LayerKind::dense) {
    dense_unaugment(L, m, out);
    return;
  }
  const std::size_t J = L.in_channels, I = L.out_channels, K = L.kernel_size();
  for (std::size_t j = 0; j < J; ++j)
    for (std::size_t i = 0; i < I; ++i)
      for (std::size_t d = 0; d < K; ++d) out.weight[(j * I + i) * K + d] = m(i, j * K + d);
  if (L.has_bias)
    for (std::size_t i = 0; i < I; ++i) out.bias[i] = m(i, J * K);
}

Shampoo::Shampoo(const OptimizerConfig& config, const nn::NetworkSpec& spec)
    : Optimizer(config), spec_(spec), momentum_(nn::zeros_like(spec)) {
  const nn::Params zero = nn::zeros_like(spec);
  for (std::size_t l = 0; l < spec.layers.size(); ++l) {
    const Matrix shape = shampoo_matricize(spec.layers[l], zero.layers[l]);
    layers_.push_back({Matrix(shape.rows(), shape.rows()), Matrix(shape.cols(), shape.cols()), {}, {}});
    refresh_roots(l);
  }
}

void Shampoo::refresh_roots(std::size_t l) {
  auto& st = layers_[l];
  auto root = [&](const Matrix& g, const char* side) {
    try {
      return linalg::inverse_pth_root(g, 4, config_.damping);
    } catch (const linalg::LinalgError& e) {
      throw BlockInversionError("shampoo root failed for layer " + std::to_string(l) + " " + side + ": " + e.what());
    }
  };
  st.left_root = root(st.left, "left");
  st.right_root = root(st.right, "right");
}

void Shampoo::set_statistics(std::size_t l, Matrix left, Matrix right) {
  auto& st = layers_.at(l);
  if (left.rows() != st.left.rows() || right.rows() != st.right.rows()) throw OptimError("set_statistics: shape mismatch");
  st.left = std::move(left);
  st.right = std::move(right);
  refresh_roots(l);
}

void Shampoo::apply(nn::Params& params, const StepInput& in, double lr) {
  const std::size_t k = iteration_;
  accumulate_momentum(momentum_, *in.grads, config_.momentum);
  for (std::size_t l = 0; l < params.layers.size(); ++l) {
    const auto& L = spec_.layers[l];
    auto& st = layers_[l];
    if (k % config_.stats_period == 0) {
      const Matrix g = shampoo_matricize(L, in.grads->layers[l]);
      fisher::update_stats_ema_in_place(st.left, fisher::gram(g.transpose()), config_.ema);
      fisher::update_stats_ema_in_place(st.right, fisher::gram(g), config_.ema);
    }
    if (k % config_.inverse_period == 0) refresh_roots(l);
    const Matrix pre = linalg::matmul(linalg::matmul(st.left_root, shampoo_matricize(L, momentum_.layers[l])), st.right_root);
    nn::LayerParams dir{Vector(L.weight_count()), Vector(L.bias_count())};
    shampoo_unmatricize(L, pre, dir);
    apply_direction(params.layers[l], dir, lr, config_.weight_decay);
  }
}

void Shampoo::accumulate_warm_start(const StepInput& in) {
  require_grads(in);
  ++warm_batches_;
  const double beta = static_cast<double>(warm_batches_ - 1) / static_cast<double>(warm_batches_);
  for (std::size_t l = 0; l < layers_.size(); ++l) {
    const Matrix g = shampoo_matricize(spec_.layers[l], in.grads->layers[l]);
    fisher::update_stats_ema_in_place(layers_[l].left, fisher::gram(g.transpose()), beta);
    fisher::update_stats_ema_in_place(layers_[l].right, fisher::gram(g), beta);
  }
}

void Shampoo::finish_warm_start() {
  for (std::size_t l = 0; l < layers_.size(); ++l) refresh_roots(l);
  warm_batches_ = 0;
}

std::vector<std::size_t> Shampoo::statistics_floats() const {
  std::vector<std::size_t> out;
  for (const auto& st : layers_) out.push_back(st.left.size() + st.right.size());
  return out;
}

}  // namespace mbf::optim
