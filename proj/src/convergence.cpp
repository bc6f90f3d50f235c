#include "mbf/convergence.hpp"

#include <cmath>
#include <limits>
#include <sstream>

#include "mbf/optim.hpp"

namespace mbf::convergence {

namespace {

void require_single_output(const nn::NetworkSpec& spec) {
  spec.validate();
  if (spec.output_dim() != 1) throw PreconditionError("convergence harness needs a single-output network");
  if (spec.loss != nn::LossKind::squared_error) throw PreconditionError("convergence harness needs squared-error loss");
}

std::vector<Matrix> layer_jacobians(const nn::Params& params, const nn::NetworkSpec& spec, const Matrix& x,
                                    Matrix* outputs) {
  const auto fwd = nn::forward(params, spec, x);
  if (outputs) *outputs = fwd.outputs;
  return nn::per_sample_gradients(params, spec, fwd.tape, Matrix(x.rows(), 1, 1.0));
}

// Minimum block-Gram eigenvalue over every block, with per-block values.
double min_block_gram(const std::vector<Matrix>& jac, const fisher::NetworkPartition& partition,
                      std::vector<double>* per_block, std::vector<std::string>* labels) {
  double best = std::numeric_limits<double>::infinity();
  for (std::size_t l = 0; l < partition.size(); ++l)
    for (const auto& blk : partition[l].blocks) {
      const double v = block_gram_min_eigenvalue(fisher::gather_columns(jac[l], blk.indices));
      if (per_block) per_block->push_back(v);
      if (labels) labels->push_back("layer " + std::to_string(l) + " " + blk.label);
      best = std::min(best, v);
    }
  return best;
}

double residual_sq(const Matrix& u, const Matrix& y) {
  double r = 0.0;
  for (std::size_t i = 0; i < u.size(); ++i) {
    const double d = u.data()[i] - y.data()[i];
    r += d * d;
  }
  return r;
}

double vec_norm_diff(const Vector& a, const Vector& b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += (a[i] - b[i]) * (a[i] - b[i]);
  return std::sqrt(s);
}

}  // namespace

double block_gram_min_eigenvalue(const Matrix& block_jacobian) {
  Matrix g = linalg::matmul(block_jacobian, block_jacobian, false, true);
  for (std::size_t i = 0; i < g.rows(); ++i)
    for (std::size_t j = i + 1; j < g.cols(); ++j) g(j, i) = g(i, j);
  return linalg::min_eigenvalue(g);
}

Matrix output_jacobian(const nn::Params& params, const nn::NetworkSpec& spec, const Matrix& x) {
  require_single_output(spec);
  return nn::concat_columns(layer_jacobians(params, spec, x, nullptr));
}

AssumptionMetrics assumption_metrics(const nn::NetworkSpec& spec, const nn::Params& params0, const Matrix& x) {
  require_single_output(spec);
  const auto partition = fisher::partition_network(spec, std::numeric_limits<std::size_t>::max());
  const auto jac = layer_jacobians(params0, spec, x, nullptr);
  AssumptionMetrics m;
  m.lambda0 = min_block_gram(jac, partition, &m.block_min_eigenvalues, &m.block_labels);
  m.K = m.block_min_eigenvalues.size();
  if (m.lambda0 <= kDegenerateLambda0) {
    m.degenerate = true;
    std::ostringstream os;
    os << "degenerate initialization: lambda0 = " << m.lambda0 << " <= " << kDegenerateLambda0
       << " (a block Gram is singular, e.g. a block with fewer parameters than samples)";
    m.warning = os.str();
  }
  return m;
}

double rate_bound(double lambda0, std::size_t n, std::size_t K, double lambda, double C) {
  if (K < 3) throw PreconditionError("rate bound requires K >= 3, got K = " + std::to_string(K));
  if (!(lambda0 > 0.0) || !(lambda > 0.0) || n == 0) {
    throw NoValidRateError("rate bound undefined for lambda0 = " + std::to_string(lambda0) +
                           ", lambda = " + std::to_string(lambda));
  }
  const double nd = static_cast<double>(n), Kd = static_cast<double>(K);
  const double cross = C * std::sqrt(lambda0 * Kd) / (3.0 * std::sqrt(lambda * nd));
  const double numerator = 2.0 * Kd * lambda0 / (lambda0 + 2.25 * nd * lambda) - 2.0 * cross - 1.0;
  if (!(numerator > 0.0)) throw NoValidRateError("rate bound numerator is not positive: " + std::to_string(numerator));
  const double denom = Kd + cross;
  return numerator / (denom * denom);
}

Suggestion suggest_damping_and_lr(double lambda0, std::size_t n, std::size_t K, double C) {
  if (K < 3) throw PreconditionError("theorem requires K >= 3, got K = " + std::to_string(K));
  if (n == 0) throw PreconditionError("n must be positive");
  Suggestion s;
  s.damping = 4.0 * lambda0 / (9.0 * static_cast<double>(n));
  s.lr = rate_bound(lambda0, n, K, s.damping, C);
  return s;
}

RateCheck verify_linear_rate(const std::vector<double>& residuals, double eta, double slack) {
  RateCheck r;
  if (residuals.empty()) return r;
  const double r0 = residuals.front();
  for (std::size_t k = 0; k < residuals.size(); ++k) {
    const double bound = std::pow(1.0 - eta, static_cast<double>(k)) * r0 + slack;
    if (!(residuals[k] <= bound)) {
      r.pass = false;
      r.first_violation = k;
      return r;
    }
  }
  return r;
}

ConvergenceReport run_exact_mbf(const nn::NetworkSpec& spec, const nn::Params& params0, const nn::Batch& data,
                                double lambda, double eta, std::size_t k_max, double C) {
  require_single_output(spec);
  if (!(lambda >= 0.0)) throw PreconditionError("damping must be non-negative");
  if (!(eta > 0.0)) throw PreconditionError("learning rate must be positive");
  const std::size_t n = data.size();
  const auto partition = fisher::partition_network(spec, std::numeric_limits<std::size_t>::max());

  ConvergenceReport rep;
  const auto metrics = assumption_metrics(spec, params0, data.x);
  rep.lambda0 = metrics.lambda0;
  rep.K = metrics.K;
  rep.n = n;
  rep.degenerate = metrics.degenerate;
  rep.damping = lambda;
  rep.lr = eta;
  rep.C = C;
  try {
    rep.suggested = suggest_damping_and_lr(rep.lambda0, n, rep.K, C);
  } catch (const ConvergenceHarnessError&) {
    rep.suggested.reset();
  }
  const double l0 = std::max(rep.lambda0, 0.0);
  rep.drift_threshold = C / 3.0 * std::sqrt(l0);
  rep.gram_floor = 4.0 * l0 / 9.0;
  rep.gram_floor_sqrt = 4.0 * std::sqrt(l0) / 9.0;

  nn::Params params = params0;
  const Vector w0 = params0.flatten();
  Matrix j0;
  for (std::size_t k = 0;; ++k) {
    Matrix u;
    const auto jac = layer_jacobians(params, spec, data.x, &u);
    const double r = residual_sq(u, data.y);
    if (!std::isfinite(r)) throw DivergenceError("residual became non-finite at iteration " + std::to_string(k), k);
    const Matrix j = nn::concat_columns(jac);
    if (k == 0) j0 = j;
    rep.residuals.push_back(r);
    rep.jacobian_drift.push_back(k == 0 ? 0.0 : linalg::spectral_norm(j - j0));
    rep.weight_drift.push_back(vec_norm_diff(params.flatten(), w0));
    rep.gram_min.push_back(min_block_gram(jac, partition, nullptr, nullptr));
    const bool tripped = rep.jacobian_drift.back() > rep.drift_threshold;
    rep.drift_tripped.push_back(tripped);
    if (tripped) rep.in_hypothesis = false;
    if (k == k_max) break;

    const auto loss = nn::loss_eval(spec.loss, u, data.y);  // output_grad = (u - y) / n
    const auto fwd = nn::forward(params, spec, data.x);
    const nn::Gradients grads = nn::backward(params, spec, fwd.tape, loss.output_grad);
    Vector dir;
    try {
      dir = optim::generic_mbf_direction(spec, partition, jac, grads, lambda);
    } catch (const optim::OptimError& e) {
      throw DivergenceError(std::string("block solve failed at iteration ") + std::to_string(k) + ": " + e.what(), k);
    }
    Vector w = params.flatten();
    for (std::size_t i = 0; i < w.size(); ++i) w[i] -= eta * dir[i];
    params.assign(w);
  }
  const double r0 = rep.residuals.front();
  rep.bound = verify_linear_rate(rep.residuals, eta, 1e-9 * r0);
  for (std::size_t k = 0; k < rep.residuals.size(); ++k)
    rep.bound_values.push_back(std::pow(1.0 - eta, static_cast<double>(k)) * r0);
  return rep;
}

std::string report_to_text(const ConvergenceReport& rep) {
  std::ostringstream os;
  os.precision(17);
  os << "# lambda0=" << rep.lambda0 << " K=" << rep.K << " n=" << rep.n << " degenerate=" << rep.degenerate << "\n";
  os << "# damping=" << rep.damping << " lr=" << rep.lr << " C=" << rep.C;
  if (rep.suggested) os << " suggested_damping=" << rep.suggested->damping << " suggested_lr=" << rep.suggested->lr;
  os << "\n";
  os << "# drift_threshold=" << rep.drift_threshold << " gram_floor=" << rep.gram_floor
     << " gram_floor_sqrt=" << rep.gram_floor_sqrt << " in_hypothesis=" << rep.in_hypothesis
     << " bound_pass=" << rep.bound.pass;
  if (rep.bound.first_violation) os << " first_violation=" << *rep.bound.first_violation;
  os << "\n";
  os << "k,residual,bound,j_drift,w_drift,gram_min,tripped\n";
  for (std::size_t k = 0; k < rep.residuals.size(); ++k) {
    os << k << ',' << rep.residuals[k] << ',' << rep.bound_values[k] << ',' << rep.jacobian_drift[k] << ','
       << rep.weight_drift[k] << ',' << rep.gram_min[k] << ',' << (rep.drift_tripped[k] ? 1 : 0) << '\n';
  }
  return os.str();
}

}  // namespace mbf::convergence
