#pragma once

// Full-batch exact mini-block Fisher descent on single-output squared-error
// problems, with the constants and monitors of the linear-rate theorem.

#include <cstddef>
#include <optional>
#include <string>
#include <vector>

#include "mbf/fisher.hpp"
#include "mbf/linalg.hpp"
#include "mbf/nn.hpp"

namespace mbf::convergence {

using linalg::Matrix;
using linalg::Vector;

class ConvergenceHarnessError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// K < 3, or a network that is not single-output squared error.
class PreconditionError : public ConvergenceHarnessError {
 public:
  using ConvergenceHarnessError::ConvergenceHarnessError;
};

/// The step-size bound has a nonpositive numerator (or is undefined).
class NoValidRateError : public ConvergenceHarnessError {
 public:
  using ConvergenceHarnessError::ConvergenceHarnessError;
};

class DivergenceError : public ConvergenceHarnessError {
 public:
  DivergenceError(const std::string& what, std::size_t iteration)
      : ConvergenceHarnessError(what), iteration_(iteration) {}
  std::size_t iteration() const noexcept { return iteration_; }

 private:
  std::size_t iteration_;
};

inline constexpr double kDefaultC = 0.5;
inline constexpr double kDegenerateLambda0 = 1e-12;

/// lambda_min(J_b J_b^T) for an n x p_b block Jacobian.
double block_gram_min_eigenvalue(const Matrix& block_jacobian);

struct AssumptionMetrics {
  double lambda0 = 0.0;
  std::size_t K = 0;
  std::vector<double> block_min_eigenvalues;  // one per mini-block, network order
  std::vector<std::string> block_labels;      // "layer l <block label>"
  bool degenerate = false;                    // lambda0 <= 1e-12
  std::string warning;
};

/// Output Jacobian du_i/dW, n x p, in flat parameter order.
Matrix output_jacobian(const nn::Params& params, const nn::NetworkSpec& spec, const Matrix& x);

/// lambda0 = min over mini-blocks of lambda_min(J_b(0) J_b(0)^T); K = number of blocks.
AssumptionMetrics assumption_metrics(const nn::NetworkSpec& spec, const nn::Params& params0, const Matrix& x);

/// Step-size bound eta_lambda for an arbitrary damping lambda > 0.
double rate_bound(double lambda0, std::size_t n, std::size_t K, double lambda, double C = kDefaultC);

struct Suggestion {
  double damping = 0.0;  // 4 lambda0 / (9 n)
  double lr = 0.0;       // eta_lambda at that damping
};

Suggestion suggest_damping_and_lr(double lambda0, std::size_t n, std::size_t K, double C = kDefaultC);

struct RateCheck {
  bool pass = true;
  std::optional<std::size_t> first_violation;
};

/// pass iff residuals[k] <= (1 - eta)^k residuals[0] + slack for all k.
RateCheck verify_linear_rate(const std::vector<double>& residuals, double eta, double slack);

struct ConvergenceReport {
  double lambda0 = 0.0;
  std::size_t K = 0;
  std::size_t n = 0;
  bool degenerate = false;
  std::optional<Suggestion> suggested;  // absent when lambda0 is degenerate or K < 3
  double damping = 0.0;                 // lambda used
  double lr = 0.0;                      // eta used
  double C = kDefaultC;

  std::vector<double> residuals;      // ||u(k) - y||^2, k = 0..k_max
  std::vector<double> jacobian_drift; // ||J(k) - J(0)||_2
  std::vector<double> weight_drift;   // ||W(k) - W(0)||_2
  std::vector<double> gram_min;       // lambda_min of the mini-block Gram at W(k)

  double drift_threshold = 0.0;       // (C/3) sqrt(lambda0)
  std::vector<bool> drift_tripped;    // jacobian_drift[k] > drift_threshold
  bool in_hypothesis = true;          // no trip at any k

  double gram_floor = 0.0;            // 4 lambda0 / 9
  double gram_floor_sqrt = 0.0;       // 4 sqrt(lambda0) / 9, the bound as printed in the proof

  RateCheck bound;                    // at the report's eta with slack 1e-9 r0
  std::vector<double> bound_values;   // (1 - eta)^k r0
};

/// W(k+1) = W(k) - (eta/n) (F_MB + lambda I)^{-1} J^T (u - y), k_max iterations.
ConvergenceReport run_exact_mbf(const nn::NetworkSpec& spec, const nn::Params& params0, const nn::Batch& data,
                                double lambda, double eta, std::size_t k_max, double C = kDefaultC);

/// Delimited text: comment header with constants, then
/// k,residual,bound,j_drift,w_drift,gram_min,tripped
std::string report_to_text(const ConvergenceReport& report);

}  // namespace mbf::convergence
