#pragma once

// Optimizer family sharing one step interface: SGD with momentum, Adam,
// practical mini-block Fisher (MBF), generic exact-Jacobian MBF, KFAC for
// dense layers and Shampoo with coupled-Newton inverse roots.

#include <cstddef>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "mbf/fisher.hpp"
#include "mbf/linalg.hpp"
#include "mbf/nn.hpp"

namespace mbf::optim {

using linalg::Matrix;
using linalg::Vector;

class OptimError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class ConfigError : public OptimError {
 public:
  using OptimError::OptimError;
};

/// Raised when a block's curvature cannot be inverted; names the block.
class BlockInversionError : public OptimError {
 public:
  using OptimError::OptimError;
};

enum class Method { sgdm, adam, mbf, mbf_generic, kfac, shampoo };

const char* to_string(Method m);
Method parse_method(const std::string& s);

struct OptimizerConfig {
  Method method = Method::mbf;
  double lr = 1e-3;
  double damping = 0.003;     // lambda (mbf, mbf_generic, kfac) or epsilon (shampoo, adam)
  double weight_decay = 0.0;  // gamma, decoupled
  double momentum = 0.9;      // mu
  double ema = 0.9;           // beta
  std::size_t stats_period = 1;     // T1
  std::size_t inverse_period = 20;  // T2
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.999;
  std::size_t shared_threshold = fisher::kDefaultSharedThreshold;

  /// Method defaults: lambda 0.003 (MBF), 0.03 (KFAC); eps 0.01 (Shampoo), 1e-8 (Adam).
  static OptimizerConfig defaults(Method m);
  void validate() const;
};

struct LrSchedule {
  double initial = 1e-3;
  double factor = 0.1;
  std::size_t period = 0;  // 0 disables decay
};

/// initial * factor^floor(epoch / period)
double lr_schedule(const LrSchedule& schedule, std::size_t epoch);

/// What one training iteration hands the optimizer. Fields beyond `grads`
/// are filled only when the optimizer's needs() asks for them.
struct StepInput {
  const nn::Gradients* grads = nullptr;                  // mean mini-batch gradient
  const nn::Tape* tape = nullptr;                        // layer inputs
  const std::vector<Matrix>* preact_grads = nullptr;     // per-sample dloss_i/dh, per layer
  const std::vector<Matrix>* per_sample_grads = nullptr; // per-sample gradient rows, per layer
};

struct Needs {
  bool tape = false;
  bool preact_grads = false;
  bool per_sample_grads = false;
};

class Optimizer {
 public:
  explicit Optimizer(OptimizerConfig config) : config_(config) {}
  virtual ~Optimizer() = default;
  Optimizer(const Optimizer&) = delete;
  Optimizer& operator=(const Optimizer&) = delete;

  const OptimizerConfig& config() const { return config_; }
  std::size_t iteration() const { return iteration_; }
  virtual Needs needs() const { return {}; }

  /// Advances the iteration counter k and applies one update in place.
  void step(nn::Params& params, const StepInput& input, double lr);

  /// Warm start: feed every mini-batch of one data pass, then finish.
  virtual void accumulate_warm_start(const StepInput&) {}
  virtual void finish_warm_start() {}

  /// Floats held in curvature / moment statistics, per layer.
  virtual std::vector<std::size_t> statistics_floats() const = 0;

 protected:
  virtual void apply(nn::Params& params, const StepInput& input, double lr) = 0;
  OptimizerConfig config_;
  std::size_t iteration_ = 0;
};

std::unique_ptr<Optimizer> make_optimizer(const OptimizerConfig& config, const nn::NetworkSpec& spec);

// ---------------------------------------------------------------- first order

class SgdMomentum final : public Optimizer {
 public:
  SgdMomentum(const OptimizerConfig& config, const nn::NetworkSpec& spec);
  const nn::Gradients& momentum() const { return momentum_; }
  std::vector<std::size_t> statistics_floats() const override;

 protected:
  void apply(nn::Params& params, const StepInput& input, double lr) override;

 private:
  nn::Gradients momentum_;
};

class Adam final : public Optimizer {
 public:
  Adam(const OptimizerConfig& config, const nn::NetworkSpec& spec);
  std::vector<std::size_t> statistics_floats() const override;

 protected:
  void apply(nn::Params& params, const StepInput& input, double lr) override;

 private:
  nn::Gradients first_;
  nn::Gradients second_;
};

// ---------------------------------------------------------------- MBF

/// Statistics of one layer: kernel / neuron blocks (or one shared block for
/// spatially averaged dense layers) and the conv-bias diagonal.
struct MbfLayerState {
  fisher::LayerPartition partition;
  std::vector<Matrix> stats;     // G-hat per block (size 1 when shared)
  std::vector<Matrix> inverses;  // cached (G-hat + lambda I)^{-1}
  Vector bias_stats;             // conv bias second moments
  Vector bias_inverse;           // cached 1 / (v + lambda)
  std::size_t refreshed_at = 0;  // iteration of the last inverse refresh
};

class MiniBlockFisher final : public Optimizer {
 public:
  MiniBlockFisher(const OptimizerConfig& config, const nn::NetworkSpec& spec);

  const std::vector<MbfLayerState>& layers() const { return layers_; }
  const nn::Gradients& momentum() const { return momentum_; }
  /// Overwrites G-hat of one layer (tests, external warm starts) and refreshes inverses.
  void set_statistics(std::size_t layer, std::vector<Matrix> stats, Vector bias_stats = {});

  void accumulate_warm_start(const StepInput& input) override;
  void finish_warm_start() override;
  std::vector<std::size_t> statistics_floats() const override;

 protected:
  void apply(nn::Params& params, const StepInput& input, double lr) override;

 private:
  void update_statistics(std::size_t layer, const nn::LayerParams& grad, double beta);
  void refresh_inverses(std::size_t layer);
  void precondition_and_update(std::size_t layer, nn::LayerParams& params, double lr) const;

  nn::NetworkSpec spec_;
  std::vector<MbfLayerState> layers_;
  nn::Gradients momentum_;
  std::size_t warm_batches_ = 0;
};

/// One step of generic MBF: for every block b,
///   W_b -= lr * ((1/n) J_b^T J_b + damping I)^{-1} grad_b
/// with J rows from `curvature_rows` (per layer, n x p_l). Conv bias blocks use
/// the diagonal of their Fisher. damping may be 0 when every block is nonsingular.
void generic_mbf_step(nn::Params& params, const nn::NetworkSpec& spec, const fisher::NetworkPartition& partition,
                      const std::vector<Matrix>& curvature_rows, const nn::Gradients& grads, double lr,
                      double damping);

/// The same update returned as a flat step direction (without lr), for harnesses.
Vector generic_mbf_direction(const nn::NetworkSpec& spec, const fisher::NetworkPartition& partition,
                             const std::vector<Matrix>& curvature_rows, const nn::Gradients& grads, double damping);

class GenericMbf final : public Optimizer {
 public:
  GenericMbf(const OptimizerConfig& config, const nn::NetworkSpec& spec);
  Needs needs() const override { return {false, false, true}; }
  std::vector<std::size_t> statistics_floats() const override;

 protected:
  void apply(nn::Params& params, const StepInput& input, double lr) override;

 private:
  nn::NetworkSpec spec_;
  fisher::NetworkPartition partition_;
};

// ---------------------------------------------------------------- KFAC

struct KfacLayerState {
  fisher::KfacFactors factors;
  Matrix inverse_a;      // H_Omega
  Matrix inverse_gamma;  // H_Gamma
};

class Kfac final : public Optimizer {
 public:
  /// Throws ConfigError for conv layers.
  Kfac(const OptimizerConfig& config, const nn::NetworkSpec& spec);
  Needs needs() const override { return {true, true, false}; }

  const std::vector<KfacLayerState>& layers() const { return layers_; }
  void set_factors(std::size_t layer, fisher::KfacFactors factors);

  void accumulate_warm_start(const StepInput& input) override;
  void finish_warm_start() override;
  std::vector<std::size_t> statistics_floats() const override;

 protected:
  void apply(nn::Params& params, const StepInput& input, double lr) override;

 private:
  fisher::KfacFactors batch_factors(std::size_t layer, const StepInput& input) const;
  void refresh_inverses(std::size_t layer);

  nn::NetworkSpec spec_;
  std::vector<KfacLayerState> layers_;
  nn::Gradients momentum_;
  std::size_t warm_batches_ = 0;
};

// ---------------------------------------------------------------- Shampoo

struct ShampooLayerState {
  Matrix left;        // EMA of G G^T
  Matrix right;       // EMA of G^T G
  Matrix left_root;   // (left + eps I)^{-1/4}
  Matrix right_root;  // (right + eps I)^{-1/4}
};

/// Matrix view of a layer used by Shampoo: dense (I+1) x O (bias as last
/// row), conv I x (J|Delta| + 1) (bias as last column).
Matrix shampoo_matricize(const nn::LayerSpec& layer, const nn::LayerParams& values);
void shampoo_unmatricize(const nn::LayerSpec& layer, const Matrix& m, nn::LayerParams& out);

class Shampoo final : public Optimizer {
 public:
  Shampoo(const OptimizerConfig& config, const nn::NetworkSpec& spec);

  const std::vector<ShampooLayerState>& layers() const { return layers_; }
  void set_statistics(std::size_t layer, Matrix left, Matrix right);

  void accumulate_warm_start(const StepInput& input) override;
  void finish_warm_start() override;
  std::vector<std::size_t> statistics_floats() const override;

 protected:
  void apply(nn::Params& params, const StepInput& input, double lr) override;

 private:
  void refresh_roots(std::size_t layer);

  nn::NetworkSpec spec_;
  std::vector<ShampooLayerState> layers_;
  nn::Gradients momentum_;
  std::size_t warm_batches_ = 0;
};

}  // namespace mbf::optim
