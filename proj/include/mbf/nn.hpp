#pragma once

// Minimal reverse-mode training core: dense and stride-1 "same" conv2d
// layers, batched forward/backward, per-sample gradients and losses.
//
// Parameter layout of one layer, flattened:
//   dense : W (in x out, row-major, W[i*out + o]) followed by b (out)
//   conv2d: W (J x I x k x k, W[((j*I + i)*k*k) + d]) followed by b (I)
// so a dense layer's flat vector is the row-major form of the bias-augmented
// (in+1) x out matrix, and each conv kernel (j,i) is contiguous.
// Conv activations are stored channel-major: value(c, y, x) at c*H*W + y*W + x.

#include <cstddef>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

#include "mbf/linalg.hpp"

namespace mbf::nn {

using linalg::Matrix;
using linalg::Vector;

class NetworkError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

enum class LayerKind { dense, conv2d };
enum class Activation { relu, tanh, sigmoid, identity };
enum class LossKind { squared_error, bce_with_sigmoid, softmax_ce };

struct LayerSpec {
  LayerKind kind = LayerKind::dense;
  // dense
  std::size_t in_dim = 0;
  std::size_t out_dim = 0;
  // conv2d
  std::size_t in_channels = 0;   // J
  std::size_t out_channels = 0;  // I
  std::size_t radius = 0;        // R, kernel side 2R+1
  std::size_t height = 0;
  std::size_t width = 0;

  bool has_bias = true;
  Activation activation = Activation::identity;

  static LayerSpec dense(std::size_t in, std::size_t out, Activation act, bool bias = true);
  static LayerSpec conv2d(std::size_t in_channels, std::size_t out_channels, std::size_t radius,
                          std::size_t height, std::size_t width, Activation act, bool bias = true);

  std::size_t kernel_side() const { return 2 * radius + 1; }
  std::size_t kernel_size() const { return kernel_side() * kernel_side(); }  // |Delta|
  std::size_t spatial() const { return height * width; }                     // |T|
  std::size_t input_size() const;
  std::size_t output_size() const;
  std::size_t weight_count() const;
  std::size_t bias_count() const;
  std::size_t param_count() const { return weight_count() + bias_count(); }
  std::size_t fan_in() const;
  std::size_t fan_out() const;
};

struct NetworkSpec {
  std::vector<LayerSpec> layers;
  LossKind loss = LossKind::squared_error;

  /// Throws NetworkError on zero dimensions or incompatible adjacent layers.
  void validate() const;
  std::size_t input_dim() const;
  std::size_t output_dim() const;
  std::size_t param_count() const;
  /// Offset of each layer's parameters inside the flattened parameter vector.
  std::vector<std::size_t> layer_offsets() const;
};

/// Dense MLP shorthand: dims {d0, d1, ..., dL}; hidden layers use `hidden`,
/// the last layer uses `output`.
NetworkSpec make_mlp(const std::vector<std::size_t>& dims, Activation hidden, Activation output,
                     LossKind loss);

struct LayerParams {
  Vector weight;
  Vector bias;
  bool operator==(const LayerParams&) const = default;
};

struct Params {
  std::vector<LayerParams> layers;

  std::size_t size() const;
  Vector flatten() const;
  void assign(const Vector& flat);
  bool operator==(const Params&) const = default;
};

/// Same layout as Params; holds gradients or optimizer buffers.
using Gradients = Params;

Params zeros_like(const NetworkSpec& spec);

/// He-uniform for relu layers, Glorot-uniform otherwise; zero biases.
Params init_params(const NetworkSpec& spec, std::uint64_t seed);

struct Batch {
  Matrix x;  // n x input_dim
  Matrix y;  // n x output_dim (one-hot for classification)
  std::size_t size() const { return x.rows(); }
};

Batch slice_rows(const Batch& batch, const std::vector<std::size_t>& rows);

/// Per-layer record of a forward pass.
struct Tape {
  std::vector<Matrix> inputs;       // a_l: n x input_size
  std::vector<Matrix> preacts;      // h_l: n x output_size
  std::size_t batch_size() const { return inputs.empty() ? 0 : inputs.front().rows(); }
};

struct ForwardResult {
  Matrix outputs;  // n x output_dim
  Tape tape;
};

ForwardResult forward(const Params& params, const NetworkSpec& spec, const Matrix& x);

/// dL/dh for every layer, rows per sample, same scaling as `output_grad`.
std::vector<Matrix> preactivation_grads(const Params& params, const NetworkSpec& spec,
                                        const Tape& tape, const Matrix& output_grad);

/// Gradients of the loss whose output derivative is `output_grad` (typically
/// the mean-loss derivative from loss_eval, so the result is a batch mean).
Gradients backward(const Params& params, const NetworkSpec& spec, const Tape& tape,
                   const Matrix& output_grad);

/// Row i of entry l is the flattened layer-l gradient of sample i's loss,
/// where `per_sample_output_grads` row i is d(loss_i)/d(prediction_i).
std::vector<Matrix> per_sample_gradients(const Params& params, const NetworkSpec& spec,
                                         const Tape& tape, const Matrix& per_sample_output_grads);

/// Concatenates per-layer Jacobian blocks column-wise into n x p.
Matrix concat_columns(const std::vector<Matrix>& blocks);

struct LossResult {
  double loss = 0.0;   // mean over samples of the per-sample loss
  Matrix output_grad;  // d(mean loss)/d(predictions)
};

/// squared_error: 0.5*||p - y||^2 per sample; bce_with_sigmoid: summed over
/// output units on logits; softmax_ce: cross-entropy of softmax(logits).
LossResult loss_eval(LossKind kind, const Matrix& predictions, const Matrix& targets);

/// Per-sample loss values.
Vector per_sample_loss(LossKind kind, const Matrix& predictions, const Matrix& targets);

/// Fraction of rows whose argmax prediction equals the argmax target.
double accuracy(const Matrix& predictions, const Matrix& targets);

const char* to_string(Activation a);
const char* to_string(LossKind k);
Activation parse_activation(const std::string& s);
LossKind parse_loss(const std::string& s);

}  // namespace mbf::nn
