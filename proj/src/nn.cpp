#include "mbf/nn.hpp"

#include <algorithm>
#include <cmath>
#include <random>
#include <stdexcept>

namespace mbf::nn {

namespace {

double activate(Activation a, double h) {
  switch (a) {
    case Activation::relu: return h > 0.0 ? h : 0.0;
    case Activation::tanh: return std::tanh(h);
    case Activation::sigmoid: return 1.0 / (1.0 + std::exp(-h));
    case Activation::identity: return h;
  }
  return h;
}

double activate_deriv(Activation a, double h) {
  switch (a) {
    case Activation::relu: return h > 0.0 ? 1.0 : 0.0;
    case Activation::tanh: {
      const double t = std::tanh(h);
      return 1.0 - t * t;
    }
    case Activation::sigmoid: {
      const double s = 1.0 / (1.0 + std::exp(-h));
      return s * (1.0 - s);
    }
    case Activation::identity: return 1.0;
  }
  return 1.0;
}

// Patch matrix for all samples: row (s*T + t), column (j*K + d).
Matrix unfold(const LayerSpec& L, const Matrix& a) {
  const std::size_t n = a.rows(), J = L.in_channels, H = L.height, W = L.width;
  const std::size_t k = L.kernel_side(), K = L.kernel_size(), T = L.spatial();
  const long R = static_cast<long>(L.radius);
  Matrix p(n * T, J * K);
  for (std::size_t s = 0; s < n; ++s) {
    const auto in = a.row(s);
    for (std::size_t y = 0; y < H; ++y)
      for (std::size_t x = 0; x < W; ++x) {
        double* dst = &p(s * T + y * W + x, 0);
        for (std::size_t j = 0; j < J; ++j)
          for (std::size_t dy = 0; dy < k; ++dy) {
            const long yy = static_cast<long>(y) + static_cast<long>(dy) - R;
            for (std::size_t dx = 0; dx < k; ++dx) {
              const long xx = static_cast<long>(x) + static_cast<long>(dx) - R;
              double v = 0.0;
              if (yy >= 0 && yy < static_cast<long>(H) && xx >= 0 && xx < static_cast<long>(W)) {
                v = in[j * H * W + static_cast<std::size_t>(yy) * W + static_cast<std::size_t>(xx)];
              }
              dst[j * K + dy * k + dx] = v;
            }
          }
      }
  }
  return p;
}

// Adds patch-space gradients back onto the input grid.
void fold_add(const LayerSpec& L, const Matrix& dp, Matrix& da) {
  const std::size_t n = da.rows(), J = L.in_channels, H = L.height, W = L.width;
  const std::size_t k = L.kernel_side(), K = L.kernel_size(), T = L.spatial();
  const long R = static_cast<long>(L.radius);
  for (std::size_t s = 0; s < n; ++s) {
    auto out = da.row(s);
    for (std::size_t y = 0; y < H; ++y)
      for (std::size_t x = 0; x < W; ++x) {
        const double* src = dp.row(s * T + y * W + x).data();
        for (std::size_t j = 0; j < J; ++j)
          for (std::size_t dy = 0; dy < k; ++dy) {
            const long yy = static_cast<long>(y) + static_cast<long>(dy) - R;
            if (yy < 0 || yy >= static_cast<long>(H)) continue;
            for (std::size_t dx = 0; dx < k; ++dx) {
              const long xx = static_cast<long>(x) + static_cast<long>(dx) - R;
              if (xx < 0 || xx >= static_cast<long>(W)) continue;
              out[j * H * W + static_cast<std::size_t>(yy) * W + static_cast<std::size_t>(xx)] +=
                  src[j * K + dy * k + dx];
            }
          }
      }
  }
}

// (J*K) x I kernel matrix from the flat J x I x K layout.
Matrix kernel_matrix(const LayerSpec& L, const Vector& w) {
  const std::size_t J = L.in_channels, I = L.out_channels, K = L.kernel_size();
  Matrix m(J * K, I);
  for (std::size_t j = 0; j < J; ++j)
    for (std::size_t i = 0; i < I; ++i)
      for (std::size_t d = 0; d < K; ++d) m(j * K + d, i) = w[(j * I + i) * K + d];
  return m;
}

// Rows (s*T + t), cols i  <->  rows s, cols (i*T + t)
Matrix spatial_to_channel_major(const Matrix& st, std::size_t n, std::size_t T, std::size_t I) {
  Matrix out(n, I * T);
  for (std::size_t s = 0; s < n; ++s)
    for (std::size_t t = 0; t < T; ++t)
      for (std::size_t i = 0; i < I; ++i) out(s, i * T + t) = st(s * T + t, i);
  return out;
}

Matrix channel_major_to_spatial(const Matrix& cm, std::size_t T, std::size_t I) {
  const std::size_t n = cm.rows();
  Matrix out(n * T, I);
  for (std::size_t s = 0; s < n; ++s)
    for (std::size_t t = 0; t < T; ++t)
      for (std::size_t i = 0; i < I; ++i) out(s * T + t, i) = cm(s, i * T + t);
  return out;
}

void check_tape(const NetworkSpec& spec, const Tape& tape, const Matrix& grad) {
  if (tape.inputs.size() != spec.layers.size() || tape.preacts.size() != spec.layers.size()) {
    throw NetworkError("tape does not match network: layer count differs");
  }
  const std::size_t n = tape.batch_size();
  for (std::size_t l = 0; l < spec.layers.size(); ++l) {
    const auto& L = spec.layers[l];
    if (tape.inputs[l].rows() != n || tape.inputs[l].cols() != L.input_size() ||
        tape.preacts[l].rows() != n || tape.preacts[l].cols() != L.output_size()) {
      throw NetworkError("stale tape: shape mismatch at layer " + std::to_string(l));
    }
  }
  if (grad.rows() != n || grad.cols() != spec.output_dim()) {
    throw NetworkError("output gradient shape mismatch");
  }
}

void check_params(const NetworkSpec& spec, const Params& params) {
  if (params.layers.size() != spec.layers.size()) throw NetworkError("params do not match network");
  for (std::size_t l = 0; l < spec.layers.size(); ++l) {
    if (params.layers[l].weight.size() != spec.layers[l].weight_count() ||
        params.layers[l].bias.size() != spec.layers[l].bias_count()) {
      throw NetworkError("param shape mismatch at layer " + std::to_string(l));
    }
  }
}

}  // namespace

// ---------------------------------------------------------------- specs

LayerSpec LayerSpec::dense(std::size_t in, std::size_t out, Activation act, bool bias) {
  LayerSpec s;
  s.kind = LayerKind::dense;
  s.in_dim = in;
  s.out_dim = out;
  s.activation = act;
  s.has_bias = bias;
  return s;
}

LayerSpec LayerSpec::conv2d(std::size_t in_channels, std::size_t out_channels, std::size_t radius,
                            std::size_t height, std::size_t width, Activation act, bool bias) {
  LayerSpec s;
  s.kind = LayerKind::conv2d;
  s.in_channels = in_channels;
  s.out_channels = out_channels;
  s.radius = radius;
  s.height = height;
  s.width = width;
  s.activation = act;
  s.has_bias = bias;
  return s;
}

std::size_t LayerSpec::input_size() const {
  return kind == LayerKind::dense ? in_dim : in_channels * spatial();
}

std::size_t LayerSpec::output_size() const {
  return kind == LayerKind::dense ? out_dim : out_channels * spatial();
}

std::size_t LayerSpec::weight_count() const {
  return kind == LayerKind::dense ? in_dim * out_dim : in_channels * out_channels * kernel_size();
}

std::size_t LayerSpec::bias_count() const {
  if (!has_bias) return 0;
  return kind == LayerKind::dense ? out_dim : out_channels;
}

std::size_t LayerSpec::fan_in() const {
  return kind == LayerKind::dense ? in_dim : in_channels * kernel_size();
}

std::size_t LayerSpec::fan_out() const {
  return kind == LayerKind::dense ? out_dim : out_channels * kernel_size();
}

void NetworkSpec::validate() const {
  if (layers.empty()) throw NetworkError("network has no layers");
  for (std::size_t l = 0; l < layers.size(); ++l) {
    const auto& L = layers[l];
    const bool ok = L.kind == LayerKind::dense
                        ? (L.in_dim > 0 && L.out_dim > 0)
                        : (L.in_channels > 0 && L.out_channels > 0 && L.height > 0 && L.width > 0);
    if (!ok) throw NetworkError("layer " + std::to_string(l) + " has a zero dimension");
    if (l > 0 && layers[l - 1].output_size() != L.input_size()) {
      throw NetworkError("layer " + std::to_string(l) + " expects input size " +
                         std::to_string(L.input_size()) + " but previous layer produces " +
                         std::to_string(layers[l - 1].output_size()));
    }
  }
}

std::size_t NetworkSpec::input_dim() const { return layers.front().input_size(); }
std::size_t NetworkSpec::output_dim() const { return layers.back().output_size(); }

std::size_t NetworkSpec::param_count() const {
  std::size_t p = 0;
  for (const auto& L : layers) p += L.param_count();
  return p;
}

std::vector<std::size_t> NetworkSpec::layer_offsets() const {
  std::vector<std::size_t> off;
  std::size_t p = 0;
  for (const auto& L : layers) {
    off.push_back(p);
    p += L.param_count();
  }
  return off;
}

NetworkSpec make_mlp(const std::vector<std::size_t>& dims, Activation hidden, Activation output,
                     LossKind loss) {
  if (dims.size() < 2) throw NetworkError("make_mlp: need at least two sizes");
  NetworkSpec spec;
  spec.loss = loss;
  for (std::size_t l = 0; l + 1 < dims.size(); ++l) {
    spec.layers.push_back(LayerSpec::dense(dims[l], dims[l + 1], l + 2 == dims.size() ? output : hidden));
  }
  spec.validate();
  return spec;
}

// ---------------------------------------------------------------- params

std::size_t Params::size() const {
  std::size_t p = 0;
  for (const auto& L : layers) p += L.weight.size() + L.bias.size();
  return p;
}

Vector Params::flatten() const {
  Vector v;
  v.reserve(size());
  for (const auto& L : layers) {
    v.insert(v.end(), L.weight.begin(), L.weight.end());
    v.insert(v.end(), L.bias.begin(), L.bias.end());
  }
  return v;
}

void Params::assign(const Vector& flat) {
  if (flat.size() != size()) throw NetworkError("Params::assign: size mismatch");
  std::size_t k = 0;
  for (auto& L : layers) {
    for (double& w : L.weight) w = flat[k++];
    for (double& b : L.bias) b = flat[k++];
  }
}

Params zeros_like(const NetworkSpec& spec) {
  Params p;
  for (const auto& L : spec.layers) p.layers.push_back({Vector(L.weight_count(), 0.0), Vector(L.bias_count(), 0.0)});
  return p;
}

Params init_params(const NetworkSpec& spec, std::uint64_t seed) {
  spec.validate();
  std::mt19937_64 rng(seed);
  Params p = zeros_like(spec);
  for (std::size_t l = 0; l < spec.layers.size(); ++l) {
    const auto& L = spec.layers[l];
    const double fi = static_cast<double>(L.fan_in());
    const double fo = static_cast<double>(L.fan_out());
    const double limit = L.activation == Activation::relu ? std::sqrt(6.0 / fi) : std::sqrt(6.0 / (fi + fo));
    std::uniform_real_distribution<double> dist(-limit, limit);
    for (double& w : p.layers[l].weight) w = dist(rng);
  }
  return p;
}

Batch slice_rows(const Batch& batch, const std::vector<std::size_t>& rows) {
  Batch out{Matrix(rows.size(), batch.x.cols()), Matrix(rows.size(), batch.y.cols())};
  for (std::size_t r = 0; r < rows.size(); ++r) {
    std::copy_n(batch.x.row(rows[r]).begin(), batch.x.cols(), out.x.row(r).begin());
    std::copy_n(batch.y.row(rows[r]).begin(), batch.y.cols(), out.y.row(r).begin());
  }
  return out;
}

// ---------------------------------------------------------------- passes

ForwardResult forward(const Params& params, const NetworkSpec& spec, const Matrix& x) {
  spec.validate();
  check_params(spec, params);
  if (x.cols() != spec.input_dim()) {
    throw NetworkError("forward: input has " + std::to_string(x.cols()) + " columns, network expects " +
                       std::to_string(spec.input_dim()));
  }
  ForwardResult res;
  Matrix a = x;
  const std::size_t n = x.rows();
  for (std::size_t l = 0; l < spec.layers.size(); ++l) {
    const auto& L = spec.layers[l];
    const auto& P = params.layers[l];
    Matrix h;
    if (L.kind == LayerKind::dense) {
      const Matrix w(L.in_dim, L.out_dim, P.weight);
      h = linalg::matmul(a, w);
      if (L.has_bias)
        for (std::size_t s = 0; s < n; ++s)
          for (std::size_t o = 0; o < L.out_dim; ++o) h(s, o) += P.bias[o];
    } else {
      const std::size_t T = L.spatial(), I = L.out_channels;
      const Matrix st = linalg::matmul(unfold(L, a), kernel_matrix(L, P.weight));
      h = spatial_to_channel_major(st, n, T, I);
      if (L.has_bias)
        for (std::size_t s = 0; s < n; ++s)
          for (std::size_t i = 0; i < I; ++i)
            for (std::size_t t = 0; t < T; ++t) h(s, i * T + t) += P.bias[i];
    }
    Matrix next(h.rows(), h.cols());
    for (std::size_t k = 0; k < h.size(); ++k) next.data()[k] = activate(L.activation, h.data()[k]);
    res.tape.inputs.push_back(std::move(a));
    res.tape.preacts.push_back(std::move(h));
    a = std::move(next);
  }
  res.outputs = std::move(a);
  return res;
}

std::vector<Matrix> preactivation_grads(const Params& params, const NetworkSpec& spec, const Tape& tape,
                                        const Matrix& output_grad) {
  check_params(spec, params);
  check_tape(spec, tape, output_grad);
  const std::size_t L_count = spec.layers.size();
  std::vector<Matrix> dh(L_count);
  Matrix g = output_grad;  // d loss / d (layer output)
  for (std::size_t l = L_count; l-- > 0;) {
    const auto& L = spec.layers[l];
    const Matrix& h = tape.preacts[l];
    Matrix d(h.rows(), h.cols());
    for (std::size_t k = 0; k < h.size(); ++k) d.data()[k] = g.data()[k] * activate_deriv(L.activation, h.data()[k]);
    if (l > 0) {
      if (L.kind == LayerKind::dense) {
        const Matrix w(L.in_dim, L.out_dim, params.layers[l].weight);
        g = linalg::matmul(d, w, false, true);
      } else {
        const Matrix dst = channel_major_to_spatial(d, L.spatial(), L.out_channels);
        const Matrix dp = linalg::matmul(dst, kernel_matrix(L, params.layers[l].weight), false, true);
        g = Matrix(h.rows(), L.input_size());
        fold_add(L, dp, g);
      }
    }
    dh[l] = std::move(d);
  }
  return dh;
}

Gradients backward(const Params& params, const NetworkSpec& spec, const Tape& tape, const Matrix& output_grad) {
  const auto dh = preactivation_grads(params, spec, tape, output_grad);
  Gradients grads = zeros_like(spec);
  for (std::size_t l = 0; l < spec.layers.size(); ++l) {
    const auto& L = spec.layers[l];
    auto& G = grads.layers[l];
    const std::size_t n = dh[l].rows();
    if (L.kind == LayerKind::dense) {
      const Matrix dw = linalg::matmul(tape.inputs[l], dh[l], true, false);
      G.weight.assign(dw.data(), dw.data() + dw.size());
      if (L.has_bias)
        for (std::size_t s = 0; s < n; ++s)
          for (std::size_t o = 0; o < L.out_dim; ++o) G.bias[o] += dh[l](s, o);
    } else {
      const std::size_t J = L.in_channels, I = L.out_channels, K = L.kernel_size(), T = L.spatial();
      const Matrix dst = channel_major_to_spatial(dh[l], T, I);
      const Matrix dwc = linalg::matmul(unfold(L, tape.inputs[l]), dst, true, false);  // JK x I
      for (std::size_t j = 0; j < J; ++j)
        for (std::size_t i = 0; i < I; ++i)
          for (std::size_t d = 0; d < K; ++d) G.weight[(j * I + i) * K + d] = dwc(j * K + d, i);
      if (L.has_bias)
        for (std::size_t s = 0; s < n; ++s)
          for (std::size_t i = 0; i < I; ++i)
            for (std::size_t t = 0; t < T; ++t) G.bias[i] += dh[l](s, i * T + t);
    }
  }
  return grads;
}

std::vector<Matrix> per_sample_gradients(const Params& params, const NetworkSpec& spec, const Tape& tape,
                                         const Matrix& per_sample_output_grads) {
  const auto dh = preactivation_grads(params, spec, tape, per_sample_output_grads);
  std::vector<Matrix> rows;
  for (std::size_t l = 0; l < spec.layers.size(); ++l) {
    const auto& L = spec.layers[l];
    const std::size_t n = dh[l].rows();
    Matrix J(n, L.param_count());
    if (L.kind == LayerKind::dense) {
      const std::size_t I = L.in_dim, O = L.out_dim;
      for (std::size_t s = 0; s < n; ++s) {
        const auto a = tape.inputs[l].row(s);
        const auto d = dh[l].row(s);
        auto out = J.row(s);
        for (std::size_t i = 0; i < I; ++i)
          for (std::size_t o = 0; o < O; ++o) out[i * O + o] = a[i] * d[o];
        if (L.has_bias)
          for (std::size_t o = 0; o < O; ++o) out[I * O + o] = d[o];
      }
    } else {
      const std::size_t Jc = L.in_channels, I = L.out_channels, K = L.kernel_size(), T = L.spatial();
      const Matrix patches = unfold(L, tape.inputs[l]);
      const Matrix dst = channel_major_to_spatial(dh[l], T, I);
      for (std::size_t s = 0; s < n; ++s) {
        // P_s^T dOut_s over the sample's T rows
        Matrix ps(T, Jc * K), ds(T, I);
        std::copy_n(patches.row(s * T).data(), T * Jc * K, ps.data());
        std::copy_n(dst.row(s * T).data(), T * I, ds.data());
        const Matrix dwc = linalg::matmul(ps, ds, true, false);
        auto out = J.row(s);
        for (std::size_t j = 0; j < Jc; ++j)
          for (std::size_t i = 0; i < I; ++i)
            for (std::size_t d = 0; d < K; ++d) out[(j * I + i) * K + d] = dwc(j * K + d, i);
        if (L.has_bias)
          for (std::size_t i = 0; i < I; ++i) {
            double b = 0.0;
            for (std::size_t t = 0; t < T; ++t) b += ds(t, i);
            out[L.weight_count() + i] = b;
          }
      }
    }
    rows.push_back(std::move(J));
  }
  return rows;
}

Matrix concat_columns(const std::vector<Matrix>& blocks) {
  if (blocks.empty()) return {};
  const std::size_t n = blocks.front().rows();
  std::size_t p = 0;
  for (const auto& b : blocks) {
    if (b.rows() != n) throw NetworkError("concat_columns: row counts differ");
    p += b.cols();
  }
  Matrix out(n, p);
  std::size_t off = 0;
  for (const auto& b : blocks) {
    for (std::size_t s = 0; s < n; ++s) std::copy_n(b.row(s).begin(), b.cols(), out.row(s).begin() + static_cast<long>(off));
    off += b.cols();
  }
  return out;
}

// ---------------------------------------------------------------- losses

namespace {

void check_loss_shapes(const Matrix& p, const Matrix& y) {
  if (p.rows() != y.rows() || p.cols() != y.cols()) throw NetworkError("loss: prediction/target shape mismatch");
  if (p.rows() == 0) throw NetworkError("loss: empty batch");
}

double softplus(double z) { return std::max(z, 0.0) + std::log1p(std::exp(-std::abs(z))); }

}  // namespace

Vector per_sample_loss(LossKind kind, const Matrix& p, const Matrix& y) {
  check_loss_shapes(p, y);
  const std::size_t n = p.rows(), c = p.cols();
  Vector out(n, 0.0);
  for (std::size_t s = 0; s < n; ++s) {
    const auto ps = p.row(s);
    const auto ys = y.row(s);
    double l = 0.0;
    switch (kind) {
      case LossKind::squared_error:
        for (std::size_t k = 0; k < c; ++k) l += 0.5 * (ps[k] - ys[k]) * (ps[k] - ys[k]);
        break;
      case LossKind::bce_with_sigmoid:
        for (std::size_t k = 0; k < c; ++k) {
          if (ys[k] < 0.0 || ys[k] > 1.0) throw std::domain_error("bce target outside [0,1]");
          l += softplus(ps[k]) - ys[k] * ps[k];
        }
        break;
      case LossKind::softmax_ce: {
        const double mx = *std::max_element(ps.begin(), ps.end());
        double se = 0.0, ysum = 0.0, yz = 0.0;
        for (std::size_t k = 0; k < c; ++k) {
          se += std::exp(ps[k] - mx);
          ysum += ys[k];
          yz += ys[k] * ps[k];
        }
        l = ysum * (mx + std::log(se)) - yz;
        break;
      }
    }
    out[s] = l;
  }
  return out;
}

LossResult loss_eval(LossKind kind, const Matrix& p, const Matrix& y) {
  const Vector per = per_sample_loss(kind, p, y);
  const std::size_t n = p.rows(), c = p.cols();
  const double inv_n = 1.0 / static_cast<double>(n);
  LossResult r;
  for (double l : per) r.loss += l;
  r.loss *= inv_n;
  r.output_grad = Matrix(n, c);
  for (std::size_t s = 0; s < n; ++s) {
    const auto ps = p.row(s);
    const auto ys = y.row(s);
    auto g = r.output_grad.row(s);
    switch (kind) {
      case LossKind::squared_error:
        for (std::size_t k = 0; k < c; ++k) g[k] = (ps[k] - ys[k]) * inv_n;
        break;
      case LossKind::bce_with_sigmoid:
        for (std::size_t k = 0; k < c; ++k) g[k] = (1.0 / (1.0 + std::exp(-ps[k])) - ys[k]) * inv_n;
        break;
      case LossKind::softmax_ce: {
        const double mx = *std::max_element(ps.begin(), ps.end());
        double se = 0.0, ysum = 0.0;
        for (std::size_t k = 0; k < c; ++k) {
          se += std::exp(ps[k] - mx);
          ysum += ys[k];
        }
        for (std::size_t k = 0; k < c; ++k) g[k] = (ysum * std::exp(ps[k] - mx) / se - ys[k]) * inv_n;
        break;
      }
    }
  }
  return r;
}

double accuracy(const Matrix& p, const Matrix& y) {
  check_loss_shapes(p, y);
  std::size_t hit = 0;
  for (std::size_t s = 0; s < p.rows(); ++s) {
    const auto ps = p.row(s);
    const auto ys = y.row(s);
    if (std::max_element(ps.begin(), ps.end()) - ps.begin() == std::max_element(ys.begin(), ys.end()) - ys.begin()) ++hit;
  }
  return static_cast<double>(hit) / static_cast<double>(p.rows());
}

const char* to_string(Activation a) {
  switch (a) {
    case Activation::relu: return "relu";
    case Activation::tanh: return "tanh";
    case Activation::sigmoid: return "sigmoid";
    case Activation::identity: return "identity";
  }
  return "?";
}

const char* to_string(LossKind k) {
  switch (k) {
    case LossKind::squared_error: return "squared_error";
    case LossKind::bce_with_sigmoid: return "bce_with_sigmoid";
    case LossKind::softmax_ce: return "softmax_ce";
  }
  return "?";
}

Activation parse_activation(const std::string& s) {
  if (s == "relu") return Activation::relu;
  if (s == "tanh") return Activation::tanh;
  if (s == "sigmoid") return Activation::sigmoid;
  if (s == "identity" || s == "none" || s == "linear") return Activation::identity;
  throw NetworkError("unknown activation '" + s + "'");
}

LossKind parse_loss(const std::string& s) {
  if (s == "squared_error" || s == "mse") return LossKind::squared_error;
  if (s == "bce_with_sigmoid" || s == "bce") return LossKind::bce_with_sigmoid;
  if (s == "softmax_ce" || s == "ce") return LossKind::softmax_ce;
  throw NetworkError("unknown loss '" + s + "'");
}

}  // namespace mbf::nn
