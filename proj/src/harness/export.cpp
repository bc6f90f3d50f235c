#include <cmath>
#include <sstream>

#include "mbf/harness.hpp"

namespace mbf::harness {

std::vector<std::size_t> block_boundaries(const fisher::LayerPartition& partition) {
  std::vector<std::size_t> starts;
  std::size_t expected = 0;
  for (const auto& b : partition.blocks) {
    for (std::size_t k = 0; k < b.indices.size(); ++k) {
      if (b.indices[k] != expected + k) {
        throw HarnessError("block " + b.label + " is not a contiguous run; reorder the matrix (neuron_major_order) first");
      }
    }
    starts.push_back(expected);
    expected += b.indices.size();
  }
  return starts;
}

void export_heatmap(const Matrix& m, const std::optional<fisher::LayerPartition>& partition,
                    const std::filesystem::path& path) {
  if (!linalg::all_finite(m.values())) throw HarnessError("export_heatmap: matrix has non-finite entries");
  std::ostringstream os;
  os.precision(10);
  os << "# " << m.rows() << ' ' << m.cols() << "\n";
  for (std::size_t i = 0; i < m.rows(); ++i) {
    for (std::size_t j = 0; j < m.cols(); ++j) os << (j ? "," : "") << std::abs(m(i, j));
    os << "\n";
  }
  std::string blocks;
  if (partition) {
    std::ostringstream bs;
    const auto starts = block_boundaries(*partition);
    bs << "# " << starts.size() << " blocks\n";
    for (auto s : starts) bs << s << "\n";
    blocks = bs.str();
  }
  write_text(path, os.str());
  if (partition) write_text(path.string() + ".blocks", blocks);
}

Matrix layer_per_sample_grads(const nn::Params& params, const nn::NetworkSpec& spec, const nn::Batch& batch,
                              std::size_t layer) {
  if (layer >= spec.layers.size()) throw ConfigError("layer index " + std::to_string(layer) + " out of range");
  const auto fwd = nn::forward(params, spec, batch.x);
  const auto loss = nn::loss_eval(spec.loss, fwd.outputs, batch.y);
  const Matrix per_sample_out = loss.output_grad * static_cast<double>(batch.size());
  return nn::per_sample_gradients(params, spec, fwd.tape, per_sample_out).at(layer);
}

std::vector<std::size_t> neuron_major_order(const nn::LayerSpec& layer) {
  std::vector<std::size_t> order;
  for (const auto& b : fisher::partition_layer(layer, false).blocks)
    order.insert(order.end(), b.indices.begin(), b.indices.end());
  return order;
}

}  // namespace mbf::harness

namespace mbf::harness {

fisher::LayerPartition contiguous_partition(const fisher::LayerPartition& partition) {
  fisher::LayerPartition out;
  std::size_t next = 0;
  for (const auto& b : partition.blocks) {
    fisher::Block c{b.kind, b.label, {}};
    for (std::size_t k = 0; k < b.indices.size(); ++k) c.indices.push_back(next++);
    out.blocks.push_back(std::move(c));
  }
  return out;
}

nn::NetworkSpec digits_mlp() {
  return nn::make_mlp({256, 20, 20, 20, 20, 20, 10}, nn::Activation::tanh, nn::Activation::identity,
                      nn::LossKind::softmax_ce);
}

FimHeatmapResult fim_heatmap_experiment(const FimHeatmapOptions& o, const nn::Batch& data) {
  if (o.layer >= o.network.layers.size()) throw ConfigError("layer index out of range");
  ExperimentConfig c;
  c.network = o.network;
  c.optimizer = optim::OptimizerConfig::defaults(optim::Method::sgdm);
  c.optimizer.lr = o.lr;
  c.batch_size = o.batch_size;
  c.epochs = o.pretrain_epochs;
  c.seed = o.seed;
  c.data.source = "synthetic";
  const RunRecord run = train(c, data);
  if (run.failed) throw HarnessError("pretraining failed: " + run.failure_detail);

  fisher::LayerPartition part = fisher::partition_layer(o.network.layers[o.layer], false);
  if (o.drop_bias_block && !part.blocks.empty() && part.blocks.back().kind == fisher::BlockKind::conv_bias)
    part.blocks.pop_back();
  std::vector<std::size_t> order;
  for (const auto& b : part.blocks) order.insert(order.end(), b.indices.begin(), b.indices.end());

  const Matrix rows = fisher::gather_columns(layer_per_sample_grads(run.final_params, o.network, data, o.layer), order);
  FimHeatmapResult r;
  r.inverse_fim = linalg::damped_inverse(fisher::empirical_fim(rows), o.damping);
  r.partition = contiguous_partition(part);
  r.mass = fisher::block_mass_ratio(r.inverse_fim, r.partition);
  r.initial_loss = run.rows.front().train_loss;
  r.final_loss = run.rows.back().train_loss;
  return r;
}

}  // namespace mbf::harness
