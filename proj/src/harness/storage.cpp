#include <sstream>

#include "mbf/harness.hpp"

namespace mbf::harness {

bool StorageAudit::all_match() const {
  for (const auto& r : rows)
    if (r.measured != r.formula) return false;
  return true;
}

StorageAudit storage_audit(const nn::NetworkSpec& spec, const optim::OptimizerConfig& config) {
  auto opt = optim::make_optimizer(config, spec);
  const auto measured = opt->statistics_floats();
  const auto partition = fisher::partition_network(spec, config.shared_threshold);
  StorageAudit audit;
  for (std::size_t l = 0; l < spec.layers.size(); ++l) {
    const auto& L = spec.layers[l];
    const std::size_t bias = L.has_bias ? 1 : 0;
    const std::size_t I = L.kind == nn::LayerKind::dense ? L.in_dim : L.out_channels;
    const std::size_t O = L.out_dim;
    StorageRow row;
    row.layer = l;
    row.measured = measured.at(l);
    switch (config.method) {
      case optim::Method::mbf:
        if (L.kind == nn::LayerKind::conv2d) {
          const std::size_t J = L.in_channels, K = L.kernel_size();
          row.kind = "conv_miniblock";
          row.formula = I * J * K * K + (L.has_bias ? I : 0);
          row.formula_text = "I*J*|Delta|^2 + I";
        } else if (partition[l].shared()) {
          row.kind = "fc_shared";
          row.formula = (I + bias) * (I + bias);
          row.formula_text = "(I+1)^2";
        } else {
          row.kind = "fc_neuron";
          row.formula = O * (I + bias) * (I + bias);
          row.formula_text = "O*(I+1)^2";
        }
        break;
      case optim::Method::kfac:
        row.kind = "kfac_fc";
        row.formula = (I + bias) * (I + bias) + O * O;
        row.formula_text = "(I+1)^2 + O^2";
        break;
      case optim::Method::adam:
        row.kind = "adam";
        row.formula = 2 * L.param_count();
        row.formula_text = "2*params";
        break;
      case optim::Method::sgdm:
        row.kind = "sgdm";
        row.formula = L.param_count();
        row.formula_text = "params";
        break;
      case optim::Method::shampoo:
        row.kind = "shampoo";
        if (L.kind == nn::LayerKind::dense) {
          row.formula = (I + bias) * (I + bias) + O * O;
          row.formula_text = "(I+1)^2 + O^2";
        } else {
          const std::size_t c = L.in_channels * L.kernel_size() + bias;
          row.formula = I * I + c * c;
          row.formula_text = "I^2 + (J*|Delta|+1)^2";
        }
        break;
      case optim::Method::mbf_generic:
        row.kind = "mbf_generic";
        row.formula = 0;
        row.formula_text = "0 (recomputed per step)";
        break;
    }
    audit.rows.push_back(std::move(row));
  }
  return audit;
}

std::string storage_audit_csv(const StorageAudit& audit) {
  std::ostringstream os;
  os << "layer,kind,measured,formula,formula_text,match\n";
  for (const auto& r : audit.rows)
    os << r.layer << ',' << r.kind << ',' << r.measured << ',' << r.formula << ',' << r.formula_text << ','
       << (r.measured == r.formula ? 1 : 0) << "\n";
  return os.str();
}

}  // namespace mbf::harness
