#pragma once

// Experiment infrastructure: IDX ingestion, synthetic and bundled datasets,
// JSON experiment configs, seeded training runs with CSV logs, grid search,
// heatmap export and preconditioner storage audits.

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"

#include "mbf/fisher.hpp"
#include "mbf/nn.hpp"
#include "mbf/optim.hpp"

namespace mbf::harness {

using linalg::Matrix;
using nlohmann::json;

// ---------------------------------------------------------------- errors

class HarnessError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Invalid configuration; CLI exit code 2.
class ConfigError : public HarnessError {
 public:
  using HarnessError::HarnessError;
};

/// Unreadable or unwritable file; CLI exit code 4.
class IoError : public HarnessError {
 public:
  using HarnessError::HarnessError;
};

/// Malformed IDX content (bad magic, truncated payload).
class FormatError : public IoError {
 public:
  using IoError::IoError;
};

/// Images and labels disagree on the sample count.
class ConsistencyError : public IoError {
 public:
  using IoError::IoError;
};

enum ExitCode : int { kExitOk = 0, kExitConfig = 2, kExitRunFailure = 3, kExitIo = 4 };

// ---------------------------------------------------------------- IDX

inline constexpr std::uint32_t kIdxImagesMagic = 2051;
inline constexpr std::uint32_t kIdxLabelsMagic = 2049;

struct IdxArray {
  std::uint32_t magic = 0;
  std::vector<std::uint32_t> dims;
  std::vector<std::uint8_t> data;
};

/// Reads an unsigned-byte IDX file and checks its magic number.
IdxArray read_idx(const std::filesystem::path& path, std::uint32_t expected_magic);
void write_idx(const std::filesystem::path& path, const IdxArray& array);

enum class LabelMode { one_hot, raw };

/// Images scaled to [0,1], one row per sample; labels one-hot over `classes` or raw n x 1.
nn::Batch load_idx(const std::filesystem::path& images, const std::filesystem::path& labels,
                   LabelMode mode = LabelMode::one_hot, std::size_t classes = 10);

/// Inverse of load_idx for uint8-representable batches (x * 255 rounded, argmax labels).
void write_idx_batch(const nn::Batch& batch, std::size_t rows, std::size_t cols,
                     const std::filesystem::path& images, const std::filesystem::path& labels);

/// Area-averaging resize of square images stored one per row.
Matrix resize_area(const Matrix& images, std::size_t src_side, std::size_t dst_side);

// ---------------------------------------------------------------- datasets

/// Directory of the bundled MNIST subset (env MBF_DATA_DIR overrides).
std::filesystem::path bundled_data_dir();

/// The bundled 2,000-digit MNIST subset (28x28, one-hot labels).
nn::Batch bundled_mnist(std::size_t limit = 0);

enum class SynthKind { downscaled_digits_16x16, random_regression, two_gaussians };

SynthKind parse_synth_kind(const std::string& s);
const char* to_string(SynthKind k);

/// downscaled_digits_16x16: n bundled digits (seeded selection) area-averaged to
///   16x16 -> x n x 256, one-hot y n x 10.
/// random_regression: x ~ N(0,1) n x dim, y = tanh(x w) + 0.1 noise, n x 1.
/// two_gaussians: classes at +-1.5 along a random unit direction, x n x dim, one-hot y n x 2.
nn::Batch synth_dataset(SynthKind kind, std::size_t n, std::uint64_t seed, std::size_t dim = 4);

// ---------------------------------------------------------------- config

struct DatasetConfig {
  std::string source = "bundled_mnist";  // bundled_mnist | idx | synthetic
  std::string images;                    // idx
  std::string labels;                    // idx
  std::string synth_kind = "random_regression";
  std::size_t n = 0;                     // samples (0 = all available for file sources)
  std::size_t dim = 4;                   // synthetic input dimension
  std::string targets = "labels";        // labels | inputs (autoencoder)
  double val_fraction = 0.0;
};

struct ExperimentConfig {
  nn::NetworkSpec network;
  DatasetConfig data;
  optim::OptimizerConfig optimizer;
  optim::LrSchedule schedule;
  std::size_t batch_size = 200;
  std::size_t epochs = 20;
  std::optional<std::uint64_t> seed;
  bool warm_start = false;
  std::string output_dir;

  void validate() const;
};

/// Built-in presets: "autoencoder" (784-64-16-64-784, bce, T1=1, T2=20) and
/// "cnn" (small conv classifier on 16x16 digits, T1=10, T2=100).
ExperimentConfig preset(const std::string& name, optim::Method method = optim::Method::mbf);

/// Paper-default lr for the autoencoder preset per method.
double autoencoder_preset_lr(optim::Method method);

ExperimentConfig config_from_json(const json& j);
json config_to_json(const ExperimentConfig& c);
ExperimentConfig load_config(const std::filesystem::path& path);

json network_to_json(const nn::NetworkSpec& spec);
nn::NetworkSpec network_from_json(const json& j);

/// Dataset described by a config (seeded where randomness is involved).
nn::Batch load_dataset(const DatasetConfig& data, std::uint64_t seed);

// ---------------------------------------------------------------- training

struct EpochRow {
  std::size_t epoch = 0;
  double train_loss = 0.0;
  double val_loss = 0.0;  // NaN without a validation split
  double val_acc = 0.0;   // NaN without a validation split
  double wall_s = 0.0;    // cumulative, warm start excluded
  double lr = 0.0;
};

struct RunRecord {
  json config;
  std::vector<EpochRow> rows;
  bool failed = false;
  std::string failure_reason;            // machine-readable: non_finite_loss | inversion_failure
  std::string failure_detail;
  std::optional<std::size_t> last_good_epoch;
  double warm_start_s = 0.0;
  nn::Params final_params;
};

/// Runs `config` on `data`. Row 0 is the initial evaluation.
RunRecord train(const ExperimentConfig& config, const nn::Batch& data);
/// Loads the configured dataset, then trains.
RunRecord train(const ExperimentConfig& config);

inline constexpr const char* kRunLogHeader = "epoch,train_loss,val_loss,val_acc,wall_s,lr";

/// "# config: {...}" line, header, one row per epoch, "# failed: ..." when failed.
std::string run_record_csv(const RunRecord& record);
void write_text(const std::filesystem::path& path, const std::string& text);

// ---------------------------------------------------------------- grid search

enum class SecondAxis { damping, weight_decay };
enum class Criterion { train_loss, val_acc };

struct GridCell {
  double lr = 0.0;
  double second = 0.0;
  double score = 0.0;  // final train loss or final validation accuracy
  bool failed = false;
  std::string reason;
};

struct GridResult {
  GridCell best;
  std::vector<GridCell> table;  // lr-major order
};

/// Every grid cell failed; CLI exit code 3.
class ExhaustiveFailureError : public HarnessError {
 public:
  ExhaustiveFailureError(const std::string& what, std::vector<GridCell> table)
      : HarnessError(what), table_(std::move(table)) {}
  const std::vector<GridCell>& table() const noexcept { return table_; }

 private:
  std::vector<GridCell> table_;
};

/// Evaluates every (lr, second) pair with the base seed. Best minimizes train
/// loss (or maximizes val accuracy); ties go to the smaller lr, then smaller second.
GridResult grid_search(const ExperimentConfig& base, const nn::Batch& data, const std::vector<double>& lrs,
                       const std::vector<double>& seconds, SecondAxis axis, Criterion criterion);

struct GridPreset {
  std::vector<double> lrs;
  std::vector<double> seconds;
  SecondAxis axis = SecondAxis::damping;
};

/// MBF autoencoder grid: lr in {1e-7, ..., 1e-4}, damping in {1e-5, ..., 0.01}.
GridPreset mbf_autoencoder_grid();

std::string grid_table_csv(const GridResult& result, SecondAxis axis);

// ---------------------------------------------------------------- heatmaps

/// Writes |M| as a comma-separated grid preceded by "# rows cols"; with a
/// partition also writes `<path>.blocks` listing each block's start index.
void export_heatmap(const Matrix& m, const std::optional<fisher::LayerPartition>& partition,
                    const std::filesystem::path& path);

/// Start index of each block when blocks are contiguous runs in sorted order.
std::vector<std::size_t> block_boundaries(const fisher::LayerPartition& partition);

/// Per-sample gradient rows of one layer over a batch (loss gradients, not outputs).
Matrix layer_per_sample_grads(const nn::Params& params, const nn::NetworkSpec& spec, const nn::Batch& batch,
                              std::size_t layer);

/// Permutes a dense layer's columns so each neuron block is contiguous.
std::vector<std::size_t> neuron_major_order(const nn::LayerSpec& layer);

/// Same partition with every block relabelled to contiguous indices in block order.
fisher::LayerPartition contiguous_partition(const fisher::LayerPartition& partition);

struct FimHeatmapOptions {
  nn::NetworkSpec network;
  std::size_t layer = 0;
  std::size_t pretrain_epochs = 0;  // SGD-m epochs before measuring
  std::size_t batch_size = 100;
  double lr = 0.01;
  double damping = 1e-3;            // added to the empirical FIM before inversion
  bool drop_bias_block = false;     // conv: keep only the kernel blocks
  std::uint64_t seed = 0;
};

struct FimHeatmapResult {
  Matrix inverse_fim;                // (F + damping I)^{-1} in block-contiguous order
  fisher::LayerPartition partition;  // contiguous blocks matching inverse_fim
  fisher::BlockMass mass;
  double initial_loss = 0.0;
  double final_loss = 0.0;
};

/// Pretrains with SGD-m, then measures the inverse damped empirical FIM of one layer.
FimHeatmapResult fim_heatmap_experiment(const FimHeatmapOptions& options, const nn::Batch& data);

/// 256-20-20-20-20-20-10 tanh softmax classifier; its middle layer is index 2.
nn::NetworkSpec digits_mlp();
inline constexpr std::size_t kDigitsMlpMiddleLayer = 2;

// ---------------------------------------------------------------- storage

struct StorageRow {
  std::size_t layer = 0;
  std::string kind;     // conv_miniblock | fc_neuron | fc_shared | kfac_fc | adam | sgdm | shampoo
  std::size_t measured = 0;
  std::size_t formula = 0;
  std::string formula_text;
};

struct StorageAudit {
  std::vector<StorageRow> rows;
  bool all_match() const;
};

StorageAudit storage_audit(const nn::NetworkSpec& spec, const optim::OptimizerConfig& config);
std::string storage_audit_csv(const StorageAudit& audit);

}  // namespace mbf::harness
