#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <random>
#include <span>
#include <string>
#include <vector>

namespace texroi {

/// Three conv blocks (conv 3x3 stride 1 pad 1 -> batch norm -> 2x2 max pool
/// -> ReLU) followed by FC -> ReLU -> dropout -> FC producing one logit.
struct CnnConfig {
  int input_size = 64;  // square, single channel, divisible by 8
  std::array<int, 3> conv_channels{32, 64, 128};
  int fc_hidden = 256;
  double dropout_rate = 0.5;
  double bn_momentum = 0.1;
  double bn_epsilon = 1e-5;
  std::uint64_t seed = 0;

  void validate() const;
};

struct TrainConfig {
  int batch_size = 64;
  double momentum = 0.9;
  double weight_decay = 0.0;
  double lr_initial = 0.01;
  double lr_decay_factor = 10.0;
  int lr_decay_every = 8;  // epochs
  int epochs = 40;
  std::uint64_t seed = 0;  // shuffling and dropout masks

  void validate() const;
  /// lr_initial / lr_decay_factor^floor(epoch / lr_decay_every)
  double lr_at(int epoch) const;
};

/// Square single-channel images stored contiguously, count x size x size.
struct ImageBatch {
  int count = 0;
  int size = 0;
  std::vector<double> data;

  ImageBatch() = default;
  ImageBatch(int n, int s) : count(n), size(s), data(static_cast<std::size_t>(n) * s * s, 0.0) {}

  std::span<const double> image(int i) const {
    const auto px = static_cast<std::size_t>(size) * size;
    return {data.data() + static_cast<std::size_t>(i) * px, px};
  }
  std::span<double> image(int i) {
    const auto px = static_cast<std::size_t>(size) * size;
    return {data.data() + static_cast<std::size_t>(i) * px, px};
  }
  /// Subset in the given order.
  ImageBatch select(std::span<const int> indices) const;
};

struct ParamBlock {
  std::string name;
  std::vector<int> shape;
  std::size_t offset = 0;
  std::size_t count = 0;
};

enum class CnnMode { Train, Eval };

class CnnModel {
 public:
  CnnModel() = default;
  /// Fresh He-uniform weights from cfg.seed; BN scale 1, shift 0, running
  /// mean 0 and running variance 1.
  explicit CnnModel(const CnnConfig& cfg);

  const CnnConfig& config() const noexcept { return cfg_; }

  /// Trainable parameters, laid out as described by layout().
  std::span<double> params() noexcept { return params_; }
  std::span<const double> params() const noexcept { return params_; }
  const std::vector<ParamBlock>& layout() const noexcept { return layout_; }
  const ParamBlock& block(const std::string& name) const;

  /// Batch-norm running statistics, per block mean then variance.
  std::span<double> buffers() noexcept { return buffers_; }
  std::span<const double> buffers() const noexcept { return buffers_; }
  const std::vector<ParamBlock>& buffer_layout() const noexcept { return buffer_layout_; }

  std::span<double> view(const std::string& name);
  std::span<const double> view(const std::string& name) const;

  int flat_features() const noexcept;

 private:
  CnnConfig cfg_;
  std::vector<double> params_;
  std::vector<ParamBlock> layout_;
  std::vector<double> buffers_;
  std::vector<ParamBlock> buffer_layout_;
};

inline CnnModel init_cnn(const CnnConfig& cfg) { return CnnModel(cfg); }

/// Closed-form number of trainable parameters.
std::size_t cnn_param_count(const CnnConfig& cfg);

struct ForwardOptions {
  CnnMode mode = CnnMode::Eval;
  bool dropout = true;                 // only honoured in train mode
  bool update_running_stats = true;    // only honoured in train mode
  std::mt19937_64* rng = nullptr;      // dropout masks; required when dropout applies
};

/// Intermediates kept by a forward pass for backward().
struct ForwardCache {
  CnnMode mode = CnnMode::Eval;
  int batch = 0;
  std::size_t param_count = 0;
  std::vector<double> input;
  std::array<std::vector<double>, 3> xhat;     // normalized conv output
  std::array<std::vector<double>, 3> inv_std;  // per channel
  std::array<std::vector<int>, 3> argmax;      // pooled cell -> plane offset
  std::array<std::vector<double>, 3> act;      // block outputs after ReLU
  std::vector<double> fc1_pre;
  std::vector<double> fc1_out;  // after ReLU and dropout
  std::vector<double> dropout_scale;
  std::vector<double> logits;
};

/// Logits for every image; in train mode batch-norm uses batch statistics
/// (batch size >= 2) and updates running statistics.
std::vector<double> forward(CnnModel& model, const ImageBatch& batch, const ForwardOptions& opt,
                            ForwardCache* cache = nullptr);

/// Eval-mode forward on an immutable model.
std::vector<double> forward_eval(const CnnModel& model, const ImageBatch& batch);

/// Gradient of the mean sigmoid cross-entropy with respect to params().
/// Needs the cache of a train-mode forward on the same model.
std::vector<double> backward(const CnnModel& model, const ForwardCache& cache,
                             std::span<const int> labels, double* loss = nullptr);

/// Mean sigmoid cross-entropy of logits.
double bce_with_logits(std::span<const double> logits, std::span<const int> labels);

/// v <- momentum * v + g + weight_decay * theta; theta <- theta - lr * v.
void sgd_step(std::span<double> params, std::span<const double> grads, std::span<double> velocity,
              double lr, double momentum = 0.9, double weight_decay = 0.0);

struct EpochRecord {
  int epoch = 0;
  double loss = 0.0;
  double lr = 0.0;
  double val_auc = 0.0;
};

struct TrainHistory {
  std::vector<EpochRecord> epochs;
  int selected_epoch = -1;
};

struct CnnTrainResult {
  CnnModel model;  // snapshot with the best validation AUC
  TrainHistory history;
};

/// Mini-batch SGD with momentum and a step learning-rate schedule, keeping
/// the epoch with the highest validation ROC AUC (earliest on ties).
CnnTrainResult train_cnn(const ImageBatch& train, std::span<const int> train_labels,
                         const ImageBatch& val, std::span<const int> val_labels,
                         const CnnConfig& cfg, const TrainConfig& tcfg);

/// Eval-mode probabilities, processed in chunks.
std::vector<double> predict_cnn(const CnnModel& model, const ImageBatch& images);

/// Writes `<stem>.bin` (little-endian float64 parameters then buffers) and
/// `<stem>.json` (config and block layout).
void save_cnn(const CnnModel& model, const std::filesystem::path& stem);
CnnModel load_cnn(const std::filesystem::path& stem);

namespace cnn_ops {

/// 2x2 stride-2 max pooling of `channels` planes of size x size; ties go to
/// the first element in row-major order. `argmax` receives plane offsets.
void max_pool2x2(std::span<const double> in, int channels, int size, std::span<double> out,
                 std::span<int> argmax);

void relu_inplace(std::span<double> values);

}  // namespace cnn_ops

}  // namespace texroi
