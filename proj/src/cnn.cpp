#include "texroi/cnn.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <fstream>
#include <numeric>

#include <Eigen/Core>
#include <json.hpp>

#include "texroi/error.hpp"
#include "texroi/gbm.hpp"
#include "texroi/log.hpp"
#include "texroi/metrics.hpp"

#include <spdlog/spdlog.h>

namespace texroi {

namespace {

using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapMatrix = Eigen::Map<RowMatrix>;
using ConstMapMatrix = Eigen::Map<const RowMatrix>;

struct BlockShape {
  int in_channels;
  int out_channels;
  int size;  // spatial size of the block input and conv output
};

std::array<BlockShape, 3> block_shapes(const CnnConfig& cfg) {
  return {{{1, cfg.conv_channels[0], cfg.input_size},
           {cfg.conv_channels[0], cfg.conv_channels[1], cfg.input_size / 2},
           {cfg.conv_channels[1], cfg.conv_channels[2], cfg.input_size / 4}}};
}

// Reductions below run in a fixed order: Eigen's vectorized reductions on
// mapped memory peel by pointer alignment, so their last bits would depend
// on where the heap placed a buffer.
double dot(const double* a, const double* b, int n) {
  double s0 = 0.0, s1 = 0.0, s2 = 0.0, s3 = 0.0;
  int i = 0;
  for (; i + 4 <= n; i += 4) {
    s0 += a[i] * b[i];
    s1 += a[i + 1] * b[i + 1];
    s2 += a[i + 2] * b[i + 2];
    s3 += a[i + 3] * b[i + 3];
  }
  for (; i < n; ++i) s0 += a[i] * b[i];
  return (s0 + s1) + (s2 + s3);
}

double sum(const double* a, int n) {
  double s = 0.0;
  for (int i = 0; i < n; ++i) s += a[i];
  return s;
}

std::string conv_name(int l, const char* what) { return "conv" + std::to_string(l) + "." + what; }
std::string bn_name(int l, const char* what) { return "bn" + std::to_string(l) + "." + what; }

// cols(ci*9 + ky*3 + kx, y*S + x) = in(ci, y+ky-1, x+kx-1), zero outside
void im2col3x3(const double* in, int channels, int size, RowMatrix& cols) {
  const int plane = size * size;
  cols.resize(channels * 9, plane);
  for (int c = 0; c < channels; ++c) {
    const double* src = in + static_cast<std::size_t>(c) * plane;
    for (int ky = 0; ky < 3; ++ky) {
      for (int kx = 0; kx < 3; ++kx) {
        double* dst = cols.data() + static_cast<std::size_t>(c * 9 + ky * 3 + kx) * plane;
        for (int y = 0; y < size; ++y) {
          const int sy = y + ky - 1;
          double* row = dst + static_cast<std::size_t>(y) * size;
          if (sy < 0 || sy >= size) {
            std::fill(row, row + size, 0.0);
            continue;
          }
          const double* srow = src + static_cast<std::size_t>(sy) * size;
          for (int x = 0; x < size; ++x) {
            const int sx = x + kx - 1;
            row[x] = (sx < 0 || sx >= size) ? 0.0 : srow[sx];
          }
        }
      }
    }
  }
}

void col2im3x3(const RowMatrix& cols, int channels, int size, double* out) {
  const int plane = size * size;
  std::fill(out, out + static_cast<std::size_t>(channels) * plane, 0.0);
  for (int c = 0; c < channels; ++c) {
    double* dst = out + static_cast<std::size_t>(c) * plane;
    for (int ky = 0; ky < 3; ++ky) {
      for (int kx = 0; kx < 3; ++kx) {
        const double* src = cols.data() + static_cast<std::size_t>(c * 9 + ky * 3 + kx) * plane;
        for (int y = 0; y < size; ++y) {
          const int sy = y + ky - 1;
          if (sy < 0 || sy >= size) continue;
          const double* row = src + static_cast<std::size_t>(y) * size;
          double* drow = dst + static_cast<std::size_t>(sy) * size;
          for (int x = 0; x < size; ++x) {
            const int sx = x + kx - 1;
            if (sx >= 0 && sx < size) drow[sx] += row[x];
          }
        }
      }
    }
  }
}

}  // namespace

// ---------------------------------------------------------------------------
// Configuration

void CnnConfig::validate() const {
  if (input_size < 8 || input_size % 8 != 0)
    throw Error(ErrorKind::Invalid, "cnn input_size must be a positive multiple of 8");
  for (int c : conv_channels)
    if (c < 1) throw Error(ErrorKind::Invalid, "cnn conv_channels must be >= 1");
  if (fc_hidden < 1) throw Error(ErrorKind::Invalid, "cnn fc_hidden must be >= 1");
  if (!(dropout_rate >= 0.0 && dropout_rate < 1.0))
    throw Error(ErrorKind::Invalid, "cnn dropout_rate must be in [0, 1)");
  if (!(bn_momentum >= 0.0 && bn_momentum <= 1.0))
    throw Error(ErrorKind::Invalid, "cnn bn_momentum must be in [0, 1]");
  if (!(bn_epsilon > 0.0)) throw Error(ErrorKind::Invalid, "cnn bn_epsilon must be positive");
}

void TrainConfig::validate() const {
  if (batch_size < 1) throw Error(ErrorKind::Invalid, "batch_size must be >= 1");
  if (epochs < 1) throw Error(ErrorKind::Invalid, "epochs must be >= 1");
  if (lr_decay_every < 1) throw Error(ErrorKind::Invalid, "lr_decay_every must be >= 1");
  if (!(lr_initial > 0.0) || !(lr_decay_factor > 0.0))
    throw Error(ErrorKind::Invalid, "learning rate settings must be positive");
}

double TrainConfig::lr_at(int epoch) const {
  return lr_initial / std::pow(lr_decay_factor, epoch / lr_decay_every);
}

ImageBatch ImageBatch::select(std::span<const int> indices) const {
  ImageBatch out(static_cast<int>(indices.size()), size);
  for (std::size_t i = 0; i < indices.size(); ++i) {
    const auto src = image(indices[i]);
    std::copy(src.begin(), src.end(), out.image(static_cast<int>(i)).begin());
  }
  return out;
}

// ---------------------------------------------------------------------------
// Model

CnnModel::CnnModel(const CnnConfig& cfg) : cfg_(cfg) {
  cfg_.validate();
  auto add = [this](std::vector<ParamBlock>& layout, std::size_t& total, std::string name,
                    std::vector<int> shape) {
    std::size_t count = 1;
    for (int s : shape) count *= static_cast<std::size_t>(s);
    layout.push_back({std::move(name), std::move(shape), total, count});
    total += count;
  };
  std::size_t total = 0, buffer_total = 0;
  const auto shapes = block_shapes(cfg_);
  for (int l = 0; l < 3; ++l) {
    const auto& b = shapes[static_cast<std::size_t>(l)];
    add(layout_, total, conv_name(l, "weight"), {b.out_channels, b.in_channels, 3, 3});
    add(layout_, total, conv_name(l, "bias"), {b.out_channels});
    add(layout_, total, bn_name(l, "gamma"), {b.out_channels});
    add(layout_, total, bn_name(l, "beta"), {b.out_channels});
    add(buffer_layout_, buffer_total, bn_name(l, "running_mean"), {b.out_channels});
    add(buffer_layout_, buffer_total, bn_name(l, "running_var"), {b.out_channels});
  }
  add(layout_, total, "fc1.weight", {cfg_.fc_hidden, flat_features()});
  add(layout_, total, "fc1.bias", {cfg_.fc_hidden});
  add(layout_, total, "fc2.weight", {1, cfg_.fc_hidden});
  add(layout_, total, "fc2.bias", {1});
  params_.assign(total, 0.0);
  buffers_.assign(buffer_total, 0.0);

  std::mt19937_64 rng(cfg_.seed);
  auto fill_uniform = [&](std::span<double> v, double bound) {
    std::uniform_real_distribution<double> dist(-bound, bound);
    for (double& x : v) x = dist(rng);
  };
  for (int l = 0; l < 3; ++l) {
    const double fan_in = shapes[static_cast<std::size_t>(l)].in_channels * 9.0;
    fill_uniform(view(conv_name(l, "weight")), std::sqrt(6.0 / fan_in));
    fill_uniform(view(conv_name(l, "bias")), 1.0 / std::sqrt(fan_in));
    std::ranges::fill(view(bn_name(l, "gamma")), 1.0);
    std::ranges::fill(view(bn_name(l, "running_var")), 1.0);
  }
  fill_uniform(view("fc1.weight"), std::sqrt(6.0 / flat_features()));
  fill_uniform(view("fc1.bias"), 1.0 / std::sqrt(static_cast<double>(flat_features())));
  fill_uniform(view("fc2.weight"), std::sqrt(6.0 / cfg_.fc_hidden));
  fill_uniform(view("fc2.bias"), 1.0 / std::sqrt(static_cast<double>(cfg_.fc_hidden)));
}

int CnnModel::flat_features() const noexcept {
  const int s = cfg_.input_size / 8;
  return cfg_.conv_channels[2] * s * s;
}

const ParamBlock& CnnModel::block(const std::string& name) const {
  for (const auto& b : layout_)
    if (b.name == name) return b;
  for (const auto& b : buffer_layout_)
    if (b.name == name) return b;
  throw Error(ErrorKind::Invalid, "no parameter block named '" + name + "'");
}

std::span<double> CnnModel::view(const std::string& name) {
  for (const auto& b : layout_)
    if (b.name == name) return std::span<double>(params_).subspan(b.offset, b.count);
  for (const auto& b : buffer_layout_)
    if (b.name == name) return std::span<double>(buffers_).subspan(b.offset, b.count);
  throw Error(ErrorKind::Invalid, "no parameter block named '" + name + "'");
}

std::span<const double> CnnModel::view(const std::string& name) const {
  return const_cast<CnnModel*>(this)->view(name);
}

std::size_t cnn_param_count(const CnnConfig& cfg) {
  std::size_t total = 0;
  int in = 1;
  for (int c : cfg.conv_channels) {
    total += static_cast<std::size_t>(9 * in * c) + c + 2 * static_cast<std::size_t>(c);
    in = c;
  }
  const std::size_t s = static_cast<std::size_t>(cfg.input_size / 8);
  const std::size_t flat = static_cast<std::size_t>(cfg.conv_channels[2]) * s * s;
  total += flat * cfg.fc_hidden + cfg.fc_hidden;
  total += static_cast<std::size_t>(cfg.fc_hidden) + 1;
  return total;
}

// ---------------------------------------------------------------------------
// Elementary ops

namespace cnn_ops {

void max_pool2x2(std::span<const double> in, int channels, int size, std::span<double> out,
                 std::span<int> argmax) {
  const int half = size / 2;
  for (int c = 0; c < channels; ++c) {
    const double* src = in.data() + static_cast<std::size_t>(c) * size * size;
    const std::size_t obase = static_cast<std::size_t>(c) * half * half;
    for (int y = 0; y < half; ++y) {
      for (int x = 0; x < half; ++x) {
        int best = (2 * y) * size + 2 * x;
        for (int off : {1, size, size + 1}) {
          const int idx = (2 * y) * size + 2 * x + off;
          if (src[idx] > src[best]) best = idx;
        }
        out[obase + static_cast<std::size_t>(y) * half + x] = src[best];
        argmax[obase + static_cast<std::size_t>(y) * half + x] = best;
      }
    }
  }
}

void relu_inplace(std::span<double> values) {
  for (double& v : values) v = std::max(v, 0.0);
}

}  // namespace cnn_ops

// ---------------------------------------------------------------------------
// Forward

namespace {

std::vector<double> forward_impl(const CnnModel& model, const ImageBatch& batch,
                                 const ForwardOptions& opt, ForwardCache* cache,
                                 std::span<double> running) {
  const CnnConfig& cfg = model.config();
  if (batch.size != cfg.input_size)
    throw Error(ErrorKind::Schema, "cnn input must be " + std::to_string(cfg.input_size) + "x" +
                                       std::to_string(cfg.input_size));
  if (batch.count < 1) throw Error(ErrorKind::Invalid, "cnn batch is empty");
  const bool train = opt.mode == CnnMode::Train;
  if (train && batch.count < 2)
    throw Error(ErrorKind::Invalid, "train-mode batch norm needs at least 2 images");
  const bool use_dropout = train && opt.dropout && cfg.dropout_rate > 0.0;
  if (use_dropout && !opt.rng) throw Error(ErrorKind::Invalid, "dropout requires an RNG");

  const int B = batch.count;
  if (cache) {
    cache->mode = opt.mode;
    cache->batch = B;
    cache->param_count = model.params().size();
    cache->input = batch.data;
  }

  const auto shapes = block_shapes(cfg);
  std::vector<double> x = batch.data;
  RowMatrix cols;
  for (int l = 0; l < 3; ++l) {
    const auto& sh = shapes[static_cast<std::size_t>(l)];
    const int S = sh.size, C = sh.out_channels, plane = S * S;
    const ConstMapMatrix W(model.view(conv_name(l, "weight")).data(), C, sh.in_channels * 9);
    const auto bias = model.view(conv_name(l, "bias"));
    const auto gamma = model.view(bn_name(l, "gamma"));
    const auto beta = model.view(bn_name(l, "beta"));

    std::vector<double> y(static_cast<std::size_t>(B) * C * plane);
    for (int b = 0; b < B; ++b) {
      im2col3x3(x.data() + static_cast<std::size_t>(b) * sh.in_channels * plane, sh.in_channels, S,
                cols);
      MapMatrix out(y.data() + static_cast<std::size_t>(b) * C * plane, C, plane);
      out.noalias() = W * cols;
      for (int c = 0; c < C; ++c) out.row(c).array() += bias[static_cast<std::size_t>(c)];
    }

    // batch norm, per channel over (batch, spatial)
    std::vector<double> inv_std(static_cast<std::size_t>(C));
    const double count = static_cast<double>(B) * plane;
    for (int c = 0; c < C; ++c) {
      double mean = 0.0, var = 0.0;
      if (train) {
        for (int b = 0; b < B; ++b) {
          const double* p = y.data() + (static_cast<std::size_t>(b) * C + c) * plane;
          for (int i = 0; i < plane; ++i) mean += p[i];
        }
        mean /= count;
        for (int b = 0; b < B; ++b) {
          const double* p = y.data() + (static_cast<std::size_t>(b) * C + c) * plane;
          for (int i = 0; i < plane; ++i) var += (p[i] - mean) * (p[i] - mean);
        }
        var /= count;
        if (opt.update_running_stats) {
          const auto& mb = model.block(bn_name(l, "running_mean"));
          const auto& vb = model.block(bn_name(l, "running_var"));
          double& rm = running[mb.offset + static_cast<std::size_t>(c)];
          double& rv = running[vb.offset + static_cast<std::size_t>(c)];
          const double m = cfg.bn_momentum;
          rm = (1.0 - m) * rm + m * mean;
          rv = (1.0 - m) * rv + m * var * count / std::max(count - 1.0, 1.0);
        }
      } else {
        mean = model.view(bn_name(l, "running_mean"))[static_cast<std::size_t>(c)];
        var = model.view(bn_name(l, "running_var"))[static_cast<std::size_t>(c)];
      }
      const double is = 1.0 / std::sqrt(var + cfg.bn_epsilon);
      inv_std[static_cast<std::size_t>(c)] = is;
      for (int b = 0; b < B; ++b) {
        double* p = y.data() + (static_cast<std::size_t>(b) * C + c) * plane;
        for (int i = 0; i < plane; ++i) p[i] = (p[i] - mean) * is;
      }
    }
    if (cache) {
      cache->xhat[static_cast<std::size_t>(l)] = y;
      cache->inv_std[static_cast<std::size_t>(l)] = inv_std;
    }
    for (int b = 0; b < B; ++b)
      for (int c = 0; c < C; ++c) {
        double* p = y.data() + (static_cast<std::size_t>(b) * C + c) * plane;
        const double g = gamma[static_cast<std::size_t>(c)], be = beta[static_cast<std::size_t>(c)];
        for (int i = 0; i < plane; ++i) p[i] = g * p[i] + be;
      }

    // pool then ReLU
    const int half = S / 2;
    std::vector<double> pooled(static_cast<std::size_t>(B) * C * half * half);
    std::vector<int> argmax(pooled.size());
    cnn_ops::max_pool2x2(y, B * C, S, pooled, argmax);
    cnn_ops::relu_inplace(pooled);
    if (cache) {
      cache->argmax[static_cast<std::size_t>(l)] = std::move(argmax);
      cache->act[static_cast<std::size_t>(l)] = pooled;
    }
    x = std::move(pooled);
  }

  const int F = model.flat_features(), H = cfg.fc_hidden;
  const double* w1 = model.view("fc1.weight").data();
  const auto b1 = model.view("fc1.bias");
  RowMatrix hidden(B, H);
  for (int b = 0; b < B; ++b)
    for (int h = 0; h < H; ++h)
      hidden(b, h) = b1[static_cast<std::size_t>(h)] +
                     dot(x.data() + static_cast<std::size_t>(b) * F, w1 + static_cast<std::size_t>(h) * F, F);
  if (cache) cache->fc1_pre.assign(hidden.data(), hidden.data() + hidden.size());
  hidden = hidden.cwiseMax(0.0);
  if (cache) cache->dropout_scale.clear();
  if (use_dropout) {
    std::bernoulli_distribution keep(1.0 - cfg.dropout_rate);
    const double scale = 1.0 / (1.0 - cfg.dropout_rate);
    std::vector<double> mask(static_cast<std::size_t>(hidden.size()));
    for (auto& m : mask) m = keep(*opt.rng) ? scale : 0.0;
    for (Eigen::Index i = 0; i < hidden.size(); ++i)
      hidden.data()[i] *= mask[static_cast<std::size_t>(i)];
    if (cache) cache->dropout_scale = std::move(mask);
  }
  if (cache) cache->fc1_out.assign(hidden.data(), hidden.data() + hidden.size());

  const double* w2 = model.view("fc2.weight").data();
  const double b2 = model.view("fc2.bias")[0];
  std::vector<double> logits(static_cast<std::size_t>(B));
  for (int b = 0; b < B; ++b) logits[static_cast<std::size_t>(b)] = b2 + dot(&hidden(b, 0), w2, H);
  if (cache) cache->logits = logits;
  return logits;
}

}  // namespace

std::vector<double> forward(CnnModel& model, const ImageBatch& batch, const ForwardOptions& opt,
                            ForwardCache* cache) {
  return forward_impl(model, batch, opt, cache, model.buffers());
}

std::vector<double> forward_eval(const CnnModel& model, const ImageBatch& batch) {
  ForwardOptions opt;
  opt.mode = CnnMode::Eval;
  return forward_impl(model, batch, opt, nullptr, {});
}

// ---------------------------------------------------------------------------
// Loss and backward

double bce_with_logits(std::span<const double> logits, std::span<const int> labels) {
  double sum = 0.0;
  for (std::size_t i = 0; i < logits.size(); ++i) {
    const double z = logits[i];
    // softplus(z) - y z, stable for large |z|
    sum += std::max(z, 0.0) + std::log1p(std::exp(-std::abs(z))) - labels[i] * z;
  }
  return sum / static_cast<double>(logits.size());
}

std::vector<double> backward(const CnnModel& model, const ForwardCache& cache,
                             std::span<const int> labels, double* loss) {
  if (cache.mode != CnnMode::Train)
    throw Error(ErrorKind::Invalid, "backward needs a train-mode forward cache");
  if (cache.param_count != model.params().size() || cache.logits.empty())
    throw Error(ErrorKind::Schema, "forward cache does not belong to this model");
  const int B = cache.batch;
  if (static_cast<int>(labels.size()) != B)
    throw Error(ErrorKind::Schema, "label count does not match batch");
  if (loss) *loss = bce_with_logits(cache.logits, labels);

  const CnnConfig& cfg = model.config();
  const auto shapes = block_shapes(cfg);
  std::vector<double> grad(model.params().size(), 0.0);
  auto gview = [&](const std::string& name) {
    const auto& b = model.block(name);
    return std::span<double>(grad).subspan(b.offset, b.count);
  };

  const int F = model.flat_features(), H = cfg.fc_hidden;
  std::vector<double> dz(static_cast<std::size_t>(B));
  for (int b = 0; b < B; ++b)
    dz[static_cast<std::size_t>(b)] =
        (sigmoid(cache.logits[static_cast<std::size_t>(b)]) - labels[static_cast<std::size_t>(b)]) / B;

  const double* hidden = cache.fc1_out.data();
  auto gw2 = gview("fc2.weight");
  for (int b = 0; b < B; ++b)
    for (int h = 0; h < H; ++h)
      gw2[static_cast<std::size_t>(h)] += hidden[static_cast<std::size_t>(b) * H + h] * dz[static_cast<std::size_t>(b)];
  gview("fc2.bias")[0] = sum(dz.data(), B);

  const auto w2 = model.view("fc2.weight");
  std::vector<double> dh(static_cast<std::size_t>(B) * H);  // B x H
  for (std::size_t i = 0; i < dh.size(); ++i) {
    dh[i] = dz[i / static_cast<std::size_t>(H)] * w2[i % static_cast<std::size_t>(H)];
    if (!cache.dropout_scale.empty()) dh[i] *= cache.dropout_scale[i];
    if (cache.fc1_pre[i] <= 0.0) dh[i] = 0.0;
  }
  const double* A = cache.act[2].data();
  const double* w1 = model.view("fc1.weight").data();
  auto gw1 = gview("fc1.weight");
  auto gb1 = gview("fc1.bias");
  std::vector<double> dact(static_cast<std::size_t>(B) * F, 0.0);  // gradient w.r.t. block 2 output
  for (int b = 0; b < B; ++b) {
    const double* arow = A + static_cast<std::size_t>(b) * F;
    double* drow = dact.data() + static_cast<std::size_t>(b) * F;
    for (int h = 0; h < H; ++h) {
      const double g = dh[static_cast<std::size_t>(b) * H + h];
      if (g == 0.0) continue;
      gb1[static_cast<std::size_t>(h)] += g;
      double* gw = gw1.data() + static_cast<std::size_t>(h) * F;
      const double* w = w1 + static_cast<std::size_t>(h) * F;
      for (int f = 0; f < F; ++f) {
        gw[f] += g * arow[f];
        drow[f] += g * w[f];
      }
    }
  }
  RowMatrix cols, dcols;
  for (int l = 2; l >= 0; --l) {
    const auto li = static_cast<std::size_t>(l);
    const auto& sh = shapes[li];
    const int S = sh.size, C = sh.out_channels, plane = S * S, half = S / 2;
    const auto gamma = model.view(bn_name(l, "gamma"));

    // ReLU and max-pool routing back onto the BN output
    std::vector<double> dy(static_cast<std::size_t>(B) * C * plane, 0.0);
    const auto& act = cache.act[li];
    const auto& argmax = cache.argmax[li];
    for (int bc = 0; bc < B * C; ++bc) {
      const std::size_t obase = static_cast<std::size_t>(bc) * half * half;
      const std::size_t ibase = static_cast<std::size_t>(bc) * plane;
      for (int i = 0; i < half * half; ++i) {
        const std::size_t o = obase + static_cast<std::size_t>(i);
        if (act[o] > 0.0) dy[ibase + static_cast<std::size_t>(argmax[o])] += dact[o];
      }
    }

    // batch norm with batch statistics
    auto dgamma = gview(bn_name(l, "gamma"));
    auto dbeta = gview(bn_name(l, "beta"));
    const auto& xhat = cache.xhat[li];
    const double count = static_cast<double>(B) * plane;
    for (int c = 0; c < C; ++c) {
      double sum_dy = 0.0, sum_dy_xhat = 0.0;
      for (int b = 0; b < B; ++b) {
        const std::size_t base = (static_cast<std::size_t>(b) * C + c) * plane;
        for (int i = 0; i < plane; ++i) {
          sum_dy += dy[base + i];
          sum_dy_xhat += dy[base + i] * xhat[base + i];
        }
      }
      dgamma[static_cast<std::size_t>(c)] = sum_dy_xhat;
      dbeta[static_cast<std::size_t>(c)] = sum_dy;
      const double g = gamma[static_cast<std::size_t>(c)];
      const double k = g * cache.inv_std[li][static_cast<std::size_t>(c)] / count;
      for (int b = 0; b < B; ++b) {
        const std::size_t base = (static_cast<std::size_t>(b) * C + c) * plane;
        for (int i = 0; i < plane; ++i)
          dy[base + i] = k * (count * dy[base + i] - sum_dy - xhat[base + i] * sum_dy_xhat);
      }
    }

    // convolution
    const std::vector<double>& input = l == 0 ? cache.input : cache.act[li - 1];
    MapMatrix dW(gview(conv_name(l, "weight")).data(), C, sh.in_channels * 9);
    auto dbias = gview(conv_name(l, "bias"));
    const ConstMapMatrix W(model.view(conv_name(l, "weight")).data(), C, sh.in_channels * 9);
    std::vector<double> dinput(l == 0 ? 0 : static_cast<std::size_t>(B) * sh.in_channels * plane);
    for (int b = 0; b < B; ++b) {
      const ConstMapMatrix dyb(dy.data() + static_cast<std::size_t>(b) * C * plane, C, plane);
      im2col3x3(input.data() + static_cast<std::size_t>(b) * sh.in_channels * plane, sh.in_channels,
                S, cols);
      dW.noalias() += dyb * cols.transpose();
      for (int c = 0; c < C; ++c) dbias[static_cast<std::size_t>(c)] += sum(dyb.data() + static_cast<std::size_t>(c) * plane, plane);
      if (l > 0) {
        dcols.noalias() = W.transpose() * dyb;
        col2im3x3(dcols, sh.in_channels, S,
                  dinput.data() + static_cast<std::size_t>(b) * sh.in_channels * plane);
      }
    }
    dact = std::move(dinput);
  }
  return grad;
}

void sgd_step(std::span<double> params, std::span<const double> grads, std::span<double> velocity,
              double lr, double momentum, double weight_decay) {
  if (params.size() != grads.size() || params.size() != velocity.size())
    throw Error(ErrorKind::Schema, "sgd_step shape mismatch");
  for (std::size_t i = 0; i < params.size(); ++i) {
    velocity[i] = momentum * velocity[i] + grads[i] + weight_decay * params[i];
    params[i] -= lr * velocity[i];
  }
}

// ---------------------------------------------------------------------------
// Training and inference

std::vector<double> predict_cnn(const CnnModel& model, const ImageBatch& images) {
  constexpr int kChunk = 64;
  std::vector<double> out;
  out.reserve(static_cast<std::size_t>(images.count));
  std::vector<int> idx;
  for (int start = 0; start < images.count; start += kChunk) {
    idx.resize(static_cast<std::size_t>(std::min(kChunk, images.count - start)));
    std::iota(idx.begin(), idx.end(), start);
    for (double z : forward_eval(model, images.select(idx))) out.push_back(sigmoid(z));
  }
  return out;
}

CnnTrainResult train_cnn(const ImageBatch& train, std::span<const int> train_labels,
                         const ImageBatch& val, std::span<const int> val_labels,
                         const CnnConfig& cfg, const TrainConfig& tcfg) {
  tcfg.validate();
  if (train.count < 2 || val.count < 1)
    throw Error(ErrorKind::Invalid, "cnn training needs >= 2 training and >= 1 validation images");
  if (static_cast<int>(train_labels.size()) != train.count ||
      static_cast<int>(val_labels.size()) != val.count)
    throw Error(ErrorKind::Schema, "label count does not match images");

  CnnTrainResult result{CnnModel(cfg), {}};
  CnnModel model(cfg);
  std::vector<double> velocity(model.params().size(), 0.0);
  std::mt19937_64 shuffle_rng(tcfg.seed);
  std::mt19937_64 dropout_rng(tcfg.seed ^ 0x9e3779b97f4a7c15ULL);
  std::vector<int> order(static_cast<std::size_t>(train.count));
  std::iota(order.begin(), order.end(), 0);
  double best_auc = -1.0;

  ForwardOptions opt;
  opt.mode = CnnMode::Train;
  opt.rng = &dropout_rng;
  for (int epoch = 0; epoch < tcfg.epochs; ++epoch) {
    const double lr = tcfg.lr_at(epoch);
    std::shuffle(order.begin(), order.end(), shuffle_rng);
    double loss_sum = 0.0;
    int start = 0;
    while (start < train.count) {
      int end = std::min(start + tcfg.batch_size, train.count);
      if (train.count - end == 1) ++end;  // a lone trailing image joins this batch
      const std::span<const int> idx(order.data() + start, static_cast<std::size_t>(end - start));
      std::vector<int> labels;
      for (int i : idx) labels.push_back(train_labels[static_cast<std::size_t>(i)]);
      ForwardCache cache;
      forward(model, train.select(idx), opt, &cache);
      double loss = 0.0;
      const auto grad = backward(model, cache, labels, &loss);
      sgd_step(model.params(), grad, velocity, lr, tcfg.momentum, tcfg.weight_decay);
      loss_sum += loss * static_cast<double>(idx.size());
      start = end;
    }

    const auto probs = predict_cnn(model, val);
    const double auc = roc_auc(probs, val_labels);
    result.history.epochs.push_back({epoch, loss_sum / train.count, lr, auc});
    logger()->debug("cnn epoch {} lr {:g} loss {:.5f} val auc {:.4f}", epoch, lr,
                    loss_sum / train.count, auc);
    if (auc > best_auc) {
      best_auc = auc;
      result.model = model;
      result.history.selected_epoch = epoch;
    }
  }
  return result;
}

// ---------------------------------------------------------------------------
// Persistence

namespace {

nlohmann::ordered_json layout_json(const std::vector<ParamBlock>& layout) {
  auto arr = nlohmann::ordered_json::array();
  for (const auto& b : layout)
    arr.push_back({{"name", b.name}, {"shape", b.shape}, {"offset", b.offset}, {"count", b.count}});
  return arr;
}

void write_le_doubles(std::ofstream& out, std::span<const double> values) {
  static_assert(std::endian::native == std::endian::little || std::endian::native == std::endian::big);
  for (double v : values) {
    auto bits = std::bit_cast<std::uint64_t>(v);
    char bytes[8];
    for (int i = 0; i < 8; ++i) bytes[i] = static_cast<char>((bits >> (8 * i)) & 0xff);
    out.write(bytes, 8);
  }
}

void read_le_doubles(std::ifstream& in, std::span<double> values) {
  for (double& v : values) {
    unsigned char bytes[8];
    in.read(reinterpret_cast<char*>(bytes), 8);
    if (in.gcount() != 8) throw Error(ErrorKind::Parse, "cnn weight file is truncated");
    std::uint64_t bits = 0;
    for (int i = 0; i < 8; ++i) bits |= static_cast<std::uint64_t>(bytes[i]) << (8 * i);
    v = std::bit_cast<double>(bits);
  }
}

}  // namespace

void save_cnn(const CnnModel& model, const std::filesystem::path& stem) {
  const auto& c = model.config();
  nlohmann::ordered_json doc;
  doc["format"] = "texroi-cnn";
  doc["version"] = 1;
  doc["config"] = {{"input_size", c.input_size},   {"conv_channels", c.conv_channels},
                   {"fc_hidden", c.fc_hidden},     {"dropout_rate", c.dropout_rate},
                   {"bn_momentum", c.bn_momentum}, {"bn_epsilon", c.bn_epsilon},
                   {"seed", c.seed}};
  doc["dtype"] = "float64-le";
  doc["params"] = layout_json(model.layout());
  doc["buffers"] = layout_json(model.buffer_layout());
  doc["param_count"] = model.params().size();
  doc["buffer_count"] = model.buffers().size();

  auto json_path = stem;
  json_path += ".json";
  auto bin_path = stem;
  bin_path += ".bin";
  std::ofstream js(json_path);
  std::ofstream bin(bin_path, std::ios::binary);
  if (!js || !bin) throw Error(ErrorKind::Io, "cannot write cnn model '" + stem.string() + "'");
  js << doc.dump(2) << '\n';
  write_le_doubles(bin, model.params());
  write_le_doubles(bin, model.buffers());
  if (!js || !bin) throw Error(ErrorKind::Io, "failed writing cnn model '" + stem.string() + "'");
}

CnnModel load_cnn(const std::filesystem::path& stem) {
  auto json_path = stem;
  json_path += ".json";
  auto bin_path = stem;
  bin_path += ".bin";
  std::ifstream js(json_path);
  std::ifstream bin(bin_path, std::ios::binary);
  if (!js || !bin) throw Error(ErrorKind::Io, "cannot open cnn model '" + stem.string() + "'");
  nlohmann::json doc;
  try {
    doc = nlohmann::json::parse(js);
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorKind::Parse, std::string("cnn sidecar is not valid JSON: ") + e.what());
  }
  if (doc.value("format", "") != "texroi-cnn" || doc.value("version", 0) != 1)
    throw Error(ErrorKind::Version, "unsupported cnn model format");
  CnnConfig cfg;
  try {
    const auto& jc = doc.at("config");
    cfg.input_size = jc.at("input_size").get<int>();
    cfg.conv_channels = jc.at("conv_channels").get<std::array<int, 3>>();
    cfg.fc_hidden = jc.at("fc_hidden").get<int>();
    cfg.dropout_rate = jc.at("dropout_rate").get<double>();
    cfg.bn_momentum = jc.at("bn_momentum").get<double>();
    cfg.bn_epsilon = jc.at("bn_epsilon").get<double>();
    cfg.seed = jc.at("seed").get<std::uint64_t>();
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorKind::Parse, std::string("malformed cnn sidecar: ") + e.what());
  }
  CnnModel model(cfg);
  if (doc.value("param_count", std::size_t{0}) != model.params().size() ||
      doc.value("buffer_count", std::size_t{0}) != model.buffers().size())
    throw Error(ErrorKind::Schema, "cnn sidecar layout does not match its config");
  read_le_doubles(bin, model.params());
  read_le_doubles(bin, model.buffers());
  return model;
}

}  // namespace texroi
