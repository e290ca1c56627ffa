#pragma once

#include <array>
#include <string>
#include <utility>
#include <vector>

#include "dfkd/nn.hpp"
#include "dfkd/optim.hpp"
#include "dfkd/serialize.hpp"
#include "dfkd/toy_data.hpp"

#include "json.hpp"

// Teacher/student classifiers: stem conv -> 3 stages of conv-BN-ReLU blocks
// (x2 spatial downsample at each stage entry) -> global average pool ->
// linear head. Every stage boundary is a tap point for distillation, and all
// BatchNorm layers expose running and batch statistics.

namespace dfkd {

struct ConvNetSpec {
  std::array<int, 3> stage_channels{};
  int blocks_per_stage = 1;
  int num_classes = 2;
  int input_size = 32;

  void validate() const {
    for (int c : stage_channels) DFKD_CHECK(c >= 1, "ConvNetSpec: stage channels must be positive");
    DFKD_CHECK(blocks_per_stage >= 1, "ConvNetSpec: blocks_per_stage must be >= 1");
    DFKD_CHECK(num_classes >= 2, "ConvNetSpec: num_classes must be >= 2");
    DFKD_CHECK(input_size >= 8 && input_size % 8 == 0,
               "ConvNetSpec: input_size must be divisible by 2^3, got " << input_size);
  }

  nlohmann::json to_json() const {
    return {{"stage_channels", stage_channels}, {"blocks_per_stage", blocks_per_stage},
            {"num_classes", num_classes}, {"input_size", input_size}};
  }

  static ConvNetSpec from_json(const nlohmann::json& j) {
    ConvNetSpec s;
    for (int i = 0; i < 3; ++i) s.stage_channels[static_cast<std::size_t>(i)] = j["stage_channels"][static_cast<std::size_t>(i)];
    s.blocks_per_stage = j["blocks_per_stage"];
    s.num_classes = j["num_classes"];
    s.input_size = j["input_size"];
    return s;
  }

  bool operator==(const ConvNetSpec&) const = default;
};

template <typename T>
struct BNLayerStats {
  std::string layer_id;
  Tensor<T> mean;
  Tensor<T> variance;
};

template <typename T>
struct BnStatsVar {
  std::string layer_id;
  Variable<T> mean;
  Variable<T> variance;
};

template <typename T>
struct ForwardRecord {
  Variable<T> logits;
  std::vector<Variable<T>> stage_features;   // one per stage when requested
  Variable<T> penultimate;                   // (N, D) global-average-pooled
  std::vector<BnStatsVar<T>> bn_batch_stats; // when recorded
};

template <typename T>
struct ForwardOptions {
  nn::Mode mode = nn::Mode::kEval;
  bool want_taps = false;
  bool want_penultimate = false;
  bool record_bn_stats = false;  // forces eval normalization, taps batch stats of BN inputs
};

template <typename T>
class ConvNet {
 public:
  ConvNet() = default;

  ConvNet(const ConvNetSpec& spec, std::uint64_t seed) : spec_(spec) {
    spec.validate();
    Rng rng(seed);
    stem_conv_ = nn::Conv2d<T>(3, spec.stage_channels[0], 3, 1, 1, /*bias=*/false, rng);
    stem_bn_ = nn::BatchNorm2d<T>(spec.stage_channels[0]);
    int in_ch = spec.stage_channels[0];
    for (int s = 0; s < 3; ++s) {
      const int out_ch = spec.stage_channels[static_cast<std::size_t>(s)];
      for (int b = 0; b < spec.blocks_per_stage; ++b) {
        const int stride = b == 0 ? 2 : 1;
        blocks_.push_back({s, nn::Conv2d<T>(in_ch, out_ch, 3, stride, 1, false, rng), nn::BatchNorm2d<T>(out_ch)});
        in_ch = out_ch;
      }
    }
    head_ = nn::Linear<T>(spec.stage_channels[2], spec.num_classes, rng);
  }

  const ConvNetSpec& spec() const { return spec_; }

  ForwardRecord<T> forward(const Variable<T>& images, const ForwardOptions<T>& opt) {
    const Tensor<T>& x = images.value();
    DFKD_CHECK(x.rank() == 4 && x.dim(1) == 3 && x.dim(2) == spec_.input_size && x.dim(3) == spec_.input_size,
               "ConvNet: expected (N,3," << spec_.input_size << "," << spec_.input_size << "), got " << x.shape_str());
    ForwardRecord<T> rec;
    Variable<T> h = bn_forward(stem_conv_.forward(images), stem_bn_, "stem.bn", opt, rec);
    h = ops::relu(h);
    int bi = 0;
    for (int s = 0; s < 3; ++s) {
      for (int b = 0; b < spec_.blocks_per_stage; ++b, ++bi) {
        Block& blk = blocks_[static_cast<std::size_t>(bi)];
        h = bn_forward(blk.conv.forward(h), blk.bn, layer_id(s, b), opt, rec);
        h = ops::relu(h);
      }
      if (opt.want_taps) rec.stage_features.push_back(h);
    }
    Variable<T> pooled = ops::global_avg_pool(h);
    if (opt.want_penultimate) rec.penultimate = pooled;
    rec.logits = head_.forward(pooled);
    return rec;
  }

  std::vector<BNLayerStats<T>> running_bn_stats() const {
    std::vector<BNLayerStats<T>> out;
    out.push_back({"stem.bn", stem_bn_.running_mean, stem_bn_.running_var});
    int bi = 0;
    for (int s = 0; s < 3; ++s)
      for (int b = 0; b < spec_.blocks_per_stage; ++b, ++bi)
        out.push_back({layer_id(s, b), blocks_[static_cast<std::size_t>(bi)].bn.running_mean,
                       blocks_[static_cast<std::size_t>(bi)].bn.running_var});
    return out;
  }

  nn::Registry<T> registry() {
    nn::Registry<T> reg;
    stem_conv_.register_into(reg, "stem.conv");
    stem_bn_.register_into(reg, "stem.bn");
    int bi = 0;
    for (int s = 0; s < 3; ++s)
      for (int b = 0; b < spec_.blocks_per_stage; ++b, ++bi) {
        const std::string p = "s" + std::to_string(s) + ".b" + std::to_string(b);
        blocks_[static_cast<std::size_t>(bi)].conv.register_into(reg, p + ".conv");
        blocks_[static_cast<std::size_t>(bi)].bn.register_into(reg, p + ".bn");
      }
    head_.register_into(reg, "head");
    return reg;
  }

  nn::Linear<T>& head() { return head_; }
  nn::BatchNorm2d<T>& stem_bn() { return stem_bn_; }

 private:
  struct Block {
    int stage;
    nn::Conv2d<T> conv;
    nn::BatchNorm2d<T> bn;
  };

  static std::string layer_id(int stage, int block) {
    return "s" + std::to_string(stage) + ".b" + std::to_string(block) + ".bn";
  }

  Variable<T> bn_forward(const Variable<T>& conv_out, nn::BatchNorm2d<T>& bn, const std::string& id,
                         const ForwardOptions<T>& opt, ForwardRecord<T>& rec) {
    if (opt.record_bn_stats) {
      const int n = conv_out.value().dim(0), h = conv_out.value().dim(2), w = conv_out.value().dim(3);
      Variable<T> mu = ops::channel_mean(conv_out);
      Variable<T> centered = ops::sub(conv_out, ops::broadcast_channel(mu, n, h, w));
      Variable<T> var = ops::channel_mean(ops::mul(centered, centered));
      rec.bn_batch_stats.push_back({id, mu, var});
      return bn.forward(conv_out, nn::Mode::kEval);
    }
    return bn.forward(conv_out, opt.mode);
  }

  ConvNetSpec spec_;
  nn::Conv2d<T> stem_conv_;
  nn::BatchNorm2d<T> stem_bn_;
  std::vector<Block> blocks_;
  nn::Linear<T> head_;
};

template <typename T>
ConvNet<T> build_model(const ConvNetSpec& spec, std::uint64_t seed) {
  return ConvNet<T>(spec, seed);
}

template <typename T>
ForwardRecord<T> forward_with_taps(ConvNet<T>& model, const Variable<T>& images, nn::Mode mode) {
  ForwardOptions<T> opt;
  opt.mode = mode;
  opt.want_taps = true;
  opt.want_penultimate = true;
  return model.forward(images, opt);
}

template <typename T>
std::vector<BNLayerStats<T>> collect_bn_running_stats(ConvNet<T>& model) {
  auto stats = model.running_bn_stats();
  DFKD_CHECK(!stats.empty(), "collect_bn_running_stats: model has no BatchNorm layers");
  return stats;
}

// Forward pass with BatchNorm normalizing by running statistics while the
// batch mean and biased batch variance of each BN layer's input are recorded.
// Running statistics are left untouched.
template <typename T>
std::vector<BNLayerStats<T>> batch_stats_under_forward(ConvNet<T>& model, const Variable<T>& images) {
  DFKD_CHECK(images.value().dim(0) >= 2, "batch_stats_under_forward: batch size must be >= 2");
  ForwardOptions<T> opt;
  opt.record_bn_stats = true;
  ForwardRecord<T> rec = model.forward(images, opt);
  std::vector<BNLayerStats<T>> out;
  for (const auto& s : rec.bn_batch_stats) out.push_back({s.layer_id, s.mean.value(), s.variance.value()});
  return out;
}

// ---------------------------------------------------------------------------
// Channel adapter (1x1 convolution, no bias, trained with the student)
// ---------------------------------------------------------------------------

template <typename T>
struct Adapter {
  Variable<T> weight;  // (C_t, C_s, 1, 1)
  int in_channels = 0, out_channels = 0;

  Adapter() = default;
  Adapter(int c_in, int c_out, Rng& rng) : in_channels(c_in), out_channels(c_out) {
    weight = nn::make_param<T>({c_out, c_in, 1, 1});
    nn::he_normal(rng, weight.value(), c_in);
  }

  void set_identity() {
    DFKD_CHECK(in_channels == out_channels, "Adapter::set_identity: needs square channel map");
    weight.value().fill(T(0));
    for (int c = 0; c < in_channels; ++c) weight.value().at(c, c, 0, 0) = T(1);
  }

  Variable<T> forward(const Variable<T>& x) const {
    DFKD_CHECK(x.value().dim(1) == in_channels,
               "Adapter: built for " << in_channels << " input channels, got " << x.value().dim(1));
    return ops::conv2d(x, weight, Variable<T>(), 1, 0);
  }

  void register_into(nn::Registry<T>& reg, const std::string& prefix) { reg.add_param(prefix + ".w", &weight); }
};

template <typename T>
Variable<T> adapt_channels(const Variable<T>& feature, const Adapter<T>& adapter, int c_t) {
  DFKD_CHECK(adapter.out_channels == c_t, "adapt_channels: adapter maps to " << adapter.out_channels
                                                                             << " channels, requested " << c_t);
  return adapter.forward(feature);
}

// ---------------------------------------------------------------------------
// Evaluation and supervised pretraining
// ---------------------------------------------------------------------------

inline Tensor<float> gather_batch(const LabeledImageSet& data, const std::vector<int>& idx, int begin, int count) {
  const int s = data.image_size();
  const std::int64_t stride = 3LL * s * s;
  Tensor<float> batch({count, 3, s, s});
  for (int i = 0; i < count; ++i)
    std::copy(data.images.data() + idx[static_cast<std::size_t>(begin + i)] * stride,
              data.images.data() + (idx[static_cast<std::size_t>(begin + i)] + 1) * stride,
              batch.data() + static_cast<std::int64_t>(i) * stride);
  return batch;
}

inline double evaluate_accuracy(ConvNet<float>& model, const LabeledImageSet& data, int batch_size = 128) {
  DFKD_CHECK(data.size() > 0, "evaluate_accuracy: empty dataset");
  DFKD_CHECK(model.spec().num_classes == data.num_classes(),
             "evaluate_accuracy: model has " << model.spec().num_classes << " classes, dataset "
                                             << data.num_classes());
  std::vector<int> idx(static_cast<std::size_t>(data.size()));
  for (int i = 0; i < data.size(); ++i) idx[static_cast<std::size_t>(i)] = i;
  int correct = 0;
  for (int b = 0; b < data.size(); b += batch_size) {
    const int count = std::min(batch_size, data.size() - b);
    auto images = Variable<float>::constant(gather_batch(data, idx, b, count));
    ForwardOptions<float> opt;  // eval mode, logits only
    auto rec = model.forward(images, opt);
    const int k = data.num_classes();
    for (int i = 0; i < count; ++i) {
      const float* row = rec.logits.value().data() + static_cast<std::int64_t>(i) * k;
      int arg = 0;
      for (int j = 1; j < k; ++j)
        if (row[j] > row[arg]) arg = j;
      if (arg == data.labels[static_cast<std::size_t>(b + i)]) ++correct;
    }
  }
  return static_cast<double>(correct) / data.size();
}

template <typename T>
Variable<T> cross_entropy(const Variable<T>& logits, const std::vector<int>& labels) {
  auto logp = ops::log_softmax_rows(logits);
  auto picked = ops::gather_cols(logp, labels);
  return ops::scale(ops::mean_all(picked), T(-1));
}

struct PretrainOptions {
  int epochs = 60;
  int batch_size = 64;
  double lr = 0.02;
  double momentum = 0.9;
  double weight_decay = 5e-4;
};

struct PretrainHistory {
  std::vector<double> train_loss;
  std::vector<double> test_accuracy;

  double final_accuracy() const { return test_accuracy.empty() ? 0.0 : test_accuracy.back(); }
};

inline PretrainHistory pretrain(ConvNet<float>& model, const LabeledImageSet& train, const LabeledImageSet& test,
                                const PretrainOptions& opt, std::uint64_t seed) {
  DFKD_CHECK(train.num_classes() == model.spec().num_classes && test.num_classes() == model.spec().num_classes,
             "pretrain: class count mismatch");
  auto reg = model.registry();
  Sgd<float> sgd(reg.param_ptrs(), static_cast<float>(opt.lr), static_cast<float>(opt.momentum),
                 static_cast<float>(opt.weight_decay));
  Rng rng(seed);
  PretrainHistory hist;
  std::vector<int> perm(static_cast<std::size_t>(train.size()));
  for (int i = 0; i < train.size(); ++i) perm[static_cast<std::size_t>(i)] = i;

  for (int epoch = 0; epoch < opt.epochs; ++epoch) {
    sgd.set_lr(static_cast<float>(cosine_lr(opt.lr, epoch, opt.epochs)));
    for (int i = train.size() - 1; i > 0; --i)
      std::swap(perm[static_cast<std::size_t>(i)], perm[static_cast<std::size_t>(rng.uniform_int(0, i))]);
    double loss_sum = 0.0;
    int batches = 0;
    for (int b = 0; b + 1 < train.size(); b += opt.batch_size) {  // BN needs >= 2 samples
      const int count = std::min(opt.batch_size, train.size() - b);
      if (count < 2) break;
      auto images = Variable<float>::constant(gather_batch(train, perm, b, count));
      std::vector<int> labels(static_cast<std::size_t>(count));
      for (int i = 0; i < count; ++i) labels[static_cast<std::size_t>(i)] = train.labels[static_cast<std::size_t>(perm[static_cast<std::size_t>(b + i)])];
      ForwardOptions<float> fopt;
      fopt.mode = nn::Mode::kTrain;
      auto rec = model.forward(images, fopt);
      auto loss = cross_entropy(rec.logits, labels);
      DFKD_REQUIRE(std::isfinite(loss.value()[0]), "pretrain: non-finite loss at epoch " << epoch);
      sgd.zero_grad();
      loss.backward();
      sgd.step();
      loss_sum += loss.value()[0];
      ++batches;
    }
    hist.train_loss.push_back(batches > 0 ? loss_sum / batches : 0.0);
    hist.test_accuracy.push_back(evaluate_accuracy(model, test));
  }
  return hist;
}

// ---------------------------------------------------------------------------
// Model checkpoints: weight blob + JSON sidecar
// ---------------------------------------------------------------------------

inline constexpr int kModelCkptVersion = 1;

inline void save_model_checkpoint(ConvNet<float>& model, const std::string& path, std::uint64_t seed, int epoch,
                                  const nlohmann::json& metrics) {
  BlobWriter w;
  auto reg = model.registry();
  for (const auto& [name, p] : reg.params) w.add_tensor("model/" + name, p->value());
  for (const auto& [name, b] : reg.buffers) w.add_tensor("model/" + name, *b);
  w.add_string("spec", model.spec().to_json().dump());
  w.write(path);

  nlohmann::json sidecar{{"format_version", kModelCkptVersion},
                         {"spec", model.spec().to_json()},
                         {"seed", seed},
                         {"epoch", epoch},
                         {"metrics", metrics}};
  std::ofstream f(path + ".json");
  f << sidecar.dump(2) << "\n";
}

inline ConvNet<float> load_model_checkpoint(const std::string& path) {
  BlobReader r(path);
  ConvNetSpec spec = ConvNetSpec::from_json(nlohmann::json::parse(r.str("spec")));
  ConvNet<float> model(spec, /*seed=*/0);
  auto reg = model.registry();
  for (const auto& [name, p] : reg.params) {
    Tensor<float> t = r.tensor("model/" + name);
    DFKD_REQUIRE(t.same_shape(p->value()), "checkpoint tensor " << name << " has shape " << t.shape_str());
    p->value() = std::move(t);
  }
  for (const auto& [name, b] : reg.buffers) {
    Tensor<float> t = r.tensor("model/" + name);
    DFKD_REQUIRE(t.same_shape(*b), "checkpoint buffer " << name << " has shape " << t.shape_str());
    *b = std::move(t);
  }
  return model;
}

// CRC over all parameters and buffers, for freeze-contract assertions.
template <typename T>
std::uint32_t weights_checksum(nn::Registry<T>& reg) {
  std::uint32_t crc = 0;
  for (const auto& [name, p] : reg.params) {
    crc = crc32_bytes(name.data(), name.size(), crc);
    crc = crc32_bytes(p->value().data(), sizeof(T) * static_cast<std::size_t>(p->value().numel()), crc);
  }
  for (const auto& [name, b] : reg.buffers) {
    crc = crc32_bytes(name.data(), name.size(), crc);
    crc = crc32_bytes(b->data(), sizeof(T) * static_cast<std::size_t>(b->numel()), crc);
  }
  return crc;
}

}  // namespace dfkd
