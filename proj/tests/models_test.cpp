#include <gtest/gtest.h>

#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>

#include "dfkd/models.hpp"
#include "test_util.hpp"

using dfkd::ConvNet;
using dfkd::ConvNetSpec;
using dfkd::Rng;
using dfkd::Tensor;
using dfkd::Variable;
namespace nn = dfkd::nn;

namespace {

ConvNetSpec teacher_spec() { return {{64, 128, 256}, 2, 10, 32}; }
ConvNetSpec tiny_spec() { return {{8, 12, 16}, 1, 4, 32}; }

Tensor<float> random_images(int n, int s, unsigned seed, double scale = 0.5) {
  Rng rng(seed);
  Tensor<float> t({n, 3, s, s});
  t.fill_normal(rng, 0.0, scale);
  return t;
}

}  // namespace

TEST(BuildModel, TeacherShapes) {
  auto model = dfkd::build_model<float>(teacher_spec(), 0);
  auto rec = dfkd::forward_with_taps(model, Variable<float>::constant(random_images(4, 32, 1)), nn::Mode::kEval);
  EXPECT_EQ(rec.logits.value().shape(), (std::vector<int>{4, 10}));
  ASSERT_EQ(rec.stage_features.size(), 3u);
  EXPECT_EQ(rec.stage_features[0].value().shape(), (std::vector<int>{4, 64, 16, 16}));
  EXPECT_EQ(rec.stage_features[1].value().shape(), (std::vector<int>{4, 128, 8, 8}));
  EXPECT_EQ(rec.stage_features[2].value().shape(), (std::vector<int>{4, 256, 4, 4}));
  EXPECT_EQ(rec.penultimate.value().shape(), (std::vector<int>{4, 256}));
}

TEST(BuildModel, DeterministicInit) {
  auto a = dfkd::build_model<float>(tiny_spec(), 42);
  auto b = dfkd::build_model<float>(tiny_spec(), 42);
  auto ra = a.registry(), rb = b.registry();
  EXPECT_EQ(dfkd::weights_checksum(ra), dfkd::weights_checksum(rb));
  auto c = dfkd::build_model<float>(tiny_spec(), 43);
  auto rc = c.registry();
  EXPECT_NE(dfkd::weights_checksum(ra), dfkd::weights_checksum(rc));
}

TEST(BuildModel, RejectsInvalidSpec) {
  ConvNetSpec bad = tiny_spec();
  bad.input_size = 30;
  EXPECT_THROW(dfkd::build_model<float>(bad, 0), std::invalid_argument);
  bad = tiny_spec();
  bad.num_classes = 1;
  EXPECT_THROW(dfkd::build_model<float>(bad, 0), std::invalid_argument);
}

TEST(ForwardWithTaps, ZeroInputZeroHeadGivesEqualLogits) {
  auto model = dfkd::build_model<float>(tiny_spec(), 3);
  model.head().weight.value().fill(0.0f);
  model.head().bias.value().fill(0.0f);
  auto rec = dfkd::forward_with_taps(model, Variable<float>::constant(Tensor<float>({4, 3, 32, 32})), nn::Mode::kEval);
  for (int i = 0; i < 4; ++i)
    for (int j = 1; j < 4; ++j)
      EXPECT_FLOAT_EQ(rec.logits.value()[i * 4 + j], rec.logits.value()[i * 4]);
}

TEST(ForwardWithTaps, EvalForwardIsBitwiseDeterministic) {
  auto model = dfkd::build_model<float>(tiny_spec(), 4);
  auto images = Variable<float>::constant(random_images(3, 32, 5));
  auto r1 = dfkd::forward_with_taps(model, images, nn::Mode::kEval);
  auto r2 = dfkd::forward_with_taps(model, images, nn::Mode::kEval);
  EXPECT_EQ(std::memcmp(r1.logits.value().data(), r2.logits.value().data(), sizeof(float) * r1.logits.value().numel()),
            0);
  for (int t = 0; t < 3; ++t)
    EXPECT_EQ(std::memcmp(r1.stage_features[static_cast<std::size_t>(t)].value().data(),
                          r2.stage_features[static_cast<std::size_t>(t)].value().data(),
                          sizeof(float) * r1.stage_features[static_cast<std::size_t>(t)].value().numel()),
              0);
}

TEST(ForwardWithTaps, TrainAndEvalDifferWhenBatchStatsDeviate) {
  auto model = dfkd::build_model<float>(tiny_spec(), 6);
  // batch mean far from the running mean of a fresh model (0)
  Tensor<float> images({4, 3, 32, 32});
  for (std::int64_t i = 0; i < images.numel(); ++i) images[i] = 0.8f;
  auto images_v = Variable<float>::constant(images);
  auto ev = dfkd::forward_with_taps(model, images_v, nn::Mode::kEval);
  auto tr = dfkd::forward_with_taps(model, images_v, nn::Mode::kTrain);
  EXPECT_GT(dfkd_test::max_abs_diff(ev.logits.value(), tr.logits.value()), 1e-4);
}

TEST(ForwardWithTaps, RejectsWrongShape) {
  auto model = dfkd::build_model<float>(tiny_spec(), 7);
  EXPECT_THROW(dfkd::forward_with_taps(model, Variable<float>::constant(Tensor<float>({2, 3, 16, 16})),
                                       nn::Mode::kEval),
               std::invalid_argument);
}

TEST(BnRunningStats, FreshModelAndLayerCount) {
  auto teacher = dfkd::build_model<float>(teacher_spec(), 0);
  auto stats = dfkd::collect_bn_running_stats(teacher);
  EXPECT_EQ(stats.size(), 7u);  // stem + 3 stages x 2 blocks
  for (const auto& s : stats) {
    for (std::int64_t i = 0; i < s.mean.numel(); ++i) EXPECT_FLOAT_EQ(s.mean[i], 0.0f);
    for (std::int64_t i = 0; i < s.variance.numel(); ++i) EXPECT_FLOAT_EQ(s.variance[i], 1.0f);
  }
}

TEST(BnRunningStats, NonzeroAfterTraining) {
  auto data = dfkd::synth_fgvc_dataset(2, 2, 8, 32, 0);
  auto [train, test] = dfkd::split(data, 0.75, 0);
  auto model = dfkd::build_model<float>(ConvNetSpec{{8, 12, 16}, 1, 4, 32}, 1);
  dfkd::PretrainOptions opt;
  opt.epochs = 1;
  opt.batch_size = 8;
  dfkd::pretrain(model, train, test, opt, 0);
  double max_norm = 0.0;
  for (const auto& s : dfkd::collect_bn_running_stats(model)) {
    double n2 = 0;
    for (std::int64_t i = 0; i < s.mean.numel(); ++i) n2 += s.mean[i] * s.mean[i];
    max_norm = std::max(max_norm, std::sqrt(n2));
  }
  EXPECT_GT(max_norm, 0.0);
}

TEST(BatchStatsUnderForward, PureAndRepeatable) {
  auto model = dfkd::build_model<float>(tiny_spec(), 8);
  auto images = Variable<float>::constant(random_images(4, 32, 9));
  auto reg = model.registry();
  const std::uint32_t before = dfkd::weights_checksum(reg);
  auto s1 = dfkd::batch_stats_under_forward(model, images);
  auto s2 = dfkd::batch_stats_under_forward(model, images);
  const std::uint32_t after = dfkd::weights_checksum(reg);
  EXPECT_EQ(before, after);
  ASSERT_EQ(s1.size(), s2.size());
  for (std::size_t i = 0; i < s1.size(); ++i) {
    EXPECT_EQ(std::memcmp(s1[i].mean.data(), s2[i].mean.data(), sizeof(float) * s1[i].mean.numel()), 0);
    EXPECT_EQ(std::memcmp(s1[i].variance.data(), s2[i].variance.data(), sizeof(float) * s1[i].variance.numel()), 0);
  }
  EXPECT_THROW(dfkd::batch_stats_under_forward(model, Variable<float>::constant(random_images(1, 32, 9))),
               std::invalid_argument);
}

TEST(BatchStatsUnderForward, MatchesRunningStatsWhenConstructedToMatch) {
  auto model = dfkd::build_model<float>(tiny_spec(), 10);
  auto images = Variable<float>::constant(random_images(4, 32, 11));
  auto batch = dfkd::batch_stats_under_forward(model, images);
  // write the measured batch stats into the running buffers, then re-measure:
  // they must now agree layer by layer at the first BN layer (whose input
  // does not depend on any BN buffer).
  model.stem_bn().running_mean = batch[0].mean;
  model.stem_bn().running_var = batch[0].variance;
  auto again = dfkd::batch_stats_under_forward(model, images);
  for (std::int64_t i = 0; i < again[0].mean.numel(); ++i) {
    EXPECT_NEAR(again[0].mean[i], model.stem_bn().running_mean[i], 1e-6);
    EXPECT_NEAR(again[0].variance[i], model.stem_bn().running_var[i], 1e-6);
  }
}

TEST(BatchStatsUnderForward, FirstLayerMatchesDirectReduction) {
  auto model = dfkd::build_model<float>(tiny_spec(), 12);
  Tensor<float> images = random_images(4, 32, 13);
  auto stats = dfkd::batch_stats_under_forward(model, Variable<float>::constant(images));

  // independent reduction over the naive stem convolution output, in double
  auto reg = model.registry();
  Tensor<float> stem_w;
  for (auto& [name, p] : reg.params)
    if (name == "stem.conv.w") stem_w = p->value();
  Tensor<double> xd = images.cast<double>();
  Tensor<double> wd = stem_w.cast<double>();
  Tensor<double> conv = dfkd_test::naive_conv2d<double>(xd, wd, nullptr, 1, 1);
  const int c = conv.dim(1), m = conv.dim(0) * conv.dim(2) * conv.dim(3);
  for (int j = 0; j < c; ++j) {
    double mu = 0, var = 0;
    for (int i = 0; i < conv.dim(0); ++i)
      for (int y = 0; y < conv.dim(2); ++y)
        for (int x = 0; x < conv.dim(3); ++x) mu += conv.at(i, j, y, x);
    mu /= m;
    for (int i = 0; i < conv.dim(0); ++i)
      for (int y = 0; y < conv.dim(2); ++y)
        for (int x = 0; x < conv.dim(3); ++x) {
          const double d = conv.at(i, j, y, x) - mu;
          var += d * d;
        }
    var /= m;
    EXPECT_NEAR(stats[0].mean[j], mu, 1e-4 * std::max(1.0, std::abs(mu)));
    EXPECT_NEAR(stats[0].variance[j], var, 1e-4 * std::max(1.0, var));
  }
}

TEST(Adapter, IdentityAndShapeAndSiteOracle) {
  Rng rng(14);
  dfkd::Adapter<float> id(6, 6, rng);
  id.set_identity();
  Tensor<float> x = random_images(2, 32, 15);  // (2,3,32,32) wrong channels; build custom
  Tensor<float> feat({2, 6, 8, 8});
  feat.fill_normal(rng, 0.0, 1.0);
  auto out = dfkd::adapt_channels(Variable<float>::constant(feat), id, 6);
  EXPECT_EQ(std::memcmp(out.value().data(), feat.data(), sizeof(float) * feat.numel()), 0);

  dfkd::Adapter<float> up(64, 128, rng);
  Tensor<float> f2({4, 64, 8, 8});
  f2.fill_normal(rng, 0.0, 1.0);
  auto lifted = dfkd::adapt_channels(Variable<float>::constant(f2), up, 128);
  EXPECT_EQ(lifted.value().shape(), (std::vector<int>{4, 128, 8, 8}));
  // per-site matrix-vector oracle
  for (int n = 0; n < 2; ++n)
    for (int co = 0; co < 128; co += 37)
      for (int y = 0; y < 8; y += 3)
        for (int x = 0; x < 8; x += 3) {
          double acc = 0;
          for (int ci = 0; ci < 64; ++ci) acc += up.weight.value().at(co, ci, 0, 0) * f2.at(n, ci, y, x);
          EXPECT_NEAR(lifted.value().at(n, co, y, x), acc, 1e-4 * std::max(1.0, std::abs(acc)));
        }

  EXPECT_THROW(dfkd::adapt_channels(Variable<float>::constant(f2), up, 256), std::invalid_argument);
  EXPECT_THROW(dfkd::adapt_channels(Variable<float>::constant(feat), up, 128), std::invalid_argument);
}

TEST(Adapter, Linearity) {
  Rng rng(16);
  dfkd::Adapter<float> up(5, 9, rng);
  Tensor<float> x({2, 5, 4, 4}), y({2, 5, 4, 4});
  x.fill_normal(rng, 0.0, 1.0);
  y.fill_normal(rng, 0.0, 1.0);
  const float a = 1.7f, b = -0.6f;
  Tensor<float> combo({2, 5, 4, 4});
  for (std::int64_t i = 0; i < combo.numel(); ++i) combo[i] = a * x[i] + b * y[i];
  auto lhs = up.forward(Variable<float>::constant(combo));
  auto fx = up.forward(Variable<float>::constant(x));
  auto fy = up.forward(Variable<float>::constant(y));
  for (std::int64_t i = 0; i < lhs.value().numel(); ++i)
    EXPECT_NEAR(lhs.value()[i], a * fx.value()[i] + b * fy.value()[i], 1e-4);
}

TEST(Pretrain, ZeroEpochsLeavesWeightsUntouched) {
  auto data = dfkd::synth_fgvc_dataset(2, 2, 4, 32, 0);
  auto [train, test] = dfkd::split(data, 0.5, 0);
  auto model = dfkd::build_model<float>(tiny_spec(), 17);
  auto reg = model.registry();
  const std::uint32_t before = dfkd::weights_checksum(reg);
  dfkd::PretrainOptions opt;
  opt.epochs = 0;
  auto hist = dfkd::pretrain(model, train, test, opt, 0);
  EXPECT_EQ(dfkd::weights_checksum(reg), before);
  EXPECT_TRUE(hist.train_loss.empty());
}

TEST(Pretrain, RejectsClassMismatch) {
  auto data = dfkd::synth_fgvc_dataset(2, 2, 4, 32, 0);
  auto [train, test] = dfkd::split(data, 0.5, 0);
  auto model = dfkd::build_model<float>(ConvNetSpec{{8, 12, 16}, 1, 7, 32}, 0);
  dfkd::PretrainOptions opt;
  EXPECT_THROW(dfkd::pretrain(model, train, test, opt, 0), std::invalid_argument);
}

TEST(Pretrain, LossTrendsDownAcrossSeeds) {
  auto data = dfkd::synth_fgvc_dataset(2, 2, 15, 32, 2);
  auto [train, test] = dfkd::split(data, 0.8, 2);
  int ok = 0;
  for (unsigned seed = 0; seed < 5; ++seed) {
    auto model = dfkd::build_model<float>(ConvNetSpec{{8, 12, 16}, 1, 4, 32}, seed);
    dfkd::PretrainOptions opt;
    opt.epochs = 5;
    opt.batch_size = 16;
    auto hist = dfkd::pretrain(model, train, test, opt, seed);
    bool monotone = true;
    for (int e = 1; e < 5; ++e) monotone = monotone && hist.train_loss[static_cast<std::size_t>(e)] <= hist.train_loss[static_cast<std::size_t>(e - 1)] + 1e-9;
    ok += monotone ? 1 : 0;
  }
  EXPECT_GE(ok, 4);
}

TEST(EvaluateAccuracy, ConstantLogitModel) {
  auto model = dfkd::build_model<float>(tiny_spec(), 18);
  model.head().weight.value().fill(0.0f);
  model.head().bias.value().fill(0.0f);
  model.head().bias.value()[0] = 5.0f;  // always predicts class 0

  auto balanced = dfkd::synth_fgvc_dataset(2, 2, 5, 32, 3);
  EXPECT_DOUBLE_EQ(dfkd::evaluate_accuracy(model, balanced), 0.25);

  dfkd::LabeledImageSet only_zero = balanced;
  std::fill(only_zero.labels.begin(), only_zero.labels.end(), 0);
  EXPECT_DOUBLE_EQ(dfkd::evaluate_accuracy(model, only_zero), 1.0);

  auto wrong_k = dfkd::build_model<float>(ConvNetSpec{{8, 12, 16}, 1, 9, 32}, 0);
  EXPECT_THROW(dfkd::evaluate_accuracy(wrong_k, balanced), std::invalid_argument);
}

TEST(EvaluateAccuracy, RandomModelNearChance) {
  auto data = dfkd::synth_fgvc_dataset(2, 5, 10, 32, 4);  // K=10, balanced
  double total = 0;
  for (unsigned seed = 0; seed < 10; ++seed) {
    auto model = dfkd::build_model<float>(ConvNetSpec{{8, 12, 16}, 1, 10, 32}, 100 + seed);
    const double acc = dfkd::evaluate_accuracy(model, data);
    EXPECT_GE(acc, 0.0);
    EXPECT_LE(acc, 0.3);
    total += acc;
  }
  EXPECT_NEAR(total / 10.0, 0.1, 0.08);
}

TEST(ModelCheckpoint, RoundTripAndCorruption) {
  namespace fs = std::filesystem;
  auto dir = fs::temp_directory_path() / "dfkd_model_ckpt";
  fs::create_directories(dir);
  const std::string path = (dir / "m.ckpt").string();

  auto model = dfkd::build_model<float>(tiny_spec(), 19);
  auto data = dfkd::synth_fgvc_dataset(2, 2, 3, 32, 5);
  const double acc = dfkd::evaluate_accuracy(model, data);
  dfkd::save_model_checkpoint(model, path, 19, 0, {{"test_accuracy", acc}});

  auto loaded = dfkd::load_model_checkpoint(path);
  EXPECT_EQ(loaded.spec(), model.spec());
  EXPECT_DOUBLE_EQ(dfkd::evaluate_accuracy(loaded, data), acc);
  auto r1 = model.registry();
  auto r2 = loaded.registry();
  EXPECT_EQ(dfkd::weights_checksum(r1), dfkd::weights_checksum(r2));

  {
    std::fstream f(path, std::ios::in | std::ios::out | std::ios::binary);
    f.seekp(200);
    f.put('\x7f');
  }
  EXPECT_THROW(dfkd::load_model_checkpoint(path), std::runtime_error);
  fs::remove_all(dir);
}

TEST(ModelGradients, TinyNetMatchesFiniteDifferences) {
  ConvNetSpec spec{{4, 6, 8}, 1, 3, 16};
  ConvNet<double> model(spec, 21);
  Rng rng(22);
  Tensor<double> images({2, 3, 16, 16});
  images.fill_normal(rng, 0.0, 0.5);
  auto images_v = Variable<double>::constant(images);
  std::vector<int> labels = {0, 2};

  auto reg = model.registry();
  auto report = dfkd_test::grad_check(
      reg.param_ptrs(),
      [&] {
        dfkd::ForwardOptions<double> opt;
        opt.mode = nn::Mode::kTrain;
        auto rec = model.forward(images_v, opt);
        return dfkd::cross_entropy(rec.logits, labels);
      },
      1e-4, 1e-3, /*max_coords_per_tensor=*/40);
  EXPECT_GE(report.pass_fraction(), 0.99) << "worst rel err " << report.worst_rel;
}
