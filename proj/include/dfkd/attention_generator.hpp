#pragma once

#include <array>
#include <cmath>
#include <string>
#include <vector>

#include "dfkd/nn.hpp"
#include "dfkd/serialize.hpp"

#include "json.hpp"

// DCGAN-style generator with a spatial-wise attention module in each of its
// four upsampling blocks. The attention module compresses features through a
// conv encoder (with max-pool), decodes them back through deconvs (reusing
// the pool indices for unpooling), and blends the softmax-normalized map into
// the features with weight lambda. The four upsampling deconvolutions are
// spectrally normalized via one persistent power-iteration pair per layer.

namespace dfkd {

struct GeneratorSpec {
  int z_dim = 256;
  int base_channels = 512;  // at the initial grid
  int out_size = 32;
  int sam_ratio = 8;
  double lambda = 5e-2;

  int grid() const { return out_size / 16; }

  // channel count after each of the four blocks
  std::array<int, 4> block_channels() const {
    return {base_channels / 2, base_channels / 4, base_channels / 8, base_channels / 8};
  }

  void validate() const {
    DFKD_CHECK(z_dim >= 1, "GeneratorSpec: z_dim must be >= 1");
    DFKD_CHECK(out_size >= 16 && out_size % 16 == 0,
               "GeneratorSpec: out_size must be a positive multiple of 16 (2^4 x initial grid)");
    DFKD_CHECK(base_channels >= 8 && base_channels % 8 == 0, "GeneratorSpec: base_channels must be a multiple of 8");
    DFKD_CHECK(lambda >= 0.0, "GeneratorSpec: lambda must be >= 0");
    DFKD_CHECK(sam_ratio >= 1, "GeneratorSpec: sam_ratio must be >= 1");
    for (int c : block_channels())
      DFKD_CHECK(c % sam_ratio == 0,
                 "GeneratorSpec: sam_ratio " << sam_ratio << " must divide every block's channels, got " << c);
  }

  nlohmann::json to_json() const {
    return {{"z_dim", z_dim}, {"base_channels", base_channels}, {"out_size", out_size},
            {"sam_ratio", sam_ratio}, {"lambda", lambda}};
  }

  static GeneratorSpec from_json(const nlohmann::json& j) {
    GeneratorSpec s;
    s.z_dim = j["z_dim"];
    s.base_channels = j["base_channels"];
    s.out_size = j["out_size"];
    s.sam_ratio = j["sam_ratio"];
    s.lambda = j["lambda"];
    return s;
  }
};

inline Tensor<float> sample_noise(int n, int z_dim, std::uint64_t seed) {
  DFKD_CHECK(n >= 1 && z_dim >= 1, "sample_noise: sizes must be positive");
  Rng rng(seed);
  Tensor<float> z({n, z_dim});
  z.fill_normal(rng, 0.0, 1.0);
  return z;
}

template <typename T>
Tensor<T> sample_noise_from(Rng& rng, int n, int z_dim) {
  DFKD_CHECK(n >= 1 && z_dim >= 1, "sample_noise: sizes must be positive");
  Tensor<T> z({n, z_dim});
  z.fill_normal(rng, 0.0, 1.0);
  return z;
}

// ---------------------------------------------------------------------------
// Spectral normalization
// ---------------------------------------------------------------------------

template <typename T>
struct PowerIterState {
  Tensor<T> u, v;

  static PowerIterState init(int rows, std::int64_t cols, Rng& rng) {
    PowerIterState s;
    s.u = Tensor<T>({rows});
    s.v = Tensor<T>({static_cast<int>(cols)});
    s.u.fill_normal(rng, 0.0, 1.0);
    normalize(s.u);
    return s;
  }

  static void normalize(Tensor<T>& x) {
    T n = T(0);
    for (std::int64_t i = 0; i < x.numel(); ++i) n += x[i] * x[i];
    n = std::sqrt(n);
    DFKD_CHECK(n > T(1e-20), "spectral_normalize: zero matrix has no leading singular direction");
    for (std::int64_t i = 0; i < x.numel(); ++i) x[i] /= n;
  }
};

// One power-iteration sweep: v <- normalize(W^T u); u <- normalize(W v).
template <typename T>
void power_iterate(const Tensor<T>& w, Tensor<T>& u, Tensor<T>& v) {
  const int m = w.dim(0);
  const std::int64_t k = w.numel() / m;
  for (std::int64_t j = 0; j < k; ++j) v[j] = T(0);
  for (int i = 0; i < m; ++i) {
    const T* row = w.data() + static_cast<std::int64_t>(i) * k;
    for (std::int64_t j = 0; j < k; ++j) v[j] += row[j] * u[i];
  }
  PowerIterState<T>::normalize(v);
  for (int i = 0; i < m; ++i) {
    const T* row = w.data() + static_cast<std::int64_t>(i) * k;
    T acc = T(0);
    for (std::int64_t j = 0; j < k; ++j) acc += row[j] * v[j];
    u[i] = acc;
  }
  PowerIterState<T>::normalize(u);
}

template <typename T>
T estimated_sigma(const Tensor<T>& w, const Tensor<T>& u, const Tensor<T>& v) {
  const int m = w.dim(0);
  const std::int64_t k = w.numel() / m;
  T sigma = T(0);
  for (int i = 0; i < m; ++i) {
    const T* row = w.data() + static_cast<std::int64_t>(i) * k;
    T acc = T(0);
    for (std::int64_t j = 0; j < k; ++j) acc += row[j] * v[j];
    sigma += u[i] * acc;
  }
  return sigma;
}

// W / sigma_hat with sigma_hat from `iters` power-iteration steps; the
// left/right vectors persist in `state` across calls. W is viewed as
// (dim0) x (numel/dim0).
template <typename T>
Tensor<T> spectral_normalize(const Tensor<T>& w, int iters, PowerIterState<T>& state) {
  DFKD_CHECK(w.rank() >= 2, "spectral_normalize: need a matrix-shaped weight");
  DFKD_CHECK(iters >= 1, "spectral_normalize: iters must be >= 1");
  DFKD_CHECK(w.abs_max() > T(0), "spectral_normalize: zero matrix");
  const int m = w.dim(0);
  const std::int64_t k = w.numel() / m;
  DFKD_CHECK(state.u.numel() == m && state.v.numel() == k, "spectral_normalize: state size mismatch");
  for (int i = 0; i < iters; ++i) power_iterate(w, state.u, state.v);
  const T sigma = estimated_sigma(w, state.u, state.v);
  DFKD_CHECK(sigma > T(0), "spectral_normalize: non-positive sigma estimate");
  Tensor<T> out = w;
  for (std::int64_t i = 0; i < out.numel(); ++i) out[i] /= sigma;
  return out;
}

// ---------------------------------------------------------------------------
// Spatial-wise attention module
// ---------------------------------------------------------------------------

template <typename T>
struct SamEncoded {
  Variable<T> gamma;  // latent, 4C/r channels at half resolution
  std::shared_ptr<std::vector<std::int32_t>> pool_indices;
  int pooled_h = 0, pooled_w = 0;
};

template <typename T>
struct SamModule {
  int channels = 0, ratio = 1;
  nn::Conv2d<T> enc_in;            // 1x1, C -> C/r
  nn::Conv2d<T> enc1;              // 3x3, C/r -> 2C/r
  nn::BatchNorm2d<T> enc1_bn;
  nn::Conv2d<T> enc2;              // 3x3, 2C/r -> 4C/r (after max-pool)
  nn::BatchNorm2d<T> enc2_bn;
  nn::ConvTranspose2d<T> dec1;     // 3x3, 4C/r -> 2C/r
  nn::BatchNorm2d<T> dec1_bn;
  nn::ConvTranspose2d<T> dec2;     // 3x3, 2C/r -> C/r (after max-unpool)
  nn::BatchNorm2d<T> dec2_bn;
  nn::Conv2d<T> dec_out;           // 1x1, C/r -> C

  SamModule() = default;
  SamModule(int c, int r, Rng& rng) : channels(c), ratio(r) {
    DFKD_CHECK(c % r == 0, "SamModule: channels " << c << " not divisible by ratio " << r);
    const int cr = c / r;
    enc_in = nn::Conv2d<T>(c, cr, 1, 1, 0, true, rng, 0.02);
    enc1 = nn::Conv2d<T>(cr, 2 * cr, 3, 1, 1, true, rng, 0.02);
    enc1_bn = nn::BatchNorm2d<T>(2 * cr);
    enc2 = nn::Conv2d<T>(2 * cr, 4 * cr, 3, 1, 1, true, rng, 0.02);
    enc2_bn = nn::BatchNorm2d<T>(4 * cr);
    dec1 = nn::ConvTranspose2d<T>(4 * cr, 2 * cr, 3, 1, 1, 0, true, rng, 0.02);
    dec1_bn = nn::BatchNorm2d<T>(2 * cr);
    dec2 = nn::ConvTranspose2d<T>(2 * cr, cr, 3, 1, 1, 0, true, rng, 0.02);
    dec2_bn = nn::BatchNorm2d<T>(cr);
    dec_out = nn::Conv2d<T>(cr, c, 1, 1, 0, true, rng, 0.02);
  }

  SamEncoded<T> encode(const Variable<T>& f, nn::Mode mode) {
    DFKD_CHECK(f.value().dim(1) == channels, "sam_encode: expected " << channels << " channels");
    DFKD_CHECK(f.value().dim(2) >= 2 && f.value().dim(3) >= 2, "sam_encode: spatial dims must be >= 2");
    Variable<T> a_d = enc_in.forward(f);
    Variable<T> psi = ops::relu(enc1_bn.forward(enc1.forward(a_d), mode));
    auto pooled = ops::maxpool2x2(psi);
    Variable<T> gamma = ops::relu(enc2_bn.forward(enc2.forward(pooled.values), mode));
    return {gamma, pooled.indices, pooled.values.value().dim(2), pooled.values.value().dim(3)};
  }

  Variable<T> decode(const SamEncoded<T>& enc, nn::Mode mode) {
    Variable<T> d = ops::relu(dec1_bn.forward(dec1.forward(enc.gamma), mode));
    Variable<T> psi = ops::maxunpool2x2(d, enc.pool_indices, 2 * enc.pooled_h, 2 * enc.pooled_w);
    Variable<T> e = ops::relu(dec2_bn.forward(dec2.forward(psi), mode));
    return dec_out.forward(e);
  }

  void register_into(nn::Registry<T>& reg, const std::string& p) {
    enc_in.register_into(reg, p + ".enc_in");
    enc1.register_into(reg, p + ".enc1");
    enc1_bn.register_into(reg, p + ".enc1_bn");
    enc2.register_into(reg, p + ".enc2");
    enc2_bn.register_into(reg, p + ".enc2_bn");
    dec1.register_into(reg, p + ".dec1");
    dec1_bn.register_into(reg, p + ".dec1_bn");
    dec2.register_into(reg, p + ".dec2");
    dec2_bn.register_into(reg, p + ".dec2_bn");
    dec_out.register_into(reg, p + ".dec_out");
  }
};

// lambda * (Softmax(A_s) (x) F) + F, softmax over each channel's spatial sites.
template <typename T>
Variable<T> sam_apply(const Variable<T>& f, const Variable<T>& a_s, T lambda) {
  DFKD_CHECK(f.value().same_shape(a_s.value()),
             "sam_apply: shape mismatch " << f.value().shape_str() << " vs " << a_s.value().shape_str());
  DFKD_CHECK(lambda >= T(0), "sam_apply: lambda must be >= 0");
  return ops::add(ops::scale(ops::mul(ops::softmax_spatial(a_s), f), lambda), f);
}

template <typename T>
SamEncoded<T> sam_encode(SamModule<T>& sam, const Variable<T>& f, nn::Mode mode) {
  return sam.encode(f, mode);
}

template <typename T>
Variable<T> sam_decode(SamModule<T>& sam, const SamEncoded<T>& enc, nn::Mode mode) {
  return sam.decode(enc, mode);
}

// ---------------------------------------------------------------------------
// Generator
// ---------------------------------------------------------------------------

template <typename T>
struct SpectralDeconv {
  Variable<T> weight;  // (Co, Ci, 3, 3); spectral matrix view Co x (Ci*9)
  Variable<T> bias;
  Tensor<T> u, v;

  // One iteration per step lags behind Adam's weight drift at toy scale and
  // lets the true norm creep past 1; a short burst per step keeps the
  // estimate tight at negligible cost.
  static constexpr int kItersPerStep = 3;
  static constexpr int kItersAtInit = 20;

  SpectralDeconv() = default;
  SpectralDeconv(int in_ch, int out_ch, Rng& rng) {
    weight = nn::make_param<T>({out_ch, in_ch, 3, 3});
    weight.value().fill_normal(rng, 0.0, 0.02);
    bias = nn::make_param<T>({out_ch});
    PowerIterState<T> s = PowerIterState<T>::init(out_ch, static_cast<std::int64_t>(in_ch) * 9, rng);
    u = s.u;
    v = s.v;
    for (int i = 0; i < kItersAtInit; ++i) power_iterate(weight.value(), u, v);
  }

  Variable<T> forward(const Variable<T>& x, bool update_power_iteration) {
    if (update_power_iteration)
      for (int i = 0; i < kItersPerStep; ++i) power_iterate(weight.value(), u, v);
    Variable<T> sigma = ops::sigma_bilinear(weight, u, v);
    DFKD_REQUIRE(sigma.value()[0] > T(0), "SpectralDeconv: sigma estimate not positive");
    Variable<T> w_hat = ops::div_by_scalar(weight, sigma);
    return ops::conv_transpose2d(x, w_hat, bias, 2, 1, 1);
  }

  void register_into(nn::Registry<T>& reg, const std::string& p) {
    reg.add_param(p + ".w", &weight);
    reg.add_param(p + ".b", &bias);
    reg.add_buffer(p + ".u", &u);
    reg.add_buffer(p + ".v", &v);
  }
};

template <typename T>
class Generator {
 public:
  Generator() = default;

  Generator(const GeneratorSpec& spec, std::uint64_t seed) : spec_(spec) {
    spec.validate();
    Rng rng(seed);
    const int grid = spec.grid();
    fc_ = nn::Linear<T>(spec.z_dim, spec.base_channels * grid * grid, rng);
    fc_.weight.value().fill_normal(rng, 0.0, 0.02);
    bn0_ = nn::BatchNorm2d<T>(spec.base_channels);
    const auto chans = spec.block_channels();
    int in_ch = spec.base_channels;
    for (int b = 0; b < 4; ++b) {
      deconvs_[static_cast<std::size_t>(b)] = SpectralDeconv<T>(in_ch, chans[static_cast<std::size_t>(b)], rng);
      sams_[static_cast<std::size_t>(b)] = SamModule<T>(chans[static_cast<std::size_t>(b)], spec.sam_ratio, rng);
      in_ch = chans[static_cast<std::size_t>(b)];
    }
    to_rgb_ = nn::Conv2d<T>(in_ch, 3, 3, 1, 1, true, rng, 0.02);
  }

  const GeneratorSpec& spec() const { return spec_; }

  // mode == kTrain: batch-stat BN (standard generator practice); power
  // iteration only advances when update_power_iteration is set, so gradient
  // checks can hold the spectral estimate fixed.
  Variable<T> forward(const Variable<T>& z, nn::Mode mode, bool update_power_iteration) {
    DFKD_CHECK(z.value().rank() == 2 && z.value().dim(1) == spec_.z_dim,
               "Generator: noise must be (N," << spec_.z_dim << "), got " << z.value().shape_str());
    const int n = z.value().dim(0), grid = spec_.grid();
    Variable<T> h = ops::reshape(fc_.forward(z), {n, spec_.base_channels, grid, grid});
    h = bn0_.forward(h, mode);
    for (int b = 0; b < 4; ++b) {
      h = deconvs_[static_cast<std::size_t>(b)].forward(h, update_power_iteration);
      h = ops::leaky_relu(h, T(0.2));
      SamModule<T>& sam = sams_[static_cast<std::size_t>(b)];
      Variable<T> a_s = sam.decode(sam.encode(h, mode), mode);
      h = sam_apply(h, a_s, static_cast<T>(spec_.lambda));
    }
    return ops::tanh_op(to_rgb_.forward(h));
  }

  nn::Registry<T> registry() {
    nn::Registry<T> reg;
    fc_.register_into(reg, "fc");
    bn0_.register_into(reg, "bn0");
    for (int b = 0; b < 4; ++b) {
      deconvs_[static_cast<std::size_t>(b)].register_into(reg, "block" + std::to_string(b) + ".deconv");
      sams_[static_cast<std::size_t>(b)].register_into(reg, "block" + std::to_string(b) + ".sam");
    }
    to_rgb_.register_into(reg, "to_rgb");
    return reg;
  }

  SamModule<T>& sam(int block) { return sams_[static_cast<std::size_t>(block)]; }
  SpectralDeconv<T>& deconv(int block) { return deconvs_[static_cast<std::size_t>(block)]; }
  nn::Linear<T>& fc() { return fc_; }
  nn::BatchNorm2d<T>& bn0() { return bn0_; }
  nn::Conv2d<T>& to_rgb() { return to_rgb_; }

 private:
  GeneratorSpec spec_;
  nn::Linear<T> fc_;
  nn::BatchNorm2d<T> bn0_;
  std::array<SpectralDeconv<T>, 4> deconvs_;
  std::array<SamModule<T>, 4> sams_;
  nn::Conv2d<T> to_rgb_;
};

// Frozen-weights sampling path: eval-mode BN, no power-iteration updates.
template <typename T>
Tensor<T> generate(Generator<T>& g, const Tensor<T>& z) {
  return g.forward(Variable<T>::constant(z), nn::Mode::kEval, false).value();
}

}  // namespace dfkd
