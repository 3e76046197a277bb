#include "l2s/s2s_model.h"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "l2s/config_file.h"

namespace l2s {

const char* VariantName(Variant v) {
  switch (v) {
    case Variant::kUnits: return "units";
    case Variant::kFeatures: return "features";
    case Variant::kFeaturesCtc: return "features_ctc";
  }
  return "?";
}

Variant ParseVariant(const std::string& name) {
  if (name == "units") return Variant::kUnits;
  if (name == "features") return Variant::kFeatures;
  if (name == "features_ctc") return Variant::kFeaturesCtc;
  throw Error(ErrorKind::kConfig, "unknown variant '" + name + "'");
}

// ---------------------------------------------------------------------------
// ModelConfig

int UpsampleRawLength(const ModelConfig& config, int input_frames) {
  int len = input_frames;
  for (size_t i = 0; i < config.upsample_kernels.size(); ++i) {
    len = (len - 1) * config.upsample_strides[i] + config.upsample_kernels[i];
  }
  return len;
}

void ModelConfig::Validate() const {
  auto fail = [](const std::string& what) { throw Error(ErrorKind::kConfig, what); };
  if (num_layers_enc < 0 || num_layers_dec < 0) fail("layer counts must be nonnegative");
  if (hidden_dim < 1 || num_heads < 1) fail("hidden_dim and num_heads must be positive");
  if (hidden_dim % num_heads != 0) {
    fail("hidden_dim " + std::to_string(hidden_dim) + " not divisible by num_heads " +
         std::to_string(num_heads));
  }
  if (conv_kernel_sizes.size() != 2) fail("conv_kernel_sizes needs two entries");
  for (int k : conv_kernel_sizes) {
    if (k < 1) fail("conv kernel sizes must be positive");
  }
  if (ffn_expansion < 1) fail("ffn_expansion must be positive");
  if (upsample_kernels.empty() || upsample_kernels.size() != upsample_strides.size()) {
    fail("upsample_kernels and upsample_strides must be non-empty and equal length");
  }
  int stride_product = 1;
  for (size_t i = 0; i < upsample_kernels.size(); ++i) {
    if (upsample_kernels[i] < 1 || upsample_strides[i] < 1) fail("upsampler sizes must be positive");
    stride_product *= upsample_strides[i];
  }
  if (stride_product != 2) fail("upsample stride product must be 2 (25 Hz -> 50 Hz)");
  if (UpsampleRawLength(*this, 1) < 2) fail("upsampler kernels too short to reach 2T frames");
  if (input_dim < 1 || feature_out_dim < 1 || unit_vocab < 1 || lip_unit_vocab < 1) {
    fail("dimensions and vocabularies must be positive");
  }
  if (variant == Variant::kFeaturesCtc && ctc_vocab < 1) fail("features_ctc needs ctc_vocab >= 1");
  if (!(dropout >= 0.0 && dropout < 1.0)) fail("dropout must be in [0, 1)");
}

std::string ModelConfig::Serialize() const {
  std::string s;
  auto put = [&](const char* k, const std::string& v) { s += std::string(k) + " = " + v + "\n"; };
  put("variant", VariantName(variant));
  put("num_layers_enc", std::to_string(num_layers_enc));
  put("num_layers_dec", std::to_string(num_layers_dec));
  put("hidden_dim", std::to_string(hidden_dim));
  put("num_heads", std::to_string(num_heads));
  put("conv_kernel_sizes", FormatIntList(conv_kernel_sizes));
  put("ffn_expansion", std::to_string(ffn_expansion));
  put("upsample_kernels", FormatIntList(upsample_kernels));
  put("upsample_strides", FormatIntList(upsample_strides));
  put("input_dim", std::to_string(input_dim));
  put("lip_unit_vocab", std::to_string(lip_unit_vocab));
  put("feature_out_dim", std::to_string(feature_out_dim));
  put("unit_vocab", std::to_string(unit_vocab));
  put("ctc_vocab", std::to_string(ctc_vocab));
  put("dropout", FormatDouble(dropout));
  return s;
}

ModelConfig ModelConfig::FromKeyValues(const std::map<std::string, std::string>& kv) {
  ModelConfig c;
  for (const auto& [k, v] : kv) {
    if (k == "variant") c.variant = ParseVariant(v);
    else if (k == "num_layers_enc") c.num_layers_enc = ParseInt(k, v);
    else if (k == "num_layers_dec") c.num_layers_dec = ParseInt(k, v);
    else if (k == "hidden_dim") c.hidden_dim = ParseInt(k, v);
    else if (k == "num_heads") c.num_heads = ParseInt(k, v);
    else if (k == "conv_kernel_sizes") c.conv_kernel_sizes = ParseIntList(k, v);
    else if (k == "ffn_expansion") c.ffn_expansion = ParseInt(k, v);
    else if (k == "upsample_kernels") c.upsample_kernels = ParseIntList(k, v);
    else if (k == "upsample_strides") c.upsample_strides = ParseIntList(k, v);
    else if (k == "input_dim") c.input_dim = ParseInt(k, v);
    else if (k == "lip_unit_vocab") c.lip_unit_vocab = ParseInt(k, v);
    else if (k == "feature_out_dim") c.feature_out_dim = ParseInt(k, v);
    else if (k == "unit_vocab") c.unit_vocab = ParseInt(k, v);
    else if (k == "ctc_vocab") c.ctc_vocab = ParseInt(k, v);
    else if (k == "dropout") c.dropout = ParseDouble(k, v);
  }
  return c;
}

// ---------------------------------------------------------------------------
// ParameterSet

int ParameterSet::Add(std::string name, std::vector<int> shape, Eigen::Index rows,
                      Eigen::Index cols) {
  if (index_.count(name)) throw Error(ErrorKind::kConfig, "duplicate parameter " + name);
  index_[name] = tensors_.size();
  tensors_.push_back({std::move(name), std::move(shape), Eigen::MatrixXd::Zero(rows, cols)});
  return static_cast<int>(tensors_.size()) - 1;
}

std::optional<size_t> ParameterSet::Find(const std::string& name) const {
  const auto it = index_.find(name);
  if (it == index_.end()) return std::nullopt;
  return it->second;
}

ParameterSet ParameterSet::ZerosLike() const {
  ParameterSet out = *this;
  out.SetZero();
  return out;
}

void ParameterSet::SetZero() {
  for (auto& t : tensors_) t.value.setZero();
}

Eigen::Index ParameterSet::NumScalars() const {
  Eigen::Index n = 0;
  for (const auto& t : tensors_) n += t.value.size();
  return n;
}

bool ParameterSet::AllFinite() const {
  return std::all_of(tensors_.begin(), tensors_.end(),
                     [](const Tensor& t) { return t.value.allFinite(); });
}

// ---------------------------------------------------------------------------
// Layout

namespace {

struct LinearIdx {
  int w = -1;
  int b = -1;
};
struct NormIdx {
  int gain = -1;
  int bias = -1;
};
struct ConvIdx {
  int w = -1;
  int b = -1;
  int kernel = 1;
  int in = 0;
};
struct BlockIdx {
  LinearIdx q, k, v, o;
  NormIdx ln1;
  ConvIdx conv1, conv2;
  NormIdx ln2;
};

}  // namespace

struct S2SModel::Layout {
  int embedding = -1;
  LinearIdx input_proj;
  std::vector<BlockIdx> encoder;
  std::vector<ConvIdx> upsampler;
  std::vector<int> strides;
  std::vector<BlockIdx> decoder;
  LinearIdx feature_head, unit_head, ctc_head;
};

namespace {

LinearIdx AddLinear(ParameterSet& p, const std::string& name, int in, int out) {
  return {p.Add(name + ".weight", {in, out}, in, out), p.Add(name + ".bias", {out}, 1, out)};
}

NormIdx AddNorm(ParameterSet& p, const std::string& name, int dim) {
  return {p.Add(name + ".gain", {dim}, 1, dim), p.Add(name + ".bias", {dim}, 1, dim)};
}

ConvIdx AddConv(ParameterSet& p, const std::string& name, int kernel, int in, int out) {
  return {p.Add(name + ".weight", {kernel, in, out}, static_cast<Eigen::Index>(kernel) * in, out),
          p.Add(name + ".bias", {out}, 1, out), kernel, in};
}

BlockIdx AddBlock(ParameterSet& p, const std::string& name, const ModelConfig& c) {
  const int h = c.hidden_dim;
  const int inner = h * c.ffn_expansion;
  BlockIdx b;
  b.q = AddLinear(p, name + ".attn.q", h, h);
  b.k = AddLinear(p, name + ".attn.k", h, h);
  b.v = AddLinear(p, name + ".attn.v", h, h);
  b.o = AddLinear(p, name + ".attn.out", h, h);
  b.ln1 = AddNorm(p, name + ".norm1", h);
  b.conv1 = AddConv(p, name + ".conv1", c.conv_kernel_sizes[0], h, inner);
  b.conv2 = AddConv(p, name + ".conv2", c.conv_kernel_sizes[1], inner, h);
  b.ln2 = AddNorm(p, name + ".norm2", h);
  return b;
}

}  // namespace

S2SModel::S2SModel(const ModelConfig& config) : config_(config) {
  config_.Validate();
  auto layout = std::make_shared<Layout>();
  const int h = config_.hidden_dim;
  if (config_.variant == Variant::kUnits) {
    layout->embedding = params_.Add("input.embedding", {config_.lip_unit_vocab, h},
                                    config_.lip_unit_vocab, h);
  } else {
    layout->input_proj = AddLinear(params_, "input.proj", config_.input_dim, h);
  }
  for (int i = 0; i < config_.num_layers_enc; ++i) {
    layout->encoder.push_back(AddBlock(params_, "encoder." + std::to_string(i), config_));
  }
  for (size_t i = 0; i < config_.upsample_kernels.size(); ++i) {
    layout->upsampler.push_back(
        AddConv(params_, "upsampler." + std::to_string(i), config_.upsample_kernels[i], h, h));
    layout->strides.push_back(config_.upsample_strides[i]);
  }
  for (int i = 0; i < config_.num_layers_dec; ++i) {
    layout->decoder.push_back(AddBlock(params_, "decoder." + std::to_string(i), config_));
  }
  switch (config_.variant) {
    case Variant::kUnits:
      layout->unit_head = AddLinear(params_, "head.units", h, config_.unit_vocab);
      break;
    case Variant::kFeaturesCtc:
      layout->ctc_head = AddLinear(params_, "head.ctc", h, config_.ctc_vocab + 1);
      [[fallthrough]];
    case Variant::kFeatures:
      layout->feature_head = AddLinear(params_, "head.features", h, config_.feature_out_dim);
      break;
  }
  layout_ = std::move(layout);
}

S2SModel S2SModel::Empty(const ModelConfig& config) { return S2SModel(config); }

S2SModel S2SModel::Init(const ModelConfig& config, uint64_t seed) {
  S2SModel m(config);
  Rng rng(MixSeed(seed, 0x1417));
  for (Tensor& t : m.params_) {
    const std::string& n = t.name;
    const bool is_bias = n.size() >= 5 && n.compare(n.size() - 5, 5, ".bias") == 0;
    const bool is_gain = n.size() >= 5 && n.compare(n.size() - 5, 5, ".gain") == 0;
    if (is_bias) continue;
    if (is_gain) {
      t.value.setOnes();
      continue;
    }
    // Fan-in is every shape entry except the output dimension.
    double fan_in = 1.0;
    for (size_t i = 0; i + 1 < t.shape.size(); ++i) fan_in *= t.shape[i];
    if (n == "input.embedding") fan_in = 1.0;
    const double bound = 1.0 / std::sqrt(fan_in);
    for (Eigen::Index i = 0; i < t.value.size(); ++i) t.value.data()[i] = rng.Uniform(-bound, bound);
  }
  return m;
}

Eigen::MatrixXd SinusoidalPositions(int frames, int dim) {
  Eigen::MatrixXd pe(frames, dim);
  for (int t = 0; t < frames; ++t) {
    for (int i = 0; i < dim; ++i) {
      const double rate = std::pow(10000.0, -static_cast<double>(2 * (i / 2)) / dim);
      pe(t, i) = (i % 2 == 0) ? std::sin(t * rate) : std::cos(t * rate);
    }
  }
  return pe;
}

// ---------------------------------------------------------------------------
// Layers. Every *Fwd fills a cache when one is passed; *Bwd consumes it, adds
// parameter gradients into the sink and returns the input gradient.

namespace {

using Mat = Eigen::MatrixXd;
constexpr double kNormEps = 1e-5;

class GradSink {
 public:
  GradSink(ParameterSet* grads, std::vector<char> frozen)
      : grads_(grads), frozen_(std::move(frozen)) {}

  template <typename Expr>
  void Add(int idx, const Expr& e) {
    if (!frozen_[idx]) grads_->operator[](idx).value.noalias() += e;
  }
  bool Frozen(int idx) const { return frozen_[idx] != 0; }
  Mat& Raw(int idx) { return grads_->operator[](idx).value; }

 private:
  ParameterSet* grads_;
  std::vector<char> frozen_;
};

const Mat& P(const ParameterSet& ps, int i) { return ps[i].value; }

// -- linear --

Mat LinearFwd(const ParameterSet& ps, const LinearIdx& l, const Mat& x) {
  Mat y = x * P(ps, l.w);
  y.rowwise() += P(ps, l.b).row(0);
  return y;
}

Mat LinearBwd(const ParameterSet& ps, const LinearIdx& l, const Mat& x, const Mat& dy,
              GradSink& g) {
  g.Add(l.w, x.transpose() * dy);
  g.Add(l.b, dy.colwise().sum());
  return dy * P(ps, l.w).transpose();
}

// -- layer norm over the feature axis --

struct NormCache {
  Mat xhat;
  Eigen::VectorXd inv_std;
};

Mat NormFwd(const ParameterSet& ps, const NormIdx& n, const Mat& x, NormCache* cache) {
  const Eigen::Index d = x.cols();
  Eigen::VectorXd mean = x.rowwise().mean();
  Mat centered = x.colwise() - mean;
  Eigen::VectorXd var = centered.rowwise().squaredNorm() / static_cast<double>(d);
  Eigen::VectorXd inv_std = (var.array() + kNormEps).rsqrt();
  Mat xhat = centered.array().colwise() * inv_std.array();
  Mat y = xhat.array().rowwise() * P(ps, n.gain).row(0).array();
  y.rowwise() += P(ps, n.bias).row(0);
  if (cache) {
    cache->xhat = std::move(xhat);
    cache->inv_std = std::move(inv_std);
  }
  return y;
}

Mat NormBwd(const ParameterSet& ps, const NormIdx& n, const NormCache& c, const Mat& dy,
            GradSink& g) {
  g.Add(n.gain, (dy.array() * c.xhat.array()).colwise().sum().matrix());
  g.Add(n.bias, dy.colwise().sum());
  const double d = static_cast<double>(dy.cols());
  Mat dxhat = dy.array().rowwise() * P(ps, n.gain).row(0).array();
  Eigen::VectorXd sum_dxhat = dxhat.rowwise().sum();
  Eigen::VectorXd sum_dxhat_xhat = (dxhat.array() * c.xhat.array()).rowwise().sum();
  Mat dx = (d * dxhat.array() - c.xhat.array().colwise() * sum_dxhat_xhat.array()).matrix();
  dx.colwise() -= sum_dxhat;
  dx = dx.array().colwise() * (c.inv_std.array() / d);
  return dx;
}

// -- multi-head self-attention --

struct AttnCache {
  Mat x, q, k, v, concat;
  std::vector<Mat> probs;
};

Mat AttnFwd(const ParameterSet& ps, const BlockIdx& b, int heads, const Mat& x, AttnCache* cache) {
  const Eigen::Index t = x.rows();
  const Eigen::Index hd = x.cols() / heads;
  const double scale = 1.0 / std::sqrt(static_cast<double>(hd));
  Mat q = LinearFwd(ps, b.q, x);
  Mat k = LinearFwd(ps, b.k, x);
  Mat v = LinearFwd(ps, b.v, x);
  Mat concat(t, x.cols());
  std::vector<Mat> probs;
  for (int h = 0; h < heads; ++h) {
    Mat s = (q.middleCols(h * hd, hd) * k.middleCols(h * hd, hd).transpose()) * scale;
    for (Eigen::Index r = 0; r < t; ++r) {
      const double m = s.row(r).maxCoeff();
      s.row(r) = (s.row(r).array() - m).exp();
      s.row(r) /= s.row(r).sum();
    }
    concat.middleCols(h * hd, hd).noalias() = s * v.middleCols(h * hd, hd);
    if (cache) probs.push_back(std::move(s));
  }
  Mat out = LinearFwd(ps, b.o, concat);
  if (cache) {
    cache->x = x;
    cache->q = std::move(q);
    cache->k = std::move(k);
    cache->v = std::move(v);
    cache->concat = std::move(concat);
    cache->probs = std::move(probs);
  }
  return out;
}

Mat AttnBwd(const ParameterSet& ps, const BlockIdx& b, int heads, const AttnCache& c,
            const Mat& dout, GradSink& g) {
  const Eigen::Index hd = c.x.cols() / heads;
  const double scale = 1.0 / std::sqrt(static_cast<double>(hd));
  const Mat dconcat = LinearBwd(ps, b.o, c.concat, dout, g);
  Mat dq(c.q.rows(), c.q.cols()), dk(c.k.rows(), c.k.cols()), dv(c.v.rows(), c.v.cols());
  for (int h = 0; h < heads; ++h) {
    const Mat& p = c.probs[h];
    const auto dh = dconcat.middleCols(h * hd, hd);
    dv.middleCols(h * hd, hd).noalias() = p.transpose() * dh;
    Mat dp = dh * c.v.middleCols(h * hd, hd).transpose();
    Eigen::VectorXd row_dot = (dp.array() * p.array()).rowwise().sum();
    Mat ds = (p.array() * (dp.colwise() - row_dot).array()).matrix() * scale;
    dq.middleCols(h * hd, hd).noalias() = ds * c.k.middleCols(h * hd, hd);
    dk.middleCols(h * hd, hd).noalias() = ds.transpose() * c.q.middleCols(h * hd, hd);
  }
  Mat dx = LinearBwd(ps, b.q, c.x, dq, g);
  dx += LinearBwd(ps, b.k, c.x, dk, g);
  dx += LinearBwd(ps, b.v, c.x, dv, g);
  return dx;
}

// -- "same" padded 1-D convolution via im2col --

Mat Im2Col(const Mat& x, int kernel) {
  const Eigen::Index t = x.rows();
  const Eigen::Index in = x.cols();
  const int left = (kernel - 1) / 2;
  Mat cols = Mat::Zero(t, kernel * in);
  for (int j = 0; j < kernel; ++j) {
    const Eigen::Index shift = j - left;
    const Eigen::Index lo = std::max<Eigen::Index>(0, -shift);
    const Eigen::Index hi = std::min<Eigen::Index>(t, t - shift);
    if (hi > lo) cols.block(lo, j * in, hi - lo, in) = x.middleRows(lo + shift, hi - lo);
  }
  return cols;
}

Mat Col2Im(const Mat& dcols, int kernel, Eigen::Index in) {
  const Eigen::Index t = dcols.rows();
  const int left = (kernel - 1) / 2;
  Mat dx = Mat::Zero(t, in);
  for (int j = 0; j < kernel; ++j) {
    const Eigen::Index shift = j - left;
    const Eigen::Index lo = std::max<Eigen::Index>(0, -shift);
    const Eigen::Index hi = std::min<Eigen::Index>(t, t - shift);
    if (hi > lo) dx.middleRows(lo + shift, hi - lo) += dcols.block(lo, j * in, hi - lo, in);
  }
  return dx;
}

Mat ConvFwd(const ParameterSet& ps, const ConvIdx& c, const Mat& x, Mat* cols_cache) {
  Mat cols = c.kernel == 1 ? x : Im2Col(x, c.kernel);
  Mat y = cols * P(ps, c.w);
  y.rowwise() += P(ps, c.b).row(0);
  if (cols_cache) *cols_cache = std::move(cols);
  return y;
}

Mat ConvBwd(const ParameterSet& ps, const ConvIdx& c, const Mat& cols, const Mat& dy,
            GradSink& g) {
  g.Add(c.w, cols.transpose() * dy);
  g.Add(c.b, dy.colwise().sum());
  Mat dcols = dy * P(ps, c.w).transpose();
  return c.kernel == 1 ? dcols : Col2Im(dcols, c.kernel, c.in);
}

// -- transposed 1-D convolution (no padding): out length (T-1)*stride + kernel --

Mat TConvFwd(const ParameterSet& ps, const ConvIdx& c, int stride, const Mat& x) {
  const Eigen::Index t = x.rows();
  const Mat& w = P(ps, c.w);
  const Eigen::Index out_len = (t - 1) * stride + c.kernel;
  Mat y = Mat::Zero(out_len, w.cols());
  for (int j = 0; j < c.kernel; ++j) {
    const Mat yj = x * w.middleRows(static_cast<Eigen::Index>(j) * c.in, c.in);
    for (Eigen::Index r = 0; r < t; ++r) y.row(r * stride + j) += yj.row(r);
  }
  y.rowwise() += P(ps, c.b).row(0);
  return y;
}

Mat TConvBwd(const ParameterSet& ps, const ConvIdx& c, int stride, const Mat& x, const Mat& dy,
             GradSink& g) {
  const Eigen::Index t = x.rows();
  const Mat& w = P(ps, c.w);
  Mat dx = Mat::Zero(t, c.in);
  Mat dyj(t, w.cols());
  for (int j = 0; j < c.kernel; ++j) {
    for (Eigen::Index r = 0; r < t; ++r) dyj.row(r) = dy.row(r * stride + j);
    const auto wj = w.middleRows(static_cast<Eigen::Index>(j) * c.in, c.in);
    if (!g.Frozen(c.w)) {
      g.Raw(c.w).middleRows(static_cast<Eigen::Index>(j) * c.in, c.in).noalias() +=
          x.transpose() * dyj;
    }
    dx.noalias() += dyj * wj.transpose();
  }
  g.Add(c.b, dy.colwise().sum());
  return dx;
}

// -- dropout --

struct DropCache {
  bool active = false;
  Mat mask;
};

Mat DropFwd(const Mat& x, const DropoutContext* ctx, DropCache* cache) {
  if (!ctx || !ctx->rng || ctx->rate <= 0.0) return x;
  const double keep = 1.0 - ctx->rate;
  Mat mask(x.rows(), x.cols());
  for (Eigen::Index i = 0; i < mask.size(); ++i) {
    mask.data()[i] = ctx->rng->Uniform() < keep ? 1.0 / keep : 0.0;
  }
  Mat y = x.cwiseProduct(mask);
  if (cache) {
    cache->active = true;
    cache->mask = std::move(mask);
  }
  return y;
}

Mat DropBwd(const DropCache& c, const Mat& dy) { return c.active ? dy.cwiseProduct(c.mask) : dy; }

// -- feed-forward transformer block --

struct BlockCache {
  AttnCache attn;
  DropCache drop1;
  NormCache ln1;
  Mat cols1;
  Mat relu_mask;
  Mat cols2;
  DropCache drop2;
  NormCache ln2;
};

Mat BlockFwd(const ParameterSet& ps, const BlockIdx& b, int heads, const Mat& x,
             const DropoutContext* drop, BlockCache* c) {
  Mat a = AttnFwd(ps, b, heads, x, c ? &c->attn : nullptr);
  a = DropFwd(a, drop, c ? &c->drop1 : nullptr);
  Mat y1 = NormFwd(ps, b.ln1, x + a, c ? &c->ln1 : nullptr);
  Mat h = ConvFwd(ps, b.conv1, y1, c ? &c->cols1 : nullptr);
  if (c) c->relu_mask = (h.array() > 0.0).cast<double>();
  h = h.cwiseMax(0.0);
  Mat f = ConvFwd(ps, b.conv2, h, c ? &c->cols2 : nullptr);
  f = DropFwd(f, drop, c ? &c->drop2 : nullptr);
  return NormFwd(ps, b.ln2, y1 + f, c ? &c->ln2 : nullptr);
}

Mat BlockBwd(const ParameterSet& ps, const BlockIdx& b, int heads, const BlockCache& c,
             const Mat& dy, GradSink& g) {
  Mat dsum2 = NormBwd(ps, b.ln2, c.ln2, dy, g);  // d(y1 + f)
  Mat df = DropBwd(c.drop2, dsum2);
  Mat dh = ConvBwd(ps, b.conv2, c.cols2, df, g);
  dh = dh.cwiseProduct(c.relu_mask);
  Mat dy1 = dsum2 + ConvBwd(ps, b.conv1, c.cols1, dh, g);
  Mat dsum1 = NormBwd(ps, b.ln1, c.ln1, dy1, g);  // d(x + a)
  Mat da = DropBwd(c.drop1, dsum1);
  return dsum1 + AttnBwd(ps, b, heads, c.attn, da, g);
}

}  // namespace

// ---------------------------------------------------------------------------
// Full model

namespace {

struct ForwardCache {
  std::vector<BlockCache> encoder;
  Mat encoder_out;
  std::vector<Mat> upsample_inputs;
  std::vector<BlockCache> decoder;
  Mat decoder_out;
};

void CheckFeatureInput(const ModelConfig& cfg, const FeatureSequence& lip) {
  if (cfg.variant == Variant::kUnits) {
    throw Error(ErrorKind::kConfig, "units variant consumes lip unit ids, not features");
  }
  if (lip.num_frames() < 1) throw Error(ErrorKind::kShape, "lip input has zero frames");
  if (lip.dim() != cfg.input_dim) {
    throw Error(ErrorKind::kShape, "lip feature dim " + std::to_string(lip.dim()) +
                                       " != model input_dim " + std::to_string(cfg.input_dim));
  }
  if (lip.kind != FeatureKind::kLip) {
    throw Error(ErrorKind::kValidation, "model input must be a lip feature sequence");
  }
}

void CheckUnitInput(const ModelConfig& cfg, const UnitSequence& units) {
  if (cfg.variant != Variant::kUnits) {
    throw Error(ErrorKind::kConfig, "feature variants consume lip features, not unit ids");
  }
  if (units.size() < 1) throw Error(ErrorKind::kShape, "lip unit input has zero frames");
  for (int32_t id : units.ids) {
    if (id < 0 || id >= cfg.lip_unit_vocab) {
      throw Error(ErrorKind::kValidation, "lip unit " + std::to_string(id) +
                                              " outside the embedding table");
    }
  }
}

}  // namespace

Eigen::MatrixXd S2SModel::Upsample(const Eigen::MatrixXd& states) const {
  const Eigen::Index t = states.rows();
  if (t < 1) throw Error(ErrorKind::kShape, "upsampler input has zero frames");
  Mat u = states;
  for (size_t i = 0; i < layout_->upsampler.size(); ++i) {
    u = TConvFwd(params_, layout_->upsampler[i], layout_->strides[i], u);
  }
  const Eigen::Index excess = u.rows() - 2 * t;
  return u.middleRows(excess / 2, 2 * t);
}

namespace {

struct RunResult {
  S2SForwardOutput out;
  ForwardCache cache;
};

}  // namespace

// Shared forward used by both evaluation and gradient paths.
static RunResult RunForward(const S2SModel& model, const S2SModel::Layout& lay,
                            const FeatureSequence* lip, const UnitSequence* units,
                            const DropoutContext* drop, bool record) {
  const ModelConfig& cfg = model.config();
  const ParameterSet& ps = model.params();
  RunResult r;
  Mat h;
  if (units) {
    const Mat& table = P(ps, lay.embedding);
    h.resize(units->size(), cfg.hidden_dim);
    for (int t = 0; t < units->size(); ++t) h.row(t) = table.row(units->ids[t]);
  } else {
    h = LinearFwd(ps, lay.input_proj, lip->frames.cast<double>());
  }
  const Eigen::Index frames = h.rows();
  h += SinusoidalPositions(static_cast<int>(frames), cfg.hidden_dim);

  if (record) r.cache.encoder.resize(lay.encoder.size());
  for (size_t i = 0; i < lay.encoder.size(); ++i) {
    h = BlockFwd(ps, lay.encoder[i], cfg.num_heads, h, drop,
                 record ? &r.cache.encoder[i] : nullptr);
  }

  Mat u = h;
  for (size_t i = 0; i < lay.upsampler.size(); ++i) {
    if (record) r.cache.upsample_inputs.push_back(u);
    u = TConvFwd(ps, lay.upsampler[i], lay.strides[i], u);
  }
  const Eigen::Index excess = u.rows() - 2 * frames;
  r.out.encoder_states = u.middleRows(excess / 2, 2 * frames);

  Mat d = r.out.encoder_states + SinusoidalPositions(static_cast<int>(2 * frames), cfg.hidden_dim);
  if (record) r.cache.decoder.resize(lay.decoder.size());
  for (size_t i = 0; i < lay.decoder.size(); ++i) {
    d = BlockFwd(ps, lay.decoder[i], cfg.num_heads, d, drop,
                 record ? &r.cache.decoder[i] : nullptr);
  }

  switch (cfg.variant) {
    case Variant::kUnits:
      r.out.unit_logits = LinearFwd(ps, lay.unit_head, d);
      break;
    case Variant::kFeaturesCtc:
      r.out.ctc_logits = LinearFwd(ps, lay.ctc_head, r.out.encoder_states);
      [[fallthrough]];
    case Variant::kFeatures:
      r.out.decoder_features = LinearFwd(ps, lay.feature_head, d);
      break;
  }
  if (record) {
    r.cache.encoder_out = h;
    r.cache.decoder_out = std::move(d);
  }
  return r;
}

S2SForwardOutput S2SModel::Forward(const FeatureSequence& lip) const {
  CheckFeatureInput(config_, lip);
  return RunForward(*this, *layout_, &lip, nullptr, nullptr, false).out;
}

S2SForwardOutput S2SModel::Forward(const UnitSequence& lip_units) const {
  CheckUnitInput(config_, lip_units);
  return RunForward(*this, *layout_, nullptr, &lip_units, nullptr, false).out;
}

LossBreakdown S2SModel::AccumulateGrad(const FeatureSequence* lip, const UnitSequence* lip_units,
                                       const LossSpec& spec, const DropoutContext* dropout,
                                       ParameterSet& grads, double scale) const {
  if ((lip == nullptr) == (lip_units == nullptr)) {
    throw Error(ErrorKind::kConfig, "exactly one model input must be given");
  }
  if (lip) CheckFeatureInput(config_, *lip);
  if (lip_units) CheckUnitInput(config_, *lip_units);
  if (grads.size() != params_.size()) {
    throw Error(ErrorKind::kShape, "gradient set does not match the parameter layout");
  }
  const Layout& lay = *layout_;
  RunResult run = RunForward(*this, lay, lip, lip_units, dropout, true);
  const Eigen::Index frames2 = run.out.encoder_states.rows();

  LossBreakdown loss;
  Mat d_dec = Mat::Zero(frames2, config_.hidden_dim);
  Mat d_enc_states = Mat::Zero(frames2, config_.hidden_dim);

  std::vector<char> frozen(params_.size(), 0);
  for (size_t i = 0; i < params_.size(); ++i) {
    for (const auto& prefix : spec.frozen_prefixes) {
      if (params_[i].name.rfind(prefix, 0) == 0) frozen[i] = 1;
    }
  }
  GradSink g(&grads, std::move(frozen));

  auto require_finite = [](double v, const char* component) {
    if (!std::isfinite(v)) {
      throw Error(ErrorKind::kNumeric, std::string(component) + " loss is not finite");
    }
  };

  switch (config_.variant) {
    case Variant::kUnits: {
      if (!spec.target_units) throw Error(ErrorKind::kConfig, "units variant needs target units");
      if (spec.target_units->size() != frames2) {
        throw Error(ErrorKind::kShape, "target unit length " +
                                           std::to_string(spec.target_units->size()) +
                                           " != 2T = " + std::to_string(frames2));
      }
      LossAndGrad ce = CrossEntropyUnitsWithGrad(*run.out.unit_logits, *spec.target_units);
      require_finite(ce.loss, "cross-entropy");
      loss.cross_entropy = ce.loss;
      loss.total = ce.loss;
      d_dec = LinearBwd(params_, lay.unit_head, run.cache.decoder_out, ce.grad * scale, g);
      break;
    }
    case Variant::kFeatures:
    case Variant::kFeaturesCtc: {
      if (!spec.target_features) {
        throw Error(ErrorKind::kConfig, "feature variants need target features");
      }
      const double alpha_l1 = config_.variant == Variant::kFeatures ? 1.0 : spec.weights.alpha_l1;
      LossAndGrad l1 = L1FeaturesWithGrad(*run.out.decoder_features, *spec.target_features, spec.l1);
      require_finite(l1.loss, "L1");
      loss.l1 = l1.loss;
      d_dec = LinearBwd(params_, lay.feature_head, run.cache.decoder_out,
                        l1.grad * (alpha_l1 * scale), g);
      if (config_.variant == Variant::kFeaturesCtc) {
        if (!spec.ctc_tokens) throw Error(ErrorKind::kConfig, "features_ctc needs CTC tokens");
        LossAndGrad ctc = CtcLossWithGrad(*run.out.ctc_logits, *spec.ctc_tokens);
        require_finite(ctc.loss, "CTC");
        loss.ctc = ctc.loss;
        loss.total = TotalLoss(l1.loss, ctc.loss, spec.weights);
        d_enc_states = LinearBwd(params_, lay.ctc_head, run.out.encoder_states,
                                 ctc.grad * (spec.weights.alpha_ctc * scale), g);
      } else {
        loss.total = l1.loss;
      }
      break;
    }
  }
  require_finite(loss.total, "total");

  for (size_t i = lay.decoder.size(); i-- > 0;) {
    d_dec = BlockBwd(params_, lay.decoder[i], config_.num_heads, run.cache.decoder[i], d_dec, g);
  }
  // Positions are constants; the decoder input gradient flows to the states.
  d_enc_states += d_dec;

  const Eigen::Index frames = frames2 / 2;
  const int raw = UpsampleRawLength(config_, static_cast<int>(frames));
  Mat du = Mat::Zero(raw, config_.hidden_dim);
  du.middleRows((raw - frames2) / 2, frames2) = d_enc_states;
  for (size_t i = lay.upsampler.size(); i-- > 0;) {
    du = TConvBwd(params_, lay.upsampler[i], lay.strides[i], run.cache.upsample_inputs[i], du, g);
  }

  Mat dh = std::move(du);
  for (size_t i = lay.encoder.size(); i-- > 0;) {
    dh = BlockBwd(params_, lay.encoder[i], config_.num_heads, run.cache.encoder[i], dh, g);
  }

  if (lip_units) {
    if (!g.Frozen(lay.embedding)) {
      Mat& de = g.Raw(lay.embedding);
      for (int t = 0; t < lip_units->size(); ++t) de.row(lip_units->ids[t]) += dh.row(t);
    }
  } else {
    LinearBwd(params_, lay.input_proj, lip->frames.cast<double>(), dh, g);
  }
  return loss;
}

GradResult S2SModel::ForwardWithGrad(const FeatureSequence& lip, const LossSpec& spec,
                                     const DropoutContext* dropout) const {
  GradResult r{{}, params_.ZerosLike()};
  r.loss = AccumulateGrad(&lip, nullptr, spec, dropout, r.grads, 1.0);
  return r;
}

GradResult S2SModel::ForwardWithGrad(const UnitSequence& lip_units, const LossSpec& spec,
                                     const DropoutContext* dropout) const {
  GradResult r{{}, params_.ZerosLike()};
  r.loss = AccumulateGrad(nullptr, &lip_units, spec, dropout, r.grads, 1.0);
  return r;
}

}  // namespace l2s
