// Non-autoregressive lip-to-speech sequence model.
//
// Layout: input layer (unit embedding or linear projection) + sinusoidal
// positions -> encoder stack of feed-forward transformer blocks at the lip
// rate -> two transposed 1-D convolutions that double the time axis (centre
// cropped to exactly 2T) -> positions again -> decoder stack -> output heads.
// The CTC head reads the upsampled encoder states; the feature and unit heads
// read the decoder output.
//
// Each block is: multi-head self-attention, residual + layer norm, then two
// "same"-padded 1-D convolutions (ReLU between, 4x channel expansion),
// residual + layer norm.

#ifndef L2S_S2S_MODEL_H_
#define L2S_S2S_MODEL_H_

#include <Eigen/Dense>

#include <cstdint>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "l2s/common.h"
#include "l2s/featureio.h"
#include "l2s/objectives.h"

namespace l2s {

enum class Variant { kUnits, kFeatures, kFeaturesCtc };

const char* VariantName(Variant v);
Variant ParseVariant(const std::string& name);

struct ModelConfig {
  int num_layers_enc = 6;
  int num_layers_dec = 6;
  int hidden_dim = 512;
  int num_heads = 2;
  std::vector<int> conv_kernel_sizes = {9, 1};
  int ffn_expansion = 4;
  std::vector<int> upsample_kernels = {4, 3};
  std::vector<int> upsample_strides = {2, 1};
  int input_dim = kSslFeatureDim;       // feature variants
  int lip_unit_vocab = 2000;            // units variant input embedding rows
  int feature_out_dim = kSslFeatureDim;
  int unit_vocab = 100;
  int ctc_vocab = 0;                    // excluding the blank
  Variant variant = Variant::kFeatures;
  double dropout = 0.1;

  int head_dim() const { return hidden_dim / num_heads; }

  // Throws kConfig when an invariant fails.
  void Validate() const;

  // `key = value` lines; Parse accepts the same keys.
  std::string Serialize() const;
  static ModelConfig FromKeyValues(const std::map<std::string, std::string>& kv);
  uint64_t Fingerprint() const { return Fnv1a64(Serialize()); }
};

// Dense tensors are stored as matrices: linear weights [in, out], conv and
// transposed-conv weights [kernel, in, out] flattened to (kernel*in) x out,
// biases and norm gains as 1 x n rows.
struct Tensor {
  std::string name;
  std::vector<int> shape;
  Eigen::MatrixXd value;
};

class ParameterSet {
 public:
  int Add(std::string name, std::vector<int> shape, Eigen::Index rows, Eigen::Index cols);

  size_t size() const { return tensors_.size(); }
  Tensor& operator[](size_t i) { return tensors_[i]; }
  const Tensor& operator[](size_t i) const { return tensors_[i]; }
  std::vector<Tensor>::iterator begin() { return tensors_.begin(); }
  std::vector<Tensor>::iterator end() { return tensors_.end(); }
  std::vector<Tensor>::const_iterator begin() const { return tensors_.begin(); }
  std::vector<Tensor>::const_iterator end() const { return tensors_.end(); }

  std::optional<size_t> Find(const std::string& name) const;
  ParameterSet ZerosLike() const;
  void SetZero();
  Eigen::Index NumScalars() const;
  bool AllFinite() const;

 private:
  std::vector<Tensor> tensors_;
  std::map<std::string, size_t> index_;
};

struct S2SForwardOutput {
  Eigen::MatrixXd encoder_states;                  // 2T x hidden
  std::optional<Eigen::MatrixXd> decoder_features; // 2T x feature_out_dim
  std::optional<Eigen::MatrixXd> unit_logits;      // 2T x unit_vocab
  std::optional<Eigen::MatrixXd> ctc_logits;       // 2T x (ctc_vocab + 1)
};

// Dropout is active only when a context is supplied.
struct DropoutContext {
  double rate = 0.1;
  Rng* rng = nullptr;
};

struct LossSpec {
  const UnitSequence* target_units = nullptr;        // units variant
  const FeatureSequence* target_features = nullptr;  // feature variants
  const std::vector<int>* ctc_tokens = nullptr;      // features_ctc variant
  LossWeights weights;
  L1Options l1;
  // Parameters whose names start with any of these receive zero gradient.
  std::vector<std::string> frozen_prefixes;
};

struct LossBreakdown {
  double total = 0.0;
  double cross_entropy = 0.0;
  double l1 = 0.0;
  double ctc = 0.0;
};

struct GradResult {
  LossBreakdown loss;
  ParameterSet grads;
};

class S2SModel {
 public:
  // Scaled-uniform fan-in weights, zero biases, unit norm gains.
  static S2SModel Init(const ModelConfig& config, uint64_t seed);
  // Allocates the parameter layout for `config` with zero values.
  static S2SModel Empty(const ModelConfig& config);

  const ModelConfig& config() const { return config_; }
  const ParameterSet& params() const { return params_; }
  ParameterSet& mutable_params() { return params_; }

  // Evaluation-mode forward. Feature variants take lip features; the units
  // variant takes lip unit ids.
  S2SForwardOutput Forward(const FeatureSequence& lip) const;
  S2SForwardOutput Forward(const UnitSequence& lip_units) const;

  // Loss and gradients for every parameter.
  GradResult ForwardWithGrad(const FeatureSequence& lip, const LossSpec& spec,
                             const DropoutContext* dropout = nullptr) const;
  GradResult ForwardWithGrad(const UnitSequence& lip_units, const LossSpec& spec,
                             const DropoutContext* dropout = nullptr) const;
  // Adds scale * d(loss)/d(params) into `grads`. Exactly one input is set.
  LossBreakdown AccumulateGrad(const FeatureSequence* lip, const UnitSequence* lip_units,
                               const LossSpec& spec, const DropoutContext* dropout,
                               ParameterSet& grads, double scale) const;

  // Upsampler alone, exposed for testing the length rule.
  Eigen::MatrixXd Upsample(const Eigen::MatrixXd& states) const;

  struct Layout;

 private:
  explicit S2SModel(const ModelConfig& config);

  ModelConfig config_;
  ParameterSet params_;
  std::shared_ptr<const Layout> layout_;
};

// Length produced by the transposed convolutions before cropping.
int UpsampleRawLength(const ModelConfig& config, int input_frames);

// Sinusoidal position table, frames x dim.
Eigen::MatrixXd SinusoidalPositions(int frames, int dim);

}  // namespace l2s

#endif  // L2S_S2S_MODEL_H_
