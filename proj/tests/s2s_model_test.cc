#include "doctest.h"

#include "l2s/checkpoint.h"
#include "l2s/s2s_model.h"
#include "test_util.h"

using namespace l2s;

namespace {

ModelConfig Tiny(Variant v) {
  ModelConfig c;
  c.num_layers_enc = 2;
  c.num_layers_dec = 2;
  c.hidden_dim = 8;
  c.num_heads = 2;
  c.conv_kernel_sizes = {3, 1};
  c.input_dim = 6;
  c.feature_out_dim = 5;
  c.unit_vocab = 7;
  c.lip_unit_vocab = 5;
  c.ctc_vocab = 3;
  c.variant = v;
  c.dropout = 0.0;
  return c;
}

FeatureSequence RandomLip(Rng& rng, int frames, int dim) {
  FeatureSequence s;
  s.frames = FeatureMatrix(frames, dim);
  for (Eigen::Index i = 0; i < s.frames.size(); ++i) s.frames.data()[i] = static_cast<float>(rng.Normal());
  s.frame_rate_hz = kLipFrameRateHz;
  s.kind = FeatureKind::kLip;
  return s;
}

}  // namespace

TEST_CASE("model config invariants") {
  ModelConfig c = Tiny(Variant::kFeatures);
  c.Validate();
  ModelConfig bad = c;
  bad.num_heads = 3;
  CHECK_THROWS_AS(bad.Validate(), Error);
  bad = c;
  bad.upsample_strides = {1, 1};
  CHECK_THROWS_AS(bad.Validate(), Error);
  bad = c;
  bad.dropout = 1.0;
  CHECK_THROWS_AS(bad.Validate(), Error);

  ModelConfig paper;
  CHECK(paper.hidden_dim == 512);
  CHECK(paper.num_heads == 2);
  CHECK(paper.upsample_kernels == std::vector<int>{4, 3});
  CHECK(paper.upsample_strides == std::vector<int>{2, 1});
}

TEST_CASE("model config serializes and parses back") {
  ModelConfig c = Tiny(Variant::kFeaturesCtc);
  const ModelConfig back = ModelConfig::FromKeyValues(ParseKeyValues(c.Serialize()));
  CHECK(back.Serialize() == c.Serialize());
  CHECK(back.Fingerprint() == c.Fingerprint());
}

TEST_CASE("upsampler length rule gives exactly 2T") {
  const ModelConfig c = Tiny(Variant::kFeatures);
  CHECK(UpsampleRawLength(c, 3) == 10);
  const S2SModel m = S2SModel::Init(c, 1);
  for (int t = 1; t <= 12; ++t) CHECK(m.Upsample(Eigen::MatrixXd::Ones(t, 8)).rows() == 2 * t);
}

TEST_CASE("identity upsampler kernels duplicate each frame") {
  // Kernel-4 taps 1 and 2 and kernel-3 tap 1 set to identity: the raw output
  // is [0, 0, x0, x0, x1, x1, x2, x2, 0, 0] and the centre crop keeps the
  // duplicated frames.
  const ModelConfig c = Tiny(Variant::kFeatures);
  S2SModel m = S2SModel::Empty(c);
  ParameterSet& p = m.mutable_params();
  Eigen::MatrixXd& w0 = p[*p.Find("upsampler.0.weight")].value;
  Eigen::MatrixXd& w1 = p[*p.Find("upsampler.1.weight")].value;
  w0.middleRows(1 * 8, 8).setIdentity();
  w0.middleRows(2 * 8, 8).setIdentity();
  w1.middleRows(1 * 8, 8).setIdentity();
  Eigen::MatrixXd x(3, 8);
  for (int r = 0; r < 3; ++r) x.row(r).setConstant(r + 1.0);
  const Eigen::MatrixXd y = m.Upsample(x);
  REQUIRE(y.rows() == 6);
  for (int r = 0; r < 6; ++r) CHECK(y(r, 0) == r / 2 + 1.0);
}

TEST_CASE("sinusoidal positions") {
  const Eigen::MatrixXd p = SinusoidalPositions(4, 6);
  CHECK(p(0, 0) == 0.0);
  CHECK(p(0, 1) == 1.0);
  CHECK(p(1, 0) == doctest::Approx(std::sin(1.0)));
  CHECK(p(1, 1) == doctest::Approx(std::cos(1.0)));
}

TEST_CASE("forward shapes per variant") {
  Rng rng(3);
  const FeatureSequence lip = RandomLip(rng, 5, 6);
  for (Variant v : {Variant::kFeatures, Variant::kFeaturesCtc}) {
    const S2SForwardOutput out = S2SModel::Init(Tiny(v), 2).Forward(lip);
    CHECK(out.encoder_states.rows() == 10);
    REQUIRE(out.decoder_features.has_value());
    CHECK(out.decoder_features->rows() == 10);
    CHECK(out.decoder_features->cols() == 5);
    CHECK(out.ctc_logits.has_value() == (v == Variant::kFeaturesCtc));
    if (out.ctc_logits) CHECK(out.ctc_logits->cols() == 4);
  }
  const S2SForwardOutput u = S2SModel::Init(Tiny(Variant::kUnits), 2).Forward(UnitSequence{{0, 4, 1}, 5, 25});
  REQUIRE(u.unit_logits.has_value());
  CHECK(u.unit_logits->rows() == 6);
  CHECK(u.unit_logits->cols() == 7);
  CHECK(!u.decoder_features.has_value());
}

TEST_CASE("forward rejects wrong inputs") {
  Rng rng(4);
  const S2SModel f = S2SModel::Init(Tiny(Variant::kFeatures), 1);
  CHECK_THROWS_AS(f.Forward(RandomLip(rng, 3, 7)), Error);
  CHECK_THROWS_AS(f.Forward(UnitSequence{{0}, 5, 25}), Error);
  const S2SModel u = S2SModel::Init(Tiny(Variant::kUnits), 1);
  CHECK_THROWS_AS(u.Forward(UnitSequence{{5}, 5, 25}), Error);
  CHECK_THROWS_AS(u.Forward(RandomLip(rng, 3, 6)), Error);
}

TEST_CASE("analytic gradients match central differences") {
  Rng rng(1);
  const FeatureSequence lip = RandomLip(rng, 3, 6);
  FeatureSequence tgt = RandomLip(rng, 6, 5);
  tgt.frame_rate_hz = kSpeechFrameRateHz;
  const UnitSequence lip_units{{1, 4, 2}, 5, 25};
  const UnitSequence tgt_units{{0, 6, 3, 3, 1, 2}, 7};
  const std::vector<int> tokens = {1, 2};
  for (Variant v : {Variant::kFeatures, Variant::kUnits, Variant::kFeaturesCtc}) {
    CAPTURE(VariantName(v));
    S2SModel m = S2SModel::Init(Tiny(v), 3);
    LossSpec spec;
    spec.target_features = &tgt;
    spec.target_units = &tgt_units;
    spec.ctc_tokens = &tokens;
    auto loss = [&] {
      return v == Variant::kUnits ? m.ForwardWithGrad(lip_units, spec).loss.total
                                  : m.ForwardWithGrad(lip, spec).loss.total;
    };
    const GradResult g = v == Variant::kUnits ? m.ForwardWithGrad(lip_units, spec) : m.ForwardWithGrad(lip, spec);
    const double h = 1e-6;
    for (size_t i = 0; i < m.params().size(); ++i) {
      Eigen::MatrixXd& w = m.mutable_params()[i].value;
      for (Eigen::Index j = 0; j < std::min<Eigen::Index>(w.size(), 6); ++j) {
        const double orig = w.data()[j];
        w.data()[j] = orig + h;
        const double up = loss();
        w.data()[j] = orig - h;
        const double down = loss();
        w.data()[j] = orig;
        const double num = (up - down) / (2 * h);
        const double an = g.grads[i].value.data()[j];
        CHECK(std::abs(an - num) <= 1e-5 * std::max({std::abs(an), std::abs(num), 1e-3}));
      }
    }
  }
}

TEST_CASE("frozen prefixes receive zero gradient") {
  Rng rng(2);
  const FeatureSequence lip = RandomLip(rng, 3, 6);
  FeatureSequence tgt = RandomLip(rng, 6, 5);
  const S2SModel m = S2SModel::Init(Tiny(Variant::kFeatures), 3);
  LossSpec spec;
  spec.target_features = &tgt;
  spec.frozen_prefixes = {"encoder."};
  const GradResult g = m.ForwardWithGrad(lip, spec);
  for (size_t i = 0; i < g.grads.size(); ++i) {
    if (g.grads[i].name.rfind("encoder.", 0) == 0) CHECK(g.grads[i].value.isZero());
  }
  CHECK(!g.grads[*g.grads.Find("head.features.weight")].value.isZero());
}

TEST_CASE("dropout is deterministic given the generator seed") {
  Rng rng(5);
  const FeatureSequence lip = RandomLip(rng, 4, 6);
  FeatureSequence tgt = RandomLip(rng, 8, 5);
  ModelConfig c = Tiny(Variant::kFeatures);
  c.dropout = 0.3;
  const S2SModel m = S2SModel::Init(c, 3);
  LossSpec spec;
  spec.target_features = &tgt;
  Rng a(9), b(9);
  DropoutContext da{0.3, &a}, db{0.3, &b};
  const double la = m.ForwardWithGrad(lip, spec, &da).loss.total;
  CHECK(m.ForwardWithGrad(lip, spec, &db).loss.total == la);
  CHECK(m.ForwardWithGrad(lip, spec).loss.total != la);
}

TEST_CASE("checkpoints round trip parameters and reject layout mismatches") {
  TempDir dir;
  const S2SModel m = S2SModel::Init(Tiny(Variant::kFeaturesCtc), 8);
  SaveModel(m, dir.path() / "m.l2sc", {{"note", "x"}});
  KeyValues meta;
  const S2SModel back = LoadModel(dir.path() / "m.l2sc", &meta);
  CHECK(meta.at("note") == "x");
  CHECK(back.config().Serialize() == m.config().Serialize());
  for (size_t i = 0; i < m.params().size(); ++i) {
    CHECK(back.params()[i].value == m.params()[i].value.cast<float>().cast<double>());
  }

  CheckpointData data = ReadCheckpointFile(dir.path() / "m.l2sc");
  data.tensors[0].value.conservativeResize(data.tensors[0].value.rows() + 1, Eigen::NoChange);
  CHECK_THROWS_AS(ModelFromCheckpoint(data), Error);

  std::string bytes = Slurp(dir.path() / "m.l2sc");
  Spit(dir.path() / "cut.l2sc", bytes.substr(0, bytes.size() / 2));
  CHECK_THROWS_AS(LoadModel(dir.path() / "cut.l2sc"), Error);
}
