#include "doctest.h"

#include "l2s/pipeline.h"
#include "test_util.h"

using namespace l2s;

namespace {

SyntheticDatasetSpec SmallSynthetic(int dim) {
  SyntheticDatasetSpec s;
  s.task.vocab_size = 10;
  s.task.lip_dim = dim;
  s.task.speech_dim = dim;
  s.task.noise_sigma = 0.01;
  s.task.seed = 4;
  s.num_utterances = 40;
  s.min_symbols = 6;
  s.max_symbols = 10;
  s.ratios = {0.8, 0.1, 0.1};
  return s;
}

ModelConfig SmallModel() {
  ModelConfig c;
  c.num_layers_enc = 1;
  c.num_layers_dec = 1;
  c.hidden_dim = 16;
  c.num_heads = 2;
  c.conv_kernel_sizes = {3, 1};
  c.dropout = 0.0;
  return c;
}

ErrorKind KindOf(const std::function<void()>& f) {
  try {
    f();
  } catch (const Error& e) {
    return e.kind();
  }
  FAIL("no error thrown");
  return ErrorKind::kIo;
}

}  // namespace

TEST_CASE("prep config enforces the 25 fps / 16 kHz contract") {
  PrepConfig c;
  c.Validate();
  CHECK(c.roi_width == 96);
  CHECK(c.roi_height == 96);
  c.video_fps = 30;
  CHECK(KindOf([&] { c.Validate(); }) == ErrorKind::kConfig);
  const PrepConfig p = PrepConfig::FromKeyValues({{"split_train", "0.8"}, {"split_val", "0.1"}, {"split_test", "0.1"}});
  CHECK(p.ratios.train == 0.8);
}

TEST_CASE("prepare checks records, assigns splits and writes a report") {
  TempDir dir;
  WriteSyntheticDataset(SmallSynthetic(kSslFeatureDim), dir.path() / "data");
  // Strip the split column.
  const std::string m = Slurp(dir.path() / "data" / "manifest.tsv");
  std::string stripped;
  std::istringstream in(m);
  std::string line;
  while (std::getline(in, line)) stripped += line.substr(0, line.rfind('\t')) + "\n";
  Spit(dir.path() / "data" / "nosplit.tsv", stripped);

  const PrepReport r = PrepareDataset(dir.path() / "data" / "nosplit.tsv", {}, 3, dir.path() / "out");
  CHECK(r.num_utterances == 40);
  CHECK(r.violations.empty());
  CHECK(r.splits_assigned);
  const Manifest out = LoadManifest(dir.path() / "out" / "manifest.tsv");
  CHECK(out.records.size() == 40);
  CHECK(out.records[0].split.has_value());
  CHECK(std::filesystem::exists(dir.path() / "out" / "prepare_report.tsv"));

  // Break one record's length contract: 1 of 40 exceeds the 1% default.
  const UtteranceRecord& victim = out.records[5];
  FeatureSequence speech = ReadFeatures(victim.speech_feature_path);
  speech.frames.conservativeResize(speech.num_frames() + 3, Eigen::NoChange);
  speech.frames.bottomRows(3).setZero();
  WriteFeatures(speech, victim.speech_feature_path);
  CHECK(KindOf([&] { PrepareDataset(dir.path() / "data" / "manifest.tsv", {}, 3, dir.path() / "out2"); }) ==
        ErrorKind::kValidation);
  const std::string report = Slurp(dir.path() / "out2" / "prepare_report.tsv");
  CHECK(report.find(victim.utt_id + "\tlength contract") != std::string::npos);

  PrepConfig lenient;
  lenient.max_invalid_fraction = 0.05;
  CHECK(PrepareDataset(dir.path() / "data" / "manifest.tsv", lenient, 3, dir.path() / "out3").num_invalid() == 1);
}

TEST_CASE("synthetic dataset is a pure function of its spec") {
  const auto a = GenerateSyntheticDataset(SmallSynthetic(8));
  const auto b = GenerateSyntheticDataset(SmallSynthetic(8));
  REQUIRE(a.size() == 40);
  for (size_t i = 0; i < a.size(); ++i) {
    CHECK(a[i].utt_id == b[i].utt_id);
    CHECK(a[i].pair.speech.frames == b[i].pair.speech.frames);
    CHECK(a[i].split == b[i].split);
    CHECK(a[i].pair.lip.num_frames() >= 6);
    CHECK(a[i].pair.lip.num_frames() <= 10);
  }
  CHECK(a[0].utt_id == "syn00000");
}

TEST_CASE("examples carry what each variant needs") {
  const auto utts = GenerateSyntheticDataset(SmallSynthetic(8));
  const SyntheticPair& p = utts[0].pair;
  CHECK(KindOf([&] { MakeExample("x", p.lip, p.speech, p.transcript, Variant::kUnits, {}); }) ==
        ErrorKind::kConfig);
  const CtcTokenizer tok = CtcTokenizer::Build({p.transcript}, CtcTokenizer::Granularity::kCharacter);
  DataSources src;
  src.tokenizer = &tok;
  // Character targets are far longer than 2T frames.
  CHECK(KindOf([&] { MakeExample("x", p.lip, p.speech, p.transcript, Variant::kFeaturesCtc, src); }) ==
        ErrorKind::kInfeasible);
  const CtcTokenizer words = CtcTokenizer::Build({p.transcript}, CtcTokenizer::Granularity::kWord);
  src.tokenizer = &words;
  const TrainExample ex = MakeExample("x", p.lip, p.speech, p.transcript, Variant::kFeaturesCtc, src);
  CHECK(ex.ctc_tokens.size() == p.symbols.size());
}

TEST_CASE("infer checks mode against the checkpoint variant") {
  Rng rng(1);
  ModelConfig c = SmallModel();
  c.input_dim = 8;
  c.feature_out_dim = 8;
  c.unit_vocab = 10;
  c.lip_unit_vocab = 4;
  const auto utts = GenerateSyntheticDataset(SmallSynthetic(8));
  Codebook speech_cb = FitKMeans(utts[0].pair.speech.frames, {.k = 3, .seed = 1}, FeatureKind::kSpeech);
  const S2SModel feat = S2SModel::Init(c, 1);
  const InferResult r = Infer(feat, utts[0].pair.lip, InferMode::kFeaturesThenQuantize, &speech_cb, nullptr);
  CHECK(r.units.size() == 2 * utts[0].pair.lip.num_frames());
  CHECK(r.features.has_value());
  CHECK(KindOf([&] { Infer(feat, utts[0].pair.lip, InferMode::kUnitsDirect, &speech_cb, nullptr); }) ==
        ErrorKind::kConfig);
  CHECK(KindOf([&] { Infer(feat, utts[0].pair.lip, InferMode::kFeaturesThenQuantize, nullptr, nullptr); }) ==
        ErrorKind::kConfig);

  c.variant = Variant::kUnits;
  const S2SModel units = S2SModel::Init(c, 1);
  Codebook lip_cb = FitKMeans(utts[0].pair.lip.frames, {.k = 4, .seed = 1}, FeatureKind::kLip);
  const InferResult u = Infer(units, utts[0].pair.lip, InferMode::kUnitsDirect, nullptr, &lip_cb);
  CHECK(u.units.size() == 2 * utts[0].pair.lip.num_frames());
  CHECK(!u.features.has_value());
  CHECK(ParseInferMode(InferModeName(InferMode::kUnitsDirect)) == InferMode::kUnitsDirect);
}

TEST_CASE("evaluate scores synthesized WAVs against references") {
  TempDir dir;
  const std::filesystem::path ref = dir.path() / "ref", syn = dir.path() / "syn", hyp = dir.path() / "hyp";
  std::filesystem::create_directories(hyp);
  Manifest m;
  VocoderSpec spec;
  for (int i = 0; i < 2; ++i) {
    const std::string id = "u" + std::to_string(i);
    Rng rng(i);
    UnitSequence u{{}, 100};
    for (int t = 0; t < 60; ++t) u.ids.push_back(static_cast<int32_t>(rng.Below(60)));
    SynthesizeToFile(u, spec, ref / (id + ".wav"));
    SynthesizeToFile(u, spec, syn / (id + ".wav"));
    UtteranceRecord r;
    r.utt_id = id;
    r.lip_feature_path = dir.path() / "l";
    r.speech_feature_path = dir.path() / "s";
    r.transcript = "bin blue";
    r.split = Split::kTest;
    m.records.push_back(r);
  }
  Spit(hyp / "u0.txt", "bin red\n");
  WriteManifest(m, dir.path() / "m.tsv");
  EvaluateInputs in;
  in.manifest = dir.path() / "m.tsv";
  in.reference_dir = ref;
  in.synth_dir = syn;
  in.hypothesis_dir = hyp;
  const MetricReport r = Evaluate(in);
  REQUIRE(r.per_utterance.size() == 2);
  CHECK(r.per_utterance[0].stoi == doctest::Approx(1.0));
  CHECK(r.per_utterance[0].wer->rate() == 0.5);
  CHECK(!r.per_utterance[1].wer.has_value());
  CHECK(*r.CorpusWer() == 0.5);
}

TEST_CASE("ablation runs every variant on a tiny task") {
  AblationPlan plan;
  plan.seed = 3;
  plan.data = SmallSynthetic(16);
  plan.data.num_utterances = 60;
  plan.model = SmallModel();
  plan.train.batch_size = 4;
  plan.train.max_steps = 10;
  plan.train.lr_scale = 0.1;
  plan.train.eval_interval = 5;
  plan.lip_codebook_size = 20;
  plan.kmeans_max_iters = 5;
  plan.vocoder.unit_vocab = 10;
  const AblationResult a = RunAblation(plan);
  REQUIRE(a.rows.size() == 5);
  CHECK(a.mean_predictor_l1 > 0.0);
  for (const AblationRow& r : a.rows) {
    CHECK(std::isfinite(r.heldout_l1));
    CHECK(r.unit_accuracy >= 0.0);
    CHECK(r.unit_accuracy <= 1.0);
  }
  CHECK(a.Find(AblationVariant::kS2sFeatures)->log.size() == 10);
  CHECK(a.Find(AblationVariant::kNoS2sFinetuned)->log.empty());
  // Repeat runs reproduce the table.
  CHECK(RunAblation(plan).ToTsv() == a.ToTsv());
  CHECK(ParseAblationVariant("s2s_units") == AblationVariant::kS2sUnits);
  CHECK_THROWS_AS(ParseAblationVariant("s2s"), Error);
}
