#include "l2s/pipeline.h"

#include <algorithm>
#include <chrono>
#include <cstdio>
#include <fstream>
#include <map>
#include <sstream>

namespace l2s {

namespace {

void Say(const LogFn& log, const std::string& m) {
  if (log) log(m);
}

void WriteText(const std::filesystem::path& path, const std::string& text) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream f(path, std::ios::binary);
  if (!f) throw Error(ErrorKind::kIo, "cannot write " + path.string());
  f << text;
}

std::string ReadText(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw Error(ErrorKind::kIo, "cannot read " + path.string());
  std::ostringstream s;
  s << f.rdbuf();
  return s.str();
}

std::string Fixed(double v, int digits) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.*f", digits, v);
  return buf;
}

// Row-wise argmax, ties to the lower id.
std::vector<int32_t> ArgmaxRows(const Eigen::MatrixXd& m) {
  std::vector<int32_t> ids(m.rows());
  for (Eigen::Index r = 0; r < m.rows(); ++r) {
    Eigen::Index best = 0;
    for (Eigen::Index c = 1; c < m.cols(); ++c) {
      if (m(r, c) > m(r, best)) best = c;
    }
    ids[r] = static_cast<int32_t>(best);
  }
  return ids;
}

FeatureSequence ToSpeechSequence(const Eigen::MatrixXd& m) {
  return {m.cast<float>(), kSpeechFrameRateHz, FeatureKind::kSpeech};
}

}  // namespace

// ---------------------------------------------------------------------------
// prepare

void PrepConfig::Validate() const {
  if (video_fps != static_cast<int>(kLipFrameRateHz)) {
    throw Error(ErrorKind::kConfig, "video_fps must be 25 to match 25 Hz lip features");
  }
  if (audio_sample_rate_hz != static_cast<int>(kAudioSampleRateHz)) {
    throw Error(ErrorKind::kConfig, "audio_sample_rate_hz must be 16000 for 50 Hz speech features");
  }
  if (roi_width < 1 || roi_height < 1) throw Error(ErrorKind::kConfig, "ROI must be non-empty");
  if (!(max_invalid_fraction >= 0.0 && max_invalid_fraction <= 1.0)) {
    throw Error(ErrorKind::kConfig, "max_invalid_fraction must be in [0, 1]");
  }
}

PrepConfig PrepConfig::FromKeyValues(const KeyValues& kv) {
  PrepConfig c;
  for (const auto& [k, v] : kv) {
    if (k == "video_fps") c.video_fps = ParseInt(k, v);
    else if (k == "audio_sample_rate_hz") c.audio_sample_rate_hz = ParseInt(k, v);
    else if (k == "roi_width") c.roi_width = ParseInt(k, v);
    else if (k == "roi_height") c.roi_height = ParseInt(k, v);
    else if (k == "landmark_source") c.landmark_source = v;
    else if (k == "max_invalid_fraction") c.max_invalid_fraction = ParseDouble(k, v);
    else if (k == "split_train") c.ratios.train = ParseDouble(k, v);
    else if (k == "split_val") c.ratios.val = ParseDouble(k, v);
    else if (k == "split_test") c.ratios.test = ParseDouble(k, v);
  }
  return c;
}

size_t PrepReport::num_invalid() const {
  std::vector<std::string> ids;
  for (const auto& v : violations) ids.push_back(v.utt_id);
  std::sort(ids.begin(), ids.end());
  return static_cast<size_t>(std::unique(ids.begin(), ids.end()) - ids.begin());
}

std::string PrepReport::ToTsv() const {
  std::string s = "utt_id\tviolation\n";
  for (const auto& v : violations) s += v.utt_id + "\t" + v.message + "\n";
  s += "# utterances=" + std::to_string(num_utterances) + "\n";
  s += "# invalid=" + std::to_string(num_invalid()) + "\n";
  s += std::string("# splits_assigned=") + (splits_assigned ? "true" : "false") + "\n";
  return s;
}

PrepReport PrepareDataset(const std::filesystem::path& manifest_path, const PrepConfig& config,
                          uint64_t seed, const std::filesystem::path& out_dir) {
  config.Validate();
  ManifestOptions opts;
  opts.require_split = false;
  Manifest manifest = LoadManifest(manifest_path, opts);
  PrepReport report;
  report.num_utterances = manifest.records.size();

  for (const UtteranceRecord& r : manifest.records) {
    auto violation = [&](const std::string& m) { report.violations.push_back({r.utt_id, m}); };
    std::optional<FeatureSequence> lip, speech;
    try {
      lip = ReadFeatures(r.lip_feature_path, FeatureKind::kLip);
    } catch (const Error& e) {
      violation(std::string("lip features unreadable: ") + e.what());
    }
    try {
      speech = ReadFeatures(r.speech_feature_path, FeatureKind::kSpeech);
    } catch (const Error& e) {
      violation(std::string("speech features unreadable: ") + e.what());
    }
    if (lip) {
      if (lip->frame_rate_hz != kLipFrameRateHz) {
        violation("lip frame rate " + std::to_string(lip->frame_rate_hz) + " Hz, expected 25");
      }
      if (lip->dim() != kSslFeatureDim) {
        violation("lip dim " + std::to_string(lip->dim()) + ", expected 768");
      }
    }
    if (speech) {
      if (speech->frame_rate_hz != kSpeechFrameRateHz) {
        violation("speech frame rate " + std::to_string(speech->frame_rate_hz) +
                  " Hz, expected 50");
      }
      if (speech->dim() != kSslFeatureDim) {
        violation("speech dim " + std::to_string(speech->dim()) + ", expected 768");
      }
    }
    if (lip && speech) {
      const int t = lip->num_frames();
      const int s = speech->num_frames();
      if (s < 2 * t - 1 || s > 2 * t + 1) {
        violation("length contract: speech has " + std::to_string(s) + " frames for " +
                  std::to_string(t) + " lip frames (expected 2T +/- 1)");
      }
    }
  }

  if (!manifest.has_split_column) {
    const std::vector<Split> splits = MakeSplit(manifest.records.size(), config.ratios, seed);
    for (size_t i = 0; i < splits.size(); ++i) manifest.records[i].split = splits[i];
    manifest.has_split_column = true;
    report.splits_assigned = true;
  }

  std::filesystem::create_directories(out_dir);
  WriteText(out_dir / "prepare_report.tsv", report.ToTsv());
  WriteManifest(manifest, out_dir / "manifest.tsv");

  const double n = std::max<double>(1.0, static_cast<double>(report.num_utterances));
  if (static_cast<double>(report.num_invalid()) / n > config.max_invalid_fraction) {
    throw Error(ErrorKind::kValidation,
                std::to_string(report.num_invalid()) + " of " +
                    std::to_string(report.num_utterances) +
                    " utterances violate the data contract; see prepare_report.tsv");
  }
  return report;
}

// ---------------------------------------------------------------------------
// data for training

TrainExample MakeExample(const std::string& utt_id, FeatureSequence lip, FeatureSequence speech,
                         const std::string& transcript, Variant variant,
                         const DataSources& sources) {
  TrainExample ex;
  ex.utt_id = utt_id;
  lip.kind = FeatureKind::kLip;
  speech.kind = FeatureKind::kSpeech;
  const int frames2 = 2 * lip.num_frames();
  switch (variant) {
    case Variant::kUnits:
      if (!sources.lip_codebook || !sources.speech_codebook) {
        throw Error(ErrorKind::kConfig, "units variant needs lip and speech codebooks");
      }
      ex.lip_units = Assign(*sources.lip_codebook, lip);
      ex.speech_units = AlignUnits(Assign(*sources.speech_codebook, speech), frames2);
      break;
    case Variant::kFeaturesCtc: {
      if (!sources.tokenizer) throw Error(ErrorKind::kConfig, "features_ctc needs a tokenizer");
      ex.ctc_tokens = sources.tokenizer->Encode(transcript);
      if (CtcMinFrames(ex.ctc_tokens) > frames2) {
        throw Error(ErrorKind::kInfeasible, "utterance " + utt_id + ": transcript needs " +
                                                std::to_string(CtcMinFrames(ex.ctc_tokens)) +
                                                " frames, only " + std::to_string(frames2) +
                                                " available");
      }
      break;
    }
    case Variant::kFeatures:
      break;
  }
  ex.lip = std::move(lip);
  ex.speech = std::move(speech);
  return ex;
}

TrainData LoadTrainData(const Manifest& manifest, Variant variant, const DataSources& sources) {
  TrainData data;
  for (const UtteranceRecord& r : manifest.records) {
    if (!r.split || *r.split == Split::kTest) continue;
    TrainExample ex = MakeExample(r.utt_id, ReadFeatures(r.lip_feature_path, FeatureKind::kLip),
                                  ReadFeatures(r.speech_feature_path, FeatureKind::kSpeech),
                                  r.transcript, variant, sources);
    (*r.split == Split::kTrain ? data.train : data.val).push_back(std::move(ex));
  }
  if (data.train.empty()) throw Error(ErrorKind::kConfig, "manifest has no train utterances");
  return data;
}

// ---------------------------------------------------------------------------
// infer

const char* InferModeName(InferMode mode) {
  return mode == InferMode::kFeaturesThenQuantize ? "features_then_quantize" : "units_direct";
}

InferMode ParseInferMode(const std::string& name) {
  if (name == "features_then_quantize") return InferMode::kFeaturesThenQuantize;
  if (name == "units_direct") return InferMode::kUnitsDirect;
  throw Error(ErrorKind::kConfig, "unknown infer mode '" + name + "'");
}

InferResult Infer(const S2SModel& model, const FeatureSequence& lip, InferMode mode,
                  const Codebook* speech_codebook, const Codebook* lip_codebook) {
  const Variant v = model.config().variant;
  InferResult r;
  if (mode == InferMode::kFeaturesThenQuantize) {
    if (v == Variant::kUnits) {
      throw Error(ErrorKind::kConfig, "features_then_quantize needs a feature-variant checkpoint");
    }
    if (!speech_codebook) throw Error(ErrorKind::kConfig, "features mode needs a speech codebook");
    FeatureSequence in = lip;
    in.kind = FeatureKind::kLip;
    const S2SForwardOutput out = model.Forward(in);
    r.features = ToSpeechSequence(*out.decoder_features);
    r.units = Assign(*speech_codebook, *r.features);
    return r;
  }
  if (v != Variant::kUnits) {
    throw Error(ErrorKind::kConfig, "units_direct needs a units-variant checkpoint, got " +
                                        std::string(VariantName(v)));
  }
  if (!lip_codebook) throw Error(ErrorKind::kConfig, "units mode needs the lip codebook");
  if (lip_codebook->size() != model.config().lip_unit_vocab) {
    throw Error(ErrorKind::kConfig, "lip codebook size differs from the model's lip_unit_vocab");
  }
  FeatureSequence in = lip;
  in.kind = FeatureKind::kLip;
  const S2SForwardOutput out = model.Forward(Assign(*lip_codebook, in));
  r.units.ids = ArgmaxRows(*out.unit_logits);
  r.units.codebook_size = model.config().unit_vocab;
  r.units.frame_rate_hz = kSpeechFrameRateHz;
  return r;
}

// ---------------------------------------------------------------------------
// synthesize / evaluate

void SynthesizeToFile(const UnitSequence& units, const VocoderSpec& spec,
                      const std::filesystem::path& out) {
  if (spec.kind == VocoderKind::kExternal) {
    spec.Validate();
    ExportUnitsForExternal(units, spec, out);
    return;
  }
  WriteWav(SynthesizeToy(units, spec), out);
}

MetricReport Evaluate(const EvaluateInputs& in) {
  ManifestOptions opts;
  opts.require_split = false;
  const Manifest manifest = LoadManifest(in.manifest, opts);
  std::vector<UtteranceRecord> records;
  for (const UtteranceRecord& r : manifest.records) {
    if (in.split && r.split != in.split) continue;
    records.push_back(r);
  }
  std::sort(records.begin(), records.end(),
            [](const UtteranceRecord& a, const UtteranceRecord& b) { return a.utt_id < b.utt_id; });
  MetricReport report;
  report.asr_label = in.asr_label;
  for (const UtteranceRecord& r : records) {
    const Waveform ref = ReadWav(in.reference_dir / (r.utt_id + ".wav"));
    const Waveform syn = ReadWav(in.synth_dir / (r.utt_id + ".wav"));
    UtteranceMetrics m;
    m.utt_id = r.utt_id;
    m.stoi = Stoi(ref, syn);
    m.estoi = Estoi(ref, syn);
    if (in.hypothesis_dir) {
      const auto hyp = *in.hypothesis_dir / (r.utt_id + ".txt");
      if (std::filesystem::exists(hyp)) m.wer = WerAlign(r.transcript, ReadText(hyp));
    }
    report.per_utterance.push_back(std::move(m));
  }
  return report;
}

// ---------------------------------------------------------------------------
// synthetic dataset

void SyntheticDatasetSpec::Validate() const {
  task.Validate();
  if (num_utterances < 1) throw Error(ErrorKind::kConfig, "num_utterances must be >= 1");
  if (min_symbols < 1 || max_symbols < min_symbols) {
    throw Error(ErrorKind::kConfig, "need 1 <= min_symbols <= max_symbols");
  }
}

std::vector<SyntheticUtterance> GenerateSyntheticDataset(const SyntheticDatasetSpec& spec) {
  spec.Validate();
  const SyntheticEmbeddings emb = MakeSyntheticEmbeddings(spec.task);
  const std::vector<Split> splits =
      MakeSplit(static_cast<size_t>(spec.num_utterances), spec.ratios, spec.task.seed);
  std::vector<SyntheticUtterance> out;
  out.reserve(spec.num_utterances);
  for (int i = 0; i < spec.num_utterances; ++i) {
    Rng rng(MixSeed(spec.task.seed, static_cast<uint64_t>(i), 0x1e9));
    const int n = spec.min_symbols +
                  static_cast<int>(rng.Below(static_cast<uint64_t>(spec.max_symbols - spec.min_symbols + 1)));
    char id[32];
    std::snprintf(id, sizeof(id), "syn%05d", i);
    out.push_back({id, GenerateSyntheticPair(spec.task, emb, n, static_cast<uint64_t>(i)),
                   splits[static_cast<size_t>(i)]});
  }
  return out;
}

void WriteSyntheticDataset(const SyntheticDatasetSpec& spec, const std::filesystem::path& out_dir) {
  Manifest manifest;
  for (SyntheticUtterance& u : GenerateSyntheticDataset(spec)) {
    UtteranceRecord r;
    r.utt_id = u.utt_id;
    r.lip_feature_path = out_dir / "lip" / (u.utt_id + ".l2sf");
    r.speech_feature_path = out_dir / "speech" / (u.utt_id + ".l2sf");
    r.transcript = u.pair.transcript;
    r.split = u.split;
    WriteFeatures(u.pair.lip, r.lip_feature_path);
    WriteFeatures(u.pair.speech, r.speech_feature_path);
    manifest.records.push_back(std::move(r));
  }
  WriteManifest(manifest, out_dir / "manifest.tsv");
}

// ---------------------------------------------------------------------------
// ablation

const char* AblationVariantName(AblationVariant v) {
  switch (v) {
    case AblationVariant::kNoS2sPretrained: return "no_s2s_pretrained";
    case AblationVariant::kNoS2sFinetuned: return "no_s2s_finetuned";
    case AblationVariant::kS2sUnits: return "s2s_units";
    case AblationVariant::kS2sFeatures: return "s2s_features";
    case AblationVariant::kS2sFeaturesCtc: return "s2s_features_ctc";
  }
  return "?";
}

AblationVariant ParseAblationVariant(const std::string& name) {
  for (AblationVariant v : AllAblationVariants()) {
    if (name == AblationVariantName(v)) return v;
  }
  throw Error(ErrorKind::kConfig, "unknown ablation variant '" + name + "'");
}

std::vector<AblationVariant> AllAblationVariants() {
  return {AblationVariant::kNoS2sPretrained, AblationVariant::kNoS2sFinetuned,
          AblationVariant::kS2sUnits, AblationVariant::kS2sFeatures,
          AblationVariant::kS2sFeaturesCtc};
}

void AblationPlan::Validate() const {
  if (variants.empty()) throw Error(ErrorKind::kConfig, "ablation plan has no variants");
  data.Validate();
  train.Validate();
  vocoder.Validate();
  if (lip_codebook_size < 1) throw Error(ErrorKind::kConfig, "lip_codebook_size must be >= 1");
  if (vocoder.unit_vocab != data.task.vocab_size) {
    throw Error(ErrorKind::kConfig, "vocoder unit_vocab must equal the speech codebook size");
  }
}

const AblationRow* AblationResult::Find(AblationVariant v) const {
  for (const AblationRow& r : rows) {
    if (r.variant == v) return &r;
  }
  return nullptr;
}

std::string AblationResult::ToTsv() const {
  std::string s = "variant\tstoi\testoi\theldout_l1\tunit_accuracy\n";
  for (const AblationRow& r : rows) {
    s += std::string(AblationVariantName(r.variant)) + "\t" + Fixed(r.stoi, 4) + "\t" +
         Fixed(r.estoi, 4) + "\t" + Fixed(r.heldout_l1, 4) + "\t" + Fixed(r.unit_accuracy, 4) +
         "\n";
  }
  for (const std::string& f : footer) s += "# " + f + "\n";
  return s;
}

namespace {

struct Prediction {
  Eigen::MatrixXd features;  // 2T x D reconstruction
  std::vector<int32_t> units;
};

// Speech unit per lip unit by majority vote over aligned train frames; unseen
// lip units fall back to the most frequent speech unit.
std::vector<int32_t> FrequencyRemap(const std::vector<UnitSequence>& lip_units,
                                    const std::vector<UnitSequence>& speech_units, int lip_k,
                                    int speech_k) {
  std::vector<std::vector<int>> counts(lip_k, std::vector<int>(speech_k, 0));
  std::vector<int> global(speech_k, 0);
  for (size_t i = 0; i < lip_units.size(); ++i) {
    for (int t = 0; t < lip_units[i].size(); ++t) {
      for (int k = 0; k < 2; ++k) {
        const int s = speech_units[i].ids[2 * t + k];
        ++counts[lip_units[i].ids[t]][s];
        ++global[s];
      }
    }
  }
  const int fallback = static_cast<int>(std::max_element(global.begin(), global.end()) - global.begin());
  std::vector<int32_t> map(lip_k, fallback);
  for (int l = 0; l < lip_k; ++l) {
    const auto it = std::max_element(counts[l].begin(), counts[l].end());
    if (*it > 0) map[l] = static_cast<int32_t>(it - counts[l].begin());
  }
  return map;
}

Eigen::MatrixXd Reconstruct(const Codebook& cb, const std::vector<int32_t>& units) {
  Eigen::MatrixXd m(units.size(), cb.dim());
  for (size_t t = 0; t < units.size(); ++t) m.row(t) = cb.centroids.row(units[t]).cast<double>();
  return m;
}

}  // namespace

AblationResult RunAblation(const AblationPlan& plan, const LogFn& log) {
  plan.Validate();
  using Clock = std::chrono::steady_clock;
  AblationResult result;

  SyntheticDatasetSpec dspec = plan.data;
  const std::vector<SyntheticUtterance> utts = GenerateSyntheticDataset(dspec);
  std::vector<const SyntheticUtterance*> train, val, test;
  for (const SyntheticUtterance& u : utts) {
    (u.split == Split::kTrain ? train : u.split == Split::kVal ? val : test).push_back(&u);
  }
  if (train.empty() || test.empty()) {
    throw Error(ErrorKind::kConfig, "synthetic dataset needs train and test utterances");
  }
  result.num_train = train.size();
  result.num_test = test.size();

  auto stack = [](const std::vector<const SyntheticUtterance*>& us, bool lip) {
    std::vector<FeatureSequence> seqs;
    for (const auto* u : us) seqs.push_back(lip ? u->pair.lip : u->pair.speech);
    return StackFrames(seqs);
  };

  KMeansOptions ko;
  ko.k = plan.data.task.vocab_size;
  ko.seed = MixSeed(plan.seed, 0x5c);
  ko.max_iters = plan.kmeans_max_iters;
  const Codebook speech_cb = FitKMeans(stack(train, false), ko, FeatureKind::kSpeech);
  Say(log, "speech codebook: k=" + std::to_string(speech_cb.size()) + " inertia " +
               FormatDouble(speech_cb.fit.inertia));

  std::map<uint64_t, UnitSequence> targets;  // by utterance index in `utts`
  auto target_of = [&](const SyntheticUtterance* u) -> const UnitSequence& {
    const uint64_t key = static_cast<uint64_t>(u - utts.data());
    auto it = targets.find(key);
    if (it == targets.end()) {
      it = targets.emplace(key, AlignUnits(Assign(speech_cb, u->pair.speech),
                                           2 * u->pair.lip.num_frames())).first;
    }
    return it->second;
  };

  {
    Eigen::RowVectorXd mean = stack(train, false).cast<double>().colwise().mean();
    double l1 = 0.0;
    for (const auto* u : test) {
      const Eigen::MatrixXd pred = mean.replicate(u->pair.speech.num_frames(), 1);
      l1 += L1Features(pred, u->pair.speech);
    }
    result.mean_predictor_l1 = l1 / static_cast<double>(test.size());
  }

  // Lip codebooks, fitted lazily: [0] clean, [1] with the pretrained-encoder noise.
  std::optional<Codebook> lip_cb[2];
  auto lip_features = [&](const SyntheticUtterance* u, bool noisy) {
    FeatureSequence f = u->pair.lip;
    if (noisy) {
      Rng rng(MixSeed(plan.seed, static_cast<uint64_t>(u - utts.data()), 0x9e7));
      for (Eigen::Index i = 0; i < f.frames.size(); ++i) {
        f.frames.data()[i] += static_cast<float>(plan.pretrained_noise_sigma * rng.Normal());
      }
    }
    return f;
  };
  auto lip_codebook = [&](bool noisy) -> const Codebook& {
    auto& slot = lip_cb[noisy ? 1 : 0];
    if (!slot) {
      std::vector<FeatureSequence> seqs;
      for (const auto* u : train) seqs.push_back(lip_features(u, noisy));
      KMeansOptions lo;
      lo.k = plan.lip_codebook_size;
      lo.seed = MixSeed(plan.seed, noisy ? 0x1b2 : 0x1b1);
      lo.max_iters = plan.kmeans_max_iters;
      slot = FitKMeans(StackFrames(seqs), lo, FeatureKind::kLip);
      Say(log, std::string("lip codebook") + (noisy ? " (noisy)" : "") + ": k=" +
                   std::to_string(slot->size()) + " inertia " + FormatDouble(slot->fit.inertia));
    }
    return *slot;
  };

  std::vector<std::string> transcripts;
  for (const auto* u : train) transcripts.push_back(u->pair.transcript);
  const CtcTokenizer tokenizer = CtcTokenizer::Build(transcripts, CtcTokenizer::Granularity::kWord);

  for (AblationVariant av : plan.variants) {
    const auto t0 = Clock::now();
    AblationRow row;
    row.variant = av;
    std::vector<Prediction> preds;

    if (av == AblationVariant::kNoS2sPretrained || av == AblationVariant::kNoS2sFinetuned) {
      const bool noisy = av == AblationVariant::kNoS2sPretrained;
      const Codebook& lcb = lip_codebook(noisy);
      std::vector<UnitSequence> lu, su;
      for (const auto* u : train) {
        lu.push_back(Assign(lcb, lip_features(u, noisy)));
        su.push_back(target_of(u));
      }
      const std::vector<int32_t> remap = FrequencyRemap(lu, su, lcb.size(), speech_cb.size());
      for (const auto* u : test) {
        const UnitSequence l = Assign(lcb, lip_features(u, noisy));
        Prediction p;
        for (int32_t id : l.ids) {
          p.units.push_back(remap[id]);
          p.units.push_back(remap[id]);
        }
        p.features = Reconstruct(speech_cb, p.units);
        preds.push_back(std::move(p));
      }
    } else {
      const Variant v = av == AblationVariant::kS2sUnits      ? Variant::kUnits
                        : av == AblationVariant::kS2sFeatures ? Variant::kFeatures
                                                              : Variant::kFeaturesCtc;
      ModelConfig mc = plan.model;
      mc.variant = v;
      mc.input_dim = plan.data.task.lip_dim;
      mc.feature_out_dim = plan.data.task.speech_dim;
      mc.unit_vocab = speech_cb.size();
      if (v == Variant::kUnits) mc.lip_unit_vocab = lip_codebook(false).size();
      if (v == Variant::kFeaturesCtc) mc.ctc_vocab = tokenizer.vocab_size();
      TrainConfig tc = plan.train;
      tc.variant = v;
      tc.seed = plan.seed;

      DataSources src;
      src.speech_codebook = &speech_cb;
      src.tokenizer = &tokenizer;
      if (v == Variant::kUnits) src.lip_codebook = &lip_codebook(false);
      TrainData data;
      for (const auto* u : train) {
        data.train.push_back(MakeExample(u->utt_id, u->pair.lip, u->pair.speech,
                                         u->pair.transcript, v, src));
      }
      for (const auto* u : val) {
        data.val.push_back(MakeExample(u->utt_id, u->pair.lip, u->pair.speech, u->pair.transcript,
                                       v, src));
      }
      TrainOptions to;
      to.log = [&](const std::string& m) { Say(log, std::string(AblationVariantName(av)) + ": " + m); };
      TrainResult tr = Train(InitTrainState(mc, tc), data, tc, to);
      row.log = tr.rows;
      const S2SModel& model = tr.state.model;
      for (const auto* u : test) {
        Prediction p;
        if (v == Variant::kUnits) {
          const S2SForwardOutput out = model.Forward(Assign(lip_codebook(false), u->pair.lip));
          p.units = ArgmaxRows(*out.unit_logits);
          p.features = Reconstruct(speech_cb, p.units);
        } else {
          const S2SForwardOutput out = model.Forward(u->pair.lip);
          p.features = *out.decoder_features;
          p.units = Assign(speech_cb, ToSpeechSequence(p.features)).ids;
        }
        preds.push_back(std::move(p));
      }
    }

    // STOI needs about 0.4 s of audible signal and toy units above 5 kHz vanish at
    // the 10 kHz analysis rate, so the test utterances are scored as one
    // concatenated waveform per system.
    double l1 = 0.0;
    long hit = 0, total = 0;
    UnitSequence all_tgt{{}, speech_cb.size(), kSpeechFrameRateHz};
    UnitSequence all_pred{{}, speech_cb.size(), kSpeechFrameRateHz};
    for (size_t i = 0; i < test.size(); ++i) {
      const SyntheticUtterance* u = test[i];
      const UnitSequence& tgt = target_of(u);
      const Prediction& p = preds[i];
      l1 += L1Features(p.features, u->pair.speech);
      for (size_t t = 0; t < tgt.ids.size(); ++t) hit += p.units[t] == tgt.ids[t] ? 1 : 0;
      total += static_cast<long>(tgt.ids.size());
      all_tgt.ids.insert(all_tgt.ids.end(), tgt.ids.begin(), tgt.ids.end());
      all_pred.ids.insert(all_pred.ids.end(), p.units.begin(), p.units.end());
    }
    const Waveform ref = SynthesizeToy(all_tgt, plan.vocoder);
    const Waveform deg = SynthesizeToy(all_pred, plan.vocoder);
    row.stoi = Stoi(ref, deg);
    row.estoi = Estoi(ref, deg);
    const double n = static_cast<double>(test.size());
    row.heldout_l1 = l1 / n;
    row.unit_accuracy = static_cast<double>(hit) / static_cast<double>(total);
    row.seconds = std::chrono::duration<double>(Clock::now() - t0).count();
    Say(log, std::string(AblationVariantName(av)) + ": stoi " + Fixed(row.stoi, 4) + " l1 " +
                 Fixed(row.heldout_l1, 4) + " acc " + Fixed(row.unit_accuracy, 4) + " (" +
                 Fixed(row.seconds, 1) + " s)");
    result.rows.push_back(std::move(row));
  }

  result.footer = {
      "seed=" + std::to_string(plan.seed),
      "task: vocab=" + std::to_string(plan.data.task.vocab_size) +
          " noise_sigma=" + FormatDouble(plan.data.task.noise_sigma) +
          " utterances=" + std::to_string(plan.data.num_utterances) +
          " train=" + std::to_string(result.num_train) + " test=" + std::to_string(result.num_test),
      "mean_predictor_l1=" + Fixed(result.mean_predictor_l1, 4),
      "model: hidden=" + std::to_string(plan.model.hidden_dim) +
          " enc=" + std::to_string(plan.model.num_layers_enc) +
          " dec=" + std::to_string(plan.model.num_layers_dec) +
          " heads=" + std::to_string(plan.model.num_heads),
      "train: steps=" + std::to_string(plan.train.max_steps) +
          " batch=" + std::to_string(plan.train.batch_size) +
          " lr_scale=" + FormatDouble(plan.train.lr_scale),
      "codebooks: speech=" + std::to_string(speech_cb.size()) +
          " lip=" + std::to_string(plan.lip_codebook_size),
      "reconstruction for unit outputs uses speech codebook centroids",
      "stoi/estoi: toy_sine vocoder, predicted vs target units",
  };
  return result;
}

}  // namespace l2s
