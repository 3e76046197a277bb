// l2s: command-line driver for the lip-to-speech toolkit.
//
//   l2s [--config PATH] [--seed N] [--out DIR] <command> [options]
//
// Exit codes: 0 ok, 2 validation / data failure, 3 numeric failure,
// 4 configuration or compatibility error.

#include <CLI11.hpp>

#include <algorithm>
#include <cstdio>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>

#include "l2s/checkpoint.h"
#include "l2s/config_file.h"
#include "l2s/featureio.h"
#include "l2s/pipeline.h"
#include "l2s/quantizer.h"
#include "l2s/trainer.h"
#include "l2s/vocoder.h"

namespace {

namespace fs = std::filesystem;
using namespace l2s;

struct Globals {
  std::string config_path;
  std::optional<long long> seed;
  std::string out = "out";
};

KeyValues LoadConfig(const Globals& g) {
  KeyValues kv = g.config_path.empty() ? KeyValues{} : ReadKeyValueFile(g.config_path);
  if (g.seed) kv["seed"] = std::to_string(*g.seed);
  return kv;
}

uint64_t SeedOf(const KeyValues& kv) {
  const auto it = kv.find("seed");
  return it == kv.end() ? 0 : static_cast<uint64_t>(ParseInt64("seed", it->second));
}

std::string Get(const KeyValues& kv, const std::string& key, const std::string& fallback) {
  const auto it = kv.find(key);
  return it == kv.end() ? fallback : it->second;
}

void WriteText(const fs::path& path, const std::string& text) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream f(path, std::ios::binary);
  if (!f) throw Error(ErrorKind::kIo, "cannot write " + path.string());
  f << text;
}

void Log(const std::string& m) { std::cerr << m << "\n"; }

int ExitCodeFor(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::kNumeric:
      return 3;
    case ErrorKind::kConfig:
    case ErrorKind::kIncompatible:
      return 4;
    default:
      return 2;
  }
}

std::optional<Split> SplitOption(const std::string& s) {
  if (s.empty() || s == "all") return std::nullopt;
  const auto sp = ParseSplit(s);
  if (!sp) throw Error(ErrorKind::kConfig, "unknown split '" + s + "'");
  return sp;
}

VocoderSpec VocoderFromConfig(const KeyValues& kv) {
  VocoderSpec v;
  for (const auto& [k, val] : kv) {
    if (k == "vocoder") v.kind = ParseVocoderKind(val);
    else if (k == "samples_per_unit") v.samples_per_unit = ParseInt(k, val);
    else if (k == "vocoder_unit_vocab") v.unit_vocab = ParseInt(k, val);
    else if (k == "base_freq_hz") v.base_freq_hz = ParseDouble(k, val);
    else if (k == "freq_step_hz") v.freq_step_hz = ParseDouble(k, val);
  }
  return v;
}

std::string Footer(const Globals& g, const KeyValues& kv) {
  std::string flat;
  for (const auto& [k, v] : kv) flat += k + "=" + v + "\n";
  char fp[17];
  std::snprintf(fp, sizeof(fp), "%016llx", static_cast<unsigned long long>(Fnv1a64(flat)));
  return "# seed=" + std::to_string(SeedOf(kv)) + "\n# config=" +
         (g.config_path.empty() ? std::string("(defaults)") : g.config_path) +
         "\n# config_fingerprint=" + fp + "\n";
}

SyntheticDatasetSpec DatasetFromConfig(const KeyValues& kv) {
  SyntheticDatasetSpec d;
  d.task.seed = SeedOf(kv);
  for (const auto& [k, v] : kv) {
    if (k == "vocab_size") d.task.vocab_size = ParseInt(k, v);
    else if (k == "lip_dim") d.task.lip_dim = ParseInt(k, v);
    else if (k == "speech_dim") d.task.speech_dim = ParseInt(k, v);
    else if (k == "noise_sigma") d.task.noise_sigma = ParseDouble(k, v);
    else if (k == "num_utterances") d.num_utterances = ParseInt(k, v);
    else if (k == "min_symbols") d.min_symbols = ParseInt(k, v);
    else if (k == "max_symbols") d.max_symbols = ParseInt(k, v);
  }
  return d;
}

// ---------------------------------------------------------------------------

int CmdPrepare(const Globals& g, const std::string& manifest) {
  const KeyValues kv = LoadConfig(g);
  const PrepReport r = PrepareDataset(manifest, PrepConfig::FromKeyValues(kv), SeedOf(kv), g.out);
  std::cout << r.num_utterances << " utterances, " << r.num_invalid() << " invalid"
            << (r.splits_assigned ? ", splits assigned" : "") << "\n";
  return r.violations.empty() ? 0 : 2;
}

int CmdFitKmeans(const Globals& g, const std::string& manifest, const std::string& kind, int k,
                 const std::string& split, int max_iters) {
  const KeyValues kv = LoadConfig(g);
  const FeatureKind fk = kind == "lip" ? FeatureKind::kLip : FeatureKind::kSpeech;
  if (kind != "lip" && kind != "speech") throw Error(ErrorKind::kConfig, "--kind is lip or speech");
  ManifestOptions mo;
  mo.require_split = false;
  const Manifest m = LoadManifest(manifest, mo);
  const auto sp = SplitOption(split);
  std::vector<FeatureSequence> seqs;
  for (const auto& r : m.records) {
    if (sp && r.split != sp) continue;
    seqs.push_back(ReadFeatures(fk == FeatureKind::kLip ? r.lip_feature_path : r.speech_feature_path, fk));
  }
  KMeansOptions o;
  o.k = k;
  o.seed = SeedOf(kv);
  o.max_iters = max_iters;
  const Codebook cb = FitKMeans(StackFrames(seqs), o, fk);
  const fs::path out = fs::path(g.out) / (kind + "_codebook.l2sf");
  fs::create_directories(g.out);
  SaveCodebook(cb, out);
  std::string report = "iteration\tinertia\n";
  for (size_t i = 0; i < cb.fit.inertia_history.size(); ++i) {
    report += std::to_string(i + 1) + "\t" + FormatDouble(cb.fit.inertia_history[i]) + "\n";
  }
  WriteText(fs::path(g.out) / (kind + "_codebook_fit.tsv"), report + Footer(g, kv));
  std::cout << out.string() << " k=" << cb.size() << " inertia=" << FormatDouble(cb.fit.inertia)
            << "\n";
  return 0;
}

struct TrainArgs {
  std::string manifest;
  std::string speech_codebook;
  std::string lip_codebook;
  std::string resume;
  int stop_step = -1;
};

int CmdTrain(const Globals& g, const TrainArgs& a) {
  const KeyValues kv = LoadConfig(g);
  TrainConfig tc = TrainConfig::FromKeyValues(kv);
  ModelConfig mc = ModelConfig::FromKeyValues(kv);
  mc.variant = tc.variant;

  std::optional<Codebook> scb, lcb;
  std::optional<CtcTokenizer> tok;
  if (!a.speech_codebook.empty()) {
    scb = LoadCodebook(a.speech_codebook);
    mc.unit_vocab = scb->size();
  }
  if (!a.lip_codebook.empty()) {
    lcb = LoadCodebook(a.lip_codebook);
    mc.lip_unit_vocab = lcb->size();
  }
  const Manifest manifest = LoadManifest(a.manifest);
  if (tc.variant == Variant::kFeaturesCtc) {
    std::vector<std::string> texts;
    for (const auto& r : manifest.records) {
      if (r.split == Split::kTrain) texts.push_back(r.transcript);
    }
    const auto gran = Get(kv, "ctc_granularity", "char") == "word"
                          ? CtcTokenizer::Granularity::kWord
                          : CtcTokenizer::Granularity::kCharacter;
    tok = CtcTokenizer::Build(texts, gran);
    mc.ctc_vocab = tok->vocab_size();
    WriteText(fs::path(g.out) / "tokenizer.txt", tok->Serialize() + "\n");
  }
  DataSources src;
  src.speech_codebook = scb ? &*scb : nullptr;
  src.lip_codebook = lcb ? &*lcb : nullptr;
  src.tokenizer = tok ? &*tok : nullptr;
  const TrainData data = LoadTrainData(manifest, tc.variant, src);

  TrainOptions to;
  to.out_dir = fs::path(g.out);
  to.log = Log;
  if (a.stop_step >= 0) to.stop_step = a.stop_step;
  const TrainResult r = a.resume.empty() ? Train(InitTrainState(mc, tc), data, tc, to)
                                         : Resume(a.resume, data, mc, tc, to);
  std::cout << "step " << r.state.step << (r.rows.empty() ? "" : " loss " + FormatDouble(r.rows.back().train_loss))
            << "\n";
  return 0;
}

struct InferArgs {
  std::string checkpoint;
  std::string manifest;
  std::string mode = "features_then_quantize";
  std::string speech_codebook;
  std::string lip_codebook;
  std::string split = "test";
  bool oracle = false;
};

int CmdInfer(const Globals& g, const InferArgs& a) {
  ManifestOptions mo;
  mo.require_split = false;
  const Manifest m = LoadManifest(a.manifest, mo);
  const auto sp = SplitOption(a.split);
  std::optional<Codebook> scb, lcb;
  if (!a.speech_codebook.empty()) scb = LoadCodebook(a.speech_codebook);
  if (!a.lip_codebook.empty()) lcb = LoadCodebook(a.lip_codebook);
  std::optional<S2SModel> model;
  if (!a.oracle) model = LoadModel(a.checkpoint);
  const InferMode mode = ParseInferMode(a.mode);
  if (a.oracle && !scb) throw Error(ErrorKind::kConfig, "--oracle needs --speech-codebook");
  size_t n = 0;
  for (const auto& r : m.records) {
    if (sp && r.split != sp) continue;
    UnitSequence units;
    if (a.oracle) {
      const FeatureSequence lip = ReadFeatures(r.lip_feature_path, FeatureKind::kLip);
      units = AlignUnits(Assign(*scb, ReadFeatures(r.speech_feature_path, FeatureKind::kSpeech)),
                         2 * lip.num_frames());
    } else {
      const InferResult ir = Infer(*model, ReadFeatures(r.lip_feature_path, FeatureKind::kLip), mode,
                                   scb ? &*scb : nullptr, lcb ? &*lcb : nullptr);
      units = ir.units;
      if (ir.features) WriteFeatures(*ir.features, fs::path(g.out) / "features" / (r.utt_id + ".l2sf"));
    }
    const fs::path up = fs::path(g.out) / "units" / (r.utt_id + ".units");
    fs::create_directories(up.parent_path());
    WriteUnits(units, up);
    ++n;
  }
  std::cout << n << " utterances\n";
  return 0;
}

int CmdSynthesize(const Globals& g, const std::string& units_dir) {
  const KeyValues kv = LoadConfig(g);
  const VocoderSpec spec = VocoderFromConfig(kv);
  std::vector<fs::path> files;
  for (const auto& e : fs::directory_iterator(units_dir)) {
    if (e.path().extension() == ".units") files.push_back(e.path());
  }
  std::sort(files.begin(), files.end());
  fs::create_directories(g.out);
  for (const fs::path& f : files) {
    const UnitSequence u = ReadUnits(f, spec.unit_vocab);
    const std::string stem = f.stem().string();
    SynthesizeToFile(u, spec, fs::path(g.out) / (stem + (spec.kind == VocoderKind::kToySine ? ".wav" : ".units")));
  }
  std::cout << files.size() << " files (" << VocoderKindName(spec.kind) << ")\n";
  return 0;
}

int CmdEvaluate(const Globals& g, EvaluateInputs in, const std::string& split) {
  const KeyValues kv = LoadConfig(g);
  in.split = SplitOption(split);
  const MetricReport r = Evaluate(in);
  std::string footer = Footer(g, kv);
  WriteText(fs::path(g.out) / "metrics.tsv", r.ToTsv() + footer);
  const std::string table = r.ToTable("L2S");
  WriteText(fs::path(g.out) / "metrics.txt", table);
  std::cout << table;
  return 0;
}

int CmdAblate(const Globals& g, const std::string& variants) {
  const KeyValues kv = LoadConfig(g);
  AblationPlan plan;
  plan.seed = SeedOf(kv);
  plan.data = DatasetFromConfig(kv);
  plan.model = ModelConfig::FromKeyValues(kv);
  plan.train = TrainConfig::FromKeyValues(kv);
  plan.vocoder = VocoderFromConfig(kv);
  plan.vocoder.unit_vocab = plan.data.task.vocab_size;
  for (const auto& [k, v] : kv) {
    if (k == "lip_codebook_size") plan.lip_codebook_size = ParseInt(k, v);
    else if (k == "kmeans_max_iters") plan.kmeans_max_iters = ParseInt(k, v);
    else if (k == "pretrained_noise_sigma") plan.pretrained_noise_sigma = ParseDouble(k, v);
  }
  if (!variants.empty()) {
    plan.variants.clear();
    std::stringstream ss(variants);
    std::string item;
    while (std::getline(ss, item, ',')) plan.variants.push_back(ParseAblationVariant(item));
  }
  const AblationResult r = RunAblation(plan, Log);
  const fs::path out(g.out);
  WriteText(out / "ablation.tsv", r.ToTsv() + Footer(g, kv));
  for (const AblationRow& row : r.rows) {
    if (row.log.empty()) continue;
    std::string s = std::string(kTrainLogHeader) + "\n";
    for (const LogRow& lr : row.log) s += FormatLogRow(lr) + "\n";
    WriteText(out / (std::string("train_") + AblationVariantName(row.variant) + ".log"), s);
  }
  std::cout << r.ToTsv();
  return 0;
}

int CmdSynthData(const Globals& g) {
  const KeyValues kv = LoadConfig(g);
  WriteSyntheticDataset(DatasetFromConfig(kv), g.out);
  std::cout << (fs::path(g.out) / "manifest.tsv").string() << "\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Lip-to-speech toolkit"};
  app.require_subcommand(1);
  Globals g;
  app.add_option("--config", g.config_path, "key = value config file");
  app.add_option("--seed", g.seed, "overrides the config seed");
  app.add_option("--out", g.out, "output directory")->capture_default_str();

  std::string manifest, kind = "speech", split = "train", variants, units_dir;
  int k = 100, max_iters = 100;
  TrainArgs ta;
  InferArgs ia;
  EvaluateInputs ev;
  std::string ref_dir, syn_dir, hyp_dir, eval_split = "test";

  auto* prepare = app.add_subcommand("prepare", "check feature files and assign splits");
  prepare->add_option("--manifest", manifest)->required();

  auto* fit = app.add_subcommand("fit-kmeans", "fit a k-means codebook");
  fit->add_option("--manifest", manifest)->required();
  fit->add_option("--kind", kind, "lip or speech")->capture_default_str();
  fit->add_option("--k", k)->capture_default_str();
  fit->add_option("--split", split, "train, val, test or all")->capture_default_str();
  fit->add_option("--max-iters", max_iters)->capture_default_str();

  auto* train = app.add_subcommand("train", "train the sequence model");
  train->add_option("--manifest", ta.manifest)->required();
  train->add_option("--speech-codebook", ta.speech_codebook);
  train->add_option("--lip-codebook", ta.lip_codebook);
  train->add_option("--resume", ta.resume, "checkpoint written by a previous run");
  train->add_option("--stop-step", ta.stop_step);

  auto* infer = app.add_subcommand("infer", "predict speech units from lip features");
  infer->add_option("--checkpoint", ia.checkpoint);
  infer->add_option("--manifest", ia.manifest)->required();
  infer->add_option("--mode", ia.mode, "features_then_quantize or units_direct")->capture_default_str();
  infer->add_option("--speech-codebook", ia.speech_codebook);
  infer->add_option("--lip-codebook", ia.lip_codebook);
  infer->add_option("--split", ia.split)->capture_default_str();
  infer->add_flag("--oracle", ia.oracle, "quantize ground-truth speech features instead");

  auto* synth = app.add_subcommand("synthesize", "turn unit files into waveforms");
  synth->add_option("--units-dir", units_dir)->required();

  auto* evaluate = app.add_subcommand("evaluate", "STOI / ESTOI / WER report");
  evaluate->add_option("--manifest", ev.manifest)->required();
  evaluate->add_option("--ref-dir", ref_dir)->required();
  evaluate->add_option("--synth-dir", syn_dir)->required();
  evaluate->add_option("--hyp-dir", hyp_dir);
  evaluate->add_option("--split", eval_split)->capture_default_str();
  evaluate->add_option("--asr-label", ev.asr_label)->capture_default_str();

  auto* ablate = app.add_subcommand("ablate", "variant ablation on the synthetic task");
  ablate->add_option("--variants", variants, "comma separated subset");

  auto* synth_data = app.add_subcommand("synth-data", "write the synthetic dataset");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 4;
  }

  try {
    if (*prepare) return CmdPrepare(g, manifest);
    if (*fit) return CmdFitKmeans(g, manifest, kind, k, split, max_iters);
    if (*train) return CmdTrain(g, ta);
    if (*infer) return CmdInfer(g, ia);
    if (*synth) return CmdSynthesize(g, units_dir);
    if (*evaluate) {
      ev.reference_dir = ref_dir;
      ev.synth_dir = syn_dir;
      if (!hyp_dir.empty()) ev.hypothesis_dir = fs::path(hyp_dir);
      return CmdEvaluate(g, ev, eval_split);
    }
    if (*ablate) return CmdAblate(g, variants);
    if (*synth_data) return CmdSynthData(g);
  } catch (const Error& e) {
    std::cerr << "l2s: " << e.what() << "\n";
    return ExitCodeFor(e.kind());
  } catch (const std::exception& e) {
    std::cerr << "l2s: " << e.what() << "\n";
    return 2;
  }
  return 0;
}
