#include "l2s/trainer.h"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <fstream>

#include "l2s/checkpoint.h"

namespace l2s {

namespace {

constexpr const char* kTrainPrefix = "train.";

std::string Hex(uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

void RoundToFloat(Eigen::MatrixXd& m) {
  m = m.cast<float>().cast<double>();
}

void RoundToFloat(ParameterSet& ps) {
  for (Tensor& t : ps) RoundToFloat(t.value);
}

LossSpec SpecFor(const TrainExample& ex, const TrainConfig& config) {
  LossSpec spec;
  spec.target_units = &ex.speech_units;
  spec.target_features = &ex.speech;
  spec.ctc_tokens = &ex.ctc_tokens;
  spec.weights = config.weights;
  spec.l1.average_over_dims = config.l1_average_over_dims;
  return spec;
}

double GlobalNorm(const ParameterSet& g) {
  double s = 0.0;
  for (const Tensor& t : g) s += t.value.squaredNorm();
  return std::sqrt(s);
}

}  // namespace

void TrainConfig::Validate() const {
  auto fail = [](const std::string& m) { throw Error(ErrorKind::kConfig, m); };
  if (batch_size < 1) fail("batch_size must be >= 1");
  if (max_steps < 0) fail("max_steps must be >= 0");
  if (!(base_lr > 0.0) || !std::isfinite(base_lr)) fail("base_lr must be > 0");
  if (!(anneal_rate > 0.0 && anneal_rate <= 1.0)) fail("anneal_rate must be in (0, 1]");
  for (size_t i = 1; i < anneal_steps.size(); ++i) {
    if (anneal_steps[i] <= anneal_steps[i - 1]) fail("anneal_steps must be strictly increasing");
  }
  if (!(lr_scale > 0.0) || !std::isfinite(lr_scale)) fail("lr_scale must be > 0");
  if (warmup_steps < 0) fail("warmup_steps must be >= 0");
  if (eval_interval < 1) fail("eval_interval must be >= 1");
  if (!(adam_beta1 >= 0.0 && adam_beta1 < 1.0) || !(adam_beta2 >= 0.0 && adam_beta2 < 1.0)) {
    fail("Adam betas must be in [0, 1)");
  }
  if (!(adam_eps > 0.0)) fail("adam_eps must be > 0");
  weights.Validate();
}

std::string TrainConfig::Serialize() const {
  std::string s;
  auto put = [&](const char* k, const std::string& v) { s += std::string(k) + " = " + v + "\n"; };
  put("batch_size", std::to_string(batch_size));
  put("max_steps", std::to_string(max_steps));
  put("base_lr", FormatDouble(base_lr));
  put("anneal_rate", FormatDouble(anneal_rate));
  put("anneal_steps", FormatIntList(anneal_steps));
  put("alpha_ctc", FormatDouble(weights.alpha_ctc));
  put("alpha_l1", FormatDouble(weights.alpha_l1));
  put("seed", std::to_string(seed));
  put("variant", VariantName(variant));
  put("lr_scale", FormatDouble(lr_scale));
  put("clip_norm", FormatDouble(clip_norm));
  put("warmup_steps", std::to_string(warmup_steps));
  put("eval_interval", std::to_string(eval_interval));
  put("adam_beta1", FormatDouble(adam_beta1));
  put("adam_beta2", FormatDouble(adam_beta2));
  put("adam_eps", FormatDouble(adam_eps));
  put("l1_average_over_dims", l1_average_over_dims ? "true" : "false");
  return s;
}

TrainConfig TrainConfig::FromKeyValues(const KeyValues& kv) {
  TrainConfig c;
  for (const auto& [k, v] : kv) {
    if (k == "batch_size") c.batch_size = ParseInt(k, v);
    else if (k == "max_steps") c.max_steps = ParseInt(k, v);
    else if (k == "base_lr") c.base_lr = ParseDouble(k, v);
    else if (k == "anneal_rate") c.anneal_rate = ParseDouble(k, v);
    else if (k == "anneal_steps") c.anneal_steps = ParseIntList(k, v);
    else if (k == "alpha_ctc") c.weights.alpha_ctc = ParseDouble(k, v);
    else if (k == "alpha_l1") c.weights.alpha_l1 = ParseDouble(k, v);
    else if (k == "seed") c.seed = static_cast<uint64_t>(ParseInt64(k, v));
    else if (k == "variant") c.variant = ParseVariant(v);
    else if (k == "lr_scale") c.lr_scale = ParseDouble(k, v);
    else if (k == "clip_norm") c.clip_norm = ParseDouble(k, v);
    else if (k == "warmup_steps") c.warmup_steps = ParseInt(k, v);
    else if (k == "eval_interval") c.eval_interval = ParseInt(k, v);
    else if (k == "adam_beta1") c.adam_beta1 = ParseDouble(k, v);
    else if (k == "adam_beta2") c.adam_beta2 = ParseDouble(k, v);
    else if (k == "adam_eps") c.adam_eps = ParseDouble(k, v);
    else if (k == "l1_average_over_dims") c.l1_average_over_dims = ParseBool(k, v);
  }
  return c;
}

uint64_t TrainConfig::Fingerprint() const {
  TrainConfig c = *this;
  c.max_steps = 0;
  return Fnv1a64(c.Serialize());
}

double LrAt(int step, const TrainConfig& config) {
  double lr = config.base_lr;
  for (int m : config.anneal_steps) {
    if (m <= step) lr *= config.anneal_rate;
  }
  // Rates are configured in decimal; drop the binary product error so the
  // schedule lands on the decimal values (4.4e-2 * 0.3 == 1.32e-2).
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.15g", lr);
  return std::strtod(buf, nullptr);
}

double EffectiveLr(int step, const TrainConfig& config) {
  double lr = LrAt(step, config) * config.lr_scale;
  if (step < config.warmup_steps) lr *= static_cast<double>(step + 1) / config.warmup_steps;
  return lr;
}

UnitSequence AlignUnits(const UnitSequence& units, int frames) {
  if (units.ids.empty()) throw Error(ErrorKind::kValidation, "cannot align an empty unit sequence");
  UnitSequence out = units;
  if (static_cast<int>(out.ids.size()) > frames) out.ids.resize(frames);
  while (static_cast<int>(out.ids.size()) < frames) out.ids.push_back(out.ids.back());
  return out;
}

std::vector<size_t> BatchIndices(const std::vector<int>& lengths, int batch_size, uint64_t seed,
                                 int step) {
  const size_t n = lengths.size();
  if (n == 0) throw Error(ErrorKind::kConfig, "no training examples");
  const size_t b = std::min<size_t>(static_cast<size_t>(batch_size), n);
  const size_t per_epoch = (n + b - 1) / b;
  const uint64_t epoch = static_cast<uint64_t>(step) / per_epoch;
  const size_t slot = static_cast<size_t>(step) % per_epoch;

  std::vector<size_t> order(n);
  for (size_t i = 0; i < n; ++i) order[i] = i;
  Rng rng(MixSeed(seed, epoch, 0xba7c));
  rng.Shuffle(order);
  const size_t pool = 8 * b;
  for (size_t p = 0; p < n; p += pool) {
    const auto first = order.begin() + static_cast<std::ptrdiff_t>(p);
    const auto last = order.begin() + static_cast<std::ptrdiff_t>(std::min(n, p + pool));
    std::stable_sort(first, last, [&](size_t a, size_t c) { return lengths[a] < lengths[c]; });
  }
  std::vector<size_t> batches(per_epoch);
  for (size_t i = 0; i < per_epoch; ++i) batches[i] = i;
  rng.Shuffle(batches);

  const size_t start = batches[slot] * b;
  return {order.begin() + static_cast<std::ptrdiff_t>(start),
          order.begin() + static_cast<std::ptrdiff_t>(std::min(n, start + b))};
}

TrainState InitTrainState(const ModelConfig& model_config, const TrainConfig& config) {
  model_config.Validate();
  config.Validate();
  if (model_config.variant != config.variant) {
    throw Error(ErrorKind::kConfig, std::string("train variant ") + VariantName(config.variant) +
                                        " differs from model variant " +
                                        VariantName(model_config.variant));
  }
  S2SModel model = S2SModel::Init(model_config, config.seed);
  RoundToFloat(model.mutable_params());
  ParameterSet zeros = model.params().ZerosLike();
  return TrainState{std::move(model), zeros, zeros, 0, 0.0, -1};
}

void SaveTrainState(const TrainState& state, const TrainConfig& config,
                    const std::filesystem::path& path) {
  CheckpointData data;
  data.metadata = ParseKeyValues(state.model.config().Serialize());
  for (const auto& [k, v] : ParseKeyValues(config.Serialize())) data.metadata[kTrainPrefix + k] = v;
  data.metadata["train.step"] = std::to_string(state.step);
  data.metadata["train.best_val"] = FormatDouble(state.best_val);
  data.metadata["train.best_step"] = std::to_string(state.best_step);
  data.metadata["fingerprint.model"] = Hex(state.model.config().Fingerprint());
  data.metadata["fingerprint.train"] = Hex(config.Fingerprint());
  for (const Tensor& t : state.model.params()) data.tensors.push_back(t);
  for (Tensor t : state.adam_m) {
    t.name = "adam.m/" + t.name;
    data.tensors.push_back(std::move(t));
  }
  for (Tensor t : state.adam_v) {
    t.name = "adam.v/" + t.name;
    data.tensors.push_back(std::move(t));
  }
  WriteCheckpointFile(data, path);
}

TrainState LoadTrainState(const std::filesystem::path& path, const ModelConfig& model_config,
                          const TrainConfig& config) {
  CheckpointData data = ReadCheckpointFile(path);
  auto need = [&](const std::string& key) -> const std::string& {
    const auto it = data.metadata.find(key);
    if (it == data.metadata.end()) {
      throw Error(ErrorKind::kSchema, "checkpoint " + path.string() + " lacks key " + key);
    }
    return it->second;
  };
  if (need("fingerprint.model") != Hex(model_config.Fingerprint())) {
    throw Error(ErrorKind::kIncompatible,
                "model config differs from the one the checkpoint was trained with");
  }
  if (need("fingerprint.train") != Hex(config.Fingerprint())) {
    throw Error(ErrorKind::kIncompatible,
                "training config differs from the one the checkpoint was trained with");
  }
  S2SModel model = ModelFromCheckpoint(data);
  ParameterSet m = model.params().ZerosLike();
  ParameterSet v = model.params().ZerosLike();
  size_t found = 0;
  for (const Tensor& t : data.tensors) {
    for (auto [prefix, dst] : {std::pair{"adam.m/", &m}, std::pair{"adam.v/", &v}}) {
      const std::string p(prefix);
      if (t.name.rfind(p, 0) != 0) continue;
      const auto idx = dst->Find(t.name.substr(p.size()));
      if (!idx || (*dst)[*idx].shape != t.shape) {
        throw Error(ErrorKind::kIncompatible, "unexpected optimizer tensor " + t.name);
      }
      (*dst)[*idx].value = t.value;
      ++found;
    }
  }
  if (found != 2 * m.size()) {
    throw Error(ErrorKind::kIncompatible, "checkpoint lacks optimizer state");
  }
  TrainState s{std::move(model), std::move(m), std::move(v), 0, 0.0, -1};
  s.step = ParseInt("train.step", need("train.step"));
  s.best_val = ParseDouble("train.best_val", need("train.best_val"));
  s.best_step = ParseInt("train.best_step", need("train.best_step"));
  return s;
}

std::string FormatLogRow(const LogRow& row) {
  char buf[128];
  std::snprintf(buf, sizeof(buf), "%d\t%.17g\t%.17g\t", row.step, row.lr, row.train_loss);
  std::string s = buf;
  if (row.val_loss) {
    std::snprintf(buf, sizeof(buf), "%.17g", *row.val_loss);
    s += buf;
  } else {
    s += "nan";
  }
  return s;
}

LossBreakdown EvaluateLoss(const S2SModel& model, const std::vector<TrainExample>& examples,
                           const TrainConfig& config) {
  LossBreakdown sum;
  if (examples.empty()) return sum;
  L1Options l1;
  l1.average_over_dims = config.l1_average_over_dims;
  for (const TrainExample& ex : examples) {
    const bool units = model.config().variant == Variant::kUnits;
    const S2SForwardOutput out = units ? model.Forward(ex.lip_units) : model.Forward(ex.lip);
    switch (model.config().variant) {
      case Variant::kUnits: {
        const double ce = CrossEntropyUnits(*out.unit_logits, ex.speech_units);
        sum.cross_entropy += ce;
        sum.total += ce;
        break;
      }
      case Variant::kFeatures: {
        const double v = L1Features(*out.decoder_features, ex.speech, l1);
        sum.l1 += v;
        sum.total += v;
        break;
      }
      case Variant::kFeaturesCtc: {
        const double v = L1Features(*out.decoder_features, ex.speech, l1);
        const double c = CtcLoss(LogSoftmaxRows(*out.ctc_logits), ex.ctc_tokens);
        sum.l1 += v;
        sum.ctc += c;
        sum.total += TotalLoss(v, c, config.weights);
        break;
      }
    }
  }
  const double n = static_cast<double>(examples.size());
  sum.total /= n;
  sum.cross_entropy /= n;
  sum.l1 /= n;
  sum.ctc /= n;
  return sum;
}

TrainResult Train(TrainState state, const TrainData& data, const TrainConfig& config,
                  const TrainOptions& options) {
  config.Validate();
  if (state.model.config().variant != config.variant) {
    throw Error(ErrorKind::kConfig, "train variant differs from the model variant");
  }
  if (data.train.empty()) throw Error(ErrorKind::kConfig, "train split is empty");
  auto say = [&](const std::string& m) {
    if (options.log) options.log(m);
  };

  const int stop = std::min(config.max_steps, options.stop_step.value_or(config.max_steps));
  TrainResult result{std::move(state), {}};
  TrainState& st = result.state;
  if (st.step >= config.max_steps) {
    say("warning: checkpoint is already at max_steps=" + std::to_string(config.max_steps) +
        "; nothing to do");
    return result;
  }

  std::ofstream log_file;
  if (options.out_dir) {
    std::filesystem::create_directories(*options.out_dir);
    const auto log_path = *options.out_dir / "train.log";
    const bool fresh = st.step == 0 || !std::filesystem::exists(log_path);
    log_file.open(log_path, fresh ? std::ios::trunc : std::ios::app);
    if (!log_file) throw Error(ErrorKind::kIo, "cannot open " + log_path.string());
    if (fresh) log_file << kTrainLogHeader << "\n";
  }

  std::vector<int> lengths;
  for (const TrainExample& ex : data.train) lengths.push_back(ex.lip.num_frames());
  const bool units = config.variant == Variant::kUnits;
  ParameterSet grads = st.model.params().ZerosLike();

  while (st.step < stop) {
    const int step = st.step;
    const std::vector<size_t> batch = BatchIndices(lengths, config.batch_size, config.seed, step);
    grads.SetZero();
    Rng drop_rng(MixSeed(config.seed, static_cast<uint64_t>(step), 0xd40));
    DropoutContext drop{st.model.config().dropout, &drop_rng};
    const DropoutContext* dp = drop.rate > 0.0 ? &drop : nullptr;
    const double scale = 1.0 / static_cast<double>(batch.size());
    double batch_loss = 0.0;
    try {
      for (size_t i : batch) {
        const TrainExample& ex = data.train[i];
        const LossSpec spec = SpecFor(ex, config);
        batch_loss += st.model
                          .AccumulateGrad(units ? nullptr : &ex.lip, units ? &ex.lip_units : nullptr,
                                          spec, dp, grads, scale)
                          .total;
      }
    } catch (const Error& e) {
      if (e.kind() != ErrorKind::kNumeric) throw;
      throw Error(ErrorKind::kNumeric, "step " + std::to_string(step + 1) + ": " + e.what());
    }
    batch_loss *= scale;

    const double norm = GlobalNorm(grads);
    if (!std::isfinite(norm)) {
      throw Error(ErrorKind::kNumeric,
                  "step " + std::to_string(step + 1) + ": gradient norm is not finite");
    }
    const double clip = config.clip_norm > 0.0 && norm > config.clip_norm ? config.clip_norm / norm
                                                                          : 1.0;
    const double lr = EffectiveLr(step, config);
    const int t = step + 1;
    const double bc1 = 1.0 - std::pow(config.adam_beta1, t);
    const double bc2 = 1.0 - std::pow(config.adam_beta2, t);
    ParameterSet& params = st.model.mutable_params();
    for (size_t k = 0; k < params.size(); ++k) {
      const Eigen::ArrayXXd g = grads[k].value.array() * clip;
      Eigen::MatrixXd& m = st.adam_m[k].value;
      Eigen::MatrixXd& v = st.adam_v[k].value;
      m = (config.adam_beta1 * m.array() + (1.0 - config.adam_beta1) * g).matrix();
      v = (config.adam_beta2 * v.array() + (1.0 - config.adam_beta2) * g.square()).matrix();
      RoundToFloat(m);
      RoundToFloat(v);
      params[k].value.array() -=
          lr * (m.array() / bc1) / ((v.array() / bc2).sqrt() + config.adam_eps);
      RoundToFloat(params[k].value);
    }
    if (!params.AllFinite()) {
      throw Error(ErrorKind::kNumeric, "step " + std::to_string(t) + ": parameters not finite");
    }
    st.step = t;

    LogRow row{t, lr, batch_loss, std::nullopt};
    if (!data.val.empty() && (t % config.eval_interval == 0 || t == config.max_steps)) {
      const double val = EvaluateLoss(st.model, data.val, config).total;
      row.val_loss = val;
      say("step " + std::to_string(t) + " train " + FormatDouble(batch_loss) + " val " +
          FormatDouble(val));
      if (st.best_step < 0 || val < st.best_val) {
        st.best_val = val;
        st.best_step = t;
        if (options.out_dir) {
          SaveModel(st.model, *options.out_dir / "best.l2sc", {{"train.step", std::to_string(t)}});
        }
      }
    }
    if (log_file.is_open()) log_file << FormatLogRow(row) << "\n";
    result.rows.push_back(row);
  }
  if (options.out_dir) SaveTrainState(st, config, *options.out_dir / "last.l2sc");
  return result;
}

TrainResult Resume(const std::filesystem::path& checkpoint, const TrainData& data,
                   const ModelConfig& model_config, const TrainConfig& config,
                   const TrainOptions& options) {
  TrainState st = LoadTrainState(checkpoint, model_config, config);
  return Train(std::move(st), data, config, options);
}

}  // namespace l2s
