#include "doctest.h"

#include <set>

#include "l2s/trainer.h"
#include "test_util.h"

using namespace l2s;

namespace {

ModelConfig SmallModel() {
  ModelConfig c;
  c.num_layers_enc = 1;
  c.num_layers_dec = 1;
  c.hidden_dim = 8;
  c.num_heads = 2;
  c.conv_kernel_sizes = {3, 1};
  c.input_dim = 6;
  c.feature_out_dim = 5;
  c.dropout = 0.1;
  return c;
}

TrainConfig SmallTrain() {
  TrainConfig t;
  t.batch_size = 3;
  t.max_steps = 12;
  t.lr_scale = 0.1;
  t.eval_interval = 4;
  t.seed = 5;
  return t;
}

TrainData SmallData() {
  SyntheticTaskSpec spec;
  spec.vocab_size = 10;
  spec.lip_dim = 6;
  spec.speech_dim = 5;
  spec.noise_sigma = 0.01;
  spec.seed = 2;
  const SyntheticEmbeddings emb = MakeSyntheticEmbeddings(spec);
  TrainData d;
  for (int i = 0; i < 10; ++i) {
    SyntheticPair p = GenerateSyntheticPair(spec, emb, 2 + i % 4, i);
    TrainExample ex;
    ex.utt_id = "u" + std::to_string(i);
    ex.lip = p.lip;
    ex.speech = p.speech;
    ex.speech_units = p.target_units;
    (i < 8 ? d.train : d.val).push_back(std::move(ex));
  }
  return d;
}

void CheckSameParams(const S2SModel& a, const S2SModel& b) {
  REQUIRE(a.params().size() == b.params().size());
  for (size_t i = 0; i < a.params().size(); ++i) CHECK(a.params()[i].value == b.params()[i].value);
}

}  // namespace

TEST_CASE("learning-rate schedule steps down at the milestones") {
  TrainConfig c;
  CHECK(LrAt(0, c) == 4.4e-2);
  CHECK(LrAt(2999, c) == 4.4e-2);
  CHECK(LrAt(3000, c) == 1.32e-2);
  CHECK(LrAt(3999, c) == 1.32e-2);
  CHECK(LrAt(4000, c) == 3.96e-3);
  CHECK(LrAt(5000, c) == 1.188e-3);
  CHECK(LrAt(19999, c) == 1.188e-3);
}

TEST_CASE("effective rate applies lr_scale and the optional warmup") {
  TrainConfig c;
  c.lr_scale = 0.1;
  CHECK(EffectiveLr(0, c) == LrAt(0, c) * 0.1);
  c.warmup_steps = 4;
  CHECK(EffectiveLr(0, c) == doctest::Approx(4.4e-3 / 4));
  CHECK(EffectiveLr(3, c) == doctest::Approx(4.4e-3));
  CHECK(EffectiveLr(3000, c) == doctest::Approx(1.32e-3));
}

TEST_CASE("train config validation, parsing and fingerprint") {
  TrainConfig c = SmallTrain();
  c.Validate();
  const TrainConfig back = TrainConfig::FromKeyValues(ParseKeyValues(c.Serialize()));
  CHECK(back.Serialize() == c.Serialize());
  TrainConfig longer = c;
  longer.max_steps = 99;
  CHECK(longer.Fingerprint() == c.Fingerprint());
  TrainConfig other = c;
  other.lr_scale = 0.2;
  CHECK(other.Fingerprint() != c.Fingerprint());

  TrainConfig bad = c;
  bad.batch_size = 0;
  CHECK_THROWS_AS(bad.Validate(), Error);
  bad = c;
  bad.anneal_steps = {4000, 3000};
  CHECK_THROWS_AS(bad.Validate(), Error);
}

TEST_CASE("unit alignment trims or repeats the last id") {
  const UnitSequence u{{1, 2, 3}, 5};
  CHECK(AlignUnits(u, 2).ids == std::vector<int32_t>{1, 2});
  CHECK(AlignUnits(u, 5).ids == std::vector<int32_t>{1, 2, 3, 3, 3});
  CHECK_THROWS_AS(AlignUnits(UnitSequence{{}, 5}, 2), Error);
}

TEST_CASE("batches are deterministic, cover each epoch once and group lengths") {
  std::vector<int> lengths;
  Rng rng(1);
  for (int i = 0; i < 50; ++i) lengths.push_back(1 + static_cast<int>(rng.Below(40)));
  const int b = 5;
  std::multiset<size_t> seen;
  for (int step = 0; step < 10; ++step) {
    const auto idx = BatchIndices(lengths, b, 7, step);
    CHECK(idx == BatchIndices(lengths, b, 7, step));
    CHECK(idx.size() == 5u);
    seen.insert(idx.begin(), idx.end());
  }
  CHECK(seen.size() == 50u);
  CHECK(std::set<size_t>(seen.begin(), seen.end()).size() == 50u);
  CHECK(BatchIndices(lengths, b, 7, 10) != BatchIndices(lengths, b, 7, 0));
  CHECK(BatchIndices(lengths, b, 8, 0) != BatchIndices(lengths, b, 7, 0));
}

TEST_CASE("identical seeds give bit-identical logs") {
  const TrainData data = SmallData();
  const TrainConfig tc = SmallTrain();
  const TrainResult a = Train(InitTrainState(SmallModel(), tc), data, tc);
  const TrainResult b = Train(InitTrainState(SmallModel(), tc), data, tc);
  REQUIRE(a.rows.size() == 12u);
  std::string la, lb;
  for (const auto& r : a.rows) la += FormatLogRow(r) + "\n";
  for (const auto& r : b.rows) lb += FormatLogRow(r) + "\n";
  CHECK(la == lb);
  CheckSameParams(a.state.model, b.state.model);
  CHECK(a.rows[3].val_loss.has_value());
  CHECK(!a.rows[2].val_loss.has_value());
  CHECK(std::isfinite(a.rows.back().train_loss));
}

TEST_CASE("resume from a checkpoint matches the uninterrupted run") {
  TempDir dir;
  const TrainData data = SmallData();
  const TrainConfig tc = SmallTrain();
  const TrainResult full = Train(InitTrainState(SmallModel(), tc), data, tc);

  TrainOptions first;
  first.stop_step = 5;
  first.out_dir = dir.path();
  const TrainResult part = Train(InitTrainState(SmallModel(), tc), data, tc, first);
  CHECK(part.state.step == 5);
  TrainOptions rest;
  rest.out_dir = dir.path();
  const TrainResult tail = Resume(dir.path() / "last.l2sc", data, SmallModel(), tc, rest);
  CHECK(tail.state.step == 12);
  REQUIRE(tail.rows.size() == 7u);
  for (size_t i = 0; i < tail.rows.size(); ++i) {
    CHECK(FormatLogRow(tail.rows[i]) == FormatLogRow(full.rows[5 + i]));
  }
  CheckSameParams(tail.state.model, full.state.model);
  CHECK(tail.state.best_val == full.state.best_val);

  // train.log holds the header once and every step.
  const std::string log = Slurp(dir.path() / "train.log");
  CHECK(log.rfind(std::string(kTrainLogHeader) + "\n", 0) == 0);
  CHECK(std::count(log.begin(), log.end(), '\n') == 13);
  CHECK(std::filesystem::exists(dir.path() / "best.l2sc"));
}

TEST_CASE("resume rejects a changed config and is a no-op when finished") {
  TempDir dir;
  const TrainData data = SmallData();
  TrainConfig tc = SmallTrain();
  TrainOptions opt;
  opt.out_dir = dir.path();
  Train(InitTrainState(SmallModel(), tc), data, tc, opt);

  TrainConfig changed = tc;
  changed.lr_scale = 0.5;
  try {
    Resume(dir.path() / "last.l2sc", data, SmallModel(), changed);
    FAIL("expected incompatible");
  } catch (const Error& e) {
    CHECK(e.kind() == ErrorKind::kIncompatible);
  }
  ModelConfig wider = SmallModel();
  wider.hidden_dim = 16;
  CHECK_THROWS_AS(Resume(dir.path() / "last.l2sc", data, wider, tc), Error);

  std::vector<std::string> warnings;
  TrainOptions quiet;
  quiet.log = [&](const std::string& m) { warnings.push_back(m); };
  const TrainResult done = Resume(dir.path() / "last.l2sc", data, SmallModel(), tc, quiet);
  CHECK(done.rows.empty());
  CHECK(done.state.step == 12);
  CHECK(!warnings.empty());

  // Extending max_steps continues from the saved step.
  TrainConfig more = tc;
  more.max_steps = 14;
  CHECK(Resume(dir.path() / "last.l2sc", data, SmallModel(), more).rows.size() == 2u);
}

TEST_CASE("init rejects a variant mismatch") {
  TrainConfig tc = SmallTrain();
  tc.variant = Variant::kUnits;
  CHECK_THROWS_AS(InitTrainState(SmallModel(), tc), Error);
}
