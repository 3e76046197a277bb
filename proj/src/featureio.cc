#include "l2s/featureio.h"

#include <algorithm>
#include <bit>
#include <cmath>
#include <fstream>
#include <iterator>
#include <set>
#include <sstream>

#include "l2s/common.h"

namespace l2s {

const char* FeatureKindName(FeatureKind kind) {
  return kind == FeatureKind::kLip ? "lip" : "speech";
}

void FeatureSequence::Validate() const {
  if (frames.rows() < 1 || frames.cols() < 1) {
    throw Error(ErrorKind::kValidation, "feature sequence must have T >= 1 and D >= 1");
  }
  if (!frames.allFinite()) {
    throw Error(ErrorKind::kValidation, "feature sequence contains non-finite values");
  }
  if (frame_rate_hz == 0) throw Error(ErrorKind::kValidation, "frame rate must be positive");
}

void UnitSequence::Validate() const {
  if (codebook_size <= 0) throw Error(ErrorKind::kValidation, "codebook size must be positive");
  for (size_t t = 0; t < ids.size(); ++t) {
    if (ids[t] < 0 || ids[t] >= codebook_size) {
      throw Error(ErrorKind::kValidation, "unit id " + std::to_string(ids[t]) + " at frame " +
                                              std::to_string(t) + " outside [0, " +
                                              std::to_string(codebook_size) + ")");
    }
  }
}

void Waveform::Validate() const {
  if (sample_rate_hz == 0) throw Error(ErrorKind::kValidation, "sample rate must be positive");
  for (double s : samples) {
    if (!std::isfinite(s)) throw Error(ErrorKind::kValidation, "waveform has non-finite samples");
  }
}

// ---------------------------------------------------------------------------

namespace {

void PutU32(std::string& out, uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

void PutU16(std::string& out, uint16_t v) {
  out.push_back(static_cast<char>(v & 0xff));
  out.push_back(static_cast<char>(v >> 8));
}

uint32_t GetU32(const std::vector<char>& bytes, size_t offset) {
  uint32_t v = 0;
  for (int i = 0; i < 4; ++i) {
    v |= static_cast<uint32_t>(static_cast<unsigned char>(bytes[offset + i])) << (8 * i);
  }
  return v;
}

uint16_t GetU16(const std::vector<char>& bytes, size_t offset) {
  return static_cast<uint16_t>(static_cast<unsigned char>(bytes[offset]) |
                               (static_cast<unsigned char>(bytes[offset + 1]) << 8));
}

std::vector<char> Slurp(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorKind::kIo, "cannot open " + path.string());
  return std::vector<char>(std::istreambuf_iterator<char>(in), {});
}

void Dump(const fs::path& path, const std::string& bytes) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error(ErrorKind::kIo, "cannot open for write " + path.string());
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw Error(ErrorKind::kIo, "write failed for " + path.string());
}

std::string FormatAt(size_t offset, const std::string& what) {
  return what + " at byte " + std::to_string(offset);
}

}  // namespace

void WriteContainer(const fs::path& path, const ContainerHeader& header,
                    const FeatureMatrix& payload) {
  if (header.version == 2 && !header.kind_code) {
    throw Error(ErrorKind::kFormat, "version 2 container requires a kind code");
  }
  std::string out;
  out.reserve(24 + payload.size() * 4);
  out.append(kFeatureMagic.data(), kFeatureMagic.size());
  PutU32(out, header.version);
  PutU32(out, header.frame_rate_hz);
  PutU32(out, static_cast<uint32_t>(payload.rows()));
  PutU32(out, static_cast<uint32_t>(payload.cols()));
  if (header.version == 2) PutU32(out, *header.kind_code);
  for (Eigen::Index i = 0; i < payload.size(); ++i) {
    PutU32(out, std::bit_cast<uint32_t>(payload.data()[i]));
  }
  Dump(path, out);
}

Container ParseContainer(const std::vector<char>& bytes) {
  if (bytes.size() < 4 || !std::equal(kFeatureMagic.begin(), kFeatureMagic.end(), bytes.begin())) {
    throw Error(ErrorKind::kFormat, FormatAt(0, "bad magic (expected \"L2SF\")"));
  }
  if (bytes.size() < 20) throw Error(ErrorKind::kTruncated, FormatAt(bytes.size(), "header ends"));
  Container c;
  c.header.version = GetU32(bytes, 4);
  if (c.header.version != 1 && c.header.version != 2) {
    throw Error(ErrorKind::kFormat,
                FormatAt(4, "unsupported version " + std::to_string(c.header.version)));
  }
  c.header.frame_rate_hz = GetU32(bytes, 8);
  c.header.rows = GetU32(bytes, 12);
  c.header.cols = GetU32(bytes, 16);
  if (c.header.rows == 0) throw Error(ErrorKind::kFormat, FormatAt(12, "zero row count"));
  if (c.header.cols == 0) throw Error(ErrorKind::kFormat, FormatAt(16, "zero column count"));
  size_t offset = 20;
  if (c.header.version == 2) {
    if (bytes.size() < 24) throw Error(ErrorKind::kTruncated, FormatAt(bytes.size(), "header ends"));
    c.header.kind_code = GetU32(bytes, 20);
    offset = 24;
  }
  const uint64_t count = static_cast<uint64_t>(c.header.rows) * c.header.cols;
  const uint64_t needed = offset + count * 4;
  if (bytes.size() < needed) {
    throw Error(ErrorKind::kTruncated,
                FormatAt(bytes.size(), "payload ends early (declared " +
                                           std::to_string(c.header.rows) + "x" +
                                           std::to_string(c.header.cols) + " needs " +
                                           std::to_string(needed) + " bytes)"));
  }
  if (bytes.size() > needed) {
    throw Error(ErrorKind::kFormat, FormatAt(needed, "trailing bytes after payload"));
  }
  c.payload.resize(c.header.rows, c.header.cols);
  for (uint64_t i = 0; i < count; ++i) {
    c.payload.data()[i] = std::bit_cast<float>(GetU32(bytes, offset + 4 * i));
  }
  return c;
}

Container ReadContainer(const fs::path& path) { return ParseContainer(Slurp(path)); }

void WriteFeatures(const FeatureSequence& seq, const fs::path& path) {
  seq.Validate();
  ContainerHeader h;
  h.version = 1;
  h.frame_rate_hz = seq.frame_rate_hz;
  WriteContainer(path, h, seq.frames);
}

FeatureSequence ReadFeatures(const fs::path& path) {
  Container c = ReadContainer(path);
  const FeatureKind kind =
      c.header.frame_rate_hz == kLipFrameRateHz ? FeatureKind::kLip : FeatureKind::kSpeech;
  FeatureSequence seq{std::move(c.payload), c.header.frame_rate_hz, kind};
  seq.Validate();
  return seq;
}

FeatureSequence ReadFeatures(const fs::path& path, FeatureKind kind) {
  FeatureSequence seq = ReadFeatures(path);
  seq.kind = kind;
  return seq;
}

// ---------------------------------------------------------------------------

void WriteUnits(const UnitSequence& units, const fs::path& path) {
  units.Validate();
  std::string out;
  for (size_t i = 0; i < units.ids.size(); ++i) {
    if (i) out.push_back(' ');
    out += std::to_string(units.ids[i]);
  }
  out.push_back('\n');
  Dump(path, out);
}

UnitSequence ReadUnits(const fs::path& path, int32_t codebook_size, uint32_t frame_rate_hz) {
  const std::vector<char> bytes = Slurp(path);
  std::istringstream in(std::string(bytes.begin(), bytes.end()));
  UnitSequence units;
  units.codebook_size = codebook_size;
  units.frame_rate_hz = frame_rate_hz;
  std::string token;
  while (in >> token) {
    size_t used = 0;
    long value = 0;
    try {
      value = std::stol(token, &used);
    } catch (const std::exception&) {
      used = 0;
    }
    if (used != token.size()) {
      throw Error(ErrorKind::kFormat, "non-integer token '" + token + "' in " + path.string());
    }
    units.ids.push_back(static_cast<int32_t>(value));
  }
  units.Validate();
  return units;
}

// ---------------------------------------------------------------------------

void WriteWav(const Waveform& wave, const fs::path& path) {
  wave.Validate();
  const uint32_t data_bytes = static_cast<uint32_t>(wave.samples.size() * 2);
  std::string out;
  out.reserve(44 + data_bytes);
  out += "RIFF";
  PutU32(out, 36 + data_bytes);
  out += "WAVEfmt ";
  PutU32(out, 16);
  PutU16(out, 1);  // PCM
  PutU16(out, 1);  // mono
  PutU32(out, wave.sample_rate_hz);
  PutU32(out, wave.sample_rate_hz * 2);
  PutU16(out, 2);
  PutU16(out, 16);
  out += "data";
  PutU32(out, data_bytes);
  for (double s : wave.samples) {
    const double clipped = std::clamp(s, -1.0, 1.0);
    const auto q = static_cast<int16_t>(std::lround(clipped * 32767.0));
    PutU16(out, static_cast<uint16_t>(q));
  }
  Dump(path, out);
}

Waveform ReadWav(const fs::path& path) {
  const std::vector<char> bytes = Slurp(path);
  auto tag = [&](size_t off, const char* t) {
    return bytes.size() >= off + 4 && std::equal(t, t + 4, bytes.begin() + off);
  };
  if (!tag(0, "RIFF") || !tag(8, "WAVE")) {
    throw Error(ErrorKind::kFormat, FormatAt(0, "not a RIFF/WAVE file: " + path.string()));
  }
  Waveform wave;
  bool have_fmt = false;
  size_t off = 12;
  while (off + 8 <= bytes.size()) {
    const uint32_t size = GetU32(bytes, off + 4);
    const size_t body = off + 8;
    if (body + size > bytes.size()) {
      throw Error(ErrorKind::kTruncated, FormatAt(bytes.size(), "WAV chunk ends early"));
    }
    if (tag(off, "fmt ")) {
      if (size < 16) throw Error(ErrorKind::kFormat, FormatAt(off, "short fmt chunk"));
      const uint16_t format = GetU16(bytes, body);
      const uint16_t channels = GetU16(bytes, body + 2);
      const uint16_t bits = GetU16(bytes, body + 14);
      if (format != 1 || channels != 1 || bits != 16) {
        throw Error(ErrorKind::kFormat, FormatAt(body, "only 16-bit PCM mono is supported"));
      }
      wave.sample_rate_hz = GetU32(bytes, body + 4);
      have_fmt = true;
    } else if (tag(off, "data")) {
      if (!have_fmt) throw Error(ErrorKind::kFormat, FormatAt(off, "data chunk before fmt"));
      wave.samples.resize(size / 2);
      for (size_t i = 0; i < wave.samples.size(); ++i) {
        const auto v = static_cast<int16_t>(GetU16(bytes, body + 2 * i));
        wave.samples[i] = v / 32767.0;
      }
      return wave;
    }
    off = body + size + (size & 1);
  }
  throw Error(ErrorKind::kFormat, FormatAt(off, "no data chunk in " + path.string()));
}

// ---------------------------------------------------------------------------

const char* SplitName(Split split) {
  switch (split) {
    case Split::kTrain: return "train";
    case Split::kVal: return "val";
    case Split::kTest: return "test";
  }
  return "?";
}

std::optional<Split> ParseSplit(std::string_view text) {
  if (text == "train") return Split::kTrain;
  if (text == "val") return Split::kVal;
  if (text == "test") return Split::kTest;
  return std::nullopt;
}

void UtteranceRecord::Resolve() const {
  for (const fs::path& p : {lip_feature_path, speech_feature_path}) {
    if (!fs::exists(p)) {
      throw Error(ErrorKind::kIo, "utterance " + utt_id + " references missing file " + p.string());
    }
  }
}

std::vector<UtteranceRecord> Manifest::BySplit(Split split) const {
  std::vector<UtteranceRecord> out;
  for (const auto& r : records) {
    if (r.split == split) out.push_back(r);
  }
  return out;
}

namespace {

std::vector<std::string> SplitTabs(const std::string& line) {
  std::vector<std::string> cols;
  size_t start = 0;
  while (true) {
    const size_t tab = line.find('\t', start);
    cols.push_back(line.substr(start, tab - start));
    if (tab == std::string::npos) break;
    start = tab + 1;
  }
  return cols;
}

}  // namespace

Manifest LoadManifest(const fs::path& path, const ManifestOptions& options) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorKind::kIo, "cannot open manifest " + path.string());
  std::string header;
  if (!std::getline(in, header) || header.empty()) {
    throw Error(ErrorKind::kSchema, "manifest " + path.string() + " has no header");
  }
  if (!header.empty() && header.back() == '\r') header.pop_back();

  static const std::vector<std::string> kColumns = {"utt_id", "lip_feat", "speech_feat",
                                                    "transcript", "split"};
  const std::vector<std::string> cols = SplitTabs(header);
  Manifest manifest;
  if (cols == kColumns) {
    manifest.has_split_column = true;
  } else if (!options.require_split &&
             cols == std::vector<std::string>(kColumns.begin(), kColumns.end() - 1)) {
    manifest.has_split_column = false;
  } else {
    for (const auto& want : kColumns) {
      if (std::find(cols.begin(), cols.end(), want) == cols.end()) {
        throw Error(ErrorKind::kSchema, "manifest " + path.string() + " missing column '" + want + "'");
      }
    }
    throw Error(ErrorKind::kSchema, "manifest header must be exactly: " + std::string(kManifestHeader));
  }

  const fs::path base = path.parent_path();
  std::set<std::string> seen;
  std::string line;
  size_t line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty() || line[0] == '#') continue;
    const std::vector<std::string> f = SplitTabs(line);
    if (f.size() != cols.size()) {
      throw Error(ErrorKind::kSchema, "manifest line " + std::to_string(line_no) + " has " +
                                          std::to_string(f.size()) + " fields, expected " +
                                          std::to_string(cols.size()));
    }
    UtteranceRecord r;
    r.utt_id = f[0];
    if (r.utt_id.empty()) {
      throw Error(ErrorKind::kValidation, "empty utt_id on line " + std::to_string(line_no));
    }
    if (!seen.insert(r.utt_id).second) {
      throw Error(ErrorKind::kValidation, "duplicate utt_id '" + r.utt_id + "'");
    }
    auto resolve = [&](const std::string& p) {
      const fs::path fp(p);
      return fp.is_absolute() ? fp : base / fp;
    };
    r.lip_feature_path = resolve(f[1]);
    r.speech_feature_path = resolve(f[2]);
    r.transcript = f[3];
    if (manifest.has_split_column) {
      r.split = ParseSplit(f[4]);
      if (!r.split) {
        throw Error(ErrorKind::kValidation,
                    "unknown split '" + f[4] + "' for utterance '" + r.utt_id + "'");
      }
    }
    manifest.records.push_back(std::move(r));
  }
  return manifest;
}

void WriteManifest(const Manifest& manifest, const fs::path& path) {
  const fs::path base = path.parent_path();
  std::string out = kManifestHeader;
  out.push_back('\n');
  for (const auto& r : manifest.records) {
    if (!r.split) throw Error(ErrorKind::kValidation, "record " + r.utt_id + " has no split");
    auto rel = [&](const fs::path& p) {
      return base.empty() ? p.generic_string() : p.lexically_proximate(base).generic_string();
    };
    out += r.utt_id + '\t' + rel(r.lip_feature_path) + '\t' + rel(r.speech_feature_path) + '\t' +
           r.transcript + '\t' + SplitName(*r.split) + '\n';
  }
  Dump(path, out);
}

std::vector<Split> MakeSplit(size_t num_ids, const SplitRatios& ratios, uint64_t seed) {
  if (num_ids == 0) throw Error(ErrorKind::kConfig, "cannot split an empty id list");
  const double sum = ratios.train + ratios.val + ratios.test;
  if (std::abs(sum - 1.0) > 1e-9 || ratios.train < 0 || ratios.val < 0 || ratios.test < 0) {
    throw Error(ErrorKind::kConfig, "split ratios must be nonnegative and sum to 1");
  }
  const auto n = static_cast<double>(num_ids);
  const auto n_val = static_cast<size_t>(std::llround(n * ratios.val));
  const auto n_test = static_cast<size_t>(std::llround(n * ratios.test));
  if (n_val + n_test > num_ids) throw Error(ErrorKind::kConfig, "split ratios leave no room");

  std::vector<size_t> order(num_ids);
  for (size_t i = 0; i < num_ids; ++i) order[i] = i;
  Rng rng(MixSeed(seed, 0x5b117));
  rng.Shuffle(order);

  std::vector<Split> out(num_ids, Split::kTrain);
  for (size_t i = 0; i < n_val; ++i) out[order[i]] = Split::kVal;
  for (size_t i = n_val; i < n_val + n_test; ++i) out[order[i]] = Split::kTest;
  return out;
}

// ---------------------------------------------------------------------------

void SyntheticTaskSpec::Validate() const {
  if (vocab_size < 1 || lip_dim < 1 || speech_dim < 1) {
    throw Error(ErrorKind::kConfig, "synthetic vocab and dims must be positive");
  }
  if (frames_per_symbol_lip != 1 || frames_per_symbol_speech != 2) {
    throw Error(ErrorKind::kConfig, "synthetic task renders 1 lip and 2 speech frames per symbol");
  }
  if (!(noise_sigma >= 0.0) || !std::isfinite(noise_sigma)) {
    throw Error(ErrorKind::kConfig, "noise_sigma must be finite and nonnegative");
  }
}

namespace {

Eigen::MatrixXd DrawSeparatedRows(int rows, int dim, Rng& rng) {
  Eigen::MatrixXd table(rows, dim);
  constexpr int kMaxRedraws = 1000;
  for (int r = 0; r < rows; ++r) {
    for (int attempt = 0;; ++attempt) {
      for (int d = 0; d < dim; ++d) table(r, d) = rng.Normal();
      bool separated = true;
      for (int q = 0; q < r && separated; ++q) {
        separated = (table.row(r) - table.row(q)).norm() >= kMinEmbeddingSeparation;
      }
      if (separated) break;
      if (attempt == kMaxRedraws) {
        throw Error(ErrorKind::kConfig, "cannot draw separated embeddings; raise the dimension");
      }
    }
  }
  return table;
}

}  // namespace

SyntheticEmbeddings MakeSyntheticEmbeddings(const SyntheticTaskSpec& spec) {
  spec.Validate();
  Rng lip_rng(MixSeed(spec.seed, 0x11));
  Rng speech_rng(MixSeed(spec.seed, 0x22));
  return {DrawSeparatedRows(spec.vocab_size, spec.lip_dim, lip_rng),
          DrawSeparatedRows(spec.vocab_size, spec.speech_dim, speech_rng)};
}

std::string SymbolWord(int symbol) { return "w" + std::to_string(symbol); }

SyntheticPair GenerateSyntheticPair(const SyntheticTaskSpec& spec, int num_symbols,
                                    uint64_t utterance_index) {
  return GenerateSyntheticPair(spec, MakeSyntheticEmbeddings(spec), num_symbols, utterance_index);
}

SyntheticPair GenerateSyntheticPair(const SyntheticTaskSpec& spec,
                                    const SyntheticEmbeddings& emb, int num_symbols,
                                    uint64_t utterance_index) {
  spec.Validate();
  if (num_symbols < 1) throw Error(ErrorKind::kValidation, "num_symbols must be >= 1");
  if (emb.lip.rows() != spec.vocab_size || emb.lip.cols() != spec.lip_dim ||
      emb.speech.rows() != spec.vocab_size || emb.speech.cols() != spec.speech_dim) {
    throw Error(ErrorKind::kShape, "embedding tables do not match the synthetic spec");
  }
  Rng rng(MixSeed(spec.seed, utterance_index + 1, static_cast<uint64_t>(num_symbols)));

  SyntheticPair pair;
  pair.symbols.resize(num_symbols);
  for (int& s : pair.symbols) s = static_cast<int>(rng.Below(spec.vocab_size));

  const int t_lip = num_symbols * spec.frames_per_symbol_lip;
  const int t_speech = num_symbols * spec.frames_per_symbol_speech;
  pair.lip = {FeatureMatrix(t_lip, spec.lip_dim), kLipFrameRateHz, FeatureKind::kLip};
  pair.speech = {FeatureMatrix(t_speech, spec.speech_dim), kSpeechFrameRateHz,
                 FeatureKind::kSpeech};
  pair.target_units = {{}, spec.vocab_size, kSpeechFrameRateHz};

  for (int i = 0; i < num_symbols; ++i) {
    const int s = pair.symbols[i];
    for (int d = 0; d < spec.lip_dim; ++d) {
      pair.lip.frames(i, d) = static_cast<float>(emb.lip(s, d) + spec.noise_sigma * rng.Normal());
    }
    for (int k = 0; k < spec.frames_per_symbol_speech; ++k) {
      const int t = i * spec.frames_per_symbol_speech + k;
      for (int d = 0; d < spec.speech_dim; ++d) {
        pair.speech.frames(t, d) =
            static_cast<float>(emb.speech(s, d) + spec.noise_sigma * rng.Normal());
      }
      pair.target_units.ids.push_back(s);
    }
    if (i) pair.transcript.push_back(' ');
    pair.transcript += SymbolWord(s);
  }
  return pair;
}

}  // namespace l2s
