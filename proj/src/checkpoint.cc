#include "l2s/checkpoint.h"

#include <bit>
#include <fstream>
#include <iterator>

namespace l2s {

namespace {

constexpr char kMagic[4] = {'L', '2', 'S', 'C'};
constexpr uint32_t kVersion = 1;

void PutU32(std::string& out, uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

class Reader {
 public:
  explicit Reader(std::vector<char> bytes) : bytes_(std::move(bytes)) {}

  uint32_t U32() {
    Need(4, "u32");
    uint32_t v = 0;
    for (int i = 0; i < 4; ++i) {
      v |= static_cast<uint32_t>(static_cast<unsigned char>(bytes_[pos_ + i])) << (8 * i);
    }
    pos_ += 4;
    return v;
  }

  std::string Bytes(size_t n) {
    Need(n, "string");
    std::string s(bytes_.begin() + pos_, bytes_.begin() + pos_ + n);
    pos_ += n;
    return s;
  }

  size_t pos() const { return pos_; }
  bool done() const { return pos_ == bytes_.size(); }

 private:
  void Need(size_t n, const char* what) {
    if (pos_ + n > bytes_.size()) {
      throw Error(ErrorKind::kTruncated, std::string("checkpoint ends inside ") + what +
                                             " at byte " + std::to_string(pos_));
    }
  }

  std::vector<char> bytes_;
  size_t pos_ = 0;
};

std::string SerializeMetadata(const KeyValues& kv) {
  std::string s;
  for (const auto& [k, v] : kv) s += k + " = " + v + "\n";
  return s;
}

}  // namespace

void WriteCheckpointFile(const CheckpointData& data, const std::filesystem::path& path) {
  std::string out(kMagic, 4);
  PutU32(out, kVersion);
  const std::string meta = SerializeMetadata(data.metadata);
  PutU32(out, static_cast<uint32_t>(meta.size()));
  out += meta;
  PutU32(out, static_cast<uint32_t>(data.tensors.size()));
  for (const Tensor& t : data.tensors) {
    PutU32(out, static_cast<uint32_t>(t.name.size()));
    out += t.name;
    PutU32(out, static_cast<uint32_t>(t.shape.size()));
    for (int d : t.shape) PutU32(out, static_cast<uint32_t>(d));
    // Matrices hold the flattened tensor row-major: (prod of leading dims) x last.
    for (Eigen::Index r = 0; r < t.value.rows(); ++r) {
      for (Eigen::Index c = 0; c < t.value.cols(); ++c) {
        PutU32(out, std::bit_cast<uint32_t>(static_cast<float>(t.value(r, c))));
      }
    }
  }
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream f(path, std::ios::binary);
  if (!f) throw Error(ErrorKind::kIo, "cannot open for write " + path.string());
  f.write(out.data(), static_cast<std::streamsize>(out.size()));
  if (!f) throw Error(ErrorKind::kIo, "write failed for " + path.string());
}

CheckpointData ReadCheckpointFile(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw Error(ErrorKind::kIo, "cannot open checkpoint " + path.string());
  Reader in(std::vector<char>(std::istreambuf_iterator<char>(f), {}));
  if (in.Bytes(4) != std::string(kMagic, 4)) {
    throw Error(ErrorKind::kFormat, "bad checkpoint magic at byte 0 (expected \"L2SC\")");
  }
  const uint32_t version = in.U32();
  if (version != kVersion) {
    throw Error(ErrorKind::kFormat, "unsupported checkpoint version " + std::to_string(version) +
                                        " at byte 4");
  }
  CheckpointData data;
  const uint32_t meta_len = in.U32();
  data.metadata = ParseKeyValues(in.Bytes(meta_len));
  const uint32_t count = in.U32();
  for (uint32_t i = 0; i < count; ++i) {
    Tensor t;
    t.name = in.Bytes(in.U32());
    const uint32_t rank = in.U32();
    if (rank == 0 || rank > 8) {
      throw Error(ErrorKind::kFormat, "tensor " + t.name + " has rank " + std::to_string(rank) +
                                          " at byte " + std::to_string(in.pos()));
    }
    Eigen::Index rows = 1;
    for (uint32_t r = 0; r < rank; ++r) {
      t.shape.push_back(static_cast<int>(in.U32()));
      if (r + 1 < rank) rows *= t.shape.back();
    }
    const Eigen::Index cols = rank == 1 ? t.shape[0] : t.shape.back();
    if (rank == 1) rows = 1;
    t.value.resize(rows, cols);
    for (Eigen::Index r = 0; r < rows; ++r) {
      for (Eigen::Index c = 0; c < cols; ++c) t.value(r, c) = std::bit_cast<float>(in.U32());
    }
    data.tensors.push_back(std::move(t));
  }
  if (!in.done()) {
    throw Error(ErrorKind::kFormat, "trailing bytes in checkpoint at byte " + std::to_string(in.pos()));
  }
  return data;
}

void SaveModel(const S2SModel& model, const std::filesystem::path& path, const KeyValues& extra) {
  CheckpointData data;
  data.metadata = ParseKeyValues(model.config().Serialize());
  for (const auto& [k, v] : extra) data.metadata[k] = v;
  for (const Tensor& t : model.params()) data.tensors.push_back(t);
  WriteCheckpointFile(data, path);
}

S2SModel ModelFromCheckpoint(const CheckpointData& data) {
  const ModelConfig cfg = ModelConfig::FromKeyValues(data.metadata);
  S2SModel model = S2SModel::Empty(cfg);
  ParameterSet& ps = model.mutable_params();
  size_t matched = 0;
  for (const Tensor& t : data.tensors) {
    const auto idx = ps.Find(t.name);
    if (!idx) continue;  // optimizer state and other extras
    Tensor& dst = ps[*idx];
    if (dst.shape != t.shape || dst.value.rows() != t.value.rows() || dst.value.cols() != t.value.cols()) {
      throw Error(ErrorKind::kIncompatible, "tensor " + t.name + " shape differs from the config");
    }
    dst.value = t.value;
    ++matched;
  }
  if (matched != ps.size()) {
    throw Error(ErrorKind::kIncompatible, "checkpoint lacks " + std::to_string(ps.size() - matched) +
                                              " model tensors");
  }
  return model;
}

S2SModel LoadModel(const std::filesystem::path& path, KeyValues* metadata) {
  CheckpointData data = ReadCheckpointFile(path);
  S2SModel model = ModelFromCheckpoint(data);
  if (metadata) *metadata = std::move(data.metadata);
  return model;
}

}  // namespace l2s
