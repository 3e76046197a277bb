// Named-tensor checkpoint container.
//
//   "L2SC" | u32 version=1 | u32 meta_len | meta (UTF-8 `key = value` lines)
//   | u32 tensor_count | per tensor: u32 name_len, name, u32 rank,
//     rank x u32 dims, float32 LE payload (row-major over dims)
//
// The metadata block carries the serialized ModelConfig plus any training
// state keys (step counter, config fingerprints, tokenizer inventory).

#ifndef L2S_CHECKPOINT_H_
#define L2S_CHECKPOINT_H_

#include <filesystem>
#include <vector>

#include "l2s/config_file.h"
#include "l2s/s2s_model.h"

namespace l2s {

struct CheckpointData {
  KeyValues metadata;
  std::vector<Tensor> tensors;
};

void WriteCheckpointFile(const CheckpointData& data, const std::filesystem::path& path);
CheckpointData ReadCheckpointFile(const std::filesystem::path& path);

// Model-only convenience wrappers. `extra` keys are merged into the metadata.
void SaveModel(const S2SModel& model, const std::filesystem::path& path,
               const KeyValues& extra = {});
S2SModel LoadModel(const std::filesystem::path& path, KeyValues* metadata = nullptr);

// Builds a model from checkpoint content; tensor names and shapes must match
// the layout implied by the metadata's model config.
S2SModel ModelFromCheckpoint(const CheckpointData& data);

}  // namespace l2s

#endif  // L2S_CHECKPOINT_H_
