#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "vitcil/graph.hpp"
#include "vitcil/model.hpp"
#include "vitcil/prototypes.hpp"

namespace vitcil {

struct PrototypeMeta {
  int class_id = -1;
  int task_id = -1;
  long sample_count = 0;
};

struct CheckpointManifest {
  int format = 1;
  int task_index = 0;  // 1-based task just completed
  int class_count = 0;
  uint64_t seed = 0;
  std::map<std::string, std::string> config;
  std::vector<int> head_order;  // global class id per classifier row
  std::vector<PrototypeMeta> prototypes;
};

// Manifest plus named float32 tensors; the binary layout round-trips
// bit-exactly.
struct Checkpoint {
  CheckpointManifest manifest;
  std::vector<std::pair<std::string, Mat<float>>> tensors;

  const Mat<float>& tensor(const std::string& name) const;
  bool has_tensor(const std::string& name) const;
};

void save_checkpoint(const std::string& path, const Checkpoint& ckpt);
Checkpoint load_checkpoint(const std::string& path);

// Model parameters + head + finalized prototype centers, in a stable order.
Checkpoint make_checkpoint(const VitModel<float>& model, const PrototypeStore<float>& store,
                           CheckpointManifest manifest);

// Writes tensors back into an existing model (shapes must match the model,
// except the head which is resized) and rebuilds the prototype store.
void apply_checkpoint(const Checkpoint& ckpt, VitModel<float>& model,
                      PrototypeStore<float>& store);

}  // namespace vitcil
