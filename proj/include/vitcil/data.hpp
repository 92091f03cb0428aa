#pragma once

#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include "vitcil/errors.hpp"
#include "vitcil/model.hpp"

namespace vitcil {

struct Dataset {
  int image_size = 0;
  int channels = 0;
  int num_classes = 0;
  std::vector<Image<float>> train_images;
  std::vector<int> train_labels;
  std::vector<Image<float>> test_images;
  std::vector<int> test_labels;

  uint64_t fingerprint() const;
};

struct SyntheticSpec {
  int num_classes = 10;
  int train_per_class = 64;
  int test_per_class = 16;
  int image_size = 16;
  int channels = 1;
  uint64_t seed = 7;
};

// Class-conditioned textured blobs: each class owns a fixed oriented texture
// under a soft radial mask at a class-specific position; samples add a shared
// low-frequency background and pixel noise. Deterministic under seed and
// linearly separable in pixel space.
Dataset make_synthetic(const SyntheticSpec& spec);

// source: "synthetic" (spec-driven) or "cifar100" (binary train.bin/test.bin
// under `path`). Unknown names raise IngestionError.
Dataset load_dataset(const std::string& source, const std::string& path,
                     const SyntheticSpec& spec);

// The F + C x T class-to-task assignment. task_classes[0] holds the F base
// classes; each later entry holds C classes. Lists are pairwise disjoint.
struct TaskSpec {
  int base_classes = 0;
  int classes_per_task = 0;
  int num_incremental_tasks = 0;
  uint64_t seed = 0;
  std::vector<std::vector<int>> task_classes;

  int num_tasks() const { return static_cast<int>(task_classes.size()); }
  // Classifier row order: classes in first-seen order across tasks.
  std::vector<int> head_order() const;
  int head_index_of(int class_id) const;
};

TaskSpec build_split(const std::vector<int>& dataset_labels, int base_classes,
                     int classes_per_task, int num_incremental_tasks, uint64_t seed);

struct AugmentSpec {
  bool flip = true;
  int pad = 2;
};

struct Batch {
  std::vector<Image<float>> images;
  std::vector<int> labels;   // global class ids
  std::vector<int> indices;  // train-set indices (for audit/tests)
};

// Deterministic per-epoch batch stream for one task's training samples.
class BatchProducer {
 public:
  BatchProducer(const Dataset& data, const std::vector<int>& class_ids, int batch_size,
                uint64_t seed, const AugmentSpec& aug);

  int samples_per_epoch() const { return static_cast<int>(train_indices_.size()); }
  std::vector<Batch> next_epoch();

 private:
  const Dataset& data_;
  std::vector<int> train_indices_;
  int batch_size_;
  AugmentSpec aug_;
  std::mt19937_64 rng_;
};

Image<float> augment_image(const Image<float>& img, const AugmentSpec& aug,
                           std::mt19937_64& rng);

}  // namespace vitcil
