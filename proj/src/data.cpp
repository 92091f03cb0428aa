#include "vitcil/data.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <set>

#include "vitcil/util.hpp"

namespace vitcil {

uint64_t Dataset::fingerprint() const {
  uint64_t h = 0xCBF29CE484222325ULL;
  int meta[3] = {image_size, channels, num_classes};
  h = fnv1a(meta, sizeof(meta), h);
  auto fold = [&h](const std::vector<Image<float>>& imgs, const std::vector<int>& labels) {
    for (const Image<float>& im : imgs)
      h = fnv1a(im.pixels.data(), im.pixels.size() * sizeof(float), h);
    h = fnv1a(labels.data(), labels.size() * sizeof(int), h);
  };
  fold(train_images, train_labels);
  fold(test_images, test_labels);
  return h;
}

namespace {

struct Wave {
  double freq, theta, phase, amp, chan_shift;
};

std::vector<Wave> draw_waves(std::mt19937_64& rng, int count, double freq_lo, double freq_hi) {
  std::uniform_real_distribution<double> ufreq(freq_lo, freq_hi);
  std::uniform_real_distribution<double> uang(0.0, 2.0 * M_PI);
  std::uniform_real_distribution<double> uamp(0.6, 1.0);
  std::vector<Wave> out(count);
  for (Wave& w : out) {
    w.freq = ufreq(rng);
    w.theta = uang(rng);
    w.phase = uang(rng);
    w.amp = uamp(rng);
    w.chan_shift = uang(rng);
  }
  return out;
}

double eval_waves(const std::vector<Wave>& waves, double x, double y, int ch, int size) {
  double v = 0.0;
  for (const Wave& w : waves) {
    double u = (std::cos(w.theta) * x + std::sin(w.theta) * y) / size;
    v += w.amp * std::cos(2.0 * M_PI * w.freq * u + w.phase + ch * w.chan_shift);
  }
  return v;
}

}  // namespace

Dataset make_synthetic(const SyntheticSpec& spec) {
  if (spec.num_classes < 1 || spec.train_per_class < 1 || spec.test_per_class < 1 ||
      spec.image_size < 2 || spec.channels < 1)
    throw IngestionError("make_synthetic: bad spec");
  Dataset ds;
  ds.image_size = spec.image_size;
  ds.channels = spec.channels;
  ds.num_classes = spec.num_classes;
  const int s = spec.image_size;

  std::mt19937_64 rng(spec.seed);

  // Fixed per-class templates: oriented texture under a soft radial mask at a
  // class-specific position on a ring, RMS-normalized.
  std::vector<std::vector<float>> templates(spec.num_classes);
  for (int k = 0; k < spec.num_classes; ++k) {
    std::vector<Wave> waves = draw_waves(rng, 3, 1.5, 4.0);
    double angle = 2.0 * M_PI * k / spec.num_classes;
    double cx = 0.5 * s + 0.26 * s * std::cos(angle);
    double cy = 0.5 * s + 0.26 * s * std::sin(angle);
    double r = 0.24 * s;
    std::vector<float>& tpl = templates[k];
    tpl.assign(static_cast<size_t>(s) * s * spec.channels, 0.f);
    double sq_sum = 0.0;
    for (int y = 0; y < s; ++y)
      for (int x = 0; x < s; ++x) {
        double d2 = (x - cx) * (x - cx) + (y - cy) * (y - cy);
        double mask = std::exp(-d2 / (2.0 * r * r));
        for (int ch = 0; ch < spec.channels; ++ch) {
          double v = mask * eval_waves(waves, x, y, ch, s);
          tpl[(static_cast<size_t>(y) * s + x) * spec.channels + ch] = static_cast<float>(v);
          sq_sum += v * v;
        }
      }
    double rms = std::sqrt(sq_sum / (static_cast<double>(s) * s * spec.channels));
    if (rms > 0)
      for (float& v : tpl) v = static_cast<float>(v / rms);
  }

  std::uniform_real_distribution<double> amp_jitter(0.8, 1.2);
  std::normal_distribution<double> pixel_noise(0.0, 0.10);

  auto emit = [&](std::vector<Image<float>>& images, std::vector<int>& labels, int per_class) {
    for (int k = 0; k < spec.num_classes; ++k) {
      for (int i = 0; i < per_class; ++i) {
        double a = amp_jitter(rng);
        std::vector<Wave> bg = draw_waves(rng, 2, 0.5, 1.5);
        Image<float> img = make_image<float>(s, s, spec.channels);
        for (int y = 0; y < s; ++y)
          for (int x = 0; x < s; ++x)
            for (int ch = 0; ch < spec.channels; ++ch) {
              double v = a * templates[k][(static_cast<size_t>(y) * s + x) * spec.channels + ch];
              v += 0.25 * eval_waves(bg, x, y, ch, s);
              v += pixel_noise(rng);
              img.at(y, x, ch) = static_cast<float>(v);
            }
        images.push_back(std::move(img));
        labels.push_back(k);
      }
    }
  };
  emit(ds.train_images, ds.train_labels, spec.train_per_class);
  emit(ds.test_images, ds.test_labels, spec.test_per_class);
  return ds;
}

namespace {

Dataset load_cifar100(const std::string& dir) {
  Dataset ds;
  ds.image_size = 32;
  ds.channels = 3;
  ds.num_classes = 100;
  auto read_file = [](const std::string& path, std::vector<Image<float>>& images,
                      std::vector<int>& labels) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IngestionError("cannot open dataset file: " + path);
    constexpr int kRecord = 2 + 3 * 32 * 32;
    std::vector<unsigned char> rec(kRecord);
    while (in.read(reinterpret_cast<char*>(rec.data()), kRecord)) {
      int fine = rec[1];
      Image<float> img = make_image<float>(32, 32, 3);
      for (int ch = 0; ch < 3; ++ch)
        for (int y = 0; y < 32; ++y)
          for (int x = 0; x < 32; ++x)
            img.at(y, x, ch) =
                static_cast<float>(rec[2 + ch * 1024 + y * 32 + x]) / 255.0f - 0.5f;
      images.push_back(std::move(img));
      labels.push_back(fine);
    }
    if (in.gcount() != 0 && in.gcount() != kRecord)
      throw IngestionError("truncated dataset file: " + path);
    if (images.empty()) throw IngestionError("empty dataset file: " + path);
  };
  read_file(dir + "/train.bin", ds.train_images, ds.train_labels);
  read_file(dir + "/test.bin", ds.test_images, ds.test_labels);
  return ds;
}

}  // namespace

Dataset load_dataset(const std::string& source, const std::string& path,
                     const SyntheticSpec& spec) {
  if (source == "synthetic") return make_synthetic(spec);
  if (source == "cifar100") {
    if (path.empty()) throw IngestionError("cifar100 requires data.path");
    return load_cifar100(path);
  }
  throw IngestionError("unknown dataset source: " + source);
}

std::vector<int> TaskSpec::head_order() const {
  std::vector<int> out;
  for (const auto& task : task_classes) out.insert(out.end(), task.begin(), task.end());
  return out;
}

int TaskSpec::head_index_of(int class_id) const {
  int idx = 0;
  for (const auto& task : task_classes) {
    for (int c : task) {
      if (c == class_id) return idx;
      ++idx;
    }
  }
  throw RejectedInput("head_index_of: class " + std::to_string(class_id) + " not in TaskSpec");
}

TaskSpec build_split(const std::vector<int>& dataset_labels, int base_classes,
                     int classes_per_task, int num_incremental_tasks, uint64_t seed) {
  if (base_classes < 1) throw RejectedInput("build_split: base_classes must be >= 1");
  if (num_incremental_tasks < 0)
    throw RejectedInput("build_split: num_incremental_tasks must be >= 0");
  if (num_incremental_tasks > 0 && classes_per_task < 1)
    throw RejectedInput("build_split: classes_per_task must be >= 1");
  std::set<int> distinct(dataset_labels.begin(), dataset_labels.end());
  std::vector<int> classes(distinct.begin(), distinct.end());
  const int needed = base_classes + classes_per_task * num_incremental_tasks;
  if (needed > static_cast<int>(classes.size()))
    throw RejectedInput("build_split: " + std::to_string(needed) + " classes needed but only " +
                        std::to_string(classes.size()) + " available");
  std::mt19937_64 rng(seed);
  std::shuffle(classes.begin(), classes.end(), rng);
  TaskSpec spec;
  spec.base_classes = base_classes;
  spec.classes_per_task = classes_per_task;
  spec.num_incremental_tasks = num_incremental_tasks;
  spec.seed = seed;
  spec.task_classes.emplace_back(classes.begin(), classes.begin() + base_classes);
  for (int t = 0; t < num_incremental_tasks; ++t) {
    int off = base_classes + t * classes_per_task;
    spec.task_classes.emplace_back(classes.begin() + off, classes.begin() + off + classes_per_task);
  }
  return spec;
}

Image<float> augment_image(const Image<float>& img, const AugmentSpec& aug,
                           std::mt19937_64& rng) {
  Image<float> out = img;
  if (aug.flip) {
    std::uniform_int_distribution<int> coin(0, 1);
    if (coin(rng) == 1) {
      for (int y = 0; y < img.height; ++y)
        for (int x = 0; x < img.width; ++x)
          for (int ch = 0; ch < img.channels; ++ch)
            out.at(y, x, ch) = img.at(y, img.width - 1 - x, ch);
    }
  }
  if (aug.pad > 0) {
    std::uniform_int_distribution<int> off(0, 2 * aug.pad);
    int oy = off(rng) - aug.pad;
    int ox = off(rng) - aug.pad;
    Image<float> shifted = make_image<float>(img.height, img.width, img.channels);
    for (int y = 0; y < img.height; ++y)
      for (int x = 0; x < img.width; ++x) {
        int sy = y + oy;
        int sx = x + ox;
        if (sy < 0 || sy >= img.height || sx < 0 || sx >= img.width) continue;  // zero pad
        for (int ch = 0; ch < img.channels; ++ch) shifted.at(y, x, ch) = out.at(sy, sx, ch);
      }
    out = std::move(shifted);
  }
  return out;
}

BatchProducer::BatchProducer(const Dataset& data, const std::vector<int>& class_ids,
                             int batch_size, uint64_t seed, const AugmentSpec& aug)
    : data_(data), batch_size_(batch_size), aug_(aug), rng_(seed) {
  if (batch_size < 1) throw RejectedInput("BatchProducer: batch_size must be >= 1");
  std::set<int> wanted(class_ids.begin(), class_ids.end());
  for (size_t i = 0; i < data.train_labels.size(); ++i)
    if (wanted.count(data.train_labels[i])) train_indices_.push_back(static_cast<int>(i));
  if (train_indices_.empty()) throw RejectedInput("BatchProducer: no training samples for task");
}

std::vector<Batch> BatchProducer::next_epoch() {
  std::vector<int> order = train_indices_;
  std::shuffle(order.begin(), order.end(), rng_);
  std::vector<Batch> batches;
  for (size_t start = 0; start < order.size(); start += batch_size_) {
    size_t end = std::min(order.size(), start + batch_size_);
    Batch b;
    for (size_t i = start; i < end; ++i) {
      int idx = order[i];
      b.images.push_back(augment_image(data_.train_images[idx], aug_, rng_));
      b.labels.push_back(data_.train_labels[idx]);
      b.indices.push_back(idx);
    }
    batches.push_back(std::move(b));
  }
  return batches;
}

}  // namespace vitcil
