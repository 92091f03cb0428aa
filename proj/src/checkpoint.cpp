#include "vitcil/checkpoint.hpp"

#include <cstring>
#include <fstream>

#include <json.hpp>

#include "vitcil/errors.hpp"

namespace vitcil {

namespace {

constexpr char kMagic[4] = {'V', 'C', 'K', '1'};

void write_u64(std::ostream& out, uint64_t v) {
  unsigned char b[8];
  for (int i = 0; i < 8; ++i) b[i] = static_cast<unsigned char>((v >> (8 * i)) & 0xFF);
  out.write(reinterpret_cast<const char*>(b), 8);
}

uint64_t read_u64(std::istream& in) {
  unsigned char b[8];
  in.read(reinterpret_cast<char*>(b), 8);
  if (!in) throw RejectedInput("checkpoint: truncated file");
  uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<uint64_t>(b[i]) << (8 * i);
  return v;
}

nlohmann::json manifest_to_json(const CheckpointManifest& m) {
  nlohmann::json j;
  j["format"] = m.format;
  j["task_index"] = m.task_index;
  j["class_count"] = m.class_count;
  j["seed"] = m.seed;
  j["config"] = m.config;
  j["head_order"] = m.head_order;
  nlohmann::json protos = nlohmann::json::array();
  for (const PrototypeMeta& p : m.prototypes) {
    protos.push_back({{"class_id", p.class_id}, {"task_id", p.task_id},
                      {"sample_count", p.sample_count}});
  }
  j["prototypes"] = protos;
  return j;
}

CheckpointManifest manifest_from_json(const nlohmann::json& j) {
  CheckpointManifest m;
  m.format = j.at("format").get<int>();
  m.task_index = j.at("task_index").get<int>();
  m.class_count = j.at("class_count").get<int>();
  m.seed = j.at("seed").get<uint64_t>();
  m.config = j.at("config").get<std::map<std::string, std::string>>();
  m.head_order = j.at("head_order").get<std::vector<int>>();
  for (const auto& p : j.at("prototypes")) {
    PrototypeMeta pm;
    pm.class_id = p.at("class_id").get<int>();
    pm.task_id = p.at("task_id").get<int>();
    pm.sample_count = p.at("sample_count").get<long>();
    m.prototypes.push_back(pm);
  }
  return m;
}

}  // namespace

const Mat<float>& Checkpoint::tensor(const std::string& name) const {
  for (const auto& [n, t] : tensors)
    if (n == name) return t;
  throw RejectedInput("checkpoint: missing tensor " + name);
}

bool Checkpoint::has_tensor(const std::string& name) const {
  for (const auto& [n, t] : tensors)
    if (n == name) return true;
  return false;
}

void save_checkpoint(const std::string& path, const Checkpoint& ckpt) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw RejectedInput("checkpoint: cannot open for write: " + path);
  out.write(kMagic, 4);
  std::string manifest = manifest_to_json(ckpt.manifest).dump();
  write_u64(out, manifest.size());
  out.write(manifest.data(), static_cast<std::streamsize>(manifest.size()));
  write_u64(out, ckpt.tensors.size());
  for (const auto& [name, t] : ckpt.tensors) {
    write_u64(out, name.size());
    out.write(name.data(), static_cast<std::streamsize>(name.size()));
    write_u64(out, static_cast<uint64_t>(t.rows()));
    write_u64(out, static_cast<uint64_t>(t.cols()));
    out.write(reinterpret_cast<const char*>(t.data()),
              static_cast<std::streamsize>(sizeof(float) * t.size()));
  }
  if (!out) throw RejectedInput("checkpoint: write failed: " + path);
}

Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw RejectedInput("checkpoint: cannot open: " + path);
  char magic[4];
  in.read(magic, 4);
  if (!in || std::memcmp(magic, kMagic, 4) != 0)
    throw RejectedInput("checkpoint: bad magic in " + path);
  Checkpoint ckpt;
  uint64_t mlen = read_u64(in);
  std::string manifest(mlen, '\0');
  in.read(manifest.data(), static_cast<std::streamsize>(mlen));
  if (!in) throw RejectedInput("checkpoint: truncated manifest in " + path);
  ckpt.manifest = manifest_from_json(nlohmann::json::parse(manifest));
  uint64_t count = read_u64(in);
  for (uint64_t i = 0; i < count; ++i) {
    uint64_t nlen = read_u64(in);
    std::string name(nlen, '\0');
    in.read(name.data(), static_cast<std::streamsize>(nlen));
    uint64_t rows = read_u64(in);
    uint64_t cols = read_u64(in);
    Mat<float> t(static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols));
    in.read(reinterpret_cast<char*>(t.data()),
            static_cast<std::streamsize>(sizeof(float) * rows * cols));
    if (!in) throw RejectedInput("checkpoint: truncated tensor data in " + path);
    ckpt.tensors.emplace_back(std::move(name), std::move(t));
  }
  return ckpt;
}

Checkpoint make_checkpoint(const VitModel<float>& model, const PrototypeStore<float>& store,
                           CheckpointManifest manifest) {
  Checkpoint ckpt;
  for (const ClassPrototype<float>* p : store.finalized_prototypes()) {
    PrototypeMeta pm;
    pm.class_id = p->class_id;
    pm.task_id = p->task_id;
    pm.sample_count = p->sample_count;
    manifest.prototypes.push_back(pm);
  }
  ckpt.manifest = std::move(manifest);
  for (int i = 0; i < model.num_tensors(); ++i)
    ckpt.tensors.emplace_back(model.tensor_name(i), model.tensor_value(i));
  for (const ClassPrototype<float>* p : store.finalized_prototypes())
    ckpt.tensors.emplace_back("prototype/" + std::to_string(p->class_id), p->center);
  return ckpt;
}

void apply_checkpoint(const Checkpoint& ckpt, VitModel<float>& model,
                      PrototypeStore<float>& store) {
  const int num_classes = ckpt.manifest.class_count;
  model.head() = make_head<float>(num_classes, model.config().embed_dim);
  for (int i = 0; i < model.num_tensors(); ++i) {
    const Mat<float>& src = ckpt.tensor(model.tensor_name(i));
    Mat<float>& dst = model.tensor_value(i);
    if (src.rows() != dst.rows() || src.cols() != dst.cols())
      throw RejectedInput("checkpoint: tensor shape mismatch for " + model.tensor_name(i));
    dst = src;
  }
  for (const PrototypeMeta& pm : ckpt.manifest.prototypes) {
    ClassPrototype<float> p;
    p.class_id = pm.class_id;
    p.task_id = pm.task_id;
    p.sample_count = pm.sample_count;
    p.center = ckpt.tensor("prototype/" + std::to_string(pm.class_id));
    p.finalized = true;
    store.restore_finalized(p);
  }
}

}  // namespace vitcil
