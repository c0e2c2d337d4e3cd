#include "treeformer/model/checkpoint.hpp"

#include <fstream>
#include <stdexcept>

namespace treeformer::model {

namespace {
constexpr uint32_t kMagic = 0x5446434bu;  // "TFCK"
constexpr uint32_t kVersion = 1;

void write_u32(std::ofstream& f, uint32_t v) { f.write(reinterpret_cast<char*>(&v), 4); }
void write_u64(std::ofstream& f, uint64_t v) { f.write(reinterpret_cast<char*>(&v), 8); }
uint32_t read_u32(std::ifstream& f) {
  uint32_t v = 0;
  f.read(reinterpret_cast<char*>(&v), 4);
  return v;
}
uint64_t read_u64(std::ifstream& f) {
  uint64_t v = 0;
  f.read(reinterpret_cast<char*>(&v), 8);
  return v;
}
}  // namespace

void save_checkpoint(const std::filesystem::path& path, const TreeFormer& net,
                     const CheckpointMeta& meta, nn::Adam* optimizer) {
  nlohmann::json header;
  header["config"] = net.config().to_json();
  header["epoch"] = meta.epoch;
  header["best_val_mae"] = meta.best_val_mae;
  header["train_config"] = meta.train_config;

  uint64_t offset = 0;
  nlohmann::json params = nlohmann::json::array();
  for (const auto& e : net.params().entries()) {
    params.push_back({{"name", e.name},
                      {"shape", e.tensor.shape()},
                      {"offset", offset},
                      {"trainable", e.trainable}});
    offset += uint64_t(e.tensor.numel());
  }
  header["params"] = params;
  header["param_floats"] = offset;
  if (optimizer) header["adam_step"] = optimizer->step_count();

  const std::string header_str = header.dump();
  // atomic write: temp file in the same directory, then rename
  std::filesystem::path tmp = path;
  tmp += ".tmp";
  {
    std::ofstream f(tmp, std::ios::binary | std::ios::trunc);
    if (!f) throw std::runtime_error("cannot open checkpoint for writing: " + tmp.string());
    write_u32(f, kMagic);
    write_u32(f, kVersion);
    write_u64(f, header_str.size());
    f.write(header_str.data(), std::streamsize(header_str.size()));
    for (const auto& e : net.params().entries())
      f.write(reinterpret_cast<const char*>(e.tensor.data()),
              std::streamsize(e.tensor.numel() * 4));
    if (optimizer) {
      for (const auto& m : optimizer->moment1())
        f.write(reinterpret_cast<const char*>(m.data()), std::streamsize(m.size() * 4));
      for (const auto& v : optimizer->moment2())
        f.write(reinterpret_cast<const char*>(v.data()), std::streamsize(v.size() * 4));
    }
    if (!f) throw std::runtime_error("short write on checkpoint: " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

LoadedCheckpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot open checkpoint: " + path.string());
  if (read_u32(f) != kMagic) throw std::runtime_error("not a checkpoint file: " + path.string());
  if (read_u32(f) != kVersion) throw std::runtime_error("unsupported checkpoint version");
  uint64_t hlen = read_u64(f);
  std::string hstr(hlen, '\0');
  f.read(hstr.data(), std::streamsize(hlen));
  if (!f) throw std::runtime_error("truncated checkpoint header");
  nlohmann::json header = nlohmann::json::parse(hstr);

  LoadedCheckpoint out;
  ModelConfig cfg = ModelConfig::from_json(header.at("config"));
  // seed is irrelevant here, every parameter gets overwritten
  out.net = std::make_unique<TreeFormer>(cfg, 0);
  out.meta.epoch = header.at("epoch");
  out.meta.best_val_mae = header.at("best_val_mae");
  if (header.contains("train_config"))
    out.meta.train_config = header.at("train_config").get<std::map<std::string, std::string>>();

  const auto& params = header.at("params");
  if (params.size() != out.net->params().entries().size())
    throw std::runtime_error("checkpoint parameter count mismatch");
  for (const auto& pj : params) {
    std::string name = pj.at("name");
    nn::Tensor* t = out.net->params().find(name);
    if (!t) throw std::runtime_error("checkpoint has unknown parameter: " + name);
    std::vector<int> shape = pj.at("shape").get<std::vector<int>>();
    if (shape != t->shape())
      throw std::runtime_error("checkpoint shape mismatch for parameter: " + name);
    f.read(reinterpret_cast<char*>(t->data()), std::streamsize(t->numel() * 4));
  }
  if (header.contains("adam_step")) {
    // moments mirror the trainable-parameter order used by the optimizer
    out.has_optimizer = true;
    out.adam_step = header.at("adam_step");
    for (int which = 0; which < 2; ++which) {
      auto& dst = which == 0 ? out.adam_m : out.adam_v;
      for (const auto& e : out.net->params().entries()) {
        if (!e.trainable) continue;
        std::vector<float> buf(size_t(e.tensor.numel()));
        f.read(reinterpret_cast<char*>(buf.data()), std::streamsize(buf.size() * 4));
        dst.push_back(std::move(buf));
      }
    }
  }
  if (!f) throw std::runtime_error("truncated checkpoint payload");
  return out;
}

}  // namespace treeformer::model
