#pragma once

#include <cstdint>
#include <cstring>
#include <fstream>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "modprompt/autograd.hpp"
#include "modprompt/tensor.hpp"

namespace modprompt {

// Named parameter store. Keys are stable dotted paths ("backbone.block0.conv.weight");
// std::map keeps iteration order deterministic, which the bitwise frozen-weight
// checks and the checkpoint layout rely on.
class ParamDict {
 public:
  Var& add(const std::string& key, Tensor t, bool requires_grad = true) {
    auto [it, inserted] = params_.emplace(key, make_leaf(std::move(t), requires_grad));
    if (!inserted) throw std::logic_error("ParamDict: duplicate key " + key);
    return it->second;
  }

  bool contains(const std::string& key) const { return params_.count(key) > 0; }

  Var& at(const std::string& key) {
    auto it = params_.find(key);
    if (it == params_.end()) throw std::out_of_range("ParamDict: missing key " + key);
    return it->second;
  }
  const Var& at(const std::string& key) const {
    auto it = params_.find(key);
    if (it == params_.end()) throw std::out_of_range("ParamDict: missing key " + key);
    return it->second;
  }

  std::vector<std::string> keys() const {
    std::vector<std::string> out;
    out.reserve(params_.size());
    for (const auto& [k, v] : params_) out.push_back(k);
    return out;
  }

  std::vector<std::string> keys_with_prefix(const std::string& prefix) const {
    std::vector<std::string> out;
    for (const auto& [k, v] : params_)
      if (k.rfind(prefix, 0) == 0) out.push_back(k);
    return out;
  }

  void zero_grads() {
    for (auto& [k, v] : params_) v->grad = Tensor();
  }

  std::int64_t scalar_count(const std::vector<std::string>& keys) const {
    std::int64_t n = 0;
    for (const auto& k : keys) n += at(k)->val.size();
    return n;
  }

  auto begin() { return params_.begin(); }
  auto end() { return params_.end(); }
  auto begin() const { return params_.begin(); }
  auto end() const { return params_.end(); }
  std::size_t size() const { return params_.size(); }

 private:
  std::map<std::string, Var> params_;
};

// Per-key content hashes; bitwise freeze verification compares these.
inline std::map<std::string, std::uint64_t> hash_params(
    const ParamDict& params, const std::vector<std::string>& keys) {
  std::map<std::string, std::uint64_t> out;
  for (const auto& k : keys) out[k] = content_hash(params.at(k)->val);
  return out;
}

struct CheckpointMeta {
  std::string schema = "modprompt-ckpt/1";
  int grid_h = 0, grid_w = 0;
  int embed_dim = 0;
  std::vector<std::string> vocab;
  nlohmann::json extra = nlohmann::json::object();
};

// Single-file archive: magic, JSON header (metadata + array index), then the
// raw little-endian doubles of every array in header order.
inline void save_checkpoint(const std::string& path, const ParamDict& params,
                            const CheckpointMeta& meta) {
  nlohmann::json header;
  header["schema"] = meta.schema;
  header["grid"] = {meta.grid_h, meta.grid_w};
  header["D"] = meta.embed_dim;
  header["vocab"] = meta.vocab;
  header["extra"] = meta.extra;
  nlohmann::json arrays = nlohmann::json::array();
  for (const auto& [key, var] : params)
    arrays.push_back({{"key", key}, {"shape", var->val.shape}});
  header["arrays"] = arrays;
  std::string hs = header.dump();

  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw std::runtime_error("save_checkpoint: cannot open " + path);
  f.write("MPCKPT1\n", 8);
  std::uint64_t len = hs.size();
  f.write(reinterpret_cast<const char*>(&len), sizeof(len));
  f.write(hs.data(), static_cast<std::streamsize>(hs.size()));
  for (const auto& [key, var] : params) {
    const auto& v = var->val.v;
    if (!v.empty())
      f.write(reinterpret_cast<const char*>(v.data()),
              static_cast<std::streamsize>(v.size() * sizeof(double)));
  }
  if (!f) throw std::runtime_error("save_checkpoint: write failed for " + path);
}

inline std::pair<ParamDict, CheckpointMeta> load_checkpoint(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("load_checkpoint: cannot open " + path);
  char magic[8];
  f.read(magic, 8);
  if (!f || std::memcmp(magic, "MPCKPT1\n", 8) != 0)
    throw std::runtime_error("load_checkpoint: bad magic in " + path);
  std::uint64_t len = 0;
  f.read(reinterpret_cast<char*>(&len), sizeof(len));
  std::string hs(len, '\0');
  f.read(hs.data(), static_cast<std::streamsize>(len));
  if (!f) throw std::runtime_error("load_checkpoint: truncated header in " + path);
  nlohmann::json header = nlohmann::json::parse(hs);
  if (header.at("schema").get<std::string>() != "modprompt-ckpt/1")
    throw std::runtime_error("load_checkpoint: unsupported schema in " + path);

  CheckpointMeta meta;
  meta.schema = header.at("schema").get<std::string>();
  meta.grid_h = header.at("grid").at(0).get<int>();
  meta.grid_w = header.at("grid").at(1).get<int>();
  meta.embed_dim = header.at("D").get<int>();
  meta.vocab = header.at("vocab").get<std::vector<std::string>>();
  meta.extra = header.value("extra", nlohmann::json::object());

  ParamDict params;
  for (const auto& entry : header.at("arrays")) {
    std::string key = entry.at("key").get<std::string>();
    std::vector<int> shape = entry.at("shape").get<std::vector<int>>();
    Tensor t(shape);
    if (!t.v.empty())
      f.read(reinterpret_cast<char*>(t.v.data()),
             static_cast<std::streamsize>(t.v.size() * sizeof(double)));
    if (!f) throw std::runtime_error("load_checkpoint: truncated array " + key);
    params.add(key, std::move(t));
  }
  return {std::move(params), std::move(meta)};
}

}  // namespace modprompt
