#include "utuning/serialize.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <map>

static_assert(std::endian::native == std::endian::little,
              "checkpoint writer assumes a little-endian host");

namespace utuning {

namespace {

constexpr char kMagic[4] = {'U', 'T', 'N', 'T'};
constexpr uint32_t kVersion = 1;

template <typename T>
void write_pod(std::ofstream& out, T v) {
  out.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T read_pod(std::ifstream& in) {
  T v{};
  in.read(reinterpret_cast<char*>(&v), sizeof(T));
  if (!in) throw NumericError("checkpoint truncated");
  return v;
}

}  // namespace

void save_named_tensors(const std::string& path,
                        const std::vector<std::pair<std::string, Tensor>>& tensors) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw ConfigError("cannot write checkpoint: " + path);
  out.write(kMagic, 4);
  write_pod<uint32_t>(out, kVersion);
  write_pod<uint64_t>(out, tensors.size());
  for (const auto& [name, t] : tensors) {
    write_pod<uint32_t>(out, static_cast<uint32_t>(name.size()));
    out.write(name.data(), static_cast<std::streamsize>(name.size()));
    write_pod<uint8_t>(out, 0);  // f64
    write_pod<uint32_t>(out, static_cast<uint32_t>(t.rank()));
    for (int64_t d : t.shape()) write_pod<uint64_t>(out, static_cast<uint64_t>(d));
    out.write(reinterpret_cast<const char*>(t.data()),
              static_cast<std::streamsize>(t.numel() * sizeof(double)));
  }
  if (!out) throw ConfigError("short write while saving checkpoint: " + path);
}

std::vector<std::pair<std::string, Tensor>> load_named_tensors(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError("cannot open checkpoint: " + path);
  char magic[4];
  in.read(magic, 4);
  if (!in || std::memcmp(magic, kMagic, 4) != 0) {
    throw ConfigError("not a named-tensor checkpoint: " + path);
  }
  uint32_t version = read_pod<uint32_t>(in);
  if (version != kVersion) {
    throw ConfigError("unsupported checkpoint version " + std::to_string(version));
  }
  uint64_t count = read_pod<uint64_t>(in);
  std::vector<std::pair<std::string, Tensor>> out;
  out.reserve(count);
  for (uint64_t i = 0; i < count; ++i) {
    uint32_t name_len = read_pod<uint32_t>(in);
    std::string name(name_len, '\0');
    in.read(name.data(), name_len);
    uint8_t dtype = read_pod<uint8_t>(in);
    if (dtype != 0) throw ConfigError("unsupported dtype " + std::to_string(dtype));
    uint32_t rank = read_pod<uint32_t>(in);
    Shape shape;
    for (uint32_t r = 0; r < rank; ++r) shape.push_back(static_cast<int64_t>(read_pod<uint64_t>(in)));
    std::vector<double> data(static_cast<size_t>(shape_numel(shape)));
    in.read(reinterpret_cast<char*>(data.data()),
            static_cast<std::streamsize>(data.size() * sizeof(double)));
    if (!in) throw NumericError("checkpoint truncated in tensor '" + name + "'");
    out.emplace_back(std::move(name), Tensor(std::move(shape), std::move(data)));
  }
  return out;
}

void save_checkpoint(const std::string& path,
                     const std::vector<std::pair<std::string, Var>>& params) {
  std::vector<std::pair<std::string, Tensor>> tensors;
  tensors.reserve(params.size());
  for (const auto& [name, v] : params) tensors.emplace_back(name, v->value);
  save_named_tensors(path, tensors);
}

void load_checkpoint_into(const std::string& path,
                          const std::vector<std::pair<std::string, Var>>& params) {
  auto stored = load_named_tensors(path);
  std::map<std::string, Var> by_name;
  for (const auto& [name, v] : params) by_name[name] = v;
  if (stored.size() != by_name.size()) {
    throw ConfigError("checkpoint '" + path + "' holds " + std::to_string(stored.size()) +
                      " tensors, model expects " + std::to_string(by_name.size()));
  }
  for (auto& [name, t] : stored) {
    auto it = by_name.find(name);
    if (it == by_name.end()) throw ConfigError("checkpoint tensor '" + name + "' has no match");
    if (it->second->value.shape() != t.shape()) {
      throw ConfigError("checkpoint tensor '" + name + "' shape " + shape_str(t.shape()) +
                        " does not match model shape " + shape_str(it->second->value.shape()));
    }
    it->second->value = std::move(t);
  }
}

}  // namespace utuning
