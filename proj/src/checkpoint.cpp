#include "mics/checkpoint.hpp"

#include <bit>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <sstream>
#include <stdexcept>

namespace mics::io {

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

namespace {

constexpr char kMagic[8] = {'M', 'I', 'C', 'S', 'C', 'K', 'P', 'T'};

template <typename T>
void put(std::string& out, T v) {
  char buf[sizeof(T)];
  std::memcpy(buf, &v, sizeof(T));
  out.append(buf, sizeof(T));
}

class Reader {
 public:
  explicit Reader(std::string_view bytes) : bytes_(bytes) {}

  template <typename T>
  T get() {
    T v;
    std::memcpy(&v, take(sizeof(T)).data(), sizeof(T));
    return v;
  }
  std::string_view take(std::size_t n) {
    if (n > bytes_.size() - pos_) throw std::runtime_error("checkpoint truncated");
    auto out = bytes_.substr(pos_, n);
    pos_ += n;
    return out;
  }
  bool done() const { return pos_ == bytes_.size(); }

 private:
  std::string_view bytes_;
  std::size_t pos_ = 0;
};

}  // namespace

const char* to_string(Stage s) { return s == Stage::pretrain ? "pretrain" : "finetune"; }

Stage stage_from_string(const std::string& s) {
  if (s == "pretrain") return Stage::pretrain;
  if (s == "finetune") return Stage::finetune;
  throw std::invalid_argument("unknown checkpoint stage: " + s);
}

void Checkpoint::require_stage(Stage expected) const {
  if (stage != expected)
    throw std::invalid_argument(std::string("stage mismatch: expected ") + to_string(expected) + " checkpoint, got " +
                                to_string(stage));
}

nlohmann::json to_json(const net::NetConfig& c) {
  return {{"image_side", c.image_side},     {"patch_size", c.patch_size},     {"embed_dim", c.embed_dim},
          {"proj_dim", c.proj_dim},         {"glo_dim", c.glo_dim},           {"fusion_heads", c.fusion_heads},
          {"encoder_heads", c.encoder_heads}, {"depth", c.depth},             {"mlp_ratio", c.mlp_ratio},
          {"num_classes", c.num_classes}};
}

net::NetConfig net_config_from_json(const nlohmann::json& j) {
  net::NetConfig c;
  c.image_side = j.at("image_side").get<int>();
  c.patch_size = j.at("patch_size").get<int>();
  c.embed_dim = j.at("embed_dim").get<int>();
  c.proj_dim = j.at("proj_dim").get<int>();
  c.glo_dim = j.at("glo_dim").get<int>();
  c.fusion_heads = j.at("fusion_heads").get<int>();
  c.encoder_heads = j.at("encoder_heads").get<int>();
  c.depth = j.at("depth").get<int>();
  c.mlp_ratio = j.at("mlp_ratio").get<int>();
  c.num_classes = j.at("num_classes").get<int>();
  return c;
}

nlohmann::json to_json(const SeedBlock& s) {
  return {{"data", s.data}, {"model", s.model}, {"mask", s.mask}, {"svd", s.svd}, {"shifts", s.shifts}};
}

SeedBlock seed_block_from_json(const nlohmann::json& j) {
  SeedBlock s;
  s.data = j.value("data", std::uint64_t{0});
  s.model = j.value("model", std::uint64_t{0});
  s.mask = j.value("mask", std::uint64_t{0});
  s.svd = j.value("svd", std::uint64_t{0});
  s.shifts = j.value("shifts", std::uint64_t{0});
  return s;
}

std::uint64_t fnv1a(std::string_view bytes) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

std::string hash_hex(std::uint64_t h) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

std::string net_config_hash(const net::NetConfig& c) { return hash_hex(fnv1a(to_json(c).dump())); }

std::string serialize(const Checkpoint& ckpt) {
  nlohmann::json header = {{"stage", to_string(ckpt.stage)},
                           {"net", to_json(ckpt.net)},
                           {"config_hash", ckpt.config_hash},
                           {"seeds", to_json(ckpt.seeds)},
                           {"settings", ckpt.settings}};
  const std::string text = header.dump();  // nlohmann objects keep keys sorted
  std::string out(kMagic, sizeof kMagic);
  put<std::uint32_t>(out, ckpt.version);
  put<std::uint64_t>(out, text.size());
  out += text;
  put<std::uint64_t>(out, ckpt.arrays.size());
  for (const auto& [name, m] : ckpt.arrays) {
    put<std::uint32_t>(out, static_cast<std::uint32_t>(name.size()));
    out += name;
    put<std::uint64_t>(out, static_cast<std::uint64_t>(m.rows()));
    put<std::uint64_t>(out, static_cast<std::uint64_t>(m.cols()));
    out.append(reinterpret_cast<const char*>(m.data()), static_cast<std::size_t>(m.size()) * sizeof(double));
  }
  return out;
}

Checkpoint deserialize(std::string_view bytes) {
  Reader r(bytes);
  if (r.take(sizeof kMagic) != std::string_view(kMagic, sizeof kMagic)) throw std::runtime_error("not a checkpoint file");
  Checkpoint ckpt;
  ckpt.version = r.get<std::uint32_t>();
  if (ckpt.version != kCheckpointVersion)
    throw std::runtime_error("unsupported checkpoint version " + std::to_string(ckpt.version));
  const auto header_len = r.get<std::uint64_t>();
  const auto header = nlohmann::json::parse(r.take(header_len));
  ckpt.stage = stage_from_string(header.at("stage").get<std::string>());
  ckpt.net = net_config_from_json(header.at("net"));
  ckpt.config_hash = header.at("config_hash").get<std::string>();
  ckpt.seeds = seed_block_from_json(header.at("seeds"));
  ckpt.settings = header.at("settings");
  const auto count = r.get<std::uint64_t>();
  for (std::uint64_t i = 0; i < count; ++i) {
    const auto name_len = r.get<std::uint32_t>();
    std::string name(r.take(name_len));
    const auto rows = r.get<std::uint64_t>();
    const auto cols = r.get<std::uint64_t>();
    ad::Matrix m(static_cast<ad::Index>(rows), static_cast<ad::Index>(cols));
    const auto raw = r.take(rows * cols * sizeof(double));
    std::memcpy(m.data(), raw.data(), raw.size());
    ckpt.arrays.emplace(std::move(name), std::move(m));
  }
  if (!r.done()) throw std::runtime_error("trailing bytes after checkpoint arrays");
  return ckpt;
}

void write_file_atomic(const std::filesystem::path& path, std::string_view bytes) {
  auto tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("cannot open " + tmp.string() + " for writing");
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    out.flush();
    if (!out) throw std::runtime_error("write failed: " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt) {
  write_file_atomic(path, serialize(ckpt));
}

Checkpoint load_checkpoint(const std::filesystem::path& path) { return deserialize(read_file(path)); }

void store_parameters(std::map<std::string, ad::Matrix>& arrays, const std::string& prefix,
                      const std::map<std::string, ad::Var>& params) {
  for (const auto& [name, p] : params) arrays[prefix + name] = p.value();
}

void load_parameters(const std::map<std::string, ad::Matrix>& arrays, const std::string& prefix,
                     const std::map<std::string, ad::Var>& params) {
  for (const auto& [name, p] : params) {
    const auto it = arrays.find(prefix + name);
    if (it == arrays.end()) throw std::invalid_argument("checkpoint lacks array " + prefix + name);
    if (it->second.rows() != p.rows() || it->second.cols() != p.cols())
      throw std::invalid_argument("shape mismatch for " + prefix + name);
    ad::Var v = p;
    v.mutable_value() = it->second;
  }
}

std::map<std::string, ad::Matrix> arrays_with_prefix(const std::map<std::string, ad::Matrix>& arrays,
                                                     const std::string& prefix) {
  std::map<std::string, ad::Matrix> out;
  for (auto it = arrays.lower_bound(prefix); it != arrays.end() && it->first.starts_with(prefix); ++it)
    out.emplace(it->first.substr(prefix.size()), it->second);
  return out;
}

net::Model model_from_checkpoint(const Checkpoint& ckpt) {
  auto model = net::Model::init(ckpt.net, 0);
  load_parameters(ckpt.arrays, "param/", net::named_parameters(model));
  return model;
}

}  // namespace mics::io
