#pragma once

// Flat binary container of named tensors.
//
//   magic "NCOT" | u32 version | u64 header length | header (JSON text)
//   u64 tensor count | per tensor: u32 name length, name, u32 rank,
//   u64 dims[rank], f64 data[numel]
//
// All integers and floats little-endian.

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <istream>
#include <map>
#include <ostream>
#include <stdexcept>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "nco/model.hpp"
#include "nco/tensor.hpp"

namespace nco {

inline constexpr char kContainerMagic[4] = {'N', 'C', 'O', 'T'};
inline constexpr std::uint32_t kContainerVersion = 1;

class FormatError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct NamedTensor {
  std::string name;
  Tensor value;
};

struct Container {
  nlohmann::json header;
  std::vector<NamedTensor> tensors;

  const Tensor* find(const std::string& name) const {
    for (const auto& t : tensors)
      if (t.name == name) return &t.value;
    return nullptr;
  }
  const Tensor& at(const std::string& name) const {
    if (const Tensor* t = find(name)) return *t;
    throw FormatError("container has no tensor '" + name + "'");
  }
};

namespace detail {

template <class T>
void put_le(std::ostream& out, T v) {
  static_assert(std::is_integral_v<T>);
  unsigned char b[sizeof(T)];
  for (std::size_t i = 0; i < sizeof(T); ++i) b[i] = static_cast<unsigned char>((static_cast<std::uint64_t>(v) >> (8 * i)) & 0xff);
  out.write(reinterpret_cast<const char*>(b), sizeof(T));
}

template <class T>
T get_le(std::istream& in) {
  unsigned char b[sizeof(T)];
  if (!in.read(reinterpret_cast<char*>(b), sizeof(T))) throw FormatError("truncated container");
  std::uint64_t v = 0;
  for (std::size_t i = 0; i < sizeof(T); ++i) v |= static_cast<std::uint64_t>(b[i]) << (8 * i);
  return static_cast<T>(v);
}

inline std::string get_bytes(std::istream& in, std::uint64_t len) {
  if (len > (std::uint64_t{1} << 32)) throw FormatError("implausible length in container");
  std::string s(len, '\0');
  if (len > 0 && !in.read(s.data(), static_cast<std::streamsize>(len))) throw FormatError("truncated container");
  return s;
}

}  // namespace detail

inline void write_container(std::ostream& out, const Container& c) {
  out.write(kContainerMagic, 4);
  detail::put_le<std::uint32_t>(out, kContainerVersion);
  const std::string header = c.header.dump();
  detail::put_le<std::uint64_t>(out, header.size());
  out.write(header.data(), static_cast<std::streamsize>(header.size()));
  detail::put_le<std::uint64_t>(out, c.tensors.size());
  for (const auto& [name, t] : c.tensors) {
    detail::put_le<std::uint32_t>(out, static_cast<std::uint32_t>(name.size()));
    out.write(name.data(), static_cast<std::streamsize>(name.size()));
    detail::put_le<std::uint32_t>(out, static_cast<std::uint32_t>(t.shape().size()));
    for (std::size_t dim : t.shape()) detail::put_le<std::uint64_t>(out, dim);
    for (double v : t.data()) detail::put_le<std::uint64_t>(out, std::bit_cast<std::uint64_t>(v));
  }
  if (!out) throw std::runtime_error("failed writing tensor container");
}

inline Container read_container(std::istream& in) {
  char magic[4];
  if (!in.read(magic, 4) || std::memcmp(magic, kContainerMagic, 4) != 0) {
    throw FormatError("not a tensor container (bad magic)");
  }
  const auto version = detail::get_le<std::uint32_t>(in);
  if (version != kContainerVersion) {
    throw FormatError("unsupported container version " + std::to_string(version));
  }
  Container c;
  try {
    c.header = nlohmann::json::parse(detail::get_bytes(in, detail::get_le<std::uint64_t>(in)));
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("bad container header: ") + e.what());
  }
  const auto count = detail::get_le<std::uint64_t>(in);
  for (std::uint64_t i = 0; i < count; ++i) {
    NamedTensor nt;
    nt.name = detail::get_bytes(in, detail::get_le<std::uint32_t>(in));
    const auto rank = detail::get_le<std::uint32_t>(in);
    if (rank > 8) throw FormatError("implausible rank for tensor '" + nt.name + "'");
    Shape shape(rank);
    for (auto& dim : shape) dim = detail::get_le<std::uint64_t>(in);
    if (shape_numel(shape) > (std::size_t{1} << 31)) throw FormatError("implausible size for '" + nt.name + "'");
    nt.value = Tensor(shape);
    for (auto& v : nt.value.data()) v = std::bit_cast<double>(detail::get_le<std::uint64_t>(in));
    c.tensors.push_back(std::move(nt));
  }
  return c;
}

inline void save_container(const std::string& path, const Container& c) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot open '" + path + "' for writing");
  write_container(out, c);
}

inline Container load_container(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open '" + path + "'");
  return read_container(in);
}

inline nlohmann::json to_json(const ModelConfig& cfg) {
  return {{"encoder", to_string(cfg.encoder.kind)},
          {"layers", cfg.encoder.layers},
          {"embed_dim", cfg.encoder.embed_dim},
          {"heads", cfg.encoder.heads},
          {"ff_dim", cfg.encoder.ff_dim},
          {"clip", cfg.clip},
          {"init_seed", cfg.init_seed}};
}

inline ModelConfig model_config_from_json(const nlohmann::json& j) {
  try {
    ModelConfig cfg;
    cfg.encoder.kind = parse_encoder_kind(j.at("encoder").get<std::string>());
    cfg.encoder.layers = j.at("layers").get<std::size_t>();
    cfg.encoder.embed_dim = j.at("embed_dim").get<std::size_t>();
    cfg.encoder.heads = j.at("heads").get<std::size_t>();
    cfg.encoder.ff_dim = j.at("ff_dim").get<std::size_t>();
    cfg.clip = j.at("clip").get<double>();
    cfg.init_seed = j.at("init_seed").get<std::uint64_t>();
    cfg.validate();
    return cfg;
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("bad model config in header: ") + e.what());
  }
}

/// Trainable parameters in registration order, then batch-norm buffers.
inline void append_tensors(const ParameterStore& store, std::vector<NamedTensor>& out) {
  for (const Parameter* p : store.params()) out.push_back({p->name, p->value});
  for (const auto& [name, buf] : store.buffers()) out.push_back({name, buf});
}

/// Overwrites every parameter and buffer of `store` from `c`; shapes must match.
inline void restore_tensors(const Container& c, ParameterStore& store) {
  auto assign = [&](const std::string& name, Tensor& dst) {
    const Tensor& src = c.at(name);
    if (src.shape() != dst.shape()) {
      throw FormatError("shape mismatch for '" + name + "': stored " + shape_str(src.shape()) +
                        ", expected " + shape_str(dst.shape()));
    }
    dst = src;
  };
  for (Parameter* p : store.params()) assign(p->name, p->value);
  for (auto& [name, buf] : store.buffers()) assign(name, buf);
}

inline Container model_container(const PolicyModel& model) {
  Container c;
  c.header = {{"kind", "model"}, {"model", to_json(model.config())}};
  append_tensors(model.params(), c.tensors);
  return c;
}

inline PolicyModel model_from_container(const Container& c) {
  if (!c.header.contains("model")) throw FormatError("container carries no model config");
  PolicyModel model(model_config_from_json(c.header.at("model")));
  restore_tensors(c, model.params());
  return model;
}

inline void save_model(const std::string& path, const PolicyModel& model) {
  save_container(path, model_container(model));
}

inline PolicyModel load_model(const std::string& path) { return model_from_container(load_container(path)); }

}  // namespace nco
