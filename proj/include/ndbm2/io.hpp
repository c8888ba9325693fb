#pragma once

// Model file layout (all integers little-endian):
//
//   "NDBM2"                      5 bytes magic
//   version                      u16, currently 1
//   config_len                   u32
//   config                       config_len bytes of UTF-8 JSON
//   tensor_count                 u32
//   tensor_count times, sorted by name:
//     name_len                   u32
//     name                       name_len bytes of UTF-8
//     rank                       u32
//     extents                    rank x u32
//     payload                    product(extents) x IEEE-754 binary32
//
// A standalone tensor file (used for `run` inputs and outputs) is exactly one
// tensor entry with no header.

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <istream>
#include <map>
#include <ostream>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "ndbm2/pipeline.hpp"

namespace ndbm2 {

inline constexpr char kMagic[5] = {'N', 'D', 'B', 'M', '2'};
inline constexpr std::uint16_t kFormatVersion = 1;

namespace detail {

inline void put_u16(std::ostream& os, std::uint16_t v) {
  const char b[2] = {static_cast<char>(v & 0xFF), static_cast<char>(v >> 8)};
  os.write(b, 2);
}

inline void put_u32(std::ostream& os, std::uint32_t v) {
  char b[4];
  for (int i = 0; i < 4; ++i) b[i] = static_cast<char>((v >> (8 * i)) & 0xFF);
  os.write(b, 4);
}

inline void read_exact(std::istream& is, char* dst, std::size_t n, const char* what) {
  is.read(dst, static_cast<std::streamsize>(n));
  if (static_cast<std::size_t>(is.gcount()) != n) {
    throw CorruptionError(std::string("truncated model data while reading ") + what);
  }
}

inline std::uint16_t get_u16(std::istream& is, const char* what) {
  unsigned char b[2];
  read_exact(is, reinterpret_cast<char*>(b), 2, what);
  return static_cast<std::uint16_t>(b[0] | (b[1] << 8));
}

inline std::uint32_t get_u32(std::istream& is, const char* what) {
  unsigned char b[4];
  read_exact(is, reinterpret_cast<char*>(b), 4, what);
  return static_cast<std::uint32_t>(b[0]) | (static_cast<std::uint32_t>(b[1]) << 8) |
         (static_cast<std::uint32_t>(b[2]) << 16) | (static_cast<std::uint32_t>(b[3]) << 24);
}

inline std::uint32_t checked_u32(std::size_t v, const char* what) {
  if (v > 0xFFFFFFFFu) throw ValidationError(std::string(what) + " does not fit in 32 bits");
  return static_cast<std::uint32_t>(v);
}

}  // namespace detail

template <typename T>
void write_tensor_entry(std::ostream& os, const std::string& name, const Tensor<T>& t) {
  detail::put_u32(os, detail::checked_u32(name.size(), "tensor name length"));
  os.write(name.data(), static_cast<std::streamsize>(name.size()));
  detail::put_u32(os, static_cast<std::uint32_t>(t.rank()));
  for (std::size_t e : t.shape()) detail::put_u32(os, detail::checked_u32(e, "tensor extent"));
  std::vector<char> buf(t.size() * 4);
  for (std::size_t i = 0; i < t.size(); ++i) {
    const auto bits = std::bit_cast<std::uint32_t>(static_cast<float>(t[i]));
    for (int k = 0; k < 4; ++k) buf[i * 4 + k] = static_cast<char>((bits >> (8 * k)) & 0xFF);
  }
  os.write(buf.data(), static_cast<std::streamsize>(buf.size()));
}

template <typename T>
std::pair<std::string, Tensor<T>> read_tensor_entry(std::istream& is) {
  const std::uint32_t name_len = detail::get_u32(is, "tensor name length");
  if (name_len > (1u << 16)) throw CorruptionError("implausible tensor name length");
  std::string name(name_len, '\0');
  detail::read_exact(is, name.data(), name_len, "tensor name");
  const std::uint32_t rank = detail::get_u32(is, "tensor rank");
  if (rank < 1 || rank > kMaxRank) throw CorruptionError("tensor '" + name + "' has invalid rank");
  Shape shape(rank);
  std::uint64_t count = 1;
  for (auto& e : shape) {
    e = detail::get_u32(is, "tensor extent");
    if (e == 0) throw CorruptionError("tensor '" + name + "' has a zero extent");
    count *= e;
    if (count > (std::uint64_t{1} << 32)) throw CorruptionError("tensor '" + name + "' is implausibly large");
  }
  std::vector<char> buf(count * 4);
  detail::read_exact(is, buf.data(), buf.size(), "tensor payload");
  std::vector<T> data(count);
  for (std::size_t i = 0; i < count; ++i) {
    std::uint32_t bits = 0;
    for (int k = 0; k < 4; ++k) bits |= static_cast<std::uint32_t>(static_cast<unsigned char>(buf[i * 4 + k])) << (8 * k);
    data[i] = static_cast<T>(std::bit_cast<float>(bits));
  }
  return {std::move(name), Tensor<T>(std::move(shape), std::move(data))};
}

template <typename T>
nlohmann::json config_json(const BiMamba2NdModel<T>& m) {
  nlohmann::json j;
  j["d_model"] = m.cfg.d_model;
  j["expand"] = m.cfg.expand;
  j["d_state"] = m.cfg.d_state;
  j["headdim"] = m.cfg.headdim;
  j["d_conv"] = m.cfg.d_conv;
  j["chunk"] = m.cfg.chunk;
  j["ngroups"] = m.cfg.ngroups;
  j["activation"] = to_string(m.cfg.activation);
  j["norm_eps"] = m.cfg.norm_eps;
  j["c_in"] = m.c_in;
  j["c_out"] = m.c_out;
  j["spatial_rank"] = m.spatial_rank;
  j["bidirectional"] = m.bidirectional;
  j["premix"] = m.premix.has_value();
  if (m.premix) j["premix_kernel"] = m.premix->forward.kernel;
  return j;
}

namespace detail {

template <typename T>
std::map<std::string, const Tensor<T>*> named_tensors(const BiMamba2NdModel<T>& m) {
  std::map<std::string, const Tensor<T>*> out;
  out["fc_in.weight"] = &m.fc_in_weight;
  out["fc_in.bias"] = &m.fc_in_bias;
  out["fc_out.weight"] = &m.fc_out_weight;
  out["fc_out.bias"] = &m.fc_out_bias;
  m.core_forward.for_each([&](const char* n, const Tensor<T>& t) { out[std::string("core_fwd.") + n] = &t; });
  if (m.core_backward) {
    m.core_backward->for_each([&](const char* n, const Tensor<T>& t) { out[std::string("core_bwd.") + n] = &t; });
  }
  if (m.premix) {
    out["premix_fwd.weight"] = &m.premix->forward.weight;
    out["premix_fwd.bias"] = &*m.premix->forward.bias;
    out["premix_bwd.weight"] = &m.premix->backward.weight;
    out["premix_bwd.bias"] = &*m.premix->backward.bias;
  }
  return out;
}

}  // namespace detail

/// Writes the model; tensors are emitted in name order so the bytes are a
/// pure function of the model.
template <typename T>
void save(const BiMamba2NdModel<T>& model, std::ostream& os) {
  model.validate();
  os.write(kMagic, sizeof(kMagic));
  detail::put_u16(os, kFormatVersion);
  const std::string cfg = config_json(model).dump();
  detail::put_u32(os, detail::checked_u32(cfg.size(), "config length"));
  os.write(cfg.data(), static_cast<std::streamsize>(cfg.size()));
  const auto tensors = detail::named_tensors(model);
  detail::put_u32(os, static_cast<std::uint32_t>(tensors.size()));
  for (const auto& [name, t] : tensors) write_tensor_entry(os, name, *t);
  if (!os) throw IoError("failed to write model data");
}

template <typename T = float>
BiMamba2NdModel<T> load(std::istream& is) {
  char magic[sizeof(kMagic)];
  is.read(magic, sizeof(magic));
  if (static_cast<std::size_t>(is.gcount()) != sizeof(magic) ||
      std::memcmp(magic, kMagic, sizeof(kMagic)) != 0) {
    throw FormatError("not an NDBM2 model file (bad magic)");
  }
  const std::uint16_t version = detail::get_u16(is, "version");
  if (version != kFormatVersion) {
    throw VersionError("unsupported model file version " + std::to_string(version) +
                       " (this build reads version " + std::to_string(kFormatVersion) + ")");
  }
  const std::uint32_t cfg_len = detail::get_u32(is, "config length");
  if (cfg_len > (1u << 24)) throw CorruptionError("implausible config length");
  std::string cfg_text(cfg_len, '\0');
  detail::read_exact(is, cfg_text.data(), cfg_len, "config");

  BiMamba2NdModel<T> m;
  std::vector<std::size_t> premix_kernel;
  bool has_premix = false;
  try {
    const auto j = nlohmann::json::parse(cfg_text);
    m.cfg.d_model = j.at("d_model").get<std::size_t>();
    m.cfg.expand = j.at("expand").get<std::size_t>();
    m.cfg.d_state = j.at("d_state").get<std::size_t>();
    m.cfg.headdim = j.at("headdim").get<std::size_t>();
    m.cfg.d_conv = j.at("d_conv").get<std::size_t>();
    m.cfg.chunk = j.at("chunk").get<std::size_t>();
    m.cfg.ngroups = j.at("ngroups").get<std::size_t>();
    m.cfg.activation = activation_from_string(j.at("activation").get<std::string>());
    m.cfg.norm_eps = j.at("norm_eps").get<double>();
    m.c_in = j.at("c_in").get<std::size_t>();
    m.c_out = j.at("c_out").get<std::size_t>();
    m.spatial_rank = j.at("spatial_rank").get<std::size_t>();
    m.bidirectional = j.at("bidirectional").get<bool>();
    has_premix = j.at("premix").get<bool>();
    if (has_premix) premix_kernel = j.at("premix_kernel").get<std::vector<std::size_t>>();
  } catch (const nlohmann::json::exception& e) {
    throw CorruptionError(std::string("model config is not valid: ") + e.what());
  }
  m.cfg.validate();

  const std::uint32_t count = detail::get_u32(is, "tensor count");
  std::map<std::string, Tensor<T>> tensors;
  for (std::uint32_t i = 0; i < count; ++i) {
    auto [name, t] = read_tensor_entry<T>(is);
    if (!tensors.emplace(name, std::move(t)).second) {
      throw ValidationError("duplicate tensor '" + name + "'");
    }
  }
  if (is.peek() != std::char_traits<char>::eof()) throw CorruptionError("trailing bytes after tensor table");

  auto take = [&](const std::string& name) {
    auto it = tensors.find(name);
    if (it == tensors.end()) throw ValidationError("missing tensor '" + name + "'");
    Tensor<T> t = std::move(it->second);
    tensors.erase(it);
    return t;
  };
  m.fc_in_weight = take("fc_in.weight");
  m.fc_in_bias = take("fc_in.bias");
  m.fc_out_weight = take("fc_out.weight");
  m.fc_out_bias = take("fc_out.bias");
  auto take_core = [&](const std::string& prefix) {
    Mamba2Weights<T> w;
    w.for_each([&](const char* n, Tensor<T>& t) { t = take(prefix + n); });
    return w;
  };
  m.core_forward = take_core("core_fwd.");
  if (m.bidirectional) m.core_backward = take_core("core_bwd.");
  if (has_premix) {
    Premix<T> p;
    for (auto [prefix, spec] : {std::pair{"premix_fwd", &p.forward}, std::pair{"premix_bwd", &p.backward}}) {
      spec->kernel = premix_kernel;
      spec->stride.assign(premix_kernel.size(), 1);
      spec->channels = m.c_in;
      spec->depthwise = true;
      spec->weight = take(std::string(prefix) + ".weight");
      spec->bias = take(std::string(prefix) + ".bias");
    }
    m.premix = std::move(p);
  }
  if (!tensors.empty()) throw ValidationError("unexpected tensor '" + tensors.begin()->first + "'");
  m.validate();
  return m;
}

template <typename T>
void save_file(const BiMamba2NdModel<T>& model, const std::string& path) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("cannot open '" + path + "' for writing");
  save(model, os);
}

template <typename T = float>
BiMamba2NdModel<T> load_file(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open '" + path + "' for reading");
  return load<T>(is);
}

template <typename T>
void save_tensor_file(const Tensor<T>& t, const std::string& path, const std::string& name = "tensor") {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("cannot open '" + path + "' for writing");
  write_tensor_entry(os, name, t);
  if (!os) throw IoError("failed to write '" + path + "'");
}

template <typename T = float>
Tensor<T> load_tensor_file(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open '" + path + "' for reading");
  auto entry = read_tensor_entry<T>(is);
  if (is.peek() != std::char_traits<char>::eof()) throw CorruptionError("trailing bytes in tensor file");
  return std::move(entry.second);
}

}  // namespace ndbm2
