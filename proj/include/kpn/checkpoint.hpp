#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "kpn/data.hpp"
#include "kpn/network.hpp"
#include "kpn/projection.hpp"

namespace kpn {

// Binary layout, little endian:
//   "KPNC" | u32 version | u32 metadata bytes | metadata JSON
//   u32 tensor count, then per tensor:
//   u32 name bytes | name | u8 dtype (0 = f32, 1 = f64) | u32 rank | u64 extents... | raw values
inline constexpr char checkpoint_magic[4] = {'K', 'P', 'N', 'C'};
inline constexpr std::uint32_t checkpoint_version = 1;

enum class DType : std::uint8_t { f32 = 0, f64 = 1 };

template <typename Real>
constexpr DType dtype_of() {
  return sizeof(Real) == 4 ? DType::f32 : DType::f64;
}

struct StoredTensor {
  std::string name;
  Shape shape;
  DType dtype = DType::f32;
  std::vector<double> values;  // widened; f32 round-trips exactly
};

struct Checkpoint {
  nlohmann::json metadata = nlohmann::json::object();
  std::vector<StoredTensor> tensors;

  const StoredTensor* find(const std::string& name) const {
    for (const auto& t : tensors) {
      if (t.name == name) return &t;
    }
    return nullptr;
  }
};

namespace detail {

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

template <typename T>
void put_raw(std::string& out, T v) {
  char buf[sizeof(T)];
  std::memcpy(buf, &v, sizeof(T));
  out.append(buf, sizeof(T));
}

class Reader {
 public:
  Reader(const std::string& bytes, std::string path) : bytes_(bytes), path_(std::move(path)) {}

  template <typename T>
  T get() {
    need(sizeof(T));
    T v;
    std::memcpy(&v, bytes_.data() + pos_, sizeof(T));
    pos_ += sizeof(T);
    return v;
  }

  std::string take(std::size_t n) {
    need(n);
    std::string s = bytes_.substr(pos_, n);
    pos_ += n;
    return s;
  }

  bool done() const { return pos_ == bytes_.size(); }

 private:
  void need(std::size_t n) const {
    if (bytes_.size() - pos_ < n) throw DataError(DataError::Kind::truncated, path_ + ": truncated checkpoint");
  }

  const std::string& bytes_;
  std::string path_;
  std::size_t pos_ = 0;
};

}  // namespace detail

inline std::string serialize_checkpoint(const Checkpoint& c) {
  std::string out(checkpoint_magic, 4);
  detail::put_raw<std::uint32_t>(out, checkpoint_version);
  const std::string meta = c.metadata.dump();
  detail::put_raw<std::uint32_t>(out, static_cast<std::uint32_t>(meta.size()));
  out += meta;
  detail::put_raw<std::uint32_t>(out, static_cast<std::uint32_t>(c.tensors.size()));
  for (const auto& t : c.tensors) {
    if (shape_numel(t.shape) != t.values.size()) throw ShapeError("checkpoint tensor '" + t.name + "' size mismatch");
    detail::put_raw<std::uint32_t>(out, static_cast<std::uint32_t>(t.name.size()));
    out += t.name;
    detail::put_raw<std::uint8_t>(out, static_cast<std::uint8_t>(t.dtype));
    detail::put_raw<std::uint32_t>(out, static_cast<std::uint32_t>(t.shape.size()));
    for (auto e : t.shape) detail::put_raw<std::uint64_t>(out, e);
    for (double v : t.values) {
      if (t.dtype == DType::f32) {
        detail::put_raw<float>(out, static_cast<float>(v));
      } else {
        detail::put_raw<double>(out, v);
      }
    }
  }
  return out;
}

inline Checkpoint parse_checkpoint(const std::string& bytes, const std::string& path = "<memory>") {
  detail::Reader in(bytes, path);
  if (bytes.size() < 4 || bytes.compare(0, 4, checkpoint_magic, 4) != 0) {
    throw DataError(bytes.size() < 4 ? DataError::Kind::truncated : DataError::Kind::bad_magic,
                    path + ": not a KPNC checkpoint");
  }
  in.take(4);
  const auto version = in.get<std::uint32_t>();
  if (version != checkpoint_version) {
    throw DataError(DataError::Kind::invalid, path + ": unsupported checkpoint version " + std::to_string(version));
  }
  Checkpoint c;
  const auto meta_len = in.get<std::uint32_t>();
  try {
    c.metadata = nlohmann::json::parse(in.take(meta_len));
  } catch (const nlohmann::json::exception& e) {
    throw DataError(DataError::Kind::invalid, path + ": bad checkpoint metadata: " + e.what());
  }
  const auto count = in.get<std::uint32_t>();
  for (std::uint32_t i = 0; i < count; ++i) {
    StoredTensor t;
    t.name = in.take(in.get<std::uint32_t>());
    const auto tag = in.get<std::uint8_t>();
    if (tag > 1) throw DataError(DataError::Kind::invalid, path + ": unknown dtype tag for '" + t.name + "'");
    t.dtype = static_cast<DType>(tag);
    const auto rank = in.get<std::uint32_t>();
    if (rank > 8) throw DataError(DataError::Kind::invalid, path + ": implausible rank for '" + t.name + "'");
    std::size_t n = 1;
    for (std::uint32_t r = 0; r < rank; ++r) {
      t.shape.push_back(static_cast<std::size_t>(in.get<std::uint64_t>()));
      n *= t.shape.back();
    }
    if (n > bytes.size()) throw DataError(DataError::Kind::truncated, path + ": truncated checkpoint");
    t.values.resize(n);
    for (auto& v : t.values) v = t.dtype == DType::f32 ? static_cast<double>(in.get<float>()) : in.get<double>();
    c.tensors.push_back(std::move(t));
  }
  if (!in.done()) throw DataError(DataError::Kind::invalid, path + ": trailing bytes after checkpoint");
  return c;
}

inline void save_checkpoint(const std::filesystem::path& path, const Checkpoint& c) {
  const std::string bytes = serialize_checkpoint(c);
  write_file_atomic(path, std::span<const std::uint8_t>(reinterpret_cast<const std::uint8_t*>(bytes.data()), bytes.size()));
}

inline Checkpoint load_checkpoint(const std::filesystem::path& path) {
  const auto raw = detail::read_file(path);
  return parse_checkpoint(std::string(raw.begin(), raw.end()), path.string());
}

// ---------------------------------------------------------------------------
// Networks

template <typename Real>
StoredTensor store(const std::string& name, const Shape& shape, std::span<const Real> values) {
  return {name, shape, dtype_of<Real>(), std::vector<double>(values.begin(), values.end())};
}

// Appends a network's parameters and batch-norm running statistics. Names
// are rewritten to use `prefix` in place of the network's own prefix.
template <typename Real>
void append_network(Checkpoint& c, const Network<Real>& net, const std::string& prefix) {
  const auto& layers = net.layers();
  for (std::size_t i = 0; i < layers.size(); ++i) {
    const std::string base = prefix + "." + std::to_string(i) + ".";
    const auto& st = layers[i];
    const std::pair<const char*, const std::optional<Parameter<Real>>*> slots[] = {
        {"weight", &st.weight}, {"bias", &st.bias}, {"gamma", &st.gamma}, {"beta", &st.beta}, {"adapter", &st.adapter}};
    for (const auto& [label, slot] : slots) {
      if (*slot) c.tensors.push_back(store<Real>(base + label, (*slot)->tensor.shape(), (*slot)->tensor.values()));
    }
    if (st.bn) {
      const Shape s{st.bn->running_mean.size()};
      c.tensors.push_back(store<Real>(base + "running_mean", s, st.bn->running_mean));
      c.tensors.push_back(store<Real>(base + "running_var", s, st.bn->running_var));
    }
  }
}

namespace detail {

template <typename Real>
void restore_values(const Checkpoint& c, const std::string& name, const Shape& shape, std::span<Real> dst) {
  const auto* t = c.find(name);
  if (!t) throw DataError(DataError::Kind::invalid, "checkpoint is missing tensor '" + name + "'");
  if (t->shape != shape) {
    throw DataError(DataError::Kind::invalid, "checkpoint tensor '" + name + "' has shape " + shape_str(t->shape) +
                                                  ", expected " + shape_str(shape));
  }
  for (std::size_t i = 0; i < dst.size(); ++i) dst[i] = static_cast<Real>(t->values[i]);
}

}  // namespace detail

// Overwrites every parameter and running statistic of `net` from `c`.
template <typename Real>
void restore_network(const Checkpoint& c, Network<Real>& net, const std::string& prefix) {
  auto& layers = net.layers();
  for (std::size_t i = 0; i < layers.size(); ++i) {
    const std::string base = prefix + "." + std::to_string(i) + ".";
    auto& st = layers[i];
    const std::pair<const char*, std::optional<Parameter<Real>>*> slots[] = {
        {"weight", &st.weight}, {"bias", &st.bias}, {"gamma", &st.gamma}, {"beta", &st.beta}, {"adapter", &st.adapter}};
    for (const auto& [label, slot] : slots) {
      if (!*slot) continue;
      auto& tensor = (*slot)->tensor;
      detail::restore_values<Real>(c, base + label, tensor.shape(), tensor.mutable_values());
    }
    if (st.bn) {
      const Shape s{st.bn->running_mean.size()};
      detail::restore_values<Real>(c, base + "running_mean", s, st.bn->running_mean);
      detail::restore_values<Real>(c, base + "running_var", s, st.bn->running_var);
    }
  }
}

// Standalone network checkpoint: metadata {"kind": "network", "arch": ...}
// and tensors named "net.*".
template <typename Real>
Checkpoint network_checkpoint(const Network<Real>& net, nlohmann::json extra = nlohmann::json::object()) {
  Checkpoint c;
  c.metadata = std::move(extra);
  c.metadata["kind"] = "network";
  c.metadata["arch"] = to_json(net.architecture());
  append_network(c, net, "net");
  return c;
}

inline Architecture checkpoint_arch(const Checkpoint& c, const char* key = "arch") {
  if (!c.metadata.contains(key)) throw DataError(DataError::Kind::invalid, std::string("checkpoint has no '") + key + "'");
  try {
    return architecture_from_json(c.metadata.at(key));
  } catch (const ConfigError& e) {
    throw DataError(DataError::Kind::invalid, std::string("checkpoint architecture: ") + e.what());
  }
}

template <typename Real>
Network<Real> network_from_checkpoint(const Checkpoint& c, const std::string& prefix = "net") {
  if (c.metadata.value("kind", "") != "network") {
    throw DataError(DataError::Kind::invalid, "checkpoint does not hold a standalone network");
  }
  Network<Real> net(checkpoint_arch(c), prefix, 0);
  restore_network(c, net, "net");
  return net;
}

// KPN checkpoint: student tensors "student.*", the projection matrix
// "projection.weight" and the route in the metadata.
template <typename Real>
Checkpoint kpn_checkpoint(const Network<Real>& student, const ProjectionLayer<Real>& proj, std::size_t knowledge,
                          std::size_t injection, nlohmann::json extra = nlohmann::json::object()) {
  Checkpoint c;
  c.metadata = std::move(extra);
  c.metadata["kind"] = "kpn";
  c.metadata["arch"] = to_json(student.architecture());
  c.metadata["route"] = {{"knowledge", knowledge}, {"injection", injection}};
  append_network(c, student, "student");
  c.tensors.push_back(store<Real>("projection.weight", proj.weight.tensor.shape(), proj.weight.tensor.values()));
  return c;
}

// Student half of a KPN checkpoint as a standalone network checkpoint.
inline Checkpoint strip_to_student(const Checkpoint& kpn) {
  if (kpn.metadata.value("kind", "") != "kpn") throw DataError(DataError::Kind::invalid, "checkpoint is not a KPN checkpoint");
  Checkpoint out;
  out.metadata = {{"kind", "network"}, {"arch", kpn.metadata.at("arch")}};
  for (const auto& t : kpn.tensors) {
    if (t.name.rfind("student.", 0) == 0) {
      StoredTensor copy = t;
      copy.name = "net." + t.name.substr(8);
      out.tensors.push_back(std::move(copy));
    }
  }
  return out;
}

}  // namespace kpn
