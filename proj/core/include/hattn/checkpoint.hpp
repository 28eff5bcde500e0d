#pragma once

// Versioned binary checkpoint: named parameter tensors (name, dtype, shape,
// little-endian values), the non-trainable buffers, and optionally the Adam
// moments with the step counter and current learning rate. Loading validates
// the stored names and shapes exactly against the live parameter store.

#include <bit>
#include <cstdint>
#include <fstream>
#include <string>

#include "hattn/layers.hpp"
#include "hattn/optim.hpp"

namespace hattn {

static_assert(std::endian::native == std::endian::little,
              "checkpoint io assumes a little-endian host");

namespace detail {

constexpr char kCkptMagic[8] = {'H', 'A', 'T', 'N', 'C', 'K', 'P', 'T'};
constexpr std::uint32_t kCkptVersion = 1;

template <typename T>
constexpr std::uint8_t dtype_tag() {
  if constexpr (std::is_same_v<T, float>) return 0;
  else return 1;
}

inline void write_u32(std::ostream& os, std::uint32_t v) {
  os.write(reinterpret_cast<const char*>(&v), 4);
}
inline void write_u64(std::ostream& os, std::uint64_t v) {
  os.write(reinterpret_cast<const char*>(&v), 8);
}
inline void write_f64(std::ostream& os, double v) {
  os.write(reinterpret_cast<const char*>(&v), 8);
}
inline void write_str(std::ostream& os, const std::string& s) {
  write_u32(os, static_cast<std::uint32_t>(s.size()));
  os.write(s.data(), static_cast<std::streamsize>(s.size()));
}
inline std::uint32_t read_u32(std::istream& is) {
  std::uint32_t v = 0;
  is.read(reinterpret_cast<char*>(&v), 4);
  return v;
}
inline std::uint64_t read_u64(std::istream& is) {
  std::uint64_t v = 0;
  is.read(reinterpret_cast<char*>(&v), 8);
  return v;
}
inline double read_f64(std::istream& is) {
  double v = 0;
  is.read(reinterpret_cast<char*>(&v), 8);
  return v;
}
inline std::string read_str(std::istream& is) {
  const std::uint32_t n = read_u32(is);
  if (n > (1u << 20)) throw std::runtime_error("checkpoint: implausible string length");
  std::string s(n, '\0');
  is.read(s.data(), n);
  return s;
}

template <typename T>
void write_tensor(std::ostream& os, const std::string& name, const Tensor<T>& t) {
  write_str(os, name);
  const std::uint8_t tag = dtype_tag<T>();
  os.write(reinterpret_cast<const char*>(&tag), 1);
  const std::uint8_t rank = static_cast<std::uint8_t>(t.rank());
  os.write(reinterpret_cast<const char*>(&rank), 1);
  for (int d : t.shape()) write_u32(os, static_cast<std::uint32_t>(d));
  os.write(reinterpret_cast<const char*>(t.data()),
           static_cast<std::streamsize>(t.numel() * sizeof(T)));
}

template <typename T>
void read_tensor_into(std::istream& is, const std::string& expect_name, Tensor<T>& t) {
  const std::string name = read_str(is);
  if (name != expect_name)
    throw std::runtime_error("checkpoint: expected tensor '" + expect_name + "', found '" + name +
                             "'");
  std::uint8_t tag = 0, rank = 0;
  is.read(reinterpret_cast<char*>(&tag), 1);
  is.read(reinterpret_cast<char*>(&rank), 1);
  if (tag != dtype_tag<T>()) throw std::runtime_error("checkpoint: dtype mismatch for " + name);
  if (rank != t.rank()) throw std::runtime_error("checkpoint: rank mismatch for " + name);
  for (int i = 0; i < rank; ++i) {
    const std::uint32_t d = read_u32(is);
    if (static_cast<int>(d) != t.shape()[i])
      throw std::runtime_error("checkpoint: shape mismatch for " + name);
  }
  is.read(reinterpret_cast<char*>(t.data()),
          static_cast<std::streamsize>(t.numel() * sizeof(T)));
  if (!is) throw std::runtime_error("checkpoint: truncated file at " + name);
}

}  // namespace detail

template <typename T>
void save_checkpoint(const std::string& path, const ParamStore<T>& store,
                     const Adam<T>* optim = nullptr) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("cannot write checkpoint: " + path);
  os.write(detail::kCkptMagic, 8);
  detail::write_u32(os, detail::kCkptVersion);

  detail::write_u32(os, static_cast<std::uint32_t>(store.entries().size()));
  for (const auto& [name, t] : store.entries()) detail::write_tensor(os, name, t);
  detail::write_u32(os, static_cast<std::uint32_t>(store.buffers().size()));
  for (const auto& [name, t] : store.buffers()) detail::write_tensor(os, name, t);

  const std::uint8_t has_optim = optim ? 1 : 0;
  os.write(reinterpret_cast<const char*>(&has_optim), 1);
  if (optim) {
    detail::write_u64(os, static_cast<std::uint64_t>(optim->step_count()));
    detail::write_f64(os, optim->lr());
    detail::write_u32(os, static_cast<std::uint32_t>(optim->params().size()));
    auto* mutable_optim = const_cast<Adam<T>*>(optim);
    for (std::size_t i = 0; i < optim->params().size(); ++i) {
      detail::write_str(os, optim->params()[i].first);
      const auto& m = mutable_optim->moment1(i);
      const auto& v = mutable_optim->moment2(i);
      detail::write_u64(os, m.size());
      os.write(reinterpret_cast<const char*>(m.data()),
               static_cast<std::streamsize>(m.size() * sizeof(T)));
      os.write(reinterpret_cast<const char*>(v.data()),
               static_cast<std::streamsize>(v.size() * sizeof(T)));
    }
  }
  if (!os) throw std::runtime_error("checkpoint write failed: " + path);
}

// Loads parameters and buffers; the store must already hold tensors with the
// exact names and shapes written to the file.
template <typename T>
void load_checkpoint(const std::string& path, ParamStore<T>& store, Adam<T>* optim = nullptr) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("cannot read checkpoint: " + path);
  char magic[8];
  is.read(magic, 8);
  if (!is || std::string(magic, 8) != std::string(detail::kCkptMagic, 8))
    throw std::runtime_error("not a checkpoint file: " + path);
  if (detail::read_u32(is) != detail::kCkptVersion)
    throw std::runtime_error("unsupported checkpoint version in " + path);

  const std::uint32_t n_params = detail::read_u32(is);
  if (n_params != store.entries().size())
    throw std::runtime_error("checkpoint: parameter count mismatch (" + std::to_string(n_params) +
                             " stored, " + std::to_string(store.entries().size()) + " live)");
  for (const auto& [name, t] : store.entries()) {
    Tensor<T> dst = t;
    detail::read_tensor_into(is, name, dst);
  }
  const std::uint32_t n_buffers = detail::read_u32(is);
  if (n_buffers != store.buffers().size())
    throw std::runtime_error("checkpoint: buffer count mismatch");
  for (const auto& [name, t] : store.buffers()) {
    Tensor<T> dst = t;
    detail::read_tensor_into(is, name, dst);
  }

  std::uint8_t has_optim = 0;
  is.read(reinterpret_cast<char*>(&has_optim), 1);
  if (has_optim && optim) {
    optim->set_step_count(static_cast<std::int64_t>(detail::read_u64(is)));
    optim->set_lr(detail::read_f64(is));
    const std::uint32_t n = detail::read_u32(is);
    if (n != optim->params().size())
      throw std::runtime_error("checkpoint: optimizer state count mismatch");
    for (std::size_t i = 0; i < n; ++i) {
      const std::string name = detail::read_str(is);
      if (name != optim->params()[i].first)
        throw std::runtime_error("checkpoint: optimizer state for '" + name +
                                 "' does not match '" + optim->params()[i].first + "'");
      const std::uint64_t count = detail::read_u64(is);
      if (count != optim->moment1(i).size())
        throw std::runtime_error("checkpoint: moment size mismatch for " + name);
      is.read(reinterpret_cast<char*>(optim->moment1(i).data()),
              static_cast<std::streamsize>(count * sizeof(T)));
      is.read(reinterpret_cast<char*>(optim->moment2(i).data()),
              static_cast<std::streamsize>(count * sizeof(T)));
    }
  }
  if (!is) throw std::runtime_error("checkpoint: truncated file " + path);
}

}  // namespace hattn
