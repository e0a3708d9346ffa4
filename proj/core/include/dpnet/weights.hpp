#pragma once

// Named weight storage, deterministic initialization, and the bit-exact
// binary file format:
//   magic "DPNW" | version u32=1 | count u32
//   per entry: name_len u16 | name bytes | dtype u8 (0=f32,1=f64) |
//              rank u8 | dims u32 each | raw little-endian values

#include <cstdint>
#include <cstring>
#include <fstream>
#include <map>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

#include "dpnet/tensor.hpp"

namespace dpnet {

class FormatError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

template <typename T>
struct ParamRef {
  std::string name;
  Tensor<T> tensor;
  bool weight_decay = true;  // BN/LN affines opt out
};

template <typename T>
class WeightStore {
 public:
  using Map = std::map<std::string, Tensor<T>>;

  bool has(const std::string& name) const { return entries_.count(name) > 0; }

  Tensor<T>& at(const std::string& name) {
    auto it = entries_.find(name);
    if (it == entries_.end()) throw std::runtime_error("missing weight: " + name);
    return it->second;
  }
  const Tensor<T>& at(const std::string& name) const {
    auto it = entries_.find(name);
    if (it == entries_.end()) throw std::runtime_error("missing weight: " + name);
    return it->second;
  }

  void put(const std::string& name, Tensor<T> t) {
    if (name.empty()) throw std::runtime_error("weight names must be nonempty");
    if (!entries_.emplace(name, std::move(t)).second)
      throw std::runtime_error("duplicate weight name: " + name);
  }

  // Returns the stored tensor if present (validating its shape), otherwise
  // stores the provided one. Lets a loaded store drive a fresh build.
  Tensor<T>& get_or_put(const std::string& name, Tensor<T> fresh) {
    auto it = entries_.find(name);
    if (it != entries_.end()) {
      if (it->second.shape() != fresh.shape())
        shape_fail("weight " + name + " has shape " + shape_str(it->second.shape()) +
                   " but the graph expects " + shape_str(fresh.shape()));
      return it->second;
    }
    return entries_.emplace(name, std::move(fresh)).first->second;
  }

  const Map& entries() const { return entries_; }
  Map& entries() { return entries_; }
  std::size_t size() const { return entries_.size(); }

 private:
  Map entries_;
};

// ---------------------------------------------------------------------------
// Initialization. Each tensor draws from an RNG seeded by (global seed, name)
// so results do not depend on build order or on which slots were preloaded.

namespace detail {

inline std::uint64_t name_seed(std::uint64_t seed, const std::string& name) {
  std::uint64_t h = 1469598103934665603ull ^ seed;
  for (unsigned char c : name) {
    h ^= c;
    h *= 1099511628211ull;
  }
  return h;
}

}  // namespace detail

template <typename T>
class WeightBuilder {
 public:
  WeightBuilder(WeightStore<T>& store, std::uint64_t seed, std::vector<ParamRef<T>>* params)
      : store_(store), seed_(seed), params_(params) {}

  Tensor<T> kaiming_uniform(const std::string& name, Shape shape, std::int64_t fan_in) {
    std::mt19937_64 rng(detail::name_seed(seed_, name));
    const double bound = std::sqrt(6.0 / static_cast<double>(fan_in));
    std::uniform_real_distribution<double> dist(-bound, bound);
    std::vector<T> v(static_cast<std::size_t>(shape_numel(shape)));
    for (auto& x : v) x = static_cast<T>(dist(rng));
    return track(name, Tensor<T>::from(std::move(shape), std::move(v)), true);
  }

  Tensor<T> constant(const std::string& name, Shape shape, T value, bool decay) {
    return track(name, Tensor<T>::full(std::move(shape), value), decay);
  }

  // Non-trainable state (batch-norm running statistics).
  Tensor<T> buffer(const std::string& name, Shape shape, T value) {
    return store_.get_or_put(name, Tensor<T>::full(std::move(shape), value));
  }

 private:
  Tensor<T> track(const std::string& name, Tensor<T> fresh, bool decay) {
    Tensor<T>& t = store_.get_or_put(name, std::move(fresh));
    t.set_requires_grad(true);
    if (params_) params_->push_back({name, t, decay});
    return t;
  }

  WeightStore<T>& store_;
  std::uint64_t seed_;
  std::vector<ParamRef<T>>* params_;
};

// ---------------------------------------------------------------------------
// Binary serialization

namespace detail {

template <typename U>
void write_raw(std::ostream& os, const U& v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof(U));
}

template <typename U>
U read_raw(std::istream& is) {
  U v;
  is.read(reinterpret_cast<char*>(&v), sizeof(U));
  if (!is) throw FormatError("weight file truncated");
  return v;
}

template <typename T>
constexpr std::uint8_t dtype_tag() {
  return std::is_same_v<T, float> ? 0 : 1;
}

}  // namespace detail

inline constexpr char kWeightMagic[4] = {'D', 'P', 'N', 'W'};
inline constexpr std::uint32_t kWeightVersion = 1;

template <typename T>
void save_weights(const WeightStore<T>& store, const std::string& path) {
  for (const auto& [name, t] : store.entries())
    if (!all_finite(t)) throw std::runtime_error("refusing to save non-finite weight: " + name);
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("cannot open for writing: " + path);
  os.write(kWeightMagic, 4);
  detail::write_raw(os, kWeightVersion);
  detail::write_raw(os, static_cast<std::uint32_t>(store.size()));
  for (const auto& [name, t] : store.entries()) {
    detail::write_raw(os, static_cast<std::uint16_t>(name.size()));
    os.write(name.data(), static_cast<std::streamsize>(name.size()));
    detail::write_raw(os, detail::dtype_tag<T>());
    detail::write_raw(os, static_cast<std::uint8_t>(t.rank()));
    for (int d : t.shape()) detail::write_raw(os, static_cast<std::uint32_t>(d));
    os.write(reinterpret_cast<const char*>(t.values().data()),
             static_cast<std::streamsize>(t.values().size() * sizeof(T)));
  }
  if (!os) throw std::runtime_error("write failed: " + path);
}

template <typename T>
WeightStore<T> load_weights(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("cannot open for reading: " + path);
  char magic[4];
  is.read(magic, 4);
  if (!is || std::memcmp(magic, kWeightMagic, 4) != 0)
    throw FormatError("bad weight-file magic \"" + std::string(magic, is ? 4 : 0) + "\", expected \"DPNW\"");
  const auto version = detail::read_raw<std::uint32_t>(is);
  if (version != kWeightVersion)
    throw FormatError("unsupported weight-file version " + std::to_string(version));
  const auto count = detail::read_raw<std::uint32_t>(is);
  WeightStore<T> store;
  for (std::uint32_t i = 0; i < count; ++i) {
    const auto name_len = detail::read_raw<std::uint16_t>(is);
    std::string name(name_len, '\0');
    is.read(name.data(), name_len);
    if (!is) throw FormatError("weight file truncated in entry name");
    const auto dtype = detail::read_raw<std::uint8_t>(is);
    if (dtype != detail::dtype_tag<T>())
      throw FormatError("weight " + name + " has dtype tag " + std::to_string(dtype) +
                        ", store expects " + std::to_string(detail::dtype_tag<T>()));
    const auto rank = detail::read_raw<std::uint8_t>(is);
    Shape shape(rank);
    for (auto& d : shape) d = static_cast<int>(detail::read_raw<std::uint32_t>(is));
    std::vector<T> values(static_cast<std::size_t>(shape_numel(shape)));
    is.read(reinterpret_cast<char*>(values.data()),
            static_cast<std::streamsize>(values.size() * sizeof(T)));
    if (!is) throw FormatError("weight file truncated in entry " + name);
    store.put(name, Tensor<T>::from(std::move(shape), std::move(values)));
  }
  return store;
}

}  // namespace dpnet
