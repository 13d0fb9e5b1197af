#pragma once

#include <cstdint>
#include <map>
#include <stdexcept>
#include <string>

#include "vla3d/nn/autodiff.hpp"
#include "vla3d/nn/tensor.hpp"

namespace vla3d::nn {

class unknown_param : public std::out_of_range {
 public:
  explicit unknown_param(const std::string& name) : std::out_of_range("unknown parameter '" + name + "'") {}
};

struct Param {
  Tensor value;
  bool trainable = true;
};

/// Named parameters. Random initializers draw from a stream derived from
/// (seed, name), so initialization does not depend on registration order.
class ParamStore {
 public:
  explicit ParamStore(std::uint64_t seed = 0) : seed_(seed) {}

  std::uint64_t seed() const { return seed_; }

  Tensor& add(const std::string& name, Tensor value, bool trainable = true);
  Tensor& add_truncated_normal(const std::string& name, Shape shape, double std = 0.02);
  Tensor& add_constant(const std::string& name, Shape shape, double value);

  bool contains(const std::string& name) const { return params_.count(name) != 0; }
  const Param& get(const std::string& name) const;
  Param& get(const std::string& name);
  const Tensor& value(const std::string& name) const { return get(name).value; }
  Tensor& value(const std::string& name) { return get(name).value; }

  /// Sets the trainable flag of every parameter whose name starts with `prefix`.
  std::size_t set_trainable(const std::string& prefix, bool trainable);

  const std::map<std::string, Param>& all() const { return params_; }
  std::map<std::string, Param>& all() { return params_; }
  std::size_t num_scalars() const;

  friend bool operator==(const ParamStore& a, const ParamStore& b);

 private:
  std::uint64_t seed_;
  std::map<std::string, Param> params_;
};

/// Parameter view for one forward pass. With a tape, trainable parameters
/// become gradient leaves; otherwise (or for frozen ones) they are constants.
class Graph {
 public:
  explicit Graph(const ParamStore& store, GradTape* tape = nullptr) : store_(store), tape_(tape) {}

  Var param(const std::string& name) const;
  bool training() const { return tape_ != nullptr; }
  const ParamStore& store() const { return store_; }

 private:
  const ParamStore& store_;
  GradTape* tape_;
  mutable std::map<std::string, Var> cache_;
};

}  // namespace vla3d::nn
