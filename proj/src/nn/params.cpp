#include "vla3d/nn/params.hpp"

#include "vla3d/nn/rng.hpp"

namespace vla3d::nn {

Tensor& ParamStore::add(const std::string& name, Tensor value, bool trainable) {
  if (name.empty()) throw std::invalid_argument("parameter name must be non-empty");
  auto [it, inserted] = params_.try_emplace(name, Param{std::move(value), trainable});
  if (!inserted) throw std::invalid_argument("duplicate parameter '" + name + "'");
  return it->second.value;
}

Tensor& ParamStore::add_truncated_normal(const std::string& name, Shape shape, double std) {
  Tensor t(std::move(shape));
  Rng rng = Rng(seed_).derive(name);
  for (auto& v : t.storage()) v = rng.truncated_normal(std);
  return add(name, std::move(t));
}

Tensor& ParamStore::add_constant(const std::string& name, Shape shape, double value) {
  return add(name, Tensor(std::move(shape), value));
}

const Param& ParamStore::get(const std::string& name) const {
  auto it = params_.find(name);
  if (it == params_.end()) throw unknown_param(name);
  return it->second;
}

Param& ParamStore::get(const std::string& name) {
  auto it = params_.find(name);
  if (it == params_.end()) throw unknown_param(name);
  return it->second;
}

std::size_t ParamStore::set_trainable(const std::string& prefix, bool trainable) {
  std::size_t n = 0;
  for (auto& [name, p] : params_) {
    if (name.compare(0, prefix.size(), prefix) == 0) {
      p.trainable = trainable;
      ++n;
    }
  }
  return n;
}

std::size_t ParamStore::num_scalars() const {
  std::size_t n = 0;
  for (const auto& [_, p] : params_) n += p.value.size();
  return n;
}

bool operator==(const ParamStore& a, const ParamStore& b) {
  if (a.params_.size() != b.params_.size()) return false;
  for (auto ia = a.params_.begin(), ib = b.params_.begin(); ia != a.params_.end(); ++ia, ++ib) {
    if (ia->first != ib->first || !(ia->second.value == ib->second.value)) return false;
  }
  return true;
}

Var Graph::param(const std::string& name) const {
  auto it = cache_.find(name);
  if (it != cache_.end()) return it->second;
  const Param& p = store_.get(name);
  Var v = (tape_ && p.trainable) ? tape_->bind(name, p.value) : Var(p.value);
  cache_.emplace(name, v);
  return v;
}

}  // namespace vla3d::nn
