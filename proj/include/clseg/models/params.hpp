// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <map>
#include <set>
#include <string>
#include <string_view>
#include <vector>

#include "clseg/numerics/random.hpp"
#include "clseg/numerics/tape.hpp"

namespace clseg {

using NameSet = std::set<std::string>;

/// FNV-1a, used to give every named parameter its own init stream.
inline std::uint64_t name_hash(std::string_view s) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

/// Insertion-ordered collection of named tensors.
template <typename Scalar>
class ParameterSet {
 public:
  void add(const std::string& name, Tensor<Scalar> tensor) {
    if (tensors_.count(name)) throw SchemaError("duplicate parameter name '" + name + "'");
    names_.push_back(name);
    tensors_.emplace(name, std::move(tensor));
  }

  bool contains(const std::string& name) const { return tensors_.count(name) != 0; }

  Tensor<Scalar>& at(const std::string& name) {
    auto it = tensors_.find(name);
    if (it == tensors_.end()) throw SchemaError("unknown parameter '" + name + "'");
    return it->second;
  }
  const Tensor<Scalar>& at(const std::string& name) const {
    auto it = tensors_.find(name);
    if (it == tensors_.end()) throw SchemaError("unknown parameter '" + name + "'");
    return it->second;
  }

  const std::vector<std::string>& names() const { return names_; }
  NameSet name_set() const { return NameSet(names_.begin(), names_.end()); }
  std::size_t size() const { return names_.size(); }
  bool empty() const { return names_.empty(); }

  Index element_count() const {
    Index n = 0;
    for (const auto& [_, t] : tensors_) n += t.size();
    return n;
  }

  void zero_grad() {
    for (auto& [_, t] : tensors_) t.zero_grad();
  }
  void drop_grad() {
    for (auto& [_, t] : tensors_) t.drop_grad();
  }

  /// Copy of the named subset, in this set's order.
  ParameterSet subset(const NameSet& names) const {
    ParameterSet out;
    for (const auto& n : names_)
      if (names.count(n)) out.add(n, Tensor<Scalar>(at(n).shape(), at(n).values()));
    return out;
  }

  /// Values only; gradients are not copied.
  ParameterSet snapshot() const { return subset(name_set()); }

  template <typename Other>
  ParameterSet<Other> cast() const {
    ParameterSet<Other> out;
    for (const auto& n : names_) out.add(n, at(n).template cast<Other>());
    return out;
  }

  bool bit_equal(const ParameterSet& other) const {
    if (names_ != other.names_) return false;
    for (const auto& n : names_)
      if (!at(n).bit_equal(other.at(n))) return false;
    return true;
  }

  /// Overwrites tensors present in `source`; every name must exist here with
  /// the same shape. Returns the replaced names.
  std::vector<std::string> assign(const ParameterSet& source) {
    for (const auto& n : source.names()) {
      if (!contains(n)) throw SchemaError("cannot restore unknown tensor '" + n + "'");
      if (at(n).shape() != source.at(n).shape()) {
        throw SchemaError("shape mismatch restoring '" + n + "': " + shape_str(at(n).shape()) + " vs " +
                          shape_str(source.at(n).shape()));
      }
    }
    for (const auto& n : source.names()) at(n).values() = source.at(n).values();
    return source.names();
  }

 private:
  std::vector<std::string> names_;
  std::map<std::string, Tensor<Scalar>> tensors_;
};

/// Resolves stored tensors to tape variables for one forward pass. Tensors in
/// `trainable` (or all, when null) are registered as parameters; the rest as
/// constants. Registered parameter Vars are recorded in `registered`.
template <typename Scalar>
class ParamBinder {
 public:
  ParamBinder(Tape<Scalar>& tape, ParameterSet<Scalar>& params, const NameSet* trainable,
              std::map<std::string, Var>* registered)
      : tape_(tape), params_(params), trainable_(trainable), registered_(registered) {}

  Var operator()(const std::string& name) {
    if (auto it = bound_.find(name); it != bound_.end()) return it->second;
    Tensor<Scalar>& t = params_.at(name);
    Var v;
    if (trainable_ == nullptr || trainable_->count(name)) {
      v = tape_.parameter(t);
      if (registered_) (*registered_)[name] = v;
    } else {
      v = tape_.constant(Tensor<Scalar>(t.shape(), t.values()));
    }
    bound_.emplace(name, v);
    return v;
  }

 private:
  Tape<Scalar>& tape_;
  ParameterSet<Scalar>& params_;
  const NameSet* trainable_;
  std::map<std::string, Var>* registered_;
  std::map<std::string, Var> bound_;
};

/// He-normal initialiser keyed by parameter name, so identically named slots
/// (e.g. every domain head) start from the same values for a given seed.
template <typename Scalar>
Tensor<Scalar> he_normal(const Shape& shape, Index fan_in, std::uint64_t seed, const std::string& slot) {
  Tensor<Scalar> t(shape);
  Rng rng(derive_seed({seed, name_hash(slot)}));
  const double stddev = std::sqrt(2.0 / double(fan_in));
  for (Index i = 0; i < t.size(); ++i) t[i] = Scalar(stddev * rng.normal());
  return t;
}

}  // namespace clseg
