#pragma once

#include <map>
#include <string>
#include <vector>

#include "tcyolo/tensor.hpp"

namespace tcyolo {

/// What a stored tensor is used for. Buffers (batchnorm running statistics)
/// are saved in checkpoints but never receive gradients or optimizer updates.
enum class ParamRole { weight, bias, norm_scale, buffer };

template <typename Scalar>
struct Parameter {
  Tensor<Scalar> value;
  Tensor<Scalar> grad;  // empty until the first backward pass reaches it
  ParamRole role = ParamRole::weight;

  bool trainable() const { return role != ParamRole::buffer; }
  void zero_grad() {
    if (!grad.empty()) grad.values().setZero();
  }
  Tensor<Scalar>& grad_buffer() {
    if (grad.empty()) grad = Tensor<Scalar>(value.shape());
    return grad;
  }
};

/// Name-ordered parameter storage. Iteration order is lexicographic so that
/// optimizer updates and checkpoint layout are deterministic.
template <typename Scalar>
class ParameterStore {
 public:
  using Map = std::map<std::string, Parameter<Scalar>>;

  bool contains(const std::string& name) const { return params_.count(name) != 0; }

  Parameter<Scalar>& get(const std::string& name) {
    auto it = params_.find(name);
    if (it == params_.end()) throw ConfigError("unknown parameter '" + name + "'");
    return it->second;
  }
  const Parameter<Scalar>& get(const std::string& name) const {
    auto it = params_.find(name);
    if (it == params_.end()) throw ConfigError("unknown parameter '" + name + "'");
    return it->second;
  }

  /// Inserts a parameter; an existing entry must have the same shape and is
  /// returned untouched (shared weights register once).
  Parameter<Scalar>& declare(const std::string& name, const Shape& shape, ParamRole role,
                             Scalar fill = Scalar(0)) {
    auto it = params_.find(name);
    if (it != params_.end()) {
      if (it->second.value.shape() != shape)
        throw DimensionError("parameter '" + name + "' redeclared with shape " + shape.str() +
                             ", stored " + it->second.value.shape().str());
      return it->second;
    }
    Parameter<Scalar> p;
    p.value = Tensor<Scalar>(shape, fill);
    p.role = role;
    return params_.emplace(name, std::move(p)).first->second;
  }

  void zero_grad() {
    for (auto& [_, p] : params_) p.zero_grad();
  }

  /// Number of trainable scalars (buffers excluded).
  Index trainable_count() const {
    Index n = 0;
    for (const auto& [_, p] : params_)
      if (p.trainable()) n += p.value.size();
    return n;
  }

  std::vector<std::string> names() const {
    std::vector<std::string> out;
    for (const auto& [name, _] : params_) out.push_back(name);
    return out;
  }

  std::size_t size() const { return params_.size(); }
  Map& entries() { return params_; }
  const Map& entries() const { return params_; }

 private:
  Map params_;
};

}  // namespace tcyolo
