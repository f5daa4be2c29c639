#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "lamamba/autodiff.hpp"

namespace lamamba {

using ad::Var;

using Initializer = std::function<void(Tensor&, Rng&)>;

namespace init {
Initializer zeros();
Initializer constant(double v);
Initializer normal(double stddev);
Initializer uniform(double bound);
Initializer xavier_uniform(std::int64_t fan_in, std::int64_t fan_out);
}  // namespace init

struct ParamSpec {
  std::string name;
  Shape shape;
};

/// Creates named parameter leaves. Each parameter draws from its own stream
/// derived from (seed, name), so the same name always gets the same values
/// regardless of what else was built. In census mode nothing is allocated;
/// only names and shapes are recorded.
class ParamBuilder {
 public:
  enum class Mode { allocate, census };

  explicit ParamBuilder(std::uint64_t seed, Mode mode = Mode::allocate)
      : seed_(seed), mode_(mode) {}

  Var make(const std::string& name, Shape shape, const Initializer& init);

  Mode mode() const { return mode_; }
  const std::vector<ParamSpec>& specs() const { return specs_; }
  const std::vector<Var>& params() const { return params_; }
  std::int64_t count() const;

 private:
  std::uint64_t seed_;
  Mode mode_;
  std::vector<ParamSpec> specs_;
  std::vector<Var> params_;
};

/// y = x W (+ b); W is [in, out].
struct Linear {
  Var weight;
  Var bias;  // may be undefined

  Var operator()(const Var& x) const { return ad::linear(x, weight, bias); }
  std::int64_t in_features() const { return weight.shape()[0]; }
  std::int64_t out_features() const { return weight.shape()[1]; }
};

Linear make_linear(ParamBuilder& pb, const std::string& prefix, std::int64_t in, std::int64_t out,
                   bool bias, const Initializer& w_init, const Initializer& b_init = init::zeros());
Linear make_linear(ParamBuilder& pb, const std::string& prefix, std::int64_t in, std::int64_t out,
                   bool bias = true);

struct LayerNormAffine {
  Var weight;
  Var bias;
  Var operator()(const Var& x) const {
    return ad::add_bcast(ad::mul_bcast(ad::layer_norm(x), weight), bias);
  }
};

LayerNormAffine make_layer_norm(ParamBuilder& pb, const std::string& prefix, std::int64_t dim);

}  // namespace lamamba
