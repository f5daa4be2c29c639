#include "lamamba/params.hpp"

#include <cmath>

namespace lamamba {

namespace init {

Initializer zeros() {
  return [](Tensor& t, Rng&) {
    for (auto& v : t.data()) v = 0.0;
  };
}

Initializer constant(double c) {
  return [c](Tensor& t, Rng&) {
    for (auto& v : t.data()) v = c;
  };
}

Initializer normal(double stddev) {
  return [stddev](Tensor& t, Rng& rng) {
    for (auto& v : t.data()) v = stddev * rng.normal();
  };
}

Initializer uniform(double bound) {
  return [bound](Tensor& t, Rng& rng) {
    for (auto& v : t.data()) v = bound * (2.0 * rng.uniform() - 1.0);
  };
}

Initializer xavier_uniform(std::int64_t fan_in, std::int64_t fan_out) {
  return uniform(std::sqrt(6.0 / static_cast<double>(fan_in + fan_out)));
}

}  // namespace init

Var ParamBuilder::make(const std::string& name, Shape shape, const Initializer& init) {
  for (const auto& s : specs_) {
    if (s.name == name) throw ConfigError("duplicate parameter name '" + name + "'");
  }
  specs_.push_back({name, shape});
  if (mode_ == Mode::census) return {};
  Tensor t(std::move(shape));
  Rng rng = Rng::derive(seed_, name);
  init(t, rng);
  Var v = ad::parameter(std::move(t), name);
  params_.push_back(v);
  return v;
}

std::int64_t ParamBuilder::count() const {
  std::int64_t n = 0;
  for (const auto& s : specs_) n += numel_of(s.shape);
  return n;
}

Linear make_linear(ParamBuilder& pb, const std::string& prefix, std::int64_t in, std::int64_t out,
                   bool bias, const Initializer& w_init, const Initializer& b_init) {
  Linear l;
  l.weight = pb.make(prefix + ".weight", {in, out}, w_init);
  if (bias) l.bias = pb.make(prefix + ".bias", {out}, b_init);
  return l;
}

Linear make_linear(ParamBuilder& pb, const std::string& prefix, std::int64_t in, std::int64_t out,
                   bool bias) {
  return make_linear(pb, prefix, in, out, bias, init::xavier_uniform(in, out));
}

LayerNormAffine make_layer_norm(ParamBuilder& pb, const std::string& prefix, std::int64_t dim) {
  return {pb.make(prefix + ".weight", {dim}, init::constant(1.0)),
          pb.make(prefix + ".bias", {dim}, init::zeros())};
}

}  // namespace lamamba
