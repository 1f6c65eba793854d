#include "rpdac/nn.hpp"

#include <cmath>
#include <cstring>
#include <stdexcept>

namespace rpdac {

Activation activationFromString(const std::string& name) {
  if (name == "silu") return Activation::SiLU;
  if (name == "relu") return Activation::ReLU;
  throw std::invalid_argument("unknown activation '" + name + "'");
}

std::string toString(Activation act) { return act == Activation::SiLU ? "silu" : "relu"; }

Tensor activate(Graph& g, const Tensor& x, Activation act) {
  return act == Activation::SiLU ? silu(g, x) : relu(g, x);
}

Tensor uniformInit(Shape shape, std::size_t fanIn, Rng& rng) {
  Tensor t = Tensor::zeros(std::move(shape), true);
  const double bound = 1.0 / std::sqrt(static_cast<double>(fanIn));
  for (double& v : t.data()) v = rng.uniform(-bound, bound);
  return t;
}

void setTrainable(std::vector<NamedParameter>& params, bool on) {
  for (auto& p : params) p.tensor.setRequiresGrad(on);
}

void zeroGrads(std::vector<NamedParameter>& params) {
  for (auto& p : params) p.tensor.zeroGrad();
}

std::uint64_t parameterDigest(const std::vector<NamedParameter>& params) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (const auto& p : params) {
    for (double v : p.tensor.data()) {
      unsigned char bytes[sizeof(double)];
      std::memcpy(bytes, &v, sizeof(double));
      for (unsigned char b : bytes) {
        h ^= b;
        h *= 0x100000001b3ULL;
      }
    }
  }
  return h;
}

}  // namespace rpdac
