#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "rpdac/random.hpp"
#include "rpdac/tensor.hpp"

namespace rpdac {

enum class Activation { SiLU, ReLU };

Activation activationFromString(const std::string& name);
std::string toString(Activation act);
Tensor activate(Graph& g, const Tensor& x, Activation act);

struct NamedParameter {
  std::string name;
  Tensor tensor;
  bool decay = true;  // decoupled weight decay applies
};

/// U(-1/sqrt(fanIn), 1/sqrt(fanIn)) initialization.
Tensor uniformInit(Shape shape, std::size_t fanIn, Rng& rng);

void setTrainable(std::vector<NamedParameter>& params, bool on);
void zeroGrads(std::vector<NamedParameter>& params);
/// FNV-1a over the raw bytes of every parameter value, in order.
std::uint64_t parameterDigest(const std::vector<NamedParameter>& params);

}  // namespace rpdac
