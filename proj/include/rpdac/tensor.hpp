#pragma once

#include <cstddef>
#include <functional>
#include <memory>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

namespace rpdac {

using Shape = std::vector<std::size_t>;

class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

std::string shapeToString(const Shape& shape);
std::size_t shapeNumel(const Shape& shape);

struct TensorStorage {
  Shape shape;
  std::vector<double> value;
  std::vector<double> grad;  // empty until first written
  bool requiresGrad = false;
  bool producedByOp = false;
};

/// Dense row-major float64 array. Copies share storage (handle semantics);
/// use clone() for a deep copy.
class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(Shape shape, bool requiresGrad = false);
  static Tensor full(Shape shape, double value, bool requiresGrad = false);
  static Tensor fromData(Shape shape, std::vector<double> data, bool requiresGrad = false);
  static Tensor scalar(double value, bool requiresGrad = false);

  bool defined() const { return static_cast<bool>(s_); }
  const Shape& shape() const { return s_->shape; }
  std::size_t rank() const { return s_->shape.size(); }
  std::size_t dim(std::size_t i) const { return s_->shape.at(i); }
  std::size_t size() const { return s_->value.size(); }

  std::span<double> data() { return s_->value; }
  std::span<const double> data() const { return s_->value; }
  double item() const;
  double operator[](std::size_t i) const { return s_->value[i]; }

  bool requiresGrad() const { return s_->requiresGrad; }
  void setRequiresGrad(bool on) { s_->requiresGrad = on; }

  bool hasGrad() const { return !s_->grad.empty(); }
  std::span<const double> grad() const { return s_->grad; }
  std::span<double> mutableGrad();  // allocates zeros if absent
  void zeroGrad();

  /// Deep copy detached from any graph.
  Tensor clone() const;
  /// Same values, fresh leaf storage that never carries gradient.
  Tensor detach() const { return clone(); }

  TensorStorage* storage() const { return s_.get(); }
  const std::shared_ptr<TensorStorage>& handle() const { return s_; }

 private:
  explicit Tensor(std::shared_ptr<TensorStorage> s) : s_(std::move(s)) {}
  friend class Graph;
  std::shared_ptr<TensorStorage> s_;
};

/// Ordered record of differentiable operations. Ops append a backward
/// closure when at least one input requires grad and the graph is
/// recording. Gradients for leaf tensors (parameters, inputs) are collected
/// in graph-local buffers and added to the leaves on flush, so independent
/// graphs can run on separate workers against shared parameters.
class Graph {
 public:
  explicit Graph(bool record = true) : record_(record) {}
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;

  bool recording() const { return record_; }

  /// Creates an op output; requiresGrad is set when any input needs grad.
  Tensor makeOutput(Shape shape, std::initializer_list<const Tensor*> inputs);
  Tensor makeOutput(Shape shape, std::span<const Tensor> inputs);

  void record(std::string_view name, std::function<void(Graph&)> backward);

  /// Gradient buffer to accumulate into for `t` during backward.
  std::span<double> gradOf(const Tensor& t);
  /// Upstream gradient of an op output (zeros if nothing flowed into it).
  std::span<const double> outputGrad(const Tensor& t);

  /// Runs all recorded adjoints in reverse order and flushes leaf grads.
  void backward(const Tensor& loss);
  /// Like backward() but keeps leaf grads graph-local until flushLeafGrads().
  void backwardDeferred(const Tensor& loss);
  void flushLeafGrads();

  std::size_t opCount() const { return ops_.size(); }
  std::vector<std::string_view> opNames() const;
  /// Names of ops in the order their adjoints ran during the last backward.
  const std::vector<std::string_view>& lastBackwardTrace() const { return trace_; }
  void clear();

 private:
  struct Entry {
    std::string_view name;
    std::function<void(Graph&)> backward;
  };
  struct LeafGrad {
    std::shared_ptr<TensorStorage> leaf;
    std::vector<double> grad;
  };

  bool record_;
  std::vector<Entry> ops_;
  std::vector<std::string_view> trace_;
  std::unordered_map<TensorStorage*, std::size_t> leafIndex_;
  std::vector<LeafGrad> leafGrads_;
};

// ---- differentiable operations ------------------------------------------

/// input [C_in,H,W], kernel [C_out,C_in,kH,kW], bias [C_out] (may be undefined).
Tensor conv2d(Graph& g, const Tensor& input, const Tensor& kernel, const Tensor& bias,
              int stride, int padding);
/// [sigmoid(gate) * early ; late] along channels.
Tensor gatedConcat(Graph& g, const Tensor& early, const Tensor& late, const Tensor& gate);
Tensor globalAvgPool(Graph& g, const Tensor& input);
Tensor upsampleNearest(Graph& g, const Tensor& input, std::size_t targetH, std::size_t targetW);
/// weight [out,in] * x[in] + bias[out].
Tensor linear(Graph& g, const Tensor& x, const Tensor& weight, const Tensor& bias);
Tensor silu(Graph& g, const Tensor& x);
Tensor relu(Graph& g, const Tensor& x);
Tensor sigmoid(Graph& g, const Tensor& x);
Tensor add(Graph& g, const Tensor& a, const Tensor& b);
Tensor sub(Graph& g, const Tensor& a, const Tensor& b);
Tensor mul(Graph& g, const Tensor& a, const Tensor& b);
Tensor scale(Graph& g, const Tensor& x, double factor);
Tensor concatChannels(Graph& g, std::span<const Tensor> parts);
Tensor sliceChannels(Graph& g, const Tensor& x, std::size_t begin, std::size_t end);
/// Row `index` of a rank-2 tensor, as a rank-1 tensor.
Tensor selectRow(Graph& g, const Tensor& matrix, std::size_t index);
Tensor sum(Graph& g, const Tensor& x);
/// Sum of scalar tensors.
Tensor sumScalars(Graph& g, std::span<const Tensor> scalars);
Tensor squaredDistance(Graph& g, const Tensor& a, const Tensor& b);
/// sum_l ||x - points[l]||^2 with the rows of `points` [n,d] held constant.
Tensor squaredDistanceToPoints(Graph& g, const Tensor& x, const Tensor& points);
/// sum_i w_i * BCE(sigmoid(logit_i), target_i). targets/weights are constants.
Tensor bceWithLogits(Graph& g, const Tensor& logits, std::span<const double> targets,
                     std::span<const double> weights);
/// sum_i w_i * (x_i - target_i)^2 with constant targets/weights.
Tensor weightedSquaredError(Graph& g, const Tensor& x, std::span<const double> targets,
                            std::span<const double> weights);

// ---- gradient checking ----------------------------------------------------

struct GradCheckResult {
  double maxRelError = 0.0;
  std::size_t worstIndex = 0;
  double analytic = 0.0;
  double numeric = 0.0;
  bool finite = true;

  bool passes(double tolerance) const { return finite && maxRelError <= tolerance; }
};

using ScalarFn = std::function<Tensor(Graph&, const Tensor&)>;

/// Gradient magnitudes below this are compared in absolute terms.
inline constexpr double kGradCheckFloor = 1e-3;

/// Compares the reverse-mode gradient of `f` at `x` with central differences,
/// coordinate by coordinate: |analytic - numeric| / max(floor, |analytic|, |numeric|).
/// `x` is restored on return.
GradCheckResult finiteDiffCheck(const ScalarFn& f, Tensor x, double step = 1e-5);

}  // namespace rpdac
