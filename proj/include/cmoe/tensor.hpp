#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <string>
#include <vector>

namespace cmoe {

using Shape = std::vector<int64_t>;

int64_t numel_of(const Shape& s);
std::string shape_str(const Shape& s);

// Value precision for forward buffers. f32 rounds every op result (and
// parameter) to float, emulating 32-bit training deterministically while the
// storage stays double. Gradients and optimizer state stay double either way.
enum class Precision { f32, f64 };

Precision precision();
void set_precision(Precision p);
bool grad_enabled();
void set_grad_enabled(bool on);

struct PrecisionScope {
  explicit PrecisionScope(Precision p);
  ~PrecisionScope();
  Precision saved;
};

struct NoGradScope {
  NoGradScope();
  ~NoGradScope();
  bool saved;
};

void round_to_f32(std::vector<double>& v);

struct TensorNode {
  Shape shape;
  std::vector<double> data;
  std::vector<double> grad;  // allocated on first accumulation
  bool requires_grad = false;
  bool backward_ran = false;
  std::vector<std::shared_ptr<TensorNode>> parents;
  // Receives the node itself at call time; closures must capture parents
  // only, never their own node (that would leak the graph).
  std::function<void(TensorNode&)> backward_fn;

  void ensure_grad() {
    if (grad.size() != data.size()) grad.assign(data.size(), 0.0);
  }
};

// Value-semantics handle onto a graph node. Copies alias the same storage;
// forward data is treated as immutable once the tensor feeds another op.
class Tensor {
 public:
  Tensor() : node_(std::make_shared<TensorNode>()) {}
  explicit Tensor(std::shared_ptr<TensorNode> n) : node_(std::move(n)) {}

  static Tensor zeros(const Shape& shape, bool requires_grad = false);
  static Tensor full(const Shape& shape, double value, bool requires_grad = false);
  static Tensor from(const Shape& shape, std::vector<double> data, bool requires_grad = false);
  static Tensor scalar(double value);

  const Shape& shape() const { return node_->shape; }
  int64_t numel() const { return static_cast<int64_t>(node_->data.size()); }
  int64_t dim(int i) const { return node_->shape[static_cast<size_t>(i)]; }
  int rank() const { return static_cast<int>(node_->shape.size()); }

  std::vector<double>& data() { return node_->data; }
  const std::vector<double>& data() const { return node_->data; }
  double at(int64_t i) const { return node_->data[static_cast<size_t>(i)]; }
  double value() const;  // scalar convenience, throws if numel != 1

  bool requires_grad() const { return node_->requires_grad; }
  void set_requires_grad(bool on) { node_->requires_grad = on; }

  bool has_grad() const { return !node_->grad.empty(); }
  std::vector<double>& grad();
  const std::vector<double>& grad() const;
  void zero_grad();

  // Same data, detached from the graph.
  Tensor detach() const;

  std::shared_ptr<TensorNode>& node() { return node_; }
  const std::shared_ptr<TensorNode>& node() const { return node_; }

 private:
  std::shared_ptr<TensorNode> node_;
};

// Reverse-mode sweep from a scalar. Throws on a non-scalar input and on a
// second call for the same node without rebuilding the graph.
void backward(const Tensor& loss);

// Central-difference gradient oracle: (f(x+h e_i) - f(x-h e_i)) / 2h per
// coordinate. f must be pure; it receives a detached copy of x.
Tensor finite_diff_grad(const std::function<double(const Tensor&)>& f, const Tensor& x,
                        double h = 1e-5);

// Shared helper for op implementations: builds the result node, applies the
// precision policy, and wires the backward closure when gradients are on.
Tensor make_result(Shape shape, std::vector<double> data, const std::vector<Tensor>& parents,
                   std::function<void(TensorNode&)> backward_fn);

[[noreturn]] void fail_shape(const std::string& op, const Shape& a, const Shape& b);

}  // namespace cmoe
