#include "cmoe/tensor.hpp"

#include <algorithm>
#include <stdexcept>
#include <unordered_set>

namespace cmoe {

namespace {
thread_local Precision g_precision = Precision::f64;
thread_local bool g_grad_enabled = true;
}  // namespace

Precision precision() { return g_precision; }
void set_precision(Precision p) { g_precision = p; }
bool grad_enabled() { return g_grad_enabled; }
void set_grad_enabled(bool on) { g_grad_enabled = on; }

PrecisionScope::PrecisionScope(Precision p) : saved(g_precision) { g_precision = p; }
PrecisionScope::~PrecisionScope() { g_precision = saved; }

NoGradScope::NoGradScope() : saved(g_grad_enabled) { g_grad_enabled = false; }
NoGradScope::~NoGradScope() { g_grad_enabled = saved; }

void round_to_f32(std::vector<double>& v) {
  for (double& x : v) x = static_cast<double>(static_cast<float>(x));
}

int64_t numel_of(const Shape& s) {
  int64_t n = 1;
  for (int64_t e : s) n *= e;
  return n;
}

std::string shape_str(const Shape& s) {
  std::string out = "[";
  for (size_t i = 0; i < s.size(); ++i) {
    if (i) out += ",";
    out += std::to_string(s[i]);
  }
  out += "]";
  return out;
}

void fail_shape(const std::string& op, const Shape& a, const Shape& b) {
  throw std::invalid_argument(op + ": incompatible shapes " + shape_str(a) + " and " +
                              shape_str(b));
}

Tensor Tensor::zeros(const Shape& shape, bool requires_grad) {
  auto n = std::make_shared<TensorNode>();
  n->shape = shape;
  n->data.assign(static_cast<size_t>(numel_of(shape)), 0.0);
  n->requires_grad = requires_grad;
  return Tensor(std::move(n));
}

Tensor Tensor::full(const Shape& shape, double value, bool requires_grad) {
  Tensor t = zeros(shape, requires_grad);
  std::fill(t.data().begin(), t.data().end(), value);
  if (precision() == Precision::f32) round_to_f32(t.data());
  return t;
}

Tensor Tensor::from(const Shape& shape, std::vector<double> data, bool requires_grad) {
  if (numel_of(shape) != static_cast<int64_t>(data.size()))
    throw std::invalid_argument("Tensor::from: shape " + shape_str(shape) + " expects " +
                                std::to_string(numel_of(shape)) + " values, got " +
                                std::to_string(data.size()));
  auto n = std::make_shared<TensorNode>();
  n->shape = shape;
  n->data = std::move(data);
  n->requires_grad = requires_grad;
  if (precision() == Precision::f32) round_to_f32(n->data);
  return Tensor(std::move(n));
}

Tensor Tensor::scalar(double value) { return from({1}, {value}); }

double Tensor::value() const {
  if (numel() != 1)
    throw std::invalid_argument("Tensor::value: tensor of shape " + shape_str(shape()) +
                                " is not a scalar");
  return node_->data[0];
}

std::vector<double>& Tensor::grad() {
  node_->ensure_grad();
  return node_->grad;
}

const std::vector<double>& Tensor::grad() const {
  if (node_->grad.empty())
    throw std::runtime_error("Tensor::grad: gradient not populated; run backward first");
  return node_->grad;
}

void Tensor::zero_grad() {
  if (!node_->grad.empty()) std::fill(node_->grad.begin(), node_->grad.end(), 0.0);
}

Tensor Tensor::detach() const {
  auto n = std::make_shared<TensorNode>();
  n->shape = node_->shape;
  n->data = node_->data;
  n->requires_grad = false;
  return Tensor(std::move(n));
}

Tensor make_result(Shape shape, std::vector<double> data, const std::vector<Tensor>& parents,
                   std::function<void(TensorNode&)> backward_fn) {
  auto n = std::make_shared<TensorNode>();
  n->shape = std::move(shape);
  n->data = std::move(data);
  if (precision() == Precision::f32) round_to_f32(n->data);
  bool needs = false;
  if (grad_enabled()) {
    for (const Tensor& p : parents) needs = needs || p.requires_grad();
  }
  n->requires_grad = needs;
  if (needs) {
    n->parents.reserve(parents.size());
    for (const Tensor& p : parents) n->parents.push_back(p.node());
    n->backward_fn = std::move(backward_fn);
  }
  return Tensor(std::move(n));
}

namespace {

// Iterative post-order topological sort; recursion would overflow on long
// sequential graphs.
void topo_order(const std::shared_ptr<TensorNode>& root,
                std::vector<std::shared_ptr<TensorNode>>& out) {
  std::unordered_set<TensorNode*> visited;
  struct Frame {
    std::shared_ptr<TensorNode> node;
    size_t next_parent = 0;
  };
  std::vector<Frame> stack;
  stack.push_back({root, 0});
  visited.insert(root.get());
  while (!stack.empty()) {
    Frame& f = stack.back();
    if (f.next_parent < f.node->parents.size()) {
      auto& p = f.node->parents[f.next_parent++];
      if (p && !visited.count(p.get())) {
        visited.insert(p.get());
        stack.push_back({p, 0});
      }
    } else {
      out.push_back(f.node);
      stack.pop_back();
    }
  }
}

}  // namespace

void backward(const Tensor& loss) {
  auto root = loss.node();
  if (loss.numel() != 1)
    throw std::invalid_argument("backward: loss must be scalar, got shape " +
                                shape_str(loss.shape()));
  if (root->backward_ran)
    throw std::runtime_error("backward: called twice on the same node without rebuilding the graph");
  root->backward_ran = true;
  if (!root->requires_grad) return;  // nothing reachable wants a gradient

  std::vector<std::shared_ptr<TensorNode>> order;
  topo_order(root, order);

  root->ensure_grad();
  root->grad[0] = 1.0;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    TensorNode& n = **it;
    if (n.backward_fn && !n.grad.empty()) n.backward_fn(n);
  }
}

Tensor finite_diff_grad(const std::function<double(const Tensor&)>& f, const Tensor& x,
                        double h) {
  if (h <= 0) throw std::invalid_argument("finite_diff_grad: step must be positive");
  Tensor g = Tensor::zeros(x.shape());
  Tensor probe = x.detach();
  for (size_t i = 0; i < probe.data().size(); ++i) {
    const double saved = probe.data()[i];
    probe.data()[i] = saved + h;
    const double fp = f(probe);
    probe.data()[i] = saved - h;
    const double fm = f(probe);
    probe.data()[i] = saved;
    g.data()[i] = (fp - fm) / (2.0 * h);
  }
  return g;
}

}  // namespace cmoe
