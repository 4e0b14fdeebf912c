#include "udvla/tensor.hpp"

#include <numeric>
#include <sstream>

namespace udvla {

namespace {
Tape* g_active_tape = nullptr;

std::size_t shape_numel(const std::vector<int>& shape) {
  std::size_t n = 1;
  for (int s : shape) {
    if (s < 0) throw std::runtime_error("tensor: negative dimension");
    n *= static_cast<std::size_t>(s);
  }
  return n;
}
}  // namespace

Tensor::Tensor(std::vector<int> shape, bool requires_grad) {
  impl_ = std::make_shared<TensorImpl>();
  impl_->shape = std::move(shape);
  impl_->data.assign(shape_numel(impl_->shape), 0.0);
  impl_->requires_grad = requires_grad;
}

Tensor Tensor::zeros(std::vector<int> shape, bool requires_grad) {
  return Tensor(std::move(shape), requires_grad);
}

Tensor Tensor::full(std::vector<int> shape, double value) {
  Tensor t(std::move(shape));
  for (auto& v : t.data()) v = value;
  return t;
}

Tensor Tensor::from(std::vector<int> shape, std::vector<double> values,
                    bool requires_grad) {
  Tensor t;
  t.impl_ = std::make_shared<TensorImpl>();
  t.impl_->shape = std::move(shape);
  if (shape_numel(t.impl_->shape) != values.size())
    throw std::runtime_error("tensor: value count does not match shape " +
                             shape_str(t.impl_->shape));
  t.impl_->data = std::move(values);
  t.impl_->requires_grad = requires_grad;
  return t;
}

Tensor Tensor::scalar(double value) { return from({1}, {value}); }

double Tensor::item() const {
  if (numel() != 1)
    throw std::runtime_error("tensor: item() on non-scalar of shape " +
                             shape_str(shape()));
  return impl_->data[0];
}

void Tensor::ensure_grad() {
  if (impl_->grad.size() != impl_->data.size())
    impl_->grad.assign(impl_->data.size(), 0.0);
}

void Tensor::zero_grad() { impl_->grad.assign(impl_->data.size(), 0.0); }

Tape::Tape() {
  previous_ = g_active_tape;
  g_active_tape = this;
}

Tape::~Tape() { g_active_tape = previous_; }

Tape* Tape::active() { return g_active_tape; }

void Tape::record(std::function<void()> backward_fn) {
  nodes_.push_back(std::move(backward_fn));
}

void Tape::backward(Tensor& loss) {
  if (loss.numel() != 1)
    throw std::runtime_error("backward: loss must be scalar, got shape " +
                             shape_str(loss.shape()));
  loss.ensure_grad();
  loss.grad()[0] = 1.0;
  for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) (*it)();
}

NoGradScope::NoGradScope() {
  saved_ = g_active_tape;
  g_active_tape = nullptr;
}

NoGradScope::~NoGradScope() { g_active_tape = saved_; }

std::string shape_str(const std::vector<int>& s) {
  std::ostringstream out;
  out << "[";
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (i) out << "x";
    out << s[i];
  }
  out << "]";
  return out.str();
}

void shape_error(const std::string& op, const Tensor& a, const Tensor& b) {
  throw std::runtime_error(op + ": shape mismatch " + shape_str(a.shape()) +
                           " vs " + shape_str(b.shape()));
}

bool grad_enabled_for(const Tensor& t) {
  return Tape::active() != nullptr && t.requires_grad();
}

}  // namespace udvla
