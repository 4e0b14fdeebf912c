#pragma once

#include <functional>
#include <memory>
#include <stdexcept>
#include <string>
#include <vector>

namespace udvla {

// Dense row-major f64 tensor. Gradients live next to the data; operations
// record backward closures on the active Tape when any input requires grad.
struct TensorImpl {
  std::vector<int> shape;
  std::vector<double> data;
  std::vector<double> grad;
  bool requires_grad = false;
};

class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(std::vector<int> shape, bool requires_grad = false);

  static Tensor zeros(std::vector<int> shape, bool requires_grad = false);
  static Tensor full(std::vector<int> shape, double value);
  static Tensor from(std::vector<int> shape, std::vector<double> values,
                     bool requires_grad = false);
  static Tensor scalar(double value);

  bool defined() const { return impl_ != nullptr; }
  const std::vector<int>& shape() const { return impl_->shape; }
  std::vector<double>& data() { return impl_->data; }
  const std::vector<double>& data() const { return impl_->data; }
  std::vector<double>& grad() { return impl_->grad; }
  const std::vector<double>& grad() const { return impl_->grad; }
  bool requires_grad() const { return impl_ && impl_->requires_grad; }
  void set_requires_grad(bool v) { impl_->requires_grad = v; }

  std::size_t numel() const { return impl_->data.size(); }
  int rank() const { return static_cast<int>(impl_->shape.size()); }
  // 2-D helpers; rank-1 tensors count as a single row.
  int rows() const {
    if (rank() <= 1) return 1;
    return impl_->shape[0];
  }
  int cols() const {
    if (rank() == 0) return 1;
    if (rank() == 1) return impl_->shape[0];
    int c = 1;
    for (std::size_t i = 1; i < impl_->shape.size(); ++i) c *= impl_->shape[i];
    return c;
  }

  double& at(int i) { return impl_->data[static_cast<std::size_t>(i)]; }
  double at(int i) const { return impl_->data[static_cast<std::size_t>(i)]; }
  double& at(int r, int c) {
    return impl_->data[static_cast<std::size_t>(r) * cols() + c];
  }
  double at(int r, int c) const {
    return impl_->data[static_cast<std::size_t>(r) * cols() + c];
  }
  double item() const;

  void ensure_grad();
  void zero_grad();

  std::shared_ptr<TensorImpl> impl() const { return impl_; }

 private:
  std::shared_ptr<TensorImpl> impl_;
};

// Ordered record of operations. Backward replays nodes in reverse, visiting
// each exactly once; inputs always precede their consumers because nodes are
// appended at execution time.
class Tape {
 public:
  Tape();
  ~Tape();
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  static Tape* active();
  void record(std::function<void()> backward_fn);
  std::size_t size() const { return nodes_.size(); }

  // Seeds loss.grad = 1 and replays all recorded nodes in reverse order.
  void backward(Tensor& loss);

 private:
  std::vector<std::function<void()>> nodes_;
  Tape* previous_ = nullptr;
};

// Pauses recording inside a scope (used by finite-difference evaluations).
class NoGradScope {
 public:
  NoGradScope();
  ~NoGradScope();

 private:
  Tape* saved_;
};

[[noreturn]] void shape_error(const std::string& op, const Tensor& a,
                              const Tensor& b);
std::string shape_str(const std::vector<int>& s);
bool grad_enabled_for(const Tensor& t);

}  // namespace udvla
