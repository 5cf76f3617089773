#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <string>
#include <vector>

namespace cfdr {

using Shape = std::vector<int64_t>;

std::string shape_str(const Shape& s);
int64_t shape_numel(const Shape& s);

class Tensor;

namespace detail {

struct Node {
  Shape shape;
  std::vector<float> data;
  std::vector<float> grad;  // empty means "no gradient yet"
  bool requires_grad = false;
  bool backward_ran = false;  // set on the node backward() was rooted at
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void()> backprop;  // accumulates this->grad into parents

  int64_t numel() const { return static_cast<int64_t>(data.size()); }
  void ensure_grad() {
    if (grad.empty()) grad.assign(data.size(), 0.0f);
  }
};

Tensor wrap_node(std::shared_ptr<Node> n);

}  // namespace detail

// Dense row-major float32 tensor with tape-based reverse-mode autodiff.
// Ops record a backward closure when any input requires gradients; backward()
// walks the recorded graph once. Tensors are value handles onto a shared node.
class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(const Shape& shape, bool requires_grad = false);
  static Tensor full(const Shape& shape, float value, bool requires_grad = false);
  static Tensor from_data(const Shape& shape, std::vector<float> data, bool requires_grad = false);
  static Tensor scalar(float value, bool requires_grad = false);

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const;
  int64_t numel() const;
  int64_t dim(size_t i) const;

  const std::vector<float>& data() const;
  std::vector<float>& data();  // in-place mutation: optimizer steps and attacks only
  float item() const;          // scalar tensors

  bool requires_grad() const;
  bool has_grad() const;
  const std::vector<float>& grad() const;
  void zero_grad();  // clears the gradient entirely (absent, not zero-filled)

  Tensor detach() const;  // same data, no tape history, no grad

  std::shared_ptr<detail::Node> node() const { return node_; }

 private:
  explicit Tensor(std::shared_ptr<detail::Node> n) : node_(std::move(n)) {}
  std::shared_ptr<detail::Node> node_;
  friend Tensor detail::wrap_node(std::shared_ptr<detail::Node>);
};

// Runs the tape rooted at a scalar loss. Errors on a non-scalar loss, on a
// detached loss, and on a second call for the same loss node.
void backward(const Tensor& loss);

// Disables tape recording for the enclosing scope (inference / evaluation).
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool prev_;
};
bool grad_enabled();

// ---- forward ops ----------------------------------------------------------
// Shape mismatches throw std::invalid_argument naming both shapes.

Tensor add(const Tensor& a, const Tensor& b);  // same shape, or [.., d] + [d] bias broadcast
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);       // elementwise, same shape
Tensor scale(const Tensor& a, float c);             // a * c
Tensor add_scalar(const Tensor& a, float c);        // a + c
Tensor matmul(const Tensor& a, const Tensor& b, bool transpose_b = false);
Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor& b, int stride = 1, int pad = 0);
Tensor relu(const Tensor& x);
Tensor max_pool2d(const Tensor& x, int k = 2, int stride = 2);  // ties: first in row-major order
Tensor global_avg_pool(const Tensor& x);                        // [N,C,H,W] -> [N,C]
Tensor mean_all(const Tensor& x);                               // -> scalar
Tensor sum_all(const Tensor& x);                                // -> scalar
Tensor softmax(const Tensor& x);                                // over last dim
Tensor log(const Tensor& x);
Tensor exp(const Tensor& x);
Tensor l2_normalize(const Tensor& x);  // rows of 2-D (or a 1-D vector); zero rows stay zero
Tensor concat(const std::vector<Tensor>& xs, int axis = 0);
Tensor row_sum(const Tensor& x);  // [N,M] -> [N]
Tensor col_sum(const Tensor& x);  // [N,M] -> [M]
Tensor diag(const Tensor& x);     // [N,N] -> [N]
// mean cross-entropy over rows of logits [N,C]; numerically log-sum-exp stable
Tensor cross_entropy(const Tensor& logits, const std::vector<int>& labels);

// count of zero-vector l2_normalize inputs seen so far (degenerate embeddings
// are flagged once on stderr and counted here)
uint64_t zero_norm_warning_count();
void reset_zero_norm_warning_count();

}  // namespace cfdr
