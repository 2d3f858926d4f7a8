#pragma once

#include <functional>
#include <vector>

#include "iip/tensor.hpp"

namespace iip::grad {

// Raised on any operand shape violation; carries both shapes in the message.
struct ShapeError : std::runtime_error {
  explicit ShapeError(const std::string& m) : std::runtime_error(m) {}
};
struct UsageError : std::runtime_error {
  explicit UsageError(const std::string& m) : std::runtime_error(m) {}
};

// Define-by-run reverse-mode tape. Node ids are append-only, so inputs
// always precede outputs and a reverse sweep is a valid topological order.
// Gradients accumulate additively at fan-out.
class Graph {
 public:
  int leaf(Tensor value, bool requires_grad = false);

  // elementwise / structural
  int add(int a, int b);
  int sub(int a, int b);
  int scale(int a, double s);
  int relu(int a);
  int reshape(int a, std::vector<int> shape);
  int concat(int axis, const std::vector<int>& xs);
  int slice(int a, int axis, int start, int end);
  int broadcast_rows(int a, int n);  // [1,D] -> [n,D]
  int mean_axis0(int a);             // [N,D] -> [1,D]
  int mean(int a);                   // -> [1]
  int sum_sq(int a);                 // -> [1]

  // dense / conv
  int linear(int x, int w, int b);  // [N,F] x [F,O] + [O] -> [N,O]
  int conv2d(int x, int k, int stride, int pad);            // [N,C,H,W] x [K,C,kh,kw]
  int conv_transpose2d(int x, int k, int stride, int pad);  // [N,K,H',W'] x [K,C,kh,kw]
  int bias_channels(int x, int b);  // [N,C,H,W] + [C]

  // warping
  int bilinear_sample(int src, int flow);  // src [N,C,H,W], flow [N,2,H,W] (dx,dy)

  // losses (scalar outputs)
  int l1_loss(int a, int b);   // sum |a-b|
  int mse_loss(int a, int b);  // sum (a-b)^2

  const Tensor& value(int id) const { return nodes_[check(id)].value; }
  const Tensor& gradient(int id) const;
  bool requires_grad(int id) const { return nodes_[check(id)].requires_grad; }
  size_t size() const { return nodes_.size(); }

  // Reverse sweep from a scalar root. A second backward without reset_grads()
  // in between is a usage error.
  void backward(int root);
  void reset_grads();

 private:
  struct Node {
    Tensor value;
    Tensor grad;  // allocated lazily during backward
    bool requires_grad = false;
    bool grad_live = false;
    std::function<void(Graph&, int)> backprop;  // may be empty (leaves)
  };

  std::vector<Node> nodes_;
  bool swept_ = false;

  size_t check(int id) const {
    if (id < 0 || static_cast<size_t>(id) >= nodes_.size()) throw UsageError("graph: bad node id");
    return static_cast<size_t>(id);
  }
  int push(Tensor value, bool requires_grad, std::function<void(Graph&, int)> bp);
  Tensor& grad_buf(int id);
  void accumulate(int id, const Tensor& g);
  friend struct GradAccess;
};

}  // namespace iip::grad
