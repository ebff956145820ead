#pragma once

#include <cstdint>
#include <functional>
#include <vector>

#include "layercake/tensor.hpp"

namespace layercake::ad {

struct Value {
  std::int32_t id = -1;
  bool valid() const { return id >= 0; }
};

// Reverse-mode tape. A fresh graph is built per forward pass; backward()
// walks the nodes in reverse creation order, which is a valid topological
// order because ops only reference earlier nodes.
class Tape {
 public:
  Value leaf(Tensor t, bool requires_grad = false);

  const Tensor& val(Value v) const { return node(v).val; }
  const Tensor& grad(Value v) const;
  // True once backward() has accumulated something into this node.
  bool has_grad(Value v) const { return node(v).grad_live; }
  bool requires_grad(Value v) const { return node(v).rg; }
  std::size_t size() const { return nodes_.size(); }

  // Seeds d(loss)=1 and accumulates gradients into every reachable
  // requires_grad node. `loss` must be scalar.
  void backward(Value loss);

  // ---- elementwise ----
  Value add(Value a, Value b);
  Value sub(Value a, Value b);
  Value mul(Value a, Value b);
  Value scale(Value a, double c);
  Value add_scalar(Value a, double c);
  Value gelu(Value a);
  Value sigmoid(Value a);
  Value tanh_(Value a);
  Value exp_(Value a);
  Value abs_(Value a);
  Value square(Value a);

  // ---- linear algebra ----
  Value matmul(Value a, Value b);         // [m,k] x [k,n]
  Value transpose(Value a);               // [m,n] -> [n,m]
  Value add_rowvec(Value x, Value vec);   // [N,C] + [C], broadcast over rows
  Value softmax_rows(Value a);            // row-wise softmax of [N,C]
  Value layer_norm(Value x, Value gain, Value bias, double eps = 1e-5);

  // ---- reductions ----
  Value mean_all(Value a);
  Value sum_all(Value a);

  // ---- shape / indexing ----
  Value reshape(Value a, std::vector<std::int64_t> shape);
  Value slice_rows(Value a, std::int64_t begin, std::int64_t count);
  Value slice_cols(Value a, std::int64_t begin, std::int64_t count);
  Value concat_rows(const std::vector<Value>& parts);
  Value gather_rows(Value table, std::vector<std::int64_t> ids);

  // ---- image ops on [C,H,W] ----
  Value conv2d(Value x, Value w, Value b, int stride, int pad);
  Value upsample2x(Value x);             // nearest neighbour
  Value avg_pool(Value x, int p);        // non-overlapping p x p means

 private:
  struct Node {
    Tensor val;
    Tensor grad;  // allocated lazily during backward
    bool rg = false;
    bool grad_live = false;
    std::function<void(Tape&)> back;
  };

  std::vector<Node> nodes_;

  Node& node(Value v) { return nodes_.at(static_cast<std::size_t>(v.id)); }
  const Node& node(Value v) const { return nodes_.at(static_cast<std::size_t>(v.id)); }
  Value make(Tensor val, bool rg, std::function<void(Tape&)> back);
  // Gradient accumulator for node `id`, allocating zeros on first touch.
  Tensor& gbuf(std::int32_t id);
  bool grad_live(std::int32_t id) const {
    return nodes_[static_cast<std::size_t>(id)].grad_live;
  }
};

}  // namespace layercake::ad
