#pragma once

// Reverse-mode differentiation over matrix-valued nodes. A Tape records one
// forward pass; nodes are appended in evaluation order, so reverse creation
// order is a valid topological order for backward.

#include <cstdint>
#include <functional>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "tlam/param_store.hpp"

namespace tlam::ad {

struct Var {
  std::size_t id = 0;
};

class Tape;

using BackwardFn = std::function<void(Tape&, std::size_t self)>;

struct Node {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<double> value;
  std::vector<double> grad;  // allocated on first accumulation
  std::vector<std::size_t> inputs;
  BackwardFn backward;
  std::string param;  // non-empty for parameter leaves
  bool requires_grad = false;
};

class Tape {
 public:
  /// Differentiable leaf bound to a named parameter (rank-1 tensors become
  /// 1 x n rows). Requesting the same name twice returns the same node.
  Var param(const std::string& name, const Tensor& value);
  Var param(const std::string& name, const ParamStore& store) { return param(name, store.get(name)); }
  Var constant(std::size_t rows, std::size_t cols, std::vector<double> value);

  Var record(std::size_t rows, std::size_t cols, std::vector<double> value, std::vector<std::size_t> inputs,
             BackwardFn backward);

  const Node& node(Var v) const { return nodes_.at(v.id); }
  Node& node(std::size_t id) { return nodes_.at(id); }
  std::size_t rows(Var v) const { return node(v).rows; }
  std::size_t cols(Var v) const { return node(v).cols; }
  std::span<const double> value(Var v) const { return node(v).value; }
  double scalar(Var v) const;
  std::size_t size() const { return nodes_.size(); }

  /// Gradient buffer of node id, zero-initialised on first use.
  std::vector<double>& grad(std::size_t id);

  /// Reverse sweep from a 1 x 1 node. Returns d loss / d param for every
  /// parameter leaf on the tape; leaves the loss does not reach get zeros.
  ParamStore backward(Var loss);

  /// Nodes visited by the last backward sweep.
  std::size_t backward_visits() const { return backward_visits_; }

 private:
  std::vector<Node> nodes_;
  std::map<std::string, std::size_t> param_ids_;
  std::map<std::string, Dims> param_dims_;
  std::size_t backward_visits_ = 0;
};

// Matrix products. w is input x output; a is output x input.
Var matmul(Tape& t, Var x, Var w);
Var matmul_bt(Tape& t, Var x, Var a);

Var add(Tape& t, Var a, Var b);
Var sub(Tape& t, Var a, Var b);
Var add_row(Tape& t, Var x, Var bias);  // bias is 1 x cols, broadcast over rows
Var scale(Tape& t, Var x, double s);
Var add_scalar(Tape& t, Var x, double c);
Var gelu(Tape& t, Var x);
Var relu(Tape& t, Var x);

Var layer_norm_rows(Tape& t, Var x, Var gamma, Var beta, double eps);
Var softmax_rows(Tape& t, Var x);

/// Self-attention inside consecutive groups of `group` rows (one group per
/// pixel). q, k, v are R x d with head j occupying column block j.
Var grouped_attention(Tape& t, Var q, Var k, Var v, std::size_t group, std::size_t heads,
                      std::uint64_t* macs = nullptr);

/// Mean of each consecutive group of rows, summed in ascending row order.
Var group_mean(Tape& t, Var x, std::size_t group);
/// Row p*N + k of the result is row p of parts[k].
Var interleave_rows(Tape& t, const std::vector<Var>& parts);
Var concat_cols(Tape& t, Var a, Var b);

Var sum_all(Tape& t, Var x);
Var mean_all(Tape& t, Var x);
/// Mean squared difference over all elements.
Var mse(Tape& t, Var a, Var b);

}  // namespace tlam::ad
