#pragma once

#include <Eigen/Dense>
#include <cstdint>
#include <functional>
#include <memory>
#include <vector>

namespace mars::autodiff {

// Dynamic reverse-mode tape over dense matrices. Backward passes build new
// graph nodes, so gradients stay differentiable and second-order terms
// (gradients of input-gradients with respect to parameters) come out of the
// same machinery.

class Node;
using Var = std::shared_ptr<Node>;

class Node {
 public:
  Eigen::MatrixXd value;
  bool needs_grad = false;
  std::uint64_t id = 0;
  std::vector<Var> parents;
  // Produces one cotangent per parent (nullptr for parents without grad).
  std::function<std::vector<Var>(const Var& self, const Var& cot)> vjp;

  Eigen::Index rows() const { return value.rows(); }
  Eigen::Index cols() const { return value.cols(); }
};

Var constant(Eigen::MatrixXd v);
Var leaf(Eigen::MatrixXd v);  // differentiable input

Var add(const Var& a, const Var& b);
Var sub(const Var& a, const Var& b);
Var mul(const Var& a, const Var& b);  // elementwise
Var matmul(const Var& a, const Var& b);
Var scale(const Var& a, double c);
Var transpose(const Var& a);
Var exp(const Var& a);
Var elu(const Var& a);
Var softmax_rows(const Var& a);
Var slice_rows(const Var& a, int r0, int nr);
Var slice_cols(const Var& a, int c0, int nc);
Var pad_rows(const Var& a, int r0, int total_rows);
Var pad_cols(const Var& a, int c0, int total_cols);
Var hstack(const std::vector<Var>& parts);
Var add_rowvec(const Var& a, const Var& row);  // broadcast a 1 x n row over k rows
Var rowsum(const Var& a);                      // k x n -> k x 1
Var colsum(const Var& a);                      // k x n -> 1 x n
Var broadcast_cols(const Var& a, int n);       // k x 1 -> k x n
Var broadcast_rows(const Var& a, int k);       // 1 x n -> k x n
Var tile(const Var& a, int r, int c);          // 1 x 1 -> r x c
Var sum_all(const Var& a);                     // -> 1 x 1

// Gradients of a 1x1 output with respect to the given nodes. With
// create_graph the returned nodes are differentiable again; otherwise they
// are plain values. Nodes unreachable from the output yield zeros.
std::vector<Var> gradients(const Var& out, const std::vector<Var>& wrt, bool create_graph);

}  // namespace mars::autodiff
