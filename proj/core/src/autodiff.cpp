#include "mars/autodiff.hpp"

#include <algorithm>
#include <atomic>
#include <stdexcept>
#include <unordered_map>

namespace mars::autodiff {

namespace {

std::atomic<std::uint64_t> g_next_id{1};

Var make_node(Eigen::MatrixXd value, std::vector<Var> parents,
              std::function<std::vector<Var>(const Var&, const Var&)> vjp) {
  auto n = std::make_shared<Node>();
  n->value = std::move(value);
  n->parents = std::move(parents);
  n->vjp = std::move(vjp);
  n->id = g_next_id.fetch_add(1, std::memory_order_relaxed);
  for (const auto& p : n->parents)
    if (p->needs_grad) n->needs_grad = true;
  return n;
}

void check_same_shape(const Var& a, const Var& b, const char* op) {
  if (a->rows() != b->rows() || a->cols() != b->cols())
    throw std::invalid_argument(std::string(op) + ": shape mismatch");
}

}  // namespace

Var constant(Eigen::MatrixXd v) {
  auto n = std::make_shared<Node>();
  n->value = std::move(v);
  n->needs_grad = false;
  n->id = g_next_id.fetch_add(1, std::memory_order_relaxed);
  return n;
}

Var leaf(Eigen::MatrixXd v) {
  auto n = constant(std::move(v));
  n->needs_grad = true;
  return n;
}

Var add(const Var& a, const Var& b) {
  check_same_shape(a, b, "add");
  return make_node(a->value + b->value, {a, b},
                   [](const Var&, const Var& cot) -> std::vector<Var> {
                     return {cot, cot};
                   });
}

Var sub(const Var& a, const Var& b) {
  check_same_shape(a, b, "sub");
  return make_node(a->value - b->value, {a, b},
                   [](const Var&, const Var& cot) -> std::vector<Var> {
                     return {cot, scale(cot, -1.0)};
                   });
}

Var mul(const Var& a, const Var& b) {
  check_same_shape(a, b, "mul");
  return make_node(a->value.cwiseProduct(b->value), {a, b},
                   [](const Var& self, const Var& cot) -> std::vector<Var> {
                     const Var& a = self->parents[0];
                     const Var& b = self->parents[1];
                     return {a->needs_grad ? mul(cot, b) : nullptr,
                             b->needs_grad ? mul(cot, a) : nullptr};
                   });
}

Var matmul(const Var& a, const Var& b) {
  if (a->cols() != b->rows()) throw std::invalid_argument("matmul: inner dim mismatch");
  return make_node(a->value * b->value, {a, b},
                   [](const Var& self, const Var& cot) -> std::vector<Var> {
                     const Var& a = self->parents[0];
                     const Var& b = self->parents[1];
                     Var da = a->needs_grad ? matmul(cot, transpose(b)) : nullptr;
                     Var db = b->needs_grad ? matmul(transpose(a), cot) : nullptr;
                     return {da, db};
                   });
}

Var scale(const Var& a, double c) {
  return make_node(a->value * c, {a},
                   [c](const Var&, const Var& cot) -> std::vector<Var> {
                     return {scale(cot, c)};
                   });
}

Var transpose(const Var& a) {
  return make_node(a->value.transpose(), {a},
                   [](const Var&, const Var& cot) -> std::vector<Var> {
                     return {transpose(cot)};
                   });
}

Var exp(const Var& a) {
  return make_node(a->value.array().exp().matrix(), {a},
                   [](const Var& self, const Var& cot) -> std::vector<Var> {
                     return {mul(cot, self)};
                   });
}

Var elu(const Var& a) {
  // elu(x) = x for x > 0, exp(x) - 1 otherwise. Composed from masked
  // primitives so arbitrary-order derivatives fall out of the tape; the
  // exponential is evaluated on the masked (non-positive) entries only.
  const Eigen::MatrixXd pos =
      (a->value.array() > 0.0).cast<double>().matrix();
  const Var mpos = constant(pos);
  const Var mneg = constant(Eigen::MatrixXd::Ones(a->rows(), a->cols()) - pos);
  const Var ones = constant(Eigen::MatrixXd::Ones(a->rows(), a->cols()));
  return add(mul(mpos, a), mul(mneg, sub(exp(mul(mneg, a)), ones)));
}

Var softmax_rows(const Var& a) {
  Eigen::MatrixXd v = a->value;
  for (Eigen::Index i = 0; i < v.rows(); ++i) {
    const double mx = v.row(i).maxCoeff();
    v.row(i) = (v.row(i).array() - mx).exp();
    v.row(i) /= v.row(i).sum();
  }
  return make_node(std::move(v), {a},
                   [](const Var& self, const Var& cot) -> std::vector<Var> {
                     const int n = static_cast<int>(self->cols());
                     const Var gs = mul(cot, self);
                     const Var corr = broadcast_cols(rowsum(gs), n);
                     return {mul(self, sub(cot, corr))};
                   });
}

Var slice_rows(const Var& a, int r0, int nr) {
  const int total = static_cast<int>(a->rows());
  return make_node(a->value.middleRows(r0, nr), {a},
                   [r0, total](const Var&, const Var& cot) -> std::vector<Var> {
                     return {pad_rows(cot, r0, total)};
                   });
}

Var slice_cols(const Var& a, int c0, int nc) {
  const int total = static_cast<int>(a->cols());
  return make_node(a->value.middleCols(c0, nc), {a},
                   [c0, total](const Var&, const Var& cot) -> std::vector<Var> {
                     return {pad_cols(cot, c0, total)};
                   });
}

Var pad_rows(const Var& a, int r0, int total_rows) {
  Eigen::MatrixXd v = Eigen::MatrixXd::Zero(total_rows, a->cols());
  v.middleRows(r0, a->rows()) = a->value;
  const int nr = static_cast<int>(a->rows());
  return make_node(std::move(v), {a},
                   [r0, nr](const Var&, const Var& cot) -> std::vector<Var> {
                     return {slice_rows(cot, r0, nr)};
                   });
}

Var pad_cols(const Var& a, int c0, int total_cols) {
  Eigen::MatrixXd v = Eigen::MatrixXd::Zero(a->rows(), total_cols);
  v.middleCols(c0, a->cols()) = a->value;
  const int nc = static_cast<int>(a->cols());
  return make_node(std::move(v), {a},
                   [c0, nc](const Var&, const Var& cot) -> std::vector<Var> {
                     return {slice_cols(cot, c0, nc)};
                   });
}

Var hstack(const std::vector<Var>& parts) {
  if (parts.empty()) throw std::invalid_argument("hstack: empty");
  Eigen::Index cols = 0;
  for (const auto& p : parts) cols += p->cols();
  Eigen::MatrixXd v(parts[0]->rows(), cols);
  std::vector<int> offsets;
  Eigen::Index at = 0;
  for (const auto& p : parts) {
    offsets.push_back(static_cast<int>(at));
    v.middleCols(at, p->cols()) = p->value;
    at += p->cols();
  }
  return make_node(std::move(v), parts,
                   [offsets](const Var& self, const Var& cot) -> std::vector<Var> {
                     std::vector<Var> cots;
                     for (std::size_t i = 0; i < self->parents.size(); ++i)
                       cots.push_back(slice_cols(cot, offsets[i],
                                                 static_cast<int>(self->parents[i]->cols())));
                     return cots;
                   });
}

Var add_rowvec(const Var& a, const Var& row) {
  if (row->rows() != 1 || row->cols() != a->cols())
    throw std::invalid_argument("add_rowvec: row shape mismatch");
  return make_node(a->value.rowwise() + row->value.row(0), {a, row},
                   [](const Var&, const Var& cot) -> std::vector<Var> {
                     return {cot, colsum(cot)};
                   });
}

Var rowsum(const Var& a) {
  return make_node(a->value.rowwise().sum(), {a},
                   [n = static_cast<int>(a->cols())](const Var&, const Var& cot)
                       -> std::vector<Var> { return {broadcast_cols(cot, n)}; });
}

Var colsum(const Var& a) {
  return make_node(a->value.colwise().sum(), {a},
                   [k = static_cast<int>(a->rows())](const Var&, const Var& cot)
                       -> std::vector<Var> { return {broadcast_rows(cot, k)}; });
}

Var broadcast_cols(const Var& a, int n) {
  if (a->cols() != 1) throw std::invalid_argument("broadcast_cols: expects column");
  return make_node(a->value.replicate(1, n), {a},
                   [](const Var&, const Var& cot) -> std::vector<Var> {
                     return {rowsum(cot)};
                   });
}

Var broadcast_rows(const Var& a, int k) {
  if (a->rows() != 1) throw std::invalid_argument("broadcast_rows: expects row");
  return make_node(a->value.replicate(k, 1), {a},
                   [](const Var&, const Var& cot) -> std::vector<Var> {
                     return {colsum(cot)};
                   });
}

Var tile(const Var& a, int r, int c) {
  if (a->rows() != 1 || a->cols() != 1) throw std::invalid_argument("tile: expects scalar");
  return make_node(Eigen::MatrixXd::Constant(r, c, a->value(0, 0)), {a},
                   [](const Var&, const Var& cot) -> std::vector<Var> {
                     return {sum_all(cot)};
                   });
}

Var sum_all(const Var& a) {
  Eigen::MatrixXd v(1, 1);
  v(0, 0) = a->value.sum();
  return make_node(std::move(v), {a},
                   [r = static_cast<int>(a->rows()), c = static_cast<int>(a->cols())](
                       const Var&, const Var& cot) -> std::vector<Var> {
                     return {tile(cot, r, c)};
                   });
}

std::vector<Var> gradients(const Var& out, const std::vector<Var>& wrt, bool create_graph) {
  if (out->rows() != 1 || out->cols() != 1)
    throw std::invalid_argument("gradients: output must be scalar");

  // Reachable differentiable subgraph, in construction (= topological) order.
  std::vector<Var> order;
  std::unordered_map<std::uint64_t, bool> seen;
  std::vector<Var> stack = {out};
  while (!stack.empty()) {
    Var n = stack.back();
    stack.pop_back();
    if (seen.count(n->id) || !n->needs_grad) continue;
    seen[n->id] = true;
    order.push_back(n);
    for (const auto& p : n->parents) stack.push_back(p);
  }
  std::sort(order.begin(), order.end(),
            [](const Var& a, const Var& b) { return a->id > b->id; });

  std::unordered_map<std::uint64_t, Var> cot;
  cot[out->id] = constant(Eigen::MatrixXd::Ones(1, 1));

  for (const auto& n : order) {
    auto it = cot.find(n->id);
    if (it == cot.end() || n->parents.empty()) continue;
    const Var& c = it->second;
    std::vector<Var> parent_cots = n->vjp(n, c);
    for (std::size_t i = 0; i < n->parents.size(); ++i) {
      const Var& p = n->parents[i];
      if (!p->needs_grad || !parent_cots[i]) continue;
      auto pc = cot.find(p->id);
      if (pc == cot.end())
        cot[p->id] = parent_cots[i];
      else
        pc->second = add(pc->second, parent_cots[i]);
    }
  }

  std::vector<Var> result;
  result.reserve(wrt.size());
  for (const auto& w : wrt) {
    auto it = cot.find(w->id);
    if (it == cot.end()) {
      result.push_back(constant(Eigen::MatrixXd::Zero(w->rows(), w->cols())));
    } else if (create_graph) {
      result.push_back(it->second);
    } else {
      result.push_back(constant(it->second->value));
    }
  }
  return result;
}

}  // namespace mars::autodiff
