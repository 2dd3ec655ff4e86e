#include "s2vc/graph.hpp"

#include <algorithm>
#include <cmath>

namespace s2vc {
namespace {

Tensor64 as_matrix(const Tensor64& t) { return Tensor64({t.rows(), t.cols()}, t.values()); }

Tensor64 widen(const Tensor& t) {
  std::vector<double> v(t.size());
  for (std::size_t i = 0; i < t.size(); ++i) v[i] = t[i];
  return Tensor64({t.rows(), t.cols()}, std::move(v));
}

// c = a * b^T
Tensor64 matmul_nt(const Tensor64& a, const Tensor64& b) {
  const std::size_t n = a.rows(), k = a.cols(), m = b.rows();
  Tensor64 c({n, m});
  for (std::size_t i = 0; i < n; ++i) {
    const double* ar = a.data().data() + i * k;
    for (std::size_t j = 0; j < m; ++j) {
      const double* br = b.data().data() + j * k;
      double s = 0.0;
      for (std::size_t p = 0; p < k; ++p) s += ar[p] * br[p];
      c[i * m + j] = s;
    }
  }
  return c;
}

// c = a^T * b
Tensor64 matmul_tn(const Tensor64& a, const Tensor64& b) {
  const std::size_t k = a.rows(), n = a.cols(), m = b.cols();
  Tensor64 c({n, m});
  for (std::size_t p = 0; p < k; ++p) {
    const double* ar = a.data().data() + p * n;
    const double* br = b.data().data() + p * m;
    for (std::size_t i = 0; i < n; ++i) {
      const double av = ar[i];
      if (av == 0.0) continue;
      double* cr = c.data().data() + i * m;
      for (std::size_t j = 0; j < m; ++j) cr[j] += av * br[j];
    }
  }
  return c;
}

// Sum `g` (shape of the broadcast result) down to `rows x cols`.
Tensor64 reduce_to(const Tensor64& g, std::size_t rows, std::size_t cols) {
  if (g.rows() == rows && g.cols() == cols) return g;
  Tensor64 out({rows, cols});
  const std::size_t gc = g.cols();
  for (std::size_t i = 0; i < g.rows(); ++i) {
    for (std::size_t j = 0; j < gc; ++j) {
      out[(rows == 1 ? 0 : i) * cols + (cols == 1 ? 0 : j)] += g[i * gc + j];
    }
  }
  return out;
}

bool broadcastable(const Tensor64& a, const Tensor64& b) {
  return (b.rows() == a.rows() || b.rows() == 1) && (b.cols() == a.cols() || b.cols() == 1);
}

std::size_t bcast_index(std::size_t i, std::size_t j, const Tensor64& b) {
  return (b.rows() == 1 ? 0 : i) * b.cols() + (b.cols() == 1 ? 0 : j);
}

void accumulate(Tensor64& dst, const Tensor64& src) {
  if (dst.empty() && src.size() != 0) {
    dst = src;
    return;
  }
  for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += src[i];
}

}  // namespace

Graph::NodeId Graph::push(Node node) {
  for (const NodeId id : node.in) check_id(id);
  nodes_.push_back(std::move(node));
  output_ = nodes_.size() - 1;
  evaluated_ = false;
  return output_;
}

void Graph::check_id(NodeId id) const {
  if (id >= nodes_.size()) throw GraphError(nodes_.size(), "refers to undefined node " + std::to_string(id));
}

Graph::NodeId Graph::input(std::string name) {
  if (input_index_.count(name)) throw GraphError(nodes_.size(), "duplicate input '" + name + "'");
  Node n{.op = Op::input, .name = name};
  const NodeId id = push(std::move(n));
  input_index_[name] = id;
  return id;
}

Graph::NodeId Graph::parameter(std::string name, Tensor init, bool trainable) {
  if (param_index_.count(name)) throw GraphError(nodes_.size(), "duplicate parameter '" + name + "'");
  Node n{.op = Op::parameter, .name = name, .trainable = trainable};
  n.begin = params_.size();
  params_.push_back(std::move(init));
  const NodeId id = push(std::move(n));
  param_index_[name] = id;
  return id;
}

Graph::NodeId Graph::constant(Tensor64 value) {
  Node n{.op = Op::constant};
  n.value = as_matrix(value);
  return push(std::move(n));
}

Graph::NodeId Graph::matmul(NodeId a, NodeId b) { return push({.op = Op::matmul, .in = {a, b}}); }
Graph::NodeId Graph::add(NodeId a, NodeId b) { return push({.op = Op::add, .in = {a, b}}); }
Graph::NodeId Graph::mul(NodeId a, NodeId b) { return push({.op = Op::mul, .in = {a, b}}); }
Graph::NodeId Graph::tanh(NodeId a) { return push({.op = Op::tanh, .in = {a}}); }
Graph::NodeId Graph::exp(NodeId a) { return push({.op = Op::exp, .in = {a}}); }
Graph::NodeId Graph::log(NodeId a) { return push({.op = Op::log, .in = {a}}); }
Graph::NodeId Graph::sum(NodeId a, Axis axis) { return push({.op = Op::sum, .in = {a}, .axis = axis}); }
Graph::NodeId Graph::mean(NodeId a, Axis axis) { return push({.op = Op::mean, .in = {a}, .axis = axis}); }
Graph::NodeId Graph::scale(NodeId a, double factor) {
  return push({.op = Op::scale, .in = {a}, .factor = factor});
}

Graph::NodeId Graph::slice(NodeId a, std::size_t begin, std::size_t end) {
  if (end <= begin) throw GraphError(nodes_.size(), "empty slice");
  return push({.op = Op::slice, .in = {a}, .begin = begin, .end = end});
}

Graph::NodeId Graph::concat(std::vector<NodeId> parts) {
  if (parts.empty()) throw GraphError(nodes_.size(), "concat of nothing");
  return push({.op = Op::concat, .in = std::move(parts)});
}

Graph::NodeId Graph::output() const {
  if (nodes_.empty()) throw Error("graph is empty");
  return output_;
}

Tensor Graph::eval(const std::map<std::string, Tensor>& inputs) {
  if (nodes_.empty()) throw Error("graph is empty");
  for (const auto& [name, id] : input_index_) {
    const auto it = inputs.find(name);
    if (it == inputs.end()) throw GraphError(id, "missing input '" + name + "'");
    nodes_[id].value = widen(it->second);
  }
  for (NodeId id = 0; id < nodes_.size(); ++id) {
    if (nodes_[id].op == Op::input) continue;
    forward_node(id);
    if (!nodes_[id].value.all_finite()) throw GraphError(id, "non-finite value");
  }
  evaluated_ = true;
  return output_value().cast<float>();
}

const Tensor64& Graph::output_value() const {
  if (!evaluated_) throw Error("graph has not been evaluated");
  return nodes_[output()].value;
}

double Graph::scalar_output() const {
  const auto& v = output_value();
  if (v.size() != 1) throw GraphError(output(), "output is not scalar");
  return v[0];
}

const Tensor64& Graph::value(NodeId id) const {
  check_id(id);
  return nodes_[id].value;
}

void Graph::forward_node(NodeId id) {
  Node& n = nodes_[id];
  auto in = [&](std::size_t k) -> const Tensor64& { return nodes_[n.in[k]].value; };
  switch (n.op) {
    case Op::input:
    case Op::constant:
      break;
    case Op::parameter:
      n.value = widen(params_[n.begin]);
      break;
    case Op::matmul: {
      const auto& a = in(0);
      const auto& b = in(1);
      if (a.cols() != b.rows()) {
        throw GraphError(id, "matmul shape mismatch " + shape_string(a.shape()) + " x " +
                                 shape_string(b.shape()));
      }
      n.value = s2vc::matmul(a, b);
      break;
    }
    case Op::add:
    case Op::mul: {
      const auto& a = in(0);
      const auto& b = in(1);
      if (!broadcastable(a, b)) {
        throw GraphError(id, std::string(n.op == Op::add ? "add" : "mul") + " shape mismatch " +
                                 shape_string(a.shape()) + " vs " + shape_string(b.shape()));
      }
      Tensor64 out({a.rows(), a.cols()});
      for (std::size_t i = 0; i < a.rows(); ++i) {
        for (std::size_t j = 0; j < a.cols(); ++j) {
          const double av = a[i * a.cols() + j];
          const double bv = b[bcast_index(i, j, b)];
          out[i * a.cols() + j] = n.op == Op::add ? av + bv : av * bv;
        }
      }
      n.value = std::move(out);
      break;
    }
    case Op::tanh:
    case Op::exp:
    case Op::log: {
      const auto& a = in(0);
      Tensor64 out({a.rows(), a.cols()});
      for (std::size_t i = 0; i < a.size(); ++i) {
        const double x = a[i];
        if (n.op == Op::log && !(x > 0.0)) throw GraphError(id, "log of non-positive value");
        out[i] = n.op == Op::tanh ? std::tanh(x) : n.op == Op::exp ? std::exp(x) : std::log(x);
      }
      n.value = std::move(out);
      break;
    }
    case Op::sum:
    case Op::mean: {
      const auto& a = in(0);
      const std::size_t r = a.rows(), c = a.cols();
      Tensor64 out;
      double count = 1.0;
      if (n.axis == Axis::all) {
        out = Tensor64({1, 1});
        for (std::size_t i = 0; i < a.size(); ++i) out[0] += a[i];
        count = static_cast<double>(a.size());
      } else if (n.axis == Axis::rows) {
        out = Tensor64({1, c});
        for (std::size_t i = 0; i < r; ++i)
          for (std::size_t j = 0; j < c; ++j) out[j] += a[i * c + j];
        count = static_cast<double>(r);
      } else {
        out = Tensor64({r, 1});
        for (std::size_t i = 0; i < r; ++i)
          for (std::size_t j = 0; j < c; ++j) out[i] += a[i * c + j];
        count = static_cast<double>(c);
      }
      if (n.op == Op::mean) {
        if (count == 0.0) throw GraphError(id, "mean of empty tensor");
        for (auto& v : out.values()) v /= count;
      }
      n.value = std::move(out);
      break;
    }
    case Op::slice: {
      const auto& a = in(0);
      if (n.end > a.cols()) {
        throw GraphError(id, "slice [" + std::to_string(n.begin) + "," + std::to_string(n.end) +
                                 ") exceeds " + std::to_string(a.cols()) + " columns");
      }
      const std::size_t w = n.end - n.begin;
      Tensor64 out({a.rows(), w});
      for (std::size_t i = 0; i < a.rows(); ++i)
        for (std::size_t j = 0; j < w; ++j) out[i * w + j] = a[i * a.cols() + n.begin + j];
      n.value = std::move(out);
      break;
    }
    case Op::concat: {
      const std::size_t r = in(0).rows();
      std::size_t total = 0;
      for (std::size_t k = 0; k < n.in.size(); ++k) {
        if (in(k).rows() != r) throw GraphError(id, "concat row mismatch");
        total += in(k).cols();
      }
      Tensor64 out({r, total});
      std::size_t off = 0;
      for (std::size_t k = 0; k < n.in.size(); ++k) {
        const auto& p = in(k);
        for (std::size_t i = 0; i < r; ++i)
          for (std::size_t j = 0; j < p.cols(); ++j) out[i * total + off + j] = p[i * p.cols() + j];
        off += p.cols();
      }
      n.value = std::move(out);
      break;
    }
    case Op::scale: {
      Tensor64 out = as_matrix(in(0));
      for (auto& v : out.values()) v *= n.factor;
      n.value = std::move(out);
      break;
    }
  }
}

double Graph::rule_scale(Op op) const {
  const auto it = fault_scale_.find(op);
  return it == fault_scale_.end() ? 1.0 : it->second;
}

void Graph::set_backward_scale_for_testing(Op op, double factor) { fault_scale_[op] = factor; }

std::map<std::string, Tensor64> Graph::backward() {
  const NodeId out = output();
  if (!evaluated_) throw Error("backward called before eval");
  if (nodes_[out].value.size() != 1) throw GraphError(out, "backward requires a scalar output");

  // Only nodes downstream of a trainable parameter carry gradients.
  needs_.assign(nodes_.size(), false);
  auto& needs = needs_;
  for (NodeId id = 0; id <= out; ++id) {
    const Node& n = nodes_[id];
    if (n.op == Op::parameter) {
      needs[id] = n.trainable;
      continue;
    }
    for (const NodeId i : n.in) needs[id] = needs[id] || needs[i];
  }
  for (auto& n : nodes_) n.grad = Tensor64();
  nodes_[out].grad = Tensor64({1, 1}, std::vector<double>{1.0});
  for (NodeId id = out + 1; id-- > 0;) {
    if (!needs[id] || nodes_[id].grad.empty()) continue;
    backward_node(id);
  }

  std::map<std::string, Tensor64> grads;
  for (const auto& [name, id] : param_index_) {
    const Node& n = nodes_[id];
    if (!n.trainable) continue;
    const Tensor& p = params_[n.begin];
    if (n.grad.empty()) {
      grads[name] = Tensor64(p.shape());
    } else {
      grads[name] = Tensor64(p.shape(), n.grad.values());
    }
  }
  return grads;
}

void Graph::backward_node(NodeId id) {
  Node& n = nodes_[id];
  const Tensor64& g = n.grad;
  const double k = rule_scale(n.op);
  auto push_grad = [&](std::size_t slot, Tensor64 contribution) {
    if (!needs_[n.in[slot]]) return;
    if (k != 1.0)
      for (auto& v : contribution.values()) v *= k;
    accumulate(nodes_[n.in[slot]].grad, contribution);
  };
  auto in = [&](std::size_t s) -> const Tensor64& { return nodes_[n.in[s]].value; };

  switch (n.op) {
    case Op::input:
    case Op::parameter:
    case Op::constant:
      break;
    case Op::matmul:
      if (needs_[n.in[0]]) push_grad(0, matmul_nt(g, in(1)));
      if (needs_[n.in[1]]) push_grad(1, matmul_tn(in(0), g));
      break;
    case Op::add:
      push_grad(0, g);
      push_grad(1, reduce_to(g, in(1).rows(), in(1).cols()));
      break;
    case Op::mul: {
      const auto& a = in(0);
      const auto& b = in(1);
      Tensor64 ga({a.rows(), a.cols()}), gb_full({a.rows(), a.cols()});
      for (std::size_t i = 0; i < a.rows(); ++i) {
        for (std::size_t j = 0; j < a.cols(); ++j) {
          const std::size_t ij = i * a.cols() + j;
          ga[ij] = g[ij] * b[bcast_index(i, j, b)];
          gb_full[ij] = g[ij] * a[ij];
        }
      }
      push_grad(0, std::move(ga));
      push_grad(1, reduce_to(gb_full, b.rows(), b.cols()));
      break;
    }
    case Op::tanh: {
      Tensor64 ga = g;
      for (std::size_t i = 0; i < ga.size(); ++i) ga[i] *= 1.0 - n.value[i] * n.value[i];
      push_grad(0, std::move(ga));
      break;
    }
    case Op::exp: {
      Tensor64 ga = g;
      for (std::size_t i = 0; i < ga.size(); ++i) ga[i] *= n.value[i];
      push_grad(0, std::move(ga));
      break;
    }
    case Op::log: {
      Tensor64 ga = g;
      for (std::size_t i = 0; i < ga.size(); ++i) ga[i] /= in(0)[i];
      push_grad(0, std::move(ga));
      break;
    }
    case Op::sum:
    case Op::mean: {
      const auto& a = in(0);
      const std::size_t r = a.rows(), c = a.cols();
      double count = 1.0;
      if (n.op == Op::mean) {
        count = n.axis == Axis::all    ? static_cast<double>(a.size())
                : n.axis == Axis::rows ? static_cast<double>(r)
                                       : static_cast<double>(c);
      }
      Tensor64 ga({r, c});
      for (std::size_t i = 0; i < r; ++i) {
        for (std::size_t j = 0; j < c; ++j) {
          const double gv = n.axis == Axis::all ? g[0] : n.axis == Axis::rows ? g[j] : g[i];
          ga[i * c + j] = gv / count;
        }
      }
      push_grad(0, std::move(ga));
      break;
    }
    case Op::slice: {
      const auto& a = in(0);
      const std::size_t w = n.end - n.begin;
      Tensor64 ga({a.rows(), a.cols()});
      for (std::size_t i = 0; i < a.rows(); ++i)
        for (std::size_t j = 0; j < w; ++j) ga[i * a.cols() + n.begin + j] = g[i * w + j];
      push_grad(0, std::move(ga));
      break;
    }
    case Op::concat: {
      const std::size_t total = n.value.cols();
      std::size_t off = 0;
      for (std::size_t s = 0; s < n.in.size(); ++s) {
        const auto& p = in(s);
        Tensor64 gp({p.rows(), p.cols()});
        for (std::size_t i = 0; i < p.rows(); ++i)
          for (std::size_t j = 0; j < p.cols(); ++j) gp[i * p.cols() + j] = g[i * total + off + j];
        off += p.cols();
        push_grad(s, std::move(gp));
      }
      break;
    }
    case Op::scale: {
      Tensor64 ga = g;
      for (auto& v : ga.values()) v *= n.factor;
      push_grad(0, std::move(ga));
      break;
    }
  }
}

std::vector<std::string> Graph::parameter_names() const {
  std::vector<std::string> names;
  for (const auto& [name, id] : param_index_) names.push_back(name);
  return names;
}

bool Graph::has_parameter(const std::string& name) const { return param_index_.count(name) != 0; }

Tensor& Graph::parameter_value(const std::string& name) {
  const auto it = param_index_.find(name);
  if (it == param_index_.end()) throw Error("no parameter '" + name + "'");
  return params_[nodes_[it->second].begin];
}

const Tensor& Graph::parameter_value(const std::string& name) const {
  const auto it = param_index_.find(name);
  if (it == param_index_.end()) throw Error("no parameter '" + name + "'");
  return params_[nodes_[it->second].begin];
}

GradCheckReport grad_check(Graph& graph, const std::map<std::string, Tensor>& inputs, Rng& rng,
                           const GradCheckOptions& options) {
  GradCheckReport report;
  graph.eval(inputs);
  const auto analytic = graph.backward();

  for (const auto& [name, grad] : analytic) {
    Tensor& p = graph.parameter_value(name);
    std::vector<std::size_t> entries;
    if (p.size() <= options.max_entries) {
      for (std::size_t i = 0; i < p.size(); ++i) entries.push_back(i);
    } else {
      auto perm = rng.permutation(p.size());
      entries.assign(perm.begin(), perm.begin() + static_cast<std::ptrdiff_t>(options.max_entries));
      std::sort(entries.begin(), entries.end());
    }
    double max_diff = 0.0, max_a = 0.0, max_n = 0.0;
    for (const std::size_t i : entries) {
      const float original = p[i];
      const float plus = static_cast<float>(original + options.step);
      const float minus = static_cast<float>(original - options.step);
      p[i] = plus;
      graph.eval(inputs);
      const double f_plus = graph.scalar_output();
      p[i] = minus;
      graph.eval(inputs);
      const double f_minus = graph.scalar_output();
      p[i] = original;
      const double numeric =
          (f_plus - f_minus) / (static_cast<double>(plus) - static_cast<double>(minus));
      max_diff = std::max(max_diff, std::abs(numeric - grad[i]));
      max_a = std::max(max_a, std::abs(grad[i]));
      max_n = std::max(max_n, std::abs(numeric));
    }
    const double denom = std::max({max_a, max_n, 1e-8});
    const double rel = max_diff < 1e-10 ? 0.0 : max_diff / denom;
    report.parameters.push_back({name, entries.size(), rel});
    report.worst = std::max(report.worst, rel);
  }
  graph.eval(inputs);
  report.passed = report.worst < options.tolerance;
  return report;
}

}  // namespace s2vc
