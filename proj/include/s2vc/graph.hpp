#pragma once

#include <cstddef>
#include <map>
#include <string>
#include <vector>

#include "s2vc/rng.hpp"
#include "s2vc/tensor.hpp"

namespace s2vc {

/// Reverse-mode gradient engine over a static computation graph.
///
/// Nodes are appended in evaluation order, so the node list is a topological
/// order by construction. Every value is viewed as a matrix (rank-1 tensors
/// are single rows). Node values are held in double; parameters are stored as
/// float tensors and widened on evaluation.
///
/// Broadcasting is limited to the right-hand operand of `add` and `mul`: each
/// of its extents must equal the left operand's or be 1.
class Graph {
 public:
  using NodeId = std::size_t;

  enum class Op { input, parameter, constant, matmul, add, mul, tanh, exp, log, sum, mean, slice, concat, scale };

  /// Reduction extent for `sum` and `mean`.
  enum class Axis {
    all,   ///< -> 1x1
    rows,  ///< reduce down the rows -> 1 x cols
    cols,  ///< reduce across the columns -> rows x 1
  };

  NodeId input(std::string name);
  NodeId parameter(std::string name, Tensor init, bool trainable = true);
  NodeId constant(Tensor64 value);

  NodeId matmul(NodeId a, NodeId b);
  NodeId add(NodeId a, NodeId b);
  NodeId mul(NodeId a, NodeId b);
  NodeId tanh(NodeId a);
  NodeId exp(NodeId a);
  NodeId log(NodeId a);
  NodeId sum(NodeId a, Axis axis = Axis::all);
  NodeId mean(NodeId a, Axis axis = Axis::all);
  /// Columns [begin, end).
  NodeId slice(NodeId a, std::size_t begin, std::size_t end);
  /// Column-wise concatenation.
  NodeId concat(std::vector<NodeId> parts);
  NodeId scale(NodeId a, double factor);

  /// Output node; defaults to the most recently added node.
  void set_output(NodeId id) { output_ = id; }
  NodeId output() const;

  Tensor eval(const std::map<std::string, Tensor>& inputs);
  /// Value of the output node from the last eval, in double.
  const Tensor64& output_value() const;
  double scalar_output() const;
  const Tensor64& value(NodeId id) const;

  /// Gradient of the scalar output w.r.t. every trainable parameter.
  std::map<std::string, Tensor64> backward();

  std::vector<std::string> parameter_names() const;
  bool has_parameter(const std::string& name) const;
  Tensor& parameter_value(const std::string& name);
  const Tensor& parameter_value(const std::string& name) const;

  std::size_t node_count() const { return nodes_.size(); }

  /// Multiplies the backward rule of `op` by `factor`. Exists so tests can
  /// verify that gradient checking catches a broken rule.
  void set_backward_scale_for_testing(Op op, double factor);

 private:
  struct Node {
    Op op;
    std::vector<NodeId> in;
    Axis axis = Axis::all;
    std::size_t begin = 0, end = 0;
    double factor = 1.0;
    std::string name;
    bool trainable = false;
    Tensor64 value;
    Tensor64 grad;
  };

  NodeId push(Node node);
  void check_id(NodeId id) const;
  void forward_node(NodeId id);
  void backward_node(NodeId id);
  double rule_scale(Op op) const;

  std::vector<Node> nodes_;
  std::vector<Tensor> params_;                 // parallel to parameter nodes
  std::map<std::string, NodeId> param_index_;  // name -> node id
  std::map<std::string, NodeId> input_index_;
  std::map<Op, double> fault_scale_;
  std::vector<bool> needs_;
  NodeId output_ = static_cast<NodeId>(-1);
  bool evaluated_ = false;
};

/// Raised for malformed graphs; carries the offending node.
class GraphError : public Error {
 public:
  GraphError(Graph::NodeId node, const std::string& what)
      : Error("graph node " + std::to_string(node) + ": " + what), node_(node) {}
  Graph::NodeId node() const { return node_; }

 private:
  Graph::NodeId node_;
};

struct GradCheckEntry {
  std::string parameter;
  std::size_t entries_checked = 0;
  double max_relative_error = 0.0;
};

struct GradCheckReport {
  std::vector<GradCheckEntry> parameters;
  double worst = 0.0;
  bool passed = true;
};

struct GradCheckOptions {
  double tolerance = 1e-4;
  double step = 1e-3;
  /// Entries sampled per parameter (all entries when the parameter is smaller).
  std::size_t max_entries = 64;
};

/// Compares backward() against central finite differences.
///
/// Relative error for a parameter is max|analytic - numeric| divided by the
/// larger of the two gradients' max-abs values, so all-zero gradients that
/// agree report 0. The graph's parameters are restored afterwards.
GradCheckReport grad_check(Graph& graph, const std::map<std::string, Tensor>& inputs, Rng& rng,
                           const GradCheckOptions& options = {});

}  // namespace s2vc
