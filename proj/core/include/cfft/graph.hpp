#pragma once

#include <optional>
#include <string>
#include <vector>

#include "cfft/tensor.hpp"

namespace cfft {

// Primitive op set. Deliberately closed: just enough for a small attention
// classifier and the losses built on it.
enum class Op : uint8_t {
  kInput,
  kParam,
  kConst,
  kMatmul,
  kTranspose,
  kAdd,
  kSub,
  kMul,
  kScale,
  kAddRowBias,
  kSquare,
  kGelu,
  kSoftmaxRows,
  kLayerNormRows,
  kL2NormalizeRows,
  kSliceRows,
  kSliceCols,
  kConcatRows,
  kConcatCols,
  kReshape,
  kSumAll,
  kMeanAll,
  kMse,
  kCrossEntropy,
  kKlDiv,
};

const char* op_name(Op op);

struct Node {
  Op op;
  Shape shape;
  std::vector<int> in;
  double attr0 = 0.0;  // scale factor / slice start / temperature
  double attr1 = 0.0;  // slice length
  std::string name;    // parameter or input name; empty for interior nodes
};

// A Computation: immutable DAG of primitive ops from named parameters and
// inputs to (typically) one scalar loss. Node ids are insertion-ordered and
// every edge points backwards, so insertion order is a topological order.
template <typename S>
class Graph {
 public:
  using Id = int;

  Id input(const std::string& name, Shape shape);
  Id param(const std::string& name, Shape shape);
  Id constant(Tensor<S> value);

  Id matmul(Id a, Id b);
  Id transpose(Id a);
  Id add(Id a, Id b);
  Id sub(Id a, Id b);
  Id mul(Id a, Id b);
  Id scale(Id a, double c);
  Id add_row_bias(Id a, Id bias);
  Id square(Id a);
  Id gelu(Id a);
  Id softmax_rows(Id a);
  Id layer_norm_rows(Id a, Id gain, Id bias);
  Id l2_normalize_rows(Id a);
  Id slice_rows(Id a, int64_t start, int64_t count);
  Id slice_cols(Id a, int64_t start, int64_t count);
  Id concat_rows(const std::vector<Id>& parts);
  Id concat_cols(const std::vector<Id>& parts);
  Id reshape(Id a, Shape shape);
  Id sum_all(Id a);
  Id mean_all(Id a);
  Id mse(Id a, Id b);
  Id cross_entropy(Id logits, Id onehot);
  Id kl_div(Id target_logits, Id predicted_logits, double temperature);

  void set_loss(Id id);
  Id loss_id() const { return loss_; }

  const Node& node(Id id) const { return nodes_[static_cast<size_t>(id)]; }
  int size() const { return static_cast<int>(nodes_.size()); }
  const std::vector<std::pair<std::string, Id>>& param_nodes() const { return param_list_; }
  const std::vector<std::pair<std::string, Id>>& input_nodes() const { return input_list_; }
  std::optional<Id> find_param(const std::string& name) const;
  const Tensor<S>& const_value(Id id) const;
  std::string describe(Id id) const;

 private:
  Id push(Node n);
  void check_rank2(Id id, const char* what) const;
  const Shape& shape_of(Id id) const { return nodes_[static_cast<size_t>(id)].shape; }
  Id binary_same_shape(Op op, Id a, Id b);
  void reject_repeated_param(Id a, Id b) const;

  std::vector<Node> nodes_;
  std::vector<Tensor<S>> consts_;   // parallel to nodes_; empty tensor unless kConst
  std::vector<std::pair<std::string, Id>> param_list_;
  std::vector<std::pair<std::string, Id>> input_list_;
  Id loss_ = -1;
};

// One evaluation workspace over an immutable graph. Buffers are preallocated
// from the graph's static shapes and reused across runs; parameters and
// inputs are bound by pointer and never copied.
template <typename S>
class Evaluation {
 public:
  explicit Evaluation(const Graph<S>& g);

  void bind_params(const ParamMap<S>* params);
  void bind_input(const std::string& name, const Tensor<S>* value);

  void forward();
  void backward();  // from the graph's loss node; implies a prior forward()

  double loss() const;
  const Tensor<S>& value(int id) const;
  const Tensor<S>& grad(int id) const;
  ParamMap<S> param_grads() const;
  // Accumulates scale * dLoss/dParam into acc (acc must carry matching shapes).
  void accumulate_param_grads(ParamMap<S>& acc, S scale) const;

 private:
  const Tensor<S>& in_val(int node, int slot) const;
  void compute(int id);
  void propagate(int id);
  void check_finite(int id, const Tensor<S>& t, const char* stage) const;

  const Graph<S>* g_;
  const ParamMap<S>* params_ = nullptr;
  std::vector<const Tensor<S>*> external_;  // non-null for kInput/kParam nodes
  std::vector<Tensor<S>> vals_;
  std::vector<Tensor<S>> grads_;
  bool has_grads_ = false;
};

// Spec-level convenience: evaluate a scalar computation and the gradient of
// every named parameter.
template <typename S>
std::pair<double, ParamMap<S>> value_and_grad(const Graph<S>& comp, const ParamMap<S>& params,
                                              const std::map<std::string, Tensor<S>>& inputs = {});

// Central finite differences; the test oracle for value_and_grad.
template <typename S>
ParamMap<S> finite_diff_grad(const Graph<S>& comp, const ParamMap<S>& params, double step,
                             const std::map<std::string, Tensor<S>>& inputs = {});

extern template class Graph<float>;
extern template class Graph<double>;
extern template class Evaluation<float>;
extern template class Evaluation<double>;
extern template std::pair<double, ParamMap<float>> value_and_grad(
    const Graph<float>&, const ParamMap<float>&, const std::map<std::string, Tensor<float>>&);
extern template std::pair<double, ParamMap<double>> value_and_grad(
    const Graph<double>&, const ParamMap<double>&, const std::map<std::string, Tensor<double>>&);
extern template ParamMap<float> finite_diff_grad(const Graph<float>&, const ParamMap<float>&,
                                                 double,
                                                 const std::map<std::string, Tensor<float>>&);
extern template ParamMap<double> finite_diff_grad(const Graph<double>&, const ParamMap<double>&,
                                                  double,
                                                  const std::map<std::string, Tensor<double>>&);

}  // namespace cfft
