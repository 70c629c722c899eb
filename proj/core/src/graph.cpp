#include "cfft/graph.hpp"

#include <Eigen/Core>

#include <algorithm>
#include <cmath>

namespace cfft {

namespace {

template <typename S>
using EMat = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename S>
using MapM = Eigen::Map<EMat<S>>;
template <typename S>
using MapCM = Eigen::Map<const EMat<S>>;

template <typename S>
MapCM<S> as_mat(const Tensor<S>& t) {
  return MapCM<S>(t.data.data(), t.rows(), t.cols());
}

template <typename S>
MapM<S> as_mat(Tensor<S>& t) {
  return MapM<S>(t.data.data(), t.rows(), t.cols());
}

constexpr double kLnEps = 1e-5;  // layer norm variance epsilon

}  // namespace

const char* op_name(Op op) {
  switch (op) {
    case Op::kInput: return "input";
    case Op::kParam: return "param";
    case Op::kConst: return "const";
    case Op::kMatmul: return "matmul";
    case Op::kTranspose: return "transpose";
    case Op::kAdd: return "add";
    case Op::kSub: return "sub";
    case Op::kMul: return "mul";
    case Op::kScale: return "scale";
    case Op::kAddRowBias: return "add_row_bias";
    case Op::kSquare: return "square";
    case Op::kGelu: return "gelu";
    case Op::kSoftmaxRows: return "softmax_rows";
    case Op::kLayerNormRows: return "layer_norm_rows";
    case Op::kL2NormalizeRows: return "l2_normalize_rows";
    case Op::kSliceRows: return "slice_rows";
    case Op::kSliceCols: return "slice_cols";
    case Op::kConcatRows: return "concat_rows";
    case Op::kConcatCols: return "concat_cols";
    case Op::kReshape: return "reshape";
    case Op::kSumAll: return "sum_all";
    case Op::kMeanAll: return "mean_all";
    case Op::kMse: return "mse";
    case Op::kCrossEntropy: return "cross_entropy";
    case Op::kKlDiv: return "kl_div";
  }
  return "?";
}

// ---------------------------------------------------------------------------
// Graph building

template <typename S>
int Graph<S>::push(Node n) {
  for (int in : n.in) {
    if (in < 0 || in >= static_cast<int>(nodes_.size()))
      throw std::invalid_argument("graph: edge to unknown node");
  }
  nodes_.push_back(std::move(n));
  consts_.emplace_back();
  return static_cast<int>(nodes_.size()) - 1;
}

template <typename S>
void Graph<S>::check_rank2(Id id, const char* what) const {
  if (shape_of(id).size() != 2)
    throw std::invalid_argument(std::string("graph: ") + what + " requires a rank-2 operand, got " +
                                shape_str(shape_of(id)));
}

template <typename S>
void Graph<S>::reject_repeated_param(Id a, Id b) const {
  if (a == b && node(a).op == Op::kParam)
    throw std::invalid_argument("graph: parameter '" + node(a).name +
                                "' referenced twice by one node");
}

template <typename S>
int Graph<S>::input(const std::string& name, Shape shape) {
  for (const auto& [n, _] : input_list_)
    if (n == name) throw std::invalid_argument("graph: duplicate input '" + name + "'");
  Id id = push(Node{Op::kInput, std::move(shape), {}, 0, 0, name});
  input_list_.emplace_back(name, id);
  return id;
}

template <typename S>
int Graph<S>::param(const std::string& name, Shape shape) {
  for (const auto& [n, _] : param_list_)
    if (n == name) throw std::invalid_argument("graph: duplicate parameter '" + name + "'");
  Id id = push(Node{Op::kParam, std::move(shape), {}, 0, 0, name});
  param_list_.emplace_back(name, id);
  return id;
}

template <typename S>
int Graph<S>::constant(Tensor<S> value) {
  Id id = push(Node{Op::kConst, value.shape, {}, 0, 0, {}});
  consts_[static_cast<size_t>(id)] = std::move(value);
  return id;
}

template <typename S>
std::optional<int> Graph<S>::find_param(const std::string& name) const {
  for (const auto& [n, id] : param_list_)
    if (n == name) return id;
  return std::nullopt;
}

template <typename S>
const Tensor<S>& Graph<S>::const_value(Id id) const {
  return consts_[static_cast<size_t>(id)];
}

template <typename S>
std::string Graph<S>::describe(Id id) const {
  const Node& n = node(id);
  std::string s = "node #" + std::to_string(id) + " (" + op_name(n.op);
  if (!n.name.empty()) s += " '" + n.name + "'";
  return s + ")";
}

template <typename S>
int Graph<S>::binary_same_shape(Op op, Id a, Id b) {
  reject_repeated_param(a, b);
  if (shape_of(a) != shape_of(b))
    throw std::invalid_argument(std::string("graph: ") + op_name(op) + " shape mismatch " +
                                shape_str(shape_of(a)) + " vs " + shape_str(shape_of(b)));
  return push(Node{op, shape_of(a), {a, b}});
}

template <typename S>
int Graph<S>::matmul(Id a, Id b) {
  reject_repeated_param(a, b);
  check_rank2(a, "matmul");
  check_rank2(b, "matmul");
  if (shape_of(a)[1] != shape_of(b)[0])
    throw std::invalid_argument("graph: matmul inner dims " + shape_str(shape_of(a)) + " x " +
                                shape_str(shape_of(b)));
  return push(Node{Op::kMatmul, Shape{shape_of(a)[0], shape_of(b)[1]}, {a, b}});
}

template <typename S>
int Graph<S>::transpose(Id a) {
  check_rank2(a, "transpose");
  return push(Node{Op::kTranspose, Shape{shape_of(a)[1], shape_of(a)[0]}, {a}});
}

template <typename S>
int Graph<S>::add(Id a, Id b) {
  return binary_same_shape(Op::kAdd, a, b);
}
template <typename S>
int Graph<S>::sub(Id a, Id b) {
  return binary_same_shape(Op::kSub, a, b);
}
template <typename S>
int Graph<S>::mul(Id a, Id b) {
  return binary_same_shape(Op::kMul, a, b);
}

template <typename S>
int Graph<S>::scale(Id a, double c) {
  return push(Node{Op::kScale, shape_of(a), {a}, c});
}

template <typename S>
int Graph<S>::add_row_bias(Id a, Id bias) {
  check_rank2(a, "add_row_bias");
  if (shape_of(bias).size() != 1 || shape_of(bias)[0] != shape_of(a)[1])
    throw std::invalid_argument("graph: add_row_bias wants bias [cols], got " +
                                shape_str(shape_of(bias)));
  return push(Node{Op::kAddRowBias, shape_of(a), {a, bias}});
}

template <typename S>
int Graph<S>::square(Id a) {
  return push(Node{Op::kSquare, shape_of(a), {a}});
}

template <typename S>
int Graph<S>::gelu(Id a) {
  return push(Node{Op::kGelu, shape_of(a), {a}});
}

template <typename S>
int Graph<S>::softmax_rows(Id a) {
  check_rank2(a, "softmax_rows");
  return push(Node{Op::kSoftmaxRows, shape_of(a), {a}});
}

template <typename S>
int Graph<S>::layer_norm_rows(Id a, Id gain, Id bias) {
  check_rank2(a, "layer_norm_rows");
  int64_t n = shape_of(a)[1];
  for (Id p : {gain, bias})
    if (shape_of(p).size() != 1 || shape_of(p)[0] != n)
      throw std::invalid_argument("graph: layer_norm_rows wants gain/bias [cols]");
  reject_repeated_param(gain, bias);
  return push(Node{Op::kLayerNormRows, shape_of(a), {a, gain, bias}});
}

template <typename S>
int Graph<S>::l2_normalize_rows(Id a) {
  check_rank2(a, "l2_normalize_rows");
  return push(Node{Op::kL2NormalizeRows, shape_of(a), {a}});
}

template <typename S>
int Graph<S>::slice_rows(Id a, int64_t start, int64_t count) {
  check_rank2(a, "slice_rows");
  if (start < 0 || count <= 0 || start + count > shape_of(a)[0])
    throw std::invalid_argument("graph: slice_rows out of range");
  return push(Node{Op::kSliceRows, Shape{count, shape_of(a)[1]}, {a}, double(start), double(count)});
}

template <typename S>
int Graph<S>::slice_cols(Id a, int64_t start, int64_t count) {
  check_rank2(a, "slice_cols");
  if (start < 0 || count <= 0 || start + count > shape_of(a)[1])
    throw std::invalid_argument("graph: slice_cols out of range");
  return push(Node{Op::kSliceCols, Shape{shape_of(a)[0], count}, {a}, double(start), double(count)});
}

template <typename S>
int Graph<S>::concat_rows(const std::vector<Id>& parts) {
  if (parts.empty()) throw std::invalid_argument("graph: concat of nothing");
  int64_t rows = 0, cols = shape_of(parts[0])[1];
  for (Id p : parts) {
    check_rank2(p, "concat_rows");
    if (shape_of(p)[1] != cols) throw std::invalid_argument("graph: concat_rows column mismatch");
    rows += shape_of(p)[0];
  }
  return push(Node{Op::kConcatRows, Shape{rows, cols}, parts});
}

template <typename S>
int Graph<S>::concat_cols(const std::vector<Id>& parts) {
  if (parts.empty()) throw std::invalid_argument("graph: concat of nothing");
  int64_t cols = 0, rows = shape_of(parts[0])[0];
  for (Id p : parts) {
    check_rank2(p, "concat_cols");
    if (shape_of(p)[0] != rows) throw std::invalid_argument("graph: concat_cols row mismatch");
    cols += shape_of(p)[1];
  }
  return push(Node{Op::kConcatCols, Shape{rows, cols}, parts});
}

template <typename S>
int Graph<S>::reshape(Id a, Shape shape) {
  if (numel(shape) != numel(shape_of(a)))
    throw std::invalid_argument("graph: reshape changes element count");
  return push(Node{Op::kReshape, std::move(shape), {a}});
}

template <typename S>
int Graph<S>::sum_all(Id a) {
  return push(Node{Op::kSumAll, Shape{1, 1}, {a}});
}

template <typename S>
int Graph<S>::mean_all(Id a) {
  return push(Node{Op::kMeanAll, Shape{1, 1}, {a}});
}

template <typename S>
int Graph<S>::mse(Id a, Id b) {
  reject_repeated_param(a, b);
  if (shape_of(a) != shape_of(b)) throw std::invalid_argument("graph: mse shape mismatch");
  return push(Node{Op::kMse, Shape{1, 1}, {a, b}});
}

template <typename S>
int Graph<S>::cross_entropy(Id logits, Id onehot) {
  reject_repeated_param(logits, onehot);
  check_rank2(logits, "cross_entropy");
  if (shape_of(logits) != shape_of(onehot))
    throw std::invalid_argument("graph: cross_entropy shape mismatch");
  return push(Node{Op::kCrossEntropy, Shape{1, 1}, {logits, onehot}});
}

template <typename S>
int Graph<S>::kl_div(Id target_logits, Id predicted_logits, double temperature) {
  reject_repeated_param(target_logits, predicted_logits);
  check_rank2(target_logits, "kl_div");
  if (shape_of(target_logits) != shape_of(predicted_logits))
    throw std::invalid_argument("graph: kl_div shape mismatch");
  if (!(temperature > 0)) throw std::invalid_argument("graph: kl_div temperature must be > 0");
  return push(Node{Op::kKlDiv, Shape{1, 1}, {target_logits, predicted_logits}, temperature});
}

template <typename S>
void Graph<S>::set_loss(Id id) {
  if (numel(shape_of(id)) != 1)
    throw std::invalid_argument("graph: loss must be scalar, got " + shape_str(shape_of(id)));
  loss_ = id;
}

// ---------------------------------------------------------------------------
// Evaluation

template <typename S>
Evaluation<S>::Evaluation(const Graph<S>& g) : g_(&g) {
  int n = g.size();
  external_.assign(static_cast<size_t>(n), nullptr);
  vals_.resize(static_cast<size_t>(n));
  for (int id = 0; id < n; ++id) {
    const Node& nd = g.node(id);
    if (nd.op == Op::kInput || nd.op == Op::kParam) continue;  // bound externally
    if (nd.op == Op::kConst) {
      external_[static_cast<size_t>(id)] = &g.const_value(id);
      continue;
    }
    vals_[static_cast<size_t>(id)] = Tensor<S>(nd.shape);
  }
}

template <typename S>
void Evaluation<S>::bind_params(const ParamMap<S>* params) {
  params_ = params;
  for (const auto& [name, id] : g_->param_nodes()) {
    auto it = params->find(name);
    if (it == params->end())
      throw std::invalid_argument("evaluation: missing parameter '" + name + "'");
    if (it->second.shape != g_->node(id).shape)
      throw std::invalid_argument("evaluation: parameter '" + name + "' shape " +
                                  shape_str(it->second.shape) + " != " +
                                  shape_str(g_->node(id).shape));
    external_[static_cast<size_t>(id)] = &it->second;
  }
}

template <typename S>
void Evaluation<S>::bind_input(const std::string& name, const Tensor<S>* value) {
  for (const auto& [n, id] : g_->input_nodes()) {
    if (n != name) continue;
    if (value->shape != g_->node(id).shape)
      throw std::invalid_argument("evaluation: input '" + name + "' shape " +
                                  shape_str(value->shape) + " != " +
                                  shape_str(g_->node(id).shape));
    external_[static_cast<size_t>(id)] = value;
    return;
  }
  throw std::invalid_argument("evaluation: unknown input '" + name + "'");
}

template <typename S>
const Tensor<S>& Evaluation<S>::value(int id) const {
  const Tensor<S>* ext = external_[static_cast<size_t>(id)];
  return ext ? *ext : vals_[static_cast<size_t>(id)];
}

template <typename S>
const Tensor<S>& Evaluation<S>::in_val(int node, int slot) const {
  return value(g_->node(node).in[static_cast<size_t>(slot)]);
}

template <typename S>
const Tensor<S>& Evaluation<S>::grad(int id) const {
  if (!has_grads_) throw std::logic_error("evaluation: grad() before backward()");
  return grads_[static_cast<size_t>(id)];
}

template <typename S>
double Evaluation<S>::loss() const {
  int id = g_->loss_id();
  if (id < 0) throw std::logic_error("evaluation: graph has no loss node");
  return static_cast<double>(value(id).data[0]);
}

template <typename S>
void Evaluation<S>::check_finite(int id, const Tensor<S>& t, const char* stage) const {
  if (!t.all_finite())
    throw NumericError("non-finite " + std::string(stage) + " at " + g_->describe(id));
}

template <typename S>
void Evaluation<S>::forward() {
  int n = g_->size();
  for (int id = 0; id < n; ++id) {
    const Node& nd = g_->node(id);
    if (nd.op == Op::kInput || nd.op == Op::kParam) {
      if (!external_[static_cast<size_t>(id)])
        throw std::invalid_argument("evaluation: unbound " + g_->describe(id));
      check_finite(id, *external_[static_cast<size_t>(id)], "value");
      continue;
    }
    if (nd.op == Op::kConst) continue;
    compute(id);
    check_finite(id, vals_[static_cast<size_t>(id)], "value");
  }
  has_grads_ = false;
}

template <typename S>
void Evaluation<S>::compute(int id) {
  const Node& nd = g_->node(id);
  Tensor<S>& out = vals_[static_cast<size_t>(id)];
  switch (nd.op) {
    case Op::kMatmul: {
      const Tensor<S>&a = in_val(id, 0), &b = in_val(id, 1);
      as_mat(out).noalias() = as_mat(a) * as_mat(b);
      break;
    }
    case Op::kTranspose: {
      as_mat(out) = as_mat(in_val(id, 0)).transpose();
      break;
    }
    case Op::kAdd: {
      const auto&a = in_val(id, 0).data, &b = in_val(id, 1).data;
      for (size_t i = 0; i < a.size(); ++i) out.data[i] = a[i] + b[i];
      break;
    }
    case Op::kSub: {
      const auto&a = in_val(id, 0).data, &b = in_val(id, 1).data;
      for (size_t i = 0; i < a.size(); ++i) out.data[i] = a[i] - b[i];
      break;
    }
    case Op::kMul: {
      const auto&a = in_val(id, 0).data, &b = in_val(id, 1).data;
      for (size_t i = 0; i < a.size(); ++i) out.data[i] = a[i] * b[i];
      break;
    }
    case Op::kScale: {
      const auto& a = in_val(id, 0).data;
      const S c = static_cast<S>(nd.attr0);
      for (size_t i = 0; i < a.size(); ++i) out.data[i] = a[i] * c;
      break;
    }
    case Op::kAddRowBias: {
      const Tensor<S>&a = in_val(id, 0), &b = in_val(id, 1);
      int64_t rows = a.rows(), cols = a.cols();
      for (int64_t r = 0; r < rows; ++r)
        for (int64_t c = 0; c < cols; ++c)
          out.data[size_t(r * cols + c)] = a.data[size_t(r * cols + c)] + b.data[size_t(c)];
      break;
    }
    case Op::kSquare: {
      const auto& a = in_val(id, 0).data;
      for (size_t i = 0; i < a.size(); ++i) out.data[i] = a[i] * a[i];
      break;
    }
    case Op::kGelu: {
      const auto& a = in_val(id, 0).data;
      const S c0 = static_cast<S>(0.7978845608028654);  // sqrt(2/pi)
      const S c1 = static_cast<S>(0.044715);
      for (size_t i = 0; i < a.size(); ++i) {
        S x = a[i];
        S t = std::tanh(c0 * (x + c1 * x * x * x));
        out.data[i] = S(0.5) * x * (S(1) + t);
      }
      break;
    }
    case Op::kSoftmaxRows: {
      const Tensor<S>& a = in_val(id, 0);
      int64_t rows = a.rows(), cols = a.cols();
      for (int64_t r = 0; r < rows; ++r) {
        const S* x = a.data.data() + r * cols;
        S* y = out.data.data() + r * cols;
        S m = x[0];
        for (int64_t c = 1; c < cols; ++c) m = std::max(m, x[c]);
        S sum = 0;
        for (int64_t c = 0; c < cols; ++c) {
          y[c] = std::exp(x[c] - m);
          sum += y[c];
        }
        S inv = S(1) / sum;
        for (int64_t c = 0; c < cols; ++c) y[c] *= inv;
      }
      break;
    }
    case Op::kLayerNormRows: {
      const Tensor<S>&a = in_val(id, 0), &gain = in_val(id, 1), &bias = in_val(id, 2);
      int64_t rows = a.rows(), cols = a.cols();
      for (int64_t r = 0; r < rows; ++r) {
        const S* x = a.data.data() + r * cols;
        S* y = out.data.data() + r * cols;
        S mean = 0;
        for (int64_t c = 0; c < cols; ++c) mean += x[c];
        mean /= static_cast<S>(cols);
        S var = 0;
        for (int64_t c = 0; c < cols; ++c) var += (x[c] - mean) * (x[c] - mean);
        var /= static_cast<S>(cols);
        S inv = S(1) / std::sqrt(var + static_cast<S>(kLnEps));
        for (int64_t c = 0; c < cols; ++c)
          y[c] = (x[c] - mean) * inv * gain.data[size_t(c)] + bias.data[size_t(c)];
      }
      break;
    }
    case Op::kL2NormalizeRows: {
      const Tensor<S>& a = in_val(id, 0);
      int64_t rows = a.rows(), cols = a.cols();
      for (int64_t r = 0; r < rows; ++r) {
        const S* x = a.data.data() + r * cols;
        S* y = out.data.data() + r * cols;
        S sq = 0;
        for (int64_t c = 0; c < cols; ++c) sq += x[c] * x[c];
        S inv = S(1) / std::sqrt(sq + static_cast<S>(1e-12));
        for (int64_t c = 0; c < cols; ++c) y[c] = x[c] * inv;
      }
      break;
    }
    case Op::kSliceRows: {
      const Tensor<S>& a = in_val(id, 0);
      int64_t start = int64_t(nd.attr0), count = int64_t(nd.attr1), cols = a.cols();
      std::copy_n(a.data.data() + start * cols, count * cols, out.data.data());
      break;
    }
    case Op::kSliceCols: {
      const Tensor<S>& a = in_val(id, 0);
      int64_t start = int64_t(nd.attr0), count = int64_t(nd.attr1);
      int64_t rows = a.rows(), cols = a.cols();
      for (int64_t r = 0; r < rows; ++r)
        std::copy_n(a.data.data() + r * cols + start, count, out.data.data() + r * count);
      break;
    }
    case Op::kConcatRows: {
      S* dst = out.data.data();
      for (size_t k = 0; k < nd.in.size(); ++k) {
        const Tensor<S>& p = in_val(id, int(k));
        dst = std::copy(p.data.begin(), p.data.end(), dst);
      }
      break;
    }
    case Op::kConcatCols: {
      int64_t rows = out.rows(), cols = out.cols();
      int64_t off = 0;
      for (size_t k = 0; k < nd.in.size(); ++k) {
        const Tensor<S>& p = in_val(id, int(k));
        int64_t pc = p.cols();
        for (int64_t r = 0; r < rows; ++r)
          std::copy_n(p.data.data() + r * pc, pc, out.data.data() + r * cols + off);
        off += pc;
      }
      break;
    }
    case Op::kReshape: {
      out.data = in_val(id, 0).data;
      break;
    }
    case Op::kSumAll: {
      const auto& a = in_val(id, 0).data;
      S sum = 0;
      for (S v : a) sum += v;
      out.data[0] = sum;
      break;
    }
    case Op::kMeanAll: {
      const auto& a = in_val(id, 0).data;
      S sum = 0;
      for (S v : a) sum += v;
      out.data[0] = sum / static_cast<S>(a.size());
      break;
    }
    case Op::kMse: {
      const auto&a = in_val(id, 0).data, &b = in_val(id, 1).data;
      S sum = 0;
      for (size_t i = 0; i < a.size(); ++i) {
        S d = a[i] - b[i];
        sum += d * d;
      }
      out.data[0] = sum / static_cast<S>(a.size());
      break;
    }
    case Op::kCrossEntropy: {
      const Tensor<S>&logits = in_val(id, 0), &onehot = in_val(id, 1);
      int64_t rows = logits.rows(), cols = logits.cols();
      S total = 0;
      for (int64_t r = 0; r < rows; ++r) {
        const S* x = logits.data.data() + r * cols;
        const S* t = onehot.data.data() + r * cols;
        S m = x[0];
        for (int64_t c = 1; c < cols; ++c) m = std::max(m, x[c]);
        S sum = 0, dot = 0;
        for (int64_t c = 0; c < cols; ++c) {
          sum += std::exp(x[c] - m);
          dot += t[c] * x[c];
        }
        total += std::log(sum) + m - dot;
      }
      out.data[0] = total / static_cast<S>(rows);
      break;
    }
    case Op::kKlDiv: {
      // T^2-scaled KL(softmax(target/T) || softmax(predicted/T)), mean over rows.
      const Tensor<S>&tl = in_val(id, 0), &pl = in_val(id, 1);
      const S T = static_cast<S>(nd.attr0);
      int64_t rows = tl.rows(), cols = tl.cols();
      std::vector<S> lp(static_cast<size_t>(cols)), lq(static_cast<size_t>(cols));
      S total = 0;
      for (int64_t r = 0; r < rows; ++r) {
        const S* a = tl.data.data() + r * cols;
        const S* b = pl.data.data() + r * cols;
        auto log_softmax = [cols, T](const S* x, std::vector<S>& out_log) {
          S m = x[0];
          for (int64_t c = 1; c < cols; ++c) m = std::max(m, x[c]);
          S sum = 0;
          for (int64_t c = 0; c < cols; ++c) sum += std::exp((x[c] - m) / T);
          S lse = std::log(sum);
          for (int64_t c = 0; c < cols; ++c) out_log[size_t(c)] = (x[c] - m) / T - lse;
        };
        log_softmax(a, lp);
        log_softmax(b, lq);
        S row = 0;
        for (int64_t c = 0; c < cols; ++c)
          row += std::exp(lp[size_t(c)]) * (lp[size_t(c)] - lq[size_t(c)]);
        total += row;
      }
      out.data[0] = T * T * total / static_cast<S>(rows);
      break;
    }
    default:
      throw std::logic_error("compute: unexpected op");
  }
}

template <typename S>
void Evaluation<S>::backward() {
  int n = g_->size();
  if (g_->loss_id() < 0) throw std::logic_error("evaluation: graph has no loss node");
  if (grads_.empty()) {
    grads_.resize(static_cast<size_t>(n));
    for (int id = 0; id < n; ++id) grads_[static_cast<size_t>(id)] = Tensor<S>(g_->node(id).shape);
  } else {
    for (auto& g : grads_) std::fill(g.data.begin(), g.data.end(), S(0));
  }
  grads_[static_cast<size_t>(g_->loss_id())].data[0] = S(1);
  for (int id = g_->loss_id(); id >= 0; --id) {
    const Node& nd = g_->node(id);
    if (nd.op == Op::kInput || nd.op == Op::kParam || nd.op == Op::kConst) continue;
    propagate(id);
  }
  for (int id = g_->loss_id(); id >= 0; --id)
    check_finite(id, grads_[static_cast<size_t>(id)], "gradient");
  has_grads_ = true;
}

template <typename S>
void Evaluation<S>::propagate(int id) {
  const Node& nd = g_->node(id);
  const Tensor<S>& go = grads_[static_cast<size_t>(id)];
  auto gin = [&](int slot) -> Tensor<S>& {
    return grads_[static_cast<size_t>(nd.in[static_cast<size_t>(slot)])];
  };
  switch (nd.op) {
    case Op::kMatmul: {
      const Tensor<S>&a = in_val(id, 0), &b = in_val(id, 1);
      as_mat(gin(0)).noalias() += as_mat(go) * as_mat(b).transpose();
      as_mat(gin(1)).noalias() += as_mat(a).transpose() * as_mat(go);
      break;
    }
    case Op::kTranspose: {
      as_mat(gin(0)) += as_mat(go).transpose();
      break;
    }
    case Op::kAdd: {
      for (size_t i = 0; i < go.data.size(); ++i) {
        gin(0).data[i] += go.data[i];
        gin(1).data[i] += go.data[i];
      }
      break;
    }
    case Op::kSub: {
      for (size_t i = 0; i < go.data.size(); ++i) {
        gin(0).data[i] += go.data[i];
        gin(1).data[i] -= go.data[i];
      }
      break;
    }
    case Op::kMul: {
      const auto&a = in_val(id, 0).data, &b = in_val(id, 1).data;
      for (size_t i = 0; i < go.data.size(); ++i) {
        gin(0).data[i] += go.data[i] * b[i];
        gin(1).data[i] += go.data[i] * a[i];
      }
      break;
    }
    case Op::kScale: {
      const S c = static_cast<S>(nd.attr0);
      for (size_t i = 0; i < go.data.size(); ++i) gin(0).data[i] += go.data[i] * c;
      break;
    }
    case Op::kAddRowBias: {
      int64_t rows = go.rows(), cols = go.cols();
      for (int64_t r = 0; r < rows; ++r)
        for (int64_t c = 0; c < cols; ++c) {
          gin(0).data[size_t(r * cols + c)] += go.data[size_t(r * cols + c)];
          gin(1).data[size_t(c)] += go.data[size_t(r * cols + c)];
        }
      break;
    }
    case Op::kSquare: {
      const auto& a = in_val(id, 0).data;
      for (size_t i = 0; i < go.data.size(); ++i) gin(0).data[i] += go.data[i] * S(2) * a[i];
      break;
    }
    case Op::kGelu: {
      const auto& a = in_val(id, 0).data;
      const S c0 = static_cast<S>(0.7978845608028654);
      const S c1 = static_cast<S>(0.044715);
      for (size_t i = 0; i < go.data.size(); ++i) {
        S x = a[i];
        S t = std::tanh(c0 * (x + c1 * x * x * x));
        S d = S(0.5) * (S(1) + t) + S(0.5) * x * (S(1) - t * t) * c0 * (S(1) + S(3) * c1 * x * x);
        gin(0).data[i] += go.data[i] * d;
      }
      break;
    }
    case Op::kSoftmaxRows: {
      const Tensor<S>& y = vals_[static_cast<size_t>(id)];
      int64_t rows = y.rows(), cols = y.cols();
      for (int64_t r = 0; r < rows; ++r) {
        const S* yr = y.data.data() + r * cols;
        const S* gr = go.data.data() + r * cols;
        S dot = 0;
        for (int64_t c = 0; c < cols; ++c) dot += yr[c] * gr[c];
        S* out = gin(0).data.data() + r * cols;
        for (int64_t c = 0; c < cols; ++c) out[c] += (gr[c] - dot) * yr[c];
      }
      break;
    }
    case Op::kLayerNormRows: {
      const Tensor<S>&a = in_val(id, 0), &gain = in_val(id, 1);
      int64_t rows = a.rows(), cols = a.cols();
      for (int64_t r = 0; r < rows; ++r) {
        const S* x = a.data.data() + r * cols;
        const S* gr = go.data.data() + r * cols;
        S mean = 0;
        for (int64_t c = 0; c < cols; ++c) mean += x[c];
        mean /= static_cast<S>(cols);
        S var = 0;
        for (int64_t c = 0; c < cols; ++c) var += (x[c] - mean) * (x[c] - mean);
        var /= static_cast<S>(cols);
        S inv = S(1) / std::sqrt(var + static_cast<S>(kLnEps));
        // dxh = dy * gain; dx = inv * (dxh - mean(dxh) - xh * mean(dxh * xh))
        S mean_dxh = 0, mean_dxh_xh = 0;
        for (int64_t c = 0; c < cols; ++c) {
          S xh = (x[c] - mean) * inv;
          S dxh = gr[c] * gain.data[size_t(c)];
          mean_dxh += dxh;
          mean_dxh_xh += dxh * xh;
          gin(1).data[size_t(c)] += gr[c] * xh;
          gin(2).data[size_t(c)] += gr[c];
        }
        mean_dxh /= static_cast<S>(cols);
        mean_dxh_xh /= static_cast<S>(cols);
        S* out = gin(0).data.data() + r * cols;
        for (int64_t c = 0; c < cols; ++c) {
          S xh = (x[c] - mean) * inv;
          S dxh = gr[c] * gain.data[size_t(c)];
          out[c] += inv * (dxh - mean_dxh - xh * mean_dxh_xh);
        }
      }
      break;
    }
    case Op::kL2NormalizeRows: {
      const Tensor<S>& a = in_val(id, 0);
      int64_t rows = a.rows(), cols = a.cols();
      for (int64_t r = 0; r < rows; ++r) {
        const S* x = a.data.data() + r * cols;
        const S* gr = go.data.data() + r * cols;
        S sq = 0, dot = 0;
        for (int64_t c = 0; c < cols; ++c) {
          sq += x[c] * x[c];
          dot += gr[c] * x[c];
        }
        S n2 = sq + static_cast<S>(1e-12);
        S inv = S(1) / std::sqrt(n2);
        S* out = gin(0).data.data() + r * cols;
        for (int64_t c = 0; c < cols; ++c) out[c] += gr[c] * inv - x[c] * dot * inv / n2;
      }
      break;
    }
    case Op::kSliceRows: {
      int64_t start = int64_t(nd.attr0), count = int64_t(nd.attr1), cols = go.cols();
      for (int64_t r = 0; r < count; ++r)
        for (int64_t c = 0; c < cols; ++c)
          gin(0).data[size_t((start + r) * cols + c)] += go.data[size_t(r * cols + c)];
      break;
    }
    case Op::kSliceCols: {
      const Tensor<S>& a = in_val(id, 0);
      int64_t start = int64_t(nd.attr0), count = int64_t(nd.attr1);
      int64_t rows = a.rows(), cols = a.cols();
      for (int64_t r = 0; r < rows; ++r)
        for (int64_t c = 0; c < count; ++c)
          gin(0).data[size_t(r * cols + start + c)] += go.data[size_t(r * count + c)];
      break;
    }
    case Op::kConcatRows: {
      int64_t off = 0;
      for (size_t k = 0; k < nd.in.size(); ++k) {
        Tensor<S>& gi = gin(int(k));
        for (size_t i = 0; i < gi.data.size(); ++i) gi.data[i] += go.data[size_t(off) + i];
        off += static_cast<int64_t>(gi.data.size());
      }
      break;
    }
    case Op::kConcatCols: {
      int64_t rows = go.rows(), cols = go.cols();
      int64_t off = 0;
      for (size_t k = 0; k < nd.in.size(); ++k) {
        Tensor<S>& gi = gin(int(k));
        int64_t pc = gi.cols();
        for (int64_t r = 0; r < rows; ++r)
          for (int64_t c = 0; c < pc; ++c)
            gi.data[size_t(r * pc + c)] += go.data[size_t(r * cols + off + c)];
        off += pc;
      }
      break;
    }
    case Op::kReshape: {
      for (size_t i = 0; i < go.data.size(); ++i) gin(0).data[i] += go.data[i];
      break;
    }
    case Op::kSumAll: {
      const S g = go.data[0];
      for (auto& v : gin(0).data) v += g;
      break;
    }
    case Op::kMeanAll: {
      const S g = go.data[0] / static_cast<S>(gin(0).data.size());
      for (auto& v : gin(0).data) v += g;
      break;
    }
    case Op::kMse: {
      const auto&a = in_val(id, 0).data, &b = in_val(id, 1).data;
      const S g = go.data[0] * S(2) / static_cast<S>(a.size());
      for (size_t i = 0; i < a.size(); ++i) {
        S d = (a[i] - b[i]) * g;
        gin(0).data[i] += d;
        gin(1).data[i] -= d;
      }
      break;
    }
    case Op::kCrossEntropy: {
      const Tensor<S>&logits = in_val(id, 0), &onehot = in_val(id, 1);
      int64_t rows = logits.rows(), cols = logits.cols();
      const S g = go.data[0] / static_cast<S>(rows);
      for (int64_t r = 0; r < rows; ++r) {
        const S* x = logits.data.data() + r * cols;
        const S* t = onehot.data.data() + r * cols;
        S m = x[0];
        for (int64_t c = 1; c < cols; ++c) m = std::max(m, x[c]);
        S sum = 0;
        for (int64_t c = 0; c < cols; ++c) sum += std::exp(x[c] - m);
        for (int64_t c = 0; c < cols; ++c) {
          S p = std::exp(x[c] - m) / sum;
          gin(0).data[size_t(r * cols + c)] += g * (p - t[c]);
          gin(1).data[size_t(r * cols + c)] -= g * x[c];
        }
      }
      break;
    }
    case Op::kKlDiv: {
      const Tensor<S>&tl = in_val(id, 0), &pl = in_val(id, 1);
      const S T = static_cast<S>(nd.attr0);
      int64_t rows = tl.rows(), cols = tl.cols();
      const S g = go.data[0] * T * T / static_cast<S>(rows);
      std::vector<S> lp(static_cast<size_t>(cols)), lq(static_cast<size_t>(cols));
      for (int64_t r = 0; r < rows; ++r) {
        const S* a = tl.data.data() + r * cols;
        const S* b = pl.data.data() + r * cols;
        auto log_softmax = [cols, T](const S* x, std::vector<S>& out_log) {
          S m = x[0];
          for (int64_t c = 1; c < cols; ++c) m = std::max(m, x[c]);
          S sum = 0;
          for (int64_t c = 0; c < cols; ++c) sum += std::exp((x[c] - m) / T);
          S lse = std::log(sum);
          for (int64_t c = 0; c < cols; ++c) out_log[size_t(c)] = (x[c] - m) / T - lse;
        };
        log_softmax(a, lp);
        log_softmax(b, lq);
        S kl = 0;
        for (int64_t c = 0; c < cols; ++c)
          kl += std::exp(lp[size_t(c)]) * (lp[size_t(c)] - lq[size_t(c)]);
        for (int64_t c = 0; c < cols; ++c) {
          S p = std::exp(lp[size_t(c)]);
          S q = std::exp(lq[size_t(c)]);
          gin(1).data[size_t(r * cols + c)] += g * (q - p) / T;
          gin(0).data[size_t(r * cols + c)] +=
              g * p * ((lp[size_t(c)] - lq[size_t(c)]) - kl) / T;
        }
      }
      break;
    }
    default:
      throw std::logic_error("propagate: unexpected op");
  }
}

template <typename S>
ParamMap<S> Evaluation<S>::param_grads() const {
  ParamMap<S> out;
  for (const auto& [name, id] : g_->param_nodes()) out[name] = grad(id);
  return out;
}

template <typename S>
void Evaluation<S>::accumulate_param_grads(ParamMap<S>& acc, S scale) const {
  for (const auto& [name, id] : g_->param_nodes()) {
    auto it = acc.find(name);
    if (it == acc.end()) throw std::invalid_argument("accumulate: missing slot '" + name + "'");
    const Tensor<S>& g = grad(id);
    for (size_t i = 0; i < g.data.size(); ++i) it->second.data[i] += scale * g.data[i];
  }
}

// ---------------------------------------------------------------------------

template <typename S>
std::pair<double, ParamMap<S>> value_and_grad(const Graph<S>& comp, const ParamMap<S>& params,
                                              const std::map<std::string, Tensor<S>>& inputs) {
  Evaluation<S> ev(comp);
  ev.bind_params(&params);
  for (const auto& [name, t] : inputs) ev.bind_input(name, &t);
  ev.forward();
  ev.backward();
  return {ev.loss(), ev.param_grads()};
}

template <typename S>
ParamMap<S> finite_diff_grad(const Graph<S>& comp, const ParamMap<S>& params, double step,
                             const std::map<std::string, Tensor<S>>& inputs) {
  if (!(step > 0)) throw std::invalid_argument("finite_diff_grad: step must be > 0");
  ParamMap<S> work = params;
  Evaluation<S> ev(comp);
  ev.bind_params(&work);
  for (const auto& [name, t] : inputs) ev.bind_input(name, &t);
  ParamMap<S> grads;
  for (auto& [name, t] : work) {
    Tensor<S> g(t.shape);
    for (size_t i = 0; i < t.data.size(); ++i) {
      const S saved = t.data[i];
      t.data[i] = saved + static_cast<S>(step);
      ev.forward();
      double up = ev.loss();
      t.data[i] = saved - static_cast<S>(step);
      ev.forward();
      double down = ev.loss();
      t.data[i] = saved;
      g.data[i] = static_cast<S>((up - down) / (2.0 * step));
    }
    grads[name] = std::move(g);
  }
  return grads;
}

template class Graph<float>;
template class Graph<double>;
template class Evaluation<float>;
template class Evaluation<double>;
template std::pair<double, ParamMap<float>> value_and_grad(const Graph<float>&,
                                                           const ParamMap<float>&,
                                                           const std::map<std::string, Tensor<float>>&);
template std::pair<double, ParamMap<double>> value_and_grad(
    const Graph<double>&, const ParamMap<double>&, const std::map<std::string, Tensor<double>>&);
template ParamMap<float> finite_diff_grad(const Graph<float>&, const ParamMap<float>&, double,
                                          const std::map<std::string, Tensor<float>>&);
template ParamMap<double> finite_diff_grad(const Graph<double>&, const ParamMap<double>&, double,
                                           const std::map<std::string, Tensor<double>>&);

}  // namespace cfft
