#pragma once

#include <array>
#include <cstdint>
#include <functional>
#include <memory>
#include <string>
#include <vector>

namespace mwds {

// Dense row-major tensor. Copies share the underlying buffer; operations
// never mutate their inputs, so shared buffers behave as immutable values.
template <typename S>
class Tensor {
 public:
  Tensor() : data_(std::make_shared<std::vector<S>>()) {}

  explicit Tensor(std::vector<int> shape, S fill = S(0));
  Tensor(std::vector<int> shape, std::vector<S> values);

  static Tensor scalar(S v) { return Tensor({1, 1}, std::vector<S>{v}); }
  static Tensor row(std::vector<S> v);

  const std::vector<int>& shape() const { return shape_; }
  int rows() const { return shape_.empty() ? 0 : shape_[0]; }
  int cols() const { return shape_.size() < 2 ? (shape_.empty() ? 0 : 1) : shape_[1]; }
  int64_t numel() const { return static_cast<int64_t>(data_->size()); }
  bool empty() const { return data_->empty(); }

  S* data() { return data_->data(); }
  const S* data() const { return data_->data(); }
  S& operator[](int64_t i) { return (*data_)[static_cast<size_t>(i)]; }
  S operator[](int64_t i) const { return (*data_)[static_cast<size_t>(i)]; }
  S& at(int r, int c) { return (*data_)[static_cast<size_t>(r) * cols() + c]; }
  S at(int r, int c) const { return (*data_)[static_cast<size_t>(r) * cols() + c]; }

  // Value of a single-element tensor.
  S item() const;

  bool all_finite() const;
  std::string shape_str() const;

  Tensor clone() const { return Tensor(shape_, *data_); }

  bool requires_grad = false;

 private:
  std::vector<int> shape_;
  std::shared_ptr<std::vector<S>> data_;
};

enum class OpKind : uint8_t {
  kLeaf,
  kMatMul,
  kMatMulNT,
  kAdd,
  kSub,
  kMul,
  kScale,
  kAddBias,
  kGelu,
  kLayerNorm,
  kSoftmaxRows,
  kLogSoftmaxRows,
  kEmbedRows,
  kTakeRows,
  kSliceCols,
  kConcatCols,
  kGatherElems,
  kStackScalars,
  kSum,
  kMean,
};

// Reverse-mode tape. Nodes are appended in topological order (inputs always
// precede consumers); backward() sweeps the node list once, in reverse.
// Single-owner: a tape must not be shared across threads.
template <typename S>
class Tape {
 public:
  struct Node {
    OpKind kind = OpKind::kLeaf;
    std::array<int, 3> in{{-1, -1, -1}};
    std::vector<int> aux_in;  // variadic inputs (stack / concat)
    std::vector<int> idx;     // embedding ids, row picks, gather pairs, slice bounds
    S a0 = S(0);              // scale factor or layer-norm epsilon
    Tensor<S> value;
    Tensor<S> grad;  // allocated on first touch during backward
    bool needs_grad = false;
  };

  // Registers a leaf carrying an existing value; gradient is tracked when
  // t.requires_grad is set.
  int leaf(const Tensor<S>& t);
  // Leaf with gradient tracking disabled regardless of the tensor flag.
  int constant(Tensor<S> t);
  int constant_row(std::vector<S> v) { return constant(Tensor<S>::row(std::move(v))); }
  int constant_scalar(S v) { return constant(Tensor<S>::scalar(v)); }

  int matmul(int a, int b);
  int matmul_nt(int a, int b);  // a * b^T
  int add(int a, int b);
  int sub(int a, int b);
  int mul(int a, int b);
  int scale(int a, S c);
  int add_bias(int x, int bias);  // bias [1 x C] broadcast over rows
  int gelu(int x);
  int layer_norm(int x, int gain, int bias, S eps);
  int softmax_rows(int x);
  int log_softmax_rows(int x);
  int embed_rows(int table, const std::vector<int>& ids);
  int take_rows(int x, const std::vector<int>& rows);
  int take_row(int x, int r) { return take_rows(x, {r}); }
  int slice_cols(int x, int c0, int c1);
  int concat_cols(const std::vector<int>& xs);
  // Picks x[r_i, c_i] into a [1 x k] row; pairs flattened (r0,c0,r1,c1,...).
  int gather_elems(int x, const std::vector<int>& pairs);
  int stack_scalars(const std::vector<int>& xs);
  int sum(int x);
  int mean(int x);

  void backward(int node);

  const Tensor<S>& value(int id) const { return nodes_[static_cast<size_t>(id)].value; }
  S scalar_value(int id) const { return nodes_[static_cast<size_t>(id)].value.item(); }
  // Accumulated gradient; zeros if the node was never reached.
  Tensor<S> grad(int id) const;

  size_t size() const { return nodes_.size(); }
  bool needs_grad(int id) const { return nodes_[static_cast<size_t>(id)].needs_grad; }

 private:
  int push(Node n);
  Tensor<S>& grad_buffer(int id);
  void backprop_node(int id);

  std::vector<Node> nodes_;
};

// Max relative error between analytic gradients of `build` and central finite
// differences, probed coordinate-wise over every tensor in `leaves`.
// `build` receives a fresh tape plus the leaf node ids (in `leaves` order) and
// returns the scalar loss node. Throws if the function is non-finite at any
// probe point.
template <typename S>
S grad_check(const std::vector<Tensor<S>*>& leaves,
             const std::function<int(Tape<S>&, const std::vector<int>&)>& build,
             S epsilon);

// Single-point convenience overload matching f(point) -> scalar.
template <typename S>
S grad_check(Tensor<S>& point,
             const std::function<int(Tape<S>&, int)>& build, S epsilon);

using TensorF = Tensor<float>;
using TensorD = Tensor<double>;
using TapeF = Tape<float>;
using TapeD = Tape<double>;

}  // namespace mwds
