#include "mwds/tensor.hpp"

#include <cmath>
#include <cstring>
#include <sstream>
#include <stdexcept>

namespace mwds {

namespace {

template <typename S>
int64_t shape_numel(const std::vector<int>& shape) {
  int64_t n = 1;
  for (int d : shape) {
    if (d <= 0) throw std::invalid_argument("tensor shape entries must be positive");
    n *= d;
  }
  return shape.empty() ? 0 : n;
}

std::string shape_to_str(const std::vector<int>& shape) {
  std::ostringstream os;
  os << "[";
  for (size_t i = 0; i < shape.size(); ++i) {
    if (i) os << "x";
    os << shape[i];
  }
  os << "]";
  return os.str();
}

template <typename S>
void require_2d(const Tensor<S>& t, const char* op) {
  if (t.shape().size() != 2) {
    throw std::invalid_argument(std::string(op) + ": expected 2-D tensor, got " + t.shape_str());
  }
}

template <typename S>
void require_same_shape(const Tensor<S>& a, const Tensor<S>& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw std::invalid_argument(std::string(op) + ": shape mismatch " + a.shape_str() + " vs " +
                                b.shape_str());
  }
}

constexpr double kGeluC = 0.7978845608028654;  // sqrt(2/pi)
constexpr double kGeluA = 0.044715;

}  // namespace

template <typename S>
Tensor<S>::Tensor(std::vector<int> shape, S fill)
    : shape_(std::move(shape)),
      data_(std::make_shared<std::vector<S>>(static_cast<size_t>(shape_numel<S>(shape_)), fill)) {}

template <typename S>
Tensor<S>::Tensor(std::vector<int> shape, std::vector<S> values) : shape_(std::move(shape)) {
  if (shape_numel<S>(shape_) != static_cast<int64_t>(values.size())) {
    throw std::invalid_argument("tensor data length " + std::to_string(values.size()) +
                                " does not match shape " + shape_to_str(shape_));
  }
  data_ = std::make_shared<std::vector<S>>(std::move(values));
}

template <typename S>
Tensor<S> Tensor<S>::row(std::vector<S> v) {
  const int n = static_cast<int>(v.size());
  return Tensor({1, n}, std::move(v));
}

template <typename S>
S Tensor<S>::item() const {
  if (numel() != 1) {
    throw std::invalid_argument("item(): tensor " + shape_str() + " is not a scalar");
  }
  return (*data_)[0];
}

template <typename S>
bool Tensor<S>::all_finite() const {
  for (S v : *data_) {
    if (!std::isfinite(static_cast<double>(v))) return false;
  }
  return true;
}

template <typename S>
std::string Tensor<S>::shape_str() const {
  return shape_to_str(shape_);
}

// ---------------------------------------------------------------------------
// Tape
// ---------------------------------------------------------------------------

template <typename S>
int Tape<S>::push(Node n) {
  nodes_.push_back(std::move(n));
  return static_cast<int>(nodes_.size()) - 1;
}

template <typename S>
int Tape<S>::leaf(const Tensor<S>& t) {
  Node n;
  n.kind = OpKind::kLeaf;
  n.value = t;
  n.needs_grad = t.requires_grad;
  return push(std::move(n));
}

template <typename S>
int Tape<S>::constant(Tensor<S> t) {
  Node n;
  n.kind = OpKind::kLeaf;
  n.value = std::move(t);
  n.needs_grad = false;
  return push(std::move(n));
}

template <typename S>
int Tape<S>::matmul(int a, int b) {
  const Tensor<S>& ta = value(a);
  const Tensor<S>& tb = value(b);
  require_2d(ta, "matmul");
  require_2d(tb, "matmul");
  if (ta.cols() != tb.rows()) {
    throw std::invalid_argument("matmul: inner dimensions disagree: " + ta.shape_str() + " vs " +
                                tb.shape_str());
  }
  const int m = ta.rows(), k = ta.cols(), n = tb.cols();
  Tensor<S> out({m, n});
  const S* A = ta.data();
  const S* B = tb.data();
  S* C = out.data();
  for (int i = 0; i < m; ++i) {
    S* ci = C + static_cast<size_t>(i) * n;
    const S* ai = A + static_cast<size_t>(i) * k;
    for (int p = 0; p < k; ++p) {
      const S av = ai[p];
      const S* bp = B + static_cast<size_t>(p) * n;
      for (int j = 0; j < n; ++j) ci[j] += av * bp[j];
    }
  }
  Node node;
  node.kind = OpKind::kMatMul;
  node.in = {a, b, -1};
  node.value = std::move(out);
  node.needs_grad = needs_grad(a) || needs_grad(b);
  return push(std::move(node));
}

template <typename S>
int Tape<S>::matmul_nt(int a, int b) {
  const Tensor<S>& ta = value(a);
  const Tensor<S>& tb = value(b);
  require_2d(ta, "matmul_nt");
  require_2d(tb, "matmul_nt");
  if (ta.cols() != tb.cols()) {
    throw std::invalid_argument("matmul_nt: inner dimensions disagree: " + ta.shape_str() +
                                " vs " + tb.shape_str() + "^T");
  }
  const int m = ta.rows(), k = ta.cols(), n = tb.rows();
  Tensor<S> out({m, n});
  const S* A = ta.data();
  const S* B = tb.data();
  S* C = out.data();
  for (int i = 0; i < m; ++i) {
    const S* ai = A + static_cast<size_t>(i) * k;
    S* ci = C + static_cast<size_t>(i) * n;
    for (int j = 0; j < n; ++j) {
      const S* bj = B + static_cast<size_t>(j) * k;
      S acc = S(0);
      for (int p = 0; p < k; ++p) acc += ai[p] * bj[p];
      ci[j] = acc;
    }
  }
  Node node;
  node.kind = OpKind::kMatMulNT;
  node.in = {a, b, -1};
  node.value = std::move(out);
  node.needs_grad = needs_grad(a) || needs_grad(b);
  return push(std::move(node));
}

template <typename S>
int Tape<S>::add(int a, int b) {
  const Tensor<S>& ta = value(a);
  const Tensor<S>& tb = value(b);
  require_same_shape(ta, tb, "add");
  Tensor<S> out(ta.shape());
  const int64_t n = ta.numel();
  for (int64_t i = 0; i < n; ++i) out[i] = ta[i] + tb[i];
  Node node;
  node.kind = OpKind::kAdd;
  node.in = {a, b, -1};
  node.value = std::move(out);
  node.needs_grad = needs_grad(a) || needs_grad(b);
  return push(std::move(node));
}

template <typename S>
int Tape<S>::sub(int a, int b) {
  const Tensor<S>& ta = value(a);
  const Tensor<S>& tb = value(b);
  require_same_shape(ta, tb, "sub");
  Tensor<S> out(ta.shape());
  const int64_t n = ta.numel();
  for (int64_t i = 0; i < n; ++i) out[i] = ta[i] - tb[i];
  Node node;
  node.kind = OpKind::kSub;
  node.in = {a, b, -1};
  node.value = std::move(out);
  node.needs_grad = needs_grad(a) || needs_grad(b);
  return push(std::move(node));
}

template <typename S>
int Tape<S>::mul(int a, int b) {
  const Tensor<S>& ta = value(a);
  const Tensor<S>& tb = value(b);
  require_same_shape(ta, tb, "mul");
  Tensor<S> out(ta.shape());
  const int64_t n = ta.numel();
  for (int64_t i = 0; i < n; ++i) out[i] = ta[i] * tb[i];
  Node node;
  node.kind = OpKind::kMul;
  node.in = {a, b, -1};
  node.value = std::move(out);
  node.needs_grad = needs_grad(a) || needs_grad(b);
  return push(std::move(node));
}

template <typename S>
int Tape<S>::scale(int a, S c) {
  const Tensor<S>& ta = value(a);
  Tensor<S> out(ta.shape());
  const int64_t n = ta.numel();
  for (int64_t i = 0; i < n; ++i) out[i] = ta[i] * c;
  Node node;
  node.kind = OpKind::kScale;
  node.in = {a, -1, -1};
  node.a0 = c;
  node.value = std::move(out);
  node.needs_grad = needs_grad(a);
  return push(std::move(node));
}

template <typename S>
int Tape<S>::add_bias(int x, int bias) {
  const Tensor<S>& tx = value(x);
  const Tensor<S>& tb = value(bias);
  require_2d(tx, "add_bias");
  if (tb.rows() != 1 || tb.cols() != tx.cols()) {
    throw std::invalid_argument("add_bias: bias " + tb.shape_str() + " does not broadcast over " +
                                tx.shape_str());
  }
  Tensor<S> out(tx.shape());
  const int r = tx.rows(), c = tx.cols();
  for (int i = 0; i < r; ++i) {
    for (int j = 0; j < c; ++j) out.at(i, j) = tx.at(i, j) + tb[j];
  }
  Node node;
  node.kind = OpKind::kAddBias;
  node.in = {x, bias, -1};
  node.value = std::move(out);
  node.needs_grad = needs_grad(x) || needs_grad(bias);
  return push(std::move(node));
}

template <typename S>
int Tape<S>::gelu(int x) {
  const Tensor<S>& tx = value(x);
  Tensor<S> out(tx.shape());
  const int64_t n = tx.numel();
  for (int64_t i = 0; i < n; ++i) {
    const double v = static_cast<double>(tx[i]);
    const double u = kGeluC * (v + kGeluA * v * v * v);
    out[i] = static_cast<S>(0.5 * v * (1.0 + std::tanh(u)));
  }
  Node node;
  node.kind = OpKind::kGelu;
  node.in = {x, -1, -1};
  node.value = std::move(out);
  node.needs_grad = needs_grad(x);
  return push(std::move(node));
}

template <typename S>
int Tape<S>::layer_norm(int x, int gain, int bias, S eps) {
  const Tensor<S>& tx = value(x);
  const Tensor<S>& tg = value(gain);
  const Tensor<S>& tb = value(bias);
  require_2d(tx, "layer_norm");
  if (eps <= S(0)) throw std::invalid_argument("layer_norm: eps must be positive");
  const int r = tx.rows(), c = tx.cols();
  if (tg.rows() != 1 || tg.cols() != c || tb.rows() != 1 || tb.cols() != c) {
    throw std::invalid_argument("layer_norm: gain/bias must be [1x" + std::to_string(c) +
                                "], got " + tg.shape_str() + " and " + tb.shape_str());
  }
  Tensor<S> out(tx.shape());
  for (int i = 0; i < r; ++i) {
    S mu = S(0);
    for (int j = 0; j < c; ++j) mu += tx.at(i, j);
    mu /= static_cast<S>(c);
    S var = S(0);
    for (int j = 0; j < c; ++j) {
      const S d = tx.at(i, j) - mu;
      var += d * d;
    }
    var /= static_cast<S>(c);
    const S inv = S(1) / std::sqrt(var + eps);
    for (int j = 0; j < c; ++j) {
      out.at(i, j) = (tx.at(i, j) - mu) * inv * tg[j] + tb[j];
    }
  }
  Node node;
  node.kind = OpKind::kLayerNorm;
  node.in = {x, gain, bias};
  node.a0 = eps;
  node.value = std::move(out);
  node.needs_grad = needs_grad(x) || needs_grad(gain) || needs_grad(bias);
  return push(std::move(node));
}

template <typename S>
int Tape<S>::softmax_rows(int x) {
  const Tensor<S>& tx = value(x);
  require_2d(tx, "softmax_rows");
  const int r = tx.rows(), c = tx.cols();
  Tensor<S> out(tx.shape());
  for (int i = 0; i < r; ++i) {
    S mx = tx.at(i, 0);
    for (int j = 1; j < c; ++j) mx = std::max(mx, tx.at(i, j));
    S denom = S(0);
    for (int j = 0; j < c; ++j) {
      const S e = std::exp(tx.at(i, j) - mx);
      out.at(i, j) = e;
      denom += e;
    }
    for (int j = 0; j < c; ++j) out.at(i, j) /= denom;
  }
  Node node;
  node.kind = OpKind::kSoftmaxRows;
  node.in = {x, -1, -1};
  node.value = std::move(out);
  node.needs_grad = needs_grad(x);
  return push(std::move(node));
}

template <typename S>
int Tape<S>::log_softmax_rows(int x) {
  const Tensor<S>& tx = value(x);
  require_2d(tx, "log_softmax_rows");
  const int r = tx.rows(), c = tx.cols();
  Tensor<S> out(tx.shape());
  for (int i = 0; i < r; ++i) {
    S mx = tx.at(i, 0);
    for (int j = 1; j < c; ++j) mx = std::max(mx, tx.at(i, j));
    S denom = S(0);
    for (int j = 0; j < c; ++j) denom += std::exp(tx.at(i, j) - mx);
    const S lse = mx + std::log(denom);
    for (int j = 0; j < c; ++j) out.at(i, j) = tx.at(i, j) - lse;
  }
  Node node;
  node.kind = OpKind::kLogSoftmaxRows;
  node.in = {x, -1, -1};
  node.value = std::move(out);
  node.needs_grad = needs_grad(x);
  return push(std::move(node));
}

template <typename S>
int Tape<S>::embed_rows(int table, const std::vector<int>& ids) {
  const Tensor<S>& tt = value(table);
  require_2d(tt, "embed_rows");
  const int d = tt.cols();
  Tensor<S> out({static_cast<int>(ids.size()), d});
  for (size_t i = 0; i < ids.size(); ++i) {
    const int r = ids[i];
    if (r < 0 || r >= tt.rows()) {
      throw std::invalid_argument("embed_rows: id " + std::to_string(r) + " out of range for " +
                                  tt.shape_str());
    }
    std::memcpy(out.data() + i * static_cast<size_t>(d), tt.data() + static_cast<size_t>(r) * d,
                sizeof(S) * static_cast<size_t>(d));
  }
  Node node;
  node.kind = OpKind::kEmbedRows;
  node.in = {table, -1, -1};
  node.idx = ids;
  node.value = std::move(out);
  node.needs_grad = needs_grad(table);
  return push(std::move(node));
}

template <typename S>
int Tape<S>::take_rows(int x, const std::vector<int>& rows) {
  const Tensor<S>& tx = value(x);
  require_2d(tx, "take_rows");
  const int d = tx.cols();
  Tensor<S> out({static_cast<int>(rows.size()), d});
  for (size_t i = 0; i < rows.size(); ++i) {
    const int r = rows[i];
    if (r < 0 || r >= tx.rows()) {
      throw std::invalid_argument("take_rows: row " + std::to_string(r) + " out of range for " +
                                  tx.shape_str());
    }
    std::memcpy(out.data() + i * static_cast<size_t>(d), tx.data() + static_cast<size_t>(r) * d,
                sizeof(S) * static_cast<size_t>(d));
  }
  Node node;
  node.kind = OpKind::kTakeRows;
  node.in = {x, -1, -1};
  node.idx = rows;
  node.value = std::move(out);
  node.needs_grad = needs_grad(x);
  return push(std::move(node));
}

template <typename S>
int Tape<S>::slice_cols(int x, int c0, int c1) {
  const Tensor<S>& tx = value(x);
  require_2d(tx, "slice_cols");
  if (c0 < 0 || c1 <= c0 || c1 > tx.cols()) {
    throw std::invalid_argument("slice_cols: invalid range [" + std::to_string(c0) + ", " +
                                std::to_string(c1) + ") for " + tx.shape_str());
  }
  const int r = tx.rows(), w = c1 - c0;
  Tensor<S> out({r, w});
  for (int i = 0; i < r; ++i) {
    std::memcpy(out.data() + static_cast<size_t>(i) * w,
                tx.data() + static_cast<size_t>(i) * tx.cols() + c0,
                sizeof(S) * static_cast<size_t>(w));
  }
  Node node;
  node.kind = OpKind::kSliceCols;
  node.in = {x, -1, -1};
  node.idx = {c0, c1};
  node.value = std::move(out);
  node.needs_grad = needs_grad(x);
  return push(std::move(node));
}

template <typename S>
int Tape<S>::concat_cols(const std::vector<int>& xs) {
  if (xs.empty()) throw std::invalid_argument("concat_cols: no inputs");
  const int r = value(xs[0]).rows();
  int total = 0;
  bool ng = false;
  for (int id : xs) {
    const Tensor<S>& t = value(id);
    require_2d(t, "concat_cols");
    if (t.rows() != r) {
      throw std::invalid_argument("concat_cols: row mismatch " + t.shape_str() + " vs " +
                                  value(xs[0]).shape_str());
    }
    total += t.cols();
    ng = ng || needs_grad(id);
  }
  Tensor<S> out({r, total});
  int off = 0;
  for (int id : xs) {
    const Tensor<S>& t = value(id);
    for (int i = 0; i < r; ++i) {
      std::memcpy(out.data() + static_cast<size_t>(i) * total + off,
                  t.data() + static_cast<size_t>(i) * t.cols(),
                  sizeof(S) * static_cast<size_t>(t.cols()));
    }
    off += t.cols();
  }
  Node node;
  node.kind = OpKind::kConcatCols;
  node.aux_in = xs;
  node.value = std::move(out);
  node.needs_grad = ng;
  return push(std::move(node));
}

template <typename S>
int Tape<S>::gather_elems(int x, const std::vector<int>& pairs) {
  if (pairs.empty() || pairs.size() % 2 != 0) {
    throw std::invalid_argument("gather_elems: need a non-empty flat list of (row, col) pairs");
  }
  const Tensor<S>& tx = value(x);
  require_2d(tx, "gather_elems");
  const int k = static_cast<int>(pairs.size() / 2);
  Tensor<S> out({1, k});
  for (int i = 0; i < k; ++i) {
    const int r = pairs[2 * i], c = pairs[2 * i + 1];
    if (r < 0 || r >= tx.rows() || c < 0 || c >= tx.cols()) {
      throw std::invalid_argument("gather_elems: index (" + std::to_string(r) + ", " +
                                  std::to_string(c) + ") out of range for " + tx.shape_str());
    }
    out[i] = tx.at(r, c);
  }
  Node node;
  node.kind = OpKind::kGatherElems;
  node.in = {x, -1, -1};
  node.idx = pairs;
  node.value = std::move(out);
  node.needs_grad = needs_grad(x);
  return push(std::move(node));
}

template <typename S>
int Tape<S>::stack_scalars(const std::vector<int>& xs) {
  if (xs.empty()) throw std::invalid_argument("stack_scalars: no inputs");
  Tensor<S> out({1, static_cast<int>(xs.size())});
  bool ng = false;
  for (size_t i = 0; i < xs.size(); ++i) {
    out[static_cast<int64_t>(i)] = value(xs[i]).item();
    ng = ng || needs_grad(xs[i]);
  }
  Node node;
  node.kind = OpKind::kStackScalars;
  node.aux_in = xs;
  node.value = std::move(out);
  node.needs_grad = ng;
  return push(std::move(node));
}

template <typename S>
int Tape<S>::sum(int x) {
  const Tensor<S>& tx = value(x);
  S acc = S(0);
  const int64_t n = tx.numel();
  for (int64_t i = 0; i < n; ++i) acc += tx[i];
  Node node;
  node.kind = OpKind::kSum;
  node.in = {x, -1, -1};
  node.value = Tensor<S>::scalar(acc);
  node.needs_grad = needs_grad(x);
  return push(std::move(node));
}

template <typename S>
int Tape<S>::mean(int x) {
  const Tensor<S>& tx = value(x);
  if (tx.numel() == 0) throw std::invalid_argument("mean: empty tensor");
  S acc = S(0);
  const int64_t n = tx.numel();
  for (int64_t i = 0; i < n; ++i) acc += tx[i];
  Node node;
  node.kind = OpKind::kMean;
  node.in = {x, -1, -1};
  node.value = Tensor<S>::scalar(acc / static_cast<S>(n));
  node.needs_grad = needs_grad(x);
  return push(std::move(node));
}

template <typename S>
Tensor<S>& Tape<S>::grad_buffer(int id) {
  Node& n = nodes_[static_cast<size_t>(id)];
  if (n.grad.empty()) n.grad = Tensor<S>(n.value.shape());
  return n.grad;
}

template <typename S>
Tensor<S> Tape<S>::grad(int id) const {
  const Node& n = nodes_[static_cast<size_t>(id)];
  if (n.grad.empty()) return Tensor<S>(n.value.shape());
  return n.grad;
}

template <typename S>
void Tape<S>::backward(int node) {
  if (value(node).numel() != 1) {
    throw std::invalid_argument("backward: output must be scalar, got " +
                                value(node).shape_str());
  }
  grad_buffer(node)[0] = S(1);
  for (int id = node; id >= 0; --id) {
    Node& n = nodes_[static_cast<size_t>(id)];
    if (n.grad.empty() || !n.needs_grad || n.kind == OpKind::kLeaf) continue;
    backprop_node(id);
  }
}

template <typename S>
void Tape<S>::backprop_node(int id) {
  Node& n = nodes_[static_cast<size_t>(id)];
  const Tensor<S>& g = n.grad;
  const auto want = [this](int in) { return in >= 0 && nodes_[static_cast<size_t>(in)].needs_grad; };

  switch (n.kind) {
    case OpKind::kMatMul: {
      const Tensor<S>& a = value(n.in[0]);
      const Tensor<S>& b = value(n.in[1]);
      const int m = a.rows(), k = a.cols(), c = b.cols();
      if (want(n.in[0])) {
        Tensor<S>& ga = grad_buffer(n.in[0]);
        // ga += g * b^T
        for (int i = 0; i < m; ++i) {
          for (int p = 0; p < k; ++p) {
            const S* gi = g.data() + static_cast<size_t>(i) * c;
            const S* bp = b.data() + static_cast<size_t>(p) * c;
            S acc = S(0);
            for (int j = 0; j < c; ++j) acc += gi[j] * bp[j];
            ga.at(i, p) += acc;
          }
        }
      }
      if (want(n.in[1])) {
        Tensor<S>& gb = grad_buffer(n.in[1]);
        // gb += a^T * g
        for (int p = 0; p < k; ++p) {
          for (int i = 0; i < m; ++i) {
            const S av = a.at(i, p);
            if (av == S(0)) continue;
            const S* gi = g.data() + static_cast<size_t>(i) * c;
            S* gbp = gb.data() + static_cast<size_t>(p) * c;
            for (int j = 0; j < c; ++j) gbp[j] += av * gi[j];
          }
        }
      }
      break;
    }
    case OpKind::kMatMulNT: {
      // out = a * b^T, a [m x k], b [c x k], out [m x c]
      const Tensor<S>& a = value(n.in[0]);
      const Tensor<S>& b = value(n.in[1]);
      const int m = a.rows(), k = a.cols(), c = b.rows();
      if (want(n.in[0])) {
        Tensor<S>& ga = grad_buffer(n.in[0]);
        // ga += g * b
        for (int i = 0; i < m; ++i) {
          const S* gi = g.data() + static_cast<size_t>(i) * c;
          S* gai = ga.data() + static_cast<size_t>(i) * k;
          for (int j = 0; j < c; ++j) {
            const S gv = gi[j];
            if (gv == S(0)) continue;
            const S* bj = b.data() + static_cast<size_t>(j) * k;
            for (int p = 0; p < k; ++p) gai[p] += gv * bj[p];
          }
        }
      }
      if (want(n.in[1])) {
        Tensor<S>& gb = grad_buffer(n.in[1]);
        // gb += g^T * a
        for (int j = 0; j < c; ++j) {
          S* gbj = gb.data() + static_cast<size_t>(j) * k;
          for (int i = 0; i < m; ++i) {
            const S gv = g.at(i, j);
            if (gv == S(0)) continue;
            const S* ai = a.data() + static_cast<size_t>(i) * k;
            for (int p = 0; p < k; ++p) gbj[p] += gv * ai[p];
          }
        }
      }
      break;
    }
    case OpKind::kAdd: {
      for (int s = 0; s < 2; ++s) {
        if (!want(n.in[s])) continue;
        Tensor<S>& gi = grad_buffer(n.in[s]);
        const int64_t m = g.numel();
        for (int64_t i = 0; i < m; ++i) gi[i] += g[i];
      }
      break;
    }
    case OpKind::kSub: {
      if (want(n.in[0])) {
        Tensor<S>& ga = grad_buffer(n.in[0]);
        const int64_t m = g.numel();
        for (int64_t i = 0; i < m; ++i) ga[i] += g[i];
      }
      if (want(n.in[1])) {
        Tensor<S>& gb = grad_buffer(n.in[1]);
        const int64_t m = g.numel();
        for (int64_t i = 0; i < m; ++i) gb[i] -= g[i];
      }
      break;
    }
    case OpKind::kMul: {
      const Tensor<S>& a = value(n.in[0]);
      const Tensor<S>& b = value(n.in[1]);
      const int64_t m = g.numel();
      if (want(n.in[0])) {
        Tensor<S>& ga = grad_buffer(n.in[0]);
        for (int64_t i = 0; i < m; ++i) ga[i] += g[i] * b[i];
      }
      if (want(n.in[1])) {
        Tensor<S>& gb = grad_buffer(n.in[1]);
        for (int64_t i = 0; i < m; ++i) gb[i] += g[i] * a[i];
      }
      break;
    }
    case OpKind::kScale: {
      if (want(n.in[0])) {
        Tensor<S>& ga = grad_buffer(n.in[0]);
        const int64_t m = g.numel();
        for (int64_t i = 0; i < m; ++i) ga[i] += g[i] * n.a0;
      }
      break;
    }
    case OpKind::kAddBias: {
      const int r = g.rows(), c = g.cols();
      if (want(n.in[0])) {
        Tensor<S>& gx = grad_buffer(n.in[0]);
        const int64_t m = g.numel();
        for (int64_t i = 0; i < m; ++i) gx[i] += g[i];
      }
      if (want(n.in[1])) {
        Tensor<S>& gb = grad_buffer(n.in[1]);
        for (int i = 0; i < r; ++i) {
          for (int j = 0; j < c; ++j) gb[j] += g.at(i, j);
        }
      }
      break;
    }
    case OpKind::kGelu: {
      if (!want(n.in[0])) break;
      const Tensor<S>& x = value(n.in[0]);
      Tensor<S>& gx = grad_buffer(n.in[0]);
      const int64_t m = g.numel();
      for (int64_t i = 0; i < m; ++i) {
        const double v = static_cast<double>(x[i]);
        const double u = kGeluC * (v + kGeluA * v * v * v);
        const double t = std::tanh(u);
        const double du = kGeluC * (1.0 + 3.0 * kGeluA * v * v);
        const double d = 0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * du;
        gx[i] += g[i] * static_cast<S>(d);
      }
      break;
    }
    case OpKind::kLayerNorm: {
      const Tensor<S>& x = value(n.in[0]);
      const Tensor<S>& gain = value(n.in[1]);
      const int r = x.rows(), c = x.cols();
      const S eps = n.a0;
      for (int i = 0; i < r; ++i) {
        S mu = S(0);
        for (int j = 0; j < c; ++j) mu += x.at(i, j);
        mu /= static_cast<S>(c);
        S var = S(0);
        for (int j = 0; j < c; ++j) {
          const S d = x.at(i, j) - mu;
          var += d * d;
        }
        var /= static_cast<S>(c);
        const S inv = S(1) / std::sqrt(var + eps);
        if (want(n.in[1]) || want(n.in[2])) {
          Tensor<S>* gg = want(n.in[1]) ? &grad_buffer(n.in[1]) : nullptr;
          Tensor<S>* gb = want(n.in[2]) ? &grad_buffer(n.in[2]) : nullptr;
          for (int j = 0; j < c; ++j) {
            const S y = (x.at(i, j) - mu) * inv;
            if (gg) (*gg)[j] += g.at(i, j) * y;
            if (gb) (*gb)[j] += g.at(i, j);
          }
        }
        if (want(n.in[0])) {
          Tensor<S>& gx = grad_buffer(n.in[0]);
          S m1 = S(0), m2 = S(0);
          for (int j = 0; j < c; ++j) {
            const S gy = g.at(i, j) * gain[j];
            const S y = (x.at(i, j) - mu) * inv;
            m1 += gy;
            m2 += gy * y;
          }
          m1 /= static_cast<S>(c);
          m2 /= static_cast<S>(c);
          for (int j = 0; j < c; ++j) {
            const S gy = g.at(i, j) * gain[j];
            const S y = (x.at(i, j) - mu) * inv;
            gx.at(i, j) += (gy - m1 - y * m2) * inv;
          }
        }
      }
      break;
    }
    case OpKind::kSoftmaxRows: {
      if (!want(n.in[0])) break;
      const Tensor<S>& y = n.value;
      Tensor<S>& gx = grad_buffer(n.in[0]);
      const int r = y.rows(), c = y.cols();
      for (int i = 0; i < r; ++i) {
        S dot = S(0);
        for (int j = 0; j < c; ++j) dot += g.at(i, j) * y.at(i, j);
        for (int j = 0; j < c; ++j) gx.at(i, j) += y.at(i, j) * (g.at(i, j) - dot);
      }
      break;
    }
    case OpKind::kLogSoftmaxRows: {
      if (!want(n.in[0])) break;
      const Tensor<S>& y = n.value;
      Tensor<S>& gx = grad_buffer(n.in[0]);
      const int r = y.rows(), c = y.cols();
      for (int i = 0; i < r; ++i) {
        S gsum = S(0);
        for (int j = 0; j < c; ++j) gsum += g.at(i, j);
        for (int j = 0; j < c; ++j) {
          gx.at(i, j) += g.at(i, j) - std::exp(y.at(i, j)) * gsum;
        }
      }
      break;
    }
    case OpKind::kEmbedRows:
    case OpKind::kTakeRows: {
      if (!want(n.in[0])) break;
      Tensor<S>& gt = grad_buffer(n.in[0]);
      const int d = g.cols();
      for (size_t i = 0; i < n.idx.size(); ++i) {
        const int r = n.idx[i];
        S* dst = gt.data() + static_cast<size_t>(r) * d;
        const S* src = g.data() + i * static_cast<size_t>(d);
        for (int j = 0; j < d; ++j) dst[j] += src[j];
      }
      break;
    }
    case OpKind::kSliceCols: {
      if (!want(n.in[0])) break;
      Tensor<S>& gx = grad_buffer(n.in[0]);
      const int c0 = n.idx[0];
      const int r = g.rows(), w = g.cols();
      for (int i = 0; i < r; ++i) {
        for (int j = 0; j < w; ++j) gx.at(i, c0 + j) += g.at(i, j);
      }
      break;
    }
    case OpKind::kConcatCols: {
      int off = 0;
      const int r = g.rows();
      for (int src : n.aux_in) {
        const int w = value(src).cols();
        if (want(src)) {
          Tensor<S>& gs = grad_buffer(src);
          for (int i = 0; i < r; ++i) {
            for (int j = 0; j < w; ++j) gs.at(i, j) += g.at(i, off + j);
          }
        }
        off += w;
      }
      break;
    }
    case OpKind::kGatherElems: {
      if (!want(n.in[0])) break;
      Tensor<S>& gx = grad_buffer(n.in[0]);
      const int k = static_cast<int>(n.idx.size() / 2);
      for (int i = 0; i < k; ++i) {
        gx.at(n.idx[2 * i], n.idx[2 * i + 1]) += g[i];
      }
      break;
    }
    case OpKind::kStackScalars: {
      for (size_t i = 0; i < n.aux_in.size(); ++i) {
        if (!want(n.aux_in[i])) continue;
        grad_buffer(n.aux_in[i])[0] += g[static_cast<int64_t>(i)];
      }
      break;
    }
    case OpKind::kSum: {
      if (!want(n.in[0])) break;
      Tensor<S>& gx = grad_buffer(n.in[0]);
      const S gv = g[0];
      const int64_t m = gx.numel();
      for (int64_t i = 0; i < m; ++i) gx[i] += gv;
      break;
    }
    case OpKind::kMean: {
      if (!want(n.in[0])) break;
      Tensor<S>& gx = grad_buffer(n.in[0]);
      const S gv = g[0] / static_cast<S>(gx.numel());
      const int64_t m = gx.numel();
      for (int64_t i = 0; i < m; ++i) gx[i] += gv;
      break;
    }
    case OpKind::kLeaf:
      break;
  }
}

// ---------------------------------------------------------------------------
// Finite-difference gradient oracle
// ---------------------------------------------------------------------------

template <typename S>
S grad_check(const std::vector<Tensor<S>*>& leaves,
             const std::function<int(Tape<S>&, const std::vector<int>&)>& build, S epsilon) {
  if (epsilon <= S(0)) throw std::invalid_argument("grad_check: epsilon must be positive");

  const auto eval = [&](bool with_grad, std::vector<Tensor<S>>* grads) -> S {
    Tape<S> tape;
    std::vector<int> ids;
    ids.reserve(leaves.size());
    for (Tensor<S>* t : leaves) {
      Tensor<S> v = *t;
      v.requires_grad = true;
      ids.push_back(tape.leaf(v));
    }
    const int loss = build(tape, ids);
    const S fx = tape.scalar_value(loss);
    if (!std::isfinite(static_cast<double>(fx))) {
      throw std::runtime_error("grad_check: function value is not finite at probe point");
    }
    if (with_grad) {
      tape.backward(loss);
      grads->clear();
      for (int id : ids) grads->push_back(tape.grad(id));
    }
    return fx;
  };

  std::vector<Tensor<S>> analytic;
  eval(true, &analytic);

  S max_rel = S(0);
  for (size_t li = 0; li < leaves.size(); ++li) {
    Tensor<S>& t = *leaves[li];
    const int64_t m = t.numel();
    for (int64_t i = 0; i < m; ++i) {
      const S saved = t[i];
      t[i] = saved + epsilon;
      const S fp = eval(false, nullptr);
      t[i] = saved - epsilon;
      const S fm = eval(false, nullptr);
      t[i] = saved;
      const S numeric = (fp - fm) / (S(2) * epsilon);
      const S a = analytic[li][i];
      const S denom = std::max(S(1e-8), std::abs(a) + std::abs(numeric));
      max_rel = std::max(max_rel, std::abs(a - numeric) / denom);
    }
  }
  return max_rel;
}

template <typename S>
S grad_check(Tensor<S>& point, const std::function<int(Tape<S>&, int)>& build, S epsilon) {
  return grad_check<S>({&point},
                       [&](Tape<S>& t, const std::vector<int>& ids) { return build(t, ids[0]); },
                       epsilon);
}

template class Tensor<float>;
template class Tensor<double>;
template class Tape<float>;
template class Tape<double>;

template float grad_check(const std::vector<Tensor<float>*>&,
                          const std::function<int(Tape<float>&, const std::vector<int>&)>&, float);
template double grad_check(const std::vector<Tensor<double>*>&,
                           const std::function<int(Tape<double>&, const std::vector<int>&)>&,
                           double);
template float grad_check(Tensor<float>&, const std::function<int(Tape<float>&, int)>&, float);
template double grad_check(Tensor<double>&, const std::function<int(Tape<double>&, int)>&, double);

}  // namespace mwds
