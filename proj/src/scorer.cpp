#include "mwds/scorer.hpp"

#include <cmath>
#include <cstring>
#include <fstream>
#include <numeric>
#include <stdexcept>

#include "mwds/rng.hpp"

namespace mwds {

void ScorerConfig::validate() const {
  if (layers < 1) throw std::invalid_argument("scorer: layers must be >= 1");
  if (hidden_dim < 1 || ffn_dim < 1) throw std::invalid_argument("scorer: dims must be >= 1");
  if (heads < 1 || hidden_dim % heads != 0) {
    throw std::invalid_argument("scorer: hidden_dim " + std::to_string(hidden_dim) +
                                " not divisible by heads " + std::to_string(heads));
  }
  if (vocab_size < Vocab::kNumReserved + 1) {
    throw std::invalid_argument("scorer: vocab_size must cover the reserved tokens");
  }
  if (max_len < 2) throw std::invalid_argument("scorer: max_len must be >= 2");
}

namespace {

template <typename S>
Tensor<S> trunc_normal_tensor(std::vector<int> shape, Rng& rng, double sd = 0.02) {
  Tensor<S> t(std::move(shape));
  for (int64_t i = 0; i < t.numel(); ++i) t[i] = static_cast<S>(rng.trunc_normal(sd));
  return t;
}

template <typename S>
void check_ids(const ScorerConfig& cfg, const std::vector<int>& ids) {
  if (ids.empty() || ids[0] != Vocab::kCls) {
    throw std::invalid_argument("scorer: input must start with [CLS]");
  }
  if (static_cast<int>(ids.size()) > cfg.max_len) {
    throw std::invalid_argument("scorer: sequence length " + std::to_string(ids.size()) +
                                " exceeds max_len " + std::to_string(cfg.max_len));
  }
  for (int id : ids) {
    if (id < 0 || id >= cfg.vocab_size) {
      throw std::invalid_argument("scorer: token id " + std::to_string(id) +
                                  " outside vocab of size " + std::to_string(cfg.vocab_size));
    }
  }
}

}  // namespace

template <typename S>
ScorerModel<S> ScorerModel<S>::init(const ScorerConfig& cfg) {
  cfg.validate();
  Rng rng(static_cast<uint64_t>(cfg.seed));
  ScorerModel<S> m;
  m.cfg = cfg;
  const int d = cfg.hidden_dim, f = cfg.ffn_dim;
  m.tok_emb = trunc_normal_tensor<S>({cfg.vocab_size, d}, rng);
  m.pos_emb = trunc_normal_tensor<S>({cfg.max_len, d}, rng);
  m.layers.resize(static_cast<size_t>(cfg.layers));
  for (auto& layer : m.layers) {
    layer.wq = trunc_normal_tensor<S>({d, d}, rng);
    layer.bq = Tensor<S>({1, d});
    layer.wk = trunc_normal_tensor<S>({d, d}, rng);
    layer.bk = Tensor<S>({1, d});
    layer.wv = trunc_normal_tensor<S>({d, d}, rng);
    layer.bv = Tensor<S>({1, d});
    layer.wo = trunc_normal_tensor<S>({d, d}, rng);
    layer.bo = Tensor<S>({1, d});
    layer.ln1_g = Tensor<S>({1, d}, S(1));
    layer.ln1_b = Tensor<S>({1, d});
    layer.w1 = trunc_normal_tensor<S>({d, f}, rng);
    layer.b1 = Tensor<S>({1, f});
    layer.w2 = trunc_normal_tensor<S>({f, d}, rng);
    layer.b2 = Tensor<S>({1, d});
    layer.ln2_g = Tensor<S>({1, d}, S(1));
    layer.ln2_b = Tensor<S>({1, d});
  }
  m.mlm_bias = Tensor<S>({1, cfg.vocab_size});
  m.cls_w = trunc_normal_tensor<S>({d, 1}, rng);
  m.cls_b = Tensor<S>({1, 1});
  return m;
}

template <typename S>
std::vector<Tensor<S>*> ScorerModel<S>::params() {
  std::vector<Tensor<S>*> out = {&tok_emb, &pos_emb};
  for (auto& l : layers) {
    for (Tensor<S>* t : {&l.wq, &l.bq, &l.wk, &l.bk, &l.wv, &l.bv, &l.wo, &l.bo, &l.ln1_g,
                         &l.ln1_b, &l.w1, &l.b1, &l.w2, &l.b2, &l.ln2_g, &l.ln2_b}) {
      out.push_back(t);
    }
  }
  out.push_back(&mlm_bias);
  out.push_back(&cls_w);
  out.push_back(&cls_b);
  return out;
}

template <typename S>
std::vector<const Tensor<S>*> ScorerModel<S>::params() const {
  auto mutable_params = const_cast<ScorerModel<S>*>(this)->params();
  return std::vector<const Tensor<S>*>(mutable_params.begin(), mutable_params.end());
}

template <typename S>
std::vector<std::pair<std::string, Tensor<S>*>> ScorerModel<S>::named_params() {
  std::vector<std::pair<std::string, Tensor<S>*>> out;
  out.emplace_back("tok_emb", &tok_emb);
  out.emplace_back("pos_emb", &pos_emb);
  for (size_t i = 0; i < layers.size(); ++i) {
    auto& l = layers[i];
    const std::string prefix = "layer" + std::to_string(i) + ".";
    const std::pair<const char*, Tensor<S>*> entries[] = {
        {"wq", &l.wq},   {"bq", &l.bq},   {"wk", &l.wk},     {"bk", &l.bk},
        {"wv", &l.wv},   {"bv", &l.bv},   {"wo", &l.wo},     {"bo", &l.bo},
        {"ln1_g", &l.ln1_g}, {"ln1_b", &l.ln1_b}, {"w1", &l.w1}, {"b1", &l.b1},
        {"w2", &l.w2},   {"b2", &l.b2},   {"ln2_g", &l.ln2_g}, {"ln2_b", &l.ln2_b}};
    for (const auto& [name, tensor] : entries) out.emplace_back(prefix + name, tensor);
  }
  out.emplace_back("mlm_bias", &mlm_bias);
  out.emplace_back("cls_w", &cls_w);
  out.emplace_back("cls_b", &cls_b);
  return out;
}

template <typename S>
int64_t ScorerModel<S>::param_count(bool include_embeddings) const {
  int64_t n = 0;
  for (const Tensor<S>* t : params()) n += t->numel();
  if (!include_embeddings) n -= tok_emb.numel() + pos_emb.numel();
  return n;
}

template <typename S>
bool ScorerModel<S>::all_finite() const {
  for (const Tensor<S>* t : params()) {
    if (!t->all_finite()) return false;
  }
  return true;
}

template <typename S>
ScorerModel<S> ScorerModel<S>::clone() const {
  ScorerModel<S> copy;
  copy.cfg = cfg;
  copy.layers.resize(layers.size());
  auto src = params();
  auto dst = copy.params();
  for (size_t i = 0; i < src.size(); ++i) *dst[i] = src[i]->clone();
  return copy;
}

// ---------------------------------------------------------------------------
// Forward passes
// ---------------------------------------------------------------------------

template <typename S>
BoundScorer<S>::BoundScorer(Tape<S>& tape, const ScorerModel<S>& model, bool trainable)
    : tape_(&tape), model_(&model) {
  for (const Tensor<S>* t : model.params()) {
    Tensor<S> v = *t;
    v.requires_grad = trainable;
    param_nodes_.push_back(tape.leaf(v));
  }
  assign_param_nodes();
}

template <typename S>
BoundScorer<S>::BoundScorer(Tape<S>& tape, const ScorerModel<S>& model,
                            std::vector<int> param_nodes)
    : tape_(&tape), model_(&model), param_nodes_(std::move(param_nodes)) {
  if (param_nodes_.size() != model.params().size()) {
    throw std::invalid_argument("bound scorer: expected " +
                                std::to_string(model.params().size()) + " parameter nodes, got " +
                                std::to_string(param_nodes_.size()));
  }
  assign_param_nodes();
}

template <typename S>
void BoundScorer<S>::assign_param_nodes() {
  size_t next = 0;
  const auto take = [&] { return param_nodes_[next++]; };
  tok_emb_ = take();
  pos_emb_ = take();
  layers_.clear();
  for (int i = 0; i < model_->cfg.layers; ++i) {
    LayerNodes nodes;
    nodes.wq = take();
    nodes.bq = take();
    nodes.wk = take();
    nodes.bk = take();
    nodes.wv = take();
    nodes.bv = take();
    nodes.wo = take();
    nodes.bo = take();
    nodes.ln1_g = take();
    nodes.ln1_b = take();
    nodes.w1 = take();
    nodes.b1 = take();
    nodes.w2 = take();
    nodes.b2 = take();
    nodes.ln2_g = take();
    nodes.ln2_b = take();
    layers_.push_back(nodes);
  }
  mlm_bias_ = take();
  cls_w_ = take();
  cls_b_ = take();
}

template <typename S>
int BoundScorer<S>::hidden_states(const std::vector<int>& ids) const {
  check_ids<S>(model_->cfg, ids);
  Tape<S>& t = *tape_;
  const int len = static_cast<int>(ids.size());
  const int d = model_->cfg.hidden_dim;
  const int heads = model_->cfg.heads;
  const int dh = d / heads;

  std::vector<int> positions(static_cast<size_t>(len));
  std::iota(positions.begin(), positions.end(), 0);
  int x = t.add(t.embed_rows(tok_emb_, ids), t.embed_rows(pos_emb_, positions));

  // Additive attention mask: [PAD] keys are unreachable from every query.
  int mask = -1;
  bool any_pad = false;
  for (int id : ids) any_pad = any_pad || id == Vocab::kPad;
  if (any_pad) {
    Tensor<S> m({len, len});
    for (int i = 0; i < len; ++i) {
      for (int j = 0; j < len; ++j) {
        if (ids[static_cast<size_t>(j)] == Vocab::kPad) m.at(i, j) = S(-1e9);
      }
    }
    mask = t.constant(std::move(m));
  }

  const S inv_sqrt_dh = static_cast<S>(1.0 / std::sqrt(static_cast<double>(dh)));
  for (const LayerNodes& l : layers_) {
    const int q = t.add_bias(t.matmul(x, l.wq), l.bq);
    const int k = t.add_bias(t.matmul(x, l.wk), l.bk);
    const int v = t.add_bias(t.matmul(x, l.wv), l.bv);
    std::vector<int> head_ctx;
    head_ctx.reserve(static_cast<size_t>(heads));
    for (int h = 0; h < heads; ++h) {
      const int c0 = h * dh, c1 = (h + 1) * dh;
      const int qh = t.slice_cols(q, c0, c1);
      const int kh = t.slice_cols(k, c0, c1);
      const int vh = t.slice_cols(v, c0, c1);
      int scores = t.scale(t.matmul_nt(qh, kh), inv_sqrt_dh);
      if (mask >= 0) scores = t.add(scores, mask);
      head_ctx.push_back(t.matmul(t.softmax_rows(scores), vh));
    }
    const int ctx = heads == 1 ? head_ctx[0] : t.concat_cols(head_ctx);
    const int attn = t.add_bias(t.matmul(ctx, l.wo), l.bo);
    x = t.layer_norm(t.add(x, attn), l.ln1_g, l.ln1_b, static_cast<S>(kLayerNormEps));
    const int ff = t.add_bias(
        t.matmul(t.gelu(t.add_bias(t.matmul(x, l.w1), l.b1)), l.w2), l.b2);
    x = t.layer_norm(t.add(x, ff), l.ln2_g, l.ln2_b, static_cast<S>(kLayerNormEps));
  }
  return x;
}

template <typename S>
int BoundScorer<S>::score(const std::vector<int>& ids) const {
  Tape<S>& t = *tape_;
  const int hidden = hidden_states(ids);
  const int cls = t.take_row(hidden, 0);
  return t.add(t.matmul(cls, cls_w_), cls_b_);
}

template <typename S>
int BoundScorer<S>::mlm_logits_from_hidden(int hidden) const {
  Tape<S>& t = *tape_;
  return t.add_bias(t.matmul_nt(hidden, tok_emb_), mlm_bias_);
}

template <typename S>
int BoundScorer<S>::mlm_logits(const std::vector<int>& ids) const {
  return mlm_logits_from_hidden(hidden_states(ids));
}

template <typename S>
S score_value(const ScorerModel<S>& model, const std::vector<int>& ids) {
  Tape<S> tape;
  BoundScorer<S> bound(tape, model, false);
  return tape.scalar_value(bound.score(ids));
}

template <typename S>
S pll_value(const ScorerModel<S>& model, const std::vector<int>& ids) {
  if (ids.size() < 2) {
    throw std::invalid_argument("pll: need [CLS] plus at least one token");
  }
  S total = S(0);
  std::vector<int> masked = ids;
  for (size_t pos = 1; pos < ids.size(); ++pos) {
    masked[pos] = Vocab::kMask;
    Tape<S> tape;
    BoundScorer<S> bound(tape, model, false);
    const int logits = bound.mlm_logits(masked);
    const int logprobs = tape.log_softmax_rows(logits);
    total -= tape.value(logprobs).at(static_cast<int>(pos), ids[pos]);
    masked[pos] = ids[pos];
  }
  return total;
}

template <typename S>
Tensor<S> mlm_logits_value(const ScorerModel<S>& model, const std::vector<int>& ids) {
  Tape<S> tape;
  BoundScorer<S> bound(tape, model, false);
  return tape.value(bound.mlm_logits(ids));
}

// ---------------------------------------------------------------------------
// Checkpoints
// ---------------------------------------------------------------------------

namespace {

void write_u32(std::ostream& out, uint32_t v) {
  out.write(reinterpret_cast<const char*>(&v), sizeof(v));
}

uint32_t read_u32(std::istream& in, const std::string& path) {
  uint32_t v = 0;
  if (!in.read(reinterpret_cast<char*>(&v), sizeof(v))) {
    throw std::invalid_argument("checkpoint truncated: " + path);
  }
  return v;
}

}  // namespace

template <typename S>
void save_checkpoint(const ScorerModel<S>& model, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write checkpoint: " + path);
  out.write("MWDS", 4);
  write_u32(out, kCheckpointVersion);
  write_u32(out, static_cast<uint32_t>(model.cfg.layers));
  write_u32(out, static_cast<uint32_t>(model.cfg.hidden_dim));
  write_u32(out, static_cast<uint32_t>(model.cfg.heads));
  write_u32(out, static_cast<uint32_t>(model.cfg.ffn_dim));
  write_u32(out, static_cast<uint32_t>(model.cfg.vocab_size));
  write_u32(out, static_cast<uint32_t>(model.cfg.max_len));
  int64_t seed = model.cfg.seed;
  out.write(reinterpret_cast<const char*>(&seed), sizeof(seed));
  for (const Tensor<S>* t : model.params()) {
    for (int64_t i = 0; i < t->numel(); ++i) {
      const float v = static_cast<float>((*t)[i]);
      out.write(reinterpret_cast<const char*>(&v), sizeof(v));
    }
  }
  if (!out) throw std::runtime_error("checkpoint write failed: " + path);
}

template <typename S>
ScorerModel<S> load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::invalid_argument("cannot open checkpoint: " + path);
  char magic[4];
  if (!in.read(magic, 4) || std::memcmp(magic, "MWDS", 4) != 0) {
    throw std::invalid_argument("not a MWDS checkpoint: " + path);
  }
  const uint32_t version = read_u32(in, path);
  if (version != kCheckpointVersion) {
    throw std::invalid_argument("unsupported checkpoint version " + std::to_string(version));
  }
  ScorerConfig cfg;
  cfg.layers = static_cast<int>(read_u32(in, path));
  cfg.hidden_dim = static_cast<int>(read_u32(in, path));
  cfg.heads = static_cast<int>(read_u32(in, path));
  cfg.ffn_dim = static_cast<int>(read_u32(in, path));
  cfg.vocab_size = static_cast<int>(read_u32(in, path));
  cfg.max_len = static_cast<int>(read_u32(in, path));
  int64_t seed = 0;
  if (!in.read(reinterpret_cast<char*>(&seed), sizeof(seed))) {
    throw std::invalid_argument("checkpoint truncated: " + path);
  }
  cfg.seed = seed;
  cfg.validate();

  ScorerModel<S> model = ScorerModel<S>::init(cfg);
  for (Tensor<S>* t : model.params()) {
    for (int64_t i = 0; i < t->numel(); ++i) {
      float v = 0.0f;
      if (!in.read(reinterpret_cast<char*>(&v), sizeof(v))) {
        throw std::invalid_argument("checkpoint truncated: " + path);
      }
      (*t)[i] = static_cast<S>(v);
    }
  }
  char extra = 0;
  if (in.read(&extra, 1)) {
    throw std::invalid_argument("checkpoint has trailing bytes: " + path);
  }
  if (!model.all_finite()) {
    throw std::invalid_argument("checkpoint contains non-finite parameters: " + path);
  }
  return model;
}

template struct ScorerModel<float>;
template struct ScorerModel<double>;
template class BoundScorer<float>;
template class BoundScorer<double>;
template float score_value(const ScorerModel<float>&, const std::vector<int>&);
template double score_value(const ScorerModel<double>&, const std::vector<int>&);
template float pll_value(const ScorerModel<float>&, const std::vector<int>&);
template double pll_value(const ScorerModel<double>&, const std::vector<int>&);
template Tensor<float> mlm_logits_value(const ScorerModel<float>&, const std::vector<int>&);
template Tensor<double> mlm_logits_value(const ScorerModel<double>&, const std::vector<int>&);
template void save_checkpoint(const ScorerModel<float>&, const std::string&);
template void save_checkpoint(const ScorerModel<double>&, const std::string&);
template ScorerModel<float> load_checkpoint<float>(const std::string&);
template ScorerModel<double> load_checkpoint<double>(const std::string&);

}  // namespace mwds
