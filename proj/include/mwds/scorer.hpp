#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "mwds/nbest.hpp"
#include "mwds/tensor.hpp"

namespace mwds {

struct ScorerConfig {
  int layers = 2;
  int hidden_dim = 32;
  int heads = 2;
  int ffn_dim = 64;
  int vocab_size = 0;
  int max_len = kDefaultMaxLen;
  int64_t seed = 0;

  void validate() const;
};

inline constexpr double kLayerNormEps = 1e-5;

// Transformer encoder with a weight-tied MLM projection and a single affine
// CLS regression head producing a scalar cost.
template <typename S>
struct ScorerModel {
  struct Layer {
    Tensor<S> wq, bq, wk, bk, wv, bv, wo, bo;
    Tensor<S> ln1_g, ln1_b;
    Tensor<S> w1, b1, w2, b2;
    Tensor<S> ln2_g, ln2_b;
  };

  ScorerConfig cfg;
  Tensor<S> tok_emb;  // [vocab x hidden]; also the MLM projection (tied)
  Tensor<S> pos_emb;  // [max_len x hidden]
  std::vector<Layer> layers;
  Tensor<S> mlm_bias;  // [1 x vocab]
  Tensor<S> cls_w;     // [hidden x 1]
  Tensor<S> cls_b;     // [1 x 1]

  // Truncated-normal(0, 0.02) weights, zero biases, unit layer-norm gains;
  // deterministic in cfg.seed.
  static ScorerModel init(const ScorerConfig& cfg);

  std::vector<Tensor<S>*> params();
  std::vector<const Tensor<S>*> params() const;
  std::vector<std::pair<std::string, Tensor<S>*>> named_params();

  int64_t param_count(bool include_embeddings) const;
  bool all_finite() const;
  ScorerModel clone() const;
};

// Node ids of one model bound onto one tape. Forward passes share the bound
// parameter leaves, so scoring several hypotheses on one tape accumulates
// parameter gradients across all of them.
template <typename S>
class BoundScorer {
 public:
  BoundScorer(Tape<S>& tape, const ScorerModel<S>& model, bool trainable);
  // Builds the graph over already-registered parameter leaves (params() order).
  BoundScorer(Tape<S>& tape, const ScorerModel<S>& model, std::vector<int> param_nodes);

  // Final-layer hidden states [len x hidden].
  int hidden_states(const std::vector<int>& ids) const;
  // Scalar second-pass cost node.
  int score(const std::vector<int>& ids) const;
  // Per-position vocabulary logits [len x vocab].
  int mlm_logits(const std::vector<int>& ids) const;
  int mlm_logits_from_hidden(int hidden) const;

  Tape<S>& tape() const { return *tape_; }
  const std::vector<int>& param_nodes() const { return param_nodes_; }

 private:
  struct LayerNodes {
    int wq, bq, wk, bk, wv, bv, wo, bo;
    int ln1_g, ln1_b, w1, b1, w2, b2, ln2_g, ln2_b;
  };

  void assign_param_nodes();

  Tape<S>* tape_;
  const ScorerModel<S>* model_;
  int tok_emb_, pos_emb_;
  std::vector<LayerNodes> layers_;
  int mlm_bias_, cls_w_, cls_b_;
  std::vector<int> param_nodes_;
};

// Frozen-model conveniences (no gradient tracking).
template <typename S>
S score_value(const ScorerModel<S>& model, const std::vector<int>& ids);

// Pseudo log-likelihood: sum over non-CLS positions of the negative log
// probability of the true token when that position is masked.
template <typename S>
S pll_value(const ScorerModel<S>& model, const std::vector<int>& ids);

template <typename S>
Tensor<S> mlm_logits_value(const ScorerModel<S>& model, const std::vector<int>& ids);

// Checkpoint: magic "MWDS", u32 format version, the config, then raw
// little-endian f32 parameter tensors in params() order.
inline constexpr uint32_t kCheckpointVersion = 1;

template <typename S>
void save_checkpoint(const ScorerModel<S>& model, const std::string& path);

template <typename S>
ScorerModel<S> load_checkpoint(const std::string& path);

}  // namespace mwds
