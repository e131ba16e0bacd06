#pragma once

// Desk-scale attention classifier with frozen base weights.
//
// Architecture (dimensions: vocab V, embed d, sequence length n, classes C):
//
//   X_0 = embedding[:, tokens]                         d x n
//   per block b:  Q = Wq X,  K = Wk X,  Vv = Wv X
//                 S = K^T Q / sqrt(d)                   n x n
//                 P = column-softmax(S)
//                 X_{b+1} = Vv P
//   h = column-mean(X_B)                                d
//   logits = head h + head_bias                         C
//
// There is no residual path: every feature flows through the attention
// weights, so a rotation applied to those weights has full authority over
// the model's predictions. The last class is reserved as the REFUSE target
// used by unlearning. Backpropagation is hand-derived for this fixed
// architecture and validated by finite differences.

#include "rcu/lora.hpp"
#include "rcu/matrix.hpp"

#include <array>
#include <cstdint>
#include <map>
#include <span>
#include <string>
#include <vector>

namespace rcu::toy {

using TokenSeq = std::vector<int>;

struct Dataset {
  std::vector<TokenSeq> inputs;
  std::vector<int> labels;

  std::size_t size() const { return inputs.size(); }
};

struct ModelConfig {
  int vocab_size = 64;
  int embed_dim = 32;
  int num_blocks = 2;
  int num_classes = 5;  // last class is REFUSE
  double embed_init = 0.5;
  double attn_init = 0.18;  // ~ 1/sqrt(embed_dim)
  double head_init = 0.1;
};

struct AttentionBlock {
  Mat wq, wk, wv;  // d x d, frozen after pretraining
};

struct ToyAttentionModel {
  ModelConfig cfg;
  Mat embedding;  // d x V
  std::vector<AttentionBlock> blocks;
  Mat head;       // C x d
  Vec head_bias;  // C

  int refuse_class() const { return cfg.num_classes - 1; }

  // Adapted layers, in canonical order: "b0.wq", "b0.wk", "b0.wv", "b1.wq"...
  std::vector<std::string> adapted_layer_ids() const;
  const Mat& base_weight(const std::string& layer_id) const;

  // Checksum over every trainable tensor; used to assert the base stays
  // bitwise frozen across unlearning.
  std::uint64_t checksum() const;
};

ToyAttentionModel make_model(const ModelConfig& cfg, Rng& rng);

void save_model(const std::string& path, const ToyAttentionModel& m);
ToyAttentionModel load_model(const std::string& path);

// ---------------------------------------------------------------------------
// effective weights and update composition
// ---------------------------------------------------------------------------

// Snapshot of the attention weights actually used by a forward pass.
struct EffectiveWeights {
  std::vector<AttentionBlock> blocks;
};

enum class UpdateMode {
  rotation,  // W_eff = (I + beta * BA) W
  additive,  // W_eff = W + BA   (baseline arm; beta has no effect)
};

enum class CompositionMode {
  stacked,    // later requests multiply onto already-composed weights
  from_base,  // all requests' updates are summed and applied to the base once
};

EffectiveWeights base_weights(const ToyAttentionModel& m);

// One request's adapters with the scale they are applied at.
struct RequestUpdate {
  const std::vector<lora::LoraPair>* pairs = nullptr;
  double beta = 1.0;
};

// Composes any number of requests' updates onto the base weights. Adapter
// layer_ids must address existing blocks; a dangling id is a configuration
// error. With an empty span this returns the base weights unchanged, and a
// request with beta == 0 in rotation mode contributes exactly nothing.
EffectiveWeights compose_requests(const ToyAttentionModel& m,
                                  std::span<const RequestUpdate> updates,
                                  UpdateMode mode, CompositionMode comp);

// ---------------------------------------------------------------------------
// forward / backward
// ---------------------------------------------------------------------------

struct BlockCache {
  Mat x;  // block input, d x n
  Mat q, k, v;
  Mat p;  // column-stochastic attention
};

struct SampleCache {
  std::vector<BlockCache> blocks;
  Mat x_out;  // final block output
  Vec h;      // pooled feature
};

struct ForwardCache {
  std::vector<SampleCache> samples;
};

// Log-probabilities, one row per input sequence. Tokens must lie in
// [0, vocab). Pass a cache to enable backward().
Mat forward_logprobs(const ToyAttentionModel& m, const EffectiveWeights& eff,
                     std::span<const TokenSeq> inputs,
                     ForwardCache* cache = nullptr);

// Convenience form matching the single-request use: adapters applied at one
// beta. Empty adapters or beta == 0 (rotation mode) reproduce the base model
// bit for bit.
Mat forward_logprobs(const ToyAttentionModel& m,
                     std::span<const lora::LoraPair> adapters, double beta,
                     std::span<const TokenSeq> inputs,
                     UpdateMode mode = UpdateMode::rotation);

struct ParamGrads {
  Mat d_embedding;
  std::vector<AttentionBlock> d_blocks;  // gradients w.r.t. effective weights
  Mat d_head;
  Vec d_head_bias;
};

// Backward pass from d(loss)/d(logits). `inputs` must be the sequences the
// cache was built from.
ParamGrads backward(const ToyAttentionModel& m, const EffectiveWeights& eff,
                    const ForwardCache& cache,
                    std::span<const TokenSeq> inputs, const Mat& d_logits);

// ---------------------------------------------------------------------------
// losses
// ---------------------------------------------------------------------------

struct UnlearnBatch {
  std::vector<TokenSeq> inputs;
  std::vector<int> y_prime;  // REFUSE or random labels, set by the caller
  int request_index = 0;
};

struct CeLoss {
  double value = 0.0;
  Mat d_logits;  // gradient w.r.t. pre-softmax logits
};

// Mean negative log-likelihood of the replacement targets. Requires each
// logprob row to be normalized (log-sum-exp = 0 within 1e-6).
CeLoss ce_unlearn_loss(const Mat& logprobs, const std::vector<int>& targets);

struct OverallLoss {
  double total = 0.0;
  double skew = 0.0;   // unweighted term values
  double plane = 0.0;
  double ce = 0.0;
  std::vector<Mat> d_b, d_a;  // lambda-scaled regularizer gradients per pair
  Mat d_logits;               // lambda3-scaled CE gradient
};

// total = lambda1 * sum_pairs L_skew + lambda2 * sum_pairs L_plane
//       + lambda3 * L_CE.
// The CE term's parameter gradient flows through the network; this function
// hands back the lambda3-scaled d_logits for the caller to push through
// backward(), plus the directly computed adapter gradients of the two
// regularizers. `frozen_prev` is empty for the first request; when non-empty
// it must cover every pair's layer_id.
OverallLoss overall_loss(std::span<const lora::LoraPair> pairs,
                         const std::map<std::string, lora::FrozenComposite>&
                             frozen_prev,
                         const Mat& logprobs, const std::vector<int>& y_prime,
                         const std::array<double, 3>& lambdas);

// ---------------------------------------------------------------------------
// training
// ---------------------------------------------------------------------------

struct TrainConfig {
  double lr = 0.05;
  int epochs = 40;
  int batch_size = 32;
  std::array<double, 3> lambdas{0.1, 0.1, 1.0};
  int rank = 8;
  double a_init_scale = 0.2;
  double momentum = 0.0;  // 0 = plain mini-batch GD (the default update rule)
  // Inference-time gain on the composition strength (1 = off).  Scaling the
  // generator scales every rotation angle by the same factor, so refusal
  // learned at full strength keeps holding at the partial strengths the
  // detector assigns.  Adapters always ship at their raw trained scale; the
  // harness multiplies detector-assigned strengths by this margin.
  double margin = 1.0;
  // Strength at which prior requests' updates are composed into the model
  // state a new request trains against (0 = train from the pristine base).
  // Consumed by the continual harness when it builds the training context.
  double context_strength = 0.0;
  UpdateMode mode = UpdateMode::rotation;
  std::uint64_t seed = 1;
};

struct TrainStepLog {
  int step = 0;
  double skew = 0.0;
  double plane = 0.0;
  double ce = 0.0;
  double total = 0.0;
};

struct TrainResult {
  std::vector<lora::LoraPair> pairs;
  std::vector<TrainStepLog> log;
  double refusal_accuracy = 0.0;  // argmax == y_prime at beta = 1, train set
  double skew_ratio_max = 0.0;    // max over layers of ||X+X^T||F^2/||X||F^2
  double max_ba_entry = 0.0;      // max |BA entry| over layers
  // ||(I + X_t - X_prev) X_prev||_F at adapter init and after training;
  // equal-shaped zero matrices give 0/0 -> reported as 0 for request 1.
  double plane_overlap_init = 0.0;
  double plane_overlap_final = 0.0;
};

// Trains one request's adapters. `context` is the committed model state the
// new update composes onto — the effective weights holding every prior
// request's update at full strength (nullptr = the pristine base, i.e. the
// first request). Training forwards through (I + X_t)·context and gradients
// flow only into the new pair; inference later re-scales each request's
// update by its own per-input beta. Deterministic given config.seed. Throws
// std::runtime_error (with the step index) if the loss goes non-finite.
TrainResult train_request(const ToyAttentionModel& m, const UnlearnBatch& batch,
                          const std::map<std::string, lora::FrozenComposite>&
                              frozen_prev,
                          const TrainConfig& cfg,
                          const EffectiveWeights* context = nullptr);

// Fraction of samples whose argmax prediction equals the stored label.
// Throws std::domain_error on an empty dataset.
double evaluate(const ToyAttentionModel& m, const EffectiveWeights& eff,
                const Dataset& data);
double evaluate(const ToyAttentionModel& m,
                std::span<const lora::LoraPair> adapters, double beta,
                const Dataset& data);

// ---------------------------------------------------------------------------
// pretraining (base model fit; all parameters trainable)
// ---------------------------------------------------------------------------

struct PretrainConfig {
  double lr = 0.1;
  int epochs = 200;
  int batch_size = 64;
  double momentum = 0.9;
  std::uint64_t seed = 7;
};

struct PretrainResult {
  double final_ce = 0.0;
  double train_accuracy = 0.0;
  int steps = 0;
};

PretrainResult pretrain(ToyAttentionModel& m, const Dataset& data,
                        const PretrainConfig& cfg);

}  // namespace rcu::toy
