#pragma once

// Unlearned-knowledge detector. A small encoder is trained on the current
// request's unlearn split so that, at inference time, inputs from that
// distribution score as in-distribution (high gamma) and everything else
// scores low. Pipeline:
//
//   encoder features  ->  per-layer Mahalanobis + max-cosine score s(x)
//                     ->  hypersphere boundary distance d_H = |s - c| - r
//                     ->  mixture-CDF calibration
//                         gamma = clamp01(1 - max(p, p') + min(p, p')),
//                         p = P_mix(d_H), p' = P_mix(2 d0 - d_H)
//
// gamma peaks at exactly 1 where d_H equals the reference distance d0 and
// decays symmetrically as d_H moves away from it.
//
// Encoder: token embedding, L tanh layers, a token-prediction head. Feature
// of layer l = token-mean of the layer-l activations. Training loss is the
// sum of three parts: a feature-decorrelation term (unit-covariance
// alignment), a contrastive entropy term between masked views (through the
// encoder) and clean views (through a momentum key encoder), and a
// masked-token prediction term.

#include "rcu/matrix.hpp"

#include <span>
#include <string>
#include <vector>

namespace rcu::ood {

using TokenSeq = std::vector<int>;

// ---------------------------------------------------------------------------
// encoder
// ---------------------------------------------------------------------------

struct EncoderConfig {
  int vocab_size = 64;
  int feature_dim = 32;  // d_f
  int num_layers = 4;    // L
  int mask_token = 63;   // reserved id, never emitted by task generators
  double embed_init = 0.5;
  double layer_init = 0.3;
  double head_init = 0.1;
};

struct Encoder {
  EncoderConfig cfg;
  Mat embedding;           // d_f x V
  std::vector<Mat> w;      // L of d_f x d_f
  std::vector<Vec> bias;   // L of d_f
  Mat mlm_head;            // V x d_f
  Vec mlm_bias;            // V
};

Encoder make_encoder(const EncoderConfig& cfg, Rng& rng);

// Layer activations for one sequence; acts[l] is d_f x n for layer l+1.
// features[l] is the token mean of acts[l].
struct EncoderCache {
  Mat x0;                    // embedded input
  std::vector<Mat> acts;     // post-tanh activations per layer
  std::vector<Vec> features; // token-averaged per layer
};

EncoderCache encode(const Encoder& enc, const TokenSeq& seq);

// Per-layer token-averaged features only (no cache kept).
std::vector<Vec> encode_features(const Encoder& enc, const TokenSeq& seq);

struct EncoderGrads {
  Mat d_embedding;
  std::vector<Mat> d_w;
  std::vector<Vec> d_bias;
  Mat d_mlm_head;
  Vec d_mlm_bias;

  void setZero(const Encoder& enc);
  void accumulate(const EncoderGrads& other);
  void scale(double s);
};

// Backward through one cached sample. d_features[l] taps the layer-l
// token-mean feature; d_last_acts (optional, may be 0x0) taps the final
// layer's activations directly (used by the masked-token head).
void encoder_backward(const Encoder& enc, const TokenSeq& seq,
                      const EncoderCache& cache,
                      const std::vector<Vec>& d_features,
                      const Mat& d_last_acts, EncoderGrads& grads);

// ---------------------------------------------------------------------------
// losses
// ---------------------------------------------------------------------------

struct UaLoss {
  double value = 0.0;
  std::vector<Mat> d_features;  // per layer, n x d_f
};

// Feature-decorrelation loss. Per layer: rows of Z (n x d_f) are
// L2-normalized to Zhat, then the loss is
//   (1/d_f^2) * || Zhat^T Zhat / (n-1) - I ||_F^2,
// summed over layers. Throws std::invalid_argument for n < 2 and
// std::runtime_error for a zero-norm row.
UaLoss ua_loss(const std::vector<Mat>& layer_features);

// Masked-view construction: replaces floor(p * n) tokens (at least 1) with
// the mask token, positions drawn without replacement.
struct MaskedView {
  TokenSeq tokens;
  std::vector<int> positions;  // masked indices
  std::vector<int> originals;  // original token at each masked index
};
MaskedView make_masked_view(const TokenSeq& seq, double mask_fraction,
                            int mask_token, Rng& rng);

struct CelLoss {
  double value = 0.0;
  // gradient w.r.t. the anchor (masked-view) features, per sample per layer:
  // d_features[i][l] has dimension d_f
  std::vector<std::vector<Vec>> d_features;
};

// Contrastive entropy: for anchor i and layer l, Delta(i,l,.) is the softmax
// over the batch of dot products between the anchor's masked-view feature
// and every sample's key (clean-view) feature; the loss is the entropy of
// Delta summed over anchors and layers. Key features receive no gradient.
CelLoss cel_loss_from_features(
    const std::vector<std::vector<Vec>>& anchor_features,
    const std::vector<std::vector<Vec>>& key_features);

struct MlmLoss {
  double value = 0.0;
  Mat d_last_acts;  // d_f x n tap into the final layer's activations
};

// Mean cross-entropy of recovering the original tokens at the masked
// positions from the final-layer activations through the token head.
// Gradients are returned both for the head and (via d_last_acts) for the
// encoder trunk. Throws std::domain_error when no positions are masked.
MlmLoss mlm_loss(const Encoder& enc, const EncoderCache& cache,
                 const MaskedView& view, EncoderGrads& head_grads);

// ---------------------------------------------------------------------------
// fitted detector
// ---------------------------------------------------------------------------

struct GaussianMixture1D {
  double weight[2] = {0.5, 0.5};
  double mean[2] = {0.0, 0.0};
  double stddev[2] = {1.0, 1.0};

  double cdf(double x) const;
  double pdf(double x) const;
  double log_likelihood(std::span<const double> xs) const;
};

// EM fit with several deterministic quantile-seeded starts; keeps the best
// log-likelihood. Throws std::invalid_argument for fewer than 16 values or
// (near-)zero variance input.
GaussianMixture1D fit_mixture_em(const std::vector<double>& values);

struct OodModel {
  Encoder encoder;
  Encoder key_encoder;

  std::vector<Vec> mu;          // per-layer feature means
  std::vector<Mat> sigma_chol;  // per-layer lower Cholesky of regularized cov
  std::vector<Mat> id_features; // per-layer stored ID features, d_f x n_id

  Vec center;          // hypersphere center over score vectors (L-dim)
  double radius = 0.0;
  GaussianMixture1D mixture;
  double d0 = 0.0;     // reference boundary distance (mean over ID fit split)
  double gamma_w = 1000.0;
  bool fitted = false;
};

struct DetectorConfig {
  EncoderConfig enc;
  double lr = 0.05;
  int epochs = 30;
  int batch_size = 32;
  double key_momentum = 0.99;
  double mask_fraction = 0.15;
  bool use_alignment_loss = true;  // the no-alignment ablation clears this
  double alpha = 0.5;              // fraction of data used for fitting stats
  double quantile = 0.95;          // hypersphere radius quantile
  double gamma_w = 1000.0;         // cosine-term weight in the layer score
  double sigma_reg = 1e-4;         // diagonal regularizer, scaled by trace/d_f
  std::uint64_t seed = 1;
};

// Trains the encoder on the request's unlearn inputs and fits every scoring
// stage. The inputs are split deterministically: an alpha fraction trains
// the encoder and fits stats/hypersphere/reference distance; the remainder
// calibrates the mixture. Deterministic given config.seed.
OodModel train_detector(const std::vector<TokenSeq>& inputs,
                        const DetectorConfig& cfg);

// Per-layer score: squared Mahalanobis distance of the layer feature to
// (mu_l, Sigma_l) plus gamma_w * (-max cosine similarity) against the stored
// ID features of that layer.
Vec score_vector(const OodModel& model, const TokenSeq& x, double gamma_w);
Vec score_vector(const OodModel& model, const TokenSeq& x);

// center = mean of the score vectors; radius = q-quantile of distances to
// the center. Throws std::invalid_argument for fewer than 8 vectors.
std::pair<Vec, double> fit_hypersphere(const std::vector<Vec>& scores,
                                       double quantile);

// Euclidean distance to the center minus the radius; negative inside.
double boundary_distance(const Vec& s, const Vec& center, double radius);

// Calibrated score stages, exposed separately so each can be validated (and
// so synthetic score vectors can drive the calibration path directly).
double combined_score_from_distance(const OodModel& model, double d_h);
double combined_score_from_vector(const OodModel& model, const Vec& s);
double combined_score(const OodModel& model, const TokenSeq& x);

void save_detector(const std::string& path, const OodModel& model);
OodModel load_detector(const std::string& path);

// Rank-based AUROC of positives scoring above negatives (ties get half
// credit).
double auroc(const std::vector<double>& positives,
             const std::vector<double>& negatives);

}  // namespace rcu::ood
