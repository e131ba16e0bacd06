#pragma once

// Low-rank adapter pairs whose product BA is steered toward the space of
// skew-symmetric generators, plus the losses that do the steering and the
// update-composition rules that apply an adapter to a frozen weight.
//
// Core quantities, for an adapter pair (B, A) with product X = BA:
//
//   skew loss        L_skew  = ||X + X^T||_F^2
//   plane-keeping    L_axes  = ||(I + X_t - X_{t-1}) * X_{t-1}||_F^2
//   rotation update  W_eff   = (I + beta * X) * W
//   additive update  W_eff   = W + X          (plain additive baseline used
//                                              by the no-rotation ablation)
//
// The plane-keeping loss pushes the relative update of request t to act
// trivially on the subspace the previous request's update lives on, which is
// what keeps consecutive edits from tearing up each other's planes.

#include "rcu/matrix.hpp"

#include <array>
#include <optional>
#include <string>
#include <vector>

namespace rcu::lora {

struct LoraPair {
  Mat b;                 // dim x rank, initialized to zero
  Mat a;                 // rank x dim, random init
  std::string layer_id;  // e.g. "b0.wq"

  Eigen::Index dim() const { return b.rows(); }
  Eigen::Index rank() const { return b.cols(); }
};

// B = 0, A ~ N(0, a_scale^2): the initial update BA is exactly zero, so a
// fresh adapter is a no-op until trained.
LoraPair make_pair(Eigen::Index dim, Eigen::Index rank, std::string layer_id,
                   Rng& rng, double a_scale);

// BA with shape validation.
Mat compose(const LoraPair& p);

// Immutable snapshot of a finished request's composed update, used as the
// frozen reference while training the next request.
class FrozenComposite {
 public:
  FrozenComposite(Mat ba, int request_index, std::string layer_id);

  const Mat& ba() const { return ba_; }
  int request_index() const { return request_index_; }
  const std::string& layer_id() const { return layer_id_; }

  // Integrity check support: checksum taken at construction.
  std::uint64_t checksum() const { return checksum_; }
  void verify_unchanged() const;  // throws std::logic_error on mutation

 private:
  Mat ba_;
  int request_index_;
  std::string layer_id_;
  std::uint64_t checksum_;
};

struct LossGrad {
  double value = 0.0;
  Mat d_b;
  Mat d_a;
};

// L = ||BA + (BA)^T||_F^2 and its exact gradients:
//   dL/dB = 4 S A^T,  dL/dA = 4 B^T S,  with S = BA + (BA)^T.
LossGrad skew_loss(const LoraPair& p);

// Relative update between consecutive requests:
//   Delta = I + X_t - X_{t-1}.
// `discrepancy` is ||Delta - (I + X_t - X_{t-1})||_F, recomputed on the
// returned value as a self-check (always  ~0; kept because it documents the
// identity the trainer relies on).
struct RelativeRotation {
  Mat delta;
  double discrepancy = 0.0;
};
RelativeRotation relative_rotation(const Mat& ba_t, const Mat& ba_prev);

// L = ||(I + BA - P) P||_F^2 with P = previous composite (frozen, no
// gradient). Gradients:
//   dL/dB = 2 M P^T A^T,  dL/dA = 2 B^T M P^T,  M = (I + BA - P) P.
// With no previous request (prev == nullptr) the loss is identically zero
// and the gradients are zero-shaped.
LossGrad plane_keeping_loss(const LoraPair& p, const FrozenComposite* prev);

// (I + beta * BA) * W — the scaled rotation update.
Mat materialize(const Mat& w, const Mat& ba, double beta);

// W + BA — the plain additive update used by the no-rotation-control
// ablation arm.
Mat additive_baseline(const Mat& w, const Mat& ba);

// -----------------------------------------------------------------------
// adapter checkpoint container
// -----------------------------------------------------------------------

struct AdapterCheckpoint {
  int request_index = 0;
  std::array<double, 3> lambdas{};  // loss weights the adapters were trained with
  std::vector<LoraPair> pairs;
};

void save_adapters(const std::string& path, const AdapterCheckpoint& ckpt);
AdapterCheckpoint load_adapters(const std::string& path);

}  // namespace rcu::lora
