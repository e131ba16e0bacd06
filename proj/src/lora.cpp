#include "rcu/lora.hpp"

#include <fstream>
#include <stdexcept>

namespace rcu::lora {

LoraPair make_pair(Eigen::Index dim, Eigen::Index rank, std::string layer_id,
                   Rng& rng, double a_scale) {
  if (dim <= 0 || rank <= 0 || rank > dim) {
    throw std::invalid_argument("make_pair: need 0 < rank <= dim");
  }
  LoraPair p;
  p.b = Mat::Zero(dim, rank);
  p.a = rng.gaussian(rank, dim, a_scale);
  p.layer_id = std::move(layer_id);
  return p;
}

Mat compose(const LoraPair& p) {
  if (p.b.cols() != p.a.rows() || p.b.rows() != p.a.cols()) {
    throw std::invalid_argument("compose: incompatible adapter shapes for " +
                                p.layer_id);
  }
  require_finite(p.b, "compose/B");
  require_finite(p.a, "compose/A");
  return p.b * p.a;
}

FrozenComposite::FrozenComposite(Mat ba, int request_index,
                                 std::string layer_id)
    : ba_(std::move(ba)),
      request_index_(request_index),
      layer_id_(std::move(layer_id)),
      checksum_(matrix_checksum(ba_)) {
  require_square(ba_, "FrozenComposite");
  require_finite(ba_, "FrozenComposite");
}

void FrozenComposite::verify_unchanged() const {
  if (matrix_checksum(ba_) != checksum_) {
    throw std::logic_error("FrozenComposite: frozen update for " + layer_id_ +
                           " was mutated after freezing");
  }
}

LossGrad skew_loss(const LoraPair& p) {
  const Mat x = compose(p);
  const Mat s = x + x.transpose();
  LossGrad out;
  out.value = s.squaredNorm();
  out.d_b = 4.0 * s * p.a.transpose();
  out.d_a = 4.0 * p.b.transpose() * s;
  return out;
}

RelativeRotation relative_rotation(const Mat& ba_t, const Mat& ba_prev) {
  require_square(ba_t, "relative_rotation");
  if (ba_t.rows() != ba_prev.rows() || ba_t.cols() != ba_prev.cols()) {
    throw std::invalid_argument("relative_rotation: shape mismatch");
  }
  RelativeRotation out;
  out.delta =
      Mat::Identity(ba_t.rows(), ba_t.cols()) + ba_t - ba_prev;
  out.discrepancy =
      (out.delta - (Mat::Identity(ba_t.rows(), ba_t.cols()) + ba_t - ba_prev))
          .norm();
  return out;
}

LossGrad plane_keeping_loss(const LoraPair& p, const FrozenComposite* prev) {
  LossGrad out;
  if (prev == nullptr) {
    out.value = 0.0;
    out.d_b = Mat::Zero(p.b.rows(), p.b.cols());
    out.d_a = Mat::Zero(p.a.rows(), p.a.cols());
    return out;
  }
  const Mat& pr = prev->ba();
  if (pr.rows() != p.dim()) {
    throw std::invalid_argument("plane_keeping_loss: dimension mismatch for " +
                                p.layer_id);
  }
  const Mat x = compose(p);
  const Mat delta = relative_rotation(x, pr).delta;
  const Mat m = delta * pr;  // (I + X - P) P
  out.value = m.squaredNorm();
  const Mat mpt = m * pr.transpose();
  out.d_b = 2.0 * mpt * p.a.transpose();
  out.d_a = 2.0 * p.b.transpose() * mpt;
  return out;
}

Mat materialize(const Mat& w, const Mat& ba, double beta) {
  require_square(ba, "materialize");
  if (ba.rows() != w.rows()) {
    throw std::invalid_argument("materialize: update/weight shape mismatch");
  }
  if (!std::isfinite(beta)) {
    throw std::invalid_argument("materialize: beta must be finite");
  }
  if (beta == 0.0) {
    return w;  // exact no-op: callers rely on bitwise base behaviour
  }
  return w + beta * (ba * w);
}

Mat additive_baseline(const Mat& w, const Mat& ba) {
  require_square(ba, "additive_baseline");
  if (ba.rows() != w.rows()) {
    throw std::invalid_argument(
        "additive_baseline: update/weight shape mismatch");
  }
  return w + ba;
}

// ---------------------------------------------------------------------------
// checkpoint IO: text header line, then the binary matrix container for each
// B and A in order.
// ---------------------------------------------------------------------------

void save_adapters(const std::string& path, const AdapterCheckpoint& ckpt) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) {
    throw std::runtime_error("save_adapters: cannot open " + path);
  }
  os << "rcu-adapters v1 " << ckpt.request_index << ' ' << ckpt.lambdas[0]
     << ' ' << ckpt.lambdas[1] << ' ' << ckpt.lambdas[2] << ' '
     << ckpt.pairs.size() << '\n';
  for (const auto& p : ckpt.pairs) {
    os << p.layer_id << '\n';
    write_matrix(os, p.b);
    write_matrix(os, p.a);
  }
  if (!os) {
    throw std::runtime_error("save_adapters: write failed for " + path);
  }
}

AdapterCheckpoint load_adapters(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) {
    throw std::runtime_error("load_adapters: cannot open " + path);
  }
  std::string magic, version;
  AdapterCheckpoint ckpt;
  std::size_t count = 0;
  is >> magic >> version >> ckpt.request_index >> ckpt.lambdas[0] >>
      ckpt.lambdas[1] >> ckpt.lambdas[2] >> count;
  if (!is || magic != "rcu-adapters" || version != "v1") {
    throw std::runtime_error("load_adapters: bad header in " + path);
  }
  is.ignore(2, '\n');
  for (std::size_t i = 0; i < count; ++i) {
    LoraPair p;
    std::getline(is, p.layer_id);
    if (!is || p.layer_id.empty()) {
      throw std::runtime_error("load_adapters: truncated layer id");
    }
    p.b = read_matrix(is);
    p.a = read_matrix(is);
    ckpt.pairs.push_back(std::move(p));
  }
  return ckpt;
}

}  // namespace rcu::lora
