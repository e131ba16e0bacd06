#include "rcu/ood.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <numbers>
#include <numeric>
#include <sstream>
#include <stdexcept>

namespace rcu::ood {

// ---------------------------------------------------------------------------
// encoder
// ---------------------------------------------------------------------------

Encoder make_encoder(const EncoderConfig& cfg, Rng& rng) {
  if (cfg.vocab_size <= 0 || cfg.feature_dim <= 0 || cfg.num_layers <= 0) {
    throw std::invalid_argument("make_encoder: invalid dimensions");
  }
  if (cfg.mask_token < 0 || cfg.mask_token >= cfg.vocab_size) {
    throw std::invalid_argument("make_encoder: mask token outside vocab");
  }
  Encoder e;
  e.cfg = cfg;
  e.embedding = rng.gaussian(cfg.feature_dim, cfg.vocab_size, cfg.embed_init);
  for (int l = 0; l < cfg.num_layers; ++l) {
    e.w.push_back(
        rng.gaussian(cfg.feature_dim, cfg.feature_dim, cfg.layer_init));
    e.bias.push_back(Vec::Zero(cfg.feature_dim));
  }
  e.mlm_head = rng.gaussian(cfg.vocab_size, cfg.feature_dim, cfg.head_init);
  e.mlm_bias = Vec::Zero(cfg.vocab_size);
  return e;
}

EncoderCache encode(const Encoder& enc, const TokenSeq& seq) {
  if (seq.empty()) {
    throw std::invalid_argument("encode: empty sequence");
  }
  const Eigen::Index n = static_cast<Eigen::Index>(seq.size());
  EncoderCache c;
  c.x0.resize(enc.cfg.feature_dim, n);
  for (Eigen::Index j = 0; j < n; ++j) {
    const int t = seq[static_cast<std::size_t>(j)];
    if (t < 0 || t >= enc.cfg.vocab_size) {
      throw std::invalid_argument("encode: token outside vocab");
    }
    c.x0.col(j) = enc.embedding.col(t);
  }
  Mat x = c.x0;
  for (std::size_t l = 0; l < enc.w.size(); ++l) {
    Mat z = enc.w[l] * x;
    z.colwise() += enc.bias[l];
    x = z.array().tanh().matrix();
    c.acts.push_back(x);
    c.features.push_back(x.rowwise().mean());
  }
  return c;
}

std::vector<Vec> encode_features(const Encoder& enc, const TokenSeq& seq) {
  return encode(enc, seq).features;
}

void EncoderGrads::setZero(const Encoder& enc) {
  d_embedding = Mat::Zero(enc.embedding.rows(), enc.embedding.cols());
  d_w.clear();
  d_bias.clear();
  for (std::size_t l = 0; l < enc.w.size(); ++l) {
    d_w.push_back(Mat::Zero(enc.w[l].rows(), enc.w[l].cols()));
    d_bias.push_back(Vec::Zero(enc.bias[l].size()));
  }
  d_mlm_head = Mat::Zero(enc.mlm_head.rows(), enc.mlm_head.cols());
  d_mlm_bias = Vec::Zero(enc.mlm_bias.size());
}

void EncoderGrads::accumulate(const EncoderGrads& other) {
  d_embedding += other.d_embedding;
  for (std::size_t l = 0; l < d_w.size(); ++l) {
    d_w[l] += other.d_w[l];
    d_bias[l] += other.d_bias[l];
  }
  d_mlm_head += other.d_mlm_head;
  d_mlm_bias += other.d_mlm_bias;
}

void EncoderGrads::scale(double s) {
  d_embedding *= s;
  for (std::size_t l = 0; l < d_w.size(); ++l) {
    d_w[l] *= s;
    d_bias[l] *= s;
  }
  d_mlm_head *= s;
  d_mlm_bias *= s;
}

void encoder_backward(const Encoder& enc, const TokenSeq& seq,
                      const EncoderCache& cache,
                      const std::vector<Vec>& d_features,
                      const Mat& d_last_acts, EncoderGrads& grads) {
  const std::size_t num_layers = enc.w.size();
  if (d_features.size() != num_layers) {
    throw std::invalid_argument("encoder_backward: feature tap count");
  }
  const Eigen::Index n = cache.x0.cols();
  const double inv_n = 1.0 / static_cast<double>(n);

  auto tap = [&](std::size_t l) -> Mat {
    if (d_features[l].size() == 0) {
      return Mat::Zero(enc.cfg.feature_dim, n);
    }
    return (d_features[l] * inv_n) * Eigen::RowVectorXd::Ones(n);
  };

  Mat dx = tap(num_layers - 1);
  if (d_last_acts.size() != 0) {
    dx += d_last_acts;
  }
  for (std::size_t l = num_layers; l-- > 0;) {
    const Mat& act = cache.acts[l];
    const Mat dz =
        (dx.array() * (1.0 - act.array().square())).matrix();
    const Mat& prev = (l == 0) ? cache.x0 : cache.acts[l - 1];
    grads.d_w[l] += dz * prev.transpose();
    grads.d_bias[l] += dz.rowwise().sum();
    dx = enc.w[l].transpose() * dz;
    if (l > 0) {
      dx += tap(l - 1);
    }
  }
  for (Eigen::Index j = 0; j < n; ++j) {
    grads.d_embedding.col(seq[static_cast<std::size_t>(j)]) += dx.col(j);
  }
}

// ---------------------------------------------------------------------------
// losses
// ---------------------------------------------------------------------------

UaLoss ua_loss(const std::vector<Mat>& layer_features) {
  if (layer_features.empty()) {
    throw std::invalid_argument("ua_loss: no layers");
  }
  UaLoss out;
  for (const Mat& z : layer_features) {
    const Eigen::Index n = z.rows();
    const Eigen::Index d = z.cols();
    if (n < 2) {
      throw std::invalid_argument("ua_loss: need at least 2 samples");
    }
    Mat zhat(n, d);
    Vec norms(n);
    for (Eigen::Index i = 0; i < n; ++i) {
      const double nm = z.row(i).norm();
      if (nm < 1e-12) {
        throw std::runtime_error("ua_loss: zero-norm feature row");
      }
      norms(i) = nm;
      zhat.row(i) = z.row(i) / nm;
    }
    const double denom = static_cast<double>(n - 1);
    const Mat gram =
        (zhat.transpose() * zhat) / denom - Mat::Identity(d, d);
    const double inv_d2 = 1.0 / (static_cast<double>(d) * static_cast<double>(d));
    out.value += inv_d2 * gram.squaredNorm();

    // d/dZhat of (1/d^2)||Zhat^T Zhat/(n-1) - I||_F^2 = 4/(d^2 (n-1)) Zhat G
    const Mat d_zhat = (4.0 * inv_d2 / denom) * zhat * gram;
    Mat d_z(n, d);
    for (Eigen::Index i = 0; i < n; ++i) {
      const Vec zh = zhat.row(i).transpose();
      const Vec dzh = d_zhat.row(i).transpose();
      d_z.row(i) = ((dzh - zh.dot(dzh) * zh) / norms(i)).transpose();
    }
    out.d_features.push_back(std::move(d_z));
  }
  return out;
}

MaskedView make_masked_view(const TokenSeq& seq, double mask_fraction,
                            int mask_token, Rng& rng) {
  if (seq.empty()) {
    throw std::invalid_argument("make_masked_view: empty sequence");
  }
  if (mask_fraction <= 0.0 || mask_fraction >= 1.0) {
    throw std::invalid_argument("make_masked_view: fraction must be in (0,1)");
  }
  const int n = static_cast<int>(seq.size());
  const int k = std::max(
      1, static_cast<int>(std::floor(mask_fraction * static_cast<double>(n))));
  std::vector<int> idx(seq.size());
  std::iota(idx.begin(), idx.end(), 0);
  rng.shuffle(idx);
  MaskedView v;
  v.tokens = seq;
  v.positions.assign(idx.begin(), idx.begin() + k);
  std::sort(v.positions.begin(), v.positions.end());
  for (int pos : v.positions) {
    v.originals.push_back(seq[static_cast<std::size_t>(pos)]);
    v.tokens[static_cast<std::size_t>(pos)] = mask_token;
  }
  return v;
}

CelLoss cel_loss_from_features(
    const std::vector<std::vector<Vec>>& anchor_features,
    const std::vector<std::vector<Vec>>& key_features) {
  const std::size_t nb = anchor_features.size();
  if (nb < 2 || key_features.size() != nb) {
    throw std::invalid_argument(
        "cel_loss: need a batch of at least 2 aligned anchor/key samples");
  }
  const std::size_t num_layers = anchor_features.front().size();

  CelLoss out;
  out.d_features.assign(nb, std::vector<Vec>(num_layers));
  for (std::size_t i = 0; i < nb; ++i) {
    for (std::size_t l = 0; l < num_layers; ++l) {
      const Vec& a = anchor_features[i][l];
      // dot-product logits against every key
      Vec logits(static_cast<Eigen::Index>(nb));
      for (std::size_t j = 0; j < nb; ++j) {
        logits(static_cast<Eigen::Index>(j)) = a.dot(key_features[j][l]);
      }
      const double mx = logits.maxCoeff();
      Vec delta = (logits.array() - mx).exp();
      delta /= delta.sum();

      double entropy = 0.0;
      for (Eigen::Index j = 0; j < delta.size(); ++j) {
        if (delta(j) > 0.0) entropy -= delta(j) * std::log(delta(j));
      }
      out.value += entropy;

      // dH/d(logit_j) = delta_j * (-log delta_j - H)
      Vec d_anchor = Vec::Zero(a.size());
      for (std::size_t j = 0; j < nb; ++j) {
        const double dj = delta(static_cast<Eigen::Index>(j));
        if (dj <= 0.0) continue;
        const double d_logit = dj * (-std::log(dj) - entropy);
        d_anchor += d_logit * key_features[j][l];
      }
      out.d_features[i][l] = std::move(d_anchor);
    }
  }
  return out;
}

MlmLoss mlm_loss(const Encoder& enc, const EncoderCache& cache,
                 const MaskedView& view, EncoderGrads& head_grads) {
  if (view.positions.empty()) {
    throw std::domain_error("mlm_loss: no masked positions");
  }
  const Mat& last = cache.acts.back();
  MlmLoss out;
  out.d_last_acts = Mat::Zero(last.rows(), last.cols());
  const double inv_m = 1.0 / static_cast<double>(view.positions.size());
  for (std::size_t k = 0; k < view.positions.size(); ++k) {
    const Eigen::Index j = view.positions[k];
    const int target = view.originals[k];
    const Vec a = last.col(j);
    Vec logits = enc.mlm_head * a + enc.mlm_bias;
    const double mx = logits.maxCoeff();
    const double lse = mx + std::log((logits.array() - mx).exp().sum());
    out.value -= (logits(target) - lse) * inv_m;

    Vec d_logits = ((logits.array() - lse).exp() * inv_m).matrix();
    d_logits(target) -= inv_m;
    head_grads.d_mlm_head += d_logits * a.transpose();
    head_grads.d_mlm_bias += d_logits;
    out.d_last_acts.col(j) += enc.mlm_head.transpose() * d_logits;
  }
  return out;
}

// ---------------------------------------------------------------------------
// Gaussian mixture
// ---------------------------------------------------------------------------

namespace {

double normal_cdf(double x, double mean, double stddev) {
  const double z = (x - mean) / stddev;
  return 0.5 * std::erfc(-z / std::numbers::sqrt2);
}

double normal_pdf(double x, double mean, double stddev) {
  const double z = (x - mean) / stddev;
  return std::exp(-0.5 * z * z) /
         (stddev * std::sqrt(2.0 * std::numbers::pi));
}

}  // namespace

double GaussianMixture1D::cdf(double x) const {
  const double p0 = normal_cdf(x, mean[0], stddev[0]);
  const double p1 = normal_cdf(x, mean[1], stddev[1]);
  // When both components saturate to the same tail value (exactly 0 or
  // exactly 1 far outside the support), return it directly: the weighted sum
  // w0*p + w1*p can land one ulp away from p when w0 + w1 != 1 in floating
  // point, and downstream salience needs the tails to collapse exactly.
  if (p0 == p1) return p0;
  return weight[0] * p0 + weight[1] * p1;
}

double GaussianMixture1D::pdf(double x) const {
  return weight[0] * normal_pdf(x, mean[0], stddev[0]) +
         weight[1] * normal_pdf(x, mean[1], stddev[1]);
}

double GaussianMixture1D::log_likelihood(std::span<const double> xs) const {
  double ll = 0.0;
  for (double x : xs) {
    ll += std::log(std::max(pdf(x), 1e-300));
  }
  return ll;
}

GaussianMixture1D fit_mixture_em(const std::vector<double>& values) {
  if (values.size() < 16) {
    throw std::invalid_argument("fit_mixture_em: need at least 16 values");
  }
  const double n = static_cast<double>(values.size());
  const double mean = std::accumulate(values.begin(), values.end(), 0.0) / n;
  double var = 0.0;
  for (double v : values) var += (v - mean) * (v - mean);
  var /= n;
  if (var < 1e-24) {
    throw std::invalid_argument("fit_mixture_em: degenerate (zero-variance) input");
  }
  const double sd = std::sqrt(var);

  std::vector<double> sorted = values;
  std::sort(sorted.begin(), sorted.end());
  auto quant = [&sorted](double q) {
    const double pos = q * static_cast<double>(sorted.size() - 1);
    const std::size_t lo = static_cast<std::size_t>(pos);
    const std::size_t hi = std::min(lo + 1, sorted.size() - 1);
    const double frac = pos - static_cast<double>(lo);
    return sorted[lo] * (1.0 - frac) + sorted[hi] * frac;
  };
  const double sigma_floor = std::max(1e-6 * sd, 1e-12);

  const std::pair<double, double> starts[] = {
      {quant(0.25), quant(0.75)},
      {quant(0.10), quant(0.90)},
      {quant(0.40), quant(0.60)},
      {mean - sd, mean + sd},
  };

  GaussianMixture1D best;
  double best_ll = -std::numeric_limits<double>::infinity();
  for (const auto& [m1, m2] : starts) {
    GaussianMixture1D g;
    g.weight[0] = g.weight[1] = 0.5;
    g.mean[0] = m1;
    g.mean[1] = m2;
    g.stddev[0] = g.stddev[1] = std::max(sd * 0.5, sigma_floor);

    double prev_ll = -std::numeric_limits<double>::infinity();
    for (int iter = 0; iter < 200; ++iter) {
      // E step
      double sum_r0 = 0.0, sum_r1 = 0.0;
      double sum_x0 = 0.0, sum_x1 = 0.0;
      double sum_xx0 = 0.0, sum_xx1 = 0.0;
      for (double x : values) {
        const double p0 =
            std::max(g.weight[0] * normal_pdf(x, g.mean[0], g.stddev[0]),
                     1e-300);
        const double p1 =
            std::max(g.weight[1] * normal_pdf(x, g.mean[1], g.stddev[1]),
                     1e-300);
        const double r0 = p0 / (p0 + p1);
        const double r1 = 1.0 - r0;
        sum_r0 += r0;
        sum_r1 += r1;
        sum_x0 += r0 * x;
        sum_x1 += r1 * x;
        sum_xx0 += r0 * x * x;
        sum_xx1 += r1 * x * x;
      }
      // M step
      g.weight[0] = sum_r0 / n;
      g.weight[1] = sum_r1 / n;
      if (sum_r0 > 1e-12) {
        g.mean[0] = sum_x0 / sum_r0;
        g.stddev[0] = std::sqrt(
            std::max(sum_xx0 / sum_r0 - g.mean[0] * g.mean[0], 0.0));
      }
      if (sum_r1 > 1e-12) {
        g.mean[1] = sum_x1 / sum_r1;
        g.stddev[1] = std::sqrt(
            std::max(sum_xx1 / sum_r1 - g.mean[1] * g.mean[1], 0.0));
      }
      g.stddev[0] = std::max(g.stddev[0], sigma_floor);
      g.stddev[1] = std::max(g.stddev[1], sigma_floor);

      const double ll = g.log_likelihood(values);
      if (std::abs(ll - prev_ll) < 1e-10 * std::max(1.0, std::abs(ll))) {
        prev_ll = ll;
        break;
      }
      prev_ll = ll;
    }
    if (prev_ll > best_ll) {
      best_ll = prev_ll;
      best = g;
    }
  }
  return best;
}

// ---------------------------------------------------------------------------
// scoring stages
// ---------------------------------------------------------------------------

Vec score_vector(const OodModel& model, const TokenSeq& x, double gamma_w) {
  if (!model.fitted) {
    throw std::logic_error("score_vector: detector not fitted");
  }
  const std::vector<Vec> feats = encode_features(model.encoder, x);
  const std::size_t num_layers = feats.size();
  Vec s(static_cast<Eigen::Index>(num_layers));
  for (std::size_t l = 0; l < num_layers; ++l) {
    const Vec diff = feats[l] - model.mu[l];
    const Vec z = model.sigma_chol[l]
                      .triangularView<Eigen::Lower>()
                      .solve(diff);
    const double mahal_sq = z.squaredNorm();

    double max_cos = -1.0;
    const double fn = feats[l].norm();
    const Mat& bank = model.id_features[l];
    if (fn >= 1e-300 && bank.cols() > 0) {
      for (Eigen::Index c = 0; c < bank.cols(); ++c) {
        const double bn = bank.col(c).norm();
        if (bn < 1e-300) continue;
        max_cos = std::max(max_cos, feats[l].dot(bank.col(c)) / (fn * bn));
      }
    } else {
      max_cos = 0.0;
    }
    s(static_cast<Eigen::Index>(l)) = mahal_sq + gamma_w * (-max_cos);
  }
  return s;
}

Vec score_vector(const OodModel& model, const TokenSeq& x) {
  return score_vector(model, x, model.gamma_w);
}

std::pair<Vec, double> fit_hypersphere(const std::vector<Vec>& scores,
                                       double quantile) {
  if (scores.size() < 8) {
    throw std::invalid_argument("fit_hypersphere: need at least 8 vectors");
  }
  if (quantile <= 0.0 || quantile > 1.0) {
    throw std::invalid_argument("fit_hypersphere: quantile must be in (0,1]");
  }
  Vec center = Vec::Zero(scores.front().size());
  for (const Vec& s : scores) {
    if (s.size() != center.size()) {
      throw std::invalid_argument("fit_hypersphere: inconsistent dimensions");
    }
    center += s;
  }
  center /= static_cast<double>(scores.size());

  std::vector<double> dists;
  dists.reserve(scores.size());
  for (const Vec& s : scores) {
    dists.push_back((s - center).norm());
  }
  std::sort(dists.begin(), dists.end());
  const std::size_t n = dists.size();
  std::size_t idx = static_cast<std::size_t>(
      std::ceil(quantile * static_cast<double>(n)));
  idx = std::min(std::max<std::size_t>(idx, 1), n) - 1;
  return {center, dists[idx]};
}

double boundary_distance(const Vec& s, const Vec& center, double radius) {
  if (s.size() != center.size()) {
    throw std::invalid_argument("boundary_distance: dimension mismatch");
  }
  if (radius < 0.0) {
    throw std::invalid_argument("boundary_distance: negative radius");
  }
  return (s - center).norm() - radius;
}

double combined_score_from_distance(const OodModel& model, double d_h) {
  const double p = model.mixture.cdf(d_h);
  const double p_mirror = model.mixture.cdf(2.0 * model.d0 - d_h);
  const double raw = 1.0 - std::max(p, p_mirror) + std::min(p, p_mirror);
  return std::clamp(raw, 0.0, 1.0);
}

double combined_score_from_vector(const OodModel& model, const Vec& s) {
  return combined_score_from_distance(
      model, boundary_distance(s, model.center, model.radius));
}

double combined_score(const OodModel& model, const TokenSeq& x) {
  return combined_score_from_vector(model, score_vector(model, x));
}

// ---------------------------------------------------------------------------
// training + fitting
// ---------------------------------------------------------------------------

namespace {

void sgd_step(Encoder& enc, const EncoderGrads& g, double lr) {
  enc.embedding -= lr * g.d_embedding;
  for (std::size_t l = 0; l < enc.w.size(); ++l) {
    enc.w[l] -= lr * g.d_w[l];
    enc.bias[l] -= lr * g.d_bias[l];
  }
  enc.mlm_head -= lr * g.d_mlm_head;
  enc.mlm_bias -= lr * g.d_mlm_bias;
}

void ema_update(Encoder& key, const Encoder& enc, double momentum) {
  const double a = momentum, b = 1.0 - momentum;
  key.embedding = a * key.embedding + b * enc.embedding;
  for (std::size_t l = 0; l < enc.w.size(); ++l) {
    key.w[l] = a * key.w[l] + b * enc.w[l];
    key.bias[l] = a * key.bias[l] + b * enc.bias[l];
  }
  key.mlm_head = a * key.mlm_head + b * enc.mlm_head;
  key.mlm_bias = a * key.mlm_bias + b * enc.mlm_bias;
}

}  // namespace

OodModel train_detector(const std::vector<TokenSeq>& inputs,
                        const DetectorConfig& cfg) {
  const std::size_t n_total = inputs.size();
  const std::size_t n_used = static_cast<std::size_t>(
      std::llround(cfg.alpha * static_cast<double>(n_total)));
  if (n_used < 8 || n_total - n_used < 16) {
    throw std::invalid_argument(
        "train_detector: too few inputs for the alpha split (need >= 8 for "
        "fitting and >= 16 for calibration)");
  }
  if (cfg.batch_size < 2) {
    throw std::invalid_argument("train_detector: batch size must be >= 2");
  }

  Rng rng(cfg.seed);
  std::vector<std::size_t> order(n_total);
  std::iota(order.begin(), order.end(), 0);
  rng.shuffle(order);
  std::vector<TokenSeq> used, cal;
  for (std::size_t i = 0; i < n_total; ++i) {
    (i < n_used ? used : cal).push_back(inputs[order[i]]);
  }

  OodModel model;
  Rng init_rng = rng.child(0x11);
  model.encoder = make_encoder(cfg.enc, init_rng);
  model.key_encoder = model.encoder;
  model.gamma_w = cfg.gamma_w;

  // ---- encoder training on the used split ----
  std::vector<std::size_t> idx(used.size());
  std::iota(idx.begin(), idx.end(), 0);
  Rng epoch_rng = rng.child(0x22);
  Rng mask_rng = rng.child(0x33);
  int step = 0;
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    epoch_rng.shuffle(idx);
    for (std::size_t start = 0; start < idx.size();
         start += static_cast<std::size_t>(cfg.batch_size)) {
      const std::size_t stop = std::min(
          idx.size(), start + static_cast<std::size_t>(cfg.batch_size));
      if (stop - start < 2) break;  // entropy term needs a real batch

      const std::size_t bsz = stop - start;
      std::vector<const TokenSeq*> batch;
      for (std::size_t k = start; k < stop; ++k) {
        batch.push_back(&used[idx[k]]);
      }

      // anchor (masked) and clean views
      std::vector<MaskedView> views;
      std::vector<EncoderCache> anchor_caches, clean_caches;
      std::vector<std::vector<Vec>> anchor_feats, key_feats;
      for (const TokenSeq* seq : batch) {
        views.push_back(make_masked_view(*seq, cfg.mask_fraction,
                                         cfg.enc.mask_token, mask_rng));
        anchor_caches.push_back(encode(model.encoder, views.back().tokens));
        anchor_feats.push_back(anchor_caches.back().features);
        clean_caches.push_back(encode(model.encoder, *seq));
        key_feats.push_back(encode_features(model.key_encoder, *seq));
      }

      EncoderGrads grads;
      grads.setZero(model.encoder);

      const CelLoss cel = cel_loss_from_features(anchor_feats, key_feats);

      double mlm_total = 0.0;
      std::vector<Mat> mlm_taps(bsz);
      {
        EncoderGrads head_grads;
        head_grads.setZero(model.encoder);
        for (std::size_t i = 0; i < bsz; ++i) {
          const MlmLoss ml =
              mlm_loss(model.encoder, anchor_caches[i], views[i], head_grads);
          mlm_total += ml.value;
          mlm_taps[i] = ml.d_last_acts;
        }
        head_grads.scale(1.0 / static_cast<double>(bsz));
        grads.accumulate(head_grads);
      }
      mlm_total /= static_cast<double>(bsz);

      double ua_total = 0.0;
      std::vector<std::vector<Vec>> ua_taps(
          bsz, std::vector<Vec>(model.encoder.w.size()));
      if (cfg.use_alignment_loss) {
        std::vector<Mat> layer_feats;
        for (std::size_t l = 0; l < model.encoder.w.size(); ++l) {
          Mat z(static_cast<Eigen::Index>(bsz), cfg.enc.feature_dim);
          for (std::size_t i = 0; i < bsz; ++i) {
            z.row(static_cast<Eigen::Index>(i)) =
                clean_caches[i].features[l].transpose();
          }
          layer_feats.push_back(std::move(z));
        }
        const UaLoss ua = ua_loss(layer_feats);
        ua_total = ua.value;
        for (std::size_t i = 0; i < bsz; ++i) {
          for (std::size_t l = 0; l < model.encoder.w.size(); ++l) {
            ua_taps[i][l] =
                ua.d_features[l].row(static_cast<Eigen::Index>(i)).transpose();
          }
        }
      }

      const double total = cel.value + mlm_total + ua_total;
      if (!std::isfinite(total)) {
        throw std::runtime_error("train_detector: loss diverged at step " +
                                 std::to_string(step));
      }

      const double inv_b = 1.0 / static_cast<double>(bsz);
      for (std::size_t i = 0; i < bsz; ++i) {
        // anchor view: contrastive feature taps + masked-token tap
        encoder_backward(model.encoder, views[i].tokens, anchor_caches[i],
                         cel.d_features[i], mlm_taps[i] * inv_b, grads);
        if (cfg.use_alignment_loss) {
          // clean view: decorrelation taps only
          encoder_backward(model.encoder, *batch[i], clean_caches[i],
                           ua_taps[i], Mat(), grads);
        }
      }

      sgd_step(model.encoder, grads, cfg.lr);
      ema_update(model.key_encoder, model.encoder, cfg.key_momentum);
      ++step;
    }
  }

  // ---- per-layer stats + stored features on the used split ----
  const std::size_t num_layers = model.encoder.w.size();
  std::vector<Mat> feats_per_layer(num_layers);
  for (std::size_t l = 0; l < num_layers; ++l) {
    feats_per_layer[l].resize(cfg.enc.feature_dim,
                              static_cast<Eigen::Index>(used.size()));
  }
  for (std::size_t i = 0; i < used.size(); ++i) {
    const auto f = encode_features(model.encoder, used[i]);
    for (std::size_t l = 0; l < num_layers; ++l) {
      feats_per_layer[l].col(static_cast<Eigen::Index>(i)) = f[l];
    }
  }
  for (std::size_t l = 0; l < num_layers; ++l) {
    const Mat& fl = feats_per_layer[l];
    const Vec mu = fl.rowwise().mean();
    const Mat centered = fl.colwise() - mu;
    Mat sigma = (centered * centered.transpose()) /
                static_cast<double>(used.size() - 1);
    double reg = cfg.sigma_reg * sigma.trace() /
                 static_cast<double>(cfg.enc.feature_dim);
    if (!(reg > 0.0)) reg = cfg.sigma_reg;
    Eigen::LLT<Mat> llt;
    for (int attempt = 0; attempt < 8; ++attempt) {
      llt.compute(sigma + reg * Mat::Identity(sigma.rows(), sigma.cols()));
      if (llt.info() == Eigen::Success) break;
      reg *= 10.0;
    }
    if (llt.info() != Eigen::Success) {
      throw std::runtime_error(
          "train_detector: covariance not positive definite after "
          "regularization");
    }
    model.mu.push_back(mu);
    model.sigma_chol.push_back(llt.matrixL());
    model.id_features.push_back(fl);
  }
  model.fitted = true;  // scoring stages below use the partial fit

  // ---- hypersphere over ID score vectors ----
  std::vector<Vec> id_scores;
  for (const auto& seq : used) {
    id_scores.push_back(score_vector(model, seq, cfg.gamma_w));
  }
  auto [center, radius] = fit_hypersphere(id_scores, cfg.quantile);
  model.center = center;
  model.radius = radius;

  double d0 = 0.0;
  for (const Vec& s : id_scores) {
    d0 += boundary_distance(s, model.center, model.radius);
  }
  model.d0 = d0 / static_cast<double>(id_scores.size());

  // ---- mixture calibration on the held-out split ----
  std::vector<double> cal_dists;
  for (const auto& seq : cal) {
    cal_dists.push_back(boundary_distance(
        score_vector(model, seq, cfg.gamma_w), model.center, model.radius));
  }
  model.mixture = fit_mixture_em(cal_dists);
  return model;
}

// ---------------------------------------------------------------------------
// serialization
// ---------------------------------------------------------------------------

namespace {

void write_encoder(std::ostream& os, const Encoder& e) {
  os << e.cfg.vocab_size << ' ' << e.cfg.feature_dim << ' ' << e.cfg.num_layers
     << ' ' << e.cfg.mask_token << '\n';
  write_matrix(os, e.embedding);
  for (std::size_t l = 0; l < e.w.size(); ++l) {
    write_matrix(os, e.w[l]);
    write_matrix(os, Mat(e.bias[l]));
  }
  write_matrix(os, e.mlm_head);
  write_matrix(os, Mat(e.mlm_bias));
}

Encoder read_encoder(std::istream& is) {
  Encoder e;
  is >> e.cfg.vocab_size >> e.cfg.feature_dim >> e.cfg.num_layers >>
      e.cfg.mask_token;
  if (!is) {
    throw std::runtime_error("load_detector: bad encoder header");
  }
  is.ignore(2, '\n');
  e.embedding = read_matrix(is);
  for (int l = 0; l < e.cfg.num_layers; ++l) {
    e.w.push_back(read_matrix(is));
    e.bias.push_back(Vec(read_matrix(is).col(0)));
  }
  e.mlm_head = read_matrix(is);
  e.mlm_bias = Vec(read_matrix(is).col(0));
  return e;
}

}  // namespace

void save_detector(const std::string& path, const OodModel& model) {
  if (!model.fitted) {
    throw std::logic_error("save_detector: model not fitted");
  }
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) {
    throw std::runtime_error("save_detector: cannot open " + path);
  }
  os << "rcu-detector v1\n";
  write_encoder(os, model.encoder);
  for (std::size_t l = 0; l < model.mu.size(); ++l) {
    write_matrix(os, Mat(model.mu[l]));
    write_matrix(os, model.sigma_chol[l]);
    write_matrix(os, model.id_features[l]);
  }
  write_matrix(os, Mat(model.center));
  Mat scalars(1, 9);
  scalars << model.radius, model.d0, model.gamma_w, model.mixture.weight[0],
      model.mixture.mean[0], model.mixture.stddev[0], model.mixture.weight[1],
      model.mixture.mean[1], model.mixture.stddev[1];
  write_matrix(os, scalars);
  if (!os) {
    throw std::runtime_error("save_detector: write failed for " + path);
  }
}

OodModel load_detector(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) {
    throw std::runtime_error("load_detector: cannot open " + path);
  }
  std::string magic, version;
  is >> magic >> version;
  if (magic != "rcu-detector" || version != "v1") {
    throw std::runtime_error("load_detector: bad header in " + path);
  }
  is.ignore(2, '\n');
  OodModel model;
  model.encoder = read_encoder(is);
  model.key_encoder = model.encoder;
  for (int l = 0; l < model.encoder.cfg.num_layers; ++l) {
    model.mu.push_back(Vec(read_matrix(is).col(0)));
    model.sigma_chol.push_back(read_matrix(is));
    model.id_features.push_back(read_matrix(is));
  }
  model.center = Vec(read_matrix(is).col(0));
  const Mat scalars = read_matrix(is);
  if (scalars.rows() != 1 || scalars.cols() != 9) {
    throw std::runtime_error("load_detector: bad scalar block");
  }
  model.radius = scalars(0, 0);
  model.d0 = scalars(0, 1);
  model.gamma_w = scalars(0, 2);
  model.mixture.weight[0] = scalars(0, 3);
  model.mixture.mean[0] = scalars(0, 4);
  model.mixture.stddev[0] = scalars(0, 5);
  model.mixture.weight[1] = scalars(0, 6);
  model.mixture.mean[1] = scalars(0, 7);
  model.mixture.stddev[1] = scalars(0, 8);
  model.fitted = true;
  return model;
}

double auroc(const std::vector<double>& positives,
             const std::vector<double>& negatives) {
  if (positives.empty() || negatives.empty()) {
    throw std::invalid_argument("auroc: both classes must be non-empty");
  }
  double wins = 0.0;
  for (double p : positives) {
    for (double n : negatives) {
      if (p > n) {
        wins += 1.0;
      } else if (p == n) {
        wins += 0.5;
      }
    }
  }
  return wins / (static_cast<double>(positives.size()) *
                 static_cast<double>(negatives.size()));
}

}  // namespace rcu::ood
