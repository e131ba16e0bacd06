#include "rcu/toymodel.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <sstream>
#include <stdexcept>

namespace rcu::toy {

namespace {

constexpr const char* kWeightNames[3] = {"wq", "wk", "wv"};

std::string layer_id_of(int block, int which) {
  return "b" + std::to_string(block) + "." + kWeightNames[which];
}

// Parses "b<idx>.<wq|wk|wv>"; throws on anything else.
std::pair<int, int> parse_layer_id(const std::string& id, int num_blocks) {
  const auto dot = id.find('.');
  if (id.size() < 4 || id[0] != 'b' || dot == std::string::npos) {
    throw std::invalid_argument("unknown adapter layer id: " + id);
  }
  int block = -1;
  try {
    block = std::stoi(id.substr(1, dot - 1));
  } catch (const std::exception&) {
    throw std::invalid_argument("unknown adapter layer id: " + id);
  }
  const std::string name = id.substr(dot + 1);
  int which = -1;
  for (int i = 0; i < 3; ++i) {
    if (name == kWeightNames[i]) which = i;
  }
  if (block < 0 || block >= num_blocks || which < 0) {
    throw std::invalid_argument("adapter layer id out of range: " + id);
  }
  return {block, which};
}

Mat& block_weight(AttentionBlock& b, int which) {
  switch (which) {
    case 0: return b.wq;
    case 1: return b.wk;
    default: return b.wv;
  }
}

const Mat& block_weight(const AttentionBlock& b, int which) {
  switch (which) {
    case 0: return b.wq;
    case 1: return b.wk;
    default: return b.wv;
  }
}

void validate_tokens(const ToyAttentionModel& m,
                     std::span<const TokenSeq> inputs) {
  for (const auto& seq : inputs) {
    if (seq.empty()) {
      throw std::invalid_argument("forward: empty token sequence");
    }
    for (int t : seq) {
      if (t < 0 || t >= m.cfg.vocab_size) {
        throw std::invalid_argument("forward: token id " + std::to_string(t) +
                                    " outside vocab");
      }
    }
  }
}

}  // namespace

std::vector<std::string> ToyAttentionModel::adapted_layer_ids() const {
  std::vector<std::string> ids;
  for (int b = 0; b < cfg.num_blocks; ++b) {
    for (int w = 0; w < 3; ++w) {
      ids.push_back(layer_id_of(b, w));
    }
  }
  return ids;
}

const Mat& ToyAttentionModel::base_weight(const std::string& layer_id) const {
  const auto [b, w] = parse_layer_id(layer_id, cfg.num_blocks);
  return block_weight(blocks[static_cast<std::size_t>(b)], w);
}

std::uint64_t ToyAttentionModel::checksum() const {
  std::uint64_t h = matrix_checksum(embedding);
  for (const auto& b : blocks) {
    h = mix64(h ^ matrix_checksum(b.wq));
    h = mix64(h ^ matrix_checksum(b.wk));
    h = mix64(h ^ matrix_checksum(b.wv));
  }
  h = mix64(h ^ matrix_checksum(head));
  h = mix64(h ^ matrix_checksum(Mat(head_bias)));
  return h;
}

ToyAttentionModel make_model(const ModelConfig& cfg, Rng& rng) {
  if (cfg.vocab_size <= 0 || cfg.embed_dim <= 0 || cfg.num_blocks <= 0 ||
      cfg.num_classes < 2) {
    throw std::invalid_argument("make_model: invalid dimensions");
  }
  ToyAttentionModel m;
  m.cfg = cfg;
  m.embedding = rng.gaussian(cfg.embed_dim, cfg.vocab_size, cfg.embed_init);
  for (int b = 0; b < cfg.num_blocks; ++b) {
    AttentionBlock blk;
    blk.wq = rng.gaussian(cfg.embed_dim, cfg.embed_dim, cfg.attn_init);
    blk.wk = rng.gaussian(cfg.embed_dim, cfg.embed_dim, cfg.attn_init);
    blk.wv = rng.gaussian(cfg.embed_dim, cfg.embed_dim, cfg.attn_init);
    m.blocks.push_back(std::move(blk));
  }
  m.head = rng.gaussian(cfg.num_classes, cfg.embed_dim, cfg.head_init);
  m.head_bias = Vec::Zero(cfg.num_classes);
  return m;
}

void save_model(const std::string& path, const ToyAttentionModel& m) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) {
    throw std::runtime_error("save_model: cannot open " + path);
  }
  os << "rcu-model v1 " << m.cfg.vocab_size << ' ' << m.cfg.embed_dim << ' '
     << m.cfg.num_blocks << ' ' << m.cfg.num_classes << '\n';
  write_matrix(os, m.embedding);
  for (const auto& b : m.blocks) {
    write_matrix(os, b.wq);
    write_matrix(os, b.wk);
    write_matrix(os, b.wv);
  }
  write_matrix(os, m.head);
  write_matrix(os, Mat(m.head_bias));
  if (!os) {
    throw std::runtime_error("save_model: write failed for " + path);
  }
}

ToyAttentionModel load_model(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) {
    throw std::runtime_error("load_model: cannot open " + path);
  }
  std::string magic, version;
  ToyAttentionModel m;
  is >> magic >> version >> m.cfg.vocab_size >> m.cfg.embed_dim >>
      m.cfg.num_blocks >> m.cfg.num_classes;
  if (!is || magic != "rcu-model" || version != "v1") {
    throw std::runtime_error("load_model: bad header in " + path);
  }
  is.ignore(2, '\n');
  m.embedding = read_matrix(is);
  for (int b = 0; b < m.cfg.num_blocks; ++b) {
    AttentionBlock blk;
    blk.wq = read_matrix(is);
    blk.wk = read_matrix(is);
    blk.wv = read_matrix(is);
    m.blocks.push_back(std::move(blk));
  }
  m.head = read_matrix(is);
  m.head_bias = Vec(read_matrix(is).col(0));
  return m;
}

EffectiveWeights base_weights(const ToyAttentionModel& m) {
  EffectiveWeights eff;
  eff.blocks = m.blocks;
  return eff;
}

EffectiveWeights compose_requests(const ToyAttentionModel& m,
                                  std::span<const RequestUpdate> updates,
                                  UpdateMode mode, CompositionMode comp) {
  EffectiveWeights eff = base_weights(m);
  if (updates.empty()) {
    return eff;
  }

  if (mode == UpdateMode::additive) {
    // Baseline arm: plain additive updates; scaling control does not apply.
    for (const auto& u : updates) {
      for (const auto& p : *u.pairs) {
        const auto [b, w] = parse_layer_id(p.layer_id, m.cfg.num_blocks);
        Mat& slot = block_weight(eff.blocks[static_cast<std::size_t>(b)], w);
        slot = lora::additive_baseline(slot, lora::compose(p));
      }
    }
    return eff;
  }

  if (comp == CompositionMode::stacked) {
    for (const auto& u : updates) {
      if (u.beta == 0.0) continue;  // exact no-op by construction
      for (const auto& p : *u.pairs) {
        const auto [b, w] = parse_layer_id(p.layer_id, m.cfg.num_blocks);
        Mat& slot = block_weight(eff.blocks[static_cast<std::size_t>(b)], w);
        slot = lora::materialize(slot, lora::compose(p), u.beta);
      }
    }
    return eff;
  }

  // from_base: accumulate sum_s beta_s * B_s A_s per layer, apply once.
  std::map<std::string, Mat> accum;
  for (const auto& u : updates) {
    if (u.beta == 0.0) continue;
    for (const auto& p : *u.pairs) {
      parse_layer_id(p.layer_id, m.cfg.num_blocks);  // validate
      const Mat ba = lora::compose(p);
      auto it = accum.find(p.layer_id);
      if (it == accum.end()) {
        accum.emplace(p.layer_id, u.beta * ba);
      } else {
        it->second += u.beta * ba;
      }
    }
  }
  for (const auto& [id, sum_ba] : accum) {
    const auto [b, w] = parse_layer_id(id, m.cfg.num_blocks);
    Mat& slot = block_weight(eff.blocks[static_cast<std::size_t>(b)], w);
    slot = lora::materialize(slot, sum_ba, 1.0);
  }
  return eff;
}

// ---------------------------------------------------------------------------
// forward / backward
// ---------------------------------------------------------------------------

Mat forward_logprobs(const ToyAttentionModel& m, const EffectiveWeights& eff,
                     std::span<const TokenSeq> inputs, ForwardCache* cache) {
  if (eff.blocks.size() != m.blocks.size()) {
    throw std::invalid_argument("forward: effective weights block mismatch");
  }
  validate_tokens(m, inputs);
  const int d = m.cfg.embed_dim;
  const double scale = 1.0 / std::sqrt(static_cast<double>(d));
  const Eigen::Index n_class = m.head.rows();

  Mat logprobs(static_cast<Eigen::Index>(inputs.size()), n_class);
  if (cache) {
    cache->samples.assign(inputs.size(), SampleCache{});
  }

  for (std::size_t i = 0; i < inputs.size(); ++i) {
    const TokenSeq& seq = inputs[i];
    const Eigen::Index n = static_cast<Eigen::Index>(seq.size());
    Mat x(d, n);
    for (Eigen::Index j = 0; j < n; ++j) {
      x.col(j) = m.embedding.col(seq[static_cast<std::size_t>(j)]);
    }

    SampleCache sc;
    for (const auto& blk : eff.blocks) {
      BlockCache bc;
      bc.x = x;
      bc.q = blk.wq * x;
      bc.k = blk.wk * x;
      bc.v = blk.wv * x;
      Mat s = (bc.k.transpose() * bc.q) * scale;
      // column softmax
      bc.p = Mat(n, n);
      for (Eigen::Index c = 0; c < n; ++c) {
        const double mx = s.col(c).maxCoeff();
        Vec e = (s.col(c).array() - mx).exp();
        bc.p.col(c) = e / e.sum();
      }
      x = bc.v * bc.p;
      if (cache) sc.blocks.push_back(std::move(bc));
    }

    const Vec h = x.rowwise().mean();
    const Vec logits = m.head * h + m.head_bias;
    const double mx = logits.maxCoeff();
    const double lse = mx + std::log((logits.array() - mx).exp().sum());
    logprobs.row(static_cast<Eigen::Index>(i)) =
        (logits.array() - lse).matrix().transpose();

    if (cache) {
      sc.x_out = std::move(x);
      sc.h = h;
      cache->samples[i] = std::move(sc);
    }
  }
  return logprobs;
}

Mat forward_logprobs(const ToyAttentionModel& m,
                     std::span<const lora::LoraPair> adapters, double beta,
                     std::span<const TokenSeq> inputs, UpdateMode mode) {
  if (adapters.empty()) {
    return forward_logprobs(m, base_weights(m), inputs, nullptr);
  }
  if (beta < 0.0) {
    throw std::invalid_argument("forward: beta must be nonnegative");
  }
  std::vector<lora::LoraPair> pairs(adapters.begin(), adapters.end());
  RequestUpdate u{&pairs, beta};
  const EffectiveWeights eff = compose_requests(
      m, std::span<const RequestUpdate>(&u, 1), mode, CompositionMode::stacked);
  return forward_logprobs(m, eff, inputs, nullptr);
}

ParamGrads backward(const ToyAttentionModel& m, const EffectiveWeights& eff,
                    const ForwardCache& cache,
                    std::span<const TokenSeq> inputs, const Mat& d_logits) {
  if (cache.samples.size() != inputs.size() ||
      d_logits.rows() != static_cast<Eigen::Index>(inputs.size()) ||
      d_logits.cols() != m.head.rows()) {
    throw std::invalid_argument("backward: cache/input/gradient mismatch");
  }
  const int d = m.cfg.embed_dim;
  const double scale = 1.0 / std::sqrt(static_cast<double>(d));
  const std::size_t nb = m.blocks.size();

  ParamGrads g;
  g.d_embedding = Mat::Zero(d, m.cfg.vocab_size);
  g.d_blocks.resize(nb);
  for (auto& b : g.d_blocks) {
    b.wq = Mat::Zero(d, d);
    b.wk = Mat::Zero(d, d);
    b.wv = Mat::Zero(d, d);
  }
  g.d_head = Mat::Zero(m.head.rows(), m.head.cols());
  g.d_head_bias = Vec::Zero(m.head_bias.size());

  for (std::size_t i = 0; i < inputs.size(); ++i) {
    const SampleCache& sc = cache.samples[i];
    const Eigen::Index n = sc.x_out.cols();
    const Vec dl = d_logits.row(static_cast<Eigen::Index>(i)).transpose();

    g.d_head += dl * sc.h.transpose();
    g.d_head_bias += dl;
    const Vec dh = m.head.transpose() * dl;

    // mean pooling spreads the gradient uniformly over columns
    Mat dx = (dh / static_cast<double>(n)) *
             Eigen::RowVectorXd::Ones(n);

    for (std::size_t b = nb; b-- > 0;) {
      const BlockCache& bc = sc.blocks[b];
      const AttentionBlock& blk = eff.blocks[b];
      // x_{b+1} = v * p
      const Mat dv = dx * bc.p.transpose();
      const Mat dp = bc.v.transpose() * dx;
      // column-softmax Jacobian
      Mat ds(n, n);
      for (Eigen::Index c = 0; c < n; ++c) {
        const Vec p = bc.p.col(c);
        const Vec dpc = dp.col(c);
        const double inner = p.dot(dpc);
        ds.col(c) = p.cwiseProduct(dpc) - inner * p;
      }
      const Mat dq = bc.k * ds * scale;
      const Mat dk = bc.q * ds.transpose() * scale;

      g.d_blocks[b].wq += dq * bc.x.transpose();
      g.d_blocks[b].wk += dk * bc.x.transpose();
      g.d_blocks[b].wv += dv * bc.x.transpose();

      dx = blk.wq.transpose() * dq + blk.wk.transpose() * dk +
           blk.wv.transpose() * dv;
    }

    const TokenSeq& seq = inputs[i];
    for (Eigen::Index j = 0; j < static_cast<Eigen::Index>(seq.size()); ++j) {
      g.d_embedding.col(seq[static_cast<std::size_t>(j)]) += dx.col(j);
    }
  }
  return g;
}

// ---------------------------------------------------------------------------
// losses
// ---------------------------------------------------------------------------

CeLoss ce_unlearn_loss(const Mat& logprobs, const std::vector<int>& targets) {
  const Eigen::Index n = logprobs.rows();
  const Eigen::Index c = logprobs.cols();
  if (n == 0 || static_cast<std::size_t>(n) != targets.size()) {
    throw std::invalid_argument("ce_unlearn_loss: bad target count");
  }
  for (Eigen::Index i = 0; i < n; ++i) {
    const double lse = std::log(logprobs.row(i).array().exp().sum());
    if (std::abs(lse) > 1e-6) {
      throw std::invalid_argument(
          "ce_unlearn_loss: logprob row not normalized (log-sum-exp = " +
          std::to_string(lse) + ")");
    }
  }
  CeLoss out;
  out.d_logits = Mat::Zero(n, c);
  const double inv_n = 1.0 / static_cast<double>(n);
  for (Eigen::Index i = 0; i < n; ++i) {
    const int y = targets[static_cast<std::size_t>(i)];
    if (y < 0 || y >= c) {
      throw std::invalid_argument("ce_unlearn_loss: target out of range");
    }
    out.value -= logprobs(i, y) * inv_n;
    out.d_logits.row(i) = logprobs.row(i).array().exp() * inv_n;
    out.d_logits(i, y) -= inv_n;
  }
  return out;
}

OverallLoss overall_loss(std::span<const lora::LoraPair> pairs,
                         const std::map<std::string, lora::FrozenComposite>&
                             frozen_prev,
                         const Mat& logprobs, const std::vector<int>& y_prime,
                         const std::array<double, 3>& lambdas) {
  for (double l : lambdas) {
    if (l < 0.0 || !std::isfinite(l)) {
      throw std::invalid_argument("overall_loss: lambdas must be >= 0");
    }
  }
  OverallLoss out;
  out.d_b.reserve(pairs.size());
  out.d_a.reserve(pairs.size());
  for (const auto& p : pairs) {
    const lora::LossGrad sk = lora::skew_loss(p);
    const lora::FrozenComposite* prev = nullptr;
    if (!frozen_prev.empty()) {
      const auto it = frozen_prev.find(p.layer_id);
      if (it == frozen_prev.end()) {
        throw std::invalid_argument(
            "overall_loss: no frozen composite for layer " + p.layer_id);
      }
      prev = &it->second;
    }
    const lora::LossGrad pl = lora::plane_keeping_loss(p, prev);
    out.skew += sk.value;
    out.plane += pl.value;
    out.d_b.push_back(lambdas[0] * sk.d_b + lambdas[1] * pl.d_b);
    out.d_a.push_back(lambdas[0] * sk.d_a + lambdas[1] * pl.d_a);
  }
  const CeLoss ce = ce_unlearn_loss(logprobs, y_prime);
  out.ce = ce.value;
  out.d_logits = lambdas[2] * ce.d_logits;
  out.total =
      lambdas[0] * out.skew + lambdas[1] * out.plane + lambdas[2] * out.ce;
  return out;
}

// ---------------------------------------------------------------------------
// training
// ---------------------------------------------------------------------------

namespace {

struct PairMetrics {
  double skew_ratio_max = 0.0;
  double max_ba_entry = 0.0;
  double plane_overlap_sq = 0.0;
};

PairMetrics pair_metrics(std::span<const lora::LoraPair> pairs,
                         const std::map<std::string, lora::FrozenComposite>&
                             frozen_prev) {
  PairMetrics pm;
  for (const auto& p : pairs) {
    const Mat x = lora::compose(p);
    const double xn = x.squaredNorm();
    const double ratio =
        xn < 1e-30 ? 0.0 : (x + x.transpose()).squaredNorm() / xn;
    pm.skew_ratio_max = std::max(pm.skew_ratio_max, ratio);
    pm.max_ba_entry = std::max(pm.max_ba_entry, x.cwiseAbs().maxCoeff());
    const auto it = frozen_prev.find(p.layer_id);
    if (it != frozen_prev.end()) {
      pm.plane_overlap_sq +=
          lora::plane_keeping_loss(p, &it->second).value;
    }
  }
  return pm;
}

}  // namespace

TrainResult train_request(const ToyAttentionModel& m, const UnlearnBatch& batch,
                          const std::map<std::string, lora::FrozenComposite>&
                              frozen_prev,
                          const TrainConfig& cfg,
                          const EffectiveWeights* context) {
  if (batch.inputs.empty() || batch.inputs.size() != batch.y_prime.size()) {
    throw std::invalid_argument("train_request: empty or misaligned batch");
  }
  if (cfg.lr <= 0 || cfg.epochs <= 0 || cfg.batch_size <= 0 ||
      cfg.rank <= 0 || cfg.margin <= 0 || cfg.context_strength < 0 ||
      cfg.momentum < 0 ||
      cfg.momentum >= 1) {
    throw std::invalid_argument("train_request: invalid config");
  }
  const std::uint64_t base_checksum = m.checksum();

  Rng rng(cfg.seed);
  TrainResult res;
  const auto ids = m.adapted_layer_ids();
  for (std::size_t i = 0; i < ids.size(); ++i) {
    Rng layer_rng = rng.child(0x10 + i);
    res.pairs.push_back(lora::make_pair(m.cfg.embed_dim, cfg.rank, ids[i],
                                        layer_rng, cfg.a_init_scale));
  }

  res.plane_overlap_init =
      std::sqrt(pair_metrics(res.pairs, frozen_prev).plane_overlap_sq);

  // momentum buffers (stay zero when cfg.momentum == 0, i.e. plain GD)
  std::vector<Mat> vel_b;
  std::vector<Mat> vel_a;
  for (const lora::LoraPair& p : res.pairs) {
    vel_b.push_back(Mat::Zero(p.b.rows(), p.b.cols()));
    vel_a.push_back(Mat::Zero(p.a.rows(), p.a.cols()));
  }

  // Committed model state the new update composes onto.
  const EffectiveWeights ctx = context ? *context : base_weights(m);
  const auto ctx_weight = [&](const std::string& layer_id) -> const Mat& {
    const auto [b, w] = parse_layer_id(layer_id, m.cfg.num_blocks);
    return block_weight(ctx.blocks[static_cast<std::size_t>(b)], w);
  };
  const auto apply_own = [&](double scale) {
    EffectiveWeights eff = ctx;
    for (const lora::LoraPair& p : res.pairs) {
      const auto [b, w] = parse_layer_id(p.layer_id, m.cfg.num_blocks);
      Mat& slot = block_weight(eff.blocks[static_cast<std::size_t>(b)], w);
      slot = cfg.mode == UpdateMode::rotation
                 ? lora::materialize(slot, lora::compose(p), scale)
                 : lora::additive_baseline(slot, scale * lora::compose(p));
    }
    return eff;
  };

  const std::size_t n = batch.inputs.size();
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);

  int step = 0;
  Rng shuffle_rng = rng.child(0x5a);
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    shuffle_rng.shuffle(order);
    for (std::size_t start = 0; start < n;
         start += static_cast<std::size_t>(cfg.batch_size)) {
      const std::size_t stop =
          std::min(n, start + static_cast<std::size_t>(cfg.batch_size));
      std::vector<TokenSeq> bx;
      std::vector<int> by;
      bx.reserve(stop - start);
      by.reserve(stop - start);
      for (std::size_t k = start; k < stop; ++k) {
        bx.push_back(batch.inputs[order[k]]);
        by.push_back(batch.y_prime[order[k]]);
      }

      const EffectiveWeights eff = apply_own(1.0);
      ForwardCache cache;
      const Mat logprobs = forward_logprobs(m, eff, bx, &cache);
      OverallLoss loss =
          overall_loss(res.pairs, frozen_prev, logprobs, by, cfg.lambdas);
      if (!std::isfinite(loss.total)) {
        throw std::runtime_error("train_request: loss diverged at step " +
                                 std::to_string(step));
      }

      const ParamGrads g = backward(m, eff, cache, bx, loss.d_logits);
      for (std::size_t i = 0; i < res.pairs.size(); ++i) {
        lora::LoraPair& p = res.pairs[i];
        const auto [b, w] = parse_layer_id(p.layer_id, m.cfg.num_blocks);
        const Mat& g_eff =
            block_weight(g.d_blocks[static_cast<std::size_t>(b)], w);
        Mat d_ba;
        if (cfg.mode == UpdateMode::rotation) {
          // W_eff = (I + BA) W_ctx  =>  dL/d(BA) = dL/dW_eff * W_ctx^T
          d_ba = g_eff * ctx_weight(p.layer_id).transpose();
        } else {
          // W_eff = W_ctx + BA    =>  dL/d(BA) = dL/dW_eff
          d_ba = g_eff;
        }
        const Mat d_b = loss.d_b[i] + d_ba * p.a.transpose();
        const Mat d_a = loss.d_a[i] + p.b.transpose() * d_ba;
        vel_b[i] = cfg.momentum * vel_b[i] - cfg.lr * d_b;
        vel_a[i] = cfg.momentum * vel_a[i] - cfg.lr * d_a;
        p.b += vel_b[i];
        p.a += vel_a[i];
      }

      res.log.push_back(
          {step, loss.skew, loss.plane, loss.ce, loss.total});
      ++step;
    }
  }

  // The adapters ship at their raw trained scale; cfg.margin is an
  // inference-time gain on the composition strength (scaling the generator
  // scales every rotation angle by the same factor), so refusal learned at
  // full strength keeps holding at the partial strengths the detector
  // assigns.  Keeping the pairs raw also keeps the frozen composites the
  // next request trains against at the scale this request optimized.
  //
  // Final metrics on the full training batch at beta = 1 — the raw trained
  // strength of the new update, in the training context.  Inference-time
  // gains (margin, detector-assigned beta) are evaluated by the harness.
  const Mat lp = forward_logprobs(m, apply_own(1.0), batch.inputs, nullptr);
  std::size_t hits = 0;
  for (Eigen::Index i = 0; i < lp.rows(); ++i) {
    Eigen::Index arg;
    lp.row(i).maxCoeff(&arg);
    if (static_cast<int>(arg) == batch.y_prime[static_cast<std::size_t>(i)]) {
      ++hits;
    }
  }
  res.refusal_accuracy = static_cast<double>(hits) / static_cast<double>(n);

  const PairMetrics pm = pair_metrics(res.pairs, frozen_prev);
  res.skew_ratio_max = pm.skew_ratio_max;
  res.max_ba_entry = pm.max_ba_entry;
  res.plane_overlap_final = std::sqrt(pm.plane_overlap_sq);

  if (m.checksum() != base_checksum) {
    throw std::logic_error("train_request: base weights changed");
  }
  return res;
}

double evaluate(const ToyAttentionModel& m, const EffectiveWeights& eff,
                const Dataset& data) {
  if (data.inputs.empty() || data.inputs.size() != data.labels.size()) {
    throw std::domain_error("evaluate: empty or misaligned dataset");
  }
  const Mat lp = forward_logprobs(m, eff, data.inputs, nullptr);
  std::size_t hits = 0;
  for (Eigen::Index i = 0; i < lp.rows(); ++i) {
    Eigen::Index arg;
    lp.row(i).maxCoeff(&arg);
    if (static_cast<int>(arg) == data.labels[static_cast<std::size_t>(i)]) {
      ++hits;
    }
  }
  return static_cast<double>(hits) / static_cast<double>(data.inputs.size());
}

double evaluate(const ToyAttentionModel& m,
                std::span<const lora::LoraPair> adapters, double beta,
                const Dataset& data) {
  if (adapters.empty() || beta == 0.0) {
    return evaluate(m, base_weights(m), data);
  }
  std::vector<lora::LoraPair> pairs(adapters.begin(), adapters.end());
  RequestUpdate u{&pairs, beta};
  const EffectiveWeights eff =
      compose_requests(m, std::span<const RequestUpdate>(&u, 1),
                       UpdateMode::rotation, CompositionMode::stacked);
  return evaluate(m, eff, data);
}

// ---------------------------------------------------------------------------
// pretraining
// ---------------------------------------------------------------------------

PretrainResult pretrain(ToyAttentionModel& m, const Dataset& data,
                        const PretrainConfig& cfg) {
  if (data.inputs.empty() || data.inputs.size() != data.labels.size()) {
    throw std::invalid_argument("pretrain: empty or misaligned dataset");
  }
  if (cfg.lr <= 0 || cfg.epochs <= 0 || cfg.batch_size <= 0) {
    throw std::invalid_argument("pretrain: invalid config");
  }

  // momentum buffers
  Mat v_emb = Mat::Zero(m.embedding.rows(), m.embedding.cols());
  std::vector<AttentionBlock> v_blocks(m.blocks.size());
  for (std::size_t b = 0; b < m.blocks.size(); ++b) {
    v_blocks[b].wq = Mat::Zero(m.cfg.embed_dim, m.cfg.embed_dim);
    v_blocks[b].wk = Mat::Zero(m.cfg.embed_dim, m.cfg.embed_dim);
    v_blocks[b].wv = Mat::Zero(m.cfg.embed_dim, m.cfg.embed_dim);
  }
  Mat v_head = Mat::Zero(m.head.rows(), m.head.cols());
  Vec v_bias = Vec::Zero(m.head_bias.size());

  Rng rng(cfg.seed);
  const std::size_t n = data.inputs.size();
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);

  PretrainResult res;
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    rng.shuffle(order);
    for (std::size_t start = 0; start < n;
         start += static_cast<std::size_t>(cfg.batch_size)) {
      const std::size_t stop =
          std::min(n, start + static_cast<std::size_t>(cfg.batch_size));
      std::vector<TokenSeq> bx;
      std::vector<int> by;
      for (std::size_t k = start; k < stop; ++k) {
        bx.push_back(data.inputs[order[k]]);
        by.push_back(data.labels[order[k]]);
      }
      const EffectiveWeights eff = base_weights(m);
      ForwardCache cache;
      const Mat logprobs = forward_logprobs(m, eff, bx, &cache);
      const CeLoss ce = ce_unlearn_loss(logprobs, by);
      if (!std::isfinite(ce.value)) {
        throw std::runtime_error("pretrain: loss diverged at step " +
                                 std::to_string(res.steps));
      }
      const ParamGrads g = backward(m, eff, cache, bx, ce.d_logits);

      auto nudge = [&](Mat& w, Mat& vel, const Mat& grad) {
        vel = cfg.momentum * vel - cfg.lr * grad;
        w += vel;
      };
      nudge(m.embedding, v_emb, g.d_embedding);
      for (std::size_t b = 0; b < m.blocks.size(); ++b) {
        nudge(m.blocks[b].wq, v_blocks[b].wq, g.d_blocks[b].wq);
        nudge(m.blocks[b].wk, v_blocks[b].wk, g.d_blocks[b].wk);
        nudge(m.blocks[b].wv, v_blocks[b].wv, g.d_blocks[b].wv);
      }
      nudge(m.head, v_head, g.d_head);
      m.head_bias += (v_bias = cfg.momentum * v_bias - cfg.lr * g.d_head_bias);
      ++res.steps;
    }
  }

  const Mat lp = forward_logprobs(m, base_weights(m), data.inputs, nullptr);
  const CeLoss ce = ce_unlearn_loss(lp, data.labels);
  res.final_ce = ce.value;
  std::size_t hits = 0;
  for (Eigen::Index i = 0; i < lp.rows(); ++i) {
    Eigen::Index arg;
    lp.row(i).maxCoeff(&arg);
    if (static_cast<int>(arg) == data.labels[static_cast<std::size_t>(i)]) {
      ++hits;
    }
  }
  res.train_accuracy = static_cast<double>(hits) / static_cast<double>(n);
  return res;
}

}  // namespace rcu::toy
