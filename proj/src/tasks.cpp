#include "rcu/tasks.hpp"

#include <stdexcept>
#include <string>

namespace rcu::harness {

int domain_block_start(int domain) {
  return kFillerTokens + kStylePoolTokens + kBlockTokens * domain;
}

void validate_task_config(const TaskConfig& cfg) {
  if (cfg.num_requests < 1) {
    throw std::invalid_argument("tasks: need at least one request");
  }
  if (cfg.seq_len < 8) {
    throw std::invalid_argument(
        "tasks: sequence length must fit 4 markers + 1 confuser + 2 style "
        "tokens + filler (>= 8)");
  }
  const int num_domains = cfg.num_requests + 3;
  // last vocab slot is reserved for the detector's mask token
  if (domain_block_start(num_domains) > cfg.vocab_size - 1) {
    throw std::invalid_argument(
        "tasks: vocab of " + std::to_string(cfg.vocab_size) +
        " cannot host " + std::to_string(num_domains) +
        " domains plus the reserved mask token");
  }
  if (cfg.samples_per_request <= 0 || cfg.test_per_request <= 0 ||
      cfg.retained_samples <= 0 || cfg.utility_samples <= 0 ||
      cfg.pretrain_per_domain_class <= 0 || cfg.pretrain_noise <= 0) {
    throw std::invalid_argument("tasks: all sample counts must be positive");
  }
}

namespace {

// domain kinds, by position in the domain ordering
bool is_unlearn_domain(const TaskConfig& cfg, int domain) {
  return domain < cfg.num_requests;
}

toy::TokenSeq make_sample(const TaskConfig& cfg, int domain, int label,
                          Rng& rng) {
  toy::TokenSeq seq;
  seq.reserve(static_cast<std::size_t>(cfg.seq_len));
  const int block = domain_block_start(domain);

  // 4 markers of the labeled class
  for (int i = 0; i < 4; ++i) {
    seq.push_back(block + label);
  }
  // 1 confusing marker from another class of the same domain
  int other = static_cast<int>(rng.uniform_int(0, kContentClasses - 2));
  if (other >= label) ++other;
  seq.push_back(block + other);
  // 2 style tokens
  for (int i = 0; i < 2; ++i) {
    if (is_unlearn_domain(cfg, domain)) {
      seq.push_back(kFillerTokens +
                    static_cast<int>(rng.uniform_int(0, kStylePoolTokens - 1)));
    } else {
      seq.push_back(block + kContentClasses);  // the domain's own style token
    }
  }
  // filler for the rest
  while (static_cast<int>(seq.size()) < cfg.seq_len) {
    seq.push_back(static_cast<int>(rng.uniform_int(0, kFillerTokens - 1)));
  }
  rng.shuffle(seq);
  return seq;
}

// REFUSE-labeled noise. A third of it is pure filler; the rest carries one
// or two class markers (below the four a real sample carries) plus the same
// style tokens a real sample of that domain would have. Marker count is then
// the only feature separating "classify" from "refuse", which places the
// decision boundary at an evidence threshold rather than across feature
// space — the property that lets small attention shifts produce refusals.
toy::TokenSeq make_noise_sample(const TaskConfig& cfg, int index, Rng& rng) {
  toy::TokenSeq seq;
  seq.reserve(static_cast<std::size_t>(cfg.seq_len));
  static constexpr int kNoiseEvidence[3] = {0, 2, 3};
  const int markers = kNoiseEvidence[index % 3];  // below a real sample's 4
  if (markers > 0) {
    const int num_domains = cfg.num_requests + 3;
    const int domain = static_cast<int>(rng.uniform_int(0, num_domains - 1));
    const int label = static_cast<int>(rng.uniform_int(0, kContentClasses - 1));
    for (int i = 0; i < markers; ++i) {
      seq.push_back(domain_block_start(domain) + label);
    }
    for (int i = 0; i < 2; ++i) {
      if (is_unlearn_domain(cfg, domain)) {
        seq.push_back(kFillerTokens + static_cast<int>(rng.uniform_int(
                                          0, kStylePoolTokens - 1)));
      } else {
        seq.push_back(domain_block_start(domain) + kContentClasses);
      }
    }
  }
  while (static_cast<int>(seq.size()) < cfg.seq_len) {
    seq.push_back(static_cast<int>(rng.uniform_int(0, kFillerTokens - 1)));
  }
  rng.shuffle(seq);
  return seq;
}

toy::Dataset make_domain_dataset(const TaskConfig& cfg, int domain,
                                 int n_samples, Rng& rng) {
  toy::Dataset data;
  for (int i = 0; i < n_samples; ++i) {
    const int label = i % kContentClasses;  // balanced classes
    data.inputs.push_back(make_sample(cfg, domain, label, rng));
    data.labels.push_back(label);
  }
  return data;
}

}  // namespace

TaskSuite gen_tasks(std::uint64_t seed, const TaskConfig& cfg) {
  validate_task_config(cfg);
  Rng root(seed);

  TaskSuite suite;
  suite.num_classes = kContentClasses + 1;
  suite.refuse_label = kContentClasses;

  const int num_domains = cfg.num_requests + 3;
  const int retained_domain = cfg.num_requests;
  const int utility1_domain = cfg.num_requests + 1;
  const int utility2_domain = cfg.num_requests + 2;

  // pretraining: every domain plus REFUSE-labeled noise
  {
    Rng rng = root.child(0x100);
    for (int d = 0; d < num_domains; ++d) {
      const toy::Dataset part = make_domain_dataset(
          cfg, d, cfg.pretrain_per_domain_class * kContentClasses, rng);
      suite.pretrain.inputs.insert(suite.pretrain.inputs.end(),
                                   part.inputs.begin(), part.inputs.end());
      suite.pretrain.labels.insert(suite.pretrain.labels.end(),
                                   part.labels.begin(), part.labels.end());
    }
    for (int i = 0; i < cfg.pretrain_noise; ++i) {
      suite.pretrain.inputs.push_back(make_noise_sample(cfg, i, rng));
      suite.pretrain.labels.push_back(suite.refuse_label);
    }
  }

  for (int t = 0; t < cfg.num_requests; ++t) {
    Rng rng_train = root.child(0x200 + 2 * static_cast<std::uint64_t>(t));
    Rng rng_test = root.child(0x201 + 2 * static_cast<std::uint64_t>(t));
    suite.unlearn_train.push_back(
        make_domain_dataset(cfg, t, cfg.samples_per_request, rng_train));
    suite.unlearn_test.push_back(
        make_domain_dataset(cfg, t, cfg.test_per_request, rng_test));
  }

  {
    Rng rng = root.child(0x300);
    suite.retained =
        make_domain_dataset(cfg, retained_domain, cfg.retained_samples, rng);
  }
  {
    Rng rng = root.child(0x301);
    suite.utility1 =
        make_domain_dataset(cfg, utility1_domain, cfg.utility_samples, rng);
  }
  {
    Rng rng = root.child(0x302);
    suite.utility2 =
        make_domain_dataset(cfg, utility2_domain, cfg.utility_samples, rng);
  }
  return suite;
}

}  // namespace rcu::harness
