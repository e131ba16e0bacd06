#pragma once

// Synthetic sequence-classification tasks for the continual-unlearning
// experiments.
//
// The token space is carved into:
//   [0, 8)                         filler, shared by every domain
//   [8, 14)                        style pool, shared ONLY among unlearn
//                                  domains (the deliberate interference
//                                  channel between requests)
//   [14, 14 + 5 * num_domains)     per-domain blocks of 5 tokens:
//                                  4 class markers + 1 domain style token
//   vocab - 1                      reserved mask token (never emitted)
//
// A sample of domain d with class c is a fixed-length shuffled bag:
// 4 copies of marker(d, c), 1 confusing marker of another class, 2 style
// tokens (from the shared pool for unlearn domains, the domain's own style
// token otherwise), and filler for the rest. Noise samples are pure filler
// and are labeled REFUSE, which is what makes the REFUSE class reachable:
// it is the model's learned "no evidence" answer.
//
// Domains are ordered: unlearn domains 0..T-1, then the retained domain,
// then two utility domains. Their marker blocks are pairwise disjoint, so
// distributions differ in their token-emission parameters by construction.

#include "rcu/matrix.hpp"
#include "rcu/toymodel.hpp"

#include <cstdint>
#include <vector>

namespace rcu::harness {

struct TaskConfig {
  int vocab_size = 64;
  int seq_len = 12;
  int num_requests = 3;  // T
  int samples_per_request = 256;
  int test_per_request = 256;
  int retained_samples = 256;
  int utility_samples = 256;
  int pretrain_per_domain_class = 48;
  int pretrain_noise = 256;
};

struct TaskSuite {
  int num_classes = 5;   // 4 content classes + REFUSE
  int refuse_label = 4;
  toy::Dataset pretrain;
  std::vector<toy::Dataset> unlearn_train;  // one per request
  std::vector<toy::Dataset> unlearn_test;
  toy::Dataset retained;
  toy::Dataset utility1;
  toy::Dataset utility2;
};

// Number of content classes per domain (labels 0..3; REFUSE is label 4).
inline constexpr int kContentClasses = 4;
inline constexpr int kFillerTokens = 8;
inline constexpr int kStylePoolTokens = 6;
inline constexpr int kBlockTokens = 5;

// First token of a domain's marker block.
int domain_block_start(int domain);

// Throws std::invalid_argument when the vocabulary cannot host
// num_requests + 3 domains plus the reserved mask token.
void validate_task_config(const TaskConfig& cfg);

// Deterministic given (seed, cfg); same seed twice gives identical suites.
TaskSuite gen_tasks(std::uint64_t seed, const TaskConfig& cfg);

}  // namespace rcu::harness
