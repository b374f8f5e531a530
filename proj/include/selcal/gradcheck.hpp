#pragma once

#include <cstdint>
#include <span>
#include <string>

#include "selcal/calibrator.hpp"

namespace selcal {

struct FiniteDiffReport {
  double max_relative_error = 0.0;  // |a - b| / max(|a|, |b|, 1e-8)
  std::string worst_parameter;
  double worst_analytic = 0.0;
  double worst_numeric = 0.0;
  std::size_t compared = 0;  // entries checked by central differences
  // Entries the batch cannot reach (unused embedding rows, masked groups).
  // The loss is constant in them, so their analytic gradient must be exactly 0.
  std::size_t unreachable = 0;
  // Entries whose +-epsilon perturbation crosses a non-differentiable point
  // (ReLU boundary, selection flip, clamp, sign change of a soft-ECE bin gap).
  std::size_t skipped_kinks = 0;
};

// Token-granularity model with the classifier trained jointly. Every entry of
// every parameter block is covered; the forward pass is re-evaluated
// incrementally from cached intermediate stages.
FiniteDiffReport finite_diff_check(const PreparedCorpus& corpus, std::span<const std::size_t> batch_utterances,
                                   const ModelParams& params, const TrainConfig& cfg, double epsilon = 1e-4);

// Full re-evaluation through total_loss for at most `per_block` sampled
// entries of each block. Works for any LossOptions; kinks are detected from
// the disagreement of the one-sided slopes.
FiniteDiffReport finite_diff_check_sampled(const PreparedCorpus& corpus, std::span<const std::size_t> batch_utterances,
                                           const ModelParams& params, const TrainConfig& cfg, const LossOptions& opts,
                                           double epsilon, std::size_t per_block, std::uint64_t seed);

}  // namespace selcal
