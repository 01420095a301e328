#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <vector>

#include "cmam/tensor.hpp"

namespace cmam {

/// Class indices in 1..V; 0 is the CTC blank and never appears in a label.
using LabelSeq = std::vector<std::uint32_t>;

inline constexpr std::uint32_t kBlank = 0;

/// Minimum frame count for a label: its length plus the number of adjacent repeats.
std::size_t ctc_min_frames(const LabelSeq& label);

/// Negative log-likelihood of `label` under per-frame softmax of `logits` [T×C].
/// Throws InfeasibleAlignment when T < ctc_min_frames(label).
double ctc_nll(const Tensor& logits, const LabelSeq& label);

/// Differentiable version of ctc_nll recorded on the logits' tape.
Var ctc_loss(Var logits, const LabelSeq& label);

/// Exhaustive oracle: sums the probability of every length-T path that collapses
/// to `label`. Requires C^T ≤ 10^7. Throws InfeasibleAlignment when no path exists.
double ctc_brute_force(const Tensor& logits, const LabelSeq& label);

/// Collapses a frame-level path: merge adjacent repeats, then drop blanks.
LabelSeq collapse_path(std::span<const std::uint32_t> path);

/// Per-frame argmax (ties to the lower index) followed by collapse_path.
LabelSeq greedy_decode(const Tensor& logits);

struct EditCounts {
  std::size_t substitutions = 0;
  std::size_t deletions = 0;
  std::size_t insertions = 0;

  std::size_t total() const { return substitutions + deletions + insertions; }
  bool operator==(const EditCounts&) const = default;
};

/// Unit-cost Levenshtein alignment of hyp against ref. Equal-cost backtrace
/// choices prefer substitution, then deletion, then insertion.
EditCounts edit_ops(const LabelSeq& ref, const LabelSeq& hyp);

struct MetricReport {
  double cer = 0.0;
  double cr = 0.0;
  double ar = 0.0;
  std::size_t substitutions = 0;
  std::size_t deletions = 0;
  std::size_t insertions = 0;
  std::size_t ref_length = 0;

  bool operator==(const MetricReport&) const = default;
};

/// Corpus-level rates: edit counts summed over lines, divided by total reference length.
///   cer = (S+D+I)/N,  cr = (N−D−S)/N,  ar = (N−D−S−I)/N
MetricReport report(std::span<const LabelSeq> refs, std::span<const LabelSeq> hyps);

}  // namespace cmam
