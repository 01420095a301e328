#include "cmam/ctc.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>

namespace cmam {

namespace {

constexpr double kNegInf = -std::numeric_limits<double>::infinity();

double log_add(double a, double b) {
  if (a == kNegInf) return b;
  if (b == kNegInf) return a;
  const double m = std::max(a, b);
  return m + std::log1p(std::exp(-std::abs(a - b)));
}

void check_logits(const Tensor& logits, const LabelSeq& label) {
  if (logits.rank() != 2 || logits.shape[0] == 0 || logits.shape[1] < 2) {
    throw ShapeError("ctc: logits must be [T×C] with T ≥ 1 and C ≥ 2, got " + shape_str(logits.shape));
  }
  for (std::uint32_t c : label) {
    if (c == kBlank || c >= logits.shape[1]) {
      throw std::invalid_argument("ctc: label index " + std::to_string(c) + " outside 1.." +
                                  std::to_string(logits.shape[1] - 1));
    }
  }
  const std::size_t need = ctc_min_frames(label);
  if (logits.shape[0] < need) {
    throw InfeasibleAlignment("ctc: label needs at least " + std::to_string(need) + " frames, got " +
                              std::to_string(logits.shape[0]));
  }
}

std::vector<double> log_softmax(const Tensor& logits) {
  const std::size_t T = logits.shape[0], C = logits.shape[1];
  std::vector<double> out(T * C);
  for (std::size_t t = 0; t < T; ++t) {
    const double* row = logits.values.data() + t * C;
    const double mx = *std::max_element(row, row + C);
    double total = 0.0;
    for (std::size_t c = 0; c < C; ++c) total += std::exp(row[c] - mx);
    const double lse = mx + std::log(total);
    for (std::size_t c = 0; c < C; ++c) out[t * C + c] = row[c] - lse;
  }
  return out;
}

// Blank-interleaved label: -, l1, -, l2, ..., lL, -
std::vector<std::uint32_t> extended(const LabelSeq& label) {
  std::vector<std::uint32_t> ext(2 * label.size() + 1, kBlank);
  for (std::size_t i = 0; i < label.size(); ++i) ext[2 * i + 1] = label[i];
  return ext;
}

struct Lattice {
  std::vector<double> lp;     // log-softmax [T×C]
  std::vector<double> alpha;  // [T×S], includes the emission at t
  std::size_t T = 0, C = 0, S = 0;
  std::vector<std::uint32_t> ext;
  double log_likelihood = 0.0;
};

Lattice forward_lattice(const Tensor& logits, const LabelSeq& label) {
  check_logits(logits, label);
  Lattice l;
  l.T = logits.shape[0];
  l.C = logits.shape[1];
  l.ext = extended(label);
  l.S = l.ext.size();
  l.lp = log_softmax(logits);
  l.alpha.assign(l.T * l.S, kNegInf);
  const auto& ext = l.ext;
  l.alpha[0] = l.lp[ext[0]];
  if (l.S > 1) l.alpha[1] = l.lp[ext[1]];
  for (std::size_t t = 1; t < l.T; ++t) {
    const double* prev = l.alpha.data() + (t - 1) * l.S;
    double* cur = l.alpha.data() + t * l.S;
    for (std::size_t s = 0; s < l.S; ++s) {
      double acc = prev[s];
      if (s >= 1) acc = log_add(acc, prev[s - 1]);
      if (s >= 2 && ext[s] != kBlank && ext[s] != ext[s - 2]) acc = log_add(acc, prev[s - 2]);
      cur[s] = acc == kNegInf ? kNegInf : acc + l.lp[t * l.C + ext[s]];
    }
  }
  const double* last = l.alpha.data() + (l.T - 1) * l.S;
  l.log_likelihood = l.S > 1 ? log_add(last[l.S - 1], last[l.S - 2]) : last[0];
  return l;
}

}  // namespace

std::size_t ctc_min_frames(const LabelSeq& label) {
  std::size_t repeats = 0;
  for (std::size_t i = 1; i < label.size(); ++i) repeats += label[i] == label[i - 1];
  return label.size() + repeats;
}

double ctc_nll(const Tensor& logits, const LabelSeq& label) {
  const Lattice l = forward_lattice(logits, label);
  if (l.log_likelihood == kNegInf) throw InfeasibleAlignment("ctc: label has zero probability");
  return -l.log_likelihood;
}

Var ctc_loss(Var logits, const LabelSeq& label) {
  Lattice lat = forward_lattice(logits.tensor(), label);
  if (lat.log_likelihood == kNegInf) throw InfeasibleAlignment("ctc: label has zero probability");
  const auto il = logits.id();
  return logits.tape().record({1}, {-lat.log_likelihood}, {logits}, [il, lat = std::move(lat)](Tape& t, std::uint32_t self) {
    const double g = t.out_grad(self)[0];
    const std::size_t T = lat.T, C = lat.C, S = lat.S;
    const auto& ext = lat.ext;
    std::vector<double> beta(T * S, kNegInf);
    double* last = beta.data() + (T - 1) * S;
    last[S - 1] = lat.lp[(T - 1) * C + ext[S - 1]];
    if (S > 1) last[S - 2] = lat.lp[(T - 1) * C + ext[S - 2]];
    for (std::size_t k = T - 1; k-- > 0;) {
      const double* next = beta.data() + (k + 1) * S;
      double* cur = beta.data() + k * S;
      for (std::size_t s = 0; s < S; ++s) {
        double acc = next[s];
        if (s + 1 < S) acc = log_add(acc, next[s + 1]);
        if (s + 2 < S && ext[s] != kBlank && ext[s + 2] != ext[s]) acc = log_add(acc, next[s + 2]);
        cur[s] = acc == kNegInf ? kNegInf : acc + lat.lp[k * C + ext[s]];
      }
    }
    auto d = t.grad_buffer(il);
    std::vector<double> occupancy(C);
    for (std::size_t k = 0; k < T; ++k) {
      std::fill(occupancy.begin(), occupancy.end(), kNegInf);
      for (std::size_t s = 0; s < S; ++s) {
        occupancy[ext[s]] = log_add(occupancy[ext[s]], lat.alpha[k * S + s] + beta[k * S + s]);
      }
      for (std::size_t c = 0; c < C; ++c) {
        const double lp = lat.lp[k * C + c];
        const double posterior =
            occupancy[c] == kNegInf ? 0.0 : std::exp(occupancy[c] - lp - lat.log_likelihood);
        d[k * C + c] += g * (std::exp(lp) - posterior);
      }
    }
  });
}

double ctc_brute_force(const Tensor& logits, const LabelSeq& label) {
  if (logits.rank() != 2 || logits.shape[0] == 0 || logits.shape[1] < 2) {
    throw ShapeError("ctc_brute_force: logits must be [T×C], got " + shape_str(logits.shape));
  }
  const std::size_t T = logits.shape[0], C = logits.shape[1];
  double space = 1.0;
  for (std::size_t t = 0; t < T; ++t) space *= static_cast<double>(C);
  if (space > 1e7) {
    throw std::invalid_argument("ctc_brute_force: search space " + std::to_string(static_cast<long long>(space)) +
                                " exceeds 10^7 paths");
  }
  for (std::uint32_t c : label) {
    if (c == kBlank || c >= C) throw std::invalid_argument("ctc_brute_force: label index out of range");
  }
  std::vector<double> prob(T * C);
  {
    const std::vector<double> lp = log_softmax(logits);
    for (std::size_t i = 0; i < lp.size(); ++i) prob[i] = std::exp(lp[i]);
  }
  std::vector<std::uint32_t> path(T, 0);
  double total = 0.0;
  std::size_t matches = 0;
  for (;;) {
    if (collapse_path(path) == label) {
      double p = 1.0;
      for (std::size_t t = 0; t < T; ++t) p *= prob[t * C + path[t]];
      total += p;
      ++matches;
    }
    std::size_t pos = T;
    while (pos > 0 && ++path[pos - 1] == C) path[--pos] = 0;
    if (pos == 0) break;
  }
  if (matches == 0) {
    throw InfeasibleAlignment("ctc_brute_force: no length-" + std::to_string(T) + " path collapses to the label");
  }
  return -std::log(total);
}

LabelSeq collapse_path(std::span<const std::uint32_t> path) {
  LabelSeq out;
  std::uint32_t prev = kBlank;
  for (std::size_t t = 0; t < path.size(); ++t) {
    const std::uint32_t c = path[t];
    if (c != kBlank && (t == 0 || c != prev)) out.push_back(c);
    prev = c;
  }
  return out;
}

LabelSeq greedy_decode(const Tensor& logits) {
  if (logits.rank() != 2) throw ShapeError("greedy_decode: logits must be [T×C], got " + shape_str(logits.shape));
  const std::size_t T = logits.shape[0], C = logits.shape[1];
  std::vector<std::uint32_t> path(T);
  for (std::size_t t = 0; t < T; ++t) {
    const double* row = logits.values.data() + t * C;
    path[t] = static_cast<std::uint32_t>(std::max_element(row, row + C) - row);
  }
  return collapse_path(path);
}

EditCounts edit_ops(const LabelSeq& ref, const LabelSeq& hyp) {
  const std::size_t n = ref.size(), m = hyp.size();
  std::vector<std::size_t> dp((n + 1) * (m + 1));
  auto at = [m](std::size_t i, std::size_t j) { return i * (m + 1) + j; };
  for (std::size_t i = 0; i <= n; ++i) dp[at(i, 0)] = i;
  for (std::size_t j = 0; j <= m; ++j) dp[at(0, j)] = j;
  for (std::size_t i = 1; i <= n; ++i) {
    for (std::size_t j = 1; j <= m; ++j) {
      const std::size_t diag = dp[at(i - 1, j - 1)] + (ref[i - 1] != hyp[j - 1]);
      dp[at(i, j)] = std::min({diag, dp[at(i - 1, j)] + 1, dp[at(i, j - 1)] + 1});
    }
  }
  EditCounts counts;
  std::size_t i = n, j = m;
  while (i > 0 || j > 0) {
    const std::size_t here = dp[at(i, j)];
    if (i > 0 && j > 0 && here == dp[at(i - 1, j - 1)] + (ref[i - 1] != hyp[j - 1])) {
      counts.substitutions += ref[i - 1] != hyp[j - 1];
      --i;
      --j;
    } else if (i > 0 && here == dp[at(i - 1, j)] + 1) {
      ++counts.deletions;
      --i;
    } else {
      ++counts.insertions;
      --j;
    }
  }
  return counts;
}

MetricReport report(std::span<const LabelSeq> refs, std::span<const LabelSeq> hyps) {
  if (refs.size() != hyps.size()) {
    throw std::invalid_argument("report: " + std::to_string(refs.size()) + " references but " +
                                std::to_string(hyps.size()) + " hypotheses");
  }
  MetricReport r;
  for (std::size_t k = 0; k < refs.size(); ++k) {
    const EditCounts e = edit_ops(refs[k], hyps[k]);
    r.substitutions += e.substitutions;
    r.deletions += e.deletions;
    r.insertions += e.insertions;
    r.ref_length += refs[k].size();
  }
  if (r.ref_length == 0) throw std::invalid_argument("report: reference corpus has no characters");
  const double N = static_cast<double>(r.ref_length);
  const double S = static_cast<double>(r.substitutions), D = static_cast<double>(r.deletions),
               I = static_cast<double>(r.insertions);
  r.cer = (S + D + I) / N;
  r.cr = (N - D - S) / N;
  r.ar = (N - D - S - I) / N;
  return r;
}

}  // namespace cmam
