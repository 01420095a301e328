#pragma once

// Multi-way associative memory: content-based reads and three-strategy gated
// writes (dynamic allocation, last-read, content) over an N×D slot matrix.

#include <cstddef>
#include <vector>

#include "cmam/tensor.hpp"

namespace cmam {

struct MemoryConfig {
  std::size_t slots = 16;  // N
  std::size_t width = 16;  // D
  std::size_t heads = 4;   // R

  /// R·(D+2) + 3·D + 5
  std::size_t interface_width() const { return heads * (width + 2) + 3 * width + 5; }
  bool operator==(const MemoryConfig&) const = default;
};

inline constexpr double kCosineEpsilon = 1e-8;

/// Memory-control emissions after normalisation.
///
/// Raw layout, in order:
///   read keys R×D | read strengths R | free gates R | write key D |
///   write strength 1 | write value D | erase D | write mode 3 | write gate 1
/// Strengths go through oneplus; free gates, erase and write gate through a
/// sigmoid; the write mode through a softmax. Keys and the write value are
/// used as emitted.
struct InterfaceVector {
  Var read_keys;        // [R×D]
  Var read_strengths;   // [R], each ≥ 1
  Var free_gates;       // [R] in [0,1]
  Var write_key;        // [D]
  Var write_strength;   // [1] ≥ 1
  Var write_value;      // [D]
  Var erase;            // [D] in [0,1]
  Var write_mode;       // [3] on the simplex: allocation, last-read, content
  Var write_gate;       // [1] in [0,1]
};

InterfaceVector parse_interface(const MemoryConfig& config, Var raw);

/// The same fields as plain tensors, used for packing raw vectors by field.
struct InterfaceFields {
  Tensor read_keys;
  Tensor read_strengths;
  Tensor free_gates;
  Tensor write_key;
  Tensor write_strength;
  Tensor write_value;
  Tensor erase;
  Tensor write_mode;
  Tensor write_gate;

  bool operator==(const InterfaceFields&) const = default;
};

/// Field-wise layout only; no activations are applied in either direction.
Tensor pack_interface(const MemoryConfig& config, const InterfaceFields& fields);
InterfaceFields unpack_interface(const MemoryConfig& config, const Tensor& raw);
/// Raw vector whose parse reproduces `activated` (gates strictly inside (0,1),
/// strengths strictly above 1, mode strictly positive).
Tensor serialize_interface(const MemoryConfig& config, const InterfaceFields& activated);

struct MemoryState {
  Var memory;         // M [N×D]
  Var usage;          // u [N]
  Var read_weights;   // w^r [R×N]
  Var write_weight;   // w^w [N]
  Var read_values;    // r [R×D]
};

/// All-zero memory, usage and weightings; read values set to `initial_reads`
/// when given, zeros otherwise.
MemoryState initial_memory_state(Tape& tape, const MemoryConfig& config, Var initial_reads = {});

/// Cosine similarity of every key against every memory row, norms computed as
/// sqrt(|x|² + ε) so zero rows score 0 and the map stays smooth.
/// keys [K×D] -> [K×N]; a single key [D] -> [N].
Var cosine_similarity(Var memory, Var keys);

/// softmax over slots of cosine·strength. keys [D] with strength [1] -> [N];
/// keys [K×D] with strengths [K] -> [K×N].
Var content_weights(Var memory, Var keys, Var strengths);

struct ReadResult {
  Var values;   // [R×D], row j = Σ_i w^{rj}(i)·M(i)
  Var weights;  // [R×N]
};

ReadResult memory_read(Var memory, const InterfaceVector& iface);

struct RetentionUsage {
  Var retention;  // ψ [N]
  Var usage;      // u [N]
};

/// ψ = Π_j (1 − f^j·w^{rj}_{t−1});  u = (u_{t−1} + w^w_{t−1} − u_{t−1}∘w^w_{t−1}) ∘ ψ
RetentionUsage retention_and_usage(Var free_gates, Var prev_read_weights, Var prev_usage,
                                   Var prev_write_weight);

/// Slot indices ordered by ascending usage, ties by lower index.
std::vector<std::size_t> usage_order(std::span<const double> usage);

/// a[Φ[k]] = (1 − u[Φ[k]]) · Π_{i<k} u[Φ[i]]. The ordering Φ is held constant
/// when differentiating.
Var allocation(Var usage);

/// w^w = g^w · [g^{alc}(0)·a + g^{alc}(1)·l + g^{alc}(2)·c^w], l = mean of the
/// previous read weightings.
Var write_weight(Var allocation_weights, Var prev_read_weights, Var content_write, Var write_mode,
                 Var write_gate);

/// M' = M ∘ (E − w·eᵀ) + w·vᵀ
Var memory_write(Var memory, Var write_weight, Var erase, Var value);

struct StepResult {
  MemoryState state;
  Var read_out;  // [R·D], concatenated read values
};

/// One memory transaction: update usage, write, then read from the updated memory.
StepResult mam_step(const MemoryConfig& config, const MemoryState& state, Var raw_interface);

}  // namespace cmam
