#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <string>
#include <string_view>
#include <variant>
#include <vector>

#include "cmam/layers.hpp"
#include "cmam/memory.hpp"
#include "cmam/tensor.hpp"

namespace cmam {

/// Named trainable tensors in a fixed registration order.
class ParamStore {
 public:
  std::size_t add(std::string name, Tensor init);

  std::size_t size() const { return tensors_.size(); }
  const std::string& name(std::size_t i) const { return names_[i]; }
  Tensor& tensor(std::size_t i) { return tensors_[i]; }
  const Tensor& tensor(std::size_t i) const { return tensors_[i]; }
  std::optional<std::size_t> find(std::string_view name) const;
  std::size_t total_values() const;

  /// Every tensor as a differentiable leaf on `tape`, in registration order.
  std::vector<Var> bind(Tape& tape) const;

 private:
  std::vector<std::string> names_;
  std::vector<Tensor> tensors_;
};

/// Multi-way associative memory network, bound to a tape.
struct CmamParams {
  LstmParams forward_controller;   // input |y^s| + R·D
  LstmParams backward_controller;  // input |y^s|
  Var interface_weight;            // W_ξ  [interface × 2H]
  Var short_term_weight;           // W_s  [F × 2H]
  Var output_weight;               // W_y  [F × (F + R·D)]
  LinearParams classifier;         // [(V+1) × F]
  Var initial_reads;               // r₀   [R×D]
  Var forward_h0, forward_c0;
  Var backward_h0, backward_c0;
  std::size_t refinements = 0;
  MemoryConfig memory;
};

/// Two stacked bidirectional LSTM layers and a classifier.
struct CrnnParams {
  std::array<LstmParams, 2> forward;
  std::array<LstmParams, 2> backward;
  LinearParams classifier;  // [(V+1) × 2H]
};

/// Counters and memory snapshots recorded by run_refinements.
struct RefinementTrace {
  std::size_t forward_sweeps = 0;
  std::size_t backward_sweeps = 0;
  std::vector<Tensor> memory_at_pass_start;
  std::vector<Tensor> memory_at_pass_end;
};

/// o^b_{1..T} in forward index order; LSTM^b runs from t = T down to 1 on the inputs alone.
std::vector<Var> backward_sweep(const CmamParams& p, std::span<const Var> inputs);

struct ForwardSweep {
  std::vector<Var> forward_outputs;  // o^f
  std::vector<Var> interfaces;       // ξ (raw)
  std::vector<Var> short_term;       // y^s
  std::vector<Var> reads;            // r
  MemoryState state;                 // memory after the last timestep
};

/// One left-to-right pass: controller on [y^s_{t,l−1}, r_{t−1,l}], interface
/// and short-term output from [o^f, o^b], then a write-then-read memory step.
ForwardSweep forward_sweep(const CmamParams& p, std::span<const Var> inputs, std::span<const Var> backward_outputs,
                           const MemoryState& state);

struct RefinementOutput {
  std::vector<Var> short_term;  // y^s_{·,L}
  std::vector<Var> reads;       // r_{·,L}
};

/// L+1 passes of backward_sweep then forward_sweep over one shared memory.
/// Pass l consumes the short-term outputs of pass l−1 (x for l = 0).
RefinementOutput run_refinements(const CmamParams& p, std::span<const Var> xs, RefinementTrace* trace = nullptr);

/// Logits [T × (V+1)], blank at column 0.
Var output_project(const CmamParams& p, std::span<const Var> short_term, std::span<const Var> reads);

Var cmam_forward(const ConvStack& stack, const ConvStackParams& cnn, const CmamParams& p, Var image,
                 RefinementTrace* trace = nullptr);
Var crnn_forward(const ConvStack& stack, const ConvStackParams& cnn, const CrnnParams& p, Var image);

// ---------------------------------------------------------------------------
// Owning model

enum class ModelKind { Cmam, Crnn };

std::string_view to_string(ModelKind kind);
ModelKind parse_model_kind(std::string_view text);

struct ModelConfig {
  ModelKind kind = ModelKind::Cmam;
  std::size_t refinements = 1;
  MemoryConfig memory;
  std::size_t hidden = 196;
  std::size_t vocab_size = 20;
  std::size_t feature_width = 64;
  std::vector<std::size_t> conv_channels{16, 32, 48, 64};

  ConvStack stack() const { return ConvStack::default_stack(conv_channels, feature_width); }
  bool operator==(const ModelConfig&) const = default;
};

/// `tiny`: N=4, D=8, R=2, hidden 32. `default`: N=16, D=16, R=4, hidden 196.
ModelConfig profile_config(std::string_view profile, ModelKind kind = ModelKind::Cmam, std::size_t vocab_size = 20);

struct BoundModel {
  std::vector<Var> vars;  // ParamStore order
  ConvStackParams cnn;
  std::variant<CmamParams, CrnnParams> head;
};

class Model {
 public:
  Model(ModelConfig config, std::uint64_t seed);

  const ModelConfig& config() const { return config_; }
  const ConvStack& stack() const { return stack_; }
  ParamStore& params() { return params_; }
  const ParamStore& params() const { return params_; }

  BoundModel bind(Tape& tape) const;
  /// Structures `vars` (one per parameter, in store order) into layer parameters.
  BoundModel structure(std::vector<Var> vars) const;
  Var logits(const BoundModel& bound, Var image, RefinementTrace* trace = nullptr) const;

 private:
  ModelConfig config_;
  ConvStack stack_;
  ParamStore params_;
};

}  // namespace cmam
