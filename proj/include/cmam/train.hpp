#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "cmam/ctc.hpp"
#include "cmam/model.hpp"
#include "cmam/synth.hpp"

namespace cmam {

// ---------------------------------------------------------------------------
// Configuration

struct TrainConfig {
  ModelKind model = ModelKind::Cmam;
  std::size_t refinements = 1;
  std::size_t memory_slots = 16;
  std::size_t memory_width = 16;
  std::size_t read_heads = 4;
  std::size_t hidden = 196;
  std::size_t vocab_size = 20;
  std::size_t feature_width = 64;
  std::vector<std::size_t> conv_channels{16, 32, 48, 64};
  double learning_rate = 1e-4;
  double rmsprop_decay = 0.9;
  double rmsprop_epsilon = 1e-8;
  std::size_t batch_size = 8;
  std::size_t max_epochs = 50;
  std::size_t patience = 5;
  double clip_norm = 10.0;
  std::uint64_t seed = 1;
  std::string train_data;
  std::string valid_data;
  std::string checkpoint;
  std::string log;  // optional file receiving the epoch log in addition to the stream

  ModelConfig model_config() const;
  bool operator==(const TrainConfig&) const = default;
};

/// `key = value` lines, '#' starts a comment. A `profile = tiny|default` line
/// sets the memory and hidden sizes before any explicit key is applied.
/// Unknown keys, repeated keys and invalid values raise ConfigError.
TrainConfig parse_config(std::string_view text);
/// Reads and parses a file; a missing file raises ConfigError naming the path.
TrainConfig load_config(const std::filesystem::path& path);
/// Canonical text form: every key in a fixed order, one per line.
std::string serialize_config(const TrainConfig& config);
/// Architecture fields that must agree for a checkpoint to load into a model.
std::vector<std::string> architecture_diff(const TrainConfig& expected, const TrainConfig& actual);

// ---------------------------------------------------------------------------
// Optimisation

/// Euclidean norm over every gradient entry.
double global_norm(const std::vector<std::vector<double>>& grads);
/// Scales all gradients by max_norm / norm when norm exceeds max_norm. Returns the pre-clip norm.
double clip_global_norm(std::vector<std::vector<double>>& grads, double max_norm);

/// acc ← decay·acc + (1−decay)·g²;  p ← p − lr·g / sqrt(acc + eps)
void rmsprop_step(std::span<double> param, std::span<const double> grad, std::span<double> accumulator, double lr,
                  double decay, double eps);

// ---------------------------------------------------------------------------
// Checkpoints

inline constexpr std::uint32_t kCheckpointVersion = 1;

struct Checkpoint {
  std::vector<std::pair<std::string, Tensor>> tensors;
  std::string config;

  const Tensor* find(std::string_view name) const;
  bool operator==(const Checkpoint&) const = default;
};

/// "CMAM", u32 version, u32 count, then per tensor: u16 name length, name,
/// u8 rank, u32 dims, f64 values; then u32 length and the config text. All little-endian.
std::string encode_checkpoint(const Checkpoint& checkpoint);
/// Raises FormatError naming the offending tensor on bad magic/version, truncation,
/// duplicate names or trailing bytes.
Checkpoint decode_checkpoint(std::string_view bytes);

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& checkpoint);
Checkpoint load_checkpoint(const std::filesystem::path& path);

/// Parameters plus optimizer state as stored on disk.
struct TrainerState {
  std::vector<Tensor> accumulators;  // one per parameter, ParamStore order
  std::uint64_t step = 0;
};

Checkpoint make_checkpoint(const Model& model, const TrainerState& state, const TrainConfig& config);
/// Rebuilds the model described by the checkpoint's config snapshot and restores
/// every parameter; shapes and names must match exactly.
std::pair<Model, TrainConfig> restore_model(const Checkpoint& checkpoint, TrainerState* state = nullptr);

// ---------------------------------------------------------------------------
// Training and evaluation

struct EpochRecord {
  std::size_t epoch = 0;
  double loss = 0.0;
  double valid_cer = 0.0;
  std::size_t skipped = 0;
};

std::string format_epoch(const EpochRecord& record);

struct TrainResult {
  std::vector<EpochRecord> epochs;
  double best_valid_cer = 0.0;
  std::size_t best_epoch = 0;
  bool stopped_by_patience = false;
};

/// Loss of one sample; nullopt when the label cannot be aligned to the model's frames.
std::optional<double> sample_loss(const Model& model, const LineSample& sample,
                                  std::vector<std::vector<double>>* grads = nullptr);

/// Greedy transcription of one image.
LabelSeq transcribe(const Model& model, const Tensor& image);

/// Trains on in-memory data. Writes one epoch line to `log` per epoch and the
/// best-validation checkpoint to config.checkpoint when that is non-empty.
TrainResult train(const TrainConfig& config, const Dataset& train_set, const Dataset& valid_set, std::ostream& log);
/// Loads config.train_data and config.valid_data, then trains.
TrainResult train(const TrainConfig& config, std::ostream& log);

/// CER/CR/AR over the dataset; prints the summary and the `worst` lines with the
/// highest per-line error rate to `report` when given.
MetricReport evaluate(const Model& model, const Dataset& data, std::ostream* report = nullptr, std::size_t worst = 10);
/// Restores a checkpoint, checks its vocabulary against the dataset, then evaluates.
MetricReport evaluate_checkpoint(const std::filesystem::path& checkpoint, const Dataset& data, std::ostream* report);

}  // namespace cmam
