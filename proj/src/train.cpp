#include "cmam/train.hpp"

#include <algorithm>
#include <bit>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <functional>
#include <limits>
#include <map>
#include <numeric>
#include <ostream>
#include <random>
#include <sstream>
#include <unordered_set>

namespace cmam {

// ---------------------------------------------------------------------------
// Configuration

ModelConfig TrainConfig::model_config() const {
  ModelConfig c;
  c.kind = model;
  c.refinements = refinements;
  c.memory = {memory_slots, memory_width, read_heads};
  c.hidden = hidden;
  c.vocab_size = vocab_size;
  c.feature_width = feature_width;
  c.conv_channels = conv_channels;
  return c;
}

namespace {

std::string trim(std::string_view s) {
  const auto first = s.find_first_not_of(" \t\r");
  if (first == std::string_view::npos) return {};
  const auto last = s.find_last_not_of(" \t\r");
  return std::string(s.substr(first, last - first + 1));
}

std::string format_double(double v) {
  char buf[64];
  const auto res = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, res.ptr);
}

std::string join_sizes(const std::vector<std::size_t>& v) {
  std::string out;
  for (std::size_t i = 0; i < v.size(); ++i) {
    if (i) out += ',';
    out += std::to_string(v[i]);
  }
  return out;
}

template <typename T>
T parse_number(const std::string& key, const std::string& text) {
  T value{};
  const auto res = std::from_chars(text.data(), text.data() + text.size(), value);
  if (res.ec != std::errc() || res.ptr != text.data() + text.size()) {
    throw ConfigError("config: '" + key + "' expects a number, got '" + text + "'");
  }
  return value;
}

std::size_t parse_count(const std::string& key, const std::string& text, std::size_t min) {
  if (!text.empty() && text[0] == '-') throw ConfigError("config: '" + key + "' must be non-negative");
  const auto v = parse_number<std::size_t>(key, text);
  if (v < min) throw ConfigError("config: '" + key + "' must be at least " + std::to_string(min));
  return v;
}

double parse_real(const std::string& key, const std::string& text, double lo, bool lo_open, double hi, bool hi_open) {
  const double v = parse_number<double>(key, text);
  const bool ok = std::isfinite(v) && (lo_open ? v > lo : v >= lo) && (hi_open ? v < hi : v <= hi);
  if (!ok) {
    throw ConfigError("config: '" + key + "' = " + text + " outside " + (lo_open ? "(" : "[") + format_double(lo) +
                      ", " + (std::isinf(hi) ? "inf" : format_double(hi)) + (hi_open ? ")" : "]"));
  }
  return v;
}

constexpr double kInf = std::numeric_limits<double>::infinity();

using Setter = std::function<void(TrainConfig&, const std::string& key, const std::string& value)>;
using Getter = std::function<std::string(const TrainConfig&)>;

struct Field {
  const char* key;
  bool architecture;
  Setter set;
  Getter get;
};

const std::vector<Field>& fields() {
  static const std::vector<Field> table = {
      {"model", true, [](TrainConfig& c, auto&, auto& v) { c.model = parse_model_kind(v); },
       [](const TrainConfig& c) { return std::string(to_string(c.model)); }},
      {"refinements", true, [](TrainConfig& c, auto& k, auto& v) { c.refinements = parse_count(k, v, 0); },
       [](const TrainConfig& c) { return std::to_string(c.refinements); }},
      {"memory_slots", true, [](TrainConfig& c, auto& k, auto& v) { c.memory_slots = parse_count(k, v, 1); },
       [](const TrainConfig& c) { return std::to_string(c.memory_slots); }},
      {"memory_width", true, [](TrainConfig& c, auto& k, auto& v) { c.memory_width = parse_count(k, v, 1); },
       [](const TrainConfig& c) { return std::to_string(c.memory_width); }},
      {"read_heads", true, [](TrainConfig& c, auto& k, auto& v) { c.read_heads = parse_count(k, v, 1); },
       [](const TrainConfig& c) { return std::to_string(c.read_heads); }},
      {"hidden", true, [](TrainConfig& c, auto& k, auto& v) { c.hidden = parse_count(k, v, 1); },
       [](const TrainConfig& c) { return std::to_string(c.hidden); }},
      {"vocab_size", true, [](TrainConfig& c, auto& k, auto& v) { c.vocab_size = parse_count(k, v, 1); },
       [](const TrainConfig& c) { return std::to_string(c.vocab_size); }},
      {"feature_width", true, [](TrainConfig& c, auto& k, auto& v) { c.feature_width = parse_count(k, v, 1); },
       [](const TrainConfig& c) { return std::to_string(c.feature_width); }},
      {"conv_channels", true,
       [](TrainConfig& c, auto& k, auto& v) {
         std::vector<std::size_t> out;
         std::stringstream ss(v);
         std::string item;
         while (std::getline(ss, item, ',')) out.push_back(parse_count(k, trim(item), 1));
         if (out.size() != 4) throw ConfigError("config: 'conv_channels' expects 4 comma-separated widths");
         c.conv_channels = out;
       },
       [](const TrainConfig& c) { return join_sizes(c.conv_channels); }},
      {"learning_rate", false,
       [](TrainConfig& c, auto& k, auto& v) { c.learning_rate = parse_real(k, v, 0.0, false, kInf, true); },
       [](const TrainConfig& c) { return format_double(c.learning_rate); }},
      {"rmsprop_decay", false,
       [](TrainConfig& c, auto& k, auto& v) { c.rmsprop_decay = parse_real(k, v, 0.0, false, 1.0, true); },
       [](const TrainConfig& c) { return format_double(c.rmsprop_decay); }},
      {"rmsprop_epsilon", false,
       [](TrainConfig& c, auto& k, auto& v) { c.rmsprop_epsilon = parse_real(k, v, 0.0, true, kInf, true); },
       [](const TrainConfig& c) { return format_double(c.rmsprop_epsilon); }},
      {"batch_size", false, [](TrainConfig& c, auto& k, auto& v) { c.batch_size = parse_count(k, v, 1); },
       [](const TrainConfig& c) { return std::to_string(c.batch_size); }},
      {"max_epochs", false, [](TrainConfig& c, auto& k, auto& v) { c.max_epochs = parse_count(k, v, 1); },
       [](const TrainConfig& c) { return std::to_string(c.max_epochs); }},
      {"patience", false, [](TrainConfig& c, auto& k, auto& v) { c.patience = parse_count(k, v, 1); },
       [](const TrainConfig& c) { return std::to_string(c.patience); }},
      {"clip_norm", false,
       [](TrainConfig& c, auto& k, auto& v) { c.clip_norm = parse_real(k, v, 0.0, true, kInf, true); },
       [](const TrainConfig& c) { return format_double(c.clip_norm); }},
      {"seed", false,
       [](TrainConfig& c, auto& k, auto& v) {
         if (!v.empty() && v[0] == '-') throw ConfigError("config: 'seed' must be non-negative");
         c.seed = parse_number<std::uint64_t>(k, v);
       },
       [](const TrainConfig& c) { return std::to_string(c.seed); }},
      {"train_data", false, [](TrainConfig& c, auto&, auto& v) { c.train_data = v; },
       [](const TrainConfig& c) { return c.train_data; }},
      {"valid_data", false, [](TrainConfig& c, auto&, auto& v) { c.valid_data = v; },
       [](const TrainConfig& c) { return c.valid_data; }},
      {"checkpoint", false, [](TrainConfig& c, auto&, auto& v) { c.checkpoint = v; },
       [](const TrainConfig& c) { return c.checkpoint; }},
      {"log", false, [](TrainConfig& c, auto&, auto& v) { c.log = v; }, [](const TrainConfig& c) { return c.log; }},
  };
  return table;
}

const Field* find_field(std::string_view key) {
  for (const Field& f : fields()) {
    if (key == f.key) return &f;
  }
  return nullptr;
}

}  // namespace

TrainConfig parse_config(std::string_view text) {
  std::vector<std::pair<std::string, std::string>> entries;
  std::unordered_set<std::string> seen;
  std::optional<std::string> profile;
  std::size_t line_no = 0;
  std::istringstream in{std::string(text)};
  std::string raw;
  while (std::getline(in, raw)) {
    ++line_no;
    const std::string line = trim(raw.substr(0, raw.find('#')));
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      throw ConfigError("config line " + std::to_string(line_no) + ": expected 'key = value', got '" + line + "'");
    }
    std::string key = trim(line.substr(0, eq));
    std::string value = trim(line.substr(eq + 1));
    if (key != "profile" && !find_field(key)) {
      throw ConfigError("config line " + std::to_string(line_no) + ": unknown key '" + key + "'");
    }
    if (!seen.insert(key).second) {
      throw ConfigError("config line " + std::to_string(line_no) + ": key '" + key + "' given twice");
    }
    if (key == "profile") {
      profile = value;
    } else {
      entries.emplace_back(std::move(key), std::move(value));
    }
  }
  TrainConfig c;
  if (profile) {
    const ModelConfig p = profile_config(*profile);
    c.memory_slots = p.memory.slots;
    c.memory_width = p.memory.width;
    c.read_heads = p.memory.heads;
    c.hidden = p.hidden;
  }
  for (const auto& [key, value] : entries) find_field(key)->set(c, key, value);
  return c;
}

TrainConfig load_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read config file '" + path.string() + "'");
  std::stringstream ss;
  ss << in.rdbuf();
  try {
    return parse_config(ss.str());
  } catch (const ConfigError& e) {
    throw ConfigError(path.string() + ": " + e.what());
  }
}

std::string serialize_config(const TrainConfig& config) {
  std::string out;
  for (const Field& f : fields()) out += std::string(f.key) + " = " + f.get(config) + "\n";
  return out;
}

std::vector<std::string> architecture_diff(const TrainConfig& expected, const TrainConfig& actual) {
  std::vector<std::string> diff;
  for (const Field& f : fields()) {
    if (!f.architecture) continue;
    const std::string a = f.get(expected), b = f.get(actual);
    if (a != b) diff.push_back(std::string(f.key) + ": expected " + a + ", found " + b);
  }
  return diff;
}

// ---------------------------------------------------------------------------
// Optimisation

double global_norm(const std::vector<std::vector<double>>& grads) {
  double total = 0.0;
  for (const auto& g : grads) {
    for (double v : g) total += v * v;
  }
  return std::sqrt(total);
}

double clip_global_norm(std::vector<std::vector<double>>& grads, double max_norm) {
  const double norm = global_norm(grads);
  if (norm > max_norm) {
    const double s = max_norm / norm;
    for (auto& g : grads) {
      for (double& v : g) v *= s;
    }
  }
  return norm;
}

void rmsprop_step(std::span<double> param, std::span<const double> grad, std::span<double> accumulator, double lr,
                  double decay, double eps) {
  if (grad.size() != param.size() || accumulator.size() != param.size()) {
    throw ShapeError("rmsprop_step: parameter, gradient and accumulator sizes differ (" +
                     std::to_string(param.size()) + ", " + std::to_string(grad.size()) + ", " +
                     std::to_string(accumulator.size()) + ")");
  }
  for (std::size_t i = 0; i < param.size(); ++i) {
    const double g = grad[i];
    accumulator[i] = decay * accumulator[i] + (1.0 - decay) * g * g;
    param[i] -= lr * g / std::sqrt(accumulator[i] + eps);
  }
}

// ---------------------------------------------------------------------------
// Checkpoints

const Tensor* Checkpoint::find(std::string_view name) const {
  for (const auto& [n, t] : tensors) {
    if (n == name) return &t;
  }
  return nullptr;
}

namespace {

constexpr char kMagic[4] = {'C', 'M', 'A', 'M'};

template <typename U>
void put(std::string& out, U v) {
  for (std::size_t i = 0; i < sizeof(U); ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

class Reader {
 public:
  explicit Reader(std::string_view bytes) : bytes_(bytes) {}

  template <typename U>
  U get(const std::string& what) {
    need(sizeof(U), what);
    U v = 0;
    for (std::size_t i = 0; i < sizeof(U); ++i) {
      v |= static_cast<U>(static_cast<unsigned char>(bytes_[pos_ + i])) << (8 * i);
    }
    pos_ += sizeof(U);
    return v;
  }

  std::string_view take(std::size_t n, const std::string& what) {
    need(n, what);
    const auto s = bytes_.substr(pos_, n);
    pos_ += n;
    return s;
  }

  std::size_t remaining() const { return bytes_.size() - pos_; }

 private:
  void need(std::size_t n, const std::string& what) const {
    if (remaining() < n) throw FormatError("checkpoint truncated while reading " + what);
  }

  std::string_view bytes_;
  std::size_t pos_ = 0;
};

}  // namespace

std::string encode_checkpoint(const Checkpoint& checkpoint) {
  std::string out(kMagic, 4);
  put<std::uint32_t>(out, kCheckpointVersion);
  put<std::uint32_t>(out, static_cast<std::uint32_t>(checkpoint.tensors.size()));
  for (const auto& [name, t] : checkpoint.tensors) {
    if (name.size() > 0xffff) throw FormatError("checkpoint: tensor name longer than 65535 bytes");
    if (t.rank() == 0 || t.rank() > 0xff) throw FormatError("checkpoint: tensor '" + name + "' has unsupported rank");
    put<std::uint16_t>(out, static_cast<std::uint16_t>(name.size()));
    out += name;
    put<std::uint8_t>(out, static_cast<std::uint8_t>(t.rank()));
    for (std::size_t d : t.shape) put<std::uint32_t>(out, static_cast<std::uint32_t>(d));
    for (double v : t.values) put<std::uint64_t>(out, std::bit_cast<std::uint64_t>(v));
  }
  put<std::uint32_t>(out, static_cast<std::uint32_t>(checkpoint.config.size()));
  out += checkpoint.config;
  return out;
}

Checkpoint decode_checkpoint(std::string_view bytes) {
  Reader r(bytes);
  if (r.take(4, "magic") != std::string_view(kMagic, 4)) throw FormatError("checkpoint: bad magic (expected CMAM)");
  const auto version = r.get<std::uint32_t>("version");
  if (version != kCheckpointVersion) {
    throw FormatError("checkpoint: unsupported version " + std::to_string(version));
  }
  const auto count = r.get<std::uint32_t>("tensor count");
  Checkpoint c;
  std::unordered_set<std::string> names;
  for (std::uint32_t k = 0; k < count; ++k) {
    const std::string where = "tensor #" + std::to_string(k);
    const auto name_len = r.get<std::uint16_t>(where + " name length");
    std::string name(r.take(name_len, where + " name"));
    const std::string label = "tensor '" + name + "'";
    if (!names.insert(name).second) throw FormatError("checkpoint: duplicate " + label);
    const auto rank = r.get<std::uint8_t>(label + " rank");
    if (rank == 0) throw FormatError("checkpoint: " + label + " has rank 0");
    Shape shape(rank);
    std::size_t n = 1;
    for (auto& d : shape) {
      d = r.get<std::uint32_t>(label + " dims");
      n *= d;
    }
    if (n > r.remaining() / 8) throw FormatError("checkpoint truncated while reading " + label + " values");
    std::vector<double> values(n);
    for (double& v : values) v = std::bit_cast<double>(r.get<std::uint64_t>(label + " values"));
    c.tensors.emplace_back(std::move(name), Tensor(std::move(shape), std::move(values)));
  }
  const auto config_len = r.get<std::uint32_t>("config length");
  c.config = std::string(r.take(config_len, "config snapshot"));
  if (r.remaining() != 0) {
    throw FormatError("checkpoint: " + std::to_string(r.remaining()) + " trailing bytes after config snapshot");
  }
  return c;
}

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& checkpoint) {
  const std::string bytes = encode_checkpoint(checkpoint);
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::filesystem::path tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw FormatError("cannot write checkpoint '" + tmp.string() + "'");
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw FormatError("short write to '" + tmp.string() + "'");
  }
  std::filesystem::rename(tmp, path);
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot read checkpoint '" + path.string() + "'");
  std::stringstream ss;
  ss << in.rdbuf();
  try {
    return decode_checkpoint(ss.str());
  } catch (const FormatError& e) {
    throw FormatError(path.string() + ": " + e.what());
  }
}

Checkpoint make_checkpoint(const Model& model, const TrainerState& state, const TrainConfig& config) {
  const ParamStore& ps = model.params();
  Checkpoint c;
  for (std::size_t i = 0; i < ps.size(); ++i) c.tensors.emplace_back(ps.name(i), ps.tensor(i));
  for (std::size_t i = 0; i < state.accumulators.size(); ++i) {
    c.tensors.emplace_back("rmsprop/" + ps.name(i), state.accumulators[i]);
  }
  c.tensors.emplace_back("train/step", Tensor::scalar(static_cast<double>(state.step)));
  c.config = serialize_config(config);
  return c;
}

std::pair<Model, TrainConfig> restore_model(const Checkpoint& checkpoint, TrainerState* state) {
  const TrainConfig config = parse_config(checkpoint.config);
  Model model(config.model_config(), config.seed);
  ParamStore& ps = model.params();
  std::unordered_set<std::string> known{"train/step"};
  for (std::size_t i = 0; i < ps.size(); ++i) {
    known.insert(ps.name(i));
    known.insert("rmsprop/" + ps.name(i));
  }
  for (const auto& [name, t] : checkpoint.tensors) {
    if (!known.count(name)) throw FormatError("checkpoint: unexpected tensor '" + name + "' for this model");
  }
  auto fetch = [&](const std::string& name, const Shape& shape, bool required) -> const Tensor* {
    const Tensor* t = checkpoint.find(name);
    if (!t) {
      if (required) throw FormatError("checkpoint: missing tensor '" + name + "'");
      return nullptr;
    }
    if (t->shape != shape) {
      throw FormatError("checkpoint: tensor '" + name + "' has shape " + shape_str(t->shape) + ", model expects " +
                        shape_str(shape));
    }
    return t;
  };
  for (std::size_t i = 0; i < ps.size(); ++i) ps.tensor(i) = *fetch(ps.name(i), ps.tensor(i).shape, true);
  if (state) {
    state->accumulators.clear();
    for (std::size_t i = 0; i < ps.size(); ++i) {
      const Tensor* acc = fetch("rmsprop/" + ps.name(i), ps.tensor(i).shape, false);
      state->accumulators.push_back(acc ? *acc : Tensor(ps.tensor(i).shape));
    }
    const Tensor* step = fetch("train/step", {1}, false);
    state->step = step ? static_cast<std::uint64_t>(step->values[0]) : 0;
  }
  return {std::move(model), config};
}

// ---------------------------------------------------------------------------
// Training and evaluation

std::string format_epoch(const EpochRecord& record) {
  char buf[160];
  std::snprintf(buf, sizeof buf, "epoch %zu loss %.6f valid_cer %.6f skipped %zu", record.epoch, record.loss,
                record.valid_cer, record.skipped);
  return buf;
}

std::optional<double> sample_loss(const Model& model, const LineSample& sample,
                                  std::vector<std::vector<double>>* grads) {
  if (sample.image.rank() != 2) throw ShapeError("sample '" + sample.id + "' image must be rank 2");
  const std::size_t frames = model.stack().output_extent(sample.image.shape[1]).width;
  if (frames < ctc_min_frames(sample.label)) return std::nullopt;
  Tape tape;
  const BoundModel bound = model.bind(tape);
  const Var logits = model.logits(bound, tape.constant(sample.image));
  const Var loss = ctc_loss(logits, sample.label);
  if (grads) {
    tape.backward(loss);
    for (std::size_t i = 0; i < bound.vars.size(); ++i) {
      const auto g = tape.out_grad(bound.vars[i].id());
      auto& dst = (*grads)[i];
      if (g.empty()) continue;
      for (std::size_t k = 0; k < dst.size(); ++k) dst[k] += g[k];
    }
  }
  return loss.item();
}

LabelSeq transcribe(const Model& model, const Tensor& image) {
  Tape tape;
  const BoundModel bound = model.bind(tape);
  return greedy_decode(model.logits(bound, tape.constant(image)).tensor());
}

TrainResult train(const TrainConfig& config, const Dataset& train_set, const Dataset& valid_set, std::ostream& log) {
  for (const Dataset* d : {&train_set, &valid_set}) {
    if (d->vocab.size() != config.vocab_size) {
      throw ConfigError("dataset has " + std::to_string(d->vocab.size()) + " classes but vocab_size = " +
                        std::to_string(config.vocab_size));
    }
  }
  if (train_set.samples.empty()) throw ConfigError("training set is empty");

  Model model(config.model_config(), config.seed);
  ParamStore& ps = model.params();
  TrainerState state;
  std::vector<std::vector<double>> grads(ps.size());
  for (std::size_t i = 0; i < ps.size(); ++i) {
    state.accumulators.emplace_back(ps.tensor(i).shape);
    grads[i].assign(ps.tensor(i).size(), 0.0);
  }

  std::ofstream log_file;
  if (!config.log.empty()) {
    log_file.open(config.log, std::ios::trunc);
    if (!log_file) throw FormatError("cannot write log file '" + config.log + "'");
  }

  std::mt19937_64 shuffle_rng(config.seed ^ 0x5deece66dULL);
  std::vector<std::size_t> order(train_set.samples.size());
  std::iota(order.begin(), order.end(), 0);

  TrainResult result;
  result.best_valid_cer = kInf;
  std::size_t since_best = 0;
  for (std::size_t epoch = 1; epoch <= config.max_epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), shuffle_rng);
    double loss_sum = 0.0;
    std::size_t used = 0, skipped = 0;
    for (std::size_t start = 0; start < order.size(); start += config.batch_size) {
      const std::size_t stop = std::min(order.size(), start + config.batch_size);
      for (auto& g : grads) std::fill(g.begin(), g.end(), 0.0);
      std::size_t in_batch = 0;
      for (std::size_t k = start; k < stop; ++k) {
        const auto loss = sample_loss(model, train_set.samples[order[k]], &grads);
        if (!loss) {
          ++skipped;
          continue;
        }
        loss_sum += *loss;
        ++in_batch;
      }
      if (in_batch == 0) continue;
      used += in_batch;
      for (auto& g : grads) {
        for (double& v : g) v /= static_cast<double>(in_batch);
      }
      const double norm = clip_global_norm(grads, config.clip_norm);
      if (!std::isfinite(norm)) {
        throw std::runtime_error("non-finite gradient norm at step " + std::to_string(state.step + 1));
      }
      for (std::size_t i = 0; i < ps.size(); ++i) {
        rmsprop_step(ps.tensor(i).values, grads[i], state.accumulators[i].values, config.learning_rate,
                     config.rmsprop_decay, config.rmsprop_epsilon);
      }
      ++state.step;
    }

    EpochRecord rec;
    rec.epoch = epoch;
    rec.loss = used ? loss_sum / static_cast<double>(used) : std::numeric_limits<double>::quiet_NaN();
    rec.valid_cer = evaluate(model, valid_set).cer;
    rec.skipped = skipped;
    result.epochs.push_back(rec);
    const std::string line = format_epoch(rec);
    log << line << '\n' << std::flush;
    if (log_file) log_file << line << '\n' << std::flush;

    if (rec.valid_cer < result.best_valid_cer) {
      result.best_valid_cer = rec.valid_cer;
      result.best_epoch = epoch;
      since_best = 0;
      if (!config.checkpoint.empty()) save_checkpoint(config.checkpoint, make_checkpoint(model, state, config));
    } else if (++since_best >= config.patience) {
      result.stopped_by_patience = true;
      break;
    }
  }
  return result;
}

TrainResult train(const TrainConfig& config, std::ostream& log) {
  if (config.train_data.empty() || config.valid_data.empty()) {
    throw ConfigError("config must set train_data and valid_data");
  }
  const Dataset train_set = load_dataset(config.train_data);
  const Dataset valid_set = load_dataset(config.valid_data);
  return train(config, train_set, valid_set, log);
}

namespace {

std::string label_text(const LabelSeq& label) {
  std::string out;
  for (std::size_t i = 0; i < label.size(); ++i) {
    if (i) out += ' ';
    out += std::to_string(label[i]);
  }
  return out;
}

}  // namespace

MetricReport evaluate(const Model& model, const Dataset& data, std::ostream* report, std::size_t worst) {
  std::vector<LabelSeq> refs, hyps;
  refs.reserve(data.samples.size());
  hyps.reserve(data.samples.size());
  for (const LineSample& s : data.samples) {
    refs.push_back(s.label);
    hyps.push_back(transcribe(model, s.image));
  }
  const MetricReport m = cmam::report(refs, hyps);
  if (report) {
    char buf[160];
    std::snprintf(buf, sizeof buf, "CER %.6f CR %.6f AR %.6f", m.cer, m.cr, m.ar);
    *report << "lines " << refs.size() << " characters " << m.ref_length << '\n'
            << buf << '\n'
            << "substitutions " << m.substitutions << " deletions " << m.deletions << " insertions " << m.insertions
            << '\n';
    struct Line {
      std::size_t index;
      double rate;
    };
    std::vector<Line> lines;
    for (std::size_t k = 0; k < refs.size(); ++k) {
      const double n = static_cast<double>(std::max<std::size_t>(refs[k].size(), 1));
      lines.push_back({k, static_cast<double>(edit_ops(refs[k], hyps[k]).total()) / n});
    }
    std::stable_sort(lines.begin(), lines.end(), [](const Line& a, const Line& b) { return a.rate > b.rate; });
    const std::size_t shown = std::min(worst, lines.size());
    *report << "worst " << shown << " lines\n";
    for (std::size_t k = 0; k < shown; ++k) {
      const Line& l = lines[k];
      std::snprintf(buf, sizeof buf, "%.4f", l.rate);
      *report << data.samples[l.index].id << '\t' << buf << "\tref: " << label_text(refs[l.index])
              << "\thyp: " << label_text(hyps[l.index]) << '\n';
    }
  }
  return m;
}

MetricReport evaluate_checkpoint(const std::filesystem::path& checkpoint, const Dataset& data, std::ostream* report) {
  auto [model, config] = restore_model(load_checkpoint(checkpoint));
  if (data.vocab.size() != config.vocab_size) {
    TrainConfig expected = config;
    expected.vocab_size = data.vocab.size();
    std::string msg = "checkpoint '" + checkpoint.string() + "' does not match the dataset:";
    for (const std::string& line : architecture_diff(expected, config)) msg += "\n  " + line;
    throw ConfigError(msg);
  }
  return evaluate(model, data, report);
}

}  // namespace cmam
