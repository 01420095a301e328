#include "cmam/model.hpp"

#include <algorithm>
#include <cmath>
#include <random>

namespace cmam {

std::size_t ParamStore::add(std::string name, Tensor init) {
  if (find(name)) throw ConfigError("duplicate parameter name " + name);
  names_.push_back(std::move(name));
  tensors_.push_back(std::move(init));
  return tensors_.size() - 1;
}

std::optional<std::size_t> ParamStore::find(std::string_view name) const {
  for (std::size_t i = 0; i < names_.size(); ++i)
    if (names_[i] == name) return i;
  return std::nullopt;
}

std::size_t ParamStore::total_values() const {
  std::size_t n = 0;
  for (const Tensor& t : tensors_) n += t.size();
  return n;
}

std::vector<Var> ParamStore::bind(Tape& tape) const {
  std::vector<Var> vars;
  vars.reserve(tensors_.size());
  for (const Tensor& t : tensors_) vars.push_back(tape.variable(Tensor(t.shape, t.values)));
  return vars;
}

// ---------------------------------------------------------------------------
// Multi-way memory network

std::vector<Var> backward_sweep(const CmamParams& p, std::span<const Var> inputs) {
  const std::size_t T = inputs.size();
  std::vector<Var> outputs(T);
  Var h = p.backward_h0, c = p.backward_c0;
  for (std::size_t k = T; k-- > 0;) {
    const LstmOutput step = lstm_step(p.backward_controller, inputs[k], h, c);
    h = step.h;
    c = step.c;
    outputs[k] = step.o;
  }
  return outputs;
}

ForwardSweep forward_sweep(const CmamParams& p, std::span<const Var> inputs, std::span<const Var> backward_outputs,
                           const MemoryState& state) {
  if (backward_outputs.size() != inputs.size()) {
    throw ShapeError("forward_sweep: " + std::to_string(inputs.size()) + " inputs but " +
                     std::to_string(backward_outputs.size()) + " backward outputs");
  }
  ForwardSweep out;
  out.state = state;
  Var read = reshape(p.initial_reads, {p.memory.heads * p.memory.width});
  Var h = p.forward_h0, c = p.forward_c0;
  for (std::size_t t = 0; t < inputs.size(); ++t) {
    const LstmOutput step = lstm_step(p.forward_controller, concat({inputs[t], read}), h, c);
    h = step.h;
    c = step.c;
    Var both = concat({step.o, backward_outputs[t]});
    Var xi = matvec(p.interface_weight, both);
    Var ys = matvec(p.short_term_weight, both);
    const StepResult mem = mam_step(p.memory, out.state, xi);
    out.state = mem.state;
    read = mem.read_out;
    out.forward_outputs.push_back(step.o);
    out.interfaces.push_back(xi);
    out.short_term.push_back(ys);
    out.reads.push_back(read);
  }
  return out;
}

RefinementOutput run_refinements(const CmamParams& p, std::span<const Var> xs, RefinementTrace* trace) {
  if (xs.empty()) throw ShapeError("run_refinements: empty input sequence");
  Tape& tape = xs[0].tape();
  MemoryState state = initial_memory_state(tape, p.memory, p.initial_reads);
  std::vector<Var> inputs(xs.begin(), xs.end());
  RefinementOutput out;
  for (std::size_t level = 0; level <= p.refinements; ++level) {
    if (trace) trace->memory_at_pass_start.push_back(state.memory.tensor());
    const std::vector<Var> backward = backward_sweep(p, inputs);
    if (trace) ++trace->backward_sweeps;
    ForwardSweep sweep = forward_sweep(p, inputs, backward, state);
    if (trace) ++trace->forward_sweeps;
    state = sweep.state;
    if (trace) trace->memory_at_pass_end.push_back(state.memory.tensor());
    inputs = sweep.short_term;
    out.short_term = std::move(sweep.short_term);
    out.reads = std::move(sweep.reads);
  }
  return out;
}

Var output_project(const CmamParams& p, std::span<const Var> short_term, std::span<const Var> reads) {
  if (short_term.size() != reads.size() || short_term.empty()) {
    throw ShapeError("output_project: " + std::to_string(short_term.size()) + " short-term outputs and " +
                     std::to_string(reads.size()) + " reads");
  }
  Var joined = concat({stack_rows(short_term), stack_rows(reads)}, 1);
  Var y = matmul(joined, transpose(p.output_weight));
  return add_rows(matmul(y, transpose(p.classifier.weight)), p.classifier.bias);
}

Var cmam_forward(const ConvStack& stack, const ConvStackParams& cnn, const CmamParams& p, Var image,
                 RefinementTrace* trace) {
  const std::vector<Var> xs = cnn_encode(stack, cnn, image);
  const RefinementOutput refined = run_refinements(p, xs, trace);
  return output_project(p, refined.short_term, refined.reads);
}

namespace {

std::vector<Var> run_direction(const LstmParams& cell, std::span<const Var> inputs, bool reverse) {
  Tape& tape = inputs[0].tape();
  const std::size_t H = cell.hidden_size();
  Var h = tape.constant(Tensor({H})), c = tape.constant(Tensor({H}));
  std::vector<Var> outputs(inputs.size());
  for (std::size_t k = 0; k < inputs.size(); ++k) {
    const std::size_t t = reverse ? inputs.size() - 1 - k : k;
    const LstmOutput step = lstm_step(cell, inputs[t], h, c);
    h = step.h;
    c = step.c;
    outputs[t] = step.o;
  }
  return outputs;
}

}  // namespace

Var crnn_forward(const ConvStack& stack, const ConvStackParams& cnn, const CrnnParams& p, Var image) {
  std::vector<Var> seq = cnn_encode(stack, cnn, image);
  for (std::size_t layer = 0; layer < 2; ++layer) {
    const std::vector<Var> fwd = run_direction(p.forward[layer], seq, false);
    const std::vector<Var> bwd = run_direction(p.backward[layer], seq, true);
    for (std::size_t t = 0; t < seq.size(); ++t) seq[t] = concat({fwd[t], bwd[t]});
  }
  return add_rows(matmul(stack_rows(seq), transpose(p.classifier.weight)), p.classifier.bias);
}

// ---------------------------------------------------------------------------
// Model

std::string_view to_string(ModelKind kind) { return kind == ModelKind::Cmam ? "cmam" : "crnn"; }

ModelKind parse_model_kind(std::string_view text) {
  if (text == "cmam") return ModelKind::Cmam;
  if (text == "crnn") return ModelKind::Crnn;
  throw ConfigError("unknown model kind '" + std::string(text) + "' (expected cmam or crnn)");
}

ModelConfig profile_config(std::string_view profile, ModelKind kind, std::size_t vocab_size) {
  ModelConfig c;
  c.kind = kind;
  c.vocab_size = vocab_size;
  if (profile == "tiny") {
    c.memory = {4, 8, 2};
    c.hidden = 32;
  } else if (profile == "default") {
    c.memory = {16, 16, 4};
    c.hidden = 196;
  } else {
    throw ConfigError("unknown profile '" + std::string(profile) + "' (expected tiny or default)");
  }
  return c;
}

namespace {

Tensor uniform_init(Shape shape, double limit, std::mt19937_64& rng) {
  return random_uniform(std::move(shape), -limit, limit, rng);
}

// Glorot uniform. Smaller 1/sqrt(fan_in) limits leave the LSTMs nearly linear and
// stall CTC training on a long blank/unigram plateau.
double glorot_limit(std::size_t fan_in, std::size_t fan_out) {
  return std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
}

Tensor lstm_bias(std::size_t hidden) {
  Tensor b({4 * hidden});
  for (std::size_t i = hidden; i < 2 * hidden; ++i) b.values[i] = 1.0;  // forget gate
  return b;
}

void add_lstm(ParamStore& store, const std::string& prefix, std::size_t input, std::size_t hidden,
              std::mt19937_64& rng) {
  store.add(prefix + "/weight", uniform_init(lstm_weight_shape(input, hidden), glorot_limit(input + hidden, 4 * hidden), rng));
  store.add(prefix + "/bias", lstm_bias(hidden));
}

void add_linear(ParamStore& store, const std::string& prefix, std::size_t in, std::size_t out, bool bias,
                std::mt19937_64& rng) {
  store.add(prefix + (bias ? "/weight" : ""), uniform_init({out, in}, glorot_limit(in, out), rng));
  if (bias) store.add(prefix + "/bias", Tensor({out}));
}

}  // namespace

Model::Model(ModelConfig config, std::uint64_t seed) : config_(std::move(config)), stack_(config_.stack()) {
  if (config_.hidden == 0 || config_.vocab_size == 0 || config_.feature_width == 0) {
    throw ConfigError("model widths must be positive");
  }
  std::mt19937_64 rng(seed);
  const auto convs = stack_.convolutions();
  for (std::size_t i = 0; i < convs.size(); ++i) {
    const Conv2dSpec& c = convs[i];
    const double fan_in = static_cast<double>(c.in_channels * c.kernel_h * c.kernel_w);
    const std::string prefix = "cnn/conv" + std::to_string(i);
    params_.add(prefix + "/weight",
                uniform_init({c.out_channels, c.in_channels, c.kernel_h, c.kernel_w}, std::sqrt(6.0 / fan_in), rng));
    params_.add(prefix + "/bias", Tensor({c.out_channels}));
  }
  const std::size_t F = config_.feature_width, H = config_.hidden, classes = config_.vocab_size + 1;
  add_linear(params_, "cnn/projection", stack_.column_features(), F, true, rng);

  if (config_.kind == ModelKind::Cmam) {
    const MemoryConfig& m = config_.memory;
    if (m.slots == 0 || m.width == 0 || m.heads == 0) throw ConfigError("memory extents must be positive");
    const std::size_t RD = m.heads * m.width;
    add_lstm(params_, "cmam/forward_controller", F + RD, H, rng);
    add_lstm(params_, "cmam/backward_controller", F, H, rng);
    add_linear(params_, "cmam/interface_weight", 2 * H, m.interface_width(), false, rng);
    add_linear(params_, "cmam/short_term_weight", 2 * H, F, false, rng);
    add_linear(params_, "cmam/output_weight", F + RD, F, false, rng);
    add_linear(params_, "cmam/classifier", F, classes, true, rng);
    params_.add("cmam/initial_reads", uniform_init({m.heads, m.width}, 0.1, rng));
    params_.add("cmam/forward_controller/h0", Tensor({H}));
    params_.add("cmam/forward_controller/c0", Tensor({H}));
    params_.add("cmam/backward_controller/h0", Tensor({H}));
    params_.add("cmam/backward_controller/c0", Tensor({H}));
  } else {
    for (std::size_t layer = 0; layer < 2; ++layer) {
      const std::size_t in = layer == 0 ? F : 2 * H;
      add_lstm(params_, "crnn/layer" + std::to_string(layer) + "/forward", in, H, rng);
      add_lstm(params_, "crnn/layer" + std::to_string(layer) + "/backward", in, H, rng);
    }
    add_linear(params_, "crnn/classifier", 2 * H, classes, true, rng);
  }
}

BoundModel Model::bind(Tape& tape) const { return structure(params_.bind(tape)); }

BoundModel Model::structure(std::vector<Var> vars) const {
  if (vars.size() != params_.size()) {
    throw ShapeError("model expects " + std::to_string(params_.size()) + " parameters, got " +
                     std::to_string(vars.size()));
  }
  auto at = [&](const std::string& name) { return vars[*params_.find(name)]; };
  BoundModel b;
  const std::size_t n_convs = stack_.convolutions().size();
  for (std::size_t i = 0; i < n_convs; ++i) {
    const std::string prefix = "cnn/conv" + std::to_string(i);
    b.cnn.convs.push_back({at(prefix + "/weight"), at(prefix + "/bias")});
  }
  b.cnn.projection = {at("cnn/projection/weight"), at("cnn/projection/bias")};
  if (config_.kind == ModelKind::Cmam) {
    CmamParams p;
    p.forward_controller = {at("cmam/forward_controller/weight"), at("cmam/forward_controller/bias")};
    p.backward_controller = {at("cmam/backward_controller/weight"), at("cmam/backward_controller/bias")};
    p.interface_weight = at("cmam/interface_weight");
    p.short_term_weight = at("cmam/short_term_weight");
    p.output_weight = at("cmam/output_weight");
    p.classifier = {at("cmam/classifier/weight"), at("cmam/classifier/bias")};
    p.initial_reads = at("cmam/initial_reads");
    p.forward_h0 = at("cmam/forward_controller/h0");
    p.forward_c0 = at("cmam/forward_controller/c0");
    p.backward_h0 = at("cmam/backward_controller/h0");
    p.backward_c0 = at("cmam/backward_controller/c0");
    p.refinements = config_.refinements;
    p.memory = config_.memory;
    b.head = p;
  } else {
    CrnnParams p;
    for (std::size_t layer = 0; layer < 2; ++layer) {
      const std::string prefix = "crnn/layer" + std::to_string(layer);
      p.forward[layer] = {at(prefix + "/forward/weight"), at(prefix + "/forward/bias")};
      p.backward[layer] = {at(prefix + "/backward/weight"), at(prefix + "/backward/bias")};
    }
    p.classifier = {at("crnn/classifier/weight"), at("crnn/classifier/bias")};
    b.head = p;
  }
  b.vars = std::move(vars);
  return b;
}

Var Model::logits(const BoundModel& bound, Var image, RefinementTrace* trace) const {
  if (const auto* cmam = std::get_if<CmamParams>(&bound.head)) {
    return cmam_forward(stack_, bound.cnn, *cmam, image, trace);
  }
  return crnn_forward(stack_, bound.cnn, std::get<CrnnParams>(bound.head), image);
}

}  // namespace cmam
