#include "cmam/memory.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace cmam {

namespace {

struct Field {
  std::size_t offset;
  std::size_t length;
};

struct Layout {
  Field read_keys, read_strengths, free_gates, write_key, write_strength, write_value, erase, write_mode,
      write_gate;
};

Layout layout_of(const MemoryConfig& c) {
  Layout l{};
  std::size_t at = 0;
  auto take = [&at](std::size_t n) {
    Field f{at, n};
    at += n;
    return f;
  };
  l.read_keys = take(c.heads * c.width);
  l.read_strengths = take(c.heads);
  l.free_gates = take(c.heads);
  l.write_key = take(c.width);
  l.write_strength = take(1);
  l.write_value = take(c.width);
  l.erase = take(c.width);
  l.write_mode = take(3);
  l.write_gate = take(1);
  return l;
}

void require_width(const MemoryConfig& c, std::size_t actual) {
  if (actual != c.interface_width()) {
    throw ConfigError("interface width mismatch: expected " + std::to_string(c.interface_width()) + " (R=" +
                      std::to_string(c.heads) + ", D=" + std::to_string(c.width) + "), got " +
                      std::to_string(actual));
  }
}

Var field(Var raw, Field f) { return slice(raw, 0, f.offset, f.offset + f.length); }

Tensor segment(const Tensor& raw, Field f, Shape shape) {
  return Tensor(std::move(shape), std::vector<double>(raw.values.begin() + static_cast<std::ptrdiff_t>(f.offset),
                                                      raw.values.begin() +
                                                          static_cast<std::ptrdiff_t>(f.offset + f.length)));
}

}  // namespace

InterfaceVector parse_interface(const MemoryConfig& config, Var raw) {
  require_width(config, raw.size());
  const Layout l = layout_of(config);
  Var flat = raw.rank() == 1 ? raw : reshape(raw, {raw.size()});
  InterfaceVector iv;
  iv.read_keys = reshape(field(flat, l.read_keys), {config.heads, config.width});
  iv.read_strengths = oneplus(field(flat, l.read_strengths));
  iv.free_gates = sigmoid(field(flat, l.free_gates));
  iv.write_key = field(flat, l.write_key);
  iv.write_strength = oneplus(field(flat, l.write_strength));
  iv.write_value = field(flat, l.write_value);
  iv.erase = sigmoid(field(flat, l.erase));
  iv.write_mode = softmax_rows(field(flat, l.write_mode));
  iv.write_gate = sigmoid(field(flat, l.write_gate));
  return iv;
}

Tensor pack_interface(const MemoryConfig& config, const InterfaceFields& f) {
  const Layout l = layout_of(config);
  Tensor raw({config.interface_width()});
  auto put = [&raw](const Tensor& t, Field at, const char* name) {
    if (t.size() != at.length) {
      throw ShapeError(std::string("pack_interface: field ") + name + " has " + std::to_string(t.size()) +
                       " values, expected " + std::to_string(at.length));
    }
    std::copy(t.values.begin(), t.values.end(), raw.values.begin() + static_cast<std::ptrdiff_t>(at.offset));
  };
  put(f.read_keys, l.read_keys, "read_keys");
  put(f.read_strengths, l.read_strengths, "read_strengths");
  put(f.free_gates, l.free_gates, "free_gates");
  put(f.write_key, l.write_key, "write_key");
  put(f.write_strength, l.write_strength, "write_strength");
  put(f.write_value, l.write_value, "write_value");
  put(f.erase, l.erase, "erase");
  put(f.write_mode, l.write_mode, "write_mode");
  put(f.write_gate, l.write_gate, "write_gate");
  return raw;
}

InterfaceFields unpack_interface(const MemoryConfig& config, const Tensor& raw) {
  require_width(config, raw.size());
  const Layout l = layout_of(config);
  const std::size_t R = config.heads, D = config.width;
  return {segment(raw, l.read_keys, {R, D}),      segment(raw, l.read_strengths, {R}),
          segment(raw, l.free_gates, {R}),        segment(raw, l.write_key, {D}),
          segment(raw, l.write_strength, {1}),    segment(raw, l.write_value, {D}),
          segment(raw, l.erase, {D}),             segment(raw, l.write_mode, {3}),
          segment(raw, l.write_gate, {1})};
}

Tensor serialize_interface(const MemoryConfig& config, const InterfaceFields& a) {
  auto map = [](Tensor t, double (*f)(double)) {
    for (double& v : t.values) v = f(v);
    return t;
  };
  auto logit = +[](double p) {
    if (!(p > 0 && p < 1)) throw DomainError("gate value " + std::to_string(p) + " outside (0,1)");
    return std::log(p / (1.0 - p));
  };
  auto inv_oneplus = +[](double b) {
    if (!(b > 1)) throw DomainError("strength " + std::to_string(b) + " not above 1");
    const double y = b - 1.0;
    return y + std::log(-std::expm1(-y));
  };
  auto inv_softmax = +[](double g) {
    if (!(g > 0)) throw DomainError("mode weight " + std::to_string(g) + " not positive");
    return std::log(g);
  };
  InterfaceFields raw = a;
  raw.read_strengths = map(a.read_strengths, inv_oneplus);
  raw.free_gates = map(a.free_gates, logit);
  raw.write_strength = map(a.write_strength, inv_oneplus);
  raw.erase = map(a.erase, logit);
  raw.write_mode = map(a.write_mode, inv_softmax);
  raw.write_gate = map(a.write_gate, logit);
  return pack_interface(config, raw);
}

MemoryState initial_memory_state(Tape& tape, const MemoryConfig& c, Var initial_reads) {
  MemoryState s;
  s.memory = tape.constant(Tensor({c.slots, c.width}));
  s.usage = tape.constant(Tensor({c.slots}));
  s.read_weights = tape.constant(Tensor({c.heads, c.slots}));
  s.write_weight = tape.constant(Tensor({c.slots}));
  if (initial_reads.valid()) {
    if (initial_reads.size() != c.heads * c.width) {
      throw ShapeError("initial reads " + shape_str(initial_reads.shape()) + " for R=" + std::to_string(c.heads) +
                       ", D=" + std::to_string(c.width));
    }
    s.read_values = initial_reads.rank() == 2 ? initial_reads : reshape(initial_reads, {c.heads, c.width});
  } else {
    s.read_values = tape.constant(Tensor({c.heads, c.width}));
  }
  return s;
}

Var cosine_similarity(Var memory, Var keys) {
  if (memory.rank() != 2) throw ShapeError("cosine_similarity: memory must be [N×D], got " + shape_str(memory.shape()));
  const std::size_t N = memory.dim(0), D = memory.dim(1);
  const bool single = keys.rank() == 1;
  const std::size_t K = single ? 1 : keys.dim(0);
  if ((single && keys.size() != D) || (!single && (keys.rank() != 2 || keys.dim(1) != D))) {
    throw ShapeError("cosine_similarity: keys " + shape_str(keys.shape()) + " against memory " +
                     shape_str(memory.shape()));
  }
  auto mv = memory.values();
  auto kv = keys.values();
  std::vector<double> mnorm(N), knorm(K);
  for (std::size_t i = 0; i < N; ++i) {
    double s = kCosineEpsilon;
    for (std::size_t d = 0; d < D; ++d) s += mv[i * D + d] * mv[i * D + d];
    mnorm[i] = std::sqrt(s);
  }
  for (std::size_t k = 0; k < K; ++k) {
    double s = kCosineEpsilon;
    for (std::size_t d = 0; d < D; ++d) s += kv[k * D + d] * kv[k * D + d];
    knorm[k] = std::sqrt(s);
  }
  std::vector<double> out(K * N);
  for (std::size_t k = 0; k < K; ++k) {
    for (std::size_t i = 0; i < N; ++i) {
      double dot = 0.0;
      for (std::size_t d = 0; d < D; ++d) dot += kv[k * D + d] * mv[i * D + d];
      out[k * N + i] = dot / (knorm[k] * mnorm[i]);
    }
  }
  Shape shape = single ? Shape{N} : Shape{K, N};
  const auto im = memory.id(), ik = keys.id();
  return memory.tape().record(
      std::move(shape), std::move(out), {memory, keys},
      [im, ik, N, D, K, mnorm = std::move(mnorm), knorm = std::move(knorm)](Tape& t, std::uint32_t self) {
        auto g = t.out_grad(self);
        auto sim = t.value(self);
        auto mv = t.value(im);
        auto kv = t.value(ik);
        const bool want_m = t.requires_grad(im), want_k = t.requires_grad(ik);
        std::span<double> dm = want_m ? t.grad_buffer(im) : std::span<double>();
        std::span<double> dk = want_k ? t.grad_buffer(ik) : std::span<double>();
        for (std::size_t k = 0; k < K; ++k) {
          for (std::size_t i = 0; i < N; ++i) {
            const double gi = g[k * N + i];
            if (gi == 0.0) continue;
            const double q = knorm[k] * mnorm[i];
            const double s = sim[k * N + i];
            for (std::size_t d = 0; d < D; ++d) {
              const double key = kv[k * D + d], mem = mv[i * D + d];
              if (want_k) dk[k * D + d] += gi * (mem / q - s * key / (knorm[k] * knorm[k]));
              if (want_m) dm[i * D + d] += gi * (key / q - s * mem / (mnorm[i] * mnorm[i]));
            }
          }
        }
      });
}

Var content_weights(Var memory, Var keys, Var strengths) {
  Var sim = cosine_similarity(memory, keys);
  if (keys.rank() == 1) return softmax_rows(scale_by(sim, strengths));
  return softmax_rows(scale_rows(sim, strengths));
}

ReadResult memory_read(Var memory, const InterfaceVector& iface) {
  Var weights = content_weights(memory, iface.read_keys, iface.read_strengths);
  return {matmul(weights, memory), weights};
}

RetentionUsage retention_and_usage(Var free_gates, Var prev_read_weights, Var prev_usage, Var prev_write_weight) {
  const std::size_t R = prev_read_weights.dim(0);
  if (free_gates.size() != R) {
    throw ShapeError("retention: " + std::to_string(free_gates.size()) + " free gates for " + std::to_string(R) +
                     " read heads");
  }
  Var psi;
  for (std::size_t j = 0; j < R; ++j) {
    Var term = one_minus(scale_by(row(prev_read_weights, j), slice(free_gates, 0, j, j + 1)));
    psi = j == 0 ? term : psi * term;
  }
  Var carried = prev_usage + prev_write_weight - prev_usage * prev_write_weight;
  return {psi, carried * psi};
}

std::vector<std::size_t> usage_order(std::span<const double> usage) {
  std::vector<std::size_t> order(usage.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(), [&usage](std::size_t a, std::size_t b) { return usage[a] < usage[b]; });
  return order;
}

Var allocation(Var usage) {
  auto u = usage.values();
  const std::size_t N = u.size();
  std::vector<std::size_t> order = usage_order(u);
  std::vector<double> a(N);
  double prefix = 1.0;
  for (std::size_t k = 0; k < N; ++k) {
    const std::size_t slot = order[k];
    a[slot] = (1.0 - u[slot]) * prefix;
    prefix *= u[slot];
  }
  const auto iu = usage.id();
  return usage.tape().record(usage.shape(), std::move(a), {usage},
                             [iu, N, order = std::move(order)](Tape& t, std::uint32_t self) {
                               auto g = t.out_grad(self);
                               auto u = t.value(iu);
                               auto du = t.grad_buffer(iu);
                               double before_i = 1.0;  // Π_{j<i} u[Φj]
                               for (std::size_t i = 0; i < N; ++i) {
                                 const std::size_t si = order[i];
                                 double acc = -g[si] * before_i;
                                 double excluding = before_i;  // Π_{j<k, j≠i} u[Φj]
                                 for (std::size_t k = i + 1; k < N; ++k) {
                                   const std::size_t sk = order[k];
                                   acc += g[sk] * (1.0 - u[sk]) * excluding;
                                   excluding *= u[sk];
                                 }
                                 du[si] += acc;
                                 before_i *= u[si];
                               }
                             });
}

Var write_weight(Var allocation_weights, Var prev_read_weights, Var content_write, Var write_mode, Var write_gate) {
  const double heads = static_cast<double>(prev_read_weights.dim(0));
  Var last_read = scale(sum_axis0(prev_read_weights), 1.0 / heads);
  Var mixed = scale_by(allocation_weights, slice(write_mode, 0, 0, 1)) +
              scale_by(last_read, slice(write_mode, 0, 1, 2)) +
              scale_by(content_write, slice(write_mode, 0, 2, 3));
  return scale_by(mixed, write_gate);
}

Var memory_write(Var memory, Var write_weight, Var erase, Var value) {
  Var kept = memory * one_minus(outer(write_weight, erase));
  return kept + outer(write_weight, value);
}

StepResult mam_step(const MemoryConfig& config, const MemoryState& state, Var raw_interface) {
  const InterfaceVector iface = parse_interface(config, raw_interface);
  const RetentionUsage ru =
      retention_and_usage(iface.free_gates, state.read_weights, state.usage, state.write_weight);
  Var alloc = allocation(ru.usage);
  Var content_write = content_weights(state.memory, iface.write_key, iface.write_strength);
  Var ww = write_weight(alloc, state.read_weights, content_write, iface.write_mode, iface.write_gate);
  Var written = memory_write(state.memory, ww, iface.erase, iface.write_value);
  const ReadResult read = memory_read(written, iface);
  StepResult out;
  out.state = {written, ru.usage, read.weights, ww, read.values};
  out.read_out = reshape(read.values, {config.heads * config.width});
  return out;
}

}  // namespace cmam
