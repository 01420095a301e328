#include "cmam/gradcheck_suite.hpp"

#include <cmath>
#include <map>
#include <random>

#include "cmam/ctc.hpp"
#include "cmam/model.hpp"

namespace cmam {

namespace {

struct Suite {
  std::mt19937_64 rng;
  std::vector<GradcheckCase> cases;

  Tensor uniform(Shape shape, double lo = -1.0, double hi = 1.0) { return random_uniform(std::move(shape), lo, hi, rng); }

  // Uniform in ±[margin, hi] so kinked functions are probed away from the kink.
  Tensor away_from_zero(Shape shape, double margin, double hi) {
    Tensor t = uniform(std::move(shape), margin, hi);
    std::bernoulli_distribution flip(0.5);
    for (double& v : t.values) {
      if (flip(rng)) v = -v;
    }
    return t;
  }

  void check(std::string name, double tolerance, const ScalarFn& f, std::vector<Tensor> point,
             GradcheckOptions options = {}) {
    options.retry_multipliers = {0.1, 0.01, 10.0};
    options.retry_above = tolerance;
    const GradcheckReport r = gradcheck(f, point, options);
    cases.push_back(
        {std::move(name), r.max_rel_error, tolerance, r.coordinates, r.retried, r.worst_analytic, r.worst_numeric});
  }

  // Weighted sum against a fixed random probe, so every output coordinate matters.
  Var probe_sum(Tape& t, Var y) { return sum(y * t.constant(probes.at(y.size()))); }
  Tensor& probe_for(std::size_t n) {
    auto it = probes.find(n);
    if (it == probes.end()) it = probes.emplace(n, away_from_zero({n}, 0.5, 1.5)).first;
    return it->second;
  }
  std::map<std::size_t, Tensor> probes;
};

void perturb(Model& m, std::mt19937_64& rng, double scale) {
  std::uniform_real_distribution<double> d(-scale, scale);
  for (std::size_t i = 0; i < m.params().size(); ++i) {
    for (double& v : m.params().tensor(i).values) v += d(rng);
  }
}

}  // namespace

std::vector<GradcheckCase> run_gradcheck_suite(std::string_view profile, std::uint64_t seed) {
  Suite s{std::mt19937_64(seed), {}, {}};
  constexpr double kOp = 1e-6, kComposite = 1e-4;
  // The memory step has no ReLU-style kinks, so it affords a larger step and less round-off.
  constexpr double kMemoryStep = 1e-4;
  constexpr std::size_t kPoints = 20;

  auto flat = [&](Tape& t, Var y) {
    s.probe_for(y.size());
    return s.probe_sum(t, reshape(y, {y.size()}));
  };

  // Elementwise functions, each at 20 random points.
  const std::vector<std::pair<const char*, Unary>> unary = {
      {"sigmoid", Unary::Sigmoid}, {"tanh", Unary::Tanh}, {"softplus", Unary::Softplus},
      {"oneplus", Unary::Oneplus}, {"relu", Unary::Relu}, {"exp", Unary::Exp}};
  for (const auto& [name, op] : unary) {
    s.check(name, kOp, [&, op = op](Tape& t, std::span<const Var> v) { return flat(t, map_unary(v[0], op)); },
            {s.away_from_zero({kPoints}, 0.05, 3.0)});
  }
  s.check("log", kOp, [&](Tape& t, std::span<const Var> v) { return flat(t, log(v[0])); },
          {s.uniform({kPoints}, 0.1, 4.0)});
  s.check("add", kOp, [&](Tape& t, std::span<const Var> v) { return flat(t, v[0] + v[1]); },
          {s.uniform({kPoints}), s.uniform({kPoints})});
  s.check("sub", kOp, [&](Tape& t, std::span<const Var> v) { return flat(t, v[0] - v[1]); },
          {s.uniform({kPoints}), s.uniform({kPoints})});
  s.check("mul", kOp, [&](Tape& t, std::span<const Var> v) { return flat(t, v[0] * v[1]); },
          {s.uniform({kPoints}), s.uniform({kPoints})});
  s.check("affine", kOp, [&](Tape& t, std::span<const Var> v) { return flat(t, affine(v[0], -1.7, 0.3)); },
          {s.uniform({kPoints})});
  s.check("scale_rows", kOp, [&](Tape& t, std::span<const Var> v) { return flat(t, scale_rows(v[0], v[1])); },
          {s.uniform({4, 5}), s.uniform({4})});
  s.check("add_rows", kOp, [&](Tape& t, std::span<const Var> v) { return flat(t, add_rows(v[0], v[1])); },
          {s.uniform({4, 5}), s.uniform({5})});

  // Linear algebra and normalisers.
  s.check("matmul", kOp, [&](Tape& t, std::span<const Var> v) { return flat(t, matmul(v[0], v[1])); },
          {s.uniform({3, 4}), s.uniform({4, 5})});
  s.check("matvec", kOp, [&](Tape& t, std::span<const Var> v) { return flat(t, matvec(v[0], v[1])); },
          {s.uniform({6, 4}), s.uniform({4})});
  s.check("outer", kOp, [&](Tape& t, std::span<const Var> v) { return flat(t, outer(v[0], v[1])); },
          {s.uniform({3}), s.uniform({4})});
  s.check("transpose", kOp, [&](Tape& t, std::span<const Var> v) { return flat(t, transpose(v[0])); },
          {s.uniform({3, 4})});
  s.check("softmax", kOp, [&](Tape& t, std::span<const Var> v) { return flat(t, softmax_rows(v[0])); },
          {s.uniform({4, 5}, -3, 3)});
  s.check("log_softmax", kOp, [&](Tape& t, std::span<const Var> v) { return flat(t, log_softmax_rows(v[0])); },
          {s.uniform({4, 5}, -3, 3)});
  s.check("concat_slice", kOp,
          [&](Tape& t, std::span<const Var> v) { return flat(t, slice(concat({v[0], v[1]}, 1), 1, 1, 6)); },
          {s.uniform({3, 2}), s.uniform({3, 5})});

  // Layers.
  s.check("linear", kOp, [&](Tape& t, std::span<const Var> v) { return flat(t, linear(v[0], v[1], v[2])); },
          {s.uniform({5, 4}), s.uniform({5}), s.uniform({4})});
  {
    const Conv2dSpec spec{2, 3, 3, 3, 1, 1, 1};
    s.check("conv2d", 1e-5, [&, spec](Tape& t, std::span<const Var> v) { return flat(t, conv2d(spec, v[0], v[1], v[2])); },
            {s.uniform({2, 5, 6}), s.uniform({3, 2, 3, 3}), s.uniform({3})});
    s.check("maxpool2d", kOp, [&](Tape& t, std::span<const Var> v) { return flat(t, maxpool2d({}, v[0])); },
            {s.uniform({2, 4, 6})});
  }
  {
    const LabelSeq label{1, 3, 3, 2};
    s.check("ctc_loss", 1e-5, [&](Tape&, std::span<const Var> v) { return ctc_loss(v[0], label); },
            {s.uniform({9, 4}, -2, 2)});
  }

  // Composites at the requested profile.
  const ModelConfig base = profile_config(profile);
  const std::size_t H = base.hidden, in = 6;
  s.check("lstm_3_steps", kComposite,
          [&](Tape& t, std::span<const Var> v) {
            LstmParams p{v[0], v[1]};
            Var h = v[2], c = v[3];
            Var acc;
            for (std::size_t k = 0; k < 3; ++k) {
              const LstmOutput o = lstm_step(p, row(v[4], k), h, c);
              h = o.h;
              c = o.c;
              Var term = flat(t, o.o);
              acc = acc.valid() ? acc + term : term;
            }
            return acc;
          },
          {s.uniform(lstm_weight_shape(in, H), -0.3, 0.3), s.uniform({4 * H}, -0.5, 0.5), s.uniform({H}),
           s.uniform({H}), s.uniform({3, in})},
          {1e-5, 10, seed + 1});

  const MemoryConfig mem = base.memory;
  s.check("mam_step_2_steps", kComposite,
          [&](Tape& t, std::span<const Var> v) {
            MemoryState st = initial_memory_state(t, mem);
            st.memory = v[0];
            const StepResult a = mam_step(mem, st, v[1]);
            const StepResult b = mam_step(mem, a.state, v[2]);
            return flat(t, a.read_out) + flat(t, b.read_out);
          },
          {s.uniform({mem.slots, mem.width}), s.uniform({mem.interface_width()}, -2, 2),
           s.uniform({mem.interface_width()}, -2, 2)},
          {kMemoryStep, 40, seed + 2});

  for (ModelKind kind : {ModelKind::Cmam, ModelKind::Crnn}) {
    ModelConfig c = profile_config(profile, kind, 5);
    c.refinements = 1;
    Model m(c, seed + 3);
    perturb(m, s.rng, 0.1);
    std::vector<Tensor> point;
    for (std::size_t i = 0; i < m.params().size(); ++i) point.push_back(m.params().tensor(i));
    const std::size_t n = point.size();
    point.push_back(s.uniform({c.stack().input_height, 12}, 0, 1));  // three output frames
    const std::string name = std::string(kind == ModelKind::Cmam ? "cmam" : "crnn") + "_full_T3";
    s.check(name, kComposite,
            [&](Tape& t, std::span<const Var> v) {
              const BoundModel b = m.structure({v.begin(), v.begin() + static_cast<std::ptrdiff_t>(n)});
              return flat(t, m.logits(b, v[n]));
            },
            point, {1e-5, 4, seed + 4});
  }
  return s.cases;
}

}  // namespace cmam
