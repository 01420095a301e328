#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

#include "cmam/memory.hpp"
#include "doctest.h"
#include "test_support.hpp"

using namespace cmam;
using cmam::testing::rand_tensor;

namespace {

// Independent reference for one content weighting.
std::vector<double> content_oracle(const Tensor& M, std::span<const double> key, double beta) {
  const std::size_t N = M.shape[0], D = M.shape[1];
  double kn = 0.0;
  for (double v : key) kn += v * v;
  kn = std::sqrt(kn + 1e-8);
  std::vector<double> score(N);
  for (std::size_t i = 0; i < N; ++i) {
    double dot = 0.0, mn = 0.0;
    for (std::size_t d = 0; d < D; ++d) {
      dot += M(i, d) * key[d];
      mn += M(i, d) * M(i, d);
    }
    score[i] = beta * dot / (std::sqrt(mn + 1e-8) * kn);
  }
  const double mx = *std::max_element(score.begin(), score.end());
  double z = 0.0;
  for (double& s : score) z += (s = std::exp(s - mx));
  for (double& s : score) s /= z;
  return score;
}

InterfaceFields neutral_fields(const MemoryConfig& c) {
  InterfaceFields f;
  f.read_keys = Tensor({c.heads, c.width}, 0.1);
  f.read_strengths = Tensor({c.heads}, 2.0);
  f.free_gates = Tensor({c.heads}, 0.5);
  f.write_key = Tensor({c.width}, 0.1);
  f.write_strength = Tensor({1}, 2.0);
  f.write_value = Tensor({c.width}, 0.0);
  f.erase = Tensor({c.width}, 0.5);
  f.write_mode = Tensor::vector({1.0 / 3, 1.0 / 3, 1.0 / 3});
  f.write_gate = Tensor({1}, 0.5);
  return f;
}

}  // namespace

TEST_CASE("interface width and zero parse") {
  MemoryConfig c{16, 16, 4};
  CHECK(c.interface_width() == 125);
  Tape t;
  auto iface = parse_interface(c, t.constant(Tensor({125})));
  for (double b : iface.read_strengths.values()) CHECK(b == doctest::Approx(1 + std::log(2.0)).epsilon(1e-15));
  CHECK(iface.write_strength.item() == doctest::Approx(1 + std::log(2.0)).epsilon(1e-15));
  for (double f : iface.free_gates.values()) CHECK(f == 0.5);
  for (double e : iface.erase.values()) CHECK(e == 0.5);
  for (double m : iface.write_mode.values()) CHECK(m == doctest::Approx(1.0 / 3).epsilon(1e-15));
  CHECK(iface.write_gate.item() == 0.5);
  CHECK(iface.read_keys.shape() == Shape{4, 16});
}

TEST_CASE("interface width mismatch names both widths") {
  MemoryConfig c{16, 16, 4};
  Tape t;
  try {
    parse_interface(c, t.constant(Tensor({124})));
    FAIL("expected ConfigError");
  } catch (const ConfigError& e) {
    const std::string msg = e.what();
    CHECK(msg.find("125") != std::string::npos);
    CHECK(msg.find("124") != std::string::npos);
  }
}

TEST_CASE("parse of serialize reproduces the activated fields") {
  MemoryConfig c{5, 3, 2};
  std::mt19937_64 rng(41);
  std::uniform_real_distribution<double> gate(0.05, 0.95), strength(1.05, 6.0);
  for (int trial = 0; trial < 50; ++trial) {
    InterfaceFields f = neutral_fields(c);
    f.read_keys = rand_tensor({2, 3}, rng);
    for (double& v : f.read_strengths.values) v = strength(rng);
    for (double& v : f.free_gates.values) v = gate(rng);
    f.write_key = rand_tensor({3}, rng);
    f.write_strength.values[0] = strength(rng);
    f.write_value = rand_tensor({3}, rng);
    for (double& v : f.erase.values) v = gate(rng);
    double total = 0.0;
    for (double& v : f.write_mode.values) total += (v = gate(rng));
    for (double& v : f.write_mode.values) v /= total;
    f.write_gate.values[0] = gate(rng);

    Tensor raw = serialize_interface(c, f);
    CHECK(unpack_interface(c, pack_interface(c, unpack_interface(c, raw))) == unpack_interface(c, raw));
    Tape t;
    auto p = parse_interface(c, t.constant(raw));
    auto close = [](const Var& v, const Tensor& want) {
      for (std::size_t i = 0; i < want.size(); ++i) CHECK(v.value(i) == doctest::Approx(want.values[i]).epsilon(1e-10));
    };
    close(p.read_keys, f.read_keys);
    close(p.read_strengths, f.read_strengths);
    close(p.free_gates, f.free_gates);
    close(p.write_key, f.write_key);
    close(p.write_strength, f.write_strength);
    close(p.write_value, f.write_value);
    close(p.erase, f.erase);
    close(p.write_mode, f.write_mode);
    close(p.write_gate, f.write_gate);
  }
}

TEST_CASE("content weights reference cases") {
  Tape t;
  auto M = t.constant(Tensor::matrix(2, 2, {1, 0, 0, 1}));
  auto w = content_weights(M, t.constant(Tensor::vector({1, 0})), t.constant(Tensor::vector({1.0})));
  const double e = std::exp(1.0);
  // The norm guard shifts the cosine by about 1e-8.
  CHECK(std::abs(w.value(0) - e / (e + 1)) <= 1e-8);
  CHECK(std::abs(w.value(1) - 1 / (e + 1)) <= 1e-8);
  CHECK(w.value(0) == doctest::Approx(0.7311).epsilon(1e-4));

  auto ortho = t.constant(Tensor::matrix(3, 3, {1, 0, 0, 0, 1, 0, 0, 0, 1}));
  auto sharp = content_weights(ortho, t.constant(Tensor::vector({1, 0, 0})), t.constant(Tensor::vector({100.0})));
  CHECK(sharp.value(0) > 1 - 1e-12);

  auto same = t.constant(Tensor::matrix(4, 2, {0.3, -0.2, 0.3, -0.2, 0.3, -0.2, 0.3, -0.2}));
  for (double beta : {1.0, 7.0, 50.0}) {
    auto u = content_weights(same, t.constant(Tensor::vector({0.9, 0.4})), t.constant(Tensor::vector({beta})));
    for (double v : u.values()) CHECK(v == doctest::Approx(0.25).epsilon(1e-14));
  }

  auto zeros = t.constant(Tensor({3, 2}));
  auto z = content_weights(zeros, t.constant(Tensor::vector({1, 1})), t.constant(Tensor::vector({5.0})));
  for (double v : z.values()) CHECK(v == doctest::Approx(1.0 / 3).epsilon(1e-14));
}

TEST_CASE("content weights match the oracle for batched keys") {
  std::mt19937_64 rng(42);
  for (int trial = 0; trial < 20; ++trial) {
    Tensor M = rand_tensor({6, 4}, rng), K = rand_tensor({3, 4}, rng), B = rand_tensor({3}, rng, 1, 8);
    Tape t;
    auto w = content_weights(t.constant(M), t.constant(K), t.constant(B)).tensor();
    for (std::size_t j = 0; j < 3; ++j) {
      auto want = content_oracle(M, std::span(K.values).subspan(j * 4, 4), B.values[j]);
      for (std::size_t i = 0; i < 6; ++i) CHECK(w(j, i) == doctest::Approx(want[i]).epsilon(1e-12));
    }
  }
}

TEST_CASE("cosine and content gradients") {
  std::mt19937_64 rng(43);
  for (int trial = 0; trial < 20; ++trial) {
    std::vector<Tensor> pt{rand_tensor({5, 3}, rng), rand_tensor({2, 3}, rng), rand_tensor({2}, rng, 1, 4),
                           rand_tensor({2, 5}, rng)};
    auto rep = gradcheck(
        [](Tape&, std::span<const Var> v) {
          return sum(content_weights(v[0], v[1], v[2]) * v[3]) + sum(cosine_similarity(v[0], row(v[1], 0)));
        },
        pt);
    CHECK(rep.max_rel_error <= 1e-6);
  }
}

TEST_CASE("cosine gradient at a zero memory row") {
  // The guarded norm of a zero row is 1e-4, so the difference step must be far smaller.
  std::mt19937_64 rng(53);
  std::vector<Tensor> pt{rand_tensor({3, 3}, rng), rand_tensor({3}, rng), rand_tensor({3}, rng)};
  std::fill(pt[0].values.begin(), pt[0].values.begin() + 3, 0.0);
  GradcheckOptions opt;
  opt.step = 1e-9;
  auto rep = gradcheck(
      [](Tape&, std::span<const Var> v) { return sum(cosine_similarity(v[0], v[1]) * v[2]); }, pt, opt);
  CHECK(rep.max_rel_error <= 1e-4);
  Tape t;
  CHECK(cosine_similarity(t.constant(pt[0]), t.constant(pt[1])).value(0) == 0.0);
}

TEST_CASE("memory read cases") {
  MemoryConfig c{4, 3, 2};
  std::mt19937_64 rng(44);
  Tensor M = rand_tensor({4, 3}, rng);
  Tape t;
  auto Mv = t.constant(M);
  // Large strength on a key equal to row 2 gives a near one-hot read.
  InterfaceFields f = neutral_fields(c);
  for (std::size_t d = 0; d < 3; ++d) {
    f.read_keys.values[d] = M(2, d);
    f.read_keys.values[3 + d] = 0.0;
  }
  f.read_strengths.values = {1e4, 1.5};
  auto iface = parse_interface(c, t.constant(serialize_interface(c, f)));
  auto r = memory_read(Mv, iface);
  for (std::size_t d = 0; d < 3; ++d) CHECK(r.values.tensor()(0, d) == doctest::Approx(M(2, d)).epsilon(1e-9));
  // A zero key scores every slot 0: uniform weights, so the column mean is read.
  for (std::size_t d = 0; d < 3; ++d) {
    const double mean = (M(0, d) + M(1, d) + M(2, d) + M(3, d)) / 4;
    CHECK(r.values.tensor()(1, d) == doctest::Approx(mean).epsilon(1e-12));
  }
  // Brute-force summation over slots.
  auto w = r.weights.tensor();
  for (std::size_t j = 0; j < 2; ++j)
    for (std::size_t d = 0; d < 3; ++d) {
      double acc = 0.0;
      for (std::size_t i = 0; i < 4; ++i) acc += w(j, i) * M(i, d);
      CHECK(r.values.tensor()(j, d) == doctest::Approx(acc).epsilon(1e-12));
    }
}

TEST_CASE("read is linear in memory for fixed weights") {
  std::mt19937_64 rng(45);
  Tape t;
  auto w = softmax_rows(t.constant(rand_tensor({2, 5}, rng)));
  Tensor a = rand_tensor({5, 3}, rng), b = rand_tensor({5, 3}, rng), ab = a;
  for (std::size_t i = 0; i < ab.size(); ++i) ab.values[i] += b.values[i];
  auto ra = matmul(w, t.constant(a)).tensor(), rb = matmul(w, t.constant(b)).tensor(),
       rab = matmul(w, t.constant(ab)).tensor();
  for (std::size_t i = 0; i < rab.size(); ++i) CHECK(rab.values[i] == doctest::Approx(ra.values[i] + rb.values[i]).epsilon(1e-12));
}

TEST_CASE("retention and usage cases") {
  Tape t;
  auto zero_f = t.constant(Tensor::vector({0.0}));
  auto wr = t.constant(Tensor::matrix(1, 4, {0, 0, 0, 1}));
  auto u = t.constant(Tensor::vector({0.2, 0.4, 0.6, 0.8}));
  auto ww = t.constant(Tensor({4}));
  auto a = retention_and_usage(zero_f, wr, u, ww);
  CHECK(a.retention.tensor().values == std::vector<double>(4, 1.0));
  CHECK(a.usage.tensor().values == u.tensor().values);

  auto b = retention_and_usage(t.constant(Tensor::vector({1.0})), wr, u, ww);
  CHECK(b.retention.value(3) == 0.0);
  CHECK(b.usage.value(3) == 0.0);
  CHECK(b.usage.value(0) == doctest::Approx(0.2));
}

TEST_CASE("allocation cases") {
  Tape t;
  auto a0 = allocation(t.constant(Tensor({4}))).tensor().values;
  CHECK(a0 == std::vector<double>{1, 0, 0, 0});
  auto a1 = allocation(t.constant(Tensor({4}, 1.0))).tensor().values;
  CHECK(a1 == std::vector<double>(4, 0.0));
  auto a2 = allocation(t.constant(Tensor::vector({0.5, 0.1}))).tensor().values;
  CHECK(std::abs(a2[0] - 0.05) <= 1e-12);
  CHECK(std::abs(a2[1] - 0.9) <= 1e-12);
  CHECK(usage_order(std::vector<double>{0.5, 0.1}) == std::vector<std::size_t>{1, 0});
  CHECK(usage_order(std::vector<double>{0.3, 0.3, 0.1}) == std::vector<std::size_t>{2, 0, 1});
}

TEST_CASE("allocation order is invariant to a common usage shift") {
  std::mt19937_64 rng(46);
  for (int trial = 0; trial < 200; ++trial) {
    Tensor u = rand_tensor({8}, rng, 0, 1);
    const double headroom = 1.0 - *std::max_element(u.values.begin(), u.values.end());
    const double shift = std::uniform_real_distribution<double>(0, headroom)(rng);
    Tensor shifted = u;
    for (double& v : shifted.values) v += shift;
    CHECK(usage_order(u.values) == usage_order(shifted.values));
  }
}

TEST_CASE("allocation gradient with the order held fixed") {
  std::mt19937_64 rng(47);
  for (int trial = 0; trial < 20; ++trial) {
    std::vector<Tensor> pt{rand_tensor({6}, rng, 0.05, 0.95), rand_tensor({6}, rng)};
    auto rep = gradcheck([](Tape&, std::span<const Var> v) { return sum(allocation(v[0]) * v[1]); }, pt);
    CHECK(rep.max_rel_error <= 1e-6);
  }
}

TEST_CASE("write weight cases") {
  Tape t;
  std::mt19937_64 rng(48);
  auto a = allocation(t.constant(rand_tensor({5}, rng, 0, 1)));
  auto wr = softmax_rows(t.constant(rand_tensor({2, 5}, rng)));
  auto cw = softmax_rows(t.constant(rand_tensor({5}, rng)));
  auto refused = write_weight(a, wr, cw, t.constant(Tensor::vector({0.2, 0.3, 0.5})), t.constant(Tensor::vector({0.0})));
  CHECK(refused.tensor().values == std::vector<double>(5, 0.0));
  auto alloc_only = write_weight(a, wr, cw, t.constant(Tensor::vector({1, 0, 0})), t.constant(Tensor::vector({1.0})));
  CHECK(alloc_only.tensor().values == a.tensor().values);
  auto last_read = write_weight(a, wr, cw, t.constant(Tensor::vector({0, 1, 0})), t.constant(Tensor::vector({1.0})));
  for (std::size_t i = 0; i < 5; ++i)
    CHECK(last_read.value(i) == doctest::Approx((wr.tensor()(0, i) + wr.tensor()(1, i)) / 2).epsilon(1e-14));
}

TEST_CASE("memory write cases") {
  std::mt19937_64 rng(49);
  Tape t;
  Tensor M = rand_tensor({4, 3}, rng);
  auto Mv = t.constant(M);
  auto v = t.constant(rand_tensor({3}, rng));
  auto e = t.constant(rand_tensor({3}, rng, 0, 1));
  CHECK(memory_write(Mv, t.constant(Tensor({4})), e, v).tensor() == M);

  auto replaced = memory_write(Mv, t.constant(Tensor::vector({0, 0, 1, 0})), t.constant(Tensor({3}, 1.0)), v).tensor();
  for (std::size_t i = 0; i < 4; ++i)
    for (std::size_t d = 0; d < 3; ++d) CHECK(replaced(i, d) == (i == 2 ? v.value(d) : M(i, d)));

  for (int trial = 0; trial < 100; ++trial) {
    auto w = t.constant(rand_tensor({4}, rng, 0, 1));
    auto vv = t.constant(rand_tensor({3}, rng, -2, 2));
    auto out = memory_write(Mv, w, t.constant(rand_tensor({3}, rng, 0, 1)), vv).tensor();
    for (std::size_t i = 0; i < 4; ++i)
      for (std::size_t d = 0; d < 3; ++d) CHECK(std::abs(out(i, d)) <= std::abs(M(i, d)) + std::abs(vv.value(d)) + 1e-15);
  }
}

TEST_CASE("mam_step: refused write with a matching key reads the slot back") {
  MemoryConfig c{4, 3, 1};
  std::mt19937_64 rng(50);
  Tape t;
  Tensor M = rand_tensor({4, 3}, rng);
  MemoryState s = initial_memory_state(t, c);
  s.memory = t.constant(M);
  InterfaceFields f = neutral_fields(c);
  for (std::size_t d = 0; d < 3; ++d) f.read_keys.values[d] = M(1, d);
  f.read_strengths.values[0] = 1e4;
  f.write_gate.values[0] = 1e-300;  // serialize needs a value inside (0,1)
  Tensor raw = serialize_interface(c, f);
  raw.values.back() = -1e4;          // sigmoid(−1e4) underflows to exactly 0
  auto step = mam_step(c, s, t.constant(raw));
  CHECK(step.state.memory.tensor() == M);
  for (std::size_t d = 0; d < 3; ++d) CHECK(step.read_out.value(d) == doctest::Approx(M(1, d)).epsilon(1e-9));
}

TEST_CASE("mam_step: fresh state allocates slot 0 and reads it back") {
  MemoryConfig c{4, 3, 2};
  Tape t;
  MemoryState s = initial_memory_state(t, c);
  InterfaceFields f = neutral_fields(c);
  const std::vector<double> v{0.7, -0.3, 0.5};
  f.write_value.values = v;
  f.write_mode.values = {1 - 2e-15, 1e-15, 1e-15};
  f.write_gate.values[0] = 1 - 1e-15;
  f.erase.values = {1 - 1e-15, 1 - 1e-15, 1 - 1e-15};
  for (std::size_t j = 0; j < 2; ++j)
    for (std::size_t d = 0; d < 3; ++d) f.read_keys.values[j * 3 + d] = v[d];
  f.read_strengths.values = {1e3, 1e3};
  auto step = mam_step(c, s, t.constant(serialize_interface(c, f)));
  auto M = step.state.memory.tensor();
  for (std::size_t d = 0; d < 3; ++d) CHECK(M(0, d) == doctest::Approx(v[d]).epsilon(1e-9));
  for (std::size_t j = 0; j < 2; ++j)
    for (std::size_t d = 0; d < 3; ++d) CHECK(std::abs(step.read_out.value(j * 3 + d) - v[d]) <= 1e-6);
}

TEST_CASE("addressing invariants over random steps") {
  MemoryConfig c{6, 4, 3};
  std::mt19937_64 rng(51);
  Tape t;
  MemoryState s = initial_memory_state(t, c);
  for (int step = 0; step < 300; ++step) {
    Tensor raw = rand_tensor({c.interface_width()}, rng, -3, 3);
    auto iface = parse_interface(c, t.constant(raw));
    auto r = mam_step(c, s, t.constant(raw));
    const Tensor wr = r.state.read_weights.tensor();
    for (std::size_t j = 0; j < c.heads; ++j) {
      double total = 0.0;
      for (std::size_t i = 0; i < c.slots; ++i) {
        CHECK(wr(j, i) >= 0.0);
        total += wr(j, i);
      }
      CHECK(std::abs(total - 1.0) <= 1e-6);
    }
    for (double u : r.state.usage.values()) CHECK((u >= 0.0 && u <= 1.0));
    double mass = 0.0;
    for (double w : r.state.write_weight.values()) {
      CHECK(w >= 0.0);
      mass += w;
    }
    CHECK(mass <= iface.write_gate.item() + 1e-12);
    s = r.state;
  }
}

TEST_CASE("mam_step gradcheck") {
  MemoryConfig c{4, 3, 2};
  std::mt19937_64 rng(52);
  for (int trial = 0; trial < 5; ++trial) {
    Tensor u = rand_tensor({4}, rng, 0.05, 0.95);
    Tensor wr0 = rand_tensor({2, 4}, rng, 0, 1), ww0 = rand_tensor({4}, rng, 0, 0.2);
    std::vector<Tensor> pt{rand_tensor({4, 3}, rng), rand_tensor({c.interface_width()}, rng, -2, 2),
                           rand_tensor({c.interface_width()}, rng, -2, 2), rand_tensor({6}, rng)};
    auto rep = gradcheck(
        [&](Tape& t, std::span<const Var> v) {
          MemoryState s = initial_memory_state(t, c);
          s.memory = v[0];
          s.usage = t.constant(u);
          s.read_weights = softmax_rows(t.constant(wr0));
          s.write_weight = t.constant(ww0);
          auto a = mam_step(c, s, v[1]);
          auto b = mam_step(c, a.state, v[2]);
          return sum(b.read_out * v[3]) + sum(a.read_out * v[3]);
        },
        pt);
    CHECK(rep.max_rel_error <= 1e-4);
  }
}
