#include <cmath>
#include <random>

#include "cmam/layers.hpp"
#include "doctest.h"
#include "test_support.hpp"

using namespace cmam;
using cmam::testing::rand_tensor;

TEST_CASE("linear special cases") {
  Tape t;
  auto x = t.constant(Tensor::vector({1.5, -2.0, 0.25}));
  auto eye = t.constant(Tensor::matrix(3, 3, {1, 0, 0, 0, 1, 0, 0, 0, 1}));
  CHECK(linear(eye, t.constant(Tensor({3})), x).tensor().values == x.tensor().values);
  auto c = t.constant(Tensor::vector({4, 5}));
  CHECK(linear(t.constant(Tensor({2, 3})), c, x).tensor().values == c.tensor().values);
  CHECK_THROWS_AS(linear(t.constant(Tensor({2, 2})), c, x), ShapeError);
}

TEST_CASE("linear gradcheck") {
  std::mt19937_64 rng(21);
  for (int trial = 0; trial < 20; ++trial) {
    std::vector<Tensor> pt{rand_tensor({3, 4}, rng), rand_tensor({3}, rng), rand_tensor({4}, rng),
                           rand_tensor({3}, rng)};
    auto rep = gradcheck(
        [](Tape&, std::span<const Var> v) { return sum(linear(v[0], v[1], v[2]) * v[3]); }, pt);
    CHECK(rep.max_rel_error <= 1e-6);
  }
}

TEST_CASE("lstm zero parameters give zero state") {
  Tape t;
  LstmParams p{t.constant(Tensor(lstm_weight_shape(3, 5))), t.constant(Tensor({20}))};
  auto out = lstm_step(p, t.constant(Tensor::vector({1, 2, 3})), t.constant(Tensor({5})), t.constant(Tensor({5})));
  CHECK(out.h.tensor().values == std::vector<double>(5, 0.0));
  CHECK(out.c.tensor().values == std::vector<double>(5, 0.0));
  CHECK(out.o.tensor().values == out.h.tensor().values);
  CHECK_THROWS_AS(lstm_step(p, t.constant(Tensor({4})), t.constant(Tensor({5})), t.constant(Tensor({5}))),
                  ShapeError);
}

TEST_CASE("lstm cell grows by at most one per step") {
  std::mt19937_64 rng(22);
  Tape t;
  LstmParams p{t.constant(rand_tensor(lstm_weight_shape(3, 4), rng, -3, 3)), t.constant(rand_tensor({16}, rng, -3, 3))};
  Var h = t.constant(Tensor({4})), c = t.constant(Tensor({4}));
  for (int step = 0; step < 50; ++step) {
    auto out = lstm_step(p, t.constant(rand_tensor({3}, rng, -5, 5)), h, c);
    for (std::size_t i = 0; i < 4; ++i) CHECK(std::abs(out.c.value(i)) <= std::abs(c.value(i)) + 1.0 + 1e-15);
    h = out.h;
    c = out.c;
  }
}

TEST_CASE("unrolled three-step lstm gradcheck") {
  std::mt19937_64 rng(23);
  std::vector<Tensor> pt{rand_tensor(lstm_weight_shape(3, 4), rng), rand_tensor({16}, rng), rand_tensor({3, 3}, rng),
                         rand_tensor({4}, rng), rand_tensor({4}, rng)};
  auto rep = gradcheck(
      [](Tape&, std::span<const Var> v) {
        LstmParams p{v[0], v[1]};
        Var h = v[3], c = v[4];
        Var acc;
        for (std::size_t s = 0; s < 3; ++s) {
          auto out = lstm_step(p, row(v[2], s), h, c);
          h = out.h;
          c = out.c;
          acc = acc.valid() ? acc + sum(out.o * out.o) : sum(out.o * out.o);
        }
        return acc + sum(c);
      },
      pt);
  CHECK(rep.max_rel_error <= 1e-5);
}

TEST_CASE("conv2d identity and box kernels") {
  std::mt19937_64 rng(24);
  Tape t;
  auto img = t.constant(rand_tensor({1, 4, 5}, rng));
  Conv2dSpec one{1, 1, 1, 1, 1, 0, 0};
  auto id = conv2d(one, img, t.constant(Tensor({1, 1, 1, 1}, 1.0)), t.constant(Tensor({1})));
  CHECK(id.tensor().values == img.tensor().values);

  auto cst = t.constant(Tensor({1, 5, 6}, 0.7));
  Conv2dSpec box{1, 1};
  auto out = conv2d(box, cst, t.constant(Tensor({1, 1, 3, 3}, 1.0)), t.constant(Tensor({1}))).tensor();
  CHECK(out.shape == Shape{1, 5, 6});
  for (std::size_t r = 1; r + 1 < 5; ++r)
    for (std::size_t c = 1; c + 1 < 6; ++c) CHECK(out.values[r * 6 + c] == doctest::Approx(9 * 0.7).epsilon(1e-14));
  CHECK(out.values[0] == doctest::Approx(4 * 0.7));  // corner sees 4 pixels under zero padding

  Conv2dSpec big{1, 1, 7, 7, 1, 0, 0};
  CHECK_THROWS_AS(conv2d(big, t.constant(Tensor({1, 4, 4})), t.constant(Tensor({1, 1, 7, 7})), t.constant(Tensor({1}))),
                  ShapeError);
}

TEST_CASE("conv2d gradcheck on 1x5x5 input") {
  std::mt19937_64 rng(25);
  for (Conv2dSpec spec : {Conv2dSpec{1, 2}, Conv2dSpec{1, 2, 3, 3, 2, 1, 1}, Conv2dSpec{1, 3, 2, 3, 1, 0, 1}}) {
    std::vector<Tensor> pt{rand_tensor({1, 5, 5}, rng),
                           rand_tensor({spec.out_channels, 1, spec.kernel_h, spec.kernel_w}, rng),
                           rand_tensor({spec.out_channels}, rng)};
    const MapExtent e = conv2d_extent(spec, {1, 5, 5});
    Tensor probe = rand_tensor({e.channels, e.height, e.width}, rng);
    auto rep = gradcheck(
        [&](Tape& t, std::span<const Var> v) { return sum(conv2d(spec, v[0], v[1], v[2]) * t.constant(probe)); }, pt);
    CHECK(rep.max_rel_error <= 1e-5);
  }
}

TEST_CASE("maxpool2d forward, ties and errors") {
  Tape t;
  auto x = t.variable(Tensor({2, 2}, {1, 2, 3, 4}));
  CHECK(maxpool2d({}, x).tensor().values == std::vector<double>{4});

  auto flat = t.variable(Tensor({1, 4, 4}, 2.5));
  auto pooled = maxpool2d({}, flat);
  CHECK(pooled.tensor().values == std::vector<double>(4, 2.5));
  t.backward(sum(pooled));
  const auto g = t.grad(flat).values;
  std::vector<double> want(16, 0.0);
  want[0] = want[2] = want[8] = want[10] = 1.0;
  CHECK(g == want);

  auto odd = t.constant(Tensor({1, 3, 5}, 1.0));
  CHECK(maxpool2d({}, odd).shape() == Shape{1, 1, 2});
  CHECK_THROWS_AS(maxpool2d({3, 3, 3, 3}, t.constant(Tensor({1, 2, 2}))), ShapeError);
}

TEST_CASE("maxpool2d gradcheck away from ties") {
  std::mt19937_64 rng(26);
  for (int trial = 0; trial < 20; ++trial) {
    Tensor x({2, 4, 6});
    std::vector<double> distinct(x.size());
    for (std::size_t i = 0; i < distinct.size(); ++i) distinct[i] = 0.1 * static_cast<double>(i);
    std::shuffle(distinct.begin(), distinct.end(), rng);
    x.values = distinct;
    Tensor probe = rand_tensor({2, 2, 3}, rng);
    std::vector<Tensor> pt{x};
    auto rep = gradcheck(
        [&](Tape& t, std::span<const Var> v) { return sum(maxpool2d({}, v[0]) * t.constant(probe)); }, pt);
    CHECK(rep.max_rel_error <= 1e-6);
  }
}

namespace {

struct StackFixture {
  ConvStack stack;
  std::vector<Tensor> params;  // conv weight, conv bias per conv, then projection weight, bias

  StackFixture(ConvStack s, std::mt19937_64& rng) : stack(std::move(s)) {
    for (const Conv2dSpec& c : stack.convolutions()) {
      params.push_back(rand_tensor({c.out_channels, c.in_channels, c.kernel_h, c.kernel_w}, rng, -0.5, 0.5));
      params.push_back(rand_tensor({c.out_channels}, rng, -0.1, 0.1));
    }
    params.push_back(rand_tensor({stack.feature_width, stack.column_features()}, rng, -0.3, 0.3));
    params.push_back(rand_tensor({stack.feature_width}, rng, -0.1, 0.1));
  }

  ConvStackParams bind(std::span<const Var> v) const {
    ConvStackParams p;
    const std::size_t n = stack.convolutions().size();
    for (std::size_t i = 0; i < n; ++i) p.convs.push_back({v[2 * i], v[2 * i + 1]});
    p.projection = {v[2 * n], v[2 * n + 1]};
    return p;
  }
};

}  // namespace

TEST_CASE("default stack extents") {
  ConvStack s = ConvStack::default_stack();
  const MapExtent e = s.output_extent(128);
  CHECK(e.channels == 64);
  CHECK(e.height == 2);
  CHECK(e.width == 32);
  CHECK(s.column_features() == 128);
  CHECK(s.sequence_length(16) == 4);

  std::mt19937_64 rng(27);
  StackFixture fx(s, rng);
  Tape t;
  std::vector<Var> vars;
  for (const Tensor& p : fx.params) vars.push_back(t.constant(p));
  auto xs = cnn_encode(s, fx.bind(vars), t.constant(rand_tensor({1, 32, 128}, rng, 0, 1)));
  CHECK(xs.size() == 32);
  for (const Var& x : xs) CHECK(x.shape() == Shape{64});
  CHECK_THROWS_AS(cnn_encode(s, fx.bind(vars), t.constant(Tensor({1, 30, 128}))), ShapeError);
}

TEST_CASE("receptive-field locality") {
  std::mt19937_64 rng(28);
  ConvStack s = ConvStack::default_stack({4, 4, 4, 4}, 8);
  StackFixture fx(s, rng);
  Tensor a = rand_tensor({1, 32, 64}, rng, 0, 1);
  Tensor b = a;
  const std::size_t c = 40;
  for (std::size_t r = 0; r < 32; ++r)
    for (std::size_t col = c; col < 64; ++col) b.values[r * 64 + col] = 1.0 - b.values[r * 64 + col];
  Tape t;
  std::vector<Var> vars;
  for (const Tensor& p : fx.params) vars.push_back(t.constant(p));
  auto xa = cnn_encode(s, fx.bind(vars), t.constant(a));
  auto xb = cnn_encode(s, fx.bind(vars), t.constant(b));
  // Output column k sees input columns [4k−11, 4k+14].
  std::size_t checked = 0;
  for (std::size_t k = 0; k < xa.size(); ++k) {
    if (4 * k + 14 < c) {
      CHECK(xa[k].tensor().values == xb[k].tensor().values);
      ++checked;
    }
  }
  CHECK(checked >= 7);
  CHECK(xa.back().tensor().values != xb.back().tensor().values);
}

TEST_CASE("horizontal flip reverses the sequence for 1x1 kernels") {
  std::mt19937_64 rng(29);
  ConvStack s;
  s.layers = {Conv2dSpec{1, 3, 1, 1, 1, 0, 0}, ReluSpec{}, Pool2dSpec{2, 1, 2, 1}, Conv2dSpec{3, 2, 1, 1, 1, 0, 0},
              ReluSpec{}, Pool2dSpec{4, 1, 4, 1}};
  s.feature_width = 5;
  StackFixture fx(s, rng);
  Tensor img = rand_tensor({1, 32, 9}, rng, 0, 1);
  Tensor flipped = img;
  for (std::size_t r = 0; r < 32; ++r)
    for (std::size_t c = 0; c < 9; ++c) flipped.values[r * 9 + c] = img.values[r * 9 + (8 - c)];
  Tape t;
  std::vector<Var> vars;
  for (const Tensor& p : fx.params) vars.push_back(t.constant(p));
  auto xa = cnn_encode(s, fx.bind(vars), t.constant(img));
  auto xb = cnn_encode(s, fx.bind(vars), t.constant(flipped));
  REQUIRE(xa.size() == 9);
  for (std::size_t k = 0; k < 9; ++k) CHECK(xa[k].tensor().values == xb[8 - k].tensor().values);
}

TEST_CASE("cnn_encode gradcheck on a 32x16 image") {
  std::mt19937_64 rng(30);
  ConvStack s = ConvStack::default_stack({2, 3, 3, 4}, 6);
  StackFixture fx(s, rng);
  std::vector<Tensor> pt = fx.params;
  pt.push_back(rand_tensor({1, 32, 16}, rng, 0, 1));
  Tensor probe = rand_tensor({s.sequence_length(16), 6}, rng);
  GradcheckOptions opt;
  opt.max_coords_per_tensor = 40;
  opt.seed = 3;
  auto rep = gradcheck(
      [&](Tape& t, std::span<const Var> v) {
        auto m = cnn_encode_matrix(s, fx.bind(v), v.back());
        return sum(m * t.constant(probe));
      },
      pt, opt);
  CHECK(rep.max_rel_error <= 1e-4);
}
