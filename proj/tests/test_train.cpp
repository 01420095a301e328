#include <cmath>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "cmam/gradcheck_suite.hpp"
#include "cmam/train.hpp"
#include "doctest.h"
#include "test_support.hpp"

using namespace cmam;
using cmam::testing::rand_tensor;
namespace fs = std::filesystem;

namespace {

fs::path scratch(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("cmam_test_train_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

// Small but complete model: light conv stack and the tiny memory.
TrainConfig small_config(std::size_t vocab) {
  TrainConfig c = parse_config(
      "profile = tiny\n"
      "hidden = 8\n"
      "feature_width = 6\n"
      "conv_channels = 2,3,3,4\n");
  c.vocab_size = vocab;
  c.batch_size = 2;
  c.max_epochs = 3;
  return c;
}

Dataset small_dataset(std::uint64_t seed, std::size_t vocab, std::size_t lines, std::size_t max_len) {
  GeneratorConfig g;
  g.seed = seed;
  g.vocab_size = vocab;
  g.lines = lines;
  g.corpus.length = {1, max_len};
  Dataset d;
  d.samples = generate_samples(g);
  for (const GlyphSpec& s : default_glyphs(vocab)) d.vocab.push_back(s.name);
  return d;
}

}  // namespace

TEST_CASE("config parsing") {
  SUBCASE("defaults and profile") {
    CHECK(parse_config("") == TrainConfig{});
    const TrainConfig t = parse_config("# comment\nprofile = tiny   # trailing\nmodel = crnn\nrefinements=0\n");
    CHECK(t.memory_slots == 4);
    CHECK(t.memory_width == 8);
    CHECK(t.read_heads == 2);
    CHECK(t.hidden == 32);
    CHECK(t.model == ModelKind::Crnn);
    CHECK(t.refinements == 0);
    // Explicit keys win over the profile regardless of order.
    CHECK(parse_config("hidden = 7\nprofile = tiny\n").hidden == 7);
  }
  SUBCASE("round trip through the canonical form") {
    TrainConfig c = parse_config("profile = tiny\nlearning_rate = 0.00123\nconv_channels = 1,2,3,4\nseed = 99\n");
    c.train_data = "a/b";
    c.checkpoint = "x.ckpt";
    CHECK(parse_config(serialize_config(c)) == c);
    CHECK(serialize_config(parse_config(serialize_config(c))) == serialize_config(c));
  }
  SUBCASE("errors name the problem") {
    auto message = [](const std::string& text) {
      try {
        parse_config(text);
      } catch (const ConfigError& e) {
        return std::string(e.what());
      }
      return std::string("no error");
    };
    CHECK(message("learning_rte = 1\n").find("unknown key 'learning_rte'") != std::string::npos);
    CHECK(message("seed = 1\nseed = 2\n").find("given twice") != std::string::npos);
    CHECK(message("hidden = abc\n").find("'hidden'") != std::string::npos);
    CHECK(message("hidden = 0\n").find("'hidden'") != std::string::npos);
    CHECK(message("rmsprop_decay = 1\n").find("'rmsprop_decay'") != std::string::npos);
    CHECK(message("model = lstm\n") != "no error");
    CHECK(message("profile = huge\n") != "no error");
    CHECK(message("just text\n").find("line 1") != std::string::npos);
    CHECK(message("conv_channels = 1,2\n").find("conv_channels") != std::string::npos);
  }
  SUBCASE("missing file names the path") {
    const fs::path p = scratch("cfg") / "nope.cfg";
    try {
      load_config(p);
      FAIL("expected ConfigError");
    } catch (const ConfigError& e) {
      CHECK(std::string(e.what()).find(p.string()) != std::string::npos);
    }
  }
}

TEST_CASE("architecture diff lists only differing architecture keys") {
  TrainConfig a, b;
  b.learning_rate = 0.5;
  CHECK(architecture_diff(a, b).empty());
  b.vocab_size = 7;
  b.hidden = 3;
  const auto d = architecture_diff(a, b);
  REQUIRE(d.size() == 2);
  CHECK(d[0] == "hidden: expected 196, found 3");
  CHECK(d[1] == "vocab_size: expected 20, found 7");
}

TEST_CASE("rmsprop update rule") {
  const double lr = 0.01, decay = 0.9, eps = 1e-8;
  SUBCASE("zero gradient leaves parameters unchanged") {
    std::vector<double> p{0.5, -2.0, 3.0}, acc(3, 0.0), g(3, 0.0);
    const auto before = p;
    for (int k = 0; k < 5; ++k) rmsprop_step(p, g, acc, lr, decay, eps);
    CHECK(p == before);
    CHECK(acc == std::vector<double>(3, 0.0));
    std::vector<double> warm{0.4, 1.0, 0.0};
    rmsprop_step(p, g, warm, lr, decay, eps);
    CHECK(p == before);
    CHECK(warm == std::vector<double>{0.9 * 0.4, 0.9, 0.0});
  }
  SUBCASE("first step from a zero accumulator") {
    std::vector<double> p{1.0, 1.0, 1.0}, acc(3, 0.0), g{0.3, -2.0, 1e-5};
    rmsprop_step(p, g, acc, lr, decay, eps);
    for (std::size_t i = 0; i < 3; ++i) {
      const double c = g[i];
      CHECK(p[i] == doctest::Approx(1.0 - lr * c / std::sqrt((1 - decay) * c * c + eps)).epsilon(1e-14));
      CHECK(acc[i] == doctest::Approx((1 - decay) * c * c).epsilon(1e-14));
    }
  }
  SUBCASE("second step follows the running average") {
    std::vector<double> p{0.0}, acc{0.0};
    const std::vector<double> g1{1.0}, g2{-0.5};
    rmsprop_step(p, g1, acc, lr, decay, eps);
    rmsprop_step(p, g2, acc, lr, decay, eps);
    const double a1 = 0.1, a2 = 0.9 * a1 + 0.1 * 0.25;
    CHECK(acc[0] == doctest::Approx(a2).epsilon(1e-14));
    CHECK(p[0] == doctest::Approx(-lr / std::sqrt(a1 + eps) + lr * 0.5 / std::sqrt(a2 + eps)).epsilon(1e-13));
  }
  SUBCASE("size mismatch") {
    std::vector<double> p(2), g(3), acc(2);
    CHECK_THROWS_AS(rmsprop_step(p, g, acc, lr, decay, eps), ShapeError);
  }
}

TEST_CASE("global norm clipping") {
  std::vector<std::vector<double>> g{{3.0}, {0.0, 4.0}};
  CHECK(global_norm(g) == 5.0);
  auto small = g;
  CHECK(clip_global_norm(small, 10.0) == 5.0);
  CHECK(small == g);
  CHECK(clip_global_norm(g, 1.0) == 5.0);
  CHECK(g[0][0] == doctest::Approx(0.6));
  CHECK(g[1][1] == doctest::Approx(0.8));
  CHECK(global_norm(g) == doctest::Approx(1.0));
}

TEST_CASE("checkpoint encoding") {
  std::mt19937_64 rng(3);
  Checkpoint c;
  c.tensors.emplace_back("a/weight", rand_tensor({3, 2}, rng));
  c.tensors.emplace_back("b", rand_tensor({4}, rng));
  c.tensors.emplace_back("c/deep", rand_tensor({2, 1, 3}, rng));
  c.tensors[1].second.values[0] = -0.0;
  c.tensors[1].second.values[1] = 1e-310;  // subnormal survives
  c.config = "seed = 5\n";
  const std::string bytes = encode_checkpoint(c);

  SUBCASE("layout") {
    CHECK(bytes.substr(0, 4) == "CMAM");
    CHECK(bytes[4] == 1);
    CHECK(bytes[8] == 3);
    // name length, then the name
    CHECK(static_cast<unsigned char>(bytes[12]) == 8);
    CHECK(bytes.substr(14, 8) == "a/weight");
    const std::size_t expected = 12 + (2 + 8 + 1 + 8 + 6 * 8) + (2 + 1 + 1 + 4 + 4 * 8) +
                                 (2 + 6 + 1 + 12 + 6 * 8) + 4 + c.config.size();
    CHECK(bytes.size() == expected);
  }
  SUBCASE("round trip is exact") {
    const Checkpoint back = decode_checkpoint(bytes);
    CHECK(back == c);
    CHECK(std::signbit(back.tensors[1].second.values[0]));
    CHECK(encode_checkpoint(back) == bytes);
  }
  SUBCASE("every truncation is rejected") {
    for (std::size_t n = 0; n < bytes.size(); ++n) {
      CHECK_THROWS_AS(decode_checkpoint(std::string_view(bytes).substr(0, n)), FormatError);
    }
  }
  SUBCASE("truncation inside a tensor names it") {
    const std::size_t cut = 12 + (2 + 8 + 1 + 8) + 20;
    try {
      decode_checkpoint(std::string_view(bytes).substr(0, cut));
      FAIL("expected FormatError");
    } catch (const FormatError& e) {
      CHECK(std::string(e.what()).find("'a/weight'") != std::string::npos);
    }
  }
  SUBCASE("corruption") {
    std::string bad = bytes;
    bad[0] = 'X';
    CHECK_THROWS_AS(decode_checkpoint(bad), FormatError);
    bad = bytes;
    bad[4] = 2;
    CHECK_THROWS_WITH_AS(decode_checkpoint(bad), doctest::Contains("version 2"), FormatError);
    CHECK_THROWS_WITH_AS(decode_checkpoint(bytes + "z"), doctest::Contains("trailing"), FormatError);
    Checkpoint dup = c;
    dup.tensors.push_back(dup.tensors[0]);
    CHECK_THROWS_WITH_AS(decode_checkpoint(encode_checkpoint(dup)), doctest::Contains("duplicate tensor 'a/weight'"),
                         FormatError);
  }
}

TEST_CASE("checkpoint files and model restore") {
  const fs::path dir = scratch("ckpt");
  TrainConfig cfg = small_config(5);
  Model m(cfg.model_config(), 11);
  TrainerState st;
  std::mt19937_64 rng(12);
  for (std::size_t i = 0; i < m.params().size(); ++i) {
    st.accumulators.push_back(rand_tensor(m.params().tensor(i).shape, rng, 0, 1));
  }
  st.step = 42;
  const Checkpoint c = make_checkpoint(m, st, cfg);
  save_checkpoint(dir / "a.ckpt", c);
  const Checkpoint loaded = load_checkpoint(dir / "a.ckpt");
  CHECK(loaded == c);
  save_checkpoint(dir / "b.ckpt", loaded);
  CHECK(slurp(dir / "a.ckpt") == slurp(dir / "b.ckpt"));

  TrainerState st2;
  auto [m2, cfg2] = restore_model(loaded, &st2);
  CHECK(cfg2 == cfg);
  CHECK(st2.step == 42);
  REQUIRE(st2.accumulators.size() == st.accumulators.size());
  for (std::size_t i = 0; i < m.params().size(); ++i) {
    CHECK(m2.params().tensor(i) == m.params().tensor(i));
    CHECK(st2.accumulators[i] == st.accumulators[i]);
  }
  CHECK(make_checkpoint(m2, st2, cfg2) == c);

  SUBCASE("missing, misshapen and foreign tensors are named") {
    Checkpoint bad = c;
    bad.tensors.erase(bad.tensors.begin());
    CHECK_THROWS_WITH_AS(restore_model(bad), doctest::Contains(("'" + m.params().name(0) + "'").c_str()), FormatError);
    bad = c;
    bad.tensors[1].second = Tensor({99});
    CHECK_THROWS_WITH_AS(restore_model(bad), doctest::Contains(("'" + m.params().name(1) + "'").c_str()), FormatError);
    bad = c;
    bad.tensors.emplace_back("extra/thing", Tensor({1}));
    CHECK_THROWS_WITH_AS(restore_model(bad), doctest::Contains("'extra/thing'"), FormatError);
  }
  SUBCASE("truncated file") {
    const std::string bytes = slurp(dir / "a.ckpt");
    std::ofstream(dir / "t.ckpt", std::ios::binary) << bytes.substr(0, bytes.size() / 2);
    CHECK_THROWS_AS(load_checkpoint(dir / "t.ckpt"), FormatError);
    CHECK_THROWS_AS(load_checkpoint(dir / "missing.ckpt"), FormatError);
  }
}

TEST_CASE("patience stops after exactly that many non-improving epochs") {
  TrainConfig cfg = small_config(4);
  cfg.learning_rate = 0.0;
  cfg.patience = 3;
  cfg.max_epochs = 20;
  const Dataset data = small_dataset(5, 4, 4, 3);
  std::ostringstream log;
  const TrainResult r = train(cfg, data, data, log);
  // Epoch 1 improves on "no result yet"; epochs 2..4 repeat the same CER.
  REQUIRE(r.epochs.size() == 4);
  CHECK(r.stopped_by_patience);
  CHECK(r.best_epoch == 1);
  for (const EpochRecord& e : r.epochs) {
    CHECK(e.valid_cer == r.epochs[0].valid_cer);
    CHECK(e.loss == doctest::Approx(r.epochs[0].loss).epsilon(1e-12));  // shuffled summation order
  }
  std::istringstream lines(log.str());
  std::string line;
  std::size_t n = 0;
  while (std::getline(lines, line)) {
    CHECK(line == format_epoch(r.epochs[n]));
    CHECK(line.rfind("epoch " + std::to_string(n + 1) + " loss ", 0) == 0);
    ++n;
  }
  CHECK(n == 4);
}

TEST_CASE("infeasible samples are skipped and counted") {
  TrainConfig cfg = small_config(4);
  cfg.max_epochs = 2;
  Dataset data = small_dataset(6, 4, 3, 2);
  // 32×16 image gives four frames; five labels cannot fit.
  data.samples.push_back({"long", Tensor({32, 16}), LabelSeq{1, 2, 3, 4, 1}});
  Model m(cfg.model_config(), 1);
  CHECK_FALSE(sample_loss(m, data.samples.back()).has_value());
  CHECK(sample_loss(m, data.samples.front()).has_value());
  std::ostringstream log;
  const TrainResult r = train(cfg, data, data, log);
  for (const EpochRecord& e : r.epochs) CHECK(e.skipped == 1);
  CHECK(log.str().find("skipped 1") != std::string::npos);
}

TEST_CASE("training is deterministic and keeps the best checkpoint") {
  const fs::path dir = scratch("det");
  TrainConfig cfg = small_config(4);
  cfg.learning_rate = 3e-3;
  cfg.max_epochs = 2;
  const Dataset data = small_dataset(7, 4, 4, 4);
  std::string logs[2], ckpts[2];
  for (int run = 0; run < 2; ++run) {
    cfg.checkpoint = (dir / ("run" + std::to_string(run) + ".ckpt")).string();
    cfg.log = (dir / ("run" + std::to_string(run) + ".log")).string();
    std::ostringstream log;
    train(cfg, data, data, log);
    logs[run] = log.str();
    CHECK(slurp(cfg.log) == logs[run]);
    ckpts[run] = encode_checkpoint([&] {
      Checkpoint c = load_checkpoint(cfg.checkpoint);
      c.config.clear();  // paths differ between runs
      return c;
    }());
  }
  CHECK(logs[0] == logs[1]);
  CHECK(ckpts[0] == ckpts[1]);
}

TEST_CASE("training rejects a vocabulary mismatch") {
  const Dataset data = small_dataset(8, 4, 2, 3);
  std::ostringstream log;
  CHECK_THROWS_AS(train(small_config(5), data, data, log), ConfigError);
}

TEST_CASE("evaluation") {
  const fs::path dir = scratch("eval");
  TrainConfig cfg = small_config(4);
  Model m(cfg.model_config(), 2);
  // Zero every weight and favour the blank: every line decodes to nothing.
  for (std::size_t i = 0; i < m.params().size(); ++i) {
    auto& t = m.params().tensor(i);
    std::fill(t.values.begin(), t.values.end(), 0.0);
  }
  m.params().tensor(*m.params().find("cmam/classifier/bias")).values[0] = 5.0;
  const Dataset data = small_dataset(9, 4, 12, 5);
  std::ostringstream out;
  const MetricReport r = evaluate(m, data, &out);
  CHECK(r.cer == 1.0);
  CHECK(r.deletions == r.ref_length);
  CHECK(r.cr == 0.0);
  CHECK(out.str().find("CER 1.000000") != std::string::npos);
  CHECK(out.str().find("worst 10 lines") != std::string::npos);

  SUBCASE("checkpoint vocabulary must match the data") {
    save_checkpoint(dir / "m.ckpt", make_checkpoint(m, {}, cfg));
    std::ostringstream first, second;
    CHECK(evaluate_checkpoint(dir / "m.ckpt", data, &first).cer == 1.0);
    evaluate_checkpoint(dir / "m.ckpt", data, &second);
    CHECK(first.str() == second.str());
    CHECK(first.str() == out.str());
    const Dataset other = small_dataset(9, 5, 3, 5);
    CHECK_THROWS_WITH_AS(evaluate_checkpoint(dir / "m.ckpt", other, nullptr),
                         doctest::Contains("vocab_size: expected 5, found 4"), ConfigError);
  }
}

TEST_CASE("gradcheck suite passes on the tiny profile") {
  const auto cases = run_gradcheck_suite("tiny", 3);
  CHECK(cases.size() >= 20);
  for (const GradcheckCase& c : cases) {
    INFO(c.name, " error ", c.error, " tolerance ", c.tolerance);
    CHECK(c.coordinates > 0);
    CHECK(c.passed());
  }
}
