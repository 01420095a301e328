#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>

#include "CLI11.hpp"
#include "cmam/gradcheck_suite.hpp"
#include "cmam/train.hpp"

namespace fs = std::filesystem;
using namespace cmam;

namespace {

constexpr int kUsageError = 1;
constexpr int kRuntimeError = 2;

int run_gen(std::uint64_t seed, std::size_t vocab, std::size_t lines, const LengthRange& length, const fs::path& out) {
  GeneratorConfig g;
  g.seed = seed;
  g.vocab_size = vocab;
  g.lines = lines;
  g.corpus.length = length;
  Dataset d;
  for (const GlyphSpec& s : default_glyphs(vocab)) d.vocab.push_back(s.name);
  d.samples = generate_samples(g);
  const fs::path manifest = emit_dataset(d, out);
  std::ofstream meta(out / "meta.txt", std::ios::trunc);
  meta << "seed = " << seed << "\nvocab_size = " << vocab << "\nlines = " << lines << "\nmin_length = " << length.min
       << "\nmax_length = " << length.max << '\n';
  if (!meta) throw FormatError("cannot write " + (out / "meta.txt").string());
  std::cout << "wrote " << d.samples.size() << " lines to " << manifest.string() << '\n';
  return 0;
}

int run_train(const fs::path& config_path) {
  const TrainConfig config = load_config(config_path);
  const TrainResult r = train(config, std::cout);
  std::printf("best valid_cer %.6f at epoch %zu%s\n", r.best_valid_cer, r.best_epoch,
              r.stopped_by_patience ? " (patience exhausted)" : "");
  return 0;
}

int run_eval(const fs::path& model, const fs::path& data) {
  evaluate_checkpoint(model, load_dataset(data), &std::cout);
  return 0;
}

int run_gradcheck(const std::string& profile, std::uint64_t seed) {
  bool ok = true;
  for (const GradcheckCase& c : run_gradcheck_suite(profile, seed)) {
    std::printf("%-20s %-4s error %.3e tolerance %.0e coords %zu retried %zu\n", c.name.c_str(),
                c.passed() ? "ok" : "FAIL", c.error, c.tolerance, c.coordinates, c.retried);
    if (!c.passed()) std::printf("  worst coordinate: analytic %.9e numeric %.9e\n", c.worst_analytic, c.worst_numeric);
    ok = ok && c.passed();
  }
  std::printf("%s\n", ok ? "all gradient checks passed" : "gradient check FAILED");
  return ok ? 0 : kRuntimeError;
}

int run_decode(const fs::path& model_path, const fs::path& image_path) {
  const auto [model, config] = restore_model(load_checkpoint(model_path));
  const LabelSeq hyp = transcribe(model, read_pgm(image_path));
  const auto glyphs = default_glyphs(std::min(config.vocab_size, kMaxGlyphs));
  std::string indices, names;
  for (std::size_t i = 0; i < hyp.size(); ++i) {
    if (i) {
      indices += ' ';
      names += ' ';
    }
    indices += std::to_string(hyp[i]);
    names += hyp[i] <= glyphs.size() ? glyphs[hyp[i] - 1].name : "?";
  }
  std::cout << "indices: " << indices << "\nglyphs: " << names << '\n';
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Memory-augmented line recognizer: data generation, training and evaluation"};
  app.require_subcommand(1);

  auto* gen = app.add_subcommand("gen", "Generate a synthetic line dataset");
  std::uint64_t gen_seed = 0;
  std::size_t vocab = 20, lines = 100;
  LengthRange length;
  std::string out;
  gen->add_option("--seed", gen_seed, "Master seed")->required();
  gen->add_option("--vocab-size", vocab, "Number of glyph classes")->check(CLI::Range(std::size_t{1}, kMaxGlyphs));
  gen->add_option("--lines", lines, "Number of lines")->check(CLI::PositiveNumber);
  gen->add_option("--min-length", length.min, "Shortest line in characters")->check(CLI::PositiveNumber);
  gen->add_option("--max-length", length.max, "Longest line in characters")->check(CLI::PositiveNumber);
  gen->add_option("--out", out, "Output directory")->required();

  auto* tr = app.add_subcommand("train", "Train a model from a config file");
  std::string config_path;
  tr->add_option("--config", config_path, "key = value config file")->required();

  auto* ev = app.add_subcommand("eval", "Evaluate a checkpoint on a dataset");
  std::string model_path, data_path;
  ev->add_option("--model", model_path, "Checkpoint file")->required();
  ev->add_option("--data", data_path, "Dataset directory")->required();

  auto* gc = app.add_subcommand("gradcheck", "Run the finite-difference gradient suite");
  std::string profile = "tiny";
  std::uint64_t gc_seed = 0;
  gc->add_option("--profile", profile, "Size profile")->check(CLI::IsMember({"tiny", "default"}));
  gc->add_option("--seed", gc_seed, "Seed for random probe points");

  auto* dec = app.add_subcommand("decode", "Transcribe one PGM line image");
  std::string image_path;
  dec->add_option("--model", model_path, "Checkpoint file")->required();
  dec->add_option("--image", image_path, "PGM image")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);  // prints usage to stderr
    return kUsageError;
  }

  try {
    if (*gen) return run_gen(gen_seed, vocab, lines, length, out);
    if (*tr) return run_train(config_path);
    if (*ev) return run_eval(model_path, data_path);
    if (*gc) return run_gradcheck(profile, gc_seed);
    if (*dec) return run_decode(model_path, image_path);
  } catch (const ConfigError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kUsageError;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kRuntimeError;
  }
  return kUsageError;
}
