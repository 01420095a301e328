#pragma once

// Procedural handwritten-line generator: stroke glyphs rendered with random
// style, concatenated into lines, normalised, slanted and noised.

#include <cstdint>
#include <filesystem>
#include <random>
#include <string>
#include <variant>
#include <vector>

#include "cmam/ctc.hpp"
#include "cmam/tensor.hpp"

namespace cmam {

/// Straight stroke between two points of the unit box (x right, y down).
struct LineStroke {
  double x0, y0, x1, y1;
};

/// Circular arc around (cx, cy); angles in degrees, y down, sweep may be negative.
struct ArcStroke {
  double cx, cy, radius, start_deg, sweep_deg;
};

using Stroke = std::variant<LineStroke, ArcStroke>;

struct GlyphJitter {
  double rotation_deg = 8.0;  // ± range
  double shear = 0.15;        // ± range
  double scale_min = 0.85;
  double scale_max = 1.1;
  double thickness_min = 1.3;  // pixels
  double thickness_max = 2.2;
  double point_noise = 0.04;   // unit-box units, ± per control point
};

struct GlyphSpec {
  std::uint32_t index = 0;  // class index, 1-based
  std::string name;
  std::vector<Stroke> strokes;
  GlyphJitter jitter;
};

inline constexpr std::size_t kMaxGlyphs = 30;

/// The first `count` built-in glyph programs (count ≤ kMaxGlyphs), indices 1..count.
std::vector<GlyphSpec> default_glyphs(std::size_t count = 20);

struct LengthRange {
  std::size_t min = 5;
  std::size_t max = 25;
};

struct CorpusConfig {
  LengthRange length;
  double zipf_exponent = 1.1;
};

/// Line lengths uniform in [min, max]; class k drawn with probability ∝ k^(−zipf_exponent).
std::vector<LabelSeq> make_corpus(std::uint64_t seed, std::size_t vocab_size, std::size_t n_lines,
                                  const CorpusConfig& config = {});

struct RenderConfig {
  std::size_t height = 32;
  double glyph_width = 12.0;   // pixels
  double glyph_height = 20.0;  // pixels
  std::size_t spacing_min = 1;
  std::size_t spacing_max = 4;
  double baseline_jitter = 2.0;  // ± pixels
  std::size_t margin = 4;
  double slant_max_deg = 5.0;
  double noise_sigma_max = 0.05;
  double jitter_scale = 1.0;  // multiplies every GlyphJitter range; 0 disables glyph jitter

  /// Everything random switched off.
  static RenderConfig deterministic();
};

/// Grayscale line, ink = 1, background = 0.
struct LineSample {
  std::string id;
  Tensor image;  // [height × width]
  LabelSeq label;
};

/// Renders `label` with independent style draws per glyph. Width is
/// 2·margin + Σ (glyph_width + spacing) with the spacing after the last glyph included.
LineSample render_line(const LabelSeq& label, const std::vector<GlyphSpec>& glyphs, std::mt19937_64& rng,
                       const RenderConfig& config = {});

/// Stream seed for sample `id` of a generator run seeded with `master`.
std::uint64_t sample_seed(std::uint64_t master, std::uint64_t id);

struct GeneratorConfig {
  std::uint64_t seed = 0;
  std::size_t vocab_size = 20;
  std::size_t lines = 100;
  CorpusConfig corpus;
  RenderConfig render;
};

/// make_corpus followed by render_line per sample with per-sample RNG streams.
std::vector<LineSample> generate_samples(const GeneratorConfig& config);
/// Zero-padded sample identifier; the numeric part is the sample index.
std::string sample_id(std::size_t index);

struct Dataset {
  std::vector<LineSample> samples;
  std::vector<std::string> vocab;  // vocab[k−1] names class k
};

/// 8-bit quantisation applied when writing PGM: round(255·v) / 255.
Tensor quantize(const Tensor& image);

void write_pgm(const std::filesystem::path& path, const Tensor& image);
Tensor read_pgm(const std::filesystem::path& path);

/// Writes images/<id>.pgm, manifest.tsv and vocab.txt under `dir`; returns the manifest path.
std::filesystem::path emit_dataset(const Dataset& data, const std::filesystem::path& dir);
/// Reads a directory written by emit_dataset. Every label index must lie in 1..|vocab|.
Dataset load_dataset(const std::filesystem::path& dir);

}  // namespace cmam
