#include "cmam/synth.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <numbers>
#include <sstream>

namespace cmam {

namespace fs = std::filesystem;

namespace {

LineStroke L(double x0, double y0, double x1, double y1) { return {x0, y0, x1, y1}; }
ArcStroke A(double cx, double cy, double r, double start, double sweep) { return {cx, cy, r, start, sweep}; }

struct Program {
  const char* name;
  std::vector<Stroke> strokes;
};

const std::vector<Program>& programs() {
  static const std::vector<Program> all = {
      {"bar", {L(0.5, 0.05, 0.5, 0.95)}},
      {"dash", {L(0.1, 0.5, 0.9, 0.5)}},
      {"slash", {L(0.15, 0.95, 0.85, 0.05)}},
      {"backslash", {L(0.15, 0.05, 0.85, 0.95)}},
      {"plus", {L(0.5, 0.1, 0.5, 0.9), L(0.1, 0.5, 0.9, 0.5)}},
      {"cross", {L(0.15, 0.1, 0.85, 0.9), L(0.15, 0.9, 0.85, 0.1)}},
      {"ring", {A(0.5, 0.5, 0.4, 0, 360)}},
      {"cup", {A(0.5, 0.35, 0.4, 0, 180)}},
      {"cap", {A(0.5, 0.65, 0.4, 180, 180)}},
      {"lparen", {A(0.85, 0.5, 0.5, 125, 110)}},
      {"rparen", {A(0.15, 0.5, 0.5, -55, 110)}},
      {"tee", {L(0.1, 0.1, 0.9, 0.1), L(0.5, 0.1, 0.5, 0.95)}},
      {"ell", {L(0.2, 0.05, 0.2, 0.9), L(0.2, 0.9, 0.85, 0.9)}},
      {"less", {L(0.85, 0.1, 0.15, 0.5), L(0.15, 0.5, 0.85, 0.9)}},
      {"greater", {L(0.15, 0.1, 0.85, 0.5), L(0.85, 0.5, 0.15, 0.9)}},
      {"vee", {L(0.1, 0.05, 0.5, 0.95), L(0.5, 0.95, 0.9, 0.05)}},
      {"wedge", {L(0.1, 0.95, 0.5, 0.05), L(0.5, 0.05, 0.9, 0.95)}},
      {"zed", {L(0.1, 0.1, 0.9, 0.1), L(0.9, 0.1, 0.1, 0.9), L(0.1, 0.9, 0.9, 0.9)}},
      {"box", {L(0.15, 0.15, 0.85, 0.15), L(0.85, 0.15, 0.85, 0.85), L(0.85, 0.85, 0.15, 0.85),
               L(0.15, 0.85, 0.15, 0.15)}},
      {"phi", {A(0.5, 0.5, 0.3, 0, 360), L(0.5, 0.0, 0.5, 1.0)}},
      {"equals", {L(0.1, 0.35, 0.9, 0.35), L(0.1, 0.65, 0.9, 0.65)}},
      {"perp", {L(0.5, 0.05, 0.5, 0.9), L(0.1, 0.9, 0.9, 0.9)}},
      {"en", {L(0.15, 0.95, 0.15, 0.05), L(0.15, 0.05, 0.85, 0.95), L(0.85, 0.95, 0.85, 0.05)}},
      {"dot", {A(0.5, 0.75, 0.18, 0, 360)}},
      {"hook", {L(0.65, 0.05, 0.65, 0.7), A(0.4, 0.7, 0.25, 0, 180)}},
      {"triangle", {L(0.5, 0.1, 0.9, 0.9), L(0.9, 0.9, 0.1, 0.9), L(0.1, 0.9, 0.5, 0.1)}},
      {"zigzag", {L(0.05, 0.1, 0.28, 0.9), L(0.28, 0.9, 0.5, 0.4), L(0.5, 0.4, 0.72, 0.9), L(0.72, 0.9, 0.95, 0.1)}},
      {"arrow", {L(0.5, 0.05, 0.5, 0.95), L(0.5, 0.05, 0.2, 0.35), L(0.5, 0.05, 0.8, 0.35)}},
      {"theta", {A(0.5, 0.5, 0.4, 0, 360), L(0.15, 0.5, 0.85, 0.5)}},
      {"ladder", {L(0.2, 0.05, 0.2, 0.95), L(0.8, 0.05, 0.8, 0.95), L(0.2, 0.5, 0.8, 0.5)}},
  };
  return all;
}

double uniform(std::mt19937_64& rng, double lo, double hi) {
  if (!(hi > lo)) return lo;
  return std::uniform_real_distribution<double>(lo, hi)(rng);
}

struct Canvas {
  std::size_t h, w;
  std::vector<double> px;

  void stamp(double x, double y, double radius) {
    const long x0 = static_cast<long>(std::floor(x - radius - 1)), x1 = static_cast<long>(std::ceil(x + radius + 1));
    const long y0 = static_cast<long>(std::floor(y - radius - 1)), y1 = static_cast<long>(std::ceil(y + radius + 1));
    for (long r = std::max(0L, y0); r <= std::min<long>(static_cast<long>(h) - 1, y1); ++r) {
      for (long c = std::max(0L, x0); c <= std::min<long>(static_cast<long>(w) - 1, x1); ++c) {
        const double d = std::hypot(c + 0.5 - x, r + 0.5 - y);
        const double v = std::clamp(radius + 0.5 - d, 0.0, 1.0);
        double& p = px[static_cast<std::size_t>(r) * w + static_cast<std::size_t>(c)];
        p = std::max(p, v);
      }
    }
  }
};

struct GlyphPlacement {
  double left, top, width, height;  // glyph box in pixels
  double scale, shear, rotation_rad, thickness;
  double cell_left, cell_right;  // 32-px cell the glyph is clamped into
  double line_height;
};

void draw_glyph(Canvas& canvas, const GlyphSpec& g, const GlyphPlacement& p, double noise, std::mt19937_64& rng) {
  const double cr = std::cos(p.rotation_rad), sr = std::sin(p.rotation_rad);
  auto to_pixel = [&](double u, double v) {
    double x = (u - 0.5) * p.scale, y = (v - 0.5) * p.scale;
    x += p.shear * y;
    const double xr = cr * x - sr * y, yr = sr * x + cr * y;
    double px = p.left + p.width * (0.5 + xr), py = p.top + p.height * (0.5 + yr);
    px = std::clamp(px, p.cell_left, p.cell_right);
    py = std::clamp(py, 0.0, p.line_height - 1e-9);
    return std::pair{px, py};
  };
  auto trace = [&](auto&& at, std::size_t steps) {
    for (std::size_t s = 0; s <= steps; ++s) {
      const auto [x, y] = at(static_cast<double>(s) / static_cast<double>(steps));
      canvas.stamp(x, y, p.thickness / 2);
    }
  };
  for (const Stroke& stroke : g.strokes) {
    if (const auto* l = std::get_if<LineStroke>(&stroke)) {
      const double ax = l->x0 + uniform(rng, -noise, noise), ay = l->y0 + uniform(rng, -noise, noise);
      const double bx = l->x1 + uniform(rng, -noise, noise), by = l->y1 + uniform(rng, -noise, noise);
      const auto [sx, sy] = to_pixel(ax, ay);
      const auto [ex, ey] = to_pixel(bx, by);
      const auto steps = static_cast<std::size_t>(std::ceil(std::hypot(ex - sx, ey - sy) / 0.3)) + 1;
      trace([&](double f) { return to_pixel(ax + f * (bx - ax), ay + f * (by - ay)); }, steps);
    } else {
      const auto& a = std::get<ArcStroke>(stroke);
      const double cx = a.cx + uniform(rng, -noise, noise), cy = a.cy + uniform(rng, -noise, noise);
      const double r = a.radius * (1.0 + uniform(rng, -noise, noise));
      const double start = a.start_deg * std::numbers::pi / 180, sweep = a.sweep_deg * std::numbers::pi / 180;
      const double arc_px = std::abs(sweep) * r * std::max(p.width, p.height) * p.scale;
      const auto steps = static_cast<std::size_t>(std::ceil(arc_px / 0.3)) + 1;
      trace([&](double f) {
        const double t = start + f * sweep;
        return to_pixel(cx + r * std::cos(t), cy + r * std::sin(t));
      }, steps);
    }
  }
}

double bilinear(const std::vector<double>& img, std::size_t h, std::size_t w, double x, double y) {
  // Pixel centres at integer + 0.5; outside reads as background.
  const double fx = x - 0.5, fy = y - 0.5;
  const double x0 = std::floor(fx), y0 = std::floor(fy);
  const double ax = fx - x0, ay = fy - y0;
  auto at = [&](double cx, double cy) {
    if (cx < 0 || cy < 0 || cx >= static_cast<double>(w) || cy >= static_cast<double>(h)) return 0.0;
    return img[static_cast<std::size_t>(cy) * w + static_cast<std::size_t>(cx)];
  };
  return (1 - ay) * ((1 - ax) * at(x0, y0) + ax * at(x0 + 1, y0)) + ay * ((1 - ax) * at(x0, y0 + 1) + ax * at(x0 + 1, y0 + 1));
}

std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

[[noreturn]] void io_fail(const std::string& what, const fs::path& path) {
  throw FormatError(what + ": " + path.string());
}

}  // namespace

std::vector<GlyphSpec> default_glyphs(std::size_t count) {
  if (count == 0 || count > kMaxGlyphs) {
    throw ConfigError("glyph count " + std::to_string(count) + " outside 1.." + std::to_string(kMaxGlyphs));
  }
  std::vector<GlyphSpec> out;
  for (std::size_t i = 0; i < count; ++i) {
    GlyphSpec g;
    g.index = static_cast<std::uint32_t>(i + 1);
    g.name = programs()[i].name;
    g.strokes = programs()[i].strokes;
    out.push_back(std::move(g));
  }
  return out;
}

std::vector<LabelSeq> make_corpus(std::uint64_t seed, std::size_t vocab_size, std::size_t n_lines,
                                  const CorpusConfig& config) {
  if (vocab_size < 2) throw ConfigError("corpus vocabulary must have at least 2 classes");
  if (n_lines == 0) throw ConfigError("corpus must have at least one line");
  if (config.length.min == 0 || config.length.min > config.length.max) {
    throw ConfigError("invalid line length range " + std::to_string(config.length.min) + ".." +
                      std::to_string(config.length.max));
  }
  std::mt19937_64 rng(splitmix64(seed));
  std::vector<double> weights(vocab_size);
  for (std::size_t k = 0; k < vocab_size; ++k) weights[k] = std::pow(static_cast<double>(k + 1), -config.zipf_exponent);
  std::discrete_distribution<std::uint32_t> symbol(weights.begin(), weights.end());
  std::uniform_int_distribution<std::size_t> length(config.length.min, config.length.max);
  std::vector<LabelSeq> lines(n_lines);
  for (LabelSeq& line : lines) {
    line.resize(length(rng));
    for (auto& c : line) c = symbol(rng) + 1;
  }
  return lines;
}

RenderConfig RenderConfig::deterministic() {
  RenderConfig c;
  c.spacing_max = c.spacing_min;
  c.baseline_jitter = 0.0;
  c.slant_max_deg = 0.0;
  c.noise_sigma_max = 0.0;
  c.jitter_scale = 0.0;
  return c;
}

LineSample render_line(const LabelSeq& label, const std::vector<GlyphSpec>& glyphs, std::mt19937_64& rng,
                       const RenderConfig& config) {
  if (label.empty()) throw std::invalid_argument("render_line: empty label");
  if (config.spacing_min > config.spacing_max) throw ConfigError("render_line: spacing_min exceeds spacing_max");
  std::vector<const GlyphSpec*> chosen;
  for (std::uint32_t c : label) {
    auto it = std::find_if(glyphs.begin(), glyphs.end(), [c](const GlyphSpec& g) { return g.index == c; });
    if (it == glyphs.end()) throw std::invalid_argument("render_line: no glyph for class " + std::to_string(c));
    chosen.push_back(&*it);
  }
  std::uniform_int_distribution<std::size_t> spacing(config.spacing_min, config.spacing_max);
  std::vector<std::size_t> gaps(label.size());
  std::size_t width = 2 * config.margin;
  const auto advance = static_cast<std::size_t>(std::lround(config.glyph_width));
  for (auto& g : gaps) width += advance + (g = spacing(rng));

  const std::size_t H = config.height;
  Canvas canvas{H, width, std::vector<double>(H * width, 0.0)};
  const double j = config.jitter_scale;
  double pen = static_cast<double>(config.margin);
  for (std::size_t i = 0; i < chosen.size(); ++i) {
    const GlyphJitter& gj = chosen[i]->jitter;
    GlyphPlacement p;
    p.width = config.glyph_width;
    p.height = config.glyph_height;
    p.left = pen;
    p.top = (static_cast<double>(H) - config.glyph_height) / 2 + uniform(rng, -config.baseline_jitter, config.baseline_jitter);
    const double mid_scale = (gj.scale_min + gj.scale_max) / 2;
    p.scale = uniform(rng, mid_scale + j * (gj.scale_min - mid_scale), mid_scale + j * (gj.scale_max - mid_scale));
    p.shear = uniform(rng, -j * gj.shear, j * gj.shear);
    p.rotation_rad = uniform(rng, -j * gj.rotation_deg, j * gj.rotation_deg) * std::numbers::pi / 180;
    const double mid_thick = (gj.thickness_min + gj.thickness_max) / 2;
    p.thickness = uniform(rng, mid_thick + j * (gj.thickness_min - mid_thick), mid_thick + j * (gj.thickness_max - mid_thick));
    const double centre = pen + config.glyph_width / 2;
    p.cell_left = std::max(0.0, centre - 16.0);
    p.cell_right = std::min(static_cast<double>(width) - 1e-9, centre + 16.0);
    p.line_height = static_cast<double>(H);
    draw_glyph(canvas, *chosen[i], p, j * gj.point_noise, rng);
    pen += static_cast<double>(advance + gaps[i]);
  }

  // Normalisation: contrast stretch to [0, 1].
  auto [lo, hi] = std::minmax_element(canvas.px.begin(), canvas.px.end());
  const double mn = *lo, mx = *hi;
  if (mx > mn) {
    for (double& v : canvas.px) v = (v - mn) / (mx - mn);
  }

  // Augmentation: global slant about the middle row, then Gaussian pixel noise.
  const double slant = std::tan(uniform(rng, -config.slant_max_deg, config.slant_max_deg) * std::numbers::pi / 180);
  std::vector<double> out(canvas.px.size());
  if (slant == 0.0) {
    out = canvas.px;
  } else {
    const double mid = static_cast<double>(H) / 2;
    for (std::size_t r = 0; r < H; ++r) {
      for (std::size_t c = 0; c < width; ++c) {
        const double y = static_cast<double>(r) + 0.5, x = static_cast<double>(c) + 0.5;
        out[r * width + c] = bilinear(canvas.px, H, width, x + slant * (y - mid), y);
      }
    }
  }
  const double sigma = uniform(rng, 0.0, config.noise_sigma_max);
  if (sigma > 0.0) {
    std::normal_distribution<double> noise(0.0, sigma);
    for (double& v : out) v = std::clamp(v + noise(rng), 0.0, 1.0);
  }

  LineSample s;
  s.image = Tensor({H, width}, std::move(out));
  s.label = label;
  return s;
}

std::uint64_t sample_seed(std::uint64_t master, std::uint64_t id) { return splitmix64(splitmix64(master) ^ id); }

std::string sample_id(std::size_t index) {
  std::ostringstream s;
  s << std::setw(6) << std::setfill('0') << index;
  return s.str();
}

std::vector<LineSample> generate_samples(const GeneratorConfig& config) {
  const std::vector<GlyphSpec> glyphs = default_glyphs(config.vocab_size);
  const std::vector<LabelSeq> corpus = make_corpus(config.seed, config.vocab_size, config.lines, config.corpus);
  std::vector<LineSample> out;
  out.reserve(corpus.size());
  for (std::size_t i = 0; i < corpus.size(); ++i) {
    std::mt19937_64 rng(sample_seed(config.seed, i));
    LineSample s = render_line(corpus[i], glyphs, rng, config.render);
    s.id = sample_id(i);
    out.push_back(std::move(s));
  }
  return out;
}

Tensor quantize(const Tensor& image) {
  Tensor q = image;
  for (double& v : q.values) v = std::round(std::clamp(v, 0.0, 1.0) * 255.0) / 255.0;
  return q;
}

void write_pgm(const fs::path& path, const Tensor& image) {
  if (image.rank() != 2) throw ShapeError("write_pgm: image must be [H×W], got " + shape_str(image.shape));
  std::ofstream out(path, std::ios::binary);
  if (!out) io_fail("cannot open for writing", path);
  out << "P5\n" << image.shape[1] << ' ' << image.shape[0] << "\n255\n";
  std::vector<unsigned char> bytes(image.size());
  for (std::size_t i = 0; i < image.size(); ++i) {
    const auto q = static_cast<int>(std::lround(std::clamp(image.values[i], 0.0, 1.0) * 255.0));
    bytes[i] = static_cast<unsigned char>(255 - q);  // dark ink on white
  }
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) io_fail("write failed", path);
}

Tensor read_pgm(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) io_fail("cannot open", path);
  auto token = [&]() {
    std::string t;
    char ch;
    while (in.get(ch)) {
      if (ch == '#') {
        std::string skip;
        std::getline(in, skip);
      } else if (std::isspace(static_cast<unsigned char>(ch))) {
        if (!t.empty()) break;
      } else {
        t.push_back(ch);
      }
    }
    return t;
  };
  if (token() != "P5") io_fail("not a binary PGM (P5)", path);
  std::size_t w = 0, h = 0, maxval = 0;
  try {
    w = std::stoul(token());
    h = std::stoul(token());
    maxval = std::stoul(token());
  } catch (const std::exception&) {
    io_fail("malformed PGM header", path);
  }
  if (w == 0 || h == 0 || maxval != 255) io_fail("unsupported PGM extents or maxval", path);
  std::vector<unsigned char> bytes(w * h);
  in.read(reinterpret_cast<char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (in.gcount() != static_cast<std::streamsize>(bytes.size())) io_fail("truncated PGM", path);
  Tensor img({h, w});
  for (std::size_t i = 0; i < bytes.size(); ++i) img.values[i] = static_cast<double>(255 - bytes[i]) / 255.0;
  return img;
}

fs::path emit_dataset(const Dataset& data, const fs::path& dir) {
  std::error_code ec;
  fs::create_directories(dir / "images", ec);
  if (ec) io_fail("cannot create directory (" + ec.message() + ")", dir / "images");
  const fs::path manifest = dir / "manifest.tsv";
  std::ofstream m(manifest, std::ios::binary);
  if (!m) io_fail("cannot open for writing", manifest);
  for (const LineSample& s : data.samples) {
    const std::string rel = "images/" + s.id + ".pgm";
    write_pgm(dir / rel, s.image);
    m << rel << '\t';
    for (std::size_t i = 0; i < s.label.size(); ++i) m << (i ? " " : "") << s.label[i];
    m << '\n';
  }
  if (!m) io_fail("write failed", manifest);
  std::ofstream v(dir / "vocab.txt", std::ios::binary);
  if (!v) io_fail("cannot open for writing", dir / "vocab.txt");
  for (const std::string& name : data.vocab) v << name << '\n';
  if (!v) io_fail("write failed", dir / "vocab.txt");
  return manifest;
}

Dataset load_dataset(const fs::path& dir) {
  Dataset d;
  {
    std::ifstream v(dir / "vocab.txt");
    if (!v) io_fail("cannot open", dir / "vocab.txt");
    for (std::string line; std::getline(v, line);) {
      if (!line.empty() && line.back() == '\r') line.pop_back();
      d.vocab.push_back(line);
    }
  }
  const fs::path manifest = dir / "manifest.tsv";
  std::ifstream m(manifest);
  if (!m) io_fail("cannot open", manifest);
  std::size_t lineno = 0;
  for (std::string line; std::getline(m, line);) {
    ++lineno;
    if (line.empty()) continue;
    const auto tab = line.find('\t');
    if (tab == std::string::npos) io_fail("line " + std::to_string(lineno) + " has no tab", manifest);
    LineSample s;
    const fs::path rel = line.substr(0, tab);
    s.id = rel.stem().string();
    std::istringstream labels(line.substr(tab + 1));
    for (std::string tok; labels >> tok;) {
      std::size_t used = 0;
      unsigned long c = 0;
      try {
        c = std::stoul(tok, &used);
      } catch (const std::exception&) {
        used = 0;
      }
      if (used != tok.size() || c == 0 || c > d.vocab.size()) {
        io_fail("line " + std::to_string(lineno) + " has label '" + tok + "' outside 1.." +
                    std::to_string(d.vocab.size()),
                manifest);
      }
      s.label.push_back(static_cast<std::uint32_t>(c));
    }
    s.image = read_pgm(dir / rel);
    d.samples.push_back(std::move(s));
  }
  return d;
}

}  // namespace cmam
