#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

#include <sstream>

#include "cmam/gradcheck_suite.hpp"
#include "cmam/train.hpp"

namespace py = pybind11;
using namespace cmam;

namespace {

using Array = py::array_t<double, py::array::c_style | py::array::forcecast>;

Tensor to_tensor(const Array& a) {
  Shape shape(a.shape(), a.shape() + a.ndim());
  return Tensor(std::move(shape), std::vector<double>(a.data(), a.data() + a.size()));
}

Array to_array(const Tensor& t) {
  Array out(t.shape);
  std::copy(t.values.begin(), t.values.end(), out.mutable_data());
  return out;
}

py::dict metrics_dict(const MetricReport& m) {
  py::dict d;
  d["cer"] = m.cer;
  d["cr"] = m.cr;
  d["ar"] = m.ar;
  d["substitutions"] = m.substitutions;
  d["deletions"] = m.deletions;
  d["insertions"] = m.insertions;
  d["ref_length"] = m.ref_length;
  return d;
}

py::tuple sample_tuple(const LineSample& s) { return py::make_tuple(s.id, to_array(s.image), s.label); }

LineSample sample_from(const std::string& id, const Array& image, const LabelSeq& label) {
  return {id, to_tensor(image), label};
}

Dataset dataset_from(const py::list& samples, std::vector<std::string> vocab) {
  Dataset d;
  d.vocab = std::move(vocab);
  for (const auto& item : samples) {
    const auto t = item.cast<py::tuple>();
    d.samples.push_back(sample_from(t[0].cast<std::string>(), t[1].cast<Array>(), t[2].cast<LabelSeq>()));
  }
  return d;
}

}  // namespace

PYBIND11_MODULE(_core, m) {
  m.doc() = "Memory-augmented line recognizer core";

  py::register_exception<ShapeError>(m, "ShapeError", PyExc_ValueError);
  py::register_exception<ConfigError>(m, "ConfigError", PyExc_ValueError);
  py::register_exception<InfeasibleAlignment>(m, "InfeasibleAlignment", PyExc_ValueError);
  py::register_exception<FormatError>(m, "FormatError", PyExc_IOError);

  // CTC and metrics
  m.def("ctc_loss", [](const Array& logits, const LabelSeq& label) { return ctc_nll(to_tensor(logits), label); },
        py::arg("logits"), py::arg("label"), "Negative log-likelihood of label under per-frame softmax of [T, C] logits.");
  m.def("ctc_loss_grad",
        [](const Array& logits, const LabelSeq& label) {
          Tape tape;
          const Var x = tape.variable(to_tensor(logits));
          const Var loss = ctc_loss(x, label);
          tape.backward(loss);
          return py::make_tuple(loss.item(), to_array(tape.grad(x)));
        },
        py::arg("logits"), py::arg("label"), "Loss and its gradient with respect to the logits.");
  m.def("ctc_brute_force", [](const Array& logits, const LabelSeq& label) {
    return ctc_brute_force(to_tensor(logits), label);
  });
  m.def("ctc_min_frames", &ctc_min_frames);
  m.def("greedy_decode", [](const Array& logits) { return greedy_decode(to_tensor(logits)); });
  m.def("collapse_path", [](const std::vector<std::uint32_t>& path) { return collapse_path(path); });
  m.def("edit_ops", [](const LabelSeq& ref, const LabelSeq& hyp) {
    const EditCounts e = edit_ops(ref, hyp);
    return py::make_tuple(e.substitutions, e.deletions, e.insertions);
  });
  m.def("report", [](const std::vector<LabelSeq>& refs, const std::vector<LabelSeq>& hyps) {
    return metrics_dict(report(refs, hyps));
  });

  // Synthetic data
  m.def("glyph_names", [](std::size_t count) {
    std::vector<std::string> names;
    for (const GlyphSpec& g : default_glyphs(count)) names.push_back(g.name);
    return names;
  }, py::arg("count") = 20);
  m.def("make_corpus",
        [](std::uint64_t seed, std::size_t vocab, std::size_t lines, std::size_t min_len, std::size_t max_len,
           double zipf) { return make_corpus(seed, vocab, lines, {{min_len, max_len}, zipf}); },
        py::arg("seed"), py::arg("vocab_size"), py::arg("lines"), py::arg("min_length") = 5,
        py::arg("max_length") = 25, py::arg("zipf_exponent") = 1.1);
  m.def("generate",
        [](std::uint64_t seed, std::size_t vocab, std::size_t lines, std::size_t min_len, std::size_t max_len) {
          GeneratorConfig g;
          g.seed = seed;
          g.vocab_size = vocab;
          g.lines = lines;
          g.corpus.length = {min_len, max_len};
          py::list out;
          for (const LineSample& s : generate_samples(g)) out.append(sample_tuple(s));
          return out;
        },
        py::arg("seed"), py::arg("vocab_size") = 20, py::arg("lines") = 100, py::arg("min_length") = 5,
        py::arg("max_length") = 25, "List of (id, image[H, W], label) with ink = 1.");
  m.def("emit_dataset",
        [](const py::list& samples, std::vector<std::string> vocab, const std::filesystem::path& dir) {
          return emit_dataset(dataset_from(samples, std::move(vocab)), dir);
        },
        py::arg("samples"), py::arg("vocab"), py::arg("dir"));
  m.def("load_dataset", [](const std::filesystem::path& dir) {
    const Dataset d = load_dataset(dir);
    py::list samples;
    for (const LineSample& s : d.samples) samples.append(sample_tuple(s));
    return py::make_tuple(samples, d.vocab);
  });
  m.def("read_pgm", [](const std::filesystem::path& p) { return to_array(read_pgm(p)); });
  m.def("write_pgm", [](const std::filesystem::path& p, const Array& image) { write_pgm(p, to_tensor(image)); });

  // Models
  py::class_<Model>(m, "Model")
      .def(py::init([](const std::string& kind, const std::string& profile, std::size_t vocab,
                       std::size_t refinements, std::uint64_t seed) {
             ModelConfig c = profile_config(profile, parse_model_kind(kind), vocab);
             c.refinements = refinements;
             return Model(c, seed);
           }),
           py::arg("kind") = "cmam", py::arg("profile") = "tiny", py::arg("vocab_size") = 20,
           py::arg("refinements") = 1, py::arg("seed") = 0)
      .def_static("load", [](const std::filesystem::path& p) { return restore_model(load_checkpoint(p)).first; })
      .def_property_readonly("num_parameters", [](const Model& model) { return model.params().total_values(); })
      .def("parameter_names",
           [](const Model& model) {
             std::vector<std::string> names;
             for (std::size_t i = 0; i < model.params().size(); ++i) names.push_back(model.params().name(i));
             return names;
           })
      .def("frames", [](const Model& model, std::size_t width) { return model.stack().output_extent(width).width; },
           "Number of output frames for an image of the given width.")
      .def("logits",
           [](const Model& model, const Array& image) {
             Tape tape;
             return to_array(model.logits(model.bind(tape), tape.constant(to_tensor(image))).tensor());
           },
           "Logits [T, V+1] for a [32, W] image; column 0 is the blank.")
      .def("decode", [](const Model& model, const Array& image) { return transcribe(model, to_tensor(image)); })
      .def("loss", [](const Model& model, const Array& image, const LabelSeq& label) {
        return sample_loss(model, sample_from("", image, label));
      });

  // Training harness
  m.def("parse_config", [](const std::string& text) { return serialize_config(parse_config(text)); },
        "Validates a config and returns its canonical text.");
  m.def("train",
        [](const std::string& config_text) {
          std::ostringstream log;
          const TrainResult r = train(parse_config(config_text), log);
          py::list epochs;
          for (const EpochRecord& e : r.epochs) {
            py::dict d;
            d["epoch"] = e.epoch;
            d["loss"] = e.loss;
            d["valid_cer"] = e.valid_cer;
            d["skipped"] = e.skipped;
            epochs.append(d);
          }
          py::dict out;
          out["epochs"] = epochs;
          out["best_valid_cer"] = r.best_valid_cer;
          out["best_epoch"] = r.best_epoch;
          out["log"] = log.str();
          return out;
        },
        py::arg("config_text"));
  m.def("evaluate",
        [](const std::filesystem::path& checkpoint, const std::filesystem::path& data) {
          std::ostringstream report;
          const MetricReport r = evaluate_checkpoint(checkpoint, load_dataset(data), &report);
          py::dict d = metrics_dict(r);
          d["report"] = report.str();
          return d;
        },
        py::arg("checkpoint"), py::arg("data"));
  m.def("gradcheck_suite",
        [](const std::string& profile, std::uint64_t seed) {
          py::list out;
          for (const GradcheckCase& c : run_gradcheck_suite(profile, seed)) {
            py::dict d;
            d["name"] = c.name;
            d["error"] = c.error;
            d["tolerance"] = c.tolerance;
            d["passed"] = c.passed();
            out.append(d);
          }
          return out;
        },
        py::arg("profile") = "tiny", py::arg("seed") = 0);
}
