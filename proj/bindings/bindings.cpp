// Python bindings for the main operations: phantom rendering, mask editing,
// quality metrics, and the content-addressed pipeline runner. Images cross
// the boundary as numpy arrays, masks as uint8 and renders as float32, both
// shaped (height, width).

#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

#include "csg/editing.hpp"
#include "csg/image.hpp"
#include "csg/metrics.hpp"
#include "csg/phantom.hpp"
#include "csg/pipeline.hpp"
#include "csg/style.hpp"

#include <cstring>
#include <sstream>

namespace py = pybind11;
using namespace csg;

namespace {

LabelMask mask_from_array(const py::array_t<uint8_t, py::array::c_style | py::array::forcecast>& arr) {
    if (arr.ndim() != 2) throw py::value_error("mask must be a 2-D uint8 array");
    LabelMask m(static_cast<int>(arr.shape(1)), static_cast<int>(arr.shape(0)));
    std::memcpy(m.data.data(), arr.data(), m.data.size());
    m.validate();
    return m;
}

py::array_t<uint8_t> mask_to_array(const LabelMask& m) {
    py::array_t<uint8_t> out({m.height, m.width});
    std::memcpy(out.mutable_data(), m.data.data(), m.data.size());
    return out;
}

GrayImage image_from_array(const py::array_t<float, py::array::c_style | py::array::forcecast>& arr) {
    if (arr.ndim() != 2) throw py::value_error("image must be a 2-D float array");
    GrayImage img(static_cast<int>(arr.shape(1)), static_cast<int>(arr.shape(0)));
    std::memcpy(img.data.data(), arr.data(), img.data.size() * sizeof(float));
    return img;
}

py::array_t<float> image_to_array(const GrayImage& img) {
    py::array_t<float> out({img.height, img.width});
    std::memcpy(out.mutable_data(), img.data.data(), img.data.size() * sizeof(float));
    return out;
}

std::vector<Embedding> embed_arrays(const std::vector<py::array_t<float>>& images, const ConvStack& stack) {
    std::vector<Embedding> out;
    out.reserve(images.size());
    for (const auto& arr : images) out.push_back(embed_image(image_from_array(arr), stack));
    return out;
}

}  // namespace

PYBIND11_MODULE(_core, m) {
    m.doc() = "Synthetic ultrasound pipeline: phantoms, guided diffusion, mask editing, metrics";
    m.attr("__version__") = kToolVersion;
    m.attr("NUM_CLASSES") = static_cast<int>(kNumClasses);

    py::register_exception<Error>(m, "CsgError");

    m.def("class_names", [] {
        std::vector<std::string> names;
        for (size_t c = 0; c < kNumClasses; ++c) names.push_back(class_name(static_cast<ClassId>(c)));
        return names;
    });

    // ---- image IO ----
    m.def("read_mask", [](const std::filesystem::path& p) { return mask_to_array(read_mask_pgm(p)); },
          py::arg("path"));
    m.def("write_mask",
          [](const std::filesystem::path& p, const py::array_t<uint8_t>& arr) {
              write_mask_pgm(p, mask_from_array(arr));
          },
          py::arg("path"), py::arg("mask"));
    m.def("read_image", [](const std::filesystem::path& p) { return image_to_array(read_image_pgm(p)); },
          py::arg("path"));
    m.def("write_image",
          [](const std::filesystem::path& p, const py::array_t<float>& arr) {
              write_image_pgm(p, image_from_array(arr));
          },
          py::arg("path"), py::arg("image"));

    // ---- phantom rendering ----
    m.def("phantom",
          [](uint64_t seed, int width, int height, int index, int layer_count, double pathology_rate,
             bool texture_jitter) {
              PhantomParams params;
              params.rng_seed = seed;
              params.width = width;
              params.height = height;
              params.layer_count = layer_count;
              params.pathology_rate = static_cast<float>(pathology_rate);
              params.texture_jitter = texture_jitter;
              validate_params(params);
              const LabelMask mask = sample_mask_geometry(params, index);
              const GrayImage img = render_speckle(mask, params, index);
              return py::make_tuple(mask_to_array(mask), image_to_array(img));
          },
          py::arg("seed"), py::arg("width") = 64, py::arg("height") = 64, py::arg("index") = 0,
          py::arg("layer_count") = 4, py::arg("pathology_rate") = 0.5, py::arg("texture_jitter") = false,
          "Render one labeled phantom; returns (mask, image) arrays.");

    // ---- mask editing ----
    py::class_<EditProgram>(m, "EditProgram")
        .def("__eq__", [](const EditProgram& a, const EditProgram& b) { return a == b; })
        .def("__str__", [](const EditProgram& p) { return print_edit(p); })
        .def("__repr__", [](const EditProgram& p) { return "EditProgram('" + print_edit(p) + "')"; })
        .def("__len__", [](const EditProgram& p) { return p.commands.size(); });

    m.def("parse_edit", &parse_edit, py::arg("text"));
    m.def("print_edit", &print_edit, py::arg("program"));
    m.def("apply_edit",
          [](const py::array_t<uint8_t>& mask, const std::string& program) {
              return mask_to_array(apply_program(mask_from_array(mask), parse_edit(program)));
          },
          py::arg("mask"), py::arg("program"),
          "Apply an edit program (e.g. \"scale tendon x 1.5 ; translate ditf dx 3 dy 0\").");
    m.def("apply_edit",
          [](const py::array_t<uint8_t>& mask, const EditProgram& program) {
              return mask_to_array(apply_program(mask_from_array(mask), program));
          },
          py::arg("mask"), py::arg("program"));

    // ---- metrics ----
    m.def("seg_scores",
          [](const py::array_t<uint8_t>& pred, const py::array_t<uint8_t>& gt, int cls) {
              if (cls < 0 || cls >= static_cast<int>(kNumClasses)) throw py::value_error("bad class id");
              const SegScores s =
                  seg_scores(confusion(mask_from_array(pred), mask_from_array(gt), static_cast<ClassId>(cls)));
              py::dict d;
              d["dsc"] = s.dsc;
              d["iou"] = s.iou;
              d["ppv"] = s.ppv;
              d["tpr"] = s.tpr;
              d["f1"] = s.f1;
              d["empty_union"] = s.empty_union;
              return d;
          },
          py::arg("pred"), py::arg("gt"), py::arg("class_id"));

    m.def("quality",
          [](const std::vector<py::array_t<float>>& real_images,
             const std::vector<py::array_t<float>>& synth_images, uint64_t stack_seed, int bins,
             int guard_divisor) {
              const ConvStack stack = make_conv_stack(stack_seed);
              const QualityReport r = quality_report(embed_arrays(real_images, stack),
                                                     embed_arrays(synth_images, stack), bins, guard_divisor);
              py::dict d;
              d["frechet"] = r.frechet;
              d["kst"] = r.kst;
              d["kld"] = r.kld;
              d["contour_dsc"] = r.contour.dsc;
              return d;
          },
          py::arg("real_images"), py::arg("synth_images"), py::arg("stack_seed"), py::arg("bins") = 32,
          py::arg("guard_divisor") = 4,
          "Distribution-level quality of synthetic images against real ones.");

    // ---- pipeline ----
    py::class_<PipelineConfig>(m, "Config")
        .def(py::init<>())
        .def("__repr__",
             [](const PipelineConfig& c) { return "Config(" + run_id(c) + ")"; });

    py::class_<StageOutcome>(m, "StageOutcome")
        .def_readonly("stage", &StageOutcome::stage)
        .def_readonly("artifacts", &StageOutcome::artifacts)
        .def_readonly("seconds", &StageOutcome::seconds)
        .def("__repr__", [](const StageOutcome& o) {
            std::ostringstream ss;
            ss << "StageOutcome(" << o.stage << ", " << o.artifacts.size() << " artifacts)";
            return ss.str();
        });

    m.def("parse_config", &parse_config, py::arg("json_text"));
    m.def("load_config", &load_config, py::arg("path"));
    m.def("apply_override", &apply_override, py::arg("config"), py::arg("assignment"),
          "Apply one dotted-key override, e.g. \"train.steps=500\".");
    m.def("config_json", &config_to_json, py::arg("config"));
    m.def("run_id", &run_id, py::arg("config"));
    m.def("default_run_root", &default_run_root);
    m.def("pipeline_stages", [] { return pipeline_stages(); });
    m.def("execution_plan", &execution_plan, py::arg("config"), py::arg("subcommand"));
    m.def("dry_run", &dry_run_lines, py::arg("config"), py::arg("subcommand"), py::arg("run_root"));
    m.def("run_pipeline",
          [](const PipelineConfig& cfg, const std::string& subcommand, const std::filesystem::path& root) {
              py::gil_scoped_release release;
              return run_pipeline(cfg, subcommand, root, nullptr);
          },
          py::arg("config"), py::arg("subcommand") = "all", py::arg("run_root"),
          "Run pipeline stages inside run_root/<run-id>; returns per-stage outcomes.");
}
