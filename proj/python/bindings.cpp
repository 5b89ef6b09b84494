#include <pybind11/eigen.h>
#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

#include <sstream>

#include "mpcad/pipeline.hpp"
#include "mpcad/sampling.hpp"

namespace py = pybind11;
using namespace mpcad;

namespace {

using Array = py::array_t<double, py::array::c_style | py::array::forcecast>;

/// (C, H, W) array -> planar image.
Image to_image(const Array& a) {
    if (a.ndim() != 3) throw DataError("images are (channels, height, width) arrays");
    Image img{static_cast<std::size_t>(a.shape(0)), static_cast<std::size_t>(a.shape(1)),
              static_cast<std::size_t>(a.shape(2)), {}};
    img.pixels.assign(a.data(), a.data() + a.size());
    return img;
}

Array from_image(const Image& img) {
    Array a({img.channels, img.height, img.width});
    std::copy(img.pixels.begin(), img.pixels.end(), a.mutable_data());
    return a;
}

/// (H, W, C) array -> feature grid.
FeatureGrid to_grid(const Array& a) {
    if (a.ndim() != 3) throw DataError("feature grids are (grid_h, grid_w, channels) arrays");
    const auto h = static_cast<std::size_t>(a.shape(0)), w = static_cast<std::size_t>(a.shape(1));
    Mat v(static_cast<Eigen::Index>(h * w), static_cast<Eigen::Index>(a.shape(2)));
    std::copy(a.data(), a.data() + a.size(), v.data());
    return FeatureGrid(h, w, std::move(v));
}

Array from_grid(const FeatureGrid& g) {
    Array a({g.grid_h(), g.grid_w(), g.channels()});
    std::copy(g.values().data(), g.values().data() + g.values().size(), a.mutable_data());
    return a;
}

ScoreMap to_map(const Array& a, bool normalized = false) {
    if (a.ndim() != 2) throw DataError("score maps are 2-D arrays");
    return ScoreMap(static_cast<std::size_t>(a.shape(0)), static_cast<std::size_t>(a.shape(1)),
                    std::vector<double>(a.data(), a.data() + a.size()), normalized);
}

Array from_map(const ScoreMap& m) {
    Array a({m.height(), m.width()});
    std::copy(m.values().begin(), m.values().end(), a.mutable_data());
    return a;
}

RegionMask to_regions(const py::array_t<int, py::array::c_style | py::array::forcecast>& a) {
    if (a.ndim() != 2) throw DataError("region masks are 2-D arrays");
    return {static_cast<std::size_t>(a.shape(0)), static_cast<std::size_t>(a.shape(1)),
            std::vector<int>(a.data(), a.data() + a.size())};
}

py::array_t<int> from_regions(const RegionMask& m) {
    py::array_t<int> a({m.height, m.width});
    std::copy(m.labels.begin(), m.labels.end(), a.mutable_data());
    return a;
}

std::vector<std::uint8_t> from_bytes(const py::bytes& b) {
    char* data = nullptr;
    Py_ssize_t n = 0;
    if (PyBytes_AsStringAndSize(b.ptr(), &data, &n) != 0) throw py::error_already_set();
    return {reinterpret_cast<const std::uint8_t*>(data), reinterpret_cast<const std::uint8_t*>(data) + n};
}

py::bytes to_bytes(const std::vector<std::uint8_t>& b) {
    return py::bytes(reinterpret_cast<const char*>(b.data()), b.size());
}

py::dict run_result_dict(const RunResult& r) {
    auto matrix = [](const EvalMatrix& m) {
        py::list rows;
        for (std::size_t s = 0; s < m.k(); ++s) {
            py::list row;
            for (std::size_t t = 0; t < m.k(); ++t) {
                const auto v = m.get(s, t);
                row.append(v ? py::cast(*v) : py::none());
            }
            rows.append(row);
        }
        return rows;
    };
    py::dict d;
    d["mode"] = r.mode;
    d["visual_prompt_tuning"] = r.visual_prompt_tuning;
    d["tasks"] = r.task_names;
    d["image_auroc"] = matrix(r.image_auroc);
    d["pixel_aupr"] = matrix(r.pixel_aupr);
    py::list rows;
    for (const auto& row : r.final_rows)
        rows.append(py::dict(py::arg("task") = row.task, py::arg("image_auroc") = row.image_auroc,
                             py::arg("pixel_aupr") = row.pixel_aupr));
    d["final"] = rows;
    d["fm_image_auroc"] = r.fm_image_auroc ? py::cast(*r.fm_image_auroc) : py::none();
    d["fm_pixel_aupr"] = r.fm_pixel_aupr ? py::cast(*r.fm_pixel_aupr) : py::none();
    d["task_id_accuracy"] = r.task_id_accuracy;
    py::list abl;
    for (const auto& a : r.ablation)
        abl.append(py::dict(py::arg("task") = a.task, py::arg("fused") = a.fused,
                            py::arg("without_anm") = a.without_anm, py::arg("visual_only") = a.visual_only,
                            py::arg("text_only") = a.text_only));
    d["ablation"] = abl;
    d["bank"] = to_bytes(serialize_bank(r.bank));
    return d;
}

template <class Fn>
py::dict infer_dict(const py::bytes& bank_bytes, const RunConfig& cfg, const std::optional<std::string>& task, Fn run) {
    const MemoryBank bank = deserialize_bank(from_bytes(bank_bytes));
    Backbone backbone(cfg.backbone);
    for (const auto& t : bank.tasks()) backbone.register_words(t.text_prompt.class_name);
    const Detector det(bank, backbone, cfg.train.alpha_fusion);
    std::optional<std::size_t> forced;
    if (task) {
        forced = bank.find(*task);
        if (!forced) throw DataError("task '" + *task + "' is not in the memory bank");
    }
    const InferenceResult r = run(det, forced);
    py::dict d;
    d["map"] = from_map(r.map);
    d["image_score"] = r.image_score;
    d["task"] = bank.at(r.task).task_name;
    d["similarity"] = r.task_similarity;
    return d;
}

}  // namespace

PYBIND11_MODULE(_core, m) {
    m.doc() = "Continual anomaly detection with a multimodal prompt memory bank";

    auto base = py::register_exception<Error>(m, "Error", PyExc_RuntimeError);
    py::register_exception<ConfigError>(m, "ConfigError", base.ptr());
    py::register_exception<DataError>(m, "DataError", base.ptr());
    py::register_exception<NumericalError>(m, "NumericalError", base.ptr());

    // sampling
    m.def("fps_indices", &farthest_point_indices, py::arg("points"), py::arg("count"),
          "Greedy max-min selection order starting from row 0.");
    m.def(
        "fps", [](const Mat& pts, std::size_t k) { return fps(PatchSet(pts), {k}).rows(); }, py::arg("points"),
        py::arg("count"));
    m.def(
        "coreset_select", [](const Mat& pts, std::size_t k) { return coreset_select(PatchSet(pts), {k}).rows(); },
        py::arg("points"), py::arg("count"));
    m.def(
        "covering_radius", [](const Mat& sel, const Mat& all) { return covering_radius(PatchSet(sel), PatchSet(all)); },
        py::arg("selected"), py::arg("points"));

    // metrics
    m.def(
        "auroc", [](std::vector<double> s, std::vector<int> y) { return auroc(s, y); }, py::arg("scores"),
        py::arg("labels"));
    m.def(
        "aupr", [](std::vector<double> s, std::vector<int> y) { return aupr(s, y); }, py::arg("scores"),
        py::arg("labels"));
    m.def(
        "forgetting_measure",
        [](const std::vector<std::vector<std::optional<double>>>& rows) {
            EvalMatrix t(rows.size());
            for (std::size_t s = 0; s < rows.size(); ++s)
                for (std::size_t j = 0; j < rows[s].size(); ++j)
                    if (rows[s][j]) t.set(s, j, *rows[s][j]);
            return forgetting_measure(t);
        },
        py::arg("matrix"), "Rows are stages, columns tasks; None above the diagonal.");

    // losses
    m.def(
        "loss_text", [](std::vector<double> s, std::vector<double> y) { return loss_text(s, y); },
        py::arg("scores"), py::arg("labels"));
    m.def(
        "loss_visual",
        [](const Array& features, const py::array_t<int, py::array::c_style | py::array::forcecast>& regions,
           double la, double lb) { return loss_visual(to_grid(features), to_regions(regions), la, lb).value; },
        py::arg("features"), py::arg("regions"), py::arg("lambda_alpha") = 1.0, py::arg("lambda_beta") = 1.0);

    // scoring and fusion
    m.def(
        "score_visual", [](const Array& features, const Mat& bank) { return from_map(score_visual(to_grid(features), PatchSet(bank))); },
        py::arg("features"), py::arg("bank"));
    m.def(
        "anm", [](const Array& map, double k, double b) { return from_map(anm(to_map(map), {k, b})); },
        py::arg("map"), py::arg("k") = 1.5, py::arg("b") = 0.0);
    m.def(
        "fuse",
        [](const Array& mv, const Array& mt, double alpha) {
            return from_map(fuse(to_map(mv, true), to_map(mt, true), alpha));
        },
        py::arg("map_v"), py::arg("map_t"), py::arg("alpha") = 0.9);
    m.def(
        "bilinear_upsample",
        [](const Array& map, std::size_t h, std::size_t w) { return from_map(bilinear_upsample(to_map(map), h, w)); },
        py::arg("map"), py::arg("height"), py::arg("width"));

    // backbone
    py::class_<BackboneConfig>(m, "BackboneConfig")
        .def(py::init<>())
        .def_readwrite("n_layers", &BackboneConfig::n_layers)
        .def_readwrite("dim", &BackboneConfig::dim)
        .def_readwrite("heads", &BackboneConfig::heads)
        .def_readwrite("patch_size", &BackboneConfig::patch_size)
        .def_readwrite("input_hw", &BackboneConfig::input_hw)
        .def_readwrite("image_channels", &BackboneConfig::image_channels)
        .def_readwrite("mlp_hidden", &BackboneConfig::mlp_hidden)
        .def_readwrite("tap_layer_key", &BackboneConfig::tap_layer_key)
        .def_readwrite("tap_layer_score", &BackboneConfig::tap_layer_score)
        .def_readwrite("text_dim", &BackboneConfig::text_dim)
        .def_readwrite("seed", &BackboneConfig::seed)
        .def("validate", &BackboneConfig::validate);

    py::class_<Backbone>(m, "Backbone")
        .def(py::init<BackboneConfig>(), py::arg("config") = BackboneConfig{})
        .def_property_readonly("config", &Backbone::config)
        .def("checksum", &Backbone::checksum)
        .def("key_features", [](const Backbone& b, const Array& img) { return from_grid(b.key_features(to_image(img))); })
        .def("score_features",
             [](const Backbone& b, const Array& img) { return from_grid(b.score_features(to_image(img), nullptr)); });

    // synthetic data
    m.def(
        "gen_synthetic",
        [](const std::string& texture, std::uint64_t seed, std::size_t train, std::size_t test_normal,
           std::size_t test_anomalous, std::size_t image_hw, std::size_t patch_size) {
            SyntheticTaskSpec s;
            s.name = texture;
            s.texture = texture_from_string(texture);
            s.train_images = train;
            s.test_normal = test_normal;
            s.test_anomalous = test_anomalous;
            s.image_hw = image_hw;
            s.patch_size = patch_size;
            const SyntheticTask t = gen_synthetic(s, seed);
            py::list train_imgs, regions, test_imgs, masks;
            for (const auto& i : t.train.images) train_imgs.append(from_image(i));
            for (const auto& r : t.train.region_masks) regions.append(from_regions(r));
            for (const auto& i : t.test_images) test_imgs.append(from_image(i));
            for (const auto& mk : t.test_masks) {
                py::array_t<std::uint8_t> a({image_hw, image_hw});
                std::copy(mk.begin(), mk.end(), a.mutable_data());
                masks.append(a);
            }
            py::dict d;
            d["train"] = train_imgs;
            d["regions"] = regions;
            d["test"] = test_imgs;
            d["labels"] = t.test_labels;
            d["masks"] = masks;
            return d;
        },
        py::arg("texture"), py::arg("seed") = 42, py::arg("train") = 10, py::arg("test_normal") = 8,
        py::arg("test_anomalous") = 8, py::arg("image_hw") = 224, py::arg("patch_size") = 16);

    // feature files
    m.def(
        "read_features",
        [](const std::filesystem::path& p) {
            const FeatureFile f = ingest_features(p);
            py::list grids, regions;
            for (const auto& g : f.grids) grids.append(from_grid(g));
            for (const auto& r : f.region_masks) regions.append(from_regions(r));
            return py::make_tuple(grids, regions.empty() ? py::object(py::none()) : py::object(regions));
        },
        py::arg("path"), "Returns (grids, regions or None).");
    m.def(
        "write_features",
        [](const std::filesystem::path& p, const std::vector<Array>& grids, std::optional<py::list> regions) {
            FeatureFile f;
            for (const auto& g : grids) f.grids.push_back(to_grid(g));
            if (regions)
                for (const auto& r : *regions)
                    f.region_masks.push_back(
                        to_regions(r.cast<py::array_t<int, py::array::c_style | py::array::forcecast>>()));
            write_features(f, p);
        },
        py::arg("path"), py::arg("grids"), py::arg("regions") = py::none());

    // configuration and runs
    py::class_<RunConfig>(m, "RunConfig")
        .def(py::init<>())
        .def_static(
            "parse",
            [](const std::string& text, const std::filesystem::path& base) {
                std::istringstream in(text);
                return parse_run_config(in, base);
            },
            py::arg("text"), py::arg("base_dir") = std::filesystem::path{})
        .def_static("load", &load_run_config, py::arg("path"))
        .def("set", &apply_setting, py::arg("key"), py::arg("value"))
        .def("validate", &RunConfig::validate)
        .def_readwrite("seed", &RunConfig::seed)
        .def_readwrite("backbone", &RunConfig::backbone)
        .def_property_readonly("task_names",
                               [](const RunConfig& c) {
                                   std::vector<std::string> n;
                                   for (const auto& t : c.tasks) n.push_back(t.name);
                                   return n;
                               })
        .def("__str__", [](const RunConfig& c) {
            std::ostringstream os;
            write_run_config(os, c);
            return os.str();
        });

    m.def(
        "run_sequence",
        [](const RunConfig& c, const std::optional<std::filesystem::path>& out) {
            RunResult r;
            {
                py::gil_scoped_release release;
                r = run_sequence(c);
                if (out) write_run_outputs(r, c, *out);
            }
            return run_result_dict(r);
        },
        py::arg("config"), py::arg("out") = py::none());
    m.def(
        "evaluate_bank",
        [](const RunConfig& c, const py::bytes& bank) {
            return run_result_dict(evaluate_bank(c, deserialize_bank(from_bytes(bank))));
        },
        py::arg("config"), py::arg("bank"));

    // banks and inference
    m.def(
        "load_bank", [](const std::filesystem::path& p) { return to_bytes(serialize_bank(load_bank(p))); },
        py::arg("path"), "Bank file contents after validation.");
    m.def(
        "bank_tasks",
        [](const py::bytes& bank) {
            const MemoryBank b = deserialize_bank(from_bytes(bank));
            std::vector<std::string> names;
            for (const auto& t : b.tasks()) names.push_back(t.task_name);
            return names;
        },
        py::arg("bank"));
    m.def(
        "bank_to_json",
        [](const py::bytes& bank) {
            return bank_to_json(deserialize_bank(from_bytes(bank)));
        },
        py::arg("bank"));
    m.def(
        "infer",
        [](const py::bytes& bank, const RunConfig& cfg, const Array& image, std::optional<std::string> task) {
            return infer_dict(bank, cfg, task, [&](const Detector& d, std::optional<std::size_t> f) {
                return d.infer(to_image(image), f);
            });
        },
        py::arg("bank"), py::arg("config"), py::arg("image"), py::arg("task") = py::none(),
        "Scores one (channels, height, width) image.");
    m.def(
        "infer_features",
        [](const py::bytes& bank, const RunConfig& cfg, const Array& grid, std::optional<std::string> task) {
            return infer_dict(bank, cfg, task, [&](const Detector& d, std::optional<std::size_t> f) {
                return d.infer(to_grid(grid), f);
            });
        },
        py::arg("bank"), py::arg("config"), py::arg("grid"), py::arg("task") = py::none(),
        "Scores one (grid_h, grid_w, channels) feature grid.");
}
