#include <pybind11/functional.h>
#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include <cmath>
#include <limits>
#include <optional>

#include "covflow/corruptions.hpp"
#include "covflow/dataio.hpp"
#include "covflow/errors.hpp"
#include "covflow/metrics.hpp"
#include "covflow/model.hpp"
#include "covflow/scoring.hpp"
#include "covflow/training.hpp"

namespace py = pybind11;
using namespace covflow;

namespace {

using DoubleArray = py::array_t<double, py::array::c_style | py::array::forcecast>;

Tensor tensor_from(const DoubleArray& a) {
  Shape shape(static_cast<std::size_t>(a.ndim()));
  for (py::ssize_t i = 0; i < a.ndim(); ++i) {
    shape[static_cast<std::size_t>(i)] = static_cast<std::size_t>(a.shape(i));
  }
  Tensor t(shape);
  std::copy(a.data(), a.data() + t.numel(), t.data());
  return t;
}

py::array_t<double> array_from(const Tensor& t) {
  std::vector<py::ssize_t> shape(t.shape().begin(), t.shape().end());
  py::array_t<double> a(shape);
  std::copy(t.data(), t.data() + t.numel(), a.mutable_data());
  return a;
}

py::array_t<double> vector_array(const std::vector<double>& v) {
  std::vector<py::ssize_t> shape{static_cast<py::ssize_t>(v.size())};
  py::array_t<double> a(shape);
  std::copy(v.begin(), v.end(), a.mutable_data());
  return a;
}

std::vector<double> vector_from(const DoubleArray& a) {
  return std::vector<double>(a.data(), a.data() + a.size());
}

}  // namespace

PYBIND11_MODULE(_core, m) {
  m.doc() = "Conditional normalizing flow over high-frequency image components, with "
            "log-likelihood, typicality, and NSD covariate-shift scores";

  py::register_exception<ConfigError>(m, "ConfigError", PyExc_ValueError);
  py::register_exception<DataError>(m, "DataError", PyExc_IOError);
  py::register_exception<NumericError>(m, "NumericError", PyExc_ArithmeticError);

  m.def(
      "synth_images",
      [](std::size_t count, std::size_t channels, std::size_t height, std::size_t width,
         double smoothness, double grain, std::uint64_t seed) {
        data::SynthConfig cfg;
        cfg.count = count;
        cfg.channels = channels;
        cfg.height = height;
        cfg.width = width;
        cfg.smoothness = smoothness;
        cfg.grain = grain;
        cfg.seed = seed;
        cfg.validate();
        Tensor out;
        {
          py::gil_scoped_release release;
          out = data::synth_images(cfg);
        }
        return array_from(out);
      },
      py::arg("count"), py::arg("channels") = 3, py::arg("height") = 16, py::arg("width") = 16,
      py::arg("smoothness") = 1.5, py::arg("grain") = 0.06, py::arg("seed") = 1,
      "Synthetic textures in [0,1], shape [N,C,H,W]");

  m.def("corruption_kinds", [] {
    std::vector<std::string> names;
    for (corrupt::Kind k : corrupt::kAllKinds) names.emplace_back(corrupt::kind_name(k));
    return names;
  });
  m.def(
      "severity_parameter",
      [](const std::string& kind, int severity) {
        return corrupt::SeverityTable::defaults().parameter(corrupt::kind_from_name(kind),
                                                            severity);
      },
      py::arg("kind"), py::arg("severity"));
  m.def(
      "apply_corruption",
      [](const DoubleArray& image, const std::string& kind, double parameter,
         std::uint64_t seed) {
        Tensor img = tensor_from(image);
        if (img.rank() != 3) throw ConfigError("image must have shape [C,H,W]");
        Rng rng(seed);
        Tensor out;
        {
          py::gil_scoped_release release;
          out = corrupt::apply(img, corrupt::kind_from_name(kind), parameter, rng);
        }
        return array_from(out);
      },
      py::arg("image"), py::arg("kind"), py::arg("parameter"), py::arg("seed") = 1,
      "One corruption applied to a [C,H,W] image in [0,1]");

  py::class_<score::NormalizationStats>(m, "NormalizationStats")
      .def(py::init<>())
      .def_readwrite("mu_ll", &score::NormalizationStats::mu_ll)
      .def_readwrite("sigma_ll", &score::NormalizationStats::sigma_ll)
      .def_readwrite("mu_grad", &score::NormalizationStats::mu_grad)
      .def_readwrite("sigma_grad", &score::NormalizationStats::sigma_grad)
      .def_readwrite("count", &score::NormalizationStats::count)
      .def_readwrite("model_fingerprint", &score::NormalizationStats::model_fingerprint)
      .def("to_json", &score::NormalizationStats::to_json)
      .def_static("from_json", &score::NormalizationStats::from_json)
      .def("__repr__", [](const score::NormalizationStats& s) {
        return "NormalizationStats(" + s.to_json() + ")";
      });
  m.def("nsd_value", &score::nsd_value, py::arg("ll"), py::arg("grad_norm"), py::arg("stats"));

  py::class_<flow::FlowModel>(m, "FlowModel")
      .def_static(
          "build",
          [](const std::string& mode, std::size_t channels, std::size_t height,
             std::size_t width, std::size_t coupling_steps, std::size_t hidden_channels,
             std::size_t residual_blocks, double filter_sigma, std::uint32_t bit_depth,
             std::uint64_t init_seed) {
            flow::ModelConfig cfg;
            cfg.mode = flow::flow_mode_from_name(mode);
            cfg.channels = channels;
            cfg.height = height;
            cfg.width = width;
            cfg.coupling_steps = coupling_steps;
            cfg.hidden_channels = hidden_channels;
            cfg.residual_blocks = residual_blocks;
            cfg.filter_sigma = filter_sigma;
            cfg.bit_depth = bit_depth;
            cfg.init_seed = init_seed;
            cfg.validate();
            return flow::FlowModel::build(cfg);
          },
          py::arg("mode") = "high-conditional-sdl", py::arg("channels") = 3,
          py::arg("height") = 16, py::arg("width") = 16, py::arg("coupling_steps") = 16,
          py::arg("hidden_channels") = 39, py::arg("residual_blocks") = 2,
          py::arg("filter_sigma") = 1.0, py::arg("bit_depth") = 16,
          py::arg("init_seed") = 76001)
      .def_property_readonly("parameter_count", &flow::FlowModel::parameter_count)
      .def_property_readonly("fingerprint", &flow::FlowModel::fingerprint)
      .def_property_readonly("config_json",
                             [](const flow::FlowModel& mdl) { return mdl.config().to_json(); })
      .def(
          "log_likelihood",
          [](flow::FlowModel& mdl, const DoubleArray& images, std::uint64_t seed) {
            Tensor imgs = tensor_from(images);
            std::vector<flow::LikelihoodResult> res;
            {
              py::gil_scoped_release release;
              res = mdl.log_likelihood(imgs, seed);
            }
            std::vector<double> ll(res.size()), bpd(res.size());
            for (std::size_t i = 0; i < res.size(); ++i) {
              ll[i] = res[i].ll;
              bpd[i] = res[i].bpd;
            }
            py::dict out;
            out["ll"] = vector_array(ll);
            out["bpd"] = vector_array(bpd);
            return out;
          },
          py::arg("images"), py::arg("seed") = 1,
          "Per-sample log-likelihood (nats) and bits per dimension of [N,C,H,W] images")
      .def(
          "score",
          [](flow::FlowModel& mdl, const DoubleArray& images, std::uint64_t seed) {
            Tensor imgs = tensor_from(images);
            flow::FlowModel::ScoreBatch batch;
            {
              py::gil_scoped_release release;
              batch = mdl.score(imgs, seed);
            }
            std::vector<double> ll(batch.ll.size());
            for (std::size_t i = 0; i < ll.size(); ++i) ll[i] = batch.ll[i].ll;
            py::dict out;
            out["ll"] = vector_array(ll);
            out["grad_norm"] = vector_array(batch.grad_norm);
            return out;
          },
          py::arg("images"), py::arg("seed") = 1,
          "Log-likelihood and input-gradient norm per sample")
      .def(
          "prepare",
          [](const flow::FlowModel& mdl, const DoubleArray& images) {
            auto [component, low] = mdl.prepare(tensor_from(images));
            return py::make_tuple(array_from(component), array_from(low));
          },
          py::arg("images"), "Split raw images into (modeled component, low component)")
      .def(
          "transform",
          [](flow::FlowModel& mdl, const DoubleArray& component, const DoubleArray& low) {
            Tensor comp = tensor_from(component);
            Tensor xl = tensor_from(low);
            flow::FlowModel::TransformOut out;
            {
              py::gil_scoped_release release;
              out = mdl.transform(comp, xl);
            }
            return py::make_tuple(array_from(out.z), array_from(out.logdet));
          },
          py::arg("component"), py::arg("low"))
      .def(
          "inverse_transform",
          [](flow::FlowModel& mdl, const DoubleArray& z, const DoubleArray& low) {
            Tensor zz = tensor_from(z);
            Tensor xl = tensor_from(low);
            Tensor out;
            {
              py::gil_scoped_release release;
              out = mdl.inverse_transform(zz, xl);
            }
            return array_from(out);
          },
          py::arg("z"), py::arg("low"))
      .def(
          "sample",
          [](flow::FlowModel& mdl, std::size_t count, std::optional<DoubleArray> low,
             double temperature, std::uint64_t seed) {
            Tensor xl = low ? tensor_from(*low) : Tensor();
            Tensor out;
            {
              py::gil_scoped_release release;
              out = mdl.sample_component(count, xl, temperature, seed);
            }
            return array_from(out);
          },
          py::arg("count"), py::arg("low") = py::none(), py::arg("temperature") = 0.7,
          py::arg("seed") = 1, "Draw high-frequency components; conditional modes need `low`");

  m.def(
      "train",
      [](flow::FlowModel& mdl, const DoubleArray& images, double alpha, double lr_max,
         std::size_t epochs, std::size_t batch_size, std::uint64_t seed, double clip_norm,
         const std::optional<py::function>& on_step) {
        Tensor imgs = tensor_from(images);
        train::TrainConfig cfg;
        cfg.alpha = alpha;
        cfg.lr_max = lr_max;
        cfg.epochs = epochs;
        cfg.batch_size = batch_size;
        cfg.seed = seed;
        cfg.clip_norm = clip_norm;
        cfg.validate();
        train::TrainHooks hooks;
        if (on_step) {
          hooks.on_step = [&](const train::TrainLogRow& row) {
            py::gil_scoped_acquire acquire;
            py::dict d;
            d["epoch"] = row.epoch;
            d["step"] = row.step;
            d["nll"] = row.nll;
            d["penalty"] = row.penalty;
            d["bpd"] = row.bpd;
            d["lr"] = row.lr;
            (*on_step)(d);
          };
        }
        train::TrainSummary summary;
        {
          py::gil_scoped_release release;
          summary = train::train(mdl, imgs, cfg, hooks);
        }
        py::dict out;
        out["steps_run"] = summary.steps_run;
        out["batches_skipped"] = summary.batches_skipped;
        out["final_loss"] = summary.final_loss;
        return out;
      },
      py::arg("model"), py::arg("images"), py::arg("alpha") = 2.0, py::arg("lr_max") = 5e-4,
      py::arg("epochs") = 30, py::arg("batch_size") = 32, py::arg("seed") = 1,
      py::arg("clip_norm") = 0.0, py::arg("on_step") = py::none(),
      "Optimize the model in place on [N,C,H,W] images in [0,1]");

  m.def(
      "compute_stats",
      [](flow::FlowModel& mdl, const DoubleArray& images, std::uint64_t seed,
         std::size_t batch_size) {
        Tensor imgs = tensor_from(images);
        py::gil_scoped_release release;
        return score::compute_stats(mdl, imgs, seed, batch_size);
      },
      py::arg("model"), py::arg("images"), py::arg("seed") = 1301, py::arg("batch_size") = 64,
      "In-distribution (ll, grad-norm) normalization stats, bound to the model fingerprint");

  m.def(
      "score_dataset",
      [](flow::FlowModel& mdl, const DoubleArray& images,
         const std::optional<score::NormalizationStats>& stats, std::uint64_t seed,
         std::size_t batch_size, std::size_t threads) {
        Tensor imgs = tensor_from(images);
        std::vector<score::ScoreRecord> records;
        {
          py::gil_scoped_release release;
          records = score::score_dataset(mdl, imgs, stats ? &*stats : nullptr, seed,
                                         batch_size, threads);
        }
        std::vector<double> ids(records.size()), ll(records.size()), gn(records.size()),
            nsd(records.size());
        for (std::size_t i = 0; i < records.size(); ++i) {
          ids[i] = static_cast<double>(records[i].sample_id);
          ll[i] = records[i].ll;
          gn[i] = records[i].grad_norm;
          nsd[i] = records[i].has_nsd ? records[i].nsd
                                      : std::numeric_limits<double>::quiet_NaN();
        }
        py::dict out;
        out["sample_id"] = vector_array(ids);
        out["ll"] = vector_array(ll);
        out["grad_norm"] = vector_array(gn);
        out["nsd"] = vector_array(nsd);
        return out;
      },
      py::arg("model"), py::arg("images"), py::arg("stats") = py::none(),
      py::arg("seed") = 1301, py::arg("batch_size") = 64, py::arg("threads") = 1,
      "Per-sample scores; `nsd` is NaN when stats are absent");

  m.def(
      "auroc",
      [](const DoubleArray& id_scores, const DoubleArray& ood_scores) {
        return metrics::auroc(vector_from(id_scores), vector_from(ood_scores));
      },
      py::arg("id_scores"), py::arg("ood_scores"),
      "P(ood > id) with ties half; higher scores mean more OOD");
  m.def(
      "fpr_at_tpr",
      [](const DoubleArray& id_scores, const DoubleArray& ood_scores, double tpr) {
        return metrics::fpr_at_tpr(vector_from(id_scores), vector_from(ood_scores), tpr);
      },
      py::arg("id_scores"), py::arg("ood_scores"), py::arg("tpr") = 0.95);

  m.def(
      "save_checkpoint",
      [](const std::string& path, const flow::FlowModel& mdl,
         const std::optional<score::NormalizationStats>& stats) {
        data::Checkpoint ckpt = data::checkpoint_from_model(mdl);
        ckpt.stats = stats;
        data::save_checkpoint(path, ckpt);
      },
      py::arg("path"), py::arg("model"), py::arg("stats") = py::none());
  m.def(
      "load_checkpoint",
      [](const std::string& path) {
        data::Checkpoint ckpt = data::load_checkpoint(path);
        py::object stats = ckpt.stats ? py::cast(*ckpt.stats) : py::none();
        return py::make_tuple(py::cast(data::model_from_checkpoint(ckpt)), stats);
      },
      py::arg("path"), "Returns (model, stats-or-None)");

  m.def(
      "read_netpbm",
      [](const std::string& path) { return array_from(data::read_netpbm(path)); },
      py::arg("path"), "Read a binary PGM/PPM into a [C,H,W] float array");
  m.def(
      "write_netpbm",
      [](const std::string& path, const DoubleArray& image, std::uint32_t bit_depth) {
        data::write_netpbm(path, tensor_from(image), bit_depth);
      },
      py::arg("path"), py::arg("image"), py::arg("bit_depth") = 16);
}
