// Python bindings: configs, worlds, checkpoints, streaming and metrics.
#include <pybind11/functional.h>
#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include "kfstream/pipeline.hpp"

namespace py = pybind11;
using namespace kfs;

namespace {

using Array = py::array_t<double, py::array::c_style | py::array::forcecast>;

Array to_numpy(const Tensor& t) {
  Array a(std::vector<py::ssize_t>(t.shape().begin(), t.shape().end()));
  std::copy(t.data(), t.data() + t.size(), a.mutable_data());
  return a;
}

Tensor from_numpy(const Array& a) {
  Shape shape(a.shape(), a.shape() + a.ndim());
  return Tensor(shape, std::vector<double>(a.data(), a.data() + a.size()));
}

py::dict schedule_to_dict(const PromptSchedule& s) {
  py::list segs;
  for (const auto& seg : s.segments)
    segs.append(py::dict(py::arg("start") = seg.frame_start, py::arg("end") = seg.frame_end,
                         py::arg("tokens") = seg.tokens));
  return py::dict(py::arg("global") = s.global_tokens, py::arg("segments") = segs);
}

PromptSchedule schedule_from_dict(const py::dict& d) {
  PromptSchedule s;
  s.global_tokens = d["global"].cast<std::vector<int>>();
  for (auto item : d["segments"].cast<py::list>()) {
    auto seg = item.cast<py::dict>();
    s.segments.push_back({seg["start"].cast<std::size_t>(), seg["end"].cast<std::size_t>(),
                          seg["tokens"].cast<std::vector<int>>()});
  }
  return s;
}

std::vector<PromptUpdate> updates_from_list(const py::list& l) {
  std::vector<PromptUpdate> out;
  for (auto item : l) {
    auto u = item.cast<py::dict>();
    out.push_back({u["effective_from_frame"].cast<std::size_t>(), u["segment"].cast<std::size_t>(),
                   u["tokens"].cast<std::vector<int>>()});
  }
  return out;
}

RunConfig config_from(const py::object& obj) {
  if (obj.is_none()) return RunConfig{};
  auto json = py::module_::import("json");
  auto cfg = RunConfig::parse(json.attr("dumps")(obj).cast<std::string>());
  cfg.validate();
  return cfg;
}

py::dict config_to_dict(const RunConfig& cfg) {
  return py::module_::import("json").attr("loads")(cfg.to_json()).cast<py::dict>();
}

Embedder embedder_for(const std::optional<Model>& teacher) {
  return teacher ? teacher_embedder(*teacher) : raw_state_embedder();
}

py::dict drift_to_dict(const DriftReport& d) {
  return py::dict(py::arg("curve") = d.curve, py::arg("average") = d.average, py::arg("max") = d.max,
                  py::arg("ratio") = d.ratio, py::arg("acceleration") = d.acceleration);
}

py::dict metrics_to_dict(const EvalMetrics& m) {
  return py::dict(py::arg("adherence") = m.adherence, py::arg("adherence_segments") = m.adherence_scored,
                  py::arg("drift_average") = m.drift_average, py::arg("drift_max") = m.drift_max,
                  py::arg("drift_ratio") = m.drift_ratio, py::arg("drift_acceleration") = m.drift_acceleration,
                  py::arg("raw_drift_ratio") = m.raw_drift_ratio, py::arg("smoothness") = m.smoothness);
}

struct World {
  RunConfig cfg;
  WorldSpec spec;
};

}  // namespace

PYBIND11_MODULE(_kfstream, m) {
  m.doc() = "Streaming generation with future keyframes on a procedural world";
  py::register_exception<NumericalError>(m, "NumericalError", PyExc_ArithmeticError);
  py::register_exception<PrerequisiteError>(m, "PrerequisiteError", PyExc_RuntimeError);

  m.def("default_config", [] { return config_to_dict(RunConfig{}); }, "Default run config as a dict.");
  m.def("config_hash", [](const py::object& c) { return config_from(c).hash(); }, py::arg("config") = py::none());

  py::class_<Model>(m, "Model")
      .def_static("load", [](const std::string& path) { return Model::load_file(path); }, py::arg("path"))
      .def_static(
          "init",
          [](const py::object& c, std::uint64_t seed, bool zero_output) {
            std::mt19937_64 rng(seed);
            return Model::init(config_from(c).model, rng, InitOptions{1.0, zero_output});
          },
          py::arg("config") = py::none(), py::arg("seed") = 0, py::arg("zero_output") = true)
      .def("save", [](const Model& m, const std::string& path) { m.save_file(path); }, py::arg("path"))
      .def_property_readonly("checksum", &Model::checksum)
      .def_property_readonly("parameter_count", &Model::parameter_count)
      .def_property_readonly("config", [](const Model& m) {
        py::dict d;
        for (const auto& [k, v] : m.config().to_kv()) d[py::str(k)] = v;
        return d;
      });

  py::class_<World>(m, "World")
      .def(py::init([](const py::object& c) {
             auto cfg = config_from(c);
             return World{cfg, WorldSpec::generate(cfg.world)};
           }),
           py::arg("config") = py::none())
      .def(
          "episode",
          [](const World& w, std::size_t index, std::optional<std::size_t> frames, std::optional<std::size_t> segments,
             bool validation) {
            auto ep = episode_for_seed(w.spec, split_seed(0, index, validation), frames.value_or(w.cfg.eval_frames),
                                       segments.value_or(w.cfg.eval_segments));
            return py::dict(py::arg("frames") = to_numpy(ep.frames), py::arg("schedule") = schedule_to_dict(ep.schedule),
                            py::arg("labels") = ep.labels, py::arg("task") = ep.task, py::arg("seed") = ep.seed,
                            py::arg("conditioning_frame") = to_numpy(conditioning_frame(ep, w.cfg.model)));
          },
          py::arg("index"), py::arg("frames") = py::none(), py::arg("segments") = py::none(),
          py::arg("validation") = true)
      .def(
          "adherence",
          [](const World& w, const Array& video, const py::dict& schedule) {
            auto r = segment_adherence(w.spec, from_numpy(video), schedule_from_dict(schedule));
            return py::dict(py::arg("fraction") = r.fraction, py::arg("scored") = r.scored,
                            py::arg("matched") = r.matched);
          },
          py::arg("video"), py::arg("schedule"));

  m.def(
      "stream",
      [](const Model& model, const Array& frame0, const py::dict& schedule, const py::object& config,
         const py::list& updates) {
        auto sc = config_from(config).sampler;
        auto prompts = schedule_from_dict(schedule);
        sc.total_frames = prompts.num_frames();
        const auto frame = from_numpy(frame0);
        const auto queued = updates_from_list(updates);
        StreamResult r;
        {
          py::gil_scoped_release release;
          r = stream(model, sc, frame, prompts, queued);
        }
        py::list events;
        for (const auto& e : r.events)
          events.append(py::dict(py::arg("type") = e.type, py::arg("frame_begin") = e.frame_begin,
                                 py::arg("frame_end") = e.frame_end, py::arg("wall_time") = e.wall_time,
                                 py::arg("detail") = e.detail));
        const auto& s = r.stats;
        py::dict stats(py::arg("chunks") = s.chunks, py::arg("keyframes") = s.keyframes,
                       py::arg("consumed") = s.consumed, py::arg("repredicted") = s.repredicted,
                       py::arg("denoise_calls") = s.denoise_calls, py::arg("first_chunk_seconds") = s.first_chunk_seconds);
        const auto video = r.video.reshaped({sc.total_frames, model.config().patches * model.config().channels});
        return py::dict(py::arg("video") = to_numpy(video), py::arg("events") = events, py::arg("stats") = stats);
      },
      py::arg("model"), py::arg("frame0"), py::arg("schedule"), py::arg("config") = py::none(),
      py::arg("updates") = py::list(), "Streams a video; sampler settings come from config['sampler'].");

  m.def(
      "drift",
      [](const Array& video, std::optional<Model> teacher) {
        return drift_to_dict(drift_report(from_numpy(video), embedder_for(teacher)));
      },
      py::arg("video"), py::arg("teacher") = py::none());
  m.def(
      "smoothness",
      [](const Array& video, std::optional<Model> teacher) { return smoothness(from_numpy(video), embedder_for(teacher)); },
      py::arg("video"), py::arg("teacher") = py::none());

  m.def(
      "train",
      [](const py::object& c, const std::string& variant) {
        auto cfg = config_from(c);
        py::gil_scoped_release release;
        return ensure_variant(cfg, Variant::parse(variant)).path;
      },
      py::arg("config"), py::arg("variant"),
      "Trains a variant (and missing prerequisites) unless a matching checkpoint exists; returns its path.");
  m.def(
      "evaluate",
      [](const py::object& c, const Model& model, std::optional<Model> teacher, std::optional<std::string> mode) {
        auto cfg = config_from(c);
        auto sc = cfg.sampler;
        if (mode) sc.mode = parse_mode(*mode);
        const auto spec = WorldSpec::generate(cfg.world);
        EvalMetrics metrics;
        {
          py::gil_scoped_release release;
          metrics = evaluate(cfg, spec, model, sc, embedder_for(teacher));
        }
        return metrics_to_dict(metrics);
      },
      py::arg("config"), py::arg("model"), py::arg("teacher") = py::none(), py::arg("mode") = py::none());
}
