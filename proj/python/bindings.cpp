#include <pybind11/functional.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

#include "armtrig/pipeline.hpp"

namespace py = pybind11;
using namespace armtrig;

namespace {

JointState to_state(const Joint6& a) { return JointState{a}; }

TriggerPerturbation to_trigger(const Joint6& t) { return TriggerPerturbation{t}; }

py::dict score_dict(const CandidateScore& s) {
  py::dict d;
  d["f1"] = s.f1;
  d["f2"] = s.f2;
  d["f3"] = s.f3;
  d["penalty"] = s.penalty;
  d["objective"] = s.objective;
  return d;
}

py::list trace_list(const SearchTrace& trace) {
  py::list out;
  for (const auto& r : trace.records) {
    py::dict d;
    d["generation"] = r.generation;
    d["best_objective"] = r.best_objective;
    d["best_t"] = r.best_t.t;
    d["mean_objective"] = r.mean_objective;
    d["evaluations"] = r.evaluations;
    out.append(d);
  }
  return out;
}

py::dict search_dict(const SearchResult& r) {
  py::dict d;
  d["trigger"] = r.best.t;
  d["score"] = score_dict(r.score);
  d["method"] = r.trace.method;
  d["trace"] = trace_list(r.trace);
  return d;
}

}  // namespace

PYBIND11_MODULE(_core, m) {
  m.doc() = "Simulated-arm initial-state backdoor toolkit";
  m.attr("__version__") = kToolkitVersion;

  // translators run newest first, so the base class goes in first
  auto base = py::register_exception<Error>(m, "ArmtrigError");
  py::register_exception<ConfigError>(m, "ConfigError", base.ptr());
  py::register_exception<PreconditionError>(m, "PreconditionError", base.ptr());

  py::enum_<TaskId>(m, "TaskId")
      .value("PickPlace", TaskId::PickPlace)
      .value("DrawerOpen", TaskId::DrawerOpen)
      .value("ButtonPress", TaskId::ButtonPress)
      .value("PegInsert", TaskId::PegInsert)
      .value("Push", TaskId::Push);
  py::enum_<LabelMode>(m, "LabelMode").value("Opposite", LabelMode::Opposite).value("Random", LabelMode::Random);
  py::enum_<RolloutMode>(m, "RolloutMode")
      .value("Consistent", RolloutMode::Consistent)
      .value("Frozen", RolloutMode::Frozen);

  py::class_<ArmGeometry>(m, "ArmGeometry")
      .def(py::init(&default_geometry))
      .def_readwrite("link_lengths", &ArmGeometry::link_lengths)
      .def_readwrite("base_position", &ArmGeometry::base_position)
      .def("reach", &ArmGeometry::reach);

  py::class_<TaskSpec>(m, "TaskSpec")
      .def(py::init(&default_task), py::arg("task") = TaskId::PickPlace)
      .def_readwrite("success_radius", &TaskSpec::success_radius)
      .def_readwrite("horizon", &TaskSpec::horizon)
      .def_readwrite("max_step", &TaskSpec::max_step)
      .def_readwrite("initial_jitter", &TaskSpec::initial_jitter)
      .def_readwrite("execution_noise", &TaskSpec::execution_noise)
      .def_property(
          "default_initial_state", [](const TaskSpec& t) { return t.default_initial_state.angles; },
          [](TaskSpec& t, const Joint6& a) { t.default_initial_state.angles = a; })
      .def_readonly("task_id", &TaskSpec::task_id);

  py::class_<Resolution>(m, "Resolution")
      .def(py::init([](int h, int w) { return Resolution{h, w}; }), py::arg("height") = 32, py::arg("width") = 32)
      .def_readwrite("height", &Resolution::height)
      .def_readwrite("width", &Resolution::width);

  m.def(
      "forward_kinematics",
      [](const Joint6& angles, const ArmGeometry& geom) { return forward_kinematics(to_state(angles), geom).points; },
      py::arg("angles"), py::arg("geometry") = default_geometry(),
      "Base position followed by every link tip.");

  py::class_<Dataset>(m, "Dataset")
      .def("__len__", [](const Dataset& d) { return d.episodes.size(); })
      .def_property_readonly("poisoned_count", &Dataset::poisoned_count)
      .def_property_readonly("step_count", &Dataset::step_count)
      .def_property_readonly("task_id", [](const Dataset& d) { return d.task_id; })
      .def("episode_actions",
           [](const Dataset& d, std::size_t i) {
             if (i >= d.episodes.size()) throw py::index_error();
             std::vector<Joint6> out;
             for (const auto& s : d.episodes[i].steps) out.push_back(s.action.deltas);
             return out;
           })
      .def("episode_states",
           [](const Dataset& d, std::size_t i) {
             if (i >= d.episodes.size()) throw py::index_error();
             std::vector<Joint6> out;
             for (const auto& s : d.episodes[i].steps) out.push_back(s.state.angles);
             return out;
           })
      .def("episode_poisoned",
           [](const Dataset& d, std::size_t i) {
             if (i >= d.episodes.size()) throw py::index_error();
             return d.episodes[i].poisoned;
           })
      .def("__eq__", [](const Dataset& a, const Dataset& b) { return a == b; });

  m.def(
      "collect",
      [](const TaskSpec& task, int n, std::uint64_t seed, const ArmGeometry& geom, const Resolution& res) {
        py::gil_scoped_release release;
        return collect(task, geom, res, n, seed);
      },
      py::arg("task"), py::arg("n"), py::arg("seed"), py::arg("geometry") = default_geometry(),
      py::arg("resolution") = Resolution{});
  m.def(
      "poison",
      [](const Dataset& d, const Joint6& trigger, double rate, LabelMode label_mode, RolloutMode rollout_mode,
         std::uint64_t seed, const TaskSpec& task, const ArmGeometry& geom) {
        PoisonSpec spec{to_trigger(trigger), rate, label_mode, rollout_mode};
        return poison(d, spec, task, geom, seed);
      },
      py::arg("dataset"), py::arg("trigger"), py::arg("rate") = 0.10, py::arg("label_mode") = LabelMode::Opposite,
      py::arg("rollout_mode") = RolloutMode::Consistent, py::arg("seed") = 0, py::arg("task") = default_task(TaskId::PickPlace),
      py::arg("geometry") = default_geometry());
  m.def("save_dataset", &save_dataset, py::arg("dataset"), py::arg("path"));
  m.def("load_dataset", &load_dataset, py::arg("path"));

  py::class_<PolicyParams>(m, "PolicyParams")
      .def_property_readonly("num_parameters", [](const PolicyParams& p) { return p.values.size(); })
      .def_property_readonly("values", [](const PolicyParams& p) { return p.values; })
      .def("__eq__", [](const PolicyParams& a, const PolicyParams& b) { return a == b; });

  m.def(
      "init_policy", [](std::uint64_t seed, bool surrogate) {
        return init_params(surrogate ? surrogate_config() : victim_config(), seed);
      },
      py::arg("seed"), py::arg("surrogate") = false);
  m.def(
      "train",
      [](const PolicyParams& p, const Dataset& d, int steps, std::uint64_t seed) {
        py::gil_scoped_release release;
        auto [out, report] = train(p, d, steps, seed);
        return std::make_pair(out, report.final_loss);
      },
      py::arg("params"), py::arg("dataset"), py::arg("steps"), py::arg("seed"),
      "Returns (trained params, final loss).");
  m.def("save_checkpoint", &save_checkpoint, py::arg("params"), py::arg("path"));
  m.def("load_checkpoint", py::overload_cast<const std::filesystem::path&>(&load_checkpoint), py::arg("path"));

  m.def(
      "evaluate",
      [](const PolicyParams& p, const TaskSpec& task, int n_trials, std::optional<Joint6> trigger,
         std::uint64_t scene_seed_base, int workers) {
        EvalConfig cfg;
        cfg.n_trials = n_trials;
        cfg.scene_seed_base = scene_seed_base;
        cfg.workers = workers;
        if (trigger) cfg.trigger = to_trigger(*trigger);
        EvalReport r;
        {
          py::gil_scoped_release release;
          r = evaluate_policy(p, task, default_geometry(), Resolution{}, cfg);
        }
        py::dict d;
        d["sr"] = r.sr ? py::cast(*r.sr) : py::none();
        d["asr"] = r.asr ? py::cast(*r.asr) : py::none();
        return d;
      },
      py::arg("params"), py::arg("task"), py::arg("n_trials") = 100, py::arg("trigger") = py::none(),
      py::arg("scene_seed_base") = 1000000, py::arg("workers") = 1);

  m.def("eval_f3", [](const Joint6& t) { return eval_f3(to_trigger(t)); }, py::arg("trigger"));
  m.def("penalty", &penalty, py::arg("f3"), py::arg("delta"));
  m.def(
      "pga_search",
      [](const std::function<std::pair<double, double>(const Joint6&)>& terms, int population, int generations,
         int elite, double mutation_prob, double mutation_sigma, double box, double delta, double lambda3,
         std::uint64_t seed) {
        ObjectiveConfig obj;
        obj.delta = delta;
        obj.lambda3 = lambda3;
        SearchConfig cfg;
        cfg.population = population;
        cfg.generations = generations;
        cfg.elite = elite;
        cfg.mutation_prob = mutation_prob;
        cfg.mutation_sigma = mutation_sigma;
        cfg.box = box;
        cfg.seed = seed;
        // Python callbacks hold the GIL, so the search runs single-threaded
        return search_dict(pga_search([&](const TriggerPerturbation& t) { return terms(t.t); }, obj, cfg));
      },
      py::arg("terms"), py::arg("population") = 20, py::arg("generations") = 30, py::arg("elite") = 4,
      py::arg("mutation_prob") = 0.2, py::arg("mutation_sigma") = 0.05, py::arg("box") = 0.6,
      py::arg("delta") = 0.15, py::arg("lambda3") = 1.0, py::arg("seed") = 0,
      "Searches triggers with a Python callable returning (f1, f2).");

  m.def("binom_neg_log10_p", &binom_neg_log10_p, py::arg("successes"), py::arg("trials"), py::arg("chance"));

  m.def(
      "config_json", [](const std::string& text) { return config_to_json(parse_config(text)); }, py::arg("json_text"),
      "Parses a config and returns its canonical JSON form.");
  m.def(
      "apply_override", &apply_override, py::arg("json_text"), py::arg("assignment"));
  m.def(
      "run_stage",
      [](const std::string& stage, const std::string& config_json) {
        const ExperimentConfig cfg = parse_config(config_json);
        py::gil_scoped_release release;
        run_stage(stage, cfg);
      },
      py::arg("stage"), py::arg("config_json"));
  m.def("stage_names", &stage_names);
}
