#include "armtrig/pipeline.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>

#include <json.hpp>

namespace armtrig {

namespace fs = std::filesystem;
using json = nlohmann::json;
using ojson = nlohmann::ordered_json;

// ---------------------------------------------------------------------------
// Manifest

RunManifest load_manifest(const fs::path& out_dir) {
  RunManifest m;
  const fs::path p = out_dir / artifacts::kManifest;
  if (!fs::exists(p)) return m;
  std::ifstream in(p);
  json j;
  try {
    in >> j;
    m.config_hash = j.at("config_hash").get<std::string>();
    m.toolkit_version = j.at("toolkit_version").get<std::string>();
    for (const auto& [name, rec] : j.at("stages").items()) {
      StageRecord r;
      r.artifacts = rec.at("artifacts").get<std::vector<std::string>>();
      r.wall_time = rec.at("wall_time").get<double>();
      r.seed = rec.at("seed").get<std::uint64_t>();
      m.stages[name] = r;
    }
  } catch (const std::exception& e) {
    throw CorruptRecord(0, std::string("manifest: ") + e.what());
  }
  return m;
}

void save_manifest(const RunManifest& m, const fs::path& out_dir) {
  ojson j;
  j["config_hash"] = m.config_hash;
  j["toolkit_version"] = m.toolkit_version;
  ojson stages = ojson::object();
  for (const auto& stage : stage_names()) {
    const auto it = m.stages.find(stage);
    if (it == m.stages.end()) continue;
    stages[stage] = {{"artifacts", it->second.artifacts}, {"wall_time", it->second.wall_time},
                     {"seed", it->second.seed}};
  }
  j["stages"] = stages;
  fs::create_directories(out_dir);
  std::ofstream(out_dir / artifacts::kManifest) << j.dump(2) << "\n";
}

namespace {

fs::path out_path(const ExperimentConfig& cfg, const char* rel) {
  const fs::path p = fs::path(cfg.output_dir) / rel;
  fs::create_directories(p.parent_path());
  return p;
}

void write_text(const fs::path& p, const std::string& text) {
  std::ofstream out(p, std::ios::binary);
  if (!out) throw Error("cannot write '" + p.string() + "'");
  out << text;
}

std::string read_text(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  if (!in) throw Error("missing artifact '" + p.string() + "'; run the producing stage first");
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

fs::path need(const ExperimentConfig& cfg, const char* rel) {
  const fs::path p = fs::path(cfg.output_dir) / rel;
  if (!fs::exists(p)) throw Error(std::string("missing artifact '") + rel + "'; run the producing stage first");
  return p;
}

/// Shared state of one stage invocation.
struct StageContext {
  const ExperimentConfig& cfg;
  std::uint64_t seed;
  std::vector<std::string> written;

  fs::path out(const char* rel) {
    written.emplace_back(rel);
    return out_path(cfg, rel);
  }
};

AttackSetup attack_setup(const ExperimentConfig& cfg) {
  const std::uint64_t s = stage_seed(cfg.master_seed, "attack");
  AttackSetup a;
  a.victim = cfg.policy;
  a.mode = cfg.mode;
  a.train_steps = cfg.training.train_steps;
  a.finetune_steps = cfg.training.finetune_steps;
  a.init_seed = derive_seed(s, "init");
  a.train_seed = derive_seed(s, "train");
  a.poison_seed = derive_seed(s, "poison");
  return a;
}

EvalConfig eval_config(const ExperimentConfig& cfg, int n_trials) {
  EvalConfig e;
  e.n_trials = n_trials;
  // evaluation scenes sit 10^6 above the collection base
  e.scene_seed_base = stage_seed(cfg.master_seed, "gen-data") + 1000000ULL;
  e.workers = cfg.workers;
  return e;
}

TriggerPerturbation current_trigger(const ExperimentConfig& cfg) {
  if (cfg.fixed_trigger) return *cfg.fixed_trigger;
  const json j = json::parse(read_text(need(cfg, artifacts::kTrigger)));
  TriggerPerturbation t;
  t.t = j.at("trigger").get<Joint6>();
  return t;
}

Dataset clean_data(const ExperimentConfig& cfg) { return load_dataset(need(cfg, artifacts::kCleanData)); }

PolicyParams model(const ExperimentConfig& cfg, const char* rel) { return load_checkpoint(need(cfg, rel), cfg.policy); }

ojson score_json(const CandidateScore& s) {
  auto num = [](double x) { return std::isfinite(x) ? ojson(x) : ojson(nullptr); };
  return {{"f1", num(s.f1)}, {"f2", num(s.f2)}, {"f3", num(s.f3)}, {"penalty", num(s.penalty)},
          {"objective", num(s.objective)}};
}

// ---------------------------------------------------------------------------
// Stages

void stage_gen_data(StageContext& ctx) {
  const ExperimentConfig& cfg = ctx.cfg;
  const Dataset d = collect(cfg.task_spec(), cfg.geometry, cfg.resolution, cfg.data.n_episodes, ctx.seed);
  save_dataset(d, ctx.out(artifacts::kCleanData));
}

void stage_search(StageContext& ctx) {
  const ExperimentConfig& cfg = ctx.cfg;
  Dataset full = clean_data(cfg);
  Dataset subset = full;
  if (static_cast<int>(subset.episodes.size()) > cfg.search.search_episodes)
    subset.episodes.resize(static_cast<std::size_t>(cfg.search.search_episodes));

  ObjectiveConfig obj = cfg.objective;
  obj.scoring_seed = derive_seed(ctx.seed, "scoring");
  SearchConfig sc = cfg.search.search;
  sc.seed = derive_seed(ctx.seed, "search");
  sc.workers = cfg.workers;
  const CandidateEvaluator evaluator(subset, obj, cfg.task_spec(), cfg.geometry);

  SearchResult result;
  if (cfg.search.method == "PGA") {
    result = pga_search(evaluator.as_terms(), obj, sc);
  } else {
    const long long budget =
        cfg.search.budget > 0 ? cfg.search.budget : static_cast<long long>(sc.population) * sc.generations;
    result = baseline_search(baseline_from_string(cfg.search.method), evaluator.as_terms(), obj, sc, budget);
  }

  ojson j;
  j["method"] = result.trace.method;
  j["trigger"] = result.best.t;
  j["score"] = score_json(result.score);
  j["feasible"] = result.score.f3 <= obj.delta;
  j["evaluations"] = result.trace.records.empty() ? 0 : result.trace.records.back().evaluations;
  const auto etf = evaluations_to_feasible(result.trace, obj.delta);
  j["evaluations_to_feasible"] = etf ? ojson(*etf) : ojson(nullptr);
  write_text(ctx.out(artifacts::kTrigger), j.dump(2) + "\n");
  save_trace(result.trace, ctx.out(artifacts::kTrace));
}

void stage_attack(StageContext& ctx) {
  const ExperimentConfig& cfg = ctx.cfg;
  const Dataset clean = clean_data(cfg);
  const AttackSetup setup = attack_setup(cfg);
  PoisonSpec spec = cfg.poison;
  spec.trigger = current_trigger(cfg);

  const PolicyParams pretrained = train_clean(clean, setup);
  save_checkpoint(pretrained, ctx.out(artifacts::kCleanModel));
  const Dataset poisoned = poison(clean, spec, cfg.task_spec(), cfg.geometry, setup.poison_seed);
  save_dataset(poisoned, ctx.out(artifacts::kPoisonedData));
  const PolicyParams backdoored = train_attacked(clean, spec, cfg.task_spec(), cfg.geometry, setup, &pretrained);
  save_checkpoint(backdoored, ctx.out(artifacts::kBackdoorModel));
}

std::string ablation_csv(const std::vector<std::pair<TaskId, std::vector<SweepRow>>>& tables) {
  std::ostringstream out;
  out << "task,mode,sr,asr,n_trials,seeds\n";
  char buf[160];
  for (const auto& [task, rows] : tables)
    for (const auto& r : rows) {
      if (r.failed)
        std::snprintf(buf, sizeof buf, "%s,%s,nan,nan,%d,%s\n", to_string(task).c_str(), r.key.c_str(), r.n_trials,
                      r.seeds.c_str());
      else
        std::snprintf(buf, sizeof buf, "%s,%s,%.4f,%.4f,%d,%s\n", to_string(task).c_str(), r.key.c_str(), r.sr,
                      r.asr, r.n_trials, r.seeds.c_str());
      out << buf;
    }
  return out.str();
}

void stage_eval(StageContext& ctx) {
  const ExperimentConfig& cfg = ctx.cfg;
  const PolicyParams clean_model = model(cfg, artifacts::kCleanModel);
  const PolicyParams backdoor = model(cfg, artifacts::kBackdoorModel);
  EvalConfig ec = eval_config(cfg, cfg.eval.n_trials);
  const TaskSpec task = cfg.task_spec();
  const bool have_trigger = cfg.fixed_trigger || fs::exists(fs::path(cfg.output_dir) / artifacts::kTrigger);
  if (have_trigger) ec.trigger = current_trigger(cfg);

  ojson report;
  report["task"] = to_string(cfg.task);
  report["trigger"] = have_trigger ? ojson(ec.trigger->t) : ojson(nullptr);
  report["poison_rate"] = cfg.poison.rate;
  report["mode"] = to_string(cfg.mode);
  report["clean"] = ojson::parse(eval_report_json(evaluate_policy(clean_model, task, cfg.geometry, cfg.resolution, ec)));
  report["backdoor"] = ojson::parse(eval_report_json(evaluate_policy(backdoor, task, cfg.geometry, cfg.resolution, ec)));
  write_text(ctx.out(artifacts::kEvalReport), report.dump(2) + "\n");
  if (!have_trigger) return;  // sweeps and ablations need a trigger
  const TriggerPerturbation trigger = *ec.trigger;

  const Dataset clean = clean_data(cfg);
  const AttackSetup setup = attack_setup(cfg);
  ec.trigger.reset();
  const bool finetune = cfg.mode == TrainMode::Finetune;
  const auto sweep = sweep_poison_rate(clean, cfg.eval.sweep_rates, trigger, task, cfg.geometry, setup, ec,
                                       finetune ? &clean_model : nullptr);
  write_text(ctx.out(artifacts::kSweep), sweep_csv(sweep, "rate"));

  std::vector<TaskId> tasks = cfg.eval.ablation_tasks;
  if (tasks.empty()) tasks.push_back(cfg.task);
  std::vector<std::pair<TaskId, std::vector<SweepRow>>> tables;
  for (TaskId id : tasks) {
    const TaskSpec ts = cfg.task_spec(id);
    if (id == cfg.task) {
      tables.emplace_back(id, ablation_trajectory_mode(clean, cfg.eval.ablation_modes, trigger, cfg.poison.rate, ts,
                                                       cfg.geometry, setup, ec, finetune ? &clean_model : nullptr));
      continue;
    }
    const std::uint64_t task_seed = derive_seed(ctx.seed, "ablation-task", static_cast<std::uint64_t>(id));
    const Dataset other = collect(ts, cfg.geometry, cfg.resolution, cfg.data.n_episodes, task_seed);
    tables.emplace_back(id, ablation_trajectory_mode(other, cfg.eval.ablation_modes, trigger, cfg.poison.rate, ts,
                                                     cfg.geometry, setup, ec));
  }
  write_text(ctx.out(artifacts::kAblation), ablation_csv(tables));
}

void stage_defend(StageContext& ctx) {
  const ExperimentConfig& cfg = ctx.cfg;
  const TriggerPerturbation trigger = current_trigger(cfg);
  const PolicyParams backdoor = model(cfg, artifacts::kBackdoorModel);
  const EvalConfig ec = eval_config(cfg, cfg.eval.n_trials);
  const TaskSpec task = cfg.task_spec();

  std::vector<Sample> probe;
  if (cfg.defense.criterion == PruneCriterion::CleanActivation) {
    probe = all_samples(clean_data(cfg));
    if (probe.size() > 256) probe.resize(256);
  }
  const auto prune_rows = defended_eval_prune(backdoor, task, cfg.geometry, cfg.resolution, trigger,
                                              cfg.defense.prune_ratios, ec, cfg.defense.criterion, cfg.defense.scope,
                                              probe);
  write_text(ctx.out(artifacts::kPrune), defense_csv(prune_rows));
  const auto compress_rows =
      defended_eval_compress(backdoor, task, cfg.geometry, cfg.resolution, trigger, cfg.defense.qualities, ec);
  write_text(ctx.out(artifacts::kCompress), defense_csv(compress_rows));
}

void stage_watermark(StageContext& ctx) {
  const ExperimentConfig& cfg = ctx.cfg;
  const TriggerPerturbation key = current_trigger(cfg);
  const PolicyParams marked = model(cfg, artifacts::kBackdoorModel);
  const PolicyParams clean_model = model(cfg, artifacts::kCleanModel);
  const EvalConfig ec = eval_config(cfg, cfg.eval.n_trials);
  const TaskSpec task = cfg.task_spec();
  WatermarkConfig wc = cfg.watermark.verify;
  wc.workers = cfg.workers;

  const std::uint64_t verify_seed = derive_seed(ctx.seed, "verify");
  ojson j;
  j["key"] = key.t;
  j["watermarked"] = ojson::parse(
      watermark_report_json(verify(marked, key, task, cfg.geometry, cfg.resolution, wc, ec, verify_seed)));
  j["clean"] = ojson::parse(
      watermark_report_json(verify(clean_model, key, task, cfg.geometry, cfg.resolution, wc, ec, verify_seed)));
  write_text(ctx.out(artifacts::kWatermark), j.dump(2) + "\n");

  WatermarkConfig erosion_cfg = wc;
  erosion_cfg.trials = cfg.watermark.erosion_trials;
  const auto curve = finetune_erosion(marked, clean_data(cfg), cfg.watermark.erosion_schedule, key, task,
                                      cfg.geometry, erosion_cfg, ec, derive_seed(ctx.seed, "erosion"));
  write_text(ctx.out(artifacts::kErosion), erosion_csv(curve));
}

// ---------------------------------------------------------------------------
// Report

const std::map<std::string, std::string>& csv_headers() {
  static const std::map<std::string, std::string> h{
      {artifacts::kSweep, "rate,sr,asr,n_trials,seeds"},
      {artifacts::kAblation, "task,mode,sr,asr,n_trials,seeds"},
      {artifacts::kPrune, "defense,strength,sr,asr,n_trials,seed"},
      {artifacts::kCompress, "defense,strength,sr,asr,n_trials,seed"},
      {artifacts::kErosion, "steps,top1,top10,neg_log10_p_1,neg_log10_p_10"},
  };
  return h;
}

const std::map<std::string, std::vector<std::string>>& json_keys() {
  static const std::map<std::string, std::vector<std::string>> k{
      {artifacts::kTrigger, {"method", "trigger", "score", "feasible", "evaluations"}},
      {artifacts::kEvalReport, {"task", "trigger", "clean", "backdoor"}},
      {artifacts::kWatermark, {"key", "watermarked", "clean"}},
  };
  return k;
}

const std::map<std::string, std::vector<std::string>>& stage_outputs() {
  using namespace artifacts;
  static const std::map<std::string, std::vector<std::string>> o{
      {"gen-data", {kCleanData}},
      {"search-trigger", {kTrigger, kTrace}},
      {"attack", {kCleanModel, kPoisonedData, kBackdoorModel}},
      {"eval", {kEvalReport, kSweep, kAblation}},
      {"defend", {kPrune, kCompress}},
      {"watermark", {kWatermark, kErosion}},
  };
  return o;
}

/// Returns a problem description, or an empty string when the artifact is valid.
std::string check_artifact(const fs::path& root, const std::string& rel) {
  const fs::path p = root / rel;
  if (!fs::exists(p)) return "missing";
  try {
    if (const auto it = csv_headers().find(rel); it != csv_headers().end()) {
      std::ifstream in(p);
      std::string header, line;
      std::getline(in, header);
      if (header != it->second) return "bad CSV header '" + header + "'";
      const auto columns = std::count(header.begin(), header.end(), ',');
      int rows = 0;
      while (std::getline(in, line)) {
        if (std::count(line.begin(), line.end(), ',') != columns) return "ragged CSV row";
        ++rows;
      }
      if (rows == 0) return "CSV has no rows";
    } else if (const auto jt = json_keys().find(rel); jt != json_keys().end()) {
      const json j = json::parse(read_text(p));
      for (const auto& k : jt->second)
        if (!j.contains(k)) return "JSON lacks key '" + k + "'";
    } else if (rel == artifacts::kTrace) {
      if (load_trace(p).records.empty()) return "empty trace";
    } else if (rel == artifacts::kCleanData || rel == artifacts::kPoisonedData) {
      load_dataset(p);
    } else {
      load_checkpoint(p);
    }
  } catch (const std::exception& e) {
    return e.what();
  }
  return {};
}

void stage_report(StageContext& ctx) {
  const ExperimentConfig& cfg = ctx.cfg;
  const fs::path root(cfg.output_dir);
  const RunManifest manifest = load_manifest(root);

  ojson summary;
  summary["config_hash"] = config_hash(cfg);
  summary["toolkit_version"] = kToolkitVersion;
  summary["master_seed"] = cfg.master_seed;
  ojson stages = ojson::object();
  std::vector<std::string> problems;
  for (const auto& stage : stage_names()) {
    if (stage == "report") continue;
    ojson s;
    const bool recorded = manifest.stages.count(stage) > 0;
    s["recorded"] = recorded;
    if (!recorded) problems.push_back(stage + ": stage has not run");
    ojson files = ojson::object();
    for (const auto& rel : stage_outputs().at(stage)) {
      const std::string issue = check_artifact(root, rel);
      files[rel] = issue.empty() ? ojson("ok") : ojson(issue);
      if (!issue.empty()) problems.push_back(rel + ": " + issue);
    }
    s["artifacts"] = files;
    stages[stage] = s;
  }
  summary["stages"] = stages;

  ojson results = ojson::object();
  const auto grab = [&](const char* rel) -> std::optional<ojson> {
    if (!check_artifact(root, rel).empty()) return std::nullopt;
    return ojson::parse(read_text(root / rel));
  };
  if (auto t = grab(artifacts::kTrigger)) results["trigger"] = *t;
  if (auto e = grab(artifacts::kEvalReport)) {
    results["clean"] = {{"sr", (*e)["clean"]["sr"]}, {"asr", (*e)["clean"]["asr"]}};
    results["backdoor"] = {{"sr", (*e)["backdoor"]["sr"]}, {"asr", (*e)["backdoor"]["asr"]}};
  }
  if (auto w = grab(artifacts::kWatermark)) {
    for (const char* which : {"watermarked", "clean"}) {
      const ojson& r = (*w)[which];
      results["watermark"][which] = {{"validation_accuracy", r["validation_accuracy"]},
                                     {"topk", r["topk"]},
                                     {"neg_log10_p", r["neg_log10_p"]}};
    }
  }
  summary["results"] = results;
  summary["problems"] = problems;
  write_text(ctx.out(artifacts::kSummary), summary.dump(2) + "\n");

  // result tables, one file each, only for artifacts that validated
  const std::vector<std::pair<const char*, const char*>> copies{
      {artifacts::kSweep, "report/poison_rate.csv"}, {artifacts::kPrune, "report/prune.csv"},
      {artifacts::kCompress, "report/compress.csv"}, {artifacts::kErosion, "report/erosion.csv"},
      {artifacts::kAblation, "report/trajectory_mode.csv"}};
  for (const auto& [src, dst] : copies)
    if (check_artifact(root, src).empty()) write_text(ctx.out(dst), read_text(root / src));
  if (results.contains("trigger")) {
    const ojson& t = results["trigger"];
    const ojson& sc = t["score"];
    const auto cell = [](const ojson& v) { return v.is_null() ? std::string("nan") : v.dump(); };
    std::string csv = "method,objective,f1,f2,f3,penalty,feasible,evaluations,evaluations_to_feasible\n";
    csv += t["method"].get<std::string>() + "," + cell(sc["objective"]) + "," + cell(sc["f1"]) + "," +
           cell(sc["f2"]) + "," + cell(sc["f3"]) + "," + cell(sc["penalty"]) + "," + t["feasible"].dump() + "," +
           t["evaluations"].dump() + "," + cell(t["evaluations_to_feasible"]) + "\n";
    write_text(ctx.out("report/search.csv"), csv);
  }
  if (results.contains("watermark")) {
    std::string csv = "model,validation_accuracy,top1,top10,neg_log10_p_1,neg_log10_p_10\n";
    char buf[200];
    for (const char* which : {"watermarked", "clean"}) {
      const ojson& r = results["watermark"][which];
      const auto at = [](const ojson& m, const char* k) { return m.contains(k) ? m[k].get<double>() : 0.0; };
      std::snprintf(buf, sizeof buf, "%s,%.4f,%.4f,%.4f,%.6f,%.6f\n", which, r["validation_accuracy"].get<double>(),
                    at(r["topk"], "1"), at(r["topk"], "10"), at(r["neg_log10_p"], "1"), at(r["neg_log10_p"], "10"));
      csv += buf;
    }
    write_text(ctx.out("report/watermark.csv"), csv);
  }

  if (!problems.empty()) {
    std::string msg = "report validation failed:";
    for (const auto& p : problems) msg += "\n  " + p;
    throw ValidationFailure(msg);
  }
}

}  // namespace

void run_stage(const std::string& stage, const ExperimentConfig& cfg) {
  cfg.validate();
  if (std::find(stage_names().begin(), stage_names().end(), stage) == stage_names().end())
    throw ConfigError("unknown stage '" + stage + "'");
  const fs::path root(cfg.output_dir);
  fs::create_directories(root);
  RunManifest manifest = load_manifest(root);
  const std::string hash = config_hash(cfg);
  if (manifest.config_hash != hash) {
    // a different config invalidates earlier stages
    manifest = RunManifest{};
    manifest.config_hash = hash;
  }

  StageContext ctx{cfg, stage_seed(cfg.master_seed, stage), {}};
  const auto t0 = std::chrono::steady_clock::now();
  std::optional<ValidationFailure> failure;
  if (stage == "gen-data") stage_gen_data(ctx);
  else if (stage == "search-trigger") stage_search(ctx);
  else if (stage == "attack") stage_attack(ctx);
  else if (stage == "eval") stage_eval(ctx);
  else if (stage == "defend") stage_defend(ctx);
  else if (stage == "watermark") stage_watermark(ctx);
  else {
    try {
      stage_report(ctx);
    } catch (const ValidationFailure& e) {
      failure = e;
    }
  }

  StageRecord rec;
  rec.artifacts = ctx.written;
  rec.wall_time = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  rec.seed = ctx.seed;
  manifest.stages[stage] = rec;
  save_manifest(manifest, root);
  if (failure) throw *failure;
}

void run_all(const ExperimentConfig& cfg) {
  for (const auto& stage : stage_names()) run_stage(stage, cfg);
}

}  // namespace armtrig
