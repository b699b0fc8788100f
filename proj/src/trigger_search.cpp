#include "armtrig/trigger_search.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <fstream>
#include <limits>
#include <numeric>

#include <json.hpp>

#include "armtrig/parallel.hpp"

namespace armtrig {

using ojson = nlohmann::ordered_json;

namespace {

constexpr double kInf = std::numeric_limits<double>::infinity();

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

TriggerPerturbation clamp_box(TriggerPerturbation t, double box) {
  for (auto& x : t.t) x = std::clamp(x, -box, box);
  return t;
}

}  // namespace

void ObjectiveConfig::validate() const {
  if (!(lambda1 >= 0.0 && lambda2 >= 0.0 && lambda3 >= 0.0)) throw ConfigError("objective weights must be >= 0");
  if (!(delta > 0.0)) throw ConfigError("objective delta must be > 0");
  if (surrogate_steps < 1) throw ConfigError("surrogate_steps must be >= 1");
  if (!(surrogate_poison_rate > 0.0 && surrogate_poison_rate <= 1.0))
    throw ConfigError("surrogate_poison_rate must lie in (0, 1]");
  surrogate.validate();
}

void SearchConfig::validate() const {
  if (population < 2) throw ConfigError("search population must be >= 2");
  if (generations < 1) throw ConfigError("search generations must be >= 1");
  if (elite < 1 || elite > population) throw ConfigError("search elite must lie in [1, population]");
  if (!(mutation_prob >= 0.0 && mutation_prob <= 1.0)) throw ConfigError("mutation_prob must lie in [0, 1]");
  if (!(mutation_sigma >= 0.0)) throw ConfigError("mutation_sigma must be >= 0");
  if (!(box > 0.0)) throw ConfigError("search box must be > 0");
  if (workers < 1) throw ConfigError("workers must be >= 1");
}

double eval_f3(const TriggerPerturbation& t) {
  require(all_finite(t.t), "eval_f3: non-finite trigger");
  double s = 0.0;
  for (double x : t.t) s += x * x;
  return s;
}

double penalty(double f3, double delta) {
  require(delta > 0.0, "penalty: delta must be > 0");
  if (f3 <= delta) return 0.0;
  const double e = f3 - delta;
  return e * e;
}

CandidateScore make_score(const TriggerPerturbation& t, double f1, double f2, const ObjectiveConfig& obj) {
  CandidateScore s;
  s.f1 = f1;
  s.f2 = f2;
  s.f3 = eval_f3(t);
  s.penalty = penalty(s.f3, obj.delta);
  const double third = obj.raw_f3 ? s.f3 : s.penalty;
  s.objective = obj.lambda1 * f1 + obj.lambda2 * f2 + obj.lambda3 * third;
  if (!std::isfinite(s.objective)) s.objective = kInf;
  return s;
}

// ---------------------------------------------------------------------------

CandidateEvaluator::CandidateEvaluator(const Dataset& clean, const ObjectiveConfig& obj, const TaskSpec& task,
                                       const ArmGeometry& geom)
    : clean_(&clean), obj_(obj), task_(task), geom_(geom) {
  obj_.validate();
  require(!clean.episodes.empty(), "evaluate_candidate: clean dataset is empty");
  require(clean.poisoned_count() == 0, "evaluate_candidate: dataset already contains poisoned episodes");
  if (obj_.surrogate.obs_dim != clean.resolution.height * clean.resolution.width)
    throw ConfigError("surrogate obs_dim does not match the dataset resolution");
  start_ = init_params(obj_.surrogate, obj_.scoring_seed);
  if (obj_.warm_start)
    start_ = train(start_, clean, obj_.surrogate_steps, derive_seed(obj_.scoring_seed, "surrogate-warm")).first;
}

std::pair<double, double> CandidateEvaluator::terms(const TriggerPerturbation& t) const {
  PoisonSpec spec;
  spec.trigger = t;
  spec.rate = obj_.surrogate_poison_rate;
  const Dataset mixed = poison(*clean_, spec, task_, geom_, derive_seed(obj_.scoring_seed, "surrogate-poison"));
  try {
    const PolicyParams p =
        train(start_, mixed, obj_.surrogate_steps, derive_seed(obj_.scoring_seed, "surrogate-train")).first;
    const auto poisoned = samples_where(mixed, true);
    const auto clean = samples_where(mixed, false);
    const double f1 = bc_loss(p, poisoned);
    const double f2 = clean.empty() ? 0.0 : bc_loss(p, clean);
    return {f1, f2};
  } catch (const NumericalDivergence&) {
    return {kInf, kInf};
  }
}

CandidateScore CandidateEvaluator::operator()(const TriggerPerturbation& t) const {
  const auto [f1, f2] = terms(t);
  return make_score(t, f1, f2, obj_);
}

LossTerms CandidateEvaluator::as_terms() const {
  return [this](const TriggerPerturbation& t) { return terms(t); };
}

CandidateScore evaluate_candidate(const TriggerPerturbation& t, const Dataset& clean, const ObjectiveConfig& obj,
                                  const TaskSpec& task, const ArmGeometry& geom) {
  return CandidateEvaluator(clean, obj, task, geom)(t);
}

// ---------------------------------------------------------------------------

namespace {

struct Scored {
  TriggerPerturbation t;
  CandidateScore score;
};

std::vector<CandidateScore> evaluate_all(const std::vector<TriggerPerturbation>& cands, const LossTerms& terms,
                                         const ObjectiveConfig& obj, int workers) {
  std::vector<CandidateScore> out(cands.size());
  parallel_for(cands.size(), workers, [&](std::size_t i) {
    std::pair<double, double> f;
    try {
      f = terms(cands[i]);
    } catch (const NumericalDivergence&) {
      f = {kInf, kInf};
    }
    out[i] = make_score(cands[i], f.first, f.second, obj);
  });
  return out;
}

double finite_mean(const std::vector<Scored>& pop, std::size_t from) {
  double s = 0.0;
  std::size_t n = 0;
  for (std::size_t i = from; i < pop.size(); ++i)
    if (std::isfinite(pop[i].score.objective)) {
      s += pop[i].score.objective;
      ++n;
    }
  return n ? s / static_cast<double>(n) : std::numeric_limits<double>::quiet_NaN();
}

/// Tracks the incumbent and appends trace records.
class Recorder {
 public:
  explicit Recorder(std::string method) : t0_(Clock::now()) { trace_.method = std::move(method); }

  void offer(const Scored& s) {
    if (!has_best_ || s.score.objective < best_.score.objective) {
      best_ = s;
      has_best_ = true;
    }
  }

  void record(int generation, double mean, long long evaluations) {
    GenerationRecord r;
    r.generation = generation;
    r.best_objective = best_.score.objective;
    r.best_t = best_.t;
    r.best_score = best_.score;
    r.mean_objective = mean;
    r.evaluations = evaluations;
    r.wall_time = seconds_since(t0_);
    trace_.records.push_back(r);
  }

  SearchResult result() && { return {best_.t, best_.score, std::move(trace_)}; }

 private:
  Clock::time_point t0_;
  SearchTrace trace_;
  Scored best_{};
  bool has_best_ = false;
};

SearchResult genetic(const LossTerms& terms, const ObjectiveConfig& obj, const SearchConfig& cfg, int generations,
                     const std::string& method) {
  const std::size_t n = static_cast<std::size_t>(cfg.population);
  const std::size_t k = static_cast<std::size_t>(cfg.elite);
  Recorder rec(method);

  std::vector<TriggerPerturbation> fresh(n);
  Rng init(derive_seed(cfg.seed, "pga-init"));
  for (auto& c : fresh)
    for (auto& x : c.t) x = init.uniform(-cfg.box, cfg.box);

  std::vector<Scored> pop;
  long long evaluations = 0;
  for (int g = 0; g < generations; ++g) {
    const auto scores = evaluate_all(fresh, terms, obj, cfg.workers);
    evaluations += static_cast<long long>(fresh.size());
    for (std::size_t i = 0; i < fresh.size(); ++i) pop.push_back({fresh[i], scores[i]});
    // elites first, so a stable sort keeps the incumbent ahead of equal children
    std::stable_sort(pop.begin(), pop.end(),
                     [](const Scored& a, const Scored& b) { return a.score.objective < b.score.objective; });
    rec.offer(pop.front());
    rec.record(g, finite_mean(pop, 0), evaluations);
    if (g + 1 == generations) break;

    pop.resize(k);
    Rng rng(derive_seed(cfg.seed, "pga-breed", static_cast<std::uint64_t>(g)));
    fresh.assign(n - k, {});
    for (auto& child : fresh) {
      const auto& p = pop[rng.below(k)].t;
      const auto& q = pop[rng.below(k)].t;
      const double alpha = rng.uniform();
      for (std::size_t j = 0; j < kJoints; ++j) child.t[j] = alpha * p.t[j] + (1.0 - alpha) * q.t[j];
      if (rng.uniform() < cfg.mutation_prob)
        for (auto& x : child.t) x += rng.normal(0.0, cfg.mutation_sigma);
      child = clamp_box(child, cfg.box);
    }
  }
  return std::move(rec).result();
}

}  // namespace

SearchResult pga_search(const LossTerms& terms, const ObjectiveConfig& obj, const SearchConfig& cfg) {
  obj.validate();
  cfg.validate();
  return genetic(terms, obj, cfg, cfg.generations, "PGA");
}

std::string to_string(BaselineMethod m) {
  switch (m) {
    case BaselineMethod::GA: return "GA";
    case BaselineMethod::PSO: return "PSO";
    case BaselineMethod::Grid: return "Grid";
  }
  return "?";
}

BaselineMethod baseline_from_string(const std::string& s) {
  if (s == "GA") return BaselineMethod::GA;
  if (s == "PSO") return BaselineMethod::PSO;
  if (s == "Grid") return BaselineMethod::Grid;
  throw ConfigError("unknown search method '" + s + "'");
}

int generations_for_budget(const SearchConfig& cfg, long long budget) {
  if (budget < cfg.population) return 0;
  const long long per_gen = cfg.population - cfg.elite;
  if (per_gen == 0) return 1;
  return static_cast<int>(1 + (budget - cfg.population) / per_gen);
}

int grid_points_per_dim(long long budget) {
  if (budget < 1) return 0;
  auto pow6 = [](long long m) {
    long long r = 1;
    for (int i = 0; i < 6; ++i) r *= m;
    return r;
  };
  long long m = static_cast<long long>(std::floor(std::pow(static_cast<double>(budget), 1.0 / 6.0)));
  while (m > 1 && pow6(m) > budget) --m;
  while (pow6(m + 1) <= budget) ++m;
  return static_cast<int>(m);
}

namespace {

SearchResult particle_swarm(const LossTerms& terms, const ObjectiveConfig& obj, const SearchConfig& cfg,
                            long long budget) {
  constexpr double inertia = 0.7, cognitive = 1.5, social = 1.5;
  const double vmax = 0.2 * cfg.box;
  const std::size_t n = static_cast<std::size_t>(cfg.population);
  Rng rng(derive_seed(cfg.seed, "pso"));
  Recorder rec("PSO");

  std::vector<TriggerPerturbation> x(n), v(n);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < kJoints; ++j) {
      x[i].t[j] = rng.uniform(-cfg.box, cfg.box);
      v[i].t[j] = rng.uniform(-vmax, vmax);
    }
  std::vector<Scored> personal(n);
  Scored global{};
  long long evaluations = 0;
  for (int it = 0; evaluations + static_cast<long long>(n) <= budget; ++it) {
    const auto scores = evaluate_all(x, terms, obj, cfg.workers);
    evaluations += static_cast<long long>(n);
    std::vector<Scored> now(n);
    for (std::size_t i = 0; i < n; ++i) {
      now[i] = {x[i], scores[i]};
      if (it == 0 || scores[i].objective < personal[i].score.objective) personal[i] = now[i];
      if ((it == 0 && i == 0) || personal[i].score.objective < global.score.objective) global = personal[i];
    }
    rec.offer(global);
    rec.record(it, finite_mean(now, 0), evaluations);

    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < kJoints; ++j) {
        const double r1 = rng.uniform(), r2 = rng.uniform();
        double vel = inertia * v[i].t[j] + cognitive * r1 * (personal[i].t.t[j] - x[i].t[j]) +
                     social * r2 * (global.t.t[j] - x[i].t[j]);
        v[i].t[j] = std::clamp(vel, -vmax, vmax);
        x[i].t[j] = std::clamp(x[i].t[j] + v[i].t[j], -cfg.box, cfg.box);
      }
  }
  return std::move(rec).result();
}

SearchResult grid(const LossTerms& terms, const ObjectiveConfig& obj, const SearchConfig& cfg, long long budget) {
  const int m = grid_points_per_dim(budget);
  std::vector<double> axis(static_cast<std::size_t>(m));
  for (int i = 0; i < m; ++i) axis[i] = -cfg.box + 2.0 * cfg.box * i / (m - 1);
  long long total = 1;
  for (std::size_t j = 0; j < kJoints; ++j) total *= m;

  Recorder rec("Grid");
  const long long chunk = cfg.population;
  long long evaluations = 0;
  for (long long start = 0, g = 0; start < total; start += chunk, ++g) {
    const long long end = std::min(total, start + chunk);
    std::vector<TriggerPerturbation> cands;
    for (long long idx = start; idx < end; ++idx) {
      TriggerPerturbation t;
      long long r = idx;
      for (std::size_t j = kJoints; j-- > 0;) {
        t.t[j] = axis[static_cast<std::size_t>(r % m)];
        r /= m;
      }
      cands.push_back(t);
    }
    const auto scores = evaluate_all(cands, terms, obj, cfg.workers);
    evaluations += static_cast<long long>(cands.size());
    std::vector<Scored> now;
    for (std::size_t i = 0; i < cands.size(); ++i) now.push_back({cands[i], scores[i]});
    for (const auto& s : now) rec.offer(s);
    rec.record(static_cast<int>(g), finite_mean(now, 0), evaluations);
  }
  return std::move(rec).result();
}

}  // namespace

SearchResult baseline_search(BaselineMethod method, const LossTerms& terms, const ObjectiveConfig& obj,
                             const SearchConfig& cfg, long long budget) {
  obj.validate();
  cfg.validate();
  switch (method) {
    case BaselineMethod::GA: {
      const int gens = generations_for_budget(cfg, budget);
      if (gens < 1) throw BudgetTooSmall("GA budget is smaller than the population");
      ObjectiveConfig plain = obj;
      plain.lambda3 = 0.0;
      return genetic(terms, plain, cfg, gens, "GA");
    }
    case BaselineMethod::PSO:
      if (budget < cfg.population) throw BudgetTooSmall("PSO budget is smaller than the swarm");
      return particle_swarm(terms, obj, cfg, budget);
    case BaselineMethod::Grid:
      if (grid_points_per_dim(budget) < 2) throw BudgetTooSmall("Grid budget is below 2^6 = 64");
      return grid(terms, obj, cfg, budget);
  }
  throw ConfigError("unknown search method");
}

std::optional<long long> evaluations_to_feasible(const SearchTrace& trace, double threshold) {
  std::optional<long long> at;
  for (const auto& r : trace.records) {
    if (r.best_score.f3 <= threshold) {
      if (!at) at = r.evaluations;
    } else {
      at.reset();
    }
  }
  return at;
}

// ---------------------------------------------------------------------------

namespace {

ojson number_or_null(double x) { return std::isfinite(x) ? ojson(x) : ojson(nullptr); }

double number_from(const ojson& j) {
  return j.is_null() ? std::numeric_limits<double>::infinity() : j.get<double>();
}

}  // namespace

void save_trace(const SearchTrace& trace, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error("cannot open '" + path.string() + "' for writing");
  for (const auto& r : trace.records) {
    ojson j;
    j["method"] = trace.method;
    j["generation"] = r.generation;
    j["best_objective"] = number_or_null(r.best_objective);
    j["best_t"] = r.best_t.t;
    j["f1"] = number_or_null(r.best_score.f1);
    j["f2"] = number_or_null(r.best_score.f2);
    j["f3"] = r.best_score.f3;
    j["penalty"] = r.best_score.penalty;
    j["mean_objective"] = number_or_null(r.mean_objective);
    j["evaluations"] = r.evaluations;
    out << j.dump() << '\n';
  }
  if (!out) throw Error("write failed for '" + path.string() + "'");
}

SearchTrace load_trace(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot open '" + path.string() + "'");
  SearchTrace trace;
  std::string line;
  std::size_t index = 0;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    try {
      const ojson j = ojson::parse(line);
      trace.method = j.at("method").get<std::string>();
      GenerationRecord r;
      r.generation = j.at("generation").get<int>();
      r.best_objective = number_from(j.at("best_objective"));
      r.best_t.t = j.at("best_t").get<Joint6>();
      r.best_score = {number_from(j.at("f1")), number_from(j.at("f2")), j.at("f3").get<double>(),
                      j.at("penalty").get<double>(), r.best_objective};
      const auto& mean = j.at("mean_objective");
      r.mean_objective = mean.is_null() ? std::numeric_limits<double>::quiet_NaN() : mean.get<double>();
      r.evaluations = j.at("evaluations").get<long long>();
      trace.records.push_back(r);
    } catch (const std::exception& e) {
      throw CorruptRecord(index, e.what());
    }
    ++index;
  }
  return trace;
}

}  // namespace armtrig
