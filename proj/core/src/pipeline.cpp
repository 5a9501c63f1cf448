#include "flowdistill/pipeline.hpp"

#include <fcntl.h>
#include <sys/file.h>
#include <unistd.h>

#include <json.hpp>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <ctime>
#include <fstream>
#include <map>
#include <memory>
#include <ostream>
#include <sstream>

#include "flowdistill/checkpoint.hpp"
#include "flowdistill/corpus.hpp"
#include "flowdistill/distill.hpp"
#include "flowdistill/hash.hpp"

#ifndef FLOWDISTILL_VERSION
#define FLOWDISTILL_VERSION "0.0.0"
#endif

namespace fd {

namespace fs = std::filesystem;
using nlohmann::ordered_json;

std::string tool_version() { return FLOWDISTILL_VERSION; }

std::string config_sha1(const ExperimentConfig& cfg) {
  ExperimentConfig placeless = cfg;  // where a run is written does not change what it computes
  placeless.output = ".";
  return sha1_hex(config_to_json(placeless));
}

std::string tree_sha1(const fs::path& dir) {
  std::vector<std::string> rel;
  for (const auto& e : fs::recursive_directory_iterator(dir)) {
    if (e.is_regular_file()) rel.push_back(fs::relative(e.path(), dir).generic_string());
  }
  std::sort(rel.begin(), rel.end());
  std::string listing;
  for (const auto& r : rel) listing += sha1_file(dir / r) + "  " + r + "\n";
  return sha1_hex(listing);
}

namespace {

ordered_json to_json(const ManifestRecord& r) {
  ordered_json a = ordered_json::array();
  for (const auto& x : r.artifacts) {
    a.push_back({{"path", x.path}, {"sha1", x.sha1}, {"bytes", x.bytes}, {"timing", x.timing}});
  }
  return {{"command", r.command},         {"tool_version", r.tool_version}, {"config_sha1", r.config_sha1},
          {"seed", r.seed},               {"started", r.started},           {"finished", r.finished},
          {"artifacts", a}};
}

ManifestRecord from_json(const nlohmann::json& j) {
  ManifestRecord r;
  r.command = j.at("command");
  r.tool_version = j.at("tool_version");
  r.config_sha1 = j.at("config_sha1");
  r.seed = j.at("seed");
  r.started = j.at("started");
  r.finished = j.at("finished");
  for (const auto& a : j.at("artifacts")) {
    r.artifacts.push_back({a.at("path"), a.at("sha1"), a.at("bytes"), a.at("timing")});
  }
  return r;
}

}  // namespace

std::vector<ManifestRecord> read_manifest(const fs::path& run_dir) {
  std::vector<ManifestRecord> out;
  std::ifstream f(run_dir / "manifest.jsonl");
  if (!f) return out;
  std::string line;
  std::size_t n = 0;
  while (std::getline(f, line)) {
    ++n;
    if (line.empty()) continue;
    try {
      out.push_back(from_json(nlohmann::json::parse(line)));
    } catch (const nlohmann::json::exception& e) {
      throw FormatError("manifest line " + std::to_string(n) + ": " + e.what());
    }
  }
  return out;
}

void append_manifest(const fs::path& run_dir, const ManifestRecord& record) {
  fs::create_directories(run_dir);
  const std::string line = to_json(record).dump() + "\n";
  const auto path = run_dir / "manifest.jsonl";
  const int fdesc = ::open(path.c_str(), O_WRONLY | O_CREAT | O_APPEND, 0644);
  if (fdesc < 0) throw Error("cannot open " + path.string());
  if (::flock(fdesc, LOCK_EX) != 0) {
    ::close(fdesc);
    throw Error("cannot lock " + path.string());
  }
  std::size_t done = 0;
  while (done < line.size()) {
    const ssize_t w = ::write(fdesc, line.data() + done, line.size() - done);
    if (w <= 0) break;
    done += static_cast<std::size_t>(w);
  }
  ::flock(fdesc, LOCK_UN);
  ::close(fdesc);
  if (done != line.size()) throw Error("failed writing " + path.string());
}

std::string manifest_digest(const fs::path& run_dir) {
  std::map<std::string, std::string> latest;
  for (const auto& r : read_manifest(run_dir)) {
    for (const auto& a : r.artifacts) {
      if (!a.timing) latest[a.path] = a.sha1;
    }
  }
  std::string listing;
  for (const auto& [p, h] : latest) listing += h + "  " + p + "\n";
  return sha1_hex(listing);
}

namespace {

std::string utc_now() {
  const std::time_t t = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&t, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

const char* producer_of(const std::string& rel) {
  if (rel.rfind("demos", 0) == 0) return "gen-data";
  if (rel.rfind("teacher_sets", 0) == 0) return "sample-teacher";
  if (rel.rfind("teacher", 0) == 0) return "train-teacher";
  if (rel.rfind("student", 0) == 0) return "distill";
  return "the producing command";
}

Artifact make_artifact(const fs::path& run, const std::string& rel, bool timing = false) {
  const fs::path p = run / rel;
  Artifact a;
  a.path = rel;
  a.timing = timing;
  if (fs::is_directory(p)) {
    a.sha1 = tree_sha1(p);
    for (const auto& e : fs::recursive_directory_iterator(p)) {
      if (e.is_regular_file()) a.bytes += e.file_size();
    }
  } else {
    a.sha1 = sha1_file(p);
    a.bytes = fs::file_size(p);
  }
  return a;
}

struct Env {
  const ExperimentConfig& cfg;
  const RunOptions& opt;
  fs::path run;
  std::string command;
  std::string started = utc_now();

  template <typename... A>
  void say(const A&... a) const {
    if (!opt.log) return;
    *opt.log << "[" << command << "] ";
    (*opt.log << ... << a);
    *opt.log << std::endl;
  }

  fs::path prepare(const std::string& sub) const {
    const fs::path d = run / sub;
    if (fs::exists(d) && !fs::is_empty(d)) {
      if (!opt.force) throw OutputExistsError(d.string() + " is not empty; pass --force to overwrite");
      fs::remove_all(d);
    }
    fs::create_directories(d);
    return d;
  }

  // Upstream artifact must exist and match its latest manifest entry.
  fs::path require(const std::string& rel) const {
    const fs::path p = run / rel;
    if (!fs::exists(p)) {
      throw MissingArtifactError("missing " + p.string() + "; run `fdlab " + producer_of(rel) + "` first");
    }
    std::string recorded;
    for (const auto& r : read_manifest(run)) {
      for (const auto& a : r.artifacts) {
        if (a.path == rel) recorded = a.sha1;
      }
    }
    if (!recorded.empty() && make_artifact(run, rel).sha1 != recorded) {
      throw MissingArtifactError(p.string() + " does not match the manifest; rerun `fdlab " + producer_of(rel) +
                                 "`");
    }
    return p;
  }

  ManifestRecord finish(std::vector<Artifact> artifacts) const {
    ManifestRecord r;
    r.command = command;
    r.tool_version = tool_version();
    r.config_sha1 = config_sha1(cfg);
    r.seed = cfg.seed;
    r.started = started;
    r.finished = utc_now();
    r.artifacts = std::move(artifacts);
    append_manifest(run, r);
    return r;
  }
};

void write_json(const fs::path& p, const ordered_json& j) {
  std::ofstream f(p);
  if (!f) throw Error("cannot write " + p.string());
  f << j.dump(2) << '\n';
  if (!f) throw Error("failed writing " + p.string());
}

ordered_json ci_json(const ConfidenceInterval& c) { return {{"mean", c.mean}, {"lo", c.lo}, {"hi", c.hi}}; }

// Stream ids under the experiment seed.
enum Stream : std::uint64_t {
  kEncoderInit = 1,
  kTeacherInit,
  kTeacherTrain,
  kTeacherSets,
  kStudentInit,
  kStudentTrain,
  kEvalCases,
  kEvalReference,
  kEvalSamples,
  kEpisodes,
  kBootstrap,
};

std::uint64_t stream(const ExperimentConfig& c, Stream s) { return derive_seed(c.seed, s); }

struct Models {
  std::unique_ptr<Encoder<float>> encoder;
  std::unique_ptr<TeacherNet<float>> teacher;
  std::unique_ptr<StudentNet<float>> student;
  std::string teacher_hash;
};

Models load_models(const Env& env, bool with_student) {
  Models m;
  const fs::path tp = env.require("teacher/teacher.fdck");
  const fs::path ep = env.require("teacher/encoder.fdck");
  m.encoder = std::make_unique<Encoder<float>>(env.cfg.encoder, 0);
  load_checkpoint_into(ep, m.encoder->params());
  m.teacher = std::make_unique<TeacherNet<float>>(env.cfg.network, 0);
  load_checkpoint_into(tp, m.teacher->params());
  m.teacher_hash = sha1_file(tp);
  if (with_student) {
    const fs::path sp = env.require("student/student.fdck");
    m.student = std::make_unique<StudentNet<float>>(env.cfg.network, 0);
    load_checkpoint_into(sp, m.student->params());
  }
  return m;
}

std::unique_ptr<StudentNet<float>> train_student(const Env& env, const DistillDataset& ds, TeacherNet<float>& teacher,
                                                 const fs::path& log_csv) {
  const ExperimentConfig& c = env.cfg;
  std::unique_ptr<StudentNet<float>> s;
  if (c.distill.warm_start) {
    s = std::make_unique<StudentNet<float>>(c.network, strip_time_conditioning(teacher.params()));
  } else {
    s = std::make_unique<StudentNet<float>>(c.network, stream(c, kStudentInit));
  }
  StudentTrainConfig tc;
  tc.epochs = c.distill.epochs;
  tc.batch = c.distill.batch;
  tc.lr = c.distill.lr;
  tc.lr_final = c.distill.lr_final;
  tc.seed = stream(c, kStudentTrain);
  tc.log_csv = log_csv;
  const auto t0 = std::chrono::steady_clock::now();
  const TrainLog log = imle_train_student(ds, *s, tc);
  const double sec = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  env.say("K=", ds.meta.k, ": ", log.epochs_run, " epochs, loss ",
          log.epoch_loss.empty() ? 0.0 : log.epoch_loss.front(), " -> ",
          log.epoch_loss.empty() ? 0.0 : log.epoch_loss.back(), " (", sec, " s)");
  return s;
}

struct EvalCase {
  Demo start;
  ModeReference ref;
};

std::vector<EvalCase> eval_cases(const ExperimentConfig& c, const Featurizer& feat) {
  std::vector<EvalCase> out(c.eval.observations);
  for (std::size_t i = 0; i < out.size(); ++i) {
    out[i].start = make_start_case(c.task, feat, stream(c, kEvalCases), i);
    out[i].ref = build_mode_reference(c.task, out[i].start.scene, out[i].start.state, c.eval.per_mode,
                                      derive_seed(stream(c, kEvalReference), i), c.eval.percentile);
  }
  return out;
}

std::vector<TensorF> encode_cases(Encoder<float>& enc, const std::vector<EvalCase>& cases) {
  std::vector<TensorF> out;
  out.reserve(cases.size());
  const std::size_t chunk = 64;
  for (std::size_t b = 0; b < cases.size(); b += chunk) {
    std::vector<const RawObservation*> obs;
    for (std::size_t i = b; i < std::min(cases.size(), b + chunk); ++i) obs.push_back(&cases[i].start.obs);
    const TensorF e = encode_observations(enc, obs);
    const std::size_t d = e.dim(1);
    for (std::size_t i = 0; i < obs.size(); ++i) {
      TensorF row({d});
      std::copy(e.ptr() + i * d, e.ptr() + (i + 1) * d, row.ptr());
      out.push_back(std::move(row));
    }
  }
  return out;
}

// K samples per observation; observation i uses the same seed for every policy.
std::vector<TensorF> sample_sets(Policy& p, const ExperimentConfig& c, const std::vector<TensorF>& e) {
  std::vector<TensorF> out;
  out.reserve(e.size());
  for (std::size_t i = 0; i < e.size(); ++i) {
    out.push_back(p.sample(e[i].vec(), c.eval.samples, derive_seed(stream(c, kEvalSamples), i)));
  }
  return out;
}

// Collapse is normalized by the reference policy's sets for the same observation.
EvalReport evaluate(const std::string& name, const std::vector<TensorF>& sets, const ExperimentConfig& c,
                    const std::vector<EvalCase>& cases, const std::vector<TensorF>& reference) {
  EvalReport r;
  r.policy = name;
  for (std::size_t i = 0; i < cases.size(); ++i) {
    const TensorF& set = sets[i];
    ObsMetrics m;
    m.obs_id = i;
    m.coverage = mode_coverage(set, cases[i].ref);
    m.fidelity = mode_fidelity(set, cases[i].ref.pool, cases[i].ref.delta);
    m.collapse = collapse_score(set);
    const double ref = collapse_score(reference[i]);
    m.collapse_norm = ref > 0 ? m.collapse / ref : 0.0;
    m.chamfer_to_expert = chamfer_distance(set, cases[i].ref.pool);
    m.delta = cases[i].ref.delta;
    r.rows.push_back(m);
  }
  r.aggregate(c.eval.bootstrap, stream(c, kBootstrap));
  return r;
}

struct Policies {
  TeacherPolicy teacher;
  TeacherPolicy naive;
  StudentPolicy student;

  Policies(const ExperimentConfig& c, Models& m)
      : teacher(*m.teacher, c.cfm.sampler, c.cfm.schedule.eps),
        naive(*m.teacher, OdeSamplerConfig{c.cfm.sampler.integrator, c.eval.naive_steps}, c.cfm.schedule.eps),
        student(*m.student) {}
};

}  // namespace

Pipeline::Pipeline(ExperimentConfig cfg, RunOptions options) : cfg_(std::move(cfg)), opt_(options) { validate(cfg_); }

const std::vector<std::string>& Pipeline::commands() {
  static const std::vector<std::string> c{"gen-data", "train-teacher", "sample-teacher", "distill",
                                          "eval",     "simulate",      "speed",          "ablate"};
  return c;
}

ManifestRecord Pipeline::run(const std::string& command) {
  if (command == "gen-data") return gen_data();
  if (command == "train-teacher") return train_teacher();
  if (command == "sample-teacher") return sample_teacher();
  if (command == "distill") return distill();
  if (command == "eval") return eval();
  if (command == "simulate") return simulate();
  if (command == "speed") return speed();
  if (command == "ablate") return ablate();
  throw Error("unknown command \"" + command + "\"");
}

ManifestRecord Pipeline::gen_data() {
  Env env{cfg_, opt_, cfg_.output, "gen-data"};
  const fs::path dir = env.prepare("demos");
  const Featurizer feat(cfg_.encoder);
  std::vector<Demo> demos;
  demos.reserve(cfg_.demos);
  for (std::size_t i = 0; i < cfg_.demos; ++i) demos.push_back(make_demo(cfg_.task, feat, cfg_.seed, i));
  write_demo_corpus(dir, cfg_.task.kind, cfg_.seed, demos);
  env.say(demos.size(), " ", task_name(cfg_.task.kind), " demos in ", dir.string());
  return env.finish({make_artifact(env.run, "demos")});
}

ManifestRecord Pipeline::train_teacher() {
  Env env{cfg_, opt_, cfg_.output, "train-teacher"};
  const fs::path demo_dir = env.require("demos");
  const DemoCorpus corpus = read_demo_corpus(demo_dir);
  if (corpus.meta.task != cfg_.task.kind || corpus.meta.horizon != cfg_.task.horizon) {
    throw ConfigError("task: demo corpus was generated for " + task_name(corpus.meta.task) + " with horizon " +
                      std::to_string(corpus.meta.horizon));
  }
  const fs::path dir = env.prepare("teacher");
  Encoder<float> enc(cfg_.encoder, stream(cfg_, kEncoderInit));
  TeacherNet<float> teacher(cfg_.network, stream(cfg_, kTeacherInit));
  TeacherTrainConfig tc;
  tc.epochs = cfg_.cfm.epochs;
  tc.batch = cfg_.cfm.batch;
  tc.lr = cfg_.cfm.lr;
  tc.lr_final = cfg_.cfm.lr_final;
  tc.seed = stream(cfg_, kTeacherTrain);
  tc.schedule = cfg_.cfm.schedule;
  tc.anti_shortcut = cfg_.cfm.anti_shortcut;
  tc.geometry_corruption = cfg_.cfm.geometry_corruption;
  tc.corruption_std = cfg_.cfm.corruption_std;
  tc.log_csv = dir / "loss.csv";
  const auto t0 = std::chrono::steady_clock::now();
  const TrainLog log = fd::train_teacher(corpus.demos, enc, teacher, tc);
  const double sec = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  env.say(corpus.demos.size(), " demos, ", log.epochs_run, " epochs, loss ",
          log.epoch_loss.empty() ? 0.0 : log.epoch_loss.front(), " -> ",
          log.epoch_loss.empty() ? 0.0 : log.epoch_loss.back(), " (", sec, " s)");
  save_checkpoint(dir / "teacher.fdck", teacher.params());
  save_checkpoint(dir / "encoder.fdck", enc.params());
  return env.finish({make_artifact(env.run, "teacher/teacher.fdck"), make_artifact(env.run, "teacher/encoder.fdck"),
                     make_artifact(env.run, "teacher/loss.csv")});
}

ManifestRecord Pipeline::sample_teacher() {
  Env env{cfg_, opt_, cfg_.output, "sample-teacher"};
  const fs::path demo_dir = env.require("demos");
  Models m = load_models(env, false);
  const DemoCorpus corpus = read_demo_corpus(demo_dir, cfg_.distill.observations);
  if (corpus.demos.size() < cfg_.distill.observations) {
    throw ConfigError("distill.observations: corpus holds only " + std::to_string(corpus.demos.size()) + " demos");
  }
  const fs::path dir = env.prepare("teacher_sets");
  std::vector<const RawObservation*> obs;
  for (const auto& d : corpus.demos) obs.push_back(&d.obs);
  const auto t0 = std::chrono::steady_clock::now();
  const DistillDataset ds = build_distill_dataset(*m.teacher, *m.encoder, obs, cfg_.distill.k, cfg_.cfm.sampler,
                                                  stream(cfg_, kTeacherSets), m.teacher_hash);
  save_distill_dataset(dir, ds);
  const double sec = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  env.say(ds.size(), " sets of K=", ds.meta.k, " with ", integrator_name(cfg_.cfm.sampler.integrator), "-",
          cfg_.cfm.sampler.steps, " (", sec, " s)");
  return env.finish({make_artifact(env.run, "teacher_sets")});
}

ManifestRecord Pipeline::distill() {
  Env env{cfg_, opt_, cfg_.output, "distill"};
  const fs::path sets = env.require("teacher_sets");
  Models m = load_models(env, false);
  const DistillDataset full = load_distill_dataset(sets, m.teacher_hash);
  if (full.meta.k != cfg_.distill.k) {
    throw ConfigError("distill.k: teacher sets hold K=" + std::to_string(full.meta.k) + "; rerun sample-teacher");
  }
  const fs::path dir = env.prepare("student");
  auto student = train_student(env, full, *m.teacher, dir / "loss.csv");
  save_checkpoint(dir / "student.fdck", student->params());
  return env.finish({make_artifact(env.run, "student/student.fdck"), make_artifact(env.run, "student/loss.csv")});
}

ManifestRecord Pipeline::eval() {
  Env env{cfg_, opt_, cfg_.output, "eval"};
  Models m = load_models(env, true);
  const fs::path dir = env.prepare("eval");
  const Featurizer feat(cfg_.encoder);
  const auto cases = eval_cases(cfg_, feat);
  const auto e = encode_cases(*m.encoder, cases);
  Policies p(cfg_, m);
  const auto ref = sample_sets(p.teacher, cfg_, e);
  std::vector<Artifact> artifacts;
  ordered_json summary;
  summary["observations"] = cases.size();
  summary["samples"] = cfg_.eval.samples;
  summary["reference"] = p.teacher.name();
  for (Policy* policy : {static_cast<Policy*>(&p.teacher), static_cast<Policy*>(&p.naive),
                         static_cast<Policy*>(&p.student)}) {
    const std::string name = policy->name();
    const EvalReport r = evaluate(name, policy == &p.teacher ? ref : sample_sets(*policy, cfg_, e), cfg_, cases, ref);
    write_report_csv(dir / (name + ".csv"), r);
    write_report_json(dir / (name + ".json"), r);
    artifacts.push_back(make_artifact(env.run, "eval/" + name + ".csv"));
    artifacts.push_back(make_artifact(env.run, "eval/" + name + ".json"));
    summary["policies"][name] = {{"coverage", ci_json(r.coverage)},
                                 {"fidelity", ci_json(r.fidelity)},
                                 {"collapse_norm", ci_json(r.collapse_norm)},
                                 {"full_coverage_rate", r.full_coverage_rate}};
    env.say(name, ": coverage ", r.coverage.mean, ", fidelity ", r.fidelity.mean, ", collapse_norm ",
            r.collapse_norm.mean, ", full coverage on ", r.full_coverage_rate);
  }
  write_json(dir / "summary.json", summary);
  artifacts.push_back(make_artifact(env.run, "eval/summary.json"));
  return env.finish(std::move(artifacts));
}

ManifestRecord Pipeline::simulate() {
  Env env{cfg_, opt_, cfg_.output, "simulate"};
  Models m = load_models(env, true);
  const fs::path dir = env.prepare("sim");
  const Featurizer feat(cfg_.encoder);
  Policies p(cfg_, m);
  const SimBlock& sb = cfg_.simloop;
  const bool timing = sb.latency.measured;
  const std::uint64_t seed = stream(cfg_, kEpisodes);

  ordered_json summary;
  summary["task"] = task_name(cfg_.task.kind);
  summary["target_speed"] = cfg_.task.target_speed;
  summary["episodes"] = sb.episodes;
  summary["latency"] = {{"c_net_ms", sb.latency.c_net_ms}, {"c_ovh_ms", sb.latency.c_ovh_ms},
                        {"measured", sb.latency.measured}};
  summary["execute_steps"] = sb.rollout.execute_steps;

  std::vector<EpisodeRow> rows;
  for (Policy* policy : {static_cast<Policy*>(&p.teacher), static_cast<Policy*>(&p.naive),
                         static_cast<Policy*>(&p.student)}) {
    const auto r = run_episodes(*policy, *m.encoder, feat, cfg_.task, sb.episodes, sb.latency, sb.rollout, seed);
    const SweepCell cell = summarize(r, stream(cfg_, kBootstrap));
    summary["policies"][policy->name()] = {{"success", ci_json(cell.rate)}, {"successes", cell.successes}};
    env.say(policy->name(), ": success ", cell.rate.mean, " [", cell.rate.lo, ", ", cell.rate.hi, "]");
    rows.insert(rows.end(), r.begin(), r.end());
  }
  write_episodes_csv(dir / "episodes.csv", rows);
  std::vector<Artifact> artifacts{make_artifact(env.run, "sim/episodes.csv", timing)};

  if (cfg_.task.kind == TaskKind::kDynamicTarget) {
    const double s_star = critical_speed(sb.latency, cfg_.cfm.sampler.steps, sb.rollout.dt, cfg_.task.success_radius);
    std::vector<double> speeds = sb.speeds;
    speeds.push_back(0.0);
    if (sb.include_critical) speeds.push_back(s_star);
    std::sort(speeds.begin(), speeds.end());
    speeds.erase(std::unique(speeds.begin(), speeds.end()), speeds.end());
    Policy* both[] = {&p.teacher, &p.student};
    std::vector<EpisodeRow> sweep_rows;
    const auto cells = sweep_dynamics(both, *m.encoder, feat, cfg_.task, speeds, sb.episodes, sb.latency, sb.rollout,
                                      seed, &sweep_rows);
    write_sweep_csv(dir / "sweep.csv", cells);
    write_episodes_csv(dir / "sweep_episodes.csv", sweep_rows);
    artifacts.push_back(make_artifact(env.run, "sim/sweep.csv", timing));
    artifacts.push_back(make_artifact(env.run, "sim/sweep_episodes.csv", timing));
    summary["critical_speed"] = s_star;
    summary["teacher_hold_steps"] = hold_steps(sb.latency.latency_ms(cfg_.cfm.sampler.steps, 0), sb.rollout.dt);
    auto& sw = summary["sweep"] = ordered_json::array();
    for (const auto& c : cells) {
      sw.push_back({{"policy", c.policy}, {"speed", c.speed}, {"success", ci_json(c.rate)}});
      env.say("sweep ", c.policy, " speed ", c.speed, ": ", c.rate.mean);
    }
    // Rates with the latency model off; the static reference for speed 0.
    TaskSpec still = cfg_.task;
    still.target_speed = 0.0;
    const LatencyModel off{0.0, 0.0, false};
    for (Policy* policy : both) {
      const auto r = run_episodes(*policy, *m.encoder, feat, still, sb.episodes, off, sb.rollout, seed);
      summary["zero_latency"][policy->name()] = ci_json(summarize(r, stream(cfg_, kBootstrap)).rate);
    }
  }
  write_json(dir / "summary.json", summary);
  artifacts.push_back(make_artifact(env.run, "sim/summary.json", timing));
  return env.finish(std::move(artifacts));
}

ManifestRecord Pipeline::speed() {
  Env env{cfg_, opt_, cfg_.output, "speed"};
  Models m = load_models(env, true);
  const fs::path dir = env.prepare("speed");
  const Featurizer feat(cfg_.encoder);
  ExperimentConfig one = cfg_;
  one.eval.observations = 1;
  const auto cases = eval_cases(one, feat);
  const auto e = encode_cases(*m.encoder, cases);
  Policies p(cfg_, m);
  std::ofstream f(dir / "timing.csv");
  if (!f) throw Error("cannot write " + (dir / "timing.csv").string());
  f.precision(9);
  f << "policy,nfe_per_chunk,median_ms,p10_ms,p90_ms,hz,repeats\n";
  ordered_json j;
  std::map<std::string, InferenceStats> stats;
  for (Policy* policy : {static_cast<Policy*>(&p.teacher), static_cast<Policy*>(&p.naive),
                         static_cast<Policy*>(&p.student)}) {
    const InferenceStats s = measure_inference(*policy, e[0].vec(), cfg_.eval.timing_repeats);
    stats[policy->name()] = s;
    f << policy->name() << ',' << s.nfe_per_chunk << ',' << s.median_ms << ',' << s.p10_ms << ',' << s.p90_ms << ','
      << s.hz << ',' << s.repeats << '\n';
    j["policies"][policy->name()] = {{"nfe_per_chunk", s.nfe_per_chunk}, {"median_ms", s.median_ms},
                                     {"p10_ms", s.p10_ms},               {"p90_ms", s.p90_ms},
                                     {"hz", s.hz},                       {"repeats", s.repeats}};
    env.say(policy->name(), ": ", s.median_ms, " ms/chunk (p10 ", s.p10_ms, ", p90 ", s.p90_ms, "), NFE ",
            s.nfe_per_chunk, ", ", s.hz, " Hz");
  }
  f.close();
  const InferenceStats& t = stats[p.teacher.name()];
  const InferenceStats& s = stats[p.student.name()];
  j["nfe_ratio"] = t.nfe_per_chunk / s.nfe_per_chunk;
  j["speedup"] = t.median_ms / s.median_ms;
  j["c_net_ms_measured"] = t.median_ms / t.nfe_per_chunk;
  write_json(dir / "timing.json", j);
  env.say("speedup ", t.median_ms / s.median_ms, "x at NFE ratio ", t.nfe_per_chunk / s.nfe_per_chunk);
  return env.finish({make_artifact(env.run, "speed/timing.csv", true), make_artifact(env.run, "speed/timing.json", true)});
}

ManifestRecord Pipeline::ablate() {
  Env env{cfg_, opt_, cfg_.output, "ablate"};
  const fs::path sets = env.require("teacher_sets");
  Models m = load_models(env, true);
  const DistillDataset full = load_distill_dataset(sets, m.teacher_hash);
  const fs::path dir = env.prepare("ablate");
  const Featurizer feat(cfg_.encoder);
  const auto cases = eval_cases(cfg_, feat);
  const auto e = encode_cases(*m.encoder, cases);
  Policies p(cfg_, m);
  const auto ref = sample_sets(p.teacher, cfg_, e);

  std::ofstream f(dir / "ablation.csv");
  if (!f) throw Error("cannot write " + (dir / "ablation.csv").string());
  f.precision(9);
  f << "ablation,setting,policy,metric,mean,ci_lo,ci_hi\n";
  auto row = [&](const char* ablation, std::size_t setting, const std::string& policy, const char* metric,
                 const ConfidenceInterval& c) {
    f << ablation << ',' << setting << ',' << policy << ',' << metric << ',' << c.mean << ',' << c.lo << ',' << c.hi
      << '\n';
  };
  std::vector<Artifact> artifacts;
  for (std::size_t k : cfg_.ablate.ks) {
    if (k > full.meta.k) throw ConfigError("ablate.ks: K=" + std::to_string(k) + " exceeds the teacher sets");
    std::unique_ptr<StudentNet<float>> owned;
    StudentNet<float>* net = m.student.get();
    if (k != full.meta.k) {
      char name[32];
      std::snprintf(name, sizeof name, "student_k%02zu", k);
      owned = train_student(env, full.truncated(k), *m.teacher, dir / (std::string(name) + "_loss.csv"));
      save_checkpoint(dir / (std::string(name) + ".fdck"), owned->params());
      artifacts.push_back(make_artifact(env.run, "ablate/" + std::string(name) + ".fdck"));
      artifacts.push_back(make_artifact(env.run, "ablate/" + std::string(name) + "_loss.csv"));
      net = owned.get();
    }
    StudentPolicy sp(*net);
    const EvalReport r = evaluate(sp.name(), sample_sets(sp, cfg_, e), cfg_, cases, ref);
    row("k", k, "student", "coverage", r.coverage);
    row("k", k, "student", "fidelity", r.fidelity);
    row("k", k, "student", "collapse_norm", r.collapse_norm);
    row("k", k, "student", "full_coverage_rate", {r.full_coverage_rate, r.full_coverage_rate, r.full_coverage_rate});
    env.say("K=", k, ": coverage ", r.coverage.mean, ", fidelity ", r.fidelity.mean);
  }
  const bool timing = cfg_.simloop.latency.measured;
  for (std::size_t te : cfg_.ablate.execute_steps) {
    RolloutConfig rc = cfg_.simloop.rollout;
    rc.execute_steps = te;
    for (Policy* policy : {static_cast<Policy*>(&p.teacher), static_cast<Policy*>(&p.student)}) {
      const auto rows = run_episodes(*policy, *m.encoder, feat, cfg_.task, cfg_.ablate.episodes,
                                     cfg_.simloop.latency, rc, stream(cfg_, kEpisodes));
      const SweepCell c = summarize(rows, stream(cfg_, kBootstrap));
      row("execute_steps", te, policy->name(), "success_rate", c.rate);
      env.say("T_e=", te, " ", policy->name(), ": success ", c.rate.mean);
    }
  }
  f.close();
  if (!f) throw Error("failed writing " + (dir / "ablation.csv").string());
  artifacts.push_back(make_artifact(env.run, "ablate/ablation.csv", timing));
  return env.finish(std::move(artifacts));
}

}  // namespace fd
