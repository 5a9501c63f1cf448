#include "flowdistill/config.hpp"

#include <json.hpp>

#include <fstream>
#include <set>
#include <sstream>

namespace fd {

using nlohmann::ordered_json;

namespace {

[[noreturn]] void fail(const std::string& key, const std::string& msg) { throw ConfigError(key + ": " + msg); }

// Object reader that remembers which keys were consumed.
class Reader {
 public:
  Reader(const ordered_json& j, std::string path) : j_(j), path_(std::move(path)) {
    if (!j_.is_object()) fail(path_.empty() ? "config" : path_, "expected an object");
  }

  std::string key(const std::string& k) const { return path_.empty() ? k : path_ + "." + k; }

  const ordered_json* find(const char* k) {
    seen_.insert(k);
    auto it = j_.find(k);
    return it == j_.end() ? nullptr : &*it;
  }

  void get(const char* k, std::size_t& out) {
    if (auto* v = find(k)) {
      if (!v->is_number_unsigned()) fail(key(k), "expected a non-negative integer");
      out = v->get<std::size_t>();
    }
  }
  void get_u64(const char* k, std::uint64_t& out) {
    if (auto* v = find(k)) {
      if (!v->is_number_unsigned()) fail(key(k), "expected a non-negative integer");
      out = v->get<std::uint64_t>();
    }
  }
  void get(const char* k, double& out) {
    if (auto* v = find(k)) {
      if (!v->is_number()) fail(key(k), "expected a number");
      out = v->get<double>();
    }
  }
  void get(const char* k, bool& out) {
    if (auto* v = find(k)) {
      if (!v->is_boolean()) fail(key(k), "expected true or false");
      out = v->get<bool>();
    }
  }
  void get(const char* k, std::string& out) {
    if (auto* v = find(k)) {
      if (!v->is_string()) fail(key(k), "expected a string");
      out = v->get<std::string>();
    }
  }
  void get(const char* k, std::vector<double>& out) {
    if (auto* v = find(k)) {
      if (!v->is_array()) fail(key(k), "expected an array of numbers");
      out.clear();
      for (const auto& e : *v) {
        if (!e.is_number()) fail(key(k), "expected an array of numbers");
        out.push_back(e.get<double>());
      }
    }
  }
  void get(const char* k, std::vector<std::size_t>& out) {
    if (auto* v = find(k)) {
      if (!v->is_array()) fail(key(k), "expected an array of non-negative integers");
      out.clear();
      for (const auto& e : *v) {
        if (!e.is_number_unsigned()) fail(key(k), "expected an array of non-negative integers");
        out.push_back(e.get<std::size_t>());
      }
    }
  }

  Reader child(const char* k) {
    static const ordered_json empty = ordered_json::object();
    const ordered_json* v = find(k);
    return Reader(v ? *v : empty, key(k));
  }

  void finish() const {
    for (const auto& [k, v] : j_.items()) {
      if (!seen_.count(k)) fail(key(k), "unknown key");
    }
  }

 private:
  const ordered_json& j_;
  std::string path_;
  std::set<std::string> seen_;
};

void read_task(Reader r, ExperimentConfig& c) {
  std::string name;
  r.get("name", name);  // already applied by the caller
  r.get("demos", c.demos);
  TaskSpec& t = c.task;
  r.get("horizon", t.horizon);
  r.get("modes", t.modes);
  r.get("noise", t.noise);
  r.get("success_radius", t.success_radius);
  r.get("action_bound", t.action_bound);
  r.get("obstacle_radius", t.obstacle_radius);
  r.get("scene_jitter", t.scene_jitter);
  r.get("detour_clearance", t.detour_clearance);
  r.get("start_fraction", t.start_fraction);
  r.get("target_speed", t.target_speed);
  r.get("orbit_radius", t.orbit_radius);
  r.get("pursuit_gain", t.pursuit_gain);
  r.get("pursuit_cap", t.pursuit_cap);
  r.finish();
}

void read_network(Reader r, ExperimentConfig& c) {
  NetConfig& n = c.network;
  r.get("channels_lo", n.channels_lo);
  r.get("channels_hi", n.channels_hi);
  r.get("embed_dim", n.embed_dim);
  r.get("time_hidden", n.time_hidden);
  r.get("kernel", n.kernel);
  r.get("action_scale", n.action_scale);
  Reader e = r.child("encoder");
  EncoderConfig& ec = c.encoder;
  e.get("d_tok", ec.d_tok);
  e.get("d_pcd", ec.d_pcd);
  e.get("d_state", ec.d_state);
  e.get("gate_hidden", ec.gate_hidden);
  e.get("point_hidden", ec.point_hidden);
  e.get("state_hidden", ec.state_hidden);
  e.finish();
  r.finish();
}

void read_cfm(Reader r, TeacherBlock& b) {
  r.get("epochs", b.epochs);
  r.get("batch", b.batch);
  r.get("lr", b.lr);
  r.get("lr_final", b.lr_final);
  r.get("logit_mean", b.schedule.mu);
  r.get("logit_std", b.schedule.sigma);
  r.get("eps", b.schedule.eps);
  r.get("anti_shortcut", b.anti_shortcut);
  r.get("geometry_corruption", b.geometry_corruption);
  r.get("corruption_std", b.corruption_std);
  Reader s = r.child("sampler");
  std::string integrator = integrator_name(b.sampler.integrator);
  s.get("integrator", integrator);
  try {
    b.sampler.integrator = parse_integrator(integrator);
  } catch (const Error&) {
    fail(s.key("integrator"), "expected \"euler\" or \"heun\", got \"" + integrator + "\"");
  }
  s.get("steps", b.sampler.steps);
  s.finish();
  r.finish();
}

void read_distill(Reader r, DistillBlock& b) {
  r.get("k", b.k);
  r.get("observations", b.observations);
  r.get("epochs", b.epochs);
  r.get("batch", b.batch);
  r.get("lr", b.lr);
  r.get("lr_final", b.lr_final);
  r.get("warm_start", b.warm_start);
  r.finish();
}

void read_eval(Reader r, EvalBlock& b) {
  r.get("observations", b.observations);
  r.get("samples", b.samples);
  r.get("per_mode", b.per_mode);
  r.get("percentile", b.percentile);
  r.get("bootstrap", b.bootstrap);
  r.get("naive_steps", b.naive_steps);
  r.get("timing_repeats", b.timing_repeats);
  r.finish();
}

void read_simloop(Reader r, SimBlock& b) {
  r.get("execute_steps", b.rollout.execute_steps);
  r.get("step_budget", b.rollout.step_budget);
  r.get("dt", b.rollout.dt);
  r.get("continue_plan", b.rollout.continue_plan);
  Reader l = r.child("latency");
  l.get("c_net_ms", b.latency.c_net_ms);
  l.get("c_ovh_ms", b.latency.c_ovh_ms);
  l.get("measured", b.latency.measured);
  l.finish();
  r.get("episodes", b.episodes);
  r.get("speeds", b.speeds);
  r.get("include_critical", b.include_critical);
  r.finish();
}

void read_ablate(Reader r, AblateBlock& b) {
  r.get("ks", b.ks);
  r.get("execute_steps", b.execute_steps);
  r.get("episodes", b.episodes);
  r.finish();
}

void positive(const char* key, std::size_t v) {
  if (v == 0) fail(key, "must be at least 1");
}
void positive(const char* key, double v) {
  if (!(v > 0)) fail(key, "must be positive");
}
void nonnegative(const char* key, double v) {
  if (!(v >= 0)) fail(key, "must be >= 0");
}

// Rethrows library validation errors as configuration errors.
template <typename F>
void check(const char* key, F&& f) {
  try {
    f();
  } catch (const ConfigError&) {
    throw;
  } catch (const Error& e) {
    fail(key, e.what());
  }
}

}  // namespace

ExperimentConfig default_config(TaskKind kind) {
  ExperimentConfig c;
  c.task = default_task(kind);
  c.network.channels_lo = 32;
  c.network.channels_hi = 64;
  c.network.kernel = 11;
  c.network.horizon = c.task.horizon;
  c.network.obs_dim = c.encoder.obs_dim();
  c.output = std::filesystem::path("runs") / task_name(kind);
  return c;
}

void validate(const ExperimentConfig& c) {
  check("task", [&] { validate(c.task); });
  positive("task.demos", c.demos);
  check("network.encoder", [&] { validate(c.encoder); });
  if (c.network.horizon != c.task.horizon) fail("network", "horizon must equal task.horizon");
  if (c.network.obs_dim != c.encoder.obs_dim()) fail("network", "obs_dim must match the encoder widths");
  check("network", [&] { validate(c.network); });

  positive("cfm.batch", c.cfm.batch);
  positive("cfm.lr", c.cfm.lr);
  nonnegative("cfm.lr_final", c.cfm.lr_final);
  check("cfm", [&] { validate(c.cfm.schedule); });
  if (c.cfm.geometry_corruption < 0 || c.cfm.geometry_corruption > 1) {
    fail("cfm.geometry_corruption", "must lie in [0, 1]");
  }
  nonnegative("cfm.corruption_std", c.cfm.corruption_std);
  positive("cfm.sampler.steps", c.cfm.sampler.steps);

  positive("distill.k", c.distill.k);
  positive("distill.observations", c.distill.observations);
  if (c.distill.observations > c.demos) fail("distill.observations", "exceeds task.demos");
  positive("distill.batch", c.distill.batch);
  positive("distill.lr", c.distill.lr);
  nonnegative("distill.lr_final", c.distill.lr_final);

  positive("eval.observations", c.eval.observations);
  if (c.eval.samples < 2) fail("eval.samples", "must be at least 2");
  positive("eval.per_mode", c.eval.per_mode);
  if (!(c.eval.percentile > 0 && c.eval.percentile <= 1)) fail("eval.percentile", "must lie in (0, 1]");
  positive("eval.naive_steps", c.eval.naive_steps);
  if (c.eval.timing_repeats < 30) fail("eval.timing_repeats", "must be at least 30");

  nonnegative("simloop.latency.c_net_ms", c.simloop.latency.c_net_ms);
  nonnegative("simloop.latency.c_ovh_ms", c.simloop.latency.c_ovh_ms);
  if (c.simloop.rollout.execute_steps < 1 || c.simloop.rollout.execute_steps > c.task.horizon) {
    fail("simloop.execute_steps", "must lie in [1, " + std::to_string(c.task.horizon) + "]");
  }
  positive("simloop.step_budget", c.simloop.rollout.step_budget);
  positive("simloop.dt", c.simloop.rollout.dt);
  positive("simloop.episodes", c.simloop.episodes);
  for (double s : c.simloop.speeds) nonnegative("simloop.speeds", s);

  if (c.ablate.ks.empty()) fail("ablate.ks", "must not be empty");
  for (std::size_t k : c.ablate.ks) {
    if (k < 1 || k > c.distill.k) fail("ablate.ks", "values must lie in [1, distill.k]");
  }
  for (std::size_t t : c.ablate.execute_steps) {
    if (t < 1 || t > c.task.horizon) fail("ablate.execute_steps", "values must lie in [1, task.horizon]");
  }
  positive("ablate.episodes", c.ablate.episodes);
  if (c.output.empty()) fail("output", "must not be empty");
}

ExperimentConfig parse_config(std::string_view text) {
  ordered_json j;
  try {
    j = ordered_json::parse(text);
  } catch (const nlohmann::json::parse_error& e) {
    throw ConfigError(std::string("config: invalid JSON: ") + e.what());
  }
  Reader root(j, "");
  TaskKind kind = TaskKind::kFork2d;
  {
    const auto it = j.is_object() ? j.find("task") : j.end();
    if (it != j.end() && it->is_object() && it->contains("name")) {
      const auto& n = (*it)["name"];
      if (!n.is_string()) fail("task.name", "expected a string");
      try {
        kind = parse_task(n.get<std::string>());
      } catch (const Error&) {
        fail("task.name", "unknown task \"" + n.get<std::string>() + "\"");
      }
    }
  }
  ExperimentConfig c = default_config(kind);
  root.get_u64("seed", c.seed);
  std::string out = c.output.string();
  root.get("output", out);
  c.output = out;
  read_task(root.child("task"), c);
  read_network(root.child("network"), c);
  read_cfm(root.child("cfm"), c.cfm);
  read_distill(root.child("distill"), c.distill);
  read_eval(root.child("eval"), c.eval);
  read_simloop(root.child("simloop"), c.simloop);
  read_ablate(root.child("ablate"), c.ablate);
  root.finish();
  c.network.horizon = c.task.horizon;
  c.network.obs_dim = c.encoder.obs_dim();
  validate(c);
  return c;
}

ExperimentConfig load_config(const std::filesystem::path& path) {
  std::ifstream f(path);
  if (!f) throw ConfigError("config: cannot read " + path.string());
  std::stringstream ss;
  ss << f.rdbuf();
  return parse_config(ss.str());
}

std::string config_to_json(const ExperimentConfig& c) {
  const TaskSpec& t = c.task;
  const NetConfig& n = c.network;
  const EncoderConfig& e = c.encoder;
  ordered_json j;
  j["seed"] = c.seed;
  j["output"] = c.output.string();
  j["task"] = {{"name", task_name(t.kind)},
               {"demos", c.demos},
               {"horizon", t.horizon},
               {"modes", t.modes},
               {"noise", t.noise},
               {"success_radius", t.success_radius},
               {"action_bound", t.action_bound},
               {"obstacle_radius", t.obstacle_radius},
               {"scene_jitter", t.scene_jitter},
               {"detour_clearance", t.detour_clearance},
               {"start_fraction", t.start_fraction},
               {"target_speed", t.target_speed},
               {"orbit_radius", t.orbit_radius},
               {"pursuit_gain", t.pursuit_gain},
               {"pursuit_cap", t.pursuit_cap}};
  j["network"] = {{"channels_lo", n.channels_lo},
                  {"channels_hi", n.channels_hi},
                  {"embed_dim", n.embed_dim},
                  {"time_hidden", n.time_hidden},
                  {"kernel", n.kernel},
                  {"action_scale", n.action_scale},
                  {"encoder",
                   {{"d_tok", e.d_tok},
                    {"d_pcd", e.d_pcd},
                    {"d_state", e.d_state},
                    {"gate_hidden", e.gate_hidden},
                    {"point_hidden", e.point_hidden},
                    {"state_hidden", e.state_hidden}}}};
  const TeacherBlock& m = c.cfm;
  j["cfm"] = {{"epochs", m.epochs},
              {"batch", m.batch},
              {"lr", m.lr},
              {"lr_final", m.lr_final},
              {"logit_mean", m.schedule.mu},
              {"logit_std", m.schedule.sigma},
              {"eps", m.schedule.eps},
              {"anti_shortcut", m.anti_shortcut},
              {"geometry_corruption", m.geometry_corruption},
              {"corruption_std", m.corruption_std},
              {"sampler", {{"integrator", integrator_name(m.sampler.integrator)}, {"steps", m.sampler.steps}}}};
  const DistillBlock& d = c.distill;
  j["distill"] = {{"k", d.k},           {"observations", d.observations}, {"epochs", d.epochs},
                  {"batch", d.batch},   {"lr", d.lr},                     {"lr_final", d.lr_final},
                  {"warm_start", d.warm_start}};
  const EvalBlock& v = c.eval;
  j["eval"] = {{"observations", v.observations}, {"samples", v.samples},         {"per_mode", v.per_mode},
               {"percentile", v.percentile},     {"bootstrap", v.bootstrap},     {"naive_steps", v.naive_steps},
               {"timing_repeats", v.timing_repeats}};
  const SimBlock& s = c.simloop;
  j["simloop"] = {{"execute_steps", s.rollout.execute_steps},
                  {"step_budget", s.rollout.step_budget},
                  {"dt", s.rollout.dt},
                  {"continue_plan", s.rollout.continue_plan},
                  {"latency",
                   {{"c_net_ms", s.latency.c_net_ms}, {"c_ovh_ms", s.latency.c_ovh_ms}, {"measured", s.latency.measured}}},
                  {"episodes", s.episodes},
                  {"speeds", s.speeds},
                  {"include_critical", s.include_critical}};
  j["ablate"] = {{"ks", c.ablate.ks}, {"execute_steps", c.ablate.execute_steps}, {"episodes", c.ablate.episodes}};
  return j.dump(2) + "\n";
}

}  // namespace fd
