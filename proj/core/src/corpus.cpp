#include "flowdistill/corpus.hpp"

#include <json.hpp>

#include <cstdio>
#include <fstream>

#include "flowdistill/binary_io.hpp"
#include "flowdistill/cfm.hpp"

namespace fd {

namespace {

void put_tensor(ByteWriter& w, const TensorF& t) {
  w.u8(static_cast<std::uint8_t>(t.rank()));
  for (std::size_t a = 0; a < t.rank(); ++a) w.u32(static_cast<std::uint32_t>(t.dim(a)));
  for (float v : t.data()) w.f32(v);
}

TensorF get_tensor(ByteReader& r) {
  const std::size_t rank = r.u8();
  if (rank == 0 || rank > 4) throw FormatError(r.what() + ": bad tensor rank " + std::to_string(rank));
  Shape s(rank);
  std::size_t n = 1;
  for (auto& d : s) {
    d = r.u32();
    n *= d;
  }
  if (r.remaining() < n * 4) throw FormatError(r.what() + ": truncated tensor");
  TensorF t(s);
  for (auto& v : t.data()) v = r.f32();
  return t;
}

std::string stem(std::size_t i) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "demo_%05zu", i);
  return buf;
}

}  // namespace

std::vector<std::uint8_t> encode_observation(const RawObservation& obs) {
  ByteWriter w;
  w.bytes("ROBS");
  w.u32(1);
  put_tensor(w, obs.appearance);
  put_tensor(w, obs.geometry);
  put_tensor(w, obs.points);
  put_tensor(w, obs.proprio);
  return w.buffer();
}

RawObservation decode_observation(std::vector<std::uint8_t> bytes, const std::string& what) {
  ByteReader r(std::move(bytes), what);
  r.expect_magic("ROBS");
  const std::uint32_t version = r.u32();
  if (version != 1) throw FormatError(what + ": unsupported version " + std::to_string(version));
  RawObservation o;
  o.appearance = get_tensor(r);
  o.geometry = get_tensor(r);
  o.points = get_tensor(r);
  o.proprio = get_tensor(r);
  r.expect_end();
  return o;
}

void write_demo_corpus(const std::filesystem::path& dir, TaskKind task, std::uint64_t seed,
                       std::span<const Demo> demos) {
  if (demos.empty()) throw Error("demo corpus: no demos");
  std::filesystem::create_directories(dir);
  nlohmann::ordered_json j;
  j["format"] = "flowdistill-demos";
  j["version"] = 1;
  j["task"] = task_name(task);
  j["seed"] = seed;
  j["count"] = demos.size();
  j["horizon"] = demos.front().traj.dim(0);
  j["action_dim"] = demos.front().traj.dim(1);
  auto modes = nlohmann::ordered_json::array();
  for (std::size_t i = 0; i < demos.size(); ++i) {
    const Demo& d = demos[i];
    TensorF one({1, d.traj.dim(0), d.traj.dim(1)}, d.traj.vec());
    write_tset(dir / (stem(i) + ".tset"), one);
    ByteWriter w;
    const auto bytes = encode_observation(d.obs);
    w.bytes(std::string_view(reinterpret_cast<const char*>(bytes.data()), bytes.size()));
    w.write_file(dir / (stem(i) + ".obs"));
    modes.push_back(d.mode);
  }
  j["modes"] = modes;
  std::ofstream f(dir / "demos.meta.json");
  if (!f) throw Error("cannot write " + (dir / "demos.meta.json").string());
  f << j.dump(2) << '\n';
  if (!f) throw Error("failed writing " + (dir / "demos.meta.json").string());
}

DemoCorpus read_demo_corpus(const std::filesystem::path& dir, std::size_t limit) {
  const auto meta_path = dir / "demos.meta.json";
  std::ifstream f(meta_path);
  if (!f) throw Error("demo corpus: missing " + meta_path.string());
  DemoCorpus c;
  std::size_t count = 0;
  try {
    const auto j = nlohmann::json::parse(f);
    if (j.at("format") != "flowdistill-demos" || j.at("version") != 1) throw FormatError("unsupported format");
    c.meta.task = parse_task(j.at("task").get<std::string>());
    c.meta.seed = j.at("seed").get<std::uint64_t>();
    c.meta.horizon = j.at("horizon").get<std::size_t>();
    c.meta.action_dim = j.at("action_dim").get<std::size_t>();
    c.meta.modes = j.at("modes").get<std::vector<std::size_t>>();
    count = j.at("count").get<std::size_t>();
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(meta_path.string() + ": " + e.what());
  }
  if (c.meta.modes.size() != count) throw FormatError(meta_path.string() + ": mode list length differs from count");
  const std::size_t n = limit == 0 ? count : std::min(limit, count);
  c.demos.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    Demo& d = c.demos[i];
    const TensorF set = read_tset(dir / (stem(i) + ".tset"));
    if (set.shape() != Shape{1, c.meta.horizon, c.meta.action_dim}) {
      throw FormatError(stem(i) + ".tset: unexpected shape " + shape_str(set.shape()));
    }
    d.traj = TensorF({c.meta.horizon, c.meta.action_dim}, set.vec());
    const auto p = dir / (stem(i) + ".obs");
    d.obs = decode_observation(read_file_bytes(p), p.string());
    d.mode = c.meta.modes[i];
  }
  return c;
}

}  // namespace fd
