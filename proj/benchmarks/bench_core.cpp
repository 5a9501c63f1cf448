#include <benchmark/benchmark.h>

#include <vector>

#include "flowdistill/adam.hpp"
#include "flowdistill/cfm.hpp"
#include "flowdistill/distill.hpp"
#include "flowdistill/encoder.hpp"
#include "flowdistill/policy.hpp"
#include "flowdistill/runtime.hpp"
#include "flowdistill/tasks.hpp"

using namespace fd;

namespace {

// Default widths: kernel 11, 32/64 channels, 80-dim embedding.
NetConfig net_config() {
  NetConfig c;
  c.obs_dim = EncoderConfig{}.obs_dim();
  return c;
}

std::vector<float> embedding(std::size_t n) {
  Rng rng(3);
  std::vector<float> e(n);
  for (auto& v : e) v = static_cast<float>(rng.normal());
  return e;
}

void BM_StudentChunk(benchmark::State& state) {
  const NetConfig nc = net_config();
  StudentNet<float> net(nc, 1);
  StudentPolicy p(net);
  const auto e = embedding(nc.obs_dim);
  const auto k = static_cast<std::size_t>(state.range(0));
  std::uint64_t seed = 0;
  for (auto _ : state) benchmark::DoNotOptimize(p.sample(e, k, ++seed));
  state.SetItemsProcessed(state.iterations() * state.range(0));
}
BENCHMARK(BM_StudentChunk)->Arg(1)->Arg(16)->Unit(benchmark::kMicrosecond);

void BM_TeacherChunk(benchmark::State& state) {
  const NetConfig nc = net_config();
  TeacherNet<float> net(nc, 1);
  TeacherPolicy p(net, {Integrator::kEuler, static_cast<std::size_t>(state.range(0))});
  const auto e = embedding(nc.obs_dim);
  std::uint64_t seed = 0;
  for (auto _ : state) benchmark::DoNotOptimize(p.sample(e, 1, ++seed));
}
BENCHMARK(BM_TeacherChunk)->Arg(1)->Arg(10)->Arg(50)->Unit(benchmark::kMillisecond);

void BM_TeacherForward(benchmark::State& state) {
  const NetConfig nc = net_config();
  TeacherNet<float> net(nc, 1);
  const auto b = static_cast<std::size_t>(state.range(0));
  Rng rng(4);
  const TensorF tau = rng.normal_tensor<float>({b, nc.horizon, nc.action_dim});
  const TensorF e = rng.normal_tensor<float>({b, nc.obs_dim});
  const std::vector<double> times(b, 0.5);
  for (auto _ : state) {
    Graph<float> g(false);
    benchmark::DoNotOptimize(g.value(net.teacher_forward(g, g.constant(tau), times, g.constant(e))));
  }
  state.SetItemsProcessed(state.iterations() * state.range(0));
}
BENCHMARK(BM_TeacherForward)->Arg(1)->Arg(16)->Arg(64)->Unit(benchmark::kMicrosecond);

void BM_TeacherTrainStep(benchmark::State& state) {
  const NetConfig nc = net_config();
  TeacherNet<float> net(nc, 1);
  Adam<float> opt(AdamConfig{});
  const std::size_t b = 64;
  Rng rng(5);
  const TensorF tau1 = rng.normal_tensor<float>({b, nc.horizon, nc.action_dim});
  const TensorF e = rng.normal_tensor<float>({b, nc.obs_dim});
  const FlowSchedule sched;
  const DataPredictor<float> predict = [&](Graph<float>& g, Var x, std::span<const double> ts, Var eo,
                                           const TensorF* keep) { return net.teacher_forward(g, x, ts, eo, keep); };
  for (auto _ : state) {
    Graph<float> g;
    const Var loss = cfm_loss<float>(g, predict, tau1, g.constant(e), sched, rng, true);
    net.params().zero_grad();
    g.backward(loss);
    opt.step(net.params());
  }
  state.SetItemsProcessed(state.iterations() * static_cast<std::int64_t>(b));
}
BENCHMARK(BM_TeacherTrainStep)->Unit(benchmark::kMillisecond);

void BM_StudentTrainStep(benchmark::State& state) {
  const NetConfig nc = net_config();
  StudentNet<float> net(nc, 1);
  Adam<float> opt(AdamConfig{});
  const std::size_t b = 16, k = 16;
  Rng rng(6);
  const TensorF sets = rng.normal_tensor<float>({b * k, nc.horizon, nc.action_dim});
  const TensorF e = rng.normal_tensor<float>({b * k, nc.obs_dim});
  for (auto _ : state) {
    Graph<float> g;
    const TensorF z = rng.normal_tensor<float>({b * k, nc.horizon, nc.action_dim});
    const Var loss = chamfer(g, g.constant(sets), net.student_forward(g, g.constant(z), g.constant(e)), b);
    net.params().zero_grad();
    g.backward(loss);
    opt.step(net.params());
  }
}
BENCHMARK(BM_StudentTrainStep)->Unit(benchmark::kMillisecond);

void BM_ChamferDistance(benchmark::State& state) {
  const auto k = static_cast<std::size_t>(state.range(0));
  Rng rng(7);
  const TensorD a = rng.normal_tensor<double>({k, 32, 2});
  const TensorD b = rng.normal_tensor<double>({k, 32, 2});
  for (auto _ : state) benchmark::DoNotOptimize(chamfer_distance(a, b));
}
BENCHMARK(BM_ChamferDistance)->Arg(4)->Arg(16)->Arg(64);

void BM_EncodeObservation(benchmark::State& state) {
  const EncoderConfig ec;
  Encoder<float> enc(ec, 1);
  const Featurizer feat(ec);
  const TaskSpec task = default_task(TaskKind::kFork2d);
  const Demo d = make_demo(task, feat, 1, 0);
  const RawObservation* one[] = {&d.obs};
  for (auto _ : state) benchmark::DoNotOptimize(encode_observations(enc, one));
}
BENCHMARK(BM_EncodeObservation)->Unit(benchmark::kMicrosecond);

void BM_ExpertDemo(benchmark::State& state) {
  const EncoderConfig ec;
  const Featurizer feat(ec);
  const TaskSpec task = default_task(TaskKind::kFork2d);
  std::size_t i = 0;
  for (auto _ : state) benchmark::DoNotOptimize(make_demo(task, feat, 1, i++));
}
BENCHMARK(BM_ExpertDemo)->Unit(benchmark::kMicrosecond);

}  // namespace

int main(int argc, char** argv) {
  tune_runtime();
  benchmark::Initialize(&argc, argv);
  if (benchmark::ReportUnrecognizedArguments(argc, argv)) return 1;
  benchmark::RunSpecifiedBenchmarks();
  benchmark::Shutdown();
  return 0;
}
