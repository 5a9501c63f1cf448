#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <vector>

#include "flowdistill/cfm.hpp"

using namespace fd;

namespace {

NetConfig tiny_config() {
  NetConfig c;
  c.horizon = 8;
  c.channels_lo = 4;
  c.channels_hi = 6;
  c.embed_dim = 4;
  c.time_hidden = 6;
  c.obs_dim = 5;
  return c;
}

// Predictor that ignores its input and returns a fixed trajectory; counts calls.
struct ConstantTeacher {
  TensorF c;
  std::size_t* calls;
  TensorF operator()(const TensorF& tau, std::span<const double>, const TensorF&) const {
    ++*calls;
    TensorF out(tau.shape());
    const std::size_t per = c.size();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = c[i % per];
    return out;
  }
};

std::filesystem::path temp_path(const std::string& name) {
  return std::filesystem::temp_directory_path() / ("fd_test_cfm_" + name);
}

}  // namespace

TEST_CASE("logit-normal time sampling") {
  FlowSchedule s;
  Rng rng(1);
  std::vector<double> t(100000);
  for (auto& v : t) {
    v = sample_time(s, rng);
    REQUIRE(v > 0.0);
    REQUIRE(v < 1.0);
  }
  std::nth_element(t.begin(), t.begin() + t.size() / 2, t.end());
  const double median = t[t.size() / 2];
  CHECK(median > 0.47);
  CHECK(median < 0.53);

  s.mu = 1.0;
  s.sigma = 1e-6;
  double lo = 1, hi = 0;
  for (int i = 0; i < 1000; ++i) {
    const double v = sample_time(s, rng);
    lo = std::min(lo, v);
    hi = std::max(hi, v);
  }
  CHECK(hi - lo < 1e-5);
  CHECK(lo == doctest::Approx(1.0 / (1.0 + std::exp(-1.0))).epsilon(1e-5));
}

TEST_CASE("linear path endpoints and midpoint") {
  Rng rng(2);
  const TensorD a = rng.normal_tensor<double>({3, 4, 2});
  const TensorD b = rng.normal_tensor<double>({3, 4, 2});
  CHECK(interpolate_path(a, b, 0.0) == a);
  CHECK(interpolate_path(a, b, 1.0) == b);
  const TensorD m = interpolate_path(a, b, 0.25);
  for (std::size_t i = 0; i < m.size(); ++i) CHECK(m[i] == doctest::Approx(0.75 * a[i] + 0.25 * b[i]));
  CHECK_THROWS_AS(interpolate_path(a, rng.normal_tensor<double>({3, 4, 1}), 0.5), ShapeError);
}

TEST_CASE("velocity from a data prediction") {
  const TensorD d = TensorD::from({2}, {1.0, -2.0});
  const TensorD x = TensorD::from({2}, {0.5, 0.5});
  const TensorD v = velocity_from_data_pred(d, x, 0.75, 1e-3);
  CHECK(v[0] == doctest::Approx(2.0));
  CHECK(v[1] == doctest::Approx(-10.0));
  // Near t = 1 the denominator is clamped.
  const TensorD w = velocity_from_data_pred(d, x, 1.0, 1e-3);
  CHECK(w[0] == doctest::Approx(500.0));
  CHECK(std::isfinite(w[1]));
}

TEST_CASE("cfm loss with an oracle and with a zero predictor") {
  Rng data(3);
  const TensorD tau1 = data.normal_tensor<double>({16, 4, 2});
  FlowSchedule s;

  SUBCASE("predicting tau1 gives zero loss") {
    Graph<double> g;
    Rng rng(4);
    const DataPredictor<double> oracle = [&](Graph<double>& gg, Var, std::span<const double>, Var, const TensorD*) {
      return gg.constant(tau1);
    };
    const Var loss = cfm_loss<double>(g, oracle, tau1, g.constant(TensorD({16, 1})), s, rng);
    CHECK(g.value(loss)[0] == 0.0);
  }
  SUBCASE("predicting zero gives the mean square of tau1") {
    Graph<double> g;
    Rng rng(5);
    const DataPredictor<double> zero = [&](Graph<double>& gg, Var tau, std::span<const double> times, Var,
                                           const TensorD* keep) {
      CHECK(times.size() == 16);
      REQUIRE(keep != nullptr);
      CHECK(keep->size() == 16);
      return gg.constant(TensorD(gg.shape(tau)));
    };
    const Var loss = cfm_loss<double>(g, zero, tau1, g.constant(TensorD({16, 1})), s, rng);
    double ms = 0;
    for (double v : tau1.data()) ms += v * v;
    CHECK(g.value(loss)[0] == doctest::Approx(ms / tau1.size()));
  }
  SUBCASE("without anti-shortcut no mask is passed") {
    Graph<double> g;
    Rng rng(6);
    const DataPredictor<double> check = [&](Graph<double>& gg, Var tau, std::span<const double>, Var,
                                            const TensorD* keep) {
      CHECK(keep == nullptr);
      return tau;
    };
    cfm_loss<double>(g, check, tau1, g.constant(TensorD({16, 1})), s, rng, false);
  }
  SUBCASE("noisy input matches the path at the sampled time") {
    Graph<double> g;
    Rng rng(7);
    Rng replay(7);
    const DataPredictor<double> probe = [&](Graph<double>& gg, Var tau, std::span<const double> times, Var,
                                            const TensorD*) {
      const TensorD& x = gg.value(tau);
      const std::size_t per = 8;
      for (std::size_t i = 0; i < 16; ++i) {
        const double t = sample_time(s, replay);
        CHECK(times[i] == t);
        for (std::size_t j = 0; j < per; ++j) {
          const double z = replay.normal();
          CHECK(x[i * per + j] == doctest::Approx((1 - t) * z + t * tau1[i * per + j]));
        }
      }
      return tau;
    };
    cfm_loss<double>(g, probe, tau1, g.constant(TensorD({16, 1})), s, rng, false);
  }
}

TEST_CASE("constant teacher: Euler and Heun follow the straight path exactly") {
  Rng rng(8);
  const TensorF c = rng.normal_tensor<float>({1, 8, 2});
  const TensorF tau0 = rng.normal_tensor<float>({1, 8, 2});
  const TensorF obs({1, 5});
  for (Integrator integ : {Integrator::kEuler, Integrator::kHeun}) {
    for (std::size_t n : {1u, 2u, 5u, 50u}) {
      std::size_t calls = 0;
      const OdeTrace tr = sample_ode(ConstantTeacher{c, &calls}, obs, tau0, {integ, n});
      const double t = static_cast<double>(n - 1) / static_cast<double>(n);
      for (std::size_t i = 0; i < c.size(); ++i) {
        CHECK(tr.pre_jump[i] == doctest::Approx((1 - t) * tau0[i] + t * c[i]).epsilon(1e-4));
        CHECK(tr.final[i] == c[i]);
      }
      CHECK(calls == (integ == Integrator::kEuler ? n : 2 * n - 1));
    }
  }
}

TEST_CASE("teacher NFE per trajectory") {
  const NetConfig nc = tiny_config();
  TeacherNet<float> teacher(nc, 9);
  const TensorF obs({1, 5}, 0.1f);
  Rng rng(10);
  teacher.reset_nfe();
  sample_ode(make_predictor(teacher), obs, {1, 8, 2}, {Integrator::kEuler, 10}, rng);
  CHECK(teacher.nfe() == 10);
  teacher.reset_nfe();
  sample_ode(make_predictor(teacher), obs, {1, 8, 2}, {Integrator::kHeun, 10}, rng);
  CHECK(teacher.nfe() == 19);
  teacher.reset_nfe();
  sample_ode(make_predictor(teacher), obs, {1, 8, 2}, {Integrator::kEuler, 1}, rng);
  CHECK(teacher.nfe() == 1);
  CHECK_THROWS_AS(sample_ode(make_predictor(teacher), obs, {1, 8, 2}, {Integrator::kEuler, 0}, rng), Error);
}

TEST_CASE("teacher sets are deterministic and per-sample independent of K") {
  const NetConfig nc = tiny_config();
  TeacherNet<float> teacher(nc, 11);
  const std::vector<float> e{0.1f, -0.2f, 0.3f, 0.0f, 0.5f};
  const OdeSamplerConfig oc{Integrator::kEuler, 6};
  const TensorF a = generate_teacher_set(teacher, e, 4, oc, 77);
  const TensorF b = generate_teacher_set(teacher, e, 4, oc, 77);
  CHECK(a.shape() == Shape{4, 8, 2});
  CHECK(a == b);
  const TensorF one = generate_teacher_set(teacher, e, 1, oc, 77);
  CHECK(one.shape() == Shape{1, 8, 2});
  for (std::size_t i = 0; i < one.size(); ++i) CHECK(one[i] == doctest::Approx(a[i]).epsilon(1e-5));
  const TensorF c = generate_teacher_set(teacher, e, 4, oc, 78);
  CHECK_FALSE(a == c);
  CHECK_THROWS_AS(generate_teacher_set(teacher, std::vector<float>(3), 4, oc, 1), ShapeError);
  CHECK_THROWS_AS(generate_teacher_set(teacher, e, 0, oc, 1), Error);
}

TEST_CASE("teacher training") {
  const TaskSpec task = default_task(TaskKind::kFork2d);
  EncoderConfig ec;
  const Featurizer feat(ec);
  std::vector<Demo> demos;
  for (std::size_t i = 0; i < 16; ++i) demos.push_back(make_demo(task, feat, 1, i));
  NetConfig nc;
  nc.channels_lo = 8;
  nc.channels_hi = 8;

  SUBCASE("zero epochs leaves parameters untouched") {
    Encoder<float> enc(ec, 1);
    TeacherNet<float> teacher(nc, 2);
    const auto before = teacher.params()[0].value;
    TeacherTrainConfig tc;
    tc.epochs = 0;
    const TrainLog log = train_teacher(demos, enc, teacher, tc);
    CHECK(log.epochs_run == 0);
    CHECK(teacher.params()[0].value == before);
  }
  SUBCASE("loss drops and the log is written") {
    Encoder<float> enc(ec, 1);
    TeacherNet<float> teacher(nc, 2);
    TeacherTrainConfig tc;
    tc.epochs = 30;
    tc.batch = 8;
    tc.lr = 3e-3;
    tc.log_csv = temp_path("loss.csv");
    const TrainLog log = train_teacher(demos, enc, teacher, tc);
    CHECK(log.epochs_run == 30);
    CHECK(log.step_loss.size() == 60);
    CHECK(log.epoch_loss.back() < log.epoch_loss.front());
    REQUIRE(std::filesystem::exists(tc.log_csv));
    std::filesystem::remove(tc.log_csv);
  }
  SUBCASE("training is reproducible") {
    TeacherTrainConfig tc;
    tc.epochs = 2;
    tc.batch = 8;
    Encoder<float> e1(ec, 1), e2(ec, 1);
    TeacherNet<float> t1(nc, 2), t2(nc, 2);
    const TrainLog a = train_teacher(demos, e1, t1, tc);
    const TrainLog b = train_teacher(demos, e2, t2, tc);
    CHECK(a.step_loss == b.step_loss);
    for (std::size_t i = 0; i < t1.params().size(); ++i) CHECK(t1.params()[i].value == t2.params()[i].value);
  }
  SUBCASE("divergence aborts with epoch context") {
    Encoder<float> enc(ec, 1);
    TeacherNet<float> teacher(nc, 2);
    teacher.params()[0].value[0] = std::numeric_limits<float>::quiet_NaN();
    TeacherTrainConfig tc;
    tc.epochs = 1;
    try {
      train_teacher(demos, enc, teacher, tc);
      FAIL("expected a NonFiniteError");
    } catch (const NonFiniteError& e) {
      CHECK(std::string(e.what()).find("epoch 0") != std::string::npos);
    }
  }
}

TEST_CASE("TSET round trip and corruption") {
  Rng rng(12);
  const TensorF set = rng.normal_tensor<float>({3, 8, 2});
  const auto path = temp_path("set.tset");
  write_tset(path, set);
  CHECK(read_tset(path) == set);
  std::filesystem::remove(path);

  auto bytes = encode_tset(set);
  CHECK(decode_tset(bytes) == set);
  auto truncated = bytes;
  truncated.pop_back();
  CHECK_THROWS_AS(decode_tset(truncated), FormatError);
  auto bad = bytes;
  bad[0] = 'X';
  CHECK_THROWS_AS(decode_tset(bad), FormatError);

  const auto csv = temp_path("set.csv");
  export_tset_csv(csv, set);
  std::ifstream f(csv);
  std::string header;
  std::getline(f, header);
  CHECK(header == "k,h,a_0,a_1");
  std::size_t rows = 0;
  for (std::string line; std::getline(f, line);) ++rows;
  CHECK(rows == 24);
  std::filesystem::remove(csv);
}
