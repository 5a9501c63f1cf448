#include <doctest.h>

#include <cmath>
#include <set>
#include <vector>

#include "flowdistill/gradcheck.hpp"
#include "flowdistill/nets.hpp"

using namespace fd;

namespace {

NetConfig tiny_config() {
  NetConfig c;
  c.horizon = 8;
  c.action_dim = 2;
  c.channels_lo = 4;
  c.channels_hi = 6;
  c.embed_dim = 4;
  c.time_hidden = 6;
  c.obs_dim = 5;
  return c;
}

template <typename T>
Tensor<T> random_tensor(Shape shape, std::uint64_t seed) {
  Rng rng(seed);
  return rng.normal_tensor<T>(std::move(shape));
}

}  // namespace

TEST_CASE("teacher output has the trajectory shape for the default config") {
  NetConfig cfg;
  TeacherNet<float> net(cfg, 1);
  Graph<float> g(false);
  const std::vector<double> times{0.3, 0.9};
  Var out = net.teacher_forward(g, g.constant(random_tensor<float>({2, 32, 2}, 2)), times,
                                g.constant(random_tensor<float>({2, 80}, 3)));
  CHECK(g.shape(out) == Shape{2, 32, 2});
}

TEST_CASE("student manifest is the teacher manifest minus the time pathway") {
  NetConfig cfg;
  TeacherNet<float> teacher(cfg, 4);
  StudentNet<float> student(cfg, 4);
  std::vector<std::string> expected;
  std::size_t time_scalars = 0;
  for (const auto& p : teacher.params()) {
    if (is_time_conditioning(p.name)) {
      time_scalars += p.value.size();
      continue;
    }
    expected.push_back(p.name);
    CHECK(student.params().at(p.name).value.shape() == p.value.shape());
  }
  REQUIRE(expected.size() == student.params().size());
  for (std::size_t i = 0; i < expected.size(); ++i) CHECK(student.params()[i].name == expected[i]);
  CHECK(time_scalars > 0);
  CHECK(student.params().scalar_count() == teacher.params().scalar_count() - time_scalars);

  // Shared blocks initialize identically, so a stripped teacher equals a fresh student.
  const ParameterSet<float> stripped = strip_time_conditioning(teacher.params());
  for (std::size_t i = 0; i < stripped.size(); ++i) CHECK(stripped[i].value == student.params()[i].value);
  StudentNet<float> from_teacher(cfg, stripped);
  CHECK(from_teacher.params().size() == student.params().size());
}

TEST_CASE("teacher gradients match finite differences") {
  const NetConfig cfg = tiny_config();
  for (std::uint64_t seed : {1u, 2u, 3u}) {
    TeacherNet<double> net(cfg, seed);
    const TensorD tau = random_tensor<double>({2, cfg.horizon, cfg.action_dim}, seed + 10);
    const TensorD eobs = random_tensor<double>({2, cfg.obs_dim}, seed + 20);
    const TensorD target = random_tensor<double>({2, cfg.horizon, cfg.action_dim}, seed + 30);
    const std::vector<double> times{0.25, 0.8};
    const auto build = [&](Graph<double>& g) {
      Var out = net.teacher_forward(g, g.constant(tau), times, g.constant(eobs));
      return g.squared_error(out, g.constant(target));
    };
    GradCheckOptions opts;
    opts.max_entries_per_param = 12;
    opts.seed = seed;
    const auto r = finite_diff_check(build, net.params(), opts);
    INFO("worst " << r.worst_param);
    CHECK(r.max_rel_error < 1e-3);
  }
}

TEST_CASE("student gradients match finite differences") {
  const NetConfig cfg = tiny_config();
  StudentNet<double> net(cfg, 9);
  const TensorD z = random_tensor<double>({3, cfg.horizon, cfg.action_dim}, 11);
  const TensorD eobs = random_tensor<double>({3, cfg.obs_dim}, 12);
  const TensorD target = random_tensor<double>({3, cfg.horizon, cfg.action_dim}, 13);
  const auto build = [&](Graph<double>& g) {
    return g.squared_error(net.student_forward(g, g.constant(z), g.constant(eobs)), g.constant(target));
  };
  const auto r = finite_diff_check(build, net.params(), {1e-4, 12, 5});
  CHECK(r.max_rel_error < 1e-3);
}

TEST_CASE("NFE counter counts one per trajectory") {
  NetConfig cfg;
  StudentNet<float> net(cfg, 1);
  for (int call = 1; call <= 3; ++call) {
    Graph<float> g(false);
    net.student_forward(g, g.constant(random_tensor<float>({1, 32, 2}, call)),
                        g.constant(random_tensor<float>({1, 80}, call)));
    CHECK(net.nfe() == static_cast<std::uint64_t>(call));
  }
  Graph<float> g(false);
  net.student_forward(g, g.constant(TensorF({4, 32, 2})), g.constant(TensorF({4, 80})));
  CHECK(net.nfe() == 7);
  net.reset_nfe();
  CHECK(net.nfe() == 0);
}

TEST_CASE("sinusoidal embedding") {
  SUBCASE("t = 0 gives sin 0 and cos 1") {
    const auto e = sinusoidal_embed(0.0, 32);
    REQUIRE(e.size() == 32);
    for (std::size_t i = 0; i < 16; ++i) {
      CHECK(e[2 * i] == 0.0);
      CHECK(e[2 * i + 1] == 1.0);
    }
  }
  SUBCASE("injective on a 1000-point grid") {
    std::set<std::vector<double>> seen;
    for (int i = 0; i < 1000; ++i) seen.insert(sinusoidal_embed(i / 999.0, 32));
    CHECK(seen.size() == 1000);
  }
  SUBCASE("fixed dimension and deterministic") {
    CHECK(sinusoidal_embed(0.37, 16).size() == 16);
    CHECK(sinusoidal_embed(0.37, 16) == sinusoidal_embed(0.37, 16));
  }
  SUBCASE("t outside [0,1] is rejected") {
    CHECK_THROWS_AS(sinusoidal_embed(-0.01, 32), Error);
    CHECK_THROWS_AS(sinusoidal_embed(1.01, 32), Error);
  }
}

TEST_CASE("anti-shortcut mask schedule") {
  CHECK(mask_probability(0.2) == 0.0);
  CHECK(mask_probability(0.5) == 0.0);
  CHECK(mask_probability(0.75) == doctest::Approx(0.5));
  CHECK(mask_probability(1.0) == 1.0);

  Rng rng(3);
  const TensorF feats = random_tensor<float>({2, 4, 3}, 4);
  {
    Graph<float> g;
    const std::vector<double> t{0.2, 0.2};
    Var out = mask_noise_embedding(g, g.constant(feats), t, rng);
    CHECK(g.value(out) == feats);
  }
  {
    Graph<float> g;
    const std::vector<double> t{1.0, 1.0};
    Var out = mask_noise_embedding(g, g.constant(feats), t, rng);
    for (float v : g.value(out).data()) CHECK(v == 0.0f);
  }

  const std::vector<double> many(100000, 0.75);
  const TensorF keep = draw_keep_mask<float>(many, rng);
  double masked = 0;
  for (float k : keep.data()) masked += k == 0.0f ? 1.0 : 0.0;
  CHECK(std::abs(masked / 1e5 - 0.5) < 0.01);
}

TEST_CASE("FiLM conditioning is live at initialization") {
  NetConfig cfg;
  TeacherNet<float> net(cfg, 21);
  const TensorF tau = random_tensor<float>({1, 32, 2}, 22);
  const TensorF eobs = random_tensor<float>({1, 80}, 23);
  const std::vector<double> t{0.4};
  Graph<float> g(false);
  const TensorF a = g.value(net.teacher_forward(g, g.constant(tau), t, g.constant(eobs)));
  const TensorF b = g.value(net.teacher_forward(g, g.constant(tau), t, g.constant(TensorF({1, 80}))));
  double delta = 0;
  for (std::size_t i = 0; i < a.size(); ++i) delta += std::abs(a[i] - b[i]);
  CHECK(delta > 0.0);
}

TEST_CASE("untrained teacher output snapshot") {
  const NetConfig cfg = tiny_config();
  TeacherNet<double> net(cfg, 1234);
  Graph<double> g(false);
  const std::vector<double> t{0.5};
  const TensorD out = g.value(net.teacher_forward(g, g.constant(random_tensor<double>({1, 8, 2}, 5)), t,
                                                  g.constant(random_tensor<double>({1, 5}, 6))));
  // Recorded from the first verified run.
  const double expected[] = {-0.070542978861099628, 0.18609080058665062, -0.1704106826696446, 0.12562207104523154};
  for (std::size_t i = 0; i < 4; ++i) CHECK(out[i] == doctest::Approx(expected[i]).epsilon(1e-9));
}

TEST_CASE("forward rejects inconsistent inputs") {
  NetConfig cfg;
  TeacherNet<float> teacher(cfg, 1);
  StudentNet<float> student(cfg, 1);
  Graph<float> g(false);
  const std::vector<double> one{0.5};
  CHECK_THROWS_AS(teacher.teacher_forward(g, g.constant(TensorF({1, 16, 2})), one, g.constant(TensorF({1, 80}))),
                  ShapeError);
  CHECK_THROWS_AS(teacher.teacher_forward(g, g.constant(TensorF({1, 32, 2})), one, g.constant(TensorF({1, 79}))),
                  ShapeError);
  const std::vector<double> two{0.5, 0.5};
  CHECK_THROWS_AS(teacher.teacher_forward(g, g.constant(TensorF({1, 32, 2})), two, g.constant(TensorF({1, 80}))),
                  ShapeError);
  CHECK_THROWS_AS(student.forward(g, g.constant(TensorF({1, 32, 2})), g.constant(TensorF({1, 80})), one), Error);
  NetConfig bad;
  bad.horizon = 31;
  CHECK_THROWS_AS(TeacherNet<float>(bad, 1), Error);
}
