#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "stsep/spiking.hpp"
#include "testutil.hpp"

using namespace stsep;

namespace {
NeuronParams params(double tau = 2.0, double th = 1.0, double width = 0.5) {
  NeuronParams p;
  p.tau = tau;
  p.v_threshold = th;
  p.surrogate_width = width;
  return p;
}
}  // namespace

TEST_CASE("lif_step hand case: tau=2, V_prev=0.8, I=1.2 reaches threshold") {
  NeuronState st;
  st.v_prev = Tensor::from(Shape{1}, {0.8f});
  st.s_prev = Tensor::from(Shape{1}, {0.0f});
  st.fresh = false;
  Tensor i_t = Tensor::from(Shape{1}, {1.2f});
  auto [spikes, next] = lif_step(i_t, st, params());
  CHECK(next.v_prev.data()[0] == doctest::Approx(1.0f));
  CHECK(spikes.data()[0] == 1.0f);  // fire at equality
}

TEST_CASE("lif_step hard reset: prior spike annihilates the old potential") {
  NeuronState st;
  st.v_prev = Tensor::from(Shape{1}, {5.0f});
  st.s_prev = Tensor::from(Shape{1}, {1.0f});
  st.fresh = false;
  Tensor i_t = Tensor::from(Shape{1}, {0.0f});
  auto [spikes, next] = lif_step(i_t, st, params());
  CHECK(next.v_prev.data()[0] == 0.0f);
  CHECK(spikes.data()[0] == 0.0f);
}

TEST_CASE("lif_step with tau=1: V equals I exactly, independent of state") {
  Rng rng(7);
  NeuronState st;
  st.v_prev = Tensor(Shape{4}, 123.0f);
  st.s_prev = Tensor(Shape{4}, 0.0f);
  st.fresh = false;
  Tensor i_t(Shape{4});
  for (auto& v : i_t.values()) v = static_cast<float>(rng.uniform(-2, 2));
  auto [spikes, next] = lif_step(i_t, st, params(1.0));
  for (int64_t i = 0; i < 4; ++i) CHECK(next.v_prev.data()[i] == i_t.data()[i]);
}

TEST_CASE("nsn_step hand cases") {
  Tensor i_t = Tensor::from(Shape{1}, {2.5f});
  Tensor s = nsn_step(i_t, params());
  CHECK(s.data()[0] == 1.0f);  // 2.5/2 = 1.25 >= 1

  Tensor zero(Shape{3}, 0.0f);
  Tensor sz = nsn_step(zero, params(2.0, 0.01));
  for (int64_t i = 0; i < 3; ++i) CHECK(sz.data()[i] == 0.0f);
}

TEST_CASE("nsn_step is stateless: identical inputs at any t give identical outputs") {
  Rng rng(21);
  Tensor i_t(Shape{2, 3, 2, 2});
  for (auto& v : i_t.values()) v = static_cast<float>(rng.uniform(-2, 3));
  Tensor a = nsn_step(i_t, params());
  for (int k = 0; k < 6; ++k) (void)nsn_step(Tensor(Shape{1, 1, 1, 1}, 9.0f), params());
  Tensor b = nsn_step(i_t, params());
  for (int64_t i = 0; i < a.numel(); ++i) CHECK(a.data()[i] == b.data()[i]);
}

TEST_CASE("heaviside_surrogate forward and backward window") {
  Tensor x = Tensor::from(Shape{3}, {0.0f, 2.0f, -0.2f}, true);
  Tensor y = heaviside_surrogate(x, 0.5f);
  CHECK(y.data()[0] == 1.0f);  // fire at equality
  CHECK(y.data()[1] == 1.0f);
  CHECK(y.data()[2] == 0.0f);

  Graph g;
  Tensor loss;
  {
    Graph::Record rec(g);
    loss = sum(heaviside_surrogate(x, 0.5f));
  }
  backward(g, loss);
  CHECK(x.grad()[0] == doctest::Approx(1.0f));  // 1/(2*0.5) inside the window
  CHECK(x.grad()[1] == 0.0f);                   // outside
  CHECK(x.grad()[2] == doctest::Approx(1.0f));
}

TEST_CASE("surrogate gradient is zero everywhere outside the window") {
  Rng rng(33);
  Tensor x(Shape{64}, 0.0f);
  for (auto& v : x.values()) v = static_cast<float>(rng.uniform(-4, 4));
  x.set_requires_grad(true);
  const float width = 0.25f;
  Graph g;
  Tensor loss;
  {
    Graph::Record rec(g);
    loss = sum(spike_threshold(x, 1.0f, width, false));
  }
  backward(g, loss);
  for (int64_t i = 0; i < x.numel(); ++i) {
    if (std::abs(x.data()[i] - 1.0f) > width) CHECK(x.grad()[static_cast<size_t>(i)] == 0.0f);
    else CHECK(x.grad()[static_cast<size_t>(i)] == doctest::Approx(1.0f / (2 * width)));
  }
}

TEST_CASE("spike binarity: lif_scan outputs are exactly 0 or 1") {
  Rng rng(55);
  Tensor x(Shape{8, 3, 4, 4});
  for (auto& v : x.values()) v = static_cast<float>(rng.uniform(-3, 3));
  Tensor s = lif_scan(x, 4, params());
  for (float v : s.values()) CHECK((v == 0.0f || v == 1.0f));
}

TEST_CASE("lif_scan equals iterated lif_step bit for bit") {
  Rng rng(56);
  const int64_t t_steps = 5, n = 2, c = 3, hw = 4;
  Tensor packed(Shape{t_steps * n, c, 2, 2});
  for (auto& v : packed.values()) v = static_cast<float>(rng.uniform(-2, 3));
  Tensor scanned = lif_scan(packed, t_steps, params());

  NeuronState st;
  const int64_t per = n * c * hw;
  for (int64_t t = 0; t < t_steps; ++t) {
    Tensor i_t(Shape{n, c, 2, 2});
    std::copy(packed.data() + t * per, packed.data() + (t + 1) * per, i_t.data());
    auto [spikes, next] = lif_step(i_t, st, params());
    st = next;
    for (int64_t i = 0; i < per; ++i) CHECK(spikes.data()[i] == scanned.data()[t * per + i]);
  }
}

TEST_CASE("hard reset property: post-spike state contributes exactly zero at the next step") {
  Rng rng(57);
  NeuronState st;
  Tensor i1(Shape{16});
  for (auto& v : i1.values()) v = static_cast<float>(rng.uniform(1.8, 4.0));  // all fire: I/2 >= 0.9
  auto [s1, st1] = lif_step(Tensor(i1), st, params(2.0, 0.9));
  for (float v : s1.values()) REQUIRE(v == 1.0f);
  // next step with zero input: decayed V contribution must be exactly zero
  auto [s2, st2] = lif_step(Tensor(Shape{16}, 0.0f), st1, params(2.0, 0.9));
  for (float v : st2.v_prev.values()) CHECK(v == 0.0f);
}

TEST_CASE("state reset: identical clips across a reset give identical outputs") {
  Rng rng(58);
  Tensor clip(Shape{6, 2, 2, 2});
  for (auto& v : clip.values()) v = static_cast<float>(rng.uniform(-1, 3));
  NeuronParams p = params();

  auto run_clip = [&](NeuronState& st) {
    std::vector<float> out;
    const int64_t per = 2 * 2 * 2;
    for (int64_t t = 0; t < 3; ++t) {
      Tensor i_t(Shape{2, 2, 2});
      std::copy(clip.data() + t * per, clip.data() + (t + 1) * per, i_t.data());
      auto [s, next] = lif_step(i_t, st, p);
      st = next;
      out.insert(out.end(), s.values().begin(), s.values().end());
    }
    return out;
  };
  NeuronState st;
  auto first = run_clip(st);
  st.reset();
  auto second = run_clip(st);
  CHECK(first == second);
}

TEST_CASE("lif_step matches the scalar reference over a trajectory") {
  Rng rng(59);
  NeuronParams p = params();
  testutil::LifRef ref;
  NeuronState st;
  for (int t = 0; t < 12; ++t) {
    const double input = rng.uniform(-1, 3);
    auto [s, next] = lif_step(Tensor::from(Shape{1}, {static_cast<float>(input)}), st, p);
    st = next;
    const double want = ref.step(input, p.tau, p.v_threshold);
    CHECK(s.data()[0] == doctest::Approx(want));
    CHECK(st.v_prev.data()[0] == doctest::Approx(ref.v).epsilon(1e-5));
  }
}

TEST_CASE("make_policy: ns/rns stage maps") {
  StagePolicy vanilla = make_policy(PolicyMode::vanilla);
  for (int st = 1; st <= 5; ++st) CHECK(vanilla.stage_stateful(st));

  StagePolicy ns0 = make_policy(PolicyMode::ns, 0);
  for (int st = 1; st <= 5; ++st) CHECK(ns0.stage_stateful(st));

  StagePolicy ns3 = make_policy(PolicyMode::ns, 3);
  for (int st = 1; st <= 5; ++st) CHECK(ns3.stage_stateful(st) == (st > 3));

  StagePolicy rns2 = make_policy(PolicyMode::rns, 2);
  for (int st = 1; st <= 5; ++st) CHECK(rns2.stage_stateful(st) == (st <= 3));

  CHECK_THROWS_AS(make_policy(PolicyMode::ns, 6), ConfigError);
  CHECK_THROWS_AS(make_policy(PolicyMode::ns, -1), ConfigError);
  CHECK_THROWS_AS(StagePolicy{}.set_stsep({0}), ConfigError);
}

TEST_CASE("invalid neuron parameters are configuration errors") {
  NeuronParams p;
  p.tau = 0.5;
  CHECK_THROWS_AS(p.validate(), ConfigError);
  p = NeuronParams{};
  p.v_threshold = 0.0;
  CHECK_THROWS_AS(p.validate(), ConfigError);
  p = NeuronParams{};
  p.surrogate_width = 0.0;
  CHECK_THROWS_AS(p.validate(), ConfigError);
}

TEST_CASE("lif_step shape mismatch is a usage error") {
  NeuronState st;
  st.v_prev = Tensor(Shape{2, 2});
  st.s_prev = Tensor(Shape{2, 2});
  st.fresh = false;
  CHECK_THROWS_AS(lif_step(Tensor(Shape{3, 2}), st, params()), UsageError);
}
