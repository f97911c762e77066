#include <doctest.h>

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <limits>

#include "nft/autodiff.hpp"

using namespace nft;
using namespace nft::ad;

TEST_CASE("basic gradients") {
  Tape t;
  Mat x(1, 1);
  x << 3.0;
  Var vx = t.leaf(x);
  Var loss = t.square(vx);
  t.backward(loss);
  CHECK(t.grad(vx)(0, 0) == doctest::Approx(6.0));

  // Stop-gradient: d/dx [sg(x) * x] = sg(x).
  Tape t2;
  Mat x2(1, 1);
  x2 << 2.0;
  Var v = t2.leaf(x2);
  Var l2 = t2.mul(t2.stop_grad(v), v);
  t2.backward(l2);
  CHECK(t2.grad(v)(0, 0) == doctest::Approx(2.0));
}

TEST_CASE("matmul against naive loops") {
  Rng rng(3);
  Mat a(4, 6), b(6, 5);
  for (int i = 0; i < a.size(); ++i) a.data()[i] = rng.normal();
  for (int i = 0; i < b.size(); ++i) b.data()[i] = rng.normal();
  Tape t;
  Var va = t.leaf(a), vb = t.leaf(b);
  Var vc = t.matmul(va, vb);
  for (int r = 0; r < 4; ++r)
    for (int c = 0; c < 5; ++c) {
      double want = 0.0;
      for (int k = 0; k < 6; ++k) want += a(r, k) * b(k, c);
      CHECK(t.value(vc)(r, c) == doctest::Approx(want).epsilon(1e-12));
    }
  CHECK_THROWS_AS(t.matmul(va, va), std::invalid_argument);
}

TEST_CASE("softmax rows with additive mask") {
  Tape t;
  Mat x(2, 4);
  x << 1.0, 1.0, 1.0, 1.0, 0.3, -2.0, 0.7, 1.9;
  Mat mask = Mat::Zero(2, 4);
  const double ninf = -std::numeric_limits<double>::infinity();
  mask(1, 2) = ninf;

  Var vx = t.leaf(x);
  Var p = t.softmax_rows(vx, &mask);
  for (int c = 0; c < 4; ++c) CHECK(t.value(p)(0, c) == doctest::Approx(0.25));
  CHECK(t.value(p)(1, 2) == 0.0);
  CHECK(t.value(p).row(1).sum() == doctest::Approx(1.0));

  // Random scalarization: masked entry receives exactly zero gradient.
  Mat w(2, 4);
  w << 0.3, -1.2, 2.0, 0.4, 1.0, 0.5, -0.7, 0.2;
  Var loss = t.sum(t.mul(p, t.leaf(w)));
  t.backward(loss);
  CHECK(t.grad(vx)(1, 2) == 0.0);
  CHECK(t.grad(vx)(0, 0) != 0.0);
}

TEST_CASE("layernorm of a constant row is zero") {
  Tape t;
  Mat x(1, 5);
  x.setConstant(3.7);
  Var y = t.layernorm_rows(t.leaf(x));
  for (int c = 0; c < 5; ++c) CHECK(std::abs(t.value(y)(0, c)) < 1e-9);
}

TEST_CASE("gradient checker on composite blocks") {
  Rng rng(11);
  ParamStore store;
  store.add_uniform("w1", 6, 6, rng);
  store.add_uniform("w2", 6, 1, rng);
  store.add("b", 1, 6);

  Mat input(3, 6);
  for (int i = 0; i < input.size(); ++i) input.data()[i] = rng.normal();

  // One-layer attention-ish block: softmax(XW1 X^T) X W2 with layernorm.
  const LossFn f = [&input](ParamStore& s, GradMap* grads) {
    Tape t;
    Var x = t.leaf(input);
    Var w1 = t.param(s, "w1");
    Var w2 = t.param(s, "w2");
    Var b = t.param(s, "b");
    Var xb = t.add_rowvec(x, b);
    Var logits = t.matmul(t.matmul(xb, w1), t.transpose(xb));
    Var attn = t.softmax_rows(logits);
    Var mixed = t.layernorm_rows(t.matmul(attn, xb));
    Var out = t.matmul(mixed, w2);
    Var loss = t.mean(t.mul(t.sigmoid(out), t.softplus(out)));
    if (grads) {
      t.backward(loss);
      t.param_grads(*grads);
    }
    return t.value(loss)(0, 0);
  };

  const auto report = grad_check(f, store);
  for (const auto& [name, err] : report) CHECK(err < 1e-4);

  // A corrupted gradient must be caught.
  const LossFn bad = [&f](ParamStore& s, GradMap* grads) {
    const double v = f(s, grads);
    if (grads) (*grads)["w2"].array() += 0.5;
    return v;
  };
  const auto bad_report = grad_check(bad, store);
  CHECK(bad_report.at("w2") > 1e-2);

  // Linear objective: checker error near machine epsilon.
  const LossFn lin = [](ParamStore& s, GradMap* grads) {
    Tape t;
    Var w = t.param(s, "w2");
    Var loss = t.sum(t.scale(w, 2.5));
    if (grads) {
      t.backward(loss);
      t.param_grads(*grads);
    }
    return t.value(loss)(0, 0);
  };
  const auto lin_report = grad_check(lin, store);
  CHECK(lin_report.at("w2") < 1e-9);
}

TEST_CASE("adamw update and schedule") {
  ParamStore store;
  store.add("p", 2, 2);
  store.params["p"] << 1.0, -2.0, 0.5, 3.0;
  const Mat before = store.params["p"];

  // No gradient signal, no decay: parameters untouched.
  GradMap zero;
  zero["p"] = Mat::Zero(2, 2);
  AdamWConfig cfg;
  cfg.weight_decay = 0.0;
  optimizer_step(store, zero, 1e-3, cfg);
  CHECK((store.params["p"] - before).norm() == 0.0);

  // Global-norm clip: gradient of norm 10 behaves like norm 1.
  ParamStore s1, s2;
  s1.add("p", 1, 1);
  s2.add("p", 1, 1);
  GradMap g1, g2;
  g1["p"] = Mat::Constant(1, 1, 10.0);
  g2["p"] = Mat::Constant(1, 1, 1.0);
  optimizer_step(s1, g1, 1e-3, cfg);
  optimizer_step(s2, g2, 1e-3, cfg);
  CHECK(s1.params["p"](0, 0) == doctest::Approx(s2.params["p"](0, 0)));

  GradMap nan;
  nan["p"] = Mat::Constant(2, 2, std::nan(""));
  CHECK_THROWS_AS(optimizer_step(store, nan, 1e-3, cfg), std::runtime_error);

  LrSchedule sched;
  sched.peak = 1.0;
  sched.floor = 0.1;
  sched.warmup_steps = 10;
  sched.total_steps = 110;
  CHECK(sched.lr(4) == doctest::Approx(0.5));
  CHECK(sched.lr(9) == doctest::Approx(1.0));
  CHECK(sched.lr(10) == doctest::Approx(1.0));
  CHECK(sched.lr(110) == doctest::Approx(0.1));
  CHECK(sched.lr(60) == doctest::Approx(0.55));
}

TEST_CASE("checkpoint round trip is bit exact") {
  Rng rng(29);
  ParamStore store;
  store.add_uniform("a", 3, 4, rng);
  store.add_uniform("nested.b", 5, 1, rng);
  store.adam_m["a"].setRandom();
  store.adam_v["nested.b"].setRandom();
  store.step = 42;

  const auto dir = std::filesystem::temp_directory_path() / "ckpt_rt_test";
  std::filesystem::create_directories(dir);
  save_checkpoint(store, dir.string());
  const auto loaded = load_checkpoint(dir.string());

  CHECK(loaded.step == 42);
  for (const auto& [name, m] : store.params) {
    REQUIRE(loaded.params.count(name) == 1);
    CHECK((loaded.params.at(name) - m).cwiseAbs().maxCoeff() == 0.0);
  }
  CHECK((loaded.adam_m.at("a") - store.adam_m.at("a")).cwiseAbs().maxCoeff() == 0.0);
  CHECK((loaded.adam_v.at("nested.b") - store.adam_v.at("nested.b"))
            .cwiseAbs()
            .maxCoeff() == 0.0);
  std::filesystem::remove_all(dir);
}
