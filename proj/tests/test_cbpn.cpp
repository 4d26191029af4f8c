// SPDX-License-Identifier: Apache-2.0
#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>
#include <cstring>
#include <random>

#include "anableps/cbpn.hpp"
#include "anableps/common.hpp"
#include "test_support.hpp"

using namespace anableps;
using namespace anableps::cbpn;

namespace {

// Random states with a chosen actual; the b row carries the next target.
Dataset synthetic(std::size_t n, std::uint64_t seed, auto actual_of) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> kbps(300.0, 6100.0);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  Dataset d;
  for (std::size_t i = 0; i < n; ++i) {
    Sample s;
    s.state.length = 4;
    s.state.values.resize(20);
    for (int c = 0; c < 4; ++c) {
      s.state.values[static_cast<std::size_t>(c)] = kbps(rng) / kKbpsScale;
      s.state.values[static_cast<std::size_t>(4 + c)] = unit(rng) < 0.2 ? 1.0 : 0.0;
      s.state.values[static_cast<std::size_t>(8 + c)] = unit(rng);
      s.state.values[static_cast<std::size_t>(12 + c)] = unit(rng);
      s.state.values[static_cast<std::size_t>(16 + c)] = (unit(rng) - 0.5) * 0.2;
    }
    s.next_target = s.state.values[3] * kKbpsScale;
    s.actual = actual_of(s, rng);
    s.session = static_cast<int>(i % 20);
    d.samples.push_back(std::move(s));
  }
  return d;
}

ModelConfig small_model() {
  ModelConfig m;
  m.conv_filters = 16;
  m.gru_hidden = 16;
  m.hidden = 16;
  m.error_filters = 8;
  return m;
}

std::vector<trace::ComplexityTrace> videos(int n, double duration, std::uint64_t seed) {
  std::vector<trace::ComplexityTrace> out;
  for (int i = 0; i < n; ++i) {
    out.push_back(trace::generate_synthetic_complexity_trace(
        {duration, 40.0 + 8.0 * i, 15.0 + 3.0 * i, 8.0, 25.0, 125, seed + static_cast<std::uint64_t>(i)}));
  }
  return out;
}

}  // namespace

TEST_CASE("state assembly") {
  auto video = testing::flat_video(60.0, 40.0, 20.0);
  std::vector<double> b(10, 3050.0);
  SUBCASE("constant history") {
    auto s = assemble_state(b, b, 3050.0, 6, video, {});
    for (double v : s.row(0)) CHECK(v == 0.5);
    for (double v : s.row(4)) CHECK(v == 0.0);
    for (double v : s.row(2)) CHECK(v == doctest::Approx(0.5));
    for (double v : s.row(3)) CHECK(v == doctest::Approx(0.5));
  }
  SUBCASE("I-frame flags follow the 5 s schedule, oldest first") {
    auto at8 = assemble_state(b, b, 3050.0, 8, video, {});
    CHECK(std::vector<double>(at8.row(1).begin(), at8.row(1).end()) == std::vector<double>{1, 0, 0, 0});
    auto at5 = assemble_state(b, b, 3050.0, 5, video, {});
    CHECK(std::vector<double>(at5.row(1).begin(), at5.row(1).end()) == std::vector<double>{0, 0, 0, 1});
  }
  SUBCASE("static content gives zero si/ti rows") {
    auto still = testing::flat_video(0.0, 0.0, 20.0);
    auto s = assemble_state(b, b, 3050.0, 6, still, {});
    for (double v : s.row(2)) CHECK(v == 0.0);
    for (double v : s.row(3)) CHECK(v == 0.0);
  }
  SUBCASE("column order and signs") {
    std::vector<double> t = {1000, 2000, 3000, 4000, 5000, 6000};
    std::vector<double> a = {1100, 1900, 3000, 4100, 4900, 6100};
    auto s = assemble_state(t, a, 610.0, 5, video, {});
    CHECK(std::vector<double>(s.row(0).begin(), s.row(0).end()) ==
          std::vector<double>{3000 / 6100.0, 4000 / 6100.0, 5000 / 6100.0, 610 / 6100.0});
    // Slots 1..4: 2000-1900, 3000-3000, 4000-4100, 5000-4900.
    CHECK(s.row(4)[0] == doctest::Approx(100 / 6100.0));
    CHECK(s.row(4)[1] == 0.0);
    CHECK(s.row(4)[2] == doctest::Approx(-100 / 6100.0));
    CHECK(s.row(4)[3] == doctest::Approx(100 / 6100.0));
  }
  SUBCASE("window length scales every row") {
    StateLayout six{6};
    auto s = assemble_state(b, b, 3050.0, 7, video, six);
    CHECK(s.values.size() == 30);
  }
  CHECK_THROWS_AS(assemble_state(b, b, 3050.0, 3, video, {}), ValidationError);
  CHECK_THROWS_AS(assemble_state(std::vector<double>(2, 1.0), b, 3050.0, 5, video, {}),
                  ValidationError);
  CHECK_THROWS_AS((StateLayout{3}.validate()), ValidationError);
}

TEST_CASE("range prediction") {
  auto d = synthetic(200, 1, [](const Sample&, auto&) { return 1000.0; });
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    CbpnModel m(small_model(), seed);
    for (const auto& s : d.samples) {
      auto r = m.predict(s.state);
      CHECK(r.e >= 0.0);
      if (r.e > 0.0) CHECK(r.lower() < r.upper());
    }
  }
  CbpnModel m(small_model(), 3);
  auto w = m.baseline().layer_params("v");
  std::fill(w.begin(), w.end(), 0.0);
  w[w.size() - 1] = 0.37;
  for (const auto& s : d.samples) CHECK(m.predict(s.state).v == doctest::Approx(0.37 * 6100.0).epsilon(1e-12));
}

TEST_CASE("metrics agree with a straight-loop oracle") {
  std::mt19937_64 rng(99);
  std::uniform_real_distribution<double> kbps(300.0, 6100.0);
  std::uniform_real_distribution<double> err(0.0, 1500.0);
  std::vector<BitrateRange> p(1000);
  std::vector<double> a(1000);
  for (std::size_t i = 0; i < 1000; ++i) {
    p[i] = {kbps(rng), err(rng)};
    a[i] = kbps(rng);
  }
  auto m = compute_metrics(p, a);
  double mad = 0.0, in = 0.0, mv = 0.0, ma = 0.0;
  for (std::size_t i = 0; i < 1000; ++i) {
    mad += std::abs(p[i].v - a[i]) / 6100.0;
    in += (a[i] >= p[i].v - p[i].e && a[i] <= p[i].v + p[i].e) ? 1.0 : 0.0;
    mv += p[i].v;
    ma += a[i];
  }
  mv /= 1000.0;
  ma /= 1000.0;
  double num = 0.0, dv = 0.0, da = 0.0;
  for (std::size_t i = 0; i < 1000; ++i) {
    num += (p[i].v - mv) * (a[i] - ma);
    dv += (p[i].v - mv) * (p[i].v - mv);
    da += (a[i] - ma) * (a[i] - ma);
  }
  CHECK(std::abs(m.mad - mad / 1000.0) < 1e-12);
  CHECK(std::abs(m.cr - in / 1000.0) < 1e-12);
  REQUIRE(m.pcc.has_value());
  CHECK(std::abs(*m.pcc - num / std::sqrt(dv * da)) < 1e-12);

  // Widening every range never lowers the cover ratio.
  for (auto& r : p) r.e *= 1.5;
  CHECK(compute_metrics(p, a).cr >= m.cr);
}

TEST_CASE("metric worked examples") {
  std::vector<BitrateRange> p(4, {5.0, 1.0});
  CHECK(compute_metrics(p, std::vector<double>{5.5, 6.5, 4.2, 4.8}).cr == 0.75);
  std::vector<BitrateRange> exact = {{1000, 0}, {2000, 5}, {3000, 0}};
  auto m = compute_metrics(exact, std::vector<double>{1000, 2000, 3000});
  CHECK(m.mad == 0.0);
  CHECK(m.cr == 1.0);
  CHECK(*m.pcc == doctest::Approx(1.0));
  std::vector<BitrateRange> flat = {{1000, 0}, {1000, 0}};
  CHECK_FALSE(compute_metrics(flat, std::vector<double>{900, 1100}).pcc.has_value());
  CHECK_THROWS_AS(compute_metrics(std::vector<BitrateRange>{}, std::vector<double>{}), ValidationError);
}

TEST_CASE("baseline training") {
  TrainConfig tc;
  tc.epochs = 15;
  tc.adam.lr = 3e-3;
  SUBCASE("constant actual") {
    auto d = synthetic(2000, 2, [](const Sample&, auto&) { return 2500.0; });
    CbpnModel m(small_model(), 1);
    TrainConfig fast = tc;
    fast.epochs = 20;
    fast.adam.lr = 1e-2;
    fast.final_lr_fraction = 0.01;
    train_baseline(m, d, fast);
    double mean_v = 0.0;
    double mean_abs = 0.0;
    for (const auto& s : d.samples) {
      const double v = m.predict(s.state).v;
      mean_v += v / 2000.0;
      mean_abs += std::abs(v - 2500.0) / 2000.0;
    }
    CHECK(std::abs(mean_v - 2500.0) < 25.0);
    CHECK(mean_abs < 25.0);
  }
  SUBCASE("copy task and shuffled-label control") {
    auto copy = [](const Sample& s, auto&) { return s.next_target; };
    auto [train, test] = synthetic(3000, 3, copy).split_by_session();
    CbpnModel m(small_model(), 2);
    auto curve = train_baseline(m, train, tc);
    CHECK(curve.back() < curve.front());
    CHECK(eval_metrics(m, test).mad < 0.02);

    // Same inputs, labels permuted across samples.
    std::mt19937_64 rng(5);
    auto shuffled = train;
    std::vector<double> labels;
    for (const auto& s : shuffled.samples) labels.push_back(s.actual);
    std::shuffle(labels.begin(), labels.end(), rng);
    double mean = 0.0;
    for (std::size_t i = 0; i < labels.size(); ++i) {
      shuffled.samples[i].actual = labels[i];
      mean += labels[i];
    }
    mean /= static_cast<double>(labels.size());
    CbpnModel control(small_model(), 2);
    train_baseline(control, shuffled, tc);
    std::vector<BitrateRange> const_pred(test.size(), {mean, 0.0});
    std::vector<double> actual;
    for (const auto& s : test.samples) actual.push_back(s.actual);
    const double floor_mad = compute_metrics(const_pred, actual).mad;
    CHECK(eval_metrics(control, test).mad >= 0.9 * floor_mad);
  }
  CHECK_THROWS_AS(train_baseline(*std::make_unique<CbpnModel>(small_model()), Dataset{}, tc), ValidationError);
}

TEST_CASE("error head training") {
  TrainConfig tc;
  tc.epochs = 20;
  tc.adam.lr = 3e-3;
  SUBCASE("uniform residuals give the 0.85 quantile") {
    const double base = 3000.0;
    const double u = 600.0;
    auto d = synthetic(3000, 4, [&](const Sample&, auto& rng) {
      return base + std::uniform_real_distribution<double>(0.0, u)(rng);
    });
    CbpnModel m(small_model(), 4);
    auto v = m.baseline().layer_params("v");
    std::fill(v.begin(), v.end(), 0.0);
    v[v.size() - 1] = base / kKbpsScale;
    const auto before = m.baseline().params();
    train_error(m, d, tc);
    CHECK(std::memcmp(before.data(), m.baseline().params().data(), before.size() * sizeof(double)) == 0);
    double mean_e = 0.0;
    for (std::size_t i = 0; i < 200; ++i) mean_e += m.predict(d.samples[i].state).e;
    mean_e /= 200.0;
    CHECK(mean_e == doctest::Approx(0.85 * u).epsilon(0.1));
    const double cr = eval_metrics(m, d).cr;
    CHECK(cr >= 0.80);
    CHECK(cr <= 0.90);
  }
  SUBCASE("zero residuals shrink e") {
    auto d = synthetic(2000, 5, [](const Sample&, auto&) { return 3000.0; });
    CbpnModel m(small_model(), 5);
    auto v = m.baseline().layer_params("v");
    std::fill(v.begin(), v.end(), 0.0);
    v[v.size() - 1] = 3000.0 / kKbpsScale;
    const double e0 = m.predict(d.samples[0].state).e;
    train_error(m, d, tc);
    CHECK(m.predict(d.samples[0].state).e < 0.1 * e0);
    CHECK(m.predict(d.samples[0].state).e < 30.0);
  }
  TrainConfig bad = tc;
  bad.coverage = 1.0;
  CbpnModel m(small_model());
  CHECK_THROWS_AS(train_error(m, synthetic(10, 1, [](const Sample&, auto&) { return 1.0; }), bad),
                  ValidationError);
}

TEST_CASE("noise-free encoder is predicted within 10% for 90% of held-out states") {
  DatasetConfig dc;
  dc.encoder.fluct.sigma = 0.0;
  dc.encoder.rate_lag = false;
  dc.sessions_per_video = 8;
  dc.seed = 7;
  auto vids = videos(10, 120.0, 100);
  auto [train, test] = build_dataset(vids, dc).split_by_session();
  REQUIRE(test.size() > 100);
  CbpnModel m(small_model(), 7);
  TrainConfig tc;
  tc.epochs = 20;
  tc.adam.lr = 3e-3;
  tc.final_lr_fraction = 0.01;
  train_baseline(m, train, tc);
  std::size_t close = 0;
  for (const auto& s : test.samples) {
    close += std::abs(m.predict(s.state).v - s.actual) / s.actual < 0.1 ? 1 : 0;
  }
  CHECK(static_cast<double>(close) / static_cast<double>(test.size()) >= 0.9);
}

TEST_CASE("dataset construction, persistence and splitting") {
  DatasetConfig dc;
  dc.seed = 3;
  auto vids = videos(2, 30.0, 1);
  auto d = build_dataset(vids, dc);
  CHECK(d.size() == 2u * 3u * (30u - 4u));
  for (const auto& s : d.samples) {
    CHECK(s.next_target >= 300.0);
    CHECK(s.next_target <= 6100.0);
    CHECK(s.state.row(0)[3] == s.next_target / kKbpsScale);
  }
  auto again = build_dataset(vids, dc);
  CHECK(again.samples[17].actual == d.samples[17].actual);

  const auto dir = testing::temp_dir("cbpn_data");
  save_dataset(d, dir / "d.csv");
  auto back = load_dataset(dir / "d.csv");
  REQUIRE(back.size() == d.size());
  for (std::size_t i = 0; i < d.size(); ++i) {
    CHECK(back.samples[i].state.values == d.samples[i].state.values);
    CHECK(back.samples[i].actual == d.samples[i].actual);
    CHECK(back.samples[i].session == d.samples[i].session);
  }
  auto [train, test] = d.split_by_session();
  CHECK(train.size() + test.size() == d.size());
}

TEST_CASE("model checkpoint round trip") {
  CbpnModel m(small_model(), 8);
  const auto dir = testing::temp_dir("cbpn_ckpt");
  m.save(dir / "m.json");
  auto back = CbpnModel::load(dir / "m.json");
  auto d = synthetic(20, 9, [](const Sample&, auto&) { return 1.0; });
  for (const auto& s : d.samples) {
    CHECK(back.predict(s.state).v == m.predict(s.state).v);
    CHECK(back.predict(s.state).e == m.predict(s.state).e);
  }
}
