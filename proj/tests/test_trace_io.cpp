// SPDX-License-Identifier: Apache-2.0
#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>
#include <fstream>
#include <random>

#include "anableps/common.hpp"
#include "anableps/trace_io.hpp"
#include "test_support.hpp"

using namespace anableps;
using namespace anableps::trace;

namespace {

void write(const std::filesystem::path& p, const std::string& s) {
  std::ofstream(p, std::ios::binary) << s;
}

double mean_of(const NetworkTrace& t) {
  double acc = 0.0;
  for (const auto& s : t.samples()) acc += s.kbps;
  return acc / static_cast<double>(t.size());
}

double std_of(const NetworkTrace& t) {
  const double mu = mean_of(t);
  double acc = 0.0;
  for (const auto& s : t.samples()) acc += (s.kbps - mu) * (s.kbps - mu);
  return std::sqrt(acc / static_cast<double>(t.size()));
}

// Straight-loop Sobel oracle: explicit kernels, two-pass variance.
double oracle_si(const std::vector<double>& img, int w, int h) {
  const int kx[3][3] = {{-1, 0, 1}, {-2, 0, 2}, {-1, 0, 1}};
  const int ky[3][3] = {{-1, -2, -1}, {0, 0, 0}, {1, 2, 1}};
  std::vector<double> mags;
  for (int y = 1; y < h - 1; ++y) {
    for (int x = 1; x < w - 1; ++x) {
      double gx = 0.0;
      double gy = 0.0;
      for (int j = -1; j <= 1; ++j) {
        for (int i = -1; i <= 1; ++i) {
          const double v = img[static_cast<std::size_t>((y + j) * w + (x + i))];
          gx += kx[j + 1][i + 1] * v;
          gy += ky[j + 1][i + 1] * v;
        }
      }
      mags.push_back(std::hypot(gx, gy));
    }
  }
  double mu = 0.0;
  for (double m : mags) mu += m;
  mu /= static_cast<double>(mags.size());
  double var = 0.0;
  for (double m : mags) var += (m - mu) * (m - mu);
  return std::sqrt(var / static_cast<double>(mags.size()));
}

}  // namespace

TEST_CASE("network trace ingestion on the 0.5 s grid") {
  auto t = parse_network_trace("time_s,bandwidth_kbps\n0.0,6500\n0.5,6500\n");
  REQUIRE(t.size() == 2);
  CHECK(t.samples()[0].kbps == 6500.0);
  CHECK(t.samples()[1].time_s == 0.5);
}

TEST_CASE("coarser source granularity is linearly interpolated") {
  auto t = parse_network_trace("time_s,bandwidth_kbps\n0,4000\n1,6000\n");
  REQUIRE(t.size() == 3);
  CHECK(t.samples()[0].kbps == 4000.0);
  CHECK(t.samples()[1].time_s == 0.5);
  CHECK(t.samples()[1].kbps == 5000.0);
  CHECK(t.samples()[2].kbps == 6000.0);
}

TEST_CASE("network trace validation and parse errors") {
  CHECK_THROWS_AS(parse_network_trace("time_s,bandwidth_kbps\n0,100\n0.5,-10\n"),
                  ValidationError);
  CHECK_THROWS_AS(parse_network_trace("time_s,bandwidth_kbps\n0,100\n0,100\n"),
                  ValidationError);
  CHECK_THROWS_AS(parse_network_trace("time_s,bandwidth_kbps\n0,100\n0.5,abc\n"),
                  ParseError);
  CHECK_THROWS_AS(parse_network_trace("time_s,bandwidth_kbps\n0,100,3\n"), ParseError);
  CHECK_THROWS_AS(parse_network_trace("t,bw\n0,100\n0.5,100\n"), ParseError);
  CHECK_THROWS_AS(parse_network_trace("time_s,bandwidth_kbps\n0,100\n"),
                  ValidationError);
}

TEST_CASE("save/load round trip reproduces grid samples exactly") {
  std::mt19937_64 rng(11);
  std::uniform_real_distribution<double> bw(50.0, 20000.0);
  const auto dir = testing::temp_dir("trace_roundtrip");
  for (int trial = 0; trial < 50; ++trial) {
    std::vector<BandwidthSample> s;
    const int n = 2 + trial;
    for (int i = 0; i < n; ++i) s.push_back({0.5 * i + 3.0, bw(rng)});
    NetworkTrace t(s);
    save_network_trace(t, dir / "t.csv");
    auto back = load_network_trace(dir / "t.csv");
    REQUIRE(back.size() == t.size());
    for (std::size_t i = 0; i < t.size(); ++i) {
      CHECK(back.samples()[i].time_s == t.samples()[i].time_s);
      CHECK(back.samples()[i].kbps == t.samples()[i].kbps);
    }
  }
}

TEST_CASE("link service integrates piecewise-constant bandwidth") {
  auto t = testing::step_trace(8000.0, 4000.0, 1.0, 4.0);
  // 1000 bytes at 8 Mbps takes 1 ms.
  CHECK(t.finish_time(0.0, 1000.0) == doctest::Approx(0.001));
  // Straddling the step: 0.999 s leaves 1 ms at 8 Mbps (1000 bytes), the
  // remaining 1000 bytes go at 4 Mbps (2 ms).
  CHECK(t.finish_time(0.999, 2000.0) == doctest::Approx(1.002));
  CHECK(t.min_kbps_in(0.0, 1.0) == 4000.0);
  CHECK(t.min_kbps_in(0.0, 0.5) == 8000.0);
}

TEST_CASE("synthetic traces") {
  SUBCASE("zero variance square wave is constant") {
    auto t = generate_synthetic_network_trace({120.0, 6000.0, 0.0,
                                               TraceModel::kSquareWave, 3});
    CHECK(t.size() == 240);
    for (const auto& s : t.samples()) CHECK(s.kbps == 6000.0);
  }
  SUBCASE("markov-step statistics for seed 7") {
    auto t = generate_synthetic_network_trace({300.0, 4000.0, 1500.0,
                                               TraceModel::kMarkovStep, 7});
    const double mu = mean_of(t);
    const double sd = std_of(t);
    CHECK(mu >= 3600.0);
    CHECK(mu <= 4400.0);
    CHECK(sd >= 1200.0);
    CHECK(sd <= 1800.0);
  }
  SUBCASE("same spec and seed is byte identical") {
    TraceGenSpec spec{300.0, 4000.0, 1500.0, TraceModel::kAr1, 42};
    CHECK(format_network_trace(generate_synthetic_network_trace(spec)) ==
          format_network_trace(generate_synthetic_network_trace(spec)));
    spec.seed = 43;
    CHECK(format_network_trace(generate_synthetic_network_trace(spec)) !=
          format_network_trace(generate_synthetic_network_trace(
              {300.0, 4000.0, 1500.0, TraceModel::kAr1, 42})));
  }
  SUBCASE("statistics hold across models and seeds") {
    for (auto model : {TraceModel::kMarkovStep, TraceModel::kAr1,
                       TraceModel::kSquareWave}) {
      for (std::uint64_t seed = 0; seed < 20; ++seed) {
        const double mean = 1000.0 + 250.0 * static_cast<double>(seed);
        const double sd = 0.4 * mean;
        auto t = generate_synthetic_network_trace({120.0, mean, sd, model, seed});
        CHECK(std::abs(mean_of(t) - mean) <= 0.1 * mean);
        CHECK(std::abs(std_of(t) - sd) <= 0.2 * sd);
        for (const auto& s : t.samples()) CHECK(s.kbps >= 100.0);
      }
    }
  }
  SUBCASE("invalid spec") {
    CHECK_THROWS_AS(generate_synthetic_network_trace({0.0, 1000.0, 10.0,
                                                      TraceModel::kAr1, 1}),
                    ValidationError);
    CHECK_THROWS_AS(generate_synthetic_network_trace({10.0, 1000.0, 1000.0,
                                                      TraceModel::kAr1, 1}),
                    ValidationError);
  }
}

TEST_CASE("complexity trace ingestion") {
  auto c = parse_complexity_trace("time_s,si,ti\n0.0,30,10\n0.25,30,10\n", nullptr);
  CHECK(c.samples().size() == 2);
  CHECK_THROWS_AS(parse_complexity_trace("time_s,si,ti\n0.0,-1,10\n", nullptr),
                  ValidationError);
  CHECK_THROWS_AS(parse_complexity_trace("time_s,si,ti\n0.0,1\n", nullptr), ParseError);
}

TEST_CASE("I-frame sidecar with a 5 s GoP") {
  const auto dir = testing::temp_dir("sidecar");
  std::string csv = "time_s,si,ti\n";
  for (int i = 0; i < 60; ++i) csv += std::to_string(0.25 * i) + ",40,20\n";
  write(dir / "clip.csv", csv);
  write(dir / "clip.iframes.csv",
        "# meta: fps=25,gop_frames=125\niframe_times_s\n0\n5\n10\n");
  auto c = load_complexity_trace(dir / "clip.csv");
  CHECK(c.gop_seconds() == doctest::Approx(5.0));
  CHECK(c.iframe_times().size() == 3);
  CHECK(c.is_iframe(5.0));
  CHECK_FALSE(c.is_iframe(5.04));
  CHECK(c.has_iframe_in(4.0, 6.0));
  CHECK_FALSE(c.has_iframe_in(6.0, 10.0));

  write(dir / "clip.iframes.csv",
        "# meta: fps=25,gop_frames=125\niframe_times_s\n0\n4\n10\n");
  CHECK_THROWS_AS(load_complexity_trace(dir / "clip.csv"), ValidationError);

  // Save/load keeps the schedule.
  auto gen = generate_synthetic_complexity_trace({30.0, 50.0, 20.0, 8.0, 25.0, 125, 9});
  save_complexity_trace(gen, dir / "gen.csv");
  auto back = load_complexity_trace(dir / "gen.csv");
  CHECK(back.iframe_times() == gen.iframe_times());
  CHECK(back.samples().size() == gen.samples().size());
  CHECK(back.samples()[17].ti == gen.samples()[17].ti);
}

TEST_CASE("SI/TI on degenerate content") {
  FrameSequence seq{32, 16, 25.0, {}};
  for (int i = 0; i < 25; ++i) seq.frames.emplace_back(32 * 16, std::uint8_t{128});
  auto out = compute_si_ti(seq);
  REQUIRE(out.size() == 4);
  for (const auto& s : out) {
    CHECK(s.si == 0.0);
    CHECK(s.ti == 0.0);
  }

  FrameSequence edge{16, 16, 4.0, {}};
  std::vector<std::uint8_t> plane(16 * 16, 0);
  for (int y = 0; y < 16; ++y) {
    for (int x = 8; x < 16; ++x) plane[static_cast<std::size_t>(y * 16 + x)] = 200;
  }
  edge.frames = {plane, plane};
  auto e = compute_si_ti(edge);
  REQUIRE(e.size() == 2);
  CHECK(e[0].si > 0.0);
  CHECK(e[1].ti == 0.0);
  CHECK(e[1].time_s == 0.25);
}

TEST_CASE("SI of a checkerboard matches a straight-loop Sobel oracle") {
  FrameSequence seq{8, 8, 4.0, {}};
  std::vector<std::uint8_t> plane(64);
  std::vector<double> as_double(64);
  for (int y = 0; y < 8; ++y) {
    for (int x = 0; x < 8; ++x) {
      const auto v = static_cast<std::uint8_t>(((x + y) % 2) ? 255 : 0);
      plane[static_cast<std::size_t>(y * 8 + x)] = v;
      as_double[static_cast<std::size_t>(y * 8 + x)] = v;
    }
  }
  seq.frames = {plane};
  auto out = compute_si_ti(seq);
  REQUIRE(out.size() == 1);
  CHECK(std::abs(out[0].si - oracle_si(as_double, 8, 8)) < 1e-6);

  // A non-uniform pattern exercises the variance path too.
  std::mt19937_64 rng(5);
  std::uniform_int_distribution<int> px(0, 255);
  for (int y = 0; y < 8; ++y) {
    for (int x = 0; x < 8; ++x) {
      const auto v = static_cast<std::uint8_t>(px(rng));
      plane[static_cast<std::size_t>(y * 8 + x)] = v;
      as_double[static_cast<std::size_t>(y * 8 + x)] = v;
    }
  }
  seq.frames = {plane};
  CHECK(std::abs(compute_si_ti(seq)[0].si - oracle_si(as_double, 8, 8)) < 1e-6);
}

TEST_CASE("SI/TI length, sign and downsampling properties") {
  std::mt19937_64 rng(3);
  std::uniform_int_distribution<int> px(0, 255);
  for (int n : {1, 3, 7, 25, 26, 51}) {
    for (double fps : {4.0, 10.0, 25.0, 30.0}) {
      FrameSequence seq{12, 10, fps, {}};
      for (int i = 0; i < n; ++i) {
        std::vector<std::uint8_t> f(120);
        for (auto& v : f) v = static_cast<std::uint8_t>(px(rng));
        seq.frames.push_back(f);
      }
      auto out = compute_si_ti(seq, {6, 5, 4.0});
      CHECK(out.size() == static_cast<std::size_t>(std::ceil(n * 4.0 / fps - 1e-9)));
      for (const auto& s : out) {
        CHECK(s.si >= 0.0);
        CHECK(s.ti >= 0.0);
      }
    }
  }
  // 2x2 area averaging.
  std::vector<std::uint8_t> plane = {0, 2, 4, 6, 0, 2, 4, 6, 10, 10, 20, 20, 10, 10, 20, 20};
  auto down = detail::area_downsample(plane, 4, 4, 2, 2);
  CHECK(down == std::vector<double>{1.0, 5.0, 10.0, 20.0});

  FrameSequence bad{4, 4, 25.0, {std::vector<std::uint8_t>(16), std::vector<std::uint8_t>(15)}};
  CHECK_THROWS_AS(compute_si_ti(bad), ValidationError);
}
