#include <algorithm>
#include <cmath>
#include <random>

#include "leobed/predict.hpp"
#include "support.hpp"

using namespace leobed;
using namespace leobed::predict;

namespace {

constexpr UnixMs kT0 = 1'709'251'200'000;
const orbital::GroundSite kSite{47.61, -122.33, 50.0};

// y_t from a recurrence over the last five values, rows via history_features.
template <class F>
Dataset recurrence(int n, double y0, F next, std::uint64_t seed = 1, double noise = 0) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> eps(0.0, noise > 0 ? noise : 1.0);
  std::vector<double> s(5, y0);
  for (int i = 0; i < n + 5; ++i) s.push_back(next(s) + (noise > 0 ? eps(rng) : 0.0));
  Dataset d;
  for (std::size_t i = 5; i < s.size(); ++i) {
    const std::vector<double> hist{s[i - 1], s[i - 2], s[i - 3], s[i - 4], s[i - 5]};
    d.add(history_features(hist, kT0 + static_cast<UnixMs>(i) * 1000), s[i]);
  }
  return d;
}

struct NaiveReport {
  double mape, rmse, w5, w10;
};

NaiveReport naive_metrics(const std::vector<double>& p, const std::vector<double>& a) {
  NaiveReport r{0, 0, 0, 0};
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double e = std::fabs(p[i] - a[i]);
    r.mape += 100.0 * e / a[i];
    r.rmse += (p[i] - a[i]) * (p[i] - a[i]);
    r.w5 += (e / a[i] <= 0.05) ? 1 : 0;
    r.w10 += (e / a[i] <= 0.10) ? 1 : 0;
  }
  const double n = static_cast<double>(a.size());
  return {r.mape / n, std::sqrt(r.rmse / n), 100.0 * r.w5 / n, 100.0 * r.w10 / n};
}

std::vector<terminal::TelemetrySample> trace(std::uint64_t seed, int seconds) {
  terminal::TerminalModelConfig cfg;
  cfg.rng_seed = seed;
  terminal::TerminalSim sim(cfg, kSite, kT0);
  return sim.run(seconds);
}

}  // namespace

TEST_CASE("feature layout") {
  CHECK(Layout{8}.dim() == 3 + 3 * 8 + 2 + 5 + 1);
  CHECK(Layout{4}.dim() == 3 + 3 * 4 + 2 + 5 + 1);
  CHECK(Layout{8}.names().size() == Layout{8}.dim());
  CHECK(Layout{8}.names()[Layout{8}.history(1)] == "h1");
  CHECK(Layout{8}.names()[Layout{8}.time()] == "second_of_day");
}

TEST_CASE("assemble features with padding") {
  const auto samples = trace(3, 30);
  const UnixMs t = samples[20].ts_ms;

  // Keep only the two highest satellites so exactly two are visible.
  const auto shell = orbital::walker_shell({}, kT0);
  orbital::OrbitalContext full{kSite, shell, 25.0};
  const auto vis = full.visible(t);
  REQUIRE(vis.size() >= 2);
  std::vector<orbital::TleRecord> two;
  for (const auto& rec : shell) {
    if (rec.name == vis[0].sat_id || rec.name == vis[1].sat_id) two.push_back(rec);
  }
  REQUIRE(two.size() == 2);
  orbital::OrbitalContext ctx{kSite, two, 25.0};

  const auto f = assemble_features(samples, &ctx, t, Target::LatencyMs, 4);
  const Layout l{4};
  REQUIRE(f.values.size() == l.dim());
  CHECK(f.slot_valid == std::vector<bool>{true, true, false, false});
  CHECK(f.values[l.sat(0) + 1] >= f.values[l.sat(1) + 1]);
  CHECK(f.values[l.sat(0) + 1] == doctest::Approx(vis[0].elevation_deg));
  for (int slot = 2; slot < 4; ++slot) {
    for (int c = 0; c < 3; ++c) CHECK(f.values[l.sat(slot) + static_cast<std::size_t>(c)] == kPad);
  }
  CHECK(f.values[0] == kSite.latitude_deg);
  for (int lag = 1; lag <= 5; ++lag) CHECK(f.values[l.history(lag)] == *samples[static_cast<std::size_t>(20 - lag)].pop_latency_ms);
  CHECK(f.values[l.terminal()] == samples[19].azimuth_deg);
  CHECK(f.values[l.time()] == doctest::Approx(static_cast<double>((t / 1000) % 86400)));

  const auto again = assemble_features(samples, &ctx, t, Target::LatencyMs, 4);
  CHECK(again.values == f.values);
  CHECK(again.slot_valid == f.slot_valid);

  CHECK_THROWS_CODE(assemble_features(samples, &ctx, samples[3].ts_ms), ErrorCode::InsufficientHistory);
  auto gap = samples;
  gap[18].pop_latency_ms.reset();
  CHECK_THROWS_CODE(assemble_features(gap, nullptr, t), ErrorCode::InsufficientHistory);
}

TEST_CASE("throughput metric from counters") {
  terminal::TerminalModelConfig cfg;
  cfg.rng_seed = 2;
  cfg.header_overhead_bps = 0;
  terminal::TerminalSim sim(cfg, kSite, kT0);
  sim.inject_user_traffic(8e6, kT0, 60'000);
  const auto s = sim.run(40);
  const auto m = metric_series(s, Target::ThroughputKbps);
  CHECK_FALSE(m[0]);
  for (std::size_t i = 5; i < 35; ++i) {
    REQUIRE(m[i]);
    CHECK(*m[i] == doctest::Approx(8000).epsilon(0.01));
  }
  const auto d = build_dataset(s, nullptr, Target::ThroughputKbps, 8);
  CHECK(d.size() > 25);
  CHECK(d.x[10][d.layout.history(1)] == doctest::Approx(8000).epsilon(0.01));
}

TEST_CASE("dataset csv round trip and temporal split") {
  TempDir tmp;
  const auto samples = trace(4, 200);
  const auto d = build_dataset(samples, nullptr, Target::LatencyMs, 2);
  REQUIRE(d.size() > 150);
  const auto path = (tmp.path / "ds.csv").string();
  write_dataset_csv(path, d);
  const auto back = read_dataset_csv(path);
  CHECK(back.layout.k == 2);
  CHECK(back.ts == d.ts);
  CHECK(back.y == d.y);
  CHECK(back.x == d.x);

  const auto [train, test] = temporal_split(d, 19.0 / 24.0);
  CHECK(train.size() + test.size() == d.size());
  CHECK(train.ts.back() < test.ts.front());
  CHECK(*std::max_element(train.ts.begin(), train.ts.end()) <= *std::min_element(test.ts.begin(), test.ts.end()));

  auto shuffled = d;
  std::swap(shuffled.ts[0], shuffled.ts[5]);
  CHECK_THROWS_CODE(temporal_split(shuffled, 0.5), ErrorCode::InvalidArgument);
}

TEST_CASE("persistence and harmonic mean") {
  const auto d = recurrence(50, 10, [](const std::vector<double>& s) { return s.back() + 1; });
  PersistenceModel p(d.layout);
  HarmonicMeanModel h(d.layout);
  for (std::size_t i = 0; i < d.size(); ++i) {
    CHECK(p.predict(d.x[i]) == d.x[i][d.layout.history(1)]);
    double inv = 0;
    for (int lag = 1; lag <= 5; ++lag) inv += 1.0 / d.x[i][d.layout.history(lag)];
    CHECK(h.predict(d.x[i]) == doctest::Approx(5.0 / inv));
  }
  CHECK_THROWS_CODE(p.predict(std::vector<double>(3, 1.0)), ErrorCode::InvalidArgument);
}

TEST_CASE("ridge AR recovers an exact AR(1)") {
  const double a = 0.8, c = 7.0;
  const auto d = recurrence(400, 100, [&](const std::vector<double>& s) { return a * s.back() + c; });
  FitOptions o;
  o.ar_order = 1;
  o.ridge_lambda = 0;
  const auto m = RidgeArModel::fit(d, o);

  // Closed-form simple regression as the oracle.
  double mx = 0, my = 0;
  const auto n = static_cast<double>(d.size());
  for (std::size_t i = 0; i < d.size(); ++i) {
    mx += d.x[i][d.layout.history(1)];
    my += d.y[i];
  }
  mx /= n;
  my /= n;
  double sxy = 0, sxx = 0;
  for (std::size_t i = 0; i < d.size(); ++i) {
    const double dx = d.x[i][d.layout.history(1)] - mx;
    sxy += dx * (d.y[i] - my);
    sxx += dx * dx;
  }
  const double slope = sxy / sxx;
  CHECK(std::fabs(slope - a) < 1e-6);
  CHECK(std::fabs(m->lag_coefficient(1) - a) < 1e-6);
  CHECK(std::fabs(m->lag_coefficient(1) - slope) < 1e-9);
  CHECK(std::fabs(m->intercept() - c) < 1e-4);
}

TEST_CASE("ridge AR(2) with noise") {
  const auto d = recurrence(
      5000, 50, [](const std::vector<double>& s) { return 0.5 * s[s.size() - 1] + 0.3 * s[s.size() - 2] + 10; }, 3,
      1.0);
  FitOptions o;
  o.ar_order = 5;
  o.ridge_lambda = 1e-6;
  const auto m = RidgeArModel::fit(d, o);
  CHECK(m->lag_coefficient(1) == doctest::Approx(0.5).epsilon(0.06));
  CHECK(m->lag_coefficient(2) == doctest::Approx(0.3).epsilon(0.1));
  CHECK(std::fabs(m->lag_coefficient(5)) < 0.05);
}

TEST_CASE("ridge degenerate designs") {
  const auto flat = recurrence(100, 42, [](const std::vector<double>&) { return 42.0; });
  CHECK_THROWS_CODE(RidgeArModel::fit(flat, {}), ErrorCode::DegenerateDesign);

  // Two identical lag columns with no penalty.
  auto ramp = recurrence(100, 1, [](const std::vector<double>& s) { return 0.9 * s.back() + 3; }, 4, 1.0);
  for (auto& row : ramp.x) row[ramp.layout.history(2)] = row[ramp.layout.history(1)];
  FitOptions o;
  o.ridge_lambda = 0;
  CHECK_THROWS_CODE(RidgeArModel::fit(ramp, o), ErrorCode::DegenerateDesign);
  o.ridge_lambda = 1e-3;
  CHECK_NOTHROW(RidgeArModel::fit(ramp, o));

  Dataset empty;
  CHECK_THROWS_CODE(RidgeArModel::fit(empty, {}), ErrorCode::EmptyInput);
}

TEST_CASE("persistence and ridge AR are scale equivariant") {
  std::mt19937_64 rng(17);
  for (int trial = 0; trial < 10; ++trial) {
    const auto d = recurrence(
        300, 40, [](const std::vector<double>& s) { return 0.6 * s.back() + 16; }, rng(), 2.0);
    const double c = 0.1 + static_cast<double>(rng() % 1000) / 100.0;
    Dataset scaled = d;
    for (auto& v : scaled.y) v *= c;
    for (auto& row : scaled.x) {
      for (int lag = 1; lag <= 5; ++lag) row[d.layout.history(lag)] *= c;
    }
    const auto m = RidgeArModel::fit(d, {});
    const auto ms = RidgeArModel::fit(scaled, {});
    PersistenceModel p(d.layout);
    for (std::size_t i = 0; i < d.size(); i += 37) {
      CHECK(ms->predict(scaled.x[i]) == doctest::Approx(c * m->predict(d.x[i])).epsilon(1e-9));
      CHECK(p.predict(scaled.x[i]) == doctest::Approx(c * p.predict(d.x[i])).epsilon(1e-12));
    }
  }
}

TEST_CASE("GBRT on a step function") {
  // Target depends only on the time of day; history is noise.
  std::mt19937_64 rng(5);
  std::uniform_real_distribution<double> noise(30, 50);
  Dataset d;
  d.layout = Layout{0};
  for (int i = 0; i < 200; ++i) {
    std::vector<double> hist(5);
    for (auto& h : hist) h = noise(rng);
    const UnixMs t = kT0 + static_cast<UnixMs>(i) * 60'000;
    d.add(history_features(hist, t, 0), (i < 75) ? 20.0 : 60.0);
  }
  FitOptions o;
  o.trees = 50;
  o.bins = 256;
  const auto g = GbrtModel::fit(d, o);

  // Brute-force best stump over every feature and threshold.
  double best_sse = 1e300;
  std::size_t best_f = 0;
  double best_thr = 0;
  for (std::size_t f = 0; f < d.layout.dim(); ++f) {
    std::vector<double> vals;
    for (const auto& row : d.x) vals.push_back(row[f]);
    std::sort(vals.begin(), vals.end());
    vals.erase(std::unique(vals.begin(), vals.end()), vals.end());
    for (std::size_t k = 0; k + 1 < vals.size(); ++k) {
      double sl = 0, sr = 0, ql = 0, qr = 0, nl = 0, nr = 0;
      for (std::size_t i = 0; i < d.size(); ++i) {
        if (d.x[i][f] <= vals[k]) {
          sl += d.y[i], ql += d.y[i] * d.y[i], ++nl;
        } else {
          sr += d.y[i], qr += d.y[i] * d.y[i], ++nr;
        }
      }
      if (nl < 5 || nr < 5) continue;
      const double sse = (ql - sl * sl / nl) + (qr - sr * sr / nr);
      if (sse < best_sse - 1e-9) {
        best_sse = sse;
        best_f = f;
        best_thr = vals[k];
      }
    }
  }
  CHECK(best_f == d.layout.time());
  const auto& root = g->trees().front().front();
  CHECK(root.feature == static_cast<int>(best_f));
  CHECK(root.threshold == best_thr);

  PersistenceModel p(d.layout);
  const auto rg = evaluate(*g, d);
  const auto rp = evaluate(p, d);
  CHECK(rg.rmse < rp.rmse);
  CHECK(rg.rmse < 1.0);

  TempDir tmp;
  const auto path = (tmp.path / "gbrt.json").string();
  save_model(path, *g);
  const auto back = load_model(path);
  CHECK(back->kind() == ModelKind::Gbrt);
  for (std::size_t i = 0; i < d.size(); i += 13) CHECK(back->predict(d.x[i]) == g->predict(d.x[i]));

  const auto g2 = GbrtModel::fit(d, o);
  for (std::size_t i = 0; i < d.size(); i += 13) CHECK(g2->predict(d.x[i]) == g->predict(d.x[i]));
  FitOptions bad = o;
  bad.trees = 500;
  CHECK_THROWS_CODE(GbrtModel::fit(d, bad), ErrorCode::InvalidArgument);
  bad = o;
  bad.max_depth = 4;
  CHECK_THROWS_CODE(GbrtModel::fit(d, bad), ErrorCode::InvalidArgument);
}

TEST_CASE("metrics") {
  const std::vector<double> act{100, 100}, pred{90, 110};
  const auto r = evaluate(pred, act);
  CHECK(r.mape_pct == doctest::Approx(10));
  CHECK(r.rmse == doctest::Approx(10));
  CHECK(r.within10_pct == 100);
  CHECK(r.within5_pct == 0);

  const auto perfect = evaluate(act, act);
  CHECK(perfect.mape_pct == 0);
  CHECK(perfect.rmse == 0);
  CHECK(perfect.within5_pct == 100);

  CHECK_THROWS_CODE(evaluate(std::vector<double>{1, 2}, std::vector<double>{1, 0}), ErrorCode::ZeroActual);
  CHECK_THROWS_CODE(evaluate(std::vector<double>{}, std::vector<double>{}), ErrorCode::EmptyInput);
  CHECK_THROWS_CODE(evaluate(std::vector<double>{1}, std::vector<double>{1, 2}), ErrorCode::InvalidArgument);
}

TEST_CASE("metrics match a naive oracle") {
  std::mt19937_64 rng(99);
  std::uniform_real_distribution<double> act(1, 200), rel(-0.3, 0.3);
  for (int trial = 0; trial < 5; ++trial) {
    std::vector<double> a(1000), p(1000);
    for (std::size_t i = 0; i < a.size(); ++i) {
      a[i] = act(rng);
      p[i] = a[i] * (1 + rel(rng));
    }
    const auto r = evaluate(p, a);
    const auto o = naive_metrics(p, a);
    CHECK(std::fabs(r.mape_pct - o.mape) < 1e-9);
    CHECK(std::fabs(r.rmse - o.rmse) < 1e-9);
    CHECK(std::fabs(r.within5_pct - o.w5) < 1e-9);
    CHECK(std::fabs(r.within10_pct - o.w10) < 1e-9);
    CHECK(r.within5_pct <= r.within10_pct);
  }
}

TEST_CASE("ridge AR beats persistence on terminal latency traces") {
  for (std::uint64_t seed : {1, 2, 3}) {
    const auto samples = trace(seed, 7200);
    const auto d = build_dataset(samples, nullptr, Target::LatencyMs);
    const auto [train, test] = temporal_split(d, 19.0 / 24.0);
    const auto ridge = fit(ModelKind::RidgeAr, train);
    const auto pers = fit(ModelKind::Persistence, train);
    const auto rr = evaluate(*ridge, test);
    const auto rp = evaluate(*pers, test);
    CAPTURE(seed);
    CAPTURE(rr.mape_pct);
    CAPTURE(rp.mape_pct);
    CHECK(rr.mape_pct <= 10.0);
    CHECK(rr.mape_pct < rp.mape_pct);
    CHECK(rr.within5_pct <= rr.within10_pct);
  }
}

TEST_CASE("model files") {
  const auto d = recurrence(100, 10, [](const std::vector<double>& s) { return 0.5 * s.back() + 5; }, 2, 0.5);
  TempDir tmp;
  for (auto kind : {ModelKind::Persistence, ModelKind::HarmonicMean, ModelKind::RidgeAr}) {
    const auto m = fit(kind, d);
    const auto path = (tmp.path / "m.json").string();
    save_model(path, *m);
    const auto back = load_model(path);
    CHECK(back->kind() == kind);
    for (std::size_t i = 0; i < d.size(); i += 7) CHECK(back->predict(d.x[i]) == m->predict(d.x[i]));
  }
  CHECK_THROWS_CODE(model_from_json(Json{{"format", "leobed-model"}, {"version", 9}, {"kind", "gbrt"}, {"k", 8}}),
                    ErrorCode::ParseError);
  CHECK_THROWS_CODE(model_from_json(Json{{"format", "other"}}), ErrorCode::ParseError);
}

TEST_CASE("external model over JSON lines") {
  const Layout l{8};
  ExternalModel ok(l, "while read line; do echo '{\"prediction\": 42.5}'; done");
  const std::vector<double> x(l.dim(), 1.0);
  CHECK(ok.predict(x) == 42.5);
  CHECK(ok.predict(x) == 42.5);

  ExternalModel plain(l, "while read line; do echo 7; done");
  CHECK(plain.predict(x) == 7);

  ExternalModel gone(l, "exit 0");
  CHECK_THROWS_CODE(gone.predict(x), ErrorCode::Unavailable);

  ExternalModel garbage(l, "while read line; do echo nope; done");
  CHECK_THROWS_CODE(garbage.predict(x), ErrorCode::Unavailable);
}
