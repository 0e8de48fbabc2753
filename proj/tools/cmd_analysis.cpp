#include <filesystem>
#include <fstream>
#include <iostream>
#include <memory>
#include <sstream>

#include <fmt/format.h>

#include "cli.hpp"
#include "leobed/abr.hpp"
#include "leobed/dissect.hpp"
#include "leobed/leolink.hpp"
#include "leobed/orbital.hpp"
#include "leobed/predict.hpp"
#include "leobed/terminal_sim.hpp"
#include "leobed/triggers.hpp"

namespace leobed::cli {

namespace fs = std::filesystem;

namespace {

bool is_jsonl(const std::string& path) {
  const auto ext = fs::path(path).extension().string();
  return ext == ".jsonl" || ext == ".ndjson";
}

std::vector<terminal::TelemetrySample> read_telemetry(const std::string& path) {
  require_path(path, "telemetry");
  if (!is_jsonl(path)) fail(ErrorCode::InvalidArgument, "expected telemetry JSONL: " + path);
  return terminal::read_jsonl(path);
}

// CSV goes to --out when given, else to stdout.
void write_csv(const std::string& out, const std::function<void(std::ostream&)>& body) {
  if (out.empty()) {
    body(std::cout);
    return;
  }
  std::ofstream f(out);
  if (!f) fail(ErrorCode::IoError, "cannot write " + out);
  body(f);
}

// Summary line to stdout only when the CSV went to a file.
void summary(const Globals& g, const std::string& out, const Json& j, const std::function<void()>& table) {
  if (!out.empty()) emit(g, j, table);
}

std::string f3(double v) { return fmt::format("{:.3f}", v); }

struct SiteOptions {
  double lat = 41.39, lon = 2.17, alt = 50;
};

std::unique_ptr<orbital::OrbitalContext> orbital_context(const Globals& g, const SiteOptions& s) {
  if (g.tle_catalog.empty()) return nullptr;
  require_path(g.tle_catalog, "TLE catalog");
  auto ctx = std::make_unique<orbital::OrbitalContext>();
  ctx->site = {s.lat, s.lon, s.alt};
  orbital::validate(ctx->site);
  ctx->catalog = orbital::load_catalog(g.tle_catalog);
  return ctx;
}

// ---- analyze ----

struct AnalyzeOptions {
  std::string input;
  std::string out;
  std::string column = "rtt_ms";
  dissect::SpikeConfig spikes;
  double az_bin = 1.0, el_bin = 0.1;
  std::size_t min_count = 30;
};

std::vector<double> latency_values(const std::string& input) {
  std::vector<double> v;
  if (is_jsonl(input)) {
    for (const auto& s : read_telemetry(input)) {
      if (s.pop_latency_ms) v.push_back(*s.pop_latency_ms);
    }
  } else {
    require_path(input, "ping CSV");
    for (const auto& r : dissect::read_ping_csv(input)) {
      if (r.rtt_ms) v.push_back(*r.rtt_ms);
    }
  }
  return v;
}

void run_cdf(const Globals& g, const AnalyzeOptions& o) {
  const auto values = latency_values(o.input);
  const auto stats = dissect::percentiles(values);
  const auto points = dissect::cdf(values);
  write_csv(o.out, [&](std::ostream& os) { dissect::write_cdf_csv(os, points); });
  summary(g, o.out, dissect::to_json(stats), [&] {
    print_table({"COUNT", "MIN", "MEDIAN", "P95", "P99", "MAX"},
                {{std::to_string(stats.count), f3(stats.min), f3(stats.median), f3(stats.p95), f3(stats.p99),
                  f3(stats.max)}});
  });
}

void run_segments(const Globals& g, const AnalyzeOptions& o) {
  require_path(o.input, "traceroute CSV");
  dissect::SegmentMap map = dissect::SegmentMap::default_map();
  if (!g.segment_map.empty()) {
    require_path(g.segment_map, "segment map");
    map = dissect::SegmentMap::load(g.segment_map);
  }
  const auto report = dissect::segment_latencies(dissect::group_runs(dissect::read_traceroute_csv(o.input)), map);
  write_csv(o.out, [&](std::ostream& os) { dissect::write_segments_csv(os, report); });
  Json segs = Json::array();
  std::vector<std::vector<std::string>> rows;
  for (const auto& s : report.segments) {
    segs.push_back({{"segment", dissect::segment_label(s.segment)},
                    {"one_way_ms", s.one_way_ms},
                    {"share", report.share(s.segment)},
                    {"clamped", s.clamped}});
    rows.push_back({dissect::segment_label(s.segment), f3(s.one_way_ms), f3(100 * report.share(s.segment))});
  }
  summary(g, o.out,
          {{"segments", segs},
           {"end_to_end_one_way_ms", report.end_to_end_one_way_ms},
           {"runs_used", report.runs_used},
           {"runs_skipped", report.runs_skipped}},
          [&] { print_table({"SEGMENT", "ONE_WAY_MS", "SHARE_PCT"}, rows); });
}

void run_spikes(const Globals& g, const AnalyzeOptions& o) {
  std::vector<dissect::LatencyPoint> series;
  if (is_jsonl(o.input)) {
    series = dissect::latency_series(read_telemetry(o.input));
  } else {
    require_path(o.input, "ping CSV");
    series = dissect::latency_series(dissect::read_ping_csv(o.input));
  }
  const auto spikes = dissect::detect_spikes(series, o.spikes);
  write_csv(o.out, [&](std::ostream& os) { dissect::write_spikes_csv(os, spikes); });
  std::size_t quantized = 0;
  for (const auto& s : spikes) quantized += std::fmod(s.duration_s, 15.0) == 0 ? 1 : 0;
  summary(g, o.out, {{"spikes", spikes.size()}, {"multiple_of_15s", quantized}}, [&] {
    std::cout << fmt::format("{} spikes, {} with a duration that is a multiple of 15 s\n", spikes.size(), quantized);
  });
}

void run_heatmap(const Globals& g, const AnalyzeOptions& o) {
  const auto cells = dissect::orientation_heatmap(read_telemetry(o.input), o.az_bin, o.el_bin, o.min_count);
  write_csv(o.out, [&](std::ostream& os) { dissect::write_heatmap_csv(os, cells); });
  std::size_t confident = 0;
  for (const auto& c : cells) confident += c.low_confidence ? 0 : 1;
  summary(g, o.out, {{"cells", cells.size()}, {"confident_cells", confident}},
          [&] { std::cout << fmt::format("{} cells, {} with enough samples\n", cells.size(), confident); });
}

// ---- predict ----

struct PredictOptions {
  std::string input;
  std::string dataset;
  std::string model_path;
  std::string out;
  std::string kind = "gbrt";
  std::string target = "latency";
  double train_fraction = 0.8;
  int k = predict::kDefaultK;
  std::size_t stride = 1;
  predict::FitOptions fit;
  SiteOptions site;
};

predict::Dataset load_dataset(const Globals& g, const PredictOptions& o, predict::Target target, int k) {
  if (!o.dataset.empty()) {
    require_path(o.dataset, "dataset CSV");
    return predict::read_dataset_csv(o.dataset, target);
  }
  if (o.input.empty()) fail(ErrorCode::InvalidArgument, "need --input telemetry or --dataset");
  const auto samples = read_telemetry(o.input);
  const auto ctx = orbital_context(g, o.site);
  return predict::build_dataset(samples, ctx.get(), target, k, o.stride);
}

Json report_json(const predict::EvalReport& r) { return predict::to_json(r); }

void print_report(const predict::EvalReport& r) {
  print_table({"N", "MAPE_PCT", "RMSE", "WITHIN5_PCT", "WITHIN10_PCT"},
              {{std::to_string(r.n), f3(r.mape_pct), f3(r.rmse), f3(r.within5_pct), f3(r.within10_pct)}});
}

void run_fit(const Globals& g, const PredictOptions& o) {
  if (o.out.empty()) fail(ErrorCode::InvalidArgument, "predict fit needs --out model.json");
  const auto target = predict::parse_target(o.target);
  const auto data = load_dataset(g, o, target, o.k);
  auto [train, test] = predict::temporal_split(data, o.train_fraction);
  auto fit = o.fit;
  fit.seed = g.seed;
  const auto model = predict::fit(predict::parse_model_kind(o.kind), train, fit);
  predict::save_model(o.out, *model);
  Json j = {{"ok", true}, {"model", o.out}, {"kind", std::string(predict::to_string(model->kind()))},
            {"train_rows", train.size()}, {"test_rows", test.size()}};
  std::optional<predict::EvalReport> rep;
  if (!test.empty()) {
    rep = predict::evaluate(*model, test);
    j["holdout"] = report_json(*rep);
  }
  emit(g, j, [&] {
    std::cout << fmt::format("{} model trained on {} rows, saved to {}\n", o.kind, train.size(), o.out);
    if (rep) print_report(*rep);
  });
}

void run_eval(const Globals& g, const PredictOptions& o) {
  if (o.model_path.empty()) fail(ErrorCode::InvalidArgument, "predict eval needs --model");
  require_path(o.model_path, "model");
  const auto model = predict::load_model(o.model_path);
  const auto data = load_dataset(g, o, predict::parse_target(o.target), model->layout().k);
  const auto rep = predict::evaluate(*model, data);
  if (!o.out.empty()) {
    const auto pred = model->predict_all(data);
    write_csv(o.out, [&](std::ostream& os) {
      os << "ts_ms,actual,predicted\n";
      for (std::size_t i = 0; i < data.size(); ++i) os << data.ts[i] << ',' << f3(data.y[i]) << ',' << f3(pred[i]) << '\n';
    });
  }
  emit(g, report_json(rep), [&] { print_report(rep); });
}

// ---- sweep ----

struct SweepCliOptions {
  std::vector<std::string> profiles;
  int synthetic = 3;
  std::string alphas = "10000,5000,4000,2000";
  std::string betas = "0.02,0.04,0.08,0.16";
  int seeds = 10;
  double duration_s = 60;
  unsigned threads = 0;
  std::string out;
};

std::vector<leolink::LinkProfile> sweep_profiles(const Globals& g, const std::vector<std::string>& files, int synthetic,
                                                 double duration_s) {
  std::vector<leolink::LinkProfile> out;
  for (const auto& f : files) {
    require_path(f, "link profile");
    out.push_back(leolink::read_profile_csv(f));
  }
  if (out.empty()) {
    leolink::SyntheticLeoConfig cfg;
    cfg.duration_s = duration_s + 30;
    for (int i = 0; i < synthetic; ++i) out.push_back(leolink::synthetic_leo_profile(cfg, g.seed + static_cast<std::uint64_t>(i)));
  }
  return out;
}

void run_sweep(const Globals& g, const SweepCliOptions& o) {
  leolink::SweepOptions opt;
  opt.duration_s = o.duration_s;
  opt.threads = o.threads;
  opt.seeds.clear();
  for (int i = 0; i < o.seeds; ++i) opt.seeds.push_back(g.seed + static_cast<std::uint64_t>(i));
  const auto r = leolink::sweep(parse_list(o.alphas), parse_list(o.betas),
                                sweep_profiles(g, o.profiles, o.synthetic, o.duration_s), opt);
  write_csv(o.out, [&](std::ostream& os) { leolink::write_sweep_csv(os, r); });
  Json j = {{"baseline_tput_bps", r.baseline.mean_tput_bps}, {"baseline_p95_rtt_ms", r.baseline.p95_rtt_ms}};
  if (r.best) {
    j["best"] = {{"alpha_ms", r.best->alpha_ms},
                 {"beta", r.best->beta},
                 {"tput_improvement_pct", r.best->tput_improvement_pct},
                 {"p95_rtt_inflation_pct", r.best->p95_rtt_inflation_pct}};
  } else {
    j["best"] = nullptr;
  }
  summary(g, o.out, j, [&] {
    if (r.best) {
      std::cout << fmt::format("best cell alpha={} ms beta={:.0f}%: throughput {:+.1f}%, p95 RTT {:+.1f}%\n",
                               r.best->alpha_ms, r.best->beta * 100, r.best->tput_improvement_pct,
                               r.best->p95_rtt_inflation_pct);
    } else {
      std::cout << "no cell improves throughput within the inflation limit\n";
    }
  });
}

// ---- abr-eval ----

struct AbrOptions {
  std::vector<std::string> traces;
  int synthetic = 100;
  std::string model_path;
  bool no_learned = false;
  double ladder_multiplier = 1.0;
  unsigned threads = 0;
  std::string out;
};

void run_abr(const Globals& g, const AbrOptions& o) {
  std::vector<abr::Trace> traces;
  for (const auto& f : o.traces) {
    require_path(f, "trace");
    traces.push_back(abr::read_trace_csv(f));
  }
  if (traces.empty()) {
    for (int i = 0; i < o.synthetic; ++i) traces.push_back(abr::synthetic_trace({}, g.seed + static_cast<std::uint64_t>(i)));
  }
  std::shared_ptr<const predict::Model> model;
  if (!o.model_path.empty()) {
    require_path(o.model_path, "model");
    model = predict::load_model(o.model_path);
  } else if (!o.no_learned) {
    std::vector<abr::Trace> train;
    for (std::uint64_t s = 0; s < 10; ++s) train.push_back(abr::synthetic_trace({}, g.seed + 1000 + s));
    predict::FitOptions fit;
    fit.seed = g.seed;
    model = predict::fit(predict::ModelKind::Gbrt, abr::trace_dataset(train, 0), fit);
  }
  const auto video = abr::VideoSpec{}.scaled(o.ladder_multiplier);
  abr::CompareOptions opt;
  opt.threads = o.threads;
  const auto r = abr::compare_variants(traces, video, model, opt);
  if (!o.out.empty()) {
    write_csv(o.out, [&](std::ostream& os) {
      os << "session,variant,qoe\n";
      for (const auto& v : r) {
        for (std::size_t i = 0; i < v.qoe.size(); ++i) os << i << ',' << v.name << ',' << f3(v.qoe[i]) << '\n';
      }
    });
  }
  Json j = Json::array();
  std::vector<std::vector<std::string>> rows;
  const double base = r.front().median;
  for (const auto& v : r) {
    const double gain = base != 0 ? 100 * (v.median - base) / std::abs(base) : 0;
    j.push_back({{"variant", v.name}, {"median_qoe", v.median}, {"sessions", v.qoe.size()}, {"vs_mpc_d_pct", gain}});
    rows.push_back({v.name, f3(v.median), fmt::format("{:+.1f}", gain)});
  }
  emit(g, j, [&] { print_table({"VARIANT", "MEDIAN_QOE", "VS_MPC_D_PCT"}, rows); });
}

// ---- profile export ----

struct ProfileOptions {
  std::string telemetry;
  double duration_s = 120;
  double capacity_mbps = 100;
  std::string out;
};

void run_profile(const Globals& g, const ProfileOptions& o) {
  leolink::LinkProfile p;
  if (!o.telemetry.empty()) {
    leolink::TelemetryProfileConfig cfg;
    cfg.capacity_bps = o.capacity_mbps * 1e6;
    cfg.seed = g.seed;
    p = leolink::profile_from_telemetry(read_telemetry(o.telemetry), cfg);
  } else {
    leolink::SyntheticLeoConfig cfg;
    cfg.duration_s = o.duration_s;
    p = leolink::synthetic_leo_profile(cfg, g.seed);
  }
  write_csv(o.out, [&](std::ostream& os) { leolink::write_profile_csv(os, p); });
  summary(g, o.out,
          {{"rows", p.rows.size()}, {"mean_capacity_bps", p.mean_capacity_bps()}, {"mean_owd_ms", p.mean_owd_ms()}},
          [&] {
            std::cout << fmt::format("{} rows, mean capacity {:.1f} Mbps, mean one-way delay {:.1f} ms\n",
                                     p.rows.size(), p.mean_capacity_bps() / 1e6, p.mean_owd_ms());
          });
}

// ---- savings ----

struct SavingsOptions {
  double bitrate_mbps = 40;
  double period_h = 24;
  double active_fraction = 0.1;
  double header_fraction = 0.04;
};

void run_savings(const Globals& g, const SavingsOptions& o) {
  const double period = o.period_h * 3600;
  const auto r = triggers::savings_report(period, o.active_fraction * period, o.bitrate_mbps * 1e6, o.header_fraction);
  const Json j = {{"transferred_bits", r.transferred_bits},
                  {"stored_bits", r.stored_bits},
                  {"saved_transfer_bits", r.saved_transfer_bits},
                  {"saved_storage_bits", r.saved_storage_bits},
                  {"active_time_s", r.active_time_s}};
  emit(g, j, [&] {
    print_table({"TRANSFERRED_TB", "STORED_GB", "SAVED_TRANSFER_TB", "SAVED_STORAGE_GB"},
                {{f3(r.transferred_bits / 1e12), f3(r.stored_bits / 1e9), f3(r.saved_transfer_bits / 1e12),
                  f3(r.saved_storage_bits / 1e9)}});
  });
}

template <class Fn>
std::function<void()> action(Globals& g, Fn fn) {
  return [&g, fn] {
    apply_logging(g);
    fn();
  };
}

}  // namespace

void register_analysis(CLI::App& app, Globals& g) {
  {
    auto* an = app.add_subcommand("analyze", "latency analysis pipelines");
    an->require_subcommand(1);
    auto o = std::make_shared<AnalyzeOptions>();
    const auto common = [o](CLI::App* c) {
      c->add_option("--input", o->input, "telemetry JSONL or agent CSV")->required();
      c->add_option("--out", o->out, "CSV output (default stdout)");
    };
    auto* cdf = an->add_subcommand("cdf", "latency CDF and percentiles");
    common(cdf);
    cdf->callback(action(g, [&g, o] { run_cdf(g, *o); }));
    auto* seg = an->add_subcommand("segments", "per-segment one-way latency from traceroute");
    common(seg);
    seg->callback(action(g, [&g, o] { run_segments(g, *o); }));
    auto* sp = an->add_subcommand("spikes", "latency spike intervals");
    common(sp);
    sp->add_option("--k", o->spikes.k_mult, "onset multiple of the baseline")->capture_default_str();
    sp->add_option("--min-persist-s", o->spikes.min_persist_s)->capture_default_str();
    sp->add_option("--window-s", o->spikes.window_s, "baseline window")->capture_default_str();
    sp->callback(action(g, [&g, o] { run_spikes(g, *o); }));
    auto* hm = an->add_subcommand("heatmap", "p95 latency by antenna orientation");
    common(hm);
    hm->add_option("--az-bin", o->az_bin, "azimuth bin, degrees")->capture_default_str();
    hm->add_option("--el-bin", o->el_bin, "elevation bin, degrees")->capture_default_str();
    hm->add_option("--min-count", o->min_count, "samples for a confident cell")->capture_default_str();
    hm->callback(action(g, [&g, o] { run_heatmap(g, *o); }));
  }
  {
    auto* pr = app.add_subcommand("predict", "latency and throughput predictors");
    pr->require_subcommand(1);
    auto o = std::make_shared<PredictOptions>();
    const auto common = [o](CLI::App* c) {
      c->add_option("--input", o->input, "telemetry JSONL");
      c->add_option("--dataset", o->dataset, "feature CSV instead of telemetry");
      c->add_option("--target", o->target, "latency or throughput")->capture_default_str();
      c->add_option("--stride", o->stride, "keep every n-th row")->capture_default_str();
      c->add_option("--lat", o->site.lat)->capture_default_str();
      c->add_option("--lon", o->site.lon)->capture_default_str();
    };
    auto* fit = pr->add_subcommand("fit", "train a model and report holdout error");
    common(fit);
    fit->add_option("--model", o->kind, "persistence|harmonic_mean|ridge_ar|gbrt")->capture_default_str();
    fit->add_option("--out", o->out, "model JSON")->required();
    fit->add_option("--train-fraction", o->train_fraction)->capture_default_str();
    fit->add_option("--k", o->k, "satellite slots")->capture_default_str();
    fit->add_option("--trees", o->fit.trees)->capture_default_str();
    fit->add_option("--max-depth", o->fit.max_depth)->capture_default_str();
    fit->add_option("--lambda", o->fit.ridge_lambda, "ridge penalty")->capture_default_str();
    fit->callback(action(g, [&g, o] { run_fit(g, *o); }));
    auto* ev = pr->add_subcommand("eval", "score a saved model");
    common(ev);
    ev->add_option("--model", o->model_path, "model JSON")->required();
    ev->add_option("--out", o->out, "per-row predictions CSV");
    ev->callback(action(g, [&g, o] { run_eval(g, *o); }));
  }
  {
    auto o = std::make_shared<SweepCliOptions>();
    auto* c = app.add_subcommand("sweep", "BBR probe_rtt/loss-threshold grid vs the default");
    c->add_option("--profile", o->profiles, "link profile CSV (repeatable)");
    c->add_option("--synthetic", o->synthetic, "synthetic profiles when none given")->capture_default_str();
    c->add_option("--alphas", o->alphas, "probe_rtt windows, ms")->capture_default_str();
    c->add_option("--betas", o->betas, "loss thresholds, fractions")->capture_default_str();
    c->add_option("--seeds", o->seeds, "runs per profile")->capture_default_str();
    c->add_option("--duration-s", o->duration_s)->capture_default_str();
    c->add_option("--threads", o->threads, "0: all cores")->capture_default_str();
    c->add_option("--out", o->out, "heatmap CSV (default stdout)");
    c->callback(action(g, [&g, o] { run_sweep(g, *o); }));
  }
  {
    auto o = std::make_shared<AbrOptions>();
    auto* c = app.add_subcommand("abr-eval", "MPC-D / MPC-L / MPC-O QoE over traces");
    c->add_option("--trace", o->traces, "throughput trace CSV (repeatable)");
    c->add_option("--synthetic", o->synthetic, "synthetic traces when none given")->capture_default_str();
    c->add_option("--model", o->model_path, "throughput model JSON for MPC-L");
    c->add_flag("--no-learned", o->no_learned, "skip MPC-L when no model is given");
    c->add_option("--ladder-multiplier", o->ladder_multiplier)->capture_default_str();
    c->add_option("--threads", o->threads, "0: all cores")->capture_default_str();
    c->add_option("--out", o->out, "per-session QoE CSV");
    c->callback(action(g, [&g, o] { run_abr(g, *o); }));
  }
  {
    auto* pf = app.add_subcommand("profile", "link profiles");
    pf->require_subcommand(1);
    auto o = std::make_shared<ProfileOptions>();
    auto* c = pf->add_subcommand("export", "write a ts_ms,owd_ms,capacity_bps,loss_prob profile");
    c->add_option("--telemetry", o->telemetry, "derive from terminal telemetry JSONL");
    c->add_option("--duration-s", o->duration_s, "synthetic profile length")->capture_default_str();
    c->add_option("--capacity-mbps", o->capacity_mbps, "mean capacity for telemetry profiles")->capture_default_str();
    c->add_option("--out", o->out, "CSV output (default stdout)");
    c->callback(action(g, [&g, o] { run_profile(g, *o); }));
  }
  {
    auto o = std::make_shared<SavingsOptions>();
    auto* c = app.add_subcommand("savings", "transfer and storage saved by triggered runs");
    c->add_option("--bitrate-mbps", o->bitrate_mbps)->capture_default_str();
    c->add_option("--period-h", o->period_h)->capture_default_str();
    c->add_option("--active-fraction", o->active_fraction)->capture_default_str();
    c->add_option("--header-fraction", o->header_fraction, "captured header bytes per byte sent")
        ->capture_default_str();
    c->callback(action(g, [&g, o] { run_savings(g, *o); }));
  }
}

}  // namespace leobed::cli
