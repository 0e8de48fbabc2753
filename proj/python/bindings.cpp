#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include "leobed/abr.hpp"
#include "leobed/dissect.hpp"
#include "leobed/error.hpp"
#include "leobed/leolink.hpp"
#include "leobed/orbital.hpp"
#include "leobed/predict.hpp"
#include "leobed/terminal_sim.hpp"
#include "leobed/triggers.hpp"

namespace py = pybind11;
using namespace leobed;

namespace {

py::dict sample_dict(const terminal::TelemetrySample& s) {
  py::dict d;
  d["ts_ms"] = s.ts_ms;
  d["pop_latency_ms"] = s.pop_latency_ms ? py::cast(*s.pop_latency_ms) : py::none();
  d["pop_drop_rate"] = s.pop_drop_rate;
  d["az_deg"] = s.azimuth_deg;
  d["el_deg"] = s.elevation_deg;
  d["bytes_down"] = s.bytes_down;
  d["bytes_up"] = s.bytes_up;
  d["state"] = std::string(terminal::to_string(s.state));
  return d;
}

// Seeded trace from the terminal model with the synthetic shell.
std::vector<terminal::TelemetrySample> record(int seconds, std::uint64_t seed, double lat, double lon,
                                              double p_bad_handover, UnixMs start_ms) {
  terminal::TerminalModelConfig cfg;
  cfg.rng_seed = seed;
  if (p_bad_handover >= 0) cfg.p_bad_handover = p_bad_handover;
  terminal::TerminalSim sim(cfg, {lat, lon, 50}, start_ms);
  return sim.run(seconds);
}

}  // namespace

PYBIND11_MODULE(_core, m) {
  m.doc() = "LEO broadband measurement testbed core";

  static py::exception<Error> error(m, "LeobedError");
  py::register_exception_translator([](std::exception_ptr p) {
    try {
      if (p) std::rethrow_exception(p);
    } catch (const Error& e) {
      PyErr_SetObject(error.ptr(), py::make_tuple(std::string(e.name()), e.what()).ptr());
    }
  });

  // ---- orbital ----
  py::class_<orbital::TleRecord>(m, "TleRecord")
      .def_readonly("name", &orbital::TleRecord::name)
      .def_readonly("catalog_number", &orbital::TleRecord::catalog_number)
      .def_readonly("inclination_deg", &orbital::TleRecord::inclination_deg)
      .def_readonly("mean_motion_rev_per_day", &orbital::TleRecord::mean_motion_rev_per_day)
      .def_readonly("epoch_ms", &orbital::TleRecord::epoch_ms)
      .def("id", &orbital::TleRecord::id)
      .def("__repr__", [](const orbital::TleRecord& r) { return "<TleRecord " + r.id() + ">"; });
  m.def("parse_tle", &orbital::parse_tle, py::arg("text"));
  m.def("load_catalog", &orbital::load_catalog, py::arg("path"));
  m.def("orbital_period_s", &orbital::orbital_period_s);
  m.def(
      "visible_sats",
      [](double lat, double lon, const std::vector<orbital::TleRecord>& catalog, UnixMs t, double mask) {
        py::list out;
        for (const auto& v : orbital::visible_sats({lat, lon, 0}, catalog, t, mask)) {
          out.append(py::make_tuple(v.sat_id, v.azimuth_deg, v.elevation_deg, v.range_km));
        }
        return out;
      },
      py::arg("lat"), py::arg("lon"), py::arg("catalog"), py::arg("t_ms"),
      py::arg("mask_deg") = orbital::kDefaultElevationMaskDeg);

  // ---- terminal ----
  m.def(
      "record_telemetry",
      [](int seconds, std::uint64_t seed, double lat, double lon, double p_bad_handover, UnixMs start_ms) {
        py::list out;
        for (const auto& s : record(seconds, seed, lat, lon, p_bad_handover, start_ms)) out.append(sample_dict(s));
        return out;
      },
      py::arg("seconds"), py::arg("seed") = 1, py::arg("lat") = 41.39, py::arg("lon") = 2.17,
      py::arg("p_bad_handover") = -1.0, py::arg("start_ms") = 1'704'067'200'000LL);

  // ---- triggers ----
  m.def("normalize_trigger", [](const std::string& text) { return triggers::to_string(*triggers::parse_trigger(text)); });
  m.def(
      "trigger_verdicts",
      [](const std::string& text, int seconds, std::uint64_t seed) {
        const auto trace = record(seconds, seed, 41.39, 2.17, -1, 1'704'067'200'000LL);
        std::vector<std::string> out;
        for (auto v : triggers::evaluate_trace(*triggers::parse_trigger(text), trace)) {
          out.emplace_back(triggers::to_string(v));
        }
        return out;
      },
      py::arg("trigger"), py::arg("seconds"), py::arg("seed") = 1);
  m.def(
      "savings_report",
      [](double period_s, double active_time_s, double bitrate_bps, double header_fraction) {
        const auto r = triggers::savings_report(period_s, active_time_s, bitrate_bps, header_fraction);
        py::dict d;
        d["transferred_bits"] = r.transferred_bits;
        d["stored_bits"] = r.stored_bits;
        d["saved_transfer_bits"] = r.saved_transfer_bits;
        d["saved_storage_bits"] = r.saved_storage_bits;
        return d;
      },
      py::arg("period_s"), py::arg("active_time_s"), py::arg("bitrate_bps"), py::arg("header_fraction"));

  // ---- dissect ----
  m.def(
      "percentiles",
      [](const std::vector<double>& v) {
        const auto s = dissect::percentiles(v);
        py::dict d;
        d["count"] = s.count;
        d["min"] = s.min;
        d["median"] = s.median;
        d["p95"] = s.p95;
        d["p99"] = s.p99;
        d["max"] = s.max;
        return d;
      },
      py::arg("samples"));
  m.def(
      "cdf",
      [](const std::vector<double>& v) {
        std::vector<std::pair<double, double>> out;
        for (const auto& p : dissect::cdf(v)) out.emplace_back(p.value, p.cum_prob);
        return out;
      },
      py::arg("samples"));

  // ---- predict ----
  py::class_<predict::EvalReport>(m, "EvalReport")
      .def_readonly("n", &predict::EvalReport::n)
      .def_readonly("mape_pct", &predict::EvalReport::mape_pct)
      .def_readonly("rmse", &predict::EvalReport::rmse)
      .def_readonly("within5_pct", &predict::EvalReport::within5_pct)
      .def_readonly("within10_pct", &predict::EvalReport::within10_pct);
  m.def(
      "evaluate",
      [](const std::vector<double>& pred, const std::vector<double>& actual) { return predict::evaluate(pred, actual); },
      py::arg("predicted"), py::arg("actual"));
  m.def(
      "fit_and_score",
      [](const std::string& kind, int seconds, std::uint64_t seed, double train_fraction) {
        const auto trace = record(seconds, seed, 41.39, 2.17, -1, 1'704'067'200'000LL);
        const auto data = predict::build_dataset(trace, nullptr);
        auto [train, test] = predict::temporal_split(data, train_fraction);
        const auto model = predict::fit(predict::parse_model_kind(kind), train);
        return predict::evaluate(*model, test);
      },
      py::arg("kind"), py::arg("seconds"), py::arg("seed") = 1, py::arg("train_fraction") = 0.8);

  // ---- leolink ----
  m.def(
      "run_flow",
      [](const std::string& cc, double owd_ms, double capacity_bps, double loss, double duration_s, double alpha_ms,
         double beta, std::uint64_t seed) {
        const auto p = leolink::constant_profile(owd_ms, capacity_bps, loss, duration_s + 1);
        const auto f = leolink::run_flow(leolink::parse_cc_kind(cc), {alpha_ms, beta}, p, duration_s, seed);
        py::dict d;
        d["mean_tput_bps"] = f.mean_tput_bps;
        d["p95_rtt_ms"] = f.p95_rtt_ms;
        d["probe_rtt_entries_s"] = f.probe_rtt_entries_s;
        d["sent"] = f.sent;
        d["lost"] = f.lost;
        return d;
      },
      py::arg("cc"), py::arg("owd_ms"), py::arg("capacity_bps"), py::arg("loss") = 0.0, py::arg("duration_s") = 30.0,
      py::arg("alpha_ms") = 10'000.0, py::arg("beta") = 0.02, py::arg("seed") = 1);

  // ---- abr ----
  m.def(
      "mpc_decide",
      [](double buffer_s, int last_quality, int chunks_left, const std::vector<double>& pred_kbps) {
        return abr::mpc_decide({buffer_s, last_quality, chunks_left}, pred_kbps, abr::VideoSpec{});
      },
      py::arg("buffer_s"), py::arg("last_quality"), py::arg("chunks_left"), py::arg("pred_kbps"));
  m.def(
      "synthetic_trace", [](std::uint64_t seed) { return abr::synthetic_trace({}, seed).kbps; }, py::arg("seed"));
  m.def(
      "simulate_session",
      [](const std::vector<double>& kbps, const std::string& variant) {
        abr::Trace t;
        t.kbps = kbps;
        auto ctrl = variant == "MPC-O" ? abr::make_mpc_o() : abr::make_mpc_d(abr::VideoSpec{});
        if (variant != "MPC-O" && variant != "MPC-D") fail(ErrorCode::InvalidArgument, "variant is MPC-D or MPC-O");
        const auto r = abr::simulate_session(t, abr::VideoSpec{}, *ctrl);
        py::dict d;
        d["qoe"] = r.qoe.qoe;
        d["utility"] = r.qoe.utility;
        d["rebuffer_s"] = r.qoe.rebuffer_s;
        d["startup_s"] = r.qoe.startup_s;
        d["smoothness"] = r.qoe.smoothness;
        std::vector<int> q;
        for (const auto& c : r.chunks) q.push_back(c.quality);
        d["qualities"] = q;
        return d;
      },
      py::arg("kbps"), py::arg("variant") = "MPC-O");
}
