#pragma once

#include <memory>
#include <optional>
#include <ostream>
#include <span>
#include <string>
#include <vector>

#include "leobed/common.hpp"
#include "leobed/predict.hpp"

namespace leobed::abr {

inline constexpr int kHorizon = 5;

struct VideoSpec {
  double duration_s = 180;
  double chunk_s = 4;
  std::vector<double> ladder_kbps{300, 450, 675, 1013, 1519, 2278};

  // ladder strictly increasing with adjacent ratios in [1.4, 1.6]; chunk_s divides duration.
  void validate() const;
  int n_chunks() const;
  int n_qualities() const { return static_cast<int>(ladder_kbps.size()); }
  double chunk_kbits(int q) const { return ladder_kbps.at(static_cast<std::size_t>(q)) * chunk_s; }
  double utility(int q) const { return ladder_kbps.at(static_cast<std::size_t>(q)) / 1000.0; }
  VideoSpec scaled(double multiplier) const;
};

struct QoeParams {
  double rebuffer_penalty = 4.3;  // per stalled second; startup delay counts as stall
  double buffer_cap_s = 60;
};

// Capacity in kbps, one value per second starting at start_ms.
struct Trace {
  UnixMs start_ms = 0;
  std::vector<double> kbps;

  double duration_s() const { return static_cast<double>(kbps.size()); }
  // Time-weighted mean over [a, b) seconds; clamps to the trace.
  double mean_kbps(double a, double b) const;
};

// CSV: ts_ms,tput_kbps at a 1 s cadence.
Trace parse_trace_csv(std::string_view text);
Trace read_trace_csv(const std::string& path);
void write_trace_csv(std::ostream& out, const Trace& t);

// Per-second downlink throughput from terminal counters; gaps carry zero.
Trace trace_from_telemetry(std::span<const terminal::TelemetrySample> samples);

// Handover-slotted throughput: each slot draws a level, seconds add AR(1) noise around
// it, some slots drop out. Per-second history predicts it much better than chunk means.
struct SyntheticTraceConfig {
  double duration_s = 300;
  int slot_s = 15;
  double level_lo_kbps = 300, level_hi_kbps = 3000;
  double noise_rel = 0.1;
  double ar_phi = 0.7;
  double p_dip = 0.15;
  double dip_factor = 0.25;
};
Trace synthetic_trace(const SyntheticTraceConfig& cfg, std::uint64_t seed);
Trace white_noise_trace(double mean_kbps, double sd_kbps, double duration_s, std::uint64_t seed);

// Rows h[t-1..t-5] -> kbps[t] for training a throughput model on traces.
predict::Dataset trace_dataset(std::span<const Trace> traces, int k = 0);

struct MpcState {
  double buffer_s = 0;
  int last_quality = -1;  // -1 before the first chunk
  int chunks_left = 1;
};

// Exhaustive search over quality sequences of length min(horizon, chunks_left) maximizing
// planned QoE, each step downloading at pred_kbps[i] (the last entry repeats). Ties go to
// the lexicographically smallest sequence. Returns the first quality.
int mpc_decide(const MpcState& state, std::span<const double> pred_kbps, const VideoSpec& video,
               const QoeParams& qoe = {}, int horizon = kHorizon);

// Same search, but each download is integrated over a per-second capacity forecast;
// kbps_per_second[0] covers second first_second, the last value repeats.
int mpc_decide_series(const MpcState& state, std::span<const double> kbps_per_second, int first_second,
                      double now_s, const VideoSpec& video, const QoeParams& qoe = {}, int horizon = kHorizon);

struct SessionView {
  int chunk = 0;
  double now_s = 0;  // seconds into the trace
  double buffer_s = 0;
  int last_quality = -1;
  int chunks_left = 0;
  std::span<const double> chunk_tput_kbps;  // measured per downloaded chunk
  std::span<const double> observed_kbps;    // per completed second, from the terminal
  const Trace* trace = nullptr;             // whole trace, oracle use only
  double start_s = 0;                       // session offset into the trace
};

class Forecaster {
 public:
  virtual ~Forecaster() = default;
  virtual std::string name() const = 0;
  // Per-second capacity from second floor(now) on, at least n values.
  virtual std::vector<double> forecast(const SessionView& v, int n) = 0;
  // Relative error of the previous forecast against what was realized since, if known.
  virtual std::optional<double> last_error(const SessionView& v) = 0;
  virtual void reset() {}
};

// Harmonic mean of the last five chunk throughputs.
class HarmonicForecaster final : public Forecaster {
 public:
  explicit HarmonicForecaster(double fallback_kbps) : fallback_(fallback_kbps) {}
  std::string name() const override { return "harmonic"; }
  std::vector<double> forecast(const SessionView& v, int n) override;
  std::optional<double> last_error(const SessionView& v) override;
  void reset() override { prev_ = -1; }

 private:
  double fallback_;
  double prev_ = -1;
};

// Per-second forecasters compare against the realized per-second trace.
class SeriesForecaster : public Forecaster {
 public:
  std::vector<double> forecast(const SessionView& v, int n) override;
  std::optional<double> last_error(const SessionView& v) override;
  void reset() override;

 protected:
  // Per-second forecast starting at second floor(now); n values.
  virtual std::vector<double> seconds(const SessionView& v, int first_second, int n) = 0;

 private:
  std::vector<double> prev_;
  int prev_first_ = 0;
};

// True future capacity.
class OracleForecaster final : public SeriesForecaster {
 public:
  std::string name() const override { return "oracle"; }

 protected:
  std::vector<double> seconds(const SessionView& v, int first_second, int n) override;
};

// Rolls a predict model forward one second at a time from the observed history.
class ModelForecaster final : public SeriesForecaster {
 public:
  ModelForecaster(std::shared_ptr<const predict::Model> model, double fallback_kbps);
  std::string name() const override { return "model"; }

 protected:
  std::vector<double> seconds(const SessionView& v, int first_second, int n) override;

 private:
  std::shared_ptr<const predict::Model> model_;
  double fallback_;
};

class Controller {
 public:
  virtual ~Controller() = default;
  virtual std::string name() const = 0;
  virtual int decide(const SessionView& v, const VideoSpec& video, const QoeParams& qoe) = 0;
  virtual void reset() {}
};

class FixedController final : public Controller {
 public:
  explicit FixedController(std::vector<int> qualities) : q_(std::move(qualities)) {}
  std::string name() const override { return "fixed"; }
  int decide(const SessionView& v, const VideoSpec&, const QoeParams&) override;

 private:
  std::vector<int> q_;
};

// RobustMPC: divides the forecast by 1 + the largest of the last five errors.
class MpcController final : public Controller {
 public:
  MpcController(std::string name, std::unique_ptr<Forecaster> f, bool robust, int horizon = kHorizon);
  std::string name() const override { return name_; }
  int decide(const SessionView& v, const VideoSpec& video, const QoeParams& qoe) override;
  void reset() override;

 private:
  std::string name_;
  std::unique_ptr<Forecaster> f_;
  bool robust_;
  int horizon_;
  std::vector<double> errors_;
};

std::unique_ptr<Controller> make_mpc_d(const VideoSpec& video);
std::unique_ptr<Controller> make_mpc_l(std::shared_ptr<const predict::Model> model, const VideoSpec& video);
std::unique_ptr<Controller> make_mpc_o();

struct ChunkLog {
  int chunk_idx = 0;
  int quality = 0;
  double download_ms = 0;
  double rebuffer_ms = 0;  // stall before this chunk could play (startup for chunk 0)
  double buffer_s = 0;     // after the chunk lands
};

struct QoeRecord {
  double utility = 0;
  double rebuffer_s = 0;  // excludes startup
  double startup_s = 0;
  double smoothness = 0;
  double qoe = 0;  // utility - mu * (rebuffer + startup) - smoothness
};

struct SessionResult {
  QoeRecord qoe;
  std::vector<ChunkLog> chunks;
};

// Throws TraceTooShort if a download runs past the end of the trace.
SessionResult simulate_session(const Trace& trace, const VideoSpec& video, Controller& controller,
                               const QoeParams& qoe = {}, double start_s = 0);

// chunk_idx,quality,download_ms,rebuffer_ms,buffer_s
void write_chunk_log_csv(std::ostream& out, const std::vector<ChunkLog>& chunks);

struct VariantQoe {
  std::string name;
  std::vector<double> qoe;  // one per session
  double median = 0;
};

struct CompareOptions {
  QoeParams qoe;
  unsigned threads = 0;
};

// One session per trace for MPC-D, MPC-L (if a model is given) and MPC-O.
std::vector<VariantQoe> compare_variants(const std::vector<Trace>& traces, const VideoSpec& video,
                                         std::shared_ptr<const predict::Model> model,
                                         const CompareOptions& opt = {});

}  // namespace leobed::abr
