#pragma once

#include <cstdint>
#include <memory>
#include <mutex>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "leobed/common.hpp"
#include "leobed/experiment.hpp"
#include "leobed/orbital.hpp"
#include "leobed/terminal_sim.hpp"

namespace leobed::predict {

inline constexpr int kDefaultK = 8;
inline constexpr int kHistory = 5;
inline constexpr double kPad = -1.0;

enum class Target { LatencyMs, ThroughputKbps };
std::string_view to_string(Target t);
Target parse_target(std::string_view s);

// Column layout: site lat/lon/alt, K x (az, el, range) by descending elevation, terminal
// az/el, h[t-1] .. h[t-5], second of day.
struct Layout {
  int k = kDefaultK;

  std::size_t dim() const { return 3 + 3 * static_cast<std::size_t>(k) + 2 + kHistory + 1; }
  std::size_t sat(int slot) const { return 3 + 3 * static_cast<std::size_t>(slot); }
  std::size_t terminal() const { return 3 + 3 * static_cast<std::size_t>(k); }
  std::size_t history(int lag = 1) const { return terminal() + 2 + static_cast<std::size_t>(lag - 1); }
  std::size_t time() const { return dim() - 1; }
  std::vector<std::string> names() const;
};

struct FeatureVector {
  UnixMs ts_ms = 0;
  std::vector<double> values;
  std::vector<bool> slot_valid;  // one per satellite slot; invalid slots hold kPad
};

// Per-sample metric: latency as reported, throughput in kbps from the downlink counter
// delta to the previous sample. nullopt when undefined.
std::vector<std::optional<double>> metric_series(std::span<const terminal::TelemetrySample> samples, Target target);

// Features for predicting the metric at `t_ms` from samples strictly before it. The
// samples at t-1 .. t-5 s must all carry the metric (InsufficientHistory). Without an
// orbital context every satellite slot is padding.
FeatureVector assemble_features(std::span<const terminal::TelemetrySample> history,
                                const orbital::OrbitalContext* ctx, UnixMs t_ms, Target target = Target::LatencyMs,
                                int k = kDefaultK);

// Features from a bare metric history (h[0] = t-1), no orientation or satellites.
FeatureVector history_features(std::span<const double> recent_first, UnixMs t_ms, int k = kDefaultK);

// Rows sorted by ts. Validity flags are implied by range > 0.
struct Dataset {
  Layout layout;
  Target target = Target::LatencyMs;
  std::vector<UnixMs> ts;
  std::vector<double> y;
  std::vector<std::vector<double>> x;

  std::size_t size() const { return y.size(); }
  bool empty() const { return y.empty(); }
  void add(const FeatureVector& f, double target_value);
};

// One row per sample that has a target value and a full history. `stride` keeps every
// n-th candidate row.
Dataset build_dataset(std::span<const terminal::TelemetrySample> samples, const orbital::OrbitalContext* ctx,
                      Target target = Target::LatencyMs, int k = kDefaultK, std::size_t stride = 1);

// CSV: ts_ms,target,<feature columns>
void write_dataset_csv(const std::string& path, const Dataset& d);
Dataset read_dataset_csv(const std::string& path, Target target = Target::LatencyMs);

// Chronological split: the first `train_fraction` of rows train, the rest test. Throws
// InvalidArgument if rows are not in time order.
std::pair<Dataset, Dataset> temporal_split(const Dataset& d, double train_fraction);

enum class ModelKind { Persistence, HarmonicMean, RidgeAr, Gbrt, External };
std::string_view to_string(ModelKind k);
ModelKind parse_model_kind(std::string_view s);

struct FitOptions {
  int ar_order = kHistory;     // lags used by ridge AR
  bool ar_exogenous = false;   // ridge AR also regresses on the non-history features
  double ridge_lambda = 1e-3;  // on standardized columns, scaled by row count
  int trees = 200;
  int max_depth = 3;
  double shrinkage = 0.1;
  std::size_t min_leaf = 5;
  int bins = 64;
  double subsample = 1.0;
  std::uint64_t seed = 1;
  std::string command;  // External
};

class Model {
 public:
  virtual ~Model() = default;
  virtual ModelKind kind() const = 0;
  virtual double predict(std::span<const double> x) const = 0;
  virtual Json to_json() const = 0;

  double predict(const FeatureVector& f) const { return predict(f.values); }
  std::vector<double> predict_all(const Dataset& d) const;
  const Layout& layout() const { return layout_; }

 protected:
  explicit Model(Layout l) : layout_(l) {}
  void check_dim(std::span<const double> x) const;
  Layout layout_;
};

class PersistenceModel final : public Model {
 public:
  explicit PersistenceModel(Layout l) : Model(l) {}
  ModelKind kind() const override { return ModelKind::Persistence; }
  double predict(std::span<const double> x) const override;
  Json to_json() const override;
};

class HarmonicMeanModel final : public Model {
 public:
  explicit HarmonicMeanModel(Layout l) : Model(l) {}
  ModelKind kind() const override { return ModelKind::HarmonicMean; }
  double predict(std::span<const double> x) const override;
  Json to_json() const override;
};

class RidgeArModel final : public Model {
 public:
  RidgeArModel(Layout l, std::vector<std::size_t> columns, std::vector<double> coef, double intercept);
  // Closed form on standardized columns; constant columns are dropped with a warning.
  // Throws DegenerateDesign when nothing usable is left or the system is singular.
  static std::unique_ptr<RidgeArModel> fit(const Dataset& d, const FitOptions& o);
  ModelKind kind() const override { return ModelKind::RidgeAr; }
  double predict(std::span<const double> x) const override;
  Json to_json() const override;

  const std::vector<std::size_t>& columns() const { return columns_; }
  const std::vector<double>& coefficients() const { return coef_; }
  double intercept() const { return intercept_; }
  // Coefficient of lag `lag` (1 = t-1), 0 if unused.
  double lag_coefficient(int lag) const;

 private:
  std::vector<std::size_t> columns_;
  std::vector<double> coef_;
  double intercept_ = 0;
};

struct TreeNode {
  int feature = -1;  // -1 for a leaf
  double threshold = 0;  // x <= threshold goes left
  int left = -1, right = -1;
  double value = 0;
};

class GbrtModel final : public Model {
 public:
  GbrtModel(Layout l, double base, std::vector<std::vector<TreeNode>> trees);
  // Squared loss, histogram splits on per-feature quantile bins.
  static std::unique_ptr<GbrtModel> fit(const Dataset& d, const FitOptions& o);
  ModelKind kind() const override { return ModelKind::Gbrt; }
  double predict(std::span<const double> x) const override;
  Json to_json() const override;

  double base() const { return base_; }
  const std::vector<std::vector<TreeNode>>& trees() const { return trees_; }

 private:
  double base_;
  std::vector<std::vector<TreeNode>> trees_;
};

// Subprocess speaking JSON lines: {"features":[...]} in, a number or {"prediction":x} out.
class ExternalModel final : public Model {
 public:
  ExternalModel(Layout l, std::string command);
  ~ExternalModel() override;
  ExternalModel(const ExternalModel&) = delete;
  ExternalModel& operator=(const ExternalModel&) = delete;

  ModelKind kind() const override { return ModelKind::External; }
  // Throws Unavailable if the process is gone or answers garbage.
  double predict(std::span<const double> x) const override;
  Json to_json() const override;

 private:
  std::string command_;
  mutable std::mutex mu_;
  int fd_ = -1;
  long pid_ = 0;
  mutable std::string buf_;
};

std::unique_ptr<Model> fit(ModelKind kind, const Dataset& train, const FitOptions& o = {});
// Versioned JSON: {"format":"leobed-model","version":1,"kind":...,"k":...,...}
void save_model(const std::string& path, const Model& m);
std::unique_ptr<Model> model_from_json(const Json& j);
std::unique_ptr<Model> load_model(const std::string& path);

struct EvalReport {
  std::size_t n = 0;
  double mape_pct = 0;
  double rmse = 0;
  double within5_pct = 0;
  double within10_pct = 0;
};

// Throws EmptyInput, ZeroActual (actual <= 0), InvalidArgument on length mismatch.
EvalReport evaluate(std::span<const double> predicted, std::span<const double> actual);
EvalReport evaluate(const Model& m, const Dataset& test);
Json to_json(const EvalReport& r);

}  // namespace leobed::predict
