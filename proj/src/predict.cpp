#include "leobed/predict.hpp"

#include <poll.h>
#include <signal.h>
#include <sys/socket.h>
#include <sys/wait.h>
#include <unistd.h>

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <random>

#include <fmt/format.h>
#include <spdlog/spdlog.h>

#include "leobed/error.hpp"

namespace leobed::predict {

namespace {

constexpr int kModelVersion = 1;

const terminal::TelemetrySample* find_at(std::span<const terminal::TelemetrySample> s, UnixMs ts) {
  const auto it = std::lower_bound(s.begin(), s.end(), ts,
                                   [](const terminal::TelemetrySample& a, UnixMs t) { return a.ts_ms < t; });
  if (it == s.end() || it->ts_ms != ts) return nullptr;
  return &*it;
}

std::optional<double> metric_at(std::span<const terminal::TelemetrySample> s, UnixMs ts, Target target) {
  const auto* cur = find_at(s, ts);
  if (!cur) return std::nullopt;
  if (target == Target::LatencyMs) return cur->pop_latency_ms;
  const auto* prev = find_at(s, ts - kMsPerSecond);
  if (!prev || cur->bytes_down < prev->bytes_down) return std::nullopt;
  return static_cast<double>(cur->bytes_down - prev->bytes_down) * 8.0 / 1000.0;
}

double second_of_day(UnixMs t) {
  const auto s = t / kMsPerSecond;
  return static_cast<double>(((s % 86400) + 86400) % 86400);
}

Json header(const Model& m) {
  return {{"format", "leobed-model"},
          {"version", kModelVersion},
          {"kind", std::string(to_string(m.kind()))},
          {"k", m.layout().k}};
}

}  // namespace

std::string_view to_string(Target t) { return t == Target::LatencyMs ? "latency_ms" : "throughput_kbps"; }

Target parse_target(std::string_view s) {
  if (s == "latency_ms" || s == "latency") return Target::LatencyMs;
  if (s == "throughput_kbps" || s == "throughput") return Target::ThroughputKbps;
  fail(ErrorCode::InvalidArgument, "unknown target '" + std::string(s) + "'");
}

std::vector<std::string> Layout::names() const {
  std::vector<std::string> out{"site_lat", "site_lon", "site_alt_m"};
  for (int i = 0; i < k; ++i) {
    out.push_back(fmt::format("sat{}_az", i));
    out.push_back(fmt::format("sat{}_el", i));
    out.push_back(fmt::format("sat{}_range_km", i));
  }
  out.push_back("term_az");
  out.push_back("term_el");
  for (int lag = 1; lag <= kHistory; ++lag) out.push_back(fmt::format("h{}", lag));
  out.push_back("second_of_day");
  return out;
}

std::vector<std::optional<double>> metric_series(std::span<const terminal::TelemetrySample> samples, Target target) {
  std::vector<std::optional<double>> out(samples.size());
  for (std::size_t i = 0; i < samples.size(); ++i) {
    if (target == Target::LatencyMs) {
      out[i] = samples[i].pop_latency_ms;
    } else if (i > 0 && samples[i].bytes_down >= samples[i - 1].bytes_down) {
      const double dt = static_cast<double>(samples[i].ts_ms - samples[i - 1].ts_ms) / 1000.0;
      if (dt > 0) out[i] = static_cast<double>(samples[i].bytes_down - samples[i - 1].bytes_down) * 8.0 / 1000.0 / dt;
    }
  }
  return out;
}

FeatureVector assemble_features(std::span<const terminal::TelemetrySample> history,
                                const orbital::OrbitalContext* ctx, UnixMs t_ms, Target target, int k) {
  if (k < 0) fail(ErrorCode::InvalidArgument, "K must be non-negative");
  const Layout l{k};
  FeatureVector f;
  f.ts_ms = t_ms;
  f.values.assign(l.dim(), kPad);
  f.slot_valid.assign(static_cast<std::size_t>(k), false);

  for (int lag = 1; lag <= kHistory; ++lag) {
    const auto v = metric_at(history, t_ms - lag * kMsPerSecond, target);
    if (!v) {
      fail(ErrorCode::InsufficientHistory,
           fmt::format("no {} value {} s before {}", to_string(target), lag, iso8601_utc(t_ms)));
    }
    f.values[l.history(lag)] = *v;
  }
  const auto* last = find_at(history, t_ms - kMsPerSecond);
  f.values[l.terminal()] = last->azimuth_deg;
  f.values[l.terminal() + 1] = last->elevation_deg;
  f.values[l.time()] = second_of_day(t_ms);

  if (ctx) {
    f.values[0] = ctx->site.latitude_deg;
    f.values[1] = ctx->site.longitude_deg;
    f.values[2] = ctx->site.altitude_m;
    const auto vis = ctx->visible(t_ms);
    for (int i = 0; i < k && i < static_cast<int>(vis.size()); ++i) {
      const auto& s = vis[static_cast<std::size_t>(i)];
      f.values[l.sat(i)] = s.azimuth_deg;
      f.values[l.sat(i) + 1] = s.elevation_deg;
      f.values[l.sat(i) + 2] = s.range_km;
      f.slot_valid[static_cast<std::size_t>(i)] = true;
    }
  }
  return f;
}

FeatureVector history_features(std::span<const double> recent_first, UnixMs t_ms, int k) {
  if (recent_first.size() < static_cast<std::size_t>(kHistory)) {
    fail(ErrorCode::InsufficientHistory, "need 5 history values");
  }
  const Layout l{k};
  FeatureVector f;
  f.ts_ms = t_ms;
  f.values.assign(l.dim(), kPad);
  f.slot_valid.assign(static_cast<std::size_t>(k), false);
  for (int lag = 1; lag <= kHistory; ++lag) f.values[l.history(lag)] = recent_first[static_cast<std::size_t>(lag - 1)];
  f.values[l.time()] = second_of_day(t_ms);
  return f;
}

void Dataset::add(const FeatureVector& f, double target_value) {
  if (f.values.size() != layout.dim()) fail(ErrorCode::InvalidArgument, "feature dimension mismatch");
  ts.push_back(f.ts_ms);
  y.push_back(target_value);
  x.push_back(f.values);
}

Dataset build_dataset(std::span<const terminal::TelemetrySample> samples, const orbital::OrbitalContext* ctx,
                      Target target, int k, std::size_t stride) {
  if (stride == 0) fail(ErrorCode::InvalidArgument, "stride must be positive");
  Dataset d;
  d.layout = Layout{k};
  d.target = target;
  std::size_t candidate = 0;
  for (std::size_t i = 0; i < samples.size(); ++i) {
    const auto y = metric_at(samples, samples[i].ts_ms, target);
    if (!y) continue;
    const std::size_t lo = i >= 8 ? i - 8 : 0;
    const auto hist = samples.subspan(lo, i - lo);
    bool full = true;
    for (int lag = 1; lag <= kHistory && full; ++lag) {
      full = metric_at(hist, samples[i].ts_ms - lag * kMsPerSecond, target).has_value();
    }
    if (!full) continue;
    if (candidate++ % stride != 0) continue;
    d.add(assemble_features(hist, ctx, samples[i].ts_ms, target, k), *y);
  }
  return d;
}

void write_dataset_csv(const std::string& path, const Dataset& d) {
  std::ofstream out(path);
  if (!out) fail(ErrorCode::IoError, "cannot write " + path);
  out << "ts_ms,target";
  for (const auto& n : d.layout.names()) out << ',' << n;
  out << '\n';
  for (std::size_t i = 0; i < d.size(); ++i) {
    out << d.ts[i] << ',' << fmt::format("{}", d.y[i]);
    for (double v : d.x[i]) out << ',' << fmt::format("{}", v);
    out << '\n';
  }
  if (!out) fail(ErrorCode::IoError, "short write to " + path);
}

Dataset read_dataset_csv(const std::string& path, Target target) {
  const auto t = read_csv(path);
  if (t.header.size() < 2 || t.header[0] != "ts_ms" || t.header[1] != "target") {
    fail(ErrorCode::ParseError, path + ": expected ts_ms,target,<features>");
  }
  const std::size_t dim = t.header.size() - 2;
  const std::size_t base = 3 + 2 + kHistory + 1;
  if (dim < base || (dim - base) % 3 != 0) fail(ErrorCode::ParseError, path + ": unexpected feature count");
  Dataset d;
  d.layout = Layout{static_cast<int>((dim - base) / 3)};
  d.target = target;
  const auto names = d.layout.names();
  if (!std::equal(names.begin(), names.end(), t.header.begin() + 2)) {
    fail(ErrorCode::ParseError, path + ": feature columns do not match the layout");
  }
  for (const auto& row : t.rows) {
    if (row.size() != t.header.size()) fail(ErrorCode::ParseError, path + ": ragged row");
    try {
      d.ts.push_back(std::stoll(row[0]));
      d.y.push_back(std::stod(row[1]));
      std::vector<double> x(dim);
      for (std::size_t j = 0; j < dim; ++j) x[j] = std::stod(row[j + 2]);
      d.x.push_back(std::move(x));
    } catch (const std::exception&) {
      fail(ErrorCode::ParseError, path + ": bad number");
    }
  }
  return d;
}

std::pair<Dataset, Dataset> temporal_split(const Dataset& d, double train_fraction) {
  if (!(train_fraction > 0 && train_fraction < 1)) fail(ErrorCode::InvalidArgument, "train fraction must be in (0,1)");
  if (!std::is_sorted(d.ts.begin(), d.ts.end())) fail(ErrorCode::InvalidArgument, "dataset is not in time order");
  const auto n_train = static_cast<std::size_t>(std::floor(static_cast<double>(d.size()) * train_fraction));
  if (n_train == 0 || n_train >= d.size()) fail(ErrorCode::InvalidArgument, "split leaves an empty side");
  Dataset a, b;
  a.layout = b.layout = d.layout;
  a.target = b.target = d.target;
  const auto cut = static_cast<long>(n_train);
  a.ts.assign(d.ts.begin(), d.ts.begin() + cut);
  a.y.assign(d.y.begin(), d.y.begin() + cut);
  a.x.assign(d.x.begin(), d.x.begin() + cut);
  b.ts.assign(d.ts.begin() + cut, d.ts.end());
  b.y.assign(d.y.begin() + cut, d.y.end());
  b.x.assign(d.x.begin() + cut, d.x.end());
  return {std::move(a), std::move(b)};
}

std::string_view to_string(ModelKind k) {
  switch (k) {
    case ModelKind::Persistence: return "persistence";
    case ModelKind::HarmonicMean: return "harmonic_mean";
    case ModelKind::RidgeAr: return "ridge_ar";
    case ModelKind::Gbrt: return "gbrt";
    case ModelKind::External: return "external";
  }
  return "?";
}

ModelKind parse_model_kind(std::string_view s) {
  for (auto k : {ModelKind::Persistence, ModelKind::HarmonicMean, ModelKind::RidgeAr, ModelKind::Gbrt,
                 ModelKind::External}) {
    if (to_string(k) == s) return k;
  }
  fail(ErrorCode::InvalidArgument, "unknown model kind '" + std::string(s) + "'");
}

// ---- models ----

void Model::check_dim(std::span<const double> x) const {
  if (x.size() != layout_.dim()) {
    fail(ErrorCode::InvalidArgument, fmt::format("expected {} features, got {}", layout_.dim(), x.size()));
  }
}

std::vector<double> Model::predict_all(const Dataset& d) const {
  std::vector<double> out;
  out.reserve(d.size());
  for (const auto& row : d.x) out.push_back(predict(row));
  return out;
}

double PersistenceModel::predict(std::span<const double> x) const {
  check_dim(x);
  return x[layout_.history(1)];
}

Json PersistenceModel::to_json() const { return header(*this); }

double HarmonicMeanModel::predict(std::span<const double> x) const {
  check_dim(x);
  double inv = 0;
  for (int lag = 1; lag <= kHistory; ++lag) {
    const double v = x[layout_.history(lag)];
    if (!(v > 0)) return 0;
    inv += 1.0 / v;
  }
  return kHistory / inv;
}

Json HarmonicMeanModel::to_json() const { return header(*this); }

RidgeArModel::RidgeArModel(Layout l, std::vector<std::size_t> columns, std::vector<double> coef, double intercept)
    : Model(l), columns_(std::move(columns)), coef_(std::move(coef)), intercept_(intercept) {
  if (columns_.size() != coef_.size()) fail(ErrorCode::InvalidArgument, "ridge columns/coefficients mismatch");
  for (auto c : columns_) {
    if (c >= l.dim()) fail(ErrorCode::InvalidArgument, "ridge column out of range");
  }
}

std::unique_ptr<RidgeArModel> RidgeArModel::fit(const Dataset& d, const FitOptions& o) {
  if (d.empty()) fail(ErrorCode::EmptyInput, "empty training set");
  if (o.ar_order < 1 || o.ar_order > kHistory) fail(ErrorCode::InvalidArgument, "AR order must be 1..5");
  if (o.ridge_lambda < 0) fail(ErrorCode::InvalidArgument, "ridge lambda must be >= 0");
  const Layout& l = d.layout;
  std::vector<std::size_t> cand;
  for (int lag = 1; lag <= o.ar_order; ++lag) cand.push_back(l.history(lag));
  if (o.ar_exogenous) {
    for (std::size_t j = 0; j < l.dim(); ++j) {
      if (j < l.history(1) || j > l.history(kHistory)) cand.push_back(j);
    }
  }
  const auto n = d.size();
  std::vector<std::size_t> cols;
  std::vector<double> mean, sd;
  for (auto c : cand) {
    double m = 0;
    for (const auto& row : d.x) m += row[c];
    m /= static_cast<double>(n);
    double v = 0;
    for (const auto& row : d.x) v += (row[c] - m) * (row[c] - m);
    const double s = std::sqrt(v / static_cast<double>(n));
    if (!(s > 1e-12 * std::max(1.0, std::abs(m)))) {
      spdlog::warn("ridge: dropping constant column {}", l.names()[c]);
      continue;
    }
    cols.push_back(c);
    mean.push_back(m);
    sd.push_back(s);
  }
  if (cols.empty()) fail(ErrorCode::DegenerateDesign, "every regressor is constant");

  const auto p = static_cast<Eigen::Index>(cols.size());
  Eigen::MatrixXd z(static_cast<Eigen::Index>(n), p);
  Eigen::VectorXd y(static_cast<Eigen::Index>(n));
  const double ybar = std::accumulate(d.y.begin(), d.y.end(), 0.0) / static_cast<double>(n);
  for (std::size_t i = 0; i < n; ++i) {
    for (Eigen::Index j = 0; j < p; ++j) {
      const auto ju = static_cast<std::size_t>(j);
      z(static_cast<Eigen::Index>(i), j) = (d.x[i][cols[ju]] - mean[ju]) / sd[ju];
    }
    y(static_cast<Eigen::Index>(i)) = d.y[i] - ybar;
  }
  Eigen::MatrixXd gram = z.transpose() * z;
  gram.diagonal().array() += o.ridge_lambda * static_cast<double>(n);
  const Eigen::LDLT<Eigen::MatrixXd> ldlt(gram);
  const auto dvec = ldlt.vectorD().cwiseAbs();
  if (ldlt.info() != Eigen::Success || !(dvec.minCoeff() > 1e-10 * dvec.maxCoeff())) {
    fail(ErrorCode::DegenerateDesign, "ridge normal equations are singular; raise lambda or drop regressors");
  }
  const Eigen::VectorXd b = ldlt.solve(z.transpose() * y);

  std::vector<double> coef(cols.size());
  double intercept = ybar;
  for (std::size_t j = 0; j < cols.size(); ++j) {
    coef[j] = b(static_cast<Eigen::Index>(j)) / sd[j];
    intercept -= coef[j] * mean[j];
  }
  return std::make_unique<RidgeArModel>(l, std::move(cols), std::move(coef), intercept);
}

double RidgeArModel::predict(std::span<const double> x) const {
  check_dim(x);
  double v = intercept_;
  for (std::size_t j = 0; j < columns_.size(); ++j) v += coef_[j] * x[columns_[j]];
  return v;
}

double RidgeArModel::lag_coefficient(int lag) const {
  const auto col = layout_.history(lag);
  for (std::size_t j = 0; j < columns_.size(); ++j) {
    if (columns_[j] == col) return coef_[j];
  }
  return 0;
}

Json RidgeArModel::to_json() const {
  Json j = header(*this);
  j["columns"] = columns_;
  j["coef"] = coef_;
  j["intercept"] = intercept_;
  return j;
}

// ---- gradient boosting ----

GbrtModel::GbrtModel(Layout l, double base, std::vector<std::vector<TreeNode>> trees)
    : Model(l), base_(base), trees_(std::move(trees)) {
  for (const auto& t : trees_) {
    if (t.empty()) fail(ErrorCode::InvalidArgument, "empty tree");
    for (const auto& n : t) {
      if (n.feature >= 0 && (static_cast<std::size_t>(n.feature) >= l.dim() || n.left < 0 || n.right < 0 ||
                             static_cast<std::size_t>(std::max(n.left, n.right)) >= t.size())) {
        fail(ErrorCode::InvalidArgument, "malformed tree node");
      }
    }
  }
}

namespace {

struct Binned {
  std::vector<std::vector<double>> thresholds;  // per feature; bin b holds x <= thresholds[b]
  std::vector<std::vector<std::uint8_t>> codes;  // per feature, per row
};

Binned bin_features(const Dataset& d, int max_bins) {
  const auto dim = d.layout.dim();
  Binned b;
  b.thresholds.resize(dim);
  b.codes.assign(dim, std::vector<std::uint8_t>(d.size()));
  std::vector<double> col(d.size());
  for (std::size_t j = 0; j < dim; ++j) {
    for (std::size_t i = 0; i < d.size(); ++i) col[i] = d.x[i][j];
    std::vector<double> u = col;
    std::sort(u.begin(), u.end());
    u.erase(std::unique(u.begin(), u.end()), u.end());
    auto& thr = b.thresholds[j];
    if (u.size() <= static_cast<std::size_t>(max_bins)) {
      thr.assign(u.begin(), u.end() - 1);
    } else {
      std::vector<double> sorted = col;
      std::sort(sorted.begin(), sorted.end());
      for (int q = 1; q < max_bins; ++q) {
        thr.push_back(sorted[static_cast<std::size_t>(q) * sorted.size() / static_cast<std::size_t>(max_bins)]);
      }
      thr.erase(std::unique(thr.begin(), thr.end()), thr.end());
      if (!thr.empty() && thr.back() >= u.back()) thr.pop_back();
    }
    for (std::size_t i = 0; i < d.size(); ++i) {
      b.codes[j][i] = static_cast<std::uint8_t>(std::lower_bound(thr.begin(), thr.end(), col[i]) - thr.begin());
    }
  }
  return b;
}

struct TreeBuilder {
  const Binned& bins;
  const std::vector<double>& resid;
  const FitOptions& opt;
  std::vector<TreeNode> nodes;

  int build(std::vector<std::size_t>& rows, int depth) {
    double sum = 0;
    for (auto r : rows) sum += resid[r];
    const double n = static_cast<double>(rows.size());
    const int id = static_cast<int>(nodes.size());
    nodes.push_back(TreeNode{-1, 0, -1, -1, opt.shrinkage * sum / n});
    if (depth >= opt.max_depth || rows.size() < 2 * opt.min_leaf) return id;

    double best_gain = 1e-12 * std::max(1.0, sum * sum / n);
    int best_f = -1;
    std::size_t best_b = 0;
    std::vector<double> hs;
    std::vector<std::size_t> hc;
    for (std::size_t f = 0; f < bins.thresholds.size(); ++f) {
      const auto nb = bins.thresholds[f].size();
      if (nb == 0) continue;
      hs.assign(nb + 1, 0.0);
      hc.assign(nb + 1, 0);
      for (auto r : rows) {
        hs[bins.codes[f][r]] += resid[r];
        hc[bins.codes[f][r]] += 1;
      }
      double sl = 0;
      std::size_t cl = 0;
      for (std::size_t b = 0; b < nb; ++b) {
        sl += hs[b];
        cl += hc[b];
        const std::size_t cr = rows.size() - cl;
        if (cl < opt.min_leaf) continue;
        if (cr < opt.min_leaf) break;
        const double sr = sum - sl;
        const double gain = sl * sl / static_cast<double>(cl) + sr * sr / static_cast<double>(cr) - sum * sum / n;
        if (gain > best_gain) {
          best_gain = gain;
          best_f = static_cast<int>(f);
          best_b = b;
        }
      }
    }
    if (best_f < 0) return id;
    std::vector<std::size_t> left, right;
    const auto& codes = bins.codes[static_cast<std::size_t>(best_f)];
    for (auto r : rows) (codes[r] <= best_b ? left : right).push_back(r);
    rows.clear();
    rows.shrink_to_fit();
    nodes[static_cast<std::size_t>(id)].feature = best_f;
    nodes[static_cast<std::size_t>(id)].threshold = bins.thresholds[static_cast<std::size_t>(best_f)][best_b];
    const int l = build(left, depth + 1);
    const int r = build(right, depth + 1);
    nodes[static_cast<std::size_t>(id)].left = l;
    nodes[static_cast<std::size_t>(id)].right = r;
    return id;
  }
};

double eval_tree(const std::vector<TreeNode>& t, std::span<const double> x) {
  std::size_t i = 0;
  while (t[i].feature >= 0) {
    i = static_cast<std::size_t>(x[static_cast<std::size_t>(t[i].feature)] <= t[i].threshold ? t[i].left : t[i].right);
  }
  return t[i].value;
}

}  // namespace

std::unique_ptr<GbrtModel> GbrtModel::fit(const Dataset& d, const FitOptions& o) {
  if (d.empty()) fail(ErrorCode::EmptyInput, "empty training set");
  if (o.trees < 1 || o.trees > 200) fail(ErrorCode::InvalidArgument, "trees must be 1..200");
  if (o.max_depth < 1 || o.max_depth > 3) fail(ErrorCode::InvalidArgument, "depth must be 1..3");
  if (!(o.shrinkage > 0 && o.shrinkage <= 1)) fail(ErrorCode::InvalidArgument, "shrinkage must be in (0,1]");
  if (o.bins < 2 || o.bins > 256) fail(ErrorCode::InvalidArgument, "bins must be 2..256");
  if (!(o.subsample > 0 && o.subsample <= 1)) fail(ErrorCode::InvalidArgument, "subsample must be in (0,1]");
  if (o.min_leaf < 1) fail(ErrorCode::InvalidArgument, "min_leaf must be >= 1");

  const auto n = d.size();
  const Binned bins = bin_features(d, o.bins);
  const double base = std::accumulate(d.y.begin(), d.y.end(), 0.0) / static_cast<double>(n);
  std::vector<double> f(n, base), resid(n);
  std::vector<std::vector<TreeNode>> trees;
  std::mt19937_64 rng(o.seed);
  std::bernoulli_distribution keep(o.subsample);
  for (int t = 0; t < o.trees; ++t) {
    for (std::size_t i = 0; i < n; ++i) resid[i] = d.y[i] - f[i];
    std::vector<std::size_t> rows;
    rows.reserve(n);
    for (std::size_t i = 0; i < n; ++i) {
      if (o.subsample >= 1.0 || keep(rng)) rows.push_back(i);
    }
    if (rows.empty()) continue;
    TreeBuilder tb{bins, resid, o, {}};
    tb.build(rows, 0);
    for (std::size_t i = 0; i < n; ++i) f[i] += eval_tree(tb.nodes, d.x[i]);
    trees.push_back(std::move(tb.nodes));
  }
  return std::make_unique<GbrtModel>(d.layout, base, std::move(trees));
}

double GbrtModel::predict(std::span<const double> x) const {
  check_dim(x);
  double v = base_;
  for (const auto& t : trees_) v += eval_tree(t, x);
  return v;
}

Json GbrtModel::to_json() const {
  Json j = header(*this);
  j["base"] = base_;
  Json trees = Json::array();
  for (const auto& t : trees_) {
    Json nodes = Json::array();
    for (const auto& n : t) nodes.push_back(Json::array({n.feature, n.threshold, n.left, n.right, n.value}));
    trees.push_back(std::move(nodes));
  }
  j["trees"] = std::move(trees);
  return j;
}

// ---- external ----

ExternalModel::ExternalModel(Layout l, std::string command) : Model(l), command_(std::move(command)) {
  if (command_.empty()) fail(ErrorCode::InvalidArgument, "external model needs a command");
  int sv[2];
  if (::socketpair(AF_UNIX, SOCK_STREAM | SOCK_CLOEXEC, 0, sv) != 0) {
    fail(ErrorCode::LaunchFailure, "socketpair failed");
  }
  const pid_t pid = ::fork();
  if (pid < 0) {
    ::close(sv[0]);
    ::close(sv[1]);
    fail(ErrorCode::LaunchFailure, "fork failed");
  }
  if (pid == 0) {
    ::dup2(sv[1], 0);
    ::dup2(sv[1], 1);
    const char* argv[] = {"/bin/sh", "-c", command_.c_str(), nullptr};
    ::execv("/bin/sh", const_cast<char* const*>(argv));
    ::_exit(127);
  }
  ::close(sv[1]);
  fd_ = sv[0];
  pid_ = pid;
}

ExternalModel::~ExternalModel() {
  if (fd_ >= 0) ::close(fd_);
  if (pid_ > 0) {
    ::kill(static_cast<pid_t>(pid_), SIGTERM);
    int status = 0;
    ::waitpid(static_cast<pid_t>(pid_), &status, 0);
  }
}

double ExternalModel::predict(std::span<const double> x) const {
  check_dim(x);
  std::lock_guard lock(mu_);
  std::string line = Json{{"features", std::vector<double>(x.begin(), x.end())}}.dump() + "\n";
  for (std::size_t off = 0; off < line.size();) {
    const auto w = ::send(fd_, line.data() + off, line.size() - off, MSG_NOSIGNAL);
    if (w <= 0) fail(ErrorCode::Unavailable, "external model is not accepting input");
    off += static_cast<std::size_t>(w);
  }
  std::size_t nl;
  while ((nl = buf_.find('\n')) == std::string::npos) {
    pollfd p{fd_, POLLIN, 0};
    if (::poll(&p, 1, 10'000) <= 0) fail(ErrorCode::Unavailable, "external model timed out");
    char chunk[4096];
    const auto r = ::read(fd_, chunk, sizeof chunk);
    if (r <= 0) fail(ErrorCode::Unavailable, "external model closed its output");
    buf_.append(chunk, static_cast<std::size_t>(r));
  }
  const std::string reply = buf_.substr(0, nl);
  buf_.erase(0, nl + 1);
  try {
    const Json j = Json::parse(reply);
    if (j.is_number()) return j.get<double>();
    return j.at("prediction").get<double>();
  } catch (const Json::exception&) {
    fail(ErrorCode::Unavailable, "external model answered '" + reply + "'");
  }
}

Json ExternalModel::to_json() const {
  Json j = header(*this);
  j["command"] = command_;
  return j;
}

// ---- fit / io ----

std::unique_ptr<Model> fit(ModelKind kind, const Dataset& train, const FitOptions& o) {
  switch (kind) {
    case ModelKind::Persistence: return std::make_unique<PersistenceModel>(train.layout);
    case ModelKind::HarmonicMean: return std::make_unique<HarmonicMeanModel>(train.layout);
    case ModelKind::RidgeAr: return RidgeArModel::fit(train, o);
    case ModelKind::Gbrt: return GbrtModel::fit(train, o);
    case ModelKind::External: return std::make_unique<ExternalModel>(train.layout, o.command);
  }
  fail(ErrorCode::InvalidArgument, "unknown model kind");
}

void save_model(const std::string& path, const Model& m) { write_file(path, m.to_json().dump(1) + "\n"); }

std::unique_ptr<Model> model_from_json(const Json& j) {
  try {
    if (j.at("format") != "leobed-model") fail(ErrorCode::ParseError, "not a model file");
    if (j.at("version").get<int>() != kModelVersion) {
      fail(ErrorCode::ParseError, "unsupported model version " + j["version"].dump());
    }
    const Layout l{j.at("k").get<int>()};
    switch (parse_model_kind(j.at("kind").get<std::string>())) {
      case ModelKind::Persistence: return std::make_unique<PersistenceModel>(l);
      case ModelKind::HarmonicMean: return std::make_unique<HarmonicMeanModel>(l);
      case ModelKind::RidgeAr:
        return std::make_unique<RidgeArModel>(l, j.at("columns").get<std::vector<std::size_t>>(),
                                              j.at("coef").get<std::vector<double>>(), j.at("intercept").get<double>());
      case ModelKind::Gbrt: {
        std::vector<std::vector<TreeNode>> trees;
        for (const auto& t : j.at("trees")) {
          std::vector<TreeNode> nodes;
          for (const auto& n : t) {
            nodes.push_back({n.at(0).get<int>(), n.at(1).get<double>(), n.at(2).get<int>(), n.at(3).get<int>(),
                             n.at(4).get<double>()});
          }
          trees.push_back(std::move(nodes));
        }
        return std::make_unique<GbrtModel>(l, j.at("base").get<double>(), std::move(trees));
      }
      case ModelKind::External: return std::make_unique<ExternalModel>(l, j.at("command").get<std::string>());
    }
  } catch (const Json::exception& e) {
    fail(ErrorCode::ParseError, std::string("bad model file: ") + e.what());
  }
  fail(ErrorCode::ParseError, "bad model file");
}

std::unique_ptr<Model> load_model(const std::string& path) {
  try {
    return model_from_json(Json::parse(read_file(path)));
  } catch (const Json::exception& e) {
    fail(ErrorCode::ParseError, path + ": " + e.what());
  }
}

// ---- metrics ----

EvalReport evaluate(std::span<const double> predicted, std::span<const double> actual) {
  if (predicted.size() != actual.size()) fail(ErrorCode::InvalidArgument, "prediction/actual length mismatch");
  if (actual.empty()) fail(ErrorCode::EmptyInput, "empty test set");
  double ape = 0, se = 0;
  std::size_t w5 = 0, w10 = 0;
  for (std::size_t i = 0; i < actual.size(); ++i) {
    const double a = actual[i];
    if (!(a > 0)) fail(ErrorCode::ZeroActual, fmt::format("actual value {} at row {}", a, i));
    const double err = predicted[i] - a;
    const double rel = std::abs(err) / a;
    ape += rel;
    se += err * err;
    if (rel <= 0.05) ++w5;
    if (rel <= 0.10) ++w10;
  }
  const double n = static_cast<double>(actual.size());
  EvalReport r;
  r.n = actual.size();
  r.mape_pct = ape / n * 100.0;
  r.rmse = std::sqrt(se / n);
  r.within5_pct = static_cast<double>(w5) / n * 100.0;
  r.within10_pct = static_cast<double>(w10) / n * 100.0;
  return r;
}

EvalReport evaluate(const Model& m, const Dataset& test) {
  const auto pred = m.predict_all(test);
  return evaluate(pred, test.y);
}

Json to_json(const EvalReport& r) {
  return {{"n", r.n},
          {"mape_pct", r.mape_pct},
          {"rmse", r.rmse},
          {"within5_pct", r.within5_pct},
          {"within10_pct", r.within10_pct}};
}

}  // namespace leobed::predict
