#include "leobed/triggers.hpp"

#include <algorithm>
#include <cctype>
#include <charconv>
#include <cmath>

#include "leobed/error.hpp"

namespace leobed::triggers {
namespace {

using K = Expr::Kind;

bool is_compare(K k) { return k >= K::Gt && k <= K::Ne; }

int precedence(K k) {
  switch (k) {
    case K::Or: return 1;
    case K::And: return 2;
    case K::Not: return 3;
    case K::Gt: case K::Ge: case K::Lt: case K::Le: case K::Eq: case K::Ne: return 4;
    case K::Add: case K::Sub: return 5;
    case K::Mul: case K::Div: return 6;
    case K::Neg: return 7;
    default: return 8;
  }
}

std::string_view symbol(K k) {
  switch (k) {
    case K::Add: return "+";
    case K::Sub: return "-";
    case K::Mul: return "*";
    case K::Div: return "/";
    case K::Gt: return ">";
    case K::Ge: return ">=";
    case K::Lt: return "<";
    case K::Le: return "<=";
    case K::Eq: return "==";
    case K::Ne: return "!=";
    case K::And: return "AND";
    case K::Or: return "OR";
    default: return "?";
  }
}

std::string format_number(double v) {
  char buf[64];
  auto res = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, res.ptr);
}

ExprPtr make(K kind, std::vector<ExprPtr> args) {
  auto e = std::make_shared<Expr>();
  e->kind = kind;
  e->args = std::move(args);
  return e;
}

ExprPtr number(double v) {
  auto e = std::make_shared<Expr>();
  e->kind = K::Number;
  e->number = v;
  return e;
}

enum class Tok { Number, Ident, Op, LParen, RParen, Comma, End };

struct Token {
  Tok type;
  std::string text;
  std::size_t pos;
  double value = 0;
};

std::string upper(std::string_view s) {
  std::string out(s);
  for (auto& c : out) c = static_cast<char>(std::toupper(static_cast<unsigned char>(c)));
  return out;
}

std::vector<Token> tokenize(std::string_view src) {
  std::vector<Token> out;
  std::size_t i = 0;
  while (i < src.size()) {
    const char c = src[i];
    if (std::isspace(static_cast<unsigned char>(c))) {
      ++i;
      continue;
    }
    const std::size_t start = i;
    if (std::isdigit(static_cast<unsigned char>(c)) || c == '.') {
      double v = 0;
      auto res = std::from_chars(src.data() + i, src.data() + src.size(), v);
      if (res.ec != std::errc()) throw SyntaxError(start, "malformed number");
      i = static_cast<std::size_t>(res.ptr - src.data());
      out.push_back({Tok::Number, std::string(src.substr(start, i - start)), start, v});
    } else if (std::isalpha(static_cast<unsigned char>(c)) || c == '_') {
      while (i < src.size() && (std::isalnum(static_cast<unsigned char>(src[i])) || src[i] == '_')) ++i;
      out.push_back({Tok::Ident, std::string(src.substr(start, i - start)), start});
    } else if (c == '(') {
      out.push_back({Tok::LParen, "(", i++});
    } else if (c == ')') {
      out.push_back({Tok::RParen, ")", i++});
    } else if (c == ',') {
      out.push_back({Tok::Comma, ",", i++});
    } else if (c == '>' || c == '<' || c == '=' || c == '!') {
      if (i + 1 < src.size() && src[i + 1] == '=') {
        out.push_back({Tok::Op, std::string(src.substr(i, 2)), i});
        i += 2;
      } else if (c == '=' || c == '!') {
        throw SyntaxError(i, std::string("unexpected '") + c + "'");
      } else {
        out.push_back({Tok::Op, std::string(1, c), i++});
      }
    } else if (c == '+' || c == '-' || c == '*' || c == '/') {
      out.push_back({Tok::Op, std::string(1, c), i++});
    } else {
      throw SyntaxError(i, std::string("unexpected character '") + c + "'");
    }
  }
  out.push_back({Tok::End, "", src.size()});
  return out;
}

void require_bool(const ExprPtr& e, const char* where) {
  if (!e->is_bool()) fail(ErrorCode::TypeError, std::string(where) + " needs a boolean operand");
}

void require_num(const ExprPtr& e, const char* where) {
  if (e->is_bool()) fail(ErrorCode::TypeError, std::string(where) + " needs a numeric operand");
}

class Parser {
 public:
  explicit Parser(std::string_view src) : toks_(tokenize(src)) {}

  ExprPtr parse() {
    auto e = parse_or();
    if (peek().type != Tok::End) throw SyntaxError(peek().pos, "unexpected '" + peek().text + "'");
    if (!e->is_bool()) fail(ErrorCode::TypeError, "trigger must be a condition, not a number");
    return e;
  }

 private:
  const Token& peek() const { return toks_[pos_]; }
  const Token& next() { return toks_[pos_++]; }
  bool keyword(const char* kw) const { return peek().type == Tok::Ident && upper(peek().text) == kw; }
  bool op(std::string_view s) const { return peek().type == Tok::Op && peek().text == s; }
  void expect(Tok t, const char* what) {
    if (peek().type != t) throw SyntaxError(peek().pos, std::string("expected ") + what);
    ++pos_;
  }

  ExprPtr parse_or() {
    auto lhs = parse_and();
    while (keyword("OR")) {
      ++pos_;
      auto rhs = parse_and();
      require_bool(lhs, "OR");
      require_bool(rhs, "OR");
      lhs = make(K::Or, {lhs, rhs});
    }
    return lhs;
  }

  ExprPtr parse_and() {
    auto lhs = parse_not();
    while (keyword("AND")) {
      ++pos_;
      auto rhs = parse_not();
      require_bool(lhs, "AND");
      require_bool(rhs, "AND");
      lhs = make(K::And, {lhs, rhs});
    }
    return lhs;
  }

  ExprPtr parse_not() {
    if (keyword("NOT")) {
      ++pos_;
      auto inner = parse_not();
      require_bool(inner, "NOT");
      return make(K::Not, {inner});
    }
    return parse_cmp();
  }

  ExprPtr parse_cmp() {
    auto lhs = parse_sum();
    static const std::pair<std::string_view, K> ops[] = {
        {">=", K::Ge}, {"<=", K::Le}, {"==", K::Eq}, {"!=", K::Ne}, {">", K::Gt}, {"<", K::Lt}};
    for (const auto& [s, kind] : ops) {
      if (op(s)) {
        ++pos_;
        auto rhs = parse_sum();
        require_num(lhs, "comparison");
        require_num(rhs, "comparison");
        return make(kind, {lhs, rhs});
      }
    }
    return lhs;
  }

  ExprPtr parse_sum() {
    auto lhs = parse_prod();
    while (op("+") || op("-")) {
      const K kind = next().text == "+" ? K::Add : K::Sub;
      auto rhs = parse_prod();
      require_num(lhs, "arithmetic");
      require_num(rhs, "arithmetic");
      lhs = make(kind, {lhs, rhs});
    }
    return lhs;
  }

  ExprPtr parse_prod() {
    auto lhs = parse_unary();
    while (op("*") || op("/")) {
      const K kind = next().text == "*" ? K::Mul : K::Div;
      auto rhs = parse_unary();
      require_num(lhs, "arithmetic");
      require_num(rhs, "arithmetic");
      if (kind == K::Div && (rhs->kind != K::Number || rhs->number == 0.0)) {
        fail(ErrorCode::TypeError, "division needs a non-zero constant divisor");
      }
      lhs = make(kind, {lhs, rhs});
    }
    return lhs;
  }

  ExprPtr parse_unary() {
    if (op("-")) {
      ++pos_;
      auto inner = parse_unary();
      require_num(inner, "negation");
      if (inner->kind == K::Number) return number(-inner->number);
      return make(K::Neg, {inner});
    }
    return parse_primary();
  }

  double literal_arg(const char* fn) {
    bool neg = false;
    if (op("-")) {
      ++pos_;
      neg = true;
    }
    if (peek().type != Tok::Number) {
      fail(ErrorCode::TypeError, std::string(fn) + " takes a numeric literal argument");
    }
    const double v = next().value;
    return neg ? -v : v;
  }

  ExprPtr parse_primary() {
    const Token& t = peek();
    if (t.type == Tok::Number) {
      ++pos_;
      return number(t.value);
    }
    if (t.type == Tok::LParen) {
      ++pos_;
      auto e = parse_or();
      expect(Tok::RParen, "')'");
      return e;
    }
    if (t.type != Tok::Ident) {
      throw SyntaxError(t.pos, t.type == Tok::End ? "unexpected end of input" : "unexpected '" + t.text + "'");
    }
    const std::string kw = upper(t.text);
    if (kw == "AND" || kw == "OR" || kw == "NOT") throw SyntaxError(t.pos, "unexpected keyword " + kw);
    ++pos_;

    if (peek().type != Tok::LParen) {
      auto m = telemetry::parse_metric(t.text);
      if (!m) fail(ErrorCode::UnknownMetric, "unknown metric '" + t.text + "'");
      auto e = std::make_shared<Expr>();
      e->kind = K::Metric;
      e->metric = *m;
      return e;
    }
    ++pos_;
    auto e = std::make_shared<Expr>();
    if (t.text == "mavg") {
      const Token& inner = peek();
      if (inner.type != Tok::Ident) fail(ErrorCode::TypeError, "mavg expects a metric name");
      auto m = telemetry::parse_metric(inner.text);
      if (!m) fail(ErrorCode::UnknownMetric, "unknown metric '" + inner.text + "'");
      ++pos_;
      expect(Tok::Comma, "','");
      const double n = literal_arg("mavg");
      if (n < 1 || n != std::floor(n) || n > 1e6) fail(ErrorCode::TypeError, "mavg window must be an integer >= 1");
      e->kind = K::Mavg;
      e->metric = *m;
      e->number = n;
    } else if (t.text == "visible_sats") {
      const double mask = literal_arg("visible_sats");
      if (!(mask >= 0 && mask <= 90)) fail(ErrorCode::TypeError, "visible_sats mask must be in [0, 90]");
      e->kind = K::VisibleSats;
      e->number = mask;
    } else if (t.text == "weather") {
      if (peek().type != Tok::Ident) fail(ErrorCode::TypeError, "weather expects a key name");
      e->kind = K::Weather;
      e->name = next().text;
    } else {
      fail(ErrorCode::UnknownMetric, "unknown function '" + t.text + "'");
    }
    expect(Tok::RParen, "')'");
    return e;
  }

  std::vector<Token> toks_;
  std::size_t pos_ = 0;
};

void print(const Expr& e, std::string& out);

void print_child(const Expr& child, int min_prec, std::string& out) {
  if (precedence(child.kind) < min_prec) {
    out += '(';
    print(child, out);
    out += ')';
  } else {
    print(child, out);
  }
}

void print(const Expr& e, std::string& out) {
  switch (e.kind) {
    case K::Number:
      out += format_number(e.number);
      return;
    case K::Metric:
      out += telemetry::to_string(e.metric);
      return;
    case K::Mavg:
      out += "mavg(";
      out += telemetry::to_string(e.metric);
      out += ", " + format_number(e.number) + ")";
      return;
    case K::VisibleSats:
      out += "visible_sats(" + format_number(e.number) + ")";
      return;
    case K::Weather:
      out += "weather(" + e.name + ")";
      return;
    case K::Neg:
      out += '-';
      print_child(*e.args[0], precedence(K::Neg), out);
      return;
    case K::Not:
      out += "NOT ";
      print_child(*e.args[0], precedence(K::Not), out);
      return;
    default: {
      // Left-associative binary operators; comparisons do not chain.
      const int p = precedence(e.kind);
      print_child(*e.args[0], is_compare(e.kind) ? p + 1 : p, out);
      out += ' ';
      out += symbol(e.kind);
      out += ' ';
      print_child(*e.args[1], p + 1, out);
    }
  }
}

struct Value {
  bool ok = true;
  double num = 0;
  bool truth = false;
};

Value missing() { return {false, 0, false}; }

Value eval(const Expr& e, const EvalContext& ctx) {
  switch (e.kind) {
    case K::Number:
      return {true, e.number, false};
    case K::Metric: {
      if (!ctx.window || ctx.window->empty()) return missing();
      const auto v = telemetry::metric_value(ctx.window->latest(), e.metric);
      return v ? Value{true, *v, false} : missing();
    }
    case K::Mavg: {
      if (!ctx.window) return missing();
      try {
        return {true, ctx.window->moving_avg(e.metric, static_cast<std::size_t>(e.number), 1), false};
      } catch (const Error&) {
        return missing();
      }
    }
    case K::VisibleSats: {
      if (!ctx.orbital) return missing();
      try {
        return {true, static_cast<double>(ctx.orbital->visible(ctx.now_ms, e.number).size()), false};
      } catch (const Error&) {
        return missing();
      }
    }
    case K::Weather: {
      if (!ctx.weather) return missing();
      const auto v = ctx.weather->value(e.name, ctx.now_ms);
      return v ? Value{true, *v, false} : missing();
    }
    default:
      break;
  }

  std::vector<Value> vals;
  bool ok = true;
  for (const auto& a : e.args) {
    vals.push_back(eval(*a, ctx));
    ok = ok && vals.back().ok;
  }
  if (!ok) return missing();

  const auto num = [](double v) { return Value{true, v, false}; };
  const auto boolean = [](bool b) { return Value{true, 0, b}; };
  switch (e.kind) {
    case K::Neg: return num(-vals[0].num);
    case K::Add: return num(vals[0].num + vals[1].num);
    case K::Sub: return num(vals[0].num - vals[1].num);
    case K::Mul: return num(vals[0].num * vals[1].num);
    case K::Div: return num(vals[0].num / vals[1].num);
    case K::Gt: return boolean(vals[0].num > vals[1].num);
    case K::Ge: return boolean(vals[0].num >= vals[1].num);
    case K::Lt: return boolean(vals[0].num < vals[1].num);
    case K::Le: return boolean(vals[0].num <= vals[1].num);
    case K::Eq: return boolean(vals[0].num == vals[1].num);
    case K::Ne: return boolean(vals[0].num != vals[1].num);
    case K::Not: return boolean(!vals[0].truth);
    case K::And: return boolean(vals[0].truth && vals[1].truth);
    case K::Or: return boolean(vals[0].truth || vals[1].truth);
    default: return missing();
  }
}

}  // namespace

std::string_view to_string(Verdict v) {
  switch (v) {
    case Verdict::Fire: return "FIRE";
    case Verdict::Hold: return "HOLD";
    case Verdict::InsufficientHistory: return "INSUFFICIENT_HISTORY";
  }
  return "?";
}

bool Expr::is_bool() const { return is_compare(kind) || kind == K::Not || kind == K::And || kind == K::Or; }

bool operator==(const Expr& a, const Expr& b) {
  if (a.kind != b.kind || a.args.size() != b.args.size()) return false;
  switch (a.kind) {
    case K::Number: if (a.number != b.number) return false; break;
    case K::Metric: if (a.metric != b.metric) return false; break;
    case K::Mavg: if (a.metric != b.metric || a.number != b.number) return false; break;
    case K::VisibleSats: if (a.number != b.number) return false; break;
    case K::Weather: if (a.name != b.name) return false; break;
    default: break;
  }
  for (std::size_t i = 0; i < a.args.size(); ++i) {
    if (!(*a.args[i] == *b.args[i])) return false;
  }
  return true;
}

ExprPtr parse_trigger(std::string_view text) { return Parser(text).parse(); }

std::string to_string(const Expr& e) {
  std::string out;
  print(e, out);
  return out;
}

Verdict evaluate(const Expr& e, const EvalContext& ctx) {
  const Value v = eval(e, ctx);
  if (!v.ok) return Verdict::InsufficientHistory;
  return v.truth ? Verdict::Fire : Verdict::Hold;
}

std::vector<Verdict> evaluate_trace(const Expr& e, const std::vector<telemetry::TelemetrySample>& trace,
                                    const orbital::OrbitalContext* orbital, std::size_t window_capacity) {
  telemetry::TelemetryWindow window(window_capacity);
  std::vector<Verdict> out;
  out.reserve(trace.size());
  for (const auto& s : trace) {
    window.push(s);
    out.push_back(evaluate(e, {&window, orbital, nullptr, s.ts_ms}));
  }
  return out;
}

TriggerBinding TriggerBinding::make(std::string experiment_id, std::string trigger, double max_runtime_s,
                                    double cooldown_s, int budget) {
  TriggerBinding b;
  b.experiment_id = std::move(experiment_id);
  b.trigger = std::move(trigger);
  b.expr = parse_trigger(b.trigger);
  b.max_runtime_s = max_runtime_s;
  b.cooldown_s = cooldown_s;
  b.budget = budget;
  b.validate();
  return b;
}

void TriggerBinding::validate() const {
  if (!expr) fail(ErrorCode::BadTrigger, "binding has no parsed trigger");
  if (!(max_runtime_s > 0)) fail(ErrorCode::InvalidArgument, "max_runtime_s must be positive");
  if (cooldown_s < 0) fail(ErrorCode::InvalidArgument, "cooldown_s must be non-negative");
  if (budget < 1) fail(ErrorCode::InvalidArgument, "budget must be at least 1");
}

bool TriggerGate::may_fire(UnixMs now) const {
  const auto in_day = std::count_if(fires_.begin(), fires_.end(), [&](UnixMs t) { return now - t < kMsPerDay; });
  if (in_day >= budget_) return false;
  return fires_.empty() || now - fires_.back() >= cooldown_ms_;
}

void TriggerGate::record_fire(UnixMs now) {
  fires_.push_back(now);
  while (!fires_.empty() && now - fires_.front() >= kMsPerDay) fires_.pop_front();
}

std::vector<ActiveInterval> trigger_schedule(const TriggerBinding& b,
                                             const std::vector<telemetry::TelemetrySample>& trace,
                                             const orbital::OrbitalContext* orbital) {
  b.validate();
  const auto verdicts = evaluate_trace(*b.expr, trace, orbital);
  const auto runtime_ms = static_cast<UnixMs>(std::llround(b.max_runtime_s * 1000));
  TriggerGate gate(b);
  std::vector<ActiveInterval> out;
  std::optional<UnixMs> running_since;
  for (std::size_t i = 0; i < trace.size(); ++i) {
    const UnixMs now = trace[i].ts_ms;
    if (running_since) {
      const bool expired = now - *running_since >= runtime_ms;
      const bool released = b.stop_on_hold && verdicts[i] == Verdict::Hold;
      if (!expired && !released) continue;
      out.push_back({*running_since, expired ? *running_since + runtime_ms : now});
      running_since.reset();
    }
    if (verdicts[i] == Verdict::Fire && gate.may_fire(now)) {
      gate.record_fire(now);
      running_since = now;
    }
  }
  if (running_since) {
    const UnixMs end = trace.empty() ? *running_since : trace.back().ts_ms + kMsPerSecond;
    out.push_back({*running_since, std::min(end, *running_since + runtime_ms)});
  }
  return out;
}

SavingsReport savings_report(double period_s, double active_time_s, double bitrate_bps,
                             double header_fraction) {
  if (!(period_s > 0)) fail(ErrorCode::InvalidArgument, "observation period must be positive");
  if (bitrate_bps < 0 || header_fraction < 0 || header_fraction > 1 || active_time_s < 0) {
    fail(ErrorCode::InvalidArgument, "invalid savings parameters");
  }
  SavingsReport r;
  r.active_time_s = std::min(active_time_s, period_s);
  r.transferred_bits = bitrate_bps * period_s;
  r.stored_bits = r.transferred_bits * header_fraction;
  r.triggered_transferred_bits = bitrate_bps * r.active_time_s;
  r.triggered_stored_bits = r.triggered_transferred_bits * header_fraction;
  r.saved_transfer_bits = r.transferred_bits - r.triggered_transferred_bits;
  r.saved_storage_bits = r.stored_bits - r.triggered_stored_bits;
  return r;
}

SavingsReport savings_report(const TriggerBinding& b, double period_s, double bitrate_bps,
                             double header_fraction) {
  const double days = period_s / 86400.0;
  return savings_report(period_s, std::ceil(days) * b.budget * b.max_runtime_s, bitrate_bps, header_fraction);
}

}  // namespace leobed::triggers
