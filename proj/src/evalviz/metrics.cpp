#include <cmath>
#include <cstdio>
#include <map>
#include <set>
#include <sstream>

#include "lne/evalviz.hpp"

namespace lne::evalviz {

namespace {

void check_lengths(std::size_t a, std::size_t b, const char* what) {
  if (a != b) throw EvalError(std::string(what) + ": predictions and targets differ in length");
  if (a < 2) throw EvalError(std::string(what) + ": need at least two samples");
}

}  // namespace

double r2(std::span<const double> predictions, std::span<const double> targets) {
  check_lengths(predictions.size(), targets.size(), "r2");
  double mean = 0.0;
  for (double y : targets) mean += y;
  mean /= static_cast<double>(targets.size());
  double ss_res = 0.0, ss_tot = 0.0;
  for (std::size_t i = 0; i < targets.size(); ++i) {
    ss_res += (targets[i] - predictions[i]) * (targets[i] - predictions[i]);
    ss_tot += (targets[i] - mean) * (targets[i] - mean);
  }
  if (ss_tot == 0.0) throw EvalError("r2 is undefined for constant targets");
  return 1.0 - ss_res / ss_tot;
}

double rmse(std::span<const double> predictions, std::span<const double> targets) {
  check_lengths(predictions.size(), targets.size(), "rmse");
  double acc = 0.0;
  for (std::size_t i = 0; i < targets.size(); ++i) acc += (targets[i] - predictions[i]) * (targets[i] - predictions[i]);
  return std::sqrt(acc / static_cast<double>(targets.size()));
}

double bacc(std::span<const int> predicted, std::span<const int> truth) {
  if (predicted.size() != truth.size()) throw EvalError("bacc: predictions and labels differ in length");
  if (truth.empty()) throw EvalError("bacc: no samples");
  std::map<int, std::pair<std::size_t, std::size_t>> per_class;  // hits, count
  for (std::size_t i = 0; i < truth.size(); ++i) {
    auto& c = per_class[truth[i]];
    ++c.second;
    if (predicted[i] == truth[i]) ++c.first;
  }
  double acc = 0.0;
  for (const auto& [label, c] : per_class) acc += static_cast<double>(c.first) / static_cast<double>(c.second);
  return acc / static_cast<double>(per_class.size());
}

std::vector<double> class_weights(std::span<const int> labels, std::size_t num_classes) {
  std::vector<double> count(num_classes, 0.0);
  for (int y : labels) {
    if (y < 0 || static_cast<std::size_t>(y) >= num_classes) throw EvalError("class label out of range");
    count[static_cast<std::size_t>(y)] += 1.0;
  }
  std::vector<double> w(num_classes, 0.0);
  double total = 0.0;
  for (std::size_t c = 0; c < num_classes; ++c) {
    if (count[c] == 0.0) throw EvalError("class " + std::to_string(c) + " has no training samples");
    w[c] = 1.0 / count[c];
    total += w[c];
  }
  for (auto& v : w) v /= total;
  return w;
}

// ---------------------------------------------------------------------------

std::string metrics_csv_header() { return "task,method,mode,fold,r2,rmse,bacc,n_samples"; }

namespace {

std::string opt_field(const std::optional<double>& v) {
  if (!v) return "";
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.17g", *v);
  return buf;
}

std::optional<double> parse_opt(const std::string& s) {
  if (s.empty()) return std::nullopt;
  return std::stod(s);
}

}  // namespace

std::string metrics_csv_row(const MetricsRecord& r) {
  return r.task + "," + r.method + "," + r.mode + "," + std::to_string(r.fold) + "," + opt_field(r.r2) + "," +
         opt_field(r.rmse) + "," + opt_field(r.bacc) + "," + std::to_string(r.n_samples);
}

std::vector<MetricsRecord> parse_metrics_csv(const std::string& text) {
  std::istringstream in(text);
  std::string line;
  if (!std::getline(in, line) || line != metrics_csv_header()) throw EvalError("metrics table lacks the expected header");
  std::vector<MetricsRecord> out;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::vector<std::string> f;
    std::string cell;
    std::istringstream ls(line);
    while (std::getline(ls, cell, ',')) f.push_back(cell);
    if (!line.empty() && line.back() == ',') f.emplace_back();
    if (f.size() != 8) throw EvalError("malformed metrics row: " + line);
    MetricsRecord r;
    r.task = f[0];
    r.method = f[1];
    r.mode = f[2];
    r.fold = std::stoul(f[3]);
    r.r2 = parse_opt(f[4]);
    r.rmse = parse_opt(f[5]);
    r.bacc = parse_opt(f[6]);
    r.n_samples = std::stoul(f[7]);
    out.push_back(r);
  }
  return out;
}

MetricsRecord make_record(Task task, const std::string& method, HeadMode mode, std::size_t fold, const Scores& s) {
  MetricsRecord r;
  r.task = to_string(task);
  r.method = method;
  r.mode = to_string(mode);
  r.fold = fold;
  if (task == Task::Age) {
    r.r2 = s.r2;
    r.rmse = s.rmse;
  } else {
    r.bacc = s.bacc;
  }
  r.n_samples = s.n;
  return r;
}

std::vector<Aggregate> aggregate(const std::vector<MetricsRecord>& records) {
  std::map<std::tuple<std::string, std::string, std::string, std::string>, std::vector<double>> groups;
  std::vector<std::tuple<std::string, std::string, std::string, std::string>> order;
  auto push = [&](const MetricsRecord& r, const char* metric, const std::optional<double>& v) {
    if (!v) return;
    auto key = std::make_tuple(r.task, r.method, r.mode, std::string(metric));
    if (!groups.count(key)) order.push_back(key);
    groups[key].push_back(*v);
  };
  for (const auto& r : records) {
    push(r, "r2", r.r2);
    push(r, "rmse", r.rmse);
    push(r, "bacc", r.bacc);
  }
  std::vector<Aggregate> out;
  for (const auto& key : order) {
    const auto& v = groups[key];
    Aggregate a;
    std::tie(a.task, a.method, a.mode, a.metric) = key;
    a.n = v.size();
    for (double x : v) a.mean += x;
    a.mean /= static_cast<double>(v.size());
    if (v.size() > 1) {
      double ss = 0.0;
      for (double x : v) ss += (x - a.mean) * (x - a.mean);
      a.sd = std::sqrt(ss / static_cast<double>(v.size() - 1));
    }
    out.push_back(a);
  }
  return out;
}

}  // namespace lne::evalviz
