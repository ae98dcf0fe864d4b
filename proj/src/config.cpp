#include "multisiam/config.h"

#include <charconv>
#include <cmath>
#include <functional>
#include <limits>
#include <map>
#include <set>
#include <sstream>

namespace msiam {

namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

[[noreturn]] void bad(const std::string& key, const std::string& value,
                      const std::string& expected) {
  throw InvalidArgument("config key '" + key + "': invalid value '" + value +
                        "', expected " + expected);
}

double parse_double(const std::string& key, const std::string& v) {
  double out = 0;
  auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc() || p != v.data() + v.size() || !std::isfinite(out)) {
    bad(key, v, "a number");
  }
  return out;
}

std::uint64_t parse_uint(const std::string& key, const std::string& v) {
  std::uint64_t out = 0;
  auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc() || p != v.data() + v.size()) {
    bad(key, v, "a non-negative integer");
  }
  return out;
}

bool parse_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "on" || v == "1") return true;
  if (v == "false" || v == "off" || v == "0") return false;
  bad(key, v, "one of true, false, on, off, 1, 0");
}

template <typename E>
E parse_enum(const std::string& key, const std::string& v,
             const std::vector<std::pair<std::string, E>>& table) {
  std::string valid;
  for (const auto& [name, value] : table) {
    if (name == v) return value;
    valid += (valid.empty() ? "" : ", ") + name;
  }
  bad(key, v, "one of " + valid);
}

const std::vector<std::pair<std::string, OptimizerKind>> kOptimizers = {
    {"sgd", OptimizerKind::kSgd}, {"lars", OptimizerKind::kLars}};
const std::vector<std::pair<std::string, LossMode>> kLossModes = {
    {"cluster", LossMode::kCluster},
    {"wo_kmeans", LossMode::kWoKmeans},
    {"moco", LossMode::kMoco}};
const std::vector<std::pair<std::string, AlignMode>> kAlignModes = {
    {"roi", AlignMode::kRoi},
    {"offset", AlignMode::kOffset},
    {"none", AlignMode::kNone}};
const std::vector<std::pair<std::string, KMeansMetric>> kMetrics = {
    {"cosine", KMeansMetric::kCosine}, {"euclidean", KMeansMetric::kEuclidean}};

template <typename E>
std::string name_of(E v, const std::vector<std::pair<std::string, E>>& table) {
  for (const auto& [name, value] : table)
    if (value == v) return name;
  return "?";
}

std::string fmt(double v) {
  char buf[64];
  auto [p, ec] = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, p);
}

using Setter = std::function<void(TrainConfig&, const std::string&)>;
using Getter = std::function<std::string(const TrainConfig&)>;

struct Field {
  Setter set;
  Getter get;
};

Field size_field(std::size_t TrainConfig::*m, std::size_t min_value,
                 const std::string& key) {
  return {[m, min_value, key](TrainConfig& c, const std::string& v) {
            const auto x = parse_uint(key, v);
            if (x < min_value) bad(key, v, ">= " + std::to_string(min_value));
            c.*m = static_cast<std::size_t>(x);
          },
          [m](const TrainConfig& c) { return std::to_string(c.*m); }};
}

Field real_field(double TrainConfig::*m, double lo, double hi,
                 const std::string& key, bool open_lo = false) {
  return {[=](TrainConfig& c, const std::string& v) {
            const double x = parse_double(key, v);
            if (x > hi || x < lo || (open_lo && x == lo)) {
              bad(key, v,
                  "a value in " + std::string(open_lo ? "(" : "[") + fmt(lo) +
                      ", " + fmt(hi) + "]");
            }
            c.*m = x;
          },
          [m](const TrainConfig& c) { return fmt(c.*m); }};
}

Field bool_field(bool TrainConfig::*m, const std::string& key) {
  return {[m, key](TrainConfig& c, const std::string& v) {
            c.*m = parse_bool(key, v);
          },
          [m](const TrainConfig& c) { return std::string(c.*m ? "true" : "false"); }};
}

template <typename E>
Field enum_field(E TrainConfig::*m,
                 const std::vector<std::pair<std::string, E>>& table,
                 const std::string& key) {
  return {[m, &table, key](TrainConfig& c, const std::string& v) {
            c.*m = parse_enum(key, v, table);
          },
          [m, &table](const TrainConfig& c) { return name_of(c.*m, table); }};
}

// Ordered so that to_text() is stable.
const std::vector<std::pair<std::string, Field>>& fields() {
  constexpr double kInf = std::numeric_limits<double>::max();
  static const std::vector<std::pair<std::string, Field>> table = {
      {"steps", size_field(&TrainConfig::steps, 1, "steps")},
      {"batch_size", size_field(&TrainConfig::batch_size, 1, "batch_size")},
      {"accumulation_steps",
       size_field(&TrainConfig::accumulation_steps, 1, "accumulation_steps")},
      {"lr_base", real_field(&TrainConfig::lr_base, 0, kInf, "lr_base")},
      {"weight_decay",
       real_field(&TrainConfig::weight_decay, 0, kInf, "weight_decay")},
      {"momentum", real_field(&TrainConfig::momentum, 0, 1, "momentum")},
      {"optimizer", enum_field(&TrainConfig::optimizer, kOptimizers, "optimizer")},
      {"lars_trust",
       real_field(&TrainConfig::lars_trust, 0, kInf, "lars_trust", true)},
      {"lars_eps", real_field(&TrainConfig::lars_eps, 0, kInf, "lars_eps")},
      {"predictor_lr_scale",
       real_field(&TrainConfig::predictor_lr_scale, 0, kInf, "predictor_lr_scale")},
      {"lambda", real_field(&TrainConfig::lambda, 0, 1, "lambda")},
      {"loss_mode", enum_field(&TrainConfig::loss_mode, kLossModes, "loss_mode")},
      {"alignment", enum_field(&TrainConfig::alignment, kAlignModes, "alignment")},
      {"normalize_offset",
       bool_field(&TrainConfig::normalize_offset, "normalize_offset")},
      {"self_attention", bool_field(&TrainConfig::self_attention, "self_attention")},
      {"residual", bool_field(&TrainConfig::residual, "residual")},
      {"dense", bool_field(&TrainConfig::dense, "dense")},
      {"head_norm", bool_field(&TrainConfig::head_norm, "head_norm")},
      {"K", size_field(&TrainConfig::k, 1, "K")},
      {"kmeans_metric",
       enum_field(&TrainConfig::kmeans_metric, kMetrics, "kmeans_metric")},
      {"kmeans_max_iter",
       size_field(&TrainConfig::kmeans_max_iter, 1, "kmeans_max_iter")},
      {"temperature",
       real_field(&TrainConfig::temperature, 0, kInf, "temperature", true)},
      {"queue_size", size_field(&TrainConfig::queue_size, 0, "queue_size")},
      {"iou_threshold",
       real_field(&TrainConfig::iou_threshold, 0, 1, "iou_threshold")},
      {"min_scale", real_field(&TrainConfig::min_scale, 0, 1, "min_scale", true)},
      {"tau_base", real_field(&TrainConfig::tau_base, 0, 1, "tau_base")},
      {"symmetrize", bool_field(&TrainConfig::symmetrize, "symmetrize")},
      {"seed",
       {[](TrainConfig& c, const std::string& v) { c.seed = parse_uint("seed", v); },
        [](const TrainConfig& c) { return std::to_string(c.seed); }}},
      {"image_size", size_field(&TrainConfig::image_size, 8, "image_size")},
      {"view_size", size_field(&TrainConfig::view_size, 8, "view_size")},
      {"corpus_size", size_field(&TrainConfig::corpus_size, 1, "corpus_size")},
      {"eval_size", size_field(&TrainConfig::eval_size, 1, "eval_size")},
      {"min_instances", size_field(&TrainConfig::min_instances, 1, "min_instances")},
      {"max_instances", size_field(&TrainConfig::max_instances, 1, "max_instances")},
  };
  return table;
}

const Field& find_field(const std::string& key) {
  for (const auto& [name, f] : fields())
    if (name == key) return f;
  std::string valid;
  for (const auto& [name, f] : fields()) valid += (valid.empty() ? "" : ", ") + name;
  throw InvalidArgument("unknown config key '" + key + "' (valid keys: " + valid +
                        ")");
}

} // namespace

std::string to_string(OptimizerKind v) { return name_of(v, kOptimizers); }
std::string to_string(LossMode v) { return name_of(v, kLossModes); }
std::string to_string(AlignMode v) { return name_of(v, kAlignModes); }
std::string to_string(KMeansMetric v) { return name_of(v, kMetrics); }

std::vector<std::string> config_keys() {
  std::vector<std::string> out;
  for (const auto& [name, f] : fields()) out.push_back(name);
  return out;
}

std::string TrainConfig::to_text() const {
  std::string out;
  for (const auto& [name, f] : fields()) out += name + "=" + f.get(*this) + "\n";
  return out;
}

TrainConfig parse_config(
    const std::string& text,
    const std::vector<std::pair<std::string, std::string>>& overrides) {
  std::vector<std::pair<std::string, std::string>> entries;
  std::istringstream in(text);
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (const auto hash = line.find('#'); hash != std::string::npos) {
      line.resize(hash);
    }
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      throw InvalidArgument("config line " + std::to_string(lineno) +
                            ": expected key=value, got '" + line + "'");
    }
    entries.emplace_back(trim(line.substr(0, eq)), trim(line.substr(eq + 1)));
  }
  entries.insert(entries.end(), overrides.begin(), overrides.end());

  TrainConfig cfg;
  bool residual_set = false;
  for (const auto& [key, value] : entries) {
    find_field(key).set(cfg, value);
    residual_set = residual_set || key == "residual";
  }
  if (!residual_set) {
    cfg.residual = cfg.alignment == AlignMode::kRoi;
  }
  if (cfg.min_instances > cfg.max_instances) {
    throw InvalidArgument("config key 'min_instances': exceeds max_instances");
  }
  if (cfg.view_size % 8 != 0) {
    throw InvalidArgument("config key 'view_size': must be divisible by 8");
  }
  return cfg;
}

} // namespace msiam
