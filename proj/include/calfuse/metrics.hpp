#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

#include "calfuse/error.hpp"
#include "calfuse/tensor_store.hpp"

namespace calfuse {

inline constexpr ClassIndex kDefaultPositiveClass = 1;  // Lung

struct ConfusionCounts {
  std::uint64_t tp = 0;
  std::uint64_t fp = 0;
  std::uint64_t fn = 0;
  std::uint64_t tn = 0;

  std::uint64_t total() const { return tp + fp + fn + tn; }
  friend bool operator==(const ConfusionCounts&, const ConfusionCounts&) = default;
};

inline ConfusionCounts confusion(const LabelMask& pred, const LabelMask& truth,
                                 ClassIndex positive = kDefaultPositiveClass) {
  if (pred.shape() != truth.shape())
    throw data_error("dimension mismatch: prediction " + to_string(pred.shape()) +
                     " vs truth " + to_string(truth.shape()));
  ConfusionCounts c;
  const auto p = pred.data();
  const auto t = truth.data();
  for (std::size_t i = 0; i < p.size(); ++i) {
    const bool predicted = p[i] == positive;
    const bool actual = t[i] == positive;
    if (predicted) {
      actual ? ++c.tp : ++c.fp;
    } else {
      actual ? ++c.fn : ++c.tn;
    }
  }
  return c;
}

/// Each metric is empty when its denominator is zero.
struct MetricSet {
  std::optional<double> accuracy;
  std::optional<double> precision;
  std::optional<double> recall;
  std::optional<double> f1;
  std::optional<double> sensitivity;
  std::optional<double> specificity;
};

inline constexpr std::array<std::string_view, 6> kMetricNames{
    "accuracy", "precision", "recall", "f1", "sensitivity", "specificity"};

inline std::optional<double> metric(const MetricSet& m, std::string_view name) {
  if (name == "accuracy") return m.accuracy;
  if (name == "precision") return m.precision;
  if (name == "recall") return m.recall;
  if (name == "f1") return m.f1;
  if (name == "sensitivity") return m.sensitivity;
  if (name == "specificity") return m.specificity;
  throw validation_error("unknown metric '" + std::string(name) + "'");
}

namespace detail {
inline std::optional<double> ratio(std::uint64_t num, std::uint64_t den) {
  if (den == 0) return std::nullopt;
  return static_cast<double>(num) / static_cast<double>(den);
}
}  // namespace detail

inline MetricSet metrics_from_counts(const ConfusionCounts& c) {
  MetricSet m;
  m.accuracy = detail::ratio(c.tp + c.tn, c.total());
  m.precision = detail::ratio(c.tp, c.tp + c.fp);
  m.recall = detail::ratio(c.tp, c.tp + c.fn);
  m.sensitivity = m.recall;
  m.specificity = detail::ratio(c.tn, c.tn + c.fp);
  if (m.precision && m.recall && (*m.precision + *m.recall) > 0.0)
    m.f1 = 2.0 * *m.precision * *m.recall / (*m.precision + *m.recall);
  return m;
}

inline std::optional<double> false_positive_rate(const ConfusionCounts& c) {
  return detail::ratio(c.fp, c.fp + c.tn);
}

/// Mean and sample standard deviation over the defined values.
struct Summary {
  std::optional<double> mean;
  double std = 0.0;
  std::size_t included = 0;
  std::size_t excluded = 0;
};

inline Summary summarize_values(std::span<const std::optional<double>> values) {
  Summary s;
  double sum = 0.0;
  for (const auto& v : values) {
    if (v) {
      sum += *v;
      ++s.included;
    } else {
      ++s.excluded;
    }
  }
  if (s.included == 0) return s;
  const auto first = std::find_if(values.begin(), values.end(),
                                  [](const auto& v) { return v.has_value(); });
  const bool constant = std::all_of(values.begin(), values.end(), [&](const auto& v) {
    return !v || *v == **first;
  });
  if (constant) {
    s.mean = **first;
    return s;
  }
  const double mean = sum / static_cast<double>(s.included);
  s.mean = mean;
  if (s.included > 1) {
    double sq = 0.0;
    for (const auto& v : values)
      if (v) sq += (*v - mean) * (*v - mean);
    s.std = std::sqrt(sq / static_cast<double>(s.included - 1));
  }
  return s;
}

struct AggregateReport {
  std::array<Summary, kMetricNames.size()> metrics;

  const Summary& operator[](std::string_view name) const {
    for (std::size_t i = 0; i < kMetricNames.size(); ++i)
      if (kMetricNames[i] == name) return metrics[i];
    throw validation_error("unknown metric '" + std::string(name) + "'");
  }
};

inline AggregateReport aggregate(std::span<const MetricSet> per_image) {
  if (per_image.empty()) throw validation_error("cannot aggregate zero images");
  AggregateReport report;
  std::vector<std::optional<double>> column(per_image.size());
  for (std::size_t k = 0; k < kMetricNames.size(); ++k) {
    for (std::size_t i = 0; i < per_image.size(); ++i)
      column[i] = metric(per_image[i], kMetricNames[k]);
    report.metrics[k] = summarize_values(column);
  }
  return report;
}

// ---------------------------------------------------------------------------
// Evaluation reports

struct ImageEvaluation {
  std::string image_id;
  ConfusionCounts counts;
  MetricSet metrics;
};

struct EvalReport {
  std::string method;
  ClassIndex positive_class = kDefaultPositiveClass;
  std::vector<ImageEvaluation> images;
  AggregateReport aggregate;
};

inline EvalReport evaluate_masks(std::string method, ClassIndex positive,
                                 std::span<const std::string> image_ids,
                                 std::span<const LabelMask> predictions,
                                 std::span<const LabelMask> truths) {
  if (image_ids.empty()) throw validation_error("nothing to evaluate: no images");
  if (predictions.size() != image_ids.size() || truths.size() != image_ids.size())
    throw validation_error("evaluation inputs are not aligned");
  EvalReport report;
  report.method = std::move(method);
  report.positive_class = positive;
  std::vector<MetricSet> sets;
  for (std::size_t i = 0; i < image_ids.size(); ++i) {
    ConfusionCounts counts;
    try {
      counts = confusion(predictions[i], truths[i], positive);
    } catch (const Error& e) {
      rethrow_with_context(e, "image '" + image_ids[i] + "'");
    }
    report.images.push_back({image_ids[i], counts, metrics_from_counts(counts)});
    sets.push_back(report.images.back().metrics);
  }
  report.aggregate = aggregate(sets);
  return report;
}

inline nlohmann::ordered_json to_json(const Summary& s) {
  return {{"mean", optional_json(s.mean)},
          {"std", s.std},
          {"included", s.included},
          {"excluded", s.excluded}};
}

inline nlohmann::ordered_json to_json(const EvalReport& r) {
  nlohmann::ordered_json doc;
  doc["format_version"] = 1;
  doc["method"] = r.method;
  doc["positive_class"] = r.positive_class;
  auto images = nlohmann::ordered_json::array();
  for (const auto& img : r.images) {
    nlohmann::ordered_json metrics = nlohmann::ordered_json::object();
    for (auto name : kMetricNames) {
      const auto v = metric(img.metrics, name);
      metrics[std::string(name)] = optional_json(v);
    }
    images.push_back({{"image_id", img.image_id},
                      {"counts",
                       {{"tp", img.counts.tp},
                        {"fp", img.counts.fp},
                        {"fn", img.counts.fn},
                        {"tn", img.counts.tn}}},
                      {"metrics", metrics}});
  }
  doc["images"] = images;
  nlohmann::ordered_json agg = nlohmann::ordered_json::object();
  for (std::size_t k = 0; k < kMetricNames.size(); ++k)
    agg[std::string(kMetricNames[k])] = to_json(r.aggregate.metrics[k]);
  doc["aggregate"] = agg;
  return doc;
}

/// "95.4±2.5" style rendering of a fraction summary in percent.
inline std::string percent_pm(const Summary& s) {
  if (!s.mean) return "n/a";
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.1f±%.1f", 100.0 * *s.mean, 100.0 * s.std);
  return buf;
}

inline std::string eval_csv_header() {
  return "method,metric,mean,std,included,excluded\n";
}

/// One row per metric, fractions at full precision.
inline std::string eval_csv_rows(const EvalReport& r) {
  std::string out;
  for (std::size_t k = 0; k < kMetricNames.size(); ++k) {
    const auto& s = r.aggregate.metrics[k];
    char mean[32] = "", sd[32];
    if (s.mean) std::snprintf(mean, sizeof mean, "%.17g", *s.mean);
    std::snprintf(sd, sizeof sd, "%.17g", s.std);
    out += r.method + "," + std::string(kMetricNames[k]) + "," + mean + "," + sd +
           "," + std::to_string(s.included) + "," + std::to_string(s.excluded) + "\n";
  }
  return out;
}

}  // namespace calfuse
