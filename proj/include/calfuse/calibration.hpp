#pragma once

// Expected and maximum calibration error over equal-width confidence bins.
//
// Bin k (1-based) covers (b(k-1), b(k)] with b(k) = double(k) / double(K);
// a confidence of exactly 0 falls in bin 1. Confidence sums are accumulated
// in 2^-60 fixed point so that bin tables merge exactly and results do not
// depend on the order in which pixels are visited.

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "calfuse/error.hpp"
#include "calfuse/parallel.hpp"
#include "calfuse/tensor_store.hpp"

namespace calfuse {

inline constexpr std::size_t kDefaultBins = 10;

struct ConfidencePair {
  double confidence = 0.0;
  bool correct = false;
};

/// Calls fn(confidence, correct) for each pixel in row-major order.
/// Confidence is the max class probability, the prediction its argmax.
template <typename Fn>
void for_each_pixel_confidence(const ProbMap& probs, const LabelMask& truth,
                               Fn&& fn) {
  if (probs.shape() != truth.shape())
    throw data_error("dimension mismatch: probability map " +
                     to_string(probs.shape()) + " vs mask " +
                     to_string(truth.shape()));
  for (std::size_t i = 0; i < probs.pixels(); ++i) {
    const auto p = probs.pixel(i);
    const ClassIndex predicted = argmax(p);
    fn(static_cast<double>(p[predicted]), predicted == truth[i]);
  }
}

inline std::vector<ConfidencePair> pixel_confidence(const ProbMap& probs,
                                                    const LabelMask& truth) {
  std::vector<ConfidencePair> pairs;
  pairs.reserve(probs.pixels());
  for_each_pixel_confidence(probs, truth, [&](double conf, bool correct) {
    pairs.push_back({conf, correct});
  });
  return pairs;
}

inline double bin_upper_edge(std::size_t k, std::size_t bins) {
  return static_cast<double>(k) / static_cast<double>(bins);
}

/// 1-based bin index for a confidence in [0, 1].
inline std::size_t bin_assign(double confidence, std::size_t bins) {
  auto k = static_cast<std::size_t>(
      std::clamp(std::ceil(confidence * static_cast<double>(bins)), 1.0,
                 static_cast<double>(bins)));
  // The product can round across an edge; settle against the edges themselves.
  while (k > 1 && confidence <= bin_upper_edge(k - 1, bins)) --k;
  while (k < bins && confidence > bin_upper_edge(k, bins)) ++k;
  return k;
}

/// Per-bin (count, correct count, confidence sum) triples.
class BinTable {
 public:
  using FixedSum = unsigned __int128;
  static constexpr double kFixedScale = 1152921504606846976.0;  // 2^60

  explicit BinTable(std::size_t bins = kDefaultBins)
      : count_(bins, 0), correct_(bins, 0), confidence_(bins, 0) {
    if (bins == 0) throw validation_error("bin count must be at least 1");
  }

  std::size_t bins() const { return count_.size(); }

  void add(double confidence, bool correct) {
    if (!(confidence >= 0.0 && confidence <= 1.0))
      throw data_error("confidence " + std::to_string(confidence) +
                       " outside [0,1]");
    const std::size_t k = bin_assign(confidence, bins()) - 1;
    ++count_[k];
    if (correct) ++correct_[k];
    confidence_[k] += static_cast<FixedSum>(std::llround(confidence * kFixedScale));
  }

  void merge(const BinTable& other) {
    if (other.bins() != bins())
      throw validation_error("cannot merge bin tables with different bin counts");
    for (std::size_t k = 0; k < bins(); ++k) {
      count_[k] += other.count_[k];
      correct_[k] += other.correct_[k];
      confidence_[k] += other.confidence_[k];
    }
  }

  std::uint64_t count(std::size_t k) const { return count_[k]; }
  std::uint64_t correct(std::size_t k) const { return correct_[k]; }
  FixedSum confidence_fixed(std::size_t k) const { return confidence_[k]; }
  double confidence_sum(std::size_t k) const {
    return static_cast<double>(confidence_[k]) / kFixedScale;
  }

  std::uint64_t total() const {
    std::uint64_t n = 0;
    for (auto c : count_) n += c;
    return n;
  }

  friend bool operator==(const BinTable&, const BinTable&) = default;

 private:
  std::vector<std::uint64_t> count_;
  std::vector<std::uint64_t> correct_;
  std::vector<FixedSum> confidence_;
};

struct BinStat {
  std::size_t index = 0;  // 1-based
  double lower = 0.0;
  double upper = 0.0;
  std::uint64_t count = 0;
  std::optional<double> accuracy;    // absent when count == 0
  std::optional<double> confidence;  // absent when count == 0

  std::optional<double> gap() const {
    if (!accuracy || !confidence) return std::nullopt;
    return std::abs(*accuracy - *confidence);
  }
};

struct ImageCalibration {
  std::string image_id;
  double ece = 0.0;
  double mce = 0.0;
};

struct CalibrationReport {
  std::string model_id;
  std::string split;
  std::size_t bins_count = kDefaultBins;
  std::uint64_t total = 0;
  std::vector<BinStat> bins;
  double ece = 0.0;
  double mce = 0.0;
  std::vector<ImageCalibration> per_image;
};

/// Reduces a bin table to per-bin statistics plus ECE and MCE.
inline CalibrationReport summarize(const BinTable& table) {
  CalibrationReport report;
  report.bins_count = table.bins();
  report.total = table.total();
  if (report.total == 0) throw data_error("calibration needs at least one prediction");
  const double n_total = static_cast<double>(report.total);
  for (std::size_t k = 0; k < table.bins(); ++k) {
    BinStat stat;
    stat.index = k + 1;
    stat.lower = bin_upper_edge(k, table.bins());
    stat.upper = bin_upper_edge(k + 1, table.bins());
    stat.count = table.count(k);
    if (stat.count > 0) {
      const double n = static_cast<double>(stat.count);
      stat.accuracy = static_cast<double>(table.correct(k)) / n;
      stat.confidence = table.confidence_sum(k) / n;
      const double gap = *stat.gap();
      report.ece += (n / n_total) * gap;
      report.mce = std::max(report.mce, gap);
    }
    report.bins.push_back(stat);
  }
  // Rounding in the weights can leave the weighted mean one ulp above the max.
  report.ece = std::min(report.ece, report.mce);
  return report;
}

inline CalibrationReport compute_calibration(std::span<const ConfidencePair> pairs,
                                             std::size_t bins = kDefaultBins) {
  if (pairs.empty()) throw data_error("calibration needs at least one prediction");
  BinTable table(bins);
  for (const auto& p : pairs) table.add(p.confidence, p.correct);
  return summarize(table);
}

inline BinTable bin_table(const ProbMap& probs, const LabelMask& truth,
                          std::size_t bins) {
  BinTable table(bins);
  for_each_pixel_confidence(probs, truth,
                            [&](double conf, bool ok) { table.add(conf, ok); });
  return table;
}

/// Pools per-image tables in order; per-image ECE/MCE use the same bins.
inline CalibrationReport pool_tables(std::span<const BinTable> tables,
                                     std::span<const std::string> image_ids) {
  if (tables.empty()) throw data_error("calibration needs at least one image");
  BinTable pooled(tables.front().bins());
  std::vector<ImageCalibration> per_image;
  for (std::size_t i = 0; i < tables.size(); ++i) {
    pooled.merge(tables[i]);
    const auto single = summarize(tables[i]);
    per_image.push_back({image_ids[i], single.ece, single.mce});
  }
  auto report = summarize(pooled);
  report.per_image = std::move(per_image);
  return report;
}

inline std::string image_context(const std::string& model_id,
                                 const std::string& image_id) {
  return "(model '" + model_id + "', image '" + image_id + "')";
}

/// Loads and class-checks one image's truth mask.
inline LabelMask load_truth(const Manifest& manifest, const ImageEntry& image) {
  try {
    auto mask = read_mask(manifest.mask_path(image));
    validate_classes(mask, manifest.classes());
    return mask;
  } catch (const Error& e) {
    rethrow_with_context(e, "mask of image '" + image.image_id + "'");
  }
}

inline ProbMap load_prediction(const Manifest& manifest, const ModelEntry& model,
                               Split split, const ImageEntry& image) {
  try {
    auto map = read_probmap(manifest.prediction_path(model, split, image.image_id));
    if (map.classes() != manifest.classes())
      throw data_error("probability map has " + std::to_string(map.classes()) +
                       " classes, manifest declares " +
                       std::to_string(manifest.classes()));
    return map;
  } catch (const Error& e) {
    rethrow_with_context(e, image_context(model.model_id, image.image_id));
  }
}

/// Corpus ECE/MCE pooled over every pixel of the split, plus per-image ECE.
inline CalibrationReport calibrate_model(const Manifest& manifest,
                                         const std::string& model_id, Split split,
                                         std::size_t bins = kDefaultBins,
                                         std::size_t threads = 1) {
  const ModelEntry* model = manifest.find_model(model_id);
  if (!model) throw validation_error("model '" + model_id + "' not in manifest");
  const auto& images = manifest.images(split);
  if (images.empty())
    throw validation_error("split " + to_string(split) + " has no images");

  std::vector<BinTable> tables(images.size(), BinTable(bins));
  parallel_for(images.size(), threads, [&](std::size_t i) {
    const auto truth = load_truth(manifest, images[i]);
    const auto probs = load_prediction(manifest, *model, split, images[i]);
    try {
      tables[i] = bin_table(probs, truth, bins);
    } catch (const Error& e) {
      rethrow_with_context(e, image_context(model_id, images[i].image_id));
    }
  });

  std::vector<std::string> ids;
  for (const auto& img : images) ids.push_back(img.image_id);
  auto report = pool_tables(tables, ids);
  report.model_id = model_id;
  report.split = to_string(split);
  return report;
}

// ---------------------------------------------------------------------------
// Serialization

inline constexpr int kReportFormatVersion = 1;

inline nlohmann::ordered_json to_json(const CalibrationReport& r) {
  nlohmann::ordered_json doc;
  doc["format_version"] = kReportFormatVersion;
  doc["model_id"] = r.model_id;
  doc["split"] = r.split;
  doc["K"] = r.bins_count;
  doc["N"] = r.total;
  doc["ece"] = r.ece;
  doc["mce"] = r.mce;
  auto bins = nlohmann::ordered_json::array();
  for (const auto& b : r.bins) {
    bins.push_back({{"k", b.index},
                    {"lower", b.lower},
                    {"upper", b.upper},
                    {"count", b.count},
                    {"acc", optional_json(b.accuracy)},
                    {"conf", optional_json(b.confidence)}});
  }
  doc["bins"] = bins;
  auto per_image = nlohmann::ordered_json::array();
  for (const auto& img : r.per_image)
    per_image.push_back({{"image_id", img.image_id}, {"ece", img.ece}, {"mce", img.mce}});
  doc["per_image"] = per_image;
  return doc;
}

inline CalibrationReport calibration_report_from_json(const nlohmann::json& doc) {
  try {
    if (doc.at("format_version").get<int>() != kReportFormatVersion)
      throw validation_error("calibration report: unsupported format_version");
    CalibrationReport r;
    r.model_id = doc.at("model_id").get<std::string>();
    r.split = doc.value("split", "");
    r.bins_count = doc.at("K").get<std::size_t>();
    r.total = doc.at("N").get<std::uint64_t>();
    r.ece = doc.at("ece").get<double>();
    r.mce = doc.at("mce").get<double>();
    for (const auto& b : doc.at("bins")) {
      BinStat stat;
      stat.index = b.at("k").get<std::size_t>();
      stat.lower = b.at("lower").get<double>();
      stat.upper = b.at("upper").get<double>();
      stat.count = b.at("count").get<std::uint64_t>();
      if (!b.at("acc").is_null()) stat.accuracy = b.at("acc").get<double>();
      if (!b.at("conf").is_null()) stat.confidence = b.at("conf").get<double>();
      r.bins.push_back(stat);
    }
    for (const auto& p : doc.at("per_image"))
      r.per_image.push_back({p.at("image_id").get<std::string>(),
                             p.at("ece").get<double>(), p.value("mce", 0.0)});
    return r;
  } catch (const nlohmann::json::exception& e) {
    throw validation_error(std::string("calibration report: ") + e.what());
  }
}

inline std::string format_number(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

inline std::string format_optional(const std::optional<double>& v) {
  return v ? format_number(*v) : std::string();
}

/// Reliability-diagram table, one row per bin; empty bins leave
/// accuracy, confidence and gap blank.
inline std::string reliability_csv(const CalibrationReport& r) {
  std::string out = "bin_index,lower,upper,count,accuracy,confidence,gap\n";
  for (const auto& b : r.bins) {
    out += std::to_string(b.index) + "," + format_number(b.lower) + "," +
           format_number(b.upper) + "," + std::to_string(b.count) + "," +
           format_optional(b.accuracy) + "," + format_optional(b.confidence) +
           "," + format_optional(b.gap()) + "\n";
  }
  return out;
}

}  // namespace calfuse
