#pragma once

// Batch commands: calibrate -> derive weights -> fuse -> evaluate -> report,
// plus synthesis and overlays. Each command computes everything in memory
// and only then creates the output directory and writes files, so a failed
// run leaves no partial output. Per-image work fans out over `threads`
// workers; every reduction runs in manifest order.

#include <algorithm>
#include <cstdio>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "calfuse/calibration.hpp"
#include "calfuse/error.hpp"
#include "calfuse/fusion.hpp"
#include "calfuse/metrics.hpp"
#include "calfuse/parallel.hpp"
#include "calfuse/synth.hpp"
#include "calfuse/tensor_store.hpp"

namespace calfuse::pipeline {

struct RunConfig {
  fs::path manifest;
  fs::path out;
  Split split = Split::testing;
  std::size_t bins = kDefaultBins;
  double epsilon = kDefaultEpsilon;
  ClassIndex positive = kDefaultPositiveClass;
  std::size_t threads = 1;
};

inline void validate(const RunConfig& config) {
  if (config.out.empty()) throw usage_error("--out is required");
  if (config.bins == 0) throw usage_error("--bins must be at least 1");
  if (!(config.epsilon > 0.0)) throw usage_error("--epsilon must be positive");
  if (config.threads == 0) throw usage_error("--threads must be at least 1");
}

// ---------------------------------------------------------------------------
// Output helpers

inline void ensure_directory(const fs::path& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw io_error("cannot create directory " + dir.string() + ": " + ec.message());
}

inline void write_text(const fs::path& path, const std::string& text) {
  detail::write_file(path, text);
}

inline void write_json(const fs::path& path, const nlohmann::ordered_json& doc) {
  write_text(path, doc.dump(2) + "\n");
}

// ---------------------------------------------------------------------------
// calibrate

inline std::vector<CalibrationReport> calibrate_models(
    const Manifest& manifest, std::span<const std::string> model_ids, Split split,
    std::size_t bins, std::size_t threads) {
  std::vector<CalibrationReport> reports;
  for (const auto& id : model_ids)
    reports.push_back(calibrate_model(manifest, id, split, bins, threads));
  return reports;
}

inline std::vector<std::string> all_model_ids(const Manifest& manifest) {
  std::vector<std::string> ids;
  for (const auto& m : manifest.models) ids.push_back(m.model_id);
  return ids;
}

/// One <model>.calibration.json and <model>.reliability.csv per model.
inline std::vector<CalibrationReport> cmd_calibrate(const RunConfig& config) {
  validate(config);
  const auto manifest = load_manifest(config.manifest);
  const auto reports = calibrate_models(manifest, all_model_ids(manifest), config.split,
                                        config.bins, config.threads);
  ensure_directory(config.out);
  for (const auto& r : reports) {
    write_json(config.out / (r.model_id + ".calibration.json"), to_json(r));
    write_text(config.out / (r.model_id + ".reliability.csv"), reliability_csv(r));
  }
  return reports;
}

// ---------------------------------------------------------------------------
// fuse

struct FusionOutcome {
  FusionConfig config;
  std::vector<std::string> image_ids;
  std::vector<LabelMask> masks;
  CalibrationReport calibration;  // ensemble confidence on the fused split
  nlohmann::ordered_json log;
};

namespace detail {

inline std::vector<std::string> resolve_members(const Manifest& manifest,
                                                std::span<const std::string> requested) {
  if (requested.empty()) return all_model_ids(manifest);
  return canonical_members(manifest, requested);
}

inline bool any_needs_calibration(std::span<const FusionMethod> methods) {
  return std::any_of(methods.begin(), methods.end(), needs_calibration);
}

inline void check_methods(std::span<const FusionMethod> methods,
                          std::span<const std::string> members) {
  if (methods.empty()) throw usage_error("at least one fusion method is required");
  for (auto m : methods) {
    if (members.size() < 2) {
      if (m == FusionMethod::mvem)
        throw validation_error(
            "mvem needs its three constituents (majority, weighted_ece, "
            "weighted_mce), which need at least 2 members");
      throw validation_error(to_string(m) + " needs at least 2 members");
    }
  }
}

}  // namespace detail

/// Weights always come from the validation split.
inline std::vector<CalibrationReport> validation_reports(
    const Manifest& manifest, std::span<const std::string> members,
    std::span<const FusionMethod> methods, std::size_t bins, std::size_t threads) {
  if (!detail::any_needs_calibration(methods)) return {};
  if (manifest.images(Split::validation).empty())
    throw validation_error(
        "weighted fusion needs calibration on the validation split, which is empty");
  return calibrate_models(manifest, members, Split::validation, bins, threads);
}

/// Fuses every image of `split` with each method; members load once per image.
inline std::vector<FusionOutcome> run_fusion(const Manifest& manifest, Split split,
                                             std::span<const FusionMethod> methods,
                                             std::span<const std::string> members,
                                             std::span<const CalibrationReport> reports,
                                             std::size_t bins, double epsilon,
                                             std::size_t threads) {
  const auto& images = manifest.images(split);
  if (images.empty()) throw validation_error("split " + to_string(split) + " has no images");

  std::vector<FusionOutcome> outcomes;
  for (auto method : methods) {
    FusionOutcome o;
    o.config = {method, {members.begin(), members.end()}, bins, epsilon};
    validate_config(o.config);
    o.masks.resize(images.size());
    o.log = fusion_log(o.config, reports, to_string(split));
    outcomes.push_back(std::move(o));
  }
  MemberWeights weights;
  if (detail::any_needs_calibration(methods))
    weights = member_weights(outcomes.front().config, reports);

  std::vector<std::vector<BinTable>> tables(methods.size(),
                                            std::vector<BinTable>(images.size(), BinTable(bins)));
  parallel_for(images.size(), threads, [&](std::size_t i) {
    const auto truth = load_truth(manifest, images[i]);
    const auto maps = load_members(manifest, split, images[i], members);
    try {
      for (std::size_t k = 0; k < methods.size(); ++k) {
        auto fused = fuse(maps, methods[k], weights);
        tables[k][i] = ensemble_bin_table(maps, methods[k], weights, fused, truth, bins);
        outcomes[k].masks[i] = std::move(fused);
      }
    } catch (const Error& e) {
      rethrow_with_context(e, "image '" + images[i].image_id + "'");
    }
  });

  std::vector<std::string> ids;
  for (const auto& img : images) ids.push_back(img.image_id);
  for (std::size_t k = 0; k < methods.size(); ++k) {
    outcomes[k].image_ids = ids;
    outcomes[k].calibration = pool_tables(tables[k], ids);
    outcomes[k].calibration.model_id = "ensemble:" + to_string(methods[k]);
    outcomes[k].calibration.split = to_string(split);
  }
  return outcomes;
}

struct FuseRequest {
  RunConfig run;
  std::vector<FusionMethod> methods;
  std::vector<std::string> members;  // empty = every model
};

/// Writes <out>/<method>/<image_id>.png, fusion_log.json and calibration.json.
inline std::vector<FusionOutcome> cmd_fuse(const FuseRequest& request) {
  validate(request.run);
  const auto manifest = load_manifest(request.run.manifest);
  const auto members = detail::resolve_members(manifest, request.members);
  detail::check_methods(request.methods, members);
  const auto reports = validation_reports(manifest, members, request.methods,
                                          request.run.bins, request.run.threads);
  auto outcomes = run_fusion(manifest, request.run.split, request.methods, members,
                             reports, request.run.bins, request.run.epsilon,
                             request.run.threads);
  for (const auto& o : outcomes) {
    const auto dir = request.run.out / to_string(o.config.method);
    ensure_directory(dir);
    for (std::size_t i = 0; i < o.masks.size(); ++i)
      write_mask(o.masks[i], dir / (o.image_ids[i] + ".png"));
    write_json(dir / "fusion_log.json", o.log);
    write_json(dir / "calibration.json", to_json(o.calibration));
  }
  return outcomes;
}

// ---------------------------------------------------------------------------
// evaluate

struct EvaluateRequest {
  RunConfig run;
  std::optional<fs::path> predictions;  // directory of <image_id>.png masks
  std::optional<std::string> model_id;  // or one model's argmax masks
  std::string name;                     // report label; defaults from source
};

inline std::string evaluation_name(const EvaluateRequest& request) {
  if (!request.name.empty()) return request.name;
  if (request.model_id) return *request.model_id;
  auto p = request.predictions->lexically_normal();
  if (p.filename().empty()) p = p.parent_path();
  return p.filename().string();
}

inline EvalReport cmd_evaluate(const EvaluateRequest& request) {
  validate(request.run);
  if (request.predictions.has_value() == request.model_id.has_value())
    throw usage_error("evaluate needs exactly one of --predictions or --model");
  const auto manifest = load_manifest(request.run.manifest);
  if (request.run.positive >= manifest.classes())
    throw usage_error("--positive-class " + std::to_string(request.run.positive) +
                      " out of range for " + std::to_string(manifest.classes()) +
                      " classes");
  const ModelEntry* model = nullptr;
  if (request.model_id) {
    model = manifest.find_model(*request.model_id);
    if (!model) throw validation_error("model '" + *request.model_id + "' not in manifest");
  }
  const auto& images = manifest.images(request.run.split);
  if (images.empty())
    throw validation_error("split " + to_string(request.run.split) + " has no images");

  std::vector<std::string> ids;
  for (const auto& img : images) ids.push_back(img.image_id);
  std::vector<LabelMask> preds(images.size()), truths(images.size());
  parallel_for(images.size(), request.run.threads, [&](std::size_t i) {
    truths[i] = load_truth(manifest, images[i]);
    if (model) {
      preds[i] = argmax_mask(load_prediction(manifest, *model, request.run.split, images[i]));
    } else {
      const auto path = *request.predictions / (images[i].image_id + ".png");
      try {
        preds[i] = read_mask(path);
        validate_classes(preds[i], manifest.classes());
      } catch (const Error& e) {
        rethrow_with_context(e, "prediction for image '" + images[i].image_id + "'");
      }
    }
  });
  auto report = evaluate_masks(evaluation_name(request), request.run.positive, ids,
                               preds, truths);
  ensure_directory(request.run.out);
  write_json(request.run.out / (report.method + ".eval.json"), to_json(report));
  write_text(request.run.out / (report.method + ".eval.csv"),
             eval_csv_header() + eval_csv_rows(report));
  return report;
}

// ---------------------------------------------------------------------------
// overlay

struct Rgb {
  std::uint8_t r, g, b;
};
inline constexpr Rgb kBackgroundColor{128, 0, 128};  // purple
inline constexpr Rgb kIncorrectColor{255, 255, 0};   // yellow
inline constexpr Rgb kCorrectColor{0, 255, 0};       // green

/// Purple for correct non-positive pixels, yellow for errors, green for
/// correctly predicted positive pixels. Returns interleaved RGB.
inline std::vector<std::uint8_t> overlay_pixels(const LabelMask& pred,
                                                const LabelMask& truth,
                                                ClassIndex positive) {
  if (pred.shape() != truth.shape())
    throw data_error("dimension mismatch: prediction " + to_string(pred.shape()) +
                     " vs truth " + to_string(truth.shape()));
  std::vector<std::uint8_t> rgb;
  rgb.reserve(pred.pixels() * 3);
  for (std::size_t i = 0; i < pred.pixels(); ++i) {
    const Rgb c = pred[i] != truth[i]     ? kIncorrectColor
                  : truth[i] == positive ? kCorrectColor
                                         : kBackgroundColor;
    rgb.insert(rgb.end(), {c.r, c.g, c.b});
  }
  return rgb;
}

inline void cmd_overlay(const fs::path& pred_path, const fs::path& truth_path,
                        const fs::path& out, ClassIndex positive) {
  if (out.empty()) throw usage_error("--out is required");
  const auto pred = read_mask(pred_path);
  const auto truth = read_mask(truth_path);
  const auto rgb = overlay_pixels(pred, truth, positive);
  const auto bytes = encode_rgb_png(pred.height(), pred.width(), rgb);
  if (out.has_parent_path()) ensure_directory(out.parent_path());
  write_text(out, bytes);
}

// ---------------------------------------------------------------------------
// synth

/// Five models whose F1 spans roughly 91-95% and ECE roughly 2-6.5%, with
/// calibration tracking accuracy (best model best calibrated).
inline synth::SynthSpec default_preset(std::uint64_t seed = 42) {
  synth::SynthSpec spec;
  spec.seed = seed;
  spec.height = 128;
  spec.width = 128;
  spec.training = 4;
  spec.validation = 10;
  spec.testing = 20;
  spec.correlation = 0.5;
  spec.models = {{"model_a", 3.0, 0.62, 1.55},
                 {"model_b", 3.0, 0.75, 1.60},
                 {"model_c", 3.0, 0.85, 1.70},
                 {"model_d", 3.0, 0.95, 1.75},
                 {"model_e", 3.0, 1.10, 1.80}};
  return spec;
}

inline Manifest cmd_synth(const synth::SynthSpec& spec, const fs::path& out,
                          std::size_t threads) {
  if (out.empty()) throw usage_error("--out is required");
  synth::validate(spec);
  ensure_directory(out);
  return synth::gen_dataset(spec, out, threads);
}

// ---------------------------------------------------------------------------
// report

struct ComparisonRow {
  std::string name;
  std::string kind;  // "model" or "ensemble"
  EvalReport evaluation;
  CalibrationReport calibration;
};

inline Summary per_image_summary(const CalibrationReport& r, bool mce) {
  std::vector<std::optional<double>> values;
  for (const auto& img : r.per_image) values.emplace_back(mce ? img.mce : img.ece);
  return summarize_values(values);
}

/// Individual members plus each fusion method, all on one split.
inline std::vector<ComparisonRow> compare(const Manifest& manifest, Split split,
                                          std::span<const std::string> members,
                                          std::span<const FusionMethod> methods,
                                          std::span<const CalibrationReport> reports,
                                          std::size_t bins, double epsilon,
                                          ClassIndex positive, std::size_t threads,
                                          bool include_members = true) {
  const auto& images = manifest.images(split);
  if (images.empty()) throw validation_error("split " + to_string(split) + " has no images");
  std::vector<std::string> ids;
  for (const auto& img : images) ids.push_back(img.image_id);

  std::vector<ComparisonRow> rows;
  if (include_members) {
    std::vector<std::vector<LabelMask>> preds(members.size(),
                                              std::vector<LabelMask>(images.size()));
    std::vector<std::vector<BinTable>> tables(members.size(),
                                              std::vector<BinTable>(images.size(), BinTable(bins)));
    std::vector<LabelMask> truths(images.size());
    parallel_for(images.size(), threads, [&](std::size_t i) {
      truths[i] = load_truth(manifest, images[i]);
      for (std::size_t m = 0; m < members.size(); ++m) {
        const auto* model = manifest.find_model(members[m]);
        const auto probs = load_prediction(manifest, *model, split, images[i]);
        try {
          tables[m][i] = bin_table(probs, truths[i], bins);
        } catch (const Error& e) {
          rethrow_with_context(e, image_context(members[m], images[i].image_id));
        }
        preds[m][i] = argmax_mask(probs);
      }
    });
    for (std::size_t m = 0; m < members.size(); ++m) {
      ComparisonRow row{members[m], "model",
                        evaluate_masks(members[m], positive, ids, preds[m], truths),
                        pool_tables(tables[m], ids)};
      row.calibration.model_id = members[m];
      row.calibration.split = to_string(split);
      rows.push_back(std::move(row));
    }
  }

  if (!methods.empty()) {
    const auto outcomes =
        run_fusion(manifest, split, methods, members, reports, bins, epsilon, threads);
    std::vector<LabelMask> truths(images.size());
    parallel_for(images.size(), threads,
                 [&](std::size_t i) { truths[i] = load_truth(manifest, images[i]); });
    for (const auto& o : outcomes) {
      const auto name = to_string(o.config.method);
      rows.push_back({name, "ensemble",
                      evaluate_masks(name, positive, ids, o.masks, truths),
                      o.calibration});
    }
  }
  return rows;
}

inline constexpr std::array<std::string_view, 4> kTableMetrics{
    "accuracy", "sensitivity", "specificity", "f1"};

inline nlohmann::ordered_json rows_to_json(std::span<const ComparisonRow> rows) {
  auto list = nlohmann::ordered_json::array();
  for (const auto& row : rows) {
    nlohmann::ordered_json metrics = nlohmann::ordered_json::object();
    for (std::size_t k = 0; k < kMetricNames.size(); ++k)
      metrics[std::string(kMetricNames[k])] = to_json(row.evaluation.aggregate.metrics[k]);
    metrics["ece"] = to_json(per_image_summary(row.calibration, false));
    metrics["mce"] = to_json(per_image_summary(row.calibration, true));
    list.push_back({{"name", row.name},
                    {"kind", row.kind},
                    {"corpus_ece", row.calibration.ece},
                    {"corpus_mce", row.calibration.mce},
                    {"metrics", metrics}});
  }
  return list;
}

inline std::string rows_to_csv(std::span<const ComparisonRow> rows) {
  std::string out = eval_csv_header();
  for (const auto& row : rows) {
    out += eval_csv_rows(row.evaluation);
    for (bool mce : {false, true}) {
      const auto s = per_image_summary(row.calibration, mce);
      out += row.name + (mce ? ",mce," : ",ece,") + format_optional(s.mean) + "," +
             format_number(s.std) + "," + std::to_string(s.included) + "," +
             std::to_string(s.excluded) + "\n";
    }
  }
  return out;
}

/// Percent table, mean±std over images, one decimal.
inline std::string rows_to_text(std::span<const ComparisonRow> rows) {
  std::size_t width = 8;
  for (const auto& row : rows) width = std::max(width, row.name.size());
  char buf[256];
  std::string out;
  std::snprintf(buf, sizeof buf, "%-*s  %-14s  %-14s  %-14s  %-14s  %-14s  %-14s\n",
                static_cast<int>(width), "model", "Accuracy(%)", "Sensitivity(%)",
                "Specificity(%)", "F1score(%)", "ECE(%)", "MCE(%)");
  out += buf;
  while (out.size() > 1 && out[out.size() - 2] == ' ') out.erase(out.size() - 2, 1);
  for (const auto& row : rows) {
    std::snprintf(buf, sizeof buf, "%-*s", static_cast<int>(width), row.name.c_str());
    std::string line = buf;
    for (auto metric : kTableMetrics) {
      std::snprintf(buf, sizeof buf, "  %-15s",
                    percent_pm(row.evaluation.aggregate[metric]).c_str());
      line += buf;
    }
    for (bool mce : {false, true}) {
      std::snprintf(buf, sizeof buf, "  %-15s",
                    percent_pm(per_image_summary(row.calibration, mce)).c_str());
      line += buf;
    }
    while (!line.empty() && line.back() == ' ') line.pop_back();
    out += line + "\n";
  }
  return out;
}

struct ReportRequest {
  RunConfig run;
  std::vector<FusionMethod> methods;       // default: all four
  std::vector<std::string> members;        // empty = every model, in manifest order
  std::vector<std::size_t> ensemble_sizes; // prefixes of `members` as listed
};

struct ReportResult {
  std::vector<ComparisonRow> rows;
  std::vector<std::pair<std::size_t, std::vector<ComparisonRow>>> by_size;
};

/// Side-by-side comparison of members and ensembles, optionally repeated for
/// growing ensembles built from prefixes of the member list.
inline ReportResult cmd_report(const ReportRequest& request) {
  validate(request.run);
  const auto manifest = load_manifest(request.run.manifest);
  if (request.run.positive >= manifest.classes())
    throw usage_error("--positive-class out of range");
  std::vector<std::string> listed = request.members;
  if (listed.empty()) listed = all_model_ids(manifest);
  const auto members = canonical_members(manifest, listed);
  std::vector<FusionMethod> methods = request.methods;
  if (methods.empty()) methods.assign(kAllMethods.begin(), kAllMethods.end());
  detail::check_methods(methods, members);
  for (auto n : request.ensemble_sizes)
    if (n < 2 || n > listed.size())
      throw usage_error("ensemble size " + std::to_string(n) + " outside 2.." +
                        std::to_string(listed.size()));

  const auto reports = validation_reports(manifest, members, methods, request.run.bins,
                                          request.run.threads);
  ReportResult result;
  result.rows = compare(manifest, request.run.split, members, methods, reports,
                        request.run.bins, request.run.epsilon, request.run.positive,
                        request.run.threads);
  for (auto n : request.ensemble_sizes) {
    const std::vector<std::string> prefix(listed.begin(),
                                          listed.begin() + static_cast<std::ptrdiff_t>(n));
    const auto subset = canonical_members(manifest, prefix);
    result.by_size.emplace_back(
        n, compare(manifest, request.run.split, subset, methods, reports, request.run.bins,
                   request.run.epsilon, request.run.positive, request.run.threads, false));
  }

  ensure_directory(request.run.out);
  nlohmann::ordered_json doc;
  doc["format_version"] = kReportFormatVersion;
  doc["split"] = to_string(request.run.split);
  doc["positive_class"] = request.run.positive;
  doc["K"] = request.run.bins;
  doc["epsilon"] = request.run.epsilon;
  doc["rows"] = rows_to_json(result.rows);
  write_json(request.run.out / "comparison.json", doc);
  write_text(request.run.out / "comparison.csv", rows_to_csv(result.rows));
  write_text(request.run.out / "comparison.txt", rows_to_text(result.rows));
  if (!result.by_size.empty()) {
    nlohmann::ordered_json sizes = nlohmann::ordered_json::array();
    std::string text;
    for (const auto& [n, rows] : result.by_size) {
      std::vector<std::string> used(listed.begin(),
                                    listed.begin() + static_cast<std::ptrdiff_t>(n));
      sizes.push_back({{"size", n}, {"members", used}, {"rows", rows_to_json(rows)}});
      text += "Ensemble " + std::to_string(n) + " (";
      for (std::size_t i = 0; i < used.size(); ++i) text += (i ? " + " : "") + used[i];
      text += ")\n" + rows_to_text(rows) + "\n";
    }
    nlohmann::ordered_json sdoc;
    sdoc["format_version"] = kReportFormatVersion;
    sdoc["split"] = to_string(request.run.split);
    sdoc["sizes"] = sizes;
    write_json(request.run.out / "ensemble_sizes.json", sdoc);
    write_text(request.run.out / "ensemble_sizes.txt", text);
  }
  return result;
}

}  // namespace calfuse::pipeline
