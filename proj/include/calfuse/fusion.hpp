#pragma once

// Pixelwise fusion of several models' predictions.
//
// Every method is a vote over member argmax labels. Each member contributes
// its weight (1 for majority, 1/max(CE, epsilon) for the calibrated methods)
// to the class it predicts; the class with the largest weight sum wins.
// Ties are broken by the summed probability mass of the tied classes across
// all members, then by the lowest class index. Weight sums within a relative
// kTieTolerance of the maximum count as tied so that rescaling every CE by the
// same constant cannot flip an exact tie through rounding.
//
// MVEM runs majority, ECE-weighted and MCE-weighted fusion and takes the
// pixelwise majority of the three results (same tie cascade).

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

#include "calfuse/calibration.hpp"
#include "calfuse/error.hpp"
#include "calfuse/tensor_store.hpp"

namespace calfuse {

enum class FusionMethod { majority, weighted_ece, weighted_mce, mvem };

inline constexpr std::array<FusionMethod, 4> kAllMethods{
    FusionMethod::majority, FusionMethod::weighted_ece,
    FusionMethod::weighted_mce, FusionMethod::mvem};

inline constexpr double kDefaultEpsilon = 1e-6;
inline constexpr double kTieTolerance = 1e-9;
inline constexpr std::string_view kTieRule =
    "weight-sum>probability-mass>lowest-class/v1";

inline std::string to_string(FusionMethod m) {
  switch (m) {
    case FusionMethod::majority: return "majority";
    case FusionMethod::weighted_ece: return "weighted_ece";
    case FusionMethod::weighted_mce: return "weighted_mce";
    case FusionMethod::mvem: return "mvem";
  }
  return "?";
}

inline std::optional<FusionMethod> parse_method(std::string_view name) {
  for (auto m : kAllMethods)
    if (to_string(m) == name) return m;
  return std::nullopt;
}

// ---------------------------------------------------------------------------
// Single-pixel decision rules

/// Picks the winning class from per-class weight sums and probability mass.
inline ClassIndex resolve_vote(std::span<const double> score,
                               std::span<const double> mass) {
  double best = 0.0;
  for (double s : score) best = std::max(best, s);
  const double floor = best - kTieTolerance * best;
  std::optional<std::size_t> winner;
  for (std::size_t c = 0; c < score.size(); ++c) {
    if (score[c] <= 0.0 || score[c] < floor) continue;
    if (!winner || mass[c] > mass[*winner]) winner = c;
  }
  return static_cast<ClassIndex>(winner.value_or(0));
}

/// Class maximizing the summed weight of the members voting for it.
/// `mass[c]` is the probability of class c summed over members and only
/// matters when weight sums tie.
inline ClassIndex weighted_vote(std::span<const ClassIndex> votes,
                                std::span<const double> weights,
                                std::span<const double> mass) {
  if (votes.size() != weights.size())
    throw validation_error("votes and weights are not aligned");
  std::vector<double> score(mass.size(), 0.0);
  for (std::size_t i = 0; i < votes.size(); ++i) {
    if (votes[i] >= score.size()) throw validation_error("vote out of class range");
    score[votes[i]] += weights[i];
  }
  return resolve_vote(score, mass);
}

inline ClassIndex majority_vote(std::span<const ClassIndex> votes,
                                std::span<const double> mass) {
  const std::vector<double> ones(votes.size(), 1.0);
  return weighted_vote(votes, ones, mass);
}

// ---------------------------------------------------------------------------
// Weights

struct ModelWeight {
  std::string model_id;
  double ce = 0.0;
  double weight = 0.0;
};

inline double weight_from_ce(double ce, double epsilon) {
  return 1.0 / std::max(ce, epsilon);
}

/// weight_i = 1 / max(CE_i, epsilon) with CE taken as ECE or MCE.
inline std::vector<ModelWeight> derive_weights(
    std::span<const CalibrationReport> reports, FusionMethod method,
    double epsilon = kDefaultEpsilon) {
  if (method != FusionMethod::weighted_ece && method != FusionMethod::weighted_mce)
    throw validation_error("derive_weights needs weighted_ece or weighted_mce");
  if (!(epsilon > 0.0)) throw validation_error("epsilon must be positive");
  std::vector<ModelWeight> weights;
  for (const auto& r : reports) {
    const double ce = method == FusionMethod::weighted_ece ? r.ece : r.mce;
    if (!(ce >= 0.0))
      throw data_error("model '" + r.model_id + "' has invalid calibration error");
    weights.push_back({r.model_id, ce, weight_from_ce(ce, epsilon)});
  }
  return weights;
}

struct MemberWeights {
  std::vector<double> ece;
  std::vector<double> mce;
};

inline bool needs_calibration(FusionMethod m) { return m != FusionMethod::majority; }

// ---------------------------------------------------------------------------
// Whole-image fusion over in-memory maps

namespace detail {

inline void check_members(std::span<const ProbMap> members) {
  if (members.size() < 2)
    throw validation_error("fusion needs at least 2 members, got " +
                           std::to_string(members.size()));
  for (const auto& m : members) {
    if (m.shape() != members.front().shape() ||
        m.classes() != members.front().classes())
      throw data_error("member probability maps disagree on dimensions");
  }
}

// Probability of every class summed over members, for one pixel.
inline void pixel_mass(std::span<const ProbMap> members, std::size_t pixel,
                       std::span<double> mass) {
  std::fill(mass.begin(), mass.end(), 0.0);
  for (const auto& m : members) {
    const auto p = m.pixel(pixel);
    for (std::size_t c = 0; c < mass.size(); ++c) mass[c] += p[c];
  }
}

// Votes the per-member label masks with the given weights.
inline LabelMask vote_masks(std::span<const LabelMask> labels,
                            std::span<const double> weights,
                            std::span<const ProbMap> members) {
  const std::size_t classes = members.front().classes();
  LabelMask fused(members.front().height(), members.front().width());
  std::vector<double> score(classes), mass(classes);
  for (std::size_t i = 0; i < fused.pixels(); ++i) {
    std::fill(score.begin(), score.end(), 0.0);
    for (std::size_t m = 0; m < labels.size(); ++m) score[labels[m][i]] += weights[m];
    double best = 0.0;
    std::size_t best_class = 0, at_best = 0;
    for (std::size_t c = 0; c < classes; ++c) {
      if (score[c] > best) {
        best = score[c];
        best_class = c;
      }
    }
    const double floor = best - kTieTolerance * best;
    for (std::size_t c = 0; c < classes; ++c)
      if (score[c] > 0.0 && score[c] >= floor) ++at_best;
    if (at_best == 1) {
      fused[i] = static_cast<ClassIndex>(best_class);
    } else {
      pixel_mass(members, i, mass);
      fused[i] = resolve_vote(score, mass);
    }
  }
  return fused;
}

}  // namespace detail

/// Weighted vote over every pixel; pass unit weights for plain majority.
inline LabelMask fuse_weighted(std::span<const ProbMap> members,
                               std::span<const double> weights) {
  detail::check_members(members);
  if (weights.size() != members.size())
    throw validation_error("one weight per member required");
  for (double w : weights)
    if (!(w > 0.0) || !std::isfinite(w))
      throw validation_error("fusion weights must be positive and finite");
  std::vector<LabelMask> labels;
  labels.reserve(members.size());
  for (const auto& m : members) labels.push_back(argmax_mask(m));
  return detail::vote_masks(labels, weights, members);
}

inline LabelMask fuse_majority(std::span<const ProbMap> members) {
  const std::vector<double> ones(members.size(), 1.0);
  return fuse_weighted(members, ones);
}

/// Fuses one image with the requested method. Weighted methods and mvem
/// read `weights`; majority ignores it.
inline LabelMask fuse(std::span<const ProbMap> members, FusionMethod method,
                      const MemberWeights& weights) {
  switch (method) {
    case FusionMethod::majority: return fuse_majority(members);
    case FusionMethod::weighted_ece: return fuse_weighted(members, weights.ece);
    case FusionMethod::weighted_mce: return fuse_weighted(members, weights.mce);
    case FusionMethod::mvem: {
      const std::vector<LabelMask> constituents{
          fuse_majority(members), fuse_weighted(members, weights.ece),
          fuse_weighted(members, weights.mce)};
      const std::vector<double> ones(constituents.size(), 1.0);
      return detail::vote_masks(constituents, ones, members);
    }
  }
  throw validation_error("unknown fusion method");
}

/// Per-pixel ensemble confidence: the share of vote weight behind the fused
/// class, sum of w_i over members voting for it divided by sum of all w_i.
/// For mvem it is the mean of the shares under the majority, ECE and MCE
/// weightings. Lets a fused mask be scored for calibration like one model.
template <typename Fn>
void for_each_ensemble_confidence(std::span<const ProbMap> members,
                                  FusionMethod method, const MemberWeights& weights,
                                  const LabelMask& fused, const LabelMask& truth,
                                  Fn&& fn) {
  detail::check_members(members);
  if (fused.shape() != truth.shape() || fused.shape() != members.front().shape())
    throw data_error("dimension mismatch between fused mask, truth and members");
  const std::vector<double> ones(members.size(), 1.0);
  std::vector<std::span<const double>> schemes;
  if (method == FusionMethod::majority || method == FusionMethod::mvem)
    schemes.emplace_back(ones);
  if (method == FusionMethod::weighted_ece || method == FusionMethod::mvem)
    schemes.emplace_back(weights.ece);
  if (method == FusionMethod::weighted_mce || method == FusionMethod::mvem)
    schemes.emplace_back(weights.mce);
  std::vector<double> totals;
  for (auto w : schemes) {
    if (w.size() != members.size())
      throw validation_error("one weight per member required");
    double t = 0.0;
    for (double x : w) t += x;
    totals.push_back(t);
  }
  std::vector<LabelMask> labels;
  for (const auto& m : members) labels.push_back(argmax_mask(m));
  for (std::size_t i = 0; i < fused.pixels(); ++i) {
    double share = 0.0;
    for (std::size_t s = 0; s < schemes.size(); ++s) {
      double behind = 0.0;
      for (std::size_t m = 0; m < labels.size(); ++m)
        if (labels[m][i] == fused[i]) behind += schemes[s][m];
      share += behind / totals[s];
    }
    fn(std::min(1.0, share / static_cast<double>(schemes.size())),
       fused[i] == truth[i]);
  }
}

inline BinTable ensemble_bin_table(std::span<const ProbMap> members,
                                   FusionMethod method, const MemberWeights& weights,
                                   const LabelMask& fused, const LabelMask& truth,
                                   std::size_t bins) {
  BinTable table(bins);
  for_each_ensemble_confidence(members, method, weights, fused, truth,
                               [&](double conf, bool ok) { table.add(conf, ok); });
  return table;
}

// ---------------------------------------------------------------------------
// Manifest-level fusion

struct FusionConfig {
  FusionMethod method = FusionMethod::majority;
  std::vector<std::string> members;  // manifest order once canonicalized
  std::size_t bins = kDefaultBins;
  double epsilon = kDefaultEpsilon;
};

/// Validates member ids and returns them in manifest order, so that fused
/// output does not depend on how members were listed.
inline std::vector<std::string> canonical_members(const Manifest& manifest,
                                                  std::span<const std::string> members) {
  std::vector<std::string> ordered;
  for (const auto& id : members) {
    if (!manifest.find_model(id))
      throw validation_error("member '" + id + "' is not a model in the manifest");
    if (std::find(ordered.begin(), ordered.end(), id) != ordered.end())
      throw validation_error("member '" + id + "' listed twice");
    ordered.push_back(id);
  }
  std::vector<std::string> result;
  for (const auto& model : manifest.models)
    if (std::find(ordered.begin(), ordered.end(), model.model_id) != ordered.end())
      result.push_back(model.model_id);
  return result;
}

inline void validate_config(const FusionConfig& config) {
  if (config.members.size() < 2)
    throw validation_error(to_string(config.method) + " needs at least 2 members");
  if (config.bins == 0) throw validation_error("bin count must be at least 1");
  if (!(config.epsilon > 0.0)) throw validation_error("epsilon must be positive");
}

/// Member weights from validation-split reports, aligned with config.members.
inline MemberWeights member_weights(const FusionConfig& config,
                                    std::span<const CalibrationReport> reports) {
  MemberWeights w;
  for (const auto& id : config.members) {
    const auto it = std::find_if(reports.begin(), reports.end(),
                                 [&](const auto& r) { return r.model_id == id; });
    if (it == reports.end())
      throw validation_error("no calibration report for member '" + id + "'");
    w.ece.push_back(weight_from_ce(it->ece, config.epsilon));
    w.mce.push_back(weight_from_ce(it->mce, config.epsilon));
  }
  return w;
}

inline std::vector<ProbMap> load_members(const Manifest& manifest, Split split,
                                         const ImageEntry& image,
                                         std::span<const std::string> members) {
  std::vector<ProbMap> maps;
  maps.reserve(members.size());
  for (const auto& id : members) {
    const ModelEntry* model = manifest.find_model(id);
    if (!model) throw validation_error("member '" + id + "' is not a model in the manifest");
    maps.push_back(load_prediction(manifest, *model, split, image));
  }
  return maps;
}

/// Loads the members' maps for one image and fuses them.
inline LabelMask fuse_image(const Manifest& manifest, Split split,
                            const ImageEntry& image, const FusionConfig& config,
                            std::span<const CalibrationReport> reports) {
  validate_config(config);
  MemberWeights weights;
  if (needs_calibration(config.method)) weights = member_weights(config, reports);
  const auto maps = load_members(manifest, split, image, config.members);
  try {
    return fuse(maps, config.method, weights);
  } catch (const Error& e) {
    rethrow_with_context(e, "image '" + image.image_id + "'");
  }
}

inline nlohmann::ordered_json fusion_log(const FusionConfig& config,
                                         std::span<const CalibrationReport> reports,
                                         const std::string& split) {
  nlohmann::ordered_json log;
  log["format_version"] = kReportFormatVersion;
  log["method"] = to_string(config.method);
  if (config.method == FusionMethod::mvem)
    log["constituents"] = {"majority", "weighted_ece", "weighted_mce"};
  log["split"] = split;
  log["K"] = config.bins;
  log["epsilon"] = config.epsilon;
  log["tie_rule"] = kTieRule;
  log["tie_tolerance"] = kTieTolerance;
  auto members = nlohmann::ordered_json::array();
  for (const auto& id : config.members) {
    nlohmann::ordered_json entry{{"model_id", id}};
    const auto it = std::find_if(reports.begin(), reports.end(),
                                 [&](const auto& r) { return r.model_id == id; });
    if (it != reports.end()) {
      entry["calibration_split"] = it->split;
      entry["ece"] = it->ece;
      entry["mce"] = it->mce;
      entry["weight_ece"] = weight_from_ce(it->ece, config.epsilon);
      entry["weight_mce"] = weight_from_ce(it->mce, config.epsilon);
    }
    if (config.method == FusionMethod::majority) entry["weight"] = 1.0;
    members.push_back(entry);
  }
  log["members"] = members;
  return log;
}

}  // namespace calfuse
