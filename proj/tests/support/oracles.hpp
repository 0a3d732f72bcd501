#pragma once

// Deliberately naive reference implementations. They share no code with the
// library beyond the data containers.

#include <algorithm>
#include <cstdint>
#include <optional>
#include <vector>

#include <gmpxx.h>

#include "calfuse/tensor_store.hpp"

namespace oracle {

struct Pair {
  double confidence;
  bool correct;
};

struct Calibration {
  double ece = 0.0;
  double mce = 0.0;
  std::vector<std::uint64_t> counts;
};

// Linear scan for the first edge k/K that the confidence does not exceed.
inline std::size_t scan_bin(double confidence, std::size_t bins) {
  for (std::size_t k = 1; k <= bins; ++k)
    if (confidence <= static_cast<double>(k) / static_cast<double>(bins)) return k;
  return bins;
}

/// ECE and MCE with exact rational arithmetic; rounds once at the end.
inline Calibration calibration(const std::vector<Pair>& pairs, std::size_t bins) {
  std::vector<std::uint64_t> n(bins, 0), hits(bins, 0);
  std::vector<mpq_class> conf(bins, 0);
  for (const auto& p : pairs) {
    const auto k = scan_bin(p.confidence, bins) - 1;
    ++n[k];
    if (p.correct) ++hits[k];
    conf[k] += mpq_class(p.confidence);
  }
  mpq_class ece = 0, mce = 0;
  const mpq_class total(static_cast<unsigned long>(pairs.size()));
  for (std::size_t k = 0; k < bins; ++k) {
    if (n[k] == 0) continue;
    const mpq_class count(static_cast<unsigned long>(n[k]));
    mpq_class gap = mpq_class(static_cast<unsigned long>(hits[k])) / count - conf[k] / count;
    gap = abs(gap);
    ece += count / total * gap;
    if (gap > mce) mce = gap;
  }
  return {ece.get_d(), mce.get_d(), n};
}

inline std::vector<Pair> pairs_of(const calfuse::ProbMap& probs,
                                  const calfuse::LabelMask& truth) {
  std::vector<Pair> out;
  for (std::size_t r = 0; r < probs.height(); ++r) {
    for (std::size_t c = 0; c < probs.width(); ++c) {
      std::size_t best = 0;
      for (std::size_t k = 1; k < probs.classes(); ++k)
        if (probs.at(r, c, k) > probs.at(r, c, best)) best = k;
      out.push_back({probs.at(r, c, best), best == truth.at(r, c)});
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Fusion

inline std::size_t pixel_argmax(const calfuse::ProbMap& m, std::size_t r, std::size_t c) {
  std::size_t best = 0;
  for (std::size_t k = 1; k < m.classes(); ++k)
    if (m.at(r, c, k) > m.at(r, c, best)) best = k;
  return best;
}

// One pixel: weight sums, then probability mass among classes within the
// relative tolerance of the best sum, then the lowest class.
inline std::uint8_t vote(const std::vector<std::size_t>& votes,
                         const std::vector<double>& weights,
                         const std::vector<calfuse::ProbMap>& members, std::size_t r,
                         std::size_t c, double tolerance) {
  const std::size_t classes = members.front().classes();
  std::vector<double> score(classes, 0.0);
  for (std::size_t i = 0; i < votes.size(); ++i) score[votes[i]] += weights[i];
  const double best = *std::max_element(score.begin(), score.end());
  std::optional<std::size_t> winner;
  double winner_mass = 0.0;
  for (std::size_t k = 0; k < classes; ++k) {
    if (score[k] == 0.0 || score[k] < best * (1.0 - tolerance)) continue;
    double mass = 0.0;
    for (const auto& m : members) mass += m.at(r, c, k);
    if (!winner || mass > winner_mass) {
      winner = k;
      winner_mass = mass;
    }
  }
  return static_cast<std::uint8_t>(*winner);
}

inline calfuse::LabelMask fuse(const std::vector<calfuse::ProbMap>& members,
                               const std::vector<double>& weights, double tolerance) {
  const auto& first = members.front();
  calfuse::LabelMask out(first.height(), first.width());
  for (std::size_t r = 0; r < first.height(); ++r) {
    for (std::size_t c = 0; c < first.width(); ++c) {
      std::vector<std::size_t> votes;
      for (const auto& m : members) votes.push_back(pixel_argmax(m, r, c));
      out[r * first.width() + c] = vote(votes, weights, members, r, c, tolerance);
    }
  }
  return out;
}

inline calfuse::LabelMask mvem(const std::vector<calfuse::ProbMap>& members,
                               const std::vector<double>& ece_weights,
                               const std::vector<double>& mce_weights, double tolerance) {
  const std::vector<double> ones(members.size(), 1.0);
  const calfuse::LabelMask parts[3] = {fuse(members, ones, tolerance),
                                       fuse(members, ece_weights, tolerance),
                                       fuse(members, mce_weights, tolerance)};
  const auto& first = members.front();
  calfuse::LabelMask out(first.height(), first.width());
  for (std::size_t r = 0; r < first.height(); ++r) {
    for (std::size_t c = 0; c < first.width(); ++c) {
      const std::size_t i = r * first.width() + c;
      const std::vector<std::size_t> votes{parts[0][i], parts[1][i], parts[2][i]};
      out[i] = vote(votes, {1.0, 1.0, 1.0}, members, r, c, tolerance);
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Metrics

struct Counts {
  std::uint64_t tp = 0, fp = 0, fn = 0, tn = 0;
};

inline Counts confusion(const calfuse::LabelMask& pred, const calfuse::LabelMask& truth,
                        std::uint8_t positive) {
  Counts c;
  for (std::size_t r = 0; r < pred.height(); ++r) {
    for (std::size_t col = 0; col < pred.width(); ++col) {
      const bool p = pred.at(r, col) == positive;
      const bool t = truth.at(r, col) == positive;
      if (p && t) ++c.tp;
      if (p && !t) ++c.fp;
      if (!p && t) ++c.fn;
      if (!p && !t) ++c.tn;
    }
  }
  return c;
}

}  // namespace oracle
