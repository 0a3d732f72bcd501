#pragma once

// Reproducible synthetic segmentation datasets.
//
// Randomness is counter-based: every draw is a pure function of a key tuple,
//
//   h0     = mix64(seed ^ 0x9E3779B97F4A7C15)
//   h(i+1) = mix64(h(i) ^ mix64(key[i] + 0x9E3779B97F4A7C15))
//
// where mix64 is the SplitMix64 finalizer. A uniform in [0,1) is
// (h >> 11) * 2^-53. Truth masks use key (1, image, parameter); model noise
// uses key (2, image, pixel, model, draw) with draws 0 and 1 feeding a
// Box-Muller transform; the noise shared by all models (weight sqrt(rho))
// uses model = 2^64-1. Images are indexed globally: training images first,
// then validation, then testing.

#include <cmath>
#include <cstdint>
#include <initializer_list>
#include <numbers>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "calfuse/error.hpp"
#include "calfuse/parallel.hpp"
#include "calfuse/tensor_store.hpp"

namespace calfuse::synth {

inline constexpr std::uint64_t kGolden = 0x9E3779B97F4A7C15ull;
inline constexpr std::uint64_t kTruthStream = 1;
inline constexpr std::uint64_t kNoiseStream = 2;

inline constexpr std::uint64_t mix64(std::uint64_t x) {
  x ^= x >> 30;
  x *= 0xBF58476D1CE4E5B9ull;
  x ^= x >> 27;
  x *= 0x94D049BB133111EBull;
  x ^= x >> 31;
  return x;
}

inline constexpr std::uint64_t hash_key(std::uint64_t seed,
                                        std::initializer_list<std::uint64_t> key) {
  std::uint64_t h = mix64(seed ^ kGolden);
  for (auto k : key) h = mix64(h ^ mix64(k + kGolden));
  return h;
}

/// Uniform in [0, 1).
inline double uniform(std::uint64_t h) {
  return static_cast<double>(h >> 11) * 0x1.0p-53;
}

/// Standard normal from two independent hashes.
inline double normal(std::uint64_t h1, std::uint64_t h2) {
  const double u1 = static_cast<double>((h1 >> 11) + 1) * 0x1.0p-53;  // (0, 1]
  const double u2 = uniform(h2);
  return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
}

struct ModelSpec {
  std::string model_id;
  double skill = 3.0;        // logit magnitude
  double temperature = 1.0;  // > 1 flattens, < 1 sharpens
  double noise = 0.0;        // logit noise standard deviation
};

struct SynthSpec {
  std::size_t training = 10;
  std::size_t validation = 2;
  std::size_t testing = 4;
  std::size_t height = 64;
  std::size_t width = 64;
  std::uint64_t seed = 42;
  double correlation = 0.0;  // share of noise variance common to all models
  std::vector<std::string> class_names{"NonLung", "Lung"};
  std::vector<ModelSpec> models;

  std::size_t image_count() const { return training + validation + testing; }
};

inline void validate(const SynthSpec& spec) {
  if (spec.height < 4 || spec.width < 4)
    throw validation_error("synthetic images must be at least 4x4");
  if (spec.height > kMaxDimension || spec.width > kMaxDimension)
    throw validation_error("synthetic image dimensions too large");
  if (spec.image_count() == 0) throw validation_error("synthetic spec has no images");
  if (spec.models.empty()) throw validation_error("synthetic spec has no models");
  if (!(spec.correlation >= 0.0 && spec.correlation <= 1.0))
    throw validation_error("noise correlation must be in [0, 1]");
  if (spec.class_names.size() != 2)
    throw validation_error("synthetic datasets are binary (2 class names)");
  for (std::size_t i = 0; i < spec.models.size(); ++i) {
    const auto& m = spec.models[i];
    if (!detail::valid_identifier(m.model_id))
      throw validation_error("invalid model_id '" + m.model_id + "'");
    for (std::size_t j = 0; j < i; ++j)
      if (spec.models[j].model_id == m.model_id)
        throw validation_error("duplicate model_id '" + m.model_id + "'");
    if (!(m.skill > 0.0) || !(m.temperature > 0.0) || !(m.noise >= 0.0) ||
        !std::isfinite(m.skill) || !std::isfinite(m.temperature) ||
        !std::isfinite(m.noise))
      throw validation_error("model '" + m.model_id +
                             "': skill and temperature must be > 0, noise >= 0");
  }
}

inline std::string image_id(std::size_t index) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "img%04zu", index);
  return buf;
}

/// Two filled ellipses on background; both classes always present.
inline LabelMask gen_truth(const SynthSpec& spec, std::size_t image_index) {
  const double h = static_cast<double>(spec.height);
  const double w = static_cast<double>(spec.width);
  std::uint64_t param = 0;
  auto draw = [&] {
    return uniform(hash_key(spec.seed, {kTruthStream, image_index, param++}));
  };
  LabelMask mask(spec.height, spec.width, 0);
  for (double side : {0.30, 0.70}) {
    const double cx = w * (side + 0.04 * (2.0 * draw() - 1.0));
    const double cy = h * (0.50 + 0.05 * (2.0 * draw() - 1.0));
    const double rx = w * (0.12 + 0.05 * draw());
    const double ry = h * (0.25 + 0.10 * draw());
    for (std::size_t r = 0; r < spec.height; ++r) {
      const double dy = (static_cast<double>(r) + 0.5 - cy) / ry;
      for (std::size_t c = 0; c < spec.width; ++c) {
        const double dx = (static_cast<double>(c) + 0.5 - cx) / rx;
        if (dx * dx + dy * dy <= 1.0) mask[r * spec.width + c] = 1;
      }
    }
    mask[static_cast<std::size_t>(cy) * spec.width + static_cast<std::size_t>(cx)] = 1;
  }
  mask[0] = 0;
  return mask;
}

inline constexpr std::uint64_t kSharedNoiseModel = ~std::uint64_t{0};

inline double noise_draw(const SynthSpec& spec, std::size_t image_index,
                         std::size_t pixel, std::uint64_t model) {
  return normal(hash_key(spec.seed, {kNoiseStream, image_index, pixel, model, 0}),
                hash_key(spec.seed, {kNoiseStream, image_index, pixel, model, 1}));
}

/// Logit z = skill * (+1 on Lung, -1 elsewhere) + noise * e, where
/// e = sqrt(rho) * shared + sqrt(1 - rho) * own, both N(0,1);
/// P(Lung) = logistic(z / temperature). The larger class probability is
/// rounded to binary32 and the smaller is 1 minus it, so pairs sum to 1.
inline ProbMap gen_prediction(const SynthSpec& spec, std::size_t model_index,
                              std::size_t image_index, const LabelMask& truth) {
  const auto& model = spec.models.at(model_index);
  ProbMap map(truth.height(), truth.width(), 2);
  const double shared = std::sqrt(spec.correlation);
  const double own = std::sqrt(1.0 - spec.correlation);
  for (std::size_t i = 0; i < truth.pixels(); ++i) {
    double z = truth[i] == 1 ? model.skill : -model.skill;
    if (model.noise > 0.0) {
      double e = own * noise_draw(spec, image_index, i, model_index);
      if (shared > 0.0) e += shared * noise_draw(spec, image_index, i, kSharedNoiseModel);
      z += model.noise * e;
    }
    const double scaled = z / model.temperature;
    const float high = static_cast<float>(1.0 / (1.0 + std::exp(-std::abs(scaled))));
    const float low = 1.0f - high;
    auto p = map.pixel(i);
    p[0] = scaled >= 0.0 ? low : high;
    p[1] = scaled >= 0.0 ? high : low;
  }
  return map;
}

/// Manifest for a dataset laid out as gen_dataset writes it.
inline Manifest synth_manifest(const SynthSpec& spec) {
  Manifest m;
  m.class_names = spec.class_names;
  std::size_t index = 0;
  const std::pair<Split, std::size_t> counts[] = {{Split::training, spec.training},
                                                  {Split::validation, spec.validation},
                                                  {Split::testing, spec.testing}};
  for (const auto& [split, count] : counts) {
    if (count == 0) continue;
    auto& images = m.splits[split];
    for (std::size_t i = 0; i < count; ++i, ++index)
      images.push_back({image_id(index), "masks/" + image_id(index) + ".png"});
  }
  for (const auto& model : spec.models) {
    ModelEntry entry{model.model_id, {}};
    for (const auto& [split, images] : m.splits)
      entry.predictions[split] = "predictions/" + model.model_id + "/" + to_string(split);
    m.models.push_back(std::move(entry));
  }
  return m;
}

/// Writes masks, per-model maps for every split, and manifest.json under root.
inline Manifest gen_dataset(const SynthSpec& spec, const fs::path& root,
                            std::size_t threads = 1) {
  validate(spec);
  auto manifest = synth_manifest(spec);
  manifest.base_dir = root;

  std::vector<std::pair<Split, const ImageEntry*>> images;
  for (const auto& [split, list] : manifest.splits)
    for (const auto& img : list) images.emplace_back(split, &img);

  try {
    fs::create_directories(root / "masks");
    for (const auto& model : manifest.models)
      for (const auto& [split, dir] : model.predictions)
        fs::create_directories(root / dir);
  } catch (const fs::filesystem_error& e) {
    throw io_error(e.what());
  }

  parallel_for(images.size(), threads, [&](std::size_t index) {
    const auto& [split, image] = images[index];
    const auto truth = gen_truth(spec, index);
    write_mask(truth, manifest.mask_path(*image));
    for (std::size_t m = 0; m < manifest.models.size(); ++m) {
      write_probmap(gen_prediction(spec, m, index, truth),
                    manifest.prediction_path(manifest.models[m], split, image->image_id));
    }
  });
  write_manifest(manifest, root / "manifest.json");
  return manifest;
}

// ---------------------------------------------------------------------------
// Spec documents

inline nlohmann::ordered_json to_json(const SynthSpec& spec) {
  nlohmann::ordered_json doc;
  doc["format_version"] = 1;
  doc["seed"] = spec.seed;
  doc["height"] = spec.height;
  doc["width"] = spec.width;
  doc["correlation"] = spec.correlation;
  doc["images"] = {{"training", spec.training},
                   {"validation", spec.validation},
                   {"testing", spec.testing}};
  doc["class_names"] = spec.class_names;
  auto models = nlohmann::ordered_json::array();
  for (const auto& m : spec.models)
    models.push_back({{"model_id", m.model_id},
                      {"skill", m.skill},
                      {"temperature", m.temperature},
                      {"noise", m.noise}});
  doc["models"] = models;
  return doc;
}

inline SynthSpec spec_from_json(const nlohmann::json& doc) {
  try {
    SynthSpec spec;
    if (doc.contains("format_version") && doc.at("format_version").get<int>() != 1)
      throw validation_error("synth spec: unsupported format_version");
    spec.seed = doc.value("seed", spec.seed);
    spec.height = doc.value("height", spec.height);
    spec.width = doc.value("width", spec.width);
    spec.correlation = doc.value("correlation", spec.correlation);
    if (doc.contains("images")) {
      const auto& images = doc.at("images");
      spec.training = images.value("training", std::size_t{0});
      spec.validation = images.value("validation", std::size_t{0});
      spec.testing = images.value("testing", std::size_t{0});
    }
    if (doc.contains("class_names"))
      spec.class_names = doc.at("class_names").get<std::vector<std::string>>();
    for (const auto& m : doc.at("models")) {
      spec.models.push_back({m.at("model_id").get<std::string>(),
                             m.value("skill", 3.0), m.value("temperature", 1.0),
                             m.value("noise", 0.0)});
    }
    validate(spec);
    return spec;
  } catch (const nlohmann::json::exception& e) {
    throw validation_error(std::string("synth spec: ") + e.what());
  }
}

}  // namespace calfuse::synth
