#include <cstdlib>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "calfuse/pipeline.hpp"

using namespace calfuse;

namespace {

std::size_t default_threads() {
  const char* env = std::getenv("CALFUSE_THREADS");
  if (!env || !*env) return 1;
  const auto parsed = detail::parse_size(env);
  if (!parsed || *parsed == 0)
    throw usage_error(std::string("CALFUSE_THREADS must be a positive integer, got '") + env +
                      "'");
  return *parsed;
}

Split split_arg(const std::string& name) {
  const auto s = parse_split(name);
  if (!s) throw usage_error("unknown split '" + name + "' (training|validation|testing)");
  return *s;
}

std::vector<std::string> split_list(const std::vector<std::string>& values) {
  std::vector<std::string> out;
  for (const auto& v : values) {
    std::stringstream ss(v);
    std::string item;
    while (std::getline(ss, item, ','))
      if (!item.empty()) out.push_back(item);
  }
  return out;
}

std::vector<FusionMethod> methods_arg(const std::vector<std::string>& values) {
  std::vector<FusionMethod> out;
  for (const auto& name : split_list(values)) {
    if (name == "all") {
      out.assign(kAllMethods.begin(), kAllMethods.end());
      continue;
    }
    const auto m = parse_method(name);
    if (!m)
      throw usage_error("unknown method '" + name +
                        "' (majority|weighted_ece|weighted_mce|mvem|all)");
    if (std::find(out.begin(), out.end(), *m) == out.end()) out.push_back(*m);
  }
  return out;
}

synth::ModelSpec model_arg(const std::string& text) {
  std::vector<std::string> parts;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ':')) parts.push_back(item);
  if (parts.size() != 4)
    throw usage_error("--model expects ID:SKILL:TEMPERATURE:NOISE, got '" + text + "'");
  try {
    return {parts[0], std::stod(parts[1]), std::stod(parts[2]), std::stod(parts[3])};
  } catch (const std::exception&) {
    throw usage_error("--model has a non-numeric field: '" + text + "'");
  }
}

struct Common {
  std::string manifest;
  std::string out;
  std::string split = "testing";
  std::size_t bins = kDefaultBins;
  double epsilon = kDefaultEpsilon;
  std::size_t positive = kDefaultPositiveClass;
  std::optional<std::size_t> threads;

  pipeline::RunConfig config() const {
    pipeline::RunConfig c;
    c.manifest = manifest;
    c.out = out;
    c.split = split_arg(split);
    c.bins = bins;
    c.epsilon = epsilon;
    if (positive > kMaxClasses) throw usage_error("--positive-class out of range");
    c.positive = static_cast<ClassIndex>(positive);
    c.threads = threads ? *threads : default_threads();
    return c;
  }
};

void add_manifest(CLI::App* app, Common& c) {
  app->add_option("--manifest", c.manifest, "Dataset manifest (JSON)")->required();
  app->add_option("--out", c.out, "Output directory")->required();
  app->add_option("--threads", c.threads, "Worker threads (default $CALFUSE_THREADS or 1)");
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"calfuse: calibration-weighted ensemble fusion for segmentation maps"};
  app.require_subcommand(1);
  app.set_version_flag("--version", std::string("calfuse 1.0"));

  Common calib;
  auto* calibrate = app.add_subcommand("calibrate", "ECE/MCE report and reliability CSV per model");
  add_manifest(calibrate, calib);
  calib.split = "validation";
  calibrate->add_option("--split", calib.split, "Split to calibrate on")->capture_default_str();
  calibrate->add_option("--bins", calib.bins, "Confidence bins K")->capture_default_str();

  Common fuse_opts;
  std::vector<std::string> fuse_methods{"all"};
  std::vector<std::string> fuse_members;
  auto* fuse_cmd = app.add_subcommand("fuse", "Fuse member predictions into masks");
  add_manifest(fuse_cmd, fuse_opts);
  fuse_cmd->add_option("--split", fuse_opts.split, "Split to fuse")->capture_default_str();
  fuse_cmd->add_option("--method", fuse_methods, "majority|weighted_ece|weighted_mce|mvem|all");
  fuse_cmd->add_option("--members", fuse_members, "Comma-separated model ids (default all)");
  fuse_cmd->add_option("--bins", fuse_opts.bins, "Confidence bins K")->capture_default_str();
  fuse_cmd->add_option("--epsilon", fuse_opts.epsilon, "Weight floor for CE")->capture_default_str();

  Common eval_opts;
  std::string eval_predictions, eval_model, eval_name;
  auto* evaluate = app.add_subcommand("evaluate", "Per-image and aggregate segmentation metrics");
  add_manifest(evaluate, eval_opts);
  evaluate->add_option("--split", eval_opts.split, "Split to evaluate")->capture_default_str();
  auto* pred_dir = evaluate->add_option("--predictions", eval_predictions,
                                        "Directory of <image_id>.png label masks");
  auto* model_opt = evaluate->add_option("--model", eval_model, "Evaluate a model's argmax masks");
  pred_dir->excludes(model_opt);
  evaluate->add_option("--name", eval_name, "Report name (default from the source)");
  evaluate->add_option("--positive-class", eval_opts.positive, "Positive class index")
      ->capture_default_str();

  std::string overlay_pred, overlay_truth, overlay_out;
  std::size_t overlay_positive = kDefaultPositiveClass;
  auto* overlay = app.add_subcommand("overlay", "Colour a prediction against its truth mask");
  overlay->add_option("--pred", overlay_pred, "Predicted label mask (PNG)")->required();
  overlay->add_option("--truth", overlay_truth, "Ground-truth label mask (PNG)")->required();
  overlay->add_option("--out", overlay_out, "Output RGB PNG")->required();
  overlay->add_option("--positive-class", overlay_positive, "Positive class index")
      ->capture_default_str();

  std::string synth_spec_path, synth_out, synth_images;
  std::optional<std::uint64_t> synth_seed;
  std::optional<std::size_t> synth_height, synth_width, synth_threads;
  std::optional<double> synth_correlation;
  std::vector<std::string> synth_models;
  auto* synth_cmd = app.add_subcommand(
      "synth", "Generate a synthetic dataset (defaults to the five-model default preset)");
  synth_cmd->add_option("--spec", synth_spec_path, "Synth spec (JSON)");
  synth_cmd->add_option("--out", synth_out, "Dataset root")->required();
  synth_cmd->add_option("--seed", synth_seed, "Random seed");
  synth_cmd->add_option("--height", synth_height, "Image height");
  synth_cmd->add_option("--width", synth_width, "Image width");
  synth_cmd->add_option("--images", synth_images, "TRAIN,VAL,TEST image counts");
  synth_cmd->add_option("--correlation", synth_correlation, "Shared noise share in [0,1]");
  synth_cmd->add_option("--model", synth_models, "ID:SKILL:TEMPERATURE:NOISE (repeatable)");
  synth_cmd->add_option("--threads", synth_threads, "Worker threads");

  Common report_opts;
  std::vector<std::string> report_methods{"all"};
  std::vector<std::string> report_members;
  std::vector<std::size_t> report_sizes;
  auto* report = app.add_subcommand("report", "Comparison table of models and ensembles");
  add_manifest(report, report_opts);
  report->add_option("--split", report_opts.split, "Split to report on")->capture_default_str();
  report->add_option("--method", report_methods, "Ensemble methods (default all)");
  report->add_option("--members", report_members,
                     "Comma-separated model ids; order sets ensemble-size prefixes");
  report->add_option("--ensemble-sizes", report_sizes, "Also report ensembles of these sizes")
      ->delimiter(',');
  report->add_option("--bins", report_opts.bins, "Confidence bins K")->capture_default_str();
  report->add_option("--epsilon", report_opts.epsilon, "Weight floor for CE")
      ->capture_default_str();
  report->add_option("--positive-class", report_opts.positive, "Positive class index")
      ->capture_default_str();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e) == 0 ? 0 : 1;
  }

  try {
    if (*calibrate) {
      const auto reports = pipeline::cmd_calibrate(calib.config());
      for (const auto& r : reports)
        std::cout << r.model_id << " ece=" << format_number(r.ece)
                  << " mce=" << format_number(r.mce) << "\n";
    } else if (*fuse_cmd) {
      pipeline::FuseRequest req{fuse_opts.config(), methods_arg(fuse_methods),
                                split_list(fuse_members)};
      const auto outcomes = pipeline::cmd_fuse(req);
      for (const auto& o : outcomes)
        std::cout << to_string(o.config.method) << ": " << o.masks.size()
                  << " masks, ensemble ece=" << format_number(o.calibration.ece) << "\n";
    } else if (*evaluate) {
      pipeline::EvaluateRequest req{eval_opts.config(), std::nullopt, std::nullopt, eval_name};
      if (!eval_predictions.empty()) req.predictions = fs::path(eval_predictions);
      if (!eval_model.empty()) req.model_id = eval_model;
      const auto r = pipeline::cmd_evaluate(req);
      std::cout << eval_csv_header() << eval_csv_rows(r);
    } else if (*overlay) {
      if (overlay_positive > kMaxClasses) throw usage_error("--positive-class out of range");
      pipeline::cmd_overlay(overlay_pred, overlay_truth, overlay_out,
                            static_cast<ClassIndex>(overlay_positive));
    } else if (*synth_cmd) {
      synth::SynthSpec spec = pipeline::default_preset();
      if (!synth_spec_path.empty()) {
        const auto text = detail::read_file(synth_spec_path);
        nlohmann::json doc;
        try {
          doc = nlohmann::json::parse(text);
        } catch (const nlohmann::json::exception& e) {
          throw validation_error(synth_spec_path + ": " + e.what());
        }
        spec = synth::spec_from_json(doc);
      }
      if (synth_seed) spec.seed = *synth_seed;
      if (synth_height) spec.height = *synth_height;
      if (synth_width) spec.width = *synth_width;
      if (synth_correlation) spec.correlation = *synth_correlation;
      if (!synth_images.empty()) {
        const auto counts = split_list({synth_images});
        std::vector<std::size_t> n;
        for (const auto& c : counts) {
          const auto v = detail::parse_size(c);
          if (!v) throw usage_error("--images expects TRAIN,VAL,TEST counts");
          n.push_back(*v);
        }
        if (n.size() != 3) throw usage_error("--images expects TRAIN,VAL,TEST counts");
        spec.training = n[0];
        spec.validation = n[1];
        spec.testing = n[2];
      }
      if (!synth_models.empty()) {
        spec.models.clear();
        for (const auto& m : synth_models) spec.models.push_back(model_arg(m));
      }
      const auto threads = synth_threads ? *synth_threads : default_threads();
      if (threads == 0) throw usage_error("--threads must be at least 1");
      const auto manifest = pipeline::cmd_synth(spec, synth_out, threads);
      std::cout << "wrote " << spec.image_count() << " images x " << manifest.models.size()
                << " models to " << synth_out << "\n";
    } else if (*report) {
      pipeline::ReportRequest req{report_opts.config(), methods_arg(report_methods),
                                  split_list(report_members), report_sizes};
      const auto result = pipeline::cmd_report(req);
      std::cout << pipeline::rows_to_text(result.rows);
    }
  } catch (const Error& e) {
    std::cerr << "calfuse: " << e.what() << "\n";
    return e.exit_code();
  } catch (const std::exception& e) {
    std::cerr << "calfuse: " << e.what() << "\n";
    return 2;
  }
  return 0;
}
