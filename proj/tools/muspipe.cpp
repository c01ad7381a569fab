// muspipe: command-line front door for the micro-ultrasound segmentation
// pipeline. Subcommands cover synthetic data generation, scan conversion in
// both directions, training, sliding-window prediction, post-processing,
// evaluation, nonparametric statistics, and an end-to-end chain.

#include <cinttypes>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "mus/evaluation.hpp"
#include "mus/infer.hpp"
#include "mus/io.hpp"
#include "mus/net.hpp"
#include "mus/phantom.hpp"
#include "mus/postproc.hpp"
#include "mus/stats.hpp"
#include "mus/train.hpp"

namespace fs = std::filesystem;
using json = nlohmann::ordered_json;
using namespace mus;

namespace {

std::string fmt_double(double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

std::string opt_str(const std::optional<double>& v) {
  return v ? fmt_double(*v) : std::string();
}

// Digest of a frame-stack directory: manifest bytes, then every frame file in
// manifest order.
std::string digest_stack_dir(const fs::path& dir) {
  const fs::path manifest = dir / "manifest.json";
  uint64_t h = fnv1a64_file(manifest.string());
  std::ifstream in(manifest);
  json m = json::parse(in);
  for (const auto& f : m.at("frames")) {
    const uint64_t fh = fnv1a64_file((dir / f.at("file").get<std::string>()).string());
    h = fnv1a64(&fh, sizeof(fh), h);
  }
  return hex64(h);
}

std::string digest_volume(const fs::path& path) {
  uint64_t h = fnv1a64_file(path.string());
  fs::path raw = path;
  raw.replace_extension(".raw");
  const uint64_t rh = fnv1a64_file(raw.string());
  h = fnv1a64(&rh, sizeof(rh), h);
  return hex64(h);
}

std::string digest_file(const fs::path& path) {
  return hex64(fnv1a64_file(path.string()));
}

void write_provenance(const fs::path& path, const std::string& command,
                      json options, json inputs) {
  json j;
  j["tool"] = "muspipe";
  j["version"] = kVersion;
  j["command"] = command;
  j["threads"] = thread_count();
  j["options"] = std::move(options);
  j["inputs"] = std::move(inputs);
  fs::create_directories(path.parent_path());
  std::ofstream out(path);
  require(out.good(), "cannot write " + path.string());
  out << j.dump(2) << "\n";
}

FanGeometry geometry_from_manifest(const fs::path& dir) {
  std::ifstream in(dir / "manifest.json");
  require(in.good(), "cannot read " + (dir / "manifest.json").string());
  json m = json::parse(in);
  FanGeometry g;
  g.probe_radius_mm = m.at("probe_radius_mm").get<double>();
  g.axial_pixels = m.at("axial_pixels").get<int64_t>();
  g.radial_pixels = m.at("radial_pixels").get<int64_t>();
  g.axial_spacing_mm = m.at("axial_spacing_mm").get<double>();
  g.radial_spacing_mm = m.at("radial_spacing_mm").get<double>();
  for (const auto& f : m.at("frames"))
    g.angles_deg.push_back(f.at("angle_deg").get<double>());
  g.validate();
  return g;
}

std::string stack_payload(const fs::path& dir) {
  std::ifstream in(dir / "manifest.json");
  require(in.good(), "cannot read " + (dir / "manifest.json").string());
  return json::parse(in).at("payload").get<std::string>();
}

void check_known_keys(const json& j, const std::vector<std::string>& known,
                      const std::string& where) {
  for (const auto& [key, value] : j.items()) {
    (void)value;
    bool ok = false;
    for (const auto& k : known) ok = ok || k == key;
    require(ok, "unknown key '" + key + "' in " + where);
  }
}

void apply_phantom_json(phantom::PhantomConfig& cfg, const json& j) {
  check_known_keys(
      j,
      {"seed", "geometry", "prostate_center_mm", "prostate_semi_axes_mm",
       "lesion_count", "lesion_radius_min_mm", "lesion_radius_max_mm",
       "contrast", "speckle_scale", "edge_softness_mm", "background_intensity",
       "prostate_brightness", "shadow_count", "scene_spacing_mm"},
      "phantom config");
  if (j.contains("seed")) cfg.seed = j["seed"].get<uint64_t>();
  if (j.contains("geometry")) {
    const json& g = j["geometry"];
    check_known_keys(g,
                     {"probe_radius_mm", "axial_pixels", "radial_pixels",
                      "axial_spacing_mm", "radial_spacing_mm", "angles_deg"},
                     "phantom config geometry");
    if (g.contains("probe_radius_mm"))
      cfg.geometry.probe_radius_mm = g["probe_radius_mm"].get<double>();
    if (g.contains("axial_pixels"))
      cfg.geometry.axial_pixels = g["axial_pixels"].get<int64_t>();
    if (g.contains("radial_pixels"))
      cfg.geometry.radial_pixels = g["radial_pixels"].get<int64_t>();
    if (g.contains("axial_spacing_mm"))
      cfg.geometry.axial_spacing_mm = g["axial_spacing_mm"].get<double>();
    if (g.contains("radial_spacing_mm"))
      cfg.geometry.radial_spacing_mm = g["radial_spacing_mm"].get<double>();
    if (g.contains("angles_deg"))
      cfg.geometry.angles_deg = g["angles_deg"].get<std::vector<double>>();
  }
  if (j.contains("prostate_center_mm"))
    cfg.prostate_center_mm = j["prostate_center_mm"].get<Vec3>();
  if (j.contains("prostate_semi_axes_mm"))
    cfg.prostate_semi_axes_mm = j["prostate_semi_axes_mm"].get<Vec3>();
  if (j.contains("lesion_count")) cfg.lesion_count = j["lesion_count"].get<int64_t>();
  if (j.contains("lesion_radius_min_mm"))
    cfg.lesion_radius_min_mm = j["lesion_radius_min_mm"].get<double>();
  if (j.contains("lesion_radius_max_mm"))
    cfg.lesion_radius_max_mm = j["lesion_radius_max_mm"].get<double>();
  if (j.contains("contrast")) cfg.contrast = j["contrast"].get<double>();
  if (j.contains("speckle_scale")) cfg.speckle_scale = j["speckle_scale"].get<double>();
  if (j.contains("edge_softness_mm"))
    cfg.edge_softness_mm = j["edge_softness_mm"].get<double>();
  if (j.contains("background_intensity"))
    cfg.background_intensity = j["background_intensity"].get<double>();
  if (j.contains("prostate_brightness"))
    cfg.prostate_brightness = j["prostate_brightness"].get<double>();
  if (j.contains("shadow_count")) cfg.shadow_count = j["shadow_count"].get<int64_t>();
  if (j.contains("scene_spacing_mm"))
    cfg.scene_spacing_mm = j["scene_spacing_mm"].get<double>();
}

json phantom_config_json(const phantom::PhantomConfig& cfg) {
  json g;
  g["probe_radius_mm"] = cfg.geometry.probe_radius_mm;
  g["axial_pixels"] = cfg.geometry.axial_pixels;
  g["radial_pixels"] = cfg.geometry.radial_pixels;
  g["axial_spacing_mm"] = cfg.geometry.axial_spacing_mm;
  g["radial_spacing_mm"] = cfg.geometry.radial_spacing_mm;
  g["angles_deg"] = cfg.geometry.angles_deg;
  json j;
  j["seed"] = cfg.seed;
  j["geometry"] = std::move(g);
  j["prostate_center_mm"] = cfg.prostate_center_mm;
  j["prostate_semi_axes_mm"] = cfg.prostate_semi_axes_mm;
  j["lesion_count"] = cfg.lesion_count;
  j["lesion_radius_min_mm"] = cfg.lesion_radius_min_mm;
  j["lesion_radius_max_mm"] = cfg.lesion_radius_max_mm;
  j["contrast"] = cfg.contrast;
  j["speckle_scale"] = cfg.speckle_scale;
  j["edge_softness_mm"] = cfg.edge_softness_mm;
  j["background_intensity"] = cfg.background_intensity;
  j["prostate_brightness"] = cfg.prostate_brightness;
  j["shadow_count"] = cfg.shadow_count;
  j["scene_spacing_mm"] = cfg.scene_spacing_mm;
  return j;
}

std::string case_name(int64_t i) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "case_%03" PRId64, i);
  return buf;
}

// ---------------------------------------------------------------------------
// synth

struct SynthOpts {
  std::string out;
  std::string config_file;
  int64_t count = 1;
  uint64_t seed = 1;
  std::optional<double> contrast, speckle;
  std::optional<int64_t> lesions, shadows;
};

int run_synth(const SynthOpts& o) {
  phantom::PhantomConfig base = phantom::desk_config(o.seed);
  if (!o.config_file.empty()) {
    std::ifstream in(o.config_file);
    require(in.good(), "cannot read " + o.config_file);
    apply_phantom_json(base, json::parse(in));
  }
  if (o.contrast) base.contrast = *o.contrast;
  if (o.speckle) base.speckle_scale = *o.speckle;
  if (o.lesions) base.lesion_count = *o.lesions;
  if (o.shadows) base.shadow_count = *o.shadows;
  base.validate();

  const fs::path out(o.out);
  json cases = json::array();
  for (int64_t i = 0; i < o.count; ++i) {
    phantom::PhantomConfig cfg = base;
    cfg.seed = o.seed + static_cast<uint64_t>(i);
    const phantom::Phantom ph = phantom::generate(cfg);
    const fs::path dir = out / case_name(i);
    save_stack(ph.intensity, dir / "image");
    save_stack(ph.gt, dir / "gt");
    save_stack(ph.prostate, dir / "prostate");
    json c;
    c["name"] = case_name(i);
    c["seed"] = cfg.seed;
    c["lesions"] = json::array();
    for (const auto& l : ph.lesions)
      c["lesions"].push_back({{"center_mm", l.center_mm}, {"radius_mm", l.radius_mm}});
    c["image_digest"] = digest_stack_dir(dir / "image");
    c["gt_digest"] = digest_stack_dir(dir / "gt");
    c["prostate_digest"] = digest_stack_dir(dir / "prostate");
    cases.push_back(std::move(c));
  }
  json options = phantom_config_json(base);
  options["count"] = o.count;
  options["base_seed"] = o.seed;
  json inputs;
  if (!o.config_file.empty()) inputs["config"] = digest_file(o.config_file);
  json prov_extra;
  write_provenance(out / "provenance.json", "synth", std::move(options),
                   std::move(inputs));
  {
    std::ofstream cj(out / "cases.json");
    cj << cases.dump(2) << "\n";
  }
  std::cout << "wrote " << o.count << " phantom(s) to " << out.string() << "\n";
  return 0;
}

// ---------------------------------------------------------------------------
// reconstruct

struct ReconOpts {
  std::string in, out;
  double spacing = 0.5;
  std::vector<int64_t> patch_dims;  // (nx, ny, nz); empty = bounds grid
  std::string interp = "auto";      // auto | trilinear | nearest
  double fill = 0.0;
};

FanInterp pick_interp(const std::string& s, bool label) {
  if (s == "auto") return label ? FanInterp::nearest : FanInterp::trilinear;
  if (s == "nearest") return FanInterp::nearest;
  require(s == "trilinear", "unknown interpolation '" + s + "'");
  require(!label, "label payloads require nearest interpolation");
  return FanInterp::trilinear;
}

int run_reconstruct(const ReconOpts& o) {
  const bool label = stack_payload(o.in) == "label";
  const FanInterp interp = pick_interp(o.interp, label);
  json options{{"in", o.in},         {"out", o.out},
               {"spacing_mm", o.spacing}, {"interp", label ? "nearest" : (interp == FanInterp::nearest ? "nearest" : "trilinear")},
               {"fill", o.fill},     {"payload", label ? "label" : "intensity"}};
  if (!o.patch_dims.empty()) options["patch_dims"] = o.patch_dims;

  if (label) {
    const LabelStack stack = load_label_stack(o.in);
    const GridSpec grid =
        o.patch_dims.empty()
            ? default_grid(stack.geometry, o.spacing)
            : patch_grid(stack.geometry,
                         {o.patch_dims[0], o.patch_dims[1], o.patch_dims[2]},
                         o.spacing);
    save_volume(reconstruct_cartesian(stack, grid, interp, o.fill), o.out);
  } else {
    const ImageStack stack = load_image_stack(o.in);
    const GridSpec grid =
        o.patch_dims.empty()
            ? default_grid(stack.geometry, o.spacing)
            : patch_grid(stack.geometry,
                         {o.patch_dims[0], o.patch_dims[1], o.patch_dims[2]},
                         o.spacing);
    save_volume(reconstruct_cartesian(stack, grid, interp, o.fill), o.out);
  }
  write_provenance(fs::path(o.out).parent_path() / (fs::path(o.out).stem().string() + ".provenance.json"),
                   "reconstruct", std::move(options),
                   json{{"stack", digest_stack_dir(o.in)}});
  return 0;
}

// ---------------------------------------------------------------------------
// project

struct ProjectOpts {
  std::string in, like, out;
  std::string interp = "auto";
  double fill = 0.0;
};

int run_project(const ProjectOpts& o) {
  const FanGeometry geom = geometry_from_manifest(o.like);
  const bool label = volume_payload(o.in) == "label";
  const FanInterp interp = pick_interp(o.interp, label);
  if (label) {
    save_stack(project_to_frames(load_label_volume(o.in), geom, interp, o.fill),
               o.out);
  } else {
    save_stack(project_to_frames(load_image_volume(o.in), geom, interp, o.fill),
               o.out);
  }
  write_provenance(fs::path(o.out) / "provenance.json", "project",
                   json{{"in", o.in},
                        {"like", o.like},
                        {"out", o.out},
                        {"interp", interp == FanInterp::nearest ? "nearest" : "trilinear"},
                        {"fill", o.fill}},
                   json{{"volume", digest_volume(o.in)},
                        {"geometry", digest_file(fs::path(o.like) / "manifest.json")}});
  return 0;
}

// ---------------------------------------------------------------------------
// train

struct TrainOpts {
  std::string data, out;
  std::string preset = "desk";
  bool no_mem = false;
  double spacing = 0.5;
  TrainConfig tc;  // lr/momentum/wd/batch/epochs/seed/eval_every/...
  std::string optimizer = "sgd";
};

ModelConfig preset_by_name(const std::string& name) {
  if (name == "full") return ModelConfig::full_preset();
  if (name == "desk") return ModelConfig::desk_preset();
  if (name == "tiny") return ModelConfig::tiny_preset();
  require(false, "unknown preset '" + name + "'");
  return {};
}

std::vector<fs::path> list_cases(const fs::path& data) {
  std::vector<fs::path> cases;
  require(fs::is_directory(data), "not a directory: " + data.string());
  for (const auto& e : fs::directory_iterator(data))
    if (e.is_directory() && fs::exists(e.path() / "image" / "manifest.json") &&
        fs::exists(e.path() / "gt" / "manifest.json"))
      cases.push_back(e.path());
  std::sort(cases.begin(), cases.end());
  require(!cases.empty(), "no cases with image/ and gt/ stacks under " + data.string());
  return cases;
}

json model_config_json(const ModelConfig& mc) {
  return json{{"num_levels", mc.num_levels},
              {"base_channels", mc.base_channels},
              {"channel_cap", mc.channel_cap},
              {"num_classes", mc.num_classes},
              {"mem_enabled", mc.mem_enabled},
              {"lrelu_slope", mc.lrelu_slope},
              {"patch", mc.patch}};
}

int run_train(const TrainOpts& o) {
  ModelConfig mc = preset_by_name(o.preset);
  mc.mem_enabled = !o.no_mem;
  TrainConfig tc = o.tc;
  tc.out_dir = o.out;
  tc.optimizer = o.optimizer == "adam" ? Optimizer::adam : Optimizer::sgd_nesterov;
  require(o.optimizer == "adam" || o.optimizer == "sgd",
          "unknown optimizer '" + o.optimizer + "'");
  tc.validate();

  const std::vector<fs::path> cases = list_cases(o.data);
  std::vector<Sample<float>> samples;
  json inputs;
  for (const fs::path& c : cases) {
    const ImageStack img = load_image_stack(c / "image");
    const LabelStack gt = load_label_stack(c / "gt");
    const GridSpec grid = patch_grid(
        img.geometry, {mc.patch[2], mc.patch[1], mc.patch[0]}, o.spacing);
    const ImageVolume iv =
        reconstruct_cartesian(img, grid, FanInterp::trilinear, 0.0);
    const LabelVolume gv =
        reconstruct_cartesian(gt, grid, FanInterp::nearest, 0.0);
    samples.push_back(make_sample<float>(iv, gv, mc.patch));
    inputs[c.filename().string()] = json{{"image", digest_stack_dir(c / "image")},
                                         {"gt", digest_stack_dir(c / "gt")}};
  }

  MedMusNet<float> model = build_model<float>(mc, tc.seed);
  const TrainResult result = train_model(model, samples, tc);

  json options{{"data", o.data},
               {"out", o.out},
               {"preset", o.preset},
               {"spacing_mm", o.spacing},
               {"model", model_config_json(mc)},
               {"optimizer", o.optimizer},
               {"lr", tc.lr},
               {"momentum", tc.momentum},
               {"weight_decay", tc.weight_decay},
               {"batch_size", tc.batch_size},
               {"epochs", tc.epochs},
               {"seed", tc.seed},
               {"eval_every", tc.eval_every},
               {"checkpoint_every", tc.checkpoint_every},
               {"stop_at_train_dsc", tc.stop_at_train_dsc}};
  write_provenance(fs::path(o.out) / "provenance.json", "train",
                   std::move(options), std::move(inputs));
  json summary{{"epochs_run", result.epochs_run},
               {"stopped_early", result.stopped_early},
               {"final_train_dsc", result.final_train_dsc},
               {"param_count", model.param_count()}};
  {
    std::ofstream s(fs::path(o.out) / "summary.json");
    s << summary.dump(2) << "\n";
  }
  std::cout << "trained " << result.epochs_run << " epoch(s), train DSC "
            << fmt_double(result.final_train_dsc) << "\n";
  return 0;
}

// ---------------------------------------------------------------------------
// predict

struct PredictOpts {
  std::string model, in, out;
  double overlap = 0.5;
  std::string blend = "gaussian";
};

int run_predict(const PredictOpts& o) {
  require(volume_payload(o.in) == "intensity",
          "predict expects an intensity volume");
  require(checkpoint_dtype(o.model) == "float32",
          "predict supports float32 checkpoints");
  const WindowWeight w =
      o.blend == "uniform" ? WindowWeight::uniform : WindowWeight::gaussian;
  require(o.blend == "uniform" || o.blend == "gaussian",
          "unknown blend '" + o.blend + "'");
  MedMusNet<float> model = load_model<float>(o.model);
  const ImageVolume vol = load_image_volume(o.in);
  const Prediction pred = predict_volume(model, vol, o.overlap, w);
  fs::create_directories(o.out);
  save_volume(pred.prob_fg, fs::path(o.out) / "prob.json");
  save_volume(pred.mask, fs::path(o.out) / "mask.json");
  write_provenance(fs::path(o.out) / "provenance.json", "predict",
                   json{{"model", o.model},
                        {"in", o.in},
                        {"out", o.out},
                        {"overlap", o.overlap},
                        {"blend", o.blend}},
                   json{{"model", digest_file(o.model)},
                        {"volume", digest_volume(o.in)}});
  return 0;
}

// ---------------------------------------------------------------------------
// postproc

struct PostprocOpts {
  std::string in, out;
  int64_t closing_size = 3;  // 0 disables
  int64_t min_voxels = -1;   // -1 = scale the reference rule to the grid
  std::string connectivity = "26";
};

Connectivity pick_connectivity(const std::string& s) {
  if (s == "6") return Connectivity::c6;
  if (s == "26") return Connectivity::c26;
  if (s == "8") return Connectivity::c8_2d;
  require(false, "unknown connectivity '" + s + "' (use 6, 26, or 8)");
  return Connectivity::c26;
}

int run_postproc(const PostprocOpts& o) {
  require(volume_payload(o.in) == "label", "postproc expects a label volume");
  const Connectivity conn = pick_connectivity(o.connectivity);
  LabelVolume mask = load_label_volume(o.in);
  const int64_t min_voxels =
      o.min_voxels >= 0 ? o.min_voxels : scaled_min_voxels(mask.grid.spacing_mm);
  if (o.closing_size > 0) mask = closing(mask, o.closing_size);
  const LabeledComponents comps = connected_components(mask, conn);
  const LabelVolume filtered = filter_small(comps, min_voxels);
  const int64_t kept =
      connected_components(filtered, conn).component_count();
  save_volume(filtered, o.out);
  write_provenance(
      fs::path(o.out).parent_path() / (fs::path(o.out).stem().string() + ".provenance.json"),
      "postproc",
      json{{"in", o.in},
           {"out", o.out},
           {"closing", o.closing_size},
           {"min_voxels", min_voxels},
           {"connectivity", o.connectivity}},
      json{{"mask", digest_volume(o.in)}});
  std::cout << "components " << comps.component_count() << " -> " << kept
            << " (min voxels " << min_voxels << ")\n";
  return 0;
}

// ---------------------------------------------------------------------------
// eval

struct EvalOpts {
  std::string pred, gt, prostate, out;
  double overlap = 0.20;
  bool iou = false;
  int64_t min_voxels = 1;
  int64_t sectors = 13, thirds = 3;
};

json metrics_json(const MetricsReport& m) {
  auto put = [](const std::optional<double>& v) {
    return v ? json(*v) : json(nullptr);
  };
  return json{{"tp", m.counts.tp},
              {"fp", m.counts.fp},
              {"fn", m.counts.fn},
              {"tn", m.counts.tn},
              {"sensitivity", put(m.sensitivity)},
              {"specificity", put(m.specificity)},
              {"accuracy", put(m.accuracy)},
              {"ppv", put(m.ppv)},
              {"npv", put(m.npv)},
              {"f1", put(m.f1)},
              {"dsc", put(m.dsc)}};
}

struct EvalResult {
  json report;
  MetricsReport metrics_report;
  LesionMatch lesion_match;
  ConfusionCounts sector;
  std::optional<double> dice;
  std::pair<bool, bool> patient{false, false};
};

EvalResult evaluate_masks(const LabelVolume& pred, const LabelVolume& gt,
                          const LabelVolume& prostate, const EvalOpts& o) {
  require(pred.grid == gt.grid, "prediction and ground truth grids differ");
  require(pred.grid == prostate.grid, "prediction and prostate grids differ");
  EvalResult r;
  const LesionSet pl = extract_lesions(pred);
  const LesionSet gl = extract_lesions(gt);
  r.lesion_match = match_lesions(pl, gl, o.overlap,
                                 o.iou ? OverlapDenominator::iou
                                       : OverlapDenominator::gt_lesion);
  const SectorMap sm = sector_partition(prostate, o.sectors, o.thirds);
  r.sector = sector_confusion(pred, gt, sm, o.min_voxels);
  const ConfusionCounts combined = combined_counts(r.lesion_match, r.sector);
  r.dice = dsc(pred, gt);
  r.metrics_report = metrics(combined, r.dice);
  r.patient = patient_level(pred, gt);

  json lesion{{"gt_count", static_cast<int64_t>(gl.lesions.size())},
              {"pred_count", static_cast<int64_t>(pl.lesions.size())},
              {"tp", r.lesion_match.counts.tp},
              {"fn", r.lesion_match.counts.fn},
              {"fp", r.lesion_match.counts.fp},
              {"gt_detected", r.lesion_match.gt_detected}};
  json sector{{"sectors", o.sectors},
              {"thirds", o.thirds},
              {"min_voxels", o.min_voxels},
              {"tp", r.sector.tp},
              {"fp", r.sector.fp},
              {"fn", r.sector.fn},
              {"tn", r.sector.tn}};
  r.report = json{{"dsc", r.dice ? json(*r.dice) : json(nullptr)},
                  {"lesion", std::move(lesion)},
                  {"sector", std::move(sector)},
                  {"metrics", metrics_json(r.metrics_report)},
                  {"patient", json{{"pred_positive", r.patient.first},
                                   {"gt_positive", r.patient.second}}}};
  return r;
}

int run_eval(const EvalOpts& o) {
  const LabelVolume pred = load_label_volume(o.pred);
  const LabelVolume gt = load_label_volume(o.gt);
  const LabelVolume prostate = load_label_volume(o.prostate);
  const EvalResult r = evaluate_masks(pred, gt, prostate, o);
  fs::create_directories(fs::path(o.out).parent_path().empty()
                             ? fs::path(".")
                             : fs::path(o.out).parent_path());
  {
    std::ofstream out(o.out);
    require(out.good(), "cannot write " + o.out);
    out << r.report.dump(2) << "\n";
  }
  write_provenance(
      fs::path(o.out).parent_path() / (fs::path(o.out).stem().string() + ".provenance.json"),
      "eval",
      json{{"pred", o.pred},
           {"gt", o.gt},
           {"prostate", o.prostate},
           {"out", o.out},
           {"overlap_threshold", o.overlap},
           {"denominator", o.iou ? "iou" : "gt_lesion"},
           {"min_voxels", o.min_voxels},
           {"sectors", o.sectors},
           {"thirds", o.thirds}},
      json{{"pred", digest_volume(o.pred)},
           {"gt", digest_volume(o.gt)},
           {"prostate", digest_volume(o.prostate)}});
  std::cout << r.report.dump(2) << "\n";
  return 0;
}

// ---------------------------------------------------------------------------
// stats

struct StatsOpts {
  std::string test;  // wilcoxon | mannwhitney
  std::string a_file, b_file;
  std::string alternative = "two-sided";
  bool paired = false;
  int64_t bonferroni_m = 0;
};

std::vector<double> read_numbers(const fs::path& path) {
  std::ifstream in(path);
  require(in.good(), "cannot read " + path.string());
  std::vector<double> vals;
  std::string tok;
  while (in) {
    int c = in.get();
    const bool sep = c == EOF || c == ',' || std::isspace(c);
    if (!sep) {
      tok.push_back(static_cast<char>(c));
      continue;
    }
    if (!tok.empty()) {
      size_t pos = 0;
      const double v = std::stod(tok, &pos);
      require(pos == tok.size(), "bad number '" + tok + "' in " + path.string());
      vals.push_back(v);
      tok.clear();
    }
    if (c == EOF) break;
  }
  require(!vals.empty(), "no numbers in " + path.string());
  return vals;
}

int run_stats(const StatsOpts& o) {
  stats::Alternative alt = stats::Alternative::two_sided;
  if (o.alternative == "greater") alt = stats::Alternative::greater;
  else if (o.alternative == "less") alt = stats::Alternative::less;
  else require(o.alternative == "two-sided",
               "unknown alternative '" + o.alternative + "'");

  const std::vector<double> a = read_numbers(o.a_file);
  const std::vector<double> b = read_numbers(o.b_file);
  stats::TestResult r;
  if (o.test == "wilcoxon") {
    r = stats::wilcoxon_signed_rank(a, b, alt);
  } else {
    require(o.test == "mannwhitney", "unknown test '" + o.test + "'");
    require(!o.paired, "--paired applies to the wilcoxon test");
    r = stats::mann_whitney_u(a, b, alt);
  }
  json out{{"test", o.test},
           {"alternative", o.alternative},
           {"statistic", r.statistic},
           {"p_value", r.p_value},
           {"exact", r.exact},
           {"n_effective", r.n_effective}};
  if (o.bonferroni_m > 0) {
    out["bonferroni_m"] = o.bonferroni_m;
    out["p_adjusted"] = stats::bonferroni({r.p_value}, o.bonferroni_m)[0];
  }
  std::cout << out.dump(2) << "\n";
  return 0;
}

// ---------------------------------------------------------------------------
// e2e

struct E2eOpts {
  std::string out;
  uint64_t seed = 42;
  int64_t count = 6;
  int64_t epochs = 20;
  double lr = 0.01;
  int64_t batch = 2;
  double stop_dsc = 0.90;
  double contrast = 2.0;
  double speckle = 0.3;
  int64_t lesions = 1;
  bool no_mem = false;
  double spacing = 0.5;
};

int run_e2e(const E2eOpts& o) {
  const fs::path out(o.out);

  // 1. synthesize
  SynthOpts synth;
  synth.out = (out / "data").string();
  synth.count = o.count;
  synth.seed = o.seed;
  synth.contrast = o.contrast;
  synth.speckle = o.speckle;
  synth.lesions = o.lesions;
  run_synth(synth);

  // 2. reconstruct every stack onto the training grid
  const ModelConfig mc = [&] {
    ModelConfig m = ModelConfig::desk_preset();
    m.mem_enabled = !o.no_mem;
    return m;
  }();
  for (int64_t i = 0; i < o.count; ++i) {
    const fs::path c = out / "data" / case_name(i);
    const fs::path v = out / "volumes" / case_name(i);
    ReconOpts r;
    r.spacing = o.spacing;
    r.patch_dims = {mc.patch[2], mc.patch[1], mc.patch[0]};
    r.in = (c / "image").string();
    r.out = (v / "image.json").string();
    run_reconstruct(r);
    r.in = (c / "gt").string();
    r.out = (v / "gt.json").string();
    run_reconstruct(r);
    r.in = (c / "prostate").string();
    r.out = (v / "prostate.json").string();
    run_reconstruct(r);
  }

  // 3. train
  TrainOpts t;
  t.data = (out / "data").string();
  t.out = (out / "model").string();
  t.no_mem = o.no_mem;
  t.spacing = o.spacing;
  t.tc.lr = o.lr;
  t.tc.batch_size = o.batch;
  t.tc.epochs = o.epochs;
  t.tc.seed = o.seed;
  t.tc.stop_at_train_dsc = o.stop_dsc;
  run_train(t);

  // 4.-6. predict, post-process, project back, evaluate
  std::vector<std::string> rows;
  ConfusionCounts cohort;
  double dice_sum = 0;
  int64_t dice_n = 0;
  for (int64_t i = 0; i < o.count; ++i) {
    const fs::path v = out / "volumes" / case_name(i);
    const fs::path p = out / "pred" / case_name(i);

    PredictOpts pr;
    pr.model = (out / "model" / "checkpoint_final.ckpt").string();
    pr.in = (v / "image.json").string();
    pr.out = p.string();
    run_predict(pr);

    PostprocOpts pp;
    pp.in = (p / "mask.json").string();
    pp.out = (p / "mask_clean.json").string();
    run_postproc(pp);

    ProjectOpts pj;
    pj.in = (p / "mask_clean.json").string();
    pj.like = (out / "data" / case_name(i) / "image").string();
    pj.out = (p / "mask_frames").string();
    run_project(pj);

    // frame-level Dice against the ground-truth stack
    const LabelStack pred_frames = load_label_stack(pj.out);
    const LabelStack gt_frames =
        load_label_stack(out / "data" / case_name(i) / "gt");
    double inter = 0, a = 0, b = 0;
    for (size_t f = 0; f < pred_frames.frames.size(); ++f)
      for (size_t k = 0; k < pred_frames.frames[f].size(); ++k) {
        const bool pa = pred_frames.frames[f][k] != 0;
        const bool ga = gt_frames.frames[f][k] != 0;
        inter += pa && ga;
        a += pa;
        b += ga;
      }
    std::optional<double> frame_dice;
    if (a + b > 0) frame_dice = 2 * inter / (a + b);

    EvalOpts ev;
    ev.pred = pp.out;
    ev.gt = (v / "gt.json").string();
    ev.prostate = (v / "prostate.json").string();
    ev.out = (p / "report.json").string();
    const LabelVolume pm = load_label_volume(ev.pred);
    const LabelVolume gm = load_label_volume(ev.gt);
    const LabelVolume prm = load_label_volume(ev.prostate);
    const EvalResult r = evaluate_masks(pm, gm, prm, ev);
    {
      std::ofstream rep(ev.out);
      rep << r.report.dump(2) << "\n";
    }

    const ConfusionCounts cc = r.metrics_report.counts;
    cohort.tp += cc.tp;
    cohort.fp += cc.fp;
    cohort.fn += cc.fn;
    cohort.tn += cc.tn;
    if (r.dice) {
      dice_sum += *r.dice;
      ++dice_n;
    }
    std::string row = case_name(i);
    row += "," + opt_str(r.dice);
    row += "," + opt_str(frame_dice);
    row += "," + std::to_string(cc.tp) + "," + std::to_string(cc.fp) + "," +
           std::to_string(cc.fn) + "," + std::to_string(cc.tn);
    row += "," + opt_str(r.metrics_report.sensitivity);
    row += "," + opt_str(r.metrics_report.specificity);
    row += "," + opt_str(r.metrics_report.ppv);
    row += "," + opt_str(r.metrics_report.npv);
    row += "," + opt_str(r.metrics_report.f1);
    row += std::string(",") + (r.patient.first ? "1" : "0") + "," +
           (r.patient.second ? "1" : "0");
    rows.push_back(std::move(row));
  }

  const MetricsReport cohort_metrics =
      metrics(cohort, dice_n > 0 ? std::optional<double>(dice_sum / dice_n)
                                 : std::nullopt);
  std::string cohort_row = "cohort";
  cohort_row += "," + opt_str(cohort_metrics.dsc);
  cohort_row += ",";  // frame dice is per-case only
  cohort_row += "," + std::to_string(cohort.tp) + "," + std::to_string(cohort.fp) +
                "," + std::to_string(cohort.fn) + "," + std::to_string(cohort.tn);
  cohort_row += "," + opt_str(cohort_metrics.sensitivity);
  cohort_row += "," + opt_str(cohort_metrics.specificity);
  cohort_row += "," + opt_str(cohort_metrics.ppv);
  cohort_row += "," + opt_str(cohort_metrics.npv);
  cohort_row += "," + opt_str(cohort_metrics.f1);
  cohort_row += ",,";

  {
    std::ofstream csv(out / "metrics.csv");
    require(csv.good(), "cannot write " + (out / "metrics.csv").string());
    csv << "case,dice,frame_dice,tp,fp,fn,tn,sensitivity,specificity,ppv,npv,f1,"
           "patient_pred,patient_gt\n";
    for (const auto& row : rows) csv << row << "\n";
    csv << cohort_row << "\n";
  }

  write_provenance(out / "provenance.json", "e2e",
                   json{{"out", o.out},
                        {"seed", o.seed},
                        {"count", o.count},
                        {"epochs", o.epochs},
                        {"lr", o.lr},
                        {"batch", o.batch},
                        {"stop_dsc", o.stop_dsc},
                        {"contrast", o.contrast},
                        {"speckle", o.speckle},
                        {"lesions", o.lesions},
                        {"mem_enabled", !o.no_mem},
                        {"spacing_mm", o.spacing},
                        {"model", model_config_json(mc)}},
                   json{{"metrics_csv", digest_file(out / "metrics.csv")}});
  std::cout << "cohort DSC "
            << (cohort_metrics.dsc ? fmt_double(*cohort_metrics.dsc) : "n/a")
            << ", metrics at " << (out / "metrics.csv").string() << "\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"micro-ultrasound prostate segmentation pipeline"};
  app.set_version_flag("--version", kVersion);
  app.require_subcommand(1);
  int threads = 0;
  app.add_option("--threads", threads,
                 "worker threads (0 = MUS_THREADS or hardware)");

  SynthOpts so;
  CLI::App* synth = app.add_subcommand("synth", "generate synthetic phantoms");
  synth->add_option("--out", so.out, "output directory")->required();
  synth->add_option("--config", so.config_file, "phantom config JSON");
  synth->add_option("--count", so.count, "number of phantoms")
      ->check(CLI::PositiveNumber);
  synth->add_option("--seed", so.seed, "base seed (case i uses seed+i)");
  auto add_phantom_overrides = [](CLI::App* cmd, SynthOpts& s) {
    cmd->add_option("--contrast", [&s](const CLI::results_t& r) {
      s.contrast = std::stod(r[0]);
      return true;
    }, "prostate/lesion intensity ratio");
    cmd->add_option("--speckle", [&s](const CLI::results_t& r) {
      s.speckle = std::stod(r[0]);
      return true;
    }, "multiplicative noise std");
    cmd->add_option("--lesions", [&s](const CLI::results_t& r) {
      s.lesions = std::stoll(r[0]);
      return true;
    }, "lesions per phantom");
    cmd->add_option("--shadows", [&s](const CLI::results_t& r) {
      s.shadows = std::stoll(r[0]);
      return true;
    }, "shadow wedges per phantom");
  };
  add_phantom_overrides(synth, so);

  ReconOpts ro;
  CLI::App* recon = app.add_subcommand("reconstruct", "frame stack -> Cartesian volume");
  recon->add_option("--in", ro.in, "frame stack directory")->required();
  recon->add_option("--out", ro.out, "output volume header path")->required();
  recon->add_option("--spacing", ro.spacing, "isotropic voxel spacing in mm")
      ->check(CLI::PositiveNumber);
  recon->add_option("--patch", ro.patch_dims,
                    "exact grid dims nx ny nz centered on the fan")
      ->expected(3);
  recon->add_option("--interp", ro.interp, "auto|trilinear|nearest");
  recon->add_option("--fill", ro.fill, "value outside coverage");

  ProjectOpts po;
  CLI::App* project = app.add_subcommand("project", "volume -> frame stack");
  project->add_option("--in", po.in, "input volume header path")->required();
  project->add_option("--like", po.like, "stack directory providing geometry")
      ->required();
  project->add_option("--out", po.out, "output stack directory")->required();
  project->add_option("--interp", po.interp, "auto|trilinear|nearest");
  project->add_option("--fill", po.fill, "value outside the volume");

  TrainOpts to;
  CLI::App* train = app.add_subcommand("train", "train the segmentation network");
  train->add_option("--data", to.data, "directory of case_* stacks")->required();
  train->add_option("--out", to.out, "output directory")->required();
  train->add_option("--preset", to.preset, "full|desk|tiny");
  train->add_flag("--no-mem", to.no_mem, "disable the mask-gated stages");
  train->add_option("--spacing", to.spacing, "reconstruction spacing in mm")
      ->check(CLI::PositiveNumber);
  train->add_option("--lr", to.tc.lr, "learning rate");
  train->add_option("--momentum", to.tc.momentum, "momentum");
  train->add_option("--weight-decay", to.tc.weight_decay, "L2 penalty");
  train->add_option("--batch", to.tc.batch_size, "batch size")
      ->check(CLI::PositiveNumber);
  train->add_option("--epochs", to.tc.epochs, "max epochs")
      ->check(CLI::PositiveNumber);
  train->add_option("--optimizer", to.optimizer, "sgd|adam");
  train->add_option("--seed", to.tc.seed, "init + shuffle seed");
  train->add_option("--eval-every", to.tc.eval_every,
                    "epochs between train-DSC evaluations")
      ->check(CLI::PositiveNumber);
  train->add_option("--checkpoint-every", to.tc.checkpoint_every,
                    "epochs between checkpoints (0 = final only)");
  train->add_option("--stop-dsc", to.tc.stop_at_train_dsc,
                    "stop once train DSC reaches this (0 = off)");

  PredictOpts pro;
  CLI::App* predict = app.add_subcommand("predict", "sliding-window inference");
  predict->add_option("--model", pro.model, "checkpoint path")->required();
  predict->add_option("--in", pro.in, "intensity volume header")->required();
  predict->add_option("--out", pro.out, "output directory")->required();
  predict->add_option("--overlap", pro.overlap, "window overlap fraction");
  predict->add_option("--blend", pro.blend, "gaussian|uniform");

  PostprocOpts ppo;
  CLI::App* postproc = app.add_subcommand("postproc", "closing + small-component filter");
  postproc->add_option("--in", ppo.in, "label volume header")->required();
  postproc->add_option("--out", ppo.out, "output volume header")->required();
  postproc->add_option("--closing", ppo.closing_size,
                       "closing element size, odd (0 = skip)");
  postproc->add_option("--min-voxels", ppo.min_voxels,
                       "component threshold (-1 = scale reference rule)");
  postproc->add_option("--connectivity", ppo.connectivity, "6|26|8");

  StatsOpts sto;
  CLI::App* stats_cmd = app.add_subcommand("stats", "nonparametric tests");
  stats_cmd->add_option("--test", sto.test, "wilcoxon|mannwhitney")->required();
  stats_cmd->add_option("--a", sto.a_file, "first sample CSV")->required();
  stats_cmd->add_option("--b", sto.b_file, "second sample CSV")->required();
  stats_cmd->add_option("--alternative", sto.alternative,
                        "two-sided|greater|less");
  stats_cmd->add_flag("--paired", sto.paired, "samples are paired");
  stats_cmd->add_option("--bonferroni", sto.bonferroni_m,
                        "also report min(1, p*m)");

  E2eOpts eo;
  CLI::App* e2e = app.add_subcommand("e2e", "synth -> reconstruct -> train -> predict -> postproc -> project -> eval");
  e2e->add_option("--out", eo.out, "output directory")->required();
  e2e->add_option("--seed", eo.seed, "demo seed");
  e2e->add_option("--count", eo.count, "phantom count")->check(CLI::PositiveNumber);
  e2e->add_option("--epochs", eo.epochs, "max training epochs")
      ->check(CLI::PositiveNumber);
  e2e->add_option("--lr", eo.lr, "learning rate");
  e2e->add_option("--batch", eo.batch, "batch size")->check(CLI::PositiveNumber);
  e2e->add_option("--stop-dsc", eo.stop_dsc, "early-stop train DSC (0 = off)");
  e2e->add_option("--contrast", eo.contrast, "phantom contrast");
  e2e->add_option("--speckle", eo.speckle, "phantom speckle std");
  e2e->add_option("--lesions", eo.lesions, "lesions per phantom");
  e2e->add_flag("--no-mem", eo.no_mem, "disable the mask-gated stages");

  EvalOpts evo;
  CLI::App* eval_cmd = app.add_subcommand("eval", "lesion + sector metrics");
  eval_cmd->add_option("--pred", evo.pred, "predicted label volume")->required();
  eval_cmd->add_option("--gt", evo.gt, "ground-truth label volume")->required();
  eval_cmd->add_option("--prostate", evo.prostate, "prostate label volume")
      ->required();
  eval_cmd->add_option("--out", evo.out, "report JSON path")->required();
  eval_cmd->add_option("--overlap-threshold", evo.overlap,
                       "detection needs overlap strictly above this");
  eval_cmd->add_flag("--iou", evo.iou, "use IoU as the overlap denominator");
  eval_cmd->add_option("--min-voxels", evo.min_voxels,
                       "region positivity threshold")
      ->check(CLI::PositiveNumber);
  eval_cmd->add_option("--sectors", evo.sectors, "angular bins")
      ->check(CLI::PositiveNumber);
  eval_cmd->add_option("--thirds", evo.thirds, "z slabs")
      ->check(CLI::PositiveNumber);

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForVersion& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }

  try {
    if (threads > 0) set_thread_count(threads);
    if (synth->parsed()) return run_synth(so);
    if (recon->parsed()) return run_reconstruct(ro);
    if (project->parsed()) return run_project(po);
    if (train->parsed()) return run_train(to);
    if (predict->parsed()) return run_predict(pro);
    if (postproc->parsed()) return run_postproc(ppo);
    if (stats_cmd->parsed()) return run_stats(sto);
    if (eval_cmd->parsed()) return run_eval(evo);
    if (e2e->parsed()) return run_e2e(eo);
    std::cerr << "error: no subcommand\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
}
