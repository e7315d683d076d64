#pragma once

// Command-line front end: gen, train, simulate, evaluate, prune.
//
// Exit codes: 0 success, 1 runtime failure (JSON error object on stderr),
// 2 usage error.

#include "dsgw/io.hpp"
#include "dsgw/metrics.hpp"
#include "dsgw/trainer.hpp"

#include <CLI11.hpp>

#include <algorithm>
#include <iostream>
#include <map>
#include <optional>
#include <string>
#include <vector>

namespace dsgw {

/// Files written by `train` inside the checkpoint directory.
struct CheckpointLayout {
  fs::path dir;
  fs::path field1() const { return dir / "field1.dsgw"; }
  fs::path field2() const { return dir / "field2.dsgw"; }
  fs::path config() const { return dir / "config.json"; }
  fs::path meta() const { return dir / "meta.json"; }
  fs::path log() const { return dir / "train_log.jsonl"; }
};

struct EvalView {
  std::string name;
  double psnr = 0.0;
  double ssim = 0.0;
  double psnr_8bit = 0.0;
  double ssim_8bit = 0.0;
};

struct EvalReport {
  std::vector<EvalView> views;
  EvalView mean;
};

namespace detail {

inline json error_json(const std::string& kind, const std::string& message) {
  return {{"error", {{"kind", kind}, {"message", message}}}};
}

inline json log_json(const IterationLog& l) {
  return {{"phase", l.phase},
          {"iteration", l.iteration},
          {"view", l.view},
          {"total", l.loss.total},
          {"recon_1", l.loss.recon_1},
          {"recon_2", l.loss.recon_2},
          {"align_photo", l.loss.align_photo},
          {"align_sem", l.loss.align_sem},
          {"pseudo_photo", l.loss.pseudo_photo},
          {"pseudo_sem", l.loss.pseudo_sem},
          {"seconds", l.seconds}};
}

// Stems of the ground-truth views in `dir` (NNN for NNN.png / NNN.pfm).
inline std::vector<std::string> view_stems(const fs::path& dir) {
  if (!fs::is_directory(dir)) throw Error(ErrorKind::Io, "not a directory: " + dir.string());
  std::set<std::string> stems;
  for (const auto& e : fs::directory_iterator(dir)) {
    const auto name = e.path().filename().string();
    const auto ext = e.path().extension().string();
    if (!e.is_regular_file() || (ext != ".png" && ext != ".pfm")) continue;
    const auto stem = e.path().stem().string();
    if (stem.size() >= 5 && stem.compare(stem.size() - 5, 5, "_mask") == 0) continue;
    stems.insert(stem);
  }
  return {stems.begin(), stems.end()};
}

// Float image: PFM when present, else the PNG.
inline Image load_float_view(const fs::path& dir, const std::string& stem) {
  if (fs::is_regular_file(dir / (stem + ".pfm"))) return read_pfm(dir / (stem + ".pfm"));
  if (fs::is_regular_file(dir / (stem + ".png"))) return read_png(dir / (stem + ".png"));
  throw Error(ErrorKind::Io, "view " + stem + " missing in " + dir.string());
}

// 8-bit image: the PNG when present, else the quantized float image.
inline Image load_8bit_view(const fs::path& dir, const std::string& stem, const Image& fallback) {
  if (fs::is_regular_file(dir / (stem + ".png"))) return read_png(dir / (stem + ".png"));
  return quantized(fallback);
}

}  // namespace detail

/// Per-view metrics of renders against ground truth, matched by file stem.
inline EvalReport evaluate_directories(const fs::path& renders, const fs::path& truth) {
  EvalReport r;
  const auto stems = detail::view_stems(truth);
  if (stems.empty()) throw Error(ErrorKind::Input, "no views found in " + truth.string());
  for (const auto& s : stems) {
    const Image t = detail::load_float_view(truth, s);
    const Image x = detail::load_float_view(renders, s);
    require_same_shape(x, t, ("view " + s).c_str());
    const Image t8 = detail::load_8bit_view(truth, s, t);
    const Image x8 = detail::load_8bit_view(renders, s, x);
    EvalView v{s, psnr(x, t), ssim(x, t), psnr(x8, t8), ssim(x8, t8)};
    r.mean.psnr += v.psnr;
    r.mean.ssim += v.ssim;
    r.mean.psnr_8bit += v.psnr_8bit;
    r.mean.ssim_8bit += v.ssim_8bit;
    r.views.push_back(v);
  }
  const double n = static_cast<double>(r.views.size());
  r.mean.name = "mean";
  r.mean.psnr /= n;
  r.mean.ssim /= n;
  r.mean.psnr_8bit /= n;
  r.mean.ssim_8bit /= n;
  return r;
}

inline json to_json(const EvalReport& r) {
  auto one = [](const EvalView& v) {
    return json{{"name", v.name}, {"psnr", v.psnr}, {"ssim", v.ssim}, {"psnr_8bit", v.psnr_8bit}, {"ssim_8bit", v.ssim_8bit}};
  };
  json views = json::array();
  for (const auto& v : r.views) views.push_back(one(v));
  json mean = one(r.mean);
  mean.erase("name");
  return {{"views", views}, {"mean", mean}, {"metrics_on", "float renders; *_8bit fields use the PNGs"}};
}

/// Writes the trainer state as a pair of checkpoints plus config and metadata.
inline void save_trainer_state(const CheckpointLayout& ck, const TrainerState& s, const TrainConfig& cfg,
                               const fs::path& scene_dir) {
  fs::create_directories(ck.dir);
  save_field(ck.field1(), {s.field1, s.classifier, s.adam1, s.adam_clf});
  save_field(ck.field2(), {s.field2, s.classifier, s.adam2, s.adam_clf});
  write_json(ck.config(), to_json(cfg));
  write_json(ck.meta(), {{"scene", fs::absolute(scene_dir).lexically_normal().string()},
                         {"phase1_done", s.phase1_done},
                         {"phase2_done", s.phase2_done}});
}

struct LoadedCheckpoint {
  FieldCheckpoint first;
  FieldCheckpoint second;
  TrainConfig config;
  fs::path scene;
};

inline LoadedCheckpoint load_checkpoint_dir(const fs::path& dir) {
  const CheckpointLayout ck{dir};
  LoadedCheckpoint out;
  out.first = load_field(ck.field1());
  out.second = load_field(ck.field2());
  out.config = train_config_from_json(read_json(ck.config()));
  const json meta = read_json(ck.meta());
  out.scene = detail::json_guard("meta.json", [&] { return fs::path(meta.at("scene").get<std::string>()); });
  return out;
}

namespace detail {

inline int cmd_gen(const fs::path& spec_path, const fs::path& out, std::optional<std::uint64_t> seed, std::ostream& os) {
  SceneSpec spec = scene_spec_from_json(read_json(spec_path));
  if (seed) spec.seed = *seed;
  const auto b = generate(spec);
  save_bundle(out, b);
  os << json{{"bundle", out.string()}, {"points1", b.points1.size()}, {"points2", b.points2.size()},
             {"train_views", b.train_cameras.size()}, {"test_views", b.test_cameras.size()}}
            .dump()
     << "\n";
  return 0;
}

inline int cmd_train(const fs::path& scene, const fs::path& config, const fs::path& out,
                     std::optional<std::uint64_t> seed, std::optional<int> p1, std::optional<int> p2,
                     std::ostream& os) {
  TrainConfig cfg = config.empty() ? TrainConfig{} : train_config_from_json(read_json(config));
  if (seed) cfg.seed = *seed;
  if (p1) cfg.phase1_iters = *p1;
  if (p2) cfg.phase2_iters = *p2;
  cfg.validate();
  const auto b = load_bundle(scene);
  const CheckpointLayout ck{out};
  fs::create_directories(out);
  std::string log_lines;
  auto s = init_trainer(b, cfg);
  const TrainLogger logger = [&](const IterationLog& l) { log_lines += log_json(l).dump() + "\n"; };
  run_phase1(s, b, cfg, logger);
  run_phase2(s, b, cfg, logger);
  save_trainer_state(ck, s, cfg, scene);
  write_file_atomic(ck.log(), log_lines);
  os << json{{"checkpoint", out.string()}, {"field1", s.field1.size()}, {"field2", s.field2.size()},
             {"iterations", s.phase1_done + s.phase2_done}}
            .dump()
     << "\n";
  return 0;
}

inline int cmd_simulate(const fs::path& ckpt, const fs::path& state, const std::string& views, const fs::path& out,
                        int host, std::ostream& os) {
  const auto lc = load_checkpoint_dir(ckpt);
  const auto b = load_bundle(lc.scene);
  const SceneTransform t_1t = scene_transform_from_json(read_json(state));
  const auto opt = synthesis_options(lc.config);
  GaussianField target;
  if (host == 1) {
    target = synthesize_target(lc.first.field, lc.second.field, b.t_12, t_1t, opt);
  } else {
    target = synthesize_target(lc.second.field, lc.first.field, invert(b.t_12), compose(t_1t, invert(b.t_12)), opt);
  }
  const auto& cams = views == "test" ? b.test_cameras : b.train_cameras;
  fs::create_directories(out);
  for (std::size_t i = 0; i < cams.size(); ++i) {
    const auto sr = render_semantic(target, cams[i], lc.first.classifier, true);
    LabelImage mask(cams[i].width, cams[i].height);
    mask.ids = decode_labels(sr.logits, target.object_count, 0.0, {});
    const std::string stem = view_stem(i);
    write_png(out / (stem + ".png"), sr.render.color_image);
    write_pfm(out / (stem + ".pfm"), sr.render.color_image);
    write_mask_png(out / (stem + "_mask.png"), mask);
  }
  os << json{{"renders", out.string()}, {"views", cams.size()}, {"primitives", target.size()}}.dump() << "\n";
  return 0;
}

inline int cmd_evaluate(const fs::path& renders, const fs::path& truth, const fs::path& report, std::ostream& os) {
  const auto r = evaluate_directories(renders, truth);
  const json j = to_json(r);
  if (!report.empty()) write_json(report, j);
  os << j["mean"].dump() << "\n";
  return 0;
}

inline int cmd_prune(const fs::path& ckpt, double tau, const fs::path& report, std::ostream& os) {
  const auto lc = load_checkpoint_dir(ckpt);
  const auto b = load_bundle(lc.scene);
  const auto r = co_prune(lc.first.field, lc.second.field, b.t_12, tau);
  const json j = {{"tau", r.threshold},
                  {"removed_from_1", r.removed_from_1},
                  {"removed_from_2", r.removed_from_2},
                  {"size_1", lc.first.field.size()},
                  {"size_2", lc.second.field.size()}};
  if (!report.empty()) write_json(report, j);
  os << json{{"tau", tau}, {"removed_from_1", r.removed_from_1.size()}, {"removed_from_2", r.removed_from_2.size()}}
            .dump()
     << "\n";
  return 0;
}

}  // namespace detail

inline int run_cli(int argc, const char* const* argv, std::ostream& out = std::cout, std::ostream& err = std::cerr) {
  CLI::App app{"Dual-state segmented Gaussian scenes: generate, train, simulate, evaluate", "dsgw"};
  app.require_subcommand(1);

  fs::path spec_path, out_dir, scene_dir, config_path, ckpt_dir, state_path, renders_dir, truth_dir, report_path;
  std::string views = "test";
  std::optional<std::uint64_t> seed;
  std::optional<int> phase1, phase2;
  int host = 1;
  double tau = kDefaultPruneTau;

  auto* gen = app.add_subcommand("gen", "generate a dual-state scene bundle");
  gen->add_option("--spec", spec_path, "scene spec JSON")->required();
  gen->add_option("--out", out_dir, "output bundle directory")->required();
  gen->add_option("--seed", seed, "override the scene seed");

  auto* train = app.add_subcommand("train", "train a field pair on a bundle");
  train->add_option("--scene", scene_dir, "bundle directory")->required();
  train->add_option("--config", config_path, "training config JSON (defaults when omitted)");
  train->add_option("--out", out_dir, "checkpoint directory")->required();
  train->add_option("--seed", seed, "override the config seed");
  train->add_option("--phase1", phase1, "override phase-1 iterations");
  train->add_option("--phase2", phase2, "override phase-2 iterations");

  auto* sim = app.add_subcommand("simulate", "render a new object configuration");
  sim->add_option("--ckpt", ckpt_dir, "checkpoint directory")->required();
  sim->add_option("--state", state_path, "per-object transforms from state 1 (JSON)")->required();
  sim->add_option("--views", views, "camera set")->check(CLI::IsMember({"test", "train"}));
  sim->add_option("--out", out_dir, "output image directory")->required();
  sim->add_option("--host", host, "field hosting the result (1 or 2)")->check(CLI::Range(1, 2));

  auto* eval = app.add_subcommand("evaluate", "PSNR and SSIM of renders against ground truth");
  eval->add_option("--renders", renders_dir, "rendered images")->required();
  eval->add_option("--truth", truth_dir, "ground-truth images")->required();
  eval->add_option("--report", report_path, "JSON report path");

  auto* prune = app.add_subcommand("prune", "co-prune a trained pair");
  prune->add_option("--ckpt", ckpt_dir, "checkpoint directory")->required();
  prune->add_option("--tau", tau, "distance threshold");
  prune->add_option("--report", report_path, "JSON report path");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return 0;
  } catch (const CLI::ParseError& e) {
    err << e.what() << "\n" << app.help();
    return 2;
  }

  try {
    if (*gen) return detail::cmd_gen(spec_path, out_dir, seed, out);
    if (*train) return detail::cmd_train(scene_dir, config_path, out_dir, seed, phase1, phase2, out);
    if (*sim) return detail::cmd_simulate(ckpt_dir, state_path, views, out_dir, host, out);
    if (*eval) return detail::cmd_evaluate(renders_dir, truth_dir, report_path, out);
    if (*prune) return detail::cmd_prune(ckpt_dir, tau, report_path, out);
  } catch (const Error& e) {
    err << detail::error_json(to_string(e.kind()), e.what()).dump() << "\n";
    return 1;
  } catch (const fs::filesystem_error& e) {
    err << detail::error_json("io", e.what()).dump() << "\n";
    return 1;
  } catch (const std::exception& e) {
    err << detail::error_json("internal", e.what()).dump() << "\n";
    return 1;
  }
  return 2;
}

}  // namespace dsgw
