#include "treeformer/cli.hpp"

#include <CLI11.hpp>
#include <cmath>
#include <fstream>
#include <iostream>
#include <json.hpp>

#include "treeformer/metrics.hpp"
#include "treeformer/model/checkpoint.hpp"
#include "treeformer/synth.hpp"
#include "treeformer/train/engine.hpp"

namespace treeformer::cli {

namespace fs = std::filesystem;
using train::TrainConfig;

std::vector<std::string> ablation_switches() {
  return {"w/o LTC", "w/o LTR",  "w/o GTC",    "w/ L2",        "w/ LTC-JS",
          "w/ STC",  "w/ STR",   "w/o CAFF",   "CAFF w/o CA",  "CAFF w/ SA",
          "CAFF w/ SA+CA", "tau=1", "tau=2",   "tau=3",        "perturb=P3,P2,P1"};
}

void apply_ablation_switch(TrainConfig& cfg, const std::string& name) {
  auto is = [&](const char* canonical, const char* slug) {
    return name == canonical || name == slug;
  };
  if (is("w/o LTC", "no-ltc")) cfg.use_consistency = false;
  else if (is("w/o LTR", "no-ltr")) cfg.use_ranking = false;
  else if (is("w/o GTC", "no-gtc")) cfg.use_global = false;
  else if (is("w/ L2", "l2")) cfg.pixel_loss = "l2";
  else if (is("w/ LTC-JS", "ltc-js")) cfg.js_consistency = true;
  else if (is("w/ STC", "stc")) cfg.single_scale_consistency = true;
  else if (is("w/ STR", "str")) cfg.ranking_finest_only = true;
  else if (is("w/o CAFF", "no-caff")) cfg.caff_variant = "none";
  else if (is("CAFF w/o CA", "caff-plain")) cfg.caff_variant = "plain";
  else if (is("CAFF w/ SA", "caff-sa")) cfg.caff_variant = "sa";
  else if (is("CAFF w/ SA+CA", "caff-sa-ca")) cfg.caff_variant = "sa_ca";
  else if (name.rfind("tau=", 0) == 0) cfg.tau_schedule = name.substr(4);
  else if (name.rfind("perturb=", 0) == 0) cfg.perturb_order = name.substr(8);
  else {
    std::string msg = "unknown ablation switch '" + name + "'; valid switches:";
    for (const auto& s : ablation_switches()) msg += " [" + s + "]";
    throw std::invalid_argument(msg);
  }
}

data::ImageF32 pad_to_multiple(const data::ImageF32& img, int multiple) {
  int ph = (img.h + multiple - 1) / multiple * multiple;
  int pw = (img.w + multiple - 1) / multiple * multiple;
  if (ph == img.h && pw == img.w) return img;
  data::ImageF32 out(ph, pw);
  for (int y = 0; y < ph; ++y) {
    int sy = y < img.h ? y : 2 * img.h - 2 - y;  // reflect without edge repeat
    sy = std::clamp(sy, 0, img.h - 1);
    for (int x = 0; x < pw; ++x) {
      int sx = x < img.w ? x : 2 * img.w - 2 - x;
      sx = std::clamp(sx, 0, img.w - 1);
      const float* s = img.px(sy, sx);
      float* d = out.px(y, x);
      d[0] = s[0];
      d[1] = s[1];
      d[2] = s[2];
    }
  }
  return out;
}

namespace {

struct CommonArgs {
  std::string config;
  std::string manifest;
  std::string checkpoint;
  std::string out;
  uint64_t seed = uint64_t(-1);  // -1: keep config value
  double labeled_fraction = -1;
  double lambda = -1;
  std::vector<std::string> overrides;  // key=value pairs
};

void add_common(CLI::App* cmd, CommonArgs& args) {
  cmd->add_option("--config", args.config, "flat key=value config file");
  cmd->add_option("--manifest", args.manifest, "dataset manifest csv");
  cmd->add_option("--checkpoint", args.checkpoint, "checkpoint path");
  cmd->add_option("--out", args.out, "output directory");
  cmd->add_option("--seed", args.seed, "RNG seed");
  cmd->add_option("--labeled-fraction", args.labeled_fraction, "fraction of ids kept labeled");
  cmd->add_option("--lambda", args.lambda, "unlabeled loss weight");
  cmd->add_option("--set", args.overrides, "extra config overrides, key=value")
      ->take_all();
}

TrainConfig build_config(const CommonArgs& args) {
  TrainConfig cfg;
  if (!args.config.empty()) cfg = TrainConfig::from_file(args.config);
  if (args.seed != uint64_t(-1)) cfg.seed = args.seed;
  if (args.labeled_fraction >= 0) cfg.labeled_fraction = args.labeled_fraction;
  if (args.lambda >= 0) cfg.lambda = args.lambda;
  std::map<std::string, std::string> kv;
  for (const auto& ov : args.overrides) {
    size_t eq = ov.find('=');
    if (eq == std::string::npos) throw std::invalid_argument("--set needs key=value: " + ov);
    kv[ov.substr(0, eq)] = ov.substr(eq + 1);
  }
  cfg.apply(kv);
  return cfg;
}

std::vector<std::string> manifest_ids(const std::vector<data::AnnotatedImage>& images) {
  std::vector<std::string> ids;
  for (const auto& im : images) ids.push_back(im.id);
  return ids;
}

nlohmann::json report_to_json(const metrics::MetricsReport& rep) {
  nlohmann::json j;
  j["n"] = rep.n;
  j["e_mae"] = rep.e_mae;
  j["e_rms"] = rep.e_rms;
  if (rep.e_r2) j["e_r2"] = *rep.e_r2;
  else j["e_r2"] = nullptr;
  j["e_g0"] = rep.e_game[0];
  j["e_g1"] = rep.e_game[1];
  j["e_g2"] = rep.e_game[2];
  j["e_g3"] = rep.e_game[3];
  j["e_p"] = rep.e_p;
  j["e_r"] = rep.e_r;
  j["e_f1"] = rep.e_f1;
  j["tp"] = rep.tp;
  j["fp"] = rep.fp;
  j["fn"] = rep.fn;
  return j;
}

int cmd_synth(const CommonArgs& common, const synth::SynthOptions& opts_in) {
  synth::SynthOptions opts = opts_in;
  opts.out_dir = common.out;
  if (common.seed != uint64_t(-1)) opts.seed = common.seed;
  auto ids = synth::generate_dataset(opts);
  std::cout << "wrote " << ids.size() << " images under " << opts.out_dir.string() << "\n";
  return 0;
}

int cmd_prepare(const CommonArgs& common, double sigma) {
  auto images = data::parse_annotations(common.manifest);
  size_t labeled = 0, points = 0;
  for (const auto& im : images) {
    if (im.is_labeled) ++labeled;
    points += im.points.size();
  }
  std::cout << "manifest ok: " << images.size() << " images (" << labeled << " labeled, "
            << images.size() - labeled << " unlabeled), " << points << " points\n";
  if (!common.out.empty()) {
    fs::create_directories(common.out);
    for (const auto& im : images) {
      if (!im.is_labeled) continue;
      Grid den = data::generate_density_map(im.points, im.pixels.h, im.pixels.w, sigma);
      treeformer::save_density(fs::path(common.out) / (im.id + "_density.bin"), den);
    }
    std::cout << "wrote " << labeled << " density maps to " << common.out << "\n";
  }
  return 0;
}

int cmd_train(const CommonArgs& common) {
  if (common.manifest.empty() || common.out.empty())
    throw std::invalid_argument("train needs --manifest and --out");
  TrainConfig cfg = build_config(common);
  auto images = data::parse_annotations(common.manifest);
  auto split = data::split_dataset(manifest_ids(images), cfg.labeled_fraction, cfg.seed);
  train::Trainer trainer(cfg, std::move(images), split);
  auto result = trainer.fit(common.out);
  std::cout << "trained " << result.steps_run << " steps; best val E_MAE "
            << result.best_val_mae << "\ncheckpoint: " << result.checkpoint_path.string()
            << "\n";
  std::ofstream rep(fs::path(common.out) / "fit_report.json");
  rep << report_to_json(result.final_eval).dump(2) << "\n";
  return 0;
}

int cmd_evaluate(const CommonArgs& common) {
  if (common.checkpoint.empty() || common.manifest.empty())
    throw std::invalid_argument("evaluate needs --checkpoint and --manifest");
  auto loaded = model::load_checkpoint(common.checkpoint);
  double sigma = 4.0;
  if (auto it = loaded.meta.train_config.find("sigma"); it != loaded.meta.train_config.end())
    sigma = std::stod(it->second);

  auto images = data::parse_annotations(common.manifest);
  std::vector<const data::AnnotatedImage*> ptrs;
  for (const auto& im : images)
    if (im.is_labeled) ptrs.push_back(&im);
  if (ptrs.empty()) throw std::invalid_argument("evaluate: manifest has no labeled images");

  auto rep = train::evaluate_images(*loaded.net, ptrs, sigma);
  std::cout << report_to_json(rep).dump(2) << "\n";
  if (!common.out.empty()) {
    fs::create_directories(common.out);
    std::ofstream jf(fs::path(common.out) / "report.json");
    jf << report_to_json(rep).dump(2) << "\n";
    std::ofstream csv(fs::path(common.out) / "per_image.csv");
    csv << "id,est_count,gt_count,game0,game1,game2,game3\n";
    for (const auto* im : ptrs) {
      Grid est = train::predict_density(*loaded.net, im->pixels);
      Grid full = data::generate_density_map(im->points, im->pixels.h, im->pixels.w, sigma);
      Grid gt = data::downsample_density(full, 4);
      csv << im->id << ',' << est.sum() << ',' << gt.sum();
      for (int level = 0; level < 4; ++level) csv << ',' << metrics::game(est, gt, level);
      csv << '\n';
    }
  }
  return 0;
}

int cmd_predict(const CommonArgs& common, const std::string& image_path) {
  if (common.checkpoint.empty() || image_path.empty())
    throw std::invalid_argument("predict needs --checkpoint and --image");
  auto loaded = model::load_checkpoint(common.checkpoint);
  data::ImageF32 img = data::load_image(image_path);
  const int oh = img.h, ow = img.w;
  data::ImageF32 padded = pad_to_multiple(img, 32);
  Grid map = train::predict_density(*loaded.net, padded);
  // crop the map back to the original extent at 1/4 scale
  int mh = (oh + 3) / 4, mw = (ow + 3) / 4;
  Grid cropped(mh, mw);
  for (int y = 0; y < mh; ++y)
    for (int x = 0; x < mw; ++x) cropped.at(y, x) = map.at(y, x);

  fs::path out_dir = common.out.empty() ? fs::path(".") : fs::path(common.out);
  fs::create_directories(out_dir);
  std::string stem = fs::path(image_path).stem().string();
  treeformer::save_density(out_dir / (stem + "_density.bin"), cropped);
  data::save_heatmap(out_dir / (stem + "_heat.png"), cropped);
  std::cout << "count " << cropped.sum() << "\n";
  return 0;
}

int cmd_ablate(const CommonArgs& common, const std::vector<std::string>& switches,
               const std::string& test_manifest) {
  if (common.manifest.empty() || common.out.empty())
    throw std::invalid_argument("ablate needs --manifest and --out");
  TrainConfig base = build_config(common);
  // validate all switches before any training starts
  for (const auto& s : switches) {
    TrainConfig probe = base;
    apply_ablation_switch(probe, s);
  }

  std::vector<data::AnnotatedImage> test_images;
  std::vector<const data::AnnotatedImage*> test_ptrs;
  if (!test_manifest.empty()) {
    test_images = data::parse_annotations(test_manifest);
    for (const auto& im : test_images)
      if (im.is_labeled) test_ptrs.push_back(&im);
  }

  fs::create_directories(common.out);
  std::ofstream csv(fs::path(common.out) / "ablate.csv");
  csv << "variant,seed,e_mae,e_rms,e_r2,e_g0,e_g1,e_g2,e_g3,e_p,e_r,e_f1\n";

  std::vector<std::string> variants = {"full"};
  variants.insert(variants.end(), switches.begin(), switches.end());
  for (const auto& variant : variants) {
    TrainConfig cfg = base;
    if (variant != "full") apply_ablation_switch(cfg, variant);
    auto images = data::parse_annotations(common.manifest);
    auto split = data::split_dataset(manifest_ids(images), cfg.labeled_fraction, cfg.seed);
    train::Trainer trainer(cfg, std::move(images), split);
    fs::path run_dir = fs::path(common.out) / ("run_" + std::to_string(&variant - &variants[0]));
    auto result = trainer.fit(run_dir);
    auto rep = test_ptrs.empty() ? result.final_eval : trainer.evaluate(test_ptrs);
    csv << '"' << variant << "\"," << cfg.seed << ',' << rep.e_mae << ',' << rep.e_rms << ','
        << (rep.e_r2 ? std::to_string(*rep.e_r2) : std::string("nan")) << ',' << rep.e_game[0]
        << ',' << rep.e_game[1] << ',' << rep.e_game[2] << ',' << rep.e_game[3] << ',' << rep.e_p
        << ',' << rep.e_r << ',' << rep.e_f1 << '\n';
    csv.flush();
    std::cout << "variant [" << variant << "] E_MAE " << rep.e_mae << " E_F1 " << rep.e_f1
              << "\n";
  }
  return 0;
}

}  // namespace

int run(int argc, const char* const* argv) {
  CLI::App app{"semi-supervised tree counting from single aerial images"};
  app.require_subcommand(1);

  CommonArgs common;
  synth::SynthOptions synth_opts;
  double prepare_sigma = 4.0;
  std::string image_path;
  std::vector<std::string> switches;
  std::string test_manifest;

  CLI::App* synth_cmd = app.add_subcommand("synth", "generate a synthetic tree dataset");
  add_common(synth_cmd, common);
  synth_cmd->add_option("--n", synth_opts.n, "number of images");
  synth_cmd->add_option("--size", synth_opts.size, "image size, multiple of 32");
  synth_cmd->add_option("--density-lo", synth_opts.density_lo, "minimum trees per image");
  synth_cmd->add_option("--density-hi", synth_opts.density_hi, "maximum trees per image");
  synth_cmd->add_option("--clutter", synth_opts.clutter, "background distractor level");

  CLI::App* prepare_cmd = app.add_subcommand("prepare-data", "validate a manifest");
  add_common(prepare_cmd, common);
  prepare_cmd->add_option("--sigma", prepare_sigma, "GT Gaussian sigma in pixels");

  CLI::App* train_cmd = app.add_subcommand("train", "train a model");
  add_common(train_cmd, common);

  CLI::App* eval_cmd = app.add_subcommand("evaluate", "evaluate a checkpoint");
  add_common(eval_cmd, common);

  CLI::App* predict_cmd = app.add_subcommand("predict", "predict a density map for one image");
  add_common(predict_cmd, common);
  predict_cmd->add_option("--image", image_path, "input image path");

  CLI::App* ablate_cmd = app.add_subcommand("ablate", "train ablation variants");
  add_common(ablate_cmd, common);
  ablate_cmd->add_option("--switch", switches, "ablation switch, repeatable")->take_all();
  ablate_cmd->add_option("--test-manifest", test_manifest, "separate evaluation manifest");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    int code = app.exit(e);
    return code == 0 ? 0 : 1;
  }

  try {
    if (synth_cmd->parsed()) return cmd_synth(common, synth_opts);
    if (prepare_cmd->parsed()) return cmd_prepare(common, prepare_sigma);
    if (train_cmd->parsed()) return cmd_train(common);
    if (eval_cmd->parsed()) return cmd_evaluate(common);
    if (predict_cmd->parsed()) return cmd_predict(common, image_path);
    if (ablate_cmd->parsed()) return cmd_ablate(common, switches, test_manifest);
  } catch (const std::invalid_argument& e) {
    std::cerr << "usage error: " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
  return 1;
}

}  // namespace treeformer::cli
