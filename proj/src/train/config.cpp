#include "treeformer/train/config.hpp"

#include <fstream>
#include <sstream>
#include <stdexcept>

namespace treeformer::train {

namespace {

bool parse_bool(const std::string& v) {
  if (v == "1" || v == "true") return true;
  if (v == "0" || v == "false") return false;
  throw std::invalid_argument("bad boolean value: " + v);
}

std::string trim(const std::string& s) {
  size_t a = s.find_first_not_of(" \t\r\n");
  if (a == std::string::npos) return "";
  size_t b = s.find_last_not_of(" \t\r\n");
  return s.substr(a, b - a + 1);
}

}  // namespace

model::ModelConfig TrainConfig::model_config() const {
  model::ModelConfig mc;
  if (model_preset == "paper") mc = model::ModelConfig::paper();
  else if (model_preset == "desk") mc = model::ModelConfig::desk();
  else throw std::invalid_argument("unknown model preset: " + model_preset);

  mc.caff_variant = caff_variant;

  // tau schedule: "a,b,c" per scale or one value for all scales
  {
    std::stringstream ss(tau_schedule);
    std::string tok;
    std::vector<int> taus;
    while (std::getline(ss, tok, ',')) taus.push_back(std::stoi(trim(tok)));
    if (taus.size() == 1) taus = {taus[0], taus[0], taus[0]};
    if (taus.size() != 3) throw std::invalid_argument("tau_schedule needs 1 or 3 values");
    for (int i = 0; i < 3; ++i) mc.tau[size_t(i)] = taus[size_t(i)];
  }
  {
    std::stringstream ss(perturb_order);
    std::string tok;
    std::vector<model::PerturbKind> kinds;
    while (std::getline(ss, tok, ',')) kinds.push_back(model::perturb_from_name(trim(tok)));
    if (kinds.size() != 3) throw std::invalid_argument("perturb_order needs 3 entries");
    bool seen[3] = {false, false, false};
    for (auto k : kinds) seen[int(k)] = true;
    if (!(seen[0] && seen[1] && seen[2]))
      throw std::invalid_argument("perturb_order must be a permutation of P1,P2,P3");
    for (int i = 0; i < 3; ++i) mc.perturb_order[size_t(i)] = kinds[size_t(i)];
  }
  return mc;
}

std::map<std::string, std::string> TrainConfig::to_map() const {
  std::map<std::string, std::string> kv;
  auto put = [&](const std::string& k, auto v) {
    std::ostringstream os;
    os << v;
    kv[k] = os.str();
  };
  put("epochs", epochs);
  put("batch_size", batch_size);
  put("learning_rate", learning_rate);
  put("weight_decay", weight_decay);
  put("crop", crop);
  put("lambda", lambda);
  put("m_levels", m_levels);
  put("sigma", sigma);
  kv["perturb_order"] = perturb_order;
  kv["caff_variant"] = caff_variant;
  kv["tau_schedule"] = tau_schedule;
  put("seed", seed);
  put("labeled_fraction", labeled_fraction);
  kv["model_preset"] = model_preset;
  put("max_steps", max_steps);
  put("unlabeled_batch", unlabeled_batch);
  put("val_fraction", val_fraction);
  put("eval_every", eval_every);
  put("log_every", log_every);
  put("ot_reg", ot_reg);
  put("ot_iters", ot_iters);
  put("ot_tol", ot_tol);
  put("detach_targets", int(detach_targets));
  put("js_consistency", int(js_consistency));
  put("use_consistency", int(use_consistency));
  put("use_ranking", int(use_ranking));
  put("use_global", int(use_global));
  kv["pixel_loss"] = pixel_loss;
  put("single_scale_consistency", int(single_scale_consistency));
  put("ranking_finest_only", int(ranking_finest_only));
  put("flip_augment", int(flip_augment));
  put("perturb_labeled", int(perturb_labeled));
  put("clip_norm", clip_norm);
  return kv;
}

void TrainConfig::apply(const std::map<std::string, std::string>& kv) {
  for (const auto& [k, v] : kv) {
    if (k == "epochs") epochs = std::stoi(v);
    else if (k == "batch_size") batch_size = std::stoi(v);
    else if (k == "learning_rate") learning_rate = std::stod(v);
    else if (k == "weight_decay") weight_decay = std::stod(v);
    else if (k == "crop") crop = std::stoi(v);
    else if (k == "lambda") lambda = std::stod(v);
    else if (k == "m_levels") m_levels = std::stoi(v);
    else if (k == "sigma") sigma = std::stod(v);
    else if (k == "perturb_order") perturb_order = v;
    else if (k == "caff_variant") caff_variant = v;
    else if (k == "tau_schedule") tau_schedule = v;
    else if (k == "seed") seed = std::stoull(v);
    else if (k == "labeled_fraction") labeled_fraction = std::stod(v);
    else if (k == "model_preset") model_preset = v;
    else if (k == "max_steps") max_steps = std::stoi(v);
    else if (k == "unlabeled_batch") unlabeled_batch = std::stoi(v);
    else if (k == "val_fraction") val_fraction = std::stod(v);
    else if (k == "eval_every") eval_every = std::stoi(v);
    else if (k == "log_every") log_every = std::stoi(v);
    else if (k == "ot_reg") ot_reg = std::stod(v);
    else if (k == "ot_iters") ot_iters = std::stoi(v);
    else if (k == "ot_tol") ot_tol = std::stod(v);
    else if (k == "detach_targets") detach_targets = parse_bool(v);
    else if (k == "js_consistency") js_consistency = parse_bool(v);
    else if (k == "use_consistency") use_consistency = parse_bool(v);
    else if (k == "use_ranking") use_ranking = parse_bool(v);
    else if (k == "use_global") use_global = parse_bool(v);
    else if (k == "pixel_loss") pixel_loss = v;
    else if (k == "single_scale_consistency") single_scale_consistency = parse_bool(v);
    else if (k == "ranking_finest_only") ranking_finest_only = parse_bool(v);
    else if (k == "flip_augment") flip_augment = parse_bool(v);
    else if (k == "perturb_labeled") perturb_labeled = parse_bool(v);
    else if (k == "clip_norm") clip_norm = std::stod(v);
    else throw std::invalid_argument("unknown config key: " + k);
  }
}

TrainConfig TrainConfig::from_map(const std::map<std::string, std::string>& kv) {
  TrainConfig cfg;
  cfg.apply(kv);
  return cfg;
}

TrainConfig TrainConfig::from_file(const std::filesystem::path& path) {
  return from_map(read_config_file(path));
}

std::map<std::string, std::string> read_config_file(const std::filesystem::path& path) {
  std::ifstream f(path);
  if (!f) throw std::runtime_error("cannot open config file: " + path.string());
  std::map<std::string, std::string> kv;
  std::string line;
  while (std::getline(f, line)) {
    line = trim(line);
    if (line.empty() || line[0] == '#') continue;
    size_t eq = line.find('=');
    if (eq == std::string::npos)
      throw std::runtime_error("config line is not key=value: " + line);
    kv[trim(line.substr(0, eq))] = trim(line.substr(eq + 1));
  }
  return kv;
}

void write_config_file(const std::filesystem::path& path,
                       const std::map<std::string, std::string>& kv) {
  std::ofstream f(path);
  if (!f) throw std::runtime_error("cannot write config file: " + path.string());
  for (const auto& [k, v] : kv) f << k << "=" << v << "\n";
}

}  // namespace treeformer::train
