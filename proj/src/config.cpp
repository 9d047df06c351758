#include "advlab/config.hpp"

#include "advlab/model.hpp"

#include <algorithm>
#include <charconv>
#include <cstdio>
#include <fstream>
#include <sstream>

namespace advlab {

namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

std::vector<std::string> split_ws(const std::string& s) {
  std::vector<std::string> out;
  std::istringstream is(s);
  std::string tok;
  while (is >> tok) out.push_back(tok);
  return out;
}

[[noreturn]] void bad_key(const std::string& section, const std::string& key) {
  throw ConfigError("unknown key '" + key + "' in section [" + section + "]");
}

int to_int(const std::string& section, const std::string& key,
           const std::string& v) {
  int out = 0;
  const auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc{} || p != v.data() + v.size())
    throw ConfigError("key '" + key + "' in [" + section +
                      "] expects an integer, got '" + v + "'");
  return out;
}

std::uint64_t to_u64(const std::string& section, const std::string& key,
                     const std::string& v) {
  std::uint64_t out = 0;
  const auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc{} || p != v.data() + v.size())
    throw ConfigError("key '" + key + "' in [" + section +
                      "] expects an unsigned integer, got '" + v + "'");
  return out;
}

double to_double(const std::string& section, const std::string& key,
                 const std::string& v) {
  try {
    size_t pos = 0;
    const double out = std::stod(v, &pos);
    if (pos != v.size()) throw std::invalid_argument(v);
    return out;
  } catch (const std::exception&) {
    throw ConfigError("key '" + key + "' in [" + section +
                      "] expects a number, got '" + v + "'");
  }
}

}  // namespace

void Config::validate() const {
  if (models.empty()) throw ConfigError("no models registered");
  for (const auto& entry : models) {
    stock_model_spec(entry.arch);  // throws on unknown arch
    if (entry.augment < 0)
      throw ConfigError("model augment noise must be >= 0");
    if (entry.name == blackbox.name)
      throw ConfigError("model name '" + entry.name +
                        "' collides with the black-box model");
  }
  stock_model_spec(blackbox.arch);
  if (testset.size < 1) throw ConfigError("test set size must be positive");
  if (data.train_count < 1 || data.pool_count < 1 || data.blackbox_count < 1)
    throw ConfigError("dataset split sizes must be positive");
  if (train.epochs < 1 || train.batch < 1)
    throw ConfigError("training epochs and batch size must be positive");
  if (evaluation.scan_step <= 0 || evaluation.scan_max_b <= 0)
    throw ConfigError("scan step and max_b must be positive");
  if (evaluation.k_depths.empty()) throw ConfigError("no top-k depths");
  if (geometry.resolution < 1 || geometry.logit_samples < 2)
    throw ConfigError("geometry resolution is invalid");
}

std::string Config::canonical_text() const {
  // out and threads are excluded: they locate and schedule the run without
  // affecting any produced value, and the hash must match across replicas.
  std::ostringstream os;
  os.precision(17);
  os << "seed " << seed << "\n";
  os << "[dataset]\n";
  os << "generator " << data.generator << "\n";
  os << "train_count " << data.train_count << "\n";
  os << "blackbox_count " << data.blackbox_count << "\n";
  os << "pool_count " << data.pool_count << "\n";
  os << "noise_std " << data.noise_std << "\n";
  os << "[models]\n";
  for (const auto& entry : models)
    os << entry.name << " " << entry.arch << " " << entry.augment << "\n";
  os << "[blackbox]\n";
  os << "name " << blackbox.name << "\n";
  os << "arch " << blackbox.arch << "\n";
  os << "[train]\n";
  os << "epochs " << train.epochs << "\n";
  os << "batch " << train.batch << "\n";
  os << "learning_rate " << train.learning_rate << "\n";
  os << "momentum " << train.momentum << "\n";
  os << "floor " << train.floor << "\n";
  os << "blackbox_augment " << train.blackbox_augment << "\n";
  os << "[testset]\n";
  os << "size " << testset.size << "\n";
  os << "[attack]\n";
  os << "lambda " << attack.lambda << "\n";
  os << "learning_rate " << attack.learning_rate << "\n";
  os << "iterations " << attack.iterations << "\n";
  os << "target_rmsd " << attack.target_rmsd << "\n";
  os << "rmsd_tolerance " << attack.rmsd_tolerance << "\n";
  os << "success_floor " << attack.success_floor << "\n";
  os << "[ensemble]\n";
  os << "learning_rate " << ensemble.learning_rate << "\n";
  os << "targeted_learning_rate " << ensemble.targeted_learning_rate << "\n";
  os << "mw_learning_rate " << ensemble.mw_learning_rate << "\n";
  os << "eta " << ensemble.eta << "\n";
  os << "iterations " << ensemble.iterations << "\n";
  os << "[evaluation]\n";
  os << "k_depths";
  for (int k : evaluation.k_depths) os << " " << k;
  os << "\n";
  os << "noise_stds";
  for (double s : evaluation.noise_stds) os << " " << s;
  os << "\n";
  os << "noises_per_image " << evaluation.noises_per_image << "\n";
  os << "scan_step " << evaluation.scan_step << "\n";
  os << "scan_max_b " << evaluation.scan_max_b << "\n";
  os << "scan_source " << evaluation.scan_source << "\n";
  os << "scan_eval " << evaluation.scan_eval << "\n";
  os << "[geometry]\n";
  os << "zoom_in " << geometry.zoom_in << "\n";
  os << "zoom_out " << geometry.zoom_out << "\n";
  os << "resolution " << geometry.resolution << "\n";
  os << "logit_max_b " << geometry.logit_max_b << "\n";
  os << "logit_samples " << geometry.logit_samples << "\n";
  return os.str();
}

std::string Config::hash() const {
  char buf[16];
  std::snprintf(buf, sizeof buf, "%08x", crc32_str(canonical_text()));
  return buf;
}

Config parse_config(const std::string& text) {
  Config cfg;
  bool models_cleared = false;
  std::string section;  // "" = top level

  std::istringstream is(text);
  std::string raw;
  while (std::getline(is, raw)) {
    const auto hash_pos = raw.find('#');
    if (hash_pos != std::string::npos) raw.erase(hash_pos);
    const std::string line = trim(raw);
    if (line.empty()) continue;

    if (line.front() == '[') {
      if (line.back() != ']')
        throw ConfigError("malformed section header '" + line + "'");
      section = line.substr(1, line.size() - 2);
      const std::vector<std::string> known = {
          "dataset", "models",     "blackbox", "train",   "testset",
          "attack",  "ensemble",   "evaluation", "geometry"};
      if (std::find(known.begin(), known.end(), section) == known.end())
        throw ConfigError("unknown section [" + section + "]");
      continue;
    }

    const auto toks = split_ws(line);
    const std::string& key = toks.front();
    auto one = [&]() -> const std::string& {
      if (toks.size() != 2)
        throw ConfigError("key '" + key + "' in [" + section +
                          "] expects exactly one value");
      return toks[1];
    };

    if (section.empty()) {
      if (key == "seed") cfg.seed = to_u64(section, key, one());
      else if (key == "out") cfg.out = one();
      else if (key == "threads") cfg.threads = to_int(section, key, one());
      else bad_key("(top level)", key);
    } else if (section == "dataset") {
      if (key == "generator") cfg.data.generator = one();
      else if (key == "train_count") cfg.data.train_count = to_int(section, key, one());
      else if (key == "blackbox_count") cfg.data.blackbox_count = to_int(section, key, one());
      else if (key == "pool_count") cfg.data.pool_count = to_int(section, key, one());
      else if (key == "noise_std") cfg.data.noise_std = to_double(section, key, one());
      else bad_key(section, key);
    } else if (section == "models") {
      if (toks.size() != 2 && toks.size() != 3)
        throw ConfigError("[models] entries are 'name arch [augment]'");
      if (!models_cleared) {
        cfg.models.clear();
        models_cleared = true;
      }
      Config::ModelEntry entry;
      entry.name = toks[0];
      entry.arch = toks[1];
      if (toks.size() == 3) entry.augment = to_double(section, key, toks[2]);
      cfg.models.push_back(std::move(entry));
    } else if (section == "blackbox") {
      if (key == "name") cfg.blackbox.name = one();
      else if (key == "arch") cfg.blackbox.arch = one();
      else bad_key(section, key);
    } else if (section == "train") {
      if (key == "epochs") cfg.train.epochs = to_int(section, key, one());
      else if (key == "batch") cfg.train.batch = to_int(section, key, one());
      else if (key == "learning_rate") cfg.train.learning_rate = to_double(section, key, one());
      else if (key == "momentum") cfg.train.momentum = to_double(section, key, one());
      else if (key == "floor") cfg.train.floor = to_double(section, key, one());
      else if (key == "blackbox_augment") cfg.train.blackbox_augment = to_double(section, key, one());
      else bad_key(section, key);
    } else if (section == "testset") {
      if (key == "size") cfg.testset.size = to_int(section, key, one());
      else bad_key(section, key);
    } else if (section == "attack") {
      if (key == "lambda") cfg.attack.lambda = to_double(section, key, one());
      else if (key == "learning_rate") cfg.attack.learning_rate = to_double(section, key, one());
      else if (key == "iterations") cfg.attack.iterations = to_int(section, key, one());
      else if (key == "target_rmsd") cfg.attack.target_rmsd = to_double(section, key, one());
      else if (key == "rmsd_tolerance") cfg.attack.rmsd_tolerance = to_double(section, key, one());
      else if (key == "success_floor") cfg.attack.success_floor = to_double(section, key, one());
      else bad_key(section, key);
    } else if (section == "ensemble") {
      if (key == "learning_rate") cfg.ensemble.learning_rate = to_double(section, key, one());
      else if (key == "targeted_learning_rate") cfg.ensemble.targeted_learning_rate = to_double(section, key, one());
      else if (key == "mw_learning_rate") cfg.ensemble.mw_learning_rate = to_double(section, key, one());
      else if (key == "eta") cfg.ensemble.eta = to_double(section, key, one());
      else if (key == "iterations") cfg.ensemble.iterations = to_int(section, key, one());
      else bad_key(section, key);
    } else if (section == "evaluation") {
      if (key == "k_depths") {
        cfg.evaluation.k_depths.clear();
        for (size_t i = 1; i < toks.size(); ++i)
          cfg.evaluation.k_depths.push_back(to_int(section, key, toks[i]));
      } else if (key == "noise_stds") {
        cfg.evaluation.noise_stds.clear();
        for (size_t i = 1; i < toks.size(); ++i)
          cfg.evaluation.noise_stds.push_back(to_double(section, key, toks[i]));
      } else if (key == "noises_per_image") {
        cfg.evaluation.noises_per_image = to_int(section, key, one());
      } else if (key == "scan_step") {
        cfg.evaluation.scan_step = to_double(section, key, one());
      } else if (key == "scan_max_b") {
        cfg.evaluation.scan_max_b = to_double(section, key, one());
      } else if (key == "scan_source") {
        cfg.evaluation.scan_source = one();
      } else if (key == "scan_eval") {
        cfg.evaluation.scan_eval = one();
      } else {
        bad_key(section, key);
      }
    } else if (section == "geometry") {
      if (key == "zoom_in") cfg.geometry.zoom_in = to_double(section, key, one());
      else if (key == "zoom_out") cfg.geometry.zoom_out = to_double(section, key, one());
      else if (key == "resolution") cfg.geometry.resolution = to_int(section, key, one());
      else if (key == "logit_max_b") cfg.geometry.logit_max_b = to_double(section, key, one());
      else if (key == "logit_samples") cfg.geometry.logit_samples = to_int(section, key, one());
      else bad_key(section, key);
    }
  }
  cfg.validate();
  return cfg;
}

Config load_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config '" + path.string() + "'");
  std::string text((std::istreambuf_iterator<char>(in)),
                   std::istreambuf_iterator<char>());
  return parse_config(text);
}

}  // namespace advlab
