#include "hattn/config.hpp"

#include <cstdlib>
#include <fstream>
#include <functional>
#include <map>
#include <sstream>
#include <stdexcept>

namespace hattn {

namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r\n");
  return s.substr(b, e - b + 1);
}

bool parse_bool(const std::string& v, const std::string& key) {
  if (v == "on" || v == "true" || v == "1" || v == "yes") return true;
  if (v == "off" || v == "false" || v == "0" || v == "no") return false;
  throw std::runtime_error("config: bad boolean for " + key + ": '" + v + "'");
}

std::vector<int> parse_int_list(const std::string& v, const std::string& key) {
  std::vector<int> out;
  std::stringstream ss(v);
  std::string item;
  while (std::getline(ss, item, ',')) {
    item = trim(item);
    if (item.empty()) continue;
    try {
      out.push_back(std::stoi(item));
    } catch (...) {
      throw std::runtime_error("config: bad integer list for " + key + ": '" + v + "'");
    }
  }
  if (out.empty()) throw std::runtime_error("config: empty list for " + key);
  return out;
}

std::string source_name(DataSource s) {
  switch (s) {
    case DataSource::kSynthetic: return "synthetic";
    case DataSource::kIdx: return "idx";
    case DataSource::kCifarBinary: return "cifar-binary";
    case DataSource::kImageDir: return "image-dir";
  }
  return "synthetic";
}

DataSource parse_source(const std::string& v) {
  if (v == "synthetic") return DataSource::kSynthetic;
  if (v == "idx") return DataSource::kIdx;
  if (v == "cifar-binary") return DataSource::kCifarBinary;
  if (v == "image-dir") return DataSource::kImageDir;
  throw std::runtime_error("config: unknown data.source '" + v + "'");
}

std::string join_ints(const std::vector<int>& v) {
  std::string out;
  for (std::size_t i = 0; i < v.size(); ++i) {
    if (i) out += ",";
    out += std::to_string(v[i]);
  }
  return out;
}

// Key table: one setter and one getter per key keeps parsing and
// snapshotting in lockstep.
struct KeyEntry {
  std::function<void(RunConfig&, const std::string&)> set;
  std::function<std::string(const RunConfig&)> get;
};

std::map<std::string, KeyEntry> make_key_table() {
  std::map<std::string, KeyEntry> t;
  auto add_int = [&t](const std::string& key, std::function<int&(RunConfig&)> ref) {
    t[key] = {[key, ref](RunConfig& c, const std::string& v) {
                try {
                  ref(c) = std::stoi(v);
                } catch (...) {
                  throw std::runtime_error("config: bad integer for " + key + ": '" + v + "'");
                }
              },
              [ref](const RunConfig& c) { return std::to_string(ref(const_cast<RunConfig&>(c))); }};
  };
  auto add_dbl = [&t](const std::string& key, std::function<double&(RunConfig&)> ref) {
    t[key] = {[key, ref](RunConfig& c, const std::string& v) {
                try {
                  ref(c) = std::stod(v);
                } catch (...) {
                  throw std::runtime_error("config: bad number for " + key + ": '" + v + "'");
                }
              },
              [ref](const RunConfig& c) {
                std::ostringstream os;
                os << ref(const_cast<RunConfig&>(c));
                return os.str();
              }};
  };
  auto add_bool = [&t](const std::string& key, std::function<bool&(RunConfig&)> ref) {
    t[key] = {[key, ref](RunConfig& c, const std::string& v) { ref(c) = parse_bool(v, key); },
              [ref](const RunConfig& c) { return ref(const_cast<RunConfig&>(c)) ? "on" : "off"; }};
  };
  auto add_u64 = [&t](const std::string& key, std::function<std::uint64_t&(RunConfig&)> ref) {
    t[key] = {[key, ref](RunConfig& c, const std::string& v) {
                try {
                  ref(c) = std::stoull(v);
                } catch (...) {
                  throw std::runtime_error("config: bad seed for " + key + ": '" + v + "'");
                }
              },
              [ref](const RunConfig& c) { return std::to_string(ref(const_cast<RunConfig&>(c))); }};
  };

  // dataset
  t["data.source"] = {[](RunConfig& c, const std::string& v) { c.data.source = parse_source(v); },
                      [](const RunConfig& c) { return source_name(c.data.source); }};
  t["data.path"] = {[](RunConfig& c, const std::string& v) { c.data.path = v; },
                    [](const RunConfig& c) { return c.data.path; }};
  add_int("data.image_size", [](RunConfig& c) -> int& { return c.data.image_size; });
  add_int("data.channels", [](RunConfig& c) -> int& { return c.data.channels; });
  add_int("data.num_classes", [](RunConfig& c) -> int& { return c.data.num_classes; });
  add_int("data.train_size", [](RunConfig& c) -> int& { return c.data.train_size; });
  add_int("data.val_size", [](RunConfig& c) -> int& { return c.data.val_size; });
  add_int("data.test_size", [](RunConfig& c) -> int& { return c.data.test_size; });
  add_u64("data.seed", [](RunConfig& c) -> std::uint64_t& { return c.data.seed; });
  t["data.glyph_cells"] = {
      [](RunConfig& c, const std::string& v) { c.data.glyph_cells = parse_int_list(v, "data.glyph_cells"); },
      [](const RunConfig& c) { return join_ints(c.data.glyph_cells); }};
  add_int("data.clutter_blobs", [](RunConfig& c) -> int& { return c.data.clutter_blobs; });

  // model
  add_int("model.image_size", [](RunConfig& c) -> int& { return c.model.image_size; });
  add_int("model.channels", [](RunConfig& c) -> int& { return c.model.channels; });
  add_int("model.num_classes", [](RunConfig& c) -> int& { return c.model.num_classes; });
  add_int("model.glimpse_size", [](RunConfig& c) -> int& { return c.model.glimpse_size; });
  add_int("model.stride", [](RunConfig& c) -> int& { return c.model.stride; });
  add_int("model.feature_dim", [](RunConfig& c) -> int& { return c.model.feature_dim; });
  add_int("model.hidden_dim", [](RunConfig& c) -> int& { return c.model.hidden_dim; });
  add_int("model.latent_dim", [](RunConfig& c) -> int& { return c.model.latent_dim; });
  add_int("model.fg_blocks", [](RunConfig& c) -> int& { return c.model.fg_blocks; });
  add_int("model.fg_channels", [](RunConfig& c) -> int& { return c.model.fg_channels; });
  add_int("model.dec_channels", [](RunConfig& c) -> int& { return c.model.dec_channels; });
  add_int("model.flow_groups", [](RunConfig& c) -> int& { return c.model.flow_groups; });
  add_int("model.spline_bins", [](RunConfig& c) -> int& { return c.model.spline_bins; });
  add_dbl("model.tail_bound", [](RunConfig& c) -> double& { return c.model.tail_bound; });
  add_dbl("model.dropout_p", [](RunConfig& c) -> double& { return c.model.dropout_p; });
  t["model.posterior"] = {
      [](RunConfig& c, const std::string& v) {
        if (v == "flows")
          c.model.flows_posterior = true;
        else if (v == "gaussian")
          c.model.flows_posterior = false;
        else
          throw std::runtime_error("config: model.posterior must be 'flows' or 'gaussian'");
      },
      [](const RunConfig& c) { return c.model.flows_posterior ? "flows" : "gaussian"; }};

  // training
  add_int("train.epochs_phase1", [](RunConfig& c) -> int& { return c.train.epochs1; });
  add_int("train.epochs_phase2", [](RunConfig& c) -> int& { return c.train.epochs2; });
  add_int("train.epochs_phase3", [](RunConfig& c) -> int& { return c.train.epochs3; });
  add_int("train.batch_size", [](RunConfig& c) -> int& { return c.train.batch_size; });
  t["train.alpha"] = {[](RunConfig& c, const std::string& v) {
                        if (v == "auto") {
                          c.train.alpha = 0.0;
                          return;
                        }
                        try {
                          c.train.alpha = std::stod(v);
                        } catch (...) {
                          throw std::runtime_error("config: bad value for train.alpha: '" + v + "'");
                        }
                      },
                      [](const RunConfig& c) {
                        if (c.train.alpha == 0.0) return std::string("auto");
                        std::ostringstream os;
                        os << c.train.alpha;
                        return os.str();
                      }};
  add_dbl("train.beta", [](RunConfig& c) -> double& { return c.train.beta; });
  add_dbl("train.lr_phase1", [](RunConfig& c) -> double& { return c.train.lr1; });
  add_dbl("train.lr_phase2", [](RunConfig& c) -> double& { return c.train.lr2; });
  add_dbl("train.lr_phase3", [](RunConfig& c) -> double& { return c.train.lr3; });
  add_dbl("train.plateau_factor", [](RunConfig& c) -> double& { return c.train.plateau_factor; });
  add_int("train.plateau_patience", [](RunConfig& c) -> int& { return c.train.plateau_patience; });
  add_dbl("train.plateau_tol", [](RunConfig& c) -> double& { return c.train.plateau_tol; });
  add_int("train.early_stop_patience", [](RunConfig& c) -> int& { return c.train.early_stop_patience; });
  add_bool("train.augment.crop", [](RunConfig& c) -> bool& { return c.train.aug_crop; });
  add_bool("train.augment.scale", [](RunConfig& c) -> bool& { return c.train.aug_scale; });
  add_bool("train.augment.flip", [](RunConfig& c) -> bool& { return c.train.aug_flip; });
  add_bool("train.augment.jitter", [](RunConfig& c) -> bool& { return c.train.aug_jitter; });
  add_u64("train.seed", [](RunConfig& c) -> std::uint64_t& { return c.train.seed; });
  add_int("train.time_steps", [](RunConfig& c) -> int& { return c.train.time_steps; });
  t["train.phase3_targets"] = {
      [](RunConfig& c, const std::string& v) {
        if (v == "live")
          c.train.recompute_targets_live = true;
        else if (v == "frozen")
          c.train.recompute_targets_live = false;
        else
          throw std::runtime_error("config: train.phase3_targets must be 'live' or 'frozen'");
      },
      [](const RunConfig& c) { return c.train.recompute_targets_live ? "live" : "frozen"; }};

  // policy
  add_int("policy.sample_budget_train", [](RunConfig& c) -> int& { return c.policy.sample_budget_train; });
  add_int("policy.sample_budget_eval", [](RunConfig& c) -> int& { return c.policy.sample_budget_eval; });
  add_int("policy.time_steps", [](RunConfig& c) -> int& { return c.policy.time_steps; });
  add_dbl("policy.kl_epsilon", [](RunConfig& c) -> double& { return c.policy.kl_epsilon; });

  // evaluation
  add_int("eval.num_seeds", [](RunConfig& c) -> int& { return c.eval.num_seeds; });
  add_int("eval.export_images", [](RunConfig& c) -> int& { return c.eval.export_images; });

  // preset is applied at parse time, then echoed for the snapshot
  return t;
}

const std::map<std::string, KeyEntry>& key_table() {
  static const std::map<std::string, KeyEntry> t = make_key_table();
  return t;
}

}  // namespace

void apply_preset(const std::string& name, RunConfig& cfg) {
  auto set_small = [&cfg]() {
    cfg.model.image_size = 32;
    cfg.model.glimpse_size = 8;
    cfg.model.stride = 4;
    cfg.model.fg_blocks = 3;
    cfg.model.feature_dim = 128;
    cfg.model.hidden_dim = 512;
    cfg.model.latent_dim = 256;
    cfg.model.flow_groups = 4;
    cfg.data.image_size = 32;
  };
  if (name == "svhn") {
    set_small();
    cfg.train.beta = 32;
    cfg.train.lr2 = cfg.train.lr3 = 1e-3;
  } else if (name == "cinic10" || name == "cifar10") {
    set_small();
    cfg.train.beta = 16;
    cfg.train.lr2 = cfg.train.lr3 = 1e-3;
  } else if (name == "cifar100") {
    set_small();
    cfg.model.feature_dim = 512;
    cfg.model.hidden_dim = 2048;
    cfg.model.latent_dim = 1024;
    cfg.model.flow_groups = 6;
    cfg.model.num_classes = 100;
    cfg.data.num_classes = 100;
    cfg.train.beta = 8;
    cfg.train.lr2 = cfg.train.lr3 = 1e-4;
  } else if (name == "tinyimagenet") {
    cfg.model.image_size = 64;
    cfg.data.image_size = 64;
    cfg.model.glimpse_size = 16;
    cfg.model.stride = 8;
    cfg.model.fg_blocks = 7;
    cfg.model.feature_dim = 512;
    cfg.model.hidden_dim = 2048;
    cfg.model.latent_dim = 1024;
    cfg.model.flow_groups = 6;
    cfg.model.num_classes = 200;
    cfg.data.num_classes = 200;
    cfg.train.beta = 8;
    cfg.train.lr2 = cfg.train.lr3 = 1e-4;
  } else {
    throw std::runtime_error("config: unknown preset '" + name + "'");
  }
  cfg.train.lr1 = 1e-3;
}

void validate_config(const RunConfig& cfg) {
  auto fail = [](const std::string& m) { throw std::runtime_error("config: " + m); };
  if (cfg.model.glimpse_size <= 0 || cfg.model.stride <= 0) fail("glimpse geometry must be positive");
  if ((cfg.model.image_size - cfg.model.glimpse_size) % cfg.model.stride != 0)
    fail("(image_size - glimpse_size) must be divisible by stride");
  if (cfg.model.image_size != cfg.data.image_size) fail("model and data image_size disagree");
  if (cfg.model.num_classes != cfg.data.num_classes) fail("model and data num_classes disagree");
  if (cfg.train.alpha != 0.0 &&
      std::abs(cfg.train.alpha * cfg.model.latent_dim - 1.0) > 1e-9)
    fail("train.alpha must equal 1/latent_dim (or 'auto')");
  if (cfg.train.beta <= 0) fail("train.beta must be positive");
  if (cfg.policy.sample_budget_train < 1 || cfg.policy.sample_budget_eval < 1)
    fail("sample budgets must be >= 1");
  if (cfg.policy.time_steps < 1 || cfg.train.time_steps < 1) fail("time budget must be >= 1");
  if (cfg.policy.time_steps != cfg.train.time_steps)
    fail("policy.time_steps and train.time_steps disagree");
  const int grid = (cfg.model.image_size - cfg.model.glimpse_size) / cfg.model.stride + 1;
  if (cfg.policy.time_steps > grid * grid) fail("time budget exceeds candidate count");
  if (cfg.train.batch_size < 1) fail("batch_size must be >= 1");
  if (cfg.model.spline_bins < 2) fail("spline_bins must be >= 2");
  if (cfg.model.tail_bound <= 0) fail("tail_bound must be positive");
  if (cfg.data.source == DataSource::kSynthetic) {
    for (int cell : cfg.data.glyph_cells)
      if (cell < 0 || cell >= grid * grid) fail("glyph cell index out of grid range");
  } else if (cfg.data.path.empty()) {
    fail("data.path required for raw dataset sources");
  }
}

RunConfig parse_config_text(const std::string& text) {
  RunConfig cfg;
  std::istringstream is(text);
  std::string line;
  int lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line = line.substr(0, hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos)
      throw std::runtime_error("config: line " + std::to_string(lineno) + " is not 'key = value'");
    const std::string key = trim(line.substr(0, eq));
    const std::string value = trim(line.substr(eq + 1));
    if (key == "preset") {
      apply_preset(value, cfg);
      continue;
    }
    auto it = key_table().find(key);
    if (it == key_table().end())
      throw std::runtime_error("config: unknown key '" + key + "' on line " +
                               std::to_string(lineno));
    it->second.set(cfg, value);
  }
  validate_config(cfg);
  return cfg;
}

RunConfig load_config_file(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw std::runtime_error("cannot open config file: " + path);
  std::stringstream ss;
  ss << is.rdbuf();
  return parse_config_text(ss.str());
}

std::string config_to_text(const RunConfig& cfg) {
  std::string out;
  for (const auto& [key, entry] : key_table()) out += key + " = " + entry.get(cfg) + "\n";
  return out;
}

double effective_alpha(const RunConfig& cfg) {
  return cfg.train.alpha != 0.0 ? cfg.train.alpha : 1.0 / cfg.model.latent_dim;
}

std::string run_root() {
  const char* env = std::getenv("HATTN_RUN_ROOT");
  return env && *env ? std::string(env) : std::string("runs");
}

}  // namespace hattn
